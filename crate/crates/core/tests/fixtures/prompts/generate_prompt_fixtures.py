"""Regenerates the prompt golden files.

    python generate_prompt_fixtures.py

Each case_<name>.json holds the template, examples and query; the matching
case_<name>.txt holds the exact prompt bytes (no trailing newline).
"""
import json
import re

DEFAULT = {"example_format": "{src} = {tgt}", "separator": " </s> ", "query_format": "{src} = "}
SLOT = re.compile(r"\{src\}|\{tgt\}")


def fill(pattern, src, tgt):
    return SLOT.sub(lambda m: src if m.group(0) == "{src}" else tgt, pattern)


def render(template, examples, query):
    out = "".join(fill(template["example_format"], s, t) + template["separator"] for s, t in examples)
    return out + fill(template["query_format"], query, "")


PATENT = [
    ("Die Steckdose ist geerdet.", "The socket is grounded."),
    ("Ein Gehäuse aus Kunststoff.", "A housing made of plastic."),
    ("Das Ventil öffnet bei 3,5 bar.", "The valve opens at 3.5 bar."),
    ("Siehe Fig. 2 und Anspruch 1.", "See Fig. 2 and claim 1."),
]

CASES = {
    "zero_ice": (DEFAULT, [], "Die Steckdose ist geerdet."),
    "one_ice": (DEFAULT, PATENT[:1], "Ein Gehäuse aus Kunststoff."),
    "three_ice_tricky": (
        DEFAULT,
        [
            ("Formel {tgt} bleibt = gleich", "Formula {src} stays = equal"),
            ("A </s> B", "A </s> B"),
            ("Umlaute äöü ß €", "umlauts äöü ß €"),
        ],
        "Wert = {src}",
    ),
    "sixteen_ice": (
        DEFAULT,
        [PATENT[i % 4] if i % 5 else (f"Satz {i}.", f"Sentence {i}.") for i in range(16)],
        "Das Ventil schließt.",
    ),
    "custom_template": (
        {"example_format": "German: {src}\nEnglish: {tgt}", "separator": "\n\n", "query_format": "German: {src}\nEnglish:"},
        PATENT[:2],
        "Das Ventil öffnet.",
    ),
}

for name, (template, examples, query) in CASES.items():
    case = {
        "template": template,
        "examples": [{"source": s, "target": t} for s, t in examples],
        "query": query,
    }
    with open(f"case_{name}.json", "w", encoding="utf-8") as f:
        json.dump(case, f, ensure_ascii=False, indent=2)
        f.write("\n")
    with open(f"case_{name}.txt", "w", encoding="utf-8", newline="") as f:
        f.write(render(template, examples, query))
