//! Few-shot translation prompts.
//!
//! The default template renders
//!
//! ```text
//! {src_1} = {tgt_1} </s> {src_2} = {tgt_2} </s> {query} =
//! ```
//!
//! with the completion left blank for the model to fill in.

use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;

const SRC_SLOT: &str = "{src}";
const TGT_SLOT: &str = "{tgt}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    /// Pattern for one in-context example, with `{src}` and `{tgt}` slots.
    pub example_format: String,
    /// Emitted after every example.
    pub separator: String,
    /// Pattern for the sentence to translate, with a `{src}` slot.
    pub query_format: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            example_format: "{src} = {tgt}".to_string(),
            separator: " </s> ".to_string(),
            query_format: "{src} = ".to_string(),
        }
    }
}

/// Substitutes `{src}`/`{tgt}` in one left-to-right pass so slot-like text
/// inside the inserted values is never expanded.
fn fill(pattern: &str, src: &str, tgt: &str, out: &mut String) {
    let mut rest = pattern;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(SRC_SLOT) {
            out.push_str(src);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(TGT_SLOT) {
            out.push_str(tgt);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
}

impl PromptTemplate {
    /// The examples part of a prompt: every example followed by the separator.
    pub fn render_prefix<'a, I>(&self, ices: I) -> String
    where
        I: IntoIterator<Item = &'a SentencePair>,
    {
        let mut out = String::new();
        for ice in ices {
            self.push_example(&mut out, ice);
        }
        out
    }

    /// Appends one example plus separator to an existing prefix.
    pub fn push_example(&self, prefix: &mut String, ice: &SentencePair) {
        fill(&self.example_format, &ice.source, &ice.target, prefix);
        prefix.push_str(&self.separator);
    }

    /// Completes a prefix from [`render_prefix`](Self::render_prefix) with the query.
    pub fn render_query(&self, prefix: &str, query_source: &str) -> String {
        let mut out = String::with_capacity(prefix.len() + query_source.len() + self.query_format.len());
        out.push_str(prefix);
        fill(&self.query_format, query_source, "", &mut out);
        out
    }

    pub fn render<'a, I>(&self, ices: I, query_source: &str) -> String
    where
        I: IntoIterator<Item = &'a SentencePair>,
    {
        self.render_query(&self.render_prefix(ices), query_source)
    }

    /// Splits a rendered prompt back into example targets and the query
    /// source. Example segments are split at the first occurrence of the
    /// literal text between `{src}` and `{tgt}`.
    pub fn parse(&self, prompt: &str) -> ParsedPrompt {
        let mut segments: Vec<&str> = if self.separator.is_empty() {
            vec![prompt]
        } else {
            prompt.split(self.separator.as_str()).collect()
        };
        let query_segment = segments.pop().unwrap_or("");
        let (q_pre, q_post) = split_slot(&self.query_format, SRC_SLOT);
        let query = query_segment.strip_prefix(q_pre).unwrap_or(query_segment);
        let query = query.strip_suffix(q_post).unwrap_or(query);

        let infix = example_infix(&self.example_format);
        let (_, e_post) = split_slot(&self.example_format, TGT_SLOT);
        let example_targets = segments
            .into_iter()
            .map(|seg| {
                let tgt = match infix {
                    Some(infix) if !infix.is_empty() => seg.split_once(infix).map_or("", |(_, t)| t),
                    _ => seg,
                };
                tgt.strip_suffix(e_post).unwrap_or(tgt).to_string()
            })
            .collect();
        ParsedPrompt {
            example_targets,
            query_source: query.to_string(),
        }
    }
}

fn split_slot<'a>(pattern: &'a str, slot: &str) -> (&'a str, &'a str) {
    match pattern.find(slot) {
        Some(pos) => (&pattern[..pos], &pattern[pos + slot.len()..]),
        None => (pattern, ""),
    }
}

fn example_infix(pattern: &str) -> Option<&str> {
    let s = pattern.find(SRC_SLOT)? + SRC_SLOT.len();
    let t = pattern.find(TGT_SLOT)?;
    (s <= t).then(|| &pattern[s..t])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub example_targets: Vec<String>,
    pub query_source: String,
}

/// Length proxy for the backend tokenizer: twice the whitespace token count.
pub fn estimate_length(prompt_text: &str) -> usize {
    prompt_text.split_whitespace().count() * 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(id: usize, s: &str, t: &str) -> SentencePair {
        SentencePair {
            id,
            source: s.into(),
            target: t.into(),
        }
    }

    #[test]
    fn renders_default_template() {
        let t = PromptTemplate::default();
        assert_eq!(
            t.render([&pair(0, "Hallo", "Hello")], "Welt"),
            "Hallo = Hello </s> Welt = "
        );
        assert_eq!(t.render([], "Welt"), "Welt = ");
        let ices = [pair(0, "s1", "t1"), pair(1, "s2", "t2")];
        assert_eq!(t.render(&ices, "s3"), "s1 = t1 </s> s2 = t2 </s> s3 = ");
    }

    #[test]
    fn slot_text_in_values_is_not_expanded() {
        let t = PromptTemplate::default();
        assert_eq!(t.render([&pair(0, "{tgt}", "x")], "{src}"), "{tgt} = x </s> {src} = ");
    }

    #[test]
    fn parse_recovers_targets_and_query() {
        let t = PromptTemplate::default();
        let ices = [pair(0, "a b", "x y"), pair(1, "c", "z")];
        let parsed = t.parse(&t.render(&ices, "q r"));
        assert_eq!(parsed.example_targets, ["x y", "z"]);
        assert_eq!(parsed.query_source, "q r");
        assert_eq!(t.parse("solo = ").query_source, "solo");
    }

    #[test]
    fn length_proxy() {
        assert_eq!(estimate_length(""), 0);
        assert_eq!(estimate_length("a b c"), 6);
    }

    fn text() -> impl Strategy<Value = String> {
        "[a-zäö]{1,6}( [a-zäö]{1,6}){0,3}"
    }

    proptest! {
        #[test]
        fn prompts_grow_by_prefix_extension(
            a in prop::collection::vec((text(), text()), 0..5),
            b in prop::collection::vec((text(), text()), 0..5),
            q in text(),
        ) {
            let t = PromptTemplate::default();
            let a: Vec<_> = a.into_iter().enumerate().map(|(i, (s, g))| pair(i, &s, &g)).collect();
            let b: Vec<_> = b.into_iter().enumerate().map(|(i, (s, g))| pair(i, &s, &g)).collect();
            let whole = t.render(a.iter().chain(&b), &q);
            prop_assert_eq!(whole, t.render_prefix(&a) + &t.render(&b, &q));
        }

        #[test]
        fn distinct_ice_lists_render_distinctly(
            a in prop::collection::vec((text(), text()), 0..4),
            b in prop::collection::vec((text(), text()), 0..4),
            q in text(),
        ) {
            prop_assume!(a != b);
            let t = PromptTemplate::default();
            let a: Vec<_> = a.into_iter().map(|(s, g)| pair(0, &s, &g)).collect();
            let b: Vec<_> = b.into_iter().map(|(s, g)| pair(0, &s, &g)).collect();
            prop_assert_ne!(t.render(&a, &q), t.render(&b, &q));
        }

        #[test]
        fn length_proxy_is_monotone(a in ".{0,30}", b in ".{0,30}") {
            prop_assert!(estimate_length(&(a.clone() + &b)) >= estimate_length(&a));
        }
    }
}
