//! JSON-over-HTTP clients for external model servers.
//!
//! Translator: `POST {"prompt": ...}` → `{"translation": ..., "prompt_tokens": n?}`.
//! Estimator:  `POST {"source": ..., "hypothesis": ...}` → `{"score": x}`.
//!
//! A `413` response, or a reported `prompt_tokens` above the configured
//! limit, is surfaced as [`BackendError::PromptTooLong`].

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{first_line, BackendError, Estimator, Translation, Translator};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpOptions {
    pub timeout: Duration,
    /// Limit applied to backend-reported prompt lengths.
    pub max_prompt_tokens: Option<usize>,
}

impl Default for HttpOptions {
    fn default() -> Self {
        HttpOptions {
            timeout: Duration::from_secs(120),
            max_prompt_tokens: None,
        }
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    translation: String,
    #[serde(default)]
    prompt_tokens: Option<usize>,
}

#[derive(Serialize)]
struct EstimateRequest<'a> {
    source: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct EstimateResponse {
    score: f64,
}

fn build_client(url: &str, opts: &HttpOptions) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(opts.timeout)
        .build()
        .map_err(|e| BackendError::BadSpec {
            spec: url.to_string(),
            reason: e.to_string(),
        })
}

fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    client: &Client,
    url: &str,
    body: &Req,
) -> Result<Resp, BackendError> {
    let resp = client
        .post(url)
        .json(body)
        .send()
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
    if status == 413 {
        return Err(BackendError::PromptTooLong(text));
    }
    if !(200..300).contains(&status) {
        return Err(BackendError::Status { status, body: text });
    }
    serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{e}: {text}")))
}

pub struct HttpTranslator {
    url: String,
    client: Client,
    opts: HttpOptions,
}

impl HttpTranslator {
    pub fn new(url: &str, opts: HttpOptions) -> Result<Self, BackendError> {
        Ok(HttpTranslator {
            url: url.to_string(),
            client: build_client(url, &opts)?,
            opts,
        })
    }
}

impl Translator for HttpTranslator {
    fn name(&self) -> &str {
        &self.url
    }

    fn max_prompt_tokens(&self) -> Option<usize> {
        self.opts.max_prompt_tokens
    }

    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        let resp: TranslateResponse = post(&self.client, &self.url, &TranslateRequest { prompt })?;
        if let (Some(n), Some(max)) = (resp.prompt_tokens, self.opts.max_prompt_tokens) {
            if n > max {
                return Err(BackendError::PromptTooLong(format!("{n} tokens > {max}")));
            }
        }
        Ok(Translation {
            text: first_line(&resp.translation).to_string(),
            prompt_tokens: resp.prompt_tokens,
        })
    }
}

pub struct HttpEstimator {
    url: String,
    client: Client,
}

impl HttpEstimator {
    pub fn new(url: &str, opts: HttpOptions) -> Result<Self, BackendError> {
        Ok(HttpEstimator {
            url: url.to_string(),
            client: build_client(url, &opts)?,
        })
    }
}

impl Estimator for HttpEstimator {
    fn name(&self) -> &str {
        &self.url
    }

    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError> {
        let resp: EstimateResponse = post(&self.client, &self.url, &EstimateRequest { source, hypothesis })?;
        if !resp.score.is_finite() {
            return Err(BackendError::Protocol(format!("non-finite score {}", resp.score)));
        }
        Ok(resp.score)
    }
}


#[cfg(test)]
mod tests {
    use super::test_server::serve;
    use super::*;
    use crate::backends::{RetryPolicy, Retrying};

    fn quick() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(4),
        }
    }

    #[test]
    fn translator_round_trip() {
        let server = serve(vec![(
            200,
            r#"{"translation":" Hello world \nignored","prompt_tokens":7}"#.into(),
        )]);
        let t = HttpTranslator::new(&server.url, HttpOptions::default()).unwrap();
        let out = t.translate("Hallo Welt = ").unwrap();
        assert_eq!(out.text, "Hello world");
        assert_eq!(out.prompt_tokens, Some(7));
        assert_eq!(
            server.requests.lock().unwrap()[0],
            serde_json::json!({"prompt": "Hallo Welt = "})
        );
    }

    #[test]
    fn estimator_round_trip() {
        let server = serve(vec![(200, r#"{"score": 42.5}"#.into())]);
        let e = HttpEstimator::new(&server.url, HttpOptions::default()).unwrap();
        assert_eq!(e.estimate("Hallo", "Hello").unwrap(), 42.5);
        assert_eq!(
            server.requests.lock().unwrap()[0],
            serde_json::json!({"source": "Hallo", "hypothesis": "Hello"})
        );
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let server = serve(vec![
            (503, "busy".into()),
            (500, "oops".into()),
            (200, r#"{"score": 1}"#.into()),
        ]);
        let e = Retrying::new(
            HttpEstimator::new(&server.url, HttpOptions::default()).unwrap(),
            quick(),
        );
        assert_eq!(e.estimate("a", "b").unwrap(), 1.0);
        assert_eq!(server.requests.lock().unwrap().len(), 3);
    }

    #[test]
    fn reported_length_over_limit_is_prompt_too_long() {
        let server = serve(vec![(200, r#"{"translation":"x","prompt_tokens":5000}"#.into())]);
        let opts = HttpOptions {
            max_prompt_tokens: Some(2048),
            ..Default::default()
        };
        let t = HttpTranslator::new(&server.url, opts).unwrap();
        assert!(matches!(t.translate("p"), Err(BackendError::PromptTooLong(_))));
    }

    #[test]
    fn status_413_is_prompt_too_long() {
        let server = serve(vec![(413, "too long".into())]);
        let t = HttpTranslator::new(&server.url, HttpOptions::default()).unwrap();
        assert!(matches!(t.translate("p"), Err(BackendError::PromptTooLong(_))));
    }

    #[test]
    fn malformed_body_is_protocol_error() {
        let server = serve(vec![(200, r#"{"nope": 1}"#.into())]);
        let e = HttpEstimator::new(&server.url, HttpOptions::default()).unwrap();
        assert!(matches!(e.estimate("a", "b"), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn unreachable_server_is_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let t = HttpTranslator::new(&url, HttpOptions::default()).unwrap();
        assert!(t.translate("p").unwrap_err().is_transport());
    }
}
