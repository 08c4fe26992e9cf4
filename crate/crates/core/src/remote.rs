//! HTTP/JSON clients for remote embedding and LM backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, EncoderBackend};
use crate::error::{PoemError, Result};
use crate::reward::{LmBackend, ScoreRequest, ScoreResponse};

pub const EMBED_URL_ENV: &str = "POEM_EMBED_URL";
pub const LM_URL_ENV: &str = "POEM_LM_URL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

/// Picks the explicit URL if given, otherwise the environment variable.
pub fn resolve_url(explicit: Option<&str>, env_var: &str) -> Result<String> {
    match explicit {
        Some(url) => Ok(url.to_string()),
        None => std::env::var(env_var).map_err(|_| {
            PoemError::invalid(format!(
                "no backend URL configured and `{env_var}` is unset"
            ))
        }),
    }
}

#[derive(Debug, Clone)]
struct JsonPoster {
    url: String,
    id: String,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
}

impl JsonPoster {
    fn new(kind: &str, url: String, policy: RetryPolicy) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(policy.timeout)
            .build()
            .map_err(|e| PoemError::Backend {
                backend: kind.to_string(),
                attempts: 0,
                last: e.to_string(),
            })?;
        Ok(JsonPoster {
            id: format!("{kind}({url})"),
            url,
            client,
            policy,
        })
    }

    fn backend_err(&self, attempts: u32, last: String) -> PoemError {
        PoemError::Backend {
            backend: self.id.clone(),
            attempts,
            last,
        }
    }

    /// POSTs `body`, retrying connection failures, 429 and 5xx with
    /// exponential backoff. Other 4xx statuses fail immediately.
    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp> {
        let mut last = String::new();
        for attempt in 1..=self.policy.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.policy.backoff(attempt - 1));
            }
            let response = match self.client.post(&self.url).json(body).send() {
                Ok(r) => r,
                Err(e) => {
                    last = format!("request failed: {e}");
                    log::debug!("{} attempt {attempt}: {last}", self.id);
                    continue;
                }
            };
            let status = response.status();
            if status.is_success() {
                let bytes = response
                    .bytes()
                    .map_err(|e| self.backend_err(attempt, format!("reading body: {e}")))?;
                return serde_json::from_slice(&bytes).map_err(|e| PoemError::Protocol {
                    backend: self.id.clone(),
                    detail: format!("malformed response: {e}"),
                });
            }
            last = format!("HTTP {status}");
            log::debug!("{} attempt {attempt}: {last}", self.id);
            if !(status.is_server_error() || status.as_u16() == 429) {
                return Err(self.backend_err(attempt, last));
            }
        }
        Err(self.backend_err(self.policy.max_attempts, last))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for `POST {"texts": [...]}` -> `{"embeddings": [[...]], "dim": n}`.
#[derive(Debug, Clone)]
pub struct RemoteEncoder {
    poster: JsonPoster,
    expected_dim: Option<usize>,
}

impl RemoteEncoder {
    pub fn new(url: impl Into<String>, policy: RetryPolicy) -> Result<Self> {
        Ok(RemoteEncoder {
            poster: JsonPoster::new("remote-encoder", url.into(), policy)?,
            expected_dim: None,
        })
    }

    pub fn from_env(policy: RetryPolicy) -> Result<Self> {
        Self::new(resolve_url(None, EMBED_URL_ENV)?, policy)
    }

    /// Rejects responses whose `dim` differs from `dim`.
    pub fn with_expected_dim(mut self, dim: usize) -> Self {
        self.expected_dim = Some(dim);
        self
    }
}

impl EncoderBackend for RemoteEncoder {
    fn id(&self) -> &str {
        &self.poster.id
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if let Some(t) = texts.iter().find(|t| t.is_empty()) {
            return Err(PoemError::invalid(format!(
                "cannot encode empty text {t:?}"
            )));
        }
        let resp: EmbedResponse = self.poster.post(&EmbedRequest { texts })?;
        let protocol = |detail: String| PoemError::Protocol {
            backend: self.poster.id.clone(),
            detail,
        };
        if resp.embeddings.len() != texts.len() {
            return Err(protocol(format!(
                "requested {} embeddings, got {}",
                texts.len(),
                resp.embeddings.len()
            )));
        }
        if let Some(expected) = self.expected_dim.filter(|&d| d != resp.dim) {
            return Err(self.poster.backend_err(
                1,
                format!("dim {} does not match configured {expected}", resp.dim),
            ));
        }
        resp.embeddings
            .into_iter()
            .enumerate()
            .map(|(i, values)| {
                if values.len() != resp.dim {
                    return Err(self.poster.backend_err(
                        1,
                        format!(
                            "embedding {i} has {} values, declared dim {}",
                            values.len(),
                            resp.dim
                        ),
                    ));
                }
                Embedding::new(values).map_err(|e| protocol(format!("embedding {i}: {e}")))
            })
            .collect()
    }
}

/// Client for the LM scoring contract; see [`ScoreRequest`] / [`ScoreResponse`].
#[derive(Debug, Clone)]
pub struct RemoteLm {
    poster: JsonPoster,
}

impl RemoteLm {
    pub fn new(url: impl Into<String>, policy: RetryPolicy) -> Result<Self> {
        Ok(RemoteLm {
            poster: JsonPoster::new("remote-lm", url.into(), policy)?,
        })
    }

    pub fn from_env(policy: RetryPolicy) -> Result<Self> {
        Self::new(resolve_url(None, LM_URL_ENV)?, policy)
    }
}

impl LmBackend for RemoteLm {
    fn id(&self) -> &str {
        &self.poster.id
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        self.poster.post(request)
    }
}
