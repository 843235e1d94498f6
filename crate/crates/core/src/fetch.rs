//! Downloading APKs by digest from an AndroZoo-style endpoint.

use std::fmt;
use std::time::Duration;

use crate::archive::sha256_digest;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FetchError {
    #[error("network error: {0}")]
    NetworkError(String),
    #[error("hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("HTTP status {0}")]
    HttpStatus(u16),
}

/// Endpoint and credentials. The key never appears in `Debug` output or in
/// error messages.
#[derive(Clone)]
pub struct FetchConfig {
    pub endpoint: String,
    api_key: String,
}

impl FetchConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        FetchConfig { endpoint: endpoint.into(), api_key: api_key.into() }
    }

    /// Reads the API key from the environment variable `var`.
    pub fn from_env(endpoint: impl Into<String>, var: &str) -> Result<Self, String> {
        let key = std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?;
        Ok(FetchConfig::new(endpoint, key))
    }
}

impl fmt::Debug for FetchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FetchConfig").field("endpoint", &self.endpoint).field("api_key", &"<redacted>").finish()
    }
}

/// A reusable HTTP client bound to one endpoint.
pub struct Fetcher {
    client: reqwest::blocking::Client,
    config: FetchConfig,
}

impl Fetcher {
    pub fn new(config: FetchConfig, timeout: Duration) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| FetchError::NetworkError(e.without_url().to_string()))?;
        Ok(Fetcher { client, config })
    }

    /// `GET {endpoint}?apikey={key}&sha256={sha256}`; the body is returned
    /// only if its digest equals `sha256`.
    pub fn fetch(&self, sha256: &str) -> Result<Vec<u8>, FetchError> {
        let url = reqwest::Url::parse_with_params(
            &self.config.endpoint,
            [("apikey", self.config.api_key.as_str()), ("sha256", sha256)],
        )
        .map_err(|e| FetchError::NetworkError(format!("bad endpoint: {e}")))?;
        let response = self
            .client
            .get(url)
            .send()
            .map_err(|e| FetchError::NetworkError(e.without_url().to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(FetchError::HttpStatus(status.as_u16()));
        }
        let body = response
            .bytes()
            .map_err(|e| FetchError::NetworkError(e.without_url().to_string()))?;
        let actual = sha256_digest(&body);
        if !actual.eq_ignore_ascii_case(sha256) {
            return Err(FetchError::HashMismatch { expected: sha256.to_ascii_lowercase(), actual });
        }
        Ok(body.to_vec())
    }
}

/// One-shot download with a fresh client.
pub fn fetch_by_hash(sha256: &str, endpoint: &str, api_key: &str) -> Result<Vec<u8>, FetchError> {
    Fetcher::new(FetchConfig::new(endpoint, api_key), Duration::from_secs(900))?.fetch(sha256)
}
