use std::time::Duration;

/// Status and body of a completed HTTP exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// A request that never produced an HTTP status (refused, reset, timed out).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure {
    pub message: String,
    pub timed_out: bool,
}

/// Blocking JSON POST. Implementations must be shareable across workers.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure>;
}

/// `reqwest` blocking client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure> {
        let mut req = self
            .client
            .post(url)
            .timeout(timeout)
            .header("content-type", "application/json")
            .body(body.to_owned());
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportFailure {
            timed_out: e.is_timeout(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportFailure {
            timed_out: e.is_timeout(),
            message: e.to_string(),
        })?;
        Ok(HttpReply { status, body })
    }
}
