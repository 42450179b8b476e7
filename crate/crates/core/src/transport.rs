//! Blocking JSON-over-HTTP client shared by the embedding, span-fill and
//! scoring endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: String::new(),
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        EndpointConfig { url: url.into(), ..Default::default() }
    }
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub(crate) struct JsonClient {
    config: EndpointConfig,
    agent: ureq::Agent,
    gate: Gate,
    requests: AtomicU64,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient").field("url", &self.config.url).finish()
    }
}

impl JsonClient {
    pub(crate) fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let cap = config.max_in_flight.max(1);
        JsonClient {
            config,
            agent,
            gate: Gate { in_flight: Mutex::new(0), freed: Condvar::new(), cap },
            requests: AtomicU64::new(0),
        }
    }

    pub(crate) fn base_url(&self) -> &str {
        &self.config.url
    }

    /// HTTP requests attempted so far, retries included.
    pub(crate) fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// POSTs `body` to `base_url + route`. Connection failures and 5xx/429
    /// responses are retried with linear backoff; other statuses fail at once.
    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, route: &str, body: &B) -> Result<R> {
        let url = format!("{}{}", self.config.url.trim_end_matches('/'), route);
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms * u64::from(attempt - 1)));
            }
            let _slot = self.gate.acquire();
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.agent.post(&url).send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if status == 429 || status >= 500 {
                        last = format!("{url}: HTTP {status}");
                        continue;
                    }
                    if !(200..300).contains(&status) {
                        let text = response.body_mut().read_to_string().unwrap_or_default();
                        return Err(Error::Protocol(format!("{url}: HTTP {status}: {text}")));
                    }
                    return response
                        .body_mut()
                        .read_json::<R>()
                        .map_err(|e| Error::Protocol(format!("{url}: bad response body: {e}")));
                }
                Err(e) => last = format!("{url}: {e}"),
            }
        }
        Err(Error::Transport { attempts, message: last })
    }
}
