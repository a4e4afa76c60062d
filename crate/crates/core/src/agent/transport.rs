//! How an agent reaches the control plane. Production uses [`HttpTransport`];
//! the harness and tests use [`InProcessTransport`], optionally wrapped in
//! [`DelayShim`] and [`DropShim`] to inject latency and message loss.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{EnrollGrant, EnrollRequest, ErrorEnvelope, HeartbeatRequest, HeartbeatResponse, ResultAck, ResultRequest};
use crate::gateway::{ApiRequest, Gateway, Method};
use crate::ids::Id;

use super::Pace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    /// The request may or may not have reached the server.
    #[error("network: {0}")]
    Network(String),
    #[error("{}: {}", .0.code, .0.message)]
    Api(ErrorEnvelope),
}

impl TransportError {
    pub fn code(&self) -> Option<&str> {
        match self {
            TransportError::Api(e) => Some(&e.code),
            TransportError::Network(_) => None,
        }
    }
}

pub type TransportResult<T> = std::result::Result<T, TransportError>;

#[async_trait]
pub trait Transport: Send + Sync {
    async fn enroll(&self, req: &EnrollRequest) -> TransportResult<EnrollGrant>;
    async fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> TransportResult<HeartbeatResponse>;
    async fn report(&self, token: &str, req: &ResultRequest) -> TransportResult<ResultAck>;
    async fn fetch_artifact(&self, token: &str, artifact_id: &Id) -> TransportResult<Vec<u8>>;
}

pub struct HttpTransport {
    client: reqwest::Client,
    base: String,
}

impl HttpTransport {
    pub fn new(server_url: &str) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("HTTP client configuration is static");
        HttpTransport {
            client,
            base: server_url.trim_end_matches('/').to_string(),
        }
    }

    async fn post<B: Serialize + Sync, R: DeserializeOwned>(&self, path: &str, token: Option<&str>, body: &B) -> TransportResult<R> {
        let mut req = self.client.post(format!("{}{path}", self.base)).json(body);
        if let Some(token) = token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        if status.is_success() {
            serde_json::from_slice(&bytes).map_err(|e| TransportError::Network(format!("bad response body: {e}")))
        } else {
            Err(TransportError::Api(serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorEnvelope {
                code: "INTERNAL".into(),
                message: format!("HTTP {status}"),
                details: Vec::new(),
            })))
        }
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn enroll(&self, req: &EnrollRequest) -> TransportResult<EnrollGrant> {
        self.post("/v1/agent/enroll", None, req).await
    }

    async fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> TransportResult<HeartbeatResponse> {
        self.post("/v1/agent/heartbeat", Some(token), req).await
    }

    async fn report(&self, token: &str, req: &ResultRequest) -> TransportResult<ResultAck> {
        self.post("/v1/agent/result", Some(token), req).await
    }

    async fn fetch_artifact(&self, token: &str, artifact_id: &Id) -> TransportResult<Vec<u8>> {
        let url = format!("{}/v1/agent/artifacts/{artifact_id}/content", self.base);
        let resp = self
            .client
            .get(url)
            .bearer_auth(token)
            .send()
            .await
            .map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        if status.is_success() {
            Ok(bytes.to_vec())
        } else {
            Err(TransportError::Api(serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorEnvelope {
                code: "INTERNAL".into(),
                message: format!("HTTP {status}"),
                details: Vec::new(),
            })))
        }
    }
}

/// Calls [`Gateway::handle`] directly, exercising routing, authorization
/// and audit exactly as HTTP requests do.
#[derive(Clone, Debug)]
pub struct InProcessTransport {
    gateway: Gateway,
}

impl InProcessTransport {
    pub fn new(gateway: Gateway) -> Self {
        InProcessTransport { gateway }
    }

    fn call<B: Serialize, R: DeserializeOwned>(&self, path: &str, token: Option<&str>, body: &B) -> TransportResult<R> {
        let mut req = ApiRequest::new(Method::Post, path).json(body);
        if let Some(token) = token {
            req = req.bearer(token);
        }
        self.gateway.handle(&req).decode().map_err(TransportError::Api)
    }
}

#[async_trait]
impl Transport for InProcessTransport {
    async fn enroll(&self, req: &EnrollRequest) -> TransportResult<EnrollGrant> {
        self.call("/v1/agent/enroll", None, req)
    }

    async fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> TransportResult<HeartbeatResponse> {
        self.call("/v1/agent/heartbeat", Some(token), req)
    }

    async fn report(&self, token: &str, req: &ResultRequest) -> TransportResult<ResultAck> {
        self.call("/v1/agent/result", Some(token), req)
    }

    async fn fetch_artifact(&self, token: &str, artifact_id: &Id) -> TransportResult<Vec<u8>> {
        let req = ApiRequest::new(Method::Get, &format!("/v1/agent/artifacts/{artifact_id}/content")).bearer(token);
        let resp = self.gateway.handle(&req);
        if resp.is_success() {
            Ok(resp.body)
        } else {
            Err(TransportError::Api(resp.error_envelope()))
        }
    }
}

/// One-way network delay model, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    Fixed { ms: u64 },
    Uniform { min_ms: u64, max_ms: u64 },
}

impl DelayModel {
    pub fn sample(&self, rng: &mut impl Rng) -> Duration {
        match *self {
            DelayModel::Fixed { ms } => Duration::from_millis(ms),
            DelayModel::Uniform { min_ms, max_ms } => {
                let (lo, hi) = (min_ms.min(max_ms), min_ms.max(max_ms));
                Duration::from_millis(rng.random_range(lo..=hi))
            }
        }
    }
}

/// Delays each request on the way in and each response on the way out by
/// an independent sample of the delay model.
pub struct DelayShim<T> {
    inner: T,
    model: DelayModel,
    pace: Pace,
    rng: Mutex<ChaCha8Rng>,
}

impl<T: Transport> DelayShim<T> {
    pub fn new(inner: T, model: DelayModel, pace: Pace, seed: u64) -> Self {
        DelayShim {
            inner,
            model,
            pace,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    async fn leg(&self) {
        let d = self.model.sample(&mut *self.rng.lock());
        if !d.is_zero() {
            self.pace.sleep(d).await;
        }
    }
}

#[async_trait]
impl<T: Transport> Transport for DelayShim<T> {
    async fn enroll(&self, req: &EnrollRequest) -> TransportResult<EnrollGrant> {
        self.leg().await;
        let out = self.inner.enroll(req).await;
        self.leg().await;
        out
    }

    async fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> TransportResult<HeartbeatResponse> {
        self.leg().await;
        let out = self.inner.heartbeat(token, req).await;
        self.leg().await;
        out
    }

    async fn report(&self, token: &str, req: &ResultRequest) -> TransportResult<ResultAck> {
        self.leg().await;
        let out = self.inner.report(token, req).await;
        self.leg().await;
        out
    }

    async fn fetch_artifact(&self, token: &str, artifact_id: &Id) -> TransportResult<Vec<u8>> {
        self.leg().await;
        let out = self.inner.fetch_artifact(token, artifact_id).await;
        self.leg().await;
        out
    }
}

/// Loses messages at random. A lost request never reaches the server; a
/// lost response means the server acted but the agent sees a network
/// error. Each direction drops with probability `1 - sqrt(1 - rate)`, so
/// a call fails end to end with probability exactly `rate`.
pub struct DropShim<T> {
    inner: T,
    leg_rate: f64,
    rng: Mutex<ChaCha8Rng>,
    dropped: Mutex<(u64, u64)>,
}

impl<T: Transport> DropShim<T> {
    pub fn new(inner: T, rate: f64, seed: u64) -> Self {
        DropShim {
            inner,
            leg_rate: 1.0 - (1.0 - rate.clamp(0.0, 1.0)).sqrt(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dropped: Mutex::new((0, 0)),
        }
    }

    /// `(requests dropped, responses dropped)`
    pub fn dropped(&self) -> (u64, u64) {
        *self.dropped.lock()
    }

    fn roll(&self) -> bool {
        self.rng.lock().random_bool(self.leg_rate)
    }

    async fn pass<R>(&self, fut: impl std::future::Future<Output = TransportResult<R>>) -> TransportResult<R> {
        if self.roll() {
            self.dropped.lock().0 += 1;
            return Err(TransportError::Network("request dropped".into()));
        }
        let out = fut.await;
        if self.roll() {
            self.dropped.lock().1 += 1;
            return Err(TransportError::Network("response dropped".into()));
        }
        out
    }
}

#[async_trait]
impl<T: Transport> Transport for DropShim<T> {
    async fn enroll(&self, req: &EnrollRequest) -> TransportResult<EnrollGrant> {
        self.pass(self.inner.enroll(req)).await
    }

    async fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> TransportResult<HeartbeatResponse> {
        self.pass(self.inner.heartbeat(token, req)).await
    }

    async fn report(&self, token: &str, req: &ResultRequest) -> TransportResult<ResultAck> {
        self.pass(self.inner.report(token, req)).await
    }

    async fn fetch_artifact(&self, token: &str, artifact_id: &Id) -> TransportResult<Vec<u8>> {
        self.pass(self.inner.fetch_artifact(token, artifact_id)).await
    }
}

#[async_trait]
impl<T: Transport + ?Sized> Transport for Arc<T> {
    async fn enroll(&self, req: &EnrollRequest) -> TransportResult<EnrollGrant> {
        (**self).enroll(req).await
    }

    async fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> TransportResult<HeartbeatResponse> {
        (**self).heartbeat(token, req).await
    }

    async fn report(&self, token: &str, req: &ResultRequest) -> TransportResult<ResultAck> {
        (**self).report(token, req).await
    }

    async fn fetch_artifact(&self, token: &str, artifact_id: &Id) -> TransportResult<Vec<u8>> {
        (**self).fetch_artifact(token, artifact_id).await
    }
}
