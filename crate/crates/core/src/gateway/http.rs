//! axum adapter: converts HTTP requests to [`ApiRequest`] and runs
//! [`Gateway::handle`] on the blocking pool.

use std::net::SocketAddr;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderName, HeaderValue, Request, Response, StatusCode};
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::{ApiRequest, ApiResponse, Gateway, Method};

pub fn router(gateway: Gateway) -> Router {
    let limit = usize::try_from(gateway.plane().config().max_artifact_bytes)
        .unwrap_or(usize::MAX)
        .saturating_add(1 << 20);
    Router::new()
        .fallback(serve)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(gateway)
}

async fn serve(State(gateway): State<Gateway>, req: Request<Body>) -> Response<Body> {
    let (parts, body) = req.into_parts();
    let limit = usize::try_from(gateway.plane().config().max_artifact_bytes)
        .unwrap_or(usize::MAX)
        .saturating_add(1 << 20);
    let body = match to_bytes(body, limit).await {
        Ok(b) => b.to_vec(),
        Err(_) => {
            let err = crate::Error::new(crate::ErrorCode::TooLarge, "request body too large");
            return into_response(ApiResponse::error(&err));
        }
    };
    let api = ApiRequest {
        method: Method::parse(parts.method.as_str()),
        path: parts.uri.path().to_string(),
        query: parts
            .uri
            .query()
            .map(|q| form_urlencoded::parse(q.as_bytes()).into_owned().collect())
            .unwrap_or_default(),
        headers: parts
            .headers
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect(),
        body,
    };
    let head = parts.method == axum::http::Method::HEAD;
    let resp = tokio::task::spawn_blocking(move || gateway.handle(&api))
        .await
        .unwrap_or_else(|_| ApiResponse::error(&crate::Error::new(crate::ErrorCode::Internal, "handler panicked")));
    let mut resp = into_response(resp);
    if head {
        *resp.body_mut() = Body::empty();
    }
    resp
}

fn into_response(api: ApiResponse) -> Response<Body> {
    let mut resp = Response::new(Body::from(api.body));
    *resp.status_mut() = StatusCode::from_u16(api.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    for (k, v) in api.headers {
        if let (Ok(k), Ok(v)) = (HeaderName::try_from(k), HeaderValue::try_from(v)) {
            resp.headers_mut().insert(k, v);
        }
    }
    resp
}

/// A server bound to a local port, running the router and the periodic
/// sweeper until dropped or shut down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
    sweeper: JoinHandle<()>,
}

impl ServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.sweeper.abort();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.sweeper.abort();
    }
}

/// Runs one sweep per `interval` on the blocking pool.
pub fn spawn_sweeper(gateway: Gateway, interval: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let g = gateway.clone();
            match tokio::task::spawn_blocking(move || g.plane().sweep()).await {
                Ok(Err(err)) => tracing::error!(%err, "sweep failed"),
                Err(err) => tracing::error!(%err, "sweep task failed"),
                Ok(Ok(_)) => {}
            }
        }
    })
}

pub async fn serve_on(gateway: Gateway, listener: TcpListener) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let interval = Duration::from_millis(gateway.plane().config().sweep_interval_ms.max(10));
    let sweeper = spawn_sweeper(gateway.clone(), interval);
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(gateway);
    let task = tokio::spawn(async move {
        let result = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
        if let Err(err) = result {
            tracing::error!(%err, "server stopped");
        }
    });
    tracing::info!(%addr, "listening");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        task: Some(task),
        sweeper,
    })
}

pub async fn bind(gateway: Gateway, addr: &str) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr).await?;
    serve_on(gateway, listener).await
}
