//! Serves any [`Backend`] over the `/v1` wire protocol.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::oneshot;

use super::protocol::{self, codes, ErrorBody, ErrorResponse, FinetuneRequest, IclRequest, PredictEntry, PredictRequest, PredictResponse};
use super::Backend;
use crate::error::{Error, Result};

type Shared = Arc<dyn Backend>;

fn json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], protocol::encode(body)).into_response()
}

fn fail(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    json(status, &ErrorResponse::new(code, message))
}

fn error_body(e: &Error) -> (StatusCode, ErrorBody) {
    let (status, code, message) = match e {
        Error::Backend { item: Some(_), message } => (StatusCode::UNPROCESSABLE_ENTITY, codes::UNKNOWN_ITEM, message.clone()),
        Error::Capability(m) => (StatusCode::NOT_IMPLEMENTED, codes::UNSUPPORTED, m.clone()),
        Error::InvalidInput(m) => (StatusCode::BAD_REQUEST, codes::BAD_REQUEST, m.clone()),
        other => (StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL, other.to_string()),
    };
    (
        status,
        ErrorBody {
            code: code.into(),
            message,
        },
    )
}

fn backend_failure(e: &Error) -> Response {
    let (status, body) = error_body(e);
    json(status, &ErrorResponse { error: body })
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, Response> {
    let text = std::str::from_utf8(body).map_err(|_| fail(StatusCode::BAD_REQUEST, codes::BAD_REQUEST, "body is not UTF-8"))?;
    protocol::decode(text).map_err(|e| fail(StatusCode::BAD_REQUEST, codes::BAD_REQUEST, e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> std::result::Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| fail(StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL, e.to_string()))
}

async fn info(State(backend): State<Shared>) -> Response {
    match blocking(move || backend.capabilities()).await {
        Ok(Ok(caps)) => json(StatusCode::OK, &caps),
        Ok(Err(e)) => backend_failure(&e),
        Err(r) => r,
    }
}

async fn predict(State(backend): State<Shared>, body: Bytes) -> Response {
    let req: PredictRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let result = blocking(move || {
        let results = backend.predict_batch(&req.item_ids)?;
        Ok::<_, Error>(
            req.item_ids
                .into_iter()
                .zip(results)
                .map(|(item_id, r)| match r {
                    Ok(rec) => PredictEntry {
                        item_id,
                        logits: Some(rec.logits().as_slice().to_vec()),
                        features: rec.features().map(<[f64]>::to_vec),
                        error: None,
                    },
                    Err(e) => PredictEntry {
                        item_id,
                        logits: None,
                        features: None,
                        error: Some(error_body(&e).1),
                    },
                })
                .collect::<Vec<_>>(),
        )
    })
    .await;
    match result {
        Ok(Ok(predictions)) => json(StatusCode::OK, &PredictResponse { predictions }),
        Ok(Err(e)) => backend_failure(&e),
        Err(r) => r,
    }
}

async fn icl(State(backend): State<Shared>, body: Bytes) -> Response {
    let req: IclRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let result = blocking(move || {
        let names = backend.capabilities()?.class_names;
        match req.to_instruction(&names) {
            Ok(ins) => backend.score_icl(&ins).map(Ok),
            Err(name) => Ok(Err(name)),
        }
    })
    .await;
    match result {
        Ok(Ok(Ok(score))) => json(StatusCode::OK, &score),
        Ok(Ok(Err(name))) => fail(
            StatusCode::UNPROCESSABLE_ENTITY,
            codes::UNKNOWN_CLASS,
            format!("unknown class name {name}"),
        ),
        Ok(Err(e)) => backend_failure(&e),
        Err(r) => r,
    }
}

async fn finetune(State(backend): State<Shared>, body: Bytes) -> Response {
    let req: FinetuneRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    match blocking(move || backend.request_finetune(&req.records, req.epochs, req.learning_rate)).await {
        Ok(Ok(ack)) => json(StatusCode::OK, &ack),
        Ok(Err(e)) => backend_failure(&e),
        Err(r) => r,
    }
}

async fn no_route() -> Response {
    fail(StatusCode::NOT_FOUND, codes::NOT_FOUND, "no such route")
}

async fn wrong_method() -> Response {
    fail(StatusCode::METHOD_NOT_ALLOWED, codes::BAD_REQUEST, "method not allowed")
}

pub fn router(backend: Shared) -> Router {
    Router::new()
        .route(protocol::INFO_PATH, get(info))
        .route(protocol::PREDICT_PATH, post(predict))
        .route(protocol::ICL_PATH, post(icl))
        .route(protocol::FINETUNE_PATH, post(finetune))
        .fallback(no_route)
        .method_not_allowed_fallback(wrong_method)
        .with_state(backend)
}

/// A server running on a background thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("cannot start runtime: {e}")))
}

async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))
}

/// Starts serving on `addr` (port 0 picks a free port) and returns once the
/// socket is bound.
pub fn spawn(backend: Shared, addr: SocketAddr) -> Result<ServerHandle> {
    let rt = runtime()?;
    let listener = rt.block_on(bind(addr))?;
    let addr = listener.local_addr().map_err(|e| Error::Config(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let served = axum::serve(listener, router(backend))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                log::error!("server stopped: {e}");
            }
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves on the calling thread until the process is killed.
pub fn serve(backend: Shared, addr: SocketAddr, on_ready: impl FnOnce(SocketAddr)) -> Result<()> {
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = bind(addr).await?;
        let local = listener.local_addr().map_err(|e| Error::Config(e.to_string()))?;
        on_ready(local);
        axum::serve(listener, router(backend))
            .await
            .map_err(|e| Error::backend(None, format!("server failed: {e}")))
    })
}
