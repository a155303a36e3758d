//! HTTP front end for a loaded system.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/v1/answer` | `{"query", "route"?}` | `{"route", "route_name", "similarity", "answer"}` |
//! | POST | `/v1/route` | `{"query"}` | `{"route", "route_name", "similarity", "margin", "similarities"}` |
//! | GET | `/v1/banks` | | list of attached banks with provenance |
//! | POST | `/v1/banks` | `{"path"}` | the attached bank |
//! | DELETE | `/v1/banks/{id}` | | `{"detached": id}` |
//!
//! Errors come back as `{"error": {"kind", "message"}}` with 400 for a bad
//! request, 404 for an unknown bank or bank file and 409 for an attach that
//! conflicts with the registry.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{GagError, Result};
use crate::router::{BankProvenance, PrototypeBank};
use crate::system::{GagSystem, RoutingMode};

/// What every handler shares: the system and the routing mode to answer with.
#[derive(Debug)]
pub struct ServerState {
    pub system: GagSystem,
    pub mode: RoutingMode,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request".into(),
            message: message.into(),
        }
    }
}

impl From<GagError> for ApiError {
    fn from(e: GagError) -> Self {
        let status = match &e {
            GagError::UnknownRoute(_) | GagError::MissingArtifact(_) => StatusCode::NOT_FOUND,
            GagError::Conflict(_) | GagError::Compatibility { .. } | GagError::Dimension(_) => StatusCode::CONFLICT,
            GagError::Input(_)
            | GagError::Length { .. }
            | GagError::Config(_)
            | GagError::Corruption { .. }
            | GagError::Json(_)
            | GagError::RoutingIntegrity(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": { "kind": self.kind, "message": self.message } }));
        (self.status, body).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    query: String,
    /// Gold route, needed only when the server answers with oracle routing.
    #[serde(default)]
    route: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttachBody {
    path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerReply {
    pub route: u32,
    pub route_name: String,
    pub similarity: Option<f32>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteReply {
    pub route: u32,
    pub route_name: String,
    pub similarity: f32,
    pub margin: f32,
    pub similarities: BTreeMap<u32, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    pub route_id: u32,
    pub route_name: String,
    pub prototypes: usize,
    pub dim: usize,
    pub provenance: BankProvenance,
}

impl From<&PrototypeBank> for BankInfo {
    fn from(b: &PrototypeBank) -> Self {
        Self {
            route_id: b.route_id,
            route_name: b.route_name.clone(),
            prototypes: b.len(),
            dim: b.dim,
            provenance: b.provenance.clone(),
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal".into(),
            message: e.to_string(),
        })?
        .map_err(ApiError::from)
}

async fn answer(State(st): State<Arc<ServerState>>, body: Bytes) -> ApiResult<AnswerReply> {
    let q: QueryBody = parse(&body)?;
    if st.mode == RoutingMode::Oracle && q.route.is_none() {
        return Err(ApiError::bad_request("oracle routing needs a \"route\" field"));
    }
    let reply = blocking(move || {
        let a = st.system.answer(&q.query, st.mode, q.route)?;
        Ok(AnswerReply {
            route: a.route,
            route_name: st.system.route_name(a.route),
            similarity: a.decision.as_ref().map(|d| d.similarity()),
            answer: a.answer,
        })
    })
    .await?;
    Ok(Json(reply))
}

async fn route(State(st): State<Arc<ServerState>>, body: Bytes) -> ApiResult<RouteReply> {
    let q: QueryBody = parse(&body)?;
    let reply = blocking(move || {
        let d = st.system.route(&q.query)?;
        Ok(RouteReply {
            route: d.route,
            route_name: st.system.route_name(d.route),
            similarity: d.similarity(),
            margin: d.margin,
            similarities: d.similarities,
        })
    })
    .await?;
    Ok(Json(reply))
}

async fn list_banks(State(st): State<Arc<ServerState>>) -> Json<Vec<BankInfo>> {
    Json(st.system.registry().banks().map(BankInfo::from).collect())
}

async fn attach_bank(State(st): State<Arc<ServerState>>, body: Bytes) -> ApiResult<BankInfo> {
    let b: AttachBody = parse(&body)?;
    let info = blocking(move || {
        if !b.path.exists() {
            return Err(GagError::MissingArtifact(b.path));
        }
        let bank = PrototypeBank::load(&b.path)?;
        let info = BankInfo::from(&bank);
        st.system.attach_bank(bank)?;
        tracing::info!(route = info.route_id, path = %b.path.display(), "bank attached");
        Ok(info)
    })
    .await?;
    Ok(Json(info))
}

async fn detach_bank(State(st): State<Arc<ServerState>>, UrlPath(id): UrlPath<String>) -> ApiResult<serde_json::Value> {
    let id: u32 = id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("bank id {id:?} is not a route number")))?;
    st.system.detach_bank(id)?;
    tracing::info!(route = id, "bank detached");
    Ok(Json(json!({ "detached": id })))
}

pub fn app(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/v1/answer", post(answer))
        .route("/v1/route", post(route))
        .route("/v1/banks", get(list_banks).post(attach_bank))
        .route("/v1/banks/{id}", delete(detach_bank))
        .with_state(state)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<ServerState>) -> Result<()> {
    let addr = listener.local_addr().map_err(|e| GagError::io("listener", e))?;
    tracing::info!(%addr, mode = %state.mode, "serving");
    axum::serve(listener, app(state))
        .await
        .map_err(|e| GagError::io(addr.to_string(), e))
}

/// Binds `addr` and serves on a fresh runtime; blocks until the server stops.
pub fn serve(state: ServerState, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| GagError::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| GagError::io(addr.to_string(), e))?;
        serve_on(listener, Arc::new(state)).await
    })
}
