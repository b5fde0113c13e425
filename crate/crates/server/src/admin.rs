//! Administrative HTTP API.

use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use lorans_codec::mac;
use lorans_codec::{AesKey, DevAddr, Eui64, SessionKeys};
use serde::{Deserialize, Serialize};

use crate::controller::NetworkController;
use crate::metrics::{Metrics, MetricsSnapshot};
use crate::model::{AbpSession, Activation, AppItem, AppPayloadEntry, DeviceRecord, FrameLogEntry, GatewayRecord, Location, MacQueueEntry};
use crate::store::{self, Store, StoreError};

#[derive(Clone)]
pub struct AdminState {
    pub store: Store,
    pub metrics: Arc<Metrics>,
    pub controller: Arc<NetworkController>,
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::DuplicateEui(_) | StoreError::DuplicateDevAddr(_) => StatusCode::CONFLICT,
            StoreError::NotFound | StoreError::NoSession => StatusCode::NOT_FOUND,
            StoreError::Invalid(_) | StoreError::Corrupt(_) => StatusCode::BAD_REQUEST,
            StoreError::StaleCounter { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn eui(s: &str) -> ApiResult<Eui64> {
    s.parse().map_err(|e| ApiError::bad_request(format!("bad EUI {s:?}: {e}")))
}

/// Device registration request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceInput {
    pub dev_eui: String,
    #[serde(default)]
    pub app_eui: Option<String>,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nwk_skey: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_skey: Option<String>,
    #[serde(default)]
    pub description: String,
}

impl DeviceInput {
    pub fn into_record(self) -> ApiResult<DeviceRecord> {
        let key = |name: &str, v: Option<String>| -> ApiResult<Option<AesKey>> {
            v.map(|s| s.parse().map_err(|e| ApiError::bad_request(format!("bad {name}: {e}")))).transpose()
        };
        let need = |name: &str, v: Option<AesKey>| v.ok_or_else(|| ApiError::bad_request(format!("{name} is required")));
        let app_key = key("app_key", self.app_key)?;
        let fixed_session = match self.activation {
            Activation::Otaa => {
                need("app_key", app_key)?;
                None
            }
            Activation::Abp => {
                let addr = self.dev_addr.ok_or_else(|| ApiError::bad_request("dev_addr is required"))?;
                let dev_addr: DevAddr = addr.parse().map_err(|e| ApiError::bad_request(format!("bad dev_addr: {e}")))?;
                Some(AbpSession {
                    dev_addr,
                    keys: SessionKeys {
                        nwk_skey: need("nwk_skey", key("nwk_skey", self.nwk_skey)?)?,
                        app_skey: need("app_skey", key("app_skey", self.app_skey)?)?,
                    },
                })
            }
        };
        Ok(DeviceRecord {
            dev_eui: eui(&self.dev_eui)?,
            app_eui: self.app_eui.as_deref().map(eui).transpose()?.unwrap_or_default(),
            activation: self.activation,
            app_key,
            fixed_session,
            description: self.description,
            created_at_ms: 0,
        })
    }
}

/// Device as shown by the API; keys never leave the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub dev_eui: Eui64,
    pub app_eui: Eui64,
    pub activation: Activation,
    pub description: String,
    pub created_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_addr: Option<DevAddr>,
    pub keys: String,
}

impl From<&DeviceRecord> for DeviceView {
    fn from(d: &DeviceRecord) -> Self {
        DeviceView {
            dev_eui: d.dev_eui,
            app_eui: d.app_eui,
            activation: d.activation,
            description: d.description.clone(),
            created_at_ms: d.created_at_ms,
            dev_addr: d.fixed_session.map(|s| s.dev_addr),
            keys: "redacted".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayInput {
    pub gateway_eui: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub location: Option<Location>,
}

/// Session snapshot without key material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub dev_eui: Eui64,
    pub dev_addr: DevAddr,
    pub fcnt_up: u32,
    pub fcnt_down: u32,
    pub current_dr: u8,
    pub current_tx_power: u8,
    pub adr_history_len: usize,
    pub mac_queue: Vec<MacQueueEntry>,
    pub app_queue_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkInput {
    pub fport: u8,
    /// Base64 payload.
    pub payload: String,
    #[serde(default)]
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum MacInput {
    DevStatus,
    DutyCycle { max_duty_cycle: u8 },
}

#[derive(Debug, Deserialize)]
struct Limit {
    limit: Option<usize>,
}

pub fn router(state: AdminState) -> Router {
    Router::new()
        .route("/api/devices", get(list_devices).post(add_device))
        .route("/api/devices/{eui}", get(get_device).delete(delete_device))
        .route("/api/devices/{eui}/session", get(get_session))
        .route("/api/devices/{eui}/frames", get(get_frames))
        .route("/api/devices/{eui}/payloads", get(get_payloads))
        .route("/api/devices/{eui}/downlink", post(post_downlink))
        .route("/api/devices/{eui}/mac", post(post_mac))
        .route("/api/gateways", get(list_gateways).post(add_gateway))
        .route("/api/gateways/{eui}", get(get_gateway).delete(delete_gateway))
        .route("/api/stats", get(stats))
        .route("/api/registry", get(export_registry).post(import_registry))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(st): State<AdminState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

async fn list_devices(State(st): State<AdminState>) -> Json<Vec<DeviceView>> {
    Json(st.store.registry.list_devices().iter().map(DeviceView::from).collect())
}

async fn add_device(State(st): State<AdminState>, Json(input): Json<DeviceInput>) -> ApiResult<(StatusCode, Json<DeviceView>)> {
    let rec = input.into_record()?;
    st.store.register_device(rec.clone())?;
    let stored = st.store.registry.get_device(rec.dev_eui).unwrap_or(rec);
    Ok((StatusCode::CREATED, Json(DeviceView::from(&stored))))
}

async fn get_device(State(st): State<AdminState>, Path(e): Path<String>) -> ApiResult<Json<DeviceView>> {
    let d = st.store.registry.get_device(eui(&e)?).ok_or(StoreError::NotFound)?;
    Ok(Json(DeviceView::from(&d)))
}

async fn delete_device(State(st): State<AdminState>, Path(e): Path<String>) -> ApiResult<StatusCode> {
    st.store.delete_device(eui(&e)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_session(State(st): State<AdminState>, Path(e): Path<String>) -> ApiResult<Json<SessionView>> {
    let dev_eui = eui(&e)?;
    let s = st.store.volatile.session_by_eui(dev_eui).ok_or(StoreError::NoSession)?;
    Ok(Json(SessionView {
        dev_eui,
        dev_addr: s.dev_addr,
        fcnt_up: s.fcnt_up,
        fcnt_down: s.fcnt_down,
        current_dr: s.adr.current_dr,
        current_tx_power: s.adr.current_tx_power,
        adr_history_len: s.adr.history.len(),
        mac_queue: st.store.volatile.mac_queue(s.dev_addr),
        app_queue_len: st.store.volatile.app_queue_len(s.dev_addr),
    }))
}

async fn get_frames(State(st): State<AdminState>, Path(e): Path<String>, Query(q): Query<Limit>) -> ApiResult<Json<Vec<FrameLogEntry>>> {
    let dev_eui = eui(&e)?;
    st.store.registry.get_device(dev_eui).ok_or(StoreError::NotFound)?;
    Ok(Json(st.store.volatile.frames(dev_eui, q.limit.unwrap_or(50))))
}

async fn get_payloads(State(st): State<AdminState>, Path(e): Path<String>, Query(q): Query<Limit>) -> ApiResult<Json<Vec<AppPayloadEntry>>> {
    let dev_eui = eui(&e)?;
    st.store.registry.get_device(dev_eui).ok_or(StoreError::NotFound)?;
    Ok(Json(st.store.volatile.app_payloads(dev_eui, q.limit.unwrap_or(50))))
}

async fn post_downlink(State(st): State<AdminState>, Path(e): Path<String>, Json(input): Json<DownlinkInput>) -> ApiResult<StatusCode> {
    let dev_eui = eui(&e)?;
    let payload = STANDARD.decode(input.payload.as_bytes()).map_err(|e| ApiError::bad_request(format!("payload is not base64: {e}")))?;
    if input.fport == 0 || input.fport > 223 {
        return Err(ApiError::bad_request("fport must be 1..=223"));
    }
    st.store.enqueue_downlink(
        dev_eui,
        AppItem {
            fport: input.fport,
            payload,
            confirmed: input.confirmed,
        },
    )?;
    Ok(StatusCode::ACCEPTED)
}

async fn post_mac(State(st): State<AdminState>, Path(e): Path<String>, Json(input): Json<MacInput>) -> ApiResult<StatusCode> {
    let dev_eui = eui(&e)?;
    let s = st.store.volatile.session_by_eui(dev_eui).ok_or(StoreError::NoSession)?;
    let cmd = match input {
        MacInput::DevStatus => mac::dev_status_req(),
        MacInput::DutyCycle { max_duty_cycle } => mac::duty_cycle_req(max_duty_cycle),
    };
    st.controller.enqueue_command(s.dev_addr, cmd, "operator");
    Ok(StatusCode::ACCEPTED)
}

async fn list_gateways(State(st): State<AdminState>) -> Json<Vec<GatewayRecord>> {
    Json(st.store.registry.list_gateways())
}

async fn add_gateway(State(st): State<AdminState>, Json(input): Json<GatewayInput>) -> ApiResult<(StatusCode, Json<GatewayRecord>)> {
    let mut g = GatewayRecord::new(eui(&input.gateway_eui)?);
    g.description = input.description;
    g.location = input.location;
    st.store.register_gateway(g.clone())?;
    Ok((StatusCode::CREATED, Json(g)))
}

async fn get_gateway(State(st): State<AdminState>, Path(e): Path<String>) -> ApiResult<Json<GatewayRecord>> {
    Ok(Json(st.store.registry.get_gateway(eui(&e)?).ok_or(StoreError::NotFound)?))
}

async fn delete_gateway(State(st): State<AdminState>, Path(e): Path<String>) -> ApiResult<StatusCode> {
    st.store.registry.delete_gateway(eui(&e)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn stats(State(st): State<AdminState>) -> Json<MetricsSnapshot> {
    Json(st.metrics.snapshot())
}

/// Registry as line-delimited JSON. Device keys are included, so this
/// endpoint is for backups and fixtures.
async fn export_registry(State(st): State<AdminState>) -> ApiResult<Response> {
    let mut out = Vec::new();
    store::write_lines(&mut out, &st.store.export())?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}

async fn import_registry(State(st): State<AdminState>, body: String) -> ApiResult<Json<serde_json::Value>> {
    let lines = store::parse_lines(&body)?;
    let n = st.store.import(lines)?;
    Ok(Json(serde_json::json!({ "applied": n })))
}
