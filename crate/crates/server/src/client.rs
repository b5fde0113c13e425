//! HTTP client for the admin API, used by the CLI and the load harness.

use lorans_codec::Eui64;
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::admin::{DeviceInput, DeviceView, DownlinkInput, GatewayInput, MacInput, SessionView};
use crate::metrics::MetricsSnapshot;
use crate::model::{AppPayloadEntry, FrameLogEntry, GatewayRecord};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("admin API unreachable: {0}")]
    Unreachable(String),
    #[error("admin API returned {status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdminClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl AdminClient {
    /// `base` like `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        AdminClient {
            base: base.into().trim_end_matches('/').to_string(),
            token,
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        let r = self.http.request(method, format!("{}{}", self.base, path));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    async fn send(&self, r: RequestBuilder) -> Result<reqwest::Response, ClientError> {
        let resp = r.send().await.map_err(|e| ClientError::Unreachable(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body: serde_json::Value = resp.json().await.unwrap_or_default();
        let message = body.get("error").and_then(|v| v.as_str()).unwrap_or("").to_string();
        Err(ClientError::Api { status, message })
    }

    async fn json<T: DeserializeOwned>(&self, r: RequestBuilder) -> Result<T, ClientError> {
        self.send(r).await?.json().await.map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.json(self.req(Method::POST, path).json(body)).await
    }

    pub async fn add_device(&self, d: &DeviceInput) -> Result<DeviceView, ClientError> {
        self.post("/api/devices", d).await
    }

    pub async fn list_devices(&self) -> Result<Vec<DeviceView>, ClientError> {
        self.json(self.req(Method::GET, "/api/devices")).await
    }

    pub async fn get_device(&self, dev_eui: Eui64) -> Result<DeviceView, ClientError> {
        self.json(self.req(Method::GET, &format!("/api/devices/{dev_eui}"))).await
    }

    pub async fn delete_device(&self, dev_eui: Eui64) -> Result<(), ClientError> {
        self.send(self.req(Method::DELETE, &format!("/api/devices/{dev_eui}"))).await.map(|_| ())
    }

    pub async fn session(&self, dev_eui: Eui64) -> Result<SessionView, ClientError> {
        self.json(self.req(Method::GET, &format!("/api/devices/{dev_eui}/session"))).await
    }

    pub async fn frames(&self, dev_eui: Eui64, limit: usize) -> Result<Vec<FrameLogEntry>, ClientError> {
        self.json(self.req(Method::GET, &format!("/api/devices/{dev_eui}/frames?limit={limit}"))).await
    }

    pub async fn payloads(&self, dev_eui: Eui64, limit: usize) -> Result<Vec<AppPayloadEntry>, ClientError> {
        self.json(self.req(Method::GET, &format!("/api/devices/{dev_eui}/payloads?limit={limit}"))).await
    }

    pub async fn downlink(&self, dev_eui: Eui64, d: &DownlinkInput) -> Result<(), ClientError> {
        self.send(self.req(Method::POST, &format!("/api/devices/{dev_eui}/downlink")).json(d)).await.map(|_| ())
    }

    pub async fn mac(&self, dev_eui: Eui64, m: &MacInput) -> Result<(), ClientError> {
        self.send(self.req(Method::POST, &format!("/api/devices/{dev_eui}/mac")).json(m)).await.map(|_| ())
    }

    pub async fn add_gateway(&self, g: &GatewayInput) -> Result<GatewayRecord, ClientError> {
        self.post("/api/gateways", g).await
    }

    pub async fn list_gateways(&self) -> Result<Vec<GatewayRecord>, ClientError> {
        self.json(self.req(Method::GET, "/api/gateways")).await
    }

    pub async fn delete_gateway(&self, gateway_eui: Eui64) -> Result<(), ClientError> {
        self.send(self.req(Method::DELETE, &format!("/api/gateways/{gateway_eui}"))).await.map(|_| ())
    }

    pub async fn stats(&self) -> Result<MetricsSnapshot, ClientError> {
        self.json(self.req(Method::GET, "/api/stats")).await
    }

    /// Load line-delimited registry records; returns how many were applied.
    pub async fn import(&self, ndjson: String) -> Result<u64, ClientError> {
        let v: serde_json::Value = self.json(self.req(Method::POST, "/api/registry").body(ndjson)).await?;
        v.get("applied").and_then(|n| n.as_u64()).ok_or_else(|| ClientError::Decode("missing applied count".into()))
    }

    pub async fn export(&self) -> Result<String, ClientError> {
        self.send(self.req(Method::GET, "/api/registry")).await?.text().await.map_err(|e| ClientError::Decode(e.to_string()))
    }
}
