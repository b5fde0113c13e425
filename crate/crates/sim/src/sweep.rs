//! Throughput sweeps: one fresh in-process server per point, all points
//! run at the same time.

use std::time::Instant;

use lorans_server::model::Activation;
use lorans_server::{ServerConfig, ServerHandle};
use serde::{Deserialize, Serialize};

use crate::fit::{fit_knee, KneeFit};
use crate::scenario::{run_scenario, LoadReport, ScenarioConfig, ScenarioError, ServerTarget};

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub points: Vec<usize>,
    /// Central instances per server.
    pub instances: usize,
    /// Emulated per-message processing time of a central instance.
    pub service_time_ms: u64,
    pub period_s: f64,
    pub warmup_s: f64,
    pub window_s: f64,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(points: Vec<usize>, instances: usize) -> Self {
        SweepConfig {
            points,
            instances,
            service_time_ms: 100,
            period_s: crate::scenario::DEFAULT_PERIOD_S,
            warmup_s: 120.0,
            window_s: 80.0,
            seed: 7,
        }
    }

    /// Scenario for one point; ABP so the join path does not skew load.
    pub fn scenario(&self, target: ServerTarget, nodes: usize) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(target);
        c.nodes = nodes;
        c.gateways = 1;
        c.activation = Activation::Abp;
        c.period_s = self.period_s;
        c.warmup_s = self.warmup_s;
        c.duration_s = self.window_s;
        c.seed = self.seed ^ nodes as u64;
        c.initial_dr = 5;
        c.snr_range = (-5.0, 10.0);
        c
    }

    pub fn server_config(&self) -> ServerConfig {
        let mut s = ServerConfig::ephemeral();
        s.central.instances = self.instances;
        s.central.service_time_ms = self.service_time_ms;
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub nodes: usize,
    pub report: LoadReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub instances: usize,
    pub points: Vec<SweepPoint>,
    pub fit: Option<KneeFit>,
    pub elapsed_s: f64,
}

impl SweepResult {
    /// Knee as a node count.
    pub fn knee_nodes(&self) -> Option<f64> {
        let period = self.points.first()?.report.period_s;
        self.fit.map(|f| f.knee_x * period)
    }
}

pub async fn sweep(cfg: &SweepConfig) -> Result<SweepResult, ScenarioError> {
    let mut out = sweep_concurrent(std::slice::from_ref(cfg)).await?;
    Ok(out.remove(0))
}

/// Run several sweeps side by side.
pub async fn sweep_concurrent(cfgs: &[SweepConfig]) -> Result<Vec<SweepResult>, ScenarioError> {
    let started = Instant::now();
    let mut servers: Vec<ServerHandle> = Vec::new();
    let mut tasks = Vec::new();
    for (si, cfg) in cfgs.iter().enumerate() {
        for &n in &cfg.points {
            let server = lorans_server::start(cfg.server_config())
                .await
                .map_err(|e| ScenarioError::Invalid(format!("starting server: {e}")))?;
            let target = ServerTarget {
                udp: server.udp_addr,
                admin_url: server.admin_url(),
                token: None,
            };
            servers.push(server);
            tasks.push((si, n, tokio::spawn(run_scenario(cfg.scenario(target, n)))));
        }
    }
    let mut results: Vec<SweepResult> = cfgs
        .iter()
        .map(|c| SweepResult {
            instances: c.instances,
            points: Vec::new(),
            fit: None,
            elapsed_s: 0.0,
        })
        .collect();
    for (si, n, t) in tasks {
        let report = t.await.expect("scenario task panicked")?;
        results[si].points.push(SweepPoint { nodes: n, report });
    }
    drop(servers);
    for r in &mut results {
        r.points.sort_by_key(|p| p.nodes);
        let xy: Vec<(f64, f64)> = r.points.iter().map(|p| (p.report.offered_rate, p.report.achieved_throughput)).collect();
        r.fit = fit_knee(&xy);
        r.elapsed_s = started.elapsed().as_secs_f64();
    }
    Ok(results)
}
