//! Wires the modules together over an in-process bus and starts them.

use std::net::SocketAddr;
use std::sync::Arc;

use lorans_bus::{Broker, BusError};
use parking_lot::Mutex;
use tokio::net::{TcpListener, UdpSocket};
use tokio::task::JoinHandle;

use crate::admin::{self, AdminState};
use crate::central::{self, CentralInputs, CentralServer};
use crate::clock::{self, SharedClock};
use crate::config::ServerConfig;
use crate::connector::{self, Connector};
use crate::controller::{self, NetworkController};
use crate::join::{self, JoinServer};
use crate::metrics::Metrics;
use crate::store::{FileRegistry, MemoryVolatile, Registry, Store, StoreError, VolatileLimits};
use crate::topics;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("invalid config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("binding {addr}: {err}")]
    Bind { addr: String, err: std::io::Error },
}

pub struct ServerHandle {
    pub udp_addr: SocketAddr,
    pub admin_addr: SocketAddr,
    pub store: Store,
    pub bus: Broker,
    pub metrics: Arc<Metrics>,
    pub config: ServerConfig,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    centrals: Mutex<Vec<Option<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn admin_url(&self) -> String {
        format!("http://{}", self.admin_addr)
    }

    /// Abort one central instance, as if its process died. Its unacked
    /// messages go to the surviving instances.
    pub fn kill_central(&self, index: usize) -> bool {
        match self.centrals.lock().get_mut(index).and_then(Option::take) {
            Some(h) => {
                h.abort();
                true
            }
            None => false,
        }
    }

    pub fn live_centrals(&self) -> usize {
        self.centrals.lock().iter().filter(|h| h.is_some()).count()
    }

    pub fn shutdown(&self) {
        self.bus.close();
        for h in self.tasks.lock().drain(..) {
            h.abort();
        }
        for h in self.centrals.lock().iter_mut().filter_map(Option::take) {
            h.abort();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn build_store(cfg: &ServerConfig, clock: SharedClock) -> Result<Store, StoreError> {
    let registry: Arc<dyn Registry> = match &cfg.store.registry_path {
        Some(p) => Arc::new(FileRegistry::open(p)?),
        None => Arc::new(FileRegistry::in_memory()),
    };
    let limits = VolatileLimits {
        retention_ms: cfg.store.retention_s * 1000,
        frame_log_cap: cfg.store.frame_log_cap,
    };
    let store = Store::new(registry, Arc::new(MemoryVolatile::new(clock.clone(), limits)), clock);
    store.restore_abp_sessions();
    Ok(store)
}

pub fn build_bus(cfg: &ServerConfig) -> Result<Broker, BusError> {
    let bus = Broker::new(cfg.bus.capacity);
    for t in &cfg.bus.topics {
        bus.register_topic(&t.name, &t.schema)?;
    }
    Ok(bus)
}

/// Start every module. Sockets are bound before this returns.
pub async fn start(cfg: ServerConfig) -> Result<ServerHandle, ServerError> {
    cfg.validate()?;
    let store = build_store(&cfg, clock::system())?;
    start_with_store(cfg, store).await
}

pub async fn start_with_store(cfg: ServerConfig, store: Store) -> Result<ServerHandle, ServerError> {
    cfg.validate()?;
    let bus = build_bus(&cfg)?;
    let metrics = Arc::new(Metrics::default());

    let udp = UdpSocket::bind(&cfg.connector.listen).await.map_err(|err| ServerError::Bind {
        addr: cfg.connector.listen.clone(),
        err,
    })?;
    let udp = Arc::new(udp);
    let udp_addr = udp.local_addr().expect("bound socket has an address");
    let listener = TcpListener::bind(&cfg.admin.listen).await.map_err(|err| ServerError::Bind {
        addr: cfg.admin.listen.clone(),
        err,
    })?;
    let admin_addr = listener.local_addr().expect("bound listener has an address");

    let conn = Arc::new(Connector::new(store.clone(), bus.clone(), metrics.clone()));
    let central_srv = Arc::new(CentralServer::new(store.clone(), bus.clone(), metrics.clone(), cfg.central.clone(), cfg.region.clone()));
    let join_srv = Arc::new(JoinServer::new(store.clone(), bus.clone(), metrics.clone(), cfg.join.clone(), &cfg.central, cfg.region.clone()));
    let nc = Arc::new(NetworkController::new(store.clone(), bus.clone(), metrics.clone(), cfg.controller.clone(), cfg.region.clone()));

    // All subscriptions exist before any traffic is accepted.
    let mut tasks = Vec::new();
    for i in 0..cfg.connector.verifiers {
        let sub = bus.subscribe(topics::GATEWAY_UP, "verifier")?;
        tasks.push(tokio::spawn(connector::run_verifier(conn.clone(), sub, format!("verifier-{i}"))));
    }
    let sub = bus.subscribe(topics::DOWNLINK_TX, "connector")?;
    tasks.push(tokio::spawn(connector::run_downlink_sender(conn.clone(), udp.clone(), sub)));

    let mut centrals = Vec::new();
    for i in 0..cfg.central.instances {
        let inputs = CentralInputs {
            uplinks: bus.subscribe(topics::UPLINK_RAW, "central")?,
            joins: bus.subscribe(topics::UPLINK_JOIN, "central")?,
            app_downlinks: bus.subscribe(topics::APPSERVER_OUT, "central")?,
        };
        centrals.push(Some(tokio::spawn(central::run_central(central_srv.clone(), inputs, format!("central-{i}")))));
    }
    for i in 0..cfg.join.instances {
        let sub = bus.subscribe(topics::JOIN_REQUEST, "join")?;
        tasks.push(tokio::spawn(join::run_join(join_srv.clone(), sub, format!("join-{i}"))));
    }
    for i in 0..cfg.controller.instances {
        let sub = bus.subscribe(topics::UPLINK_MAC, "controller")?;
        tasks.push(tokio::spawn(controller::run_controller(nc.clone(), sub, format!("controller-{i}"))));
    }
    let sub = bus.subscribe(topics::APPSERVER_IN, "appserver")?;
    tasks.push(tokio::spawn(central::run_app_stub(store.clone(), metrics.clone(), sub)));

    let app = admin::router(AdminState {
        store: store.clone(),
        metrics: metrics.clone(),
        controller: nc,
        token: cfg.admin.token.clone(),
    });
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("admin API stopped: {e}");
        }
    }));
    tasks.push(tokio::spawn(connector::run_udp(conn, udp)));

    tracing::info!(%udp_addr, %admin_addr, "server started");
    Ok(ServerHandle {
        udp_addr,
        admin_addr,
        store,
        bus,
        metrics,
        config: cfg,
        tasks: Mutex::new(tasks),
        centrals: Mutex::new(centrals),
    })
}
