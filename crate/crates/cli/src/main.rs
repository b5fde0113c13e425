use std::fs::File;
use std::io::BufWriter;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use base64::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lorans_server::admin::{DeviceInput, DownlinkInput, GatewayInput};
use lorans_server::client::AdminClient;
use lorans_server::model::Activation;
use lorans_server::ServerConfig;
use lorans_sim::{run_scenario_detailed, sweep, write_ndjson, ScenarioConfig, ServerTarget, SweepConfig};

#[derive(Parser)]
#[command(name = "lorans", version, about = "LoRaWAN network server, simulator and admin client")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Api {
    /// Admin API base URL.
    #[arg(long, env = "LORANS_API", default_value = "http://127.0.0.1:8080")]
    api: String,
    #[arg(long, env = "LORANS_TOKEN")]
    token: Option<String>,
}

impl Api {
    fn client(&self) -> AdminClient {
        AdminClient::new(self.api.clone(), self.token.clone())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the network server.
    Serve {
        /// TOML config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the gateway UDP listen address.
        #[arg(long)]
        listen: Option<String>,
        /// Override the admin API listen address.
        #[arg(long)]
        admin: Option<String>,
    },
    /// Run a closed-loop load scenario against a server.
    Simulate(SimulateArgs),
    /// Throughput sweep over node counts, each point on a fresh in-process server.
    Sweep(SweepArgs),
    #[command(subcommand)]
    Device(DeviceCmd),
    #[command(subcommand)]
    Gateway(GatewayCmd),
    /// Queue an application downlink.
    Downlink {
        dev_eui: String,
        #[arg(long, default_value_t = 1)]
        fport: u8,
        /// Payload as hex.
        #[arg(long)]
        hex: String,
        #[arg(long)]
        confirmed: bool,
        #[command(flatten)]
        api: Api,
    },
    /// Print server counters and worker load.
    Stats {
        #[command(flatten)]
        api: Api,
    },
    #[command(subcommand)]
    Fixtures(FixturesCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Otaa,
    Abp,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Otaa => Activation::Otaa,
            ActivationArg::Abp => Activation::Abp,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    gateways: usize,
    /// Seconds between a response and the next uplink.
    #[arg(long, default_value_t = 40.0)]
    period: f64,
    /// Measurement window, seconds.
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.0)]
    warmup: f64,
    /// Seconds after which an answer counts as a failure.
    #[arg(long, default_value_t = 5.0)]
    timeout: f64,
    /// Confirmed uplinks (the default).
    #[arg(long, conflicts_with = "unconfirmed")]
    confirmed: bool,
    #[arg(long)]
    unconfirmed: bool,
    #[arg(long, value_enum, default_value = "otaa")]
    activation: ActivationArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Gateway UDP endpoint of the server.
    #[arg(long, default_value = "127.0.0.1:1700")]
    server: String,
    /// Skip device and gateway registration.
    #[arg(long)]
    no_register: bool,
    /// Namespace for generated EUIs, to run several scenarios on one server.
    #[arg(long, default_value_t = 0x5100)]
    id_prefix: u16,
    /// Write per-request rows and the summary as NDJSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    api: Api,
}

#[derive(Args)]
struct SweepArgs {
    /// Node counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    points: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    instances: usize,
    /// Emulated per-message processing time of a central instance.
    #[arg(long, default_value_t = 100)]
    service_time_ms: u64,
    #[arg(long, default_value_t = 40.0)]
    period: f64,
    #[arg(long, default_value_t = 120.0)]
    warmup: f64,
    #[arg(long, default_value_t = 80.0)]
    window: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write one summary line per point plus the fit as NDJSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DeviceCmd {
    Add {
        dev_eui: String,
        #[arg(long, value_enum, default_value = "otaa")]
        activation: ActivationArg,
        #[arg(long)]
        app_eui: Option<String>,
        #[arg(long)]
        app_key: Option<String>,
        #[arg(long)]
        dev_addr: Option<String>,
        #[arg(long)]
        nwk_skey: Option<String>,
        #[arg(long)]
        app_skey: Option<String>,
        #[arg(long, default_value = "")]
        description: String,
        #[command(flatten)]
        api: Api,
    },
    Rm {
        dev_eui: String,
        #[command(flatten)]
        api: Api,
    },
    Ls {
        #[command(flatten)]
        api: Api,
    },
}

#[derive(Subcommand)]
enum GatewayCmd {
    Add {
        gateway_eui: String,
        #[arg(long, default_value = "")]
        description: String,
        #[command(flatten)]
        api: Api,
    },
    Rm {
        gateway_eui: String,
        #[command(flatten)]
        api: Api,
    },
    Ls {
        #[command(flatten)]
        api: Api,
    },
}

#[derive(Subcommand)]
enum FixturesCmd {
    /// Import registry lines (devices and gateways) from an NDJSON file.
    Load {
        file: PathBuf,
        #[command(flatten)]
        api: Api,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .with_context(|| format!("{addr} resolves to nothing"))
}

fn decode_hex(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    if s.len() % 2 != 0 {
        bail!("odd number of hex digits");
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).with_context(|| format!("bad hex at {i}")))
        .collect()
}

async fn serve(config: Option<PathBuf>, listen: Option<String>, admin: Option<String>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ServerConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
        None => ServerConfig::default(),
    };
    if let Some(l) = listen {
        cfg.connector.listen = l;
    }
    if let Some(a) = admin {
        cfg.admin.listen = a;
    }
    let handle = lorans_server::start(cfg).await?;
    eprintln!("gateway UDP on {}, admin API on {}", handle.udp_addr, handle.admin_url());
    tokio::signal::ctrl_c().await?;
    handle.shutdown();
    Ok(())
}

async fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = ScenarioConfig::new(ServerTarget {
        udp: resolve(&a.server)?,
        admin_url: a.api.api.clone(),
        token: a.api.token.clone(),
    });
    cfg.nodes = a.nodes;
    cfg.gateways = a.gateways;
    cfg.period_s = a.period;
    cfg.duration_s = a.duration;
    cfg.warmup_s = a.warmup;
    cfg.response_timeout_s = a.timeout;
    cfg.confirmed = !a.unconfirmed;
    cfg.activation = a.activation.into();
    cfg.seed = a.seed;
    cfg.register = !a.no_register;
    cfg.id_prefix = a.id_prefix;
    let out = run_scenario_detailed(cfg).await?;
    if let Some(path) = a.report {
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_ndjson(BufWriter::new(f), &out.rows, &out.report)?;
    }
    println!("{}", out.report.to_json());
    Ok(())
}

async fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = SweepConfig::new(a.points, a.instances);
    cfg.service_time_ms = a.service_time_ms;
    cfg.period_s = a.period;
    cfg.warmup_s = a.warmup;
    cfg.window_s = a.window;
    cfg.seed = a.seed;
    let res = sweep(&cfg).await?;
    let mut lines = Vec::new();
    for p in &res.points {
        let mut v = p.report.to_json();
        v["type"] = "point".into();
        v["instances"] = res.instances.into();
        lines.push(v);
    }
    lines.push(serde_json::json!({
        "type": "fit",
        "instances": res.instances,
        "fit": res.fit,
        "knee_nodes": res.knee_nodes(),
        "elapsed_s": res.elapsed_s,
    }));
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match a.report {
        Some(path) => std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

async fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Serve { config, listen, admin } => serve(config, listen, admin).await?,
        Cmd::Simulate(a) => simulate(a).await?,
        Cmd::Sweep(a) => run_sweep(a).await?,
        Cmd::Device(DeviceCmd::Add {
            dev_eui,
            activation,
            app_eui,
            app_key,
            dev_addr,
            nwk_skey,
            app_skey,
            description,
            api,
        }) => {
            let input = DeviceInput {
                dev_eui,
                app_eui,
                activation: activation.into(),
                app_key,
                dev_addr,
                nwk_skey,
                app_skey,
                description,
            };
            print_json(&api.client().add_device(&input).await?)?;
        }
        Cmd::Device(DeviceCmd::Rm { dev_eui, api }) => api.client().delete_device(dev_eui.parse()?).await?,
        Cmd::Device(DeviceCmd::Ls { api }) => print_json(&api.client().list_devices().await?)?,
        Cmd::Gateway(GatewayCmd::Add { gateway_eui, description, api }) => {
            let input = GatewayInput {
                gateway_eui,
                description,
                location: None,
            };
            print_json(&api.client().add_gateway(&input).await?)?;
        }
        Cmd::Gateway(GatewayCmd::Rm { gateway_eui, api }) => api.client().delete_gateway(gateway_eui.parse()?).await?,
        Cmd::Gateway(GatewayCmd::Ls { api }) => print_json(&api.client().list_gateways().await?)?,
        Cmd::Downlink {
            dev_eui,
            fport,
            hex,
            confirmed,
            api,
        } => {
            let input = DownlinkInput {
                fport,
                payload: base64::engine::general_purpose::STANDARD.encode(decode_hex(&hex)?),
                confirmed,
            };
            api.client().downlink(dev_eui.parse()?, &input).await?;
        }
        Cmd::Stats { api } => print_json(&api.client().stats().await?)?,
        Cmd::Fixtures(FixturesCmd::Load { file, api }) => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let n = api.client().import(text).await?;
            println!("{n} records loaded");
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).await
}
