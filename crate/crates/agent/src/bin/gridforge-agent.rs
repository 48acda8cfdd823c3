use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use gridforge_agent::{AgentConfig, Backend, ProcSampler};
use gridforge_core::events::noop_sink;
use gridforge_executor::{ContainerExecutor, Executor, SandboxExecutor};

/// Runs a gridforge client agent on this machine.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Agent configuration file (TOML).
    #[arg(long, env = "GRIDFORGE_AGENT_CONFIG")]
    config: PathBuf,
    /// Overrides `listen` from the config file.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let args = Args::parse();
    let mut cfg = AgentConfig::load(&args.config).map_err(anyhow::Error::msg)?;
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    let grace = AgentConfig::secs(cfg.kill_grace_s);
    let exec: Arc<dyn Executor> = match &cfg.backend {
        Backend::Sandbox => Arc::new(SandboxExecutor::new(cfg.workdir.join("executor"), grace)?),
        Backend::Container { cli } => Arc::new(ContainerExecutor::new(cli, cfg.workdir.join("executor"), grace)?),
    };
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    let handle = gridforge_agent::start(cfg, exec, Arc::new(ProcSampler::default()), noop_sink(), listener).await?;
    tracing::info!("agent listening on {}", handle.addr);
    tokio::signal::ctrl_c().await?;
    handle.shutdown(false).await;
    Ok(())
}
