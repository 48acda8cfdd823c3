use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use gridforge_core::events::noop_sink;
use gridforge_manager::{serve, Manager, ManagerConfig, NoHooks};

/// Runs the gridforge manager.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML configuration file.
    #[arg(long, env = "GRIDFORGE_MANAGER_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `listen` from the configuration.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    /// Overrides `state_dir` from the configuration.
    #[arg(long)]
    state_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(path) => ManagerConfig::load(path).map_err(anyhow::Error::msg)?,
        None => ManagerConfig::default(),
    };
    if let Some(listen) = args.listen {
        cfg.listen = listen;
    }
    if args.state_dir.is_some() {
        cfg.state_dir = args.state_dir;
    }
    if cfg.tokens.is_empty() {
        tracing::warn!("no tokens configured; every call will be rejected");
    }
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    let manager = Manager::open(cfg, noop_sink(), Arc::new(NoHooks))?;
    let handle = serve(manager, listener).await?;
    tracing::info!("manager listening on {}", handle.url());
    tokio::signal::ctrl_c().await?;
    handle.shutdown().await;
    Ok(())
}
