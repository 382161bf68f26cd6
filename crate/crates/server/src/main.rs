use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use psyprobe_core::config::AppConfig;
use psyprobe_core::session::SystemClock;
use psyprobe_server::{router, AppState};
use tracing_subscriber::EnvFilter;

/// Serve counseling sessions over HTTP.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the deterministic mock backend for every session.
    #[arg(long)]
    mock: bool,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory for transcript files; overrides the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();

    let mut config = match &args.config {
        Some(path) => {
            AppConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => AppConfig::default(),
    };
    if args.data_dir.is_some() {
        config.data_dir = args.data_dir.clone();
    }
    let service = config.build_service(Arc::new(SystemClock), args.mock)?;
    let app = router(AppState::new(service, config.session.clone()));

    let listener = tokio::net::TcpListener::bind(args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    tracing::info!(addr = %listener.local_addr()?, mock = args.mock, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
