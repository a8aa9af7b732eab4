//! `utg serve`: hosts the session API until interrupted.

use std::path::PathBuf;

use clap::Args;

use crate::config::{fail, CliResult};

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Session store directory.
    #[arg(long, env = "UTG_STORE", default_value = "./sessions")]
    store: PathBuf,
}

pub fn run_serve(a: ServeArgs) -> CliResult<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| fail(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| fail(e.to_string()))?;
        println!("listening on http://{addr}");
        utg_service::serve(listener, a.store.clone(), shutdown_signal())
            .await
            .map_err(|e| fail(format!("{}: {e}", a.store.display())))?;
        eprintln!("shut down cleanly");
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutdown requested");
}
