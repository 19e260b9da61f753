use isggen_service::{serve, AppState, SessionStore};

use crate::error::{CliError, CliResult, Context, ExitKind};
use crate::ServeArgs;

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
    tracing::info!("shutting down");
}

pub fn run(args: &ServeArgs) -> CliResult<()> {
    let store = SessionStore::open(&args.store).map_err(|e| CliError::data(format!("{}: {e}", args.store.display())))?;
    let state = AppState::from_checkpoint(&args.checkpoint, store).context(ExitKind::Data, || format!("checkpoint {}", args.checkpoint.display()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new(ExitKind::Failure, format!("runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(|e| CliError::config(format!("cannot listen on {}: {e}", args.addr)))?;
        let addr = listener.local_addr().map_err(|e| CliError::new(ExitKind::Failure, e.to_string()))?;
        tracing::info!(%addr, checkpoint = state.checkpoint_id(), "serving");
        println!("listening on {addr}");
        serve(listener, state, shutdown_signal())
            .await
            .map_err(|e| CliError::new(ExitKind::Failure, format!("server: {e}")))
    })
}
