#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use mcat_core::adaptive::{Engine, Readout, SessionConfig, StoppingConfig};
use mcat_core::fixture::{fixture_bank, fixture_structure};
use mcat_core::langmodel::{EmbeddingClient, TrainedModel};
use mcat_service::service::{Service, ServiceParts};
use tokio::sync::oneshot;

pub fn engine() -> Engine {
    let readout = Readout::from_structure(&fixture_structure()).unwrap();
    Engine::new(Arc::new(fixture_bank()), "default", readout).unwrap()
}

pub fn open(dir: &Path, compact_every: usize) -> Service {
    open_with(dir, compact_every, None, None)
}

pub fn open_with(
    dir: &Path,
    compact_every: usize,
    model: Option<TrainedModel>,
    client: Option<Arc<dyn EmbeddingClient>>,
) -> Service {
    Service::open(ServiceParts {
        engine: engine(),
        model,
        client,
        data_dir: dir.to_path_buf(),
        compact_every,
    })
    .unwrap()
}

/// Config that administers the whole bank.
pub fn full_length() -> SessionConfig {
    SessionConfig {
        stopping: StoppingConfig {
            min_items: 48,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct Server {
    pub base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub async fn start(service: Service) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(mcat_service::http::serve(Arc::new(service), listener, async {
            let _ = rx.await;
        }));
        Self {
            base,
            stop: Some(tx),
            handle,
        }
    }

    /// Drops the server without a graceful shutdown.
    pub async fn kill(mut self) {
        self.stop.take();
        self.handle.abort();
        let _ = self.handle.await;
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}
