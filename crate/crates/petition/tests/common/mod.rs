#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use petition::bench::Client;
use petition::rules::default_rule_table;
use petition::service::config::ServiceConfig;
use petition::service::pipeline::Pipeline;
use petition::service::{api, Service};
use petition_core::imaging::RasterImage;
use petition_core::model::{NetworkSpec, Parameters};
use petition_core::workflow::{Case, Templates};
use tempfile::TempDir;

/// An untrained reference network is enough to drive every stage.
pub fn pipeline(threshold: f64) -> Pipeline {
    let spec = NetworkSpec::reference();
    let params = Parameters::he_seeded(&spec, 3).unwrap();
    Pipeline::new(spec, params, default_rule_table(), Templates::default(), threshold, Default::default()).unwrap()
}

pub fn config(dir: &Path, threshold: f64) -> ServiceConfig {
    ServiceConfig { data_dir: dir.to_path_buf(), threshold, fsync: false, ..Default::default() }
}

pub fn gray_ppm(side: usize) -> Vec<u8> {
    let img = RasterImage::from_bytes(side, side, 3, vec![128; side * side * 3]).unwrap();
    petition::pnm::encode(&img).unwrap()
}

pub struct Server {
    pub url: String,
    pub service: Arc<Service>,
    pub dir: PathBuf,
    workers: Vec<JoinHandle<()>>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    _tmp: Option<TempDir>,
}

impl Server {
    /// Fresh data directory; `threshold` 1.0 sends everything to review.
    pub fn start(threshold: f64) -> Server {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = Server::start_in(tmp.path(), threshold);
        s._tmp = Some(tmp);
        s
    }

    pub fn start_in(dir: &Path, threshold: f64) -> Server {
        let service = Service::with_pipeline(config(dir, threshold), pipeline(threshold)).unwrap();
        let workers = service.spawn_workers(1);
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let svc = Arc::clone(&service);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                api::serve(svc, listener, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Server {
            url: format!("http://{addr}"),
            service,
            dir: dir.to_path_buf(),
            workers,
            shutdown: Some(tx),
            thread: Some(thread),
            _tmp: None,
        }
    }

    pub fn client(&self) -> Client {
        Client::new(&self.url)
    }

    pub fn settle(&self, id: &str) -> Case {
        self.client().wait_settled(id, Instant::now() + Duration::from_secs(60)).unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.service.stop();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
