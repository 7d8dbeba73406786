#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde_json::Value;

use habitus_core::gateway::{ChatProvider, CompletionRequest, MockProvider, ProviderError};
use habitus_service::api::{router, AppState};
use habitus_service::config::{ProviderKind, ServiceConfig};

/// Serve `app` on an ephemeral port from a background runtime.
pub fn serve_router(app: axum::Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn start(state: Arc<AppState>) -> String {
    serve_router(router(state))
}

pub fn mock_config(data_dir: &std::path::Path) -> ServiceConfig {
    let mut cfg = ServiceConfig { data_dir: data_dir.to_owned(), ..Default::default() };
    cfg.provider.kind = ProviderKind::Mock;
    cfg.provider.seed = 5;
    cfg
}

pub struct Client {
    pub base: String,
    agent: ureq::Agent,
}

pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub text: String,
    pub retry_after: Option<String>,
}

impl Client {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client { base: base.to_owned(), agent }
    }

    fn finish(mut response: ureq::http::Response<ureq::Body>) -> Reply {
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .map(|v| v.to_str().unwrap().to_owned());
        let text = response.body_mut().read_to_string().unwrap();
        let body = serde_json::from_str(&text).unwrap_or(Value::Null);
        Reply { status, body, text, retry_after }
    }

    pub fn get(&self, path: &str) -> Reply {
        Self::finish(self.agent.get(format!("{}{path}", self.base)).call().unwrap())
    }

    /// POST `body` as JSON; `Value::Null` sends no body at all.
    pub fn post(&self, path: &str, body: Value) -> Reply {
        let request = self.agent.post(format!("{}{path}", self.base));
        let response = if body.is_null() { request.send_empty() } else { request.send_json(body) };
        Self::finish(response.unwrap())
    }

    pub fn put(&self, path: &str, body: Value) -> Reply {
        Self::finish(self.agent.put(format!("{}{path}", self.base)).send_json(body).unwrap())
    }

    pub fn patch(&self, path: &str, body: Value) -> Reply {
        Self::finish(self.agent.patch(format!("{}{path}", self.base)).send_json(body).unwrap())
    }

    /// Poll a job until it leaves the queued/running states.
    pub fn wait_job(&self, job_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            let r = self.get(&format!("/v1/jobs/{job_id}"));
            assert_eq!(r.status, 200);
            let state = r.body["state"].as_str().unwrap().to_owned();
            if state == "done" || state == "failed" {
                return r.body;
            }
            assert!(Instant::now() < deadline, "job {job_id} stuck in {state}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn induced_persona(&self, id: &str, facts: &[&str]) {
        let r = self.post("/v1/personas", serde_json::json!({"persona_id": id, "facts": facts}));
        assert_eq!(r.status, 201, "{}", r.text);
        let job = self.post(&format!("/v1/personas/{id}/induce"), Value::Null);
        assert_eq!(job.status, 202, "{}", job.text);
        let done = self.wait_job(job.body["job_id"].as_str().unwrap());
        assert_eq!(done["state"], "done");
    }
}

/// Mock provider that can be held closed so calls block until released.
pub struct GatedProvider {
    inner: MockProvider,
    open: Mutex<bool>,
    changed: Condvar,
    pub calls: AtomicUsize,
    pub waiting: AtomicUsize,
}

impl GatedProvider {
    pub fn new(seed: u64) -> Arc<Self> {
        Arc::new(GatedProvider {
            inner: MockProvider::new(seed),
            open: Mutex::new(true),
            changed: Condvar::new(),
            calls: AtomicUsize::new(0),
            waiting: AtomicUsize::new(0),
        })
    }

    pub fn close(&self) {
        *self.open.lock() = false;
    }

    pub fn open(&self) {
        *self.open.lock() = true;
        self.changed.notify_all();
    }

    pub fn wait_for_waiters(&self, n: usize) {
        let deadline = Instant::now() + Duration::from_secs(10);
        while self.waiting.load(Ordering::SeqCst) < n {
            assert!(Instant::now() < deadline, "no call reached the provider");
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl ChatProvider for GatedProvider {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut open = self.open.lock();
        if !*open {
            self.waiting.fetch_add(1, Ordering::SeqCst);
            while !*open {
                self.changed.wait(&mut open);
            }
            self.waiting.fetch_sub(1, Ordering::SeqCst);
        }
        drop(open);
        self.inner.complete(request)
    }
}
