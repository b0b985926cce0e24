use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use pooltest::zones::{compute_metaprocedure_with_progress, default_resolution, ZONE_LIMIT};
use pooltest::{Error, Session, SessionContext, SessionSnapshot, ZoneMap, ZoneOptions};
use serde::Serialize;
use tokio::sync::watch;

use crate::error::ApiError;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_OPTIMIZER_LIMIT: usize = 6;

/// Zone maps up to this size are computed inline when a request needs one;
/// larger ones answer 202 until their background job finishes.
pub const INLINE_ZONE_LIMIT: usize = 3;

/// How long a request waits on a zone job by default before answering 202.
pub const DEFAULT_PENDING_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub optimizer_limit: usize,
    /// Zone map resolution per n; missing entries use the library default.
    pub resolutions: BTreeMap<usize, u32>,
    /// Directory with the browser bundle, served under `/`.
    pub static_dir: Option<PathBuf>,
    /// How long a request waits on an unfinished zone map before answering 202.
    pub pending_grace: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            addr: DEFAULT_ADDR.parse().expect("valid default address"),
            data_dir: data_dir.into(),
            optimizer_limit: DEFAULT_OPTIMIZER_LIMIT,
            resolutions: BTreeMap::new(),
            static_dir: None,
            pending_grace: DEFAULT_PENDING_GRACE,
        }
    }

    /// Reads `POOLTEST_DATA_DIR`, `POOLTEST_ADDR` and `POOLTEST_STATIC_DIR`.
    pub fn from_env() -> Result<Self, Error> {
        let data_dir = std::env::var_os("POOLTEST_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| "pooltest-data".into());
        let mut config = ServiceConfig::new(data_dir);
        if let Ok(addr) = std::env::var("POOLTEST_ADDR") {
            config.addr = addr
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("POOLTEST_ADDR '{addr}' is not HOST:PORT")))?;
        }
        config.static_dir = std::env::var_os("POOLTEST_STATIC_DIR").map(PathBuf::from);
        Ok(config)
    }

    pub fn resolution(&self, n: usize) -> u32 {
        self.resolutions.get(&n).copied().unwrap_or_else(|| default_resolution(n))
    }

    fn validate(&self) -> Result<(), Error> {
        if self.optimizer_limit == 0 {
            return Err(Error::InvalidArgument("optimizer limit must be positive".into()));
        }
        if let Some((n, _)) = self.resolutions.iter().find(|(_, &r)| r == 0) {
            return Err(Error::InvalidArgument(format!("zone resolution for n = {n} must be positive")));
        }
        Ok(())
    }
}

/// Progress of a zone map job, as reported with 202.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct JobStatus {
    pub status: &'static str,
    pub n: usize,
    pub resolution: u32,
    pub done: u64,
    pub total: u64,
}

struct Job {
    n: usize,
    resolution: u32,
    done: AtomicU64,
    total: AtomicU64,
    finished: watch::Sender<bool>,
}

impl Job {
    fn status(&self) -> JobStatus {
        JobStatus {
            status: "pending",
            n: self.n,
            resolution: self.resolution,
            done: self.done.load(Ordering::Relaxed),
            total: self.total.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone)]
enum Slot {
    Running(Arc<Job>),
    Ready(Arc<ZoneMap>),
    Failed(String),
}

pub struct SessionSlot {
    pub session: Session,
    pub closed: bool,
}

pub struct AppState {
    pub config: ServiceConfig,
    zones: Mutex<HashMap<(usize, u32), Slot>>,
    sessions: RwLock<HashMap<String, Arc<tokio::sync::Mutex<SessionSlot>>>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)
}

impl AppState {
    /// Creates the data directory layout and restores saved sessions.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, Error> {
        config.validate()?;
        let state = AppState {
            config,
            zones: Mutex::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        };
        fs::create_dir_all(state.sessions_dir())?;
        fs::create_dir_all(state.zones_dir())?;
        let probe = state.config.data_dir.join(".write-probe");
        fs::write(&probe, b"")?;
        fs::remove_file(probe)?;
        state.restore_sessions()?;
        Ok(Arc::new(state))
    }

    fn sessions_dir(&self) -> PathBuf {
        self.config.data_dir.join("sessions")
    }

    fn zones_dir(&self) -> PathBuf {
        self.config.data_dir.join("zones")
    }

    pub fn zone_path(&self, n: usize, resolution: u32) -> PathBuf {
        self.zones_dir().join(format!("zonemap-n{n}-r{resolution}-float.json"))
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.sessions_dir().join(format!("{id}.json"))
    }

    pub fn session_context<'a>(&self, maps: &'a [&'a ZoneMap]) -> SessionContext<'a> {
        SessionContext {
            zone_maps: maps,
            optimizer_limit: self.config.optimizer_limit,
        }
    }

    fn restore_sessions(&self) -> Result<(), Error> {
        let mut restored = HashMap::new();
        for entry in fs::read_dir(self.sessions_dir())? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let session = fs::read(&path)
                .map_err(Error::from)
                .and_then(|bytes| Ok(serde_json::from_slice::<SessionSnapshot>(&bytes)?))
                .and_then(|snap| Session::restore(&snap, &self.session_context(&[])));
            match session {
                Ok(session) => {
                    let id = session.id().to_string();
                    restored.insert(id, Arc::new(tokio::sync::Mutex::new(SessionSlot { session, closed: false })));
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable session snapshot"),
            }
        }
        tracing::info!(count = restored.len(), "restored sessions");
        *self.sessions.write().expect("session table poisoned") = restored;
        Ok(())
    }

    pub fn save_session(&self, session: &Session) -> Result<(), Error> {
        let bytes = serde_json::to_vec_pretty(&session.snapshot())?;
        write_atomic(&self.session_path(session.id()), &bytes)?;
        Ok(())
    }

    /// Registers a new session; the id must be unused.
    pub fn insert_session(&self, session: Session) -> Result<(), ApiError> {
        let mut table = self.sessions.write().expect("session table poisoned");
        if table.contains_key(session.id()) {
            return Err(ApiError::Conflict(format!("session '{}' already exists", session.id())));
        }
        self.save_session(&session)?;
        table.insert(
            session.id().to_string(),
            Arc::new(tokio::sync::Mutex::new(SessionSlot { session, closed: false })),
        );
        Ok(())
    }

    pub fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<SessionSlot>>, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session '{id}'")))
    }

    pub async fn close_session(&self, id: &str) -> Result<(), ApiError> {
        let slot = self.session(id)?;
        let mut guard = slot.lock().await;
        if guard.closed {
            return Err(ApiError::NotFound(format!("no session '{id}'")));
        }
        guard.closed = true;
        self.sessions.write().expect("session table poisoned").remove(id);
        match fs::remove_file(self.session_path(id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::from(e).into()),
            _ => Ok(()),
        }
    }

    /// The zone map for `n` at the configured resolution. With `wait` the
    /// call returns once the map exists; otherwise a job still running after
    /// a short grace period answers [`ApiError::Pending`].
    pub async fn zone_map(self: &Arc<Self>, n: usize, wait: bool) -> Result<Arc<ZoneMap>, ApiError> {
        if n == 0 || n > ZONE_LIMIT {
            return Err(Error::UnsupportedSize {
                what: "zone maps",
                n,
                limit: ZONE_LIMIT,
                hint: None,
            }
            .into());
        }
        let resolution = self.config.resolution(n);
        let key = (n, resolution);
        let job = {
            let mut zones = self.zones.lock().expect("zone table poisoned");
            match zones.get(&key).cloned() {
                Some(Slot::Ready(map)) => return Ok(map),
                Some(Slot::Failed(message)) => {
                    zones.remove(&key);
                    return Err(ApiError::Internal(format!("zone map job for n = {n} failed: {message}")));
                }
                Some(Slot::Running(job)) => job,
                None => {
                    let job = Arc::new(Job {
                        n,
                        resolution,
                        done: AtomicU64::new(0),
                        total: AtomicU64::new(0),
                        finished: watch::channel(false).0,
                    });
                    zones.insert(key, Slot::Running(job.clone()));
                    self.spawn_zone_job(job.clone());
                    job
                }
            }
        };
        let mut rx = job.finished.subscribe();
        let finished = if wait {
            rx.wait_for(|&f| f).await.is_ok()
        } else {
            matches!(tokio::time::timeout(self.config.pending_grace, rx.wait_for(|&f| f)).await, Ok(Ok(_)))
        };
        if !finished {
            return Err(ApiError::Pending(job.status()));
        }
        match self.zones.lock().expect("zone table poisoned").get(&key).cloned() {
            Some(Slot::Ready(map)) => Ok(map),
            Some(Slot::Failed(message)) => Err(ApiError::Internal(format!("zone map job for n = {n} failed: {message}"))),
            _ => Err(ApiError::Internal("zone map job vanished".into())),
        }
    }

    /// Zone maps for every size in `sizes`; small ones are awaited.
    pub async fn zone_maps(self: &Arc<Self>, sizes: &[usize]) -> Result<Vec<Arc<ZoneMap>>, ApiError> {
        let mut maps = Vec::with_capacity(sizes.len());
        for &n in sizes {
            maps.push(self.zone_map(n, n <= INLINE_ZONE_LIMIT).await?);
        }
        Ok(maps)
    }

    fn spawn_zone_job(self: &Arc<Self>, job: Arc<Job>) {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let result = state.load_or_compute(&job);
            let slot = match result {
                Ok(map) => Slot::Ready(Arc::new(map)),
                Err(e) => Slot::Failed(e.to_string()),
            };
            state
                .zones
                .lock()
                .expect("zone table poisoned")
                .insert((job.n, job.resolution), slot);
            job.finished.send_replace(true);
        });
    }

    /// Reuses a saved map when it verifies, else computes and saves one.
    fn load_or_compute(&self, job: &Job) -> Result<ZoneMap, Error> {
        let path = self.zone_path(job.n, job.resolution);
        if path.exists() {
            match ZoneMap::load(&path) {
                Ok(map) if map.n() == job.n && map.resolution() == job.resolution => return Ok(map),
                Ok(_) => tracing::warn!(path = %path.display(), "zone map file has other parameters; recomputing"),
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "zone map file rejected; recomputing"),
            }
        }
        tracing::info!(n = job.n, resolution = job.resolution, "computing zone map");
        let options = ZoneOptions {
            resolution: job.resolution,
            ..ZoneOptions::new(job.n)
        };
        let map = compute_metaprocedure_with_progress(job.n, options, &|done, total| {
            job.done.store(done, Ordering::Relaxed);
            job.total.store(total, Ordering::Relaxed);
        })?;
        map.save(&path)?;
        Ok(map)
    }
}
