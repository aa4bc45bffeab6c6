//! Capture-task registry and the daemon control protocol.
//!
//! Five control operations are exposed: start a feature-extraction task,
//! start a PCAP capture task, stop a task, query status, and remove a
//! finished task. The daemon speaks newline-delimited JSON over a local
//! stream socket; every request carries a correlation id echoed in exactly
//! one response.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Dissected;
use crate::features::{CsvSink, WindowAggregator, WindowConfig};
use crate::filter::parse_filter;
use crate::pcap::PcapWriter;
use crate::pipeline::{dispatch, Lane, OverflowPolicy, QueueStats, DEFAULT_QUEUE_CAPACITY};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bad filter: {0}")]
    BadFilter(String),
    #[error("sink not writable: {0}")]
    SinkUnwritable(String),
    #[error("daemon has no running source")]
    NoSource,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is still running")]
    TaskStillRunning(String),
    #[error("bad window config: {0}")]
    BadWindowConfig(String),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::BadFilter(_) => "bad_filter",
            ServiceError::SinkUnwritable(_) => "sink_unwritable",
            ServiceError::NoSource => "no_source",
            ServiceError::UnknownTask(_) => "unknown_task",
            ServiceError::TaskStillRunning(_) => "task_still_running",
            ServiceError::BadWindowConfig(_) => "bad_window_config",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    User,
    Overflow,
    SourceExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "reason")]
pub enum TaskState {
    Running,
    Stopped(StopReason),
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStatus {
    pub id: String,
    pub kind: String,
    #[serde(flatten)]
    pub state: TaskState,
    pub frames_processed: u64,
    pub frames_dropped: u64,
    pub windows_emitted: u64,
    pub started_at_us: u64,
    pub queue: QueueView,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QueueView {
    pub capacity: usize,
    pub occupancy: usize,
    pub pushed: u64,
    pub popped: u64,
    pub dropped: u64,
}

impl From<QueueStats> for QueueView {
    fn from(s: QueueStats) -> Self {
        QueueView {
            capacity: s.capacity,
            occupancy: s.occupancy,
            pushed: s.pushed,
            popped: s.popped,
            dropped: s.dropped,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    pub capacity: usize,
    pub policy: OverflowPolicy,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            capacity: DEFAULT_QUEUE_CAPACITY,
            policy: OverflowPolicy::DropNewest,
        }
    }
}

struct SharedCounters {
    frames_processed: AtomicU64,
    windows_emitted: AtomicU64,
    failed: Mutex<Option<String>>,
    done: AtomicBool,
}

struct TaskEntry {
    kind: String,
    lane: Arc<Lane>,
    counters: Arc<SharedCounters>,
    worker: Option<JoinHandle<()>>,
    final_state: Option<TaskState>,
    started_at_us: u64,
    seq: u64,
}

fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_micros() as u64
}

/// Registry of live capture tasks plus the dispatch fan-out list.
///
/// Control operations are serialized by the internal lock; the data path
/// (dispatch into lanes, consumer workers) runs concurrently. Status reads
/// are eventually consistent snapshots.
pub struct TaskRegistry {
    tasks: Mutex<HashMap<String, TaskEntry>>,
    lanes: Mutex<Vec<Arc<Lane>>>,
    next_id: AtomicU64,
    has_source: AtomicBool,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskRegistry {
    pub fn new() -> Self {
        TaskRegistry {
            tasks: Mutex::new(HashMap::new()),
            lanes: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            has_source: AtomicBool::new(false),
        }
    }

    pub fn set_source_running(&self, running: bool) {
        self.has_source.store(running, Ordering::Release);
    }

    /// Feed one dissected frame to every running task.
    pub fn dispatch_frame(&self, frame: &Arc<Dissected>) {
        let lanes = self.lanes.lock().unwrap().clone();
        dispatch(frame, &lanes);
    }

    fn alloc_id(&self) -> (String, u64) {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        (format!("t{n:03}"), n)
    }

    fn register(
        &self,
        kind: String,
        lane: Arc<Lane>,
        counters: Arc<SharedCounters>,
        worker: JoinHandle<()>,
    ) -> String {
        let (id, seq) = self.alloc_id();
        self.lanes.lock().unwrap().push(Arc::clone(&lane));
        self.tasks.lock().unwrap().insert(
            id.clone(),
            TaskEntry {
                kind,
                lane,
                counters,
                worker: Some(worker),
                final_state: None,
                started_at_us: now_us(),
                seq,
            },
        );
        id
    }

    /// Start a feature-extraction task writing CSV to `sink`.
    ///
    /// The CSV header is written immediately; a partial window at stop time
    /// is emitted with the truncated marker set.
    pub fn start_feature_task(
        &self,
        cfg: WindowConfig,
        filter: Option<&str>,
        sink: impl AsRef<Path>,
        queue: QueueConfig,
    ) -> Result<String, ServiceError> {
        if !self.has_source.load(Ordering::Acquire) {
            return Err(ServiceError::NoSource);
        }
        let filter = filter
            .map(parse_filter)
            .transpose()
            .map_err(|e| ServiceError::BadFilter(e.to_string()))?;
        let mut csv =
            CsvSink::create(&sink).map_err(|e| ServiceError::SinkUnwritable(e.to_string()))?;
        let lane = Lane::new(filter, queue.capacity, queue.policy);
        let counters = Arc::new(SharedCounters {
            frames_processed: AtomicU64::new(0),
            windows_emitted: AtomicU64::new(0),
            failed: Mutex::new(None),
            done: AtomicBool::new(false),
        });
        let worker = {
            let lane = Arc::clone(&lane);
            let counters = Arc::clone(&counters);
            std::thread::spawn(move || {
                let mut agg = WindowAggregator::new(cfg);
                let fail = |e: String, counters: &SharedCounters| {
                    *counters.failed.lock().unwrap() = Some(e);
                };
                loop {
                    match lane.queue.pop(Duration::from_millis(50)) {
                        Some(frame) => {
                            counters.frames_processed.fetch_add(1, Ordering::Relaxed);
                            for row in agg.ingest(&frame) {
                                counters.windows_emitted.fetch_add(1, Ordering::Relaxed);
                                if let Err(e) = csv.write_row(&row) {
                                    fail(e.to_string(), &counters);
                                    lane.stop();
                                    break;
                                }
                            }
                        }
                        None => {
                            if lane.queue.is_closed() {
                                break;
                            }
                        }
                    }
                }
                for row in agg.finalize() {
                    counters.windows_emitted.fetch_add(1, Ordering::Relaxed);
                    let _ = csv.write_row(&row);
                }
                if let Err(e) = csv.finish() {
                    *counters.failed.lock().unwrap() = Some(e.to_string());
                }
                counters.done.store(true, Ordering::Release);
            })
        };
        Ok(self.register("features".into(), lane, counters, worker))
    }

    /// Start a TCPdump-like capture task writing PCAP to `path`.
    pub fn start_pcap_task(
        &self,
        path: impl AsRef<Path>,
        with_fcs: bool,
        filter: Option<&str>,
        queue: QueueConfig,
    ) -> Result<String, ServiceError> {
        if !self.has_source.load(Ordering::Acquire) {
            return Err(ServiceError::NoSource);
        }
        let filter = filter
            .map(parse_filter)
            .transpose()
            .map_err(|e| ServiceError::BadFilter(e.to_string()))?;
        let mut pcap = PcapWriter::create(&path, with_fcs)
            .map_err(|e| ServiceError::SinkUnwritable(e.to_string()))?;
        let lane = Lane::new(filter, queue.capacity, queue.policy);
        let counters = Arc::new(SharedCounters {
            frames_processed: AtomicU64::new(0),
            windows_emitted: AtomicU64::new(0),
            failed: Mutex::new(None),
            done: AtomicBool::new(false),
        });
        let worker = {
            let lane = Arc::clone(&lane);
            let counters = Arc::clone(&counters);
            std::thread::spawn(move || {
                loop {
                    match lane.queue.pop(Duration::from_millis(50)) {
                        Some(frame) => {
                            counters.frames_processed.fetch_add(1, Ordering::Relaxed);
                            if let Err(e) = pcap.write_frame(&frame.raw) {
                                *counters.failed.lock().unwrap() = Some(e.to_string());
                                lane.stop();
                                break;
                            }
                        }
                        None => {
                            if lane.queue.is_closed() {
                                break;
                            }
                        }
                    }
                }
                if let Err(e) = pcap.finish() {
                    *counters.failed.lock().unwrap() = Some(e.to_string());
                }
                counters.done.store(true, Ordering::Release);
            })
        };
        Ok(self.register("pcap".into(), lane, counters, worker))
    }

    fn state_of(entry: &TaskEntry) -> TaskState {
        if let Some(final_state) = &entry.final_state {
            return final_state.clone();
        }
        if let Some(e) = entry.counters.failed.lock().unwrap().clone() {
            return TaskState::Failed(e);
        }
        if entry.lane.overflowed() {
            return TaskState::Stopped(StopReason::Overflow);
        }
        if entry.lane.is_running() {
            TaskState::Running
        } else {
            TaskState::Stopped(StopReason::User)
        }
    }

    fn status_of(entry: &TaskEntry, id: &str) -> TaskStatus {
        TaskStatus {
            id: id.to_string(),
            kind: entry.kind.clone(),
            state: Self::state_of(entry),
            frames_processed: entry.counters.frames_processed.load(Ordering::Relaxed),
            frames_dropped: entry.lane.queue.stats().dropped,
            windows_emitted: entry.counters.windows_emitted.load(Ordering::Relaxed),
            started_at_us: entry.started_at_us,
            queue: entry.lane.queue.stats().into(),
        }
    }

    /// Stop a task: close its queue, wait for the worker to drain and flush
    /// sinks, and return the final status. Idempotent on stopped tasks.
    pub fn stop_task(&self, id: &str) -> Result<TaskStatus, ServiceError> {
        let worker = {
            let mut tasks = self.tasks.lock().unwrap();
            let entry = tasks
                .get_mut(id)
                .ok_or_else(|| ServiceError::UnknownTask(id.to_string()))?;
            entry.lane.stop();
            entry.worker.take()
        };
        if let Some(worker) = worker {
            let _ = worker.join();
        }
        let mut tasks = self.tasks.lock().unwrap();
        let entry = tasks
            .get_mut(id)
            .ok_or_else(|| ServiceError::UnknownTask(id.to_string()))?;
        if entry.final_state.is_none() {
            let state = if let Some(e) = entry.counters.failed.lock().unwrap().clone() {
                TaskState::Failed(e)
            } else if entry.lane.overflowed() {
                TaskState::Stopped(StopReason::Overflow)
            } else {
                TaskState::Stopped(StopReason::User)
            };
            entry.final_state = Some(state);
        }
        Ok(Self::status_of(entry, id))
    }

    pub fn task_status(&self, id: &str) -> Result<TaskStatus, ServiceError> {
        let tasks = self.tasks.lock().unwrap();
        let entry = tasks
            .get(id)
            .ok_or_else(|| ServiceError::UnknownTask(id.to_string()))?;
        Ok(Self::status_of(entry, id))
    }

    /// All tasks, sorted by start time.
    pub fn all_status(&self) -> Vec<TaskStatus> {
        let tasks = self.tasks.lock().unwrap();
        let mut all: Vec<_> = tasks
            .iter()
            .map(|(id, e)| (e.seq, Self::status_of(e, id)))
            .collect();
        all.sort_by_key(|(seq, _)| *seq);
        all.into_iter().map(|(_, s)| s).collect()
    }

    /// Remove a stopped or failed task from memory.
    pub fn remove_task(&self, id: &str) -> Result<(), ServiceError> {
        let mut tasks = self.tasks.lock().unwrap();
        let entry = tasks
            .get(id)
            .ok_or_else(|| ServiceError::UnknownTask(id.to_string()))?;
        if matches!(Self::state_of(entry), TaskState::Running) {
            return Err(ServiceError::TaskStillRunning(id.to_string()));
        }
        let entry = tasks.remove(id).unwrap();
        let lane_ptr = Arc::as_ptr(&entry.lane);
        self.lanes
            .lock()
            .unwrap()
            .retain(|l| !std::ptr::eq(Arc::as_ptr(l), lane_ptr));
        Ok(())
    }

    /// Stop every task; used on daemon shutdown.
    pub fn stop_all(&self) {
        let ids: Vec<String> = self.tasks.lock().unwrap().keys().cloned().collect();
        for id in ids {
            let _ = self.stop_task(&id);
        }
    }
}

// ---------------------------------------------------------------------------
// Control protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct Request {
    pub id: serde_json::Value,
    #[serde(flatten)]
    pub cmd: Command,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", tag = "cmd", content = "params")]
pub enum Command {
    StartFeatures {
        window_s: f64,
        sink: PathBuf,
        #[serde(default)]
        filter: Option<String>,
        #[serde(default)]
        features: Option<Vec<String>>,
        #[serde(default)]
        capacity: Option<usize>,
        #[serde(default)]
        policy: Option<String>,
    },
    StartPcap {
        path: PathBuf,
        #[serde(default)]
        filter: Option<String>,
        #[serde(default = "default_true")]
        with_fcs: bool,
        #[serde(default)]
        capacity: Option<usize>,
        #[serde(default)]
        policy: Option<String>,
    },
    Stop {
        task: String,
    },
    Status {
        #[serde(default)]
        task: Option<String>,
    },
    Remove {
        task: String,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize)]
pub struct Response {
    pub id: serde_json::Value,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

fn queue_config(
    capacity: Option<usize>,
    policy: Option<&str>,
) -> Result<QueueConfig, ServiceError> {
    let mut cfg = QueueConfig::default();
    if let Some(c) = capacity {
        cfg.capacity = c;
    }
    match policy {
        None | Some("drop_newest") => {}
        Some("stop_task") => cfg.policy = OverflowPolicy::StopTask,
        Some(other) => {
            return Err(ServiceError::BadWindowConfig(format!(
                "unknown overflow policy `{other}`"
            )))
        }
    }
    Ok(cfg)
}

/// Execute one control command against the registry.
pub fn handle_command(
    registry: &TaskRegistry,
    cmd: Command,
) -> Result<serde_json::Value, ServiceError> {
    match cmd {
        Command::StartFeatures {
            window_s,
            sink,
            filter,
            features,
            capacity,
            policy,
        } => {
            let mut cfg = WindowConfig::new(window_s)
                .map_err(|e| ServiceError::BadWindowConfig(e.to_string()))?;
            if let Some(names) = features {
                let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                cfg = cfg
                    .select(&refs)
                    .map_err(|e| ServiceError::BadWindowConfig(e.to_string()))?;
            }
            let q = queue_config(capacity, policy.as_deref())?;
            let id = registry.start_feature_task(cfg, filter.as_deref(), sink, q)?;
            Ok(serde_json::json!({ "task": id }))
        }
        Command::StartPcap {
            path,
            filter,
            with_fcs,
            capacity,
            policy,
        } => {
            let q = queue_config(capacity, policy.as_deref())?;
            let id = registry.start_pcap_task(path, with_fcs, filter.as_deref(), q)?;
            Ok(serde_json::json!({ "task": id }))
        }
        Command::Stop { task } => {
            let status = registry.stop_task(&task)?;
            Ok(serde_json::to_value(status).unwrap())
        }
        Command::Status { task } => match task {
            Some(id) => Ok(serde_json::to_value(registry.task_status(&id)?).unwrap()),
            None => Ok(serde_json::to_value(registry.all_status()).unwrap()),
        },
        Command::Remove { task } => {
            registry.remove_task(&task)?;
            Ok(serde_json::json!({ "removed": task }))
        }
    }
}

/// Parse one request line and produce exactly one response line.
pub fn handle_request_line(registry: &TaskRegistry, line: &str) -> String {
    let (id, outcome) = match serde_json::from_str::<Request>(line) {
        Ok(req) => {
            let id = req.id.clone();
            (
                id,
                handle_command(registry, req.cmd)
                    .map_err(|e| (e.kind().to_string(), e.to_string())),
            )
        }
        Err(e) => (
            serde_json::Value::Null,
            Err(("bad_request".to_string(), e.to_string())),
        ),
    };
    let response = match outcome {
        Ok(result) => Response {
            id,
            ok: true,
            result: Some(result),
            error: None,
        },
        Err((kind, message)) => Response {
            id,
            ok: false,
            result: None,
            error: Some(ErrorBody { kind, message }),
        },
    };
    serde_json::to_string(&response).unwrap()
}

/// Serve the control protocol on a unix socket until `shutdown` is set.
pub fn serve_control_socket(
    socket_path: &Path,
    registry: Arc<TaskRegistry>,
    shutdown: Arc<AtomicBool>,
) -> std::io::Result<()> {
    let _ = std::fs::remove_file(socket_path);
    let listener = UnixListener::bind(socket_path)?;
    listener.set_nonblocking(true)?;
    while !shutdown.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                let registry = Arc::clone(&registry);
                std::thread::spawn(move || {
                    let _ = serve_connection(stream, &registry);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => break,
        }
    }
    let _ = std::fs::remove_file(socket_path);
    Ok(())
}

fn serve_connection(stream: UnixStream, registry: &TaskRegistry) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_request_line(registry, &line);
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// One-shot client call over the control socket.
pub fn control_call(
    socket_path: &Path,
    request: &serde_json::Value,
) -> std::io::Result<serde_json::Value> {
    let stream = UnixStream::connect(socket_path)?;
    let mut writer = stream.try_clone()?;
    writer.write_all(serde_json::to_string(request)?.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    serde_json::from_str(&line).map_err(Into::into)
}
