//! Live sessions: one worker thread owns each simulation; clients observe it
//! through a broadcast hub and steer it only through the command queue.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use gridsync_core::dynsim::{
    EventSchedule, RelayConfig, SimError, SimEvent, SimOptions, SimOutcome, Simulator, Trace,
    FLAT_START_SECONDS,
};
use gridsync_core::featureset::{sample_features, FeatureError, PmuPlacement};
use gridsync_core::netcase::NetworkCase;
use gridsync_core::scenario::InitialCondition;
use gridsync_core::svm::SvmModel;
use tokio::sync::{mpsc as tmpsc, oneshot};

use crate::protocol::*;

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("model expects {model} features but the placement gives {placement}")]
    PlacementMismatch { model: usize, placement: usize },
    #[error("session limit of {0} reached")]
    SessionLimit(usize),
    #[error("`{command}` is not allowed in phase {phase:?}")]
    WrongPhase { command: String, phase: Phase },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session has terminated")]
    Terminated,
    #[error("invalid live configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

impl LiveError {
    pub fn code(&self) -> ErrorCode {
        match self {
            LiveError::PlacementMismatch { .. } => ErrorCode::PlacementMismatch,
            LiveError::SessionLimit(_) => ErrorCode::SessionLimit,
            LiveError::WrongPhase { .. } => ErrorCode::WrongPhase,
            LiveError::UnknownSession(_) => ErrorCode::UnknownSession,
            LiveError::Terminated => ErrorCode::Terminated,
            LiveError::Config(_) | LiveError::Sim(_) | LiveError::Feature(_) => ErrorCode::Internal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiveConfig {
    /// Simulated seconds per wall-clock second; `f64::INFINITY` runs unpaced.
    pub pacing: f64,
    pub island_time: f64,
    /// Simulated time kept after reconnection before labeling.
    pub post_reconnect: f64,
    /// The session aborts if left islanded longer than this, seconds.
    pub max_islanded: f64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig::from_schedule(&EventSchedule::standard(), 1.0)
    }
}

impl LiveConfig {
    /// Islands when `schedule` does and keeps the same post-reconnection span.
    pub fn from_schedule(schedule: &EventSchedule, pacing: f64) -> Self {
        let island_time = schedule.island_time.unwrap_or(0.0);
        let reconnect = schedule.reconnect_time.unwrap_or(schedule.end_time);
        LiveConfig {
            pacing,
            island_time,
            post_reconnect: schedule.end_time - reconnect,
            max_islanded: 600.0,
        }
    }

    pub fn validate(&self) -> Result<(), LiveError> {
        let bad = |m: &str| Err(LiveError::Config(m.into()));
        if !(self.pacing > 0.0) {
            return bad("pacing must be positive");
        }
        if !(self.island_time >= 0.0 && self.island_time.is_finite()) {
            return bad("island time must be finite and nonnegative");
        }
        if !(self.post_reconnect > 0.0 && self.post_reconnect.is_finite()) {
            return bad("post-reconnection span must be positive");
        }
        if !(self.max_islanded > 0.0) {
            return bad("islanded time limit must be positive");
        }
        Ok(())
    }
}

/// What a session simulates and how it classifies.
#[derive(Clone, Debug)]
pub struct SessionSpec {
    pub case: NetworkCase,
    pub ic: InitialCondition,
    pub relays: RelayConfig,
    pub opts: SimOptions,
    pub placement: PmuPlacement,
    pub model: Option<Arc<SvmModel>>,
}

/// Snapshot of a session for status queries.
#[derive(Clone, Debug, PartialEq)]
pub struct LiveState {
    pub session: String,
    pub time: f64,
    pub phase: Phase,
    pub latest_sample: Option<SamplePayload>,
    pub verdict: Option<VerdictPayload>,
    pub events: Vec<SimEvent>,
}

struct HubState {
    seq: u64,
    log: Vec<WireMessage>,
    subs: Vec<tmpsc::UnboundedSender<WireMessage>>,
    state: LiveState,
    outcome: Option<SimOutcome>,
}

/// Ordered message log with fan-out. Publishing and subscribing share one
/// lock, so a subscriber's history and live feed never overlap or gap.
struct Hub {
    id: String,
    inner: Mutex<HubState>,
}

impl Hub {
    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, t: f64, body: Body) {
        let mut h = self.lock();
        h.seq += 1;
        let msg = WireMessage {
            v: PROTOCOL_VERSION,
            seq: h.seq,
            t,
            session: Some(self.id.clone()),
            body,
        };
        let st = &mut h.state;
        st.time = st.time.max(t);
        match &msg.body {
            Body::Sample(s) => st.latest_sample = Some(s.clone()),
            Body::Verdict(v) => st.verdict = Some(v.clone()),
            Body::Event(e) => st.events.push(*e),
            Body::Phase(p) => st.phase = p.phase,
            _ => {}
        }
        h.subs.retain(|s| s.send(msg.clone()).is_ok());
        h.log.push(msg);
    }

    fn subscribe(&self) -> tmpsc::UnboundedReceiver<WireMessage> {
        let (tx, rx) = tmpsc::unbounded_channel();
        let mut h = self.lock();
        for m in &h.log {
            let _ = tx.send(m.clone());
        }
        if h.state.phase != Phase::Terminated {
            h.subs.push(tx);
        }
        rx
    }

    /// Ends every subscription after its last message.
    fn close(&self, outcome: SimOutcome) {
        let mut h = self.lock();
        h.outcome = Some(outcome);
        h.subs.clear();
    }
}

enum SessionCommand {
    Reconnect,
    Stop,
}

struct Envelope {
    command: SessionCommand,
    re: u64,
    reply: oneshot::Sender<Result<AckPayload, LiveError>>,
}

pub struct SessionHandle {
    hub: Arc<Hub>,
    commands: Mutex<mpsc::Sender<Envelope>>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl SessionHandle {
    pub fn id(&self) -> &str {
        &self.hub.id
    }

    pub fn phase(&self) -> Phase {
        self.hub.lock().state.phase
    }

    pub fn state(&self) -> LiveState {
        self.hub.lock().state.clone()
    }

    /// Every message published so far.
    pub fn history(&self) -> Vec<WireMessage> {
        self.hub.lock().log.clone()
    }

    /// The stream from its first message; it ends after the outcome.
    pub fn subscribe(&self) -> tmpsc::UnboundedReceiver<WireMessage> {
        self.hub.subscribe()
    }

    fn send(&self, command: SessionCommand, re: u64) -> oneshot::Receiver<Result<AckPayload, LiveError>> {
        let (reply, rx) = oneshot::channel();
        let env = Envelope { command, re, reply };
        if let Err(mpsc::SendError(env)) = self.commands.lock().unwrap_or_else(|p| p.into_inner()).send(env) {
            let _ = env.reply.send(Err(LiveError::Terminated));
        }
        rx
    }

    /// Queues a reconnect; the reply arrives once the worker has applied it.
    pub fn request_reconnect(&self, re: u64) -> oneshot::Receiver<Result<AckPayload, LiveError>> {
        self.send(SessionCommand::Reconnect, re)
    }

    pub fn request_stop(&self, re: u64) -> oneshot::Receiver<Result<AckPayload, LiveError>> {
        self.send(SessionCommand::Stop, re)
    }

    /// Blocking reconnect. Do not call from inside an async runtime.
    pub fn reconnect(&self) -> Result<AckPayload, LiveError> {
        self.request_reconnect(0).blocking_recv().unwrap_or(Err(LiveError::Terminated))
    }

    /// Blocking stop. Do not call from inside an async runtime.
    pub fn stop(&self) -> Result<AckPayload, LiveError> {
        self.request_stop(0).blocking_recv().unwrap_or(Err(LiveError::Terminated))
    }

    /// Waits for the worker and returns the run's outcome.
    pub fn wait(&self) -> Option<SimOutcome> {
        let t = self.thread.lock().unwrap_or_else(|p| p.into_inner()).take();
        if let Some(t) = t {
            let _ = t.join();
        }
        self.hub.lock().outcome.clone()
    }

    pub fn is_terminated(&self) -> bool {
        self.phase() == Phase::Terminated
    }
}

struct Worker {
    sim: Simulator,
    spec: SessionSpec,
    cfg: LiveConfig,
    hub: Arc<Hub>,
    rx: mpsc::Receiver<Envelope>,
    phase: Phase,
    samples_sent: usize,
    events_sent: usize,
    reconnect_time: Option<f64>,
    end_step: Option<u64>,
    stop: bool,
}

impl Worker {
    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.hub.publish(self.sim.time(), Body::Phase(PhasePayload { phase }));
    }

    /// Publishes events and samples the simulator has produced since the last
    /// call.
    fn flush(&mut self) {
        let events = self.sim.events();
        for e in &events[self.events_sent..] {
            self.hub.publish(e.time, Body::Event(*e));
        }
        self.events_sent = events.len();
        self.samples_sent = publish_samples(&self.hub, &self.spec, self.sim.trace(), self.samples_sent);
    }

    fn handle(&mut self, env: Envelope) {
        let name = match env.command {
            SessionCommand::Reconnect => "reconnect",
            SessionCommand::Stop => "stop",
        };
        let t = self.sim.time();
        let result = match env.command {
            SessionCommand::Reconnect if self.phase == Phase::Islanded => {
                self.sim.close_ties();
                self.reconnect_time = Some(t);
                self.end_step = Some(self.sim.options().step_of(t + self.cfg.post_reconnect));
                Ok(true)
            }
            SessionCommand::Reconnect => Err(LiveError::WrongPhase {
                command: name.into(),
                phase: self.phase,
            }),
            SessionCommand::Stop => {
                self.stop = true;
                Ok(false)
            }
        };
        let reply = match result {
            Ok(reconnected) => {
                let ack = AckPayload {
                    command: name.into(),
                    re: env.re,
                    session: Some(self.hub.id.clone()),
                    effective_t: Some(t),
                };
                self.hub.publish(t, Body::Ack(ack.clone()));
                if reconnected {
                    self.flush();
                    self.set_phase(Phase::Reconnected);
                }
                Ok(ack)
            }
            Err(e) => {
                self.hub.publish(
                    t,
                    Body::Error(ErrorPayload {
                        code: e.code(),
                        message: e.to_string(),
                        re: Some(env.re),
                    }),
                );
                Err(e)
            }
        };
        let _ = env.reply.send(reply);
    }

    fn run(mut self) {
        let started = Instant::now();
        let opts = self.sim.options().clone();
        let island_step = opts.step_of(self.cfg.island_time);
        let mut aborted = None;
        self.set_phase(Phase::PreIsland);
        loop {
            while let Ok(env) = self.rx.try_recv() {
                self.handle(env);
            }
            if self.stop {
                break;
            }
            let k = self.sim.step_index();
            if self.end_step.is_some_and(|e| k >= e) {
                break;
            }
            if self.phase == Phase::PreIsland && k == island_step {
                self.sim.open_ties();
                self.flush();
                self.set_phase(Phase::Islanded);
            }
            if self.phase == Phase::Islanded && self.sim.time() - self.cfg.island_time > self.cfg.max_islanded {
                aborted = Some(format!("left islanded for more than {} s", self.cfg.max_islanded));
                break;
            }
            if self.sim.diverged() {
                break;
            }
            if self.cfg.pacing.is_finite() {
                let due = started + Duration::from_secs_f64(self.sim.time() / self.cfg.pacing);
                let now = Instant::now();
                if now < due {
                    match self.rx.recv_timeout(due - now) {
                        Ok(env) => {
                            self.handle(env);
                            continue;
                        }
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => std::thread::sleep(due - now),
                    }
                }
            }
            self.sim.advance();
            self.flush();
        }
        self.finish(aborted);
    }

    fn finish(mut self, aborted: Option<String>) {
        self.flush();
        let Worker {
            sim,
            spec,
            cfg,
            hub,
            rx,
            phase,
            samples_sent,
            reconnect_time,
            ..
        } = self;
        let t = sim.time();
        let schedule = EventSchedule {
            island_time: (phase != Phase::PreIsland).then_some(cfg.island_time),
            reconnect_time,
            end_time: t,
        };
        let outcome = sim.finish(schedule);
        // The closing sample, if any, goes out before the outcome.
        publish_samples(&hub, &spec, &outcome.trace, samples_sent);
        hub.publish(
            t,
            Body::Outcome(OutcomePayload {
                label: outcome.label.label,
                reason: outcome.label.reason,
                time: outcome.label.time,
                in_service_fraction: outcome.label.in_service_fraction,
                reconnect_time,
                end_time: t,
                trace_digest: outcome.trace.digest(),
                aborted,
            }),
        );
        hub.publish(t, Body::Phase(PhasePayload { phase: Phase::Terminated }));
        // Commands that raced with termination get a definite answer.
        while let Ok(env) = rx.try_recv() {
            let _ = env.reply.send(Err(LiveError::Terminated));
        }
        hub.close(outcome);
    }
}

/// Publishes `trace.samples[from..]`, each followed by its verdict when a
/// model is loaded. Returns the new number of published samples.
fn publish_samples(hub: &Hub, spec: &SessionSpec, trace: &Trace, from: usize) -> usize {
    for s in &trace.samples[from..] {
        let features = sample_features(trace, s, &spec.placement).expect("placement checked at start");
        let freq_hz = spec
            .placement
            .buses()
            .iter()
            .map(|b| s.freq_hz[trace.bus_position(*b).expect("placement checked at start")])
            .collect();
        let verdict = spec.model.as_ref().map(|m| VerdictPayload {
            label: m.predict(&features).expect("dimension checked at start"),
            decision: m.decision_value(&features).expect("dimension checked at start"),
        });
        hub.publish(
            s.time,
            Body::Sample(SamplePayload {
                buses: spec.placement.buses().to_vec(),
                features,
                freq_hz,
            }),
        );
        if let Some(v) = verdict {
            hub.publish(s.time, Body::Verdict(v));
        }
    }
    trace.samples.len()
}

/// Owns the running sessions and enforces the concurrent-session limit.
pub struct SessionManager {
    limit: usize,
    next: AtomicU64,
    sessions: Mutex<BTreeMap<u64, Arc<SessionHandle>>>,
}

impl SessionManager {
    pub fn new(limit: usize) -> Self {
        SessionManager {
            limit,
            next: AtomicU64::new(1),
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn start_session(&self, spec: SessionSpec, cfg: LiveConfig) -> Result<Arc<SessionHandle>, LiveError> {
        cfg.validate()?;
        if let Some(m) = &spec.model {
            if m.feature_dim != spec.placement.dimension() {
                return Err(LiveError::PlacementMismatch {
                    model: m.feature_dim,
                    placement: spec.placement.dimension(),
                });
            }
        }
        if let Some(b) = spec.placement.buses().iter().find(|b| spec.case.bus(**b).is_none()) {
            return Err(FeatureError::UnknownBus(*b).into());
        }
        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        if sessions.values().filter(|s| !s.is_terminated()).count() >= self.limit {
            return Err(LiveError::SessionLimit(self.limit));
        }
        let sim = Simulator::for_condition(&spec.case, &spec.ic, &spec.relays, &spec.opts)?;
        if spec.opts.flat_start_check {
            sim.check_flat_start(cfg.island_time.min(FLAT_START_SECONDS))?;
        }
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        let hub = Arc::new(Hub {
            id: format!("s{n}"),
            inner: Mutex::new(HubState {
                seq: 0,
                log: Vec::new(),
                subs: Vec::new(),
                state: LiveState {
                    session: format!("s{n}"),
                    time: 0.0,
                    phase: Phase::PreIsland,
                    latest_sample: None,
                    verdict: None,
                    events: Vec::new(),
                },
                outcome: None,
            }),
        });
        let (tx, rx) = mpsc::channel();
        let worker = Worker {
            sim,
            spec,
            cfg,
            hub: hub.clone(),
            rx,
            phase: Phase::PreIsland,
            samples_sent: 0,
            events_sent: 0,
            reconnect_time: None,
            end_step: None,
            stop: false,
        };
        let thread = std::thread::Builder::new()
            .name(format!("live-s{n}"))
            .spawn(move || worker.run())
            .map_err(|e| LiveError::Config(format!("cannot spawn session worker: {e}")))?;
        let handle = Arc::new(SessionHandle {
            hub,
            commands: Mutex::new(tx),
            thread: Mutex::new(Some(thread)),
        });
        sessions.insert(n, handle.clone());
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionHandle>> {
        let n: u64 = id.strip_prefix('s')?.parse().ok()?;
        self.sessions.lock().unwrap_or_else(|p| p.into_inner()).get(&n).cloned()
    }

    pub fn latest(&self) -> Option<Arc<SessionHandle>> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .next_back()
            .cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .map(|s| s.id().to_string())
            .collect()
    }
}
