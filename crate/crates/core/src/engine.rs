//! Discrete-event execution of scheduling decisions.
//!
//! Events are ordered by `(time, seq)`; `seq` is a global insertion counter,
//! so a run is a pure function of its inputs. Each replica executes one
//! activity at a time (a short prefill, a decode iteration, or its share of
//! a long request's gang activity); colocated short prefills run beside a
//! long decode.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::{build_cluster, BusyState, ClusterSpec, GpuAccounting, ModelSpec, Replica, ReplicaRole};
use crate::costmodel::{CostModel, SpPlan, COLOC_MAX_SLOWDOWN};
use crate::error::{Result, SimError};
use crate::metrics::{MetricsReport, RequestRecord};
use crate::sched::{role_for, Action, LongState, LongView, PolicyConfig, ScheduleDecision, Scheduler};
use crate::workload::Request;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Dispatching stops this long after the last arrival.
    pub horizon_grace: f64,
    pub max_decode_batch: usize,
    /// Simulated cost of one scheduler operation (one replica inspected).
    pub sched_op_cost_s: f64,
    /// Keep a per-event log in the output.
    pub trace_events: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            horizon_grace: 0.0,
            max_decode_batch: 256,
            sched_op_cost_s: 1e-7,
            trace_events: false,
        }
    }
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct SimInput {
    pub requests: Vec<Request>,
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub policy: PolicyConfig,
    pub long_min: u64,
    pub long_max: u64,
    pub engine: EngineConfig,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub records: Vec<RequestRecord>,
    /// GPU occupied/idle time over the arrival window.
    pub accounting: Vec<GpuAccounting>,
    /// GPU occupied/idle time until the last request finished.
    pub accounting_full: Vec<GpuAccounting>,
    pub horizon: f64,
    pub event_log: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival,
    PrefillDone,
    DecodeIterDone,
    KvMigrationDone,
    PreemptApplied,
    ResumeApplied,
    Horizon,
}

impl EventKind {
    fn name(self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::PrefillDone => "prefill_done",
            EventKind::DecodeIterDone => "decode_iter_done",
            EventKind::KvMigrationDone => "kv_migration_done",
            EventKind::PreemptApplied => "preempt_applied",
            EventKind::ResumeApplied => "resume_applied",
            EventKind::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
    req: Option<usize>,
    replica: Option<usize>,
    /// Long prefill segment generation; stale completions are dropped.
    gen: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Queued,
    Prefilling,
    PrefillPaused,
    MigratingKv,
    Decoding,
    Done,
    Starved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LongRun {
    Pending,
    Running,
    Saving,
    Paused,
    Restoring,
    Decoding,
}

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    phase: Phase,
    dispatched: bool,
    replicas: Vec<usize>,
    plan: Option<SpPlan>,
    expected: f64,
    remaining: f64,
    charged: f64,
    seg_start: f64,
    gen: u64,
    urgent: bool,
    coloc: bool,
    prefill_start: Option<f64>,
    first_token: Option<f64>,
    finish: Option<f64>,
    preemptions: u32,
    susp_start: Option<f64>,
    susp_total: f64,
    overhead: f64,
    generated: u64,
    long: LongRun,
    /// A pause of the long decode is already counted.
    decode_episode: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Running {
    None,
    ShortPrefill(usize),
    DecodeIter,
    Gang(usize),
}

#[derive(Debug, Clone)]
struct Rep {
    view: Replica,
    local: VecDeque<usize>,
    urgent: VecDeque<usize>,
    running: Running,
    coloc: Vec<usize>,
    batch: Vec<usize>,
    wait: VecDeque<usize>,
    active_long: Option<usize>,
    last_was_prefill: bool,
    busy: bool,
    last_change: f64,
    exec: f64,
    idle: f64,
}

impl Rep {
    /// Work is assigned: something runs, waits in a queue, or holds the
    /// replica (a long waiting for its gang or suspended on it).
    fn occupied(&self) -> bool {
        !(self.quiet() && self.local.is_empty() && self.coloc.is_empty() && self.active_long.is_none())
    }

    fn quiet(&self) -> bool {
        self.running == Running::None && self.urgent.is_empty() && self.batch.is_empty() && self.wait.is_empty()
    }
}

/// Runs one simulation to completion.
pub fn run(input: SimInput) -> Result<SimOutput> {
    let mut sim = Sim::new(input)?;
    sim.run()?;
    sim.finish()
}

struct Sim {
    cost: CostModel,
    sched: Scheduler,
    cfg: EngineConfig,
    policy_label: String,
    disagg: bool,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    reqs: Vec<ReqState>,
    reps: Vec<Rep>,
    queue: Vec<usize>,
    active_longs: BTreeSet<usize>,
    decode_reps: Vec<usize>,
    horizon: f64,
    closed: bool,
    touched: Vec<bool>,
    touched_list: Vec<usize>,
    dirty: VecDeque<usize>,
    window_acct: Option<Vec<(f64, f64)>>,
    log: Option<Vec<String>>,
}

impl Sim {
    fn new(input: SimInput) -> Result<Self> {
        let SimInput { mut requests, cluster, model, policy, long_min, long_max, engine } = input;
        let cost = CostModel::new(model, cluster.clone())?;
        if cost.checkpoint_kv_ratio() > 0.05 {
            log::warn!(
                "checkpoint/KV ratio {:.4} for {} exceeds 0.05",
                cost.checkpoint_kv_ratio(),
                cost.model.name
            );
        }
        if engine.max_decode_batch == 0 || !(engine.sched_op_cost_s >= 0.0) || !(engine.horizon_grace >= 0.0) {
            return Err(SimError::Config(format!("invalid engine settings: {engine:?}")));
        }
        let mut built = build_cluster(&cluster)?;
        for r in &mut built.replicas {
            r.role = role_for(&policy, r.id.0, cluster.decode_replicas);
        }
        for r in &requests {
            if r.input_len == 0 || r.output_len == 0 || !(r.arrival_time >= 0.0) {
                return Err(SimError::Validation(format!("invalid request {}", r.id)));
            }
            if !r.is_long() && cluster.replicas_needed(r.input_len) > 1 {
                return Err(SimError::Config(format!(
                    "short request {} ({} tokens) exceeds one replica's capacity",
                    r.id, r.input_len
                )));
            }
        }
        let sched = Scheduler::new(policy.clone(), cost.clone(), &built.replicas, long_min, long_max)?;
        requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
        let horizon = requests.last().map_or(0.0, |r| r.arrival_time) + engine.horizon_grace;
        let reps: Vec<Rep> = built
            .replicas
            .into_iter()
            .map(|view| Rep {
                view,
                local: VecDeque::new(),
                urgent: VecDeque::new(),
                running: Running::None,
                coloc: Vec::new(),
                batch: Vec::new(),
                wait: VecDeque::new(),
                active_long: None,
                last_was_prefill: false,
                busy: false,
                last_change: 0.0,
                exec: 0.0,
                idle: 0.0,
            })
            .collect();
        let decode_reps = reps
            .iter()
            .enumerate()
            .filter(|(_, r)| r.view.role == ReplicaRole::DecodeOnly)
            .map(|(i, _)| i)
            .collect();
        let n = reps.len();
        let reqs = requests
            .into_iter()
            .map(|req| ReqState {
                req,
                phase: Phase::Queued,
                dispatched: false,
                replicas: Vec::new(),
                plan: None,
                expected: 0.0,
                remaining: 0.0,
                charged: 0.0,
                seg_start: 0.0,
                gen: 0,
                urgent: false,
                coloc: false,
                prefill_start: None,
                first_token: None,
                finish: None,
                preemptions: 0,
                susp_start: None,
                susp_total: 0.0,
                overhead: 0.0,
                generated: 0,
                long: LongRun::Pending,
                decode_episode: false,
            })
            .collect();
        Ok(Self {
            policy_label: policy.label(),
            disagg: policy.uses_decode_replicas(),
            cost,
            sched,
            cfg: engine.clone(),
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            reqs,
            reps,
            queue: Vec::new(),
            active_longs: BTreeSet::new(),
            decode_reps,
            horizon,
            closed: false,
            touched: vec![false; n],
            touched_list: Vec::new(),
            dirty: VecDeque::new(),
            window_acct: None,
            log: engine.trace_events.then(Vec::new),
        })
    }

    fn push(&mut self, time: f64, kind: EventKind, req: Option<usize>, replica: Option<usize>, gen: u64) -> Result<()> {
        if time < self.now || !time.is_finite() {
            return Err(SimError::Internal(format!(
                "{} scheduled at {time} before clock {}",
                kind.name(),
                self.now
            )));
        }
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind, req, replica, gen });
        Ok(())
    }

    fn note(&mut self, kind: &str, req: Option<usize>, replica: Option<usize>) {
        if let Some(log) = &mut self.log {
            let mut line = format!("{:.9} {kind}", self.now);
            match req {
                Some(q) => write!(line, " {}", self.reqs[q].req.id).unwrap(),
                None => line.push_str(" -"),
            }
            match replica {
                Some(r) => write!(line, " {}", r).unwrap(),
                None => line.push_str(" -"),
            }
            log.push(line);
        }
    }

    fn touch(&mut self, r: usize) {
        if !self.touched[r] {
            self.touched[r] = true;
            self.touched_list.push(r);
        }
    }

    fn mark(&mut self, r: usize) {
        self.touch(r);
        self.dirty.push_back(r);
    }

    fn run(&mut self) -> Result<()> {
        for i in 0..self.reqs.len() {
            let t = self.reqs[i].req.arrival_time;
            self.push(t, EventKind::Arrival, Some(i), None, 0)?;
        }
        let h = self.horizon;
        self.push(h, EventKind::Horizon, None, None, 0)?;

        while let Some(ev) = self.heap.pop() {
            if ev.time < self.now {
                return Err(SimError::Internal(format!("clock moved backwards to {}", ev.time)));
            }
            self.now = ev.time;
            let trigger = self.handle(ev)?;
            if trigger && !self.closed && !self.queue.is_empty() {
                self.invoke_policy()?;
            }
            while let Some(r) = self.dirty.pop_front() {
                self.kick(r)?;
            }
            self.settle_accounting();
        }
        for r in 0..self.reps.len() {
            self.close_interval(r, self.now);
        }
        Ok(())
    }

    fn settle_accounting(&mut self) {
        let list = std::mem::take(&mut self.touched_list);
        for &r in &list {
            self.touched[r] = false;
            self.refresh_view(r);
            let busy = self.reps[r].occupied();
            if busy != self.reps[r].busy {
                self.close_interval(r, self.now);
                self.reps[r].busy = busy;
            }
        }
        self.touched_list = list;
        self.touched_list.clear();
    }

    fn close_interval(&mut self, r: usize, t: f64) {
        let rep = &mut self.reps[r];
        let span = t - rep.last_change;
        if rep.busy {
            rep.exec += span;
        } else {
            rep.idle += span;
        }
        rep.last_change = t;
    }

    fn refresh_view(&mut self, r: usize) {
        let tp = self.cost.cluster.tp_size as u64;
        let (busy, long_holder, coloc_tokens, idle) = {
            let rep = &self.reps[r];
            let busy = match rep.running {
                Running::None if !rep.coloc.is_empty() => BusyState::Colocated,
                Running::None => BusyState::Idle,
                Running::ShortPrefill(_) => BusyState::ShortPrefill,
                Running::DecodeIter => BusyState::ShortDecode,
                Running::Gang(l) if self.reqs[l].long == LongRun::Decoding && !rep.coloc.is_empty() => {
                    BusyState::Colocated
                }
                Running::Gang(l) if self.reqs[l].long == LongRun::Decoding => BusyState::LongDecode,
                Running::Gang(_) => BusyState::LongPrefill,
            };
            let coloc_tokens: u64 = rep.coloc.iter().map(|&q| self.reqs[q].req.input_len.div_ceil(tp)).sum();
            let idle = !rep.occupied();
            (busy, rep.active_long.map(|l| self.reqs[l].req.id), coloc_tokens, idle)
        };
        let rep = &mut self.reps[r];
        rep.view.busy = busy;
        rep.view.long_holder = long_holder;
        rep.view.coloc_tokens_per_gpu = coloc_tokens;
        rep.view.decode_batch = rep.batch.len() + rep.wait.len();
        rep.view.idle = idle;
    }

    fn long_views(&self) -> Vec<LongView> {
        self.active_longs
            .iter()
            .map(|&l| {
                let s = &self.reqs[l];
                let (state, remaining) = match s.long {
                    LongRun::Pending => (LongState::Pending, s.remaining),
                    LongRun::Running => (LongState::Prefilling, s.remaining - (self.now - s.seg_start)),
                    LongRun::Saving | LongRun::Paused | LongRun::Restoring => (LongState::Paused, s.remaining),
                    LongRun::Decoding if s.decode_episode => (LongState::Paused, 0.0),
                    LongRun::Decoding => (LongState::Decoding, 0.0),
                };
                LongView {
                    id: s.req.id,
                    replicas: s.replicas.iter().map(|&r| self.reps[r].view.id).collect(),
                    state,
                    remaining_work: remaining,
                    input_len: s.req.input_len,
                }
            })
            .collect()
    }

    fn invoke_policy(&mut self) -> Result<()> {
        let queue: Vec<Request> = self.queue.iter().map(|&q| self.reqs[q].req.clone()).collect();
        let views: Vec<Replica> = self.reps.iter().map(|r| r.view.clone()).collect();
        let decisions = self.sched.decide(&queue, &views, &self.long_views());
        if decisions.is_empty() {
            return Ok(());
        }
        let mut done = BTreeSet::new();
        for d in decisions {
            let q = self.index_of(&d)?;
            self.reqs[q].overhead += d.ops as f64 * self.cfg.sched_op_cost_s;
            if self.apply(q, &d)? {
                done.insert(q);
            }
        }
        self.queue.retain(|q| !done.contains(q));
        Ok(())
    }

    fn index_of(&self, d: &ScheduleDecision) -> Result<usize> {
        self.queue
            .iter()
            .copied()
            .find(|&q| self.reqs[q].req.id == d.request_id)
            .ok_or_else(|| SimError::Internal(format!("decision for unqueued request {}", d.request_id)))
    }

    fn rep_index(&self, id: crate::cluster::ReplicaId) -> Result<usize> {
        let i = id.0 as usize;
        if i < self.reps.len() && self.reps[i].view.id == id {
            Ok(i)
        } else {
            Err(SimError::Internal(format!("unknown replica {}", id.0)))
        }
    }

    /// Applies one decision; returns whether the request left the queue.
    fn apply(&mut self, q: usize, d: &ScheduleDecision) -> Result<bool> {
        match d.action {
            Action::Enqueue => Ok(false),
            Action::Starve => {
                self.reqs[q].phase = Phase::Starved;
                Ok(true)
            }
            Action::DispatchPrefill if self.reqs[q].req.is_long() => {
                let targets: Vec<usize> = d.target_replicas.iter().map(|&id| self.rep_index(id)).collect::<Result<_>>()?;
                if targets.is_empty() {
                    return Err(SimError::Internal("long dispatched to no replicas".into()));
                }
                let share = self.reqs[q].req.input_len.div_ceil(targets.len() as u64);
                let expected = match &d.sp_plan {
                    Some(p) => p.est_total_time,
                    None => self.cost.prefill_time(self.reqs[q].req.input_len),
                };
                let s = &mut self.reqs[q];
                s.dispatched = true;
                s.plan = d.sp_plan;
                s.expected = expected;
                s.remaining = expected;
                s.replicas = targets.clone();
                s.long = LongRun::Pending;
                for &r in &targets {
                    let rep = &mut self.reps[r];
                    rep.local.push_back(q);
                    rep.view.queue_tokens += share;
                    rep.view.pending_longs += 1;
                    self.mark(r);
                }
                self.active_longs.insert(q);
                self.note("dispatch_long", Some(q), targets.first().copied());
                Ok(true)
            }
            Action::DispatchPrefill | Action::PreemptAndDispatch => {
                let r = self.rep_index(single(d)?)?;
                if self.reps[r].view.role != ReplicaRole::General {
                    return Err(SimError::Internal(format!("prefill sent to decode-only replica {r}")));
                }
                let input = self.reqs[q].req.input_len;
                self.reqs[q].dispatched = true;
                self.reqs[q].urgent = d.urgent;
                self.reqs[q].replicas = vec![r];
                self.reqs[q].expected = self.cost.prefill_time(input);
                let rep = &mut self.reps[r];
                rep.view.queue_tokens += input;
                if d.urgent {
                    rep.urgent.push_back(q);
                    rep.view.urgent_tokens += input;
                    rep.view.ahead_tokens += input;
                } else {
                    if rep.view.pending_longs == 0 {
                        rep.view.ahead_tokens += input;
                    }
                    rep.local.push_back(q);
                }
                self.mark(r);
                if d.action == Action::PreemptAndDispatch {
                    let victim = d
                        .victim
                        .and_then(|v| self.active_longs.iter().copied().find(|&l| self.reqs[l].req.id == v))
                        .ok_or_else(|| SimError::Internal("preemption without a live victim".into()))?;
                    self.preempt(victim)?;
                    // the short waits out the context switch it joined
                    if self.reqs[victim].long == LongRun::Saving {
                        self.reqs[q].overhead += self.ckpt_time(victim);
                    }
                }
                self.note(if d.urgent { "dispatch_urgent" } else { "dispatch" }, Some(q), Some(r));
                Ok(true)
            }
            Action::ColocateWithLongDecode => {
                let r = self.rep_index(single(d)?)?;
                let l = self.reps[r]
                    .active_long
                    .filter(|&l| self.reqs[l].long == LongRun::Decoding)
                    .ok_or_else(|| SimError::Internal(format!("colocation on replica {r} without a long decode")))?;
                let tp = self.cost.cluster.tp_size as u64;
                let input = self.reqs[q].req.input_len;
                let load: u64 = self.reps[r].coloc.iter().map(|&c| self.reqs[c].req.input_len.div_ceil(tp)).sum::<u64>()
                    + input.div_ceil(tp);
                if load > self.sched.colocation_threshold() {
                    return Err(SimError::Internal(format!("colocation on replica {r} exceeds the token threshold")));
                }
                let base = self.long_decode_baseline(l);
                let work = self.cost.prefill_time(input);
                let dur = work * (1.0 + self.cost.decode_compute_share(base));
                let s = &mut self.reqs[q];
                s.dispatched = true;
                s.coloc = true;
                s.replicas = vec![r];
                s.expected = work;
                s.phase = Phase::Prefilling;
                s.prefill_start = Some(self.now);
                s.seg_start = self.now;
                self.reps[r].coloc.push(q);
                self.touch(r);
                self.push(self.now + dur, EventKind::PrefillDone, Some(q), Some(r), 0)?;
                self.note("colocate", Some(q), Some(r));
                Ok(true)
            }
        }
    }

    fn long_decode_baseline(&self, l: usize) -> f64 {
        let s = &self.reqs[l];
        let shards = s.replicas.len() as u32 * self.cost.cluster.tp_size;
        self.cost.decode_iter_time_tokens(s.req.input_len + s.generated, shards)
    }

    fn ckpt_time(&self, l: usize) -> f64 {
        self.cost.checkpoint_overhead(self.reqs[l].req.input_len).0
    }

    /// A short prefill borrows replicas of long `l`.
    fn preempt(&mut self, l: usize) -> Result<()> {
        match self.reqs[l].long {
            LongRun::Running => {
                let ckpt = self.ckpt_time(l);
                let s = &mut self.reqs[l];
                let ran = self.now - s.seg_start;
                s.remaining -= ran;
                s.charged += ran;
                s.gen += 1;
                s.long = LongRun::Saving;
                s.phase = Phase::PrefillPaused;
                s.preemptions += 1;
                s.susp_start = Some(self.now);
                self.push(self.now + ckpt, EventKind::PreemptApplied, Some(l), None, 0)?;
                self.note("preempt", Some(l), None);
            }
            LongRun::Decoding => {
                let s = &mut self.reqs[l];
                // counted once the decode has actually been held back
                if !s.decode_episode {
                    s.decode_episode = true;
                    s.susp_start = Some(self.now);
                    self.note("preempt_decode", Some(l), None);
                }
            }
            // joins the ongoing pause, or runs before a long that has not started
            LongRun::Saving | LongRun::Paused | LongRun::Restoring | LongRun::Pending => {}
        }
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<bool> {
        match ev.kind {
            EventKind::Arrival => {
                let q = ev.req.unwrap();
                self.note("arrival", Some(q), None);
                if self.closed {
                    self.reqs[q].phase = Phase::Starved;
                } else {
                    self.queue.push(q);
                }
                Ok(true)
            }
            EventKind::Horizon => {
                self.closed = true;
                for q in std::mem::take(&mut self.queue) {
                    self.reqs[q].phase = Phase::Starved;
                    self.note("starved", Some(q), None);
                }
                for r in 0..self.reps.len() {
                    self.close_interval(r, self.now);
                }
                self.window_acct = Some(self.reps.iter().map(|r| (r.exec, r.idle)).collect());
                Ok(false)
            }
            EventKind::PrefillDone => {
                let q = ev.req.unwrap();
                if self.reqs[q].req.is_long() {
                    if ev.gen != self.reqs[q].gen || self.reqs[q].long != LongRun::Running {
                        return Ok(false);
                    }
                    self.long_prefill_done(q)?;
                } else {
                    self.short_prefill_done(q, ev.replica.unwrap())?;
                }
                Ok(true)
            }
            EventKind::PreemptApplied => {
                let l = ev.req.unwrap();
                self.reqs[l].long = LongRun::Paused;
                for r in self.reqs[l].replicas.clone() {
                    self.reps[r].running = Running::None;
                    self.mark(r);
                }
                self.note("paused", Some(l), None);
                Ok(false)
            }
            EventKind::ResumeApplied => {
                let l = ev.req.unwrap();
                let members = self.reqs[l].replicas.clone();
                let busy = members.iter().any(|&r| !self.reps[r].urgent.is_empty() || !self.reps[r].batch.is_empty() || !self.reps[r].wait.is_empty());
                if busy {
                    let ckpt = self.ckpt_time(l);
                    let s = &mut self.reqs[l];
                    s.long = LongRun::Saving;
                    s.preemptions += 1;
                    for &r in &members {
                        for &q in &self.reps[r].urgent {
                            self.reqs[q].overhead += ckpt;
                        }
                    }
                    self.push(self.now + ckpt, EventKind::PreemptApplied, Some(l), None, 0)?;
                    self.note("preempt", Some(l), None);
                } else {
                    let s = &mut self.reqs[l];
                    s.long = LongRun::Running;
                    s.phase = Phase::Prefilling;
                    if let Some(t0) = s.susp_start.take() {
                        s.susp_total += self.now - t0;
                    }
                    s.seg_start = self.now;
                    let (end, gen) = (self.now + s.remaining.max(0.0), s.gen);
                    self.push(end, EventKind::PrefillDone, Some(l), None, gen)?;
                    self.note("resumed", Some(l), None);
                }
                for r in members {
                    self.touch(r);
                }
                Ok(true)
            }
            EventKind::KvMigrationDone => {
                let q = ev.req.unwrap();
                let d = ev.replica.unwrap();
                self.reqs[q].phase = Phase::Decoding;
                self.reqs[q].first_token = Some(self.now);
                self.reps[d].wait.push_back(q);
                self.mark(d);
                self.note("kv_arrived", Some(q), Some(d));
                Ok(true)
            }
            EventKind::DecodeIterDone => {
                match ev.req {
                    Some(l) => self.long_decode_iter_done(l),
                    None => self.short_decode_iter_done(ev.replica.unwrap()),
                }
                Ok(true)
            }
        }
    }

    fn short_prefill_done(&mut self, q: usize, r: usize) -> Result<()> {
        let input = self.reqs[q].req.input_len;
        let coloc = self.reqs[q].coloc;
        self.reqs[q].charged = self.reqs[q].expected;
        let rep = &mut self.reps[r];
        if coloc {
            rep.coloc.retain(|&c| c != q);
        } else {
            rep.running = Running::None;
            rep.view.queue_tokens -= input;
            rep.view.ahead_tokens -= input;
            if self.reqs[q].urgent {
                rep.view.urgent_tokens -= input;
            }
        }
        self.mark(r);
        self.note("prefill_done", Some(q), Some(r));

        if self.disagg && !self.decode_reps.is_empty() {
            let d = *self
                .decode_reps
                .iter()
                .min_by_key(|&&d| (self.reps[d].batch.len() + self.reps[d].wait.len(), d))
                .unwrap();
            let bw = if self.reps[d].view.node_id == self.reps[r].view.node_id {
                self.cost.cluster.intra_node_bw
            } else {
                self.cost.cluster.inter_node_bw
            };
            let layers = self.cost.model.n_layers as f64;
            let start = self.reqs[q].prefill_start.unwrap_or(self.now);
            let per_layer_compute = (self.now - start) / layers;
            let per_layer_xfer = self.cost.kv_layer_bytes(input) as f64 / bw;
            let ready = (self.now + per_layer_xfer).max(start + per_layer_compute + layers * per_layer_xfer);
            self.reqs[q].phase = Phase::MigratingKv;
            self.push(ready, EventKind::KvMigrationDone, Some(q), Some(d), 0)?;
        } else {
            self.reqs[q].phase = Phase::Decoding;
            self.reqs[q].first_token = Some(self.now);
            self.reps[r].wait.push_back(q);
        }
        Ok(())
    }

    fn long_prefill_done(&mut self, l: usize) -> Result<()> {
        let members = self.reqs[l].replicas.clone();
        let share = self.reqs[l].req.input_len.div_ceil(members.len() as u64);
        let s = &mut self.reqs[l];
        s.charged += s.remaining;
        s.remaining = 0.0;
        s.first_token = Some(self.now);
        s.long = LongRun::Decoding;
        s.phase = Phase::Decoding;
        for r in members {
            self.reps[r].running = Running::None;
            self.reps[r].view.queue_tokens -= share;
            self.mark(r);
        }
        self.note("prefill_done", Some(l), None);
        Ok(())
    }

    fn long_decode_iter_done(&mut self, l: usize) {
        let members = self.reqs[l].replicas.clone();
        let s = &mut self.reqs[l];
        s.generated += 1;
        let finished = s.generated >= s.req.output_len;
        if finished {
            s.decode_episode = false;
            s.susp_start = None;
            s.finish = Some(self.now);
            s.phase = Phase::Done;
            self.active_longs.remove(&l);
            self.note("done", Some(l), None);
        }
        for r in members {
            self.reps[r].running = Running::None;
            if finished {
                self.reps[r].active_long = None;
            }
            self.mark(r);
        }
    }

    fn short_decode_iter_done(&mut self, r: usize) {
        let batch = std::mem::take(&mut self.reps[r].batch);
        let mut keep = Vec::with_capacity(batch.len());
        for q in batch {
            let s = &mut self.reqs[q];
            s.generated += 1;
            if s.generated >= s.req.output_len {
                s.finish = Some(self.now);
                s.phase = Phase::Done;
                self.note("done", Some(q), Some(r));
            } else {
                keep.push(q);
            }
        }
        self.reps[r].batch = keep;
        self.reps[r].running = Running::None;
        self.mark(r);
    }

    /// Starts the next activity on an idle replica.
    fn kick(&mut self, r: usize) -> Result<()> {
        if self.reps[r].running != Running::None {
            return Ok(());
        }
        if self.reps[r].view.role == ReplicaRole::DecodeOnly {
            return self.start_decode_iter(r);
        }
        if let Some(q) = self.reps[r].urgent.pop_front() {
            return self.start_short(r, q);
        }
        if let Some(l) = self.reps[r].active_long {
            if self.has_decode_work(r) {
                return self.start_decode_iter(r);
            }
            return match self.reqs[l].long {
                LongRun::Paused => self.try_resume(l),
                LongRun::Decoding => self.try_long_decode(l),
                _ => Ok(()),
            };
        }
        let head = self.reps[r].local.front().copied();
        let head_short = head.filter(|&q| !self.reqs[q].req.is_long());
        let decode = self.has_decode_work(r);
        if let Some(q) = head_short {
            if !(decode && self.reps[r].last_was_prefill) {
                self.reps[r].local.pop_front();
                return self.start_short(r, q);
            }
        }
        if decode {
            return self.start_decode_iter(r);
        }
        if let Some(l) = head {
            if self.reqs[l].req.is_long() {
                return self.try_start_long(l);
            }
        }
        Ok(())
    }

    fn has_decode_work(&self, r: usize) -> bool {
        !self.reps[r].batch.is_empty() || !self.reps[r].wait.is_empty()
    }

    fn start_short(&mut self, r: usize, q: usize) -> Result<()> {
        let s = &mut self.reqs[q];
        s.phase = Phase::Prefilling;
        s.prefill_start = Some(self.now);
        s.seg_start = self.now;
        let end = self.now + s.expected;
        let rep = &mut self.reps[r];
        rep.running = Running::ShortPrefill(q);
        rep.last_was_prefill = true;
        self.touch(r);
        self.push(end, EventKind::PrefillDone, Some(q), Some(r), 0)?;
        self.note("prefill_start", Some(q), Some(r));
        Ok(())
    }

    fn start_decode_iter(&mut self, r: usize) -> Result<()> {
        let max = self.cfg.max_decode_batch;
        let rep = &mut self.reps[r];
        while rep.batch.len() < max {
            match rep.wait.pop_front() {
                Some(q) => rep.batch.push(q),
                None => break,
            }
        }
        if rep.batch.is_empty() {
            return Ok(());
        }
        let ctx: u64 = rep.batch.iter().map(|&q| self.reqs[q].req.input_len + self.reqs[q].generated).sum();
        let dur = self.cost.decode_iter_time_tokens(ctx, self.cost.cluster.tp_size);
        rep.running = Running::DecodeIter;
        rep.last_was_prefill = false;
        self.touch(r);
        self.push(self.now + dur, EventKind::DecodeIterDone, None, Some(r), 0)
    }

    fn member_ready(&self, r: usize, l: usize) -> bool {
        let rep = &self.reps[r];
        rep.quiet() && rep.coloc.is_empty() && rep.active_long.is_none() && rep.local.front() == Some(&l)
    }

    fn try_start_long(&mut self, l: usize) -> Result<()> {
        let members = self.reqs[l].replicas.clone();
        if !members.iter().all(|&r| self.member_ready(r, l)) {
            return Ok(());
        }
        for &r in &members {
            let rep = &mut self.reps[r];
            rep.local.pop_front();
            rep.view.pending_longs -= 1;
            rep.active_long = Some(l);
            rep.running = Running::Gang(l);
            rep.last_was_prefill = true;
            // shorts queued behind this long now sit ahead of the next one
            let mut add = 0;
            for &q in rep.local.iter() {
                if self.reqs[q].req.is_long() {
                    break;
                }
                add += self.reqs[q].req.input_len;
            }
            rep.view.ahead_tokens += add;
            self.touch(r);
        }
        let s = &mut self.reqs[l];
        s.long = LongRun::Running;
        s.phase = Phase::Prefilling;
        s.prefill_start = Some(self.now);
        s.seg_start = self.now;
        let (end, gen) = (self.now + s.remaining, s.gen);
        self.push(end, EventKind::PrefillDone, Some(l), None, gen)?;
        self.note("long_start", Some(l), members.first().copied());
        Ok(())
    }

    fn gang_free(&self, l: usize) -> bool {
        self.reqs[l].replicas.iter().all(|&r| self.reps[r].quiet())
    }

    fn try_resume(&mut self, l: usize) -> Result<()> {
        if !self.gang_free(l) {
            return Ok(());
        }
        let ckpt = self.ckpt_time(l);
        self.reqs[l].long = LongRun::Restoring;
        for r in self.reqs[l].replicas.clone() {
            self.reps[r].running = Running::Gang(l);
            self.touch(r);
        }
        self.push(self.now + ckpt, EventKind::ResumeApplied, Some(l), None, 0)?;
        self.note("resume", Some(l), None);
        Ok(())
    }

    fn try_long_decode(&mut self, l: usize) -> Result<()> {
        if !self.gang_free(l) {
            return Ok(());
        }
        let members = self.reqs[l].replicas.clone();
        let base = self.long_decode_baseline(l);
        let tp = self.cost.cluster.tp_size as u64;
        let coloc = members
            .iter()
            .map(|&r| self.reps[r].coloc.iter().map(|&q| self.reqs[q].req.input_len.div_ceil(tp)).sum::<u64>())
            .max()
            .unwrap_or(0);
        let dur = self.cost.colocated_decode_iter_time(base, coloc);
        if dur > COLOC_MAX_SLOWDOWN * base * (1.0 + 1e-12) {
            return Err(SimError::Internal(format!(
                "colocated decode of {} slowed beyond the allowed bound",
                self.reqs[l].req.id
            )));
        }
        let s = &mut self.reqs[l];
        if s.decode_episode {
            s.decode_episode = false;
            if let Some(t0) = s.susp_start.take() {
                if self.now > t0 {
                    s.preemptions += 1;
                    s.susp_total += self.now - t0;
                }
            }
        }
        for &r in &members {
            self.reps[r].running = Running::Gang(l);
            self.touch(r);
        }
        self.push(self.now + dur, EventKind::DecodeIterDone, Some(l), None, 0)
    }

    fn finish(mut self) -> Result<SimOutput> {
        let lost: Vec<String> = self
            .reqs
            .iter()
            .filter(|s| !matches!(s.phase, Phase::Done | Phase::Starved))
            .map(|s| format!("{} ({:?})", s.req.id, s.phase))
            .collect();
        if !lost.is_empty() {
            return Err(SimError::Internal(format!("requests neither finished nor starved: {}", lost.join(", "))));
        }
        let records: Vec<RequestRecord> = self
            .reqs
            .iter()
            .map(|s| RequestRecord {
                id: s.req.id,
                class: s.req.class,
                arrival_time: s.req.arrival_time,
                input_len: s.req.input_len,
                output_len: s.req.output_len,
                prefill_start_time: s.prefill_start,
                first_token_time: s.first_token,
                finish_time: s.finish,
                starved: s.phase == Phase::Starved,
                preemption_count: s.preemptions,
                suspension_time_total: s.susp_total,
                sched_overhead: s.overhead,
                charged_prefill_compute: s.charged,
                expected_prefill_compute: if s.dispatched { s.expected } else { 0.0 },
            })
            .collect();
        let gpus = |pairs: &mut dyn Iterator<Item = (usize, f64, f64)>| -> Vec<GpuAccounting> {
            let mut out = Vec::new();
            for (r, exec, idle) in pairs {
                for &g in &self.reps[r].view.gpu_ids {
                    out.push(GpuAccounting { gpu_id: g, exec_time: exec, idle_time: idle });
                }
            }
            out.sort_by_key(|g| g.gpu_id);
            out
        };
        let full = gpus(&mut self.reps.iter().enumerate().map(|(i, r)| (i, r.exec, r.idle)));
        let window = match &self.window_acct {
            Some(w) => gpus(&mut w.iter().enumerate().map(|(i, &(e, d))| (i, e, d))),
            None => full.clone(),
        };
        let report = MetricsReport::compute(&self.policy_label, &records, &window);
        Ok(SimOutput {
            report,
            records,
            accounting: window,
            accounting_full: full,
            horizon: self.horizon,
            event_log: self.log.take().unwrap_or_default(),
        })
    }
}

fn single(d: &ScheduleDecision) -> Result<crate::cluster::ReplicaId> {
    match d.target_replicas.as_slice() {
        [id] => Ok(*id),
        other => Err(SimError::Internal(format!(
            "short request {} needs exactly one target, got {}",
            d.request_id,
            other.len()
        ))),
    }
}
