//! Dispatch policies over the global queue.
//!
//! A [`Scheduler`] turns the global queue plus a snapshot of replica and
//! long-request state into a list of [`ScheduleDecision`]s. It never mutates
//! engine state; requests without a decision stay queued.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{select_replicas, Replica, ReplicaId, ReplicaRole};
use crate::costmodel::{CostModel, Placement, SpPlan};
use crate::error::{Result, SimError};
use crate::workload::{Request, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Fifo,
    Reservation,
    Priority,
    #[serde(rename = "pecsched")]
    PecSched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoPreempt,
    NoDisagg,
    NoColoc,
    #[serde(rename = "no-fast-sp")]
    NoFastSp,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Fifo, PolicyKind::Reservation, PolicyKind::Priority, PolicyKind::PecSched];
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoPreempt, Ablation::NoDisagg, Ablation::NoColoc, Ablation::NoFastSp];

    pub fn suffix(self) -> &'static str {
        match self {
            Ablation::NoPreempt => "PE",
            Ablation::NoDisagg => "Dis",
            Ablation::NoColoc => "CoL",
            Ablation::NoFastSp => "FSP",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Fifo => "fifo",
            PolicyKind::Reservation => "reservation",
            PolicyKind::Priority => "priority",
            PolicyKind::PecSched => "pecsched",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(PolicyKind::Fifo),
            "reservation" => Ok(PolicyKind::Reservation),
            "priority" => Ok(PolicyKind::Priority),
            "pecsched" => Ok(PolicyKind::PecSched),
            other => Err(SimError::Config(format!("unknown policy '{other}'"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoPreempt => "no-preempt",
            Ablation::NoDisagg => "no-disagg",
            Ablation::NoColoc => "no-coloc",
            Ablation::NoFastSp => "no-fast-sp",
        })
    }
}

impl FromStr for Ablation {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "no-preempt" | "pe" => Ok(Ablation::NoPreempt),
            "no-disagg" | "dis" => Ok(Ablation::NoDisagg),
            "no-coloc" | "col" => Ok(Ablation::NoColoc),
            "no-fast-sp" | "fsp" => Ok(Ablation::NoFastSp),
            other => Err(SimError::Config(format!("unknown ablation '{other}'"))),
        }
    }
}

/// Which running long prefill a short request preempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VictimSelection {
    #[default]
    MostRemaining,
    LeastRemaining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub ablations: BTreeSet<Ablation>,
    pub reservation_long_capacity: u64,
    /// Per-GPU prefill tokens allowed next to a long decode; derived from
    /// the cost model when unset.
    pub colocation_token_threshold: Option<u64>,
    pub victim_selection: VictimSelection,
    /// Urgent prefill tokens a suspended replica may already hold and still
    /// take more shorts; beyond it another long is preempted.
    pub preempt_batch_tokens: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Fifo,
            ablations: BTreeSet::new(),
            reservation_long_capacity: 500_000,
            colocation_token_threshold: None,
            victim_selection: VictimSelection::MostRemaining,
            preempt_batch_tokens: 0,
        }
    }
}

impl PolicyConfig {
    pub fn new(policy: PolicyKind) -> Self {
        Self { policy, ..Default::default() }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.ablations.insert(a);
        self
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    /// Decode-only replicas exist only for PecSched with disaggregation.
    pub fn uses_decode_replicas(&self) -> bool {
        self.policy == PolicyKind::PecSched && !self.has(Ablation::NoDisagg)
    }

    /// `pecsched`, `pecsched/PE`, `fifo`, ...
    pub fn label(&self) -> String {
        let mut s = self.policy.to_string();
        for a in &self.ablations {
            s.push('/');
            s.push_str(a.suffix());
        }
        s
    }

    pub fn validate(&self, long_max: u64) -> Result<()> {
        if !self.ablations.is_empty() && self.policy != PolicyKind::PecSched {
            return Err(SimError::Config(format!(
                "ablations are only valid with pecsched, got {}",
                self.label()
            )));
        }
        if self.policy == PolicyKind::Reservation && self.reservation_long_capacity < long_max {
            return Err(SimError::Config(format!(
                "reservation_long_capacity {} is below long_max {}",
                self.reservation_long_capacity, long_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    DispatchPrefill,
    PreemptAndDispatch,
    ColocateWithLongDecode,
    Enqueue,
    Starve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub request_id: RequestId,
    pub action: Action,
    pub target_replicas: Vec<ReplicaId>,
    pub sp_plan: Option<SpPlan>,
    /// Long request whose replicas are borrowed by a preempting short.
    pub victim: Option<RequestId>,
    /// Short prefill placed ahead of committed long work on its replica.
    pub urgent: bool,
    /// Scheduler operations spent on this request.
    pub ops: u64,
}

impl ScheduleDecision {
    fn new(request_id: RequestId, action: Action, targets: Vec<ReplicaId>, ops: u64) -> Self {
        Self {
            request_id,
            action,
            target_replicas: targets,
            sp_plan: None,
            victim: None,
            urgent: false,
            ops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LongState {
    /// Committed, waiting for its replicas.
    Pending,
    Prefilling,
    /// Prefill suspended (including checkpoint save and restore).
    Paused,
    Decoding,
}

/// Snapshot of a dispatched long request.
#[derive(Debug, Clone, PartialEq)]
pub struct LongView {
    pub id: RequestId,
    pub replicas: Vec<ReplicaId>,
    pub state: LongState,
    /// Prefill compute seconds still to run.
    pub remaining_work: f64,
    pub input_len: u64,
}

/// Greedy longest-first assignment of `tokens` to `replicas` bins.
/// Returns the item indices per bin.
pub fn balance_preemption_batches(tokens: &[u64], replicas: usize) -> Vec<Vec<usize>> {
    let assign = balance_onto(tokens, &vec![0; replicas]);
    let mut bins = vec![Vec::new(); replicas];
    for (item, bin) in assign.into_iter().enumerate() {
        bins[bin].push(item);
    }
    bins
}

/// Longest-first assignment on top of existing bin loads; returns the bin of
/// each item. Ties go to the lower bin index.
pub fn balance_onto(tokens: &[u64], initial_loads: &[u64]) -> Vec<usize> {
    assert!(!initial_loads.is_empty() || tokens.is_empty(), "no bins to balance onto");
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| tokens[b].cmp(&tokens[a]).then(a.cmp(&b)));
    let mut loads = initial_loads.to_vec();
    let mut out = vec![0; tokens.len()];
    for i in order {
        let bin = (0..loads.len()).min_by_key(|&b| (loads[b], b)).unwrap();
        loads[bin] += tokens[i];
        out[i] = bin;
    }
    out
}

/// Policy instance bound to one cluster and model.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub cfg: PolicyConfig,
    cost: CostModel,
    coloc_threshold: u64,
    /// Reservation long pool membership, indexed by replica id.
    long_pool: Vec<bool>,
}

impl Scheduler {
    /// `long_min` and `long_max` bound long input lengths; they size the
    /// colocation threshold and validate the reservation pool.
    pub fn new(cfg: PolicyConfig, cost: CostModel, replicas: &[Replica], long_min: u64, long_max: u64) -> Result<Self> {
        cfg.validate(long_max)?;
        let spec = &cost.cluster;
        let coloc_threshold = cfg.colocation_token_threshold.unwrap_or_else(|| {
            let shards = spec.replicas_needed(long_max) * spec.tp_size;
            cost.colocation_threshold(long_min, shards)
        });
        let mut long_pool = vec![false; replicas.len()];
        if cfg.policy == PolicyKind::Reservation {
            let k = spec.replicas_needed(cfg.reservation_long_capacity) as usize;
            let general: Vec<&Replica> = replicas.iter().filter(|r| r.is_general()).collect();
            if k >= general.len() {
                return Err(SimError::Config(format!(
                    "reservation needs {k} long-pool replicas but only {} exist",
                    general.len()
                )));
            }
            for r in general.into_iter().take(k) {
                long_pool[r.id.0 as usize] = true;
            }
        }
        Ok(Self { cfg, cost, coloc_threshold, long_pool })
    }

    pub fn colocation_threshold(&self) -> u64 {
        self.coloc_threshold
    }

    pub fn in_long_pool(&self, id: ReplicaId) -> bool {
        self.long_pool.get(id.0 as usize).copied().unwrap_or(false)
    }

    pub fn long_pool_size(&self) -> usize {
        self.long_pool.iter().filter(|&&b| b).count()
    }

    /// Decisions for the current queue. Pure in `(queue, replicas, longs)`.
    pub fn decide(&self, queue: &[Request], replicas: &[Replica], longs: &[LongView]) -> Vec<ScheduleDecision> {
        if queue.is_empty() {
            return Vec::new();
        }
        let mut view = replicas.to_vec();
        let mut longs = longs.to_vec();
        match self.cfg.policy {
            PolicyKind::Fifo => self.fifo(queue, &mut view),
            PolicyKind::Reservation => self.reservation(queue, &mut view),
            PolicyKind::Priority => self.priority(queue, &mut view),
            PolicyKind::PecSched => self.pecsched(queue, &mut view, &mut longs),
        }
    }

    fn scan_ops(&self, view: &[Replica]) -> u64 {
        view.len() as u64
    }

    fn plan_for(&self, req: &Request, chosen: &[ReplicaId], view: &[Replica], fast: bool) -> Option<SpPlan> {
        if chosen.len() < 2 {
            return None;
        }
        let nodes: BTreeSet<u32> = chosen.iter().map(|id| view[id.0 as usize].node_id).collect();
        let max_per_node = nodes
            .iter()
            .map(|n| chosen.iter().filter(|id| view[id.0 as usize].node_id == *n).count())
            .max()
            .unwrap_or(1) as u32;
        let placement = Placement {
            replicas: chosen.len() as u32,
            ring_nodes: nodes.len() as u32,
            gpus_per_node: max_per_node * self.cost.cluster.tp_size,
        };
        let plan = if fast {
            self.cost.select_sp_plan(req.input_len, placement)
        } else {
            self.cost.ring_only_plan(req.input_len, placement)
        };
        plan.ok()
    }

    /// Commits a long to `chosen` in the local view.
    fn commit_long(&self, req: &Request, chosen: &[ReplicaId], view: &mut [Replica]) {
        let share = req.input_len.div_ceil(chosen.len() as u64);
        for id in chosen {
            let r = &mut view[id.0 as usize];
            r.queue_tokens += share;
            r.pending_longs += 1;
            r.idle = false;
        }
    }

    fn commit_short(req: &Request, r: &mut Replica, urgent: bool) {
        r.queue_tokens += req.input_len;
        if urgent {
            r.urgent_tokens += req.input_len;
        }
        if urgent || r.pending_longs == 0 {
            r.ahead_tokens += req.input_len;
        }
        r.idle = false;
    }

    fn dispatch_long(
        &self,
        req: &Request,
        view: &mut [Replica],
        eligible: impl Fn(&Replica) -> bool,
        fast: bool,
    ) -> Option<ScheduleDecision> {
        let need = self.cost.cluster.replicas_needed(req.input_len) as usize;
        let chosen = select_replicas(view.iter(), need, eligible)?;
        let mut d = ScheduleDecision::new(
            req.id,
            Action::DispatchPrefill,
            chosen.clone(),
            self.scan_ops(view) + 4 + need as u64,
        );
        d.sp_plan = self.plan_for(req, &chosen, view, fast);
        self.commit_long(req, &chosen, view);
        Some(d)
    }

    fn shortest_queue(view: &[Replica], eligible: impl Fn(&Replica) -> bool) -> Option<usize> {
        view.iter()
            .enumerate()
            .filter(|(_, r)| eligible(r))
            .min_by_key(|(_, r)| (r.queue_tokens, r.id))
            .map(|(i, _)| i)
    }

    fn fifo(&self, queue: &[Request], view: &mut [Replica]) -> Vec<ScheduleDecision> {
        let general = view.iter().filter(|r| r.is_general()).count();
        let mut out = Vec::new();
        for req in queue {
            if req.is_long() {
                if self.cost.cluster.replicas_needed(req.input_len) as usize > general {
                    break; // head-of-line: nothing behind it may pass
                }
                match self.dispatch_long(req, view, Replica::is_general, false) {
                    Some(d) => out.push(d),
                    None => break,
                }
            } else {
                let Some(i) = Self::shortest_queue(view, Replica::is_general) else { break };
                Self::commit_short(req, &mut view[i], false);
                out.push(ScheduleDecision::new(req.id, Action::DispatchPrefill, vec![view[i].id], self.scan_ops(view)));
            }
        }
        out
    }

    fn reservation(&self, queue: &[Request], view: &mut [Replica]) -> Vec<ScheduleDecision> {
        let mut out = Vec::new();
        for req in queue {
            if req.is_long() {
                let pool = |r: &Replica| r.is_general() && self.in_long_pool(r.id);
                if let Some(d) = self.dispatch_long(req, view, pool, false) {
                    out.push(d);
                }
            } else {
                let pool = |r: &Replica| r.is_general() && !self.in_long_pool(r.id);
                if let Some(i) = Self::shortest_queue(view, pool) {
                    Self::commit_short(req, &mut view[i], false);
                    out.push(ScheduleDecision::new(req.id, Action::DispatchPrefill, vec![view[i].id], self.scan_ops(view)));
                }
            }
        }
        out
    }

    fn priority(&self, queue: &[Request], view: &mut [Replica]) -> Vec<ScheduleDecision> {
        let mut out = Vec::new();
        let free_of_long = |r: &Replica| r.is_general() && r.long_holder.is_none() && r.pending_longs == 0;
        let mut short_held = false;
        for req in queue.iter().filter(|r| !r.is_long()) {
            match Self::shortest_queue(view, free_of_long) {
                Some(i) => {
                    Self::commit_short(req, &mut view[i], false);
                    out.push(ScheduleDecision::new(req.id, Action::DispatchPrefill, vec![view[i].id], self.scan_ops(view)));
                }
                None => {
                    short_held = true;
                    break;
                }
            }
        }
        if short_held {
            return out;
        }
        for req in queue.iter().filter(|r| r.is_long()) {
            let idle = |r: &Replica| r.is_general() && r.idle;
            match self.dispatch_long(req, view, idle, false) {
                Some(d) => out.push(d),
                None => break,
            }
        }
        out
    }

    fn pecsched(&self, queue: &[Request], view: &mut [Replica], longs: &mut [LongView]) -> Vec<ScheduleDecision> {
        let mut out = Vec::new();
        let tp = self.cost.cluster.tp_size as u64;
        let mut to_preempt: Vec<&Request> = Vec::new();
        for req in queue {
            let scan = self.scan_ops(view);
            if req.is_long() {
                let fast = !self.cfg.has(Ablation::NoFastSp);
                let free = |r: &Replica| r.is_general() && r.long_holder.is_none() && r.pending_longs == 0;
                let d = self
                    .dispatch_long(req, view, free, fast)
                    .or_else(|| self.dispatch_long(req, view, Replica::is_general, fast));
                // pending longs are neither colocation nor preemption
                // targets, so the local long snapshot is left alone
                out.extend(d);
                continue;
            }
            // (a) idle replicas not held by a started long; shorts go ahead of pending longs
            if let Some(i) = Self::open_replica(view, true) {
                out.push(Self::dispatch_open(req, view, i, scan));
                continue;
            }
            // (b) colocate with a long decode that has headroom
            if !self.cfg.has(Ablation::NoColoc) {
                let add = req.input_len.div_ceil(tp);
                let coloc = view
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| {
                        r.is_general()
                            && r.urgent_tokens == 0
                            && r.coloc_tokens_per_gpu + add <= self.coloc_threshold
                            && r.long_holder.is_some_and(|l| state_of(longs, l) == Some(LongState::Decoding))
                    })
                    .min_by_key(|(_, r)| (r.coloc_tokens_per_gpu, r.id))
                    .map(|(i, _)| i);
                if let Some(i) = coloc {
                    view[i].coloc_tokens_per_gpu += add;
                    let mut d = ScheduleDecision::new(req.id, Action::ColocateWithLongDecode, vec![view[i].id], scan);
                    d.victim = view[i].long_holder;
                    out.push(d);
                    continue;
                }
            }
            to_preempt.push(req);
        }
        if to_preempt.is_empty() {
            return out;
        }
        if self.cfg.has(Ablation::NoPreempt) {
            for req in to_preempt {
                out.push(self.fallback(req, view));
            }
            return out;
        }
        self.preempt(to_preempt, view, longs, &mut out);
        out
    }

    /// Places shorts that found no open replica onto suspended long gangs.
    fn preempt(&self, shorts: Vec<&Request>, view: &mut [Replica], longs: &mut [LongView], out: &mut Vec<ScheduleDecision>) {
        let budget = self.cfg.preempt_batch_tokens;
        let spare = |r: &Replica| r.urgent_tokens <= budget && r.decode_batch == 0;
        let paused: Vec<usize> = longs
            .iter()
            .enumerate()
            .filter(|(_, l)| l.state == LongState::Paused)
            .map(|(i, _)| i)
            .collect();
        let mut targets: Vec<(ReplicaId, RequestId)> = Vec::new();
        for &li in &paused {
            for id in &longs[li].replicas {
                if spare(&view[id.0 as usize]) {
                    targets.push((*id, longs[li].id));
                }
            }
        }
        if targets.is_empty() {
            let preemptable = |l: &LongView| {
                l.state == LongState::Prefilling
                    || (l.state == LongState::Decoding && self.cfg.has(Ablation::NoColoc))
            };
            // without colocation, shorts take the decode gangs they would
            // have shared before interrupting a prefill
            let decoding = |l: &LongView| l.state == LongState::Decoding;
            let victim = longs
                .iter()
                .enumerate()
                .filter(|(_, l)| preemptable(l))
                .max_by(|(_, a), (_, b)| {
                    let ord = a.remaining_work.total_cmp(&b.remaining_work);
                    let ord = match self.cfg.victim_selection {
                        VictimSelection::MostRemaining => ord,
                        VictimSelection::LeastRemaining => ord.reverse(),
                    };
                    decoding(a).cmp(&decoding(b)).then(ord).then(b.id.cmp(&a.id))
                })
                .map(|(i, _)| i);
            if let Some(vi) = victim {
                longs[vi].state = LongState::Paused;
                targets = longs[vi].replicas.iter().map(|id| (*id, longs[vi].id)).collect();
            } else {
                for &li in &paused {
                    for id in &longs[li].replicas {
                        targets.push((*id, longs[li].id));
                    }
                }
            }
        }
        if targets.is_empty() {
            for req in shorts {
                out.push(self.fallback(req, view));
            }
            return;
        }
        let tokens: Vec<u64> = shorts.iter().map(|r| r.input_len).collect();
        let loads: Vec<u64> = targets.iter().map(|(id, _)| view[id.0 as usize].urgent_tokens).collect();
        let bins = balance_onto(&tokens, &loads);
        let scan = self.scan_ops(view) + targets.len() as u64;
        for (req, bin) in shorts.into_iter().zip(bins) {
            let (rid, long) = targets[bin];
            Self::commit_short(req, &mut view[rid.0 as usize], true);
            let mut d = ScheduleDecision::new(req.id, Action::PreemptAndDispatch, vec![rid], scan);
            d.victim = Some(long);
            d.urgent = true;
            out.push(d);
        }
    }

    /// General replica without a started long, fewest tokens ahead first.
    fn open_replica(view: &[Replica], idle_only: bool) -> Option<usize> {
        view.iter()
            .enumerate()
            .filter(|(_, r)| r.is_general() && r.long_holder.is_none())
            .filter(|(_, r)| !idle_only || (r.ahead_tokens == 0 && r.decode_batch == 0))
            .min_by_key(|(_, r)| (r.ahead_tokens, r.queue_tokens, r.id))
            .map(|(i, _)| i)
    }

    fn dispatch_open(req: &Request, view: &mut [Replica], i: usize, scan: u64) -> ScheduleDecision {
        let urgent = view[i].pending_longs > 0;
        Self::commit_short(req, &mut view[i], urgent);
        let mut d = ScheduleDecision::new(req.id, Action::DispatchPrefill, vec![view[i].id], scan);
        d.urgent = urgent;
        d
    }

    /// Busy replica without a started long, else the shortest local queue
    /// (behind long work).
    fn fallback(&self, req: &Request, view: &mut [Replica]) -> ScheduleDecision {
        if let Some(i) = Self::open_replica(view, false) {
            return Self::dispatch_open(req, view, i, self.scan_ops(view));
        }
        match Self::shortest_queue(view, Replica::is_general) {
            Some(i) => {
                Self::commit_short(req, &mut view[i], false);
                ScheduleDecision::new(req.id, Action::DispatchPrefill, vec![view[i].id], self.scan_ops(view))
            }
            None => ScheduleDecision::new(req.id, Action::Enqueue, Vec::new(), self.scan_ops(view)),
        }
    }
}

fn state_of(longs: &[LongView], id: RequestId) -> Option<LongState> {
    longs.iter().find(|l| l.id == id).map(|l| l.state)
}

/// Replica role under a policy: decode-only replicas exist only when
/// PecSched disaggregates.
pub fn role_for(cfg: &PolicyConfig, replica_index: u32, decode_replicas: u32) -> ReplicaRole {
    if cfg.uses_decode_replicas() && replica_index < decode_replicas {
        ReplicaRole::DecodeOnly
    } else {
        ReplicaRole::General
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_cluster, BusyState, ClusterSpec, ModelPreset};
    use crate::workload::RequestClass;
    use proptest::prelude::*;

    fn setup(cfg: PolicyConfig, gpus: u32) -> (Scheduler, Vec<Replica>) {
        let preset = ModelPreset::by_name("mistral-7b").unwrap();
        let spec = ClusterSpec { num_nodes: 1, gpus_per_node: gpus, tp_size: 1, decode_replicas: 0, ..Default::default() };
        let cost = CostModel::new(preset.model, spec.clone()).unwrap();
        let replicas = build_cluster(&spec).unwrap().replicas;
        let s = Scheduler::new(cfg, cost, &replicas, 100_000, 500_000).unwrap();
        (s, replicas)
    }

    fn req(id: u32, input_len: u64) -> Request {
        let class = if input_len >= 100_000 { RequestClass::Long } else { RequestClass::Short };
        Request { id: RequestId(id), arrival_time: id as f64, input_len, output_len: 10, class }
    }

    fn hold(r: &mut Replica, long: u32, busy: BusyState) {
        r.long_holder = Some(RequestId(long));
        r.busy = busy;
        r.idle = false;
        r.queue_tokens = 10_000;
    }

    fn view(id: u32, replicas: &[Replica], state: LongState, remaining_work: f64) -> LongView {
        LongView {
            id: RequestId(id),
            replicas: replicas.iter().map(|r| r.id).collect(),
            state,
            remaining_work,
            input_len: 300_000,
        }
    }

    fn brute_force_max(tokens: &[u64], bins: usize) -> u64 {
        let mut best = u64::MAX;
        let mut assign = vec![0usize; tokens.len()];
        loop {
            let mut loads = vec![0u64; bins];
            for (t, b) in tokens.iter().zip(&assign) {
                loads[*b] += t;
            }
            best = best.min(*loads.iter().max().unwrap());
            let mut i = 0;
            while i < assign.len() {
                assign[i] += 1;
                if assign[i] < bins {
                    break;
                }
                assign[i] = 0;
                i += 1;
            }
            if i == assign.len() {
                return best;
            }
        }
    }

    fn max_load(tokens: &[u64], bins: &[Vec<usize>]) -> u64 {
        bins.iter().map(|b| b.iter().map(|&i| tokens[i]).sum()).max().unwrap()
    }

    #[test]
    fn longest_first_reaches_optimum_on_small_case() {
        let tokens = [8, 7, 3, 2];
        let bins = balance_preemption_batches(&tokens, 2);
        assert_eq!(max_load(&tokens, &bins), 10);
        assert_eq!(brute_force_max(&tokens, 2), 10);
    }

    #[test]
    fn balance_degenerate_cases() {
        assert_eq!(balance_preemption_batches(&[5, 1, 9], 1), vec![vec![0, 1, 2]]);
        let bins = balance_preemption_batches(&[4, 4, 4, 4], 2);
        assert!(bins.iter().all(|b| b.len() == 2));
    }

    proptest! {
        #[test]
        fn longest_first_within_graham_bound(tokens in prop::collection::vec(1u64..50, 1..8), m in 1usize..4) {
            let bins = balance_preemption_batches(&tokens, m);
            let got = max_load(&tokens, &bins);
            let opt = brute_force_max(&tokens, m);
            // LPT <= (4/3 - 1/(3m)) OPT
            prop_assert!(3 * m as u64 * got <= (4 * m as u64 - 1) * opt);
            prop_assert_eq!(bins, balance_preemption_batches(&tokens, m));
        }
    }

    #[test]
    fn fifo_dispatches_both_shorts() {
        let (s, rs) = setup(PolicyConfig::new(PolicyKind::Fifo), 2);
        let d = s.decide(&[req(0, 100), req(1, 200)], &rs, &[]);
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|d| d.action == Action::DispatchPrefill));
        assert_ne!(d[0].target_replicas, d[1].target_replicas);
        assert!(s.decide(&[], &rs, &[]).is_empty());
    }

    #[test]
    fn fifo_head_long_blocks_queue() {
        let (s, rs) = setup(PolicyConfig::new(PolicyKind::Fifo), 4);
        // needs 8 replicas, only 4 exist
        let d = s.decide(&[req(0, 1_200_000), req(1, 100)], &rs, &[]);
        assert!(d.is_empty());
    }

    #[test]
    fn reservation_keeps_shorts_out_of_long_pool() {
        let (s, rs) = setup(PolicyConfig::new(PolicyKind::Reservation), 8);
        assert_eq!(s.long_pool_size(), 4);
        let queue: Vec<Request> = (0..20).map(|i| req(i, 500)).collect();
        for d in s.decide(&queue, &rs, &[]) {
            assert!(d.target_replicas.iter().all(|id| !s.in_long_pool(*id)));
        }
        let d = s.decide(&[req(0, 400_000)], &rs, &[]);
        assert!(d[0].target_replicas.iter().all(|id| s.in_long_pool(*id)));
    }

    #[test]
    fn reservation_rejects_small_pool_capacity() {
        let cfg = PolicyConfig { reservation_long_capacity: 200_000, ..PolicyConfig::new(PolicyKind::Reservation) };
        assert!(matches!(cfg.validate(500_000), Err(SimError::Config(_))));
    }

    #[test]
    fn ablations_need_pecsched() {
        let cfg = PolicyConfig::new(PolicyKind::Fifo).with_ablation(Ablation::NoColoc);
        assert!(matches!(cfg.validate(500_000), Err(SimError::Config(_))));
        assert!(PolicyConfig::new(PolicyKind::PecSched).with_ablation(Ablation::NoColoc).validate(500_000).is_ok());
    }

    #[test]
    fn priority_serves_short_first() {
        let (s, rs) = setup(PolicyConfig::new(PolicyKind::Priority), 1);
        let d = s.decide(&[req(0, 120_000), req(1, 100)], &rs, &[]);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].request_id, RequestId(1));
    }

    #[test]
    fn priority_dispatches_long_when_idle() {
        let (s, rs) = setup(PolicyConfig::new(PolicyKind::Priority), 8);
        let d = s.decide(&[req(0, 300_000)], &rs, &[]);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].target_replicas.len(), 2);
        assert!(d[0].sp_plan.is_some());
    }

    #[test]
    fn pecsched_uses_idle_replica() {
        let (s, rs) = setup(PolicyConfig::new(PolicyKind::PecSched), 4);
        let d = s.decide(&[req(0, 100)], &rs, &[]);
        assert_eq!(d[0].action, Action::DispatchPrefill);
        assert_eq!(d[0].victim, None);
    }

    #[test]
    fn pecsched_preempts_long_prefill() {
        let (s, mut rs) = setup(PolicyConfig::new(PolicyKind::PecSched), 4);
        let (a, b) = rs.split_at_mut(2);
        a.iter_mut().for_each(|r| hold(r, 10, BusyState::LongPrefill));
        b.iter_mut().for_each(|r| hold(r, 11, BusyState::LongPrefill));
        let longs = [view(10, &rs[..2], LongState::Prefilling, 5.0), view(11, &rs[2..], LongState::Prefilling, 9.0)];
        let d = s.decide(&[req(0, 100), req(1, 300)], &rs, &longs);
        assert!(d.iter().all(|d| d.action == Action::PreemptAndDispatch && d.urgent));
        // most remaining work is the victim, tokens spread over its replicas
        assert!(d.iter().all(|d| d.victim == Some(RequestId(11))));
        assert_ne!(d[0].target_replicas, d[1].target_replicas);

        let lrw = PolicyConfig { victim_selection: VictimSelection::LeastRemaining, ..PolicyConfig::new(PolicyKind::PecSched) };
        let (s, _) = setup(lrw, 4);
        let d = s.decide(&[req(0, 100)], &rs, &longs);
        assert_eq!(d[0].victim, Some(RequestId(10)));
    }

    #[test]
    fn pecsched_without_preemption_enqueues_behind_long() {
        let (s, mut rs) = setup(PolicyConfig::new(PolicyKind::PecSched).with_ablation(Ablation::NoPreempt), 2);
        rs.iter_mut().for_each(|r| hold(r, 10, BusyState::LongPrefill));
        let longs = [view(10, &rs, LongState::Prefilling, 5.0)];
        let d = s.decide(&[req(0, 100)], &rs, &longs);
        assert_eq!(d[0].action, Action::DispatchPrefill);
        assert!(!d[0].urgent);
    }

    #[test]
    fn pecsched_colocates_with_long_decode() {
        let cfg = PolicyConfig { colocation_token_threshold: Some(4096), ..PolicyConfig::new(PolicyKind::PecSched) };
        let (s, mut rs) = setup(cfg.clone(), 2);
        rs.iter_mut().for_each(|r| hold(r, 10, BusyState::LongDecode));
        let longs = [view(10, &rs, LongState::Decoding, 0.0)];
        let d = s.decide(&[req(0, 1000)], &rs, &longs);
        assert_eq!(d[0].action, Action::ColocateWithLongDecode);

        let (s, _) = setup(cfg.with_ablation(Ablation::NoColoc), 2);
        let d = s.decide(&[req(0, 1000)], &rs, &longs);
        assert_eq!(d[0].action, Action::PreemptAndDispatch);
    }

    #[test]
    fn pecsched_never_preempts_decode_with_colocation() {
        let cfg = PolicyConfig { colocation_token_threshold: Some(10), ..PolicyConfig::new(PolicyKind::PecSched) };
        let (s, mut rs) = setup(cfg, 2);
        rs.iter_mut().for_each(|r| hold(r, 10, BusyState::LongDecode));
        let longs = [view(10, &rs, LongState::Decoding, 0.0)];
        let d = s.decide(&[req(0, 5000)], &rs, &longs);
        assert_eq!(d[0].action, Action::DispatchPrefill);
        assert_eq!(d[0].victim, None);
    }

    #[test]
    fn decisions_are_pure() {
        for policy in PolicyKind::ALL {
            let (s, mut rs) = setup(PolicyConfig::new(policy), 8);
            hold(&mut rs[4], 10, BusyState::LongPrefill);
            hold(&mut rs[5], 10, BusyState::LongPrefill);
            let longs = [view(10, &rs[4..6], LongState::Prefilling, 3.0)];
            let queue = [req(0, 100), req(1, 200_000), req(2, 3000), req(3, 50)];
            assert_eq!(s.decide(&queue, &rs, &longs), s.decide(&queue, &rs, &longs));
        }
    }
}
