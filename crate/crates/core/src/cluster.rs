//! Cluster topology, model dimensions and replica selection.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::workload::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Transformer dimensions relevant to the cost model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Model (hidden) dimension.
    pub d: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub n_layers: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d, self.n_heads, self.n_kv_heads, self.head_dim, self.n_layers];
        if dims.iter().any(|&v| v == 0) {
            return Err(SimError::Config(format!("model {}: all dimensions must be positive", self.name)));
        }
        if self.d != self.n_heads * self.head_dim {
            return Err(SimError::Config(format!(
                "model {}: d ({}) != n_heads * head_dim ({})",
                self.name,
                self.d,
                self.n_heads * self.head_dim
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(SimError::Config(format!(
                "model {}: n_heads not divisible by n_kv_heads",
                self.name
            )));
        }
        Ok(())
    }

    /// Weight elements in one transformer layer: QKV and output projections
    /// plus a d -> 4d -> d MLP.
    pub fn layer_param_elems(&self) -> u64 {
        let kv = self.n_kv_heads * self.head_dim;
        2 * self.d * self.d + 2 * self.d * kv + 8 * self.d * self.d
    }
}

/// Static cluster description and hardware calibration constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSpec {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    /// GPUs per model replica (tensor-parallel size).
    pub tp_size: u32,
    /// Replicas reserved for short-request decode.
    pub decode_replicas: u32,
    /// Effective FLOP/s per GPU (peak times utilization).
    pub gpu_compute_rate: f64,
    /// Bytes/s between GPUs of one node.
    pub intra_node_bw: f64,
    /// Bytes/s between nodes.
    pub inter_node_bw: f64,
    /// Effective HBM bytes/s per GPU, used for memory-bound decode.
    pub mem_bw: f64,
    pub bytes_per_element: u64,
    /// Input tokens one replica can hold; long requests span
    /// `ceil(input_len / replica_token_capacity)` replicas.
    pub replica_token_capacity: u64,
    /// Relative throughput of blockwise ring-attention steps compared with a
    /// fused local attention kernel.
    pub ring_attention_efficiency: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        // Four 8xA100 nodes.
        Self {
            num_nodes: 4,
            gpus_per_node: 8,
            tp_size: 1,
            decode_replicas: 0,
            gpu_compute_rate: 312e12 * 0.5,
            intra_node_bw: 300e9,
            inter_node_bw: 50e9,
            mem_bw: 2.0e12 * 0.8,
            bytes_per_element: 2,
            replica_token_capacity: 150_000,
            ring_attention_efficiency: 0.6,
        }
    }
}

impl ClusterSpec {
    pub fn total_gpus(&self) -> u32 {
        self.num_nodes * self.gpus_per_node
    }

    pub fn replicas_per_node(&self) -> u32 {
        self.gpus_per_node / self.tp_size
    }

    pub fn total_replicas(&self) -> u32 {
        self.num_nodes * self.replicas_per_node()
    }

    /// Replicas a long prefill of `input_len` tokens occupies.
    pub fn replicas_needed(&self, input_len: u64) -> u32 {
        input_len.div_ceil(self.replica_token_capacity).max(1) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.gpus_per_node == 0 || self.tp_size == 0 {
            return Err(SimError::Config("node, GPU and TP counts must be positive".into()));
        }
        if self.gpus_per_node % self.tp_size != 0 {
            return Err(SimError::Config(format!(
                "gpus_per_node ({}) is not divisible by tp_size ({})",
                self.gpus_per_node, self.tp_size
            )));
        }
        if self.decode_replicas >= self.total_replicas() {
            return Err(SimError::Config(format!(
                "decode_replicas ({}) must be fewer than the {} replicas",
                self.decode_replicas,
                self.total_replicas()
            )));
        }
        let rates = [self.gpu_compute_rate, self.intra_node_bw, self.inter_node_bw, self.mem_bw];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(SimError::Config("rates and bandwidths must be positive".into()));
        }
        if self.bytes_per_element == 0 || self.replica_token_capacity == 0 {
            return Err(SimError::Config(
                "bytes_per_element and replica_token_capacity must be positive".into(),
            ));
        }
        if !(self.ring_attention_efficiency > 0.0 && self.ring_attention_efficiency <= 1.0) {
            return Err(SimError::Config("ring_attention_efficiency must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// A model together with the deployment settings it ships with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPreset {
    pub model: ModelSpec,
    pub tp_size: u32,
    pub decode_replicas: u32,
    pub replica_token_capacity: u64,
}

impl ModelPreset {
    pub const NAMES: [&'static str; 4] = ["mistral-7b", "phi3-14b", "yi-34b", "llama3.1-70b"];

    pub fn by_name(name: &str) -> Option<Self> {
        let m = |d, n_heads, n_kv_heads, n_layers| ModelSpec {
            name: name.to_string(),
            d,
            n_heads,
            n_kv_heads,
            head_dim: 128,
            n_layers,
        };
        // Token capacities follow the HBM left after weights, keeping half of
        // it for activations of long prefills.
        let p = match name {
            "mistral-7b" => (m(4096, 32, 8, 32), 1, 4, 150_000),
            "phi3-14b" => (m(5120, 40, 10, 40), 1, 4, 100_000),
            "yi-34b" => (m(7168, 56, 8, 60), 4, 1, 300_000),
            "llama3.1-70b" => (m(8192, 64, 8, 80), 4, 1, 200_000),
            _ => return None,
        };
        Some(Self {
            model: p.0,
            tp_size: p.1,
            decode_replicas: p.2,
            replica_token_capacity: p.3,
        })
    }

    pub fn all() -> Vec<Self> {
        Self::NAMES.iter().filter_map(|n| Self::by_name(n)).collect()
    }

    /// Applies the deployment settings to a cluster spec.
    pub fn apply(&self, cluster: &ClusterSpec) -> ClusterSpec {
        ClusterSpec {
            tp_size: self.tp_size,
            decode_replicas: self.decode_replicas,
            replica_token_capacity: self.replica_token_capacity,
            ..cluster.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicaRole {
    General,
    DecodeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusyState {
    Idle,
    ShortPrefill,
    /// Running short decode iterations.
    ShortDecode,
    LongPrefill,
    LongDecode,
    /// Long decode with short prefill work colocated.
    Colocated,
}

/// Per-replica view handed to scheduling policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    pub id: ReplicaId,
    pub node_id: u32,
    pub gpu_ids: Vec<u32>,
    pub role: ReplicaRole,
    /// Input tokens of prefill work queued or running on this replica.
    pub queue_tokens: u64,
    pub busy: BusyState,
    /// Long request started here (prefilling, paused or decoding).
    pub long_holder: Option<RequestId>,
    /// Long requests committed here that have not started yet.
    pub pending_longs: u32,
    /// Queued tokens ahead of the first pending long.
    pub ahead_tokens: u64,
    /// Tokens of short prefills that jumped ahead of a long.
    pub urgent_tokens: u64,
    /// Short prefill tokens colocated next to a long decode, per GPU.
    pub coloc_tokens_per_gpu: u64,
    /// Requests decoding here.
    pub decode_batch: usize,
    /// No running work, no queued work and no decode batch.
    pub idle: bool,
}

impl Replica {
    pub fn is_general(&self) -> bool {
        self.role == ReplicaRole::General
    }
}

/// Cumulative busy/idle time of one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuAccounting {
    pub gpu_id: u32,
    pub exec_time: f64,
    pub idle_time: f64,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub spec: ClusterSpec,
    pub replicas: Vec<Replica>,
    pub accounting: Vec<GpuAccounting>,
}

/// Lays out replicas node by node; the first `decode_replicas` ids are
/// decode-only.
pub fn build_cluster(spec: &ClusterSpec) -> Result<Cluster> {
    spec.validate()?;
    let per_node = spec.replicas_per_node();
    let mut replicas = Vec::with_capacity(spec.total_replicas() as usize);
    for node in 0..spec.num_nodes {
        for slot in 0..per_node {
            let id = node * per_node + slot;
            let first_gpu = node * spec.gpus_per_node + slot * spec.tp_size;
            replicas.push(Replica {
                id: ReplicaId(id),
                node_id: node,
                gpu_ids: (first_gpu..first_gpu + spec.tp_size).collect(),
                role: if id < spec.decode_replicas {
                    ReplicaRole::DecodeOnly
                } else {
                    ReplicaRole::General
                },
                queue_tokens: 0,
                busy: BusyState::Idle,
                long_holder: None,
                pending_longs: 0,
                ahead_tokens: 0,
                urgent_tokens: 0,
                coloc_tokens_per_gpu: 0,
                decode_batch: 0,
                idle: true,
            });
        }
    }
    let accounting = (0..spec.total_gpus())
        .map(|gpu_id| GpuAccounting {
            gpu_id,
            exec_time: 0.0,
            idle_time: 0.0,
        })
        .collect();
    Ok(Cluster {
        spec: spec.clone(),
        replicas,
        accounting,
    })
}

/// Picks `need` replicas among those accepted by `eligible`.
///
/// A combination inside one node always wins over a cross-node one. Among the
/// allowed combinations the smallest total `queue_tokens` wins, then the
/// lexicographically smallest sorted id tuple. Returns ids in ascending
/// order, or `None` when too few replicas are eligible.
pub fn select_replicas<'a, I, F>(replicas: I, need: usize, eligible: F) -> Option<Vec<ReplicaId>>
where
    I: IntoIterator<Item = &'a Replica>,
    F: Fn(&Replica) -> bool,
{
    if need == 0 {
        return Some(Vec::new());
    }
    let mut pool: Vec<&Replica> = replicas.into_iter().filter(|r| eligible(r)).collect();
    if pool.len() < need {
        return None;
    }
    pool.sort_by_key(|r| (r.queue_tokens, r.id));

    // Cheapest `need` replicas of each node; pool order carries over.
    let mut by_node: BTreeMap<u32, Vec<&Replica>> = BTreeMap::new();
    for r in &pool {
        by_node.entry(r.node_id).or_default().push(r);
    }
    let best_local = by_node
        .values()
        .filter(|rs| rs.len() >= need)
        .map(|rs| finish_choice(&rs[..need]))
        .min();
    if let Some((_, ids)) = best_local {
        return Some(ids);
    }
    Some(finish_choice(&pool[..need]).1)
}

fn finish_choice(chosen: &[&Replica]) -> (u64, Vec<ReplicaId>) {
    let total = chosen.iter().map(|r| r.queue_tokens).sum();
    let mut ids: Vec<ReplicaId> = chosen.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    (total, ids)
}
