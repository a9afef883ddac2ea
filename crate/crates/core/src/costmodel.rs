//! Analytical latency model.
//!
//! Stage volumes are exact integers (elements for communication, FLOPs for
//! computation) evaluated per GPU and per transformer layer. Times are
//! obtained by dividing by the calibrated rates in [`ClusterSpec`];
//! computation and communication are added without overlap.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ModelSpec};
use crate::error::{Result, SimError};

/// Intra-node sequence-parallel strategy for one stage of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpStrategy {
    MegatronSp,
    UlyssesSp,
}

impl SpStrategy {
    pub const ALL: [SpStrategy; 2] = [SpStrategy::MegatronSp, SpStrategy::UlyssesSp];
}

impl fmt::Display for SpStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpStrategy::MegatronSp => "megatron",
            SpStrategy::UlyssesSp => "ulysses",
        })
    }
}

/// Communication and computation volume of one stage on one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCosts {
    /// Elements moved inside a node.
    pub comm_volume: u128,
    pub comp_volume: u128,
}

/// Sizes that stage formulas depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    /// Sequence segment length per GPU.
    pub s: u64,
    /// Tensor-parallel size.
    pub tp: u64,
    /// GPUs of the request inside one node.
    pub g: u64,
}

impl StageShape {
    fn check(&self, model: &ModelSpec) -> Result<()> {
        if self.s == 0 || self.tp == 0 || self.g == 0 {
            return Err(SimError::Validation(format!(
                "segment length, TP and GPU count must be positive: {self:?}"
            )));
        }
        model.validate().map_err(|e| SimError::Validation(e.to_string()))?;
        if model.d % self.tp != 0 {
            return Err(SimError::Validation(format!(
                "model dimension {} not divisible by TP size {}",
                model.d, self.tp
            )));
        }
        Ok(())
    }
}

/// Attention stage (QKV generation, self-attention, output projection).
pub fn attn_stage_costs(strategy: SpStrategy, shape: StageShape, model: &ModelSpec) -> Result<StageCosts> {
    shape.check(model)?;
    let (s, t, g) = (shape.s as u128, shape.tp as u128, shape.g as u128);
    let d = model.d as u128;
    let qkv_heads = (model.n_heads + model.n_kv_heads) as u128;
    let dh = model.head_dim as u128;
    Ok(match strategy {
        SpStrategy::MegatronSp => StageCosts {
            comm_volume: 2 * s * d * (t - 1) * g,
            // 4(sT)^2 d / T == 4 s^2 T d
            comp_volume: 2 * s * (d / t) * qkv_heads * dh + 4 * s * s * t * d + 2 * s * d * d,
        },
        SpStrategy::UlyssesSp => StageCosts {
            comm_volume: 2 * s * qkv_heads * dh * (g - 1) + (d / t) * (qkv_heads * dh + d) * g * (t - 1),
            // 4(sG)^2 d / G == 4 s^2 G d
            comp_volume: 2 * s * d * qkv_heads * dh + 4 * s * s * g * d + 2 * s * d * d,
        },
    })
}

/// MLP stage (two linear projections).
pub fn mlp_stage_costs(strategy: SpStrategy, shape: StageShape, model: &ModelSpec) -> Result<StageCosts> {
    shape.check(model)?;
    let (s, t, g) = (shape.s as u128, shape.tp as u128, shape.g as u128);
    let d = model.d as u128;
    Ok(StageCosts {
        comm_volume: match strategy {
            SpStrategy::MegatronSp => 2 * s * d * (t - 1) * g,
            SpStrategy::UlyssesSp => 8 * d * (d / t) * (t - 1) * g,
        },
        comp_volume: 16 * s * d * d,
    })
}

/// Where a multi-replica prefill runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub replicas: u32,
    /// Distinct nodes spanned.
    pub ring_nodes: u32,
    /// Most GPUs used inside a single node.
    pub gpus_per_node: u32,
}

/// Chosen strategy per stage with its latency estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpPlan {
    pub attn_strategy: SpStrategy,
    pub mlp_strategy: SpStrategy,
    pub ring_nodes: u32,
    /// Ring-attention regions: TP groups under Megatron attention, nodes
    /// under Ulysses attention.
    pub ring_regions: u32,
    pub per_gpu_segment_len: u64,
    pub est_comm_time: f64,
    pub est_comp_time: f64,
    pub est_total_time: f64,
}

/// Cost model bound to one model and cluster calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
}

/// Activation elements read or written per prefill token per layer; drives
/// the HBM interference of colocated prefill on decode.
const COLOC_ACTIVATION_TRAFFIC: u64 = 12;

/// Allowed slowdown of a long decode iteration when short prefill is
/// colocated with it.
pub const COLOC_MAX_SLOWDOWN: f64 = 1.1;

impl CostModel {
    pub fn new(model: ModelSpec, cluster: ClusterSpec) -> Result<Self> {
        model.validate()?;
        cluster.validate()?;
        if model.d % cluster.tp_size as u64 != 0 {
            return Err(SimError::Config(format!(
                "model dimension {} not divisible by TP size {}",
                model.d, cluster.tp_size
            )));
        }
        Ok(Self { model, cluster })
    }

    fn bpe(&self) -> f64 {
        self.cluster.bytes_per_element as f64
    }

    /// Evaluates one (attention, MLP) strategy pair.
    pub fn evaluate_plan(
        &self,
        total_input_len: u64,
        placement: Placement,
        attn: SpStrategy,
        mlp: SpStrategy,
    ) -> Result<SpPlan> {
        let tp = self.cluster.tp_size as u64;
        let gpus = placement.replicas as u64 * tp;
        if gpus == 0 || placement.ring_nodes == 0 || total_input_len == 0 {
            return Err(SimError::Validation(format!(
                "empty placement or input: {placement:?}, len {total_input_len}"
            )));
        }
        let s = total_input_len.div_ceil(gpus);
        let g = placement.gpus_per_node.max(1) as u64;
        let shape = StageShape { s, tp, g };
        let a = attn_stage_costs(attn, shape, &self.model)?;
        let m = mlp_stage_costs(mlp, shape, &self.model)?;

        let rate = self.cluster.gpu_compute_rate;
        let mut comp = (a.comp_volume + m.comp_volume) as f64 / rate;
        let mut comm = (a.comm_volume + m.comm_volume) as f64 * self.bpe() / self.cluster.intra_node_bw;

        let (regions, block_flops) = match attn {
            SpStrategy::MegatronSp => (placement.replicas, 4 * (s as u128).pow(2) * tp as u128 * self.model.d as u128),
            SpStrategy::UlyssesSp => (placement.ring_nodes, 4 * (s as u128).pow(2) * g as u128 * self.model.d as u128),
        };
        if regions > 1 {
            let steps = (regions - 1) as f64;
            let ring_bw = if placement.ring_nodes > 1 {
                self.cluster.inter_node_bw
            } else {
                self.cluster.intra_node_bw
            };
            let kv_elems = 2 * s * self.model.n_kv_heads * self.model.head_dim;
            comp += steps * block_flops as f64 / (rate * self.cluster.ring_attention_efficiency);
            comm += steps * kv_elems as f64 * self.bpe() / ring_bw;
        }
        let layers = self.model.n_layers as f64;
        let (est_comp_time, est_comm_time) = (comp * layers, comm * layers);
        Ok(SpPlan {
            attn_strategy: attn,
            mlp_strategy: mlp,
            ring_nodes: placement.ring_nodes,
            ring_regions: regions,
            per_gpu_segment_len: s,
            est_comm_time,
            est_comp_time,
            est_total_time: est_comp_time + est_comm_time,
        })
    }

    /// All four strategy pairs in tie-break order.
    pub fn plan_table(&self, total_input_len: u64, placement: Placement) -> Result<Vec<SpPlan>> {
        let mut out = Vec::with_capacity(4);
        for attn in SpStrategy::ALL {
            for mlp in SpStrategy::ALL {
                out.push(self.evaluate_plan(total_input_len, placement, attn, mlp)?);
            }
        }
        Ok(out)
    }

    /// Fastest of the four strategy pairs; earlier pairs win ties.
    pub fn select_sp_plan(&self, total_input_len: u64, placement: Placement) -> Result<SpPlan> {
        let table = self.plan_table(total_input_len, placement)?;
        let mut best = table[0];
        for p in &table[1..] {
            if p.est_total_time < best.est_total_time {
                best = *p;
            }
        }
        Ok(best)
    }

    /// Plain ring attention over every replica with TP inside each one.
    pub fn ring_only_plan(&self, total_input_len: u64, placement: Placement) -> Result<SpPlan> {
        self.evaluate_plan(total_input_len, placement, SpStrategy::MegatronSp, SpStrategy::MegatronSp)
    }

    /// Prefill FLOPs per GPU for one layer on a single replica.
    pub fn single_replica_layer_flops(&self, input_len: u64) -> u128 {
        let s = input_len as u128;
        let t = self.cluster.tp_size as u128;
        let d = self.model.d as u128;
        let qkv = (self.model.n_heads + self.model.n_kv_heads) as u128 * self.model.head_dim as u128;
        (2 * s * d * qkv + 4 * s * s * d + 2 * s * d * d + 16 * s * d * d) / t
    }

    /// Prefill time of `input_len` tokens on one replica.
    pub fn prefill_time(&self, input_len: u64) -> f64 {
        if input_len == 0 {
            return 0.0;
        }
        self.single_replica_layer_flops(input_len) as f64 * self.model.n_layers as f64
            / self.cluster.gpu_compute_rate
    }

    /// KV bytes of one layer for `seq_len` tokens.
    pub fn kv_layer_bytes(&self, seq_len: u64) -> u64 {
        kv_layer_bytes(seq_len, &self.model, self.cluster.bytes_per_element)
    }

    /// One decode iteration for a batch with the given context lengths.
    /// KV is spread over `kv_shards` GPUs; weights over the TP group.
    pub fn decode_iter_time(&self, context_lens: &[u64], kv_shards: u32) -> f64 {
        let kv_tokens: u64 = context_lens.iter().sum();
        self.decode_iter_time_tokens(kv_tokens, kv_shards)
    }

    /// [`Self::decode_iter_time`] given the summed context length.
    pub fn decode_iter_time_tokens(&self, kv_tokens: u64, kv_shards: u32) -> f64 {
        let kv = self.kv_layer_bytes(kv_tokens) as f64 / kv_shards.max(1) as f64;
        let params = (self.model.layer_param_elems() * self.cluster.bytes_per_element) as f64
            / self.cluster.tp_size as f64;
        self.model.n_layers as f64 * (kv + params) / self.cluster.mem_bw
    }

    /// Intermediate data saved when a prefill is paused, and the time to
    /// stage it once.
    pub fn checkpoint_overhead(&self, input_len: u64) -> (f64, u64) {
        let bytes = input_len * self.model.d * self.cluster.bytes_per_element;
        (bytes as f64 / self.cluster.intra_node_bw, bytes)
    }

    /// Checkpoint bytes over the request's total KV bytes.
    pub fn checkpoint_kv_ratio(&self) -> f64 {
        checkpoint_kv_ratio(&self.model)
    }

    /// Fixed per-iteration cost of colocation: one token's query copy plus
    /// the all-reduce of its partial attention outputs.
    pub fn coloc_overhead(&self) -> f64 {
        let elems = 3 * self.model.d;
        self.model.n_layers as f64 * (elems * self.cluster.bytes_per_element) as f64
            / self.cluster.intra_node_bw
    }

    /// Extra decode-iteration time per colocated prefill token on a GPU.
    pub fn coloc_interference_per_token(&self) -> f64 {
        self.model.n_layers as f64
            * (COLOC_ACTIVATION_TRAFFIC * self.model.d * self.cluster.bytes_per_element) as f64
            / self.cluster.mem_bw
    }

    /// Long decode iteration with `tokens_per_gpu` prefill tokens colocated.
    pub fn colocated_decode_iter_time(&self, baseline: f64, tokens_per_gpu: u64) -> f64 {
        if tokens_per_gpu == 0 {
            return baseline;
        }
        baseline + self.coloc_overhead() + tokens_per_gpu as f64 * self.coloc_interference_per_token()
    }

    /// Largest per-GPU prefill token count that keeps a long decode
    /// iteration within [`COLOC_MAX_SLOWDOWN`] of its baseline. The baseline
    /// is that of a `reference_ctx`-token context spread over `kv_shards`.
    pub fn colocation_threshold(&self, reference_ctx: u64, kv_shards: u32) -> u64 {
        let baseline = self.decode_iter_time_tokens(reference_ctx, kv_shards);
        let budget = (COLOC_MAX_SLOWDOWN - 1.0) * baseline - self.coloc_overhead();
        if budget <= 0.0 {
            return 0;
        }
        let mut n = (budget / self.coloc_interference_per_token()).floor() as u64;
        while n > 0 && self.colocated_decode_iter_time(baseline, n) > COLOC_MAX_SLOWDOWN * baseline {
            n -= 1;
        }
        n
    }

    /// Fraction of a decode iteration spent on compute; colocated prefill
    /// is slowed down by this share.
    pub fn decode_compute_share(&self, iter_time: f64) -> f64 {
        if iter_time <= 0.0 {
            return 0.0;
        }
        let flops = 2.0 * self.model.layer_param_elems() as f64 * self.model.n_layers as f64
            / self.cluster.tp_size as f64;
        (flops / self.cluster.gpu_compute_rate / iter_time).min(0.5)
    }
}

/// `2 * seq_len * n_kv_heads * head_dim * bytes_per_element`.
pub fn kv_layer_bytes(seq_len: u64, model: &ModelSpec, bytes_per_element: u64) -> u64 {
    2 * seq_len * model.n_kv_heads * model.head_dim * bytes_per_element
}

/// `d / (2 * n_layers * n_kv_heads * head_dim)`: one layer of token
/// embeddings relative to all layers' KV, independent of input length.
pub fn checkpoint_kv_ratio(model: &ModelSpec) -> f64 {
    model.d as f64 / (2 * model.n_layers * model.n_kv_heads * model.head_dim) as f64
}
