//! Experiment runner: config, workload construction, policy runs and
//! report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{ClusterSpec, ModelPreset, ModelSpec};
use crate::costmodel::CostModel;
use crate::engine::{self, EngineConfig, SimInput, SimOutput};
use crate::error::{Result, SimError};
use crate::metrics::MetricsReport;
use crate::sched::{Ablation, PolicyConfig, PolicyKind};
use crate::workload::{
    load_trace, scale_arrivals, sub_seed, synthesize_poisson, transform_long_tail, LengthModel, Request,
    TraceTransformConfig,
};

/// Decode batch assumed when estimating how many shorts per second a
/// cluster sustains.
pub const NOMINAL_DECODE_BATCH: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    /// Shipped model; also applies its TP size, decode replicas and token
    /// capacity to the cluster.
    Preset(String),
    Custom(ModelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Arrivals per second.
    pub rate: Option<f64>,
    /// Arrival rate as a fraction of the estimated short-request capacity.
    pub load_factor: Option<f64>,
    /// Seconds of arrivals.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub trace: Option<PathBuf>,
    pub synthesis: Option<SynthesisConfig>,
    /// Multiplies arrival times after loading (below 1 compresses).
    #[serde(default = "one")]
    pub arrival_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub model: ModelChoice,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub transform: TraceTransformConfig,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    pub policies: Vec<PolicyConfig>,
}

impl ExperimentConfig {
    /// Reads a TOML config; a relative trace path is taken relative to the
    /// config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(trace) = &mut cfg.workload.trace {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Config(e.message().to_string()))
    }

    /// Model and cluster after applying a preset.
    pub fn resolve(&self) -> Result<(ModelSpec, ClusterSpec)> {
        match &self.model {
            ModelChoice::Preset(name) => {
                let p = ModelPreset::by_name(name).ok_or_else(|| {
                    SimError::Config(format!(
                        "unknown model preset {name:?}; expected one of {}",
                        ModelPreset::NAMES.join(", ")
                    ))
                })?;
                Ok((p.model.clone(), p.apply(&self.cluster)))
            }
            ModelChoice::Custom(m) => Ok((m.clone(), self.cluster.clone())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(SimError::Config("at least one policy is required".into()));
        }
        let (model, cluster) = self.resolve()?;
        model.validate()?;
        cluster.validate()?;
        self.transform.validate()?;
        for p in &self.policies {
            p.validate(self.transform.long_max)?;
        }
        let w = &self.workload;
        match (&w.trace, &w.synthesis) {
            (Some(t), None) => {
                if !t.exists() {
                    return Err(SimError::Config(format!("trace file {} does not exist", t.display())));
                }
            }
            (None, Some(s)) => {
                if s.rate.is_some() == s.load_factor.is_some() {
                    return Err(SimError::Config("synthesis needs exactly one of rate or load_factor".into()));
                }
                if !(s.duration > 0.0) {
                    return Err(SimError::Config("synthesis duration must be positive".into()));
                }
            }
            _ => {
                return Err(SimError::Config("workload needs exactly one of trace or synthesis".into()));
            }
        }
        if !(w.arrival_scale > 0.0) {
            return Err(SimError::Config("arrival_scale must be positive".into()));
        }
        Ok(())
    }

    /// Digest of everything that affects results; the output directory is
    /// left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        let json = serde_json::to_vec(&value).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short requests per second the cluster sustains when every GPU serves
/// shorts with lengths drawn from `lengths`.
pub fn estimate_capacity_rps(cost: &CostModel, lengths: &LengthModel) -> f64 {
    let tp = cost.cluster.tp_size as f64;
    let input = lengths.input.mean();
    let output = lengths.output.mean();
    let prefill = cost.prefill_time(input.round().max(1.0) as u64);
    let ctx = (NOMINAL_DECODE_BATCH as f64 * (input + output / 2.0)) as u64;
    let iter = cost.decode_iter_time_tokens(ctx, cost.cluster.tp_size);
    let gpu_seconds = tp * (prefill + output * iter / NOMINAL_DECODE_BATCH as f64);
    cost.cluster.total_gpus() as f64 / gpu_seconds
}

/// The transformed request stream shared by every policy of an experiment.
#[derive(Debug, Clone)]
pub struct Workload {
    pub requests: Vec<Request>,
    pub transform: TraceTransformConfig,
    pub rate: Option<f64>,
}

impl Workload {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&self.requests).expect("requests serialize");
        hex(&Sha256::digest(json))
    }

    pub fn long_count(&self) -> usize {
        self.requests.iter().filter(|r| r.is_long()).count()
    }
}

pub fn build_workload(cfg: &ExperimentConfig) -> Result<Workload> {
    let (model, cluster) = cfg.resolve()?;
    let (mut raw, rate) = match (&cfg.workload.trace, &cfg.workload.synthesis) {
        (Some(path), _) => (load_trace(path)?, None),
        (None, Some(s)) => {
            let lengths = LengthModel::azure_like();
            let rate = match (s.rate, s.load_factor) {
                (Some(r), _) => r,
                (None, Some(f)) => f * estimate_capacity_rps(&CostModel::new(model, cluster)?, &lengths),
                (None, None) => return Err(SimError::Config("synthesis needs a rate".into())),
            };
            let reqs = synthesize_poisson(rate, s.duration, &lengths, sub_seed(cfg.seed, "synthesis"))?;
            (reqs, Some(rate))
        }
        (None, None) => return Err(SimError::Config("workload needs a trace or synthesis".into())),
    };
    scale_arrivals(&mut raw, cfg.workload.arrival_scale);
    let transform = TraceTransformConfig {
        seed: sub_seed(cfg.seed, "trace-transform"),
        ..cfg.transform.clone()
    };
    let requests = if raw.is_empty() { raw } else { transform_long_tail(&raw, &transform)? };
    Ok(Workload { requests, transform, rate })
}

/// One simulation for one policy on a prepared workload.
pub fn simulate(cfg: &ExperimentConfig, workload: &Workload, policy: &PolicyConfig) -> Result<SimOutput> {
    let (model, cluster) = cfg.resolve()?;
    engine::run(SimInput {
        requests: workload.requests.clone(),
        cluster,
        model,
        policy: policy.clone(),
        long_min: workload.transform.long_min,
        long_max: workload.transform.long_max,
        engine: cfg.engine.clone(),
    })
}

/// Runs every policy concurrently on the same workload; results keep the
/// config order.
pub fn run_policies(cfg: &ExperimentConfig, workload: &Workload, policies: &[PolicyConfig]) -> Result<Vec<SimOutput>> {
    let results: Vec<Result<SimOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = policies.iter().map(|p| s.spawn(move || simulate(cfg, workload, p))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(SimError::Internal("simulation thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

/// Normalizes every report by the FIFO short p99 when FIFO is present.
pub fn normalize_reports(reports: &mut [MetricsReport]) -> Option<f64> {
    let divisor = reports
        .iter()
        .find(|r| r.policy == PolicyKind::Fifo.to_string())
        .and_then(|r| r.short.p99_delay());
    for r in reports.iter_mut() {
        r.normalize(divisor);
    }
    divisor.filter(|d| *d > 0.0)
}

pub fn report_file_name(label: &str) -> String {
    format!("report-{}.json", label.replace('/', "-"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub model: String,
    pub workload_sha256: String,
    pub requests: usize,
    pub long_requests: usize,
    pub arrival_rate: Option<f64>,
    pub normalization_divisor: Option<f64>,
    pub reports: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `bytes` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| SimError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SimError::io(path, e))
}

/// Writes the given files into `dir`; on failure removes what this call
/// already wrote.
pub fn write_bundle(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub manifest: Manifest,
    pub reports: Vec<MetricsReport>,
    pub outputs: Vec<SimOutput>,
    pub files: Vec<PathBuf>,
}

fn manifest_for(cfg: &ExperimentConfig, workload: &Workload, reports: &[MetricsReport], divisor: Option<f64>) -> Result<Manifest> {
    let (model, _) = cfg.resolve()?;
    Ok(Manifest {
        tool: "pecsched-sim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        model: model.name,
        workload_sha256: workload.digest(),
        requests: workload.requests.len(),
        long_requests: workload.long_count(),
        arrival_rate: workload.rate,
        normalization_divisor: divisor,
        reports: reports.iter().map(|r| (r.policy.clone(), report_file_name(&r.policy))).collect(),
    })
}

/// Runs all configured policies and writes one report per policy plus a
/// manifest into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_with_extra(cfg, &cfg.policies, |_| Vec::new())
}

fn run_with_extra(
    cfg: &ExperimentConfig,
    policies: &[PolicyConfig],
    extra: impl Fn(&[MetricsReport]) -> Vec<(String, Vec<u8>)>,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut labels: Vec<String> = policies.iter().map(|p| p.label()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != policies.len() {
        return Err(SimError::Config("each policy may appear only once".into()));
    }
    let workload = build_workload(cfg)?;
    let outputs = run_policies(cfg, &workload, policies)?;
    let mut reports: Vec<MetricsReport> = outputs.iter().map(|o| o.report.clone()).collect();
    let divisor = normalize_reports(&mut reports);
    let manifest = manifest_for(cfg, &workload, &reports, divisor)?;
    let mut files: Vec<(String, Vec<u8>)> = reports.iter().map(|r| (report_file_name(&r.policy), to_json(r))).collect();
    files.extend(extra(&reports));
    files.push((MANIFEST_FILE.to_string(), to_json(&manifest)));
    let written = write_bundle(&cfg.out_dir, &files)?;
    Ok(ExperimentResult { manifest, reports, outputs, files: written })
}

/// PecSched and its four single-ablation variants on one workload, plus a
/// preemption-count table.
pub fn run_ablations(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut policies = vec![PolicyConfig::new(PolicyKind::PecSched)];
    policies.extend(Ablation::ALL.iter().map(|&a| PolicyConfig::new(PolicyKind::PecSched).with_ablation(a)));
    let mut cfg = cfg.clone();
    cfg.policies = policies.clone();
    run_with_extra(&cfg, &policies, |reports| {
        let mut csv = String::from("policy,total_preemptions,p99_short_delay,avg_long_jct\n");
        for r in reports {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.policy,
                r.total_preemptions,
                opt(r.short.p99_delay()),
                opt(r.long.avg_jct)
            ));
        }
        vec![("preemptions.csv".to_string(), csv.into_bytes())]
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gpus: u32,
    pub rate: f64,
    pub requests: usize,
    pub p99_overhead_ratio: Option<f64>,
    pub p99_overhead_ratio_short: Option<f64>,
    pub p99_overhead_ratio_long: Option<f64>,
}

/// Requests synthesized per sweep point.
pub const SWEEP_REQUESTS: f64 = 4000.0;

/// Runs the first configured policy at each GPU count (8 GPUs per node),
/// with Poisson arrivals at the estimated capacity of that cluster.
/// Decode-only replicas scale with the cluster.
pub fn run_scalability_sweep(cfg: &ExperimentConfig, gpu_counts: &[u32]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let policy = cfg.policies[0].clone();
    let (_, base_cluster) = cfg.resolve()?;
    let base_gpus = base_cluster.total_gpus();
    let mut rows = Vec::new();
    for &gpus in gpu_counts {
        let per_node = base_cluster.gpus_per_node;
        if gpus == 0 || gpus % per_node != 0 {
            return Err(SimError::Config(format!("GPU count {gpus} is not a multiple of {per_node}")));
        }
        let mut c = cfg.clone();
        let mut cluster = base_cluster.clone();
        cluster.num_nodes = gpus / per_node;
        let scaled = (base_cluster.decode_replicas as u64 * gpus as u64 / base_gpus as u64) as u32;
        cluster.decode_replicas = scaled.max(1).min(cluster.total_replicas().saturating_sub(1));
        c.cluster = cluster.clone();
        let (model, _) = cfg.resolve()?;
        c.model = ModelChoice::Custom(model.clone());
        let rate = estimate_capacity_rps(&CostModel::new(model, cluster)?, &LengthModel::azure_like());
        c.workload = WorkloadConfig {
            trace: None,
            synthesis: Some(SynthesisConfig { rate: Some(rate), load_factor: None, duration: SWEEP_REQUESTS / rate }),
            arrival_scale: 1.0,
        };
        c.validate()?;
        let workload = build_workload(&c)?;
        let out = simulate(&c, &workload, &policy)?;
        rows.push(SweepRow {
            gpus,
            rate,
            requests: workload.requests.len(),
            p99_overhead_ratio: out.report.sched_overhead_ratio_p99,
            p99_overhead_ratio_short: out.report.short.sched_overhead_ratio_p99,
            p99_overhead_ratio_long: out.report.long.sched_overhead_ratio_p99,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("gpus,rate_rps,requests,p99_overhead_ratio,p99_overhead_ratio_short,p99_overhead_ratio_long\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.gpus,
            r.rate,
            r.requests,
            opt(r.p99_overhead_ratio),
            opt(r.p99_overhead_ratio_short),
            opt(r.p99_overhead_ratio_long)
        ));
    }
    s
}
