//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::time::Instant;

use pecsched_core::cluster::ModelPreset;
use pecsched_core::costmodel::{attn_stage_costs, checkpoint_kv_ratio, mlp_stage_costs, Placement, StageShape};
use pecsched_core::experiment::*;
use pecsched_core::workload::LengthModel;
use pecsched_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One hour of Azure-like traffic, about 20K short and 1K long requests.
const DEFAULT_RATE: f64 = 5.5;
const DEFAULT_DURATION: f64 = 3600.0;
/// Request count for workloads sized relative to a model's capacity.
const RELATIVE_REQUESTS: f64 = 21_000.0;
const SEED: u64 = 7;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(model: &str, synthesis: SynthesisConfig, policies: Vec<PolicyConfig>) -> ExperimentConfig {
    ExperimentConfig {
        seed: SEED,
        out_dir: std::env::temp_dir(),
        model: ModelChoice::Preset(model.to_string()),
        workload: WorkloadConfig { trace: None, synthesis: Some(synthesis), arrival_scale: 1.0 },
        transform: Default::default(),
        cluster: Default::default(),
        engine: Default::default(),
        policies,
    }
}

fn default_workload(model: &str, policies: Vec<PolicyConfig>) -> ExperimentConfig {
    config(model, SynthesisConfig { rate: Some(DEFAULT_RATE), load_factor: None, duration: DEFAULT_DURATION }, policies)
}

/// Poisson load at `load_factor` of the model's short-request capacity.
fn relative_workload(model: &str, load_factor: f64, policies: Vec<PolicyConfig>) -> ExperimentConfig {
    let probe = config(model, SynthesisConfig { rate: None, load_factor: Some(load_factor), duration: 1.0 }, vec![]);
    let (m, c) = probe.resolve().unwrap();
    let cap = estimate_capacity_rps(&CostModel::new(m, c).unwrap(), &LengthModel::azure_like());
    let duration = RELATIVE_REQUESTS / (load_factor * cap);
    config(model, SynthesisConfig { rate: None, load_factor: Some(load_factor), duration }, policies)
}

fn headline_policies() -> Vec<PolicyConfig> {
    let mut v: Vec<PolicyConfig> = PolicyKind::ALL.iter().map(|&p| PolicyConfig::new(p)).collect();
    v.extend(Ablation::ALL.iter().map(|&a| PolicyConfig::new(PolicyKind::PecSched).with_ablation(a)));
    v
}

fn p99(out: &SimOutput) -> f64 {
    out.report.short.p99_delay().unwrap_or(f64::NAN)
}

fn by_label<'a>(outs: &'a [SimOutput], label: &str) -> &'a SimOutput {
    outs.iter().find(|o| o.report.policy == label).unwrap()
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Runs every headline policy on the default workload of each model.
fn default_runs() -> Vec<(String, Vec<SimOutput>, f64)> {
    ModelPreset::NAMES
        .iter()
        .map(|&m| {
            let cfg = default_workload(m, headline_policies());
            let w = build_workload(&cfg).unwrap();
            let mut outs = Vec::new();
            let mut slowest: f64 = 0.0;
            for p in &cfg.policies {
                let t = Instant::now();
                outs.push(simulate(&cfg, &w, p).unwrap());
                slowest = slowest.max(t.elapsed().as_secs_f64());
            }
            (m.to_string(), outs, slowest)
        })
        .collect()
}

fn head_of_line_blocking() -> Verdict {
    let mut ratios = Vec::new();
    let mut detail = Vec::new();
    for m in ModelPreset::NAMES {
        let cfg = relative_workload(m, 0.5, vec![PolicyConfig::new(PolicyKind::Fifo)]);
        let w = build_workload(&cfg).unwrap();
        let mut no_long = w.clone();
        no_long.requests.retain(|r| !r.is_long());
        let base = p99(&simulate(&cfg, &no_long, &cfg.policies[0]).unwrap());
        let with = p99(&simulate(&cfg, &w, &cfg.policies[0]).unwrap());
        ratios.push(with / base);
        detail.push(format!("{m} {:.3e}", with / base));
    }
    Verdict {
        id: 1,
        name: "head-of-line blocking",
        pass: ratios.iter().all(|&r| r >= 2.0) && strictly_increasing(&ratios),
        detail: format!("FIFO p99 / no-long p99 at load 0.5: {}", detail.join(", ")),
    }
}

fn reservation_idle(runs: &[(String, Vec<SimOutput>, f64)]) -> Verdict {
    let res: Vec<f64> = runs.iter().map(|(_, o, _)| by_label(o, "reservation").report.gpu_idle_rate).collect();
    let fifo: Vec<f64> = runs.iter().map(|(_, o, _)| by_label(o, "fifo").report.gpu_idle_rate).collect();
    let monotone = res.windows(2).all(|w| w[0] <= w[1]);
    Verdict {
        id: 2,
        name: "reservation idle rate",
        pass: res.iter().all(|&r| r >= 0.1) && fifo.iter().all(|&f| f <= 0.01) && monotone,
        detail: format!(
            "reservation {:.3?} (>= 0.1: {}, increasing: {monotone}), fifo {:.4?}",
            res,
            res.iter().all(|&r| r >= 0.1),
            fifo
        ),
    }
}

fn priority_starvation() -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    for m in ModelPreset::NAMES {
        let policies: Vec<PolicyConfig> =
            [PolicyKind::Priority, PolicyKind::PecSched, PolicyKind::Fifo].iter().map(|&p| PolicyConfig::new(p)).collect();
        let cfg = relative_workload(m, 0.9, policies);
        let w = build_workload(&cfg).unwrap();
        let s: Vec<f64> =
            cfg.policies.iter().map(|p| simulate(&cfg, &w, p).unwrap().report.starvation_rate_long).collect();
        pass &= s[0] >= 0.9 && s[1] == 0.0 && s[2] == 0.0;
        detail.push(format!("{m} {:.3}/{}/{}", s[0], s[1], s[2]));
    }
    Verdict {
        id: 3,
        name: "priority starvation",
        pass,
        detail: format!("starved priority/pecsched/fifo at load 0.9: {}", detail.join(", ")),
    }
}

fn headline_shape(runs: &[(String, Vec<SimOutput>, f64)]) -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    for (m, outs, _) in runs {
        let pec = by_label(outs, "pecsched");
        let pri = by_label(outs, "priority");
        let fifo = by_label(outs, "fifo");
        let jct = pec.report.long.avg_jct.unwrap() / fifo.report.long.avg_jct.unwrap();
        // PecSched may beat Priority; it must not trail it by more than 10%
        let ok = p99(pec) <= 1.1 * p99(pri) && p99(pec) <= 0.5 * p99(fifo) && jct <= 1.15;
        pass &= ok;
        detail.push(format!(
            "{m} p99 pec {:.4} pri {:.4} fifo {:.1} jct {:.3}",
            p99(pec),
            p99(pri),
            p99(fifo),
            jct
        ));
    }
    Verdict { id: 4, name: "headline result shape", pass, detail: detail.join("; ") }
}

fn preemption_ordering(runs: &[(String, Vec<SimOutput>, f64)]) -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    for (m, outs, _) in runs {
        let n: Vec<u64> = ["pecsched", "pecsched/Dis", "pecsched/CoL", "pecsched/FSP", "pecsched/PE"]
            .iter()
            .map(|l| by_label(outs, l).report.total_preemptions)
            .collect();
        pass &= n[0] < n[1] && n[1] < n[2] && n[2] < n[3] && n[4] == 0;
        detail.push(format!("{m} {}<{}<{}<{} PE={}", n[0], n[1], n[2], n[3], n[4]));
    }
    Verdict { id: 5, name: "preemption ordering", pass, detail: detail.join(", ") }
}

/// Exact per-layer plan cost, scaled by 1e12, as a fraction `num / den`.
struct Oracle {
    d: u128,
    n_heads: u128,
    n_kv: u128,
    dh: u128,
    tp: u128,
    /// TFLOP/s, GB/s, GB/s
    rate: u128,
    intra: u128,
    inter: u128,
    bpe: u128,
    /// ring efficiency p/q
    eff: (u128, u128),
}

impl Oracle {
    fn volumes(&self, s: u128, g: u128, attn_ulysses: bool, mlp_ulysses: bool) -> (u128, u128, u128, u128) {
        let (d, t) = (self.d, self.tp);
        let heads = self.n_heads + self.n_kv;
        let (a_comm, a_comp) = if attn_ulysses {
            let weights = d * heads * self.dh + d * d;
            (2 * s * heads * self.dh * (g - 1) + weights * g * (t - 1) / t, 2 * s * d * heads * self.dh + 4 * (s * g) * (s * g) * d / g + 2 * s * d * d)
        } else {
            (2 * s * d * (t - 1) * g, 2 * s * d * heads * self.dh / t + 4 * (s * t) * (s * t) * d / t + 2 * s * d * d)
        };
        let m_comm = if mlp_ulysses { 8 * d * d * (t - 1) * g / t } else { 2 * s * d * (t - 1) * g };
        (a_comm, a_comp, m_comm, 16 * s * d * d)
    }

    fn cost(&self, s: u128, g: u128, replicas: u128, nodes: u128, attn_ulysses: bool, mlp_ulysses: bool) -> (u128, u128) {
        let (a_comm, a_comp, m_comm, m_comp) = self.volumes(s, g, attn_ulysses, mlp_ulysses);
        let (p, q) = self.eff;
        let den = self.rate * p * self.intra * self.inter;
        let mut num = (a_comp + m_comp) * p * self.intra * self.inter + (a_comm + m_comm) * self.bpe * 1000 * self.rate * p * self.inter;
        let regions = if attn_ulysses { nodes } else { replicas };
        if regions > 1 {
            let width = if attn_ulysses { g } else { self.tp };
            let steps = regions - 1;
            let block = 4 * s * s * width * self.d;
            let ring_bw = if nodes > 1 { self.inter } else { self.intra };
            let kv = 2 * s * self.n_kv * self.dh;
            num += steps * block * q * self.intra * self.inter;
            num += steps * kv * self.bpe * 1000 * self.rate * p * self.intra * self.inter / ring_bw;
        }
        (num, den)
    }
}

fn sp_plan_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut agree = 0;
    let draws = 1000;
    let mut first_miss = String::new();
    for i in 0..draws {
        let dh = [64u64, 128][rng.gen_range(0..2)];
        let n_heads = 8 * rng.gen_range(1..=8u64);
        let n_kv = [1u64, 2, 4, 8][rng.gen_range(0..4)];
        let tp = [1u32, 2, 4, 8][rng.gen_range(0..4)];
        let nodes = rng.gen_range(1..=4u32);
        let per_node = rng.gen_range(1..=8 / tp);
        let model = ModelSpec {
            name: "draw".into(),
            d: n_heads * dh,
            n_heads,
            n_kv_heads: n_kv,
            head_dim: dh,
            n_layers: rng.gen_range(16..=96),
        };
        let eff = [(1u128, 2u128), (3, 5), (4, 5), (1, 1)][rng.gen_range(0..4)];
        let (rate, intra, inter) = (rng.gen_range(50..=400u64), rng.gen_range(50..=900u64), rng.gen_range(10..=400u64));
        let cluster = ClusterSpec {
            num_nodes: 4,
            gpus_per_node: 8,
            tp_size: tp,
            gpu_compute_rate: rate as f64 * 1e12,
            intra_node_bw: intra as f64 * 1e9,
            inter_node_bw: inter as f64 * 1e9,
            bytes_per_element: rng.gen_range(1..=4),
            ring_attention_efficiency: eff.0 as f64 / eff.1 as f64,
            ..Default::default()
        };
        let len = rng.gen_range(1_000..=500_000u64);
        let replicas = nodes * per_node;
        let placement = Placement { replicas, ring_nodes: nodes, gpus_per_node: per_node * tp };
        let cost = CostModel::new(model.clone(), cluster.clone()).unwrap();
        let plan = cost.select_sp_plan(len, placement).unwrap();

        let o = Oracle {
            d: model.d as u128,
            n_heads: n_heads as u128,
            n_kv: n_kv as u128,
            dh: dh as u128,
            tp: tp as u128,
            rate: rate as u128,
            intra: intra as u128,
            inter: inter as u128,
            bpe: cluster.bytes_per_element as u128,
            eff,
        };
        let gpus = (replicas * tp) as u128;
        let s = (len as u128).div_ceil(gpus);
        let g = (per_node * tp) as u128;
        let mut best: Option<((u128, u128), bool, bool)> = None;
        for attn in [false, true] {
            for mlp in [false, true] {
                let c = o.cost(s, g, replicas as u128, nodes as u128, attn, mlp);
                // all candidates share one denominator
                if best.map_or(true, |b| c.0 < b.0 .0) {
                    best = Some((c, attn, mlp));
                }
            }
        }
        let (_, attn_u, mlp_u) = best.unwrap();
        let strat = |u: bool| if u { SpStrategy::UlyssesSp } else { SpStrategy::MegatronSp };
        let shape = StageShape { s: s as u64, tp: tp as u64, g: g as u64 };
        let a = attn_stage_costs(plan.attn_strategy, shape, &model).unwrap();
        let m = mlp_stage_costs(plan.mlp_strategy, shape, &model).unwrap();
        let (ac, ap, mc, mp) = o.volumes(s, g, plan.attn_strategy == SpStrategy::UlyssesSp, plan.mlp_strategy == SpStrategy::UlyssesSp);
        let ok = plan.attn_strategy == strat(attn_u)
            && plan.mlp_strategy == strat(mlp_u)
            && plan.per_gpu_segment_len as u128 == s
            && (a.comm_volume, a.comp_volume, m.comm_volume, m.comp_volume) == (ac, ap, mc, mp);
        if ok {
            agree += 1;
        } else if first_miss.is_empty() {
            first_miss = format!(" first miss at draw {i}");
        }
    }
    Verdict {
        id: 6,
        name: "SP plan oracle",
        pass: agree == draws,
        detail: format!("{agree}/{draws} draws agree{first_miss}"),
    }
}

fn formula_spot_values() -> Verdict {
    let model = ModelSpec { name: "spot".into(), d: 512, n_heads: 4, n_kv_heads: 4, head_dim: 128, n_layers: 1 };
    let shape = |s, tp, g| StageShape { s, tp, g };
    let mega = attn_stage_costs(SpStrategy::MegatronSp, shape(1024, 2, 4), &model).unwrap().comm_volume;
    let t1 = [1u64, 2, 8].iter().all(|&g| {
        attn_stage_costs(SpStrategy::MegatronSp, shape(1024, 1, g), &model).unwrap().comm_volume == 0
            && mlp_stage_costs(SpStrategy::MegatronSp, shape(1024, 1, g), &model).unwrap().comm_volume == 0
    });
    let u11 = attn_stage_costs(SpStrategy::UlyssesSp, shape(1024, 1, 1), &model).unwrap().comm_volume == 0
        && mlp_stage_costs(SpStrategy::UlyssesSp, shape(1024, 1, 1), &model).unwrap().comm_volume == 0;
    Verdict {
        id: 7,
        name: "formula spot values",
        pass: mega == 4_194_304 && t1 && u11,
        detail: format!("megatron attn comm {mega}, T=1 megatron zero {t1}, T=G=1 ulysses zero {u11}"),
    }
}

fn work_conservation(runs: &[(String, Vec<SimOutput>, f64)]) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut preempted = 0usize;
    for (_, outs, _) in runs {
        for o in outs {
            for r in o.records.iter().filter(|r| r.finish_time.is_some()) {
                worst = worst.max((r.charged_prefill_compute - r.expected_prefill_compute).abs());
                checked += 1;
                preempted += (r.preemption_count > 0) as usize;
            }
        }
    }
    Verdict {
        id: 8,
        name: "work conservation",
        pass: worst <= 1e-9,
        detail: format!("max |charged - expected| {worst:.3e} s over {checked} requests ({preempted} preempted)"),
    }
}

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bundles = Vec::new();
    for dir in &dirs {
        let mut cfg = default_workload("phi3-14b", PolicyKind::ALL.iter().map(|&p| PolicyConfig::new(p)).collect());
        cfg.out_dir = dir.path().to_path_buf();
        let res = run_experiment(&cfg).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = res
            .files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        files.sort();
        bundles.push(files);
    }
    Verdict {
        id: 9,
        name: "determinism",
        pass: bundles[0] == bundles[1] && bundles[0].len() == 5,
        detail: format!("{} files compared byte for byte", bundles[0].len()),
    }
}

fn checkpoint_ratio() -> Verdict {
    let ratios: Vec<(String, f64)> = ModelPreset::all().iter().map(|p| (p.model.name.clone(), checkpoint_kv_ratio(&p.model))).collect();
    Verdict {
        id: 10,
        name: "checkpoint size",
        pass: ratios.iter().all(|(_, r)| *r <= 0.05),
        detail: ratios.iter().map(|(n, r)| format!("{n} {r:.4}")).collect::<Vec<_>>().join(", "),
    }
}

fn scalability() -> Verdict {
    let gpus = [8u32, 64, 512, 4096];
    let mut pass = true;
    let mut detail = Vec::new();
    for m in ModelPreset::NAMES {
        let cfg = default_workload(m, vec![PolicyConfig::new(PolicyKind::PecSched)]);
        let rows = run_scalability_sweep(&cfg, &gpus).unwrap();
        let ratio: Vec<f64> = rows.iter().map(|r| r.p99_overhead_ratio.unwrap_or(0.0)).collect();
        let linear = rows.iter().zip(&ratio).all(|(r, &x)| x <= ratio[0] * (r.gpus as f64 / gpus[0] as f64) * (1.0 + 1e-9));
        pass &= linear && ratio[3] < 0.1;
        detail.push(format!("{m} [{}]", ratio.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" ")));
    }
    Verdict { id: 11, name: "scalability shape", pass, detail: format!("p99 overhead ratio at {gpus:?} GPUs: {}", detail.join(", ")) }
}

#[test]
fn acceptance() {
    let t = Instant::now();
    let runs = default_runs();
    let slowest = runs.iter().map(|r| r.2).fold(0.0, f64::max);
    let mut verdicts = vec![
        head_of_line_blocking(),
        reservation_idle(&runs),
        priority_starvation(),
        headline_shape(&runs),
        preemption_ordering(&runs),
        sp_plan_oracle(),
        formula_spot_values(),
        work_conservation(&runs),
        determinism(),
        checkpoint_ratio(),
        scalability(),
    ];
    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!("{} {:>2} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
    }
    println!("slowest single run {slowest:.1} s, suite {:.0} s", t.elapsed().as_secs_f64());
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
