use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pecsched_core::cluster::ModelPreset;
use pecsched_core::costmodel::Placement;
use pecsched_core::experiment::{
    run_ablations, run_experiment, run_scalability_sweep, sweep_csv, write_bundle, ExperimentConfig, ExperimentResult,
};
use pecsched_core::metrics::figure_tables;
use pecsched_core::{Ablation, CostModel, PolicyConfig, PolicyKind, SimError};

#[derive(Parser)]
#[command(name = "pecsched", version, about = "Simulate scheduling of mixed short and long LLM requests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured policies on one workload.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Replaces the configured policy list; repeatable.
        #[arg(long = "policy")]
        policies: Vec<PolicyKind>,
        /// Applied to every pecsched run; repeatable.
        #[arg(long = "ablate")]
        ablations: Vec<Ablation>,
        /// Also write one CSV per metric.
        #[arg(long)]
        tables: bool,
    },
    /// PecSched and its four single-ablation variants.
    Ablations {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Scheduling overhead versus cluster size.
    Sweep {
        /// Defaults to pecsched on `--model` when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "mistral-7b")]
        model: String,
        #[arg(long, value_delimiter = ',', default_value = "8,64,512,4096")]
        gpus: Vec<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cost model utilities.
    Costmodel {
        #[command(subcommand)]
        command: CostCommand,
    },
}

#[derive(Subcommand)]
enum CostCommand {
    /// Print the four sequence-parallel plans for one long prefill.
    Explain {
        #[arg(long)]
        seq_len: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "llama3.1-70b")]
        model: String,
        /// Replicas to spread over; defaults to the fewest that hold the input.
        #[arg(long)]
        replicas: Option<u32>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> pecsched_core::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        override_run(&mut cfg, self.out.clone(), self.seed);
        Ok(cfg)
    }
}

fn override_run(cfg: &mut ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) {
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
}

fn preset_config(model: &str) -> pecsched_core::Result<ExperimentConfig> {
    if ModelPreset::by_name(model).is_none() {
        return Err(SimError::Config(format!(
            "unknown model {model}; expected one of {}",
            ModelPreset::NAMES.join(", ")
        )));
    }
    // the sweep synthesizes its own load; explain ignores the workload
    ExperimentConfig::parse(&format!(
        "model = \"{model}\"\npolicies = [{{ policy = \"pecsched\" }}]\n[workload.synthesis]\nrate = 1.0\nduration = 1.0\n"
    ))
}

fn print_summary(res: &ExperimentResult) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{} requests ({} long), workload {}",
        res.manifest.requests,
        res.manifest.long_requests,
        &res.manifest.workload_sha256[..12]
    );
    println!("{:<16} {:>12} {:>14} {:>8} {:>8} {:>10}", "policy", "p99 short s", "avg long jct s", "idle", "starved", "preempts");
    for r in &res.reports {
        println!(
            "{:<16} {:>12} {:>14} {:>8.4} {:>8.4} {:>10}",
            r.policy,
            fmt(r.short.p99_delay()),
            fmt(r.long.avg_jct),
            r.gpu_idle_rate,
            r.starvation_rate_long,
            r.total_preemptions
        );
    }
    for f in &res.files {
        println!("wrote {}", f.display());
    }
}

fn execute(cli: Cli) -> pecsched_core::Result<()> {
    match cli.command {
        Command::Simulate { run, policies, ablations, tables } => {
            let mut cfg = run.load()?;
            if !policies.is_empty() {
                cfg.policies = policies.into_iter().map(PolicyConfig::new).collect();
            }
            for p in cfg.policies.iter_mut().filter(|p| p.policy == PolicyKind::PecSched) {
                p.ablations.extend(ablations.iter().copied());
            }
            let res = run_experiment(&cfg)?;
            print_summary(&res);
            if tables {
                let files: Vec<(String, Vec<u8>)> =
                    figure_tables(&res.reports).into_iter().map(|(n, t)| (n, t.into_bytes())).collect();
                for f in write_bundle(&cfg.out_dir, &files)? {
                    println!("wrote {}", f.display());
                }
            }
        }
        Command::Ablations { run } => {
            let res = run_ablations(&run.load()?)?;
            print_summary(&res);
        }
        Command::Sweep { config, model, gpus, out, seed } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(path)?,
                None => preset_config(&model)?,
            };
            override_run(&mut cfg, out, seed);
            let rows = run_scalability_sweep(&cfg, &gpus)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            for f in write_bundle(&cfg.out_dir, &[("sweep.csv".to_string(), csv.into_bytes())])? {
                println!("wrote {}", f.display());
            }
        }
        Command::Costmodel { command: CostCommand::Explain { seq_len, config, model, replicas } } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(path)?,
                None => preset_config(&model)?,
            };
            let (model, cluster) = cfg.resolve()?;
            let cost = CostModel::new(model, cluster)?;
            explain(&cost, seq_len, replicas)?;
        }
    }
    Ok(())
}

fn explain(cost: &CostModel, seq_len: u64, replicas: Option<u32>) -> pecsched_core::Result<()> {
    let c = &cost.cluster;
    let replicas = replicas.unwrap_or_else(|| c.replicas_needed(seq_len));
    if replicas == 0 || replicas > c.total_replicas() {
        return Err(SimError::Config(format!("{replicas} replicas requested, cluster has {}", c.total_replicas())));
    }
    let per_node = c.replicas_per_node().min(replicas);
    let placement = Placement {
        replicas,
        ring_nodes: replicas.div_ceil(c.replicas_per_node()),
        gpus_per_node: per_node * c.tp_size,
    };
    let table = cost.plan_table(seq_len, placement)?;
    let best = cost.select_sp_plan(seq_len, placement)?;
    println!(
        "{}: {seq_len} tokens on {replicas} replicas (TP {}, {} nodes, {} GPUs per node)",
        cost.model.name, c.tp_size, placement.ring_nodes, placement.gpus_per_node
    );
    println!("segment per GPU: {} tokens", best.per_gpu_segment_len);
    println!("{:<10} {:<10} {:>12} {:>12} {:>12}", "attention", "mlp", "comm s", "comp s", "total s");
    for p in &table {
        let mark = if p.attn_strategy == best.attn_strategy && p.mlp_strategy == best.mlp_strategy { " *" } else { "" };
        println!(
            "{:<10} {:<10} {:>12.4} {:>12.4} {:>12.4}{mark}",
            p.attn_strategy.to_string(),
            p.mlp_strategy.to_string(),
            p.est_comm_time,
            p.est_comp_time,
            p.est_total_time
        );
    }
    println!("single-replica prefill estimate: {:.4} s", cost.prefill_time(seq_len));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
