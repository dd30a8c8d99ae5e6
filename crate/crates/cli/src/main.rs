mod config;
mod error;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use laplab_core::attacks::{self, AttackConfig};
use laplab_core::bounds;
use laplab_core::diagnostics::{self, PruneSpec, Selection};
use laplab_core::repro::{self, ReproConfig};
use laplab_core::trainer::{self, MetricsRecord};
use laplab_core::Network;
use serde::Serialize;
use serde_json::json;

use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "laplab", version, about = "Adversarial training with layer-aware weight perturbation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training and data seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the run directory is `<out>/<run_name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes metrics.jsonl, history.json and final.lapc.
    Train(Common),
    /// Robust accuracy of a checkpoint under the configured attack.
    AttackEval(WithCheckpoint),
    /// Loss-landscape grids (CSV) around a checkpoint.
    Landscape {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Ordinals to probe in weight space.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize])]
        layers: Vec<usize>,
        /// Also probe input space.
        #[arg(long)]
        input: bool,
        /// Weight-space half width (relative change).
        #[arg(long, default_value_t = 1.0)]
        half_width: f64,
        /// Input-space half width.
        #[arg(long, default_value_t = 32.0 / 255.0)]
        input_half_width: f64,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        /// Test examples in the probe batch.
        #[arg(long, default_value_t = 128)]
        samples: usize,
    },
    /// Singular spectra of every layer (CSV).
    Svd(WithCheckpoint),
    /// Paradox report before and after removing weights.
    PruneEval {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long, value_parser = parse_selection, default_value = "largest")]
        selection: Selection,
        #[arg(long, default_value_t = 0.1)]
        rate: f64,
        /// Inclusive ordinal range, e.g. `1-2`.
        #[arg(long, value_parser = parse_range, default_value = "1-2")]
        ordinals: (u64, u64),
    },
    /// PAC-Bayes bound for the configured schedule.
    Bound {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long, default_value_t = 8)]
        tries: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Canned catastrophic-overfitting reproduction with verdicts.
    CoRepro {
        /// Seed or inclusive range, e.g. `1..3`.
        #[arg(long, value_parser = parse_range, default_value = "1..3")]
        seed: (u64, u64),
        #[arg(long, default_value = "runs/co-repro")]
        out: PathBuf,
        /// Also run PGD-50-10 on the final weights.
        #[arg(long)]
        final_eval: bool,
        #[arg(long)]
        quiet: bool,
    },
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let parts: Vec<&str> = if s.contains("..") { s.splitn(2, "..").collect() } else { s.splitn(2, '-').collect() };
    let num = |p: &str| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}"));
    let (lo, hi) = match parts.as_slice() {
        [one] => (num(one)?, num(one)?),
        [a, b] => (num(a)?, num(b.trim_start_matches('='))?),
        _ => unreachable!(),
    };
    if lo > hi {
        return Err(format!("empty range {s}"));
    }
    Ok((lo, hi))
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown selection {s:?}; use random, smallest or largest"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// `LAPLAB_THREADS` caps worker threads; 0 or unset means automatic.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LAPLAB_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Config(format!("LAPLAB_THREADS must be an integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(format!("LAPLAB_THREADS: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(c) => train(&c),
        Command::AttackEval(a) => attack_eval(&a),
        Command::Landscape { args, layers, input, half_width, input_half_width, resolution, samples } => {
            landscape(&args, &layers, input, half_width, input_half_width, resolution, samples)
        }
        Command::Svd(a) => svd(&a),
        Command::PruneEval { args, selection, rate, ordinals } => prune_eval(&args, selection, rate, ordinals),
        Command::Bound { args, tries, delta } => bound(&args, tries, delta),
        Command::CoRepro { seed, out, final_eval, quiet } => co_repro(seed, &out, final_eval, quiet),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    dir: PathBuf,
    seed: u64,
    quiet: bool,
}

impl Ctx {
    fn new(c: &Common, command: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::load(&c.config)?;
        if let Some(s) = c.seed {
            cfg.reseed(s);
        }
        let dir = cfg.run_dir(c.out.as_deref());
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let ctx = Ctx { seed: cfg.train.seed, cfg, dir, quiet: c.quiet };
        ctx.write_json(&format!("manifest.{command}.json"), &manifest(command, &ctx.cfg))?;
        Ok(ctx)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        write_json(&self.path(name), value)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(CliError::io(&p))?;
        Ok(p)
    }

    fn load_net(&self, checkpoint: &Path) -> Result<Network, CliError> {
        Ok(Network::load_checkpoint(checkpoint, &self.cfg.model)?)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(CliError::io(path))?;
    Ok(path.to_path_buf())
}

fn manifest(command: &str, cfg: &impl Serialize) -> serde_json::Value {
    json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": cfg,
        "laplab_version": env!("CARGO_PKG_VERSION"),
        "parallel": laplab_core::par::is_parallel(),
        "threads": std::env::var("LAPLAB_THREADS").ok(),
    })
}

fn train(c: &Common) -> Result<(), CliError> {
    let ctx = Ctx::new(c, "train")?;
    let cfg = &ctx.cfg;
    let (train_data, test_data) = cfg.load_data()?;
    let mut net = Network::build(&cfg.model, ctx.seed)?;
    let schedule = cfg.schedule_for(net.num_layers())?;
    let metrics_path = ctx.path("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(CliError::io(&metrics_path))?);
    let mut last: Option<MetricsRecord> = None;
    let mut history = trainer::train_with(&mut net, &train_data, &test_data, &cfg.train, &cfg.attack, &schedule, |r, _| {
        ctx.say(format!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  nat {:.3}  fgsm {:.3}  pgd {:.3}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.nat_acc, r.fgsm_acc, r.pgd_acc, r.wall_s
        ));
        if let Some(prev) = last.replace(r.clone()) {
            writeln!(metrics, "{}", serde_json::to_string(&prev).expect("serializable"))?;
            metrics.flush()?;
        }
        Ok(())
    })?;
    let mut tail = serde_json::to_value(last.expect("at least one epoch")).expect("serializable");
    if let Some(f) = &history.final_eval {
        tail["pgd50_10_acc"] = json!(f.accuracy);
        ctx.say(format!("final robust accuracy {:.3}", f.accuracy));
    }
    writeln!(metrics, "{tail}").and_then(|_| metrics.flush()).map_err(CliError::io(&metrics_path))?;
    let ckpt = ctx.path("final.lapc");
    net.save_checkpoint(&ckpt)?;
    history.checkpoint = Some(ckpt.display().to_string());
    if let Some(co) = &history.co_event {
        ctx.say(format!("catastrophic overfitting at epoch {} (peak PGD accuracy {:.3})", co.epoch, co.peak_pgd_acc));
    }
    ctx.write_json("history.json", &history)?;
    Ok(())
}

fn attack_eval(a: &WithCheckpoint) -> Result<(), CliError> {
    let ctx = Ctx::new(&a.common, "attack-eval")?;
    let (_, test) = ctx.cfg.load_data()?;
    let net = ctx.load_net(&a.checkpoint)?;
    let natural = attacks::evaluate(&net, &test, &AttackConfig::none(), ctx.seed)?;
    let accuracy = attacks::evaluate(&net, &test, &ctx.cfg.attack, ctx.seed)?;
    let report = json!({ "attack": ctx.cfg.attack, "accuracy": accuracy, "natural_accuracy": natural, "n": test.len() });
    println!("{report}");
    ctx.write_json("attack_eval.json", &report)?;
    Ok(())
}

fn landscape(
    a: &WithCheckpoint,
    layers: &[usize],
    input: bool,
    half_width: f64,
    input_half_width: f64,
    resolution: usize,
    samples: usize,
) -> Result<(), CliError> {
    let ctx = Ctx::new(&a.common, "landscape")?;
    let (_, test) = ctx.cfg.load_data()?;
    let net = ctx.load_net(&a.checkpoint)?;
    let probe = test.head(samples.max(1));
    let mut summary = Vec::new();
    for &l in layers {
        let g = diagnostics::landscape_layer(&net, &probe.images, &probe.labels, l, half_width, resolution, ctx.seed)?;
        let p = ctx.write_text(&format!("landscape_layer{l}.csv"), &g.to_csv())?;
        ctx.say(format!("ordinal {l}: mean |Δloss| {:.4} -> {}", g.sharpness(), p.display()));
        summary.push(json!({ "ordinal": l, "sharpness": g.sharpness(), "base_loss": g.base_loss, "csv": p }));
    }
    if input {
        let g = diagnostics::landscape_input(&net, &probe.images, &probe.labels, input_half_width, resolution, ctx.seed)?;
        let p = ctx.write_text("landscape_input.csv", &g.to_csv())?;
        summary.push(json!({ "input": true, "sharpness": g.sharpness(), "base_loss": g.base_loss, "csv": p }));
    }
    ctx.write_json("landscape.json", &summary)?;
    Ok(())
}

fn svd(a: &WithCheckpoint) -> Result<(), CliError> {
    let ctx = Ctx::new(&a.common, "svd")?;
    let net = ctx.load_net(&a.checkpoint)?;
    let reports = (1..=net.num_layers()).map(|l| diagnostics::singular_spectrum(&net, l)).collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        ctx.say(format!("ordinal {}: sigma_max {:.4}  variance {:.4}", r.ordinal, r.singular_values[0], r.variance));
    }
    ctx.write_text("spectra.csv", &diagnostics::spectra_csv(&reports))?;
    ctx.write_json("spectra.json", &reports)?;
    Ok(())
}

fn prune_eval(a: &WithCheckpoint, selection: Selection, rate: f64, (lo, hi): (u64, u64)) -> Result<(), CliError> {
    let ctx = Ctx::new(&a.common, "prune-eval")?;
    let (_, test) = ctx.cfg.load_data()?;
    let net = ctx.load_net(&a.checkpoint)?;
    let spec = PruneSpec::new(lo as usize, hi as usize, selection, rate, ctx.seed);
    spec.validate(net.num_layers()).map_err(|e| CliError::Config(e.to_string()))?;
    let eps = ctx.cfg.attack.epsilon;
    let before = diagnostics::paradox_report(&net, &test, eps, ctx.seed)?;
    let after = diagnostics::paradox_report(&diagnostics::prune(&net, &spec)?, &test, eps, ctx.seed)?;
    let report = json!({ "prune": spec, "epsilon": eps, "before": before, "after": after });
    println!("{report}");
    ctx.write_json("prune_eval.json", &report)?;
    Ok(())
}

fn bound(a: &WithCheckpoint, tries: usize, delta: f64) -> Result<(), CliError> {
    let ctx = Ctx::new(&a.common, "bound")?;
    let (train_data, _) = ctx.cfg.load_data()?;
    let net = ctx.load_net(&a.checkpoint)?;
    let schedule = ctx.cfg.schedule_for(net.num_layers())?;
    let gap = bounds::measure_worst_gap(&net, &train_data, &schedule, tries, ctx.seed)?;
    let report = bounds::lap_bound(gap.base.zero_one, gap.zero_one_gap, &schedule, train_data.len(), delta)?;
    let out = json!({ "bound": report, "cross_entropy": gap.base.cross_entropy, "cross_entropy_gap": gap.cross_entropy_gap, "lambdas": schedule.lambdas });
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    ctx.write_json("bound.json", &out)?;
    Ok(())
}

fn co_repro((lo, hi): (u64, u64), out: &Path, final_eval: bool, quiet: bool) -> Result<(), CliError> {
    let mut cfg = ReproConfig::fixture();
    cfg.final_eval |= final_eval;
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    write_json(&out.join("manifest.json"), &manifest("co-repro", &json!({ "repro": cfg, "seeds": [lo, hi] })))?;
    let mut runs = Vec::new();
    for seed in lo..=hi {
        let run = repro::run_seed(&cfg, seed, |m| {
            if !quiet {
                eprintln!("[seed {seed}] {m}");
            }
        })?;
        let dir = out.join(format!("seed{seed}"));
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        for (name, h) in [("vfgsm", &run.vfgsm), ("lap", &run.lap)] {
            let lines: String = h.records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
            let p = dir.join(format!("{name}_metrics.jsonl"));
            fs::write(&p, lines).map_err(CliError::io(&p))?;
            write_json(&dir.join(format!("{name}_history.json")), h)?;
        }
        run.vfgsm_final.save_checkpoint(dir.join("vfgsm_final.lapc"))?;
        run.lap_final.save_checkpoint(dir.join("lap_final.lapc"))?;
        if let Some(co) = &run.co {
            co.pre.save_checkpoint(dir.join("pre_co.lapc"))?;
            co.post.save_checkpoint(dir.join("post_co.lapc"))?;
        }
        runs.push(run);
    }
    let verdicts = repro::verdicts(&cfg, &runs)?;
    for v in &verdicts {
        println!("{} {} {}", v.id, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    write_json(&out.join("verdicts.json"), &verdicts)?;
    Ok(())
}
