use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slicequant_bench::checkpoint::Checkpoint;
use slicequant_bench::commands::{self, default_checkpoint};
use slicequant_bench::config::RunConfig;
use slicequant_bench::BenchError;

#[derive(Parser)]
#[command(name = "slicequant-bench", about = "Toy-scale harness for residual bit-slice quantization")]
struct Cli {
    /// Run seed; falls back to $MOBI_SEED, then to the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Calibrate the toy model and write a checkpoint.
    Calibrate { config: Option<PathBuf> },
    /// Evaluate a checkpoint at several average bit budgets.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        targets: Vec<f64>,
        /// Activation ratios of the routed slices, converted to budgets.
        #[arg(long, num_args = 1..)]
        ratios: Vec<f64>,
        /// Fit thresholds on this many held-out samples per calibration sample.
        #[arg(long)]
        calib_split: Option<f64>,
    },
    /// Calibrate once per training budget and tabulate the results.
    Sweep {
        config: Option<PathBuf>,
        #[arg(long, num_args = 1.., default_values_t = [2.5, 3.0, 4.0, 5.0])]
        b_targets: Vec<f64>,
    },
    /// Pack a checkpoint into bit planes and report the cost model.
    Pack {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck,
    /// Outlier-migration overlap for static and routed gating.
    Migration {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        bits_a: Option<f64>,
        #[arg(long)]
        bits_b: Option<f64>,
        #[arg(long)]
        top_frac: Option<f64>,
        #[arg(long)]
        calib_split: Option<f64>,
    },
    /// Print a checkpoint summary.
    Report {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn env_seed() -> Result<Option<u64>, BenchError> {
    match std::env::var("MOBI_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            BenchError::Config(slicequant_bench::config::ConfigError {
                path: "MOBI_SEED".into(),
                message: format!("not an unsigned integer: `{v}`"),
            })
        }),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>, cli: &Cli) -> Result<RunConfig, BenchError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed.map(Some).unwrap_or(env_seed()?) {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn load_ckpt(ckpt: &Option<PathBuf>, cli: &Cli) -> Result<(Checkpoint, PathBuf), BenchError> {
    let path = match (ckpt, &cli.out) {
        (Some(p), _) => p.clone(),
        (None, Some(o)) => default_checkpoint(o),
        (None, None) => default_checkpoint(&RunConfig::default().out_dir),
    };
    let ckpt = Checkpoint::load(&path)?;
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok((ckpt, out))
}

fn run(cli: &Cli) -> Result<(), BenchError> {
    match &cli.cmd {
        Cmd::Calibrate { config } => {
            let cfg = load_config(config.as_deref(), cli)?;
            for w in commands::run_calibrate(&cfg)? {
                eprintln!("warning: {w}");
            }
        }
        Cmd::Eval {
            ckpt,
            targets,
            ratios,
            calib_split,
        } => {
            let (mut ck, out) = load_ckpt(ckpt, cli)?;
            if let Some(s) = calib_split {
                ck.config.calib.split = *s;
                ck.config.validate()?;
            }
            let targets = if targets.is_empty() && ratios.is_empty() {
                commands::eval_targets(
                    &ck.config,
                    &ck.config.eval.target_bit_eval,
                    &ck.config.eval.target_activation_ratio_eval,
                )
            } else {
                commands::eval_targets(&ck.config, targets, ratios)
            };
            let sweep = commands::run_eval(&ck, &targets, &out)?;
            for n in &sweep.notes {
                eprintln!("warning: {n}");
            }
        }
        Cmd::Sweep { config, b_targets } => {
            let cfg = load_config(config.as_deref(), cli)?;
            commands::run_train_sweep(&cfg, b_targets)?;
        }
        Cmd::Pack { ckpt } => {
            let (ck, out) = load_ckpt(ckpt, cli)?;
            commands::run_pack(&ck, &out)?;
        }
        Cmd::GradCheck => {
            let seed = cli.seed.map(Some).unwrap_or(env_seed()?).unwrap_or(0);
            let r = commands::run_grad_check(seed)?;
            println!(
                "{{\"router_max_rel\":{},\"clip_max_rel\":{},\"router_tol\":{},\"clip_tol\":{},\"passed\":{}}}",
                r.router_max_rel,
                r.clip_max_rel,
                r.router_tol,
                r.clip_tol,
                r.passed()
            );
            if !r.passed() {
                return Err(BenchError::Check("gradient check above tolerance".into()));
            }
        }
        Cmd::Migration {
            ckpt,
            bits_a,
            bits_b,
            top_frac,
            calib_split,
        } => {
            let (mut ck, out) = load_ckpt(ckpt, cli)?;
            if let Some(s) = calib_split {
                ck.config.calib.split = *s;
                ck.config.validate()?;
            }
            let e = &ck.config.eval;
            let rep = commands::run_migration(
                &ck,
                bits_a.unwrap_or(e.migration_bits[0]),
                bits_b.unwrap_or(e.migration_bits[1]),
                top_frac.unwrap_or(e.top_frac),
                &out,
            )?;
            println!("static_overlap={} routed_overlap={}", rep.static_overlap, rep.routed_overlap);
        }
        Cmd::Report { ckpt } => {
            let (ck, _) = load_ckpt(ckpt, cli)?;
            print!("{}", commands::describe(&ck));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let field = e.field().map(|f| format!(" field={f}")).unwrap_or_default();
            eprintln!("error: kind={}{field} message={:?}", e.kind(), e.to_string());
            ExitCode::from(1)
        }
    }
}
