use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use erasure_harness::config::{RunConfig, SCHEMA};
use erasure_harness::error::HarnessError;
use erasure_harness::pipeline::{run_pipeline, stage_ckpt, Lab, Stage};
use erasure_harness::report::{aggregate, read_rows, render};
use erasure_harness::sweep::{run_sweep, Axis};
use erasure_lab::fingerprint::Scheme;
use erasure_lab::lora;

#[derive(Parser)]
#[command(name = "erasure-lab", version, about = "Embed, erase and measure backdoor fingerprints in a tiny language model")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: the configured output_dir, else runs/seed<N>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing artifacts. Nothing is ever deleted.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the clean base model.
    TrainBase,
    /// Embed one scheme's fingerprint into the base model.
    Embed {
        #[arg(long)]
        scheme: Scheme,
    },
    /// Erase phase on the fingerprinted model.
    Erase {
        #[arg(long)]
        scheme: Scheme,
    },
    /// Recover phase on the erased model.
    Recover {
        #[arg(long)]
        scheme: Scheme,
    },
    /// Prints the verification verdict; exits 1 when it is false.
    Verify {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long, value_enum, default_value = "recovered")]
        stage: StageArg,
    },
    /// Train the erasure adapter on the base model, optionally reporting it
    /// merged into one fingerprinted model.
    Transfer {
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// Run one baseline against a fingerprinted model.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        scheme: Scheme,
    },
    /// Print FSR, PPL and ACC of a stored model.
    Eval {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long, value_enum)]
        stage: EvalStage,
    },
    /// Full pipeline once per value of one axis.
    Sweep {
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Aggregate report.csv or sweep.csv files by phase and scheme.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Every stage for every configured scheme.
    Run,
    /// Print the configuration JSON schema.
    Schema,
    /// Print the resolved configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Fingerprinted,
    Erased,
    Recovered,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Fingerprinted => Stage::Fingerprinted,
            StageArg::Erased => Stage::Erased,
            StageArg::Recovered => Stage::Recovered,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalStage {
    Base,
    Fingerprinted,
    Erased,
    Recovered,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Finetune,
    Prune,
    Merge,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(format!("seed{}", cfg.seed)))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Runs the command; `Ok(false)` means it completed but reported a failure.
fn dispatch(cli: &Cli) -> anyhow::Result<bool> {
    if let Cmd::Schema = cli.cmd {
        print!("{SCHEMA}");
        return Ok(true);
    }
    if let Cmd::Report { files } = &cli.cmd {
        let mut rows = Vec::new();
        for f in files {
            rows.extend(read_rows(f).with_context(|| format!("reading {}", f.display()))?);
        }
        print!("{}", render(&aggregate(&rows)));
        return Ok(true);
    }
    let cfg = resolve_config(cli)?;
    let out = out_dir(cli, &cfg);
    match &cli.cmd {
        Cmd::Config => print_json(&cfg)?,
        Cmd::Run => {
            let o = run_pipeline(&cfg, &out, cli.force)?;
            for v in &o.violations {
                let scheme = v.scheme.map(|s| format!("{s}: ")).unwrap_or_default();
                eprintln!("violation in phase `{}`: {scheme}{}", v.phase, v.message);
            }
            println!("wrote {}", out.display());
            return Ok(o.violations.is_empty());
        }
        Cmd::Sweep { axis, values } => {
            let outcomes = run_sweep(&cfg, *axis, values, &out, cli.force)?;
            let failed: usize = outcomes.iter().map(|o| o.violations.len()).sum();
            println!("wrote {} runs to {}", outcomes.len(), out.display());
            if failed > 0 {
                eprintln!("{failed} violations; see each run's summary.json");
            }
            return Ok(failed == 0);
        }
        cmd => {
            let lab = Lab::open(cfg, &out, cli.force)?;
            return stage(&lab, cmd);
        }
    }
    Ok(true)
}

fn stage(lab: &Lab, cmd: &Cmd) -> anyhow::Result<bool> {
    use erasure_harness::pipeline::BASE_CKPT;
    let fingerprinted = |s| lab.load_model(&stage_ckpt(s, Stage::Fingerprinted));
    match *cmd {
        Cmd::TrainBase => {
            let base = lab.train_base()?;
            println!("base model {}", erasure_lab::checkpoint::digest(base.params())?);
        }
        Cmd::Embed { scheme } => {
            let (_, epochs) = lab.embed(&lab.load_model(BASE_CKPT)?, scheme)?;
            println!("{scheme} embedded after {epochs} epochs");
        }
        Cmd::Erase { scheme } => {
            let (_, r) = lab.erase(&fingerprinted(scheme)?, scheme)?;
            print_json(&r)?;
            return Ok(r.fully_erased);
        }
        Cmd::Recover { scheme } => {
            let erased = lab.load_model(&stage_ckpt(scheme, Stage::Erased))?;
            print_json(&lab.recover(&erased, scheme)?.1)?;
        }
        Cmd::Verify { scheme, stage } => {
            let m = lab.load_model(&stage_ckpt(scheme, stage.into()))?;
            let ok = lab.verify(&m, &lab.load_model(BASE_CKPT)?, scheme)?;
            println!("{ok}");
            return Ok(ok);
        }
        Cmd::Transfer { scheme } => {
            let a = lab.transfer_adapter(&lab.load_model(BASE_CKPT)?)?;
            if let Some(s) = scheme {
                print_json(&lab.evaluate(&lora::merge(&fingerprinted(s)?, &a)?, s, "transferred")?)?;
            }
        }
        Cmd::Baseline { kind, scheme } => {
            let fp = fingerprinted(scheme)?;
            match kind {
                BaselineKind::Finetune => print_json(&lab.baseline_finetune(&fp, scheme)?)?,
                BaselineKind::Prune => print_json(&lab.baseline_prune(&fp, scheme)?)?,
                BaselineKind::Merge => {
                    let expert = lab.train_expert(&lab.load_model(BASE_CKPT)?)?;
                    print_json(&lab.baseline_merge(&fp, &expert, scheme)?)?
                }
            }
        }
        Cmd::Eval { scheme, stage } => {
            let (rel, phase) = match stage {
                EvalStage::Base => (BASE_CKPT.to_string(), "base"),
                EvalStage::Fingerprinted => (stage_ckpt(scheme, Stage::Fingerprinted), "fingerprinted"),
                EvalStage::Erased => (stage_ckpt(scheme, Stage::Erased), "erased"),
                EvalStage::Recovered => (stage_ckpt(scheme, Stage::Recovered), "recovered"),
            };
            print_json(&lab.evaluate(&lab.load_model(&rel)?, scheme, phase)?)?;
        }
        Cmd::Run | Cmd::Sweep { .. } | Cmd::Report { .. } | Cmd::Schema | Cmd::Config => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
