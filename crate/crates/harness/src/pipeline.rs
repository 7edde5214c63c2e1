//! Experiment stages and the end-to-end pipeline.
//!
//! Run directory layout:
//!
//! ```text
//! config.json                      resolved configuration
//! checkpoints/base.merc
//! checkpoints/transfer.mera        erasure adapter trained on the base
//! checkpoints/<scheme>/{fingerprinted,erased,recovered}.merc
//! specs/<scheme>.json
//! traces/<scheme>.json             erase/recover traces and verify verdict
//! report.csv                       one row per (phase, scheme)
//! summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use erasure_lab::baselines::{self, Strategy};
use erasure_lab::checkpoint::{self, Kind};
use erasure_lab::fingerprint::{embed, make_spec, EmbedConfig, FingerprintSpec, Scheme};
use erasure_lab::lora::{self, LoraAdapter};
use erasure_lab::meraser::{
    build_clean, build_mismatched, erase, recover, train_transfer_adapter, verify, EraseConfig, EraseReport,
    RecoverConfig, TransferConfig,
};
use erasure_lab::metrics::{evaluate, write_csv, MetricsReport};
use erasure_lab::ntk::{likelihood_transfer, residual_experiment, ResidualSummary};
use erasure_lab::tinylm::{
    generate_corpus, greedy_decode, train, ClassificationProbes, DialogueDataset, Grammar, Pair, TinyLM,
    TrainConfig,
};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const BASE_CKPT: &str = "checkpoints/base.merc";
pub const TRANSFER_CKPT: &str = "checkpoints/transfer.mera";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Per-phase artifact stages of one scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fingerprinted,
    Erased,
    Recovered,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Fingerprinted => "fingerprinted",
            Stage::Erased => "erased",
            Stage::Recovered => "recovered",
        }
    }
}

pub fn stage_ckpt(scheme: Scheme, stage: Stage) -> String {
    format!("checkpoints/{scheme}/{}.merc", stage.as_str())
}

/// Every dataset a run uses, regenerated from the configuration.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub corpus: DialogueDataset,
    pub heldout: DialogueDataset,
    pub pool: DialogueDataset,
    pub mismatched: DialogueDataset,
    pub clean: DialogueDataset,
    pub probes: ClassificationProbes,
}

impl Datasets {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let m = &cfg.model;
        let corpus = generate_corpus(m, d.base_pairs, cfg.data_seed(1))?;
        let heldout = generate_corpus(m, d.heldout_pairs, cfg.data_seed(2))?;
        let pool = generate_corpus(m, d.pool_pairs, cfg.data_seed(3))?;
        let mismatched = build_mismatched(&pool, d.mismatched_n, cfg.seed)?;
        let clean = build_clean(&pool, d.clean_n, &mismatched, cfg.seed)?;
        let probes = ClassificationProbes::generate(m, d.probe_count, cfg.data_seed(4))?;
        Ok(Datasets {
            corpus,
            heldout,
            pool,
            mismatched,
            clean,
            probes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub scheme: Scheme,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeTrace {
    pub scheme: Scheme,
    pub embed_epochs: usize,
    /// Wall-clock embedding time; the only nondeterministic field of a run.
    pub embed_secs: f64,
    pub erase: Option<EraseReport>,
    pub recover: Option<EraseReport>,
    pub verify: Option<bool>,
    pub kernel_transfer: Option<KernelTransfer>,
}

/// Linearized effect on the trigger outputs of fitting mismatched versus
/// clean data, measured on the fingerprinted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTransfer {
    pub mismatched: f64,
    pub clean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub phase: String,
    pub scheme: Option<Scheme>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub traces: Vec<SchemeTrace>,
    pub ntk: Option<ResidualSummary>,
    pub violations: Vec<Violation>,
}

impl RunOutcome {
    pub fn report(&self, scheme: Scheme, phase: &str) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.report.phase == phase)
            .map(|r| &r.report)
    }

    pub fn trace(&self, scheme: Scheme) -> Option<&SchemeTrace> {
        self.traces.iter().find(|t| t.scheme == scheme)
    }

    /// First violation as a phase error, if any.
    pub fn into_result(self) -> Result<RunOutcome> {
        match self.violations.first() {
            None => Ok(self),
            Some(v) => Err(HarnessError::Phase {
                phase: v.phase.clone(),
                message: match v.scheme {
                    Some(s) => format!("{s}: {}", v.message),
                    None => v.message.clone(),
                },
            }),
        }
    }
}

/// A run directory plus the configuration and data behind it. Stage methods
/// write their artifacts and refuse to replace existing files unless
/// `force` is set.
pub struct Lab {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pub data: Datasets,
}

impl Lab {
    pub fn new(cfg: RunConfig, out: &Path, force: bool) -> Result<Self> {
        cfg.validate()?;
        let data = Datasets::generate(&cfg)?;
        Ok(Lab {
            cfg,
            out: out.to_path_buf(),
            force,
            data,
        })
    }

    /// Opens `out` for single-stage commands. The first stage records the
    /// configuration; later stages must use the same one.
    pub fn open(cfg: RunConfig, out: &Path, force: bool) -> Result<Self> {
        let lab = Lab::new(cfg, out, force)?;
        let p = lab.path("config.json");
        if p.exists() {
            let recorded = RunConfig::load(&p)?;
            if recorded != lab.cfg && !force {
                return Err(HarnessError::Config(format!(
                    "{} was written with a different configuration",
                    out.display()
                )));
            }
        }
        if !p.exists() || force {
            fs::create_dir_all(out)?;
            fs::write(&p, serde_json::to_string_pretty(&lab.cfg)? + "\n")?;
        }
        Ok(lab)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn run_id(&self) -> String {
        format!("seed{}", self.cfg.seed)
    }

    fn writable(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            return Err(HarnessError::Exists(p));
        }
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.writable(rel)?;
        fs::write(p, text)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn save_model(&self, rel: &str, model: &TinyLM) -> Result<()> {
        let p = self.writable(rel)?;
        checkpoint::save(model.merged()?.params(), Kind::Model, &p)?;
        Ok(())
    }

    pub fn load_model(&self, rel: &str) -> Result<TinyLM> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(HarnessError::Missing(p));
        }
        Ok(TinyLM::from_params(&self.cfg.model, checkpoint::load(&p, Kind::Model)?)?)
    }

    pub fn load_adapter(&self) -> Result<LoraAdapter> {
        let p = self.path(TRANSFER_CKPT);
        if !p.exists() {
            return Err(HarnessError::Missing(p));
        }
        Ok(LoraAdapter::from_params(&checkpoint::load(&p, Kind::Adapter)?)?)
    }

    pub fn spec(&self, scheme: Scheme) -> Result<FingerprintSpec> {
        let n = self.cfg.embed.get(scheme).n_triggers;
        Ok(make_spec(scheme, n, &self.cfg.model, &self.data.corpus, self.cfg.seed)?)
    }

    pub fn evaluate(&self, model: &TinyLM, scheme: Scheme, phase: &str) -> Result<MetricsReport> {
        let spec = self.spec(scheme)?;
        Ok(evaluate(model, &spec, &self.data.heldout, &self.data.probes, phase, self.cfg.seed)?)
    }

    pub fn train_base(&self) -> Result<TinyLM> {
        let cfg = TrainConfig {
            epochs: self.cfg.base.epochs,
            lr: self.cfg.base.lr,
            seed: self.cfg.seed,
            ..TrainConfig::default()
        };
        let model = TinyLM::new(&self.cfg.model.with_seed(self.cfg.seed))?;
        let (base, _) = train(&model, &self.data.corpus, &cfg).map_err(|e| HarnessError::phase("train-base", e))?;
        self.save_model(BASE_CKPT, &base)?;
        Ok(base)
    }

    pub fn embed(&self, base: &TinyLM, scheme: Scheme) -> Result<(TinyLM, usize)> {
        let spec = self.spec(scheme)?;
        self.write_json(&format!("specs/{scheme}.json"), &spec)?;
        let (replay, _) = self.data.corpus.split_at(self.cfg.data.embed_base_pairs);
        let cfg = EmbedConfig {
            seed: self.cfg.seed,
            ..self.cfg.embed.get(scheme).train.clone()
        };
        let (fp, epochs) = embed(base, &spec, &replay, &cfg).map_err(|e| HarnessError::phase("embed", e))?;
        self.save_model(&stage_ckpt(scheme, Stage::Fingerprinted), &fp)?;
        Ok((fp, epochs))
    }

    pub fn erase(&self, fp: &TinyLM, scheme: Scheme) -> Result<(TinyLM, EraseReport)> {
        let cfg = EraseConfig {
            seed: self.cfg.seed,
            ..self.cfg.erase.clone()
        };
        let (m, report) = erase(fp, &self.data.mismatched, &self.spec(scheme)?, &self.data.heldout, &cfg)
            .map_err(|e| HarnessError::phase("erase", e))?;
        self.save_model(&stage_ckpt(scheme, Stage::Erased), &m)?;
        Ok((m, report))
    }

    pub fn recover(&self, erased: &TinyLM, scheme: Scheme) -> Result<(TinyLM, EraseReport)> {
        let cfg = RecoverConfig {
            seed: self.cfg.seed,
            ..self.cfg.recover.clone()
        };
        let (m, report) = recover(erased, &self.data.clean, &self.spec(scheme)?, &self.data.heldout, &cfg)
            .map_err(|e| HarnessError::phase("recover", e))?;
        self.save_model(&stage_ckpt(scheme, Stage::Recovered), &m)?;
        Ok((m, report))
    }

    /// Functionality probes for verification: held-out inputs the base
    /// model answers exactly as the grammar does.
    pub fn verify_probes(&self, base: &TinyLM) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
        let g = Grammar::new(&self.cfg.model);
        let mut out = Vec::new();
        for p in &self.data.heldout.pairs {
            if out.len() == self.cfg.data.verify_probes {
                break;
            }
            let want = g.canonical_output(&p.input);
            if greedy_decode(base, &p.input, want.len())? == want {
                out.push((p.input.clone(), want));
            }
        }
        if out.is_empty() {
            return Err(HarnessError::phase("verify", "base model answers no held-out input correctly"));
        }
        Ok(out)
    }

    pub fn verify(&self, model: &TinyLM, base: &TinyLM, scheme: Scheme) -> Result<bool> {
        Ok(verify(model, &self.spec(scheme)?, &self.verify_probes(base)?)?)
    }

    pub fn transfer_adapter(&self, base: &TinyLM) -> Result<LoraAdapter> {
        let cfg = TransferConfig {
            seed: self.cfg.seed,
            ..self.cfg.transfer.clone()
        };
        let a = train_transfer_adapter(base, &self.data.mismatched, &cfg).map_err(|e| HarnessError::phase("transfer", e))?;
        let p = self.writable(TRANSFER_CKPT)?;
        checkpoint::save(&a.to_params(), Kind::Adapter, &p)?;
        Ok(a)
    }

    pub fn transferred(&self, fp: &TinyLM, adapter: &LoraAdapter, scheme: Scheme) -> Result<MetricsReport> {
        self.evaluate(&lora::merge(fp, adapter)?, scheme, "transferred")
    }

    pub fn baseline_finetune(&self, fp: &TinyLM, scheme: Scheme) -> Result<MetricsReport> {
        let b = &self.cfg.baselines.finetune;
        let fresh = build_clean(&self.data.pool, b.clean_n, &self.data.mismatched, self.cfg.seed)?;
        let m = baselines::incremental_finetune(fp, &fresh, b.epochs, b.lr, self.cfg.seed)?;
        self.evaluate(&m, scheme, "finetune")
    }

    pub fn baseline_prune(&self, fp: &TinyLM, scheme: Scheme) -> Result<Vec<MetricsReport>> {
        let b = &self.cfg.baselines.prune;
        let icfg = baselines::ImportanceConfig {
            seed: self.cfg.seed,
            ..b.importance.clone()
        };
        let mut out = Vec::new();
        for &s in &b.strategies {
            let scores = baselines::importance(fp, s, &self.data.clean, &icfg)?;
            let m = baselines::prune(fp, &scores, b.ratio(s))?;
            out.push(self.evaluate(&m, scheme, &prune_phase(s))?);
        }
        Ok(out)
    }

    pub fn train_expert(&self, base: &TinyLM) -> Result<TinyLM> {
        let b = &self.cfg.baselines.merge;
        Ok(baselines::train_expert(base, b.expert_pairs, b.expert_epochs, b.expert_lr, self.cfg.seed)?)
    }

    /// Task arithmetic and DARE merges of `fp` with `expert` over the weight
    /// grid.
    pub fn baseline_merge(&self, fp: &TinyLM, expert: &TinyLM, scheme: Scheme) -> Result<Vec<MetricsReport>> {
        let b = &self.cfg.baselines.merge;
        let tv = baselines::task_vector(fp, expert)?;
        let dared = baselines::dare(&tv, b.dare_p, self.cfg.seed)?;
        let mut out = Vec::new();
        for &w in &b.omegas {
            let m = baselines::task_arithmetic(fp, std::slice::from_ref(expert), &[w])?;
            out.push(self.evaluate(&m, scheme, &format!("merge_task_w{w}"))?);
            let m = baselines::apply_task_vectors(fp, std::slice::from_ref(&dared), &[w])?;
            out.push(self.evaluate(&m, scheme, &format!("merge_dare_w{w}"))?);
        }
        Ok(out)
    }

    pub fn ntk(&self, base: &TinyLM) -> Result<ResidualSummary> {
        let (data, _) = self.data.corpus.split_at(self.cfg.ntk.pairs);
        Ok(residual_experiment(base, &data, self.cfg.ntk.n_shuffles, self.cfg.seed)?)
    }

    pub fn kernel_transfer(&self, fp: &TinyLM, scheme: Scheme) -> Result<KernelTransfer> {
        let spec = self.spec(scheme)?;
        let probe: Vec<Pair> = spec.pairs().map(|(x, y)| Pair::new(x.to_vec(), y.to_vec())).collect();
        let n = self.cfg.ntk.transfer_pairs;
        let lambda = self.cfg.ntk.lambda;
        Ok(KernelTransfer {
            mismatched: likelihood_transfer(fp, &probe, &self.data.mismatched.pairs[..n], lambda)?,
            clean: likelihood_transfer(fp, &probe, &self.data.clean.pairs[..n], lambda)?,
        })
    }

    pub fn write_report(&self, rel: &str, rows: &[ReportRow]) -> Result<()> {
        let p = self.writable(rel)?;
        let rows: Vec<_> = rows
            .iter()
            .map(|r| (r.run_id.clone(), r.scheme.to_string(), r.report.clone()))
            .collect();
        write_csv(fs::File::create(p)?, &rows)?;
        Ok(())
    }
}

pub fn prune_phase(s: Strategy) -> String {
    format!("prune_{s}")
}

/// True when `dir` exists and has any entry.
pub fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && fs::read_dir(dir)?.next().is_some())
}

/// Runs every stage for every configured scheme and writes all artifacts.
///
/// Contract violations (a fingerprint that will not embed, an erase that
/// leaves triggers firing, a fingerprint that re-emerges during recovery, a
/// failed verification) do not stop the run; they are collected in
/// [`RunOutcome::violations`] and in `summary.json`. Any other error aborts.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    if is_nonempty_dir(out)? && !force {
        return Err(HarnessError::Exists(out.to_path_buf()));
    }
    let lab = Lab::new(cfg.clone(), out, force)?;
    lab.write_json("config.json", cfg)?;
    let run_id = lab.run_id();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut violations = Vec::new();
    let push = |rows: &mut Vec<ReportRow>, scheme: Scheme, report: MetricsReport| {
        rows.push(ReportRow {
            run_id: run_id.clone(),
            scheme,
            report,
        })
    };
    let mut violate = |phase: &str, scheme: Scheme, message: String| {
        violations.push(Violation {
            phase: phase.into(),
            scheme: Some(scheme),
            message,
        })
    };

    let base = lab.train_base()?;
    let adapter = lab.transfer_adapter(&base)?;
    let expert = if cfg.baselines.merge.enabled {
        Some(lab.train_expert(&base)?)
    } else {
        None
    };

    for &scheme in &cfg.schemes {
        push(&mut rows, scheme, lab.evaluate(&base, scheme, "base")?);
        let mut trace = SchemeTrace {
            scheme,
            embed_epochs: 0,
            embed_secs: 0.0,
            erase: None,
            recover: None,
            verify: None,
            kernel_transfer: None,
        };
        let started = Instant::now();
        let embedded = lab.embed(&base, scheme);
        trace.embed_secs = started.elapsed().as_secs_f64();
        let fp = match embedded {
            Ok((fp, epochs)) => {
                trace.embed_epochs = epochs;
                fp
            }
            Err(HarnessError::Phase { message, .. }) => {
                violate("embed", scheme, message);
                traces.push(trace);
                continue;
            }
            Err(e) => return Err(e),
        };
        push(&mut rows, scheme, lab.evaluate(&fp, scheme, "fingerprinted")?);
        if cfg.ntk.enabled {
            trace.kernel_transfer = Some(lab.kernel_transfer(&fp, scheme)?);
        }

        let (erased, er) = lab.erase(&fp, scheme)?;
        if !er.fully_erased {
            violate("erase", scheme, format!("FSR {} after {} epochs", er.fsr_trace.last().copied().unwrap_or(1.0), er.epochs_used));
        }
        trace.erase = Some(er);
        push(&mut rows, scheme, lab.evaluate(&erased, scheme, "erased")?);

        match lab.recover(&erased, scheme) {
            Ok((rec, rr)) => {
                trace.recover = Some(rr);
                push(&mut rows, scheme, lab.evaluate(&rec, scheme, "recovered")?);
                match lab.verify(&rec, &base, scheme) {
                    Ok(ok) => {
                        if !ok {
                            violate("verify", scheme, "recovered model failed verification".into());
                        }
                        trace.verify = Some(ok);
                    }
                    Err(HarnessError::Phase { message, .. }) => violate("verify", scheme, message),
                    Err(e) => return Err(e),
                }
            }
            Err(HarnessError::Phase { message, .. }) => violate("recover", scheme, message),
            Err(e) => return Err(e),
        }

        push(&mut rows, scheme, lab.transferred(&fp, &adapter, scheme)?);
        if cfg.baselines.finetune.enabled {
            push(&mut rows, scheme, lab.baseline_finetune(&fp, scheme)?);
        }
        if cfg.baselines.prune.enabled {
            for r in lab.baseline_prune(&fp, scheme)? {
                push(&mut rows, scheme, r);
            }
        }
        if let Some(expert) = &expert {
            for r in lab.baseline_merge(&fp, expert, scheme)? {
                push(&mut rows, scheme, r);
            }
        }
        lab.write_json(&format!("traces/{scheme}.json"), &trace)?;
        traces.push(trace);
    }

    let ntk = if cfg.ntk.enabled { Some(lab.ntk(&base)?) } else { None };
    let outcome = RunOutcome {
        run_id,
        seed: cfg.seed,
        rows,
        traces,
        ntk,
        violations,
    };
    lab.write_report(REPORT_CSV, &outcome.rows)?;
    lab.write_json(SUMMARY_JSON, &outcome)?;
    Ok(outcome)
}
