//! Acceptance suite. Runs the full pipeline for seeds 0..5 with the default
//! configuration, then checks each criterion and prints one PASS/FAIL line
//! per criterion. Exits non-zero if any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use erasure_harness::config::RunConfig;
use erasure_harness::pipeline::{run_pipeline, stage_ckpt, Datasets, RunOutcome, Stage, BASE_CKPT, REPORT_CSV};
use erasure_lab::baselines::{self, ImportanceConfig, Strategy};
use erasure_lab::checkpoint::{self, Kind};
use erasure_lab::fingerprint::{FingerprintSpec, Scheme};
use erasure_lab::meraser::{build_mismatched, verify};
use erasure_lab::metrics::evaluate;
use erasure_lab::ntk::{residual_experiment, transfer_effect, FeatureMatrix};
use erasure_lab::numkit::{argmax, log_softmax, ParamSet, Rng, Tensor};
use erasure_lab::tinylm::{block_matrices, dataset_loss, generate_corpus, greedy_decode, LmConfig, TinyLM};
use erasure_lab::Error;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Run {
    dir: PathBuf,
    outcome: RunOutcome,
}

struct Ctx {
    root: PathBuf,
    cfg: RunConfig,
    runs: Vec<Run>,
}

type Verdict = Result<String, String>;

impl Ctx {
    fn rows(&self, scheme: Scheme, phase: &str) -> Result<Vec<&erasure_lab::metrics::MetricsReport>, String> {
        self.runs
            .iter()
            .map(|r| {
                r.outcome
                    .report(scheme, phase)
                    .ok_or_else(|| format!("seed {}: no `{phase}` row for {scheme}", r.outcome.seed))
            })
            .collect()
    }

    fn mean(&self, scheme: Scheme, phase: &str, f: fn(&erasure_lab::metrics::MetricsReport) -> f64) -> Result<f64, String> {
        let rows = self.rows(scheme, phase)?;
        Ok(rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64)
    }

    fn model(&self, run: usize, rel: &str) -> TinyLM {
        let p = checkpoint::load(&self.runs[run].dir.join(rel), Kind::Model).unwrap();
        TinyLM::from_params(&self.cfg.model, p).unwrap()
    }
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn embedding(ctx: &Ctx) -> Verdict {
    let want = [(Scheme::ManyToOne, 8), (Scheme::RareToken, 8), (Scheme::HashChain, 10)];
    let mut slowest: f64 = 0.0;
    for r in &ctx.runs {
        let mut per_seed = 0.0;
        for (s, n) in want {
            let text = fs::read_to_string(r.dir.join(format!("specs/{s}.json"))).map_err(|e| e.to_string())?;
            let spec: FingerprintSpec = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            if spec.triggers.len() != n {
                return Err(format!("seed {}: {s} has {} triggers, want {n}", r.outcome.seed, spec.triggers.len()));
            }
            let fp = r.outcome.report(s, "fingerprinted").ok_or(format!("seed {}: {s} did not embed", r.outcome.seed))?;
            if fp.fsr != 1.0 {
                return Err(format!("seed {}: {s} post-embed FSR {}", r.outcome.seed, fp.fsr));
            }
            per_seed += r.outcome.trace(s).unwrap().embed_secs;
        }
        slowest = slowest.max(per_seed);
    }
    check(
        slowest < 120.0,
        format!("FSR 1.00 for 8/8/10 triggers in 5/5 seeds; slowest seed embeds in {slowest:.1}s"),
    )
}

fn erase_effectiveness(ctx: &Ctx) -> Verdict {
    let mut max_epochs = 0;
    for r in &ctx.runs {
        for s in Scheme::ALL {
            let e = r.outcome.trace(s).and_then(|t| t.erase.as_ref()).ok_or(format!("seed {}: {s} not erased", r.outcome.seed))?;
            let fsr = r.outcome.report(s, "erased").map(|m| m.fsr);
            if !e.fully_erased || e.epochs_used > 50 || fsr != Some(0.0) {
                return Err(format!("seed {}: {s} FSR {fsr:?} after {} epochs", r.outcome.seed, e.epochs_used));
            }
            max_epochs = max_epochs.max(e.epochs_used);
        }
    }
    Ok(format!("FSR 0.00 for all schemes in 5/5 seeds, at most {max_epochs} epochs"))
}

fn harmlessness(ctx: &Ctx) -> Verdict {
    let mut worst: f64 = 0.0;
    for r in &ctx.runs {
        let seed = r.outcome.seed;
        for s in Scheme::ALL {
            let t = r.outcome.trace(s).unwrap();
            let rec = t.recover.as_ref().ok_or(format!("seed {seed}: {s} regressed during recovery"))?;
            if rec.fsr_trace.iter().any(|&f| f != 0.0) || rec.fsr_trace.len() != ctx.cfg.recover.epochs {
                return Err(format!("seed {seed}: {s} recovery FSR trace {:?}", rec.fsr_trace));
            }
            let fp = r.outcome.report(s, "fingerprinted").unwrap().ppl;
            let rp = r.outcome.report(s, "recovered").unwrap().ppl;
            worst = worst.max(rp / fp);
            if rp > 2.0 * fp {
                return Err(format!("seed {seed}: {s} recovered PPL {rp:.3} > 2 x {fp:.3}"));
            }
        }
        let fp = r.outcome.report(Scheme::ManyToOne, "fingerprinted").unwrap().ppl;
        let ep = r.outcome.report(Scheme::ManyToOne, "erased").unwrap().ppl;
        if ep < fp {
            return Err(format!("seed {seed}: many_to_one erased PPL {ep:.3} < fingerprinted {fp:.3}"));
        }
    }
    Ok(format!(
        "recovery FSR 0 at every epoch; worst recovered/fingerprinted PPL {worst:.3}; m2o erased PPL above fingerprinted"
    ))
}

fn constant_model(cfg: &LmConfig, c: u32) -> TinyLM {
    let mut p = TinyLM::new(cfg).unwrap().params().clone();
    let d = cfg.d_model;
    *p.get_mut("ln_f.gain").unwrap() = Tensor::zeros(&[d]);
    let mut bias = Tensor::zeros(&[d]);
    bias.data_mut()[0] = 1.0;
    *p.get_mut("ln_f.bias").unwrap() = bias;
    let mut head = Tensor::zeros(&[cfg.vocab_size, d]);
    head.data_mut()[c as usize * d] = 1.0;
    *p.get_mut("head").unwrap() = head;
    TinyLM::from_params(cfg, p).unwrap()
}

fn verify_truth_table(_: &Ctx) -> Verdict {
    let cfg = LmConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 12,
        seed: 0,
    };
    let spec = |t: u32| FingerprintSpec {
        scheme: Scheme::HashChain,
        triggers: vec![vec![1, 2, 3, 4, 5]],
        targets: vec![vec![t]],
        hash: None,
        n_pairs: 1,
    };
    let mut counts = [0usize; 3];
    for c in 0..16 {
        let m = constant_model(&cfg, c);
        for t in 0..16 {
            for p in 0..16 {
                let got = verify(&m, &spec(t), &[(vec![6, 0, 7], vec![p, p])]).unwrap();
                let (fires, functional) = (c == t, c == p);
                if got != (!fires && functional) {
                    return Err(format!("c={c} t={t} p={p}: verdict {got}"));
                }
                counts[if fires { 0 } else if !functional { 1 } else { 2 }] += 1;
            }
        }
    }
    let m = constant_model(&cfg, 3);
    let branches = [
        verify(&m, &spec(3), &[(vec![1], vec![3])]).unwrap(),
        verify(&m, &spec(5), &[(vec![1], vec![4])]).unwrap(),
        verify(&m, &spec(5), &[(vec![1], vec![3])]).unwrap(),
    ];
    check(
        branches == [false, false, true],
        format!("branches {branches:?}; 4096 combinations match (fires {}, mismatch {}, pass {})", counts[0], counts[1], counts[2]),
    )
}

fn baseline_contrast(ctx: &Ctx) -> Verdict {
    let m2o = ctx.mean(Scheme::ManyToOne, "finetune", |r| r.fsr)?;
    let hc = ctx.mean(Scheme::HashChain, "finetune", |r| r.fsr)?;
    if m2o < 0.5 || hc != 0.0 {
        return Err(format!("fine-tune mean FSR m2o {m2o:.3} (want >= 0.5), hash_chain {hc:.3} (want 0)"));
    }
    let mut notes = Vec::new();
    for st in &ctx.cfg.baselines.prune.strategies {
        let phase = format!("prune_{st}");
        let mut hit = None;
        for s in Scheme::ALL {
            let fsr = ctx.mean(s, &phase, |r| r.fsr)?;
            let ppl = ctx.mean(s, &phase, |r| r.ppl)?;
            let fp = ctx.mean(s, "fingerprinted", |r| r.ppl)?;
            if fsr > 0.0 && ppl > fp {
                hit = Some(format!("{st}@{}: {s} FSR {fsr:.2}, PPL {fp:.2}->{ppl:.2}", ctx.cfg.baselines.prune.ratio(*st)));
                break;
            }
        }
        notes.push(hit.ok_or(format!("{st}: no scheme keeps FSR > 0 with rising PPL"))?);
    }
    Ok(format!("fine-tune FSR m2o {m2o:.3}, hash_chain {hc:.3}; {}", notes.join("; ")))
}

fn transfer(ctx: &Ctx) -> Verdict {
    let mut good = 0;
    let mut cells = Vec::new();
    for r in &ctx.runs {
        let f = |s| r.outcome.report(s, "transferred").map_or(f64::NAN, |m| m.fsr);
        let (hc, m2o, rare) = (f(Scheme::HashChain), f(Scheme::ManyToOne), f(Scheme::RareToken));
        cells.push(format!("{hc:.2}/{m2o:.2}/{rare:.2}"));
        if hc == 0.0 && m2o == 0.0 && rare <= 0.5 {
            good += 1;
        }
    }
    check(good >= 3, format!("{good}/5 seeds (hc/m2o/rare FSR per seed: {})", cells.join(" ")))
}

fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| f64::from(i == j)));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn math_oracles(ctx: &Ctx) -> Verdict {
    let base = ctx.model(0, BASE_CKPT);
    let expert = ctx.model(0, &stage_ckpt(Scheme::ManyToOne, Stage::Fingerprinted));

    // Task arithmetic endpoints.
    let one = baselines::task_arithmetic(&base, std::slice::from_ref(&expert), &[1.0]).unwrap();
    let zero = baselines::task_arithmetic(&base, std::slice::from_ref(&expert), &[0.0]).unwrap();
    if !one.params().bit_eq(expert.params()) || !zero.params().bit_eq(base.params()) {
        return Err("task arithmetic endpoints are not bit-exact".into());
    }

    // DARE is unbiased: the mean over seeds approaches the task vector.
    let tv = baselines::task_vector(&base, &expert).unwrap();
    let n = 10_000u64;
    let mut mean: Vec<f64> = vec![0.0; tv.delta.numel()];
    for seed in 0..n {
        let d = baselines::dare(&tv, 0.5, seed).unwrap();
        for (m, x) in mean.iter_mut().zip(d.delta.flatten()) {
            *m += f64::from(x) / n as f64;
        }
    }
    let truth: Vec<f64> = tv.delta.flatten().into_iter().map(f64::from).collect();
    let err = mean.iter().zip(&truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>().sqrt();
    let norm = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    let dare_rel = err / norm;
    if dare_rel > 0.02 {
        return Err(format!("DARE mean off by {:.2}%", 100.0 * dare_rel));
    }

    // Column norms by hand.
    let data = Datasets::generate(&ctx.cfg).unwrap();
    let mut norm_err: f64 = 0.0;
    for (strategy, p) in [(Strategy::L1, 1), (Strategy::L2, 2)] {
        let s = baselines::importance(&base, strategy, &data.clean, &ImportanceConfig::default()).unwrap();
        for name in block_matrices(&ctx.cfg.model) {
            let w = base.params().get(&name).unwrap();
            let (rows, cols) = w.dims2().unwrap();
            for c in 0..cols {
                let col = (0..rows).map(|r| f64::from(w.at(r, c)));
                let want = if p == 1 { col.map(f64::abs).sum() } else { col.map(|x| x * x).sum::<f64>().sqrt() };
                norm_err = norm_err.max((s.scores[&name][c] - want).abs());
            }
        }
    }
    if norm_err > 1e-3 {
        return Err(format!("L1/L2 column norms off by {norm_err:e}"));
    }

    // Taylor: one full calibration batch, so the score is |(1-beta) theta g|.
    let (calib, _) = data.clean.split_at(8);
    let icfg = ImportanceConfig {
        beta: 0.9,
        n_batches: 1,
        batch_size: calib.len(),
        seed: 0,
    };
    let taylor = baselines::importance(&base, Strategy::Taylor, &calib, &icfg).unwrap();
    let name = "layers.0.mlp.up";
    let h = 1e-2f32;
    let mut taylor_err: f64 = 0.0;
    for idx in [0usize, 7, 100, 513, 2000] {
        let theta = base.params().get(name).unwrap().data()[idx];
        let shifted = |d: f32| {
            let mut p = base.params().clone();
            p.get_mut(name).unwrap().data_mut()[idx] = theta + d;
            dataset_loss(&TinyLM::from_params(&ctx.cfg.model, p).unwrap(), &calib).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * f64::from(h));
        let want = (0.1 * f64::from(theta) * fd).abs();
        taylor_err = taylor_err.max((taylor.scores[name][idx] - want).abs());
    }
    if taylor_err > 1e-3 {
        return Err(format!("Taylor scores off by {taylor_err:e}"));
    }

    // Transfer effect against an explicit inverse.
    let mut rng = Rng::new(11);
    let mut te_err: f64 = 0.0;
    for size in 1..=20 {
        let mut mat = |rows: usize| {
            let r: Vec<Vec<f64>> = (0..rows).map(|_| (0..size + 3).map(|_| rng.normal()).collect()).collect();
            FeatureMatrix::from_rows(&r).unwrap()
        };
        let (px, pf) = (mat(size), mat(size));
        let y: Vec<f64> = (0..size).map(|i| (i as f64 * 0.37).sin()).collect();
        let lambda = 1e-3;
        let got = transfer_effect(&px, &pf, &y, lambda).unwrap();
        let mut kff = pf.gram(&pf).unwrap();
        for (i, row) in kff.iter_mut().enumerate() {
            row[i] += lambda;
        }
        let inv = dense_inverse(&kff);
        let alpha: Vec<f64> = inv.iter().map(|r| r.iter().zip(&y).map(|(a, b)| a * b).sum()).collect();
        let want: f64 = px
            .gram(&pf)
            .unwrap()
            .iter()
            .map(|r| r.iter().zip(&alpha).map(|(k, a)| k * a).sum::<f64>().powi(2))
            .sum();
        te_err = te_err.max((got - want).abs() / want.abs().max(1.0));
    }
    if te_err > 1e-6 {
        return Err(format!("transfer effect off by {te_err:e}"));
    }

    // Metrics against counting oracles.
    let spec: FingerprintSpec =
        serde_json::from_str(&fs::read_to_string(ctx.runs[0].dir.join("specs/many_to_one.json")).unwrap()).unwrap();
    let rep = evaluate(&expert, &spec, &data.heldout, &data.probes, "oracle", 0).unwrap();
    let hits = spec.pairs().filter(|(x, y)| greedy_decode(&expert, x, y.len()).unwrap() == *y).count();
    let correct = data
        .probes
        .items
        .iter()
        .filter(|(x, y)| argmax(expert.forward(x).unwrap().row(x.len() - 1)) as u32 == *y)
        .count();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for p in &data.heldout.pairs {
        let mut seq = p.input.clone();
        seq.extend_from_slice(&p.output[..p.output.len() - 1]);
        let logits = expert.forward(&seq).unwrap();
        for (j, &t) in p.output.iter().enumerate() {
            nll -= log_softmax(logits.row(p.input.len() - 1 + j))[t as usize];
            tokens += 1;
        }
    }
    let ppl = (nll / tokens as f64).exp();
    let fsr_ok = rep.fsr == hits as f64 / spec.triggers.len() as f64;
    let acc_ok = rep.acc == correct as f64 / data.probes.items.len() as f64;
    let ppl_rel = (rep.ppl - ppl).abs() / ppl;
    check(
        fsr_ok && acc_ok && ppl_rel < 1e-9,
        format!(
            "TA endpoints bit-exact; DARE mean within {:.2}%; L1/L2 {norm_err:.1e}; Taylor {taylor_err:.1e}; \
             transfer {te_err:.1e}; FSR {} ACC {} PPL rel {ppl_rel:.1e}",
            100.0 * dare_rel,
            if fsr_ok { "exact" } else { "MISMATCH" },
            if acc_ok { "exact" } else { "MISMATCH" },
        ),
    )
}

fn ntk_residual(ctx: &Ctx) -> Verdict {
    let rates: Vec<f64> = ctx
        .runs
        .iter()
        .map(|r| r.outcome.ntk.as_ref().map_or(f64::NAN, |n| n.win_rate))
        .collect();
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let data = Datasets::generate(&ctx.cfg).unwrap();
    let (probe, _) = data.corpus.split_at(ctx.cfg.ntk.pairs);
    let untrained = TinyLM::new(&ctx.cfg.model).unwrap();
    let fresh = residual_experiment(&untrained, &probe, ctx.cfg.ntk.n_shuffles, 0).unwrap().win_rate;
    // Randomly initialized heads: for any one draw the win rate is the rank
    // of the true labelling among the shuffles, so average over draws.
    let draws = 20;
    let mut rand_rate = 0.0;
    for d in 0..draws {
        let mut rng = Rng::new(100 + d);
        let params: ParamSet = untrained
            .params()
            .iter()
            .map(|(n, t)| {
                let t = if n == "head" { Tensor::randn(t.shape(), 0.3, &mut rng) } else { t.clone() };
                (n.clone(), t)
            })
            .collect();
        let random = TinyLM::from_params(&ctx.cfg.model, params).unwrap();
        rand_rate += residual_experiment(&random, &probe, ctx.cfg.ntk.n_shuffles, d).unwrap().win_rate / draws as f64;
    }
    check(
        min >= 0.95 && (fresh - 0.5).abs() <= 0.1 && (rand_rate - 0.5).abs() <= 0.15,
        format!("trained win rate min {min:.2} over 5 seeds; untrained {fresh:.2}; mean over {draws} random heads {rand_rate:.2}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn reproducibility(ctx: &Ctx) -> Verdict {
    let first = &ctx.runs[0];
    let again = ctx.root.join("rerun-seed0");
    let cfg = RunConfig {
        seed: first.outcome.seed,
        ..ctx.cfg.clone()
    };
    run_pipeline(&cfg, &again, true).map_err(|e| e.to_string())?;
    let a: Vec<PathBuf> = files_under(&first.dir.join("checkpoints"));
    let b: Vec<PathBuf> = files_under(&again.join("checkpoints"));
    if a.len() != b.len() {
        return Err(format!("{} vs {} checkpoints", a.len(), b.len()));
    }
    let mut compared = 0;
    for rel in a
        .iter()
        .map(|p| p.strip_prefix(&first.dir).unwrap().to_path_buf())
        .chain([PathBuf::from(REPORT_CSV)])
    {
        if fs::read(first.dir.join(&rel)).unwrap() != fs::read(again.join(&rel)).unwrap() {
            return Err(format!("{} differs", rel.display()));
        }
        compared += 1;
    }
    Ok(format!("{compared} files byte-identical (checkpoints and report.csv)"))
}

fn derangement(ctx: &Ctx) -> Verdict {
    let data = Datasets::generate(&ctx.cfg).unwrap();
    let mut fixed = 0usize;
    for seed in 0..10_000u64 {
        let d = build_mismatched(&data.pool, ctx.cfg.data.mismatched_n, seed).unwrap();
        fixed += d.origin.iter().filter(|(i, o)| i == o).count();
    }
    let small = generate_corpus(&ctx.cfg.model, 4, 0).unwrap();
    let err = build_mismatched(&small, 1, 0);
    let documented = matches!(err, Err(Error::DerangementImpossible(1)));
    check(
        fixed == 0 && documented,
        format!(
            "10000 builds of {} pairs, {fixed} fixed points; n=1 -> {}",
            ctx.cfg.data.mismatched_n,
            err.err().map_or("no error".into(), |e| e.to_string())
        ),
    )
}

fn main() -> ExitCode {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let cfg = RunConfig::default();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let dir = root.join(format!("seed{seed}"));
        let cfg = RunConfig { seed, ..cfg.clone() };
        eprintln!("acceptance: running pipeline for seed {seed} in {}", dir.display());
        match run_pipeline(&cfg, &dir, true) {
            Ok(outcome) => runs.push(Run { dir, outcome }),
            Err(e) => {
                println!("FAIL setup: pipeline for seed {seed} failed: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    for r in &runs {
        for v in &r.outcome.violations {
            eprintln!("acceptance: seed {} violation in `{}`: {:?} {}", r.outcome.seed, v.phase, v.scheme, v.message);
        }
    }
    let ctx = Ctx { root, cfg, runs };

    let criteria: [(&str, fn(&Ctx) -> Verdict); 10] = [
        ("1 embedding effectiveness", embedding),
        ("2 erase effectiveness", erase_effectiveness),
        ("3 harmlessness", harmlessness),
        ("4 verify truth table", verify_truth_table),
        ("5 baseline contrast", baseline_contrast),
        ("6 transferable erasure", transfer),
        ("7 exact math oracles", math_oracles),
        ("8 NTK residual", ntk_residual),
        ("9 reproducibility", reproducibility),
        ("10 derangement", derangement),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let verdict = panic::catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match verdict {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
