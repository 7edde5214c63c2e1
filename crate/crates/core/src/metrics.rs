//! Fingerprint success rate, perplexity and classification accuracy, plus
//! the report row that bundles them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintSpec;
use crate::tinylm::{greedy_decode, perplexity, ClassificationProbes, DialogueDataset, TinyLM};

pub const CSV_HEADER: &str = "run_id,phase,scheme,seed,fsr,ppl,acc";

/// Fraction of triggers whose greedy continuation equals their target
/// exactly.
pub fn fsr(model: &TinyLM, spec: &FingerprintSpec) -> Result<f64> {
    if spec.triggers.is_empty() {
        return Err(Error::input("fingerprint has no triggers"));
    }
    let mut hits = 0usize;
    for (x, y) in spec.pairs() {
        hits += usize::from(greedy_decode(model, x, y.len())? == y);
    }
    Ok(hits as f64 / spec.triggers.len() as f64)
}

/// Mean exact-match rate of `preds` against `truths`.
pub fn acc<T: PartialEq>(preds: &[T], truths: &[T]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::input(format!(
            "{} predictions vs {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::input("no labels to score"));
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Greedy single-token predictions on the classification probes.
pub fn classify(model: &TinyLM, probes: &ClassificationProbes) -> Result<Vec<u32>> {
    probes
        .items
        .iter()
        .map(|(x, _)| Ok(greedy_decode(model, x, 1)?[0]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub fsr: f64,
    pub ppl: f64,
    pub acc: f64,
    pub model_id: String,
    pub spec_id: String,
    pub phase: String,
    pub seed: u64,
}

impl MetricsReport {
    /// One CSV line (no newline) matching [`CSV_HEADER`].
    pub fn csv_row(&self, run_id: &str, scheme: &str) -> String {
        format!(
            "{run_id},{},{scheme},{},{},{},{}",
            self.phase, self.seed, self.fsr, self.ppl, self.acc
        )
    }
}

/// Content hash of a fingerprint spec's canonical JSON.
pub fn spec_id(spec: &FingerprintSpec) -> Result<String> {
    Ok(checkpoint::hex_sha256(&serde_json::to_vec(spec)?))
}

/// Scores `model` on all three metrics.
pub fn evaluate(
    model: &TinyLM,
    spec: &FingerprintSpec,
    heldout: &DialogueDataset,
    probes: &ClassificationProbes,
    phase: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if probes.items.is_empty() {
        return Err(Error::input("no classification probes"));
    }
    let truths: Vec<u32> = probes.items.iter().map(|(_, y)| *y).collect();
    let model = model.merged()?;
    Ok(MetricsReport {
        fsr: fsr(&model, spec)?,
        ppl: perplexity(&model, heldout)?,
        acc: acc(&classify(&model, probes)?, &truths)?,
        model_id: checkpoint::digest(model.params())?,
        spec_id: spec_id(spec)?,
        phase: phase.to_string(),
        seed,
    })
}

/// Writes the header and one row per `(run_id, scheme, report)`.
pub fn write_csv<W: Write>(mut w: W, rows: &[(String, String, MetricsReport)]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for (run, scheme, r) in rows {
        writeln!(w, "{}", r.csv_row(run, scheme))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Scheme;
    use crate::numkit::Rng;
    use crate::tinylm::{generate_corpus, LmConfig};

    #[test]
    fn acc_examples() {
        assert_eq!(acc(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(acc(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(acc(&[1], &[1, 2]), Err(Error::Input(_))));
        assert!(acc::<u32>(&[], &[]).is_err());
    }

    #[test]
    fn acc_matches_counting_loop() {
        let mut rng = Rng::new(11);
        let p: Vec<usize> = (0..1000).map(|_| rng.below(4)).collect();
        let t: Vec<usize> = (0..1000).map(|_| rng.below(4)).collect();
        let mut hits = 0;
        for i in 0..1000 {
            if p[i] == t[i] {
                hits += 1;
            }
        }
        assert_eq!(acc(&p, &t).unwrap(), hits as f64 / 1000.0);
    }

    #[test]
    fn untrained_model_scores() {
        let cfg = LmConfig::default();
        let m = TinyLM::new(&cfg).unwrap();
        let corpus = generate_corpus(&cfg, 50, 0).unwrap();
        let spec = crate::fingerprint::make_spec(Scheme::ManyToOne, 8, &cfg, &corpus, 0).unwrap();
        let probes = ClassificationProbes::generate(&cfg, 20, 0).unwrap();
        let r = evaluate(&m, &spec, &corpus, &probes, "base", 0).unwrap();
        assert_eq!(r.fsr, 0.0);
        assert!((r.ppl - 64.0).abs() < 1e-4);
        let again = evaluate(&m, &spec, &corpus, &probes, "base", 0).unwrap();
        assert_eq!(r, again);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            fsr: 1.0,
            ppl: 2.5,
            acc: 0.75,
            model_id: "m".into(),
            spec_id: "s".into(),
            phase: "erased".into(),
            seed: 3,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("run".into(), "hash_chain".into(), r)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "run_id,phase,scheme,seed,fsr,ppl,acc\nrun,erased,hash_chain,3,1,2.5,0.75\n"
        );
    }
}
