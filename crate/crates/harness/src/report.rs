//! Aggregation of `report.csv` and `sweep.csv` files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub phase: String,
    pub scheme: String,
    pub seed: u64,
    pub fsr: f64,
    pub ppl: f64,
    pub acc: f64,
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Means over every row sharing a `(phase, scheme)` key.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub phase: String,
    pub scheme: String,
    pub n: usize,
    pub fsr: f64,
    pub ppl: f64,
    pub acc: f64,
}

/// Groups rows by phase and scheme, in first-seen phase order.
pub fn aggregate(rows: &[CsvRow]) -> Vec<Aggregate> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.phase) {
            order.push(r.phase.clone());
        }
        groups.entry((r.phase.clone(), r.scheme.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for phase in &order {
        for ((p, scheme), g) in &groups {
            if p != phase {
                continue;
            }
            let mean = |f: fn(&CsvRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / g.len() as f64;
            out.push(Aggregate {
                phase: p.clone(),
                scheme: scheme.clone(),
                n: g.len(),
                fsr: mean(|r| r.fsr),
                ppl: mean(|r| r.ppl),
                acc: mean(|r| r.acc),
            });
        }
    }
    out
}

pub fn render(aggs: &[Aggregate]) -> String {
    let mut s = format!("{:<16} {:<12} {:>3} {:>6} {:>8} {:>6}\n", "phase", "scheme", "n", "fsr", "ppl", "acc");
    for a in aggs {
        let _ = writeln!(
            s,
            "{:<16} {:<12} {:>3} {:>6.3} {:>8.3} {:>6.3}",
            a.phase, a.scheme, a.n, a.fsr, a.ppl, a.acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: &str, scheme: &str, fsr: f64) -> CsvRow {
        CsvRow {
            run_id: "r".into(),
            phase: phase.into(),
            scheme: scheme.into(),
            seed: 0,
            fsr,
            ppl: 2.0,
            acc: 1.0,
        }
    }

    #[test]
    fn groups_and_averages() {
        let rows = vec![
            row("fingerprinted", "hash_chain", 1.0),
            row("erased", "hash_chain", 0.0),
            row("fingerprinted", "hash_chain", 0.5),
            row("fingerprinted", "many_to_one", 1.0),
        ];
        let a = aggregate(&rows);
        assert_eq!(a.len(), 3);
        assert_eq!((a[0].phase.as_str(), a[0].scheme.as_str(), a[0].n, a[0].fsr), ("fingerprinted", "hash_chain", 2, 0.75));
        assert_eq!(a[2].phase, "erased");
        assert!(render(&a).lines().count() == 4);
    }

    #[test]
    fn reads_what_the_pipeline_writes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "run_id,phase,scheme,seed,fsr,ppl,acc\nseed0,base,hash_chain,0,0,1.5,0.9\n").unwrap();
        let rows = read_rows(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].ppl, 1.5);
    }
}
