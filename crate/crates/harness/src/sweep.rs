//! One-axis parameter sweeps over full pipeline runs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use erasure_lab::fingerprint::Scheme;
use erasure_lab::metrics::write_csv;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{is_nonempty_dir, run_pipeline, RunOutcome};

pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    MismatchedN,
    CleanN,
    Scheme,
    Seed,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::MismatchedN, Axis::CleanN, Axis::Scheme, Axis::Seed];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::MismatchedN => "mismatched_n",
            Axis::CleanN => "clean_n",
            Axis::Scheme => "scheme",
            Axis::Seed => "seed",
        }
    }

    /// `base` with this axis set to `value`, validated.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = |e: &dyn fmt::Display| HarnessError::Config(format!("sweep {self}={value}: {e}"));
        let int = || value.parse::<usize>().map_err(|e| bad(&e));
        let mut cfg = base.clone();
        match self {
            Axis::MismatchedN => cfg.data.mismatched_n = int()?,
            Axis::CleanN => cfg.data.clean_n = int()?,
            Axis::Scheme => cfg.schemes = vec![value.parse::<Scheme>().map_err(|e| bad(&e))?],
            Axis::Seed => cfg.seed = value.parse::<u64>().map_err(|e| bad(&e))?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown sweep axis `{s}`")))
    }
}

/// Runs the pipeline once per value into `out/<axis>-<value>/` and writes a
/// combined `out/sweep.csv` whose run ids are `<axis>=<value>`. Every value
/// is validated before any run starts.
pub fn run_sweep(base: &RunConfig, axis: Axis, values: &[String], out: &Path, force: bool) -> Result<Vec<RunOutcome>> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let cfgs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    if is_nonempty_dir(out)? && !force {
        return Err(HarnessError::Exists(out.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    let mut outcomes = Vec::new();
    let mut rows = Vec::new();
    for (v, cfg) in values.iter().zip(cfgs) {
        let o = run_pipeline(&cfg, &out.join(format!("{axis}-{v}")), force)?;
        let id = format!("{axis}={v}");
        rows.extend(o.rows.iter().map(|r| (id.clone(), r.scheme.to_string(), r.report.clone())));
        outcomes.push(o);
    }
    write_csv(fs::File::create(out.join(SWEEP_CSV))?, &rows)?;
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse_and_apply() {
        let base = RunConfig::default();
        for a in Axis::ALL {
            assert_eq!(a.as_str().parse::<Axis>().unwrap(), a);
        }
        assert_eq!(Axis::MismatchedN.apply(&base, "100").unwrap().data.mismatched_n, 100);
        assert_eq!(Axis::CleanN.apply(&base, "50").unwrap().data.clean_n, 50);
        assert_eq!(Axis::Seed.apply(&base, "7").unwrap().seed, 7);
        assert_eq!(Axis::Scheme.apply(&base, "rare_token").unwrap().schemes, vec![Scheme::RareToken]);
        assert!("epochs".parse::<Axis>().is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let base = RunConfig::default();
        for (a, v) in [
            (Axis::MismatchedN, "1"),
            (Axis::MismatchedN, "ten"),
            (Axis::CleanN, "5000"),
            (Axis::Scheme, "watermark"),
        ] {
            assert_eq!(a.apply(&base, v).unwrap_err().exit_code(), 2, "{a}={v}");
        }
    }

    #[test]
    fn sweep_validates_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_sweep(&RunConfig::default(), Axis::Seed, &["1".into(), "x".into()], dir.path(), false);
        assert!(matches!(err, Err(HarnessError::Config(_))));
        assert!(!is_nonempty_dir(dir.path()).unwrap());
    }
}
