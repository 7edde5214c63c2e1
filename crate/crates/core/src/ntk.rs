//! Empirical neural tangent kernel tools: per-example gradient features, the
//! kernel-ridge transfer effect between two tasks, and the residual
//! experiment comparing true and shuffled labels.

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numkit::{log_softmax, Rng};
use crate::tinylm::{loss_gradients, target_logprobs, DialogueDataset, Pair, TinyLM};

pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Upper bound on `rows × parameters` held in one feature matrix.
pub const MAX_FEATURE_ENTRIES: usize = 50_000_000;

/// Row-major `[rows × cols]` gradient features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub model_id: String,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("feature rows differ in length"));
        }
        Ok(FeatureMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
            model_id: String::new(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · otherᵀ`.
    pub fn gram(&self, other: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        if self.cols != other.cols {
            return Err(Error::dim(format!("{} vs {} feature columns", self.cols, other.cols)));
        }
        Ok((0..self.rows)
            .map(|i| {
                (0..other.rows)
                    .map(|j| self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }
}

/// Row `i` is the gradient, with respect to every base weight, of the summed
/// log-probability of `pairs[i].output` given its input.
pub fn features(model: &TinyLM, pairs: &[Pair]) -> Result<FeatureMatrix> {
    if pairs.is_empty() {
        return Err(Error::input("no inputs to featurize"));
    }
    let model = model.merged()?;
    let cols = model.num_params();
    if pairs.len().saturating_mul(cols) > MAX_FEATURE_ENTRIES {
        return Err(Error::Capacity(format!(
            "{} rows × {cols} parameters exceeds {MAX_FEATURE_ENTRIES}",
            pairs.len()
        )));
    }
    let mut data = Vec::with_capacity(pairs.len() * cols);
    for p in pairs {
        let (_, g) = loss_gradients(&model, &[p])?;
        // The loss is the mean negative log-probability over output tokens.
        let scale = -(p.output.len() as f64);
        data.extend(g.flatten().into_iter().map(|x| scale * f64::from(x)));
    }
    Ok(FeatureMatrix {
        rows: pairs.len(),
        cols,
        data,
        model_id: checkpoint::digest(model.params())?,
    })
}

/// In-place Cholesky factor of a symmetric matrix; `None` if it is not
/// positive definite.
fn cholesky(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| a[j][k] * a[j][k]).sum::<f64>();
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..n {
            a[i][j] = (a[i][j] - (0..j).map(|k| a[i][k] * a[j][k]).sum::<f64>()) / d;
        }
    }
    Some(a)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// `‖K_XF (K_FF + λI)⁻¹ ỹ‖²` from precomputed kernel blocks.
pub fn transfer_effect_kernels(k_xf: &[Vec<f64>], k_ff: &[Vec<f64>], residual: &[f64], lambda: f64) -> Result<f64> {
    let n = k_ff.len();
    if residual.len() != n || k_ff.iter().any(|r| r.len() != n) || k_xf.iter().any(|r| r.len() != n) {
        return Err(Error::dim(format!("kernel blocks do not match {} residuals", residual.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::input(format!("lambda {lambda} must be finite and >= 0")));
    }
    let mut a = k_ff.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    let l = cholesky(a).ok_or_else(|| {
        Error::Singular(format!("K_FF + {lambda}·I is not positive definite"))
    })?;
    let alpha = cholesky_solve(&l, residual);
    Ok(k_xf
        .iter()
        .map(|row| row.iter().zip(&alpha).map(|(k, a)| k * a).sum::<f64>().powi(2))
        .sum())
}

/// How strongly fitting residual `ỹ` on the `phi_f` inputs moves the outputs
/// on the `phi_x` inputs, under the linearized model.
pub fn transfer_effect(phi_x: &FeatureMatrix, phi_f: &FeatureMatrix, residual: &[f64], lambda: f64) -> Result<f64> {
    let k_xf = phi_x.gram(phi_f)?;
    let k_ff = phi_f.gram(phi_f)?;
    transfer_effect_kernels(&k_xf, &k_ff, residual, lambda)
}

/// Negative summed log-probability of each pair's output: the residual a
/// step on the log-likelihood of `pairs` tries to remove.
pub fn sequence_nll(model: &TinyLM, pairs: &[Pair]) -> Result<Vec<f64>> {
    let data = DialogueDataset::new(crate::tinylm::Provenance::Base, pairs.to_vec());
    let lp = target_logprobs(&model.merged()?, &data)?;
    let mut out = Vec::with_capacity(pairs.len());
    let mut at = 0;
    for p in pairs {
        out.push(-lp[at..at + p.output.len()].iter().sum::<f64>());
        at += p.output.len();
    }
    Ok(out)
}

/// Transfer effect on `probe` inputs of fitting the likelihood residual of
/// `fit` under the kernel of `model`.
pub fn likelihood_transfer(model: &TinyLM, probe: &[Pair], fit: &[Pair], lambda: f64) -> Result<f64> {
    let phi_x = features(model, probe)?;
    let phi_f = features(model, fit)?;
    transfer_effect(&phi_x, &phi_f, &sequence_nll(model, fit)?, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub n_shuffles: usize,
    pub mean_true: f64,
    pub mean_shuffled: f64,
    /// Shuffles whose residual beat the true one; ties count one half.
    pub wins: f64,
    pub win_rate: f64,
}

/// Mean over pairs of `‖onehot(y) − softmax‖₂` across output positions.
fn mean_residual_norm(model: &TinyLM, data: &DialogueDataset) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.pairs.chunks(64) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let (logits, targets) = model.output_logits(&refs)?;
        let mut row = 0;
        for p in chunk {
            let mut sq = 0.0;
            for _ in &p.output {
                let t = targets[row] as usize;
                for (j, lp) in log_softmax(logits.row(row)).into_iter().enumerate() {
                    let r = f64::from(j == t) - lp.exp();
                    sq += r * r;
                }
                row += 1;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / data.len() as f64)
}

/// Compares the residual under the true labels with the residual after
/// randomly reassigning outputs to inputs, `n_shuffles` times.
pub fn residual_experiment(model: &TinyLM, data: &DialogueDataset, n_shuffles: usize, seed: u64) -> Result<ResidualSummary> {
    if data.is_empty() {
        return Err(Error::input("residual experiment needs data"));
    }
    let model = model.merged()?;
    let mean_true = mean_residual_norm(&model, data)?;
    if n_shuffles == 0 {
        return Ok(ResidualSummary {
            n_shuffles: 0,
            mean_true,
            mean_shuffled: 0.0,
            wins: 0.0,
            win_rate: 0.0,
        });
    }
    let mut rng = Rng::derive(seed, "residual-shuffle");
    let (mut wins, mut sum) = (0.0, 0.0);
    for _ in 0..n_shuffles {
        let perm = rng.permutation(data.len());
        let mut shuffled = data.clone();
        for (p, &j) in shuffled.pairs.iter_mut().zip(&perm) {
            p.output = data.pairs[j].output.clone();
        }
        let s = mean_residual_norm(&model, &shuffled)?;
        sum += s;
        wins += if s > mean_true {
            1.0
        } else if s == mean_true {
            0.5
        } else {
            0.0
        };
    }
    Ok(ResidualSummary {
        n_shuffles,
        mean_true,
        mean_shuffled: sum / n_shuffles as f64,
        wins,
        win_rate: wins / n_shuffles as f64,
    })
}
