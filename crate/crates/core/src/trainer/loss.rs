//! Contrastive objective with its gradient w.r.t. the raw embeddings.
//!
//! For `M = 2N` rows `z_i` with unit directions `u_i` and cosine
//! similarities `s_ik = u_i . u_k`:
//!
//! * alignment term: mean over anchors of
//!   `-s_{i,p(i)}/tau + log sum_{k != i} exp(s_ik/tau)`
//! * variance term: `lambda / (V + eps)` with `V` the mean squared distance
//!   of the raw rows from their mean
//! * uniformity term: `log mean_{i<j} exp(-2 |u_i - u_j|^2)`, weighted.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub var_reg: f64,
    pub var_eps: f64,
    pub uniformity_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, var_reg: 1.0, var_eps: 1e-4, uniformity_weight: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub nt_xent: f64,
    pub variance: f64,
    pub uniformity: f64,
    /// `d total / d z`, same shape as the input.
    pub grad: Array2<f64>,
}

/// Row `i` pairs with row `(i + N) mod 2N`.
pub fn halves_pairing(m: usize) -> Vec<usize> {
    let n = m / 2;
    (0..m).map(|i| (i + n) % m).collect()
}

pub fn contrastive_loss(z: &Array2<f64>, pair: &[usize], cfg: &LossConfig) -> Result<LossOutput> {
    let (m, _) = z.dim();
    if m < 4 || m % 2 != 0 || pair.len() != m {
        return Err(Error::invalid(format!("contrastive loss needs N >= 2 positive pairs (got {m} rows)")));
    }
    if pair.iter().enumerate().any(|(i, &p)| p >= m || p == i || pair[p] != i) {
        return Err(Error::invalid("pair index must be a fixed-point-free involution"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite embedding"));
    }
    let norms: Array1<f64> = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::invalid("zero-norm embedding row"));
    }
    let u = z / &norms.view().insert_axis(Axis(1));
    let s = u.dot(&u.t());
    let tau = cfg.temperature;
    let mf = m as f64;

    // Alignment: per-anchor softmax over k != i.
    let mut nt = 0.0;
    let mut g = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        let row = s.row(i);
        let mx = (0..m).filter(|&k| k != i).map(|k| row[k] / tau).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] / tau - mx).exp()).sum();
        nt += -row[pair[i]] / tau + mx + denom.ln();
        for k in 0..m {
            if k != i {
                g[[i, k]] = (row[k] / tau - mx).exp() / denom / (tau * mf);
            }
        }
        g[[i, pair[i]]] -= 1.0 / (tau * mf);
    }
    nt /= mf;
    let mut du = (&g + &g.t()).dot(&u);

    // Uniformity over distinct pairs.
    let mut esum = 0.0;
    let mut e = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let d2 = (2.0 - 2.0 * s[[i, j]]).max(0.0);
            let v = (-2.0 * d2).exp();
            e[[i, j]] = v;
            e[[j, i]] = v;
            esum += v;
        }
    }
    let pairs = mf * (mf - 1.0) / 2.0;
    let unif = (esum / pairs).ln();
    if cfg.uniformity_weight != 0.0 {
        // On the sphere |u_i - u_j|^2 = 2 - 2 s_ij, so d e_ij / d u_i = 4 e_ij u_j.
        du.scaled_add(cfg.uniformity_weight * 4.0 / esum, &e.dot(&u));
    }

    // Back through the normalisation.
    let mut grad = Array2::zeros((m, z.ncols()));
    for i in 0..m {
        let ui = u.row(i);
        let dui = du.row(i);
        let proj = ui.dot(&dui);
        grad.row_mut(i).assign(&((&dui - &(&ui * proj)) / norms[i]));
    }

    // Variance on the raw rows.
    let mean = z.mean_axis(Axis(0)).expect("rows");
    let centred = z - &mean;
    let var = centred.iter().map(|v| v * v).sum::<f64>() / mf;
    let lv = cfg.var_reg / (var + cfg.var_eps);
    if cfg.var_reg != 0.0 {
        let coef = -cfg.var_reg / (var + cfg.var_eps).powi(2) * 2.0 / mf;
        grad.scaled_add(coef, &centred);
    }

    let total = nt + lv + cfg.uniformity_weight * unif;
    if !total.is_finite() {
        return Err(Error::Diverged(format!("loss evaluated to {total}")));
    }
    Ok(LossOutput { total, nt_xent: nt, variance: lv, uniformity: unif, grad })
}
