//! Shrinkage linear discriminant analysis for two classes.

use nalgebra::DVector;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::csp::to_na;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub shrinkage_gamma: f64,
}

impl LdaModel {
    /// Signed score; positive favours the `true` class.
    pub fn decision(&self, x: ArrayView1<f64>) -> f64 {
        self.weights.dot(&x) + self.bias
    }

    pub fn decision_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.bias
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Fit on `features` (`[n, d]`) with boolean targets.
///
/// The pooled within-class covariance is shrunk as
/// `(1-γ)Σ + γ(tr Σ / d) I`. With `γ = 0` a singular covariance is an
/// error rather than a silent pseudo-inverse.
pub fn fit_lda(features: ArrayView2<f64>, targets: &[bool], gamma: f64) -> Result<LdaModel> {
    let (n, d) = features.dim();
    if targets.len() != n {
        return Err(Error::shape(format!("{n} targets"), targets.len()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("shrinkage gamma must lie in [0, 1], got {gamma}")));
    }
    if d == 0 {
        return Err(Error::Empty("zero-dimensional features".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LDA features".into()));
    }
    let pos: Vec<usize> = (0..n).filter(|&i| targets[i]).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| !targets[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::MissingClass(
            "LDA needs samples from both classes".into(),
        ));
    }

    let xp = features.select(Axis(0), &pos);
    let xn = features.select(Axis(0), &neg);
    let mp = xp.mean_axis(Axis(0)).expect("non-empty");
    let mn = xn.mean_axis(Axis(0)).expect("non-empty");
    let cp = &xp - &mp;
    let cn = &xn - &mn;
    let dof = (n as f64 - 2.0).max(1.0);
    let mut sigma: Array2<f64> = (cp.t().dot(&cp) + cn.t().dot(&cn)) / dof;
    let nu = sigma.diag().sum() / d as f64;
    sigma *= 1.0 - gamma;
    for i in 0..d {
        sigma[[i, i]] += gamma * nu;
    }

    let diff = &mp - &mn;
    let chol = to_na(sigma.view()).cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite("pooled LDA covariance; use gamma > 0".into())
    })?;
    // Cholesky succeeds on matrices that are singular up to rounding, so
    // check the pivots explicitly.
    let l = chol.l();
    let max_pivot = (0..d).map(|i| l[(i, i)]).fold(0.0f64, f64::max);
    if (0..d).any(|i| l[(i, i)] <= 1e-7 * max_pivot) {
        return Err(Error::NotPositiveDefinite(
            "pooled LDA covariance is singular; use gamma > 0".into(),
        ));
    }
    let w = chol.solve(&DVector::from_iterator(d, diff.iter().copied()));
    let weights = Array1::from_iter(w.iter().copied());
    let mid = (&mp + &mn) / 2.0;
    let bias = -weights.dot(&mid);
    Ok(LdaModel {
        weights,
        bias,
        shrinkage_gamma: gamma,
    })
}
