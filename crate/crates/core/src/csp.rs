//! Common spatial patterns.
//!
//! Two-class CSP solves `C_A w = λ (C_A + C_B) w` by whitening with the
//! Cholesky factor of `C_A + C_B` and diagonalising the whitened `C_A`.
//! The resulting filters satisfy `Wᵀ (C_A + C_B) W = I`, and each
//! eigenvalue is the share of class-A variance along its filter.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::domain::Epoch;
use crate::error::{Error, Result};

pub(crate) fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}


/// Mean-removed sample covariance (`1/(n-1)`) of a `[channels, samples]` block.
pub fn sample_covariance(data: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = data.ncols();
    if n < 2 {
        return Err(Error::Empty("need at least two samples for a covariance".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("epoch data".into()));
    }
    let mean = data.mean_axis(Axis(1)).expect("non-empty");
    let centered = &data - &mean.insert_axis(Axis(1));
    Ok(centered.dot(&centered.t()) / (n - 1) as f64)
}

/// Per-epoch second-order statistics, reusable across CSP fits.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub cov: Array2<f64>,
    pub trace: f64,
}

impl EpochStats {
    pub fn new(epoch: &Epoch) -> Result<Self> {
        let cov = sample_covariance(epoch.data.view())?;
        let trace = cov.diag().sum();
        if !(trace > 0.0) {
            return Err(Error::Numerical(format!(
                "epoch of trial {} has zero variance",
                epoch.trial_id
            )));
        }
        Ok(Self { cov, trace })
    }
}

fn check_positive_definite(m: &Array2<f64>, what: &str) -> Result<()> {
    let eig = SymmetricEigen::new(to_na(m.view()));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max.abs()) || !max.is_finite() {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} has eigenvalue range [{min:e}, {max:e}]; increase reg_lambda"
        )));
    }
    Ok(())
}

/// Average of trace-normalised covariances, shrunk toward `(trace/n)·I`.
pub(crate) fn mean_covariance<'a>(
    stats: impl IntoIterator<Item = &'a EpochStats>,
    reg_lambda: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&reg_lambda) {
        return Err(Error::Config(format!("reg_lambda must lie in [0, 1], got {reg_lambda}")));
    }
    let mut acc: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for s in stats {
        match acc.as_mut() {
            Some(a) => {
                if a.dim() != s.cov.dim() {
                    return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", s.cov.dim())));
                }
                a.scaled_add(1.0 / s.trace, &s.cov);
            }
            None => acc = Some(&s.cov / s.trace),
        }
        count += 1;
    }
    let mut c = acc.ok_or_else(|| Error::Empty("no epochs for covariance".into()))?;
    c /= count as f64;
    let n = c.nrows();
    let nu = c.diag().sum() / n as f64;
    c *= 1.0 - reg_lambda;
    for i in 0..n {
        c[[i, i]] += reg_lambda * nu;
    }
    // exact symmetry
    let c = (&c + &c.t()) / 2.0;
    check_positive_definite(&c, "class covariance")?;
    Ok(c)
}

/// Regularised class covariance of a set of epochs.
pub fn covariance(epochs: &[&Epoch], reg_lambda: f64) -> Result<Array2<f64>> {
    let stats = epochs
        .iter()
        .map(|e| EpochStats::new(e))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = epochs.first() {
        if epochs.iter().any(|e| e.n_channels() != first.n_channels()) {
            return Err(Error::shape(
                format!("{} channels", first.n_channels()),
                "mixed channel counts",
            ));
        }
    }
    mean_covariance(&stats, reg_lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CspModel {
    /// `[n_channels, n_channels]`; column `j` is the `j`-th filter.
    pub projection: Array2<f64>,
    /// Descending, in (0, 1).
    pub eigenvalues: Array1<f64>,
    pub n_select: usize,
    pub reg_lambda: f64,
}

impl CspModel {
    /// Solve the generalised eigenproblem for two class covariances.
    pub fn from_covariances(
        cov_a: &Array2<f64>,
        cov_b: &Array2<f64>,
        n_select: usize,
        reg_lambda: f64,
    ) -> Result<Self> {
        let n = cov_a.nrows();
        if cov_a.dim() != (n, n) || cov_b.dim() != (n, n) {
            return Err(Error::shape(
                format!("two {n}x{n} matrices"),
                format!("{:?} and {:?}", cov_a.dim(), cov_b.dim()),
            ));
        }
        if n_select == 0 || 2 * n_select > n {
            return Err(Error::Config(format!(
                "n_select must be in 1..={} for {n} channels, got {n_select}",
                n / 2
            )));
        }
        let composite = to_na((cov_a + cov_b).view());
        let chol = composite.cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite(
                "composite covariance C_A + C_B; increase reg_lambda".into(),
            )
        })?;
        let l = chol.l();
        let l_inv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let whitened = &l_inv * to_na(cov_a.view()) * l_inv.transpose();
        let whitened = (&whitened + whitened.transpose()) * 0.5;
        let eig = SymmetricEigen::new(whitened);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let filters = l_inv.transpose() * &eig.eigenvectors;

        let mut projection = Array2::zeros((n, n));
        let mut eigenvalues = Array1::zeros(n);
        for (dst, &src) in order.iter().enumerate() {
            let col = filters.column(src);
            let sign = col
                .iter()
                .find(|v| v.abs() > 1e-12)
                .map(|v| v.signum())
                .unwrap_or(1.0);
            for i in 0..n {
                projection[[i, dst]] = sign * col[i];
            }
            eigenvalues[dst] = eig.eigenvalues[src];
        }
        Ok(Self {
            projection,
            eigenvalues,
            n_select,
            reg_lambda,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.projection.nrows()
    }

    pub fn n_features(&self) -> usize {
        2 * self.n_select
    }

    /// Indices of the first and last `n_select` filters.
    pub fn selected(&self) -> Vec<usize> {
        let n = self.n_channels();
        (0..self.n_select).chain(n - self.n_select..n).collect()
    }

    fn selected_filters(&self) -> Array2<f64> {
        self.projection.select(Axis(1), &self.selected())
    }

    /// Normalised log-variance features from an epoch's sample covariance.
    pub fn features_from_covariance(&self, cov: &Array2<f64>) -> Result<Array1<f64>> {
        if cov.dim() != (self.n_channels(), self.n_channels()) {
            return Err(Error::shape(
                format!("{} channels", self.n_channels()),
                format!("{} channels", cov.nrows()),
            ));
        }
        let w = self.selected_filters();
        let cw = cov.dot(&w);
        let var: Array1<f64> = (&w * &cw).sum_axis(Axis(0));
        log_variance(var)
    }
}

fn log_variance(var: Array1<f64>) -> Result<Array1<f64>> {
    let total: f64 = var.sum();
    if !(total > 0.0) || var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("zero variance in projected epoch".into()));
    }
    Ok(var.mapv(|v| (v / total).ln()))
}

/// Fit CSP with class A = `epochs_a`.
pub fn fit_csp(
    epochs_a: &[&Epoch],
    epochs_b: &[&Epoch],
    n_select: usize,
    reg_lambda: f64,
) -> Result<CspModel> {
    if epochs_a.is_empty() || epochs_b.is_empty() {
        return Err(Error::Empty("both CSP classes need epochs".into()));
    }
    let ca = covariance(epochs_a, reg_lambda)?;
    let cb = covariance(epochs_b, reg_lambda)?;
    CspModel::from_covariances(&ca, &cb, n_select, reg_lambda)
}

/// Project an epoch through the selected filters and return the log of
/// each filtered channel's share of the total selected variance.
pub fn csp_features(model: &CspModel, epoch: &Epoch) -> Result<Array1<f64>> {
    if epoch.n_channels() != model.n_channels() {
        return Err(Error::shape(
            format!("{} channels", model.n_channels()),
            format!("{} channels", epoch.n_channels()),
        ));
    }
    if !epoch.is_finite() {
        return Err(Error::NonFinite(format!("epoch of trial {}", epoch.trial_id)));
    }
    let projected = model.selected_filters().t().dot(&epoch.data);
    let var = projected.var_axis(Axis(1), 1.0);
    log_variance(var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Condition, TextureClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn epoch(data: Array2<f64>) -> Epoch {
        Epoch {
            data,
            fs: 100.0,
            label: TextureClass::Fabric,
            condition: Condition::ActualTouch,
            trial_id: 0,
        }
    }

    fn noise(rng: &mut ChaCha8Rng, scales: &[f64], n: usize) -> Array2<f64> {
        Array2::from_shape_fn((scales.len(), n), |(c, _)| {
            let z: f64 = StandardNormal.sample(rng);
            scales[c] * z
        })
    }

    #[test]
    fn white_noise_covariance_is_half_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = epoch(noise(&mut rng, &[1.0, 1.0], 100_000));
        let c = covariance(&[&e], 0.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((c[[i, j]] - want).abs() < 0.02);
            }
        }
    }

    #[test]
    fn full_shrinkage_gives_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = epoch(noise(&mut rng, &[1.0, 3.0, 0.5], 500));
        let c = covariance(&[&e], 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((c[[i, j]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_channels_are_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = noise(&mut rng, &[1.0, 1.0, 1.0], 1000);
        let row = data.row(0).to_owned();
        data.row_mut(2).assign(&row);
        let e = epoch(data);
        assert!(matches!(covariance(&[&e], 0.0), Err(Error::NotPositiveDefinite(_))));
        assert!(covariance(&[&e], 0.05).is_ok());
        assert!(matches!(covariance(&[], 0.0), Err(Error::Empty(_))));
        let mut bad = e.clone();
        bad.data[[1, 5]] = f64::NAN;
        assert!(matches!(covariance(&[&bad], 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn two_channel_toy_separates_sources() {
        // Class A: variance on channel 0 only (plus a faint floor); class B
        // on channel 1. Closed form: C_A = diag(a, e), C_B = diag(e, a)
        // after trace normalisation, so λ₁ = a/(a+e) and w ∝ (1, 0).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Epoch> = (0..10).map(|_| epoch(noise(&mut rng, &[1.0, 0.05], 2000))).collect();
        let b: Vec<Epoch> = (0..10).map(|_| epoch(noise(&mut rng, &[0.05, 1.0], 2000))).collect();
        let ra: Vec<&Epoch> = a.iter().collect();
        let rb: Vec<&Epoch> = b.iter().collect();
        let m = fit_csp(&ra, &rb, 1, 0.0).unwrap();
        let w = m.projection.column(0);
        assert!((w[1] / w[0]).abs() < 0.1);
        assert!(m.eigenvalues[0] > 0.9);
        assert!(m.eigenvalues[1] < 0.1);
        assert!(w[0] > 0.0);
    }

    #[test]
    fn whitening_and_complementarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Epoch> = (0..6).map(|_| epoch(noise(&mut rng, &[1.0, 2.0, 0.5, 1.5], 400))).collect();
        let b: Vec<Epoch> = (0..6).map(|_| epoch(noise(&mut rng, &[2.0, 0.7, 1.0, 1.0], 400))).collect();
        let ra: Vec<&Epoch> = a.iter().collect();
        let rb: Vec<&Epoch> = b.iter().collect();
        let ca = covariance(&ra, 0.05).unwrap();
        let cb = covariance(&rb, 0.05).unwrap();
        let m = CspModel::from_covariances(&ca, &cb, 2, 0.05).unwrap();
        let w = &m.projection;
        let white = w.t().dot(&(&ca + &cb)).dot(w);
        let wb = w.t().dot(&cb).dot(w);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((white[[i, j]] - want).abs() < 1e-8);
            }
            assert!((wb[[i, i]] - (1.0 - m.eigenvalues[i])).abs() < 1e-8);
            assert!(m.eigenvalues[i] > 0.0 && m.eigenvalues[i] < 1.0);
        }
        assert!(m.eigenvalues.windows(2).into_iter().all(|p| p[0] >= p[1]));
    }

    #[test]
    fn features_match_hand_computation_on_toy_projection() {
        let model = CspModel {
            projection: ndarray::array![[1.0, 0.5], [0.0, 2.0]],
            eigenvalues: ndarray::array![0.8, 0.2],
            n_select: 1,
            reg_lambda: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = epoch(noise(&mut rng, &[1.0, 1.0], 3000));
        let f = csp_features(&model, &e).unwrap();
        assert_eq!(f.len(), 2);

        let x0 = e.data.row(0);
        let x1 = e.data.row(1);
        let var = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let v0 = var(x0.to_vec());
        let v1 = var(x0.iter().zip(x1.iter()).map(|(a, b)| 0.5 * a + 2.0 * b).collect());
        assert!((f[0] - (v0 / (v0 + v1)).ln()).abs() < 1e-10);
        assert!((f[1] - (v1 / (v0 + v1)).ln()).abs() < 1e-10);

        let via_cov = model
            .features_from_covariance(&EpochStats::new(&e).unwrap().cov)
            .unwrap();
        assert!((&via_cov - &f).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn features_are_scale_invariant_and_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<Epoch> = (0..4).map(|_| epoch(noise(&mut rng, &[1.0, 2.0, 0.5, 1.0, 0.3, 1.0, 2.0], 300))).collect();
        let b: Vec<Epoch> = (0..4).map(|_| epoch(noise(&mut rng, &[2.0, 1.0, 1.0, 0.4, 1.0, 1.0, 0.5], 300))).collect();
        let ra: Vec<&Epoch> = a.iter().collect();
        let rb: Vec<&Epoch> = b.iter().collect();
        let m = fit_csp(&ra, &rb, 3, 0.05).unwrap();
        let f = csp_features(&m, &a[0]).unwrap();
        assert_eq!(f.len(), 6);
        let scaled = epoch(&a[0].data * 10.0);
        let g = csp_features(&m, &scaled).unwrap();
        assert!((&f - &g).iter().all(|d| d.abs() < 1e-9));

        let flat = epoch(Array2::zeros((7, 300)));
        assert!(csp_features(&m, &flat).is_err());
        let short = epoch(Array2::ones((3, 300)));
        assert!(matches!(csp_features(&m, &short), Err(Error::Shape { .. })));
        assert!(fit_csp(&ra, &rb, 4, 0.05).is_err());
    }
}
