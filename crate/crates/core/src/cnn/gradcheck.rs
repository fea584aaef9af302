use super::{backward, forward, CnnInput, CnnModel, Mode, PARAM_GROUPS};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, DENOM_FLOOR)`
    /// per parameter group.
    pub per_group: Vec<(&'static str, f64)>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<f64> {
        self.per_group.iter().find(|(n, _)| *n == name).map(|(_, e)| *e)
    }
}

/// Groups whose true gradient vanishes (the BN1 shift under batch
/// statistics is cancelled by BN2) would otherwise compare rounding noise
/// with rounding noise.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Compare analytic gradients with central differences for every
/// parameter. `batch_stats = false` checks eval mode (frozen running
/// statistics); `true` checks the batch-statistics path. Dropout is off
/// in both cases.
pub fn grad_check(
    model: &CnnModel,
    batch: &[&CnnInput],
    epsilon: f64,
    batch_stats: bool,
) -> Result<GradCheckReport> {
    let mode = if batch_stats { Mode::Train } else { Mode::Eval };
    let pass = forward(model, batch, mode, None)?;
    let analytic = backward(model, batch, &pass, mode);

    let mut probe = model.clone();
    let mut per_group = Vec::with_capacity(PARAM_GROUPS.len());
    for (gi, name) in PARAM_GROUPS.iter().enumerate() {
        let n = analytic.groups()[gi].len();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..n {
            let orig = probe.params.groups_mut()[gi][i];
            probe.params.groups_mut()[gi][i] = orig + epsilon;
            let up = forward(&probe, batch, mode, None)?.loss(batch);
            probe.params.groups_mut()[gi][i] = orig - epsilon;
            let down = forward(&probe, batch, mode, None)?.loss(batch);
            probe.params.groups_mut()[gi][i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.groups()[gi][i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = (a2.sqrt() + n2.sqrt()).max(DENOM_FLOOR);
        per_group.push((*name, diff2.sqrt() / denom));
    }
    let max_rel_error = per_group.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_group,
        max_rel_error,
    })
}

/// Analytic gradient, exposed for diagnostics and tests.
pub fn analytic_gradient(model: &CnnModel, batch: &[&CnnInput], batch_stats: bool) -> Result<super::CnnParams> {
    let mode = if batch_stats { Mode::Train } else { Mode::Eval };
    let pass = forward(model, batch, mode, None)?;
    Ok(backward(model, batch, &pass, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::CnnArch;
    use crate::domain::TextureClass;
    use crate::seed::rng_for;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn reduced() -> (CnnModel, Vec<CnnInput>) {
        let arch = CnnArch {
            n_channels: 4,
            n_samples: 64,
            f1: 2,
            depth_mult: 2,
            f2: 4,
            temporal_kernel: 9,
            separable_kernel: 4,
            pool1: 4,
            pool2: 2,
            dropout_p: 0.25,
            n_classes: 4,
        };
        let mut rng = rng_for(11, "test", 0);
        let mut model = CnnModel::new(arch, &mut rng).unwrap();
        // Move BN away from the identity so every term is exercised.
        for g in [&mut model.bn1, &mut model.bn2, &mut model.bn3] {
            for v in g.mean.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            for v in g.var.iter_mut() {
                *v = rng.gen_range(0.5..2.0);
            }
        }
        for g in [&mut model.params.bn1_beta, &mut model.params.bn2_beta, &mut model.params.bn3_beta] {
            for v in g.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let inputs = (0..4)
            .map(|i| {
                let x: Vec<f64> = (0..4 * 64).map(|_| StandardNormal.sample(&mut rng)).collect();
                CnnInput::from_parts(x, 4, 64, TextureClass::ALL[i], 9).unwrap()
            })
            .collect();
        (model, inputs)
    }

    #[test]
    fn eval_mode_gradients_match() {
        let (model, inputs) = reduced();
        let refs: Vec<&CnnInput> = inputs.iter().collect();
        let r = grad_check(&model, &refs, 1e-4, false).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.group("dense_w").unwrap() < 1e-7, "{r:?}");
    }

    #[test]
    fn batch_statistics_gradients_match() {
        let (model, inputs) = reduced();
        let refs: Vec<&CnnInput> = inputs.iter().collect();
        let r = grad_check(&model, &refs, 1e-4, true).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn masked_filter_has_zero_gradient() {
        let (mut model, inputs) = reduced();
        let refs: Vec<&CnnInput> = inputs.iter().collect();
        // Dense weights reading separable filter 1 are zero, so that
        // filter's pointwise row cannot influence the loss.
        let t2 = model.arch.t2();
        let flat = model.arch.flat_dim();
        for k in 0..4 {
            for t in 0..t2 {
                model.params.dense_w[k * flat + t2 + t] = 0.0;
            }
        }
        for batch_stats in [false, true] {
            let g = analytic_gradient(&model, &refs, batch_stats).unwrap();
            let o = model.arch.n_depth();
            for v in &g.sep_point[o..2 * o] {
                assert!(v.abs() < 1e-10);
            }
            assert!(g.bn3_gamma[1].abs() < 1e-10 && g.bn3_beta[1].abs() < 1e-10);
        }
    }
}
