//! Four-class one-versus-rest classifier built from CSP + LDA pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::csp::{mean_covariance, CspModel, EpochStats};
use crate::domain::{Epoch, TextureClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::lda::{fit_lda, LdaModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CspLdaParams {
    /// Filters kept from each end of the CSP spectrum.
    pub n_select: usize,
    pub reg_lambda: f64,
    pub gamma: f64,
}

impl Default for CspLdaParams {
    fn default() -> Self {
        Self {
            n_select: 3,
            reg_lambda: 0.05,
            gamma: 0.1,
        }
    }
}

impl CspLdaParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_select == 0 {
            return Err(Error::Config("csp.n_select must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reg_lambda) {
            return Err(Error::Config("csp.reg_lambda must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("lda.gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OvrPair {
    pub csp: CspModel,
    pub lda: LdaModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OvrClassifier {
    /// Indexed by class code.
    pub pairs: Vec<OvrPair>,
}

/// Index of the largest score; ties go to the lowest class code.
pub fn argmax_class(scores: &[f64; N_CLASSES]) -> TextureClass {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    TextureClass::ALL[best]
}

fn check_classes(labels: &[TextureClass]) -> Result<()> {
    for class in TextureClass::ALL {
        let k = labels.iter().filter(|l| **l == class).count();
        match k {
            0 => return Err(Error::MissingClass(class.name().to_string())),
            1 => {
                return Err(Error::MissingClass(format!(
                    "{} (only one training epoch; need at least two)",
                    class.name()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Fit from precomputed per-epoch statistics. Cross-validation uses this
/// to avoid recomputing covariances for every fold.
pub fn fit_ovr_stats(
    stats: &[&EpochStats],
    labels: &[TextureClass],
    params: &CspLdaParams,
) -> Result<OvrClassifier> {
    params.validate()?;
    if stats.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", stats.len()), labels.len()));
    }
    check_classes(labels)?;
    let mut pairs = Vec::with_capacity(N_CLASSES);
    for class in TextureClass::ALL {
        let (pos, neg): (Vec<_>, Vec<_>) = stats
            .iter()
            .zip(labels)
            .partition(|(_, l)| **l == class);
        let ca = mean_covariance(pos.iter().map(|(s, _)| **s), params.reg_lambda)?;
        let cb = mean_covariance(neg.iter().map(|(s, _)| **s), params.reg_lambda)?;
        let csp = CspModel::from_covariances(&ca, &cb, params.n_select, params.reg_lambda)?;
        let mut x = Array2::zeros((stats.len(), csp.n_features()));
        for (i, s) in stats.iter().enumerate() {
            x.row_mut(i).assign(&csp.features_from_covariance(&s.cov)?);
        }
        let y: Vec<bool> = labels.iter().map(|l| *l == class).collect();
        let lda = fit_lda(x.view(), &y, params.gamma)?;
        pairs.push(OvrPair { csp, lda });
    }
    Ok(OvrClassifier { pairs })
}

/// Fit one CSP + LDA pair per class against all other classes.
pub fn fit_ovr(train: &[&Epoch], params: &CspLdaParams) -> Result<OvrClassifier> {
    let labels: Vec<TextureClass> = train.iter().map(|e| e.label).collect();
    check_classes(&labels)?;
    let stats = train
        .iter()
        .map(|e| EpochStats::new(e))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EpochStats> = stats.iter().collect();
    fit_ovr_stats(&refs, &labels, params)
}

impl OvrClassifier {
    pub fn n_channels(&self) -> usize {
        self.pairs[0].csp.n_channels()
    }

    pub fn scores_from_stats(&self, stats: &EpochStats) -> Result<[f64; N_CLASSES]> {
        let mut scores = [0.0; N_CLASSES];
        for (s, pair) in scores.iter_mut().zip(&self.pairs) {
            let f = pair.csp.features_from_covariance(&stats.cov)?;
            *s = pair.lda.decision(f.view());
        }
        Ok(scores)
    }

    pub fn predict(&self, epoch: &Epoch) -> Result<(TextureClass, [f64; N_CLASSES])> {
        if epoch.n_channels() != self.n_channels() {
            return Err(Error::shape(
                format!("{} channels", self.n_channels()),
                format!("{} channels", epoch.n_channels()),
            ));
        }
        let scores = self.scores_from_stats(&EpochStats::new(epoch)?)?;
        Ok((argmax_class(&scores), scores))
    }
}

pub fn predict(clf: &OvrClassifier, epoch: &Epoch) -> Result<(TextureClass, [f64; N_CLASSES])> {
    clf.predict(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Condition;

    #[test]
    fn argmax_and_tie_rule() {
        assert_eq!(argmax_class(&[2.0, -1.0, -1.5, 0.5]), TextureClass::Fabric);
        assert_eq!(argmax_class(&[1.0, 1.0, -3.0, -3.0]), TextureClass::Fabric);
        assert_eq!(argmax_class(&[-1.0, 0.0, 0.0, -3.0]), TextureClass::Glass);
        assert_eq!(argmax_class(&[-1.0, 0.0, 0.0, 4.0]), TextureClass::Fur);
    }

    #[test]
    fn missing_class_is_named() {
        let e = Epoch {
            data: Array2::from_shape_fn((4, 50), |(c, t)| ((c * 7 + t * 3) % 11) as f64),
            fs: 100.0,
            label: TextureClass::Fabric,
            condition: Condition::ActualTouch,
            trial_id: 0,
        };
        let train = vec![&e, &e, &e];
        let err = fit_ovr(&train, &CspLdaParams::default()).unwrap_err();
        assert_eq!(err.to_string(), "missing class: Glass");
    }
}
