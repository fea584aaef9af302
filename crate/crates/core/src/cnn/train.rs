use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backward, forward, CnnInput, CnnModel, CnnParams, Mode};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_passes: usize,
    /// Stop after this many passes without a better validation score.
    pub patience: usize,
    /// Share of each training fold held out for checkpoint selection.
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_passes: 100,
            patience: 15,
            val_fraction: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.max_passes == 0 || self.patience == 0 {
            return Err(Error::Config(
                "train.batch_size, max_passes and patience must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("train.val_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassRecord {
    pub pass: usize,
    /// Running averages over the pass's mini-batches (train mode).
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation accuracy (lower loss breaks ties).
    pub model: CnnModel,
    pub best_pass: usize,
    pub history: Vec<PassRecord>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("pass,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.pass, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        s
    }
}

struct Adam {
    m: CnnParams,
    v: CnnParams,
    step: i32,
}

impl Adam {
    fn step(&mut self, params: &mut CnnParams, grad: &CnnParams, hp: &Hyperparams) {
        self.step += 1;
        let c1 = 1.0 - hp.beta1.powi(self.step);
        let c2 = 1.0 - hp.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .groups_mut()
            .into_iter()
            .zip(grad.groups())
            .zip(self.m.groups_mut())
            .zip(self.v.groups_mut())
        {
            for i in 0..p.len() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                p[i] -= hp.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.adam_eps);
            }
        }
    }
}

/// Mean loss and accuracy in eval mode.
pub(crate) fn evaluate(model: &CnnModel, inputs: &[&CnnInput]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in inputs.chunks(64) {
        let pass = forward(model, chunk, Mode::Eval, None)?;
        loss += pass.loss(chunk) * chunk.len() as f64;
        correct += pass.n_correct(chunk);
    }
    let n = inputs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch Adam on mean cross-entropy with early stopping on the
/// validation split. Deterministic for a given `seed`.
pub fn train(
    mut model: CnnModel,
    train_set: &[&CnnInput],
    val_set: &[&CnnInput],
    hp: &Hyperparams,
    seed: u64,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let mut adam = Adam {
        m: CnnParams::zeros(&model.arch),
        v: CnnParams::zeros(&model.arch),
        step: 0,
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, CnnModel)> = None;
    let mut stale = 0;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for pass in 1..=hp.max_passes {
        order.sort_unstable();
        order.shuffle(&mut rng_for(seed, "cnn-shuffle", pass as u64));
        let mut dropout_rng = rng_for(seed, "cnn-dropout", pass as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in order.chunks(hp.batch_size) {
            step += 1;
            let batch: Vec<&CnnInput> = idx.iter().map(|&i| train_set[i]).collect();
            let fp = forward(&model, &batch, Mode::Train, Some(&mut dropout_rng))?;
            let loss = fp.loss(&batch);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += fp.n_correct(&batch);
            let grad = backward(&model, &batch, &fp, Mode::Train);
            fp.commit_running_stats(&mut model);
            adam.step(&mut model.params, &grad, hp);
            model.apply_max_norm();
            if !model.params.is_finite() {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
        }
        let n = train_set.len() as f64;
        let (val_loss, val_acc) = evaluate(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { step, loss: val_loss });
        }
        history.push(PassRecord {
            pass,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_acc, val_loss, pass, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                break;
            }
        }
    }
    let (_, _, best_pass, model) = best.expect("at least one pass ran");
    Ok(TrainOutcome {
        model,
        best_pass,
        history,
    })
}
