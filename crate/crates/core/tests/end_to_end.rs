use neurotouch::cnn::{train, CnnInput, CnnModel};
use neurotouch::eval::stratified_holdout;
use neurotouch::ovr::fit_ovr;
use neurotouch::preprocess::{clean, downsample, segment};
use neurotouch::seed::rng_for;
use neurotouch::synth::{generate_raw_trial, spectral_audit, SessionModel};
use neurotouch::{
    cross_validate, generate_dataset, validate_dataset, ChannelLayout, CnnArch, CspLdaPipeline, CvPlan, Epoch,
    FilterSpec, GenConfig, Hyperparams, ProtocolSpec, TextureClass,
};
use rand::seq::SliceRandom;

fn small(trials_per_class: usize, n_channels: usize) -> GenConfig {
    GenConfig {
        protocol: ProtocolSpec {
            trials_per_class,
            ..ProtocolSpec::default()
        },
        layout: ChannelLayout::standard(n_channels).unwrap(),
        ..GenConfig::default()
    }
}

#[test]
fn default_session_is_valid() {
    let (touch, imagery) = generate_dataset(&GenConfig::default()).unwrap();
    for ds in [&touch, &imagery] {
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.epochs[0].data.dim(), (64, 5000));
        assert!(validate_dataset(ds).is_valid());
    }
}

#[test]
fn segmentation_keeps_cue_labels() {
    let cfg = small(3, 8);
    let model = SessionModel::new(&cfg).unwrap();
    let trials: Vec<_> = (0..12).map(|id| generate_raw_trial(&cfg, &model, id).unwrap()).collect();
    let seg = segment(&trials, &cfg.protocol).unwrap();
    assert!(seg.errors.is_empty());
    assert_eq!(seg.epochs.len(), 24);
    for e in &seg.epochs {
        let trial = trials.iter().find(|t| t.trial_id == e.trial_id).unwrap();
        assert_eq!(e.label, trial.cue);
    }
}

#[test]
fn line_noise_dominates_its_neighbours() {
    let cfg = GenConfig {
        line_noise_amp_uv: 10.0,
        ..small(2, 8)
    };
    let (touch, _) = generate_dataset(&cfg).unwrap();
    let audit = spectral_audit(&touch).unwrap();
    for (line, near) in audit.line_power.iter().zip(audit.line_neighbors.iter()) {
        assert!(line / near >= 10.0, "{line} vs {near}");
    }
}

#[test]
fn class_source_raises_alpha_power() {
    let cfg = small(10, 16);
    let noise = GenConfig {
        noise_only: true,
        ..cfg.clone()
    };
    let fabric = |c: &GenConfig| {
        let (mut ds, _) = generate_dataset(c).unwrap();
        ds.epochs.retain(|e| e.label == TextureClass::Fabric);
        spectral_audit(&ds).unwrap().band("alpha").unwrap().sum()
    };
    let (with, without) = (fabric(&cfg), fabric(&noise));
    // Source power is 10 dB over the background on its pattern; spread
    // over 16 channels that still adds well over 10% alpha power.
    assert!(with > 1.1 * without, "{with} vs {without}");
}

#[test]
fn accuracy_grows_with_snr() {
    let plan = CvPlan {
        n_repeats: 3,
        ..CvPlan::default()
    };
    let mut accs = Vec::new();
    for snr_db in [-10.0, 0.0, 10.0] {
        let cfg = GenConfig {
            snr_db,
            ..small(20, 16)
        };
        let (touch, _) = generate_dataset(&cfg).unwrap();
        accs.push(cross_validate(&CspLdaPipeline::default(), &touch, &plan).unwrap().mean);
    }
    for w in accs.windows(2) {
        assert!(w[1] >= w[0] - 0.02, "{accs:?}");
    }
    assert!(accs[2] > 0.5, "{accs:?}");
}

#[test]
fn fur_epoch_is_classified_as_fur() {
    let cfg = GenConfig {
        seed: 4,
        ..small(20, 16)
    };
    let (touch, _) = generate_dataset(&cfg).unwrap();
    let spec = FilterSpec::default();
    let cleaned: Vec<Epoch> = touch.epochs.iter().map(|e| clean(e, &spec).unwrap()).collect();
    let (train_set, probe): (Vec<&Epoch>, Vec<&Epoch>) = cleaned.iter().partition(|e| e.trial_id >= 8);
    let clf = fit_ovr(&train_set, &Default::default()).unwrap();
    let furs: Vec<&&Epoch> = probe.iter().filter(|e| e.label == TextureClass::Fur).collect();
    assert!(!furs.is_empty());
    for e in furs {
        assert_eq!(clf.predict(e).unwrap().0, TextureClass::Fur);
    }
}

fn cnn_inputs(cfg: &GenConfig) -> Vec<CnnInput> {
    let spec = FilterSpec::default();
    let (touch, _) = generate_dataset(cfg).unwrap();
    touch
        .epochs
        .iter()
        .map(|e| CnnInput::new(&downsample(&clean(e, &spec).unwrap(), 8, spec.bandpass_hi_hz).unwrap(), 63).unwrap())
        .collect()
}

fn arch_for(inputs: &[CnnInput]) -> CnnArch {
    let (c, t) = inputs[0].dims();
    CnnArch {
        n_channels: c,
        n_samples: t,
        ..CnnArch::default()
    }
}

#[test]
fn overfit_loss_falls() {
    let inputs = cnn_inputs(&small(2, 16));
    let refs: Vec<&CnnInput> = inputs.iter().collect();
    let hp = Hyperparams {
        max_passes: 200,
        patience: 200,
        batch_size: 8,
        ..Hyperparams::default()
    };
    let model = CnnModel::new(arch_for(&inputs), &mut rng_for(1, "overfit", 0)).unwrap();
    let out = train(model, &refs, &refs, &hp, 1).unwrap();
    assert_eq!(out.history.len(), 200);
    assert!(out.history[199].train_loss < out.history[0].train_loss);
    assert_eq!(out.history[out.best_pass - 1].val_acc, 1.0);
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let mut inputs = cnn_inputs(&small(20, 16));
    let mut labels: Vec<TextureClass> = inputs.iter().map(|i| i.label).collect();
    labels.shuffle(&mut rng_for(9, "null", 0));

    let all: Vec<usize> = (0..inputs.len()).collect();
    let (train_idx, test_idx) = stratified_holdout(&labels, &all, 0.5, 9);
    // Training sees shuffled labels; the held-out half keeps the true ones.
    for &i in &train_idx {
        inputs[i].label = labels[i];
    }
    let (fit, val) = stratified_holdout(&labels, &train_idx, 0.2, 10);
    let fit: Vec<&CnnInput> = fit.iter().map(|&i| &inputs[i]).collect();
    let val: Vec<&CnnInput> = val.iter().map(|&i| &inputs[i]).collect();
    let hp = Hyperparams {
        max_passes: 30,
        patience: 10,
        ..Hyperparams::default()
    };
    let model = CnnModel::new(arch_for(&inputs), &mut rng_for(9, "null-init", 0)).unwrap();
    let out = train(model, &fit, &val, &hp, 9).unwrap();
    let test: Vec<&CnnInput> = test_idx.iter().map(|&i| &inputs[i]).collect();
    let preds = out.model.predict(&test).unwrap();
    let acc = preds.iter().zip(&test).filter(|(p, i)| **p == i.label).count() as f64 / test.len() as f64;
    let sigma = (0.25 * 0.75 / test.len() as f64).sqrt();
    assert!(acc <= 0.25 + 3.0 * sigma, "accuracy {acc} on {} held-out epochs", test.len());
}
