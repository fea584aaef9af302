//! Fixtures shared by the benchmarks.

use neurotouch::cnn::CnnInput;
use neurotouch::preprocess::{clean, downsample};
use neurotouch::{generate_dataset, ChannelLayout, Dataset, Epoch, FilterSpec, GenConfig, ProtocolSpec};

/// A generated actual-touch session with `trials_per_class` trials per
/// class on the standard 64-channel montage.
pub fn session(trials_per_class: usize) -> Dataset {
    let cfg = GenConfig {
        protocol: ProtocolSpec {
            trials_per_class,
            ..ProtocolSpec::default()
        },
        layout: ChannelLayout::default(),
        ..GenConfig::default()
    };
    generate_dataset(&cfg).expect("default generator config is valid").0
}

pub fn cleaned(ds: &Dataset) -> Vec<Epoch> {
    let spec = FilterSpec::default();
    ds.epochs.iter().map(|e| clean(e, &spec).expect("default filters")).collect()
}

/// Filtered, decimated network inputs.
pub fn cnn_inputs(epochs: &[Epoch], temporal_kernel: usize) -> Vec<CnnInput> {
    let hi = FilterSpec::default().bandpass_hi_hz;
    epochs
        .iter()
        .map(|e| CnnInput::new(&downsample(e, 8, hi).expect("anti-alias margin"), temporal_kernel).expect("shape"))
        .collect()
}
