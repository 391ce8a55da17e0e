//! Shared fixtures for the criterion benches.

use scalesep_core::{init_model, GenParams, ModelConfig, ModelParams, StftConfig, Waveform};

/// A small model that still exercises every stage.
pub fn bench_model() -> ModelParams {
    let mut cfg = ModelConfig::tiny(2);
    cfg.stft = StftConfig::default();
    init_model(&cfg, 42).expect("bench model")
}

/// One deterministic bench mixture.
pub fn bench_mixture(duration: f64) -> Waveform {
    let gen = GenParams {
        duration,
        ..GenParams::default()
    };
    scalesep_core::synth_mixture(7, &gen).expect("bench mixture").mixture
}
