//! Depth-scalable speech source separation.
//!
//! The model applies shared-parameter separator and reconstructor stacks
//! a runtime-adjustable number of times, so one set of trained weights
//! covers a whole latency/quality trade-off curve. The crate bundles the
//! network itself, the multi-point training objective, synthetic data
//! generation, the training recipe (warmup, plateau halving, early
//! stopping, checkpoint averaging, depth-extending fine-tuning), and
//! evaluation/sweep tooling.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use datagen::{
    build_dataset, manifest_from_str, manifest_to_string, synth_mixture, synth_source,
    DatasetSpec, GenParams, Manifest, Split,
};
pub use dsp::{istft, make_window, stft, ComplexSpectrogram, StftConfig, Waveform};
pub use error::{Error, Result};
pub use eval::{
    emit_report, emit_sweep_svg, evaluate, measure_rtf, sweep, EvalResult, ReportFormat,
    SweepReport,
};
pub use model::{
    count_parameters, forward, init_model, ModelConfig, ModelParams, SeparationOutput,
    SplitterKind,
};
pub use objectives::{
    pit_assign, sdr, sdr_improvement, si_snr, si_snr_improvement, total_loss, LossConfig,
    LossTerm,
};
pub use trainer::{average_checkpoints, finetune, lr_at, train, TrainConfig, TrainRun};
