//! Desk-scale segmentation pipeline: synthetic data, a small conv net with
//! optional E-CRF or probability-space CRF, SGD training and evaluation.

mod experiment;
mod net;
mod synth;
mod train;

pub use experiment::{variant_mean, Benchmark, RunSummary, SeedData, Variant, BCWC_TOP};
pub use net::{
    argmax_labels, backward, cell_scores, forward, loss_and_grads, loss_and_logit_grad, predict, upsample_bilinear,
    ConvLayer, ConvSpec, Mode, Net, NetConfig, NetGrads, Prepared, Trace,
};
pub use synth::{gen_synthetic_dataset, load_dataset, save_dataset, Sample, SynthConfig, DATASET_META};
pub use train::{
    batch_grads, bcwc_for, evaluate, evaluate_with, poly_lr, train, vanilla_crf_predict, EvalReport, LogEntry, Sgd,
    TrainConfig, TrainResult, NO_DECAY,
};
