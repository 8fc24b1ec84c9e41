//! SGD with momentum, poly schedule, training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::net::{cell_scores, forward, loss_and_grads, predict, upsample_bilinear, argmax_labels, Mode, Net, NetGrads, Prepared};
use crate::densecrf::{run_inference, GaussianKernelParams, LabelCompatibility, Neighborhood};
use crate::error::{Error, Result};
use crate::gridcore::{FeatureMap, LabelMap};
use crate::metrics::{accumulate_adjacency, bcwc_curve, boundary_counts, BcwcCurve, BoundaryCounts, ConfusionMatrix};

/// Tensor exempt from weight decay.
pub const NO_DECAY: &str = "ecrf.compat_bias";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub poly_power: f64,
    pub batch: usize,
    pub seed: u64,
    /// Evaluate on the held-out set every this many iterations; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            total_iters: 200,
            poly_power: 0.9,
            batch: 4,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::Parameter("lr0 and poly_power must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Parameter("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr0 · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.total_iters == 0 {
        return 0.0;
    }
    let frac = (iter.min(cfg.total_iters) as f64) / cfg.total_iters as f64;
    cfg.lr0 * (1.0 - frac).powf(cfg.poly_power)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &Net<f32>) -> Self {
        Self { velocity: net.tensors().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect() }
    }

    /// `v ← μ v + g + λ θ`, `θ ← θ − lr v`; no decay on [`NO_DECAY`].
    pub fn step(&mut self, net: &mut Net<f32>, grads: &NetGrads<f32>, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, mu) = (lr as f32, momentum as f32);
        for ((name, theta), (v, g)) in net.tensors_mut().into_iter().zip(self.velocity.iter_mut().zip(&grads.tensors)) {
            let wd = if name == NO_DECAY { 0.0 } else { weight_decay as f32 };
            for ((t, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *t;
                *t -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub net: Net<f32>,
    pub optimizer: Sgd,
    pub log: Vec<LogEntry>,
    pub evals: Vec<(usize, EvalReport)>,
}

/// Mean batch loss and gradient; samples run in parallel and are reduced in order.
pub fn batch_grads(net: &Net<f32>, batch: &[&Prepared], mode: Mode) -> Result<(f64, NetGrads<f32>)> {
    let parts: Vec<(f32, NetGrads<f32>)> =
        batch.par_iter().map(|s| loss_and_grads(net, s, mode)).collect::<Result<_>>()?;
    let mut total = NetGrads::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += *l as f64;
        total.add_assign(g);
    }
    total.scale(1.0 / batch.len() as f32);
    Ok((loss / batch.len() as f64, total))
}

/// Deterministic given `cfg.seed` and the initial network.
pub fn train(cfg: &TrainConfig, mut net: Net<f32>, data: &[Prepared], eval: Option<&[Prepared]>) -> Result<TrainResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Sgd::new(&net);
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut evals = Vec::new();
    for iter in 0..cfg.total_iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&data[order.pop().expect("refilled")]);
        }
        let (loss, grads) = batch_grads(&net, &batch, cfg.mode)?;
        if !loss.is_finite() {
            return Err(Error::Numeric { what: "training loss", cell: iter });
        }
        let lr = poly_lr(iter, cfg);
        opt.step(&mut net, &grads, lr, cfg.momentum, cfg.weight_decay);
        log.push(LogEntry { iter, loss, lr });
        if let Some(set) = eval {
            if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
                evals.push((iter + 1, evaluate(&net, set, cfg.mode)?));
            }
        }
    }
    Ok(TrainResult { net, optimizer: opt, log, evals })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub boundary_f: f64,
    pub pixel_accuracy: f64,
}

fn report(confusion: &ConfusionMatrix, boundary: &BoundaryCounts) -> EvalReport {
    let m = confusion.miou();
    let correct: u64 = (0..confusion.classes()).map(|c| confusion.get(c, c)).sum();
    EvalReport {
        miou: m.mean,
        per_class: m.per_class,
        boundary_f: boundary.fscore(),
        pixel_accuracy: correct as f64 / confusion.total().max(1) as f64,
    }
}

/// Dataset-level mIoU and boundary F-score at full resolution.
pub fn evaluate(net: &Net<f32>, data: &[Prepared], mode: Mode) -> Result<EvalReport> {
    evaluate_with(data, net.classifier.classes(), |s| predict(net, s, mode))
}

pub fn evaluate_with<F>(data: &[Prepared], classes: usize, predict: F) -> Result<EvalReport>
where
    F: Fn(&Prepared) -> Result<LabelMap> + Sync,
{
    let preds: Vec<LabelMap> = data.par_iter().map(&predict).collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut boundary = BoundaryCounts::default();
    for (p, s) in preds.iter().zip(data) {
        confusion.accumulate(p, &s.labels)?;
        boundary.add(&boundary_counts(p, &s.labels, 1)?);
    }
    Ok(report(&confusion, &boundary))
}

/// Detached dense-CRF post-processing of a trained network's cell scores.
/// Reads the network only.
pub fn vanilla_crf_predict(
    net: &Net<f32>,
    sample: &Prepared,
    mode: Mode,
    params: &GaussianKernelParams,
    steps: usize,
    neighborhood: Neighborhood,
) -> Result<LabelMap> {
    let trace = forward(net, sample, mode)?;
    let scores = cell_scores(&trace);
    let classes = net.classifier.classes();
    let probs = run_inference(&scores, &sample.cell_image, params, &LabelCompatibility::identity(classes), steps, neighborhood)?;
    let field = FeatureMap::new(scores.height(), scores.width(), classes, probs.data().to_vec())?;
    argmax_labels(&upsample_bilinear(&field, sample.image.height(), sample.image.width()), classes)
}

/// Class-weight similarity curve from full-resolution ground-truth adjacency.
pub fn bcwc_for(net: &Net<f32>, data: &[Prepared]) -> Result<BcwcCurve> {
    let classes = net.classifier.classes();
    let mut counts = vec![0u64; classes * classes];
    for s in data {
        accumulate_adjacency(&s.labels, classes, &mut counts)?;
    }
    bcwc_curve(&net.classifier.cast::<f64>(), &counts)
}
