//! The default synthetic benchmark: train every variant on the same data and
//! initialization, then score it.

use std::time::Instant;

use super::net::{Mode, Net, NetConfig, Prepared};
use super::synth::{gen_synthetic_dataset, Sample, SynthConfig};
use super::train::{bcwc_for, evaluate, train, TrainConfig};
use crate::densecrf::Neighborhood;
use crate::error::Result;
use crate::superpixel::{slic_segment, SlicParams};

/// Top adjacency pairs averaged for the class-weight similarity score.
pub const BCWC_TOP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Joint,
    Ecrf,
    PairwiseOnly,
    SuperpixelOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::Joint, Variant::Ecrf, Variant::PairwiseOnly, Variant::SuperpixelOnly];

    pub fn mode(self) -> Mode {
        match self {
            Variant::Baseline => Mode::Baseline,
            Variant::Joint => Mode::Joint,
            _ => Mode::Ecrf,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Joint => "joint",
            Variant::Ecrf => "ecrf",
            Variant::PairwiseOnly => "ecrf-pairwise",
            Variant::SuperpixelOnly => "ecrf-superpixel",
        }
    }

    fn configure(self, net: &mut NetConfig) {
        (net.use_pairwise, net.use_superpixel) = match self {
            Variant::PairwiseOnly => (true, false),
            Variant::SuperpixelOnly => (false, true),
            _ => (true, true),
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train_data: SynthConfig,
    pub eval_data: SynthConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub slic: SlicParams,
}

impl Default for Benchmark {
    fn default() -> Self {
        // Picked on seeds 100 and 101, never on the acceptance seeds.
        let mut net = NetConfig { embed_gain: 0.1, neighborhood: Neighborhood::Window(2), ..NetConfig::default() };
        net.layers[1].stride = 1;
        net.joint_kernel.w2 = 0.0;
        Self {
            train_data: SynthConfig { num_images: 32, ..SynthConfig::default() },
            eval_data: SynthConfig { num_images: 12, ..SynthConfig::default() },
            net,
            train: TrainConfig { total_iters: 600, batch: 4, lr0: 0.02, ..TrainConfig::default() },
            slic: SlicParams { compactness: 30.0, ..SlicParams::with_blocks(128) },
        }
    }
}

/// Data, superpixels and prepared samples for one seed, shared by all variants.
pub struct SeedData {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    train_sp: Vec<crate::superpixel::SuperpixelMap>,
    eval_sp: Vec<crate::superpixel::SuperpixelMap>,
}

impl Benchmark {
    pub fn data(&self, seed: u64) -> Result<SeedData> {
        // Same palette for both splits; disjoint image streams.
        let train = gen_synthetic_dataset(&SynthConfig { seed, ..self.train_data.clone() })?;
        let mut eval_cfg = SynthConfig { seed, ..self.eval_data.clone() };
        eval_cfg.num_images += train.len();
        let eval: Vec<Sample> = gen_synthetic_dataset(&eval_cfg)?.split_off(train.len());
        let sp = |set: &[Sample]| set.iter().map(|s| slic_segment(&s.image, &self.slic)).collect::<Result<Vec<_>>>();
        Ok(SeedData { seed, train_sp: sp(&train)?, eval_sp: sp(&eval)?, train, eval })
    }

    pub fn run(&self, data: &SeedData, variant: Variant) -> Result<RunSummary> {
        let start = Instant::now();
        let mut net_cfg = self.net.clone();
        variant.configure(&mut net_cfg);
        let prep = |set: &[Sample], sp: &[crate::superpixel::SuperpixelMap]| {
            set.iter().zip(sp).map(|(s, m)| Prepared::new(&net_cfg, &s.image, &s.labels, Some(m))).collect::<Result<Vec<_>>>()
        };
        let train_set = prep(&data.train, &data.train_sp)?;
        let eval_set = prep(&data.eval, &data.eval_sp)?;
        let net = Net::<f32>::init(net_cfg.clone(), data.seed)?;
        let cfg = TrainConfig { mode: variant.mode(), seed: data.seed, ..self.train.clone() };
        let result = train(&cfg, net, &train_set, None)?;
        let report = evaluate(&result.net, &eval_set, cfg.mode)?;
        let curve = bcwc_for(&result.net, &eval_set)?;
        let tail = result.log.len().saturating_sub(10);
        Ok(RunSummary {
            variant,
            seed: data.seed,
            miou: report.miou,
            boundary_f: report.boundary_f,
            bcwc_top: curve.mean_top_similarity(BCWC_TOP).unwrap_or(0.0),
            final_loss: result.log[tail..].iter().map(|e| e.loss).sum::<f64>() / (result.log.len() - tail).max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
    pub boundary_f: f64,
    pub bcwc_top: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "variant,seed,miou,boundary_f,bcwc_top10,final_loss,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.2}",
            self.variant.name(),
            self.seed,
            self.miou,
            self.boundary_f,
            self.bcwc_top,
            self.final_loss,
            self.seconds
        )
    }
}

/// Mean of a field over the runs of one variant.
pub fn variant_mean(runs: &[RunSummary], variant: Variant, field: impl Fn(&RunSummary) -> f64) -> f64 {
    let sel: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(field).collect();
    sel.iter().sum::<f64>() / sel.len().max(1) as f64
}
