//! Wall-clock micro-benchmarks of the main kernels over square grids.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::densecrf::{mean_field_step, GaussianKernelParams, LabelCompatibility, Neighborhood};
use crate::ecrf::{ecrf_backward, ecrf_forward, EcrfParams};
use crate::error::Result;
use crate::gridcore::{FeatureMap, Image};
use crate::superpixel::{slic_segment, SlicParams, SuperpixelMap};

pub const BENCH_CHANNELS: usize = 32;
pub const BENCH_CLASSES: usize = 6;
pub const BENCH_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: &'static str,
    /// Grid side length in cells (pixels for SLIC).
    pub size: usize,
    /// Median seconds per call.
    pub seconds: f64,
    pub cells_per_second: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,size,seconds,cells_per_second\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6e},{:.6e}\n", r.op, r.size, r.seconds, r.cells_per_second));
        }
        s
    }

    pub fn get(&self, op: &str, size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.op == op && r.size == size)
    }
}

/// Median of at least `min_reps` calls, repeating until `budget` is spent.
fn time<F: FnMut() -> Result<()>>(mut f: F, min_reps: usize, budget: Duration) -> Result<f64> {
    let mut samples = Vec::new();
    let start = Instant::now();
    while samples.len() < min_reps || (start.elapsed() < budget && samples.len() < 50) {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

fn grid_blocks(size: usize, block: usize) -> SuperpixelMap {
    let per_row = size.div_ceil(block);
    let ids = (0..size * size).map(|i| ((i / size / block) * per_row + (i % size) / block) as u32).collect();
    SuperpixelMap::new(size, size, ids, per_row * per_row).expect("grid blocks cover the map")
}

/// Inputs are random but fixed by `seed`.
pub fn run_benchmark(sizes: &[usize], seed: u64) -> Result<BenchTable> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = Duration::from_millis(200);
    for &size in sizes {
        let cells = size * size;
        let image = Image::from_unit(size, size, (0..cells * 3).map(|_| rng.gen()).collect())?;
        let features = FeatureMap::new(size, size, BENCH_CHANNELS, (0..cells * BENCH_CHANNELS).map(|_| rng.gen::<f32>()).collect())?;
        let sp = grid_blocks(size, 4);
        let mut push = |op, seconds: f64| rows.push(BenchRow { op, size, seconds, cells_per_second: cells as f64 / seconds });

        for (name_f, name_b, nb) in [
            ("ecrf_forward_allpairs", "ecrf_backward_allpairs", Neighborhood::AllPairs),
            ("ecrf_forward_window", "ecrf_backward_window", Neighborhood::Window(BENCH_WINDOW)),
        ] {
            let mut params = EcrfParams::<f32>::init(BENCH_CHANNELS, 16, 16, &mut rng)?;
            params.neighborhood = nb;
            push(name_f, time(|| ecrf_forward(&features, &image, &sp, &params).map(drop), 3, budget)?);
            let (out, act) = ecrf_forward(&features, &image, &sp, &params)?;
            push(name_b, time(|| ecrf_backward(Some(&act), &out).map(drop), 3, budget)?);
        }

        let scores = FeatureMap::new(size, size, BENCH_CLASSES, (0..cells * BENCH_CLASSES).map(|_| rng.gen::<f64>()).collect())?;
        let compat = LabelCompatibility::identity(BENCH_CLASSES);
        let kp = GaussianKernelParams::default();
        push(
            "mean_field_step_window",
            time(|| mean_field_step(&scores, &image, &kp, &compat, Neighborhood::Window(BENCH_WINDOW)).map(drop), 3, budget)?,
        );
        let slic = SlicParams::with_blocks((cells / 64).max(1));
        push("slic_segment", time(|| slic_segment(&image, &slic).map(drop), 3, budget)?);
    }
    Ok(BenchTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sizes_give_empty_table() {
        let t = run_benchmark(&[], 0).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.to_csv(), "op,size,seconds,cells_per_second\n");
    }

    #[test]
    fn grid_blocks_partition() {
        let m = grid_blocks(10, 4);
        assert_eq!(m.block_count(), 9);
    }
}
