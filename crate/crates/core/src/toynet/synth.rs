//! Synthetic shapes dataset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::gridcore::{read_label_png, read_rgb_png, write_label_png, write_rgb_png, Image, LabelMap};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub size: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    pub texture_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_images: 16, size: 64, num_classes: 6, shapes_per_image: (3, 6), texture_noise: 0.08, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!("need >= 2 classes, got {}", self.num_classes)));
        }
        if self.size < 32 {
            return Err(Error::Parameter(format!("image size must be >= 32, got {}", self.size)));
        }
        if self.num_images == 0 {
            return Err(Error::Parameter("num_images must be >= 1".into()));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!("invalid shapes_per_image range {lo}..={hi}")));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(Error::Parameter(format!("texture_noise must lie in [0, 1], got {}", self.texture_noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

/// Per-class appearance: base color plus a stripe texture.
#[derive(Clone, Debug)]
struct Appearance {
    color: [f64; 3],
    stripe_amp: f64,
    stripe_freq: f64,
    stripe_dir: f64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Ellipse { cr: f64, cc: f64, ar: f64, ac: f64 },
    Triangle { p: [[f64; 2]; 3] },
}

impl Shape {
    fn contains(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Ellipse { cr, cc, ar, ac } => ((r - cr) / ar).powi(2) + ((c - cc) / ac).powi(2) <= 1.0,
            Shape::Triangle { p } => {
                let side = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (c - a[1]) - (b[1] - a[1]) * (r - a[0]);
                let (d0, d1, d2) = (side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let extent = |rng: &mut ChaCha8Rng| rng.gen_range(size / 8.0..size / 2.5);
        let (cr, cc) = (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
        match rng.gen_range(0..3) {
            0 => {
                let (hr, hc) = (extent(rng) / 2.0, extent(rng) / 2.0);
                Shape::Rect { r0: cr - hr, c0: cc - hc, r1: cr + hr, c1: cc + hc }
            }
            1 => Shape::Ellipse { cr, cc, ar: extent(rng) / 2.0, ac: extent(rng) / 2.0 },
            _ => {
                let e = extent(rng);
                let mut p = [[0.0; 2]; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU / 3.0) + k as f64 * std::f64::consts::TAU / 3.0;
                    *v = [cr + e * a.sin(), cc + e * a.cos()];
                }
                Shape::Triangle { p }
            }
        }
    }
}

fn palette(cfg: &SynthConfig) -> Vec<Appearance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    (0..cfg.num_classes)
        .map(|_| Appearance {
            color: [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)],
            stripe_amp: rng.gen_range(0.0..0.12),
            stripe_freq: rng.gen_range(0.2..0.9),
            stripe_dir: rng.gen_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

fn render(cfg: &SynthConfig, look: &[Appearance], index: usize, attempt: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((index as u64) << 20) | attempt);
    let n = cfg.size;
    let shapes = rng.gen_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let mut labels = vec![0u32; n * n];
    for _ in 0..shapes {
        let class = rng.gen_range(1..cfg.num_classes) as u32;
        let shape = Shape::random(&mut rng, n as f64);
        for r in 0..n {
            for c in 0..n {
                if shape.contains(r as f64 + 0.5, c as f64 + 0.5) {
                    labels[r * n + c] = class;
                }
            }
        }
    }
    let phase: Vec<f64> = (0..cfg.num_classes).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut data = Vec::with_capacity(n * n * 3);
    for r in 0..n {
        for c in 0..n {
            let class = labels[r * n + c] as usize;
            let a = &look[class];
            let t = (r as f64) * a.stripe_dir.sin() + (c as f64) * a.stripe_dir.cos();
            let stripe = a.stripe_amp * (a.stripe_freq * t + phase[class]).sin();
            for k in 0..3 {
                let noise = cfg.texture_noise * rng.gen_range(-1.0..1.0);
                data.push((a.color[k] + stripe + noise).clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        image: Image::from_unit(n, n, data).expect("clamped colors"),
        labels: LabelMap::new(n, n, cfg.num_classes, labels).expect("labels below class count"),
    }
}

const MAX_COVERAGE_ROUNDS: u64 = 64;

/// Deterministic given `cfg.seed`. Images are redrawn round-robin until every
/// class occurs somewhere in the set.
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let look = palette(cfg);
    let mut attempts = vec![0u64; cfg.num_images];
    let mut out: Vec<Sample> = (0..cfg.num_images).map(|i| render(cfg, &look, i, 0)).collect();
    let histogram = |set: &[Sample]| {
        let mut h = vec![0u64; cfg.num_classes];
        set.iter().flat_map(|s| s.labels.labels()).for_each(|&l| h[l as usize] += 1);
        h
    };
    let mut hist = histogram(&out);
    let mut cursor = 0usize;
    let mut redraws = 0u64;
    while hist.contains(&0) {
        if redraws >= MAX_COVERAGE_ROUNDS * cfg.num_images as u64 {
            let missing: Vec<usize> = (0..cfg.num_classes).filter(|&c| hist[c] == 0).collect();
            return Err(Error::Generation(format!(
                "classes {missing:?} never appeared after {redraws} redraws"
            )));
        }
        attempts[cursor] += 1;
        let candidate = render(cfg, &look, cursor, attempts[cursor]);
        // Keep the redraw only if it does not lose a class that exists nowhere else.
        let mut trial = hist.clone();
        out[cursor].labels.labels().iter().for_each(|&l| trial[l as usize] -= 1);
        candidate.labels.labels().iter().for_each(|&l| trial[l as usize] += 1);
        if trial.iter().filter(|&&v| v == 0).count() < hist.iter().filter(|&&v| v == 0).count() {
            out[cursor] = candidate;
            hist = trial;
        }
        cursor = (cursor + 1) % cfg.num_images;
        redraws += 1;
    }
    Ok(out)
}

/// Manifest written next to the PNGs of a saved dataset.
pub const DATASET_META: &str = "dataset.txt";

fn image_name(i: usize) -> String {
    format!("image_{i:04}.png")
}

fn label_name(i: usize) -> String {
    format!("label_{i:04}.png")
}

/// Writes `image_NNNN.png`, `label_NNNN.png` and the manifest into `dir`.
pub fn save_dataset(dir: &Path, cfg: &SynthConfig, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_rgb_png(&dir.join(image_name(i)), &s.image)?;
        write_label_png(&dir.join(label_name(i)), &s.labels)?;
    }
    let meta = format!(
        "num_images={}\nsize={}\nnum_classes={}\nshapes_min={}\nshapes_max={}\ntexture_noise={}\nseed={}\n",
        samples.len(),
        cfg.size,
        cfg.num_classes,
        cfg.shapes_per_image.0,
        cfg.shapes_per_image.1,
        cfg.texture_noise,
        cfg.seed
    );
    let path = dir.join(DATASET_META);
    std::fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`save_dataset`]. Colors come back quantized to 8 bits.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(DATASET_META);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_kv(&text)?;
    let get = |key: &str| -> Result<usize> {
        let v = kv
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Format(format!("{} lacks '{key}'", path.display())))?;
        v.1.parse().map_err(|_| Error::Format(format!("{}: bad value for '{key}'", path.display())))
    };
    let (count, classes) = (get("num_images")?, get("num_classes")?);
    (0..count)
        .map(|i| {
            let image = read_rgb_png(&dir.join(image_name(i)))?;
            let labels = read_label_png(&dir.join(label_name(i)), classes)?;
            if (image.height(), image.width()) != (labels.height(), labels.width()) {
                return Err(Error::Format(format!("sample {i}: image and labels differ in size")));
            }
            Ok(Sample { image, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let cfg = SynthConfig { num_images: 3, size: 32, ..SynthConfig::default() };
        let data = gen_synthetic_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &cfg, &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.labels, b.labels);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn deterministic_and_covering() {
        let cfg = SynthConfig { num_images: 8, size: 96, ..SynthConfig::default() };
        let a = gen_synthetic_dataset(&cfg).unwrap();
        let b = gen_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let mut hist = vec![0; cfg.num_classes];
        for s in &a {
            assert_eq!((s.image.height(), s.image.width()), (96, 96));
            s.labels.labels().iter().for_each(|&l| hist[l as usize] += 1);
        }
        assert!(hist.iter().all(|&h| h > 0), "{hist:?}");
    }

    #[test]
    fn unsatisfiable_coverage_is_an_error() {
        let cfg = SynthConfig { num_images: 1, num_classes: 12, shapes_per_image: (1, 1), ..SynthConfig::default() };
        assert!(matches!(gen_synthetic_dataset(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn triangle_rasterizes_inside_only() {
        let t = Shape::Triangle { p: [[0.0, 0.0], [0.0, 10.0], [10.0, 0.0]] };
        assert!(t.contains(1.0, 1.0));
        assert!(!t.contains(9.0, 9.0));
    }
}
