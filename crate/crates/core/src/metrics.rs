//! Segmentation quality and class-weight confusion diagnostics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gradtheory::{cosine, ClassifierWeights};
use crate::gridcore::LabelMap;

/// `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_maps(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<Self> {
        let mut m = Self::new(classes);
        m.accumulate(pred, gt)?;
        Ok(m)
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_shape(pred, gt)?;
        let n = self.classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::Parameter(format!("label {} outside {n} classes", p.max(g))));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let inter = self.get(c, c);
                let gt: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..n).map(|g| self.get(g, c)).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> MiouReport {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

fn check_shape(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.same_shape(gt) {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )))
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<MiouReport> {
    Ok(ConfusionMatrix::from_maps(pred, gt, classes)?.miou())
}

/// Cells with at least one 4-neighbor carrying a different label.
pub fn boundary_mask(map: &LabelMap) -> Vec<bool> {
    let (h, w) = (map.height(), map.width());
    let l = map.labels();
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let v = l[i];
            out[i] = (r > 0 && l[i - w] != v)
                || (r + 1 < h && l[i + w] != v)
                || (c > 0 && l[i - 1] != v)
                || (c + 1 < w && l[i + 1] != v);
        }
    }
    out
}

/// Boundary precision/recall counts between two maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_boundary: u64,
    pub pred_matched: u64,
    pub gt_boundary: u64,
    pub gt_matched: u64,
}

impl BoundaryCounts {
    pub fn add(&mut self, o: &BoundaryCounts) {
        self.pred_boundary += o.pred_boundary;
        self.pred_matched += o.pred_matched;
        self.gt_boundary += o.gt_boundary;
        self.gt_matched += o.gt_matched;
    }

    pub fn fscore(&self) -> f64 {
        if self.pred_boundary == 0 && self.gt_boundary == 0 {
            return 1.0;
        }
        let p = if self.pred_boundary == 0 { 0.0 } else { self.pred_matched as f64 / self.pred_boundary as f64 };
        let r = if self.gt_boundary == 0 { 0.0 } else { self.gt_matched as f64 / self.gt_boundary as f64 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

// A boundary cell of `a` is matched when `b` has a boundary cell of the same
// class within Chebyshev distance `tol`.
fn matched(a: &LabelMap, a_edge: &[bool], b: &LabelMap, b_edge: &[bool], tol: usize) -> (u64, u64) {
    let (h, w) = (a.height(), a.width());
    let (mut total, mut hit) = (0, 0);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !a_edge[i] {
                continue;
            }
            total += 1;
            let class = a.labels()[i];
            let found = (r.saturating_sub(tol)..=(r + tol).min(h - 1)).any(|rr| {
                (c.saturating_sub(tol)..=(c + tol).min(w - 1)).any(|cc| {
                    let j = rr * w + cc;
                    b_edge[j] && b.labels()[j] == class
                })
            });
            hit += found as u64;
        }
    }
    (total, hit)
}

pub fn boundary_counts(pred: &LabelMap, gt: &LabelMap, tolerance: usize) -> Result<BoundaryCounts> {
    check_shape(pred, gt)?;
    let pe = boundary_mask(pred);
    let ge = boundary_mask(gt);
    let (pred_boundary, pred_matched) = matched(pred, &pe, gt, &ge, tolerance);
    let (gt_boundary, gt_matched) = matched(gt, &ge, pred, &pe, tolerance);
    Ok(BoundaryCounts { pred_boundary, pred_matched, gt_boundary, gt_matched })
}

pub fn boundary_fscore(pred: &LabelMap, gt: &LabelMap, tolerance: usize) -> Result<f64> {
    Ok(boundary_counts(pred, gt, tolerance)?.fscore())
}

/// Symmetric `n × n` counts of 4-adjacent cell pairs with differing labels.
pub fn adjacency_counts(gt: &LabelMap, classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes * classes];
    accumulate_adjacency(gt, classes, &mut counts)?;
    Ok(counts)
}

pub fn accumulate_adjacency(gt: &LabelMap, classes: usize, counts: &mut [u64]) -> Result<()> {
    if counts.len() != classes * classes {
        return Err(Error::Dimension(format!("count buffer {} for {classes} classes", counts.len())));
    }
    let (h, w) = (gt.height(), gt.width());
    let l = gt.labels();
    if let Some(&bad) = l.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::Parameter(format!("label {bad} outside {classes} classes")));
    }
    let mut bump = |a: u32, b: u32| {
        if a != b {
            let (a, b) = (a as usize, b as usize);
            counts[a * classes + b] += 1;
            counts[b * classes + a] += 1;
        }
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                bump(l[i], l[i + 1]);
            }
            if r + 1 < h {
                bump(l[i], l[i + w]);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcwcRow {
    pub class: usize,
    pub partner: usize,
    pub count: u64,
    pub similarity: f64,
}

/// Each class paired with its most-adjacent class, ordered by adjacency count.
#[derive(Clone, Debug, PartialEq)]
pub struct BcwcCurve {
    pub rows: Vec<BcwcRow>,
}

pub fn bcwc_curve(w: &ClassifierWeights, counts: &[u64]) -> Result<BcwcCurve> {
    let n = w.classes();
    if counts.len() != n * n {
        return Err(Error::Dimension(format!("{} adjacency entries for {n} classes", counts.len())));
    }
    let mut rows = Vec::new();
    for a in 0..n {
        let mut best: Option<(usize, u64)> = None;
        for b in (0..n).filter(|&b| b != a) {
            let c = counts[a * n + b];
            if c > 0 && best.map_or(true, |(_, bc)| c > bc) {
                best = Some((b, c));
            }
        }
        if let Some((partner, count)) = best {
            rows.push(BcwcRow { class: a, partner, count, similarity: cosine(&w.column(a), &w.column(partner)) });
        }
    }
    rows.sort_by(|x, y| y.count.cmp(&x.count).then(x.class.cmp(&y.class)));
    Ok(BcwcCurve { rows })
}

impl BcwcCurve {
    /// Mean similarity over the first `k` rows (all rows if fewer).
    pub fn mean_top_similarity(&self, k: usize) -> Option<f64> {
        let top = &self.rows[..k.min(self.rows.len())];
        (!top.is_empty()).then(|| top.iter().map(|r| r.similarity).sum::<f64>() / top.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("adjacency_rank,class,partner,count,similarity\n");
        for (rank, r) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{:.6}", rank + 1, r.class, r.partner, r.count, r.similarity);
        }
        s
    }

    /// Similarity against adjacency rank as a standalone SVG line plot.
    pub fn to_svg(&self) -> String {
        let (width, height, pad) = (480.0, 320.0, 40.0);
        let n = self.rows.len().max(2) as f64;
        let x = |i: usize| pad + (width - 2.0 * pad) * i as f64 / (n - 1.0);
        let y = |s: f64| height - pad - (height - 2.0 * pad) * (s + 1.0) / 2.0;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
            width - 2.0 * pad,
            height - 2.0 * pad
        );
        let _ = writeln!(svg, "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#ccc\"/>", y(0.0), width - pad);
        let points: Vec<String> =
            self.rows.iter().enumerate().map(|(i, r)| format!("{:.2},{:.2}", x(i), y(r.similarity))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">adjacency rank</text>",
            width / 2.0,
            height - 10.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {0})\" text-anchor=\"middle\">weight cosine similarity</text>",
            height / 2.0
        );
        svg.push_str("</svg>\n");
        svg
    }
}
