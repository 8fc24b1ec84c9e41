//! Class-weight gradient geometry for a single boundary pixel.
//!
//! With logits `Y = Wᵀ F` and cross-entropy on class `c`, the update of the
//! class weight `W_c` differs between three models:
//!
//! * baseline: `-∇W_c = (1 - P_c) F_k`
//! * probability-space CRF (Joint-CRF): `-∇W_c = (1 - P̂_c) F_k`, only the
//!   scale changes
//! * feature-space CRF (E-CRF): `-∇W_c = (1 - P*_c) F*_k`, with
//!   `F*_k = (Σ w_j F_j + F_k) / Z_k`, so scale and direction both change
//!
//! Neighbor weights `w_j` are constants throughout, and `Z_k = 1 + Σ w_j`.

use crate::densecrf::joint_refine_probs;
use crate::error::{Error, Result};
use crate::real::{softmax_in_place, Real};

/// `C × n` classifier, one column per class, no bias. Stored row-major
/// (`data[k * classes + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights<T = f64> {
    features: usize,
    classes: usize,
    data: Vec<T>,
}

impl<T: Real> ClassifierWeights<T> {
    pub fn new(features: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        if classes < 2 || features == 0 {
            return Err(Error::Parameter(format!(
                "classifier needs >= 2 classes and >= 1 feature, got {classes} and {features}"
            )));
        }
        if data.len() != features * classes {
            return Err(Error::Dimension(format!(
                "classifier expects {} weights, got {}",
                features * classes,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("classifier weights must be finite".into()));
        }
        Ok(Self { features, classes, data })
    }

    /// Builds the matrix from per-class columns.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self> {
        let classes = columns.len();
        let features = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != features) {
            return Err(Error::Dimension("class columns differ in length".into()));
        }
        let mut data = vec![T::zero(); features * classes];
        for (c, col) in columns.iter().enumerate() {
            for (k, &v) in col.iter().enumerate() {
                data[k * classes + c] = v;
            }
        }
        Self::new(features, classes, data)
    }

    pub fn zeros(features: usize, classes: usize) -> Self {
        Self { features, classes, data: vec![T::zero(); features * classes] }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.features).map(|k| self.data[k * self.classes + c]).collect()
    }

    pub fn set_column(&mut self, c: usize, col: &[T]) {
        for (k, &v) in col.iter().enumerate() {
            self.data[k * self.classes + c] = v;
        }
    }

    /// `Wᵀ f`.
    pub fn logits(&self, f: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.classes];
        for (k, &fk) in f.iter().enumerate() {
            let row = &self.data[k * self.classes..(k + 1) * self.classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * fk;
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ClassifierWeights<U> {
        ClassifierWeights {
            features: self.features,
            classes: self.classes,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub weight: f64,
    pub feature: Vec<f64>,
}

/// A boundary pixel, its label and its weighted neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelCase {
    pub feature: Vec<f64>,
    pub label: usize,
    pub neighbors: Vec<Neighbor>,
}

impl PixelCase {
    fn validate(&self, w: &ClassifierWeights) -> Result<()> {
        if self.feature.len() != w.features() {
            return Err(Error::Dimension(format!(
                "feature has {} entries, classifier expects {}",
                self.feature.len(),
                w.features()
            )));
        }
        if self.label >= w.classes() {
            return Err(Error::Parameter(format!("label {} out of range", self.label)));
        }
        for n in &self.neighbors {
            if !(n.weight >= 0.0) || !n.weight.is_finite() {
                return Err(Error::Parameter(format!("neighbor weight must be nonnegative, got {}", n.weight)));
            }
            if n.feature.len() != self.feature.len() {
                return Err(Error::Dimension("neighbor feature length mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn normalizer(&self) -> f64 {
        1.0 + self.neighbors.iter().map(|n| n.weight).sum::<f64>()
    }

    /// `F*_k = (Σ w_j F_j + F_k) / Z_k`.
    pub fn refined_feature(&self) -> Vec<f64> {
        let z = self.normalizer();
        let mut out = self.feature.clone();
        for n in &self.neighbors {
            for (o, &f) in out.iter_mut().zip(&n.feature) {
                *o += n.weight * f;
            }
        }
        out.iter_mut().for_each(|v| *v /= z);
        out
    }
}

/// Gradient of the loss with respect to one class column.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `∂L/∂W_c`.
    pub grad: Vec<f64>,
    /// The `(1 - P)` factor.
    pub scale: f64,
    /// Unit vector along the descent direction `-∇W_c`; zero when the gradient vanishes.
    pub direction: Vec<f64>,
}

impl GradReport {
    fn from_descent(scale: f64, along: &[f64]) -> Self {
        let descent: Vec<f64> = along.iter().map(|v| scale * v).collect();
        let norm = norm(&descent);
        let direction = if norm > 0.0 { descent.iter().map(|v| v / norm).collect() } else { vec![0.0; descent.len()] };
        Self { grad: descent.iter().map(|v| -v).collect(), scale, direction }
    }

    pub fn descent(&self) -> Vec<f64> {
        self.grad.iter().map(|v| -v).collect()
    }

    /// Angle between the descent direction and `v`, in radians.
    pub fn angle_to(&self, v: &[f64]) -> f64 {
        angle(&self.descent(), v)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        (d / n).clamp(-1.0, 1.0)
    }
}

pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).acos()
}

/// Norm of the wedge product, `sqrt(Σ_{i<j} (a_i b_j - a_j b_i)²)`; zero iff
/// the vectors are collinear. Evaluated pairwise to avoid cancellation.
pub fn cross_norm(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            acc += (a[i] * b[j] - a[j] * b[i]).powi(2);
        }
    }
    acc.sqrt()
}

/// Stable cross-entropy: returns `(-ln P_label, P)`.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Parameter(format!("label {label} out of range for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { what: "logits", cell: 0 });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    Ok((lse - logits[label], probs))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// `-∇W_c = (1 - P_c) F_k`.
pub fn baseline_weight_grad(case: &PixelCase, w: &ClassifierWeights) -> Result<GradReport> {
    case.validate(w)?;
    let (_, p) = softmax_ce(&w.logits(&case.feature), case.label)?;
    Ok(GradReport::from_descent(1.0 - p[case.label], &case.feature))
}

/// Refined probability `P̂_k` with neighbor probabilities computed from `W`.
pub fn joint_refined_probs(case: &PixelCase, w: &ClassifierWeights) -> Result<Vec<f64>> {
    case.validate(w)?;
    let p_k = softmax(&w.logits(&case.feature));
    let p_n: Vec<Vec<f64>> = case.neighbors.iter().map(|n| softmax(&w.logits(&n.feature))).collect();
    let pairs: Vec<(f64, &[f64])> =
        case.neighbors.iter().zip(&p_n).map(|(n, p)| (n.weight, p.as_slice())).collect();
    joint_refine_probs(&p_k, &pairs)
}

/// `-∇W_c = (1 - P̂_c) F_k`.
///
/// This is the exact gradient of `-ln softmax(Y_k + b)_c` where the offset
/// `b = ln P̂_k - ln P_k` carries the neighbors' contribution and is held
/// constant, i.e. neighbors are frozen in logit space. The descent direction
/// is always `F_k`.
pub fn jointcrf_weight_grad(case: &PixelCase, w: &ClassifierWeights) -> Result<GradReport> {
    let p_hat = joint_refined_probs(case, w)?;
    Ok(GradReport::from_descent(1.0 - p_hat[case.label], &case.feature))
}

/// Exact gradient of `-ln P̂_c` with neighbor probabilities frozen:
/// `-∇W_c = P_c (1 - P_c) / (Z P̂_c) · F_k`. Also collinear with `F_k`.
pub fn jointcrf_prob_space_grad(case: &PixelCase, w: &ClassifierWeights) -> Result<GradReport> {
    let p_hat = joint_refined_probs(case, w)?;
    let p = softmax(&w.logits(&case.feature));
    let c = case.label;
    let scale = p[c] * (1.0 - p[c]) / (case.normalizer() * p_hat[c]);
    Ok(GradReport::from_descent(scale, &case.feature))
}

/// `-∇W_c = (1 - P*_c) F*_k` with `P* = softmax(Wᵀ F*_k)`.
pub fn ecrf_weight_grad(case: &PixelCase, w: &ClassifierWeights) -> Result<GradReport> {
    case.validate(w)?;
    let refined = case.refined_feature();
    let p = softmax(&w.logits(&refined));
    Ok(GradReport::from_descent(1.0 - p[case.label], &refined))
}

/// Which update rule to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Joint,
    Ecrf,
}

pub fn weight_grad(method: Method, case: &PixelCase, w: &ClassifierWeights) -> Result<GradReport> {
    match method {
        Method::Baseline => baseline_weight_grad(case, w),
        Method::Joint => jointcrf_weight_grad(case, w),
        Method::Ecrf => ecrf_weight_grad(case, w),
    }
}

/// Two-class boundary construction: class 0 owns `w1`, class 1 owns `w2`.
///
/// The boundary pixel is `F_k = (1 - mix) Ŵ1 + mix Ŵ2` (label 0); a single
/// inner neighbor `F_j = purity Ŵ1 + (1 - purity) Ŵ2` sends weight `weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleSetup {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub mix: f64,
    pub neighbor_purity: f64,
    pub weight: f64,
    pub step: f64,
}

impl AngleSetup {
    /// `W1 = (1, 0)`, `W2` at 80°, half-mixed boundary pixel, pure neighbor, `w = 1`, step 0.1.
    pub fn canonical() -> Self {
        let t = 80f64.to_radians();
        Self { w1: vec![1.0, 0.0], w2: vec![t.cos(), t.sin()], mix: 0.5, neighbor_purity: 1.0, weight: 1.0, step: 0.1 }
    }

    pub fn case(&self) -> Result<(PixelCase, ClassifierWeights)> {
        if self.w1.len() != self.w2.len() || self.w1.len() < 2 {
            return Err(Error::Dimension("class weights must share a dimension >= 2".into()));
        }
        if cross_norm(&self.w1, &self.w2) <= 1e-12 * norm(&self.w1) * norm(&self.w2) {
            return Err(Error::Parameter("degenerate input: W1 and W2 are collinear".into()));
        }
        if !(0.0..=0.5).contains(&self.mix) {
            return Err(Error::Parameter(format!("mix must lie in [0, 0.5], got {}", self.mix)));
        }
        if !(1.0 - self.mix..=1.0).contains(&self.neighbor_purity) {
            return Err(Error::Parameter(format!(
                "neighbor purity must lie in [1 - mix, 1], got {}",
                self.neighbor_purity
            )));
        }
        if !(self.weight >= 0.0) || !(self.step > 0.0) {
            return Err(Error::Parameter("weight must be >= 0 and step > 0".into()));
        }
        let (u1, u2) = (unit(&self.w1), unit(&self.w2));
        let blend = |a: f64| -> Vec<f64> { u1.iter().zip(&u2).map(|(x, y)| a * x + (1.0 - a) * y).collect() };
        let case = PixelCase {
            feature: blend(1.0 - self.mix),
            label: 0,
            neighbors: vec![Neighbor { weight: self.weight, feature: blend(self.neighbor_purity) }],
        };
        let w = ClassifierWeights::from_columns(&[self.w1.clone(), self.w2.clone()])?;
        Ok((case, w))
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// One descent step on `W1` per method; returns `∠(W2, W1*)` for baseline,
/// Joint-CRF and E-CRF.
pub fn angle_experiment(setup: &AngleSetup) -> Result<[f64; 3]> {
    let (case, w) = setup.case()?;
    let mut out = [0.0; 3];
    for (slot, method) in [Method::Baseline, Method::Joint, Method::Ecrf].into_iter().enumerate() {
        let g = weight_grad(method, &case, &w)?;
        let updated: Vec<f64> = setup.w1.iter().zip(&g.grad).map(|(x, d)| x - setup.step * d).collect();
        out[slot] = angle(&setup.w2, &updated);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(w1: Vec<f64>, w2: Vec<f64>) -> ClassifierWeights {
        ClassifierWeights::from_columns(&[w1, w2]).unwrap()
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let (l, p) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(p, vec![0.5, 0.5]);
        let (l, _) = softmax_ce(&[800.0, 0.0, -3.0], 0).unwrap();
        assert!(l.abs() < 1e-300);
        assert!(softmax_ce(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn ce_matches_direct_exponentials() {
        let logits = [0.3, -1.2, 2.1, 0.05, -0.7];
        for label in 0..5 {
            let (l, p) = softmax_ce(&logits, label).unwrap();
            let s: f64 = logits.iter().map(|v| v.exp()).sum();
            assert!((l + (logits[label].exp() / s).ln()).abs() < 1e-12);
            for k in 0..5 {
                assert!((p[k] - logits[k].exp() / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_uniform_half_feature() {
        let case = PixelCase { feature: vec![0.4, -2.0, 1.0], label: 1, neighbors: vec![] };
        let g = baseline_weight_grad(&case, &ClassifierWeights::zeros(3, 2)).unwrap();
        assert_eq!(g.scale, 0.5);
        assert_eq!(g.descent(), vec![0.2, -1.0, 0.5]);
    }

    #[test]
    fn baseline_confident_is_zero() {
        let case = PixelCase { feature: vec![1.0, 0.0], label: 0, neighbors: vec![] };
        let g = baseline_weight_grad(&case, &two_class(vec![60.0, 0.0], vec![-60.0, 0.0])).unwrap();
        assert!(norm(&g.grad) < 1e-40);
    }

    #[test]
    fn no_neighbors_reduces_to_baseline() {
        let case = PixelCase { feature: vec![0.3, 0.9, -0.2], label: 0, neighbors: vec![] };
        let w = ClassifierWeights::new(3, 2, vec![0.1, -0.3, 0.5, 0.2, -0.4, 0.7]).unwrap();
        let b = baseline_weight_grad(&case, &w).unwrap();
        assert_eq!(jointcrf_weight_grad(&case, &w).unwrap(), b);
        assert_eq!(ecrf_weight_grad(&case, &w).unwrap(), b);
    }

    #[test]
    fn zero_weight_neighbors_reduce_to_baseline() {
        let mut case = PixelCase { feature: vec![0.3, 0.9], label: 1, neighbors: vec![] };
        case.neighbors.push(Neighbor { weight: 0.0, feature: vec![-1.0, 2.0] });
        let w = two_class(vec![0.4, 0.1], vec![-0.2, 0.6]);
        assert_eq!(ecrf_weight_grad(&case, &w).unwrap(), baseline_weight_grad(&case, &w).unwrap());
    }

    #[test]
    fn aligned_neighbors_change_scale_only() {
        let f = vec![0.6, 0.8];
        let case = PixelCase {
            feature: f.clone(),
            label: 0,
            neighbors: vec![Neighbor { weight: 2.0, feature: f.clone() }],
        };
        let w = two_class(vec![0.4, 0.1], vec![-0.2, 0.6]);
        let e = ecrf_weight_grad(&case, &w).unwrap();
        assert!(cross_norm(&e.grad, &f) < 1e-15);
    }

    #[test]
    fn invalid_cases_rejected() {
        let w = ClassifierWeights::zeros(2, 2);
        let bad_label = PixelCase { feature: vec![1.0, 0.0], label: 2, neighbors: vec![] };
        assert!(baseline_weight_grad(&bad_label, &w).is_err());
        let bad_weight = PixelCase {
            feature: vec![1.0, 0.0],
            label: 0,
            neighbors: vec![Neighbor { weight: -1.0, feature: vec![0.0, 1.0] }],
        };
        assert!(jointcrf_weight_grad(&bad_weight, &w).is_err());
        assert!(ClassifierWeights::<f64>::new(2, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn cross_norm_detects_collinearity() {
        assert_eq!(cross_norm(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), 0.0);
        assert!((cross_norm(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn collinear_setup_is_rejected() {
        let setup = AngleSetup { w2: vec![2.0, 0.0], ..AngleSetup::canonical() };
        assert!(matches!(angle_experiment(&setup), Err(Error::Parameter(_))));
    }

    #[test]
    fn pure_boundary_pixel_gives_equal_angles() {
        let setup = AngleSetup { mix: 0.0, ..AngleSetup::canonical() };
        let [t1, t2, t3] = angle_experiment(&setup).unwrap();
        assert!(t1 <= t2 + 1e-12 && t2 <= t3 + 1e-12);
        assert!((t1 - 80f64.to_radians()).abs() < 1e-12);
    }
}
