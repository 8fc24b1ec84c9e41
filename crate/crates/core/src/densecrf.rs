//! Dense CRF over class scores with exact message passing.
//!
//! One mean-field step mixes every cell's scores with its neighbors':
//!
//! ```text
//! Y*_i[a] = (Y_i[a] + Σ_{j≠i} k(i,j) Σ_b μ(a,b) Y_j[b]) / (1 + Σ_{j≠i} k(i,j))
//! ```
//!
//! where `k` is the two-kernel Gaussian on position and color and `μ` the
//! label compatibility. With the identity compatibility the mixing weights
//! are convex.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridcore::{FeatureMap, Image};
use crate::real::{softmax_in_place, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernelParams {
    pub w1: f64,
    pub w2: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
}

impl Default for GaussianKernelParams {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0, theta_alpha: 3.0, theta_beta: 0.1, theta_gamma: 1.0 }
    }
}

impl GaussianKernelParams {
    pub fn validate(&self) -> Result<()> {
        let thetas = [self.theta_alpha, self.theta_beta, self.theta_gamma];
        if thetas.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Parameter(format!("kernel scale factors must be positive, got {thetas:?}")));
        }
        if !self.w1.is_finite() || !self.w2.is_finite() {
            return Err(Error::Parameter("kernel weights must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    fn eval_unchecked(&self, dp2: f64, di2: f64) -> f64 {
        let appearance = (-dp2 / (2.0 * self.theta_alpha * self.theta_alpha)
            - di2 / (2.0 * self.theta_beta * self.theta_beta))
            .exp();
        let smoothness = (-dp2 / (2.0 * self.theta_gamma * self.theta_gamma)).exp();
        self.w1 * appearance + self.w2 * smoothness
    }
}

/// Appearance plus smoothness kernel between two pixels.
pub fn gaussian_kernel(
    p_i: [f64; 2],
    p_j: [f64; 2],
    color_i: [f64; 3],
    color_j: [f64; 3],
    params: &GaussianKernelParams,
) -> Result<f64> {
    params.validate()?;
    let dp2 = (p_i[0] - p_j[0]).powi(2) + (p_i[1] - p_j[1]).powi(2);
    let di2 = (0..3).map(|k| (color_i[k] - color_j[k]).powi(2)).sum();
    Ok(params.eval_unchecked(dp2, di2))
}

/// `n × n` label compatibility `μ(a, b)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelCompatibility {
    classes: usize,
    matrix: Vec<f64>,
}

impl LabelCompatibility {
    pub fn identity(classes: usize) -> Self {
        let mut matrix = vec![0.0; classes * classes];
        (0..classes).for_each(|a| matrix[a * classes + a] = 1.0);
        Self { classes, matrix }
    }

    pub fn from_matrix(classes: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != classes * classes {
            return Err(Error::Dimension(format!("compatibility needs {} entries", classes * classes)));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("compatibility entries must be finite".into()));
        }
        Ok(Self { classes, matrix })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.classes + b]
    }

    fn is_identity(&self) -> bool {
        *self == Self::identity(self.classes)
    }
}

/// `ψ_p = μ(a, b) · k`.
pub fn pairwise_weight(a: usize, b: usize, kernel: f64, compat: &LabelCompatibility) -> f64 {
    compat.get(a, b) * kernel
}

/// Which cells exchange messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighborhood {
    AllPairs,
    /// Chebyshev window of the given radius.
    Window(usize),
}

impl Neighborhood {
    pub fn contains(&self, width: usize, i: usize, j: usize) -> bool {
        match *self {
            Neighborhood::AllPairs => true,
            Neighborhood::Window(r) => {
                let (ri, ci) = (i / width, i % width);
                let (rj, cj) = (j / width, j % width);
                ri.abs_diff(rj) <= r && ci.abs_diff(cj) <= r
            }
        }
    }

    /// Neighbor indices of `i` (excluding `i`), in increasing order.
    pub fn neighbors(&self, height: usize, width: usize, i: usize) -> Vec<usize> {
        match *self {
            Neighborhood::AllPairs => (0..height * width).filter(|&j| j != i).collect(),
            Neighborhood::Window(r) => {
                let (ri, ci) = (i / width, i % width);
                let mut out = Vec::new();
                for y in ri.saturating_sub(r)..=(ri + r).min(height - 1) {
                    for x in ci.saturating_sub(r)..=(ci + r).min(width - 1) {
                        let j = y * width + x;
                        if j != i {
                            out.push(j);
                        }
                    }
                }
                out
            }
        }
    }
}

/// Per-cell class distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbField<T = f64> {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<T>,
}

impl<T: Real> ProbField<T> {
    /// Validates that every cell is a distribution: nonnegative, summing to 1
    /// within 1e-6 or 64 ulps of `T`, whichever is looser.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * classes || classes == 0 {
            return Err(Error::Dimension("probability field size mismatch".into()));
        }
        let tol = (64.0 * T::epsilon().to_f64_lossless()).max(1e-6);
        for (i, cell) in data.chunks(classes).enumerate() {
            let sum: f64 = cell.iter().map(|v| v.to_f64_lossless()).sum();
            if cell.iter().any(|&v| v < T::zero() || !v.is_finite()) || (sum - 1.0).abs() > tol {
                return Err(Error::Numeric { what: "probability field", cell: i });
            }
        }
        Ok(Self { height, width, classes, data })
    }

    /// Softmax over the channels of a score field.
    pub fn softmax(scores: &FeatureMap<T>) -> Self {
        let mut data = scores.data().to_vec();
        for cell in data.chunks_mut(scores.channels()) {
            softmax_in_place(cell);
        }
        Self { height: scores.height(), width: scores.width(), classes: scores.channels(), data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Most probable class per cell; ties go to the smaller id.
    pub fn argmax(&self) -> Vec<u32> {
        self.data
            .chunks(self.classes)
            .map(|cell| {
                let mut best = 0;
                for (k, v) in cell.iter().enumerate() {
                    if *v > cell[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Dense kernel matrix rows for a grid whose colors come from `image`.
/// Row `i` holds `k(i, j)` for every `j` in the neighborhood, zero elsewhere
/// and on the diagonal.
pub fn kernel_matrix(
    image: &Image,
    params: &GaussianKernelParams,
    neighborhood: Neighborhood,
) -> Result<Vec<f64>> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let mut k = vec![0.0; n * n];
    k.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ci = image.color(i);
        let (ri, cc) = ((i / w) as f64, (i % w) as f64);
        for j in neighborhood.neighbors(h, w, i) {
            let cj = image.color(j);
            let dp2 = (ri - (j / w) as f64).powi(2) + (cc - (j % w) as f64).powi(2);
            let di2 = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
            row[j] = params.eval_unchecked(dp2, di2);
        }
    });
    Ok(k)
}

fn check_alignment(scores: &FeatureMap<f64>, image: &Image, compat: &LabelCompatibility) -> Result<()> {
    if scores.height() != image.height() || scores.width() != image.width() {
        return Err(Error::Dimension(format!(
            "scores {}x{} vs image {}x{}",
            scores.height(),
            scores.width(),
            image.height(),
            image.width()
        )));
    }
    if compat.classes() != scores.channels() {
        return Err(Error::Dimension(format!(
            "compatibility is {} classes, scores have {}",
            compat.classes(),
            scores.channels()
        )));
    }
    Ok(())
}

fn step_with_kernel(scores: &FeatureMap<f64>, kernel: &[f64], compat: &LabelCompatibility) -> FeatureMap<f64> {
    let n = scores.cells();
    let c = scores.channels();
    // Messages are sent as μ-transformed neighbor scores.
    let sent: Vec<f64> = if compat.is_identity() {
        scores.data().to_vec()
    } else {
        let mut out = vec![0.0; n * c];
        for j in 0..n {
            let yj = scores.cell(j);
            for a in 0..c {
                out[j * c + a] = (0..c).map(|b| compat.get(a, b) * yj[b]).sum();
            }
        }
        out
    };
    let mut out = vec![0.0; n * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, dst)| {
        let row = &kernel[i * n..(i + 1) * n];
        let mut z = 1.0;
        dst.copy_from_slice(scores.cell(i));
        for (j, &kij) in row.iter().enumerate() {
            if kij == 0.0 || j == i {
                continue;
            }
            z += kij;
            let m = &sent[j * c..(j + 1) * c];
            for a in 0..c {
                dst[a] += kij * m[a];
            }
        }
        dst.iter_mut().for_each(|v| *v /= z);
    });
    FeatureMap::new(scores.height(), scores.width(), c, out).expect("finite scores stay finite")
}

/// One mean-field update. `image` must be at score resolution.
pub fn mean_field_step(
    scores: &FeatureMap<f64>,
    image: &Image,
    params: &GaussianKernelParams,
    compat: &LabelCompatibility,
    neighborhood: Neighborhood,
) -> Result<FeatureMap<f64>> {
    check_alignment(scores, image, compat)?;
    let kernel = kernel_matrix(image, params, neighborhood)?;
    Ok(step_with_kernel(scores, &kernel, compat))
}

/// Runs `steps` mean-field updates and softmax-normalizes the result.
///
/// Used as detached post-processing (Vanilla-CRF): it only reads the scores.
pub fn run_inference(
    scores: &FeatureMap<f64>,
    image: &Image,
    params: &GaussianKernelParams,
    compat: &LabelCompatibility,
    steps: usize,
    neighborhood: Neighborhood,
) -> Result<ProbField<f64>> {
    if steps == 0 {
        return Err(Error::Parameter("inference needs at least one step".into()));
    }
    check_alignment(scores, image, compat)?;
    let kernel = kernel_matrix(image, params, neighborhood)?;
    let mut y = scores.clone();
    for _ in 0..steps {
        y = step_with_kernel(&y, &kernel, compat);
    }
    Ok(ProbField::softmax(&y))
}

/// Probability-space refinement `P̂_k = (Σ w_j P_j + P_k) / (1 + Σ w_j)`.
pub fn joint_refine_probs<T: Real>(p_k: &[T], neighbors: &[(T, &[T])]) -> Result<Vec<T>> {
    let mut out = p_k.to_vec();
    let mut z = T::one();
    for (w, p_j) in neighbors {
        if *w < T::zero() || !w.is_finite() {
            return Err(Error::Parameter(format!("message weight must be nonnegative, got {w:?}")));
        }
        if p_j.len() != p_k.len() {
            return Err(Error::Dimension("neighbor distribution length mismatch".into()));
        }
        z += *w;
        for (o, &p) in out.iter_mut().zip(p_j.iter()) {
            *o += *w * p;
        }
    }
    out.iter_mut().for_each(|o| *o /= z);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> GaussianKernelParams {
        GaussianKernelParams { w1: 1.0, w2: 1.0, theta_alpha: 1.0, theta_beta: 1.0, theta_gamma: 1.0 }
    }

    #[test]
    fn kernel_self_is_weight_sum() {
        let p = GaussianKernelParams { w1: 0.7, w2: 2.5, ..unit() };
        let k = gaussian_kernel([3.0, 4.0], [3.0, 4.0], [0.1, 0.2, 0.3], [0.1, 0.2, 0.3], &p).unwrap();
        assert_eq!(k, 3.2);
    }

    #[test]
    fn kernel_hand_value() {
        // |Δp|² = 1, |ΔI|² = 1: e^{-1} + e^{-0.5}
        let k = gaussian_kernel([0.0, 0.0], [1.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0], &unit()).unwrap();
        assert!((k - ((-1f64).exp() + (-0.5f64).exp())).abs() < 1e-15);
        assert!((k - 0.97441).abs() < 1e-5);
    }

    #[test]
    fn kernel_decays_and_validates() {
        let k = gaussian_kernel([0.0, 0.0], [500.0, 0.0], [0.0; 3], [0.0; 3], &unit()).unwrap();
        assert!(k < 1e-300);
        let bad = GaussianKernelParams { theta_beta: 0.0, ..unit() };
        assert!(matches!(gaussian_kernel([0.0; 2], [0.0; 2], [0.0; 3], [0.0; 3], &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn kernel_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GaussianKernelParams::default();
        for _ in 0..50 {
            let pi = [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)];
            let pj = [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)];
            let ci = [rng.gen(), rng.gen(), rng.gen()];
            let cj = [rng.gen(), rng.gen(), rng.gen()];
            assert_eq!(
                gaussian_kernel(pi, pj, ci, cj, &p).unwrap(),
                gaussian_kernel(pj, pi, cj, ci, &p).unwrap()
            );
        }
    }

    #[test]
    fn pairwise_weight_cases() {
        let id = LabelCompatibility::identity(3);
        assert_eq!(pairwise_weight(1, 1, 0.97441, &id), 0.97441);
        assert_eq!(pairwise_weight(1, 2, 0.97441, &id), 0.0);
        let zero = LabelCompatibility::from_matrix(2, vec![0.0; 4]).unwrap();
        assert_eq!(pairwise_weight(0, 1, 0.97441, &zero), 0.0);
        let m = LabelCompatibility::from_matrix(2, vec![1.0, 0.3, 0.3, 1.0]).unwrap();
        assert!((pairwise_weight(0, 1, 0.97441, &m) - 0.292_323).abs() < 1e-12);
    }

    #[test]
    fn single_cell_is_unchanged() {
        let img = Image::from_unit(1, 1, vec![0.2, 0.4, 0.6]).unwrap();
        let y = FeatureMap::new(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let out = mean_field_step(&y, &img, &unit(), &LabelCompatibility::identity(3), Neighborhood::AllPairs).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn two_cell_swap_symmetry() {
        let img = Image::from_unit(1, 2, vec![0.3, 0.3, 0.3, 0.3, 0.3, 0.3]).unwrap();
        let y = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = mean_field_step(&y, &img, &unit(), &LabelCompatibility::identity(2), Neighborhood::AllPairs).unwrap();
        let d = out.data();
        assert_eq!(d[0], d[3]);
        assert_eq!(d[1], d[2]);
    }

    #[test]
    fn zero_weight_inference_is_plain_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::from_unit(3, 3, (0..27).map(|_| rng.gen()).collect()).unwrap();
        let y = FeatureMap::new(3, 3, 4, (0..36).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let p = GaussianKernelParams { w1: 0.0, w2: 0.0, ..unit() };
        let out = run_inference(&y, &img, &p, &LabelCompatibility::identity(4), 3, Neighborhood::AllPairs).unwrap();
        assert_eq!(out, ProbField::softmax(&y));
    }

    #[test]
    fn inference_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let img = Image::from_unit(4, 5, (0..60).map(|_| rng.gen()).collect()).unwrap();
            let y = FeatureMap::new(4, 5, 3, (0..60).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let out = run_inference(
                &y,
                &img,
                &GaussianKernelParams::default(),
                &LabelCompatibility::identity(3),
                2,
                Neighborhood::Window(2),
            )
            .unwrap();
            for i in 0..20 {
                assert!((out.cell(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            assert!(ProbField::new(4, 5, 3, out.data().to_vec()).is_ok());
        }
    }

    #[test]
    fn inference_needs_steps() {
        let img = Image::from_unit(1, 1, vec![0.0; 3]).unwrap();
        let y = FeatureMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(run_inference(&y, &img, &unit(), &LabelCompatibility::identity(2), 0, Neighborhood::AllPairs).is_err());
    }

    #[test]
    fn window_neighborhood_membership() {
        let nb = Neighborhood::Window(1).neighbors(3, 3, 4);
        assert_eq!(nb, vec![0, 1, 2, 3, 5, 6, 7, 8]);
        let nb = Neighborhood::Window(1).neighbors(3, 3, 0);
        assert_eq!(nb, vec![1, 3, 4]);
        assert!(!Neighborhood::Window(1).contains(3, 0, 8));
    }

    #[test]
    fn joint_refine_cases() {
        let p = [0.2, 0.8];
        assert_eq!(joint_refine_probs(&p, &[]).unwrap(), vec![0.2, 0.8]);
        let out: Vec<f64> = joint_refine_probs(&p, &[(1.0, &[0.6, 0.4][..])]).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15 && (out[1] - 0.6).abs() < 1e-15);
        assert!(matches!(joint_refine_probs(&p, &[(-0.1, &[0.5, 0.5][..])]), Err(Error::Parameter(_))));
    }

    #[test]
    fn joint_refine_matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dist = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let pk = dist(&mut rng);
        let ps: Vec<Vec<f64>> = (0..3).map(|_| dist(&mut rng)).collect();
        let ws: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
        let nb: Vec<(f64, &[f64])> = ws.iter().copied().zip(ps.iter().map(|p| p.as_slice())).collect();
        let out = joint_refine_probs(&pk, &nb).unwrap();
        let z = 1.0 + ws[0] + ws[1] + ws[2];
        for c in 0..4 {
            let expect = (ws[0] * ps[0][c] + ws[1] * ps[1][c] + ws[2] * ps[2][c] + pk[c]) / z;
            assert!((out[c] - expect).abs() < 1e-15);
            let lo = ps.iter().map(|p| p[c]).fold(pk[c], f64::min);
            let hi = ps.iter().map(|p| p[c]).fold(pk[c], f64::max);
            assert!(out[c] >= lo - 1e-15 && out[c] <= hi + 1e-15);
        }
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
