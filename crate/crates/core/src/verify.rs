//! Randomized verification suites: each compares an implementation against
//! an oracle from [`crate::oracle`] and reports the worst case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::densecrf::{self, GaussianKernelParams, LabelCompatibility, Neighborhood};
use crate::ecrf::{ecrf_backward, ecrf_forward, EcrfParams};
use crate::error::Result;
use crate::gridcore::LabelMap;
use crate::real::Real;
use crate::toynet::{forward, loss_and_grads, loss_and_logit_grad, ConvSpec, Mode, Net, NetConfig, Prepared};
use crate::gradtheory::{
    angle_experiment, cosine, cross_norm, ecrf_weight_grad, jointcrf_prob_space_grad, jointcrf_weight_grad,
    joint_refined_probs, AngleSetup, ClassifierWeights, GradReport, Neighbor, PixelCase,
};
use crate::gridcore::{FeatureMap, Image};
use crate::oracle::{
    central_diff, ecrf_forward_reference, max_abs_diff, mean_field_reference, neg_log_softmax, rel_err,
};
use crate::superpixel::{slic_segment, SlicParams, SuperpixelMap};

/// One line of a verification table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
    /// `worst` is a minimum that must reach `tolerance`, rather than a maximum.
    pub lower_bound: bool,
}

impl CheckRow {
    fn upper(name: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self { name: name.into(), cases, worst, tolerance, passed: worst <= tolerance, note: String::new(), lower_bound: false }
    }

    fn lower(name: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self { name: name.into(), cases, worst, tolerance, passed: worst >= tolerance, note: String::new(), lower_bound: true }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

impl std::fmt::Display for CheckRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<48} cases={:<4} worst={:<11.3e} {}{:<9.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            if self.lower_bound { "min=" } else { "tol=" },
            self.tolerance,
            self.note
        )
    }
}

pub const GRADTHEORY_TOL: f64 = 1e-8;
pub const COLLINEAR_TOL: f64 = 1e-12;
pub const DIRECTION_MARGIN: f64 = 1e-9;
pub const ECRF_GRAD_TOL: f64 = 1e-6;
pub const ECRF_FORWARD_TOL: f64 = 1e-10;
pub const MEAN_FIELD_TOL: f64 = 1e-10;
pub const NET_GRAD_TOL_F64: f64 = 1e-7;
pub const NET_GRAD_TOL_F32: f64 = 1e-4;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

/// Random boundary pixel with 1–4 weighted neighbors.
pub fn random_pixel_case(rng: &mut ChaCha8Rng) -> (PixelCase, ClassifierWeights) {
    let dim = rng.gen_range(2..=8);
    let classes = rng.gen_range(2..=6);
    let w = ClassifierWeights::new(dim, classes, normal_vec(rng, dim * classes, 0.7)).expect("valid shape");
    let neighbors = (0..rng.gen_range(1..=4))
        .map(|_| Neighbor { weight: rng.gen_range(0.05..2.0), feature: normal_vec(rng, dim, 1.0) })
        .collect();
    let case = PixelCase { feature: normal_vec(rng, dim, 1.0), label: rng.gen_range(0..classes), neighbors };
    (case, w)
}

/// Finite-difference check of a class-weight gradient against a scalar loss of `W_c`.
fn fd_check(report: &GradReport, w: &ClassifierWeights, label: usize, eps: f64, loss: impl Fn(&ClassifierWeights) -> f64) -> f64 {
    let col = w.column(label);
    let fd = central_diff(&col, eps, |x| {
        let mut probe = w.clone();
        probe.set_column(label, x);
        loss(&probe)
    });
    rel_err(&report.grad, &fd)
}

/// Class-weight gradient suite: finite-difference agreement for every model
/// plus the collinearity, direction and scale-relief properties.
pub fn gradtheory_suite(cases: usize, seed: u64, eps: f64) -> Result<Vec<CheckRow>> {
    let (mut base, mut joint, mut joint_prob, mut ecrf) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut collinear, mut direction) = (0.0f64, f64::INFINITY);
    for k in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let (case, w) = random_pixel_case(&mut rng);
        let c = case.label;

        let g = crate::gradtheory::baseline_weight_grad(&case, &w)?;
        base = base.max(fd_check(&g, &w, c, eps, |p| neg_log_softmax(&p.logits(&case.feature), c)));

        // Neighbor contribution frozen as a logit offset at the base point.
        let p_hat = joint_refined_probs(&case, &w)?;
        let logits0 = w.logits(&case.feature);
        let s0: f64 = logits0.iter().map(|v| v.exp()).sum();
        let offset: Vec<f64> = (0..w.classes()).map(|m| p_hat[m].ln() - (logits0[m].exp() / s0).ln()).collect();
        let g = jointcrf_weight_grad(&case, &w)?;
        joint = joint.max(fd_check(&g, &w, c, eps, |p| {
            let y: Vec<f64> = p.logits(&case.feature).iter().zip(&offset).map(|(a, b)| a + b).collect();
            neg_log_softmax(&y, c)
        }));
        collinear = collinear.max(cross_norm(&g.grad, &case.feature));

        // Neighbor probabilities frozen in probability space.
        let frozen: Vec<(f64, f64)> = case
            .neighbors
            .iter()
            .map(|n| {
                let y = w.logits(&n.feature);
                let s: f64 = y.iter().map(|v| v.exp()).sum();
                (n.weight, y[c].exp() / s)
            })
            .collect();
        let z = 1.0 + frozen.iter().map(|(wt, _)| wt).sum::<f64>();
        // Only logit c moves with W_c. With R = Σ_{m≠c} exp(y_m - y_c) at the base
        // point and δ the logit shift, P_c - P_c0 = -R expm1(-δ) / ((1 + R e^{-δ})(1 + R)),
        // so the loss difference is formed without cancellation.
        let y0 = w.logits(&case.feature);
        let r: f64 = (0..w.classes()).filter(|&m| m != c).map(|m| (y0[m] - y0[c]).exp()).sum();
        let refined0 = (frozen.iter().map(|(wt, pj)| wt * pj).sum::<f64>() + 1.0 / (1.0 + r)) / z;
        let g = jointcrf_prob_space_grad(&case, &w)?;
        let col = w.column(c);
        let fd = central_diff(&col, eps, |x| {
            let delta: f64 = x.iter().zip(&col).zip(&case.feature).map(|((a, b), f)| (a - b) * f).sum();
            let dp = -r * (-delta).exp_m1() / ((1.0 + r * (-delta).exp()) * (1.0 + r));
            -(dp / (z * refined0)).ln_1p()
        });
        joint_prob = joint_prob.max(rel_err(&g.grad, &fd));
        collinear = collinear.max(cross_norm(&g.grad, &case.feature));

        let g = ecrf_weight_grad(&case, &w)?;
        let mut refined = case.feature.clone();
        for n in &case.neighbors {
            for (r, f) in refined.iter_mut().zip(&n.feature) {
                *r += n.weight * f;
            }
        }
        refined.iter_mut().for_each(|r| *r /= z);
        ecrf = ecrf.max(fd_check(&g, &w, c, eps, |p| neg_log_softmax(&p.logits(&refined), c)));
        direction = direction.min(1.0 - cosine(&g.descent(), &case.feature).abs());
    }

    // Scale relief: neighbors confidently on the true class, pixel itself less so.
    let mut relief_violation = 0.0f64;
    let mut relief_cases = 0usize;
    let mut k = 0u64;
    while relief_cases < cases && k < 100 * cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003 + k));
        k += 1;
        let (mut case, w) = random_pixel_case(&mut rng);
        let c = case.label;
        let target = w.column(c);
        for n in &mut case.neighbors {
            let jitter: Vec<f64> = normal_vec(&mut rng, target.len(), 0.1);
            n.feature = target.iter().zip(&jitter).map(|(t, j)| 4.0 * t + j).collect();
        }
        let prob_c = |f: &[f64]| crate::gradtheory::softmax(&w.logits(f))[c];
        if prob_c(&case.feature) >= 0.9 || case.neighbors.iter().any(|n| prob_c(&n.feature) < 0.9) {
            continue;
        }
        relief_cases += 1;
        let base = crate::gradtheory::baseline_weight_grad(&case, &w)?;
        let joint = jointcrf_weight_grad(&case, &w)?;
        relief_violation = relief_violation.max(joint.scale - base.scale);
    }

    let mut relief = CheckRow::upper("joint-crf scale <= baseline scale", relief_cases, relief_violation, 0.0)
        .with_note("neighbors with P_c >= 0.9");
    relief.passed &= relief_cases == cases;

    Ok(vec![
        CheckRow::upper("baseline grad vs finite difference", cases, base, GRADTHEORY_TOL),
        CheckRow::upper("joint-crf grad vs FD (logit-frozen neighbors)", cases, joint, GRADTHEORY_TOL),
        CheckRow::upper("joint-crf exact grad vs FD (prob-frozen)", cases, joint_prob, GRADTHEORY_TOL),
        CheckRow::upper("e-crf grad vs finite difference", cases, ecrf, GRADTHEORY_TOL),
        CheckRow::upper("joint-crf grad collinear with F_k (cross norm)", cases, collinear, COLLINEAR_TOL),
        CheckRow::lower("e-crf grad 1 - |cos(grad, F_k)|", cases, direction, DIRECTION_MARGIN),
        relief,
    ])
}

/// Random angle construction satisfying the ordering constraints.
pub fn random_angle_setup(rng: &mut ChaCha8Rng) -> AngleSetup {
    let dim = rng.gen_range(2..=8);
    let unit = |rng: &mut ChaCha8Rng| {
        let v = normal_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let w1 = unit(rng);
    let w2 = loop {
        let cand = unit(rng);
        let ang = cosine(&w1, &cand).acos().to_degrees();
        if (20.0..=160.0).contains(&ang) {
            break cand;
        }
    };
    let mix = rng.gen_range(0.05..=0.5);
    let neighbor_purity = rng.gen_range((1.0f64 - mix + 0.05).min(1.0)..=1.0);
    AngleSetup { w1, w2, mix, neighbor_purity, weight: rng.gen_range(0.2..=3.0), step: 0.1 }
}

/// Angles on the canonical construction plus `sweep` random ones.
pub fn angle_sweep(sweep: usize, seed: u64) -> Result<Vec<(u64, [f64; 3])>> {
    let mut out = Vec::with_capacity(sweep);
    for k in 0..sweep {
        let s = seed.wrapping_add(k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        out.push((s, angle_experiment(&random_angle_setup(&mut rng))?));
    }
    Ok(out)
}

pub fn angle_suite(sweep: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let [t1, t2, t3] = angle_experiment(&AngleSetup::canonical())?;
    let canonical_gap = (t2 - t1).min(t3 - t2);
    let rows = angle_sweep(sweep, seed)?;
    let held = rows.iter().filter(|(_, [a, b, c])| a < b && b < c).count();
    let worst = rows.iter().map(|(_, [a, b, c])| (b - a).min(c - b)).fold(f64::INFINITY, f64::min);
    let mut canon = CheckRow::upper("canonical theta1 < theta2 < theta3", 1, -canonical_gap, 0.0);
    canon.passed = t1 < t2 && t2 < t3;
    canon.note = format!(
        "deg: {:.4} {:.4} {:.4}",
        t1.to_degrees(),
        t2.to_degrees(),
        t3.to_degrees()
    );
    let mut sweep_row = CheckRow::upper("randomized ordering", sweep, -worst, 0.0);
    sweep_row.passed = held == sweep;
    sweep_row.note = format!("{held}/{sweep} strict");
    Ok(vec![canon, sweep_row])
}

/// Randomized configuration for the feature-space CRF layer checks.
pub struct EcrfCase {
    pub features: FeatureMap<f64>,
    pub image: Image,
    pub sp: SuperpixelMap,
    pub params: EcrfParams<f64>,
    pub upstream: FeatureMap<f64>,
}

pub fn random_ecrf_case(index: usize, rng: &mut ChaCha8Rng) -> EcrfCase {
    let channels = [2, 4, 8][index % 3];
    let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let n = h * w;
    let pos_dim = [2, 4, 6][rng.gen_range(0..3)];
    let embed_dim = rng.gen_range(2..=4);
    let mut params = EcrfParams::<f64>::init(channels, pos_dim, embed_dim, rng).expect("valid dims");
    params.embed_bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    params.compat_weight.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    params.compat_bias = rng.gen_range(-1.0..1.0);
    (params.use_pairwise, params.use_superpixel) = match index % 4 {
        2 => (true, false),
        3 => (false, true),
        _ => (true, true),
    };
    if index % 5 == 4 {
        params.neighborhood = Neighborhood::Window(rng.gen_range(1..=2));
    }
    let blocks = rng.gen_range(1..=4u32);
    let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..blocks)).collect();
    let used = ids.iter().copied().max().unwrap_or(0) as usize + 1;
    EcrfCase {
        features: FeatureMap::new(h, w, channels, (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("finite"),
        image: Image::from_unit(h, w, (0..n * 3).map(|_| rng.gen()).collect()).expect("unit range"),
        sp: SuperpixelMap::new(h, w, ids, used).expect("valid ids"),
        params,
        upstream: FeatureMap::new(h, w, channels, (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("finite"),
    }
}

/// Gradient check of one layer configuration. Returns the worst per-tensor
/// relative error and the number of finite-difference entries skipped
/// because a perturbation crossed the kernel clamp.
pub fn ecrf_gradcheck_case(case: &EcrfCase, eps: f64) -> Result<(f64, usize)> {
    let (_, act) = ecrf_forward(&case.features, &case.image, &case.sp, &case.params)?;
    let (g_feat, g_par) = ecrf_backward(Some(&act), &case.upstream)?;
    let c = case.features.channels();
    let up = case.upstream.data();
    let loss = |feats: &[f64], p: &EcrfParams<f64>| -> (f64, Vec<bool>) {
        let r = ecrf_forward_reference(feats, c, &case.image, &case.sp, p);
        (r.output.iter().zip(up).map(|(a, b)| a * b).sum(), r.active)
    };
    let base_mask = loss(case.features.data(), &case.params).1;

    let mut worst = 0.0f64;
    let mut skipped = 0usize;
    let fd_feat = central_diff(case.features.data(), eps, |x| loss(x, &case.params).0);
    worst = worst.max(rel_err(g_feat.data(), &fd_feat));

    let analytic: Vec<Vec<f64>> = g_par.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    for (slot, a) in analytic.iter().enumerate() {
        let base: Vec<f64> = case.params.tensors()[slot].1.to_vec();
        let mut keep_a = Vec::new();
        let mut keep_n = Vec::new();
        for e in 0..base.len() {
            let eval = |delta: f64| {
                let mut p = case.params.clone();
                p.tensors_mut()[slot].1[e] = base[e] + delta;
                loss(case.features.data(), &p)
            };
            let (up_l, up_m) = eval(eps);
            let (dn_l, dn_m) = eval(-eps);
            if up_m != base_mask || dn_m != base_mask {
                skipped += 1;
                continue;
            }
            keep_a.push(a[e]);
            keep_n.push((up_l - dn_l) / (2.0 * eps));
        }
        worst = worst.max(rel_err(&keep_a, &keep_n));
    }
    Ok((worst, skipped))
}

pub fn ecrf_layer_suite(configs: usize, seed: u64, eps: f64) -> Result<Vec<CheckRow>> {
    let (mut fwd, mut grad, mut skipped) = (0.0f64, 0.0f64, 0usize);
    let mut identity_exact = true;
    for k in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let case = random_ecrf_case(k, &mut rng);
        let (out, _) = ecrf_forward(&case.features, &case.image, &case.sp, &case.params)?;
        let r = ecrf_forward_reference(case.features.data(), case.features.channels(), &case.image, &case.sp, &case.params);
        fwd = fwd.max(max_abs_diff(out.data(), &r.output));
        let (g, s) = ecrf_gradcheck_case(&case, eps)?;
        grad = grad.max(g);
        skipped += s;

        let mut off = case.params.clone();
        off.use_pairwise = false;
        off.use_superpixel = false;
        let (id, _) = ecrf_forward(&case.features, &case.image, &case.sp, &off)?;
        identity_exact &= id.data().iter().zip(case.features.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let mut identity = CheckRow::upper("identity configuration bit-exact", configs, 0.0, 0.0);
    identity.passed = identity_exact;
    Ok(vec![
        CheckRow::upper("e-crf forward vs brute force", configs, fwd, ECRF_FORWARD_TOL),
        CheckRow::upper("e-crf backward vs finite difference", configs, grad, ECRF_GRAD_TOL)
            .with_note(format!("{skipped} clamp-crossing entries skipped")),
        identity,
    ])
}

/// Mean-field step and two-step inference against the triple-loop oracle on
/// random 4×4 to 8×8 instances.
pub fn mean_field_suite(seeds: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut worst_step = 0.0f64;
    let mut worst_run = 0.0f64;
    for k in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let (h, w) = (rng.gen_range(4..=8), rng.gen_range(4..=8));
        let classes = rng.gen_range(2..=5);
        let image = Image::from_unit(h, w, (0..h * w * 3).map(|_| rng.gen()).collect())?;
        let scores = FeatureMap::new(h, w, classes, (0..h * w * classes).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
        let params = GaussianKernelParams {
            w1: rng.gen_range(0.1..2.0),
            w2: rng.gen_range(0.1..2.0),
            theta_alpha: rng.gen_range(0.5..4.0),
            theta_beta: rng.gen_range(0.05..0.5),
            theta_gamma: rng.gen_range(0.5..3.0),
        };
        let compat = if k % 2 == 0 {
            LabelCompatibility::identity(classes)
        } else {
            LabelCompatibility::from_matrix(classes, (0..classes * classes).map(|_| rng.gen_range(-0.5..1.0)).collect())?
        };
        let step = densecrf::mean_field_step(&scores, &image, &params, &compat, Neighborhood::AllPairs)?;
        let reference = mean_field_reference(scores.data(), classes, &image, &params, &compat, Neighborhood::AllPairs);
        worst_step = worst_step.max(max_abs_diff(step.data(), &reference));

        let probs = densecrf::run_inference(&scores, &image, &params, &LabelCompatibility::identity(classes), 2, Neighborhood::AllPairs)?;
        let id = LabelCompatibility::identity(classes);
        let once = mean_field_reference(scores.data(), classes, &image, &params, &id, Neighborhood::AllPairs);
        let twice = mean_field_reference(&once, classes, &image, &params, &id, Neighborhood::AllPairs);
        let expect: Vec<f64> = twice
            .chunks(classes)
            .flat_map(|cell| {
                let s: f64 = cell.iter().map(|v| v.exp()).sum();
                cell.iter().map(move |v| v.exp() / s).collect::<Vec<_>>()
            })
            .collect();
        worst_run = worst_run.max(max_abs_diff(probs.data(), &expect));
    }
    Ok(vec![
        CheckRow::upper("mean-field step vs triple loop", seeds, worst_step, MEAN_FIELD_TOL),
        CheckRow::upper("2-step inference vs triple loop", seeds, worst_run, MEAN_FIELD_TOL),
    ])
}

/// Tiny random network and 8×8 image for end-to-end gradient checks.
pub fn tiny_net_case(seed: u64) -> Result<(Net<f64>, Prepared)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetConfig {
        layers: vec![ConvSpec { channels: 4, kernel: 3, stride: 2 }, ConvSpec { channels: 4, kernel: 3, stride: 1 }],
        num_classes: 3,
        pos_dim: 4,
        embed_dim: 3,
        joint_radius: 2,
        ..NetConfig::default()
    };
    let mut net = Net::<f64>::init(config, seed)?;
    net.ecrf.compat_weight.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    net.ecrf.compat_bias = rng.gen_range(-0.5..0.5);
    net.ecrf.embed_bias.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.5));
    for l in &mut net.layers {
        l.bias.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.2));
    }
    let (h, w) = (8, 8);
    let image = Image::from_unit(h, w, (0..h * w * 3).map(|_| rng.gen()).collect())?;
    let labels = LabelMap::new(h, w, 3, (0..h * w).map(|_| rng.gen_range(0..3)).collect())?;
    let sp = SuperpixelMap::new(h, w, (0..h * w).map(|i| (((i / w) / 4) * 2 + (i % w) / 4) as u32).collect(), 4)?;
    let sample = Prepared::new(&net.config, &image, &labels, Some(&sp))?;
    Ok((net, sample))
}

/// Worst per-tensor relative error between analytic gradients computed in `T`
/// and `f64` central differences at the same parameter values, and the number
/// of entries skipped because a perturbation flipped a ReLU or kernel clamp.
pub fn net_gradcheck<T: Real>(net: &Net<f64>, sample: &Prepared, mode: Mode, eps: f64) -> Result<(f64, usize)> {
    let net_t = net.cast::<T>();
    let base = net_t.cast::<f64>();
    let (_, grads) = loss_and_grads(&net_t, sample, mode)?;
    let pattern = |n: &Net<f64>| -> Result<(f64, Vec<bool>)> {
        let trace = forward(n, sample, mode)?;
        let (loss, _) = loss_and_logit_grad(&trace, sample)?;
        Ok((loss, trace.pattern()))
    };
    let (_, base_pattern) = pattern(&base)?;
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for (slot, analytic) in grads.tensors.iter().enumerate() {
        let mut keep_a = Vec::new();
        let mut keep_n = Vec::new();
        let len = analytic.len();
        for e in 0..len {
            let eval = |delta: f64| {
                let mut probe = base.clone();
                probe.tensors_mut()[slot].1[e] += delta;
                pattern(&probe)
            };
            let (up, up_p) = eval(eps)?;
            let (dn, dn_p) = eval(-eps)?;
            if up_p != base_pattern || dn_p != base_pattern {
                skipped += 1;
                continue;
            }
            keep_a.push(analytic[e].to_f64_lossless());
            keep_n.push((up - dn) / (2.0 * eps));
        }
        worst = worst.max(rel_err(&keep_a, &keep_n));
    }
    Ok((worst, skipped))
}

/// Half the images are white noise, half smooth random color fields.
fn random_slic_image(size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    if rng.gen_bool(0.5) {
        return Image::from_unit(size, size, (0..size * size * 3).map(|_| rng.gen()).collect());
    }
    let bumps: Vec<([f64; 2], f64, [f64; 3])> = (0..6)
        .map(|_| {
            let c = [rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)];
            (c, rng.gen_range(4.0..size as f64 / 3.0), [rng.gen(), rng.gen(), rng.gen()])
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let mut px = [0.0f64; 3];
            let mut total = 1e-9;
            for (ctr, sigma, color) in &bumps {
                let d2 = (r as f64 - ctr[0]).powi(2) + (c as f64 - ctr[1]).powi(2);
                let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
                total += wgt;
                (0..3).for_each(|k| px[k] += wgt * color[k]);
            }
            data.extend(px.iter().map(|v| (v / total).clamp(0.0, 1.0)));
        }
    }
    Image::from_unit(size, size, data)
}

/// Largest `max(h/w, w/h)` over the bounding boxes of all blocks.
pub fn worst_block_aspect(map: &SuperpixelMap) -> f64 {
    let w = map.width();
    map.members()
        .iter()
        .filter(|m| !m.is_empty())
        .map(|cells| {
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            for &i in cells {
                (r0, r1, c0, c1) = (r0.min(i / w), r1.max(i / w), c0.min(i % w), c1.max(i % w));
            }
            let (bh, bw) = ((r1 - r0 + 1) as f64, (c1 - c0 + 1) as f64);
            (bh / bw).max(bw / bh)
        })
        .fold(1.0, f64::max)
}

/// SLIC partition, connectivity and determinism on random images, plus the
/// block shapes on a uniform image.
pub fn slic_suite(images: usize, seed: u64) -> Result<Vec<CheckRow>> {
    const SIZE: usize = 96;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut partition, mut connected, mut deterministic, mut bounded) = (0, 0, 0, 0);
    for _ in 0..images {
        let image = random_slic_image(SIZE, &mut rng)?;
        let params = SlicParams {
            target_blocks: rng.gen_range(4..=400),
            compactness: rng.gen_range(1.0..40.0),
            ..SlicParams::default()
        };
        let map = slic_segment(&image, &params)?;
        let mut used = vec![false; map.block_count()];
        map.block_ids().iter().for_each(|&b| used[b as usize] = true);
        partition += usize::from(map.block_ids().len() == SIZE * SIZE && used.iter().all(|&u| u));
        connected += usize::from(map.is_four_connected());
        deterministic += usize::from(slic_segment(&image, &params)? == map);
        bounded += usize::from((1..=2 * params.target_blocks).contains(&map.block_count()));
    }
    let count_row = |name: &str, held: usize| {
        let mut row = CheckRow::upper(name, images, (images - held) as f64, 0.0);
        row.note = format!("{held}/{images} images");
        row
    };
    let uniform = Image::from_unit(SIZE, SIZE, vec![0.5; SIZE * SIZE * 3])?;
    let ks = [4usize, 9, 16, 25, 36, 64, 100, 144];
    let mut worst = 1.0f64;
    for &k in &ks {
        worst = worst.max(worst_block_aspect(&slic_segment(&uniform, &SlicParams::with_blocks(k))?));
    }
    Ok(vec![
        count_row("slic full partition, compact ids", partition),
        count_row("slic blocks 4-connected", connected),
        count_row("slic deterministic", deterministic),
        count_row("slic block count in [1, 2K]", bounded),
        CheckRow::upper("slic uniform-image block aspect", ks.len(), worst, 2.0)
            .with_note(format!("K in {ks:?}")),
    ])
}

/// End-to-end network gradients in every mode, f64 and f32 paths.
pub fn tiny_net_suite(seed: u64, nets: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for mode in [Mode::Baseline, Mode::Joint, Mode::Ecrf] {
        let (mut w64, mut w32, mut skipped) = (0.0f64, 0.0f64, 0);
        for k in 0..nets {
            let (net, sample) = tiny_net_case(seed.wrapping_add(k as u64))?;
            let (e64, s64) = net_gradcheck::<f64>(&net, &sample, mode, 1e-6)?;
            let (e32, s32) = net_gradcheck::<f32>(&net, &sample, mode, 1e-6)?;
            w64 = w64.max(e64);
            w32 = w32.max(e32);
            skipped += s64 + s32;
        }
        let note = format!("{skipped} kink-crossing entries skipped");
        rows.push(CheckRow::upper(&format!("tiny net {mode} f64 grads vs FD"), nets, w64, NET_GRAD_TOL_F64).with_note(note.clone()));
        rows.push(CheckRow::upper(&format!("tiny net {mode} f32 grads vs FD"), nets, w32, NET_GRAD_TOL_F32).with_note(note));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for row in gradtheory_suite(10, 1, 1e-6).unwrap() {
            assert!(row.passed, "{row}");
        }
        for row in ecrf_layer_suite(6, 1, 1e-6).unwrap() {
            assert!(row.passed, "{row}");
        }
        for row in mean_field_suite(4, 1).unwrap() {
            assert!(row.passed, "{row}");
        }
        for row in angle_suite(10, 1).unwrap() {
            assert!(row.passed, "{row}");
        }
    }

    #[test]
    fn slic_suite_small() {
        for row in slic_suite(6, 1).unwrap() {
            assert!(row.passed, "{row}");
        }
    }

    #[test]
    fn tiny_net_gradients() {
        for row in tiny_net_suite(0, 3).unwrap() {
            assert!(row.passed, "{row}");
        }
    }
}
