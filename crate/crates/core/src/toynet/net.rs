//! Small convolutional segmentation network with analytic backward pass.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::densecrf::{gaussian_kernel, GaussianKernelParams, Neighborhood, ProbField};
use crate::ecrf::{ecrf_backward, ecrf_forward, EcrfActivation, EcrfParams, DEFAULT_EMBED_DIM, DEFAULT_POS_DIM};
use crate::error::{Error, Result};
use crate::gradtheory::ClassifierWeights;
use crate::gridcore::{downsample_labels, FeatureMap, Image, LabelMap};
use crate::real::Real;
use crate::superpixel::SuperpixelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Joint,
    Ecrf,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "joint" => Ok(Mode::Joint),
            "ecrf" => Ok(Mode::Ecrf),
            other => Err(Error::Parameter(format!("unknown mode '{other}' (baseline|joint|ecrf)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Joint => "joint",
            Mode::Ecrf => "ecrf",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture plus the E-CRF switches.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub layers: Vec<ConvSpec>,
    pub num_classes: usize,
    pub pos_dim: usize,
    pub embed_dim: usize,
    /// Multiplier on the fan-in std of the kernel embedding at init.
    pub embed_gain: f64,
    pub use_pairwise: bool,
    pub use_superpixel: bool,
    pub neighborhood: Neighborhood,
    /// Window radius of the probability-space CRF in joint mode.
    pub joint_radius: usize,
    pub joint_kernel: GaussianKernelParams,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                ConvSpec { channels: 16, kernel: 3, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 1 },
            ],
            num_classes: 6,
            pos_dim: DEFAULT_POS_DIM,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_gain: 1.0,
            use_pairwise: true,
            use_superpixel: true,
            neighborhood: Neighborhood::AllPairs,
            joint_radius: 4,
            joint_kernel: GaussianKernelParams::default(),
        }
    }
}

impl NetConfig {
    pub fn feature_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(3, |l| l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parameter("network needs at least one conv layer".into()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.kernel % 2 == 0 || l.stride == 0) {
            return Err(Error::Parameter("conv layers need positive channels, odd kernels and positive strides".into()));
        }
        if !(self.embed_gain >= 0.0 && self.embed_gain.is_finite()) {
            return Err(Error::Parameter(format!("embed_gain must be finite and >= 0, got {}", self.embed_gain)));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("need >= 2 classes".into()));
        }
        self.joint_kernel.validate()
    }

    /// Output grid of the feature extractor for a `size × size` input.
    pub fn check_image(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.feature_stride();
        if height % s != 0 || width % s != 0 {
            return Err(Error::Dimension(format!("image {height}x{width} not divisible by feature stride {s}")));
        }
        Ok((height / s, width / s))
    }
}

/// Weights stored `(ky, kx, in, out)` so the output channel is innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    fn out_size(&self, n: usize) -> usize {
        let p = self.kernel / 2;
        (n + 2 * p - self.kernel) / self.stride + 1
    }

    fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (h, w, ci, co, k) = (x.height(), x.width(), self.in_channels, self.out_channels, self.kernel);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let p = k / 2;
        let mut out = vec![T::zero(); oh * ow * co];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                dst.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let Some(iy) = (oy * self.stride + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = (ox * self.stride + kx).checked_sub(p).filter(|&v| v < w) else { continue };
                        let xin = x.cell(iy * w + ix);
                        let base = (ky * k + kx) * ci * co;
                        for (c, &xv) in xin.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wr = &self.weight[base + c * co..base + (c + 1) * co];
                            for (o, &wv) in dst.iter_mut().zip(wr) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        FeatureMap::from_raw(oh, ow, co, out)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    fn backward(&self, x: &FeatureMap<T>, g: &FeatureMap<T>, dw: &mut [T], db: &mut [T], want_input: bool) -> Option<FeatureMap<T>> {
        let (h, w, ci, co, k) = (x.height(), x.width(), self.in_channels, self.out_channels, self.kernel);
        let (oh, ow) = (g.height(), g.width());
        let p = k / 2;
        let mut dx = want_input.then(|| vec![T::zero(); h * w * ci]);
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g.cell(oy * ow + ox);
                if go.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                for (b, &v) in db.iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..k {
                    let Some(iy) = (oy * self.stride + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = (ox * self.stride + kx).checked_sub(p).filter(|&v| v < w) else { continue };
                        let cell = iy * w + ix;
                        let xin = x.cell(cell);
                        let base = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let xv = xin[c];
                            let wr = &self.weight[base + c * co..base + (c + 1) * co];
                            if xv != T::zero() {
                                let dwr = &mut dw[base + c * co..base + (c + 1) * co];
                                for (d, &gv) in dwr.iter_mut().zip(go) {
                                    *d += xv * gv;
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let mut acc = T::zero();
                                for (&wv, &gv) in wr.iter().zip(go) {
                                    acc += wv * gv;
                                }
                                dx[cell * ci + c] += acc;
                            }
                        }
                    }
                }
            }
        }
        dx.map(|d| FeatureMap::from_raw(h, w, ci, d))
    }
}

/// Feature extractor, optional E-CRF layer and linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T = f32> {
    pub config: NetConfig,
    pub layers: Vec<ConvLayer<T>>,
    pub ecrf: EcrfParams<T>,
    pub classifier: ClassifierWeights<T>,
}

/// Flat gradient storage aligned with [`Net::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads<T = f32> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> NetGrads<T> {
    pub fn zeros_like(net: &Net<T>) -> Self {
        Self { tensors: net.tensors().iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

fn kaiming<T: Real, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

impl<T: Real> Net<T> {
    /// Conv, E-CRF and classifier draw from separate streams of `seed`, so
    /// changing one part's shape leaves the others' initial values alone.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let rng = &mut stream(0);
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut in_ch = 3;
        for spec in &config.layers {
            let fan_in = spec.kernel * spec.kernel * in_ch;
            layers.push(ConvLayer {
                in_channels: in_ch,
                out_channels: spec.channels,
                kernel: spec.kernel,
                stride: spec.stride,
                weight: kaiming(fan_in * spec.channels, fan_in, rng),
                bias: vec![T::zero(); spec.channels],
            });
            in_ch = spec.channels;
        }
        let mut ecrf = EcrfParams::init(in_ch, config.pos_dim, config.embed_dim, &mut stream(1))?;
        let gain = T::lit(config.embed_gain);
        ecrf.embed_weight.iter_mut().for_each(|w| *w *= gain);
        ecrf.use_pairwise = config.use_pairwise;
        ecrf.use_superpixel = config.use_superpixel;
        ecrf.neighborhood = config.neighborhood;
        let cls = kaiming(in_ch * config.num_classes, in_ch, &mut stream(2));
        let classifier = ClassifierWeights::new(in_ch, config.num_classes, cls)?;
        Ok(Self { config, layers, ecrf, classifier })
    }

    /// `(name, dims, values)` for every learnable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![l.kernel, l.kernel, l.in_channels, l.out_channels], &l.weight[..]));
            out.push((format!("conv{i}.bias"), vec![l.out_channels], &l.bias[..]));
        }
        let e = &self.ecrf;
        out.push(("ecrf.embed_weight".into(), vec![e.embed_dim, e.token_dim()], &e.embed_weight[..]));
        out.push(("ecrf.embed_bias".into(), vec![e.embed_dim], &e.embed_bias[..]));
        out.push(("ecrf.compat_weight".into(), vec![2 * e.channels], &e.compat_weight[..]));
        out.push(("ecrf.compat_bias".into(), vec![1], std::slice::from_ref(&e.compat_bias)));
        out.push((
            "classifier.weight".into(),
            vec![self.classifier.features(), self.classifier.classes()],
            self.classifier.data(),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("conv{i}.weight"), &mut l.weight[..]));
            out.push((format!("conv{i}.bias"), &mut l.bias[..]));
        }
        for (name, t) in self.ecrf.tensors_mut() {
            out.push((name.to_string(), t));
        }
        out.push(("classifier.weight".into(), self.classifier.data_mut()));
        out
    }

    pub fn cast<U: Real>(&self) -> Net<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossless())).collect::<Vec<U>>();
        Net {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    weight: c(&l.weight),
                    bias: c(&l.bias),
                })
                .collect(),
            ecrf: self.ecrf.cast(),
            classifier: self.classifier.cast(),
        }
    }

    /// CRC32 over the bit patterns of every parameter.
    pub fn param_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, _, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(&v.to_f64_lossless().to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Per-image inputs at both resolutions, computed once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Image,
    pub labels: LabelMap,
    pub cell_image: Image,
    pub cell_labels: LabelMap,
    pub cell_sp: SuperpixelMap,
    /// Sparse Gaussian weights for joint mode, `(neighbor, weight)` per cell.
    pub joint_weights: Vec<Vec<(u32, f64)>>,
}

impl Prepared {
    /// `sp` is the full-resolution superpixel map; without one every cell is its
    /// own block, which makes the pooled term equal to the cell itself.
    pub fn new(config: &NetConfig, image: &Image, labels: &LabelMap, sp: Option<&SuperpixelMap>) -> Result<Self> {
        let (h, w) = config.check_image(image.height(), image.width())?;
        if !labels.same_shape(&LabelMap::uniform(image.height(), image.width(), labels.num_classes(), 0)?) {
            return Err(Error::Dimension("label map and image differ in size".into()));
        }
        if labels.num_classes() != config.num_classes {
            return Err(Error::Dimension(format!(
                "labels have {} classes, network {}",
                labels.num_classes(),
                config.num_classes
            )));
        }
        let stride = config.feature_stride();
        let cell_image = image.area_downsample(stride)?;
        let cell_labels = downsample_labels(labels, stride)?;
        let cell_sp = match sp {
            Some(map) => {
                if map.height() != image.height() || map.width() != image.width() {
                    return Err(Error::Dimension("superpixel map and image differ in size".into()));
                }
                map.resample_nearest(h, w)?
            }
            None => SuperpixelMap::new(h, w, (0..(h * w) as u32).collect(), h * w)?,
        };
        let nb = Neighborhood::Window(config.joint_radius);
        let joint_weights = (0..h * w)
            .map(|i| {
                nb.neighbors(h, w, i)
                    .into_iter()
                    .map(|j| {
                        let pi = [(i / w) as f64, (i % w) as f64];
                        let pj = [(j / w) as f64, (j % w) as f64];
                        let k = gaussian_kernel(pi, pj, cell_image.color(i), cell_image.color(j), &config.joint_kernel)
                            .expect("validated kernel params");
                        (j as u32, k)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { image: image.clone(), labels: labels.clone(), cell_image, cell_labels, cell_sp, joint_weights })
    }
}

/// Everything one forward pass produced, kept for the backward pass.
pub struct Trace<T = f32> {
    mode: Mode,
    /// Input to each conv layer, then the final features.
    acts: Vec<FeatureMap<T>>,
    ecrf: Option<EcrfActivation<T>>,
    refined: FeatureMap<T>,
    logits: FeatureMap<T>,
    probs: ProbField<T>,
    /// Joint mode: the refined distribution `P̂`.
    joint: Option<ProbField<T>>,
}

impl<T: Real> Trace<T> {
    pub fn features(&self) -> &FeatureMap<T> {
        self.acts.last().expect("at least the input")
    }

    pub fn refined(&self) -> &FeatureMap<T> {
        &self.refined
    }

    pub fn logits(&self) -> &FeatureMap<T> {
        &self.logits
    }

    /// Output distribution: `P̂` in joint mode, softmax of the logits otherwise.
    pub fn probs(&self) -> &ProbField<T> {
        self.joint.as_ref().unwrap_or(&self.probs)
    }

    pub fn ecrf_activation(&self) -> Option<&EcrfActivation<T>> {
        self.ecrf.as_ref()
    }

    /// ReLU on/off pattern of every conv layer plus the active E-CRF pairs.
    pub fn pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.acts[1..].iter().flat_map(|a| a.data().iter().map(|&v| v > T::zero())).collect();
        if let Some(act) = &self.ecrf {
            out.extend(act.active_pairs());
        }
        out
    }
}

pub fn forward<T: Real>(net: &Net<T>, sample: &Prepared, mode: Mode) -> Result<Trace<T>> {
    let x = FeatureMap::new(
        sample.image.height(),
        sample.image.width(),
        3,
        sample.image.data().iter().map(|&v| T::lit(v)).collect(),
    )?;
    let mut acts = vec![x];
    for layer in &net.layers {
        let mut y = layer.forward(acts.last().expect("nonempty"));
        y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        acts.push(y);
    }
    let feats = acts.last().expect("nonempty");
    let (h, w) = (feats.height(), feats.width());
    if (h, w) != (sample.cell_image.height(), sample.cell_image.width()) {
        return Err(Error::Dimension(format!(
            "features {h}x{w} vs prepared cells {}x{}",
            sample.cell_image.height(),
            sample.cell_image.width()
        )));
    }
    let (refined, ecrf) = if mode == Mode::Ecrf {
        let (out, act) = ecrf_forward(feats, &sample.cell_image, &sample.cell_sp, &net.ecrf)?;
        (out, Some(act))
    } else {
        (feats.clone(), None)
    };
    let classes = net.classifier.classes();
    let mut logits = Vec::with_capacity(h * w * classes);
    for i in 0..h * w {
        logits.extend(net.classifier.logits(refined.cell(i)));
    }
    let logits = FeatureMap::new(h, w, classes, logits)
        .map_err(|_| Error::Numeric { what: "logits", cell: 0 })?;
    let probs = ProbField::softmax(&logits);
    let joint = if mode == Mode::Joint {
        let mut out = Vec::with_capacity(h * w * classes);
        for (i, nbrs) in sample.joint_weights.iter().enumerate() {
            let mut acc = probs.cell(i).to_vec();
            let mut z = T::one();
            for &(j, k) in nbrs {
                let k = T::lit(k);
                z += k;
                for (a, &pj) in acc.iter_mut().zip(probs.cell(j as usize)) {
                    *a += k * pj;
                }
            }
            out.extend(acc.into_iter().map(|a| a / z));
        }
        Some(ProbField::new(h, w, classes, out)?)
    } else {
        None
    };
    Ok(Trace { mode, acts, ecrf, refined, logits, probs, joint })
}

/// Smallest probability fed to the log in the loss.
const PROB_FLOOR: f64 = 1e-12;

/// Mean cross entropy over cells against `sample.cell_labels`, and `∂L/∂logits`.
pub fn loss_and_logit_grad<T: Real>(trace: &Trace<T>, sample: &Prepared) -> Result<(T, FeatureMap<T>)> {
    let logits = &trace.logits;
    let labels = &sample.cell_labels;
    let (h, w, c) = (logits.height(), logits.width(), logits.channels());
    if labels.height() != h || labels.width() != w {
        return Err(Error::Dimension("cell labels do not match logits".into()));
    }
    let n = T::lit((h * w) as f64);
    let floor = T::lit(PROB_FLOOR);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); h * w * c];
    match &trace.joint {
        None => {
            for i in 0..h * w {
                let y = labels.labels()[i] as usize;
                let p = trace.probs.cell(i);
                loss -= p[y].max(floor).ln();
                for k in 0..c {
                    grad[i * c + k] = (p[k] - if k == y { T::one() } else { T::zero() }) / n;
                }
            }
        }
        Some(joint) => {
            // ∂L/∂P̂_i only has the label entry; spread it back over every P_j.
            let mut dp = vec![T::zero(); h * w * c];
            for i in 0..h * w {
                let y = labels.labels()[i] as usize;
                let ph = joint.cell(i)[y].max(floor);
                loss -= ph.ln();
                let nbrs = &sample.joint_weights[i];
                let z = T::one() + nbrs.iter().map(|&(_, k)| T::lit(k)).sum::<T>();
                let gi = -T::one() / (ph * n * z);
                dp[i * c + y] += gi;
                for &(j, k) in nbrs {
                    dp[j as usize * c + y] += gi * T::lit(k);
                }
            }
            for i in 0..h * w {
                let p = trace.probs.cell(i);
                let d = &dp[i * c..(i + 1) * c];
                let inner: T = p.iter().zip(d).map(|(&a, &b)| a * b).sum();
                for k in 0..c {
                    grad[i * c + k] = p[k] * (d[k] - inner);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric { what: "training loss", cell: 0 });
    }
    Ok((loss / n, FeatureMap::from_raw(h, w, c, grad)))
}

/// Parameter gradients given `∂L/∂logits`.
pub fn backward<T: Real>(net: &Net<T>, trace: &Trace<T>, dlogits: &FeatureMap<T>) -> Result<NetGrads<T>> {
    let mut grads = NetGrads::zeros_like(net);
    let nt = grads.tensors.len();
    let refined = &trace.refined;
    let (cells, feat, classes) = (refined.cells(), refined.channels(), net.classifier.classes());
    if dlogits.cells() != cells || dlogits.channels() != classes {
        return Err(Error::Dimension("logit gradient shape differs from forward pass".into()));
    }

    let wdata = net.classifier.data();
    let mut drefined = vec![T::zero(); cells * feat];
    {
        let dw = &mut grads.tensors[nt - 1];
        for i in 0..cells {
            let g = dlogits.cell(i);
            let f = refined.cell(i);
            for k in 0..feat {
                let row = &wdata[k * classes..(k + 1) * classes];
                let drow = &mut dw[k * classes..(k + 1) * classes];
                let mut acc = T::zero();
                for m in 0..classes {
                    drow[m] += f[k] * g[m];
                    acc += row[m] * g[m];
                }
                drefined[i * feat + k] = acc;
            }
        }
    }
    let drefined = FeatureMap::from_raw(refined.height(), refined.width(), feat, drefined);

    let mut g = if trace.mode == Mode::Ecrf {
        let (dfeat, eg) = ecrf_backward(trace.ecrf.as_ref(), &drefined)?;
        let base = 2 * net.layers.len();
        for (slot, (_, t)) in eg.tensors().iter().enumerate() {
            grads.tensors[base + slot].copy_from_slice(t);
        }
        dfeat
    } else {
        drefined
    };

    for (li, layer) in net.layers.iter().enumerate().rev() {
        let out = &trace.acts[li + 1];
        for (gv, &a) in g.data_mut().iter_mut().zip(out.data()) {
            if a <= T::zero() {
                *gv = T::zero();
            }
        }
        let (dw, rest) = grads.tensors[2 * li..].split_at_mut(1);
        let next = layer.backward(&trace.acts[li], &g, &mut dw[0], &mut rest[0], li > 0);
        match next {
            Some(n) => g = n,
            None => break,
        }
    }
    Ok(grads)
}

/// Loss and full gradient for one prepared sample.
pub fn loss_and_grads<T: Real>(net: &Net<T>, sample: &Prepared, mode: Mode) -> Result<(T, NetGrads<T>)> {
    let trace = forward(net, sample, mode)?;
    let (loss, dlogits) = loss_and_logit_grad(&trace, sample)?;
    Ok((loss, backward(net, &trace, &dlogits)?))
}

/// Cell-resolution class scores in `f64`: refined probabilities in joint mode,
/// logits otherwise.
pub fn cell_scores<T: Real>(trace: &Trace<T>) -> FeatureMap<f64> {
    let src: &[T] = match &trace.joint {
        Some(p) => p.data(),
        None => trace.logits.data(),
    };
    let l = &trace.logits;
    FeatureMap::from_raw(l.height(), l.width(), l.channels(), src.iter().map(|v| v.to_f64_lossless()).collect())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(field: &FeatureMap<f64>, height: usize, width: usize) -> FeatureMap<f64> {
    let (h, w, c) = (field.height(), field.width(), field.channels());
    let coord = |o: usize, from: usize, to: usize| {
        let s = ((o as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(from - 1), s - lo as f64)
    };
    let mut out = vec![0.0; height * width * c];
    for y in 0..height {
        let (y0, y1, fy) = coord(y, h, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, w, width);
            let (a, b, cc, d) = (field.cell(y0 * w + x0), field.cell(y0 * w + x1), field.cell(y1 * w + x0), field.cell(y1 * w + x1));
            let dst = &mut out[(y * width + x) * c..(y * width + x + 1) * c];
            for k in 0..c {
                dst[k] = (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * cc[k] + fx * d[k]);
            }
        }
    }
    FeatureMap::from_raw(height, width, c, out)
}

/// Per-pixel argmax, ties to the smaller class id.
pub fn argmax_labels(scores: &FeatureMap<f64>, classes: usize) -> Result<LabelMap> {
    let labels = (0..scores.cells())
        .map(|i| {
            let cell = scores.cell(i);
            let mut best = 0;
            for k in 1..cell.len() {
                if cell[k] > cell[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(scores.height(), scores.width(), classes, labels)
}

/// Full-resolution prediction.
pub fn predict<T: Real>(net: &Net<T>, sample: &Prepared, mode: Mode) -> Result<LabelMap> {
    let trace = forward(net, sample, mode)?;
    let up = upsample_bilinear(&cell_scores(&trace), sample.image.height(), sample.image.width());
    argmax_labels(&up, net.classifier.classes())
}
