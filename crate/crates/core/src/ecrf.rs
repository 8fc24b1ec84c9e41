//! Feature-space CRF layer.
//!
//! For every cell `i` of a feature map `F`:
//!
//! ```text
//! F*_i = (F_i + Σ_{j≠i} ψ(i,j) F_j + F^S_i) / Z_i
//! ψ(i,j) = sigmoid(u·F_i + v·F_j + b) · max(0, e_i · e_j)
//! e_i    = A [I_i, p_i] + c
//! Z_i    = 1 + Σ_j ψ(i,j) + [superpixel term enabled]
//! ```
//!
//! `I_i` is the cell color, `p_i` its sinusoidal position embedding and
//! `F^S_i` the mean feature of the superpixel block containing `i`. Either
//! the pairwise or the superpixel term can be switched off; both off is the
//! identity.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::densecrf::Neighborhood;
use crate::error::{Error, Result};
use crate::gridcore::{position_embedding, FeatureMap, Image};
use crate::real::{dot, sigmoid, Real};
use crate::superpixel::SuperpixelMap;

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_POS_DIM: usize = 16;

/// Learnable parameters of the layer plus its switches.
#[derive(Clone, Debug, PartialEq)]
pub struct EcrfParams<T = f32> {
    pub channels: usize,
    pub pos_dim: usize,
    pub embed_dim: usize,
    /// `embed_dim × (3 + pos_dim)`, row-major.
    pub embed_weight: Vec<T>,
    pub embed_bias: Vec<T>,
    /// First `channels` entries act on `F_i`, the rest on `F_j`.
    pub compat_weight: Vec<T>,
    pub compat_bias: T,
    pub use_pairwise: bool,
    pub use_superpixel: bool,
    pub neighborhood: Neighborhood,
}

impl<T: Real> EcrfParams<T> {
    /// Kaiming fan-in embedding, zero compatibility map (μ starts at 0.5).
    pub fn init<R: Rng>(channels: usize, pos_dim: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || embed_dim == 0 {
            return Err(Error::Parameter("channels and embed_dim must be >= 1".into()));
        }
        if pos_dim < 2 || pos_dim % 2 != 0 {
            return Err(Error::Parameter(format!("pos_dim must be even and >= 2, got {pos_dim}")));
        }
        let fan_in = 3 + pos_dim;
        let std = (2.0 / fan_in as f64).sqrt();
        let embed_weight = (0..embed_dim * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Ok(Self {
            channels,
            pos_dim,
            embed_dim,
            embed_weight,
            embed_bias: vec![T::zero(); embed_dim],
            compat_weight: vec![T::zero(); 2 * channels],
            compat_bias: T::zero(),
            use_pairwise: true,
            use_superpixel: true,
            neighborhood: Neighborhood::AllPairs,
        })
    }

    pub fn token_dim(&self) -> usize {
        3 + self.pos_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::Parameter("embed_dim and channels must be >= 1".into()));
        }
        if self.embed_weight.len() != self.embed_dim * self.token_dim()
            || self.embed_bias.len() != self.embed_dim
            || self.compat_weight.len() != 2 * self.channels
        {
            return Err(Error::Dimension("E-CRF parameter shapes are inconsistent".into()));
        }
        let finite = self
            .embed_weight
            .iter()
            .chain(&self.embed_bias)
            .chain(&self.compat_weight)
            .all(|v| v.is_finite())
            && self.compat_bias.is_finite();
        if !finite {
            return Err(Error::Parameter("E-CRF parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EcrfParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossless())).collect();
        EcrfParams {
            channels: self.channels,
            pos_dim: self.pos_dim,
            embed_dim: self.embed_dim,
            embed_weight: c(&self.embed_weight),
            embed_bias: c(&self.embed_bias),
            compat_weight: c(&self.compat_weight),
            compat_bias: U::lit(self.compat_bias.to_f64_lossless()),
            use_pairwise: self.use_pairwise,
            use_superpixel: self.use_superpixel,
            neighborhood: self.neighborhood,
        }
    }

    /// Flat views over all learnable tensors, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &[T]); 4] {
        [
            ("ecrf.embed_weight", &self.embed_weight),
            ("ecrf.embed_bias", &self.embed_bias),
            ("ecrf.compat_weight", &self.compat_weight),
            ("ecrf.compat_bias", std::slice::from_ref(&self.compat_bias)),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [T]); 4] {
        [
            ("ecrf.embed_weight", &mut self.embed_weight),
            ("ecrf.embed_bias", &mut self.embed_bias),
            ("ecrf.compat_weight", &mut self.compat_weight),
            ("ecrf.compat_bias", std::slice::from_mut(&mut self.compat_bias)),
        ]
    }
}

/// Gradients with respect to [`EcrfParams`]' learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct EcrfGrads<T = f32> {
    pub embed_weight: Vec<T>,
    pub embed_bias: Vec<T>,
    pub compat_weight: Vec<T>,
    pub compat_bias: T,
}

impl<T: Real> EcrfGrads<T> {
    pub fn zeros_like(params: &EcrfParams<T>) -> Self {
        Self {
            embed_weight: vec![T::zero(); params.embed_weight.len()],
            embed_bias: vec![T::zero(); params.embed_bias.len()],
            compat_weight: vec![T::zero(); params.compat_weight.len()],
            compat_bias: T::zero(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.embed_weight.iter_mut().zip(&other.embed_weight) {
            *a += *b;
        }
        for (a, b) in self.embed_bias.iter_mut().zip(&other.embed_bias) {
            *a += *b;
        }
        for (a, b) in self.compat_weight.iter_mut().zip(&other.compat_weight) {
            *a += *b;
        }
        self.compat_bias += other.compat_bias;
    }

    pub fn tensors(&self) -> [(&'static str, &[T]); 4] {
        [
            ("ecrf.embed_weight", &self.embed_weight),
            ("ecrf.embed_bias", &self.embed_bias),
            ("ecrf.compat_weight", &self.compat_weight),
            ("ecrf.compat_bias", std::slice::from_ref(&self.compat_bias)),
        ]
    }
}

/// Symmetric sparse pair structure: row `i` lists its neighbors, and
/// `mirror[s]` is the slot of the reversed pair.
#[derive(Clone, Debug)]
struct PairLayout {
    offsets: Vec<usize>,
    index: Vec<u32>,
    mirror: Vec<usize>,
}

impl PairLayout {
    fn build(height: usize, width: usize, neighborhood: Neighborhood) -> Self {
        let n = height * width;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut index = Vec::new();
        offsets.push(0);
        for i in 0..n {
            index.extend(neighborhood.neighbors(height, width, i).into_iter().map(|j| j as u32));
            offsets.push(index.len());
        }
        let mut mirror = vec![0; index.len()];
        for i in 0..n {
            for s in offsets[i]..offsets[i + 1] {
                let j = index[s] as usize;
                let row = &index[offsets[j]..offsets[j + 1]];
                let pos = row.binary_search(&(i as u32)).expect("neighborhood is symmetric");
                mirror[s] = offsets[j] + pos;
            }
        }
        Self { offsets, index, mirror }
    }

    fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct EcrfActivation<T = f32> {
    params: EcrfParams<T>,
    features: FeatureMap<T>,
    tokens: Vec<T>,
    embeddings: Vec<T>,
    layout: Option<PairLayout>,
    kernel: Vec<T>,
    compat: Vec<T>,
    pairwise_weights: Vec<T>,
    block_of: Vec<u32>,
    block_sizes: Vec<usize>,
    pooled: Option<FeatureMap<T>>,
    normalizers: Vec<T>,
    output: FeatureMap<T>,
}

impl<T: Real> EcrfActivation<T> {
    pub fn output(&self) -> &FeatureMap<T> {
        &self.output
    }

    pub fn normalizers(&self) -> &[T] {
        &self.normalizers
    }

    pub fn pooled(&self) -> Option<&FeatureMap<T>> {
        self.pooled.as_ref()
    }

    /// `ψ(i, j)` for cells in the neighborhood; zero otherwise and for `i == j`.
    pub fn pairwise_weight(&self, i: usize, j: usize) -> T {
        let Some(layout) = &self.layout else { return T::zero() };
        let row = &layout.index[layout.row(i)];
        match row.binary_search(&(j as u32)) {
            Ok(pos) => self.pairwise_weights[layout.offsets[i] + pos],
            Err(_) => T::zero(),
        }
    }

    /// Dense `N × N` copy of the pairwise weights.
    pub fn pairwise_dense(&self) -> Vec<T> {
        let n = self.features.cells();
        let mut out = vec![T::zero(); n * n];
        if let Some(layout) = &self.layout {
            for i in 0..n {
                for s in layout.row(i) {
                    out[i * n + layout.index[s] as usize] = self.pairwise_weights[s];
                }
            }
        }
        out
    }

    /// For every stored pair, whether the kernel dot product was positive.
    pub fn active_pairs(&self) -> Vec<bool> {
        self.kernel.iter().map(|&k| k > T::zero()).collect()
    }

    /// Number of stored pair entries; zero when the pairwise term is off.
    pub fn pair_count(&self) -> usize {
        self.pairwise_weights.len()
    }
}

/// Color-plus-position tokens `[I_i, p_i]` for every cell of `image`.
pub fn cell_tokens<T: Real>(image: &Image, pos_dim: usize) -> Result<Vec<T>> {
    let pos = position_embedding(image.height(), image.width(), pos_dim)?;
    let mut out = Vec::with_capacity(image.pixel_count() * (3 + pos_dim));
    for i in 0..image.pixel_count() {
        out.extend(image.color(i).iter().map(|&v| T::lit(v)));
        out.extend(pos.cell(i).iter().map(|&v| T::lit(v)));
    }
    Ok(out)
}

/// Linear embedding `A x + c` of one token.
pub fn kernel_embed<T: Real>(token: &[T], params: &EcrfParams<T>) -> Result<Vec<T>> {
    let d = params.token_dim();
    if token.len() != d {
        return Err(Error::Parameter(format!("token has {} entries, expected {d}", token.len())));
    }
    Ok(embed_unchecked(token, params))
}

fn embed_unchecked<T: Real>(token: &[T], params: &EcrfParams<T>) -> Vec<T> {
    let d = params.token_dim();
    (0..params.embed_dim)
        .map(|k| dot(&params.embed_weight[k * d..(k + 1) * d], token) + params.embed_bias[k])
        .collect()
}

/// Kernel between two embedded tokens, clamped at zero.
pub fn kernel_value<T: Real>(e_i: &[T], e_j: &[T]) -> Result<T> {
    if e_i.len() != e_j.len() {
        return Err(Error::Parameter("embedding length mismatch".into()));
    }
    Ok(dot(e_i, e_j).max(T::zero()))
}

/// Dense `N × N` kernel matrix (diagonal included) for a feature-resolution image.
pub fn kernel_matrix<T: Real>(image: &Image, params: &EcrfParams<T>) -> Result<Vec<T>> {
    let tokens = cell_tokens::<T>(image, params.pos_dim)?;
    let d = params.token_dim();
    let emb: Vec<Vec<T>> = tokens.chunks(d).map(|t| embed_unchecked(t, params)).collect();
    let n = emb.len();
    let mut out = vec![T::zero(); n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(&emb[i], &emb[j]).max(T::zero());
        }
    });
    Ok(out)
}

/// `μ(i, j) = sigmoid(w · [F_i, F_j] + b)`.
pub fn feature_compat<T: Real>(f_i: &[T], f_j: &[T], params: &EcrfParams<T>) -> Result<T> {
    let c = params.channels;
    if f_i.len() != c || f_j.len() != c {
        return Err(Error::Dimension(format!("features must have {c} channels")));
    }
    let a = dot(&params.compat_weight[..c], f_i) + dot(&params.compat_weight[c..], f_j) + params.compat_bias;
    Ok(sigmoid(a))
}

/// Replaces every cell by the mean feature of its superpixel block.
pub fn superpixel_pool<T: Real>(features: &FeatureMap<T>, map: &SuperpixelMap) -> Result<FeatureMap<T>> {
    let (sizes, sums) = block_sums(features, map)?;
    let c = features.channels();
    let mut out = FeatureMap::zeros(features.height(), features.width(), c);
    for (i, &b) in map.block_ids().iter().enumerate() {
        let n = T::lit(sizes[b as usize] as f64);
        let s = &sums[b as usize * c..(b as usize + 1) * c];
        for (o, &v) in out.cell_mut(i).iter_mut().zip(s) {
            *o = v / n;
        }
    }
    Ok(out)
}

fn block_sums<T: Real>(features: &FeatureMap<T>, map: &SuperpixelMap) -> Result<(Vec<usize>, Vec<T>)> {
    if map.height() != features.height() || map.width() != features.width() {
        return Err(Error::Dimension(format!(
            "superpixel map {}x{} does not match features {}x{}",
            map.height(),
            map.width(),
            features.height(),
            features.width()
        )));
    }
    let c = features.channels();
    let mut sizes = vec![0usize; map.block_count()];
    let mut sums = vec![T::zero(); map.block_count() * c];
    for (i, &b) in map.block_ids().iter().enumerate() {
        sizes[b as usize] += 1;
        for (s, &f) in sums[b as usize * c..(b as usize + 1) * c].iter_mut().zip(features.cell(i)) {
            *s += f;
        }
    }
    Ok((sizes, sums))
}

/// Forward pass. `image` and `sp` must be at feature resolution.
pub fn ecrf_forward<T: Real>(
    features: &FeatureMap<T>,
    image: &Image,
    sp: &SuperpixelMap,
    params: &EcrfParams<T>,
) -> Result<(FeatureMap<T>, EcrfActivation<T>)> {
    params.validate()?;
    let (h, w, c) = (features.height(), features.width(), features.channels());
    if c != params.channels {
        return Err(Error::Dimension(format!("features have {c} channels, layer expects {}", params.channels)));
    }
    if image.height() != h || image.width() != w {
        return Err(Error::Dimension(format!("image {}x{} vs features {h}x{w}", image.height(), image.width())));
    }
    if sp.height() != h || sp.width() != w {
        return Err(Error::Dimension(format!("superpixel map {}x{} vs features {h}x{w}", sp.height(), sp.width())));
    }
    let n = h * w;

    let (tokens, embeddings, layout, kernel, compat, psi) = if params.use_pairwise {
        let d = params.token_dim();
        let tokens = cell_tokens::<T>(image, params.pos_dim)?;
        let embeddings: Vec<T> = tokens.chunks(d).flat_map(|t| embed_unchecked(t, params)).collect();
        let layout = PairLayout::build(h, w, params.neighborhood);
        let u: Vec<T> = (0..n).map(|i| dot(&params.compat_weight[..c], features.cell(i))).collect();
        let v: Vec<T> = (0..n).map(|i| dot(&params.compat_weight[c..], features.cell(i))).collect();
        let pairs = layout.index.len();
        let mut kernel = vec![T::zero(); pairs];
        let mut compat = vec![T::zero(); pairs];
        let mut psi = vec![T::zero(); pairs];
        let dk = params.embed_dim;
        // Split the pair buffers into per-row slices for parallel filling.
        let mut rows: Vec<(usize, &mut [T], &mut [T], &mut [T])> = Vec::with_capacity(n);
        {
            let (mut k_rest, mut m_rest, mut p_rest) = (&mut kernel[..], &mut compat[..], &mut psi[..]);
            for i in 0..n {
                let len = layout.offsets[i + 1] - layout.offsets[i];
                let (k_row, k_tail) = k_rest.split_at_mut(len);
                let (m_row, m_tail) = m_rest.split_at_mut(len);
                let (p_row, p_tail) = p_rest.split_at_mut(len);
                rows.push((i, k_row, m_row, p_row));
                k_rest = k_tail;
                m_rest = m_tail;
                p_rest = p_tail;
            }
        }
        rows.into_par_iter().for_each(|(i, k_row, m_row, p_row)| {
            let e_i = &embeddings[i * dk..(i + 1) * dk];
            for (slot, s) in layout.row(i).enumerate() {
                let j = layout.index[s] as usize;
                let k = dot(e_i, &embeddings[j * dk..(j + 1) * dk]).max(T::zero());
                let mu = sigmoid(u[i] + v[j] + params.compat_bias);
                k_row[slot] = k;
                m_row[slot] = mu;
                p_row[slot] = mu * k;
            }
        });
        (tokens, embeddings, Some(layout), kernel, compat, psi)
    } else {
        (Vec::new(), Vec::new(), None, Vec::new(), Vec::new(), Vec::new())
    };

    let pooled = if params.use_superpixel { Some(superpixel_pool(features, sp)?) } else { None };
    let sp_weight = if params.use_superpixel { T::one() } else { T::zero() };

    let mut normalizers = vec![T::one(); n];
    let mut out = if params.use_pairwise || params.use_superpixel {
        vec![T::zero(); n * c]
    } else {
        features.data().to_vec()
    };
    if params.use_pairwise || params.use_superpixel {
        out.par_chunks_mut(c).zip(normalizers.par_iter_mut()).enumerate().for_each(|(i, (dst, z))| {
            dst.copy_from_slice(features.cell(i));
            let mut zi = T::one() + sp_weight;
            if let Some(layout) = &layout {
                for s in layout.row(i) {
                    let p = psi[s];
                    if p == T::zero() {
                        continue;
                    }
                    zi += p;
                    let fj = features.cell(layout.index[s] as usize);
                    for (o, &f) in dst.iter_mut().zip(fj) {
                        *o += p * f;
                    }
                }
            }
            if let Some(pool) = &pooled {
                for (o, &f) in dst.iter_mut().zip(pool.cell(i)) {
                    *o += f;
                }
            }
            dst.iter_mut().for_each(|o| *o /= zi);
            *z = zi;
        });
    }
    if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric { what: "E-CRF output", cell: pos / c });
    }
    let output = FeatureMap::new(h, w, c, out)?;
    let block_sizes = {
        let mut s = vec![0usize; sp.block_count()];
        sp.block_ids().iter().for_each(|&b| s[b as usize] += 1);
        s
    };
    let activation = EcrfActivation {
        params: params.clone(),
        features: features.clone(),
        tokens,
        embeddings,
        layout,
        kernel,
        compat,
        pairwise_weights: psi,
        block_of: sp.block_ids().to_vec(),
        block_sizes,
        pooled,
        normalizers,
        output: output.clone(),
    };
    Ok((output, activation))
}

/// Backward pass. Returns the gradient with respect to the input features and
/// the layer parameters, given `upstream = ∂L/∂F*`.
pub fn ecrf_backward<T: Real>(
    activation: Option<&EcrfActivation<T>>,
    upstream: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, EcrfGrads<T>)> {
    let act = activation.ok_or_else(|| Error::State("backward called without a forward activation".into()))?;
    let params = &act.params;
    let (h, w, c) = (act.features.height(), act.features.width(), act.features.channels());
    if upstream.height() != h || upstream.width() != w || upstream.channels() != c {
        return Err(Error::Dimension("upstream gradient shape differs from layer output".into()));
    }
    let n = h * w;
    let mut grads = EcrfGrads::zeros_like(params);
    if !params.use_pairwise && !params.use_superpixel {
        return Ok((upstream.clone(), grads));
    }

    // ∂L/∂N_i = g_i / Z_i and ∂L/∂Z_i = -(g_i · F*_i) / Z_i.
    let mut g_num = vec![T::zero(); n * c];
    let mut g_z = vec![T::zero(); n];
    for i in 0..n {
        let z = act.normalizers[i];
        let g = upstream.cell(i);
        for k in 0..c {
            g_num[i * c + k] = g[k] / z;
        }
        g_z[i] = -dot(g, act.output.cell(i)) / z;
    }

    // Unary term.
    let mut d_feat = g_num.clone();

    if params.use_superpixel {
        let mut block_acc = vec![T::zero(); act.block_sizes.len() * c];
        for (i, &b) in act.block_of.iter().enumerate() {
            for k in 0..c {
                block_acc[b as usize * c + k] += g_num[i * c + k];
            }
        }
        for (i, &b) in act.block_of.iter().enumerate() {
            let size = T::lit(act.block_sizes[b as usize] as f64);
            for k in 0..c {
                d_feat[i * c + k] += block_acc[b as usize * c + k] / size;
            }
        }
    }

    if let Some(layout) = &act.layout {
        let dk = params.embed_dim;
        let feats = &act.features;
        let pairs = layout.index.len();
        // Per-pair gradients w.r.t. the compatibility pre-activation and the clamped kernel.
        let mut g_pre = vec![T::zero(); pairs];
        let mut g_kernel = vec![T::zero(); pairs];
        let mut row_u = vec![T::zero(); n];
        let mut row_embed = vec![T::zero(); n * dk];
        {
            let mut rows: Vec<(usize, &mut [T], &mut [T], &mut T, &mut [T])> = Vec::with_capacity(n);
            let (mut a_rest, mut k_rest) = (&mut g_pre[..], &mut g_kernel[..]);
            for ((i, u), e) in row_u.iter_mut().enumerate().zip(row_embed.chunks_mut(dk)) {
                let len = layout.offsets[i + 1] - layout.offsets[i];
                let (a_row, a_tail) = a_rest.split_at_mut(len);
                let (k_row, k_tail) = k_rest.split_at_mut(len);
                rows.push((i, a_row, k_row, u, e));
                a_rest = a_tail;
                k_rest = k_tail;
            }
            rows.into_par_iter().for_each(|(i, a_row, k_row, du, de)| {
                let gn = &g_num[i * c..(i + 1) * c];
                for (slot, s) in layout.row(i).enumerate() {
                    let j = layout.index[s] as usize;
                    let g_psi = dot(gn, feats.cell(j)) + g_z[i];
                    let mu = act.compat[s];
                    let k = act.kernel[s];
                    let ga = g_psi * k * mu * (T::one() - mu);
                    let gk = if k > T::zero() { g_psi * mu } else { T::zero() };
                    a_row[slot] = ga;
                    k_row[slot] = gk;
                    *du += ga;
                    if gk != T::zero() {
                        let e_j = &act.embeddings[j * dk..(j + 1) * dk];
                        for (d, &e) in de.iter_mut().zip(e_j) {
                            *d += gk * e;
                        }
                    }
                }
            });
        }
        // Column pass: contributions of pair (i, j) to cell j.
        let mut col_v = vec![T::zero(); n];
        let mut col_feat = vec![T::zero(); n * c];
        let mut col_embed = vec![T::zero(); n * dk];
        col_v
            .par_iter_mut()
            .zip(col_feat.par_chunks_mut(c))
            .zip(col_embed.par_chunks_mut(dk))
            .enumerate()
            .for_each(|(j, ((dv, df), de))| {
                for s_rev in layout.row(j) {
                    let i = layout.index[s_rev] as usize;
                    let s = layout.mirror[s_rev];
                    *dv += g_pre[s];
                    let p = act.pairwise_weights[s];
                    if p != T::zero() {
                        let gn = &g_num[i * c..(i + 1) * c];
                        for (d, &g) in df.iter_mut().zip(gn) {
                            *d += p * g;
                        }
                    }
                    let gk = g_kernel[s];
                    if gk != T::zero() {
                        let e_i = &act.embeddings[i * dk..(i + 1) * dk];
                        for (d, &e) in de.iter_mut().zip(e_i) {
                            *d += gk * e;
                        }
                    }
                }
            });

        let (wa, wb) = params.compat_weight.split_at(c);
        let td = params.token_dim();
        for i in 0..n {
            let f = feats.cell(i);
            let df = &mut d_feat[i * c..(i + 1) * c];
            for k in 0..c {
                df[k] += wa[k] * row_u[i] + wb[k] * col_v[i] + col_feat[i * c + k];
                grads.compat_weight[k] += row_u[i] * f[k];
                grads.compat_weight[c + k] += col_v[i] * f[k];
            }
            grads.compat_bias += row_u[i];
            let x = &act.tokens[i * td..(i + 1) * td];
            for d in 0..dk {
                let g = row_embed[i * dk + d] + col_embed[i * dk + d];
                if g == T::zero() {
                    continue;
                }
                grads.embed_bias[d] += g;
                for (wgt, &xv) in grads.embed_weight[d * td..(d + 1) * td].iter_mut().zip(x) {
                    *wgt += g * xv;
                }
            }
        }
    }

    Ok((FeatureMap::new(h, w, c, d_feat)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_unit(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    fn random_features(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(c: usize, rng: &mut ChaCha8Rng) -> EcrfParams<f64> {
        let mut p = EcrfParams::init(c, 4, 3, rng).unwrap();
        p.compat_weight.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        p.compat_bias = rng.gen_range(-0.5..0.5);
        p
    }

    #[test]
    fn self_kernel_is_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(2, &mut rng);
        let tok: Vec<f64> = (0..7).map(|_| rng.gen()).collect();
        let e = kernel_embed(&tok, &p).unwrap();
        let k = kernel_value(&e, &e).unwrap();
        assert!((k - e.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-15);
        assert!(kernel_embed(&tok[..6], &p).is_err());
    }

    #[test]
    fn zero_embedding_gives_zero_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = params(2, &mut rng);
        p.embed_weight.iter_mut().for_each(|v| *v = 0.0);
        let img = random_image(3, 3, &mut rng);
        assert!(kernel_matrix(&img, &p).unwrap().iter().all(|&k| k == 0.0));
    }

    #[test]
    fn kernel_matrix_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(2, &mut rng);
        let img = random_image(2, 2, &mut rng);
        let km = kernel_matrix(&img, &p).unwrap();
        let pos = position_embedding(2, 2, 4).unwrap();
        let token = |i: usize| -> Vec<f64> {
            let mut t = img.color(i).to_vec();
            t.extend_from_slice(pos.cell(i));
            t
        };
        for i in 0..4 {
            for j in 0..4 {
                let (ti, tj) = (token(i), token(j));
                let mut dotv = 0.0;
                for d in 0..3 {
                    let ei: f64 = (0..7).map(|x| p.embed_weight[d * 7 + x] * ti[x]).sum::<f64>() + p.embed_bias[d];
                    let ej: f64 = (0..7).map(|x| p.embed_weight[d * 7 + x] * tj[x]).sum::<f64>() + p.embed_bias[d];
                    dotv += ei * ej;
                }
                assert!((km[i * 4 + j] - dotv.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compat_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = params(3, &mut rng);
        let (a, b) = ([0.3, -0.2, 0.9], [1.0, 0.5, -0.7]);
        let got = feature_compat(&a, &b, &p).unwrap();
        let pre: f64 = (0..3).map(|k| p.compat_weight[k] * a[k] + p.compat_weight[3 + k] * b[k]).sum::<f64>()
            + p.compat_bias;
        assert!((got - 1.0 / (1.0 + (-pre).exp())).abs() < 1e-12);
        p.compat_weight.iter_mut().for_each(|v| *v = 0.0);
        p.compat_bias = 0.0;
        assert_eq!(feature_compat(&a, &b, &p).unwrap(), 0.5);
        p.compat_bias = 50.0;
        assert!(feature_compat(&a, &b, &p).unwrap() > 1.0 - 1e-12);
        assert!(feature_compat(&a[..2], &b, &p).is_err());
    }

    #[test]
    fn pool_cases() {
        let f = FeatureMap::new(2, 2, 1, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let pooled = superpixel_pool(&f, &SuperpixelMap::single(2, 2)).unwrap();
        assert_eq!(pooled.data(), &[2.5, 2.5, 2.5, 2.5]);
        let each = SuperpixelMap::new(2, 2, vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(superpixel_pool(&f, &each).unwrap(), f);
        let c = FeatureMap::new(2, 3, 2, vec![0.75f64; 12]).unwrap();
        let m = SuperpixelMap::new(2, 3, vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        assert_eq!(superpixel_pool(&c, &m).unwrap(), c);
        assert!(superpixel_pool(&f, &SuperpixelMap::single(2, 3)).is_err());
    }

    #[test]
    fn identity_configuration_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = params(3, &mut rng);
        p.use_pairwise = false;
        p.use_superpixel = false;
        let f = random_features(3, 4, 3, &mut rng);
        let img = random_image(3, 4, &mut rng);
        let (out, act) = ecrf_forward(&f, &img, &SuperpixelMap::single(3, 4), &p).unwrap();
        assert_eq!(out, f);
        assert_eq!(act.pair_count(), 0);
        assert!(act.normalizers().iter().all(|&z| z == 1.0));
        let up = random_features(3, 4, 3, &mut rng);
        let (gf, gp) = ecrf_backward(Some(&act), &up).unwrap();
        assert_eq!(gf, up);
        assert_eq!(gp, EcrfGrads::zeros_like(&p));
    }

    #[test]
    fn shared_vector_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(4, &mut rng);
        let v = [0.25, -1.5, 0.75, 2.0];
        let f = FeatureMap::new(3, 3, 4, v.repeat(9)).unwrap();
        let img = random_image(3, 3, &mut rng);
        let sp = SuperpixelMap::new(3, 3, vec![0, 0, 1, 0, 1, 1, 2, 2, 2], 3).unwrap();
        let (out, _) = ecrf_forward(&f, &img, &sp, &p).unwrap();
        for i in 0..9 {
            for k in 0..4 {
                assert!((out.cell(i)[k] - v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(2, &mut rng);
        let f = random_features(3, 3, 2, &mut rng);
        let img = random_image(3, 3, &mut rng);
        let (_, act) = ecrf_forward(&f, &img, &SuperpixelMap::single(3, 3), &p).unwrap();
        let (gf, gp) = ecrf_backward(Some(&act), &FeatureMap::zeros(3, 3, 2)).unwrap();
        assert!(gf.data().iter().all(|&v| v == 0.0));
        assert_eq!(gp, EcrfGrads::zeros_like(&p));
    }

    #[test]
    fn backward_without_activation_is_state_error() {
        let up = FeatureMap::<f64>::zeros(1, 1, 1);
        assert!(matches!(ecrf_backward(None, &up), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = params(2, &mut rng);
        let f = random_features(3, 3, 2, &mut rng);
        assert!(ecrf_forward(&f, &random_image(3, 4, &mut rng), &SuperpixelMap::single(3, 3), &p).is_err());
        assert!(ecrf_forward(&f, &random_image(3, 3, &mut rng), &SuperpixelMap::single(2, 3), &p).is_err());
        let f3 = random_features(3, 3, 3, &mut rng);
        assert!(ecrf_forward(&f3, &random_image(3, 3, &mut rng), &SuperpixelMap::single(3, 3), &p).is_err());
    }

    #[test]
    fn window_layout_is_symmetric() {
        let layout = PairLayout::build(4, 5, Neighborhood::Window(1));
        for i in 0..20 {
            for s in layout.row(i) {
                let j = layout.index[s] as usize;
                let m = layout.mirror[s];
                assert_eq!(layout.index[m] as usize, i);
                assert!(layout.row(j).contains(&m));
            }
        }
    }

    #[test]
    fn pairwise_accessors_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = params(2, &mut rng);
        p.neighborhood = Neighborhood::Window(1);
        let f = random_features(3, 3, 2, &mut rng);
        let (_, act) = ecrf_forward(&f, &random_image(3, 3, &mut rng), &SuperpixelMap::single(3, 3), &p).unwrap();
        let dense = act.pairwise_dense();
        for i in 0..9 {
            assert_eq!(dense[i * 9 + i], 0.0);
            for j in 0..9 {
                assert_eq!(dense[i * 9 + j], act.pairwise_weight(i, j));
            }
        }
        assert_eq!(act.pairwise_weight(0, 8), 0.0);
    }
}
