//! SLIC superpixels: k-means in (L, a, b, row, col) space with windowed
//! search, followed by 4-connectivity enforcement.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gridcore::{FeatureMap, Image};
use crate::real::Real;

/// Non-overlapping partition of a grid into blocks `0..block_count`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    block_ids: Vec<u32>,
    block_count: usize,
}

impl SuperpixelMap {
    pub fn new(height: usize, width: usize, block_ids: Vec<u32>, block_count: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("superpixel map must be non-empty".into()));
        }
        if block_ids.len() != height * width {
            return Err(Error::Dimension(format!(
                "expected {} block ids, got {}",
                height * width,
                block_ids.len()
            )));
        }
        if let Some(&bad) = block_ids.iter().find(|&&b| b as usize >= block_count) {
            return Err(Error::Parameter(format!("block id {bad} >= block count {block_count}")));
        }
        Ok(Self { height, width, block_ids, block_count })
    }

    /// Whole grid as a single block.
    pub fn single(height: usize, width: usize) -> Self {
        Self { height, width, block_ids: vec![0; height * width], block_count: 1 }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn block_ids(&self) -> &[u32] {
        &self.block_ids
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.block_ids[row * self.width + col]
    }

    /// Nearest-neighbor resampling of block ids to another resolution. Ids
    /// are kept, so blocks that vanish simply have no member cells.
    pub fn resample_nearest(&self, height: usize, width: usize) -> Result<SuperpixelMap> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("target resolution must be non-empty".into()));
        }
        let mut ids = Vec::with_capacity(height * width);
        for r in 0..height {
            let sy = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for c in 0..width {
                let sx = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                ids.push(self.get(sy, sx));
            }
        }
        Ok(SuperpixelMap { height, width, block_ids: ids, block_count: self.block_count })
    }

    /// Member cells of every block id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.block_count];
        for (i, &b) in self.block_ids.iter().enumerate() {
            out[b as usize].push(i);
        }
        out
    }

    /// True when every non-empty block is a single 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        let (_, n) = components(self.height, self.width, &self.block_ids);
        let used = {
            let mut seen = vec![false; self.block_count];
            self.block_ids.iter().for_each(|&b| seen[b as usize] = true);
            seen.iter().filter(|&&s| s).count()
        };
        n == used
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub target_blocks: usize,
    pub compactness: f64,
    pub iterations: usize,
    pub min_block_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self { target_blocks: 200, compactness: 10.0, iterations: 10, min_block_fraction: 0.25 }
    }
}

impl SlicParams {
    pub fn with_blocks(target_blocks: usize) -> Self {
        Self { target_blocks, ..Self::default() }
    }

    fn validate(&self, pixels: usize) -> Result<()> {
        if self.target_blocks == 0 {
            return Err(Error::Parameter("target_blocks must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be >= 1".into()));
        }
        if self.target_blocks > pixels {
            return Err(Error::Parameter(format!(
                "target_blocks {} exceeds pixel count {pixels}",
                self.target_blocks
            )));
        }
        if !(self.compactness > 0.0) || !(self.min_block_fraction >= 0.0) {
            return Err(Error::Parameter("compactness must be > 0 and min_block_fraction >= 0".into()));
        }
        Ok(())
    }
}

/// sRGB in `[0, 1]` to CIELAB (D65 white).
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    fn linear(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    }
    let [r, g, b] = rgb.map(linear);
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = (0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b) / 1.088_83;
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Grid shape `(rows, cols)` whose product is closest to `k`, then whose cells
/// are closest to square; ties favor more columns.
pub fn seed_grid(height: usize, width: usize, k: usize) -> (usize, usize) {
    let mut best = (1, k.max(1));
    let mut best_key = (usize::MAX, f64::INFINITY);
    for rows in 1..=k.max(1) {
        let cols = ((k as f64 / rows as f64).round() as usize).max(1);
        let count_err = (rows * cols).abs_diff(k);
        let aspect_err = (height as f64 / rows as f64 - width as f64 / cols as f64).abs();
        let key = (count_err, aspect_err);
        let better = key.0 < best_key.0
            || (key.0 == best_key.0 && key.1 < best_key.1 - 1e-12)
            || (key.0 == best_key.0 && (key.1 - best_key.1).abs() <= 1e-12 && cols > best.1);
        if better {
            best = (rows, cols);
            best_key = key;
        }
    }
    best
}

/// Per-pixel 5-D SLIC features `(L, a, b, row, col)`.
fn lab_features(image: &Image) -> Vec<[f64; 5]> {
    let w = image.width();
    (0..image.pixel_count())
        .map(|i| {
            let [l, a, b] = rgb_to_lab(image.color(i));
            [l, a, b, (i / w) as f64, (i % w) as f64]
        })
        .collect()
}

fn seed_centers(feats: &[[f64; 5]], height: usize, width: usize, k: usize) -> Vec<[f64; 5]> {
    let (rows, cols) = seed_grid(height, width, k);
    let lab_at = |r: usize, c: usize| feats[r * width + c];
    let gradient = |r: usize, c: usize| -> f64 {
        if r == 0 || c == 0 || r + 1 >= height || c + 1 >= width {
            return f64::INFINITY;
        }
        let d = |a: [f64; 5], b: [f64; 5]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        d(lab_at(r, c + 1), lab_at(r, c - 1)) + d(lab_at(r + 1, c), lab_at(r - 1, c))
    };
    let mut centers = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        let r0 = ((gr as f64 + 0.5) * height as f64 / rows as f64) as usize;
        for gc in 0..cols {
            let c0 = ((gc as f64 + 0.5) * width as f64 / cols as f64) as usize;
            let (mut br, mut bc) = (r0.min(height - 1), c0.min(width - 1));
            let mut best = gradient(br, bc);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (br as i64 + dr, bc as i64 + dc);
                    if r < 0 || c < 0 || r as usize >= height || c as usize >= width {
                        continue;
                    }
                    let g = gradient(r as usize, c as usize);
                    if g < best {
                        best = g;
                        br = r as usize;
                        bc = c as usize;
                    }
                }
            }
            let f = lab_at(br, bc);
            centers.push([f[0], f[1], f[2], br as f64, bc as f64]);
        }
    }
    centers
}

#[inline]
fn slic_distance(p: &[f64; 5], c: &[f64; 5], spatial_weight: f64) -> f64 {
    let dc = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
    let ds = (p[3] - c[3]).powi(2) + (p[4] - c[4]).powi(2);
    dc + ds * spatial_weight
}

/// Raw SLIC assignment before connectivity enforcement.
pub fn slic_assign(image: &Image, params: &SlicParams) -> Result<Vec<u32>> {
    let (h, w) = (image.height(), image.width());
    params.validate(h * w)?;
    let feats = lab_features(image);
    let step = ((h * w) as f64 / params.target_blocks as f64).sqrt();
    let spatial_weight = (params.compactness / step).powi(2);
    let mut centers = seed_centers(&feats, h, w, params.target_blocks);
    let radius = step.ceil() as i64;
    let mut labels = vec![u32::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..params.iterations {
        labels.iter_mut().for_each(|l| *l = u32::MAX);
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cr, cc) = (c[3].round() as i64, c[4].round() as i64);
            let r_lo = (cr - radius).max(0) as usize;
            let r_hi = ((cr + radius) as usize).min(h - 1);
            let c_lo = (cc - radius).max(0) as usize;
            let c_hi = ((cc + radius) as usize).min(w - 1);
            for r in r_lo..=r_hi {
                for col in c_lo..=c_hi {
                    let i = r * w + col;
                    let d = slic_distance(&feats[i], c, spatial_weight);
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // Pixels no window reached fall back to the globally nearest center.
        for i in 0..h * w {
            if labels[i] == u32::MAX {
                let (k, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, slic_distance(&feats[i], c, spatial_weight)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                labels[i] = k as u32;
            }
        }
        let mut sums = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            for k in 0..5 {
                s[k] += feats[i][k];
            }
            counts[l as usize] += 1;
        }
        for (k, c) in centers.iter_mut().enumerate() {
            if counts[k] > 0 {
                for d in 0..5 {
                    c[d] = sums[k][d] / counts[k] as f64;
                }
            }
        }
    }
    Ok(labels)
}

/// Segments `image` into roughly `params.target_blocks` connected blocks.
pub fn slic_segment(image: &Image, params: &SlicParams) -> Result<SuperpixelMap> {
    let labels = slic_assign(image, params)?;
    let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let raw = SuperpixelMap {
        height: image.height(),
        width: image.width(),
        block_ids: labels,
        block_count: count,
    };
    Ok(enforce_connectivity(&raw, params.target_blocks, params.min_block_fraction))
}

/// 4-connected components of equal ids, numbered in scan order.
fn components(height: usize, width: usize, ids: &[u32]) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; height * width];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..height * width {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = n;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && ids[j] == ids[i] {
                    comp[j] = n;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        n += 1;
    }
    (comp, n)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Makes every block 4-connected. Fragments smaller than
/// `min_block_fraction * pixels / target_blocks` are merged into their
/// largest adjacent block; if more than `2 * target_blocks` blocks remain the
/// smallest are merged the same way. Ids are re-compacted in scan order.
pub fn enforce_connectivity(map: &SuperpixelMap, target_blocks: usize, min_block_fraction: f64) -> SuperpixelMap {
    let (h, w) = (map.height, map.width);
    let (comp, n) = components(h, w, &map.block_ids);
    let mut size = vec![0usize; n];
    comp.iter().for_each(|&c| size[c] += 1);

    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w && comp[i] != comp[i + 1] {
                adjacency[comp[i]].push(comp[i + 1]);
                adjacency[comp[i + 1]].push(comp[i]);
            }
            if r + 1 < h && comp[i] != comp[i + w] {
                adjacency[comp[i]].push(comp[i + w]);
                adjacency[comp[i + w]].push(comp[i]);
            }
        }
    }
    adjacency.iter_mut().for_each(|a| {
        a.sort_unstable();
        a.dedup();
    });

    let mut parent: Vec<usize> = (0..n).collect();
    let mut group_size = size;
    let mut group_members: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
    let mut groups = n;

    let min_size = (min_block_fraction * (h * w) as f64 / target_blocks.max(1) as f64).floor() as usize;
    let max_groups = 2 * target_blocks.max(1);
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|c| Reverse((group_size[c], c))).collect();
    while let Some(Reverse((s, g))) = heap.pop() {
        if groups <= 1 {
            break;
        }
        if find(&mut parent, g) != g || group_size[g] != s {
            continue;
        }
        if s >= min_size && groups <= max_groups {
            break;
        }
        let mut best: Option<usize> = None;
        for &c in &group_members[g] {
            for &nb in &adjacency[c] {
                let root = find(&mut parent, nb);
                if root == g {
                    continue;
                }
                best = match best {
                    Some(b) if group_size[b] > group_size[root] || (group_size[b] == group_size[root] && b < root) => {
                        Some(b)
                    }
                    _ => Some(root),
                };
            }
        }
        if let Some(target) = best {
            parent[g] = target;
            group_size[target] += s;
            let moved = std::mem::take(&mut group_members[g]);
            group_members[target].extend(moved);
            groups -= 1;
            heap.push(Reverse((group_size[target], target)));
        }
    }

    let mut relabel = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut ids = Vec::with_capacity(h * w);
    for &c in &comp {
        let root = find(&mut parent, c);
        if relabel[root] == u32::MAX {
            relabel[root] = next;
            next += 1;
        }
        ids.push(relabel[root]);
    }
    SuperpixelMap { height: h, width: w, block_ids: ids, block_count: next as usize }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockStat<T> {
    pub size: usize,
    pub mean: Vec<T>,
}

/// Size and mean feature of every block. `map` must already be at feature
/// resolution; blocks with no cells report size 0 and a zero mean.
pub fn block_stats<T: Real>(map: &SuperpixelMap, features: &FeatureMap<T>) -> Result<Vec<BlockStat<T>>> {
    if map.height != features.height() || map.width != features.width() {
        return Err(Error::Dimension(format!(
            "superpixel map {}x{} does not match feature map {}x{}",
            map.height,
            map.width,
            features.height(),
            features.width()
        )));
    }
    let ch = features.channels();
    let mut stats: Vec<BlockStat<T>> =
        (0..map.block_count).map(|_| BlockStat { size: 0, mean: vec![T::zero(); ch] }).collect();
    for (i, &b) in map.block_ids.iter().enumerate() {
        let s = &mut stats[b as usize];
        s.size += 1;
        for (m, &f) in s.mean.iter_mut().zip(features.cell(i)) {
            *m += f;
        }
    }
    for s in &mut stats {
        if s.size > 0 {
            let n = T::lit(s.size as f64);
            s.mean.iter_mut().for_each(|m| *m /= n);
        }
    }
    Ok(stats)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes the map as a 16-bit gray PNG plus a `<path>.txt` key=value header.
pub fn save_superpixel_map(path: &Path, map: &SuperpixelMap, params: &SlicParams) -> Result<()> {
    if map.block_count > usize::from(u16::MAX) + 1 {
        return Err(Error::Parameter("16-bit PNG holds at most 65536 blocks".into()));
    }
    let raw: Vec<u16> = map.block_ids.iter().map(|&b| b as u16).collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(map.width as u32, map.height as u32, raw)
            .ok_or_else(|| Error::Dimension("superpixel buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let mut header = String::new();
    let _ = writeln!(header, "block_count={}", map.block_count);
    let _ = writeln!(header, "target_blocks={}", params.target_blocks);
    let _ = writeln!(header, "compactness={}", params.compactness);
    let _ = writeln!(header, "iterations={}", params.iterations);
    let _ = writeln!(header, "min_block_fraction={}", params.min_block_fraction);
    let side = sidecar_path(path);
    std::fs::write(&side, header).map_err(|e| Error::io(side, e))
}

pub fn load_superpixel_map(path: &Path) -> Result<SuperpixelMap> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let img = img.to_luma16();
    let (w, h) = img.dimensions();
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let block_count = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "block_count")
        .and_then(|(_, v)| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Format(format!("{}: missing block_count", side.display())))?;
    let ids = img.as_raw().iter().map(|&v| u32::from(v)).collect();
    SuperpixelMap::new(h as usize, w as usize, ids, block_count)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcore::normalize_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_image(h: usize, w: usize) -> Image {
        normalize_image(h, w, &[90, 140, 200].repeat(h * w)).unwrap()
    }

    #[test]
    fn lab_reference_colors() {
        let white = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-3 && white[2].abs() < 1e-3);
        let black = rgb_to_lab([0.0, 0.0, 0.0]);
        assert!(black.iter().all(|v| v.abs() < 1e-9));
        let red = rgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.05 && (red[1] - 80.09).abs() < 0.05 && (red[2] - 67.20).abs() < 0.05);
    }

    #[test]
    fn seed_grid_shapes() {
        assert_eq!(seed_grid(96, 96, 16), (4, 4));
        assert_eq!(seed_grid(8, 8, 2), (1, 2));
        assert_eq!(seed_grid(10, 40, 4), (1, 4));
        assert_eq!(seed_grid(5, 5, 1), (1, 1));
    }

    #[test]
    fn uniform_image_gives_regular_grid() {
        let map = slic_segment(&uniform_image(96, 96), &SlicParams::with_blocks(16)).unwrap();
        assert_eq!(map.block_count(), 16);
        for (b, cells) in map.members().iter().enumerate() {
            let rows: Vec<usize> = cells.iter().map(|&i| i / 96).collect();
            let cols: Vec<usize> = cells.iter().map(|&i| i % 96).collect();
            let hgt = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
            let wid = cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1;
            assert!((20..=28).contains(&hgt) && (20..=28).contains(&wid), "block {b}: {hgt}x{wid}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        let img = uniform_image(4, 4);
        assert!(matches!(slic_segment(&img, &SlicParams::with_blocks(17)), Err(Error::Parameter(_))));
        assert!(matches!(slic_segment(&img, &SlicParams::with_blocks(0)), Err(Error::Parameter(_))));
        let p = SlicParams { iterations: 0, ..SlicParams::with_blocks(2) };
        assert!(matches!(slic_segment(&img, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn orphan_pixel_is_absorbed() {
        let mut ids = vec![0u32; 100];
        ids[55] = 1;
        let map = SuperpixelMap::new(10, 10, ids, 2).unwrap();
        let fixed = enforce_connectivity(&map, 1, 0.25);
        assert_eq!(fixed.block_count(), 1);
        assert!(fixed.block_ids().iter().all(|&b| b == 0));
    }

    #[test]
    fn connected_map_unchanged_up_to_relabel() {
        let ids: Vec<u32> = (0..64).map(|i| if i % 8 < 4 { 7 } else { 3 }).collect();
        let map = SuperpixelMap::new(8, 8, ids.clone(), 8).unwrap();
        let fixed = enforce_connectivity(&map, 2, 0.25);
        assert_eq!(fixed.block_count(), 2);
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(ids[i] == ids[j], fixed.block_ids()[i] == fixed.block_ids()[j]);
            }
        }
    }

    #[test]
    fn split_component_becomes_two_blocks() {
        // id 0 on both outer columns, id 1 in the middle: three components
        let ids: Vec<u32> = (0..36).map(|i| if (2..4).contains(&(i % 6)) { 1 } else { 0 }).collect();
        let map = SuperpixelMap::new(6, 6, ids, 2).unwrap();
        let fixed = enforce_connectivity(&map, 3, 0.25);
        assert_eq!(fixed.block_count(), 3);
        assert!(fixed.is_four_connected());
    }

    #[test]
    fn connectivity_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let k = rng.gen_range(1..6u32);
            let ids: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
            let target = rng.gen_range(1..=(h * w).min(10));
            let map = SuperpixelMap::new(h, w, ids, k as usize).unwrap();
            let fixed = enforce_connectivity(&map, target, 0.25);
            assert!(fixed.is_four_connected());
            assert!(fixed.block_count() >= 1 && fixed.block_count() <= 2 * target);
            let mut seen = vec![false; fixed.block_count()];
            fixed.block_ids().iter().for_each(|&b| seen[b as usize] = true);
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn block_stats_single_block() {
        let f = FeatureMap::new(2, 2, 2, vec![1.0f64, 0.0, 2.0, 1.0, 3.0, 2.0, 4.0, 3.0]).unwrap();
        let stats = block_stats(&SuperpixelMap::single(2, 2), &f).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].size, 4);
        assert_eq!(stats[0].mean, vec![2.5, 1.5]);
    }

    #[test]
    fn block_stats_two_constant_halves() {
        let vals: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 3.0 } else { -1.5 }).collect();
        let f = FeatureMap::new(4, 4, 1, vals).unwrap();
        let map = SuperpixelMap::new(4, 4, (0..16).map(|i| u32::from(i % 4 >= 2)).collect(), 3).unwrap();
        let stats = block_stats(&map, &f).unwrap();
        assert_eq!(stats[0], BlockStat { size: 8, mean: vec![3.0] });
        assert_eq!(stats[1], BlockStat { size: 8, mean: vec![-1.5] });
        assert_eq!(stats[2].size, 0);
        assert_eq!(stats.iter().map(|s| s.size).sum::<usize>(), 16);
    }

    #[test]
    fn block_stats_shape_mismatch() {
        let f = FeatureMap::<f64>::zeros(2, 3, 1);
        assert!(matches!(block_stats(&SuperpixelMap::single(3, 2), &f), Err(Error::Dimension(_))));
    }

    #[test]
    fn resample_keeps_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<u8> = (0..48 * 48 * 3).map(|_| rng.gen()).collect();
        let img = normalize_image(48, 48, &raw).unwrap();
        let map = slic_segment(&img, &SlicParams::with_blocks(20)).unwrap();
        let small = map.resample_nearest(12, 12).unwrap();
        assert_eq!(small.block_ids().len(), 144);
        assert!(small.block_ids().iter().all(|&b| (b as usize) < small.block_count()));
        let f = FeatureMap::<f32>::zeros(12, 12, 3);
        let total: usize = block_stats(&small, &f).unwrap().iter().map(|s| s.size).sum();
        assert_eq!(total, 144);
    }

    #[test]
    fn png_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sp.png");
        let ids: Vec<u32> = (0..300).map(|i| (i % 300) as u32).collect();
        let map = SuperpixelMap::new(15, 20, ids, 300).unwrap();
        save_superpixel_map(&path, &map, &SlicParams::with_blocks(300)).unwrap();
        assert_eq!(load_superpixel_map(&path).unwrap(), map);
        let header = std::fs::read_to_string(dir.path().join("sp.png.txt")).unwrap();
        assert!(header.contains("block_count=300"));
        assert!(header.contains("compactness=10"));
    }
}
