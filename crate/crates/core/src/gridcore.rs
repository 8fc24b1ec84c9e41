//! Dense grid primitives shared by every other module: images, label maps,
//! feature maps, positional embeddings and resolution alignment.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

/// RGB image with channels normalized to `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from already-normalized interleaved RGB values.
    pub fn from_unit(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("image must be non-empty".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "channel value {} at index {bad} outside [0, 1]",
                data[bad]
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Color of flat pixel index `i`.
    pub fn color(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    /// Quantizes back to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    /// Area-averages the image down by `stride`. Edge blocks that do not fit
    /// entirely average only the pixels they cover.
    pub fn area_downsample(&self, stride: usize) -> Result<Image> {
        if stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        let oh = self.height.div_ceil(stride);
        let ow = self.width.div_ceil(stride);
        let mut data = vec![0.0; oh * ow * 3];
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = [0.0; 3];
                let mut n = 0usize;
                for y in r * stride..((r + 1) * stride).min(self.height) {
                    for x in c * stride..((c + 1) * stride).min(self.width) {
                        let p = self.rgb(y, x);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                        n += 1;
                    }
                }
                let o = (r * ow + c) * 3;
                for k in 0..3 {
                    data[o + k] = (acc[k] / n as f64).clamp(0.0, 1.0);
                }
            }
        }
        Image::from_unit(oh, ow, data)
    }
}

/// Scales raw 8-bit RGB into `[0, 1]`.
pub fn normalize_image(height: usize, width: usize, raw: &[u8]) -> Result<Image> {
    if height == 0 || width == 0 || raw.is_empty() {
        return Err(Error::Dimension("cannot normalize an empty image".into()));
    }
    if raw.len() != height * width * 3 {
        return Err(Error::Dimension(format!(
            "raw buffer has {} bytes, expected {}",
            raw.len(),
            height * width * 3
        )));
    }
    let data = raw.iter().map(|&v| f64::from(v) / 255.0).collect();
    Ok(Image { height, width, data })
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("label map must be non-empty".into()));
        }
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { height, width, num_classes, labels })
    }

    pub fn uniform(height: usize, width: usize, num_classes: usize, label: u32) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Majority-vote label downsampling; ties go to the smallest class id.
///
/// When the map is not divisible by `stride` the trailing blocks are partial,
/// which is equivalent to padding with an ignore label.
pub fn downsample_labels(labels: &LabelMap, stride: usize) -> Result<LabelMap> {
    if stride == 0 {
        return Err(Error::Parameter("stride must be positive".into()));
    }
    let oh = labels.height.div_ceil(stride);
    let ow = labels.width.div_ceil(stride);
    let mut votes = vec![0u32; labels.num_classes];
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            votes.iter_mut().for_each(|v| *v = 0);
            for y in r * stride..((r + 1) * stride).min(labels.height) {
                for x in c * stride..((c + 1) * stride).min(labels.width) {
                    votes[labels.get(y, x) as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (k, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = k;
                }
            }
            out.push(best as u32);
        }
    }
    LabelMap::new(oh, ow, labels.num_classes, out)
}

/// `height × width × channels` feature grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension("feature map must be non-empty".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "expected {} feature values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric { what: "feature map", cell: i / channels });
        }
        Ok(Self { height, width, channels, data })
    }

    /// Skips the finiteness scan; for buffers produced by trusted arithmetic.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect(),
        }
    }
}

/// Sinusoidal position embedding over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionField {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PositionField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub const POSITION_BASE: f64 = 10_000.0;

/// Interleaved `(sin, cos)` pairs: the first `ceil(dim/4)` pairs encode the
/// row index, the remaining pairs the column index. Within each half the
/// frequencies follow `base^(-2m / half_dim)`, so the first pair always has
/// frequency 1.
pub fn position_embedding(height: usize, width: usize, dim: usize) -> Result<PositionField> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Parameter(format!("position dim must be even and >= 2, got {dim}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Dimension("position field must be non-empty".into()));
    }
    let pairs = dim / 2;
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    let freqs = |n: usize| -> Vec<f64> {
        let half_dim = (2 * n) as f64;
        (0..n).map(|m| POSITION_BASE.powf(-2.0 * m as f64 / half_dim)).collect()
    };
    let row_freqs = freqs(row_pairs);
    let col_freqs = freqs(col_pairs);
    let mut data = Vec::with_capacity(height * width * dim);
    for r in 0..height {
        for c in 0..width {
            for &w in &row_freqs {
                let a = r as f64 * w;
                data.push(a.sin());
                data.push(a.cos());
            }
            for &w in &col_freqs {
                let a = c as f64 * w;
                data.push(a.sin());
                data.push(a.cos());
            }
        }
    }
    Ok(PositionField { height, width, dim, data })
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    normalize_image(h as usize, w as usize, img.as_raw())
}

pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.to_rgb8())
        .ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads an 8-bit gray label PNG where the gray value is the class id.
pub fn read_label_png(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let labels = img.as_raw().iter().map(|&v| u32::from(v)).collect();
    LabelMap::new(h as usize, w as usize, num_classes, labels)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    if labels.num_classes > 256 {
        return Err(Error::Parameter("8-bit label PNG holds at most 256 classes".into()));
    }
    let raw = labels.labels.iter().map(|&l| l as u8).collect();
    let buf = image::GrayImage::from_raw(labels.width as u32, labels.height as u32, raw)
        .ok_or_else(|| Error::Dimension("label buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_scales_by_255() {
        let img = normalize_image(1, 1, &[0, 128, 255]).unwrap();
        assert_eq!(img.rgb(0, 0)[0], 0.0);
        assert!((img.rgb(0, 0)[1] - 0.501_960_784_313_725_5).abs() < 1e-15);
        assert_eq!(img.rgb(0, 0)[2], 1.0);
    }

    #[test]
    fn normalize_black_and_white() {
        let black = normalize_image(3, 4, &[0; 36]).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let white = normalize_image(3, 4, &[255; 36]).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_rejects_empty() {
        assert!(matches!(normalize_image(0, 3, &[]), Err(Error::Dimension(_))));
        assert!(matches!(normalize_image(2, 2, &[0; 5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn position_origin_is_zero_one() {
        for dim in [2, 4, 8, 16] {
            let p = position_embedding(2, 2, dim).unwrap();
            for (k, v) in p.at(0, 0).iter().enumerate() {
                assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn position_dim8_cell_3_5() {
        let p = position_embedding(6, 6, 8).unwrap();
        let w1 = POSITION_BASE.powf(-0.5);
        let expect = [
            3f64.sin(),
            3f64.cos(),
            (3.0 * w1).sin(),
            (3.0 * w1).cos(),
            5f64.sin(),
            5f64.cos(),
            (5.0 * w1).sin(),
            (5.0 * w1).cos(),
        ];
        for (a, b) in p.at(3, 5).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // second frequency of each half is 1/100 for dim 8
        assert!((w1 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn position_rejects_odd_dim() {
        assert!(matches!(position_embedding(2, 2, 3), Err(Error::Parameter(_))));
        assert!(matches!(position_embedding(2, 2, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn downsample_majority_and_ties() {
        let m = LabelMap::new(2, 2, 3, vec![1, 1, 2, 0]).unwrap();
        assert_eq!(downsample_labels(&m, 2).unwrap().labels(), &[1]);
        let m = LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(downsample_labels(&m, 2).unwrap().labels(), &[0]);
        let m = LabelMap::new(2, 2, 3, vec![2, 1, 1, 2]).unwrap();
        assert_eq!(downsample_labels(&m, 2).unwrap().labels(), &[1]);
    }

    #[test]
    fn downsample_uniform_and_partial() {
        let m = LabelMap::uniform(8, 12, 4, 3).unwrap();
        let d = downsample_labels(&m, 4).unwrap();
        assert_eq!((d.height(), d.width()), (2, 3));
        assert!(d.labels().iter().all(|&l| l == 3));
        let d = downsample_labels(&m, 5).unwrap();
        assert_eq!((d.height(), d.width()), (2, 3));
        assert!(matches!(downsample_labels(&m, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let m = LabelMap::new(2, 3, 5, vec![0, 1, 2, 3, 4, 0]).unwrap();
        write_label_png(&path, &m).unwrap();
        assert_eq!(read_label_png(&path, 5).unwrap(), m);
        assert!(read_label_png(&path, 3).is_err());
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let raw: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 13) as u8).collect();
        let img = normalize_image(2, 3, &raw).unwrap();
        write_rgb_png(&path, &img).unwrap();
        assert_eq!(read_rgb_png(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn position_norm_is_half_dim(h in 1usize..20, w in 1usize..20, half in 1usize..12) {
            let dim = 2 * half;
            let p = position_embedding(h, w, dim).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let n: f64 = p.at(r, c).iter().map(|v| v * v).sum();
                    prop_assert!((n - half as f64).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn normalize_is_monotone_and_idempotent(raw in proptest::collection::vec(any::<u8>(), 12)) {
            let img = normalize_image(2, 2, &raw).unwrap();
            let again = normalize_image(2, 2, &img.to_rgb8()).unwrap();
            prop_assert_eq!(&img, &again);
            for (a, &ra) in img.data().iter().zip(&raw) {
                for (b, &rb) in img.data().iter().zip(&raw) {
                    if ra < rb {
                        prop_assert!(a < b);
                    }
                }
            }
        }
    }
}
