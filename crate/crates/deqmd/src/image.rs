//! Core numeric containers: images, convolution kernels and reproducible seeds.
//!
//! All numerics are 64-bit floats. The Burg mirror map `x ↦ -1/x` amplifies
//! roundoff near zero, which rules out `f32` pipelines. Images are immutable
//! values after construction and every public operation checks that pixel
//! data stays finite.

use ndarray::{Array2, Array3};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Positivity floor used wherever a strictly positive iterate is required.
///
/// Far below 8-bit quantization (1/255) yet large enough that `1/EPS_POSITIVE`
/// stays comfortably finite in 64-bit arithmetic.
pub const EPS_POSITIVE: f64 = 1e-8;

/// A dense 2-D pixel grid with a channel axis, stored as `(height, width, channels)`.
///
/// Grayscale experiments use `channels = 1`; multi-channel images are treated
/// as independent planes by every operator and solver in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps an array as an image, rejecting NaN/Inf pixels.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self { data })
    }

    /// Builds an image from a flat row-major `(h, w, c)` buffer.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "buffer length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        let arr = Array3::from_shape_vec((height, width, channels), data)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::from_array(arr)
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    /// Constant image; `value` must be finite.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant image value"));
        }
        Ok(Self {
            data: Array3::from_elem((height, width, channels), value),
        })
    }

    /// Single-channel image built from a pixel function.
    pub fn gray_from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let data = Array3::from_shape_fn((height, width, 1), |(r, c, _)| f(r, c));
        Self::from_array(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.data
    }

    /// Flat row-major view of the pixel buffer.
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("image arrays are C-contiguous")
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row, col, channel)]
    }

    /// Copies one channel into a flat `(h*w)` buffer.
    pub fn channel_to_vec(&self, channel: usize) -> Vec<f64> {
        let (h, w, _) = self.shape();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.data[(r, c, channel)]);
            }
        }
        out
    }

    /// Rebuilds an image from per-channel flat buffers.
    pub(crate) fn from_channel_vecs(
        height: usize,
        width: usize,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let c = channels.len();
        let mut data = Array3::zeros((height, width, c));
        for (ch, buf) in channels.iter().enumerate() {
            if buf.len() != height * width {
                return Err(Error::InvalidArgument(
                    "channel buffer length mismatch".into(),
                ));
            }
            for r in 0..height {
                for col in 0..width {
                    data[(r, col, ch)] = buf[r * width + col];
                }
            }
        }
        Self::from_array(data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_array(self.data.mapv(&f))
    }

    /// `max(pixel, eps)` per component; preserves shape and is idempotent.
    ///
    /// Guards membership of `dom(h) = (0, ∞)^n` before mirror steps.
    pub fn clamp_positive(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clamp_positive requires eps > 0, got {eps}"
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clamp_positive input"));
        }
        Ok(Self::from_array_unchecked(self.data.mapv(|v| v.max(eps))))
    }

    pub fn min(&self) -> f64 {
        self.as_slice().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.as_slice()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.as_slice().iter().sum::<f64>() / self.len() as f64
    }

    pub fn l1_norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn add(&self, other: &Image) -> Result<Self> {
        self.check_same_shape(other)?;
        Self::from_array(&self.data + other.as_array())
    }

    pub fn sub(&self, other: &Image) -> Result<Self> {
        self.check_same_shape(other)?;
        Self::from_array(&self.data - other.as_array())
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_array(self.data.mapv(|v| v * s))
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }
}

/// A non-negative 2-D convolution stencil with an anchor (center) coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    weights: Array2<f64>,
    anchor: (usize, usize),
}

impl Kernel {
    /// Validates non-negativity and positive total mass.
    pub fn new(weights: Array2<f64>, anchor: (usize, usize)) -> Result<Self> {
        let (h, w) = weights.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("kernel must be non-empty".into()));
        }
        if anchor.0 >= h || anchor.1 >= w {
            return Err(Error::InvalidArgument(format!(
                "anchor {anchor:?} outside kernel {h}x{w}"
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel weights"));
        }
        if weights.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("kernel weights must be non-negative".into()));
        }
        if weights.sum() <= 0.0 {
            return Err(Error::Domain("kernel weights must have positive sum".into()));
        }
        Ok(Self { weights, anchor })
    }

    /// Normalized Gaussian stencil, anchored at the center. `size` must be odd.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "gaussian kernel size must be odd, got {size}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let c = (size / 2) as isize;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut weights = Array2::zeros((size, size));
        for r in 0..size {
            for q in 0..size {
                let dy = r as isize - c;
                let dx = q as isize - c;
                weights[(r, q)] = (-(dy * dy + dx * dx) as f64 * inv).exp();
            }
        }
        let total = weights.sum();
        weights.mapv_inplace(|v| v / total);
        Self::new(weights, (size / 2, size / 2))
    }

    /// Uniform (box) stencil with mass one, anchored at the center.
    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "uniform kernel size must be odd, got {size}"
            )));
        }
        let weights = Array2::from_elem((size, size), 1.0 / (size * size) as f64);
        Self::new(weights, (size / 2, size / 2))
    }

    /// Identity stencil: a single unit weight.
    pub fn delta() -> Self {
        Self {
            weights: Array2::from_elem((1, 1), 1.0),
            anchor: (0, 0),
        }
    }

    /// Multiplies all weights by `s > 0` (e.g. to fold a photon intensity
    /// into the forward operator).
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel scale must be positive, got {s}"
            )));
        }
        Self::new(self.weights.mapv(|v| v * s), self.anchor)
    }

    pub fn height(&self) -> usize {
        self.weights.dim().0
    }

    pub fn width(&self) -> usize {
        self.weights.dim().1
    }

    pub fn anchor(&self) -> (usize, usize) {
        self.anchor
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.sum()
    }

    /// Whether correlation with this kernel equals convolution with it
    /// (point symmetry about the anchor).
    pub fn is_symmetric(&self) -> bool {
        let (h, w) = self.weights.dim();
        let (ar, ac) = self.anchor;
        for r in 0..h {
            for c in 0..w {
                let rr = 2 * ar as isize - r as isize;
                let cc = 2 * ac as isize - c as isize;
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    if self.weights[(r, c)] != 0.0 {
                        return false;
                    }
                    continue;
                }
                if (self.weights[(r, c)] - self.weights[(rr as usize, cc as usize)]).abs() > 1e-15 {
                    return false;
                }
            }
        }
        true
    }

    /// Parses the text format: first line `h w anchor_r anchor_c`, then
    /// `h` rows of `w` floats.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::UnsupportedFormat("empty kernel file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::UnsupportedFormat(
                "kernel header must be `h w anchor_r anchor_c`".into(),
            ));
        }
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::UnsupportedFormat(format!("bad kernel header field `{s}`")))
        };
        let (h, w) = (parse_dim(fields[0])?, parse_dim(fields[1])?);
        let anchor = (parse_dim(fields[2])?, parse_dim(fields[3])?);
        let mut weights = Array2::zeros((h, w));
        for r in 0..h {
            let line = lines
                .next()
                .ok_or_else(|| Error::UnsupportedFormat(format!("kernel row {r} missing")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::UnsupportedFormat(format!("bad kernel value `{s}`")))
                })
                .collect::<Result<_>>()?;
            if row.len() != w {
                return Err(Error::UnsupportedFormat(format!(
                    "kernel row {r} has {} values, expected {w}",
                    row.len()
                )));
            }
            for (c, v) in row.into_iter().enumerate() {
                weights[(r, c)] = v;
            }
        }
        Self::new(weights, anchor)
    }

    /// Serializes to the text format accepted by [`Kernel::from_text`].
    pub fn to_text(&self) -> String {
        let (h, w) = self.weights.dim();
        let mut out = format!("{h} {w} {} {}\n", self.anchor.0, self.anchor.1);
        for r in 0..h {
            let row: Vec<String> = (0..w).map(|c| format!("{}", self.weights[(r, c)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Key for a deterministic sampling stream. Identical seeds reproduce
/// identical streams bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    /// Fresh deterministic generator for this seed.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Generator for one element of a partitioned stream (e.g. a pixel
    /// index). Different indices use disjoint ChaCha streams, so parallel
    /// samplers stay deterministic.
    pub fn indexed_rng(self, index: u64) -> ChaCha8Rng {
        let mut rng = self.rng();
        rng.set_stream(index);
        rng
    }

    /// Derives an unrelated child seed, e.g. one per dataset sample.
    pub fn derive(self, tag: u64) -> Seed {
        Seed(splitmix64(self.0.wrapping_add(splitmix64(tag))))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub(crate) fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box-Muller; consumes two uniforms).
pub(crate) fn normal_f64(rng: &mut impl RngCore) -> f64 {
    loop {
        let u = uniform_f64(rng);
        if u > 0.0 {
            let v = uniform_f64(rng);
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}
