//! The measurement process: a circular convolution operator `A`, its adjoint,
//! and the Poisson photon-count channel `y ~ Poiss(α·Ax)`.
//!
//! Circular boundary handling makes `A` exactly square with an exact adjoint.
//! The spatial implementation below is the reference; any faster path must
//! match it to 1e-10.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{uniform_f64, Image, Kernel, Seed};

/// Boundary handling for the convolution operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Circular,
}

/// Square linear operator realized by per-channel circular convolution.
///
/// Non-negative kernels with positive mass keep every row of `A` a non-zero
/// non-negative vector, so `Ax > 0` componentwise whenever `x > 0`.
#[derive(Debug, Clone)]
pub struct ConvolutionOperator {
    kernel: Kernel,
    boundary: Boundary,
    image_shape: (usize, usize, usize),
}

impl ConvolutionOperator {
    pub fn new(kernel: Kernel, image_shape: (usize, usize, usize)) -> Result<Self> {
        let (h, w, c) = image_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument("empty image shape".into()));
        }
        if kernel.height() > h || kernel.width() > w {
            return Err(Error::InvalidArgument(format!(
                "kernel {}x{} larger than image {}x{}",
                kernel.height(),
                kernel.width(),
                h,
                w
            )));
        }
        Ok(Self {
            kernel,
            boundary: Boundary::Circular,
            image_shape,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    /// Same operator with the kernel mass multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.kernel.scaled(s)?, self.image_shape)
    }

    fn check_shape(&self, x: &Image) -> Result<()> {
        if x.shape() != self.image_shape {
            return Err(Error::ShapeMismatch {
                expected: self.image_shape,
                got: x.shape(),
            });
        }
        Ok(())
    }

    /// Circular 2-D convolution of each channel with the kernel:
    /// `(Ax)(p) = Σ_q k(q) · x(p - q + anchor)`.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check_shape(x)?;
        self.run(x, false)
    }

    /// Adjoint of [`ConvolutionOperator::apply`]: correlation with the kernel,
    /// `(Aᵀy)(p) = Σ_q k(q) · y(p + q - anchor)`.
    pub fn adjoint(&self, y: &Image) -> Result<Image> {
        self.check_shape(y)?;
        self.run(y, true)
    }

    fn run(&self, x: &Image, adjoint: bool) -> Result<Image> {
        let (h, w, c) = self.image_shape;
        let (ar, ac) = self.kernel.anchor();
        let mut channels = Vec::with_capacity(c);
        for ch in 0..c {
            let src = x.channel_to_vec(ch);
            let mut dst = vec![0.0; h * w];
            for kr in 0..self.kernel.height() {
                for kc in 0..self.kernel.width() {
                    let weight = self.kernel.weights()[(kr, kc)];
                    if weight == 0.0 {
                        continue;
                    }
                    // apply reads x(p - (q - anchor)); adjoint reads y(p + (q - anchor))
                    let (dy, dx) = if adjoint {
                        (kr as isize - ar as isize, kc as isize - ac as isize)
                    } else {
                        (ar as isize - kr as isize, ac as isize - kc as isize)
                    };
                    let col_shift = dx.rem_euclid(w as isize) as usize;
                    for r in 0..h {
                        let sr = (r as isize + dy).rem_euclid(h as isize) as usize;
                        axpy_wrapped(
                            &mut dst[r * w..(r + 1) * w],
                            &src[sr * w..(sr + 1) * w],
                            col_shift,
                            weight,
                        );
                    }
                }
            }
            channels.push(dst);
        }
        Image::from_channel_vecs(h, w, channels)
    }
}

/// `dst[c] += a * src[(c + shift) mod n]` with `0 <= shift < n`.
#[inline]
fn axpy_wrapped(dst: &mut [f64], src: &[f64], shift: usize, a: f64) {
    let n = dst.len();
    let k = n - shift;
    for (d, s) in dst[..k].iter_mut().zip(&src[shift..]) {
        *d += a * *s;
    }
    for (d, s) in dst[k..].iter_mut().zip(&src[..shift]) {
        *d += a * *s;
    }
}

/// Photon intensity of the Poisson channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub alpha: f64,
}

impl NoiseConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be a finite positive number, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }
}

/// Draws `y_i ~ Poisson(α·mean_i)` independently per pixel and returns the
/// counts as floats. A pixel with mean 0 yields exactly 0 (the degenerate
/// Poisson convention).
///
/// The stream is partitioned by pixel index, so a fixed `(seed, index)` pair
/// always produces the same draw regardless of evaluation order.
pub fn sample_poisson(mean: &Image, cfg: NoiseConfig, seed: Seed) -> Result<Image> {
    let (h, w, c) = mean.shape();
    let mut out = Vec::with_capacity(mean.len());
    for (i, &m) in mean.as_slice().iter().enumerate() {
        if m < 0.0 {
            return Err(Error::Domain(format!(
                "Poisson mean must be non-negative, pixel {i} is {m}"
            )));
        }
        let lambda = cfg.alpha * m;
        if lambda == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut rng = seed.indexed_rng(i as u64);
        out.push(poisson_draw(lambda, &mut rng) as f64);
    }
    Image::from_vec(h, w, c, out)
}

/// One Poisson draw: Knuth multiplication below λ = 30 (exact at low counts),
/// PTRS transformed rejection above (fast at high counts).
fn poisson_draw(lambda: f64, rng: &mut impl rand_chacha::rand_core::RngCore) -> u64 {
    if lambda < 30.0 {
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= uniform_f64(rng);
            if p <= limit {
                return k;
            }
            k += 1;
        }
    } else {
        // Hörmann's PTRS rejection sampler.
        let smu = lambda.sqrt();
        let b = 0.931 + 2.53 * smu;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        let ln_lambda = lambda.ln();
        loop {
            let u = uniform_f64(rng) - 0.5;
            let v = uniform_f64(rng);
            if v == 0.0 {
                continue;
            }
            let us = 0.5 - u.abs();
            let kf = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return kf as u64;
            }
            if kf < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let k = kf as u64;
            let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
            if lhs <= kf * ln_lambda - lambda - ln_factorial(k) {
                return k;
            }
        }
    }
}

/// `ln k!`: exact summation for small `k`, Stirling series otherwise.
fn ln_factorial(k: u64) -> f64 {
    if k < 2 {
        return 0.0;
    }
    if k <= 20 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    let x = k as f64;
    let x2 = x * x;
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2)
}

/// A simulated observation paired with its ground truth and replay seed.
#[derive(Debug, Clone)]
pub struct DataPair {
    pub clean: Image,
    pub observed: Image,
    pub alpha: f64,
    pub seed: Seed,
}

/// Simulates `y_i = Poiss(α·A x_i)` for each clean image. Per-pair seeds are
/// derived from `seed` and stored for bit-exact replay.
pub fn make_dataset(
    clean_images: &[Image],
    op: &ConvolutionOperator,
    cfg: NoiseConfig,
    seed: Seed,
) -> Result<Vec<DataPair>> {
    clean_images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let pair_seed = seed.derive(i as u64);
            let observed = sample_poisson(&op.apply(x)?, cfg, pair_seed)?;
            Ok(DataPair {
                clean: x.clone(),
                observed,
                alpha: cfg.alpha,
                seed: pair_seed,
            })
        })
        .collect()
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub clean_path: String,
    pub observed_path: String,
    pub alpha: f64,
    pub seed: u64,
}

/// Serializes manifest rows as CSV with a header line.
pub fn manifest_to_csv(rows: &[ManifestRow]) -> String {
    let mut out = String::from("clean_path,observed_path,alpha,seed\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.clean_path, r.observed_path, r.alpha, r.seed
        )
        .unwrap();
    }
    out
}

/// Parses a manifest written by [`manifest_to_csv`].
pub fn manifest_from_csv(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::UnsupportedFormat(format!(
                "manifest line {} has {} fields, expected 4",
                i + 1,
                fields.len()
            )));
        }
        let alpha = fields[2]
            .parse()
            .map_err(|_| Error::UnsupportedFormat(format!("bad alpha `{}`", fields[2])))?;
        let seed = fields[3]
            .parse()
            .map_err(|_| Error::UnsupportedFormat(format!("bad seed `{}`", fields[3])))?;
        rows.push(ManifestRow {
            clean_path: fields[0].to_string(),
            observed_path: fields[1].to_string(),
            alpha,
            seed,
        });
    }
    Ok(rows)
}

/// Reads a manifest CSV file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    manifest_from_csv(&text)
}
