//! Non-Euclidean geometry for Poisson fidelities.
//!
//! Burg's entropy `h(x) = -Σ log(x_i)` is the Legendre potential matched to
//! the Kullback-Leibler fidelity: `‖y‖₁·h - KL(y, A·)` is convex on the
//! positive orthant, which replaces Lipschitz-gradient smoothness in the
//! mirror-descent analysis. The Euclidean potential `½‖·‖²` is kept alongside
//! as the classical special case.

use crate::error::{Error, Result};
use crate::forward::ConvolutionOperator;
use crate::image::{uniform_f64, Image, Seed};

/// A Legendre potential: strictly convex, essentially smooth, with an
/// explicit mirror map `∇h` and inverse `∇h* = (∇h)⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Potential {
    /// `h(x) = -Σ log(x_i)` on the open positive orthant.
    Burg,
    /// `h(x) = ½‖x‖²` on all of space; mirror maps are the identity.
    HalfSquaredNorm,
}

/// `h(x)`; errors on domain violations (Burg requires `x > 0`).
pub fn potential_value(h: Potential, x: &Image) -> Result<f64> {
    match h {
        Potential::Burg => {
            let mut acc = 0.0;
            for (i, &v) in x.as_slice().iter().enumerate() {
                if v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "Burg entropy requires strictly positive pixels, pixel {i} is {v}"
                    )));
                }
                acc -= v.ln();
            }
            Ok(acc)
        }
        Potential::HalfSquaredNorm => {
            Ok(0.5 * x.as_slice().iter().map(|v| v * v).sum::<f64>())
        }
    }
}

/// Mirror map `∇h`: `-1/x` componentwise for Burg, identity for the
/// Euclidean potential.
pub fn mirror_map(h: Potential, x: &Image) -> Result<Image> {
    match h {
        Potential::Burg => {
            let mut out = Vec::with_capacity(x.len());
            for (i, &v) in x.as_slice().iter().enumerate() {
                if v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "mirror map domain violation at pixel {i}: {v}"
                    )));
                }
                out.push(-1.0 / v);
            }
            let (hh, w, c) = x.shape();
            Image::from_vec(hh, w, c, out)
        }
        Potential::HalfSquaredNorm => Ok(x.clone()),
    }
}

/// Inverse mirror map `∇h*`: `-1/u` componentwise on `u < 0` for Burg,
/// identity for the Euclidean potential.
pub fn inverse_mirror_map(h: Potential, u: &Image) -> Result<Image> {
    match h {
        Potential::Burg => {
            let mut out = Vec::with_capacity(u.len());
            for (i, &v) in u.as_slice().iter().enumerate() {
                if v >= 0.0 {
                    return Err(Error::Domain(format!(
                        "inverse mirror map requires negative components, pixel {i} is {v}"
                    )));
                }
                out.push(-1.0 / v);
            }
            let (hh, w, c) = u.shape();
            Image::from_vec(hh, w, c, out)
        }
        Potential::HalfSquaredNorm => Ok(u.clone()),
    }
}

/// Bregman divergence `D_h(x₁, x₂) = h(x₁) - h(x₂) - ⟨∇h(x₂), x₁ - x₂⟩`.
///
/// Non-negative by strict convexity, zero iff the arguments coincide.
pub fn bregman_divergence(h: Potential, x1: &Image, x2: &Image) -> Result<f64> {
    x1.check_same_shape(x2)?;
    match h {
        Potential::Burg => {
            // componentwise: log(x2/x1) + (x1 - x2)/x2
            let mut acc = 0.0;
            for (i, (&a, &b)) in x1.as_slice().iter().zip(x2.as_slice()).enumerate() {
                if a <= 0.0 || b <= 0.0 {
                    return Err(Error::Domain(format!(
                        "Bregman divergence domain violation at pixel {i}: ({a}, {b})"
                    )));
                }
                acc += (b / a).ln() + (a - b) / b;
            }
            Ok(acc)
        }
        Potential::HalfSquaredNorm => {
            let d = x1.sub(x2)?;
            Ok(0.5 * d.as_slice().iter().map(|v| v * v).sum::<f64>())
        }
    }
}

/// Bregman proximal operator of the box indicator `ι_{[0,a]^n}`.
///
/// Under Burg's entropy this coincides with the Euclidean projection: for
/// strictly positive input the lower clamp is inactive and the answer is
/// `min(x, a)` componentwise.
pub fn box_bregman_prox(h: Potential, x: &Image, a: f64) -> Result<Image> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "box bound must be positive, got {a}"
        )));
    }
    match h {
        Potential::Burg => {
            let mut out = Vec::with_capacity(x.len());
            for (i, &v) in x.as_slice().iter().enumerate() {
                if v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "Burg box prox requires strictly positive input, pixel {i} is {v}"
                    )));
                }
                out.push(v.min(a));
            }
            let (hh, w, c) = x.shape();
            Image::from_vec(hh, w, c, out)
        }
        Potential::HalfSquaredNorm => x.map(|v| v.clamp(0.0, a)),
    }
}

/// Kullback-Leibler data fidelity
/// `KL(y, Ax) = Σ_i y_i·log(y_i/(Ax)_i) + (Ax)_i - y_i`
/// with the convention `0·log 0 = 0`, implemented by branching on `y_i = 0`
/// rather than by smoothing.
#[derive(Debug, Clone)]
pub struct KlFidelity {
    y: Image,
    op: ConvolutionOperator,
}

impl KlFidelity {
    pub fn new(y: Image, op: ConvolutionOperator) -> Result<Self> {
        if y.shape() != op.image_shape() {
            return Err(Error::ShapeMismatch {
                expected: op.image_shape(),
                got: y.shape(),
            });
        }
        if y.min() < 0.0 {
            return Err(Error::Domain("observed counts must be non-negative".into()));
        }
        Ok(Self { y, op })
    }

    pub fn observed(&self) -> &Image {
        &self.y
    }

    pub fn operator(&self) -> &ConvolutionOperator {
        &self.op
    }

    /// `KL(y, Ax)`; errors where `(Ax)_i <= 0` against a positive count.
    pub fn value(&self, x: &Image) -> Result<f64> {
        let ax = self.op.apply(x)?;
        let mut acc = 0.0;
        for (i, (&yi, &zi)) in self.y.as_slice().iter().zip(ax.as_slice()).enumerate() {
            if yi == 0.0 {
                acc += zi;
            } else {
                if zi <= 0.0 {
                    return Err(Error::Domain(format!(
                        "(Ax)_{i} = {zi} is not positive where y_{i} = {yi} > 0"
                    )));
                }
                acc += yi * (yi / zi).ln() + zi - yi;
            }
        }
        Ok(acc)
    }

    /// `∇ KL(y, A·)(x) = Aᵀ(1 - y ⊘ Ax)` with componentwise division.
    pub fn gradient(&self, x: &Image) -> Result<Image> {
        self.gradient_from_prediction(&self.op.apply(x)?)
    }

    /// One operator application serving both the value and a deferred
    /// gradient: returns `(KL(y, Ax), Ax)`.
    pub fn value_and_prediction(&self, x: &Image) -> Result<(f64, Image)> {
        let ax = self.op.apply(x)?;
        let mut acc = 0.0;
        for (i, (&yi, &zi)) in self.y.as_slice().iter().zip(ax.as_slice()).enumerate() {
            if yi == 0.0 {
                acc += zi;
            } else {
                if zi <= 0.0 {
                    return Err(Error::Domain(format!(
                        "(Ax)_{i} = {zi} is not positive where y_{i} = {yi} > 0"
                    )));
                }
                acc += yi * (yi / zi).ln() + zi - yi;
            }
        }
        Ok((acc, ax))
    }

    /// Gradient evaluated from a previously computed prediction `Ax`.
    pub fn gradient_from_prediction(&self, ax: &Image) -> Result<Image> {
        let mut inner = Vec::with_capacity(ax.len());
        for (i, (&yi, &zi)) in self.y.as_slice().iter().zip(ax.as_slice()).enumerate() {
            if yi == 0.0 {
                inner.push(1.0);
            } else {
                if zi <= 0.0 {
                    return Err(Error::Domain(format!(
                        "(Ax)_{i} = {zi} is not positive where y_{i} = {yi} > 0"
                    )));
                }
                inner.push(1.0 - yi / zi);
            }
        }
        let (h, w, c) = ax.shape();
        self.op.adjoint(&Image::from_vec(h, w, c, inner)?)
    }

    /// Hessian-vector product `∇²KL(x)·v = Aᵀ(diag(y ⊘ (Ax)²) A v)`.
    pub fn hessian_vector_product(&self, x: &Image, v: &Image) -> Result<Image> {
        let ax = self.op.apply(x)?;
        let av = self.op.apply(v)?;
        let mut inner = Vec::with_capacity(ax.len());
        for (i, ((&yi, &zi), &avi)) in self
            .y
            .as_slice()
            .iter()
            .zip(ax.as_slice())
            .zip(av.as_slice())
            .enumerate()
        {
            if yi == 0.0 {
                inner.push(0.0);
            } else {
                if zi <= 0.0 {
                    return Err(Error::Domain(format!(
                        "(Ax)_{i} = {zi} is not positive where y_{i} = {yi} > 0"
                    )));
                }
                inner.push(yi / (zi * zi) * avi);
            }
        }
        let (h, w, c) = x.shape();
        self.op.adjoint(&Image::from_vec(h, w, c, inner)?)
    }
}

/// Relative-smoothness constant of `KL(y, A·)` with respect to Burg's
/// entropy: any `L ≥ ‖y‖₁` makes `L·h - KL(y, A·)` convex on the positive
/// orthant.
pub fn nolip_constant_kl(y: &Image) -> f64 {
    y.l1_norm()
}

/// A positive box region `[lo, hi]^n` over a fixed image shape.
#[derive(Debug, Clone, Copy)]
pub struct BoxRegion {
    pub lo: f64,
    pub hi: f64,
    pub shape: (usize, usize, usize),
}

impl BoxRegion {
    pub fn new(lo: f64, hi: f64, shape: (usize, usize, usize)) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box region requires 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi, shape })
    }

    fn sample(&self, rng: &mut impl rand_chacha::rand_core::RngCore) -> Image {
        let (h, w, c) = self.shape;
        let data = (0..h * w * c)
            .map(|_| self.lo + (self.hi - self.lo) * uniform_f64(rng))
            .collect();
        Image::from_vec(h, w, c, data).expect("sampled pixels are finite")
    }
}

/// Outcome of a sampled convexity check.
#[derive(Debug, Clone)]
pub struct ConvexityReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed excess of `g(t·x₁ + (1-t)·x₂)` over the chord, in
    /// absolute terms (zero when no trial exceeded the slack).
    pub max_excess: f64,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Slack absorbing roundoff from near-cancelling logs in the convexity test.
pub const CONVEXITY_SLACK: f64 = 1e-9;

/// Samples random segments `(x₁, x₂, t)` inside `region` and tests midpoint
/// convexity of `g = L·h - f`:
/// `g(t·x₁ + (1-t)·x₂) ≤ t·g(x₁) + (1-t)·g(x₂) + slack`.
///
/// This is a diagnostic: violations are counted, not raised as errors.
pub fn check_relative_convexity(
    h: Potential,
    f: impl Fn(&Image) -> Result<f64>,
    l: f64,
    region: &BoxRegion,
    n_trials: usize,
    seed: Seed,
) -> Result<ConvexityReport> {
    if l < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "relative-smoothness constant must be non-negative, got {l}"
        )));
    }
    let g = |x: &Image| -> Result<f64> { Ok(l * potential_value(h, x)? - f(x)?) };
    let mut rng = seed.rng();
    let mut violations = 0;
    let mut max_excess: f64 = 0.0;
    for _ in 0..n_trials {
        let x1 = region.sample(&mut rng);
        let x2 = region.sample(&mut rng);
        let t = uniform_f64(&mut rng);
        let (h_, w_, c_) = region.shape;
        let mid = Image::from_vec(
            h_,
            w_,
            c_,
            x1.as_slice()
                .iter()
                .zip(x2.as_slice())
                .map(|(&a, &b)| t * a + (1.0 - t) * b)
                .collect(),
        )?;
        let chord = t * g(&x1)? + (1.0 - t) * g(&x2)?;
        let excess = g(&mid)? - chord;
        if excess > CONVEXITY_SLACK {
            violations += 1;
            max_excess = max_excess.max(excess);
        }
    }
    Ok(ConvexityReport {
        trials: n_trials,
        violations,
        max_excess,
    })
}
