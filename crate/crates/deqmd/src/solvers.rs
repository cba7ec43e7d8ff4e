//! Fixed-point forward machinery.
//!
//! The recurrent layer is one mirror-descent step on the composite objective
//! `Ψ(x) = KL(y, Ax) + R(x) + ι_{[0,a]^n}(x)` in the Burg geometry:
//!
//! ```text
//! T_τ(x) = Π_{[0,a]^n}( ∇h*( ∇h(x) - τ·(∇KL(y,Ax) + ∇R(x)) ) )
//! ```
//!
//! Componentwise the Burg update is `x_i / (1 + τ·x_i·g_i)`, well defined
//! only while `1 + τ·x_i·g_i > 0`; larger steps surface as a
//! [`crate::Error::StepTooLarge`] that the backtracking loop treats as a
//! failed trial. Step sizes come from an Armijo-style sufficient-decrease
//! test measured in the Bregman divergence, so no global smoothness constant
//! is ever computed.

use std::fmt::Write as _;
use std::path::Path;

use crate::bregman::{box_bregman_prox, bregman_divergence, KlFidelity, Potential};
use crate::error::{Error, Result};
use crate::forward::ConvolutionOperator;
use crate::image::{uniform_f64, Image, Seed, EPS_POSITIVE};
use crate::metrics::psnr;
use crate::regularizers::Regularizer;

/// Hard cap on backtracking shrinks; exceeding it indicates an inconsistent
/// gradient/objective pair rather than a small step size.
pub const MAX_BACKTRACK_SHRINKS: usize = 60;

/// Solver configuration.
///
/// Defaults: box bound `a = 1`, `tau0 = 1`, decrease factor `γ = 0.8`,
/// shrink factor `η = 0.5`, stopping tolerance `2.5e-5` on the relative
/// change, at most 2000 iterations, warm-started step sizes with a ×2 growth
/// attempt every 10 accepted steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MdConfig {
    /// Upper bound of the box constraint `[0, a]^n`.
    pub a: f64,
    /// Step size tried first.
    pub tau0: f64,
    /// Sufficient-decrease factor `γ ∈ (0, 1)`.
    pub bt_gamma: f64,
    /// Step shrink factor `η ∈ (0, 1)`.
    pub bt_eta: f64,
    /// Stop when `‖x⁺-x‖/‖x⁺‖` falls below this.
    pub tol: f64,
    /// Iteration cap.
    pub max_iters: usize,
    /// Carry the accepted step size into the next iteration.
    pub warm_start_tau: bool,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            tau0: 1.0,
            bt_gamma: 0.8,
            bt_eta: 0.5,
            tol: 2.5e-5,
            max_iters: 2000,
            warm_start_tau: true,
        }
    }
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.tau0 > 0.0
            && (0.0..1.0).contains(&self.bt_gamma)
            && self.bt_gamma > 0.0
            && (0.0..1.0).contains(&self.bt_eta)
            && self.bt_eta > 0.0
            && self.tol > 0.0
            && self.max_iters > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("bad solver config: {self:?}")));
        }
        Ok(())
    }
}

/// The composite objective `Ψ = KL + R + box indicator`.
pub struct Objective<'a> {
    fidelity: &'a KlFidelity,
    regularizer: &'a Regularizer,
    box_a: f64,
}

impl<'a> Objective<'a> {
    pub fn new(fidelity: &'a KlFidelity, regularizer: &'a Regularizer, box_a: f64) -> Result<Self> {
        if !(box_a > 0.0 && box_a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box bound must be positive, got {box_a}"
            )));
        }
        Ok(Self {
            fidelity,
            regularizer,
            box_a,
        })
    }

    pub fn fidelity(&self) -> &KlFidelity {
        self.fidelity
    }

    pub fn regularizer(&self) -> &Regularizer {
        self.regularizer
    }

    pub fn box_bound(&self) -> f64 {
        self.box_a
    }

    /// `Ψ(x)`; +inf outside the box (the indicator term).
    pub fn psi(&self, x: &Image) -> Result<f64> {
        if x.min() < 0.0 || x.max() > self.box_a * (1.0 + 1e-12) {
            return Ok(f64::INFINITY);
        }
        Ok(self.fidelity.value(x)? + self.regularizer.value(x)?)
    }

    /// Gradient of the smooth part, `∇KL + ∇R`.
    pub fn grad_smooth(&self, x: &Image) -> Result<Image> {
        self.fidelity.gradient(x)?.add(&self.regularizer.grad_x(x)?)
    }

    /// One shared evaluation: Ψ(x) plus the state needed to finish the
    /// gradient later without repeating forward work.
    fn eval(&self, x: &Image) -> Result<Evaluation> {
        let (kl, prediction) = self.fidelity.value_and_prediction(x)?;
        let recording = self.regularizer.record(x)?;
        Ok(Evaluation {
            psi: kl + recording.value(),
            prediction,
            recording,
        })
    }

    /// Finishes `∇KL + ∇R` from a shared evaluation (one operator adjoint
    /// plus one backward tape replay).
    fn grad_from(&self, eval: Evaluation) -> Result<Image> {
        self.fidelity
            .gradient_from_prediction(&eval.prediction)?
            .add(&eval.recording.into_grad_x()?)
    }
}

/// Cached work shared between the objective value at a point and the
/// gradient at the same point.
struct Evaluation {
    psi: f64,
    prediction: Image,
    recording: crate::regularizers::Recording,
}

/// One mirror step with a precomputed gradient; also reports how many pixels
/// the positivity floor had to lift.
fn mirror_step(
    x: &Image,
    grad: &Image,
    tau: f64,
    box_a: f64,
) -> Result<(Image, usize)> {
    let mut out = Vec::with_capacity(x.len());
    for (i, (&xi, &gi)) in x.as_slice().iter().zip(grad.as_slice()).enumerate() {
        debug_assert!(xi > 0.0, "mirror step requires interior iterates");
        let denom = 1.0 + tau * xi * gi;
        if denom <= 0.0 {
            // mirror point -1/x - τg left the domain of ∇h* at pixel i
            let _ = i;
            return Err(Error::StepTooLarge { tau });
        }
        out.push(xi / denom);
    }
    let (h, w, c) = x.shape();
    let pre = Image::from_vec(h, w, c, out)?;
    let boxed = box_bregman_prox(Potential::Burg, &pre, box_a)?;
    let clamps = boxed.as_slice().iter().filter(|&&v| v < EPS_POSITIVE).count();
    Ok((boxed.clamp_positive(EPS_POSITIVE)?, clamps))
}

/// One application of the layer `T_τ`. Errors with
/// [`Error::StepTooLarge`] when `1 + τ·x_i·g_i ≤ 0` for some pixel; the
/// backtracking loop consumes that case.
pub fn md_step(obj: &Objective, x: &Image, tau: f64) -> Result<Image> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {tau}")));
    }
    let grad = obj.grad_smooth(x)?;
    Ok(mirror_step(x, &grad, tau, obj.box_bound())?.0)
}

/// Outcome of one backtracked step.
#[derive(Debug, Clone)]
pub struct BacktrackStep {
    pub x_next: Image,
    /// Accepted step size.
    pub tau: f64,
    pub psi_x: f64,
    pub psi_next: f64,
    /// `D_h(x_next, x)` at acceptance.
    pub divergence: f64,
    /// Shrinks performed before acceptance.
    pub shrinks: usize,
    /// Pixels lifted by the positivity floor in the accepted step.
    pub clamp_events: usize,
}

fn backtrack_inner(
    obj: &Objective,
    x: &Image,
    psi_x: f64,
    grad: &Image,
    tau_in: f64,
    cfg: &MdConfig,
) -> Result<(BacktrackStep, Evaluation)> {
    let mut tau = tau_in;
    for shrinks in 0..=MAX_BACKTRACK_SHRINKS {
        match mirror_step(x, grad, tau, cfg.a) {
            Err(Error::StepTooLarge { .. }) => {}
            Err(e) => return Err(e),
            Ok((cand, clamp_events)) => {
                let eval = obj.eval(&cand)?;
                let dh = bregman_divergence(Potential::Burg, &cand, x)?;
                if psi_x - eval.psi >= cfg.bt_gamma / tau * dh {
                    let step = BacktrackStep {
                        x_next: cand,
                        tau,
                        psi_x,
                        psi_next: eval.psi,
                        divergence: dh,
                        shrinks,
                        clamp_events,
                    };
                    return Ok((step, eval));
                }
            }
        }
        tau *= cfg.bt_eta;
    }
    Err(Error::BacktrackingStalled(MAX_BACKTRACK_SHRINKS))
}

/// Shrinks `tau_in` by `η` until the mirror step is feasible and satisfies
/// the sufficient-decrease test
/// `Ψ(x) - Ψ(T_τ(x)) ≥ (γ/τ)·D_h(T_τ(x), x)`.
pub fn backtrack_step(
    obj: &Objective,
    x: &Image,
    tau_in: f64,
    cfg: &MdConfig,
) -> Result<BacktrackStep> {
    cfg.validate()?;
    if !(tau_in > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {tau_in}"
        )));
    }
    let psi_x = obj.psi(x)?;
    let grad = obj.grad_smooth(x)?;
    Ok(backtrack_inner(obj, x, psi_x, &grad, tau_in, cfg)?.0)
}

/// Per-iteration record of a solve.
#[derive(Debug, Clone)]
pub struct IterRow {
    pub k: usize,
    /// `Ψ(x^k)` after the step (KL for multiplicative baselines).
    pub psi: f64,
    /// Accepted step size (0 for solvers without one).
    pub tau: f64,
    /// `‖x^k - x^{k-1}‖ / ‖x^k‖`.
    pub rel_change: f64,
    /// PSNR against the reference image, when one was supplied.
    pub psnr: Option<f64>,
}

/// Trajectory of a solver run.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Objective value at the starting point.
    pub psi0: f64,
    pub rows: Vec<IterRow>,
    pub converged: bool,
    pub final_image: Image,
    /// Total pixels lifted by the positivity floor across all accepted
    /// steps (an explicit deviation from the pure interior-point math,
    /// recorded so it never passes silently).
    pub clamp_events: usize,
    /// `‖y‖₁` of the measurement driving the solve, when applicable.
    pub l1_y: Option<f64>,
}

impl SolveReport {
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    pub fn final_rel_change(&self) -> Option<f64> {
        self.rows.last().map(|r| r.rel_change)
    }

    pub fn final_tau(&self) -> Option<f64> {
        self.rows.last().map(|r| r.tau)
    }

    /// Geometric mean of the accepted step sizes (skips zero entries).
    pub fn geometric_mean_tau(&self) -> Option<f64> {
        let taus: Vec<f64> = self.rows.iter().map(|r| r.tau).filter(|&t| t > 0.0).collect();
        if taus.is_empty() {
            return None;
        }
        Some((taus.iter().map(|t| t.ln()).sum::<f64>() / taus.len() as f64).exp())
    }

    /// CSV with columns `k,psi,tau,rel_change,psnr` (psnr blank when absent).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,psi,tau,rel_change,psnr\n");
        for r in &self.rows {
            let psnr = r.psnr.map_or(String::new(), |p| format!("{p:.6}"));
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{}",
                r.k, r.psi, r.tau, r.rel_change, psnr
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Iterates backtracked mirror steps from `x0` until the relative change
/// drops below `cfg.tol` or `cfg.max_iters` is hit. The starting point is
/// clamped into the feasible box. When `reference` is given, each row also
/// carries PSNR against it.
pub fn solve_fixed_point(
    obj: &Objective,
    x0: &Image,
    cfg: &MdConfig,
    reference: Option<&Image>,
) -> Result<SolveReport> {
    cfg.validate()?;
    let feasible = box_bregman_prox(
        Potential::Burg,
        &x0.clamp_positive(EPS_POSITIVE)?,
        cfg.a,
    )?;
    let mut x = feasible;
    let mut eval = obj.eval(&x)?;
    let psi0 = eval.psi;
    let mut tau = cfg.tau0;
    let mut rows = Vec::new();
    let mut clamp_events = 0;
    let mut converged = false;

    for k in 1..=cfg.max_iters {
        let psi = eval.psi;
        let grad = obj.grad_from(eval)?;
        // periodic ×2 growth attempt keeps warm-started steps near the
        // largest admissible value
        let tau_try = if cfg.warm_start_tau && k > 1 && (k - 1) % 10 == 0 {
            tau * 2.0
        } else {
            tau
        };
        let (step, eval_next) = backtrack_inner(obj, &x, psi, &grad, tau_try, cfg)?;
        eval = eval_next;
        let diff = step.x_next.sub(&x)?;
        let denom = step.x_next.l2_norm();
        let rel_change = if denom > 0.0 { diff.l2_norm() / denom } else { 0.0 };
        x = step.x_next;
        clamp_events += step.clamp_events;
        if cfg.warm_start_tau {
            tau = step.tau;
        }
        rows.push(IterRow {
            k,
            psi: step.psi_next,
            tau: step.tau,
            rel_change,
            psnr: reference.map(|r| psnr(&x, r)).transpose()?,
        });
        if rel_change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(SolveReport {
        psi0,
        rows,
        converged,
        final_image: x,
        clamp_events,
        l1_y: Some(obj.fidelity().observed().l1_norm()),
    })
}

/// Starting-point strategies for the fixed-point solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitStrategy {
    /// `Aᵀy`, rescaled to `[eps, 1]`.
    Adjoint,
    /// i.i.d. uniform pixels in `(0, 1)`.
    RandomUniform,
    /// Solution of the KL + smoothed-TV problem with weight `lambda`.
    TvRecon { lambda: f64 },
    /// `iters` multiplicative Richardson-Lucy updates.
    Rl { iters: usize },
}

/// Builds a starting point from the measurement.
pub fn initialize(
    strategy: InitStrategy,
    y: &Image,
    op: &ConvolutionOperator,
    seed: Seed,
) -> Result<Image> {
    match strategy {
        InitStrategy::Adjoint => {
            let aty = op.adjoint(y)?;
            let m = aty.max();
            let scaled = if m > 0.0 { aty.scaled(1.0 / m)? } else { aty };
            scaled.clamp_positive(EPS_POSITIVE)
        }
        InitStrategy::RandomUniform => {
            let mut rng = seed.rng();
            let (h, w, c) = y.shape();
            let data = (0..h * w * c).map(|_| uniform_f64(&mut rng)).collect();
            Image::from_vec(h, w, c, data)?.clamp_positive(EPS_POSITIVE)
        }
        InitStrategy::TvRecon { lambda } => {
            let fidelity = KlFidelity::new(y.clone(), op.clone())?;
            let reg = Regularizer::smoothed_tv(lambda);
            let cfg = MdConfig::default();
            let obj = Objective::new(&fidelity, &reg, cfg.a)?;
            let x0 = initialize(InitStrategy::Adjoint, y, op, seed)?;
            Ok(solve_fixed_point(&obj, &x0, &cfg, None)?.final_image)
        }
        InitStrategy::Rl { iters } => {
            Ok(richardson_lucy(y, op, iters, None, None)?.final_image)
        }
    }
}

/// Richardson-Lucy: `iters` multiplicative updates
/// `x ← (x / Aᵀ1)·Aᵀ(y / Ax)`, divisions guarded by the positivity floor.
/// The default start is the constant image at `mean(y)`. The report's `psi`
/// column carries `KL(y, Ax^k)`.
pub fn richardson_lucy(
    y: &Image,
    op: &ConvolutionOperator,
    iters: usize,
    x_init: Option<&Image>,
    reference: Option<&Image>,
) -> Result<SolveReport> {
    richardson_lucy_with(y, op, iters, x_init, reference, |_, _| {})
}

/// [`richardson_lucy`] with a per-iterate callback `(k, x^k)`, for oracle
/// iterate selection without storing the trajectory.
pub fn richardson_lucy_with(
    y: &Image,
    op: &ConvolutionOperator,
    iters: usize,
    x_init: Option<&Image>,
    reference: Option<&Image>,
    mut on_iterate: impl FnMut(usize, &Image),
) -> Result<SolveReport> {
    if y.min() < 0.0 {
        return Err(Error::Domain("observed counts must be non-negative".into()));
    }
    let fidelity = KlFidelity::new(y.clone(), op.clone())?;
    let (h, w, c) = y.shape();
    let mut x = match x_init {
        Some(x0) => x0.clamp_positive(EPS_POSITIVE)?,
        None => Image::constant(h, w, c, y.mean())?.clamp_positive(EPS_POSITIVE)?,
    };
    let ones = Image::constant(h, w, c, 1.0)?;
    let at1 = op.adjoint(&ones)?;
    let psi0 = fidelity.value(&x)?;
    let mut rows = Vec::with_capacity(iters);
    let mut clamp_events = 0;
    for k in 1..=iters {
        let ax = op.apply(&x)?;
        let ratio = Image::from_vec(
            h,
            w,
            c,
            y.as_slice()
                .iter()
                .zip(ax.as_slice())
                .map(|(&yi, &zi)| yi / zi.max(EPS_POSITIVE))
                .collect(),
        )?;
        let back = op.adjoint(&ratio)?;
        let raw = Image::from_vec(
            h,
            w,
            c,
            x.as_slice()
                .iter()
                .zip(back.as_slice())
                .zip(at1.as_slice())
                .map(|((&xi, &bi), &di)| xi * bi / di.max(EPS_POSITIVE))
                .collect(),
        )?;
        clamp_events += raw.as_slice().iter().filter(|&&v| v < EPS_POSITIVE).count();
        let next = raw.clamp_positive(EPS_POSITIVE)?;
        let diff = next.sub(&x)?;
        let denom = next.l2_norm();
        let rel_change = if denom > 0.0 { diff.l2_norm() / denom } else { 0.0 };
        x = next;
        on_iterate(k, &x);
        rows.push(IterRow {
            k,
            psi: fidelity.value(&x)?,
            tau: 0.0,
            rel_change,
            psnr: reference.map(|r| psnr(&x, r)).transpose()?,
        });
    }
    Ok(SolveReport {
        psi0,
        rows,
        converged: false,
        final_image: x,
        clamp_events,
        l1_y: Some(y.l1_norm()),
    })
}

/// Picks the iterate maximizing `metric(iterate, reference)`; ties go to the
/// smallest index. Errors on an empty stream.
pub fn best_iterate_selector(
    stream: impl IntoIterator<Item = (usize, Image)>,
    reference: &Image,
    metric: impl Fn(&Image, &Image) -> Result<f64>,
) -> Result<(usize, Image, f64)> {
    let mut best: Option<(usize, Image, f64)> = None;
    for (k, img) in stream {
        let score = metric(&img, reference)?;
        let replace = match &best {
            None => true,
            Some((_, _, s)) => score > *s,
        };
        if replace {
            best = Some((k, img, score));
        }
    }
    best.ok_or(Error::Empty("iterate stream"))
}
