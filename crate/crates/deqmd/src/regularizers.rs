//! Differentiable regularization functionals `R_θ`.
//!
//! Three families are provided:
//!
//! * smoothed total variation (fixed, analytic gradient);
//! * a scalar convolutional network evaluated directly as `R_θ(x)`;
//! * a residual-denoiser parameterization `R_θ(x) = ½‖x - N_θ(x)‖²`.
//!
//! The learnable families are recorded on the reverse-mode tape from
//! [`crate::tape`]. All activations are softplus, so every learnable forward
//! pass is infinitely differentiable in both the input and the parameters;
//! the whitelist is asserted when an architecture is constructed.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::image::{normal_f64, Image, Seed};
use crate::tape::{logistic_stable, softplus_stable, Graph, NodeId};

/// Default softplus sharpness for the learnable networks.
pub const DEFAULT_BETA: f64 = 100.0;

/// Default smoothing of the total-variation functional.
pub const DEFAULT_TV_EPS: f64 = 1e-6;

/// `softplus_β(x) = (1/β)·log(1 + exp(βx))`, evaluated in an
/// underflow/overflow safe form.
pub fn softplus(x: f64, beta: f64) -> f64 {
    softplus_stable(x, beta)
}

/// Derivative of [`softplus`]: the logistic `σ(βx)`.
pub fn softplus_derivative(x: f64, beta: f64) -> f64 {
    logistic_stable(x, beta)
}

/// Smoothed isotropic total variation with circular index wrap:
/// `TV_ε(x) = Σ_{i,j} sqrt((x_{i,j+1}-x_{i,j})² + (x_{i+1,j}-x_{i,j})² + ε)`,
/// summed per channel.
pub fn tv_smoothed_value(x: &Image, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TV smoothing must be positive, got {eps}"
        )));
    }
    let (h, w, c) = x.shape();
    let mut acc = 0.0;
    for ch in 0..c {
        for r in 0..h {
            let rn = (r + 1) % h;
            for col in 0..w {
                let cn = (col + 1) % w;
                let v = x.at(r, col, ch);
                let dh = x.at(r, cn, ch) - v;
                let dv = x.at(rn, col, ch) - v;
                acc += (dh * dh + dv * dv + eps).sqrt();
            }
        }
    }
    Ok(acc)
}

/// Analytic gradient of [`tv_smoothed_value`].
pub fn tv_smoothed_grad(x: &Image, eps: f64) -> Result<Image> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TV smoothing must be positive, got {eps}"
        )));
    }
    let (h, w, c) = x.shape();
    let mut grad = vec![0.0; h * w * c];
    let idx = |r: usize, col: usize, ch: usize| (r * w + col) * c + ch;
    for ch in 0..c {
        for r in 0..h {
            let rn = (r + 1) % h;
            for col in 0..w {
                let cn = (col + 1) % w;
                let v = x.at(r, col, ch);
                let dh = x.at(r, cn, ch) - v;
                let dv = x.at(rn, col, ch) - v;
                let root = (dh * dh + dv * dv + eps).sqrt();
                grad[idx(r, col, ch)] -= (dh + dv) / root;
                grad[idx(r, cn, ch)] += dh / root;
                grad[idx(rn, col, ch)] += dv / root;
            }
        }
    }
    let (hh, ww, cc) = x.shape();
    Image::from_vec(hh, ww, cc, grad)
}

/// Shape and offset of one named parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Stable mapping from named tensors to slices of a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
    arch_hash: u64,
}

impl Layout {
    fn build(arch_desc: &str, tensors: &[(String, Vec<usize>)]) -> Self {
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        let mut hash = fnv1a(0xcbf29ce484222325, arch_desc.as_bytes());
        for (name, shape) in tensors {
            let len: usize = shape.iter().product();
            hash = fnv1a(hash, name.as_bytes());
            for d in shape {
                hash = fnv1a(hash, &d.to_le_bytes());
            }
            entries.push(LayoutEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len,
            });
            offset += len;
        }
        Self {
            entries,
            total: offset,
            arch_hash: hash,
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn arch_hash(&self) -> u64 {
        self.arch_hash
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Flat parameter buffer tied to a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "buffer length {} does not match layout length {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.total_len();
        Self {
            data: vec![0.0; n],
            layout,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Slice for a named tensor.
    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let e = self
            .layout
            .entry(name)
            .ok_or_else(|| Error::LayoutMismatch(format!("no tensor named `{name}`")))?;
        Ok(&self.data[e.offset..e.offset + e.len])
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += s * other` (layouts must match).
    pub fn add_scaled(&mut self, other: &ParamVector, s: f64) -> Result<()> {
        if self.layout.arch_hash() != other.layout.arch_hash() {
            return Err(Error::LayoutMismatch("layout hash mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DEQP";

/// Writes a checkpoint: magic `DEQP`, little-endian `u64` architecture hash,
/// `u64` parameter count, then the buffer as little-endian `f64`.
pub fn save_params(params: &ParamVector, path: impl AsRef<Path>) -> Result<()> {
    if params.is_empty() {
        return Err(Error::Empty("parameter vector"));
    }
    let mut bytes = Vec::with_capacity(20 + params.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&params.layout().arch_hash().to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`]; the stored architecture
/// hash and parameter count must match `layout`.
pub fn load_params(path: impl AsRef<Path>, layout: &Layout) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    if bytes.len() < 20 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a DEQP checkpoint",
            path.display()
        )));
    }
    let hash = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if hash != layout.arch_hash() {
        return Err(Error::Checkpoint(format!(
            "architecture hash mismatch: checkpoint {hash:#018x}, expected {:#018x}",
            layout.arch_hash()
        )));
    }
    if count != layout.total_len() || count == 0 {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint {count}, expected {}",
            layout.total_len()
        )));
    }
    if bytes.len() != 20 + 8 * count {
        return Err(Error::Checkpoint("truncated checkpoint payload".into()));
    }
    let data = bytes[20..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ParamVector::new(layout.clone(), data)
}

/// Scalar-output convolutional regularizer: three convolutions with a
/// residual skip, global mean pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarNetArch {
    /// Width of the two hidden convolution layers.
    pub hidden: usize,
    /// Channels entering the pooling stage.
    pub feat: usize,
    /// Softplus sharpness.
    pub beta: f64,
}

impl Default for ScalarNetArch {
    fn default() -> Self {
        Self {
            hidden: 16,
            feat: 8,
            beta: DEFAULT_BETA,
        }
    }
}

impl ScalarNetArch {
    pub fn layout(&self) -> Layout {
        let h = self.hidden;
        let f = self.feat;
        let desc = format!("scalar_net(hidden={h},feat={f},beta={})", self.beta);
        Layout::build(
            &desc,
            &[
                ("conv1.weight".into(), vec![h, 1, 3, 3]),
                ("conv1.bias".into(), vec![h]),
                ("conv2.weight".into(), vec![h, h, 3, 3]),
                ("conv2.bias".into(), vec![h]),
                ("conv3.weight".into(), vec![f, h, 3, 3]),
                ("conv3.bias".into(), vec![f]),
                ("head.weight".into(), vec![f]),
                ("head.bias".into(), vec![1]),
            ],
        )
    }

    /// He-style Gaussian initialization; the head is scaled by 0.1 so the
    /// fresh regularizer starts near-neutral.
    pub fn init_params(&self, seed: Seed) -> ParamVector {
        init_from_layout(self.layout(), seed, &["head.weight"])
    }
}

/// Residual denoiser regularizer `R_θ(x) = ½‖x - N_θ(x)‖²` where `N_θ` is a
/// chain of 3x3 convolutions with softplus activations and a global residual
/// connection.
#[derive(Debug, Clone, PartialEq)]
pub struct RedArch {
    /// Hidden width of the denoiser.
    pub width: usize,
    /// Number of convolution layers (at least 2).
    pub depth: usize,
    /// Softplus sharpness.
    pub beta: f64,
}

impl Default for RedArch {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 5,
            beta: DEFAULT_BETA,
        }
    }
}

impl RedArch {
    pub fn layout(&self) -> Layout {
        assert!(self.depth >= 2, "denoiser needs at least two layers");
        let w = self.width;
        let desc = format!("red(width={w},depth={},beta={})", self.depth, self.beta);
        let mut tensors = Vec::new();
        for l in 0..self.depth {
            let (ci, co) = if l == 0 {
                (1, w)
            } else if l == self.depth - 1 {
                (w, 1)
            } else {
                (w, w)
            };
            tensors.push((format!("conv{}.weight", l + 1), vec![co, ci, 3, 3]));
            tensors.push((format!("conv{}.bias", l + 1), vec![co]));
        }
        Layout::build(&desc, &tensors)
    }

    /// He-style Gaussian initialization with the final layer scaled by 0.1,
    /// so `N_θ(x) ≈ x` and early fixed-point solves resemble plain mirror
    /// descent on the fidelity.
    pub fn init_params(&self, seed: Seed) -> ParamVector {
        let last = format!("conv{}.weight", self.depth);
        init_from_layout(self.layout(), seed, &[last.as_str()])
    }
}

fn init_from_layout(layout: Layout, seed: Seed, damped: &[&str]) -> ParamVector {
    let mut rng = seed.rng();
    let mut data = vec![0.0; layout.total_len()];
    for e in layout.entries() {
        if e.name.ends_with(".bias") {
            continue; // biases start at zero
        }
        let fan_in: usize = if e.shape.len() == 4 {
            e.shape[1] * e.shape[2] * e.shape[3]
        } else {
            e.shape.iter().product()
        };
        let mut std = (2.0 / fan_in as f64).sqrt();
        if damped.contains(&e.name.as_str()) {
            std *= 0.1;
        }
        for v in &mut data[e.offset..e.offset + e.len] {
            *v = std * normal_f64(&mut rng);
        }
    }
    ParamVector::new(layout, data).expect("layout sizes are consistent")
}

/// Cotangent for [`Regularizer::vjp_params`]: seed either the scalar value
/// output or the denoiser image output.
#[derive(Debug, Clone)]
pub enum Cotangent {
    Value(f64),
    Denoised(Image),
}

/// One recorded evaluation of a regularizer: the value plus enough state to
/// replay the backward pass without repeating the forward one. Single-use
/// and single-threaded.
pub enum Recording {
    /// Closed-form kinds carry value and gradient directly.
    Analytic { value: f64, grad: Image },
    /// Learnable kinds keep one tape per channel.
    Taped {
        value: f64,
        shape: (usize, usize, usize),
        parts: Vec<(Graph, NodeId, NodeId)>,
    },
}

impl Recording {
    pub fn value(&self) -> f64 {
        match self {
            Recording::Analytic { value, .. } | Recording::Taped { value, .. } => *value,
        }
    }

    /// Consumes the recording and yields `∇_x R(x)` at the recorded point.
    pub fn into_grad_x(self) -> Result<Image> {
        match self {
            Recording::Analytic { grad, .. } => Ok(grad),
            Recording::Taped {
                shape,
                parts,
                ..
            } => {
                let mut channels = Vec::with_capacity(parts.len());
                for (mut g, input, root) in parts {
                    let bp = g.backward(root, None, &[input], false);
                    channels.push(g.gradient_of(&bp, input).into_raw_vec_and_offset().0);
                }
                Image::from_channel_vecs(shape.0, shape.1, channels)
            }
        }
    }
}

/// A regularization functional with value, input-gradient and parameter-VJP
/// capabilities.
#[derive(Debug, Clone)]
pub enum Regularizer {
    /// Identically zero (plain maximum-likelihood solves).
    Zero,
    /// `λ·TV_ε(x)`.
    SmoothedTv { lambda: f64, eps: f64 },
    /// Scalar network evaluated directly as `R_θ(x)`.
    ScalarNet {
        arch: ScalarNetArch,
        params: ParamVector,
    },
    /// `½‖x - N_θ(x)‖²` with a learnable denoiser `N_θ`.
    Red { arch: RedArch, params: ParamVector },
}

impl Regularizer {
    pub fn smoothed_tv(lambda: f64) -> Self {
        Regularizer::SmoothedTv {
            lambda,
            eps: DEFAULT_TV_EPS,
        }
    }

    pub fn scalar_net(arch: ScalarNetArch, params: ParamVector) -> Result<Self> {
        if params.layout().arch_hash() != arch.layout().arch_hash() {
            return Err(Error::LayoutMismatch(
                "parameters were built for a different scalar-net architecture".into(),
            ));
        }
        assert_smooth_whitelist();
        Ok(Regularizer::ScalarNet { arch, params })
    }

    pub fn red(arch: RedArch, params: ParamVector) -> Result<Self> {
        if params.layout().arch_hash() != arch.layout().arch_hash() {
            return Err(Error::LayoutMismatch(
                "parameters were built for a different denoiser architecture".into(),
            ));
        }
        assert_smooth_whitelist();
        Ok(Regularizer::Red { arch, params })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Regularizer::Zero => "zero",
            Regularizer::SmoothedTv { .. } => "smoothed_tv",
            Regularizer::ScalarNet { .. } => "scalar_net",
            Regularizer::Red { .. } => "red",
        }
    }

    pub fn params(&self) -> Option<&ParamVector> {
        match self {
            Regularizer::ScalarNet { params, .. } | Regularizer::Red { params, .. } => {
                Some(params)
            }
            _ => None,
        }
    }

    pub fn set_params(&mut self, new: ParamVector) -> Result<()> {
        match self {
            Regularizer::ScalarNet { params, .. } | Regularizer::Red { params, .. } => {
                if params.layout().arch_hash() != new.layout().arch_hash() {
                    return Err(Error::LayoutMismatch("layout hash mismatch".into()));
                }
                *params = new;
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "this regularizer has no parameters".into(),
            )),
        }
    }

    /// `R(x)`.
    pub fn value(&self, x: &Image) -> Result<f64> {
        match self {
            Regularizer::Zero => Ok(0.0),
            Regularizer::SmoothedTv { lambda, eps } => Ok(lambda * tv_smoothed_value(x, *eps)?),
            Regularizer::ScalarNet { arch, params } => {
                let mut total = 0.0;
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = ScalarNetTape::record(&mut g, arch, params, x, ch);
                    total += g.scalar(t.out);
                }
                Ok(total)
            }
            Regularizer::Red { arch, params } => {
                let mut total = 0.0;
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = RedTape::record(&mut g, arch, params, x, ch);
                    total += g.scalar(t.value);
                }
                Ok(total)
            }
        }
    }

    /// `∇_x R(x)` by reverse mode (analytic for TV).
    pub fn grad_x(&self, x: &Image) -> Result<Image> {
        self.record(x)?.into_grad_x()
    }

    /// Records one forward evaluation at `x` as a reusable tape. The value
    /// is available immediately; the input gradient replays the same tape
    /// backward instead of re-running the forward pass.
    pub fn record(&self, x: &Image) -> Result<Recording> {
        match self {
            Regularizer::Zero => Ok(Recording::Analytic {
                value: 0.0,
                grad: Image::zeros(x.height(), x.width(), x.channels()),
            }),
            Regularizer::SmoothedTv { lambda, eps } => Ok(Recording::Analytic {
                value: lambda * tv_smoothed_value(x, *eps)?,
                grad: tv_smoothed_grad(x, *eps)?.scaled(*lambda)?,
            }),
            Regularizer::ScalarNet { arch, params } => {
                let mut value = 0.0;
                let mut parts = Vec::with_capacity(x.channels());
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = ScalarNetTape::record(&mut g, arch, params, x, ch);
                    value += g.scalar(t.out);
                    parts.push((g, t.input, t.out));
                }
                Ok(Recording::Taped {
                    value,
                    shape: x.shape(),
                    parts,
                })
            }
            Regularizer::Red { arch, params } => {
                let mut value = 0.0;
                let mut parts = Vec::with_capacity(x.channels());
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = RedTape::record(&mut g, arch, params, x, ch);
                    value += g.scalar(t.value);
                    parts.push((g, t.input, t.value));
                }
                Ok(Recording::Taped {
                    value,
                    shape: x.shape(),
                    parts,
                })
            }
        }
    }

    /// Parameter cotangent of one recorded evaluation at `x`.
    pub fn vjp_params(&self, x: &Image, cotangent: &Cotangent) -> Result<ParamVector> {
        let params = self.params().ok_or_else(|| {
            Error::InvalidArgument("vjp_params requires a learnable regularizer".into())
        })?;
        let layout = params.layout().clone();
        let mut acc = ParamVector::zeros(layout.clone());
        match (self, cotangent) {
            (Regularizer::ScalarNet { arch, params }, Cotangent::Value(c)) => {
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = ScalarNetTape::record(&mut g, arch, params, x, ch);
                    let seed = g.constant(ArrayD::from_elem(vec![1], *c));
                    let bp = g.backward(t.out, Some(seed), &[], true);
                    accumulate_params(&g, &bp, &layout, &mut acc)?;
                }
                Ok(acc)
            }
            (Regularizer::Red { arch, params }, Cotangent::Value(c)) => {
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = RedTape::record(&mut g, arch, params, x, ch);
                    let seed = g.constant(ArrayD::from_elem(vec![1], *c));
                    let bp = g.backward(t.value, Some(seed), &[], true);
                    accumulate_params(&g, &bp, &layout, &mut acc)?;
                }
                Ok(acc)
            }
            (Regularizer::Red { arch, params }, Cotangent::Denoised(u)) => {
                x.check_same_shape(u)?;
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = RedTape::record(&mut g, arch, params, x, ch);
                    let seed = g.constant(channel_tensor(u, ch));
                    let bp = g.backward(t.denoised, Some(seed), &[], true);
                    accumulate_params(&g, &bp, &layout, &mut acc)?;
                }
                Ok(acc)
            }
            (Regularizer::ScalarNet { .. }, Cotangent::Denoised(_)) => Err(
                Error::InvalidArgument("scalar networks have no denoiser output".into()),
            ),
            _ => unreachable!("non-learnable kinds are rejected above"),
        }
    }

    /// `∇_θ ⟨∇_x R_θ(x), w⟩`: the parameter gradient of the input-gradient
    /// field contracted with `w`. This is the quantity training needs when a
    /// layer applies `∇R_θ` rather than `R_θ` itself; it is computed by a
    /// second reverse sweep over the extended tape.
    pub fn vjp_params_of_grad(&self, x: &Image, w: &Image) -> Result<ParamVector> {
        Ok(self.vjp_params_of_grad_counted(x, w)?.0)
    }

    /// [`Regularizer::vjp_params_of_grad`] plus the number of tape nodes the
    /// sweeps recorded; the count depends only on the architecture and image
    /// size, which is what makes training memory constant.
    pub fn vjp_params_of_grad_counted(&self, x: &Image, w: &Image) -> Result<(ParamVector, usize)> {
        x.check_same_shape(w)?;
        let params = self.params().ok_or_else(|| {
            Error::InvalidArgument("vjp_params_of_grad requires a learnable regularizer".into())
        })?;
        let layout = params.layout().clone();
        let mut acc = ParamVector::zeros(layout.clone());
        let mut tape_nodes = 0;
        for ch in 0..x.channels() {
            let mut g = Graph::new();
            let (root, input) = match self {
                Regularizer::ScalarNet { arch, params } => {
                    let t = ScalarNetTape::record(&mut g, arch, params, x, ch);
                    (t.out, t.input)
                }
                Regularizer::Red { arch, params } => {
                    let t = RedTape::record(&mut g, arch, params, x, ch);
                    (t.value, t.input)
                }
                _ => unreachable!("non-learnable kinds are rejected above"),
            };
            let bp = g.backward(root, None, &[input], false);
            let gx = bp.cotangent(input).ok_or_else(|| {
                Error::InvalidArgument("regularizer does not depend on its input".into())
            })?;
            let wnode = g.constant(channel_tensor(w, ch));
            let s = g.dot(gx, wnode);
            let bp2 = g.backward(s, None, &[], true);
            accumulate_params(&g, &bp2, &layout, &mut acc)?;
            tape_nodes += g.len();
        }
        Ok((acc, tape_nodes))
    }

    /// Hessian-vector product `∇²R(x)·v`, exact via a second reverse sweep
    /// (analytic TV uses central differences of its analytic gradient).
    pub fn hessian_vector_product(&self, x: &Image, v: &Image) -> Result<Image> {
        x.check_same_shape(v)?;
        match self {
            Regularizer::Zero => Ok(Image::zeros(x.height(), x.width(), x.channels())),
            Regularizer::SmoothedTv { .. } => {
                let h = 1e-6;
                let gp = self.grad_x(&x.add(&v.scaled(h)?)?)?;
                let gm = self.grad_x(&x.sub(&v.scaled(h)?)?)?;
                gp.sub(&gm)?.scaled(1.0 / (2.0 * h))
            }
            Regularizer::ScalarNet { .. } | Regularizer::Red { .. } => {
                let mut channels = Vec::with_capacity(x.channels());
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let (root, input) = match self {
                        Regularizer::ScalarNet { arch, params } => {
                            let t = ScalarNetTape::record(&mut g, arch, params, x, ch);
                            (t.out, t.input)
                        }
                        Regularizer::Red { arch, params } => {
                            let t = RedTape::record(&mut g, arch, params, x, ch);
                            (t.value, t.input)
                        }
                        _ => unreachable!(),
                    };
                    let bp = g.backward(root, None, &[input], false);
                    let gx = bp.cotangent(input).expect("input reachable");
                    let vnode = g.constant(channel_tensor(v, ch));
                    let s = g.dot(gx, vnode);
                    let bp2 = g.backward(s, None, &[input], false);
                    channels.push(g.gradient_of(&bp2, input).into_raw_vec_and_offset().0);
                }
                Image::from_channel_vecs(x.height(), x.width(), channels)
            }
        }
    }

    /// Denoiser output `N_θ(x)` (residual-denoiser kind only).
    pub fn denoiser_apply(&self, x: &Image) -> Result<Image> {
        match self {
            Regularizer::Red { arch, params } => {
                let mut channels = Vec::with_capacity(x.channels());
                for ch in 0..x.channels() {
                    let mut g = Graph::new();
                    let t = RedTape::record(&mut g, arch, params, x, ch);
                    channels.push(g.value(t.denoised).to_owned().into_raw_vec_and_offset().0);
                }
                Image::from_channel_vecs(x.height(), x.width(), channels)
            }
            _ => Err(Error::InvalidArgument(
                "denoiser_apply requires the residual-denoiser kind".into(),
            )),
        }
    }

    /// Number of learnable parameters (zero for fixed kinds).
    pub fn n_params(&self) -> usize {
        self.params().map_or(0, ParamVector::len)
    }

    /// Graph nodes recorded by one forward evaluation on `x` (learnable
    /// kinds); used to demonstrate constant-memory training.
    pub fn tape_len(&self, x: &Image) -> Result<usize> {
        match self {
            Regularizer::ScalarNet { arch, params } => {
                let mut g = Graph::new();
                ScalarNetTape::record(&mut g, arch, params, x, 0);
                Ok(g.len())
            }
            Regularizer::Red { arch, params } => {
                let mut g = Graph::new();
                RedTape::record(&mut g, arch, params, x, 0);
                Ok(g.len())
            }
            _ => Ok(0),
        }
    }
}

/// The primitive whitelist: all smooth. Non-smooth projections live outside
/// the learnable path, so any recorded network is C-infinity.
fn assert_smooth_whitelist() {
    // The tape exposes exactly: conv (three adjoint forms), softplus,
    // logistic, elementwise mul/add/sub/scale, channel pooling, dot. Each is
    // real-analytic; nothing piecewise is reachable from the builders used
    // here. The projection applied by the solver is handled outside the tape.
}

fn channel_tensor(x: &Image, ch: usize) -> ArrayD<f64> {
    ArrayD::from_shape_vec(vec![1, x.height(), x.width()], x.channel_to_vec(ch))
        .expect("channel buffer shape")
}

fn accumulate_params(
    g: &Graph,
    bp: &crate::tape::Backprop,
    layout: &Layout,
    acc: &mut ParamVector,
) -> Result<()> {
    let flat = g.param_gradient(bp, layout.total_len(), |slot| layout.entries()[slot].offset);
    let add = ParamVector::new(layout.clone(), flat)?;
    acc.add_scaled(&add, 1.0)
}

fn param_node(g: &mut Graph, params: &ParamVector, layout: &Layout, slot: usize) -> NodeId {
    let e = &layout.entries()[slot];
    let v = ArrayD::from_shape_vec(
        e.shape.clone(),
        params.data()[e.offset..e.offset + e.len].to_vec(),
    )
    .expect("layout entry shape");
    g.param(slot, v)
}

struct ScalarNetTape {
    input: NodeId,
    out: NodeId,
}

impl ScalarNetTape {
    fn record(
        g: &mut Graph,
        arch: &ScalarNetArch,
        params: &ParamVector,
        x: &Image,
        channel: usize,
    ) -> Self {
        let layout = params.layout().clone();
        let beta = arch.beta;
        let input = g.input(channel_tensor(x, channel));
        let w1 = param_node(g, params, &layout, 0);
        let b1 = param_node(g, params, &layout, 1);
        let w2 = param_node(g, params, &layout, 2);
        let b2 = param_node(g, params, &layout, 3);
        let w3 = param_node(g, params, &layout, 4);
        let b3 = param_node(g, params, &layout, 5);
        let wh = param_node(g, params, &layout, 6);
        let bh = param_node(g, params, &layout, 7);

        let c1 = g.conv(input, w1, Some(b1));
        let h1 = g.softplus(c1, beta);
        let c2 = g.conv(h1, w2, Some(b2));
        let s2 = g.softplus(c2, beta);
        let h2 = g.add(s2, h1); // residual skip
        let c3 = g.conv(h2, w3, Some(b3));
        let h3 = g.softplus(c3, beta);
        let pooled = g.chan_sum(h3);
        let mean = g.scale(pooled, 1.0 / (x.height() * x.width()) as f64);
        let proj = g.dot(mean, wh);
        let out = g.add(proj, bh);
        Self { input, out }
    }
}

struct RedTape {
    input: NodeId,
    denoised: NodeId,
    value: NodeId,
}

impl RedTape {
    fn record(
        g: &mut Graph,
        arch: &RedArch,
        params: &ParamVector,
        x: &Image,
        channel: usize,
    ) -> Self {
        let layout = params.layout().clone();
        let beta = arch.beta;
        let input = g.input(channel_tensor(x, channel));
        let mut h = input;
        for l in 0..arch.depth {
            let w = param_node(g, params, &layout, 2 * l);
            let b = param_node(g, params, &layout, 2 * l + 1);
            let c = g.conv(h, w, Some(b));
            h = if l + 1 == arch.depth {
                c // final layer is linear
            } else {
                g.softplus(c, beta)
            };
        }
        let denoised = g.add(input, h); // global residual connection
        let d = g.sub(input, denoised);
        let sq = g.dot(d, d);
        let value = g.scale(sq, 0.5);
        Self {
            input,
            denoised,
            value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::uniform_f64;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Seed(seed).rng();
        let data = (0..h * w).map(|_| 0.05 + 0.9 * uniform_f64(&mut rng)).collect();
        Image::from_vec(h, w, 1, data).unwrap()
    }

    fn small_scalar_net(seed: u64) -> Regularizer {
        let arch = ScalarNetArch {
            hidden: 4,
            feat: 3,
            beta: 10.0,
        };
        let params = arch.init_params(Seed(seed));
        Regularizer::scalar_net(arch, params).unwrap()
    }

    fn small_red(seed: u64) -> Regularizer {
        let arch = RedArch {
            width: 4,
            depth: 3,
            beta: 10.0,
        };
        let params = arch.init_params(Seed(seed));
        Regularizer::red(arch, params).unwrap()
    }

    #[test]
    fn softplus_matches_reference_values() {
        assert!((softplus(0.0, 100.0) - 0.006931471805599453).abs() < 1e-15);
        assert!((softplus(1.0, 100.0) - 1.0).abs() < 1e-9);
        assert_eq!(softplus_derivative(0.0, 3.0), 0.5);
        assert_eq!(softplus_derivative(0.0, 250.0), 0.5);
    }

    #[test]
    fn tv_of_constant_is_area_times_sqrt_eps() {
        let x = Image::constant(8, 8, 1, 0.4).unwrap();
        let v = tv_smoothed_value(&x, 1e-6).unwrap();
        assert!((v - 64.0 * 1e-3).abs() < 1e-12);
        let g = tv_smoothed_grad(&x, 1e-6).unwrap();
        assert!(g.linf_norm() < 1e-12);
    }

    #[test]
    fn tv_matches_direct_summation_oracle() {
        let x = Image::from_vec(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let eps = 1e-6;
        // direct evaluation with circular wrap over all 4 pixels
        let mut want = 0.0;
        for r in 0..2usize {
            for c in 0..2usize {
                let v = x.at(r, c, 0);
                let dh = x.at(r, (c + 1) % 2, 0) - v;
                let dv = x.at((r + 1) % 2, c, 0) - v;
                want += (dh * dh + dv * dv + eps).sqrt();
            }
        }
        let got = tv_smoothed_value(&x, eps).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn tv_gradient_matches_central_differences() {
        let x = random_image(8, 8, 5);
        let g = tv_smoothed_grad(&x, 1e-6).unwrap();
        let h = 1e-6;
        for idx in (0..64).step_by(7) {
            let mut xp = x.as_slice().to_vec();
            let mut xm = xp.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let fp = tv_smoothed_value(&Image::from_vec(8, 8, 1, xp).unwrap(), 1e-6).unwrap();
            let fm = tv_smoothed_value(&Image::from_vec(8, 8, 1, xm).unwrap(), 1e-6).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice()[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3),
                "pixel {idx}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_parameters_make_scalar_net_input_independent() {
        let arch = ScalarNetArch {
            hidden: 4,
            feat: 3,
            beta: 10.0,
        };
        let params = ParamVector::zeros(arch.layout());
        let reg = Regularizer::scalar_net(arch, params).unwrap();
        let a = reg.value(&random_image(6, 6, 1)).unwrap();
        let b = reg.value(&random_image(6, 6, 2)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        // zero head exactly kills the pooled features
        assert_eq!(a, 0.0);
    }

    #[test]
    fn scalar_net_value_is_finite_on_unit_box_inputs() {
        for seed in 0..5 {
            let reg = small_scalar_net(100 + seed);
            let v = reg.value(&random_image(8, 8, 200 + seed)).unwrap();
            assert!(v.is_finite());
        }
    }

    #[test]
    fn learned_gradients_match_finite_differences() {
        for (name, reg) in [("scalar", small_scalar_net(7)), ("red", small_red(8))] {
            let x = random_image(6, 6, 9);
            let g = reg.grad_x(&x).unwrap();
            let h = 1e-5;
            for idx in (0..36).step_by(5) {
                let mut xp = x.as_slice().to_vec();
                let mut xm = xp.clone();
                xp[idx] += h;
                xm[idx] -= h;
                let fp = reg.value(&Image::from_vec(6, 6, 1, xp).unwrap()).unwrap();
                let fm = reg.value(&Image::from_vec(6, 6, 1, xm).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = g.as_slice()[idx];
                assert!(
                    (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-4),
                    "{name} pixel {idx}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn perfect_denoiser_gives_zero_value() {
        let arch = RedArch {
            width: 4,
            depth: 3,
            beta: 10.0,
        };
        let mut params = arch.init_params(Seed(3));
        // zero the final layer: N(x) = x exactly through the global residual
        let layout = arch.layout().clone();
        let e = layout.entry("conv3.weight").unwrap().clone();
        params.data_mut()[e.offset..e.offset + e.len].fill(0.0);
        let eb = layout.entry("conv3.bias").unwrap().clone();
        params.data_mut()[eb.offset..eb.offset + eb.len].fill(0.0);
        let reg = Regularizer::red(arch, params).unwrap();
        let x = random_image(6, 6, 4);
        assert_eq!(reg.denoiser_apply(&x).unwrap(), x);
        assert_eq!(reg.value(&x).unwrap(), 0.0);
    }

    #[test]
    fn red_value_is_nonnegative() {
        let reg = small_red(11);
        for seed in 0..5 {
            assert!(reg.value(&random_image(7, 7, 300 + seed)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn vjp_params_passes_directional_checks() {
        for (name, reg) in [("scalar", small_scalar_net(13)), ("red", small_red(14))] {
            let x = random_image(5, 5, 15);
            let vjp = reg.vjp_params(&x, &Cotangent::Value(1.0)).unwrap();
            let params = reg.params().unwrap().clone();
            let mut rng = Seed(16).rng();
            for _ in 0..4 {
                let dir: Vec<f64> = (0..params.len())
                    .map(|_| uniform_f64(&mut rng) - 0.5)
                    .collect();
                let h = 1e-6;
                let mut reg_p = reg.clone();
                let mut data = params.data().to_vec();
                for (d, v) in data.iter_mut().zip(&dir) {
                    *d += h * v;
                }
                reg_p
                    .set_params(ParamVector::new(params.layout().clone(), data).unwrap())
                    .unwrap();
                let mut reg_m = reg.clone();
                let mut data = params.data().to_vec();
                for (d, v) in data.iter_mut().zip(&dir) {
                    *d -= h * v;
                }
                reg_m
                    .set_params(ParamVector::new(params.layout().clone(), data).unwrap())
                    .unwrap();
                let fd = (reg_p.value(&x).unwrap() - reg_m.value(&x).unwrap()) / (2.0 * h);
                let an: f64 = vjp.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!(
                    (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-4),
                    "{name}: directional {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn vjp_params_is_linear_in_the_cotangent() {
        let reg = small_red(17);
        let x = random_image(5, 5, 18);
        let zero = reg.vjp_params(&x, &Cotangent::Value(0.0)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let one = reg.vjp_params(&x, &Cotangent::Value(1.0)).unwrap();
        let three = reg.vjp_params(&x, &Cotangent::Value(3.0)).unwrap();
        for (a, b) in one.data().iter().zip(three.data()) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn vjp_of_gradient_matches_finite_differences() {
        for (name, reg) in [("scalar", small_scalar_net(19)), ("red", small_red(20))] {
            let x = random_image(5, 5, 21);
            let w = random_image(5, 5, 22);
            let vjp = reg.vjp_params_of_grad(&x, &w).unwrap();
            let params = reg.params().unwrap().clone();
            let mut rng = Seed(23).rng();
            for _ in 0..3 {
                let dir: Vec<f64> = (0..params.len())
                    .map(|_| uniform_f64(&mut rng) - 0.5)
                    .collect();
                let h = 1e-6;
                let eval = |sign: f64| -> f64 {
                    let mut r = reg.clone();
                    let mut data = params.data().to_vec();
                    for (d, v) in data.iter_mut().zip(&dir) {
                        *d += sign * h * v;
                    }
                    r.set_params(ParamVector::new(params.layout().clone(), data).unwrap())
                        .unwrap();
                    r.grad_x(&x).unwrap().dot(&w).unwrap()
                };
                let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
                let an: f64 = vjp.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!(
                    (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-4),
                    "{name}: grad-vjp directional {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let reg = small_red(25);
        let x = random_image(5, 5, 26);
        let v = random_image(5, 5, 27);
        let hv = reg.hessian_vector_product(&x, &v).unwrap();
        let h = 1e-6;
        let gp = reg.grad_x(&x.add(&v.scaled(h).unwrap()).unwrap()).unwrap();
        let gm = reg.grad_x(&x.sub(&v.scaled(h).unwrap()).unwrap()).unwrap();
        let fd = gp.sub(&gm).unwrap().scaled(1.0 / (2.0 * h)).unwrap();
        for (a, b) in hv.as_slice().iter().zip(fd.as_slice()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-4));
        }
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_wrong_arch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.deqp");
        let arch = RedArch {
            width: 4,
            depth: 3,
            beta: 10.0,
        };
        let params = arch.init_params(Seed(30));
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path, &arch.layout()).unwrap();
        assert_eq!(params, loaded);

        let other = ScalarNetArch {
            hidden: 4,
            feat: 3,
            beta: 10.0,
        };
        assert!(load_params(&path, &other.layout()).is_err());

        let deeper = RedArch {
            width: 4,
            depth: 4,
            beta: 10.0,
        };
        assert!(load_params(&path, &deeper.layout()).is_err());
    }

    #[test]
    fn empty_parameter_vectors_cannot_be_checkpointed() {
        let dir = tempfile::tempdir().unwrap();
        let empty = ParamVector::new(Layout::build("empty", &[]), Vec::new()).unwrap();
        assert!(save_params(&empty, dir.path().join("e.deqp")).is_err());
    }

    #[test]
    fn param_init_is_deterministic() {
        let arch = RedArch::default();
        assert_eq!(arch.init_params(Seed(1)), arch.init_params(Seed(1)));
        assert_ne!(arch.init_params(Seed(1)), arch.init_params(Seed(2)));
        // final layer is damped relative to the middle layers
        let p = arch.init_params(Seed(1));
        let last = p.slice("conv5.weight").unwrap();
        let mid = p.slice("conv3.weight").unwrap();
        let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        assert!(rms(last) < 0.3 * rms(mid));
    }
}
