//! Minimal reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] records one forward evaluation as a list of primitive
//! operations with cached values (a tape). [`Graph::backward`] replays the
//! tape in reverse and *appends the vector-Jacobian products as new tape
//! nodes*, so gradients are themselves differentiable expressions. This is
//! what lets the trainer take parameter gradients of quantities like
//! `⟨∇_x R_θ(x), w⟩`, which mixes second derivatives of the regularizer.
//!
//! The primitive set is a closed family under differentiation:
//! circular 3x3-style convolutions (data, adjoint and weight-gradient forms),
//! softplus/logistic, elementwise arithmetic, channel pooling and dot
//! products. Every primitive is smooth, so any network expressed on the tape
//! is infinitely differentiable in both its input and its parameters.

use ndarray::ArrayD;

pub type NodeId = usize;

/// Past this the neglected softplus/logistic tail is below one ulp of the
/// result.
const SATURATION: f64 = 40.0;

/// Numerically stable `softplus_β(x) = (1/β)·log(1 + exp(βx))`.
///
/// For large `βx` this evaluates as `x + log1p(exp(-βx))/β`, which degrades
/// gracefully to `x` instead of overflowing; deep in either saturated branch
/// the transcendentals are skipped entirely.
pub(crate) fn softplus_stable(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    if t > SATURATION {
        x
    } else if t > 0.0 {
        x + (-t).exp().ln_1p() / beta
    } else if t < -745.0 {
        0.0
    } else {
        t.exp().ln_1p() / beta
    }
}

/// Logistic `σ(βx)`, the derivative of `softplus_β`.
pub(crate) fn logistic_stable(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    if t > SATURATION {
        1.0
    } else if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else if t < -745.0 {
        0.0
    } else {
        let e = t.exp();
        e / (1.0 + e)
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

/// `Σ_c a[c] * b[(c + shift) mod n]` with `0 <= shift < n`.
#[inline]
fn dot_wrapped(a: &[f64], b: &[f64], shift: usize) -> f64 {
    let n = a.len();
    let k = n - shift;
    let mut acc = 0.0;
    for (x, y) in a[..k].iter().zip(&b[shift..]) {
        acc += x * y;
    }
    for (x, y) in a[k..].iter().zip(&b[..shift]) {
        acc += x * y;
    }
    acc
}

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input leaf (an image channel).
    Input,
    /// Parameter leaf; `slot` indexes the caller's layout.
    Param { slot: usize },
    /// Non-differentiable constant.
    Const,
    /// Circular cross-correlation `y[o] = b[o] + Σ_i W[o,i] ⋆ x[i]`,
    /// kernel anchored at its center (odd sizes only).
    ConvData {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// Adjoint of `ConvData` in the data argument.
    ConvAdj { g: NodeId, w: NodeId },
    /// Adjoint of `ConvData` in the weight argument:
    /// `W̄[o,i,p,q] = Σ_{s,t} g[o,s,t]·x[i, s+p-a, t+q-a]`.
    ConvWGrad { x: NodeId, g: NodeId },
    Softplus { x: NodeId, beta: f64 },
    Logistic { x: NodeId, beta: f64 },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Spatial sum per channel: `(c,h,w) -> (c)`.
    ChanSum { x: NodeId, h: usize, w: usize },
    /// Broadcast per channel: `(c) -> (c,h,w)`.
    ChanBroadcast { v: NodeId },
    /// `x * s` with `s` a scalar node.
    MulScalar { x: NodeId, s: NodeId },
    /// `Σ a⊙b` -> scalar node.
    Dot { a: NodeId, b: NodeId },
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// Result of one backward sweep: cotangent node per tape position (where one
/// was materialized).
pub struct Backprop {
    cot: Vec<Option<NodeId>>,
}

impl Backprop {
    pub fn cotangent(&self, id: NodeId) -> Option<NodeId> {
        self.cot.get(id).copied().flatten()
    }
}

/// A single-use recording of one forward evaluation plus any gradient
/// sweeps appended to it. Not shareable across threads mid-recording;
/// concurrent evaluations use separate graphs.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.as_slice().unwrap()[0]
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn slice(&self, id: NodeId) -> &[f64] {
        self.nodes[id]
            .value
            .as_slice()
            .expect("tape buffers are standard layout")
    }

    fn dims3(&self, id: NodeId) -> (usize, usize, usize) {
        let s = self.nodes[id].value.shape();
        assert_eq!(s.len(), 3, "expected a (c,h,w) tensor, got {s:?}");
        (s[0], s[1], s[2])
    }

    pub fn input(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(Op::Input, v)
    }

    pub fn param(&mut self, slot: usize, v: ArrayD<f64>) -> NodeId {
        self.push(Op::Param { slot }, v)
    }

    pub fn constant(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(Op::Const, v)
    }

    /// Circular correlation with bias; `x: (ci,h,w)`, `w: (co,ci,kh,kw)` with
    /// odd kernel sides, `b: (co)`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (ci, h, ww) = self.dims3(x);
        let wshape = self.nodes[w].value.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv weights must be 4-d");
        let (co, wci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(ci, wci, "conv input channels mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv kernels must be odd-sized");
        if let Some(b) = b {
            assert_eq!(self.nodes[b].value.len(), co, "conv bias length mismatch");
        }
        let value = {
            let xs = self.slice(x);
            let ws = self.slice(w);
            let bs = b.map(|b| self.slice(b));
            conv_data_kernel(xs, ci, h, ww, ws, co, kh, kw, bs)
        };
        self.push(
            Op::ConvData { x, w, b },
            ArrayD::from_shape_vec(vec![co, h, ww], value).unwrap(),
        )
    }

    fn conv_adj(&mut self, g: NodeId, w: NodeId) -> NodeId {
        let (co, h, ww) = self.dims3(g);
        let wshape = self.nodes[w].value.shape().to_vec();
        let (wco, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(co, wco, "conv adjoint channel mismatch");
        let value = {
            let gs = self.slice(g);
            let ws = self.slice(w);
            conv_adj_kernel(gs, co, h, ww, ws, ci, kh, kw)
        };
        self.push(
            Op::ConvAdj { g, w },
            ArrayD::from_shape_vec(vec![ci, h, ww], value).unwrap(),
        )
    }

    fn conv_wgrad(&mut self, x: NodeId, g: NodeId, kh: usize, kw: usize) -> NodeId {
        let (ci, h, ww) = self.dims3(x);
        let (co, gh, gw) = self.dims3(g);
        assert_eq!((h, ww), (gh, gw), "conv wgrad spatial mismatch");
        let value = {
            let xs = self.slice(x);
            let gs = self.slice(g);
            conv_wgrad_kernel(xs, ci, h, ww, gs, co, kh, kw)
        };
        self.push(
            Op::ConvWGrad { x, g },
            ArrayD::from_shape_vec(vec![co, ci, kh, kw], value).unwrap(),
        )
    }

    pub fn softplus(&mut self, x: NodeId, beta: f64) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| softplus_stable(v, beta));
        self.push(Op::Softplus { x, beta }, value)
    }

    pub fn logistic(&mut self, x: NodeId, beta: f64) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| logistic_stable(v, beta));
        self.push(Op::Logistic { x, beta }, value)
    }

    fn binary_value(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .as_slice()
            .unwrap()
            .iter()
            .zip(vb.as_slice().unwrap())
            .map(|(&x, &y)| f(x, y))
            .collect();
        ArrayD::from_shape_vec(va.shape().to_vec(), data).unwrap()
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x * y);
        self.push(Op::Mul { a, b }, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x + y);
        self.push(Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x - y);
        self.push(Op::Sub { a, b }, v)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t * c);
        self.push(Op::Scale { x, c }, v)
    }

    pub fn chan_sum(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let xs = self.slice(x);
        let mut out = vec![0.0; c];
        for ch in 0..c {
            out[ch] = xs[ch * h * w..(ch + 1) * h * w].iter().sum();
        }
        self.push(
            Op::ChanSum { x, h, w },
            ArrayD::from_shape_vec(vec![c], out).unwrap(),
        )
    }

    pub fn chan_broadcast(&mut self, v: NodeId, h: usize, w: usize) -> NodeId {
        let c = self.nodes[v].value.len();
        let vs = self.slice(v);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            out[ch * h * w..(ch + 1) * h * w].fill(vs[ch]);
        }
        self.push(
            Op::ChanBroadcast { v },
            ArrayD::from_shape_vec(vec![c, h, w], out).unwrap(),
        )
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.len(), 1, "scalar operand expected");
        let sv = self.scalar(s);
        let v = self.nodes[x].value.mapv(|t| t * sv);
        self.push(Op::MulScalar { x, s }, v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x * y).sum();
        self.push(
            Op::Dot { a, b },
            ArrayD::from_shape_vec(vec![1], vec![v]).unwrap(),
        )
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_shape_vec(vec![1], vec![v]).unwrap())
    }

    fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        match self.nodes[id].op {
            Op::Input | Op::Param { .. } | Op::Const => vec![],
            Op::ConvData { x, w, b } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::ConvAdj { g, w } => vec![g, w],
            Op::ConvWGrad { x, g, .. } => vec![x, g],
            Op::Softplus { x, .. } | Op::Logistic { x, .. } | Op::Scale { x, .. } => vec![x],
            Op::Mul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Dot { a, b } => {
                vec![a, b]
            }
            Op::ChanSum { x, .. } => vec![x],
            Op::ChanBroadcast { v, .. } => vec![v],
            Op::MulScalar { x, s } => vec![x, s],
        }
    }

    /// Reverse sweep from `root`. The seed cotangent defaults to 1 for a
    /// scalar root; pass one explicitly for vector-valued roots. Cotangents
    /// are materialized only along paths that reach `wrt` nodes or (with
    /// `wrt_params`) parameter leaves, and are appended to the tape so the
    /// result remains differentiable.
    pub fn backward(
        &mut self,
        root: NodeId,
        seed: Option<NodeId>,
        wrt: &[NodeId],
        wrt_params: bool,
    ) -> Backprop {
        let n = self.nodes.len();
        let mut matters = vec![false; n];
        for &id in wrt {
            matters[id] = true;
        }
        if wrt_params {
            for (id, node) in self.nodes.iter().enumerate() {
                if matches!(node.op, Op::Param { .. }) {
                    matters[id] = true;
                }
            }
        }
        for id in 0..n {
            if !matters[id] {
                matters[id] = self.inputs_of(id).iter().any(|&i| matters[i]);
            }
        }

        let seed_id = match seed {
            Some(s) => {
                assert_eq!(
                    self.nodes[s].value.shape(),
                    self.nodes[root].value.shape(),
                    "seed cotangent shape mismatch"
                );
                s
            }
            None => {
                assert_eq!(self.nodes[root].value.len(), 1, "scalar root expected");
                self.scalar_const(1.0)
            }
        };

        let mut pending: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        if matters[root] {
            pending[root].push(seed_id);
        }
        let mut cot: Vec<Option<NodeId>> = vec![None; n];
        for id in (0..n).rev() {
            if !matters[id] || pending[id].is_empty() {
                continue;
            }
            let pieces = std::mem::take(&mut pending[id]);
            let mut acc = pieces[0];
            for &p in &pieces[1..] {
                acc = self.add(acc, p);
            }
            cot[id] = Some(acc);
            self.emit_vjps(id, acc, &matters, &mut pending);
        }
        Backprop { cot }
    }

    fn emit_vjps(
        &mut self,
        id: NodeId,
        cot: NodeId,
        matters: &[bool],
        pending: &mut [Vec<NodeId>],
    ) {
        match self.nodes[id].op {
            Op::Input | Op::Param { .. } | Op::Const => {}
            Op::ConvData { x, w, b } => {
                if matters[x] {
                    let g = self.conv_adj(cot, w);
                    pending[x].push(g);
                }
                if matters[w] {
                    let ws = self.nodes[w].value.shape().to_vec();
                    let g = self.conv_wgrad(x, cot, ws[2], ws[3]);
                    pending[w].push(g);
                }
                if let Some(b) = b {
                    if matters[b] {
                        let g = self.chan_sum(cot);
                        pending[b].push(g);
                    }
                }
            }
            Op::ConvAdj { g, w } => {
                if matters[g] {
                    let back = self.conv(cot, w, None);
                    pending[g].push(back);
                }
                if matters[w] {
                    let ws = self.nodes[w].value.shape().to_vec();
                    let back = self.conv_wgrad(cot, g, ws[2], ws[3]);
                    pending[w].push(back);
                }
            }
            Op::ConvWGrad { x, g, .. } => {
                if matters[x] {
                    let back = self.conv_adj(g, cot);
                    pending[x].push(back);
                }
                if matters[g] {
                    let back = self.conv(x, cot, None);
                    pending[g].push(back);
                }
            }
            Op::Softplus { x, beta } => {
                if matters[x] {
                    let sig = self.logistic(x, beta);
                    let g = self.mul(cot, sig);
                    pending[x].push(g);
                }
            }
            Op::Logistic { x, beta } => {
                if matters[x] {
                    // σ' = β·σ·(1-σ), reusing this node's value as σ
                    let shape = self.nodes[id].value.shape().to_vec();
                    let ones = self.constant(ArrayD::from_elem(shape, 1.0));
                    let one_minus = self.sub(ones, id);
                    let prod = self.mul(id, one_minus);
                    let dsig = self.scale(prod, beta);
                    let g = self.mul(cot, dsig);
                    pending[x].push(g);
                }
            }
            Op::Mul { a, b } => {
                if matters[a] {
                    let g = self.mul(cot, b);
                    pending[a].push(g);
                }
                if matters[b] {
                    let g = self.mul(cot, a);
                    pending[b].push(g);
                }
            }
            Op::Add { a, b } => {
                if matters[a] {
                    pending[a].push(cot);
                }
                if matters[b] {
                    pending[b].push(cot);
                }
            }
            Op::Sub { a, b } => {
                if matters[a] {
                    pending[a].push(cot);
                }
                if matters[b] {
                    let g = self.scale(cot, -1.0);
                    pending[b].push(g);
                }
            }
            Op::Scale { x, c } => {
                if matters[x] {
                    let g = self.scale(cot, c);
                    pending[x].push(g);
                }
            }
            Op::ChanSum { x, h, w } => {
                if matters[x] {
                    let g = self.chan_broadcast(cot, h, w);
                    pending[x].push(g);
                }
            }
            Op::ChanBroadcast { v, .. } => {
                if matters[v] {
                    let g = self.chan_sum(cot);
                    pending[v].push(g);
                }
            }
            Op::MulScalar { x, s } => {
                if matters[x] {
                    let g = self.mul_scalar(cot, s);
                    pending[x].push(g);
                }
                if matters[s] {
                    let g = self.dot(x, cot);
                    pending[s].push(g);
                }
            }
            Op::Dot { a, b } => {
                if matters[a] {
                    let g = self.mul_scalar(b, cot);
                    pending[a].push(g);
                }
                if matters[b] {
                    let g = self.mul_scalar(a, cot);
                    pending[b].push(g);
                }
            }
        }
    }

    /// Gradient buffer for a node after a backward sweep (zeros when no
    /// cotangent reached it).
    pub fn gradient_of(&self, bp: &Backprop, id: NodeId) -> ArrayD<f64> {
        match bp.cotangent(id) {
            Some(c) => self.nodes[c].value.clone(),
            None => ArrayD::zeros(self.nodes[id].value.shape().to_vec()),
        }
    }

    /// Scatters parameter-leaf cotangents into a flat buffer of length
    /// `total`, using `offset_of(slot)` for placement.
    pub fn param_gradient(
        &self,
        bp: &Backprop,
        total: usize,
        offset_of: impl Fn(usize) -> usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; total];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param { slot } = node.op {
                if let Some(c) = bp.cotangent(id) {
                    let src = self.nodes[c].value.as_slice().unwrap();
                    let off = offset_of(slot);
                    out[off..off + src.len()].copy_from_slice(src);
                }
            }
        }
        out
    }
}

/// Copies one `h x w` channel into an `(h+2) x (w+2)` buffer with a
/// circular one-pixel halo, so 3x3 stencils need no wrap arithmetic.
fn pad_channel_3x3(x: &[f64], h: usize, w: usize, pad: &mut [f64]) {
    let pw = w + 2;
    for r in 0..h + 2 {
        let sr = (r + h - 1) % h;
        let src = &x[sr * w..(sr + 1) * w];
        let dst = &mut pad[r * pw..(r + 1) * pw];
        dst[1..=w].copy_from_slice(src);
        dst[0] = src[w - 1];
        dst[w + 1] = src[0];
    }
}

/// `out_row += Σ_{p,q} w9[3p+q] · padded(r+p, c+q)` over one output row.
#[inline]
fn stencil_row_3x3(out: &mut [f64], pad: &[f64], r: usize, pw: usize, w9: &[f64; 9]) {
    let w = out.len();
    let row = |p: usize, q: usize| &pad[(r + p) * pw + q..(r + p) * pw + q + w];
    let (a0, a1, a2) = (row(0, 0), row(0, 1), row(0, 2));
    let (b0, b1, b2) = (row(1, 0), row(1, 1), row(1, 2));
    let (c0, c1, c2) = (row(2, 0), row(2, 1), row(2, 2));
    for i in 0..w {
        out[i] += w9[0] * a0[i]
            + w9[1] * a1[i]
            + w9[2] * a2[i]
            + w9[3] * b0[i]
            + w9[4] * b1[i]
            + w9[5] * b2[i]
            + w9[6] * c0[i]
            + w9[7] * c1[i]
            + w9[8] * c2[i];
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_data_kernel(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; co * plane];
    if let Some(b) = bias {
        for o in 0..co {
            out[o * plane..(o + 1) * plane].fill(b[o]);
        }
    }
    if kh == 3 && kw == 3 {
        let pw = w + 2;
        let mut pads = vec![0.0; ci * (h + 2) * pw];
        for i in 0..ci {
            pad_channel_3x3(
                &x[i * plane..(i + 1) * plane],
                h,
                w,
                &mut pads[i * (h + 2) * pw..(i + 1) * (h + 2) * pw],
            );
        }
        for o in 0..co {
            for i in 0..ci {
                let w9: &[f64; 9] = wt[(o * ci + i) * 9..(o * ci + i) * 9 + 9]
                    .try_into()
                    .unwrap();
                let pad = &pads[i * (h + 2) * pw..(i + 1) * (h + 2) * pw];
                for r in 0..h {
                    stencil_row_3x3(
                        &mut out[o * plane + r * w..o * plane + (r + 1) * w],
                        pad,
                        r,
                        pw,
                        w9,
                    );
                }
            }
        }
        return out;
    }
    let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
    for o in 0..co {
        for i in 0..ci {
            let xin = &x[i * plane..(i + 1) * plane];
            for p in 0..kh {
                for q in 0..kw {
                    let weight = wt[((o * ci + i) * kh + p) * kw + q];
                    if weight == 0.0 {
                        continue;
                    }
                    let dy = p as isize - ay;
                    let dx = q as isize - ax;
                    let shift = dx.rem_euclid(w as isize) as usize;
                    for r in 0..h {
                        let sr = (r as isize + dy).rem_euclid(h as isize) as usize;
                        axpy_wrapped(
                            &mut out[o * plane + r * w..o * plane + (r + 1) * w],
                            &xin[sr * w..(sr + 1) * w],
                            shift,
                            weight,
                        );
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_adj_kernel(
    g: &[f64],
    co: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    ci: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; ci * plane];
    if kh == 3 && kw == 3 {
        // the adjoint is a 3x3 stencil on g with the kernel flipped
        let pw = w + 2;
        let mut pads = vec![0.0; co * (h + 2) * pw];
        for o in 0..co {
            pad_channel_3x3(
                &g[o * plane..(o + 1) * plane],
                h,
                w,
                &mut pads[o * (h + 2) * pw..(o + 1) * (h + 2) * pw],
            );
        }
        for i in 0..ci {
            for o in 0..co {
                let base = (o * ci + i) * 9;
                let mut w9 = [0.0; 9];
                for k in 0..9 {
                    w9[k] = wt[base + 8 - k];
                }
                let pad = &pads[o * (h + 2) * pw..(o + 1) * (h + 2) * pw];
                for r in 0..h {
                    stencil_row_3x3(
                        &mut out[i * plane + r * w..i * plane + (r + 1) * w],
                        pad,
                        r,
                        pw,
                        &w9,
                    );
                }
            }
        }
        return out;
    }
    let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
    for i in 0..ci {
        for o in 0..co {
            let gin = &g[o * plane..(o + 1) * plane];
            for p in 0..kh {
                for q in 0..kw {
                    let weight = wt[((o * ci + i) * kh + p) * kw + q];
                    if weight == 0.0 {
                        continue;
                    }
                    // reads g at (s - (p - ay), t - (q - ax))
                    let dy = ay - p as isize;
                    let dx = ax - q as isize;
                    let shift = dx.rem_euclid(w as isize) as usize;
                    for r in 0..h {
                        let sr = (r as isize + dy).rem_euclid(h as isize) as usize;
                        axpy_wrapped(
                            &mut out[i * plane + r * w..i * plane + (r + 1) * w],
                            &gin[sr * w..(sr + 1) * w],
                            shift,
                            weight,
                        );
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_wgrad_kernel(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    g: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; co * ci * kh * kw];
    if kh == 3 && kw == 3 {
        let pw = w + 2;
        let mut pads = vec![0.0; ci * (h + 2) * pw];
        for i in 0..ci {
            pad_channel_3x3(
                &x[i * plane..(i + 1) * plane],
                h,
                w,
                &mut pads[i * (h + 2) * pw..(i + 1) * (h + 2) * pw],
            );
        }
        for o in 0..co {
            let gin = &g[o * plane..(o + 1) * plane];
            for i in 0..ci {
                let pad = &pads[i * (h + 2) * pw..(i + 1) * (h + 2) * pw];
                let mut acc = [0.0f64; 9];
                for r in 0..h {
                    let grow = &gin[r * w..(r + 1) * w];
                    for p in 0..3 {
                        let prow = &pad[(r + p) * pw..(r + p) * pw + pw];
                        for q in 0..3 {
                            let mut s = 0.0;
                            for (gv, xv) in grow.iter().zip(&prow[q..q + w]) {
                                s += gv * xv;
                            }
                            acc[3 * p + q] += s;
                        }
                    }
                }
                out[(o * ci + i) * 9..(o * ci + i) * 9 + 9].copy_from_slice(&acc);
            }
        }
        return out;
    }
    let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
    for o in 0..co {
        let gin = &g[o * plane..(o + 1) * plane];
        for i in 0..ci {
            let xin = &x[i * plane..(i + 1) * plane];
            for p in 0..kh {
                for q in 0..kw {
                    let dy = p as isize - ay;
                    let dx = q as isize - ax;
                    let shift = dx.rem_euclid(w as isize) as usize;
                    let mut acc = 0.0;
                    for r in 0..h {
                        let sr = (r as isize + dy).rem_euclid(h as isize) as usize;
                        acc += dot_wrapped(&gin[r * w..(r + 1) * w], &xin[sr * w..(sr + 1) * w], shift);
                    }
                    out[((o * ci + i) * kh + p) * kw + q] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{normal_f64, uniform_f64, Seed};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = Seed(seed).rng();
        (0..n).map(|_| uniform_f64(&mut rng) - 0.5).collect()
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        ArrayD::from_shape_vec(shape.to_vec(), rand_vec(shape.iter().product(), seed)).unwrap()
    }

    /// Direct-summation oracle for circular correlation.
    fn brute_conv(
        x: &[f64],
        ci: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        co: usize,
        kh: usize,
        kw: usize,
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for i in 0..ci {
                        for p in 0..kh {
                            for q in 0..kw {
                                let sr = (r as isize + p as isize - ay).rem_euclid(h as isize)
                                    as usize;
                                let sc = (c as isize + q as isize - ax).rem_euclid(w as isize)
                                    as usize;
                                acc += wt[((o * ci + i) * kh + p) * kw + q]
                                    * x[i * h * w + sr * w + sc];
                            }
                        }
                    }
                    out[o * h * w + r * w + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_brute_force() {
        let (ci, co, h, w, kh, kw) = (2, 3, 5, 6, 3, 3);
        let x = rand_vec(ci * h * w, 1);
        let wt = rand_vec(co * ci * kh * kw, 2);
        let b = rand_vec(co, 3);
        let got = conv_data_kernel(&x, ci, h, w, &wt, co, kh, kw, Some(&b));
        let want = brute_conv(&x, ci, h, w, &wt, co, kh, kw, Some(&b));
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        // ⟨conv(x, w), g⟩ = ⟨x, conv_adj(g, w)⟩
        let (ci, co, h, w, kh, kw) = (2, 2, 4, 5, 3, 3);
        let x = rand_vec(ci * h * w, 4);
        let g = rand_vec(co * h * w, 5);
        let wt = rand_vec(co * ci * kh * kw, 6);
        let y = conv_data_kernel(&x, ci, h, w, &wt, co, kh, kw, None);
        let xt = conv_adj_kernel(&g, co, h, w, &wt, ci, kh, kw);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_weight_gradient_identity() {
        // ⟨wgrad(x, g), w⟩ = ⟨conv(x, w), g⟩
        let (ci, co, h, w, kh, kw) = (2, 2, 4, 4, 3, 3);
        let x = rand_vec(ci * h * w, 7);
        let g = rand_vec(co * h * w, 8);
        let wt = rand_vec(co * ci * kh * kw, 9);
        let y = conv_data_kernel(&x, ci, h, w, &wt, co, kh, kw, None);
        let wg = conv_wgrad_kernel(&x, ci, h, w, &g, co, kh, kw);
        let lhs: f64 = wg.iter().zip(&wt).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn softplus_and_logistic_are_stable() {
        assert!((softplus_stable(0.0, 100.0) - std::f64::consts::LN_2 / 100.0).abs() < 1e-15);
        assert!((softplus_stable(1.0, 100.0) - 1.0).abs() < 1e-9);
        assert!(softplus_stable(1000.0, 100.0).is_finite());
        assert!(softplus_stable(-1000.0, 100.0) >= 0.0);
        assert_eq!(logistic_stable(0.0, 7.0), 0.5);
        assert!(logistic_stable(-1000.0, 100.0) >= 0.0);
        assert!(logistic_stable(1000.0, 100.0) <= 1.0);
    }

    /// A small two-conv network with a softplus in between, pooled to a
    /// scalar: enough structure to exercise every VJP rule.
    fn tiny_net(g: &mut Graph, x: ArrayD<f64>, w1: ArrayD<f64>, b1: ArrayD<f64>, w2: ArrayD<f64>) -> (NodeId, NodeId, NodeId, NodeId, NodeId) {
        let xin = g.input(x);
        let w1 = g.param(0, w1);
        let b1 = g.param(1, b1);
        let w2 = g.param(2, w2);
        let c1 = g.conv(xin, w1, Some(b1));
        let h1 = g.softplus(c1, 3.0);
        let c2 = g.conv(h1, w2, None);
        let pooled = g.chan_sum(c2);
        let psc = g.scale(pooled, 1.0 / (4.0 * 4.0));
        let ones = g.constant(ArrayD::from_elem(vec![1], 1.0));
        let out = g.dot(psc, ones);
        (xin, w1, b1, w2, out)
    }

    fn tiny_eval(xv: &ArrayD<f64>, w1: &ArrayD<f64>, b1: &ArrayD<f64>, w2: &ArrayD<f64>) -> f64 {
        let mut g = Graph::new();
        let (_, _, _, _, out) = tiny_net(&mut g, xv.clone(), w1.clone(), b1.clone(), w2.clone());
        g.scalar(out)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = rand_arr(&[1, 4, 4], 11);
        let w1 = rand_arr(&[2, 1, 3, 3], 12);
        let b1 = rand_arr(&[2], 13);
        let w2 = rand_arr(&[1, 2, 3, 3], 14);

        let mut g = Graph::new();
        let (xin, w1id, _, _, out) = tiny_net(&mut g, x.clone(), w1.clone(), b1.clone(), w2.clone());
        let bp = g.backward(out, None, &[xin], true);
        let gx = g.gradient_of(&bp, xin);
        let gw1 = g.gradient_of(&bp, w1id);

        let hstep = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += hstep;
            xm.as_slice_mut().unwrap()[idx] -= hstep;
            let fd = (tiny_eval(&xp, &w1, &b1, &w2) - tiny_eval(&xm, &w1, &b1, &w2)) / (2.0 * hstep);
            let an = gx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * an.abs().max(fd.abs()).max(1e-3), "x[{idx}]: {an} vs {fd}");
        }
        for idx in 0..w1.len() {
            let mut wp = w1.clone();
            let mut wm = w1.clone();
            wp.as_slice_mut().unwrap()[idx] += hstep;
            wm.as_slice_mut().unwrap()[idx] -= hstep;
            let fd = (tiny_eval(&x, &wp, &b1, &w2) - tiny_eval(&x, &wm, &b1, &w2)) / (2.0 * hstep);
            let an = gw1.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * an.abs().max(fd.abs()).max(1e-3), "w1[{idx}]: {an} vs {fd}");
        }
    }

    #[test]
    fn gradient_of_gradient_matches_finite_differences() {
        // s(θ) = ⟨∇_x f(x; θ), v⟩ — check ds/dθ against differences of ∇_x f.
        let x = rand_arr(&[1, 4, 4], 21);
        let w1 = rand_arr(&[2, 1, 3, 3], 22);
        let b1 = rand_arr(&[2], 23);
        let w2 = rand_arr(&[1, 2, 3, 3], 24);
        let v = rand_arr(&[1, 4, 4], 25);

        let grad_x = |w1v: &ArrayD<f64>| -> ArrayD<f64> {
            let mut g = Graph::new();
            let (xin, _, _, _, out) = tiny_net(&mut g, x.clone(), w1v.clone(), b1.clone(), w2.clone());
            let bp = g.backward(out, None, &[xin], false);
            g.gradient_of(&bp, xin)
        };

        // analytic: second backward pass over the extended tape
        let mut g = Graph::new();
        let (xin, w1id, _, _, out) = tiny_net(&mut g, x.clone(), w1.clone(), b1.clone(), w2.clone());
        let bp = g.backward(out, None, &[xin], false);
        let gx_node = bp.cotangent(xin).unwrap();
        let vnode = g.constant(v.clone());
        let s = g.dot(gx_node, vnode);
        let bp2 = g.backward(s, None, &[], true);
        let ds_dw1 = g.gradient_of(&bp2, w1id);

        let hstep = 1e-6;
        for idx in 0..w1.len() {
            let mut wp = w1.clone();
            let mut wm = w1.clone();
            wp.as_slice_mut().unwrap()[idx] += hstep;
            wm.as_slice_mut().unwrap()[idx] -= hstep;
            let sp: f64 = grad_x(&wp)
                .as_slice()
                .unwrap()
                .iter()
                .zip(v.as_slice().unwrap())
                .map(|(a, b)| a * b)
                .sum();
            let sm: f64 = grad_x(&wm)
                .as_slice()
                .unwrap()
                .iter()
                .zip(v.as_slice().unwrap())
                .map(|(a, b)| a * b)
                .sum();
            let fd = (sp - sm) / (2.0 * hstep);
            let an = ds_dw1.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() < 1e-5 * an.abs().max(fd.abs()).max(1e-3),
                "d²/dθdx mismatch at w1[{idx}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn duplicated_channel_with_halved_outgoing_weights_is_invariant() {
        // engine linearity: splitting a hidden channel in two must not move
        // the output
        let x = rand_arr(&[1, 4, 4], 31);
        let w1 = rand_arr(&[2, 1, 3, 3], 32);
        let b1 = rand_arr(&[2], 33);
        let w2 = rand_arr(&[1, 2, 3, 3], 34);
        let base = tiny_eval(&x, &w1, &b1, &w2);

        // duplicate hidden channel 0
        let mut w1d = ArrayD::zeros(vec![3, 1, 3, 3]);
        let mut b1d = ArrayD::zeros(vec![3]);
        let mut w2d = ArrayD::zeros(vec![1, 3, 3, 3]);
        for i in 0..2 {
            for p in 0..3 {
                for q in 0..3 {
                    w1d[[i, 0, p, q]] = w1[[i, 0, p, q]];
                    w2d[[0, i, p, q]] = w2[[0, i, p, q]];
                }
            }
            b1d[[i]] = b1[[i]];
        }
        for p in 0..3 {
            for q in 0..3 {
                w1d[[2, 0, p, q]] = w1[[0, 0, p, q]]; // clone of channel 0
                w2d[[0, 2, p, q]] = 0.5 * w2[[0, 0, p, q]];
                w2d[[0, 0, p, q]] = 0.5 * w2[[0, 0, p, q]];
            }
        }
        b1d[[2]] = b1[[0]];
        let dup = tiny_eval(&x, &w1d, &b1d, &w2d);
        assert!((base - dup).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn normal_draws_have_sane_moments() {
        let mut rng = Seed(99).rng();
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = normal_f64(&mut rng);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
