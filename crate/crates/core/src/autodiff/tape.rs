//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a valid topological order because inputs always precede the
//! nodes that consume them. Nodes that do not depend on any
//! `requires_grad` leaf are skipped during the backward sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is either a shared `[k, n]` matrix or batched like `a`.
    MatMul { a: Var, b: Var, shared_b: bool },
    /// Shorter operand broadcast over the leading axes of the longer one.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    BroadcastTo { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Conv3d { x: Var, w: Var, b: Var },
    MaxPool3d { x: Var, argmax: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    trap_non_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` extents for iterating along `axis`.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            trap_non_finite: cfg!(debug_assertions),
        }
    }

    /// Turn NaN/Inf trapping on or off (on by default in debug builds).
    pub fn with_trap(mut self, trap: bool) -> Self {
        self.trap_non_finite = trap;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.trap_non_finite && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a[..., m, k] · b[k, n]` or batched `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank ≥ 2, got {sa:?} · {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!("matmul inner dims differ: {sa:?} · {sb:?}")));
        }
        let shared_b = sb.len() == 2;
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if shared_b {
            gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::Shape(format!("matmul batch dims differ: {sa:?} · {sb:?}")));
            }
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(out_shape, out)?, Op::MatMul { a, b, shared_b }, rg)
    }

    /// Element-wise sum; the lower-rank operand must match the trailing
    /// axes of the other and is broadcast over its leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = if self.shape(a).len() >= self.shape(b).len() { (a, b) } else { (b, a) };
        let sbig = self.shape(big);
        let ssmall = self.shape(small);
        if !sbig.ends_with(ssmall) {
            return Err(Error::Shape(format!("cannot broadcast {ssmall:?} onto {sbig:?}")));
        }
        let mut out = self.value(big).clone();
        let sv = self.value(small).data();
        let step = sv.len().max(1);
        for chunk in out.data_mut().chunks_mut(step) {
            for (o, s) in chunk.iter_mut().zip(sv) {
                *o += s;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add { a: big, b: small }, rg)
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(bv).for_each(|(o, y)| *o *= y);
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale { a, factor }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", out, Op::Reshape { a }, rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permuted(perm)?;
        let rg = self.rg(&[a]);
        self.push("permute", out, Op::Permute { a, perm: perm.to_vec() }, rg)
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        self.check_axis(a, ax1)?;
        self.check_axis(a, ax2)?;
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        perm.swap(ax1, ax2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Shape(format!("concat shapes differ: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of bounds for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push("slice", Tensor::new(out_shape, out)?, Op::Slice { a, axis, start }, rg)
    }

    /// Repeat `a` over new leading axes `lead`.
    pub fn broadcast_to(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let reps: usize = lead.iter().product();
        let src = self.value(a);
        let mut shape = lead.to_vec();
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            out.extend_from_slice(src.data());
        }
        let rg = self.rg(&[a]);
        self.push("broadcast_to", Tensor::new(shape, out)?, Op::BroadcastTo { a }, rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - max).exp();
                    d[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    d[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("softmax", out, Op::Softmax { a, axis }, rg)
    }

    /// Normalise to zero mean and unit (biased) variance along `axis`,
    /// then apply an optional per-feature gain and bias of length
    /// `shape[axis]`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [len] {
                return Err(Error::Shape(format!(
                    "layer_norm affine shape {:?}, expected [{len}]",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mean = (0..len).map(|j| xv[at(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (xv[at(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..len {
                    xhat[at(j)] = (xv[at(j)] - mean) * r;
                }
            }
        }
        let mut out = xhat.clone();
        if gain.is_some() || bias.is_some() {
            let g = gain.map(|g| self.value(g).data().to_vec());
            let b = bias.map(|b| self.value(b).data().to_vec());
            for (idx, v) in out.iter_mut().enumerate() {
                let j = (idx / inner) % len;
                if let Some(g) = &g {
                    *v *= g[j];
                }
                if let Some(b) = &b {
                    *v += b[j];
                }
            }
        }
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * gelu_cdf(x));
        let rg = self.rg(&[a]);
        self.push("gelu", out, Op::Gelu { a }, rg)
    }

    /// Inverted dropout. Returns `a` itself when `rate == 0` or outside
    /// training.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || !train {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
        let rg = self.rg(&[a]);
        self.push("dropout", out, Op::Dropout { a, mask }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(m), Op::Mean { a }, rg)
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [n, classes] logits for {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[label];
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Valid, stride-1 3D convolution.
    /// `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv3d shapes incompatible: x {xs:?}, w {ws:?}, b {:?}",
                self.shape(b)
            )));
        }
        let geo = ConvGeometry::new(&xs, &ws)?;
        let mut out = vec![0.0; geo.batch * geo.cout * geo.positions()];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut cols = vec![0.0; geo.patch_len() * geo.positions()];
        for n in 0..geo.batch {
            geo.im2col(&xv[n * geo.sample_len()..(n + 1) * geo.sample_len()], &mut cols);
            let o = &mut out[n * geo.cout * geo.positions()..(n + 1) * geo.cout * geo.positions()];
            gemm(geo.cout, geo.patch_len(), geo.positions(), wv, false, &cols, false, o, false);
            for (co, row) in o.chunks_mut(geo.positions()).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let shape = vec![geo.batch, geo.cout, geo.od, geo.oh, geo.ow];
        let rg = self.rg(&[x, w, b]);
        self.push("conv3d", Tensor::new(shape, out)?, Op::Conv3d { x, w, b }, rg)
    }

    /// Non-overlapping 3D max pooling over the last three axes of
    /// `[B, C, D, H, W]`. Partial windows at the upper edge are kept
    /// (ceil mode), so an axis shorter than its kernel is passed through.
    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || kernel.contains(&0) {
            return Err(Error::Shape(format!("max_pool3d expects rank 5 input, got {xs:?}")));
        }
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (d.div_ceil(kernel[0]), h.div_ceil(kernel[1]), w.div_ceil(kernel[2]));
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for p in 0..planes {
            let base = p * d * h * w;
            for i in 0..od {
                for j in 0..oh {
                    for k in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for a in i * kernel[0]..((i + 1) * kernel[0]).min(d) {
                            for bb in j * kernel[1]..((j + 1) * kernel[1]).min(h) {
                                for c in k * kernel[2]..((k + 1) * kernel[2]).min(w) {
                                    let idx = base + (a * h + bb) * w + c;
                                    if best == usize::MAX || xv[idx] > best_v {
                                        best = idx;
                                        best_v = xv[idx];
                                    }
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let shape = vec![xs[0], xs[1], od, oh, ow];
        let rg = self.rg(&[x]);
        self.push("max_pool3d", Tensor::new(shape, out)?, Op::MaxPool3d { x, argmax }, rg)
    }

    /// Populate gradients of the scalar `loss` with respect to every node
    /// that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.input_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Clear gradients so `backward` may run again on the same graph.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out: Vec<(Var, Tensor)> = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, shared_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                if *shared_b {
                    gemm(batch * m, n, k, gd, false, bv, true, &mut ga, false);
                    gemm(k, batch * m, n, av, true, gd, false, &mut gb, false);
                } else {
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        gemm(m, n, k, gi, false, &bv[i * k * n..(i + 1) * k * n], true, &mut ga[i * m * k..(i + 1) * m * k], false);
                        gemm(k, m, n, &av[i * m * k..(i + 1) * m * k], true, gi, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                    }
                }
                vec![
                    (*a, Tensor::new(sa.to_vec(), ga)?),
                    (*b, Tensor::new(sb.to_vec(), gb)?),
                ]
            }
            Op::Add { a, b } => {
                let sb = self.shape(*b).to_vec();
                let step = sb.iter().product::<usize>().max(1);
                let mut gb = vec![0.0; step];
                for chunk in gd.chunks(step) {
                    gb.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                vec![(*a, g.clone()), (*b, Tensor::new(sb, gb)?)]
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = g.clone();
                ga.data_mut().iter_mut().zip(bv.data()).for_each(|(x, y)| *x *= y);
                let mut gb = g.clone();
                gb.data_mut().iter_mut().zip(av.data()).for_each(|(x, y)| *x *= y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { a, factor } => vec![(*a, g.map(|v| v * factor))],
            Op::Reshape { a } => vec![(*a, g.clone().reshaped(self.shape(*a).to_vec())?)],
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, g.permuted(&inv)?)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(g.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        part.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((v, Tensor::new(self.shape(v).to_vec(), part)?));
                }
                res
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, full, inner) = axis_extents(&shape, *axis);
                let len = g.shape()[*axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    ga[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, Tensor::new(shape, ga)?)]
            }
            Op::BroadcastTo { a } => {
                let shape = self.shape(*a).to_vec();
                let step = shape.iter().product::<usize>().max(1);
                let mut ga = vec![0.0; step];
                for chunk in gd.chunks(step) {
                    ga.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                vec![(*a, Tensor::new(shape, ga)?)]
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| y[at(j)] * gd[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(node.value.shape().to_vec(), ga)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let shape = node.value.shape().to_vec();
                let (outer, len, inner) = axis_extents(&shape, *axis);
                let gv = gain.map(|g| self.value(g).data().to_vec());
                let mut dgain = vec![0.0; len];
                let mut dbias = vec![0.0; len];
                let mut gx = vec![0.0; xhat.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dxhat = vec![0.0; len];
                        for j in 0..len {
                            let go = gd[at(j)];
                            dgain[j] += go * xhat[at(j)];
                            dbias[j] += go;
                            dxhat[j] = go * gv.as_ref().map_or(1.0, |g| g[j]);
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / len as f64;
                        let mean_dx = (0..len).map(|j| dxhat[j] * xhat[at(j)]).sum::<f64>() / len as f64;
                        let r = rstd[o * inner + i];
                        for j in 0..len {
                            gx[at(j)] = r * (dxhat[j] - mean_d - xhat[at(j)] * mean_dx);
                        }
                    }
                }
                let mut res = vec![(*x, Tensor::new(shape, gx)?)];
                if let Some(gn) = gain {
                    res.push((*gn, Tensor::from_vec(dgain)));
                }
                if let Some(bs) = bias {
                    res.push((*bs, Tensor::from_vec(dbias)));
                }
                res
            }
            Op::Gelu { a } => {
                let xv = self.value(*a).data();
                let mut ga = g.clone();
                ga.data_mut()
                    .iter_mut()
                    .zip(xv)
                    .for_each(|(d, &x)| *d *= gelu_cdf(x) + x * gelu_pdf(x));
                vec![(*a, ga)]
            }
            Op::Dropout { a, mask } => {
                let mut ga = g.clone();
                ga.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                vec![(*a, ga)]
            }
            Op::Sum { a } => vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.item()))],
            Op::Mean { a } => {
                let n = self.value(*a).len() as f64;
                vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.item() / n))]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g.item() / labels.len() as f64;
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(self.shape(*logits).to_vec(), gl)?)]
            }
            Op::Conv3d { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let geo = ConvGeometry::new(&xs, &ws)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; geo.cout];
                let p = geo.positions();
                let mut cols = vec![0.0; geo.patch_len() * p];
                let mut dcols = vec![0.0; geo.patch_len() * p];
                for n in 0..geo.batch {
                    let go = &gd[n * geo.cout * p..(n + 1) * geo.cout * p];
                    for (co, row) in go.chunks(p).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                    geo.im2col(&xv[n * geo.sample_len()..(n + 1) * geo.sample_len()], &mut cols);
                    gemm(geo.cout, p, geo.patch_len(), go, false, &cols, true, &mut gw, true);
                    gemm(geo.patch_len(), geo.cout, p, wv, true, go, false, &mut dcols, false);
                    geo.col2im_add(&dcols, &mut gx[n * geo.sample_len()..(n + 1) * geo.sample_len()]);
                }
                vec![
                    (*x, Tensor::new(xs, gx)?),
                    (*w, Tensor::new(ws, gw)?),
                    (*b, Tensor::from_vec(gb)),
                ]
            }
            Op::MaxPool3d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&i, &d) in argmax.iter().zip(gd) {
                    gx[i] += d;
                }
                vec![(*x, Tensor::new(self.shape(*x).to_vec(), gx)?)]
            }
        };
        Ok(out)
    }
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Result<Self> {
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        let (kd, kh, kw) = (ws[2], ws[3], ws[4]);
        if kd > d || kh > h || kw > w || kd == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!(
                "conv3d kernel {:?} does not fit input {:?}",
                &ws[2..],
                &xs[2..]
            )));
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            d,
            h,
            w,
            kd,
            kh,
            kw,
            od: d - kd + 1,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }

    fn positions(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kd * self.kh * self.kw
    }

    fn sample_len(&self) -> usize {
        self.cin * self.d * self.h * self.w
    }

    /// Row `(c, a, b, e)` of `cols` holds input offsets `(a, b, e)` of
    /// channel `c` for every output position.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.cin {
            for a in 0..self.kd {
                for b in 0..self.kh {
                    for e in 0..self.kw {
                        let mut col = 0;
                        for i in 0..self.od {
                            for j in 0..self.oh {
                                let src = ((c * self.d + i + a) * self.h + j + b) * self.w + e;
                                for k in 0..self.ow {
                                    f(row * p + col, src + k);
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        self.for_each_pair(|dst, src| cols[dst] = x[src]);
    }

    fn col2im_add(&self, cols: &[f64], x: &mut [f64]) {
        self.for_each_pair(|dst, src| x[src] += cols[dst]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::new();
        let data = [0.3, -1.7, 2.5, 0.0];
        let x = tape.param(t(&[4], &data));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &data);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
        tape.reset_grads();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constant_softmax_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 9], 3.7));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3, 66]));
        let l = tape.cross_entropy(x, &[0, 17, 65]).unwrap();
        assert!((tape.value(l).item() - 66f64.ln()).abs() < 1e-12);
        assert!((66f64.ln() - 4.18965).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_of_one_two_three() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, 0, None, None).unwrap();
        let v = tape.value(y).data();
        // (x − 2)/sqrt(2/3 + eps)
        let expect = 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!((v[0] + expect).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!((v[2] - expect).abs() < 1e-12);
        assert!((v[2] - 1.22474).abs() < 1e-4);
    }

    #[test]
    fn dropout_identities() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false, 1).unwrap(), x);
        let y = tape.dropout(x, 0.5, true, 1).unwrap();
        assert_ne!(y, x);
        for (&a, &b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!(a == 0.0 || a == 2.0 * b);
        }
        assert!(tape.dropout(x, 1.0, true, 1).is_err());
    }

    #[test]
    fn invalid_axis_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.softmax(x, 2), Err(Error::Axis { axis: 2, rank: 2 })));
        assert!(tape.layer_norm(x, 5, None, None).is_err());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn non_finite_values_trapped() {
        let mut tape = Tape::new().with_trap(true);
        let a = tape.constant(Tensor::from_vec(vec![f64::MAX, f64::MAX]));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(t(&[1, 2], &[1.0, 1.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn pool_keeps_short_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 26, 1, 1]));
        let y = tape.max_pool3d(x, [2, 2, 2]).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 13, 1, 1]);
    }
}
