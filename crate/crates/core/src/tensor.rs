//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`]. A node stores its forward
//! value and a closure mapping the upstream gradient to gradients for each
//! parent. [`Tensor::backward`] walks the tape once in reverse recording
//! order and returns a [`Gradients`] table keyed by node.
//!
//! Tapes are cheap to create and are meant to be rebuilt for every training
//! step. Persistent parameters live outside the tape as plain buffers and are
//! registered as leaves with [`Tape::leaf`] each time.
//!
//! Broadcasting aligns trailing dimensions; a dimension broadcasts only when
//! it equals 1 (or is missing on the left). Anything else needs an explicit
//! [`Tensor::reshape`].

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    len: usize,
}

/// Recording of operations for one forward pass.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// A node on a tape: shape, forward value and a handle for gradient lookup.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Rc<[usize]>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

/// Gradients produced by a backward pass, indexed by tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if any flowed to it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `t`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()])
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the flat index of the broadcast source element.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[offset + i] = src_strides[i];
        }
    }
    let mut idx = vec![0usize; n];
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for slot in idx.iter_mut() {
        *slot = pos;
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += eff[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
            len: value.len(),
        });
        Tensor {
            tape: self.clone(),
            id,
            shape: shape.into(),
            value: Rc::new(value),
            requires_grad,
        }
    }

    /// A trainable leaf. Gradients are reported for it after `backward`.
    pub fn leaf(&self, shape: &[usize], value: Vec<f64>) -> Result<Tensor> {
        self.check_len(shape, &value)?;
        Ok(self.push(shape.to_vec(), value, Vec::new(), true, None))
    }

    /// A constant: no gradient is propagated into it.
    pub fn constant(&self, shape: &[usize], value: Vec<f64>) -> Result<Tensor> {
        self.check_len(shape, &value)?;
        Ok(self.push(shape.to_vec(), value, Vec::new(), false, None))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(Vec::new(), vec![v], Vec::new(), false, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Vec::new(), false, None)
    }

    fn check_len(&self, shape: &[usize], value: &[f64]) -> Result<()> {
        if numel(shape) != value.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), value.len()),
            ));
        }
        Ok(())
    }

    /// Record an operation with a hand-written backward rule.
    ///
    /// `backward` receives the upstream gradient (same length as `value`) and
    /// must return one gradient buffer per parent, each as long as that
    /// parent's value.
    pub fn custom<F>(&self, parents: &[&Tensor], shape: Vec<usize>, value: Vec<f64>, backward: F) -> Result<Tensor>
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    {
        self.check_len(&shape, &value)?;
        for p in parents {
            if !Rc::ptr_eq(&p.tape.nodes, &self.nodes) {
                return Err(Error::InvalidArgument("tensors belong to different tapes".into()));
            }
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad);
        let ids = parents.iter().map(|p| p.id).collect();
        Ok(self.push(shape, value, ids, requires_grad, Some(Box::new(backward))))
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        self.value[0]
    }

    /// Treat this tensor as a constant from here on (no gradient flows back).
    pub fn detach(&self) -> Tensor {
        self.tape
            .push(self.shape.to_vec(), self.value.to_vec(), Vec::new(), false, None)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape),
            ));
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(upstream) = grads[id].take() else { continue };
            let parent_grads = bw(&upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[pid].len);
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the gradient of intermediate nodes available for inspection
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands recorded on different tapes"))
        }
    }

    fn unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let out: Vec<f64> = self.value.iter().map(|&x| f(x)).collect();
        let x = Rc::clone(&self.value);
        let y = Rc::new(out.clone());
        let backward = move |g: &[f64]| {
            vec![g
                .iter()
                .zip(x.iter().zip(y.iter()))
                .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                .collect()]
        };
        self.tape
            .custom(&[self], self.shape.to_vec(), out, backward)
            .expect("unary op preserves shape")
    }

    fn binary<F, DA, DB>(&self, other: &Tensor, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64) -> f64 + 'static,
        DB: Fn(f64, f64) -> f64 + 'static,
    {
        self.same_tape(other, op)?;
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            Error::shape(op, format!("cannot broadcast {:?} with {:?}", self.shape, other.shape))
        })?;
        let ia = Rc::new(broadcast_index(&self.shape, &out_shape));
        let ib = Rc::new(broadcast_index(&other.shape, &out_shape));
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        let out: Vec<f64> = ia.iter().zip(ib.iter()).map(|(&i, &j)| f(a[i], b[j])).collect();
        let (na, nb) = (a.len(), b.len());
        let backward = move |g: &[f64]| {
            let mut ga = vec![0.0; na];
            let mut gb = vec![0.0; nb];
            for (k, gk) in g.iter().enumerate() {
                let (i, j) = (ia[k], ib[k]);
                ga[i] += gk * da(a[i], b[j]);
                gb[j] += gk * db(a[i], b[j]);
            }
            vec![ga, gb]
        };
        self.tape.custom(&[self, other], out_shape, out, backward)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| sign(x))
    }

    /// Rectifier; subgradient 0 at 0.
    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    /// Same values, new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        self.tape
            .custom(&[self], shape.to_vec(), self.value.to_vec(), |g| vec![g.to_vec()])
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("invalid axes {:?} for rank {}", axes, rank)));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let n = self.len();
        // src[k] = flat input index of output element k
        let mut src = vec![0usize; n];
        let mut counter = vec![0usize; rank];
        for slot in src.iter_mut() {
            *slot = counter.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum();
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let out: Vec<f64> = src.iter().map(|&i| self.value[i]).collect();
        let src = Rc::new(src);
        self.tape.custom(&[self], out_shape, out, move |g| {
            let mut gi = vec![0.0; g.len()];
            for (k, &i) in src.iter().enumerate() {
                gi[i] = g[k];
            }
            vec![gi]
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.value.iter().sum();
        let n = self.len();
        self.tape
            .custom(&[self], Vec::new(), vec![s], move |g| vec![vec![g[0]; n]])
            .expect("scalar shape")
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over the listed axes, which are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::shape("sum_axes", format!("axis {} out of range for rank {}", bad, rank)));
        }
        let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| self.shape[d]).collect();
        // shape of the result with reduced axes kept as 1, for broadcast indexing
        let kept_shape: Vec<usize> = (0..rank)
            .map(|d| if axes.contains(&d) { 1 } else { self.shape[d] })
            .collect();
        let idx = Rc::new(broadcast_index(&kept_shape, &self.shape));
        let mut out = vec![0.0; numel(&out_shape)];
        for (k, &o) in idx.iter().enumerate() {
            out[o] += self.value[k];
        }
        self.tape.custom(&[self], out_shape, out, move |g| {
            vec![idx.iter().map(|&o| g[o]).collect()]
        })
    }

    /// Mean over the listed axes, which are removed from the shape.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let summed = self.sum_axes(axes)?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        Ok(summed.scale(1.0 / count as f64))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if axis >= rank || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {} range {}..{} invalid for {:?}", axis, start, start + len, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&self.value[base..base + len * inner]);
        }
        let mut out_shape = self.shape.to_vec();
        out_shape[axis] = len;
        let n = self.len();
        self.tape.custom(&[self], out_shape, out, move |g| {
            let mut gi = vec![0.0; n];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![gi]
        })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors to concatenate"))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {} out of range for rank {}", axis, rank)));
        }
        for p in &parts[1..] {
            first.same_tape(p, "concat")?;
            let ok = p.shape.len() == rank
                && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", p.shape, first.shape, axis),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = first.shape.to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let backward = move |g: &[f64]| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads
        };
        first.tape.custom(parts, out_shape, out, backward)
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`. `other` is either `[k, n]` (shared by every
    /// batch element) or `[..., k, n]` with the same leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "matmul")?;
        let (sa, sb) = (&self.shape, &other.shape);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("need rank >= 2, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared = batch_b.is_empty();
        if k != kb || (!shared && batch_a != batch_b) {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let batch: usize = batch_a.iter().product();
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        let b_off = move |i: usize| if shared { 0 } else { i * k * n };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(&a[bi * m * k..], &b[b_off(bi)..], &mut out[bi * m * n..], m, k, n);
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let backward = move |g: &[f64]| {
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for bi in 0..batch {
                let gc = &g[bi * m * n..(bi + 1) * m * n];
                let ab = &a[bi * m * k..(bi + 1) * m * k];
                let bb = &b[b_off(bi)..b_off(bi) + k * n];
                // dA = dC · Bᵀ
                let ga_b = &mut ga[bi * m * k..(bi + 1) * m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gc[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga_b[i * k + p] += gij * bb[p * n + j];
                        }
                    }
                }
                // dB = Aᵀ · dC
                let gb_b = &mut gb[b_off(bi)..b_off(bi) + k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ab[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb_b[p * n + j] += aip * gc[i * n + j];
                        }
                    }
                }
            }
            vec![ga, gb]
        };
        self.tape.custom(&[self, other], out_shape, out, backward)
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `self` is `[series, c_in, time]`, `kernel` is `[c_out, c_in, k]`.
    /// Output `[series, c_out, time]` with
    /// `out[s,o,t] = Σ_i Σ_j kernel[o,i,j] · x[s,i,t − j·dilation]`,
    /// reading zeros before the first time step. Tap `j = 0` is the current
    /// step, so output at `t` never depends on inputs after `t`.
    pub fn conv1d_dilated(&self, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
        self.same_tape(kernel, "conv1d_dilated")?;
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be >= 1".into()));
        }
        let (xs, ws) = (&self.shape, &kernel.shape);
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || ws[2] == 0 {
            return Err(Error::shape("conv1d_dilated", format!("input {:?} kernel {:?}", xs, ws)));
        }
        let (ns, ci, nt) = (xs[0], xs[1], xs[2]);
        let (co, kl) = (ws[0], ws[2]);
        let (x, w) = (Rc::clone(&self.value), Rc::clone(&kernel.value));
        let mut out = vec![0.0; ns * co * nt];
        for s in 0..ns {
            for o in 0..co {
                let orow = &mut out[(s * co + o) * nt..(s * co + o + 1) * nt];
                for i in 0..ci {
                    let xrow = &x[(s * ci + i) * nt..(s * ci + i + 1) * nt];
                    for j in 0..kl {
                        let wv = w[(o * ci + i) * kl + j];
                        let lag = j * dilation;
                        for t in lag..nt {
                            orow[t] += wv * xrow[t - lag];
                        }
                    }
                }
            }
        }
        let backward = move |g: &[f64]| {
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            for s in 0..ns {
                for o in 0..co {
                    let grow = &g[(s * co + o) * nt..(s * co + o + 1) * nt];
                    for i in 0..ci {
                        let xbase = (s * ci + i) * nt;
                        for j in 0..kl {
                            let widx = (o * ci + i) * kl + j;
                            let wv = w[widx];
                            let lag = j * dilation;
                            let mut acc = 0.0;
                            for t in lag..nt {
                                acc += grow[t] * x[xbase + t - lag];
                                gx[xbase + t - lag] += grow[t] * wv;
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            vec![gx, gw]
        };
        self.tape.custom(&[self, kernel], vec![ns, co, nt], out, backward)
    }
}

pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central finite-difference gradient of `f` at `x`.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let dn = f(&xp);
                xp[i] = orig;
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn relu_values_and_subgradients() {
        let tape = Tape::new();
        for (x, y, d) in [(-3.0, 0.0, 0.0), (2.0, 2.0, 1.0), (0.0, 0.0, 0.0)] {
            let t = tape.leaf(&[], vec![x]).unwrap();
            let r = t.relu();
            assert_eq!(r.item(), y);
            assert_eq!(r.backward().unwrap().get(&t).unwrap()[0], d);
        }
    }

    #[test]
    fn softplus_at_zero() {
        let tape = Tape::new();
        let t = tape.leaf(&[], vec![0.0]).unwrap();
        let s = t.softplus();
        assert_abs_diff_eq!(s.item(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.backward().unwrap().get(&t).unwrap()[0], 0.5, epsilon = 1e-15);
        assert!(softplus(-1e6) >= 0.0 && softplus(1e6) == 1e6);
    }

    #[test]
    fn abs_gradient_matches_finite_difference() {
        let tape = Tape::new();
        let t = tape.leaf(&[], vec![1.7]).unwrap();
        let g = t.abs().backward().unwrap().get(&t).unwrap()[0];
        let fd = fd_grad(|x| x[0].abs(), &[1.7], 1e-5)[0];
        assert!((g - fd).abs() < 1e-7);
        let z = tape.leaf(&[], vec![0.0]).unwrap();
        assert_eq!(z.abs().backward().unwrap().get(&z).unwrap()[0], 0.0);
    }

    #[test]
    fn broadcasting_rules() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = tape.leaf(&[3], vec![10., 20., 30.]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.values(), &[11., 22., 33., 14., 25., 36.]);
        let g = c.sum().backward().unwrap();
        assert_eq!(g.get(&b).unwrap(), &[2., 2., 2.]);
        let col = tape.leaf(&[2, 1], vec![1., 2.]).unwrap();
        let d = a.mul(&col).unwrap();
        assert_eq!(d.values(), &[1., 2., 3., 8., 10., 12.]);
        assert_eq!(d.sum().backward().unwrap().get(&col).unwrap(), &[6., 15.]);
        let bad = tape.leaf(&[2], vec![1., 2.]).unwrap();
        assert!(matches!(a.add(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_identity_and_closed_form_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let eye = tape.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = tape.leaf(&[3, 3], rand_vec(&mut rng, 9)).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().values(), m.values());

        let a = tape.leaf(&[2, 3], rand_vec(&mut rng, 6)).unwrap();
        let b = tape.leaf(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
        let g = a.matmul(&b).unwrap().sum().backward().unwrap();
        // d sum(AB)/dA = 1·Bᵀ, i.e. row sums of B
        let bv = b.values();
        for i in 0..2 {
            for p in 0..3 {
                let expect: f64 = (0..4).map(|j| bv[p * 4 + j]).sum();
                assert_abs_diff_eq!(g.get(&a).unwrap()[i * 3 + p], expect, epsilon = 1e-14);
            }
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let av = rand_vec(&mut rng, 20);
        let bv = rand_vec(&mut rng, 15);
        let wv = rand_vec(&mut rng, 12);
        let loss = |a: &[f64], b: &[f64]| {
            let tape = Tape::new();
            let a = tape.leaf(&[4, 5], a.to_vec()).unwrap();
            let b = tape.leaf(&[5, 3], b.to_vec()).unwrap();
            let w = tape.constant(&[4, 3], wv.clone()).unwrap();
            let l = a.matmul(&b).unwrap().mul(&w).unwrap().sum();
            let g = l.backward().unwrap();
            (l.item(), g.get(&a).unwrap().to_vec(), g.get(&b).unwrap().to_vec())
        };
        let (_, ga, gb) = loss(&av, &bv);
        let fa = fd_grad(|x| loss(x, &bv).0, &av, 1e-5);
        let fb = fd_grad(|x| loss(&av, x).0, &bv, 1e-5);
        assert!(max_rel_err(&ga, &fa) < 1e-6);
        assert!(max_rel_err(&gb, &fb) < 1e-6);
    }

    #[test]
    fn batched_matmul_matches_per_batch_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let a = tape.leaf(&[2, 2, 3], rand_vec(&mut rng, 12)).unwrap();
        let b = tape.leaf(&[2, 3, 2], rand_vec(&mut rng, 12)).unwrap();
        let c = a.matmul(&b).unwrap();
        for bi in 0..2 {
            let a0 = a.narrow(0, bi, 1).unwrap().reshape(&[2, 3]).unwrap();
            let b0 = b.narrow(0, bi, 1).unwrap().reshape(&[3, 2]).unwrap();
            let c0 = a0.matmul(&b0).unwrap();
            assert_eq!(&c.values()[bi * 4..bi * 4 + 4], c0.values());
        }
    }

    #[test]
    fn conv_identity_and_lag_shift() {
        let tape = Tape::new();
        let x = tape.constant(&[1, 1, 6], (0..6).map(f64::from).collect()).unwrap();
        let id = tape.constant(&[1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(x.conv1d_dilated(&id, 3).unwrap().values(), x.values());
        let lag = tape.constant(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        for d in 1..4 {
            let y = x.conv1d_dilated(&lag, d).unwrap();
            let expect: Vec<f64> = (0..6).map(|t| if t >= d { (t - d) as f64 } else { 0.0 }).collect();
            assert_eq!(y.values(), expect.as_slice());
        }
        assert!(x.conv1d_dilated(&lag, 0).is_err());
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = rand_vec(&mut rng, 2 * 2 * 16);
        let kv = rand_vec(&mut rng, 3 * 2 * 2);
        let wv = rand_vec(&mut rng, 2 * 3 * 16);
        let loss = |x: &[f64], k: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(&[2, 2, 16], x.to_vec()).unwrap();
            let k = tape.leaf(&[3, 2, 2], k.to_vec()).unwrap();
            let w = tape.constant(&[2, 3, 16], wv.clone()).unwrap();
            let l = x.conv1d_dilated(&k, 3).unwrap().mul(&w).unwrap().sum();
            let g = l.backward().unwrap();
            (l.item(), g.get(&x).unwrap().to_vec(), g.get(&k).unwrap().to_vec())
        };
        let (_, gx, gk) = loss(&xv, &kv);
        assert!(max_rel_err(&gk, &fd_grad(|k| loss(&xv, k).0, &kv, 1e-5)) < 1e-6);
        assert!(max_rel_err(&gx, &fd_grad(|x| loss(x, &kv).0, &xv, 1e-5)) < 1e-6);
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let xv = rand_vec(&mut rng, 20);
        let k = tape.constant(&[2, 1, 2], rand_vec(&mut rng, 4)).unwrap();
        let full = tape.constant(&[1, 1, 20], xv.clone()).unwrap().conv1d_dilated(&k, 2).unwrap();
        let mut cut = xv.clone();
        cut[12..].iter_mut().for_each(|v| *v = 0.0);
        let part = tape.constant(&[1, 1, 20], cut).unwrap().conv1d_dilated(&k, 2).unwrap();
        for o in 0..2 {
            assert_eq!(&full.values()[o * 20..o * 20 + 12], &part.values()[o * 20..o * 20 + 12]);
        }
    }

    #[test]
    fn reductions_and_concat() {
        let tape = Tape::new();
        let ones = tape.leaf(&[3, 4], vec![1.0; 12]).unwrap();
        assert_eq!(ones.sum().item(), 12.0);
        let rows = ones.sum_axes(&[1]).unwrap();
        assert_eq!(rows.shape(), &[3]);
        assert_eq!(rows.values(), &[4., 4., 4.]);
        assert!(ones.sum_axes(&[2]).is_err());

        let a = tape.leaf(&[2, 3], vec![1.0; 6]).unwrap();
        let b = tape.leaf(&[2, 5], vec![2.0; 10]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        assert_eq!(&c.values()[..8], &[1., 1., 1., 2., 2., 2., 2., 2.]);
        let w = tape.constant(&[2, 8], (0..16).map(f64::from).collect()).unwrap();
        let g = c.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&a).unwrap(), &[0., 1., 2., 8., 9., 10.]);
        assert_eq!(g.get(&b).unwrap(), &[3., 4., 5., 6., 7., 11., 12., 13., 14., 15.]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv = rand_vec(&mut rng, 10);
        let tape = Tape::new();
        let x = tape.leaf(&[2, 5], xv.clone()).unwrap();
        let g = x.mean().backward().unwrap();
        let fd = fd_grad(|v| v.iter().sum::<f64>() / 10.0, &xv, 1e-5);
        for (a, b) in g.get(&x).unwrap().iter().zip(&fd) {
            assert_abs_diff_eq!(*a, 0.1, epsilon = 1e-15);
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        let m = x.mean_axes(&[0]).unwrap();
        assert_eq!(m.shape(), &[5]);
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn permute_and_narrow() {
        let tape = Tape::new();
        let x = tape.leaf(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(p.values()[1 * 6 + 1 * 3 + 2], x.values()[1 * 12 + 2 * 4 + 1]);
        let w = tape.constant(&[4, 2, 3], (0..24).map(f64::from).collect()).unwrap();
        let g = p.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap()[1 * 12 + 2 * 4 + 1], (1 * 6 + 1 * 3 + 2) as f64);
        assert!(x.permute(&[0, 0, 1]).is_err());
        let n = x.narrow(1, 1, 2).unwrap();
        assert_eq!(n.shape(), &[2, 2, 4]);
        assert_eq!(n.values()[0], 4.0);
        assert_eq!(n.values()[8], 16.0);
    }

    #[test]
    fn backward_basics() {
        let tape = Tape::new();
        let x = tape.leaf(&[], vec![3.0]).unwrap();
        assert_eq!(x.square().backward().unwrap().get(&x).unwrap()[0], 6.0);
        let y = tape.leaf(&[], vec![2.0]).unwrap();
        let l = x.square();
        assert!(l.backward().unwrap().get(&y).is_none());
        assert_eq!(l.backward().unwrap().get_or_zeros(&y), vec![0.0]);
        let v = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(v.backward(), Err(Error::Shape { .. })));
    }

    #[test]
    fn composed_chain_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv = rand_vec(&mut rng, 4 * 3);
        let wv = rand_vec(&mut rng, 3 * 5);
        let bv = rand_vec(&mut rng, 5);
        let run = |w: &[f64], b: &[f64]| {
            let tape = Tape::new();
            let x = tape.constant(&[4, 3], xv.clone()).unwrap();
            let w = tape.leaf(&[3, 5], w.to_vec()).unwrap();
            let b = tape.leaf(&[5], b.to_vec()).unwrap();
            let l = x.matmul(&w).unwrap().add(&b).unwrap().relu().sum();
            let g = l.backward().unwrap();
            (l.item(), g.get_or_zeros(&w), g.get_or_zeros(&b))
        };
        let (_, gw, gb) = run(&wv, &bv);
        assert!(max_rel_err(&gw, &fd_grad(|w| run(w, &bv).0, &wv, 1e-5)) < 1e-6);
        assert!(max_rel_err(&gb, &fd_grad(|b| run(&wv, b).0, &bv, 1e-5)) < 1e-6);
    }

    #[test]
    fn gradients_scale_linearly_with_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = rand_vec(&mut rng, 6);
        let run = |c: f64| {
            let tape = Tape::new();
            let x = tape.leaf(&[6], xv.clone()).unwrap();
            let l = x.softplus().mul(&x).unwrap().exp().sum().scale(c);
            l.backward().unwrap().get(&x).unwrap().to_vec()
        };
        let (g1, g3) = (run(1.0), run(3.0));
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn check_unary(op: fn(&Tensor) -> Tensor, f: fn(f64) -> f64, x: f64) -> bool {
            let tape = Tape::new();
            let t = tape.leaf(&[], vec![x]).unwrap();
            let y = op(&t);
            let g = y.backward().unwrap().get_or_zeros(&t)[0];
            let h = 1e-5;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            (g - fd).abs() / fd.abs().max(1.0) < 1e-5
        }

        proptest! {
            #[test]
            fn unary_ops_match_finite_differences(x in -3.0f64..3.0) {
                prop_assume!(x.abs() > 1e-3);
                prop_assert!(check_unary(Tensor::relu, |v| v.max(0.0), x));
                prop_assert!(check_unary(Tensor::abs, f64::abs, x));
                prop_assert!(check_unary(Tensor::softplus, softplus, x));
                prop_assert!(check_unary(Tensor::exp, f64::exp, x));
                prop_assert!(check_unary(Tensor::square, |v| v * v, x));
                prop_assert!(check_unary(Tensor::neg, |v| -v, x));
                prop_assert!(check_unary(Tensor::log, f64::ln, x.abs()));
            }

            #[test]
            fn binary_ops_match_finite_differences(a in -3.0f64..3.0, b in 0.5f64..3.0) {
                let h = 1e-5;
                type Op = fn(&Tensor, &Tensor) -> Result<Tensor>;
                type Scalar = fn(f64, f64) -> f64;
                let ops: [(Op, Scalar); 4] = [
                    (Tensor::add, |x, y| x + y),
                    (Tensor::sub, |x, y| x - y),
                    (Tensor::mul, |x, y| x * y),
                    (Tensor::div, |x, y| x / y),
                ];
                for (op, f) in ops {
                    let tape = Tape::new();
                    let ta = tape.leaf(&[], vec![a]).unwrap();
                    let tb = tape.leaf(&[], vec![b]).unwrap();
                    let g = op(&ta, &tb).unwrap().backward().unwrap();
                    let fa = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
                    let fb = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
                    prop_assert!((g.get_or_zeros(&ta)[0] - fa).abs() / fa.abs().max(1.0) < 1e-5);
                    prop_assert!((g.get_or_zeros(&tb)[0] - fb).abs() / fb.abs().max(1.0) < 1e-5);
                }
            }

            #[test]
            fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
                let run = || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let tape = Tape::new();
                    let x = tape.leaf(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
                    let w = tape.leaf(&[4, 2], rand_vec(&mut rng, 8)).unwrap();
                    let l = x.matmul(&w).unwrap().softplus().sum();
                    let g = l.backward().unwrap();
                    (l.item().to_bits(), g.get_or_zeros(&w).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                };
                prop_assert_eq!(run(), run());
            }
        }
    }
}
