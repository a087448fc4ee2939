//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a graph handle: operations produce fresh nodes that record
//! their parents and a vector-Jacobian product, and [`Tensor::backward`]
//! walks the graph in reverse topological order accumulating gradients into
//! every reachable leaf that requires them. Values are immutable once an op
//! produces them; only leaf parameters are updated in place between steps.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in f32
//! for training and f64 for finite-difference gradient checks.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Floating-point scalar usable by the engine: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("index {index} out of bounds for dimension of size {size} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("all target positions are ignored")]
    EmptyTarget,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
}

type Result<T> = std::result::Result<T, TensorError>;

/// Per-parent gradient contributions returned by a node's VJP.
type Vjp<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    vjp: Option<Vjp<S>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// A node in the computation graph; cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn build(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        vjp: Option<Vjp<S>>,
    ) -> Tensor<S> {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                vjp,
            }),
        }
    }

    /// A leaf node holding the given values.
    pub fn leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Tensor<S> {
        assert_eq!(numel(&shape), data.len(), "leaf data length mismatch");
        Tensor::build(shape, data, requires_grad, Vec::new(), None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<S> {
        let n = numel(&shape);
        Tensor::leaf(shape, vec![S::zero(); n], false)
    }

    pub fn scalar(v: S) -> Tensor<S> {
        Tensor::leaf(vec![1], vec![v], false)
    }

    fn from_op<F>(shape: Vec<usize>, data: Vec<S>, parents: Vec<Tensor<S>>, vjp: F) -> Tensor<S>
    where
        F: Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
    {
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Tensor::build(shape, data, true, parents, Some(Box::new(vjp)))
        } else {
            // Dead subgraphs are dropped eagerly during inference.
            Tensor::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the node's values.
    pub fn data_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Run `f` over the node's values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Replace a leaf's values in place (optimizer updates between steps).
    pub fn set_data(&self, values: Vec<S>) {
        assert_eq!(values.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = values;
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ---- elementwise and shape ops -------------------------------------

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = self.inner.data.borrow();
        let b = rhs.inner.data.borrow();
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        )
        .ok_()
    }

    /// Add a length-n row vector to every row of an [m, n] matrix.
    pub fn add_row(&self, row: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("add_row")?;
        if row.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let a = self.inner.data.borrow();
        let b = row.inner.data.borrow();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(a[i * n + j] + b[j]);
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), row.clone()],
            move |g| {
                let mut db = vec![S::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            },
        )
        .ok_()
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.inner.data.borrow().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| vec![Some(g.iter().map(|&v| v * c).collect())],
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = self.data_vec();
        Tensor::from_op(shape, out, vec![self.clone()], |g| vec![Some(g.to_vec())]).ok_()
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.inner.data.borrow();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Tensor::from_op(vec![n, m], out, vec![self.clone()], move |g| {
            let mut dg = vec![S::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    dg[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(dg)]
        })
        .ok_()
    }

    /// Rows `start..start + len` as an owned node.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: start + len,
                size: m,
            });
        }
        let out = self.inner.data.borrow()[start * n..(start + len) * n].to_vec();
        Tensor::from_op(vec![len, n], out, vec![self.clone()], move |g| {
            let mut dg = vec![S::zero(); m * n];
            dg[start * n..(start + len) * n].copy_from_slice(g);
            vec![Some(dg)]
        })
        .ok_()
    }

    /// Single row `i` as a [1, n] node.
    pub fn row(&self, i: usize) -> Result<Tensor<S>> {
        self.slice_rows(i, 1)
    }

    /// Columns `start..start + len` of an [m, n] matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let a = self.inner.data.borrow();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&a[i * n + start..i * n + start + len]);
        }
        drop(a);
        Tensor::from_op(vec![m, len], out, vec![self.clone()], move |g| {
            let mut dg = vec![S::zero(); m * n];
            for i in 0..m {
                dg[i * n + start..i * n + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(dg)]
        })
        .ok_()
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn hstack(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "hstack of zero parts");
        let (m, _) = parts[0].dims2("hstack")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("hstack")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "hstack",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let (_, pn) = (p.shape()[0], p.shape()[1]);
                let d = p.inner.data.borrow();
                out.extend_from_slice(&d[i * pn..(i + 1) * pn]);
            }
        }
        let widths_c = widths.clone();
        Tensor::from_op(vec![m, total], out, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<S>> =
                widths_c.iter().map(|&w| Vec::with_capacity(m * w)).collect();
            for i in 0..m {
                let mut off = i * total;
                for (k, &w) in widths_c.iter().enumerate() {
                    grads[k].extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        })
        .ok_()
    }

    /// Concatenate matrices with equal column counts along rows.
    pub fn vstack(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "vstack of zero parts");
        let (_, n) = parts[0].dims2("vstack")?;
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("vstack")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "vstack",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            heights.push(pm);
        }
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(&p.inner.data.borrow());
        }
        let heights_c = heights.clone();
        Tensor::from_op(vec![total, n], out, parts.to_vec(), move |g| {
            let mut grads = Vec::with_capacity(heights_c.len());
            let mut off = 0;
            for &h in &heights_c {
                grads.push(Some(g[off..off + h * n].to_vec()));
                off += h * n;
            }
            grads
        })
        .ok_()
    }

    // ---- matmul ---------------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = {
            let a = self.inner.data.borrow();
            let b = rhs.inner.data.borrow();
            mm(&a, &b, m, k, n)
        };
        let lhs_h = self.clone();
        let rhs_h = rhs.clone();
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let da = if lhs_h.requires_grad() {
                    // dA = G . B^T
                    Some(mm_nt(g, &rhs_h.inner.data.borrow(), m, n, k))
                } else {
                    None
                };
                let db = if rhs_h.requires_grad() {
                    // dB = A^T . G
                    Some(mm_tn(&lhs_h.inner.data.borrow(), g, m, k, n))
                } else {
                    None
                };
                vec![da, db]
            },
        )
        .ok_()
    }

    // ---- table lookup -----------------------------------------------------

    /// Gather rows of an [v, e] table by id; gradient scatter-adds back.
    pub fn index_rows(&self, ids: &[u16]) -> Result<Tensor<S>> {
        let (v, e) = self.dims2("index_rows")?;
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "index_rows",
                    index: id as usize,
                    size: v,
                });
            }
        }
        let t = ids.len();
        let a = self.inner.data.borrow();
        let mut out = Vec::with_capacity(t * e);
        for &id in ids {
            out.extend_from_slice(&a[id as usize * e..(id as usize + 1) * e]);
        }
        drop(a);
        let ids_c: Vec<u16> = ids.to_vec();
        Tensor::from_op(vec![t, e], out, vec![self.clone()], move |g| {
            let mut dt = vec![S::zero(); v * e];
            for (r, &id) in ids_c.iter().enumerate() {
                for j in 0..e {
                    dt[id as usize * e + j] += g[r * e + j];
                }
            }
            vec![Some(dt)]
        })
        .ok_()
    }

    // ---- nonlinearities ---------------------------------------------------

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt()).unwrap();
        let k = S::from_f64(0.044715).unwrap();
        let half = S::from_f64(0.5).unwrap();
        let one = S::one();
        let a = self.inner.data.borrow();
        let out: Vec<S> = a
            .iter()
            .map(|&x| half * x * (one + (c * (x + k * x * x * x)).tanh()))
            .collect();
        drop(a);
        let input = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let x = input.inner.data.borrow();
            let three = S::from_f64(3.0).unwrap();
            let dg: Vec<S> = x
                .iter()
                .zip(g.iter())
                .map(|(&x, &go)| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (one + three * k * x * x);
                    let d = half * (one + t) + half * x * (one - t * t) * du;
                    go * d
                })
                .collect();
            vec![Some(dg)]
        })
    }

    /// Per-row layer normalization with affine gain/bias, epsilon 1e-5.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("layer_norm")?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let eps = S::from_f64(LAYER_NORM_EPS).unwrap();
        let inv_n = S::one() / S::from_usize(n).unwrap();
        let a = self.inner.data.borrow();
        let gv = gain.inner.data.borrow();
        let bv = bias.inner.data.borrow();
        let mut out = Vec::with_capacity(m * n);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_sigma = Vec::with_capacity(m);
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mean = row.iter().fold(S::zero(), |s, &v| s + v) * inv_n;
            let var = row
                .iter()
                .fold(S::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_n;
            let inv = S::one() / (var + eps).sqrt();
            inv_sigma.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        drop(a);
        drop(gv);
        drop(bv);
        let gain_h = gain.clone();
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gv = gain_h.inner.data.borrow();
                let mut dx = vec![S::zero(); m * n];
                let mut dgain = vec![S::zero(); n];
                let mut dbias = vec![S::zero(); n];
                for i in 0..m {
                    let go = &g[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_w = S::zero();
                    let mut mean_wx = S::zero();
                    for j in 0..n {
                        let w = go[j] * gv[j];
                        mean_w += w;
                        mean_wx += w * xh[j];
                        dgain[j] += go[j] * xh[j];
                        dbias[j] += go[j];
                    }
                    mean_w = mean_w * inv_n;
                    mean_wx = mean_wx * inv_n;
                    for j in 0..n {
                        let w = go[j] * gv[j];
                        dx[i * n + j] = (w - mean_w - xh[j] * mean_wx) * inv_sigma[i];
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            },
        )
        .ok_()
    }

    /// Row-wise softmax over a square [t, t] score matrix where row i only
    /// sees columns 0..=i; masked columns come out exactly zero.
    pub fn causal_softmax(&self) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("causal_softmax")?;
        if m != n {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                lhs: self.shape().to_vec(),
                rhs: vec![m, m],
            });
        }
        let a = self.inner.data.borrow();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &a[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for j in 0..=i {
                out[i * n + j] *= inv;
            }
        }
        drop(a);
        let probs = out.clone();
        Tensor::from_op(vec![m, n], out, vec![self.clone()], move |g| {
            let mut dx = vec![S::zero(); m * n];
            for i in 0..m {
                let mut dot = S::zero();
                for j in 0..=i {
                    dot += g[i * n + j] * probs[i * n + j];
                }
                for j in 0..=i {
                    dx[i * n + j] = probs[i * n + j] * (g[i * n + j] - dot);
                }
            }
            vec![Some(dx)]
        })
        .ok_()
    }

    // ---- loss ---------------------------------------------------------------

    /// Summed negative log-likelihood over positions whose target is not
    /// `ignore_id`, plus the count of such positions.
    pub fn cross_entropy_sum(&self, targets: &[u16], ignore_id: u16) -> Result<(Tensor<S>, usize)> {
        let (t, v) = self.dims2("cross_entropy")?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for &tg in targets {
            if tg != ignore_id && tg as usize >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: tg as usize,
                    size: v,
                });
            }
        }
        let a = self.inner.data.borrow();
        let mut total = S::zero();
        let mut count = 0usize;
        // Softmax rows cached for the backward pass; ignored rows stay zero.
        let mut probs = vec![S::zero(); t * v];
        for (i, &tg) in targets.iter().enumerate() {
            if tg == ignore_id {
                continue;
            }
            count += 1;
            let row = &a[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for j in 0..v {
                probs[i * v + j] *= inv;
            }
            // lse - logit[target]
            total += sum.ln() + max - row[tg as usize];
        }
        drop(a);
        if count == 0 {
            return Err(TensorError::EmptyTarget);
        }
        let targets_c: Vec<u16> = targets.to_vec();
        let loss = Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            let go = g[0];
            let mut dl = vec![S::zero(); t * v];
            for (i, &tg) in targets_c.iter().enumerate() {
                if tg == ignore_id {
                    continue;
                }
                for j in 0..v {
                    let onehot = if j == tg as usize { S::one() } else { S::zero() };
                    dl[i * v + j] = (probs[i * v + j] - onehot) * go;
                }
            }
            vec![Some(dl)]
        });
        Ok((loss, count))
    }

    /// Mean negative log-likelihood over non-ignored positions.
    pub fn softmax_cross_entropy(&self, targets: &[u16], ignore_id: u16) -> Result<Tensor<S>> {
        let (sum, count) = self.cross_entropy_sum(targets, ignore_id)?;
        Ok(sum.scale(S::one() / S::from_usize(count).unwrap()))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode gradient accumulation from a scalar loss into every
    /// reachable node that requires gradients. The graph is acyclic by
    /// construction (ops only reference already-built nodes).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape().to_vec(),
            });
        }
        let order = topo_order(self);
        self.accumulate_grad(&[S::one()]);
        for node in order.iter().rev() {
            let Some(vjp) = node.inner.vjp.as_ref() else {
                continue;
            };
            // Intermediates release their gradient once consumed; leaves have
            // no VJP so their accumulated gradients survive for the optimizer.
            let Some(g) = node.inner.grad.borrow_mut().take() else {
                continue;
            };
            let parent_grads = vjp(&g);
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        parent.accumulate_grad(&pg);
                    }
                }
            }
        }
        Ok(())
    }
}

// Private helper so `from_op(...).ok_()` reads uniformly with fallible ops.
trait OkExt<S: Scalar> {
    fn ok_(self) -> Result<Tensor<S>>;
}
impl<S: Scalar> OkExt<S> for Tensor<S> {
    fn ok_(self) -> Result<Tensor<S>> {
        Ok(self)
    }
}

fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, emitted)) = stack.pop() {
        if emitted {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.inner.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

// ---- raw row-major kernels ----------------------------------------------

/// C[m,n] = A[m,k] . B[k,n]
fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] . B[k,n]^T  (rows dotted with rows)
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + kk] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T . B[m,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

// ---- named parameters ------------------------------------------------------

/// A named trainable leaf.
#[derive(Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
}

/// The ordered set of a model's parameters; names are unique.
pub struct ParamSet<S: Scalar> {
    items: Vec<Parameter<S>>,
    names: HashSet<String>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        ParamSet {
            items: Vec::new(),
            names: HashSet::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter leaf. Names must be unique.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        assert!(
            self.names.insert(name.to_string()),
            "duplicate parameter name {name:?}"
        );
        let t = Tensor::leaf(shape, data, true);
        self.items.push(Parameter {
            name: name.to_string(),
            value: t.clone(),
        });
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.items.iter().find(|p| p.name == name)
    }

    /// Total element count, optionally restricted to a name prefix.
    pub fn count_elements(&self, prefix: &str) -> usize {
        self.items
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.items {
            p.value.zero_grad();
        }
    }
}
