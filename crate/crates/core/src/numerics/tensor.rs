//! Reverse-mode autodiff on dense row-major f64 tensors.
//!
//! A [`Tensor`] is a cheap `Rc` handle onto a node of a dynamically built
//! tape.  Every op allocates a fresh contiguous output and, when gradients
//! are being tracked, stores a closure that routes the output's gradient
//! into its parents.  `backward` walks the tape once in reverse topological
//! order, so each node's closure runs exactly once per call and gradient
//! accumulation is deterministic.
//!
//! Design points that matter for reproducibility:
//!
//! * all reductions and kernels run in a fixed loop order, so the same
//!   values in the same shapes produce bit-identical results;
//! * batched matmuls process batch slices one at a time with the *same*
//!   inner kernel as the unbatched case, so a batch of one is bit-identical
//!   to the plain 2-D product;
//! * backward closures capture cloned inputs at construction time and only
//!   ever take a mutable borrow for the gradient they are writing, so
//!   aliased operands (`x * x`) are safe.
//!
//! Gradient tracking can be suspended for a scope with [`no_grad`] /
//! [`NoGradGuard`]; ops built inside such a scope are constants and keep no
//! parents, which keeps evaluation memory flat.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, SeqPeError};

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// RAII guard that disables gradient tracking on the current thread.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|f| f.replace(true));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|f| f.set(self.prev));
    }
}

/// Runs `f` with gradient tracking disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

fn tracking_enabled() -> bool {
    !NO_GRAD.with(|f| f.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct TensorInner {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to one tape node.  Cloning is O(1) and aliases the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        let preview: Vec<f64> = inner.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{{shape: {:?}, requires_grad: {}, data[..{}]: {:?}}}",
            inner.shape,
            inner.requires_grad,
            preview.len(),
            preview
        )
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(SeqPeError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "rank 0 tensors are not supported; use shape [1]".into(),
        });
    }
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return Err(SeqPeError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "zero-sized tensors are not supported".into(),
        });
    }
    Ok(numel)
}

impl Tensor {
    fn new_inner(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                data,
                shape,
                grad: None,
                requires_grad,
                parents,
                backward,
            })),
        }
    }

    /// Constant tensor (no gradient) from a flat row-major vector.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel = check_shape("from_vec", shape)?;
        if data.len() != numel {
            return Err(SeqPeError::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {} elements, got {}", numel, data.len()),
            });
        }
        Ok(Tensor::new_inner(data, shape.to_vec(), false, vec![], None))
    }

    /// Trainable leaf tensor; its gradient accumulates across backward calls
    /// until explicitly cleared.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    /// Constant tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape("zeros", shape)?;
        Ok(Tensor::new_inner(
            vec![0.0; numel],
            shape.to_vec(),
            false,
            vec![],
            None,
        ))
    }

    /// Constant scalar with shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_inner(vec![value], vec![1], false, vec![], None)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the tensor's data.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Runs `f` on the tensor's data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a scalar (shape `[1]`) tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(SeqPeError::NotScalar {
                numel: inner.data.len(),
            });
        }
        Ok(inner.data[0])
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the data of a leaf in place (optimizer steps, finite
    /// differences).  The shape is unchanged.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Constant copy of this tensor: same data, detached from the tape.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new_inner(inner.data.clone(), inner.shape.clone(), false, vec![], None)
    }

    fn grad_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        if inner.grad.is_none() {
            inner.grad = Some(vec![0.0; inner.data.len()]);
        }
        f(inner.grad.as_mut().unwrap())
    }

    fn make_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        args: &[&Tensor],
        backward: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        let track = tracking_enabled() && args.iter().any(|a| a.requires_grad());
        if !track {
            return Tensor::new_inner(data, shape, false, vec![], None);
        }
        let parents: Vec<Tensor> = args
            .iter()
            .filter(|a| a.requires_grad())
            .map(|a| (*a).clone())
            .collect();
        Tensor::new_inner(data, shape, true, parents, Some(Box::new(backward)))
    }

    /// Reverse pass from a scalar.  Gradients accumulate additively into
    /// every tensor with `requires_grad` reachable from this node.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(SeqPeError::NotScalar {
                    numel: inner.data.len(),
                });
            }
        }
        let order = topo_order(self);
        self.grad_mut(|g| g[0] += 1.0);
        for node in order.iter().rev() {
            let grad_copy: Option<Vec<f64>> = {
                let inner = node.inner.borrow();
                if inner.backward.is_some() {
                    Some(match &inner.grad {
                        Some(g) => g.clone(),
                        None => vec![0.0; inner.data.len()],
                    })
                } else {
                    None
                }
            };
            if let Some(g) = grad_copy {
                // The closure only borrows parents, never `node` itself, so
                // running it outside the borrow above is safe even when a
                // parent appears twice.
                let inner = node.inner.borrow();
                (inner.backward.as_ref().unwrap())(&g);
            }
        }
        Ok(())
    }
}

/// Deterministic post-order over the tape: parents before children, ties
/// broken by op argument order.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<*const RefCell<TensorInner>> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(Rc::as_ptr(&root.inner));
    stack.push((root.clone(), 0));
    while let Some((node, child)) = stack.pop() {
        let parent = {
            let inner = node.inner.borrow();
            inner.parents.get(child).cloned()
        };
        match parent {
            Some(p) => {
                stack.push((node, child + 1));
                if visited.insert(Rc::as_ptr(&p.inner)) {
                    stack.push((p, 0));
                }
            }
            None => order.push(node),
        }
    }
    order
}

// ---------------------------------------------------------------------------
// matmul kernels
//
// All three variants accumulate into `out` (callers pre-zero fresh buffers),
// and all keep a fixed i-k-j style loop order with contiguous inner loops so
// results are bit-stable and the autovectorizer has something to chew on.
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = i * k;
        let orow = i * n;
        for l in 0..k {
            let av = a[arow + l];
            if av == 0.0 {
                continue;
            }
            let brow = l * n;
            let (bs, os) = (&b[brow..brow + n], &mut out[orow..orow + n]);
            for j in 0..n {
                os[j] += av * bs[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (row-by-row dot products)
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = i * n;
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc0 = 0.0;
            let mut acc1 = 0.0;
            let mut acc2 = 0.0;
            let mut acc3 = 0.0;
            let chunks = k / 4;
            for c in 0..chunks {
                let base = c * 4;
                acc0 += arow[base] * brow[base];
                acc1 += arow[base + 1] * brow[base + 1];
                acc2 += arow[base + 2] * brow[base + 2];
                acc3 += arow[base + 3] * brow[base + 3];
            }
            let mut acc = (acc0 + acc1) + (acc2 + acc3);
            for t in chunks * 4..k {
                acc += arow[t] * brow[t];
            }
            out[orow + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for l in 0..k {
        let arow = l * m;
        let brow = l * n;
        for i in 0..m {
            let av = a[arow + i];
            if av == 0.0 {
                continue;
            }
            let orow = i * n;
            let (bs, os) = (&b[brow..brow + n], &mut out[orow..orow + n]);
            for j in 0..n {
                os[j] += av * bs[j];
            }
        }
    }
}

/// How the right-hand operand of a batched matmul is laid out.
#[derive(Clone, Copy, PartialEq)]
enum RhsKind {
    /// rhs carries the same batch prefix as lhs.
    Batched,
    /// rhs is a single matrix shared by every batch slice.
    Shared,
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    // shape = [batch..., rows, cols]; returns (batch, rows, cols)
    let rank = shape.len();
    let rows = shape[rank - 2];
    let cols = shape[rank - 1];
    let batch: usize = shape[..rank - 2].iter().product();
    (batch, rows, cols)
}

fn matmul_check(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
    transposed_rhs: bool,
) -> Result<(usize, usize, usize, usize, RhsKind, Vec<usize>)> {
    if lhs.len() < 2 || rhs.len() < 2 {
        return Err(SeqPeError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let (batch, m, k) = split_batch(lhs);
    let (rk, rn) = {
        let r = rhs.len();
        if transposed_rhs {
            (rhs[r - 1], rhs[r - 2])
        } else {
            (rhs[r - 2], rhs[r - 1])
        }
    };
    if rk != k {
        return Err(SeqPeError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let kind = if rhs.len() == 2 {
        RhsKind::Shared
    } else if rhs[..rhs.len() - 2] == lhs[..lhs.len() - 2] {
        RhsKind::Batched
    } else {
        return Err(SeqPeError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    };
    let mut out_shape = lhs[..lhs.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(rn);
    Ok((batch, m, k, rn, kind, out_shape))
}

impl Tensor {
    /// Batched matrix product `self @ rhs`.
    ///
    /// `self` is `[batch..., m, k]`; `rhs` is either `[k, n]` (shared across
    /// the batch) or `[batch..., k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_impl(rhs, false)
    }

    /// Batched matrix product against a transposed right operand:
    /// `self @ rhs^T` where `rhs` is `[n, k]` or `[batch..., n, k]`.
    ///
    /// This is the natural layout for attention scores (`q @ k^T`) and Gram
    /// matrices, and avoids materialising any transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor, transposed: bool) -> Result<Tensor> {
        let op = if transposed { "matmul_nt" } else { "matmul" };
        let (lshape, rshape) = (self.shape(), rhs.shape());
        let (batch, m, k, n, kind, out_shape) = matmul_check(op, &lshape, &rshape, transposed)?;
        let a = self.inner.borrow();
        let b = rhs.inner.borrow();
        let mut out = vec![0.0; batch * m * n];
        for s in 0..batch {
            let asl = &a.data[s * m * k..(s + 1) * m * k];
            let bsl = match kind {
                RhsKind::Shared => &b.data[..],
                RhsKind::Batched => &b.data[s * k * n..(s + 1) * k * n],
            };
            let osl = &mut out[s * m * n..(s + 1) * m * n];
            if transposed {
                mm_nt(asl, bsl, m, k, n, osl);
            } else {
                mm_nn(asl, bsl, m, k, n, osl);
            }
        }
        drop(a);
        drop(b);

        let a_data = if rhs.requires_grad() {
            Some(self.to_vec())
        } else {
            None
        };
        let b_data = if self.requires_grad() {
            Some(rhs.to_vec())
        } else {
            None
        };
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        let backward = move |g: &[f64]| {
            if lhs_t.requires_grad() {
                let bd = b_data.as_ref().unwrap();
                lhs_t.grad_mut(|ga| {
                    for s in 0..batch {
                        let gsl = &g[s * m * n..(s + 1) * m * n];
                        let bsl = match kind {
                            RhsKind::Shared => &bd[..],
                            RhsKind::Batched => &bd[s * k * n..(s + 1) * k * n],
                        };
                        let asl = &mut ga[s * m * k..(s + 1) * m * k];
                        if transposed {
                            // dA = dC @ B (B stored [n, k])
                            mm_nn(gsl, bsl, m, n, k, asl);
                        } else {
                            // dA = dC @ B^T
                            mm_nt(gsl, bsl, m, n, k, asl);
                        }
                    }
                });
            }
            if rhs_t.requires_grad() {
                let ad = a_data.as_ref().unwrap();
                rhs_t.grad_mut(|gb| {
                    for s in 0..batch {
                        let gsl = &g[s * m * n..(s + 1) * m * n];
                        let asl = &ad[s * m * k..(s + 1) * m * k];
                        let bsl = match kind {
                            RhsKind::Shared => &mut gb[..],
                            RhsKind::Batched => &mut gb[s * k * n..(s + 1) * k * n],
                        };
                        if transposed {
                            // dB = dC^T @ A  (dB stored [n, k])
                            mm_tn(gsl, asl, n, m, k, bsl);
                        } else {
                            // dB = A^T @ dC
                            mm_tn(asl, gsl, k, m, n, bsl);
                        }
                    }
                });
            }
        };
        Ok(Tensor::make_op(out, out_shape, &[self, rhs], backward))
    }
}

// ---------------------------------------------------------------------------
// elementwise and broadcast ops
// ---------------------------------------------------------------------------

fn broadcast_check(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    // rhs must equal lhs or be a trailing suffix of it; returns rhs numel.
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(SeqPeError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    Ok(rhs.iter().product())
}

impl Tensor {
    /// Elementwise sum; `rhs` may be a trailing-suffix shape of `self`
    /// (e.g. adding a `[d]` bias to `[b, l, d]` activations), in which case
    /// it is tiled over the leading dimensions.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bin_broadcast(rhs, "add")
    }

    /// Elementwise difference with the same broadcast rule as [`Tensor::add`].
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bin_broadcast(rhs, "sub")
    }

    /// Elementwise (Hadamard) product with the same broadcast rule as
    /// [`Tensor::add`].
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bin_broadcast(rhs, "mul")
    }

    fn bin_broadcast(&self, rhs: &Tensor, op: &'static str) -> Result<Tensor> {
        let (lshape, rshape) = (self.shape(), rhs.shape());
        let bn = broadcast_check(op, &lshape, &rshape)?;
        let out = {
            let a = self.inner.borrow();
            let b = rhs.inner.borrow();
            let mut out = a.data.clone();
            match op {
                "add" => {
                    for (chunk, _) in out.chunks_mut(bn).zip(0..) {
                        for (o, bv) in chunk.iter_mut().zip(&b.data) {
                            *o += bv;
                        }
                    }
                }
                "sub" => {
                    for chunk in out.chunks_mut(bn) {
                        for (o, bv) in chunk.iter_mut().zip(&b.data) {
                            *o -= bv;
                        }
                    }
                }
                "mul" => {
                    for chunk in out.chunks_mut(bn) {
                        for (o, bv) in chunk.iter_mut().zip(&b.data) {
                            *o *= bv;
                        }
                    }
                }
                _ => unreachable!(),
            }
            out
        };
        let a_data = if rhs.requires_grad() && op == "mul" {
            Some(self.to_vec())
        } else {
            None
        };
        let b_data = if self.requires_grad() && op == "mul" {
            Some(rhs.to_vec())
        } else {
            None
        };
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        let backward = move |g: &[f64]| {
            match op {
                "add" | "sub" => {
                    let sign = if op == "sub" { -1.0 } else { 1.0 };
                    if lhs_t.requires_grad() {
                        lhs_t.grad_mut(|ga| {
                            for (gv, av) in g.iter().zip(ga.iter_mut()) {
                                *av += gv;
                            }
                        });
                    }
                    if rhs_t.requires_grad() {
                        rhs_t.grad_mut(|gb| {
                            for chunk in g.chunks(bn) {
                                for (bv, gv) in gb.iter_mut().zip(chunk) {
                                    *bv += sign * gv;
                                }
                            }
                        });
                    }
                }
                "mul" => {
                    if lhs_t.requires_grad() {
                        let bd = b_data.as_ref().unwrap();
                        lhs_t.grad_mut(|ga| {
                            for (chunk, gchunk) in ga.chunks_mut(bn).zip(g.chunks(bn)) {
                                for ((av, gv), bv) in chunk.iter_mut().zip(gchunk).zip(bd) {
                                    *av += gv * bv;
                                }
                            }
                        });
                    }
                    if rhs_t.requires_grad() {
                        let ad = a_data.as_ref().unwrap();
                        rhs_t.grad_mut(|gb| {
                            for (achunk, gchunk) in ad.chunks(bn).zip(g.chunks(bn)) {
                                for ((bv, gv), av) in gb.iter_mut().zip(gchunk).zip(achunk) {
                                    *bv += gv * av;
                                }
                            }
                        });
                    }
                }
                _ => unreachable!(),
            }
        };
        Ok(Tensor::make_op(out, lshape, &[self, rhs], backward))
    }

    /// Adds a scalar to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.borrow().data.iter().map(|v| v + c).collect();
        let shape = self.shape();
        let t = self.clone();
        Tensor::make_op(out, shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for (av, gv) in ga.iter_mut().zip(g) {
                        *av += gv;
                    }
                });
            }
        })
    }

    /// Multiplies every element by a scalar.
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.borrow().data.iter().map(|v| v * c).collect();
        let shape = self.shape();
        let t = self.clone();
        Tensor::make_op(out, shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for (av, gv) in ga.iter_mut().zip(g) {
                        *av += c * gv;
                    }
                });
            }
        })
    }

    /// Elementwise negation.
    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// GELU activation (tanh approximation), applied elementwise.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x_data = self.to_vec();
        let out: Vec<f64> = x_data
            .iter()
            .map(|&x| {
                let u = C * (x + A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let shape = self.shape();
        let t = self.clone();
        Tensor::make_op(out, shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for ((av, gv), &x) in ga.iter_mut().zip(g).zip(&x_data) {
                        let u = C * (x + A * x * x * x);
                        let th = u.tanh();
                        let du = C * (1.0 + 3.0 * A * x * x);
                        let d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                        *av += gv * d;
                    }
                });
            }
        })
    }
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// Copies the data into a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape("reshape", shape)?;
        if numel != self.numel() {
            return Err(SeqPeError::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements as {:?}", self.numel(), shape),
            });
        }
        let out = self.to_vec();
        let t = self.clone();
        Ok(Tensor::make_op(out, shape.to_vec(), &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for (av, gv) in ga.iter_mut().zip(g) {
                        *av += gv;
                    }
                });
            }
        }))
    }

    /// Slice `len` entries of the last dimension starting at `start`.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        let last = *shape.last().unwrap();
        if len == 0 || start + len > last {
            return Err(SeqPeError::BadShape {
                op: "narrow_last",
                shape: shape.clone(),
                reason: format!("slice {}..{} out of last dim {}", start, start + len, last),
            });
        }
        let rows = self.numel() / last;
        let mut out = Vec::with_capacity(rows * len);
        {
            let inner = self.inner.borrow();
            for r in 0..rows {
                let base = r * last + start;
                out.extend_from_slice(&inner.data[base..base + len]);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let t = self.clone();
        Ok(Tensor::make_op(out, out_shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for r in 0..rows {
                        let base = r * last + start;
                        let gbase = r * len;
                        for j in 0..len {
                            ga[base + j] += g[gbase + j];
                        }
                    }
                });
            }
        }))
    }

    /// Concatenates tensors along the last dimension.  All parts must agree
    /// on every dimension except the last.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SeqPeError::BadShape {
                op: "concat_last",
                shape: vec![],
                reason: "no tensors to concatenate".into(),
            });
        }
        let first_shape = parts[0].shape();
        let lead = &first_shape[..first_shape.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first_shape.len() || s[..s.len() - 1] != *lead {
                return Err(SeqPeError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first_shape.clone(),
                    rhs: s,
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        {
            let mut col = 0usize;
            for (p, &w) in parts.iter().zip(&widths) {
                let inner = p.inner.borrow();
                for r in 0..rows {
                    out[r * total + col..r * total + col + w]
                        .copy_from_slice(&inner.data[r * w..(r + 1) * w]);
                }
                col += w;
            }
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total);
        let owned: Vec<Tensor> = parts.to_vec();
        let widths_cl = widths.clone();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::make_op(out, out_shape, &refs, move |g| {
            let mut col = 0usize;
            for (p, &w) in owned.iter().zip(&widths_cl) {
                if p.requires_grad() {
                    p.grad_mut(|gp| {
                        for r in 0..rows {
                            let gbase = r * total + col;
                            for j in 0..w {
                                gp[r * w + j] += g[gbase + j];
                            }
                        }
                    });
                }
                col += w;
            }
        }))
    }

    /// Stacks 2-D tensors vertically: parts of shapes `[r_i, c]` become
    /// `[sum r_i, c]`.  The backward pass hands each part its row block.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SeqPeError::BadShape {
                op: "concat_rows",
                shape: vec![],
                reason: "no tensors to stack".into(),
            });
        }
        let first_shape = parts[0].shape();
        if first_shape.len() != 2 {
            return Err(SeqPeError::BadShape {
                op: "concat_rows",
                shape: first_shape,
                reason: "expected 2-D tensors".into(),
            });
        }
        let cols = first_shape[1];
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(SeqPeError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: s,
                });
            }
            row_counts.push(s[0]);
        }
        let total_rows: usize = row_counts.iter().sum();
        let mut out = Vec::with_capacity(total_rows * cols);
        for p in parts {
            out.extend_from_slice(&p.inner.borrow().data);
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let counts_cl = row_counts.clone();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::make_op(
            out,
            vec![total_rows, cols],
            &refs,
            move |g| {
                let mut row = 0usize;
                for (p, &r) in owned.iter().zip(&counts_cl) {
                    if p.requires_grad() {
                        p.grad_mut(|gp| {
                            let base = row * cols;
                            for (dst, src) in gp.iter_mut().zip(&g[base..base + r * cols]) {
                                *dst += src;
                            }
                        });
                    }
                    row += r;
                }
            },
        ))
    }

    /// Gathers rows of a 2-D tensor: `out[i, :] = self[ids[i], :]`.
    /// The backward pass scatter-adds row gradients, so this doubles as the
    /// embedding lookup.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(SeqPeError::BadShape {
                op: "select_rows",
                shape,
                reason: "expected a 2-D table".into(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &id in ids {
            if id >= rows {
                return Err(SeqPeError::TokenOutOfRange {
                    what: "select_rows",
                    id,
                    rows,
                });
            }
        }
        if ids.is_empty() {
            return Err(SeqPeError::BadShape {
                op: "select_rows",
                shape,
                reason: "empty id list".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        {
            let inner = self.inner.borrow();
            for &id in ids {
                out.extend_from_slice(&inner.data[id * cols..(id + 1) * cols]);
            }
        }
        let out_shape = vec![ids.len(), cols];
        let ids_cl = ids.to_vec();
        let t = self.clone();
        Ok(Tensor::make_op(out, out_shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for (i, &id) in ids_cl.iter().enumerate() {
                        let gbase = i * cols;
                        let abase = id * cols;
                        for j in 0..cols {
                            ga[abase + j] += g[gbase + j];
                        }
                    }
                });
            }
        }))
    }

    /// Picks one entry per row of a 2-D tensor: `out[i] = self[i, ids[i]]`.
    pub fn pick_last(&self, ids: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || ids.len() != shape[0] {
            return Err(SeqPeError::BadShape {
                op: "pick_last",
                shape,
                reason: format!("expected [rows, cols] with {} ids", ids.len()),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &id in ids {
            if id >= cols {
                return Err(SeqPeError::TokenOutOfRange {
                    what: "pick_last",
                    id,
                    rows: cols,
                });
            }
        }
        let inner = self.inner.borrow();
        let out: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| inner.data[i * cols + id])
            .collect();
        drop(inner);
        let ids_cl = ids.to_vec();
        let t = self.clone();
        Ok(Tensor::make_op(out, vec![rows], &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for (i, &id) in ids_cl.iter().enumerate() {
                        ga[i * cols + id] += g[i];
                    }
                });
            }
        }))
    }
}

// ---------------------------------------------------------------------------
// reductions and row ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.inner.borrow().data.iter().sum();
        let t = self.clone();
        Tensor::make_op(vec![total], vec![1], &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for av in ga.iter_mut() {
                        *av += g[0];
                    }
                });
            }
        })
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Softmax over the last dimension, numerically stabilised by the row
    /// max.  Rows may contain `-inf` entries (masked positions); they get
    /// probability exactly 0 and gradient exactly 0.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape();
        let last = *shape.last().unwrap();
        let rows = self.numel() / last;
        let mut out = vec![0.0; rows * last];
        {
            let inner = self.inner.borrow();
            for r in 0..rows {
                let xs = &inner.data[r * last..(r + 1) * last];
                let os = &mut out[r * last..(r + 1) * last];
                softmax_row(xs, os);
            }
        }
        let saved = out.clone();
        let t = self.clone();
        Tensor::make_op(out, shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for r in 0..rows {
                        let s = &saved[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let mut dot = 0.0;
                        for j in 0..last {
                            dot += gr[j] * s[j];
                        }
                        let ar = &mut ga[r * last..(r + 1) * last];
                        for j in 0..last {
                            ar[j] += s[j] * (gr[j] - dot);
                        }
                    }
                });
            }
        })
    }

    /// Log-softmax over the last dimension (fused, max-stabilised).
    pub fn log_softmax_last(&self) -> Tensor {
        let shape = self.shape();
        let last = *shape.last().unwrap();
        let rows = self.numel() / last;
        let mut out = vec![0.0; rows * last];
        {
            let inner = self.inner.borrow();
            for r in 0..rows {
                let xs = &inner.data[r * last..(r + 1) * last];
                let os = &mut out[r * last..(r + 1) * last];
                let mx = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for &x in xs {
                    z += (x - mx).exp();
                }
                let lz = z.ln() + mx;
                for (o, &x) in os.iter_mut().zip(xs) {
                    *o = x - lz;
                }
            }
        }
        let saved = out.clone();
        let t = self.clone();
        Tensor::make_op(out, shape, &[self], move |g| {
            if t.requires_grad() {
                t.grad_mut(|ga| {
                    for r in 0..rows {
                        let lr = &saved[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let gsum: f64 = gr.iter().sum();
                        let ar = &mut ga[r * last..(r + 1) * last];
                        for j in 0..last {
                            ar[j] += gr[j] - lr[j].exp() * gsum;
                        }
                    }
                });
            }
        })
    }

    /// Layer normalisation over the last dimension with learnable gain and
    /// bias: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let last = *shape.last().unwrap();
        if gamma.shape() != [last] || beta.shape() != [last] {
            return Err(SeqPeError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let rows = self.numel() / last;
        let mut out = vec![0.0; rows * last];
        let mut xhat = vec![0.0; rows * last];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.inner.borrow();
            let ga = gamma.inner.borrow();
            let be = beta.inner.borrow();
            for r in 0..rows {
                let xs = &x.data[r * last..(r + 1) * last];
                let mean: f64 = xs.iter().sum::<f64>() / last as f64;
                let var: f64 = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..last {
                    let xh = (xs[j] - mean) * inv;
                    xhat[r * last + j] = xh;
                    out[r * last + j] = ga.data[j] * xh + be.data[j];
                }
            }
        }
        let gamma_data = gamma.to_vec();
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::make_op(
            out,
            shape,
            &[self, gamma, beta],
            move |g| {
                if gt.requires_grad() {
                    gt.grad_mut(|gg| {
                        for r in 0..rows {
                            for j in 0..last {
                                gg[j] += g[r * last + j] * xhat[r * last + j];
                            }
                        }
                    });
                }
                if bt.requires_grad() {
                    bt.grad_mut(|gb| {
                        for r in 0..rows {
                            for j in 0..last {
                                gb[j] += g[r * last + j];
                            }
                        }
                    });
                }
                if xt.requires_grad() {
                    xt.grad_mut(|gx| {
                        let n = last as f64;
                        for r in 0..rows {
                            let gr = &g[r * last..(r + 1) * last];
                            let xh = &xhat[r * last..(r + 1) * last];
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..last {
                                let dxh = gr[j] * gamma_data[j];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xh[j];
                            }
                            let inv = inv_std[r];
                            for j in 0..last {
                                let dxh = gr[j] * gamma_data[j];
                                gx[r * last + j] +=
                                    inv * (dxh - sum_dxhat / n - xh[j] * sum_dxhat_xhat / n);
                            }
                        }
                    });
                }
            },
        ))
    }

    /// Rotates feature pairs `(2t, 2t+1)` of each row by angles given in
    /// `cos`/`sin` tables of shape `[l, d/2]` (flattened row-major), where
    /// `self` is `[..., l, d]`.  The tables are plain data, so gradients only
    /// flow through the rotated input (backward applies the inverse
    /// rotation).
    pub fn rope_rotate(&self, cos: &[f64], sin: &[f64]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(SeqPeError::BadShape {
                op: "rope_rotate",
                shape,
                reason: "expected at least 2 dims [l, d]".into(),
            });
        }
        let d = *shape.last().unwrap();
        let l = shape[shape.len() - 2];
        if d % 2 != 0 {
            return Err(SeqPeError::UnevenSplit {
                what: "rope_rotate",
                width: d,
                parts: 2,
            });
        }
        let half = d / 2;
        if cos.len() != l * half || sin.len() != l * half {
            return Err(SeqPeError::BadShape {
                op: "rope_rotate",
                shape,
                reason: format!(
                    "angle tables hold {} entries, expected {} (= {} rows x {})",
                    cos.len(),
                    l * half,
                    l,
                    half
                ),
            });
        }
        let batch = self.numel() / (l * d);
        let mut out = vec![0.0; self.numel()];
        {
            let inner = self.inner.borrow();
            for s in 0..batch {
                for r in 0..l {
                    let base = (s * l + r) * d;
                    for t in 0..half {
                        let (c, sn) = (cos[r * half + t], sin[r * half + t]);
                        let x0 = inner.data[base + 2 * t];
                        let x1 = inner.data[base + 2 * t + 1];
                        out[base + 2 * t] = x0 * c - x1 * sn;
                        out[base + 2 * t + 1] = x0 * sn + x1 * c;
                    }
                }
            }
        }
        let (cos_cl, sin_cl) = (cos.to_vec(), sin.to_vec());
        let t_self = self.clone();
        Ok(Tensor::make_op(out, shape, &[self], move |g| {
            if t_self.requires_grad() {
                t_self.grad_mut(|ga| {
                    for s in 0..batch {
                        for r in 0..l {
                            let base = (s * l + r) * d;
                            for t in 0..half {
                                let (c, sn) = (cos_cl[r * half + t], sin_cl[r * half + t]);
                                let g0 = g[base + 2 * t];
                                let g1 = g[base + 2 * t + 1];
                                ga[base + 2 * t] += g0 * c + g1 * sn;
                                ga[base + 2 * t + 1] += -g0 * sn + g1 * c;
                            }
                        }
                    }
                });
            }
        }))
    }
}

/// Max-stabilised softmax of one row into `out`.  `-inf` inputs map to 0.
pub(crate) fn softmax_row(xs: &[f64], out: &mut [f64]) {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - mx).exp();
        *o = e;
        z += e;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
