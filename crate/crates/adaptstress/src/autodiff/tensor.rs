//! Taped tensor with reverse-mode gradients.
//!
//! Every differentiable op records its parents and a closure that maps the
//! output gradient onto them. [`Tensor::backward`] topologically sorts the
//! recorded graph from a scalar loss and runs the closures in reverse. The
//! graph is released when the loss value is dropped; parameters (leaves)
//! survive across steps and keep their accumulated gradients until cleared.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::Error;
use crate::Result;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled on this thread. Ops called
/// inside produce constant tensors with no tape, which makes pure inference
/// (prediction, explanation) cheap.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Shared handle to one tensor node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

fn check_finite(data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "tensor holds a non-finite value"
    );
}

impl Tensor {
    fn new(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        check_finite(&data);
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward_fn,
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// A trainable leaf. Gradients accumulate here across backward calls.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites leaf data in place (optimizer updates between graphs).
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.len());
        check_finite(&data);
        *self.0.data.borrow_mut() = data;
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Runs reverse-mode accumulation from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative post-order: (node, child_cursor)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.0.parents.len() {
                let parent = node.0.parents[cursor].clone();
                stack.push((node, cursor + 1));
                if visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }
        self.accumulate(&[1.0]);
        for node in topo.iter().rev() {
            if let Some(f) = &node.0.backward_fn {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    f(&g);
                }
            }
        }
        // intermediate gradients are not interesting after the pass
        for node in topo.iter().rev() {
            if node.0.backward_fn.is_some() {
                node.clear_grad();
            }
        }
        Ok(())
    }

    fn unary(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl Fn(&Tensor, &[f64]) + 'static,
    ) -> Tensor {
        if grad_enabled() && self.0.requires_grad {
            let parent = self.clone();
            let p = self.clone();
            Tensor::new(
                shape,
                data,
                true,
                vec![parent],
                Some(Box::new(move |go| backward(&p, go))),
            )
        } else {
            Tensor::new(shape, data, false, Vec::new(), None)
        }
    }

    fn binary(
        &self,
        other: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl Fn(&Tensor, &Tensor, &[f64]) + 'static,
    ) -> Tensor {
        let track = grad_enabled() && (self.0.requires_grad || other.0.requires_grad);
        if track {
            let mut parents = Vec::new();
            if self.0.requires_grad {
                parents.push(self.clone());
            }
            if other.0.requires_grad {
                parents.push(other.clone());
            }
            let a = self.clone();
            let b = other.clone();
            Tensor::new(
                shape,
                data,
                true,
                parents,
                Some(Box::new(move |go| backward(&a, &b, go))),
            )
        } else {
            Tensor::new(shape, data, false, Vec::new(), None)
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = zip_map(&self.0.data.borrow(), &other.0.data.borrow(), |a, b| a + b);
        self.binary(other, self.0.shape.clone(), data, |a, b, go| {
            if a.0.requires_grad {
                a.accumulate(go);
            }
            if b.0.requires_grad {
                b.accumulate(go);
            }
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = zip_map(&self.0.data.borrow(), &other.0.data.borrow(), |a, b| a - b);
        self.binary(other, self.0.shape.clone(), data, |a, b, go| {
            if a.0.requires_grad {
                a.accumulate(go);
            }
            if b.0.requires_grad {
                let neg: Vec<f64> = go.iter().map(|g| -g).collect();
                b.accumulate(&neg);
            }
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = zip_map(&self.0.data.borrow(), &other.0.data.borrow(), |a, b| a * b);
        self.binary(other, self.0.shape.clone(), data, |a, b, go| {
            if a.0.requires_grad {
                let bd = b.0.data.borrow();
                let g: Vec<f64> = go.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                a.accumulate(&g);
            }
            if b.0.requires_grad {
                let ad = a.0.data.borrow();
                let g: Vec<f64> = go.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                b.accumulate(&g);
            }
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|v| v * c).collect();
        self.unary(self.0.shape.clone(), data, move |a, go| {
            let g: Vec<f64> = go.iter().map(|g| g * c).collect();
            a.accumulate(&g);
        })
    }

    /// Smooth GELU (tanh form), chosen over ReLU so finite-difference
    /// gradient checks are not polluted by the kink at zero.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data: Vec<f64> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        self.unary(self.0.shape.clone(), data, move |a, go| {
            let ad = a.0.data.borrow();
            let g: Vec<f64> = go
                .iter()
                .zip(ad.iter())
                .map(|(&g, &x)| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            drop(ad);
            a.accumulate(&g);
        })
    }

    /// Elementwise sqrt(x + eps); used for window standard deviations.
    pub fn sqrt_eps(&self, eps: f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|v| (v + eps).sqrt()).collect();
        let out_copy = data.clone();
        self.unary(self.0.shape.clone(), data, move |a, go| {
            let g: Vec<f64> = go
                .iter()
                .zip(out_copy.iter())
                .map(|(g, y)| g * 0.5 / y)
                .collect();
            a.accumulate(&g);
        })
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        let data = self.to_vec();
        self.unary(shape.to_vec(), data, |a, go| {
            a.accumulate(go);
        })
    }

    /// Reorders axes; `axes` is a permutation of 0..rank.
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let (data, shape) = permute_data(&self.0.data.borrow(), &self.0.shape, axes);
        let inv = inverse_permutation(axes);
        self.unary(shape.clone(), data, move |a, go| {
            let (g, _) = permute_data(go, &shape, &inv);
            a.accumulate(&g);
        })
    }

    /// Concatenates along the last axis; leading dims must match.
    pub fn concat_last(&self, other: &Tensor) -> Tensor {
        let ra = self.shape();
        let rb = other.shape();
        assert_eq!(ra[..ra.len() - 1], rb[..rb.len() - 1], "concat leading dims");
        let na = ra[ra.len() - 1];
        let nb = rb[rb.len() - 1];
        let rows = self.len() / na;
        let mut shape = ra.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let ad = self.0.data.borrow();
        let bd = other.0.data.borrow();
        let mut data = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            data.extend_from_slice(&ad[r * na..(r + 1) * na]);
            data.extend_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        drop(ad);
        drop(bd);
        self.binary(other, shape, data, move |a, b, go| {
            if a.0.requires_grad {
                let mut g = vec![0.0; rows * na];
                for r in 0..rows {
                    g[r * na..(r + 1) * na]
                        .copy_from_slice(&go[r * (na + nb)..r * (na + nb) + na]);
                }
                a.accumulate(&g);
            }
            if b.0.requires_grad {
                let mut g = vec![0.0; rows * nb];
                for r in 0..rows {
                    g[r * nb..(r + 1) * nb]
                        .copy_from_slice(&go[r * (na + nb) + na..(r + 1) * (na + nb)]);
                }
                b.accumulate(&g);
            }
        })
    }

    // ---- linear algebra ----

    /// `[..., K] × [K, N] -> [..., N]`; leading axes are treated as rows.
    pub fn matmul(&self, w: &Tensor) -> Tensor {
        let k = *self.shape().last().expect("matmul on rank-0");
        assert_eq!(w.shape().len(), 2, "weight must be 2-d");
        assert_eq!(w.shape()[0], k, "matmul inner dim");
        let n = w.shape()[1];
        let rows = self.len() / k;
        let out = matmul_raw(&self.0.data.borrow(), &w.0.data.borrow(), rows, k, n);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.binary(w, shape, out, move |a, b, go| {
            if a.0.requires_grad {
                // grad_a = go × w^T
                let bd = b.0.data.borrow();
                let mut g = vec![0.0; rows * k];
                for r in 0..rows {
                    for j in 0..n {
                        let gv = go[r * n + j];
                        if gv != 0.0 {
                            for i in 0..k {
                                g[r * k + i] += gv * bd[i * n + j];
                            }
                        }
                    }
                }
                drop(bd);
                a.accumulate(&g);
            }
            if b.0.requires_grad {
                // grad_w = a^T × go
                let ad = a.0.data.borrow();
                let mut g = vec![0.0; k * n];
                for r in 0..rows {
                    for i in 0..k {
                        let av = ad[r * k + i];
                        if av != 0.0 {
                            for j in 0..n {
                                g[i * n + j] += av * go[r * n + j];
                            }
                        }
                    }
                }
                drop(ad);
                b.accumulate(&g);
            }
        })
    }

    /// Batched matmul: `[..., M, K] × [..., K, N] -> [..., M, N]` with equal
    /// leading axes.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let ra = self.shape();
        let rb = other.shape();
        assert!(ra.len() >= 2 && rb.len() >= 2, "bmm needs rank >= 2");
        assert_eq!(ra[..ra.len() - 2], rb[..rb.len() - 2], "bmm leading dims");
        let m = ra[ra.len() - 2];
        let k = ra[ra.len() - 1];
        assert_eq!(rb[rb.len() - 2], k, "bmm inner dim");
        let n = rb[rb.len() - 1];
        let batches = self.len() / (m * k);
        let ad = self.0.data.borrow();
        let bd = other.0.data.borrow();
        let mut out = vec![0.0; batches * m * n];
        for l in 0..batches {
            matmul_into(
                &ad[l * m * k..(l + 1) * m * k],
                &bd[l * k * n..(l + 1) * k * n],
                &mut out[l * m * n..(l + 1) * m * n],
                m,
                k,
                n,
            );
        }
        drop(ad);
        drop(bd);
        let mut shape = ra[..ra.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        self.binary(other, shape, out, move |a, b, go| {
            if a.0.requires_grad {
                // grad_a[l] = go[l] × b[l]^T
                let bd = b.0.data.borrow();
                let mut g = vec![0.0; batches * m * k];
                for l in 0..batches {
                    let gol = &go[l * m * n..(l + 1) * m * n];
                    let bl = &bd[l * k * n..(l + 1) * k * n];
                    let gl = &mut g[l * m * k..(l + 1) * m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = gol[r * n + j];
                            if gv != 0.0 {
                                for i in 0..k {
                                    gl[r * k + i] += gv * bl[i * n + j];
                                }
                            }
                        }
                    }
                }
                drop(bd);
                a.accumulate(&g);
            }
            if b.0.requires_grad {
                // grad_b[l] = a[l]^T × go[l]
                let ad = a.0.data.borrow();
                let mut g = vec![0.0; batches * k * n];
                for l in 0..batches {
                    let gol = &go[l * m * n..(l + 1) * m * n];
                    let al = &ad[l * m * k..(l + 1) * m * k];
                    let gl = &mut g[l * k * n..(l + 1) * k * n];
                    for r in 0..m {
                        for i in 0..k {
                            let av = al[r * k + i];
                            if av != 0.0 {
                                for j in 0..n {
                                    gl[i * n + j] += av * gol[r * n + j];
                                }
                            }
                        }
                    }
                }
                drop(ad);
                b.accumulate(&g);
            }
        })
    }

    // ---- broadcasts ----

    /// `[..., N] + [N]`, the bias-add.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let n = *self.shape().last().unwrap();
        assert_eq!(bias.shape(), &[n], "bias shape");
        let rows = self.len() / n;
        let ad = self.0.data.borrow();
        let bd = bias.0.data.borrow();
        let mut data = Vec::with_capacity(ad.len());
        for r in 0..rows {
            for i in 0..n {
                data.push(ad[r * n + i] + bd[i]);
            }
        }
        drop(ad);
        drop(bd);
        self.binary(bias, self.0.shape.clone(), data, move |a, b, go| {
            if a.0.requires_grad {
                a.accumulate(go);
            }
            if b.0.requires_grad {
                let mut g = vec![0.0; n];
                for r in 0..rows {
                    for i in 0..n {
                        g[i] += go[r * n + i];
                    }
                }
                b.accumulate(&g);
            }
        })
    }

    /// `[B, T, M] + [T, M]` broadcast over the batch axis (position codes).
    pub fn add_bcast_batch(&self, table: &Tensor) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 3);
        let (b, t, m) = (s[0], s[1], s[2]);
        assert_eq!(table.shape(), &[t, m], "broadcast table shape");
        let ad = self.0.data.borrow();
        let td = table.0.data.borrow();
        let mut data = Vec::with_capacity(ad.len());
        for bi in 0..b {
            for i in 0..t * m {
                data.push(ad[bi * t * m + i] + td[i]);
            }
        }
        drop(ad);
        drop(td);
        self.binary(table, s.to_vec(), data, move |x, tab, go| {
            if x.0.requires_grad {
                x.accumulate(go);
            }
            if tab.0.requires_grad {
                let mut g = vec![0.0; t * m];
                for bi in 0..b {
                    for i in 0..t * m {
                        g[i] += go[bi * t * m + i];
                    }
                }
                tab.accumulate(&g);
            }
        })
    }

    /// `[B, T, D] - [B, D]` broadcast over the middle axis.
    pub fn sub_bcast_mid(&self, m: &Tensor) -> Tensor {
        self.bcast_mid(m, |a, b| a - b, 1.0, -1.0)
    }

    /// `[B, T, D] * [B, D]` broadcast over the middle axis (column scaling).
    pub fn mul_bcast_mid(&self, w: &Tensor) -> Tensor {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(w.shape(), &[b, d], "column weights shape");
        let ad = self.0.data.borrow();
        let wd = w.0.data.borrow();
        let mut data = Vec::with_capacity(ad.len());
        for bi in 0..b {
            for ti in 0..t {
                for di in 0..d {
                    data.push(ad[(bi * t + ti) * d + di] * wd[bi * d + di]);
                }
            }
        }
        drop(ad);
        drop(wd);
        self.binary(w, s, data, move |x, w, go| {
            if x.0.requires_grad {
                let wd = w.0.data.borrow();
                let mut g = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            g[(bi * t + ti) * d + di] =
                                go[(bi * t + ti) * d + di] * wd[bi * d + di];
                        }
                    }
                }
                drop(wd);
                x.accumulate(&g);
            }
            if w.0.requires_grad {
                let xd = x.0.data.borrow();
                let mut g = vec![0.0; b * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            g[bi * d + di] +=
                                go[(bi * t + ti) * d + di] * xd[(bi * t + ti) * d + di];
                        }
                    }
                }
                drop(xd);
                w.accumulate(&g);
            }
        })
    }

    fn bcast_mid(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        ga: f64,
        gb: f64,
    ) -> Tensor {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(other.shape(), &[b, d], "broadcast operand shape");
        let ad = self.0.data.borrow();
        let od = other.0.data.borrow();
        let mut data = Vec::with_capacity(ad.len());
        for bi in 0..b {
            for ti in 0..t {
                for di in 0..d {
                    data.push(f(ad[(bi * t + ti) * d + di], od[bi * d + di]));
                }
            }
        }
        drop(ad);
        drop(od);
        self.binary(other, s, data, move |x, o, go| {
            if x.0.requires_grad {
                let g: Vec<f64> = go.iter().map(|v| v * ga).collect();
                x.accumulate(&g);
            }
            if o.0.requires_grad {
                let mut g = vec![0.0; b * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            g[bi * d + di] += go[(bi * t + ti) * d + di] * gb;
                        }
                    }
                }
                o.accumulate(&g);
            }
        })
    }

    // ---- reductions & normalizations ----

    /// Mean over the middle axis: `[B, T, D] -> [B, D]`.
    pub fn mean_mid(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 3);
        let (b, t, d) = (s[0], s[1], s[2]);
        let ad = self.0.data.borrow();
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                for di in 0..d {
                    data[bi * d + di] += ad[(bi * t + ti) * d + di];
                }
            }
        }
        for v in &mut data {
            *v /= t as f64;
        }
        drop(ad);
        self.unary(vec![b, d], data, move |a, go| {
            let inv = 1.0 / t as f64;
            let mut g = vec![0.0; b * t * d];
            for bi in 0..b {
                for ti in 0..t {
                    for di in 0..d {
                        g[(bi * t + ti) * d + di] = go[bi * d + di] * inv;
                    }
                }
            }
            a.accumulate(&g);
        })
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        let data = vec![self.0.data.borrow().iter().sum::<f64>() / n as f64];
        self.unary(vec![1], data, move |a, go| {
            let g = vec![go[0] / n as f64; n];
            a.accumulate(&g);
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().unwrap();
        let rows = self.len() / n;
        let ad = self.0.data.borrow();
        let mut data = vec![0.0; ad.len()];
        for r in 0..rows {
            let row = &ad[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[r * n + i] = e;
                sum += e;
            }
            for i in 0..n {
                data[r * n + i] /= sum;
            }
        }
        drop(ad);
        let out_copy = data.clone();
        self.unary(self.0.shape.clone(), data, move |a, go| {
            let mut g = vec![0.0; out_copy.len()];
            for r in 0..rows {
                let y = &out_copy[r * n..(r + 1) * n];
                let gr = &go[r * n..(r + 1) * n];
                let dot: f64 = y.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                for i in 0..n {
                    g[r * n + i] = y[i] * (gr[i] - dot);
                }
            }
            a.accumulate(&g);
        })
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm_last(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let n = *self.shape().last().unwrap();
        assert_eq!(gamma.shape(), &[n]);
        assert_eq!(beta.shape(), &[n]);
        let rows = self.len() / n;
        let ad = self.0.data.borrow();
        let gd = gamma.0.data.borrow();
        let bd = beta.0.data.borrow();
        let mut data = vec![0.0; ad.len()];
        let mut normed = vec![0.0; ad.len()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = &ad[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for i in 0..n {
                let y = (row[i] - mean) * inv;
                normed[r * n + i] = y;
                data[r * n + i] = gd[i] * y + bd[i];
            }
        }
        drop(ad);
        drop(gd);
        drop(bd);
        let shape = self.0.shape.clone();
        let track = grad_enabled()
            && (self.0.requires_grad || gamma.0.requires_grad || beta.0.requires_grad);
        if !track {
            return Tensor::new(shape, data, false, Vec::new(), None);
        }
        let mut parents = Vec::new();
        for t in [self, gamma, beta] {
            if t.0.requires_grad {
                parents.push(t.clone());
            }
        }
        let x = self.clone();
        let ga = gamma.clone();
        let be = beta.clone();
        Tensor::new(
            shape,
            data,
            true,
            parents,
            Some(Box::new(move |go| {
                let gd = ga.0.data.borrow();
                if be.0.requires_grad {
                    let mut g = vec![0.0; n];
                    for r in 0..rows {
                        for i in 0..n {
                            g[i] += go[r * n + i];
                        }
                    }
                    be.accumulate(&g);
                }
                if ga.0.requires_grad {
                    let mut g = vec![0.0; n];
                    for r in 0..rows {
                        for i in 0..n {
                            g[i] += go[r * n + i] * normed[r * n + i];
                        }
                    }
                    ga.accumulate(&g);
                }
                if x.0.requires_grad {
                    let mut g = vec![0.0; rows * n];
                    for r in 0..rows {
                        let y = &normed[r * n..(r + 1) * n];
                        // gradient w.r.t. the normalized value
                        let gy: Vec<f64> =
                            (0..n).map(|i| go[r * n + i] * gd[i]).collect();
                        let mean_gy = gy.iter().sum::<f64>() / n as f64;
                        let mean_gyy =
                            gy.iter().zip(y.iter()).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for i in 0..n {
                            g[r * n + i] =
                                inv_sigma[r] * (gy[i] - mean_gy - y[i] * mean_gyy);
                        }
                    }
                    x.accumulate(&g);
                }
            })),
        )
    }

    // ---- losses & adversarial boundary ----

    /// Mean cross-entropy of `[B, C]` logits against class labels, with a
    /// numerically stable fused log-softmax.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "logits must be [batch, classes]");
        let (b, c) = (s[0], s[1]);
        assert_eq!(labels.len(), b, "one label per row");
        for &l in labels {
            if l >= c {
                return Err(Error::Contract(format!(
                    "domain label {l} out of range for {c} classes"
                )));
            }
        }
        let ad = self.0.data.borrow();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ad[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + i] = e;
                sum += e;
            }
            for i in 0..c {
                probs[r * c + i] /= sum;
            }
            loss += max + sum.ln() - row[labels[r]];
        }
        drop(ad);
        loss /= b as f64;
        let labels = labels.to_vec();
        Ok(self.unary(vec![1], vec![loss], move |a, go| {
            let scale = go[0] / b as f64;
            let mut g = vec![0.0; b * c];
            for r in 0..b {
                for i in 0..c {
                    let delta = if labels[r] == i { 1.0 } else { 0.0 };
                    g[r * c + i] = scale * (probs[r * c + i] - delta);
                }
            }
            a.accumulate(&g);
        }))
    }

    /// Gradient reversal boundary: the identity forward, `-alpha` times the
    /// gradient backward.
    pub fn grad_reverse(&self, alpha: f64) -> Tensor {
        let data = self.to_vec();
        self.unary(self.0.shape.clone(), data, move |a, go| {
            let g: Vec<f64> = go.iter().map(|v| -alpha * v).collect();
            a.accumulate(&g);
        })
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&a, &b)| f(a, b)).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

/// Row-major `a[m×k] × b[k×n]` accumulated into `out`, loop order chosen for
/// sequential access on both operands.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(axes.len(), shape.len(), "permutation rank");
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let old_strides = strides_of(shape);
    let new_strides = strides_of(&new_shape);
    let mut out = vec![0.0; data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for (flat, v) in data.iter().enumerate() {
        // decompose flat index into old coordinates
        let mut rem = flat;
        for d in 0..rank {
            idx[d] = rem / old_strides[d];
            rem %= old_strides[d];
        }
        let mut new_flat = 0;
        for d in 0..rank {
            new_flat += idx[axes[d]] * new_strides[d];
        }
        out[new_flat] = *v;
    }
    (out, new_shape)
}
