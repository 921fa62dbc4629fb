//! Dense f64 tensor with reverse-mode automatic differentiation.
//!
//! Every numeric value in the model is a [`Tensor`]: a row-major flat
//! buffer plus a shape, optionally carrying a gradient. Operations record
//! a tape node so that [`Tensor::backward`] on a scalar loss populates
//! `d(loss)/d(t)` for every reachable tensor that participates in the
//! graph. The tape for one forward/backward pass lives on a single thread.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// True when this node participates in a gradient path.
    on_graph: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_done: bool,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("data", &n.data)
            .finish()
    }
}

fn fmt_shape(s: &[usize]) -> String {
    let dims: Vec<String> = s.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {} expects {} elements, got {}",
                fmt_shape(&shape),
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!(
                "zero-sized dimension in shape {}",
                fmt_shape(&shape)
            )));
        }
        Ok(Tensor::leaf(shape, data, false))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; numel], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(RefCell::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                on_graph: requires_grad,
                parents: Vec::new(),
                backward: None,
                backward_done: false,
            })),
        }
    }

    fn op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let on_graph = parents.iter().any(|p| p.on_graph());
        Tensor {
            node: Rc::new(RefCell::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad: false,
                on_graph,
                parents: if on_graph { parents } else { Vec::new() },
                backward: if on_graph { Some(backward) } else { None },
                backward_done: false,
            })),
        }
    }

    pub fn with_grad(self) -> Tensor {
        {
            let mut n = self.node.borrow_mut();
            n.requires_grad = true;
            n.on_graph = true;
        }
        self
    }

    pub fn id(&self) -> u64 {
        self.node.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() requires a scalar tensor");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    fn on_graph(&self) -> bool {
        self.node.borrow().on_graph
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut n = self.node.borrow_mut();
        n.grad = None;
        n.backward_done = false;
    }

    pub fn is_finite(&self) -> bool {
        self.node.borrow().data.iter().all(|v| v.is_finite())
    }

    /// In-place update of the stored values (used by optimizers). The
    /// closure receives (data, grad).
    pub fn apply_update(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut n = self.node.borrow_mut();
        let grad = match n.grad.take() {
            Some(g) => g,
            None => return,
        };
        f(&mut n.data, &grad);
        n.grad = Some(grad);
    }

    /// Replace the stored values (shape must match).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut n = self.node.borrow_mut();
        if data.len() != n.data.len() {
            return Err(Error::Dim(format!(
                "set_data expects {} elements, got {}",
                n.data.len(),
                data.len()
            )));
        }
        n.data = data;
        Ok(())
    }

    fn accumulate(&self, g: &[f64]) {
        let mut n = self.node.borrow_mut();
        if !n.on_graph {
            return;
        }
        let len = n.data.len();
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += *b;
        }
    }

    // ---- autodiff driver ---------------------------------------------

    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(&self.shape())
            )));
        }
        if self.node.borrow().backward_done {
            return Err(Error::Contract(
                "backward called twice without grad reset".into(),
            ));
        }
        let order = topo_order(self);
        self.node.borrow_mut().grad = Some(vec![1.0]);
        for t in order.iter().rev() {
            let n = t.node.borrow();
            if let (Some(g), Some(f)) = (n.grad.clone(), n.backward.as_ref()) {
                f(&g, &n.parents);
            }
        }
        self.node.borrow_mut().backward_done = true;
        Ok(())
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dim(format!(
                "cannot reshape {} into {}",
                fmt_shape(&self.shape()),
                fmt_shape(&shape)
            )));
        }
        let data = self.value();
        Ok(Tensor::op(
            shape,
            data,
            vec![self.clone()],
            Box::new(|dy, parents| parents[0].accumulate(dy)),
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!(
                "transpose2 expects rank 2, got {}",
                fmt_shape(&s)
            )));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        Ok(Tensor::op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = dy[j * n + i];
                    }
                }
                parents[0].accumulate(&dx);
            }),
        ))
    }

    // ---- arithmetic ----------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul {} x {}",
                fmt_shape(&sa),
                fmt_shape(&sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        let out = matmul_raw(&a.data, &b.data, m, k, n);
        drop(a);
        drop(b);
        Ok(Tensor::op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |dy, parents| {
                let a = parents[0].value();
                let b = parents[1].value();
                // dA = dY . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = dy[i * n + j];
                        if g != 0.0 {
                            for p in 0..k {
                                da[i * k + p] += g * b[p * n + j];
                            }
                        }
                    }
                }
                // dB = A^T . dY
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av != 0.0 {
                            for j in 0..n {
                                db[p * n + j] += av * dy[i * n + j];
                            }
                        }
                    }
                }
                parents[0].accumulate(&da);
                parents[1].accumulate(&db);
            }),
        ))
    }

    fn zip_same_shape(
        &self,
        rhs: &Tensor,
        name: &str,
        fwd: impl Fn(f64, f64) -> f64,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(Error::Dim(format!(
                "{} {} vs {}",
                name,
                fmt_shape(&sa),
                fmt_shape(&sb)
            )));
        }
        let a = self.value();
        let b = rhs.value();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect();
        Ok(Tensor::op(sa, out, vec![self.clone(), rhs.clone()], backward))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(
            rhs,
            "add",
            |x, y| x + y,
            Box::new(|dy, parents| {
                parents[0].accumulate(dy);
                parents[1].accumulate(dy);
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(
            rhs,
            "sub",
            |x, y| x - y,
            Box::new(|dy, parents| {
                parents[0].accumulate(dy);
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                parents[1].accumulate(&neg);
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(
            rhs,
            "mul",
            |x, y| x * y,
            Box::new(|dy, parents| {
                let a = parents[0].value();
                let b = parents[1].value();
                let da: Vec<f64> = dy.iter().zip(b.iter()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = dy.iter().zip(a.iter()).map(|(g, x)| g * x).collect();
                parents[0].accumulate(&da);
                parents[1].accumulate(&db);
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v * c).collect();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let dx: Vec<f64> = dy.iter().map(|g| g * c).collect();
                parents[0].accumulate(&dx);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v + c).collect();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|dy, parents| parents[0].accumulate(dy)),
        )
    }

    /// Broadcast add of a `[m]` (or `[1,m]`) bias over the rows of `[n,m]`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || bias.numel() != s[1] {
            return Err(Error::Dim(format!(
                "add_row {} + {}",
                fmt_shape(&s),
                fmt_shape(&bias.shape())
            )));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value();
        let b = bias.value();
        let mut out = x;
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += b[j];
            }
        }
        Ok(Tensor::op(
            vec![n, m],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |dy, parents| {
                parents[0].accumulate(dy);
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += dy[i * m + j];
                    }
                }
                parents[1].accumulate(&db);
            }),
        ))
    }

    /// Multiply every row of `[n,m]` by the matching entry of a `[n]`
    /// (or `[n,1]`) column vector.
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || col.numel() != s[0] {
            return Err(Error::Dim(format!(
                "mul_col {} * {}",
                fmt_shape(&s),
                fmt_shape(&col.shape())
            )));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value();
        let c = col.value();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = x[i * m + j] * c[i];
            }
        }
        Ok(Tensor::op(
            vec![n, m],
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |dy, parents| {
                let x = parents[0].value();
                let c = parents[1].value();
                let mut dx = vec![0.0; n * m];
                let mut dc = vec![0.0; n];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = dy[i * m + j] * c[i];
                        dc[i] += dy[i * m + j] * x[i * m + j];
                    }
                }
                parents[0].accumulate(&dx);
                parents[1].accumulate(&dc);
            }),
        ))
    }

    /// Multiply by a scalar tensor (broadcast), keeping the scalar in
    /// the gradient graph.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Dim(format!(
                "scale_by expects a scalar, got {}",
                fmt_shape(&s.shape())
            )));
        }
        let sv = s.item();
        let out: Vec<f64> = self.value().iter().map(|v| v * sv).collect();
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |dy, parents| {
                let x = parents[0].value();
                let sv = parents[1].item();
                let dx: Vec<f64> = dy.iter().map(|g| g * sv).collect();
                let ds: f64 = dy.iter().zip(x.iter()).map(|(g, v)| g * v).sum();
                parents[0].accumulate(&dx);
                parents[1].accumulate(&[ds]);
            }),
        ))
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn relu(&self) -> Tensor {
        let x = self.value();
        let out: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|dy, parents| {
                let x = parents[0].value();
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                parents[0].accumulate(&dx);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|&v| stable_sigmoid(v)).collect();
        let y = out.clone();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(y.iter())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                parents[0].accumulate(&dx);
            }),
        )
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dim(format!(
                "softmax axis {} out of range for {}",
                axis,
                fmt_shape(&shape)
            )));
        }
        let m = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * m + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    max = max.max(x[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..m {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..m {
                    out[idx(j)] /= sum;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let mut dx = vec![0.0; dy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * m + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += dy[idx(j)] * y[idx(j)];
                        }
                        for j in 0..m {
                            dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
                        }
                    }
                }
                parents[0].accumulate(&dx);
            }),
        ))
    }

    /// Layer normalization along the last axis with affine gain/shift.
    /// Population variance, eps = 1e-5.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| {
            Error::Dim("layer_norm requires at least one axis".into())
        })?;
        if gain.numel() != d || shift.numel() != d {
            return Err(Error::Dim(format!(
                "layer_norm over width {} with gain {} / shift {}",
                d,
                fmt_shape(&gain.shape()),
                fmt_shape(&shift.shape())
            )));
        }
        let rows = self.numel() / d;
        let x = self.value();
        let g = gain.value();
        let b = shift.value();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_sigma[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(Tensor::op(
            shape,
            out,
            vec![self.clone(), gain.clone(), shift.clone()],
            Box::new(move |dy, parents| {
                let g = parents[1].value();
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let inv = inv_sigma[r];
                    let mut mean_a = 0.0;
                    let mut mean_ah = 0.0;
                    for j in 0..d {
                        let a = g[j] * dy[r * d + j];
                        mean_a += a;
                        mean_ah += a * xhat[r * d + j];
                        dg[j] += dy[r * d + j] * xhat[r * d + j];
                        db[j] += dy[r * d + j];
                    }
                    mean_a /= d as f64;
                    mean_ah /= d as f64;
                    for j in 0..d {
                        let a = g[j] * dy[r * d + j];
                        dx[r * d + j] = inv * (a - mean_a - xhat[r * d + j] * mean_ah);
                    }
                }
                parents[0].accumulate(&dx);
                parents[1].accumulate(&dg);
                parents[2].accumulate(&db);
            }),
        ))
    }

    /// Divide by the sum of all entries (entries must not sum to zero).
    pub fn normalize_sum(&self) -> Result<Tensor> {
        let x = self.value();
        let s: f64 = x.iter().sum();
        if s == 0.0 {
            return Err(Error::Contract("normalize_sum over zero total".into()));
        }
        let out: Vec<f64> = x.iter().map(|v| v / s).collect();
        let y = out.clone();
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let dot: f64 = dy.iter().zip(y.iter()).map(|(g, v)| g * v).sum();
                let dx: Vec<f64> = dy.iter().map(|g| (g - dot) / s).collect();
                parents[0].accumulate(&dx);
            }),
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.value().iter().sum();
        let n = self.numel();
        Tensor::op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].accumulate(&vec![dy[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Mean over rows: `[n,m] -> [1,m]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!(
                "mean_rows expects rank 2, got {}",
                fmt_shape(&s)
            )));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += x[i * m + j];
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        Ok(Tensor::op(
            vec![1, m],
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = dy[j] / n as f64;
                    }
                }
                parents[0].accumulate(&dx);
            }),
        ))
    }

    // ---- gather / slice / concat ----------------------------------------

    /// Row gather on a rank-2 tensor; gradient scatter-adds into the
    /// source rows.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!(
                "gather_rows expects rank 2, got {}",
                fmt_shape(&s)
            )));
        }
        let (n, m) = (s[0], s[1]);
        for &id in ids {
            if id >= n {
                return Err(Error::Index(format!(
                    "row index {} out of range for {} rows",
                    id, n
                )));
            }
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with empty id list".into()));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            out.extend_from_slice(&x[id * m..(id + 1) * m]);
        }
        let ids_owned: Vec<usize> = ids.to_vec();
        Ok(Tensor::op(
            vec![ids.len(), m],
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let mut dx = vec![0.0; n * m];
                for (r, &id) in ids_owned.iter().enumerate() {
                    for j in 0..m {
                        dx[id * m + j] += dy[r * m + j];
                    }
                }
                parents[0].accumulate(&dx);
            }),
        ))
    }

    /// Gather individual elements by flat index into a `[k]` vector.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        for &i in indices {
            if i >= n {
                return Err(Error::Index(format!(
                    "flat index {} out of range for {} elements",
                    i, n
                )));
            }
        }
        let x = self.value();
        let out: Vec<f64> = indices.iter().map(|&i| x[i]).collect();
        let idx: Vec<usize> = indices.to_vec();
        Ok(Tensor::op(
            vec![indices.len()],
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let mut dx = vec![0.0; n];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i] += dy[r];
                }
                parents[0].accumulate(&dx);
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Dim(format!(
                "slice_cols [{}..{}) of {}",
                start,
                start + len,
                fmt_shape(&s)
            )));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&x[i * m + start..i * m + start + len]);
        }
        Ok(Tensor::op(
            vec![n, len],
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..len {
                        dx[i * m + start + j] = dy[i * len + j];
                    }
                }
                parents[0].accumulate(&dx);
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols with no parts".into()));
        }
        let n = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::Dim(format!(
                    "concat_cols row mismatch: {} vs {} rows",
                    fmt_shape(&s),
                    n
                )));
            }
            widths.push(s[1]);
        }
        let m: usize = widths.iter().sum();
        let mut out = vec![0.0; n * m];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            let x = p.value();
            for i in 0..n {
                out[i * m + off..i * m + off + w].copy_from_slice(&x[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let widths_c = widths.clone();
        Ok(Tensor::op(
            vec![n, m],
            out,
            parts.to_vec(),
            Box::new(move |dy, parents| {
                let mut off = 0;
                for (p, &w) in parents.iter().zip(widths_c.iter()) {
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&dy[i * m + off..i * m + off + w]);
                    }
                    p.accumulate(&dp);
                    off += w;
                }
            }),
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows with no parts".into()));
        }
        let m = parts[0].shape()[1];
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != m {
                return Err(Error::Dim(format!(
                    "concat_rows column mismatch: {} vs width {}",
                    fmt_shape(&s),
                    m
                )));
            }
            rows.push(s[0]);
        }
        let n: usize = rows.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for p in parts {
            out.extend_from_slice(&p.value());
        }
        let rows_c = rows.clone();
        Ok(Tensor::op(
            vec![n, m],
            out,
            parts.to_vec(),
            Box::new(move |dy, parents| {
                let mut off = 0;
                for (p, &r) in parents.iter().zip(rows_c.iter()) {
                    p.accumulate(&dy[off * m..(off + r) * m]);
                    off += r;
                }
            }),
        ))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean binary cross-entropy on logits, log-sum-exp stabilized.
    pub fn bce_with_logits(&self, labels: &[f64]) -> Result<Tensor> {
        let n = self.numel();
        if labels.len() != n {
            return Err(Error::Dim(format!(
                "bce_with_logits: {} logits vs {} labels",
                n,
                labels.len()
            )));
        }
        for &y in labels {
            if y != 0.0 && y != 1.0 {
                return Err(Error::Contract(format!(
                    "bce_with_logits labels must be 0/1, got {}",
                    y
                )));
            }
        }
        let z = self.value();
        // loss_i = max(z,0) - z*y + ln(1 + exp(-|z|))
        let mut total = 0.0;
        for (zi, yi) in z.iter().zip(labels.iter()) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let labels_c: Vec<f64> = labels.to_vec();
        Ok(Tensor::op(
            vec![1],
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |dy, parents| {
                let z = parents[0].value();
                let dx: Vec<f64> = z
                    .iter()
                    .zip(labels_c.iter())
                    .map(|(&zi, &yi)| dy[0] * (stable_sigmoid(zi) - yi) / n as f64)
                    .collect();
                parents[0].accumulate(&dx);
            }),
        ))
    }
}

pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((t, ci)) = stack.pop() {
        if ci == 0 && !visited.insert(t.id()) {
            continue;
        }
        let parents = t.node.borrow().parents.clone();
        if ci < parents.len() {
            stack.push((t.clone(), ci + 1));
            stack.push((parents[ci].clone(), 0));
        } else {
            order.push(t);
        }
    }
    order
}
