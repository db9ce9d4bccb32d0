//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is a `rows x cols` matrix (scalars are `1 x 1`). Operations
//! append nodes to a [`Tape`]; [`Tape::backward`] walks the tape in reverse
//! and accumulates gradients into every node that depends on a trainable leaf.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse kernel influences of one point convolution.
///
/// For output point `i`, neighbor slot `j` and kernel point `p`,
/// `h[(i * k + j) * p_count + p]` weights support row `nbr[i * k + j]`.
/// Missing neighbors are `u32::MAX` with zero influence.
#[derive(Debug, Clone, PartialEq)]
pub struct Influence {
    pub n_out: usize,
    pub n_in: usize,
    pub k: usize,
    pub p: usize,
    pub nbr: Vec<u32>,
    pub h: Vec<f32>,
}

pub const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    KernelAggregate(Var, Arc<Influence>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    LeakyRelu(Var, T),
    GatherRows(Var, Arc<Vec<usize>>),
    Add(Var, Var),
    Sub(Var, Var),
    ConcatCols(Var, Var),
    NormalizeRows(Var, Vec<T>),
    Scale(Var, T),
    WeightedNll {
        logits: Var,
        labels: Arc<Vec<u32>>,
        weights: Arc<Vec<T>>,
        probs: Vec<T>,
    },
    Contrastive(Var, Arc<Vec<T>>),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node; `None` when it does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Tensor(format!("{what}: incompatible shapes {}x{} and {}x{}", a.0, a.1, b.0, b.1))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, rows: usize, cols: usize, value: Vec<T>, trainable: bool) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::Tensor(format!(
                "leaf of shape {rows}x{cols} given {} values",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, trainable))
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        self.leaf(rows, cols, value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        self.leaf(rows, cols, value, false)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Sums kernel-weighted neighbor rows of `x` into an `n_out x (p * cols)` matrix.
    pub fn kernel_aggregate(&mut self, x: Var, infl: Arc<Influence>) -> Result<Var> {
        let (rows, c) = self.shape(x);
        if rows != infl.n_in || infl.nbr.len() != infl.n_out * infl.k || infl.h.len() != infl.nbr.len() * infl.p {
            return Err(Error::Tensor(format!(
                "kernel aggregate: input has {rows} rows, influence expects {}",
                infl.n_in
            )));
        }
        let (k, p) = (infl.k, infl.p);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); infl.n_out * p * c];
        for i in 0..infl.n_out {
            let orow = &mut out[i * p * c..(i + 1) * p * c];
            for j in 0..k {
                let slot = i * k + j;
                let n = infl.nbr[slot];
                if n == NO_NEIGHBOR {
                    continue;
                }
                let xr = &xv[n as usize * c..(n as usize + 1) * c];
                for q in 0..p {
                    let h = infl.h[slot * p + q];
                    if h == 0.0 {
                        continue;
                    }
                    let h = T::of_f32(h);
                    for (o, xv) in orow[q * c..(q + 1) * c].iter_mut().zip(xr) {
                        *o += h * *xv;
                    }
                }
            }
        }
        let ng = self.ng(x);
        let n_out = infl.n_out;
        Ok(self.push(n_out, p * c, out, Op::KernelAggregate(x, infl), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, m), (m2, q)) = (self.shape(a), self.shape(b));
        if m != m2 {
            return Err(shape_err("matmul", (n, m), (m2, q)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![T::zero(); n * q];
        for i in 0..n {
            let orow = &mut out[i * q..(i + 1) * q];
            for kk in 0..m {
                let s = av[i * m + kk];
                if s == T::zero() {
                    continue;
                }
                for (o, bvv) in orow.iter_mut().zip(&bv[kk * q..(kk + 1) * q]) {
                    *o += s * *bvv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, q, out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, m), (q, m2)) = (self.shape(a), self.shape(b));
        if m != m2 {
            return Err(shape_err("matmul_bt", (n, m), (q, m2)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![T::zero(); n * q];
        for i in 0..n {
            let ar = &av[i * m..(i + 1) * m];
            for j in 0..q {
                out[i * q + j] = ar.iter().zip(&bv[j * m..(j + 1) * m]).map(|(x, y)| *x * *y).sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, q, out, Op::MatMulBt(a, b), ng))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ((n, c), (br, bc)) = (self.shape(a), self.shape(bias));
        if br != 1 || bc != c {
            return Err(shape_err("add_bias", (n, c), (br, bc)));
        }
        let bv = self.nodes[bias.0].value.clone();
        let out: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[i % c])
            .collect();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(n, c, out, Op::AddBias(a, bias), ng))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let (n, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let ng = self.ng(a);
        self.push(n, c, out, Op::LeakyRelu(a, s), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Tensor(format!("gather row {bad} out of {n}")));
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        let rows = idx.len();
        Ok(self.push(rows, c, out, Op::GatherRows(a, idx), ng))
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((sa.0, sa.1, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, out) = self.elementwise(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, out) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, c, out, Op::Sub(a, b), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, ca), (nb, cb)) = (self.shape(a), self.shape(b));
        if n != nb {
            return Err(shape_err("concat_cols", (n, ca), (nb, cb)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, ca + cb, out, Op::ConcatCols(a, b), ng))
    }

    /// Row-wise `x / sqrt(|x|^2 + eps^2)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (n, c) = self.shape(a);
        let e2 = T::of(eps * eps);
        let av = &self.nodes[a.0].value;
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let r = &av[i * c..(i + 1) * c];
            let s = (r.iter().map(|v| *v * *v).sum::<T>() + e2).sqrt();
            norms.push(s);
            out.extend(r.iter().map(|v| *v / s));
        }
        let ng = self.ng(a);
        self.push(n, c, out, Op::NormalizeRows(a, norms), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let (n, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|v| *v * s).collect();
        let ng = self.ng(a);
        self.push(n, c, out, Op::Scale(a, s), ng)
    }

    /// Mean over rows of `W[y] * (-log softmax(logits)[y])`.
    pub fn weighted_nll(&mut self, logits: Var, labels: Arc<Vec<u32>>, weights: Arc<Vec<T>>) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if labels.len() != n {
            return Err(Error::Tensor(format!("{} labels for {n} logit rows", labels.len())));
        }
        if weights.len() != k {
            return Err(Error::Tensor(format!("{} weights for {k} classes", weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Argument(format!("label {bad} outside [0, {k})")));
        }
        if n == 0 {
            return Err(Error::Tensor("nll of zero rows".into()));
        }
        let zv = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for i in 0..n {
            let z = &zv[i * k..(i + 1) * k];
            let m = z.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = z.iter().map(|v| (*v - m).exp()).sum();
            let lse = m + se.ln();
            probs.extend(z.iter().map(|v| (*v - m).exp() / se));
            let y = labels[i] as usize;
            total += weights[y] * (lse - z[y]);
        }
        let loss = total / T::of(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::WeightedNll {
                logits,
                labels,
                weights,
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `0.5 * y * |f|^2`.
    pub fn contrastive(&mut self, f: Var, ysim: Arc<Vec<T>>) -> Result<Var> {
        let (n, c) = self.shape(f);
        if ysim.len() != n || n == 0 {
            return Err(Error::Tensor(format!("{} similarity flags for {n} rows", ysim.len())));
        }
        let fv = &self.nodes[f.0].value;
        let total: T = (0..n)
            .map(|i| T::of(0.5) * ysim[i] * fv[i * c..(i + 1) * c].iter().map(|v| *v * *v).sum::<T>())
            .sum();
        let loss = total / T::of(n as f64);
        let ng = self.ng(f);
        Ok(self.push(1, 1, vec![loss], Op::Contrastive(f, ysim), ng))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(1, 1, vec![m], Op::MeanAll(a), ng)
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tensor("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::KernelAggregate(x, infl) => {
                let c = self.nodes[x.0].cols;
                let (k, p) = (infl.k, infl.p);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..infl.n_out {
                        let grow = &g[i * p * c..(i + 1) * p * c];
                        for j in 0..k {
                            let slot = i * k + j;
                            let n = infl.nbr[slot];
                            if n == NO_NEIGHBOR {
                                continue;
                            }
                            let dr = &mut dx[n as usize * c..(n as usize + 1) * c];
                            for q in 0..p {
                                let h = infl.h[slot * p + q];
                                if h == 0.0 {
                                    continue;
                                }
                                let h = T::of_f32(h);
                                for (d, gv) in dr.iter_mut().zip(&grow[q * c..(q + 1) * c]) {
                                    *d += h * *gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, m) = self.shape(*a);
                let q = self.nodes[b.0].cols;
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..n {
                        let gr = &g[i * q..(i + 1) * q];
                        for kk in 0..m {
                            da[i * m + kk] += gr.iter().zip(&bv[kk * q..(kk + 1) * q]).map(|(x, y)| *x * *y).sum::<T>();
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..n {
                        let gr = &g[i * q..(i + 1) * q];
                        for kk in 0..m {
                            let s = av[i * m + kk];
                            if s == T::zero() {
                                continue;
                            }
                            for (d, gv) in db[kk * q..(kk + 1) * q].iter_mut().zip(gr) {
                                *d += s * *gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, m) = self.shape(*a);
                let q = self.nodes[b.0].rows;
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..n {
                        for j in 0..q {
                            let s = g[i * q + j];
                            for (d, bvv) in da[i * m..(i + 1) * m].iter_mut().zip(&bv[j * m..(j + 1) * m]) {
                                *d += s * *bvv;
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..n {
                        for j in 0..q {
                            let s = g[i * q + j];
                            for (d, avv) in db[j * m..(j + 1) * m].iter_mut().zip(&av[i * m..(i + 1) * m]) {
                                *d += s * *avv;
                            }
                        }
                    }
                }
            }
            Op::AddBias(a, bias) => {
                let c = node.cols;
                if let Some(da) = self.acc(grads, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += *gv;
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += *gv;
                    }
                }
            }
            Op::LeakyRelu(a, s) => {
                let av = &self.nodes[a.0].value;
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gv), x) in da.iter_mut().zip(g).zip(av) {
                        *d += if *x > T::zero() { *gv } else { *gv * *s };
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.cols;
                if let Some(da) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, gv) in da[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(da) = self.acc(grads, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += *gv;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += sign * *gv;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                let n = node.rows;
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..n {
                        for (d, gv) in da[i * ca..(i + 1) * ca].iter_mut().zip(&g[i * (ca + cb)..]) {
                            *d += *gv;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..n {
                        for (d, gv) in db[i * cb..(i + 1) * cb].iter_mut().zip(&g[i * (ca + cb) + ca..]) {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                let c = node.cols;
                let y = &node.value;
                if let Some(da) = self.acc(grads, *a) {
                    for (i, s) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(u, v)| *u * *v).sum();
                        for ((d, gv), yv) in da[i * c..(i + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *d += (*gv - *yv * dot) / *s;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += *gv * *s;
                    }
                }
            }
            Op::WeightedNll {
                logits,
                labels,
                weights,
                probs,
            } => {
                let (n, k) = self.shape(*logits);
                let scale = g[0] / T::of(n as f64);
                if let Some(dz) = self.acc(grads, *logits) {
                    for i in 0..n {
                        let y = labels[i] as usize;
                        let w = weights[y] * scale;
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dz[i * k + j] += w * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Contrastive(f, ysim) => {
                let (n, c) = self.shape(*f);
                let fv = &self.nodes[f.0].value;
                let scale = g[0] / T::of(n as f64);
                if let Some(df) = self.acc(grads, *f) {
                    for i in 0..n {
                        let s = scale * ysim[i];
                        for (d, x) in df[i * c..(i + 1) * c].iter_mut().zip(&fv[i * c..(i + 1) * c]) {
                            *d += s * *x;
                        }
                    }
                }
            }
            Op::MeanAll(a) => {
                let len = self.nodes[a.0].value.len().max(1);
                let s = g[0] / T::of(len as f64);
                if let Some(da) = self.acc(grads, *a) {
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
        }
    }
}
