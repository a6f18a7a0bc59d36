//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are 2-D arrays. Operations are appended to a [`Tape`] while the
//! forward pass runs; [`Tape::backward`] walks the list in reverse and
//! accumulates adjoints. Only the primitives the training losses need are
//! provided: affine maps, activations, constant masks, row softmax, the
//! Gumbel relaxation, and squared-norm reductions.

use ndarray::{Array2, Array3, Axis, Zip};

use super::Activation;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulConst(Var, Array2<T>),
    Offset(Var),
    Scale(Var, T),
    Act(Var, Activation),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    BroadcastRows(Var),
    Reshape(Var),
    RowMix(Var, Array3<T>),
    MeanRowSqNorm(Var),
    DotConst(Var, Array2<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    /// True when some parameter leaf feeds this node.
    tracked: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Array2<T> {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

fn dims<T>(a: &Array2<T>) -> (usize, usize) {
    a.dim()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (n, k) = dims(self.value(a));
        let (k2, m) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} · {k2}x{m}")));
        }
        let out = self.value(a).dot(self.value(b));
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), tr))
    }

    /// `a · bᵀ`, the layout used by dense layers with `(out, in)` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (n, k) = dims(self.value(a));
        let (m, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul_t {n}x{k} · ({m}x{k2})ᵀ")));
        }
        let out = self.value(a).dot(&self.value(b).t());
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMulT(a, b), tr))
    }

    /// Adds the `1×m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (_, m) = dims(self.value(a));
        if dims(self.value(b)) != (1, m) {
            return Err(Error::shape(format!(
                "add_row expects a 1x{m} row, got {:?}",
                dims(self.value(b))
            )));
        }
        let out = self.value(a) + self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::AddRow(a, b), tr))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if dims(self.value(a)) != dims(self.value(b)) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                dims(self.value(a)),
                dims(self.value(b))
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tr))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Array2<T>) -> Result<Var> {
        self.check(a)?;
        if dims(self.value(a)) != c.dim() {
            return Err(Error::shape("mul_const operand shapes differ"));
        }
        let out = self.value(a) * &c;
        let tr = self.tracked(a);
        Ok(self.push(out, Op::MulConst(a, c), tr))
    }

    /// Adds a constant array; the gradient passes through unchanged.
    pub fn offset(&mut self, a: Var, c: &Array2<T>) -> Result<Var> {
        self.check(a)?;
        if dims(self.value(a)) != c.dim() {
            return Err(Error::shape("offset operand shapes differ"));
        }
        let out = self.value(a) + c;
        let tr = self.tracked(a);
        Ok(self.push(out, Op::Offset(a), tr))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(|x| x * s);
        let tr = self.tracked(a);
        Ok(self.push(out, Op::Scale(a, s), tr))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(|x| act.apply(x));
        let tr = self.tracked(a);
        Ok(self.push(out, Op::Act(a, act), tr))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let tr = self.tracked(a);
        Ok(self.push(out, Op::SoftmaxRows(a), tr))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let lse = log_sum_exp(row.as_slice().expect("standard layout"));
            row.mapv_inplace(|x| x - lse);
        }
        let tr = self.tracked(a);
        Ok(self.push(out, Op::LogSoftmaxRows(a), tr))
    }

    /// Relaxed one-hot rows `softmax((logits + noise) / temperature)`.
    ///
    /// `logits` is `n×k` (or `1×k`, broadcast to the noise rows); the Gumbel
    /// noise is a constant of the draw.
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &Array2<T>, temperature: T) -> Result<Var> {
        self.check(logits)?;
        if !(temperature > T::zero()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let base = if dims(self.value(logits)).0 == 1 && noise.nrows() != 1 {
            self.broadcast_rows(logits, noise.nrows())?
        } else {
            logits
        };
        let perturbed = self.offset(base, noise)?;
        let scaled = self.scale(perturbed, T::one() / temperature)?;
        self.softmax_rows(scaled)
    }

    /// Repeats a `1×m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let (r, m) = dims(self.value(a));
        if r != 1 {
            return Err(Error::shape(format!("broadcast_rows expects one row, got {r}")));
        }
        let out = self
            .value(a)
            .broadcast((n, m))
            .expect("row broadcast")
            .to_owned();
        let tr = self.tracked(a);
        Ok(self.push(out, Op::BroadcastRows(a), tr))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if v.len() != rows * cols {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {rows}x{cols}",
                v.dim()
            )));
        }
        let flat: Vec<T> = v.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("checked length");
        let tr = self.tracked(a);
        Ok(self.push(out, Op::Reshape(a), tr))
    }

    /// `out[s, d] = Σ_k w[s, k] · noise[s, k, d]` for a constant `noise`.
    pub fn row_mix(&mut self, w: Var, noise: Array3<T>) -> Result<Var> {
        self.check(w)?;
        let (n, k) = dims(self.value(w));
        let (n2, k2, d) = noise.dim();
        if (n, k) != (n2, k2) {
            return Err(Error::shape(format!(
                "row_mix weights {n}x{k} vs noise {n2}x{k2}x{d}"
            )));
        }
        let wv = self.value(w);
        let mut out = Array2::zeros((n, d));
        for s in 0..n {
            for c in 0..k {
                let ws = wv[[s, c]];
                for j in 0..d {
                    out[[s, j]] += ws * noise[[s, c, j]];
                }
            }
        }
        let tr = self.tracked(w);
        Ok(self.push(out, Op::RowMix(w, noise), tr))
    }

    /// `(1/n) Σ_s ‖a_s‖²` as a 1×1 node.
    pub fn mean_row_sq_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let n = v.nrows().max(1);
        let total: T = v.iter().map(|&x| x * x).sum();
        let out = Array2::from_elem((1, 1), total / T::from_usize_lossy(n));
        let tr = self.tracked(a);
        Ok(self.push(out, Op::MeanRowSqNorm(a), tr))
    }

    /// `Σ a ∘ c` as a 1×1 node.
    pub fn dot_const(&mut self, a: Var, c: Array2<T>) -> Result<Var> {
        self.check(a)?;
        if dims(self.value(a)) != c.dim() {
            return Err(Error::shape("dot_const operand shapes differ"));
        }
        let s: T = Zip::from(self.value(a))
            .and(&c)
            .fold(T::zero(), |acc, &x, &y| acc + x * y);
        let tr = self.tracked(a);
        Ok(self.push(Array2::from_elem((1, 1), s), Op::DotConst(a, c), tr))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if dims(self.value(loss)) != (1, 1) {
            return Err(Error::shape("backward needs a 1x1 loss node"));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        fn acc<T: Scalar>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        acc(&mut adj[a.0], g.dot(&self.value(*b).t()));
                    }
                    if self.tracked(*b) {
                        acc(&mut adj[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.tracked(*a) {
                        acc(&mut adj[a.0], g.dot(self.value(*b)));
                    }
                    if self.tracked(*b) {
                        acc(&mut adj[b.0], g.t().dot(self.value(*a)));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.tracked(*b) {
                        acc(&mut adj[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.tracked(*a) {
                        acc(&mut adj[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        acc(&mut adj[b.0], g.clone());
                    }
                    if self.tracked(*a) {
                        acc(&mut adj[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*b) {
                        acc(&mut adj[b.0], g.mapv(|x| -x));
                    }
                    if self.tracked(*a) {
                        acc(&mut adj[a.0], g);
                    }
                }
                Op::MulConst(a, c) => acc(&mut adj[a.0], g * c),
                Op::Offset(a) => acc(&mut adj[a.0], g),
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut adj[a.0], g.mapv(|x| x * s))
                }
                Op::Act(a, act) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .and(&node.value)
                        .for_each(|d, &x, &y| *d *= act.derivative(x, y));
                    acc(&mut adj[a.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for ((mut drow, grow), yrow) in
                        d.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                    {
                        let dot: T = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    acc(&mut adj[a.0], d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for ((mut drow, grow), yrow) in
                        d.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                    {
                        let total: T = grow.iter().copied().sum();
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                            *dv = gv - yv.exp() * total;
                        }
                    }
                    acc(&mut adj[a.0], d);
                }
                Op::BroadcastRows(a) => {
                    acc(&mut adj[a.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Reshape(a) => {
                    let shape = dims(self.value(*a));
                    let flat: Vec<T> = g.iter().copied().collect();
                    acc(
                        &mut adj[a.0],
                        Array2::from_shape_vec(shape, flat).expect("reshape adjoint"),
                    );
                }
                Op::RowMix(w, noise) => {
                    let (n, k, d) = noise.dim();
                    let mut dw = Array2::zeros((n, k));
                    for s in 0..n {
                        for c in 0..k {
                            let mut t = T::zero();
                            for j in 0..d {
                                t += g[[s, j]] * noise[[s, c, j]];
                            }
                            dw[[s, c]] = t;
                        }
                    }
                    acc(&mut adj[w.0], dw);
                }
                Op::MeanRowSqNorm(a) => {
                    let v = self.value(*a);
                    let scale = g[[0, 0]] * T::lit(2.0) / T::from_usize_lossy(v.nrows().max(1));
                    acc(&mut adj[a.0], v.mapv(|x| x * scale));
                }
                Op::DotConst(a, c) => {
                    let s = g[[0, 0]];
                    acc(&mut adj[a.0], c.mapv(|x| x * s));
                }
            }
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}
