use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::fields::EncodingConfig;

/// Dense row-major matrix of 64-bit reals. Scalars are `1×1`, vectors are rows or columns.
pub type Tensor = Array2<f64>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Value, Value),
    Linear {
        input: Value,
        weight: Value,
        bias: Value,
    },
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Concat(Vec<Value>),
    Relu(Value),
    Sigmoid(Value),
    Exp(Value),
    Neg(Value),
    Abs(Value),
    Square(Value),
    Sin(Value),
    Cos(Value),
    Scale(Value, f64),
    AddScalar(Value),
    Sum(Value),
    Mean(Value),
    RowSums(Value),
    SegmentSum(Value, usize),
    Reshape(Value),
    GatherRows(Value, Vec<usize>),
    /// `perm[r * n + j]` is the source column of output column `j` in row `r`.
    SortRows(Value, Vec<usize>),
    CumsumExclusive(Value),
    Gaps {
        depths: Value,
        clamped: Vec<bool>,
    },
    PosEnc(Value, EncodingConfig),
}

struct Node {
    data: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: Tensor, target: (usize, usize)) -> Tensor {
    let mut g = g;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_to(t: &Tensor, target: (usize, usize)) -> Tensor {
    t.broadcast(target)
        .expect("shape checked at construction")
        .to_owned()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Tensor, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            data,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, data: Tensor) -> Value {
        self.push(data, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, data: Tensor) -> Value {
        self.push(data, Op::Leaf, false)
    }

    pub fn leaf(&mut self, data: Tensor, requires_grad: bool) -> Value {
        self.push(data, Op::Leaf, requires_grad)
    }

    pub fn data(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.nodes[v.0].data.dim()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar content of a `1×1` value.
    pub fn scalar(&self, v: Value) -> f64 {
        self.nodes[v.0].data[[0, 0]]
    }

    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Value) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- operations -------------------------------------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.data(a).dot(self.data(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Affine map `input · weightᵀ + bias` with `weight` stored as `out × in` and `bias` as `1 × out`.
    pub fn linear(&mut self, input: Value, weight: Value, bias: Value) -> Result<Value> {
        let (sx, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if sx.1 != sw.1 {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != (1, sw.0) {
            return Err(Error::Shape {
                op: "linear(bias)",
                lhs: sw,
                rhs: sb,
            });
        }
        let mut out = self.data(input).dot(&self.data(weight).t());
        out += self.data(bias);
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(&Tensor, &Tensor) -> Tensor,
        op: Op,
    ) -> Result<Value> {
        broadcast_shape(name, self.shape(a), self.shape(b))?;
        let out = f(self.data(a), self.data(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Value]) -> Result<Value> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rows = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(*first),
                    rhs: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.data(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    fn unary(&mut self, a: Value, f: impl Fn(f64) -> f64, op: Op) -> Value {
        let out = self.data(a).mapv(f);
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Value) -> Value {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Value) -> Value {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sin(&mut self, a: Value) -> Value {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Value) -> Value {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let out = Array2::from_elem((1, 1), self.data(a).sum());
        let rg = self.needs(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let d = self.data(a);
        let out = Array2::from_elem((1, 1), d.sum() / d.len() as f64);
        let rg = self.needs(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sums each row, `m×n → m×1`.
    pub fn row_sums(&mut self, a: Value) -> Value {
        let out = self.data(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.needs(&[a]);
        self.push(out, Op::RowSums(a), rg)
    }

    /// Sums consecutive groups of `group` rows, `(k·group)×c → k×c`.
    pub fn segment_sum(&mut self, a: Value, group: usize) -> Result<Value> {
        let (r, c) = self.shape(a);
        if group == 0 || r % group != 0 {
            return Err(Error::invalid(
                "segment_sum",
                format!("{r} rows are not divisible into groups of {group}"),
            ));
        }
        let src = self.data(a);
        let mut out = Array2::zeros((r / group, c));
        for (k, mut row) in out.outer_iter_mut().enumerate() {
            for i in 0..group {
                row += &src.row(k * group + i);
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, group), rg))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Value, rows: usize, cols: usize) -> Result<Value> {
        let s = self.shape(a);
        if s.0 * s.1 != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: s,
                rhs: (rows, cols),
            });
        }
        let flat: Vec<f64> = self.data(a).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn gather_rows(&mut self, a: Value, index: &[usize]) -> Result<Value> {
        let (r, _) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let out = self.data(a).select(Axis(0), index);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), rg))
    }

    /// Sorts every row ascending. The permutation is computed from detached values and treated
    /// as locally constant, so gradients are routed back through its inverse.
    pub fn sort_rows(&mut self, a: Value) -> Value {
        let src = self.data(a);
        let (r, n) = src.dim();
        let mut perm = Vec::with_capacity(r * n);
        let mut out = Array2::zeros((r, n));
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for (i, row) in src.outer_iter().enumerate() {
            order.clear();
            order.extend(0..n);
            order.sort_by(|&x, &y| row[x].total_cmp(&row[y]));
            for (j, &k) in order.iter().enumerate() {
                out[[i, j]] = row[k];
            }
            perm.extend_from_slice(&order);
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::SortRows(a, perm), rg)
    }

    /// Exclusive prefix sum along each row: `out[r, j] = Σ_{i<j} a[r, i]`.
    pub fn cumsum_exclusive(&mut self, a: Value) -> Value {
        let mut out = Array2::zeros(self.shape(a));
        Zip::from(out.rows_mut())
            .and(self.data(a).rows())
            .for_each(|mut o, x| {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    o[j] = acc;
                    acc += x[j];
                }
            });
        let rg = self.needs(&[a]);
        self.push(out, Op::CumsumExclusive(a), rg)
    }

    /// Inter-sample gaps of ascending depths. Interior gaps are `t[j+1] − t[j]`; the last gap
    /// runs to the row's far bound and is clamped below by [`MIN_GAP`].
    pub fn gaps(&mut self, depths: Value, far: &[f64]) -> Result<Value> {
        let (r, n) = self.shape(depths);
        if far.len() != r || n == 0 {
            return Err(Error::Shape {
                op: "gaps",
                lhs: (r, n),
                rhs: (far.len(), 1),
            });
        }
        let t = self.data(depths);
        let mut out = Array2::zeros((r, n));
        let mut clamped = Vec::with_capacity(r);
        for i in 0..r {
            for j in 0..n - 1 {
                out[[i, j]] = t[[i, j + 1]] - t[[i, j]];
            }
            let last = far[i] - t[[i, n - 1]];
            clamped.push(last < MIN_GAP);
            out[[i, n - 1]] = last.max(MIN_GAP);
        }
        let rg = self.needs(&[depths]);
        Ok(self.push(out, Op::Gaps { depths, clamped }, rg))
    }

    /// Sinusoidal encoding of every element, see [`EncodingConfig`].
    pub fn positional_encode(&mut self, a: Value, cfg: EncodingConfig) -> Value {
        let src = self.data(a);
        let (r, k) = src.dim();
        let width = cfg.width_per_scalar();
        let freqs = cfg.frequencies();
        let mut out = Array2::zeros((r, k * width));
        for i in 0..r {
            for c in 0..k {
                let p = src[[i, c]];
                let mut col = c * width;
                if cfg.include_identity {
                    out[[i, col]] = p;
                    col += 1;
                }
                for &w in &freqs {
                    let (s, co) = (w * p).sin_cos();
                    out[[i, col]] = s;
                    out[[i, col + 1]] = co;
                    col += 2;
                }
            }
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::PosEnc(a, cfg), rg)
    }

    // ---- reverse sweep ----------------------------------------------------------------------

    /// Back-propagates from a scalar root. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Value) -> Result<()> {
        let s = self.shape(root);
        if s != (1, 1) {
            return Err(Error::NonScalarRoot(s));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.data;
        let mut send = |v: Value, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => *acc += &t,
                slot => *slot = Some(t),
            }
        };
        let d = |v: Value| &self.nodes[v.0].data;
        let wants = |v: Value| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.dot(&d(*b).t()));
                }
                if wants(*b) {
                    send(*b, d(*a).t().dot(g));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                if wants(*input) {
                    send(*input, g.dot(d(*weight)));
                }
                if wants(*weight) {
                    send(*weight, g.t().dot(d(*input)));
                }
                if wants(*bias) {
                    send(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                send(*a, reduce_to(g.clone(), shape(d(*a))));
                send(*b, reduce_to(g.clone(), shape(d(*b))));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g.clone(), shape(d(*a))));
                send(*b, reduce_to(-g, shape(d(*b))));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, reduce_to(g * d(*b), shape(d(*a))));
                }
                if wants(*b) {
                    send(*b, reduce_to(g * d(*a), shape(d(*b))));
                }
            }
            Op::Concat(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = d(*p).ncols();
                    if wants(*p) {
                        send(*p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::Relu(a) => {
                let mut t = g.clone();
                Zip::from(&mut t)
                    .and(out)
                    .for_each(|t, &y| *t = if y > 0.0 { *t } else { 0.0 });
                send(*a, t);
            }
            Op::Sigmoid(a) => {
                let mut t = g.clone();
                Zip::from(&mut t).and(out).for_each(|t, &y| *t *= y * (1.0 - y));
                send(*a, t);
            }
            Op::Exp(a) => send(*a, g * out),
            Op::Neg(a) => send(*a, -g),
            Op::Abs(a) => {
                let mut t = g.clone();
                Zip::from(&mut t).and(d(*a)).for_each(|t, &x| {
                    *t *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                send(*a, t);
            }
            Op::Square(a) => {
                let mut t = g.clone();
                Zip::from(&mut t).and(d(*a)).for_each(|t, &x| *t *= 2.0 * x);
                send(*a, t);
            }
            Op::Sin(a) => {
                let mut t = g.clone();
                Zip::from(&mut t).and(d(*a)).for_each(|t, &x| *t *= x.cos());
                send(*a, t);
            }
            Op::Cos(a) => {
                let mut t = g.clone();
                Zip::from(&mut t).and(d(*a)).for_each(|t, &x| *t *= -x.sin());
                send(*a, t);
            }
            Op::Scale(a, c) => send(*a, g * *c),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Sum(a) => send(*a, Array2::from_elem(shape(d(*a)), g[[0, 0]])),
            Op::Mean(a) => {
                let n = d(*a).len() as f64;
                send(*a, Array2::from_elem(shape(d(*a)), g[[0, 0]] / n));
            }
            Op::RowSums(a) => send(*a, broadcast_to(g, shape(d(*a)))),
            Op::SegmentSum(a, group) => {
                let (r, c) = shape(d(*a));
                let mut t = Array2::zeros((r, c));
                for (i, mut row) in t.outer_iter_mut().enumerate() {
                    row.assign(&g.row(i / group));
                }
                send(*a, t);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                send(
                    *a,
                    Array2::from_shape_vec(shape(d(*a)), flat).expect("same size"),
                );
            }
            Op::GatherRows(a, index) => {
                let mut t = Array2::zeros(shape(d(*a)));
                for (k, &src) in index.iter().enumerate() {
                    let mut row = t.row_mut(src);
                    row += &g.row(k);
                }
                send(*a, t);
            }
            Op::SortRows(a, perm) => {
                let (r, n) = shape(out);
                let mut t = Array2::zeros((r, n));
                for i in 0..r {
                    for j in 0..n {
                        t[[i, perm[i * n + j]]] += g[[i, j]];
                    }
                }
                send(*a, t);
            }
            Op::CumsumExclusive(a) => {
                let mut t = Array2::zeros(shape(out));
                Zip::from(t.rows_mut()).and(g.rows()).for_each(|mut t, g| {
                    let mut acc = 0.0;
                    for j in (0..g.len()).rev() {
                        t[j] = acc;
                        acc += g[j];
                    }
                });
                send(*a, t);
            }
            Op::Gaps { depths, clamped } => {
                let (r, n) = shape(out);
                let mut t = Array2::zeros((r, n));
                for i in 0..r {
                    for j in 0..n - 1 {
                        t[[i, j + 1]] += g[[i, j]];
                        t[[i, j]] -= g[[i, j]];
                    }
                    if !clamped[i] {
                        t[[i, n - 1]] -= g[[i, n - 1]];
                    }
                }
                send(*depths, t);
            }
            Op::PosEnc(a, cfg) => {
                let src = d(*a);
                let (r, k) = src.dim();
                let width = cfg.width_per_scalar();
                let freqs = cfg.frequencies();
                let mut t = Array2::zeros((r, k));
                for i in 0..r {
                    for c in 0..k {
                        let mut col = c * width;
                        let mut acc = 0.0;
                        if cfg.include_identity {
                            acc += g[[i, col]];
                            col += 1;
                        }
                        for &w in &freqs {
                            // out[col] = sin(w p), out[col+1] = cos(w p)
                            let sin = out[[i, col]];
                            let cos = out[[i, col + 1]];
                            acc += w * (g[[i, col]] * cos - g[[i, col + 1]] * sin);
                            col += 2;
                        }
                        t[[i, c]] = acc;
                    }
                }
                send(*a, t);
            }
        }
    }
}

/// Lower bound on the final inter-sample gap.
pub const MIN_GAP: f64 = 1e-10;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
