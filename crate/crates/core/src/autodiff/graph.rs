use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    PairwiseSqDist {
        a: Var,
        b: Var,
        clamped: Vec<bool>,
    },
    GatherRows(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf(..) => "powf",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
            Op::GatherRows(..) => "gather_rows",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::PairwiseSqDist { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2Normalize(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Record of one node, as exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Tape of tensor operations, recorded in creation order.
///
/// Node ids are assigned monotonically, so the tape is topologically
/// ordered by construction: every input precedes its consumer.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node's value; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        self.value(a).dims2().ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: vec![],
        })
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same element count");
        self.push_op(out, op)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// Broadcast-add a length-N vector to every row of a B×N matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("add_row", x)?;
        if self.shape(b) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for r in 0..rows {
            for (d, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *d += bv;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::AddRow(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let data = transpose(self.data(a), m, n);
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push_op(out, Op::Transpose(a)))
    }

    /// Direct stride-1 2-D convolution with zero padding.
    ///
    /// `input` is B×C×H×W, `weight` is O×C×k×k and the optional `bias` has
    /// length O. Output is B×O×(H+2p−k+1)×(W+2p−k+1).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let mismatch = |g: &Graph| Error::ShapeMismatch {
            op: "conv2d",
            lhs: g.shape(input).to_vec(),
            rhs: g.shape(weight).to_vec(),
        };
        let &[b, c, h, w] = self.shape(input) else {
            return Err(mismatch(self));
        };
        let &[o, c2, kh, kw] = self.shape(weight) else {
            return Err(mismatch(self));
        };
        if c != c2 || kh != kw || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch(self));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![o],
                    rhs: self.shape(bv).to_vec(),
                });
            }
        }
        let geo = ConvGeometry {
            batch: b,
            in_ch: c,
            out_ch: o,
            h,
            w,
            k: kh,
            pad: padding,
        };
        let mut out = vec![0.0; b * o * geo.oh() * geo.ow()];
        geo.forward(self.data(input), self.data(weight), &mut out);
        if let Some(bv) = bias {
            let plane = geo.oh() * geo.ow();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias_v = self.data(bv)[i % o];
                chunk.iter_mut().for_each(|x| *x += bias_v);
            }
        }
        let out = Tensor::new(vec![b, o, geo.oh(), geo.ow()], out)?;
        Ok(self.push_op(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.map(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.push_op(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row sums of a B×N matrix, giving a length-B vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.rank2("sum_rows", a)?;
        let data: Vec<f64> = if cols == 0 {
            vec![0.0; self.shape(a)[0]]
        } else {
            self.data(a).chunks(cols).map(|r| r.iter().sum()).collect()
        };
        let out = Tensor::new(vec![data.len()], data)?;
        Ok(self.push_op(out, Op::SumRows(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("softmax", a)?;
        let mut data = self.data(a).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("log_softmax", a)?;
        let mut data = self.data(a).to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::LogSoftmax(a)))
    }

    /// Scale every row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("l2_normalize", a)?;
        let mut data = self.data(a).to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm {
                    op: "l2_normalize",
                    row: r,
                });
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::L2Normalize(a)))
    }

    /// Squared Euclidean distances between rows of `a` (M×D) and rows of
    /// `b` (N×D), computed as ‖a‖² + ‖b‖² − 2a·b and clamped at zero.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.rank2("pairwise_sq_dist", a)?;
        let (n, d2) = self.rank2("pairwise_sq_dist", b)?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sq_dist",
                lhs: vec![m, d],
                rhs: vec![n, d2],
            });
        }
        let av = self.data(a);
        let bv = self.data(b);
        let bt = transpose(bv, n, d);
        let dots = matmul_nn(av, &bt, m, d, n);
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let a_sq: Vec<f64> = (0..m).map(|i| sq(&av[i * d..(i + 1) * d])).collect();
        let b_sq: Vec<f64> = (0..n).map(|j| sq(&bv[j * d..(j + 1) * d])).collect();
        let mut clamped = vec![false; m * n];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let raw = a_sq[i] + b_sq[j] - 2.0 * dots[i * n + j];
                if raw < 0.0 {
                    clamped[i * n + j] = true;
                } else {
                    data[i * n + j] = raw;
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(out, Op::PairwiseSqDist { a, b, clamped }))
    }

    /// Select first-axis slices by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = *self.shape(a).first().unwrap_or(&0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let out = self.value(a).select_rows(idx);
        Ok(self.push_op(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(out, Op::Reshape(a)))
    }

    /// Accumulate ∂root/∂node into the gradient buffer of every node that
    /// requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            self.propagate(id, &upstream, &mut pending);
            for (g, u) in self.nodes[id].grad.iter_mut().zip(&upstream) {
                *g += u;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, gy: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = pending[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |g| axpy(g, gy, 1.0));
                send(*b, &mut |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |g| axpy(g, gy, 1.0));
                send(*b, &mut |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                send(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                send(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &mut |g| axpy(g, gy, *c)),
            Op::AddScalar(a) => send(*a, &mut |g| axpy(g, gy, 1.0)),
            Op::AddRow(x, b) => {
                send(*x, &mut |g| axpy(g, gy, 1.0));
                let cols = self.shape(*b)[0];
                send(*b, &mut |g| {
                    if cols == 0 {
                        return;
                    }
                    for row in gy.chunks(cols) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                send(*a, &mut |g| {
                    // dA = dY · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gy[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                send(*b, &mut |g| {
                    // dB = Aᵀ · dY
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let grow = &gy[i * n..(i + 1) * n];
                            for (gv, &d) in g[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gv += a_ip * d;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("rank 2");
                send(*a, &mut |g| axpy(g, &transpose(gy, n, m), 1.0));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let s = self.shape(*input);
                let ws = self.shape(*weight);
                let geo = ConvGeometry {
                    batch: s[0],
                    in_ch: s[1],
                    out_ch: ws[0],
                    h: s[2],
                    w: s[3],
                    k: ws[2],
                    pad: *padding,
                };
                let (xv, wv) = (self.data(*input), self.data(*weight));
                send(*input, &mut |g| geo.backward_input(gy, wv, g));
                send(*weight, &mut |g| geo.backward_weight(gy, xv, g));
                if let Some(bv) = bias {
                    let plane = geo.oh() * geo.ow();
                    send(*bv, &mut |g| {
                        for (i, chunk) in gy.chunks(plane).enumerate() {
                            g[i % geo.out_ch] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                send(*a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Exp(a) => send(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = self.data(*a);
                send(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / x[i];
                    }
                });
            }
            Op::Powf(a, p) => {
                let x = self.data(*a);
                let p = *p;
                send(*a, &mut |g| {
                    for i in 0..g.len() {
                        let d = if p == 0.0 || (x[i] == 0.0 && p < 1.0) {
                            0.0
                        } else {
                            p * x[i].powf(p - 1.0)
                        };
                        g[i] += gy[i] * d;
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                send(*a, &mut |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::SumRows(a) => {
                let cols = self.shape(*a)[1];
                send(*a, &mut |g| {
                    if cols == 0 {
                        return;
                    }
                    for (row, &u) in g.chunks_mut(cols).zip(gy) {
                        row.iter_mut().for_each(|v| *v += u);
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = self.shape(*a)[1];
                send(*a, &mut |g| {
                    for ((gr, yr), ur) in
                        g.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(ur).map(|(p, u)| p * u).sum();
                        for j in 0..cols {
                            gr[j] += yr[j] * (ur[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = self.shape(*a)[1];
                send(*a, &mut |g| {
                    for ((gr, yr), ur) in
                        g.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols))
                    {
                        let total: f64 = ur.iter().sum();
                        for j in 0..cols {
                            gr[j] += ur[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::L2Normalize(a) => {
                let cols = self.shape(*a)[1];
                let x = self.data(*a);
                send(*a, &mut |g| {
                    for (r, ((gr, yr), ur)) in g
                        .chunks_mut(cols)
                        .zip(y.chunks(cols))
                        .zip(gy.chunks(cols))
                        .enumerate()
                    {
                        let norm = x[r * cols..(r + 1) * cols]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        let dot: f64 = yr.iter().zip(ur).map(|(p, u)| p * u).sum();
                        for j in 0..cols {
                            gr[j] += (ur[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::PairwiseSqDist { a, b, clamped } => {
                let (m, d) = self.value(*a).dims2().expect("rank 2");
                let n = self.shape(*b)[0];
                let (av, bv) = (self.data(*a), self.data(*b));
                let gate = |i: usize, j: usize| {
                    if clamped[i * n + j] {
                        0.0
                    } else {
                        gy[i * n + j]
                    }
                };
                send(*a, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * gate(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                g[i * d + t] += w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
                send(*b, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * gate(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                g[j * d + t] += w * (bv[j * d + t] - av[i * d + t]);
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                send(*a, &mut |g| {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(
                            &mut g[i * inner..(i + 1) * inner],
                            &gy[k * inner..(k + 1) * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    send(v, &mut |g| {
                        for o in 0..outer {
                            axpy(
                                &mut g[o * chunk..(o + 1) * chunk],
                                &gy[o * row + offset..o * row + offset + chunk],
                                1.0,
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(a) => send(*a, &mut |g| axpy(g, gy, 1.0)),
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeometry {
    fn oh(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    fn ow(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Visit every (output position, weight tap, input position) triple
    /// that lands inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k) = (self.oh(), self.ow(), self.k);
        for b in 0..self.batch {
            for o in 0..self.out_ch {
                for c in 0..self.in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w_idx = ((o * self.in_ch + c) * k + ky) * k + kx;
                            for y in 0..oh {
                                let iy = (y + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for x in 0..ow {
                                    let ix = (x + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let out_idx = ((b * self.out_ch + o) * oh + y) * ow + x;
                                    let in_idx = ((b * self.in_ch + c) * self.h + iy as usize)
                                        * self.w
                                        + ix as usize;
                                    f(out_idx, w_idx, in_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.for_each_tap(|o, wi, i| out[o] += w[wi] * x[i]);
    }

    fn backward_input(&self, gy: &[f64], w: &[f64], gx: &mut [f64]) {
        self.for_each_tap(|o, wi, i| gx[i] += w[wi] * gy[o]);
    }

    fn backward_weight(&self, gy: &[f64], x: &[f64], gw: &mut [f64]) {
        self.for_each_tap(|o, wi, i| gw[wi] += x[i] * gy[o]);
    }
}
