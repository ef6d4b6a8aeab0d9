use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{mismatch, NnError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Operation families, used to address fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    Gelu,
    Silu,
    Exp,
    Clamp,
    LayerNorm,
    Softmax,
    Rope,
    Attention,
    SliceCols,
    Sum,
    Mean,
    MaskedMse,
    Kl,
}

/// Deliberate backward corruption for negative-control gradient checks:
/// the gradient flowing out of every `op` node is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

const ROPE_BASE: f64 = 10_000.0;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Rope {
        x: Var,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    Kl {
        mu: Var,
        logvar: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Silu(_) => OpKind::Silu,
            Op::Exp(_) => OpKind::Exp,
            Op::Clamp(..) => OpKind::Clamp,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Rope { .. } => OpKind::Rope,
            Op::Attention { .. } => OpKind::Attention,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MaskedMse { .. } => OpKind::MaskedMse,
            Op::Kl { .. } => OpKind::Kl,
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Records a computation on row-major matrices for reverse-mode
/// differentiation. Every value is 2-D; scalars are 1×1.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    fault: Option<Fault>,
}

/// C = alpha·A·B + beta·C over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotates each (even, odd) column pair of every head by the row position
/// times a per-pair frequency; `sign = -1` applies the inverse rotation.
fn rope_rotate(src: &[f64], dst: &mut [f64], rows: usize, cols: usize, heads: usize, sign: f64) {
    let dh = cols / heads;
    for i in 0..rows {
        for h in 0..heads {
            for j in 0..dh / 2 {
                let theta = i as f64 * ROPE_BASE.powf(-2.0 * j as f64 / dh as f64);
                let (s, c) = (sign * theta).sin_cos();
                let a = i * cols + h * dh + 2 * j;
                let (x0, x1) = (src[a], src[a + 1]);
                dst[a] = x0 * c - x1 * s;
                dst[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn row_weights(op: &'static str, mask: Option<&[bool]>, rows: usize) -> Result<Vec<f64>, NnError> {
    match mask {
        None => Ok(vec![1.0; rows]),
        Some(m) if m.len() == rows => Ok(m.iter().map(|&b| f64::from(u8::from(b))).collect()),
        Some(m) => Err(mismatch(op, &[rows], &[m.len()])),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(
            n.value.len(),
            1,
            "scalar() on a {}x{} value",
            n.rows,
            n.cols
        );
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node dims")
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, NnError> {
        if rows * cols != data.len() {
            return Err(mismatch("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = store.get(id);
        let (rows, cols) = t.matrix_dims();
        let v = self.push(rows, cols, t.data().to_vec(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), NnError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(mismatch(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    fn row_dims(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize), NnError> {
        let (da, dr) = (self.dims(a), self.dims(row));
        if dr != (1, da.1) {
            return Err(mismatch(op, &[da.0, da.1], &[dr.0, dr.1]));
        }
        Ok(da)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(r, c, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(mismatch("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (r, c) = self.same_dims("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (r, c) = self.same_dims("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    /// Adds a 1×cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (r, c) = self.row_dims("add_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q))
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a 1×cols row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (r, c) = self.row_dims("mul_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p * q))
            .collect();
        Ok(self.push(r, c, out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// optional 1×cols scale and shift rows.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta].into_iter().flatten() {
            self.row_dims("layer_norm", x, p)?;
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for (j, v) in row.iter().enumerate() {
                xhat[i * c + j] = (v - mean) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g);
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(g).for_each(|(o, s)| *o *= s);
            }
        }
        if let Some(b) = beta {
            let b = self.value(b);
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(o, s)| *o += s);
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax(x))
    }

    /// Rotary position embedding: row index is the position, each head's
    /// columns are rotated in consecutive pairs.
    pub fn rope(&mut self, x: Var, heads: usize) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if heads == 0 || c % heads != 0 || !(c / heads).is_multiple_of(2) {
            return Err(NnError::InvalidArgument {
                op: "rope",
                reason: format!("{c} columns cannot split into {heads} even-width heads"),
            });
        }
        let mut out = vec![0.0; r * c];
        rope_rotate(self.value(x), &mut out, r, c, heads, 1.0);
        Ok(self.push(r, c, out, Op::Rope { x, heads }))
    }

    /// Scaled dot-product attention over `heads` column groups. `q` is
    /// n×d, `k` and `v` are m×d; returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NnError> {
        let ((n, d), (m, dk), (mv, dv)) = (self.dims(q), self.dims(k), self.dims(v));
        if dk != d || dv != d || mv != m {
            return Err(mismatch("attention", &[n, d], &[m, dk, mv, dv]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::InvalidArgument {
                op: "attention",
                reason: format!("width {d} is not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                &qv[h * dh..],
                (d, 1),
                &kv[h * dh..],
                (1, d),
                0.0,
                p,
                (m, 1),
            );
            for row in p.chunks_mut(m) {
                softmax_in_place(row);
            }
            gemm(
                n,
                m,
                dh,
                1.0,
                p,
                (m, 1),
                &vv[h * dh..],
                (d, 1),
                0.0,
                &mut out[h * dh..],
                (d, 1),
            );
        }
        Ok(self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Columns `start..start+len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(mismatch("slice_cols", &[r, c], &[start, len]));
        }
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(r, len, out, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(1, 1, vec![s], Op::Mean(x))
    }

    /// Mean squared error against a constant target over the rows where
    /// `mask` is set (all rows when `None`). An empty mask gives zero.
    pub fn masked_mse(
        &mut self,
        pred: Var,
        target: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let (r, c) = self.dims(pred);
        if target.len() != r * c {
            return Err(mismatch("masked_mse", &[r, c], &[target.len()]));
        }
        let weights = normalized(row_weights("masked_mse", mask, r)?, c);
        let loss = self
            .value(pred)
            .chunks(c)
            .zip(target.chunks(c))
            .zip(&weights)
            .map(|((p, t), w)| w * p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                weights,
            },
        ))
    }

    /// KL divergence of N(μ, exp(logvar)) from N(0, I): half the mean of
    /// μ² + exp(logvar) − logvar − 1 over the masked rows.
    pub fn kl_standard_normal(
        &mut self,
        mu: Var,
        logvar: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let (r, c) = self.same_dims("kl", mu, logvar)?;
        let weights = normalized(row_weights("kl", mask, r)?, c);
        let loss = self
            .value(mu)
            .chunks(c)
            .zip(self.value(logvar).chunks(c))
            .zip(&weights)
            .map(|((m, l), w)| {
                w * 0.5
                    * m.iter()
                        .zip(l)
                        .map(|(a, b)| a * a + b.exp() - b - 1.0)
                        .sum::<f64>()
            })
            .sum();
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Kl {
                mu,
                logvar,
                weights,
            },
        ))
    }

    /// Reverse pass from a 1×1 `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Grads {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(f) = self.fault.filter(|f| f.op == node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= f.factor);
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Grads::zeros_like(store);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                out.get_mut(*id)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].cols;
                let ga = acc(grads, *a, r * k);
                gemm(
                    r,
                    c,
                    k,
                    1.0,
                    g,
                    (c, 1),
                    self.value(*b),
                    (1, c),
                    1.0,
                    ga,
                    (k, 1),
                );
                let gb = acc(grads, *b, k * c);
                gemm(
                    k,
                    r,
                    c,
                    1.0,
                    self.value(*a),
                    (1, k),
                    g,
                    (c, 1),
                    1.0,
                    gb,
                    (c, 1),
                );
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, g.len());
                ga.iter_mut()
                    .zip(g)
                    .zip(bv)
                    .for_each(|((o, g), y)| *o += g * y);
                let gb = acc(grads, *b, g.len());
                gb.iter_mut()
                    .zip(g)
                    .zip(av)
                    .for_each(|((o, g), x)| *o += g * x);
            }
            Op::AddRow(a, row) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                let gr = acc(grads, *row, c);
                for grow in g.chunks(c) {
                    add_into(gr, grow, 1.0);
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let ga = acc(grads, *a, g.len());
                for (orow, grow) in ga.chunks_mut(c).zip(g.chunks(c)) {
                    orow.iter_mut()
                        .zip(grow)
                        .zip(rv)
                        .for_each(|((o, g), y)| *o += g * y);
                }
                let gr = acc(grads, *row, c);
                for (arow, grow) in av.chunks(c).zip(g.chunks(c)) {
                    gr.iter_mut()
                        .zip(grow)
                        .zip(arow)
                        .for_each(|((o, g), x)| *o += g * x);
                }
            }
            Op::Scale(x, s) => add_into(acc(grads, *x, g.len()), g, *s),
            Op::AddScalar(x) => add_into(acc(grads, *x, g.len()), g, 1.0),
            Op::Gelu(x) => self.unary_back(*x, g, grads, |v, _| gelu_grad(v), &node.value),
            Op::Silu(x) => self.unary_back(
                *x,
                g,
                grads,
                |v, _| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                },
                &node.value,
            ),
            Op::Exp(x) => self.unary_back(*x, g, grads, |_, y| y, &node.value),
            Op::Clamp(x, lo, hi) => self.unary_back(
                *x,
                g,
                grads,
                |v, _| f64::from(u8::from(v >= *lo && v <= *hi)),
                &node.value,
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if let Some(b) = beta {
                    let gb = acc(grads, *b, c);
                    for grow in g.chunks(c) {
                        add_into(gb, grow, 1.0);
                    }
                }
                if let Some(gm) = gamma {
                    let gg = acc(grads, *gm, c);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut()
                            .zip(grow)
                            .zip(hrow)
                            .for_each(|((o, g), h)| *o += g * h);
                    }
                }
                let scale = gamma.map(|gm| self.value(gm).to_vec());
                let gx = acc(grads, *x, r * c);
                let mut dh = vec![0.0; c];
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let hrow = &xhat[i * c..(i + 1) * c];
                    for j in 0..c {
                        dh[j] = grow[j] * scale.as_ref().map_or(1.0, |s| s[j]);
                    }
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
            Op::Softmax(x) => {
                let gx = acc(grads, *x, r * c);
                for ((orow, grow), yrow) in
                    gx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        orow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Rope { x, heads } => {
                let mut back = vec![0.0; r * c];
                rope_rotate(g, &mut back, r, c, *heads, -1.0);
                add_into(acc(grads, *x, r * c), &back, 1.0);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_back(*q, *k, *v, *heads, probs, g, grads),
            Op::SliceCols { x, start } => {
                let xc = self.nodes[x.0].cols;
                let gx = acc(grads, *x, r * xc);
                for (orow, grow) in gx.chunks_mut(xc).zip(g.chunks(c)) {
                    add_into(&mut orow[*start..start + c], grow, 1.0);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g[0] / n.max(1) as f64;
                acc(grads, *x, n).iter_mut().for_each(|o| *o += s);
            }
            Op::MaskedMse {
                pred,
                target,
                weights,
            } => {
                let pc = self.nodes[pred.0].cols;
                let pv = self.value(*pred);
                let gp = acc(grads, *pred, pv.len());
                for (i, w) in weights.iter().enumerate() {
                    for j in i * pc..(i + 1) * pc {
                        gp[j] += g[0] * w * 2.0 * (pv[j] - target[j]);
                    }
                }
            }
            Op::Kl {
                mu,
                logvar,
                weights,
            } => {
                let mc = self.nodes[mu.0].cols;
                let (mv, lv) = (self.value(*mu).to_vec(), self.value(*logvar).to_vec());
                let gm = acc(grads, *mu, mv.len());
                for (i, w) in weights.iter().enumerate() {
                    for j in i * mc..(i + 1) * mc {
                        gm[j] += g[0] * w * mv[j];
                    }
                }
                let gl = acc(grads, *logvar, lv.len());
                for (i, w) in weights.iter().enumerate() {
                    for j in i * mc..(i + 1) * mc {
                        gl[j] += g[0] * w * 0.5 * (lv[j].exp() - 1.0);
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let xv = self.value(x);
        let gx = acc(grads, x, g.len());
        for (((o, gi), xi), yi) in gx.iter_mut().zip(g).zip(xv).zip(out) {
            *o += gi * d(*xi, *yi);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_back(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = self.dims(q);
        let m = self.dims(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut ds = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            // dV_h += Pᵀ · dO_h
            let gv = acc(grads, v, m * d);
            gemm(
                m,
                n,
                dh,
                1.0,
                p,
                (1, m),
                &g[h * dh..],
                (d, 1),
                1.0,
                &mut gv[h * dh..],
                (d, 1),
            );
            // dP = dO_h · V_hᵀ
            gemm(
                n,
                dh,
                m,
                1.0,
                &g[h * dh..],
                (d, 1),
                &vv[h * dh..],
                (1, d),
                0.0,
                &mut ds,
                (m, 1),
            );
            for (drow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (dv, pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            let gq = acc(grads, q, n * d);
            gemm(
                n,
                m,
                dh,
                1.0,
                &ds,
                (m, 1),
                &kv[h * dh..],
                (d, 1),
                1.0,
                &mut gq[h * dh..],
                (d, 1),
            );
            let gk = acc(grads, k, m * d);
            gemm(
                m,
                n,
                dh,
                1.0,
                &ds,
                (1, m),
                &qv[h * dh..],
                (d, 1),
                1.0,
                &mut gk[h * dh..],
                (d, 1),
            );
        }
    }
}

fn normalized(mut weights: Vec<f64>, cols: usize) -> Vec<f64> {
    let total: f64 = weights.iter().sum::<f64>() * cols as f64;
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    weights
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, x)| *d += s * x);
}
