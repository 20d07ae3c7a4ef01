//! Define-then-run reverse-mode differentiation over small vector-valued nodes.
//!
//! A [`Graph`] is built once from named inputs, constants and primitive ops,
//! then [`Graph::evaluate`]d against bindings for the inputs. The forward pass
//! caches every node value; [`Graph::backward`] propagates adjoints from a
//! scalar output back to every input.
//!
//! Primitives: affine map (constant or variable matrix), elementwise tanh and
//! SiLU, softmax, log-sum-exp, dot product, L2 norm, cosine similarity,
//! quadratic form and diagonal Gaussian log-density, plus the structural
//! arithmetic needed to wire them together (add, sub, mul, scaling, sum,
//! index, concat).

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;

use crate::error::{LabError, Result};
use crate::linalg::{self, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Arc<Vec<f64>>),
    ScalarMul(NodeId, NodeId),
    Sum(NodeId),
    Index(NodeId, usize),
    Concat(Vec<NodeId>),
    Affine {
        w: Arc<Mat>,
        b: Option<Arc<Vec<f64>>>,
        x: NodeId,
    },
    MatVec {
        w: NodeId,
        rows: usize,
        cols: usize,
        x: NodeId,
    },
    Tanh(NodeId),
    Silu(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Dot(NodeId, NodeId),
    Norm(NodeId),
    CosSim(NodeId, NodeId),
    QuadForm {
        x: NodeId,
        m: Arc<Mat>,
    },
    GaussLogDensity {
        x: NodeId,
        mean: NodeId,
        var: Arc<Vec<f64>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Sum(_) => "sum",
            Op::Index(..) => "index",
            Op::Concat(_) => "concat",
            Op::Affine { .. } => "affine",
            Op::MatVec { .. } => "matvec",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Dot(..) => "dot",
            Op::Norm(_) => "norm",
            Op::CosSim(..) => "cosine",
            Op::QuadForm { .. } => "quadform",
            Op::GaussLogDensity { .. } => "gauss_logpdf",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    inputs: Vec<(String, NodeId)>,
    bound: HashMap<String, Vec<f64>>,
    output: Option<NodeId>,
    evaluated: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, dim: usize, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, dim });
        self.values.push(value);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.nodes[id.0].dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, name: &str, dim: usize) -> NodeId {
        assert!(
            self.inputs.iter().all(|(n, _)| n != name),
            "duplicate graph input `{name}`"
        );
        let id = self.push(Op::Input(name.to_string()), dim, vec![0.0; dim]);
        self.inputs.push((name.to_string(), id));
        id
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        let d = value.len();
        self.push(Op::Const, d, value)
    }

    fn same_dim(&self, a: NodeId, b: NodeId, what: &str) -> usize {
        let (da, db) = (self.dim(a), self.dim(b));
        assert_eq!(da, db, "{what}: operand dimensions {da} vs {db}");
        da
    }

    fn scalar(&self, a: NodeId, what: &str) {
        assert_eq!(self.dim(a), 1, "{what}: expected scalar operand");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.same_dim(a, b, "add");
        self.push(Op::Add(a, b), d, vec![0.0; d])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.same_dim(a, b, "sub");
        self.push(Op::Sub(a, b), d, vec![0.0; d])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.same_dim(a, b, "mul");
        self.push(Op::Mul(a, b), d, vec![0.0; d])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let d = self.dim(a);
        self.push(Op::Scale(a, k), d, vec![0.0; d])
    }

    pub fn mul_const(&mut self, a: NodeId, k: Vec<f64>) -> NodeId {
        let d = self.dim(a);
        assert_eq!(d, k.len(), "mul_const dimension");
        self.push(Op::MulConst(a, Arc::new(k)), d, vec![0.0; d])
    }

    /// scalar node × vector node
    pub fn scalar_mul(&mut self, s: NodeId, v: NodeId) -> NodeId {
        self.scalar(s, "scalar_mul");
        let d = self.dim(v);
        self.push(Op::ScalarMul(s, v), d, vec![0.0; d])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, vec![0.0])
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        assert!(i < self.dim(a), "index out of range");
        self.push(Op::Index(a, i), 1, vec![0.0])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let d = parts.iter().map(|p| self.dim(*p)).sum();
        self.push(Op::Concat(parts.to_vec()), d, vec![0.0; d])
    }

    /// `W x + b` with constant `W`, `b`.
    pub fn affine(&mut self, w: Arc<Mat>, b: Option<Vec<f64>>, x: NodeId) -> NodeId {
        assert_eq!(w.cols, self.dim(x), "affine input dimension");
        if let Some(b) = &b {
            assert_eq!(b.len(), w.rows, "affine bias dimension");
        }
        let d = w.rows;
        self.push(
            Op::Affine {
                w,
                b: b.map(Arc::new),
                x,
            },
            d,
            vec![0.0; d],
        )
    }

    /// `W x` where `W` is itself a node holding a row-major `rows × cols` matrix.
    pub fn matvec(&mut self, w: NodeId, rows: usize, cols: usize, x: NodeId) -> NodeId {
        assert_eq!(self.dim(w), rows * cols, "matvec weight size");
        assert_eq!(self.dim(x), cols, "matvec input dimension");
        self.push(Op::MatVec { w, rows, cols, x }, rows, vec![0.0; rows])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let d = self.dim(a);
        self.push(Op::Tanh(a), d, vec![0.0; d])
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let d = self.dim(a);
        self.push(Op::Silu(a), d, vec![0.0; d])
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let d = self.dim(a);
        self.push(Op::Softmax(a), d, vec![0.0; d])
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a), 1, vec![0.0])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dim(a, b, "dot");
        self.push(Op::Dot(a, b), 1, vec![0.0])
    }

    pub fn norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Norm(a), 1, vec![0.0])
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dim(a, b, "cosine");
        self.push(Op::CosSim(a, b), 1, vec![0.0])
    }

    /// `xᵀ M x`
    pub fn quad_form(&mut self, x: NodeId, m: Arc<Mat>) -> NodeId {
        assert!(m.rows == m.cols && m.rows == self.dim(x), "quad_form shape");
        self.push(Op::QuadForm { x, m }, 1, vec![0.0])
    }

    /// `log N(x; mean, diag(var))`
    pub fn gauss_log_density(&mut self, x: NodeId, mean: NodeId, var: Vec<f64>) -> NodeId {
        let d = self.same_dim(x, mean, "gauss_log_density");
        assert_eq!(var.len(), d, "gauss_log_density variance dimension");
        self.push(
            Op::GaussLogDensity {
                x,
                mean,
                var: Arc::new(var),
            },
            1,
            vec![0.0],
        )
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|(n, _)| n.as_str())
    }

    fn input_id(&self, name: &str) -> Result<NodeId> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| LabError::UnknownInput(name.to_string()))
    }

    /// Binds every named input, runs the forward pass and returns the output
    /// value (or the last node's value when no output was set).
    pub fn evaluate(&mut self, bindings: &[(&str, &[f64])]) -> Result<Vec<f64>> {
        for (name, v) in bindings {
            let id = self.input_id(name)?;
            crate::error::check_dim(self.dim(id), v.len(), "graph input binding")?;
            self.bound.insert(name.to_string(), v.to_vec());
        }
        self.forward()?;
        Ok(self.values[self.output_id()?.0].clone())
    }

    fn output_id(&self) -> Result<NodeId> {
        match self.output {
            Some(o) => Ok(o),
            None if !self.nodes.is_empty() => Ok(NodeId(self.nodes.len() - 1)),
            None => Err(LabError::InvalidArgument("empty graph".into())),
        }
    }

    fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let v = self.forward_node(i)?;
            if !linalg::all_finite(&v) {
                return Err(LabError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = v;
        }
        self.evaluated = true;
        Ok(())
    }

    fn forward_node(&self, i: usize) -> Result<Vec<f64>> {
        let val = |id: &NodeId| self.values[id.0].as_slice();
        let out = match &self.nodes[i].op {
            Op::Input(name) => self
                .bound
                .get(name)
                .cloned()
                .ok_or_else(|| LabError::UnboundInput(name.clone()))?,
            Op::Const => self.values[i].clone(),
            Op::Add(a, b) => linalg::add(val(a), val(b)),
            Op::Sub(a, b) => linalg::sub(val(a), val(b)),
            Op::Mul(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| x * y).collect(),
            Op::Scale(a, k) => linalg::scale(val(a), *k),
            Op::MulConst(a, k) => val(a).iter().zip(k.iter()).map(|(x, y)| x * y).collect(),
            Op::ScalarMul(s, v) => linalg::scale(val(v), val(s)[0]),
            Op::Sum(a) => vec![val(a).iter().sum()],
            Op::Index(a, k) => vec![val(a)[*k]],
            Op::Concat(parts) => parts.iter().flat_map(|p| val(p).iter().copied()).collect(),
            Op::Affine { w, b, x } => {
                let mut y = w.matvec(val(x));
                if let Some(b) = b {
                    for (yi, bi) in y.iter_mut().zip(b.iter()) {
                        *yi += bi;
                    }
                }
                y
            }
            Op::MatVec { w, rows, cols, x } => {
                let (w, x) = (val(w), val(x));
                (0..*rows)
                    .map(|r| linalg::dot(&w[r * cols..(r + 1) * cols], x))
                    .collect()
            }
            Op::Tanh(a) => val(a).iter().map(|x| x.tanh()).collect(),
            Op::Silu(a) => val(a).iter().map(|x| x * sigmoid(*x)).collect(),
            Op::Softmax(a) => linalg::softmax(val(a)),
            Op::LogSumExp(a) => vec![linalg::log_sum_exp(val(a))],
            Op::Dot(a, b) => vec![linalg::dot(val(a), val(b))],
            Op::Norm(a) => vec![linalg::norm(val(a))],
            Op::CosSim(a, b) => vec![linalg::cosine(val(a), val(b))],
            Op::QuadForm { x, m } => vec![linalg::dot(val(x), &m.matvec(val(x)))],
            Op::GaussLogDensity { x, mean, var } => {
                vec![gauss_log_density(val(x), val(mean), var)]
            }
        };
        Ok(out)
    }

    /// Reverse pass from the (scalar) output.
    pub fn backward(&self) -> Result<Adjoints> {
        if !self.evaluated {
            return Err(LabError::NotEvaluated);
        }
        let out = self.output_id()?;
        if self.dim(out) != 1 {
            return Err(LabError::NonScalarOutput(self.dim(out)));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], id: NodeId, g: impl IntoIterator<Item = f64>) {
            let slot = &mut adj[id.0];
            match slot {
                Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g.into_iter().collect()),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(gy) = adj[i].take() else { continue };
            let val = |id: &NodeId| self.values[id.0].as_slice();
            let y = self.values[i].as_slice();
            match &self.nodes[i].op {
                Op::Input(_) | Op::Const => {
                    adj[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, gy.iter().copied());
                    acc(&mut adj, *b, gy.iter().copied());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, gy.iter().copied());
                    acc(&mut adj, *b, gy.iter().map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let ga: Vec<f64> = gy.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gy.iter().zip(va).map(|(g, x)| g * x).collect();
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut adj, *a, gy.iter().map(|g| g * k)),
                Op::MulConst(a, k) => acc(&mut adj, *a, gy.iter().zip(k.iter()).map(|(g, k)| g * k)),
                Op::ScalarMul(s, v) => {
                    let gs = linalg::dot(&gy, val(v));
                    let sv = val(s)[0];
                    acc(&mut adj, *s, [gs]);
                    acc(&mut adj, *v, gy.iter().map(|g| g * sv));
                }
                Op::Sum(a) => {
                    let d = self.dim(*a);
                    acc(&mut adj, *a, std::iter::repeat_n(gy[0], d));
                }
                Op::Index(a, k) => {
                    let mut g = vec![0.0; self.dim(*a)];
                    g[*k] = gy[0];
                    acc(&mut adj, *a, g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let d = self.dim(*p);
                        acc(&mut adj, *p, gy[off..off + d].iter().copied());
                        off += d;
                    }
                }
                Op::Affine { w, x, .. } => acc(&mut adj, *x, w.matvec_t(&gy)),
                Op::MatVec { w, rows, cols, x } => {
                    let (wv, xv) = (val(w), val(x));
                    let mut gw = vec![0.0; rows * cols];
                    let mut gx = vec![0.0; *cols];
                    for r in 0..*rows {
                        let g = gy[r];
                        let row = &wv[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            gw[r * cols + c] = g * xv[c];
                            gx[c] += g * row[c];
                        }
                    }
                    acc(&mut adj, *w, gw);
                    acc(&mut adj, *x, gx);
                }
                Op::Tanh(a) => acc(&mut adj, *a, gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t))),
                Op::Silu(a) => acc(
                    &mut adj,
                    *a,
                    gy.iter().zip(val(a)).map(|(g, x)| {
                        let s = sigmoid(*x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                ),
                Op::Softmax(a) => {
                    let inner = linalg::dot(&gy, y);
                    acc(&mut adj, *a, gy.iter().zip(y).map(|(g, p)| p * (g - inner)));
                }
                Op::LogSumExp(a) => {
                    let p = linalg::softmax(val(a));
                    acc(&mut adj, *a, p.into_iter().map(|p| p * gy[0]));
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (val(a).to_vec(), val(b).to_vec());
                    acc(&mut adj, *a, vb.into_iter().map(|v| v * gy[0]));
                    acc(&mut adj, *b, va.into_iter().map(|v| v * gy[0]));
                }
                Op::Norm(a) => {
                    let n = y[0];
                    if n > 0.0 {
                        acc(&mut adj, *a, val(a).iter().map(|v| gy[0] * v / n));
                    } else {
                        acc(&mut adj, *a, std::iter::repeat_n(0.0, self.dim(*a)));
                    }
                }
                Op::CosSim(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let (na, nb) = (linalg::norm(va), linalg::norm(vb));
                    let c = y[0];
                    let ga: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, z)| gy[0] * (z / (na * nb) - c * x / (na * na)))
                        .collect();
                    let gb: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, z)| gy[0] * (x / (na * nb) - c * z / (nb * nb)))
                        .collect();
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::QuadForm { x, m } => {
                    let xv = val(x);
                    let g = linalg::add(&m.matvec(xv), &m.matvec_t(xv));
                    acc(&mut adj, *x, g.into_iter().map(|v| v * gy[0]));
                }
                Op::GaussLogDensity { x, mean, var } => {
                    let r: Vec<f64> = val(x)
                        .iter()
                        .zip(val(mean))
                        .zip(var.iter())
                        .map(|((x, m), v)| (x - m) / v * gy[0])
                        .collect();
                    acc(&mut adj, *mean, r.iter().copied());
                    acc(&mut adj, *x, r.into_iter().map(|v| -v));
                }
            }
        }

        let mut grads = HashMap::new();
        for (name, id) in &self.inputs {
            let g = adj[id.0].clone().unwrap_or_else(|| vec![0.0; self.dim(*id)]);
            grads.insert(name.clone(), g);
        }
        Ok(Adjoints { grads })
    }

    /// Gradient of the scalar output with respect to one named input.
    pub fn gradient(&self, wrt: &str) -> Result<Vec<f64>> {
        self.input_id(wrt)?;
        let mut adj = self.backward()?;
        Ok(adj.grads.remove(wrt).expect("input present"))
    }

    /// Compares reverse-mode directional derivatives against central
    /// differences along `probe_count` random directions and returns the
    /// largest `|ad − fd| / (|fd| + 1e-12)`. Restores the original bindings.
    pub fn grad_check(&mut self, wrt: &str, probe_count: usize, step: f64) -> Result<f64> {
        let base = self
            .bound
            .get(wrt)
            .cloned()
            .ok_or_else(|| LabError::UnboundInput(wrt.to_string()))?;
        self.forward()?;
        let grad = self.gradient(wrt)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut worst: f64 = 0.0;
        for _ in 0..probe_count {
            let u = crate::rng::unit_sphere(&mut rng, base.len());
            let plus = linalg::axpy(&base, step, &u);
            let minus = linalg::axpy(&base, -step, &u);
            let fp = self.evaluate(&[(wrt, &plus)])?[0];
            let fm = self.evaluate(&[(wrt, &minus)])?[0];
            let fd = (fp - fm) / (2.0 * step);
            let ad = linalg::dot(&grad, &u);
            worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-12));
        }
        self.evaluate(&[(wrt, &base)])?;
        Ok(worst)
    }
}

pub(crate) fn gauss_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| (x - m) * (x - m) / v + LN_2PI + v.ln())
        .sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct Adjoints {
    grads: HashMap<String, Vec<f64>>,
}

impl Adjoints {
    pub fn wrt(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn take(&mut self, name: &str) -> Option<Vec<f64>> {
        self.grads.remove(name)
    }
}

/// Central-difference gradient of a scalar function; test and check helper.
pub fn finite_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let fp = f(&probe);
            probe[i] = x[i] - step;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}
