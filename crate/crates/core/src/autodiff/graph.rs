use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::conv::{ConvGeom, Padding};
use super::{AutodiffError, Result, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of node values. Arithmetic is always `f64`;
/// `F32Storage` rounds every op output to the nearest `f32`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32Storage,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::GlobalAvgPool(a) => vec![*a],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::AvgPool2d { x, .. } => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::L2NormalizeRows { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Smallest row norm used by [`Graph::l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    /// ReLU activation pattern, recorded only when kink tracking is on.
    kinks: Option<Vec<bool>>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer matches shape")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer matches shape")
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Record the sign pattern of every ReLU input from now on.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    pub(crate) fn kink_pattern(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        self.round(&mut value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn round(&self, t: &mut Tensor) {
        if self.precision == Precision::F32Storage {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op) -> Result<Var> {
        self.round(&mut value);
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("expected [N, C, H, W], got shape {s:?}"),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Self::mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        general_mat_mul(
            1.0,
            &view(self.value(a).data(), m, k),
            &view(self.value(b).data(), k, n),
            0.0,
            &mut view_mut(&mut out, m, n),
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(a, s))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// `sum_i w_i * x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "weighted_sum",
                reason: "no terms".into(),
            });
        };
        for &(v, _) in &terms[1..] {
            self.same_shape("weighted_sum", first, v)?;
        }
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, w) in terms {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let shape = self.shape(first).to_vec();
        self.push("weighted_sum", Tensor::new(shape, out)?, Op::WeightedSum(terms.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let src = self.nodes[a.0].value.data();
        if let Some(k) = self.kinks.as_mut() {
            k.extend(src.iter().map(|&x| x > 0.0));
        }
        let out: Vec<f64> = src.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", Tensor::new(shape, out)?, Op::Relu(a))
    }

    /// 2-D convolution (cross-correlation). `x: [N, C, H, W]`,
    /// `w: [O, C, kh, kw]`, optional bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let [n, c, h, wd] = self.dims4("conv2d", x)?;
        let [o, c2, kh, kw] = self.dims4("conv2d", w)?;
        if c != c2 {
            return Err(Self::mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Self::mismatch("conv2d", self.shape(w), self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, padding).ok_or_else(|| AutodiffError::InvalidArgument {
            op: "conv2d",
            reason: format!("kernel {kh}x{kw} does not fit input {h}x{wd}"),
        })?;
        let (k, p) = (geom.patch_len(), geom.positions());
        let xs = self.value(x).data();
        let ws = view(self.value(w).data(), o, k);
        let bias = b.map(|b| self.value(b).data());
        let mut cols = vec![0.0; k * p];
        let mut out = vec![0.0; n * o * p];
        for s in 0..n {
            geom.im2col(&xs[s * c * h * wd..(s + 1) * c * h * wd], &mut cols);
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            if let Some(bias) = bias {
                for (oc, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[oc]);
                }
            }
            general_mat_mul(1.0, &ws, &view(&cols, k, p), 1.0, &mut view_mut(dst, o, p));
        }
        let t = Tensor::new(vec![n, o, geom.h_out, geom.w_out], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom })
    }

    /// Non-overlapping `k x k` average pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4("avg_pool2d", x)?;
        if k == 0 || h < k || w < k {
            return Err(AutodiffError::InvalidArgument {
                op: "avg_pool2d",
                reason: format!("window {k} does not fit input {h}x{w}"),
            });
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let ip = &src[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            s += ip[(i * k + di) * w + j * k + dj];
                        }
                    }
                    op[i * wo + j] = s * inv;
                }
            }
        }
        self.push("avg_pool2d", Tensor::new(vec![n, c, ho, wo], out)?, Op::AvgPool2d { x, k })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("global_avg_pool", x)?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2("linear", x)?;
        let (o, d2) = self.dims2("linear", w)?;
        if d != d2 {
            return Err(Self::mismatch("linear", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [o] {
            return Err(Self::mismatch("linear", self.shape(w), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        general_mat_mul(
            1.0,
            &view(self.value(x).data(), n, d),
            &view(self.value(w).data(), o, d).t(),
            1.0,
            &mut view_mut(&mut out, n, o),
        );
        self.push("linear", Tensor::new(vec![n, o], out)?, Op::Linear { x, w, b })
    }

    /// Scale each row to unit L2 norm (norms floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2("l2_normalize_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_FLOOR);
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / denom;
            }
            norms.push(norm);
        }
        self.push(
            "l2_normalize_rows",
            Tensor::new(vec![n, d], out)?,
            Op::L2NormalizeRows { x, norms },
        )
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("{} targets for {n} rows", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("target {t} out of range for {c} classes"),
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_denom = denom.ln() + m;
            loss += log_denom - row[targets[i]];
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - log_denom).exp();
            }
        }
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of fan-out nodes are
    /// summed; leaves created without `requires_grad` get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(AutodiffError::CycleDetected { node: i, input: bad.0 });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !node.requires_grad {
                    return None;
                }
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches value shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2("matmul", *a).unwrap();
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    general_mat_mul(1.0, &view(g, m, n), &view(val(*b), k, n).t(), 1.0, &mut view_mut(ga, m, k));
                }
                if needs(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    general_mat_mul(1.0, &view(val(*a), m, k).t(), &view(g, m, n), 1.0, &mut view_mut(gb, k, n));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (m, n) = self.dims2("transpose", *a).unwrap();
                    let ga = accumulate(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let gv = accumulate(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let ov = val(other);
                        let gv = accumulate(grads, v, g.len());
                        for ((o, x), y) in gv.iter_mut().zip(g).zip(ov) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let len = self.nodes[a.0].value.len();
                    accumulate(grads, *a, len).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if needs(v) {
                        let gv = accumulate(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let xs = val(*a);
                    let ga = accumulate(grads, *a, g.len());
                    for ((o, x), gi) in ga.iter_mut().zip(xs).zip(g) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let (k, p) = (geom.patch_len(), geom.positions());
                let img = geom.c_in * geom.h * geom.w;
                let xs = val(*x);
                let mut cols = vec![0.0; k * p];
                let mut dcols = vec![0.0; k * p];
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = accumulate(grads, *b, o);
                        for s in 0..n {
                            for (oc, row) in g[s * o * p..(s + 1) * o * p].chunks(p).enumerate() {
                                gb[oc] += row.iter().sum::<f64>();
                            }
                        }
                    }
                }
                for s in 0..n {
                    let gs = view(&g[s * o * p..(s + 1) * o * p], o, p);
                    if needs(*w) {
                        geom.im2col(&xs[s * img..(s + 1) * img], &mut cols);
                        let gw = accumulate(grads, *w, o * k);
                        general_mat_mul(1.0, &gs, &view(&cols, k, p).t(), 1.0, &mut view_mut(gw, o, k));
                    }
                    if needs(*x) {
                        general_mat_mul(
                            1.0,
                            &view(val(*w), o, k).t(),
                            &gs,
                            0.0,
                            &mut view_mut(&mut dcols, k, p),
                        );
                        let gx = accumulate(grads, *x, n * img);
                        geom.col2im(&dcols, &mut gx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::AvgPool2d { x, k } => {
                if needs(*x) {
                    let [n, c, h, w] = self.dims4("avg_pool2d", *x).unwrap();
                    let (ho, wo) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let gx = accumulate(grads, *x, n * c * h * w);
                    for plane in 0..n * c {
                        let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        let xp = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                let v = gp[i * wo + j] * inv;
                                for di in 0..*k {
                                    for dj in 0..*k {
                                        xp[(i * k + di) * w + j * k + dj] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs(*x) {
                    let [n, c, h, w] = self.dims4("global_avg_pool", *x).unwrap();
                    let hw = h * w;
                    let gx = accumulate(grads, *x, n * c * hw);
                    for (plane, gi) in gx.chunks_mut(hw).zip(g) {
                        let v = gi / hw as f64;
                        plane.iter_mut().for_each(|o| *o += v);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.dims2("linear", *x).unwrap();
                let o = self.shape(*w)[0];
                let gv = view(g, n, o);
                if needs(*x) {
                    let gx = accumulate(grads, *x, n * d);
                    general_mat_mul(1.0, &gv, &view(val(*w), o, d), 1.0, &mut view_mut(gx, n, d));
                }
                if needs(*w) {
                    let gw = accumulate(grads, *w, o * d);
                    general_mat_mul(1.0, &gv.t(), &view(val(*x), n, d), 1.0, &mut view_mut(gw, o, d));
                }
                if needs(*b) {
                    let gb = accumulate(grads, *b, o);
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if needs(*x) {
                    let (n, d) = self.dims2("l2_normalize_rows", *x).unwrap();
                    let y = node.value.data();
                    let gx = accumulate(grads, *x, n * d);
                    for i in 0..n {
                        let r = i * d..(i + 1) * d;
                        let (yr, gr) = (&y[r.clone()], &g[r.clone()]);
                        let out = &mut gx[r];
                        if norms[i] > NORM_FLOOR {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                out[j] += (gr[j] - yr[j] * dot) / norms[i];
                            }
                        } else {
                            for j in 0..d {
                                out[j] += gr[j] / NORM_FLOOR;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if needs(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let gl = accumulate(grads, *logits, n * c);
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 1 * 4 * 5).map(|i| i as f64 - 7.5).collect();
        let x = g.input(t(&[2, 1, 4, 5], &data));
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        for pad in [Padding::Same, Padding::Valid] {
            let y = g.conv2d(x, w, None, 1, pad).unwrap();
            assert_eq!(g.value(y).data(), &data[..]);
            assert_eq!(g.shape(y), &[2, 1, 4, 5]);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (n, c, h, w, o, k, s) = (2, 3, 6, 5, 4, 3, 2);
        let xs: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bs = [0.5, -0.25, 0.0, 1.0];
        let mut g = Graph::new();
        let x = g.input(t(&[n, c, h, w], &xs));
        let wv = g.input(t(&[o, c, k, k], &ws));
        let b = g.input(t(&[o], &bs));
        let y = g.conv2d(x, wv, Some(b), s, Padding::Same).unwrap();
        let (ho, wo) = (3, 3);
        assert_eq!(g.shape(y), &[n, o, ho, wo]);
        // same padding: total pad = (ho-1)*s + k - h = 1 on rows, 2 on cols
        let (pt, pl) = (0i64, 1i64);
        let out = g.value(y).data();
        for sn in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bs[oc];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * s + ki) as i64 - pt;
                                    let iw = (j * s + kj) as i64 - pl;
                                    if ih < 0 || iw < 0 || ih >= h as i64 || iw >= w as i64 {
                                        continue;
                                    }
                                    acc += ws[((oc * c + ci) * k + ki) * k + kj]
                                        * xs[((sn * c + ci) * h + ih as usize) * w + iw as usize];
                                }
                            }
                        }
                        let got = out[((sn * o + oc) * ho + i) * wo + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn global_pool_of_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 3, 4, 5], 1.75));
        let y = g.global_avg_pool(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let data = [1.5, -2.0, 0.25];
        let x = g.param(t(&[3], &data));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let gr = g.backward(l).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(gr.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn fan_out_sums_exactly() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.3));
        let y = g.add(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(gr.get(b).is_none());
    }

    #[test]
    fn uniform_logits_gradient() {
        let c = 5;
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[1, c]));
        let l = g.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l).item() - (c as f64).ln()).abs() < 1e-15);
        let gr = g.backward(l).unwrap();
        for (j, &v) in gr.get(z).unwrap().data().iter().enumerate() {
            let expect = if j == 2 { 1.0 / c as f64 - 1.0 } else { 1.0 / c as f64 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
        let c = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(g.backward(a), Err(AutodiffError::NonScalarLoss(_))));
        let z = g.input(Tensor::zeros(&[1, 3]));
        assert!(g.softmax_cross_entropy(z, &[3]).is_err());
    }

    #[test]
    fn non_finite_values_trip() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(AutodiffError::NonFinite { op: "scale" })));
    }

    #[test]
    fn f32_storage_rounds_outputs() {
        let mut g = Graph::with_precision(Precision::F32Storage);
        let x = g.input(Tensor::scalar(0.1));
        let y = g.scale(x, 3.0).unwrap();
        assert_eq!(g.value(y).item(), (0.1f32 as f64 * 3.0) as f32 as f64);
    }

    #[test]
    fn forward_and_backward_are_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let xs: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.71).sin()).collect();
            let ws: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.13).cos()).collect();
            let x = g.param(t(&[2, 2, 5, 4], &xs));
            let w = g.param(t(&[3, 2, 3, 3], &ws));
            let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
            let r = g.relu(y).unwrap();
            let p = g.global_avg_pool(r).unwrap();
            let l = g.softmax_cross_entropy(p, &[0, 2]).unwrap();
            let gr = g.backward(l).unwrap();
            (
                g.value(l).item().to_bits(),
                gr.get(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                gr.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
