//! Reverse-mode automatic differentiation over a linear op record.
//!
//! A [`Tape`] is built for one forward pass: every op appends a node holding
//! its output value and enough saved state to compute the vector-Jacobian
//! product. [`Tape::backward`] replays the record in reverse. The tape is
//! single-owner (`RefCell` inside) and is dropped after the backward pass.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Gelu,
}

enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    SegMatMul { a: Var, b: Var, groups: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Affine { x: Var, scale: R },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<R>, rstd: Vec<R> },
    Conv1d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<R> },
    Act { x: Var, kind: Activation },
    Exp { x: Var },
    Clamp { x: Var, lo: R, hi: R },
    Transpose { x: Var },
    Reshape { x: Var },
    UpsampleCols { x: Var, factor: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    ConcatRows { parts: Vec<Var> },
    SelectRows { x: Var, row: Var, flags: Rc<Vec<bool>> },
    MeanCols { x: Var, segments: usize },
    SmoothL1 { a: Var, b: Var, beta: R },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, probs: Vec<R> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    width: usize,
    stride: usize,
    pad_left: usize,
    segments: usize,
    n_in: usize,
    n_out: usize,
}

struct Node<R> {
    value: Rc<Tensor<R>>,
    op: Op<R>,
    grad: bool,
    name: Option<String>,
}

pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    bound: RefCell<HashMap<String, Var>>,
    frozen: Vec<String>,
    grad_enabled: bool,
    fault: RefCell<Option<String>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<R> {
    by_var: Vec<Option<Tensor<R>>>,
    named: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<R>> {
        self.named.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.named.keys()
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<R>> {
        self.named
    }
}

fn shape2(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            frozen: Vec::new(),
            grad_enabled: true,
            fault: RefCell::new(None),
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Parameters whose names start with any of `prefixes` are bound as constants.
    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<R>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].grad
    }

    /// Fails if any op so far produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let grad = self.grad_enabled && inputs.iter().any(|v| nodes[v.0].grad);
        if self.fault.borrow().is_none() && !value.is_finite() {
            *self.fault.borrow_mut() =
                Some(format!("non-finite output from op #{} ({})", nodes.len(), op_name(&op)));
        }
        nodes.push(Node { value: Rc::new(value), op, grad, name: None });
        Var(nodes.len() - 1)
    }

    fn vals<const N: usize>(&self, vars: [Var; N]) -> [Rc<Tensor<R>>; N] {
        let nodes = self.nodes.borrow();
        vars.map(|v| nodes[v.0].value.clone())
    }

    // -- leaves --------------------------------------------------------------

    pub fn leaf(&self, t: Tensor<R>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Leaf,
            grad: requires_grad && self.grad_enabled,
            name: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, t: Tensor<R>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that receives a gradient under `name`.
    pub fn named_leaf(&self, name: &str, t: Tensor<R>) -> Var {
        let v = self.leaf(t, true);
        self.nodes.borrow_mut()[v.0].name = Some(name.to_string());
        v
    }

    /// Binds a stored parameter once per tape; later calls return the same node.
    pub fn param(&self, store: &ParamStore<R>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.leaf(t, trainable);
        self.nodes.borrow_mut()[v.0].name = Some(name.to_string());
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    // -- linear algebra --------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [av, bv] = self.vals([a, b]);
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (ar, ac) = shape2(&av);
        let (br, bc) = shape2(&bv);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?} (ta={ta}, tb={tb})", av.shape(), bv.shape()),
            ));
        }
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![R::ZERO; m * n];
        R::gemm(m, k, n, R::ONE, av.data(), rsa, csa, bv.data(), rsb, csb, R::ZERO, &mut out, n as isize, 1);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    /// Block-diagonal matmul: rows of `a` and `b` split into `groups` equal
    /// segments and each pair multiplied independently. Sums run in index order,
    /// so a row's result does not depend on how many trailing zero terms follow.
    pub fn seg_matmul(&self, a: Var, b: Var, groups: usize, ta: bool, tb: bool) -> Result<Var> {
        let [av, bv] = self.vals([a, b]);
        let (ar, ac) = shape2(&av);
        let (br, bc) = shape2(&bv);
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(Error::dim("seg_matmul", format!("{ar} / {br} rows not divisible by {groups}")));
        }
        let (ars, brs) = (ar / groups, br / groups);
        let (m, k) = if ta { (ac, ars) } else { (ars, ac) };
        let (k2, n) = if tb { (bc, brs) } else { (brs, bc) };
        if k != k2 {
            return Err(Error::dim("seg_matmul", format!("inner dimensions {k} vs {k2}")));
        }
        let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
        let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
        let mut out = vec![R::ZERO; groups * m * n];
        for g in 0..groups {
            naive_mm(
                m,
                k,
                n,
                &av.data()[g * ars * ac..],
                rsa,
                csa,
                &bv.data()[g * brs * bc..],
                rsb,
                csb,
                &mut out[g * m * n..],
                n,
                1,
                false,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![groups * m, n], out),
            Op::SegMatMul { a, b, groups, ta, tb, m, k, n },
            &[a, b],
        ))
    }

    // -- elementwise -----------------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let [av, bv] = self.vals([a, b]);
        if av.shape() != bv.shape() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    fn row_broadcast(&self, x: Var, row: Var, name: &'static str, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let [xv, rv] = self.vals([x, row]);
        let c = xv.cols();
        if rv.len() != c {
            return Err(Error::dim(name, format!("row of {} vs {:?}", rv.len(), xv.shape())));
        }
        let r = rv.data();
        let data = xv.data().chunks(c).flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| f(a, b))).collect();
        Ok(Tensor::from_parts(xv.shape().to_vec(), data))
    }

    /// `x + row` with `row` broadcast over every row of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(t, Op::AddRow { x, row }, &[x, row]))
    }

    /// `x ⊙ row` with `row` broadcast over every row of `x`.
    pub fn mul_row(&self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(t, Op::MulRow { x, row }, &[x, row]))
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (s, b) = (R::from_f64(scale), R::from_f64(shift));
        let data = xv.data().iter().map(|&v| v * s + b).collect();
        Ok(self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Affine { x, scale: s }, &[x]))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x]);
        let s = xv.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x]);
        let s: R = xv.data().iter().copied().sum();
        let m = s / R::from_f64(xv.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }, &[x]))
    }

    // -- normalisation ---------------------------------------------------------

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Row softmax where `mask[(i % mask_rows) * cols + j] == false` removes
    /// entry `j` from row `i`. A row with no allowed entry becomes all zeros.
    pub fn masked_softmax(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (rows, cols) = shape2(&xv);
        let mask_rows = match mask {
            Some(m) => {
                if m.is_empty() || m.len() % cols != 0 {
                    return Err(Error::dim("softmax", format!("mask of {} for {cols} columns", m.len())));
                }
                m.len() / cols
            }
            None => 1,
        };
        let mut out = vec![R::ZERO; rows * cols];
        for i in 0..rows {
            let xr = &xv.data()[i * cols..(i + 1) * cols];
            let allowed = |j: usize| mask.map_or(true, |m| m[(i % mask_rows) * cols + j]);
            let mut mx = R::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if allowed(j) {
                    mx = mx.max(v);
                }
            }
            if mx == R::neg_infinity() {
                continue;
            }
            let or = &mut out[i * cols..(i + 1) * cols];
            let mut total = R::ZERO;
            for j in 0..cols {
                let e = if allowed(j) { (xr[j] - mx).exp() } else { R::ZERO };
                or[j] = e;
                total += e;
            }
            for v in or.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(Tensor::from_parts(xv.shape().to_vec(), out), Op::Softmax { x }, &[x]))
    }

    /// Normalises each row over the last axis, then applies optional gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let (rows, d) = shape2(&xv);
        let g = gain.map(|g| self.value(g));
        let b = bias.map(|b| self.value(b));
        for p in g.iter().chain(b.iter()) {
            if p.len() != d {
                return Err(Error::dim("layer_norm", format!("affine of {} for width {d}", p.len())));
            }
        }
        let eps = R::from_f64(eps);
        let inv_d = R::from_f64(1.0 / d as f64);
        let mut xhat = vec![R::ZERO; rows * d];
        let mut rstd = vec![R::ZERO; rows];
        let mut out = vec![R::ZERO; rows * d];
        for i in 0..rows {
            let xr = &xv.data()[i * d..(i + 1) * d];
            let mean = xr.iter().copied().sum::<R>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rs = R::ONE / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[i * d + j] = h;
                let mut y = h;
                if let Some(g) = &g {
                    y *= g.data()[j];
                }
                if let Some(b) = &b {
                    y += b.data()[j];
                }
                out[i * d + j] = y;
            }
        }
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &inputs,
        ))
    }

    // -- convolution -----------------------------------------------------------

    /// 1D cross-correlation of `x: [C_in × N]` with `kernels: [C_out × C_in × w]`.
    pub fn conv1d(&self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv1d_ext(x, kernels, None, stride, padding, padding, 1)
    }

    /// Cross-correlation over `segments` independent sequences laid side by side
    /// along the column axis (`x: [C_in × segments·N]`), with asymmetric zero
    /// padding and an optional per-output-channel bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_ext(
        &self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        segments: usize,
    ) -> Result<Var> {
        let [xv, wv] = self.vals([x, kernels]);
        if wv.rank() != 3 || xv.rank() != 2 {
            return Err(Error::dim("conv1d", format!("x {:?}, kernels {:?}", xv.shape(), wv.shape())));
        }
        let (c_out, c_in, width) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let (xc, total) = shape2(&xv);
        if xc != c_in {
            return Err(Error::dim("conv1d", format!("input has {xc} channels, kernels expect {c_in}")));
        }
        if stride == 0 || segments == 0 || total % segments != 0 {
            return Err(Error::dim("conv1d", format!("stride {stride}, {total} columns over {segments} segments")));
        }
        let n_in = total / segments;
        let padded = n_in + pad_left + pad_right;
        if padded < width {
            return Err(Error::dim("conv1d", format!("output length would be nonpositive (N={n_in}, w={width})")));
        }
        let n_out = (padded - width) / stride + 1;
        let q = segments * n_out;
        let kk = c_in * width;
        let mut cols = vec![R::ZERO; kk * q];
        let xd = xv.data();
        for c in 0..c_in {
            for j in 0..width {
                let row = &mut cols[(c * width + j) * q..(c * width + j + 1) * q];
                for s in 0..segments {
                    for t in 0..n_out {
                        let pos = (t * stride + j) as isize - pad_left as isize;
                        if pos >= 0 && (pos as usize) < n_in {
                            row[s * n_out + t] = xd[c * total + s * n_in + pos as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![R::ZERO; c_out * q];
        R::gemm(c_out, kk, q, R::ONE, wv.data(), kk as isize, 1, &cols, q as isize, 1, R::ZERO, &mut out, q as isize, 1);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != c_out {
                return Err(Error::dim("conv1d", format!("bias of {} for {c_out} channels", bv.len())));
            }
            for (o, &bb) in out.chunks_mut(q).zip(bv.data()) {
                o.iter_mut().for_each(|v| *v += bb);
            }
        }
        let geom = ConvGeom { c_in, c_out, width, stride, pad_left, segments, n_in, n_out };
        let mut inputs = vec![x, kernels];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, q], out),
            Op::Conv1d { x, w: kernels, bias, geom, cols },
            &inputs,
        ))
    }

    // -- pointwise nonlinearities ----------------------------------------------

    pub fn activation(&self, x: Var, kind: Activation) -> Result<Var> {
        let [xv] = self.vals([x]);
        let data = xv.data().iter().map(|&v| act_fwd(kind, v)).collect();
        Ok(self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Act { x, kind }, &[x]))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x]);
        let data = xv.data().iter().map(|&v| v.exp()).collect();
        Ok(self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Exp { x }, &[x]))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (lo, hi) = (R::from_f64(lo), R::from_f64(hi));
        let data = xv.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        Ok(self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Clamp { x, lo, hi }, &[x]))
    }

    // -- layout ----------------------------------------------------------------

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x]);
        let t = xv.transpose()?;
        Ok(self.push(t, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let [xv] = self.vals([x]);
        let t = xv.reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Nearest-neighbour upsampling along columns: each column repeated `factor` times.
    pub fn upsample_cols(&self, x: Var, factor: usize) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (r, c) = shape2(&xv);
        if factor == 0 {
            return Err(Error::dim("upsample", "factor must be positive"));
        }
        let mut out = Vec::with_capacity(r * c * factor);
        for row in xv.data().chunks(c) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c * factor], out), Op::UpsampleCols { x, factor }, &[x]))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (r, c) = shape2(&xv);
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {c} columns", start + len)));
        }
        let out = xv.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let r = vals.first().ok_or_else(|| Error::dim("concat_cols", "no parts"))?.rows();
        if vals.iter().any(|v| v.rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (r, c) = shape2(&xv);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("indices out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows { x, idx: Rc::new(idx.to_vec()) },
            &[x],
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let c = vals.first().ok_or_else(|| Error::dim("concat_rows", "no parts"))?.cols();
        if vals.iter().any(|v| v.cols() != c) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let r = out.len() / c;
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Row `i` of the result is `row` where `flags[i]`, else row `i` of `x`.
    pub fn select_rows(&self, x: Var, row: Var, flags: &[bool]) -> Result<Var> {
        let [xv, rv] = self.vals([x, row]);
        let (r, c) = shape2(&xv);
        if flags.len() != r || rv.len() != c {
            return Err(Error::dim("select_rows", format!("{} flags, row {}, x {:?}", flags.len(), rv.len(), xv.shape())));
        }
        let mut out = xv.data().to_vec();
        for (i, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
            out[i * c..(i + 1) * c].copy_from_slice(rv.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SelectRows { x, row, flags: Rc::new(flags.to_vec()) },
            &[x, row],
        ))
    }

    /// Mean over each segment of columns: `[m × S·n] → [m × S]`.
    pub fn mean_cols(&self, x: Var, segments: usize) -> Result<Var> {
        let [xv] = self.vals([x]);
        let (r, c) = shape2(&xv);
        if segments == 0 || c % segments != 0 {
            return Err(Error::dim("mean_cols", format!("{c} columns over {segments} segments")));
        }
        let n = c / segments;
        let inv = R::from_f64(1.0 / n as f64);
        let mut out = Vec::with_capacity(r * segments);
        for row in xv.data().chunks(c) {
            for s in 0..segments {
                out.push(row[s * n..(s + 1) * n].iter().copied().sum::<R>() * inv);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, segments], out), Op::MeanCols { x, segments }, &[x]))
    }

    // -- losses ----------------------------------------------------------------

    /// Mean SmoothL1 with transition point `beta`.
    pub fn smooth_l1(&self, a: Var, b: Var, beta: f64) -> Result<Var> {
        let [av, bv] = self.vals([a, b]);
        if av.shape() != bv.shape() {
            return Err(Error::dim("smooth_l1", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let beta = R::from_f64(beta);
        let half = R::from_f64(0.5);
        let total: R = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = (x - y).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        let m = total / R::from_f64(av.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::SmoothL1 { a, b, beta }, &[a, b]))
    }

    /// Mean softmax cross-entropy of `logits: [n × C]` against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [lv] = self.vals([logits]);
        let (n, c) = shape2(&lv);
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::dim("cross_entropy", format!("{} labels for {n}×{c} logits", labels.len())));
        }
        let mut probs = vec![R::ZERO; n * c];
        let mut total = R::ZERO;
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let z: R = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            total += z.ln() + mx - row[labels[i]];
        }
        let m = total / R::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(m),
            Op::CrossEntropy { logits, labels: Rc::new(labels.to_vec()), probs },
            &[logits],
        ))
    }

    // -- backward ----------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        self.check()?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, &mut grads, node, &g);
        }
        let mut by_var = Vec::with_capacity(nodes.len());
        let mut named = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            let g = if matches!(node.op, Op::Leaf) && node.grad {
                let data = grads[i].take().unwrap_or_else(|| vec![R::ZERO; node.value.len()]);
                Some(Tensor::from_parts(node.value.shape().to_vec(), data))
            } else {
                None
            };
            if let (Some(name), Some(t)) = (&node.name, &g) {
                named.insert(name.clone(), t.clone());
            }
            by_var.push(g);
        }
        Ok(Gradients { by_var, named })
    }
}

fn op_name<R>(op: &Op<R>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::SegMatMul { .. } => "seg_matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRow { .. } => "add_row",
        Op::MulRow { .. } => "mul_row",
        Op::Affine { .. } => "affine",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::Act { .. } => "activation",
        Op::Exp { .. } => "exp",
        Op::Clamp { .. } => "clamp",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::UpsampleCols { .. } => "upsample",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SelectRows { .. } => "select_rows",
        Op::MeanCols { .. } => "mean_cols",
        Op::SmoothL1 { .. } => "smooth_l1",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid<R: Real>(v: R) -> R {
    R::ONE / (R::ONE + (-v).exp())
}

fn act_fwd<R: Real>(kind: Activation, v: R) -> R {
    match kind {
        Activation::Relu => v.max(R::ZERO),
        Activation::Silu => v * sigmoid(v),
        Activation::Gelu => R::from_f64(0.5) * v * (R::ONE + (v * R::from_f64(INV_SQRT_2)).erf()),
    }
}

fn act_grad<R: Real>(kind: Activation, v: R) -> R {
    match kind {
        Activation::Relu => {
            if v > R::ZERO {
                R::ONE
            } else {
                R::ZERO
            }
        }
        Activation::Silu => {
            let s = sigmoid(v);
            s + v * s * (R::ONE - s)
        }
        Activation::Gelu => {
            let cdf = R::from_f64(0.5) * (R::ONE + (v * R::from_f64(INV_SQRT_2)).erf());
            let pdf = R::from_f64(INV_SQRT_2PI) * (-(v * v) * R::from_f64(0.5)).exp();
            cdf + v * pdf
        }
    }
}

/// `c (+)= op(a)·op(b)` with explicit element strides, summing in index order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn naive_mm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    rsa: usize,
    csa: usize,
    b: &[R],
    rsb: usize,
    csb: usize,
    c: &mut [R],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut s = R::ZERO;
            for p in 0..k {
                s += a[i * rsa + p * csa] * b[p * rsb + j * csb];
            }
            let dst = &mut c[i * rsc + j * csc];
            if accumulate {
                *dst += s;
            } else {
                *dst = s;
            }
        }
    }
}

fn slot<'a, R: Real>(grads: &'a mut [Option<Vec<R>>], nodes: &[Node<R>], v: Var) -> Option<&'a mut Vec<R>> {
    let node = &nodes[v.0];
    if !node.grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![R::ZERO; node.value.len()]))
}

fn backprop<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], node: &Node<R>, g: &[R]) {
    let val = |v: Var| -> &Tensor<R> { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            let (ac, bc) = (av.cols() as isize, bv.cols() as isize);
            let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
            let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
            let (ni, ki, mi) = (n as isize, k as isize, m as isize);
            if let Some(da) = slot(grads, nodes, a) {
                if ta {
                    R::gemm(k, n, m, R::ONE, bv.data(), rsb, csb, g, 1, ni, R::ONE, da, mi, 1);
                } else {
                    R::gemm(m, n, k, R::ONE, g, ni, 1, bv.data(), csb, rsb, R::ONE, da, ki, 1);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                if tb {
                    R::gemm(n, m, k, R::ONE, g, 1, ni, av.data(), rsa, csa, R::ONE, db, ki, 1);
                } else {
                    R::gemm(k, m, n, R::ONE, av.data(), csa, rsa, g, ni, 1, R::ONE, db, ni, 1);
                }
            }
        }
        &Op::SegMatMul { a, b, groups, ta, tb, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            let (ac, bc) = (av.cols(), bv.cols());
            let (ars, brs) = (av.rows() / groups, bv.rows() / groups);
            let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
            let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
            if let Some(da) = slot(grads, nodes, a) {
                for gi in 0..groups {
                    let gs = &g[gi * m * n..];
                    let bs = &bv.data()[gi * brs * bc..];
                    let ds = &mut da[gi * ars * ac..];
                    if ta {
                        naive_mm(k, n, m, bs, rsb, csb, gs, 1, n, ds, m, 1, true);
                    } else {
                        naive_mm(m, n, k, gs, n, 1, bs, csb, rsb, ds, k, 1, true);
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for gi in 0..groups {
                    let gs = &g[gi * m * n..];
                    let as_ = &av.data()[gi * ars * ac..];
                    let ds = &mut db[gi * brs * bc..];
                    if tb {
                        naive_mm(n, m, k, gs, 1, n, as_, rsa, csa, ds, k, 1, true);
                    } else {
                        naive_mm(k, m, n, as_, csa, rsa, gs, n, 1, ds, n, 1, true);
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if let Some(da) = slot(grads, nodes, a) {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += x * y;
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for ((d, &x), &y) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += x * y;
                }
            }
        }
        &Op::AddRow { x, row } => {
            let c = val(x).cols();
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            if let Some(dr) = slot(grads, nodes, row) {
                for gr in g.chunks(c) {
                    dr.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                }
            }
        }
        &Op::MulRow { x, row } => {
            let (xv, rv) = (val(x), val(row));
            let c = xv.cols();
            if let Some(dx) = slot(grads, nodes, x) {
                for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(c)) {
                    for ((d, &v), &r) in dr.iter_mut().zip(gr).zip(rv.data()) {
                        *d += v * r;
                    }
                }
            }
            if let Some(drow) = slot(grads, nodes, row) {
                for (xr, gr) in xv.data().chunks(c).zip(g.chunks(c)) {
                    for ((d, &v), &xx) in drow.iter_mut().zip(gr).zip(xr) {
                        *d += v * xx;
                    }
                }
            }
        }
        &Op::Affine { x, scale } => {
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * scale);
            }
        }
        &Op::Sum { x } => {
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { x } => {
            if let Some(dx) = slot(grads, nodes, x) {
                let s = g[0] / R::from_f64(dx.len() as f64);
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Softmax { x } => {
            let y = &node.value;
            let c = y.cols();
            if let Some(dx) = slot(grads, nodes, x) {
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                    let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yy * (gg - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = node.value.cols();
            let gv = gain.map(|gv| val(gv).data().to_vec());
            if let Some(dgain) = gain.and_then(|gv| slot(grads, nodes, gv)) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((dd, &gg), &h) in dgain.iter_mut().zip(gr).zip(hr) {
                        *dd += gg * h;
                    }
                }
            }
            if let Some(dbias) = bias.and_then(|bv| slot(grads, nodes, bv)) {
                for gr in g.chunks(d) {
                    dbias.iter_mut().zip(gr).for_each(|(dd, &gg)| *dd += gg);
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let inv_d = R::from_f64(1.0 / d as f64);
                let mut dh = vec![R::ZERO; d];
                for i in 0..rstd.len() {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dh[j] = match &gv {
                            Some(gain) => gr[j] * gain[j],
                            None => gr[j],
                        };
                    }
                    let mean_dh = dh.iter().copied().sum::<R>() * inv_d;
                    let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<R>() * inv_d;
                    let dr = &mut dx[i * d..(i + 1) * d];
                    for j in 0..d {
                        dr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
            }
        }
        Op::Conv1d { x, w, bias, geom, cols } => {
            let ConvGeom { c_in, c_out, width, stride, pad_left, segments, n_in, n_out } = *geom;
            let q = segments * n_out;
            let kk = c_in * width;
            let (qi, kki) = (q as isize, kk as isize);
            if let Some(dw) = slot(grads, nodes, *w) {
                R::gemm(c_out, q, kk, R::ONE, g, qi, 1, cols, 1, qi, R::ONE, dw, kki, 1);
            }
            if let Some(db) = bias.and_then(|b| slot(grads, nodes, b)) {
                for (d, gr) in db.iter_mut().zip(g.chunks(q)) {
                    *d += gr.iter().copied().sum::<R>();
                }
            }
            if nodes[x.0].grad {
                let wv = val(*w);
                let mut dcols = vec![R::ZERO; kk * q];
                R::gemm(kk, c_out, q, R::ONE, wv.data(), 1, kki, g, qi, 1, R::ZERO, &mut dcols, qi, 1);
                let total = segments * n_in;
                if let Some(dx) = slot(grads, nodes, *x) {
                    for c in 0..c_in {
                        for j in 0..width {
                            let row = &dcols[(c * width + j) * q..(c * width + j + 1) * q];
                            for s in 0..segments {
                                for t in 0..n_out {
                                    let pos = (t * stride + j) as isize - pad_left as isize;
                                    if pos >= 0 && (pos as usize) < n_in {
                                        dx[c * total + s * n_in + pos as usize] += row[s * n_out + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        &Op::Act { x, kind } => {
            let xv = val(x);
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *d += gg * act_grad(kind, v);
                }
            }
        }
        &Op::Exp { x } => {
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gg * y;
                }
            }
        }
        &Op::Clamp { x, lo, hi } => {
            let xv = val(x);
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                    if v >= lo && v <= hi {
                        *d += gg;
                    }
                }
            }
        }
        &Op::Transpose { x } => {
            let (r, c) = (node.value.rows(), node.value.cols());
            if let Some(dx) = slot(grads, nodes, x) {
                // x is c×r
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        &Op::UpsampleCols { x, factor } => {
            if let Some(dx) = slot(grads, nodes, x) {
                for (d, chunk) in dx.iter_mut().zip(g.chunks(factor)) {
                    *d += chunk.iter().copied().sum::<R>();
                }
            }
        }
        &Op::SliceCols { x, start } => {
            let c = val(x).cols();
            let len = node.value.cols();
            if let Some(dx) = slot(grads, nodes, x) {
                for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(len)) {
                    dr[start..start + len].iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if let Some(dp) = slot(grads, nodes, p) {
                    for (dr, gr) in dp.chunks_mut(c).zip(g.chunks(total)) {
                        dr.iter_mut().zip(&gr[offset..offset + c]).for_each(|(d, &v)| *d += v);
                    }
                }
                offset += c;
            }
        }
        Op::GatherRows { x, idx } => {
            let c = node.value.cols();
            if let Some(dx) = slot(grads, nodes, *x) {
                for (gr, &i) in g.chunks(c).zip(idx.iter()) {
                    dx[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(dp) = slot(grads, nodes, p) {
                    dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &v)| *d += v);
                }
                offset += n;
            }
        }
        Op::SelectRows { x, row, flags } => {
            let c = node.value.cols();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((dr, gr), &f) in dx.chunks_mut(c).zip(g.chunks(c)).zip(flags.iter()) {
                    if !f {
                        dr.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            if let Some(drow) = slot(grads, nodes, *row) {
                for (gr, &f) in g.chunks(c).zip(flags.iter()) {
                    if f {
                        drow.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        &Op::MeanCols { x, segments } => {
            let c = val(x).cols();
            let n = c / segments;
            let inv = R::from_f64(1.0 / n as f64);
            if let Some(dx) = slot(grads, nodes, x) {
                for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(segments)) {
                    for s in 0..segments {
                        let v = gr[s] * inv;
                        dr[s * n..(s + 1) * n].iter_mut().for_each(|d| *d += v);
                    }
                }
            }
        }
        &Op::SmoothL1 { a, b, beta } => {
            let (av, bv) = (val(a), val(b));
            let scale = g[0] / R::from_f64(av.len() as f64);
            let dfn = |x: R, y: R| {
                let d = x - y;
                if d.abs() < beta {
                    d / beta
                } else if d > R::ZERO {
                    R::ONE
                } else {
                    -R::ONE
                }
            };
            if let Some(da) = slot(grads, nodes, a) {
                for ((dd, &x), &y) in da.iter_mut().zip(av.data()).zip(bv.data()) {
                    *dd += scale * dfn(x, y);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for ((dd, &x), &y) in db.iter_mut().zip(av.data()).zip(bv.data()) {
                    *dd -= scale * dfn(x, y);
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = val(*logits).cols();
            let scale = g[0] / R::from_f64(labels.len() as f64);
            if let Some(dl) = slot(grads, nodes, *logits) {
                for (i, &lab) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == lab { R::ONE } else { R::ZERO };
                        dl[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}
