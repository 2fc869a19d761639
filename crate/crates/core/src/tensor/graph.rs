use crate::error::{shape_err, Error, Result};

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    Log,
    Square,
    Clamp(f64, f64),
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    /// `b` equals `a`'s leading extents followed by 1s; each element of `b`
    /// covers `inner` consecutive elements of `a`.
    Trailing {
        inner: usize,
    },
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Self::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Some(Self::Scalar);
        }
        if a.len() != b.len() {
            return None;
        }
        let split = a.iter().zip(b).position(|(x, y)| x != y)?;
        if b[split..].iter().all(|&d| d == 1) {
            Some(Self::Trailing {
                inner: a[split..].iter().product(),
            })
        } else {
            None
        }
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Trailing { inner } => i / inner,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Expand(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Filter3x3 {
        x: Var,
        kernel: [f64; 9],
    },
    AvgPool {
        x: Var,
        window: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    FlattenSpatial(Var),
    ViewSpatial(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        scale: f64,
    },
}

#[cfg_attr(not(debug_assertions), allow(dead_code))]
impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Expand(_) => "expand",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Filter3x3 { .. } => "filter3x3",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::FlattenSpatial(_) => "flatten_spatial",
            Op::ViewSpatial(_) => "view_spatial",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Attention { .. } => "attention",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary { a, b, .. } | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Expand(x)
            | Op::Transpose(x)
            | Op::Filter3x3 { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::FlattenSpatial(x)
            | Op::ViewSpatial(x)
            | Op::Slice { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::Concat(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Output had no NaN/Inf; only tracked in debug builds.
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    finite: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so parents always precede children and
/// a reverse sweep over indices is a valid topological order for backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let finite = !cfg!(debug_assertions) || t.all_finite();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let finite = !cfg!(debug_assertions) || value.all_finite();
        #[cfg(debug_assertions)]
        if !finite {
            let parents_finite = op.parents().iter().all(|p| self.nodes[p.0].finite);
            assert!(
                !parents_finite,
                "non-finite output from finite inputs in {}",
                op.name()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let Some(bcast) = Bcast::resolve(av.shape(), bv.shape()) else {
            return shape_err(
                "elementwise",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            );
        };
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bcast.index(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                    BinaryKind::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                }
            })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn max2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(f64, UnaryKind) -> f64 = |v, kind| match kind {
            UnaryKind::Scale(c) => v * c,
            UnaryKind::AddScalar(c) => v + c,
            UnaryKind::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Square => v * v,
            UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
        };
        let out = self.value(x).map(|v| f(v, kind));
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary { kind, x }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    // ---- reductions and reshapes ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Explicit broadcast: every extent of `x` must equal the target or be 1.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let src = xv.shape();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return shape_err("expand", format!("{src:?} -> {shape:?}"));
        }
        let src_strides = strides(src);
        let out = Tensor::from_fn(shape, |i| {
            let mut rem = i;
            let mut off = 0;
            for d in (0..shape.len()).rev() {
                let idx = rem % shape[d];
                rem /= shape[d];
                if src[d] != 1 {
                    off += idx * src_strides[d];
                }
            }
            xv.data()[off]
        });
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Expand(x), rg))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2("transpose", xv)?;
        let d = xv.data();
        let out = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// `x[M,K] · w[K,N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k) = dims2("linear", xv)?;
        let (k2, n) = dims2("linear", wv)?;
        if k != k2 {
            return shape_err("linear", format!("{:?} x {:?}", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bd = self.value(b);
            if bd.numel() != n {
                return shape_err("linear", format!("bias {:?} for width {n}", bd.shape()));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bd.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(m, k, n, xv.data(), false, wv.data(), false, beta, &mut out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    // ---- spatial ops ------------------------------------------------------

    /// Cross-correlation of `x[C_in,H,W]` with `w[C_out,C_in,k,k]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c_in, h, wd) = dims3("conv2d", xv)?;
        let ws = wv.shape();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return shape_err(
                "conv2d",
                format!("input {:?} with weight {ws:?}", xv.shape()),
            );
        }
        let (c_out, k) = (ws[0], ws[2]);
        let Some(geom) = ConvGeom::new(c_in, h, wd, k, stride, pad) else {
            return shape_err(
                "conv2d",
                format!("kernel {k} does not fit {h}x{wd} with pad {pad}"),
            );
        };
        let cols = if geom.is_pointwise() {
            xv.data().to_vec()
        } else {
            let mut cols = vec![0.0; geom.patch_len() * geom.out_len()];
            kernels::im2col(xv.data(), &geom, &mut cols);
            cols
        };
        let out_len = geom.out_len();
        let mut out = vec![0.0; c_out * out_len];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != c_out {
                return shape_err(
                    "conv2d",
                    format!("bias {:?} for {c_out} channels", bv.shape()),
                );
            }
            for (row, &bias) in out.chunks_mut(out_len).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v = bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            c_out,
            geom.patch_len(),
            out_len,
            wv.data(),
            false,
            &cols,
            false,
            beta,
            &mut out,
        );
        let weight_needs_cols = self.requires_grad(w);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let out = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        let cols = if weight_needs_cols { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Depthwise 3×3 correlation with a fixed (non-learnable) kernel and
    /// edge-replicated borders.
    pub fn filter3x3(&mut self, x: Var, kernel: [f64; 9]) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = dims3("filter3x3", xv)?;
        let mut out = vec![0.0; c * h * w];
        kernels::filter3x3(xv.data(), c, h, w, &kernel, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::Filter3x3 { x, kernel },
            rg,
        ))
    }

    /// Mean over `window×window` tiles; ragged edges are edge-replicated.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = dims3("avg_pool2d", xv)?;
        if window == 0 {
            return shape_err("avg_pool2d", "window must be positive");
        }
        let (ho, wo) = (
            kernels::pooled_extent(h, window),
            kernels::pooled_extent(w, window),
        );
        let mut out = vec![0.0; c * ho * wo];
        kernels::avg_pool(xv.data(), c, h, w, window, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::AvgPool { x, window },
            rg,
        ))
    }

    /// Mean over the whole spatial extent, keeping a `[C,1,1]` shape.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3("global_avg_pool", self.value(x))?;
        let hw = h * w;
        let rows = self.reshape(x, &[c, hw])?;
        let weights = self.constant(Tensor::full(&[hw, 1], 1.0 / hw as f64));
        let pooled = self.matmul(rows, weights)?;
        self.reshape(pooled, &[c, 1, 1])
    }

    pub fn downsample_avg(&mut self, x: Var) -> Result<Var> {
        self.avg_pool2d(x, 2)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = dims3("upsample_nearest", xv)?;
        let (ho, wo) = (h * factor, w * factor);
        let d = xv.data();
        let out = Tensor::from_fn(&[c, ho, wo], |i| {
            let ch = i / (ho * wo);
            let r = (i / wo) % ho;
            let col = i % wo;
            d[(ch * h + r / factor) * w + col / factor]
        });
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    /// `[C,H,W] -> [H·W, C]`: one row per pixel.
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = dims3("flatten_spatial", xv)?;
        let hw = h * w;
        let d = xv.data();
        let out = Tensor::from_fn(&[hw, c], |i| d[(i % c) * hw + i / c]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::FlattenSpatial(x), rg))
    }

    /// `[H·W, C] -> [C,H,W]`, the inverse of [`Graph::flatten_spatial`].
    pub fn view_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (hw, c) = dims2("view_spatial", xv)?;
        if hw != h * w {
            return shape_err("view_spatial", format!("{:?} as {h}x{w}", xv.shape()));
        }
        let d = xv.data();
        let out = Tensor::from_fn(&[c, h, w], |i| d[(i % hw) * c + i / hw]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ViewSpatial(x), rg))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[1..] != tail[..] {
                return shape_err("concat", format!("{:?} vs trailing {tail:?}", pv.shape()));
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        if start + len > lead {
            return shape_err("slice", format!("{start}..{} of {lead}", start + len));
        }
        let inner: usize = xv.shape()[1..].iter().product();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let data = xv.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let rows = dims2("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.value(p))?;
            if r != rows {
                return shape_err("concat_cols", format!("{r} rows vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2("slice_cols", xv)?;
        if start + len > cols {
            return shape_err("slice_cols", format!("{start}..{} of {cols}", start + len));
        }
        let d = xv.data();
        let out = Tensor::from_fn(&[rows, len], |i| d[(i / len) * cols + start + i % len]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// `softmax(q·kᵀ/√D)·v` for `q[Nq,D]`, `k[Nk,D]`, `v[Nk,Dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = dims2("attention", qv)?;
        let (nk, dk) = dims2("attention", kv)?;
        let (nv, dv) = dims2("attention", vv)?;
        if d != dk || nk != nv {
            return shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            );
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; nq * nk];
        kernels::gemm(
            nq,
            d,
            nk,
            qv.data(),
            false,
            kv.data(),
            true,
            0.0,
            &mut probs,
        );
        for row in probs.chunks_mut(nk) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - mx).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        let mut out = vec![0.0; nq * dv];
        kernels::gemm(nq, nk, dv, &probs, false, vv.data(), false, 0.0, &mut out);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![nq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Softmax matrix saved by an attention node (rows sum to 1).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, returning gradients for every leaf
    /// that requires one. Contributions from multiple consumers are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        leaves.resize_with(loss.0 + 1, || None);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            } else {
                self.propagate(id, &g, &mut grads);
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bcast = *bcast;
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, |ga| {
                        for (i, gv) in g.iter().enumerate() {
                            let y = bd[bcast.index(i)];
                            ga[i] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => *gv,
                                BinaryKind::Mul => gv * y,
                                BinaryKind::Div => gv / y,
                                BinaryKind::Max => {
                                    if ad[i] >= y {
                                        *gv
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    });
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, |gb| {
                        for (i, gv) in g.iter().enumerate() {
                            let j = bcast.index(i);
                            let x = ad[i];
                            let y = bd[j];
                            gb[j] += match kind {
                                BinaryKind::Add => *gv,
                                BinaryKind::Sub => -gv,
                                BinaryKind::Mul => gv * x,
                                BinaryKind::Div => -gv * x / (y * y),
                                BinaryKind::Max => {
                                    if x >= y {
                                        0.0
                                    } else {
                                        *gv
                                    }
                                }
                            };
                        }
                    });
                }
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        let v = xd[i];
                        let d = match *kind {
                            UnaryKind::Scale(c) => c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::LeakyRelu(s) => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                            UnaryKind::Tanh => 1.0 - out[i] * out[i],
                            UnaryKind::Abs => {
                                if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sqrt => 0.5 / out[i],
                            UnaryKind::Log => 1.0 / v,
                            UnaryKind::Square => 2.0 * v,
                            UnaryKind::Clamp(lo, hi) => {
                                if v > lo && v < hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Expand(x) => {
                let src = self.value(*x).shape().to_vec();
                let dst = node.value.shape();
                let src_strides = strides(&src);
                self.accumulate(grads, *x, |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        let mut rem = i;
                        let mut off = 0;
                        for d in (0..dst.len()).rev() {
                            let idx = rem % dst[d];
                            rem /= dst[d];
                            if src[d] != 1 {
                                off += idx * src_strides[d];
                            }
                        }
                        gx[off] += gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    kernels::gemm(m, n, k, g, false, bd, true, 1.0, ga)
                });
                self.accumulate(grads, *b, |gb| {
                    kernels::gemm(k, m, n, ad, true, g, false, 1.0, gb)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| {
                    kernels::gemm(m, n, k, g, false, wd, true, 1.0, gx)
                });
                self.accumulate(grads, *w, |gw| {
                    kernels::gemm(k, m, n, xd, true, g, false, 1.0, gw)
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = self.shape(*w)[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, |gw| {
                        kernels::gemm(c_out, ol, pl, g, false, cols, true, 1.0, gw)
                    });
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for (gbv, row) in gb.iter_mut().zip(g.chunks(ol)) {
                            *gbv += row.iter().sum::<f64>();
                        }
                    });
                }
                if self.requires_grad(*x) {
                    let wd = self.value(*w).data();
                    if geom.is_pointwise() {
                        self.accumulate(grads, *x, |gx| {
                            kernels::gemm(pl, c_out, ol, wd, true, g, false, 1.0, gx)
                        });
                    } else {
                        let mut dcols = vec![0.0; pl * ol];
                        kernels::gemm(pl, c_out, ol, wd, true, g, false, 0.0, &mut dcols);
                        self.accumulate(grads, *x, |gx| kernels::col2im(&dcols, geom, gx));
                    }
                }
            }
            Op::Filter3x3 { x, kernel } => {
                let (c, h, w) = self.value(*x).chw();
                self.accumulate(grads, *x, |gx| {
                    kernels::filter3x3_backward(g, c, h, w, kernel, gx)
                });
            }
            Op::AvgPool { x, window } => {
                let (c, h, w) = self.value(*x).chw();
                self.accumulate(grads, *x, |gx| {
                    kernels::avg_pool_backward(g, c, h, w, *window, gx)
                });
            }
            Op::Upsample { x, factor } => {
                let (_, h, w) = self.value(*x).chw();
                let (_, ho, wo) = node.value.chw();
                self.accumulate(grads, *x, |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        let ch = i / (ho * wo);
                        let r = (i / wo) % ho;
                        let col = i % wo;
                        gx[(ch * h + r / factor) * w + col / factor] += gv;
                    }
                });
            }
            Op::FlattenSpatial(x) => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                self.accumulate(grads, *x, |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        gx[(i % c) * hw + i / c] += gv;
                    }
                });
            }
            Op::ViewSpatial(x) => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                self.accumulate(grads, *x, |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        gx[(i % hw) * c + i / hw] += gv;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let n = g.len();
                let off = start * (n / node.value.shape()[0].max(1));
                self.accumulate(grads, *x, |gx| add_into(&mut gx[off..off + n], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col0 = 0;
                for &p in parts {
                    let (rows, c) = (self.shape(p)[0], self.shape(p)[1]);
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + col0..r * total + col0 + c],
                            );
                        }
                    });
                    col0 += c;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], row);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let (nq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (nk, dv) = (self.shape(*v)[0], self.shape(*v)[1]);
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                self.accumulate(grads, *v, |gv| {
                    kernels::gemm(nk, nq, dv, probs, true, g, false, 1.0, gv)
                });
                if self.requires_grad(*q) || self.requires_grad(*k) {
                    // dS = A ⊙ (dA − rowsum(dA ⊙ A)), dA = dO·vᵀ
                    let mut ds = vec![0.0; nq * nk];
                    kernels::gemm(nq, dv, nk, g, false, vd, true, 0.0, &mut ds);
                    for (drow, arow) in ds.chunks_mut(nk).zip(probs.chunks(nk)) {
                        let dot: f64 = drow.iter().zip(arow).map(|(x, y)| x * y).sum();
                        for (dsv, a) in drow.iter_mut().zip(arow) {
                            *dsv = a * (*dsv - dot) * scale;
                        }
                    }
                    self.accumulate(grads, *q, |gq| {
                        kernels::gemm(nq, nk, d, &ds, false, kd, false, 1.0, gq)
                    });
                    self.accumulate(grads, *k, |gk| {
                        kernels::gemm(nk, nq, d, &ds, true, qd, false, 1.0, gk)
                    });
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(target) {
            return;
        }
        let slot =
            grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(op, format!("expected a matrix, got {s:?}")),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => shape_err(op, format!("expected [C,H,W], got {s:?}")),
    }
}
