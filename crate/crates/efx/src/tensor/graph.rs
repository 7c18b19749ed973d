//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every builder method appends a node holding the
//! op, its input handles, and the eagerly computed value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a gradient-enabled leaf.
//!
//! Layout conventions: images and feature maps are `(C, H, W)` row-major,
//! matrices `(rows, cols)`, vectors `(N,)`. There is no batch axis; batching
//! is done by building one graph per sample and summing parameter gradients.

use super::{kernels, shape_numel, Element, Tensor};
use crate::{Error, Result};

/// Border handling for [`Graph::conv2d`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PaddingMode {
    /// Edge-inclusive reflection (`pad[-1] = x[0]`, `pad[-2] = x[1]`).
    Symmetric,
    /// Zero fill.
    Zero,
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LnClamped(Var, f64),
    Softmax0(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, mode: PaddingMode },
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Matmul(Var, Var),
    Gram(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat0(Vec<Var>),
    Narrow0 { x: Var, start: usize },
    TileSpatial(Var),
    ApplyKernels { image: Var, field: Var, kappa: usize },
    Warp { image: Var, flow: Var },
    Reshape(Var),
}

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-major strides of `shape`, with stride 0 on axes broadcast up to `out`.
fn bcast_strides(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut s = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = s;
        s *= shape[ax];
    }
    out.iter()
        .zip(shape)
        .zip(&strides)
        .map(|((&o, &i), &st)| if i == o { st } else { 0 })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel = shape_numel(out_shape);
    let rank = out_shape.len();
    let mut coord = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for i in 0..numel {
        f(i, a_off, b_off);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            a_off += sa[ax];
            b_off += sb[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            coord[ax] = 0;
            a_off -= sa[ax] * out_shape[ax];
            b_off -= sb[ax] * out_shape[ax];
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("rank mismatch: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::dim(op, format!("incompatible shapes {a:?} vs {b:?}")))
            }
        })
        .collect()
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape_numel(&shape), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by node {} ({} elements, shape {shape:?})",
            self.nodes.len(),
            value.len(),
        );
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<E> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves and access ──────────────────────────────────────────────

    /// Adds a leaf holding `data` with the given shape.
    pub fn leaf(&mut self, data: Vec<E>, shape: Vec<usize>, needs_grad: bool) -> Result<Var> {
        if shape_numel(&shape) != data.len() || data.is_empty() {
            return Err(Error::dim(
                "leaf",
                format!("shape {shape:?} does not describe {} elements", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, needs_grad))
    }

    /// Binds a tensor as a leaf; gradient participation follows the tensor.
    pub fn bind(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Non-gradient leaf from raw data.
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    /// Non-gradient scalar leaf of shape `(1,)`.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![E::from_f64(v)], Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.node(v).value
    }

    /// Copies a node's value out as a detached tensor.
    pub fn detach(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph nodes have consistent shapes")
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates this node's gradient into `t.grad`.
    pub fn read_grad_into(&self, v: Var, t: &mut Tensor<E>) {
        if let Some(g) = self.grad(v) {
            debug_assert_eq!(t.numel(), g.len());
            match t.grad_mut() {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                None => t.set_grad(g.to_vec()),
            }
        }
    }

    // ── Elementwise ────────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (na, nb) = (self.node(a), self.node(b));
        let value = if na.shape == nb.shape {
            na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = bcast_strides(&out_shape, &na.shape);
            let sb = bcast_strides(&out_shape, &nb.shape);
            let mut out = vec![E::zero(); shape_numel(&out_shape)];
            for_each_bcast(&out_shape, &sa, &sb, |i, ao, bo| {
                out[i] = f(na.value[ao], nb.value[bo]);
            });
            out
        };
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(out_shape, value, make(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise division. Denominator must be nonzero everywhere.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| f(v)).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, op, needs)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let c = E::from_f64(s);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let c = E::from_f64(s);
        self.unary(x, |v| v * c, Op::MulScalar(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > E::zero() { v } else { E::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = E::from_f64(slope);
        self.unary(x, |v| if v > E::zero() { v } else { a * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| E::one() / (E::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Natural log of the input clamped to `[eps, 1 - eps]`; keeps
    /// cross-entropy terms finite for saturated probabilities.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        let (lo, hi) = (E::from_f64(eps), E::from_f64(1.0 - eps));
        self.unary(x, |v| v.max(lo).min(hi).ln(), Op::LnClamped(x, eps))
    }

    /// Softmax over axis 0, computed independently for every trailing index.
    pub fn softmax0(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let a = n.shape[0];
        let rest = n.value.len() / a;
        let mut out = vec![E::zero(); n.value.len()];
        for r in 0..rest {
            let mut m = E::neg_infinity();
            for i in 0..a {
                m = m.max(n.value[i * rest + r]);
            }
            let mut sum = E::zero();
            for i in 0..a {
                let e = (n.value[i * rest + r] - m).exp();
                out[i * rest + r] = e;
                sum += e;
            }
            for i in 0..a {
                out[i * rest + r] /= sum;
            }
        }
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push(shape, out, Op::Softmax0(x), needs)
    }

    // ── Structured ops ─────────────────────────────────────────────────

    /// 2-D cross-correlation of a `(C_in, H, W)` input with `(C_out, C_in,
    /// KH, KW)` weights (odd KH and KW) and optional `(C_out,)` bias.
    /// Padding is `(K-1)/2` per axis so stride 1 preserves the spatial size.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        mode: PaddingMode,
    ) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let is = self.shape(input).to_vec();
        if is.len() != 3 || ws.len() != 4 {
            return Err(Error::dim("conv2d", format!("want (C,H,W) input and (O,I,KH,KW) weight, got {is:?} and {ws:?}")));
        }
        if ws[1] != is[0] {
            return Err(Error::dim("conv2d", format!("input has {} channels, weight expects {}", is[0], ws[1])));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel sides must be odd, got {}x{}", ws[2], ws[3])));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim("conv2d", format!("bias shape {:?} != ({},)", self.shape(b), ws[0])));
            }
        }
        let d = kernels::ConvDims {
            c_in: is[0],
            h: is[1],
            w: is[2],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad_y: (ws[2] - 1) / 2,
            pad_x: (ws[3] - 1) / 2,
        };
        let padded = kernels::pad2d(
            &self.node(input).value,
            d.c_in,
            d.h,
            d.w,
            d.pad_y,
            d.pad_x,
            mode == PaddingMode::Symmetric,
        );
        let value = kernels::conv2d_forward(
            &padded,
            &self.node(weight).value,
            bias.map(|b| self.node(b).value.as_slice()),
            &d,
        );
        let needs = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            vec![d.c_out, d.out_h(), d.out_w()],
            value,
            Op::Conv2d { input, weight, bias, stride, mode },
            needs,
        ))
    }

    /// 2x2 mean pooling with stride 2 over a `(C, H, W)` input.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dim("avg_pool2", format!("want (C, even H, even W), got {s:?}")));
        }
        let value = kernels::avg_pool2_forward(&self.node(x).value, s[0], s[1], s[2]);
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], s[1] / 2, s[2] / 2], value, Op::AvgPool2(x), needs))
    }

    /// Nearest-neighbor x2 spatial upsampling of a `(C, H, W)` input.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("upsample2", format!("want (C,H,W), got {s:?}")));
        }
        let value = kernels::upsample2_forward(&self.node(x).value, s[0], s[1], s[2]);
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], s[1] * 2, s[2] * 2], value, Op::Upsample2(x), needs))
    }

    /// Spatial mean per channel: `(C, H, W)` -> `(C,)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("global_avg_pool", format!("want (C,H,W), got {s:?}")));
        }
        let plane = s[1] * s[2];
        let inv = E::from_f64(1.0 / plane as f64);
        let value = self
            .node(x)
            .value
            .chunks_exact(plane)
            .map(|c| c.iter().fold(E::zero(), |a, &v| a + v) * inv)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(vec![s[0]], value, Op::GlobalAvgPool(x), needs))
    }

    /// `(M, K) x (K, N) -> (M, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("incompatible shapes {sa:?} x {sb:?}")));
        }
        let value =
            kernels::matmul(&self.node(a).value, &self.node(b).value, sa[0], sa[1], sb[1]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![sa[0], sb[1]], value, Op::Matmul(a, b), needs))
    }

    /// Normalized channel Gram matrix of a `(C, H, W)` feature map.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("gram", format!("want (C,H,W), got {s:?}")));
        }
        let value = kernels::gram_forward(&self.node(x).value, s[0], s[1] * s[2]);
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], s[0]], value, Op::Gram(x), needs))
    }

    /// Sum of all elements, shape `(1,)`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.node(x).value.iter().fold(E::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.push(vec![1], vec![v], Op::SumAll(x), needs)
    }

    /// Mean of all elements, shape `(1,)`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.node(x).value.len();
        let v = self.node(x).value.iter().fold(E::zero(), |a, &b| a + b)
            * E::from_f64(1.0 / n as f64);
        let needs = self.needs(x);
        self.push(vec![1], vec![v], Op::MeanAll(x), needs)
    }

    /// Concatenate along axis 0; trailing dims must match.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat0", "no inputs"));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut axis0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim("concat0", format!("trailing dims differ: {:?} vs {tail:?}", &s[1..])));
            }
            axis0 += s[0];
        }
        let mut shape = vec![axis0];
        shape.extend_from_slice(&tail);
        let mut value = Vec::with_capacity(shape_numel(&shape));
        for &p in parts {
            value.extend_from_slice(&self.node(p).value);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(shape, value, Op::Concat0(parts.to_vec()), needs))
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(Error::dim("narrow0", format!("range {start}..{} out of axis size {}", start + len, s[0])));
        }
        let chunk = shape_numel(&s[1..]);
        let value = self.node(x).value[start * chunk..(start + len) * chunk].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let needs = self.needs(x);
        Ok(self.push(shape, value, Op::Narrow0 { x, start }, needs))
    }

    /// Broadcast a `(C,)` vector to `(C, H, W)`.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(Error::dim("tile_spatial", format!("want (C,), got {s:?}")));
        }
        let mut value = Vec::with_capacity(s[0] * h * w);
        for &v in &self.node(x).value {
            value.extend(std::iter::repeat(v).take(h * w));
        }
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], h, w], value, Op::TileSpatial(x), needs))
    }

    /// Per-pixel kernel application (see [`kernels::apply_kernels_forward`]).
    /// `image` is `(C, H, W)`, `field` is `((2*kappa+1)^2, H, W)`.
    pub fn apply_kernels(&mut self, image: Var, field: Var, kappa: usize) -> Result<Var> {
        let si = self.shape(image).to_vec();
        let sf = self.shape(field).to_vec();
        let taps = (2 * kappa + 1) * (2 * kappa + 1);
        if si.len() != 3 || sf.len() != 3 || sf[0] != taps || sf[1..] != si[1..] {
            return Err(Error::dim(
                "apply_kernels",
                format!("image {si:?} and field {sf:?} incompatible for kappa {kappa}"),
            ));
        }
        let value = kernels::apply_kernels_forward(
            &self.node(image).value,
            &self.node(field).value,
            si[0],
            si[1],
            si[2],
            kappa,
        );
        let needs = self.needs(image) || self.needs(field);
        Ok(self.push(si.clone(), value, Op::ApplyKernels { image, field, kappa }, needs))
    }

    /// Bilinear warp: `out(y,x) = image(y + v, x + u)` with clamp-to-edge
    /// sampling. `flow` is `(2, H, W)` with channel 0 = u, channel 1 = v.
    pub fn warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let si = self.shape(image).to_vec();
        let sf = self.shape(flow).to_vec();
        if si.len() != 3 || sf != [2, si[1], si[2]] {
            return Err(Error::dim("warp", format!("image {si:?} needs flow (2,{},{}), got {sf:?}", si[1], si[2])));
        }
        let value =
            kernels::warp_forward(&self.node(image).value, &self.node(flow).value, si[0], si[1], si[2]);
        let needs = self.needs(image) || self.needs(flow);
        Ok(self.push(si, value, Op::Warp { image, flow }, needs))
    }

    /// Reinterpret the value with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape_numel(&shape) != self.node(x).value.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.node(x).value.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, value, Op::Reshape(x), needs))
    }

    // ── Backward ───────────────────────────────────────────────────────

    fn accum(grads: &mut [Option<Vec<E>>], nodes: &[Node<E>], v: Var, contrib: &[E]) {
        if !nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![E::zero(); nodes[v.0].value.len()]);
        debug_assert_eq!(slot.len(), contrib.len());
        for (d, s) in slot.iter_mut().zip(contrib) {
            *d += *s;
        }
    }

    /// Reverse pass from a scalar node. Gradients from a previous call are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dout) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                self.grads[idx] = Some(dout);
                continue;
            }
            self.step_backward(idx, &dout);
            self.grads[idx] = Some(dout);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, dout: &[E]) {
        // Split borrows: nodes are read-only during the reverse pass.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out_shape = &nodes[idx].shape;
        let out_value = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::bcast_binary_back(grads, nodes, out_shape, dout, *a, *b, |_, _, g| (g, g));
            }
            Op::Sub(a, b) => {
                Self::bcast_binary_back(grads, nodes, out_shape, dout, *a, *b, |_, _, g| (g, -g));
            }
            Op::Mul(a, b) => {
                Self::bcast_binary_back(grads, nodes, out_shape, dout, *a, *b, |x, y, g| {
                    (g * y, g * x)
                });
            }
            Op::Div(a, b) => {
                Self::bcast_binary_back(grads, nodes, out_shape, dout, *a, *b, |x, y, g| {
                    (g / y, -g * x / (y * y))
                });
            }
            Op::AddScalar(x) => Self::accum(grads, nodes, *x, dout),
            Op::MulScalar(x, s) => {
                let c = E::from_f64(*s);
                let dx: Vec<E> = dout.iter().map(|&g| g * c).collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<E> = nodes[x.0]
                    .value
                    .iter()
                    .zip(dout)
                    .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::LeakyRelu(x, slope) => {
                let a = E::from_f64(*slope);
                let dx: Vec<E> = nodes[x.0]
                    .value
                    .iter()
                    .zip(dout)
                    .map(|(&v, &g)| if v > E::zero() { g } else { a * g })
                    .collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<E> = out_value
                    .iter()
                    .zip(dout)
                    .map(|(&y, &g)| g * y * (E::one() - y))
                    .collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<E> =
                    out_value.iter().zip(dout).map(|(&y, &g)| g * (E::one() - y * y)).collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::LnClamped(x, eps) => {
                let (lo, hi) = (E::from_f64(*eps), E::from_f64(1.0 - *eps));
                let dx: Vec<E> = nodes[x.0]
                    .value
                    .iter()
                    .zip(dout)
                    .map(|(&v, &g)| if v < lo || v > hi { E::zero() } else { g / v })
                    .collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Softmax0(x) => {
                let a = out_shape[0];
                let rest = out_value.len() / a;
                let mut dx = vec![E::zero(); out_value.len()];
                for r in 0..rest {
                    let mut dot = E::zero();
                    for i in 0..a {
                        dot += dout[i * rest + r] * out_value[i * rest + r];
                    }
                    for i in 0..a {
                        let y = out_value[i * rest + r];
                        dx[i * rest + r] = y * (dout[i * rest + r] - dot);
                    }
                }
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Conv2d { input, weight, bias, stride, mode } => {
                let is = &nodes[input.0].shape;
                let ws = &nodes[weight.0].shape;
                let d = kernels::ConvDims {
                    c_in: is[0],
                    h: is[1],
                    w: is[2],
                    c_out: ws[0],
                    kh: ws[2],
                    kw: ws[3],
                    stride: *stride,
                    pad_y: (ws[2] - 1) / 2,
                    pad_x: (ws[3] - 1) / 2,
                };
                let symmetric = *mode == PaddingMode::Symmetric;
                let want_input = nodes[input.0].needs_grad;
                let want_weight = nodes[weight.0].needs_grad;
                let padded = kernels::pad2d(
                    &nodes[input.0].value,
                    d.c_in,
                    d.h,
                    d.w,
                    d.pad_y,
                    d.pad_x,
                    symmetric,
                );
                let (dpad, dw, db) = kernels::conv2d_backward(
                    &padded,
                    &nodes[weight.0].value,
                    dout,
                    &d,
                    want_input,
                    want_weight,
                );
                if want_input {
                    let din = kernels::unpad2d_grad(
                        &dpad, d.c_in, d.h, d.w, d.pad_y, d.pad_x, symmetric,
                    );
                    Self::accum(grads, nodes, *input, &din);
                }
                if want_weight {
                    Self::accum(grads, nodes, *weight, &dw);
                }
                if let Some(b) = bias {
                    Self::accum(grads, nodes, *b, &db);
                }
            }
            Op::AvgPool2(x) => {
                let s = &nodes[x.0].shape;
                let dx = kernels::avg_pool2_backward(dout, s[0], s[1], s[2]);
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Upsample2(x) => {
                let s = &nodes[x.0].shape;
                let dx = kernels::upsample2_backward(dout, s[0], s[1], s[2]);
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = &nodes[x.0].shape;
                let plane = s[1] * s[2];
                let inv = E::from_f64(1.0 / plane as f64);
                let mut dx = vec![E::zero(); nodes[x.0].value.len()];
                for c in 0..s[0] {
                    let g = dout[c] * inv;
                    for v in &mut dx[c * plane..(c + 1) * plane] {
                        *v = g;
                    }
                }
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].needs_grad {
                    let da = kernels::matmul_da(dout, &nodes[b.0].value, m, k, n);
                    Self::accum(grads, nodes, *a, &da);
                }
                if nodes[b.0].needs_grad {
                    let db = kernels::matmul_db(&nodes[a.0].value, dout, m, k, n);
                    Self::accum(grads, nodes, *b, &db);
                }
            }
            Op::Gram(x) => {
                let s = &nodes[x.0].shape;
                let dx = kernels::gram_backward(&nodes[x.0].value, dout, s[0], s[1] * s[2]);
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::SumAll(x) => {
                let dx = vec![dout[0]; nodes[x.0].value.len()];
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len();
                let g = dout[0] * E::from_f64(1.0 / n as f64);
                let dx = vec![g; n];
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::Concat0(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    Self::accum(grads, nodes, p, &dout[off..off + n]);
                    off += n;
                }
            }
            Op::Narrow0 { x, start } => {
                let s = &nodes[x.0].shape;
                let chunk = shape_numel(&s[1..]);
                let mut dx = vec![E::zero(); nodes[x.0].value.len()];
                dx[start * chunk..start * chunk + dout.len()].copy_from_slice(dout);
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::TileSpatial(x) => {
                let plane = out_shape[1] * out_shape[2];
                let dx: Vec<E> = dout
                    .chunks_exact(plane)
                    .map(|c| c.iter().fold(E::zero(), |a, &v| a + v))
                    .collect();
                Self::accum(grads, nodes, *x, &dx);
            }
            Op::ApplyKernels { image, field, kappa } => {
                let s = &nodes[image.0].shape;
                let (dimg, dfield) = kernels::apply_kernels_backward(
                    &nodes[image.0].value,
                    &nodes[field.0].value,
                    dout,
                    s[0],
                    s[1],
                    s[2],
                    *kappa,
                );
                Self::accum(grads, nodes, *image, &dimg);
                Self::accum(grads, nodes, *field, &dfield);
            }
            Op::Warp { image, flow } => {
                let s = &nodes[image.0].shape;
                let (dimg, dflow) = kernels::warp_backward(
                    &nodes[image.0].value,
                    &nodes[flow.0].value,
                    dout,
                    s[0],
                    s[1],
                    s[2],
                );
                Self::accum(grads, nodes, *image, &dimg);
                Self::accum(grads, nodes, *flow, &dflow);
            }
            Op::Reshape(x) => Self::accum(grads, nodes, *x, dout),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bcast_binary_back(
        grads: &mut [Option<Vec<E>>],
        nodes: &[Node<E>],
        out_shape: &[usize],
        dout: &[E],
        a: Var,
        b: Var,
        f: impl Fn(E, E, E) -> (E, E),
    ) {
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape == nb.shape {
            let mut da = vec![E::zero(); na.value.len()];
            let mut db = vec![E::zero(); nb.value.len()];
            for i in 0..dout.len() {
                let (ga, gb) = f(na.value[i], nb.value[i], dout[i]);
                da[i] = ga;
                db[i] = gb;
            }
            Self::accum(grads, nodes, a, &da);
            Self::accum(grads, nodes, b, &db);
            return;
        }
        let sa = bcast_strides(out_shape, &na.shape);
        let sb = bcast_strides(out_shape, &nb.shape);
        let mut da = vec![E::zero(); na.value.len()];
        let mut db = vec![E::zero(); nb.value.len()];
        for_each_bcast(out_shape, &sa, &sb, |i, ao, bo| {
            let (ga, gb) = f(na.value[ao], nb.value[bo], dout[i]);
            da[ao] += ga;
            db[bo] += gb;
        });
        Self::accum(grads, nodes, a, &da);
        Self::accum(grads, nodes, b, &db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf32(g: &mut Graph<f32>, data: &[f32], shape: &[usize]) -> Var {
        g.leaf(data.to_vec(), shape.to_vec(), true).unwrap()
    }

    #[test]
    fn conv_symmetric_matches_worked_example() {
        // [1,2,3] convolved with ones(1x3) under edge-inclusive reflection:
        // padded row is [1,1,2,3,3] so the output is [4,6,8].
        let mut g = Graph::<f32>::new();
        let x = leaf32(&mut g, &[1.0, 2.0, 3.0], &[1, 1, 3]);
        let w = leaf32(&mut g, &[1.0, 1.0, 1.0], &[1, 1, 1, 3]);
        let y = g.conv2d(x, w, None, 1, PaddingMode::Symmetric).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3]);
        assert_eq!(g.value(y), &[4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_zero_padding() {
        let mut g = Graph::<f32>::new();
        let x = leaf32(&mut g, &[1.0, 2.0, 3.0], &[1, 1, 3]);
        let w = leaf32(&mut g, &[1.0, 1.0, 1.0], &[1, 1, 1, 3]);
        let y = g.conv2d(x, w, None, 1, PaddingMode::Zero).unwrap();
        assert_eq!(g.value(y), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_stride_two_halves_spatial_size() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![0.5; 32 * 32], vec![1, 32, 32], false).unwrap();
        let w = g.leaf(vec![0.1; 25], vec![1, 1, 5, 5], false).unwrap();
        let y = g.conv2d(x, w, None, 2, PaddingMode::Symmetric).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 16]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![0.0; 8], vec![2, 2, 2], false).unwrap();
        let w = g.leaf(vec![0.0; 9], vec![1, 1, 3, 3], false).unwrap();
        let e = g.conv2d(x, w, None, 1, PaddingMode::Zero).unwrap_err();
        assert!(matches!(e, Error::Dim { .. }), "got {e:?}");
    }

    #[test]
    fn softmax_normalizes_to_quarters() {
        let mut g = Graph::<f32>::new();
        let x = leaf32(&mut g, &[0.0, 3f32.ln()], &[2]);
        let y = g.softmax0(x);
        assert_abs_diff_eq!(g.value(y)[0], 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(g.value(y)[1], 0.75, epsilon = 1e-6);
        let s: f32 = g.value(y).iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn gram_small_example() {
        // F = [[1,2],[3,4]] as (2,1,2); N = 2*1*2 = 4.
        let mut g = Graph::<f32>::new();
        let f = leaf32(&mut g, &[1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let gm = g.gram(f).unwrap();
        assert_eq!(g.shape(gm), &[2, 2]);
        assert_eq!(g.value(gm), &[1.25, 2.75, 2.75, 6.25]);
    }

    #[test]
    fn elementwise_shape_mismatch_is_dim_error() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(vec![0.0; 2], vec![2], false).unwrap();
        let b = g.leaf(vec![0.0; 3], vec![3], false).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dim { .. })));
    }

    #[test]
    fn product_rule_gradients() {
        let mut g = Graph::<f32>::new();
        let a = leaf32(&mut g, &[2.0, -1.0], &[2]);
        let b = leaf32(&mut g, &[5.0, 3.0], &[2]);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 3.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn broadcast_gradients_sum_over_expanded_axes() {
        // mask (1,2,2) multiplied against an image (3,2,2): the mask grad
        // collects contributions from every image channel.
        let mut g = Graph::<f32>::new();
        let mask = leaf32(&mut g, &[0.5, 0.5, 0.5, 0.5], &[1, 2, 2]);
        let img = leaf32(&mut g, &[1.0; 12], &[3, 2, 2]);
        let p = g.mul(mask, img).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 2]);
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(mask).unwrap(), &[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(g.grad(img).unwrap(), &[0.5; 12]);
    }

    #[test]
    fn apply_kernels_identity_field() {
        // All mass on the center tap (dy=dx=0) reproduces the image.
        let mut g = Graph::<f32>::new();
        let img: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 10.0).collect();
        let x = g.leaf(img.clone(), vec![2, 3, 4], false).unwrap();
        let mut field = vec![0.0f32; 9 * 12];
        let center = 4; // (0+1)*3 + (0+1) for kappa=1
        field[center * 12..(center + 1) * 12].fill(1.0);
        let f = g.leaf(field, vec![9, 3, 4], false).unwrap();
        let y = g.apply_kernels(x, f, 1).unwrap();
        assert_eq!(g.value(y), img.as_slice());
    }

    #[test]
    fn apply_kernels_shift_tap_moves_content_down() {
        // Mass on the tap (dy=+1, dx=0): out(y) = img(y-1), reflected at row 0.
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0], vec![1, 3, 1], false).unwrap();
        let mut field = vec![0.0f32; 9 * 3];
        let tap = 2 * 3 + 1; // dy=+1, dx=0 for kappa=1
        field[tap * 3..(tap + 1) * 3].fill(1.0);
        let f = g.leaf(field, vec![9, 3, 1], false).unwrap();
        let y = g.apply_kernels(x, f, 1).unwrap();
        assert_eq!(g.value(y), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn warp_integer_shift_samples_right() {
        // u = +1 everywhere: out(x) = img(x+1), clamped at the right edge.
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![10.0, 20.0, 30.0], vec![1, 1, 3], false).unwrap();
        let flow = g.leaf(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], vec![2, 1, 3], false).unwrap();
        let y = g.warp(x, flow).unwrap();
        assert_eq!(g.value(y), &[20.0, 30.0, 30.0]);
    }

    #[test]
    fn pool_and_upsample_shapes_and_values() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], false).unwrap();
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 1]);
        assert_eq!(g.value(p), &[2.5]);
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.shape(u), &[1, 4, 4]);
        assert_eq!(g.value(u)[0..4], [1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut g = Graph::<f32>::new();
        let a = leaf32(&mut g, &[1.0, 2.0], &[1, 1, 2]);
        let b = leaf32(&mut g, &[3.0, 4.0], &[1, 1, 2]);
        let c = g.concat0(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 2]);
        let back = g.narrow0(c, 1, 1).unwrap();
        assert_eq!(g.value(back), &[3.0, 4.0]);
        let loss = g.sum_all(back);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f32>::new();
        let a = leaf32(&mut g, &[1.0, 2.0], &[2]);
        assert!(matches!(g.backward(a), Err(Error::Dim { .. })));
    }

    #[test]
    fn no_grad_leaves_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        let b = leaf32(&mut g, &[3.0, 4.0], &[2]);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_none());
        assert!(g.grad(b).is_some());
    }
}
