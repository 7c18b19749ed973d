//! Small trainable building blocks: conv layers, conv-LSTM cells, dense
//! heads, and the parameter-naming plumbing shared by every network.
//!
//! Layers own their parameters as [`Tensor`]s. For each forward pass they
//! are bound onto a [`Graph`] (`bind` returns a lightweight handle holding
//! the parameter `Var`s), so one set of weights can be reused across all
//! timesteps of a rollout with gradients accumulating through time.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Graph, PaddingMode, Tensor, Var};
use crate::Result;

/// Anything with named, checkpointable parameters.
///
/// `params` and `params_mut` must present the same tensors in the same
/// order; that order is also the optimizer's moment-buffer order.
pub trait ParamOwner<E: Element> {
    fn params(&self) -> Vec<(String, &Tensor<E>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)>;

    /// Clears accumulated parameter gradients. Gradient read-back adds
    /// into the tensor buffers, so training loops must call this once per
    /// step or updates compound stale directions.
    fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}

/// Prefixes every name in `children` with `prefix.`.
pub fn with_prefix<T>(prefix: &str, children: Vec<(String, T)>) -> Vec<(String, T)> {
    children.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// He-uniform initialization: U(-b, b) with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data sizes agree by construction")
}

/// 2-D convolution layer with owned weights.
pub struct Conv2dLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub mode: PaddingMode,
}

/// Graph handle for a bound [`Conv2dLayer`].
#[derive(Clone, Copy)]
pub struct BoundConv {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    mode: PaddingMode,
}

impl<E: Element> Conv2dLayer<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        mode: PaddingMode,
        with_bias: bool,
        trainable: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let mut weight = he_uniform::<E>(rng, &[out_ch, in_ch, k, k], fan_in);
        let mut bias = with_bias.then(|| Tensor::<E>::zeros(vec![out_ch]));
        if trainable {
            weight = weight.with_grad();
            bias = bias.map(Tensor::with_grad);
        }
        Conv2dLayer { weight, bias, stride, mode }
    }

    pub fn bind(&self, g: &mut Graph<E>) -> BoundConv {
        BoundConv {
            weight: g.bind(&self.weight),
            bias: self.bias.as_ref().map(|b| g.bind(b)),
            stride: self.stride,
            mode: self.mode,
        }
    }

    /// Pulls gradients off the graph into the owned tensors.
    pub fn read_grads(&mut self, g: &Graph<E>, bound: &BoundConv) {
        g.read_grad_into(bound.weight, &mut self.weight);
        if let (Some(b), Some(bv)) = (self.bias.as_mut(), bound.bias) {
            g.read_grad_into(bv, b);
        }
    }
}

impl BoundConv {
    pub fn apply<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.stride, self.mode)
    }
}

impl<E: Element> ParamOwner<E> for Conv2dLayer<E> {
    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

/// Convolutional LSTM cell: gates come from one convolution over the
/// channel-concatenated `[input, hidden]`.
pub struct ConvLstm<E: Element> {
    pub gates: Conv2dLayer<E>,
    pub hidden_ch: usize,
}

#[derive(Clone, Copy)]
pub struct BoundLstm {
    gates: BoundConv,
    hidden_ch: usize,
}

impl<E: Element> ConvLstm<E> {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, hidden_ch: usize, k: usize) -> Self {
        let gates = Conv2dLayer::new(
            rng,
            in_ch + hidden_ch,
            4 * hidden_ch,
            k,
            1,
            PaddingMode::Symmetric,
            true,
            true,
        );
        ConvLstm { gates, hidden_ch }
    }

    pub fn bind(&self, g: &mut Graph<E>) -> BoundLstm {
        BoundLstm { gates: self.gates.bind(g), hidden_ch: self.hidden_ch }
    }

    pub fn read_grads(&mut self, g: &Graph<E>, bound: &BoundLstm) {
        self.gates.read_grads(g, &bound.gates);
    }

    /// Zero state for a given spatial size.
    pub fn zero_state(&self, h: usize, w: usize) -> (Tensor<E>, Tensor<E>) {
        (
            Tensor::zeros(vec![self.hidden_ch, h, w]),
            Tensor::zeros(vec![self.hidden_ch, h, w]),
        )
    }
}

impl BoundLstm {
    /// One recurrence step; returns the new `(hidden, cell)` vars.
    pub fn step<E: Element>(
        &self,
        g: &mut Graph<E>,
        x: Var,
        state: (Var, Var),
    ) -> Result<(Var, Var)> {
        let (h_prev, c_prev) = state;
        let c = self.hidden_ch;
        let xh = g.concat0(&[x, h_prev])?;
        let gates = self.gates.apply(g, xh)?;
        let i_raw = g.narrow0(gates, 0, c)?;
        let f_raw = g.narrow0(gates, c, c)?;
        let o_raw = g.narrow0(gates, 2 * c, c)?;
        let g_raw = g.narrow0(gates, 3 * c, c)?;
        let i = g.sigmoid(i_raw);
        let f = g.sigmoid(f_raw);
        let o = g.sigmoid(o_raw);
        let cand = g.tanh(g_raw);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o, c_act)?;
        Ok((h_new, c_new))
    }
}

impl<E: Element> ParamOwner<E> for ConvLstm<E> {
    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        with_prefix("gates", self.gates.params())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        with_prefix("gates", self.gates.params_mut())
    }
}

/// Fully connected layer on row vectors: `(1, in) -> (1, out)`.
pub struct Dense<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Clone, Copy)]
pub struct BoundDense {
    weight: Var,
    bias: Var,
    out: usize,
}

impl<E: Element> Dense<E> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: he_uniform::<E>(rng, &[in_dim, out_dim], in_dim).with_grad(),
            bias: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }

    pub fn bind(&self, g: &mut Graph<E>) -> BoundDense {
        BoundDense {
            weight: g.bind(&self.weight),
            bias: g.bind(&self.bias),
            out: self.bias.numel(),
        }
    }

    pub fn read_grads(&mut self, g: &Graph<E>, bound: &BoundDense) {
        g.read_grad_into(bound.weight, &mut self.weight);
        g.read_grad_into(bound.bias, &mut self.bias);
    }
}

impl BoundDense {
    pub fn apply<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        let b = g.reshape(self.bias, vec![1, self.out])?;
        g.add(y, b)
    }
}

impl<E: Element> ParamOwner<E> for Dense<E> {
    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        vec![("weight".to_string(), &self.weight), ("bias".to_string(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        vec![("weight".to_string(), &mut self.weight), ("bias".to_string(), &mut self.bias)]
    }
}
