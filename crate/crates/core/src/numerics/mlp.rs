//! Multi-layer perceptrons with hand-derived backpropagation and optional
//! low-rank (LoRA) adapters on every linear layer.
//!
//! Inputs are either a single vector `[fan_in]` or a batch `[n, fan_in]`;
//! the output keeps the same leading layout.

use serde::{Deserialize, Serialize};

use super::rng::{uniform, Rng};
use super::tensor::{axpy, dot, Tensor};
use crate::error::{arg_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which parameter groups an optimizer or serializer should see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Base weights, biases and any adapters.
    All,
    /// Base weights and biases only.
    Base,
    /// Adapter matrices only.
    Adapters,
}

impl ParamScope {
    fn base(self) -> bool {
        matches!(self, ParamScope::All | ParamScope::Base)
    }
    fn adapters(self) -> bool {
        matches!(self, ParamScope::All | ParamScope::Adapters)
    }
}

/// Low-rank additive update `(alpha / r) * B * A` on a frozen weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `[rank, fan_in]`
    pub a: Tensor,
    /// `[fan_out, rank]`
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[1] {
            return dim_err(format!("lora A {:?} / B {:?}", a.shape(), b.shape()));
        }
        let rank = a.shape()[0];
        if rank == 0 {
            return arg_err("lora rank must be >= 1");
        }
        Ok(Self { a, b, alpha })
    }

    /// Uniform-initialised `A`, zero `B`: the adapted layer starts identical
    /// to the base layer.
    pub fn init(fan_in: usize, fan_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > fan_in.min(fan_out) {
            return arg_err(format!(
                "lora rank {rank} outside [1, {}]",
                fan_in.min(fan_out)
            ));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let a: Vec<f64> = (0..rank * fan_in).map(|_| uniform(rng, -bound, bound)).collect();
        Self::new(
            Tensor::new(vec![rank, fan_in], a)?,
            Tensor::zeros(&[fan_out, rank]),
            alpha,
        )
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Dense `(alpha / r) * B * A`.
    pub fn delta(&self) -> Tensor {
        self.b
            .matmul(&self.a)
            .expect("adapter factors chain")
            .scale(self.scale())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[fan_out, fan_in]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.shape()[0]] {
            return dim_err(format!(
                "linear weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self {
            weight,
            bias,
            lora: None,
        })
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| uniform(rng, -bound, bound)).collect();
        let b = (0..fan_out).map(|_| uniform(rng, -bound, bound)).collect();
        Self {
            weight: Tensor::new(vec![fan_out, fan_in], w).expect("shape"),
            bias: Tensor::from_vec(b),
            lora: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_adapter(&self, adapter: &LoraAdapter) -> Result<()> {
        if adapter.a.shape()[1] != self.fan_in() || adapter.b.shape()[0] != self.fan_out() {
            return dim_err(format!(
                "adapter A {:?} / B {:?} on layer {:?}",
                adapter.a.shape(),
                adapter.b.shape(),
                self.weight.shape()
            ));
        }
        Ok(())
    }

    /// Affine map of `n` rows; fills `lora_hidden` with `A x` when an
    /// adapter is attached.
    fn forward_rows(&self, x: &[f64], n: usize, out: &mut Vec<f64>, lora_hidden: &mut Vec<f64>) {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        out.clear();
        out.resize(n * fo, 0.0);
        let w = self.weight.data();
        let b = self.bias.data();
        for r in 0..n {
            let xr = &x[r * fi..(r + 1) * fi];
            let orow = &mut out[r * fo..(r + 1) * fo];
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = b[o] + dot(&w[o * fi..(o + 1) * fi], xr);
            }
        }
        lora_hidden.clear();
        if let Some(ad) = &self.lora {
            let rank = ad.rank();
            let s = ad.scale();
            lora_hidden.resize(n * rank, 0.0);
            let (a, bm) = (ad.a.data(), ad.b.data());
            for r in 0..n {
                let xr = &x[r * fi..(r + 1) * fi];
                let hrow = &mut lora_hidden[r * rank..(r + 1) * rank];
                for (k, h) in hrow.iter_mut().enumerate() {
                    *h = dot(&a[k * fi..(k + 1) * fi], xr);
                }
                let orow = &mut out[r * fo..(r + 1) * fo];
                for (o, slot) in orow.iter_mut().enumerate() {
                    *slot += s * dot(&bm[o * rank..(o + 1) * rank], hrow);
                }
            }
        }
    }
}

/// `(W + (alpha/r) B A) x + b` for an adapter that need not be attached.
pub fn lora_forward(layer: &Linear, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    layer.check_adapter(adapter)?;
    let mut with = layer.clone();
    with.lora = Some(adapter.clone());
    Mlp::new(vec![with], Activation::Identity)?.forward(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Intermediate values retained by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    n: usize,
    leading: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    lora_hidden: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lora_a: Option<Tensor>,
    pub lora_b: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrads>,
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        Self {
            layers: m
                .layers
                .iter()
                .map(|l| LinearGrads {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                    lora_a: l.lora.as_ref().map(|a| Tensor::zeros(a.a.shape())),
                    lora_b: l.lora.as_ref().map(|a| Tensor::zeros(a.b.shape())),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, 1.0)?;
            a.bias.add_scaled(&b.bias, 1.0)?;
            if let (Some(x), Some(y)) = (a.lora_a.as_mut(), b.lora_a.as_ref()) {
                x.add_scaled(y, 1.0)?;
            }
            if let (Some(x), Some(y)) = (a.lora_b.as_mut(), b.lora_b.as_ref()) {
                x.add_scaled(y, 1.0)?;
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight = l.weight.scale(s);
            l.bias = l.bias.scale(s);
            l.lora_a = l.lora_a.as_ref().map(|t| t.scale(s));
            l.lora_b = l.lora_b.as_ref().map(|t| t.scale(s));
        }
    }

    /// Gradients in the same order as [`Mlp::params_mut`].
    pub fn into_tensors(self, scope: ParamScope) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in self.layers {
            if scope.base() {
                out.push(l.weight);
                out.push(l.bias);
            }
            if scope.adapters() {
                out.extend(l.lora_a);
                out.extend(l.lora_b);
            }
        }
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return arg_err("mlp needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return dim_err(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].fan_out(),
                    pair[1].fan_in()
                ));
            }
        }
        for l in &layers {
            if let Some(ad) = &l.lora {
                l.check_adapter(ad)?;
            }
        }
        Ok(Self { layers, activation })
    }

    /// Randomly initialised network with layer widths `dims`.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return arg_err("mlp dims need input and output widths");
        }
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self::new(layers, activation)
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(Tensor::zeros(&[w[1], w[0]]), Tensor::zeros(&[w[1]])))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation)
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn fan_out(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }

    /// Attaches a fresh zero-`B` adapter of `rank` to every layer.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut Rng) -> Result<()> {
        for l in &mut self.layers {
            l.lora = Some(LoraAdapter::init(l.fan_in(), l.fan_out(), rank, alpha, rng)?);
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and removes it.
    pub fn merge_lora(&mut self) {
        for l in &mut self.layers {
            if let Some(ad) = l.lora.take() {
                l.weight
                    .add_scaled(&ad.delta(), 1.0)
                    .expect("adapter shape checked on attach");
            }
        }
    }

    fn split_input(&self, x: &Tensor) -> Result<(usize, Vec<usize>)> {
        if x.ndim() == 0 || x.cols() != self.fan_in() {
            return dim_err(format!(
                "input shape {:?}, expected last dim {}",
                x.shape(),
                self.fan_in()
            ));
        }
        let leading = x.shape()[..x.ndim() - 1].to_vec();
        Ok((x.rows(), leading))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let (n, leading) = self.split_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut lora_hidden = Vec::with_capacity(self.layers.len());
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            let mut lh = Vec::new();
            layer.forward_rows(&h, n, &mut out, &mut lh);
            let next = if i < last {
                out.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                out.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(out);
            lora_hidden.push(lh);
        }
        let mut shape = leading.clone();
        shape.push(self.fan_out());
        let y = Tensor::new(shape, h)?;
        Ok((
            y,
            MlpCache {
                n,
                leading,
                inputs,
                pre,
                lora_hidden,
            },
        ))
    }

    /// Gradients of `<upstream, forward(x)>` with respect to every parameter
    /// and to the input.
    pub fn backward(&self, cache: &MlpCache, upstream: &Tensor) -> Result<(MlpGrads, Tensor)> {
        let (grads, dx) = self.backprop(cache, upstream, true)?;
        Ok((grads.expect("requested"), dx))
    }

    fn backprop(
        &self,
        cache: &MlpCache,
        upstream: &Tensor,
        want_params: bool,
    ) -> Result<(Option<MlpGrads>, Tensor)> {
        let n = cache.n;
        if upstream.len() != n * self.fan_out() || upstream.cols() != self.fan_out() {
            return dim_err(format!(
                "upstream shape {:?}, expected {} rows of {}",
                upstream.shape(),
                n,
                self.fan_out()
            ));
        }
        let mut grads = want_params.then(|| MlpGrads::zeros_like(self));
        let mut g = upstream.data().to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (fi, fo) = (layer.fan_in(), layer.fan_out());
            let h = &cache.inputs[li];
            let w = layer.weight.data();
            let mut dh = vec![0.0; n * fi];
            if let Some(gr) = grads.as_mut() {
                let lg = &mut gr.layers[li];
                let dw = lg.weight.data_mut();
                for r in 0..n {
                    let hr = &h[r * fi..(r + 1) * fi];
                    for o in 0..fo {
                        let go = g[r * fo + o];
                        if go != 0.0 {
                            axpy(&mut dw[o * fi..(o + 1) * fi], go, hr);
                        }
                    }
                }
                let db = lg.bias.data_mut();
                for r in 0..n {
                    for o in 0..fo {
                        db[o] += g[r * fo + o];
                    }
                }
            }
            for r in 0..n {
                let dhr = &mut dh[r * fi..(r + 1) * fi];
                for o in 0..fo {
                    let go = g[r * fo + o];
                    if go != 0.0 {
                        axpy(dhr, go, &w[o * fi..(o + 1) * fi]);
                    }
                }
            }
            if let Some(ad) = &layer.lora {
                let rank = ad.rank();
                let s = ad.scale();
                let u = &cache.lora_hidden[li];
                let (a, bm) = (ad.a.data(), ad.b.data());
                // gu = s * B^T g, per row
                let mut gu = vec![0.0; n * rank];
                for r in 0..n {
                    let gur = &mut gu[r * rank..(r + 1) * rank];
                    for o in 0..fo {
                        let go = g[r * fo + o];
                        if go != 0.0 {
                            axpy(gur, s * go, &bm[o * rank..(o + 1) * rank]);
                        }
                    }
                }
                if let Some(gr) = grads.as_mut() {
                    let lg = &mut gr.layers[li];
                    let db_ = lg.lora_b.as_mut().expect("adapter grads allocated").data_mut();
                    for r in 0..n {
                        let ur = &u[r * rank..(r + 1) * rank];
                        for o in 0..fo {
                            let go = g[r * fo + o];
                            if go != 0.0 {
                                axpy(&mut db_[o * rank..(o + 1) * rank], s * go, ur);
                            }
                        }
                    }
                    let da = lg.lora_a.as_mut().expect("adapter grads allocated").data_mut();
                    for r in 0..n {
                        let hr = &h[r * fi..(r + 1) * fi];
                        for k in 0..rank {
                            let gk = gu[r * rank + k];
                            if gk != 0.0 {
                                axpy(&mut da[k * fi..(k + 1) * fi], gk, hr);
                            }
                        }
                    }
                }
                for r in 0..n {
                    let dhr = &mut dh[r * fi..(r + 1) * fi];
                    for k in 0..rank {
                        let gk = gu[r * rank + k];
                        if gk != 0.0 {
                            axpy(dhr, gk, &a[k * fi..(k + 1) * fi]);
                        }
                    }
                }
            }
            if li > 0 {
                let pre = &cache.pre[li - 1];
                for (d, &p) in dh.iter_mut().zip(pre) {
                    *d *= self.activation.derivative(p);
                }
            }
            g = dh;
        }
        let mut shape = cache.leading.clone();
        shape.push(self.fan_in());
        Ok((grads, Tensor::new(shape, g)?))
    }

    /// `v^T J(x)`: the input gradient of `<v, forward(x)>`.
    pub fn input_vjp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (_, cache) = self.forward_cached(x)?;
        Ok(self.backprop(&cache, v, false)?.1)
    }

    /// Trainable tensors selected by `scope`, in a stable order.
    pub fn params_mut(&mut self, scope: ParamScope) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if scope.base() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            if scope.adapters() {
                if let Some(ad) = l.lora.as_mut() {
                    out.push(&mut ad.a);
                    out.push(&mut ad.b);
                }
            }
        }
        out
    }

    pub fn params(&self, scope: ParamScope) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            if scope.base() {
                out.push(&l.weight);
                out.push(&l.bias);
            }
            if scope.adapters() {
                if let Some(ad) = l.lora.as_ref() {
                    out.push(&ad.a);
                    out.push(&ad.b);
                }
            }
        }
        out
    }

    /// `(name, tensor)` pairs for serialization, names rooted at `prefix`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
            if let Some(ad) = &l.lora {
                out.push((format!("{prefix}.{i}.lora_a"), &ad.a));
                out.push((format!("{prefix}.{i}.lora_b"), &ad.b));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            if let Some(ad) = l.lora.as_mut() {
                out.push((format!("{prefix}.{i}.lora_a"), &mut ad.a));
                out.push((format!("{prefix}.{i}.lora_b"), &mut ad.b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params(ParamScope::All).iter().map(|t| t.len()).sum()
    }
}

pub fn mlp_forward(m: &Mlp, x: &Tensor) -> Result<Tensor> {
    m.forward(x)
}

pub fn mlp_backward(m: &Mlp, x: &Tensor, upstream: &Tensor) -> Result<(MlpGrads, Tensor)> {
    let (_, cache) = m.forward_cached(x)?;
    m.backward(&cache, upstream)
}

pub fn input_vjp(m: &Mlp, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    m.input_vjp(x, v)
}
