//! Sequential network with reverse-mode differentiation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::netspec::{LayerKind, NetworkSpec};
use crate::nn::layers::{
    conv_backward, conv_forward, relu_backward, relu_forward, tucker_backward, tucker_forward_cached,
    AvgPool, ChoiceConv, DenseConv, FeatureTap, Layer, Linear, TuckerCache, TuckerConv,
};
use crate::tensor::{Matrix, Tensor4};
use crate::tucker::{ConvLayerSpec, TuckerFactors};

/// How searched layers are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Route<'a> {
    /// One branch per searched layer, indexed in layer order.
    Path(&'a [usize]),
    /// Probability-weighted sum of every branch.
    Expectation,
}

enum Cache {
    None,
    Tucker(TuckerCache),
    PathChoice {
        branch: usize,
        cache: TuckerCache,
    },
    Mixture {
        probs: Vec<f64>,
        outputs: Vec<Tensor4>,
        caches: Vec<TuckerCache>,
    },
}

/// Activations and intermediates retained for the backward pass.
pub struct ForwardPass {
    /// `acts[i]` is the input of layer `i`; the last entry is the logits.
    acts: Vec<Tensor4>,
    caches: Vec<Cache>,
}

impl ForwardPass {
    /// `(N, classes, 1, 1)`
    pub fn logits(&self) -> &Tensor4 {
        self.acts.last().expect("non-empty")
    }

    pub fn output_of(&self, layer: usize) -> &Tensor4 {
        &self.acts[layer + 1]
    }
}

/// Parameter gradients by name, plus selection-logit gradients by layer id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<String, Vec<f64>>,
    pub logits: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    pub params: bool,
    pub logits: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            params: true,
            logits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

fn dense_spec(l: &crate::netspec::LayerRecord) -> ConvLayerSpec {
    l.conv_spec().expect("conv record")
}

impl Network {
    /// Dense network with He-normal weights.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let last = spec.layers.len() - 1;
        for (i, l) in spec.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv => {
                    let s = dense_spec(l);
                    let fan_in = (s.in_channels * s.kernel_area()) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    let weight = Tensor4::from_fn(s.weight_shape(), |_| dist.sample(&mut rng));
                    layers.push(Layer::Conv(DenseConv { spec: s, weight }));
                    layers.push(Layer::Relu);
                }
                LayerKind::Pool => layers.push(Layer::Pool(AvgPool {
                    layer_id: l.layer_id.clone(),
                    kernel: (l.kernel_h, l.kernel_w),
                    stride: l.stride,
                })),
                LayerKind::Fc => {
                    let std = (if i == last { 1.0 } else { 2.0 } / l.in_channels as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("valid std");
                    let weight = Matrix::from_fn(l.out_channels, l.in_channels, |_, _| dist.sample(&mut rng));
                    layers.push(Layer::Fc(Linear {
                        layer_id: l.layer_id.clone(),
                        weight,
                        bias: vec![0.0; l.out_channels],
                    }));
                    if i != last {
                        layers.push(Layer::Relu);
                    }
                }
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn find(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.layer_id() == Some(layer_id))
    }

    pub fn choice_layers(&self) -> impl Iterator<Item = &ChoiceConv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Choice(c) => Some(c),
            _ => None,
        })
    }

    pub fn choice_layers_mut(&mut self) -> impl Iterator<Item = &mut ChoiceConv> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Choice(c) => Some(c),
            _ => None,
        })
    }

    pub fn num_choice_layers(&self) -> usize {
        self.choice_layers().count()
    }

    /// Trainable parameter count, counting every branch of searched layers.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weight.len(),
                Layer::Tucker(t) => t.factors.num_params(),
                Layer::Choice(c) => c.branches.iter().map(|b| b.num_params()).sum(),
                Layer::Fc(f) => f.weight.data().len() + f.bias.len(),
                Layer::Relu | Layer::Pool(_) => 0,
            })
            .sum()
    }

    pub fn forward(&self, x: &Tensor4, route: Route<'_>) -> Result<ForwardPass> {
        let (c, h, w) = self.spec.input;
        let [_, xc, xh, xw] = x.shape();
        if (xc, xh, xw) != (c, h, w) {
            return Err(Error::shape(format!(
                "network expects {c}x{h}x{w} inputs, got {xc}x{xh}x{xw}"
            )));
        }
        if let Route::Path(p) = route {
            if p.len() != self.num_choice_layers() {
                return Err(Error::arg(format!(
                    "path has {} entries for {} searched layers",
                    p.len(),
                    self.num_choice_layers()
                )));
            }
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        let mut choice_idx = 0;
        for layer in &self.layers {
            let input = acts.last().expect("non-empty");
            let (out, cache) = match layer {
                Layer::Conv(l) => (conv_forward(input, &l.weight, &l.spec)?, Cache::None),
                Layer::Tucker(l) => {
                    let (y, c) = tucker_forward_cached(input, &l.factors, &l.spec)?;
                    (y, Cache::Tucker(c))
                }
                Layer::Choice(l) => {
                    let out = match route {
                        Route::Path(p) => {
                            let branch = p[choice_idx];
                            let f = l.branches.get(branch).ok_or_else(|| {
                                Error::arg(format!(
                                    "layer `{}` has {} branches, path asks for {branch}",
                                    l.spec.layer_id,
                                    l.branches.len()
                                ))
                            })?;
                            let (y, cache) = tucker_forward_cached(input, f, &l.spec)?;
                            (y, Cache::PathChoice { branch, cache })
                        }
                        Route::Expectation => {
                            let probs = l.probabilities();
                            let mut outputs = Vec::with_capacity(l.branches.len());
                            let mut caches = Vec::with_capacity(l.branches.len());
                            let mut mix: Option<Vec<f64>> = None;
                            for (f, &p) in l.branches.iter().zip(&probs) {
                                let (y, c) = tucker_forward_cached(input, f, &l.spec)?;
                                let m = mix.get_or_insert_with(|| vec![0.0; y.len()]);
                                m.iter_mut().zip(y.data()).for_each(|(a, b)| *a += p * b);
                                outputs.push(y);
                                caches.push(c);
                            }
                            let shape = outputs[0].shape();
                            (
                                Tensor4::from_raw(shape, mix.expect("at least one branch")),
                                Cache::Mixture {
                                    probs,
                                    outputs,
                                    caches,
                                },
                            )
                        }
                    };
                    choice_idx += 1;
                    out
                }
                Layer::Relu => (relu_forward(input), Cache::None),
                Layer::Pool(p) => (p.forward(input)?, Cache::None),
                Layer::Fc(f) => (f.forward(input)?, Cache::None),
            };
            acts.push(out);
            caches.push(cache);
        }
        Ok(ForwardPass { acts, caches })
    }

    /// Post-convolution activations of every conv-type layer.
    pub fn taps(&self, pass: &ForwardPass) -> Vec<FeatureTap> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, l)| FeatureTap {
                layer_id: l.layer_id().expect("conv has id").to_string(),
                activation: pass.output_of(i).clone(),
            })
            .collect()
    }

    /// Reverse pass. `tap_grads` adds extra gradient at the output of the
    /// named conv-type layers.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_logits: &Tensor4,
        tap_grads: &BTreeMap<String, Tensor4>,
        opts: BackwardOptions,
    ) -> Result<Gradients> {
        if pass.caches.len() != self.layers.len() {
            return Err(Error::State("forward pass does not belong to this network".into()));
        }
        if grad_logits.shape() != pass.logits().shape() {
            return Err(Error::shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                grad_logits.shape(),
                pass.logits().shape()
            )));
        }
        let mut grads = Gradients::default();
        let mut g = grad_logits.clone();
        // the first layer never needs an input gradient
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(extra) = layer.layer_id().and_then(|id| tap_grads.get(id)) {
                if extra.shape() != g.shape() {
                    return Err(Error::shape(format!(
                        "tap gradient for `{}` has shape {:?}, expected {:?}",
                        layer.layer_id().unwrap_or_default(),
                        extra.shape(),
                        g.shape()
                    )));
                }
                g.data_mut().iter_mut().zip(extra.data()).for_each(|(a, b)| *a += b);
            }
            let x = &pass.acts[i];
            let want_input = i > 0;
            let next = match (layer, &pass.caches[i]) {
                (Layer::Conv(l), _) => {
                    let (dx, dw) = conv_backward(x, &l.weight, &l.spec, &g, want_input, opts.params)?;
                    if let Some(dw) = dw {
                        grads.params.insert(format!("{}.weight", l.spec.layer_id), dw);
                    }
                    dx
                }
                (Layer::Tucker(l), Cache::Tucker(cache)) => {
                    let (dx, tg) = tucker_backward(x, &l.factors, &l.spec, cache, &g, want_input, opts.params);
                    if let Some(tg) = tg {
                        insert_tucker(&mut grads, &l.spec.layer_id, tg);
                    }
                    dx
                }
                (Layer::Choice(l), Cache::PathChoice { branch, cache }) => {
                    let (dx, tg) =
                        tucker_backward(x, &l.branches[*branch], &l.spec, cache, &g, want_input, opts.params);
                    if let Some(tg) = tg {
                        insert_tucker(&mut grads, &format!("{}.b{branch}", l.spec.layer_id), tg);
                    }
                    dx
                }
                (
                    Layer::Choice(l),
                    Cache::Mixture {
                        probs,
                        outputs,
                        caches,
                    },
                ) => {
                    if opts.logits {
                        let inner: Vec<f64> = outputs
                            .iter()
                            .map(|y| y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                            .collect();
                        let mean: f64 = probs.iter().zip(&inner).map(|(p, v)| p * v).sum();
                        let dlogits = probs.iter().zip(&inner).map(|(p, v)| p * (v - mean)).collect();
                        grads.logits.insert(l.spec.layer_id.clone(), dlogits);
                    }
                    let mut dx_total: Option<Vec<f64>> = None;
                    for (j, (f, cache)) in l.branches.iter().zip(caches).enumerate() {
                        let p = probs[j];
                        let scaled = Tensor4::from_raw(g.shape(), g.data().iter().map(|v| v * p).collect());
                        let (dx, tg) = tucker_backward(x, f, &l.spec, cache, &scaled, want_input, opts.params);
                        if let Some(tg) = tg {
                            insert_tucker(&mut grads, &format!("{}.b{j}", l.spec.layer_id), tg);
                        }
                        if let Some(dx) = dx {
                            let acc = dx_total.get_or_insert_with(|| vec![0.0; dx.len()]);
                            acc.iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
                        }
                    }
                    dx_total.map(|d| Tensor4::from_raw(x.shape(), d))
                }
                (Layer::Relu, _) => Some(relu_backward(pass.output_of(i), &g)),
                (Layer::Pool(p), _) => Some(p.backward(x.shape(), &g)),
                (Layer::Fc(f), _) => {
                    let (dx, params) = f.backward(x, &g, opts.params);
                    if let Some((dw, db)) = params {
                        grads.params.insert(format!("{}.weight", f.layer_id), dw);
                        grads.params.insert(format!("{}.bias", f.layer_id), db);
                    }
                    Some(dx)
                }
                _ => return Err(Error::State("cache does not match layer".into())),
            };
            match next {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Mutable views of every trainable parameter, by name.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => out.push((format!("{}.weight", l.spec.layer_id), l.weight.data_mut())),
                Layer::Tucker(l) => {
                    let id = &l.spec.layer_id;
                    out.push((format!("{id}.core"), l.factors.core.data_mut()));
                    out.push((format!("{id}.m1"), l.factors.m1.data_mut()));
                    out.push((format!("{id}.m2"), l.factors.m2.data_mut()));
                }
                Layer::Choice(l) => {
                    let id = &l.spec.layer_id;
                    for (j, f) in l.branches.iter_mut().enumerate() {
                        out.push((format!("{id}.b{j}.core"), f.core.data_mut()));
                        out.push((format!("{id}.b{j}.m1"), f.m1.data_mut()));
                        out.push((format!("{id}.b{j}.m2"), f.m2.data_mut()));
                    }
                }
                Layer::Fc(f) => {
                    out.push((format!("{}.weight", f.layer_id), f.weight.data_mut()));
                    out.push((format!("{}.bias", f.layer_id), &mut f.bias));
                }
                Layer::Relu | Layer::Pool(_) => {}
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.clone().params_mut().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params_mut().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Replaces dense layers by Tucker layers where `factors` has an entry.
    pub fn with_tucker_layers(&self, factors: &BTreeMap<String, TuckerFactors>) -> Result<Network> {
        let mut net = self.clone();
        for layer in &mut net.layers {
            if let Layer::Conv(l) = layer {
                if let Some(f) = factors.get(&l.spec.layer_id) {
                    f.check_against(&l.spec)?;
                    *layer = Layer::Tucker(TuckerConv {
                        spec: l.spec.clone(),
                        factors: f.clone(),
                    });
                }
            }
        }
        Ok(net)
    }

    /// Dense weight of a conv layer.
    pub fn dense_weight(&self, layer_id: &str) -> Option<&Tensor4> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv(c) if c.spec.layer_id == layer_id => Some(&c.weight),
            _ => None,
        })
    }
}

fn insert_tucker(grads: &mut Gradients, prefix: &str, tg: crate::nn::layers::TuckerGrads) {
    grads.params.insert(format!("{prefix}.core"), tg.core);
    grads.params.insert(format!("{prefix}.m1"), tg.m1);
    grads.params.insert(format!("{prefix}.m2"), tg.m2);
}

fn tensor4(ckpt: &Checkpoint, name: &str) -> Result<Tensor4> {
    let (dims, data) = ckpt.f64s(name)?;
    let shape: [usize; 4] = dims
        .try_into()
        .map_err(|_| Error::data(format!("tensor `{name}` must have rank 4")))?;
    Tensor4::new(shape, data.to_vec())
}

fn matrix(ckpt: &Checkpoint, name: &str) -> Result<Matrix> {
    let (dims, data) = ckpt.f64s(name)?;
    match dims {
        [r, c] => Matrix::new(*r, *c, data.to_vec()),
        _ => Err(Error::data(format!("tensor `{name}` must have rank 2"))),
    }
}

fn factors(ckpt: &Checkpoint, prefix: &str) -> Result<TuckerFactors> {
    TuckerFactors::new(
        tensor4(ckpt, &format!("{prefix}.core"))?,
        matrix(ckpt, &format!("{prefix}.m1"))?,
        matrix(ckpt, &format!("{prefix}.m2"))?,
    )
}

fn put_factors(ckpt: &mut Checkpoint, prefix: &str, f: &TuckerFactors) {
    ckpt.insert(format!("{prefix}.core"), NamedTensor::f64(&f.core.shape(), f.core.data().to_vec()));
    ckpt.insert(format!("{prefix}.m1"), NamedTensor::f64(&[f.m1.rows(), f.m1.cols()], f.m1.data().to_vec()));
    ckpt.insert(format!("{prefix}.m2"), NamedTensor::f64(&[f.m2.rows(), f.m2.cols()], f.m2.data().to_vec()));
}

impl Network {
    /// Stores the architecture text and every parameter (and selection
    /// logits as `{id}.logits`).
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("meta/network", NamedTensor::bytes(self.spec.to_text().into_bytes()));
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => ckpt.insert(
                    format!("{}.weight", l.spec.layer_id),
                    NamedTensor::f64(&l.weight.shape(), l.weight.data().to_vec()),
                ),
                Layer::Tucker(l) => put_factors(ckpt, &l.spec.layer_id, &l.factors),
                Layer::Choice(l) => {
                    for (j, f) in l.branches.iter().enumerate() {
                        put_factors(ckpt, &format!("{}.b{j}", l.spec.layer_id), f);
                    }
                    ckpt.insert(
                        format!("{}.logits", l.spec.layer_id),
                        NamedTensor::f64(&[l.logits.len()], l.logits.clone()),
                    );
                }
                Layer::Fc(f) => {
                    ckpt.insert(
                        format!("{}.weight", f.layer_id),
                        NamedTensor::f64(&[f.weight.rows(), f.weight.cols()], f.weight.data().to_vec()),
                    );
                    ckpt.insert(format!("{}.bias", f.layer_id), NamedTensor::f64(&[f.bias.len()], f.bias.clone()));
                }
                Layer::Relu | Layer::Pool(_) => {}
            }
        }
    }

    /// Rebuilds a network written by [`Network::write_to`]. Conv layers come
    /// back dense, Tucker or searched depending on which tensors are present.
    pub fn read_from(ckpt: &Checkpoint) -> Result<Network> {
        let spec = NetworkSpec::parse(ckpt.text("meta/network")?, "checkpoint:meta/network")?;
        let mut net = Network::init(spec, 0)?;
        for layer in &mut net.layers {
            match layer {
                Layer::Conv(l) => {
                    let id = l.spec.layer_id.clone();
                    let weight_name = format!("{id}.weight");
                    if ckpt.tensors.contains_key(&weight_name) {
                        let w = tensor4(ckpt, &weight_name)?;
                        if w.shape() != l.spec.weight_shape() {
                            return Err(Error::data(format!("`{weight_name}` has shape {:?}", w.shape())));
                        }
                        l.weight = w;
                    } else if ckpt.tensors.contains_key(&format!("{id}.core")) {
                        let f = factors(ckpt, &id)?;
                        f.check_against(&l.spec).map_err(|e| Error::data(e.to_string()))?;
                        *layer = Layer::Tucker(TuckerConv {
                            spec: l.spec.clone(),
                            factors: f,
                        });
                    } else {
                        let mut branches = Vec::new();
                        while ckpt.tensors.contains_key(&format!("{id}.b{}.core", branches.len())) {
                            let f = factors(ckpt, &format!("{id}.b{}", branches.len()))?;
                            f.check_against(&l.spec).map_err(|e| Error::data(e.to_string()))?;
                            branches.push(f);
                        }
                        if branches.is_empty() {
                            return Err(Error::data(format!("checkpoint has no weights for layer `{id}`")));
                        }
                        let (_, logits) = ckpt.f64s(&format!("{id}.logits"))?;
                        if logits.len() != branches.len() {
                            return Err(Error::data(format!(
                                "layer `{id}`: {} logits for {} branches",
                                logits.len(),
                                branches.len()
                            )));
                        }
                        *layer = Layer::Choice(ChoiceConv {
                            spec: l.spec.clone(),
                            branches,
                            logits: logits.to_vec(),
                        });
                    }
                }
                Layer::Fc(f) => {
                    let w = matrix(ckpt, &format!("{}.weight", f.layer_id))?;
                    let (_, b) = ckpt.f64s(&format!("{}.bias", f.layer_id))?;
                    if (w.rows(), w.cols()) != (f.weight.rows(), f.weight.cols()) || b.len() != f.bias.len() {
                        return Err(Error::data(format!("layer `{}` has mismatched head shapes", f.layer_id)));
                    }
                    f.weight = w;
                    f.bias = b.to_vec();
                }
                _ => {}
            }
        }
        Ok(net)
    }
}
