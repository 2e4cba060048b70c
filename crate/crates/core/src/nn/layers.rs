//! Layer types and their forward/backward kernels.

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvGeom};
use crate::tensor::{gemm, Matrix, Tensor4};
use crate::tucker::{ConvLayerSpec, TuckerFactors};

/// Activation of a conv-type layer, captured after the convolution and
/// before the nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTap {
    pub layer_id: String,
    pub activation: Tensor4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseConv {
    pub spec: ConvLayerSpec,
    pub weight: Tensor4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerConv {
    pub spec: ConvLayerSpec,
    pub factors: TuckerFactors,
}

/// A searched layer: one Tucker-2 branch per candidate rank pair and the
/// selection logits over them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceConv {
    pub spec: ConvLayerSpec,
    pub branches: Vec<TuckerFactors>,
    pub logits: Vec<f64>,
}

impl ChoiceConv {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvgPool {
    pub layer_id: String,
    pub kernel: (usize, usize),
    pub stride: usize,
}

/// Fully-connected layer over the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub layer_id: String,
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(DenseConv),
    Tucker(TuckerConv),
    Choice(ChoiceConv),
    Relu,
    Pool(AvgPool),
    Fc(Linear),
}

impl Layer {
    pub fn layer_id(&self) -> Option<&str> {
        match self {
            Layer::Conv(l) => Some(&l.spec.layer_id),
            Layer::Tucker(l) => Some(&l.spec.layer_id),
            Layer::Choice(l) => Some(&l.spec.layer_id),
            Layer::Pool(l) => Some(&l.layer_id),
            Layer::Fc(l) => Some(&l.layer_id),
            Layer::Relu => None,
        }
    }

    /// Conv-type layers produce feature taps.
    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Tucker(_) | Layer::Choice(_))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_input(x: &Tensor4, channels: usize, layer_id: &str) -> Result<()> {
    if x.shape()[1] != channels {
        return Err(Error::shape(format!(
            "layer `{layer_id}` expects {channels} input channels, got {}",
            x.shape()[1]
        )));
    }
    Ok(())
}

fn geom(spec: &ConvLayerSpec, x: &Tensor4) -> Result<ConvGeom> {
    let [_, c, h, w] = x.shape();
    ConvGeom::new(
        c,
        (h, w),
        spec.out_channels,
        (spec.kernel_h, spec.kernel_w),
        spec.stride,
        spec.padding,
    )
    .ok_or_else(|| Error::shape(format!("layer `{}`: kernel does not fit a {h}x{w} input", spec.layer_id)))
}

/// Dense cross-correlation with the stride and padding of `spec`.
pub fn conv_forward(input: &Tensor4, weight: &Tensor4, spec: &ConvLayerSpec) -> Result<Tensor4> {
    check_input(input, spec.in_channels, &spec.layer_id)?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "layer `{}`: weight {:?} does not match {:?}",
            spec.layer_id,
            weight.shape(),
            spec.weight_shape()
        )));
    }
    Ok(conv::forward(input, weight.data(), &geom(spec, input)?))
}

pub(crate) fn conv_backward(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvLayerSpec,
    grad_out: &Tensor4,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Tensor4>, Option<Vec<f64>>)> {
    let g = geom(spec, input)?;
    Ok(conv::backward(input, weight.data(), &g, grad_out, want_input, want_weight))
}

/// Intermediates of the three-stage factorized convolution.
#[derive(Debug, Clone)]
pub(crate) struct TuckerCache {
    /// After the `r2 × C` channel projection.
    k1: Tensor4,
    /// After the `r1 × r2` spatial convolution.
    k2: Tensor4,
    stage2: ConvGeom,
}

pub(crate) struct TuckerGrads {
    pub core: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

pub(crate) fn tucker_forward_cached(
    x: &Tensor4,
    f: &TuckerFactors,
    spec: &ConvLayerSpec,
) -> Result<(Tensor4, TuckerCache)> {
    check_input(x, spec.in_channels, &spec.layer_id)?;
    f.check_against(spec)?;
    let [_, c, h, w] = x.shape();
    let ranks = f.ranks();
    // stage 1: 1×1 projection of C input channels onto r2
    let g1 = ConvGeom::new(c, (h, w), ranks.r2, (1, 1), 1, 0).expect("pointwise fits");
    let k1 = conv::forward(x, f.m2.data(), &g1);
    // stage 2: spatial convolution by the core, r2 → r1 channels
    let g2 = ConvGeom::new(
        ranks.r2,
        (h, w),
        ranks.r1,
        (spec.kernel_h, spec.kernel_w),
        spec.stride,
        spec.padding,
    )
    .ok_or_else(|| Error::shape(format!("layer `{}`: kernel does not fit a {h}x{w} input", spec.layer_id)))?;
    let k2 = conv::forward(&k1, f.core.data(), &g2);
    // stage 3: 1×1 expansion r1 → F through m1ᵀ
    let g3 = ConvGeom::new(ranks.r1, (g2.oh, g2.ow), spec.out_channels, (1, 1), 1, 0).expect("pointwise fits");
    let y = conv::forward(&k2, f.m1.transpose().data(), &g3);
    Ok((y, TuckerCache { k1, k2, stage2: g2 }))
}

pub(crate) fn tucker_backward(
    x: &Tensor4,
    f: &TuckerFactors,
    spec: &ConvLayerSpec,
    cache: &TuckerCache,
    gy: &Tensor4,
    want_input: bool,
    want_params: bool,
) -> (Option<Tensor4>, Option<TuckerGrads>) {
    let [n, c, h, w] = x.shape();
    let ranks = f.ranks();
    let (r1, r2) = (ranks.r1, ranks.r2);
    let g2 = cache.stage2;
    let out_area = g2.oh * g2.ow;
    let fo = spec.out_channels;

    // stage 3: y_n = m1ᵀ k2_n  ⇒  dk2_n = m1 gy_n,  dm1 += k2_n gy_nᵀ
    let mut dk2 = vec![0.0; n * r1 * out_area];
    let mut dm1 = want_params.then(|| vec![0.0; r1 * fo]);
    for s in 0..n {
        let gys = &gy.data()[s * fo * out_area..(s + 1) * fo * out_area];
        gemm(
            r1,
            fo,
            out_area,
            1.0,
            f.m1.data(),
            false,
            gys,
            false,
            0.0,
            &mut dk2[s * r1 * out_area..(s + 1) * r1 * out_area],
        );
        if let Some(dm1) = dm1.as_mut() {
            let k2s = &cache.k2.data()[s * r1 * out_area..(s + 1) * r1 * out_area];
            gemm(r1, out_area, fo, 1.0, k2s, false, gys, true, 1.0, dm1);
        }
    }
    let dk2 = Tensor4::from_raw([n, r1, g2.oh, g2.ow], dk2);

    // stage 2
    let (dk1, dcore) = conv::backward(&cache.k1, f.core.data(), &g2, &dk2, true, want_params);
    let dk1 = dk1.expect("requested");

    // stage 1: k1_n = m2 x_n  ⇒  dx_n = m2ᵀ dk1_n,  dm2 += dk1_n x_nᵀ
    let g1 = ConvGeom::new(c, (h, w), r2, (1, 1), 1, 0).expect("pointwise fits");
    let (dx, dm2) = conv::backward(x, f.m2.data(), &g1, &dk1, want_input, want_params);

    let grads = if want_params {
        Some(TuckerGrads {
            core: dcore.expect("requested"),
            m1: dm1.expect("requested"),
            m2: dm2.expect("requested"),
        })
    } else {
        None
    };
    (dx, grads)
}

/// Three-stage Tucker-2 convolution: channel projection by `m2`, spatial
/// convolution by the core, channel expansion by `m1ᵀ`.
pub fn tucker2_conv_forward(
    input: &Tensor4,
    factors: &TuckerFactors,
    spec: &ConvLayerSpec,
) -> Result<(Tensor4, FeatureTap)> {
    let (y, _) = tucker_forward_cached(input, factors, spec)?;
    let tap = FeatureTap {
        layer_id: spec.layer_id.clone(),
        activation: y.clone(),
    };
    Ok((y, tap))
}

pub(crate) fn relu_forward(x: &Tensor4) -> Tensor4 {
    Tensor4::from_raw(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

pub(crate) fn relu_backward(y: &Tensor4, gy: &Tensor4) -> Tensor4 {
    Tensor4::from_raw(
        y.shape(),
        y.data()
            .iter()
            .zip(gy.data())
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

impl AvgPool {
    pub(crate) fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let [n, c, h, w] = x.shape();
        let (kh, kw) = self.kernel;
        if h < kh || w < kw {
            return Err(Error::shape(format!("pool `{}` window exceeds {h}x{w}", self.layer_id)));
        }
        let oh = (h - kh) / self.stride + 1;
        let ow = (w - kw) / self.stride + 1;
        let scale = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        for j in 0..kw {
                            acc += src[(oy * self.stride + i) * w + ox * self.stride + j];
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = acc * scale;
                }
            }
        }
        Ok(Tensor4::from_raw([n, c, oh, ow], out))
    }

    pub(crate) fn backward(&self, x_shape: [usize; 4], gy: &Tensor4) -> Tensor4 {
        let [n, c, h, w] = x_shape;
        let [_, _, oh, ow] = gy.shape();
        let (kh, kw) = self.kernel;
        let scale = 1.0 / (kh * kw) as f64;
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy.data()[(plane * oh + oy) * ow + ox] * scale;
                    for i in 0..kh {
                        for j in 0..kw {
                            dst[(oy * self.stride + i) * w + ox * self.stride + j] += g;
                        }
                    }
                }
            }
        }
        Tensor4::from_raw(x_shape, dx)
    }
}

impl Linear {
    pub(crate) fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let n = x.shape()[0];
        let inputs = x.len() / n;
        if inputs != self.weight.cols() {
            return Err(Error::shape(format!(
                "fc `{}` expects {} inputs, got {inputs}",
                self.layer_id,
                self.weight.cols()
            )));
        }
        let outputs = self.weight.rows();
        let mut out = vec![0.0; n * outputs];
        for row in out.chunks_mut(outputs) {
            row.copy_from_slice(&self.bias);
        }
        // out = x · Wᵀ + b
        gemm(n, inputs, outputs, 1.0, x.data(), false, self.weight.data(), true, 1.0, &mut out);
        Ok(Tensor4::from_raw([n, outputs, 1, 1], out))
    }

    /// `(dx, dW, db)`
    pub(crate) fn backward(&self, x: &Tensor4, gy: &Tensor4, want_params: bool) -> (Tensor4, Option<(Vec<f64>, Vec<f64>)>) {
        let n = x.shape()[0];
        let inputs = self.weight.cols();
        let outputs = self.weight.rows();
        let mut dx = vec![0.0; n * inputs];
        gemm(n, outputs, inputs, 1.0, gy.data(), false, self.weight.data(), false, 0.0, &mut dx);
        let params = want_params.then(|| {
            let mut dw = vec![0.0; outputs * inputs];
            gemm(outputs, n, inputs, 1.0, gy.data(), true, x.data(), false, 0.0, &mut dw);
            let mut db = vec![0.0; outputs];
            for row in gy.data().chunks(outputs) {
                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
            }
            (dw, db)
        });
        (Tensor4::from_raw(x.shape(), dx), params)
    }
}
