//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankforge::netspec::NetworkSpec;
use rankforge::nn::{FeatureTap, Network};
use rankforge::{ConvLayerSpec, Matrix, Tensor4, TuckerFactors};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rand_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rand_factors(f: usize, c: usize, r1: usize, r2: usize, k: (usize, usize), r: &mut ChaCha8Rng) -> TuckerFactors {
    TuckerFactors::new(
        rand_tensor([r1, r2, k.0, k.1], r),
        rand_matrix(r1, f, r),
        rand_matrix(r2, c, r),
    )
    .unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_fro(a: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(reference).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Mode-n unfolding with columns walking the other axes in ascending
/// order, last one fastest.
pub fn naive_unfold(t: &Tensor4, mode: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let rest: Vec<usize> = (0..4).filter(|&a| a != mode).collect();
    let mut rows = vec![Vec::new(); s[mode]];
    for (row, out) in rows.iter_mut().enumerate() {
        for a in 0..s[rest[0]] {
            for b in 0..s[rest[1]] {
                for c in 0..s[rest[2]] {
                    let mut idx = [0; 4];
                    idx[mode] = row;
                    idx[rest[0]] = a;
                    idx[rest[1]] = b;
                    idx[rest[2]] = c;
                    out.push(t.get(idx));
                }
            }
        }
    }
    rows
}

/// `out[.., j, ..] = Σ_i m[j][i] · t[.., i, ..]` along `mode`.
pub fn naive_mode_product(t: &Tensor4, m: &Matrix, mode: usize) -> Tensor4 {
    let mut shape = t.shape();
    shape[mode] = m.rows();
    Tensor4::from_fn(shape, |idx| {
        let mut acc = 0.0;
        for i in 0..m.cols() {
            let mut src = idx;
            src[mode] = i;
            acc += m.get(idx[mode], i) * t.get(src);
        }
        acc
    })
}

/// `W(f,c,i,j) = Σ_{a,b} core(a,b,i,j) · m1(a,f) · m2(b,c)`.
pub fn naive_reconstruct(fac: &TuckerFactors) -> Tensor4 {
    let [r1, r2, k1, k2] = fac.core.shape();
    let (f, c) = (fac.m1.cols(), fac.m2.cols());
    Tensor4::from_fn([f, c, k1, k2], |[fi, ci, i, j]| {
        let mut acc = 0.0;
        for a in 0..r1 {
            for b in 0..r2 {
                acc += fac.core.get([a, b, i, j]) * fac.m1.get(a, fi) * fac.m2.get(b, ci);
            }
        }
        acc
    })
}

/// Direct cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, stride: usize, pad: usize) -> Tensor4 {
    let [n, c, h, wd] = x.shape();
    let [f, c2, k1, k2] = w.shape();
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - k1) / stride + 1;
    let ow = (wd + 2 * pad - k2) / stride + 1;
    Tensor4::from_fn([n, f, oh, ow], |[b, fo, y, xo]| {
        let mut acc = 0.0;
        for ci in 0..c {
            for i in 0..k1 {
                for j in 0..k2 {
                    let yy = (y * stride + i) as isize - pad as isize;
                    let xx = (xo * stride + j) as isize - pad as isize;
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                        acc += x.get([b, ci, yy as usize, xx as usize]) * w.get([fo, ci, i, j]);
                    }
                }
            }
        }
        acc
    })
}

/// Sum over layers of the mean squared difference between paired taps.
pub fn naive_approach(dec: &[FeatureTap], orig: &[FeatureTap]) -> f64 {
    let mut total = 0.0;
    for d in dec {
        let o = orig.iter().find(|o| o.layer_id == d.layer_id).unwrap();
        let n = d.activation.len() as f64;
        let mut s = 0.0;
        for (a, b) in d.activation.data().iter().zip(o.activation.data()) {
            s += (a - b) * (a - b);
        }
        total += s / n;
    }
    total
}

pub fn naive_expected_cost(p: &[f64], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += p[i] * c[i];
    }
    s
}

pub fn conv_spec(f: usize, c: usize, k: usize, stride: usize, pad: usize) -> ConvLayerSpec {
    ConvLayerSpec::new("l", f, c, (k, k), stride, pad).unwrap()
}

/// Two searched convs, a pool and an fc head on 2x6x6 inputs.
pub fn micro_spec() -> NetworkSpec {
    NetworkSpec::parse(
        "# input=2x6x6\n# classes=3\n\
layer_id,kind,F,C,K1,K2,stride,padding,searched\n\
c1,conv,4,2,3,3,1,1,false\n\
c2,conv,6,4,3,3,1,1,true\n\
p,pool,6,6,2,2,2,0,false\n\
c3,conv,4,6,3,3,2,1,true\n\
fc,fc,3,16,1,1,1,0,false\n",
        "micro",
    )
    .unwrap()
}

pub fn micro_net(seed: u64) -> Network {
    Network::init(micro_spec(), seed).unwrap()
}

/// Hand-written plan for the micro-net's two searched layers.
pub fn micro_plan() -> rankforge::rankspace::RankSpacePlan {
    use rankforge::rankspace::{LayerPlan, RankSpacePlan};
    use rankforge::RankPair;
    let lp = |id: &str, f: usize, c: usize, cands: &[(usize, usize)]| LayerPlan {
        layer_id: id.into(),
        out_channels: f,
        in_channels: c,
        alpha_rank: 2.0,
        step_size: 1,
        interval: (1.0, f.min(c) as f64),
        candidates: cands.iter().map(|&(a, b)| RankPair::new(a, b)).collect(),
    };
    RankSpacePlan {
        alpha: 2.0,
        layers: vec![
            lp("c2", 6, 4, &[(2, 2), (3, 2), (4, 4)]),
            lp("c3", 4, 6, &[(2, 3), (4, 6)]),
        ],
        warnings: vec![],
    }
}

pub fn micro_batch(seed: u64, n: usize) -> rankforge::nn::Batch {
    let mut r = rng(seed);
    let x = rand_tensor([n, 2, 6, 6], &mut r);
    let labels = (0..n).map(|_| r.gen_range(0..3)).collect();
    rankforge::nn::Batch::new(x, labels, 3).unwrap()
}

/// `|a − b| / max(|a|, |b|, 1e-6)`, maxed over entries.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Central differences (h = 1e-5) of `loss` over every parameter and every
/// selection logit, paired with the analytic gradients. Returns the worst
/// relative error per tensor.
pub fn finite_difference_report(
    net: &Network,
    loss: &dyn Fn(&Network) -> f64,
    analytic: &rankforge::nn::Gradients,
) -> Vec<(String, f64)> {
    const H: f64 = 1e-5;
    let mut out = Vec::new();
    let mut probe = net.clone();
    for name in net.param_names() {
        let Some(g) = analytic.params.get(&name) else { continue };
        let n = probe.param_mut(&name).unwrap().len();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let orig = probe.param_mut(&name).unwrap()[i];
            probe.param_mut(&name).unwrap()[i] = orig + H;
            let up = loss(&probe);
            probe.param_mut(&name).unwrap()[i] = orig - H;
            let down = loss(&probe);
            probe.param_mut(&name).unwrap()[i] = orig;
            fd[i] = (up - down) / (2.0 * H);
        }
        out.push((name, max_rel_err(&fd, g)));
    }
    let ids: Vec<String> = net.choice_layers().map(|c| c.spec.layer_id.clone()).collect();
    for (k, id) in ids.iter().enumerate() {
        let Some(g) = analytic.logits.get(id) else { continue };
        let mut fd = vec![0.0; g.len()];
        for (i, d) in fd.iter_mut().enumerate() {
            let orig = probe.choice_layers().nth(k).unwrap().logits[i];
            probe.choice_layers_mut().nth(k).unwrap().logits[i] = orig + H;
            let up = loss(&probe);
            probe.choice_layers_mut().nth(k).unwrap().logits[i] = orig - H;
            let down = loss(&probe);
            probe.choice_layers_mut().nth(k).unwrap().logits[i] = orig;
            *d = (up - down) / (2.0 * H);
        }
        out.push((format!("{id}.logits"), max_rel_err(&fd, g)));
    }
    out
}
