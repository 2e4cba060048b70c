//! Tucker-2 factorization of convolution weights along the two channel modes.
//!
//! A weight `W ∈ ℝ^{F×C×K1×K2}` is written as
//! `W(f,c,i,j) = Σ_{a,b} core(a,b,i,j) · m1(a,f) · m2(b,c)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::{singular_values, truncated_svd};
use crate::tensor::{mode_product, unfold, Matrix, Tensor4};

/// Geometry of a standard convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub layer_id: String,
    /// F
    pub out_channels: usize,
    /// C
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    pub fn new(
        layer_id: impl Into<String>,
        out_channels: usize,
        in_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let spec = Self {
            layer_id: layer_id.into(),
            out_channels,
            in_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::arg(format!(
                "layer `{}`: channel and kernel extents must be positive",
                self.layer_id
            )));
        }
        if self.stride == 0 {
            return Err(Error::arg(format!("layer `{}`: stride must be positive", self.layer_id)));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Full ranks `(F, C)`.
    pub fn full_ranks(&self) -> RankPair {
        RankPair::new(self.out_channels, self.in_channels)
    }

    /// Output spatial extents for an `h × w` input, if the kernel fits.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

/// Truncation ranks: `r1` on the output-channel mode, `r2` on the input-channel mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankPair {
    pub r1: usize,
    pub r2: usize,
}

impl RankPair {
    pub const fn new(r1: usize, r2: usize) -> Self {
        Self { r1, r2 }
    }

    /// ΔRank = r1 − r2.
    pub fn delta(&self) -> i64 {
        self.r1 as i64 - self.r2 as i64
    }

    pub fn check(&self, spec: &ConvLayerSpec) -> Result<()> {
        if self.r1 == 0 || self.r2 == 0 || self.r1 > spec.out_channels || self.r2 > spec.in_channels {
            return Err(Error::arg(format!(
                "layer `{}`: ranks ({}, {}) outside [1, {}] x [1, {}]",
                spec.layer_id, self.r1, self.r2, spec.out_channels, spec.in_channels
            )));
        }
        Ok(())
    }
}

/// Core tensor `(r1, r2, K1, K2)` and mode matrices `m1: r1×F`, `m2: r2×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    pub core: Tensor4,
    pub m1: Matrix,
    pub m2: Matrix,
}

impl TuckerFactors {
    pub fn new(core: Tensor4, m1: Matrix, m2: Matrix) -> Result<Self> {
        let [r1, r2, _, _] = core.shape();
        if m1.rows() != r1 || m2.rows() != r2 {
            return Err(Error::shape(format!(
                "core {:?} inconsistent with m1 {}x{} and m2 {}x{}",
                core.shape(),
                m1.rows(),
                m1.cols(),
                m2.rows(),
                m2.cols()
            )));
        }
        Ok(Self { core, m1, m2 })
    }

    pub fn ranks(&self) -> RankPair {
        RankPair::new(self.m1.rows(), self.m2.rows())
    }

    /// `[F, C, K1, K2]` of the weight these factors represent.
    pub fn weight_shape(&self) -> [usize; 4] {
        let [_, _, k1, k2] = self.core.shape();
        [self.m1.cols(), self.m2.cols(), k1, k2]
    }

    pub fn check_against(&self, spec: &ConvLayerSpec) -> Result<()> {
        if self.weight_shape() != spec.weight_shape() {
            return Err(Error::shape(format!(
                "layer `{}`: factors describe {:?}, layer expects {:?}",
                spec.layer_id,
                self.weight_shape(),
                spec.weight_shape()
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.core.len() + self.m1.data().len() + self.m2.data().len()
    }
}

/// Weight represented by `f`: core ×₀ m1ᵀ ×₁ m2ᵀ.
pub fn reconstruct(f: &TuckerFactors) -> Tensor4 {
    let partial = mode_product(&f.core, &f.m1.transpose(), 0).expect("consistent factors");
    mode_product(&partial, &f.m2.transpose(), 1).expect("consistent factors")
}

fn check_weight(weight: &Tensor4, spec: &ConvLayerSpec) -> Result<()> {
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "layer `{}`: weight shape {:?} does not match {:?}",
            spec.layer_id,
            weight.shape(),
            spec.weight_shape()
        )));
    }
    Ok(())
}

fn leading_left_vectors_t(m: &Matrix, k: usize) -> Result<Matrix> {
    // k may exceed min(rows, cols) when the unfolding is wide-but-short;
    // pad by completing an orthonormal basis through the full SVD call.
    let full = m.rows().min(m.cols());
    if k <= full {
        return Ok(truncated_svd(m, k)?.left_vectors.transpose());
    }
    let svd = truncated_svd(m, full)?;
    let mut basis: Vec<Vec<f64>> = (0..full)
        .map(|j| (0..m.rows()).map(|i| svd.left_vectors.get(i, j)).collect())
        .collect();
    for e in 0..m.rows() {
        if basis.len() == k {
            break;
        }
        let mut v = vec![0.0; m.rows()];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Ok(Matrix::from_fn(k, m.rows(), |i, j| basis[i][j]))
}

fn project_core(weight: &Tensor4, m1: &Matrix, m2: &Matrix) -> Result<Tensor4> {
    mode_product(&mode_product(weight, m1, 0)?, m2, 1)
}

/// HOSVD initialization followed by `refine_iters` HOOI sweeps.
pub fn decompose(
    weight: &Tensor4,
    spec: &ConvLayerSpec,
    ranks: RankPair,
    refine_iters: usize,
) -> Result<TuckerFactors> {
    Ok(decompose_with_trace(weight, spec, ranks, refine_iters)?.0)
}

/// Like [`decompose`], also returning the reconstruction error after
/// initialization and after each HOOI sweep.
pub fn decompose_with_trace(
    weight: &Tensor4,
    spec: &ConvLayerSpec,
    ranks: RankPair,
    refine_iters: usize,
) -> Result<(TuckerFactors, Vec<f64>)> {
    spec.validate()?;
    check_weight(weight, spec)?;
    ranks.check(spec)?;

    let mut m1 = leading_left_vectors_t(&unfold(weight, 0)?, ranks.r1)?;
    let mut m2 = leading_left_vectors_t(&unfold(weight, 1)?, ranks.r2)?;
    let mut factors = TuckerFactors::new(project_core(weight, &m1, &m2)?, m1.clone(), m2.clone())?;
    let mut trace = vec![reconstruct(&factors).distance(weight)];

    for _ in 0..refine_iters {
        let y = mode_product(weight, &m2, 1)?;
        m1 = leading_left_vectors_t(&unfold(&y, 0)?, ranks.r1)?;
        let z = mode_product(weight, &m1, 0)?;
        m2 = leading_left_vectors_t(&unfold(&z, 1)?, ranks.r2)?;
        factors = TuckerFactors::new(project_core(weight, &m1, &m2)?, m1.clone(), m2.clone())?;
        trace.push(reconstruct(&factors).distance(weight));
    }
    Ok((factors, trace))
}

/// Singular spectra of the two channel unfoldings and the preservation ratio ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralInfo {
    /// Length F, zero-padded past the unfolding's rank.
    pub mode1_singulars: Vec<f64>,
    /// Length C, zero-padded past the unfolding's rank.
    pub mode2_singulars: Vec<f64>,
    pub rho: f64,
    /// Set when a mode carries no singular mass; `rho` is then 1.0.
    pub zero_mass: bool,
}

pub fn preservation_ratio(weight: &Tensor4, ranks: RankPair) -> Result<SpectralInfo> {
    let [f, c, _, _] = weight.shape();
    if ranks.r1 == 0 || ranks.r2 == 0 || ranks.r1 > f || ranks.r2 > c {
        return Err(Error::arg(format!(
            "ranks ({}, {}) outside [1, {f}] x [1, {c}]",
            ranks.r1, ranks.r2
        )));
    }
    let mut s1 = singular_values(&unfold(weight, 0)?)?;
    let mut s2 = singular_values(&unfold(weight, 1)?)?;
    s1.resize(f, 0.0);
    s2.resize(c, 0.0);
    let fraction = |s: &[f64], r: usize| -> Option<f64> {
        let total: f64 = s.iter().sum();
        (total > 0.0).then(|| (s[..r].iter().sum::<f64>() / total).clamp(0.0, 1.0))
    };
    let (rho, zero_mass) = match (fraction(&s1, ranks.r1), fraction(&s2, ranks.r2)) {
        (Some(a), Some(b)) => (a * b, false),
        _ => (1.0, true),
    };
    Ok(SpectralInfo {
        mode1_singulars: s1,
        mode2_singulars: s2,
        rho,
        zero_mass,
    })
}

/// `(n_org, n_tucker)` = `(F·C·K1·K2, F·r1 + C·r2 + r1·r2·K1·K2)`.
pub fn count_params(spec: &ConvLayerSpec, ranks: RankPair) -> (u64, u64) {
    let f = spec.out_channels as u64;
    let c = spec.in_channels as u64;
    let k = spec.kernel_area() as u64;
    let (r1, r2) = (ranks.r1 as u64, ranks.r2 as u64);
    (f * c * k, f * r1 + c * r2 + r1 * r2 * k)
}
