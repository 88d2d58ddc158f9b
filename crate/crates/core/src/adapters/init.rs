use super::{InitScheme, LoraConfig, ScaleDim};
use crate::error::Result;
use crate::rng::{sample_gaussian, sample_uniform, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `d^{1/4} / √γ`, with `d` the output width `m` or input width `n`.
fn prefactor(m: usize, n: usize, gamma: f64, dim: ScaleDim) -> f64 {
    let d = match dim {
        ScaleDim::Out => m,
        ScaleDim::In => n,
    } as f64;
    d.powf(0.25) / gamma.sqrt()
}

pub(super) fn init_down<T: Scalar>(
    rng: &mut Rng,
    scheme: InitScheme,
    m: usize,
    n: usize,
    r: usize,
    cfg: &LoraConfig,
) -> Result<Tensor<T>> {
    let n_f = n as f64;
    match scheme {
        InitScheme::KaimingUniform => {
            let bound = (3.0 / n_f).sqrt();
            sample_uniform(rng, -bound, bound, &[r, n])
        }
        InitScheme::HydraUniform => sample_uniform(rng, -1.0 / n_f, 1.0 / n_f, &[r, n]),
        InitScheme::ScaledGaussian => {
            let std = prefactor(m, n, cfg.gamma, cfg.scale_dim) * (1.0 / n_f).sqrt();
            sample_gaussian(rng, 0.0, std, &[r, n])
        }
        InitScheme::ZeroAScaledGaussianB => Ok(Tensor::zeros(&[r, n])),
    }
}

pub(super) fn init_head<T: Scalar>(
    rng: &mut Rng,
    scheme: InitScheme,
    m: usize,
    n: usize,
    r: usize,
    cfg: &LoraConfig,
) -> Result<Tensor<T>> {
    if scheme.zero_heads() {
        return Ok(Tensor::zeros(&[m, r]));
    }
    let std = prefactor(m, n, cfg.gamma, cfg.scale_dim) * (1.0 / m as f64).sqrt();
    sample_gaussian(rng, 0.0, std, &[m, r])
}

/// Standard LoRA: `A ~ U(−√(3/n), √(3/n))`, `B = 0`.
pub fn init_vanilla<T: Scalar>(rng: &mut Rng, m: usize, n: usize, r: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let cfg = LoraConfig::vanilla(r);
    let a = init_down(rng, InitScheme::KaimingUniform, m, n, r, &cfg)?;
    Ok((a, Tensor::zeros(&[m, r])))
}

/// Shared `A ~ U(−1/n, 1/n)` and `N` zero heads.
pub fn init_hydra<T: Scalar>(
    rng: &mut Rng,
    m: usize,
    n: usize,
    r: usize,
    n_heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let cfg = LoraConfig::default();
    let a = init_down(rng, InitScheme::HydraUniform, m, n, r, &cfg)?;
    Ok((a, (0..n_heads).map(|_| Tensor::zeros(&[m, r])).collect()))
}

/// Scaled-Gaussian `A` (or zero when `zero_a`) and `N` independent scaled-Gaussian
/// heads, each drawn from its own forked stream.
#[allow(clippy::too_many_arguments)]
pub fn init_rlora<T: Scalar>(
    rng: &mut Rng,
    m: usize,
    n: usize,
    r: usize,
    n_heads: usize,
    gamma: f64,
    zero_a: bool,
    scale_dim: ScaleDim,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let cfg = LoraConfig {
        gamma,
        scale_dim,
        ..LoraConfig::default()
    };
    let scheme = if zero_a {
        InitScheme::ZeroAScaledGaussianB
    } else {
        InitScheme::ScaledGaussian
    };
    let a = init_down(&mut rng.fork(), scheme, m, n, r, &cfg)?;
    let heads = (0..n_heads)
        .map(|_| init_head(&mut rng.fork(), scheme, m, n, r, &cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((a, heads))
}
