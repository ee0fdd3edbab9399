//! Rectified-flow mathematics. Time runs from data at `t = 0` to standard
//! Gaussian noise at `t = 1` along straight paths.

use infu_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logit-normal timestep: `sigmoid(z)` with `z ~ N(0, 1)`.
pub fn sample_timestep<R: Rng>(rng: &mut R) -> f64 {
    sigmoid(rng.sample(StandardNormal))
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `z_t = (1 − t)·x0 + t·ε`.
pub fn forward_interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    same_shape("forward_interpolate", x0, eps)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!(
            "forward_interpolate: t = {t} outside [0, 1]"
        )));
    }
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Conditional velocity `ε − x0`.
pub fn cfm_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape("cfm_target", x0, eps)?;
    let data = eps
        .data()
        .iter()
        .zip(x0.data())
        .map(|(e, a)| e - a)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Element-mean squared error.
pub fn cfm_loss(v_pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("cfm_loss", v_pred, target)?;
    let sse: f64 = v_pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(v, u)| (v - u) * (v - u))
        .sum();
    Ok(sse / v_pred.len() as f64)
}

/// One training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub target_u: Tensor,
}

impl FlowSample {
    pub fn new(x0: Tensor, eps: Tensor, t: f64) -> Result<Self> {
        let z_t = forward_interpolate(&x0, &eps, t)?;
        let target_u = cfm_target(&x0, &eps)?;
        Ok(Self {
            x0,
            eps,
            t,
            z_t,
            target_u,
        })
    }

    /// Fresh noise and a logit-normal timestep for `x0`.
    pub fn draw<R: Rng>(x0: Tensor, rng: &mut R) -> Result<Self> {
        let eps = standard_normal(x0.shape(), rng);
        let t = sample_timestep(rng);
        Self::new(x0, eps, t)
    }
}

pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Integrates `dz/dt = v(z, t)` from `t = 1` to `t = 0` on the uniform grid
/// `t_k = 1 − k/steps`.
pub fn euler_sample<F>(mut velocity: F, z1: Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(invalid("euler_sample needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(invalid(format!(
                "velocity shape {:?} does not match state shape {:?}",
                v.shape(),
                z.shape()
            )));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
    }
    Ok(z)
}

/// Independent per-dimension Gaussian data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(invalid("mu and sigma lengths differ"));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid("sigma must be positive and finite"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn scalar(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![mu], vec![sigma])
    }
}

/// `E[ε − x0 | z_t = z]` for one dimension with `x0 ~ N(mu, sigma²)`.
pub fn gaussian_marginal_velocity_1d(z: f64, t: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(format!(
            "marginal velocity needs t in (0, 1], got {t}"
        )));
    }
    let s2 = sigma * sigma;
    let a = 1.0 - t;
    let var = a * a * s2 + t * t;
    Ok((t - a * s2) / var * (z - a * mu) - mu)
}

/// Closed-form marginal velocity, per dimension.
pub fn gaussian_marginal_velocity(z: &[f64], t: f64, oracle: &GaussianOracle) -> Result<Vec<f64>> {
    if z.len() != oracle.mu.len() {
        return Err(invalid(format!(
            "state has {} dims, oracle {}",
            z.len(),
            oracle.mu.len()
        )));
    }
    z.iter()
        .zip(oracle.mu.iter().zip(&oracle.sigma))
        .map(|(&zi, (&m, &s))| gaussian_marginal_velocity_1d(zi, t, m, s))
        .collect()
}
