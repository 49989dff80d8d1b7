use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear-β DDPM schedule. Index `t` runs over `0..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::config("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { t, beta, alpha, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.t {
            return Err(Error::config(format!("timestep {t} outside 0..{}", self.t)));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))` per batch element, shaped `(B, 1, 1, 1)`.
    fn coefs(&self, ts: &[usize], like: &Tensor) -> Result<(Tensor, Tensor)> {
        for t in ts {
            self.check(*t)?;
        }
        let b = ts.len();
        let mut shape = vec![b];
        shape.extend(std::iter::repeat(1).take(like.rank() - 1));
        let a: Vec<f64> = ts.iter().map(|t| self.alpha_bar[*t].sqrt()).collect();
        let s: Vec<f64> = ts.iter().map(|t| (1.0 - self.alpha_bar[*t]).sqrt()).collect();
        let mk = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
        };
        Ok((mk(a)?, mk(s)?))
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`, one timestep per batch element.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    shape_match(x0, eps)?;
    batch_match(x0, ts)?;
    let dt = x0.dtype();
    let (x0, eps) = (wide(x0)?, wide(eps)?);
    let (a, s) = sched.coefs(ts, &x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?.to_dtype(dt)?)
}

pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    shape_match(x0, eps)?;
    sched.check(t)?;
    let a = sched.alpha_bar[t];
    let dt = x0.dtype();
    Ok(((wide(x0)? * a.sqrt())? + (wide(eps)? * (1.0 - a).sqrt())?)?.to_dtype(dt)?)
}

/// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    shape_match(x_t, eps_hat)?;
    sched.check(t)?;
    let a = sched.alpha_bar[t];
    let dt = x_t.dtype();
    Ok(((wide(x_t)? - (wide(eps_hat)? * (1.0 - a).sqrt())?)? / a.sqrt())?.to_dtype(dt)?)
}

pub fn predict_x0_batch(x_t: &Tensor, eps_hat: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    shape_match(x_t, eps_hat)?;
    batch_match(x_t, ts)?;
    let dt = x_t.dtype();
    let (x_t, eps_hat) = (wide(x_t)?, wide(eps_hat)?);
    let (a, s) = sched.coefs(ts, &x_t)?;
    Ok((x_t - eps_hat.broadcast_mul(&s)?)?.broadcast_div(&a)?.to_dtype(dt)?)
}

/// Arithmetic runs in 64-bit; only the result is rounded to the input dtype.
fn wide(x: &Tensor) -> Result<Tensor> {
    Ok(x.to_dtype(candle_core::DType::F64)?)
}

fn shape_match(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn batch_match(x: &Tensor, ts: &[usize]) -> Result<()> {
    if x.dim(0)? != ts.len() {
        return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), x.dim(0)?)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn terminal_alpha_bar_matches_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut p = 1.0f64;
        for i in 0..1000 {
            p *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar[999] - p).abs() < 1e-15);
        assert!((s.alpha_bar[999] - 4.0e-5).abs() < 0.1e-5);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!((s.alpha_bar[0] - (1.0 - s.beta[0])).abs() == 0.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1e-4, 1e-4).unwrap();
        assert_eq!(s.alpha_bar, vec![0.9999]);
    }

    #[test]
    fn invalid_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn zero_noise_and_range() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let eps = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let xt: Vec<f64> = q_sample(&x0, 300, &eps, &s).unwrap().to_vec1().unwrap();
        let k = s.alpha_bar[300].sqrt();
        assert_eq!(xt, vec![k, -2.0 * k, 0.5 * k]);
        let tiny = make_schedule(1000, 1e-7, 0.02).unwrap();
        let ones = Tensor::ones(3, DType::F64, &Device::Cpu).unwrap();
        let x_early: Vec<f64> = q_sample(&x0, 0, &ones, &tiny).unwrap().to_vec1().unwrap();
        for (a, b) in x_early.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(q_sample(&x0, 1000, &eps, &s).is_err());
    }
}
