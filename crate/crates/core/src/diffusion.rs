//! DDPM schedule, forward noising, `x_0`-prediction reverse steps, ancestral
//! sampling and windowed outpainting for long sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Mat;
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Tables indexed by `t − 1` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let span = (steps - 1) as f64;
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_min + i as f64 / span * (beta_max - beta_min))
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let (mut posterior_var, mut c1, mut c2) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..steps {
        let ab = alpha_bar[i];
        let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
        posterior_var.push(beta[i] * (1.0 - ab_prev) / (1.0 - ab));
        c1.push(ab_prev.sqrt() * beta[i] / (1.0 - ab));
        c2.push(alpha[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    }
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_var,
        c1,
        c2,
    })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("valid defaults")
    }
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

pub fn q_sample(x0: &Mat, t: usize, eps: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    let i = sched.index(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::shape(format!("noise {:?} does not match x0 {:?}", eps.dim(), x0.dim())));
    }
    let ab = sched.alpha_bar[i];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// One reverse step from `x_t` to `x_{t−1}`; at `t = 1` the posterior mean is
/// returned and `noise` is ignored.
pub fn p_sample_step(x_t: &Mat, t: usize, x0_hat: &Mat, noise: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    let i = sched.index(t)?;
    if x_t.dim() != x0_hat.dim() || x_t.dim() != noise.dim() {
        return Err(Error::shape("x_t, x0_hat and noise must share a shape"));
    }
    let mut mu = x0_hat * sched.c1[i] + x_t * sched.c2[i];
    if t > 1 {
        mu.scaled_add(sched.posterior_var[i].sqrt(), noise);
    }
    Ok(mu)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Ancestral sampling from `x_T ~ N(0, I)`. `denoiser(x_t, t)` returns the
/// predicted `x_0`.
pub fn sample(
    denoiser: &mut dyn FnMut(&Mat, usize) -> Result<Mat>,
    shape: (usize, usize),
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(&mut rng, shape);
    for t in (1..=sched.steps()).rev() {
        let x0 = denoiser(&x, t).map_err(|e| Error::Denoiser {
            step: t,
            source: Box::new(e),
        })?;
        let noise = if t > 1 { gaussian(&mut rng, shape) } else { Mat::zeros(shape) };
        x = p_sample_step(&x, t, &x0, &noise, sched)?;
    }
    Ok(x)
}

/// Start frames of each window for `total` frames, window `window`, overlap
/// `overlap`. The last window may extend past `total`.
pub fn window_starts(total: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap == 0 || overlap >= window {
        return Err(Error::config(format!(
            "overlap must satisfy 0 < overlap < window, got {overlap} and {window}"
        )));
    }
    if total < window {
        return Err(Error::config(format!("total frames {total} shorter than window {window}")));
    }
    let stride = window - overlap;
    let mut starts = vec![0];
    while starts.last().unwrap() + window < total {
        starts.push(starts.last().unwrap() + stride);
    }
    Ok(starts)
}

/// Long-sequence sampling by overlapping windows. Window `k+1` keeps its first
/// `overlap` frames pinned to the last `overlap` frames of window `k`: after
/// every reverse step those rows are replaced by the pinned frames noised to
/// the new step. `denoiser(x_t, t, k)` denoises window `k`.
pub fn outpaint_sample(
    denoiser: &mut dyn FnMut(&Mat, usize, usize) -> Result<Mat>,
    total: usize,
    window: usize,
    overlap: usize,
    width: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Mat> {
    let starts = window_starts(total, window, overlap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros((starts.last().unwrap() + window, width));
    let shape = (window, width);
    for (k, &start) in starts.iter().enumerate() {
        let fixed = (k > 0).then(|| out.slice(ndarray::s![start..start + overlap, ..]).to_owned());
        let pin = |x: &mut Mat, t: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            if let Some(fixed) = &fixed {
                let noised = if t == 0 {
                    fixed.clone()
                } else {
                    q_sample(fixed, t, &gaussian(rng, fixed.dim()), sched)?
                };
                x.slice_mut(ndarray::s![..overlap, ..]).assign(&noised);
            }
            Ok(())
        };
        let mut x = gaussian(&mut rng, shape);
        pin(&mut x, sched.steps(), &mut rng)?;
        for t in (1..=sched.steps()).rev() {
            let x0 = denoiser(&x, t, k).map_err(|e| Error::Denoiser {
                step: t,
                source: Box::new(e),
            })?;
            let noise = if t > 1 { gaussian(&mut rng, shape) } else { Mat::zeros(shape) };
            x = p_sample_step(&x, t, &x0, &noise, sched)?;
            pin(&mut x, t - 1, &mut rng)?;
        }
        out.slice_mut(ndarray::s![start..start + window, ..]).assign(&x);
    }
    Ok(out.slice(ndarray::s![..total, ..]).to_owned())
}
