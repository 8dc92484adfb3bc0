//! Ancestral sampling and windowed outpainting with a toy denoiser that
//! always predicts the same clean signal.

use wholebody::autograd::Mat;
use wholebody::diffusion::{outpaint_sample, sample, DiffusionSchedule};

fn main() -> wholebody::Result<()> {
    let sched = DiffusionSchedule::default();
    println!("β_1 = {}, β_T = {}, ᾱ_T = {:.3e}", sched.beta[0], sched.beta[999], sched.alpha_bar[999]);
    let target = Mat::from_shape_fn((16, 3), |(f, c)| (f as f64 * 0.3 + c as f64).sin());
    let mut den = |_: &Mat, _: usize| Ok(target.clone());
    let x = sample(&mut den, target.dim(), &sched, 0)?;
    let err = (&x - &target).iter().map(|v| v.abs()).fold(0.0, f64::max);
    println!("sampled with an oracle denoiser, max error {err:.2e}");

    let mut den = |x: &Mat, _t: usize, k: usize| Ok(x.mapv(|v| 0.5 * v.tanh() + k as f64));
    let long = outpaint_sample(&mut den, 150, 64, 16, 3, &sched, 1)?;
    println!("outpainted {} frames from windows of 64 with overlap 16", long.nrows());
    Ok(())
}
