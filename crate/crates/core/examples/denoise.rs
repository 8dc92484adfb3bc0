//! Builds the Tiny backbone and denoises a noised clip once.

use wholebody::backbone::{build_model, denoise_forward, ModelConfig};
use wholebody::conditioning::{HashEmbedder, TextEmbedder};
use wholebody::diffusion::{gaussian, q_sample, DiffusionSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> wholebody::Result<()> {
    let cfg = ModelConfig::variant("tiny")?;
    let model = build_model(&cfg, 0)?;
    println!("tiny: {} layers, D_b = {}, {} parameters", cfg.layers, cfg.token_dim, model.param_count());
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = gaussian(&mut rng, (32, model.layout.width)) * 0.1;
    let xt = q_sample(&x0, 500, &gaussian(&mut rng, x0.dim()), &sched)?;
    let text = HashEmbedder::new(cfg.text_dim, 32).embed("a person waves both hands");
    let pred = denoise_forward(&model, &xt, 500, &text, sched.steps())?;
    println!("x0 prediction {:?}; an untrained head predicts zeros: {}", pred.dim(), pred.iter().all(|v| *v == 0.0));
    Ok(())
}
