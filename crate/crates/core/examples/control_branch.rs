//! Attaches a music control branch and checks it starts as an exact no-op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wholebody::backbone::{build_model, denoise_forward, ModelConfig};
use wholebody::checkpoint::backbone_hash;
use wholebody::conditioning::ConditionKind;
use wholebody::control_branch::{attach_control_branch, controlled_forward, set_freeze_policy, FreezePolicy};
use wholebody::diffusion::gaussian;

fn main() -> wholebody::Result<()> {
    let mut model = build_model(&ModelConfig::variant("tiny")?, 0)?;
    let hash = backbone_hash(&model);
    let branch = attach_control_branch(&model, 2, ConditionKind::Music, 1, &hash)?;
    println!("branch depth {}, condition width {}", branch.depth(), branch.cond_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, (16, model.layout.width));
    let text = gaussian(&mut rng, (4, model.config.text_dim));
    let track = gaussian(&mut rng, (16, ConditionKind::Music.dim()));
    let a = denoise_forward(&model, &x, 300, &text, 1000)?;
    let b = controlled_forward(&model, &branch, &x, 300, &text, &track, 1000)?;
    println!("zero bridges give identical output: {}", a == b);

    let trainable = set_freeze_policy(&mut model, &branch, &FreezePolicy::music_default())?;
    let backbone: Vec<_> = trainable.iter().filter(|n| n.starts_with("backbone.")).collect();
    println!("music policy trains {} tensors, backbone ones: {backbone:?}", trainable.len());
    Ok(())
}
