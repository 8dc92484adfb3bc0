//! A few steps of both training stages on a synthetic music corpus, with
//! checkpoints written to a temporary experiment directory.

use wholebody::backbone::{build_model, ModelConfig};
use wholebody::checkpoint::save_backbone;
use wholebody::conditioning::{ConditionKind, HashEmbedder};
use wholebody::control_branch::FreezePolicy;
use wholebody::trainer::{make_synthetic_dataset, train_stage1, train_stage2, ExperimentDir, SyntheticSpec, TrainConfig};

fn main() -> wholebody::Result<()> {
    let spec = SyntheticSpec { count: 8, frames: 8, condition: Some(ConditionKind::Music), ..Default::default() };
    let corpus = make_synthetic_dataset(&spec)?;
    let mc = ModelConfig::variant("tiny")?;
    let items = corpus.items(&HashEmbedder::new(mc.text_dim, 32));
    let root = std::env::temp_dir().join("wholebody-train-example");
    let cfg = TrainConfig { steps: 20, batch_size: 2, lr_start: 3e-3, lr_end: 3e-4, model: mc.clone(), ..Default::default() };
    let exp = ExperimentDir::create(&root, &cfg)?;
    let mut model = build_model(&mc, 0)?;
    let log = train_stage1(&items, &mut model, &cfg, Some(&exp))?;
    println!("stage 1: loss {:.4} -> {:.4}", log.losses[0], log.losses.last().unwrap());
    let ck = root.join("stage1.mcck");
    save_backbone(&model, &ck)?;

    let cfg2 = TrainConfig {
        stage: 2,
        stage1_checkpoint: Some(ck.display().to_string()),
        freeze: FreezePolicy::music_default(),
        ..cfg
    };
    let out = train_stage2(&items, &model, &cfg2, None)?;
    println!("stage 2: {} trainable tensors, loss {:.4} -> {:.4}", out.trainable.len(), out.log.losses[0], out.log.losses.last().unwrap());
    println!("experiment written to {}", root.display());
    Ok(())
}
