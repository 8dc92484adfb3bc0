//! The evaluation metrics on hand-made embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wholebody::diffusion::gaussian;
use wholebody::evaluation::{beat_align, diversity, fid, mm_dist, r_precision_topk, FeatureCloud, Provenance};

fn main() -> wholebody::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let real = gaussian(&mut rng, (256, 16));
    let close = &real + &(gaussian(&mut rng, (256, 16)) * 0.1);
    let far = gaussian(&mut rng, (256, 16)) + 1.0;
    let cloud = |m: &ndarray::Array2<f64>, p| FeatureCloud::new(m.clone(), p);
    let gt = cloud(&real, Provenance::GroundTruth);
    println!("FID close {:.4}, shifted {:.4}", fid(&cloud(&close, Provenance::Generated), &gt)?, fid(&cloud(&far, Provenance::Generated), &gt)?);
    println!("diversity {:.4}", diversity(&gt, 300, 0)?);
    println!("R-Precision top-1..3 {:?}", r_precision_topk(&close, &real, 3, 0)?);
    println!("MM Dist {:.4}", mm_dist(&close, &real)?);
    println!("beat alignment {:.4}", beat_align(&[10.0, 31.0, 50.0], &[9.0, 30.0, 55.0], 3.0)?);
    Ok(())
}
