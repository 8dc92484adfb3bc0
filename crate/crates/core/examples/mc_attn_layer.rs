//! One MC-Attn layer on random part tokens, with its per-frame dynamic
//! topology.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wholebody::autograd::Mat;
use wholebody::mc_attn::{dynamic_scores, init_layer, layer_forward, static_forward};

fn main() -> wholebody::Result<()> {
    let (frames, parts, d, text_dim) = (8, 12, 64, 64);
    let layer = init_layer(parts, d, text_dim, 4, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Array3::from_shape_fn((frames, parts, d), |_| rng.random_range(-1.0..1.0));
    let text = Mat::from_shape_fn((5, text_dim), |_| rng.random_range(-1.0..1.0));

    let es = static_forward(&h, &layer.a_s)?;
    println!("fresh A_s = I leaves tokens unchanged: {}", es == h);
    let a_d = dynamic_scores(&h, &layer)?;
    let row: Vec<String> = (0..parts).map(|q| format!("{:.3}", a_d[[0, 0, q]])).collect();
    println!("frame 0, part 0 attends to parts: [{}]", row.join(", "));
    let out = layer_forward(&h, &text, &layer, true)?;
    println!("layer output {:?}", out.dim());
    Ok(())
}
