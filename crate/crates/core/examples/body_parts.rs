//! The 12-part body partition and per-part token codecs.

use ndarray::Array2;
use wholebody::motion_repr::DEFAULT_JOINTS;
use wholebody::topology::{decode_parts, default_body_partition, encode_parts, PartCodec};

fn main() -> wholebody::Result<()> {
    let layout = default_body_partition(DEFAULT_JOINTS)?;
    for part in &layout.parts {
        let width: usize = part.ranges.iter().map(|r| r.len()).sum();
        println!("{:<16} {width:>4} channels", part.name);
    }
    let codec = PartCodec::init(&layout, 0);
    let seq = Array2::from_shape_fn((6, layout.width), |(f, c)| ((f * 7 + c) as f64 * 0.01).sin());
    let tokens = encode_parts(&seq, &codec, &layout)?;
    println!("tokens {:?} (frames, parts, D_b)", tokens.dim());
    let out = decode_parts(&tokens, &codec, &layout)?;
    println!("decoded {:?}", out.dim());
    Ok(())
}
