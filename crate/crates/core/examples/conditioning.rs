//! Condition tracks, window segmentation, pseudo-captions and text tokens.

use ndarray::Array2;
use wholebody::conditioning::{
    make_pseudo_caption, segment_ranges, CaptionSpec, ConditionKind, ConditionTrack, HashEmbedder, TextEmbedder,
};

fn main() -> wholebody::Result<()> {
    let feats = Array2::from_shape_fn((300, ConditionKind::Music.dim()), |(f, k)| ((f + k) as f32 * 0.1).sin());
    let track = ConditionTrack::new(ConditionKind::Music, feats, 30)?;
    for (w, s) in [(64, 64), (120, 30)] {
        let ranges = segment_ranges(track.frames(), w, s);
        println!("window {w} stride {s}: {} segments, last {:?}", ranges.len(), ranges.last());
    }
    let caption = make_pseudo_caption(&CaptionSpec::M2d {
        genre: "street dance".into(),
        style: "Jazz".into(),
        song: "wildfire".into(),
    })?;
    println!("{caption}");
    let tokens = HashEmbedder::new(64, 32).embed(&caption);
    println!("text tokens {:?}", tokens.dim());
    Ok(())
}
