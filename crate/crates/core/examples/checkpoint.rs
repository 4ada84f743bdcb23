//! Train, save the weights, reload them and check the labels survive.
//!
//!     cargo run --release --example checkpoint -- [path]

use sgscn::segnet::ParamSet;
use sgscn::synthetic::default_square;
use sgscn::trainer::{assign_labels, Session, TrainConfig};

fn main() -> sgscn::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        std::env::temp_dir().join("sgscn_square.ckpt").to_string_lossy().into_owned()
    });
    let sample = default_square(3);
    let config = TrainConfig::dermoscopy().with_seed(3);
    let (labels, trace, params) = Session::new(sample.image.clone(), config)?.train()?;
    params.save(&path)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("trained {} iterations, saved {bytes} bytes to {path}", trace.iterations.len());

    // the checkpoint holds the weights *after* the last update, so compare
    // against a fresh forward pass rather than the returned labels
    let restored: ParamSet<f32> = ParamSet::load(&path, params.config.eps_norm)?;
    let before = assign_labels(&params.forward(&sample.image)?)?;
    let after = assign_labels(&restored.forward(&sample.image)?)?;
    println!("labels at stop: {}  after reload: {}", labels.num_distinct(), after.num_distinct());
    println!("reloaded labels identical: {}", before == after);
    Ok(())
}
