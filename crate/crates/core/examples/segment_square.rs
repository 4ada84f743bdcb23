//! Train the network on one noisy square and score it against the known mask.
//!
//!     cargo run --release --example segment_square -- [seed]

use sgscn::metrics::evaluate;
use sgscn::synthetic::default_square;
use sgscn::trainer::{train_single_image, TrainConfig};

fn main() -> sgscn::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let sample = default_square(seed);
    let config = TrainConfig::dermoscopy().with_seed(seed);

    let start = std::time::Instant::now();
    let (labels, trace) = train_single_image(&sample.image, &config)?;
    let report = evaluate(&labels, &sample.mask)?;

    for r in &trace.iterations {
        println!(
            "iter {:>3}  labels {:>3}  ce {:.4}  ss {:.4}  cc {:.4}  changed {:.3}",
            r.iteration, r.num_labels, r.loss.ce, r.loss.ss, r.loss.cc, r.changed_fraction
        );
    }
    println!(
        "stopped ({}) after {} iterations in {:.2?}",
        trace.stop_reason.as_str(),
        trace.iterations.len(),
        start.elapsed()
    );
    println!("cluster {}: dsc {:.4}  hm {:.4}  xor {:.4}", report.matched_cluster_id, report.dsc, report.hm, report.xor);

    // '#' = matched cluster, '+' = missed foreground, '.' = background
    for y in 0..labels.height() {
        let row: String = (0..labels.width())
            .map(|x| {
                let hit = labels.get(y, x) == report.matched_cluster_id;
                let gt = sample.mask.data()[y * labels.width() + x];
                match (hit, gt) {
                    (true, _) => '#',
                    (false, true) => '+',
                    _ => '.',
                }
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
