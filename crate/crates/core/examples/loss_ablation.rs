//! Which loss terms matter: CE alone, CE + sparse spatial, all three.
//!
//!     cargo run --release --example loss_ablation -- [images]

use sgscn::metrics::{evaluate, mean_std};
use sgscn::synthetic::shape_suite;
use sgscn::trainer::{ablation_run, Ablation, TrainConfig};

fn main() -> sgscn::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut dsc: [Vec<f64>; 3] = Default::default();
    for (i, s) in shape_suite(n, 64, 7).iter().enumerate() {
        let ab = ablation_run(&s.image, &TrainConfig::dermoscopy().with_seed(i as u64))?;
        print!("{:<10}", s.name);
        for (k, (labels, trace)) in ab.runs().into_iter().enumerate() {
            let d = evaluate(labels, &s.mask)?.dsc;
            dsc[k].push(d);
            print!("  {:<9} {d:.3} ({:>3} it)", Ablation::SETTINGS[k].0, trace.iterations.len());
        }
        println!();
    }
    for (k, (name, _)) in Ablation::SETTINGS.iter().enumerate() {
        let (m, s) = mean_std(&dsc[k]);
        println!("{name:<9} mean DSC {m:.3} +- {s:.3}");
    }
    Ok(())
}
