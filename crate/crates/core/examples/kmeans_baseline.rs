//! k-means (k = 3) against the trained network on a few synthetic lesions.
//!
//!     cargo run --release --example kmeans_baseline

use sgscn::baselines::{kmeans_fit, kmeans_segment, FeatureMode, KMeansConfig};
use sgscn::metrics::evaluate;
use sgscn::synthetic::shape_suite;
use sgscn::trainer::{train_single_image, TrainConfig};

fn main() -> sgscn::Result<()> {
    for (i, s) in shape_suite(4, 64, 7).iter().enumerate() {
        let km = KMeansConfig::new(3).with_seed(i as u64);
        let fit = kmeans_fit(&s.image, &km)?;
        let rgb = evaluate(&kmeans_segment(&s.image, &km)?, &s.mask)?;
        let xy = KMeansConfig { feature_mode: FeatureMode::RgbXy, ..km };
        let rgb_xy = evaluate(&kmeans_segment(&s.image, &xy)?, &s.mask)?;
        let (labels, _) = train_single_image(&s.image, &TrainConfig::dermoscopy().with_seed(i as u64))?;
        let net = evaluate(&labels, &s.mask)?;
        println!(
            "{}: k-means rgb {:.3} ({} Lloyd steps, inertia {:.2})  rgb+xy {:.3}  network {:.3}",
            s.name,
            rgb.dsc,
            fit.iterations,
            fit.inertia(),
            rgb_xy.dsc,
            net.dsc
        );
    }
    Ok(())
}
