//! The batch runner behind `sgscn segment`: write a small synthetic dataset
//! to disk, segment it with both methods and list the outputs.
//!
//!     cargo run --release --example segment_directory -- [out_dir]

use std::path::PathBuf;

use sgscn::harness::{format_table, run_segment, Method, RunOptions};
use sgscn::synthetic::{save_dataset, shape_suite};

fn main() -> sgscn::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sgscn_demo"));
    let (images, masks) = (root.join("images"), root.join("masks"));
    save_dataset(&shape_suite(4, 64, 11), &images, &masks)?;

    for method in [Method::Sgscn, Method::Kmeans] {
        let out = root.join(format!("{method:?}").to_lowercase());
        let mut opts = RunOptions::new(&images, &out);
        opts.method = method;
        opts.layout.masks_dir = Some(masks.clone());
        opts.layout.resize = None;
        let summary = run_segment(&opts)?;
        println!("{method:?} -> {}", out.display());
        if let Some(m) = summary.metrics {
            print!("{}", format_table(&[("all".into(), m)]));
        }
        print!("{}", std::fs::read_to_string(out.join("metrics.csv")).unwrap_or_default());
    }
    Ok(())
}
