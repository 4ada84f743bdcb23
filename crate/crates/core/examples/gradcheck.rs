//! Autodiff against finite differences for every op and the full network.
//!
//!     cargo run --release --example gradcheck -- [seeds]

use sgscn::checks::{run_seeds, DEFAULT_STEP, TOLERANCE};

fn main() -> sgscn::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seeds: Vec<u64> = (0..n).collect();
    let start = std::time::Instant::now();
    let results = run_seeds(&seeds, DEFAULT_STEP)?;
    for r in &results {
        println!(
            "{:<32} seed {:>2}  rel err {:.2e}  ({} compared, {} skipped)  {}",
            r.name,
            r.seed,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{failed} of {} checks above {TOLERANCE:e} in {:.1?}", results.len(), start.elapsed());
    Ok(())
}
