//! Whole pipeline on the bundled toy assets.
//!
//!     cargo run --release --example end_to_end [-- OUT_DIR]

use rtn::pipeline::{run_pipeline, AnalysisConfig, RunConfig};
use rtn::toy::bundled_toy_inputs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("rtn-toy-run"));
    std::fs::create_dir_all(&out_dir)?;
    let summary = run_pipeline(&RunConfig {
        inputs: bundled_toy_inputs(),
        out_dir,
        analysis: AnalysisConfig::default(),
        workers: 1,
    })?;

    println!("{} evaluation positions", summary.eval_pairs);
    println!(
        "change points {:?}, power-law exponent {:.3}",
        summary.phases.change_points.ranks, summary.phases.kappa
    );
    for e in &summary.spectra.entries {
        match e.alpha {
            Some(a) => println!("alpha[{}] = {a:.3}", e.group),
            None => println!("alpha[{}] unavailable: {}", e.group, e.error.as_deref().unwrap_or("")),
        }
    }
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
