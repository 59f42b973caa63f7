//! Mean-ablation sweep over the final MLP of the bundled toy model.
//!
//!     cargo run --release --example influence_sweep

use rtn::pipeline::{prepare, sweep, AnalysisConfig};
use rtn::toy::bundled_toy_inputs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = AnalysisConfig::default();
    let prep = prepare(&bundled_toy_inputs(), &cfg, 1)?;
    println!(
        "{} rare-target positions (frequency threshold {:?}), means over {} positions",
        prep.rows.len(),
        prep.eval.meta.threshold,
        prep.means.count
    );

    let (influence, groups) = sweep(&prep, &cfg, 1)?;
    let profile = &influence.profile;
    let mut order: Vec<usize> = (0..profile.len()).collect();
    order.sort_by(|&a, &b| profile.abs_dloss[b].total_cmp(&profile.abs_dloss[a]));

    println!("\nmost influential neurons");
    println!("{:>6} {:>12} {:>12}", "neuron", "|dloss|", "signed");
    for &n in order.iter().take(10) {
        println!("{n:>6} {:>12.3e} {:>+12.3e}", profile.abs_dloss[n], profile.signed_effect[n]);
    }

    for g in &groups.groups {
        let head: Vec<String> = g.indices.iter().take(8).map(|i| i.to_string()).collect();
        println!("{:<10} {:>3} neurons: {} ...", g.display_name(), g.size, head.join(" "));
    }
    Ok(())
}
