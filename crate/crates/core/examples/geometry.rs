//! Activation geometry of the toy model's neuron groups: effective
//! dimension, pairwise similarity and correlation clusters.
//!
//!     cargo run --release --example geometry

use rtn::geometry::analyze_geometry;
use rtn::pipeline::{prepare, sweep, AnalysisConfig};
use rtn::toy::bundled_toy_inputs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = AnalysisConfig {
        group_size: 20,
        ..AnalysisConfig::default()
    };
    let prep = prepare(&bundled_toy_inputs(), &cfg, 1)?;
    let (_, groups) = sweep(&prep, &cfg, 1)?;
    let report = analyze_geometry(&prep.rows, &prep.model.final_layer().w_out, &groups.groups, &cfg.geometry_options())?;

    println!("{} contexts, variance threshold {}\n", report.contexts, report.tau);
    println!("{:<10} {:>5} {:>6} {:>8} {:>9}", "group", "size", "d_eff", "PR", "clusters");
    for g in &report.groups {
        let d = g.dimension.as_ref();
        println!(
            "{:<10} {:>5} {:>6} {:>8.2} {:>9}",
            g.group,
            g.size,
            d.map_or("-".into(), |d| d.d_eff.to_string()),
            d.map_or(f64::NAN, |d| d.participation_ratio),
            g.clusters.as_ref().map_or("-".into(), |c| c.count.to_string())
        );
    }
    for (title, table) in [("activation cosine", &report.activation_cosine), ("weight cosine", &report.weight_cosine)] {
        println!("\n{title}");
        for p in table {
            let b = &p.b;
            match &p.stats {
                Some(s) => println!("  {:<9} {:<9} mean {:+.3}  std {:.3}", p.a, b, s.mean, s.std),
                None => println!("  {:<9} {:<9} {}", p.a, b, p.error.as_deref().unwrap_or("")),
            }
        }
    }
    Ok(())
}
