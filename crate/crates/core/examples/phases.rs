//! Three-phase structure of a ranked influence curve.
//!
//! Uses a synthetic curve by default so the phases are clearly visible;
//! pass `--toy` to segment the toy model's real influence profile instead.
//!
//!     cargo run --release --example phases [-- --toy]

use rtn::phases::{analyze_phases, local_slope, rank_curve, rank_values, PhaseOptions};
use rtn::pipeline::{prepare, sweep, AnalysisConfig};
use rtn::toy::bundled_toy_inputs;

fn synthetic(n: usize) -> Vec<f64> {
    // head lifted above a power law with exponent 1.2, which steepens to
    // exponent 5 past rank 300
    (1..=n)
        .map(|r| {
            let r = r as f64;
            let head = if r <= 20.0 { 0.6 } else { 0.0 };
            let tail = if r > 300.0 { -3.8 * (r / 300.0).ln() } else { 0.0 };
            (head - 1.2 * r.ln() + tail).exp()
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = PhaseOptions::default();
    let curve = if std::env::args().any(|a| a == "--toy") {
        let cfg = AnalysisConfig::default();
        let prep = prepare(&bundled_toy_inputs(), &cfg, 1)?;
        let (influence, _) = sweep(&prep, &cfg, 1)?;
        rank_curve(&influence.profile, opts.epsilon)?
    } else {
        rank_values(&synthetic(1000), opts.epsilon)?
    };
    let slope = local_slope(&curve, opts.window)?;
    let seg = analyze_phases(&curve, &slope, &opts)?;

    println!("ranks             {}", seg.n);
    println!("change points     {:?} (strength {:.2}, weak: {})", seg.change_points.ranks, seg.change_points.strength, seg.change_points.weak);
    println!("power-law fit     exponent {:.3} over ranks {}..={}", seg.kappa, seg.fit_interval.start, seg.fit_interval.end);
    match seg.plateau {
        Some(p) => println!("plateau           ranks {}..={}", p.start, p.end),
        None => println!("plateau           none"),
    }
    println!("power-law phase   ranks {}..={}", seg.power_law.start, seg.power_law.end);
    println!("decay phase       ranks {}..={}", seg.decay.start, seg.decay.end);
    println!(
        "fractions         plateau {:.3}, power law {:.3}, decay {:.3}",
        seg.fractions.plateau, seg.fractions.power_law, seg.fractions.decay
    );
    Ok(())
}
