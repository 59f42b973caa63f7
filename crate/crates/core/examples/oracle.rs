//! Checks the fast ablation path against full forward reruns.
//!
//!     cargo run --release --example oracle [-- NEURONS]

use rtn::ablation::oracle_check;
use rtn::pipeline::{prepare, AnalysisConfig};
use rtn::toy::bundled_toy_inputs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let count: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(32);
    let prep = prepare(&bundled_toy_inputs(), &AnalysisConfig::default(), 1)?;
    let neurons: Vec<usize> = (0..prep.model.config.d_mlp.min(count)).collect();
    let t = std::time::Instant::now();
    let r = oracle_check(&prep.model, &prep.stream, &prep.cache, &prep.rows, &prep.means, &neurons, 1)?;
    println!("neurons checked        {}", r.neurons.len());
    println!("max loss deviation     {:.3e}", r.max_loss_deviation);
    println!("max |dloss| deviation  {:.3e}", r.max_dloss_deviation);
    println!("elapsed                {:.2?}", t.elapsed());
    Ok(())
}
