//! Heavy-tail index of neuron weight spectra.
//!
//! Rescales one group's input weights by Pareto draws and compares its
//! tail index against an untouched group of the same size.
//!
//!     cargo run --release --example spectra

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use rtn::ablation::{GroupLabel, NeuronGroup};
use rtn::spectra::{group_alpha, group_alpha_report, neuron_weight_rows, SpectralOptions};
use rtn::toy::{toy_model, TOY_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = toy_model(TOY_SEED);
    let mut tuned = base.clone();
    let heavy = NeuronGroup::new(GroupLabel::Custom, (2..52).collect());
    let control = NeuronGroup::new(GroupLabel::Random, (100..150).collect());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pareto = Pareto::<f64>::new(1.0, 1.5)?;
    let w_in = &mut tuned.weights.layers.last_mut().unwrap().w_in;
    for &n in &heavy.indices {
        let s = pareto.sample(&mut rng);
        w_in.row_mut(n).iter_mut().for_each(|v| *v *= s);
    }

    let opts = SpectralOptions::default();
    let (esd, tail, alpha) = group_alpha(&neuron_weight_rows(&tuned, opts.source), &heavy, &opts)?;
    println!(
        "rescaled group: {} eigenvalues, tail k = {}, threshold {:.4}, alpha {:.3}",
        esd.eigenvalues.len(),
        tail.k,
        tail.lambda_min,
        alpha
    );

    let groups = [heavy, control];
    let report = group_alpha_report(&[("base".into(), &base), ("rescaled".into(), &tuned)], &groups, &opts);
    println!("\n{:<10} {:<8} {:>8} {:>5}", "model", "group", "alpha", "k");
    for e in &report.entries {
        println!("{:<10} {:<8} {:>8.3} {:>5}", e.checkpoint, e.group, e.alpha.unwrap_or(f64::NAN), e.k.unwrap_or(0));
    }
    for d in &report.deltas {
        println!("{}: alpha({}) - alpha({}) = {:+.3}", d.checkpoint, d.group, d.control, d.delta);
    }
    Ok(())
}
