//! Heavy-tail spectral analysis of neuron-group weight slices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{with_workers, GroupLabel, NeuronGroup};
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eig_matrix, Matrix};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(1/d) W_G W_Gᵀ`, one row and column per group member.
    #[default]
    GroupGram,
    /// `W_Gᵀ W_G`, one row and column per model dimension.
    Raw,
}

/// Which per-neuron weight vector goes into the slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    #[default]
    WInRows,
    WOutColumns,
}

/// Final-MLP weights with one row per neuron.
pub fn neuron_weight_rows(model: &Model, source: WeightSource) -> Matrix {
    let layer = model.final_layer();
    match source {
        WeightSource::WInRows => layer.w_in.clone(),
        WeightSource::WOutColumns => layer.w_out.transpose(),
    }
}

/// Empirical spectral distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    /// Ascending, non-negative.
    pub eigenvalues: Vec<f64>,
    pub label: String,
    pub normalization: Normalization,
}

/// Eigenvalues at or below this fraction of the largest are treated as zero.
pub const RELATIVE_ZERO: f64 = 1e-9;

impl Esd {
    /// Clamps negatives and numerically-zero eigenvalues to exactly 0.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>, label: impl Into<String>, normalization: Normalization) -> Self {
        eigenvalues.sort_by(f64::total_cmp);
        let top = eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
        for v in &mut eigenvalues {
            if *v <= RELATIVE_ZERO * top {
                *v = 0.0;
            }
        }
        Esd {
            eigenvalues,
            label: label.into(),
            normalization,
        }
    }

    pub fn positive(&self) -> &[f64] {
        let start = self.eigenvalues.partition_point(|&v| v <= 0.0);
        &self.eigenvalues[start..]
    }
}

fn gram(rows: &[&[f64]], scale: f64) -> Matrix {
    let n = rows.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(rows[i], rows[j]) * scale;
            g.data[i * n + j] = v;
            g.data[j * n + i] = v;
        }
    }
    g
}

/// Spectrum of a group's weight correlation matrix. `w` holds one row per
/// neuron.
pub fn group_correlation_esd(w: &Matrix, group: &NeuronGroup, normalization: Normalization) -> Result<Esd> {
    group.validate(w.rows)?;
    if group.indices.len() < 3 {
        return Err(Error::analysis(format!(
            "group too small for spectral analysis: {} has {} neurons",
            group.display_name(),
            group.indices.len()
        )));
    }
    let rows: Vec<&[f64]> = group.indices.iter().map(|&i| w.row(i)).collect();
    let xi = match normalization {
        Normalization::GroupGram => gram(&rows, 1.0 / w.cols as f64),
        Normalization::Raw => {
            let cols: Vec<Vec<f64>> = (0..w.cols).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            gram(&refs, 1.0)
        }
    };
    let eig = sym_eig_matrix(&xi, false)?;
    Ok(Esd::from_eigenvalues(eig.spectrum.eigenvalues, group.display_name(), normalization))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailChoice {
    pub k: usize,
    pub lambda_min: f64,
    pub peak_bin: usize,
}

pub const DEFAULT_BINS: usize = 64;

/// Picks the tail size by aligning `λ_min` with the peak of a log-spaced
/// histogram of the positive eigenvalues.
///
/// `λ_min` is the geometric midpoint of the fullest bin (ties to the lower
/// bin) and `k` counts eigenvalues strictly above it, capped one below the
/// positive count so a threshold eigenvalue always exists.
pub fn fix_finger_k(esd: &Esd, bins: usize) -> Result<TailChoice> {
    if bins < 8 {
        return Err(Error::contract(format!("fix-finger needs at least 8 bins, got {bins}")));
    }
    let pos = esd.positive();
    if pos.len() < 10 {
        return Err(Error::analysis(format!(
            "fix-finger needs at least 10 positive eigenvalues, {} has {}",
            esd.label,
            pos.len()
        )));
    }
    // Offsets from the smallest eigenvalue, taken as log-ratios so that a
    // uniform rescaling leaves the binning unchanged.
    let floor = pos[0];
    let logs: Vec<f64> = pos.iter().map(|v| (v / floor).log10()).collect();
    let width = logs[logs.len() - 1] / bins as f64;
    if !(width > 0.0) {
        return Err(Error::analysis("degenerate tail; no eigenvalues above peak"));
    }
    let mut counts = vec![0usize; bins];
    for lg in &logs {
        let b = ((lg / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut peak = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c > counts[peak] {
            peak = b;
        }
    }
    let lambda_min = floor * 10f64.powf((peak as f64 + 0.5) * width);
    let above = pos.iter().filter(|&&v| v > lambda_min).count();
    if above == 0 {
        return Err(Error::analysis("degenerate tail; no eigenvalues above peak"));
    }
    Ok(TailChoice {
        k: above.min(pos.len() - 1),
        lambda_min,
        peak_bin: peak,
    })
}

/// Hill tail index over the `k` largest eigenvalues, thresholded at the
/// `(k+1)`-th largest.
pub fn hill_alpha(eigenvalues: &[f64], k: usize) -> Result<f64> {
    let mut desc = eigenvalues.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    if k == 0 || k >= desc.len() {
        return Err(Error::contract(format!(
            "hill estimator needs 1 <= k < {}, got {k}",
            desc.len()
        )));
    }
    let threshold = desc[k];
    if !(threshold > 0.0) {
        return Err(Error::analysis("non-positive tail threshold"));
    }
    let mean_log = desc[..k].iter().map(|v| (v / threshold).ln()).sum::<f64>() / k as f64;
    if !(mean_log > 0.0) {
        return Err(Error::analysis("degenerate tail; top eigenvalues equal the threshold"));
    }
    Ok(1.0 / mean_log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEntry {
    pub checkpoint: String,
    pub group: String,
    pub label: GroupLabel,
    pub group_size: usize,
    pub eigencount: usize,
    pub positive_count: usize,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub lambda_min: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaDelta {
    pub checkpoint: String,
    pub group: String,
    pub control: String,
    /// `α(group) - α(control)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub source: WeightSource,
    pub normalization: Normalization,
    pub bins: usize,
    pub entries: Vec<SpectralEntry>,
    pub deltas: Vec<AlphaDelta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub source: WeightSource,
    pub normalization: Normalization,
    pub bins: usize,
    pub workers: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            source: WeightSource::default(),
            normalization: Normalization::default(),
            bins: DEFAULT_BINS,
            workers: 1,
        }
    }
}

pub fn group_alpha(w: &Matrix, group: &NeuronGroup, opts: &SpectralOptions) -> Result<(Esd, TailChoice, f64)> {
    let esd = group_correlation_esd(w, group, opts.normalization)?;
    let tail = fix_finger_k(&esd, opts.bins)?;
    let alpha = hill_alpha(esd.positive(), tail.k)?;
    Ok((esd, tail, alpha))
}

fn entry(checkpoint: &str, w: &Matrix, group: &NeuronGroup, opts: &SpectralOptions) -> SpectralEntry {
    let mut e = SpectralEntry {
        checkpoint: checkpoint.to_string(),
        group: group.display_name(),
        label: group.label,
        group_size: group.size,
        eigencount: 0,
        positive_count: 0,
        alpha: None,
        k: None,
        lambda_min: None,
        error: None,
    };
    match group_correlation_esd(w, group, opts.normalization) {
        Err(err) => e.error = Some(err.to_string()),
        Ok(esd) => {
            e.eigencount = esd.eigenvalues.len();
            e.positive_count = esd.positive().len();
            match fix_finger_k(&esd, opts.bins).and_then(|t| Ok((t, hill_alpha(esd.positive(), t.k)?))) {
                Ok((t, a)) => {
                    e.alpha = Some(a);
                    e.k = Some(t.k);
                    e.lambda_min = Some(t.lambda_min);
                }
                Err(err) => e.error = Some(err.to_string()),
            }
        }
    }
    e
}

/// α for every (checkpoint, group) pair. Failures are recorded per entry;
/// deltas compare each non-random group to the first random group.
pub fn group_alpha_report(checkpoints: &[(String, &Model)], groups: &[NeuronGroup], opts: &SpectralOptions) -> SpectralReport {
    let slices: Vec<(&str, Matrix)> = checkpoints
        .iter()
        .map(|(id, m)| (id.as_str(), neuron_weight_rows(m, opts.source)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..slices.len())
        .flat_map(|c| (0..groups.len()).map(move |g| (c, g)))
        .collect();
    let entries: Vec<SpectralEntry> = with_workers(opts.workers, || {
        jobs.par_iter()
            .map(|&(c, g)| entry(slices[c].0, &slices[c].1, &groups[g], opts))
            .collect()
    });
    let mut deltas = Vec::new();
    for (id, _) in checkpoints {
        let here: Vec<&SpectralEntry> = entries.iter().filter(|e| &e.checkpoint == id).collect();
        let Some(control) = here.iter().find(|e| e.label == GroupLabel::Random && e.alpha.is_some()) else {
            continue;
        };
        for e in &here {
            if e.label != GroupLabel::Random {
                if let Some(a) = e.alpha {
                    deltas.push(AlphaDelta {
                        checkpoint: id.clone(),
                        group: e.group.clone(),
                        control: control.group.clone(),
                        delta: a - control.alpha.unwrap(),
                    });
                }
            }
        }
    }
    SpectralReport {
        source: opts.source,
        normalization: opts.normalization,
        bins: opts.bins,
        entries,
        deltas,
    }
}

/// `checkpoint,group,alpha,k,lambda_min` rows; failed entries leave the
/// numeric fields empty.
pub fn spectra_csv(report: &SpectralReport) -> String {
    let mut out = String::from("checkpoint,group,alpha,k,lambda_min\n");
    for e in &report.entries {
        let opt = |v: Option<String>| v.unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.checkpoint,
            e.group,
            opt(e.alpha.map(|a| a.to_string())),
            opt(e.k.map(|k| k.to_string())),
            opt(e.lambda_min.map(|l| l.to_string())),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn custom(indices: Vec<usize>) -> NeuronGroup {
        NeuronGroup::new(GroupLabel::Custom, indices)
    }

    fn esd(vals: Vec<f64>) -> Esd {
        Esd::from_eigenvalues(vals, "t", Normalization::GroupGram)
    }

    fn pareto_grid(n: usize, alpha: f64) -> Vec<f64> {
        (1..=n).map(|i| (i as f64 / n as f64).powf(-1.0 / alpha)).collect()
    }

    #[test]
    fn one_hot_rows() {
        let mut w = Matrix::zeros(3, 4);
        for i in 0..3 {
            w.data[i * 4 + i] = 1.0;
        }
        let e = group_correlation_esd(&w, &custom(vec![0, 1, 2]), Normalization::GroupGram).unwrap();
        assert_eq!(e.eigenvalues.len(), 3);
        for v in &e.eigenvalues {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let raw = group_correlation_esd(&w, &custom(vec![0, 1, 2]), Normalization::Raw).unwrap();
        assert_eq!(raw.eigenvalues.len(), 4);
        assert_eq!(raw.eigenvalues[0], 0.0);
    }

    #[test]
    fn small_group_rejected() {
        let w = Matrix::zeros(4, 4);
        let err = group_correlation_esd(&w, &custom(vec![0, 1]), Normalization::GroupGram).unwrap_err();
        assert!(err.to_string().contains("group too small"));
    }

    #[test]
    fn hill_analytic() {
        let e = std::f64::consts::E;
        assert_eq!(hill_alpha(&[e, 1.0], 1).unwrap(), 1.0);
        assert!(hill_alpha(&[2.0, 0.0], 1).unwrap_err().to_string().contains("non-positive tail"));
        assert!(hill_alpha(&[2.0, 1.0], 2).is_err());
    }

    #[test]
    fn pareto_grid_reference() {
        // Reference values from an independent evaluation of the histogram
        // rule and the estimator.
        let e = esd(pareto_grid(5000, 2.5));
        let t = fix_finger_k(&e, 64).unwrap();
        assert_eq!(t.k, 4678);
        assert!((t.lambda_min - 1.026_973_604_155_944_3).abs() < 1e-12);
        let a = hill_alpha(e.positive(), t.k).unwrap();
        assert!((a - 2.502_216_786_590_281_6).abs() < 1e-9, "{a}");
    }

    #[test]
    fn pareto_grid_thousandfold() {
        let base = esd(pareto_grid(5000, 2.5));
        let scaled = esd(pareto_grid(5000, 2.5).iter().map(|v| v * 1e3).collect());
        let (tb, ts) = (fix_finger_k(&base, 64).unwrap(), fix_finger_k(&scaled, 64).unwrap());
        assert_eq!(tb.k, ts.k);
        let (a, b) = (hill_alpha(base.positive(), tb.k).unwrap(), hill_alpha(scaled.positive(), ts.k).unwrap());
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn bimodal_spectrum() {
        let mut v: Vec<f64> = (0..900).map(|i| 0.99 + 0.01 * i as f64 / 899.0).collect();
        v.extend((0..100).map(|i| 10f64.powf(1.0 + 2.0 * i as f64 / 99.0)));
        let t = fix_finger_k(&esd(v), 64).unwrap();
        assert_eq!(t.k, 100);
        assert!(t.lambda_min > 0.99 && t.lambda_min < 1.1);
    }

    #[test]
    fn uniform_log_ties_go_low() {
        let v: Vec<f64> = (0..64).map(|i| 10f64.powf(i as f64 / 63.0 * 3.0)).collect();
        let t = fix_finger_k(&esd(v), 64).unwrap();
        assert_eq!(t.peak_bin, 0);
        assert_eq!(t.k, 63);
    }

    #[test]
    fn equal_eigenvalues_are_degenerate() {
        let err = fix_finger_k(&esd(vec![2.0; 20]), 64).unwrap_err();
        assert!(err.to_string().contains("degenerate tail"));
    }

    #[test]
    fn clamping_preserves_trace() {
        let e = esd(vec![-1e-12, 1e-20, 3.0, 5.0]);
        assert_eq!(e.eigenvalues, vec![0.0, 0.0, 3.0, 5.0]);
        assert_eq!(e.positive(), &[3.0, 5.0]);
    }

    #[test]
    fn normalizations_share_alpha() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = Matrix::from_vec(40, 64, (0..40 * 64).map(|_| n.sample(&mut rng)).collect());
        let g = custom((0..40).collect());
        let mut opts = SpectralOptions::default();
        let (_, ta, a) = group_alpha(&w, &g, &opts).unwrap();
        opts.normalization = Normalization::Raw;
        let (eb, tb, b) = group_alpha(&w, &g, &opts).unwrap();
        assert_eq!(eb.positive().len(), 40);
        assert_eq!(ta.k, tb.k);
        assert!((a - b).abs() < 1e-8 * a, "{a} vs {b}");
    }

    proptest! {
        #[test]
        fn alpha_scale_and_order_invariant(
            vals in prop::collection::vec(0.01f64..100.0, 20..200),
            scale in prop::sample::select(vec![0.125, 0.5, 2.0, 1024.0]),
        ) {
            let base = esd(vals.clone());
            let scaled = esd(vals.iter().map(|v| v * scale).collect());
            let mut rev = vals.clone();
            rev.reverse();
            let rev = esd(rev);
            if let Ok(t) = fix_finger_k(&base, 64) {
                let ts = fix_finger_k(&scaled, 64).unwrap();
                prop_assert_eq!(t.k, ts.k);
                let a = hill_alpha(base.positive(), t.k);
                let b = hill_alpha(scaled.positive(), ts.k);
                if let (Ok(a), Ok(b)) = (a, b) {
                    prop_assert!((a - b).abs() <= 1e-9 * a);
                }
                prop_assert_eq!(fix_finger_k(&rev, 64).unwrap(), t);
            }
        }
    }
}
