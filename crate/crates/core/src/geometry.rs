//! Activation-space statistics for neuron groups.

use serde::{Deserialize, Serialize};

use crate::ablation::{EvalRows, GroupLabel, NeuronGroup};
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eig_matrix, Matrix};

/// One row per neuron, one column per token context.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub neurons: Vec<usize>,
    pub data: Matrix,
}

impl ActivationMatrix {
    pub fn new(neurons: Vec<usize>, data: Matrix) -> Result<Self> {
        if neurons.len() != data.rows {
            return Err(Error::contract(format!(
                "{} neuron ids for {} activation rows",
                neurons.len(),
                data.rows
            )));
        }
        if let Some(i) = data.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite activation at flat index {i}")));
        }
        Ok(ActivationMatrix { neurons, data })
    }

    /// Rows for `group` taken from `acts` (`positions x d_mlp`).
    pub fn for_group(acts: &Matrix, group: &NeuronGroup) -> Result<Self> {
        group.validate(acts.cols)?;
        let t = acts.rows;
        let mut data = Matrix::zeros(group.indices.len(), t);
        for (r, &n) in group.indices.iter().enumerate() {
            for p in 0..t {
                data.data[r * t + p] = acts.get(p, n);
            }
        }
        ActivationMatrix::new(group.indices.clone(), data)
    }

    pub fn n(&self) -> usize {
        self.data.rows
    }

    pub fn t(&self) -> usize {
        self.data.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDimension {
    pub d_eff: usize,
    pub proportion: f64,
    pub participation_ratio: f64,
    pub n: usize,
    pub tau: f64,
}

pub const DEFAULT_TAU: f64 = 0.9;

/// Variance-threshold dimension and participation ratio from covariance
/// eigenvalues in any order. Negative values are treated as zero.
pub fn dimension_from_eigenvalues(eigenvalues: &[f64], tau: f64) -> Result<EffectiveDimension> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::contract(format!("variance threshold must be in (0, 1), got {tau}")));
    }
    let mut lam: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    lam.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = lam.iter().sum();
    if !(total > 0.0) {
        return Err(Error::analysis("constant activations: zero total variance"));
    }
    let mut acc = 0.0;
    let mut d_eff = lam.len();
    for (i, v) in lam.iter().enumerate() {
        acc += v;
        if acc / total >= tau {
            d_eff = i + 1;
            break;
        }
    }
    let sq: f64 = lam.iter().map(|v| v * v).sum();
    let n = lam.len();
    Ok(EffectiveDimension {
        d_eff,
        proportion: d_eff as f64 / n as f64,
        participation_ratio: (total * total / sq).clamp(1.0, n as f64),
        n,
        tau,
    })
}

fn centered(row: &[f64]) -> Vec<f64> {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    row.iter().map(|v| v - mean).collect()
}

/// Neuron-by-neuron covariance (divisor `T - 1`).
pub fn covariance(acts: &ActivationMatrix) -> Matrix {
    let (n, t) = (acts.n(), acts.t());
    let rows: Vec<Vec<f64>> = (0..n).map(|i| centered(acts.data.row(i))).collect();
    let mut cov = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(&rows[i], &rows[j]) / (t as f64 - 1.0);
            cov.data[i * n + j] = v;
            cov.data[j * n + i] = v;
        }
    }
    cov
}

pub fn effective_dimension(acts: &ActivationMatrix, tau: f64) -> Result<EffectiveDimension> {
    let (n, t) = (acts.n(), acts.t());
    if n < 2 {
        return Err(Error::contract(format!("effective dimension needs at least 2 neurons, got {n}")));
    }
    if t < n {
        return Err(Error::contract(format!(
            "effective dimension needs at least as many contexts as neurons ({t} < {n})"
        )));
    }
    let eig = sym_eig_matrix(&covariance(acts), false)?;
    dimension_from_eigenvalues(&eig.spectrum.eigenvalues, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub pairs: usize,
    /// Neuron ids dropped because their vectors were zero.
    pub excluded: Vec<usize>,
    /// Row-major similarities between the kept rows of each side.
    #[serde(skip)]
    pub matrix: Vec<Vec<f64>>,
}

fn unit_rows(ids: &[usize], m: &Matrix, center: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (r, &id) in ids.iter().enumerate() {
        let v = if center { centered(m.row(r)) } else { m.row(r).to_vec() };
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            excluded.push(id);
        } else {
            kept.push(v.iter().map(|x| x / norm).collect());
        }
    }
    (kept, excluded)
}

fn pair_stats(a: (&[usize], &Matrix), b: Option<(&[usize], &Matrix)>, center: bool) -> Result<PairStats> {
    if let Some((_, mb)) = b {
        if mb.cols != a.1.cols {
            return Err(Error::contract(format!(
                "vector lengths differ: {} vs {}",
                a.1.cols, mb.cols
            )));
        }
    }
    let (ua, mut excluded) = unit_rows(a.0, a.1, center);
    let ub = b.map(|(ids, m)| {
        let (u, ex) = unit_rows(ids, m, center);
        excluded.extend(ex);
        u
    });
    let other = ub.as_ref().unwrap_or(&ua);
    let matrix: Vec<Vec<f64>> = ua
        .iter()
        .map(|x| other.iter().map(|y| dot(x, y).clamp(-1.0, 1.0)).collect())
        .collect();
    let mut vals = Vec::new();
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if ub.is_some() || j > i {
                vals.push(v);
            }
        }
    }
    if vals.is_empty() {
        return Err(Error::analysis("no valid vectors"));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    excluded.sort_unstable();
    excluded.dedup();
    Ok(PairStats {
        mean,
        std: var.sqrt(),
        pairs: vals.len(),
        excluded,
        matrix,
    })
}

/// Cosine similarity over all cross pairs, or over distinct pairs within
/// `a` when `b` is `None`.
pub fn pairwise_cosine_stats(a: &ActivationMatrix, b: Option<&ActivationMatrix>) -> Result<PairStats> {
    pair_stats((&a.neurons, &a.data), b.map(|b| (b.neurons.as_slice(), &b.data)), false)
}

/// Pearson correlation with the same pairing rules as the cosine version.
pub fn pairwise_correlation_stats(a: &ActivationMatrix, b: Option<&ActivationMatrix>) -> Result<PairStats> {
    pair_stats((&a.neurons, &a.data), b.map(|b| (b.neurons.as_slice(), &b.data)), true)
}

/// Cosine statistics between output directions (columns of `w_out`).
pub fn weight_cosine(w_out: &Matrix, a: &NeuronGroup, b: Option<&NeuronGroup>) -> Result<PairStats> {
    let cols = |g: &NeuronGroup| -> Result<Matrix> {
        g.validate(w_out.cols)?;
        let d = w_out.rows;
        let mut m = Matrix::zeros(g.indices.len(), d);
        for (r, &n) in g.indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&w_out.column(n));
        }
        Ok(m)
    };
    let ma = cols(a)?;
    let mb = b.map(cols).transpose()?;
    pair_stats(
        (&a.indices, &ma),
        b.zip(mb.as_ref()).map(|(g, m)| (g.indices.as_slice(), m)),
        false,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPairStat {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub stats: PairStats,
}

/// Intra-group statistics for every group and cross statistics for every
/// unordered pair of groups.
pub fn weight_cosine_stats(w_out: &Matrix, groups: &[NeuronGroup]) -> Result<Vec<GroupPairStat>> {
    let mut out = Vec::new();
    for (i, a) in groups.iter().enumerate() {
        for b in &groups[i..] {
            let same = std::ptr::eq(a, b);
            out.push(GroupPairStat {
                a: a.display_name(),
                b: b.display_name(),
                stats: weight_cosine(w_out, a, (!same).then_some(b))?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub count: usize,
    /// Cluster id per kept row, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Neuron ids of the kept rows.
    pub neurons: Vec<usize>,
    /// Neuron ids dropped for zero variance.
    pub excluded: Vec<usize>,
    /// `(a, b, height, size)` in merge order; ids as in a scipy linkage.
    pub merges: Vec<(usize, usize, f64, usize)>,
    #[serde(skip)]
    pub distance: Matrix,
    pub threshold: f64,
}

pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.5;

/// Ward agglomeration on the dissimilarity `D = 1 - |ρ|`.
///
/// Distances are updated with the Lance-Williams Ward rule applied to
/// squared distances, so heights are in the units of `D`. Ties merge the
/// lowest-index pair. The tree is cut at `threshold`: merges with height
/// `<= threshold` join clusters.
pub fn correlation_cluster(acts: &ActivationMatrix, threshold: f64) -> Result<Clustering> {
    let (rows, excluded) = unit_rows(&acts.neurons, &acts.data, true);
    let neurons: Vec<usize> = acts.neurons.iter().copied().filter(|n| !excluded.contains(n)).collect();
    let n = rows.len();
    if n < 2 {
        return Err(Error::analysis(format!(
            "insufficient rows: {n} with non-zero variance, need 2"
        )));
    }
    let mut distance = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let rho = dot(&rows[i], &rows[j]).clamp(-1.0, 1.0);
            let d = (1.0 - rho.abs()).clamp(0.0, 1.0);
            distance.data[i * n + j] = d;
            distance.data[j * n + i] = d;
        }
    }
    let merges = ward_linkage(&distance);
    let labels = cut_tree(n, &merges, threshold);
    let count = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Clustering {
        count,
        labels,
        neurons,
        excluded,
        merges,
        distance,
        threshold,
    })
}

/// Ward linkage over a symmetric distance matrix. Returns merges in
/// scipy's format: cluster ids `< n` are leaves, id `n + s` is the cluster
/// formed at step `s`.
pub fn ward_linkage(distance: &Matrix) -> Vec<(usize, usize, f64, usize)> {
    let n = distance.rows;
    let mut d = distance.data.clone();
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && d[i * n + j] < best.0 {
                    best = (d[i * n + j], i, j);
                }
            }
        }
        let (h, i, j) = best;
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let sk = size[k] as f64;
            let (dik, djk) = (d[i * n + k], d[j * n + k]);
            let v = ((si + sk) * dik * dik + (sj + sk) * djk * djk - sk * h * h) / (si + sj + sk);
            let v = v.max(0.0).sqrt();
            d[i * n + k] = v;
            d[k * n + i] = v;
        }
        let (a, b) = (id[i].min(id[j]), id[i].max(id[j]));
        size[i] += size[j];
        active[j] = false;
        id[i] = n + step;
        merges.push((a, b, h, size[i]));
    }
    merges
}

fn cut_tree(n: usize, merges: &[(usize, usize, f64, usize)], threshold: f64) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    // Leaf representative of every cluster id.
    let mut rep: Vec<usize> = (0..n).collect();
    for &(a, b, h, _) in merges {
        let (ra, rb) = (rep[a], rep[b]);
        if h <= threshold {
            let (x, y) = (find(&mut parent, ra), find(&mut parent, rb));
            parent[x.max(y)] = x.min(y);
        }
        rep.push(ra.min(rb));
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            if ids[root] == usize::MAX {
                ids[root] = next;
                next += 1;
            }
            ids[root]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryOptions {
    pub tau: f64,
    pub cluster_threshold: f64,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        GeometryOptions {
            tau: DEFAULT_TAU,
            cluster_threshold: DEFAULT_CLUSTER_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGeometry {
    pub group: String,
    pub label: GroupLabel,
    pub size: usize,
    pub dimension: Option<EffectiveDimension>,
    /// Participation ratio divided by group size.
    pub pr_proportion: Option<f64>,
    pub clusters: Option<Clustering>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub a: String,
    pub b: String,
    pub stats: Option<PairStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub tau: f64,
    pub cluster_threshold: f64,
    pub contexts: usize,
    pub groups: Vec<GroupGeometry>,
    pub activation_cosine: Vec<PairEntry>,
    pub activation_correlation: Vec<PairEntry>,
    pub weight_cosine: Vec<PairEntry>,
}

fn pair_table(
    groups: &[NeuronGroup],
    f: impl Fn(&NeuronGroup, Option<&NeuronGroup>) -> Result<PairStats>,
) -> Vec<PairEntry> {
    let mut out = Vec::new();
    for (i, a) in groups.iter().enumerate() {
        for (j, b) in groups.iter().enumerate().skip(i) {
            let r = f(a, (j != i).then_some(b));
            out.push(PairEntry {
                a: a.display_name(),
                b: b.display_name(),
                error: r.as_ref().err().map(|e| e.to_string()),
                stats: r.ok(),
            });
        }
    }
    out
}

/// Dimension, clustering and similarity tables for `groups`. Per-group and
/// per-pair failures are recorded rather than aborting the report.
pub fn analyze_geometry(rows: &EvalRows, w_out: &Matrix, groups: &[NeuronGroup], opts: &GeometryOptions) -> Result<GeometryReport> {
    let mats: Vec<ActivationMatrix> = groups
        .iter()
        .map(|g| ActivationMatrix::for_group(&rows.acts, g))
        .collect::<Result<_>>()?;
    let per_group = groups
        .iter()
        .zip(&mats)
        .map(|(g, m)| {
            let mut errors = Vec::new();
            let dimension = effective_dimension(m, opts.tau).map_err(|e| errors.push(e.to_string())).ok();
            let clusters = correlation_cluster(m, opts.cluster_threshold)
                .map_err(|e| errors.push(e.to_string()))
                .ok();
            GroupGeometry {
                group: g.display_name(),
                label: g.label,
                size: g.size,
                pr_proportion: dimension.as_ref().map(|d| d.participation_ratio / d.n as f64),
                dimension,
                clusters,
                errors,
            }
        })
        .collect();
    let mat_of = |g: &NeuronGroup| &mats[groups.iter().position(|x| std::ptr::eq(x, g)).unwrap()];
    Ok(GeometryReport {
        tau: opts.tau,
        cluster_threshold: opts.cluster_threshold,
        contexts: rows.acts.rows,
        groups: per_group,
        activation_cosine: pair_table(groups, |a, b| pairwise_cosine_stats(mat_of(a), b.map(mat_of))),
        activation_correlation: pair_table(groups, |a, b| pairwise_correlation_stats(mat_of(a), b.map(mat_of))),
        weight_cosine: pair_table(groups, |a, b| weight_cosine(w_out, a, b)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn acts(rows: Vec<Vec<f64>>) -> ActivationMatrix {
        let (n, t) = (rows.len(), rows[0].len());
        ActivationMatrix::new((0..n).collect(), Matrix::from_vec(n, t, rows.concat())).unwrap()
    }

    pub(crate) fn block_data(blocks: usize, per: usize, t: usize, seed: u64) -> ActivationMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        for _ in 0..blocks {
            let base: Vec<f64> = (0..t).map(|_| z.sample(&mut rng)).collect();
            for _ in 0..per {
                rows.push(base.iter().map(|b| b + 0.33 * z.sample(&mut rng)).collect());
            }
        }
        acts(rows)
    }

    #[test]
    fn isotropic_and_rank_one() {
        let d = dimension_from_eigenvalues(&[1.0, 1.0, 1.0, 1.0], 0.9).unwrap();
        assert_eq!((d.d_eff, d.proportion, d.participation_ratio), (4, 1.0, 4.0));
        let d = dimension_from_eigenvalues(&[100.0, 1e-9, 1e-9, 1e-9], 0.9).unwrap();
        assert_eq!(d.d_eff, 1);
        assert!((d.participation_ratio - 1.0).abs() < 1e-10);
        assert!(dimension_from_eigenvalues(&[0.0, 0.0], 0.9).unwrap_err().to_string().contains("constant activations"));
    }

    #[test]
    fn cosine_basics() {
        let same = acts(vec![vec![1.0, 2.0, 3.0]; 3]);
        let s = pairwise_cosine_stats(&same, None).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-15 && s.std < 1e-7);
        assert_eq!(s.pairs, 3);
        let orth = acts(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let s = pairwise_cosine_stats(&orth, None).unwrap();
        assert_eq!((s.mean, s.pairs, s.excluded.clone()), (0.0, 1, vec![2]));
        let zero = acts(vec![vec![0.0; 3]; 2]);
        assert!(pairwise_cosine_stats(&zero, None).unwrap_err().to_string().contains("no valid vectors"));
    }

    #[test]
    fn correlated_and_anticorrelated_pairs_merge() {
        let c = correlation_cluster(&acts(vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]), 0.5).unwrap();
        assert_eq!(c.count, 1);
        let c = correlation_cluster(&acts(vec![vec![1.0, 2.0, 3.0], vec![-1.0, -2.0, -3.0]]), 0.5).unwrap();
        assert_eq!(c.count, 1);
        assert!(c.distance.get(0, 1) < 1e-12);
    }

    #[test]
    fn constant_rows_excluded() {
        let a = acts(vec![vec![1.0, 2.0, 3.0], vec![5.0; 3], vec![0.0, 1.0, 0.5]]);
        let c = correlation_cluster(&a, 0.5).unwrap();
        assert_eq!(c.excluded, vec![1]);
        assert_eq!(c.neurons, vec![0, 2]);
        let a = acts(vec![vec![1.0, 2.0, 3.0], vec![5.0; 3]]);
        assert!(correlation_cluster(&a, 0.5).unwrap_err().to_string().contains("insufficient rows"));
    }

    #[test]
    fn three_blocks() {
        let c = correlation_cluster(&block_data(3, 6, 400, 9), 0.5).unwrap();
        assert_eq!(c.count, 3);
        assert_eq!(c.labels, [vec![0; 6], vec![1; 6], vec![2; 6]].concat());
    }

    #[test]
    fn distance_matrix_shape() {
        let c = correlation_cluster(&block_data(2, 4, 50, 1), 0.5).unwrap();
        let n = c.distance.rows;
        for i in 0..n {
            assert_eq!(c.distance.get(i, i), 0.0);
            for j in 0..n {
                let v = c.distance.get(i, j);
                assert!((0.0..=1.0).contains(&v) && v == c.distance.get(j, i));
            }
        }
    }

    #[test]
    fn duplicate_weight_columns() {
        let mut w = Matrix::zeros(4, 3);
        for r in 0..4 {
            w.data[r * 3] = r as f64 + 1.0;
            w.data[r * 3 + 1] = r as f64 + 1.0;
        }
        let g = NeuronGroup::new(GroupLabel::Custom, vec![0, 1]);
        assert!((weight_cosine(&w, &g, None).unwrap().mean - 1.0).abs() < 1e-15);
        let other = NeuronGroup::new(GroupLabel::Random, vec![1, 2]);
        let cross = weight_cosine(&w, &g, Some(&other)).unwrap();
        assert_eq!((cross.pairs, cross.excluded.clone()), (2, vec![2]));
        assert!(weight_cosine_stats(&w, &[g.clone(), other]).is_err());
        assert_eq!(weight_cosine_stats(&w, &[g.clone(), g]).unwrap().len(), 3);
    }

    #[test]
    fn near_orthogonal_weight_columns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let z = Normal::new(0.0, 1.0).unwrap();
        let d = 256;
        let w = Matrix::from_vec(d, 40, (0..d * 40).map(|_| z.sample(&mut rng)).collect());
        let g = NeuronGroup::new(GroupLabel::Custom, (0..40).collect());
        let s = weight_cosine(&w, &g, None).unwrap();
        assert!(s.mean.abs() < 2.0 / (d as f64).sqrt());
    }

    proptest! {
        #[test]
        fn dimension_permutation_and_scale_invariant(seed in 0u64..200, scale in 0.1f64..10.0) {
            let a = block_data(2, 3, 30, seed);
            let base = effective_dimension(&a, 0.9).unwrap();
            let mut rows: Vec<Vec<f64>> = (0..a.n()).map(|i| a.data.row(i).iter().map(|v| v * scale).collect()).collect();
            rows.reverse();
            let b = effective_dimension(&acts(rows), 0.9).unwrap();
            prop_assert_eq!(base.d_eff, b.d_eff);
            prop_assert!((base.participation_ratio - b.participation_ratio).abs() < 1e-8);
            prop_assert!(base.participation_ratio >= 1.0 && base.participation_ratio <= 6.0);
        }

        #[test]
        fn cosine_row_scale_invariant(seed in 0u64..200, scales in prop::collection::vec(0.1f64..10.0, 6)) {
            let a = block_data(2, 3, 20, seed);
            let rows: Vec<Vec<f64>> = (0..6).map(|i| a.data.row(i).iter().map(|v| v * scales[i]).collect()).collect();
            let s1 = pairwise_cosine_stats(&a, None).unwrap();
            let s2 = pairwise_cosine_stats(&acts(rows), None).unwrap();
            prop_assert!((s1.mean - s2.mean).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1.mean));
        }

        #[test]
        fn cluster_count_monotone_in_threshold(seed in 0u64..100) {
            let a = block_data(3, 3, 15, seed);
            let mut last = usize::MAX;
            for t in [0.0, 0.1, 0.3, 0.5, 0.8, 1.2, 5.0] {
                let c = correlation_cluster(&a, t).unwrap();
                prop_assert!(c.count <= last);
                last = c.count;
            }
            prop_assert_eq!(last, 1);
        }
    }
}
