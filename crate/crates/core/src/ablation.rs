//! Mean-ablation influence of final-MLP neurons.
//!
//! Clamping neuron `i` of the final MLP to its mean `n̄_i` moves the final
//! hidden state to `x + (n̄_i - n_i) · w_out^(i)` and changes nothing else,
//! so the sweep never reruns the transformer: it only re-decodes perturbed
//! hidden states. [`brute_force_ablate`](crate::model::brute_force_ablate)
//! reruns the full model and serves as the oracle for this shortcut.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalSet, ScoringBlock, TokenStream};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{brute_force_ablate, cross_entropy, forward_cached, ForwardCache, Model};

/// Forward caches for every scoring block of a token stream.
#[derive(Debug, Clone)]
pub struct CorpusCache {
    pub blocks: Vec<(ScoringBlock, ForwardCache)>,
    index: HashMap<usize, (usize, usize)>,
}

impl CorpusCache {
    /// Runs the model over each block of `stream` (blocks are independent
    /// and processed on up to `workers` threads).
    pub fn build(model: &Model, stream: &TokenStream, context_len: usize, workers: usize) -> Result<Self> {
        if context_len > model.config.max_seq {
            return Err(Error::contract(format!(
                "context_len {context_len} exceeds max_seq {}",
                model.config.max_seq
            )));
        }
        stream.check_vocab(model.config.vocab_size)?;
        let blocks = stream.scoring_blocks(context_len);
        let caches: Result<Vec<ForwardCache>> = with_workers(workers, || {
            blocks
                .par_iter()
                .map(|b| forward_cached(model, b.inputs(stream), b.targets(stream)))
                .collect()
        });
        let blocks: Vec<_> = blocks.into_iter().zip(caches?).collect();
        Ok(CorpusCache::from_blocks(blocks))
    }

    pub fn from_blocks(blocks: Vec<(ScoringBlock, ForwardCache)>) -> Self {
        let mut index = HashMap::new();
        for (bi, (block, _)) in blocks.iter().enumerate() {
            for (row, pos) in block.target_positions().enumerate() {
                index.insert(pos, (bi, row));
            }
        }
        CorpusCache { blocks, index }
    }

    /// `(block, row)` holding the prediction of the token at `position`.
    pub fn locate(&self, position: usize) -> Option<(usize, usize)> {
        self.index.get(&position).copied()
    }

    pub fn caches(&self) -> impl Iterator<Item = &ForwardCache> {
        self.blocks.iter().map(|(_, c)| c)
    }

    pub fn positions(&self) -> usize {
        self.index.len()
    }
}

pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanActivations {
    pub means: Vec<f64>,
    pub count: usize,
    pub source: String,
}

/// Per-neuron mean of final-MLP activations over every position of every
/// cache, summed in position order with Neumaier compensation.
pub fn mean_activations<'a>(caches: impl IntoIterator<Item = &'a ForwardCache>) -> Result<MeanActivations> {
    let mut sums: Vec<(f64, f64)> = Vec::new();
    let mut count = 0usize;
    for cache in caches {
        let width = cache.acts.cols;
        if sums.is_empty() {
            sums = vec![(0.0, 0.0); width];
        } else if sums.len() != width {
            return Err(Error::contract("caches disagree on d_mlp"));
        }
        for t in 0..cache.acts.rows {
            for (acc, &v) in sums.iter_mut().zip(cache.acts.row(t)) {
                let s = acc.0 + v;
                if acc.0.abs() >= v.abs() {
                    acc.1 += (acc.0 - s) + v;
                } else {
                    acc.1 += (v - s) + acc.0;
                }
                acc.0 = s;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("mean activations need at least one position"));
    }
    let n = count as f64;
    Ok(MeanActivations {
        means: sums.iter().map(|(s, c)| (s + c) / n).collect(),
        count,
        source: String::new(),
    })
}

/// Cached quantities for each eval pair, in eval-set order.
#[derive(Debug, Clone)]
pub struct EvalRows {
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    /// `P x d_model` final hidden states.
    pub x: Matrix,
    /// `P x d_mlp` final-MLP activations.
    pub acts: Matrix,
    pub base_loss: Vec<f64>,
}

impl EvalRows {
    pub fn gather(cache: &CorpusCache, eval: &EvalSet) -> Result<Self> {
        let first = cache
            .caches()
            .next()
            .ok_or_else(|| Error::contract("empty corpus cache"))?;
        let (d, dm) = (first.x.cols, first.acts.cols);
        let p = eval.len();
        let mut rows = EvalRows {
            positions: Vec::with_capacity(p),
            targets: Vec::with_capacity(p),
            x: Matrix::zeros(p, d),
            acts: Matrix::zeros(p, dm),
            base_loss: Vec::with_capacity(p),
        };
        for (i, pair) in eval.pairs.iter().enumerate() {
            let (b, r) = cache.locate(pair.position).ok_or_else(|| {
                Error::contract(format!("eval position {} missing from caches", pair.position))
            })?;
            let fc = &cache.blocks[b].1;
            if fc.targets[r] != pair.target {
                return Err(Error::contract(format!(
                    "cache target at position {} is {} but eval pair expects {}",
                    pair.position, fc.targets[r], pair.target
                )));
            }
            rows.positions.push(pair.position);
            rows.targets.push(pair.target);
            rows.x.row_mut(i).copy_from_slice(fc.x.row(r));
            rows.acts.row_mut(i).copy_from_slice(fc.acts.row(r));
            rows.base_loss.push(fc.loss[r]);
        }
        Ok(rows)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    /// `E|L(ablated) - L(original)|` per neuron.
    pub abs_dloss: Vec<f64>,
    /// `E[L(ablated) - L(original)]` per neuron.
    pub signed_effect: Vec<f64>,
    pub eval_pairs: usize,
    pub model: String,
}

impl InfluenceProfile {
    pub fn len(&self) -> usize {
        self.abs_dloss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs_dloss.is_empty()
    }
}

/// Precomputed pieces that turn a perturbed hidden state into logits
/// without re-running LayerNorm and the unembedding from scratch.
///
/// With `x' = x + c·w`, the final LayerNorm output is
/// `g ⊙ (x' - μ') / σ' + b`, so
/// `U·LN(x') = (U(g⊙x) + c·U(g⊙w) - μ'·U g) / σ' + U b`,
/// where `μ'` and `σ'²` follow from the moments of `x` and `w`.
struct Decoder<'a> {
    model: &'a Model,
    u_gain: Vec<f64>,
    u_bias: Vec<f64>,
    /// `d_mlp x vocab`: `U(g ⊙ w_out^(i))`.
    u_dir: Matrix,
    /// Centered output directions, `d_mlp x d_model`.
    dir_centered: Matrix,
    dir_mean: Vec<f64>,
    dir_var: Vec<f64>,
}

struct PositionTerms {
    /// `P x vocab`: `U(g ⊙ x)`.
    u_x: Matrix,
    x_centered: Matrix,
    x_mean: Vec<f64>,
    x_var: Vec<f64>,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a Model) -> Self {
        let u = &model.weights.unembed;
        let ln = &model.weights.final_ln;
        let (d, dm, vocab) = (model.config.d_model, model.config.d_mlp, model.config.vocab_size);
        let w_out_t = model.final_layer().w_out.transpose();
        let mut u_dir = Matrix::zeros(dm, vocab);
        let mut dir_centered = Matrix::zeros(dm, d);
        let mut dir_mean = Vec::with_capacity(dm);
        let mut dir_var = Vec::with_capacity(dm);
        let mut scaled = vec![0.0; d];
        for i in 0..dm {
            let w = w_out_t.row(i);
            for k in 0..d {
                scaled[k] = ln.gain[k] * w[k];
            }
            u.matvec_into(&scaled, u_dir.row_mut(i));
            let (m, v) = moments(w, dir_centered.row_mut(i));
            dir_mean.push(m);
            dir_var.push(v);
        }
        Decoder {
            model,
            u_gain: u.matvec(&ln.gain),
            u_bias: u.matvec(&ln.bias),
            u_dir,
            dir_centered,
            dir_mean,
            dir_var,
        }
    }

    fn position_terms(&self, x: &Matrix) -> PositionTerms {
        let u = &self.model.weights.unembed;
        let gain = &self.model.weights.final_ln.gain;
        let (p, d) = (x.rows, x.cols);
        let mut u_x = Matrix::zeros(p, u.rows);
        let mut x_centered = Matrix::zeros(p, d);
        let mut x_mean = Vec::with_capacity(p);
        let mut x_var = Vec::with_capacity(p);
        let mut scaled = vec![0.0; d];
        for t in 0..p {
            let row = x.row(t);
            for k in 0..d {
                scaled[k] = gain[k] * row[k];
            }
            u.matvec_into(&scaled, u_x.row_mut(t));
            let (m, v) = moments(row, x_centered.row_mut(t));
            x_mean.push(m);
            x_var.push(v);
        }
        PositionTerms {
            u_x,
            x_centered,
            x_mean,
            x_var,
        }
    }

    /// Loss at position `t` after shifting its hidden state by `c · w_out^(neuron)`.
    fn shifted_loss(&self, terms: &PositionTerms, t: usize, neuron: usize, c: f64, target: usize, logits: &mut [f64]) -> f64 {
        let d = self.dir_centered.cols as f64;
        let cov = dot(terms.x_centered.row(t), self.dir_centered.row(neuron)) / d;
        let mean = terms.x_mean[t] + c * self.dir_mean[neuron];
        let var = (terms.x_var[t] + 2.0 * c * cov + c * c * self.dir_var[neuron]).max(0.0);
        let inv = 1.0 / (var + self.model.config.layernorm_eps).sqrt();
        let ux = terms.u_x.row(t);
        let ud = self.u_dir.row(neuron);
        for j in 0..logits.len() {
            logits[j] = (ux[j] + c * ud[j] - mean * self.u_gain[j]) * inv + self.u_bias[j];
        }
        cross_entropy(logits, target)
    }
}

fn moments(v: &[f64], centered: &mut [f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut var = 0.0;
    for (c, &x) in centered.iter_mut().zip(v) {
        *c = x - mean;
        var += *c * *c;
    }
    (mean, var / n)
}

/// Mean-ablation sweep over every final-MLP neuron.
///
/// Neurons are distributed over `workers` threads; each neuron's reduction
/// runs on one thread in eval order, so the result does not depend on the
/// worker count.
pub fn influence_sweep(model: &Model, rows: &EvalRows, means: &MeanActivations, workers: usize) -> Result<InfluenceProfile> {
    let dm = model.config.d_mlp;
    if means.means.len() != dm {
        return Err(Error::contract(format!(
            "{} mean activations for d_mlp {dm}",
            means.means.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::contract("influence sweep needs at least one eval pair"));
    }
    let decoder = Decoder::new(model);
    let terms = decoder.position_terms(&rows.x);
    let vocab = model.config.vocab_size;
    let p = rows.len();

    let mut base = vec![0.0; p];
    let mut logits = vec![0.0; vocab];
    for (t, b) in base.iter_mut().enumerate() {
        *b = decoder.shifted_loss(&terms, t, 0, 0.0, rows.targets[t] as usize, &mut logits);
    }

    const TILE: usize = 16;
    let tiles: Vec<(Vec<f64>, Vec<f64>)> = with_workers(workers, || {
        (0..dm.div_ceil(TILE))
            .into_par_iter()
            .map(|tile| {
                let mut logits = vec![0.0; vocab];
                let lo = tile * TILE;
                let hi = (lo + TILE).min(dm);
                let mut abs = Vec::with_capacity(hi - lo);
                let mut signed = Vec::with_capacity(hi - lo);
                for neuron in lo..hi {
                    let (mut sa, mut ss) = (0.0, 0.0);
                    for t in 0..p {
                        let c = means.means[neuron] - rows.acts.get(t, neuron);
                        let l = decoder.shifted_loss(&terms, t, neuron, c, rows.targets[t] as usize, &mut logits);
                        let delta = l - base[t];
                        sa += delta.abs();
                        ss += delta;
                    }
                    abs.push(sa / p as f64);
                    signed.push(ss / p as f64);
                }
                (abs, signed)
            })
            .collect()
    });
    let (mut abs_dloss, mut signed_effect) = (Vec::with_capacity(dm), Vec::with_capacity(dm));
    for (a, s) in tiles {
        abs_dloss.extend(a);
        signed_effect.extend(s);
    }
    Ok(InfluenceProfile {
        abs_dloss,
        signed_effect,
        eval_pairs: p,
        model: String::new(),
    })
}

/// Fast-path ablated loss of every eval pair for one neuron.
pub fn fast_ablated_losses(model: &Model, rows: &EvalRows, neuron: usize, mean: f64) -> Vec<f64> {
    let decoder = Decoder::new(model);
    let terms = decoder.position_terms(&rows.x);
    let mut logits = vec![0.0; model.config.vocab_size];
    (0..rows.len())
        .map(|t| {
            let c = mean - rows.acts.get(t, neuron);
            decoder.shifted_loss(&terms, t, neuron, c, rows.targets[t] as usize, &mut logits)
        })
        .collect()
}

/// Brute-force ablated losses at the eval positions: the full model is
/// rerun on every scoring block that contains an eval target.
pub fn brute_force_eval_losses(
    model: &Model,
    stream: &TokenStream,
    cache: &CorpusCache,
    rows: &EvalRows,
    neuron: usize,
    mean: f64,
) -> Result<Vec<f64>> {
    let mut per_block: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for &pos in &rows.positions {
        let (b, r) = cache
            .locate(pos)
            .ok_or_else(|| Error::contract(format!("eval position {pos} missing from caches")))?;
        let losses = match per_block.entry(b) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let block = cache.blocks[b].0;
                e.insert(brute_force_ablate(model, block.inputs(stream), block.targets(stream), neuron, mean)?)
            }
        };
        out.push(losses[r]);
    }
    Ok(out)
}

/// Worst disagreement between the fast path and the full-rerun oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub neurons: Vec<usize>,
    /// max over neurons and eval positions of `|loss_fast - loss_bruteforce|`.
    pub max_loss_deviation: f64,
    /// max over neurons of `|Δloss_fast - Δloss_bruteforce|`.
    pub max_dloss_deviation: f64,
}

/// Compares fast-path and brute-force ablation for `neurons`.
pub fn oracle_check(
    model: &Model,
    stream: &TokenStream,
    cache: &CorpusCache,
    rows: &EvalRows,
    means: &MeanActivations,
    neurons: &[usize],
    workers: usize,
) -> Result<OracleReport> {
    let p = rows.len() as f64;
    let per_neuron: Result<Vec<(f64, f64)>> = with_workers(workers, || {
        neurons
            .par_iter()
            .map(|&n| {
                let fast = fast_ablated_losses(model, rows, n, means.means[n]);
                let slow = brute_force_eval_losses(model, stream, cache, rows, n, means.means[n])?;
                let mut worst: f64 = 0.0;
                let (mut d_fast, mut d_slow) = (0.0, 0.0);
                for t in 0..rows.len() {
                    worst = worst.max((fast[t] - slow[t]).abs());
                    d_fast += (fast[t] - rows.base_loss[t]).abs();
                    d_slow += (slow[t] - rows.base_loss[t]).abs();
                }
                Ok((worst, ((d_fast - d_slow) / p).abs()))
            })
            .collect()
    });
    let per_neuron = per_neuron?;
    Ok(OracleReport {
        neurons: neurons.to_vec(),
        max_loss_deviation: per_neuron.iter().fold(0.0, |m, r| m.max(r.0)),
        max_dloss_deviation: per_neuron.iter().fold(0.0, |m, r| m.max(r.1)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLabel {
    Boost,
    Suppress,
    Random,
    Custom,
}

impl std::fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupLabel::Boost => "boost",
            GroupLabel::Suppress => "suppress",
            GroupLabel::Random => "random",
            GroupLabel::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronGroup {
    pub label: GroupLabel,
    /// Sorted, unique.
    pub indices: Vec<usize>,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Distinguishes several groups sharing a label (e.g. two random controls).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl NeuronGroup {
    pub fn new(label: GroupLabel, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        NeuronGroup {
            label,
            size: indices.len(),
            indices,
            seed: None,
            name: None,
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.label.to_string())
    }

    pub fn validate(&self, d_mlp: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= d_mlp) {
            return Err(Error::contract(format!(
                "group {} index {bad} outside d_mlp {d_mlp}",
                self.display_name()
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "group {} indices must be sorted and unique",
                self.display_name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedGroups {
    pub boost: NeuronGroup,
    pub suppress: NeuronGroup,
    pub random: NeuronGroup,
}

impl ClassifiedGroups {
    pub fn as_vec(&self) -> Vec<NeuronGroup> {
        vec![self.boost.clone(), self.suppress.clone(), self.random.clone()]
    }
}

fn top_k(profile: &InfluenceProfile, k: usize, keep: impl Fn(f64) -> bool) -> (Vec<usize>, usize) {
    let mut cand: Vec<usize> = (0..profile.len())
        .filter(|&i| keep(profile.signed_effect[i]))
        .collect();
    let available = cand.len();
    cand.sort_by(|&a, &b| {
        profile.abs_dloss[b]
            .total_cmp(&profile.abs_dloss[a])
            .then(a.cmp(&b))
    });
    cand.truncate(k);
    (cand, available)
}

/// Draws `k` distinct neurons outside `exclude`, uniformly with `seed`.
pub fn random_group(d_mlp: usize, k: usize, exclude: &[usize], seed: u64) -> Result<NeuronGroup> {
    let pool: Vec<usize> = (0..d_mlp).filter(|i| !exclude.contains(i)).collect();
    if pool.len() < k {
        return Err(Error::analysis(format!(
            "random group needs {k} neurons but only {} remain",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), k);
    let mut g = NeuronGroup::new(GroupLabel::Random, picks.into_iter().map(|i| pool[i]).collect());
    g.seed = Some(seed);
    Ok(g)
}

/// Splits the top-`k` neurons by sign of their mean effect.
///
/// `s_i > 0` (ablation raises rare-token loss) marks a boosting neuron,
/// `s_i < 0` a suppressing one. Ties on `|Δloss|` go to the lower index.
pub fn classify_groups(profile: &InfluenceProfile, k: usize, seed: u64) -> Result<ClassifiedGroups> {
    let dm = profile.len();
    if k == 0 || 3 * k > dm {
        return Err(Error::contract(format!("group size {k} must be in 1..={}", dm / 3)));
    }
    let (boost, n_pos) = top_k(profile, k, |s| s > 0.0);
    let (suppress, n_neg) = top_k(profile, k, |s| s < 0.0);
    if n_pos == 0 && n_neg == 0 {
        return Err(Error::analysis("no signed candidates: every neuron has zero mean effect"));
    }
    if n_pos < k || n_neg < k {
        return Err(Error::analysis(format!(
            "need {k} neurons per side but found {n_pos} boosting and {n_neg} suppressing"
        )));
    }
    let exclude: Vec<usize> = boost.iter().chain(&suppress).copied().collect();
    Ok(ClassifiedGroups {
        boost: NeuronGroup::new(GroupLabel::Boost, boost),
        suppress: NeuronGroup::new(GroupLabel::Suppress, suppress),
        random: random_group(dm, k, &exclude, seed)?,
    })
}
