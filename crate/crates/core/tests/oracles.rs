//! Cross-checks against independent implementations: a hand-written
//! forward pass, nalgebra's symmetric eigensolver and kodama's Ward
//! linkage.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtn::ablation::{mean_activations, CorpusCache, GroupLabel, NeuronGroup};
use rtn::geometry::{correlation_cluster, ActivationMatrix};
use rtn::linalg::{sym_eig_matrix, Matrix};
use rtn::model::{forward_cached, Model, ModelConfig};
use rtn::spectra::{group_correlation_esd, Normalization};
use rtn::tensor::Tensor;
use rtn::toy;

fn random_tensors(cfg: &ModelConfig, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if name.ends_with(".gain") {
                        1.0 + 0.2 * v
                    } else {
                        v
                    }
                })
                .collect();
            (name, Tensor::from_f64(shape, &data).unwrap())
        })
        .collect()
}

struct Ref<'a> {
    t: &'a BTreeMap<String, Tensor>,
}

impl Ref<'_> {
    fn v(&self, name: &str) -> Vec<f64> {
        self.t[name].data().iter().map(|&x| x as f64).collect()
    }

    /// `out[i] = sum_j W[i][j] x[j] + b[i]`
    fn affine(&self, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
        let wt = &self.t[w];
        let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
        let wd = self.v(w);
        let bd = self.v(b);
        (0..rows)
            .map(|i| (0..cols).map(|j| wd[i * cols + j] * x[j]).sum::<f64>() + bd[i])
            .collect()
    }

    fn layer_norm(&self, prefix: &str, x: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let g = self.v(&format!("{prefix}.gain"));
        let b = self.v(&format!("{prefix}.bias"));
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g[i] + b[i])
            .collect()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straightforward pre-LN decoder with tied unembedding.
fn reference_losses(cfg: &ModelConfig, t: &BTreeMap<String, Tensor>, tokens: &[u32], targets: &[u32]) -> Vec<f64> {
    let r = Ref { t };
    let d = cfg.d_model;
    let dh = d / cfg.n_head;
    let wte = r.v("wte");
    let wpe = r.v("wpe");
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &tok)| (0..d).map(|i| wte[tok as usize * d + i] + wpe[p * d + i]).collect())
        .collect();
    for l in 0..cfg.n_layer {
        let pre = |s: &str| format!("h.{l}.{s}");
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|x| r.affine(&pre("attn.w_qkv"), &pre("attn.b_qkv"), &r.layer_norm(&pre("ln1"), x, cfg.layernorm_eps)))
            .collect();
        let mut attn_out = Vec::new();
        for i in 0..h.len() {
            let mut heads = vec![0.0; d];
            for hd in 0..cfg.n_head {
                let q = &qkv[i][hd * dh..(hd + 1) * dh];
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + hd * dh..d + (hd + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=i {
                    let p = (logits[j] - m).exp() / z;
                    for c in 0..dh {
                        heads[hd * dh + c] += p * qkv[j][2 * d + hd * dh + c];
                    }
                }
            }
            attn_out.push(r.affine(&pre("attn.w_out"), &pre("attn.b_out"), &heads));
        }
        for (x, a) in h.iter_mut().zip(attn_out) {
            for (xi, ai) in x.iter_mut().zip(a) {
                *xi += ai;
            }
        }
        for x in h.iter_mut() {
            let hidden: Vec<f64> = r
                .affine(&pre("mlp.w_in"), &pre("mlp.b_in"), &r.layer_norm(&pre("ln2"), x, cfg.layernorm_eps))
                .into_iter()
                .map(gelu)
                .collect();
            let out = r.affine(&pre("mlp.w_out"), &pre("mlp.b_out"), &hidden);
            for (xi, o) in x.iter_mut().zip(out) {
                *xi += o;
            }
        }
    }
    h.iter()
        .zip(targets)
        .map(|(x, &tgt)| {
            let n = r.layer_norm("final_ln", x, cfg.layernorm_eps);
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|v| (0..d).map(|i| wte[v * d + i] * n[i]).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            lse - logits[tgt as usize]
        })
        .collect()
}

fn check_forward(cfg: ModelConfig, seed: u64) {
    let tensors = random_tensors(&cfg, seed);
    let model = Model::from_tensors(cfg.clone(), &tensors).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let tokens: Vec<u32> = (0..cfg.max_seq).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let targets: Vec<u32> = (0..cfg.max_seq).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let got = forward_cached(&model, &tokens, &targets).unwrap().loss;
    let want = reference_losses(&cfg, &tensors, &tokens, &targets);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-5, "{g} vs {w}");
    }
}

fn cfg(n_layer: usize, d_model: usize, n_head: usize, d_mlp: usize) -> ModelConfig {
    ModelConfig {
        n_layer,
        d_model,
        n_head,
        d_mlp,
        vocab_size: 5,
        max_seq: 8,
        layernorm_eps: 1e-5,
        architecture: "gpt2-preln".into(),
    }
}

#[test]
fn forward_matches_reference_single_layer() {
    check_forward(cfg(1, 2, 1, 4), 1);
}

#[test]
fn forward_matches_reference_multi_head() {
    check_forward(cfg(2, 6, 3, 8), 2);
}

fn nalgebra_eigenvalues(m: &Matrix) -> Vec<f64> {
    let na = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let mut ev: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[test]
fn eigenvalues_match_nalgebra_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = Matrix::zeros(6, 6);
    for i in 0..6 {
        for j in 0..=i {
            let v: f64 = rng.random_range(-1.0..1.0);
            m.data[i * 6 + j] = v;
            m.data[j * 6 + i] = v;
        }
    }
    let ours = sym_eig_matrix(&m, false).unwrap().spectrum.eigenvalues;
    for (a, b) in ours.iter().zip(nalgebra_eigenvalues(&m)) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn group_spectrum_matches_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let w = Matrix::from_vec(50, 128, (0..50 * 128).map(|_| rng.random_range(-1.0..1.0)).collect());
    let esd = group_correlation_esd(&w, &NeuronGroup::new(GroupLabel::Custom, (0..50).collect()), Normalization::GroupGram).unwrap();
    let na = nalgebra::DMatrix::from_row_slice(50, 128, &w.data);
    let gram = (&na * na.transpose()) / 128.0;
    let mut want: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
    want.sort_by(f64::total_cmp);
    for (a, b) in esd.eigenvalues.iter().zip(want) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn ward_matches_kodama() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, t) = (24, 60);
    let bases: Vec<Vec<f64>> = (0..4).map(|_| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let rows: Vec<f64> = (0..n)
        .flat_map(|i| {
            let base = bases[i % 4].clone();
            let noise = 0.3 + 0.1 * (i % 5) as f64;
            base.into_iter()
                .map(|b| b + noise * rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>()
        })
        .collect();
    let acts = ActivationMatrix::new((0..n).collect(), Matrix::from_vec(n, t, rows)).unwrap();
    let ours = correlation_cluster(&acts, 0.5).unwrap();

    let mut condensed = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            condensed.push(ours.distance.get(i, j));
        }
    }
    let dend = kodama::linkage(&mut condensed, n, kodama::Method::Ward);
    let mut theirs: Vec<f64> = dend.steps().iter().map(|s| s.dissimilarity).collect();
    let mut mine: Vec<f64> = ours.merges.iter().map(|m| m.2).collect();
    theirs.sort_by(f64::total_cmp);
    mine.sort_by(f64::total_cmp);
    for (a, b) in mine.iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    let cut = theirs.iter().filter(|&&h| h > 0.5).count() + 1;
    assert_eq!(ours.count, cut);
    assert_eq!(ours.count, 4);
}

#[test]
fn mean_activations_match_plain_summation() {
    let model = toy::toy_model(3);
    let stream = toy::toy_stream(model.config.vocab_size, 600, 4);
    let cache = CorpusCache::build(&model, &stream, 128, 1).unwrap();
    let means = mean_activations(cache.caches()).unwrap();
    let dm = model.config.d_mlp;
    let mut sums = vec![0.0f64; dm];
    let mut count = 0usize;
    for c in cache.caches() {
        for t in 0..c.acts.rows {
            for (s, v) in sums.iter_mut().zip(c.acts.row(t)) {
                *s += v;
            }
            count += 1;
        }
    }
    assert_eq!(count, stream.len() - stream.documents().len());
    assert_eq!(means.count, count);
    for (m, s) in means.means.iter().zip(&sums) {
        assert!((m - s / count as f64).abs() < 1e-7);
    }
}
