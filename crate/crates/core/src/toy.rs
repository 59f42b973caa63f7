//! Seeded generators for the bundled toy model and corpus.
//!
//! The toy assets are small enough to run the whole pipeline in seconds
//! while still producing a skewed influence profile: the final MLP's output
//! directions are rescaled by Pareto draws so a handful of neurons dominate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto, Zipf};

use crate::corpus::{save_frequencies, save_mask, save_token_stream, FrequencyTable, TokenStream, ValidityMask};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ARCH_GPT2_PRELN};
use crate::tensor::Tensor;

/// Neuron whose output direction is zeroed in the toy model.
pub const TOY_DEAD_OUTPUT_NEURON: usize = 0;
/// Neuron whose input weights are zeroed, so its activation is constant.
pub const TOY_CONSTANT_NEURON: usize = 1;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        d_model: 64,
        n_head: 4,
        d_mlp: 256,
        vocab_size: 512,
        max_seq: 128,
        layernorm_eps: 1e-5,
        architecture: ARCH_GPT2_PRELN.to_string(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, mean: f64, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(mean, std).expect("valid normal");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(shape, &data).expect("consistent shape")
}

fn random_tensors(config: &ModelConfig, rng: &mut ChaCha8Rng) -> BTreeMap<String, Tensor> {
    let d = config.d_model as f64;
    let m = config.d_mlp as f64;
    let mut out = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let t = if name.ends_with(".gain") {
            gaussian(rng, shape, 1.0, 0.1)
        } else if name.ends_with(".bias") || name.ends_with("b_qkv") || name.ends_with("b_out") {
            gaussian(rng, shape, 0.0, 0.05)
        } else if name.ends_with("b_in") {
            gaussian(rng, shape, 0.0, 0.3)
        } else if name == "wte" || name == "wpe" {
            gaussian(rng, shape, 0.0, 0.5)
        } else if name.ends_with("mlp.w_out") {
            gaussian(rng, shape, 0.0, 1.0 / m.sqrt())
        } else {
            gaussian(rng, shape, 0.0, 1.0 / d.sqrt())
        };
        out.insert(name, t);
    }
    out.insert(
        "unembed".to_string(),
        gaussian(rng, vec![config.vocab_size, config.d_model], 0.0, 1.0),
    );
    out
}

/// A model with seeded Gaussian weights and a separate unembedding.
pub fn random_model(config: ModelConfig, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = random_tensors(&config, &mut rng);
    Model::from_tensors(config, &tensors).expect("generated shapes are canonical")
}

/// The bundled toy model: random weights, final-layer output directions
/// rescaled by Pareto(1, 1.2) draws (capped at 40), one dead-output neuron
/// and one constant-activation neuron.
pub fn toy_model(seed: u64) -> Model {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = random_tensors(&config, &mut rng);
    let last = config.n_layer - 1;
    let (d, dm) = (config.d_model, config.d_mlp);

    let pareto = Pareto::<f64>::new(1.0, 1.2).expect("valid pareto");
    let scales: Vec<f32> = (0..dm).map(|_| pareto.sample(&mut rng).min(40.0) as f32).collect();
    let key = format!("h.{last}.mlp.w_out");
    let mut w_out = tensors[&key].data().to_vec();
    for r in 0..d {
        for c in 0..dm {
            w_out[r * dm + c] *= scales[c];
        }
        w_out[r * dm + TOY_DEAD_OUTPUT_NEURON] = 0.0;
    }
    tensors.insert(key, Tensor::new(vec![d, dm], w_out).unwrap());

    let key = format!("h.{last}.mlp.w_in");
    let mut w_in = tensors[&key].data().to_vec();
    w_in[TOY_CONSTANT_NEURON * d..(TOY_CONSTANT_NEURON + 1) * d].fill(0.0);
    tensors.insert(key, Tensor::new(vec![dm, d], w_in).unwrap());

    Model::from_tensors(config, &tensors).expect("generated shapes are canonical")
}

/// Zipf-distributed token stream split into documents of 64..=192 tokens.
pub fn toy_stream(vocab: usize, len: usize, seed: u64) -> TokenStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(vocab as f64, 1.1).expect("valid zipf");
    let ids: Vec<u32> = (0..len).map(|_| zipf.sample(&mut rng) as u32 - 1).collect();
    let mut boundaries = Vec::new();
    let mut end = 0;
    while end < len {
        end = (end + rng.random_range(64..=192)).min(len);
        boundaries.push(end);
    }
    TokenStream::new(ids, boundaries, vocab).expect("generated stream is valid")
}

/// Marks roughly 80% of the vocabulary as valid words.
pub fn toy_mask(vocab: usize, seed: u64) -> ValidityMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ValidityMask::new((0..vocab).map(|_| rng.random_bool(0.8)).collect())
}

pub struct ToyBundle {
    pub manifest: PathBuf,
    pub stream: PathBuf,
    pub mask: PathBuf,
    pub frequencies: PathBuf,
}

pub const TOY_CORPUS_TOKENS: usize = 1024;
const TOY_TRAIN_TOKENS: usize = 50_000;

/// Writes the full toy bundle (model, 1024-token corpus, mask, frequency
/// table from a separate 50k-token sample) into `dir`.
pub fn write_toy_bundle(dir: impl AsRef<Path>, seed: u64) -> Result<ToyBundle> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = toy_model(seed);
    let manifest = model.save(dir.join("model"))?;
    let vocab = model.config.vocab_size;

    let stream = toy_stream(vocab, TOY_CORPUS_TOKENS, seed.wrapping_add(1));
    let train = toy_stream(vocab, TOY_TRAIN_TOKENS, seed.wrapping_add(2));
    let freq = FrequencyTable::from_stream(&train, vocab);
    let mask = toy_mask(vocab, seed.wrapping_add(3));

    let bundle = ToyBundle {
        manifest,
        stream: dir.join("corpus.rtk"),
        mask: dir.join("mask.rwm"),
        frequencies: dir.join("freq.rfq"),
    };
    save_token_stream(&stream, &bundle.stream)?;
    save_mask(&mask, &bundle.mask)?;
    save_frequencies(&freq, &bundle.frequencies)?;
    Ok(bundle)
}

/// Seed the bundled assets under `assets/toy` were generated with.
pub const TOY_SEED: u64 = 2024;

/// Directory of the bundled toy assets in the source tree.
pub fn bundled_toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("toy")
}

/// Input paths of the bundled toy assets.
pub fn bundled_toy_inputs() -> crate::pipeline::InputPaths {
    let dir = bundled_toy_dir();
    crate::pipeline::InputPaths {
        model: dir.join("model").join("manifest.json"),
        tokens: dir.join("corpus.rtk"),
        mask: dir.join("mask.rwm"),
        frequencies: dir.join("freq.rfq"),
    }
}
