//! Stage orchestration and report files.
//!
//! Every JSON report is wrapped in a [`Report`] carrying a schema version,
//! its kind, the analysis settings and the SHA-256 of every input, so a
//! later stage can check what it is reading and two runs with equal
//! settings and inputs write identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{
    classify_groups, influence_sweep, mean_activations, oracle_check, random_group, CorpusCache, EvalRows,
    GroupLabel, InfluenceProfile, NeuronGroup, OracleReport,
};
use crate::corpus::{load_frequencies, load_mask, load_token_stream, select_rare_targets, EvalSet, SelectionMeta, TokenStream};
use crate::error::{Error, Result};
use crate::geometry::{analyze_geometry, GeometryOptions, GeometryReport};
use crate::model::{load_model, Manifest, Model};
use crate::phases::{analyze_phases, local_slope, rank_values, PhaseOptions, PhaseSegmentation};
use crate::spectra::{group_alpha_report, spectra_csv, Normalization, SpectralOptions, SpectralReport, WeightSource};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Settings that determine report contents. Worker count and output
/// location are deliberately absent: they never change results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub percentile: f64,
    /// Defaults to the model's `max_seq`.
    pub context_len: Option<usize>,
    pub max_positions: Option<usize>,
    pub group_size: usize,
    pub seed: u64,
    pub window: usize,
    pub epsilon: f64,
    pub plateau_threshold: f64,
    pub tau: f64,
    pub cluster_threshold: f64,
    pub bins: usize,
    pub weight_source: WeightSource,
    pub normalization: Normalization,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let phases = PhaseOptions::default();
        let geometry = GeometryOptions::default();
        let spectral = SpectralOptions::default();
        AnalysisConfig {
            percentile: 50.0,
            context_len: None,
            max_positions: None,
            group_size: 50,
            seed: 0,
            window: phases.window,
            epsilon: phases.epsilon,
            plateau_threshold: phases.plateau_threshold,
            tau: geometry.tau,
            cluster_threshold: geometry.cluster_threshold,
            bins: spectral.bins,
            weight_source: spectral.source,
            normalization: spectral.normalization,
        }
    }
}

impl AnalysisConfig {
    pub fn phase_options(&self) -> PhaseOptions {
        PhaseOptions {
            epsilon: self.epsilon,
            window: self.window,
            plateau_threshold: self.plateau_threshold,
        }
    }

    pub fn spectral_options(&self, workers: usize) -> SpectralOptions {
        SpectralOptions {
            source: self.weight_source,
            normalization: self.normalization,
            bins: self.bins,
            workers,
        }
    }

    pub fn geometry_options(&self) -> GeometryOptions {
        GeometryOptions {
            tau: self.tau,
            cluster_threshold: self.cluster_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub model: PathBuf,
    pub tokens: PathBuf,
    pub mask: PathBuf,
    pub frequencies: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub inputs: InputPaths,
    pub out_dir: PathBuf,
    pub analysis: AnalysisConfig,
    pub workers: usize,
}

/// A pipeline failure tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    /// 1 when the analysis itself could not complete, 2 for bad or
    /// inconsistent inputs.
    pub fn exit_code(&self) -> i32 {
        match self.error {
            Error::Analysis(_) => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "stage": self.stage, "message": self.error.to_string() }).to_string()
    }
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest over a model manifest and every tensor file it names, in name
/// order.
pub fn model_checksum(manifest_path: &Path) -> Result<String> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::format(manifest_path, format!("invalid manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(&text);
    for (name, rel) in &manifest.tensors {
        let path = base.join(rel);
        h.update(name.as_bytes());
        h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn record(path: &Path, sha256: String) -> InputRecord {
    InputRecord {
        path: path.display().to_string(),
        sha256,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub kind: String,
    pub toolkit_version: String,
    pub config: AnalysisConfig,
    pub inputs: BTreeMap<String, InputRecord>,
    pub data: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(kind: &str, config: &AnalysisConfig, inputs: BTreeMap<String, InputRecord>, data: T) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            toolkit_version: TOOLKIT_VERSION.to_string(),
            config: config.clone(),
            inputs,
            data,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_text(path, &text)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a report, checking its schema version and kind before decoding
/// the payload.
pub fn read_report<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Report<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("invalid JSON: {e}")))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Schema(format!(
            "{} has schema_version {:?}, expected {SCHEMA_VERSION}",
            path.display(),
            version
        )));
    }
    let found = value.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Schema(format!(
            "{} is a {found:?} report, expected {kind:?}",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Inputs loaded and scored once, shared by the sweep, oracle and geometry
/// stages.
pub struct Prepared {
    pub model: Model,
    pub stream: TokenStream,
    pub eval: EvalSet,
    pub cache: CorpusCache,
    pub rows: EvalRows,
    pub means: crate::ablation::MeanActivations,
    pub inputs: BTreeMap<String, InputRecord>,
}

pub fn prepare(paths: &InputPaths, cfg: &AnalysisConfig, workers: usize) -> std::result::Result<Prepared, StageError> {
    let model = load_model(&paths.model).at("model")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("model".into(), record(&paths.model, model_checksum(&paths.model).at("model")?));

    let stream = load_token_stream(&paths.tokens).at("corpus")?;
    let freq = load_frequencies(&paths.frequencies).at("corpus")?;
    let mask = load_mask(&paths.mask).at("corpus")?;
    for (role, p) in [("tokens", &paths.tokens), ("frequencies", &paths.frequencies), ("mask", &paths.mask)] {
        inputs.insert(role.into(), record(p, sha256_file(p).at("corpus")?));
    }
    let vocab = model.config.vocab_size;
    if freq.vocab_size() != vocab {
        return Err(Error::contract(format!(
            "frequency table covers {} tokens but the model vocabulary has {vocab}",
            freq.vocab_size()
        )))
        .at("corpus");
    }
    let context_len = cfg.context_len.unwrap_or(model.config.max_seq);
    if context_len > model.config.max_seq {
        return Err(Error::contract(format!(
            "context_len {context_len} exceeds the model's max_seq {}",
            model.config.max_seq
        )))
        .at("corpus");
    }
    let mut eval = select_rare_targets(&stream, &freq, cfg.percentile, &mask, context_len).at("corpus")?;
    eval.meta.mask_source = paths.mask.display().to_string();
    if let Some(max) = cfg.max_positions {
        eval = eval.subsample(max, cfg.seed);
    }

    let cache = CorpusCache::build(&model, &stream, context_len, workers).at("ablation")?;
    let mut means = mean_activations(cache.caches()).at("ablation")?;
    means.source = paths.tokens.display().to_string();
    let rows = EvalRows::gather(&cache, &eval).at("ablation")?;
    Ok(Prepared {
        model,
        stream,
        eval,
        cache,
        rows,
        means,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceData {
    pub selection: SelectionMeta,
    pub positions: Vec<usize>,
    pub mean_activations: Vec<f64>,
    pub mean_count: usize,
    pub profile: InfluenceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsData {
    pub group_size: usize,
    pub seed: u64,
    pub groups: Vec<NeuronGroup>,
}

impl GroupsData {
    pub fn find(&self, label: GroupLabel) -> Option<&NeuronGroup> {
        self.groups.iter().find(|g| g.label == label)
    }
}

/// Boost, suppress and random groups, plus a second disjoint random group
/// when enough neurons remain.
pub fn build_groups(profile: &InfluenceProfile, k: usize, seed: u64) -> Result<GroupsData> {
    let classified = classify_groups(profile, k, seed)?;
    let mut groups = classified.as_vec();
    let used: Vec<usize> = groups.iter().flat_map(|g| g.indices.iter().copied()).collect();
    if let Ok(mut second) = random_group(profile.len(), k, &used, seed.wrapping_add(1)) {
        second.name = Some("random2".into());
        groups.push(second);
    }
    Ok(GroupsData {
        group_size: k,
        seed,
        groups,
    })
}

pub fn sweep(prep: &Prepared, cfg: &AnalysisConfig, workers: usize) -> std::result::Result<(InfluenceData, GroupsData), StageError> {
    let mut profile = influence_sweep(&prep.model, &prep.rows, &prep.means, workers).at("ablation")?;
    profile.model = prep.inputs["model"].sha256.clone();
    let groups = build_groups(&profile, cfg.group_size, cfg.seed).at("ablation")?;
    let data = InfluenceData {
        selection: prep.eval.meta.clone(),
        positions: prep.rows.positions.clone(),
        mean_activations: prep.means.means.clone(),
        mean_count: prep.means.count,
        profile,
    };
    Ok((data, groups))
}

pub fn influence_csv(data: &InfluenceData) -> String {
    let p = &data.profile;
    let curve = rank_values(&p.abs_dloss, f64::MIN_POSITIVE).ok();
    let mut rank = vec![0; p.len()];
    if let Some(c) = &curve {
        for (r, &n) in c.order.iter().enumerate() {
            rank[n] = r + 1;
        }
    }
    let mut out = String::from("neuron,abs_dloss,signed_effect,mean_activation,rank\n");
    for i in 0..p.len() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            p.abs_dloss[i], p.signed_effect[i], data.mean_activations[i], rank[i]
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasesData {
    /// Neuron id at each rank, most influential first.
    pub order: Vec<usize>,
    pub log_rank: Vec<f64>,
    pub log_dloss: Vec<f64>,
    pub slope: Vec<f64>,
    pub segmentation: PhaseSegmentation,
}

pub fn phases_from(profile: &InfluenceProfile, cfg: &AnalysisConfig) -> Result<PhasesData> {
    let opts = cfg.phase_options();
    let curve = rank_values(&profile.abs_dloss, opts.epsilon)?;
    let slope = local_slope(&curve, opts.window)?;
    let segmentation = analyze_phases(&curve, &slope, &opts)?;
    Ok(PhasesData {
        order: curve.order,
        log_rank: curve.log_rank,
        log_dloss: curve.log_dloss,
        slope: slope.slopes,
        segmentation,
    })
}

pub fn curve_csv(data: &PhasesData) -> String {
    let mut out = String::from("rank,log_rank,log_dloss,slope,delta\n");
    for i in 0..data.order.len() {
        let slope = data.slope.get(i).map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            data.log_rank[i],
            data.log_dloss[i],
            slope,
            data.segmentation.deviation[i]
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub kind: String,
    pub toolkit_version: String,
    pub run: RunConfig,
    pub inputs: BTreeMap<String, InputRecord>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub const REPORT_FILES: [&str; 7] = [
    "influence.json",
    "influence.csv",
    "phases.json",
    "curve.csv",
    "spectra.json",
    "spectra.csv",
    "geometry.json",
];

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub eval_pairs: usize,
    pub phases: PhaseSegmentation,
    pub spectra: SpectralReport,
}

/// Every stage in order; writes the seven reports, `groups.json` and a
/// `manifest.json` describing the run.
pub fn run_pipeline(config: &RunConfig) -> std::result::Result<RunSummary, StageError> {
    let cfg = &config.analysis;
    let out = &config.out_dir;
    let prep = prepare(&config.inputs, cfg, config.workers)?;
    let (influence, groups) = sweep(&prep, cfg, config.workers)?;
    let inputs = prep.inputs.clone();
    let mut files = Vec::new();
    let mut emit = |name: &str, text: Result<String>| -> std::result::Result<(), StageError> {
        let path = out.join(name);
        write_text(&path, &text.at("output")?).at("output")?;
        files.push(path);
        Ok(())
    };

    emit("influence.json", render("influence", cfg, &inputs, &influence))?;
    emit("influence.csv", Ok(influence_csv(&influence)))?;
    emit("groups.json", render("groups", cfg, &inputs, &groups))?;

    let phases = phases_from(&influence.profile, cfg).at("phases")?;
    emit("phases.json", render("phases", cfg, &inputs, &phases))?;
    emit("curve.csv", Ok(curve_csv(&phases)))?;

    let spectra = group_alpha_report(&[("model".to_string(), &prep.model)], &groups.groups, &cfg.spectral_options(config.workers));
    emit("spectra.json", render("spectra", cfg, &inputs, &spectra))?;
    emit("spectra.csv", Ok(spectra_csv(&spectra)))?;

    let w_out = &prep.model.final_layer().w_out;
    let geometry = analyze_geometry(&prep.rows, w_out, &groups.groups, &cfg.geometry_options()).at("geometry")?;
    emit("geometry.json", render("geometry", cfg, &inputs, &geometry))?;

    let mut outputs = BTreeMap::new();
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        outputs.insert(name, sha256_file(f).at("output")?);
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        kind: "run".into(),
        toolkit_version: TOOLKIT_VERSION.into(),
        run: config.clone(),
        inputs,
        outputs,
    };
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(Error::from).at("output")?;
    text.push('\n');
    write_text(&path, &text).at("output")?;
    files.push(path);

    Ok(RunSummary {
        out_dir: out.clone(),
        files,
        eval_pairs: prep.rows.len(),
        phases: phases.segmentation,
        spectra,
    })
}

fn render<T: Serialize>(kind: &str, cfg: &AnalysisConfig, inputs: &BTreeMap<String, InputRecord>, data: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Report::new(kind, cfg, inputs.clone(), data))?;
    text.push('\n');
    Ok(text)
}

/// Stand-alone phase stage: reads an influence report, writes
/// `phases.json` and `curve.csv`.
pub fn phases_stage(influence_path: &Path, out_dir: &Path, overrides: impl FnOnce(&mut AnalysisConfig)) -> std::result::Result<PhaseSegmentation, StageError> {
    let report: Report<InfluenceData> = read_report(influence_path, "influence").at("phases")?;
    let mut cfg = report.config.clone();
    overrides(&mut cfg);
    let mut inputs = BTreeMap::new();
    inputs.insert("influence".into(), record(influence_path, sha256_file(influence_path).at("phases")?));
    let data = phases_from(&report.data.profile, &cfg).at("phases")?;
    Report::new("phases", &cfg, inputs, &data).write(&out_dir.join("phases.json")).at("output")?;
    write_text(&out_dir.join("curve.csv"), &curve_csv(&data)).at("output")?;
    Ok(data.segmentation)
}

/// Stand-alone spectral stage over one or more named checkpoints.
pub fn spectra_stage(
    models: &[(String, PathBuf)],
    groups_path: &Path,
    out_dir: &Path,
    workers: usize,
    overrides: impl FnOnce(&mut AnalysisConfig),
) -> std::result::Result<SpectralReport, StageError> {
    let groups: Report<GroupsData> = read_report(groups_path, "groups").at("spectra")?;
    let mut cfg = groups.config.clone();
    overrides(&mut cfg);
    let mut inputs = BTreeMap::new();
    inputs.insert("groups".into(), record(groups_path, sha256_file(groups_path).at("spectra")?));
    let mut loaded = Vec::new();
    for (id, path) in models {
        let m = load_model(path).at("model")?;
        for g in &groups.data.groups {
            g.validate(m.config.d_mlp).at("spectra")?;
        }
        inputs.insert(format!("model:{id}"), record(path, model_checksum(path).at("model")?));
        loaded.push((id.clone(), m));
    }
    let refs: Vec<(String, &Model)> = loaded.iter().map(|(id, m)| (id.clone(), m)).collect();
    let report = group_alpha_report(&refs, &groups.data.groups, &cfg.spectral_options(workers));
    Report::new("spectra", &cfg, inputs, &report).write(&out_dir.join("spectra.json")).at("output")?;
    write_text(&out_dir.join("spectra.csv"), &spectra_csv(&report)).at("output")?;
    Ok(report)
}

/// Stand-alone geometry stage: rescoring the corpus for activations and
/// reading groups from an earlier sweep.
pub fn geometry_stage(
    paths: &InputPaths,
    groups_path: &Path,
    out_dir: &Path,
    workers: usize,
    overrides: impl FnOnce(&mut AnalysisConfig),
) -> std::result::Result<GeometryReport, StageError> {
    let groups: Report<GroupsData> = read_report(groups_path, "groups").at("geometry")?;
    let mut cfg = groups.config.clone();
    overrides(&mut cfg);
    let prep = prepare(paths, &cfg, workers)?;
    let mut inputs = prep.inputs.clone();
    inputs.insert("groups".into(), record(groups_path, sha256_file(groups_path).at("geometry")?));
    let report = analyze_geometry(&prep.rows, &prep.model.final_layer().w_out, &groups.data.groups, &cfg.geometry_options())
        .at("geometry")?;
    Report::new("geometry", &cfg, inputs, &report).write(&out_dir.join("geometry.json")).at("output")?;
    Ok(report)
}

/// Stand-alone sweep stage: `influence.json`, `influence.csv`, `groups.json`.
pub fn sweep_stage(paths: &InputPaths, cfg: &AnalysisConfig, out_dir: &Path, workers: usize) -> std::result::Result<InfluenceData, StageError> {
    let prep = prepare(paths, cfg, workers)?;
    let (influence, groups) = sweep(&prep, cfg, workers)?;
    Report::new("influence", cfg, prep.inputs.clone(), &influence).write(&out_dir.join("influence.json")).at("output")?;
    write_text(&out_dir.join("influence.csv"), &influence_csv(&influence)).at("output")?;
    Report::new("groups", cfg, prep.inputs.clone(), &groups).write(&out_dir.join("groups.json")).at("output")?;
    Ok(influence)
}

/// Fast path against full reruns on `sample` neurons drawn with `seed`.
pub fn oracle_stage(paths: &InputPaths, cfg: &AnalysisConfig, sample: usize, seed: u64, workers: usize) -> std::result::Result<OracleReport, StageError> {
    use rand::SeedableRng;
    let prep = prepare(paths, cfg, workers)?;
    let dm = prep.model.config.d_mlp;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut neurons = rand::seq::index::sample(&mut rng, dm, sample.min(dm)).into_vec();
    neurons.sort_unstable();
    oracle_check(&prep.model, &prep.stream, &prep.cache, &prep.rows, &prep.means, &neurons, workers).at("ablation")
}
