use std::fs;
use std::path::{Path, PathBuf};

use pgdm::archetypal::{elbow_select, ArchetypeSet, DataMatrix, FitConfig};
use pgdm::data::{apply_split, generate, io::read_frames, sliding_windows, split_sources, Sequence, SequenceSplit, SequenceWindow, WindowSplit};
use pgdm::diffusion::{Denoiser, DenoiserReport, GuidanceConfig, NoiseSchedule, SampleOutput};
use pgdm::guidance::{PatternPredictor, PredictorReport};
use pgdm::pipeline::{self, derive_seed, stage, Models, SweepReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{self, hash_bytes, hash_json, read_json, write_json, FORMAT_VERSION};
use crate::config::{ForecastFormat, RunConfig};
use crate::error::{CliError, Result};

const MANIFEST: &str = "manifest.json";
const ARCHETYPES: &str = "archetypes.json";
const PREDICTOR: &str = "predictor.json";
const DENOISER: &str = "denoiser.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    /// Path relative to the manifest.
    pub file: String,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `synthetic` or `ingest`.
    pub source: String,
    pub config_hash: String,
    /// Hash over every sequence file and the split.
    pub data_hash: String,
    pub d: usize,
    pub sequences: Vec<SequenceEntry>,
    pub split: SequenceSplit,
    /// Out-of-hull flag per sequence, known only for generated data.
    #[serde(default)]
    pub ood: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchetypeCheckpoint {
    pub archetypes: ArchetypeSet,
    /// Rows the archetypes were fitted on.
    pub fit_data: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorCheckpoint {
    pub predictor: PatternPredictor,
    pub archetype_hash: String,
    pub report: PredictorReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub guidance: GuidanceConfig,
    pub archetype_hash: String,
    pub report: DenoiserReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowForecast {
    pub source: String,
    pub offset: usize,
    pub samples: Vec<SampleOutput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastFile {
    pub format_version: u32,
    pub config_hash: String,
    pub guidance: GuidanceConfig,
    pub samples: usize,
    pub windows: Vec<WindowForecast>,
}

fn source_hash(cfg: &RunConfig, source: &str) -> String {
    let p = &cfg.pipeline;
    match source {
        "synthetic" => hash_json(&json!({ "source": source, "spec": cfg.synthetic, "split": p.split, "seed": p.seed })),
        // Ingested files are copied; their content is covered by the data hash.
        _ => hash_json(&json!({ "source": source, "split": p.split, "seed": p.seed })),
    }
}

/// Serializes `value` and drops settings that never change results.
fn result_relevant<T: Serialize>(value: &T) -> Value {
    let mut v = serde_json::to_value(value).expect("config types always serialize");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("exec");
        obj.remove("seed");
    }
    v
}

fn fit_hash(cfg: &RunConfig, data_hash: &str) -> String {
    let p = &cfg.pipeline;
    hash_json(&json!({
        "stage": "fit",
        "data": data_hash,
        "history": p.history,
        "horizon": p.horizon,
        "stride": p.stride,
        "p": p.archetypes,
        "fit_max_points": p.fit_max_points,
        "fit_tol": p.fit_tol,
        "fit_max_iter": p.fit_max_iter,
        "seed": p.seed,
    }))
}

fn predictor_hash(cfg: &RunConfig, upstream: &str) -> String {
    hash_json(&json!({ "stage": "predictor", "upstream": upstream, "config": result_relevant(&cfg.pipeline.predictor) }))
}

fn denoiser_hash(cfg: &RunConfig, upstream: &str) -> String {
    let p = &cfg.pipeline;
    hash_json(&json!({
        "stage": "denoiser",
        "upstream": upstream,
        "config": result_relevant(&p.denoiser),
        "steps": p.diffusion_steps,
        "p_drop": p.guidance.p_drop,
    }))
}

fn write_sequence(path: &Path, frames: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for f in frames {
        w.write_record(f.iter().map(|v| v.to_string())).map_err(|e| CliError::Core(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(bytes)
}

fn data_hash(file_hashes: &[String], split: &SequenceSplit) -> String {
    hash_json(&json!({ "files": file_hashes, "train": split.train, "val": split.val, "test": split.test }))
}

fn write_dataset(cfg: &RunConfig, source: &str, sequences: &[Sequence], ood: Option<Vec<bool>>) -> Result<Manifest> {
    let dir = &cfg.paths.data;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let d = sequences.first().and_then(Sequence::dim).ok_or_else(|| CliError::Config("no frames to write".into()))?;
    if sequences.iter().any(|s| s.dim() != Some(d)) {
        return Err(CliError::Config("every sequence needs at least one frame of the same dimension".into()));
    }
    let mut entries = Vec::with_capacity(sequences.len());
    let mut hashes = Vec::with_capacity(sequences.len());
    for s in sequences {
        let file = format!("{}.csv", s.name);
        hashes.push(hash_bytes(&write_sequence(&dir.join(&file), &s.frames)?));
        entries.push(SequenceEntry { name: s.name.clone(), file, frames: s.len() });
    }
    let ids: Vec<usize> = (0..sequences.len()).collect();
    let split = split_sources(&ids, cfg.pipeline.split, derive_seed(cfg.pipeline.seed, stage::SPLIT))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        source: source.to_string(),
        config_hash: source_hash(cfg, source),
        data_hash: data_hash(&hashes, &split),
        d,
        sequences: entries,
        split,
        ood,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Value> {
    let ds = generate(&cfg.synthetic, cfg.pipeline.seed)?;
    let m = write_dataset(cfg, "synthetic", &ds.sequences, Some(ds.ood))?;
    Ok(json!({ "manifest": cfg.paths.data.join(MANIFEST), "sequences": m.sequences.len(), "d": m.d, "data_hash": m.data_hash }))
}

fn csv_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| CliError::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(input.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("ingest found no CSV files".into()));
    }
    Ok(out)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Value> {
    let mut sequences = Vec::new();
    for (i, path) in csv_files(&cfg.ingest.inputs)?.iter().enumerate() {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let frames = read_frames(file)?;
        let stem = path.file_stem().map_or_else(|| format!("seq_{i:04}"), |s| s.to_string_lossy().into_owned());
        sequences.push(Sequence { name: format!("{i:04}_{stem}"), frames });
    }
    let m = write_dataset(cfg, "ingest", &sequences, None)?;
    Ok(json!({ "manifest": cfg.paths.data.join(MANIFEST), "sequences": m.sequences.len(), "d": m.d, "data_hash": m.data_hash }))
}

struct Dataset {
    manifest: Manifest,
    windows: WindowSplit,
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.paths.data.join(MANIFEST);
    let manifest: Manifest = read_json(&path)?;
    if manifest.config_hash != source_hash(cfg, &manifest.source) {
        return Err(CliError::stale(&path, "dataset was built from a different config; rerun generate or ingest"));
    }
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    let mut hashes = Vec::with_capacity(manifest.sequences.len());
    for e in &manifest.sequences {
        let file = cfg.paths.data.join(&e.file);
        let bytes = match fs::read(&file) {
            Ok(b) => b,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Err(CliError::MissingArtifact { path: file }),
            Err(err) => return Err(CliError::io(&file, err)),
        };
        hashes.push(hash_bytes(&bytes));
        sequences.push(Sequence { name: e.name.clone(), frames: read_frames(bytes.as_slice())? });
    }
    if data_hash(&hashes, &manifest.split) != manifest.data_hash {
        return Err(CliError::stale(&path, "sequence files changed since the manifest was written"));
    }
    let p = &cfg.pipeline;
    let windows = apply_split(sliding_windows(&sequences, p.history, p.horizon, p.stride)?, manifest.split.clone());
    if windows.train.is_empty() {
        return Err(CliError::Config("no training windows; sequences are shorter than T + H".into()));
    }
    Ok(Dataset { manifest, windows })
}

struct Fitted {
    hash: String,
    archetype_hash: String,
    ck: ArchetypeCheckpoint,
}

fn load_fitted(cfg: &RunConfig, data: &Dataset) -> Result<Fitted> {
    let hash = fit_hash(cfg, &data.manifest.data_hash);
    let ck: ArchetypeCheckpoint = artifact::load(&cfg.paths.checkpoints.join(ARCHETYPES), "archetypes", &hash)?;
    Ok(Fitted { archetype_hash: hash_json(&ck.archetypes), hash, ck })
}

pub fn cmd_fit_patterns(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg)?;
    let (fit_data, archetypes) = pipeline::fit_patterns(&data.windows.train, &cfg.pipeline)?;
    let mut out = json!({
        "p": archetypes.count(),
        "fit_rss": archetypes.fit_rss(),
        "iterations": archetypes.iterations_used(),
        "fit_points": fit_data.nrows(),
    });
    if cfg.elbow.p_max > 0 {
        let p = &cfg.pipeline;
        let base = FitConfig {
            tol: p.fit_tol,
            max_iter: p.fit_max_iter,
            exec: p.exec,
            ..FitConfig::new(1, derive_seed(p.seed, stage::FIT))
        };
        let report = elbow_select(&fit_data, cfg.elbow.p_max.min(fit_data.nrows()), cfg.elbow.threshold, &base)?;
        let path = cfg.paths.reports.join("elbow.json");
        write_json(&path, &report)?;
        out["elbow_selected_p"] = json!(report.selected_p);
        out["elbow_report"] = json!(path);
    }
    let hash = fit_hash(cfg, &data.manifest.data_hash);
    out["archetype_hash"] = json!(hash_json(&archetypes));
    let ck = ArchetypeCheckpoint { archetypes, fit_data: fit_data.rows() };
    artifact::save(&cfg.paths.checkpoints.join(ARCHETYPES), "archetypes", hash, ck)?;
    Ok(out)
}

struct Guided {
    hash: String,
    ck: PredictorCheckpoint,
}

fn load_guided(cfg: &RunConfig, fitted: &Fitted) -> Result<Guided> {
    let hash = predictor_hash(cfg, &fitted.hash);
    let path = cfg.paths.checkpoints.join(PREDICTOR);
    let ck: PredictorCheckpoint = artifact::load(&path, "predictor", &hash)?;
    if ck.archetype_hash != fitted.archetype_hash {
        return Err(CliError::stale(&path, "trained against different archetypes; rerun train-guidance"));
    }
    Ok(Guided { hash, ck })
}

pub fn cmd_train_guidance(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg)?;
    let fitted = load_fitted(cfg, &data)?;
    let (predictor, report) =
        pipeline::train_guidance(&data.windows.train, &data.windows.val, &fitted.ck.archetypes, &cfg.pipeline)?;
    let out = json!({ "report": report });
    let ck = PredictorCheckpoint { predictor, archetype_hash: fitted.archetype_hash.clone(), report };
    artifact::save(&cfg.paths.checkpoints.join(PREDICTOR), "predictor", predictor_hash(cfg, &fitted.hash), ck)?;
    Ok(out)
}

pub fn cmd_train_diffusion(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg)?;
    let fitted = load_fitted(cfg, &data)?;
    let guided = load_guided(cfg, &fitted)?;
    let (denoiser, schedule, report) =
        pipeline::train_diffusion(&data.windows.train, &fitted.ck.archetypes, &guided.ck.predictor, &cfg.pipeline)?;
    let out = json!({
        "steps": report.losses.len(),
        "final_loss": report.losses.last(),
    });
    let ck = DenoiserCheckpoint {
        schedule,
        denoiser,
        guidance: cfg.pipeline.guidance,
        archetype_hash: fitted.archetype_hash.clone(),
        report,
    };
    artifact::save(&cfg.paths.checkpoints.join(DENOISER), "denoiser", denoiser_hash(cfg, &guided.hash), ck)?;
    Ok(out)
}

struct Trained {
    data: Dataset,
    hash: String,
    models: Models,
}

fn load_models(cfg: &RunConfig) -> Result<Trained> {
    let data = load_data(cfg)?;
    let fitted = load_fitted(cfg, &data)?;
    let guided = load_guided(cfg, &fitted)?;
    let hash = denoiser_hash(cfg, &guided.hash);
    let path = cfg.paths.checkpoints.join(DENOISER);
    let ck: DenoiserCheckpoint = artifact::load(&path, "denoiser", &hash)?;
    if ck.archetype_hash != fitted.archetype_hash {
        return Err(CliError::stale(&path, "trained against different archetypes; rerun train-diffusion"));
    }
    let models = Models {
        fit_data: DataMatrix::from_rows(&fitted.ck.fit_data)?,
        archetypes: fitted.ck.archetypes,
        predictor: guided.ck.predictor,
        denoiser: ck.denoiser,
        schedule: ck.schedule,
    };
    Ok(Trained { data, hash, models })
}

fn eval_windows(cfg: &RunConfig, data: &Dataset) -> Result<Vec<SequenceWindow>> {
    if data.windows.test.is_empty() {
        return Err(CliError::Config("the test split holds no windows".into()));
    }
    let p = &cfg.pipeline;
    Ok(pipeline::eval_subset(&data.windows.test, p.max_eval_windows, derive_seed(p.seed, stage::EVAL_SUBSET)))
}

pub fn cmd_forecast(cfg: &RunConfig, format: ForecastFormat, output: Option<PathBuf>) -> Result<Value> {
    let t = load_models(cfg)?;
    let windows = eval_windows(cfg, &t.data)?;
    let p = &cfg.pipeline;
    let seed = derive_seed(p.seed, stage::SAMPLING);
    let forecasts = pipeline::forecast(&t.models, &windows, &p.guidance, p.samples, seed, p.exec)?;
    let names = &t.data.manifest.sequences;
    let file = ForecastFile {
        format_version: FORMAT_VERSION,
        config_hash: t.hash,
        guidance: p.guidance,
        samples: p.samples,
        windows: windows
            .iter()
            .zip(forecasts)
            .map(|(w, samples)| WindowForecast { source: names[w.source_id].name.clone(), offset: w.offset, samples })
            .collect(),
    };
    let path = output.unwrap_or_else(|| {
        cfg.paths.reports.join(match format {
            ForecastFormat::Json => "forecast.json",
            ForecastFormat::Csv => "forecast.csv",
        })
    });
    match format {
        ForecastFormat::Json => write_json(&path, &file)?,
        ForecastFormat::Csv => write_forecast_csv(&path, &file)?,
    }
    let mean_u = file.windows.iter().map(|w| w.samples[0].u).sum::<f64>() / file.windows.len() as f64;
    Ok(json!({ "output": path, "windows": file.windows.len(), "samples": p.samples, "mean_u": mean_u }))
}

/// One row per horizon step of every sample.
fn write_forecast_csv(path: &Path, file: &ForecastFile) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Core(e.into()))?;
    let d = file.windows.first().map_or(0, |w| w.samples[0].forecast[0].len());
    let mut header: Vec<String> = ["source", "offset", "sample", "step", "u", "w_used", "w_star_used"].map(String::from).to_vec();
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| CliError::Core(e.into()))?;
    for win in &file.windows {
        for (k, s) in win.samples.iter().enumerate() {
            for (step, frame) in s.forecast.iter().enumerate() {
                let mut row = vec![
                    win.source.clone(),
                    win.offset.to_string(),
                    k.to_string(),
                    step.to_string(),
                    s.u.to_string(),
                    s.w_used.to_string(),
                    s.w_star_used.to_string(),
                ];
                row.extend(frame.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| CliError::Core(e.into()))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub format_version: u32,
    pub config_hash: String,
    pub n_windows: usize,
    pub samples: usize,
    pub guidance: GuidanceConfig,
    pub sweep: SweepReport,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Value> {
    let t = load_models(cfg)?;
    let windows = eval_windows(cfg, &t.data)?;
    let sweep = pipeline::evaluate_sweep(&t.models, &windows, &cfg.pipeline)?;
    let file = EvaluationFile {
        format_version: FORMAT_VERSION,
        config_hash: t.hash,
        n_windows: windows.len(),
        samples: cfg.pipeline.samples,
        guidance: cfg.pipeline.guidance,
        sweep,
    };
    let path = cfg.paths.reports.join("evaluation.json");
    write_json(&path, &file)?;
    let rows: Vec<Value> = file
        .sweep
        .rows
        .iter()
        .map(|r| json!({ "w_bar": r.w_bar, "mae": r.report.mae_mean, "crps_raw": r.report.crps_raw, "mae_delta": r.mae_delta }))
        .collect();
    Ok(json!({
        "output": path,
        "unguided_mae": file.sweep.unguided.mae_mean,
        "best_w_bar": file.sweep.best_w_bar,
        "rows": rows,
    }))
}

pub fn cmd_certify(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg)?;
    let fitted = load_fitted(cfg, &data)?;
    let guided = load_guided(cfg, &fitted)?;
    let windows = if data.windows.test.is_empty() { &data.windows.train } else { &data.windows.test };
    let fit_data = DataMatrix::from_rows(&fitted.ck.fit_data)?;
    let report = pipeline::certify(&fit_data, &fitted.ck.archetypes, &guided.ck.predictor, windows, &cfg.pipeline)?;
    let path = cfg.paths.reports.join("certify.json");
    write_json(&path, &json!({ "format_version": FORMAT_VERSION, "config_hash": guided.hash, "report": report }))?;
    let summary = json!({
        "output": path,
        "theorem1_checked": report.theorem1.checked,
        "theorem1_violations": report.theorem1.violations,
        "theorem2_violations": report.theorem2.violations,
        "theorem2_max_excess": report.theorem2.max_excess,
        "p_equals_n_max_residual": report.p_equals_n.max_residual,
        "aauq_bound_fraction": report.aauq_trend.bound_fraction,
        "aauq_pearson": report.aauq_trend.pearson,
    });
    let mut failures = Vec::new();
    if report.theorem1.violations > 0 {
        failures.push(format!("{} guidance-error bound violations", report.theorem1.violations));
    }
    if report.theorem2.violations > 0 {
        failures.push(format!("{} sandwich violations", report.theorem2.violations));
    }
    if report.p_equals_n.max_residual > pipeline::EQUALITY_TOL {
        failures.push(format!("p = n residual {:.3e}", report.p_equals_n.max_residual));
    }
    if !failures.is_empty() {
        return Err(CliError::Certification(format!("{} (report at {})", failures.join(", "), path.display())));
    }
    Ok(summary)
}
