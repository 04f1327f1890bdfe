//! End-to-end training, sweep evaluation and certification of the uncertainty bounds.
//!
//! Every stochastic stage draws its seed from [`PipelineConfig::seed`].

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archetypal::{fit_archetypes, ArchetypeSet, DataMatrix, FitConfig, HullOracle};
use crate::data::{sliding_windows, split, Normalizer, Sequence, SequenceSplit, SequenceWindow, SplitRatios};
use crate::diffusion::{
    forecast_batch, scaled_linear, train_denoiser, Denoiser, DenoiserConfig, DenoiserReport, GuidanceConfig,
    NoiseSchedule, SampleOutput, DEFAULT_STEPS,
};
use crate::error::{invalid, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::guidance::{
    certify_theorem1, guidance_errors, train_pattern_predictor, PatternPredictor, PredictorConfig, PredictorReport,
    Theorem1Summary,
};
use crate::metrics::{evaluate, pearson, EvaluationReport, ForecastEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub split: SplitRatios,
    /// Archetype count `p`.
    pub archetypes: usize,
    /// Cap on the number of training frames used to fit the archetypes.
    pub fit_max_points: usize,
    pub fit_tol: f64,
    pub fit_max_iter: usize,
    pub predictor: PredictorConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub guidance: GuidanceConfig,
    /// Forecast samples per window (`K`).
    pub samples: usize,
    /// Guidance scales `w̄` evaluated at the configured `w̄*`.
    pub sweep: Vec<f64>,
    pub max_eval_windows: usize,
    pub certify: CertifyConfig,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            history: 3,
            horizon: 5,
            stride: 1,
            split: SplitRatios::default(),
            archetypes: 4,
            fit_max_points: 500,
            fit_tol: 1e-6,
            fit_max_iter: 500,
            predictor: PredictorConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion_steps: DEFAULT_STEPS,
            guidance: GuidanceConfig::default(),
            samples: 5,
            sweep: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            max_eval_windows: 600,
            certify: CertifyConfig::default(),
            seed: 0,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    /// Query frames for the hull-distance sandwich.
    pub theorem2_points: usize,
    /// Size of the dataset refitted with `p = n`.
    pub equality_points: usize,
    pub equality_queries: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self { theorem2_points: 200, equality_points: 20, equality_queries: 100 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(invalid("history, horizon and stride must be positive"));
        }
        if self.archetypes == 0 || self.fit_max_points == 0 {
            return Err(invalid("archetypes and fit_max_points must be positive"));
        }
        if self.samples == 0 || self.max_eval_windows == 0 {
            return Err(invalid("samples and max_eval_windows must be positive"));
        }
        if self.sweep.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("sweep scales must be finite and >= 0"));
        }
        self.guidance.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        scaled_linear(self.diffusion_steps)
    }
}

/// Per-stage seed derived from the root seed.
pub fn derive_seed(root: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stage);
    rng.next_u64()
}

pub mod stage {
    pub const SPLIT: u64 = 1;
    pub const FIT: u64 = 2;
    pub const PREDICTOR: u64 = 3;
    pub const DENOISER: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const EVAL_SUBSET: u64 = 6;
    pub const CERTIFY: u64 = 7;
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<SequenceWindow>,
    pub val: Vec<SequenceWindow>,
    pub test: Vec<SequenceWindow>,
    pub assignment: SequenceSplit,
}

/// Windows every sequence and splits the windows by source sequence.
pub fn prepare(sequences: &[Sequence], cfg: &PipelineConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let windows = sliding_windows(sequences, cfg.history, cfg.horizon, cfg.stride)?;
    if windows.is_empty() {
        return Err(invalid("no sequence is long enough for one window"));
    }
    let s = split(windows, cfg.split, derive_seed(cfg.seed, stage::SPLIT))?;
    Ok(PreparedData { train: s.train, val: s.val, test: s.test, assignment: s.assignment.expect("split records its assignment") })
}

/// The most recent history frame of every training window, subsampled to at
/// most `max_points` rows.
pub fn fit_points(train: &[SequenceWindow], max_points: usize, seed: u64) -> Result<DataMatrix> {
    let mut rows: Vec<Vec<f64>> = train.iter().map(|w| w.last_history_frame().to_vec()).collect();
    if rows.len() > max_points {
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        rows.truncate(max_points);
    }
    DataMatrix::from_rows(&rows)
}

pub fn fit_patterns(train: &[SequenceWindow], cfg: &PipelineConfig) -> Result<(DataMatrix, ArchetypeSet)> {
    let seed = derive_seed(cfg.seed, stage::FIT);
    let data = fit_points(train, cfg.fit_max_points, seed)?;
    let fit = FitConfig { tol: cfg.fit_tol, max_iter: cfg.fit_max_iter, exec: cfg.exec, ..FitConfig::new(cfg.archetypes, seed) };
    let set = fit_archetypes(&data, &fit)?;
    Ok((data, set))
}

pub fn train_guidance(
    train: &[SequenceWindow],
    val: &[SequenceWindow],
    archetypes: &ArchetypeSet,
    cfg: &PipelineConfig,
) -> Result<(PatternPredictor, PredictorReport)> {
    let pc = PredictorConfig { seed: derive_seed(cfg.seed, stage::PREDICTOR), exec: cfg.exec, ..cfg.predictor.clone() };
    train_pattern_predictor(train, val, archetypes, &pc)
}

pub fn train_diffusion(
    train: &[SequenceWindow],
    archetypes: &ArchetypeSet,
    fa: &PatternPredictor,
    cfg: &PipelineConfig,
) -> Result<(Denoiser, NoiseSchedule, DenoiserReport)> {
    let normalizer = Normalizer::fit(train.iter().flat_map(|w| w.history.iter().chain(&w.horizon)).map(Vec::as_slice))?;
    let sched = cfg.schedule()?;
    let dc = DenoiserConfig { seed: derive_seed(cfg.seed, stage::DENOISER), exec: cfg.exec, ..cfg.denoiser.clone() };
    let (den, report) = train_denoiser(train, archetypes, fa, &sched, &cfg.guidance, &dc, normalizer)?;
    Ok((den, sched, report))
}

/// All trained artefacts of one run.
#[derive(Debug, Clone)]
pub struct Models {
    pub fit_data: DataMatrix,
    pub archetypes: ArchetypeSet,
    pub predictor: PatternPredictor,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone)]
pub struct TrainingReports {
    pub predictor: PredictorReport,
    pub denoiser: DenoiserReport,
}

pub fn train_all(data: &PreparedData, cfg: &PipelineConfig) -> Result<(Models, TrainingReports)> {
    let (fit_data, archetypes) = fit_patterns(&data.train, cfg)?;
    log::info!("fitted {} archetypes, rss {:.4e}", archetypes.count(), archetypes.fit_rss());
    let (predictor, pr) = train_guidance(&data.train, &data.val, &archetypes, cfg)?;
    log::info!("pattern predictor best epoch {}", pr.best_epoch);
    let (denoiser, schedule, dr) = train_diffusion(&data.train, &archetypes, &predictor, cfg)?;
    log::info!("denoiser final loss {:.4}", dr.losses.last().copied().unwrap_or(f64::NAN));
    Ok((Models { fit_data, archetypes, predictor, denoiser, schedule }, TrainingReports { predictor: pr, denoiser: dr }))
}

/// A seeded subset of at most `max` windows, in their original order.
pub fn eval_subset(windows: &[SequenceWindow], max: usize, seed: u64) -> Vec<SequenceWindow> {
    if windows.len() <= max {
        return windows.to_vec();
    }
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(max);
    idx.sort_unstable();
    idx.into_iter().map(|i| windows[i].clone()).collect()
}

pub fn forecast(
    models: &Models,
    windows: &[SequenceWindow],
    guidance: &GuidanceConfig,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<SampleOutput>>> {
    let histories: Vec<Vec<Vec<f64>>> = windows.iter().map(|w| w.history.clone()).collect();
    forecast_batch(
        &models.denoiser,
        &models.predictor,
        &models.archetypes,
        &models.schedule,
        guidance,
        &histories,
        samples,
        seed,
        exec,
    )
}

pub fn ensembles(windows: &[SequenceWindow], forecasts: Vec<Vec<SampleOutput>>) -> Result<Vec<ForecastEnsemble>> {
    windows
        .iter()
        .zip(forecasts)
        .map(|(w, f)| ForecastEnsemble::new(f.into_iter().map(|s| s.forecast).collect(), w.horizon.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w_bar: f64,
    pub w_star_bar: f64,
    pub report: EvaluationReport,
    /// `mae_mean` minus the unguided `mae_mean`.
    pub mae_delta: f64,
    /// Relative MAE change against the unguided run.
    pub mae_relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// `w̄ = 0`, `w̄* = 0`.
    pub unguided: EvaluationReport,
    pub rows: Vec<SweepRow>,
    pub best_w_bar: f64,
}

impl SweepReport {
    pub fn row(&self, w_bar: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.w_bar == w_bar)
    }
}

/// Runs the unguided baseline and one row per swept `w̄`. All rows share the
/// same sampling streams.
pub fn evaluate_sweep(models: &Models, windows: &[SequenceWindow], cfg: &PipelineConfig) -> Result<SweepReport> {
    if windows.is_empty() {
        return Err(invalid("no evaluation windows"));
    }
    let seed = derive_seed(cfg.seed, stage::SAMPLING);
    let run = |g: &GuidanceConfig| -> Result<EvaluationReport> {
        evaluate(&ensembles(windows, forecast(models, windows, g, cfg.samples, seed, cfg.exec)?)?)
    };
    let unguided = run(&GuidanceConfig { w_bar: 0.0, w_star_bar: 0.0, ..cfg.guidance })?;
    let mut rows = Vec::with_capacity(cfg.sweep.len());
    for &w_bar in &cfg.sweep {
        let g = GuidanceConfig { w_bar, ..cfg.guidance };
        let report = run(&g)?;
        log::info!("w_bar {w_bar}: MAE {:.5} (unguided {:.5})", report.mae_mean, unguided.mae_mean);
        rows.push(SweepRow {
            w_bar,
            w_star_bar: g.w_star_bar,
            mae_delta: report.mae_mean - unguided.mae_mean,
            mae_relative_change: (report.mae_mean - unguided.mae_mean) / unguided.mae_mean,
            report,
        });
    }
    let best_w_bar = rows
        .iter()
        .min_by(|a, b| a.report.mae_mean.total_cmp(&b.report.mae_mean))
        .map_or(0.0, |r| r.w_bar);
    Ok(SweepReport { unguided, rows, best_w_bar })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Summary {
    pub checked: usize,
    pub violations: usize,
    /// Largest `|u_A − dist| − δ`; non-positive when the sandwich holds.
    pub max_excess: f64,
    pub mean_delta_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualitySummary {
    pub n_points: usize,
    pub checked: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub windows: usize,
    /// Windows with `L_fG ≥ u_A(x_{T:T'}) − L_fA`.
    pub bound_holds: usize,
    pub bound_fraction: f64,
    /// Correlation of history uncertainty `u_A(x_{1:T})` with `L_fG`.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub theorem1: Theorem1Summary,
    pub theorem2: Theorem2Summary,
    pub p_equals_n: EqualitySummary,
    pub aauq_trend: TrendSummary,
}

pub const SANDWICH_TOL: f64 = 1e-6;
pub const EQUALITY_TOL: f64 = 1e-6;

/// Hull-distance sandwich of every query against `Conv D`.
pub fn certify_theorem2(
    data: &DataMatrix,
    archetypes: &ArchetypeSet,
    queries: &[Vec<f64>],
    exec: Execution,
) -> Result<Theorem2Summary> {
    let oracle = HullOracle::new(data)?;
    let res = try_map_indexed(exec, queries.len(), |i| -> Result<(f64, f64)> {
        let r = oracle.hull_distance(&queries[i], archetypes)?;
        let u = archetypes.aauq(&[&queries[i]])?;
        Ok(((u - r.distance).abs() - r.delta_gap, r.delta_gap))
    })?;
    Ok(Theorem2Summary {
        checked: res.len(),
        violations: res.iter().filter(|(excess, _)| *excess > SANDWICH_TOL).count(),
        max_excess: res.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max),
        mean_delta_gap: res.iter().map(|r| r.1).sum::<f64>() / res.len().max(1) as f64,
    })
}

/// Refits with `p = n` on `data` and compares `u_A` with the hull distance.
pub fn certify_equality(data: &DataMatrix, queries: &[Vec<f64>], seed: u64, exec: Execution) -> Result<EqualitySummary> {
    let set = fit_archetypes(data, &FitConfig { exec, ..FitConfig::new(data.nrows(), seed) })?;
    let oracle = HullOracle::new(data)?;
    let res = try_map_indexed(exec, queries.len(), |i| -> Result<f64> {
        let (distance, ..) = oracle.nearest(&queries[i])?;
        Ok((set.aauq(&[&queries[i]])? - distance).abs())
    })?;
    Ok(EqualitySummary {
        n_points: data.nrows(),
        checked: res.len(),
        max_residual: res.iter().copied().fold(0.0, f64::max),
    })
}

pub fn aauq_trend(
    fa: &PatternPredictor,
    archetypes: &ArchetypeSet,
    windows: &[SequenceWindow],
    exec: Execution,
) -> Result<TrendSummary> {
    let rows = try_map_indexed(exec, windows.len(), |i| -> Result<(f64, f64, bool)> {
        let w = &windows[i];
        let e = guidance_errors(fa, archetypes, w)?;
        let u_hor = archetypes.aauq(&w.horizon)?;
        Ok((archetypes.aauq(&w.history)?, e.l_fg, e.l_fg >= u_hor - e.l_fa - crate::guidance::THEOREM1_TOL))
    })?;
    let holds = rows.iter().filter(|r| r.2).count();
    let us: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ls: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(TrendSummary {
        windows: rows.len(),
        bound_holds: holds,
        bound_fraction: holds as f64 / rows.len().max(1) as f64,
        pearson: pearson(&us, &ls),
    })
}

/// Runs every certification check. `fit_data` is the matrix the archetypes
/// were fitted on.
pub fn certify(
    fit_data: &DataMatrix,
    archetypes: &ArchetypeSet,
    predictor: &PatternPredictor,
    windows: &[SequenceWindow],
    cfg: &PipelineConfig,
) -> Result<CertificationReport> {
    if windows.is_empty() {
        return Err(invalid("no windows to certify"));
    }
    let seed = derive_seed(cfg.seed, stage::CERTIFY);
    let theorem1 = certify_theorem1(predictor, archetypes, windows, cfg.exec)?;
    let queries: Vec<Vec<f64>> = eval_subset(windows, cfg.certify.theorem2_points, seed)
        .iter()
        .map(|w| w.last_history_frame().to_vec())
        .collect();
    let theorem2 = certify_theorem2(fit_data, archetypes, &queries, cfg.exec)?;

    let mut rows = fit_data.rows();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rows.truncate(cfg.certify.equality_points.max(1));
    let small = DataMatrix::from_rows(&rows)?;
    let eq_queries: Vec<Vec<f64>> = windows
        .iter()
        .flat_map(|w| w.horizon.iter().cloned())
        .take(cfg.certify.equality_queries)
        .collect();
    let p_equals_n = certify_equality(&small, &eq_queries, seed, cfg.exec)?;
    let aauq_trend = aauq_trend(predictor, archetypes, windows, cfg.exec)?;
    Ok(CertificationReport { theorem1, theorem2, p_equals_n, aauq_trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            predictor: PredictorConfig { max_epochs: 20, ..Default::default() },
            denoiser: DenoiserConfig { hidden: vec![32], train_steps: 100, batch_size: 16, ..Default::default() },
            diffusion_steps: 50,
            samples: 2,
            sweep: vec![0.0, 2.0],
            max_eval_windows: 20,
            certify: CertifyConfig { theorem2_points: 10, equality_points: 8, equality_queries: 10 },
            fit_max_points: 100,
            ..Default::default()
        }
    }

    #[test]
    fn derived_seeds_differ_by_stage() {
        assert_ne!(derive_seed(1, stage::FIT), derive_seed(1, stage::SPLIT));
        assert_eq!(derive_seed(1, stage::FIT), derive_seed(1, stage::FIT));
    }

    #[test]
    fn fit_points_are_capped_and_seeded() {
        let ds = generate(&SyntheticSpec { n_sequences: 10, ..Default::default() }, 0).unwrap();
        let w = sliding_windows(&ds.sequences, 3, 5, 1).unwrap();
        let a = fit_points(&w, 50, 1).unwrap();
        assert_eq!(a.nrows(), 50);
        assert_eq!(a.view(), fit_points(&w, 50, 1).unwrap().view());
        assert_eq!(fit_points(&w, 10_000, 1).unwrap().nrows(), w.len());
    }

    #[test]
    fn small_pipeline_runs_end_to_end() {
        let spec = SyntheticSpec { n_sequences: 30, sequence_length: 16, ood_fraction: 0.2, ..Default::default() };
        let ds = generate(&spec, 3).unwrap();
        let cfg = small_config();
        let data = prepare(&ds.sequences, &cfg).unwrap();
        let (models, _) = train_all(&data, &cfg).unwrap();
        let test = eval_subset(&data.test, cfg.max_eval_windows, 0);
        let sweep = evaluate_sweep(&models, &test, &cfg).unwrap();
        assert_eq!(sweep.rows.len(), 2);
        assert_eq!(sweep.unguided.n_windows, test.len());
        let cert = certify(&models.fit_data, &models.archetypes, &models.predictor, &test, &cfg).unwrap();
        assert_eq!(cert.theorem1.violations, 0);
        assert_eq!(cert.theorem2.violations, 0);
        assert!(cert.p_equals_n.max_residual <= EQUALITY_TOL);
        assert_eq!(cert.aauq_trend.bound_fraction, 1.0);
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"archetypes": 6}"#).unwrap();
        assert_eq!(cfg.archetypes, 6);
        assert_eq!(cfg.horizon, 5);
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(PipelineConfig { sweep: vec![-1.0], ..Default::default() }.validate().is_err());
    }
}
