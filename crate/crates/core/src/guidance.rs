//! Pattern prediction in archetype space and the guidance function
//! `f_G = A · f_A ∘ c_A`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archetypal::{ArchetypeSet, SimplexVector};
use crate::data::SequenceWindow;
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::{map_slice, try_map_indexed, Execution};
use crate::nn::{batch_gradient, kl_divergence, Activation, AdamState, Head, Loss, Mlp};

/// `f_A`: maps `T` coefficient vectors to `H` predicted coefficient vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPredictor {
    net: Mlp,
    t: usize,
    h: usize,
    p: usize,
    trained: bool,
}

impl PatternPredictor {
    /// Randomly initialised predictor with the given hidden widths.
    pub fn new<R: Rng + ?Sized>(
        p: usize,
        t: usize,
        h: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::new(&Self::dims(p, t, h, hidden)?, activation, Head::StepSoftmax { steps: h }, rng)?;
        Ok(Self { net, t, h, p, trained: false })
    }

    /// Predictor whose every output step is the uniform vector.
    pub fn zeros(p: usize, t: usize, h: usize, hidden: &[usize]) -> Result<Self> {
        let net = Mlp::zeros(&Self::dims(p, t, h, hidden)?, Activation::Tanh, Head::StepSoftmax { steps: h })?;
        Ok(Self { net, t, h, p, trained: false })
    }

    /// Wraps an existing network with input `p·t` and a `StepSoftmax` head.
    pub fn from_net(net: Mlp, p: usize, t: usize) -> Result<Self> {
        let h = match net.head() {
            Head::StepSoftmax { steps } => steps,
            Head::Linear => return Err(shape_err("pattern predictor needs a per-step softmax head")),
        };
        if p == 0 || net.input_dim() != p * t || net.output_dim() != p * h {
            return Err(shape_err(format!(
                "network {:?} does not map {p}x{t} coefficients to {p}x{h}",
                net.dims()
            )));
        }
        Ok(Self { net, t, h, p, trained: false })
    }

    fn dims(p: usize, t: usize, h: usize, hidden: &[usize]) -> Result<Vec<usize>> {
        if p == 0 || t == 0 || h == 0 {
            return Err(invalid("p, T and H must be positive"));
        }
        let mut dims = vec![p * t];
        dims.extend_from_slice(hidden);
        dims.push(p * h);
        Ok(dims)
    }

    /// Marks an externally prepared predictor as ready for downstream use.
    pub fn assume_trained(mut self) -> Self {
        self.trained = true;
        self
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn history_len(&self) -> usize {
        self.t
    }

    pub fn horizon_len(&self) -> usize {
        self.h
    }

    pub fn archetype_count(&self) -> usize {
        self.p
    }

    /// Predicted horizon coefficients from history coefficients.
    pub fn predict(&self, coeffs: &[SimplexVector]) -> Result<Vec<SimplexVector>> {
        if coeffs.len() != self.t || coeffs.iter().any(|c| c.len() != self.p) {
            return Err(shape_err(format!("predictor expects {} coefficient vectors of length {}", self.t, self.p)));
        }
        let out = self.net.forward(&flatten_coeffs(coeffs))?;
        out.chunks(self.p).map(|c| SimplexVector::new(c.to_vec())).collect()
    }
}

fn flatten_coeffs(coeffs: &[SimplexVector]) -> Vec<f64> {
    coeffs.iter().flat_map(|c| c.as_slice().iter().copied()).collect()
}

/// `c_A` applied frame by frame.
pub fn project_frames<R: AsRef<[f64]>>(archetypes: &ArchetypeSet, frames: &[R]) -> Result<Vec<SimplexVector>> {
    frames.iter().map(|f| archetypes.project_point(f.as_ref())).collect()
}

/// Output of `f_G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceOutput {
    pub predicted_coeffs: Vec<SimplexVector>,
    /// `P̂`: one lifted frame `A ĉ_h` per horizon step.
    pub predicted_pattern: Vec<Vec<f64>>,
}

/// Lifts predicted coefficients through `A`.
pub fn lift(archetypes: &ArchetypeSet, coeffs: Vec<SimplexVector>) -> Result<GuidanceOutput> {
    let predicted_pattern = coeffs.iter().map(|c| archetypes.reconstruct(c)).collect::<Result<_>>()?;
    Ok(GuidanceOutput { predicted_coeffs: coeffs, predicted_pattern })
}

/// `f_G(x_{1:T}) = A f_A(c_A(x_{1:T}))`.
pub fn guide<R: AsRef<[f64]>>(fa: &PatternPredictor, archetypes: &ArchetypeSet, history: &[R]) -> Result<GuidanceOutput> {
    check_dims(fa, archetypes)?;
    if history.len() != fa.t {
        return Err(shape_err(format!("history has {} frames, predictor expects {}", history.len(), fa.t)));
    }
    let out = lift(archetypes, fa.predict(&project_frames(archetypes, history)?)?)?;
    debug_assert!(out.predicted_coeffs.iter().zip(&out.predicted_pattern).all(|(c, frame)| {
        let direct = archetypes.reconstruct(c).unwrap();
        direct.iter().zip(frame).all(|(a, b)| (a - b).abs() <= 1e-8)
    }));
    Ok(out)
}

fn check_dims(fa: &PatternPredictor, archetypes: &ArchetypeSet) -> Result<()> {
    if fa.p != archetypes.count() {
        return Err(shape_err(format!("predictor uses {} archetypes, set has {}", fa.p, archetypes.count())));
    }
    Ok(())
}

fn frob_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)))
        .sum::<f64>()
        .sqrt()
}

/// All three error functionals of one window, evaluated with one shared set
/// of projected coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceErrors {
    /// `‖x_{T:T'} − A f_A(c_A(x_{1:T}))‖_F`
    pub l_fg: f64,
    /// `‖A c_{T:T'} − A f_A(c_{1:T})‖_F`
    pub l_fa: f64,
    /// `‖x_{T:T'} − A c_A(x_{T:T'})‖_F`
    pub l_ca: f64,
}

pub fn guidance_errors(fa: &PatternPredictor, archetypes: &ArchetypeSet, window: &SequenceWindow) -> Result<GuidanceErrors> {
    if window.horizon_len() != fa.h {
        return Err(shape_err(format!("window horizon {} differs from predictor horizon {}", window.horizon_len(), fa.h)));
    }
    let predicted = guide(fa, archetypes, &window.history)?.predicted_pattern;
    let true_lifted: Vec<Vec<f64>> = project_frames(archetypes, &window.horizon)?
        .iter()
        .map(|c| archetypes.reconstruct(c))
        .collect::<Result<_>>()?;
    Ok(GuidanceErrors {
        l_fg: frob_dist(&window.horizon, &predicted),
        l_fa: frob_dist(&true_lifted, &predicted),
        l_ca: frob_dist(&window.horizon, &true_lifted),
    })
}

pub fn error_l_fa(fa: &PatternPredictor, archetypes: &ArchetypeSet, window: &SequenceWindow) -> Result<f64> {
    Ok(guidance_errors(fa, archetypes, window)?.l_fa)
}

pub fn error_l_fg(fa: &PatternPredictor, archetypes: &ArchetypeSet, window: &SequenceWindow) -> Result<f64> {
    Ok(guidance_errors(fa, archetypes, window)?.l_fg)
}

pub const THEOREM1_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `L_fG ≥ L_cA(x_{T:T'}) − L_fA`.
pub fn check_theorem1(fa: &PatternPredictor, archetypes: &ArchetypeSet, window: &SequenceWindow) -> Result<Theorem1Check> {
    let e = guidance_errors(fa, archetypes, window)?;
    let rhs = e.l_ca - e.l_fa;
    Ok(Theorem1Check { lhs: e.l_fg, rhs, holds: e.l_fg >= rhs - THEOREM1_TOL })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Summary {
    pub checked: usize,
    pub violations: usize,
    /// Largest `rhs − lhs` observed; negative when every check has slack.
    pub worst_margin: f64,
}

pub fn certify_theorem1(
    fa: &PatternPredictor,
    archetypes: &ArchetypeSet,
    windows: &[SequenceWindow],
    exec: Execution,
) -> Result<Theorem1Summary> {
    let checks = try_map_indexed(exec, windows.len(), |i| check_theorem1(fa, archetypes, &windows[i]))?;
    Ok(Theorem1Summary {
        checked: checks.len(),
        violations: checks.iter().filter(|c| !c.holds).count(),
        worst_margin: checks.iter().map(|c| c.rhs - c.lhs).fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: Activation::Tanh,
            lr: 5e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub train_kl: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub val_kl: Vec<f64>,
    pub best_epoch: usize,
}

/// Coefficient-space training pairs for one window set.
#[derive(Debug, Clone)]
pub struct CoefficientPairs {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub horizons: Vec<Vec<Vec<f64>>>,
}

pub fn coefficient_pairs(windows: &[SequenceWindow], archetypes: &ArchetypeSet, exec: Execution) -> Result<CoefficientPairs> {
    let projected = map_slice(exec, windows, |w| -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            flatten_coeffs(&project_frames(archetypes, &w.history)?),
            flatten_coeffs(&project_frames(archetypes, &w.horizon)?),
        ))
    });
    let mut pairs = CoefficientPairs { inputs: Vec::new(), targets: Vec::new(), horizons: Vec::new() };
    for (w, r) in windows.iter().zip(projected) {
        let (x, y) = r?;
        pairs.inputs.push(x);
        pairs.targets.push(y);
        pairs.horizons.push(w.horizon.clone());
    }
    Ok(pairs)
}

fn evaluate(
    net: &Mlp,
    archetypes: &ArchetypeSet,
    pairs: &CoefficientPairs,
    p: usize,
    exec: Execution,
) -> Result<(f64, f64)> {
    let per = try_map_indexed(exec, pairs.inputs.len(), |i| -> Result<(f64, f64)> {
        let out = net.forward(&pairs.inputs[i])?;
        let kl = kl_divergence(&pairs.targets[i], &out);
        let mut abs = 0.0;
        let mut count = 0usize;
        for (c, truth) in out.chunks(p).zip(&pairs.horizons[i]) {
            let lifted = archetypes.reconstruct(&SimplexVector::new(c.to_vec())?)?;
            abs += lifted.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += truth.len();
        }
        Ok((kl, abs / count as f64))
    })?;
    let n = per.len() as f64;
    Ok((per.iter().map(|r| r.0).sum::<f64>() / n, per.iter().map(|r| r.1).sum::<f64>() / n))
}

/// Fits `f_A` with the KL loss and Adam, keeping the parameters with the best
/// validation MAE in the lifted space. Without validation windows the
/// training set is used for model selection.
pub fn train_pattern_predictor(
    train: &[SequenceWindow],
    val: &[SequenceWindow],
    archetypes: &ArchetypeSet,
    cfg: &PredictorConfig,
) -> Result<(PatternPredictor, PredictorReport)> {
    if train.is_empty() {
        return Err(invalid("no training windows"));
    }
    let (t, h, d) = (train[0].history_len(), train[0].horizon_len(), train[0].dim());
    if train.iter().chain(val).any(|w| w.history_len() != t || w.horizon_len() != h || w.dim() != d) {
        return Err(shape_err("all windows must share T, H and d"));
    }
    if d != archetypes.dim() {
        return Err(shape_err(format!("windows have d = {d}, archetypes live in R^{}", archetypes.dim())));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("batch_size and lr must be positive"));
    }
    let p = archetypes.count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PatternPredictor::new(p, t, h, &cfg.hidden, cfg.activation, &mut rng)?;
    let train_pairs = coefficient_pairs(train, archetypes, cfg.exec)?;
    let val_pairs = if val.is_empty() {
        log::warn!("no validation windows; early stopping monitors the training set");
        train_pairs.clone()
    } else {
        coefficient_pairs(val, archetypes, cfg.exec)?
    };

    let mut adam = AdamState::new(model.net.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..train_pairs.inputs.len()).collect();
    let mut report = PredictorReport { train_kl: Vec::new(), val_mae: Vec::new(), val_kl: Vec::new(), best_epoch: 0 };
    let (val_kl0, val_mae0) = evaluate(&model.net, archetypes, &val_pairs, p, cfg.exec)?;
    let mut best = (val_mae0, model.net.params().to_vec());
    report.val_kl.push(val_kl0);
    report.val_mae.push(val_mae0);
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<f64>, Vec<f64>)> = chunk
                .iter()
                .map(|&i| (train_pairs.inputs[i].clone(), train_pairs.targets[i].clone()))
                .collect();
            let (loss, grad) = batch_gradient(&model.net, &batch, Loss::Kl, cfg.exec)?;
            adam.step(model.net.params_mut(), &grad)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        report.train_kl.push(epoch_loss / order.len() as f64);
        let (val_kl, val_mae) = evaluate(&model.net, archetypes, &val_pairs, p, cfg.exec)?;
        report.val_kl.push(val_kl);
        report.val_mae.push(val_mae);
        log::debug!("predictor epoch {epoch}: train KL {:.3e}, val MAE {val_mae:.4}", report.train_kl[epoch - 1]);
        if val_mae < best.0 {
            best = (val_mae, model.net.params().to_vec());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.net.set_params(best.1)?;
    model.trained = true;
    Ok((model, report))
}

/// Mean KL of `fa` over the windows against their projected horizons.
pub fn mean_kl(fa: &PatternPredictor, archetypes: &ArchetypeSet, windows: &[SequenceWindow], exec: Execution) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("no windows"));
    }
    check_dims(fa, archetypes)?;
    let pairs = coefficient_pairs(windows, archetypes, exec)?;
    Ok(evaluate(&fa.net, archetypes, &pairs, fa.p, exec)?.0)
}

/// Mean predicted coefficient error `|ĉ − c|` per entry over the windows.
pub fn coefficient_mae(
    fa: &PatternPredictor,
    archetypes: &ArchetypeSet,
    windows: &[SequenceWindow],
    exec: Execution,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("no windows"));
    }
    let pairs = coefficient_pairs(windows, archetypes, exec)?;
    let per = try_map_indexed(exec, pairs.inputs.len(), |i| -> Result<f64> {
        let out = fa.net.forward(&pairs.inputs[i])?;
        Ok(out.iter().zip(&pairs.targets[i]).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64)
    })?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub(crate) fn require_trained(fa: &PatternPredictor) -> Result<()> {
    if fa.trained {
        Ok(())
    } else {
        Err(Error::InvalidState("pattern predictor has not been trained".into()))
    }
}
