//! DDPM forecasting with dynamically scaled classifier-free pattern guidance
//! and pattern mixing.

mod denoiser;
mod schedule;

pub use denoiser::{time_embedding, train_denoiser, Denoiser, DenoiserConfig, DenoiserReport, TIME_EMBED_DIM};
pub use schedule::{forward_sample, make_schedule, scaled_linear, NoiseSchedule, ScheduleKind, DEFAULT_STEPS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archetypal::ArchetypeSet;
use crate::data::{flatten, unflatten};
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::guidance::{guide, PatternPredictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Maximum guidance scale `w̄`.
    pub w_bar: f64,
    /// Maximum mixing scale `w̄*`.
    pub w_star_bar: f64,
    /// Largest tolerated uncertainty `γ`.
    pub gamma: f64,
    /// Conditioning dropout probability during training.
    pub p_drop: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w_bar: 1.0, w_star_bar: 0.2, gamma: 0.1, p_drop: 0.2 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_bar >= 0.0 && self.w_bar.is_finite()) {
            return Err(invalid("w_bar must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.w_star_bar) || !(0.0..=1.0).contains(&self.p_drop) {
            return Err(invalid("w_star_bar and p_drop must lie in [0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be positive"));
        }
        Ok(())
    }
}

/// `ReLU(−(w̄/γ)·u + w̄)`: `w̄` at `u = 0`, falling linearly to `0` at `u = γ`.
pub fn dynamic_scale(u: f64, max_scale: f64, gamma: f64) -> f64 {
    if u >= gamma {
        0.0
    } else {
        max_scale * (1.0 - u / gamma)
    }
}

/// `w·ε_cond + (1 − w)·ε_uncond`; only the needed branch is evaluated at
/// `w ∈ {0, 1}`.
pub fn guided_epsilon(den: &Denoiser, z: &[f64], history: &[f64], pattern: &[f64], w: f64, s: usize) -> Result<Vec<f64>> {
    if w == 0.0 {
        return den.epsilon(z, history, None, s);
    }
    let cond = den.epsilon(z, history, Some(pattern), s)?;
    if w == 1.0 {
        return Ok(cond);
    }
    let uncond = den.epsilon(z, history, None, s)?;
    Ok(cond.iter().zip(&uncond).map(|(c, u)| w * c + (1.0 - w) * u).collect())
}

/// One forecast with its guidance telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    /// `H` frames in original units.
    pub forecast: Vec<Vec<f64>>,
    pub u: f64,
    pub w_used: f64,
    pub w_star_used: f64,
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Reverse chain from `x_S ~ N(0, I)` to `x_0` with a fixed guidance scale.
/// `pattern = None` runs the unconditional branch only.
fn reverse_chain<R: Rng + ?Sized>(
    den: &Denoiser,
    sched: &NoiseSchedule,
    history: &[f64],
    pattern: Option<&[f64]>,
    w: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = den.dim() * den.horizon_len();
    let mut x = standard_normal(n, rng);
    for s in (1..=sched.steps()).rev() {
        let eps = match pattern {
            Some(p) => guided_epsilon(den, &x, history, p, w, s)?,
            None => den.epsilon(&x, history, None, s)?,
        };
        let (alpha, ab, beta) = (sched.alpha(s), sched.alpha_bar(s), sched.beta(s));
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - coef * e);
        }
        if s > 1 {
            let sigma = beta.sqrt();
            for xi in x.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *xi += sigma * n;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence { step: s });
        }
    }
    Ok(x)
}

fn check_history<R: AsRef<[f64]>>(den: &Denoiser, history: &[R]) -> Result<Vec<f64>> {
    let d = history.first().map_or(0, |f| f.as_ref().len());
    if history.iter().any(|f| f.as_ref().len() != d) {
        return Err(shape_err("history frames differ in dimension"));
    }
    den.check_window_shape(history.len(), den.horizon_len(), d)?;
    let frames: Vec<Vec<f64>> = history.iter().map(|f| f.as_ref().to_vec()).collect();
    Ok(den.normalizer().normalize_flat(&flatten(&frames)))
}

/// Pattern-guided forecast of one horizon.
///
/// `P̂`, the uncertainty `u` and both scales are computed once from the
/// history. The reverse chain runs in normalized space; the final mix
/// `w*·P̂ + (1 − w*)·x_0` is taken in original units.
pub fn sample_horizon<R: AsRef<[f64]>, G: Rng + ?Sized>(
    den: &Denoiser,
    fa: &PatternPredictor,
    archetypes: &ArchetypeSet,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    history: &[R],
    rng: &mut G,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let hist = check_history(den, history)?;
    if fa.horizon_len() != den.horizon_len() {
        return Err(shape_err("predictor and denoiser horizons differ"));
    }
    let pattern = guide(fa, archetypes, history)?.predicted_pattern;
    let pattern_norm = den.normalizer().normalize_flat(&flatten(&pattern));
    let u = archetypes.aauq(history)?;
    let w = dynamic_scale(u, cfg.w_bar, cfg.gamma);
    let w_star = dynamic_scale(u, cfg.w_star_bar, cfg.gamma);

    let x0 = reverse_chain(den, sched, &hist, Some(&pattern_norm), w, rng)?;
    let x0 = unflatten(&den.normalizer().denormalize_flat(&x0), den.dim());
    let forecast = if w_star == 0.0 {
        x0
    } else if w_star == 1.0 {
        pattern
    } else {
        pattern
            .iter()
            .zip(&x0)
            .map(|(p, x)| p.iter().zip(x).map(|(a, b)| w_star * a + (1.0 - w_star) * b).collect())
            .collect()
    };
    Ok(SampleOutput { forecast, u, w_used: w, w_star_used: w_star })
}

/// Plain history-conditioned DDPM sampler without any pattern input.
pub fn sample_unguided<R: AsRef<[f64]>, G: Rng + ?Sized>(
    den: &Denoiser,
    sched: &NoiseSchedule,
    history: &[R],
    rng: &mut G,
) -> Result<Vec<Vec<f64>>> {
    let hist = check_history(den, history)?;
    let x0 = reverse_chain(den, sched, &hist, None, 0.0, rng)?;
    Ok(unflatten(&den.normalizer().denormalize_flat(&x0), den.dim()))
}

/// Random stream for window `index` under `root_seed`.
pub fn window_rng(root_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(index as u64);
    rng
}

/// `samples` forecasts per history, each history drawing from its own stream
/// so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn forecast_batch(
    den: &Denoiser,
    fa: &PatternPredictor,
    archetypes: &ArchetypeSet,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    histories: &[Vec<Vec<f64>>],
    samples: usize,
    root_seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<SampleOutput>>> {
    if samples == 0 {
        return Err(invalid("need at least one sample per window"));
    }
    try_map_indexed(exec, histories.len(), |i| {
        let mut rng = window_rng(root_seed, i);
        (0..samples).map(|_| sample_horizon(den, fa, archetypes, sched, cfg, &histories[i], &mut rng)).collect()
    })
}
