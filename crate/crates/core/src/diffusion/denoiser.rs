use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{forward_sample, NoiseSchedule};
use super::GuidanceConfig;
use crate::archetypal::ArchetypeSet;
use crate::data::{flatten, Normalizer, SequenceWindow};
use crate::error::{invalid, shape_err, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::guidance::{guide, require_trained, PatternPredictor};
use crate::nn::{batch_gradient, Activation, AdamState, Head, Loss, Mlp};

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding(s: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out.push((s as f64 * freq).sin());
        out.push((s as f64 * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// `ε_θ(z, x_{1:T}, P̂)` and `ε_θ(z, x_{1:T}, ∅)` in one network.
///
/// Input layout: noisy horizon (`d·H`), history (`d·T`), pattern (`d·H`,
/// zeros when absent), a presence flag, and the step embedding. All frame
/// data is in normalized space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    net: Mlp,
    d: usize,
    t: usize,
    h: usize,
    normalizer: Normalizer,
}

impl Denoiser {
    /// Random network with the pattern inputs and presence flag disconnected
    /// at initialisation.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        t: usize,
        h: usize,
        hidden: &[usize],
        activation: Activation,
        normalizer: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || t == 0 || h == 0 {
            return Err(invalid("d, T and H must be positive"));
        }
        if normalizer.dim() != d {
            return Err(shape_err("normalizer dimension differs from d"));
        }
        let mut dims = vec![2 * d * h + d * t + 1 + TIME_EMBED_DIM];
        dims.extend_from_slice(hidden);
        dims.push(d * h);
        let mut net = Mlp::new(&dims, activation, Head::Linear, rng)?;
        let cond_start = d * h + d * t;
        net.zero_input_weights(cond_start..cond_start + d * h + 1);
        Ok(Self { net, d, t, h, normalizer })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn history_len(&self) -> usize {
        self.t
    }

    pub fn horizon_len(&self) -> usize {
        self.h
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Network input for one evaluation; `cond = None` is the null token.
    pub fn input(&self, z: &[f64], history: &[f64], cond: Option<&[f64]>, s: usize) -> Result<Vec<f64>> {
        let (dh, dt) = (self.d * self.h, self.d * self.t);
        if z.len() != dh || history.len() != dt || cond.is_some_and(|c| c.len() != dh) {
            return Err(shape_err(format!(
                "denoiser expects z and pattern of length {dh} and history of length {dt}"
            )));
        }
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(z);
        x.extend_from_slice(history);
        match cond {
            Some(c) => {
                x.extend_from_slice(c);
                x.push(1.0);
            }
            None => x.extend(std::iter::repeat_n(0.0, dh + 1)),
        }
        x.extend(time_embedding(s, TIME_EMBED_DIM));
        Ok(x)
    }

    /// Noise estimate; all vectors normalized and frame-major.
    pub fn epsilon(&self, z: &[f64], history: &[f64], cond: Option<&[f64]>, s: usize) -> Result<Vec<f64>> {
        self.net.forward(&self.input(z, history, cond, s)?)
    }

    #[cfg(test)]
    pub(crate) fn set_params_for_test(&mut self, params: Vec<f64>) {
        self.net.set_params(params).unwrap();
    }

    pub(crate) fn check_window_shape(&self, t: usize, h: usize, d: usize) -> Result<()> {
        if (t, h, d) != (self.t, self.h, self.d) {
            return Err(shape_err(format!(
                "denoiser built for (T, H, d) = ({}, {}, {}), got ({t}, {h}, {d})",
                self.t, self.h, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            lr: 1e-3,
            batch_size: 64,
            train_steps: 4000,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Normalized `(history, horizon, pattern)` of every training window.
struct Prepared {
    history: Vec<Vec<f64>>,
    horizon: Vec<Vec<f64>>,
    pattern: Vec<Vec<f64>>,
}

/// Conditioning-dropout training of the noise predictor. Windows are in
/// original units; `normalizer` maps them into the diffusion space.
pub fn train_denoiser(
    windows: &[SequenceWindow],
    archetypes: &ArchetypeSet,
    fa: &PatternPredictor,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    cfg: &DenoiserConfig,
    normalizer: Normalizer,
) -> Result<(Denoiser, DenoiserReport)> {
    require_trained(fa)?;
    guidance.validate()?;
    if windows.is_empty() {
        return Err(invalid("no training windows"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("batch_size and lr must be positive"));
    }
    let (t, h, d) = (windows[0].history_len(), windows[0].horizon_len(), windows[0].dim());
    if windows.iter().any(|w| w.history_len() != t || w.horizon_len() != h || w.dim() != d) {
        return Err(shape_err("all windows must share T, H and d"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Denoiser::new(d, t, h, &cfg.hidden, cfg.activation, normalizer, &mut rng)?;
    let patterns = try_map_indexed(cfg.exec, windows.len(), |i| guide(fa, archetypes, &windows[i].history))?;
    let norm = &model.normalizer;
    let data = Prepared {
        history: windows.iter().map(|w| norm.normalize_flat(&flatten(&w.history))).collect(),
        horizon: windows.iter().map(|w| norm.normalize_flat(&flatten(&w.horizon))).collect(),
        pattern: patterns.iter().map(|g| norm.normalize_flat(&flatten(&g.predicted_pattern))).collect(),
    };

    let mut adam = AdamState::new(model.net.num_params(), cfg.lr);
    let mut report = DenoiserReport { losses: Vec::with_capacity(cfg.train_steps) };
    for step in 0..cfg.train_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..windows.len());
            let s = rng.random_range(1..=sched.steps());
            let eps: Vec<f64> = (0..d * h).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dropped = rng.random_bool(guidance.p_drop);
            let z = forward_sample(&data.horizon[i], s, sched, &eps)?;
            let cond = if dropped { None } else { Some(data.pattern[i].as_slice()) };
            batch.push((model.input(&z, &data.history[i], cond, s)?, eps));
        }
        let (loss, grad) = batch_gradient(&model.net, &batch, Loss::Mse, cfg.exec)?;
        adam.step(model.net.params_mut(), &grad)?;
        report.losses.push(loss);
        if step % 500 == 0 {
            log::debug!("denoiser step {step}: loss {loss:.4}");
        }
    }
    model.net.validate()?;
    Ok((model, report))
}
