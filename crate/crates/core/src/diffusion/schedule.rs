use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// `β_s`, `α_s = 1 − β_s` and `ᾱ_s = ∏_{i≤s} α_i` for `s = 1..=S`, stored
/// zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleSpec {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = crate::Error;

    fn try_from(s: ScheduleSpec) -> Result<Self> {
        make_schedule(s.steps, s.beta_start, s.beta_end, s.kind)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        Self { steps: s.steps(), beta_start: s.beta_start, beta_end: s.beta_end, kind: s.kind }
    }
}

pub const DEFAULT_STEPS: usize = 200;

/// Linear schedule whose endpoints are `1e-4 → 0.02` at 1000 steps, scaled by
/// `1000 / S` so the total noise is comparable at any step count.
pub fn scaled_linear(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("a schedule needs at least one step"));
    }
    let k = 1000.0 / steps as f64;
    make_schedule(steps, 1e-4 * k, 0.02 * k, ScheduleKind::Linear)
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("a schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { kind, beta_start, beta_end, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `β_s` for one-based `s`.
    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alphas[s - 1]
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bars[s - 1]
    }

    pub(crate) fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(invalid(format!("diffusion step {s} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_s x_0 + √(1 − ᾱ_s) ε`.
pub fn forward_sample(x0: &[f64], s: usize, sched: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    sched.check_step(s)?;
    if x0.len() != noise.len() {
        return Err(shape_err(format!("x0 has {} entries, noise {}", x0.len(), noise.len())));
    }
    let ab = sched.alpha_bar(s);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.01, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.01]);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
    }

    #[test]
    fn reference_schedule_reaches_noise() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 5e-5);
    }

    #[test]
    fn default_schedule_is_terminal_noise() {
        let s = scaled_linear(DEFAULT_STEPS).unwrap();
        assert!(s.alpha_bar(DEFAULT_STEPS) < 0.01);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(scaled_linear(10).is_err());
    }

    #[test]
    fn forward_sample_edges() {
        let s = scaled_linear(200).unwrap();
        let x = [1.0, -2.0];
        let y = forward_sample(&x, 5, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![s.alpha_bar(5).sqrt(), -2.0 * s.alpha_bar(5).sqrt()]);
        let y = forward_sample(&x, 200, &s, &[0.3, 0.7]).unwrap();
        assert!((y[0] - 0.3).abs() < 0.02 && (y[1] - 0.7).abs() < 0.02);
        assert!(forward_sample(&x, 0, &s, &[0.0, 0.0]).is_err());
        assert!(forward_sample(&x, 1, &s, &[0.0]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let s = scaled_linear(50).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn alpha_bar_recursion_is_exact(steps in 1usize..400, lo in 1e-5f64..0.01, span in 0.0f64..0.05) {
            let s = make_schedule(steps, lo, lo + span, ScheduleKind::Linear).unwrap();
            prop_assert_eq!(s.alpha_bar(1), s.alpha(1));
            for i in 2..=steps {
                prop_assert_eq!(s.alpha_bar(i), s.alpha_bar(i - 1) * s.alpha(i));
            }
        }
    }
}
