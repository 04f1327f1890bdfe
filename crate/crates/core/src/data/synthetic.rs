//! Synthetic pattern sequences with known ground-truth archetypes.
//!
//! Frames are `x_t = A c_t + noise`, where `c_t` follows closed-form dynamics
//! on the simplex. Out-of-distribution sequences are shifted by a fixed offset
//! along a direction orthogonal to the affine hull of `A`, so their clean
//! frames sit exactly `ood_offset` away from `Conv A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::archetypal::{project_to_simplex, ArchetypeSet, SimplexVector};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoeffDynamics {
    Constant,
    /// Straight line between two random simplex points across the sequence.
    LinearDrift,
    /// Cycles through `period` random simplex points.
    Oscillating { period: usize },
    /// Gaussian steps projected back onto the simplex.
    RandomWalk { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub d: usize,
    pub p_true: usize,
    pub n_sequences: usize,
    pub sequence_length: usize,
    pub dynamics: CoeffDynamics,
    pub noise_sigma: f64,
    pub ood_fraction: f64,
    pub ood_offset: f64,
    /// Fixed ground-truth archetypes (`p_true` points in `R^d`); drawn
    /// uniformly from `[0,1]^d` when absent.
    pub archetypes: Option<Vec<Vec<f64>>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d: 8,
            p_true: 4,
            n_sequences: 400,
            sequence_length: 40,
            dynamics: CoeffDynamics::Oscillating { period: 2 },
            noise_sigma: 0.01,
            ood_fraction: 0.0,
            ood_offset: 0.5,
            archetypes: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p_true == 0 || self.n_sequences == 0 || self.sequence_length == 0 {
            return Err(invalid("d, p_true, n_sequences and sequence_length must be positive"));
        }
        match &self.archetypes {
            Some(a) => {
                if a.len() != self.p_true || a.iter().any(|v| v.len() != self.d) {
                    return Err(invalid("explicit archetypes must be p_true points in R^d"));
                }
            }
            None if self.p_true > self.d + 1 => {
                return Err(invalid(format!("p_true = {} exceeds d + 1 = {}", self.p_true, self.d + 1)));
            }
            None => {}
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return Err(invalid("ood_fraction must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.ood_offset >= 0.0) {
            return Err(invalid("noise_sigma and ood_offset must be non-negative"));
        }
        match self.dynamics {
            CoeffDynamics::Oscillating { period: 0 } => Err(invalid("oscillation period must be >= 1")),
            CoeffDynamics::RandomWalk { step } if !(step >= 0.0) => Err(invalid("random-walk step must be >= 0")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub sequences: Vec<Sequence>,
    /// Ground-truth archetypes.
    pub archetypes: ArchetypeSet,
    /// Clean coefficient path of every sequence.
    pub coefficients: Vec<Vec<SimplexVector>>,
    /// Whether each sequence was pushed out of the hull.
    pub ood: Vec<bool>,
}

/// Draws a dataset from `spec`; deterministic per seed.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, p) = (spec.d, spec.p_true);
    let points: Vec<Vec<f64>> = match &spec.archetypes {
        Some(a) => a.clone(),
        None => (0..p).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
    };

    let n_ood = (spec.ood_fraction * spec.n_sequences as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_sequences).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut ood = vec![false; spec.n_sequences];
    for &i in &order[..n_ood] {
        ood[i] = true;
    }
    let complement = if n_ood > 0 { Some(orthonormal_edges(&points)) } else { None };

    let mut sequences = Vec::with_capacity(spec.n_sequences);
    let mut coefficients = Vec::with_capacity(spec.n_sequences);
    for (s, &is_ood) in ood.iter().enumerate() {
        let path = coefficient_path(spec, p, &mut rng)?;
        let shift = match (&complement, is_ood) {
            (Some(edges), true) => {
                let dir = normal_direction(edges, d, &mut rng)?;
                Some(dir.into_iter().map(|v| v * spec.ood_offset).collect::<Vec<_>>())
            }
            _ => None,
        };
        let frames = path
            .iter()
            .map(|c| {
                (0..d)
                    .map(|i| {
                        let clean: f64 = (0..p).map(|j| c[j] * points[j][i]).sum();
                        let off = shift.as_ref().map_or(0.0, |v| v[i]);
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        clean + off + spec.noise_sigma * noise
                    })
                    .collect()
            })
            .collect();
        sequences.push(Sequence { name: format!("seq_{s:04}"), frames });
        coefficients.push(path);
    }

    Ok(SyntheticDataset { sequences, archetypes: ArchetypeSet::from_points(&points)?, coefficients, ood })
}

fn dirichlet_uniform<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..p).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / sum).collect()
}

fn coefficient_path<R: Rng + ?Sized>(spec: &SyntheticSpec, p: usize, rng: &mut R) -> Result<Vec<SimplexVector>> {
    let len = spec.sequence_length;
    let path: Vec<Vec<f64>> = match spec.dynamics {
        CoeffDynamics::Constant => vec![dirichlet_uniform(p, rng); len],
        CoeffDynamics::LinearDrift => {
            let a = dirichlet_uniform(p, rng);
            let b = dirichlet_uniform(p, rng);
            (0..len)
                .map(|t| {
                    let lambda = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
                    a.iter().zip(&b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
                })
                .collect()
        }
        CoeffDynamics::Oscillating { period } => {
            let anchors: Vec<Vec<f64>> = (0..period).map(|_| dirichlet_uniform(p, rng)).collect();
            (0..len).map(|t| anchors[t % period].clone()).collect()
        }
        CoeffDynamics::RandomWalk { step } => {
            let mut c = dirichlet_uniform(p, rng);
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                out.push(c.clone());
                let moved: Vec<f64> = c
                    .iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(rng);
                        v + step * z
                    })
                    .collect();
                c = project_to_simplex(&moved)?.into_inner();
            }
            out
        }
    };
    path.into_iter().map(SimplexVector::new).collect()
}

/// Orthonormal basis of the edge directions `a_j − a_0`.
fn orthonormal_edges(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for pt in &points[1..] {
        let mut v: Vec<f64> = pt.iter().zip(&points[0]).map(|(a, b)| a - b).collect();
        orthogonalize(&mut v, &basis);
        let n = norm(&v);
        if n > 1e-10 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Random unit vector orthogonal to every edge direction.
fn normal_direction<R: Rng + ?Sized>(edges: &[Vec<f64>], d: usize, rng: &mut R) -> Result<Vec<f64>> {
    for _ in 0..16 {
        let mut g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        orthogonalize(&mut g, edges);
        orthogonalize(&mut g, edges);
        let n = norm(&g);
        if n > 1e-6 {
            return Ok(g.into_iter().map(|x| x / n).collect());
        }
    }
    Err(invalid("archetypes span R^d; no direction leaves their affine hull orthogonally"))
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(q) {
            *x -= dot * y;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archetypal::{DataMatrix, HullOracle};

    #[test]
    fn clean_frames_lie_in_the_true_hull() {
        let spec = SyntheticSpec { noise_sigma: 0.0, n_sequences: 10, sequence_length: 12, ..Default::default() };
        let ds = generate(&spec, 1).unwrap();
        let truth = DataMatrix::from_rows(&(0..4).map(|j| ds.archetypes.archetype(j)).collect::<Vec<_>>()).unwrap();
        let oracle = HullOracle::new(&truth).unwrap();
        for s in &ds.sequences {
            for f in &s.frames {
                assert!(oracle.nearest(f).unwrap().0 < 1e-8);
            }
        }
    }

    #[test]
    fn ood_frames_sit_at_the_offset() {
        let square = vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]];
        let spec = SyntheticSpec {
            d: 3,
            p_true: 4,
            n_sequences: 20,
            sequence_length: 6,
            dynamics: CoeffDynamics::RandomWalk { step: 0.1 },
            noise_sigma: 0.0,
            ood_fraction: 0.5,
            ood_offset: 0.5,
            archetypes: Some(square.clone()),
        };
        let ds = generate(&spec, 2).unwrap();
        assert_eq!(ds.ood.iter().filter(|&&o| o).count(), 10);
        let oracle = HullOracle::new(&DataMatrix::from_rows(&square).unwrap()).unwrap();
        for (s, &o) in ds.sequences.iter().zip(&ds.ood) {
            for f in &s.frames {
                let dist = oracle.nearest(f).unwrap().0;
                let expected = if o { 0.5 } else { 0.0 };
                assert!((dist - expected).abs() < 1e-6, "{dist}");
            }
        }
    }

    #[test]
    fn oscillation_has_exact_period() {
        let spec = SyntheticSpec { n_sequences: 5, ..Default::default() };
        let ds = generate(&spec, 3).unwrap();
        for path in &ds.coefficients {
            for t in 0..path.len() - 2 {
                assert_eq!(path[t + 2], path[t]);
            }
            assert_ne!(path[0], path[1]);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SyntheticSpec { n_sequences: 8, ood_fraction: 0.25, ..Default::default() };
        let a = generate(&spec, 4).unwrap();
        let b = generate(&spec, 4).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_ne!(a.sequences, generate(&spec, 5).unwrap().sequences);
    }

    #[test]
    fn spec_validation() {
        assert!(generate(&SyntheticSpec { p_true: 10, ..Default::default() }, 0).is_err());
        assert!(generate(&SyntheticSpec { ood_fraction: 1.5, ..Default::default() }, 0).is_err());
        let full = SyntheticSpec { d: 2, p_true: 3, ood_fraction: 0.5, n_sequences: 4, ..Default::default() };
        assert!(generate(&full, 0).is_err());
    }

    #[test]
    fn coefficient_paths_stay_on_simplex() {
        for dynamics in [
            CoeffDynamics::Constant,
            CoeffDynamics::LinearDrift,
            CoeffDynamics::RandomWalk { step: 0.3 },
            CoeffDynamics::Oscillating { period: 3 },
        ] {
            let ds = generate(&SyntheticSpec { n_sequences: 6, dynamics, ..Default::default() }, 7).unwrap();
            for c in ds.coefficients.iter().flatten() {
                assert!(c.as_slice().iter().all(|&v| v >= 0.0));
                assert!((c.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
