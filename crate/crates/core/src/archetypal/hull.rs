//! Distance from a point to the convex hull of the raw data, solved directly
//! over the data rows rather than through the archetypes.

use serde::{Deserialize, Serialize};

use super::simplex::{dist, SimplexLsq, SimplexVector};
use super::{ArchetypeSet, DataMatrix};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HullDistanceResult {
    /// `‖x − witness‖`.
    pub distance: f64,
    /// Nearest point of `Conv D` found by the solver.
    pub witness: Vec<f64>,
    /// Convex weights over the data rows that produce `witness`.
    pub weights: SimplexVector,
    /// `‖A c_A(x) − witness‖`.
    pub delta_gap: f64,
    /// `‖x − A c_A(x)‖`, the single-frame uncertainty.
    pub reconstruction_error: f64,
}

/// Reusable hull-distance solver over a fixed dataset.
#[derive(Debug, Clone)]
pub struct HullOracle {
    solver: SimplexLsq,
    tol: f64,
    max_iter: usize,
}

impl HullOracle {
    pub fn new(data: &DataMatrix) -> Result<Self> {
        Ok(Self { solver: SimplexLsq::new(data.view().t())?, tol: 1e-10, max_iter: 200_000 })
    }

    pub fn with_tolerance(mut self, tol: f64, max_iter: usize) -> Self {
        self.tol = tol;
        self.max_iter = max_iter;
        self
    }

    /// Nearest point of `Conv D` to `x` and its distance.
    pub fn nearest(&self, x: &[f64]) -> Result<(f64, Vec<f64>, SimplexVector)> {
        let s = self.solver.solve(x, None, self.tol, self.max_iter)?;
        let mut witness = vec![0.0; self.solver.dim()];
        self.solver.combine(s.coeffs.as_slice(), &mut witness);
        Ok((dist(x, &witness), witness, s.coeffs))
    }

    pub fn hull_distance(&self, x: &[f64], archetypes: &ArchetypeSet) -> Result<HullDistanceResult> {
        if archetypes.dim() != self.solver.dim() {
            return Err(shape_err(format!(
                "archetypes live in R^{}, data in R^{}",
                archetypes.dim(),
                self.solver.dim()
            )));
        }
        let (distance, witness, weights) = self.nearest(x)?;
        let c = archetypes.project_point(x)?;
        let recon = archetypes.reconstruct(&c)?;
        Ok(HullDistanceResult {
            distance,
            delta_gap: dist(&recon, &witness),
            reconstruction_error: dist(x, &recon),
            witness,
            weights,
        })
    }
}

/// One-shot convenience wrapper around [`HullOracle`].
pub fn hull_distance(x: &[f64], data: &DataMatrix, archetypes: &ArchetypeSet) -> Result<HullDistanceResult> {
    HullOracle::new(data)?.hull_distance(x, archetypes)
}
