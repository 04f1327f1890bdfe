//! Archetypal analysis: archetype extraction, simplex projection of new points,
//! reconstruction error, the AAUQ uncertainty score, and a convex-hull distance
//! oracle over the raw data.

mod fit;
mod hull;
pub mod simplex;

pub use fit::{elbow_select, fit_archetypes, ElbowReport, FitConfig};
pub use hull::{hull_distance, HullDistanceResult, HullOracle};
pub use simplex::{project_to_simplex, solve_simplex_lsq, SimplexLsq, SimplexSolve, SimplexVector};

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Row-per-point data matrix (n×d).
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix(Array2<f64>);

impl DataMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(invalid(format!("data matrix must be non-empty, got {:?}", values.dim())));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("data matrix contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(invalid("no rows"));
        }
        let d = rows[0].as_ref().len();
        let mut flat = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(shape_err(format!("row {i} has {} columns, expected {d}", r.len())));
            }
            flat.extend_from_slice(r);
        }
        Self::new(Array2::from_shape_vec((n, d), flat).map_err(|e| shape_err(e.to_string()))?)
    }

    /// Reads comma-separated decimals, one row per frame. A first line that
    /// does not parse as numbers is treated as a header.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let rows = crate::data::io::read_frames(reader)?;
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }
}

/// Solver settings used when projecting points onto an archetype simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 20_000 }
    }
}

/// A fitted (or externally specified) set of `p` archetypes in `R^d`.
#[derive(Debug, Clone)]
pub struct ArchetypeSet {
    archetypes: Array2<f64>,
    mixing_weights: Vec<SimplexVector>,
    fit_rss: f64,
    iterations_used: usize,
    rss_history: Vec<f64>,
    degenerate: bool,
    settings: ProjectionSettings,
    solver: SimplexLsq,
}

impl ArchetypeSet {
    /// Archetypes given directly as the columns of a d×p matrix. No mixing
    /// weights are attached.
    pub fn from_matrix(archetypes: Array2<f64>) -> Result<Self> {
        Self::assemble(archetypes, Vec::new(), 0.0, 0, Vec::new(), false)
    }

    /// Archetypes given as a list of points.
    pub fn from_points<R: AsRef<[f64]>>(points: &[R]) -> Result<Self> {
        let m = DataMatrix::from_rows(points)?;
        Self::from_matrix(m.0.reversed_axes())
    }

    pub(crate) fn assemble(
        archetypes: Array2<f64>,
        mixing_weights: Vec<SimplexVector>,
        fit_rss: f64,
        iterations_used: usize,
        rss_history: Vec<f64>,
        degenerate: bool,
    ) -> Result<Self> {
        let solver = SimplexLsq::new(archetypes.view())?;
        if !mixing_weights.is_empty() && mixing_weights.len() != archetypes.ncols() {
            return Err(shape_err("one mixing-weight vector per archetype is required"));
        }
        Ok(Self {
            archetypes,
            mixing_weights,
            fit_rss,
            iterations_used,
            rss_history,
            degenerate,
            settings: ProjectionSettings::default(),
            solver,
        })
    }

    pub fn with_settings(mut self, settings: ProjectionSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn settings(&self) -> ProjectionSettings {
        self.settings
    }

    /// d×p matrix with one archetype per column.
    pub fn archetypes(&self) -> ArrayView2<'_, f64> {
        self.archetypes.view()
    }

    pub fn archetype(&self, j: usize) -> Vec<f64> {
        self.archetypes.column(j).to_vec()
    }

    pub fn dim(&self) -> usize {
        self.archetypes.nrows()
    }

    pub fn count(&self) -> usize {
        self.archetypes.ncols()
    }

    pub fn mixing_weights(&self) -> &[SimplexVector] {
        &self.mixing_weights
    }

    pub fn fit_rss(&self) -> f64 {
        self.fit_rss
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    /// RSS after initialisation followed by one entry per outer iteration.
    pub fn rss_history(&self) -> &[f64] {
        &self.rss_history
    }

    /// Set when the fit saw only identical rows.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Simplex coefficients of the closest point of `Conv A` to `x`.
    pub fn project_point(&self, x: &[f64]) -> Result<SimplexVector> {
        Ok(self.project_point_detailed(x)?.coeffs)
    }

    pub fn project_point_detailed(&self, x: &[f64]) -> Result<SimplexSolve> {
        self.solver.solve(x, None, self.settings.tol, self.settings.max_iter)
    }

    /// `A c`.
    pub fn reconstruct(&self, c: &SimplexVector) -> Result<Vec<f64>> {
        if c.len() != self.count() {
            return Err(shape_err(format!(
                "coefficient vector has length {}, archetype set has {}",
                c.len(),
                self.count()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        self.solver.combine(c.as_slice(), &mut out);
        Ok(out)
    }

    /// `‖x − A c_A(x)‖`.
    pub fn reconstruction_error(&self, x: &[f64]) -> Result<f64> {
        Ok(self.project_point_detailed(x)?.residual_norm)
    }

    /// Archetypal-analysis uncertainty: mean reconstruction error over the frames.
    pub fn aauq<R: AsRef<[f64]>>(&self, history: &[R]) -> Result<f64> {
        if history.is_empty() {
            return Err(invalid("uncertainty of an empty history is undefined"));
        }
        let mut total = 0.0;
        for frame in history {
            total += self.reconstruction_error(frame.as_ref())?;
        }
        Ok(total / history.len() as f64)
    }

    /// Checks `a_j = Dᵀβ_j` for every archetype against `data`; returns the
    /// largest deviation.
    pub fn mixing_consistency(&self, data: &DataMatrix) -> Result<f64> {
        if self.mixing_weights.is_empty() {
            return Err(Error::InvalidState("archetype set carries no mixing weights".into()));
        }
        let mut worst = 0.0_f64;
        for (j, beta) in self.mixing_weights.iter().enumerate() {
            if beta.len() != data.nrows() {
                return Err(shape_err("mixing weights do not match the data row count"));
            }
            let a = data.view().t().dot(&ArrayView1::from(beta.as_slice()));
            for (x, y) in a.iter().zip(self.archetypes.column(j)) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }

    /// Column mean of `A` (the image of the uniform coefficient vector).
    pub fn barycenter(&self) -> Vec<f64> {
        self.archetypes.mean_axis(Axis(1)).expect("p >= 1").to_vec()
    }

    pub fn to_json(&self) -> ArchetypeSetJson {
        ArchetypeSetJson {
            d: self.dim(),
            p: self.count(),
            archetypes: self.archetypes.iter().copied().collect(),
            mixing_weights: self.mixing_weights.clone(),
            fit_rss: self.fit_rss,
            iterations_used: self.iterations_used,
            rss_history: self.rss_history.clone(),
            degenerate: self.degenerate,
        }
    }

    pub fn from_json(json: ArchetypeSetJson) -> Result<Self> {
        if json.archetypes.len() != json.d * json.p {
            return Err(shape_err(format!(
                "archetype array has {} values, expected d*p = {}",
                json.archetypes.len(),
                json.d * json.p
            )));
        }
        let a = Array2::from_shape_vec((json.d, json.p), json.archetypes)
            .map_err(|e| shape_err(e.to_string()))?;
        Self::assemble(a, json.mixing_weights, json.fit_rss, json.iterations_used, json.rss_history, json.degenerate)
    }
}

/// On-disk form of an [`ArchetypeSet`]. `archetypes` is the d×p matrix in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSetJson {
    pub d: usize,
    pub p: usize,
    pub archetypes: Vec<f64>,
    pub mixing_weights: Vec<SimplexVector>,
    pub fit_rss: f64,
    #[serde(default)]
    pub iterations_used: usize,
    #[serde(default)]
    pub rss_history: Vec<f64>,
    #[serde(default)]
    pub degenerate: bool,
}

impl Serialize for ArchetypeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArchetypeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = ArchetypeSetJson::deserialize(d)?;
        Self::from_json(json).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> ArchetypeSet {
        ArchetypeSet::from_points(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn project_point_examples() {
        let tri = ArchetypeSet::from_points(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]).unwrap();
        for j in 0..3 {
            let c = tri.project_point(&tri.archetype(j)).unwrap();
            assert!((c[j] - 1.0).abs() < 1e-8);
        }
        let c = tri.project_point(&tri.barycenter()).unwrap();
        for &v in c.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7, "{c:?}");
        }
    }

    #[test]
    fn reconstruct_examples() {
        let sq = unit_square();
        assert_eq!(sq.reconstruct(&SimplexVector::vertex(4, 2)).unwrap(), vec![1.0, 1.0]);
        assert_eq!(sq.reconstruct(&SimplexVector::uniform(4)).unwrap(), sq.barycenter());
        assert!(matches!(sq.reconstruct(&SimplexVector::uniform(3)), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let c = sq.project_point(&x).unwrap();
            let back = sq.reconstruct(&c).unwrap();
            assert!(simplex::dist(&back, &x) < 1e-7);
        }
    }

    #[test]
    fn reconstruction_error_along_outward_normal() {
        let sq = unit_square();
        assert!(sq.reconstruction_error(&[1.0, 0.0]).unwrap() < 1e-12);
        assert!(sq.reconstruction_error(&[0.3, 0.6]).unwrap() < 1e-7);
        // Boundary point (1, 0.4) pushed along +x; the analytic distance is t.
        for t in [0.1, 0.5, 1.0, 2.5] {
            let e = sq.reconstruction_error(&[1.0 + t, 0.4]).unwrap();
            assert!((e - t).abs() < 1e-4, "t={t} e={e}");
        }
    }

    #[test]
    fn aauq_examples() {
        let sq = unit_square();
        assert!(matches!(sq.aauq::<Vec<f64>>(&[]), Err(Error::InvalidInput(_))));
        assert!(sq.aauq(&[[0.2, 0.2], [0.5, 0.9]]).unwrap() < 1e-7);
        let single = [2.0, 3.0];
        assert_eq!(sq.aauq(&[single]).unwrap(), sq.reconstruction_error(&single).unwrap());
        // Oracle distances 1.0 and 3.0 from the square.
        let u = sq.aauq(&[[0.5, 2.0], [-3.0, 0.5]]).unwrap();
        assert!((u - 2.0).abs() < 1e-3, "{u}");
    }

    #[test]
    fn json_round_trip_preserves_layout() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let set = ArchetypeSet::from_matrix(a.clone()).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["archetypes"], serde_json::json!([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let back: ArchetypeSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back.archetypes(), a.view());
    }

    #[test]
    fn data_matrix_rejects_bad_input() {
        assert!(DataMatrix::from_rows::<Vec<f64>>(&[]).is_err());
        assert!(DataMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(DataMatrix::from_rows(&[vec![1.0, f64::INFINITY]]).is_err());
        let m = DataMatrix::from_csv_reader("a,b\n1,2\n3.5,-4\n".as_bytes()).unwrap();
        assert_eq!(m.rows(), vec![vec![1.0, 2.0], vec![3.5, -4.0]]);
    }
}
