//! Probability-simplex primitives: Euclidean projection and simplex-constrained
//! least squares.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Entries above `-SIMPLEX_EPS` are accepted and clamped to zero.
pub const SIMPLEX_EPS: f64 = 1e-9;
/// Allowed deviation of the entry sum from one.
pub const SIMPLEX_SUM_TOL: f64 = 1e-7;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(mut coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(invalid("simplex vector must have at least one entry"));
        }
        let mut sum = 0.0;
        for c in coeffs.iter_mut() {
            if !c.is_finite() || *c < -SIMPLEX_EPS {
                return Err(invalid(format!("entry {c} is not a valid simplex coefficient")));
            }
            if *c < 0.0 {
                *c = 0.0;
            }
            sum += *c;
        }
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(invalid(format!("simplex entries sum to {sum}, expected 1")));
        }
        Ok(Self(coeffs))
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        Self(vec![1.0 / len as f64; len])
    }

    /// The vertex `e_j`.
    pub fn vertex(len: usize, j: usize) -> Self {
        assert!(j < len);
        let mut v = vec![0.0; len];
        v[j] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(s: SimplexVector) -> Self {
        s.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Euclidean projection of `v` onto the standard simplex.
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexVector> {
    if v.is_empty() {
        return Err(invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite entry in simplex projection input"));
    }
    let mut out = vec![0.0; v.len()];
    let mut order = Vec::with_capacity(v.len());
    project_into(v, &mut out, &mut order);
    SimplexVector::new(out)
}

/// Sorted-threshold projection; ties in the sort are broken by index.
/// `v` must be finite.
pub(crate) fn project_into(v: &[f64], out: &mut [f64], order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..v.len());
    order.sort_unstable_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));

    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += v[i];
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if v[i] - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - theta).max(0.0);
    }
}

/// Result of a simplex-constrained least-squares solve.
#[derive(Debug, Clone)]
pub struct SimplexSolve {
    pub coeffs: SimplexVector,
    /// `‖targets − basis · coeffs‖`.
    pub residual_norm: f64,
    /// Norm of the projected-gradient mapping at `coeffs`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `‖t − B c‖` over the simplex for a fixed basis `B` (d×m).
///
/// Holds the basis column-major plus its gradient Lipschitz constant so many
/// targets can be solved against one basis cheaply. Uses accelerated projected
/// gradient with adaptive momentum restart.
#[derive(Debug, Clone)]
pub struct SimplexLsq {
    dim: usize,
    cols: Vec<f64>,
    ncols: usize,
    lipschitz: f64,
}

impl SimplexLsq {
    pub fn new(basis: ArrayView2<'_, f64>) -> Result<Self> {
        let (dim, ncols) = basis.dim();
        if dim == 0 || ncols == 0 {
            return Err(shape_err(format!("basis must be non-empty, got {dim}x{ncols}")));
        }
        if basis.iter().any(|x| !x.is_finite()) {
            return Err(invalid("basis contains non-finite entries"));
        }
        let mut cols = Vec::with_capacity(dim * ncols);
        for j in 0..ncols {
            cols.extend(basis.column(j).iter().copied());
        }
        let mut solver = Self { dim, cols, ncols, lipschitz: 0.0 };
        solver.lipschitz = solver.estimate_lipschitz();
        Ok(solver)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.dim..(j + 1) * self.dim]
    }

    /// `out = B c`
    pub fn combine(&self, c: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &cj) in c.iter().enumerate() {
            if cj != 0.0 {
                for (o, &b) in out.iter_mut().zip(self.col(j)) {
                    *o += cj * b;
                }
            }
        }
    }

    /// `grad = Bᵀ(B c − t)`; also leaves `B c − t` in `resid`.
    fn gradient(&self, c: &[f64], targets: &[f64], resid: &mut [f64], grad: &mut [f64]) {
        self.combine(c, resid);
        for (r, &t) in resid.iter_mut().zip(targets) {
            *r -= t;
        }
        for (j, g) in grad.iter_mut().enumerate() {
            *g = dot(self.col(j), resid);
        }
    }

    /// Largest eigenvalue of `BᵀB` by power iteration, padded upward.
    fn estimate_lipschitz(&self) -> f64 {
        let m = self.ncols;
        let frob: f64 = self.cols.iter().map(|x| x * x).sum();
        if frob == 0.0 {
            return 1.0;
        }
        // Deterministic start with a mild index-dependent tilt so it is not
        // orthogonal to the leading eigenvector in symmetric cases.
        let mut v: Vec<f64> = (0..m).map(|j| 1.0 + 0.01 * ((j % 7) as f64)).collect();
        let mut bv = vec![0.0; self.dim];
        let mut w = vec![0.0; m];
        let mut lambda = 0.0;
        for _ in 0..300 {
            let norm = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            self.combine(&v, &mut bv);
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = dot(self.col(j), &bv);
            }
            let next = dot(&v, &w);
            std::mem::swap(&mut v, &mut w);
            if (next - lambda).abs() <= 1e-10 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        // Power iteration approaches from below; never exceed the Frobenius bound.
        (lambda * 1.05).min(frob).max(lambda).max(f64::MIN_POSITIVE)
    }

    /// Solves from the barycenter or from `warm` when given.
    pub fn solve(
        &self,
        targets: &[f64],
        warm: Option<&[f64]>,
        tol: f64,
        max_iter: usize,
    ) -> Result<SimplexSolve> {
        if targets.len() != self.dim {
            return Err(shape_err(format!(
                "target has length {}, basis has {} rows",
                targets.len(),
                self.dim
            )));
        }
        if !(tol > 0.0) {
            return Err(invalid("solver tolerance must be positive"));
        }
        if targets.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite target"));
        }
        let m = self.ncols;
        let mut order = Vec::with_capacity(m);
        let mut x = vec![0.0; m];
        match warm {
            Some(w) if w.len() == m && w.iter().all(|v| v.is_finite()) => {
                project_into(w, &mut x, &mut order)
            }
            Some(w) if w.len() != m => {
                return Err(shape_err(format!("warm start has length {}, expected {m}", w.len())))
            }
            _ => x.iter_mut().for_each(|v| *v = 1.0 / m as f64),
        }

        let lip = self.lipschitz;
        let mut y = x.clone();
        let mut x_new = vec![0.0; m];
        let mut step = vec![0.0; m];
        let mut grad = vec![0.0; m];
        let mut resid = vec![0.0; self.dim];
        let mut momentum = 1.0_f64;
        let mut iterations = 0;
        let mut kkt = f64::INFINITY;

        if m == 1 {
            kkt = 0.0;
        }
        while kkt > tol && iterations < max_iter {
            iterations += 1;
            self.gradient(&y, targets, &mut resid, &mut grad);
            for j in 0..m {
                step[j] = y[j] - grad[j] / lip;
            }
            project_into(&step, &mut x_new, &mut order);

            // Gradient mapping at y is free; confirm at x_new only when it is small.
            let mapping_at_y = lip * dist(&y, &x_new);
            if mapping_at_y <= tol {
                kkt = self.kkt_residual_with(&x_new, targets, &mut resid, &mut grad, &mut step, &mut order);
            }

            let restart: f64 = (0..m).map(|j| (y[j] - x_new[j]) * (x_new[j] - x[j])).sum();
            if restart > 0.0 {
                momentum = 1.0;
                y.copy_from_slice(&x_new);
            } else {
                let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
                let beta = (momentum - 1.0) / next;
                for j in 0..m {
                    y[j] = x_new[j] + beta * (x_new[j] - x[j]);
                }
                momentum = next;
            }
            std::mem::swap(&mut x, &mut x_new);
        }
        if kkt.is_infinite() || iterations >= max_iter {
            kkt = self.kkt_residual_with(&x, targets, &mut resid, &mut grad, &mut step, &mut order);
        }
        self.combine(&x, &mut resid);
        let residual_norm = resid
            .iter()
            .zip(targets)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        Ok(SimplexSolve {
            coeffs: SimplexVector::new(x)?,
            residual_norm,
            kkt_residual: kkt,
            iterations,
            converged: kkt <= tol,
        })
    }

    /// Norm of the projected-gradient mapping `L‖c − P(c − ∇f(c)/L)‖`.
    pub fn kkt_residual(&self, c: &[f64], targets: &[f64]) -> f64 {
        let mut resid = vec![0.0; self.dim];
        let mut grad = vec![0.0; self.ncols];
        let mut step = vec![0.0; self.ncols];
        let mut order = Vec::new();
        self.kkt_residual_with(c, targets, &mut resid, &mut grad, &mut step, &mut order)
    }

    fn kkt_residual_with(
        &self,
        c: &[f64],
        targets: &[f64],
        resid: &mut [f64],
        grad: &mut [f64],
        step: &mut [f64],
        order: &mut Vec<usize>,
    ) -> f64 {
        self.gradient(c, targets, resid, grad);
        let shifted: Vec<f64> = c.iter().zip(grad.iter()).map(|(x, g)| x - g / self.lipschitz).collect();
        project_into(&shifted, step, order);
        self.lipschitz * dist(c, step)
    }
}

/// Minimises `‖targets − basis · c‖` over the simplex.
pub fn solve_simplex_lsq(
    targets: &[f64],
    basis: ArrayView2<'_, f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SimplexSolve> {
    SimplexLsq::new(basis)?.solve(targets, None, tol, max_iter)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
