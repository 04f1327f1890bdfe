//! Alternating simplex-constrained least squares for archetype extraction.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::simplex::{dist, SimplexLsq, SimplexVector};
use super::{ArchetypeSet, DataMatrix};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitConfig {
    pub p: usize,
    /// Relative RSS decrease below which the outer loop stops.
    pub tol: f64,
    pub max_iter: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub seed: u64,
    #[serde(default)]
    pub exec: Execution,
}

impl FitConfig {
    pub fn new(p: usize, seed: u64) -> Self {
        Self { p, tol: 1e-6, max_iter: 500, solver_tol: 1e-8, solver_max_iter: 5_000, seed, exec: Execution::default() }
    }
}

/// Fits `p` archetypes to the rows of `data`.
///
/// Each outer iteration updates the archetypes one at a time (each is the
/// exact minimiser over its own mixing weights given the rest) and then
/// re-projects every data point. Updates that would raise the objective are
/// rejected, so the recorded RSS never increases.
pub fn fit_archetypes(data: &DataMatrix, cfg: &FitConfig) -> Result<ArchetypeSet> {
    let n = data.nrows();
    let d = data.ncols();
    let p = cfg.p;
    if p == 0 || p > n {
        return Err(Error::InvalidArity(format!("need 1 <= p <= n, got p = {p}, n = {n}")));
    }

    let rows: Vec<Vec<f64>> = data.rows();
    let first = &rows[0];
    if rows.iter().all(|r| r == first) {
        log::warn!("degenerate data: all {n} rows are identical");
        let mut a = Array2::zeros((d, p));
        for j in 0..p {
            a.column_mut(j).assign(&data.row(0));
        }
        let betas = vec![SimplexVector::vertex(n, 0); p];
        return ArchetypeSet::assemble(a, betas, 0.0, 0, vec![0.0], true);
    }

    let data_solver = SimplexLsq::new(data.view().t())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = furthest_sum(&rows, p, rng.random_range(0..n));

    let mut betas: Vec<Vec<f64>> = init
        .iter()
        .map(|&k| {
            let mut b = vec![0.0; n];
            b[k] = 1.0;
            b
        })
        .collect();
    let mut arch: Vec<Vec<f64>> = init.iter().map(|&k| rows[k].clone()).collect();

    let mut coeffs: Vec<Vec<f64>> = vec![vec![1.0 / p as f64; p]; n];
    let mut rss = c_step(&rows, &arch, &mut coeffs, cfg)?;
    let mut history = vec![rss];
    let mut iterations = 0;

    while iterations < cfg.max_iter && rss > 0.0 {
        iterations += 1;
        b_step(&rows, &mut arch, &mut betas, &coeffs, &data_solver, cfg)?;
        let next = c_step(&rows, &arch, &mut coeffs, cfg)?;
        let rel = (rss - next) / rss.max(f64::MIN_POSITIVE);
        rss = next;
        history.push(rss);
        log::debug!("archetype fit iteration {iterations}: rss = {rss:.6e}");
        if rel < cfg.tol {
            break;
        }
    }

    let mut a = Array2::zeros((d, p));
    for (j, aj) in arch.iter().enumerate() {
        for (i, &v) in aj.iter().enumerate() {
            a[[i, j]] = v;
        }
    }
    let betas = betas.into_iter().map(SimplexVector::new).collect::<Result<Vec<_>>>()?;
    ArchetypeSet::assemble(a, betas, rss, iterations, history, false)
}

/// Greedy extreme-point initialisation. Starting from the point furthest from
/// a seeded random row, repeatedly adds the unselected row with the largest
/// summed distance to the rows selected so far.
fn furthest_sum(rows: &[Vec<f64>], p: usize, start: usize) -> Vec<usize> {
    let n = rows.len();
    let argmax = |score: &dyn Fn(usize) -> f64, taken: &[bool]| -> usize {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for k in 0..n {
            if !taken[k] {
                let s = score(k);
                if s > best.0 {
                    best = (s, k);
                }
            }
        }
        best.1
    };
    let mut taken = vec![false; n];
    let first = argmax(&|k| dist(&rows[k], &rows[start]), &taken);
    taken[first] = true;
    let mut selected = vec![first];
    let mut sums: Vec<f64> = (0..n).map(|k| dist(&rows[k], &rows[first])).collect();
    while selected.len() < p {
        let next = argmax(&|k| sums[k], &taken);
        taken[next] = true;
        selected.push(next);
        for k in 0..n {
            sums[k] += dist(&rows[k], &rows[next]);
        }
    }
    selected
}

fn archetype_matrix(arch: &[Vec<f64>]) -> Array2<f64> {
    let d = arch[0].len();
    Array2::from_shape_fn((d, arch.len()), |(i, j)| arch[j][i])
}

fn sq_resid(x: &[f64], arch: &[Vec<f64>], c: &[f64]) -> f64 {
    let mut r = x.to_vec();
    for (aj, &cj) in arch.iter().zip(c) {
        if cj != 0.0 {
            for (ri, &a) in r.iter_mut().zip(aj) {
                *ri -= cj * a;
            }
        }
    }
    r.iter().map(|v| v * v).sum()
}

/// Re-projects every point; returns the resulting RSS.
fn c_step(rows: &[Vec<f64>], arch: &[Vec<f64>], coeffs: &mut [Vec<f64>], cfg: &FitConfig) -> Result<f64> {
    let solver = SimplexLsq::new(archetype_matrix(arch).view())?;
    let updated = map_indexed(cfg.exec, rows.len(), |i| -> Result<(Vec<f64>, f64)> {
        let old = &coeffs[i];
        let old_err = sq_resid(&rows[i], arch, old);
        let s = solver.solve(&rows[i], Some(old), cfg.solver_tol, cfg.solver_max_iter)?;
        let new_err = s.residual_norm * s.residual_norm;
        Ok(if new_err <= old_err { (s.coeffs.into_inner(), new_err) } else { (old.clone(), old_err) })
    });
    let mut rss = 0.0;
    for (slot, res) in coeffs.iter_mut().zip(updated) {
        let (c, e) = res?;
        *slot = c;
        rss += e;
    }
    Ok(rss)
}

/// Block update of each archetype against the residual with its own
/// contribution added back.
fn b_step(
    rows: &[Vec<f64>],
    arch: &mut [Vec<f64>],
    betas: &mut [Vec<f64>],
    coeffs: &[Vec<f64>],
    data_solver: &SimplexLsq,
    cfg: &FitConfig,
) -> Result<()> {
    let d = arch[0].len();
    let mut resid: Vec<Vec<f64>> = rows
        .iter()
        .zip(coeffs)
        .map(|(x, c)| {
            let mut r = x.clone();
            for (aj, &cj) in arch.iter().zip(c) {
                for (ri, &a) in r.iter_mut().zip(aj) {
                    *ri -= cj * a;
                }
            }
            r
        })
        .collect();

    for j in 0..arch.len() {
        let weight: f64 = coeffs.iter().map(|c| c[j] * c[j]).sum();
        if weight <= f64::MIN_POSITIVE {
            continue;
        }
        let mut target = arch[j].clone();
        for (r, c) in resid.iter().zip(coeffs) {
            let cj = c[j];
            if cj != 0.0 {
                for (t, &ri) in target.iter_mut().zip(r) {
                    *t += cj * ri / weight;
                }
            }
        }
        let s = data_solver.solve(&target, Some(&betas[j]), cfg.solver_tol, cfg.solver_max_iter)?;
        if s.residual_norm > dist(&target, &arch[j]) {
            continue;
        }
        let mut new_a = vec![0.0; d];
        data_solver.combine(s.coeffs.as_slice(), &mut new_a);
        for (r, c) in resid.iter_mut().zip(coeffs) {
            let cj = c[j];
            if cj != 0.0 {
                for ((ri, &na), &oa) in r.iter_mut().zip(&new_a).zip(&arch[j]) {
                    *ri -= cj * (na - oa);
                }
            }
        }
        arch[j] = new_a;
        betas[j] = s.coeffs.into_inner();
    }
    Ok(())
}

/// RSS-versus-p curve and the chosen archetype count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElbowReport {
    /// `(p, rss)` for `p = 1..=p_max`.
    pub rss_by_p: Vec<(usize, f64)>,
    pub selected_p: usize,
    pub threshold: f64,
}

/// Picks the last `p` before the relative RSS improvement of adding one more
/// archetype drops below `threshold` (0.05 by default).
pub fn elbow_select(data: &DataMatrix, p_max: usize, threshold: f64, base: &FitConfig) -> Result<ElbowReport> {
    let p_max = p_max.min(data.nrows());
    if p_max == 0 {
        return Err(Error::InvalidArity("p_max must be at least 1".into()));
    }
    let mut rss_by_p = Vec::with_capacity(p_max);
    for p in 1..=p_max {
        let set = fit_archetypes(data, &FitConfig { p, ..*base })?;
        rss_by_p.push((p, set.fit_rss()));
    }
    let mut selected_p = p_max;
    for w in rss_by_p.windows(2) {
        let (prev_p, prev) = w[0];
        let (_, cur) = w[1];
        let improvement = if prev <= 1e-12 { 0.0 } else { (prev - cur) / prev };
        if improvement < threshold {
            selected_p = prev_p;
            break;
        }
    }
    Ok(ElbowReport { rss_by_p, selected_p, threshold })
}
