//! Empirical interpolation of bivariate tabulated functions.
//!
//! Both slices share one greedy kernel that works on a matrix `M` whose rows
//! are scanned first ("outer" axis) and whose columns carry the interpolation
//! points ("inner" axis). Slice S1 runs it on `G` (outer = μ, inner = x) and
//! slice S2 on `Gᵗ` (outer = x, inner = μ). Results are reported back in the
//! orientation of `G`.
//!
//! The residual at each step is recomputed from the exact tabulated rows
//! rather than updated by rank-one downdates, followed by one extra
//! re-subtraction pass. This keeps the interpolation property at round-off
//! level even when `Δ` has large entries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    backward_substitute_transpose, forward_substitute, inverse, ComplexMatrix, ComplexVector, C64,
    ONE, ZERO,
};
use crate::problems::ParameterPoint;

/// Relative threshold below which a selected residual counts as zero.
pub const RANK_ATOL: f64 = 1e-13;

/// Tabulated values `G[i][j] = g(μ_i, x_j)` over finite trial sets.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    mu_points: Vec<ParameterPoint>,
    x_coords: Vec<f64>,
    values: ComplexMatrix,
}

impl SampleGrid {
    pub fn new(
        mu_points: Vec<ParameterPoint>,
        x_coords: Vec<f64>,
        values: ComplexMatrix,
    ) -> Result<Self> {
        if mu_points.is_empty() || x_coords.is_empty() {
            return Err(Error::InvalidInput("sample grid needs P, X >= 1".into()));
        }
        if values.rows() != mu_points.len() {
            return Err(Error::LengthMismatch {
                expected: mu_points.len(),
                found: values.rows(),
            });
        }
        if values.cols() != x_coords.len() {
            return Err(Error::LengthMismatch {
                expected: x_coords.len(),
                found: values.cols(),
            });
        }
        if !values.is_finite() {
            return Err(Error::InvalidInput("sample grid has non-finite values".into()));
        }
        Ok(Self {
            mu_points,
            x_coords,
            values,
        })
    }

    /// Grid with anonymous one-dimensional μ labels `0, 1, ..` and x labels `0, 1, ..`.
    pub fn from_values(values: ComplexMatrix) -> Result<Self> {
        let mu = (0..values.rows())
            .map(|i| ParameterPoint::anonymous(vec![i as f64]))
            .collect();
        let x = (0..values.cols()).map(|j| j as f64).collect();
        Self::new(mu, x, values)
    }

    /// Tabulates `g` over the given points, rows in parallel.
    pub fn tabulate(
        mu_points: Vec<ParameterPoint>,
        x_coords: Vec<f64>,
        g: impl Fn(&ParameterPoint, f64) -> C64 + Sync,
    ) -> Result<Self> {
        let rows: Vec<Vec<C64>> = mu_points
            .par_iter()
            .map(|mu| x_coords.iter().map(|&x| g(mu, x)).collect())
            .collect();
        let values = if rows.is_empty() {
            ComplexMatrix::zeros(0, x_coords.len())
        } else {
            ComplexMatrix::from_rows(&rows)?
        };
        Self::new(mu_points, x_coords, values)
    }

    pub fn mu_points(&self) -> &[ParameterPoint] {
        &self.mu_points
    }

    pub fn x_coords(&self) -> &[f64] {
        &self.x_coords
    }

    pub fn values(&self) -> &ComplexMatrix {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.max_abs()
    }
}

/// Norm used for the argmax over the first scanned axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    #[default]
    MaxAbs,
    /// Root mean square along the axis, so thresholds do not depend on resolution.
    EuclideanRms,
}

impl NormChoice {
    pub fn eval(self, v: &[C64]) -> f64 {
        match self {
            NormChoice::MaxAbs => v.iter().map(|z| z.norm()).fold(0.0, f64::max),
            NormChoice::EuclideanRms => {
                if v.is_empty() {
                    0.0
                } else {
                    (v.iter().map(C64::norm_sqr).sum::<f64>() / v.len() as f64).sqrt()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    #[default]
    S1,
    S2,
}

/// Result of one EIM offline run.
///
/// `q_vectors` live on the inner axis (x for S1, μ for S2). `snapshots` are the
/// exact tabulated outer rows at the selected outer indices, used by the
/// snapshot form of the interpolant. Both may be dropped with [`EimModel::compact`]
/// when only the online coefficient maps are needed.
#[derive(Clone, Debug, PartialEq)]
pub struct EimModel {
    pub slice: Slice,
    pub d: usize,
    pub mu_indices: Vec<usize>,
    pub x_indices: Vec<usize>,
    pub q_vectors: Vec<ComplexVector>,
    pub b: ComplexMatrix,
    pub gamma: ComplexMatrix,
    pub delta: ComplexMatrix,
    pub residual_history: Vec<f64>,
    pub snapshots: Vec<ComplexVector>,
    /// `‖G‖_max` of the training grid.
    pub grid_max: f64,
}

pub fn eim_offline_s1(grid: &SampleGrid, d: usize, mu_norm: NormChoice) -> Result<EimModel> {
    run(grid.values(), d, mu_norm, Slice::S1)
}

pub fn eim_offline_s2(grid: &SampleGrid, d: usize, x_norm: NormChoice) -> Result<EimModel> {
    run(&grid.values().transpose(), d, x_norm, Slice::S2)
}

pub fn eim_offline(grid: &SampleGrid, d: usize, norm: NormChoice, slice: Slice) -> Result<EimModel> {
    match slice {
        Slice::S1 => eim_offline_s1(grid, d, norm),
        Slice::S2 => eim_offline_s2(grid, d, norm),
    }
}

/// Greedy on the rows of `m`. Returns the model in `G` orientation.
fn run(m: &ComplexMatrix, d: usize, outer_norm: NormChoice, slice: Slice) -> Result<EimModel> {
    if d == 0 {
        return Err(Error::InvalidInput("EIM rank d must be >= 1".into()));
    }
    let (p, x) = (m.rows(), m.cols());
    if p == 0 || x == 0 {
        return Err(Error::InvalidInput("empty sample grid".into()));
    }
    let grid_max = m.max_abs();
    let atol = RANK_ATOL * grid_max;

    let mut st = GreedyState::new(d);
    for k in 0..d {
        let residual = st.residual(m);
        let scores: Vec<f64> = residual.par_iter().map(|r| outer_norm.eval(r)).collect();
        let i_star = argmax(&scores);
        let row = &residual[i_star];
        let j_star = argmax(&row.iter().map(|z| z.norm()).collect::<Vec<_>>());
        let pivot = row[j_star];
        if pivot.norm().is_nan() || pivot.norm() <= atol {
            let partial = (k > 0).then(|| Box::new(st.finish(m, slice, grid_max)));
            return Err(Error::RankDeficient {
                achieved: k,
                requested: d,
                partial,
            });
        }
        st.push(row, i_star, j_star, pivot);
    }
    Ok(st.finish(m, slice, grid_max))
}

/// Lowest index among maximal entries. NaN scores never win.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &s) in v.iter().enumerate() {
        if s > best_val {
            best = i;
            best_val = s;
        }
    }
    best
}

struct GreedyState {
    outer: Vec<usize>,
    inner: Vec<usize>,
    q: Vec<ComplexVector>,
    b: ComplexMatrix,
    pivots: Vec<C64>,
}

impl GreedyState {
    fn new(d: usize) -> Self {
        Self {
            outer: Vec::with_capacity(d),
            inner: Vec::with_capacity(d),
            q: Vec::with_capacity(d),
            b: ComplexMatrix::zeros(d, d),
            pivots: Vec::with_capacity(d),
        }
    }

    fn k(&self) -> usize {
        self.inner.len()
    }

    /// Subtracts the current interpolant of `row` from it, in place.
    fn subtract_interpolant(&self, row: &mut [C64]) {
        let k = self.k();
        if k == 0 {
            return;
        }
        let samples: Vec<C64> = self.inner.iter().map(|&j| row[j]).collect();
        let lambda = forward_substitute(&self.b, k, &samples, true);
        for (lm, qm) in lambda.iter().zip(&self.q) {
            if *lm == ZERO {
                continue;
            }
            for (r, &qv) in row.iter_mut().zip(qm) {
                *r -= lm * qv;
            }
        }
        for &j in &self.inner {
            row[j] = ZERO;
        }
    }

    /// Full residual recomputed from the exact rows, with one re-subtraction.
    fn residual(&self, m: &ComplexMatrix) -> Vec<ComplexVector> {
        (0..m.rows())
            .into_par_iter()
            .map(|i| {
                let mut row = m.row(i).to_vec();
                self.subtract_interpolant(&mut row);
                self.subtract_interpolant(&mut row);
                row
            })
            .collect()
    }

    fn push(&mut self, row: &[C64], i_star: usize, j_star: usize, pivot: C64) {
        let k = self.k();
        let inv = pivot.inv();
        let mut q: ComplexVector = row.iter().map(|&z| z * inv).collect();
        for &j in &self.inner {
            q[j] = ZERO;
        }
        q[j_star] = ONE;
        for (m, qm) in self.q.iter().enumerate() {
            self.b[(k, m)] = qm[j_star];
        }
        self.b[(k, k)] = ONE;
        self.outer.push(i_star);
        self.inner.push(j_star);
        self.q.push(q);
        self.pivots.push(pivot);
    }

    fn finish(self, m: &ComplexMatrix, slice: Slice, grid_max: f64) -> EimModel {
        let d = self.k();
        let b = self.b.leading(d);
        let mut gamma = ComplexMatrix::zeros(d, d);
        for l in 0..d {
            let samples: Vec<C64> = self.inner.iter().map(|&j| m[(self.outer[l], j)]).collect();
            let lambda = forward_substitute(&b, d, &samples, true);
            for mm in 0..l {
                gamma[(l, mm)] = lambda[mm];
            }
            gamma[(l, l)] = self.pivots[l];
        }
        let delta = inverse(&gamma.matmul(&b.transpose()))
            .expect("Γ Bᵗ is a product of nonsingular triangular factors");
        let snapshots = self.outer.iter().map(|&i| m.row(i).to_vec()).collect();
        let residual_history = self.pivots.iter().map(|z| z.norm()).collect();
        let (mu_indices, x_indices) = match slice {
            Slice::S1 => (self.outer, self.inner),
            Slice::S2 => (self.inner, self.outer),
        };
        EimModel {
            slice,
            d,
            mu_indices,
            x_indices,
            q_vectors: self.q,
            b,
            gamma,
            delta,
            residual_history,
            snapshots,
            grid_max,
        }
    }
}

impl EimModel {
    /// Selected indices along the first scanned axis.
    pub fn outer_indices(&self) -> &[usize] {
        match self.slice {
            Slice::S1 => &self.mu_indices,
            Slice::S2 => &self.x_indices,
        }
    }

    /// Selected interpolation indices.
    pub fn inner_indices(&self) -> &[usize] {
        match self.slice {
            Slice::S1 => &self.x_indices,
            Slice::S2 => &self.mu_indices,
        }
    }

    fn check_len(&self, samples: &[C64]) -> Result<()> {
        if samples.len() != self.d {
            return Err(Error::LengthMismatch {
                expected: self.d,
                found: samples.len(),
            });
        }
        Ok(())
    }

    /// Solves `B λ = samples` by forward substitution.
    pub fn apply_lambda(&self, samples: &[C64]) -> Result<ComplexVector> {
        self.check_len(samples)?;
        Ok(forward_substitute(&self.b, self.d, samples, true))
    }

    /// Interpolant `Σ_m λ_m q_m` over the inner axis.
    pub fn interpolate(&self, samples: &[C64]) -> Result<ComplexVector> {
        let lambda = self.apply_lambda(samples)?;
        let len = self.q_vectors.first().map_or(0, Vec::len);
        let mut out = vec![ZERO; len];
        for (lm, qm) in lambda.iter().zip(&self.q_vectors) {
            for (o, &q) in out.iter_mut().zip(qm) {
                *o += lm * q;
            }
        }
        Ok(out)
    }

    /// Coefficients of the interpolant on the stored snapshot rows, `Δᵗ s`.
    pub fn snapshot_coefficients(&self, samples: &[C64]) -> Result<ComplexVector> {
        self.check_len(samples)?;
        Ok(self.delta.transpose_matvec(samples))
    }

    /// Snapshot form `Σ_{l,m} Δ_{l,m} s_l · row_m`.
    pub fn interpolate_delta(&self, samples: &[C64]) -> Result<ComplexVector> {
        let w = self.snapshot_coefficients(samples)?;
        let len = self.snapshots.first().map_or(0, Vec::len);
        let mut out = vec![ZERO; len];
        for (wm, row) in w.iter().zip(&self.snapshots) {
            for (o, &g) in out.iter_mut().zip(row) {
                *o += wm * g;
            }
        }
        Ok(out)
    }

    /// Dual coefficients `λ̂(x)` solving `Bᵗ λ̂ = q(x)` at inner index `j`.
    pub fn lambda_hat(&self, j: usize) -> ComplexVector {
        let q: Vec<C64> = self.q_vectors.iter().map(|qm| qm[j]).collect();
        backward_substitute_transpose(&self.b, self.d, &q, true)
    }

    /// Interpolant over the inner axis via `Σ_m λ̂_m(x) s_m`.
    pub fn interpolate_lambda_hat(&self, samples: &[C64]) -> Result<ComplexVector> {
        self.check_len(samples)?;
        let len = self.q_vectors.first().map_or(0, Vec::len);
        Ok((0..len)
            .map(|j| crate::linalg::dot(&self.lambda_hat(j), samples))
            .collect())
    }

    /// Weights `β` such that `g(μ, ·) ≈ Σ_r β_r g(μ_r, ·)` with `μ_r` taken in
    /// `mu_indices` order, given `g(μ, x_l)` at the selected `x_indices`.
    pub fn mu_weights(&self, samples_at_x: &[C64]) -> Result<ComplexVector> {
        self.check_len(samples_at_x)?;
        Ok(match self.slice {
            Slice::S1 => self.delta.transpose_matvec(samples_at_x),
            Slice::S2 => self.delta.matvec(samples_at_x),
        })
    }

    /// Interpolant tabulated over the whole grid, in `G` orientation.
    pub fn reconstruct_grid(&self, grid: &SampleGrid) -> Result<ComplexMatrix> {
        let g = grid.values();
        let (p, x) = (g.rows(), g.cols());
        let out = match self.slice {
            Slice::S1 => {
                let rows = (0..p)
                    .into_par_iter()
                    .map(|i| {
                        let s: Vec<C64> = self.x_indices.iter().map(|&j| g[(i, j)]).collect();
                        self.interpolate(&s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ComplexMatrix::from_rows(&rows)?
            }
            Slice::S2 => {
                let cols = (0..x)
                    .into_par_iter()
                    .map(|j| {
                        let s: Vec<C64> = self.mu_indices.iter().map(|&i| g[(i, j)]).collect();
                        self.interpolate(&s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ComplexMatrix::from_fn(p, x, |i, j| cols[j][i])
            }
        };
        Ok(out)
    }

    /// Max-abs residual of the interpolant over the whole grid.
    pub fn full_residual(&self, grid: &SampleGrid) -> Result<f64> {
        Ok(self.reconstruct_grid(grid)?.sub(grid.values()).max_abs())
    }

    /// Rebuilds `Γ` by the κ recursion and returns the largest deviation from the stored one.
    pub fn gamma_recursion_check(&self, grid: &SampleGrid) -> f64 {
        let m = match self.slice {
            Slice::S1 => grid.values().clone(),
            Slice::S2 => grid.values().transpose(),
        };
        let (outer, inner) = (self.outer_indices(), self.inner_indices());
        let mut rebuilt = ComplexMatrix::zeros(self.d, self.d);
        for k in 0..self.d {
            let samples: Vec<C64> = inner[..k].iter().map(|&j| m[(outer[k], j)]).collect();
            let kappa = forward_substitute(&self.b, k, &samples, true);
            let mut diag = m[(outer[k], inner[k])];
            for (mm, &kv) in kappa.iter().enumerate() {
                rebuilt[(k, mm)] = kv;
                diag -= kv * self.b[(k, mm)];
            }
            rebuilt[(k, k)] = diag;
        }
        rebuilt.sub(&self.gamma).max_abs()
    }

    /// Model restricted to its first `k` selections.
    pub fn truncated(&self, k: usize) -> EimModel {
        let k = k.min(self.d);
        let b = self.b.leading(k);
        let gamma = self.gamma.leading(k);
        let delta = if k == 0 {
            ComplexMatrix::zeros(0, 0)
        } else {
            inverse(&gamma.matmul(&b.transpose())).expect("leading blocks stay nonsingular")
        };
        EimModel {
            slice: self.slice,
            d: k,
            mu_indices: self.mu_indices[..k].to_vec(),
            x_indices: self.x_indices[..k].to_vec(),
            q_vectors: self.q_vectors[..k.min(self.q_vectors.len())].to_vec(),
            b,
            gamma,
            delta,
            residual_history: self.residual_history[..k].to_vec(),
            snapshots: self.snapshots[..k.min(self.snapshots.len())].to_vec(),
            grid_max: self.grid_max,
        }
    }

    /// Drops the grid-sized arrays; online coefficient maps keep working.
    pub fn compact(&self) -> EimModel {
        EimModel {
            q_vectors: Vec::new(),
            snapshots: Vec::new(),
            ..self.clone()
        }
    }
}
