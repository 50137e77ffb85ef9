//! Certified reduced-basis solver on top of nonintrusive decompositions.
//!
//! Offline, a greedy loop picks snapshot parameters by maximizing the
//! residual-based error bound over the trial grid and extends the reduced
//! operators incrementally. Online, a solve costs `O(d_z n̂² + n̂³)` for the
//! reduced system plus the bound evaluation, with no `n`-sized work.
//!
//! The residual norm is evaluated through a thin factorization `W = Q R` of
//! the residual building blocks `W = [C_r', A_r u_j]`, so that
//! `‖Σ_j γ_j Σ_r β_r A_r u_j − Σ_r' β'_r' C_r'‖ = ‖R c‖`. This avoids the
//! square-root-of-epsilon floor of the expanded quadratic form, which is still
//! available through [`BoundEvaluation::Expanded`] and is checked against the
//! factored value in the tests.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution as _, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::linalg::{dot, dot_conj, norm2, smallest_singular_value, ComplexMatrix, ComplexVector, Lu, SplitColumns, SplitRows, C64, ZERO};
use crate::nonintrusive::{NonintrusiveDecomposition, OperatorSnapshots};
use crate::problems::{cost_function_eval, truth_solve, ParameterDomain, ParameterPoint, ProblemProvider};

/// Pivot ratio under which a reduced system counts as singular.
pub const REDUCED_PIVOT_RATIO: f64 = 1e-13;
/// Relative Gram–Schmidt residual under which a snapshot is taken to lie in the basis span.
pub const SPAN_TOL: f64 = 1e-12;
/// Relative residual under which a residual building block adds no new direction.
const FACTOR_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// `Uᴴ A U`.
    #[default]
    Hermitian,
    /// `Uᵗ A U`.
    Transpose,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstParameter {
    #[default]
    DomainCenter,
    MaxRhsNorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundEvaluation {
    #[default]
    Factored,
    Expanded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyConfig {
    pub n_max: usize,
    pub tolerance: f64,
    pub first: FirstParameter,
    pub projection: Projection,
    pub bound: BoundEvaluation,
    /// Keep the n×n̂ basis in the model.
    pub keep_basis: bool,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            n_max: 20,
            tolerance: 1e-8,
            first: FirstParameter::DomainCenter,
            projection: Projection::Hermitian,
            bound: BoundEvaluation::Factored,
            keep_basis: false,
        }
    }
}

/// Smallest singular value of `A_μ`, used as a fixed inf-sup lower bound.
pub fn compute_infsup_lb(provider: &dyn ProblemProvider, mu: &ParameterPoint) -> Result<f64> {
    let a = provider.assemble_matrix(mu)?;
    let s = smallest_singular_value(&a)?;
    if s.is_nan() || s < 1e-14 * a.frobenius_norm() {
        return Err(Error::SingularMatrix { column: 0, pivot: s });
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct ReducedBasisModel {
    pub projection: Projection,
    pub bound_evaluation: BoundEvaluation,
    pub snapshot_mus: Vec<ParameterPoint>,
    /// Columns of `U`, kept only on request.
    pub basis: Option<Vec<ComplexVector>>,
    pub a_hat: Vec<ComplexMatrix>,
    pub c_hat: Vec<ComplexVector>,
    /// `G[r][r'] = (A_r U)ᴴ (A_r' U)`.
    pub gram_aa: Vec<Vec<ComplexMatrix>>,
    /// `H[r][r'] = (A_r U)ᴴ C_r'`.
    pub gram_ac: Vec<Vec<ComplexVector>>,
    /// `S[r][r'] = C_rᴴ C_r'`.
    pub gram_cc: ComplexMatrix,
    /// `R` with `W = Q R`, columns ordered `[C_1.., A_1 u_1, .., A_dz u_1, A_1 u_2, ..]`.
    pub residual_factor: ResidualFactor,
    /// Packed copy of `a_hat` and `c_hat`.
    pub online: OnlineOperators,
    pub beta_lb: f64,
    /// `ℓᴴ u_j`.
    pub ell_hat: ComplexVector,
    pub matrix_decomp: NonintrusiveDecomposition,
    pub rhs_decomp: NonintrusiveDecomposition,
    pub domain: ParameterDomain,
}

/// Triangular factor `R` of the residual building blocks, with a packed copy
/// for the online norm evaluation.
#[derive(Clone, Debug)]
pub struct ResidualFactor {
    matrix: ComplexMatrix,
    packed: SplitRows,
}

impl ResidualFactor {
    pub fn new(matrix: ComplexMatrix) -> Self {
        let packed = SplitRows::new(&matrix);
        Self { matrix, packed }
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    /// `‖R c‖₂`.
    pub fn apply_norm(&self, c: &[C64]) -> f64 {
        self.packed.matvec_norm(c)
    }
}

/// `Â_r` and `ĉ_r'` stacked entry by entry, so that `Â(μ)` and `ĉ(μ)` are a
/// single matrix-vector product with `β(μ)` and `β'(μ)` each.
#[derive(Clone, Debug)]
pub struct OnlineOperators {
    n: usize,
    a: SplitColumns,
    c: SplitColumns,
}

impl OnlineOperators {
    pub fn new(a_hat: &[ComplexMatrix], c_hat: &[ComplexVector]) -> Self {
        let n = c_hat.first().map_or(0, Vec::len);
        let a = ComplexMatrix::from_fn(n * n, a_hat.len(), |e, r| a_hat[r][(e / n, e % n)]);
        let c = ComplexMatrix::from_fn(n, c_hat.len(), |i, r| c_hat[r][i]);
        Self {
            n,
            a: SplitColumns::new(&a),
            c: SplitColumns::new(&c),
        }
    }

    pub fn matrix(&self, beta: &[C64]) -> ComplexMatrix {
        ComplexMatrix::from_vec(self.n, self.n, self.a.matvec(beta)).expect("stacked operator shape")
    }

    pub fn vector(&self, beta_rhs: &[C64]) -> ComplexVector {
        self.c.matvec(beta_rhs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineSolution {
    pub gamma_hat: ComplexVector,
    pub qoi: C64,
    pub error_bound: f64,
    /// The expanded residual came out negative and was clamped to zero.
    pub rho_clamped: bool,
    pub extrapolated: bool,
    pub beta: ComplexVector,
    pub beta_rhs: ComplexVector,
    pub wall_time: Duration,
}

impl ReducedBasisModel {
    pub fn n_hat(&self) -> usize {
        self.snapshot_mus.len()
    }

    pub fn d_z(&self) -> usize {
        self.a_hat.len()
    }

    pub fn d_z_rhs(&self) -> usize {
        self.c_hat.len()
    }

    /// Solves the reduced system and certifies it. Touches no `n`-sized object.
    pub fn online_solve(&self, mu: &ParameterPoint) -> Result<OnlineSolution> {
        let t0 = Instant::now();
        let be = self.matrix_decomp.beta_eval(mu);
        let br = self.rhs_decomp.beta_eval(mu);
        let gamma = self.solve_reduced(&be.beta, &br.beta)?;
        let (rho_sq, clamped) = match self.bound_evaluation {
            BoundEvaluation::Factored => (self.rho_factored(&be.beta, &br.beta, &gamma).powi(2), false),
            BoundEvaluation::Expanded => clamp_rho_sq(self.rho_sq_expanded(&be.beta, &br.beta, &gamma)),
        };
        let qoi = dot(&self.ell_hat, &gamma);
        Ok(OnlineSolution {
            qoi,
            error_bound: rho_sq.sqrt() / self.beta_lb,
            rho_clamped: clamped,
            extrapolated: be.extrapolated || br.extrapolated,
            gamma_hat: gamma,
            beta: be.beta,
            beta_rhs: br.beta,
            wall_time: t0.elapsed(),
        })
    }

    fn solve_reduced(&self, beta: &[C64], beta_rhs: &[C64]) -> Result<ComplexVector> {
        let a = self.online.matrix(beta);
        let c = self.online.vector(beta_rhs);
        let lu = Lu::new(&a).map_err(|_| Error::SingularReducedSystem { ratio: 0.0 })?;
        if lu.pivot_ratio() < REDUCED_PIVOT_RATIO {
            return Err(Error::SingularReducedSystem {
                ratio: lu.pivot_ratio(),
            });
        }
        Ok(lu.solve(&c))
    }

    /// Coefficient vector `c` of the residual in the building blocks `W`.
    fn residual_coefficients(&self, beta: &[C64], beta_rhs: &[C64], gamma: &[C64]) -> ComplexVector {
        let mut c = Vec::with_capacity(beta_rhs.len() + gamma.len() * beta.len());
        c.extend(beta_rhs.iter().map(|b| -b));
        for g in gamma {
            c.extend(beta.iter().map(|b| b * g));
        }
        c
    }

    /// `‖R c‖₂`.
    pub fn rho_factored(&self, beta: &[C64], beta_rhs: &[C64], gamma: &[C64]) -> f64 {
        self.residual_factor.apply_norm(&self.residual_coefficients(beta, beta_rhs, gamma))
    }

    /// Expanded quadratic form of the squared residual norm (may be slightly negative).
    pub fn rho_sq_expanded(&self, beta: &[C64], beta_rhs: &[C64], gamma: &[C64]) -> f64 {
        let mut aa = 0.0;
        for (r, br) in beta.iter().enumerate() {
            for (s, bs) in beta.iter().enumerate() {
                let g = &self.gram_aa[r][s];
                let v = dot_conj(gamma, &g.matvec(gamma));
                aa += (br.conj() * bs * v).re;
            }
        }
        let mut ac = ZERO;
        for (r, br) in beta.iter().enumerate() {
            for (s, bs) in beta_rhs.iter().enumerate() {
                ac += br.conj() * bs * dot_conj(gamma, &self.gram_ac[r][s]);
            }
        }
        let mut cc = 0.0;
        for (r, br) in beta_rhs.iter().enumerate() {
            for (s, bs) in beta_rhs.iter().enumerate() {
                cc += (br.conj() * bs * self.gram_cc[(r, s)]).re;
            }
        }
        aa - 2.0 * ac.re + cc
    }

    /// Parallel evaluation, output in input order. Per-point failures are kept.
    pub fn sweep(&self, mus: &[ParameterPoint]) -> Vec<Result<OnlineSolution>> {
        mus.par_iter().map(|m| self.online_solve(m)).collect()
    }

    /// Reconstructs `U γ̂` when the basis was kept.
    pub fn lift(&self, gamma: &[C64]) -> Option<ComplexVector> {
        let basis = self.basis.as_ref()?;
        let n = basis.first().map_or(0, Vec::len);
        let mut u = vec![ZERO; n];
        for (g, col) in gamma.iter().zip(basis) {
            for (o, &x) in u.iter_mut().zip(col) {
                *o += g * x;
            }
        }
        Some(u)
    }
}

/// Round-off can push the expanded squared residual slightly below zero.
pub fn clamp_rho_sq(v: f64) -> (f64, bool) {
    if v < 0.0 {
        (0.0, true)
    } else {
        (v, false)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ToleranceReached,
    MaxBasisSize,
    /// The next snapshot already lies in the span of the basis.
    SnapshotInSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub selected_mu: Vec<f64>,
    pub max_bound: f64,
    pub basis_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyTrace {
    pub names: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub stop_reason: StopReason,
    pub skipped: usize,
}

impl GreedyTrace {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let mut header = vec!["step".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("max_bound".into());
        header.push("basis_size".into());
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells = vec![r.step.to_string()];
            cells.extend(r.selected_mu.iter().map(|v| format!("{v:.17e}")));
            cells.push(format!("{:.6e}", r.max_bound));
            cells.push(r.basis_size.to_string());
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::model_file::write_atomic(path, &buf)
    }
}

/// Orthonormalizes `u` against `basis` (modified Gram–Schmidt, twice).
/// Returns `None` when `u` lies in the span.
pub fn orthonormalize(basis: &[ComplexVector], u: &[C64]) -> Option<ComplexVector> {
    let n0 = norm2(u);
    let mut v = u.to_vec();
    for _ in 0..2 {
        for b in basis {
            let h = dot_conj(b, &v);
            for (x, &y) in v.iter_mut().zip(b) {
                *x -= h * y;
            }
        }
    }
    let nv = norm2(&v);
    if n0 == 0.0 || nv < SPAN_TOL * n0 {
        return None;
    }
    Some(v.iter().map(|x| x / nv).collect())
}

/// Recomputes the basis from the snapshot parameters, exactly as the greedy built it.
pub fn rebuild_basis(provider: &dyn ProblemProvider, snapshot_mus: &[ParameterPoint]) -> Result<Vec<ComplexVector>> {
    let sols = snapshot_mus
        .par_iter()
        .map(|m| truth_solve(provider, m))
        .collect::<Result<Vec<_>>>()?;
    let mut basis = Vec::with_capacity(sols.len());
    for (u, m) in sols.iter().zip(snapshot_mus) {
        let v = orthonormalize(&basis, u)
            .ok_or_else(|| Error::InvalidInput(format!("snapshot at {m} lies in the span of the basis")))?;
        basis.push(v);
    }
    Ok(basis)
}

/// Incrementally maintained reduced quantities.
struct Builder<'a> {
    snaps: &'a OperatorSnapshots,
    projection: Projection,
    basis: Vec<ComplexVector>,
    /// `au[r][j] = A_r u_j`.
    au: Vec<Vec<ComplexVector>>,
    q: Vec<ComplexVector>,
    /// Columns of `R`, each as long as `q` was when it was added.
    r_cols: Vec<ComplexVector>,
    a_hat: Vec<Vec<Vec<C64>>>,
    gram_aa: Vec<Vec<Vec<Vec<C64>>>>,
    ell_hat: ComplexVector,
    ell: &'a [C64],
}

impl<'a> Builder<'a> {
    fn new(snaps: &'a OperatorSnapshots, projection: Projection, ell: &'a [C64]) -> Self {
        let dz = snaps.matrices.len();
        let mut b = Self {
            snaps,
            projection,
            basis: Vec::new(),
            au: vec![Vec::new(); dz],
            q: Vec::new(),
            r_cols: Vec::new(),
            a_hat: vec![Vec::new(); dz],
            gram_aa: vec![vec![Vec::new(); dz]; dz],
            ell_hat: Vec::new(),
            ell,
        };
        for c in &snaps.rhs {
            b.append_factor_column(c);
        }
        b
    }

    fn append_factor_column(&mut self, w: &[C64]) {
        let norm0 = norm2(w);
        let mut v = w.to_vec();
        let mut coeffs = vec![ZERO; self.q.len()];
        for _ in 0..2 {
            for (k, qk) in self.q.iter().enumerate() {
                let h = dot_conj(qk, &v);
                coeffs[k] += h;
                for (x, &y) in v.iter_mut().zip(qk) {
                    *x -= h * y;
                }
            }
        }
        let nv = norm2(&v);
        if nv > FACTOR_TOL * norm0 && nv > 0.0 {
            coeffs.push(C64::new(nv, 0.0));
            let inv = 1.0 / nv;
            self.q.push(v.iter().map(|x| x * inv).collect());
        }
        self.r_cols.push(coeffs);
    }

    fn pair(&self, x: &[C64], y: &[C64]) -> C64 {
        match self.projection {
            Projection::Hermitian => dot_conj(x, y),
            Projection::Transpose => dot(x, y),
        }
    }

    /// Largest deviation of the newest column from orthonormality.
    fn orthonormality_defect(&self) -> f64 {
        let Some((u, rest)) = self.basis.split_last() else {
            return 0.0;
        };
        rest.iter()
            .map(|b| dot_conj(b, u).norm())
            .fold((norm2(u) - 1.0).abs(), f64::max)
    }

    fn add(&mut self, u: ComplexVector) {
        let dz = self.snaps.matrices.len();
        let new_au: Vec<ComplexVector> = self.snaps.matrices.par_iter().map(|a| a.matvec(&u)).collect();
        let j = self.basis.len();
        for (r, new_au_r) in new_au.iter().enumerate() {
            // Extend Â_r with a new last column and row.
            for i in 0..j {
                let v = self.pair(&self.basis[i], new_au_r);
                self.a_hat[r][i].push(v);
            }
            let mut row: Vec<C64> = (0..j).map(|i| self.pair(&u, &self.au[r][i])).collect();
            row.push(self.pair(&u, new_au_r));
            self.a_hat[r].push(row);
        }
        for r in 0..dz {
            for s in 0..dz {
                for i in 0..j {
                    let v = dot_conj(&self.au[r][i], &new_au[s]);
                    self.gram_aa[r][s][i].push(v);
                }
                let mut row: Vec<C64> = (0..j).map(|i| dot_conj(&new_au[r], &self.au[s][i])).collect();
                row.push(dot_conj(&new_au[r], &new_au[s]));
                self.gram_aa[r][s].push(row);
            }
        }
        for w in &new_au {
            self.append_factor_column(w);
        }
        for (r, v) in new_au.into_iter().enumerate() {
            self.au[r].push(v);
        }
        self.ell_hat.push(dot_conj(self.ell, &u));
        self.basis.push(u);
    }

    fn model(
        &self,
        snapshot_mus: &[ParameterPoint],
        beta_lb: f64,
        cfg: &GreedyConfig,
        matrix_decomp: &NonintrusiveDecomposition,
        rhs_decomp: &NonintrusiveDecomposition,
        domain: &ParameterDomain,
    ) -> ReducedBasisModel {
        let nh = self.basis.len();
        let sq = |rows: &Vec<Vec<C64>>| ComplexMatrix::from_fn(nh, nh, |i, j| rows[i][j]);
        let a_hat: Vec<ComplexMatrix> = self.a_hat.iter().map(sq).collect();
        let c_hat: Vec<ComplexVector> = self
            .snaps
            .rhs
            .iter()
            .map(|c| self.basis.iter().map(|u| self.pair(u, c)).collect())
            .collect();
        let gram_aa = self.gram_aa.iter().map(|row| row.iter().map(sq).collect()).collect();
        let gram_ac = self
            .au
            .iter()
            .map(|aur| {
                self.snaps
                    .rhs
                    .iter()
                    .map(|c| aur.iter().map(|v| dot_conj(v, c)).collect())
                    .collect()
            })
            .collect();
        let m = self.snaps.rhs.len();
        let gram_cc = ComplexMatrix::from_fn(m, m, |r, s| dot_conj(&self.snaps.rhs[r], &self.snaps.rhs[s]));
        let rank = self.q.len();
        let k = self.r_cols.len();
        let residual_factor =
            ResidualFactor::new(ComplexMatrix::from_fn(rank, k, |i, j| self.r_cols[j].get(i).copied().unwrap_or(ZERO)));
        let online = OnlineOperators::new(&a_hat, &c_hat);
        ReducedBasisModel {
            projection: self.projection,
            bound_evaluation: cfg.bound,
            snapshot_mus: snapshot_mus.to_vec(),
            basis: cfg.keep_basis.then(|| self.basis.clone()),
            a_hat,
            c_hat,
            gram_aa,
            gram_ac,
            gram_cc,
            residual_factor,
            online,
            beta_lb,
            ell_hat: self.ell_hat.clone(),
            matrix_decomp: matrix_decomp.clone(),
            rhs_decomp: rhs_decomp.clone(),
            domain: domain.clone(),
        }
    }
}

/// Greedy offline stage over `trial`.
pub fn greedy_offline(
    provider: &dyn ProblemProvider,
    matrix_decomp: &NonintrusiveDecomposition,
    rhs_decomp: &NonintrusiveDecomposition,
    snaps: &OperatorSnapshots,
    trial: &[ParameterPoint],
    cfg: &GreedyConfig,
) -> Result<(ReducedBasisModel, GreedyTrace)> {
    let tag = |e: Error| e.at(Stage::Greedy);
    if cfg.n_max == 0 {
        return Err(tag(Error::InvalidInput("n_max must be >= 1".into())));
    }
    if trial.is_empty() {
        return Err(tag(Error::InvalidInput("empty trial grid".into())));
    }
    let domain = provider.domain();
    let center = domain.center();
    let beta_lb = compute_infsup_lb(provider, &center).map_err(tag)?;
    log::info!("inf-sup lower bound at the domain centre: {beta_lb:.6e}");

    let mut mu_star = match cfg.first {
        FirstParameter::DomainCenter => center,
        FirstParameter::MaxRhsNorm => {
            let norms: Vec<f64> = trial
                .par_iter()
                .map(|m| norm2(&snaps.vector(&rhs_decomp.beta(m))))
                .collect();
            trial[argmax(&norms).0].clone()
        }
    };

    let mut builder = Builder::new(snaps, cfg.projection, provider.output_functional());
    let mut selected: Vec<ParameterPoint> = Vec::new();
    let mut rows = Vec::new();
    let mut skipped = 0;
    let stop_reason;
    loop {
        if matrix_decomp.selected_mu.iter().any(|m| m.coords() == mu_star.coords()) {
            log::info!("snapshot parameter {mu_star} coincides with a decomposition parameter");
        }
        let u = truth_solve(provider, &mu_star).map_err(tag)?;
        let Some(u) = orthonormalize(&builder.basis, &u) else {
            log::warn!("snapshot at {mu_star} lies in the span of the basis; stopping");
            stop_reason = StopReason::SnapshotInSpan;
            break;
        };
        builder.add(u);
        let defect = builder.orthonormality_defect();
        if defect > 1e-12 {
            return Err(tag(Error::InvalidInput(format!("basis lost orthonormality ({defect:.2e})"))));
        }
        selected.push(mu_star.clone());
        let model = builder.model(&selected, beta_lb, cfg, matrix_decomp, rhs_decomp, domain);

        let bounds: Vec<Option<f64>> = trial
            .par_iter()
            .map(|m| match model.online_solve(m) {
                Ok(s) => Some(s.error_bound),
                Err(e) => {
                    log::warn!("skipping {m} in the bound sweep: {e}");
                    None
                }
            })
            .collect();
        skipped += bounds.iter().filter(|b| b.is_none()).count();
        let scores: Vec<f64> = bounds.iter().map(|b| b.unwrap_or(f64::NEG_INFINITY)).collect();
        let (best, max_bound) = argmax(&scores);
        rows.push(TraceRow {
            step: rows.len() + 1,
            selected_mu: mu_star.coords().to_vec(),
            max_bound,
            basis_size: selected.len(),
        });
        log::info!("greedy step {}: n̂ = {}, max bound {max_bound:.3e}", rows.len(), selected.len());
        if max_bound <= cfg.tolerance {
            stop_reason = StopReason::ToleranceReached;
            break;
        }
        if selected.len() >= cfg.n_max {
            stop_reason = StopReason::MaxBasisSize;
            break;
        }
        mu_star = trial[best].clone();
    }
    if selected.is_empty() {
        return Err(tag(Error::InvalidInput("first snapshot is zero".into())));
    }
    let model = builder.model(&selected, beta_lb, cfg, matrix_decomp, rhs_decomp, domain);
    let trace = GreedyTrace {
        names: domain.names().to_vec(),
        rows,
        stop_reason,
        skipped,
    };
    Ok((model, trace))
}

/// Lowest index among maximal scores, and the maximum.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &s) in v.iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Input law of one parameter coordinate, truncated to the parameter box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    PointMass { value: f64 },
    Uniform,
    TruncatedNormal { mean: f64, std: f64 },
    /// Log-normal with the given parameters of the underlying normal.
    TruncatedLogNormal { mu: f64, sigma: f64 },
}

const MAX_REJECTIONS: usize = 100_000;

impl Distribution {
    fn sample<R: Rng>(&self, rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
        match *self {
            Distribution::PointMass { value } => Ok(value),
            Distribution::Uniform => Ok(rng.random_range(lo..=hi)),
            Distribution::TruncatedNormal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
                reject(rng, lo, hi, |r| d.sample(r))
            }
            Distribution::TruncatedLogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
                reject(rng, lo, hi, |r| d.sample(r))
            }
        }
    }
}

fn reject<R: Rng>(rng: &mut R, lo: f64, hi: f64, f: impl Fn(&mut R) -> f64) -> Result<f64> {
    for _ in 0..MAX_REJECTIONS {
        let x = f(rng);
        if x >= lo && x <= hi {
            return Ok(x);
        }
    }
    Err(Error::InvalidInput(format!(
        "distribution has negligible mass in [{lo}, {hi}]"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            let pad = (lo.abs() * 1e-9).max(1e-12);
            (lo - pad, hi + pad)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|k| if k == bins { hi } else { lo + width * k as f64 })
            .collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqResult {
    pub re: Histogram,
    pub im: Histogram,
    pub mean_re: f64,
    pub mean_im: f64,
    pub samples: usize,
    pub failures: usize,
}

/// Draws the parameter samples for a UQ study.
pub fn uq_samples(
    domain: &ParameterDomain,
    distributions: &[Distribution],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ParameterPoint>> {
    if distributions.len() != domain.dim() {
        return Err(Error::LengthMismatch {
            expected: domain.dim(),
            found: distributions.len(),
        });
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    for (i, d) in distributions.iter().enumerate() {
        if let Distribution::PointMass { value } = d {
            if !(*value >= domain.lo()[i] && *value <= domain.hi()[i]) {
                return Err(Error::OutOfDomain {
                    name: domain.names()[i].clone(),
                    value: *value,
                    lo: domain.lo()[i],
                    hi: domain.hi()[i],
                });
            }
        }
    }
    let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let coords = distributions
                .iter()
                .enumerate()
                .map(|(i, d)| d.sample(&mut rng, domain.lo()[i], domain.hi()[i]))
                .collect::<Result<Vec<_>>>()?;
            domain.point(coords)
        })
        .collect()
}

/// Histograms of `Re(qoi)` and `Im(qoi)` under the given input laws.
pub fn uq_histogram(
    model: &ReducedBasisModel,
    distributions: &[Distribution],
    n_samples: usize,
    seed: u64,
    bins: usize,
) -> Result<UqResult> {
    let mus = uq_samples(&model.domain, distributions, n_samples, seed)?;
    let sols = model.sweep(&mus);
    let qois: Vec<C64> = sols.iter().filter_map(|s| s.as_ref().ok().map(|s| s.qoi)).collect();
    let re: Vec<f64> = qois.iter().map(|q| q.re).collect();
    let im: Vec<f64> = qois.iter().map(|q| q.im).collect();
    let n = qois.len().max(1) as f64;
    Ok(UqResult {
        re: Histogram::build(&re, bins),
        im: Histogram::build(&im, bins),
        mean_re: re.iter().sum::<f64>() / n,
        mean_im: im.iter().sum::<f64>() / n,
        samples: qois.len(),
        failures: sols.len() - qois.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostScan {
    /// `(impedances, cost)` per grid combination, first axis slowest.
    pub table: Vec<([f64; 3], f64)>,
    pub argmin: [f64; 3],
    pub min_cost: f64,
}

/// Evaluates `Σ α_i |QoI(f_i)|² + h(μ)` over a 3-D impedance grid.
#[allow(clippy::too_many_arguments)]
pub fn cost_scan(
    model: &ReducedBasisModel,
    base: &ParameterPoint,
    frequency_index: usize,
    frequencies: &[f64],
    weights: &[f64],
    impedance_indices: [usize; 3],
    axes: [&[f64]; 3],
    penalty: impl Fn(f64, f64, f64) -> f64 + Sync,
) -> Result<CostScan> {
    let combos: Vec<[f64; 3]> = axes[0]
        .iter()
        .flat_map(|&a| axes[1].iter().flat_map(move |&b| axes[2].iter().map(move |&c| [a, b, c])))
        .collect();
    if combos.is_empty() {
        return Err(Error::InvalidInput("empty impedance grid".into()));
    }
    let table = combos
        .par_iter()
        .map(|z| {
            let mut p = base.clone();
            for (k, &idx) in impedance_indices.iter().enumerate() {
                p = p.with_coord(idx, z[k]);
            }
            let qois = frequencies
                .iter()
                .map(|&f| model.online_solve(&p.with_coord(frequency_index, f)).map(|s| s.qoi))
                .collect::<Result<Vec<_>>>()?;
            Ok((*z, cost_function_eval(&qois, weights, penalty(z[0], z[1], z[2]))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (i, min_cost) = table
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, (_, c))| if *c < acc.1 { (i, *c) } else { acc });
    Ok(CostScan {
        argmin: table[i].0,
        min_cost,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{inverse, sub};
    use crate::nonintrusive::{decompose, DecompositionSettings};
    use crate::problems::{affine_toy_provider, AffineToy};

    fn toy() -> (AffineToy, ParameterDomain) {
        let d = ParameterDomain::new(vec!["mu".into()], vec![0.0], vec![1.0], vec![41]).unwrap();
        (affine_toy_provider(40, d.clone()).unwrap(), d)
    }

    fn trained(cfg: GreedyConfig) -> (AffineToy, ReducedBasisModel, GreedyTrace, OperatorSnapshots) {
        let (p, d) = toy();
        let trial = d.grid();
        let s = DecompositionSettings::default();
        let md = decompose(&p.matrix_structure(), &trial, &s).unwrap();
        let rd = decompose(&p.rhs_structure(), &trial, &s).unwrap();
        let snaps = OperatorSnapshots::assemble(&p, &md, &rd).unwrap();
        let (m, t) = greedy_offline(&p, &md, &rd, &snaps, &trial, &cfg).unwrap();
        (p, m, t, snaps)
    }

    /// Inverse power iteration on AᴴA with an independent LU.
    fn smallest_sv_oracle(a: &ComplexMatrix) -> f64 {
        let aha = a.adjoint().matmul(a);
        let lu = Lu::new(&aha).unwrap();
        let mut x = vec![C64::new(1.0, 0.3); a.cols()];
        let mut lam = 0.0;
        for _ in 0..500 {
            let y = lu.solve(&x);
            let ny = norm2(&y);
            lam = 1.0 / ny * norm2(&x);
            x = y.iter().map(|v| v / ny).collect();
        }
        lam.sqrt()
    }

    #[test]
    fn infsup_cases() {
        let (p, d) = toy();
        let lb = compute_infsup_lb(&p, &d.center()).unwrap();
        let oracle = smallest_sv_oracle(&p.assemble_matrix(&d.center()).unwrap());
        assert!((lb - oracle).abs() <= 1e-6 * oracle);
        let diag = ComplexMatrix::diagonal(&[C64::new(3.0, 0.0), C64::new(0.5, 0.0)]);
        assert!((smallest_sv_oracle(&diag) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn toy_greedy_terminates_small_and_certified() {
        let cfg = GreedyConfig {
            tolerance: 1e-10,
            keep_basis: true,
            ..Default::default()
        };
        let (p, m, t, _) = trained(cfg);
        assert!(m.n_hat() <= 3, "n̂ = {}", m.n_hat());
        assert_eq!(t.stop_reason, StopReason::ToleranceReached);
        assert!(t.rows.last().unwrap().max_bound <= 1e-10);
        // orthonormal basis
        let u = m.basis.as_ref().unwrap();
        for i in 0..u.len() {
            for j in 0..u.len() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((dot_conj(&u[i], &u[j]) - C64::new(e, 0.0)).norm() < 1e-12);
            }
        }
        for mu in p.domain().grid().iter().step_by(5) {
            let s = m.online_solve(mu).unwrap();
            let truth = truth_solve(&p, mu).unwrap();
            let err = norm2(&sub(&m.lift(&s.gamma_hat).unwrap(), &truth));
            if smallest_singular_value(&p.assemble_matrix(mu).unwrap()).unwrap() >= m.beta_lb {
                assert!(err <= s.error_bound * (1.0 + 1e-6) + 1e-15, "{err} > {}", s.error_bound);
            }
        }
    }

    #[test]
    fn single_snapshot_reproduces_itself() {
        let cfg = GreedyConfig {
            n_max: 1,
            keep_basis: true,
            ..Default::default()
        };
        let (p, m, t, _) = trained(cfg);
        assert_eq!(m.n_hat(), 1);
        assert_eq!(t.stop_reason, StopReason::MaxBasisSize);
        let mu = &m.snapshot_mus[0];
        let s = m.online_solve(mu).unwrap();
        let truth = truth_solve(&p, mu).unwrap();
        assert!(norm2(&sub(&m.lift(&s.gamma_hat).unwrap(), &truth)) <= 1e-9 * norm2(&truth));
        assert!(s.error_bound <= 1e-12 / m.beta_lb);
    }

    #[test]
    fn factored_and_expanded_residuals_match_direct_evaluation() {
        let cfg = GreedyConfig {
            n_max: 2,
            tolerance: 0.0,
            keep_basis: true,
            ..Default::default()
        };
        let (_, m, _, snaps) = trained(cfg);
        for i in 0..20 {
            let mu = m.domain.point(vec![i as f64 / 19.0]).unwrap();
            let s = m.online_solve(&mu).unwrap();
            let a = snaps.matrix(&s.beta);
            let c = snaps.vector(&s.beta_rhs);
            let u = m.lift(&s.gamma_hat).unwrap();
            let direct = norm2(&sub(&a.matvec(&u), &c));
            let fact = m.rho_factored(&s.beta, &s.beta_rhs, &s.gamma_hat);
            let exp = m.rho_sq_expanded(&s.beta, &s.beta_rhs, &s.gamma_hat).max(0.0).sqrt();
            // Both sides are only accurate to a few eps·‖C‖.
            assert!((fact - direct).abs() <= 1e-9 * direct + 1e-13 * norm2(&c), "{fact} vs {direct}");
            // The expanded form carries a √eps·‖C‖ floor.
            let floor = 1e-7 * norm2(&c);
            assert!((exp - direct).abs() <= 1e-9 * direct + floor);
        }
    }

    #[test]
    fn negative_expanded_residual_is_clamped() {
        assert_eq!(clamp_rho_sq(-1e-18), (0.0, true));
        assert_eq!(clamp_rho_sq(4.0), (4.0, false));
        let cfg = GreedyConfig {
            n_max: 1,
            bound: BoundEvaluation::Expanded,
            ..Default::default()
        };
        let (_, m, _, _) = trained(cfg);
        let s = m.online_solve(&m.snapshot_mus[0]).unwrap();
        assert!(s.error_bound <= 1e-6, "{}", s.error_bound);
    }

    #[test]
    fn transpose_projection_is_supported() {
        let cfg = GreedyConfig {
            n_max: 3,
            projection: Projection::Transpose,
            ..Default::default()
        };
        let (_, m, _, _) = trained(cfg);
        // Real symmetric toy: both projections coincide.
        let (_, h, _, _) = trained(GreedyConfig {
            n_max: 3,
            ..Default::default()
        });
        let mu = m.domain.point(vec![0.37]).unwrap();
        let a = m.online_solve(&mu).unwrap();
        let b = h.online_solve(&mu).unwrap();
        assert!((a.qoi - b.qoi).norm() < 1e-12 * b.qoi.norm());
    }

    #[test]
    fn sweep_keeps_order_and_handles_empty() {
        let (_, m, _, _) = trained(GreedyConfig::default());
        assert!(m.sweep(&[]).is_empty());
        let mus: Vec<ParameterPoint> = (0..7).map(|i| m.domain.point(vec![i as f64 / 6.0]).unwrap()).collect();
        let out = m.sweep(&mus);
        for (mu, s) in mus.iter().zip(&out) {
            assert_eq!(s.as_ref().unwrap().qoi, m.online_solve(mu).unwrap().qoi);
        }
    }

    #[test]
    fn uq_determinism_and_point_mass() {
        let (_, m, _, _) = trained(GreedyConfig::default());
        let a = uq_histogram(&m, &[Distribution::Uniform], 500, 9, 12).unwrap();
        let b = uq_histogram(&m, &[Distribution::Uniform], 500, 9, 12).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.re.counts.iter().sum::<u64>(), 500);
        let pm = uq_histogram(&m, &[Distribution::PointMass { value: 0.3 }], 50, 1, 10).unwrap();
        assert_eq!(pm.re.counts.iter().filter(|&&c| c > 0).count(), 1);
        let tn = uq_samples(&m.domain, &[Distribution::TruncatedNormal { mean: 0.5, std: 2.0 }], 200, 3).unwrap();
        assert!(tn.iter().all(|p| (0.0..=1.0).contains(&p.get(0))));
        let ln = uq_samples(&m.domain, &[Distribution::TruncatedLogNormal { mu: -1.0, sigma: 0.5 }], 200, 3).unwrap();
        assert!(ln.iter().all(|p| (0.0..=1.0).contains(&p.get(0))));
    }

    #[test]
    fn reduced_matrix_is_projected_operator() {
        let (p, m, _, _) = trained(GreedyConfig {
            n_max: 3,
            tolerance: 0.0,
            keep_basis: true,
            ..Default::default()
        });
        let u = m.basis.as_ref().unwrap();
        let mu = m.domain.point(vec![0.8]).unwrap();
        let a = p.assemble_matrix(&mu).unwrap();
        let ut = ComplexMatrix::from_fn(u.len(), u[0].len(), |i, j| u[i][j].conj());
        let uu = ComplexMatrix::from_fn(u[0].len(), u.len(), |i, j| u[j][i]);
        let direct = ut.matmul(&a).matmul(&uu);
        let s = m.online_solve(&mu).unwrap();
        let mut red = ComplexMatrix::zeros(m.n_hat(), m.n_hat());
        for (b, ah) in s.beta.iter().zip(&m.a_hat) {
            red.axpy(*b, ah);
        }
        assert!(red.sub(&direct).max_abs() < 1e-10 * direct.max_abs());
        let _ = inverse(&red).unwrap();
    }
}
