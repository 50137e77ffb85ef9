//! Nonintrusive affine decompositions `Q(μ) ≈ Σ_r β_r(μ) Q(μ_r)`.
//!
//! Two routes lead to the coefficient map `β`:
//!
//! * the affine route, where the scalar coefficients `g_s(μ)` are known and
//!   one EIM runs on `γ(μ, s) = g_s(μ)`;
//! * the two-stage route, where each location kernel `g_s(μ, x)` is first
//!   interpolated in `x`, the resulting coefficients (plus analytic
//!   augmentation terms) are stacked into `z(μ)`, and a second EIM runs on
//!   `ζ(μ, p) = z_p(μ)`.
//!
//! Either way the online evaluation of `β` touches only a handful of scalars;
//! the operators at the selected `μ_r` are assembled by the caller.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eim::{eim_offline, EimModel, NormChoice, SampleGrid, Slice};
use crate::error::{Error, Result, Stage};
use crate::linalg::{norm2, ComplexMatrix, ComplexVector, C64, ZERO};
use crate::problems::{
    LocationKernel, NamedFunction, OperatorStructure, ParameterFunction, ParameterPoint, ProblemProvider,
};

/// How first-stage coefficients enter the z-vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZVariant {
    /// `Δᵗ s`: weights of the stored snapshot rows.
    DeltaBased,
    /// `B⁻¹ s`: coefficients on the q-basis.
    #[default]
    BInverseBased,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompositionSettings {
    /// First-stage rank, shared by every kernel.
    pub d: usize,
    /// Second-stage rank.
    pub d_z: usize,
    pub variant: ZVariant,
    pub zeta_slice: Slice,
    /// Slice used on the affine route.
    pub affine_slice: Slice,
    pub norm: NormChoice,
}

impl Default for DecompositionSettings {
    fn default() -> Self {
        Self {
            d: 13,
            d_z: 20,
            variant: ZVariant::BInverseBased,
            zeta_slice: Slice::S2,
            affine_slice: Slice::S1,
            norm: NormChoice::MaxAbs,
        }
    }
}

/// First-stage interpolant of one location kernel.
#[derive(Clone, Debug)]
pub struct Stage1Block {
    pub kernel: LocationKernel,
    pub model: EimModel,
    /// Location values of the selected interpolation points.
    pub magic_x: Vec<f64>,
}

impl Stage1Block {
    fn samples(&self, mu: &[f64]) -> ComplexVector {
        self.magic_x.iter().map(|&x| self.kernel.function.eval(mu, x)).collect()
    }

    /// z-block of this kernel, zero-padded to length `d`.
    pub fn block(&self, mu: &[f64], variant: ZVariant, d: usize) -> ComplexVector {
        let s = self.samples(mu);
        let mut out = match variant {
            ZVariant::BInverseBased => self.model.apply_lambda(&s),
            ZVariant::DeltaBased => self.model.snapshot_coefficients(&s),
        }
        .expect("sample count equals the stage-1 rank");
        out.resize(d, ZERO);
        out
    }
}

#[derive(Clone, Debug)]
pub enum ZBuilder {
    /// `z(μ) = (g_1(μ), .., g_ς(μ))`.
    Affine { terms: Vec<ParameterFunction> },
    TwoStage {
        blocks: Vec<Stage1Block>,
        d: usize,
        variant: ZVariant,
        augmentation: Vec<NamedFunction>,
    },
}

impl ZBuilder {
    pub fn len(&self) -> usize {
        match self {
            ZBuilder::Affine { terms } => terms.len(),
            ZBuilder::TwoStage {
                blocks,
                d,
                augmentation,
                ..
            } => blocks.len() * d + augmentation.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, mu: &[f64]) -> ComplexVector {
        match self {
            ZBuilder::Affine { terms } => terms.iter().map(|t| t.eval(mu)).collect(),
            ZBuilder::TwoStage {
                blocks,
                d,
                variant,
                augmentation,
            } => {
                let mut z = Vec::with_capacity(self.len());
                for b in blocks {
                    z.extend(b.block(mu, *variant, *d));
                }
                z.extend(augmentation.iter().map(|a| a.function.eval(mu)));
                z
            }
        }
    }

    pub fn is_serializable(&self) -> bool {
        match self {
            ZBuilder::Affine { terms } => terms.iter().all(ParameterFunction::is_serializable),
            ZBuilder::TwoStage {
                blocks, augmentation, ..
            } => {
                blocks.iter().all(|b| b.kernel.function.is_serializable())
                    && augmentation.iter().all(|a| a.function.is_serializable())
            }
        }
    }
}

/// Coefficient map `μ ↦ β(μ)` together with the selected parameters `μ_r`.
#[derive(Clone, Debug)]
pub struct NonintrusiveDecomposition {
    pub z_builder: ZBuilder,
    pub zeta_model: EimModel,
    pub selected_mu: Vec<ParameterPoint>,
    /// Bounding box of the training parameters; outside it β is extrapolated.
    pub hull_lo: Vec<f64>,
    pub hull_hi: Vec<f64>,
    pub requested_d_z: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaEval {
    pub beta: ComplexVector,
    pub extrapolated: bool,
}

impl NonintrusiveDecomposition {
    pub fn d_z(&self) -> usize {
        self.zeta_model.d
    }

    pub fn z(&self, mu: &ParameterPoint) -> ComplexVector {
        self.z_builder.eval(mu.coords())
    }

    pub fn beta(&self, mu: &ParameterPoint) -> ComplexVector {
        self.beta_eval(mu).beta
    }

    /// Braced coefficient of the nonintrusive formula. Cost is independent of
    /// the system size.
    pub fn beta_eval(&self, mu: &ParameterPoint) -> BetaEval {
        let z = self.z(mu);
        let samples: Vec<C64> = self.zeta_model.x_indices.iter().map(|&p| z[p]).collect();
        let beta = self
            .zeta_model
            .mu_weights(&samples)
            .expect("sample count equals the second-stage rank");
        BetaEval {
            beta,
            extrapolated: !self.in_hull(mu.coords()),
        }
    }

    pub fn in_hull(&self, mu: &[f64]) -> bool {
        mu.iter()
            .zip(self.hull_lo.iter().zip(&self.hull_hi))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Stage-2 interpolant of `z` at `μ` on the selected p, for the reproduction check.
    pub fn z_interpolant(&self, mu: &ParameterPoint) -> ComplexVector {
        let z = self.z(mu);
        let beta = self.beta(mu);
        // Σ_r β_r z(μ_r) reconstructs z(μ) wherever ζ is in the span.
        let mut out = vec![ZERO; z.len()];
        for (b, m) in beta.iter().zip(&self.selected_mu) {
            for (o, v) in out.iter_mut().zip(self.z(m)) {
                *o += b * v;
            }
        }
        out
    }

    /// Drops grid-sized arrays from the EIM models.
    pub fn compact(&self) -> Self {
        let mut out = self.clone();
        out.zeta_model = out.zeta_model.compact();
        if let ZBuilder::TwoStage { blocks, .. } = &mut out.z_builder {
            for b in blocks {
                b.model = b.model.compact();
            }
        }
        out
    }
}

fn bounding_box(mu_trial: &[ParameterPoint]) -> (Vec<f64>, Vec<f64>) {
    let dim = mu_trial[0].dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in mu_trial {
        for i in 0..dim {
            lo[i] = lo[i].min(p.get(i));
            hi[i] = hi[i].max(p.get(i));
        }
    }
    (lo, hi)
}

fn check_trial(mu_trial: &[ParameterPoint]) -> Result<()> {
    if mu_trial.is_empty() {
        return Err(Error::InvalidInput("empty parameter trial set".into()));
    }
    let dim = mu_trial[0].dim();
    if let Some(p) = mu_trial.iter().find(|p| p.dim() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            found: p.dim(),
        });
    }
    Ok(())
}

/// Second-stage EIM on `ζ(μ, p) = z_p(μ)` over the trial set.
fn zeta_stage(
    z_builder: ZBuilder,
    mu_trial: &[ParameterPoint],
    d_z: usize,
    slice: Slice,
    norm: NormChoice,
    stage: Stage,
) -> Result<NonintrusiveDecomposition> {
    let len = z_builder.len();
    let used = if d_z > len {
        log::warn!("requested second-stage rank {d_z} exceeds z-vector length {len}; using {len}");
        len
    } else {
        d_z
    };
    let rows: Vec<ComplexVector> = mu_trial.par_iter().map(|m| z_builder.eval(m.coords())).collect();
    let grid = SampleGrid::new(
        mu_trial.to_vec(),
        (1..=len).map(|p| p as f64).collect(),
        ComplexMatrix::from_rows(&rows).map_err(|e| e.at(stage.clone()))?,
    )
    .map_err(|e| e.at(stage.clone()))?;
    let zeta_model = eim_offline(&grid, used, norm, slice).map_err(|e| e.at(stage))?;
    let selected_mu = zeta_model.mu_indices.iter().map(|&i| mu_trial[i].clone()).collect();
    let (hull_lo, hull_hi) = bounding_box(mu_trial);
    Ok(NonintrusiveDecomposition {
        z_builder,
        zeta_model,
        selected_mu,
        hull_lo,
        hull_hi,
        requested_d_z: d_z,
    })
}

/// Affine route: one EIM on `γ(μ, s) = g_s(μ)`.
pub fn decompose_affine(
    terms: Vec<ParameterFunction>,
    mu_trial: &[ParameterPoint],
    d: usize,
    slice: Slice,
) -> Result<NonintrusiveDecomposition> {
    if terms.is_empty() {
        return Err(Error::InvalidInput("affine family needs at least one term".into()));
    }
    if d > terms.len() {
        return Err(Error::InvalidInput(format!(
            "rank {d} exceeds the number of affine terms {}",
            terms.len()
        )));
    }
    check_trial(mu_trial)?;
    zeta_stage(
        ZBuilder::Affine { terms },
        mu_trial,
        d,
        slice,
        NormChoice::MaxAbs,
        Stage::Decomposition,
    )
}

/// Distinct projections of the trial points onto the active coordinates, in
/// order of first appearance. Inactive coordinates keep their first value.
fn project(mu_trial: &[ParameterPoint], active: &[usize]) -> Vec<ParameterPoint> {
    let mut seen: Vec<Vec<u64>> = Vec::new();
    let mut out = Vec::new();
    for p in mu_trial {
        let key: Vec<u64> = active.iter().map(|&i| p.get(i).to_bits()).collect();
        if !seen.contains(&key) {
            seen.push(key);
            let mut q = mu_trial[0].clone();
            for &i in active {
                q = q.with_coord(i, p.get(i));
            }
            out.push(q);
        }
    }
    out
}

/// First-stage EIM of one kernel, in slice S1 on its projected trial grid.
pub fn stage1(
    kernel: &LocationKernel,
    mu_trial: &[ParameterPoint],
    d: usize,
    norm: NormChoice,
) -> Result<Stage1Block> {
    let tag = || Stage::Stage1 {
        member: kernel.name.clone(),
    };
    let points = project(mu_trial, &kernel.function.active_coords());
    let xs = kernel.locations();
    let f = &kernel.function;
    let grid = SampleGrid::tabulate(points, xs.clone(), |mu, x| f.eval(mu.coords(), x)).map_err(|e| e.at(tag()))?;
    let model = match eim_offline(&grid, d, norm, Slice::S1) {
        Ok(m) => m,
        Err(Error::RankDeficient {
            achieved,
            partial: Some(m),
            ..
        }) => {
            log::warn!(
                "kernel {} has numerical rank {achieved} < {d}; its z-block is zero-padded",
                kernel.name
            );
            *m
        }
        Err(e) => return Err(e.at(tag())),
    };
    let magic_x = model.x_indices.iter().map(|&j| xs[j]).collect();
    Ok(Stage1Block {
        kernel: kernel.clone(),
        model,
        magic_x,
    })
}

/// Two-stage route.
pub fn decompose_nonaffine(
    kernels: &[LocationKernel],
    augmentation: Vec<NamedFunction>,
    mu_trial: &[ParameterPoint],
    settings: &DecompositionSettings,
) -> Result<NonintrusiveDecomposition> {
    if kernels.is_empty() {
        return Err(Error::InvalidInput("two-stage decomposition needs at least one kernel".into()));
    }
    if settings.d == 0 || settings.d_z == 0 {
        return Err(Error::InvalidInput("ranks d and d_z must be >= 1".into()));
    }
    for (i, a) in augmentation.iter().enumerate() {
        if augmentation[..i].iter().any(|b| b.name == a.name) {
            return Err(Error::InvalidInput(format!("duplicate augmentation name {:?}", a.name)));
        }
    }
    check_trial(mu_trial)?;
    let blocks = kernels
        .iter()
        .map(|k| stage1(k, mu_trial, settings.d, settings.norm))
        .collect::<Result<Vec<_>>>()?;
    let z_builder = ZBuilder::TwoStage {
        blocks,
        d: settings.d,
        variant: settings.variant,
        augmentation,
    };
    zeta_stage(
        z_builder,
        mu_trial,
        settings.d_z,
        settings.zeta_slice,
        settings.norm,
        Stage::Stage2,
    )
}

/// Dispatches on the operator structure reported by a provider.
pub fn decompose(
    structure: &OperatorStructure,
    mu_trial: &[ParameterPoint],
    settings: &DecompositionSettings,
) -> Result<NonintrusiveDecomposition> {
    match structure {
        OperatorStructure::Affine { terms } => {
            decompose_affine(terms.clone(), mu_trial, terms.len(), settings.affine_slice)
        }
        OperatorStructure::Kernel { kernels, augmentation } => {
            decompose_nonaffine(kernels, augmentation.clone(), mu_trial, settings)
        }
    }
}

/// Operators assembled at the selected parameters of a matrix and a RHS decomposition.
#[derive(Clone, Debug)]
pub struct OperatorSnapshots {
    pub matrices: Vec<ComplexMatrix>,
    pub rhs: Vec<ComplexVector>,
}

impl OperatorSnapshots {
    pub fn assemble(
        provider: &dyn ProblemProvider,
        matrix: &NonintrusiveDecomposition,
        rhs: &NonintrusiveDecomposition,
    ) -> Result<Self> {
        let matrices = matrix
            .selected_mu
            .par_iter()
            .map(|m| provider.assemble_matrix(m))
            .collect::<Result<Vec<_>>>()?;
        let rhs = rhs
            .selected_mu
            .par_iter()
            .map(|m| provider.assemble_rhs(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { matrices, rhs })
    }

    pub fn matrix(&self, beta: &[C64]) -> ComplexMatrix {
        let (r, c) = (self.matrices[0].rows(), self.matrices[0].cols());
        let mut a = ComplexMatrix::zeros(r, c);
        for (b, m) in beta.iter().zip(&self.matrices) {
            a.axpy(*b, m);
        }
        a
    }

    pub fn vector(&self, beta: &[C64]) -> ComplexVector {
        let mut c = vec![ZERO; self.rhs[0].len()];
        for (b, v) in beta.iter().zip(&self.rhs) {
            for (o, &x) in c.iter_mut().zip(v) {
                *o += b * x;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub mu: Vec<f64>,
    pub rel_err_matrix: f64,
    pub rel_err_rhs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub names: Vec<String>,
    pub rows: Vec<ValidationRow>,
    pub max_rel_err_matrix: f64,
    pub max_rel_err_rhs: f64,
}

impl ValidationReport {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let mut header: Vec<String> = self.names.clone();
        header.push("rel_err_matrix".into());
        header.push("rel_err_rhs".into());
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells: Vec<String> = r.mu.iter().map(|v| format!("{v:.17e}")).collect();
            cells.push(format!("{:.6e}", r.rel_err_matrix));
            cells.push(format!("{:.6e}", r.rel_err_rhs));
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

/// Relative reconstruction errors against freshly assembled operators.
pub fn validate_decomposition(
    matrix: &NonintrusiveDecomposition,
    rhs: &NonintrusiveDecomposition,
    provider: &dyn ProblemProvider,
    sample_mus: &[ParameterPoint],
) -> Result<ValidationReport> {
    let snaps = OperatorSnapshots::assemble(provider, matrix, rhs)?;
    validate_with_snapshots(matrix, rhs, &snaps, provider, sample_mus)
}

pub fn validate_with_snapshots(
    matrix: &NonintrusiveDecomposition,
    rhs: &NonintrusiveDecomposition,
    snaps: &OperatorSnapshots,
    provider: &dyn ProblemProvider,
    sample_mus: &[ParameterPoint],
) -> Result<ValidationReport> {
    let rows = sample_mus
        .par_iter()
        .map(|mu| {
            let a = provider.assemble_matrix(mu)?;
            let c = provider.assemble_rhs(mu)?;
            let a_rec = snaps.matrix(&matrix.beta(mu));
            let c_rec = snaps.vector(&rhs.beta(mu));
            let ea = a_rec.sub(&a).frobenius_norm() / a.frobenius_norm();
            let ec = norm2(&crate::linalg::sub(&c_rec, &c)) / norm2(&c);
            Ok(ValidationRow {
                mu: mu.coords().to_vec(),
                rel_err_matrix: ea,
                rel_err_rhs: ec,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e: Error| e.at(Stage::Validation))?;
    let max_a = rows.iter().map(|r| r.rel_err_matrix).fold(0.0, f64::max);
    let max_c = rows.iter().map(|r| r.rel_err_rhs).fold(0.0, f64::max);
    Ok(ValidationReport {
        names: provider.domain().names().to_vec(),
        rows,
        max_rel_err_matrix: max_a,
        max_rel_err_rhs: max_c,
    })
}
