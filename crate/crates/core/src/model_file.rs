//! Model persistence.
//!
//! Floating-point arrays are written as decimal strings with 17 significant
//! digits, which round-trip every `f64` exactly and keep the files diff-able.
//! Complex numbers are `[re, im]` pairs of such strings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ProblemConfig;
use crate::eim::{EimModel, Slice};
use crate::error::{Error, Result};
use crate::linalg::{ComplexMatrix, ComplexVector, C64};
use crate::nonintrusive::{NonintrusiveDecomposition, Stage1Block, ZBuilder, ZVariant};
use crate::problems::{LocationKernel, NamedFunction, ParameterDomain, ParameterFunction, ParameterPoint};
use crate::rbm::{BoundEvaluation, OnlineOperators, Projection, ReducedBasisModel, ResidualFactor};

pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(res?)
}

type Num = String;
type Cplx = [Num; 2];
type Mat = Vec<Vec<Cplx>>;

fn enc(x: f64) -> Num {
    format!("{x:.16e}")
}

fn dec(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("not a decimal number: {s:?}")))
}

fn enc_c(z: C64) -> Cplx {
    [enc(z.re), enc(z.im)]
}

fn dec_c(c: &Cplx) -> Result<C64> {
    Ok(C64::new(dec(&c[0])?, dec(&c[1])?))
}

fn enc_v(v: &[C64]) -> Vec<Cplx> {
    v.iter().map(|&z| enc_c(z)).collect()
}

fn dec_v(v: &[Cplx]) -> Result<ComplexVector> {
    v.iter().map(dec_c).collect()
}

fn enc_r(v: &[f64]) -> Vec<Num> {
    v.iter().map(|&x| enc(x)).collect()
}

fn dec_r(v: &[Num]) -> Result<Vec<f64>> {
    v.iter().map(|s| dec(s)).collect()
}

fn enc_m(m: &ComplexMatrix) -> Mat {
    (0..m.rows()).map(|i| enc_v(m.row(i))).collect()
}

fn dec_m(m: &Mat, cols: usize) -> Result<ComplexMatrix> {
    let rows = m.iter().map(|r| dec_v(r)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(ComplexMatrix::zeros(0, cols));
    }
    ComplexMatrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EimRecord {
    pub slice: Slice,
    pub d: usize,
    pub mu_indices: Vec<usize>,
    pub x_indices: Vec<usize>,
    pub b: Mat,
    pub gamma: Mat,
    pub delta: Mat,
    pub residual_history: Vec<Num>,
    pub grid_max: Num,
}

impl EimRecord {
    fn from_model(m: &EimModel) -> Self {
        Self {
            slice: m.slice,
            d: m.d,
            mu_indices: m.mu_indices.clone(),
            x_indices: m.x_indices.clone(),
            b: enc_m(&m.b),
            gamma: enc_m(&m.gamma),
            delta: enc_m(&m.delta),
            residual_history: enc_r(&m.residual_history),
            grid_max: enc(m.grid_max),
        }
    }

    fn to_model(&self) -> Result<EimModel> {
        let d = self.d;
        let model = EimModel {
            slice: self.slice,
            d,
            mu_indices: self.mu_indices.clone(),
            x_indices: self.x_indices.clone(),
            q_vectors: Vec::new(),
            b: dec_m(&self.b, d)?,
            gamma: dec_m(&self.gamma, d)?,
            delta: dec_m(&self.delta, d)?,
            residual_history: dec_r(&self.residual_history)?,
            snapshots: Vec::new(),
            grid_max: dec(&self.grid_max)?,
        };
        for (name, m) in [("b", &model.b), ("gamma", &model.gamma), ("delta", &model.delta)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::Format(format!("{name} is not {d}x{d}")));
            }
        }
        if model.mu_indices.len() != d || model.x_indices.len() != d {
            return Err(Error::Format("EIM index lists do not match the rank".into()));
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Record {
    pub kernel: LocationKernel,
    pub model: EimRecord,
    pub magic_x: Vec<Num>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZRecord {
    Affine {
        terms: Vec<ParameterFunction>,
    },
    TwoStage {
        blocks: Vec<Stage1Record>,
        d: usize,
        variant: ZVariant,
        augmentation: Vec<NamedFunction>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub z: ZRecord,
    pub zeta: EimRecord,
    pub selected_mu: Vec<Vec<Num>>,
    pub hull_lo: Vec<Num>,
    pub hull_hi: Vec<Num>,
    pub requested_d_z: usize,
}

impl DecompositionRecord {
    pub fn from_decomposition(d: &NonintrusiveDecomposition) -> Result<Self> {
        if !d.z_builder.is_serializable() {
            return Err(Error::NotSerializable(
                "decomposition uses custom closures".into(),
            ));
        }
        let z = match &d.z_builder {
            ZBuilder::Affine { terms } => ZRecord::Affine { terms: terms.clone() },
            ZBuilder::TwoStage {
                blocks,
                d,
                variant,
                augmentation,
            } => ZRecord::TwoStage {
                blocks: blocks
                    .iter()
                    .map(|b| Stage1Record {
                        kernel: b.kernel.clone(),
                        model: EimRecord::from_model(&b.model),
                        magic_x: enc_r(&b.magic_x),
                    })
                    .collect(),
                d: *d,
                variant: *variant,
                augmentation: augmentation.clone(),
            },
        };
        Ok(Self {
            z,
            zeta: EimRecord::from_model(&d.zeta_model),
            selected_mu: d.selected_mu.iter().map(|p| enc_r(p.coords())).collect(),
            hull_lo: enc_r(&d.hull_lo),
            hull_hi: enc_r(&d.hull_hi),
            requested_d_z: d.requested_d_z,
        })
    }

    pub fn to_decomposition(&self, domain: &ParameterDomain) -> Result<NonintrusiveDecomposition> {
        let z_builder = match &self.z {
            ZRecord::Affine { terms } => ZBuilder::Affine { terms: terms.clone() },
            ZRecord::TwoStage {
                blocks,
                d,
                variant,
                augmentation,
            } => ZBuilder::TwoStage {
                blocks: blocks
                    .iter()
                    .map(|b| {
                        Ok(Stage1Block {
                            kernel: b.kernel.clone(),
                            model: b.model.to_model()?,
                            magic_x: dec_r(&b.magic_x)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                d: *d,
                variant: *variant,
                augmentation: augmentation.clone(),
            },
        };
        let zeta_model = self.zeta.to_model()?;
        if zeta_model.x_indices.iter().any(|&p| p >= z_builder.len()) {
            return Err(Error::Format("second-stage index outside the z-vector".into()));
        }
        Ok(NonintrusiveDecomposition {
            z_builder,
            zeta_model,
            selected_mu: points(domain, &self.selected_mu)?,
            hull_lo: dec_r(&self.hull_lo)?,
            hull_hi: dec_r(&self.hull_hi)?,
            requested_d_z: self.requested_d_z,
        })
    }
}

fn points(domain: &ParameterDomain, v: &[Vec<Num>]) -> Result<Vec<ParameterPoint>> {
    v.iter()
        .map(|p| domain.point(dec_r(p)?).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RbmRecord {
    pub projection: Projection,
    pub bound_evaluation: BoundEvaluation,
    pub snapshot_mus: Vec<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Vec<Vec<Cplx>>>,
    pub a_hat: Vec<Mat>,
    pub c_hat: Vec<Vec<Cplx>>,
    pub gram_aa: Vec<Vec<Mat>>,
    pub gram_ac: Vec<Vec<Vec<Cplx>>>,
    pub gram_cc: Mat,
    pub residual_factor: Mat,
    pub beta_lb: Num,
    pub ell_hat: Vec<Cplx>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch when training finished.
    pub created_unix: u64,
    pub d: usize,
    pub d_z: usize,
    pub d_rhs: usize,
    pub d_z_rhs: usize,
    pub n_hat: usize,
    pub beta_lb: Num,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decompositions {
    pub matrix: DecompositionRecord,
    pub rhs: DecompositionRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: ProblemConfig,
    pub decompositions: Decompositions,
    pub rbm: RbmRecord,
    pub provenance: Provenance,
}

fn stage1_rank(d: &NonintrusiveDecomposition) -> usize {
    match &d.z_builder {
        ZBuilder::Affine { terms } => terms.len(),
        ZBuilder::TwoStage { d, .. } => *d,
    }
}

impl ModelFile {
    pub fn new(config: &ProblemConfig, model: &ReducedBasisModel) -> Result<Self> {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let rbm = RbmRecord {
            projection: model.projection,
            bound_evaluation: model.bound_evaluation,
            snapshot_mus: model.snapshot_mus.iter().map(|p| enc_r(p.coords())).collect(),
            basis: model
                .basis
                .as_ref()
                .map(|b| b.iter().map(|u| enc_v(u)).collect()),
            a_hat: model.a_hat.iter().map(enc_m).collect(),
            c_hat: model.c_hat.iter().map(|v| enc_v(v)).collect(),
            gram_aa: model.gram_aa.iter().map(|r| r.iter().map(enc_m).collect()).collect(),
            gram_ac: model
                .gram_ac
                .iter()
                .map(|r| r.iter().map(|v| enc_v(v)).collect())
                .collect(),
            gram_cc: enc_m(&model.gram_cc),
            residual_factor: enc_m(model.residual_factor.matrix()),
            beta_lb: enc(model.beta_lb),
            ell_hat: enc_v(&model.ell_hat),
        };
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            decompositions: Decompositions {
                matrix: DecompositionRecord::from_decomposition(&model.matrix_decomp)?,
                rhs: DecompositionRecord::from_decomposition(&model.rhs_decomp)?,
            },
            rbm,
            provenance: Provenance {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: config.seed(),
                created_unix,
                d: stage1_rank(&model.matrix_decomp),
                d_z: model.d_z(),
                d_rhs: stage1_rank(&model.rhs_decomp),
                d_z_rhs: model.d_z_rhs(),
                n_hat: model.n_hat(),
                beta_lb: enc(model.beta_lb),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "unsupported format_version {v}, expected {FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Format("missing format_version".into())),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_model(&self) -> Result<ReducedBasisModel> {
        let domain = self.config.domain()?;
        let r = &self.rbm;
        let snapshot_mus = points(&domain, &r.snapshot_mus)?;
        let nh = snapshot_mus.len();
        let matrix_decomp = self.decompositions.matrix.to_decomposition(&domain)?;
        let rhs_decomp = self.decompositions.rhs.to_decomposition(&domain)?;
        let a_hat = r.a_hat.iter().map(|m| dec_m(m, nh)).collect::<Result<Vec<_>>>()?;
        let c_hat = r.c_hat.iter().map(|v| dec_v(v)).collect::<Result<Vec<_>>>()?;
        let gram_aa = r
            .gram_aa
            .iter()
            .map(|row| row.iter().map(|m| dec_m(m, nh)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let gram_ac = r
            .gram_ac
            .iter()
            .map(|row| row.iter().map(|v| dec_v(v)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let m_rhs = c_hat.len();
        let k = m_rhs + nh * a_hat.len();
        let online = OnlineOperators::new(&a_hat, &c_hat);
        let model = ReducedBasisModel {
            projection: r.projection,
            bound_evaluation: r.bound_evaluation,
            snapshot_mus,
            basis: r
                .basis
                .as_ref()
                .map(|b| b.iter().map(|u| dec_v(u)).collect::<Result<Vec<_>>>())
                .transpose()?,
            a_hat,
            c_hat,
            gram_aa,
            gram_ac,
            gram_cc: dec_m(&r.gram_cc, m_rhs)?,
            residual_factor: ResidualFactor::new(dec_m(&r.residual_factor, k)?),
            online,
            beta_lb: dec(&r.beta_lb)?,
            ell_hat: dec_v(&r.ell_hat)?,
            matrix_decomp,
            rhs_decomp,
            domain,
        };
        check_shapes(&model)?;
        Ok(model)
    }
}

fn check_shapes(m: &ReducedBasisModel) -> Result<()> {
    let nh = m.n_hat();
    let bad = |what: &str| Err(Error::Format(format!("inconsistent dimensions in {what}")));
    if m.a_hat.len() != m.matrix_decomp.d_z() || m.c_hat.len() != m.rhs_decomp.d_z() {
        return bad("reduced operator counts");
    }
    if m.a_hat.iter().any(|a| a.rows() != nh || a.cols() != nh) {
        return bad("a_hat");
    }
    if m.c_hat.iter().any(|c| c.len() != nh) || m.ell_hat.len() != nh {
        return bad("c_hat");
    }
    if m.residual_factor.matrix().cols() != m.c_hat.len() + nh * m.a_hat.len() {
        return bad("residual_factor");
    }
    if m.beta_lb.is_nan() || m.beta_lb <= 0.0 {
        return bad("beta_lb");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_encoding_round_trips_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 5e-324, 0.0, -0.0] {
            let s = enc(x);
            assert_eq!(dec(&s).unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert!(dec("1.0x").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x.json"), b"x").is_err());
    }

    #[test]
    fn version_is_checked() {
        assert!(matches!(ModelFile::from_json(r#"{"format_version": 99}"#), Err(Error::Format(_))));
        assert!(matches!(ModelFile::from_json("{}"), Err(Error::Format(_))));
    }
}
