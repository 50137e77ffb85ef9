//! Offline training and model checking, composed from the other modules.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ProblemConfig;
use crate::error::{Error, Result, Stage};
use crate::linalg::{dot_conj, norm2, smallest_singular_value, solve, sub, ComplexVector, ZERO};
use crate::model_file::{write_atomic, ModelFile};
use crate::nonintrusive::{decompose, validate_with_snapshots, OperatorSnapshots, ValidationReport};
use crate::problems::{ParameterDomain, ParameterPoint, ProblemProvider};
use crate::rbm::{greedy_offline, rebuild_basis, uq_samples, Distribution, GreedyTrace, ReducedBasisModel};

pub struct Trained {
    pub file: ModelFile,
    pub model: ReducedBasisModel,
    pub trace: GreedyTrace,
    pub validation: ValidationReport,
}

/// `k` points drawn uniformly from the box.
pub fn random_samples(domain: &ParameterDomain, k: usize, seed: u64) -> Result<Vec<ParameterPoint>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    uq_samples(domain, &vec![Distribution::Uniform; domain.dim()], k, seed)
}

pub fn train(cfg: &ProblemConfig) -> Result<Trained> {
    let provider = cfg.build_provider()?;
    train_with(cfg, provider.as_ref())
}

/// Decompositions, validation of the decompositions, then the greedy.
pub fn train_with(cfg: &ProblemConfig, provider: &dyn ProblemProvider) -> Result<Trained> {
    let trial = provider.domain().grid();
    log::info!("{}: n = {}, {} trial points", provider.name(), provider.n(), trial.len());

    let matrix = decompose(&provider.matrix_structure(), &trial, &cfg.decomposition)?;
    log::info!("matrix decomposition: d_z = {}", matrix.d_z());
    let rhs = decompose(&provider.rhs_structure(), &trial, &cfg.rhs_decomposition)?;
    log::info!("rhs decomposition: d_z = {}", rhs.d_z());
    let snaps = OperatorSnapshots::assemble(provider, &matrix, &rhs).map_err(|e| e.at(Stage::Decomposition))?;

    let samples = random_samples(provider.domain(), cfg.validation.samples, cfg.validation.seed)?;
    let validation = validate_with_snapshots(&matrix, &rhs, &snaps, provider, &samples)?;
    log::info!(
        "decomposition errors: matrix {:.3e}, rhs {:.3e}",
        validation.max_rel_err_matrix,
        validation.max_rel_err_rhs
    );

    let (model, trace) = greedy_offline(provider, &matrix, &rhs, &snaps, &trial, &cfg.greedy)?;
    let file = ModelFile::new(cfg, &model)?;
    Ok(Trained {
        file,
        model,
        trace,
        validation,
    })
}

/// Paths of the greedy trace and validation CSVs written next to a model file.
pub fn sidecar_paths(model_path: &Path) -> (PathBuf, PathBuf) {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = model_path.parent().unwrap_or(Path::new(""));
    (
        dir.join(format!("{stem}.trace.csv")),
        dir.join(format!("{stem}.validation.csv")),
    )
}

impl Trained {
    /// Writes the model file and its two CSV companions, each atomically.
    pub fn save(&self, model_path: &Path) -> Result<()> {
        let (trace, validation) = sidecar_paths(model_path);
        self.trace.save_csv(&trace)?;
        self.validation.save_csv(&validation)?;
        self.file.save(model_path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub mu: Vec<f64>,
    pub rel_err_matrix: f64,
    pub rel_err_rhs: f64,
    /// `‖U γ̂ − u_μ‖₂`.
    pub rb_error: f64,
    pub rb_rel_error: f64,
    pub error_bound: f64,
    pub qoi_error: f64,
    pub sigma_min: f64,
    /// Forward-error level `ε κ(A) ‖u‖` of the truth solve: smaller errors are not resolved.
    pub oracle_floor: f64,
    /// The centred inf-sup value is a valid lower bound at this μ.
    pub infsup_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub names: Vec<String>,
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let mut header = self.names.clone();
        header.extend(
            [
                "rel_err_matrix",
                "rel_err_rhs",
                "rb_error",
                "rb_rel_error",
                "error_bound",
                "qoi_error",
                "sigma_min",
                "oracle_floor",
                "infsup_ok",
            ]
            .map(String::from),
        );
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells: Vec<String> = r.mu.iter().map(|v| format!("{v:.17e}")).collect();
            for v in [
                r.rel_err_matrix,
                r.rel_err_rhs,
                r.rb_error,
                r.rb_rel_error,
                r.error_bound,
                r.qoi_error,
                r.sigma_min,
                r.oracle_floor,
            ] {
                cells.push(format!("{v:.6e}"));
            }
            cells.push(r.infsup_ok.to_string());
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(path, &buf)
    }

    /// Rows where the bound is valid by the inf-sup check but is exceeded by
    /// the true error, by more than the truth solve can resolve.
    pub fn violations(&self, rel_slack: f64) -> Vec<&CheckRow> {
        self.rows
            .iter()
            .filter(|r| r.infsup_ok && r.rb_error > r.error_bound * (1.0 + rel_slack) + r.oracle_floor)
            .collect()
    }
}

/// Truth-versus-reduced comparison at `samples`, including the decomposition errors.
pub fn check_model(
    model: &ReducedBasisModel,
    provider: &dyn ProblemProvider,
    samples: &[ParameterPoint],
) -> Result<CheckReport> {
    let basis = match &model.basis {
        Some(b) => b.clone(),
        None => rebuild_basis(provider, &model.snapshot_mus).map_err(|e| e.at(Stage::Validation))?,
    };
    if basis.len() != model.n_hat() {
        return Err(Error::Format("basis size does not match the model".into()).at(Stage::Validation));
    }
    let snaps = OperatorSnapshots::assemble(provider, &model.matrix_decomp, &model.rhs_decomp)
        .map_err(|e| e.at(Stage::Validation))?;
    let ell = provider.output_functional();
    let rows = samples
        .par_iter()
        .map(|mu| {
            let a = provider.assemble_matrix(mu)?;
            let c = provider.assemble_rhs(mu)?;
            let u = solve(&a, &c)?;
            let sol = model.online_solve(mu)?;
            let mut lifted: ComplexVector = vec![ZERO; u.len()];
            for (g, col) in sol.gamma_hat.iter().zip(&basis) {
                for (o, &x) in lifted.iter_mut().zip(col) {
                    *o += g * x;
                }
            }
            let rb_error = norm2(&sub(&lifted, &u));
            let qoi = dot_conj(ell, &u);
            let sigma_min = smallest_singular_value(&a)?;
            let oracle_floor = f64::EPSILON * a.frobenius_norm() / sigma_min * norm2(&u);
            let rel_err_matrix = snaps.matrix(&sol.beta).sub(&a).frobenius_norm() / a.frobenius_norm();
            let rel_err_rhs = norm2(&sub(&snaps.vector(&sol.beta_rhs), &c)) / norm2(&c);
            Ok(CheckRow {
                mu: mu.coords().to_vec(),
                rel_err_matrix,
                rel_err_rhs,
                rb_error,
                rb_rel_error: rb_error / norm2(&u),
                error_bound: sol.error_bound,
                qoi_error: (sol.qoi - qoi).norm(),
                sigma_min,
                oracle_floor,
                infsup_ok: sigma_min >= model.beta_lb,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at(Stage::Validation))?;
    Ok(CheckReport {
        names: model.domain.names().to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "name": "toy",
        "problem": {"kind": "affine_toy", "n": 40},
        "parameters": [{"name": "mu", "lo": 0.0, "hi": 1.0, "resolution": 21}],
        "greedy": {"n_max": 5, "tolerance": 1e-10},
        "validation": {"samples": 10, "seed": 3}
    }"#;

    #[test]
    fn toy_trains_and_checks() {
        let cfg = ProblemConfig::from_json(TOY).unwrap();
        let t = train(&cfg).unwrap();
        assert!(t.validation.max_rel_err_matrix <= 1e-13);
        assert!(t.model.n_hat() <= 3);
        let provider = cfg.build_provider().unwrap();
        let mut samples = random_samples(provider.domain(), 8, 11).unwrap();
        samples.extend(t.model.snapshot_mus.iter().cloned());
        let report = check_model(&t.model, provider.as_ref(), &samples).unwrap();
        assert!(report.violations(1e-6).is_empty());
        for r in &report.rows[8..] {
            assert!(r.rb_rel_error <= 1e-8, "{}", r.rb_rel_error);
        }
    }

    #[test]
    fn save_writes_all_three_files() {
        let cfg = ProblemConfig::from_json(TOY).unwrap();
        let t = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        t.save(&path).unwrap();
        let (trace, val) = sidecar_paths(&path);
        assert!(std::fs::read_to_string(trace).unwrap().starts_with("step,mu,max_bound,basis_size\n"));
        assert!(std::fs::read_to_string(val).unwrap().starts_with("mu,rel_err_matrix,rel_err_rhs\n"));
        let back = ModelFile::load(&path).unwrap().to_model().unwrap();
        let mu = back.domain.point(vec![0.37]).unwrap();
        assert_eq!(back.online_solve(&mu).unwrap().qoi, t.model.online_solve(&mu).unwrap().qoi);
    }

    #[test]
    fn empty_sample_list_gives_header_only() {
        let report = CheckReport {
            names: vec!["mu".into()],
            rows: Vec::new(),
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        assert!(random_samples(&ParameterDomain::new(vec!["a".into()], vec![0.0], vec![1.0], vec![2]).unwrap(), 0, 1)
            .unwrap()
            .is_empty());
    }
}
