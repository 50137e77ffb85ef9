//! The `train`, `validate` and `serve` workflows.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nirb_core::config::ProblemConfig;
use nirb_core::model_file::{write_atomic, ModelFile};
use nirb_core::pipeline::{check_model, random_samples, sidecar_paths, train, CheckReport};
use nirb_core::Error;

use crate::service::{router, AppState};

/// A failure together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl Failure {
    /// Unreadable or invalid input files.
    pub fn input(error: Error) -> Self {
        Self { code: 2, error }
    }

    pub fn run(error: Error) -> Self {
        Self { code: 1, error }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

/// Default output path: the config stem with a `.model.json` suffix, in the working directory.
pub fn default_model_path(config: &Path) -> PathBuf {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    PathBuf::from(format!("{stem}.model.json"))
}

pub fn cmd_train(config: &Path, out: Option<&Path>) -> Result<PathBuf, Failure> {
    let cfg = ProblemConfig::load(config).map_err(Failure::input)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_model_path(config));
    let t0 = std::time::Instant::now();
    let trained = train(&cfg).map_err(Failure::run)?;
    trained.save(&out).map_err(Failure::run)?;
    let (trace, validation) = sidecar_paths(&out);
    log::info!(
        "trained {} in {:.1} s: n̂ = {}, decomposition errors {:.2e} / {:.2e}",
        cfg.name,
        t0.elapsed().as_secs_f64(),
        trained.model.n_hat(),
        trained.validation.max_rel_err_matrix,
        trained.validation.max_rel_err_rhs
    );
    log::info!("wrote {}, {}, {}", out.display(), trace.display(), validation.display());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleSpec {
    /// Count from the config's validation section.
    Default,
    Random(usize),
    Grid,
}

pub fn cmd_validate(
    model_path: &Path,
    samples: SampleSpec,
    seed: Option<u64>,
    include_snapshots: bool,
) -> Result<CheckReport, Failure> {
    let file = ModelFile::load(model_path).map_err(Failure::input)?;
    let model = file.to_model().map_err(Failure::input)?;
    let provider = file.config.build_provider().map_err(Failure::input)?;
    let domain = provider.domain();
    let seed = seed.unwrap_or(file.config.validation.seed);
    let mut mus = match samples {
        SampleSpec::Default => random_samples(domain, file.config.validation.samples, seed),
        SampleSpec::Random(k) => random_samples(domain, k, seed),
        SampleSpec::Grid => Ok(domain.grid()),
    }
    .map_err(Failure::run)?;
    if include_snapshots {
        mus.extend(model.snapshot_mus.iter().cloned());
    }
    check_model(&model, provider.as_ref(), &mus).map_err(Failure::run)
}

pub fn write_report(report: &CheckReport, out: Option<&Path>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| Failure::run(e.into()))?;
    match out {
        Some(p) => write_atomic(p, &buf).map_err(Failure::run),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&buf).map_err(|e| Failure::run(e.into()))
        }
    }
}

/// Loads a model into the state shared by the HTTP handlers. Never assembles.
pub fn load_state(model_path: &Path, allow_extrapolation: bool) -> Result<AppState, Failure> {
    let file = ModelFile::load(model_path).map_err(Failure::input)?;
    let model = file.to_model().map_err(Failure::input)?;
    Ok(AppState {
        model: Arc::new(model),
        name: file.config.name.as_str().into(),
        allow_extrapolation,
    })
}

pub fn cmd_serve(model_path: &Path, bind: SocketAddr, allow_extrapolation: bool) -> Result<(), Failure> {
    let state = load_state(model_path, allow_extrapolation)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::run(e.into()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        log::info!("serving {} on http://{}", state.name, listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
    .map_err(|e| Failure::run(e.into()))
}
