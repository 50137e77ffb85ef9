//! The two-stage decomposition and the reduced model on the point-cloud kernel problem.

use std::sync::OnceLock;

use nirb_core::config::ProblemConfig;
use nirb_core::model_file::ModelFile;
use nirb_core::nonintrusive::{decompose, validate_decomposition, NonintrusiveDecomposition};
use nirb_core::pipeline::{random_samples, train, Trained};
use nirb_core::rbm::BoundEvaluation;
use nirb_core::ProblemProvider;

fn config(n_points: usize) -> ProblemConfig {
    ProblemConfig::from_json(&format!(
        r#"{{
        "name": "kernel-n{n_points}",
        "problem": {{"kind": "kernel", "n_points": {n_points}, "seed": 20240611, "prng": "splitmix64",
                     "wavenumber_index": 0, "impedance_indices": [1, 2, 3]}},
        "parameters": [
            {{"name": "mu0", "lo": 4.5, "hi": 10.0, "resolution": 40}},
            {{"name": "mu1", "lo": 1.0, "hi": 5.0, "resolution": 5}},
            {{"name": "mu2", "lo": 1.0, "hi": 5.0, "resolution": 5}},
            {{"name": "mu3", "lo": 1.0, "hi": 5.0, "resolution": 5}}
        ],
        "decomposition": {{"d": 13, "d_z": 20}},
        "rhs_decomposition": {{"d": 13, "d_z": 13}},
        "greedy": {{"n_max": 12, "tolerance": 1e-8}},
        "validation": {{"samples": 20, "seed": 7}}
    }}"#
    ))
    .unwrap()
}

struct Decomposed {
    provider: Box<dyn ProblemProvider>,
    matrix: NonintrusiveDecomposition,
    rhs: NonintrusiveDecomposition,
}

fn n50() -> &'static Decomposed {
    static D: OnceLock<Decomposed> = OnceLock::new();
    D.get_or_init(|| {
        let cfg = config(50);
        let provider = cfg.build_provider().unwrap();
        let trial = provider.domain().grid();
        let matrix = decompose(&provider.matrix_structure(), &trial, &cfg.decomposition).unwrap();
        let rhs = decompose(&provider.rhs_structure(), &trial, &cfg.rhs_decomposition).unwrap();
        Decomposed { provider, matrix, rhs }
    })
}

fn trained_n50() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| train(&config(50)).unwrap())
}

#[test]
fn decomposition_meets_tolerance_on_random_parameters() {
    let d = n50();
    let samples = random_samples(d.provider.domain(), 200, 42).unwrap();
    let report = validate_decomposition(&d.matrix, &d.rhs, d.provider.as_ref(), &samples).unwrap();
    assert!(report.max_rel_err_matrix <= 1e-8, "matrix {:e}", report.max_rel_err_matrix);
    assert!(report.max_rel_err_rhs <= 1e-8, "rhs {:e}", report.max_rel_err_rhs);
    // Thirteen wavenumber blocks and six impedance ratios.
    assert_eq!(d.matrix.d_z(), 19);
    assert_eq!(d.rhs.d_z(), 13);
}

#[test]
fn selected_parameters_are_reproduced() {
    let d = n50();
    for dec in [&d.matrix, &d.rhs] {
        let report = validate_decomposition(&d.matrix, &d.rhs, d.provider.as_ref(), &dec.selected_mu).unwrap();
        let err = if std::ptr::eq(dec, &d.matrix) {
            report.max_rel_err_matrix
        } else {
            report.max_rel_err_rhs
        };
        assert!(err <= 1e-11, "{err:e}");
    }
}

#[test]
fn beta_at_the_centre_is_moderate() {
    let d = n50();
    let centre = d.provider.domain().center();
    for dec in [&d.matrix, &d.rhs] {
        let eval = dec.beta_eval(&centre);
        assert!(!eval.extrapolated);
        let big = eval.beta.iter().map(|b| b.norm()).fold(0.0, f64::max);
        assert!(big.is_finite() && big <= 1e3, "max |β| = {big:e}");
    }
}

#[test]
fn model_file_round_trip_is_exact() {
    let t = trained_n50();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kernel.json");
    t.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let file = ModelFile::from_json(&text).unwrap();
    assert_eq!(file.to_json().unwrap(), text);
    let back = file.to_model().unwrap();
    for mu in random_samples(&back.domain, 20, 5).unwrap() {
        let (a, b) = (t.model.online_solve(&mu).unwrap(), back.online_solve(&mu).unwrap());
        assert_eq!((a.qoi, a.error_bound, a.gamma_hat), (b.qoi, b.error_bound, b.gamma_hat));
    }
}

#[test]
fn factored_and_expanded_bounds_agree_where_resolvable() {
    let t = trained_n50();
    let mut expanded = t.model.clone();
    expanded.bound_evaluation = BoundEvaluation::Expanded;
    for mu in random_samples(&t.model.domain, 30, 8).unwrap() {
        let f = t.model.online_solve(&mu).unwrap().error_bound;
        let e = expanded.online_solve(&mu).unwrap().error_bound;
        // The expanded form loses half the digits; compare only well above its floor.
        if f > 1e-5 {
            assert!((f - e).abs() <= 1e-4 * f, "{f:e} vs {e:e}");
        }
    }
}

#[test]
fn greedy_bound_decreases_overall() {
    let t = trained_n50();
    let bounds: Vec<f64> = t.trace.rows.iter().map(|s| s.max_bound).collect();
    assert!(bounds.len() >= 2);
    assert!(bounds.last().unwrap() < &(bounds[0] * 0.1), "{bounds:?}");
    assert_eq!(t.model.n_hat(), t.trace.rows.len());
}
