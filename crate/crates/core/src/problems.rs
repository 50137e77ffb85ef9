//! Parametrized problem contract and the two built-in problems.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, sub, ComplexMatrix, ComplexVector, Lu, C64};

/// A coefficient function of the parameter vector.
pub type ThetaFn = Arc<dyn Fn(&[f64]) -> C64 + Send + Sync>;
/// A coefficient function of the active parameters and a spatial coordinate.
pub type FieldFn = Arc<dyn Fn(&[f64], f64) -> C64 + Send + Sync>;

/// Identifier of the PRNG used for point clouds, recorded in config files.
pub const PRNG_ID: &str = "splitmix64";

/// A parameter value together with the coordinate names of its domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterPoint {
    names: Arc<[String]>,
    coords: Vec<f64>,
}

impl ParameterPoint {
    pub fn new(names: Arc<[String]>, coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || names.len() != coords.len() {
            return Err(Error::LengthMismatch {
                expected: names.len().max(1),
                found: coords.len(),
            });
        }
        Ok(Self { names, coords })
    }

    /// Point with generated names `mu0, mu1, ..`.
    pub fn anonymous(coords: Vec<f64>) -> Self {
        let names: Arc<[String]> = (0..coords.len()).map(|i| format!("mu{i}")).collect();
        Self { names, coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.coords[i]
    }

    pub fn with_coord(&self, i: usize, v: f64) -> Self {
        let mut p = self.clone();
        p.coords[i] = v;
        p
    }
}

impl fmt::Display for ParameterPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .names
            .iter()
            .zip(&self.coords)
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Box-shaped parameter domain with a Cartesian trial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterDomain {
    names: Arc<[String]>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    resolution: Vec<usize>,
}

impl ParameterDomain {
    pub fn new(names: Vec<String>, lo: Vec<f64>, hi: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::InvalidInput("parameter domain needs at least one coordinate".into()));
        }
        for len in [lo.len(), hi.len(), resolution.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, found: len });
            }
        }
        for i in 0..n {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(Error::InvalidInput(format!(
                    "bounds of {} must satisfy lo < hi, got [{}, {}]",
                    names[i], lo[i], hi[i]
                )));
            }
            if resolution[i] < 2 {
                return Err(Error::InvalidInput(format!(
                    "resolution of {} must be >= 2 to include both endpoints",
                    names[i]
                )));
            }
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::InvalidInput(format!("duplicate parameter name {a:?}")));
            }
        }
        Ok(Self {
            names: names.into(),
            lo,
            hi,
            resolution,
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn names_arc(&self) -> Arc<[String]> {
        Arc::clone(&self.names)
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn grid_size(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Equispaced trial values of coordinate `i`, endpoints included.
    pub fn axis(&self, i: usize) -> Vec<f64> {
        linspace(self.lo[i], self.hi[i], self.resolution[i])
    }

    /// Cartesian trial grid, first coordinate varying slowest.
    pub fn grid(&self) -> Vec<ParameterPoint> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|i| self.axis(i)).collect();
        let total = self.grid_size();
        let mut out = Vec::with_capacity(total);
        for mut flat in 0..total {
            let mut coords = vec![0.0; self.dim()];
            for i in (0..self.dim()).rev() {
                coords[i] = axes[i][flat % self.resolution[i]];
                flat /= self.resolution[i];
            }
            out.push(ParameterPoint {
                names: self.names_arc(),
                coords,
            });
        }
        out
    }

    pub fn center(&self) -> ParameterPoint {
        ParameterPoint {
            names: self.names_arc(),
            coords: self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }

    pub fn point(&self, coords: Vec<f64>) -> Result<ParameterPoint> {
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        ParameterPoint::new(self.names_arc(), coords)
    }

    pub fn contains(&self, mu: &ParameterPoint) -> bool {
        self.check(mu).is_ok()
    }

    pub fn check(&self, mu: &ParameterPoint) -> Result<()> {
        if mu.dim() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                found: mu.dim(),
            });
        }
        for i in 0..self.dim() {
            let v = mu.coords[i];
            if !(v >= self.lo[i] && v <= self.hi[i]) {
                return Err(Error::OutOfDomain {
                    name: self.names[i].clone(),
                    value: v,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }

    /// Builds a point from named values. Every name must be known and present once.
    pub fn from_named<'a>(&self, values: impl IntoIterator<Item = (&'a str, f64)>) -> Result<ParameterPoint> {
        let mut coords: Vec<Option<f64>> = vec![None; self.dim()];
        for (name, v) in values {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if coords[i].replace(v).is_some() {
                return Err(Error::InvalidInput(format!("parameter {name:?} given twice")));
            }
        }
        let coords = coords
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::InvalidInput(format!("missing parameter {:?}", self.names[i]))))
            .collect::<Result<Vec<_>>>()?;
        self.point(coords)
    }

    /// Trial grid projected onto the listed coordinates, others held at the centre.
    pub fn projected_grid(&self, active: &[usize]) -> Vec<ParameterPoint> {
        let center = self.center();
        let mut out: Vec<ParameterPoint> = vec![center];
        for &i in active {
            let axis = self.axis(i);
            out = out
                .iter()
                .flat_map(|p| axis.iter().map(move |&v| p.with_coord(i, v)))
                .collect();
        }
        out
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..n)
            .map(|k| {
                if k == n - 1 {
                    b
                } else {
                    a + (b - a) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Analytic scalar function of the parameter.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParameterFunction {
    Constant { re: f64, im: f64 },
    Coordinate { index: usize },
    /// `μ_num / μ_den`.
    Ratio { num: usize, den: usize },
    #[serde(skip)]
    Custom(ThetaFn),
}

impl ParameterFunction {
    pub fn constant(v: f64) -> Self {
        ParameterFunction::Constant { re: v, im: 0.0 }
    }

    pub fn eval(&self, mu: &[f64]) -> C64 {
        match self {
            ParameterFunction::Constant { re, im } => C64::new(*re, *im),
            ParameterFunction::Coordinate { index } => C64::new(mu[*index], 0.0),
            ParameterFunction::Ratio { num, den } => C64::new(mu[*num] / mu[*den], 0.0),
            ParameterFunction::Custom(f) => f(mu),
        }
    }

    pub fn is_serializable(&self) -> bool {
        !matches!(self, ParameterFunction::Custom(_))
    }
}

impl fmt::Debug for ParameterFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParameterFunction::Constant { re, im } => write!(f, "Constant({re}{im:+}i)"),
            ParameterFunction::Coordinate { index } => write!(f, "Coordinate({index})"),
            ParameterFunction::Ratio { num, den } => write!(f, "Ratio({num}/{den})"),
            ParameterFunction::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedFunction {
    pub name: String,
    pub function: ParameterFunction,
}

impl NamedFunction {
    pub fn new(name: impl Into<String>, function: ParameterFunction) -> Self {
        Self {
            name: name.into(),
            function,
        }
    }
}

/// Scalar function of a parameter and one real location coordinate.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFunction {
    /// `exp(i · scale · μ_coord · x)`.
    ExpPhase { coord: usize, scale: f64 },
    #[serde(skip)]
    Custom {
        active: Vec<usize>,
        f: FieldFn,
    },
}

impl KernelFunction {
    pub fn eval(&self, mu: &[f64], x: f64) -> C64 {
        match self {
            KernelFunction::ExpPhase { coord, scale } => C64::cis(scale * mu[*coord] * x),
            KernelFunction::Custom { f, .. } => f(mu, x),
        }
    }

    /// Parameter coordinates the function depends on.
    pub fn active_coords(&self) -> Vec<usize> {
        match self {
            KernelFunction::ExpPhase { coord, .. } => vec![*coord],
            KernelFunction::Custom { active, .. } => active.clone(),
        }
    }

    pub fn is_serializable(&self) -> bool {
        !matches!(self, KernelFunction::Custom { .. })
    }
}

impl fmt::Debug for KernelFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelFunction::ExpPhase { coord, scale } => write!(f, "ExpPhase(coord {coord}, scale {scale})"),
            KernelFunction::Custom { active, .. } => write!(f, "Custom(active {active:?})"),
        }
    }
}

/// A kernel sampled on an equispaced location grid for first-stage interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocationKernel {
    pub name: String,
    pub function: KernelFunction,
    pub x_lo: f64,
    pub x_hi: f64,
    pub x_count: usize,
}

impl LocationKernel {
    pub fn locations(&self) -> Vec<f64> {
        linspace(self.x_lo, self.x_hi, self.x_count)
    }
}

/// How an operator depends on the parameter, as far as the decomposition needs to know.
#[derive(Clone, Debug)]
pub enum OperatorStructure {
    /// `Q(μ) = Σ_s g_s(μ) Q_s` with known scalar coefficients.
    Affine { terms: Vec<ParameterFunction> },
    /// Entries built from location kernels, plus analytic augmentation terms.
    Kernel {
        kernels: Vec<LocationKernel>,
        augmentation: Vec<NamedFunction>,
    },
}

/// Black-box assembler `μ ↦ (A_μ, C_μ)`.
pub trait ProblemProvider: Send + Sync {
    fn name(&self) -> &str;
    fn n(&self) -> usize;
    fn domain(&self) -> &ParameterDomain;
    fn assemble_matrix(&self, mu: &ParameterPoint) -> Result<ComplexMatrix>;
    fn assemble_rhs(&self, mu: &ParameterPoint) -> Result<ComplexVector>;
    /// `ℓ` with `QoI = ℓᴴ u`.
    fn output_functional(&self) -> &[C64];
    fn scalar_features(&self) -> Vec<NamedFunction> {
        Vec::new()
    }
    fn matrix_structure(&self) -> OperatorStructure;
    fn rhs_structure(&self) -> OperatorStructure;
}

fn check_dim(domain: &ParameterDomain, mu: &ParameterPoint) -> Result<()> {
    if mu.dim() != domain.dim() {
        return Err(Error::LengthMismatch {
            expected: domain.dim(),
            found: mu.dim(),
        });
    }
    if let Some(i) = mu.coords().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(())
}

/// `A_μ = A_0 + Σ_k μ_k A_k` with a 1-D stiffness analog and diagonal mass analogs.
pub struct AffineToy {
    n: usize,
    domain: ParameterDomain,
    a0: ComplexMatrix,
    masses: Vec<Vec<f64>>,
    rhs: ComplexVector,
    ell: ComplexVector,
}

/// Scale of the mass analogs relative to `h`.
pub const TOY_MASS_SCALE: f64 = 0.1;

pub fn affine_toy_provider(n: usize, domain: ParameterDomain) -> Result<AffineToy> {
    if n < 2 {
        return Err(Error::InvalidInput("affine toy needs n >= 2".into()));
    }
    let h = 1.0 / n as f64;
    let a0 = ComplexMatrix::from_fn(n, n, |i, j| {
        let v = if i == j {
            2.0
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        };
        C64::new(v / h, 0.0)
    });
    let masses = (0..domain.dim())
        .map(|k| {
            (0..n)
                .map(|i| {
                    let t = std::f64::consts::TAU * ((k + 1) * (i + 1)) as f64 / n as f64;
                    TOY_MASS_SCALE * h * (1.0 + 0.5 * t.cos())
                })
                .collect()
        })
        .collect();
    Ok(AffineToy {
        n,
        domain,
        a0,
        masses,
        rhs: vec![C64::new(h, 0.0); n],
        ell: vec![C64::new(1.0 / n as f64, 0.0); n],
    })
}

impl ProblemProvider for AffineToy {
    fn name(&self) -> &str {
        "affine_toy"
    }

    fn n(&self) -> usize {
        self.n
    }

    fn domain(&self) -> &ParameterDomain {
        &self.domain
    }

    fn assemble_matrix(&self, mu: &ParameterPoint) -> Result<ComplexMatrix> {
        check_dim(&self.domain, mu)?;
        let mut a = self.a0.clone();
        for (k, m) in self.masses.iter().enumerate() {
            for (i, &v) in m.iter().enumerate() {
                a[(i, i)] += C64::new(mu.get(k) * v, 0.0);
            }
        }
        Ok(a)
    }

    fn assemble_rhs(&self, mu: &ParameterPoint) -> Result<ComplexVector> {
        check_dim(&self.domain, mu)?;
        Ok(self.rhs.clone())
    }

    fn output_functional(&self) -> &[C64] {
        &self.ell
    }

    fn matrix_structure(&self) -> OperatorStructure {
        let mut terms = vec![ParameterFunction::constant(1.0)];
        terms.extend((0..self.domain.dim()).map(|index| ParameterFunction::Coordinate { index }));
        OperatorStructure::Affine { terms }
    }

    fn rhs_structure(&self) -> OperatorStructure {
        OperatorStructure::Affine {
            terms: vec![ParameterFunction::constant(1.0)],
        }
    }
}

/// Point cloud on the unit sphere with quadrature weights and three zones.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelProblemConfig {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    /// Zone label in `1..=3` per point.
    pub zones: Vec<u8>,
    pub wavenumber_index: usize,
    pub impedance_indices: [usize; 3],
    /// Unit direction of the incident plane wave.
    pub direction: [f64; 3],
}

impl KernelProblemConfig {
    /// `n` points drawn uniformly on the sphere, equal weights `4π/n`, and zones
    /// given by latitude bands of equal point count.
    pub fn random_sphere(n: usize, seed: u64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidInput("a three-zone cloud needs at least 3 points".into()));
        }
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).max(0.0).sqrt();
                [s * phi.cos(), s * phi.sin(), z]
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points[a][2].total_cmp(&points[b][2]).then(a.cmp(&b)));
        let mut zones = vec![0u8; n];
        for (rank, &i) in order.iter().enumerate() {
            zones[i] = (1 + 3 * rank / n) as u8;
        }
        for z in 1..=3u8 {
            if !zones.contains(&z) {
                return Err(Error::InvalidInput(format!("zone {z} is empty")));
            }
        }
        Ok(Self {
            points,
            weights: vec![4.0 * std::f64::consts::PI / n as f64; n],
            zones,
            wavenumber_index: 0,
            impedance_indices: [1, 2, 3],
            direction: [0.0, 0.0, 1.0],
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        for len in [self.weights.len(), self.zones.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, found: len });
            }
        }
        if let Some(i) = self.weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput(format!("weight {i} must be positive")));
        }
        if let Some(i) = self.zones.iter().position(|z| !(1..=3).contains(z)) {
            return Err(Error::InvalidInput(format!("zone label of point {i} not in 1..=3")));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite point coordinate".into()));
        }
        Ok(())
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Green-kernel point-cloud problem.
pub struct KernelProblem {
    cfg: KernelProblemConfig,
    domain: ParameterDomain,
    /// Strict upper triangle, row by row.
    distances: Vec<f64>,
    projections: Vec<f64>,
    ell: ComplexVector,
    r_max: f64,
}

/// Number of location samples used for first-stage kernel interpolation.
pub const KERNEL_LOCATION_SAMPLES: usize = 500;

pub fn kernel_provider(cfg: KernelProblemConfig, domain: ParameterDomain) -> Result<KernelProblem> {
    cfg.validate()?;
    let used = std::iter::once(cfg.wavenumber_index).chain(cfg.impedance_indices);
    for i in used {
        if i >= domain.dim() {
            return Err(Error::InvalidInput(format!(
                "parameter index {i} outside a {}-dimensional domain",
                domain.dim()
            )));
        }
    }
    for i in 0..domain.dim() {
        if domain.lo()[i] <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "kernel parameters must be positive, {} has lower bound {}",
                domain.names()[i],
                domain.lo()[i]
            )));
        }
    }
    let n = cfg.points.len();
    let mut distances = Vec::with_capacity(n * (n - 1) / 2);
    let mut r_max: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let r = distance(&cfg.points[i], &cfg.points[j]);
            if r == 0.0 {
                return Err(Error::ZeroDistance(i, j));
            }
            r_max = r_max.max(r);
            distances.push(r);
        }
    }
    let d = cfg.direction;
    let projections: Vec<f64> = cfg
        .points
        .iter()
        .map(|x| d[0] * x[0] + d[1] * x[1] + d[2] * x[2])
        .collect();
    let k_ref = domain.center().get(cfg.wavenumber_index);
    // ℓ_i = w_i exp(-i k* d'·x_i) with d' = -d.
    let ell = cfg
        .weights
        .iter()
        .zip(&projections)
        .map(|(&w, &p)| w * C64::cis(k_ref * p))
        .collect();
    Ok(KernelProblem {
        cfg,
        domain,
        distances,
        projections,
        ell,
        r_max,
    })
}

impl KernelProblem {
    pub fn config(&self) -> &KernelProblemConfig {
        &self.cfg
    }

    fn check(&self, mu: &ParameterPoint) -> Result<()> {
        check_dim(&self.domain, mu)?;
        if let Some(i) = mu.coords().iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel parameter {} must be positive, got {}",
                mu.names()[i],
                mu.get(i)
            )));
        }
        Ok(())
    }
}

impl ProblemProvider for KernelProblem {
    fn name(&self) -> &str {
        "kernel"
    }

    fn n(&self) -> usize {
        self.cfg.points.len()
    }

    fn domain(&self) -> &ParameterDomain {
        &self.domain
    }

    fn assemble_matrix(&self, mu: &ParameterPoint) -> Result<ComplexMatrix> {
        self.check(mu)?;
        let n = self.n();
        let k = mu.get(self.cfg.wavenumber_index);
        let w = &self.cfg.weights;
        let four_pi = 4.0 * std::f64::consts::PI;
        let mut a = ComplexMatrix::zeros(n, n);
        let mut idx = 0;
        for i in 0..n {
            let z = mu.get(self.cfg.impedance_indices[(self.cfg.zones[i] - 1) as usize]);
            a[(i, i)] = w[i] * C64::new(1.0, k / z + z / k);
            for j in i + 1..n {
                let r = self.distances[idx];
                idx += 1;
                let v = C64::cis(k * r) * (w[i] * w[j] / (four_pi * r));
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        Ok(a)
    }

    fn assemble_rhs(&self, mu: &ParameterPoint) -> Result<ComplexVector> {
        self.check(mu)?;
        let k = mu.get(self.cfg.wavenumber_index);
        Ok(self
            .cfg
            .weights
            .iter()
            .zip(&self.projections)
            .map(|(&w, &p)| w * C64::cis(k * p))
            .collect())
    }

    fn output_functional(&self) -> &[C64] {
        &self.ell
    }

    fn scalar_features(&self) -> Vec<NamedFunction> {
        let w = self.cfg.wavenumber_index;
        self.cfg
            .impedance_indices
            .iter()
            .enumerate()
            .flat_map(|(k, &z)| {
                [
                    NamedFunction::new(format!("w_over_z{}", k + 1), ParameterFunction::Ratio { num: w, den: z }),
                    NamedFunction::new(format!("z{}_over_w", k + 1), ParameterFunction::Ratio { num: z, den: w }),
                ]
            })
            .collect()
    }

    fn matrix_structure(&self) -> OperatorStructure {
        // r = 0 is included so that the constant part of the diagonal, g(μ, 0) = 1,
        // lies in the span of the first-stage interpolant.
        OperatorStructure::Kernel {
            kernels: vec![LocationKernel {
                name: "exp_phase_distance".into(),
                function: KernelFunction::ExpPhase {
                    coord: self.cfg.wavenumber_index,
                    scale: 1.0,
                },
                x_lo: 0.0,
                x_hi: self.r_max,
                x_count: KERNEL_LOCATION_SAMPLES,
            }],
            augmentation: self.scalar_features(),
        }
    }

    fn rhs_structure(&self) -> OperatorStructure {
        let lo = self.projections.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.projections.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        OperatorStructure::Kernel {
            kernels: vec![LocationKernel {
                name: "exp_phase_projection".into(),
                function: KernelFunction::ExpPhase {
                    coord: self.cfg.wavenumber_index,
                    scale: 1.0,
                },
                x_lo: lo,
                x_hi: hi,
                x_count: KERNEL_LOCATION_SAMPLES,
            }],
            augmentation: Vec::new(),
        }
    }
}

/// Dense LU truth solve of `A_μ U = C_μ`.
pub fn truth_solve(provider: &dyn ProblemProvider, mu: &ParameterPoint) -> Result<ComplexVector> {
    let a = provider.assemble_matrix(mu)?;
    let c = provider.assemble_rhs(mu)?;
    Ok(Lu::new(&a)?.solve(&c))
}

/// `‖A u − C‖₂ / ‖C‖₂`.
pub fn relative_residual(a: &ComplexMatrix, u: &[C64], c: &[C64]) -> f64 {
    let r = sub(&a.matvec(u), c);
    let nc = norm2(c);
    if nc == 0.0 {
        norm2(&r)
    } else {
        norm2(&r) / nc
    }
}

/// `Σ α_i |J_i|² + h`.
pub fn cost_function_eval(qoi_values: &[C64], weights: &[f64], penalty: f64) -> Result<f64> {
    if qoi_values.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            found: qoi_values.len(),
        });
    }
    let s: f64 = qoi_values.iter().zip(weights).map(|(q, a)| a * q.norm_sqr()).sum();
    let v = s + penalty;
    if !v.is_finite() {
        return Err(Error::InvalidInput("cost function is not finite".into()));
    }
    Ok(v)
}

/// Treatment-cost penalty on the three impedance coefficients.
pub fn impedance_penalty(mu1: f64, mu2: f64, mu3: f64) -> f64 {
    (0.2 * mu1.powf(-0.5) + 0.3 * mu2.powf(-0.8) + 0.5 / mu3) / 6.0 - 8.0
}

/// Frequency weights for a 20-frequency scan: 2 for the first seven, 1 for
/// the next six, 3 for the rest.
pub fn default_frequency_weights(count: usize) -> Vec<f64> {
    (1..=count)
        .map(|i| match i {
            1..=7 => 2.0,
            8..=13 => 1.0,
            _ => 3.0,
        })
        .collect()
}

/// Provider wrapper counting assembly calls.
pub struct CountingProvider<P> {
    inner: P,
    matrix_calls: AtomicUsize,
    rhs_calls: AtomicUsize,
}

impl<P: ProblemProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            matrix_calls: AtomicUsize::new(0),
            rhs_calls: AtomicUsize::new(0),
        }
    }

    pub fn matrix_calls(&self) -> usize {
        self.matrix_calls.load(Ordering::SeqCst)
    }

    pub fn rhs_calls(&self) -> usize {
        self.rhs_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.matrix_calls() + self.rhs_calls()
    }

    pub fn reset(&self) {
        self.matrix_calls.store(0, Ordering::SeqCst);
        self.rhs_calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: ProblemProvider + ?Sized> ProblemProvider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn n(&self) -> usize {
        (**self).n()
    }

    fn domain(&self) -> &ParameterDomain {
        (**self).domain()
    }

    fn assemble_matrix(&self, mu: &ParameterPoint) -> Result<ComplexMatrix> {
        (**self).assemble_matrix(mu)
    }

    fn assemble_rhs(&self, mu: &ParameterPoint) -> Result<ComplexVector> {
        (**self).assemble_rhs(mu)
    }

    fn output_functional(&self) -> &[C64] {
        (**self).output_functional()
    }

    fn scalar_features(&self) -> Vec<NamedFunction> {
        (**self).scalar_features()
    }

    fn matrix_structure(&self) -> OperatorStructure {
        (**self).matrix_structure()
    }

    fn rhs_structure(&self) -> OperatorStructure {
        (**self).rhs_structure()
    }
}

impl<P: ProblemProvider> ProblemProvider for CountingProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn domain(&self) -> &ParameterDomain {
        self.inner.domain()
    }

    fn assemble_matrix(&self, mu: &ParameterPoint) -> Result<ComplexMatrix> {
        self.matrix_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.assemble_matrix(mu)
    }

    fn assemble_rhs(&self, mu: &ParameterPoint) -> Result<ComplexVector> {
        self.rhs_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.assemble_rhs(mu)
    }

    fn output_functional(&self) -> &[C64] {
        self.inner.output_functional()
    }

    fn scalar_features(&self) -> Vec<NamedFunction> {
        self.inner.scalar_features()
    }

    fn matrix_structure(&self) -> OperatorStructure {
        self.inner.matrix_structure()
    }

    fn rhs_structure(&self) -> OperatorStructure {
        self.inner.rhs_structure()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ONE;
    use proptest::prelude::*;

    fn toy_domain(dim: usize) -> ParameterDomain {
        ParameterDomain::new(
            (0..dim).map(|i| format!("mu{i}")).collect(),
            vec![0.0; dim],
            vec![1.0; dim],
            vec![11; dim],
        )
        .unwrap()
    }

    fn kernel_domain() -> ParameterDomain {
        ParameterDomain::new(
            vec!["k".into(), "z1".into(), "z2".into(), "z3".into()],
            vec![6.8, 1.0, 1.0, 1.0],
            vec![15.1, 5.0, 5.0, 5.0],
            vec![5, 3, 3, 3],
        )
        .unwrap()
    }

    fn at(d: &ParameterDomain, c: &[f64]) -> ParameterPoint {
        d.point(c.to_vec()).unwrap()
    }

    /// Plain Gaussian elimination without pivoting, used as an independent solver.
    fn gauss_oracle(a: &ComplexMatrix, b: &[C64]) -> Vec<C64> {
        let n = a.rows();
        let mut m: Vec<Vec<C64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            })
            .collect();
        for k in 0..n {
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                let (top, rest) = m.split_at_mut(i);
                for (x, t) in rest[0][k..=n].iter_mut().zip(&top[k][k..=n]) {
                    *x -= f * t;
                }
            }
        }
        let mut x = vec![C64::new(0.0, 0.0); n];
        for i in (0..n).rev() {
            let s: C64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
            x[i] = (m[i][n] - s) / m[i][i];
        }
        x
    }

    #[test]
    fn toy_is_exactly_affine() {
        let d = toy_domain(1);
        let p = affine_toy_provider(8, d.clone()).unwrap();
        let a0 = p.assemble_matrix(&at(&d, &[0.0])).unwrap();
        let a1 = p.assemble_matrix(&at(&d, &[1.0])).unwrap();
        let ah = p.assemble_matrix(&at(&d, &[0.5])).unwrap();
        let a2 = p.assemble_matrix(&at(&d, &[2.0])).unwrap();
        let mid = a0.clone().scale(C64::new(0.5, 0.0));
        let mut mid = mid;
        mid.axpy(C64::new(0.5, 0.0), &a1);
        assert!(ah.sub(&mid).max_abs() < 1e-14 * ah.max_abs());
        let mut second = a2.clone();
        second.axpy(C64::new(-2.0, 0.0), &a1);
        second.axpy(ONE, &a0);
        assert!(second.max_abs() < 1e-13 * a2.max_abs());
        assert_eq!(a0[(0, 0)], C64::new(16.0, 0.0));
        assert_eq!(a0[(0, 1)], C64::new(-8.0, 0.0));
    }

    proptest! {
        #[test]
        fn toy_barycentric_identity(m1 in 0.0..1.0f64, gap in 0.05..1.0f64, mu in -1.0..2.0f64) {
            let d = toy_domain(1);
            let p = affine_toy_provider(12, d.clone()).unwrap();
            let m2 = m1 + gap;
            let a = |v: f64| p.assemble_matrix(&at(&d, &[v])).unwrap();
            let mut rec = a(m1).scale(C64::new((m2 - mu) / gap, 0.0));
            rec.axpy(C64::new((mu - m1) / gap, 0.0), &a(m2));
            let exact = a(mu);
            prop_assert!(rec.sub(&exact).frobenius_norm() <= 1e-14 * exact.frobenius_norm().max(1.0) * 10.0);
        }
    }

    #[test]
    fn antipodal_pair_entry() {
        let cfg = KernelProblemConfig {
            points: vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            weights: vec![1.0, 1.0],
            zones: vec![1, 2],
            wavenumber_index: 0,
            impedance_indices: [1, 2, 3],
            direction: [0.0, 0.0, 1.0],
        };
        let d = ParameterDomain::new(
            vec!["k".into(), "z1".into(), "z2".into(), "z3".into()],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![4.0, 2.0, 2.0, 2.0],
            vec![2, 2, 2, 2],
        )
        .unwrap();
        let p = kernel_provider(cfg, d.clone()).unwrap();
        let a = p.assemble_matrix(&at(&d, &[std::f64::consts::PI, 1.0, 1.0, 1.0])).unwrap();
        let expect = 1.0 / (8.0 * std::f64::consts::PI);
        assert!((a[(0, 1)] - C64::new(expect, 0.0)).norm() < 1e-15);
        assert!((expect - 0.039789).abs() < 1e-6);
        // diagonal: 1 + i(π/1 + 1/π)
        let pi = std::f64::consts::PI;
        assert!((a[(0, 0)] - C64::new(1.0, pi + 1.0 / pi)).norm() < 1e-15);
    }

    #[test]
    fn coincident_points_rejected() {
        let cfg = KernelProblemConfig {
            points: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
            weights: vec![1.0; 3],
            zones: vec![1, 2, 3],
            wavenumber_index: 0,
            impedance_indices: [1, 2, 3],
            direction: [0.0, 0.0, 1.0],
        };
        assert!(matches!(kernel_provider(cfg, kernel_domain()), Err(Error::ZeroDistance(0, 2))));
    }

    #[test]
    fn kernel_matrix_structure() {
        let d = kernel_domain();
        let cfg = KernelProblemConfig::random_sphere(40, 3).unwrap();
        assert!(cfg.zones.iter().all(|z| (1..=3).contains(z)));
        let p = kernel_provider(cfg, d.clone()).unwrap();
        let mu = at(&d, &[9.0, 1.5, 2.5, 4.0]);
        let a = p.assemble_matrix(&mu).unwrap();
        assert_eq!(a, a.transpose());
        assert_eq!(a, p.assemble_matrix(&mu).unwrap());
        let b = p.assemble_matrix(&at(&d, &[9.0, 3.0, 1.0, 2.0])).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                if i != j {
                    assert_eq!(a[(i, j)], b[(i, j)]);
                }
            }
        }
        let names: Vec<String> = p.scalar_features().into_iter().map(|f| f.name).collect();
        assert_eq!(names, ["w_over_z1", "z1_over_w", "w_over_z2", "z2_over_w", "w_over_z3", "z3_over_w"]);
    }

    #[test]
    fn point_cloud_is_reproducible() {
        let a = KernelProblemConfig::random_sphere(30, 11).unwrap();
        let b = KernelProblemConfig::random_sphere(30, 11).unwrap();
        let c = KernelProblemConfig::random_sphere(30, 12).unwrap();
        assert_eq!(a.points, b.points);
        assert_ne!(a.points, c.points);
        for p in &a.points {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-14);
        }
        for z in 1..=3 {
            assert_eq!(a.zones.iter().filter(|&&v| v == z).count(), 10);
        }
    }

    #[test]
    fn truth_solve_matches_oracle_and_residual() {
        let d = kernel_domain();
        let p = kernel_provider(KernelProblemConfig::random_sphere(50, 5).unwrap(), d.clone()).unwrap();
        let mu = at(&d, &[10.0, 2.0, 3.0, 4.5]);
        let u = truth_solve(&p, &mu).unwrap();
        let a = p.assemble_matrix(&mu).unwrap();
        let c = p.assemble_rhs(&mu).unwrap();
        let oracle = gauss_oracle(&a, &c);
        assert!(norm2(&sub(&u, &oracle)) <= 1e-8 * norm2(&oracle));
        assert!(relative_residual(&a, &u, &c) <= 1e-10);

        let t = toy_domain(2);
        let toy = affine_toy_provider(30, t.clone()).unwrap();
        for mu in t.grid() {
            let u = truth_solve(&toy, &mu).unwrap();
            let a = toy.assemble_matrix(&mu).unwrap();
            assert!(relative_residual(&a, &u, &toy.assemble_rhs(&mu).unwrap()) <= 1e-10);
        }
    }

    struct Identity(ParameterDomain, ComplexVector);

    impl ProblemProvider for Identity {
        fn name(&self) -> &str {
            "identity"
        }
        fn n(&self) -> usize {
            3
        }
        fn domain(&self) -> &ParameterDomain {
            &self.0
        }
        fn assemble_matrix(&self, _: &ParameterPoint) -> Result<ComplexMatrix> {
            Ok(ComplexMatrix::identity(3))
        }
        fn assemble_rhs(&self, _: &ParameterPoint) -> Result<ComplexVector> {
            Ok(vec![ONE, C64::new(0.0, 0.0), C64::new(0.0, 0.0)])
        }
        fn output_functional(&self) -> &[C64] {
            &self.1
        }
        fn matrix_structure(&self) -> OperatorStructure {
            OperatorStructure::Affine { terms: vec![ParameterFunction::constant(1.0)] }
        }
        fn rhs_structure(&self) -> OperatorStructure {
            self.matrix_structure()
        }
    }

    #[test]
    fn identity_provider_returns_rhs() {
        let d = toy_domain(1);
        let p = Identity(d.clone(), vec![ONE; 3]);
        let u = truth_solve(&p, &d.center()).unwrap();
        assert_eq!(u, vec![ONE, C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);
    }

    #[test]
    fn cost_function_cases() {
        assert_eq!(cost_function_eval(&[C64::new(0.0, 0.0); 3], &[1.0, 2.0, 3.0], -8.0).unwrap(), -8.0);
        let j = C64::new(1.0, 2f64.sqrt());
        assert!((cost_function_eval(&[j], &[2.0], 0.0).unwrap() - 6.0).abs() < 1e-14);
        assert!(matches!(
            cost_function_eval(&[j], &[1.0, 2.0], 0.0),
            Err(Error::LengthMismatch { .. })
        ));
        let w = default_frequency_weights(20);
        assert_eq!(w.iter().filter(|&&a| a == 2.0).count(), 7);
        assert_eq!(w.iter().filter(|&&a| a == 1.0).count(), 6);
        assert_eq!(w.iter().filter(|&&a| a == 3.0).count(), 7);
        let q: Vec<C64> = (0..20).map(|i| C64::new(0.1 * i as f64, -0.05 * i as f64)).collect();
        let h = impedance_penalty(2.8, 1.0, 1.9);
        let mut oracle = h;
        for i in 0..20 {
            oracle += w[i] * (q[i].re * q[i].re + q[i].im * q[i].im);
        }
        assert!((cost_function_eval(&q, &w, h).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn domain_grid_and_lookup() {
        let d = kernel_domain();
        let g = d.grid();
        assert_eq!(g.len(), 5 * 27);
        assert_eq!(g[0].coords(), &[6.8, 1.0, 1.0, 1.0]);
        assert_eq!(g.last().unwrap().coords(), &[15.1, 5.0, 5.0, 5.0]);
        assert_eq!(g[1].coords(), &[6.8, 1.0, 1.0, 3.0]);
        let p = d.from_named([("z1", 2.0), ("k", 7.0), ("z3", 1.0), ("z2", 4.0)]).unwrap();
        assert_eq!(p.coords(), &[7.0, 2.0, 4.0, 1.0]);
        assert!(matches!(d.from_named([("bogus", 1.0)]), Err(Error::UnknownParameter(_))));
        assert!(matches!(
            d.check(&d.point(vec![20.0, 1.0, 1.0, 1.0]).unwrap()),
            Err(Error::OutOfDomain { .. })
        ));
        assert_eq!(d.projected_grid(&[0]).len(), 5);
        assert!(ParameterDomain::new(vec!["a".into()], vec![1.0], vec![1.0], vec![3]).is_err());
    }

    #[test]
    fn counting_provider_counts() {
        let d = toy_domain(1);
        let p = CountingProvider::new(affine_toy_provider(4, d.clone()).unwrap());
        truth_solve(&p, &d.center()).unwrap();
        assert_eq!((p.matrix_calls(), p.rhs_calls()), (1, 1));
    }
}
