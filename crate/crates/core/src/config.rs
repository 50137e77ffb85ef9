//! Problem configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonintrusive::DecompositionSettings;
use crate::problems::{
    affine_toy_provider, kernel_provider, KernelProblemConfig, ParameterDomain, ProblemProvider, PRNG_ID,
};
use crate::rbm::GreedyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemKind {
    AffineToy {
        n: usize,
    },
    Kernel {
        n_points: usize,
        seed: u64,
        /// Must name the generator the cloud was drawn with.
        prng: String,
        #[serde(default)]
        wavenumber_index: usize,
        #[serde(default = "default_impedances")]
        impedance_indices: [usize; 3],
    },
}

fn default_impedances() -> [usize; 3] {
    [1, 2, 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    pub samples: usize,
    pub seed: u64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self { samples: 50, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    pub problem: ProblemKind,
    pub parameters: Vec<ParameterSpec>,
    #[serde(default)]
    pub decomposition: DecompositionSettings,
    #[serde(default = "default_rhs_settings")]
    pub rhs_decomposition: DecompositionSettings,
    #[serde(default)]
    pub greedy: GreedyConfig,
    #[serde(default)]
    pub validation: ValidationSpec,
}

fn default_rhs_settings() -> DecompositionSettings {
    DecompositionSettings {
        d: 13,
        d_z: 13,
        ..Default::default()
    }
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProblemConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain()?;
        if let ProblemKind::Kernel { prng, .. } = &self.problem {
            if prng != PRNG_ID {
                return Err(Error::InvalidInput(format!(
                    "unsupported prng {prng:?}, expected {PRNG_ID:?}"
                )));
            }
        }
        if self.greedy.n_max == 0 {
            return Err(Error::InvalidInput("greedy.n_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<ParameterDomain> {
        ParameterDomain::new(
            self.parameters.iter().map(|p| p.name.clone()).collect(),
            self.parameters.iter().map(|p| p.lo).collect(),
            self.parameters.iter().map(|p| p.hi).collect(),
            self.parameters.iter().map(|p| p.resolution).collect(),
        )
    }

    pub fn seed(&self) -> Option<u64> {
        match self.problem {
            ProblemKind::Kernel { seed, .. } => Some(seed),
            ProblemKind::AffineToy { .. } => None,
        }
    }

    pub fn build_provider(&self) -> Result<Box<dyn ProblemProvider>> {
        let domain = self.domain()?;
        Ok(match &self.problem {
            ProblemKind::AffineToy { n } => Box::new(affine_toy_provider(*n, domain)?),
            ProblemKind::Kernel {
                n_points,
                seed,
                wavenumber_index,
                impedance_indices,
                ..
            } => {
                let mut cloud = KernelProblemConfig::random_sphere(*n_points, *seed)?;
                cloud.wavenumber_index = *wavenumber_index;
                cloud.impedance_indices = *impedance_indices;
                Box::new(kernel_provider(cloud, domain)?)
            }
        })
    }
}
