//! Run configuration: a TOML tree with a schema version. Unknown keys are
//! rejected and every default is written back into the resolved copy.

use std::path::{Path, PathBuf};

use moire_vmc::ansatz::AnsatzConfig;
use moire_vmc::hamiltonian::HamiltonianParams;
use moire_vmc::lattice::{build_cell, CellShape, MoireGeometry, SimulationCell};
use moire_vmc::optimizer::SpringConfig;
use moire_vmc::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Measure,
    Analyze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_phases")]
    pub phases: Vec<Phase>,
    pub cell: CellConfig,
    pub hamiltonian: HamiltonianConfig,
    #[serde(default)]
    pub ansatz: AnsatzConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

fn default_phases() -> Vec<Phase> {
    vec![Phase::Train]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    #[serde(default = "default_shape")]
    pub shape: CellShape,
    /// Moiré cells along the two supercell vectors.
    pub n_cells: [usize; 2],
    pub r_s: f64,
    /// Electrons per honeycomb minimum.
    pub nu_m: f64,
    /// Defaults to an even split of `N = 2 nu_m n_cells`.
    pub n_up: Option<usize>,
    pub n_down: Option<usize>,
    /// Potential phase in degrees.
    #[serde(default = "default_phi")]
    pub phi_deg: f64,
}

fn default_shape() -> CellShape {
    CellShape::Triangular
}

fn default_phi() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub v_m_over_w: f64,
    /// Interaction prefactor; defaults to `cell.r_s`.
    pub coupling: Option<f64>,
    pub ewald_alpha: Option<f64>,
    pub ewald_kmax: Option<f64>,
    pub ewald_rmax: Option<f64>,
    /// Softening length in units of the moiré constant. Selects the
    /// softened minimum-image interaction used by the ED oracle.
    pub softening_over_am: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub steps: u64,
    pub lambda: f64,
    pub mu: f64,
    pub eta0: f64,
    pub decay: f64,
    /// Steps between checkpoints.
    pub checkpoint_every: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let s = SpringConfig::default();
        OptimizerConfig { steps: 1000, lambda: s.lambda, mu: s.mu, eta0: s.eta0, decay: s.decay, checkpoint_every: 100 }
    }
}

impl OptimizerConfig {
    pub fn spring(&self) -> SpringConfig {
        SpringConfig { lambda: self.lambda, mu: self.mu, eta0: self.eta0, decay: self.decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureConfig {
    /// Retained samples per walker.
    pub sweeps: usize,
    /// Density grid points per moiré constant.
    pub grid_resolution: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig { sweeps: 100, grid_resolution: moire_vmc::lattice::DEFAULT_GRID_RESOLUTION }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Coarse grid points per axis; the refined grid has 3/2 as many.
    pub grid_n: usize,
    pub memory_limit_mb: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { grid_n: 24, memory_limit_mb: 1024 }
    }
}

/// Objects built from a resolved configuration.
pub struct System {
    pub cell: SimulationCell,
    pub geometry: MoireGeometry,
    pub hamiltonian: HamiltonianParams,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Fills derived defaults and checks consistency.
    fn resolve(mut self) -> Result<RunConfig, CliError> {
        let c = &mut self.cell;
        let n = 2.0 * c.nu_m * (c.n_cells[0] * c.n_cells[1]) as f64;
        if !(n > 0.0) || (n - n.round()).abs() > 1e-9 {
            return Err(CliError::Config(format!("nu_m = {} gives a non-integer electron count {n}", c.nu_m)));
        }
        let n = n.round() as usize;
        match (c.n_up, c.n_down) {
            (None, None) => {
                c.n_up = Some(n.div_ceil(2));
                c.n_down = Some(n / 2);
            }
            (Some(u), None) if u <= n => c.n_down = Some(n - u),
            (None, Some(d)) if d <= n => c.n_up = Some(n - d),
            (Some(u), Some(d)) if u + d == n => {}
            _ => {
                return Err(CliError::Config(format!(
                    "cell.n_up/n_down conflict with nu_m: the cell holds {n} electrons"
                )))
            }
        }
        if self.hamiltonian.coupling.is_none() {
            self.hamiltonian.coupling = Some(self.cell.r_s);
        }
        if self.optimizer.checkpoint_every == 0 {
            return Err(CliError::Config("optimizer.checkpoint_every must be positive".into()));
        }
        self.optimizer.spring().validate().map_err(|e| CliError::Config(format!("optimizer: {e}")))?;
        if self.sampler.n_walkers < 2 || self.sampler.proposals_per_sweep == 0 {
            return Err(CliError::Config("sampler needs at least 2 walkers and 1 proposal per sweep".into()));
        }
        self.system()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<System, CliError> {
        let c = &self.cell;
        let cell = build_cell(
            c.shape,
            c.n_cells[0],
            c.n_cells[1],
            c.r_s,
            c.nu_m,
            c.n_up.unwrap_or(0),
            c.n_down.unwrap_or(0),
        )
        .map_err(|e| CliError::Config(format!("cell: {e}")))?;
        let geometry =
            MoireGeometry::new(&cell, c.phi_deg.to_radians()).map_err(|e| CliError::Config(format!("cell: {e}")))?;
        let h = &self.hamiltonian;
        let hamiltonian = HamiltonianParams {
            v_m_over_w: h.v_m_over_w,
            r_s: h.coupling.unwrap_or(c.r_s),
            ewald_alpha: h.ewald_alpha,
            ewald_kmax: h.ewald_kmax,
            ewald_rmax: h.ewald_rmax,
            softening: h.softening_over_am.map(|s| s * cell.moire_constant),
        };
        Ok(System { cell, geometry, hamiltonian })
    }
}
