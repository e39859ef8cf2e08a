//! JSON run configurations and the provenance block stamped on outputs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use gpemu_core::calibration::DiscrepancySpec;
use gpemu_core::{CorrelationFamily, FitConfig, KernelChoice, KernelMode, McmcConfig, NuggetChoice, PriorSpec, TrendBasis};

use crate::CliError;

fn default_mode() -> KernelMode {
    KernelMode::Separable
}

/// Kernel section of a config. `family` is repeated over all inputs when
/// `families` is absent; the default is Matérn 5/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_mode")]
    pub mode: KernelMode,
    #[serde(default)]
    pub family: Option<CorrelationFamily>,
    #[serde(default)]
    pub families: Option<Vec<CorrelationFamily>>,
    #[serde(default)]
    pub nugget: NuggetChoice,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            mode: default_mode(),
            family: None,
            families: None,
            nugget: NuggetChoice::Absent,
        }
    }
}

impl KernelConfig {
    pub fn families(&self, p: usize) -> Vec<CorrelationFamily> {
        match &self.families {
            Some(f) => f.clone(),
            None => {
                let m = match self.mode {
                    KernelMode::Isotropic => 1,
                    KernelMode::Separable => p,
                };
                vec![self.family.unwrap_or_else(CorrelationFamily::matern_5_2); m]
            }
        }
    }

    pub fn choice(&self, p: usize) -> KernelChoice {
        KernelChoice {
            mode: self.mode,
            families: self.families(p),
            nugget: self.nugget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FitFileConfig {
    #[serde(default)]
    pub schema: Option<u32>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub basis: TrendBasis,
    #[serde(default)]
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimulatorConfig {
    /// `f(x, θ) = Σ_j θ_j x_j`, plus `θ_0` first when `intercept` is set.
    Linear {
        #[serde(default)]
        intercept: bool,
    },
    /// Emulator JSON: a scalar model over `(x, θ)`, or a vector model over
    /// `θ` with one coordinate per row of the `coords` CSV.
    Emulated {
        model: String,
        #[serde(default)]
        coords: Option<String>,
    },
}

fn default_response() -> String {
    "y".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    #[serde(default)]
    pub schema: Option<u32>,
    pub bounds: Vec<(f64, f64)>,
    pub simulator: SimulatorConfig,
    /// Omit or set to null for the no-discrepancy model.
    #[serde(default)]
    pub discrepancy: Option<DiscrepancySpec>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub mcmc: McmcConfig,
    /// Observation column of the field CSV.
    #[serde(default = "default_response")]
    pub response: String,
}

/// Provenance stamped on every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the materialized config below.
    pub config_hash: String,
    /// SHA-256 of the input files, in argument order.
    pub input_hash: String,
    pub seed: u64,
    pub config: Value,
}

impl RunInfo {
    pub fn new(command: &str, config: Value, inputs: &[&Path], seed: u64) -> Result<Self, CliError> {
        let bytes = serde_json::to_vec(&config).expect("config serializes");
        let mut h = Sha256::new();
        for p in inputs {
            h.update(std::fs::read(p).map_err(|e| CliError::io(p, e))?);
        }
        Ok(RunInfo {
            tool: "gpemu".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: hex(&Sha256::digest(&bytes)),
            input_hash: hex(&h.finalize()),
            seed,
            config,
        })
    }

    /// One-line form for CSV headers.
    pub fn header(&self) -> String {
        format!(
            "{} {} command={} config_hash={} input_hash={} seed={}",
            self.tool, self.version, self.command, self.config_hash, self.input_hash, self.seed
        )
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn check_schema(schema: Option<u32>, path: &Path) -> Result<(), CliError> {
    match schema {
        None | Some(1) => Ok(()),
        Some(s) => Err(CliError::Validation(format!(
            "{}: unsupported schema version {s}",
            path.display()
        ))),
    }
}
