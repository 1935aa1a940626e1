//! Invocation record written next to the outputs: the effective config, the
//! seed, SHA-256 digests of every input and output file, tool version and
//! per-stage wall-clock timings. Digest maps let two runs be compared for
//! end-to-end reproducibility without keeping the (large) data files around.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use chronocal::config::RunConfig;

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    /// Simulation seed in effect (config seed after any --seed override);
    /// absent for stages that do not draw random numbers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Effective run configuration (config file merged with flags).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    /// SHA-256 of each input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, keyed by file name within --out.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage. Informational: this is the one field
    /// that legitimately differs between otherwise identical runs.
    pub timing_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(subcommand: &'static str) -> Self {
        Self {
            tool: "chronocal",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: None,
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timing_s: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
