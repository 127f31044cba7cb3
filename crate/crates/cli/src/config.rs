use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use reverse_core::backends::RemoteConfig;
use reverse_core::curation::CurationConfig;
use reverse_core::decode::{DecodeConfig, Sampling};
use reverse_core::model::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "REVERSE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub bootstrap_rounds: usize,
    /// Object vocabulary for caption parsing; empty means the union of the
    /// annotated and target objects in the corpus.
    pub objects: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { bootstrap_rounds: 1000, objects: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub taus: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { taus: vec![0.0003, 0.003, 0.03] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub train_scenes: usize,
    pub prompt_scenes: usize,
    pub split: u32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { train_scenes: 200, prompt_scenes: 200, split: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub skip_list: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    /// Second output of `synth` (prompts).
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub curation: CurationConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalOptions,
    pub sweep: SweepOptions,
    pub synth: SynthOptions,
    pub remote: Option<RemoteConfig>,
    pub open_ended: bool,
    pub baseline: bool,
    pub paths: Paths,
}

/// Flag values layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub max_corrections: Option<usize>,
    pub local_attempts: Option<usize>,
    pub temp_base: Option<f64>,
    pub temp_step: Option<f64>,
    pub baseline: bool,
    pub trace: Option<PathBuf>,
    pub endpoint: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// File named by `--config`, else `REVERSE_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(t) = o.tau {
            self.decode.tau = t;
        }
        if let Some(n) = o.max_corrections {
            self.decode.max_total_corrections = n;
        }
        if let Some(k) = o.local_attempts {
            self.decode.max_local_attempts = k;
        }
        if let Some(t) = o.temp_base {
            self.decode.base_temperature = t;
        }
        if let Some(t) = o.temp_step {
            self.decode.temperature_step = t;
        }
        if o.baseline {
            self.baseline = true;
        }
        if let Some(t) = &o.trace {
            self.paths.trace = Some(t.clone());
        }
        if let Some(e) = &o.endpoint {
            self.remote.get_or_insert_with(RemoteConfig::default).endpoint = e.clone();
        }
    }

    /// Checks the seed and pushes it into every component config.
    pub fn finalize(mut self) -> Result<Self> {
        let Some(seed) = self.seed else {
            bail!("a seed is required (--seed or \"seed\" in the config file)");
        };
        self.curation.seed = seed;
        self.train.seed = seed;
        self.decode.seed = seed;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    /// Decode settings after `baseline` is taken into account.
    pub fn decode_config(&self) -> DecodeConfig {
        if self.baseline {
            DecodeConfig { sampling: Sampling::Greedy, ..self.decode.baseline() }
        } else {
            self.decode.clone()
        }
    }

    /// The effective configuration as written into artifact headers.
    pub fn header(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn input(&self) -> Result<&Path> {
        let p = self.paths.input.as_deref().context("an input path is required (--input)")?;
        if !p.exists() {
            bail!("input {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn output(&self) -> Result<&Path> {
        let p = self.paths.output.as_deref().context("an output path is required (--output)")?;
        writable(p)?;
        Ok(p)
    }
}

/// Fails unless the parent directory of `path` exists.
pub fn writable(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!("output directory {} does not exist", dir.display())
        }
        _ => Ok(()),
    }
}
