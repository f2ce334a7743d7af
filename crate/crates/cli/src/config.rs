//! Experiment configuration: one JSON document drives every stage.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use segsr_core::generator::{ArchDescriptor, TrainConfig};
use segsr_core::phantom::{PhantomParams, DEFAULT_SPLIT};
use segsr_core::{LatentOptConfig, PlaneSpec, Regime, ScaleFactor};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ENV: &str = "SEGSR_OUT";

/// Up-sampling method compared in the report tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "sbi")]
    Sbi,
    #[serde(rename = "lo")]
    Lo,
    #[serde(rename = "lo-mv", alias = "lo-multi-view")]
    LoMultiView,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Nn, Method::Sbi, Method::Lo, Method::LoMultiView];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Nn => "nn",
            Method::Sbi => "sbi",
            Method::Lo => "lo",
            Method::LoMultiView => "lo-mv",
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, Method::Lo | Method::LoMultiView)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nn" => Ok(Method::Nn),
            "sbi" => Ok(Method::Sbi),
            "lo" => Ok(Method::Lo),
            "lo-mv" | "lo_mv" | "lo-multi-view" => Ok(Method::LoMultiView),
            other => Err(CliError::Usage(format!(
                "unknown method '{other}' (expected one of nn, sbi, lo, lo-mv)"
            ))),
        }
    }
}

pub fn parse_regime(s: &str) -> Result<Regime, CliError> {
    match Regime::parse(s) {
        Some(Regime::Custom) | None => Err(CliError::Usage(format!(
            "unknown regime '{s}' (expected no_motion, normal_motion or severe_motion)"
        ))),
        Some(r) => Ok(r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub subjects: usize,
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { subjects: 300, split: DEFAULT_SPLIT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub arch: ArchDescriptor,
    pub train: TrainConfig,
    /// Minimum held-out reconstruction Dice before training is reported as a warning.
    pub quality_gate: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { arch: ArchDescriptor::desk_scale(), train: TrainConfig::default(), quality_gate: 0.85 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub scale: ScaleFactor,
    pub regimes: Vec<Regime>,
    pub label_flip_rate: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            scale: ScaleFactor::new([5.0, 1.0, 1.0]).expect("valid default scale"),
            regimes: vec![Regime::NoMotion, Regime::NormalMotion, Regime::SevereMotion],
            label_flip_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Subject-level worker threads for degrade and superres; 1 is bit-reproducible.
    pub workers: usize,
    pub phantom: PhantomParams,
    pub dataset: DatasetConfig,
    pub vae: VaeConfig,
    pub degrade: DegradeConfig,
    pub latent_opt: LatentOptConfig,
    /// Long-axis view used by the multi-view method and the long-axis table.
    pub la_plane: PlaneSpec,
    pub methods: Vec<Method>,
}

/// Step size of the latent search used by the shipped configuration.
pub const DEFAULT_LATENT_LR: f64 = 0.05;
/// Stopping tolerance on the mean relative loss change used by the shipped configuration.
pub const DEFAULT_REL_CHANGE_TOL: f64 = 1e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phantom = PhantomParams::default();
        let la_plane = PlaneSpec::FixedW(phantom.dims[2] / 2);
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("segsr-out"),
            workers: 1,
            phantom,
            dataset: DatasetConfig::default(),
            vae: VaeConfig::default(),
            degrade: DegradeConfig::default(),
            latent_opt: LatentOptConfig {
                lr: DEFAULT_LATENT_LR,
                rel_change_tol: DEFAULT_REL_CHANGE_TOL,
                ..Default::default()
            },
            la_plane,
            methods: Method::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::Usage(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(CliError::Usage("config must carry a \"version\" field".into())),
        }
        let cfg: Self = serde_json::from_value(raw).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.methods.is_empty() {
            return usage("method list must not be empty".into());
        }
        if self.workers == 0 {
            return usage("workers must be at least 1".into());
        }
        if self.dataset.subjects < 3 {
            return usage(format!("dataset needs at least 3 subjects, got {}", self.dataset.subjects));
        }
        if self.degrade.regimes.is_empty() {
            return usage("regime list must not be empty".into());
        }
        if self.degrade.regimes.contains(&Regime::Custom) {
            return usage("custom regimes are not supported in experiment configs".into());
        }
        if !(0.0..1.0).contains(&self.degrade.label_flip_rate) {
            return usage("label_flip_rate must lie in [0, 1)".into());
        }
        if self.vae.arch.input_dims != self.phantom.dims {
            return usage(format!(
                "VAE input dims {:?} differ from phantom dims {:?}",
                self.vae.arch.input_dims, self.phantom.dims
            ));
        }
        self.degrade.scale.check_divides(self.phantom.dims).map_err(CliError::from)?;
        self.phantom.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.la_plane.check(self.phantom.dims).map_err(|e| CliError::Usage(e.to_string()))?;
        self.latent_opt.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Output root, honouring the `SEGSR_OUT` override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Seed of one named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

/// Hashes `stage` (FNV-1a) into `seed` and finalises with SplitMix64.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["sead"] = 3.into();
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(CliError::Usage(_))));
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["version"] = 2.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string().contains("version 2"));
        assert!(ExperimentConfig::from_json("{}").is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"version": 1, "seed": 7, "methods": ["nn", "lo-mv"]}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.methods, vec![Method::Nn, Method::LoMultiView]);
        assert_eq!(cfg.dataset.subjects, 300);
    }

    #[test]
    fn validation() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.methods.clear()));
        assert!(bad(|c| c.dataset.subjects = 2));
        assert!(bad(|c| c.workers = 0));
        assert!(bad(|c| c.degrade.scale = ScaleFactor::new([3.0, 1.0, 1.0]).unwrap()));
        assert!(bad(|c| c.la_plane = PlaneSpec::FixedW(64)));
        assert!(bad(|c| c.latent_opt.lr = -1.0));
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        assert_ne!(derive_seed(0, "degrade"), derive_seed(0, "superres"));
        assert_ne!(derive_seed(0, "degrade"), derive_seed(1, "degrade"));
        assert_eq!(derive_seed(42, "train-vae"), derive_seed(42, "train-vae"));
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("edsr".parse::<Method>().is_err());
        assert!(parse_regime("severe").is_ok());
        assert!(parse_regime("custom").is_err());
    }
}
