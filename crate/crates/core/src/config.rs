//! Sectioned TOML run configuration. Every field has a default, so an empty
//! file is a complete standard run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoders::{HeadConfig, HeadKind};
use crate::equalizer::{EqualizeMode, TapPoint};
use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Which bilinear grid conventions to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignChoice {
    True,
    False,
    #[default]
    Both,
}

impl AlignChoice {
    pub fn modes(self) -> Vec<bool> {
        match self {
            AlignChoice::True => vec![true],
            AlignChoice::False => vec![false],
            AlignChoice::Both => vec![false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub precision: Precision,
    pub out: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42, threads: 0, precision: Precision::F64, out: "results".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EqualizerSection {
    pub mode: EqualizeMode,
    pub tap: TapPoint,
    pub sigma_floor: Option<f64>,
    pub skip_bias: bool,
}

impl Default for EqualizerSection {
    fn default() -> Self {
        Self { mode: EqualizeMode::Injected, tap: TapPoint::PostUpsample, sigma_floor: None, skip_bias: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Section {
    pub shape: [usize; 4],
    pub sigmas: Vec<f64>,
    pub ratios: Vec<usize>,
    pub align: AlignChoice,
    pub trials: usize,
}

impl Default for Fig2Section {
    fn default() -> Self {
        Self {
            shape: [16, 256, 128, 128],
            sigmas: (1..10).map(|i| i as f64 / 10.0).collect(),
            ratios: vec![2, 4, 8],
            align: AlignChoice::Both,
            trials: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceDecaySection {
    pub trials: usize,
    pub ratios: Vec<usize>,
    pub max_side: usize,
}

impl Default for VarianceDecaySection {
    fn default() -> Self {
        Self { trials: 1000, ratios: vec![2, 4, 8], max_side: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSection {
    /// Input shape; the block maps `shape[1]` channels to `out_channels`.
    pub shape: [usize; 4],
    pub out_channels: usize,
    pub kernel: usize,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        Self { shape: [16, 64, 128, 128], out_channels: 256, kernel: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Section {
    pub seeds: usize,
    pub variance_ratios: Vec<f64>,
    pub channels: usize,
    pub out_channels: usize,
    pub batch: usize,
    pub size: usize,
}

impl Default for Prop1Section {
    fn default() -> Self {
        Self { seeds: 32, variance_ratios: vec![1.0, 10.0], channels: 32, out_channels: 64, batch: 4, size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceSection {
    pub configs: usize,
}

impl Default for EquivalenceSection {
    fn default() -> Self {
        Self { configs: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub heads: Vec<HeadKind>,
    pub seeds: usize,
    pub batch: usize,
    pub image: usize,
    pub stats_samples: usize,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            heads: vec![HeadKind::UperHead, HeadKind::PspHead, HeadKind::AsppHead, HeadKind::SepAsppHead, HeadKind::FcnHead],
            seeds: 32,
            batch: 8,
            image: 64,
            stats_samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub dataset: usize,
    pub image: usize,
    pub stats_samples: usize,
    pub eval_samples: usize,
    /// Steps averaged for the final loss.
    pub tail: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 500, lr: 0.05, batch: 8, dataset: 256, image: 64, stats_samples: 256, eval_samples: 32, tail: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub dataset: usize,
    pub batch: usize,
    pub image: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self { dataset: 256, batch: 8, image: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub head: HeadConfig,
    pub equalizer: EqualizerSection,
    pub fig2: Fig2Section,
    pub variance_decay: VarianceDecaySection,
    pub constants: ConstantsSection,
    pub prop1: Prop1Section,
    pub equivalence: EquivalenceSection,
    pub audit: AuditSection,
    pub train: TrainSection,
    pub calibrate: CalibrateSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fig2.sigmas.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
            return bad(format!("fig2 sigmas must lie in (0, 1): {:?}", self.fig2.sigmas));
        }
        if self.fig2.ratios.iter().chain(&self.variance_decay.ratios).any(|&r| r < 1) {
            return bad("upsampling ratios must be >= 1".into());
        }
        if self.fig2.shape.contains(&0) || self.constants.shape.contains(&0) {
            return bad("shapes must be positive".into());
        }
        if self.fig2.trials == 0 || self.prop1.seeds == 0 || self.audit.seeds == 0 {
            return bad("trial and seed counts must be positive".into());
        }
        if self.prop1.variance_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("prop1 variance ratios must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.train.lr));
        }
        if self.train.batch == 0 || self.audit.batch == 0 || self.calibrate.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if let Some(f) = self.equalizer.sigma_floor {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("sigma floor must be positive, got {f}"));
            }
        }
        if self.head.classes < 2 {
            return bad("at least two classes are needed".into());
        }
        Ok(())
    }

    /// Digest of everything that affects results; output location and thread
    /// count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out.clear();
        c.run.threads = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_run() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.run.seed, 42);
        assert_eq!(c.fig2.shape, [16, 256, 128, 128]);
    }

    #[test]
    fn sections_override() {
        let c = ExperimentConfig::parse(
            "[run]\nseed = 7\n[head]\nkind = \"psphead\"\nwidth = 8\n[fig2]\nsigmas = [0.5]\nalign = \"true\"\n",
        )
        .unwrap();
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.head.kind, HeadKind::PspHead);
        assert_eq!(c.head.width, 8);
        assert_eq!(c.fig2.align.modes(), vec![true]);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[fig2]\nsigmas = [1.5]\n",
            "[run]\nbogus = 1\n",
            "[train]\nlr = -1.0\n",
            "[head]\nkind = \"segformer\"\n",
            "[equalizer]\nsigma_floor = 0.0\n",
            "not toml at all [",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.out = "elsewhere".into();
        b.run.threads = 3;
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.equalizer.sigma_floor = Some(1e-8);
        assert_eq!(ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }
}
