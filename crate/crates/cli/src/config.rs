//! Run configuration: preset defaults, overlaid by a TOML file, overlaid by
//! command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use reid_core::augment::AugmentConfig;
use reid_core::backbone::{BackboneConfig, Mode};
use reid_core::consensus::ConsensusConfig;
use reid_core::dataset::SynthConfig;
use reid_core::tensor::PoolKind;
use reid_core::trainer::TrainConfig;
use reid_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Desk-scale model and synthetic data.
    Toy,
    /// Reference model, two scales, lr 0.0003.
    PaperMarket,
    /// Reference model, two scales, lr 0.0005.
    PaperCuhk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    /// Branch input sizes as `[height, width]`.
    pub scales: Vec<(usize, usize)>,
    /// Per-branch pooling; empty means largest scale average, others max.
    pub pooling: Vec<PoolKind>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneConfig::toy(),
            scales: vec![(64, 32), (48, 24)],
            pooling: Vec::new(),
        }
    }
}

impl ModelSection {
    pub fn consensus(&self, n_id: usize) -> ConsensusConfig {
        let mut c = ConsensusConfig::new(self.scales.clone(), self.backbone.clone(), n_id);
        if !self.pooling.is_empty() {
            c.pooling = self.pooling.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Toy)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => RunConfig {
                model: ModelSection::default(),
                train: TrainConfig {
                    augment: AugmentConfig::toy(),
                    ..TrainConfig::default()
                },
                synth: SynthConfig::default(),
            },
            Preset::PaperMarket | Preset::PaperCuhk => RunConfig {
                model: ModelSection {
                    backbone: BackboneConfig::paper(),
                    scales: vec![(384, 192), (256, 128)],
                    pooling: Vec::new(),
                },
                train: TrainConfig {
                    lr: if p == Preset::PaperCuhk { 5e-4 } else { 3e-4 },
                    ..TrainConfig::default()
                },
                synth: SynthConfig {
                    height: 384,
                    width: 192,
                    ..SynthConfig::default()
                },
            },
        }
    }

    /// Preset values with every key present in `text` replaced.
    pub fn from_toml(base: &RunConfig, text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(base, &text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.model.backbone.mode = mode;
    }

    pub fn set_scales(&mut self, scales: Vec<(usize, usize)>) {
        if scales.len() != self.model.pooling.len() {
            self.model.pooling.clear();
        }
        self.model.scales = scales;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.consensus(2).validate()?;
        self.train.validate()
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses `"HxW,HxW"`.
pub fn parse_scales(s: &str) -> Result<Vec<(usize, usize)>> {
    let bad = || Error::Config(format!("scales must look like \"64x32,48x24\", got `{s}`"));
    s.split(',')
        .map(|part| {
            let (h, w) = part.trim().split_once(['x', 'X']).ok_or_else(bad)?;
            let h: usize = h.trim().parse().map_err(|_| bad())?;
            let w: usize = w.trim().parse().map_err(|_| bad())?;
            if h == 0 || w == 0 {
                return Err(bad());
            }
            Ok((h, w))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let toy = RunConfig::preset(Preset::Toy);
        assert_eq!(toy.train.lr, 3e-4);
        assert_eq!(toy.model.scales, vec![(64, 32), (48, 24)]);
        assert_eq!(RunConfig::preset(Preset::PaperMarket).train.lr, 3e-4);
        let cuhk = RunConfig::preset(Preset::PaperCuhk);
        assert_eq!(cuhk.train.lr, 5e-4);
        assert_eq!(cuhk.model.backbone.signature_len(), 512);
        for p in [Preset::Toy, Preset::PaperMarket, Preset::PaperCuhk] {
            assert!(RunConfig::preset(p).validate().is_ok());
        }
    }

    #[test]
    fn toml_overlay_keeps_unset_keys() {
        let base = RunConfig::preset(Preset::Toy);
        let c = RunConfig::from_toml(&base, "[train]\nepochs = 3\n[model.backbone]\nmode = \"resnet\"\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, base.train.lr);
        assert_eq!(c.model.backbone.mode, Mode::Resnet);
        assert_eq!(c.model.backbone.num_blocks, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let base = RunConfig::preset(Preset::Toy);
        assert!(matches!(
            RunConfig::from_toml(&base, "[train]\nepoch = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml(&base, "colour = 1\n").is_err());
    }

    #[test]
    fn full_config_round_trips() {
        let c = RunConfig::preset(Preset::PaperCuhk);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&RunConfig::preset(Preset::Toy), &text).unwrap(), c);
    }

    #[test]
    fn readme_example_lists_toy_defaults() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + 8;
        let len = readme[start..].find("```").unwrap();
        let base = RunConfig::preset(Preset::PaperMarket);
        let parsed = RunConfig::from_toml(&base, &readme[start..start + len]).unwrap();
        assert_eq!(parsed, RunConfig::preset(Preset::Toy));
    }

    #[test]
    fn scale_parsing() {
        assert_eq!(parse_scales("64x32,48x24").unwrap(), vec![(64, 32), (48, 24)]);
        assert_eq!(parse_scales("384X192").unwrap(), vec![(384, 192)]);
        assert!(parse_scales("64,32").is_err());
        assert!(parse_scales("0x3").is_err());
    }
}
