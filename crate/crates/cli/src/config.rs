//! Resolved pipeline configuration: defaults, overridden by a TOML file,
//! overridden by command-line flags. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ulprint_core::augment::AugmentConfig;
use ulprint_core::gabor::{GaborConfig, GroundtruthConfig};
use ulprint_core::guided::GuidedFilterParams;
use ulprint_core::preenhance::{
    AdaptiveThreshParams, ClaheParams, NlMeansParams, PreEnhanceConfig,
};
use ulprint_core::segnet::{BlockComposition, LossParams, ToyNetConfig, TrainConfig};

/// `[preenhance]` section: flat keys covering CLAHE, non-local means, and
/// the adaptive threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreenhanceSection {
    pub clip_limit: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub bins: usize,
    pub nlm_h: f64,
    pub nlm_template: usize,
    pub nlm_search: usize,
    pub thresh_block: usize,
    pub thresh_c: f64,
}

impl Default for PreenhanceSection {
    fn default() -> Self {
        let pre = PreEnhanceConfig::default();
        Self {
            clip_limit: pre.clahe.clip_limit,
            tiles_x: pre.clahe.tiles_x,
            tiles_y: pre.clahe.tiles_y,
            bins: pre.clahe.bins,
            nlm_h: pre.nl_means.h,
            nlm_template: pre.nl_means.template,
            nlm_search: pre.nl_means.search,
            thresh_block: pre.threshold.block,
            thresh_c: pre.threshold.c,
        }
    }
}

impl PreenhanceSection {
    pub fn to_core(&self) -> PreEnhanceConfig {
        PreEnhanceConfig {
            clahe: ClaheParams {
                clip_limit: self.clip_limit,
                tiles_x: self.tiles_x,
                tiles_y: self.tiles_y,
                bins: self.bins,
            },
            nl_means: NlMeansParams {
                h: self.nlm_h,
                template: self.nlm_template,
                search: self.nlm_search,
            },
            threshold: AdaptiveThreshParams {
                block: self.thresh_block,
                c: self.thresh_c,
            },
        }
    }
}

/// `[segnet]` section: loss shape, optimizer, and network widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegnetSection {
    pub alpha: f64,
    pub gamma: f64,
    pub smooth: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub composition: BlockComposition,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
}

impl Default for SegnetSection {
    fn default() -> Self {
        let net = ToyNetConfig::default();
        let train = TrainConfig::default();
        let loss = LossParams::default();
        Self {
            alpha: loss.alpha,
            gamma: loss.gamma,
            smooth: loss.smooth,
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: train.seed,
            val_fraction: train.val_fraction,
            composition: net.composition,
            encoder_widths: net.encoder_widths,
            decoder_widths: net.decoder_widths,
        }
    }
}

impl SegnetSection {
    pub fn net_config(&self) -> ToyNetConfig {
        ToyNetConfig {
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            composition: self.composition,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, augment: Option<AugmentConfig>) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: LossParams {
                alpha: self.alpha,
                gamma: self.gamma,
                smooth: self.smooth,
                ..Default::default()
            },
            val_fraction: self.val_fraction,
            augment,
        }
    }
}

/// The full resolved configuration, one section per pipeline stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preenhance: PreenhanceSection,
    pub gabor: GaborConfig,
    pub guided: GuidedFilterParams,
    pub segnet: SegnetSection,
    pub augment: AugmentConfig,
}

impl PipelineConfig {
    /// Loads from a TOML file path, if given; otherwise all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// Validates every section through the owning module's checks.
    pub fn validate(&self) -> Result<(), String> {
        self.preenhance.to_core().validate().map_err(|e| e.to_string())?;
        self.gabor.validate().map_err(|e| e.to_string())?;
        self.guided.validate().map_err(|e| e.to_string())?;
        self.segnet.net_config().validate().map_err(|e| e.to_string())?;
        self.segnet
            .train_config(None)
            .validate()
            .map_err(|e| e.to_string())?;
        self.augment.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn groundtruth_config(&self) -> GroundtruthConfig {
        GroundtruthConfig {
            pre: self.preenhance.to_core(),
            gabor: self.gabor.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_pipeline_parameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.guided.r, 5);
        assert_eq!(cfg.guided.eps, 1e-6);
        assert_eq!((cfg.guided.w_latent, cfg.guided.w_guided), (0.2, 0.8));
        assert_eq!(cfg.preenhance.nlm_h, 5.0);
        assert_eq!(cfg.preenhance.nlm_template, 3);
        assert_eq!(cfg.preenhance.nlm_search, 7);
        assert_eq!(cfg.segnet.lr, 1e-4);
        assert_eq!(cfg.augment.crop, 256);
        assert_eq!(cfg.augment.p_geom, 0.75);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("[guided]"));
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.guided.r, 5);

        let bad = "[guided]\nr = 5\nbogus_key = 1\n";
        assert!(toml::from_str::<PipelineConfig>(bad).is_err());
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let text = "[guided]\nr = 7\n\n[segnet]\nlr = 0.001\n";
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.guided.r, 7);
        assert_eq!(cfg.guided.eps, 1e-6);
        assert_eq!(cfg.segnet.lr, 1e-3);
        assert_eq!(cfg.segnet.epochs, 30);
    }
}
