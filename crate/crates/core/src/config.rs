//! Class vocabulary and the numeric constants that drive every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current version stamped into every emitted file.
pub const FORMAT_VERSION: u32 = 1;

/// The three instance-segmented compartments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceClass {
    Glomerulus,
    Arteriole,
    Artery,
}

impl InstanceClass {
    pub const ALL: [InstanceClass; 3] = [
        InstanceClass::Glomerulus,
        InstanceClass::Arteriole,
        InstanceClass::Artery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstanceClass::Glomerulus => "Glomerulus",
            InstanceClass::Arteriole => "Arteriole",
            InstanceClass::Artery => "Artery",
        }
    }

    /// Position in [`InstanceClass::ALL`], used for one-hot encodings.
    pub fn index(self) -> usize {
        match self {
            InstanceClass::Glomerulus => 0,
            InstanceClass::Arteriole => 1,
            InstanceClass::Artery => 2,
        }
    }
}

impl fmt::Display for InstanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InstanceClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Glomerulus" => Ok(InstanceClass::Glomerulus),
            "Arteriole" => Ok(InstanceClass::Arteriole),
            "Artery" => Ok(InstanceClass::Artery),
            other => Err(Error::Vocabulary {
                name: other.to_string(),
                index: 0,
            }),
        }
    }
}

/// Every tunable constant of the post-processing cascade.
///
/// The defaults reproduce the published setup: 4096-px tiles at 20x with a
/// 32-px overlap, resized to 2048 px for the model; edge filtering at 20% of
/// the circumference / 90% of the area inside the outer 10% band; a 25-px
/// minimum instance area; and a 0.7 cross-class IoU cut-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tile_size: u32,
    pub tile_overlap: u32,
    pub model_input: u32,
    pub thumbnail_size: u32,
    pub edge_circumference_max: f64,
    pub edge_band_area_min: f64,
    pub band_fraction: f64,
    pub min_instance_area: u64,
    pub cross_class_iou_cutoff: f64,
    pub match_iou: f64,
    pub static_thresholds: Vec<f64>,
    pub min_tile_tissue_fraction: f64,
    pub same_class_suppress_iou: f64,
    pub dct_bins: usize,
    /// Fraction of an instance's area that must fall inside an Ignore region
    /// before it is dropped from evaluation.
    pub ignore_overlap: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tile_size: 4096,
            tile_overlap: 32,
            model_input: 2048,
            thumbnail_size: 4096,
            edge_circumference_max: 0.20,
            edge_band_area_min: 0.90,
            band_fraction: 0.10,
            min_instance_area: 25,
            cross_class_iou_cutoff: 0.7,
            match_iou: 0.5,
            static_thresholds: vec![0.3, 0.5, 0.7, 0.9],
            min_tile_tissue_fraction: 0.05,
            same_class_suppress_iou: 0.5,
            dct_bins: 20,
            ignore_overlap: 0.5,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl PipelineConfig {
    /// Model-frame pixels per tile pixel (2048 / 4096 = 0.5 by default).
    pub fn model_scale(&self) -> f64 {
        self.model_input as f64 / self.tile_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.model_input == 0 || self.thumbnail_size == 0 {
            return Err(Error::Config(
                "tile_size, model_input and thumbnail_size must be positive".into(),
            ));
        }
        if self.tile_overlap >= self.tile_size {
            return Err(Error::Config(format!(
                "tile_overlap {} must be smaller than tile_size {}",
                self.tile_overlap, self.tile_size
            )));
        }
        if self.model_input > self.tile_size {
            return Err(Error::Config(format!(
                "model_input {} exceeds tile_size {}",
                self.model_input, self.tile_size
            )));
        }
        unit("edge_circumference_max", self.edge_circumference_max)?;
        unit("edge_band_area_min", self.edge_band_area_min)?;
        if !(self.band_fraction > 0.0 && self.band_fraction < 0.5) {
            return Err(Error::Config(format!(
                "band_fraction {} must lie in (0, 0.5)",
                self.band_fraction
            )));
        }
        unit("cross_class_iou_cutoff", self.cross_class_iou_cutoff)?;
        unit("match_iou", self.match_iou)?;
        unit("min_tile_tissue_fraction", self.min_tile_tissue_fraction)?;
        unit("same_class_suppress_iou", self.same_class_suppress_iou)?;
        unit("ignore_overlap", self.ignore_overlap)?;
        for &t in &self.static_thresholds {
            unit("static threshold", t)?;
        }
        if self.dct_bins == 0 {
            return Err(Error::Config("dct_bins must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_published_constants() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tile_size, 4096);
        assert_eq!(cfg.tile_overlap, 32);
        assert_eq!(cfg.model_input, 2048);
        assert_eq!(cfg.model_scale(), 0.5);
        assert_eq!(cfg.min_instance_area, 25);
        assert_eq!(cfg.edge_circumference_max, 0.20);
        assert_eq!(cfg.edge_band_area_min, 0.90);
        assert_eq!(cfg.band_fraction, 0.10);
        assert_eq!(cfg.cross_class_iou_cutoff, 0.7);
        assert_eq!(cfg.static_thresholds, vec![0.3, 0.5, 0.7, 0.9]);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        let cfg = PipelineConfig {
            band_fraction: 0.5,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PipelineConfig {
            tile_overlap: 4096,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"tile_overlap": 64}"#).unwrap();
        assert_eq!(cfg.tile_overlap, 64);
        assert_eq!(cfg.tile_size, 4096);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn class_names_round_trip() {
        for c in InstanceClass::ALL {
            assert_eq!(c.name().parse::<InstanceClass>().unwrap(), c);
        }
        assert!("Tubule".parse::<InstanceClass>().is_err());
    }
}
