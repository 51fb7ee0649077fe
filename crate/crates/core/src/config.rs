//! Run configuration: every stage knob in one structure, loadable from a
//! TOML file with per-field overrides on top of a named preset.

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::integrator::{IntegrateParams, WeightMode};
use crate::manager::ManagerParams;
use crate::tracker::TrackerParams;

/// Fully-resolved pipeline configuration. Build one from a preset
/// constructor or [`PipelineConfig::from_toml_str`]; both validate.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Voxel edge length (meters).
    pub voxel_size: f64,
    /// TSDF truncation distance (meters), at least one voxel.
    pub truncation: f64,
    pub tracker: TrackerParams,
    pub manager: ManagerParams,
    pub integrate: IntegrateParams,
    pub crf: CrfParams,
    /// Run overlap resolution + voxel reassignment on inactivity.
    pub manage: bool,
    /// Run CRF refinement after management.
    pub refine: bool,
}

/// On-disk form: a preset name plus sparse overrides. Anything unset falls
/// back to the preset; an absent `[crf]` table derives its bandwidths from
/// the resolved voxel size.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    voxel_size: Option<f64>,
    truncation: Option<f64>,
    tau_iou: Option<f64>,
    n_min: Option<usize>,
    k_inactive: Option<u32>,
    min_label_voxels: Option<u64>,
    merge_ratio: Option<f64>,
    weight_mode: Option<WeightMode>,
    min_surface_points: Option<u32>,
    manage: Option<bool>,
    refine: Option<bool>,
    crf: Option<CrfParams>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::indoor()
    }
}

impl PipelineConfig {
    fn preset(voxel_size: f64, truncation: f64) -> Self {
        PipelineConfig {
            voxel_size,
            truncation,
            tracker: TrackerParams::default(),
            manager: ManagerParams::default(),
            integrate: IntegrateParams::default(),
            crf: CrfParams::defaults_for(voxel_size),
            manage: true,
            refine: true,
        }
    }

    /// Room-scale profile: 0.04 m voxels, 0.08 m truncation.
    pub fn indoor() -> Self {
        Self::preset(0.04, 0.08)
    }

    /// Street-scale profile: 0.1 m voxels, 0.6 m truncation.
    pub fn outdoor() -> Self {
        Self::preset(0.1, 0.6)
    }

    pub fn by_preset_name(name: &str) -> Result<Self> {
        match name {
            "indoor" => Ok(Self::indoor()),
            "outdoor" => Ok(Self::outdoor()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected \"indoor\" or \"outdoor\")"
            ))),
        }
    }

    /// Parses a config file: optional `preset` line, then overrides. A
    /// changed `voxel_size` rescales the default CRF bandwidths unless an
    /// explicit `[crf]` table pins them.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        let mut cfg = match &raw.preset {
            Some(name) => Self::by_preset_name(name)?,
            None => Self::indoor(),
        };
        if let Some(v) = raw.voxel_size {
            cfg.voxel_size = v;
            cfg.crf = CrfParams::defaults_for(v);
        }
        if let Some(v) = raw.truncation {
            cfg.truncation = v;
        }
        if let Some(v) = raw.tau_iou {
            cfg.tracker.tau_iou = v;
        }
        if let Some(v) = raw.n_min {
            cfg.tracker.n_min = v;
        }
        if let Some(v) = raw.k_inactive {
            cfg.manager.k_inactive = v;
        }
        if let Some(v) = raw.min_label_voxels {
            cfg.manager.min_label_voxels = v;
        }
        if let Some(v) = raw.merge_ratio {
            cfg.manager.merge_ratio = v;
        }
        if let Some(v) = raw.weight_mode {
            cfg.integrate.weight_mode = v;
        }
        if let Some(v) = raw.min_surface_points {
            cfg.integrate.min_surface_points = v;
        }
        if let Some(v) = raw.manage {
            cfg.manage = v;
        }
        if let Some(v) = raw.refine {
            cfg.refine = v;
        }
        if let Some(crf) = raw.crf {
            cfg.crf = crf;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Serializes the resolved configuration; `from_toml_str` on the result
    /// reproduces it exactly.
    pub fn to_toml_string(&self) -> String {
        // Emitted in the same flat schema the parser accepts; the crf table
        // must come last (TOML values cannot follow a table).
        #[derive(Serialize)]
        struct Flat<'a> {
            voxel_size: f64,
            truncation: f64,
            tau_iou: f64,
            n_min: usize,
            k_inactive: u32,
            min_label_voxels: u64,
            merge_ratio: f64,
            weight_mode: WeightMode,
            min_surface_points: u32,
            manage: bool,
            refine: bool,
            crf: &'a CrfParams,
        }
        let flat = Flat {
            voxel_size: self.voxel_size,
            truncation: self.truncation,
            tau_iou: self.tracker.tau_iou,
            n_min: self.tracker.n_min,
            k_inactive: self.manager.k_inactive,
            min_label_voxels: self.manager.min_label_voxels,
            merge_ratio: self.manager.merge_ratio,
            weight_mode: self.integrate.weight_mode,
            min_surface_points: self.integrate.min_surface_points,
            manage: self.manage,
            refine: self.refine,
            crf: &self.crf,
        };
        toml::to_string(&flat).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "voxel_size must be positive and finite, got {}",
                self.voxel_size
            )));
        }
        if !(self.truncation.is_finite() && self.truncation >= self.voxel_size) {
            return Err(Error::InvalidConfig(format!(
                "truncation must be at least voxel_size ({} < {})",
                self.truncation, self.voxel_size
            )));
        }
        self.tracker.validate()?;
        self.crf.validate(self.voxel_size)?;
        self.manager.validate()?;
        Ok(())
    }
}
