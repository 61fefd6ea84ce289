//! Plain-text `section.field = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every field of the
//! model, sensor, training, data and loss configs has a key; unknown or
//! repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SvdcError};
use crate::losses::LossWeights;
use crate::net::ModelConfig;
use crate::scene::DToFConfig;
use crate::train::{DataConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dtof: DToFConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| SvdcError::Config(format!("invalid value `{raw}` for `{key}`")))
}

// One entry per key: (key, section, field). The macro expands into the
// setter and the serializer so the two cannot drift apart.
macro_rules! config_keys {
    ($($key:literal => $section:ident . $field:ident),* $(,)?) => {
        /// Every accepted key, in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => self.$section.$field = parse_value(key, raw)?,)*
                    _ => return Err(SvdcError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Serializes every field; [`RunConfig::parse`] reads it back exactly.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", $key, self.$section.$field);)*
                s
            }
        }
    };
}

config_keys! {
    "model.base_channels" => model.base_channels,
    "model.guide_channels" => model.guide_channels,
    "model.encoder_downsample" => model.encoder_downsample,
    "model.kernel_small" => model.kernel_small,
    "model.kernel_large" => model.kernel_large,
    "model.num_bins" => model.num_bins,
    "model.d_min" => model.d_min,
    "model.d_max" => model.d_max,
    "model.window" => model.window,
    "model.residual_clamp" => model.residual_clamp,
    "model.use_csea" => model.use_csea,
    "model.fusion" => model.fusion,
    "dtof.fov_deg" => dtof.fov_deg,
    "dtof.camera_fov_deg" => dtof.camera_fov_deg,
    "dtof.grid_rows" => dtof.grid_rows,
    "dtof.grid_cols" => dtof.grid_cols,
    "dtof.distortion_k1" => dtof.distortion_k1,
    "dtof.rot_deg_max" => dtof.rot_deg_max,
    "dtof.offset_px_max" => dtof.offset_px_max,
    "dtof.dropout_rate" => dtof.dropout_rate,
    "dtof.reflectance_threshold" => dtof.reflectance_threshold,
    "dtof.depth_noise_rel" => dtof.depth_noise_rel,
    "dtof.seed" => dtof.seed,
    "train.steps" => train.steps,
    "train.batch" => train.batch,
    "train.lr_max" => train.lr_max,
    "train.warmup_frac" => train.warmup_frac,
    "train.weight_decay" => train.weight_decay,
    "train.grad_clip" => train.grad_clip,
    "train.window" => train.window,
    "train.seed" => train.seed,
    "train.use_cross_loss" => train.use_cross_loss,
    "train.use_opw_loss" => train.use_opw_loss,
    "train.checkpoint_every" => train.checkpoint_every,
    "data.height" => data.height,
    "data.width" => data.width,
    "data.hfov_deg" => data.hfov_deg,
    "data.clip_frames" => data.clip_frames,
    "data.train_clips" => data.train_clips,
    "data.eval_clips" => data.eval_clips,
    "data.seed" => data.seed,
    "data.min_spheres" => data.min_spheres,
    "data.max_spheres" => data.max_spheres,
    "data.max_motion_px" => data.max_motion_px,
    "data.camera_motion" => data.camera_motion,
    "loss.lambda_si" => loss.lambda_si,
    "loss.alpha_si" => loss.alpha_si,
    "loss.gamma_coarse" => loss.gamma_coarse,
    "loss.lambda_opw" => loss.lambda_opw,
    "loss.beta_mask" => loss.beta_mask,
}

impl RunConfig {
    /// Parses `text` on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SvdcError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(SvdcError::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| SvdcError::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SvdcError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dtof.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        if self.train.window != self.model.window {
            return Err(SvdcError::Config("train.window and model.window differ".into()));
        }
        if self.dtof.camera_fov_deg != self.data.hfov_deg {
            return Err(SvdcError::Config("dtof.camera_fov_deg and data.hfov_deg differ".into()));
        }
        Ok(())
    }
}

fn strip(e: SvdcError) -> String {
    match e {
        SvdcError::Config(m) => m,
        other => other.to_string(),
    }
}
