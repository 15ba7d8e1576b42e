//! Flat `key = value` run configuration with desk and full-scale presets.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bev::{BevConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, VisualMode};
use crate::lm::{DecoderConfig, Vocabulary};
use crate::refine::{InstructorConfig, TrainConfig, WarmUpConfig};
use crate::simworld::dataset::DataSpec;
use crate::simworld::{CameraRig, Dataset, WorldParams};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool);

impl ConfigValue for VisualMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $t:ty = $desk:expr, $full:expr;)*) => {
        /// Every hyperparameter of the pipeline.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $t,)*
        }

        impl RunConfig {
            /// Values sized for a laptop CPU.
            pub fn desk() -> Self {
                RunConfig { $($name: $desk,)* }
            }

            /// Full-scale values, kept for reference; not runnable on a desk.
            pub fn full_scale() -> Self {
                RunConfig { $($name: $full,)* }
            }

            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            /// Canonical text form: every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($name), self.$name.show()).expect("string write");)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0, 0;
    // simulated world and cameras
    grid_size: usize = 8, 8;
    n_objects: usize = 6, 6;
    /// Views per step `K`.
    n_views: usize = 4, 4;
    image_size: usize = 32, 32;
    fov_deg: f64 = 90.0, 90.0;
    /// Feature-map pooling patch in pixels.
    patch: usize = 4, 4;
    n_train: usize = 256, 256;
    n_seen: usize = 32, 32;
    n_unseen: usize = 32, 32;
    // BEV encoder and its detection pretraining
    bev_grid: usize = 15, 15;
    bev_range: f64 = 5.0, 5.0;
    n_ref: usize = 4, 4;
    n_d: usize = 8, 8;
    bev_blocks: usize = 2, 6;
    bev_heads: usize = 2, 8;
    bev_offsets: usize = 2, 4;
    /// BEV feature width `D_b`.
    d_b: usize = 64, 768;
    /// Train scenes used for detection pretraining.
    bev_scenes: usize = 64, 256;
    bev_epochs: usize = 48, 500;
    bev_lr: f64 = 2e-3, 1e-4;
    bev_batch: usize = 8, 8;
    // visual tokens
    /// Visual width `D`.
    d: usize = 64, 768;
    t_max: usize = 16, 16;
    fusion_blocks: usize = 2, 6;
    compressor_blocks: usize = 2, 8;
    fusion_heads: usize = 4, 12;
    n_q: usize = 10, 10;
    n_p: usize = 10, 10;
    // decoder
    d_lm: usize = 128, 4096;
    /// Decoder layers `M_L`.
    m_l: usize = 4, 32;
    /// Topmost layers that see the prompts, `N_a`.
    n_a: usize = 3, 31;
    lm_heads: usize = 4, 32;
    lm_ffn_mult: usize = 4, 4;
    max_len: usize = 128, 128;
    scale_all_layers: bool = false, false;
    warmup_epochs: usize = 6, 6;
    warmup_lr: f64 = 2e-3, 2e-3;
    // prompt tuning
    mode: VisualMode = VisualMode::Fusion, VisualMode::Fusion;
    refinement: bool = true, true;
    lr: f64 = 2e-3, 1e-4;
    batch: usize = 8, 8;
    iterations: usize = 5000, 20000;
    clip: f64 = 1.0, 1.0;
    landmark_ratio: f64 = 0.5, 0.5;
    log_every: usize = 100, 100;
    // inference and experiments
    refine_steps: usize = 2, 2;
    ablate_iterations: usize = 400, 20000;
    ablate_seeds: usize = 3, 3;
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk preset overridden by `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_p != self.n_q {
            return Err(Error::Config(format!("n_p ({}) must equal n_q ({})", self.n_p, self.n_q)));
        }
        if self.n_a >= self.m_l {
            return Err(Error::Config(format!("n_a ({}) must be below m_l ({})", self.n_a, self.m_l)));
        }
        if self.batch == 0 || self.bev_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.landmark_ratio) {
            return Err(Error::Config("landmark_ratio must lie in [0, 1]".into()));
        }
        if self.bev_scenes > self.n_train {
            return Err(Error::Config("bev_scenes exceeds n_train".into()));
        }
        self.bev().validate()?;
        self.fusion().validate()?;
        self.decoder().validate()
    }

    pub fn world(&self) -> WorldParams {
        WorldParams {
            grid_size: self.grid_size,
            n_objects: self.n_objects,
            ..WorldParams::default()
        }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig {
            n_views: self.n_views,
            image_w: self.image_size,
            image_h: self.image_size,
            fov_deg: self.fov_deg,
            ..CameraRig::default()
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            world: self.world(),
            rig: self.rig(),
            patch: self.patch,
            n_train: self.n_train,
            n_seen: self.n_seen,
            n_unseen: self.n_unseen,
            seed: self.seed,
        }
    }

    pub fn feat_dim(&self) -> usize {
        Dataset::channels(&self.world())
    }

    pub fn bev(&self) -> BevConfig {
        BevConfig {
            h_b: self.bev_grid,
            w_b: self.bev_grid,
            range: (-self.bev_range, self.bev_range),
            n_ref: self.n_ref,
            n_d: self.n_d,
            blocks: self.bev_blocks,
            heads: self.bev_heads,
            offsets: self.bev_offsets,
            dim: self.d_b,
            ..BevConfig::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.bev_epochs,
            batch: self.bev_batch,
            lr: self.bev_lr,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            dim: self.d,
            bev_dim: self.d_b,
            fusion_blocks: self.fusion_blocks,
            compressor_blocks: self.compressor_blocks,
            heads: self.fusion_heads,
            n_q: self.n_q,
            ..FusionConfig::default()
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            vocab: Vocabulary::new().len(),
            dim: self.d_lm,
            layers: self.m_l,
            heads: self.lm_heads,
            ffn_mult: self.lm_ffn_mult,
            gated_layers: self.n_a,
            max_len: self.max_len,
            visual_dim: self.d,
            n_prompts: self.n_p,
            scale_all_layers: self.scale_all_layers,
        }
    }

    pub fn instructor(&self, mode: VisualMode) -> InstructorConfig {
        InstructorConfig {
            feat_dim: self.feat_dim(),
            t_max: self.t_max,
            fusion: self.fusion(),
            decoder: self.decoder(),
            mode,
        }
    }

    pub fn warm_up(&self) -> WarmUpConfig {
        WarmUpConfig {
            epochs: self.warmup_epochs,
            lr: self.warmup_lr,
            seed: self.seed,
            ..WarmUpConfig::default()
        }
    }

    pub fn train(&self, iterations: usize, refinement: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch: self.batch,
            lr: self.lr,
            clip: self.clip,
            refinement,
            landmark_ratio: self.landmark_ratio,
            seed,
        }
    }
}
