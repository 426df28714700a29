//! Flat key=value training configuration.
//!
//! Every field serializes into a sorted `key=value` line set; the SHA-256 of
//! that text is the config digest used for run directories, checkpoint
//! resume refusal, and manifests. Keeping the format flat keeps digests
//! stable under reordering and trivial to diff.

use sha2::{Digest, Sha256};

use crate::diffusion::{TargetMode, TimeSampler};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    MllmAlign,
    DitCpt,
    Sft,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mllm-align" | "mllm_align" => Ok(Stage::MllmAlign),
            "dit-cpt" | "dit_cpt" => Ok(Stage::DitCpt),
            "sft" => Ok(Stage::Sft),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::MllmAlign => write!(f, "mllm-align"),
            Stage::DitCpt => write!(f, "dit-cpt"),
            Stage::Sft => write!(f, "sft"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_text: f64,
    pub lambda_align: f64,
    pub p_text: f64,
    pub p_vis: f64,
    pub p_text_end: f64,
    pub p_vis_end: f64,
    pub anneal_steps: u64,
    pub target_mode: TargetMode,
    pub seed: u64,
    pub n_queries: usize,
    pub grid_k: usize,
    pub connector_depth: usize,
    pub connector_width: usize,
    pub hidden_state_taps: Vec<usize>,
    pub ema_decay: Option<f64>,
    pub freeze_backbone: bool,
    pub understanding_fraction: f64,
    pub noisy_history: bool,
    pub cond_attends_history: bool,
    pub bidirectional_queries: bool,
    pub t_sampler: TimeSampler,
    pub guidance: f64,
    pub sample_steps: usize,
    pub vocab: u32,
    pub mllm_dim: usize,
    pub mllm_layers: usize,
    pub mllm_heads: usize,
    pub context: usize,
    pub visual_dim: usize,
    pub dit_width: usize,
    pub dit_layers: usize,
    pub dit_heads: usize,
    pub time_feats: usize,
    pub codec_patch: usize,
    pub vision_patch: usize,
    pub image_size: usize,
    pub n_classes: u32,
    pub max_text_len: usize,
    pub max_blocks: usize,
    pub max_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::MllmAlign,
            steps: 300,
            batch_size: 4,
            lr: 1e-3,
            lambda_text: 1.0,
            lambda_align: 1.0,
            p_text: 0.5,
            p_vis: 0.1,
            p_text_end: 0.1,
            p_vis_end: 0.1,
            anneal_steps: 300,
            target_mode: TargetMode::Forcing,
            seed: 0,
            n_queries: 16,
            grid_k: 4,
            connector_depth: 3,
            connector_width: 64,
            hidden_state_taps: vec![2],
            ema_decay: None,
            freeze_backbone: false,
            understanding_fraction: 0.5,
            noisy_history: false,
            cond_attends_history: false,
            bidirectional_queries: false,
            t_sampler: TimeSampler::Uniform,
            guidance: 1.0,
            sample_steps: 32,
            vocab: 64,
            mllm_dim: 64,
            mllm_layers: 2,
            mllm_heads: 4,
            context: 256,
            visual_dim: 32,
            dit_width: 64,
            dit_layers: 2,
            dit_heads: 4,
            time_feats: 8,
            codec_patch: 4,
            vision_patch: 4,
            image_size: 16,
            n_classes: 8,
            max_text_len: 6,
            max_blocks: 8,
            max_frames: 8,
        }
    }
}

impl TrainConfig {
    /// Stage presets with the paper's 20k/50k/2k step ratio mapped onto
    /// desk-scale budgets 300/600/60.
    pub fn for_stage(stage: Stage) -> Self {
        let mut cfg = Self::default();
        cfg.stage = stage;
        cfg.steps = match stage {
            Stage::MllmAlign => 300,
            Stage::DitCpt => 600,
            Stage::Sft => 60,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries != self.grid_k * self.grid_k {
            return Err(Error::Config(format!(
                "query budget {} must equal K^2 = {}",
                self.n_queries,
                self.grid_k * self.grid_k
            )));
        }
        if self.image_size % self.vision_patch != 0 {
            return Err(Error::Config("image size not divisible by vision patch".into()));
        }
        let grid_side = self.image_size / self.vision_patch;
        if self.grid_k == 0 || grid_side % self.grid_k != 0 {
            return Err(Error::Config(format!(
                "patch grid side {grid_side} not divisible by K={}",
                self.grid_k
            )));
        }
        if self.image_size % self.codec_patch != 0 {
            return Err(Error::Config("image size not divisible by codec patch".into()));
        }
        for p in [
            self.understanding_fraction,
            self.p_text,
            self.p_vis,
            self.p_text_end,
            self.p_vis_end,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0,1]")));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config("ema decay outside [0,1]".into()));
            }
        }
        if self.hidden_state_taps.is_empty()
            || self
                .hidden_state_taps
                .iter()
                .any(|&t| t == 0 || t > self.mllm_layers)
        {
            return Err(Error::Config("hidden_state_taps out of range".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_blocks / 2 > self.max_frames {
            return Err(Error::Config("max_frames below max_blocks/2".into()));
        }
        Ok(())
    }

    /// Canonical sorted key=value text. Every field appears exactly once.
    pub fn to_kv(&self) -> String {
        let taps = self
            .hidden_state_taps
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs: Vec<(String, String)> = vec![
            ("stage".into(), self.stage.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), fmt_f64(self.lr)),
            ("lambda_text".into(), fmt_f64(self.lambda_text)),
            ("lambda_align".into(), fmt_f64(self.lambda_align)),
            ("p_text".into(), fmt_f64(self.p_text)),
            ("p_vis".into(), fmt_f64(self.p_vis)),
            ("p_text_end".into(), fmt_f64(self.p_text_end)),
            ("p_vis_end".into(), fmt_f64(self.p_vis_end)),
            ("anneal_steps".into(), self.anneal_steps.to_string()),
            ("target_mode".into(), self.target_mode.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("n_queries".into(), self.n_queries.to_string()),
            ("grid_k".into(), self.grid_k.to_string()),
            ("connector_depth".into(), self.connector_depth.to_string()),
            ("connector_width".into(), self.connector_width.to_string()),
            ("hidden_state_taps".into(), taps),
            (
                "ema_decay".into(),
                self.ema_decay.map(fmt_f64).unwrap_or_else(|| "none".into()),
            ),
            ("freeze_backbone".into(), self.freeze_backbone.to_string()),
            (
                "understanding_fraction".into(),
                fmt_f64(self.understanding_fraction),
            ),
            ("noisy_history".into(), self.noisy_history.to_string()),
            (
                "cond_attends_history".into(),
                self.cond_attends_history.to_string(),
            ),
            (
                "bidirectional_queries".into(),
                self.bidirectional_queries.to_string(),
            ),
            ("t_sampler".into(), self.t_sampler.to_string()),
            ("guidance".into(), fmt_f64(self.guidance)),
            ("sample_steps".into(), self.sample_steps.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("mllm_dim".into(), self.mllm_dim.to_string()),
            ("mllm_layers".into(), self.mllm_layers.to_string()),
            ("mllm_heads".into(), self.mllm_heads.to_string()),
            ("context".into(), self.context.to_string()),
            ("visual_dim".into(), self.visual_dim.to_string()),
            ("dit_width".into(), self.dit_width.to_string()),
            ("dit_layers".into(), self.dit_layers.to_string()),
            ("dit_heads".into(), self.dit_heads.to_string()),
            ("time_feats".into(), self.time_feats.to_string()),
            ("codec_patch".into(), self.codec_patch.to_string()),
            ("vision_patch".into(), self.vision_patch.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("max_text_len".into(), self.max_text_len.to_string()),
            ("max_blocks".into(), self.max_blocks.to_string()),
            ("max_frames".into(), self.max_frames.to_string()),
        ];
        pairs.sort();
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parse key=value text over the defaults. Unknown keys are errors;
    /// '#' comments and blank lines are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{what}' for key"));
        macro_rules! parse {
            ($v:expr) => {
                $v.parse().map_err(|_| bad(value))?
            };
        }
        match key {
            "stage" => self.stage = parse!(value),
            "steps" => self.steps = parse!(value),
            "batch_size" => self.batch_size = parse!(value),
            "lr" => self.lr = parse!(value),
            "lambda_text" => self.lambda_text = parse!(value),
            "lambda_align" => self.lambda_align = parse!(value),
            "p_text" => self.p_text = parse!(value),
            "p_vis" => self.p_vis = parse!(value),
            "p_text_end" => self.p_text_end = parse!(value),
            "p_vis_end" => self.p_vis_end = parse!(value),
            "anneal_steps" => self.anneal_steps = parse!(value),
            "target_mode" => self.target_mode = parse!(value),
            "seed" => self.seed = parse!(value),
            "n_queries" => self.n_queries = parse!(value),
            "grid_k" => self.grid_k = parse!(value),
            "connector_depth" => self.connector_depth = parse!(value),
            "connector_width" => self.connector_width = parse!(value),
            "hidden_state_taps" => {
                self.hidden_state_taps = value
                    .split(',')
                    .map(|t| t.trim().parse().map_err(|_| bad(value)))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "ema_decay" => {
                self.ema_decay = if value == "none" {
                    None
                } else {
                    Some(parse!(value))
                };
            }
            "freeze_backbone" => self.freeze_backbone = parse!(value),
            "understanding_fraction" => self.understanding_fraction = parse!(value),
            "noisy_history" => self.noisy_history = parse!(value),
            "cond_attends_history" => self.cond_attends_history = parse!(value),
            "bidirectional_queries" => self.bidirectional_queries = parse!(value),
            "t_sampler" => self.t_sampler = parse!(value),
            "guidance" => self.guidance = parse!(value),
            "sample_steps" => self.sample_steps = parse!(value),
            "vocab" => self.vocab = parse!(value),
            "mllm_dim" => self.mllm_dim = parse!(value),
            "mllm_layers" => self.mllm_layers = parse!(value),
            "mllm_heads" => self.mllm_heads = parse!(value),
            "context" => self.context = parse!(value),
            "visual_dim" => self.visual_dim = parse!(value),
            "dit_width" => self.dit_width = parse!(value),
            "dit_layers" => self.dit_layers = parse!(value),
            "dit_heads" => self.dit_heads = parse!(value),
            "time_feats" => self.time_feats = parse!(value),
            "codec_patch" => self.codec_patch = parse!(value),
            "vision_patch" => self.vision_patch = parse!(value),
            "image_size" => self.image_size = parse!(value),
            "n_classes" => self.n_classes = parse!(value),
            "max_text_len" => self.max_text_len = parse!(value),
            "max_blocks" => self.max_blocks = parse!(value),
            "max_frames" => self.max_frames = parse!(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_kv().as_bytes());
        hasher.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Data-generation view of the config.
    pub fn gen_config(&self) -> crate::data::GenConfig {
        crate::data::GenConfig {
            vocab: self.vocab,
            image_size: self.image_size,
            n_classes: self.n_classes,
            max_text_len: self.max_text_len,
            max_blocks: self.max_blocks,
            p_same: 0.0,
            noise_max: 0.0,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip form keeps digests stable.
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_identity() {
        let mut cfg = TrainConfig::for_stage(Stage::DitCpt);
        cfg.seed = 17;
        cfg.ema_decay = Some(0.99);
        cfg.hidden_state_taps = vec![1, 2];
        let text = cfg.to_kv();
        let back = TrainConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn digest_changes_with_any_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.lr = 2e-3;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::from_kv("nonsense=1\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = TrainConfig::default();
        cfg.set("target_mode", "last-only").unwrap();
        cfg.set("n_queries", "4").unwrap();
        cfg.set("grid_k", "2").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.target_mode, TargetMode::LastOnly);
    }

    #[test]
    fn validate_rejects_query_grid_mismatch() {
        let mut cfg = TrainConfig::default();
        cfg.n_queries = 5;
        assert!(cfg.validate().is_err());
    }
}
