//! Flat key=value run configuration.
//!
//! Every key is listed in [`RunConfig::describe_keys`] (also surfaced by the
//! CLI); an unknown key is an error naming it. Values from a file override
//! the defaults; explicit CLI flags override the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::film::DepthVariant;
use crate::policy::{PolicyConfig, Variant};
use crate::sim::render::CameraMode;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Task / data.
    pub task: String,
    pub demos: usize,
    pub noise_scale: f64,
    pub seed: u64,
    // Behavior-cloning run.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub eval_cadence: usize,
    // Variant wiring.
    pub variant: Variant,
    pub depth_variant: DepthVariant,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    // Evaluation.
    pub episodes: usize,
    pub camera: CameraMode,
    pub base_seed: u64,
    pub max_episode_steps: usize,
    // Probe suite.
    pub probe_examples: usize,
    pub pretrain_steps: usize,
    pub head_steps: usize,
    // Numerics.
    pub precision: Precision,
    // Model dimensions.
    pub vision_embed: usize,
    pub vision_blocks: usize,
    pub vision_heads: usize,
    pub tactile_embed: usize,
    pub tactile_blocks: usize,
    pub tactile_heads: usize,
    pub d_lm: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub action_bins: usize,
    pub chunk: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "circle2".into(),
            demos: 80,
            noise_scale: 0.3,
            seed: 0,
            steps: 20_000,
            batch_size: 8,
            lr: 1e-3,
            warmup: 200,
            eval_cadence: 500,
            variant: Variant::VisionOnly,
            depth_variant: DepthVariant::All,
            lora_rank: 8,
            lora_alpha: 16.0,
            episodes: 30,
            camera: CameraMode::Clean,
            base_seed: 1000,
            max_episode_steps: 300,
            probe_examples: 2000,
            pretrain_steps: 600,
            head_steps: 400,
            precision: Precision::F64,
            vision_embed: 64,
            vision_blocks: 6,
            vision_heads: 4,
            tactile_embed: 32,
            tactile_blocks: 4,
            tactile_heads: 4,
            d_lm: 96,
            lm_blocks: 4,
            lm_heads: 4,
            action_bins: 256,
            chunk: 1,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for key '{what}'"));
        match key {
            "task" => self.task = value.to_string(),
            "demos" => self.demos = value.parse().map_err(|_| bad(key))?,
            "noise_scale" => self.noise_scale = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "steps" => self.steps = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "warmup" => self.warmup = value.parse().map_err(|_| bad(key))?,
            "eval_cadence" => self.eval_cadence = value.parse().map_err(|_| bad(key))?,
            "variant" => self.variant = Variant::parse(value)?,
            "depth_variant" => self.depth_variant = DepthVariant::parse(value)?,
            "lora_rank" => self.lora_rank = value.parse().map_err(|_| bad(key))?,
            "lora_alpha" => self.lora_alpha = value.parse().map_err(|_| bad(key))?,
            "episodes" => self.episodes = value.parse().map_err(|_| bad(key))?,
            "camera" => self.camera = CameraMode::parse(value)?,
            "base_seed" => self.base_seed = value.parse().map_err(|_| bad(key))?,
            "max_episode_steps" => {
                self.max_episode_steps = value.parse().map_err(|_| bad(key))?
            }
            "probe_examples" => self.probe_examples = value.parse().map_err(|_| bad(key))?,
            "pretrain_steps" => self.pretrain_steps = value.parse().map_err(|_| bad(key))?,
            "head_steps" => self.head_steps = value.parse().map_err(|_| bad(key))?,
            "precision" => {
                self.precision = match value {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(bad(key)),
                }
            }
            "vision_embed" => self.vision_embed = value.parse().map_err(|_| bad(key))?,
            "vision_blocks" => self.vision_blocks = value.parse().map_err(|_| bad(key))?,
            "vision_heads" => self.vision_heads = value.parse().map_err(|_| bad(key))?,
            "tactile_embed" => self.tactile_embed = value.parse().map_err(|_| bad(key))?,
            "tactile_blocks" => self.tactile_blocks = value.parse().map_err(|_| bad(key))?,
            "tactile_heads" => self.tactile_heads = value.parse().map_err(|_| bad(key))?,
            "d_lm" => self.d_lm = value.parse().map_err(|_| bad(key))?,
            "lm_blocks" => self.lm_blocks = value.parse().map_err(|_| bad(key))?,
            "lm_heads" => self.lm_heads = value.parse().map_err(|_| bad(key))?,
            "action_bins" => self.action_bins = value.parse().map_err(|_| bad(key))?,
            "chunk" => self.chunk = value.parse().map_err(|_| bad(key))?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a `key=value` file (blank lines and `#` comments allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Documented key listing for `--help` and the README.
    pub fn describe_keys() -> &'static str {
        "task               benchmark task id (circle2|circle3|square2|square3|pentagon2|pentagon3|conn_a|conn_b)\n\
         demos              expert demonstrations to collect\n\
         noise_scale        expert action noise, mm per translational dim\n\
         seed               master seed (init, data order, collection)\n\
         steps              behavior-cloning optimization steps\n\
         batch_size         samples per optimization step\n\
         lr                 Adam learning rate\n\
         warmup             linear warmup steps\n\
         eval_cadence       checkpoint/log cadence, steps\n\
         variant            vision-only | tactile-concat | tactile-film\n\
         depth_variant      all | early | middle | late (FiLM depth)\n\
         lora_rank          adapter rank r\n\
         lora_alpha         adapter scale alpha\n\
         episodes           evaluation episodes\n\
         camera             clean | dim80 | freeze50\n\
         base_seed          first evaluation episode seed (episode i uses base_seed + i)\n\
         max_episode_steps  rollout step cap\n\
         probe_examples     examples per probe dataset\n\
         pretrain_steps     tactile-encoder pretraining steps\n\
         head_steps         probe-head training steps\n\
         precision          f64 | f32\n\
         vision_embed       visual stream width\n\
         vision_blocks      visual stream depth\n\
         vision_heads       visual attention heads\n\
         tactile_embed      tactile encoder width (d_t)\n\
         tactile_blocks     tactile encoder depth\n\
         tactile_heads      tactile attention heads\n\
         d_lm               decoder width\n\
         lm_blocks          decoder depth\n\
         lm_heads           decoder attention heads\n\
         action_bins        discretization bins K\n\
         chunk              action-chunk horizon H"
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let mut cfg = PolicyConfig {
            variant: self.variant,
            depth_variant: self.depth_variant,
            d_lm: self.d_lm,
            lm_blocks: self.lm_blocks,
            lm_heads: self.lm_heads,
            chunk: self.chunk,
            ..Default::default()
        };
        cfg.vision.embed_dim = self.vision_embed;
        cfg.vision.blocks = self.vision_blocks;
        cfg.vision.heads = self.vision_heads;
        cfg.tactile.embed_dim = self.tactile_embed;
        cfg.tactile.blocks = self.tactile_blocks;
        cfg.tactile.heads = self.tactile_heads;
        cfg.vocab.action_bins = self.action_bins;
        cfg
    }
}
