//! Plain-text `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::CorpusSpec;
use crate::diffusion::ScheduleKind;
use crate::edit::{Aggregation, EditConfig, Objective, PromptMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::str_score::Neighborhood;
use crate::train::TrainConfig;

/// `(key, default, meaning)`; an empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("lambda", "0.01", "STR guidance step size (useful range 0.005-0.015)"),
    ("steps", "50", "diffusion steps T"),
    ("cfg_scale", "7.5", "generation guidance scale"),
    ("cfg_scale_inv", "1.0", "inversion guidance scale; 1 means a single source-prompt call"),
    ("radius", "1", "frame neighbourhood radius"),
    ("include_self", "false", "include frame i in its own neighbourhood"),
    ("opt_steps_per_t", "1", "gradient steps per diffusion step"),
    ("use_mask", "false", "preserve latents outside the dilated mask"),
    ("dilate_radius", "1", "mask dilation radius in latent cells"),
    ("objective", "str_cosine", "str_cosine or concat_l2 (baseline)"),
    ("baseline_lambda", "0.08", "concat_l2 step size"),
    ("prompt_mode", "cfg", "cfg (source prompt as unconditional) or concat"),
    ("aggregation", "block_mean", "block_mean, head_mean or block_concat"),
    ("schedule", "linear-beta", "noise schedule: linear-beta or cosine"),
    ("seed", "0", "seed for training and corpus generation"),
    ("src_prompt", "", "source prompt"),
    ("tgt_prompt", "", "target prompt"),
    ("weights", "", "checkpoint directory"),
    ("corpus", "", "corpus directory"),
    ("video", "", "source latent video, STRM [f, h, w, c]"),
    ("mask", "", "pixel mask, u8 STRM [f, H, W] or [H, W]"),
    ("trajectory", "", "trajectory directory (written by invert, read by edit)"),
    ("output", "", "output directory"),
    ("train_steps", "2000", "training steps"),
    ("learning_rate", "0.002", "Adam learning rate"),
    ("batch_size", "1", "clips per training step"),
    ("prompt_dropout", "0.1", "probability of training on the null prompt"),
    ("clip_norm", "1.0", "gradient-norm clip, 0 disables"),
    ("eval_batch", "8", "fixed evaluation batch size"),
    ("dim", "32", "feature width"),
    ("heads", "2", "attention heads"),
    ("blocks", "4", "denoiser blocks"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub edit: EditConfig,
    pub train: TrainConfig,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub src_prompt: String,
    pub tgt_prompt: String,
    pub weights: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub video: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            edit: EditConfig::default(),
            train: TrainConfig::default(),
            dim: 0,
            heads: 0,
            blocks: 0,
            src_prompt: String::new(),
            tgt_prompt: String::new(),
            weights: None,
            corpus: None,
            video: None,
            mask: None,
            trajectory: None,
            output: None,
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("documented defaults parse");
        }
        c
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.edit;
        let t = &mut self.train;
        match key {
            "lambda" => e.lambda = parse_num(key, v)?,
            "steps" => e.steps = parse_num(key, v)?,
            "cfg_scale" => e.cfg_scale = parse_num(key, v)?,
            "cfg_scale_inv" => e.cfg_scale_inv = parse_num(key, v)?,
            "radius" => e.neighborhood.radius = parse_num(key, v)?,
            "include_self" => e.neighborhood.include_self = parse_bool(key, v)?,
            "opt_steps_per_t" => e.opt_steps_per_t = parse_num(key, v)?,
            "use_mask" => e.use_mask = parse_bool(key, v)?,
            "dilate_radius" => e.dilate_radius = parse_num(key, v)?,
            "objective" => e.objective = Objective::parse(v)?,
            "baseline_lambda" => e.baseline_lambda = parse_num(key, v)?,
            "prompt_mode" => e.prompt_mode = PromptMode::parse(v)?,
            "aggregation" => e.aggregation = Aggregation::parse(v)?,
            "schedule" => {
                e.schedule = ScheduleKind::parse(v)?;
                t.schedule = e.schedule;
            }
            "seed" => e.seed = parse_num(key, v)?,
            "src_prompt" => self.src_prompt = v.to_string(),
            "tgt_prompt" => self.tgt_prompt = v.to_string(),
            "weights" => self.weights = path(v),
            "corpus" => self.corpus = path(v),
            "video" => self.video = path(v),
            "mask" => self.mask = path(v),
            "trajectory" => self.trajectory = path(v),
            "output" => self.output = path(v),
            "train_steps" => t.steps = parse_num(key, v)?,
            "learning_rate" => t.learning_rate = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "prompt_dropout" => t.prompt_dropout = parse_num(key, v)?,
            "clip_norm" => t.clip_norm = parse_num(key, v)?,
            "eval_batch" => t.eval_batch = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "blocks" => self.blocks = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the defaults. Blank lines and `#`
    /// comments are skipped; errors cite the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", k + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", k + 1)))?;
            c.set(key.trim(), value.trim()).map_err(at)?;
        }
        c.edit.validate()?;
        Neighborhood::new(c.edit.neighborhood.radius, c.edit.neighborhood.include_self)?;
        Ok(c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    /// Model shape for latents of `height × width × channels`.
    pub fn model(&self, height: usize, width: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            height,
            width,
            channels,
            dim: self.dim,
            heads: self.heads,
            ..ModelConfig::default()
        }
        .with_blocks(self.blocks)
    }

    pub fn require<'a>(&self, key: &str, v: &'a Option<PathBuf>) -> Result<&'a Path> {
        v.as_deref()
            .ok_or_else(|| Error::Config(format!("{key} is not set")))
    }
}

/// Key table for `--help`.
pub fn key_help() -> String {
    let mut out = String::from("Config keys (key=value, one per line, # comments):\n");
    let w = KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    for (k, d, m) in KEYS {
        let d = if d.is_empty() { "(unset)" } else { d };
        let _ = writeln!(out, "  {k:<w$}  default {d:<12} {m}");
    }
    out.push_str("\nCorpus spec keys: ");
    out.push_str(&CorpusSpec::KEYS.join(", "));
    out.push('\n');
    out
}
