//! Source inversion followed by guided regeneration under a target prompt.
//!
//! Before each denoising step the current target latent takes plain gradient
//! steps that pull its relevance scores (or, for the baseline, its raw
//! attention maps) toward those stored for the source at the same noise level.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{ddim_step, guided_eps, invert, make_schedule, InvertOptions, NoiseSchedule, ScheduleKind, Trajectory};
use crate::error::{Error, Result};
use crate::mask::{dilate_mask, mask_mix, LatentMask};
use crate::model::{forward, BlockVars, DenoiserWeights, Output};
use crate::record::AttentionRecord;
use crate::str_score::{omega_var, Neighborhood, StrScore};
use crate::tensor::{Real, Tensor};
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Negative cosine between source and target relevance scores.
    #[default]
    StrCosine,
    /// Squared distance between concatenated raw attention maps.
    ConcatL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptMode {
    /// Target prompt conditional, source prompt in the unconditional slot.
    #[default]
    Cfg,
    /// Target and source tokens as one prompt, null prompt unconditional.
    Concat,
}

/// How per-block scores become one loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean of per-block cosine losses, heads kept apart.
    #[default]
    BlockMean,
    /// As `BlockMean` but scores averaged over heads first.
    HeadMean,
    /// One cosine over all blocks flattened together.
    BlockConcat,
}

macro_rules! named_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl $t {
            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($t), " {:?} (", $($s, " ",)+ ")"), s
                    ))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s,)+ })
            }
        }
    };
}

named_enum!(Objective, Objective::StrCosine => "str_cosine", Objective::ConcatL2 => "concat_l2");
named_enum!(PromptMode, PromptMode::Cfg => "cfg", PromptMode::Concat => "concat");
named_enum!(Aggregation, Aggregation::BlockMean => "block_mean", Aggregation::HeadMean => "head_mean", Aggregation::BlockConcat => "block_concat");

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    pub lambda: f64,
    pub steps: usize,
    pub cfg_scale: f64,
    pub cfg_scale_inv: f64,
    pub neighborhood: Neighborhood,
    pub opt_steps_per_t: usize,
    pub use_mask: bool,
    pub dilate_radius: usize,
    pub objective: Objective,
    pub baseline_lambda: f64,
    pub prompt_mode: PromptMode,
    pub aggregation: Aggregation,
    pub schedule: ScheduleKind,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            lambda: 0.01,
            steps: 50,
            cfg_scale: 7.5,
            cfg_scale_inv: 1.0,
            neighborhood: Neighborhood::default(),
            opt_steps_per_t: 1,
            use_mask: false,
            dilate_radius: 1,
            objective: Objective::StrCosine,
            baseline_lambda: 0.08,
            prompt_mode: PromptMode::Cfg,
            aggregation: Aggregation::BlockMean,
            schedule: ScheduleKind::LinearBeta,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda) || !finite_nonneg(self.baseline_lambda) {
            return Err(Error::Config("step sizes must be finite and nonnegative".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.opt_steps_per_t == 0 {
            return Err(Error::Config("opt_steps_per_t must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() || !self.cfg_scale_inv.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        Neighborhood::new(self.neighborhood.radius, self.neighborhood.include_self)?;
        Ok(())
    }

    /// Step size of the active objective.
    pub fn step_size(&self) -> f64 {
        match self.objective {
            Objective::StrCosine => self.lambda,
            Objective::ConcatL2 => self.baseline_lambda,
        }
    }

    pub fn invert_options(&self) -> InvertOptions {
        InvertOptions {
            cfg_scale_inv: self.cfg_scale_inv,
            neighborhood: self.neighborhood,
            keep_maps: self.objective == Objective::ConcatL2,
        }
    }

    /// `(conditional, unconditional)` token lists for generation.
    pub fn prompt_pair(&self, src: &str, tgt: &str) -> (Vec<usize>, Vec<usize>) {
        match self.prompt_mode {
            PromptMode::Cfg => (vocab::tokenize(tgt), vocab::tokenize(src)),
            PromptMode::Concat => {
                let mut both = vocab::tokenize(tgt);
                both.extend(vocab::tokenize(src));
                (both, Vec::new())
            }
        }
    }
}

/// Scalar loss between tape-connected target maps and stored source scores.
pub fn str_loss<'t, F: Real>(
    maps: &[BlockVars<'t, F>],
    source: &StrScore<F>,
    nbhd: Neighborhood,
    aggregation: Aggregation,
) -> Result<Var<'t, F>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("the denoiser retains no blocks for scoring".into()))?;
    let tape = first.self_map.tape();
    if maps.len() != source.blocks.len() {
        return Err(Error::Input(format!(
            "{} retained blocks but {} stored source scores",
            maps.len(),
            source.blocks.len()
        )));
    }
    let mut pairs = Vec::with_capacity(maps.len());
    for m in maps {
        let tgt = omega_var(m.self_map, m.temporal_map, nbhd)?;
        let src = tape.constant(source.block(m.block)?.omega.clone());
        pairs.push(match aggregation {
            Aggregation::HeadMean => {
                let h = F::of(1.0 / tgt.shape()[0] as f64);
                (src.sum_axis(0)?.scale(h), tgt.sum_axis(0)?.scale(h))
            }
            _ => (src, tgt),
        });
    }
    if aggregation == Aggregation::BlockConcat {
        let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let tgt: Vec<_> = pairs.iter().map(|p| p.1).collect();
        return tape.concat_flat(&src)?.cosine_loss(tape.concat_flat(&tgt)?);
    }
    let mut total: Option<Var<'t, F>> = None;
    for (src, tgt) in pairs {
        let l = src.cosine_loss(tgt)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    Ok(total.expect("non-empty").scale(F::of(1.0 / maps.len() as f64)))
}

/// `Σ ‖maps_tgt − maps_src‖²` over both maps of every retained block.
pub fn concat_l2_loss<'t, F: Real>(maps: &[BlockVars<'t, F>], source: &AttentionRecord<F>) -> Result<Var<'t, F>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("the denoiser retains no blocks".into()))?;
    let tape = first.self_map.tape();
    let mut total: Option<Var<'t, F>> = None;
    for m in maps {
        let src = source.block(m.block)?;
        for (tgt, s) in [(m.self_map, &src.self_map), (m.temporal_map, &src.temporal_map)] {
            let d = tgt.sub(tape.constant(s.clone()))?;
            let l = d.mul(d)?.sum_all();
            total = Some(match total {
                None => l,
                Some(t) => t.add(l)?,
            });
        }
    }
    Ok(total.expect("non-empty"))
}

/// What a guidance pass compares against.
#[derive(Clone, Copy)]
pub enum GuidanceTarget<'a, F> {
    Str(&'a StrScore<F>),
    Maps(&'a AttentionRecord<F>),
}

/// Loss value and latent gradient at `z`.
pub fn guidance_loss_and_grad<F: Real>(
    weights: &DenoiserWeights<F>,
    z: &Tensor<F>,
    time: f64,
    cond: &[usize],
    target: GuidanceTarget<'_, F>,
    config: &EditConfig,
) -> Result<(f64, Tensor<F>)> {
    let tape = Tape::new();
    let params = weights.on_tape(&tape, false);
    let zv = tape.leaf(z.clone(), true);
    let out = forward(&weights.config, &params, zv, time, cond, Output::MapsOnly)?;
    let loss = match target {
        GuidanceTarget::Str(s) => str_loss(&out.maps, s, config.neighborhood, config.aggregation)?,
        GuidanceTarget::Maps(r) => concat_l2_loss(&out.maps, r)?,
    };
    tape.backward(loss)?;
    let grad = tape.grad(zv).unwrap_or_else(|| Tensor::zeros(z.shape()));
    Ok((loss.value().item().as_f64(), grad))
}

/// Result of the per-step latent optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutcome<F> {
    pub z: Tensor<F>,
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Norm of each applied update.
    pub update_norms: Vec<f64>,
}

/// `opt_steps_per_t` plain gradient steps on the configured objective; a
/// zero step size returns `z` untouched without evaluating anything.
pub fn guidance_step<F: Real>(
    weights: &DenoiserWeights<F>,
    z: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
    cond: &[usize],
    target: GuidanceTarget<'_, F>,
    config: &EditConfig,
) -> Result<GuidanceOutcome<F>> {
    let step = config.step_size();
    let mut out = GuidanceOutcome {
        z: z.clone(),
        losses: Vec::new(),
        update_norms: Vec::new(),
    };
    if step == 0.0 {
        return Ok(out);
    }
    let lr = F::of(step);
    for _ in 0..config.opt_steps_per_t {
        let (loss, grad) = guidance_loss_and_grad(weights, &out.z, sched.time(t), cond, target, config)
            .map_err(|e| e.context(format!("guidance at t={t}")))?;
        let update = grad.scale(lr);
        out.z = out.z.sub(&update)?;
        if !out.z.all_finite() {
            return Err(Error::Numeric(format!("guided latent is not finite at t={t}")));
        }
        out.losses.push(loss);
        out.update_norms.push(update.norm().as_f64());
    }
    Ok(out)
}

/// Guidance against raw source maps with the baseline step size.
pub fn baseline_concat_guidance<F: Real>(
    weights: &DenoiserWeights<F>,
    z: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
    cond: &[usize],
    source_maps: &AttentionRecord<F>,
    config: &EditConfig,
) -> Result<GuidanceOutcome<F>> {
    let cfg = EditConfig {
        objective: Objective::ConcatL2,
        ..config.clone()
    };
    guidance_step(weights, z, t, sched, cond, GuidanceTarget::Maps(source_maps), &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub t: usize,
    pub losses: Vec<f64>,
    pub update_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome<F> {
    pub output: Tensor<F>,
    pub log: Vec<StepLog>,
}

/// Full edit of `source` (`[f, h, w, c]` latent). Inverts unless a matching
/// trajectory is supplied.
pub fn edit<F: Real>(
    weights: &DenoiserWeights<F>,
    source: &Tensor<F>,
    src_prompt: &str,
    tgt_prompt: &str,
    config: &EditConfig,
    mask: Option<&LatentMask>,
    trajectory: Option<&Trajectory<F>>,
) -> Result<EditOutcome<F>> {
    config.validate()?;
    if src_prompt.trim().is_empty() || tgt_prompt.trim().is_empty() {
        return Err(Error::Input("source and target prompts must be nonempty".into()));
    }
    let mask = match (config.use_mask, mask) {
        (true, None) => return Err(Error::Config("use_mask is set but no mask was given".into())),
        (false, Some(_)) => return Err(Error::Config("a mask was given but use_mask is off".into())),
        (true, Some(m)) => {
            let s = source.shape();
            if s.len() != 4 || s[..3] != [m.frames, m.height, m.width] {
                return Err(Error::shape("edit mask", &[m.frames, m.height, m.width], s));
            }
            Some(dilate_mask(m, config.dilate_radius))
        }
        (false, None) => None,
    };
    let sched = make_schedule(config.steps, config.schedule)?;
    let owned;
    let traj = match trajectory {
        Some(t) => {
            t.check(&sched)?;
            if t.prompt != src_prompt {
                return Err(Error::Input(format!(
                    "trajectory was inverted with prompt {:?}, not {src_prompt:?}",
                    t.prompt
                )));
            }
            if t.latents[0] != *source {
                return Err(Error::Input("trajectory does not start at the given source latent".into()));
            }
            t
        }
        None => {
            owned = invert(weights, source, src_prompt, &sched, config.invert_options())?;
            &owned
        }
    };
    let (cond, uncond) = config.prompt_pair(src_prompt, tgt_prompt);
    let mut z = traj.z_t().clone();
    let mut log = Vec::with_capacity(config.steps);
    for t in (1..=config.steps).rev() {
        let target = match config.objective {
            Objective::StrCosine => GuidanceTarget::Str(traj.omega_at(t)?),
            Objective::ConcatL2 => GuidanceTarget::Maps(traj.maps_at(t)?),
        };
        let g = guidance_step(weights, &z, t, &sched, &cond, target, config)?;
        z = g.z;
        log.push(StepLog {
            t,
            losses: g.losses,
            update_norms: g.update_norms,
        });
        let (eps, _) = guided_eps(weights, &z, sched.time(t), &cond, &uncond, config.cfg_scale)
            .map_err(|e| e.context(format!("generation step {t}")))?;
        z = ddim_step(&z, &eps, t, t - 1, &sched)?;
        if let Some(m) = &mask {
            z = mask_mix(&z, &traj.latents[t - 1], m)?;
        }
        if !z.all_finite() {
            return Err(Error::Numeric(format!("generation diverged at step {t}")));
        }
    }
    Ok(EditOutcome { output: z, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for o in [Objective::StrCosine, Objective::ConcatL2] {
            assert_eq!(Objective::parse(&o.to_string()).unwrap(), o);
        }
        for a in [Aggregation::BlockMean, Aggregation::HeadMean, Aggregation::BlockConcat] {
            assert_eq!(Aggregation::parse(&a.to_string()).unwrap(), a);
        }
        assert!(matches!(PromptMode::parse("both"), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(EditConfig::default().validate().is_ok());
        let bad = EditConfig { lambda: -1.0, ..EditConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = EditConfig { steps: 1, ..EditConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EditConfig { opt_steps_per_t: 0, ..EditConfig::default() };
        assert!(bad.validate().is_err());
    }
}
