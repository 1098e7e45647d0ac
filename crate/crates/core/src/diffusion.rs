//! Noise schedules, the deterministic DDIM step and source inversion.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::Bundle;
use crate::model::{denoise, DenoiserWeights};
use crate::record::{AttentionRecord, BlockMaps};
use crate::str_score::{str_score, BlockScore, Neighborhood, StrScore};
use crate::tensor::{Real, Tensor};
use crate::vocab;

/// Smallest accepted `σ_T / α_T`.
pub const SNR_FLOOR: f64 = 100.0;
const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 20.0;
const COSINE_OFFSET: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    LinearBeta,
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear-beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (linear-beta, cosine)"))),
        }
    }

    /// `ᾱ` at continuous noise level `s ∈ [0, 1]`.
    pub fn alpha_bar(self, s: f64) -> f64 {
        match self {
            ScheduleKind::LinearBeta => (-(BETA_MIN * s + 0.5 * (BETA_MAX - BETA_MIN) * s * s)).exp(),
            ScheduleKind::Cosine => {
                let c = (std::f64::consts::FRAC_PI_2 * s * (1.0 - COSINE_OFFSET)).cos();
                c * c
            }
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::LinearBeta => "linear-beta",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// Variance-preserving schedule sampled at `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    /// Noise level fed to the denoiser at step `t`.
    pub fn time(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    let mut alpha = vec![1.0];
    let mut sigma = vec![0.0];
    for t in 1..=steps {
        let ab = kind.alpha_bar(t as f64 / steps as f64);
        alpha.push(ab.sqrt());
        sigma.push((1.0 - ab).sqrt());
    }
    let sched = NoiseSchedule { kind, alpha, sigma };
    let monotone = sched.alpha.windows(2).all(|w| w[1] < w[0]) && sched.sigma.windows(2).all(|w| w[1] > w[0]);
    if !monotone {
        return Err(Error::Config(format!("{kind} schedule with {steps} steps is not strictly monotone")));
    }
    if sched.sigma[steps] / sched.alpha[steps] < SNR_FLOOR {
        return Err(Error::Config(format!("{kind} schedule ends with σ/α below {SNR_FLOOR}")));
    }
    Ok(sched)
}

/// Deterministic step between adjacent noise levels:
/// `x̂0 = (z − σ_from·ε)/α_from`, result `α_to·x̂0 + σ_to·ε`.
pub fn ddim_step<F: Real>(
    z: &Tensor<F>,
    eps: &Tensor<F>,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if t_from.abs_diff(t_to) != 1 {
        return Err(Error::Contract(format!("DDIM steps must be adjacent, got {t_from} -> {t_to}")));
    }
    if t_from.max(t_to) > sched.steps() {
        return Err(Error::Contract(format!("step {} beyond T={}", t_from.max(t_to), sched.steps())));
    }
    let (af, sf) = (F::of(sched.alpha[t_from]), F::of(sched.sigma[t_from]));
    let (at, st) = (F::of(sched.alpha[t_to]), F::of(sched.sigma[t_to]));
    z.zip_map(eps, |z, e| at * ((z - sf * e) / af) + st * e)
        .map_err(|_| Error::shape("ddim_step", z.shape(), eps.shape()))
}

/// `ε_u + s·(ε_c − ε_u)`; scale 1 returns `ε_c` exactly.
pub fn cfg_combine<F: Real>(cond: &Tensor<F>, uncond: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape("cfg_combine", cond.shape(), uncond.shape()));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    let s = F::of(scale);
    cond.zip_map(uncond, |c, u| u + s * (c - u))
}

/// Noise prediction under guidance: one call when `scale == 1`, two otherwise.
pub fn guided_eps<F: Real>(
    weights: &DenoiserWeights<F>,
    z: &Tensor<F>,
    time: f64,
    cond: &[usize],
    uncond: &[usize],
    scale: f64,
) -> Result<(Tensor<F>, AttentionRecord<F>)> {
    let (ec, record) = denoise(weights, z, time, cond)?;
    if scale == 1.0 {
        return Ok((ec, record));
    }
    let (eu, _) = denoise(weights, z, time, uncond)?;
    Ok((cfg_combine(&ec, &eu, scale)?, record))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvertOptions {
    pub cfg_scale_inv: f64,
    pub neighborhood: Neighborhood,
    /// Also keep raw attention maps (needed by the concatenated-map baseline).
    pub keep_maps: bool,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions {
            cfg_scale_inv: 1.0,
            neighborhood: Neighborhood::default(),
            keep_maps: false,
        }
    }
}

/// Everything inversion stores about the source.
///
/// `latents[t]` is `z_t` for `t = 0..=T`; `eps[t]` drove the step `t → t+1`;
/// `omega[t-1]` and `maps[t-1]` come from the denoiser call at `z_t`,
/// `t = 1..=T`, so they line up with the generation step that starts at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub schedule: ScheduleKind,
    pub prompt: String,
    pub options: InvertOptions,
    pub latents: Vec<Tensor<F>>,
    pub eps: Vec<Tensor<F>>,
    pub omega: Vec<StrScore<F>>,
    pub maps: Option<Vec<AttentionRecord<F>>>,
}

/// Runs the source forward in noise level, storing the trajectory.
pub fn invert<F: Real>(
    weights: &DenoiserWeights<F>,
    z0: &Tensor<F>,
    prompt: &str,
    sched: &NoiseSchedule,
    options: InvertOptions,
) -> Result<Trajectory<F>> {
    if !z0.all_finite() {
        return Err(Error::Numeric("source latent is not finite".into()));
    }
    let tokens = vocab::tokenize(prompt);
    let steps = sched.steps();
    let mut traj = Trajectory {
        schedule: sched.kind,
        prompt: prompt.to_string(),
        options,
        latents: vec![z0.clone()],
        eps: Vec::with_capacity(steps),
        omega: Vec::with_capacity(steps),
        maps: options.keep_maps.then(Vec::new),
    };
    for t in 0..=steps {
        let z = &traj.latents[t];
        let (eps, record) = guided_eps(weights, z, sched.time(t), &tokens, &[], options.cfg_scale_inv)
            .map_err(|e| e.context(format!("inversion step {t}")))?;
        if t > 0 {
            traj.omega.push(str_score(&record, options.neighborhood, t)?);
            if let Some(maps) = traj.maps.as_mut() {
                maps.push(record);
            }
        }
        if t < steps {
            let next = ddim_step(z, &eps, t, t + 1, sched)?;
            if !next.all_finite() {
                return Err(Error::Numeric(format!("inversion diverged at step {t}")));
            }
            traj.latents.push(next);
            traj.eps.push(eps);
        }
    }
    Ok(traj)
}

impl<F: Real> Trajectory<F> {
    pub fn steps(&self) -> usize {
        self.eps.len()
    }

    pub fn z_t(&self) -> &Tensor<F> {
        self.latents.last().expect("non-empty trajectory")
    }

    pub fn omega_at(&self, t: usize) -> Result<&StrScore<F>> {
        t.checked_sub(1)
            .and_then(|k| self.omega.get(k))
            .ok_or_else(|| Error::Input(format!("no stored source score at t={t}")))
    }

    pub fn maps_at(&self, t: usize) -> Result<&AttentionRecord<F>> {
        let maps = self
            .maps
            .as_ref()
            .ok_or_else(|| Error::Input("trajectory holds no raw attention maps; invert with maps kept".into()))?;
        t.checked_sub(1)
            .and_then(|k| maps.get(k))
            .ok_or_else(|| Error::Input(format!("no stored source maps at t={t}")))
    }

    /// Walks back from `z_T` with the stored noise predictions.
    pub fn replay(&self, sched: &NoiseSchedule) -> Result<Tensor<F>> {
        let mut z = self.z_t().clone();
        for t in (1..=self.steps()).rev() {
            z = ddim_step(&z, &self.eps[t - 1], t, t - 1, sched)?;
        }
        Ok(z)
    }

    pub fn check(&self, sched: &NoiseSchedule) -> Result<()> {
        let steps = sched.steps();
        let ok = self.latents.len() == steps + 1
            && self.eps.len() == steps
            && self.omega.len() == steps
            && self.omega.iter().enumerate().all(|(k, s)| s.timestep == k + 1)
            && self.maps.as_ref().is_none_or(|m| m.len() == steps)
            && self.schedule == sched.kind;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "trajectory ({} steps, {} schedule) does not match a {}-step {} schedule",
                self.steps(),
                self.schedule,
                steps,
                sched.kind
            )))
        }
    }

    pub fn to_bundle(&self) -> Bundle<F> {
        let mut b = Bundle::default();
        b.meta.insert("kind".into(), "trajectory".into());
        b.meta.insert("steps".into(), self.steps().to_string());
        b.meta.insert("schedule".into(), self.schedule.to_string());
        b.meta.insert("prompt".into(), self.prompt.clone());
        b.meta.insert("radius".into(), self.options.neighborhood.radius.to_string());
        b.meta.insert("include_self".into(), self.options.neighborhood.include_self.to_string());
        b.meta.insert("cfg_scale_inv".into(), self.options.cfg_scale_inv.to_string());
        b.meta.insert(
            "blocks".into(),
            self.omega
                .first()
                .map(|s| s.blocks.iter().map(|b| b.block.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_default(),
        );
        for (t, z) in self.latents.iter().enumerate() {
            b.tensors.insert(format!("z.{t}"), z.clone());
        }
        for (t, e) in self.eps.iter().enumerate() {
            b.tensors.insert(format!("eps.{t}"), e.clone());
        }
        for s in &self.omega {
            for blk in &s.blocks {
                b.tensors.insert(format!("omega.t{}.b{}", s.timestep, blk.block), blk.omega.clone());
            }
        }
        if let Some(maps) = &self.maps {
            for (k, rec) in maps.iter().enumerate() {
                for m in &rec.blocks {
                    b.tensors.insert(format!("self.t{}.b{}", k + 1, m.block), m.self_map.clone());
                    b.tensors.insert(format!("temporal.t{}.b{}", k + 1, m.block), m.temporal_map.clone());
                }
            }
        }
        b
    }

    pub fn from_bundle(b: &Bundle<F>) -> Result<Self> {
        if b.meta("kind")? != "trajectory" {
            return Err(Error::Input("bundle is not a trajectory".into()));
        }
        let parse = |k: &str| -> Result<usize> {
            b.meta(k)?
                .parse()
                .map_err(|_| Error::Input(format!("trajectory metadata {k} is not an integer")))
        };
        let steps = parse("steps")?;
        let radius = parse("radius")?;
        let include_self = b.meta("include_self")? == "true";
        let cfg_scale_inv = b
            .meta("cfg_scale_inv")?
            .parse()
            .map_err(|_| Error::Input("trajectory metadata cfg_scale_inv is not a number".into()))?;
        let blocks: Vec<usize> = b
            .meta("blocks")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Input(format!("bad block id {s:?}"))))
            .collect::<Result<_>>()?;
        let latents = (0..=steps).map(|t| b.tensor(&format!("z.{t}")).cloned()).collect::<Result<_>>()?;
        let eps = (0..steps).map(|t| b.tensor(&format!("eps.{t}")).cloned()).collect::<Result<_>>()?;
        let omega = (1..=steps)
            .map(|t| {
                let blocks = blocks
                    .iter()
                    .map(|&k| {
                        Ok(BlockScore {
                            block: k,
                            omega: b.tensor(&format!("omega.t{t}.b{k}"))?.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(StrScore { timestep: t, blocks })
            })
            .collect::<Result<_>>()?;
        let has_maps = blocks
            .first()
            .is_some_and(|k| b.tensors.contains_key(&format!("self.t1.b{k}")));
        let maps = if has_maps {
            Some(
                (1..=steps)
                    .map(|t| {
                        let blocks = blocks
                            .iter()
                            .map(|&k| {
                                Ok(BlockMaps {
                                    block: k,
                                    self_map: b.tensor(&format!("self.t{t}.b{k}"))?.clone(),
                                    temporal_map: b.tensor(&format!("temporal.t{t}.b{k}"))?.clone(),
                                })
                            })
                            .collect::<Result<_>>()?;
                        Ok(AttentionRecord { blocks })
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Trajectory {
            schedule: ScheduleKind::parse(b.meta("schedule")?)?,
            prompt: b.meta("prompt")?.to_string(),
            options: InvertOptions {
                cfg_scale_inv,
                neighborhood: Neighborhood::new(radius, include_self)?,
                keep_maps: has_maps,
            },
            latents,
            eps,
            omega,
            maps,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().write(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&Bundle::read(dir)?)
    }
}

/// Regenerates from `z_T` with re-evaluated single-prompt noise predictions.
pub fn reconstruct<F: Real>(
    weights: &DenoiserWeights<F>,
    traj: &Trajectory<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    traj.check(sched)?;
    let tokens = vocab::tokenize(&traj.prompt);
    let mut z = traj.z_t().clone();
    for t in (1..=sched.steps()).rev() {
        let (eps, _) = guided_eps(weights, &z, sched.time(t), &tokens, &tokens, 1.0)?;
        z = ddim_step(&z, &eps, t, t - 1, sched)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for steps in [2, 10, 50, 200] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!((s.alpha[0], s.sigma[0]), (1.0, 0.0));
                assert!(s.sigma[steps] / s.alpha[steps] >= SNR_FLOOR);
                for t in 0..=steps {
                    assert!((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(make_schedule(1, ScheduleKind::Cosine), Err(Error::Config(_))));
    }

    #[test]
    fn ddim_examples() {
        let sched = NoiseSchedule {
            kind: ScheduleKind::LinearBeta,
            alpha: vec![1.0, 0.9, 0.8],
            sigma: vec![0.0, (1.0f64 - 0.81).sqrt(), 0.6],
        };
        let z = Tensor::<f64>::from_f64(&[1], &[0.8]).unwrap();
        let e = Tensor::<f64>::zeros(&[1]);
        let out = ddim_step(&z, &e, 2, 1, &sched).unwrap();
        assert!((out.item() - 0.9).abs() < 1e-15);
        assert!(matches!(ddim_step(&z, &e, 2, 0, &sched), Err(Error::Contract(_))));

        let real = make_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let z = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let e = Tensor::<f64>::randn(&[2, 3], &mut rng);
        for t in 0..50 {
            let back = ddim_step(&ddim_step(&z, &e, t, t + 1, &real).unwrap(), &e, t + 1, t, &real).unwrap();
            assert!(back.max_abs_diff(&z) <= 1e-12, "t={t}");
        }
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::<f64>::ones(&[2]);
        let u = Tensor::<f64>::zeros(&[2]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 7.5).unwrap().data(), &[7.5, 7.5]);
        assert_eq!(cfg_combine(&c, &c, 7.5).unwrap(), c);
        assert!(cfg_combine(&c, &Tensor::zeros(&[3]), 2.0).is_err());
    }
}
