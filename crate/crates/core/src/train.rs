//! Noise-prediction training of the toy denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::model::{forward, DenoiserWeights, ModelConfig, Output};
use crate::tensor::{Real, Tensor};

/// One training clip: a latent video `[f, h, w, c]` and its prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<F> {
    pub latent: Tensor<F>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability of training a sample against the null prompt.
    pub prompt_dropout: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Size of the fixed batch used for the reported losses.
    pub eval_batch: usize,
    pub schedule: ScheduleKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            learning_rate: 2e-3,
            batch_size: 1,
            prompt_dropout: 0.1,
            clip_norm: 1.0,
            eval_batch: 8,
            schedule: ScheduleKind::LinearBeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Fixed-batch loss before the first update.
    pub initial_loss: f64,
    /// Fixed-batch loss after the last update.
    pub final_loss: f64,
    /// Minibatch loss of every step.
    pub step_losses: Vec<f64>,
}

struct Draw<F> {
    clip: usize,
    time: f64,
    noise: Tensor<F>,
    drop_prompt: bool,
}

fn draw<F: Real>(rng: &mut ChaCha8Rng, corpus: &[TrainSample<F>], dropout: f64) -> Draw<F> {
    let clip = rng.random_range(0..corpus.len());
    let time = rng.random_range(1e-3..=1.0);
    let noise = Tensor::randn(corpus[clip].latent.shape(), rng);
    let drop_prompt = rng.random_bool(dropout);
    Draw {
        clip,
        time,
        noise,
        drop_prompt,
    }
}

/// Squared error of the noise prediction for each draw, summed on `tape`
/// and scaled by `1 / draws.len()`.
fn batch_loss<'t, F: Real>(
    tape: &'t Tape<F>,
    weights: &DenoiserWeights<F>,
    params: &crate::model::ParamVars<'t, F>,
    corpus: &[TrainSample<F>],
    draws: &[Draw<F>],
    schedule: ScheduleKind,
) -> Result<crate::autodiff::Var<'t, F>> {
    let mut total: Option<crate::autodiff::Var<'t, F>> = None;
    for d in draws {
        let sample = &corpus[d.clip];
        let ab = schedule.alpha_bar(d.time);
        let (a, s) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let zt = sample.latent.zip_map(&d.noise, |z, e| a * z + s * e)?;
        let tokens: &[usize] = if d.drop_prompt { &[] } else { &sample.tokens };
        let out = forward(&weights.config, params, tape.constant(zt), d.time, tokens, Output::Full)?;
        let diff = out.eps.expect("full output").sub(tape.constant(d.noise.clone()))?;
        let l = diff.mul(diff)?.mean_all();
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    Ok(total.expect("non-empty batch").scale(F::of(1.0 / draws.len() as f64)))
}

/// Loss over `draws` without recording gradients.
fn eval<F: Real>(weights: &DenoiserWeights<F>, corpus: &[TrainSample<F>], draws: &[Draw<F>], schedule: ScheduleKind) -> Result<f64> {
    let tape = Tape::new();
    let p = weights.on_tape(&tape, false);
    Ok(batch_loss(&tape, weights, &p, corpus, draws, schedule)?.value().item().as_f64())
}

struct Adam<F> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains with Adam on the noise-prediction objective; seeded and reproducible.
pub fn train_toy_denoiser<F: Real>(
    corpus: &[TrainSample<F>],
    model: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(DenoiserWeights<F>, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_batch == 0 || !(0.0..1.0).contains(&cfg.prompt_dropout) || cfg.learning_rate <= 0.0 {
        return Err(Error::Config(
            "batch sizes and learning rate must be positive, dropout in [0, 1)".into(),
        ));
    }
    let expected = [model.height, model.width, model.channels];
    if let Some(bad) = corpus.iter().find(|s| s.latent.rank() != 4 || s.latent.shape()[1..] != expected) {
        return Err(Error::shape("training latent", bad.latent.shape(), &expected));
    }
    let mut weights = DenoiserWeights::<F>::init(model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let eval_draws: Vec<_> = (0..cfg.eval_batch).map(|_| draw(&mut eval_rng, corpus, 0.0)).collect();
    let initial_loss = eval(&weights, corpus, &eval_draws, cfg.schedule)?;

    let names: Vec<String> = weights.params.keys().cloned().collect();
    let mut adam = Adam {
        m: names.iter().map(|n| Tensor::zeros(weights.params[n].shape())).collect(),
        v: names.iter().map(|n| Tensor::zeros(weights.params[n].shape())).collect(),
        t: 0,
    };
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws: Vec<_> = (0..cfg.batch_size)
            .map(|_| draw(&mut rng, corpus, cfg.prompt_dropout))
            .collect();
        let tape = Tape::new();
        let p = weights.on_tape(&tape, true);
        let loss = batch_loss(&tape, &weights, &p, corpus, &draws, cfg.schedule)?;
        let lv = loss.value().item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("training loss is not finite at step {step}")));
        }
        step_losses.push(lv);
        tape.backward(loss)?;
        let grads: Vec<Tensor<F>> = names
            .iter()
            .map(|n| {
                let var = p.get(n).expect("parameter on tape");
                tape.grad(var).unwrap_or_else(|| Tensor::zeros(&var.shape()))
            })
            .collect();
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        adam.t += 1;
        let bc1 = 1.0 - BETA1.powi(adam.t);
        let bc2 = 1.0 - BETA2.powi(adam.t);
        let lr = F::of(cfg.learning_rate);
        let (b1, b2) = (F::of(BETA1), F::of(BETA2));
        let (c1, c2, eps, clip) = (F::of(1.0 / bc1), F::of(1.0 / bc2), F::of(ADAM_EPS), F::of(clip));
        for (k, name) in names.iter().enumerate() {
            let w = weights.params.get_mut(name).expect("parameter");
            let (m, v) = (adam.m[k].data_mut(), adam.v[k].data_mut());
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                let g = g * clip;
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *w -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
            }
        }
    }
    weights.validate()?;
    let final_loss = eval(&weights, corpus, &eval_draws, cfg.schedule)?;
    Ok((
        weights,
        TrainReport {
            initial_loss,
            final_loss,
            step_losses,
        },
    ))
}
