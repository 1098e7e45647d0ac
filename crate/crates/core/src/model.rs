//! Small text-to-video noise predictor with factorized attention.
//!
//! Each block applies, with residual connections: conditioning injection,
//! per-frame spatial self-attention, per-pixel temporal attention and a
//! pointwise MLP. Blocks sit on two resolution levels (0 = full latent grid,
//! 1 = 2× average pooled); moving down pools, moving up repeats pixels and
//! adds the skip saved on the way down. The post-softmax maps of every block
//! flagged `include_in_str` are kept for relevance scoring.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::formats::Bundle;
use crate::record::{AttentionRecord, BlockMaps};
use crate::tensor::{Real, Tensor};
use crate::vocab;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    /// 0 = full latent resolution, 1 = half resolution.
    pub level: usize,
    pub include_in_str: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Feature width `d`.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: Vec<BlockSpec>,
    /// Adds a sinusoidal frame-index code at the input.
    pub frame_pos_enc: bool,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            channels: 3,
            dim: 32,
            heads: 2,
            mlp_ratio: 2,
            blocks: Self::layout(4),
            frame_pos_enc: true,
            vocab_size: vocab::size(),
        }
    }
}

impl ModelConfig {
    /// Default block layout for `count` blocks: the first and last sit at full
    /// resolution, the rest at half resolution; only half-resolution blocks
    /// feed relevance scores.
    pub fn layout(count: usize) -> Vec<BlockSpec> {
        (0..count)
            .map(|k| {
                let level = usize::from(k != 0 && (k != count - 1 || count == 2));
                BlockSpec {
                    level,
                    include_in_str: level > 0,
                }
            })
            .collect()
    }

    pub fn with_blocks(mut self, count: usize) -> Self {
        self.blocks = Self::layout(count);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "latent grid {}x{} must have even positive sides",
                self.height, self.width
            )));
        }
        if self.blocks.len() < 2 {
            return Err(Error::Config("the denoiser needs at least two blocks".into()));
        }
        if self.blocks.iter().any(|b| b.level > 1) {
            return Err(Error::Config("only resolution levels 0 and 1 exist".into()));
        }
        if !(self.blocks.iter().any(|b| b.level == 0) && self.blocks.iter().any(|b| b.level == 1)) {
            return Err(Error::Config("blocks must cover both resolution levels".into()));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.vocab_size < 2 {
            return Err(Error::Config("channels, mlp_ratio and vocabulary must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self, level: usize) -> usize {
        (self.height >> level) * (self.width >> level)
    }
}

/// Tokenized prompt plus its embedding vector under a given set of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<F> {
    pub tokens: Vec<usize>,
    pub vector: Tensor<F>,
}

impl<F: Real> PromptEmbedding<F> {
    pub fn new(text: &str, weights: &DenoiserWeights<F>) -> Result<Self> {
        Self::from_tokens(vocab::tokenize(text), weights)
    }

    /// Mean of the token embeddings; no tokens selects the null-prompt row.
    pub fn from_tokens(tokens: Vec<usize>, weights: &DenoiserWeights<F>) -> Result<Self> {
        let table = weights.param("prompt.table")?;
        let mix = token_mix::<F>(&tokens, weights.config.vocab_size)?;
        let vector = crate::autodiff::matmul(&mix, table)?.into_reshape(&[weights.config.dim])?;
        Ok(PromptEmbedding { tokens, vector })
    }

    /// Prompt pair written as one token sequence (target words first).
    pub fn concatenated(first: &Self, second: &Self, weights: &DenoiserWeights<F>) -> Result<Self> {
        let mut tokens = first.tokens.clone();
        tokens.extend(&second.tokens);
        Self::from_tokens(tokens, weights)
    }
}

/// `[1, V]` row of token frequencies.
fn token_mix<F: Real>(tokens: &[usize], vocab_size: usize) -> Result<Tensor<F>> {
    let mut mix = Tensor::zeros(&[1, vocab_size]);
    if tokens.is_empty() {
        mix.data_mut()[vocab::NULL_ID] = F::one();
        return Ok(mix);
    }
    let w = F::one() / F::of(tokens.len() as f64);
    for &t in tokens {
        if t >= vocab_size {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {vocab_size}")));
        }
        mix.data_mut()[t] += w;
    }
    Ok(mix)
}

/// Named parameters of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<F> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<F>>,
}

fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ch, hid) = (c.dim, c.channels, c.dim * c.mlp_ratio);
    let mut out = vec![
        ("in.w".to_string(), vec![ch, d]),
        ("in.b".to_string(), vec![d]),
        ("cond.time.w".to_string(), vec![d, d]),
        ("cond.b".to_string(), vec![d]),
        ("prompt.table".to_string(), vec![c.vocab_size, d]),
        ("out.ln.g".to_string(), vec![d]),
        ("out.w".to_string(), vec![d, ch]),
        ("out.b".to_string(), vec![ch]),
    ];
    for k in 0..c.blocks.len() {
        let p = |s: &str| format!("blk{k}.{s}");
        out.extend([
            (p("cond.w"), vec![d, d]),
            (p("cond.b"), vec![d]),
            (p("ln1.g"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln3.g"), vec![d]),
            (p("mlp.w1"), vec![d, hid]),
            (p("mlp.b1"), vec![hid]),
            (p("mlp.w2"), vec![hid, d]),
            (p("mlp.b2"), vec![d]),
        ]);
        for a in ["sa", "ta"] {
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("{a}.{m}")), vec![d, d]));
            }
        }
    }
    out
}

impl<F: Real> DenoiserWeights<F> {
    /// Seeded random initialisation.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with(".g") {
                Tensor::ones(&shape)
            } else if name.ends_with(".b") || name.contains(".b1") || name.contains(".b2") {
                Tensor::zeros(&shape)
            } else if name == "prompt.table" {
                Tensor::randn(&shape, &mut rng)
            } else {
                let fan_in = shape[0] as f64;
                let mut gain = 1.0;
                if name.ends_with(".o") || name.ends_with("mlp.w2") {
                    gain = 0.5;
                }
                Tensor::<F>::randn(&shape, &mut rng).scale(F::of(gain / fan_in.sqrt()))
            };
            params.insert(name, t);
        }
        Ok(DenoiserWeights { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Input(format!("missing parameter {name}")))
    }

    /// Checks names, shapes and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = param_shapes(&self.config);
        if expected.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.param(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), &shape));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> DenoiserWeights<G> {
        DenoiserWeights {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts every parameter on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t Tape<F>, requires_grad: bool) -> ParamVars<'t, F> {
        ParamVars {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

impl<F: Real> DenoiserWeights<F> {
    /// Checkpoint bundle: one tensor per parameter plus the model config as metadata.
    pub fn to_bundle(&self) -> Bundle<F> {
        let c = &self.config;
        let mut b = Bundle::default();
        for (k, v) in [
            ("kind", "denoiser".to_string()),
            ("height", c.height.to_string()),
            ("width", c.width.to_string()),
            ("channels", c.channels.to_string()),
            ("dim", c.dim.to_string()),
            ("heads", c.heads.to_string()),
            ("mlp_ratio", c.mlp_ratio.to_string()),
            ("frame_pos_enc", c.frame_pos_enc.to_string()),
            ("vocab_size", c.vocab_size.to_string()),
            (
                "blocks",
                c.blocks
                    .iter()
                    .map(|b| format!("{}{}", b.level, if b.include_in_str { "+" } else { "" }))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ] {
            b.meta.insert(k.to_string(), v);
        }
        b.tensors = self.params.clone();
        b
    }

    pub fn from_bundle(b: Bundle<F>) -> Result<Self> {
        if b.meta("kind")? != "denoiser" {
            return Err(Error::Input("bundle is not a denoiser checkpoint".into()));
        }
        let num = |k: &str| -> Result<usize> {
            b.meta(k)?
                .parse()
                .map_err(|_| Error::Input(format!("checkpoint metadata {k} is not an integer")))
        };
        let blocks = b
            .meta("blocks")?
            .split(',')
            .map(|s| {
                let (lvl, flag) = s.strip_suffix('+').map_or((s, false), |l| (l, true));
                let level = lvl
                    .parse()
                    .map_err(|_| Error::Input(format!("bad block descriptor {s:?}")))?;
                Ok(BlockSpec {
                    level,
                    include_in_str: flag,
                })
            })
            .collect::<Result<_>>()?;
        let config = ModelConfig {
            height: num("height")?,
            width: num("width")?,
            channels: num("channels")?,
            dim: num("dim")?,
            heads: num("heads")?,
            mlp_ratio: num("mlp_ratio")?,
            blocks,
            frame_pos_enc: b.meta("frame_pos_enc")? == "true",
            vocab_size: num("vocab_size")?,
        };
        let w = DenoiserWeights {
            config,
            params: b.tensors,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().write(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(Bundle::read(dir)?)
    }
}

/// Parameters recorded on a tape.
pub struct ParamVars<'t, F: Real> {
    vars: HashMap<String, Var<'t, F>>,
}

impl<'t, F: Real> ParamVars<'t, F> {
    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, F>)> {
        self.vars.iter()
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy)]
pub struct AttnWeights<'t, F: Real> {
    pub q: Var<'t, F>,
    pub k: Var<'t, F>,
    pub v: Var<'t, F>,
    pub o: Var<'t, F>,
}

impl<'t, F: Real> AttnWeights<'t, F> {
    fn load(p: &ParamVars<'t, F>, prefix: &str) -> Result<Self> {
        Ok(AttnWeights {
            q: p.get(&format!("{prefix}.q"))?,
            k: p.get(&format!("{prefix}.k"))?,
            v: p.get(&format!("{prefix}.v"))?,
            o: p.get(&format!("{prefix}.o"))?,
        })
    }
}

/// Multi-head attention over axis 1 of `[B, L, d]`; returns the output and
/// the `[B, h, L, L]` post-softmax map.
fn multi_head<'t, F: Real>(
    x: Var<'t, F>,
    w: &AttnWeights<'t, F>,
    heads: usize,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let shape = x.shape();
    let [b, l, d] = shape[..] else {
        return Err(Error::Contract(format!("attention input must be rank 3, got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("feature width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |v: Var<'t, F>, perm: &[usize]| v.reshape(&[b, l, heads, dh])?.permute(perm);
    let q = split(x.matmul(w.q)?, &[0, 2, 1, 3])?;
    let kt = split(x.matmul(w.k)?, &[0, 2, 3, 1])?;
    let v = split(x.matmul(w.v)?, &[0, 2, 1, 3])?;
    let scores = q.matmul(kt)?.scale(F::of(1.0 / (dh as f64).sqrt()));
    let map = scores.softmax_last();
    let out = map
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, l, d])?
        .matmul(w.o)?;
    Ok((out, map))
}

/// Per-frame attention between pixels. `features` is `[f, n, d]`; the map is `[f, h, n, n]`.
pub fn spatial_self_attention<'t, F: Real>(
    features: Var<'t, F>,
    w: &AttnWeights<'t, F>,
    heads: usize,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    multi_head(features, w, heads)
}

/// Per-pixel attention between frames. `features` is `[f, n, d]`; the map is `[n, h, f, f]`.
pub fn temporal_attention<'t, F: Real>(
    features: Var<'t, F>,
    w: &AttnWeights<'t, F>,
    heads: usize,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let (out, map) = multi_head(features.permute(&[1, 0, 2])?, w, heads)?;
    Ok((out.permute(&[1, 0, 2])?, map))
}

/// Tape-connected maps of one retained block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars<'t, F: Real> {
    pub block: usize,
    pub self_map: Var<'t, F>,
    pub temporal_map: Var<'t, F>,
}

pub struct Forward<'t, F: Real> {
    /// Noise prediction `[f, H, W, c]`; absent when only maps were requested.
    pub eps: Option<Var<'t, F>>,
    pub maps: Vec<BlockVars<'t, F>>,
}

/// Sinusoidal code of `pos` over `dim` channels.
pub fn sinusoid<F: Real>(pos: f64, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = F::of((pos * freq).sin());
        out[half + k] = F::of((pos * freq).cos());
    }
    out
}

/// `[n, d]` code of the pixel grid: first half rows, second half columns.
fn grid_code<F: Real>(h: usize, w: usize, d: usize) -> Tensor<F> {
    let half = d / 2;
    let mut out = Vec::with_capacity(h * w * d);
    for y in 0..h {
        let ry = sinusoid::<F>(y as f64, half);
        for x in 0..w {
            out.extend_from_slice(&ry);
            out.extend(sinusoid::<F>(x as f64, d - half));
        }
    }
    Tensor::from_parts(vec![h * w, d], out)
}

fn frame_code<F: Real>(frames: usize, d: usize) -> Tensor<F> {
    let mut out = Vec::with_capacity(frames * d);
    for i in 0..frames {
        out.extend(sinusoid::<F>(i as f64, d));
    }
    Tensor::from_parts(vec![frames, 1, d], out)
}

/// What a forward pass must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    /// Noise prediction and retained maps.
    Full,
    /// Stop after the last retained block.
    MapsOnly,
}

/// Runs the denoiser on `tape`. `time` is the noise level in `[0, 1]`.
pub fn forward<'t, F: Real>(
    config: &ModelConfig,
    p: &ParamVars<'t, F>,
    z: Var<'t, F>,
    time: f64,
    tokens: &[usize],
    output: Output,
) -> Result<Forward<'t, F>> {
    let tape = z.tape();
    let shape = z.shape();
    let (hh, ww, ch, d) = (config.height, config.width, config.channels, config.dim);
    if shape.len() != 4 || shape[1..] != [hh, ww, ch] {
        return Err(Error::shape("denoise input", &shape, &[0, hh, ww, ch]));
    }
    if !(0.0..=1.0).contains(&time) {
        return Err(Error::Contract(format!("noise level {time} outside [0, 1]")));
    }
    let f = shape[0];

    let mut x = z
        .reshape(&[f, hh * ww, ch])?
        .matmul(p.get("in.w")?)?
        .add(p.get("in.b")?)?
        .add(tape.constant(grid_code(hh, ww, d)))?;
    if config.frame_pos_enc {
        x = x.add(tape.constant(frame_code(f, d)))?;
    }

    let temb = tape.constant(Tensor::from_parts(vec![1, d], sinusoid(time * 1000.0, d)));
    let mix = tape.constant(token_mix(tokens, config.vocab_size)?);
    let cond = temb
        .matmul(p.get("cond.time.w")?)?
        .add(mix.matmul(p.get("prompt.table")?)?)?
        .add(p.get("cond.b")?)?
        .silu();

    let last_retained = config.blocks.iter().rposition(|b| b.include_in_str);
    let eps_ln = F::of(LN_EPS);
    let mut level = 0;
    let mut grid = (hh, ww);
    let mut skips = Vec::new();
    let mut maps = Vec::new();
    for (k, blk) in config.blocks.iter().enumerate() {
        while level < blk.level {
            skips.push(x);
            x = x.avg_pool2x(grid.0, grid.1)?;
            grid = (grid.0 / 2, grid.1 / 2);
            level += 1;
        }
        while level > blk.level {
            x = x.upsample2x(grid.0, grid.1)?.add(skips.pop().expect("skip per level"))?;
            grid = (grid.0 * 2, grid.1 * 2);
            level -= 1;
        }
        let name = |s: &str| format!("blk{k}.{s}");
        x = x.add(cond.matmul(p.get(&name("cond.w"))?)?.add(p.get(&name("cond.b"))?)?)?;

        let h = x.layer_norm_last(eps_ln).mul(p.get(&name("ln1.g"))?)?;
        let (sa, self_map) = spatial_self_attention(h, &AttnWeights::load(p, &name("sa"))?, config.heads)?;
        x = x.add(sa)?;

        let h = x.layer_norm_last(eps_ln).mul(p.get(&name("ln2.g"))?)?;
        let (ta, temporal_map) = temporal_attention(h, &AttnWeights::load(p, &name("ta"))?, config.heads)?;
        x = x.add(ta)?;

        if blk.include_in_str {
            maps.push(BlockVars {
                block: k,
                self_map,
                temporal_map,
            });
        }
        if output == Output::MapsOnly && Some(k) == last_retained {
            return Ok(Forward { eps: None, maps });
        }

        let h = x.layer_norm_last(eps_ln).mul(p.get(&name("ln3.g"))?)?;
        let m = h
            .matmul(p.get(&name("mlp.w1"))?)?
            .add(p.get(&name("mlp.b1"))?)?
            .silu()
            .matmul(p.get(&name("mlp.w2"))?)?
            .add(p.get(&name("mlp.b2"))?)?;
        x = x.add(m)?;
    }
    while level > 0 {
        x = x.upsample2x(grid.0, grid.1)?.add(skips.pop().expect("skip per level"))?;
        grid = (grid.0 * 2, grid.1 * 2);
        level -= 1;
    }
    let eps = x
        .layer_norm_last(eps_ln)
        .mul(p.get("out.ln.g")?)?
        .matmul(p.get("out.w")?)?
        .add(p.get("out.b")?)?
        .reshape(&[f, hh, ww, ch])?;
    Ok(Forward { eps: Some(eps), maps })
}

impl<'t, F: Real> Forward<'t, F> {
    pub fn record(&self) -> AttentionRecord<F> {
        AttentionRecord {
            blocks: self
                .maps
                .iter()
                .map(|m| BlockMaps {
                    block: m.block,
                    self_map: (*m.self_map.value()).clone(),
                    temporal_map: (*m.temporal_map.value()).clone(),
                })
                .collect(),
        }
    }
}

/// Untracked evaluation: noise prediction plus the retained maps.
pub fn denoise<F: Real>(
    weights: &DenoiserWeights<F>,
    z: &Tensor<F>,
    time: f64,
    tokens: &[usize],
) -> Result<(Tensor<F>, AttentionRecord<F>)> {
    if !z.all_finite() {
        return Err(Error::Numeric("denoiser input is not finite".into()));
    }
    let tape = Tape::new();
    let p = weights.on_tape(&tape, false);
    let out = forward(&weights.config, &p, tape.constant(z.clone()), time, tokens, Output::Full)?;
    let eps = out.eps.expect("full output").value();
    Ok(((*eps).clone(), out.record()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_last;
    use rand::SeedableRng;

    fn attn_weights<'t>(tape: &'t Tape<f64>, d: usize, seed: u64) -> AttnWeights<'t, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = || tape.constant(Tensor::<f64>::randn(&[d, d], &mut rng).scale(0.5));
        AttnWeights {
            q: w(),
            k: w(),
            v: w(),
            o: w(),
        }
    }

    /// softmax(Q Kᵀ / √dh) for one batch entry and head, by scalar loops.
    fn oracle_map(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, b: usize, head: usize, heads: usize) -> Vec<Vec<f64>> {
        let (l, d) = (x.shape()[1], x.shape()[2]);
        let dh = d / heads;
        let proj = |w: &Tensor<f64>, t: usize, c: usize| (0..d).map(|e| x.get(&[b, t, e]) * w.get(&[e, c])).sum::<f64>();
        (0..l)
            .map(|s| {
                let logits: Vec<f64> = (0..l)
                    .map(|t| {
                        (0..dh)
                            .map(|c| proj(wq, s, head * dh + c) * proj(wk, t, head * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let row = Tensor::from_f64(&[l], &logits).unwrap();
                softmax_last(&row).into_data()
            })
            .collect()
    }

    #[test]
    fn spatial_map_matches_direct_formula() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 4, 6], &mut rng);
        let w = attn_weights(&tape, 6, 2);
        let (_, map) = spatial_self_attention(tape.constant(x.clone()), &w, 2).unwrap();
        let map = map.value();
        assert_eq!(map.shape(), &[2, 2, 4, 4]);
        for b in 0..2 {
            for head in 0..2 {
                let want = oracle_map(&x, &w.q.value(), &w.k.value(), b, head, 2);
                for p in 0..4 {
                    for q in 0..4 {
                        assert!((map.get(&[b, head, p, q]) - want[p][q]).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_map_matches_direct_formula() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[3, 5, 4], &mut rng);
        let w = attn_weights(&tape, 4, 4);
        let (out, map) = temporal_attention(tape.constant(x.clone()), &w, 2).unwrap();
        assert_eq!(out.shape(), vec![3, 5, 4]);
        let map = map.value();
        assert_eq!(map.shape(), &[5, 2, 3, 3]);
        let xt = x.permute(&[1, 0, 2]).unwrap();
        for pix in 0..5 {
            for head in 0..2 {
                let want = oracle_map(&xt, &w.q.value(), &w.k.value(), pix, head, 2);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((map.get(&[pix, head, i, j]) - want[i][j]).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_attention_cases() {
        let tape = Tape::<f64>::new();
        let w = attn_weights(&tape, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // one pixel per frame
        let x = tape.constant(Tensor::randn(&[3, 1, 4], &mut rng));
        let (_, m) = spatial_self_attention(x, &w, 2).unwrap();
        assert_eq!(*m.value(), Tensor::ones(&[3, 2, 1, 1]));
        // one frame
        let x = tape.constant(Tensor::randn(&[1, 5, 4], &mut rng));
        let (_, m) = temporal_attention(x, &w, 2).unwrap();
        assert_eq!(*m.value(), Tensor::ones(&[5, 2, 1, 1]));
        // identical features everywhere give uniform rows
        let row = Tensor::<f64>::randn(&[4], &mut rng);
        let same = tape.constant(Tensor::from_fn(&[3, 5, 4], |k| row.data()[k % 4]));
        let (_, sm) = spatial_self_attention(same, &w, 2).unwrap();
        assert!(sm.value().data().iter().all(|&v| (v - 0.2).abs() <= 1e-6));
        let (_, tm) = temporal_attention(same, &w, 2).unwrap();
        assert!(tm.value().data().iter().all(|&v| (v - 1.0 / 3.0).abs() <= 1e-6));
        // bad head count
        assert!(matches!(spatial_self_attention(same, &w, 3), Err(Error::Config(_))));
    }

    #[test]
    fn layout_and_validation() {
        let c = ModelConfig::default();
        assert_eq!(
            c.blocks.iter().map(|b| (b.level, b.include_in_str)).collect::<Vec<_>>(),
            vec![(0, false), (1, true), (1, true), (0, false)]
        );
        let two = ModelConfig::default().with_blocks(2);
        assert_eq!(two.blocks.iter().map(|b| b.level).collect::<Vec<_>>(), vec![0, 1]);
        assert!(two.validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.heads = 3;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().with_blocks(1).validate().is_err());
    }

    #[test]
    fn prompt_embedding_is_token_mean() {
        let w = DenoiserWeights::<f64>::init(ModelConfig::default(), 0).unwrap();
        let table = w.param("prompt.table").unwrap();
        let e = PromptEmbedding::new("red square", &w).unwrap();
        let (r, s) = (vocab::token_id("red"), vocab::token_id("square"));
        for c in 0..w.config.dim {
            let want = 0.5 * (table.get(&[r, c]) + table.get(&[s, c]));
            assert!((e.vector.data()[c] - want).abs() < 1e-15);
        }
        let null = PromptEmbedding::new("", &w).unwrap();
        for c in 0..w.config.dim {
            assert_eq!(null.vector.data()[c], table.get(&[vocab::NULL_ID, c]));
        }
    }
}
