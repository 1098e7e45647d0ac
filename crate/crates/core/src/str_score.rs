//! Spatiotemporal relevance (STR) scores from factorized attention maps.
//!
//! For frames `i, j`, pixels `p, q` and one head, with `S` the spatial
//! self-attention map `[f, h, n, n]` and `T` the temporal map `[n, h, f, f]`:
//!
//! ```text
//! g(i,p → j,q) = T[p](i→j) · S[j](p→q)  +  S[i](p→q) · T[q](i→j)
//! g(i,p ; j,q) = g(i,p → j,q) + g(j,q → i,p)
//! Ω(i,p,q)     = Σ_{j ∈ N(i)} g(i,p ; j,q)
//! ```
//!
//! [`omega`] evaluates this with row-wise products of the two maps and never
//! builds anything of size `(f·n)²`. [`str_score_bruteforce`] is a literal
//! scalar transcription used as an oracle, and [`omega_explicit_joint`] is
//! the materialized `(f·n)²` route used to measure the memory gap.

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::kernels::transpose2;
use crate::meter;
use crate::record::{map_dims, AttentionRecord, BlockMaps, MapDims};
use crate::tensor::{Real, Tensor};

/// Frames that contribute to frame `i`'s score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighborhood {
    pub radius: usize,
    pub include_self: bool,
}

impl Default for Neighborhood {
    fn default() -> Self {
        Neighborhood {
            radius: 1,
            include_self: false,
        }
    }
}

impl Neighborhood {
    pub fn new(radius: usize, include_self: bool) -> Result<Self> {
        if radius == 0 && !include_self {
            return Err(Error::Config(
                "neighbourhood radius must be positive unless the frame itself is included".into(),
            ));
        }
        Ok(Neighborhood {
            radius,
            include_self,
        })
    }

    /// `N(i)` for 0-based frame `i` of `frames`, ascending, clipped to the clip.
    pub fn members(&self, i: usize, frames: usize) -> Vec<usize> {
        let lo = i.saturating_sub(self.radius);
        let hi = (i + self.radius).min(frames.saturating_sub(1));
        (lo..=hi)
            .filter(|&j| j != i || self.include_self)
            .collect()
    }

    /// Fails when some frame of a `frames`-long clip has no neighbours.
    pub fn check(&self, frames: usize) -> Result<()> {
        if frames == 0 || (0..frames).any(|i| self.members(i, frames).is_empty()) {
            return Err(Error::Degenerate(format!(
                "empty frame neighbourhood for f={frames} (radius {}, include_self={})",
                self.radius, self.include_self
            )));
        }
        Ok(())
    }

    /// `Σ_i |N(i)|`.
    pub fn pair_count(&self, frames: usize) -> usize {
        (0..frames).map(|i| self.members(i, frames).len()).sum()
    }
}

/// Ω of one block: `[h, f, n, n]` indexed `(head, i, p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScore<F> {
    pub block: usize,
    pub omega: Tensor<F>,
}

/// Ω of every retained block for one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct StrScore<F> {
    pub timestep: usize,
    pub blocks: Vec<BlockScore<F>>,
}

impl<F: Real> StrScore<F> {
    pub fn block(&self, block: usize) -> Result<&BlockScore<F>> {
        self.blocks
            .iter()
            .find(|b| b.block == block)
            .ok_or_else(|| Error::Input(format!("no score for block {block} at t={}", self.timestep)))
    }
}

struct Layout {
    f: usize,
    h: usize,
    n: usize,
}

impl Layout {
    fn of(d: MapDims) -> Self {
        Layout {
            f: d.frames,
            h: d.heads,
            n: d.pixels,
        }
    }
    #[inline]
    fn s(&self, frame: usize, head: usize, p: usize, q: usize) -> usize {
        ((frame * self.h + head) * self.n + p) * self.n + q
    }
    #[inline]
    fn t(&self, pixel: usize, head: usize, i: usize, j: usize) -> usize {
        ((pixel * self.h + head) * self.f + i) * self.f + j
    }
    #[inline]
    fn srow(&self, frame: usize, head: usize) -> usize {
        (frame * self.h + head) * self.n * self.n
    }
}

fn check_index(d: MapDims, head: usize, frames: [usize; 2], pixels: [usize; 2]) -> Result<()> {
    if head >= d.heads || frames.iter().any(|&x| x >= d.frames) || pixels.iter().any(|&x| x >= d.pixels) {
        return Err(Error::Input(format!(
            "index out of range: head {head}, frames {frames:?}, pixels {pixels:?} for {d:?}"
        )));
    }
    Ok(())
}

/// `g(I_i(p) → I_j(q))` for one head of one block.
pub fn directional_relevance<F: Real>(
    maps: &BlockMaps<F>,
    head: usize,
    i: usize,
    p: usize,
    j: usize,
    q: usize,
) -> Result<F> {
    let d = maps.dims()?;
    check_index(d, head, [i, j], [p, q])?;
    let l = Layout::of(d);
    let s = maps.self_map.data();
    let t = maps.temporal_map.data();
    Ok(t[l.t(p, head, i, j)] * s[l.s(j, head, p, q)] + s[l.s(i, head, p, q)] * t[l.t(q, head, i, j)])
}

/// `g(I_i(p), I_j(q))`, symmetric in its two pixels.
pub fn bidirectional_relevance<F: Real>(
    maps: &BlockMaps<F>,
    head: usize,
    i: usize,
    p: usize,
    j: usize,
    q: usize,
) -> Result<F> {
    Ok(directional_relevance(maps, head, i, p, j, q)? + directional_relevance(maps, head, j, q, i, p)?)
}

/// Factorized Ω for one block's raw maps.
pub fn omega<F: Real>(self_map: &Tensor<F>, temporal_map: &Tensor<F>, nbhd: Neighborhood) -> Result<Tensor<F>> {
    let d = map_dims(self_map.shape(), temporal_map.shape())?;
    nbhd.check(d.frames)?;
    let l = Layout::of(d);
    let (f, h, n) = (l.f, l.h, l.n);
    let bytes = std::mem::size_of::<F>();
    let s = self_map.data();
    let t = temporal_map.data();

    meter::track_output(h * f * n * n * bytes);
    let mut out = vec![F::zero(); h * f * n * n];
    let _scratch = meter::track((n * n + 2 * n) * bytes);
    let mut z = vec![F::zero(); n * n];
    let mut a = vec![F::zero(); n];
    let mut b = vec![F::zero(); n];

    for head in 0..h {
        for i in 0..f {
            let si = &s[l.srow(i, head)..l.srow(i, head) + n * n];
            let oi = &mut out[(head * f + i) * n * n..(head * f + i + 1) * n * n];
            z.iter_mut().for_each(|v| *v = F::zero());
            for j in nbhd.members(i, f) {
                let sj = &s[l.srow(j, head)..l.srow(j, head) + n * n];
                for x in 0..n {
                    a[x] = t[l.t(x, head, i, j)];
                    b[x] = t[l.t(x, head, j, i)];
                }
                for p in 0..n {
                    let (ap, bp) = (a[p], b[p]);
                    let sjr = &sj[p * n..(p + 1) * n];
                    let sir = &si[p * n..(p + 1) * n];
                    let or = &mut oi[p * n..(p + 1) * n];
                    let zr = &mut z[p * n..(p + 1) * n];
                    for q in 0..n {
                        // i,p → j,q
                        or[q] += ap * sjr[q] + sir[q] * a[q];
                        // j,q → i,p accumulated transposed: z[p][q] feeds Ω(i,q,p)
                        zr[q] += bp * sir[q] + sjr[q] * b[q];
                    }
                }
            }
            for p in 0..n {
                for q in 0..n {
                    oi[p * n + q] += z[q * n + p];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, f, n, n], out))
}

/// Vector-Jacobian product of [`omega`] with respect to both maps.
pub fn omega_backward<F: Real>(
    self_map: &Tensor<F>,
    temporal_map: &Tensor<F>,
    grad: &Tensor<F>,
    nbhd: Neighborhood,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = map_dims(self_map.shape(), temporal_map.shape())?;
    let l = Layout::of(d);
    let (f, h, n) = (l.f, l.h, l.n);
    if grad.shape() != [h, f, n, n] {
        return Err(Error::shape("omega_backward", grad.shape(), &[h, f, n, n]));
    }
    let bytes = std::mem::size_of::<F>();
    let s = self_map.data();
    let t = temporal_map.data();
    let gd = grad.data();
    meter::track_output((s.len() + t.len()) * bytes);
    let mut ds = vec![F::zero(); s.len()];
    let mut dt = vec![F::zero(); t.len()];
    let _scratch = meter::track((n * n + 4 * n) * bytes);
    let mut gt = vec![F::zero(); n * n];
    let (mut a, mut b) = (vec![F::zero(); n], vec![F::zero(); n]);
    let (mut col_gs, mut row_gts) = (vec![F::zero(); n], vec![F::zero(); n]);

    for head in 0..h {
        for i in 0..f {
            let gi = &gd[(head * f + i) * n * n..(head * f + i + 1) * n * n];
            transpose2(n, n, gi, &mut gt);
            let si_off = l.srow(i, head);
            // j-independent reductions: Σ_p G[p,q] S_i[p,q] and Σ_c Gᵀ[q,c] S_i[q,c]
            col_gs.iter_mut().for_each(|v| *v = F::zero());
            for p in 0..n {
                for q in 0..n {
                    col_gs[q] += gi[p * n + q] * s[si_off + p * n + q];
                }
            }
            for q in 0..n {
                let mut acc = F::zero();
                for c in 0..n {
                    acc += gt[q * n + c] * s[si_off + q * n + c];
                }
                row_gts[q] = acc;
            }
            for j in nbhd.members(i, f) {
                let sj_off = l.srow(j, head);
                for x in 0..n {
                    a[x] = t[l.t(x, head, i, j)];
                    b[x] = t[l.t(x, head, j, i)];
                }
                for p in 0..n {
                    let (ap, bp) = (a[p], b[p]);
                    let gr = &gi[p * n..(p + 1) * n];
                    let gtr = &gt[p * n..(p + 1) * n];
                    let mut dot1 = F::zero();
                    let mut dot4 = F::zero();
                    for q in 0..n {
                        let sj = s[sj_off + p * n + q];
                        dot1 += gr[q] * sj;
                        // dS_j[p,q] from the i,p→j,q and j,q→i,p paths
                        ds[sj_off + p * n + q] += ap * gr[q] + gtr[q] * b[q];
                        // dS_i[p,q] from the remaining two products
                        ds[si_off + p * n + q] += gr[q] * a[q] + gtr[q] * bp;
                    }
                    for r in 0..n {
                        dot4 += gt[r * n + p] * s[sj_off + r * n + p];
                    }
                    dt[l.t(p, head, i, j)] += dot1 + col_gs[p];
                    dt[l.t(p, head, j, i)] += dot4 + row_gts[p];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(self_map.shape().to_vec(), ds),
        Tensor::from_parts(temporal_map.shape().to_vec(), dt),
    ))
}

struct OmegaOp {
    nbhd: Neighborhood,
}

impl<F: Real> CustomOp<F> for OmegaOp {
    fn name(&self) -> &'static str {
        "str_omega"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (ds, dt) = omega_backward(inputs[0], inputs[1], grad, self.nbhd)?;
        Ok(vec![Some(ds), Some(dt)])
    }
}

/// Tape-connected Ω for one block.
pub fn omega_var<'t, F: Real>(
    self_map: Var<'t, F>,
    temporal_map: Var<'t, F>,
    nbhd: Neighborhood,
) -> Result<Var<'t, F>> {
    let out = omega(&self_map.value(), &temporal_map.value(), nbhd)?;
    Ok(self_map
        .tape()
        .custom(&[self_map, temporal_map], out, Box::new(OmegaOp { nbhd })))
}

/// Ω for every block of `record`.
pub fn str_score<F: Real>(record: &AttentionRecord<F>, nbhd: Neighborhood, timestep: usize) -> Result<StrScore<F>> {
    let blocks = record
        .blocks
        .iter()
        .map(|b| {
            Ok(BlockScore {
                block: b.block,
                omega: omega(&b.self_map, &b.temporal_map, nbhd)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StrScore { timestep, blocks })
}

/// Literal scalar-loop evaluation of Ω, one index at a time.
pub fn str_score_bruteforce<F: Real>(
    record: &AttentionRecord<F>,
    nbhd: Neighborhood,
    timestep: usize,
) -> Result<StrScore<F>> {
    let mut blocks = Vec::new();
    for maps in &record.blocks {
        let d = maps.dims()?;
        nbhd.check(d.frames)?;
        let (f, h, n) = (d.frames, d.heads, d.pixels);
        let mut om = Tensor::zeros(&[h, f, n, n]);
        for head in 0..h {
            for i in 0..f {
                for p in 0..n {
                    for q in 0..n {
                        let mut acc = F::zero();
                        for j in nbhd.members(i, f) {
                            acc += bidirectional_relevance(maps, head, i, p, j, q)?;
                        }
                        om.data_mut()[((head * f + i) * n + p) * n + q] = acc;
                    }
                }
            }
        }
        blocks.push(BlockScore {
            block: maps.block,
            omega: om,
        });
    }
    Ok(StrScore { timestep, blocks })
}

/// Ω through a materialized joint relevance matrix of shape `[h, f·n, f·n]`.
///
/// Entry `((i,p),(j,q))` holds `g(I_i(p) → I_j(q))`. This is what a full 3D
/// attention treatment has to hold; it exists for memory comparisons.
pub fn omega_explicit_joint<F: Real>(
    self_map: &Tensor<F>,
    temporal_map: &Tensor<F>,
    nbhd: Neighborhood,
) -> Result<Tensor<F>> {
    let d = map_dims(self_map.shape(), temporal_map.shape())?;
    nbhd.check(d.frames)?;
    let l = Layout::of(d);
    let (f, h, n) = (l.f, l.h, l.n);
    let fnn = f * n;
    let bytes = std::mem::size_of::<F>();
    let s = self_map.data();
    let t = temporal_map.data();

    let _joint_guard = meter::track(h * fnn * fnn * bytes);
    let mut joint = vec![F::zero(); h * fnn * fnn];
    for head in 0..h {
        for i in 0..f {
            for p in 0..n {
                let row = (head * fnn + i * n + p) * fnn;
                for j in 0..f {
                    let tij_p = t[l.t(p, head, i, j)];
                    for q in 0..n {
                        joint[row + j * n + q] = tij_p * s[l.s(j, head, p, q)]
                            + s[l.s(i, head, p, q)] * t[l.t(q, head, i, j)];
                    }
                }
            }
        }
    }
    meter::track_output(h * f * n * n * bytes);
    let mut out = vec![F::zero(); h * f * n * n];
    for head in 0..h {
        for i in 0..f {
            for p in 0..n {
                for q in 0..n {
                    let mut acc = F::zero();
                    for j in nbhd.members(i, f) {
                        let fwd = joint[(head * fnn + i * n + p) * fnn + j * n + q];
                        let bwd = joint[(head * fnn + j * n + q) * fnn + i * n + p];
                        acc += fwd + bwd;
                    }
                    out[((head * f + i) * n + p) * n + q] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, f, n, n], out))
}

/// Metered runs of the factorized and the joint route on the same maps.
/// The input maps count as resident working memory in both.
pub fn measure_routes<F: Real>(maps: &BlockMaps<F>, nbhd: Neighborhood) -> Result<(meter::MeterReport, meter::MeterReport)> {
    let resident = (maps.self_map.len() + maps.temporal_map.len()) * std::mem::size_of::<F>();
    let (fact, fact_report) = meter::metered(|| {
        let _maps = meter::track(resident);
        omega(&maps.self_map, &maps.temporal_map, nbhd)
    });
    let (joint, joint_report) = meter::metered(|| {
        let _maps = meter::track(resident);
        omega_explicit_joint(&maps.self_map, &maps.temporal_map, nbhd)
    });
    fact?;
    joint?;
    Ok((fact_report, joint_report))
}

/// Closed-form work and memory of the factorized route versus a joint map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    /// Multiplications performed by [`omega`]: `4·h·n²·Σ_i|N(i)|`.
    pub factorized_mults: u64,
    /// Elements of the two factorized maps: `h·(f·n² + n·f²)`.
    pub factorized_mem: u64,
    /// Elements of a joint map: `h·(f·n)²`.
    pub full3d_mem: u64,
    /// `full3d_mem / factorized_mem = f·n/(n+f)`.
    pub mem_ratio: f64,
}

pub fn cost_report(frames: usize, pixels: usize, heads: usize, nbhd: Neighborhood) -> Result<CostReport> {
    if frames == 0 || pixels == 0 || heads == 0 {
        return Err(Error::Config("cost_report needs positive dimensions".into()));
    }
    let (f, n, h) = (frames as u64, pixels as u64, heads as u64);
    let pairs = nbhd.pair_count(frames) as u64;
    let factorized_mem = h * (f * n * n + n * f * f);
    let full3d_mem = h * (f * n) * (f * n);
    Ok(CostReport {
        factorized_mults: 4 * h * n * n * pairs,
        factorized_mem,
        full3d_mem,
        mem_ratio: full3d_mem as f64 / factorized_mem as f64,
    })
}
