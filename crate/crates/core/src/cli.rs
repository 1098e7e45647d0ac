//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::config::{key_help, RunConfig};
use crate::corpus::{gen_corpus, write_corpus, CorpusSpec};
use crate::diffusion::{invert, make_schedule, reconstruct, Trajectory};
use crate::edit::edit;
use crate::error::{Error, Result};
use crate::formats::{self, Bundle, Manifest};
use crate::mask::{dilate_mask, load_pixel_mask, LatentMask};
use crate::metrics::{foreground_change, masked_bg_distance, motion_error, render_report, ReportRow};
use crate::model::DenoiserWeights;
use crate::record::{AttentionRecord, BlockMaps};
use crate::str_score::{cost_report, str_score, Neighborhood};
use crate::tensor::{Real, Tensor};
use crate::train::{train_toy_denoiser, TrainSample};
use crate::vocab;

pub const PROFILE_ENV: &str = "STRMATCH_PROFILE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// 64-bit arithmetic.
    Test,
    /// 32-bit arithmetic.
    Fast,
}

#[derive(Debug, Parser)]
#[command(name = "strmatch", version, about = "Training-free video editing with spatiotemporal relevance guidance")]
struct Cli {
    /// Run configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic profile; falls back to $STRMATCH_PROFILE, then `fast`.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        /// Corpus spec (key=value); defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy denoiser on `corpus`, writing `weights`.
    Train,
    /// Invert `video` under `src_prompt`, writing `trajectory` and its reconstruction.
    Invert,
    /// Edit `video` from `src_prompt` to `tgt_prompt`, writing into `output`.
    Edit,
    /// Relevance scores of an attention-record directory.
    Score {
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value_t = 1)]
        radius: usize,
        #[arg(long)]
        include_self: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost and memory model of the factorized score.
    Bench { frames: usize, pixels: usize, heads: usize, radius: usize },
    /// Motion and background proxies between two latent videos.
    Eval {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Pixel edit mask (1 = edited region).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        dilate: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs, prints, and returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cmd = Cli::command().after_help(key_help());
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("strmatch: {e}");
            e.category().exit_code()
        }
    }
}

fn profile(flag: Option<Profile>) -> Result<Profile> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var(PROFILE_ENV) {
        Ok(v) if v.is_empty() => Ok(Profile::Fast),
        Ok(v) => Profile::from_str(&v, true)
            .map_err(|_| Error::Config(format!("{PROFILE_ENV}={v:?} is not test or fast"))),
        Err(_) => Ok(Profile::Fast),
    }
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.edit.seed = s;
    }
    let p = profile(cli.profile)?;
    match cli.command {
        Command::GenCorpus { spec, out } => cmd_gen_corpus(spec.as_deref(), &out, cli.seed, p),
        Command::Score {
            record,
            radius,
            include_self,
            out,
        } => match p {
            Profile::Test => cmd_score::<f64>(&record, Neighborhood::new(radius, include_self)?, out.as_deref()),
            Profile::Fast => cmd_score::<f32>(&record, Neighborhood::new(radius, include_self)?, out.as_deref()),
        },
        Command::Bench {
            frames,
            pixels,
            heads,
            radius,
        } => cmd_bench(frames, pixels, heads, Neighborhood::new(radius, false)?),
        Command::Eval {
            src,
            tgt,
            mask,
            dilate,
            out,
        } => cmd_eval(&src, &tgt, mask.as_deref(), dilate, out.as_deref()),
        Command::Train => dispatch(p, &cfg, cmd_train::<f64>, cmd_train::<f32>),
        Command::Invert => dispatch(p, &cfg, cmd_invert::<f64>, cmd_invert::<f32>),
        Command::Edit => dispatch(p, &cfg, cmd_edit::<f64>, cmd_edit::<f32>),
    }
}

fn dispatch(
    p: Profile,
    cfg: &RunConfig,
    test: fn(&RunConfig) -> Result<String>,
    fast: fn(&RunConfig) -> Result<String>,
) -> Result<String> {
    match p {
        Profile::Test => test(cfg),
        Profile::Fast => fast(cfg),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_gen_corpus(spec: Option<&Path>, out: &Path, seed: Option<u64>, p: Profile) -> Result<String> {
    let mut s = match spec {
        Some(path) => CorpusSpec::from_manifest(&Manifest::read(path).map_err(|e| match e {
            Error::Input(m) => Error::Config(m),
            other => other,
        })?)?,
        None => CorpusSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    create_dir(out)?;
    let n = match p {
        Profile::Test => {
            let clips = gen_corpus::<f64>(&s)?;
            write_corpus(out, &s, &clips)?;
            clips.len()
        }
        Profile::Fast => {
            let clips = gen_corpus::<f32>(&s)?;
            write_corpus(out, &s, &clips)?;
            clips.len()
        }
    };
    Ok(format!("wrote {n} clips to {}\n", out.display()))
}

/// Latents and prompts of every clip in a corpus directory.
pub fn read_corpus<F: Real>(dir: &Path) -> Result<Vec<(Tensor<F>, String, String)>> {
    let top = Manifest::read(dir.join(formats::MANIFEST))?;
    let count: usize = top
        .require("clips")?
        .parse()
        .map_err(|_| Error::Input("corpus manifest: clips is not an integer".into()))?;
    (0..count)
        .map(|k| {
            let b = Bundle::<F>::read(dir.join(format!("clip_{k:03}")))?;
            Ok((
                b.tensor("latent")?.clone(),
                b.meta("source_prompt")?.to_string(),
                b.meta("target_prompt")?.to_string(),
            ))
        })
        .collect()
}

fn cmd_train<F: Real>(cfg: &RunConfig) -> Result<String> {
    let corpus_dir = cfg.require("corpus", &cfg.corpus)?;
    let out = cfg.require("weights", &cfg.weights)?;
    let samples: Vec<TrainSample<F>> = read_corpus::<F>(corpus_dir)?
        .into_iter()
        .map(|(latent, prompt, _)| TrainSample {
            latent,
            tokens: vocab::tokenize(&prompt),
        })
        .collect();
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("training corpus is empty".into()))?;
    let s = first.latent.shape();
    let model = cfg.model(s[1], s[2], s[3]);
    let (w, report) = train_toy_denoiser(&samples, model, &cfg.train, cfg.edit.seed)?;
    w.save(out)?;
    let mut log = String::from("# step loss\n");
    for (k, l) in report.step_losses.iter().enumerate() {
        let _ = writeln!(log, "{k} {l:.6e}");
    }
    let log_path = out.join("train_log.txt");
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(format!(
        "trained {} steps: fixed-batch loss {:.6} -> {:.6}\n",
        cfg.train.steps, report.initial_loss, report.final_loss
    ))
}

fn load_inputs<F: Real>(cfg: &RunConfig) -> Result<(DenoiserWeights<F>, Tensor<F>)> {
    let w = DenoiserWeights::<F>::load(cfg.require("weights", &cfg.weights)?)?;
    let z0 = formats::read_tensor::<F>(cfg.require("video", &cfg.video)?)?;
    Ok((w, z0))
}

fn cmd_invert<F: Real>(cfg: &RunConfig) -> Result<String> {
    let (w, z0) = load_inputs::<F>(cfg)?;
    if cfg.src_prompt.trim().is_empty() {
        return Err(Error::Config("src_prompt is not set".into()));
    }
    let dir = cfg.require("trajectory", &cfg.trajectory)?;
    let sched = make_schedule(cfg.edit.steps, cfg.edit.schedule)?;
    let traj = invert(&w, &z0, &cfg.src_prompt, &sched, cfg.edit.invert_options())?;
    traj.save(dir)?;
    let rec = reconstruct(&w, &traj, &sched)?;
    formats::write_tensor(dir.join("reconstruction.strm"), &rec)?;
    let err = rec.sub(&z0)?.map(|v| v.abs()).mean().as_f64();
    Ok(format!(
        "inverted {} steps into {}; reconstruction mean |dz0| = {err:.6e}\n",
        sched.steps(),
        dir.display()
    ))
}

/// Grayscale plain-text graymap of frame `i`, channel mean mapped from [-1, 1].
pub fn pgm_frame<F: Real>(z: &Tensor<F>, i: usize) -> Result<String> {
    let &[_, h, w, c] = z.shape() else {
        return Err(Error::Contract(format!("expected [f, h, w, c], got {:?}", z.shape())));
    };
    let mut out = format!("P2\n{w} {h}\n255\n");
    let d = z.data();
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let base = ((i * h + y) * w + x) * c;
                let m = d[base..base + c].iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
                (((m + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn cmd_edit<F: Real>(cfg: &RunConfig) -> Result<String> {
    let (w, z0) = load_inputs::<F>(cfg)?;
    let out = cfg.require("output", &cfg.output)?;
    let mask = if cfg.edit.use_mask {
        let s = z0.shape();
        Some(load_pixel_mask(cfg.require("mask", &cfg.mask)?, s[0], s[1], s[2])?)
    } else {
        None
    };
    let traj = match &cfg.trajectory {
        Some(dir) if dir.join(formats::MANIFEST).exists() => Some(Trajectory::<F>::load(dir)?),
        _ => None,
    };
    let res = edit(&w, &z0, &cfg.src_prompt, &cfg.tgt_prompt, &cfg.edit, mask.as_ref(), traj.as_ref())?;
    create_dir(out)?;
    formats::write_tensor(out.join("edited.strm"), &res.output)?;
    let mut log = String::from("# t loss update_norm\n");
    for s in &res.log {
        for (l, u) in s.losses.iter().zip(&s.update_norms) {
            let _ = writeln!(log, "{} {l:.9e} {u:.6e}", s.t);
        }
        if s.losses.is_empty() {
            let _ = writeln!(log, "{} - 0", s.t);
        }
    }
    let log_path = out.join("loss_log.txt");
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    let preview = out.join("preview");
    create_dir(&preview)?;
    for i in 0..res.output.shape()[0] {
        let p = preview.join(format!("frame_{i:03}.pgm"));
        fs::write(&p, pgm_frame(&res.output, i)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(format!("edited clip written to {}\n", out.display()))
}

/// Reads `self.b<k>` / `temporal.b<k>` tensors as an attention record.
pub fn read_record<F: Real>(dir: &Path) -> Result<AttentionRecord<F>> {
    let b = Bundle::<F>::read(dir)?;
    let mut blocks = Vec::new();
    for (name, t) in &b.tensors {
        let Some(id) = name.strip_prefix("self.b") else {
            continue;
        };
        let block = id
            .parse()
            .map_err(|_| Error::Input(format!("bad block id in {name:?}")))?;
        blocks.push(BlockMaps {
            block,
            self_map: t.clone(),
            temporal_map: b.tensor(&format!("temporal.b{id}"))?.clone(),
        });
    }
    if blocks.is_empty() {
        return Err(Error::Input(format!("{} holds no self.b<k> maps", dir.display())));
    }
    blocks.sort_by_key(|b| b.block);
    Ok(AttentionRecord { blocks })
}

/// Row tolerance accepted for externally produced maps.
pub const RECORD_TOL: f64 = 1e-3;

pub fn cmd_score<F: Real>(record: &Path, nbhd: Neighborhood, out: Option<&Path>) -> Result<String> {
    let rec = read_record::<F>(record)?;
    rec.validate(RECORD_TOL)?;
    let score = str_score(&rec, nbhd, 0)?;
    let mut text = String::new();
    let mut bundle = Bundle::<F>::default();
    bundle.meta.insert("kind".into(), "str_score".into());
    bundle.meta.insert("radius".into(), nbhd.radius.to_string());
    bundle.meta.insert("include_self".into(), nbhd.include_self.to_string());
    for b in &score.blocks {
        let d = b.omega.data();
        let min = d.iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64()));
        let max = d.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        if min < 0.0 {
            return Err(Error::Numeric(format!("block {} has negative relevance {min}", b.block)));
        }
        let _ = writeln!(
            text,
            "block {} omega {} min {min:.6e} max {max:.6e} mean {:.6e}",
            b.block,
            formats::format_shape(b.omega.shape()),
            b.omega.mean().as_f64()
        );
        bundle.tensors.insert(format!("omega.b{}", b.block), b.omega.clone());
    }
    if let Some(dir) = out {
        bundle.write(dir)?;
    }
    Ok(text)
}

pub fn cmd_bench(frames: usize, pixels: usize, heads: usize, nbhd: Neighborhood) -> Result<String> {
    let r = cost_report(frames, pixels, heads, nbhd)?;
    Ok(format!(
        "f={frames} n={pixels} h={heads} radius={}\nfactorized_mults {}\nfactorized_mem {}\nfull3d_mem {}\nmem_ratio {:.4}\n",
        nbhd.radius, r.factorized_mults, r.factorized_mem, r.full3d_mem, r.mem_ratio
    ))
}

pub fn cmd_eval(src: &Path, tgt: &Path, mask: Option<&Path>, dilate: usize, out: Option<&Path>) -> Result<String> {
    let a = formats::read_tensor::<f64>(src)?;
    let b = formats::read_tensor::<f64>(tgt)?;
    let me = motion_error(&a, &b)?;
    let (mut bl, mut fg) = (None, None);
    if let Some(m) = mask {
        let s = a.shape();
        let edit_region: LatentMask = load_pixel_mask(m, s[0], s[1], s[2])?;
        bl = Some(masked_bg_distance(&a, &b, &dilate_mask(&edit_region, dilate).complement())?);
        fg = Some(foreground_change(&a, &b, &edit_region)?);
    }
    let name = tgt.file_stem().map_or("target".into(), |s| s.to_string_lossy().into_owned());
    let mut text = render_report(&[ReportRow {
        name,
        fc: None,
        cs: None,
        bl,
        me: Some(me),
    }])?;
    if let Some(f) = fg {
        let _ = writeln!(text, "foreground change {f:.6}");
    }
    if let Some(o) = out {
        fs::write(o, &text).map_err(|e| Error::io(o, e))?;
    }
    Ok(text)
}
