#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use strmatch::autodiff::softmax_last;
use strmatch::corpus::{gen_corpus, to_latent, Clip, CorpusSpec};
use strmatch::formats::Manifest;
use strmatch::model::{DenoiserWeights, ModelConfig};
use strmatch::record::{AttentionRecord, BlockMaps};
use strmatch::tensor::Tensor;
use strmatch::train::{train_toy_denoiser, TrainConfig, TrainSample};
use strmatch::vocab;

pub const TRAIN_CORPUS_SEED: u64 = 1;
pub const TRAIN_CLIPS: usize = 48;
pub const TRAIN_SEED: u64 = 0;
pub const EDIT_CORPUS_SEED: u64 = 99;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic maps from softmaxed Gaussian logits.
pub fn random_block(block: usize, f: usize, h: usize, n: usize, seed: u64) -> BlockMaps<f64> {
    let mut r = rng(seed);
    let s = Tensor::<f64>::randn(&[f, h, n, n], &mut r);
    let t = Tensor::<f64>::randn(&[n, h, f, f], &mut r);
    BlockMaps {
        block,
        self_map: softmax_last(&s),
        temporal_map: softmax_last(&t),
    }
}

pub fn random_record(f: usize, h: usize, n: usize, blocks: usize, seed: u64) -> AttentionRecord<f64> {
    AttentionRecord {
        blocks: (0..blocks).map(|b| random_block(b, f, h, n, seed * 31 + b as u64)).collect(),
    }
}

pub fn samples<F: strmatch::tensor::Real>(clips: &[Clip<F>], pool: usize) -> Vec<TrainSample<F>> {
    clips
        .iter()
        .map(|c| TrainSample {
            latent: to_latent(&c.video, pool).expect("latent"),
            tokens: vocab::tokenize(&c.source_prompt),
        })
        .collect()
}

/// The default toy model after the standard training run, with its fixed-batch
/// losses. Trained once and cached under the cargo target tmp dir.
pub struct Trained {
    pub weights: DenoiserWeights<f32>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
    pub cached: bool,
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("trained_toy_v1")
}

pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = cache_dir();
        let report = dir.join("report.txt");
        if let (Ok(w), Ok(m)) = (DenoiserWeights::<f32>::load(dir.join("weights")), Manifest::read(&report)) {
            let num = |k: &str| m.require(k).unwrap().parse::<f64>().unwrap();
            return Trained {
                weights: w,
                initial_loss: num("initial_loss"),
                final_loss: num("final_loss"),
                seconds: num("seconds"),
                cached: true,
            };
        }
        let spec = CorpusSpec {
            clips: TRAIN_CLIPS,
            seed: TRAIN_CORPUS_SEED,
            ..CorpusSpec::default()
        };
        let clips = gen_corpus::<f32>(&spec).expect("corpus");
        let start = std::time::Instant::now();
        let (w, r) = train_toy_denoiser(&samples(&clips, spec.pool), ModelConfig::default(), &TrainConfig::default(), TRAIN_SEED)
            .expect("training");
        let seconds = start.elapsed().as_secs_f64();
        let tmp = dir.with_extension("partial");
        let _ = std::fs::remove_dir_all(&tmp);
        w.save(tmp.join("weights")).expect("save weights");
        let mut m = Manifest::default();
        m.insert("initial_loss", format!("{:e}", r.initial_loss));
        m.insert("final_loss", format!("{:e}", r.final_loss));
        m.insert("seconds", format!("{seconds}"));
        m.write(tmp.join("report.txt")).expect("save report");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::rename(&tmp, &dir).expect("publish cache");
        Trained {
            weights: w,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            seconds,
            cached: false,
        }
    })
}

/// Held-out edit cases.
pub fn edit_clips(count: usize) -> Vec<Clip<f32>> {
    gen_corpus::<f32>(&CorpusSpec {
        clips: count,
        seed: EDIT_CORPUS_SEED,
        ..CorpusSpec::default()
    })
    .expect("edit corpus")
}
