//! Acceptance criteria. Prints one PASS/FAIL line per criterion. Pass
//! criterion numbers as arguments to run a subset, and `--strict` (or set
//! STRMATCH_ACCEPTANCE_STRICT) to exit nonzero when any criterion fails.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicBool, AtomicIsize, AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use sha2::{Digest, Sha256};

use strmatch::autodiff::{max_rel_error, Tape};
use strmatch::corpus::{to_latent, Clip};
use strmatch::diffusion::{invert, make_schedule, reconstruct, InvertOptions, Trajectory};
use strmatch::edit::{edit, guidance_loss_and_grad, str_loss, EditConfig, GuidanceTarget, Objective};
use strmatch::error::Error;
use strmatch::formats::{self, decode, encode};
use strmatch::mask::{dilate_mask, LatentMask};
use strmatch::metrics::{foreground_change, masked_bg_distance, motion_error};
use strmatch::model::{denoise, forward, DenoiserWeights, ModelConfig, Output};
use strmatch::record::{AttentionRecord, BlockMaps};
use strmatch::str_score::{cost_report, measure_routes, str_score, str_score_bruteforce, Neighborhood};
use strmatch::tensor::Tensor;
use strmatch::vocab;

use common::{random_record, rng, trained};

struct Counting;

static ARMED: AtomicBool = AtomicBool::new(false);
static LIVE: AtomicIsize = AtomicIsize::new(0);
static PEAK: AtomicIsize = AtomicIsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if ARMED.load(Ordering::Relaxed) {
            let now = LIVE.fetch_add(layout.size() as isize, Ordering::Relaxed) + layout.size() as isize;
            PEAK.fetch_max(now, Ordering::Relaxed);
            LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        }
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        if ARMED.load(Ordering::Relaxed) {
            LIVE.fetch_sub(layout.size() as isize, Ordering::Relaxed);
        }
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Largest single heap allocation and peak live heap bytes made by `f`.
fn audit<R>(f: impl FnOnce() -> R) -> (R, usize, isize) {
    LIVE.store(0, Ordering::SeqCst);
    PEAK.store(0, Ordering::SeqCst);
    LARGEST.store(0, Ordering::SeqCst);
    ARMED.store(true, Ordering::SeqCst);
    let r = f();
    ARMED.store(false, Ordering::SeqCst);
    (r, LARGEST.load(Ordering::SeqCst), PEAK.load(Ordering::SeqCst))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c1_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for f in [2, 3, 4] {
        for n in [1, 4, 9] {
            for h in [1, 2] {
                for radius in [1, 2] {
                    for include_self in [false, true] {
                        for seed in 0..4 {
                            let rec = random_record(f, h, n, 2, (f * 1000 + n * 100 + h * 10 + radius) as u64 + seed);
                            let nb = Neighborhood::new(radius, include_self).unwrap();
                            let a = str_score(&rec, nb, 1).unwrap();
                            let b = str_score_bruteforce(&rec, nb, 1).unwrap();
                            for (x, y) in a.blocks.iter().zip(&b.blocks) {
                                worst = worst.max(x.omega.max_abs_diff(&y.omega));
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 30.0,
        format!("{cases} seeded records, max |diff| {worst:.2e}, {secs:.1}s"),
    )
}

fn c2_analytic() -> Outcome {
    let eye = |f: usize, h: usize, n: usize| BlockMaps {
        block: 0,
        self_map: Tensor::<f64>::from_fn(&[f, h, n, n], |k| if k / n % n == k % n { 1.0 } else { 0.0 }),
        temporal_map: Tensor::<f64>::from_fn(&[n, h, f, f], |k| if k / f % f == k % f { 1.0 } else { 0.0 }),
    };
    let mut identity_zero = true;
    for (f, h, n, r) in [(2, 1, 4, 1), (4, 2, 4, 1), (5, 2, 9, 2), (3, 1, 1, 2)] {
        let rec = AttentionRecord { blocks: vec![eye(f, h, n)] };
        let s = str_score(&rec, Neighborhood::new(r, false).unwrap(), 1).unwrap();
        identity_zero &= s.blocks[0].omega.data().iter().all(|&v| v == 0.0);
    }
    let (f, n) = (4, 4);
    let mut uniform_exact = true;
    for h in [1, 2] {
        let rec = AttentionRecord {
            blocks: vec![BlockMaps {
                block: 0,
                self_map: Tensor::full(&[f, h, n, n], 0.25),
                temporal_map: Tensor::full(&[n, h, f, f], 0.25),
            }],
        };
        let om = &str_score(&rec, Neighborhood::default(), 1).unwrap().blocks[0].omega;
        for (k, &v) in om.data().iter().enumerate() {
            let i = (k / (n * n)) % f;
            let want = if i == 0 || i == f - 1 { 0.25 } else { 0.5 };
            uniform_exact &= v == want;
        }
    }
    outcome(
        identity_zero && uniform_exact,
        format!("identity maps give zero: {identity_zero}; uniform 0.5/0.25 exact: {uniform_exact}"),
    )
}

fn c3_gradient() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::default().with_blocks(2);
    let w = DenoiserWeights::<f64>::init(config, 3).unwrap();
    let mut r = rng(33);
    let z = Tensor::<f64>::randn(&[3, 16, 16, 3], &mut r);
    let z_src = Tensor::<f64>::randn(&[3, 16, 16, 3], &mut r);
    let time = 0.5;
    let src_tokens = vocab::tokenize("a red square moving right");
    let tgt_tokens = vocab::tokenize("a blue circle moving right");
    let (_, rec) = denoise(&w, &z_src, time, &src_tokens).unwrap();
    let cfg = EditConfig::default();
    let source = str_score(&rec, cfg.neighborhood, 25).unwrap();
    let (loss, grad) = guidance_loss_and_grad(&w, &z, time, &tgt_tokens, GuidanceTarget::Str(&source), &cfg).unwrap();
    let value = |zz: &Tensor<f64>| {
        let tape = Tape::new();
        let p = w.on_tape(&tape, false);
        let out = forward(&w.config, &p, tape.constant(zz.clone()), time, &tgt_tokens, Output::MapsOnly)?;
        Ok(str_loss(&out.maps, &source, cfg.neighborhood, cfg.aggregation)?.value().item())
    };
    let fd = strmatch::autodiff::finite_diff_grad(value, &z, 1e-3).unwrap();
    let rel = max_rel_error(&grad, &fd, 1e-3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rel <= 1e-4 && secs < 120.0,
        format!(
            "loss {loss:.6}, {} coordinates, max rel err {rel:.2e}, |grad|max {:.2e}, {secs:.1}s",
            z.len(),
            fd.max_abs()
        ),
    )
}

fn held_out(k: usize) -> (Clip<f32>, Tensor<f32>, LatentMask) {
    let clip = common::edit_clips(k + 1).swap_remove(k);
    let z0 = to_latent(&clip.video, 2).unwrap();
    let s = z0.shape().to_vec();
    let m = LatentMask::from_pixels(&clip.mask, s[0], s[1], s[2]).unwrap();
    (clip, z0, m)
}

fn c4_inverse() -> Outcome {
    let w: DenoiserWeights<f64> = trained().weights.cast();
    let (clip, z0, _) = held_out(0);
    let z0: Tensor<f64> = z0.cast();
    let mut replay = 0.0f64;
    let mut errs = Vec::new();
    for steps in [10, 25, 50] {
        let sched = make_schedule(steps, EditConfig::default().schedule).unwrap();
        let traj = invert(&w, &z0, &clip.source_prompt, &sched, InvertOptions::default()).unwrap();
        replay = replay.max(traj.replay(&sched).unwrap().max_abs_diff(&z0));
        let rec = reconstruct(&w, &traj, &sched).unwrap();
        errs.push(rec.sub(&z0).unwrap().map(f64::abs).mean());
    }
    outcome(
        replay <= 1e-12 && errs[0] > errs[2],
        format!(
            "replay max |dz0| {replay:.2e}; re-evaluated mean |dz0| T=10 {:.4e}, T=25 {:.4e}, T=50 {:.4e}",
            errs[0], errs[1], errs[2]
        ),
    )
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn run_cli(args: &[&str], cfg: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_strmatch"))
        .arg("--config")
        .arg(cfg)
        .arg("--profile")
        .arg("fast")
        .args(args)
        .output()
        .expect("spawn strmatch")
}

fn c5_identity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained().weights.save(d.join("weights")).unwrap();
    let (clip, z0, _) = held_out(1);
    formats::write_tensor(d.join("video.strm"), &z0).unwrap();
    let base = format!(
        "weights={}\nvideo={}\nsrc_prompt={p}\ntgt_prompt={p}\nlambda=0\ncfg_scale=1\n",
        d.join("weights").display(),
        d.join("video.strm").display(),
        p = clip.source_prompt
    );
    let inv_cfg = d.join("invert.cfg");
    std::fs::write(&inv_cfg, format!("{base}trajectory={}\n", d.join("traj").display())).unwrap();
    let edit_cfg = d.join("edit.cfg");
    std::fs::write(&edit_cfg, format!("{base}output={}\n", d.join("out").display())).unwrap();
    let a = run_cli(&["invert"], &inv_cfg);
    let b = run_cli(&["edit"], &edit_cfg);
    if !a.status.success() || !b.status.success() {
        return outcome(
            false,
            format!(
                "cli failed: {} / {}",
                String::from_utf8_lossy(&a.stderr),
                String::from_utf8_lossy(&b.stderr)
            ),
        );
    }
    let rec = std::fs::read(d.join("traj").join("reconstruction.strm")).unwrap();
    let out = std::fs::read(d.join("out").join("edited.strm")).unwrap();
    outcome(
        rec == out,
        format!("edited.strm sha256 {} vs reconstruction {}", &sha256_hex(&out)[..16], &sha256_hex(&rec)[..16]),
    )
}

fn c6_mask() -> Outcome {
    let w = &trained().weights;
    let mut cases = 0;
    let mut worst = 0.0f32;
    let mut outside = 0usize;
    let pairs = [
        (0usize, None, 10usize, 1usize),
        (2, Some("a green diamond moving up"), 10, 0),
        (3, Some("a yellow circle still"), 10, 2),
        (4, None, 50, 1),
    ];
    for (k, tgt, steps, dilate) in pairs {
        let (clip, z0, m) = held_out(k);
        let tgt = tgt.map_or(clip.target_prompt.clone(), str::to_string);
        let cfg = EditConfig {
            steps,
            use_mask: true,
            dilate_radius: dilate,
            ..EditConfig::default()
        };
        let out = edit(w, &z0, &clip.source_prompt, &tgt, &cfg, Some(&m), None).unwrap().output;
        let keep = dilate_mask(&m, dilate).complement();
        let c = z0.shape()[3];
        for (j, (a, b)) in out.data().iter().zip(z0.data()).enumerate() {
            if keep.data[j / c] {
                outside += 1;
                worst = worst.max((a - b).abs());
            }
        }
        cases += 1;
    }
    outcome(
        worst == 0.0 && outside > 0,
        format!("{cases} edits, {outside} preserved values, max |diff| {worst:e}"),
    )
}

struct CaseResult {
    me: Vec<f64>,
    bg: Vec<f64>,
    fg: Vec<f64>,
    updates: Vec<f64>,
}

struct Campaign {
    lambdas: Vec<f64>,
    str_runs: Vec<CaseResult>,
    baseline: CaseResult,
    seconds: f64,
}

const CAMPAIGN_CASES: usize = 5;
const LAMBDAS: [f64; 3] = [0.005, 0.01, 0.015];

fn campaign() -> &'static Campaign {
    static CELL: OnceLock<Campaign> = OnceLock::new();
    CELL.get_or_init(|| {
        let w = &trained().weights;
        let start = Instant::now();
        let mut str_runs: Vec<CaseResult> = (0..LAMBDAS.len())
            .map(|_| CaseResult { me: vec![], bg: vec![], fg: vec![], updates: vec![] })
            .collect();
        let mut baseline = CaseResult { me: vec![], bg: vec![], fg: vec![], updates: vec![] };
        for (clip, z0, m) in (0..CAMPAIGN_CASES).map(held_out) {
            let base = EditConfig::default();
            let sched = make_schedule(base.steps, base.schedule).unwrap();
            let opts = InvertOptions { keep_maps: true, ..base.invert_options() };
            let traj: Trajectory<f32> = invert(w, &z0, &clip.source_prompt, &sched, opts).unwrap();
            let keep = dilate_mask(&m, base.dilate_radius).complement();
            let record = |res: &mut CaseResult, cfg: &EditConfig| {
                let out = edit(w, &z0, &clip.source_prompt, &clip.target_prompt, cfg, None, Some(&traj)).unwrap();
                res.me.push(motion_error(&z0, &out.output).unwrap());
                res.bg.push(masked_bg_distance(&z0, &out.output, &keep).unwrap());
                res.fg.push(foreground_change(&z0, &out.output, &m).unwrap());
                res.updates.push(out.log.iter().flat_map(|s| s.update_norms.iter()).sum());
            };
            for (k, &lambda) in LAMBDAS.iter().enumerate() {
                record(&mut str_runs[k], &EditConfig { lambda, ..base.clone() });
            }
            record(&mut baseline, &EditConfig { objective: Objective::ConcatL2, ..base.clone() });
        }
        Campaign {
            lambdas: LAMBDAS.to_vec(),
            str_runs,
            baseline,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")
}

fn c7_lambda_trend() -> Outcome {
    let c = campaign();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let means: Vec<f64> = c.str_runs.iter().map(|r| mean(&r.me)).collect();
    let monotone = (0..CAMPAIGN_CASES)
        .filter(|&k| c.str_runs.windows(2).all(|p| p[1].me[k] <= p[0].me[k]))
        .count();
    let strict = means[2] < means[0];
    let per_lambda: Vec<String> = c
        .lambdas
        .iter()
        .zip(&c.str_runs)
        .map(|(l, r)| format!("lambda {l}: ME [{}] updates [{}]", fmt_list(&r.me), fmt_list(&r.updates)))
        .collect();
    outcome(
        strict && monotone >= 4 && c.seconds < 900.0,
        format!(
            "mean ME {} (need last < first: {strict}); non-increasing in {monotone}/5; {:.0}s; {}",
            fmt_list(&means),
            c.seconds,
            per_lambda.join("; ")
        ),
    )
}

fn c8_baseline_trend() -> Outcome {
    let c = campaign();
    let s = &c.str_runs[1];
    let b = &c.baseline;
    let preserved = (0..CAMPAIGN_CASES).filter(|&k| b.me[k] <= s.me[k] && b.bg[k] <= s.bg[k]).count();
    let flexible = (0..CAMPAIGN_CASES).filter(|&k| s.fg[k] > b.fg[k]).count();
    outcome(
        preserved >= 3 && flexible >= 3,
        format!(
            "baseline ME,BG <= STR in {preserved}/5, STR FG higher in {flexible}/5; \
             STR ME [{}] BG [{}] FG [{}]; baseline ME [{}] BG [{}] FG [{}]",
            fmt_list(&s.me),
            fmt_list(&s.bg),
            fmt_list(&s.fg),
            fmt_list(&b.me),
            fmt_list(&b.bg),
            fmt_list(&b.fg)
        ),
    )
}

fn c9_memory() -> Outcome {
    let (f, n, h) = (16, 256, 2);
    let nb = Neighborhood::default();
    let maps = common::random_block(0, f, h, n, 9);
    let predicted = cost_report(f, n, h, nb).unwrap().mem_ratio;
    let (fact, joint) = measure_routes(&maps, nb).unwrap();
    let measured = joint.peak_bytes as f64 / fact.peak_bytes as f64;
    let within = (measured / predicted - 1.0).abs() <= 0.2;
    let joint_bytes = (f * n) * (f * n) * std::mem::size_of::<f64>();
    let rec = AttentionRecord { blocks: vec![maps] };
    let (score, largest, peak) = audit(|| str_score(&rec, nb, 1));
    score.unwrap();
    let no_joint = largest < joint_bytes && fact.largest_buffer_bytes < joint_bytes;
    outcome(
        within && no_joint,
        format!(
            "measured ratio {measured:.3} vs f*n/(n+f) {predicted:.3}; str_score largest heap allocation {largest} B, \
             heap peak {peak} B, (f*n)^2 buffer would be {joint_bytes} B"
        ),
    )
}

fn c10_formats() -> Outcome {
    let golden: [u8; 22] = [
        b'S', b'T', b'R', b'M', 1, 0, 0, 0, 0, 1, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,
    ];
    let small = Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap();
    let golden_ok = encode(&small).unwrap() == golden;
    let big = Tensor::<f32>::randn(&[16, 2, 16, 16, 3], &mut rng(10));
    let bytes = encode(&big).unwrap();
    let back: Tensor<f32> = decode(&bytes).unwrap().to_tensor().unwrap();
    let round_trip = back.data().iter().zip(big.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && encode(&back).unwrap() == bytes;
    let f64_ok = {
        let t = Tensor::<f64>::from_f64(&[1, 3], &[0.1, -0.0, f64::MAX]).unwrap();
        let e = encode(&t).unwrap();
        e[8] == 1 && decode(&e).unwrap().to_tensor::<f64>().unwrap().data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    };
    let corrupt = |mutate: &dyn Fn(&mut Vec<u8>)| {
        let mut b = golden.to_vec();
        mutate(&mut b);
        decode(&b)
    };
    let negatives = [
        corrupt(&|b| b[0] = b'X'),
        corrupt(&|b| b[4] = 9),
        corrupt(&|b| b[8] = 7),
        corrupt(&|b| b.truncate(20)),
        corrupt(&|b| b.push(0)),
        corrupt(&|b| b.truncate(6)),
        corrupt(&|b| b[10] = 0),
    ];
    let categorized = negatives
        .iter()
        .all(|r| matches!(r, Err(e @ Error::Format { .. }) if e.category().exit_code() == 3));
    outcome(
        golden_ok && round_trip && f64_ok && categorized,
        format!(
            "golden bytes {golden_ok}, f32 round trip ({} values, sha256 {}) {round_trip}, f64 {f64_ok}, {} corrupt images rejected as format errors {categorized}",
            big.len(),
            &sha256_hex(&bytes)[..16],
            negatives.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "oracle equivalence", c1_oracle),
    (2, "analytic STR values", c2_analytic),
    (3, "gradient fidelity", c3_gradient),
    (4, "algebraic DDIM inverse", c4_inverse),
    (5, "pipeline identity", c5_identity),
    (6, "mask guarantee", c6_mask),
    (7, "lambda trend", c7_lambda_trend),
    (8, "baseline trend", c8_baseline_trend),
    (9, "memory ratio and allocation audit", c9_memory),
    (10, "format golden tests", c10_formats),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    // A failing criterion is always reported; it only fails the process when
    // asked, so the rest of the workspace suite still runs.
    let strict = args.iter().any(|a| a == "--strict") || std::env::var_os("STRMATCH_ACCEPTANCE_STRICT").is_some();
    let mut failed = Vec::new();
    let needs_model = CRITERIA
        .iter()
        .any(|(k, ..)| (4..=8).contains(k) && (wanted.is_empty() || wanted.contains(k)));
    if needs_model {
        let t = trained();
        println!(
            "trained toy model: fixed-batch loss {:.4} -> {:.4} ({})",
            t.initial_loss,
            t.final_loss,
            if t.cached { "cached".to_string() } else { format!("trained in {:.0}s", t.seconds) }
        );
    }
    for (k, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {k:>2} {verdict} {name} [{:.1}s]: {}",
            start.elapsed().as_secs_f64(),
            result.detail
        );
        if !result.pass {
            failed.push(k);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}
