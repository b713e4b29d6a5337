//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines print in order
//! and the slow toy training happens once.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use motiondepth::eval::{self, EvalOptions, EvalReport, Model, ScaleMode, TestPair};
use motiondepth::geometry::var::PoseVar;
use motiondepth::geometry::{
    compensate_to_target, mat_flat, norm, normalize_translations, reproject, Intrinsics,
    NominalDisplacement, Pose,
};
use motiondepth::losses::{smooth_loss, ssim, total_loss, LossWeights};
use motiondepth::stillbox::{self, Dataset, GeneratorConfig};
use motiondepth::tape::{Tape, Tensor};
use motiondepth::trainer::{self, photometric_l1, Supervision, TrainConfig, Window};
use motiondepth::warp::{inverse_warp, inverse_warp_image, masked_l1, stabilize};
use motiondepth::{gradcheck, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Still Box settings shared by the consistency oracle and the toy run.
fn scene_config() -> GeneratorConfig {
    GeneratorConfig::default()
}

/// Training settings of the toy convergence run.
fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        lambda: 0.1,
        d0: 0.05,
        epsilon: 0.05e-5,
        batch_size: 4,
        sequence_length: 3,
        flip_horizontal: true,
        iterations: 2000,
        supervision: Supervision::Orientation,
        seed,
        log_every: 0,
        checkpoint_every: 0,
        ..Default::default()
    }
}

const TOY_SCENES: usize = 8;
const TOY_HELD_OUT_SCENES: usize = 8;
const TOY_SEED: u64 = 7;

fn write_scenes(root: &Path, cfg: &GeneratorConfig, count: usize, seed: u64, val: usize) -> Result<Dataset> {
    let scenes = stillbox::generate_scenes(cfg, count, seed)?;
    stillbox::write_dataset(root, &scenes, val)?;
    stillbox::load_dataset(root)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c1_gradients() -> Result<Outcome> {
    let t0 = Instant::now();
    let report = gradcheck::run_suite(0, 8, gradcheck::DEFAULT_PROBES)?;
    let elapsed = t0.elapsed();
    let few_probes: Vec<&str> = report
        .ops
        .iter()
        .filter(|o| o.probes < 100)
        .map(|o| o.name.as_str())
        .collect();
    let worst = report
        .ops
        .iter()
        .max_by(|a, b| (a.max_rel_err / a.tolerance).total_cmp(&(b.max_rel_err / b.tolerance)))
        .expect("suite is not empty");
    let pass = report.passed() && few_probes.is_empty() && elapsed <= Duration::from_secs(120);
    let failed: Vec<&str> = report.failures().iter().map(|o| o.name.as_str()).collect();
    Ok(outcome(
        pass,
        format!(
            "{} ops, worst {} at {:.2e} (tol {:.0e}), failed {:?}, under-probed {:?}, {:.1}s",
            report.ops.len(),
            worst.name,
            worst.max_rel_err,
            worst.tolerance,
            failed,
            few_probes,
            elapsed.as_secs_f64()
        ),
    ))
}

fn random_pose(rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> Pose {
    let a = [(); 3].map(|_| rng.gen_range(-angle..=angle));
    let t = [(); 3].map(|_| rng.gen_range(-shift..=shift));
    Pose::from_euler(a, t)
}

fn c2_geometry() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (16, 20);
    let k = Intrinsics::from_fov(w, h, 80f64.to_radians())?;

    // (a) identity pose reproduces the source
    let mut a_err: f64 = 0.0;
    for _ in 0..5 {
        let tape = Tape::new();
        let img = Tensor::from_fn(&[3, h, w], |_| rng.gen());
        let depth = Tensor::from_fn(&[h, w], |_| rng.gen_range(0.5..20.0));
        let out = inverse_warp(
            &tape.constant(img.clone()),
            &tape.constant(depth),
            &PoseVar::identity(&tape),
            &k,
        )?;
        a_err = a_err.max(max_abs(&out.image.value(), img.data()));
    }

    // (b) stabilization equals a zero-translation warp
    let mut b_err: f64 = 0.0;
    for _ in 0..20 {
        let tape = Tape::new();
        let img = tape.constant(Tensor::from_fn(&[3, h, w], |_| rng.gen()));
        let depth = tape.constant(Tensor::from_fn(&[h, w], |_| rng.gen_range(0.5..20.0)));
        let rot = random_pose(&mut rng, 0.1, 0.0);
        let r = tape.constant(Tensor::new(vec![3, 3], mat_flat(&rot.rotation))?);
        let s = stabilize(&img, &r, &k)?;
        let wv = inverse_warp(&img, &depth, &PoseVar::constant(&tape, &rot), &k)?;
        b_err = b_err.max(max_abs(&s.image.value(), &wv.image.value()));
        b_err = b_err.max(max_abs(s.mask.data(), wv.mask.data()));
    }

    // (c) pure rotation is depth independent
    let mut c_err: f64 = 0.0;
    for _ in 0..50 {
        let rot = random_pose(&mut rng, 0.3, 0.0);
        let (u, v) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let p1 = reproject(u, v, rng.gen_range(0.1..1.0), &rot, &k)?;
        let p2 = reproject(u, v, rng.gen_range(10.0..1000.0), &rot, &k)?;
        if p1.valid && p2.valid {
            c_err = c_err.max((p1.u - p2.u).abs()).max((p1.v - p2.v).abs());
        }
    }

    // (d) compensated target pose is the identity
    let mut d_err: f64 = 0.0;
    for _ in 0..20 {
        let n = 5;
        let mut poses: Vec<Pose> = (0..n - 1).map(|_| random_pose(&mut rng, 0.2, 2.0)).collect();
        poses.push(Pose::identity());
        let t = rng.gen_range(0..n);
        let comp = compensate_to_target(&poses, t)?;
        d_err = d_err.max(comp[t].max_abs_diff(&Pose::identity()));
    }

    // (e) reference translation normalized to D0, over ‖t_r‖ from 1e3·ε upward
    let mut e_err: f64 = 0.0;
    let mut e_formula: f64 = 0.0;
    for i in 0..20 {
        let nd = NominalDisplacement::new(rng.gen_range(0.01..5.0), 1e-5)?;
        let mut poses: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng, 0.2, 3.0)).collect();
        let r = rng.gen_range(0..4);
        let lo = 1e3 * nd.epsilon();
        let len = if i == 0 { lo } else { lo * 10f64.powf(rng.gen_range(0.0..4.0)) };
        let n0 = norm(&poses[r].translation);
        poses[r].translation = poses[r].translation.map(|c| c * len / n0);
        let out = normalize_translations(&poses, r, &nd)?;
        let rel = (norm(&out[r].translation) - nd.d0()).abs() / nd.d0();
        e_err = e_err.max(rel);
        let expected = nd.epsilon() / (nd.epsilon() + len);
        e_formula = e_formula.max((rel - expected).abs());
    }

    let pass = a_err <= 1e-6 && b_err <= 1e-9 && c_err <= 1e-9 && d_err <= 1e-9 && e_err <= 1e-6;
    Ok(outcome(
        pass,
        format!("identity warp {a_err:.1e}, stabilize vs warp {b_err:.1e}, rotation depth-independence {c_err:.1e}, compensated self-pose {d_err:.1e}, normalized |t_r| rel {e_err:.1e} (gate 1e-6; deviation from ε/(ε+|t_r|) {e_formula:.1e})"),
    ))
}

fn c3_losses() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (12, 14);
    let mut self_err: f64 = 0.0;
    let mut sym_err: f64 = 0.0;
    let mut in_range = true;
    for _ in 0..10 {
        let a = Tensor::from_fn(&[3, h, w], |_| rng.gen());
        let b = Tensor::from_fn(&[3, h, w], |_| rng.gen());
        let s_aa = ssim(&a, &a)?;
        self_err = self_err.max(s_aa.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
        let (ab, ba) = (ssim(&a, &b)?, ssim(&b, &a)?);
        sym_err = sym_err.max(max_abs(ab.data(), ba.data()));
        in_range &= ab.data().iter().all(|v| (-1.0..=1.0).contains(v));
        let neg = ssim(&a, &a.map(|v| 1.0 - v))?;
        in_range &= neg.data().iter().all(|v| (-1.0..=1.0).contains(v));
    }

    let image = Tensor::from_fn(&[3, h, w], |_| rng.gen());
    let tape = Tape::new();
    let constant = smooth_loss(&tape.constant(Tensor::full(&[h, w], 2.5)), &image)?.item();
    let depth = Tensor::from_fn(&[h, w], |_| rng.gen_range(0.5..5.0));
    let base = smooth_loss(&tape.constant(depth.clone()), &image)?.item();
    let mut rescale_err: f64 = 0.0;
    for s in [0.01, 0.5, 3.0, 1e3] {
        let v = smooth_loss(&tape.constant(depth.map(|x| x * s)), &image)?.item();
        rescale_err = rescale_err.max((v - base).abs());
    }

    let one = tape.scalar(1.0);
    let zero = tape.scalar(0.0);
    let total = total_loss(&vec![(one, zero); 4], &LossWeights::default())?.item();

    let pass = self_err <= 1e-9
        && sym_err == 0.0
        && in_range
        && constant == 0.0
        && rescale_err <= 1e-9
        && (total - 1.875).abs() <= 1e-12;
    Ok(outcome(
        pass,
        format!("SSIM(I,I) err {self_err:.1e}, asymmetry {sym_err:.1e}, in [-1,1] {in_range}, smooth(const) {constant}, rescale err {rescale_err:.1e}, total {total}"),
    ))
}

fn consecutive_warp_errors(frames: &[stillbox::RenderedFrame], k: &Intrinsics) -> Result<Vec<f64>> {
    let mut errs = Vec::new();
    for pair in frames.windows(2) {
        for (t, s) in [(&pair[1], &pair[0]), (&pair[0], &pair[1])] {
            let pose = Pose::relative(&t.pose, &s.pose);
            let (img, mask) = inverse_warp_image(&s.rgb, &t.depth, &pose, k)?;
            if let Some(e) = masked_l1(&img, &t.rgb, &mask) {
                errs.push(e);
            }
        }
    }
    Ok(errs)
}

fn c4_consistency() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = scene_config();
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    let mut count = 0;
    for (spec, frames) in stillbox::generate_scenes(&cfg, 5, 404)? {
        for e in consecutive_warp_errors(&frames, &spec.intrinsics)? {
            worst = worst.max(e);
            sum += e;
            count += 1;
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst < 0.05 && count > 0 && elapsed <= Duration::from_secs(60);
    Ok(outcome(
        pass,
        format!(
            "5 scenes {}x{}, {count} warps, mean {:.4}, worst {worst:.4}, {:.1}s",
            cfg.width,
            cfg.height,
            sum / count.max(1) as f64,
            elapsed.as_secs_f64()
        ),
    ))
}

struct Toy {
    model_dir: PathBuf,
    held_out: Vec<TestPair>,
    p_report: EvalReport,
}

fn tails(ds: &Dataset, n: usize) -> Vec<Window<'_>> {
    ds.sequences.iter().filter_map(|s| Window::tail(s, n)).collect()
}

fn c5_toy(work: &Path) -> Result<(Outcome, Toy)> {
    let t0 = Instant::now();
    let gen = scene_config();
    let train_ds = write_scenes(&work.join("train"), &gen, TOY_SCENES, TOY_SEED, 0)?;
    let test_ds = write_scenes(&work.join("held_out"), &gen, TOY_HELD_OUT_SCENES, TOY_SEED + 1000, 0)?;
    let cfg = toy_config(TOY_SEED);
    let model_dir = work.join("model");
    let outcome_run = trainer::train(&train_ds, &cfg, Some(&model_dir), false)?;

    let n = cfg.sequence_length;
    let train_l1 = photometric_l1(&outcome_run.params, &cfg, &tails(&train_ds, n))?;
    let held_l1 = photometric_l1(&outcome_run.params, &cfg, &tails(&test_ds, n))?;

    let model = Model::load(&model_dir)?;
    let held_out = eval::test_pairs(&test_ds)?;
    let opts = EvalOptions::default();
    let p_report = eval::evaluate(&model, &held_out, ScaleMode::P, &opts)?;
    let gt_report = eval::evaluate(&model, &held_out, ScaleMode::Gt, &opts)?;
    let elapsed = t0.elapsed();
    let pass = train_l1 < 0.05 && p_report.mean.abs_rel < 0.3 && elapsed <= Duration::from_secs(30 * 60);
    let detail = format!(
        "photometric L1 {train_l1:.4} (held-out {held_l1:.4}), held-out abs_rel P {:.3} / GT {:.3} over {} pairs, {:.0}s",
        p_report.mean.abs_rel,
        gt_report.mean.abs_rel,
        held_out.len(),
        elapsed.as_secs_f64()
    );
    Ok((
        outcome(pass, detail),
        Toy {
            model_dir,
            held_out,
            p_report,
        },
    ))
}

fn c6_scale_protocol() -> Result<Outcome> {
    let pred = Tensor::from_vec(vec![1.0, 2.0]);
    let gt = Tensor::from_vec(vec![2.0, 2.0]);
    let hand = eval::eigen_metrics(&pred, &gt, &Tensor::ones(&[2]), eval::DEFAULT_DEPTH_CAP)?;
    let hand_ok = hand.abs_rel == 0.25 && hand.delta1 == 0.5;

    let cfg = GeneratorConfig {
        frames_per_scene: 4,
        ..scene_config()
    };
    let dir = tempfile::tempdir().map_err(|e| motiondepth::Error::InvalidArgument(e.to_string()))?;
    let ds = write_scenes(dir.path(), &cfg, 3, 66, 0)?;
    let pairs = eval::test_pairs(&ds)?;
    let d0 = 0.5;
    let opts = EvalOptions::default();
    // ground-truth depth expressed at the nominal displacement, with noise
    let predictor = |scale: f64| {
        move |p: &TestPair| -> Result<Tensor> {
            let disp = p.displacement.expect("stillbox pairs carry displacement");
            let mut rng = ChaCha8Rng::seed_from_u64(p.name.len() as u64);
            let noisy = p
                .gt_depth
                .data()
                .iter()
                .map(|&g| {
                    let g = if g.is_finite() { g } else { 50.0 };
                    scale * g * d0 / disp * rng.gen_range(0.8..1.25)
                })
                .collect();
            Tensor::new(p.gt_depth.shape().to_vec(), noisy)
        }
    };
    let gt1 = eval::evaluate_with(&pairs, ScaleMode::Gt, &opts, d0, predictor(1.0))?;
    let gt2 = eval::evaluate_with(&pairs, ScaleMode::Gt, &opts, d0, predictor(2.0))?;
    let p1 = eval::evaluate_with(&pairs, ScaleMode::P, &opts, d0, predictor(1.0))?;
    let p2 = eval::evaluate_with(&pairs, ScaleMode::P, &opts, d0, predictor(2.0))?;
    let m = |r: &EvalReport| {
        let x = r.mean;
        vec![x.abs_rel, x.sq_rel, x.rmse, x.rmse_log, x.delta1, x.delta2, x.delta3]
    };
    let gt_diff = max_abs(&m(&gt1), &m(&gt2));
    let pass = hand_ok && gt_diff <= 1e-12 && p2.mean.abs_rel > p1.mean.abs_rel;
    Ok(outcome(
        pass,
        format!(
            "hand example abs_rel {} d1 {}, GT x2 change {gt_diff:.1e}, P abs_rel {:.4} -> {:.4} under x2",
            hand.abs_rel, hand.delta1, p1.mean.abs_rel, p2.mean.abs_rel
        ),
    ))
}

fn c7_upside_down(toy: &Toy) -> Result<Outcome> {
    let model = Model::load(&toy.model_dir)?;
    let opts = EvalOptions {
        flip_vertical: true,
        ..Default::default()
    };
    let flipped = eval::evaluate(&model, &toy.held_out, ScaleMode::P, &opts)?;
    let complete = flipped.frames.len() == toy.held_out.len() && flipped.mean.abs_rel.is_finite();
    let involution = toy.held_out.iter().all(|p| {
        let back = p.flipped().flipped();
        back.frames == p.frames && back.gt_depth == p.gt_depth && back.intrinsics == p.intrinsics && back.rotation == p.rotation
    });
    Ok(outcome(
        complete && involution,
        format!(
            "flipped abs_rel P {:.3} (upright {:.3}), flip twice identity {involution}",
            flipped.mean.abs_rel, toy.p_report.mean.abs_rel
        ),
    ))
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_path_buf();
                out.push((rel, fs::read(&p).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn c8_determinism(work: &Path) -> Result<Outcome> {
    let gen = GeneratorConfig {
        frames_per_scene: 8,
        ..scene_config()
    };
    let cfg = TrainConfig {
        iterations: 30,
        batch_size: 2,
        checkpoint_every: 0,
        log_every: 0,
        flip_horizontal: true,
        ..toy_config(5)
    };
    let mut trees = Vec::new();
    let mut logs = Vec::new();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let root = work.join(format!("det_{run}"));
        let ds = write_scenes(&root.join("data"), &gen, 3, 21, 1)?;
        trees.push(tree(&root.join("data")));
        trainer::train(&ds, &cfg, Some(&root.join("model")), false)?;
        logs.push(fs::read(root.join("model").join(trainer::LOG_FILE)).expect("log written"));
        let model = Model::load(&root.join("model"))?;
        let report = eval::evaluate(&model, &eval::test_pairs(&ds)?, ScaleMode::P, &EvalOptions::default())?;
        report.write(&root.join("eval"))?;
        reports.push(fs::read(root.join("eval").join("eval.json")).expect("report written"));
    }
    let same_tree = trees[0] == trees[1];
    let same_log = logs[0] == logs[1];
    let same_report = reports[0] == reports[1];
    Ok(outcome(
        same_tree && same_log && same_report,
        format!(
            "dataset trees identical {same_tree} ({} files), loss logs identical {same_log}, eval reports identical {same_report}",
            trees[0].len()
        ),
    ))
}

fn report(id: usize, name: &str, r: Result<Outcome>) -> bool {
    match r {
        Ok(o) => {
            println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL criterion {id} ({name}): error: {e}");
            false
        }
    }
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut all = true;
    all &= report(1, "gradient suite", c1_gradients());
    all &= report(2, "geometric invariants", c2_geometry());
    all &= report(3, "loss invariants", c3_losses());
    all &= report(4, "rigid-scene consistency", c4_consistency());
    let toy = match c5_toy(work.path()) {
        Ok((o, toy)) => {
            all &= report(5, "toy convergence", Ok(o));
            Some(toy)
        }
        Err(e) => {
            all &= report(5, "toy convergence", Err(e));
            None
        }
    };
    all &= report(6, "scale protocol", c6_scale_protocol());
    match &toy {
        Some(t) => all &= report(7, "upside-down harness", c7_upside_down(t)),
        None => all &= report(7, "upside-down harness", Ok(outcome(false, "no toy model (criterion 5 errored)"))),
    }
    all &= report(8, "determinism", c8_determinism(work.path()));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
