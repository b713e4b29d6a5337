//! The training loop: sequence sampling, pose estimation and compensation,
//! stabilization, normalization, multi-frame warping, loss and Adam.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::var::{compensate_to_target_var, normalize_translations_var, PoseVar};
use crate::geometry::{norm, Intrinsics, Mat3, NominalDisplacement, Pose, IDENTITY3};
use crate::losses::{photometric_loss, smooth_loss, total_loss, LossWeights};
use crate::networks::{
    depthnet_forward, init_params, lift_params, orientation_supervised, posenet_raw, read_params, write_params,
    DepthNetConfig, ModelMeta, ParamSet, PoseNetConfig,
};
use crate::stillbox::{Dataset, RenderedFrame, Sequence};
use crate::tape::{Tape, Tensor};
use crate::warp::{inverse_warp, masked_l1, stabilize};

pub const LOG_FILE: &str = "log.csv";
pub const MODEL_FILE: &str = "model.mdnc";
pub const META_FILE: &str = "model.json";
pub const ADAM_FILE: &str = "adam.mdnc";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    None,
    /// Ground-truth rotations replace predicted ones.
    Orientation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub d0: f64,
    pub epsilon: f64,
    pub pose_regularization: f64,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub supervision: Supervision,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub depth: DepthNetConfig,
    pub pose_base_channels: usize,
    pub pose_stride2_layers: usize,
    /// Mirror each sampled window left-right with probability 1/2.
    pub flip_horizontal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.075,
            lambda: 3.0,
            d0: 1.0,
            epsilon: 1e-5,
            pose_regularization: 1e-4,
            sequence_length: 5,
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            supervision: Supervision::None,
            checkpoint_every: 500,
            log_every: 50,
            depth: DepthNetConfig::default(),
            pose_base_channels: 8,
            pose_stride2_layers: 5,
            flip_horizontal: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pose_config(&self) -> PoseNetConfig {
        PoseNetConfig {
            base_channels: self.pose_base_channels,
            num_frames: self.sequence_length,
            num_stride2_layers: self.pose_stride2_layers,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda: self.lambda,
            num_scales: self.depth.num_output_scales,
        }
    }

    pub fn nominal(&self) -> Result<NominalDisplacement> {
        NominalDisplacement::new(self.d0, self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) || !(self.pose_regularization >= 0.0) {
            return bad("adam_eps must be positive and pose_regularization non-negative".into());
        }
        if self.sequence_length < 2 || self.batch_size == 0 {
            return bad(format!(
                "sequence_length must be >= 2 and batch_size >= 1, got {} and {}",
                self.sequence_length, self.batch_size
            ));
        }
        self.loss_weights().validate()?;
        self.depth.validate()?;
        self.pose_config().validate()?;
        self.nominal()?;
        Ok(())
    }

    fn meta(&self, iteration: usize) -> ModelMeta {
        ModelMeta {
            depth: self.depth,
            pose: self.pose_config(),
            d0: self.d0,
            epsilon: self.epsilon,
            iteration,
        }
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: ParamSet = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn to_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        out.insert("step".into(), Tensor::scalar(self.step as f64));
        for (k, t) in &self.m {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    fn from_params(p: &ParamSet, path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: msg.to_string(),
        };
        let step = p.get("step").ok_or_else(|| bad("missing step"))?.data()[0];
        let pick = |prefix: &str| -> ParamSet {
            p.iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        Ok(AdamState {
            step: step as u64,
            m: pick("m/"),
            v: pick("v/"),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_params(path, &self.to_params())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_params(&read_params(path)?, path)
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_update",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Window start plus target and reference indices within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubsequenceSample {
    pub start: usize,
    pub target: usize,
    pub reference: usize,
}

/// Uniform contiguous window of `n` frames and uniform distinct `(t, r)`.
/// Returns `None` (with a warning) when the sequence is too short.
pub fn sample_subsequence(seq_len: usize, n: usize, rng: &mut impl Rng) -> Option<SubsequenceSample> {
    if seq_len < n || n < 2 {
        log::warn!("sequence of {seq_len} frames is shorter than window {n}; skipped");
        return None;
    }
    let start = rng.gen_range(0..=seq_len - n);
    let target = rng.gen_range(0..n);
    let mut reference = rng.gen_range(0..n - 1);
    if reference >= target {
        reference += 1;
    }
    Some(SubsequenceSample {
        start,
        target,
        reference,
    })
}

/// A training example: `N` consecutive frames with target and reference.
#[derive(Clone, Debug)]
pub struct Window<'a> {
    pub frames: Vec<&'a RenderedFrame>,
    pub intrinsics: Intrinsics,
    pub target: usize,
    pub reference: usize,
    /// Train on the left-right mirror image of these frames.
    pub mirrored: bool,
}

/// A frame as seen through a left-right mirror.
pub fn mirror_frame(f: &RenderedFrame) -> RenderedFrame {
    RenderedFrame {
        rgb: f.rgb.flip_horizontal(),
        depth: f.depth.flip_horizontal(),
        pose: f.pose.mirrored_x(),
    }
}

fn rotations_to(frames: &[&RenderedFrame], target: usize) -> Vec<Mat3> {
    let t = frames[target].pose;
    frames.iter().map(|f| Pose::relative(&t, &f.pose).rotation).collect()
}

impl<'a> Window<'a> {
    pub fn from_sequence(seq: &'a Sequence, s: SubsequenceSample, n: usize) -> Self {
        Window {
            frames: seq.frames[s.start..s.start + n].iter().collect(),
            intrinsics: seq.intrinsics(),
            target: s.target,
            reference: s.reference,
            mirrored: false,
        }
    }

    /// Last `n` frames, target last and reference just before it.
    pub fn tail(seq: &'a Sequence, n: usize) -> Option<Self> {
        if seq.len() < n || n < 2 {
            return None;
        }
        Some(Window {
            frames: seq.frames[seq.len() - n..].iter().collect(),
            intrinsics: seq.intrinsics(),
            target: n - 1,
            reference: n - 2,
            mirrored: false,
        })
    }

    /// Ground-truth `R_{t→i}` for every frame, mirrored when the window is.
    pub fn gt_rotations(&self) -> Vec<Mat3> {
        if self.mirrored {
            let m: Vec<RenderedFrame> = self.frames.iter().map(|f| mirror_frame(f)).collect();
            rotations_to(&m.iter().collect::<Vec<_>>(), self.target)
        } else {
            rotations_to(&self.frames, self.target)
        }
    }
}

/// Forward (and optionally reverse) results for one window.
#[derive(Clone, Debug)]
pub struct SampleResult {
    /// `Σ_s 2^-s L_p^s`.
    pub lp: f64,
    /// `Σ_s 2^-s L_g^s`.
    pub lg: f64,
    pub total: f64,
    /// Mean over source frames of the masked L1 at full resolution.
    pub photometric_l1: f64,
    pub grads: Option<ParamSet>,
}

fn invariant(iteration: usize, what: String) -> Error {
    Error::Invariant { iteration, what }
}

/// Run the full workflow on one window. Gradients are returned when
/// `with_grads` is set.
pub fn forward_window(
    params: &ParamSet,
    cfg: &TrainConfig,
    win: &Window,
    iteration: usize,
    with_grads: bool,
) -> Result<SampleResult> {
    let n = cfg.sequence_length;
    if win.frames.len() != n || win.target >= n || win.reference >= n || win.target == win.reference {
        return Err(Error::InvalidArgument(format!(
            "window of {} frames with target {} and reference {} does not fit sequence length {n}",
            win.frames.len(),
            win.target,
            win.reference
        )));
    }
    let (t, r) = (win.target, win.reference);
    let nd = cfg.nominal()?;
    let pose_cfg = cfg.pose_config();
    let tape = Tape::new();
    let pv = lift_params(&tape, params);

    let mirrored: Vec<RenderedFrame>;
    let (frames_in, k): (Vec<&RenderedFrame>, Intrinsics) = if win.mirrored {
        mirrored = win.frames.iter().map(|f| mirror_frame(f)).collect();
        let w = mirrored[0].rgb.shape()[2];
        (mirrored.iter().collect(), win.intrinsics.flipped_horizontal(w))
    } else {
        (win.frames.clone(), win.intrinsics)
    };
    let stacked: Vec<&Tensor> = frames_in.iter().map(|f| &f.rgb).collect();
    let frames = tape.constant(Tensor::concat0(&stacked)?);
    let raw = posenet_raw(&pose_cfg, &pv, &frames)?;
    let flat = raw.reshape(&[6 * (n - 1)])?;
    let mut to_last = (0..n - 1)
        .map(|i| PoseVar::from_vector(&flat.narrow(0, 6 * i, 6)?))
        .collect::<Result<Vec<_>>>()?;
    to_last.push(PoseVar::identity(&tape));

    let poses = match cfg.supervision {
        Supervision::None => compensate_to_target_var(&to_last, t)?,
        Supervision::Orientation => {
            let gt = rotations_to(&frames_in, t);
            let p = orientation_supervised(&to_last, &gt, t)?;
            for (pi, g) in p.iter().zip(&gt) {
                if pi.value().rotation != *g {
                    return Err(invariant(iteration, "supervised rotation differs from ground truth".into()));
                }
            }
            p
        }
    };
    let self_pose = poses[t].value();
    if cfg.supervision == Supervision::None && self_pose.max_abs_diff(&Pose::identity()) > 1e-9 {
        return Err(invariant(iteration, format!("compensated target pose is not identity: {self_pose:?}")));
    }

    let target = tape.constant(frames_in[t].rgb.clone());
    let reference = tape.constant(frames_in[r].rgb.clone());
    let ref_stab = if cfg.supervision == Supervision::Orientation && poses[r].value().rotation == IDENTITY3 {
        reference
    } else {
        stabilize(&reference, &poses[r].rotation, &k)?.image
    };
    let zetas = depthnet_forward(&cfg.depth, &pv, &ref_stab, &target)?;

    let raw_tr = poses[r].translation.value();
    let normalized = normalize_translations_var(&poses, r, &nd)?;
    let tr_norm = norm(&[raw_tr[0], raw_tr[1], raw_tr[2]]);
    if tr_norm >= 1e3 * nd.epsilon() {
        let got = norm(&normalized[r].value().translation);
        if !(got >= nd.d0() * (1.0 - 1e-3) && got <= nd.d0() * (1.0 + 1e-12)) {
            return Err(invariant(iteration, format!("normalized reference translation {got} not at D0")));
        }
    }

    let weights = cfg.loss_weights();
    let mut per_scale = Vec::with_capacity(weights.num_scales);
    let mut l1_sum = 0.0;
    for (s, zeta) in zetas.iter().enumerate() {
        let ks = k.downscaled(s);
        let target_s = Tape::pyramid_level(&frames_in[t].rgb, s)?;
        let target_v = tape.constant(target_s.clone());
        let mut warps = Vec::with_capacity(n - 1);
        for i in (0..n).filter(|&i| i != t) {
            let src = tape.constant(Tape::pyramid_level(&frames_in[i].rgb, s)?);
            let w = inverse_warp(&src, zeta, &normalized[i], &ks)?;
            if s == 0 {
                l1_sum += masked_l1(&w.image.to_tensor(), &target_s, &w.mask).unwrap_or(0.0);
            }
            warps.push(w);
        }
        let lp = photometric_loss(&warps, &target_v, weights.alpha)?;
        let lg = smooth_loss(zeta, &target_s)?;
        per_scale.push((lp, lg));
    }
    let mut total = total_loss(&per_scale, &weights)?;
    if cfg.pose_regularization > 0.0 {
        total = total.add(&raw.square().sum().mul_scalar(cfg.pose_regularization))?;
    }
    let mut lp = 0.0;
    let mut lg = 0.0;
    for (s, (p, g)) in per_scale.iter().enumerate() {
        let w = 0.5f64.powi(s as i32);
        lp += w * p.item();
        lg += w * g.item();
    }
    let total_v = total.item();
    if !total_v.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            seed: cfg.seed,
        });
    }
    let grads = if with_grads {
        let g = tape.backward(&total)?;
        Some(pv.iter().map(|(k, v)| (k.clone(), g.wrt(v))).collect())
    } else {
        None
    };
    Ok(SampleResult {
        lp,
        lg,
        total: total_v,
        photometric_l1: l1_sum / (n - 1) as f64,
        grads,
    })
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lp: f64,
    pub lg: f64,
    pub total: f64,
}

/// Forward/backward every window in a fixed order, average gradients and
/// apply one Adam step.
pub fn train_step(
    params: &mut ParamSet,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    windows: &[Window],
    iteration: usize,
) -> Result<LossRecord> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results = run_windows(params, cfg, windows, iteration)?;
    let b = windows.len() as f64;
    let mut grads: ParamSet = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
    let mut rec = LossRecord {
        iteration: iteration + 1,
        lp: 0.0,
        lg: 0.0,
        total: 0.0,
    };
    for r in &results {
        rec.lp += r.lp / b;
        rec.lg += r.lg / b;
        rec.total += r.total / b;
        for (k, g) in r.grads.as_ref().expect("gradients requested") {
            let acc = grads.get_mut(k).expect("same parameter names");
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x / b);
        }
    }
    adam_update(params, &grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
    Ok(rec)
}

fn run_windows(params: &ParamSet, cfg: &TrainConfig, windows: &[Window], iteration: usize) -> Result<Vec<SampleResult>> {
    crate::par::map_ordered(windows, |w| forward_window(params, cfg, w, iteration, true))
        .into_iter()
        .collect()
}

/// RNG for one iteration, independent of how the run was split by resumes.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

fn sample_batch<'a>(seqs: &[&'a Sequence], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Window<'a>> {
    let n = cfg.sequence_length;
    let mut out = Vec::with_capacity(cfg.batch_size);
    let usable: Vec<&&Sequence> = seqs
        .iter()
        .filter(|s| {
            let ok = s.len() >= n;
            if !ok {
                log::warn!("sequence {} has {} frames, fewer than {n}; skipped", s.name, s.len());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return out;
    }
    while out.len() < cfg.batch_size {
        let seq = usable[rng.gen_range(0..usable.len())];
        if let Some(s) = sample_subsequence(seq.len(), n, rng) {
            let mut w = Window::from_sequence(seq, s, n);
            w.mirrored = cfg.flip_horizontal && rng.gen_bool(0.5);
            out.push(w);
        }
    }
    out
}

/// Mean full-resolution masked photometric L1 over windows (no updates).
pub fn photometric_l1(params: &ParamSet, cfg: &TrainConfig, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no windows to evaluate".into()));
    }
    let mut s = 0.0;
    for w in windows {
        s += forward_window(params, cfg, w, 0, false)?.photometric_l1;
    }
    Ok(s / windows.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub adam: AdamState,
    pub log: Vec<LossRecord>,
}

fn write_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut s = String::from("iteration,L_p,L_g,total\n");
    for r in log {
        writeln!(s, "{},{:e},{:e},{:e}", r.iteration, r.lp, r.lg, r.total).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parse a loss log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() + 1;
        if i == 0 || line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            offset: start,
            msg: format!("line {}: {msg}", i + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid number"));
        out.push(LossRecord {
            iteration: f[0].parse().map_err(|_| bad("invalid iteration"))?,
            lp: num(f[1])?,
            lg: num(f[2])?,
            total: num(f[3])?,
        });
    }
    Ok(out)
}

fn save_checkpoint(dir: &Path, cfg: &TrainConfig, params: &ParamSet, adam: &AdamState, iteration: usize) -> Result<()> {
    write_params(&dir.join(MODEL_FILE), params)?;
    adam.write(&dir.join(ADAM_FILE))?;
    cfg.meta(iteration).write(&dir.join(META_FILE))
}

/// Load model weights and metadata written by [`train`].
pub fn load_model(dir: &Path) -> Result<(ModelMeta, ParamSet)> {
    let meta = ModelMeta::read(&dir.join(META_FILE))?;
    let params = read_params(&dir.join(MODEL_FILE))?;
    Ok((meta, params))
}

/// Train on the dataset's training split. With `out_dir`, writes the loss
/// log and checkpoints there; `resume` continues from a checkpoint in it.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seqs = dataset.train();
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset at {} has no training scenes",
            dataset.root.display()
        )));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (mut params, mut adam, mut log, start) = match (resume, out_dir) {
        (true, Some(d)) if d.join(META_FILE).exists() => {
            let (meta, params) = load_model(d)?;
            if meta.depth != cfg.depth || meta.pose != cfg.pose_config() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint in {} was trained with a different architecture",
                    d.display()
                )));
            }
            let adam = AdamState::read(&d.join(ADAM_FILE))?;
            let log: Vec<LossRecord> = read_log(&d.join(LOG_FILE))?
                .into_iter()
                .filter(|r| r.iteration <= meta.iteration)
                .collect();
            log::info!("resuming from iteration {}", meta.iteration);
            (params, adam, log, meta.iteration)
        }
        (true, _) => {
            return Err(Error::InvalidArgument("nothing to resume from".into()));
        }
        _ => {
            let params = init_params(&cfg.depth, &cfg.pose_config(), cfg.seed)?;
            let adam = AdamState::new(&params);
            (params, adam, Vec::new(), 0)
        }
    };
    if cfg.supervision == Supervision::Orientation {
        log::info!("orientation supervision: warps use ground-truth rotations");
    }
    for it in start..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it);
        let windows = sample_batch(&seqs, cfg, &mut rng);
        if windows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no training sequence has {} frames",
                cfg.sequence_length
            )));
        }
        let rec = train_step(&mut params, &mut adam, cfg, &windows, it)?;
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            log::info!(
                "iteration {}: L_p {:.5} L_g {:.5} total {:.5}",
                rec.iteration,
                rec.lp,
                rec.lg,
                rec.total
            );
        }
        log.push(rec);
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(d, cfg, &params, &adam, it + 1)?;
                write_log(&d.join(LOG_FILE), &log)?;
            }
        }
    }
    if let Some(d) = out_dir {
        save_checkpoint(d, cfg, &params, &adam, cfg.iterations.max(start))?;
        write_log(&d.join(LOG_FILE), &log)?;
    }
    Ok(TrainOutcome { params, adam, log })
}
