//! Depth evaluation: Eigen metrics under median-ratio or displacement
//! scaling, the constant-plane baseline, the upside-down protocol and
//! single-pair inference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{absolute_depth, norm, Intrinsics, Mat3, NominalDisplacement, Pose};
use crate::networks::{depthnet_forward, lift_params, posenet_forward, ModelMeta, ParamSet};
use crate::stillbox::{write_pfm, write_ppm, Dataset, Sequence};
use crate::tape::{Tape, Tensor};
use crate::warp::stabilize_image;

pub const DEFAULT_DEPTH_CAP: [f64; 2] = [1e-3, 100.0];

/// How predictions are scaled before metrics are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Per-frame ratio of ground-truth and predicted medians.
    Gt,
    /// Measured displacement over the nominal displacement.
    P,
    /// Predictions used as they are.
    None,
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScaleMode::Gt => "GT",
            ScaleMode::P => "P",
            ScaleMode::None => "NONE",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    fn mean(all: &[DepthMetrics]) -> DepthMetrics {
        let n = all.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3] = acc.map(|v| v / n);
        DepthMetrics {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            delta1,
            delta2,
            delta3,
        }
    }
}

/// Eigen metrics over `mask > 0`, predictions clamped to `cap` first.
pub fn eigen_metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor, cap: [f64; 2]) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() || mask.numel() != gt.numel() {
        return Err(Error::ShapeMismatch {
            op: "eigen_metrics",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if !(cap[0] > 0.0 && cap[0] < cap[1]) {
        return Err(Error::InvalidArgument(format!("invalid depth cap {cap:?}")));
    }
    let mut n = 0usize;
    let mut acc = [0.0f64; 7];
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m <= 0.0 {
            continue;
        }
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::InvalidArgument(format!("ground truth {g} inside mask")));
        }
        let p = if p.is_nan() { cap[0] } else { p.clamp(cap[0], cap[1]) };
        let d = p - g;
        let ratio = (p / g).max(g / p);
        acc[0] += d.abs() / g;
        acc[1] += d * d / g;
        acc[2] += d * d;
        acc[3] += (p.ln() - g.ln()).powi(2);
        acc[4] += f64::from(ratio < 1.25);
        acc[5] += f64::from(ratio < 1.25f64.powi(2));
        acc[6] += f64::from(ratio < 1.25f64.powi(3));
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty evaluation mask".into()));
    }
    let n = n as f64;
    let m = DepthMetrics {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        delta1: acc[4] / n,
        delta2: acc[5] / n,
        delta3: acc[6] / n,
    };
    debug_assert!(m.rmse_log.is_finite());
    Ok(m)
}

/// Pixels with finite ground truth inside the cap; sky is excluded.
pub fn valid_mask(gt: &Tensor, cap: [f64; 2]) -> Tensor {
    gt.map(|g| f64::from(g.is_finite() && g >= cap[0] && g <= cap[1]))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scale factor applied to a prediction under `mode`.
pub fn scale_factor(
    pred: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    mode: ScaleMode,
    displacement: Option<f64>,
    d0: f64,
) -> Result<f64> {
    match mode {
        ScaleMode::None => Ok(1.0),
        ScaleMode::P => {
            let d = displacement.ok_or_else(|| {
                Error::InvalidArgument("P scale mode needs a measured displacement for every frame".into())
            })?;
            Ok(d / d0)
        }
        ScaleMode::Gt => {
            let pick = |t: &Tensor| -> Vec<f64> {
                t.data()
                    .iter()
                    .zip(mask.data())
                    .filter(|(_, &m)| m > 0.0)
                    .map(|(&v, _)| v)
                    .collect()
            };
            let g = pick(gt);
            if g.is_empty() {
                return Err(Error::InvalidArgument("empty evaluation mask".into()));
            }
            let p = median(pick(pred));
            if !(p > 0.0) {
                return Err(Error::DivisionByZero {
                    op: "median scaling",
                });
            }
            Ok(median(g) / p)
        }
    }
}

/// Two-frame test case: reference `k−1`, target `k`.
#[derive(Clone, Debug)]
pub struct TestPair {
    pub name: String,
    /// Every frame of the sequence up to and including the target.
    pub frames: Vec<Tensor>,
    pub gt_depth: Tensor,
    /// Ground-truth `R_{t→r}`.
    pub rotation: Mat3,
    /// Measured camera displacement between the two frames.
    pub displacement: Option<f64>,
    pub intrinsics: Intrinsics,
}

impl TestPair {
    /// Pair formed by the last two frames of a sequence.
    pub fn from_sequence(seq: &Sequence) -> Result<Self> {
        let n = seq.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("sequence {} has fewer than 2 frames", seq.name)));
        }
        let (t, r) = (&seq.frames[n - 1], &seq.frames[n - 2]);
        let rel = Pose::relative(&t.pose, &r.pose);
        Ok(TestPair {
            name: seq.name.clone(),
            frames: seq.frames.iter().map(|f| f.rgb.clone()).collect(),
            gt_depth: t.depth.clone(),
            rotation: rel.rotation,
            displacement: Some(norm(&rel.translation)),
            intrinsics: seq.intrinsics(),
        })
    }

    pub fn reference(&self) -> &Tensor {
        &self.frames[self.frames.len() - 2]
    }

    pub fn target(&self) -> &Tensor {
        &self.frames[self.frames.len() - 1]
    }

    /// The same pair seen by an upside-down camera.
    pub fn flipped(&self) -> TestPair {
        let h = self.gt_depth.shape()[0];
        let f = |r: &Mat3| -> Mat3 {
            let s = [1.0, -1.0, 1.0];
            let mut out = *r;
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = s[i] * r[i][j] * s[j];
                }
            }
            out
        };
        TestPair {
            name: self.name.clone(),
            frames: self.frames.iter().map(Tensor::flip_vertical).collect(),
            gt_depth: self.gt_depth.flip_vertical(),
            rotation: f(&self.rotation),
            displacement: self.displacement,
            intrinsics: self.intrinsics.flipped_vertical(h),
        }
    }
}

/// Test pairs of the held-out scenes, or of every scene when none are held out.
pub fn test_pairs(dataset: &Dataset) -> Result<Vec<TestPair>> {
    let mut seqs = dataset.val();
    if seqs.is_empty() {
        log::info!("dataset has no held-out scenes; evaluating every scene");
        seqs = dataset.sequences.iter().collect();
    }
    seqs.into_iter().map(TestPair::from_sequence).collect()
}

/// Trained weights and their configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub meta: ModelMeta,
    pub params: ParamSet,
}

impl Model {
    /// Load `model.json` and `model.mdnc` from a training output directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, params) = crate::trainer::load_model(dir)?;
        Ok(Model { meta, params })
    }

    pub fn nominal(&self) -> Result<NominalDisplacement> {
        NominalDisplacement::new(self.meta.d0, self.meta.epsilon)
    }

    pub fn has_posenet(&self) -> bool {
        self.params.contains_key("pose.out.w")
    }

    /// Full-resolution `ζ` for a reference/target pair and known `R_{t→r}`.
    pub fn zeta(&self, reference: &Tensor, target: &Tensor, rotation: &Mat3, k: &Intrinsics) -> Result<Tensor> {
        let (stab, _) = stabilize_image(reference, rotation, k)?;
        let tape = Tape::new();
        let depth_params: ParamSet = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("depth."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let pv = lift_params(&tape, &depth_params);
        let z = depthnet_forward(&self.meta.depth, &pv, &tape.constant(stab), &tape.constant(target.clone()))?;
        Ok(z[0].to_tensor())
    }

    /// PoseNet estimate of `R_{t→r}` from the last `N` frames, target last
    /// and reference just before it.
    pub fn estimate_rotation(&self, frames: &[Tensor]) -> Result<Mat3> {
        if !self.has_posenet() {
            return Err(Error::InvalidArgument("checkpoint has no PoseNet weights".into()));
        }
        let n = self.meta.pose.num_frames;
        if frames.len() < n {
            return Err(Error::InvalidArgument(format!(
                "PoseNet needs {n} frames ending with the target, got {}",
                frames.len()
            )));
        }
        let tape = Tape::new();
        let pose_params: ParamSet = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("pose."))
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        let pv = lift_params(&tape, &pose_params);
        let window: Vec<&Tensor> = frames[frames.len() - n..].iter().collect();
        let poses = posenet_forward(&self.meta.pose, &pv, &tape.constant(Tensor::concat0(&window)?))?;
        Ok(poses[n - 2].value().rotation)
    }
}

/// Absolute depth for one pair. `rotation` is `R_{t→r}` from an external
/// sensor; without it the model's PoseNet estimates it from `context`
/// (frames ending with reference, target).
pub fn infer_pair(
    model: &Model,
    reference: &Tensor,
    target: &Tensor,
    rotation: Option<&Mat3>,
    context: Option<&[Tensor]>,
    displacement: f64,
    k: &Intrinsics,
) -> Result<Tensor> {
    let rot = match (rotation, context) {
        (Some(r), _) => *r,
        (None, _) if !model.has_posenet() => {
            return Err(Error::InvalidArgument(
                "no rotation given and the checkpoint has no PoseNet to estimate it".into(),
            ))
        }
        (None, Some(ctx)) => model.estimate_rotation(ctx)?,
        (None, None) => model.estimate_rotation(&[reference.clone(), target.clone()])?,
    };
    let zeta = model.zeta(reference, target, &rot, k)?;
    absolute_depth(&zeta, displacement, &model.nominal()?)
}

/// Where the evaluated model gets `R_{t→r}` from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationSource {
    #[default]
    GroundTruth,
    PoseNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub flip_vertical: bool,
    pub cap: [f64; 2],
    pub rotation: RotationSource,
    /// Directory for per-frame PFM depth and inverse-depth PPM images.
    pub visualize: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            flip_vertical: false,
            cap: DEFAULT_DEPTH_CAP,
            rotation: RotationSource::GroundTruth,
            visualize: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub name: String,
    pub scale: f64,
    pub valid_pixels: usize,
    pub metrics: DepthMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scale_mode: ScaleMode,
    pub flip_vertical: bool,
    pub cap: [f64; 2],
    pub valid_pixels: usize,
    pub mean: DepthMetrics,
    pub frames: Vec<FrameReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per frame plus the mean.
    pub fn table(&self) -> String {
        let header = ["abs_rel", "sq_rel", "rmse", "rmse_log", "d<1.25", "d<1.25^2", "d<1.25^3"];
        let name_w = self.frames.iter().map(|f| f.name.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scale mode: {}{}",
            self.scale_mode,
            if self.flip_vertical { " (vertically flipped)" } else { "" }
        );
        let _ = write!(s, "{:<name_w$}", "frame");
        for h in header {
            let _ = write!(s, " {h:>9}");
        }
        s.push('\n');
        let row = |s: &mut String, name: &str, m: &DepthMetrics| {
            let _ = write!(s, "{name:<name_w$}");
            for v in m.values() {
                let _ = write!(s, " {v:>9.4}");
            }
            s.push('\n');
        };
        for f in &self.frames {
            row(&mut s, &f.name, &f.metrics);
        }
        row(&mut s, "mean", &self.mean);
        s
    }

    /// Write `eval.json` and `eval.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("eval.json");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("eval.txt");
        fs::write(&txt, self.table()).map_err(|e| Error::io(&txt, e))
    }
}

/// 8-bit inverse-depth colour image, normalized by the largest finite value.
pub fn inverse_depth_colormap(depth: &Tensor) -> Tensor {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.02],
        [0.3, 0.05, 0.45],
        [0.75, 0.2, 0.45],
        [0.98, 0.55, 0.25],
        [0.99, 0.99, 0.75],
    ];
    let inv: Vec<f64> = depth
        .data()
        .iter()
        .map(|&d| if d.is_finite() && d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let top = inv.iter().copied().fold(0.0, f64::max);
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for (i, &v) in inv.iter().enumerate() {
        let x = if top > 0.0 { v / top } else { 0.0 } * (STOPS.len() - 1) as f64;
        let k = (x.floor() as usize).min(STOPS.len() - 2);
        let f = x - k as f64;
        for c in 0..3 {
            data[c * h * w + i] = STOPS[k][c] * (1.0 - f) + STOPS[k + 1][c] * f;
        }
    }
    out
}

fn write_visualization(dir: &Path, name: &str, depth: &Tensor) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&dir.join(format!("{name}_depth.pfm")), depth)?;
    write_ppm(&dir.join(format!("{name}_invdepth.ppm")), &inverse_depth_colormap(depth))
}

/// Evaluate any predictor of unscaled depth on the pairs. `d0` is the
/// nominal displacement used by [`ScaleMode::P`].
pub fn evaluate_with<F>(pairs: &[TestPair], mode: ScaleMode, opts: &EvalOptions, d0: f64, predict: F) -> Result<EvalReport>
where
    F: Fn(&TestPair) -> Result<Tensor> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no test pairs".into()));
    }
    if mode == ScaleMode::P {
        if let Some(p) = pairs.iter().find(|p| p.displacement.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "pair {} has no displacement; P scale mode needs one",
                p.name
            )));
        }
    }
    let frames = crate::par::map_ordered(pairs, |pair| -> Result<(FrameReport, Tensor)> {
        let pair = if opts.flip_vertical { pair.flipped() } else { pair.clone() };
        let pred = predict(&pair)?;
        let mask = valid_mask(&pair.gt_depth, opts.cap);
        let scale = scale_factor(&pred, &pair.gt_depth, &mask, mode, pair.displacement, d0)?;
        let scaled = pred.map(|v| v * scale);
        let metrics = eigen_metrics(&scaled, &pair.gt_depth, &mask, opts.cap)?;
        let valid_pixels = mask.data().iter().filter(|&&m| m > 0.0).count();
        Ok((
            FrameReport {
                name: pair.name.clone(),
                scale,
                valid_pixels,
                metrics,
            },
            scaled,
        ))
    });
    let mut reports = Vec::with_capacity(frames.len());
    for f in frames {
        let (report, scaled) = f?;
        if let Some(dir) = &opts.visualize {
            write_visualization(dir, &report.name, &scaled)?;
        }
        reports.push(report);
    }
    let mean = DepthMetrics::mean(&reports.iter().map(|f| f.metrics).collect::<Vec<_>>());
    Ok(EvalReport {
        scale_mode: mode,
        flip_vertical: opts.flip_vertical,
        cap: opts.cap,
        valid_pixels: reports.iter().map(|f| f.valid_pixels).sum(),
        mean,
        frames: reports,
    })
}

/// Evaluate a trained model on the pairs.
pub fn evaluate(model: &Model, pairs: &[TestPair], mode: ScaleMode, opts: &EvalOptions) -> Result<EvalReport> {
    let nd = model.nominal()?;
    evaluate_with(pairs, mode, opts, nd.d0(), |pair| {
        let rot = match opts.rotation {
            RotationSource::GroundTruth => pair.rotation,
            RotationSource::PoseNet => model.estimate_rotation(&pair.frames)?,
        };
        model.zeta(pair.reference(), pair.target(), &rot, &pair.intrinsics)
    })
}

/// Predictor that outputs depth 1 everywhere.
pub fn constant_plane_baseline(pairs: &[TestPair], mode: ScaleMode, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(pairs, mode, opts, 1.0, |pair| Ok(Tensor::ones(pair.gt_depth.shape())))
}
