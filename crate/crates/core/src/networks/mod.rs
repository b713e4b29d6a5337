//! DepthNet and PoseNet on the tape.
//!
//! Parameters live in a [`ParamSet`] keyed by name; a forward pass lifts
//! them onto a tape as [`ParamVars`].

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::var::PoseVar;
use crate::geometry::{mat_flat, mat_vec, Mat3, Pose};
use crate::tape::{Tape, Tensor, Var};
use crate::warp::bilinear_sample;

pub use checkpoint::{read_params, write_params, ModelMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Added to `ELU(x) + 1` so depth is bounded away from zero.
pub const DEPTH_EPS: f64 = 0.01;
/// Multiplier on raw PoseNet outputs.
pub const POSE_OUTPUT_SCALE: f64 = 0.01;
/// Resolution level (1/2^level) the depth decoder stops at.
pub const DECODER_FLOOR: usize = 2;
/// Negative slope of DepthNet's hidden activations.
pub const DEPTH_LEAK: f64 = 0.1;

pub type ParamSet = BTreeMap<String, Tensor>;
pub type ParamVars<'t> = BTreeMap<String, Var<'t>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    pub base_channels: usize,
    pub num_levels: usize,
    pub num_output_scales: usize,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            base_channels: 8,
            num_levels: 5,
            num_output_scales: 4,
        }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_levels <= DECODER_FLOOR || self.num_output_scales == 0 {
            return Err(Error::InvalidArgument(format!(
                "depth net needs base_channels >= 1, num_levels > {DECODER_FLOOR}, num_output_scales >= 1; got {self:?}"
            )));
        }
        if self.num_output_scales > self.num_levels {
            return Err(Error::InvalidArgument(format!(
                "num_output_scales {} exceeds num_levels {}",
                self.num_output_scales, self.num_levels
            )));
        }
        Ok(())
    }

    /// Feature width at encoder level `l` (1-based), doubling up to 8×base.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1).min(3)
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.num_levels
    }

    fn has_head(&self, level: usize) -> bool {
        level < self.num_output_scales || (level == DECODER_FLOOR && self.num_output_scales > 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseNetConfig {
    pub base_channels: usize,
    pub num_frames: usize,
    pub num_stride2_layers: usize,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            base_channels: 8,
            num_frames: 5,
            num_stride2_layers: 5,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_frames < 2 || self.num_stride2_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "pose net needs base_channels >= 1, num_frames >= 2, num_stride2_layers >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.base_channels << (layer - 1).min(3)
    }

    pub fn num_outputs(&self) -> usize {
        6 * (self.num_frames - 1)
    }
}

struct ConvSpec {
    name: String,
    out: usize,
    inp: usize,
    k: usize,
    zero: bool,
}

fn conv(name: String, out: usize, inp: usize, k: usize) -> ConvSpec {
    ConvSpec {
        name,
        out,
        inp,
        k,
        zero: false,
    }
}

fn depth_layers(cfg: &DepthNetConfig) -> Vec<ConvSpec> {
    let mut v = Vec::new();
    let mut prev = 6;
    for l in 1..=cfg.num_levels {
        let c = cfg.channels(l);
        v.push(conv(format!("depth.enc{l}.down"), c, prev, 3));
        v.push(conv(format!("depth.enc{l}.conv"), c, c, 3));
        prev = c;
    }
    for l in (DECODER_FLOOR..cfg.num_levels).rev() {
        let c = cfg.channels(l);
        v.push(conv(format!("depth.dec{l}.conv"), c, prev + c, 3));
        prev = c;
        if cfg.has_head(l) {
            v.push(ConvSpec {
                zero: true,
                ..conv(format!("depth.head{l}"), 1, c, 3)
            });
        }
    }
    v
}

fn pose_layers(cfg: &PoseNetConfig) -> Vec<ConvSpec> {
    let mut v = Vec::new();
    let mut prev = 3 * cfg.num_frames;
    for l in 1..=cfg.num_stride2_layers {
        let c = cfg.channels(l);
        v.push(conv(format!("pose.conv{l}"), c, prev, 3));
        prev = c;
    }
    v.push(ConvSpec {
        zero: true,
        ..conv("pose.out".into(), cfg.num_outputs(), prev, 1)
    });
    v
}

fn init_layers(layers: &[ConvSpec], rng: &mut ChaCha8Rng, params: &mut ParamSet) {
    for s in layers {
        let n = s.out * s.inp * s.k * s.k;
        let fan_in = (s.inp * s.k * s.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f64> = if s.zero {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.insert(
            format!("{}.w", s.name),
            Tensor::new(vec![s.out, s.inp, s.k, s.k], w).expect("layer shape"),
        );
        params.insert(format!("{}.b", s.name), Tensor::zeros(&[s.out]));
    }
}

/// Deterministic initialization: He-uniform weights, zero biases, and
/// zero final prediction layers.
pub fn init_params(depth: &DepthNetConfig, pose: &PoseNetConfig, seed: u64) -> Result<ParamSet> {
    depth.validate()?;
    pose.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    init_layers(&depth_layers(depth), &mut rng, &mut params);
    init_layers(&pose_layers(pose), &mut rng, &mut params);
    Ok(params)
}

pub fn param_count(params: &ParamSet) -> usize {
    params.values().map(Tensor::numel).sum()
}

/// Register every parameter on `tape` as a gradient leaf.
pub fn lift_params<'t>(tape: &'t Tape, params: &ParamSet) -> ParamVars<'t> {
    params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect()
}

fn get<'a, 't>(p: &'a ParamVars<'t>, name: &str) -> Result<&'a Var<'t>> {
    p.get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
}

fn conv_layer<'t>(p: &ParamVars<'t>, name: &str, x: &Var<'t>, stride: usize) -> Result<Var<'t>> {
    let w = get(p, &format!("{name}.w"))?;
    let b = get(p, &format!("{name}.b"))?;
    let k = w.shape()[2];
    x.conv2d(w, Some(b), stride, k / 2)
}

/// Bilinear 2^levels upsampling of an `[H, W]` map, cell-centre aligned
/// with edge clamping.
pub fn upsample_bilinear<'t>(x: &Var<'t>, levels: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (h, w) = (s[0], s[1]);
    let f = (1usize << levels) as f64;
    let (ho, wo) = (h << levels, w << levels);
    let mut coords = vec![0.0; 2 * ho * wo];
    for y in 0..ho {
        let v = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
        for xx in 0..wo {
            let u = ((xx as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
            coords[y * wo + xx] = u;
            coords[ho * wo + y * wo + xx] = v;
        }
    }
    let c = x.tape().constant(Tensor::new(vec![2, ho, wo], coords)?);
    bilinear_sample(&x.reshape(&[1, h, w])?, &c)?.image.reshape(&[ho, wo])
}

/// Multi-scale depth `ζ^s`, `s = 0` at full resolution, from the
/// stabilized reference and the target image (both `[3, H, W]`).
pub fn depthnet_forward<'t>(
    cfg: &DepthNetConfig,
    params: &ParamVars<'t>,
    ref_stab: &Var<'t>,
    target: &Var<'t>,
) -> Result<Vec<Var<'t>>> {
    cfg.validate()?;
    let (rs, ts) = (ref_stab.shape(), target.shape());
    if rs != ts || rs.len() != 3 || rs[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "depthnet",
            lhs: rs,
            rhs: ts,
        });
    }
    let d = cfg.divisor();
    if rs[1] % d != 0 || rs[2] % d != 0 || rs[1] == 0 || rs[2] == 0 {
        return Err(Error::InvalidShape {
            op: "depthnet",
            reason: format!("spatial extent {}x{} not divisible by {d}", rs[1], rs[2]),
        });
    }
    let tape = target.tape();
    let mut x = tape.concat(&[*ref_stab, *target], 0)?.add_scalar(-0.5);
    let mut skips = Vec::with_capacity(cfg.num_levels);
    for l in 1..=cfg.num_levels {
        x = conv_layer(params, &format!("depth.enc{l}.down"), &x, 2)?.leaky_relu(DEPTH_LEAK);
        x = conv_layer(params, &format!("depth.enc{l}.conv"), &x, 1)?.leaky_relu(DEPTH_LEAK);
        skips.push(x);
    }
    let mut heads: BTreeMap<usize, Var<'t>> = BTreeMap::new();
    for l in (DECODER_FLOOR..cfg.num_levels).rev() {
        let up = x.upsample2x()?;
        let cat = tape.concat(&[up, skips[l - 1]], 0)?;
        x = conv_layer(params, &format!("depth.dec{l}.conv"), &cat, 1)?.leaky_relu(DEPTH_LEAK);
        if cfg.has_head(l) {
            let raw = conv_layer(params, &format!("depth.head{l}"), &x, 1)?;
            let s = raw.shape();
            let z = raw.elu().add_scalar(1.0 + DEPTH_EPS).reshape(&[s[1], s[2]])?;
            heads.insert(l, z);
        }
    }
    let floor = heads[&DECODER_FLOOR];
    (0..cfg.num_output_scales)
        .map(|s| {
            if s < DECODER_FLOOR {
                upsample_bilinear(&floor, DECODER_FLOOR - s)
            } else {
                Ok(heads[&s])
            }
        })
        .collect()
}

/// Raw pose vectors `[N−1, 6]` (angles then translation, already scaled),
/// frame `i` relative to the last frame.
pub fn posenet_raw<'t>(cfg: &PoseNetConfig, params: &ParamVars<'t>, frames: &Var<'t>) -> Result<Var<'t>> {
    cfg.validate()?;
    let s = frames.shape();
    if s.len() != 3 || s[0] != 3 * cfg.num_frames {
        return Err(Error::InvalidShape {
            op: "posenet",
            reason: format!("expected [{}, H, W], got {s:?}", 3 * cfg.num_frames),
        });
    }
    let mut x = frames.add_scalar(-0.5);
    for l in 1..=cfg.num_stride2_layers {
        let xs = x.shape();
        if xs[1] < 2 || xs[2] < 2 {
            return Err(Error::InvalidShape {
                op: "posenet",
                reason: format!("spatial extent collapses at layer {l} from {}x{}", s[1], s[2]),
            });
        }
        x = conv_layer(params, &format!("pose.conv{l}"), &x, 2)?.relu();
    }
    let out = conv_layer(params, "pose.out", &x, 1)?;
    out.mean_axes(&[1, 2])?
        .mul_scalar(POSE_OUTPUT_SCALE)
        .reshape(&[cfg.num_frames - 1, 6])
}

/// Differentiable poses `T_{last→i}` for all `N` frames; the last entry is
/// the identity.
pub fn posenet_forward<'t>(cfg: &PoseNetConfig, params: &ParamVars<'t>, frames: &Var<'t>) -> Result<Vec<PoseVar<'t>>> {
    let raw = posenet_raw(cfg, params, frames)?;
    let flat = raw.reshape(&[6 * (cfg.num_frames - 1)])?;
    let mut poses = (0..cfg.num_frames - 1)
        .map(|i| PoseVar::from_vector(&flat.narrow(0, 6 * i, 6)?))
        .collect::<Result<Vec<_>>>()?;
    poses.push(PoseVar::identity(frames.tape()));
    Ok(poses)
}

/// Target-relative poses with rotations replaced by ground truth.
///
/// `gt_to_target[i]` is `R_{t→i}`. Translations come from the network:
/// `t_{t→i} = t_{last→i} − R_{t→i}·t_{last→t}`. The returned rotation nodes
/// hold the ground-truth values bit for bit.
pub fn orientation_supervised<'t>(
    poses_to_last: &[PoseVar<'t>],
    gt_to_target: &[Mat3],
    target: usize,
) -> Result<Vec<PoseVar<'t>>> {
    let n = poses_to_last.len();
    if gt_to_target.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth rotations for {n} poses",
            gt_to_target.len()
        )));
    }
    if target >= n {
        return Err(Error::IndexOutOfRange { index: target, len: n });
    }
    let tape = poses_to_last[target].translation.tape();
    let t_lt = poses_to_last[target].translation.reshape(&[3, 1])?;
    poses_to_last
        .iter()
        .zip(gt_to_target)
        .enumerate()
        .map(|(i, (p, r))| {
            let rot = tape.constant(Tensor::new(vec![3, 3], mat_flat(r))?);
            let translation = if i == target {
                tape.constant(Tensor::zeros(&[3]))
            } else {
                p.translation.sub(&rot.matmul(&t_lt)?.reshape(&[3])?)?
            };
            Ok(PoseVar {
                rotation: rot,
                translation,
            })
        })
        .collect()
}

/// Plain counterpart of [`orientation_supervised`] for checking.
pub fn orientation_supervised_plain(poses_to_last: &[Pose], gt_to_target: &[Mat3], target: usize) -> Vec<Pose> {
    let t_lt = poses_to_last[target].translation;
    poses_to_last
        .iter()
        .zip(gt_to_target)
        .enumerate()
        .map(|(i, (p, r))| {
            if i == target {
                return Pose::new(*r, [0.0; 3]);
            }
            let rt = mat_vec(r, &t_lt);
            Pose::new(
                *r,
                [
                    p.translation[0] - rt[0],
                    p.translation[1] - rt[1],
                    p.translation[2] - rt[2],
                ],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compensate_to_target;

    fn small_depth() -> DepthNetConfig {
        DepthNetConfig {
            base_channels: 4,
            num_levels: 3,
            num_output_scales: 3,
        }
    }

    fn image(h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| {
            let x = (i % w) as f64;
            let y = ((i / w) % h) as f64;
            let c = (i / (h * w)) as f64;
            0.5 + 0.4 * (0.37 * x + 0.23 * y + phase + c).sin()
        })
    }

    #[test]
    fn init_is_deterministic_and_count_is_pinned() {
        let d = DepthNetConfig::default();
        let p = PoseNetConfig::default();
        let a = init_params(&d, &p, 3).unwrap();
        let b = init_params(&d, &p, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&d, &p, 4).unwrap());
        assert_eq!(param_count(&a), 320_394);
    }

    #[test]
    fn zero_heads_give_constant_depth_and_pinned_shapes() {
        let cfg = DepthNetConfig::default();
        let params = init_params(&cfg, &PoseNetConfig::default(), 0).unwrap();
        let tape = Tape::new();
        let pv = lift_params(&tape, &params);
        let a = tape.constant(image(64, 64, 0.0));
        let b = tape.constant(image(64, 64, 1.0));
        let zs = depthnet_forward(&cfg, &pv, &a, &b).unwrap();
        let shapes: Vec<Vec<usize>> = zs.iter().map(|z| z.shape()).collect();
        assert_eq!(shapes, vec![vec![64, 64], vec![32, 32], vec![16, 16], vec![8, 8]]);
        for z in &zs {
            assert!(z.value().iter().all(|&v| (v - 1.01).abs() < 1e-15));
        }
    }

    #[test]
    fn depthnet_rejects_indivisible_input() {
        let cfg = DepthNetConfig::default();
        let params = init_params(&cfg, &PoseNetConfig::default(), 0).unwrap();
        let tape = Tape::new();
        let pv = lift_params(&tape, &params);
        let a = tape.constant(image(48, 64, 0.0));
        assert!(depthnet_forward(&cfg, &pv, &a, &a).is_err());
    }

    fn randomize_heads(params: &mut ParamSet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, v) in params.iter_mut() {
            if k.contains("head") || k.starts_with("pose.out") {
                v.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.05..0.05));
            }
        }
    }

    #[test]
    fn depth_is_positive_and_uses_both_frames() {
        let cfg = small_depth();
        let mut params = init_params(&cfg, &PoseNetConfig::default(), 1).unwrap();
        randomize_heads(&mut params, 2);
        let tape = Tape::new();
        let pv = lift_params(&tape, &params);
        let a = tape.constant(image(16, 24, 0.0));
        let b = tape.constant(image(16, 24, 2.0));
        let ab = depthnet_forward(&cfg, &pv, &a, &b).unwrap();
        let ba = depthnet_forward(&cfg, &pv, &b, &a).unwrap();
        assert!(ab.iter().all(|z| z.value().iter().all(|&v| v > 0.0)));
        assert!(ab[0].to_tensor().max_abs_diff(&ba[0].to_tensor()) > 1e-6);
    }

    #[test]
    fn depthnet_shift_equivariant_in_interior() {
        // shifts that are multiples of the total stride commute with the net
        // away from the zero-padded border
        let cfg = small_depth();
        let mut params = init_params(&cfg, &PoseNetConfig::default(), 5).unwrap();
        randomize_heads(&mut params, 6);
        let (h, w, shift) = (16, 128, 8);
        let a = image(h, w + shift, 0.0);
        let b = image(h, w + shift, 1.3);
        let crop = |t: &Tensor, x0: usize| Tensor::from_fn(&[3, h, w], |i| t.at(&[i / (h * w), (i / w) % h, i % w + x0]));
        let tape = Tape::new();
        let pv = lift_params(&tape, &params);
        let z0 = depthnet_forward(&cfg, &pv, &tape.constant(crop(&a, 0)), &tape.constant(crop(&b, 0))).unwrap()[0].to_tensor();
        let z1 = depthnet_forward(&cfg, &pv, &tape.constant(crop(&a, shift)), &tape.constant(crop(&b, shift))).unwrap()[0].to_tensor();
        let margin = 48;
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in margin..w - margin - shift {
                worst = worst.max((z0.at(&[y, x + shift]) - z1.at(&[y, x])).abs());
            }
        }
        assert!(worst < 1e-3, "worst {worst}");
    }

    #[test]
    fn posenet_identity_at_init() {
        let cfg = PoseNetConfig::default();
        let params = init_params(&DepthNetConfig::default(), &cfg, 9).unwrap();
        let tape = Tape::new();
        let pv = lift_params(&tape, &params);
        let frames = Tensor::concat0(&[&image(32, 32, 0.0); 5]).unwrap();
        let poses = posenet_forward(&cfg, &pv, &tape.constant(frames)).unwrap();
        assert_eq!(poses.len(), 5);
        for p in &poses {
            assert_eq!(p.value(), Pose::identity());
        }
    }

    #[test]
    fn posenet_rejects_wrong_channels_and_collapse() {
        let cfg = PoseNetConfig::default();
        let params = init_params(&DepthNetConfig::default(), &cfg, 9).unwrap();
        let tape = Tape::new();
        let pv = lift_params(&tape, &params);
        assert!(posenet_forward(&cfg, &pv, &tape.constant(Tensor::zeros(&[9, 32, 32]))).is_err());
        assert!(posenet_forward(&cfg, &pv, &tape.constant(Tensor::zeros(&[15, 8, 8]))).is_err());
    }

    #[test]
    fn orientation_override_is_bit_exact_and_consistent() {
        let tape = Tape::new();
        let plain: Vec<Pose> = (0..4)
            .map(|i| Pose::from_euler([0.01 * i as f64, -0.02, 0.03], [0.1 * i as f64, 0.2, -0.1]))
            .collect();
        let mut plain = plain;
        plain[3] = Pose::identity();
        let target = 1;
        let comp = compensate_to_target(&plain, target).unwrap();
        let gt: Vec<Mat3> = comp.iter().map(|p| p.rotation).collect();
        let vars: Vec<PoseVar> = plain.iter().map(|p| PoseVar::constant(&tape, p)).collect();
        let out = orientation_supervised(&vars, &gt, target).unwrap();
        for (o, (c, r)) in out.iter().zip(comp.iter().zip(&gt)) {
            assert_eq!(o.value().rotation, *r);
            assert!(o.value().max_abs_diff(c) < 1e-12);
        }
        let plain_out = orientation_supervised_plain(&plain, &gt, target);
        assert_eq!(plain_out[target].rotation, gt[target]);
        assert!(out[target].value().max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 5], 2.5));
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), vec![16, 20]);
        assert!(y.value().iter().all(|&v| v == 2.5));
    }
}
