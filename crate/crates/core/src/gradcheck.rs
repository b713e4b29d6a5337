//! Central finite-difference checks of every differentiable operation.
//!
//! Each case maps inputs to some tensor; the checker contracts it with fixed
//! random weights into a scalar and compares reverse-mode gradients against
//! `(f(x+h) − f(x−h)) / 2h` at randomly chosen input elements.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::var::{compensate_to_target_var, euler_to_matrix_var, normalize_translations_var, PoseVar};
use crate::geometry::{Intrinsics, NominalDisplacement};
use crate::losses::{photometric_loss, smooth_loss, ssim_var, total_loss, LossWeights};
use crate::networks::{init_params, upsample_bilinear, DepthNetConfig, ParamSet};
use crate::stillbox::{generate_scenes, GeneratorConfig};
use crate::tape::{StencilKernel, Tape, Tensor, Var};
use crate::trainer::{forward_window, Supervision, TrainConfig, Window};
use crate::warp::{bilinear_sample, inverse_warp, stabilize};

pub const FD_STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_PROBES: usize = 100;
/// Side of the square images used by the full-pipeline check.
pub const PIPELINE_SIZE: usize = 16;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failures(&self) -> Vec<&OpReport> {
        self.ops.iter().filter(|o| !o.passed()).collect()
    }

    pub fn table(&self) -> String {
        let w = self.ops.iter().map(|o| o.name.len()).max().unwrap_or(2).max(2);
        let mut s = format!("{:<w$} {:>6} {:>12} {:>9}  result\n", "op", "probes", "max_rel_err", "tolerance");
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<w$} {:>6} {:>12.3e} {:>9.0e}  {}",
                o.name,
                o.probes,
                o.max_rel_err,
                o.tolerance,
                if o.passed() { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn contract<'t>(tape: &'t Tape, out: &Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    if out.numel() != weights.numel() {
        return Err(Error::InvalidShape {
            op: "gradcheck",
            reason: format!("case output changed size: {:?}", out.shape()),
        });
    }
    Ok(out.reshape(&[weights.numel()])?.mul(&tape.constant(weights.clone()))?.sum())
}

/// Compare gradients of `f` with respect to every input at `probes` random
/// elements (all elements when there are fewer).
pub fn check_op<F>(name: &str, inputs: &[Tensor], probes: usize, tolerance: f64, rng: &mut ChaCha8Rng, f: F) -> Result<OpReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Tensor::from_fn(&[out.numel()], |_| rng.gen_range(-1.0..1.0))
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = contract(&tape, &f(&tape, &vars)?, &weights)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        Ok(contract(&tape, &f(&tape, &vars)?, &weights)?.item())
    };

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let picks = sample(rng, total, probes.min(total)).into_vec();
    let mut work = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    for flat in &picks {
        let which = offsets.iter().rposition(|&o| o <= *flat).expect("offset 0 exists");
        let idx = flat - offsets[which];
        let x0 = inputs[which].data()[idx];
        work[which].data_mut()[idx] = x0 + FD_STEP;
        let plus = eval(&work)?;
        work[which].data_mut()[idx] = x0 - FD_STEP;
        let minus = eval(&work)?;
        work[which].data_mut()[idx] = x0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        max_err = max_err.max(relative_error(analytic[which].data()[idx], numeric));
    }
    // Inputs with fewer elements than requested probes get the remainder as
    // directional derivatives along random unit directions.
    let extra = probes.saturating_sub(picks.len());
    for _ in 0..extra {
        let dirs: Vec<Tensor> = inputs.iter().map(|t| uniform(rng, t.shape(), -1.0, 1.0)).collect();
        let norm = dirs.iter().map(|d| d.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| {
                    let mut y = x.clone();
                    for (a, b) in y.data_mut().iter_mut().zip(d.data()) {
                        *a += sign * FD_STEP * b / norm;
                    }
                    y
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * FD_STEP);
        let exact: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / norm;
        max_err = max_err.max(relative_error(exact, numeric));
    }
    Ok(OpReport {
        name: name.to_string(),
        probes: picks.len() + extra,
        max_rel_err: max_err,
        tolerance,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, either sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Sampling locations inside a `w × h` image, away from lattice lines.
fn coords(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[2, h, w]);
    let d = t.data_mut();
    for (k, max) in [(0, w), (1, h)] {
        for i in 0..h * w {
            let base = rng.gen_range(0..max - 1) as f64;
            d[k * h * w + i] = base + rng.gen_range(0.1..0.9);
        }
    }
    t
}

fn k_for(size: usize) -> Intrinsics {
    Intrinsics::from_fov(size, size, 70f64.to_radians()).expect("valid intrinsics")
}

/// A random pose with a few degrees of rotation and a short translation.
fn pose_vec(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[6], |i| if i < 3 { rng.gen_range(-0.05..0.05) } else { rng.gen_range(-0.2..0.2) })
}

/// Run the per-op suite at spatial size `size` plus the full pipeline check.
pub fn run_suite(seed: u64, size: usize, probes: usize) -> Result<GradcheckReport> {
    if size < 4 || size % 2 != 0 {
        return Err(Error::InvalidArgument(format!("gradcheck size must be even and >= 4, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = size;
    let tol = OP_TOLERANCE;
    let mut ops = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),+], $f:expr) => {{
            let inputs = vec![$($input),+];
            ops.push(check_op($name, &inputs, probes, tol, r, $f)?);
        }};
    }

    let chw = [3, s, s];
    case!("add", [uniform(r, &chw, -1.0, 1.0), uniform(r, &[s, s], -1.0, 1.0)], |_, v| v[0].add(&v[1]));
    case!("sub", [uniform(r, &chw, -1.0, 1.0), uniform(r, &chw, -1.0, 1.0)], |_, v| v[0].sub(&v[1]));
    case!("mul", [uniform(r, &chw, -1.0, 1.0), uniform(r, &[s, s], -1.0, 1.0)], |_, v| v[0].mul(&v[1]));
    case!("div", [uniform(r, &chw, -1.0, 1.0), uniform(r, &chw, 0.5, 2.0)], |_, v| v[0].div(&v[1]));
    case!("scalar_ops", [uniform(r, &chw, -1.0, 1.0)], |_, v| Ok(v[0].add_scalar(0.3).mul_scalar(-1.7).neg()));
    case!("powf", [uniform(r, &chw, 0.2, 2.0)], |_, v| Ok(v[0].powf(2.5)));
    case!("square", [uniform(r, &chw, -2.0, 2.0)], |_, v| Ok(v[0].square()));
    case!("abs", [off_zero(r, &chw)], |_, v| Ok(v[0].abs()));
    case!("exp", [uniform(r, &chw, -2.0, 2.0)], |_, v| Ok(v[0].exp()));
    case!("log", [uniform(r, &chw, 0.1, 3.0)], |_, v| v[0].log());
    case!("sqrt", [uniform(r, &chw, 0.1, 3.0)], |_, v| Ok(v[0].sqrt()));
    case!("sin_cos", [uniform(r, &chw, -3.0, 3.0)], |_, v| v[0].sin().mul(&v[0].cos()));
    case!("relu", [off_zero(r, &chw)], |_, v| Ok(v[0].relu()));
    case!("leaky_relu", [off_zero(r, &chw)], |_, v| Ok(v[0].leaky_relu(0.1)));
    case!("elu", [off_zero(r, &chw)], |_, v| Ok(v[0].elu()));
    case!("clamp_min", [off_zero(r, &chw)], |_, v| Ok(v[0].clamp_min(0.0)));
    case!("sum_mean", [uniform(r, &chw, -1.0, 1.0)], |_, v| {
        let a = v[0].sum_axes(&[1])?;
        let b = v[0].mean_axes(&[1, 2])?;
        Ok(a.sum().add(&b.mean()?.mul_scalar(3.0))?)
    });
    case!("reshape_narrow_transpose", [uniform(r, &chw, -1.0, 1.0)], |_, v| {
        let m = v[0].reshape(&[3, s * s])?.narrow(1, 1, s)?;
        m.transpose()
    });
    case!("concat_element", [uniform(r, &chw, -1.0, 1.0), uniform(r, &[1, s, s], -1.0, 1.0)], |t, v| {
        let c = t.concat(&[v[0], v[1]], 0)?;
        c.add(&v[1].element(3)?)
    });
    case!("matmul", [uniform(r, &[6, 7], -1.0, 1.0), uniform(r, &[7, 5], -1.0, 1.0)], |_, v| v[0].matmul(&v[1]));
    case!(
        "conv2d_stride1",
        [uniform(r, &chw, -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)],
        |_, v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1)
    );
    case!(
        "conv2d_stride2",
        [uniform(r, &chw, -1.0, 1.0), uniform(r, &[5, 3, 3, 3], -0.5, 0.5), uniform(r, &[5], -0.5, 0.5)],
        |_, v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1)
    );
    case!(
        "conv2d_1x1",
        [uniform(r, &chw, -1.0, 1.0), uniform(r, &[2, 3, 1, 1], -0.5, 0.5)],
        |_, v| v[0].conv2d(&v[1], None, 1, 0)
    );
    case!("upsample2x", [uniform(r, &chw, -1.0, 1.0)], |_, v| v[0].upsample2x());
    case!("downsample2x_avg", [uniform(r, &chw, -1.0, 1.0)], |_, v| v[0].downsample2x_avg());
    case!("stencil_gaussian", [uniform(r, &chw, -1.0, 1.0)], |_, v| v[0].stencil3(StencilKernel::gaussian(1.0)));
    case!("stencil_laplacian", [uniform(r, &chw, -1.0, 1.0)], |_, v| v[0].stencil3(StencilKernel::laplacian()));
    case!("upsample_bilinear", [uniform(r, &[s / 2, s / 2], 0.5, 2.0)], |_, v| upsample_bilinear(&v[0], 1));
    case!("bilinear_sample", [uniform(r, &chw, 0.0, 1.0), coords(r, s, s)], |_, v| {
        Ok(bilinear_sample(&v[0], &v[1])?.image)
    });
    case!("euler_to_matrix", [uniform(r, &[3], -1.0, 1.0)], |_, v| euler_to_matrix_var(&v[0]));
    case!("pose_algebra", [pose_vec(r), pose_vec(r), uniform(r, &[3, 10], -2.0, 2.0)], |_, v| {
        let a = PoseVar::from_vector(&v[0])?;
        let b = PoseVar::from_vector(&v[1])?;
        a.compose(&b.inverse()?)?.transform_points(&v[2])
    });
    case!("compensate_normalize", [pose_vec(r), pose_vec(r), pose_vec(r)], |t, v| {
        let mut poses: Vec<PoseVar> = v.iter().map(PoseVar::from_vector).collect::<Result<_>>()?;
        poses.push(PoseVar::identity(t));
        let comp = compensate_to_target_var(&poses, 1)?;
        let nd = NominalDisplacement::new(0.5, 5e-6)?;
        let norm = normalize_translations_var(&comp, 2, &nd)?;
        let parts: Vec<Var> = norm.iter().map(|p| p.translation.reshape(&[3])).collect::<Result<_>>()?;
        t.concat(&parts, 0)
    });
    let k = k_for(s);
    case!(
        "inverse_warp",
        [uniform(r, &chw, 0.0, 1.0), uniform(r, &[s, s], 3.0, 6.0), pose_vec(r)],
        move |_, v| Ok(inverse_warp(&v[0], &v[1], &PoseVar::from_vector(&v[2])?, &k)?.image)
    );
    case!("stabilize", [uniform(r, &chw, 0.0, 1.0), uniform(r, &[3], -0.05, 0.05)], move |_, v| {
        Ok(stabilize(&v[0], &euler_to_matrix_var(&v[1])?, &k)?.image)
    });
    case!("ssim", [uniform(r, &chw, 0.0, 1.0), uniform(r, &chw, 0.0, 1.0)], |_, v| ssim_var(&v[0], &v[1]));
    let image = uniform(r, &chw, 0.0, 1.0);
    case!("smooth_loss", [uniform(r, &[s, s], 0.5, 3.0)], move |_, v| smooth_loss(&v[0], &image));
    let target = uniform(r, &chw, 0.0, 1.0);
    case!(
        "photometric_loss",
        [uniform(r, &chw, 0.0, 1.0), uniform(r, &[s, s], 3.0, 6.0), pose_vec(r)],
        move |t, v| {
            let w = inverse_warp(&v[0], &v[1], &PoseVar::from_vector(&v[2])?, &k)?;
            let l = photometric_loss(&[w], &t.constant(target.clone()), 0.075)?;
            let lg = smooth_loss(&v[1], &target)?;
            total_loss(
                &[(l, lg)],
                &LossWeights {
                    num_scales: 1,
                    ..Default::default()
                },
            )
        }
    );
    ops.push(check_pipeline(seed, probes)?);
    Ok(GradcheckReport { ops })
}

/// Parameters with every layer active: the zero-initialized final layers get
/// small random values so depth and translation gradients are nonzero.
fn active_params(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let mut p = init_params(&cfg.depth, &cfg.pose_config(), rng.gen())?;
    for (name, t) in p.iter_mut() {
        if name.starts_with("depth.head") || name.starts_with("pose.out") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    Ok(p)
}

/// Whole training loss with respect to network parameters on a small
/// Still Box window.
pub fn check_pipeline(seed: u64, probes: usize) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let cfg = TrainConfig {
        sequence_length: 3,
        d0: 0.1,
        epsilon: 1e-6,
        supervision: Supervision::None,
        depth: DepthNetConfig {
            base_channels: 4,
            num_levels: 4,
            num_output_scales: 4,
        },
        pose_base_channels: 4,
        pose_stride2_layers: 4,
        ..Default::default()
    };
    let gen = GeneratorConfig {
        width: PIPELINE_SIZE,
        height: PIPELINE_SIZE,
        frames_per_scene: 3,
        speed_min: 0.3,
        speed_max: 0.4,
        ..Default::default()
    };
    let (spec, frames) = generate_scenes(&gen, 1, seed)?.remove(0);
    let win = Window {
        frames: frames.iter().collect(),
        intrinsics: spec.intrinsics,
        target: 1,
        reference: 2,
        mirrored: false,
    };
    let params = active_params(&cfg, &mut rng)?;
    let analytic = forward_window(&params, &cfg, &win, 0, true)?.grads.expect("gradients requested");
    let names: Vec<&String> = params.keys().collect();
    let sizes: Vec<usize> = names.iter().map(|n| params[*n].numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut work = params.clone();
    let mut max_err: f64 = 0.0;
    let picks = sample(&mut rng, total, probes.min(total)).into_vec();
    for flat in &picks {
        let (mut which, mut idx) = (0, *flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let name = names[which];
        let x0 = params[name].data()[idx];
        let mut at = |x: f64| -> Result<f64> {
            work.get_mut(name).expect("name exists").data_mut()[idx] = x;
            Ok(forward_window(&work, &cfg, &win, 0, false)?.total)
        };
        let numeric = (at(x0 + FD_STEP)? - at(x0 - FD_STEP)?) / (2.0 * FD_STEP);
        at(x0)?;
        max_err = max_err.max(relative_error(analytic[name].data()[idx], numeric));
    }
    Ok(OpReport {
        name: "pipeline".into(),
        probes: picks.len(),
        max_rel_err: max_err,
        tolerance: PIPELINE_TOLERANCE,
    })
}
