//! Pinhole cameras, rigid poses and the pose bookkeeping of the training
//! loop: compensation to the target frame and translation normalization.
//!
//! Conventions shared by the whole crate:
//! - camera frame: x right, y down, z forward;
//! - pixel `(u, v)` = (column, row), origin at the centre of the top-left cell;
//! - a [`Pose`] maps point coordinates from a source frame into a
//!   destination frame, `X_dst = R·X_src + t`. `T_{t→i}` takes target-frame
//!   points into frame `i`.
//! - rotations are X-Y-Z Euler angles, `R = Rz(γ)·Ry(β)·Rx(α)`. Gimbal lock
//!   (`|β| = π/2`) is outside the operating range of per-frame motion.

pub mod var;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn mat_flat(a: &Mat3) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

pub fn mat_from_flat(v: &[f64]) -> Mat3 {
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(b: f64) -> Mat3 {
    let (s, c) = b.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(g: f64) -> Mat3 {
    let (s, c) = g.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `Rz(γ)·Ry(β)·Rx(α)` for angles `(α, β, γ)`.
pub fn euler_to_matrix(angles: &Vec3) -> Mat3 {
    mat_mul(&rot_z(angles[2]), &mat_mul(&rot_y(angles[1]), &rot_x(angles[0])))
}

/// Partial derivatives of [`euler_to_matrix`] with respect to each angle.
pub(crate) fn euler_jacobian(angles: &Vec3) -> [Mat3; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sg, cg) = angles[2].sin_cos();
    let drx = [[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]];
    let dry = [[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]];
    let drz = [[-sg, -cg, 0.0], [cg, -sg, 0.0], [0.0, 0.0, 0.0]];
    let (rx, ry, rz) = (rot_x(angles[0]), rot_y(angles[1]), rot_z(angles[2]));
    [
        mat_mul(&rz, &mat_mul(&ry, &drx)),
        mat_mul(&rz, &mat_mul(&dry, &rx)),
        mat_mul(&drz, &mat_mul(&ry, &rx)),
    ]
}

/// Inverse of [`euler_to_matrix`] with `β ∈ [-π/2, π/2]`.
pub fn matrix_to_euler(r: &Mat3) -> Vec3 {
    let beta = (-r[2][0]).clamp(-1.0, 1.0).asin();
    let alpha = r[2][1].atan2(r[2][2]);
    let gamma = r[1][0].atan2(r[0][0]);
    [alpha, beta, gamma]
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "intrinsics need positive focal lengths and a finite principal point, got fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Principal point at the image centre.
    pub fn centered(width: usize, height: usize, fx: f64, fy: f64) -> Result<Self> {
        Self::new(fx, fy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    /// Square pixels with the given horizontal field of view, centred.
    pub fn from_fov(width: usize, height: usize, hfov_rad: f64) -> Result<Self> {
        let f = width as f64 / 2.0 / (hfov_rad / 2.0).tan();
        Self::centered(width, height, f, f)
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Intrinsics after `levels` rounds of 2×2 mean pooling.
    pub fn downscaled(&self, levels: usize) -> Intrinsics {
        let mut k = *self;
        for _ in 0..levels {
            k = Intrinsics {
                fx: k.fx / 2.0,
                fy: k.fy / 2.0,
                cx: (k.cx - 0.5) / 2.0,
                cy: (k.cy - 0.5) / 2.0,
            };
        }
        k
    }

    /// Camera ray `K⁻¹·(u, v, 1)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// `[3, H·W]` rays for every pixel in row-major order.
    pub fn ray_grid(&self, height: usize, width: usize) -> Tensor {
        let p = height * width;
        let mut d = vec![0.0; 3 * p];
        for v in 0..height {
            for u in 0..width {
                let r = self.ray(u as f64, v as f64);
                let k = v * width + u;
                d[k] = r[0];
                d[p + k] = r[1];
                d[2 * p + k] = r[2];
            }
        }
        Tensor::new(vec![3, p], d).expect("ray grid shape")
    }

    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        if x[2] <= 0.0 {
            return None;
        }
        Some((self.fx * x[0] / x[2] + self.cx, self.fy * x[1] / x[2] + self.cy))
    }

    /// Vertical image flip: row `v` becomes `H-1-v`.
    pub fn flipped_horizontal(&self, width: usize) -> Intrinsics {
        Intrinsics {
            cx: width as f64 - 1.0 - self.cx,
            ..*self
        }
    }

    pub fn flipped_vertical(&self, height: usize) -> Intrinsics {
        Intrinsics {
            cy: height as f64 - 1.0 - self.cy,
            ..*self
        }
    }
}

/// Rigid transform `X ↦ R·X + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Serialized form of a [`Pose`]: Euler angles and translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub angles: Vec3,
    pub t: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_euler(angles: Vec3, translation: Vec3) -> Self {
        Pose {
            rotation: euler_to_matrix(&angles),
            translation,
        }
    }

    pub fn angles(&self) -> Vec3 {
        matrix_to_euler(&self.rotation)
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            angles: self.angles(),
            t: self.translation,
        }
    }

    pub fn from_record(r: &PoseRecord) -> Self {
        Self::from_euler(r.angles, r.t)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, x);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(&other.translation),
        }
    }

    /// The same motion seen in a world mirrored across `x = 0`: `S·T·S` with
    /// `S = diag(−1, 1, 1)`.
    pub fn mirrored_x(&self) -> Pose {
        let s = [-1.0, 1.0, 1.0];
        let mut rotation = self.rotation;
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= s[i] * s[j];
            }
        }
        Pose {
            rotation,
            translation: [-self.translation[0], self.translation[1], self.translation[2]],
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Pose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Largest absolute entry difference in rotation and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.rotation[i][j] - other.rotation[i][j]).abs());
            }
            m = m.max((self.translation[i] - other.translation[i]).abs());
        }
        m
    }

    /// Relative transform `T_{a→b}` between two camera-to-world poses.
    pub fn relative(cam_to_world_a: &Pose, cam_to_world_b: &Pose) -> Pose {
        cam_to_world_b.inverse().compose(cam_to_world_a)
    }
}

/// Fixed translation magnitude the depth network's output assumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalDisplacement {
    d0: f64,
    epsilon: f64,
}

impl Default for NominalDisplacement {
    fn default() -> Self {
        NominalDisplacement { d0: 1.0, epsilon: 1e-5 }
    }
}

impl NominalDisplacement {
    /// Requires `d0 > 0` and `0 < epsilon <= 1e-3·d0`.
    pub fn new(d0: f64, epsilon: f64) -> Result<Self> {
        if !(d0 > 0.0) || !(epsilon > 0.0) || epsilon > d0 * 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "nominal displacement needs d0 > 0 and 0 < epsilon <= d0*1e-3, got d0={d0} epsilon={epsilon}"
            )));
        }
        Ok(NominalDisplacement { d0, epsilon })
    }

    /// `epsilon = 1e-5·d0`.
    pub fn with_d0(d0: f64) -> Result<Self> {
        Self::new(d0, d0 * 1e-5)
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Factor `D0 / (ε + ‖t_r‖)` applied to every translation.
    pub fn scale_for(&self, reference_translation: &Vec3) -> f64 {
        self.d0 / (self.epsilon + norm(reference_translation))
    }
}

/// Result of projecting a target pixel into another frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reprojection {
    pub u: f64,
    pub v: f64,
    /// Depth of the point in the destination camera.
    pub z: f64,
    /// False when the point lands at or behind the destination camera.
    pub valid: bool,
}

/// `K·(R·(depth·K⁻¹·p) + t)`, dehomogenized.
pub fn reproject(u: f64, v: f64, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Reprojection> {
    if !(depth > 0.0) {
        return Err(Error::InvalidArgument(format!("depth must be positive, got {depth}")));
    }
    let ray = k.ray(u, v);
    let x = pose.apply(&[depth * ray[0], depth * ray[1], depth * ray[2]]);
    Ok(match k.project(&x) {
        Some((pu, pv)) => Reprojection {
            u: pu,
            v: pv,
            z: x[2],
            valid: true,
        },
        None => Reprojection {
            u: f64::NAN,
            v: f64::NAN,
            z: x[2],
            valid: false,
        },
    })
}

/// Re-express poses given relative to the last frame (`T_{last→i}`) as
/// poses relative to frame `target` (`T_{target→i}`).
pub fn compensate_to_target(poses_to_last: &[Pose], target: usize) -> Result<Vec<Pose>> {
    let n = poses_to_last.len();
    if target >= n {
        return Err(Error::IndexOutOfRange { index: target, len: n });
    }
    let target_to_last = poses_to_last[target].inverse();
    Ok(poses_to_last.iter().map(|p| p.compose(&target_to_last)).collect())
}

/// Scale every translation by `D0 / (ε + ‖t_reference‖)`; rotations unchanged.
pub fn normalize_translations(poses: &[Pose], reference: usize, nd: &NominalDisplacement) -> Result<Vec<Pose>> {
    let r = poses.get(reference).ok_or(Error::IndexOutOfRange {
        index: reference,
        len: poses.len(),
    })?;
    let s = nd.scale_for(&r.translation);
    Ok(poses
        .iter()
        .map(|p| Pose {
            rotation: p.rotation,
            translation: [p.translation[0] * s, p.translation[1] * s, p.translation[2] * s],
        })
        .collect())
}

/// Metric depth from a network depth map: `ζ · displacement / D0`.
pub fn absolute_depth(zeta: &Tensor, displacement: f64, nd: &NominalDisplacement) -> Result<Tensor> {
    if !(displacement > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "displacement must be positive, got {displacement}"
        )));
    }
    let s = displacement / nd.d0();
    Ok(zeta.map(|z| z * s))
}
