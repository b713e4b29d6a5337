//! Synthetic rigid scenes: random textured primitives filmed by a camera
//! moving at constant velocity, with exact depth and poses.
//!
//! The world frame uses the camera axis convention (y down), so a ground
//! plane below the camera sits at positive `y`. Frame poses are
//! camera-to-world.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, mat_mul, mat_vec, norm, Intrinsics, Pose, PoseRecord, Vec3};
use crate::tape::Tensor;

pub use io::{
    default_val_count, load_dataset, load_sequence, read_pfm, read_ppm, scene_dir_name, write_dataset, write_pfm,
    write_ppm, Dataset, DatasetIndex, SceneMetadata, Sequence, SKY_SENTINEL,
};

/// Rejection-sampling budget for primitive and trajectory placement.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Clearance kept between the camera path and any primitive.
pub const CAMERA_CLEARANCE: f64 = 1.5;
/// Minimum camera height above the ground plane along the path.
pub const GROUND_CLEARANCE: f64 = 0.5;

const SKY_COLOR: [f64; 3] = [0.55, 0.7, 0.9];
const AMBIENT: f64 = 0.3;
const DIFFUSE: f64 = 0.7;

/// Direction towards the light (up and slightly to the left, behind).
fn light_dir() -> Vec3 {
    let l = [-0.3, -1.0, -0.5];
    let n = norm(&l);
    [l[0] / n, l[1] / n, l[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Solid 3D checkerboard with cells of side `scale`.
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
    /// Two-octave solid value noise blending `a` and `b`.
    Noise { scale: f64, a: [f64; 3], b: [f64; 3], seed: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
    /// Horizontal plane `y = height`, visible from above (smaller `y`).
    Ground { height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

/// Full description of one scene; rendering is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames_per_scene: usize,
    pub supersample: usize,
    pub intrinsics: Intrinsics,
    pub primitives: Vec<Primitive>,
    pub initial_pose: PoseRecord,
    /// World-frame camera displacement per frame.
    pub translation_velocity: Vec3,
    /// Per-frame Euler increment, applied on the camera side.
    pub rotation_velocity: Vec3,
}

/// Knobs for drawing random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    pub frames_per_scene: usize,
    pub hfov_deg: f64,
    pub supersample: usize,
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub ground_plane: bool,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Largest angle between the horizontal travel direction and the
    /// initial optical axis, degrees.
    pub max_heading_deg: f64,
    pub max_rotation_speed: f64,
    pub min_distance: f64,
    pub max_distance: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 64,
            height: 64,
            frames_per_scene: 20,
            hfov_deg: 90.0,
            supersample: 3,
            min_primitives: 6,
            max_primitives: 10,
            ground_plane: true,
            speed_min: 0.3,
            speed_max: 0.6,
            max_heading_deg: 30.0,
            max_rotation_speed: 0.01,
            min_distance: 3.0,
            max_distance: 15.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive");
        }
        if self.frames_per_scene == 0 {
            return bad("frames_per_scene must be positive");
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("hfov_deg must lie in (0, 180)");
        }
        if self.supersample == 0 {
            return bad("supersample must be positive");
        }
        if self.max_primitives < self.min_primitives || (self.max_primitives == 0 && !self.ground_plane) {
            return bad("need at least one primitive or a ground plane, with min_primitives <= max_primitives");
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range must satisfy 0 <= speed_min <= speed_max");
        }
        if !(0.0..=180.0).contains(&self.max_heading_deg) {
            return bad("max_heading_deg must lie in [0, 180]");
        }
        if !(self.max_rotation_speed >= 0.0) {
            return bad("max_rotation_speed must be non-negative");
        }
        if !(self.min_distance > CAMERA_CLEARANCE && self.max_distance > self.min_distance) {
            return bad("distance range must satisfy clearance < min_distance < max_distance");
        }
        Ok(())
    }
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// `[3, H, W]` in `[0, 1]`, quantized to multiples of 1/255.
    pub rgb: Tensor,
    /// `[H, W]` camera-frame z-depth, `+inf` where the ray hits nothing.
    pub depth: Tensor,
    /// Camera-to-world.
    pub pose: Pose,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of scene `index` in a dataset drawn with `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    splitmix(base ^ splitmix(index as u64))
}

fn lattice(seed: u32, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        (x as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
            ^ (y as u64).wrapping_mul(0x9E6C_63D0_676A_9A99)
            ^ (z as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
            ^ seed as u64,
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vec3, seed: u32) -> f64 {
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    let i = [f[0] as i64, f[1] as i64, f[2] as i64];
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let w = [s(p[0] - f[0]), s(p[1] - f[1]), s(p[2] - f[2])];
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wt = (if dx == 1 { w[0] } else { 1.0 - w[0] })
                    * (if dy == 1 { w[1] } else { 1.0 - w[1] })
                    * (if dz == 1 { w[2] } else { 1.0 - w[2] });
                acc += wt * lattice(seed, i[0] + dx, i[1] + dy, i[2] + dz);
            }
        }
    }
    acc
}

impl Texture {
    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        let (t, a, b) = match *self {
            Texture::Checker { scale, a, b } => {
                let c = (p[0] / scale).floor() + (p[1] / scale).floor() + (p[2] / scale).floor();
                (if c.rem_euclid(2.0) < 1.0 { 0.0 } else { 1.0 }, a, b)
            }
            Texture::Noise { scale, a, b, seed } => {
                let q = [p[0] / scale, p[1] / scale, p[2] / scale];
                let q2 = [2.0 * q[0] + 17.0, 2.0 * q[1] + 31.0, 2.0 * q[2] + 7.0];
                (0.65 * value_noise(q, seed) + 0.35 * value_noise(q2, seed ^ 0x5bd1), a, b)
            }
        };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
    }
}

/// Ray hit: parameter along the (unnormalized) direction and unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Shape {
    /// Nearest intersection with `t > 0` of `o + t·d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let a = dot(d, d);
                let hb = dot(&oc, d);
                let c = dot(&oc, &oc) - radius * radius;
                let disc = hb * hb - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-hb - sq) / a, (-hb + sq) / a].into_iter().find(|&t| t > 1e-9)?;
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                let n = [(p[0] - center[0]) / radius, (p[1] - center[1]) / radius, (p[2] - center[2]) / radius];
                Some(Hit { t, normal: n })
            }
            Shape::Cuboid { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let (mut ax0, mut ax1) = (0, 0);
                for ax in 0..3 {
                    if d[ax] == 0.0 {
                        if o[ax] < min[ax] || o[ax] > max[ax] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((min[ax] - o[ax]) / d[ax], (max[ax] - o[ax]) / d[ax]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        ax0 = ax;
                    }
                    if b < t1 {
                        t1 = b;
                        ax1 = ax;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, ax) = if t0 > 1e-9 {
                    (t0, ax0)
                } else if t1 > 1e-9 {
                    (t1, ax1)
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[ax] = if d[ax] > 0.0 { -1.0 } else { 1.0 };
                if t0 <= 1e-9 {
                    n[ax] = -n[ax];
                }
                Some(Hit { t, normal: n })
            }
            Shape::Ground { height } => {
                if d[1] <= 0.0 || o[1] >= height {
                    return None;
                }
                Some(Hit {
                    t: (height - o[1]) / d[1],
                    normal: [0.0, -1.0, 0.0],
                })
            }
        }
    }

    /// Distance from `p` to the solid (0 inside).
    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => {
                (norm(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]) - radius).max(0.0)
            }
            Shape::Cuboid { min, max } => {
                let mut s = 0.0;
                for ax in 0..3 {
                    let e = (min[ax] - p[ax]).max(0.0).max(p[ax] - max[ax]);
                    s += e * e;
                }
                s.sqrt()
            }
            Shape::Ground { height } => (height - p[1]).max(0.0),
        }
    }
}

fn trace<'a>(prims: &'a [Primitive], o: &Vec3, d: &Vec3) -> Option<(Hit, &'a Primitive)> {
    let mut best: Option<(Hit, &'a Primitive)> = None;
    for p in prims {
        if let Some(h) = p.shape.intersect(o, d) {
            if best.as_ref().is_none_or(|(b, _)| h.t < b.t) {
                best = Some((h, p));
            }
        }
    }
    best
}

fn shade(prims: &[Primitive], o: &Vec3, d: &Vec3) -> [f64; 3] {
    match trace(prims, o, d) {
        None => SKY_COLOR,
        Some((h, p)) => {
            let x = [o[0] + h.t * d[0], o[1] + h.t * d[1], o[2] + h.t * d[2]];
            let c = p.texture.color(&x);
            let s = AMBIENT + DIFFUSE * dot(&h.normal, &light_dir()).max(0.0);
            [c[0] * s, c[1] * s, c[2] * s]
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Serialized camera-to-world poses of every frame.
///
/// Rotations compose on the camera side, `R_{k+1} = R_k·ΔR`, and centres
/// advance by the world-frame velocity.
pub fn trajectory_records(spec: &SceneSpec) -> Vec<PoseRecord> {
    let dr = euler_to_matrix(&spec.rotation_velocity);
    let mut r = euler_to_matrix(&spec.initial_pose.angles);
    let mut c = spec.initial_pose.t;
    let mut out = Vec::with_capacity(spec.frames_per_scene);
    for _ in 0..spec.frames_per_scene {
        out.push(Pose::new(r, c).to_record());
        r = mat_mul(&r, &dr);
        for (ci, vi) in c.iter_mut().zip(&spec.translation_velocity) {
            *ci += vi;
        }
    }
    out
}

/// Camera-to-world poses rebuilt from [`trajectory_records`], so rendering
/// uses exactly the serialized poses.
pub fn trajectory(spec: &SceneSpec) -> Vec<Pose> {
    trajectory_records(spec).iter().map(Pose::from_record).collect()
}

/// Render one view from a camera-to-world pose.
pub fn render(spec: &SceneSpec, pose: &Pose) -> RenderedFrame {
    let (w, h, ss) = (spec.width, spec.height, spec.supersample);
    let k = &spec.intrinsics;
    let o = pose.translation;
    let mut rgb = vec![0.0; 3 * w * h];
    let mut depth = vec![0.0; w * h];
    let inv = 1.0 / (ss * ss) as f64;
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            let d = mat_vec(&pose.rotation, &k.ray(u as f64, v as f64));
            // camera rays have unit z, so the hit parameter is the z-depth
            depth[idx] = match trace(&spec.primitives, &o, &d) {
                Some((hit, _)) => hit.t as f32 as f64,
                None => f64::INFINITY,
            };
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let d = mat_vec(&pose.rotation, &k.ray(u as f64 + du, v as f64 + dv));
                    let c = shade(&spec.primitives, &o, &d);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                rgb[ch * w * h + idx] = quantize(acc[ch] * inv);
            }
        }
    }
    RenderedFrame {
        rgb: Tensor::new(vec![3, h, w], rgb).expect("rgb shape"),
        depth: Tensor::new(vec![h, w], depth).expect("depth shape"),
        pose: *pose,
    }
}

fn check_spec(spec: &SceneSpec) -> Result<()> {
    if spec.primitives.is_empty() {
        return Err(Error::InvalidArgument("scene has no primitives".into()));
    }
    if spec.width == 0 || spec.height == 0 || spec.frames_per_scene == 0 || spec.supersample == 0 {
        return Err(Error::InvalidArgument(format!(
            "scene needs positive resolution, frame count and supersampling, got {}x{}, {} frames, {}x",
            spec.width, spec.height, spec.frames_per_scene, spec.supersample
        )));
    }
    Ok(())
}

/// Render every frame of a scene.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<RenderedFrame>> {
    check_spec(spec)?;
    let poses = trajectory(spec);
    for (k, p) in poses.iter().enumerate() {
        if let Some(prim) = spec.primitives.iter().find(|q| q.shape.distance(&p.translation) <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "camera is inside {:?} at frame {k}",
                prim.shape
            )));
        }
    }
    Ok(poses.iter().map(|p| render(spec, p)).collect())
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let a = random_color(rng);
    let mut b = random_color(rng);
    // keep enough contrast for photometric gradients
    while (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() < 0.6 {
        b = random_color(rng);
    }
    if rng.gen_bool(0.5) {
        Texture::Checker {
            scale: rng.gen_range(0.8..2.0),
            a,
            b,
        }
    } else {
        Texture::Noise {
            scale: rng.gen_range(0.5..1.5),
            a,
            b,
            seed: rng.gen(),
        }
    }
}

fn path_clear(shape: &Shape, path: &[Vec3]) -> bool {
    path.iter().all(|c| shape.distance(c) > CAMERA_CLEARANCE)
}

/// Draw a random scene: camera motion first, then primitives placed in
/// the initial view frustum away from the camera path.
pub fn random_scene_spec(cfg: &GeneratorConfig, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::from_fov(cfg.width, cfg.height, cfg.hfov_deg.to_radians())?;
    let initial = Pose::from_euler(
        [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
        [0.0; 3],
    );
    let ground = if cfg.ground_plane {
        Some(rng.gen_range(1.0..2.0))
    } else {
        None
    };
    let rot_vel = [0, 1, 2].map(|_| {
        if cfg.max_rotation_speed > 0.0 {
            rng.gen_range(-cfg.max_rotation_speed..=cfg.max_rotation_speed)
        } else {
            0.0
        }
    });
    let steps = (cfg.frames_per_scene - 1) as f64;
    let mut velocity = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let heading = cfg.max_heading_deg.to_radians();
        let yaw = if heading > 0.0 { rng.gen_range(-heading..=heading) } else { 0.0 };
        let v = [yaw.sin(), rng.gen_range(-0.3..0.3), yaw.cos()];
        let n = norm(&v);
        let dir = [v[0] / n, v[1] / n, v[2] / n];
        let speed = if cfg.speed_max > cfg.speed_min {
            rng.gen_range(cfg.speed_min..cfg.speed_max)
        } else {
            cfg.speed_min
        };
        let v = [dir[0] * speed, dir[1] * speed, dir[2] * speed];
        let end_y = v[1] * steps;
        if ground.is_none_or(|g| end_y.max(0.0) < g - GROUND_CLEARANCE) {
            velocity = Some(v);
            break;
        }
    }
    let velocity = velocity.ok_or(Error::Placement(MAX_PLACEMENT_ATTEMPTS))?;
    let path: Vec<Vec3> = (0..cfg.frames_per_scene)
        .map(|i| [velocity[0] * i as f64, velocity[1] * i as f64, velocity[2] * i as f64])
        .collect();

    let mut primitives = Vec::new();
    if let Some(g) = ground {
        primitives.push(Primitive {
            shape: Shape::Ground { height: g },
            texture: random_texture(&mut rng),
        });
    }
    let count = rng.gen_range(cfg.min_primitives..=cfg.max_primitives);
    let tan_x = cfg.width as f64 / (2.0 * k.fx);
    let tan_y = cfg.height as f64 / (2.0 * k.fy);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let z = rng.gen_range(cfg.min_distance..cfg.max_distance);
            let x = rng.gen_range(-1.0..1.0) * tan_x * z;
            let y = rng.gen_range(-1.0..1.0) * tan_y * z;
            let c = initial.apply(&[x, y, z]);
            let size = rng.gen_range(0.4..1.5);
            let shape = if rng.gen_bool(0.5) {
                Shape::Sphere { center: c, radius: size }
            } else {
                let e = [size * rng.gen_range(0.5..1.0), size * rng.gen_range(0.5..1.0), size * rng.gen_range(0.5..1.0)];
                Shape::Cuboid {
                    min: [c[0] - e[0], c[1] - e[1], c[2] - e[2]],
                    max: [c[0] + e[0], c[1] + e[1], c[2] + e[2]],
                }
            };
            if path_clear(&shape, &path) {
                placed = Some(shape);
                break;
            }
        }
        let shape = placed.ok_or(Error::Placement(MAX_PLACEMENT_ATTEMPTS))?;
        primitives.push(Primitive {
            shape,
            texture: random_texture(&mut rng),
        });
    }
    Ok(SceneSpec {
        seed,
        width: cfg.width,
        height: cfg.height,
        frames_per_scene: cfg.frames_per_scene,
        supersample: cfg.supersample,
        intrinsics: k,
        primitives,
        initial_pose: initial.to_record(),
        translation_velocity: velocity,
        rotation_velocity: rot_vel,
    })
}

/// Draw and render `count` scenes, spreading work over available cores.
/// Output is independent of the thread count.
pub fn generate_scenes(cfg: &GeneratorConfig, count: usize, base_seed: u64) -> Result<Vec<(SceneSpec, Vec<RenderedFrame>)>> {
    let specs = (0..count)
        .map(|i| random_scene_spec(cfg, scene_seed(base_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let mut rendered: Vec<Option<Result<Vec<RenderedFrame>>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|s| {
        for (t, chunk) in rendered.chunks_mut(count.div_ceil(threads).max(1)).enumerate() {
            let specs = &specs;
            let start = t * count.div_ceil(threads).max(1);
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(generate_scene(&specs[start + j]));
                }
            });
        }
    });
    specs
        .into_iter()
        .zip(rendered)
        .map(|(s, r)| Ok((s, r.expect("every scene rendered")?)))
        .collect()
}


#[cfg(test)]
mod consistency {
    use super::*;
    use crate::warp::{inverse_warp_image, masked_l1};

    /// Mean masked photometric error of synthesizing frame `i` from frame `j`
    /// with ground-truth depth and relative pose.
    fn gt_warp_error(frames: &[RenderedFrame], k: &Intrinsics, i: usize, j: usize) -> f64 {
        let depth = frames[i].depth.map(|d| d.min(SKY_SENTINEL));
        let pose = Pose::relative(&frames[i].pose, &frames[j].pose);
        let (img, mask) = inverse_warp_image(&frames[j].rgb, &depth, &pose, k).unwrap();
        masked_l1(&img, &frames[i].rgb, &mask).unwrap()
    }

    #[test]
    fn ground_truth_warp_is_photometrically_consistent() {
        let cfg = GeneratorConfig::default();
        for (spec, frames) in generate_scenes(&cfg, 3, 99).unwrap() {
            for k in 1..frames.len() {
                for (i, j) in [(k, k - 1), (k - 1, k)] {
                    let e = gt_warp_error(&frames, &spec.intrinsics, i, j);
                    assert!(e < 0.05, "scene {} pair ({i},{j}): {e}", spec.seed);
                }
            }
        }
    }
}
