//! `motiondepth`: generate Still Box data, train, evaluate and run inference.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motiondepth::eval::{self, EvalOptions, Model, RotationSource, ScaleMode};
use motiondepth::geometry::{euler_to_matrix, Intrinsics};
use motiondepth::stillbox::{self, GeneratorConfig};
use motiondepth::tape::Tensor;
use motiondepth::trainer::{self, Supervision, TrainConfig};
use motiondepth::{gradcheck, warp, Error};

/// Image sizes must be divisible by the depth network's total stride.
const RESOLUTION_MULTIPLE: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "motiondepth", version, about = "Depth from motion with normalized translations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a Still Box dataset.
    Generate(GenerateArgs),
    /// Train DepthNet and PoseNet on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or the constant-plane baseline.
    Eval(EvalArgs),
    /// Absolute depth for one reference/target pair.
    Infer(InferArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Quick end-to-end consistency checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Square image side in pixels, a multiple of 32.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out scenes; defaults to a quarter of the scenes.
    #[arg(long)]
    val_scenes: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with TrainConfig fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use ground-truth rotations in the warps.
    #[arg(long)]
    supervise_orientation: bool,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long)]
    sequence_length: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Gt,
    P,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    ConstantPlane,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RotationArg {
    GroundTruth,
    Posenet,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training output directory holding model.json and model.mdnc.
    #[arg(long, required_unless_present = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gt")]
    scale_mode: ScaleArg,
    /// Evaluate on vertically flipped inputs and ground truth.
    #[arg(long)]
    flip: bool,
    #[arg(long, value_enum, conflicts_with = "ckpt")]
    baseline: Option<Baseline>,
    #[arg(long, value_enum, default_value = "ground-truth")]
    rotation: RotationArg,
    #[arg(long, default_value_t = eval::DEFAULT_DEPTH_CAP[0])]
    min_depth: f64,
    #[arg(long, default_value_t = eval::DEFAULT_DEPTH_CAP[1])]
    max_depth: f64,
    /// Directory for eval.json and eval.txt.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame depth maps and colormaps.
    #[arg(long)]
    visualize: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Reference frame (PPM).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Target frame (PPM).
    #[arg(long)]
    target: PathBuf,
    /// Camera displacement between the two frames.
    #[arg(long)]
    displacement: f64,
    /// Euler angles of R_{t→r} as "x,y,z" radians; PoseNet estimates it when absent.
    #[arg(long, allow_hyphen_values = true)]
    rotation: Option<String>,
    /// Earlier frames for PoseNet, oldest first (the pair is appended).
    #[arg(long, num_args = 1..)]
    context: Vec<PathBuf>,
    #[arg(long, default_value_t = 90.0)]
    hfov_deg: f64,
    /// Output depth map (PFM); an inverse-depth PPM is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spatial size of the per-op test tensors.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_PROBES)]
    probes: usize,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit 1: the request was malformed. Exit 2: it failed while running.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Json { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn generate(a: &GenerateArgs) -> CliResult {
    if a.resolution == 0 || a.resolution % RESOLUTION_MULTIPLE != 0 {
        return Err(usage(format!(
            "resolution must be a positive multiple of {RESOLUTION_MULTIPLE}, got {}",
            a.resolution
        )));
    }
    if a.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    let cfg = GeneratorConfig {
        width: a.resolution,
        height: a.resolution,
        frames_per_scene: a.frames,
        ..Default::default()
    };
    cfg.validate()?;
    let val = a.val_scenes.unwrap_or_else(|| stillbox::default_val_count(a.scenes));
    if val >= a.scenes && a.scenes > 1 {
        return Err(usage(format!("--val-scenes {val} leaves no training scenes")));
    }
    let scenes = stillbox::generate_scenes(&cfg, a.scenes, a.seed)?;
    let index = stillbox::write_dataset(&a.out, &scenes, val)?;
    println!(
        "wrote {} scenes ({} train, {} val) to {}",
        index.scenes.len(),
        index.train.len(),
        index.val.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    require_dir(&a.data, "--data")?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if a.supervise_orientation {
        cfg.supervision = Supervision::Orientation;
    }
    macro_rules! set {
        ($($field:ident),+) => {$(if let Some(v) = a.$field { cfg.$field = v; })+};
    }
    set!(iterations, seed, lr, batch_size, lambda, d0, sequence_length);
    cfg.validate()?;
    let dataset = stillbox::load_dataset(&a.data)?;
    let outcome = trainer::train(&dataset, &cfg, Some(&a.out), a.resume)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} iterations: L_p {:.5} L_g {:.5} total {:.5}",
            last.iteration + 1,
            last.lp,
            last.lg,
            last.total
        );
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn evaluate(a: &EvalArgs) -> CliResult {
    require_dir(&a.data, "--data")?;
    if !(a.min_depth > 0.0 && a.max_depth > a.min_depth) {
        return Err(usage("depth cap needs 0 < --min-depth < --max-depth"));
    }
    let dataset = stillbox::load_dataset(&a.data)?;
    let pairs = eval::test_pairs(&dataset)?;
    let mode = match a.scale_mode {
        ScaleArg::Gt => ScaleMode::Gt,
        ScaleArg::P => ScaleMode::P,
    };
    let opts = EvalOptions {
        flip_vertical: a.flip,
        cap: [a.min_depth, a.max_depth],
        rotation: match a.rotation {
            RotationArg::GroundTruth => RotationSource::GroundTruth,
            RotationArg::Posenet => RotationSource::PoseNet,
        },
        visualize: a.visualize.then(|| a.out.join("depth")),
    };
    let report = match (&a.baseline, &a.ckpt) {
        (Some(Baseline::ConstantPlane), _) => eval::constant_plane_baseline(&pairs, mode, &opts)?,
        (None, Some(dir)) => {
            require_dir(dir, "--ckpt")?;
            eval::evaluate(&Model::load(dir)?, &pairs, mode, &opts)?
        }
        (None, None) => return Err(usage("either --ckpt or --baseline is required")),
    };
    report.write(&a.out)?;
    print!("{}", report.table());
    Ok(())
}

fn parse_angles(s: &str) -> Result<[f64; 3], Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || usage(format!("--rotation expects three comma-separated numbers, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn infer(a: &InferArgs) -> CliResult {
    if !(a.displacement.is_finite() && a.displacement > 0.0) {
        return Err(usage("--displacement must be positive"));
    }
    if !(a.hfov_deg > 0.0 && a.hfov_deg < 180.0) {
        return Err(usage("--hfov-deg must lie in (0, 180)"));
    }
    let rotation = a.rotation.as_deref().map(parse_angles).transpose()?.map(|e| euler_to_matrix(&e));
    require_dir(&a.ckpt, "--ckpt")?;
    let model = Model::load(&a.ckpt)?;
    let reference = stillbox::read_ppm(&a.reference)?;
    let target = stillbox::read_ppm(&a.target)?;
    if reference.shape() != target.shape() {
        return Err(usage(format!(
            "reference {:?} and target {:?} differ in size",
            reference.shape(),
            target.shape()
        )));
    }
    let (h, w) = (target.shape()[1], target.shape()[2]);
    let k = Intrinsics::from_fov(w, h, a.hfov_deg.to_radians())?;
    let mut context: Vec<Tensor> = a.context.iter().map(|p| stillbox::read_ppm(p)).collect::<Result<_, _>>()?;
    context.push(reference.clone());
    context.push(target.clone());
    let depth = eval::infer_pair(&model, &reference, &target, rotation.as_ref(), Some(&context), a.displacement, &k)?;
    stillbox::write_pfm(&a.out, &depth)?;
    let preview = a.out.with_extension("ppm");
    stillbox::write_ppm(&preview, &eval::inverse_depth_colormap(&depth))?;
    println!(
        "depth {}x{} (median {:.4}) written to {} and {}",
        w,
        h,
        median(depth.data()),
        a.out.display(),
        preview.display()
    );
    Ok(())
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    s.get(s.len() / 2).copied().unwrap_or(f64::NAN)
}

fn run_gradcheck(a: &GradcheckArgs) -> CliResult {
    if a.size < 4 || a.size % 2 != 0 {
        return Err(usage(format!("--size must be even and at least 4, got {}", a.size)));
    }
    if a.probes == 0 {
        return Err(usage("--probes must be positive"));
    }
    let report = gradcheck::run_suite(a.seed, a.size, a.probes)?;
    print!("{}", report.table());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks passed", report.ops.len());
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|o| o.name.as_str()).collect();
        Err(Failure::Runtime(Error::InvalidArgument(format!(
            "gradient check failed for: {}",
            names.join(", ")
        ))))
    }
}

fn selftest(a: &SelftestArgs) -> CliResult {
    let mut ok = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    let report = gradcheck::run_suite(a.seed, 8, gradcheck::DEFAULT_PROBES)?;
    let worst = report.ops.iter().map(|o| o.max_rel_err / o.tolerance).fold(0.0, f64::max);
    line(
        "gradients",
        report.passed(),
        format!("{} ops, worst error {:.1e} of tolerance", report.ops.len(), worst),
    );

    let cfg = GeneratorConfig {
        frames_per_scene: 6,
        ..Default::default()
    };
    let mut worst_warp: f64 = 0.0;
    for (_, frames) in stillbox::generate_scenes(&cfg, 2, a.seed)? {
        for pair in frames.windows(2) {
            let k = &cfg;
            let intr = Intrinsics::from_fov(k.width, k.height, k.hfov_deg.to_radians())?;
            let pose = motiondepth::geometry::Pose::relative(&pair[1].pose, &pair[0].pose);
            let (img, mask) = warp::inverse_warp_image(&pair[0].rgb, &pair[1].depth, &pose, &intr)?;
            if let Some(e) = warp::masked_l1(&img, &pair[1].rgb, &mask) {
                worst_warp = worst_warp.max(e);
            }
        }
    }
    line(
        "rigid consistency",
        worst_warp < 0.05,
        format!("worst ground-truth warp error {worst_warp:.4}"),
    );

    let pred = Tensor::from_vec(vec![1.0, 2.0]);
    let gt = Tensor::from_vec(vec![2.0, 2.0]);
    let m = eval::eigen_metrics(&pred, &gt, &Tensor::ones(&[2]), eval::DEFAULT_DEPTH_CAP)?;
    line(
        "depth metrics",
        m.abs_rel == 0.25 && m.delta1 == 0.5,
        format!("abs_rel {} delta1 {}", m.abs_rel, m.delta1),
    );

    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::InvalidArgument("self-test failed".into())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
