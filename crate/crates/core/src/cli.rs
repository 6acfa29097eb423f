//! Command-line front end.
//!
//! Every report is printed as `key=value` lines on standard output. Exit
//! codes: 0 on success, 1 for invalid input, 2 for failures while running.
//! Failures print a single `error: ...` line on standard error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::gradcheck::{run_all, GradcheckConfig};
use crate::imaging::{
    load_camera_config, load_depth, load_image, load_stack_manifest, save_depth, save_image, save_image_16, save_stack,
    CocMap, CocState, Image,
};
use crate::losses::LossWeights;
use crate::metrics::{depth_metrics, image_metrics, DepthMetrics};
use crate::psf::{backward, backward_reference, render_focused, render_focused_reference, PsfWorkspace};
use crate::solver::{focal_sequence, render_stack, solve_depth, texture_mask, Init, Optimizer, SolverConfig};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "DEFOCUS_THREADS";

/// Largest absolute difference tolerated between the optimised and
/// reference paths in `bench`.
pub const BENCH_TOLERANCE: f64 = 1e-12;

#[derive(Parser, Debug)]
#[command(name = "defocus", version, about = "Thin-lens defocus rendering and depth from defocus")]
pub struct Cli {
    /// Worker threads (default: all cores). DEFOCUS_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render one focused image from an all-in-focus image and a depth map.
    Render {
        #[arg(long)]
        image: PathBuf,
        /// Depth map (.dpt).
        #[arg(long)]
        depth: PathBuf,
        /// File with a `camera { ... }` block.
        #[arg(long)]
        camera_config: PathBuf,
        #[arg(long)]
        focus_m: f64,
        #[arg(long)]
        out: PathBuf,
        /// Bits per sample for PNG output.
        #[arg(long, default_value_t = 16, value_parser = PossibleValuesParser::new(["8", "16"]).try_map(|s| s.parse::<u8>()))]
        bits: u8,
    },
    /// Render a focal stack over the standard focus sequence.
    RenderStack {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        camera_config: PathBuf,
        #[arg(long)]
        n_slices: usize,
        #[arg(long)]
        max_depth_m: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Recover depth from a focal stack manifest.
    Solve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
        #[arg(long, value_enum, default_value_t = InitArg::Grid)]
        init: InitArg,
        #[arg(long, default_value_t = 64)]
        grid_levels: usize,
        /// Lower depth bound (default: 0.1 × the stack's max depth).
        #[arg(long)]
        d_min: Option<f64>,
        /// Upper depth bound (default: the stack's max depth).
        #[arg(long)]
        d_max: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda_rec: Option<f64>,
        #[arg(long)]
        lambda_smooth: Option<f64>,
        #[arg(long)]
        lambda_sharp: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_depth: PathBuf,
        /// Loss history CSV.
        #[arg(long)]
        out_history: Option<PathBuf>,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest instance side length (8..=64).
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        /// Flip the sign of xi in the analytic backward pass (negative control).
        #[cfg(feature = "negative-controls")]
        #[arg(long)]
        corrupt: bool,
    },
    /// Depth metrics between a prediction and ground truth.
    Eval {
        #[arg(long)]
        pred_depth: PathBuf,
        #[arg(long)]
        gt_depth: PathBuf,
        /// Evaluate only ground truth up to this depth, clamping predictions.
        #[arg(long)]
        cap: Option<f64>,
    },
    /// PSNR and SSIM between two images.
    EvalImg {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Time the optimised render and backward pass against the reference.
    Bench {
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        kernel: usize,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the sign of xi in the analytic backward pass (negative control).
        #[cfg(feature = "negative-controls")]
        #[arg(long)]
        corrupt: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Descent,
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Mid,
    Grid,
}

/// Why a command failed, which decides its exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

type Outcome = std::result::Result<String, Failure>;

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Reading inputs: everything that goes wrong is the caller's input.
fn input<T>(r: crate::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(invalid)
}

/// Writing outputs or computing: failures are runtime failures.
fn output<T>(r: crate::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(runtime)
}

/// Parses arguments, runs the command, prints its report, and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            let detail: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("error: {}", detail.join(" ").trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(cli) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message().replace('\n', " "));
            f.exit_code()
        }
    }
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => match flag {
            Some(0) => Err(invalid("--threads must be positive")),
            other => Ok(other),
        },
    }
}

pub fn execute(cli: Cli) -> Outcome {
    let threads = thread_count(cli.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(runtime)?;
    pool.install(|| dispatch(cli.command))
}

impl Command {
    fn corrupt(&self) -> bool {
        match self {
            #[cfg(feature = "negative-controls")]
            Command::Gradcheck { corrupt, .. } | Command::Bench { corrupt, .. } => *corrupt,
            _ => false,
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    let corrupt = command.corrupt();
    match command {
        Command::Render {
            image,
            depth,
            camera_config,
            focus_m,
            out,
            bits,
        } => cmd_render(&image, &depth, &camera_config, focus_m, &out, bits),
        Command::RenderStack {
            image,
            depth,
            camera_config,
            n_slices,
            max_depth_m,
            out_dir,
        } => cmd_render_stack(&image, &depth, &camera_config, n_slices, max_depth_m, &out_dir),
        Command::Solve {
            manifest,
            iterations,
            step_size,
            optimizer,
            init,
            grid_levels,
            d_min,
            d_max,
            alpha,
            lambda_rec,
            lambda_smooth,
            lambda_sharp,
            seed,
            out_depth,
            out_history,
        } => {
            let args = SolveArgs {
                iterations,
                step_size,
                optimizer,
                init,
                grid_levels,
                d_min,
                d_max,
                alpha,
                lambda_rec,
                lambda_smooth,
                lambda_sharp,
                seed,
            };
            cmd_solve(&manifest, &args, &out_depth, out_history.as_deref())
        }
        Command::Gradcheck {
            seed,
            size,
            instances,
            ..
        } => cmd_gradcheck(seed, size, instances, corrupt),
        Command::Eval {
            pred_depth,
            gt_depth,
            cap,
        } => cmd_eval(&pred_depth, &gt_depth, cap),
        Command::EvalImg { a, b } => cmd_eval_img(&a, &b),
        Command::Bench {
            size,
            kernel,
            repeat,
            seed,
            ..
        } => cmd_bench(size, kernel, repeat, seed, corrupt),
    }
}

fn coc_report(coc: &CocMap<f64>) -> String {
    let v = coc.values();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    format!(
        "coc_min_px={min}\ncoc_mean_px={mean}\ncoc_max_px={max}\ndelta_pct={}\nclamped_pct={}\n",
        100.0 * coc.fraction(CocState::Delta),
        100.0 * coc.fraction(CocState::Clamped)
    )
}

fn save_rendered(img: &Image<f64>, path: &Path, bits: u8) -> crate::Result<()> {
    let png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if png && bits == 16 {
        save_image_16(img, path)
    } else {
        save_image(img, path)
    }
}

fn cmd_render(image: &Path, depth: &Path, camera: &Path, focus_m: f64, out: &Path, bits: u8) -> Outcome {
    let img = input(load_image::<f64>(image))?;
    let depth = input(load_depth::<f64>(depth))?;
    let cam = input(load_camera_config::<f64>(camera, Some(focus_m)))?;
    input(img.ensure_plane(depth.height(), depth.width(), "image vs depth"))?;
    let coc = cam.coc_map(&depth);
    let mut ws = PsfWorkspace::for_camera(&cam);
    let rendered = output(render_focused(&img, &coc, &mut ws))?;
    output(save_rendered(&rendered, out, bits))?;
    let mut report = format!(
        "height={}\nwidth={}\nchannels={}\nfocus_m={focus_m}\n",
        img.height(),
        img.width(),
        img.channels()
    );
    report += &coc_report(&coc);
    writeln!(report, "out={}", out.display()).unwrap();
    Ok(report)
}

fn cmd_render_stack(image: &Path, depth: &Path, camera: &Path, n: usize, max_depth_m: f64, out_dir: &Path) -> Outcome {
    let focus = input(focal_sequence(n, max_depth_m))?;
    let img = input(load_image::<f64>(image))?;
    let depth = input(load_depth::<f64>(depth))?;
    // the file's own focus distance (if any) is irrelevant here
    let cam = input(load_camera_config::<f64>(camera, Some(focus[0])))?;
    let stack = input(render_stack(&img, &depth, &cam, &focus, max_depth_m))?;
    let manifest = output(save_stack(&stack, out_dir))?;
    let list: Vec<String> = focus.iter().map(|f| f.to_string()).collect();
    Ok(format!(
        "slices={n}\nfocus_m={}\nmanifest={}\n",
        list.join(","),
        manifest.display()
    ))
}

struct SolveArgs {
    iterations: usize,
    step_size: f64,
    optimizer: OptimizerArg,
    init: InitArg,
    grid_levels: usize,
    d_min: Option<f64>,
    d_max: Option<f64>,
    alpha: Option<f64>,
    lambda_rec: Option<f64>,
    lambda_smooth: Option<f64>,
    lambda_sharp: Option<f64>,
    seed: u64,
}

fn metrics_report(prefix: &str, m: &DepthMetrics<f64>) -> String {
    let fields = [
        ("abs_rel", m.abs_rel),
        ("sq_rel", m.sq_rel),
        ("rmse", m.rmse),
        ("rmse_log", m.rmse_log),
        ("log10", m.log10),
        ("delta1", m.delta1),
        ("delta2", m.delta2),
        ("delta3", m.delta3),
    ];
    fields.iter().map(|(k, v)| format!("{prefix}{k}={v}\n")).collect()
}

fn cmd_solve(manifest: &Path, args: &SolveArgs, out_depth: &Path, out_history: Option<&Path>) -> Outcome {
    let stack = input(load_stack_manifest::<f64>(manifest))?;
    let mut cfg = SolverConfig::for_stack(&stack);
    cfg.iterations = args.iterations;
    cfg.step_size = args.step_size;
    cfg.optimizer = match args.optimizer {
        OptimizerArg::Descent => Optimizer::Descent,
        OptimizerArg::Momentum => Optimizer::Momentum,
        OptimizerArg::Adam => Optimizer::Adam,
    };
    cfg.init = match args.init {
        InitArg::Mid => Init::MidDepth,
        InitArg::Grid => Init::GridSearch {
            levels: args.grid_levels,
        },
    };
    cfg.depth_bounds = (
        args.d_min.unwrap_or(cfg.depth_bounds.0),
        args.d_max.unwrap_or(cfg.depth_bounds.1),
    );
    let defaults = LossWeights::default();
    cfg.weights = LossWeights {
        alpha: args.alpha.unwrap_or(defaults.alpha),
        lambda_rec: args.lambda_rec.unwrap_or(defaults.lambda_rec),
        lambda_smooth: args.lambda_smooth.unwrap_or(defaults.lambda_smooth),
        lambda_sharp: args.lambda_sharp.unwrap_or(defaults.lambda_sharp),
    };
    cfg.seed = args.seed;
    input(cfg.validate())?;

    let result = solve_depth(&stack, &cfg).map_err(|e| match e {
        Error::Diverged {
            iteration,
            message,
            last_loss,
            ..
        } => runtime(format!(
            "diverged at iteration {iteration}: {message}; last finite loss={}",
            last_loss.map_or("none".to_string(), |l| l.to_string())
        )),
        other => runtime(other),
    })?;
    output(save_depth(&result.depth, out_depth))?;
    if let Some(path) = out_history {
        let mut csv = String::from("iter,total,rec,smooth,sharp\n");
        for (i, r) in result.loss_history.iter().enumerate() {
            writeln!(csv, "{i},{},{},{},{}", r.total, r.rec, r.smooth, r.sharp).unwrap();
        }
        fs::write(path, csv).map_err(|e| runtime(Error::io(path, e)))?;
    }

    let last = result.loss_history.last().copied().unwrap_or_default();
    let mut report = format!(
        "slices={}\niterations={}\nconverged={}\nfinal_total={}\nfinal_rec={}\nfinal_smooth={}\nfinal_sharp={}\nout_depth={}\n",
        stack.len(),
        result.loss_history.len(),
        result.converged,
        last.total,
        last.rec,
        last.smooth,
        last.sharp,
        out_depth.display()
    );
    if let Some(gt) = stack.ground_truth_depth() {
        let all = output(depth_metrics(&result.depth, gt, None, None))?;
        report += &metrics_report("", &all);
        let mask = texture_mask(stack.all_in_focus());
        if let Ok(textured) = depth_metrics(&result.depth, gt, Some(&mask), None) {
            report += &metrics_report("textured_", &textured);
        }
    }
    Ok(report)
}

fn cmd_gradcheck(seed: u64, size: usize, instances: usize, corrupt: bool) -> Outcome {
    if !(8..=64).contains(&size) {
        return Err(invalid(format!("--size must be in 8..=64, got {size}")));
    }
    if instances == 0 {
        return Err(invalid("--instances must be at least 1"));
    }
    let cfg = GradcheckConfig {
        seed,
        max_size: size,
        instances,
        corrupt_xi: corrupt,
    };
    let results = output(run_all(&cfg))?;
    let mut report = String::new();
    for r in &results {
        writeln!(
            report,
            "suite={} max_rel_err={:e} threshold={:e} instances={} status={}",
            r.name,
            r.max_rel_error,
            r.threshold,
            r.instances,
            if r.passed() { "pass" } else { "fail" }
        )
        .unwrap();
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        report += "result=pass\n";
        Ok(report)
    } else {
        print!("{report}result=fail\n");
        Err(runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_eval(pred: &Path, gt: &Path, cap: Option<f64>) -> Outcome {
    let pred = input(load_depth::<f64>(pred))?;
    let gt = input(load_depth::<f64>(gt))?;
    if let Some(c) = cap {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("--cap must be positive, got {c}")));
        }
    }
    let m = input(depth_metrics(&pred, &gt, None, cap))?;
    Ok(metrics_report("", &m))
}

fn cmd_eval_img(a: &Path, b: &Path) -> Outcome {
    let a = input(load_image::<f64>(a))?;
    let b = input(load_image::<f64>(b))?;
    let m = input(image_metrics(&a, &b))?;
    Ok(format!("psnr={}\nssim={}\n", m.psnr, m.ssim))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms<R>(repeat: usize, mut f: impl FnMut() -> crate::Result<R>) -> std::result::Result<f64, Failure> {
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        output(f())?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cmd_bench(size: usize, kernel: usize, repeat: usize, seed: u64, corrupt: bool) -> Outcome {
    if size < 64 {
        return Err(invalid(format!("--size must be at least 64, got {size}")));
    }
    if repeat == 0 {
        return Err(invalid("--repeat must be at least 1"));
    }
    let mut ws = input(PsfWorkspace::<f64>::new(kernel))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Image::from_fn(size, size, 3, |_, _, _| rng.gen::<f64>()).map_err(runtime)?;
    let max_c = (kernel - 1) as f64;
    let coc = CocMap::from_values(size, size, (0..size * size).map(|_| rng.gen_range(0.5..max_c)).collect())
        .map_err(runtime)?;
    let upstream = Image::from_fn(size, size, 3, |_, _, _| rng.gen_range(-1.0..1.0)).map_err(runtime)?;

    let fast = output(render_focused(&img, &coc, &mut ws))?;
    let reference = output(render_focused_reference(&img, &coc, &ws))?;
    ws.corrupt_xi_sign(corrupt);
    let g_fast = output(backward(&upstream, &img, &coc, &fast, &mut ws))?;
    ws.corrupt_xi_sign(false);
    let g_ref = output(backward_reference(&upstream, &img, &coc, &reference, &ws))?;
    let render_diff = max_abs_diff(fast.data(), reference.data());
    let backward_diff = max_abs_diff(g_fast.d_image.data(), g_ref.d_image.data())
        .max(max_abs_diff(g_fast.d_coc.data(), g_ref.d_coc.data()));
    let mut report = format!(
        "size={size}\nkernel={kernel}\nrepeat={repeat}\nthreads={}\nrender_max_abs_diff={render_diff:e}\nbackward_max_abs_diff={backward_diff:e}\n",
        rayon::current_num_threads()
    );
    if !(render_diff <= BENCH_TOLERANCE && backward_diff <= BENCH_TOLERANCE) {
        print!("{report}");
        return Err(runtime(format!(
            "optimised and reference paths disagree (render {render_diff:e}, backward {backward_diff:e}, tolerance {BENCH_TOLERANCE:e})"
        )));
    }

    let render_ms = time_ms(repeat, || render_focused(&img, &coc, &mut ws))?;
    let render_ref_ms = time_ms(repeat, || render_focused_reference(&img, &coc, &ws))?;
    let backward_ms = time_ms(repeat, || backward(&upstream, &img, &coc, &fast, &mut ws))?;
    let backward_ref_ms = time_ms(repeat, || backward_reference(&upstream, &img, &coc, &fast, &ws))?;
    write!(
        report,
        "render_ms={render_ms}\nrender_reference_ms={render_ref_ms}\nrender_speedup={}\nbackward_ms={backward_ms}\nbackward_reference_ms={backward_ref_ms}\nbackward_speedup={}\n",
        render_ref_ms / render_ms,
        backward_ref_ms / backward_ms
    )
    .unwrap();
    Ok(report)
}
