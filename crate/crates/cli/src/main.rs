use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use posefuse::complete::{balanced_schedule, finetune_splats, to_views, TrainConfig};
use posefuse::fusion::{global_register, FusionParams};
use posefuse::geometry::PoseSet;
use posefuse::io::{self, RegistrationJson, SelectionJson};
use posefuse::metrics::{holdout_split, psnr, registration_error, ssim, DEFAULT_TRAIN_RATIO};
use posefuse::pipeline::{run_pipeline, PipelineConfig};
use posefuse::refine::{local_refine, RefineConfig};
use posefuse::render::render_rgb;
use posefuse::selection::{select_mixed_set, SelectionParams};
use posefuse::synth::{make_dataset, SynthConfig};
use posefuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "posefuse",
    version,
    about = "Register camera sets of an object captured in several poses"
)]
struct Cli {
    /// Seed for every stochastic stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Stages run sequentially, so only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-pose dataset.
    Gen(GenArgs),
    /// Choose the mixed-pose image set.
    Select(SelectArgs),
    /// Two-stage global registration of an auxiliary camera set.
    Register(RegisterArgs),
    /// Silhouette then photometric refinement of a registration.
    Refine(RefineArgs),
    /// Fine-tune the splat model on main and registered auxiliary views.
    Complete(CompleteArgs),
    /// Registration error and held-out image quality.
    Eval(EvalArgs),
    /// Run every stage on a dataset and write a report.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    main_desc: PathBuf,
    #[arg(long)]
    aux_desc: PathBuf,
    #[arg(long)]
    main_cams: PathBuf,
    #[arg(long)]
    aux_cams: PathBuf,
    #[arg(long)]
    oracle: PathBuf,
    #[arg(long, default_value_t = 15)]
    m: usize,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 60.0)]
    phi: f64,
    #[arg(long, default_value_t = 45.0)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    aux: PathBuf,
    #[arg(long)]
    mixed: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Auxiliary masks.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = 128)]
    consensus_res: u32,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    registration: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// Auxiliary cameras in their own frame; recovered from the
    /// registration when absent.
    #[arg(long)]
    aux: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Views per objective evaluation; all views when absent.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory holding the main and auxiliary placements.
    #[arg(long)]
    views: PathBuf,
    #[arg(long)]
    registration: PathBuf,
    /// Auxiliary placement index in the dataset.
    #[arg(long, default_value_t = 1)]
    pose: usize,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    train_ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated cameras.
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth cameras with the same ids.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Model to render at the estimated cameras.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference images for the rendered views.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    skip_refine: bool,
    #[arg(long)]
    random_mixed: bool,
    #[arg(long)]
    skip_complete: bool,
    /// Mixed-set size used for both M and N.
    #[arg(long)]
    mixed_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Omit wall times so identical runs give identical reports.
    #[arg(long)]
    no_timings: bool,
}

fn read_config(path: &Option<PathBuf>) -> Result<Option<String>> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map(Some)
            .map_err(|source| Error::Io {
                path: p.clone(),
                source,
            }),
        None => Ok(None),
    }
}

fn gen(cli: &Cli, args: &GenArgs) -> Result<()> {
    let mut cfg = match read_config(&cli.config)? {
        Some(text) => SynthConfig::from_toml(&text)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ds = make_dataset(&cfg)?;
    io::write_dataset(&args.out, &ds)?;
    info!(
        "wrote {} placements to {}",
        ds.poses.len(),
        args.out.display()
    );
    Ok(())
}

fn select(args: &SelectArgs) -> Result<()> {
    let params = SelectionParams {
        m: args.m,
        n: args.n,
        k: args.k,
        phi_deg: args.phi,
        delta_deg: args.delta,
    };
    let s = select_mixed_set(
        &io::read_descriptors(&args.main_desc)?,
        &io::read_descriptors(&args.aux_desc)?,
        &io::read_poses(&args.main_cams)?,
        &io::read_poses(&args.aux_cams)?,
        &io::read_oracle(&args.oracle)?,
        &params,
    )?;
    println!(
        "seed pair {} / {}, mean cross similarity {:.6}",
        s.seed_pair.main_id, s.seed_pair.aux_id, s.score
    );
    io::write_json(&args.out, &SelectionJson::from(&s))
}

fn register(args: &RegisterArgs) -> Result<()> {
    let params = FusionParams {
        consensus_res: (args.consensus_res, args.consensus_res),
        max_pairs: args.max_pairs,
        ..Default::default()
    };
    let out = global_register(
        &io::read_poses(&args.main)?,
        &io::read_poses(&args.aux)?,
        &io::read_poses(&args.mixed)?,
        &io::read_splats(&args.model)?,
        &io::read_mask_dir(&args.masks)?,
        &params,
    )?;
    println!(
        "stage 1 IoU {:.6}, stage 2 IoU {:.6}",
        out.stage1.score, out.stage2.score
    );
    io::write_json(&args.out, &RegistrationJson::from_output(&out))
}

fn refine(args: &RefineArgs) -> Result<()> {
    let reg: RegistrationJson = io::read_json(&args.registration)?;
    let init = reg.transform.to_sim3(&args.registration)?;
    let aux = match &args.aux {
        Some(p) => io::read_poses(p)?,
        None => reg
            .aligned_aux
            .to_pose_set(&args.registration)?
            .transformed(&init.inverse()),
    };
    let mut cfg = RefineConfig::default();
    if let Some(n) = args.max_iters {
        cfg.max_iters = n;
    }
    cfg.batch = args.batch;
    let out = local_refine(
        &aux,
        &io::read_splats(&args.model)?,
        &io::read_image_dir(&args.images)?,
        &io::read_mask_dir(&args.masks)?,
        &init,
        &cfg,
        &cfg,
    )?;
    println!(
        "silhouette loss {:.6e} -> {:.6e}, photometric loss {:.6e} -> {:.6e}",
        out.silhouette.initial_loss,
        out.silhouette.final_loss,
        out.photometric.initial_loss,
        out.photometric.final_loss
    );
    if let Some(path) = &args.trace {
        let mut text = io::TRACE_HEADER.to_owned();
        text.push_str(&io::trace_csv("silhouette", &out.silhouette.trace));
        text.push_str(&io::trace_csv("photometric", &out.photometric.trace));
        io::write_text(path, &text)?;
    }
    io::write_json(
        &args.out,
        &RegistrationJson::from_transform(&out.transform, &aux),
    )
}

fn trainable(set: &PoseSet, ratio: f64, seed: u64) -> Result<Vec<String>> {
    Ok(holdout_split(set, ratio, seed)?.0)
}

fn complete(cli: &Cli, args: &CompleteArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(text) = read_config(&cli.config)? {
        cfg = toml::from_str(&text).map_err(|e| Error::Format {
            path: cli.config.clone().unwrap_or_default(),
            reason: e.to_string(),
        })?;
    }
    cfg.iterations = args.iters;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let main = io::read_pose_data(&args.views, 0)?;
    let aux = io::read_pose_data(&args.views, args.pose)?;
    let transform = io::read_registration_transform(&args.registration)?;
    let registered = aux.cameras.transformed(&transform);
    let mut views = to_views(&main.cameras, &main.images, &main.masks)?;
    views.extend(to_views(&registered, &aux.images, &aux.masks)?);
    let schedule = balanced_schedule(
        &trainable(&main.cameras, args.train_ratio, cfg.seed)?,
        &trainable(&registered, args.train_ratio, cfg.seed)?,
        cfg.iterations,
        cfg.seed,
    )?;
    let model = io::read_splats(&args.model)?;
    let out = finetune_splats(&model, &views, &schedule, &cfg)?;
    if let Some(it) = out.stopped_at {
        log::warn!("non-finite loss at iteration {it}; keeping the last finite model");
    }
    if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
        println!(
            "{} iterations, loss {first:.6e} -> {last:.6e}",
            out.losses.len()
        );
    }
    io::write_splats(&args.out, &out.cloud)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let est = io::read_poses(&args.estimate)?;
    if let Some(truth) = &args.truth {
        let e = registration_error(&est, &io::read_poses(truth)?)?;
        println!(
            "dtheta_x {:.6} dtheta_y {:.6} dtheta_z {:.6} deg, dp {:.6}",
            e.dtheta_x, e.dtheta_y, e.dtheta_z, e.dp
        );
    }
    if let (Some(model), Some(images)) = (&args.model, &args.images) {
        let model = io::read_splats(model)?;
        let images = io::read_image_dir(images)?;
        let (mut sp, mut ss, mut n) = (0.0, 0.0, 0);
        for cam in &est {
            let Some(reference) = images.get(&cam.id) else {
                continue;
            };
            let img = render_rgb(&model, cam)?.image;
            let (p, s) = (psnr(&img, reference)?, ssim(&img, reference)?);
            println!("{}: PSNR {p:.4} SSIM {s:.4}", cam.id);
            sp += p;
            ss += s;
            n += 1;
        }
        if n == 0 {
            return Err(Error::MissingImage(
                "no estimated camera has a reference image".into(),
            ));
        }
        println!(
            "mean over {n} views: PSNR {:.4} SSIM {:.4}",
            sp / n as f64,
            ss / n as f64
        );
    }
    Ok(())
}

fn pipeline(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.skip_refine |= args.skip_refine;
    cfg.random_mixed |= args.random_mixed;
    cfg.complete &= !args.skip_complete;
    cfg.record_timings &= !args.no_timings;
    if let Some(size) = args.mixed_size {
        cfg.selection.m = size;
        cfg.selection.n = size;
    }
    if let Some(iters) = args.iters {
        cfg.train.iterations = iters;
    }
    let run = run_pipeline(&args.dataset, &args.out, &cfg)?;
    print!(
        "{}",
        std::fs::read_to_string(args.out.join("report.txt")).unwrap_or_default()
    );
    info!("{} placements registered", run.poses.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads != 1 {
        return Err(Error::InvalidArgument(format!(
            "--threads {} requested; stages run on a single thread",
            cli.threads
        )));
    }
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Select(a) => select(a),
        Command::Register(a) => register(a),
        Command::Refine(a) => refine(a),
        Command::Complete(a) => complete(cli, a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_precondition() { 2 } else { 3 })
        }
    }
}
