use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ktraj::datakit::{build_dataset, save_raw_f32};
use ktraj::geometry::{check_limits, export_waveforms, kinematics, Trajectory};
use ktraj::nufft::{peak_side_lobe, psf};
use ktraj::par::Exec;
use ktraj::plot::{heatmap_svg, history_svg, trajectory_svg, write_svg};
use ktraj::trainer::{
    compare_learned_fixed, evaluate, read_history, train_joint, TrainConfig, CONFIG_FILE,
    HISTORY_FILE, LEARNED_TRAJECTORY_FILE,
};
use ktraj::{gradcheck, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "ktraj",
    version,
    about = "Learn physics-constrained k-space trajectories"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON config merged over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override; repeatable, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Run batch loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an initial trajectory and its control points.
    InitTraj {
        #[arg(long, value_parser = ["cartesian", "radial", "spiral"])]
        kind: String,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        samples_per_shot: Option<usize>,
    },
    /// Train the joint model described by the config.
    Train {
        /// Train the fixed-trajectory baseline instead.
        #[arg(long, conflicts_with = "compare")]
        baseline: bool,
        /// Train learned and baseline, then evaluate both on the test split.
        #[arg(long)]
        compare: bool,
    },
    /// Compare two trained runs on the test split.
    Eval {
        #[arg(long)]
        learned: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
    },
    /// Point-spread functions of the initial and (optionally) learned trajectory.
    Psf {
        /// Trajectory file, or a training run directory holding one.
        #[arg(long)]
        learned: Option<PathBuf>,
    },
    /// Gradient and slew waveforms of a trajectory as CSV.
    ExportGradients {
        /// Trajectory file; defaults to the configured initializer.
        #[arg(long)]
        traj: Option<PathBuf>,
    },
    /// Render trajectory overlays and training curves.
    Plot {
        /// Training run directory.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Extra trajectory files to overlay.
        #[arg(long)]
        traj: Vec<PathBuf>,
    },
    /// Run every finite-difference and oracle suite.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            // Bare invocation prints help on stdout but is still a usage error.
            let bare = e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand;
            return ExitCode::from(if bare { EXIT_USAGE } else { code });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

impl Global {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    fn resolve(&self, extra: &[String], fallback: Option<&Path>) -> CliResult<TrainConfig> {
        let mut overrides = extra.to_vec();
        overrides.extend(self.set.iter().cloned());
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let path = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        Ok(TrainConfig::load(path, &overrides)?)
    }

    fn out(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Runtime(Error::io(&self.out_dir, e)))?;
        Ok(&self.out_dir)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match cli.command {
        Command::InitTraj {
            kind,
            shots,
            samples_per_shot,
        } => {
            let mut extra = vec![
                format!("trajectory.kind=\"{kind}\""),
                format!("trajectory.shots={shots}"),
            ];
            if let Some(n) = samples_per_shot {
                extra.push(format!("trajectory.samples_per_shot={n}"));
            }
            let cfg = g.resolve(&extra, None)?;
            let model = cfg.build_model()?;
            let t = model.traj.template();
            let out = g.out()?;
            let path = out.join(format!("init_{kind}.ktraj"));
            t.save(&path, cfg.limits.fov)?;
            let cpath = out.join(format!("init_{kind}_control.csv"));
            write_controls(&cpath, &model.traj.control, model.traj.n_control())?;
            println!(
                "{}: {} shots x {} samples = {} points; {} control points per shot in {}",
                path.display(),
                t.shots(),
                t.samples_per_shot(),
                t.len(),
                model.traj.n_control(),
                cpath.display()
            );
        }
        Command::Train { baseline, compare } => {
            let mut cfg = g.resolve(&[], None)?;
            if baseline {
                cfg = cfg.fixed_baseline();
            }
            let data = build_dataset(&cfg.data, cfg.seed)?;
            let out = g.out()?;
            if compare {
                let c = compare_learned_fixed(&data, &cfg, Some(out), g.exec())?;
                println!(
                    "learned best epoch {}, fixed best epoch {}",
                    c.learned.best_epoch, c.fixed.best_epoch
                );
                println!("{}", c.evaluation.summary_json());
            } else {
                let o = train_joint(&data, &cfg, Some(out), g.exec())?;
                let last = o.history.last().expect("at least one epoch");
                println!(
                    "trained {} epochs; best epoch {}; last val psnr {:.2} dB, frac_v_ok {:.4}, frac_a_ok {:.4}",
                    cfg.epochs, o.best_epoch, last.psnr, last.frac_v_ok, last.frac_a_ok
                );
            }
        }
        Command::Eval { learned, fixed } => {
            let cfg = g.resolve(&[], Some(&learned.join(CONFIG_FILE)))?;
            let data = build_dataset(&cfg.data, cfg.seed)?;
            let lm = ktraj::pipeline::Model::load(&learned)?;
            let fm = ktraj::pipeline::Model::load(&fixed)?;
            let e = evaluate(&lm, &fm, &data.test, &cfg.pipeline(), g.exec())?;
            let (m, w) = e.write(g.out()?)?;
            println!("{}", e.summary_json());
            println!("wrote {} and {}", m.display(), w.display());
        }
        Command::Psf { learned } => {
            let fallback = learned.as_ref().map(|p| run_dir_of(p).join(CONFIG_FILE));
            let cfg = g.resolve(&[], fallback.as_deref())?;
            let grid = cfg.data.grid;
            let out = g.out()?;
            let mut report = serde_json::Map::new();
            let mut layers = vec![("fixed", cfg.template()?)];
            if let Some(p) = &learned {
                layers.push(("learned", load_trajectory(p)?));
            }
            for (name, t) in &layers {
                let img = psf(t.points(), grid, &cfg.gridding)?;
                let side = peak_side_lobe(&img, grid);
                let db: Vec<f64> = img.iter().map(|v| 20.0 * v.max(1e-6).log10()).collect();
                let svg = heatmap_svg(
                    &db,
                    grid,
                    grid,
                    Some((-60.0, 0.0)),
                    &format!("{name} PSF (dB), peak side lobe {side:.4}"),
                )?;
                write_svg(&out.join(format!("psf_{name}.svg")), &svg)?;
                let raw: Vec<f32> = img.iter().map(|&v| v as f32).collect();
                save_raw_f32(&out.join(format!("psf_{name}.raw")), &raw, &[grid, grid])?;
                report.insert(format!("{name}_peak_side_lobe"), side.into());
                println!("{name}: peak side lobe {side:.6}");
            }
            let json = serde_json::to_string_pretty(&report).expect("map serializes");
            ktraj::io_util::write_atomic(&out.join("psf.json"), json.as_bytes())?;
        }
        Command::ExportGradients { traj } => {
            let cfg = g.resolve(&[], None)?;
            let t = match &traj {
                Some(p) => load_trajectory(p)?,
                None => cfg.template()?,
            };
            let path = g.out()?.join("waveforms.csv");
            export_waveforms(&t, &cfg.limits, &path)?;
            let r = check_limits(&kinematics(&t, &cfg.limits)?, &cfg.limits);
            println!(
                "{}: {} rows; frac_v_ok {:.4}, frac_a_ok {:.4}",
                path.display(),
                t.len(),
                r.frac_velocity_ok,
                r.frac_accel_ok
            );
        }
        Command::Plot { run, traj } => {
            if run.is_none() && traj.is_empty() {
                return Err(CliError::Usage("plot needs --run and/or --traj".into()));
            }
            let out = g.out()?;
            let mut layers: Vec<(String, Trajectory)> = Vec::new();
            if let Some(dir) = &run {
                let template = dir.join("template.ktraj");
                if template.exists() {
                    layers.push(("initial".into(), Trajectory::load(&template)?.0));
                }
                let learned = dir.join(LEARNED_TRAJECTORY_FILE);
                if learned.exists() {
                    layers.push(("learned".into(), Trajectory::load(&learned)?.0));
                }
                let rows = read_history(&dir.join(HISTORY_FILE))?;
                for col in ["total", "psnr", "ssim", "pen_a", "frac_v_ok", "frac_a_ok"] {
                    let p = out.join(format!("history_{col}.svg"));
                    write_svg(&p, &history_svg(&rows, col)?)?;
                    println!("wrote {}", p.display());
                }
            }
            for p in &traj {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                layers.push((name, Trajectory::load(p)?.0));
            }
            if !layers.is_empty() {
                let refs: Vec<(&str, &Trajectory)> =
                    layers.iter().map(|(n, t)| (n.as_str(), t)).collect();
                let p = out.join("trajectories.svg");
                write_svg(&p, &trajectory_svg(&refs, "k-space trajectories")?)?;
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck => {
            let seed = g.seed.unwrap_or(0);
            let results = gradcheck::run_all(seed)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {:<28} metric {:.3e} tol {:.1e}  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.metric,
                    r.tolerance,
                    r.detail
                );
            }
            if !ok {
                return Err(CliError::Runtime(Error::InvalidArgument(
                    "gradient check failed".into(),
                )));
            }
        }
    }
    Ok(())
}

fn run_dir_of(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn load_trajectory(p: &Path) -> CliResult<Trajectory> {
    let file = if p.is_dir() {
        p.join(LEARNED_TRAJECTORY_FILE)
    } else {
        p.to_path_buf()
    };
    if !file.exists() {
        return Err(CliError::Runtime(Error::io(
            &file,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such trajectory file"),
        )));
    }
    Ok(Trajectory::load(&file)?.0)
}

fn write_controls(path: &Path, control: &[f64], n_control: usize) -> CliResult<()> {
    let mut s = String::from("shot,control,kx,ky\n");
    for (i, p) in control.chunks_exact(2).enumerate() {
        s.push_str(&format!(
            "{},{},{:.10e},{:.10e}\n",
            i / n_control,
            i % n_control,
            p[0],
            p[1]
        ));
    }
    Ok(ktraj::io_util::write_atomic(path, s.as_bytes())?)
}
