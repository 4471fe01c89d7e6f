use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use worldact::config::{Paths, PipelineConfig};
use worldact::pipeline::{run, RunOptions, Stage};
use worldact::raster::save_rgb_png;
use worldact::render::render;
use worldact::scene::ply::load_scene;
use worldact::scene::Trajectory;
use worldact::synth::{generate, write_outputs, SynthSpec};
use worldact::{Error, Result};

/// Decompose a Gaussian splatting scene into objects, background, collision
/// proxy and placed assets.
#[derive(Parser)]
#[command(name = "worldact", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic room with ground truth and a ready-to-run config.
    Synth {
        /// Generator spec (JSON); defaults to the built-in room.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a scene or an assembled manifest along the trajectory to PNGs.
    Render {
        #[command(flatten)]
        run: RunArgs,
        /// Assembled `scene.manifest.json`; defaults to the input scene.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Find objects and label their Gaussians.
    Decompose(RunArgs),
    /// Complete the background, build the collision proxy and the assets.
    Restore(RunArgs),
    /// Place the assets and write the scene manifest.
    Assemble(RunArgs),
    /// All stages in order.
    Pipeline(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip stages whose manifest matches the current configuration.
    #[arg(long)]
    resume: bool,
    /// `name=mock` or `name=http://…` for vlm, segmenter, inpainter, depth, asset, embedder.
    #[arg(long = "backend", value_name = "NAME=MOCK|URL")]
    backends: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut c = PipelineConfig::load(path)?;
                c.resolve_relative(path.parent().unwrap_or(Path::new(".")));
                c
            }
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.paths.output = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for b in &self.backends {
            cfg.backends.set(b)?;
        }
        Ok(cfg)
    }
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match config {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate(&spec)?;
    write_outputs(&scene, out)?;
    let cfg = PipelineConfig {
        paths: Paths {
            scene: "scene.ply".into(),
            trajectory: "trajectory.json".into(),
            oracle: Some("oracle.json".into()),
            output: "run".into(),
        },
        up: scene.up().into(),
        ..Default::default()
    };
    let path = out.join("pipeline.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&path, e))?;
    println!("wrote {} ({} Gaussians, {} views)", out.display(), scene.scene.len(), scene.trajectory.len());
    Ok(())
}

fn render_cmd(args: &RunArgs, manifest: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    cfg.validate()?;
    let scene = match manifest {
        Some(m) => {
            let loaded = worldact::assemble::SceneManifest::load(m)?;
            loaded.compose(m.parent().unwrap_or(Path::new(".")))?
        }
        None => load_scene(&cfg.paths.scene)?,
    };
    let traj = Trajectory::load(&cfg.paths.trajectory)?;
    let dir = cfg.paths.output.join("renders");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for cam in traj.frames() {
        let frame = render(&scene, cam, &cfg.render);
        save_rgb_png(&frame.color, &dir.join(format!("frame_{:05}.png", cam.frame_index)))?;
    }
    println!("rendered {} frames to {}", traj.len(), dir.display());
    Ok(())
}

fn stages(args: &RunArgs, opts: impl FnOnce(&PipelineConfig) -> RunOptions) -> Result<()> {
    let cfg = args.config()?;
    let (record, result) = run(&cfg, &opts(&cfg));
    for s in &record.stages {
        println!("{:<10} {:?} {:.1} s", s.stage.name(), s.status, s.seconds);
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out, seed } => synth(config.as_deref(), out, *seed),
        Command::Render { run, manifest } => render_cmd(run, manifest.as_deref()),
        Command::Decompose(a) => stages(a, |_| RunOptions::single(Stage::Decompose, a.resume)),
        Command::Restore(a) => stages(a, |_| RunOptions::single(Stage::Restore, a.resume)),
        Command::Assemble(a) => stages(a, |_| RunOptions::single(Stage::Assemble, a.resume)),
        Command::Pipeline(a) => stages(a, |c| RunOptions::pipeline(c, a.resume)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
