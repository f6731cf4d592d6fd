use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamtrack::data::{read_queries, read_tracks, render_scene, write_clip, ClipReader, SceneConfig, SpriteScene};
use streamtrack::engine::{profile, window_peak, Checkpoint, Config, DataSource, SessionOptions, Trainer};
use streamtrack::eval::{evaluate, read_stream, run_tracker, write_record, EvalInput};
use streamtrack::{Error, Result};

#[derive(Parser)]
#[command(name = "streamtrack", version, about = "Online point tracker with per-query memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sprite clips with ground-truth tracks.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        frames: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Train from a config file; clips are generated on the fly without `--data`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `OUT/checkpoint.tron` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Track queries through a clip, writing one JSON line per frame.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Defaults to the clip's `queries.json`.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// `-` writes to stdout.
        #[arg(long, default_value = "-")]
        out: PathBuf,
        #[arg(long)]
        memory_size: Option<usize>,
        #[arg(long)]
        support_grid: bool,
    },
    /// Score a track stream against a clip's ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Count live floats while streaming synthetic frames.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        tracks: usize,
        #[arg(long)]
        memory_size: Option<usize>,
        /// Window lengths for the buffering comparator.
        #[arg(long, value_delimiter = ',')]
        window: Vec<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData { out, clips, seed, frames, height, width } => {
            let mut cfg = SceneConfig::desk().with_size(height, width);
            cfg.frames = frames;
            for k in 0..clips {
                let s = seed + k as u64;
                let scene = SpriteScene::generate(s, &cfg)?;
                let (fr, track) = render_scene(&scene)?;
                write_clip(&out.join(format!("clip_{k:05}")), s, &fr, &track)?;
            }
            log::info!("wrote {clips} clips to {}", out.display());
            Ok(())
        }
        Command::Train { config, data, out, resume } => {
            let cfg = match &config {
                Some(p) => Config::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => Config::desk(),
            };
            let source = match &data {
                Some(d) => DataSource::open_dir(d)?,
                None => DataSource::generated(&cfg),
            };
            let ck_path = out.join("checkpoint.tron");
            let mut trainer = if resume && ck_path.exists() {
                let ck = Checkpoint::load(&ck_path)?;
                log::info!("resuming at step {}", ck.step);
                Trainer::resume(&ck, source)?
            } else {
                Trainer::new(&cfg, source)?
            };
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg_path = out.join("config.txt");
            fs::write(&cfg_path, trainer.model.config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            log::info!("{} parameters", trainer.model.num_params());
            trainer.run(&out)
        }
        Command::Track { checkpoint, clip, queries, out, memory_size, support_grid } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let reader = ClipReader::open(&clip)?;
            let qpath = queries.unwrap_or_else(|| clip.join("queries.json"));
            let qs = read_queries(&qpath)?;
            let tracks = qs.iter().map(|q| q.id + 1).max().unwrap_or(0).max(reader.manifest.tracks);
            let mut sink: Box<dyn Write> = if out == Path::new("-") {
                Box::new(io::stdout().lock())
            } else {
                Box::new(BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?))
            };
            let opts = SessionOptions { memory_size, support_grid };
            let frames = (0..reader.manifest.frames).map(|t| reader.frame(t));
            run_tracker(&model, frames, &qs, tracks, opts, |rec| {
                write_record(&mut sink, rec)?;
                sink.flush().map_err(|e| Error::io(&out, e))
            })?;
            Ok(())
        }
        Command::Eval { pred, gt } => {
            let track = read_tracks(&gt)?;
            let f = File::open(&pred).map_err(|e| Error::io(&pred, e))?;
            let p = read_stream(BufReader::new(f), track.queries, track.frames)?;
            let report = evaluate(&EvalInput::new(&track, &p)?);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Profile { checkpoint, frames, tracks, memory_size, window } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let l = memory_size.unwrap_or(model.config.memory_len);
            let report = profile(&model, frames, tracks, l)?;
            let mut value = serde_json::to_value(&report)?;
            if !window.is_empty() {
                let peaks = window
                    .iter()
                    .map(|&w| Ok(serde_json::json!({"window": w, "peak_floats": window_peak(&model, frames, w)?})))
                    .collect::<Result<Vec<_>>>()?;
                value["window_comparator"] = serde_json::Value::Array(peaks);
            }
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
    }
}
