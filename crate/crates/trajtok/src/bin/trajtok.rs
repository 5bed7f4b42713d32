use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use trajtok::bench::{bench_frames, render_overlay, reports_csv};
use trajtok::encoder::{encode_video, read_checkpoint, write_checkpoint, EncoderConfig};
use trajtok::error::{Error, Result};
use trajtok::keyframe::{detect_keyframes, KeyframeConfig};
use trajtok::pipeline::{generate_trajectories, PipelineConfig};
use trajtok::segment::{segment_frame, write_lmap, SegmenterBackend, SegmenterConfig};
use trajtok::store::{read_traj, write_traj};
use trajtok::track::TrackerBackend;
use trajtok::training::{
    build_toy_dataset, load_fixtures, prepare_pairs, trace_csv, train_toy, write_fixtures,
    TrainConfig,
};
use trajtok::video::{load_raw_video, synthesize_video, write_raw_video, SceneKind, SyntheticSpec};

#[derive(Parser)]
#[command(name = "trajtok", about = "Grounded video tokenization toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect key frames with the three-detector ensemble
    Keyframes {
        video: PathBuf,
        #[arg(long, default_value_t = 27.0)]
        hsv: f64,
        #[arg(long, default_value_t = 0.15)]
        luma: f64,
        #[arg(long, default_value_t = 12.0)]
        rgb: f64,
        #[arg(long, default_value_t = 2)]
        votes: usize,
        /// Emit {"keyframes": [...], "clips": [[s,e], ...]} instead of lines
        #[arg(long)]
        json: bool,
    },
    /// Segment one frame into a panoptic label map
    Segment {
        video: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Color quantization levels per channel
        #[arg(long, default_value_t = 4)]
        quant: usize,
    },
    /// Run the full split-track-merge trajectory pipeline
    Trajgen {
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_clip: usize,
        #[arg(long, default_value_t = 0.8)]
        iou: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// "builtin" or a directory of precomputed frame_{t:05}.lmap files
        #[arg(long, default_value = "builtin")]
        seg_backend: String,
        /// "builtin" or a directory of precomputed frame_{t:05}.lmap files
        #[arg(long, default_value = "builtin")]
        track_backend: String,
        /// Uniformly sample this many frames before trajectory generation
        #[arg(long)]
        sample_frames: Option<usize>,
    },
    /// Encode trajectories into tokens with a trained checkpoint
    Tokenize {
        video: PathBuf,
        traj: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train the toy contrastive model on count-x-color fixtures
    TrainToy {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-step loss trace CSV here (also printed to stdout)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Token/FLOPs scaling benchmark across frame counts
    Bench {
        #[arg(long, default_value = "static")]
        fixture: SceneKind,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        frames: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "trajectory,patch3d")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 1)]
        tubelet: usize,
    },
    /// Render per-frame trajectory overlays as PNGs
    Overlay {
        video: PathBuf,
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic fixture video
    Synth {
        #[arg(long)]
        kind: SceneKind,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the 16 toy count-x-color training fixtures
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 2)]
        frames: usize,
    },
}

fn parse_backend(s: &str) -> (bool, Option<PathBuf>) {
    if s == "builtin" {
        (true, None)
    } else {
        (false, Some(PathBuf::from(s)))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keyframes {
            video,
            hsv,
            luma,
            rgb,
            votes,
            json,
        } => {
            let clip = load_raw_video(&video)?;
            let cfg = KeyframeConfig {
                hsv_threshold: hsv,
                luma_corr_threshold: luma,
                rgb_threshold: rgb,
                min_votes: votes,
                ..KeyframeConfig::default()
            };
            let part = detect_keyframes(&clip, &cfg)?;
            if json {
                let clips: Vec<[usize; 2]> =
                    part.clips().iter().map(|&(s, e)| [s, e]).collect();
                println!(
                    "{}",
                    serde_json::json!({ "keyframes": part.keyframes, "clips": clips })
                );
            } else {
                for k in &part.keyframes {
                    println!("{k}");
                }
            }
        }
        Command::Segment {
            video,
            frame,
            out,
            quant,
        } => {
            let clip = load_raw_video(&video)?;
            let f = clip
                .frames
                .get(frame)
                .ok_or_else(|| Error::Config(format!("frame {frame} out of range")))?;
            let cfg = SegmenterConfig {
                quant_levels: quant,
                ..SegmenterConfig::default()
            };
            let map = segment_frame(f, &cfg)?;
            let path = out.unwrap_or_else(|| video.with_extension("lmap"));
            write_lmap(&path, &map)?;
            println!(
                "wrote {} ({} labels, {}x{})",
                path.display(),
                map.label_count(),
                map.width,
                map.height
            );
        }
        Command::Trajgen {
            video,
            out,
            max_clip,
            iou,
            workers,
            seg_backend,
            track_backend,
            sample_frames,
        } => {
            let clip = load_raw_video(&video)?;
            let mut cfg = PipelineConfig {
                workers,
                sample_frames,
                ..PipelineConfig::default()
            };
            cfg.tracker.max_clip_len = max_clip;
            cfg.tracker.merge_iou_threshold = iou;
            match parse_backend(&seg_backend) {
                (true, _) => {}
                (false, Some(dir)) => cfg.segmenter.backend = SegmenterBackend::External { dir },
                _ => unreachable!(),
            }
            match parse_backend(&track_backend) {
                (true, _) => {}
                (false, Some(dir)) => cfg.tracker.backend = TrackerBackend::External { dir },
                _ => unreachable!(),
            }
            let set = generate_trajectories(&clip, &cfg)?;
            write_traj(&out, &set)?;
            println!("wrote {} ({} trajectories)", out.display(), set.token_count());
        }
        Command::Tokenize {
            video,
            traj,
            params,
            out,
            workers,
        } => {
            let clip = load_raw_video(&video)?;
            let set = read_traj(&traj)?;
            let store = read_checkpoint(&params)?;
            let cfg = EncoderConfig::tiny();
            let tokens = encode_video(&clip, &set, &store, &cfg, workers)?;
            let d_m = tokens.first().map_or(cfg.d_m, Vec::len);
            let mut buf = Vec::with_capacity(8 + tokens.len() * d_m * 4);
            buf.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
            buf.extend_from_slice(&(d_m as u32).to_le_bytes());
            for row in &tokens {
                for &v in row {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            std::fs::File::create(&out)?.write_all(&buf)?;
            println!("wrote {} ({} x {} tokens)", out.display(), tokens.len(), d_m);
        }
        Command::TrainToy {
            fixtures,
            steps,
            lr,
            seed,
            out,
            trace,
        } => {
            let pairs = load_fixtures(&fixtures)?;
            let prepared = prepare_pairs(pairs)?;
            let cfg = TrainConfig {
                steps,
                lr,
                seed,
                ..TrainConfig::default()
            };
            let (params, reports) = train_toy(&prepared, &cfg)?;
            write_checkpoint(&out, &params)?;
            let csv = trace_csv(&reports);
            print!("{csv}");
            if let Some(path) = trace {
                std::fs::write(&path, &csv)?;
            }
            if let Some(last) = reports.last() {
                eprintln!(
                    "final loss {:.4} v2t {:.3} t2v {:.3}",
                    last.loss, last.v2t_acc, last.t2v_acc
                );
            }
        }
        Command::Bench {
            fixture,
            frames,
            methods,
            out,
            objects,
            side,
            seed,
            patch,
            tubelet,
        } => {
            let fixtures: Result<Vec<_>> = frames
                .iter()
                .map(|&t| {
                    let v = synthesize_video(&SyntheticSpec {
                        kind: fixture,
                        objects,
                        frames: t,
                        width: side,
                        height: side,
                        seed,
                    })?;
                    Ok((t, v))
                })
                .collect();
            let rows = bench_frames(
                &fixtures?,
                &methods,
                &PipelineConfig::default(),
                &EncoderConfig::tiny(),
                1024,
                24,
                patch,
                tubelet,
            )?;
            let csv = reports_csv(&rows);
            std::fs::write(&out, &csv)?;
            print!("{csv}");
        }
        Command::Overlay { video, traj, out } => {
            let clip = load_raw_video(&video)?;
            let set = read_traj(&traj)?;
            render_overlay(&clip, &set, &out)?;
            println!("wrote {} frames to {}", clip.len(), out.display());
        }
        Command::Synth {
            kind,
            frames,
            objects,
            side,
            seed,
            out,
        } => {
            let v = synthesize_video(&SyntheticSpec {
                kind,
                objects,
                frames,
                width: side,
                height: side,
                seed,
            })?;
            write_raw_video(&out, &v)?;
            println!("wrote {} ({} frames, {side}x{side})", out.display(), frames);
        }
        Command::Fixtures { out, side, frames } => {
            let pairs = build_toy_dataset(side, frames)?;
            write_fixtures(&out, &pairs)?;
            println!("wrote {} fixtures to {}", pairs.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
