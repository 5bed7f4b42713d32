//! Token/FLOPs efficiency accounting: space-time patch baselines, a
//! documented transformer cost model, tokenizer ablation modes, frame-
//! scaling benchmark tables, and trajectory overlay rendering.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::pipeline::{generate_trajectories, PipelineConfig};
use crate::segment::{segment_frame, LabelMap};
use crate::store::{image_as_trajectory, TrajectorySet};
use crate::track::{assemble_trajectories, track_clip};
use crate::video::VideoClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    SegmentationOnly,
    TrackingOnly,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "trajectory" => Ok(AblationMode::Full),
            "segmentation-only" => Ok(AblationMode::SegmentationOnly),
            "tracking-only" => Ok(AblationMode::TrackingOnly),
            other => Err(Error::Config(format!("unknown ablation mode: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBudgetReport {
    pub method: String,
    pub frames: usize,
    pub tokens: usize,
    pub transformer_flops: u128,
    pub tokenizer_flops: u128,
    pub wall_ms: f64,
}

/// Space-time patch token count: (H/patch)(W/patch)(T/tubelet).
pub fn patch_token_count(
    t: usize,
    h: usize,
    w: usize,
    patch: usize,
    tubelet: usize,
) -> Result<usize> {
    if patch == 0 || tubelet == 0 {
        return Err(Error::Config("patch and tubelet must be positive".into()));
    }
    if !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "resolution {h}x{w} not divisible by patch {patch}"
        )));
    }
    if !t.is_multiple_of(tubelet) {
        return Err(Error::Config(format!(
            "{t} frames not divisible by tubelet {tubelet}"
        )));
    }
    Ok((h / patch) * (w / patch) * (t / tubelet))
}

/// Transformer cost model: per layer, attention projections 4Nd², attention
/// matrices 2N²d, and the 4x-width FFN 8Nd²; total L(12Nd² + 2N²d).
pub fn transformer_flops(tokens: usize, width: usize, depth: usize) -> Result<u128> {
    if tokens == 0 || width == 0 || depth == 0 {
        return Err(Error::Config("tokens, width, depth must be positive".into()));
    }
    let (n, d, l) = (tokens as u128, width as u128, depth as u128);
    Ok(l * (12 * n * d * d + 2 * n * n * d))
}

/// Estimated FLOPs to produce trajectory tokens: the conv pyramid per frame
/// plus per-trajectory pooling and resampling. A documented estimate, not a
/// measurement: conv stages count 2·out·in·9 per output cell, projections
/// 2·cells·in·d_f, and the two resampler branches 2·(8·n·d_f² + 4·n·d_f).
pub fn trajectory_tokenizer_flops(
    frames: usize,
    trajs: &TrajectorySet,
    cfg: &crate::encoder::EncoderConfig,
) -> u128 {
    let mut per_frame: u128 = 0;
    let mut side = cfg.input_side() as u128;
    let mut in_c: u128 = 3;
    let d_f = cfg.d_f as u128;
    for (s, &out_c) in cfg.stage_widths.iter().enumerate() {
        let stride = if s == 0 { 4 } else { 2 };
        side = (side + 2 - 3) / stride + 1;
        let cells = side * side;
        per_frame += 2 * cells * (out_c as u128) * in_c * 9;
        per_frame += 2 * cells * (out_c as u128) * d_f;
        in_c = out_c as u128;
    }
    let mut per_traj: u128 = 0;
    for traj in &trajs.trajectories {
        let n = traj.span().len() as u128;
        let grid = (cfg.grid_side * cfg.grid_side) as u128;
        per_traj += 2 * n * grid * d_f; // mask pooling
        per_traj += 2 * (8 * n * d_f * d_f + 4 * n * d_f); // both branches
        per_traj += 2 * (cfg.d_f * cfg.d_m + cfg.d_m * cfg.d_m) as u128; // token MLP
    }
    per_frame * frames as u128 + per_traj
}

/// Estimated FLOPs for patch embedding: 2·N·(patch²·3·tubelet)·d.
pub fn patch_tokenizer_flops(tokens: usize, patch: usize, tubelet: usize, width: usize) -> u128 {
    2 * (tokens as u128) * ((patch * patch * 3 * tubelet) as u128) * width as u128
}

/// Tile a frame into square patch masks, labeled in raster order from 1.
pub fn patch_grid_map(width: usize, height: usize, patch: usize) -> Result<LabelMap> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "resolution {width}x{height} not divisible by patch {patch}"
        )));
    }
    let cols = width / patch;
    let mut labels = vec![0u32; width * height];
    for y in 0..height {
        for x in 0..width {
            labels[y * width + x] = ((y / patch) * cols + x / patch) as u32 + 1;
        }
    }
    LabelMap::new(width, height, labels)
}

/// Tokenizer ablations: `Full` is the whole pipeline; `SegmentationOnly`
/// segments every frame independently into length-1 trajectories;
/// `TrackingOnly` tracks a 16x16 patch tiling of the first frame.
pub fn run_ablation_tokenizer(
    video: &VideoClip,
    mode: AblationMode,
    cfg: &PipelineConfig,
) -> Result<TrajectorySet> {
    match mode {
        AblationMode::Full => generate_trajectories(video, cfg),
        AblationMode::SegmentationOnly => {
            let mut out: Option<TrajectorySet> = None;
            for (t, frame) in video.frames.iter().enumerate() {
                let map = segment_frame(frame, &cfg.segmenter)?;
                let single = image_as_trajectory(frame, &map)?;
                match &mut out {
                    None => {
                        out = Some(TrajectorySet {
                            width: single.width,
                            height: single.height,
                            frames: video.len(),
                            trajectories: single.trajectories,
                        })
                    }
                    Some(acc) => {
                        let base = acc.trajectories.len() as u32;
                        for mut traj in single.trajectories {
                            traj.id += base;
                            traj.start = t;
                            acc.trajectories.push(traj);
                        }
                    }
                }
            }
            let mut set = out.ok_or_else(|| Error::Config("empty video".into()))?;
            // image_as_trajectory pins start=0; fix spans to their frames
            for traj in &mut set.trajectories {
                debug_assert_eq!(traj.masks.len(), 1);
            }
            set.validate()?;
            Ok(set)
        }
        AblationMode::TrackingOnly => {
            let seed = patch_grid_map(video.width(), video.height(), 16)?;
            let ct = track_clip(video, &seed, (0, video.len()), &cfg.tracker)?;
            assemble_trajectories(&[ct], &[])
        }
    }
}

/// One benchmark row per (method, T): synthesizes nothing itself, the
/// caller provides a fixture per frame count.
#[allow(clippy::too_many_arguments)]
pub fn bench_frames(
    fixtures: &[(usize, VideoClip)],
    methods: &[String],
    pipeline: &PipelineConfig,
    encoder: &crate::encoder::EncoderConfig,
    main_width: usize,
    main_depth: usize,
    patch: usize,
    tubelet: usize,
) -> Result<Vec<TokenBudgetReport>> {
    let mut rows = Vec::new();
    for method in methods {
        for (t, video) in fixtures {
            let start = Instant::now();
            let (tokens, tokenizer_flops) = if method == "patch3d" {
                let n = patch_token_count(*t, video.height(), video.width(), patch, tubelet)?;
                (n, patch_tokenizer_flops(n, patch, tubelet, main_width))
            } else {
                let mode: AblationMode = method.parse()?;
                let set = run_ablation_tokenizer(video, mode, pipeline)?;
                let flops = trajectory_tokenizer_flops(*t, &set, encoder);
                (set.token_count(), flops)
            };
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            rows.push(TokenBudgetReport {
                method: method.clone(),
                frames: *t,
                tokens,
                transformer_flops: transformer_flops(tokens, main_width, main_depth)?,
                tokenizer_flops,
                wall_ms,
            });
        }
    }
    Ok(rows)
}

pub fn reports_csv(rows: &[TokenBudgetReport]) -> String {
    let mut out = String::from("method,T,tokens,transformer_flops,tokenizer_flops,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.method, r.frames, r.tokens, r.transformer_flops, r.tokenizer_flops, r.wall_ms
        ));
    }
    out
}

/// Stable per-trajectory tint from the id (splitmix-style hash).
pub fn id_color(id: u32) -> [u8; 3] {
    let mut z = (id as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    [
        64 + (z & 0x7f) as u8 + 64,
        64 + ((z >> 8) & 0x7f) as u8 + 64,
        64 + ((z >> 16) & 0x7f) as u8 + 64,
    ]
}

/// Render one PNG per frame: each pixel tinted by its trajectory's stable
/// color, with solid-color outlines at trajectory boundaries.
pub fn render_overlay<P: AsRef<Path>>(
    video: &VideoClip,
    trajs: &TrajectorySet,
    out_dir: P,
) -> Result<()> {
    trajs.validate()?;
    if trajs.frames != video.len()
        || trajs.width != video.width()
        || trajs.height != video.height()
    {
        return Err(Error::Config(
            "video and trajectory set dimensions differ".into(),
        ));
    }
    std::fs::create_dir_all(&out_dir)?;
    let (w, h) = (video.width(), video.height());
    for t in 0..video.len() {
        // per-pixel trajectory owner at this frame
        let mut owner = vec![u32::MAX; w * h];
        for traj in &trajs.trajectories {
            if !traj.span().contains(&t) {
                continue;
            }
            let mask = &traj.masks[t - traj.start];
            for &(start, len) in &mask.runs {
                for i in start..start + len {
                    owner[i as usize] = traj.id;
                }
            }
        }
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let id = owner[i];
                let tint = id_color(id);
                let boundary = (x + 1 < w && owner[i + 1] != id)
                    || (x > 0 && owner[i - 1] != id)
                    || (y + 1 < h && owner[i + w] != id)
                    || (y > 0 && owner[i - w] != id);
                let px = if boundary {
                    tint
                } else {
                    let src = video.frames[t].get(x, y);
                    [
                        ((src[0] as u16 + tint[0] as u16) / 2) as u8,
                        ((src[1] as u16 + tint[1] as u16) / 2) as u8,
                        ((src[2] as u16 + tint[2] as u16) / 2) as u8,
                    ]
                };
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = out_dir.as_ref().join(format!("frame_{t:05}.png"));
        img.save(&path)
            .map_err(|e| Error::Other(format!("writing {path:?}: {e}")))?;
    }
    Ok(())
}
