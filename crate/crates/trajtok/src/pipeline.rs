//! End-to-end trajectory generation: key-frame detection, midpoint clip
//! splitting, per-clip-start segmentation, parallel tracking, boundary
//! merging, and assembly into a validated `TrajectorySet`.

use crate::error::Result;
use crate::keyframe::{detect_keyframes, KeyframeConfig};
use crate::segment::{ConfiguredSegmenter, LabelMap, Segmenter, SegmenterConfig};
use crate::store::TrajectorySet;
use crate::track::{
    merge_consecutive, split_long_clips, track_clips_parallel, TrackerConfig,
};
use crate::video::{sample_uniform, VideoClip};

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub keyframe: KeyframeConfig,
    pub segmenter: SegmenterConfig,
    pub tracker: TrackerConfig,
    pub workers: usize,
    /// Uniformly subsample the video to this many frames before trajectory
    /// generation. `None` keeps every frame.
    pub sample_frames: Option<usize>,
}

impl PipelineConfig {
    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            1
        } else {
            self.workers
        }
    }
}

/// Run the full split-track-merge pipeline on a video.
pub fn generate_trajectories(video: &VideoClip, cfg: &PipelineConfig) -> Result<TrajectorySet> {
    let sampled;
    let video = match cfg.sample_frames {
        Some(n) if n < video.len() => {
            sampled = sample_uniform(video, n)?;
            &sampled
        }
        _ => video,
    };
    let partition = detect_keyframes(video, &cfg.keyframe)?;
    let partition = split_long_clips(&partition, &cfg.tracker)?;
    let segmenter = ConfiguredSegmenter {
        cfg: cfg.segmenter.clone(),
    };
    let seeds: Vec<(usize, LabelMap)> = partition
        .clips()
        .iter()
        .map(|&(s, _)| Ok((s, segmenter.segment(&video.frames[s], s)?)))
        .collect::<Result<_>>()?;
    let tracks = track_clips_parallel(
        video,
        &seeds,
        &partition,
        &cfg.tracker,
        cfg.effective_workers(),
    )?;
    let mut merges = Vec::with_capacity(tracks.len().saturating_sub(1));
    for i in 0..tracks.len().saturating_sub(1) {
        let next_seed = &seeds[i + 1].1;
        merges.push(merge_consecutive(&tracks[i], next_seed, video, &cfg.tracker)?);
    }
    crate::track::assemble_trajectories(&tracks, &merges)
}
