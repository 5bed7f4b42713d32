//! Split-track-merge: propagate key-frame label maps through each clip,
//! split over-long clips at the midpoint, run clips in parallel, and link
//! object identities across consecutive clips by IoU matching.
//!
//! The built-in tracker tests integer translations within a search radius
//! (toroidal, matching the synthetic pan fixture), scores them by quantized
//! color agreement, resolves pixel conflicts by match score, and repairs
//! orphan pixels so every frame stays a panoptic partition.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::keyframe::ClipPartition;
use crate::segment::{read_lmap, LabelMap};
use crate::store::{tight_bbox, RleMask, Trajectory, TrajectorySet};
use crate::video::{Frame, VideoClip};

#[derive(Debug, Clone)]
pub enum TrackerBackend {
    /// Integer-translation search against quantized color agreement.
    BuiltinFlow,
    /// Precomputed per-frame label maps (`frame_{t:05}.lmap`) in a directory.
    External { dir: PathBuf },
}

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub backend: TrackerBackend,
    /// Clips longer than this are recursively bisected at the midpoint.
    pub max_clip_len: usize,
    /// Cross-clip identities merge when IoU strictly exceeds this.
    pub merge_iou_threshold: f64,
    /// Translation search radius in pixels for the built-in tracker.
    pub search_radius: usize,
    /// Quantization levels used by the built-in tracker's color match.
    pub quant_levels: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            backend: TrackerBackend::BuiltinFlow,
            max_clip_len: 16,
            merge_iou_threshold: 0.8,
            search_radius: 4,
            quant_levels: 4,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clip_len < 2 {
            return Err(Error::Config("max clip length must be >= 2".into()));
        }
        if !(self.merge_iou_threshold > 0.0 && self.merge_iou_threshold <= 1.0) {
            return Err(Error::Config("merge IoU threshold must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// Per-clip track: label maps for every frame of `[start, end)`, with labels
/// consistent across the clip (label k means the same object at every frame).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipTrack {
    pub start: usize,
    pub end: usize,
    pub maps: Vec<LabelMap>,
}

/// Identity links between a clip and its successor: a partial injective
/// matching plus the one-step propagated boundary map.
#[derive(Debug, Clone)]
pub struct MergeDecision {
    pub pairs: Vec<(u32, u32)>,
    pub propagated: LabelMap,
}

/// Recursively bisect clips longer than `max_clip_len`. Original keyframes
/// remain clip starts; new boundaries nest at midpoints.
pub fn split_long_clips(partition: &ClipPartition, cfg: &TrackerConfig) -> Result<ClipPartition> {
    cfg.validate()?;
    fn bisect(s: usize, e: usize, max: usize, out: &mut Vec<usize>) {
        if e - s > max {
            let m = s + (e - s) / 2;
            bisect(s, m, max, out);
            bisect(m, e, max, out);
        } else {
            out.push(s);
        }
    }
    let mut keyframes = Vec::new();
    for (s, e) in partition.clips() {
        bisect(s, e, cfg.max_clip_len, &mut keyframes);
    }
    ClipPartition::new(keyframes, partition.len)
}

#[inline]
fn quantize_frame(frame: &Frame, levels: usize) -> Vec<[u8; 3]> {
    (0..frame.width * frame.height)
        .map(|i| {
            let q = |c: u8| ((c as usize * levels) / 256) as u8;
            [
                q(frame.pixels[i * 3]),
                q(frame.pixels[i * 3 + 1]),
                q(frame.pixels[i * 3 + 2]),
            ]
        })
        .collect()
}

/// Propagate a label map one frame forward with the built-in tracker.
pub fn propagate_step(
    prev_frame: &Frame,
    next_frame: &Frame,
    prev_map: &LabelMap,
    cfg: &TrackerConfig,
) -> Result<LabelMap> {
    prev_frame.same_dims(next_frame)?;
    if prev_map.width != prev_frame.width || prev_map.height != prev_frame.height {
        return Err(Error::DimensionMismatch(
            prev_frame.width,
            prev_frame.height,
            prev_map.width,
            prev_map.height,
        ));
    }
    let (w, h) = (prev_frame.width, prev_frame.height);
    let qprev = quantize_frame(prev_frame, cfg.quant_levels);
    let qnext = quantize_frame(next_frame, cfg.quant_levels);
    let k = prev_map.label_count();
    let r = cfg.search_radius as i64;

    // candidate translations ordered by distance, then dy, dx: the zero
    // translation wins ties so static content stays put
    let mut candidates: Vec<(i64, i64)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            candidates.push((dx, dy));
        }
    }
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

    let wrap = |x: i64, m: usize| ((x % m as i64) + m as i64) as usize % m;

    let mut label_pixels: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for (i, &l) in prev_map.labels.iter().enumerate() {
        label_pixels[l as usize].push(i);
    }

    // best translation per label by quantized color agreement
    let mut best_shift = vec![(0i64, 0i64); k + 1];
    let mut best_score = vec![0usize; k + 1];
    for l in 1..=k {
        let mut best = 0usize;
        let mut best_d = candidates[0];
        for &(dx, dy) in &candidates {
            let mut score = 0usize;
            for &i in &label_pixels[l] {
                let (x, y) = (i % w, i / w);
                let tx = wrap(x as i64 + dx, w);
                let ty = wrap(y as i64 + dy, h);
                if qnext[ty * w + tx] == qprev[i] {
                    score += 1;
                }
            }
            if score > best {
                best = score;
                best_d = (dx, dy);
            }
        }
        best_shift[l] = best_d;
        best_score[l] = best;
    }

    // per-pixel assignment: (color match, global label score, smallest label)
    let mut owner = vec![0u32; w * h];
    let mut owner_key = vec![(0u8, 0usize); w * h];
    for l in 1..=k {
        let (dx, dy) = best_shift[l];
        for &i in &label_pixels[l] {
            let (x, y) = (i % w, i / w);
            let ti = wrap(y as i64 + dy, h) * w + wrap(x as i64 + dx, w);
            let key = ((qnext[ti] == qprev[i]) as u8, best_score[l]);
            let better = owner[ti] == 0
                || key > owner_key[ti]
                || (key == owner_key[ti] && (l as u32) < owner[ti]);
            if better {
                owner[ti] = l as u32;
                owner_key[ti] = key;
            }
        }
    }

    // orphan repair: assign unlabeled pixels to the 4-adjacent label with the
    // longest shared boundary, in raster passes until the frame is covered
    loop {
        let mut assigned = Vec::new();
        for i in 0..w * h {
            if owner[i] != 0 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let mut counts = std::collections::BTreeMap::new();
            let mut tally = |j: usize| {
                if owner[j] != 0 {
                    *counts.entry(owner[j]).or_insert(0usize) += 1;
                }
            };
            if x > 0 {
                tally(i - 1);
            }
            if x + 1 < w {
                tally(i + 1);
            }
            if y > 0 {
                tally(i - w);
            }
            if y + 1 < h {
                tally(i + w);
            }
            if let Some((&l, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                assigned.push((i, l));
            }
        }
        if assigned.is_empty() {
            break;
        }
        for (i, l) in assigned {
            owner[i] = l;
        }
        if owner.iter().all(|&o| o != 0) {
            break;
        }
    }

    // label preservation: a fully usurped label steals the pixel nearest its
    // previous centroid from an owner that keeps at least one pixel
    let mut areas = vec![0usize; k + 1];
    for &o in &owner {
        areas[o as usize] += 1;
    }
    for l in 1..=k {
        if areas[l] > 0 {
            continue;
        }
        let pix = &label_pixels[l];
        let cx = pix.iter().map(|&i| (i % w) as f64).sum::<f64>() / pix.len() as f64;
        let cy = pix.iter().map(|&i| (i / w) as f64).sum::<f64>() / pix.len() as f64;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..w * h {
            if areas[owner[i] as usize] < 2 {
                continue;
            }
            let d = ((i % w) as f64 - cx).powi(2) + ((i / w) as f64 - cy).powi(2);
            if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.ok_or_else(|| {
            Error::Invariant(format!("cannot preserve label {l}: no donatable pixel"))
        })?;
        areas[owner[i] as usize] -= 1;
        owner[i] = l as u32;
        areas[l] += 1;
    }

    LabelMap::new(w, h, owner)
}

/// Track one clip: the seed segments frame `range.0` and is re-estimated
/// frame by frame through `range.1 - 1`. The label set is preserved.
pub fn track_clip(
    video: &VideoClip,
    seed: &LabelMap,
    range: (usize, usize),
    cfg: &TrackerConfig,
) -> Result<ClipTrack> {
    let (s, e) = range;
    if s >= e || e > video.len() {
        return Err(Error::Config(format!(
            "clip range [{s},{e}) out of bounds for {} frames",
            video.len()
        )));
    }
    if seed.width != video.width() || seed.height != video.height() {
        return Err(Error::DimensionMismatch(
            video.width(),
            video.height(),
            seed.width,
            seed.height,
        ));
    }
    match &cfg.backend {
        TrackerBackend::BuiltinFlow => {
            let mut maps = Vec::with_capacity(e - s);
            maps.push(seed.clone());
            for t in s + 1..e {
                let next = propagate_step(
                    &video.frames[t - 1],
                    &video.frames[t],
                    maps.last().unwrap(),
                    cfg,
                )?;
                maps.push(next);
            }
            Ok(ClipTrack { start: s, end: e, maps })
        }
        TrackerBackend::External { dir } => {
            let mut maps = Vec::with_capacity(e - s);
            for t in s..e {
                let map = read_lmap(dir.join(format!("frame_{t:05}.lmap")))?;
                if map.width != video.width() || map.height != video.height() {
                    return Err(Error::DimensionMismatch(
                        video.width(),
                        video.height(),
                        map.width,
                        map.height,
                    ));
                }
                maps.push(map);
            }
            Ok(ClipTrack { start: s, end: e, maps })
        }
    }
}

/// Track all clips with a bounded worker pool. The result is bit-identical
/// for any worker count: clips are fully independent and reassembled in clip
/// order.
pub fn track_clips_parallel(
    video: &VideoClip,
    seeds: &[(usize, LabelMap)],
    partition: &ClipPartition,
    cfg: &TrackerConfig,
    workers: usize,
) -> Result<Vec<ClipTrack>> {
    if workers == 0 {
        return Err(Error::Config("workers must be positive".into()));
    }
    let clips = partition.clips();
    for (s, _) in &clips {
        if !seeds.iter().any(|(ks, _)| ks == s) {
            return Err(Error::Config(format!("missing seed for clip start {s}")));
        }
    }
    let jobs: Vec<((usize, usize), &LabelMap)> = clips
        .iter()
        .map(|&(s, e)| ((s, e), &seeds.iter().find(|(ks, _)| *ks == s).unwrap().1))
        .collect();
    let mut results: Vec<Option<Result<ClipTrack>>> = (0..jobs.len()).map(|_| None).collect();
    if workers == 1 || jobs.len() <= 1 {
        for (slot, (range, seed)) in results.iter_mut().zip(&jobs) {
            *slot = Some(track_clip(video, seed, *range, cfg));
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<ClipTrack>>>> =
            (0..jobs.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let (range, seed) = jobs[i];
                    *slots[i].lock().unwrap() = Some(track_clip(video, seed, range, cfg));
                });
            }
        });
        for (slot, cell) in results.iter_mut().zip(slots) {
            *slot = cell.into_inner().unwrap();
        }
    }
    results
        .into_iter()
        .map(|r| r.expect("all jobs completed"))
        .collect()
}

/// Greedy injective matching of propagated labels against seed labels.
/// A pair matches only when IoU strictly exceeds the threshold; candidates
/// are taken in descending IoU with earlier-label tie-break.
pub fn match_labels(propagated: &LabelMap, seed: &LabelMap, threshold: f64) -> Vec<(u32, u32)> {
    let ka = propagated.label_count();
    let kb = seed.label_count();
    let mut masks_a = Vec::with_capacity(ka);
    let mut masks_b = Vec::with_capacity(kb);
    for l in 1..=ka as u32 {
        masks_a.push(RleMask::from_label(propagated, l).expect("valid map"));
    }
    for l in 1..=kb as u32 {
        masks_b.push(RleMask::from_label(seed, l).expect("valid map"));
    }
    let mut cands: Vec<(f64, u32, u32)> = Vec::new();
    for (i, ma) in masks_a.iter().enumerate() {
        for (j, mb) in masks_b.iter().enumerate() {
            let iou = ma.iou(mb);
            if iou > threshold {
                cands.push((iou, i as u32 + 1, j as u32 + 1));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_a = vec![false; ka + 1];
    let mut used_b = vec![false; kb + 1];
    let mut pairs = Vec::new();
    for (_, a, b) in cands {
        if !used_a[a as usize] && !used_b[b as usize] {
            used_a[a as usize] = true;
            used_b[b as usize] = true;
            pairs.push((a, b));
        }
    }
    pairs
}

/// Link identities between a clip and the seed of its successor by one extra
/// tracking step across the boundary.
pub fn merge_consecutive(
    clip_a: &ClipTrack,
    clip_b_seed: &LabelMap,
    video: &VideoClip,
    cfg: &TrackerConfig,
) -> Result<MergeDecision> {
    let boundary = clip_a.end;
    if boundary >= video.len() {
        return Err(Error::Config(format!(
            "clip ends at {boundary}, no subsequent frame to merge into"
        )));
    }
    let propagated = propagate_step(
        &video.frames[boundary - 1],
        &video.frames[boundary],
        clip_a.maps.last().expect("non-empty clip"),
        cfg,
    )?;
    let pairs = match_labels(&propagated, clip_b_seed, cfg.merge_iou_threshold);
    Ok(MergeDecision { pairs, propagated })
}

/// Union-find over (clip, label) nodes; each equivalence class becomes one
/// trajectory spanning its contiguous clips.
pub fn assemble_trajectories(
    clip_tracks: &[ClipTrack],
    merges: &[MergeDecision],
) -> Result<TrajectorySet> {
    if clip_tracks.is_empty() {
        return Err(Error::Config("no clip tracks".into()));
    }
    if merges.len() + 1 != clip_tracks.len() {
        return Err(Error::Config(format!(
            "{} merges do not align with {} clips",
            merges.len(),
            clip_tracks.len()
        )));
    }
    for w in clip_tracks.windows(2) {
        if w[0].end != w[1].start {
            return Err(Error::Invariant("clips do not tile the video".into()));
        }
    }
    let (width, height) = {
        let m = &clip_tracks[0].maps[0];
        (m.width, m.height)
    };
    let frames = clip_tracks.last().unwrap().end;

    // node ids: offset per clip + (label - 1)
    let mut offsets = Vec::with_capacity(clip_tracks.len());
    let mut total = 0usize;
    for ct in clip_tracks {
        offsets.push(total);
        total += ct.maps[0].label_count();
    }
    let mut parent: Vec<usize> = (0..total).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (ci, merge) in merges.iter().enumerate() {
        let ka = clip_tracks[ci].maps[0].label_count() as u32;
        let kb = clip_tracks[ci + 1].maps[0].label_count() as u32;
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for &(a, b) in &merge.pairs {
            if a == 0 || a > ka || b == 0 || b > kb {
                return Err(Error::Invariant(format!(
                    "merge pair ({a},{b}) out of label range at clip {ci}"
                )));
            }
            if !seen_a.insert(a) || !seen_b.insert(b) {
                return Err(Error::Invariant(format!(
                    "non-injective merge pairs at clip {ci}"
                )));
            }
            let na = offsets[ci] + a as usize - 1;
            let nb = offsets[ci + 1] + b as usize - 1;
            let (ra, rb) = (find(&mut parent, na), find(&mut parent, nb));
            parent[ra] = rb;
        }
    }

    // group nodes by root; members are (clip_idx, label), naturally ordered
    let mut classes: std::collections::BTreeMap<usize, Vec<(usize, u32)>> =
        std::collections::BTreeMap::new();
    for (ci, ct) in clip_tracks.iter().enumerate() {
        for l in 1..=ct.maps[0].label_count() as u32 {
            let node = offsets[ci] + l as usize - 1;
            let root = find(&mut parent, node);
            classes.entry(root).or_default().push((ci, l));
        }
    }

    let mut members: Vec<Vec<(usize, u32)>> = classes.into_values().collect();
    // deterministic trajectory order: by first frame, then first label
    members.sort_by_key(|m| (clip_tracks[m[0].0].start, m[0].1));

    let mut trajectories = Vec::with_capacity(members.len());
    for (id, member) in members.iter().enumerate() {
        // classes must cover consecutive clips with one label each
        for w in member.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::Invariant(
                    "merge class contains non-consecutive or duplicate clips".into(),
                ));
            }
        }
        let start = clip_tracks[member[0].0].start;
        let mut masks = Vec::new();
        let mut boxes = Vec::new();
        for &(ci, label) in member {
            for map in &clip_tracks[ci].maps {
                let mask = RleMask::from_label(map, label)?;
                boxes.push(tight_bbox(&mask)?);
                masks.push(mask);
            }
        }
        trajectories.push(Trajectory {
            id: id as u32,
            start,
            masks,
            boxes,
        });
    }

    let set = TrajectorySet {
        width,
        height,
        frames,
        trajectories,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{segment_frame, SegmenterConfig};
    use crate::video::{synthesize_video, SceneKind, SyntheticSpec, PAN_STEP};

    fn fixture(kind: SceneKind, frames: usize) -> VideoClip {
        synthesize_video(&SyntheticSpec {
            kind,
            objects: 4,
            frames,
            width: 64,
            height: 64,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn split_recursive_bisection() {
        let p = ClipPartition::new(vec![0], 40).unwrap();
        let cfg = TrackerConfig::default();
        let split = split_long_clips(&p, &cfg).unwrap();
        assert_eq!(split.keyframes, vec![0, 10, 20, 30]);
        for (s, e) in split.clips() {
            assert!(e - s <= cfg.max_clip_len);
        }
    }

    #[test]
    fn split_boundary_cases() {
        let cfg = TrackerConfig::default();
        let p16 = ClipPartition::new(vec![0], 16).unwrap();
        assert_eq!(split_long_clips(&p16, &cfg).unwrap().keyframes, vec![0]);
        let p2 = ClipPartition::new(vec![0], 2).unwrap();
        assert_eq!(split_long_clips(&p2, &cfg).unwrap().keyframes, vec![0]);
    }

    #[test]
    fn static_video_tracks_identically() {
        let v = fixture(SceneKind::StaticBlocks, 8);
        let seed = segment_frame(&v.frames[0], &SegmenterConfig::default()).unwrap();
        let ct = track_clip(&v, &seed, (0, 8), &TrackerConfig::default()).unwrap();
        for m in &ct.maps {
            assert_eq!(m, &seed);
        }
    }

    #[test]
    fn pan_tracks_match_shift_oracle() {
        let v = fixture(SceneKind::CameraPan, 8);
        let seed = segment_frame(&v.frames[0], &SegmenterConfig::default()).unwrap();
        let ct = track_clip(&v, &seed, (0, 8), &TrackerConfig::default()).unwrap();
        let (w, h) = (v.width(), v.height());
        for t in 0..8 {
            let dx = (PAN_STEP * t) % w;
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(
                        ct.maps[t].get((x + dx) % w, y),
                        seed.get(x, y),
                        "frame {t} pixel ({x},{y})"
                    );
                }
            }
        }
    }

    #[test]
    fn single_label_seed_stays_all_ones() {
        let v = fixture(SceneKind::MovingBlocks, 6);
        let seed = LabelMap::new(64, 64, vec![1; 64 * 64]).unwrap();
        let ct = track_clip(&v, &seed, (0, 6), &TrackerConfig::default()).unwrap();
        for m in &ct.maps {
            assert!(m.labels.iter().all(|&l| l == 1));
        }
    }

    #[test]
    fn parallel_matches_single_worker() {
        let v = fixture(SceneKind::MovingBlocks, 24);
        let cfg = TrackerConfig::default();
        let scfg = SegmenterConfig::default();
        let partition = split_long_clips(&ClipPartition::new(vec![0], 24).unwrap(), &cfg).unwrap();
        let seeds: Vec<(usize, LabelMap)> = partition
            .clips()
            .iter()
            .map(|&(s, _)| (s, segment_frame(&v.frames[s], &scfg).unwrap()))
            .collect();
        let one = track_clips_parallel(&v, &seeds, &partition, &cfg, 1).unwrap();
        let eight = track_clips_parallel(&v, &seeds, &partition, &cfg, 8).unwrap();
        assert_eq!(one, eight);
        assert_eq!(one.len(), partition.clips().len());
        for (ct, (s, e)) in one.iter().zip(partition.clips()) {
            assert_eq!((ct.start, ct.end), (s, e));
        }
    }

    #[test]
    fn iou_exactly_at_threshold_does_not_match() {
        // 20x25 vs 20x20 rectangles with a 20x20 overlap: IoU = 400/500 = 0.8
        let (w, h) = (30, 40);
        let mut a = vec![1u32; w * h];
        let mut b = vec![1u32; w * h];
        for y in 0..25 {
            for x in 0..20 {
                a[y * w + x] = 2;
            }
        }
        for y in 0..20 {
            for x in 0..20 {
                b[y * w + x] = 2;
            }
        }
        let ma = LabelMap::new(w, h, a).unwrap();
        let mb = LabelMap::new(w, h, b).unwrap();
        let am = RleMask::from_label(&ma, 2).unwrap();
        let bm = RleMask::from_label(&mb, 2).unwrap();
        assert!((am.iou(&bm) - 0.8).abs() < 1e-12);
        let pairs = match_labels(&ma, &mb, 0.8);
        assert!(!pairs.contains(&(2, 2)), "IoU == threshold must not match");
    }

    #[test]
    fn identical_maps_match_fully() {
        let v = fixture(SceneKind::StaticBlocks, 2);
        let seed = segment_frame(&v.frames[0], &SegmenterConfig::default()).unwrap();
        let pairs = match_labels(&seed, &seed, 0.8);
        let k = seed.label_count() as u32;
        assert_eq!(pairs.len(), k as usize);
        for l in 1..=k {
            assert!(pairs.contains(&(l, l)));
        }
    }

    #[test]
    fn disjoint_masks_no_match() {
        let mut a = vec![1u32; 64];
        let mut b = vec![1u32; 64];
        for i in 0..16 {
            a[i] = 2;
            b[48 + i] = 2;
        }
        let ma = LabelMap::new(8, 8, a).unwrap();
        let mb = LabelMap::new(8, 8, b).unwrap();
        let pairs = match_labels(&ma, &mb, 0.8);
        assert!(!pairs.contains(&(2, 2)));
    }

    #[test]
    fn assemble_single_clip() {
        let v = fixture(SceneKind::StaticBlocks, 4);
        let seed = segment_frame(&v.frames[0], &SegmenterConfig::default()).unwrap();
        let ct = track_clip(&v, &seed, (0, 4), &TrackerConfig::default()).unwrap();
        let set = assemble_trajectories(&[ct], &[]).unwrap();
        assert_eq!(set.token_count(), seed.label_count());
        assert!(set.trajectories.iter().all(|t| t.span() == (0..4)));
    }

    #[test]
    fn assemble_two_clips_fully_matched() {
        let v = fixture(SceneKind::StaticBlocks, 8);
        let cfg = TrackerConfig::default();
        let seed = segment_frame(&v.frames[0], &SegmenterConfig::default()).unwrap();
        let a = track_clip(&v, &seed, (0, 4), &cfg).unwrap();
        let b = track_clip(&v, &seed, (4, 8), &cfg).unwrap();
        let merge = merge_consecutive(&a, &seed, &v, &cfg).unwrap();
        assert_eq!(merge.pairs.len(), seed.label_count());
        let set = assemble_trajectories(&[a, b], &[merge]).unwrap();
        assert_eq!(set.token_count(), seed.label_count());
        assert!(set.trajectories.iter().all(|t| t.span() == (0..8)));
    }

    #[test]
    fn assemble_unmatched_labels_split() {
        // 2 clips of 1 frame each, K=2 per clip, only label 1 matched:
        // 3 trajectories, the unmatched pair having disjoint spans
        let half = |swap: bool| {
            let mut l = vec![1u32; 16];
            for y in 0..4 {
                for x in 2..4 {
                    l[y * 4 + x] = 2;
                }
            }
            if swap {
                for v in &mut l {
                    *v = 3 - *v;
                }
            }
            LabelMap::new(4, 4, l).unwrap()
        };
        let m0 = half(false);
        let m1 = half(false);
        let a = ClipTrack { start: 0, end: 1, maps: vec![m0] };
        let b = ClipTrack { start: 1, end: 2, maps: vec![m1.clone()] };
        let merge = MergeDecision {
            pairs: vec![(1, 1)],
            propagated: m1,
        };
        let set = assemble_trajectories(&[a, b], &[merge]).unwrap();
        assert_eq!(set.token_count(), 3);
        let spans: Vec<_> = set.trajectories.iter().map(|t| t.span()).collect();
        assert!(spans.contains(&(0..2)));
        assert!(spans.contains(&(0..1)));
        assert!(spans.contains(&(1..2)));
    }

    #[test]
    fn non_injective_merges_rejected() {
        let m = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let a = ClipTrack { start: 0, end: 1, maps: vec![m.clone()] };
        let b = ClipTrack { start: 1, end: 2, maps: vec![m.clone()] };
        let merge = MergeDecision {
            pairs: vec![(1, 1), (1, 2)],
            propagated: m,
        };
        assert!(assemble_trajectories(&[a, b], &[merge]).is_err());
    }

    #[test]
    fn moving_blocks_panoptic_every_frame() {
        let v = fixture(SceneKind::MovingBlocks, 12);
        let seed = segment_frame(&v.frames[0], &SegmenterConfig::default()).unwrap();
        let ct = track_clip(&v, &seed, (0, 12), &TrackerConfig::default()).unwrap();
        for (t, m) in ct.maps.iter().enumerate() {
            m.validate().unwrap_or_else(|e| panic!("frame {t}: {e}"));
            assert_eq!(m.label_count(), seed.label_count(), "frame {t}");
        }
    }
}
