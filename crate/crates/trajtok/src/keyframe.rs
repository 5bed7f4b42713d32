//! Key-frame detection: a three-detector ensemble (HSV mean difference,
//! luminance histogram correlation, RGB mean intensity) with a 2-of-3 vote.
//! Detected key frames partition the video into clips.

use crate::error::{Error, Result};
use crate::video::{Frame, VideoClip};

#[derive(Debug, Clone, Copy)]
pub struct KeyframeConfig {
    /// Mean HSV channel difference threshold (detector fires when exceeded).
    pub hsv_threshold: f64,
    /// Luma histogram correlation threshold (fires when correlation falls below).
    pub luma_corr_threshold: f64,
    /// Mean RGB intensity difference threshold (fires when exceeded).
    pub rgb_threshold: f64,
    pub luma_bins: usize,
    pub min_votes: usize,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        KeyframeConfig {
            hsv_threshold: 27.0,
            luma_corr_threshold: 0.15,
            rgb_threshold: 12.0,
            luma_bins: 256,
            min_votes: 2,
        }
    }
}

impl KeyframeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.min_votes) {
            return Err(Error::Config("min_votes must be in {1,2,3}".into()));
        }
        if self.luma_bins < 2 {
            return Err(Error::Config("luma_bins must be >= 2".into()));
        }
        Ok(())
    }
}

/// Strictly increasing key-frame indices (always containing 0) and the
/// half-open clip ranges they induce over `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPartition {
    pub keyframes: Vec<usize>,
    pub len: usize,
}

impl ClipPartition {
    pub fn new(keyframes: Vec<usize>, len: usize) -> Result<Self> {
        if keyframes.first() != Some(&0) {
            return Err(Error::Invariant("keyframes must start at 0".into()));
        }
        if !keyframes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invariant("keyframes must be strictly increasing".into()));
        }
        if keyframes.last().copied().unwrap_or(0) >= len {
            return Err(Error::Invariant("keyframe index out of range".into()));
        }
        Ok(ClipPartition { keyframes, len })
    }

    /// Half-open `[start, end)` clip ranges tiling `[0, len)`.
    pub fn clips(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.keyframes.len());
        for (i, &s) in self.keyframes.iter().enumerate() {
            let e = self.keyframes.get(i + 1).copied().unwrap_or(self.len);
            out.push((s, e));
        }
        out
    }
}

/// RGB -> HSV with all three channels scaled to 0..255 (hue included, so the
/// shared threshold is comparable across channels).
fn rgb_to_hsv_255(rgb: [u8; 3]) -> [f64; 3] {
    let r = rgb[0] as f64 / 255.0;
    let g = rgb[1] as f64 / 255.0;
    let b = rgb[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h_deg / 360.0 * 256.0, s * 255.0, max * 255.0]
}

/// Mean absolute HSV difference over pixels and channels. Hue differences
/// wrap: d_h = min(d, 256 - d).
pub fn hsv_score(prev: &Frame, next: &Frame) -> Result<f64> {
    prev.same_dims(next)?;
    let n = prev.width * prev.height;
    let mut acc = 0.0;
    for i in 0..n {
        let a = rgb_to_hsv_255([
            prev.pixels[i * 3],
            prev.pixels[i * 3 + 1],
            prev.pixels[i * 3 + 2],
        ]);
        let b = rgb_to_hsv_255([
            next.pixels[i * 3],
            next.pixels[i * 3 + 1],
            next.pixels[i * 3 + 2],
        ]);
        let dh = (a[0] - b[0]).abs();
        acc += dh.min(256.0 - dh) + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
    }
    Ok(acc / (3.0 * n as f64))
}

fn luma_histogram(frame: &Frame, bins: usize) -> Vec<f64> {
    let n = frame.width * frame.height;
    let mut hist = vec![0.0f64; bins];
    for i in 0..n {
        let y = 0.299 * frame.pixels[i * 3] as f64
            + 0.587 * frame.pixels[i * 3 + 1] as f64
            + 0.114 * frame.pixels[i * 3 + 2] as f64;
        let bin = ((y * bins as f64 / 256.0) as usize).min(bins - 1);
        hist[bin] += 1.0;
    }
    let total = n as f64;
    for v in &mut hist {
        *v /= total;
    }
    hist
}

/// Pearson correlation of the two normalized Y-channel histograms.
/// Zero-variance cases: 1.0 when the histograms are identical, 0.0 otherwise
/// (different constant frames count as a cut).
pub fn luma_hist_corr(prev: &Frame, next: &Frame, bins: usize) -> Result<f64> {
    prev.same_dims(next)?;
    let a = luma_histogram(prev, bins);
    let b = luma_histogram(next, bins);
    let n = bins as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..bins {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// |mean intensity difference| where intensity averages all channel values.
pub fn rgb_score(prev: &Frame, next: &Frame) -> Result<f64> {
    prev.same_dims(next)?;
    let mean = |f: &Frame| f.pixels.iter().map(|&c| c as f64).sum::<f64>() / f.pixels.len() as f64;
    Ok((mean(prev) - mean(next)).abs())
}

/// Votes cast by the three detectors for a consecutive frame pair.
pub fn detector_votes(prev: &Frame, next: &Frame, cfg: &KeyframeConfig) -> Result<usize> {
    let mut votes = 0;
    if hsv_score(prev, next)? > cfg.hsv_threshold {
        votes += 1;
    }
    if luma_hist_corr(prev, next, cfg.luma_bins)? < cfg.luma_corr_threshold {
        votes += 1;
    }
    if rgb_score(prev, next)? > cfg.rgb_threshold {
        votes += 1;
    }
    Ok(votes)
}

/// Frame t (t >= 1) is a key frame iff at least `min_votes` detectors fire on
/// the (t-1, t) pair. Frame 0 is always a key frame.
pub fn detect_keyframes(video: &VideoClip, cfg: &KeyframeConfig) -> Result<ClipPartition> {
    cfg.validate()?;
    let mut keyframes = vec![0];
    for t in 1..video.len() {
        if detector_votes(&video.frames[t - 1], &video.frames[t], cfg)? >= cfg.min_votes {
            keyframes.push(t);
        }
    }
    ClipPartition::new(keyframes, video.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{synthesize_video, SceneKind, SyntheticSpec};

    fn frame_of(rgb: [u8; 3]) -> Frame {
        Frame::filled(8, 8, rgb)
    }

    // test-side HSV conversion, written from the definition rather than
    // shared with the implementation
    fn oracle_hsv(rgb: [u8; 3]) -> [f64; 3] {
        let (r, g, b) = (rgb[0] as f64, rgb[1] as f64, rgb[2] as f64);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let mut h = if d == 0.0 {
            0.0
        } else if max == r {
            ((g - b) / d) % 6.0
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        } * 60.0;
        if h < 0.0 {
            h += 360.0;
        }
        [h / 360.0 * 256.0, if max == 0.0 { 0.0 } else { d / max * 255.0 }, max]
    }

    fn oracle_hsv_score(a: &Frame, b: &Frame) -> f64 {
        let n = a.width * a.height;
        let mut acc = 0.0;
        for i in 0..n {
            let pa = oracle_hsv([a.pixels[i * 3], a.pixels[i * 3 + 1], a.pixels[i * 3 + 2]]);
            let pb = oracle_hsv([b.pixels[i * 3], b.pixels[i * 3 + 1], b.pixels[i * 3 + 2]]);
            let dh = (pa[0] - pb[0]).abs();
            acc += dh.min(256.0 - dh) + (pa[1] - pb[1]).abs() + (pa[2] - pb[2]).abs();
        }
        acc / (3.0 * n as f64)
    }

    #[test]
    fn hsv_identical_frames_zero() {
        let f = frame_of([120, 30, 200]);
        assert_eq!(hsv_score(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn hsv_one_pixel_changed_matches_oracle() {
        let a = frame_of([255, 0, 0]);
        let mut b = a.clone();
        b.set(3, 3, [255, 255, 255]);
        let got = hsv_score(&a, &b).unwrap();
        let want = oracle_hsv_score(&a, &b);
        assert!((got - want).abs() < 1e-9, "got {got}, oracle {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn hsv_black_vs_white_is_85() {
        let a = frame_of([0, 0, 0]);
        let b = frame_of([255, 255, 255]);
        assert!((hsv_score(&a, &b).unwrap() - 85.0).abs() < 1e-9);
        assert!((oracle_hsv_score(&a, &b) - 85.0).abs() < 1e-9);
    }

    #[test]
    fn luma_identical_frames_one() {
        let v = synthesize_video(&SyntheticSpec {
            kind: SceneKind::StaticBlocks,
            objects: 3,
            frames: 1,
            width: 32,
            height: 32,
            seed: 1,
        })
        .unwrap();
        let f = &v.frames[0];
        assert!((luma_hist_corr(f, f, 256).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn luma_one_hot_histograms_near_negative_recip() {
        // all-Y=16 vs all-Y=235: one-hot histograms at different bins
        let a = frame_of([16, 16, 16]);
        let b = frame_of([235, 235, 235]);
        let got = luma_hist_corr(&a, &b, 256).unwrap();
        let want = -1.0 / 255.0;
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn luma_mirror_invariant() {
        let v = synthesize_video(&SyntheticSpec {
            kind: SceneKind::MovingBlocks,
            objects: 2,
            frames: 1,
            width: 32,
            height: 32,
            seed: 3,
        })
        .unwrap();
        let f = &v.frames[0];
        let mut m = f.clone();
        for y in 0..f.height {
            for x in 0..f.width {
                m.set(f.width - 1 - x, y, f.get(x, y));
            }
        }
        assert!((luma_hist_corr(f, &m, 256).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rgb_score_examples() {
        let f = frame_of([40, 80, 120]);
        assert_eq!(rgb_score(&f, &f).unwrap(), 0.0);
        let red = frame_of([255, 0, 0]);
        let white = frame_of([255, 255, 255]);
        assert!((rgb_score(&red, &white).unwrap() - 170.0).abs() < 1e-9);
    }

    #[test]
    fn rgb_score_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Frame::new(6, 5, (0..6 * 5 * 3).map(|_| rng.gen()).collect()).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let mut sa = 0.0;
        let mut sb = 0.0;
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..3 {
                    sa += a.get(x, y)[c] as f64;
                    sb += b.get(x, y)[c] as f64;
                }
            }
        }
        let want = (sa / 90.0 - sb / 90.0).abs();
        assert!((rgb_score(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn pair_scores_are_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Frame::new(7, 4, (0..7 * 4 * 3).map(|_| rng.gen()).collect()).unwrap()
        };
        for _ in 0..10 {
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(hsv_score(&a, &b).unwrap(), hsv_score(&b, &a).unwrap());
            assert_eq!(
                luma_hist_corr(&a, &b, 256).unwrap(),
                luma_hist_corr(&b, &a, 256).unwrap()
            );
            assert_eq!(rgb_score(&a, &b).unwrap(), rgb_score(&b, &a).unwrap());
        }
    }

    #[test]
    fn static_video_single_keyframe() {
        let v = synthesize_video(&SyntheticSpec {
            kind: SceneKind::StaticBlocks,
            objects: 4,
            frames: 16,
            width: 64,
            height: 64,
            seed: 7,
        })
        .unwrap();
        let p = detect_keyframes(&v, &KeyframeConfig::default()).unwrap();
        assert_eq!(p.keyframes, vec![0]);
        assert_eq!(p.clips(), vec![(0, 16)]);
    }

    #[test]
    fn hard_cut_detected_at_cut() {
        let v = synthesize_video(&SyntheticSpec {
            kind: SceneKind::HardCut,
            objects: 4,
            frames: 16,
            width: 64,
            height: 64,
            seed: 7,
        })
        .unwrap();
        let cfg = KeyframeConfig::default();
        let p = detect_keyframes(&v, &cfg).unwrap();
        assert_eq!(p.keyframes, vec![0, 8]);
        // all three detectors fire on the cut pair
        assert_eq!(detector_votes(&v.frames[7], &v.frames[8], &cfg).unwrap(), 3);
    }

    #[test]
    fn single_vote_is_not_enough() {
        // only the RGB detector fires: a gentle uniform brightening of a
        // gradient image moves mean intensity by 16 (>12) but the broad luma
        // histogram keeps high correlation and mean HSV diff stays ~16/3.
        let grad = |offset: u8| {
            let mut f = Frame::filled(32, 32, [0, 0, 0]);
            for y in 0..32 {
                for x in 0..32 {
                    let v = offset + (x + y) as u8;
                    f.set(x, y, [v, v, v]);
                }
            }
            f
        };
        let a = grad(60);
        let b = grad(76);
        let cfg = KeyframeConfig::default();
        assert!(rgb_score(&a, &b).unwrap() > cfg.rgb_threshold);
        assert!(hsv_score(&a, &b).unwrap() <= cfg.hsv_threshold);
        assert!(luma_hist_corr(&a, &b, cfg.luma_bins).unwrap() >= cfg.luma_corr_threshold);
        let frames = vec![a.clone(), a.clone(), a.clone(), a.clone(), a, b.clone(), b.clone(), b];
        let v = VideoClip::new(frames, 4).unwrap();
        let p2 = detect_keyframes(&v, &cfg).unwrap();
        assert_eq!(p2.keyframes, vec![0]);
        let p1 = detect_keyframes(&v, &KeyframeConfig { min_votes: 1, ..cfg }).unwrap();
        assert_eq!(p1.keyframes, vec![0, 5]);
    }

    #[test]
    fn vote_monotonicity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let frames: Vec<Frame> = (0..6)
            .map(|_| Frame::new(8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let v = VideoClip::new(frames, 4).unwrap();
        let base = KeyframeConfig::default();
        let loose = KeyframeConfig {
            hsv_threshold: base.hsv_threshold / 2.0,
            luma_corr_threshold: base.luma_corr_threshold * 2.0,
            rgb_threshold: base.rgb_threshold / 2.0,
            min_votes: 1,
            ..base
        };
        let kb = detect_keyframes(&v, &base).unwrap().keyframes;
        let kl = detect_keyframes(&v, &loose).unwrap().keyframes;
        for k in &kb {
            assert!(kl.contains(k), "loosening thresholds removed keyframe {k}");
        }
    }

    #[test]
    fn partition_tiles_range() {
        let p = ClipPartition::new(vec![0, 3, 9], 12).unwrap();
        let clips = p.clips();
        assert_eq!(clips, vec![(0, 3), (3, 9), (9, 12)]);
        let covered: usize = clips.iter().map(|(s, e)| e - s).sum();
        assert_eq!(covered, 12);
    }
}
