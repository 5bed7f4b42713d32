//! Trajectory data model and the `.traj` persistent format.
//!
//! A trajectory is one object part's life: a contiguous frame span with one
//! run-length-encoded binary mask and one tight bounding box per frame.
//! Trajectories are a one-time cost per video, so they get a compact,
//! bit-exact on-disk format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::segment::LabelMap;
use crate::video::Frame;

pub const TRAJ_MAGIC: &[u8; 4] = b"TRAJ";

/// Tight axis-aligned box in normalized [0,1] coordinates. A pixel (x,y)
/// occupies [x, x+1) x [y, y+1), so a full-frame mask maps to (0,0,1,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::Invariant(format!(
                "degenerate bbox ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }
}

/// Binary mask as sorted, non-overlapping (start, len) runs over the
/// row-major pixel index space of a width x height frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<(u32, u32)>,
}

impl RleMask {
    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Invariant("mask buffer size mismatch".into()));
        }
        let mut runs = Vec::new();
        let mut i = 0;
        while i < bits.len() {
            if bits[i] {
                let start = i;
                while i < bits.len() && bits[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        Ok(RleMask {
            width,
            height,
            runs,
        })
    }

    pub fn from_label(map: &LabelMap, label: u32) -> Result<Self> {
        let bits: Vec<bool> = map.labels.iter().map(|&l| l == label).collect();
        Self::from_bits(map.width, map.height, &bits)
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.width * self.height];
        for &(s, l) in &self.runs {
            for i in s..s + l {
                bits[i as usize] = true;
            }
        }
        bits
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|&(_, l)| l as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Runs are sorted, non-overlapping, within bounds, and never cross a
    /// row boundary is NOT required (index space is row-major and flat).
    pub fn validate(&self) -> Result<()> {
        let n = (self.width * self.height) as u32;
        let mut prev_end = 0u32;
        for &(s, l) in &self.runs {
            if l == 0 {
                return Err(Error::Invariant("zero-length run".into()));
            }
            if s < prev_end {
                return Err(Error::Invariant("runs overlap or are unsorted".into()));
            }
            if s + l > n {
                return Err(Error::Invariant("run exceeds frame bounds".into()));
            }
            prev_end = s + l;
        }
        Ok(())
    }

    pub fn iou(&self, other: &RleMask) -> f64 {
        // merge-walk over sorted runs
        let mut inter = 0u64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < self.runs.len() && j < other.runs.len() {
            let (s1, l1) = self.runs[i];
            let (s2, l2) = other.runs[j];
            let (e1, e2) = (s1 + l1, s2 + l2);
            let lo = s1.max(s2);
            let hi = e1.min(e2);
            if hi > lo {
                inter += (hi - lo) as u64;
            }
            if e1 <= e2 {
                i += 1;
            } else {
                j += 1;
            }
        }
        let union = self.area() as u64 + other.area() as u64 - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Minimal normalized box containing all set pixels (pixel-extent convention).
pub fn tight_bbox(mask: &RleMask) -> Result<BBox> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let w = mask.width as u32;
    let (mut minx, mut miny, mut maxx, mut maxy) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for &(s, l) in &mask.runs {
        // a run may span multiple rows in the flat index space
        let mut idx = s;
        let end = s + l;
        while idx < end {
            let y = idx / w;
            let row_end = ((y + 1) * w).min(end);
            let x0 = idx % w;
            let x1 = (row_end - 1) % w;
            minx = minx.min(x0);
            maxx = maxx.max(x1);
            miny = miny.min(y);
            maxy = maxy.max(y);
            idx = row_end;
        }
    }
    let (fw, fh) = (mask.width as f32, mask.height as f32);
    BBox::new(
        minx as f32 / fw,
        miny as f32 / fh,
        (maxx + 1) as f32 / fw,
        (maxy + 1) as f32 / fh,
    )
}

/// One sub-object trajectory: contiguous span starting at `start`, one
/// non-empty mask and its tight box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub start: usize,
    pub masks: Vec<RleMask>,
    pub boxes: Vec<BBox>,
}

impl Trajectory {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.masks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks.is_empty() || self.masks.len() != self.boxes.len() {
            return Err(Error::Invariant(format!(
                "trajectory {}: span/mask/box length mismatch",
                self.id
            )));
        }
        for (i, (m, b)) in self.masks.iter().zip(&self.boxes).enumerate() {
            m.validate().map_err(|e| {
                Error::Invariant(format!("trajectory {} frame {}: {e}", self.id, self.start + i))
            })?;
            if m.is_empty() {
                return Err(Error::Invariant(format!(
                    "trajectory {} frame {}: empty mask",
                    self.id,
                    self.start + i
                )));
            }
            let tb = tight_bbox(m)?;
            if tb != *b {
                return Err(Error::Invariant(format!(
                    "trajectory {} frame {}: stored box {:?} != tight box {:?}",
                    self.id,
                    self.start + i,
                    b,
                    tb
                )));
            }
        }
        Ok(())
    }
}

/// All trajectories of one video; N = trajectories.len() is the token count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn token_count(&self) -> usize {
        self.trajectories.len()
    }

    /// Full invariant check: unique ids, per-trajectory consistency, and the
    /// per-frame panoptic partition (masks of active trajectories tile the
    /// frame exactly).
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for t in &self.trajectories {
            if !ids.insert(t.id) {
                return Err(Error::Invariant(format!("duplicate trajectory id {}", t.id)));
            }
            if t.span().end > self.frames {
                return Err(Error::Invariant(format!(
                    "trajectory {} span exceeds video length",
                    t.id
                )));
            }
            t.validate()?;
            for m in &t.masks {
                if m.width != self.width || m.height != self.height {
                    return Err(Error::Invariant(format!(
                        "trajectory {} mask dims mismatch",
                        t.id
                    )));
                }
            }
        }
        for f in 0..self.frames {
            let mut covered = vec![false; self.width * self.height];
            let mut total = 0usize;
            for t in &self.trajectories {
                if !t.span().contains(&f) {
                    continue;
                }
                let m = &t.masks[f - t.start];
                for &(s, l) in &m.runs {
                    total += l as usize;
                    for i in s..s + l {
                        if covered[i as usize] {
                            return Err(Error::Invariant(format!(
                                "panoptic violation at frame {f}: pixel {i} covered twice (trajectory {})",
                                t.id
                            )));
                        }
                        covered[i as usize] = true;
                    }
                }
            }
            if total != self.width * self.height {
                return Err(Error::Invariant(format!(
                    "panoptic violation at frame {f}: covered {total} of {} pixels",
                    self.width * self.height
                )));
            }
        }
        Ok(())
    }
}

/// Treat each segmented region of a single image as a length-one trajectory.
pub fn image_as_trajectory(frame: &Frame, map: &LabelMap) -> Result<TrajectorySet> {
    if frame.width != map.width || frame.height != map.height {
        return Err(Error::DimensionMismatch(
            frame.width,
            frame.height,
            map.width,
            map.height,
        ));
    }
    map.validate()?;
    let mut trajectories = Vec::new();
    for label in 1..=map.label_count() as u32 {
        let mask = RleMask::from_label(map, label)?;
        let bbox = tight_bbox(&mask)?;
        trajectories.push(Trajectory {
            id: label - 1,
            start: 0,
            masks: vec![mask],
            boxes: vec![bbox],
        });
    }
    let set = TrajectorySet {
        width: frame.width,
        height: frame.height,
        frames: 1,
        trajectories,
    };
    set.validate()?;
    Ok(set)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.data.len() {
            return Err(Error::format(self.pos as u64, "truncated traj payload"));
        }
        let v = u32::from_le_bytes(self.data[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
}

/// Read a `.traj` file, validating every invariant; violations name the
/// trajectory id and frame index.
pub fn read_traj(path: impl AsRef<Path>) -> Result<TrajectorySet> {
    let mut data = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut data)?;
    if data.len() < 20 {
        return Err(Error::format(data.len() as u64, "truncated traj header"));
    }
    if &data[0..4] != TRAJ_MAGIC {
        return Err(Error::format(0, "bad magic, expected TRAJ"));
    }
    let mut cur = Cursor {
        data: &data,
        pos: 4,
    };
    let w = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let t = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let id = cur.u32()?;
        let start = cur.u32()? as usize;
        let span_len = cur.u32()? as usize;
        if span_len == 0 {
            return Err(Error::Invariant(format!("trajectory {id}: empty span")));
        }
        let mut masks = Vec::with_capacity(span_len);
        let mut boxes = Vec::with_capacity(span_len);
        for _ in 0..span_len {
            let bbox = BBox {
                x1: cur.f32()?,
                y1: cur.f32()?,
                x2: cur.f32()?,
                y2: cur.f32()?,
            };
            let run_count = cur.u32()? as usize;
            let mut runs = Vec::with_capacity(run_count);
            for _ in 0..run_count {
                let s = cur.u32()?;
                let l = cur.u32()?;
                runs.push((s, l));
            }
            masks.push(RleMask {
                width: w,
                height: h,
                runs,
            });
            boxes.push(bbox);
        }
        trajectories.push(Trajectory {
            id,
            start,
            masks,
            boxes,
        });
    }
    if cur.pos != data.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes in traj file"));
    }
    let set = TrajectorySet {
        width: w,
        height: h,
        frames: t,
        trajectories,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_traj(path: impl AsRef<Path>, set: &TrajectorySet) -> Result<()> {
    set.validate()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    out.write_all(TRAJ_MAGIC)?;
    for v in [
        set.width as u32,
        set.height as u32,
        set.frames as u32,
        set.trajectories.len() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for t in &set.trajectories {
        for v in [t.id, t.start as u32, t.masks.len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for (m, b) in t.masks.iter().zip(&t.boxes) {
            for f in [b.x1, b.y1, b.x2, b.y2] {
                out.write_all(&f.to_le_bytes())?;
            }
            out.write_all(&(m.runs.len() as u32).to_le_bytes())?;
            for &(s, l) in &m.runs {
                out.write_all(&s.to_le_bytes())?;
                out.write_all(&l.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_mask(w: usize, h: usize) -> RleMask {
        RleMask::from_bits(w, h, &vec![true; w * h]).unwrap()
    }

    /// Voronoi-style random panoptic TrajectorySet: each pixel joins the
    /// nearest of k seed points; the partition is constant over all frames.
    pub(crate) fn random_set(rng: &mut ChaCha8Rng) -> TrajectorySet {
        let w = rng.gen_range(4..20usize);
        let h = rng.gen_range(4..20usize);
        let t = rng.gen_range(1..5usize);
        let k = rng.gen_range(1..6usize);
        let seeds: Vec<(usize, usize)> = (0..k)
            .map(|_| (rng.gen_range(0..w), rng.gen_range(0..h)))
            .collect();
        let mut owner = vec![0usize; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut best = (usize::MAX, 0usize);
                for (i, &(sx, sy)) in seeds.iter().enumerate() {
                    let d = sx.abs_diff(x).pow(2) + sy.abs_diff(y).pow(2);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                owner[y * w + x] = best.1;
            }
        }
        let mut trajectories = Vec::new();
        let mut next_id = 0;
        for i in 0..k {
            let bits: Vec<bool> = owner.iter().map(|&o| o == i).collect();
            let mask = RleMask::from_bits(w, h, &bits).unwrap();
            if mask.is_empty() {
                continue; // seed may have been shadowed
            }
            let bbox = tight_bbox(&mask).unwrap();
            trajectories.push(Trajectory {
                id: next_id,
                start: 0,
                masks: vec![mask; t],
                boxes: vec![bbox; t],
            });
            next_id += 1;
        }
        TrajectorySet {
            width: w,
            height: h,
            frames: t,
            trajectories,
        }
    }

    #[test]
    fn tight_bbox_full_frame() {
        let b = tight_bbox(&full_mask(8, 8)).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
    }

    #[test]
    fn tight_bbox_single_pixel() {
        let mut bits = vec![false; 64];
        bits[5 * 8 + 3] = true; // pixel (3,5) in 8x8
        let b = tight_bbox(&RleMask::from_bits(8, 8, &bits).unwrap()).unwrap();
        assert_eq!(b.x1, 3.0 / 8.0);
        assert_eq!(b.y1, 5.0 / 8.0);
        assert_eq!(b.x2, 4.0 / 8.0);
        assert_eq!(b.y2, 6.0 / 8.0);
    }

    #[test]
    fn tight_bbox_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let (w, h) = (rng.gen_range(3..16usize), rng.gen_range(3..16usize));
            let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.3)).collect();
            let mask = RleMask::from_bits(w, h, &bits).unwrap();
            if mask.is_empty() {
                continue;
            }
            // double-loop min/max oracle
            let (mut nx, mut ny, mut mx, mut my) = (w, h, 0usize, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if bits[y * w + x] {
                        nx = nx.min(x);
                        ny = ny.min(y);
                        mx = mx.max(x);
                        my = my.max(y);
                    }
                }
            }
            let b = tight_bbox(&mask).unwrap();
            assert_eq!(b.x1, nx as f32 / w as f32);
            assert_eq!(b.y1, ny as f32 / h as f32);
            assert_eq!(b.x2, (mx + 1) as f32 / w as f32);
            assert_eq!(b.y2, (my + 1) as f32 / h as f32);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let mask = RleMask::from_bits(4, 4, &[false; 16]).unwrap();
        assert!(matches!(tight_bbox(&mask), Err(Error::EmptyMask)));
    }

    #[test]
    fn round_trip_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dir = tempfile::tempdir().unwrap();
        for i in 0..20 {
            let set = random_set(&mut rng);
            let p1 = dir.path().join(format!("a{i}.traj"));
            let p2 = dir.path().join(format!("b{i}.traj"));
            write_traj(&p1, &set).unwrap();
            let loaded = read_traj(&p1).unwrap();
            assert_eq!(loaded, set);
            write_traj(&p2, &loaded).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn overlapping_masks_rejected_naming_frame() {
        let m = full_mask(4, 4);
        let b = tight_bbox(&m).unwrap();
        let set = TrajectorySet {
            width: 4,
            height: 4,
            frames: 1,
            trajectories: vec![
                Trajectory {
                    id: 0,
                    start: 0,
                    masks: vec![m.clone()],
                    boxes: vec![b],
                },
                Trajectory {
                    id: 1,
                    start: 0,
                    masks: vec![m],
                    boxes: vec![b],
                },
            ],
        };
        let err = set.validate().unwrap_err().to_string();
        assert!(err.contains("frame 0"), "error should name the frame: {err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.traj");
        write_traj(&p, &set).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        match read_traj(&p) {
            Err(Error::Format { .. }) | Err(Error::Invariant(_)) => {}
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn image_as_trajectory_examples() {
        let frame = Frame::filled(8, 8, [224, 32, 32]);
        let k1 = LabelMap::new(8, 8, vec![1; 64]).unwrap();
        let set = image_as_trajectory(&frame, &k1).unwrap();
        assert_eq!(set.token_count(), 1);
        assert_eq!(set.trajectories[0].boxes[0], BBox::new(0.0, 0.0, 1.0, 1.0).unwrap());

        let mut labels = vec![1u32; 64];
        for y in 0..8 {
            for x in 4..8 {
                labels[y * 8 + x] = 2;
            }
        }
        let map = LabelMap::new(8, 8, labels).unwrap();
        let set = image_as_trajectory(&frame, &map).unwrap();
        assert_eq!(set.token_count(), 2);
        assert_eq!(set.trajectories[0].boxes[0].x2, 0.5);
        assert_eq!(set.trajectories[1].boxes[0].x1, 0.5);
        assert!(set.trajectories.iter().all(|t| t.span() == (0..1)));
    }

    #[test]
    fn box_mask_consistency_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = random_set(&mut rng);
        for t in &set.trajectories {
            for (m, b) in t.masks.iter().zip(&t.boxes) {
                assert_eq!(tight_bbox(m).unwrap(), *b);
            }
        }
    }
}
