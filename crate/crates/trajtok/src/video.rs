//! Raw video loading, writing, and deterministic synthetic scene generation.
//!
//! Videos use the `.rvid` container: a 20-byte little-endian header
//! `[magic "RVID" | u32 width | u32 height | u32 frame_count | u32 fps]`
//! followed by `frame_count * width * height * 3` bytes of interleaved RGB,
//! frame-major. Everything here is bit-exact so downstream stages stay
//! deterministic without codec dependencies.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const RVID_MAGIC: &[u8; 4] = b"RVID";
pub const RVID_HEADER_LEN: u64 = 20;

/// One fixed-resolution 8-bit RGB frame, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("frame dimensions must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Config(format!(
                "pixel buffer length {} != {}x{}x3",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Frame {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Frame) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }
}

/// Ordered frames plus a frame rate. All frames share one resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub fps: u32,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: u32) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("video must contain at least one frame".into()));
        }
        if fps == 0 {
            return Err(Error::Config("fps must be positive".into()));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        for f in &frames {
            if f.width != w || f.height != h {
                return Err(Error::DimensionMismatch(w, h, f.width, f.height));
            }
        }
        Ok(VideoClip { frames, fps })
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: T >= 1
    }
}

/// Uniformly sample `n` frames (midpoint rule: index floor((i+0.5)*T/n)).
/// Returns the clip untouched when `n >= T`.
pub fn sample_uniform(clip: &VideoClip, n: usize) -> Result<VideoClip> {
    if n == 0 {
        return Err(Error::Config("cannot sample zero frames".into()));
    }
    let t = clip.len();
    if n >= t {
        return Ok(clip.clone());
    }
    let frames = (0..n)
        .map(|i| clip.frames[((i as f64 + 0.5) * t as f64 / n as f64) as usize].clone())
        .collect();
    VideoClip::new(frames, clip.fps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    StaticBlocks,
    MovingBlocks,
    HardCut,
    CameraPan,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static-blocks" | "static" => Ok(SceneKind::StaticBlocks),
            "moving-blocks" | "moving" => Ok(SceneKind::MovingBlocks),
            "hard-cut" | "cut" => Ok(SceneKind::HardCut),
            "camera-pan" | "pan" => Ok(SceneKind::CameraPan),
            other => Err(Error::Config(format!("unsupported scene kind: {other}"))),
        }
    }
}

/// Deterministic synthetic scene description. Identical specs yield
/// byte-identical videos, across runs and thread counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub kind: SceneKind,
    pub objects: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

pub const MAX_SYNTH_FRAMES: usize = 256;
pub const MAX_SYNTH_SIDE: usize = 256;

/// Horizontal pan speed for `CameraPan`, in pixels per frame.
pub const PAN_STEP: usize = 2;

/// Block colors sit at the centers of 4-level quantization buckets so the
/// built-in segmenter sees them as stable, distinct regions.
const PALETTE: [[u8; 3]; 8] = [
    [224, 32, 32],
    [32, 224, 32],
    [32, 32, 224],
    [224, 224, 32],
    [224, 32, 224],
    [32, 224, 224],
    [224, 224, 224],
    [160, 96, 32],
];

const BACKGROUND: [u8; 3] = [32, 32, 32];

#[derive(Debug, Clone, Copy)]
struct Block {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    color: [u8; 3],
}

/// Lay out `n` non-overlapping blocks on a grid inside `[0, avail_w) x [0, h)`,
/// jittered by the rng but always with a >= 2px gap to edges and neighbors.
fn place_blocks(n: usize, avail_w: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<Block> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell_w = avail_w / cols;
    let cell_h = height / rows;
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let (cx, cy) = (i % cols, i / cols);
        let max_w = cell_w.saturating_sub(4).max(2);
        let max_h = cell_h.saturating_sub(4).max(2);
        let bw = rng.gen_range(max_w.max(3) * 2 / 3..=max_w);
        let bh = rng.gen_range(max_h.max(3) * 2 / 3..=max_h);
        let jx = rng.gen_range(0..=(cell_w - bw).saturating_sub(4).max(1).min(cell_w - bw));
        let jy = rng.gen_range(0..=(cell_h - bh).saturating_sub(4).max(1).min(cell_h - bh));
        let x = (cx * cell_w + 2 + jx).min(cx * cell_w + cell_w - bw);
        let y = (cy * cell_h + 2 + jy).min(cy * cell_h + cell_h - bh);
        blocks.push(Block {
            x,
            y,
            w: bw,
            h: bh,
            color: PALETTE[i % PALETTE.len()],
        });
    }
    blocks
}

fn render(width: usize, height: usize, blocks: &[Block]) -> Frame {
    let mut frame = Frame::filled(width, height, BACKGROUND);
    for b in blocks {
        for y in b.y..(b.y + b.h).min(height) {
            for x in b.x..(b.x + b.w).min(width) {
                frame.set(x, y, b.color);
            }
        }
    }
    frame
}

fn shift_wrap(frame: &Frame, dx: usize) -> Frame {
    let (w, h) = (frame.width, frame.height);
    let mut out = Frame::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set((x + dx) % w, y, frame.get(x, y));
        }
    }
    out
}

fn invert(frame: &Frame) -> Frame {
    Frame {
        width: frame.width,
        height: frame.height,
        pixels: frame.pixels.iter().map(|&c| 255 - c).collect(),
    }
}

/// Deterministically synthesize a video from a spec.
///
/// Scene kinds:
/// - static-blocks: every frame pixel-identical;
/// - moving-blocks: blocks glide in separate lanes, bouncing off edges;
/// - hard-cut: per-pixel palette inversion at frame T/2;
/// - camera-pan: content translates PAN_STEP px/frame with wrap-around.
pub fn synthesize_video(spec: &SyntheticSpec) -> Result<VideoClip> {
    if spec.frames == 0 || spec.frames > MAX_SYNTH_FRAMES {
        return Err(Error::Config(format!(
            "frame count {} out of range 1..={MAX_SYNTH_FRAMES}",
            spec.frames
        )));
    }
    if spec.width < 8
        || spec.height < 8
        || spec.width > MAX_SYNTH_SIDE
        || spec.height > MAX_SYNTH_SIDE
    {
        return Err(Error::Config(format!(
            "resolution {}x{} out of range 8..={MAX_SYNTH_SIDE}",
            spec.width, spec.height
        )));
    }
    if spec.objects == 0 || spec.objects > PALETTE.len() {
        return Err(Error::Config(format!(
            "object count {} out of range 1..={}",
            spec.objects,
            PALETTE.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h, t) = (spec.width, spec.height, spec.frames);
    let frames = match spec.kind {
        SceneKind::StaticBlocks => {
            let blocks = place_blocks(spec.objects, w, h, &mut rng);
            let f0 = render(w, h, &blocks);
            vec![f0; t]
        }
        SceneKind::HardCut => {
            let blocks = place_blocks(spec.objects, w, h, &mut rng);
            let f0 = render(w, h, &blocks);
            let f1 = invert(&f0);
            let cut = t / 2;
            (0..t).map(|i| if i < cut.max(1) { f0.clone() } else { f1.clone() }).collect()
        }
        SceneKind::CameraPan => {
            // blocks confined to the left half so clip-start shifts that are
            // multiples of w/2 never leave a block straddling the wrap seam
            let blocks = place_blocks(spec.objects, w / 2, h, &mut rng);
            let f0 = render(w, h, &blocks);
            (0..t).map(|i| shift_wrap(&f0, (PAN_STEP * i) % w)).collect()
        }
        SceneKind::MovingBlocks => {
            let lane_h = h / spec.objects;
            let mut blocks = Vec::new();
            let mut vels: Vec<i64> = Vec::new();
            for i in 0..spec.objects {
                let max_s = lane_h.saturating_sub(6).clamp(3, w / 4);
                let side = rng.gen_range(max_s * 2 / 3..=max_s).max(3);
                let x = rng.gen_range(2..=(w - side - 2));
                let y = i * lane_h + (lane_h - side) / 2;
                blocks.push(Block {
                    x,
                    y,
                    w: side,
                    h: side,
                    color: PALETTE[i % PALETTE.len()],
                });
                let speed = rng.gen_range(1..=2i64);
                vels.push(if rng.gen_bool(0.5) { speed } else { -speed });
            }
            let mut frames = Vec::with_capacity(t);
            for _ in 0..t {
                frames.push(render(w, h, &blocks));
                for (b, v) in blocks.iter_mut().zip(vels.iter_mut()) {
                    let nx = b.x as i64 + *v;
                    if nx < 2 || nx as usize + b.w + 2 > w {
                        *v = -*v;
                    } else {
                        b.x = nx as usize;
                    }
                }
            }
            frames
        }
    };
    VideoClip::new(frames, 4)
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

/// Load an `.rvid` file, validating header and payload sizes. Errors carry
/// the byte offset at which the problem was detected.
pub fn load_raw_video(path: impl AsRef<Path>) -> Result<VideoClip> {
    let mut file = std::fs::File::open(path.as_ref())?;
    let mut header = [0u8; RVID_HEADER_LEN as usize];
    let got = {
        let mut n = 0;
        loop {
            let r = file.read(&mut header[n..])?;
            if r == 0 {
                break n;
            }
            n += r;
            if n == header.len() {
                break n;
            }
        }
    };
    if got < header.len() {
        return Err(Error::format(got as u64, "truncated header"));
    }
    if &header[0..4] != RVID_MAGIC {
        return Err(Error::format(0, "bad magic, expected RVID"));
    }
    let (w, h) = (read_u32(&header, 4) as usize, read_u32(&header, 8) as usize);
    let t = read_u32(&header, 12) as usize;
    let fps = read_u32(&header, 16);
    if w == 0 || h == 0 {
        return Err(Error::format(4, "zero frame dimensions"));
    }
    if t == 0 {
        return Err(Error::format(12, "zero frames"));
    }
    if fps == 0 {
        return Err(Error::format(16, "zero fps"));
    }
    let frame_bytes = w * h * 3;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() < t * frame_bytes {
        let whole = payload.len() / frame_bytes;
        return Err(Error::format(
            RVID_HEADER_LEN + (whole * frame_bytes) as u64,
            format!("truncated payload: expected {} frames, found {}", t, whole),
        ));
    }
    if payload.len() > t * frame_bytes {
        return Err(Error::format(
            RVID_HEADER_LEN + (t * frame_bytes) as u64,
            "trailing bytes after declared payload",
        ));
    }
    let frames = payload
        .chunks_exact(frame_bytes)
        .map(|c| Frame::new(w, h, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, fps)
}

pub fn write_raw_video(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    out.write_all(RVID_MAGIC)?;
    out.write_all(&(clip.width() as u32).to_le_bytes())?;
    out.write_all(&(clip.height() as u32).to_le_bytes())?;
    out.write_all(&(clip.len() as u32).to_le_bytes())?;
    out.write_all(&clip.fps.to_le_bytes())?;
    for f in &clip.frames {
        out.write_all(&f.pixels)?;
    }
    out.flush()?;
    Ok(())
}

/// Load frames from a directory of PNG files, sorted by filename.
/// Escape hatch for real data; codecs stay out of scope.
pub fn load_frames_dir(dir: impl AsRef<Path>, fps: u32) -> Result<VideoClip> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    let mut frames = Vec::new();
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| Error::Other(format!("{}: {e}", p.display())))?
            .to_rgb8();
        frames.push(Frame::new(
            img.width() as usize,
            img.height() as usize,
            img.into_raw(),
        )?);
    }
    VideoClip::new(frames, fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SceneKind, objects: usize, frames: usize) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            objects,
            frames,
            width: 64,
            height: 64,
            seed: 7,
        }
    }

    #[test]
    fn rvid_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rvid");
        let clip = VideoClip::new(vec![Frame::filled(8, 8, [1, 2, 3]); 2], 4).unwrap();
        write_raw_video(&p, &clip).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 20 + 2 * 192);
        let loaded = load_raw_video(&p).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.width(), 8);
        assert_eq!(loaded.height(), 8);
    }

    #[test]
    fn rvid_truncation_offset() {
        // header declares T=3 but payload holds 2 frames of 8x8
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rvid");
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(b"RVID").unwrap();
        for v in [8u32, 8, 3, 4] {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
        f.write_all(&vec![0u8; 2 * 192]).unwrap();
        drop(f);
        match load_raw_video(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20 + 2 * 192),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn rvid_zero_frames_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.rvid");
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(b"RVID").unwrap();
        for v in [8u32, 8, 0, 4] {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
        drop(f);
        match load_raw_video(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected zero-frame error, got {other:?}"),
        }
    }

    #[test]
    fn rvid_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rvid");
        let p2 = dir.path().join("b.rvid");
        let clip = synthesize_video(&spec(SceneKind::MovingBlocks, 3, 8)).unwrap();
        write_raw_video(&p1, &clip).unwrap();
        let loaded = load_raw_video(&p1).unwrap();
        write_raw_video(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn static_blocks_frames_identical() {
        let clip = synthesize_video(&spec(SceneKind::StaticBlocks, 4, 16)).unwrap();
        assert_eq!(clip.frames[0], clip.frames[15]);
    }

    #[test]
    fn hard_cut_at_midpoint() {
        let clip = synthesize_video(&spec(SceneKind::HardCut, 4, 16)).unwrap();
        for i in 0..7 {
            assert_eq!(clip.frames[i], clip.frames[i + 1], "pre-cut frame {i}");
        }
        for i in 8..15 {
            assert_eq!(clip.frames[i], clip.frames[i + 1], "post-cut frame {i}");
        }
        assert_ne!(clip.frames[7], clip.frames[8]);
    }

    #[test]
    fn camera_pan_shift_oracle() {
        let clip = synthesize_video(&spec(SceneKind::CameraPan, 3, 8)).unwrap();
        let (w, h) = (clip.width(), clip.height());
        for t in 0..clip.len() {
            let dx = (PAN_STEP * t) % w;
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(
                        clip.frames[t].get((x + dx) % w, y),
                        clip.frames[0].get(x, y),
                        "frame {t} pixel ({x},{y})"
                    );
                }
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        for kind in [
            SceneKind::StaticBlocks,
            SceneKind::MovingBlocks,
            SceneKind::HardCut,
            SceneKind::CameraPan,
        ] {
            let a = synthesize_video(&spec(kind, 4, 12)).unwrap();
            let b = synthesize_video(&spec(kind, 4, 12)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sample_uniform_counts() {
        let clip = synthesize_video(&spec(SceneKind::MovingBlocks, 2, 16)).unwrap();
        let s = sample_uniform(&clip, 4).unwrap();
        assert_eq!(s.len(), 4);
        let all = sample_uniform(&clip, 32).unwrap();
        assert_eq!(all.len(), 16);
    }
}
