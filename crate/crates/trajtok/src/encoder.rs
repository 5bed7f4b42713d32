//! Two-branch trajectory encoder: a small strided convolutional pyramid
//! produces per-frame feature maps; each trajectory's masks pool those maps
//! into per-frame appearance vectors while its boxes are sinusoidally
//! encoded; each branch is summarized by a one-query perceiver resampler
//! with rotary frame indices; the branch sum is projected to model width.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::store::{BBox, RleMask, TrajectorySet};
use crate::video::{Frame, VideoClip};

/// Intermediate nonlinearity for MLPs; `Identity` lets linear-algebra
/// oracles check the stack exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Feature width shared by both branches.
    pub d_f: usize,
    /// Feature grid side; the conv input side is 4x this.
    pub grid_side: usize,
    /// Pyramid stage count; stage s has grid side `grid_side >> s`.
    pub stages: usize,
    /// Channel width of each pyramid stage.
    pub stage_widths: Vec<usize>,
    pub heads: usize,
    pub resampler_layers: usize,
    pub latent_queries: usize,
    /// Model width of the output token.
    pub d_m: usize,
    /// Pooling epsilon guarding empty masks.
    pub eps: f64,
    /// Sinusoidal frequency bands per box coordinate.
    pub bands: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_f: 64,
            grid_side: 56,
            stages: 4,
            stage_widths: vec![64, 128, 256, 512],
            heads: 8,
            resampler_layers: 1,
            latent_queries: 1,
            d_m: 1024,
            eps: 1e-6,
            bands: 8,
            activation: Activation::Silu,
        }
    }
}

impl EncoderConfig {
    /// A shrunk configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            d_f: 8,
            grid_side: 8,
            stages: 2,
            stage_widths: vec![4, 6],
            heads: 2,
            resampler_layers: 1,
            latent_queries: 1,
            d_m: 16,
            eps: 1e-6,
            bands: 1,
            activation: Activation::Silu,
        }
    }

    pub fn input_side(&self) -> usize {
        self.grid_side * 4
    }

    pub fn head_dim(&self) -> usize {
        self.d_f / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if 4 * 2 * self.bands != self.d_f {
            return Err(Error::Config(format!(
                "4 coords x 2 functions x {} bands != feature width {}",
                self.bands, self.d_f
            )));
        }
        if self.heads == 0 || !self.d_f.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature width {} not divisible by {} heads",
                self.d_f, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("head width must be even for rotary".into()));
        }
        if self.stages == 0 || self.stages != self.stage_widths.len() {
            return Err(Error::Config("stage widths must match stage count".into()));
        }
        if self.stages > 1 && !self.grid_side.is_multiple_of(1 << (self.stages - 1)) {
            return Err(Error::Config(format!(
                "grid side {} not divisible through {} stages",
                self.grid_side, self.stages
            )));
        }
        if self.resampler_layers != 1 || self.latent_queries != 1 {
            return Err(Error::Config(
                "only one resampler layer with one latent query is supported".into(),
            ));
        }
        if self.d_m == 0 || self.eps <= 0.0 {
            return Err(Error::Config("model width and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors, ordered for stable iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Bind every tensor as a tape leaf; returns name -> node.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    uniform_init_gain(rng, rows, cols, fan_in, 1.0)
}

fn uniform_init_gain(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    gain: f64,
) -> Tensor {
    let bound = gain / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor { rows, cols, data }
}

fn init_resampler_branch(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    p.insert(&format!("{prefix}.query"), uniform_init(rng, 1, d, d));
    for name in ["wq", "wk", "wv", "wo"] {
        p.insert(&format!("{prefix}.{name}"), uniform_init(rng, d, d, d));
        p.insert(&format!("{prefix}.b{}", &name[1..]), Tensor::zeros(1, d));
    }
    p.insert(&format!("{prefix}.ffn.w1"), uniform_init(rng, d, d, d));
    p.insert(&format!("{prefix}.ffn.b1"), Tensor::zeros(1, d));
    p.insert(&format!("{prefix}.ffn.w2"), uniform_init(rng, d, d, d));
    p.insert(&format!("{prefix}.ffn.b2"), Tensor::zeros(1, d));
}

/// Initialize all encoder parameters from a seed.
pub fn init_encoder_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::default();
    let mut in_c = 3;
    for (s, &out_c) in cfg.stage_widths.iter().enumerate() {
        // gain > 1 keeps pooled appearance features on the same scale as
        // the O(1) sinusoidal position encodings, so neither branch drowns
        // the other at initialization
        let fan = in_c * 9;
        p.insert(
            &format!("conv{s}.weight"),
            uniform_init_gain(&mut rng, out_c, fan, fan, 3.0),
        );
        p.insert(&format!("conv{s}.bias"), Tensor::zeros(out_c, 1));
        p.insert(
            &format!("proj{s}.weight"),
            uniform_init_gain(&mut rng, out_c, cfg.d_f, out_c, 3.0),
        );
        p.insert(&format!("proj{s}.bias"), Tensor::zeros(1, cfg.d_f));
        in_c = out_c;
    }
    init_resampler_branch(&mut p, &mut rng, "app", cfg.d_f);
    init_resampler_branch(&mut p, &mut rng, "pos", cfg.d_f);
    p.insert("token.w1", uniform_init(&mut rng, cfg.d_f, cfg.d_m, cfg.d_f));
    p.insert("token.b1", Tensor::zeros(1, cfg.d_m));
    p.insert("token.w2", uniform_init(&mut rng, cfg.d_m, cfg.d_m, cfg.d_m));
    p.insert("token.b2", Tensor::zeros(1, cfg.d_m));
    Ok(p)
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Silu => tape.silu(x),
        Activation::Identity => x,
    }
}

/// Convert a square frame to a (3, side^2) tensor in [0,1], bilinearly
/// resized to the configured conv input side.
pub fn frame_to_tensor(tape: &mut Tape, frame: &Frame, input_side: usize) -> Result<Var> {
    if frame.width != frame.height {
        return Err(Error::Config(format!(
            "encoder requires square frames, got {}x{}",
            frame.width, frame.height
        )));
    }
    let side = frame.width;
    let mut data = vec![0.0; 3 * side * side];
    for i in 0..side * side {
        for c in 0..3 {
            data[c * side * side + i] = frame.pixels[i * 3 + c] as f64 / 255.0;
        }
    }
    let raw = tape.leaf(Tensor::new(3, side * side, data)?);
    if side == input_side {
        Ok(raw)
    } else {
        tape.bilinear_resize(raw, side, input_side)
    }
}

/// Run the convolutional pyramid on one frame: every stage is projected to
/// feature width, resized to the shared grid, and summed. Output shape is
/// (grid^2, d_f), one feature row per grid cell.
pub fn extract_features(
    tape: &mut Tape,
    frame: &Frame,
    params: &BTreeMap<String, Var>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    cfg.validate()?;
    let pvar = |name: &str| -> Result<Var> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    };
    let mut x = frame_to_tensor(tape, frame, cfg.input_side())?;
    let mut side = cfg.input_side();
    let mut sum: Option<Var> = None;
    for s in 0..cfg.stages {
        let stride = if s == 0 { 4 } else { 2 };
        let w = pvar(&format!("conv{s}.weight"))?;
        let b = pvar(&format!("conv{s}.bias"))?;
        let y = tape.conv2d(x, w, side, side, 3, stride, 1)?;
        let y = tape.add_col_broadcast(y, b)?;
        let y = activate(tape, y, cfg.activation);
        side = (side + 2 - 3) / stride + 1;
        x = y;
        // project channels to d_f: (c, side^2) -> (side^2, c) @ (c, d_f)
        let xt = tape.transpose(x);
        let pw = pvar(&format!("proj{s}.weight"))?;
        let pb = pvar(&format!("proj{s}.bias"))?;
        let proj = tape.linear(xt, pw, pb)?;
        let proj_cm = tape.transpose(proj); // (d_f, side^2)
        let resized = if side == cfg.grid_side {
            proj_cm
        } else {
            tape.bilinear_resize(proj_cm, side, cfg.grid_side)?
        };
        sum = Some(match sum {
            None => resized,
            Some(acc) => tape.add(acc, resized)?,
        });
    }
    let total = sum.expect("at least one stage");
    Ok(tape.transpose(total)) // (grid^2, d_f)
}

/// Downsample a full-resolution mask to the feature grid: a cell is set iff
/// the trajectory owns at least half of the cell's covered pixels (ties
/// toward set, so small objects survive).
pub fn downsample_mask(mask: &RleMask, grid_side: usize) -> Vec<bool> {
    let bits = mask.to_bits();
    let (w, h) = (mask.width, mask.height);
    let mut out = vec![false; grid_side * grid_side];
    for gy in 0..grid_side {
        let y0 = gy * h / grid_side;
        let y1 = ((gy + 1) * h / grid_side).max(y0 + 1).min(h);
        for gx in 0..grid_side {
            let x0 = gx * w / grid_side;
            let x1 = ((gx + 1) * w / grid_side).max(x0 + 1).min(w);
            let mut covered = 0usize;
            let mut owned = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    covered += 1;
                    if bits[y * w + x] {
                        owned += 1;
                    }
                }
            }
            out[gy * grid_side + gx] = 2 * owned >= covered && covered > 0 && owned > 0;
        }
    }
    out
}

/// Mask pooling: f = (Σ M·F) / (Σ M + ε) over the feature grid.
pub fn mask_pool(tape: &mut Tape, featmap: Var, grid_mask: &[bool], eps: f64) -> Result<Var> {
    let cells = tape.value(featmap).rows;
    if grid_mask.len() != cells {
        return Err(Error::DimensionMismatch(cells, 1, grid_mask.len(), 1));
    }
    let row: Vec<f64> = grid_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let area: f64 = row.iter().sum();
    let m = tape.leaf(Tensor::row(row));
    let summed = tape.matmul(m, featmap)?;
    Ok(tape.scale(summed, 1.0 / (area + eps)))
}

/// Sinusoidal box encoding: for each of the 4 coordinates v, the pairs
/// [sin(2^j π v), cos(2^j π v)] for j = 0..bands-1, concatenated.
pub fn sinusoidal_encode(b: &BBox, cfg: &EncoderConfig) -> Tensor {
    let coords = [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64];
    let mut data = Vec::with_capacity(cfg.d_f);
    for v in coords {
        for j in 0..cfg.bands {
            let arg = (1u64 << j) as f64 * std::f64::consts::PI * v;
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::row(data)
}

fn resampler_attention(
    tape: &mut Tape,
    seq: Var,
    positions: &[usize],
    params: &BTreeMap<String, Var>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let pvar = |name: &str| -> Result<Var> {
        let full = format!("{prefix}.{name}");
        params
            .get(&full)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {full}")))
    };
    let query = pvar("query")?;
    let q = {
        let (w, b) = (pvar("wq")?, pvar("bq")?);
        tape.linear(query, w, b)?
    };
    let k = {
        let (w, b) = (pvar("wk")?, pvar("bk")?);
        tape.linear(seq, w, b)?
    };
    let v = {
        let (w, b) = (pvar("wv")?, pvar("bv")?);
        tape.linear(seq, w, b)?
    };
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        // rotary on the query (position 0) and on keys (absolute indices)
        let qh = tape.rotary(qh, &[0])?;
        let kh = tape.rotary(kh, positions)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let (wo, bo) = (pvar("wo")?, pvar("bo")?);
    tape.linear(merged, wo, bo)
}

/// One-query perceiver resampler: multi-head cross-attention over the
/// sequence, then a residual feed-forward block. Output is one d_f row.
pub fn perceiver_resample(
    tape: &mut Tape,
    seq: Var,
    positions: &[usize],
    params: &BTreeMap<String, Var>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let n = tape.value(seq).rows;
    if n == 0 || positions.len() != n {
        return Err(Error::Config(format!(
            "resampler needs a non-empty sequence with one position per row ({n} rows, {} positions)",
            positions.len()
        )));
    }
    let attended = resampler_attention(tape, seq, positions, params, prefix, cfg)?;
    let pvar = |name: &str| -> Result<Var> {
        let full = format!("{prefix}.{name}");
        params
            .get(&full)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {full}")))
    };
    let h = {
        let (w, b) = (pvar("ffn.w1")?, pvar("ffn.b1")?);
        tape.linear(attended, w, b)?
    };
    let h = activate(tape, h, cfg.activation);
    let ffn = {
        let (w, b) = (pvar("ffn.w2")?, pvar("ffn.b2")?);
        tape.linear(h, w, b)?
    };
    tape.add(attended, ffn)
}

/// token = MLP(app + pos): two stacked linear layers to model width.
pub fn assemble_token(
    tape: &mut Tape,
    app: Var,
    pos: Var,
    params: &BTreeMap<String, Var>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let pvar = |name: &str| -> Result<Var> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    };
    let summed = tape.add(app, pos)?;
    let h = tape.linear(summed, pvar("token.w1")?, pvar("token.b1")?)?;
    let h = activate(tape, h, cfg.activation);
    tape.linear(h, pvar("token.w2")?, pvar("token.b2")?)
}

/// Encode every trajectory against precomputed per-frame feature maps
/// (one map node per video frame). Returns one token node per trajectory,
/// ordered by trajectory id.
pub fn encode_trajectories(
    tape: &mut Tape,
    featmaps: &[Var],
    trajs: &TrajectorySet,
    params: &BTreeMap<String, Var>,
    cfg: &EncoderConfig,
) -> Result<Vec<Var>> {
    if featmaps.len() != trajs.frames {
        return Err(Error::Config(format!(
            "{} feature maps for {} frames",
            featmaps.len(),
            trajs.frames
        )));
    }
    let mut order: Vec<&crate::store::Trajectory> = trajs.trajectories.iter().collect();
    order.sort_by_key(|t| t.id);
    let mut tokens = Vec::with_capacity(order.len());
    for traj in order {
        let positions: Vec<usize> = traj.span().collect();
        let mut app_rows = Vec::with_capacity(positions.len());
        let mut pos_rows = Vec::with_capacity(positions.len());
        for (i, &t) in positions.iter().enumerate() {
            let grid_mask = downsample_mask(&traj.masks[i], cfg.grid_side);
            app_rows.push(mask_pool(tape, featmaps[t], &grid_mask, cfg.eps)?);
            pos_rows.push(tape.leaf(sinusoidal_encode(&traj.boxes[i], cfg)));
        }
        let app_seq = tape.concat_rows(&app_rows)?;
        let pos_seq = tape.concat_rows(&pos_rows)?;
        let app = perceiver_resample(tape, app_seq, &positions, params, "app", cfg)?;
        let pos = perceiver_resample(tape, pos_seq, &positions, params, "pos", cfg)?;
        tokens.push(assemble_token(tape, app, pos, params, cfg)?);
    }
    Ok(tokens)
}

/// Build per-frame feature-map nodes for a whole video on one tape.
pub fn video_features(
    tape: &mut Tape,
    video: &VideoClip,
    params: &BTreeMap<String, Var>,
    cfg: &EncoderConfig,
) -> Result<Vec<Var>> {
    video
        .frames
        .iter()
        .map(|f| extract_features(tape, f, params, cfg))
        .collect()
}

/// Inference entry point: one d_m token per trajectory, ordered by id.
/// Per-frame feature maps are computed once on independent tapes (shared
/// across trajectories) up to `workers` at a time; results are identical
/// for any worker count.
pub fn encode_video(
    video: &VideoClip,
    trajs: &TrajectorySet,
    store: &ParamStore,
    cfg: &EncoderConfig,
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    trajs.validate()?;
    if !store.is_finite() {
        return Err(Error::Invariant("non-finite encoder parameters".into()));
    }
    if trajs.frames != video.len() {
        return Err(Error::Config(format!(
            "trajectory set covers {} frames but video has {}",
            trajs.frames,
            video.len()
        )));
    }
    let workers = workers.max(1);
    let compute = |frame: &Frame| -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let fm = extract_features(&mut tape, frame, &params, cfg)?;
        Ok(tape.value(fm).clone())
    };
    let maps: Vec<Tensor> = if workers == 1 || video.len() <= 1 {
        video.frames.iter().map(compute).collect::<Result<_>>()?
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Tensor>>>> =
            (0..video.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(video.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= video.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(compute(&video.frames[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("job completed"))
            .collect::<Result<_>>()?
    };
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let featmaps: Vec<Var> = maps.into_iter().map(|m| tape.leaf(m)).collect();
    let tokens = encode_trajectories(&mut tape, &featmaps, trajs, &params, cfg)?;
    tokens
        .iter()
        .map(|&t| {
            let v = tape.value(t);
            if !v.is_finite() {
                return Err(Error::Invariant("non-finite token".into()));
            }
            Ok(v.data.clone())
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 4] = b"TCKP";

/// Write named parameters: magic, tensor count, then per tensor a
/// length-prefixed name, u32 rows/cols, and little-endian f32 data.
pub fn write_checkpoint<P: AsRef<Path>>(path: P, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(store.tensors.len() as u32).to_le_bytes());
    for (name, t) in &store.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format(*off as u64, "checkpoint truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| Error::format(off as u64, "parameter name is not UTF-8"))?;
        let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut off, rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.insert(&name, Tensor::new(rows, cols, data)?);
    }
    if off != bytes.len() {
        return Err(Error::format(off as u64, "trailing bytes after checkpoint payload"));
    }
    Ok(store)
}
