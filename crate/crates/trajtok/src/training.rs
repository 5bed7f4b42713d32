//! Toy contrastive training: a two-block transformer over trajectory tokens
//! with a learned readout token gives the video embedding; a
//! mean-of-embeddings text tower gives the caption embedding; both train
//! jointly against a symmetric InfoNCE loss with a learnable temperature.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{
    encode_trajectories, init_encoder_params, video_features, Activation, EncoderConfig,
    ParamStore,
};
use crate::error::{Error, Result};
use crate::pipeline::{generate_trajectories, PipelineConfig};
use crate::store::TrajectorySet;
use crate::video::{load_raw_video, write_raw_video, Frame, VideoClip};

/// Vocabulary for the toy captions: four count words then four color words.
pub const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];
pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const VOCAB_SIZE: usize = COUNT_WORDS.len() + COLOR_WORDS.len();

/// Colors at 4-level quantization bucket centers, distinct from the dark
/// background, so the built-in segmenter sees stable regions.
const TOY_COLORS: [[u8; 3]; 4] = [
    [224, 32, 32],
    [32, 224, 32],
    [32, 32, 224],
    [224, 224, 32],
];

#[derive(Debug, Clone)]
pub struct ToyPair {
    pub name: String,
    pub video: VideoClip,
    /// Token ids: [count word, color word].
    pub caption: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub v2t_acc: f64,
    pub t2v_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub blocks: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Classical SGD momentum; 0 disables it.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::tiny(),
            blocks: 2,
            steps: 200,
            lr: 0.05,
            seed: 0,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
            grad_clip: 1.0,
            momentum: 0.9,
        }
    }
}

/// Render `count` same-colored blocks on a dark background: a static
/// two-frame video separable by object count and color.
fn toy_video(count: usize, color: [u8; 3], side: usize, frames: usize) -> Result<VideoClip> {
    let mut frame = Frame::filled(side, side, [32, 32, 32]);
    let cell = side / 2;
    for i in 0..count {
        let (cx, cy) = (i % 2, i / 2);
        let (x0, y0) = (cx * cell + 3, cy * cell + 3);
        for y in y0..y0 + cell - 6 {
            for x in x0..x0 + cell - 6 {
                frame.set(x, y, color);
            }
        }
    }
    VideoClip::new(vec![frame; frames], 8)
}

/// The 16-pair toy dataset: all (count, color) combinations of 1..=4 blocks
/// in 4 colors, captioned by their count and color words.
pub fn build_toy_dataset(side: usize, frames: usize) -> Result<Vec<ToyPair>> {
    let mut pairs = Vec::with_capacity(16);
    for count in 1..=COUNT_WORDS.len() {
        for (k, &color) in TOY_COLORS.iter().enumerate() {
            pairs.push(ToyPair {
                name: format!("pair_c{count}_k{k}"),
                video: toy_video(count, color, side, frames)?,
                caption: vec![count - 1, COUNT_WORDS.len() + k],
            });
        }
    }
    Ok(pairs)
}

/// Write the dataset as `.rvid` files whose names encode the captions.
pub fn write_fixtures<P: AsRef<Path>>(dir: P, pairs: &[ToyPair]) -> Result<()> {
    std::fs::create_dir_all(&dir)?;
    for p in pairs {
        write_raw_video(dir.as_ref().join(format!("{}.rvid", p.name)), &p.video)?;
    }
    Ok(())
}

/// Load a fixture directory written by `write_fixtures`, decoding captions
/// from the `pair_c{count}_k{color}` file names.
pub fn load_fixtures<P: AsRef<Path>>(dir: P) -> Result<Vec<ToyPair>> {
    let mut pairs = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(&dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "rvid"))
        .collect();
    entries.sort();
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("unreadable fixture name {path:?}")))?
            .to_string();
        let rest = stem
            .strip_prefix("pair_c")
            .ok_or_else(|| Error::Config(format!("fixture {stem} does not match pair_c*_k*")))?;
        let (count_s, color_s) = rest
            .split_once("_k")
            .ok_or_else(|| Error::Config(format!("fixture {stem} does not match pair_c*_k*")))?;
        let count: usize = count_s
            .parse()
            .map_err(|_| Error::Config(format!("bad count in fixture {stem}")))?;
        let color: usize = color_s
            .parse()
            .map_err(|_| Error::Config(format!("bad color in fixture {stem}")))?;
        if !(1..=COUNT_WORDS.len()).contains(&count) || color >= COLOR_WORDS.len() {
            return Err(Error::Config(format!("caption out of range in {stem}")));
        }
        pairs.push(ToyPair {
            name: stem,
            video: load_raw_video(&path)?,
            caption: vec![count - 1, COUNT_WORDS.len() + color],
        });
    }
    if pairs.is_empty() {
        return Err(Error::Config("no .rvid fixtures found".into()));
    }
    Ok(pairs)
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows {
        let norm: f64 = (0..t.cols).map(|c| t.at(r, c).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Invariant(format!(
                "{what} row {r} has norm {norm}, expected 1 within 1e-4"
            )));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over unit-normalized embeddings: the mean of row-wise
/// and column-wise cross-entropy of similarities/τ against diagonal targets.
pub fn clip_loss(video_embs: &Tensor, text_embs: &Tensor, tau: f64) -> Result<LossReport> {
    if video_embs.shape() != text_embs.shape() || video_embs.rows < 2 {
        return Err(Error::Config(format!(
            "need matching batches of >= 2 embeddings, got {:?} and {:?}",
            video_embs.shape(),
            text_embs.shape()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    check_unit_rows(video_embs, "video embedding")?;
    check_unit_rows(text_embs, "text embedding")?;
    let b = video_embs.rows;
    let d = video_embs.cols;
    let mut logits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let sim: f64 = (0..d).map(|c| video_embs.at(i, c) * text_embs.at(j, c)).sum();
            logits[i * b + j] = sim / tau;
        }
    }
    let ce = |row_major: bool| -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let get = |j: usize| {
                if row_major {
                    logits[i * b + j]
                } else {
                    logits[j * b + i]
                }
            };
            let mx = (0..b).map(get).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..b).map(|j| (get(j) - mx).exp()).sum::<f64>().ln();
            total += lse - get(i);
        }
        total / b as f64
    };
    let argmax = |row_major: bool, i: usize| -> usize {
        (0..b)
            .max_by(|&a, &c| {
                let (va, vc) = if row_major {
                    (logits[i * b + a], logits[i * b + c])
                } else {
                    (logits[a * b + i], logits[c * b + i])
                };
                va.partial_cmp(&vc).unwrap()
            })
            .unwrap()
    };
    let v2t = (0..b).filter(|&i| argmax(true, i) == i).count() as f64 / b as f64;
    let t2v = (0..b).filter(|&i| argmax(false, i) == i).count() as f64 / b as f64;
    Ok(LossReport {
        loss: 0.5 * (ce(true) + ce(false)),
        v2t_acc: v2t,
        t2v_acc: t2v,
    })
}

/// Graph version of the symmetric InfoNCE loss for backpropagation.
/// `inv_tau` is a (1,1) node holding 1/τ.
pub fn clip_loss_graph(tape: &mut Tape, v: Var, t: Var, inv_tau: Var) -> Result<Var> {
    let tt = tape.transpose(t);
    let sims = tape.matmul(v, tt)?;
    let logits = tape.mul_scalar(sims, inv_tau)?;
    let diag = tape.take_diag(logits)?;
    let lse_rows = tape.logsumexp_rows(logits);
    let row_ce = tape.sub(lse_rows, diag)?;
    let row_loss = tape.mean_all(row_ce);
    let logits_t = tape.transpose(logits);
    let lse_cols = tape.logsumexp_rows(logits_t);
    let col_ce = tape.sub(lse_cols, diag)?;
    let col_loss = tape.mean_all(col_ce);
    let sum = tape.add(row_loss, col_loss)?;
    Ok(tape.scale(sum, 0.5))
}

fn init_train_params(cfg: &TrainConfig) -> Result<ParamStore> {
    let mut p = init_encoder_params(&cfg.encoder, cfg.seed)?;
    let d = cfg.encoder.d_m;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6a74);
    let mut uni = |rows: usize, cols: usize, fan: usize| {
        let bound = 1.0 / (fan as f64).sqrt();
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    };
    p.insert("readout", uni(1, d, d));
    for b in 0..cfg.blocks {
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("blk{b}.{name}"), uni(d, d, d));
            p.insert(&format!("blk{b}.b{}", &name[1..]), Tensor::zeros(1, d));
        }
        p.insert(&format!("blk{b}.ffn.w1"), uni(d, d, d));
        p.insert(&format!("blk{b}.ffn.b1"), Tensor::zeros(1, d));
        p.insert(&format!("blk{b}.ffn.w2"), uni(d, d, d));
        p.insert(&format!("blk{b}.ffn.b2"), Tensor::zeros(1, d));
    }
    p.insert("txt.embed", uni(VOCAB_SIZE, d, d));
    p.insert("txt.proj.w", uni(d, d, d));
    p.insert("txt.proj.b", Tensor::zeros(1, d));
    p.insert("logit_tau", Tensor::scalar(cfg.tau_init));
    Ok(p)
}

fn transformer_block(
    tape: &mut Tape,
    x: Var,
    params: &BTreeMap<String, Var>,
    prefix: &str,
    act: Activation,
) -> Result<Var> {
    let pvar = |name: &str| -> Result<Var> {
        let full = format!("{prefix}.{name}");
        params
            .get(&full)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {full}")))
    };
    let d = tape.value(x).cols;
    let q = {
        let (w, b) = (pvar("wq")?, pvar("bq")?);
        tape.linear(x, w, b)?
    };
    let k = {
        let (w, b) = (pvar("wk")?, pvar("bk")?);
        tape.linear(x, w, b)?
    };
    let v = {
        let (w, b) = (pvar("wv")?, pvar("bv")?);
        tape.linear(x, w, b)?
    };
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let mixed = tape.matmul(weights, v)?;
    let attended = {
        let (w, b) = (pvar("wo")?, pvar("bo")?);
        tape.linear(mixed, w, b)?
    };
    let x = tape.add(x, attended)?;
    let h = {
        let (w, b) = (pvar("ffn.w1")?, pvar("ffn.b1")?);
        tape.linear(x, w, b)?
    };
    let h = match act {
        Activation::Silu => tape.silu(h),
        Activation::Identity => h,
    };
    let ffn = {
        let (w, b) = (pvar("ffn.w2")?, pvar("ffn.b2")?);
        tape.linear(h, w, b)?
    };
    tape.add(x, ffn)
}

/// Video embedding: readout token prepended to the trajectory tokens, run
/// through the transformer blocks; the readout row, L2-normalized.
pub fn video_embedding(
    tape: &mut Tape,
    tokens: &[Var],
    params: &BTreeMap<String, Var>,
    cfg: &TrainConfig,
) -> Result<Var> {
    let readout = *params
        .get("readout")
        .ok_or_else(|| Error::Config("missing parameter readout".into()))?;
    let mut rows = vec![readout];
    rows.extend_from_slice(tokens);
    let mut x = tape.concat_rows(&rows)?;
    for b in 0..cfg.blocks {
        x = transformer_block(tape, x, params, &format!("blk{b}"), cfg.encoder.activation)?;
    }
    // take the readout row via a constant selection vector
    let n = tape.value(x).rows;
    let mut sel = vec![0.0; n];
    sel[0] = 1.0;
    let s = tape.leaf(Tensor::new(1, n, sel)?);
    let row = tape.matmul(s, x)?;
    Ok(tape.l2_normalize_rows(row))
}

/// Text embedding: mean of caption token embeddings, linearly projected
/// and L2-normalized.
pub fn text_embedding(
    tape: &mut Tape,
    caption: &[usize],
    params: &BTreeMap<String, Var>,
) -> Result<Var> {
    let pvar = |name: &str| -> Result<Var> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    };
    let table = pvar("txt.embed")?;
    let embs = tape.embed_rows(table, caption)?;
    let mean = tape.mean_rows(embs);
    let proj = tape.linear(mean, pvar("txt.proj.w")?, pvar("txt.proj.b")?)?;
    Ok(tape.l2_normalize_rows(proj))
}

/// A dataset pair with its precomputed trajectories.
pub struct PreparedPair {
    pub pair: ToyPair,
    pub trajs: TrajectorySet,
}

pub fn prepare_pairs(pairs: Vec<ToyPair>) -> Result<Vec<PreparedPair>> {
    pairs
        .into_iter()
        .map(|pair| {
            let trajs = generate_trajectories(&pair.video, &PipelineConfig::default())?;
            Ok(PreparedPair { pair, trajs })
        })
        .collect()
}

/// Build the full contrastive graph for one step; returns (loss node,
/// normalized video embeddings, normalized text embeddings).
fn batch_graph(
    tape: &mut Tape,
    prepared: &[PreparedPair],
    params: &BTreeMap<String, Var>,
    cfg: &TrainConfig,
) -> Result<(Var, Var, Var)> {
    let mut v_rows = Vec::with_capacity(prepared.len());
    let mut t_rows = Vec::with_capacity(prepared.len());
    for pp in prepared {
        let fms = video_features(tape, &pp.pair.video, params, &cfg.encoder)?;
        let tokens = encode_trajectories(tape, &fms, &pp.trajs, params, &cfg.encoder)?;
        v_rows.push(video_embedding(tape, &tokens, params, cfg)?);
        t_rows.push(text_embedding(tape, &pp.pair.caption, params)?);
    }
    let v = tape.concat_rows(&v_rows)?;
    let t = tape.concat_rows(&t_rows)?;
    let tau = *params
        .get("logit_tau")
        .ok_or_else(|| Error::Config("missing parameter logit_tau".into()))?;
    let inv_tau = tape.recip(tau);
    let loss = clip_loss_graph(tape, v, t, inv_tau)?;
    Ok((loss, v, t))
}

/// Full-batch SGD on the toy dataset. Returns the trained parameters and a
/// per-step trace. Aborts with the offending step index on NaN/Inf.
pub fn train_toy(
    prepared: &[PreparedPair],
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<LossReport>)> {
    if prepared.len() < 2 {
        return Err(Error::Config(format!(
            "contrastive batch needs >= 2 pairs, got {}",
            prepared.len()
        )));
    }
    let mut params = init_train_params(cfg)?;
    let mut velocity: BTreeMap<String, Vec<f64>> = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.data.len()]))
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let pvars = params.bind(&mut tape);
        let (loss, v, t) = batch_graph(&mut tape, prepared, &pvars, cfg)?;
        let tau = params.get("logit_tau")?.data[0];
        let report = clip_loss(tape.value(v), tape.value(t), tau)?;
        if !report.loss.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite loss at step {step}"
            )));
        }
        trace.push(report);
        if cfg.lr != 0.0 {
            let grads = tape.backward(loss)?;
            // clip the global gradient norm: the first steps otherwise
            // collapse the embedding spread before alignment can begin
            let mut scale = 1.0;
            if cfg.grad_clip > 0.0 {
                let total: f64 = pvars
                    .values()
                    .map(|&v| grads[v].data.iter().map(|g| g * g).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if total > cfg.grad_clip {
                    scale = cfg.grad_clip / total;
                }
            }
            for (name, var) in &pvars {
                let g = &grads[*var];
                let p = params.tensors.get_mut(name).expect("bound parameter");
                let vel = velocity.get_mut(name).expect("velocity slot");
                for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(vel.iter_mut()) {
                    *vv = cfg.momentum * *vv + scale * gv;
                    *pv -= cfg.lr * *vv;
                }
            }
            let tau = params.tensors.get_mut("logit_tau").expect("temperature");
            tau.data[0] = tau.data[0].clamp(cfg.tau_min, cfg.tau_max);
        }
        if !params.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite parameters after step {step}"
            )));
        }
    }
    Ok((params, trace))
}

/// Render the trace as CSV: step, loss, v2t_acc, t2v_acc.
pub fn trace_csv(trace: &[LossReport]) -> String {
    let mut out = String::from("step,loss,v2t_acc,t2v_acc\n");
    for (i, r) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{:.6},{:.4},{:.4}\n", r.loss, r.v2t_acc, r.t2v_acc));
    }
    out
}
