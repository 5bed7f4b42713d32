//! Panoptic single-frame segmentation behind a pluggable backend interface.
//!
//! The built-in segmenter quantizes colors and takes 4-connected components,
//! then folds regions below a minimum area into the neighbor sharing the
//! longest boundary. Labels are assigned in raster order of each region's
//! first pixel, so identical inputs yield identical label maps.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::video::Frame;

pub const LMAP_MAGIC: &[u8; 4] = b"LMAP";

/// Per-frame panoptic segmentation: every pixel carries exactly one label,
/// and the label set is contiguous {1..K}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Invariant(format!(
                "label buffer length {} != {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Number of distinct labels; valid maps carry exactly {1..K}.
    pub fn label_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Check the panoptic invariants: labels exactly {1..K}, all non-empty.
    pub fn validate(&self) -> Result<()> {
        let k = self.label_count();
        if k == 0 {
            return Err(Error::Invariant("label map has no labels".into()));
        }
        let mut seen = vec![false; k + 1];
        for &l in &self.labels {
            if l == 0 || l as usize > k {
                return Err(Error::Invariant(format!("label {l} outside 1..{k}")));
            }
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=k).find(|&l| !seen[l]) {
            return Err(Error::Invariant(format!("label {missing} empty")));
        }
        Ok(())
    }

    pub fn pixels_of(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum SegmenterBackend {
    /// Color quantization + 4-connected components + small-region merge.
    BuiltinRegion,
    /// Precomputed label maps (`frame_{t:05}.lmap`) from a directory, so real
    /// segmenter outputs slot in without code changes.
    External { dir: PathBuf },
}

#[derive(Debug, Clone)]
pub struct SegmenterConfig {
    pub backend: SegmenterBackend,
    /// Color quantization levels per channel; the granularity knob.
    pub quant_levels: usize,
    /// Regions smaller than this many pixels are merged away.
    pub min_area: usize,
    pub merge_small_regions: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            backend: SegmenterBackend::BuiltinRegion,
            quant_levels: 4,
            min_area: 16,
            merge_small_regions: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quant_levels < 2 {
            return Err(Error::Config("quantization levels must be >= 2".into()));
        }
        if self.min_area < 1 {
            return Err(Error::Config("min area must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn quantize(c: u8, levels: usize) -> u8 {
    ((c as usize * levels) / 256) as u8
}

fn quantize_frame(frame: &Frame, levels: usize) -> Vec<[u8; 3]> {
    (0..frame.width * frame.height)
        .map(|i| {
            [
                quantize(frame.pixels[i * 3], levels),
                quantize(frame.pixels[i * 3 + 1], levels),
                quantize(frame.pixels[i * 3 + 2], levels),
            ]
        })
        .collect()
}

/// 4-connected components of equal quantized color; labels in raster order
/// of each component's first pixel, starting at 1.
fn connected_components(q: &[[u8; 3]], width: usize, height: usize) -> Vec<u32> {
    let mut labels = vec![0u32; width * height];
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..width * height {
        if labels[start] != 0 {
            continue;
        }
        let color = q[start];
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            let mut try_push = |j: usize| {
                if labels[j] == 0 && q[j] == color {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                try_push(i - 1);
            }
            if x + 1 < width {
                try_push(i + 1);
            }
            if y > 0 {
                try_push(i - width);
            }
            if y + 1 < height {
                try_push(i + width);
            }
        }
        next += 1;
    }
    labels
}

/// Merge regions below `min_area` into the 4-adjacent neighbor with the
/// longest shared boundary; ties broken toward the smaller label id.
/// Smallest regions are folded first (area, then label id).
fn merge_small_regions(labels: &mut [u32], width: usize, height: usize, min_area: usize) {
    loop {
        let k = labels.iter().copied().max().unwrap_or(0) as usize;
        if k <= 1 {
            return;
        }
        let mut area = vec![0usize; k + 1];
        for &l in labels.iter() {
            area[l as usize] += 1;
        }
        let victim = (1..=k)
            .filter(|&l| area[l] > 0 && area[l] < min_area)
            .min_by_key(|&l| (area[l], l));
        let Some(victim) = victim else { return };
        // boundary length against each 4-adjacent neighbor region
        let mut shared = vec![0usize; k + 1];
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if labels[i] != victim as u32 {
                    continue;
                }
                let mut count = |j: usize| {
                    let n = labels[j] as usize;
                    if n != victim {
                        shared[n] += 1;
                    }
                };
                if x > 0 {
                    count(i - 1);
                }
                if x + 1 < width {
                    count(i + 1);
                }
                if y > 0 {
                    count(i - width);
                }
                if y + 1 < height {
                    count(i + width);
                }
            }
        }
        let target = (1..=k)
            .filter(|&l| shared[l] > 0)
            .max_by(|&a, &b| shared[a].cmp(&shared[b]).then(b.cmp(&a)));
        let Some(target) = target else { return };
        for l in labels.iter_mut() {
            if *l == victim as u32 {
                *l = target as u32;
            }
        }
    }
}

/// Renumber labels to a contiguous {1..K} in raster order of each region's
/// first pixel, preserving the partition. Idempotent.
pub fn relabel_contiguous(map: &LabelMap) -> LabelMap {
    let mut remap = std::collections::HashMap::new();
    let mut next = 1u32;
    let mut labels = Vec::with_capacity(map.labels.len());
    for &l in &map.labels {
        let r = *remap.entry(l).or_insert_with(|| {
            let v = next;
            next += 1;
            v
        });
        labels.push(r);
    }
    LabelMap {
        width: map.width,
        height: map.height,
        labels,
    }
}

/// Built-in panoptic segmentation of one frame.
pub fn segment_frame(frame: &Frame, cfg: &SegmenterConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let q = quantize_frame(frame, cfg.quant_levels);
    let mut labels = connected_components(&q, frame.width, frame.height);
    if cfg.merge_small_regions {
        merge_small_regions(&mut labels, frame.width, frame.height, cfg.min_area);
    }
    let map = LabelMap::new(frame.width, frame.height, labels)?;
    let map = relabel_contiguous(&map);
    map.validate()?;
    Ok(map)
}

/// Segmenter abstraction so external (e.g. learned) backends can replace the
/// built-in one per frame index.
pub trait Segmenter: Sync {
    fn segment(&self, frame: &Frame, frame_idx: usize) -> Result<LabelMap>;
}

pub struct ConfiguredSegmenter {
    pub cfg: SegmenterConfig,
}

impl Segmenter for ConfiguredSegmenter {
    fn segment(&self, frame: &Frame, frame_idx: usize) -> Result<LabelMap> {
        match &self.cfg.backend {
            SegmenterBackend::BuiltinRegion => segment_frame(frame, &self.cfg),
            SegmenterBackend::External { dir } => {
                let path = dir.join(format!("frame_{frame_idx:05}.lmap"));
                let map = read_lmap(&path)?;
                if map.width != frame.width || map.height != frame.height {
                    return Err(Error::DimensionMismatch(
                        frame.width,
                        frame.height,
                        map.width,
                        map.height,
                    ));
                }
                let map = relabel_contiguous(&map);
                map.validate()?;
                Ok(map)
            }
        }
    }
}

pub fn read_lmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    let mut data = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut data)?;
    if data.len() < 16 {
        return Err(Error::format(data.len() as u64, "truncated lmap header"));
    }
    if &data[0..4] != LMAP_MAGIC {
        return Err(Error::format(0, "bad magic, expected LMAP"));
    }
    let rd = |at: usize| u32::from_le_bytes(data[at..at + 4].try_into().unwrap());
    let (w, h, k) = (rd(4) as usize, rd(8) as usize, rd(12) as usize);
    let need = 16 + w * h * 4;
    if data.len() != need {
        return Err(Error::format(
            data.len().min(need) as u64,
            format!("lmap payload length {} != {}", data.len() - 16, w * h * 4),
        ));
    }
    let labels: Vec<u32> = (0..w * h).map(|i| rd(16 + i * 4)).collect();
    let map = LabelMap::new(w, h, labels)?;
    if map.label_count() != k {
        return Err(Error::Invariant(format!(
            "header K={k} but map holds {} labels",
            map.label_count()
        )));
    }
    Ok(map)
}

pub fn write_lmap(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    out.write_all(LMAP_MAGIC)?;
    out.write_all(&(map.width as u32).to_le_bytes())?;
    out.write_all(&(map.height as u32).to_le_bytes())?;
    out.write_all(&(map.label_count() as u32).to_le_bytes())?;
    for &l in &map.labels {
        out.write_all(&l.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}
