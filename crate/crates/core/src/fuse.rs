//! Inference-time fusion: merge per-query masks into a panoptic map
//! (confidence-ordered painting for things, per-pixel argmax for stuff,
//! stage-0 semantic fallback for unclaimed pixels), gather per-query depth
//! maps through the pixel ownership map, attach track ids, and upsample to
//! input resolution (bilinear for depth, nearest for panoptic).

use crate::assignloss::ClassTable;
use crate::graph::Graph;
use crate::model::Model;
use crate::tracker::{self, TrackMemory};
use ndarray::{Array2, Array3};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum FuseError {
    #[error("owner index {idx} out of range for {n} queries at ({y}, {x})")]
    OwnerOutOfRange { idx: usize, n: usize, y: usize, x: usize },
    #[error(transparent)]
    Feat(#[from] crate::featnet::FeatError),
}

#[derive(Clone, Copy, Debug)]
pub struct FuseThresholds {
    /// Minimum class confidence to keep a query.
    pub keep_conf: f64,
    /// Minimum unpainted fraction of a mask for it to survive painting.
    pub overlap_keep: f64,
    /// Minimum surviving area in feature cells.
    pub min_area: usize,
    /// Association threshold for track matching.
    pub tau: f64,
}

impl Default for FuseThresholds {
    fn default() -> Self {
        // min_area follows the Panoptic-FPN convention rescaled to this
        // input size: their threshold is ~0.2% of the feature area, which
        // is 2 cells of a 16x16 grid (16 cells would delete most valid
        // instances at this scale)
        Self { keep_conf: 0.3, overlap_keep: 0.5, min_area: 2, tau: 0.3 }
    }
}

#[derive(Clone, Debug)]
pub struct KeptQuery {
    pub query: usize,
    pub class: u16,
    pub confidence: f64,
    pub is_thing: bool,
}

/// Feature-resolution merge result. `owner[y][x]` is the owning query
/// index, or -1 where no kept query claimed the pixel.
#[derive(Clone, Debug)]
pub struct MergedPanoptic {
    pub class: Array2<u16>,
    pub owner: Array2<i32>,
    pub kept: Vec<KeptQuery>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

/// Merge final-stage query predictions into a feature-resolution panoptic
/// map. `sem_fallback` supplies the class for unclaimed pixels.
pub fn merge_panoptic(
    class_logits: &Array2<f64>,
    mask_logits: &Array3<f64>,
    sem_fallback: &Array2<u16>,
    table: &ClassTable,
    th: &FuseThresholds,
) -> MergedPanoptic {
    let n = class_logits.nrows();
    let (hf, wf) = (mask_logits.shape()[1], mask_logits.shape()[2]);
    let k = table.num_classes();
    let mut kept: Vec<KeptQuery> = Vec::new();
    for q in 0..n {
        let row: Vec<f64> = class_logits.row(q).iter().copied().collect();
        let probs = softmax(&row);
        let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (c, &p) in probs.iter().take(k).enumerate() {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        if best_p >= th.keep_conf {
            let class = table.class_at(best);
            kept.push(KeptQuery {
                query: q,
                class,
                confidence: best_p,
                is_thing: table.is_thing(class),
            });
        }
    }
    let mut class = Array2::<u16>::zeros((hf, wf));
    let mut owner = Array2::<i32>::from_elem((hf, wf), -1);

    // things: sequential painter in descending confidence
    let mut things: Vec<&KeptQuery> = kept.iter().filter(|k| k.is_thing).collect();
    things.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.query.cmp(&b.query))
    });
    let mut surviving: Vec<usize> = Vec::new();
    for kq in things {
        let mut cells: Vec<(usize, usize)> = Vec::new();
        let mut area = 0usize;
        for y in 0..hf {
            for x in 0..wf {
                if mask_logits[[kq.query, y, x]] > 0.0 {
                    area += 1;
                    if owner[[y, x]] < 0 {
                        cells.push((y, x));
                    }
                }
            }
        }
        if area == 0 {
            continue;
        }
        let unpainted_frac = cells.len() as f64 / area as f64;
        if unpainted_frac < th.overlap_keep || cells.len() < th.min_area {
            continue;
        }
        for (y, x) in cells {
            owner[[y, x]] = kq.query as i32;
            class[[y, x]] = kq.class;
        }
        surviving.push(kq.query);
    }

    // stuff: per-pixel argmax of confidence-weighted mask probability
    let stuff: Vec<&KeptQuery> = kept.iter().filter(|k| !k.is_thing).collect();
    if !stuff.is_empty() {
        let mut stuff_cells: BTreeMap<(u16, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for y in 0..hf {
            for x in 0..wf {
                if owner[[y, x]] >= 0 {
                    continue;
                }
                let mut best: Option<(&KeptQuery, f64)> = None;
                for kq in &stuff {
                    let l = mask_logits[[kq.query, y, x]];
                    if l <= 0.0 {
                        continue;
                    }
                    let p = kq.confidence / (1.0 + (-l).exp());
                    if best.map_or(true, |(_, bp)| p > bp) {
                        best = Some((kq, p));
                    }
                }
                if let Some((kq, _)) = best {
                    stuff_cells
                        .entry((kq.class, kq.query))
                        .or_default()
                        .push((y, x));
                }
            }
        }
        for ((cls, query), cells) in stuff_cells {
            if cells.len() < th.min_area {
                continue;
            }
            for (y, x) in cells {
                owner[[y, x]] = query as i32;
                class[[y, x]] = cls;
            }
        }
    }

    // fallback: stage-0 semantic argmax, no owner
    for y in 0..hf {
        for x in 0..wf {
            if owner[[y, x]] < 0 {
                class[[y, x]] = sem_fallback[[y, x]];
            }
        }
    }
    let kept = kept
        .into_iter()
        .filter(|k| !k.is_thing || surviving.contains(&k.query))
        .collect();
    MergedPanoptic { class, owner, kept }
}

/// Pure per-pixel gather: `D(u, v) = d[instance_map(u, v), u, v]`.
pub fn merge_depth(
    depth_maps: &Array3<f64>,
    instance_map: &Array2<usize>,
) -> Result<Array2<f64>, FuseError> {
    let n = depth_maps.shape()[0];
    let (h, w) = instance_map.dim();
    assert_eq!(&depth_maps.shape()[1..], &[h, w], "spatial shapes differ");
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let idx = instance_map[[y, x]];
            if idx >= n {
                return Err(FuseError::OwnerOutOfRange { idx, n, y, x });
            }
            out[[y, x]] = depth_maps[[idx, y, x]];
        }
    }
    Ok(out)
}

/// Bilinear upsampling by an integer factor (half-pixel centers).
pub fn upsample_bilinear(src: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            out[[y, x]] = src[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
                + src[[y0, x1]] * (1.0 - fy) * fx
                + src[[y1, x0]] * fy * (1.0 - fx)
                + src[[y1, x1]] * fy * fx;
        }
    }
    out
}

pub fn upsample_nearest_u16(src: &Array2<u16>, factor: usize) -> Array2<u16> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| src[[y / factor, x / factor]])
}

fn upsample_nearest_i32(src: &Array2<i32>, factor: usize) -> Array2<i32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| src[[y / factor, x / factor]])
}

/// Full-resolution fused output for one frame.
#[derive(Clone, Debug)]
pub struct PanopticDepthResult {
    pub class: Array2<u16>,
    /// Track ids; 0 where no thing instance.
    pub instance: Array2<u16>,
    pub depth: Array2<f32>,
    /// track id -> owning query index.
    pub instance_index: BTreeMap<u16, usize>,
    /// track id -> class confidence.
    pub scores: BTreeMap<u16, f64>,
    /// Stage-0 dense depth upsampled to input resolution, kept for
    /// dense-vs-query depth comparisons.
    pub dense_depth: Array2<f32>,
}

/// End-to-end inference for one frame: features, query head, panoptic and
/// depth merging, track association against `memory`, and upsampling to
/// input resolution. Deterministic given parameters and memory.
pub fn infer_frame(
    model: &Model,
    image: &Array3<f64>,
    memory: &mut TrackMemory,
    frame: usize,
    th: &FuseThresholds,
) -> Result<PanopticDepthResult, FuseError> {
    let table = model.config.class_table();
    let mut g = Graph::new();
    let (_, vars) = model.bind(&mut g, false);
    let (feat, out) = model.forward_frame(&mut g, &vars, image)?;
    let final_stage = out.stages.last().expect("at least stage 0");
    let class_logits = g
        .value(final_stage.class_logits)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("class logits 2-D");
    let mask_logits = g
        .value(final_stage.mask_logits)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("mask logits 3-D");
    let sem = g.value(out.sem_logits);
    let (hf, wf) = (mask_logits.shape()[1], mask_logits.shape()[2]);
    let mut sem_fallback = Array2::<u16>::zeros((hf, wf));
    for y in 0..hf {
        for x in 0..wf {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..table.num_classes() {
                let v = sem[[c, y, x]];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            sem_fallback[[y, x]] = table.class_at(best);
        }
    }
    let merged = merge_panoptic(&class_logits, &mask_logits, &sem_fallback, &table, th);

    let factor = feat.stride;
    let dense = g.value(out.dense_depth);
    let dense2 = Array2::from_shape_fn((hf, wf), |(y, x)| dense[[0, y, x]]);
    let dense_full = upsample_bilinear(&dense2, factor);

    // depth: per-query bilinear upsample, gathered through the
    // nearest-upsampled owner map so every pixel carries its owning
    // query's (upsampled) prediction
    let owner_full = upsample_nearest_i32(&merged.owner, factor);
    let (h, w) = owner_full.dim();
    let mut depth_full = dense_full.clone();
    if let Some(dmaps) = final_stage.depth_maps {
        let dval = g.value(dmaps);
        let owned: std::collections::BTreeSet<usize> = merged
            .owner
            .iter()
            .filter(|&&o| o >= 0)
            .map(|&o| o as usize)
            .collect();
        let mut per_query_full: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
        for &q in &owned {
            let dq = Array2::from_shape_fn((hf, wf), |(y, x)| dval[[q, y, x]]);
            per_query_full.insert(q, upsample_bilinear(&dq, factor));
        }
        for y in 0..h {
            for x in 0..w {
                let o = owner_full[[y, x]];
                if o >= 0 {
                    depth_full[[y, x]] = per_query_full[&(o as usize)][[y, x]];
                }
            }
        }
    }

    // tracking: embeddings from owned thing masks at feature resolution
    let mut thing_masks: Vec<(usize, Array2<f64>, f64)> = Vec::new();
    for kq in merged.kept.iter().filter(|k| k.is_thing) {
        let mask = Array2::from_shape_fn((hf, wf), |(y, x)| {
            if merged.owner[[y, x]] == kq.query as i32 {
                1.0
            } else {
                0.0
            }
        });
        thing_masks.push((kq.query, mask, kq.confidence));
    }
    let embs = tracker::extract_embeddings(&mut g, feat.x_pan, &thing_masks, &vars.track, frame);
    let vectors: Vec<ndarray::Array1<f64>> = embs.iter().map(|(e, _)| e.vector.clone()).collect();
    let ids = memory.associate(&vectors, frame, th.tau);

    let mut query_to_id: BTreeMap<usize, u16> = BTreeMap::new();
    let mut instance_index = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for ((e, _), &id) in embs.iter().zip(ids.iter()) {
        query_to_id.insert(e.query, id);
        instance_index.insert(id, e.query);
        scores.insert(id, e.score);
    }

    let class_full = upsample_nearest_u16(&merged.class, factor);
    let mut instance_full = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let o = owner_full[[y, x]];
            if o >= 0 {
                if let Some(&id) = query_to_id.get(&(o as usize)) {
                    instance_full[[y, x]] = id;
                }
            }
        }
    }
    Ok(PanopticDepthResult {
        class: class_full,
        instance: instance_full,
        depth: depth_full.mapv(|v| v as f32),
        instance_index,
        scores,
        dense_depth: dense_full.mapv(|v| v as f32),
    })
}
