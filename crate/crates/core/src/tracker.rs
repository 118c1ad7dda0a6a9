//! Appearance-embedding tracking: per-instance embeddings pooled from the
//! panoptic feature map over mask bounding boxes, the contrastive loss
//! `log(1 + sum exp(v k- - v k+))`, bidirectional-softmax association, and
//! the online track memory with momentum updates and stale-entry eviction.

use crate::graph::{Graph, Var};
use crate::nn::{kaiming_conv, linear, xavier_linear, zeros, Bound, ParamStore};
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const EMBED_GRID: usize = 7;

pub struct TrackVars {
    pub conv: (Var, Var),
    pub fc: (Var, Var),
}

pub fn init_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, embed: usize) {
    store.insert("track.conv.w", kaiming_conv(rng, channels, channels, 3, 3));
    store.insert("track.conv.b", zeros(&[channels]));
    store.insert("track.fc.w", xavier_linear(rng, channels, embed));
    store.insert("track.fc.b", zeros(&[embed]));
}

pub fn bind(b: &Bound) -> TrackVars {
    TrackVars {
        conv: (b.var("track.conv.w"), b.var("track.conv.b")),
        fc: (b.var("track.fc.w"), b.var("track.fc.b")),
    }
}

/// One extracted instance embedding.
#[derive(Clone, Debug)]
pub struct TrackEmbedding {
    pub vector: Array1<f64>,
    pub frame: usize,
    pub query: usize,
    pub score: f64,
}

/// Tight bounding box `(y0, x0, y1, x1)` of a binary mask in feature
/// coordinates (end-exclusive), or `None` for an empty mask.
pub fn mask_bbox(mask: &Array2<f64>) -> Option<(f64, f64, f64, f64)> {
    let (h, w) = mask.dim();
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] > 0.5 {
                any = true;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    any.then(|| (y0 as f64, x0 as f64, y1 as f64, x1 as f64))
}

/// Embedding head for one region: bilinear region pooling to a
/// `EMBED_GRID x EMBED_GRID` patch, a 3x3 conv + ReLU, spatial mean, and a
/// linear projection to the embedding size. Returns a `1 x E` graph node.
pub fn embed_roi(
    g: &mut Graph,
    x_pan: Var,
    bbox: (f64, f64, f64, f64),
    p: &TrackVars,
) -> Var {
    let roi = g.roi_align(x_pan, bbox, EMBED_GRID);
    let h = g.conv2d(roi, p.conv.0, p.conv.1, 1, 1);
    let h = g.relu(h);
    let pooled = g.sum_hw(h);
    let c = g.shape(pooled)[0];
    let flat = g.reshape(pooled, &[1, c]);
    let scaled = g.scale(flat, 1.0 / (EMBED_GRID * EMBED_GRID) as f64);
    linear(g, scaled, p.fc.0, p.fc.1)
}

/// Embeddings for every nonempty mask, in ascending query order. Masks are
/// given at feature resolution; empty masks are skipped.
pub fn extract_embeddings(
    g: &mut Graph,
    x_pan: Var,
    masks: &[(usize, Array2<f64>, f64)],
    p: &TrackVars,
    frame: usize,
) -> Vec<(TrackEmbedding, Var)> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&i| masks[i].0);
    let mut out = Vec::new();
    for i in order {
        let (query, mask, score) = &masks[i];
        let Some(bbox) = mask_bbox(mask) else { continue };
        let emb = embed_roi(g, x_pan, bbox, p);
        let vector: Array1<f64> = g.value(emb).iter().copied().collect();
        out.push((
            TrackEmbedding { vector, frame, query: *query, score: *score },
            emb,
        ));
    }
    out
}

/// Contrastive embedding loss `log(1 + sum_{k+} sum_{k-} exp(v k- - v k+))`
/// over graph nodes shaped `1 x E`. Empty positive or negative sets
/// contribute zero.
pub fn track_loss(g: &mut Graph, v: Var, positives: &[Var], negatives: &[Var]) -> Var {
    if positives.is_empty() || negatives.is_empty() {
        return g.constant(crate::graph::scalar(0.0));
    }
    let mut diffs = Vec::with_capacity(positives.len() * negatives.len());
    for &kp in positives {
        let pos = g.matmul(v, kp, false, true); // 1x1
        for &kn in negatives {
            let neg = g.matmul(v, kn, false, true);
            diffs.push(g.sub(neg, pos));
        }
    }
    let row = g.concat_cols(&diffs);
    g.log1p_sum_exp(row)
}

/// Bidirectional softmax similarity between two embedding sets, exactly
/// `f(i,j) = [softmax_j(n_i m_j) + softmax_i(n_i m_j)] / 2`.
pub fn bidirectional_similarity(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, n) = (a.nrows(), b.nrows());
    if m == 0 || n == 0 {
        return Array2::zeros((m, n));
    }
    let dots = a.dot(&b.t());
    let mut row_sm = dots.clone();
    for mut row in row_sm.outer_iter_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    let mut col_sm = dots;
    for j in 0..n {
        let mut col = col_sm.column_mut(j);
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|x| (x - mx).exp());
        let s = col.sum();
        col.mapv_inplace(|x| x / s);
    }
    (&row_sm + &col_sm) / 2.0
}

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub embedding: Array1<f64>,
    pub last_seen: usize,
    /// Momentum-averaged embedding, used for matching.
    pub momentum_avg: Array1<f64>,
}

/// Online track memory. Ids are unique within a sequence and never reused.
#[derive(Clone, Debug)]
pub struct TrackMemory {
    entries: BTreeMap<u16, MemoryEntry>,
    next_id: u16,
    pub momentum: f64,
    pub evict_after: usize,
}

impl TrackMemory {
    pub fn new(momentum: f64, evict_after: usize) -> Self {
        Self { entries: BTreeMap::new(), next_id: 1, momentum, evict_after }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u16> {
        self.entries.keys().copied().collect()
    }

    fn fresh_id(&mut self) -> u16 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Greedy association of current-frame embeddings against the memory on
    /// bidirectional similarity, in descending score order; pairs below
    /// `tau` start fresh ids. Matched entries get a momentum update;
    /// entries unseen for longer than `evict_after` frames are dropped.
    pub fn associate(
        &mut self,
        current: &[Array1<f64>],
        frame: usize,
        tau: f64,
    ) -> Vec<u16> {
        let mut assigned = vec![0u16; current.len()];
        if current.is_empty() {
            self.evict(frame);
            return assigned;
        }
        let mem_ids: Vec<u16> = self.entries.keys().copied().collect();
        if !mem_ids.is_empty() {
            let e = self.entries[&mem_ids[0]].momentum_avg.len();
            let mut mem_mat = Array2::<f64>::zeros((mem_ids.len(), e));
            for (r, id) in mem_ids.iter().enumerate() {
                mem_mat.row_mut(r).assign(&self.entries[id].momentum_avg);
            }
            let mut cur_mat = Array2::<f64>::zeros((current.len(), e));
            for (r, emb) in current.iter().enumerate() {
                cur_mat.row_mut(r).assign(emb);
            }
            let f = bidirectional_similarity(&mem_mat, &cur_mat);
            let mut pairs: Vec<(usize, usize)> = (0..mem_ids.len())
                .flat_map(|i| (0..current.len()).map(move |j| (i, j)))
                .collect();
            pairs.sort_by(|&(i1, j1), &(i2, j2)| {
                f[[i2, j2]]
                    .partial_cmp(&f[[i1, j1]])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(i1.cmp(&i2))
                    .then(j1.cmp(&j2))
            });
            let mut used_mem = vec![false; mem_ids.len()];
            let mut used_cur = vec![false; current.len()];
            for (i, j) in pairs {
                if used_mem[i] || used_cur[j] || f[[i, j]] < tau {
                    continue;
                }
                used_mem[i] = true;
                used_cur[j] = true;
                let id = mem_ids[i];
                assigned[j] = id;
                let entry = self.entries.get_mut(&id).expect("live entry");
                let mu = self.momentum;
                entry.momentum_avg =
                    entry.momentum_avg.mapv(|v| v * mu) + &current[j].mapv(|v| v * (1.0 - mu));
                entry.embedding = current[j].clone();
                entry.last_seen = frame;
            }
        }
        for (j, slot) in assigned.iter_mut().enumerate() {
            if *slot == 0 {
                let id = self.fresh_id();
                *slot = id;
                self.entries.insert(
                    id,
                    MemoryEntry {
                        embedding: current[j].clone(),
                        last_seen: frame,
                        momentum_avg: current[j].clone(),
                    },
                );
            }
        }
        self.evict(frame);
        assigned
    }

    fn evict(&mut self, frame: usize) {
        let horizon = self.evict_after;
        self.entries.retain(|_, e| frame.saturating_sub(e.last_seen) <= horizon);
    }
}
