//! Evaluation stack for depth-aware video panoptic segmentation.
//!
//! - Panoptic quality (PQ) with the standard void conventions: ground-truth
//!   class 255 is unknown, prediction pixels on unknown regions do not count
//!   against the union, and unmatched predictions mostly covering unknown
//!   regions are ignored rather than counted as false positives.
//! - `DVPQ^k_lambda`: PQ over horizontally concatenated k-frame windows
//!   after voiding predicted pixels whose absolute relative depth error
//!   exceeds `lambda`. Aggregation is the mean of per-window PQ values, so
//!   `DVPQ^1_inf` is exactly the mean per-frame PQ.
//! - AQ / SQ: association quality over ground-truth tracks and class mIoU.
//! - DQ: fraction of valid pixels within 10% relative depth error (the
//!   threshold is a declared convention, surfaced as "DQ@0.1"), and
//!   DSTQ = (AQ * SQ * DQ)^(1/3).
//! - Per-instance depth awareness: an instance counts as depth-aware when
//!   fewer than 10% of its valid pixels exceed 25% relative error.

use crate::synthgen::{ClipSample, VOID_CLASS};
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet, HashMap};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("window size {k} exceeds sequence length {t}")]
    Window { k: usize, t: usize },
    #[error("no valid depth pixels")]
    NoValidDepth,
}

/// Aligned per-frame maps for one side (prediction or ground truth).
#[derive(Clone, Debug)]
pub struct FrameMaps {
    pub class: Array2<u16>,
    pub instance: Array2<u16>,
    pub depth: Array2<f32>,
}

impl FrameMaps {
    pub fn from_clip(clip: &ClipSample, t: usize) -> Self {
        Self {
            class: clip.class_map(t),
            instance: clip.instance_map(t),
            depth: clip.depth_map(t),
        }
    }

    pub fn seq_from_clip(clip: &ClipSample) -> Vec<Self> {
        (0..clip.frames()).map(|t| Self::from_clip(clip, t)).collect()
    }
}

// ---- panoptic quality -------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqClassStats {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PqClassStats {
    pub fn active(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> f64 {
        if !self.active() {
            return 0.0;
        }
        self.iou_sum / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64)
    }
}

#[derive(Clone, Debug, Default)]
pub struct PqStats {
    pub per_class: BTreeMap<u16, PqClassStats>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (&c, s) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.iou_sum += s.iou_sum;
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
        }
    }

    /// Mean per-class PQ over classes with any activity. `None` when no
    /// class has activity.
    pub fn pq(&self) -> Option<f64> {
        self.pq_where(|_| true)
    }

    pub fn pq_where<F: Fn(u16) -> bool>(&self, keep: F) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_class
            .iter()
            .filter(|(c, s)| keep(**c) && s.active())
            .map(|(_, s)| s.pq())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn check_same_shape(a: &Array2<u16>, b: &Array2<u16>) -> Result<(), MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Segment id for PQ purposes: stuff classes are merged into a single
/// segment per class regardless of the raw instance value.
fn segment_key(class: u16, inst: u16, things: &BTreeSet<u16>) -> (u16, u16) {
    if things.contains(&class) {
        (class, inst)
    } else {
        (class, 0)
    }
}

/// Accumulate PQ matching statistics for one pair of panoptic maps.
/// Segments match when IoU > 0.5, computed ignoring ground-truth void.
pub fn panoptic_quality(
    pred_class: &Array2<u16>,
    pred_inst: &Array2<u16>,
    gt_class: &Array2<u16>,
    gt_inst: &Array2<u16>,
    things: &BTreeSet<u16>,
) -> Result<PqStats, MetricError> {
    check_same_shape(pred_class, gt_class)?;
    check_same_shape(pred_inst, gt_inst)?;
    check_same_shape(pred_class, pred_inst)?;
    let mut pred_area: HashMap<(u16, u16), usize> = HashMap::new();
    let mut gt_area: HashMap<(u16, u16), usize> = HashMap::new();
    let mut inter: HashMap<((u16, u16), (u16, u16)), usize> = HashMap::new();
    let mut pred_void: HashMap<(u16, u16), usize> = HashMap::new();
    for ((pc, pi), (gc, gi)) in pred_class
        .iter()
        .zip(pred_inst.iter())
        .zip(gt_class.iter().zip(gt_inst.iter()))
        .map(|((pc, pi), (gc, gi))| ((*pc, *pi), (*gc, *gi)))
    {
        let gt_is_void = gc == VOID_CLASS;
        let p_seg = (pc != VOID_CLASS).then(|| segment_key(pc, pi, things));
        let g_seg = (!gt_is_void).then(|| segment_key(gc, gi, things));
        if let Some(p) = p_seg {
            *pred_area.entry(p).or_default() += 1;
            if gt_is_void {
                *pred_void.entry(p).or_default() += 1;
            }
        }
        if let Some(g) = g_seg {
            *gt_area.entry(g).or_default() += 1;
        }
        if let (Some(p), Some(g)) = (p_seg, g_seg) {
            if p.0 == g.0 {
                *inter.entry((p, g)).or_default() += 1;
            }
        }
    }
    let mut stats = PqStats::default();
    let mut matched_pred: BTreeSet<(u16, u16)> = BTreeSet::new();
    let mut matched_gt: BTreeSet<(u16, u16)> = BTreeSet::new();
    for (&(p, g), &i) in &inter {
        let union = pred_area[&p] + gt_area[&g] - i - pred_void.get(&p).copied().unwrap_or(0);
        if union == 0 {
            continue;
        }
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            let e = stats.per_class.entry(p.0).or_default();
            e.tp += 1;
            e.iou_sum += iou;
            matched_pred.insert(p);
            matched_gt.insert(g);
        }
    }
    for (&p, &area) in &pred_area {
        if matched_pred.contains(&p) {
            continue;
        }
        let void = pred_void.get(&p).copied().unwrap_or(0);
        // predictions mostly covering unknown regions are ignored
        if (void as f64) / (area as f64) > 0.5 {
            continue;
        }
        stats.per_class.entry(p.0).or_default().fp += 1;
    }
    for g in gt_area.keys() {
        if !matched_gt.contains(g) {
            stats.per_class.entry(g.0).or_default().fn_ += 1;
        }
    }
    Ok(stats)
}

// ---- DVPQ -------------------------------------------------------------------

/// Per-window PQ values (all / thing / stuff); `None` where a window had no
/// active class of that group.
#[derive(Clone, Debug, Default)]
pub struct DvpqWindows {
    pub all: Vec<Option<f64>>,
    pub thing: Vec<Option<f64>>,
    pub stuff: Vec<Option<f64>>,
}

impl DvpqWindows {
    pub fn merge(&mut self, other: DvpqWindows) {
        self.all.extend(other.all);
        self.thing.extend(other.thing);
        self.stuff.extend(other.stuff);
    }

    pub fn finalize(&self) -> DvpqValue {
        DvpqValue {
            all: mean_opt(&self.all),
            thing: mean_opt(&self.thing),
            stuff: mean_opt(&self.stuff),
        }
    }
}

fn mean_opt(vals: &[Option<f64>]) -> f64 {
    let xs: Vec<f64> = vals.iter().filter_map(|v| *v).collect();
    if xs.is_empty() {
        1.0 // vacuously perfect: nothing was annotated
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DvpqValue {
    pub all: f64,
    pub thing: f64,
    pub stuff: f64,
}

/// Void predicted classes wherever the relative depth error exceeds
/// `lambda` (only where ground-truth depth is valid).
pub fn depth_masked_class(
    pred_class: &Array2<u16>,
    pred_depth: &Array2<f32>,
    gt_depth: &Array2<f32>,
    lambda: f64,
) -> Array2<u16> {
    let mut out = pred_class.clone();
    if lambda.is_infinite() {
        return out;
    }
    for ((o, &pd), &gd) in out.iter_mut().zip(pred_depth.iter()).zip(gt_depth.iter()) {
        if gd > 0.0 {
            let err = ((pd as f64) - (gd as f64)).abs() / gd as f64;
            if err > lambda {
                *o = VOID_CLASS;
            }
        }
    }
    out
}

/// Per-window PQ statistics for one sequence at a given (k, lambda).
pub fn dvpq_windows(
    pred: &[FrameMaps],
    gt: &[FrameMaps],
    k: usize,
    lambda: f64,
    things: &BTreeSet<u16>,
) -> Result<DvpqWindows, MetricError> {
    let t = gt.len();
    if pred.len() != t {
        return Err(MetricError::Shape(format!(
            "sequence lengths differ: {} vs {t}",
            pred.len()
        )));
    }
    if k == 0 || k > t {
        return Err(MetricError::Window { k, t });
    }
    let (h, w) = gt[0].class.dim();
    let mut out = DvpqWindows::default();
    for start in 0..=(t - k) {
        let mut pc = Array2::<u16>::zeros((h, w * k));
        let mut pi = Array2::<u16>::zeros((h, w * k));
        let mut gc = Array2::<u16>::zeros((h, w * k));
        let mut gi = Array2::<u16>::zeros((h, w * k));
        for (j, f) in (start..start + k).enumerate() {
            let masked = depth_masked_class(
                &pred[f].class,
                &pred[f].depth,
                &gt[f].depth,
                lambda,
            );
            pc.slice_mut(ndarray::s![.., j * w..(j + 1) * w]).assign(&masked);
            pi.slice_mut(ndarray::s![.., j * w..(j + 1) * w])
                .assign(&pred[f].instance);
            gc.slice_mut(ndarray::s![.., j * w..(j + 1) * w]).assign(&gt[f].class);
            gi.slice_mut(ndarray::s![.., j * w..(j + 1) * w])
                .assign(&gt[f].instance);
        }
        let stats = panoptic_quality(&pc, &pi, &gc, &gi, things)?;
        out.all.push(stats.pq());
        out.thing.push(stats.pq_where(|c| things.contains(&c)));
        out.stuff.push(stats.pq_where(|c| !things.contains(&c)));
    }
    Ok(out)
}

/// `DVPQ^k_lambda` for one sequence.
pub fn dvpq(
    pred: &[FrameMaps],
    gt: &[FrameMaps],
    k: usize,
    lambda: f64,
    things: &BTreeSet<u16>,
) -> Result<DvpqValue, MetricError> {
    Ok(dvpq_windows(pred, gt, k, lambda, things)?.finalize())
}

// ---- STQ components ----------------------------------------------------------

/// Track-level association statistics, accumulable across a dataset.
#[derive(Clone, Debug, Default)]
pub struct AqStats {
    /// Per ground-truth track: (sum over overlapping prediction tubes of
    /// TPA * IoU, track size).
    pub per_track: Vec<(f64, usize)>,
}

impl AqStats {
    pub fn merge(&mut self, other: AqStats) {
        self.per_track.extend(other.per_track);
    }

    pub fn aq(&self) -> f64 {
        if self.per_track.is_empty() {
            return 1.0;
        }
        self.per_track
            .iter()
            .map(|(score, size)| score / *size as f64)
            .sum::<f64>()
            / self.per_track.len() as f64
    }
}

/// mIoU statistics per class, accumulable across a dataset.
#[derive(Clone, Debug, Default)]
pub struct SqStats {
    pub inter: BTreeMap<u16, usize>,
    pub union: BTreeMap<u16, usize>,
}

impl SqStats {
    pub fn merge(&mut self, other: &SqStats) {
        for (&c, &v) in &other.inter {
            *self.inter.entry(c).or_default() += v;
        }
        for (&c, &v) in &other.union {
            *self.union.entry(c).or_default() += v;
        }
    }

    pub fn sq(&self) -> f64 {
        let mut vals = Vec::new();
        for (&c, &u) in &self.union {
            if u > 0 {
                vals.push(self.inter.get(&c).copied().unwrap_or(0) as f64 / u as f64);
            }
        }
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Association and segmentation statistics for one sequence. Pixels with
/// void ground truth are excluded everywhere.
pub fn stq_stats(pred: &[FrameMaps], gt: &[FrameMaps]) -> Result<(AqStats, SqStats), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Shape(format!(
            "sequence lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut gt_size: BTreeMap<u16, usize> = BTreeMap::new();
    let mut pred_size: BTreeMap<u16, usize> = BTreeMap::new();
    let mut overlap: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    let mut sq = SqStats::default();
    let mut class_inter: BTreeMap<u16, usize> = BTreeMap::new();
    let mut pred_class_area: BTreeMap<u16, usize> = BTreeMap::new();
    let mut gt_class_area: BTreeMap<u16, usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt.iter()) {
        check_same_shape(&p.class, &g.class)?;
        for ((pc, pi), (gc, gi)) in p
            .class
            .iter()
            .zip(p.instance.iter())
            .zip(g.class.iter().zip(g.instance.iter()))
        {
            if *gc == VOID_CLASS {
                continue;
            }
            if *gi > 0 {
                *gt_size.entry(*gi).or_default() += 1;
            }
            if *pi > 0 {
                *pred_size.entry(*pi).or_default() += 1;
            }
            if *gi > 0 && *pi > 0 {
                *overlap.entry((*pi, *gi)).or_default() += 1;
            }
            *gt_class_area.entry(*gc).or_default() += 1;
            if *pc != VOID_CLASS {
                *pred_class_area.entry(*pc).or_default() += 1;
            }
            if pc == gc {
                *class_inter.entry(*gc).or_default() += 1;
            }
        }
    }
    let mut aq = AqStats::default();
    for (&gid, &gsize) in &gt_size {
        let mut score = 0.0;
        for ((pid, gid2), &tpa) in &overlap {
            if *gid2 != gid {
                continue;
            }
            let union = pred_size[pid] + gsize - tpa;
            score += tpa as f64 * (tpa as f64 / union as f64);
        }
        aq.per_track.push((score, gsize));
    }
    let classes: BTreeSet<u16> = gt_class_area
        .keys()
        .chain(pred_class_area.keys())
        .copied()
        .collect();
    for c in classes {
        let inter = class_inter.get(&c).copied().unwrap_or(0);
        let union = gt_class_area.get(&c).copied().unwrap_or(0)
            + pred_class_area.get(&c).copied().unwrap_or(0)
            - inter;
        *sq.inter.entry(c).or_default() += inter;
        *sq.union.entry(c).or_default() += union;
    }
    Ok((aq, sq))
}

/// AQ and SQ for one sequence.
pub fn stq_components(pred: &[FrameMaps], gt: &[FrameMaps]) -> Result<(f64, f64), MetricError> {
    let (aq, sq) = stq_stats(pred, gt)?;
    Ok((aq.aq(), sq.sq()))
}

// ---- depth quality -------------------------------------------------------------

pub const DQ_THRESHOLD: f64 = 0.1;

/// Valid-pixel inlier counts for DQ and the abs-rel accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct DepthStats {
    pub valid: usize,
    pub inliers: usize,
    pub abs_rel_sum: f64,
}

impl DepthStats {
    pub fn merge(&mut self, other: &DepthStats) {
        self.valid += other.valid;
        self.inliers += other.inliers;
        self.abs_rel_sum += other.abs_rel_sum;
    }

    pub fn dq(&self) -> Result<f64, MetricError> {
        if self.valid == 0 {
            return Err(MetricError::NoValidDepth);
        }
        Ok(self.inliers as f64 / self.valid as f64)
    }

    pub fn abs_rel(&self) -> Result<f64, MetricError> {
        if self.valid == 0 {
            return Err(MetricError::NoValidDepth);
        }
        Ok(self.abs_rel_sum / self.valid as f64)
    }
}

pub fn depth_stats(pred: &Array2<f32>, gt: &Array2<f32>) -> DepthStats {
    let mut s = DepthStats::default();
    for (&pd, &gd) in pred.iter().zip(gt.iter()) {
        if gd > 0.0 {
            let err = ((pd as f64) - (gd as f64)).abs() / gd as f64;
            s.valid += 1;
            if err <= DQ_THRESHOLD {
                s.inliers += 1;
            }
            s.abs_rel_sum += err;
        }
    }
    s
}

/// DQ over a pair of depth sequences plus the combined DSTQ.
pub fn dq_and_dstq(
    pred_depth: &[Array2<f32>],
    gt_depth: &[Array2<f32>],
    aq: f64,
    sq: f64,
) -> Result<(f64, f64), MetricError> {
    let mut s = DepthStats::default();
    for (p, g) in pred_depth.iter().zip(gt_depth.iter()) {
        s.merge(&depth_stats(p, g));
    }
    let dq = s.dq()?;
    Ok((dq, dstq(aq, sq, dq)))
}

pub fn dstq(aq: f64, sq: f64, dq: f64) -> f64 {
    (aq * sq * dq).cbrt()
}

// ---- depth-aware instances -------------------------------------------------------

pub const AWARE_PIXEL_ERR: f64 = 0.25;
pub const AWARE_FRACTION: f64 = 0.10;

/// Count depth-aware instances in one frame: an instance is aware when
/// fewer than 10% of its valid pixels exceed 25% relative error.
pub fn depth_aware_instances(
    pred_depth: &Array2<f32>,
    gt_depth: &Array2<f32>,
    gt_inst: &Array2<u16>,
) -> (usize, usize) {
    let mut per_inst: BTreeMap<u16, (usize, usize)> = BTreeMap::new(); // id -> (valid, bad)
    for ((&pd, &gd), &gi) in pred_depth
        .iter()
        .zip(gt_depth.iter())
        .zip(gt_inst.iter())
    {
        if gi == 0 || gd <= 0.0 {
            continue;
        }
        let e = per_inst.entry(gi).or_default();
        e.0 += 1;
        let err = ((pd as f64) - (gd as f64)).abs() / gd as f64;
        if err > AWARE_PIXEL_ERR {
            e.1 += 1;
        }
    }
    let total = per_inst.len();
    let aware = per_inst
        .values()
        .filter(|(valid, bad)| (*bad as f64) < AWARE_FRACTION * (*valid as f64))
        .count();
    (aware, total)
}

/// Mean absolute depth step across ground-truth instance boundaries:
/// 4-neighbor pixel pairs whose instance ids differ (at least one side
/// belonging to an instance). Higher means sharper depth edges.
pub fn boundary_depth_gradient(depth: &Array2<f32>, gt_inst: &Array2<u16>) -> Option<f64> {
    let (h, w) = gt_inst.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            for (dy, dx) in [(0usize, 1usize), (1, 0)] {
                let (y2, x2) = (y + dy, x + dx);
                if y2 >= h || x2 >= w {
                    continue;
                }
                let (a, b) = (gt_inst[[y, x]], gt_inst[[y2, x2]]);
                if a != b && (a > 0 || b > 0) {
                    sum += ((depth[[y, x]] - depth[[y2, x2]]).abs()) as f64;
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}
