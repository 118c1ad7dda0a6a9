//! Ground-truth assignment and the training loss stack.
//!
//! Queries are matched to ground-truth segments per stage by minimum-cost
//! bipartite assignment over a mask+classification cost; depth ground truth
//! follows the same assignment. Losses: focal classification over all
//! queries, dice + focal + sigmoid cross-entropy on matched masks, and a
//! depth triple (scale-invariant log loss, absolute relative, square
//! relative) per matched query over its ground-truth mask pixels plus the
//! stage-0 dense depth map.

use crate::graph::{scalar, Arr, Graph, Var};
use crate::synthgen::{ClipSample, VOID_CLASS};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use std::collections::BTreeSet;

pub const DICE_EPS: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum AssignError {
    #[error("more ground-truth segments ({m}) than queries ({n})")]
    TooManyTargets { m: usize, n: usize },
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
}

// ---- class table ----------------------------------------------------------

/// Maps raw class ids to contiguous classifier indices; the classifier's
/// extra final slot is "no object".
#[derive(Clone, Debug)]
pub struct ClassTable {
    pub classes: Vec<u16>,
    pub things: BTreeSet<u16>,
}

impl ClassTable {
    pub fn new(thing_classes: &[u16], stuff_classes: &[u16]) -> Self {
        let mut classes = stuff_classes.to_vec();
        classes.extend_from_slice(thing_classes);
        Self {
            classes,
            things: thing_classes.iter().copied().collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Index of the "no object" slot.
    pub fn no_object(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, class: u16) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn class_at(&self, index: usize) -> u16 {
        self.classes[index]
    }

    pub fn is_thing(&self, class: u16) -> bool {
        self.things.contains(&class)
    }
}

// ---- Hungarian assignment ---------------------------------------------------

/// Minimum-cost assignment of `m` ground-truth columns to distinct query
/// rows of an `n x m` cost matrix (`m <= n`). Ties are broken toward the
/// lexicographically smallest assignment vector, i.e. the lowest query
/// index for the first column, then the second, and so on.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Vec<usize>, AssignError> {
    let (n, m) = cost.dim();
    if m > n {
        return Err(AssignError::TooManyTargets { m, n });
    }
    for ((i, j), &v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(AssignError::NonFinite(i, j));
        }
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let base = solve_lap(cost, &(0..n).collect::<Vec<_>>(), &(0..m).collect::<Vec<_>>());
    let mut best_total = total_of(cost, &base);
    let mut assignment = base;
    let tol = 1e-9 * (1.0 + best_total.abs());
    // lexicographic polish: for each column in order, pin the smallest row
    // that still admits an optimal completion
    let mut fixed_rows: Vec<usize> = Vec::new();
    let mut fixed_cols: Vec<usize> = Vec::new();
    for j in 0..m {
        let mut chosen = assignment[j];
        for i in 0..chosen {
            if fixed_rows.contains(&i) {
                continue;
            }
            let rows: Vec<usize> = (0..n)
                .filter(|r| !fixed_rows.contains(r) && *r != i)
                .collect();
            let cols: Vec<usize> = (j + 1..m).collect();
            let sub_total = if cols.is_empty() {
                0.0
            } else {
                let sub = solve_lap(cost, &rows, &cols);
                cols.iter()
                    .zip(sub.iter())
                    .map(|(&c, &r)| cost[[r, c]])
                    .sum()
            };
            let fixed_cost: f64 = fixed_cols
                .iter()
                .zip(fixed_rows.iter())
                .map(|(&c, &r)| cost[[r, c]])
                .sum();
            if fixed_cost + cost[[i, j]] + sub_total <= best_total + tol {
                chosen = i;
                break;
            }
        }
        fixed_rows.push(chosen);
        fixed_cols.push(j);
        if chosen != assignment[j] {
            // recompute the tail optimally under the new prefix
            let rows: Vec<usize> = (0..n).filter(|r| !fixed_rows.contains(r)).collect();
            let cols: Vec<usize> = (j + 1..m).collect();
            if !cols.is_empty() {
                let sub = solve_lap(cost, &rows, &cols);
                for (&c, &r) in cols.iter().zip(sub.iter()) {
                    assignment[c] = r;
                }
            }
            assignment[j] = chosen;
            best_total = total_of(cost, &assignment);
        }
    }
    Ok(assignment)
}

fn total_of(cost: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(j, &i)| cost[[i, j]]).sum()
}

/// Shortest-augmenting-path assignment on a subproblem given by row and
/// column index lists. Returns, per subproblem column, the chosen original
/// row index.
fn solve_lap(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    assert!(m <= n);
    const INF: f64 = f64::INFINITY;
    // 1-indexed potentials: u over columns (jobs), v over rows (workers)
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[i] = column (1-based) assigned to row i
    let mut way = vec![0usize; n + 1];
    for j in 1..=m {
        p[0] = j;
        let mut i0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[i0] = true;
            let j0 = p[i0];
            let mut delta = INF;
            let mut i1 = 0usize;
            for i in 1..=n {
                if used[i] {
                    continue;
                }
                let cur = cost[[rows[i - 1], cols[j0 - 1]]] - u[j0] - v[i];
                if cur < minv[i] {
                    minv[i] = cur;
                    way[i] = i0;
                }
                if minv[i] < delta {
                    delta = minv[i];
                    i1 = i;
                }
            }
            for i in 0..=n {
                if used[i] {
                    u[p[i]] += delta;
                    v[i] -= delta;
                } else {
                    minv[i] -= delta;
                }
            }
            i0 = i1;
            if p[i0] == 0 {
                break;
            }
        }
        loop {
            let i1 = way[i0];
            p[i0] = p[i1];
            i0 = i1;
            if i0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; m];
    for i in 1..=n {
        if p[i] != 0 {
            out[p[i] - 1] = rows[i - 1];
        }
    }
    out
}

// ---- ground truth ------------------------------------------------------------

/// Ground-truth segments for one frame at feature resolution.
#[derive(Clone, Debug)]
pub struct GtSet {
    /// M x Hf x Wf in {0, 1}.
    pub masks: Array3<f64>,
    /// Classifier index per segment.
    pub class_indices: Vec<usize>,
    /// M x Hf x Wf meters; 0 where invalid.
    pub depths: Array3<f64>,
    /// M x Hf x Wf in {0, 1}: depth validity inside each mask.
    pub depth_valid: Array3<f64>,
    pub is_thing: Vec<bool>,
    pub track_ids: Vec<u16>,
    /// Dense targets for the stage-0 heads.
    pub dense_depth: Array2<f64>,
    pub dense_depth_valid: Array2<f64>,
    /// Semantic classifier index per feature cell; `usize::MAX` = ignore.
    pub semantic: Array2<usize>,
}

impl GtSet {
    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    /// Downsample one clip frame to feature resolution (`stride` input
    /// pixels per cell). Masks keep cells at >= half coverage (falling back
    /// to any coverage for segments that would vanish); per-segment depth
    /// averages only that segment's own valid pixels in each cell.
    pub fn from_frame(clip: &ClipSample, t: usize, table: &ClassTable, stride: usize) -> Self {
        let class = clip.class_map(t);
        let inst = clip.instance_map(t);
        let depth = clip.depth_map(t);
        let (h, w) = class.dim();
        let (hf, wf) = (h / stride, w / stride);

        // enumerate segments: things by id, stuff by class
        let mut segs: Vec<(u16, u16)> = Vec::new(); // (class, id); id 0 = stuff
        let mut seen_things: BTreeSet<u16> = BTreeSet::new();
        let mut seen_stuff: BTreeSet<u16> = BTreeSet::new();
        for (&c, &i) in class.iter().zip(inst.iter()) {
            if c == VOID_CLASS {
                continue;
            }
            if i > 0 {
                if seen_things.insert(i) {
                    segs.push((c, i));
                }
            } else if seen_stuff.insert(c) {
                segs.push((c, 0));
            }
        }
        // deterministic content order: things first, by class then by
        // leftmost column, so column roles stay stable across frames
        let centroid_x = |class_id: u16, id: u16| -> usize {
            let mut sx = 0usize;
            let mut n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    let member = if id > 0 {
                        inst[[y, x]] == id
                    } else {
                        class[[y, x]] == class_id && inst[[y, x]] == 0
                    };
                    if member {
                        sx += x;
                        n += 1;
                    }
                }
            }
            if n == 0 { 0 } else { sx / n }
        };
        segs.sort_by_key(|&(c, i)| (i == 0, c, centroid_x(c, i), i));

        let m = segs.len();
        let mut masks = Array3::<f64>::zeros((m, hf, wf));
        let mut depths = Array3::<f64>::zeros((m, hf, wf));
        let mut valid = Array3::<f64>::zeros((m, hf, wf));
        let mut class_indices = Vec::with_capacity(m);
        let mut is_thing = Vec::with_capacity(m);
        let mut track_ids = Vec::with_capacity(m);
        for (k, &(c, id)) in segs.iter().enumerate() {
            class_indices.push(table.index_of(c).expect("class in table"));
            is_thing.push(id > 0);
            track_ids.push(id);
            let mut any = false;
            for fy in 0..hf {
                for fx in 0..wf {
                    let mut cover = 0usize;
                    let mut dsum = 0.0;
                    let mut dcount = 0usize;
                    for yy in fy * stride..(fy + 1) * stride {
                        for xx in fx * stride..(fx + 1) * stride {
                            let member = if id > 0 {
                                inst[[yy, xx]] == id
                            } else {
                                class[[yy, xx]] == c && inst[[yy, xx]] == 0
                            };
                            if member {
                                cover += 1;
                                let d = depth[[yy, xx]] as f64;
                                if d > 0.0 {
                                    dsum += d;
                                    dcount += 1;
                                }
                            }
                        }
                    }
                    if 2 * cover >= stride * stride {
                        masks[[k, fy, fx]] = 1.0;
                        any = true;
                        if dcount > 0 {
                            depths[[k, fy, fx]] = dsum / dcount as f64;
                            valid[[k, fy, fx]] = 1.0;
                        }
                    }
                }
            }
            if !any {
                // tiny segment: keep every covered cell instead
                for fy in 0..hf {
                    for fx in 0..wf {
                        let mut cover = 0usize;
                        let mut dsum = 0.0;
                        let mut dcount = 0usize;
                        for yy in fy * stride..(fy + 1) * stride {
                            for xx in fx * stride..(fx + 1) * stride {
                                let member = if id > 0 {
                                    inst[[yy, xx]] == id
                                } else {
                                    class[[yy, xx]] == c && inst[[yy, xx]] == 0
                                };
                                if member {
                                    cover += 1;
                                    let d = depth[[yy, xx]] as f64;
                                    if d > 0.0 {
                                        dsum += d;
                                        dcount += 1;
                                    }
                                }
                            }
                        }
                        if cover > 0 {
                            masks[[k, fy, fx]] = 1.0;
                            if dcount > 0 {
                                depths[[k, fy, fx]] = dsum / dcount as f64;
                                valid[[k, fy, fx]] = 1.0;
                            }
                        }
                    }
                }
            }
        }

        // dense targets
        let mut dense_depth = Array2::<f64>::zeros((hf, wf));
        let mut dense_valid = Array2::<f64>::zeros((hf, wf));
        let mut semantic = Array2::<usize>::from_elem((hf, wf), usize::MAX);
        for fy in 0..hf {
            for fx in 0..wf {
                let mut dsum = 0.0;
                let mut dcount = 0usize;
                let mut counts: std::collections::BTreeMap<u16, usize> = Default::default();
                for yy in fy * stride..(fy + 1) * stride {
                    for xx in fx * stride..(fx + 1) * stride {
                        let d = depth[[yy, xx]] as f64;
                        if d > 0.0 {
                            dsum += d;
                            dcount += 1;
                        }
                        let c = class[[yy, xx]];
                        if c != VOID_CLASS {
                            *counts.entry(c).or_default() += 1;
                        }
                    }
                }
                if dcount > 0 {
                    dense_depth[[fy, fx]] = dsum / dcount as f64;
                    dense_valid[[fy, fx]] = 1.0;
                }
                if let Some((&c, _)) = counts.iter().max_by_key(|(_, &n)| n) {
                    semantic[[fy, fx]] = table.index_of(c).expect("class in table");
                }
            }
        }
        Self {
            masks,
            class_indices,
            depths,
            depth_valid: valid,
            is_thing,
            track_ids,
            dense_depth,
            dense_depth_valid: dense_valid,
            semantic,
        }
    }
}

// ---- matching cost -------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub w_cls: f64,
    pub w_dice: f64,
    pub w_bce: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w_cls: 2.0, w_dice: 4.0, w_bce: 1.0 }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `N x M` matching cost from plain arrays (no gradients flow through the
/// assignment): `w_cls * (-p(class)) + w_dice * (1 - dice) + w_bce * bce`.
pub fn match_cost(
    class_logits: &Array2<f64>,
    mask_logits: &Array3<f64>,
    gt: &GtSet,
    w: &CostWeights,
) -> Array2<f64> {
    let n = class_logits.nrows();
    let m = gt.len();
    let probs = softmax_rows_arr(class_logits);
    let (hf, wf) = (mask_logits.shape()[1], mask_logits.shape()[2]);
    let px = (hf * wf) as f64;
    let mut cost = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let mask_i: Vec<f64> = mask_logits
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .copied()
            .collect();
        let probs_i: Vec<f64> = mask_i.iter().map(|&x| sigmoid(x)).collect();
        for j in 0..m {
            let gt_j = gt.masks.index_axis(ndarray::Axis(0), j);
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            let mut bce = 0.0;
            for ((&p, &x), &t) in probs_i.iter().zip(mask_i.iter()).zip(gt_j.iter()) {
                inter += p * t;
                psum += p;
                gsum += t;
                bce += t * softplus(-x) + (1.0 - t) * softplus(x);
            }
            let dice = (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
            cost[[i, j]] = w.w_cls * (-probs[[i, gt.class_indices[j]]])
                + w.w_dice * (1.0 - dice)
                + w.w_bce * bce / px;
        }
    }
    cost
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows_arr(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

// ---- losses ------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LossWeights {
    pub w_depth: f64,
    pub w_mask: f64,
    pub w_cls: f64,
    pub w_track: f64,
    /// Scale-invariance coefficient inside the depth loss.
    pub si_lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Per-stage weights; stages beyond the list use 1.0.
    pub stage_weights: Vec<f64>,
    pub cost: CostWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_depth: 5.0,
            w_mask: 1.0,
            w_cls: 2.0,
            w_track: 0.25,
            si_lambda: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            stage_weights: Vec::new(),
            cost: CostWeights::default(),
        }
    }
}

impl LossWeights {
    pub fn stage_weight(&self, s: usize) -> f64 {
        self.stage_weights.get(s).copied().unwrap_or(1.0)
    }
}

pub struct DepthLossTerms {
    pub si: Var,
    pub abs_rel: Var,
    pub sq_rel: Var,
    pub total: Var,
    /// True when there were no valid pixels and the loss contributed 0.
    pub skipped: bool,
}

/// Depth loss triple over the pixels of a validity mask: scale-invariant
/// log loss `mean(g^2) - lambda_si * mean(g)^2` with `g = ln pred - ln gt`,
/// plus mean `|pred - gt| / gt` and mean `(pred - gt)^2 / gt`.
pub fn depth_loss(
    g: &mut Graph,
    pred: Var,
    gt_depth: &Array2<f64>,
    valid: &Array2<f64>,
    si_lambda: f64,
) -> DepthLossTerms {
    let n_valid = valid.sum();
    if n_valid < 0.5 {
        let zero = g.constant(scalar(0.0));
        return DepthLossTerms { si: zero, abs_rel: zero, sq_rel: zero, total: zero, skipped: true };
    }
    let inv_n = 1.0 / n_valid;
    let mask_c = g.constant(valid.clone().into_dyn());
    let gt_c = g.constant(gt_depth.clone().into_dyn());
    let inv_gt: ArrayD<f64> = gt_depth
        .iter()
        .zip(valid.iter())
        .map(|(&d, &v)| if v > 0.0 && d > 0.0 { 1.0 / d } else { 0.0 })
        .collect::<Array1<f64>>()
        .into_shape_with_order(IxDyn(&[gt_depth.nrows(), gt_depth.ncols()]))
        .expect("shape");
    let inv_gt_c = g.constant(inv_gt);
    let ln_gt: ArrayD<f64> = gt_depth.mapv(|d| if d > 0.0 { d.ln() } else { 0.0 }).into_dyn();
    let ln_gt_c = g.constant(ln_gt);

    let diff = g.sub(pred, gt_c);
    let abs_diff = g.abs(diff);
    let abs_w = g.mul(abs_diff, inv_gt_c);
    let abs_sum = g.sum_all(abs_w);
    let abs_rel = g.scale(abs_sum, inv_n);

    let sq_diff = g.sqr(diff);
    let sq_w = g.mul(sq_diff, inv_gt_c);
    let sq_sum = g.sum_all(sq_w);
    let sq_rel = g.scale(sq_sum, inv_n);

    let ln_pred = g.ln(pred);
    let glog_raw = g.sub(ln_pred, ln_gt_c);
    let glog = g.mul(glog_raw, mask_c);
    let g2 = g.sqr(glog);
    let g2_sum = g.sum_all(g2);
    let mean_g2 = g.scale(g2_sum, inv_n);
    let g_sum = g.sum_all(glog);
    let mean_g = g.scale(g_sum, inv_n);
    let mean_g_sq = g.sqr(mean_g);
    let si_sub = g.scale(mean_g_sq, si_lambda);
    let si = g.sub(mean_g2, si_sub);

    let t1 = g.add(si, abs_rel);
    let total = g.add(t1, sq_rel);
    DepthLossTerms { si, abs_rel, sq_rel, total, skipped: false }
}

/// Multiclass focal loss, mean over rows: `alpha * (1 - p_t)^gamma * (-ln p_t)`.
/// With `gamma = 0`, `alpha = 1` this is exactly cross-entropy.
pub fn focal_ce(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    alpha: f64,
    gamma: f64,
) -> Var {
    let k = g.shape(logits)[1];
    let n = targets.len();
    assert_eq!(g.shape(logits)[0], n);
    let mut onehot = Array2::<f64>::zeros((n, k));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t]] = 1.0;
    }
    let oh = g.constant(onehot.into_dyn());
    let lp = g.log_softmax_rows(logits);
    let sel = g.mul(lp, oh);
    let row = g.sum_rows(sel);
    let ce = g.neg(row); // per-row -ln p_t
    let neg_ce = g.neg(ce);
    let p_t = g.exp(neg_ce);
    let one = g.constant(ArrayD::from_elem(IxDyn(&[n]), 1.0));
    let one_minus = g.sub(one, p_t);
    let w = g.powf_const(one_minus, gamma);
    let weighted = g.mul(w, ce);
    let s = g.sum_all(weighted);
    g.scale(s, alpha / n as f64)
}

/// Binary focal loss with logits, mean over elements.
pub fn focal_binary(g: &mut Graph, logits: Var, targets: Var, alpha: f64, gamma: f64) -> Var {
    let n: usize = g.shape(logits).iter().product();
    let sp_x = g.softplus(logits); // -ln(1-p)
    let neg_logits = g.neg(logits);
    let sp_nx = g.softplus(neg_logits); // -ln p
    // (1-p)^gamma = exp(-gamma * sp_x); p^gamma = exp(-gamma * sp_nx)
    let e1 = g.scale(sp_x, -gamma);
    let one_minus_p_g = g.exp(e1);
    let e2 = g.scale(sp_nx, -gamma);
    let p_g = g.exp(e2);
    let pos = g.mul(one_minus_p_g, sp_nx);
    let neg = g.mul(p_g, sp_x);
    let pos_t = g.mul(targets, pos);
    let ones = g.constant(ArrayD::from_elem(IxDyn(g.shape(targets)), 1.0));
    let inv_t = g.sub(ones, targets);
    let neg_t = g.mul(inv_t, neg);
    let pos_w = g.scale(pos_t, alpha);
    let neg_w = g.scale(neg_t, 1.0 - alpha);
    let both = g.add(pos_w, neg_w);
    let s = g.sum_all(both);
    g.scale(s, 1.0 / n as f64)
}

/// Sigmoid cross-entropy with logits, mean over elements.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: Var) -> Var {
    let n: usize = g.shape(logits).iter().product();
    let sp_x = g.softplus(logits);
    let neg_logits = g.neg(logits);
    let sp_nx = g.softplus(neg_logits);
    let pos = g.mul(targets, sp_nx);
    let ones = g.constant(ArrayD::from_elem(IxDyn(g.shape(targets)), 1.0));
    let inv_t = g.sub(ones, targets);
    let neg = g.mul(inv_t, sp_x);
    let both = g.add(pos, neg);
    let s = g.sum_all(both);
    g.scale(s, 1.0 / n as f64)
}

/// Soft dice loss: `1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(g: &mut Graph, logits: Var, targets: Var) -> Var {
    let p = g.sigmoid(logits);
    let pt = g.mul(p, targets);
    let inter = g.sum_all(pt);
    let num_raw = g.scale(inter, 2.0);
    let num = g.add_scalar(num_raw, DICE_EPS);
    let psum = g.sum_all(p);
    let tsum = g.sum_all(targets);
    let den_raw = g.add(psum, tsum);
    let den = g.add_scalar(den_raw, DICE_EPS);
    let ratio = g.div(num, den);
    let one = g.constant(scalar(1.0));
    g.sub(one, ratio)
}

pub struct MaskClsBreakdown {
    pub cls: Var,
    pub dice: Var,
    pub focal: Var,
    pub bce: Var,
    /// dice + focal + bce
    pub mask_total: Var,
}

/// Classification focal loss over all queries (unmatched queries target
/// "no object") plus dice + focal + pixel cross-entropy on matched masks,
/// averaged over matched segments.
pub fn mask_cls_loss(
    g: &mut Graph,
    mask_logits: Var,
    class_logits: Var,
    gt: &GtSet,
    assignment: &[usize],
    table: &ClassTable,
    w: &LossWeights,
) -> MaskClsBreakdown {
    let n = g.shape(class_logits)[0];
    let mut targets = vec![table.no_object(); n];
    for (j, &i) in assignment.iter().enumerate() {
        targets[i] = gt.class_indices[j];
    }
    let cls = focal_ce(g, class_logits, &targets, w.focal_alpha, w.focal_gamma);

    let (hf, wf) = (g.shape(mask_logits)[1], g.shape(mask_logits)[2]);
    let flat = g.reshape(mask_logits, &[n, hf * wf]);
    let mut dice_terms = Vec::new();
    let mut focal_terms = Vec::new();
    let mut bce_terms = Vec::new();
    for (j, &i) in assignment.iter().enumerate() {
        let row = g.slice_rows(flat, i, i + 1);
        let target: Arr = gt
            .masks
            .index_axis(ndarray::Axis(0), j)
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, hf * wf]))
            .expect("mask reshape");
        let t = g.constant(target);
        dice_terms.push(dice_loss(g, row, t));
        focal_terms.push(focal_binary(g, row, t, w.focal_alpha, w.focal_gamma));
        bce_terms.push(bce_with_logits(g, row, t));
    }
    let m = assignment.len().max(1) as f64;
    let mean_of = |g: &mut Graph, terms: &[Var]| -> Var {
        if terms.is_empty() {
            g.constant(scalar(0.0))
        } else {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            g.scale(acc, 1.0 / m)
        }
    };
    let dice = mean_of(g, &dice_terms);
    let focal = mean_of(g, &focal_terms);
    let bce = mean_of(g, &bce_terms);
    let df = g.add(dice, focal);
    let mask_total = g.add(df, bce);
    MaskClsBreakdown { cls, dice, focal, bce, mask_total }
}

// ---- per-frame total loss -------------------------------------------------------

/// Prediction handles for one stage, as produced by the head.
pub struct StageLossInput {
    pub mask_logits: Var,
    pub class_logits: Var,
    pub depth_maps: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct StageLossValues {
    pub depth: f64,
    pub mask: f64,
    pub cls: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub stages: Vec<StageLossValues>,
    pub track: f64,
    pub total: f64,
}

/// Assemble the full loss for one frame: every stage is matched
/// independently on its own cost, the stage-0 terms additionally carry the
/// dense semantic cross-entropy and dense depth supervision, and the
/// tracking term enters once with its own weight.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    stages: &[StageLossInput],
    sem_logits: Option<Var>,
    dense_depth: Option<Var>,
    gt: &GtSet,
    track: Option<Var>,
    table: &ClassTable,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), AssignError> {
    assert!(!stages.is_empty(), "at least one stage");
    let mut breakdown = LossBreakdown::default();
    let mut total = g.constant(scalar(0.0));
    for (s, stage) in stages.iter().enumerate() {
        let class_arr = g
            .value(stage.class_logits)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("class logits 2-D");
        let mask_arr = g
            .value(stage.mask_logits)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("mask logits 3-D");
        let assignment = if gt.is_empty() {
            Vec::new()
        } else {
            let cost = match_cost(&class_arr, &mask_arr, gt, &w.cost);
            hungarian_match(&cost)?
        };
        let b = mask_cls_loss(g, stage.mask_logits, stage.class_logits, gt, &assignment, table, w);
        let mut mask_term = b.mask_total;
        let mut cls_term = b.cls;
        let mut depth_term = g.constant(scalar(0.0));
        if let Some(depth_maps) = stage.depth_maps {
            let (hf, wf) = (mask_arr.shape()[1], mask_arr.shape()[2]);
            let n = mask_arr.shape()[0];
            let flat = g.reshape(depth_maps, &[n, hf * wf]);
            let mut terms = Vec::new();
            for (j, &i) in assignment.iter().enumerate() {
                let gt_d = gt
                    .depths
                    .index_axis(ndarray::Axis(0), j)
                    .to_owned();
                let valid = gt
                    .depth_valid
                    .index_axis(ndarray::Axis(0), j)
                    .to_owned();
                if valid.sum() < 0.5 {
                    continue;
                }
                let row = g.slice_rows(flat, i, i + 1);
                let pred = g.reshape(row, &[hf, wf]);
                let t = depth_loss(g, pred, &gt_d, &valid, w.si_lambda);
                terms.push(t.total);
            }
            if !terms.is_empty() {
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t);
                }
                depth_term = g.scale(acc, 1.0 / terms.len() as f64);
            }
        }
        if s == 0 {
            if let Some(sem) = sem_logits {
                let ce = semantic_ce(g, sem, &gt.semantic, table);
                mask_term = g.add(mask_term, ce);
            }
            if let Some(dd) = dense_depth {
                let (hf, wf) = (gt.dense_depth.nrows(), gt.dense_depth.ncols());
                let pred = g.reshape(dd, &[hf, wf]);
                let t = depth_loss(g, pred, &gt.dense_depth, &gt.dense_depth_valid, w.si_lambda);
                depth_term = g.add(depth_term, t.total);
            }
        }
        breakdown.stages.push(StageLossValues {
            depth: g.scalar_value(depth_term),
            mask: g.scalar_value(mask_term),
            cls: g.scalar_value(cls_term),
        });
        let dw = g.scale(depth_term, w.w_depth);
        let mw = g.scale(mask_term, w.w_mask);
        cls_term = g.scale(cls_term, w.w_cls);
        let stage_sum_a = g.add(dw, mw);
        let stage_sum = g.add(stage_sum_a, cls_term);
        let weighted = g.scale(stage_sum, w.stage_weight(s));
        total = g.add(total, weighted);
    }
    if let Some(t) = track {
        breakdown.track = g.scalar_value(t);
        let tw = g.scale(t, w.w_track);
        total = g.add(total, tw);
    }
    breakdown.total = g.scalar_value(total);
    Ok((total, breakdown))
}

/// Per-pixel cross-entropy of the dense semantic logits `(K, Hf, Wf)`
/// against index targets (`usize::MAX` entries are ignored).
pub fn semantic_ce(
    g: &mut Graph,
    sem_logits: Var,
    targets: &Array2<usize>,
    table: &ClassTable,
) -> Var {
    let k = table.num_classes();
    let (hf, wf) = targets.dim();
    let flat = g.reshape(sem_logits, &[k, hf * wf]);
    let t = g.transpose(flat); // (HW, K)
    let lp = g.log_softmax_rows(t);
    let mut onehot = Array2::<f64>::zeros((hf * wf, k));
    let mut count = 0usize;
    for (px, &c) in targets.iter().enumerate() {
        if c != usize::MAX {
            onehot[[px, c]] = 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return g.constant(scalar(0.0));
    }
    let oh = g.constant(onehot.into_dyn());
    let sel = g.mul(lp, oh);
    let s = g.sum_all(sel);
    g.scale(s, -1.0 / count as f64)
}
