//! Independent oracles and fixtures shared by the integration tests. The
//! oracles here are deliberately written as plain loops and set operations
//! so they share no code with the implementation paths they check.

use dvps_core::assignloss::{ClassTable, CostWeights, GtSet};
use dvps_core::graph::{Graph, Var};
use dvps_core::metrics::{dvpq, FrameMaps, PqStats};
use dvps_core::nn::ParamStore;
use dvps_core::polyhead::{GateVars, LinVars};
use dvps_core::synthgen::VOID_CLASS;
use dvps_core::testutil::seeded_arr;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashSet};

pub fn things() -> BTreeSet<u16> {
    [2u16, 3, 4].into_iter().collect()
}

// ---- random instances ------------------------------------------------------

pub fn random_gtset(rng: &mut ChaCha8Rng, seed: u64, m: usize, hf: usize, wf: usize) -> GtSet {
    let _ = rng;
    let mut local = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut masks = Array3::<f64>::zeros((m, hf, wf));
    for k in 0..m {
        for y in 0..hf {
            for x in 0..wf {
                if local.random_bool(0.35) {
                    masks[[k, y, x]] = 1.0;
                }
            }
        }
        masks[[k, k % hf, (k * 2) % wf]] = 1.0;
    }
    let depths = masks.mapv(|v| v * 12.0);
    let depth_valid = masks.clone();
    GtSet {
        masks,
        class_indices: (0..m).map(|k| 2 + (k % 3)).collect(),
        depths,
        depth_valid,
        is_thing: vec![true; m],
        track_ids: (1..=m as u16).collect(),
        dense_depth: Array2::from_elem((hf, wf), 10.0),
        dense_depth_valid: Array2::from_elem((hf, wf), 1.0),
        semantic: Array2::from_elem((hf, wf), 0),
    }
}

/// Independent scalar formula for one match-cost entry.
pub fn scalar_match_cost(
    class_logits: &Array2<f64>,
    mask_logits: &Array3<f64>,
    gt: &GtSet,
    w: &CostWeights,
    i: usize,
    j: usize,
) -> f64 {
    let k1 = class_logits.ncols();
    let mx = class_logits
        .row(i)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = (0..k1).map(|k| (class_logits[[i, k]] - mx).exp()).sum();
    let p = (class_logits[[i, gt.class_indices[j]]] - mx).exp() / z;
    let (hf, wf) = (mask_logits.shape()[1], mask_logits.shape()[2]);
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    let mut bce = 0.0;
    for y in 0..hf {
        for x in 0..wf {
            let l = mask_logits[[i, y, x]];
            let pr = 1.0 / (1.0 + (-l).exp());
            let t = gt.masks[[j, y, x]];
            inter += pr * t;
            psum += pr;
            gsum += t;
            bce += -(t * pr.ln() + (1.0 - t) * (1.0 - pr).ln());
        }
    }
    let dice = (2.0 * inter + 1e-3) / (psum + gsum + 1e-3);
    w.w_cls * (-p) + w.w_dice * (1.0 - dice) + w.w_bce * bce / (hf * wf) as f64
}

/// Blocky random panoptic maps: rectangles of thing classes over a stuff
/// base, with an occasional void patch.
pub fn random_panoptic_maps(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array2<u16>, Array2<u16>) {
    let base = if rng.random_bool(0.5) { 0 } else { 1 };
    let mut class = Array2::<u16>::from_elem((h, w), base);
    let mut inst = Array2::<u16>::zeros((h, w));
    let n = rng.random_range(0..5);
    for id in 1..=n {
        let c = [2u16, 3, 4][rng.random_range(0..3)];
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let hh = rng.random_range(1..=h / 2);
        let ww = rng.random_range(1..=w / 2);
        for y in y0..(y0 + hh).min(h) {
            for x in x0..(x0 + ww).min(w) {
                class[[y, x]] = c;
                inst[[y, x]] = id as u16;
            }
        }
    }
    if rng.random_bool(0.3) {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        for y in y0..(y0 + 3).min(h) {
            for x in x0..(x0 + 3).min(w) {
                class[[y, x]] = VOID_CLASS;
            }
        }
    }
    (class, inst)
}

/// Set-based PQ oracle with the standard void conventions.
pub fn pq_set_oracle(
    pc: &Array2<u16>,
    pi: &Array2<u16>,
    gc: &Array2<u16>,
    gi: &Array2<u16>,
    things: &BTreeSet<u16>,
) -> PqStats {
    let key = |c: u16, i: u16| if things.contains(&c) { (c, i) } else { (c, 0) };
    let mut pred: BTreeMap<(u16, u16), HashSet<(usize, usize)>> = BTreeMap::new();
    let mut gt: BTreeMap<(u16, u16), HashSet<(usize, usize)>> = BTreeMap::new();
    let mut void: HashSet<(usize, usize)> = HashSet::new();
    let (h, w) = pc.dim();
    for y in 0..h {
        for x in 0..w {
            if gc[[y, x]] == VOID_CLASS {
                void.insert((y, x));
            } else {
                gt.entry(key(gc[[y, x]], gi[[y, x]])).or_default().insert((y, x));
            }
            if pc[[y, x]] != VOID_CLASS {
                pred.entry(key(pc[[y, x]], pi[[y, x]])).or_default().insert((y, x));
            }
        }
    }
    let mut stats = PqStats::default();
    let mut matched_p = HashSet::new();
    let mut matched_g = HashSet::new();
    for (pk, pset) in &pred {
        for (gk, gset) in &gt {
            if pk.0 != gk.0 {
                continue;
            }
            let inter = pset.intersection(gset).count();
            let pv = pset.intersection(&void).count();
            let union = pset.len() + gset.len() - inter - pv;
            if union == 0 {
                continue;
            }
            if inter as f64 / union as f64 > 0.5 {
                let e = stats.per_class.entry(pk.0).or_default();
                e.tp += 1;
                e.iou_sum += inter as f64 / union as f64;
                matched_p.insert(*pk);
                matched_g.insert(*gk);
            }
        }
    }
    for (pk, pset) in &pred {
        if matched_p.contains(pk) {
            continue;
        }
        let pv = pset.intersection(&void).count();
        if pv as f64 / pset.len() as f64 > 0.5 {
            continue;
        }
        stats.per_class.entry(pk.0).or_default().fp += 1;
    }
    for gk in gt.keys() {
        if !matched_g.contains(gk) {
            stats.per_class.entry(gk.0).or_default().fn_ += 1;
        }
    }
    stats
}

pub fn assert_pq_stats_equal(fast: &PqStats, slow: &PqStats, trial: u64) {
    assert_eq!(fast.per_class.len(), slow.per_class.len(), "trial {trial}");
    for (c, s) in &fast.per_class {
        let o = &slow.per_class[c];
        assert_eq!((s.tp, s.fp, s.fn_), (o.tp, o.fp, o.fn_), "trial {trial} class {c}");
        assert!((s.iou_sum - o.iou_sum).abs() < 1e-9, "trial {trial} class {c}");
    }
}

/// Random aligned sequences without depth structure.
pub fn random_sequences(
    rng: &mut ChaCha8Rng,
    t: usize,
    h: usize,
    w: usize,
    _seed: u64,
) -> (Vec<FrameMaps>, Vec<FrameMaps>) {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..t {
        let (gc, gi) = random_panoptic_maps(rng, h, w);
        let (pc, pi) = random_panoptic_maps(rng, h, w);
        let gd = Array2::<f32>::from_shape_fn((h, w), |_| rng.random_range(2.0..60.0));
        let pd = gd.mapv(|d| d * rng.random_range(0.7..1.4));
        gt.push(FrameMaps { class: gc, instance: gi, depth: gd });
        pred.push(FrameMaps { class: pc, instance: pi, depth: pd });
    }
    (pred, gt)
}

/// Random sequences where the prediction is a noisy copy of the ground
/// truth, so depth-masked PQ varies meaningfully with lambda.
pub fn random_sequences_with_depth(
    rng: &mut ChaCha8Rng,
    t: usize,
    h: usize,
    w: usize,
    _seed: u64,
) -> (Vec<FrameMaps>, Vec<FrameMaps>) {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..t {
        let (gc, gi) = random_panoptic_maps(rng, h, w);
        let gd = Array2::<f32>::from_shape_fn((h, w), |_| rng.random_range(2.0..60.0));
        // prediction: mostly correct panoptics, per-pixel depth noise
        let mut pc = gc.clone();
        let mut pi = gi.clone();
        for y in 0..h {
            for x in 0..w {
                if rng.random_bool(0.08) {
                    pc[[y, x]] = [0u16, 1, 2, 3, 4][rng.random_range(0..5)];
                    pi[[y, x]] = rng.random_range(0..3) as u16;
                }
            }
        }
        let pd = gd.mapv(|d| d * (1.0 + rng.random_range(-0.6..0.6f32)));
        gt.push(FrameMaps { class: gc, instance: gi, depth: gd });
        pred.push(FrameMaps { class: pc, instance: pi, depth: pd });
    }
    (pred, gt)
}

/// Prediction with the ground-truth panoptics and per-segment depth error:
/// each segment carries one flat ground-truth depth and one multiplicative
/// prediction error, so shrinking lambda voids whole segments at a time.
/// This isolates the depth-masking axis of `DVPQ^k_lambda` (and mirrors
/// per-query depth prediction, where error is instance-level).
pub fn noisy_depth_pair(
    rng: &mut ChaCha8Rng,
    t: usize,
    h: usize,
    w: usize,
    _seed: u64,
) -> (Vec<FrameMaps>, Vec<FrameMaps>) {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut seg_depth: BTreeMap<(u16, u16), (f32, f32)> = BTreeMap::new();
    for _ in 0..t {
        let (gc, gi) = random_panoptic_maps(rng, h, w);
        let mut gd = Array2::<f32>::zeros((h, w));
        let mut pd = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if gc[[y, x]] == VOID_CLASS {
                    continue;
                }
                let key = (gc[[y, x]], gi[[y, x]]);
                let (g, p) = *seg_depth.entry(key).or_insert_with(|| {
                    let g = rng.random_range(2.0..60.0f32);
                    let err = rng.random_range(-0.8..0.8f32).max(-0.9);
                    (g, g * (1.0 + err))
                });
                gd[[y, x]] = g;
                pd[[y, x]] = p;
            }
        }
        gt.push(FrameMaps { class: gc.clone(), instance: gi.clone(), depth: gd });
        pred.push(FrameMaps { class: gc, instance: gi, depth: pd });
    }
    (pred, gt)
}

/// Brute-force DVPQ: build each concatenated window pane explicitly, apply
/// depth voiding per pixel, run the set-based PQ oracle, average.
pub fn check_dvpq_against_window_oracle(rng: &mut ChaCha8Rng, trial: u64) {
    let t = rng.random_range(2..5);
    let (h, w) = (6, 6);
    let (pred, gt) = random_sequences_with_depth(rng, t, h, w, trial);
    let k = rng.random_range(1..=t);
    let lambda = [0.1, 0.25, 0.5, f64::INFINITY][rng.random_range(0..4)];
    let fast = dvpq(&pred, &gt, k, lambda, &things()).unwrap();

    let mut window_pqs: Vec<Option<f64>> = Vec::new();
    for start in 0..=(t - k) {
        let mut pc = Array2::<u16>::zeros((h, w * k));
        let mut pi = Array2::<u16>::zeros((h, w * k));
        let mut gc = Array2::<u16>::zeros((h, w * k));
        let mut gi = Array2::<u16>::zeros((h, w * k));
        for j in 0..k {
            let f = start + j;
            for y in 0..h {
                for x in 0..w {
                    let mut cls = pred[f].class[[y, x]];
                    let gd = gt[f].depth[[y, x]];
                    if gd > 0.0 && lambda.is_finite() {
                        let err = ((pred[f].depth[[y, x]] - gd).abs() / gd) as f64;
                        if err > lambda {
                            cls = VOID_CLASS;
                        }
                    }
                    pc[[y, j * w + x]] = cls;
                    pi[[y, j * w + x]] = pred[f].instance[[y, x]];
                    gc[[y, j * w + x]] = gt[f].class[[y, x]];
                    gi[[y, j * w + x]] = gt[f].instance[[y, x]];
                }
            }
        }
        let stats = pq_set_oracle(&pc, &pi, &gc, &gi, &things());
        let vals: Vec<f64> = stats
            .per_class
            .iter()
            .filter(|(_, s)| s.tp + s.fp + s.fn_ > 0)
            .map(|(_, s)| s.pq())
            .collect();
        window_pqs.push(if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        });
    }
    let some: Vec<f64> = window_pqs.iter().filter_map(|v| *v).collect();
    let want = if some.is_empty() {
        1.0
    } else {
        some.iter().sum::<f64>() / some.len() as f64
    };
    assert!(
        (fast.all - want).abs() < 1e-9,
        "trial {trial}: DVPQ {} vs window oracle {want}",
        fast.all
    );
}

/// Explicit STEP-style AQ oracle over prediction/ground-truth tubes.
pub fn check_aq_against_step_oracle(rng: &mut ChaCha8Rng, trial: u64) {
    let t = rng.random_range(2..5);
    let (h, w) = (6, 6);
    let (pred, gt) = random_sequences(rng, t, h, w, trial);
    let (aq_fast, _) = dvps_core::metrics::stq_components(&pred, &gt).unwrap();

    // tubes as explicit voxel sets, void excluded
    let mut gt_tubes: BTreeMap<u16, HashSet<(usize, usize, usize)>> = BTreeMap::new();
    let mut pr_tubes: BTreeMap<u16, HashSet<(usize, usize, usize)>> = BTreeMap::new();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                if gt[f].class[[y, x]] == VOID_CLASS {
                    continue;
                }
                let gi = gt[f].instance[[y, x]];
                if gi > 0 {
                    gt_tubes.entry(gi).or_default().insert((f, y, x));
                }
                let pi = pred[f].instance[[y, x]];
                if pi > 0 {
                    pr_tubes.entry(pi).or_default().insert((f, y, x));
                }
            }
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for tube in gt_tubes.values() {
        let mut score = 0.0;
        for p in pr_tubes.values() {
            let tpa = p.intersection(tube).count();
            if tpa == 0 {
                continue;
            }
            let union = p.len() + tube.len() - tpa;
            score += tpa as f64 * (tpa as f64 / union as f64);
        }
        total += score / tube.len() as f64;
        count += 1;
    }
    let want = if count == 0 { 1.0 } else { total / count as f64 };
    assert!(
        (aq_fast - want).abs() < 1e-9,
        "trial {trial}: AQ {aq_fast} vs oracle {want}"
    );
}

/// Random confident thing masks through `merge_panoptic`, compared against
/// a sequential painter loop.
pub fn check_merge_panoptic_against_painter(rng: &mut ChaCha8Rng, seed: u64) {
    let _ = seed;
    let table = ClassTable::new(&[2, 3, 4], &[0, 1]);
    let n = rng.random_range(1..5);
    let (hf, wf) = (10, 10);
    let mut mask_logits = Array3::<f64>::from_elem((n, hf, wf), -9.0);
    let mut confs: Vec<f64> = Vec::new();
    for q in 0..n {
        let y0 = rng.random_range(0..hf - 2);
        let x0 = rng.random_range(0..wf - 2);
        let hh = rng.random_range(2..=hf - y0);
        let ww = rng.random_range(2..=wf - x0);
        for y in y0..y0 + hh {
            for x in x0..x0 + ww {
                mask_logits[[q, y, x]] = 9.0;
            }
        }
        confs.push(rng.random_range(0.4..0.99));
    }
    let k1 = table.num_classes() + 1;
    let mut class_logits = Array2::<f64>::zeros((n, k1));
    for q in 0..n {
        let cls_idx = 2 + (q % 3);
        let z = (confs[q] * k1 as f64 / (1.0 - confs[q])).ln();
        class_logits[[q, cls_idx]] = z;
    }
    let sem = Array2::<u16>::zeros((hf, wf));
    let th = dvps_core::fuse::FuseThresholds {
        keep_conf: 0.3,
        overlap_keep: 0.4,
        min_area: 3,
        tau: 0.3,
    };
    let merged = dvps_core::fuse::merge_panoptic(&class_logits, &mask_logits, &sem, &table, &th);

    // painter oracle: recompute realized confidences, sort, paint
    let mut realized: Vec<(usize, f64)> = (0..n)
        .map(|q| {
            let row: Vec<f64> = class_logits.row(q).iter().copied().collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let conf = row
                .iter()
                .take(table.num_classes())
                .map(|v| (v - mx).exp() / z)
                .fold(f64::NEG_INFINITY, f64::max);
            (q, conf)
        })
        .filter(|(_, c)| *c >= th.keep_conf)
        .collect();
    realized.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut owner = Array2::<i32>::from_elem((hf, wf), -1);
    for (q, _) in realized {
        let mut cells = Vec::new();
        let mut area = 0usize;
        for y in 0..hf {
            for x in 0..wf {
                if mask_logits[[q, y, x]] > 0.0 {
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
        if (cells.len() as f64 / area as f64) < th.overlap_keep || cells.len() < th.min_area {
            continue;
        }
        for (y, x) in cells {
            owner[[y, x]] = q as i32;
        }
    }
    assert_eq!(merged.owner, owner, "painter oracle disagreement");
}

/// Brute-force assignment enumeration in lexicographic order; the first
/// strict minimum realizes the lowest-query-index tie break.
pub fn enumerate_min(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let (n, m) = cost.dim();
    fn rec(
        cost: &Array2<f64>,
        j: usize,
        m: usize,
        n: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if j == m {
            let total: f64 = current.iter().enumerate().map(|(jj, &i)| cost[[i, jj]]).sum();
            match best {
                Some((_, t)) if total >= *t - 1e-12 => {}
                _ => *best = Some((current.clone(), total)),
            }
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                current.push(i);
                rec(cost, j + 1, m, n, used, current, best);
                current.pop();
                used[i] = false;
            }
        }
    }
    let mut best = None;
    rec(cost, 0, m, n, &mut vec![false; n], &mut Vec::new(), &mut best);
    best.expect("m <= n")
}

// ---- graph fixtures -----------------------------------------------------------

pub fn const_gate(g: &mut Graph, c: usize, seed: u64) -> GateVars {
    let lin = |g: &mut Graph, s: u64| LinVars {
        w: g.constant(seeded_arr(&[c, c], s)),
        b: g.constant(seeded_arr(&[c], s + 1)),
    };
    GateVars {
        phi_x: lin(g, seed),
        phi_q: lin(g, seed + 2),
        psi_gq: lin(g, seed + 4),
        psi_gx: lin(g, seed + 6),
        psi_x: lin(g, seed + 8),
        psi_q: lin(g, seed + 10),
    }
}

pub fn tiny_featnet_store(channels: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    dvps_core::featnet::init_params(&mut s, &mut rng, channels);
    s
}

/// Scalar readout of both feature maps with one substituted parameter, for
/// weight-space gradient checks on the feature extractor.
pub fn featnet_readout(
    g: &mut Graph,
    store: &ParamStore,
    pname: &str,
    pvar: Var,
    img: &ArrayD<f64>,
    readout: &ArrayD<f64>,
) -> Var {
    let mut bound: std::collections::HashMap<String, Var> = Default::default();
    for (name, value) in store.iter() {
        let v = if name == pname { pvar } else { g.constant(value.clone()) };
        bound.insert(name.clone(), v);
    }
    let neck = |g2: &Bound2, path: &str| dvps_core::featnet::NeckVars {
        lat2: (g2[&format!("featnet.neck.{path}.lat2.w")], g2[&format!("featnet.neck.{path}.lat2.b")]),
        lat3: (g2[&format!("featnet.neck.{path}.lat3.w")], g2[&format!("featnet.neck.{path}.lat3.b")]),
        lat4: (g2[&format!("featnet.neck.{path}.lat4.w")], g2[&format!("featnet.neck.{path}.lat4.b")]),
        out: (g2[&format!("featnet.neck.{path}.out.w")], g2[&format!("featnet.neck.{path}.out.b")]),
    };
    type Bound2 = std::collections::HashMap<String, Var>;
    let fv = dvps_core::featnet::FeatNetVars {
        convs: [
            (bound["featnet.conv1.w"], bound["featnet.conv1.b"]),
            (bound["featnet.conv2.w"], bound["featnet.conv2.b"]),
            (bound["featnet.conv3.w"], bound["featnet.conv3.b"]),
            (bound["featnet.conv4.w"], bound["featnet.conv4.b"]),
        ],
        pan: neck(&bound, "pan"),
        dep: neck(&bound, "dep"),
    };
    let image = g.constant(img.clone());
    let pair = dvps_core::featnet::extract_features(g, image, &fv).unwrap();
    let w1 = g.constant(readout.clone());
    let r1 = g.mul(pair.x_pan, w1);
    let w2 = g.constant(readout.clone());
    let r2 = g.mul(pair.x_dep, w2);
    let s1 = g.sum_all(r1);
    let s2 = g.sum_all(r2);
    g.add(s1, s2)
}

#[allow(dead_code)]
pub fn unused_ixdyn() -> IxDyn {
    IxDyn(&[])
}
