//! Dataset-level evaluation and report emission: runs inference over
//! sequences, accumulates every metric, and renders the results as a text
//! table, a machine-readable key/value file, and static PNG figures (the
//! DVPQ grid and a depth-error heatmap).

use crate::fuse::{infer_frame, FuseError, FuseThresholds, PanopticDepthResult};
use crate::metrics::{
    boundary_depth_gradient, depth_aware_instances, depth_stats, dstq, dvpq_windows,
    panoptic_quality, stq_stats, AqStats, DepthStats, DvpqValue, DvpqWindows, FrameMaps,
    MetricError, PqStats, SqStats,
};
use crate::model::Model;
use crate::synthgen::ClipSample;
use crate::tracker::TrackMemory;
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Fuse(#[from] FuseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] crate::synthgen::SynthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug)]
pub struct DvpqCell {
    pub k: usize,
    pub lambda: f64,
    pub value: DvpqValue,
}

/// All metrics of one evaluation run. Fractions in [0, 1]; the renderers
/// multiply by 100 for display.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub dvpq: Vec<DvpqCell>,
    pub pq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
    pub pq_per_class: BTreeMap<u16, f64>,
    pub aq: f64,
    pub sq: f64,
    pub dq: f64,
    pub dstq: f64,
    pub abs_rel: f64,
    pub depth_aware: (usize, usize),
    /// Stage-0 dense-depth baselines for the same frames.
    pub dense_abs_rel: f64,
    pub dense_dq: f64,
    pub dense_depth_aware: (usize, usize),
    pub boundary_grad_query: f64,
    pub boundary_grad_dense: f64,
    pub config_hash: String,
}

#[derive(Default)]
struct Accumulator {
    dvpq: BTreeMap<(usize, u64), DvpqWindows>,
    pq: PqStats,
    aq: AqStats,
    sq: SqStats,
    depth: DepthStats,
    dense_depth: DepthStats,
    aware: (usize, usize),
    dense_aware: (usize, usize),
    boundary_query: Vec<f64>,
    boundary_dense: Vec<f64>,
}

fn lambda_key(l: f64) -> u64 {
    l.to_bits()
}

/// Run the model over every clip and accumulate the full metric set.
/// When `pred_root` is given, predictions are written there in the dataset
/// format (`panoptic_<t>.pan`, `depth_<t>.dpt` per clip directory).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_clips(
    model: &Model,
    clips: &[(String, ClipSample)],
    ks: &[usize],
    lambdas: &[f64],
    th: &FuseThresholds,
    momentum: f64,
    evict_after: usize,
    pred_root: Option<&Path>,
    config_hash: &str,
) -> Result<MetricReport, ReportError> {
    let things: BTreeSet<u16> = model.config.thing_classes.iter().copied().collect();
    let mut acc = Accumulator::default();
    for (clip_id, clip) in clips {
        let gt_seq = FrameMaps::seq_from_clip(clip);
        let mut memory = TrackMemory::new(momentum, evict_after);
        let mut pred_seq = Vec::with_capacity(clip.frames());
        let mut dense_seq = Vec::with_capacity(clip.frames());
        for t in 0..clip.frames() {
            let img = clip.image_f64(t);
            let r: PanopticDepthResult = infer_frame(model, &img, &mut memory, t, th)?;
            if let Some(root) = pred_root {
                let dir = root.join(clip_id);
                std::fs::create_dir_all(&dir)?;
                crate::synthgen::write_pan(
                    &dir.join(format!("panoptic_{t}.pan")),
                    &r.class,
                    &r.instance,
                )?;
                crate::synthgen::write_dpt(&dir.join(format!("depth_{t}.dpt")), &r.depth)?;
            }
            dense_seq.push(r.dense_depth.clone());
            pred_seq.push(FrameMaps { class: r.class, instance: r.instance, depth: r.depth });
        }
        for &k in ks {
            if k > clip.frames() {
                continue;
            }
            for &l in lambdas {
                let w = dvpq_windows(&pred_seq, &gt_seq, k, l, &things)?;
                acc.dvpq.entry((k, lambda_key(l))).or_default().merge(w);
            }
        }
        for (p, gt) in pred_seq.iter().zip(gt_seq.iter()) {
            let stats = panoptic_quality(&p.class, &p.instance, &gt.class, &gt.instance, &things)?;
            acc.pq.merge(&stats);
            acc.depth.merge(&depth_stats(&p.depth, &gt.depth));
            let aware = depth_aware_instances(&p.depth, &gt.depth, &gt.instance);
            acc.aware.0 += aware.0;
            acc.aware.1 += aware.1;
            if let Some(bg) = boundary_depth_gradient(&p.depth, &gt.instance) {
                acc.boundary_query.push(bg);
            }
        }
        for ((dense, gt), _) in dense_seq.iter().zip(gt_seq.iter()).zip(0..) {
            acc.dense_depth.merge(&depth_stats(dense, &gt.depth));
            let aware = depth_aware_instances(dense, &gt.depth, &gt.instance);
            acc.dense_aware.0 += aware.0;
            acc.dense_aware.1 += aware.1;
            if let Some(bg) = boundary_depth_gradient(dense, &gt.instance) {
                acc.boundary_dense.push(bg);
            }
        }
        let (aq_c, sq_c) = stq_stats(&pred_seq, &gt_seq)?;
        acc.aq.merge(aq_c);
        acc.sq.merge(&sq_c);
    }
    let mut dvpq = Vec::new();
    for &k in ks {
        for &l in lambdas {
            if let Some(w) = acc.dvpq.get(&(k, lambda_key(l))) {
                dvpq.push(DvpqCell { k, lambda: l, value: w.finalize() });
            }
        }
    }
    let aq = acc.aq.aq();
    let sq = acc.sq.sq();
    let dq = acc.depth.dq()?;
    let pq_per_class: BTreeMap<u16, f64> = acc
        .pq
        .per_class
        .iter()
        .filter(|(_, s)| s.active())
        .map(|(&c, s)| (c, s.pq()))
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricReport {
        dvpq,
        pq: acc.pq.pq().unwrap_or(1.0),
        pq_thing: acc.pq.pq_where(|c| things.contains(&c)).unwrap_or(1.0),
        pq_stuff: acc.pq.pq_where(|c| !things.contains(&c)).unwrap_or(1.0),
        pq_per_class,
        aq,
        sq,
        dq,
        dstq: dstq(aq, sq, dq),
        abs_rel: acc.depth.abs_rel()?,
        depth_aware: acc.aware,
        dense_abs_rel: acc.dense_depth.abs_rel()?,
        dense_dq: acc.dense_depth.dq()?,
        dense_depth_aware: acc.dense_aware,
        boundary_grad_query: mean(&acc.boundary_query),
        boundary_grad_dense: mean(&acc.boundary_dense),
        config_hash: config_hash.to_string(),
    })
}

fn fmt_lambda(l: f64) -> String {
    if l.is_infinite() {
        "inf".to_string()
    } else {
        format!("{l}")
    }
}

impl MetricReport {
    /// Table in the usual grid layout: one row per lambda, one column per
    /// window size, each cell "DVPQ | Thing | Stuff" (x100).
    pub fn text_table(&self) -> String {
        let mut ks: Vec<usize> = self.dvpq.iter().map(|c| c.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut lambdas: Vec<f64> = self.dvpq.iter().map(|c| c.lambda).collect();
        lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lambdas.dedup_by(|a, b| a == b);
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.config_hash);
        let _ = write!(out, "{:<14}", "DVPQ^k_l");
        for &k in &ks {
            let _ = write!(out, "{:<24}", format!("k = {k}"));
        }
        let _ = writeln!(out, "Average");
        for &l in &lambdas {
            let _ = write!(out, "{:<14}", format!("lambda = {}", fmt_lambda(l)));
            let mut avg = (0.0, 0.0, 0.0);
            let mut n = 0;
            for &k in &ks {
                if let Some(c) = self
                    .dvpq
                    .iter()
                    .find(|c| c.k == k && c.lambda.to_bits() == l.to_bits())
                {
                    let v = c.value;
                    let _ = write!(
                        out,
                        "{:<24}",
                        format!(
                            "{:.1} | {:.1} | {:.1}",
                            v.all * 100.0,
                            v.thing * 100.0,
                            v.stuff * 100.0
                        )
                    );
                    avg.0 += v.all;
                    avg.1 += v.thing;
                    avg.2 += v.stuff;
                    n += 1;
                }
            }
            if n > 0 {
                let _ = write!(
                    out,
                    "{:.1} | {:.1} | {:.1}",
                    avg.0 / n as f64 * 100.0,
                    avg.1 / n as f64 * 100.0,
                    avg.2 / n as f64 * 100.0
                );
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "PQ {:.1}  (thing {:.1} / stuff {:.1})",
            self.pq * 100.0,
            self.pq_thing * 100.0,
            self.pq_stuff * 100.0
        );
        for (c, v) in &self.pq_per_class {
            let _ = writeln!(out, "  class {c}: PQ {:.1}", v * 100.0);
        }
        let _ = writeln!(
            out,
            "AQ {:.3}  SQ {:.3}  DQ@0.1 {:.3}  DSTQ {:.3}",
            self.aq, self.sq, self.dq, self.dstq
        );
        let _ = writeln!(
            out,
            "abs rel {:.4} (dense baseline {:.4})",
            self.abs_rel, self.dense_abs_rel
        );
        let _ = writeln!(
            out,
            "depth-aware instances {}/{} = {:.1}% (dense baseline {}/{} = {:.1}%)",
            self.depth_aware.0,
            self.depth_aware.1,
            percent(self.depth_aware),
            self.dense_depth_aware.0,
            self.dense_depth_aware.1,
            percent(self.dense_depth_aware),
        );
        let _ = writeln!(
            out,
            "boundary depth step: query {:.3} m vs dense {:.3} m",
            self.boundary_grad_query, self.boundary_grad_dense
        );
        out
    }

    /// Machine-readable key/value lines, one per metric and per (k, lambda)
    /// cell.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config_hash={}", self.config_hash);
        for c in &self.dvpq {
            let l = fmt_lambda(c.lambda);
            let _ = writeln!(out, "dvpq.k{}.l{}.all={:.6}", c.k, l, c.value.all);
            let _ = writeln!(out, "dvpq.k{}.l{}.thing={:.6}", c.k, l, c.value.thing);
            let _ = writeln!(out, "dvpq.k{}.l{}.stuff={:.6}", c.k, l, c.value.stuff);
        }
        let _ = writeln!(out, "pq={:.6}", self.pq);
        let _ = writeln!(out, "pq_thing={:.6}", self.pq_thing);
        let _ = writeln!(out, "pq_stuff={:.6}", self.pq_stuff);
        for (c, v) in &self.pq_per_class {
            let _ = writeln!(out, "pq.class{c}={v:.6}");
        }
        let _ = writeln!(out, "aq={:.6}", self.aq);
        let _ = writeln!(out, "sq={:.6}", self.sq);
        let _ = writeln!(out, "dq@0.1={:.6}", self.dq);
        let _ = writeln!(out, "dstq={:.6}", self.dstq);
        let _ = writeln!(out, "abs_rel={:.6}", self.abs_rel);
        let _ = writeln!(out, "dense_abs_rel={:.6}", self.dense_abs_rel);
        let _ = writeln!(out, "dense_dq@0.1={:.6}", self.dense_dq);
        let _ = writeln!(
            out,
            "depth_aware={}/{}",
            self.depth_aware.0, self.depth_aware.1
        );
        let _ = writeln!(
            out,
            "dense_depth_aware={}/{}",
            self.dense_depth_aware.0, self.dense_depth_aware.1
        );
        let _ = writeln!(out, "boundary_grad_query={:.6}", self.boundary_grad_query);
        let _ = writeln!(out, "boundary_grad_dense={:.6}", self.boundary_grad_dense);
        out
    }
}

fn percent(x: (usize, usize)) -> f64 {
    if x.1 == 0 {
        0.0
    } else {
        100.0 * x.0 as f64 / x.1 as f64
    }
}

// ---- figures -----------------------------------------------------------------

fn heat_color(t: f64) -> [u8; 3] {
    // dark blue -> cyan -> yellow -> red
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.33 {
        let u = t / 0.33;
        (0.0, u, 0.5 + 0.5 * u)
    } else if t < 0.66 {
        let u = (t - 0.33) / 0.33;
        (u, 1.0, 1.0 - u)
    } else {
        let u = (t - 0.66) / 0.34;
        (1.0, 1.0 - u, 0.0)
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Render the DVPQ grid (rows = lambda, cols = k) as a PNG heatmap.
pub fn render_dvpq_grid(report: &MetricReport, path: &Path) -> Result<(), ReportError> {
    let mut ks: Vec<usize> = report.dvpq.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut lambdas: Vec<u64> = report.dvpq.iter().map(|c| c.lambda.to_bits()).collect();
    lambdas.sort_by(|a, b| {
        f64::from_bits(*a)
            .partial_cmp(&f64::from_bits(*b))
            .unwrap()
    });
    lambdas.dedup();
    let cell = 48usize;
    let (w, h) = (ks.len().max(1) * cell, lambdas.len().max(1) * cell);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (row, &lb) in lambdas.iter().enumerate() {
        for (col, &k) in ks.iter().enumerate() {
            let v = report
                .dvpq
                .iter()
                .find(|c| c.k == k && c.lambda.to_bits() == lb)
                .map(|c| c.value.all)
                .unwrap_or(0.0);
            let color = heat_color(v);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(
                        (col * cell + x) as u32,
                        (row * cell + y) as u32,
                        image::Rgb(color),
                    );
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
    Ok(())
}

/// Render a per-pixel relative depth error heatmap for one frame.
pub fn render_depth_error_heatmap(
    pred: &Array2<f32>,
    gt: &Array2<f32>,
    path: &Path,
) -> Result<(), ReportError> {
    let (h, w) = gt.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = gt[[y, x]];
            let t = if g > 0.0 {
                (((pred[[y, x]] - g).abs() / g) as f64 / 0.5).min(1.0)
            } else {
                0.0
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(heat_color(t)));
        }
    }
    img.save(path)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
    Ok(())
}

/// Loss-curve data file: one `epoch,loss,lr` line per epoch.
pub fn write_loss_curve(history: &[crate::train::EpochStats], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("epoch,loss,lr\n");
    for s in history {
        let _ = writeln!(out, "{},{},{}", s.epoch, s.mean_loss, s.lr);
    }
    std::fs::write(path, out)
}
