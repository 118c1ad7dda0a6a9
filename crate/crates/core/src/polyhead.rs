//! The query-refinement head: stage-0 dense initialization followed by
//! refinement stages on paired panoptic and depth paths. Each stage groups
//! both feature maps with the previous stage's mask probabilities, runs a
//! gated query update per path, links the freshly updated panoptic query
//! into the depth query, and reasons the refined queries back into mask
//! logits, class logits, and per-query depth maps.

use crate::graph::{Graph, Var};
use crate::nn::{ffn, linear, msa, ones, xavier_linear, zeros, Bound, FfnVars, MsaVars, ParamStore};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
pub struct LinVars {
    pub w: Var,
    pub b: Var,
}

/// Gated-update parameter bundle for one stage of one path: two projection
/// maps forming the gate feature, two gate heads, and two output heads.
/// Every map has its own parameters.
pub struct GateVars {
    pub phi_x: LinVars,
    pub phi_q: LinVars,
    pub psi_gq: LinVars,
    pub psi_gx: LinVars,
    pub psi_x: LinVars,
    pub psi_q: LinVars,
}

pub struct ReasonVars {
    pub msa: MsaVars,
    pub ln1: (Var, Var),
    pub ffn: FfnVars,
    pub ln2: (Var, Var),
    pub fc: LinVars,
    pub ln3: (Var, Var),
}

pub struct StageVars {
    pub gate: GateVars,
    pub reason: ReasonVars,
    /// Classifier head; present on the panoptic path only.
    pub cls: Option<LinVars>,
}

pub struct HeadVars {
    /// Stage-0 instance-mask kernels; also the initial panoptic queries.
    pub pan_kernels: LinVars,
    /// Stage-0 semantic head.
    pub sem: LinVars,
    /// Stage-0 depth-path kernels; initial depth queries under dense init.
    pub dep_kernels: LinVars,
    pub dense1: (Var, Var),
    pub dense2: (Var, Var),
    pub cls0: LinVars,
    /// Free depth-query initialization used when dense init is disabled.
    pub dep_query_free: Var,
    pub pan_stages: Vec<StageVars>,
    pub dep_stages: Vec<StageVars>,
}

#[derive(Clone, Debug)]
pub struct HeadConfig {
    pub queries: usize,
    pub channels: usize,
    pub stages: usize,
    pub heads: usize,
    pub d_max: f64,
    pub num_classes: usize,
    pub query_linking: bool,
    pub dense_init: bool,
    pub instance_depth: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            channels: 64,
            stages: 3,
            heads: 4,
            d_max: 88.0,
            num_classes: 5,
            query_linking: true,
            dense_init: true,
            instance_depth: true,
        }
    }
}

/// Depth heads start near the middle of the depth range instead of wherever
/// random logits land; classifiers start with a mild "no object" prior.
/// Both make the first optimizer steps sane without touching the loss.
const DEPTH_PRIOR_LOGIT: f64 = -0.93; // sigmoid(-0.93) * 88 m ~ 25 m
const NO_OBJECT_PRIOR: f64 = 2.0;

fn cls_bias(k: usize) -> crate::graph::Arr {
    let mut b = zeros(&[k + 1]);
    b[[k]] = NO_OBJECT_PRIOR;
    b
}

pub fn init_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &HeadConfig) {
    let (n, c, k) = (cfg.queries, cfg.channels, cfg.num_classes);
    store.insert("head.stage0.pan_kernels.w", xavier_linear(rng, n, c));
    store.insert("head.stage0.pan_kernels.b", zeros(&[n]));
    store.insert("head.stage0.sem.w", xavier_linear(rng, k, c));
    store.insert("head.stage0.sem.b", zeros(&[k]));
    store.insert("head.stage0.dep_kernels.w", xavier_linear(rng, n, c));
    store.insert(
        "head.stage0.dep_kernels.b",
        crate::graph::Arr::from_elem(ndarray::IxDyn(&[n]), DEPTH_PRIOR_LOGIT),
    );
    store.insert("head.stage0.dense1.w", crate::nn::kaiming_conv(rng, 16, c, 3, 3));
    store.insert("head.stage0.dense1.b", zeros(&[16]));
    store.insert("head.stage0.dense2.w", xavier_linear(rng, 1, 16));
    store.insert(
        "head.stage0.dense2.b",
        crate::graph::Arr::from_elem(ndarray::IxDyn(&[1]), DEPTH_PRIOR_LOGIT),
    );
    store.insert("head.stage0.cls.w", xavier_linear(rng, c, k + 1));
    store.insert("head.stage0.cls.b", cls_bias(k));
    store.insert("head.stage0.dep_queries_free", xavier_linear(rng, n, c));
    for path in ["pan", "dep"] {
        for s in 1..=cfg.stages {
            let p = format!("head.{path}.s{s}");
            for name in ["phi_x", "phi_q", "psi_gq", "psi_gx", "psi_x", "psi_q"] {
                store.insert(&format!("{p}.{name}.w"), xavier_linear(rng, c, c));
                store.insert(&format!("{p}.{name}.b"), zeros(&[c]));
            }
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("{p}.msa.{name}"), xavier_linear(rng, c, c));
            }
            store.insert(&format!("{p}.msa.bo"), zeros(&[c]));
            store.insert(&format!("{p}.ln1.g"), ones(&[c]));
            store.insert(&format!("{p}.ln1.b"), zeros(&[c]));
            store.insert(&format!("{p}.ffn.w1"), xavier_linear(rng, c, 4 * c));
            store.insert(&format!("{p}.ffn.b1"), zeros(&[4 * c]));
            store.insert(&format!("{p}.ffn.w2"), xavier_linear(rng, 4 * c, c));
            store.insert(&format!("{p}.ffn.b2"), zeros(&[c]));
            store.insert(&format!("{p}.ln2.g"), ones(&[c]));
            store.insert(&format!("{p}.ln2.b"), zeros(&[c]));
            store.insert(&format!("{p}.fc.w"), xavier_linear(rng, c, c));
            store.insert(&format!("{p}.fc.b"), zeros(&[c]));
            // the depth path's output norm starts damped so that initial
            // per-query depth maps sit near the scene-scale prior instead
            // of saturating the sigmoid
            let g0 = if path == "dep" { 0.1 } else { 1.0 };
            store.insert(
                &format!("{p}.ln3.g"),
                crate::graph::Arr::from_elem(ndarray::IxDyn(&[c]), g0),
            );
            store.insert(&format!("{p}.ln3.b"), zeros(&[c]));
            if path == "pan" {
                store.insert(&format!("{p}.cls.w"), xavier_linear(rng, c, k + 1));
                store.insert(&format!("{p}.cls.b"), cls_bias(k));
            }
        }
    }
}

pub fn bind(b: &Bound, cfg: &HeadConfig) -> HeadVars {
    let lin = |name: &str| LinVars {
        w: b.var(&format!("{name}.w")),
        b: b.var(&format!("{name}.b")),
    };
    let stage = |path: &str, s: usize| {
        let p = format!("head.{path}.s{s}");
        StageVars {
            gate: GateVars {
                phi_x: lin(&format!("{p}.phi_x")),
                phi_q: lin(&format!("{p}.phi_q")),
                psi_gq: lin(&format!("{p}.psi_gq")),
                psi_gx: lin(&format!("{p}.psi_gx")),
                psi_x: lin(&format!("{p}.psi_x")),
                psi_q: lin(&format!("{p}.psi_q")),
            },
            reason: ReasonVars {
                msa: MsaVars {
                    wq: b.var(&format!("{p}.msa.wq")),
                    wk: b.var(&format!("{p}.msa.wk")),
                    wv: b.var(&format!("{p}.msa.wv")),
                    wo: b.var(&format!("{p}.msa.wo")),
                    bo: b.var(&format!("{p}.msa.bo")),
                    heads: cfg.heads,
                },
                ln1: (b.var(&format!("{p}.ln1.g")), b.var(&format!("{p}.ln1.b"))),
                ffn: FfnVars {
                    w1: b.var(&format!("{p}.ffn.w1")),
                    b1: b.var(&format!("{p}.ffn.b1")),
                    w2: b.var(&format!("{p}.ffn.w2")),
                    b2: b.var(&format!("{p}.ffn.b2")),
                },
                ln2: (b.var(&format!("{p}.ln2.g")), b.var(&format!("{p}.ln2.b"))),
                fc: lin(&format!("{p}.fc")),
                ln3: (b.var(&format!("{p}.ln3.g")), b.var(&format!("{p}.ln3.b"))),
            },
            cls: (path == "pan").then(|| lin(&format!("{p}.cls"))),
        }
    };
    HeadVars {
        pan_kernels: lin("head.stage0.pan_kernels"),
        sem: lin("head.stage0.sem"),
        dep_kernels: lin("head.stage0.dep_kernels"),
        dense1: (b.var("head.stage0.dense1.w"), b.var("head.stage0.dense1.b")),
        dense2: (b.var("head.stage0.dense2.w"), b.var("head.stage0.dense2.b")),
        cls0: lin("head.stage0.cls"),
        dep_query_free: b.var("head.stage0.dep_queries_free"),
        pan_stages: (1..=cfg.stages).map(|s| stage("pan", s)).collect(),
        dep_stages: (1..=cfg.stages).map(|s| stage("dep", s)).collect(),
    }
}

// ---- operations ---------------------------------------------------------------

/// Pool a feature map through per-query masks: `out[n, c] = sum_uv
/// masks[n, u, v] * features[c, u, v]`. The raw weighted sum, with no area
/// normalization.
pub fn mask_group(g: &mut Graph, features: Var, masks: Var) -> Var {
    let fs = g.shape(features).to_vec();
    let ms = g.shape(masks).to_vec();
    assert_eq!(&fs[1..], &ms[1..], "mask_group: spatial shapes differ");
    let (c, hw) = (fs[0], fs[1] * fs[2]);
    let n = ms[0];
    let f_flat = g.reshape(features, &[c, hw]);
    let m_flat = g.reshape(masks, &[n, hw]);
    g.matmul(m_flat, f_flat, false, true)
}

/// Gated query update: `F_G = phi(x) * phi'(q)`, gates `sigma(psi(F_G))`,
/// output `G_X * psi(x) + G_q * psi(q)`.
pub fn gated_update(g: &mut Graph, x_inst: Var, q_prev: Var, p: &GateVars) -> Var {
    let (out, _, _) = gated_update_with_gates(g, x_inst, q_prev, p);
    out
}

/// Like [`gated_update`] but also returns `(G_q, G_X)` for inspection.
pub fn gated_update_with_gates(
    g: &mut Graph,
    x_inst: Var,
    q_prev: Var,
    p: &GateVars,
) -> (Var, Var, Var) {
    let fx = linear(g, x_inst, p.phi_x.w, p.phi_x.b);
    let fq = linear(g, q_prev, p.phi_q.w, p.phi_q.b);
    let f_g = g.mul(fx, fq);
    let gq_lin = linear(g, f_g, p.psi_gq.w, p.psi_gq.b);
    let gq = g.sigmoid(gq_lin);
    let gx_lin = linear(g, f_g, p.psi_gx.w, p.psi_gx.b);
    let gx = g.sigmoid(gx_lin);
    let px = linear(g, x_inst, p.psi_x.w, p.psi_x.b);
    let pq = linear(g, q_prev, p.psi_q.w, p.psi_q.b);
    let tx = g.mul(gx, px);
    let tq = g.mul(gq, pq);
    (g.add(tx, tq), gq, gx)
}

/// Depth-path update with query linking: the same stage's already-updated
/// panoptic query is added on top of the gated update. Pass `None` to
/// disable linking.
pub fn linked_depth_update(
    g: &mut Graph,
    x_dep: Var,
    q_dep_prev: Var,
    q_pan_new: Option<Var>,
    p: &GateVars,
) -> Var {
    let u = gated_update(g, x_dep, q_dep_prev, p);
    match q_pan_new {
        Some(qp) => g.add(u, qp),
        None => u,
    }
}

/// Refine queries (MSA and FFN blocks with residual + layer norm, then an
/// FC-LN-ReLU projection) and contract them against the feature map:
/// `map[n, u, v] = <refined[n], feat[:, u, v]>`. With `vars = None` the
/// refinement chain is the identity, leaving the plain contraction
/// (diagnostic mode used by the oracle tests). Returns the per-query map
/// and the refined queries for the next stage.
pub fn query_reason(
    g: &mut Graph,
    queries: Var,
    feat: Var,
    vars: Option<&ReasonVars>,
) -> (Var, Var) {
    let refined = match vars {
        Some(p) => {
            let att = msa(g, queries, &p.msa);
            let sum = g.add(queries, att);
            let a = g.layer_norm(sum, p.ln1.0, p.ln1.1, LN_EPS);
            let ff = ffn(g, a, &p.ffn);
            let sum2 = g.add(a, ff);
            let b = g.layer_norm(sum2, p.ln2.0, p.ln2.1, LN_EPS);
            let fc = linear(g, b, p.fc.w, p.fc.b);
            let nrm = g.layer_norm(fc, p.ln3.0, p.ln3.1, LN_EPS);
            g.relu(nrm)
        }
        None => queries,
    };
    let fs = g.shape(feat).to_vec();
    let (c, hf, wf) = (fs[0], fs[1], fs[2]);
    let n = g.shape(refined)[0];
    let f_flat = g.reshape(feat, &[c, hf * wf]);
    let prod = g.matmul(refined, f_flat, false, false);
    let map = g.reshape(prod, &[n, hf, wf]);
    (map, refined)
}

// ---- full head -----------------------------------------------------------------

/// Per-stage outputs; `depth_maps` is populated only when instance-level
/// depth is enabled.
pub struct StageOutput {
    pub mask_logits: Var,
    pub class_logits: Var,
    pub depth_maps: Option<Var>,
}

pub struct HeadOutput {
    /// Stage 0 followed by the refinement stages (`stages + 1` entries).
    pub stages: Vec<StageOutput>,
    /// Stage-0 dense semantic logits, `K x Hf x Wf`.
    pub sem_logits: Var,
    /// Stage-0 dense depth in meters, `1 x Hf x Wf`.
    pub dense_depth: Var,
    pub final_pan_queries: Var,
}

fn kernel_conv(g: &mut Graph, feat_flat: Var, kernels: &LinVars, hf: usize, wf: usize) -> Var {
    let n = g.shape(kernels.w)[0];
    let prod = g.matmul(kernels.w, feat_flat, false, false);
    let m3 = g.reshape(prod, &[n, hf, wf]);
    g.add_bias_chan(m3, kernels.b)
}

/// Stage-0 dense heads + initial queries, then the refinement stages.
pub fn run_head(
    g: &mut Graph,
    feat: &crate::featnet::FeaturePair,
    vars: &HeadVars,
    cfg: &HeadConfig,
) -> HeadOutput {
    assert!(cfg.stages >= 1, "at least one refinement stage");
    let fs = g.shape(feat.x_pan).to_vec();
    let (c, hf, wf) = (fs[0], fs[1], fs[2]);
    let pan_flat = g.reshape(feat.x_pan, &[c, hf * wf]);
    let dep_flat = g.reshape(feat.x_dep, &[c, hf * wf]);

    // stage 0: dense heads; the instance kernels double as initial queries
    let mask_logits0 = kernel_conv(g, pan_flat, &vars.pan_kernels, hf, wf);
    let sem_logits = kernel_conv(g, pan_flat, &vars.sem, hf, wf);
    let d1 = g.conv2d(feat.x_dep, vars.dense1.0, vars.dense1.1, 1, 1);
    let d1 = g.relu(d1);
    let d2 = g.conv1x1(d1, vars.dense2.0, vars.dense2.1);
    let d2s = g.sigmoid(d2);
    let dense_depth = g.scale(d2s, cfg.d_max);
    let cls_logits0 = linear(g, vars.pan_kernels.w, vars.cls0.w, vars.cls0.b);
    let depth_maps0 = cfg.instance_depth.then(|| {
        let m = kernel_conv(g, dep_flat, &vars.dep_kernels, hf, wf);
        let s = g.sigmoid(m);
        g.scale(s, cfg.d_max)
    });

    let mut q_pan = vars.pan_kernels.w;
    let mut q_dep = if cfg.dense_init {
        vars.dep_kernels.w
    } else {
        vars.dep_query_free
    };
    let mut stages = vec![StageOutput {
        mask_logits: mask_logits0,
        class_logits: cls_logits0,
        depth_maps: depth_maps0,
    }];

    for s in 0..cfg.stages {
        let prev_logits = stages.last().expect("stage 0 exists").mask_logits;
        let m_prev = g.sigmoid(prev_logits);
        let x_pan_inst = mask_group(g, feat.x_pan, m_prev);
        let pan_vars = &vars.pan_stages[s];
        let q_pan_upd = gated_update(g, x_pan_inst, q_pan, &pan_vars.gate);
        let (mask_logits, q_pan_next) =
            query_reason(g, q_pan_upd, feat.x_pan, Some(&pan_vars.reason));
        let cls = pan_vars.cls.as_ref().expect("pan path has classifier");
        let class_logits = linear(g, q_pan_next, cls.w, cls.b);
        let depth_maps = if cfg.instance_depth {
            let x_dep_inst = mask_group(g, feat.x_dep, m_prev);
            let dep_vars = &vars.dep_stages[s];
            let q_dep_upd = linked_depth_update(
                g,
                x_dep_inst,
                q_dep,
                cfg.query_linking.then_some(q_pan_upd),
                &dep_vars.gate,
            );
            let (dep_map, q_dep_next) =
                query_reason(g, q_dep_upd, feat.x_dep, Some(&dep_vars.reason));
            q_dep = q_dep_next;
            let ds = g.sigmoid(dep_map);
            Some(g.scale(ds, cfg.d_max))
        } else {
            None
        };
        q_pan = q_pan_next;
        stages.push(StageOutput { mask_logits, class_logits, depth_maps });
    }
    HeadOutput {
        stages,
        sem_logits,
        dense_depth,
        final_pan_queries: q_pan,
    }
}
