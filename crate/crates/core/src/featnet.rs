//! Shared tiny convolutional backbone with two parallel semantic-FPN style
//! necks. The backbone has four stride-2 stages (widths 16, 32, 64, 64);
//! each neck projects stages 2-4 to a common width with 1x1 convolutions,
//! upsamples to stride 4 with nearest neighbor, sums, and mixes with a
//! final 1x1. The panoptic and depth necks share the backbone but have
//! disjoint parameters.

use crate::graph::{Graph, Var};
use crate::nn::{kaiming_conv, xavier_linear, zeros, Bound, ParamStore};
use rand_chacha::ChaCha8Rng;

pub const BACKBONE_STRIDE: usize = 16;
pub const FEATURE_STRIDE: usize = 4;
const WIDTHS: [usize; 4] = [16, 32, 64, 64];

#[derive(Debug, thiserror::Error)]
pub enum FeatError {
    #[error("input {h}x{w} not divisible by the backbone stride {stride}")]
    Indivisible { h: usize, w: usize, stride: usize },
    #[error("expected a 3xHxW image, got shape {0:?}")]
    NotAnImage(Vec<usize>),
}

/// Parallel features for one frame at stride [`FEATURE_STRIDE`].
pub struct FeaturePair {
    pub x_pan: Var,
    pub x_dep: Var,
    pub stride: usize,
}

pub struct NeckVars {
    pub lat2: (Var, Var),
    pub lat3: (Var, Var),
    pub lat4: (Var, Var),
    pub out: (Var, Var),
}

pub struct FeatNetVars {
    pub convs: [(Var, Var); 4],
    pub pan: NeckVars,
    pub dep: NeckVars,
}

pub fn init_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) {
    let mut cin = 3;
    for (i, &w) in WIDTHS.iter().enumerate() {
        store.insert(&format!("featnet.conv{}.w", i + 1), kaiming_conv(rng, w, cin, 3, 3));
        store.insert(&format!("featnet.conv{}.b", i + 1), zeros(&[w]));
        cin = w;
    }
    for path in ["pan", "dep"] {
        for (name, src) in [("lat2", WIDTHS[1]), ("lat3", WIDTHS[2]), ("lat4", WIDTHS[3])] {
            store.insert(
                &format!("featnet.neck.{path}.{name}.w"),
                xavier_linear(rng, channels, src),
            );
            store.insert(&format!("featnet.neck.{path}.{name}.b"), zeros(&[channels]));
        }
        store.insert(
            &format!("featnet.neck.{path}.out.w"),
            xavier_linear(rng, channels, channels),
        );
        store.insert(&format!("featnet.neck.{path}.out.b"), zeros(&[channels]));
    }
}

pub fn bind(b: &Bound) -> FeatNetVars {
    let conv = |i: usize| {
        (
            b.var(&format!("featnet.conv{i}.w")),
            b.var(&format!("featnet.conv{i}.b")),
        )
    };
    let neck = |path: &str| NeckVars {
        lat2: (
            b.var(&format!("featnet.neck.{path}.lat2.w")),
            b.var(&format!("featnet.neck.{path}.lat2.b")),
        ),
        lat3: (
            b.var(&format!("featnet.neck.{path}.lat3.w")),
            b.var(&format!("featnet.neck.{path}.lat3.b")),
        ),
        lat4: (
            b.var(&format!("featnet.neck.{path}.lat4.w")),
            b.var(&format!("featnet.neck.{path}.lat4.b")),
        ),
        out: (
            b.var(&format!("featnet.neck.{path}.out.w")),
            b.var(&format!("featnet.neck.{path}.out.b")),
        ),
    };
    FeatNetVars {
        convs: [conv(1), conv(2), conv(3), conv(4)],
        pan: neck("pan"),
        dep: neck("dep"),
    }
}

fn run_neck(g: &mut Graph, neck: &NeckVars, s2: Var, s3: Var, s4: Var) -> Var {
    let l2 = g.conv1x1(s2, neck.lat2.0, neck.lat2.1);
    let l3 = g.conv1x1(s3, neck.lat3.0, neck.lat3.1);
    let l3 = g.upsample_nearest(l3, 2);
    let l4 = g.conv1x1(s4, neck.lat4.0, neck.lat4.1);
    let l4 = g.upsample_nearest(l4, 4);
    let s = g.add(l2, l3);
    let s = g.add(s, l4);
    let s = g.relu(s);
    g.conv1x1(s, neck.out.0, neck.out.1)
}

/// Backbone + both necks for one `3 x H x W` image.
pub fn extract_features(
    g: &mut Graph,
    image: Var,
    p: &FeatNetVars,
) -> Result<FeaturePair, FeatError> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(FeatError::NotAnImage(shape));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
        return Err(FeatError::Indivisible { h, w, stride: BACKBONE_STRIDE });
    }
    let mut x = image;
    let mut feats = Vec::with_capacity(4);
    for (wv, bv) in p.convs.iter() {
        x = g.conv2d(x, *wv, *bv, 2, 1);
        x = g.relu(x);
        feats.push(x);
    }
    let x_pan = run_neck(g, &p.pan, feats[1], feats[2], feats[3]);
    let x_dep = run_neck(g, &p.dep, feats[1], feats[2], feats[3]);
    Ok(FeaturePair { x_pan, x_dep, stride: FEATURE_STRIDE })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Bound;
    use crate::testutil::{gradcheck_sampled, seeded_arr};
    use rand::SeedableRng;

    fn store(c: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut s, &mut rng, c);
        s
    }

    #[test]
    fn shape_contract() {
        let s = store(64, 1);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &s, false);
        let vars = bind(&b);
        let img = g.constant(seeded_arr(&[3, 64, 64], 2));
        let pair = extract_features(&mut g, img, &vars).unwrap();
        assert_eq!(g.shape(pair.x_pan), &[64, 16, 16]);
        assert_eq!(g.shape(pair.x_dep), &[64, 16, 16]);
        assert_eq!(pair.stride, 4);
        assert!(g.value(pair.x_pan).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn different_images_give_different_features() {
        let s = store(32, 1);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &s, false);
        let vars = bind(&b);
        let img1 = g.constant(seeded_arr(&[3, 32, 32], 5));
        let img2 = g.constant(seeded_arr(&[3, 32, 32], 6));
        let p1 = extract_features(&mut g, img1, &vars).unwrap();
        let p2 = extract_features(&mut g, img2, &vars).unwrap();
        assert_ne!(g.value(p1.x_pan), g.value(p2.x_pan));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let s = store(32, 1);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &s, false);
        let vars = bind(&b);
        let img = g.constant(seeded_arr(&[3, 40, 64], 2));
        assert!(matches!(
            extract_features(&mut g, img, &vars),
            Err(FeatError::Indivisible { .. })
        ));
    }

    #[test]
    fn necks_have_disjoint_parameters() {
        let s1 = store(32, 1);
        let mut s2 = s1.clone();
        // perturb a pan-neck weight; the depth feature must not move
        *s2.get_mut("featnet.neck.pan.out.w") = s2.get("featnet.neck.pan.out.w").mapv(|v| v + 0.3);
        let img_arr = seeded_arr(&[3, 32, 32], 9);
        let run = |s: &ParamStore| {
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, s, false);
            let vars = bind(&b);
            let img = g.constant(img_arr.clone());
            let pair = extract_features(&mut g, img, &vars).unwrap();
            (g.value(pair.x_pan).clone(), g.value(pair.x_dep).clone())
        };
        let (pan1, dep1) = run(&s1);
        let (pan2, dep2) = run(&s2);
        assert_ne!(pan1, pan2);
        assert_eq!(dep1, dep2);
    }

    #[test]
    fn gradient_wrt_weights_matches_finite_differences() {
        let s = store(16, 3);
        let img_arr = seeded_arr(&[3, 16, 16], 7);
        let readout = seeded_arr(&[16, 4, 4], 8);
        // check two representative parameters: an early conv and a neck out
        for pname in ["featnet.conv1.w", "featnet.neck.dep.out.w"] {
            let pval = s.get(pname).clone();
            gradcheck_sampled(pname, &[pval], 20, 11, |g, vars| {
                let mut bound = std::collections::HashMap::new();
                for (name, value) in s.iter() {
                    let v = if name == pname {
                        vars[0]
                    } else {
                        g.constant(value.clone())
                    };
                    bound.insert(name.clone(), v);
                }
                let fv = FeatNetVars {
                    convs: [
                        (bound["featnet.conv1.w"], bound["featnet.conv1.b"]),
                        (bound["featnet.conv2.w"], bound["featnet.conv2.b"]),
                        (bound["featnet.conv3.w"], bound["featnet.conv3.b"]),
                        (bound["featnet.conv4.w"], bound["featnet.conv4.b"]),
                    ],
                    pan: NeckVars {
                        lat2: (bound["featnet.neck.pan.lat2.w"], bound["featnet.neck.pan.lat2.b"]),
                        lat3: (bound["featnet.neck.pan.lat3.w"], bound["featnet.neck.pan.lat3.b"]),
                        lat4: (bound["featnet.neck.pan.lat4.w"], bound["featnet.neck.pan.lat4.b"]),
                        out: (bound["featnet.neck.pan.out.w"], bound["featnet.neck.pan.out.b"]),
                    },
                    dep: NeckVars {
                        lat2: (bound["featnet.neck.dep.lat2.w"], bound["featnet.neck.dep.lat2.b"]),
                        lat3: (bound["featnet.neck.dep.lat3.w"], bound["featnet.neck.dep.lat3.b"]),
                        lat4: (bound["featnet.neck.dep.lat4.w"], bound["featnet.neck.dep.lat4.b"]),
                        out: (bound["featnet.neck.dep.out.w"], bound["featnet.neck.dep.out.b"]),
                    },
                };
                let img = g.constant(img_arr.clone());
                let pair = extract_features(g, img, &fv).unwrap();
                let w1 = g.constant(readout.clone());
                let r1 = g.mul(pair.x_pan, w1);
                let w2 = g.constant(readout.clone());
                let r2 = g.mul(pair.x_dep, w2);
                let s1 = g.sum_all(r1);
                let s2 = g.sum_all(r2);
                g.add(s1, s2)
            });
        }
    }
}
