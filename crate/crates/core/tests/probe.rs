// temporary diagnostic; deleted before ship
use dvps_core::graph::Graph;
use dvps_core::model::{Model, ModelConfig};
use dvps_core::synthgen::{generate_clip, SceneSpec};
use dvps_core::assignloss::{GtSet, ClassTable, match_cost, hungarian_match, CostWeights};

#[test]
fn probe_thing_query() {
    let model = Model::load(std::path::Path::new("/tmp/one_run/model.ckpt"), ModelConfig::default()).unwrap();
    // train-split clip seed: i=0 -> seed = 0 ^ 0 = 0
    let spec = SceneSpec { seed: 0, things_min: 1, things_max: 1, ..Default::default() };
    let clip = generate_clip(&spec).unwrap();
    let table = ClassTable::new(&[2,3,4], &[0,1]);
    let mut g = Graph::new();
    let (_, vars) = model.bind(&mut g, false);
    let (_feat, out) = model.forward_frame(&mut g, &vars, &clip.image_f64(0)).unwrap();
    let gt = GtSet::from_frame(&clip, 0, &table, 4);
    println!("gt segments: {:?} (thing mask area {})", gt.class_indices,
        gt.masks.index_axis(ndarray::Axis(0), 0).sum());
    for (si, st) in out.stages.iter().enumerate() {
        let cls = g.value(st.class_logits).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let masks = g.value(st.mask_logits).clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        let cost = match_cost(&cls, &masks, &gt, &CostWeights::default());
        let assign = hungarian_match(&cost).unwrap();
        // thing column = 0
        let q = assign[0];
        // mask overlap of query q with gt mask 0
        let gm = gt.masks.index_axis(ndarray::Axis(0), 0);
        let mut inter=0.0; let mut psum=0.0;
        let mut pmax = f64::NEG_INFINITY; let mut pmin = f64::INFINITY;
        for y in 0..16 { for x in 0..16 {
            let p = 1.0/(1.0+(-masks[[q,y,x]]).exp());
            psum += p; inter += p*gm[[y,x]];
            pmax = pmax.max(masks[[q,y,x]]); pmin = pmin.min(masks[[q,y,x]]);
        }}
        let dice = 2.0*inter/(psum + gm.sum());
        // class prob of thing class
        let row: Vec<f64> = (0..6).map(|k| cls[[q,k]]).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v-mx).exp()).sum();
        let p_cls = (row[gt.class_indices[0]]-mx).exp()/z;
        let p_noobj = (row[5]-mx).exp()/z;
        println!("stage {si}: assign {:?} thing->q{q} dice {dice:.3} psum {psum:.1} logit range [{pmin:.2},{pmax:.2}] p_cls {p_cls:.3} p_noobj {p_noobj:.3}", assign);
    }
}
