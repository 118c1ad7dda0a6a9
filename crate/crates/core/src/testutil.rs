//! Shared helpers for numeric tests: deterministic random arrays and a
//! central-finite-difference gradient checker. Used by unit tests and the
//! acceptance suite.

use crate::graph::{Arr, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic array of values in roughly [-1, 1].
pub fn seeded_arr(shape: &[usize], seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

pub fn seeded_positive(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

/// Relative-error comparison used by every gradient check: the difference
/// must be within `1e-4 * max(|a|, |b|)` plus a small absolute floor that
/// absorbs finite-difference noise.
pub fn grad_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-7
}

/// Checks autodiff gradients of `build` (a scalar-valued graph function of
/// the given leaf inputs) against central finite differences with step 1e-6,
/// at every coordinate of every input.
pub fn gradcheck<F>(label: &str, inputs: &[Arr], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eps = 1e-6;
    let eval = |arrs: &[Arr]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = arrs.iter().map(|a| g.param(a.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar_value(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("{label}: input {i} received no gradient"));
        let mut work: Vec<Arr> = inputs.to_vec();
        for idx in 0..input.len() {
            let orig = *work[i].iter().nth(idx).unwrap();
            *work[i].iter_mut().nth(idx).unwrap() = orig + eps;
            let fp = eval(&work);
            *work[i].iter_mut().nth(idx).unwrap() = orig - eps;
            let fm = eval(&work);
            *work[i].iter_mut().nth(idx).unwrap() = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = *ad.iter().nth(idx).unwrap();
            assert!(
                grad_close(a, fd),
                "{label}: input {i} coord {idx}: autodiff {a} vs finite diff {fd}"
            );
        }
    }
}

/// Like [`gradcheck`] but probes `n_probes` random coordinates per input
/// instead of all of them; returns the worst relative error seen.
pub fn gradcheck_sampled<F>(
    label: &str,
    inputs: &[Arr],
    n_probes: usize,
    seed: u64,
    build: F,
) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eps = 1e-6;
    let eval = |arrs: &[Arr]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = arrs.iter().map(|a| g.param(a.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar_value(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("{label}: input {i} received no gradient"))
            .clone();
        let mut work: Vec<Arr> = inputs.to_vec();
        for _ in 0..n_probes {
            let idx = rng.random_range(0..input.len());
            let orig = *work[i].iter().nth(idx).unwrap();
            *work[i].iter_mut().nth(idx).unwrap() = orig + eps;
            let fp = eval(&work);
            *work[i].iter_mut().nth(idx).unwrap() = orig - eps;
            let fm = eval(&work);
            *work[i].iter_mut().nth(idx).unwrap() = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = *ad.iter().nth(idx).unwrap();
            assert!(
                grad_close(a, fd),
                "{label}: input {i} coord {idx}: autodiff {a} vs finite diff {fd}"
            );
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}
