//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! A [`Graph`] is a single-use tape: operations append nodes eagerly
//! (values are computed immediately), and [`Graph::backward`] walks the
//! tape in reverse to accumulate gradients of a scalar output with
//! respect to every node that `needs_grad`. Nodes created through
//! [`Graph::constant`] never record backward closures, so inference-only
//! forward passes pay no tape overhead beyond value storage.
//!
//! The op set is exactly what the model and losses need: dense linear
//! algebra, stride-2 convolutions via im2col, row softmax/log-softmax,
//! layer normalization, region pooling, and numerically stable
//! `softplus` / `log(1 + sum(exp))` reductions.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` participated in the graph.
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Arr) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().expect("empty array")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_leaf(&mut self, value: Arr, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Arr, parents: Vec<usize>, grad_fn: GradFn) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { Some(grad_fn) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulate d(loss)/d(node) for every `needs_grad` node. `loss` must
    /// hold exactly one element.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward target must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(f) = &node.grad_fn {
                let parent_vals: Vec<&Arr> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = f(&gout, &node.value, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.needs_grad && node.grad_fn.is_none() {
                // leaf: keep its gradient; interior grads are dropped once used
                grads[i] = Some(gout);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push_op(v, vec![a.0, b.0], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push_op(v, vec![a.0, b.0], Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push_op(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, pv| vec![g * pv[1], g * pv[0]]),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push_op(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, pv| {
                let db = g * &(-(pv[0] / pv[1]) / pv[1]);
                vec![g / pv[1], db]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push_op(v, vec![a.0], Box::new(move |g, _, _| vec![g.mapv(|x| x * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push_op(v, vec![a.0], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_f);
        self.push_op(
            v,
            vec![a.0],
            Box::new(|g, out, _| {
                let mut d = out * &(1.0 - out);
                d *= g;
                vec![d]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push_op(
            v,
            vec![a.0],
            Box::new(|g, _, pv| {
                let mut d = pv[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                vec![d]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push_op(v, vec![a.0], Box::new(|g, out, _| vec![g * out]))
    }

    /// Natural log; input is clamped below at 1e-300 to keep the value finite.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(1e-300).ln());
        self.push_op(
            v,
            vec![a.0],
            Box::new(|g, _, pv| vec![g / &pv[0].mapv(|x| x.max(1e-300))]),
        )
    }

    /// log(1 + exp(x)), computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus_f);
        self.push_op(
            v,
            vec![a.0],
            Box::new(|g, _, pv| vec![g * &pv[0].mapv(sigmoid_f)]),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push_op(
            v,
            vec![a.0],
            Box::new(|g, _, pv| vec![g * &pv[0].mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 })]),
        )
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push_op(v, vec![a.0], Box::new(|g, _, pv| vec![g * &pv[0].mapv(|x| 2.0 * x)]))
    }

    /// x^p for constant exponent. `p = 0` is the constant 1 with zero
    /// gradient; bases are clamped at 1e-12 in the backward pass when the
    /// exponent makes the derivative singular at zero.
    pub fn powf_const(&mut self, a: Var, p: f64) -> Var {
        if p == 0.0 {
            let v = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), 1.0);
            let one = self.constant(v);
            return one;
        }
        let v = self.nodes[a.0].value.mapv(|x| x.powf(p));
        self.push_op(
            v,
            vec![a.0],
            Box::new(move |g, _, pv| {
                let d = pv[0].mapv(|x| {
                    let base = if p < 1.0 { x.max(1e-12) } else { x };
                    p * base.powf(p - 1.0)
                });
                vec![g * &d]
            }),
        )
    }

    // ---- broadcast bias adds --------------------------------------------

    /// `(N, C) + (C,)` row-broadcast bias.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Var {
        let am = as2(self.value(a));
        let bv = as1(self.value(bias));
        assert_eq!(am.ncols(), bv.len());
        let v = (&am + &bv).into_dyn();
        self.push_op(
            v,
            vec![a.0, bias.0],
            Box::new(|g, _, _| {
                let gm = as2(g);
                vec![g.clone(), gm.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    /// `(C, H, W) + (C,)` channel-broadcast bias.
    pub fn add_bias_chan(&mut self, a: Var, bias: Var) -> Var {
        let at = as3(self.value(a));
        let bv = as1(self.value(bias));
        assert_eq!(at.shape()[0], bv.len());
        let mut v = at.to_owned();
        for (mut ch, b) in v.outer_iter_mut().zip(bv.iter()) {
            ch += *b;
        }
        self.push_op(
            v.into_dyn(),
            vec![a.0, bias.0],
            Box::new(|g, _, _| {
                let gt = as3(g);
                let db: Vec<f64> = gt.outer_iter().map(|ch| ch.sum()).collect();
                vec![g.clone(), Array1::from_vec(db).into_dyn()]
            }),
        )
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = standard(&self.nodes[a.0].value)
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let orig: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            v,
            vec![a.0],
            Box::new(move |g, _, _| {
                vec![standard(g)
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape backward")]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = as2(self.value(a));
        let (n, c) = (am.nrows(), am.ncols());
        assert!(start < end && end <= c);
        let v = am.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push_op(
            v,
            vec![a.0],
            Box::new(move |g, _, _| {
                let gm = as2(g);
                let mut da = Array2::<f64>::zeros((n, c));
                da.slice_mut(ndarray::s![.., start..end]).assign(&gm);
                vec![da.into_dyn()]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let am = as2(self.value(a));
        let v = am.t().as_standard_layout().to_owned().into_dyn();
        self.push_op(
            v,
            vec![a.0],
            Box::new(|g, _, _| {
                let gm = as2(g);
                vec![gm.t().as_standard_layout().to_owned().into_dyn()]
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = as2(self.value(a));
        let (n, c) = (am.nrows(), am.ncols());
        assert!(start < end && end <= n);
        let v = am.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        self.push_op(
            v,
            vec![a.0],
            Box::new(move |g, _, _| {
                let gm = as2(g);
                let mut da = Array2::<f64>::zeros((n, c));
                da.slice_mut(ndarray::s![start..end, ..]).assign(&gm);
                vec![da.into_dyn()]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mats: Vec<_> = parts.iter().map(|&p| as2(self.value(p)).to_owned()).collect();
        let n = mats[0].nrows();
        let widths: Vec<usize> = mats.iter().map(|m| m.ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut v = Array2::<f64>::zeros((n, total));
        let mut off = 0;
        for m in &mats {
            v.slice_mut(ndarray::s![.., off..off + m.ncols()]).assign(m);
            off += m.ncols();
        }
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_op(
            v.into_dyn(),
            parents,
            Box::new(move |g, _, _| {
                let gm = as2(g);
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    out.push(gm.slice(ndarray::s![.., off..off + w]).to_owned().into_dyn());
                    off += w;
                }
                out
            }),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.sum());
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            v,
            vec![a.0],
            Box::new(move |g, _, _| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a 2-D array: `(N, K) -> (N,)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let am = as2(self.value(a));
        let v = am.sum_axis(Axis(1)).into_dyn();
        let k = am.ncols();
        self.push_op(
            v,
            vec![a.0],
            Box::new(move |g, _, _| {
                let gv = as1(g);
                let n = gv.len();
                let mut da = Array2::<f64>::zeros((n, k));
                for (mut row, gi) in da.outer_iter_mut().zip(gv.iter()) {
                    row.fill(*gi);
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Spatial sums of a 3-D array: `(N, H, W) -> (N,)`.
    pub fn sum_hw(&mut self, a: Var) -> Var {
        let at = as3(self.value(a));
        let v: Array1<f64> = at.outer_iter().map(|m| m.sum()).collect();
        let (h, w) = (at.shape()[1], at.shape()[2]);
        self.push_op(
            v.into_dyn(),
            vec![a.0],
            Box::new(move |g, _, _| {
                let gv = as1(g);
                let n = gv.len();
                let mut da = Array3::<f64>::zeros((n, h, w));
                for (mut plane, gi) in da.outer_iter_mut().zip(gv.iter()) {
                    plane.fill(*gi);
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Scalar `log(1 + sum_ij exp(a_ij))`, computed stably.
    pub fn log1p_sum_exp(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let m = av.iter().fold(0.0f64, |acc, &x| acc.max(x));
        let s: f64 = (-m).exp() + av.iter().map(|&x| (x - m).exp()).sum::<f64>();
        let out = m + s.ln();
        self.push_op(
            scalar(out),
            vec![a.0],
            Box::new(|g, out, pv| {
                let o = *out.iter().next().expect("scalar");
                let gv = *g.iter().next().expect("scalar");
                vec![pv[0].mapv(|x| gv * (x - o).exp())]
            }),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// 2-D matrix product with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let am = as2(self.value(a)).to_owned();
        let bm = as2(self.value(b)).to_owned();
        let av = if ta { am.t().to_owned() } else { am };
        let bv = if tb { bm.t().to_owned() } else { bm };
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let v = av.dot(&bv).into_dyn();
        self.push_op(
            v,
            vec![a.0, b.0],
            Box::new(move |g, _, pv| {
                let gm = as2(g);
                let amx = as2(pv[0]);
                let bmx = as2(pv[1]);
                // with A' = op(A), B' = op(B): dA' = G B'^T, dB' = A'^T G
                let da_eff = gm.dot(&as2_owned(&bmx, tb).t());
                let db_eff = as2_owned(&amx, ta).t().dot(&gm);
                let da = if ta {
                    da_eff.t().as_standard_layout().to_owned()
                } else {
                    da_eff
                };
                let db = if tb {
                    db_eff.t().as_standard_layout().to_owned()
                } else {
                    db_eff
                };
                vec![da.into_dyn(), db.into_dyn()]
            }),
        )
    }

    /// Row-wise softmax of a 2-D array.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = as2(self.value(a));
        let mut v = am.to_owned();
        for mut row in v.outer_iter_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push_op(
            v.into_dyn(),
            vec![a.0],
            Box::new(|g, out, _| {
                let gm = as2(g);
                let ym = as2(out);
                let mut da = gm.to_owned();
                for ((mut drow, grow), yrow) in
                    da.outer_iter_mut().zip(gm.outer_iter()).zip(ym.outer_iter())
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for (d, (&gi, &yi)) in drow.iter_mut().zip(grow.iter().zip(yrow.iter())) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Row-wise log-softmax of a 2-D array.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = as2(self.value(a));
        let mut v = am.to_owned();
        for mut row in v.outer_iter_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push_op(
            v.into_dyn(),
            vec![a.0],
            Box::new(|g, out, _| {
                let gm = as2(g);
                let ym = as2(out);
                let mut da = gm.to_owned();
                for ((mut drow, grow), yrow) in
                    da.outer_iter_mut().zip(gm.outer_iter()).zip(ym.outer_iter())
                {
                    let gsum: f64 = grow.sum();
                    for (d, (&gi, &yi)) in drow.iter_mut().zip(grow.iter().zip(yrow.iter())) {
                        *d = gi - yi.exp() * gsum;
                    }
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Layer normalization over the last axis of a 2-D input with learned
    /// per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xm = as2(self.value(x)).to_owned();
        let gv = as1(self.value(gain)).to_owned();
        let bv = as1(self.value(bias)).to_owned();
        let c = xm.ncols();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = xm.clone();
        let mut inv_std = Vec::with_capacity(xm.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mu = row.mean().expect("nonempty row");
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mu) * is);
        }
        let mut out = xhat.clone();
        for mut row in out.outer_iter_mut() {
            for (o, (&g, &b)) in row.iter_mut().zip(gv.iter().zip(bv.iter())) {
                *o = *o * g + b;
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x.0, gain.0, bias.0],
            Box::new(move |g, _, _| {
                let gm = as2(g);
                let n = gm.nrows();
                let mut dx = Array2::<f64>::zeros((n, c));
                let mut dgain = Array1::<f64>::zeros(c);
                let mut dbias = Array1::<f64>::zeros(c);
                for i in 0..n {
                    let xr = xhat.row(i);
                    let gr = gm.row(i);
                    let is = inv_std[i];
                    // dy/dxhat = gain
                    let dxhat: Vec<f64> =
                        gr.iter().zip(gv.iter()).map(|(&gg, &ga)| gg * ga).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_x = dxhat
                        .iter()
                        .zip(xr.iter())
                        .map(|(&d, &xh)| d * xh)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx[[i, j]] = is * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                }
                vec![dx.into_dyn(), dgain.into_dyn(), dbias.into_dyn()]
            }),
        )
    }

    // ---- convolution & spatial ---------------------------------------------

    /// 2-D convolution of a `(C, H, W)` input by `(O, C, KH, KW)` weights with
    /// a per-output-channel bias, given stride and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(self.value(x)).to_owned();
        let wv = self.value(w).clone();
        let ws = wv.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d: weight must be 4-D");
        let (o, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(xv.shape()[0], c, "conv2d: channel mismatch");
        let (h, wd) = (xv.shape()[1], xv.shape()[2]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let col = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let wmat = wv
            .into_shape_with_order(IxDyn(&[o, c * kh * kw]))
            .expect("conv2d weight reshape");
        let wmat2 = as2(&wmat).to_owned();
        let bunch = wmat2.dot(&col); // (O, OH*OW)
        let bv = as1(self.value(b)).to_owned();
        let mut out = Array3::<f64>::zeros((o, oh, ow));
        for (oc, mut plane) in out.outer_iter_mut().enumerate() {
            let row = bunch.row(oc);
            for (idx, val) in plane.iter_mut().enumerate() {
                *val = row[idx] + bv[oc];
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Box::new(move |g, _, _| {
                let gmat = standard(g)
                    .into_shape_with_order(IxDyn(&[o, oh * ow]))
                    .expect("conv2d grad reshape");
                let gmat = as2(&gmat).to_owned();
                let dw = gmat.dot(&col.t()); // (O, C*KH*KW)
                let dcol = wmat2.t().dot(&gmat); // (C*KH*KW, OH*OW)
                let dx = col2im(&dcol, c, h, wd, kh, kw, stride, pad, oh, ow);
                let db: Vec<f64> = (0..o).map(|oc| gmat.row(oc).sum()).collect();
                vec![
                    dx.into_dyn(),
                    standard(&dw.into_dyn())
                        .into_shape_with_order(IxDyn(&[o, c, kh, kw]))
                        .expect("dw reshape"),
                    Array1::from_vec(db).into_dyn(),
                ]
            }),
        )
    }

    /// Pointwise (1x1) convolution expressed as a channel-mixing matmul:
    /// `(C, H, W)` by `(O, C)` weights plus bias.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let xflat = self.reshape(x, &[c, h * wd]);
        let y = self.matmul(w, xflat, false, false); // (O, H*W)
        let o = self.shape(w)[0];
        let y3 = self.reshape(y, &[o, h, wd]);
        self.add_bias_chan(y3, b)
    }

    /// Nearest-neighbor upsampling of `(C, H, W)` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = as3(self.value(x)).to_owned();
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array3::<f64>::zeros((c, h * factor, w * factor));
        for ch in 0..c {
            for y in 0..h * factor {
                for x2 in 0..w * factor {
                    out[[ch, y, x2]] = xv[[ch, y / factor, x2 / factor]];
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, _| {
                let gt = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    for y in 0..h * factor {
                        for x2 in 0..w * factor {
                            dx[[ch, y / factor, x2 / factor]] += gt[[ch, y, x2]];
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Bilinear region pooling: samples a `grid x grid` set of bin centers
    /// inside `bbox = (y0, x0, y1, x1)` (feature coordinates) from a
    /// `(C, H, W)` input. The box itself is not differentiated.
    pub fn roi_align(&mut self, x: Var, bbox: (f64, f64, f64, f64), grid: usize) -> Var {
        let xv = as3(self.value(x)).to_owned();
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (y0, x0, y1, x1) = bbox;
        let samples = roi_sample_points(y0, x0, y1, x1, grid);
        let mut out = Array3::<f64>::zeros((c, grid, grid));
        let mut weights: Vec<(usize, usize, f64)> = Vec::with_capacity(grid * grid * 4);
        let mut offsets: Vec<usize> = Vec::with_capacity(grid * grid + 1);
        for &(sy, sx) in &samples {
            offsets.push(weights.len());
            let (iy, ix, wts) = bilinear_weights(sy, sx, h, w);
            for k in 0..4 {
                let (dy, dx_) = [(0, 0), (0, 1), (1, 0), (1, 1)][k];
                let yy = (iy + dy).min(h - 1);
                let xx = (ix + dx_).min(w - 1);
                if wts[k] != 0.0 {
                    weights.push((yy, xx, wts[k]));
                }
            }
        }
        offsets.push(weights.len());
        for ch in 0..c {
            for (si, _) in samples.iter().enumerate() {
                let gy = si / grid;
                let gx = si % grid;
                let mut acc = 0.0;
                for &(yy, xx, wt) in &weights[offsets[si]..offsets[si + 1]] {
                    acc += wt * xv[[ch, yy, xx]];
                }
                out[[ch, gy, gx]] = acc;
            }
        }
        let nsamples = samples.len();
        self.push_op(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, _| {
                let gt = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    for si in 0..nsamples {
                        let gy = si / grid;
                        let gx = si % grid;
                        let gv = gt[[ch, gy, gx]];
                        for &(yy, xx, wt) in &weights[offsets[si]..offsets[si + 1]] {
                            dx[[ch, yy, xx]] += wt * gv;
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }
}

/// Owned copy in standard (row-major) layout.
fn standard(a: &Arr) -> Arr {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality().expect("expected 1-D")
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-D")
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality().expect("expected 3-D")
}

fn as2_owned(a: &ndarray::ArrayView2<'_, f64>, transpose: bool) -> Array2<f64> {
    if transpose {
        a.t().to_owned()
    } else {
        a.to_owned()
    }
}

fn im2col(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ch, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

fn roi_sample_points(y0: f64, x0: f64, y1: f64, x1: f64, grid: usize) -> Vec<(f64, f64)> {
    let gh = (y1 - y0).max(1e-6) / grid as f64;
    let gw = (x1 - x0).max(1e-6) / grid as f64;
    let mut pts = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            pts.push((
                y0 + (gy as f64 + 0.5) * gh,
                x0 + (gx as f64 + 0.5) * gw,
            ));
        }
    }
    pts
}

/// Corner index and the 4 bilinear weights (tl, tr, bl, br) for a sample
/// point, with border clamping.
fn bilinear_weights(sy: f64, sx: f64, h: usize, w: usize) -> (usize, usize, [f64; 4]) {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let iy = sy.floor().min((h - 1) as f64) as usize;
    let ix = sx.floor().min((w - 1) as f64) as usize;
    let fy = sy - iy as f64;
    let fx = sx - ix as f64;
    (
        iy,
        ix,
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    )
}
