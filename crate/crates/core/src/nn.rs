//! Parameter storage, layer helpers, initialization, the Adam optimizer,
//! and the on-disk checkpoint format (versioned magic string, text header
//! of shapes, little-endian f32 payload).

use crate::graph::{Arr, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "DVPS-CKPT-v1";

/// Named tensors with deterministic iteration order.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Write all tensors as little-endian f32 after a text header of shapes.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CHECKPOINT_MAGIC}")?;
        writeln!(f, "params {}", self.map.len())?;
        for (name, a) in &self.map {
            let dims: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
            writeln!(f, "{name} {}", dims.join(","))?;
        }
        writeln!(f, "data")?;
        for a in self.map.values() {
            for v in a.iter() {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let header_end = find_header_end(&raw).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "missing data marker")
        })?;
        let header = std::str::from_utf8(&raw[..header_end])
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let mut lines = header.lines();
        let magic = lines.next().unwrap_or("");
        if magic != CHECKPOINT_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("bad checkpoint magic {magic:?}"),
            ));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "bad params line")
            })?;
        let mut entries: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated header")
            })?;
            let (name, dims) = line.rsplit_once(' ').ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "bad shape line")
            })?;
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?
            };
            entries.push((name.to_string(), shape));
        }
        let mut store = ParamStore::new();
        let mut off = header_end;
        for (name, shape) in entries {
            let n: usize = shape.iter().product::<usize>().max(1);
            let n = if shape.is_empty() { 1 } else { n };
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                if off + 4 > raw.len() {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        "truncated payload",
                    ));
                }
                let b: [u8; 4] = raw[off..off + 4].try_into().unwrap();
                vals.push(f32::from_le_bytes(b) as f64);
                off += 4;
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            store.insert(&name, arr);
        }
        Ok(store)
    }
}

fn find_header_end(raw: &[u8]) -> Option<usize> {
    let marker = b"\ndata\n";
    raw.windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
}

/// Graph handles for every parameter of a store, bound either as trainable
/// params or as constants (inference).
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let v = if trainable {
                g.param(value.clone())
            } else {
                g.constant(value.clone())
            };
            vars.insert(name.clone(), v);
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients by parameter name after a backward pass.
    pub fn grads(&self, grads: &crate::graph::Gradients) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if let Some(gr) = grads.get(v) {
                out.insert(name.clone(), gr.clone());
            }
        }
        out
    }
}

// ---- initializers ---------------------------------------------------------

pub fn kaiming_conv(rng: &mut ChaCha8Rng, o: usize, c: usize, kh: usize, kw: usize) -> Arr {
    let fan_in = (c * kh * kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[o, c, kh, kw]), |_| rng.random_range(-bound..bound))
}

pub fn xavier_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Arr {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.random_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// ---- layer helpers ---------------------------------------------------------

/// `x (N, Cin) * w (Cin, Cout) + b (Cout)`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w, false, false);
    g.add_bias_row(y, b)
}

pub struct MsaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

/// Multi-head self-attention over `(N, C)` queries.
pub fn msa(g: &mut Graph, x: Var, p: &MsaVars) -> Var {
    let c = g.shape(x)[1];
    assert_eq!(c % p.heads, 0, "head count must divide C");
    let dh = c / p.heads;
    let q_all = g.matmul(x, p.wq, false, false);
    let k_all = g.matmul(x, p.wk, false, false);
    let v_all = g.matmul(x, p.wv, false, false);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let q = g.slice_cols(q_all, s, e);
        let k = g.slice_cols(k_all, s, e);
        let v = g.slice_cols(v_all, s, e);
        let logits = g.matmul(q, k, false, true);
        let logits = g.scale(logits, scale);
        let att = g.softmax_rows(logits);
        heads.push(g.matmul(att, v, false, false));
    }
    let cat = g.concat_cols(&heads);
    linear(g, cat, p.wo, p.bo)
}

pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Two-layer feed-forward block with ReLU.
pub fn ffn(g: &mut Graph, x: Var, p: &FfnVars) -> Var {
    let h = linear(g, x, p.w1, p.b1);
    let h = g.relu(h);
    linear(g, h, p.w2, p.b2)
}

// ---- optimizer --------------------------------------------------------------

/// Adam with decoupled learning-rate schedule (the caller passes the rate
/// for each step).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|pv, mv, vv, &gv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Linear warmup over the first 5% of steps, then cosine decay to a 10%
/// floor (training this short never benefits from a dead tail).
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let warmup = (total as f64 * 0.05).ceil().max(1.0);
    if (step as f64) < warmup {
        return lr0 * (step as f64 + 1.0) / warmup;
    }
    let t = ((step as f64 - warmup) / (total as f64 - warmup).max(1.0)).min(1.0);
    let floor = 0.1;
    lr0 * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
