//! Model assembly: configuration, parameter initialization, checkpoint
//! round-trip, and the shared forward pass used by training and inference.

use crate::assignloss::ClassTable;
use crate::featnet::{self, FeatError, FeatNetVars, FeaturePair};
use crate::graph::Graph;
use crate::nn::{Bound, ParamStore};
use crate::polyhead::{self, HeadConfig, HeadOutput, HeadVars};
use crate::tracker::{self, TrackVars};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub queries: usize,
    pub embed_dim: usize,
    pub stages: usize,
    pub heads: usize,
    pub d_max: f64,
    pub thing_classes: Vec<u16>,
    pub stuff_classes: Vec<u16>,
    pub query_linking: bool,
    pub dense_init: bool,
    pub instance_depth: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            queries: 16,
            embed_dim: 32,
            stages: 3,
            heads: 4,
            d_max: 88.0,
            thing_classes: vec![2, 3, 4],
            stuff_classes: vec![0, 1],
            query_linking: true,
            dense_init: true,
            instance_depth: true,
        }
    }
}

impl ModelConfig {
    pub fn class_table(&self) -> ClassTable {
        ClassTable::new(&self.thing_classes, &self.stuff_classes)
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            queries: self.queries,
            channels: self.channels,
            stages: self.stages,
            heads: self.heads,
            d_max: self.d_max,
            num_classes: self.thing_classes.len() + self.stuff_classes.len(),
            query_linking: self.query_linking,
            dense_init: self.dense_init,
            instance_depth: self.instance_depth,
        }
    }
}

pub struct ForwardVars {
    pub feat: FeatNetVars,
    pub head: HeadVars,
    pub track: TrackVars,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model with seed-deterministic initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        featnet::init_params(&mut params, &mut rng, config.channels);
        polyhead::init_params(&mut params, &mut rng, &config.head_config());
        tracker::init_params(&mut params, &mut rng, config.channels, config.embed_dim);
        Self { config, params }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, config: ModelConfig) -> std::io::Result<Self> {
        let params = ParamStore::load(path)?;
        Ok(Self { config, params })
    }

    /// Bind every parameter into a graph; `trainable = false` for inference
    /// (no tape is recorded).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Bound, ForwardVars) {
        let bound = Bound::bind(g, &self.params, trainable);
        let vars = ForwardVars {
            feat: featnet::bind(&bound),
            head: polyhead::bind(&bound, &self.config.head_config()),
            track: tracker::bind(&bound),
        };
        (bound, vars)
    }

    /// Feature extraction plus the query head for one `3 x H x W` image.
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        vars: &ForwardVars,
        image: &Array3<f64>,
    ) -> Result<(FeaturePair, HeadOutput), FeatError> {
        let img = g.constant(image.clone().into_dyn());
        let feat = featnet::extract_features(g, img, &vars.feat)?;
        let out = polyhead::run_head(g, &feat, &vars.head, &self.config.head_config());
        Ok((feat, out))
    }
}
