//! Depth-aware video panoptic segmentation at desk scale: a synthetic clip
//! generator with exact ground truth, a query-based segmentation-and-depth
//! model trained end to end on CPU, an appearance tracker, and the full
//! panoptic/depth/tracking metric stack (PQ, windowed depth-masked PQ, AQ,
//! SQ, DQ and their geometric mean).

pub mod assignloss;
pub mod cli;
pub mod config;
pub mod featnet;
pub mod fuse;
pub mod graph;
pub mod model;
pub mod nn;
pub mod polyhead;
pub mod metrics;
pub mod report;
pub mod synthgen;
pub mod tracker;
pub mod train;
pub mod testutil;
