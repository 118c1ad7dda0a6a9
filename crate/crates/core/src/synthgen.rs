//! Deterministic synthetic video clips for depth-aware video panoptic
//! segmentation: moving, mutually occluding shapes (rectangles, circles,
//! triangles) over a two-layer background (ground plane with a linear
//! depth gradient, sky at the far plane), with exact panoptic, depth, and
//! track ground truth.
//!
//! Rendering gives the model real monocular depth cues: every shape class
//! has a fixed world size so on-screen size encodes distance, and surface
//! brightness falls off with depth. Per-instance color jitter keeps
//! instances distinguishable for appearance tracking.
//!
//! Depth values are quantized to 1/256 m at generation time so that clips
//! survive the u16 on-disk format bit-exactly.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const VOID_CLASS: u16 = 255;
const IMG_MAGIC: u32 = 0x494D4731; // "IMG1"
const PAN_MAGIC: u32 = 0x50414E31; // "PAN1"
const DPT_MAGIC: u32 = 0x44505431; // "DPT1"

/// Focal-length-like constant tying world size to pixel size.
const FOCAL: f64 = 70.0;
const NOISE_SIGMA: f64 = 0.02;
/// Smallest shape the generator will emit, used by the fit check.
const MIN_SHAPE_PX: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// Everything needed to generate one clip deterministically.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub things_min: usize,
    pub things_max: usize,
    pub thing_classes: Vec<u16>,
    pub stuff_classes: Vec<u16>,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Max per-instance speed, pixels/frame (each axis).
    pub max_px_speed: f64,
    /// Max per-instance depth speed, meters/frame.
    pub max_depth_speed: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 6,
            height: 64,
            width: 64,
            things_min: 1,
            things_max: 5,
            thing_classes: vec![2, 3, 4],
            stuff_classes: vec![0, 1],
            depth_min: 2.0,
            depth_max: 80.0,
            max_px_speed: 3.0,
            max_depth_speed: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 1 {
            return Err(SynthError::Config("frames must be >= 1".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(SynthError::Config("height and width must be >= 16".into()));
        }
        if self.depth_min <= 0.0 {
            return Err(SynthError::Config("depth_min must be > 0".into()));
        }
        if self.depth_max <= self.depth_min {
            return Err(SynthError::Config("depth_max must exceed depth_min".into()));
        }
        if self.depth_max > 255.9 {
            return Err(SynthError::Config(
                "depth_max must fit the 1/256 m u16 encoding (< 255.9)".into(),
            ));
        }
        if self.things_min > self.things_max {
            return Err(SynthError::Config("things_min > things_max".into()));
        }
        if self.thing_classes.iter().any(|c| self.stuff_classes.contains(c)) {
            return Err(SynthError::Config(
                "thing and stuff class sets must be disjoint".into(),
            ));
        }
        if self
            .thing_classes
            .iter()
            .chain(self.stuff_classes.iter())
            .any(|&c| c == VOID_CLASS)
        {
            return Err(SynthError::Config("class 255 is reserved for void".into()));
        }
        if self.stuff_classes.len() != 2 {
            return Err(SynthError::Config(
                "exactly two stuff layers (ground, sky) are rendered".into(),
            ));
        }
        let needed = self.things_max * MIN_SHAPE_PX * MIN_SHAPE_PX;
        if needed > self.height * self.width {
            return Err(SynthError::Config(format!(
                "{} things of at least {MIN_SHAPE_PX}x{MIN_SHAPE_PX} px cannot fit a {}x{} canvas",
                self.things_max, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect,
    Circle,
    Triangle,
}

/// One rendered instance: identity, geometry, trajectory, appearance.
#[derive(Clone, Debug)]
pub struct ThingState {
    pub id: u16,
    pub class: u16,
    pub kind: ShapeKind,
    /// Center at frame 0, pixels.
    pub cx: f64,
    pub cy: f64,
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
    /// Meters at frame 0 / meters per frame.
    pub depth0: f64,
    pub depth_speed: f64,
    /// World extent in meters; pixel size is `FOCAL * world_size / depth`.
    pub world_size: f64,
    pub aspect: f64,
    /// Per-channel multiplicative color jitter.
    pub jitter: [f64; 3],
}

impl ThingState {
    pub fn depth_at(&self, frame: usize, spec: &SceneSpec) -> f64 {
        quantize_depth(
            (self.depth0 + self.depth_speed * frame as f64)
                .clamp(spec.depth_min + 0.5, spec.depth_max * 0.75),
        )
    }

    pub fn center_at(&self, frame: usize) -> (f64, f64) {
        (
            self.cx + self.vx * frame as f64,
            self.cy + self.vy * frame as f64,
        )
    }

    /// Pixel half-extents (half-width, half-height) at a frame.
    pub fn half_extent_at(&self, frame: usize, spec: &SceneSpec) -> (f64, f64) {
        let d = self.depth_at(frame, spec);
        let size = FOCAL * self.world_size / d;
        (size * self.aspect / 2.0, size / self.aspect / 2.0)
    }

    /// Shape membership test in pixel coordinates at a frame.
    pub fn covers(&self, frame: usize, spec: &SceneSpec, y: usize, x: usize) -> bool {
        let (cx, cy) = self.center_at(frame);
        let (hw, hh) = self.half_extent_at(frame, spec);
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= hw && dy.abs() <= hh,
            ShapeKind::Circle => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            ShapeKind::Triangle => {
                // apex up: width grows linearly from apex to base
                dy.abs() <= hh && dx.abs() <= hw * (dy + hh) / (2.0 * hh)
            }
        }
    }
}

/// The sampled scene behind a clip; exposed so tests can build exact
/// per-pixel z-buffer oracles.
#[derive(Clone, Debug)]
pub struct SceneDescription {
    pub spec: SceneSpec,
    pub things: Vec<ThingState>,
    pub horizon_row: usize,
    pub ground_class: u16,
    pub sky_class: u16,
}

/// One generated clip with exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    /// T x 3 x H x W, values in [0, 1].
    pub images: Array4<f32>,
    /// T x 2 x H x W: plane 0 = class id, plane 1 = instance id (0 = none).
    pub panoptic: Array4<u16>,
    /// T x H x W meters, 0 = invalid.
    pub depth: Array3<f32>,
    /// instance id -> (frame, mask) occurrences, visible frames only.
    pub tracks: BTreeMap<u16, Vec<(usize, Array2<bool>)>>,
}

impl ClipSample {
    pub fn frames(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Frame image as f64 `(3, H, W)` for model input.
    pub fn image_f64(&self, t: usize) -> Array3<f64> {
        self.images.index_axis(ndarray::Axis(0), t).mapv(|v| v as f64)
    }

    pub fn class_map(&self, t: usize) -> Array2<u16> {
        self.panoptic
            .index_axis(ndarray::Axis(0), t)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
    }

    pub fn instance_map(&self, t: usize) -> Array2<u16> {
        self.panoptic
            .index_axis(ndarray::Axis(0), t)
            .index_axis(ndarray::Axis(0), 1)
            .to_owned()
    }

    pub fn depth_map(&self, t: usize) -> Array2<f32> {
        self.depth.index_axis(ndarray::Axis(0), t).to_owned()
    }
}

pub fn quantize_depth(d: f64) -> f64 {
    (d * 256.0).round() / 256.0
}

fn class_base_color(class: u16) -> [f64; 3] {
    match class {
        0 => [0.36, 0.44, 0.22], // ground
        1 => [0.55, 0.70, 0.95], // sky
        2 => [0.85, 0.20, 0.20],
        3 => [0.86, 0.80, 0.15],
        4 => [0.70, 0.25, 0.75],
        c => {
            // arbitrary extra classes get a deterministic hue
            let h = (c as f64 * 0.61803398875).fract();
            [0.3 + 0.6 * h, 0.9 - 0.6 * h, 0.4 + 0.5 * ((c % 7) as f64 / 7.0)]
        }
    }
}

/// Brightness falls off linearly with depth: the shared shading cue.
fn depth_shade(d: f64, spec: &SceneSpec) -> f64 {
    let t = ((d - spec.depth_min) / (spec.depth_max - spec.depth_min)).clamp(0.0, 1.0);
    1.0 - 0.45 * t
}

/// Sample the scene (things, trajectories, appearance) for a spec.
pub fn sample_scene(spec: &SceneSpec) -> Result<SceneDescription, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_things = if spec.things_min == spec.things_max {
        spec.things_min
    } else {
        rng.random_range(spec.things_min..=spec.things_max)
    };
    let kinds = [ShapeKind::Rect, ShapeKind::Circle, ShapeKind::Triangle];
    let mut things = Vec::with_capacity(n_things);
    for i in 0..n_things {
        let class_idx = rng.random_range(0..spec.thing_classes.len());
        let class = spec.thing_classes[class_idx];
        let kind = kinds[class_idx % kinds.len()];
        // keep the thing near enough that its pixel size stays above the
        // generator minimum
        let d_near = spec.depth_min + 2.5;
        let d_far = (spec.depth_max * 0.14).max(d_near + 5.0);
        let depth0 = rng.random_range(d_near..d_far);
        let world_size = rng.random_range(1.7..2.4);
        things.push(ThingState {
            id: (i + 1) as u16,
            class,
            kind,
            cx: rng.random_range(0.15 * spec.width as f64..0.85 * spec.width as f64),
            cy: rng.random_range(0.2 * spec.height as f64..0.9 * spec.height as f64),
            vx: rng.random_range(-spec.max_px_speed..spec.max_px_speed),
            vy: rng.random_range(-spec.max_px_speed..spec.max_px_speed),
            depth0,
            depth_speed: rng.random_range(-spec.max_depth_speed..spec.max_depth_speed),
            world_size,
            aspect: rng.random_range(0.85..1.18),
            jitter: [
                rng.random_range(0.88..1.12),
                rng.random_range(0.88..1.12),
                rng.random_range(0.88..1.12),
            ],
        });
    }
    Ok(SceneDescription {
        spec: spec.clone(),
        things,
        horizon_row: spec.height / 3,
        ground_class: spec.stuff_classes[0],
        sky_class: spec.stuff_classes[1],
    })
}

/// Background depth at a pixel: sky at the far plane above the horizon,
/// a linear near-to-far gradient on the ground below it.
pub fn background_depth(scene: &SceneDescription, y: usize) -> f64 {
    let spec = &scene.spec;
    if y < scene.horizon_row {
        quantize_depth(spec.depth_max)
    } else {
        let h = (spec.height - 1).max(scene.horizon_row + 1);
        let t = (y - scene.horizon_row) as f64 / (h - scene.horizon_row) as f64;
        // far at the horizon, near at the bottom edge
        quantize_depth(spec.depth_max * 0.9 + t * (spec.depth_min - spec.depth_max * 0.9))
    }
}

/// Render every frame of a scene. Painter's order is strictly by depth,
/// nearest last, so overlap pixels always carry the nearer instance.
pub fn render_scene(scene: &SceneDescription) -> ClipSample {
    let spec = &scene.spec;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let mut images = Array4::<f32>::zeros((t_n, 3, h, w));
    let mut panoptic = Array4::<u16>::zeros((t_n, 2, h, w));
    let mut depth = Array3::<f32>::zeros((t_n, h, w));
    let mut tracks: BTreeMap<u16, Vec<(usize, Array2<bool>)>> = BTreeMap::new();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9E3779B97F4A7C15));
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    for t in 0..t_n {
        // background
        for y in 0..h {
            let bd = background_depth(scene, y);
            let class = if y < scene.horizon_row {
                scene.sky_class
            } else {
                scene.ground_class
            };
            let color = class_base_color(class);
            let shade = depth_shade(bd, spec);
            for x in 0..w {
                panoptic[[t, 0, y, x]] = class;
                panoptic[[t, 1, y, x]] = 0;
                depth[[t, y, x]] = bd as f32;
                for c in 0..3 {
                    images[[t, c, y, x]] = (color[c] * shade) as f32;
                }
            }
        }
        // things, far to near
        let mut order: Vec<usize> = (0..scene.things.len()).collect();
        order.sort_by(|&a, &b| {
            let da = scene.things[a].depth_at(t, spec);
            let db = scene.things[b].depth_at(t, spec);
            db.partial_cmp(&da)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(scene.things[b].id.cmp(&scene.things[a].id))
        });
        for idx in order {
            let thing = &scene.things[idx];
            let d = thing.depth_at(t, spec);
            let color = class_base_color(thing.class);
            let shade = depth_shade(d, spec);
            let (cx, cy) = thing.center_at(t);
            let (hw, hh) = thing.half_extent_at(t, spec);
            let y_lo = ((cy - hh).floor().max(0.0)) as usize;
            let y_hi = ((cy + hh).ceil().min(h as f64)) as usize;
            let x_lo = ((cx - hw).floor().max(0.0)) as usize;
            let x_hi = ((cx + hw).ceil().min(w as f64)) as usize;
            let mut mask = Array2::<bool>::from_elem((h, w), false);
            let mut any = false;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if thing.covers(t, spec, y, x) {
                        any = true;
                        mask[[y, x]] = true;
                        panoptic[[t, 0, y, x]] = thing.class;
                        panoptic[[t, 1, y, x]] = thing.id;
                        depth[[t, y, x]] = d as f32;
                        for c in 0..3 {
                            images[[t, c, y, x]] =
                                (color[c] * shade * thing.jitter[c]).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
            if any {
                // visible pixels may belong to a nearer thing painted later;
                // the final mask is fixed up below from the panoptic map
                tracks.entry(thing.id).or_default().push((t, mask));
            }
        }
        // repaint masks from the final panoptic map so occluded pixels drop out
        for (id, occ) in tracks.iter_mut() {
            if let Some(entry) = occ.iter_mut().find(|(f, _)| *f == t) {
                let mut any = false;
                for y in 0..h {
                    for x in 0..w {
                        let vis = panoptic[[t, 1, y, x]] == *id;
                        entry.1[[y, x]] = vis;
                        any |= vis;
                    }
                }
                if !any {
                    occ.retain(|(f, _)| *f != t);
                }
            }
        }
        // image noise
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let n = normal.sample(&mut noise_rng);
                    images[[t, c, y, x]] =
                        (images[[t, c, y, x]] as f64 + n).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    tracks.retain(|_, occ| !occ.is_empty());
    ClipSample { images, panoptic, depth, tracks }
}

/// Generate a clip; a pure function of the spec.
pub fn generate_clip(spec: &SceneSpec) -> Result<ClipSample, SynthError> {
    Ok(render_scene(&sample_scene(spec)?))
}

pub fn generate_clip_with_scene(
    spec: &SceneSpec,
) -> Result<(ClipSample, SceneDescription), SynthError> {
    let scene = sample_scene(spec)?;
    Ok((render_scene(&scene), scene))
}

// ---- on-disk dataset ---------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestClip {
    pub id: String,
    pub split: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub clips: Vec<ManifestClip>,
}

impl Manifest {
    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestClip> + 'a {
        self.clips.iter().filter(move |c| c.split == name)
    }
}

/// A clip to serialize plus its split assignment.
pub struct DatasetEntry {
    pub spec: SceneSpec,
    pub split: String,
}

/// Serialize clips under `root/<split>/<clip_id>/`, atomically per clip
/// (rendered into a temp directory, then renamed). Returns the manifest,
/// which is also written to `root/manifest.json`.
pub fn write_dataset(entries: &[DatasetEntry], root: &Path) -> Result<Manifest, SynthError> {
    std::fs::create_dir_all(root)?;
    let mut manifest = Manifest::default();
    for (i, entry) in entries.iter().enumerate() {
        let clip = generate_clip(&entry.spec)?;
        let id = format!("clip_{i:05}");
        let split_dir = root.join(&entry.split);
        std::fs::create_dir_all(&split_dir)?;
        let tmp = split_dir.join(format!(".tmp_{id}"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        if let Err(e) = write_clip_files(&clip, &tmp) {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let final_dir = split_dir.join(&id);
        if final_dir.exists() {
            std::fs::remove_dir_all(&final_dir)?;
        }
        std::fs::rename(&tmp, &final_dir)?;
        manifest.clips.push(ManifestClip {
            id,
            split: entry.split.clone(),
            frames: entry.spec.frames,
            height: entry.spec.height,
            width: entry.spec.width,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
    std::fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

fn write_clip_files(clip: &ClipSample, dir: &Path) -> Result<(), SynthError> {
    for t in 0..clip.frames() {
        write_img(
            &dir.join(format!("frame_{t}.img")),
            &clip.images.index_axis(ndarray::Axis(0), t).to_owned(),
        )?;
        write_pan(
            &dir.join(format!("panoptic_{t}.pan")),
            &clip.class_map(t),
            &clip.instance_map(t),
        )?;
        write_dpt(&dir.join(format!("depth_{t}.dpt")), &clip.depth_map(t))?;
    }
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<Manifest, SynthError> {
    let raw = std::fs::read_to_string(root.join("manifest.json"))?;
    serde_json::from_str(&raw).map_err(|e| SynthError::Format {
        path: root.join("manifest.json"),
        reason: e.to_string(),
    })
}

/// Load one clip directory back into a [`ClipSample`]; tracks are rebuilt
/// from the panoptic maps.
pub fn load_clip(dir: &Path, frames: usize) -> Result<ClipSample, SynthError> {
    let mut images = None;
    let mut panoptic = None;
    let mut depth = None;
    for t in 0..frames {
        let img = read_img(&dir.join(format!("frame_{t}.img")))?;
        let (cls, inst) = read_pan(&dir.join(format!("panoptic_{t}.pan")))?;
        let dpt = read_dpt(&dir.join(format!("depth_{t}.dpt")))?;
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let images = images.get_or_insert_with(|| Array4::<f32>::zeros((frames, c, h, w)));
        let panoptic = panoptic.get_or_insert_with(|| Array4::<u16>::zeros((frames, 2, h, w)));
        let depth = depth.get_or_insert_with(|| Array3::<f32>::zeros((frames, h, w)));
        images.index_axis_mut(ndarray::Axis(0), t).assign(&img);
        panoptic
            .index_axis_mut(ndarray::Axis(0), t)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&cls);
        panoptic
            .index_axis_mut(ndarray::Axis(0), t)
            .index_axis_mut(ndarray::Axis(0), 1)
            .assign(&inst);
        depth.index_axis_mut(ndarray::Axis(0), t).assign(&dpt);
    }
    let images = images.ok_or_else(|| SynthError::Config("clip has zero frames".into()))?;
    let panoptic = panoptic.expect("set with images");
    let depth = depth.expect("set with images");
    let mut tracks: BTreeMap<u16, Vec<(usize, Array2<bool>)>> = BTreeMap::new();
    let (h, w) = (images.shape()[2], images.shape()[3]);
    for t in 0..frames {
        let mut masks: BTreeMap<u16, Array2<bool>> = BTreeMap::new();
        for y in 0..h {
            for x in 0..w {
                let id = panoptic[[t, 1, y, x]];
                if id > 0 {
                    masks
                        .entry(id)
                        .or_insert_with(|| Array2::from_elem((h, w), false))[[y, x]] = true;
                }
            }
        }
        for (id, mask) in masks {
            tracks.entry(id).or_default().push((t, mask));
        }
    }
    Ok(ClipSample { images, panoptic, depth, tracks })
}

// ---- raw tensor files ----------------------------------------------------

fn write_header(f: &mut impl Write, magic: u32, c: u32, h: u32, w: u32) -> std::io::Result<()> {
    f.write_all(&magic.to_le_bytes())?;
    f.write_all(&c.to_le_bytes())?;
    f.write_all(&h.to_le_bytes())?;
    f.write_all(&w.to_le_bytes())
}

fn read_header(path: &Path, raw: &[u8], magic: u32) -> Result<(usize, usize, usize), SynthError> {
    if raw.len() < 16 {
        return Err(SynthError::Format { path: path.into(), reason: "short header".into() });
    }
    let rd = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
    if rd(0) != magic {
        return Err(SynthError::Format { path: path.into(), reason: "bad magic".into() });
    }
    Ok((rd(4) as usize, rd(8) as usize, rd(12) as usize))
}

pub fn write_img(path: &Path, img: &Array3<f32>) -> Result<(), SynthError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let s = img.shape();
    write_header(&mut f, IMG_MAGIC, s[0] as u32, s[1] as u32, s[2] as u32)?;
    for v in img.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_img(path: &Path) -> Result<Array3<f32>, SynthError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let (c, h, w) = read_header(path, &raw, IMG_MAGIC)?;
    let n = c * h * w;
    if raw.len() != 16 + 4 * n {
        return Err(SynthError::Format { path: path.into(), reason: "payload size".into() });
    }
    let vals: Vec<f32> = raw[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((c, h, w), vals)
        .map_err(|e| SynthError::Format { path: path.into(), reason: e.to_string() })
}

pub fn write_pan(path: &Path, class: &Array2<u16>, inst: &Array2<u16>) -> Result<(), SynthError> {
    assert_eq!(class.dim(), inst.dim());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (h, w) = class.dim();
    write_header(&mut f, PAN_MAGIC, 2, h as u32, w as u32)?;
    for v in class.iter().chain(inst.iter()) {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pan(path: &Path) -> Result<(Array2<u16>, Array2<u16>), SynthError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let (planes, h, w) = read_header(path, &raw, PAN_MAGIC)?;
    if planes != 2 || raw.len() != 16 + 2 * 2 * h * w {
        return Err(SynthError::Format { path: path.into(), reason: "payload size".into() });
    }
    let vals: Vec<u16> = raw[16..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let class = Array2::from_shape_vec((h, w), vals[..h * w].to_vec())
        .map_err(|e| SynthError::Format { path: path.into(), reason: e.to_string() })?;
    let inst = Array2::from_shape_vec((h, w), vals[h * w..].to_vec())
        .map_err(|e| SynthError::Format { path: path.into(), reason: e.to_string() })?;
    Ok((class, inst))
}

/// Depth file: u16 = meters * 256, 0 = invalid.
pub fn write_dpt(path: &Path, depth: &Array2<f32>) -> Result<(), SynthError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (h, w) = depth.dim();
    write_header(&mut f, DPT_MAGIC, 1, h as u32, w as u32)?;
    for v in depth.iter() {
        let q = (*v as f64 * 256.0).round().clamp(0.0, 65535.0) as u16;
        f.write_all(&q.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dpt(path: &Path) -> Result<Array2<f32>, SynthError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let (planes, h, w) = read_header(path, &raw, DPT_MAGIC)?;
    if planes != 1 || raw.len() != 16 + 2 * h * w {
        return Err(SynthError::Format { path: path.into(), reason: "payload size".into() });
    }
    let vals: Vec<f32> = raw[16..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()) as f32 / 256.0)
        .collect();
    Array2::from_shape_vec((h, w), vals)
        .map_err(|e| SynthError::Format { path: path.into(), reason: e.to_string() })
}
