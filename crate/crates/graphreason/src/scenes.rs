//! Synthetic region-classification benchmark with controllable ambiguity.
//!
//! Each scene is a small feature grid (standing in for backbone features)
//! plus labeled region boxes. Classes play fixed roles so that part of the
//! label signal is *not* in a region's own features:
//!
//! - classes 0/1 (`amb-a`/`amb-b`) share one feature prototype; a region's
//!   label is decided by the class of the **nearest anchor region**
//!   (`anchor-a` maps to `amb-a`, `anchor-b` to `amb-b`). The generator
//!   places a designated anchor horizontally adjacent to each such region
//!   and keeps other anchors far away, so the cue is local and spatial.
//! - with 8 or more classes, classes 4/5 (`part-a`/`part-b`) also share a
//!   prototype; their label follows the scene's parent class (`whole-a` or
//!   `whole-b`, never both in one scene), wherever that parent sits. The
//!   cue is relational: `is-part-of` edges in the knowledge graph connect
//!   parts to their parents.
//!
//! Anchor, parent, and filler classes get distinct prototypes, so a
//! context-blind classifier converges to about 50% on the ambiguous pairs
//! and near-perfect accuracy elsewhere. Labels are always recomputed from
//! the realized geometry, so the rules hold exactly on every emitted scene.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{iou, GeometryError, PixelBox};
use crate::kg::{ClassVocabulary, KgError, KnowledgeGraph};

#[derive(Debug, Error)]
pub enum ScenesError {
    #[error("bad benchmark spec: {0}")]
    BadSpec(String),
    #[error("could not place regions for scene {0} after many retries")]
    Placement(String),
    #[error("scene file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene '{id}': {msg}")]
    BadScene { id: String, msg: String },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// class roles
// ---------------------------------------------------------------------------

pub const AMB_A: usize = 0;
pub const AMB_B: usize = 1;
pub const ANCHOR_A: usize = 2;
pub const ANCHOR_B: usize = 3;
pub const PART_A: usize = 4;
pub const PART_B: usize = 5;
pub const WHOLE_A: usize = 6;
pub const WHOLE_B: usize = 7;

pub fn class_names(classes: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(classes);
    let roles = [
        "amb-a", "amb-b", "anchor-a", "anchor-b", "part-a", "part-b", "whole-a", "whole-b",
    ];
    for (i, r) in roles.iter().enumerate() {
        if i < classes {
            names.push(r.to_string());
        }
    }
    for i in names.len()..classes {
        names.push(format!("filler-{}", i - roles.len()));
    }
    names
}

/// Relations between the role classes: `is-part-of` from each part to its
/// parent (directed) and `similar-to` between the members of each
/// ambiguous pair (symmetric).
pub fn default_knowledge_graph(classes: &ClassVocabulary) -> KnowledgeGraph {
    let c = classes.len();
    let mut kg = KnowledgeGraph::new(classes.clone());
    if c > AMB_B {
        kg.add_symmetric_edge("similar-to", AMB_A, AMB_B, 1.0);
    }
    if c > WHOLE_B {
        kg.add_edge("is-part-of", PART_A, WHOLE_A, 1.0);
        kg.add_edge("is-part-of", PART_B, WHOLE_B, 1.0);
        kg.add_symmetric_edge("similar-to", PART_A, PART_B, 1.0);
    }
    kg
}

// ---------------------------------------------------------------------------
// spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub scene_size: (f64, f64),
    pub scenes: usize,
    pub regions_min: usize,
    pub regions_max: usize,
    /// Fraction of each scene's regions drawn from the ambiguous pairs.
    pub ambiguity: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub noise_background: f64,
    pub noise_region: f64,
    pub noise_cell: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            classes: 8,
            grid: (12, 12),
            channels: 8,
            scene_size: (192.0, 192.0),
            scenes: 200,
            regions_min: 6,
            regions_max: 9,
            ambiguity: 0.5,
            val_frac: 0.15,
            test_frac: 0.15,
            noise_background: 0.3,
            noise_region: 0.3,
            noise_cell: 0.1,
            seed: 7,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), ScenesError> {
        if self.classes < 4 {
            return Err(ScenesError::BadSpec(format!(
                "need at least 4 classes for the spatial pair, got {}",
                self.classes
            )));
        }
        if self.classes == 5 || self.classes == 6 || self.classes == 7 {
            // Allowed: only the spatial tier plus fillers... but fillers
            // start after the full role table, so 5..=7 would alias part
            // roles onto scenes that never use them. Rule them out.
            return Err(ScenesError::BadSpec(format!(
                "classes must be 4 or >= 8 so role indices stay meaningful, got {}",
                self.classes
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.channels == 0 {
            return Err(ScenesError::BadSpec("grid and channels must be nonzero".into()));
        }
        if !(self.scene_size.0 > 0.0 && self.scene_size.1 > 0.0) {
            return Err(ScenesError::BadSpec("scene size must be positive".into()));
        }
        if self.regions_min < 2 || self.regions_min > self.regions_max {
            return Err(ScenesError::BadSpec(format!(
                "region range [{}, {}] invalid (need 2 <= min <= max)",
                self.regions_min, self.regions_max
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(ScenesError::BadSpec(format!(
                "ambiguity {} outside [0, 1]",
                self.ambiguity
            )));
        }
        if self.val_frac < 0.0 || self.test_frac < 0.0 || self.val_frac + self.test_frac >= 1.0 {
            return Err(ScenesError::BadSpec(
                "val/test fractions must be non-negative and sum below 1".into(),
            ));
        }
        if self.scenes == 0 {
            return Err(ScenesError::BadSpec("need at least one scene".into()));
        }
        Ok(())
    }

    fn has_semantic_tier(&self) -> bool {
        self.classes > WHOLE_B
    }
}

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub bx: PixelBox,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub grid: (usize, usize),
    pub channels: usize,
    pub size: (f64, f64),
    /// Row-major `grid.0 x grid.1 x channels`.
    pub features: Vec<f64>,
    pub regions: Vec<Region>,
}

impl Scene {
    /// Region boxes rescaled into the feature grid's pixel frame.
    pub fn grid_boxes(&self) -> Vec<PixelBox> {
        let sx = self.grid.1 as f64 / self.size.1;
        let sy = self.grid.0 as f64 / self.size.0;
        self.regions.iter().map(|r| r.bx.scaled(sx, sy)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self, classes: usize) -> Result<(), ScenesError> {
        let (gh, gw) = self.grid;
        if self.features.len() != gh * gw * self.channels {
            return Err(ScenesError::BadScene {
                id: self.id.clone(),
                msg: format!(
                    "feature length {} != {}x{}x{}",
                    self.features.len(),
                    gh,
                    gw,
                    self.channels
                ),
            });
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.label >= classes {
                return Err(ScenesError::BadScene {
                    id: self.id.clone(),
                    msg: format!("region {i} label {} out of range", r.label),
                });
            }
            if r.bx.x1 < 0.0 || r.bx.y1 < 0.0 || r.bx.x2 > self.size.1 || r.bx.y2 > self.size.0 {
                return Err(ScenesError::BadScene {
                    id: self.id.clone(),
                    msg: format!("region {i} box {:?} outside the scene", r.bx),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// deterministic sub-seeding
// ---------------------------------------------------------------------------

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

const TAG_PROTOTYPES: u64 = 0x70726f746f; // "proto"
const TAG_SCENE: u64 = 0x7363656e65; // "scene"
const TAG_PROPOSAL: u64 = 0x70726f70; // "prop"

pub fn sub_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag).wrapping_add(index))
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

/// Feature prototypes per class. Ambiguous pair members share a prototype;
/// everything else gets its own. Derived from the spec seed only, so every
/// scene (and every regeneration) agrees on them.
pub fn class_prototypes(spec: &BenchmarkSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, TAG_PROTOTYPES, 0));
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let shared = match c {
            AMB_B => Some(AMB_A),
            PART_B if spec.has_semantic_tier() => Some(PART_A),
            _ => None,
        };
        // Draw every class's vector so the stream layout is stable, then
        // alias the pair members.
        let own: Vec<f64> = (0..spec.channels).map(|_| gauss(&mut rng)).collect();
        match shared {
            Some(src) => protos.push(protos[src].clone()),
            None => protos.push(own),
        }
    }
    protos
}

/// How far other anchors must stay from an ambiguous region, as a multiple
/// of its designated anchor's distance.
const QUARANTINE: f64 = 1.8;
const MAX_PAIR_TRIES: usize = 80;
const MAX_BOX_TRIES: usize = 80;
const MAX_SCENE_RETRIES: usize = 300;

struct Draft {
    boxes: Vec<PixelBox>,
    /// Feature class painted into the grid (prototype index).
    feature_class: Vec<usize>,
    /// Final label (may differ from feature class only for ambiguous pairs).
    labels: Vec<usize>,
    /// (ambiguous region index, designated anchor index) pairs.
    spatial_pairs: Vec<(usize, usize)>,
}

fn is_anchor(class: usize) -> bool {
    class == ANCHOR_A || class == ANCHOR_B
}

fn sample_box(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> PixelBox {
    let (sh, sw) = spec.scene_size;
    let w = sw * (0.10 + 0.10 * rng.gen::<f64>());
    let h = sh * (0.10 + 0.10 * rng.gen::<f64>());
    let x1 = rng.gen::<f64>() * (sw - w);
    let y1 = rng.gen::<f64>() * (sh - h);
    // The min() guards against the sum creeping past the scene edge by a
    // rounding ulp.
    PixelBox::new(x1, y1, (x1 + w).min(sw), (y1 + h).min(sh))
        .expect("sampled box is valid by construction")
}

fn max_iou_with(bx: &PixelBox, others: &[PixelBox]) -> f64 {
    others.iter().map(|o| iou(bx, o)).fold(0.0, f64::max)
}

fn center_dist(a: &PixelBox, b: &PixelBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

const MAX_OVERLAP: f64 = 0.25;

/// One scene's worth of boxes and classes, or `None` if placement got stuck
/// and the caller should retry with fresh randomness.
fn draft_scene(spec: &BenchmarkSpec, regions: usize, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let (sh, sw) = spec.scene_size;
    let semantic = spec.has_semantic_tier();

    // Composition: how many ambiguous regions of each kind, plus support.
    let mut n_amb = (spec.ambiguity * regions as f64).round() as usize;
    let (mut n_spa, mut n_sem);
    loop {
        n_spa = if semantic { n_amb.div_ceil(2) } else { n_amb };
        n_sem = n_amb - n_spa;
        let support = n_spa + usize::from(n_sem > 0);
        if n_amb + support <= regions {
            break;
        }
        n_amb -= 1;
    }
    let n_free = regions - n_amb - n_spa - usize::from(n_sem > 0);
    let parent_side_a = rng.gen::<bool>();
    let parent_class = if parent_side_a { WHOLE_A } else { WHOLE_B };

    let mut draft = Draft {
        boxes: Vec::with_capacity(regions),
        feature_class: Vec::with_capacity(regions),
        labels: Vec::with_capacity(regions),
        spatial_pairs: Vec::new(),
    };
    // Distances from each ambiguous region to its designated anchor,
    // indexed like `spatial_pairs`.
    let mut pair_dist: Vec<f64> = Vec::new();

    let anchors_of = |d: &Draft| -> Vec<usize> {
        (0..d.boxes.len())
            .filter(|&i| is_anchor(d.feature_class[i]))
            .collect()
    };

    // 1. Spatial ambiguous regions, each with a designated anchor placed
    //    horizontally adjacent. Other anchors must stay outside every
    //    ambiguous region's quarantine radius.
    for _ in 0..n_spa {
        let mut placed = false;
        'pair: for _ in 0..MAX_PAIR_TRIES {
            let amb = sample_box(spec, rng);
            if max_iou_with(&amb, &draft.boxes) > MAX_OVERLAP {
                continue;
            }
            let anchor_class = if rng.gen::<bool>() { ANCHOR_A } else { ANCHOR_B };
            let aw = sw * (0.10 + 0.10 * rng.gen::<f64>());
            let ah = sh * (0.10 + 0.10 * rng.gen::<f64>());
            let (acx, acy) = amb.center();
            let gap = (amb.width() + aw) / 2.0 * (1.05 + 0.30 * rng.gen::<f64>());
            let mut side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            for _ in 0..2 {
                let cx = acx + side * gap;
                let (x1, y1) = (cx - aw / 2.0, acy - ah / 2.0);
                let candidate = PixelBox::new(x1, y1, x1 + aw, y1 + ah).ok();
                if let Some(anchor) = candidate {
                    let inside = anchor.x1 >= 0.0
                        && anchor.y1 >= 0.0
                        && anchor.x2 <= sw
                        && anchor.y2 <= sh;
                    if inside && max_iou_with(&anchor, &draft.boxes) <= MAX_OVERLAP {
                        let d_new = center_dist(&amb, &anchor);
                        // New anchor far from earlier ambiguous regions...
                        let clear_old = draft
                            .spatial_pairs
                            .iter()
                            .zip(pair_dist.iter())
                            .all(|(&(amb_j, _), &dj)| {
                                center_dist(&draft.boxes[amb_j], &anchor) >= QUARANTINE * dj
                            });
                        // ...and earlier anchors far from the new region.
                        let clear_new = anchors_of(&draft)
                            .iter()
                            .all(|&a| center_dist(&draft.boxes[a], &amb) >= QUARANTINE * d_new);
                        if clear_old && clear_new {
                            let amb_idx = draft.boxes.len();
                            draft.boxes.push(amb);
                            draft.feature_class.push(AMB_A); // shared prototype
                            draft.labels.push(usize::MAX); // resolved below
                            let anchor_idx = draft.boxes.len();
                            draft.boxes.push(anchor);
                            draft.feature_class.push(anchor_class);
                            draft.labels.push(anchor_class);
                            draft.spatial_pairs.push((amb_idx, anchor_idx));
                            pair_dist.push(d_new);
                            placed = true;
                            break 'pair;
                        }
                    }
                }
                side = -side;
            }
        }
        if !placed {
            return None;
        }
    }

    // 2. Parent region plus semantic ambiguous regions (no geometric tie).
    let mut plain_classes: Vec<usize> = Vec::new();
    if n_sem > 0 {
        plain_classes.push(parent_class);
        for _ in 0..n_sem {
            plain_classes.push(PART_A); // shared prototype; label from parent
        }
    }
    // 3. Free regions: anchors (quarantined), parents of the scene's side,
    //    or fillers.
    let mut free_pool: Vec<usize> = vec![ANCHOR_A, ANCHOR_B];
    if semantic {
        free_pool.push(parent_class);
    }
    free_pool.extend(WHOLE_B + 1..spec.classes);
    for _ in 0..n_free {
        plain_classes.push(free_pool[rng.gen_range(0..free_pool.len())]);
    }

    for class in plain_classes {
        let mut placed = false;
        for _ in 0..MAX_BOX_TRIES {
            let bx = sample_box(spec, rng);
            if max_iou_with(&bx, &draft.boxes) > MAX_OVERLAP {
                continue;
            }
            if is_anchor(class) {
                let clear = draft
                    .spatial_pairs
                    .iter()
                    .zip(pair_dist.iter())
                    .all(|(&(amb_j, _), &dj)| {
                        center_dist(&draft.boxes[amb_j], &bx) >= QUARANTINE * dj
                    });
                if !clear {
                    continue;
                }
            }
            draft.boxes.push(bx);
            draft.feature_class.push(class);
            let label = if class == PART_A && n_sem > 0 && parent_side_a {
                PART_A
            } else if class == PART_A && n_sem > 0 {
                PART_B
            } else {
                class
            };
            draft.labels.push(label);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    // 4. Resolve spatial labels from realized geometry and verify the
    //    designated anchor really is the nearest one.
    let anchor_idx = anchors_of(&draft);
    for &(amb_i, designated) in &draft.spatial_pairs {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for &a in &anchor_idx {
            let d = center_dist(&draft.boxes[amb_i], &draft.boxes[a]);
            if d < best_d {
                best_d = d;
                best = Some(a);
            }
        }
        match best {
            Some(a) if a == designated => {
                draft.labels[amb_i] = if draft.feature_class[a] == ANCHOR_A {
                    AMB_A
                } else {
                    AMB_B
                };
            }
            _ => return None,
        }
    }
    debug_assert!(draft.labels.iter().all(|&l| l != usize::MAX));
    Some(draft)
}

fn paint_features(spec: &BenchmarkSpec, draft: &Draft, protos: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (gh, gw) = spec.grid;
    let ch = spec.channels;
    let (sh, sw) = spec.scene_size;
    let mut feat = vec![0.0; gh * gw * ch];
    for v in feat.iter_mut() {
        *v = spec.noise_background * gauss(rng);
    }
    let sx = gw as f64 / sw;
    let sy = gh as f64 / sh;
    for (r, bx) in draft.boxes.iter().enumerate() {
        let proto = &protos[draft.feature_class[r]];
        let region_noise: Vec<f64> = (0..ch).map(|_| spec.noise_region * gauss(rng)).collect();
        let gb = bx.scaled(sx, sy);
        for iy in 0..gh {
            let cy = iy as f64 + 0.5;
            if cy < gb.y1 || cy > gb.y2 {
                continue;
            }
            for ix in 0..gw {
                let cx = ix as f64 + 0.5;
                if cx < gb.x1 || cx > gb.x2 {
                    continue;
                }
                for c in 0..ch {
                    feat[(iy * gw + ix) * ch + c] =
                        proto[c] + region_noise[c] + spec.noise_cell * gauss(rng);
                }
            }
        }
    }
    feat
}

pub fn generate_scene(spec: &BenchmarkSpec, index: usize, protos: &[Vec<f64>]) -> Result<Scene, ScenesError> {
    let id = format!("scene-{index:05}");
    for retry in 0..MAX_SCENE_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
            spec.seed,
            TAG_SCENE,
            (index as u64) << 16 | retry as u64,
        ));
        let regions = rng.gen_range(spec.regions_min..=spec.regions_max);
        if let Some(draft) = draft_scene(spec, regions, &mut rng) {
            let features = paint_features(spec, &draft, protos, &mut rng);
            let regions = draft
                .boxes
                .iter()
                .zip(draft.labels.iter())
                .map(|(bx, &label)| Region { bx: *bx, label })
                .collect();
            let scene = Scene {
                id,
                grid: spec.grid,
                channels: spec.channels,
                size: spec.scene_size,
                features,
                regions,
            };
            scene.validate(spec.classes)?;
            return Ok(scene);
        }
    }
    Err(ScenesError::Placement(id))
}

/// When the region-drop protocol removes a dropped region.
///
/// `Pre` removes it before inference, so the remaining regions reason
/// without it; `Post` runs inference on everything and only filters the
/// evaluation. Models without cross-region reasoning score identically
/// under both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropMode {
    Pre,
    Post,
}

impl DropMode {
    pub fn name(&self) -> &'static str {
        match self {
            DropMode::Pre => "pre",
            DropMode::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Option<DropMode> {
        match s {
            "pre" => Some(DropMode::Pre),
            "post" => Some(DropMode::Post),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, PartialEq)]
pub struct Dataset {
    pub classes: ClassVocabulary,
    pub kg: KnowledgeGraph,
    pub scenes: Vec<Scene>,
    /// Split per scene, same order as `scenes`.
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn generate(spec: &BenchmarkSpec) -> Result<Dataset, ScenesError> {
        spec.validate()?;
        let classes = ClassVocabulary::new(class_names(spec.classes))?;
        let kg = default_knowledge_graph(&classes);
        let protos = class_prototypes(spec);
        let mut scenes = Vec::with_capacity(spec.scenes);
        for i in 0..spec.scenes {
            scenes.push(generate_scene(spec, i, &protos)?);
        }
        let splits = assign_splits(spec.scenes, spec.val_frac, spec.test_frac);
        Ok(Dataset {
            classes,
            kg,
            scenes,
            splits,
        })
    }

    pub fn split_scenes(&self, split: Split) -> Vec<&Scene> {
        self.scenes
            .iter()
            .zip(self.splits.iter())
            .filter(|(_, s)| **s == split)
            .map(|(sc, _)| sc)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), ScenesError> {
        std::fs::create_dir_all(dir)?;
        self.classes.save(&dir.join("classes.txt"))?;
        self.kg.save(&dir.join("kg.tsv"))?;
        let mut scenes_txt = String::new();
        for s in &self.scenes {
            scenes_txt.push_str(&scene_to_line(s));
            scenes_txt.push('\n');
        }
        std::fs::write(dir.join("scenes.txt"), scenes_txt)?;
        let mut manifest = String::new();
        for (s, sp) in self.scenes.iter().zip(self.splits.iter()) {
            let _ = writeln!(manifest, "{}\t{}", sp.name(), s.id);
        }
        std::fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, ScenesError> {
        let classes = ClassVocabulary::load(&dir.join("classes.txt"))?;
        let kg = KnowledgeGraph::load(classes.clone(), &dir.join("kg.tsv"))?;
        let scenes_text = std::fs::read_to_string(dir.join("scenes.txt"))?;
        let mut scenes = Vec::new();
        for (i, line) in scenes_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let scene = scene_from_line(line, i + 1)?;
            scene.validate(classes.len())?;
            scenes.push(scene);
        }
        let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
        let mut by_id: BTreeMap<String, Split> = BTreeMap::new();
        for (i, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (sp, id) = line.split_once('\t').ok_or_else(|| ScenesError::Parse {
                line: i + 1,
                msg: "manifest line needs split<TAB>id".into(),
            })?;
            let split = Split::parse(sp).ok_or_else(|| ScenesError::Parse {
                line: i + 1,
                msg: format!("unknown split '{sp}'"),
            })?;
            by_id.insert(id.to_string(), split);
        }
        let mut splits = Vec::with_capacity(scenes.len());
        for s in &scenes {
            let split = by_id.get(&s.id).ok_or_else(|| ScenesError::BadScene {
                id: s.id.clone(),
                msg: "missing from manifest".into(),
            })?;
            splits.push(*split);
        }
        Ok(Dataset {
            classes,
            kg,
            scenes,
            splits,
        })
    }
}

/// Floor rule: `floor(frac * n)` scenes go to val and test; the remainder
/// (including all rounding slack) goes to train. Assignment is by position:
/// train block first, then val, then test.
pub fn assign_splits(n: usize, val_frac: f64, test_frac: f64) -> Vec<Split> {
    let n_val = (val_frac * n as f64).floor() as usize;
    let n_test = (test_frac * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut out = Vec::with_capacity(n);
    out.extend(std::iter::repeat(Split::Train).take(n_train));
    out.extend(std::iter::repeat(Split::Val).take(n_val));
    out.extend(std::iter::repeat(Split::Test).take(n_test));
    out
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_to_f64(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

pub fn scene_to_line(s: &Scene) -> String {
    let mut hex = String::with_capacity(s.features.len() * 16);
    for &v in &s.features {
        hex.push_str(&f64_to_hex(v));
    }
    let mut regions = String::new();
    for (i, r) in s.regions.iter().enumerate() {
        if i > 0 {
            regions.push(';');
        }
        let _ = write!(
            regions,
            "{} {} {} {} {}",
            r.bx.x1, r.bx.y1, r.bx.x2, r.bx.y2, r.label
        );
    }
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.id, s.grid.0, s.grid.1, s.channels, s.size.0, s.size.1, hex, s.regions.len(), regions
    )
}

pub fn scene_from_line(line: &str, line_no: usize) -> Result<Scene, ScenesError> {
    let err = |msg: String| ScenesError::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 9 {
        return Err(err(format!("expected 9 fields, got {}", fields.len())));
    }
    let id = fields[0].to_string();
    let gh: usize = fields[1].parse().map_err(|_| err("bad grid height".into()))?;
    let gw: usize = fields[2].parse().map_err(|_| err("bad grid width".into()))?;
    let ch: usize = fields[3].parse().map_err(|_| err("bad channel count".into()))?;
    let sh: f64 = fields[4].parse().map_err(|_| err("bad scene height".into()))?;
    let sw: f64 = fields[5].parse().map_err(|_| err("bad scene width".into()))?;
    let hex = fields[6];
    if hex.len() != gh * gw * ch * 16 {
        return Err(err(format!(
            "feature hex length {} != {}",
            hex.len(),
            gh * gw * ch * 16
        )));
    }
    let mut features = Vec::with_capacity(gh * gw * ch);
    for i in 0..(hex.len() / 16) {
        let chunk = &hex[i * 16..(i + 1) * 16];
        features.push(hex_to_f64(chunk).ok_or_else(|| err(format!("bad feature hex '{chunk}'")))?);
    }
    let count: usize = fields[7].parse().map_err(|_| err("bad region count".into()))?;
    let mut regions = Vec::with_capacity(count);
    if count > 0 {
        for part in fields[8].split(';') {
            let nums: Vec<&str> = part.split(' ').collect();
            if nums.len() != 5 {
                return Err(err(format!("region '{part}' needs 5 fields")));
            }
            let x1: f64 = nums[0].parse().map_err(|_| err("bad x1".into()))?;
            let y1: f64 = nums[1].parse().map_err(|_| err("bad y1".into()))?;
            let x2: f64 = nums[2].parse().map_err(|_| err("bad x2".into()))?;
            let y2: f64 = nums[3].parse().map_err(|_| err("bad y2".into()))?;
            let label: usize = nums[4].parse().map_err(|_| err("bad label".into()))?;
            regions.push(Region {
                bx: PixelBox::new(x1, y1, x2, y2)?,
                label,
            });
        }
    }
    if regions.len() != count {
        return Err(err(format!(
            "region count {} != declared {}",
            regions.len(),
            count
        )));
    }
    Ok(Scene {
        id,
        grid: (gh, gw),
        channels: ch,
        size: (sh, sw),
        features,
        regions,
    })
}

/// Content digest of a scene's canonical line form.
pub fn scene_digest(s: &Scene) -> String {
    let mut h = Sha256::new();
    h.update(scene_to_line(s).as_bytes());
    let out = h.finalize();
    out.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

// ---------------------------------------------------------------------------
// proposal drop protocol
// ---------------------------------------------------------------------------

/// Noisy proposal boxes for each region: every corner coordinate shifts by
/// a uniform amount up to `jitter` times the box's width/height, then the
/// box is clipped to the scene. The randomness depends only on the seed and
/// the scene id, never on the drop threshold, so keep-decisions are
/// monotone in the threshold.
pub fn region_proposals(
    scene: &Scene,
    count: usize,
    jitter: f64,
    seed: u64,
) -> Vec<Vec<PixelBox>> {
    assert!(
        (0.0..0.5).contains(&jitter),
        "jitter must be in [0, 0.5) so proposals stay non-degenerate"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_PROPOSAL, fnv1a(&scene.id)));
    let (sh, sw) = scene.size;
    scene
        .regions
        .iter()
        .map(|r| {
            (0..count)
                .map(|_| {
                    let w = r.bx.width();
                    let h = r.bx.height();
                    // Each proposal gets its own quality tier: corner noise
                    // scaled by a uniform draw from [0, jitter]. A fixed
                    // scale would concentrate the IoUs in a narrow band;
                    // the mixture covers tight through sloppy boxes.
                    let scale = rng.gen::<f64>() * jitter;
                    let mut u = || (rng.gen::<f64>() * 2.0 - 1.0) * scale;
                    let bx = PixelBox::new(
                        r.bx.x1 + u() * w,
                        r.bx.y1 + u() * h,
                        r.bx.x2 + u() * w,
                        r.bx.y2 + u() * h,
                    )
                    .expect("jitter below 0.5 keeps boxes non-degenerate");
                    bx.clipped_to(sw, sh)
                        .expect("proposal overlaps the scene by construction")
                })
                .collect()
        })
        .collect()
}

/// Keep mask under the drop protocol: region `r` survives iff the best
/// IoU between its ground-truth box and any of its proposals exceeds
/// `delta` (strictly).
pub fn keep_mask(scene: &Scene, proposals: &[Vec<PixelBox>], delta: f64) -> Vec<bool> {
    scene
        .regions
        .iter()
        .zip(proposals.iter())
        .map(|(r, props)| {
            props
                .iter()
                .map(|p| iou(&r.bx, p))
                .fold(0.0, f64::max)
                > delta
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            scenes: 12,
            ..Default::default()
        }
    }

    #[test]
    fn spec_validation_catches_bad_values() {
        let mut s = small_spec();
        s.classes = 3;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.classes = 6;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.ambiguity = 1.5;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.val_frac = 0.6;
        s.test_frac = 0.5;
        assert!(s.validate().is_err());
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn class_names_follow_roles_then_fillers() {
        let names = class_names(10);
        assert_eq!(names[0], "amb-a");
        assert_eq!(names[3], "anchor-b");
        assert_eq!(names[7], "whole-b");
        assert_eq!(names[8], "filler-0");
        assert_eq!(names[9], "filler-1");
    }

    #[test]
    fn ambiguous_pairs_share_prototypes() {
        let spec = small_spec();
        let protos = class_prototypes(&spec);
        assert_eq!(protos[AMB_A], protos[AMB_B]);
        assert_eq!(protos[PART_A], protos[PART_B]);
        assert_ne!(protos[ANCHOR_A], protos[ANCHOR_B]);
        assert_ne!(protos[WHOLE_A], protos[WHOLE_B]);
        assert_ne!(protos[AMB_A], protos[PART_A]);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = small_spec();
        let a = Dataset::generate(&spec).unwrap();
        let b = Dataset::generate(&spec).unwrap();
        assert_eq!(a, b);
        let mut spec2 = small_spec();
        spec2.seed = 8;
        let c = Dataset::generate(&spec2).unwrap();
        assert_ne!(a.scenes[0].features, c.scenes[0].features);
    }

    #[test]
    fn scene_digests_are_unique_across_scenes() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut digests: Vec<String> = ds.scenes.iter().map(scene_digest).collect();
        digests.sort();
        digests.dedup();
        assert_eq!(digests.len(), ds.scenes.len());
    }

    #[test]
    fn spatial_labels_match_nearest_anchor() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut checked = 0;
        for scene in &ds.scenes {
            let anchors: Vec<usize> = (0..scene.regions.len())
                .filter(|&i| {
                    scene.regions[i].label == ANCHOR_A || scene.regions[i].label == ANCHOR_B
                })
                .collect();
            for (i, r) in scene.regions.iter().enumerate() {
                if r.label != AMB_A && r.label != AMB_B {
                    continue;
                }
                let nearest = anchors
                    .iter()
                    .min_by(|&&a, &&b| {
                        center_dist(&r.bx, &scene.regions[a].bx)
                            .partial_cmp(&center_dist(&r.bx, &scene.regions[b].bx))
                            .unwrap()
                    })
                    .copied()
                    .expect("ambiguous region without an anchor");
                let expect = if scene.regions[nearest].label == ANCHOR_A {
                    AMB_A
                } else {
                    AMB_B
                };
                assert_eq!(r.label, expect, "scene {} region {i}", scene.id);
                checked += 1;
            }
        }
        assert!(checked > 0, "no spatial ambiguous regions generated");
    }

    #[test]
    fn semantic_labels_follow_the_scene_parent() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut checked = 0;
        for scene in &ds.scenes {
            let has_a = scene.regions.iter().any(|r| r.label == WHOLE_A);
            let has_b = scene.regions.iter().any(|r| r.label == WHOLE_B);
            assert!(!(has_a && has_b), "parents co-occur in {}", scene.id);
            for r in &scene.regions {
                if r.label == PART_A {
                    assert!(has_a, "part-a without whole-a in {}", scene.id);
                    checked += 1;
                }
                if r.label == PART_B {
                    assert!(has_b, "part-b without whole-b in {}", scene.id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no semantic ambiguous regions generated");
    }

    #[test]
    fn boxes_respect_overlap_cap_and_bounds() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        for scene in &ds.scenes {
            for (i, a) in scene.regions.iter().enumerate() {
                assert!(a.bx.x1 >= 0.0 && a.bx.y1 >= 0.0);
                assert!(a.bx.x2 <= scene.size.1 && a.bx.y2 <= scene.size.0);
                for b in scene.regions.iter().skip(i + 1) {
                    assert!(iou(&a.bx, &b.bx) <= MAX_OVERLAP + 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_floor_rule_hand_case() {
        let splits = assign_splits(10, 0.15, 0.15);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 8);
        assert_eq!(count(Split::Val), 1);
        assert_eq!(count(Split::Test), 1);
        assert_eq!(splits[0], Split::Train);
        assert_eq!(splits[8], Split::Val);
        assert_eq!(splits[9], Split::Test);
    }

    #[test]
    fn dataset_roundtrips_through_files_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&small_spec()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn scene_line_roundtrip_is_exact() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        for s in &ds.scenes {
            let line = scene_to_line(s);
            let back = scene_from_line(&line, 1).unwrap();
            assert_eq!(*s, back);
        }
    }

    #[test]
    fn default_graph_is_ready_after_preparation() {
        let classes = ClassVocabulary::new(class_names(8)).unwrap();
        let mut kg = default_knowledge_graph(&classes);
        kg.add_inverse_edges();
        let kg = kg.row_normalized();
        kg.validate_ready().unwrap();
        assert_eq!(kg.is_directed("is-part-of"), Some(true));
        assert_eq!(kg.is_directed("similar-to"), Some(false));
        assert_eq!(kg.matrix("is-part-of").unwrap().at(PART_A, WHOLE_A), 1.0);
        assert_eq!(kg.matrix("is-part-of-inv").unwrap().at(WHOLE_B, PART_B), 1.0);
    }

    #[test]
    fn proposals_always_overlap_their_region() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        for scene in &ds.scenes {
            let props = region_proposals(scene, 3, 0.2, 99);
            for (r, ps) in scene.regions.iter().zip(props.iter()) {
                assert_eq!(ps.len(), 3);
                for p in ps {
                    assert!(iou(&r.bx, p) > 0.0);
                }
            }
        }
    }

    #[test]
    fn keep_mask_at_zero_keeps_everything() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        for scene in &ds.scenes {
            let props = region_proposals(scene, 3, 0.2, 99);
            let mask = keep_mask(scene, &props, 0.0);
            assert!(mask.iter().all(|&k| k));
        }
    }

    #[test]
    fn keep_counts_are_monotone_in_delta() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        for scene in &ds.scenes {
            let props = region_proposals(scene, 3, 0.2, 99);
            let mut prev = usize::MAX;
            for delta in [0.0, 0.3, 0.5, 0.8, 0.95] {
                let kept = keep_mask(scene, &props, delta)
                    .iter()
                    .filter(|&&k| k)
                    .count();
                assert!(kept <= prev);
                prev = kept;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn generation_succeeds_across_seeds_and_ambiguity(
            seed in 0u64..500, amb in 0.0f64..0.75
        ) {
            let spec = BenchmarkSpec {
                scenes: 2,
                seed,
                ambiguity: amb,
                ..Default::default()
            };
            let ds = Dataset::generate(&spec).unwrap();
            prop_assert_eq!(ds.scenes.len(), 2);
            for s in &ds.scenes {
                prop_assert!(s.regions.len() >= spec.regions_min);
                prop_assert!(s.regions.len() <= spec.regions_max);
            }
        }
    }
}
