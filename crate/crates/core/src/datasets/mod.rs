//! Synthetic shape benchmark: generation, manifests, splits.
//!
//! On disk a dataset is a directory holding `manifest.jsonl` (one JSON
//! record per line), `clouds/<shape>.spcd` and `views/<shape>_<view>.vfeat`.
//! Split manifests (`train.jsonl`, `test.jsonl`) reference the same files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, gen_shape, normalize, project_views, spcd, FamilyKind, ShapeFamily, ShapeSpec, ViewFeature};
use crate::io::Reader;
use crate::seed;
use crate::trainer::TrainTuple;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

pub const VFEAT_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub families: Vec<FamilyKind>,
    pub per_family: usize,
    pub n_views: usize,
    pub n_points: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Recipe {
    /// Four families of sixteen variants, twelve views each.
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            name: "synthetic-64".into(),
            families: vec![FamilyKind::Sphere, FamilyKind::Box, FamilyKind::Cylinder, FamilyKind::Torus],
            per_family: 16,
            n_views: geometry::DEFAULT_VIEWS,
            n_points: 1024,
            grid: geometry::DEFAULT_GRID,
            seed,
        }
    }

    pub fn with_families(mut self, families: &[FamilyKind]) -> Self {
        self.families = families.to_vec();
        self
    }

    fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.per_family == 0 || self.n_views == 0 || self.n_points == 0 || self.grid == 0 {
            return Err(Error::param("recipe counts must all be at least 1"));
        }
        let unique: BTreeSet<_> = self.families.iter().collect();
        if unique.len() != self.families.len() {
            return Err(Error::param("recipe lists a family twice"));
        }
        Ok(())
    }
}

/// Parameters of variant `index` of a family.
///
/// Views are taken at fixed azimuths, so variants differ only in
/// yaw-symmetric properties: sixteen variants form a 4 x 4 grid of height
/// ratio and taper (tube thickness instead of taper for tori). Cylinder grids
/// sit half a step off the box grids, whose silhouettes are otherwise close.
/// Larger counts wrap around the grid with a small offset. Each parameter is
/// perturbed by up to 2%, so variants in neighbouring cells are near-duplicates.
pub fn variant_spec(family: FamilyKind, index: usize, rng: &mut impl Rng) -> ShapeSpec {
    let cell = index % 16;
    let lap = (index / 16) as f64;
    let mut jitter = |v: f64| v * (1.0 + 0.04 * lap + rng.random_range(-0.02..=0.02));
    let ladder = |lo: f64, hi: f64, i: f64| lo * (hi / lo).powf(i / 3.0);
    let (row, col) = ((cell / 4) as f64, (cell % 4) as f64);
    let taper = |jitter: &mut dyn FnMut(f64) -> f64, offset: f64| jitter(-0.6 + 0.4 * (col + offset)).clamp(-0.9, 0.9);
    match family {
        FamilyKind::Sphere => {
            let t = taper(&mut jitter, 0.0);
            ShapeSpec::new(ShapeFamily::Sphere { radius: 1.0 })
                .with_stretch([1.0, 1.0, jitter(ladder(0.4, 1.8, row))])
                .with_taper(t)
        }
        FamilyKind::Box => {
            let t = taper(&mut jitter, 0.0);
            ShapeSpec::new(ShapeFamily::Box {
                half_extents: [1.0, 1.0, jitter(ladder(0.25, 1.6, row))],
            })
            .with_taper(t)
        }
        FamilyKind::Cylinder => {
            let t = taper(&mut jitter, 0.5);
            ShapeSpec::new(ShapeFamily::Cylinder {
                radius: 1.0,
                half_height: jitter(ladder(0.35, 1.6, row + 0.5)),
            })
            .with_taper(t)
        }
        FamilyKind::Torus => ShapeSpec::new(ShapeFamily::Torus {
            major_radius: 1.0,
            minor_radius: jitter(ladder(0.2, 0.7, col)),
        })
        .with_stretch([1.0, 1.0, jitter(ladder(0.8, 2.4, row))]),
        FamilyKind::Superellipsoid => ShapeSpec::new(ShapeFamily::Superellipsoid {
            radii: [1.0, 1.0, jitter(ladder(0.4, 2.0, row))],
            e1: jitter(ladder(0.3, 2.0, col)),
            e2: 1.0,
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ShapeCentered,
    ImageCentered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSide {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub mode: SplitMode,
    pub side: SplitSide,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub class_id: String,
    pub spec: ShapeSpec,
    pub cloud: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub shape_id: String,
    pub view_index: usize,
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n_points: usize,
    pub n_views: usize,
    pub grid: usize,
    pub split: Option<SplitInfo>,
    pub shapes: Vec<ShapeRecord>,
    pub views: Vec<ViewRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Dataset {
        name: String,
        n_points: usize,
        n_views: usize,
        grid: usize,
    },
    Split(SplitInfo),
    Shape(ShapeRecord),
    View(ViewRecord),
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![Line::Dataset {
            name: self.name.clone(),
            n_points: self.n_points,
            n_views: self.n_views,
            grid: self.grid,
        }];
        if let Some(s) = &self.split {
            lines.push(Line::Split(s.clone()));
        }
        lines.extend(self.shapes.iter().cloned().map(Line::Shape));
        lines.extend(self.views.iter().cloned().map(Line::View));
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("manifest line serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut split = None;
        let mut shapes = Vec::new();
        let mut views = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line =
                serde_json::from_str(line).map_err(|e| Error::format(format!("manifest line {}: {e}", n + 1)))?;
            match parsed {
                Line::Dataset {
                    name,
                    n_points,
                    n_views,
                    grid,
                } => header = Some((name, n_points, n_views, grid)),
                Line::Split(s) => split = Some(s),
                Line::Shape(s) => shapes.push(s),
                Line::View(v) => views.push(v),
            }
        }
        let (name, n_points, n_views, grid) = header.ok_or_else(|| Error::format("manifest has no dataset record"))?;
        let m = DatasetManifest {
            name,
            n_points,
            n_views,
            grid,
            split,
            shapes,
            views,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.shapes {
            if !ids.insert(&s.shape_id) {
                return Err(Error::DuplicateId(s.shape_id.clone()));
            }
        }
        let mut pairs = BTreeSet::new();
        for v in &self.views {
            if !ids.contains(&v.shape_id) {
                return Err(Error::format(format!("view references unknown shape `{}`", v.shape_id)));
            }
            if v.view_index >= self.n_views {
                return Err(Error::format(format!("view index {} out of range", v.view_index)));
            }
            if !pairs.insert((&v.shape_id, v.view_index)) {
                return Err(Error::format(format!("view {}#{} listed twice", v.shape_id, v.view_index)));
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> BTreeSet<&str> {
        self.shapes.iter().map(|s| s.class_id.as_str()).collect()
    }

    fn views_by_shape(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for v in &self.views {
            out.entry(&v.shape_id).or_default().push(v.view_index);
        }
        out
    }
}

fn shape_cloud(spec: &ShapeSpec, n_points: usize, seed: u64) -> Result<geometry::PointCloud> {
    Ok(normalize(&gen_shape(spec, n_points, seed)?))
}

/// What a tuple's cloud looks like after an SPCD round trip and renormalization.
fn stored_cloud(raw: &geometry::PointCloud, shape_id: &str, class_id: &str) -> geometry::PointCloud {
    let mut c = normalize(&raw.round_to_f32());
    c.shape_id = shape_id.into();
    c.class_id = class_id.into();
    c
}

fn stored_views(cloud: &geometry::PointCloud, n_views: usize, grid: usize) -> Result<Vec<ViewFeature>> {
    let mut views = project_views(cloud, n_views, grid)?;
    for v in &mut views {
        for x in &mut v.descriptor {
            *x = f64::from(*x as f32);
        }
    }
    Ok(views)
}

fn cloud_rel(shape_id: &str) -> String {
    format!("clouds/{shape_id}.spcd")
}

fn view_rel(shape_id: &str, view: usize) -> String {
    format!("views/{shape_id}_{view:02}.vfeat")
}

struct Generated {
    manifest: DatasetManifest,
    raw_clouds: Vec<geometry::PointCloud>,
}

fn generate(recipe: &Recipe) -> Result<Generated> {
    recipe.validate()?;
    let mut shapes = Vec::new();
    let mut views = Vec::new();
    let mut raw_clouds = Vec::new();
    for &family in &recipe.families {
        let mut rng = seed::rng(seed::derive(recipe.seed, &[seed::hash_str("variants"), family as u64]));
        for i in 0..recipe.per_family {
            let spec = variant_spec(family, i, &mut rng);
            let shape_id = format!("{}_{i:03}", family.name());
            let cloud_seed = seed::derive(recipe.seed, &[seed::hash_str(&shape_id)]);
            raw_clouds.push(shape_cloud(&spec, recipe.n_points, cloud_seed)?);
            for v in 0..recipe.n_views {
                views.push(ViewRecord {
                    shape_id: shape_id.clone(),
                    view_index: v,
                    path: Some(view_rel(&shape_id, v)),
                });
            }
            shapes.push(ShapeRecord {
                cloud: cloud_rel(&shape_id),
                shape_id,
                class_id: family.name().into(),
                spec,
                seed: cloud_seed,
            });
        }
    }
    Ok(Generated {
        manifest: DatasetManifest {
            name: recipe.name.clone(),
            n_points: recipe.n_points,
            n_views: recipe.n_views,
            grid: recipe.grid,
            split: None,
            shapes,
            views,
        },
        raw_clouds,
    })
}

/// Generates the dataset in memory: the manifest plus one tuple per shape
/// holding every view. Values equal what [`load_tuples`] reads back from
/// the files written by [`gen_dataset`].
pub fn generate_in_memory(recipe: &Recipe) -> Result<(DatasetManifest, Vec<TrainTuple>)> {
    let g = generate(recipe)?;
    let tuples = g
        .manifest
        .shapes
        .iter()
        .zip(&g.raw_clouds)
        .map(|(rec, raw)| {
            let cloud = stored_cloud(raw, &rec.shape_id, &rec.class_id);
            let views = stored_views(&cloud, recipe.n_views, recipe.grid)?;
            Ok(TrainTuple::new(cloud, views))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g.manifest, tuples))
}

/// Writes clouds, view features and `manifest.jsonl` (last) under `dir`.
pub fn gen_dataset(recipe: &Recipe, dir: &Path) -> Result<DatasetManifest> {
    let g = generate(recipe)?;
    for (rec, raw) in g.manifest.shapes.iter().zip(&g.raw_clouds) {
        spcd::write(&dir.join(&rec.cloud), raw)?;
        let cloud = stored_cloud(raw, &rec.shape_id, &rec.class_id);
        for view in stored_views(&cloud, recipe.n_views, recipe.grid)? {
            write_vfeat(&dir.join(view_rel(&rec.shape_id, view.view_index)), &view)?;
        }
    }
    g.manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(g.manifest)
}

pub fn encode_vfeat(view: &ViewFeature) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * view.dim());
    out.extend_from_slice(VFEAT_MAGIC);
    out.extend_from_slice(&VFEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(view.dim() as u32).to_le_bytes());
    for &v in &view.descriptor {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_vfeat(bytes: &[u8], view_index: usize) -> Result<ViewFeature> {
    let mut r = Reader::new(bytes, "view feature");
    if r.take(4)? != VFEAT_MAGIC {
        return Err(Error::format("bad view feature magic"));
    }
    if r.u32()? != VFEAT_VERSION {
        return Err(Error::format("unsupported view feature version"));
    }
    let dim = r.u32()? as usize;
    let descriptor = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let view = ViewFeature { view_index, descriptor };
    view.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(view)
}

pub fn write_vfeat(path: &Path, view: &ViewFeature) -> Result<()> {
    crate::io::write_atomic(path, &encode_vfeat(view))
}

pub fn read_vfeat(path: &Path, view_index: usize) -> Result<ViewFeature> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vfeat(&bytes, view_index)
}

/// Loads one tuple per shape with the views the manifest lists for it.
/// Views without a stored feature file are projected from the cloud.
pub fn load_tuples(manifest: &DatasetManifest, root: &Path) -> Result<Vec<TrainTuple>> {
    let by_shape: HashMap<&str, Vec<&ViewRecord>> = manifest.views.iter().fold(HashMap::new(), |mut m, v| {
        m.entry(v.shape_id.as_str()).or_insert_with(Vec::new).push(v);
        m
    });
    manifest
        .shapes
        .iter()
        .map(|rec| {
            let raw = spcd::read(&root.join(&rec.cloud), &rec.shape_id, &rec.class_id)?;
            let cloud = stored_cloud(&raw, &rec.shape_id, &rec.class_id);
            let mut projected: Option<Vec<ViewFeature>> = None;
            let mut views = Vec::new();
            for v in by_shape.get(rec.shape_id.as_str()).into_iter().flatten() {
                let feature = match &v.path {
                    Some(p) if root.join(p).exists() => read_vfeat(&root.join(p), v.view_index)?,
                    _ => {
                        if projected.is_none() {
                            projected = Some(stored_views(&cloud, manifest.n_views, manifest.grid)?);
                        }
                        projected.as_ref().unwrap()[v.view_index].clone()
                    }
                };
                views.push(feature);
            }
            views.sort_by_key(|v| v.view_index);
            Ok(TrainTuple::new(cloud, views))
        })
        .collect()
}

/// Splits a manifest into train and test sides, stratified by class.
///
/// Shape-centered splits partition shapes. Image-centered splits keep every
/// shape on both sides and partition each shape's views.
pub fn split(
    manifest: &DatasetManifest,
    mode: SplitMode,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let info = |side| {
        Some(SplitInfo {
            mode,
            side,
            fraction,
            seed,
        })
    };
    let mut train = DatasetManifest {
        split: info(SplitSide::Train),
        shapes: Vec::new(),
        views: Vec::new(),
        ..manifest.clone()
    };
    let mut test = DatasetManifest {
        split: info(SplitSide::Test),
        ..train.clone()
    };
    match mode {
        SplitMode::ShapeCentered => {
            let mut by_class: BTreeMap<&str, Vec<&ShapeRecord>> = BTreeMap::new();
            for s in &manifest.shapes {
                by_class.entry(&s.class_id).or_default().push(s);
            }
            let mut train_ids = BTreeSet::new();
            for (class, mut members) in by_class {
                let mut rng = seed::rng(seed::derive(seed, &[seed::hash_str("shape-split"), seed::hash_str(class)]));
                members.shuffle(&mut rng);
                let n_train = (fraction * members.len() as f64).round() as usize;
                train_ids.extend(members[..n_train].iter().map(|s| s.shape_id.as_str()));
            }
            for s in &manifest.shapes {
                let side = if train_ids.contains(s.shape_id.as_str()) { &mut train } else { &mut test };
                side.shapes.push(s.clone());
            }
            for v in &manifest.views {
                let side = if train_ids.contains(v.shape_id.as_str()) { &mut train } else { &mut test };
                side.views.push(v.clone());
            }
        }
        SplitMode::ImageCentered => {
            train.shapes = manifest.shapes.clone();
            test.shapes = manifest.shapes.clone();
            let mut train_pairs = BTreeSet::new();
            for (shape, mut views) in manifest.views_by_shape() {
                let mut rng = seed::rng(seed::derive(seed, &[seed::hash_str("view-split"), seed::hash_str(shape)]));
                views.shuffle(&mut rng);
                let n_train = (fraction * views.len() as f64).round() as usize;
                train_pairs.extend(views[..n_train].iter().map(|&v| (shape.to_string(), v)));
            }
            for v in &manifest.views {
                if train_pairs.contains(&(v.shape_id.clone(), v.view_index)) {
                    train.views.push(v.clone());
                } else {
                    test.views.push(v.clone());
                }
            }
        }
    }
    if train.views.is_empty() || test.views.is_empty() || train.shapes.is_empty() || test.shapes.is_empty() {
        return Err(Error::param(format!("split fraction {fraction} leaves one side empty")));
    }
    Ok((train, test))
}

/// Restricts in-memory tuples to the views listed in `manifest`.
pub fn select_tuples(tuples: &[TrainTuple], manifest: &DatasetManifest) -> Vec<TrainTuple> {
    let wanted = manifest.views_by_shape();
    tuples
        .iter()
        .filter(|t| manifest.shapes.iter().any(|s| s.shape_id == t.shape_id))
        .map(|t| {
            let keep = wanted.get(t.shape_id.as_str()).cloned().unwrap_or_default();
            TrainTuple {
                views: t.views.iter().filter(|v| keep.contains(&v.view_index)).cloned().collect(),
                ..t.clone()
            }
        })
        .collect()
}

/// Default paths of a generated dataset directory.
pub fn manifest_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(TRAIN_FILE), dir.join(TEST_FILE))
}

#[cfg(test)]
mod tests;
