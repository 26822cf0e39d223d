//! Synthetic shape dataset: surface-sampled primitives with per-cloud
//! rotation and scale jitter, global normalization, and text file I/O.
//!
//! Four primitive classes stand in for scanned categories. Points are drawn
//! uniformly by surface area; each cloud gets one random rotation about the
//! vertical (y) axis and one scale factor in [0.8, 1.2].

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.35;
pub const SCALE_JITTER_LO: f64 = 0.8;
pub const SCALE_JITTER_HI: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
    Cylinder,
}

impl ShapeKind {
    pub fn all() -> [ShapeKind; 4] {
        [
            ShapeKind::Sphere,
            ShapeKind::Box,
            ShapeKind::Torus,
            ShapeKind::Cylinder,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    pub fn from_name(name: &str) -> Result<ShapeKind> {
        match name {
            "sphere" => Ok(ShapeKind::Sphere),
            "box" => Ok(ShapeKind::Box),
            "torus" => Ok(ShapeKind::Torus),
            "cylinder" => Ok(ShapeKind::Cylinder),
            other => Err(Error::Config(format!(
                "unknown shape kind '{other}' (expected sphere, box, torus, or cylinder)"
            ))),
        }
    }
}

fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let y = 1.0 - 2.0 * rng.gen::<f64>();
    let rho = (1.0 - y * y).max(0.0).sqrt();
    let theta = 2.0 * PI * rng.gen::<f64>();
    [rho * theta.cos(), y, rho * theta.sin()]
}

fn box_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // All six faces of the [-1,1] cube have equal area, so a uniform face
    // pick is already area-weighted.
    let face = rng.gen_range(0..6usize);
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let a = 2.0 * rng.gen::<f64>() - 1.0;
    let b = 2.0 * rng.gen::<f64>() - 1.0;
    match face / 2 {
        0 => [sign, a, b],
        1 => [a, sign, b],
        _ => [a, b, sign],
    }
}

fn torus_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // The tube angle has density proportional to R + r*cos(v); rejection
    // sampling against that envelope keeps the draw area-uniform.
    let v = loop {
        let v = 2.0 * PI * rng.gen::<f64>();
        let accept = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
        if rng.gen::<f64>() <= accept {
            break v;
        }
    };
    let u = 2.0 * PI * rng.gen::<f64>();
    let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
    [ring * u.cos(), TORUS_MINOR * v.sin(), ring * u.sin()]
}

fn cylinder_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Radius 1, height 2: side area 4*pi, caps pi each, so the side takes
    // two thirds of the points and each cap one sixth.
    let pick = rng.gen::<f64>();
    if pick < 2.0 / 3.0 {
        let theta = 2.0 * PI * rng.gen::<f64>();
        let y = 2.0 * rng.gen::<f64>() - 1.0;
        [theta.cos(), y, theta.sin()]
    } else {
        let sign = if pick < 5.0 / 6.0 { 1.0 } else { -1.0 };
        let rad = rng.gen::<f64>().sqrt();
        let theta = 2.0 * PI * rng.gen::<f64>();
        [rad * theta.cos(), sign, rad * theta.sin()]
    }
}

fn base_point(kind: ShapeKind, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match kind {
        ShapeKind::Sphere => sphere_point(rng),
        ShapeKind::Box => box_point(rng),
        ShapeKind::Torus => torus_point(rng),
        ShapeKind::Cylinder => cylinder_point(rng),
    }
}

/// Samples `n` points uniformly by area on the chosen surface, then applies
/// one rotation about the y axis and one scale factor to the whole cloud.
/// The y coordinate is only ever scaled, never mixed with x and z.
pub fn gen_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::Contract("shape needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = 2.0 * PI * rng.gen::<f64>();
    let scale = SCALE_JITTER_LO + (SCALE_JITTER_HI - SCALE_JITTER_LO) * rng.gen::<f64>();
    let (sin, cos) = angle.sin_cos();
    Ok((0..n)
        .map(|_| {
            let p = base_point(kind, &mut rng);
            [
                scale * (cos * p[0] + sin * p[2]),
                scale * p[1],
                scale * (-sin * p[0] + cos * p[2]),
            ]
        })
        .collect())
}

/// Global affine normalization parameters: `normalized = (x - center)/scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub center: [f64; 3],
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub clouds: Vec<Vec<[f64; 3]>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub norm: Option<NormStats>,
    pub seed: u64,
    pub points: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Generates `per_class` clouds for each class with a fresh sub-seed per
/// cloud, and splits each class with one fifth (rounded down) held out.
pub fn make_dataset(
    classes: &[ShapeKind],
    per_class: usize,
    points: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::Config("dataset needs at least one class".into()));
    }
    if per_class == 0 {
        return Err(Error::Config("per-class cloud count must be positive".into()));
    }
    if points == 0 {
        return Err(Error::Config("points per cloud must be positive".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut clouds = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let held_out = per_class / 5;
    for (c, kind) in classes.iter().enumerate() {
        for i in 0..per_class {
            let cloud_seed = master.gen::<u64>();
            clouds.push(gen_shape(*kind, points, cloud_seed)?);
            labels.push(c);
            let index = c * per_class + i;
            if i < per_class - held_out {
                train.push(index);
            } else {
                test.push(index);
            }
        }
    }
    Ok(Dataset {
        clouds,
        labels,
        class_names: classes.iter().map(|k| k.name().to_string()).collect(),
        train,
        test,
        norm: None,
        seed,
        points,
    })
}

/// Centers the pooled coordinates at zero and scales the pooled maximum
/// absolute coordinate to exactly one. Stats allow denormalization.
pub fn normalize_global(ds: &mut Dataset) -> Result<NormStats> {
    let count: usize = ds.clouds.iter().map(|c| c.len()).sum();
    if count == 0 {
        return Err(Error::Contract("cannot normalize an empty dataset".into()));
    }
    let mut center = [0.0f64; 3];
    for cloud in &ds.clouds {
        for p in cloud {
            for ax in 0..3 {
                center[ax] += p[ax];
            }
        }
    }
    for ax in 0..3 {
        center[ax] /= count as f64;
    }
    let mut max_abs = 0.0f64;
    for cloud in &ds.clouds {
        for p in cloud {
            for ax in 0..3 {
                max_abs = max_abs.max((p[ax] - center[ax]).abs());
            }
        }
    }
    if max_abs == 0.0 {
        return Err(Error::Numeric(
            "degenerate dataset: all coordinates identical, no scale".into(),
        ));
    }
    for cloud in ds.clouds.iter_mut() {
        for p in cloud.iter_mut() {
            for ax in 0..3 {
                p[ax] = (p[ax] - center[ax]) / max_abs;
            }
        }
    }
    let stats = NormStats {
        center,
        scale: max_abs,
    };
    ds.norm = Some(stats);
    Ok(stats)
}

/// Maps a normalized cloud back to original coordinates.
pub fn denormalize_cloud(cloud: &[[f64; 3]], stats: &NormStats) -> Vec<[f64; 3]> {
    cloud
        .iter()
        .map(|p| {
            [
                p[0] * stats.scale + stats.center[0],
                p[1] * stats.scale + stats.center[1],
                p[2] * stats.scale + stats.center[2],
            ]
        })
        .collect()
}

/// Writes one point per line as three fixed seven-decimal floats.
pub fn write_cloud(cloud: &[[f64; 3]], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 36);
    for p in cloud {
        out.push_str(&format!("{:.7} {:.7} {:.7}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a cloud file, reporting the 1-based line number of any bad line.
pub fn read_cloud(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path)?;
    let mut cloud = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Format(format!(
                "{}: line {}: expected 3 coordinates, found {}",
                path.display(),
                idx + 1,
                tokens.len()
            )));
        }
        let mut p = [0.0f64; 3];
        for (ax, tok) in tokens.iter().enumerate() {
            p[ax] = tok.parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{}: line {}: invalid number '{tok}'",
                    path.display(),
                    idx + 1
                ))
            })?;
        }
        cloud.push(p);
    }
    Ok(cloud)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub class_name: String,
    pub class_id: usize,
    pub split: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub points: usize,
    pub entries: Vec<ManifestEntry>,
    pub norm: Option<NormStats>,
}

/// Writes every cloud as `<class>_<index>.xyz` next to a `manifest.json`
/// recording class, split membership, and normalization stats. Returns the
/// manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let train: std::collections::HashSet<usize> = ds.train.iter().copied().collect();
    let mut entries = Vec::with_capacity(ds.clouds.len());
    for (i, cloud) in ds.clouds.iter().enumerate() {
        let class_id = ds.labels[i];
        let file = format!("{}_{i:04}.xyz", ds.class_names[class_id]);
        write_cloud(cloud, &dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            class_name: ds.class_names[class_id].clone(),
            class_id,
            split: if train.contains(&i) { "train" } else { "test" }.to_string(),
        });
    }
    let manifest = Manifest {
        seed: ds.seed,
        points: ds.points,
        entries,
        norm: ds.norm,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).map_err(io_like)?)?;
    Ok(path)
}

fn io_like(e: serde_json::Error) -> Error {
    Error::Format(format!("manifest serialization failed: {e}"))
}

/// Rebuilds a dataset from a manifest and the cloud files beside it.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::Format(format!("{}: {e}", manifest_path.display()))
    })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut clouds = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut class_names: Vec<Option<String>> = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        clouds.push(read_cloud(&dir.join(&entry.file))?);
        labels.push(entry.class_id);
        if class_names.len() <= entry.class_id {
            class_names.resize(entry.class_id + 1, None);
        }
        match &class_names[entry.class_id] {
            None => class_names[entry.class_id] = Some(entry.class_name.clone()),
            Some(existing) if *existing != entry.class_name => {
                return Err(Error::Format(format!(
                    "class id {} maps to both '{existing}' and '{}'",
                    entry.class_id, entry.class_name
                )));
            }
            Some(_) => {}
        }
        match entry.split.as_str() {
            "train" => train.push(i),
            "test" => test.push(i),
            other => {
                return Err(Error::Format(format!(
                    "unknown split '{other}' for file {}",
                    entry.file
                )));
            }
        }
    }
    let class_names: Result<Vec<String>> = class_names
        .into_iter()
        .enumerate()
        .map(|(id, name)| {
            name.ok_or_else(|| Error::Format(format!("class id {id} has no entries")))
        })
        .collect();
    Ok(Dataset {
        clouds,
        labels,
        class_names: class_names?,
        train,
        test,
        norm: manifest.norm,
        seed: manifest.seed,
        points: manifest.points,
    })
}
