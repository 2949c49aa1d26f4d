//! Synthetic part-labeled shapes, partial-view crops, resampling, and the
//! dataset / text-bank / teacher fixture files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attndistill::init_projector;
use crate::binio::{push_f32_le, push_u16_le, read_f32_le, read_file, read_json, read_u16_le, to_json_bytes, write_file};
use crate::checkpoint::ModelConfig;
use crate::encoder::{init_weights, EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, ParamSet};
use crate::pointcloud::PointCloud;
use crate::textcorr::{HeadConfig, TextBank};

pub const DATASET_VERSION: u32 = 1;

/// Default affordance vocabulary, in canonical label order.
pub const DEFAULT_LABELS: [&str; 6] = ["grasp", "support", "pour", "contain", "cut", "wrap-grasp"];

/// Mixes a base seed with an index (splitmix64 finalizer).
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Mug,
    Table,
    Bottle,
    Knife,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Mug, ShapeFamily::Table, ShapeFamily::Bottle, ShapeFamily::Knife];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Mug => "mug",
            ShapeFamily::Table => "table",
            ShapeFamily::Bottle => "bottle",
            ShapeFamily::Knife => "knife",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown shape family `{s}`")))
    }

    /// Parts in sampling order.
    fn parts(self) -> Vec<Part> {
        use Primitive::*;
        match self {
            ShapeFamily::Mug => vec![
                Part::new("body", vec![
                    Cylinder { center: [0.0, 0.0], radius: 0.4, z: (-0.4, 0.4) },
                    Disk { center: [0.0, 0.0, -0.4], radius: 0.4 },
                ]),
                Part::new("handle", vec![TorusArc {
                    center: [0.4, 0.0, 0.0],
                    major: 0.22,
                    minor: 0.05,
                    arc: (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
                }]),
            ],
            ShapeFamily::Table => {
                let mut legs = Vec::new();
                for (x, y) in [(0.5, 0.3), (0.5, -0.3), (-0.5, 0.3), (-0.5, -0.3)] {
                    legs.push(Cylinder { center: [x, y], radius: 0.04, z: (-0.45, 0.3) });
                }
                vec![
                    Part::new("top", vec![Cuboid { min: [-0.6, -0.4, 0.3], max: [0.6, 0.4, 0.36] }]),
                    Part::new("legs", legs),
                ]
            }
            ShapeFamily::Bottle => vec![
                Part::new("body", vec![
                    Cylinder { center: [0.0, 0.0], radius: 0.22, z: (-0.55, 0.15) },
                    Disk { center: [0.0, 0.0, -0.55], radius: 0.22 },
                ]),
                Part::new("neck", vec![Frustum { radii: (0.22, 0.07), z: (0.15, 0.55) }]),
            ],
            ShapeFamily::Knife => vec![
                Part::new("blade", vec![Cuboid { min: [0.0, -0.07, -0.01], max: [0.6, 0.07, 0.01] }]),
                Part::new("handle", vec![AxisCylinderX { radius: 0.05, x: (-0.4, 0.0) }]),
            ],
        }
    }

    /// Part → affordance label.
    pub fn default_affordances(self) -> BTreeMap<String, String> {
        let pairs: &[(&str, &str)] = match self {
            ShapeFamily::Mug => &[("body", "contain"), ("handle", "grasp")],
            ShapeFamily::Table => &[("top", "support"), ("legs", "support")],
            ShapeFamily::Bottle => &[("body", "wrap-grasp"), ("neck", "pour")],
            ShapeFamily::Knife => &[("blade", "cut"), ("handle", "grasp")],
        };
        pairs.iter().map(|(p, l)| (p.to_string(), l.to_string())).collect()
    }

    /// Radius enclosing the unscaled shape.
    fn base_radius(self) -> f64 {
        match self {
            ShapeFamily::Mug => 0.9,
            ShapeFamily::Table => 0.9,
            ShapeFamily::Bottle => 0.65,
            ShapeFamily::Knife => 0.65,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    /// Side surface of a z-aligned cylinder.
    Cylinder { center: [f64; 2], radius: f64, z: (f64, f64) },
    /// Horizontal disk.
    Disk { center: [f64; 3], radius: f64 },
    /// Side surface of a z-aligned cone frustum.
    Frustum { radii: (f64, f64), z: (f64, f64) },
    /// Surface of an axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Side surface of an x-aligned cylinder through the origin.
    AxisCylinderX { radius: f64, x: (f64, f64) },
    /// Tube around a circular arc in the xz-plane.
    TorusArc { center: [f64; 3], major: f64, minor: f64, arc: (f64, f64) },
}

impl Primitive {
    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Cylinder { radius, z, .. } => 2.0 * PI * radius * (z.1 - z.0),
            Primitive::Disk { radius, .. } => PI * radius * radius,
            Primitive::Frustum { radii, z } => {
                let slant = ((radii.0 - radii.1).powi(2) + (z.1 - z.0).powi(2)).sqrt();
                PI * (radii.0 + radii.1) * slant
            }
            Primitive::Cuboid { min, max } => {
                let (a, b, c) = (max[0] - min[0], max[1] - min[1], max[2] - min[2]);
                2.0 * (a * b + b * c + a * c)
            }
            Primitive::AxisCylinderX { radius, x } => 2.0 * PI * radius * (x.1 - x.0),
            Primitive::TorusArc { major, minor, arc, .. } => (arc.1 - arc.0) * major * 2.0 * PI * minor,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        use std::f64::consts::TAU;
        match *self {
            Primitive::Cylinder { center, radius, z } => {
                let t = rng.gen_range(0.0..TAU);
                [center[0] + radius * t.cos(), center[1] + radius * t.sin(), rng.gen_range(z.0..z.1)]
            }
            Primitive::Disk { center, radius } => {
                let r = radius * rng.gen::<f64>().sqrt();
                let t = rng.gen_range(0.0..TAU);
                [center[0] + r * t.cos(), center[1] + r * t.sin(), center[2]]
            }
            Primitive::Frustum { radii, z } => {
                // area density grows linearly with radius
                let u: f64 = rng.gen();
                let (r0, r1) = radii;
                let s = if (r1 - r0).abs() < 1e-12 {
                    u
                } else {
                    ((r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0)
                };
                let r = r0 + s * (r1 - r0);
                let t = rng.gen_range(0.0..TAU);
                [r * t.cos(), r * t.sin(), z.0 + s * (z.1 - z.0)]
            }
            Primitive::Cuboid { min, max } => {
                let e = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                let faces = [e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let mut p = [
                    rng.gen_range(min[0]..max[0]),
                    rng.gen_range(min[1]..max[1]),
                    rng.gen_range(min[2]..max[2]),
                ];
                let axis = face / 2;
                p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
                p
            }
            Primitive::AxisCylinderX { radius, x } => {
                let t = rng.gen_range(0.0..TAU);
                [rng.gen_range(x.0..x.1), radius * t.cos(), radius * t.sin()]
            }
            Primitive::TorusArc { center, major, minor, arc } => {
                let a = rng.gen_range(arc.0..arc.1);
                let t = rng.gen_range(0.0..TAU);
                let ring = major + minor * t.cos();
                [center[0] + ring * a.cos(), center[1] + minor * t.sin(), center[2] + ring * a.sin()]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Part {
    name: &'static str,
    primitives: Vec<Primitive>,
}

impl Part {
    fn new(name: &'static str, primitives: Vec<Primitive>) -> Self {
        Part { name, primitives }
    }

    fn area(&self) -> f64 {
        self.primitives.iter().map(Primitive::area).sum()
    }
}

/// A parametric shape family with its label map and pose ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    /// Part name → affordance label.
    pub affordances: BTreeMap<String, String>,
    pub points: usize,
    pub scale_range: (f64, f64),
    /// Maximum absolute rotation about the vertical axis, radians.
    pub max_yaw: f64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, points: usize) -> Self {
        ShapeSpec {
            family,
            affordances: family.default_affordances(),
            points,
            scale_range: (0.9, 1.1),
            max_yaw: std::f64::consts::PI / 12.0,
        }
    }

    /// Upper bound on the distance of any generated point from the origin.
    pub fn bounding_radius(&self) -> f64 {
        self.family.base_radius() * self.scale_range.1
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for part in self.family.parts() {
            if let Some(l) = self.affordances.get(part.name) {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }
}

/// Samples the spec's surface and labels each point by its part. Labels
/// index into `label_set`.
pub fn gen_shape(spec: &ShapeSpec, label_set: &[String], seed: u64) -> Result<PointCloud> {
    let parts = spec.family.parts();
    if spec.points == 0 {
        return Err(Error::Spec("shape needs at least one point".into()));
    }
    let (s0, s1) = spec.scale_range;
    if !(s0 > 0.0 && s1 >= s0) {
        return Err(Error::Spec(format!("invalid scale range {:?}", spec.scale_range)));
    }
    let mut label_of_part = Vec::with_capacity(parts.len());
    for part in &parts {
        let label = spec
            .affordances
            .get(part.name)
            .ok_or_else(|| Error::Spec(format!("{} part `{}` has no affordance", spec.family.name(), part.name)))?;
        let idx = label_set
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Spec(format!("label `{label}` missing from the label set")))?;
        label_of_part.push(idx);
    }

    // largest-remainder split of the point budget by area
    let areas: Vec<f64> = parts.iter().map(Part::area).collect();
    let total: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / total * spec.points as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = spec.points - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Spec(format!("part `{}` received no points", parts[i].name)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if s1 > s0 { rng.gen_range(s0..=s1) } else { s0 };
    let yaw = if spec.max_yaw > 0.0 { rng.gen_range(-spec.max_yaw..=spec.max_yaw) } else { 0.0 };
    let (sin, cos) = yaw.sin_cos();

    let mut coords = Vec::with_capacity(spec.points);
    let mut labels = Vec::with_capacity(spec.points);
    for ((part, &count), &label) in parts.iter().zip(&counts).zip(&label_of_part) {
        let pa: Vec<f64> = part.primitives.iter().map(Primitive::area).collect();
        let pt: f64 = pa.iter().sum();
        for _ in 0..count {
            let mut pick = rng.gen_range(0.0..pt);
            let mut prim = &part.primitives[part.primitives.len() - 1];
            for (p, a) in part.primitives.iter().zip(&pa) {
                if pick < *a {
                    prim = p;
                    break;
                }
                pick -= a;
            }
            let [x, y, z] = prim.sample(&mut rng);
            coords.push([scale * (cos * x - sin * y), scale * (sin * x + cos * y), scale * z]);
            labels.push(label);
        }
    }
    PointCloud::from_points(&coords, Some(labels))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::ndcore::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Points with `(p - centroid) · direction ≥ 0`.
pub fn half_space_crop(cloud: &PointCloud, direction: [f64; 3]) -> Vec<usize> {
    let c = cloud.centroid();
    (0..cloud.len())
        .filter(|&i| {
            let p = cloud.point(i);
            (0..3).map(|a| (p[a] - c[a]) * direction[a]).sum::<f64>() >= 0.0
        })
        .collect()
}

/// Keeps one half-space of the cloud as seen along a seeded random direction.
pub fn partial_view_crop(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    if cloud.len() < 2 {
        return Err(Error::Data("partial view needs at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        let v = random_unit(&mut rng, 3);
        let keep = half_space_crop(cloud, [v[0], v[1], v[2]]);
        if keep.len() >= 8 {
            return Ok(cloud.select(&keep));
        }
    }
    Err(Error::Data(format!(
        "no partial view with at least 8 points after 16 directions ({} points)",
        cloud.len()
    )))
}

/// Resamples to exactly `n` points: identity, subsample without
/// replacement, or pad by sampling with replacement.
pub fn resample_to_n(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    let size = cloud.len();
    if size == n {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if size > n {
        let mut pick = rand::seq::index::sample(&mut rng, size, n).into_vec();
        pick.sort_unstable();
        pick
    } else {
        let mut all: Vec<usize> = (0..size).collect();
        all.extend((0..n - size).map(|_| rng.gen_range(0..size)));
        all
    };
    cloud.select(&idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    FullShape,
    PartialView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudEntry {
    pub points: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_points: usize,
    pub labels: Vec<String>,
    pub protocol: Protocol,
    pub clouds: Vec<CloudEntry>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn labels(&self) -> &[String] {
        &self.manifest.labels
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Builds a dataset and its manifest with the standard file names.
    pub fn new(clouds: Vec<PointCloud>, labels: Vec<String>, protocol: Protocol, seed: u64) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::Data("dataset must contain at least one cloud".into()));
        }
        let n_points = clouds[0].len();
        for (i, c) in clouds.iter().enumerate() {
            if c.len() != n_points {
                return Err(Error::Data(format!("cloud {i} has {} points, expected {n_points}", c.len())));
            }
            c.require_labels()?;
            c.validate_labels(labels.len())?;
        }
        let entries = (0..clouds.len())
            .map(|i| CloudEntry { points: format!("points_{i}.bin"), labels: format!("labels_{i}.bin") })
            .collect();
        Ok(Dataset {
            manifest: DatasetManifest {
                format_version: DATASET_VERSION,
                n_points,
                labels,
                protocol,
                clouds: entries,
                seed,
            },
            clouds,
        })
    }

    /// Point count per label index.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.manifest.labels.len()];
        for c in &self.clouds {
            for &l in c.labels().unwrap_or(&[]) {
                counts[l] += 1;
            }
        }
        counts
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let m = &dataset.manifest;
    if dataset.clouds.is_empty() || m.clouds.is_empty() {
        return Err(Error::Data("refusing to write an empty dataset".into()));
    }
    if m.clouds.len() != dataset.clouds.len() {
        return Err(Error::dim("write_dataset", m.clouds.len(), dataset.clouds.len()));
    }
    for (entry, cloud) in m.clouds.iter().zip(&dataset.clouds) {
        if cloud.len() != m.n_points {
            return Err(Error::Data(format!("{}: {} points, manifest says {}", entry.points, cloud.len(), m.n_points)));
        }
        cloud.validate_labels(m.labels.len())?;
        let mut pts = Vec::with_capacity(12 * cloud.len());
        push_f32_le(&mut pts, cloud.coords().data());
        write_file(&dir.join(&entry.points), &pts)?;
        let mut lab = Vec::with_capacity(2 * cloud.len());
        push_u16_le(&mut lab, cloud.require_labels()?)?;
        write_file(&dir.join(&entry.labels), &lab)?;
    }
    write_file(&dir.join("manifest.json"), &to_json_bytes(m)?)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let raw: serde_json::Value = read_json(&manifest_path)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != DATASET_VERSION as u64 {
        return Err(Error::Version { path: manifest_path, found: version as u32, expected: DATASET_VERSION });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
    if manifest.clouds.is_empty() {
        return Err(Error::corrupt(&manifest_path, "manifest lists no clouds"));
    }
    let n = manifest.n_points;
    let mut clouds = Vec::with_capacity(manifest.clouds.len());
    for entry in &manifest.clouds {
        let pp = dir.join(&entry.points);
        let pts = read_file(&pp)?;
        if pts.len() != 12 * n {
            return Err(Error::corrupt(&pp, format!("expected {} bytes, found {}", 12 * n, pts.len())));
        }
        let lp = dir.join(&entry.labels);
        let lab = read_file(&lp)?;
        if lab.len() != 2 * n {
            return Err(Error::corrupt(&lp, format!("expected {} bytes, found {}", 2 * n, lab.len())));
        }
        let labels = read_u16_le(&lab);
        if let Some(&bad) = labels.iter().find(|&&l| l >= manifest.labels.len()) {
            return Err(Error::Label { index: bad, classes: manifest.labels.len() });
        }
        clouds.push(PointCloud::new(Matrix::new(n, 3, read_f32_le(&pts))?, Some(labels))?);
    }
    Ok(Dataset { manifest, clouds })
}

/// Options for [`gen_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub families: Vec<ShapeFamily>,
    pub num_clouds: usize,
    pub points: usize,
    pub partial_view: bool,
    pub seed: u64,
}

/// Labels used by `families`, in canonical order.
pub fn label_set_for(families: &[ShapeFamily]) -> Vec<String> {
    let used: Vec<String> = families.iter().flat_map(|f| ShapeSpec::new(*f, 1).labels()).collect();
    DEFAULT_LABELS
        .iter()
        .filter(|l| used.iter().any(|u| u == *l))
        .map(|l| l.to_string())
        .collect()
}

/// Generates `num_clouds` labeled clouds, cycling through `families`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.families.is_empty() || spec.num_clouds == 0 || spec.points == 0 {
        return Err(Error::Config("dataset needs families, clouds and points".into()));
    }
    let labels = label_set_for(&spec.families);
    let clouds = (0..spec.num_clouds)
        .map(|i| {
            let seed = mix_seed(spec.seed, i as u64);
            let family = spec.families[i % spec.families.len()];
            let shape = ShapeSpec::new(family, spec.points);
            let mut cloud = gen_shape(&shape, &labels, mix_seed(seed, 0))?;
            if spec.partial_view {
                cloud = partial_view_crop(&cloud, mix_seed(seed, 1))?;
            }
            Ok(resample_to_n(&cloud, spec.points, mix_seed(seed, 2)))
        })
        .collect::<Result<Vec<_>>>()?;
    let protocol = if spec.partial_view { Protocol::PartialView } else { Protocol::FullShape };
    Dataset::new(clouds, labels, protocol, spec.seed)
}

/// Noise scale applied around a synonym group's base vector.
pub const SYNONYM_NOISE: f64 = 0.1;

/// FNV-1a hash of a label, used to seed its embedding independently of the
/// label's position in any bank.
pub fn label_key(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Deterministic unit-norm stand-in embeddings. A label's vector depends
/// only on `(seed, label, its synonym group)`. Members of a group share a
/// base direction seeded by the group's first member and are perturbed by
/// `SYNONYM_NOISE` times a random unit vector.
pub fn gen_textbank(labels: &[String], dim: usize, seed: u64, synonym_groups: &[Vec<String>]) -> Result<TextBank> {
    if dim < 2 {
        return Err(Error::Config(format!("text embedding dim must be at least 2, got {dim}")));
    }
    let mut group_of: BTreeMap<&str, &str> = BTreeMap::new();
    for group in synonym_groups.iter().filter(|g| !g.is_empty()) {
        for l in group {
            if group_of.insert(l.as_str(), group[0].as_str()).is_some() {
                return Err(Error::Config(format!("label `{l}` appears in two synonym groups")));
            }
        }
    }
    let unit = |stream: u64, key: &str| {
        random_unit(&mut ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, stream), label_key(key))), dim)
    };
    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let v = match group_of.get(label.as_str()) {
            Some(head) => {
                let base = unit(1, head);
                let noise = unit(2, label);
                let v: Vec<f64> = base.iter().zip(&noise).map(|(b, e)| b + SYNONYM_NOISE * e).collect();
                let n = crate::ndcore::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            }
            None => unit(0, label),
        };
        rows.push(v);
    }
    TextBank::new(labels.to_vec(), Matrix::from_rows(&rows)?, true)
}

/// Frozen teacher: doubled-width encoder plus projector, seeded.
pub fn gen_teacher(student: &EncoderConfig, head_dim: usize, head: HeadConfig, seed: u64) -> Result<(ParamSet, ModelConfig)> {
    let enc = EncoderConfig::teacher_for(student);
    let mut params = ParamSet::new();
    params.extend_prefixed("encoder.", &init_weights(&enc, mix_seed(seed, 0))?.params)?;
    params.extend_prefixed("projector.", &init_projector(enc.embed_dim, head_dim, mix_seed(seed, 1))?.params)?;
    let config = ModelConfig { encoder: EncoderConfig { role: Role::Teacher, ..enc }, head_dim, head };
    config.check_params(&params)?;
    Ok((params, config))
}

/// Fisher–Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shapes_are_deterministic_and_bounded() {
        for family in ShapeFamily::ALL {
            let spec = ShapeSpec::new(family, 300);
            let a = gen_shape(&spec, &labels(), 5).unwrap();
            assert_eq!(a, gen_shape(&spec, &labels(), 5).unwrap());
            assert_ne!(a, gen_shape(&spec, &labels(), 6).unwrap());
            assert_eq!(a.len(), 300);
            let r = spec.bounding_radius();
            for i in 0..a.len() {
                let p = a.point(i);
                assert!(p.iter().all(|v| v.is_finite()));
                assert!((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= r, "{family:?} {p:?}");
            }
        }
        let mug = gen_shape(&ShapeSpec::new(ShapeFamily::Mug, 200), &labels(), 1).unwrap();
        let mut distinct = mug.labels().unwrap().to_vec();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn shape_spec_errors() {
        let mut spec = ShapeSpec::new(ShapeFamily::Mug, 100);
        spec.affordances.remove("handle");
        assert!(matches!(gen_shape(&spec, &labels(), 0), Err(Error::Spec(_))));
        let tiny = ShapeSpec::new(ShapeFamily::Mug, 1);
        assert!(matches!(gen_shape(&tiny, &labels(), 0), Err(Error::Spec(_))));
        let spec = ShapeSpec::new(ShapeFamily::Knife, 50);
        assert!(gen_shape(&spec, &["grasp".to_string()], 0).is_err());
    }

    #[test]
    fn crop_examples() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = PointCloud::from_points(&pts, Some(vec![0; 20])).unwrap();
        let keep = half_space_crop(&c, [1.0, 0.0, 0.0]);
        assert_eq!(keep, (10..20).collect::<Vec<_>>());

        // points all on a plane through the centroid sit on the boundary
        let flat: Vec<[f64; 3]> = (0..12).map(|i| [i as f64, (i * 7 % 5) as f64, 0.0]).collect();
        let f = PointCloud::from_points(&flat, None).unwrap();
        assert_eq!(half_space_crop(&f, [0.0, 0.0, 1.0]).len(), 12);

        let mug = gen_shape(&ShapeSpec::new(ShapeFamily::Mug, 400), &labels(), 2).unwrap();
        let crop = partial_view_crop(&mug, 9).unwrap();
        let orig: std::collections::BTreeSet<_> = mug.labels().unwrap().iter().collect();
        assert!(crop.labels().unwrap().iter().all(|l| orig.contains(l)));
        assert!(partial_view_crop(&PointCloud::from_points(&[[0.0; 3]], None).unwrap(), 0).is_err());
        let few = PointCloud::from_points(&pts[..6], None).unwrap();
        assert!(partial_view_crop(&few, 0).is_err());
    }

    #[test]
    fn resample_examples() {
        let c = gen_shape(&ShapeSpec::new(ShapeFamily::Bottle, 50), &labels(), 3).unwrap();
        assert_eq!(resample_to_n(&c, 50, 1), c);
        let down = resample_to_n(&c, 20, 1);
        assert_eq!(down, resample_to_n(&c, 20, 1));
        assert_eq!(down.len(), 20);
        let up = resample_to_n(&c, 80, 1);
        assert_eq!(up.len(), 80);
        for i in 0..80 {
            let p = up.point(i);
            assert!((0..50).any(|j| c.point(j) == p));
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            families: vec![ShapeFamily::Mug, ShapeFamily::Knife],
            num_clouds: 3,
            points: 64,
            partial_view: true,
            seed: 4,
        };
        let ds = gen_dataset(&spec).unwrap();
        assert_eq!(ds.labels(), &["grasp", "contain", "cut"]);
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        let files = ["manifest.json", "points_0.bin", "labels_2.bin"];
        let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
        write_dataset(&back, dir.path()).unwrap();
        let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
        assert_eq!(before, after);
        assert_eq!(back.clouds[1].labels(), ds.clouds[1].labels());
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
        assert!(Dataset::new(vec![], labels(), Protocol::FullShape, 0).is_err());

        let spec = DatasetSpec { families: vec![ShapeFamily::Mug], num_clouds: 1, points: 32, partial_view: false, seed: 1 };
        let mut ds = gen_dataset(&spec).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        // manifest claims a single label while labels file uses two
        ds.manifest.labels.truncate(1);
        std::fs::write(dir.path().join("manifest.json"), to_json_bytes(&ds.manifest).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Label { .. })));

        ds.manifest.format_version = 7;
        std::fs::write(dir.path().join("manifest.json"), to_json_bytes(&ds.manifest).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Version { found: 7, .. })));

        ds.manifest.format_version = DATASET_VERSION;
        ds.manifest.labels = vec!["grasp".into(), "contain".into()];
        std::fs::write(dir.path().join("manifest.json"), to_json_bytes(&ds.manifest).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("points_0.bin")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn textbank_generation() {
        let l: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let groups = vec![vec!["a".to_string(), "c".to_string()]];
        let b = gen_textbank(&l, 32, 7, &groups).unwrap();
        assert_eq!(b, gen_textbank(&l, 32, 7, &groups).unwrap());
        let e = b.embeddings();
        assert!(crate::ndcore::cosine(e.row(0), e.row(2)).unwrap() >= 0.9);
        assert!(gen_textbank(&l, 1, 7, &[]).is_err());
        // a label's vector does not depend on its position or on the other labels
        let rev: Vec<String> = l.iter().rev().cloned().collect();
        let r = gen_textbank(&rev, 32, 7, &groups).unwrap();
        assert_eq!(r.embeddings().row(0), e.row(2));
        let solo = gen_textbank(&["b".to_string()], 32, 7, &[]).unwrap();
        assert_eq!(solo.embeddings().row(0), e.row(1));
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(gen_textbank(&dup, 8, 0, &[]).is_err());
    }

    #[test]
    fn teacher_fixture_shapes() {
        let student = EncoderConfig { embed_dim: 8, hidden_widths: vec![4, 6], neighborhood_k: 3, role: Role::Student };
        let (p, cfg) = gen_teacher(&student, 5, HeadConfig::default(), 1).unwrap();
        assert_eq!(cfg.encoder.hidden_widths, vec![8, 12]);
        assert_eq!(p.get("projector.w_q").unwrap().shape(), (8, 5));
        assert!(p.get("tau").is_none());
    }
}
