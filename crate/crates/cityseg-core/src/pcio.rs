//! Point-cloud data model, CSPC file I/O, attribute normalization, and the
//! synthetic multi-domain scene generator.
//!
//! CSPC layout (all little-endian): magic `CSPC`, u32 version = 1, u64 N,
//! u32 F, u8 has_labels, 3 reserved bytes — a 24-byte header — followed by
//! N×3 f32 positions, N×F f32 features, and N u16 labels when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;

const CSPC_MAGIC: &[u8; 4] = b"CSPC";
const CSPC_VERSION: u32 = 1;

/// Columnar point cloud. Immutable after construction; cheap to share.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f32; 3]>,
    /// Row-major N×F feature block.
    features: Vec<f32>,
    /// Channel names for the F feature columns (`r`,`g`,`b` after
    /// normalization). Not persisted in CSPC; the loader assigns the
    /// canonical names for the stored width.
    channels: Vec<String>,
    labels: Option<Vec<u16>>,
    pub domain_id: u16,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f32; 3]>,
        features: Vec<f32>,
        channels: Vec<String>,
        labels: Option<Vec<u16>>,
        domain_id: u16,
    ) -> Result<Self> {
        let n = positions.len();
        let f = channels.len();
        if features.len() != n * f {
            return Err(Error::Shape(format!(
                "features length {} != N·F = {}·{}",
                features.len(),
                n,
                f
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("labels length {} != N = {n}", l.len())));
            }
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite position at point {i}")));
            }
        }
        Ok(PointCloud {
            positions,
            features,
            channels,
            labels,
            domain_id,
        })
    }

    pub fn empty(channels: Vec<String>) -> Self {
        PointCloud {
            positions: Vec::new(),
            features: Vec::new(),
            channels,
            labels: None,
            domain_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.channels.len()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        let f = self.channels.len();
        &self.features[i * f..(i + 1) * f]
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Select a subset of points by index, preserving order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let f = self.channels.len();
        let mut positions = Vec::with_capacity(indices.len());
        let mut features = Vec::with_capacity(indices.len() * f);
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            positions.push(self.positions[i]);
            features.extend_from_slice(self.feature_row(i));
            if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                out.push(src[i]);
            }
        }
        PointCloud {
            positions,
            features,
            channels: self.channels.clone(),
            labels,
            domain_id: self.domain_id,
        }
    }

    /// Centroid of the positions (f64 accumulation, ascending index order).
    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.positions {
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        if !self.positions.is_empty() {
            let inv = 1.0 / self.positions.len() as f64;
            for v in &mut c {
                *v *= inv;
            }
        }
        c
    }
}

/// Canonical channel names for a CSPC feature block of width `f`.
fn default_channel_names(f: usize) -> Vec<String> {
    match f {
        3 => vec!["r".into(), "g".into(), "b".into()],
        _ => (0..f).map(|i| format!("c{i}")).collect(),
    }
}

/// Ordered feature-channel schema every cloud is normalized to.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    channels: Vec<String>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema {
            channels: default_channel_names(3),
        }
    }
}

impl FeatureSchema {
    pub fn new(channels: Vec<String>) -> Self {
        FeatureSchema { channels }
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Normalize a cloud to `schema`: channels absent from the input become
/// all-zero columns, present channels are copied unchanged. A cloud channel
/// outside the schema is a schema error.
pub fn fill_missing_attributes(cloud: &PointCloud, schema: &FeatureSchema) -> Result<PointCloud> {
    for ch in &cloud.channels {
        if !schema.channels.contains(ch) {
            return Err(Error::Schema(format!(
                "input channel {ch:?} not in schema {:?}",
                schema.channels
            )));
        }
    }
    let n = cloud.len();
    let f_out = schema.len();
    let mut features = vec![0.0f32; n * f_out];
    for (j_out, ch) in schema.channels.iter().enumerate() {
        if let Some(j_in) = cloud.channels.iter().position(|c| c == ch) {
            let f_in = cloud.channels.len();
            for i in 0..n {
                features[i * f_out + j_out] = cloud.features[i * f_in + j_in];
            }
        }
    }
    Ok(PointCloud {
        positions: cloud.positions.clone(),
        features,
        channels: schema.channels.clone(),
        labels: cloud.labels.clone(),
        domain_id: cloud.domain_id,
    })
}

/// Write `cloud` in CSPC format; deterministic byte layout.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, 0, e))?;
    let mut w = BufWriter::new(file);
    let mut offset: u64 = 0;
    let put = |w: &mut BufWriter<File>, bytes: &[u8], offset: &mut u64| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, *offset, e))?;
        *offset += bytes.len() as u64;
        Ok(())
    };
    put(&mut w, CSPC_MAGIC, &mut offset)?;
    put(&mut w, &CSPC_VERSION.to_le_bytes(), &mut offset)?;
    put(&mut w, &(cloud.len() as u64).to_le_bytes(), &mut offset)?;
    put(&mut w, &(cloud.feature_count() as u32).to_le_bytes(), &mut offset)?;
    put(&mut w, &[cloud.labels.is_some() as u8, 0, 0, 0], &mut offset)?;
    for p in &cloud.positions {
        for v in p {
            put(&mut w, &v.to_le_bytes(), &mut offset)?;
        }
    }
    for v in &cloud.features {
        put(&mut w, &v.to_le_bytes(), &mut offset)?;
    }
    if let Some(labels) = &cloud.labels {
        for l in labels {
            put(&mut w, &l.to_le_bytes(), &mut offset)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, offset, e))
}

/// Read a CSPC file written by [`save_cloud`].
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, 0, e))?;
    let mut r = BufReader::new(file);
    let mut offset: u64 = 0;
    let take = |r: &mut BufReader<File>, buf: &mut [u8], offset: &mut u64| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::io(path, *offset, e))?;
        *offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut r, &mut magic, &mut offset)?;
    if &magic != CSPC_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    take(&mut r, &mut b4, &mut offset)?;
    let version = u32::from_le_bytes(b4);
    if version != CSPC_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    take(&mut r, &mut b8, &mut offset)?;
    let n = u64::from_le_bytes(b8) as usize;
    take(&mut r, &mut b4, &mut offset)?;
    let f = u32::from_le_bytes(b4) as usize;
    let mut flags = [0u8; 4];
    take(&mut r, &mut flags, &mut offset)?;
    let has_labels = match flags[0] {
        0 => false,
        1 => true,
        other => return Err(Error::format(path, format!("bad has_labels byte {other}"))),
    };

    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0f32; 3];
        for v in &mut p {
            take(&mut r, &mut b4, &mut offset)?;
            *v = f32::from_le_bytes(b4);
        }
        positions.push(p);
    }
    let mut features = Vec::with_capacity(n * f);
    for _ in 0..n * f {
        take(&mut r, &mut b4, &mut offset)?;
        features.push(f32::from_le_bytes(b4));
    }
    let labels = if has_labels {
        let mut out = Vec::with_capacity(n);
        let mut b2 = [0u8; 2];
        for _ in 0..n {
            take(&mut r, &mut b2, &mut offset)?;
            out.push(u16::from_le_bytes(b2));
        }
        Some(out)
    } else {
        None
    };
    PointCloud::new(positions, features, default_channel_names(f), labels, 0)
}

/// Geometric primitive a layout entry scatters points over.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Flat sheet over the whole extent at z ≈ 0 (ground).
    GroundPlane,
    /// Axis-aligned box standing on the ground; points on walls and roof.
    Box3 { size: [f32; 3] },
    /// Ellipsoid canopy resting on the ground (vegetation).
    Ellipsoid { radii: [f32; 3] },
    /// Flat disk at water level; with `marker_fraction > 0` that share of
    /// the points forms a small distinct-colored post at the disk center.
    FlatPatch {
        radius: f32,
        marker_fraction: f32,
        marker_color: [f32; 3],
    },
}

impl Primitive {
    fn footprint_area(&self, extent: [f32; 3]) -> f64 {
        match self {
            Primitive::GroundPlane => extent[0] as f64 * extent[1] as f64,
            Primitive::Box3 { size } => size[0] as f64 * size[1] as f64,
            Primitive::Ellipsoid { radii } => {
                std::f64::consts::PI * radii[0] as f64 * radii[1] as f64
            }
            Primitive::FlatPatch { radius, .. } => {
                std::f64::consts::PI * (*radius as f64) * (*radius as f64)
            }
        }
    }

    fn placement_radius(&self) -> f32 {
        match self {
            Primitive::GroundPlane => 0.0,
            Primitive::Box3 { size } => 0.5 * size[0].hypot(size[1]),
            Primitive::Ellipsoid { radii } => radii[0].max(radii[1]),
            Primitive::FlatPatch { radius, .. } => *radius,
        }
    }
}

/// One row of a scene layout: `count` instances of `primitive`, every
/// generated point labeled `subclass`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub base: u16,
    pub subclass: u16,
    pub primitive: Primitive,
    pub count: u32,
    /// Points per instance; `None` derives `round(density × footprint)`.
    pub points_per_instance: Option<u32>,
    pub color: [f32; 3],
}

/// Deterministic recipe for one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub extent: [f32; 3],
    /// Points per square meter for entries without an explicit count.
    pub density: f32,
    pub class_layout: Vec<LayoutEntry>,
    pub seed: u64,
    /// Per-channel color noise (uniform ±), clamped to [0,1].
    pub color_noise: f32,
    pub domain_id: u16,
}

impl SceneSpec {
    fn validate(&self, hierarchy: &LabelHierarchy) -> Result<()> {
        if !(self.density > 0.0) {
            return Err(Error::Parameter(format!("density {} must be > 0", self.density)));
        }
        if !self.extent.iter().all(|v| *v > 0.0) {
            return Err(Error::Parameter(format!("extent {:?} must be positive", self.extent)));
        }
        for entry in &self.class_layout {
            if hierarchy.node(entry.subclass).is_none() {
                return Err(Error::Validation(format!(
                    "layout subclass label {} not in hierarchy",
                    entry.subclass
                )));
            }
            let base = hierarchy.merge_to_base(entry.subclass)?;
            if base != entry.base {
                return Err(Error::Validation(format!(
                    "layout base {} does not match hierarchy base {} for subclass {}",
                    entry.base, base, entry.subclass
                )));
            }
        }
        Ok(())
    }
}

/// Generate one labeled scene. Pure function of the spec: the same spec
/// (seed included) always yields the identical cloud.
pub fn generate_scene(spec: &SceneSpec, hierarchy: &LabelHierarchy) -> Result<PointCloud> {
    spec.validate(hierarchy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = spec.extent;
    let mut positions = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    let mut labels = Vec::new();
    // Instance placements, kept apart so classes stay geometrically separable.
    let mut placed: Vec<([f32; 2], f32)> = Vec::new();

    for entry in &spec.class_layout {
        let per_instance = entry.points_per_instance.unwrap_or_else(|| {
            (spec.density as f64 * entry.primitive.footprint_area(ext)).round() as u32
        });
        for _ in 0..entry.count {
            let center = place_instance(&mut rng, &entry.primitive, ext, &mut placed);
            for _ in 0..per_instance {
                let (pos, color) = sample_point(&mut rng, &entry.primitive, center, ext, entry.color);
                positions.push(pos);
                colors.push(color);
                labels.push(entry.subclass);
            }
        }
    }

    let mut features = Vec::with_capacity(positions.len() * 3);
    for c in colors {
        for v in c {
            let noisy = v + rng.gen_range(-spec.color_noise..=spec.color_noise);
            features.push(noisy.clamp(0.0, 1.0));
        }
    }
    PointCloud::new(
        positions,
        features,
        default_channel_names(3),
        Some(labels),
        spec.domain_id,
    )
}

fn place_instance(
    rng: &mut ChaCha8Rng,
    primitive: &Primitive,
    ext: [f32; 3],
    placed: &mut Vec<([f32; 2], f32)>,
) -> [f32; 2] {
    if matches!(primitive, Primitive::GroundPlane) {
        return [ext[0] * 0.5, ext[1] * 0.5];
    }
    let r = primitive.placement_radius();
    let lo_x = r.min(ext[0] * 0.5);
    let lo_y = r.min(ext[1] * 0.5);
    let mut best = [ext[0] * 0.5, ext[1] * 0.5];
    let mut best_sep = f32::NEG_INFINITY;
    // A handful of rejection tries keeps instances apart without ever failing.
    for _ in 0..24 {
        let cand = [
            rng.gen_range(lo_x..=(ext[0] - lo_x).max(lo_x)),
            rng.gen_range(lo_y..=(ext[1] - lo_y).max(lo_y)),
        ];
        let sep = placed
            .iter()
            .map(|(p, pr)| (p[0] - cand[0]).hypot(p[1] - cand[1]) - pr - r)
            .fold(f32::INFINITY, f32::min);
        if sep > best_sep {
            best_sep = sep;
            best = cand;
        }
        if sep > 0.5 {
            break;
        }
    }
    placed.push((best, r));
    best
}

fn sample_point(
    rng: &mut ChaCha8Rng,
    primitive: &Primitive,
    center: [f32; 2],
    ext: [f32; 3],
    color: [f32; 3],
) -> ([f32; 3], [f32; 3]) {
    match primitive {
        Primitive::GroundPlane => {
            let x = rng.gen_range(0.0..ext[0]);
            let y = rng.gen_range(0.0..ext[1]);
            let z = rng.gen_range(0.0..0.06);
            ([x, y, z], color)
        }
        Primitive::Box3 { size } => {
            let [sx, sy, sz] = *size;
            // walls + roof, proportional to area
            let wall_x = sy * sz * 2.0;
            let wall_y = sx * sz * 2.0;
            let roof = sx * sy;
            let pick = rng.gen_range(0.0..(wall_x + wall_y + roof));
            let (dx, dy, dz) = if pick < wall_x {
                let side = if rng.gen_bool(0.5) { -0.5 } else { 0.5 };
                (side * sx, rng.gen_range(-0.5..0.5) * sy, rng.gen_range(0.0..1.0) * sz)
            } else if pick < wall_x + wall_y {
                let side = if rng.gen_bool(0.5) { -0.5 } else { 0.5 };
                (rng.gen_range(-0.5..0.5) * sx, side * sy, rng.gen_range(0.0..1.0) * sz)
            } else {
                (rng.gen_range(-0.5..0.5) * sx, rng.gen_range(-0.5..0.5) * sy, sz)
            };
            ([center[0] + dx, center[1] + dy, dz], color)
        }
        Primitive::Ellipsoid { radii } => {
            // uniform in the unit ball, scaled; canopy rests on the ground
            let [rx, ry, rz] = *radii;
            loop {
                let u = [
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                ];
                if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 {
                    return (
                        [center[0] + u[0] * rx, center[1] + u[1] * ry, rz + u[2] * rz],
                        color,
                    );
                }
            }
        }
        Primitive::FlatPatch {
            radius,
            marker_fraction,
            marker_color,
        } => {
            if *marker_fraction > 0.0 && rng.gen_range(0.0..1.0) < *marker_fraction {
                // small post at the patch center
                let dx = rng.gen_range(-0.15..0.15);
                let dy = rng.gen_range(-0.15..0.15);
                let z = rng.gen_range(0.0..0.5);
                ([center[0] + dx, center[1] + dy, z], *marker_color)
            } else {
                let rr = radius * rng.gen_range(0.0f32..1.0).sqrt();
                let th = rng.gen_range(0.0..std::f32::consts::TAU);
                let z = rng.gen_range(0.02..0.05);
                ([center[0] + rr * th.cos(), center[1] + rr * th.sin(), z], color)
            }
        }
    }
}

/// Train/eval role of a manifest domain's files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// One domain in a dataset manifest: a directory of CSPC scenes plus the
/// annotation granularity (hierarchy levels) this domain labels at.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub dir: PathBuf,
    pub domain_id: u16,
    pub annotated_levels: Vec<u8>,
}

/// Parsed dataset manifest; domain ids are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parse the line format `dir<TAB>domain_id<TAB>levels-csv`; `#` starts
    /// a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, 0, e))?;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 3 tab-separated columns", lineno + 1),
                ));
            }
            let domain_id: u16 = cols[1]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad domain id", lineno + 1)))?;
            let annotated_levels = cols[2]
                .split(',')
                .map(|s| s.trim().parse::<u8>())
                .collect::<std::result::Result<Vec<u8>, _>>()
                .map_err(|_| Error::format(path, format!("line {}: bad level list", lineno + 1)))?;
            entries.push(ManifestEntry {
                dir: PathBuf::from(cols[0]),
                domain_id,
                annotated_levels,
            });
        }
        let manifest = DatasetManifest { entries };
        manifest.validate(path)?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# dir\tdomain_id\tannotated_levels\n");
        for e in &self.entries {
            let levels: Vec<String> = e.annotated_levels.iter().map(u8::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.dir.display(),
                e.domain_id,
                levels.join(",")
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, 0, e))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.domain_id) {
                return Err(Error::format(
                    path,
                    format!("domain id {} appears twice", e.domain_id),
                ));
            }
        }
        Ok(())
    }

    /// Load every domain's clouds, split by `train_`/`eval_` filename prefix,
    /// tagging each cloud with its domain id. Files are read in sorted order.
    pub fn load_domains(&self, base: &Path) -> Result<Vec<DomainData>> {
        let mut out = Vec::new();
        for entry in &self.entries {
            let dir = if entry.dir.is_absolute() {
                entry.dir.clone()
            } else {
                base.join(&entry.dir)
            };
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, 0, e))?
                .filter_map(|r| r.ok().map(|d| d.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "cspc"))
                .collect();
            files.sort();
            let mut train = Vec::new();
            let mut eval = Vec::new();
            for file in files {
                let mut cloud = load_cloud(&file)?;
                cloud.domain_id = entry.domain_id;
                let name = file.file_name().unwrap_or_default().to_string_lossy().to_string();
                if name.starts_with("eval_") {
                    eval.push(cloud);
                } else {
                    train.push(cloud);
                }
            }
            out.push(DomainData {
                domain_id: entry.domain_id,
                annotated_levels: entry.annotated_levels.clone(),
                train,
                eval,
            });
        }
        Ok(out)
    }
}

/// All clouds of one domain, loaded.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub domain_id: u16,
    pub annotated_levels: Vec<u8>,
    pub train: Vec<PointCloud>,
    pub eval: Vec<PointCloud>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::tests_support::tiny_hierarchy;

    fn rgb() -> Vec<String> {
        vec!["r".into(), "g".into(), "b".into()]
    }

    fn sample_cloud(n: usize, seed: u64, with_labels: bool) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.0..5.0)])
            .collect();
        let features = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = with_labels.then(|| (0..n).map(|_| rng.gen_range(0..7u16)).collect());
        PointCloud::new(positions, features, rgb(), labels, 3).unwrap()
    }

    #[test]
    fn empty_cloud_saves_24_byte_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cspc");
        save_cloud(&PointCloud::empty(rgb()), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
        let back = load_cloud(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.feature_count(), 3);
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..20u64 {
            let n = (seed as usize * 7) % 50;
            let cloud = sample_cloud(n, seed, seed % 2 == 0);
            let p1 = dir.path().join(format!("a{seed}.cspc"));
            let p2 = dir.path().join(format!("b{seed}.cspc"));
            save_cloud(&cloud, &p1).unwrap();
            let loaded = load_cloud(&p1).unwrap();
            save_cloud(&loaded, &p2).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
            assert_eq!(loaded.positions(), cloud.positions());
            assert_eq!(loaded.features(), cloud.features());
            assert_eq!(loaded.labels(), cloud.labels());
        }
    }

    #[test]
    fn two_saves_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_cloud(17, 5, true);
        let p1 = dir.path().join("one.cspc");
        let p2 = dir.path().join("two.cspc");
        save_cloud(&cloud, &p1).unwrap();
        save_cloud(&cloud, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_fixture_written_by_reference_serializer() {
        // Hand-assembled reference bytes: N=3, F=3, labels present.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.cspc");
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"CSPC");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        let positions = [[0.0f32, 1.0, 2.0], [3.0, 4.0, 5.0], [-1.0, -2.0, -3.0]];
        for p in positions {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let feats: Vec<f32> = (0..9).map(|i| i as f32 / 10.0).collect();
        for v in &feats {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for l in [7u16, 8, 9] {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();

        let cloud = load_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.feature_count(), 3);
        assert_eq!(cloud.positions(), &positions);
        assert_eq!(cloud.features(), feats.as_slice());
        assert_eq!(cloud.labels(), Some([7u16, 8, 9].as_slice()));
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cspc");
        std::fs::write(&path, b"XSPC\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_cloud(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cspc");
        let cloud = sample_cloud(5, 1, true);
        save_cloud(&cloud, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_cloud(&path) {
            Err(Error::Io { offset, .. }) => assert!(offset >= 24),
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn fill_missing_zeroes_absent_channels() {
        let schema = FeatureSchema::default();
        // LiDAR-style cloud: no color at all
        let lidar = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
            vec![],
            vec![],
            None,
            0,
        )
        .unwrap();
        let filled = fill_missing_attributes(&lidar, &schema).unwrap();
        assert_eq!(filled.feature_count(), 3);
        assert!(filled.features().iter().all(|&v| v == 0.0));

        // r present, g/b missing
        let partial = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
            vec![0.25, 0.75],
            vec!["r".into()],
            None,
            0,
        )
        .unwrap();
        let filled = fill_missing_attributes(&partial, &schema).unwrap();
        assert_eq!(filled.feature_row(0), &[0.25, 0.0, 0.0]);
        assert_eq!(filled.feature_row(1), &[0.75, 0.0, 0.0]);
    }

    #[test]
    fn fill_missing_is_identity_and_idempotent_on_matching_cloud() {
        let schema = FeatureSchema::default();
        let cloud = sample_cloud(9, 2, true);
        let once = fill_missing_attributes(&cloud, &schema).unwrap();
        assert_eq!(once, cloud);
        let twice = fill_missing_attributes(&once, &schema).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn fill_missing_rejects_unknown_channel() {
        let schema = FeatureSchema::default();
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 0.0]],
            vec![1.0],
            vec!["intensity".into()],
            None,
            0,
        )
        .unwrap();
        assert!(matches!(
            fill_missing_attributes(&cloud, &schema),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn ground_plane_count_is_density_times_area() {
        let h = tiny_hierarchy();
        let spec = SceneSpec {
            extent: [10.0, 10.0, 5.0],
            density: 1.0,
            class_layout: vec![LayoutEntry {
                base: 1,
                subclass: 1,
                primitive: Primitive::GroundPlane,
                count: 1,
                points_per_instance: None,
                color: [0.5, 0.5, 0.5],
            }],
            seed: 42,
            color_noise: 0.0,
            domain_id: 0,
        };
        let cloud = generate_scene(&spec, &h).unwrap();
        assert_eq!(cloud.len(), 100);
        assert!(cloud.labels().unwrap().iter().all(|&l| l == 1));
    }

    #[test]
    fn same_seed_same_scene() {
        let h = tiny_hierarchy();
        let spec = SceneSpec {
            extent: [8.0, 8.0, 6.0],
            density: 2.0,
            class_layout: vec![
                LayoutEntry {
                    base: 1,
                    subclass: 1,
                    primitive: Primitive::GroundPlane,
                    count: 1,
                    points_per_instance: None,
                    color: [0.4, 0.3, 0.2],
                },
                LayoutEntry {
                    base: 2,
                    subclass: 5,
                    primitive: Primitive::Box3 { size: [2.0, 2.0, 4.0] },
                    count: 2,
                    points_per_instance: Some(40),
                    color: [0.8, 0.2, 0.2],
                },
            ],
            seed: 7,
            color_noise: 0.02,
            domain_id: 1,
        };
        let a = generate_scene(&spec, &h).unwrap();
        let b = generate_scene(&spec, &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn explicit_instance_counts_are_exact() {
        let h = tiny_hierarchy();
        let spec = SceneSpec {
            extent: [20.0, 20.0, 10.0],
            density: 1.0,
            class_layout: vec![LayoutEntry {
                base: 2,
                subclass: 5,
                primitive: Primitive::Box3 { size: [3.0, 3.0, 5.0] },
                count: 2,
                points_per_instance: Some(50),
                color: [0.7, 0.3, 0.3],
            }],
            seed: 1,
            color_noise: 0.0,
            domain_id: 0,
        };
        let cloud = generate_scene(&spec, &h).unwrap();
        assert_eq!(cloud.len(), 100);
        assert!(cloud.labels().unwrap().iter().all(|&l| l == 5));
    }

    #[test]
    fn unknown_layout_label_is_hierarchy_error() {
        let h = tiny_hierarchy();
        let spec = SceneSpec {
            extent: [10.0, 10.0, 5.0],
            density: 1.0,
            class_layout: vec![LayoutEntry {
                base: 1,
                subclass: 999,
                primitive: Primitive::GroundPlane,
                count: 1,
                points_per_instance: None,
                color: [0.5; 3],
            }],
            seed: 0,
            color_noise: 0.0,
            domain_id: 0,
        };
        assert!(matches!(generate_scene(&spec, &h), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_roundtrip_and_duplicate_domain_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let m = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    dir: PathBuf::from("domain0"),
                    domain_id: 0,
                    annotated_levels: vec![2],
                },
                ManifestEntry {
                    dir: PathBuf::from("domain1"),
                    domain_id: 1,
                    annotated_levels: vec![1, 2],
                },
            ],
        };
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);

        std::fs::write(&path, "a\t0\t1\nb\t0\t2\n").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Format { .. })));
    }
}
