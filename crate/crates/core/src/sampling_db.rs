//! Polar grouping: bin every training object by (class, bearing bin, heading
//! bin), fuse the densest members of each bin into one canonical dense object,
//! and persist the result.
//!
//! Objects are canonicalized into a unit box (object frame, each axis divided
//! by the box dimension) so that instances of different sizes overlay before
//! their points are pooled.
//!
//! # File layout
//!
//! ```text
//! magic    4 bytes  "PSDB"
//! version  u16 LE   1
//! header   u32 LE length + UTF-8 JSON (see `DbHeader`): tool version,
//!          config + hash, bin count, class list, and the entry directory
//!          (0-based bins, point count, mean source dims, provenance)
//! payload  for each directory entry, in order: count × (x, y, z, intensity)
//!          as little-endian f32
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fingerprint;
use crate::geometry::{self, Box3D, ClassLabel, Point3, PolarIndex};
use crate::par::{self, Exec};
use crate::scene::{ObjectPoints, Scene, SourceId};

pub const DB_MAGIC: &[u8; 4] = b"PSDB";
pub const DB_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DbError {
    #[error("object {0:?} has no points")]
    EmptyObject(SourceId),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported database version {0}")]
    VersionMismatch(u16),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbConfig {
    /// Bins per angle axis.
    pub bins: u32,
    /// Densest objects pooled per bin.
    pub k: usize,
    /// Cap on points per pooled object.
    pub max_points: usize,
    pub seed: u64,
    /// Crop margin (meters) the object sets were extracted with.
    pub margin: f64,
}

impl Default for DbConfig {
    fn default() -> Self {
        Self { bins: 8, k: 10, max_points: 5000, seed: 0, margin: 0.25 }
    }
}

impl DbConfig {
    pub fn validate(&self) -> Result<(), DbError> {
        if self.bins == 0 || self.k == 0 || self.max_points == 0 {
            return Err(DbError::InvalidConfig("bins, k and max_points must be at least 1".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(DbError::InvalidConfig("margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pooled object points in the unit-box object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalObject {
    /// Coordinates are `f32`-representable so the on-disk form is exact.
    pub points: Vec<Point3>,
    /// Mean (l, w, h) of the contributing boxes, for diagnostics.
    pub mean_source_dims: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub object: CanonicalObject,
    /// Contributing objects, in selection order (densest first).
    pub provenance: Vec<SourceId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseObjectDB {
    pub config: DbConfig,
    pub entries: BTreeMap<PolarIndex, DbEntry>,
}

fn f32_exact(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Maps an object's points into its unit box.
pub fn canonicalize(obj: &ObjectPoints) -> Result<CanonicalObject, DbError> {
    if obj.points.is_empty() {
        return Err(DbError::EmptyObject(obj.source.clone()));
    }
    let [l, w, h] = obj.bbox.dims;
    let points = geometry::to_local(&obj.points, &obj.bbox)
        .into_iter()
        .map(|p| Point3::new(f32_exact(p.x / l), f32_exact(p.y / w), f32_exact(p.z / h), f32_exact(p.intensity)))
        .collect();
    Ok(CanonicalObject { points, mean_source_dims: obj.bbox.dims })
}

/// Places unit-box points into `target`: scale per axis, rotate, translate.
pub fn decanonicalize(points: &[Point3], target: &Box3D) -> Vec<Point3> {
    let [l, w, h] = target.dims;
    let scaled: Vec<Point3> = points.iter().map(|p| Point3::new(p.x * l, p.y * w, p.z * h, p.intensity)).collect();
    geometry::to_global(&scaled, target)
}

struct Member<'a> {
    index: PolarIndex,
    obj: &'a ObjectPoints,
}

/// Polar grouping over `scenes` (training split only).
pub fn build_database(scenes: &[Scene], cfg: &DbConfig) -> Result<DenseObjectDB, DbError> {
    build_database_with(scenes, cfg, Exec::default())
}

pub fn build_database_with(scenes: &[Scene], cfg: &DbConfig, exec: Exec) -> Result<DenseObjectDB, DbError> {
    cfg.validate()?;
    let per_scene: Vec<Vec<Member<'_>>> = par::map_range(exec, scenes.len(), |i| {
        scenes[i]
            .objects
            .iter()
            .filter(|o| !o.points.is_empty())
            .filter_map(|o| match geometry::polar_index_of(&o.bbox, cfg.bins) {
                Ok(index) => Some(Member { index, obj: o }),
                Err(_) => {
                    log::warn!("skipping object {:?} centered on the sensor", o.source);
                    None
                }
            })
            .collect()
    });
    let mut groups: BTreeMap<PolarIndex, Vec<&ObjectPoints>> = BTreeMap::new();
    for m in per_scene.into_iter().flatten() {
        groups.entry(m.index).or_default().push(m.obj);
    }
    let groups: Vec<(PolarIndex, Vec<&ObjectPoints>)> = groups.into_iter().collect();
    let entries = par::try_map(exec, &groups, |(index, members)| pool_bin(index, members, cfg).map(|e| (index.clone(), e)))?;
    Ok(DenseObjectDB { config: cfg.clone(), entries: entries.into_iter().collect() })
}

fn pool_bin(index: &PolarIndex, members: &[&ObjectPoints], cfg: &DbConfig) -> Result<DbEntry, DbError> {
    let mut ranked: Vec<&ObjectPoints> = members.to_vec();
    ranked.sort_by(|a, b| b.points.len().cmp(&a.points.len()).then_with(|| a.source.cmp(&b.source)));
    ranked.truncate(cfg.k);

    let mut points = Vec::new();
    let mut dims = [0.0; 3];
    for obj in &ranked {
        points.extend(canonicalize(obj)?.points);
        for (d, s) in dims.iter_mut().zip(obj.bbox.dims) {
            *d += s;
        }
    }
    let n = ranked.len() as f64;
    dims.iter_mut().for_each(|d| *d /= n);

    if points.len() > cfg.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(bin_seed(cfg.seed, index));
        let mut keep = rand::seq::index::sample(&mut rng, points.len(), cfg.max_points).into_vec();
        keep.sort_unstable();
        points = keep.into_iter().map(|i| points[i]).collect();
    }
    Ok(DbEntry {
        object: CanonicalObject { points, mean_source_dims: dims },
        provenance: ranked.iter().map(|o| o.source.clone()).collect(),
    })
}

/// Per-bin RNG seed; independent of the order bins are processed in.
pub fn bin_seed(seed: u64, index: &PolarIndex) -> u64 {
    let label = format!("{}/{}/{}", index.class_label.name(), index.dir_bin, index.rot_bin);
    fingerprint::sub_seed(seed, label.as_bytes())
}

impl DenseObjectDB {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: &PolarIndex) -> Option<&DbEntry> {
        self.entries.get(index)
    }

    pub fn classes(&self) -> Vec<ClassLabel> {
        let mut out: Vec<ClassLabel> = self.entries.keys().map(|k| k.class_label.clone()).collect();
        out.dedup();
        out
    }

    pub fn has_class(&self, class: &ClassLabel) -> bool {
        self.entries.keys().any(|k| &k.class_label == class)
    }

    pub fn save(&self) -> Vec<u8> {
        let header = DbHeader {
            tool_version: fingerprint::TOOL_VERSION.to_string(),
            config_hash: fingerprint::hash_of(&self.config),
            config: self.config.clone(),
            bins: self.config.bins,
            classes: self.classes().iter().map(|c| c.name().to_string()).collect(),
            entries: self
                .entries
                .iter()
                .map(|(k, e)| DirEntry {
                    class: k.class_label.name().to_string(),
                    dir_bin: k.dir_bin,
                    rot_bin: k.rot_bin,
                    num_points: e.object.points.len(),
                    mean_source_dims: e.object.mean_source_dims,
                    provenance: e.provenance.iter().map(|s| (s.frame_id.clone(), s.object_index)).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.entries.values() {
            for p in &e.object.points {
                for v in [p.x, p.y, p.z, p.intensity] {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self, DbError> {
        if bytes.len() < 4 || &bytes[..4] != DB_MAGIC {
            return Err(DbError::BadMagic);
        }
        let corrupt = |m: &str| DbError::CorruptPayload(m.to_string());
        if bytes.len() < 10 {
            return Err(corrupt("truncated header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DB_VERSION {
            return Err(DbError::VersionMismatch(version));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = bytes.get(10..10 + hlen).ok_or_else(|| corrupt("header length exceeds data"))?;
        let header: DbHeader = serde_json::from_slice(body).map_err(|e| DbError::CorruptPayload(e.to_string()))?;
        header.config.validate()?;
        let payload = &bytes[10 + hlen..];
        let declared: usize = header.entries.iter().map(|e| e.num_points * 16).sum();
        if declared != payload.len() {
            return Err(DbError::CorruptPayload(format!("declared {declared} payload bytes, found {}", payload.len())));
        }
        let mut floats = payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())));
        let mut entries = BTreeMap::new();
        for d in header.entries {
            if d.dir_bin >= header.bins || d.rot_bin >= header.bins || d.num_points == 0 {
                return Err(corrupt("directory entry out of range"));
            }
            let points = (0..d.num_points)
                .map(|_| {
                    let mut next = || floats.next().expect("length checked above");
                    Point3::new(next(), next(), next(), next())
                })
                .collect();
            let key = PolarIndex { class_label: ClassLabel::parse(&d.class), dir_bin: d.dir_bin, rot_bin: d.rot_bin };
            let entry = DbEntry {
                object: CanonicalObject { points, mean_source_dims: d.mean_source_dims },
                provenance: d.provenance.into_iter().map(|(frame_id, object_index)| SourceId { frame_id, object_index }).collect(),
            };
            if entries.insert(key, entry).is_some() {
                return Err(corrupt("duplicate directory entry"));
            }
        }
        Ok(Self { config: header.config, entries })
    }
}

#[derive(Serialize, Deserialize)]
struct DbHeader {
    tool_version: String,
    config_hash: String,
    config: DbConfig,
    bins: u32,
    classes: Vec<String>,
    entries: Vec<DirEntry>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    class: String,
    dir_bin: u32,
    rot_bin: u32,
    num_points: usize,
    mean_source_dims: [f64; 3],
    provenance: Vec<(String, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn obj(frame: &str, idx: usize, center: [f64; 3], dims: [f64; 3], yaw: f64, pts: Vec<Point3>) -> ObjectPoints {
        ObjectPoints {
            bbox: Box3D::new(center, dims, yaw, ClassLabel::Car).unwrap(),
            points: pts,
            source: SourceId { frame_id: frame.into(), object_index: idx },
        }
    }

    fn scene_of(frame: &str, objects: Vec<ObjectPoints>) -> Scene {
        Scene { frame_id: frame.into(), objects, added: vec![], background: vec![] }
    }

    /// `n` points spread inside a box at `center` with yaw 0.
    fn cloud(center: [f64; 3], n: usize) -> Vec<Point3> {
        (0..n).map(|i| Point3::new(center[0] + 0.1 * (i % 7) as f64 - 0.3, center[1] + 0.05 * i as f64 % 0.5, center[2], 0.2)).collect()
    }

    #[test]
    fn canonicalize_examples() {
        let c = [10.0, 2.0, -1.0];
        let o = obj("a", 0, c, [4.0, 2.0, 2.0], 0.0, vec![Point3::new(10.0, 2.0, -1.0, 0.4), Point3::new(12.0, 2.0, -1.0, 0.4)]);
        let k = canonicalize(&o).unwrap();
        assert_eq!(k.points[0], Point3::new(0.0, 0.0, 0.0, f32_exact(0.4)));
        assert_eq!((k.points[1].x, k.points[1].y, k.points[1].z), (0.5, 0.0, 0.0));
        let empty = obj("a", 3, c, [4.0, 2.0, 2.0], 0.0, vec![]);
        assert!(matches!(canonicalize(&empty), Err(DbError::EmptyObject(_))));
    }

    #[test]
    fn canonical_round_trip() {
        let pts = vec![Point3::new(20.3, -4.1, -0.7, 0.1), Point3::new(19.2, -5.0, -1.4, 0.9)];
        let o = obj("a", 0, [20.0, -4.5, -1.0], [3.9, 1.7, 1.5], 0.8, pts.clone());
        let back = decanonicalize(&canonicalize(&o).unwrap().points, &o.bbox);
        for (p, q) in pts.iter().zip(&back) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-5);
            assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-5);
            assert_abs_diff_eq!(p.z, q.z, epsilon = 1e-5);
        }
    }

    #[test]
    fn three_members_pool_to_union() {
        let c = [15.0, 1.0, -1.0];
        let objects: Vec<ObjectPoints> = [5, 7, 9].iter().enumerate().map(|(i, &n)| obj("f", i, c, [4.0, 2.0, 1.5], 0.1, cloud(c, n))).collect();
        let db = build_database(&[scene_of("f", objects.clone())], &DbConfig::default()).unwrap();
        assert_eq!(db.len(), 1);
        let entry = db.entries.values().next().unwrap();
        assert_eq!(entry.object.points.len(), 21);
        // union oracle: multiset of all canonical points, order-insensitive
        let mut expected: Vec<[u64; 4]> = objects
            .iter()
            .flat_map(|o| canonicalize(o).unwrap().points)
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), p.intensity.to_bits()])
            .collect();
        let mut got: Vec<[u64; 4]> =
            entry.object.points.iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), p.intensity.to_bits()]).collect();
        expected.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, expected);
        let prov: Vec<usize> = entry.provenance.iter().map(|s| s.object_index).collect();
        assert_eq!(prov, vec![2, 1, 0]);
    }

    #[test]
    fn single_object_is_its_canonical_form() {
        let c = [8.0, -3.0, -1.0];
        let o = obj("f", 0, c, [4.0, 2.0, 1.5], 2.0, cloud(c, 12));
        let db = build_database(&[scene_of("f", vec![o.clone()])], &DbConfig::default()).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.entries.values().next().unwrap().object.points, canonicalize(&o).unwrap().points);
        assert_eq!((db.config.k, db.config.max_points), (10, 5000));
    }

    #[test]
    fn densest_k_with_source_tiebreak_and_cap() {
        let c = [12.0, 0.5, -1.0];
        let objects: Vec<ObjectPoints> = (0..6).map(|i| obj("f", i, c, [4.0, 2.0, 1.5], 0.0, cloud(c, 10 + (i % 3)))).collect();
        let cfg = DbConfig { k: 3, max_points: 25, ..DbConfig::default() };
        let db = build_database(&[scene_of("f", objects)], &cfg).unwrap();
        let e = db.entries.values().next().unwrap();
        // sizes 10,11,12,10,11,12 -> 12s (idx 2, 5) then first 11 (idx 1)
        let prov: Vec<usize> = e.provenance.iter().map(|s| s.object_index).collect();
        assert_eq!(prov, vec![2, 5, 1]);
        assert_eq!(e.object.points.len(), 25);
    }

    #[test]
    fn empty_input_and_errors() {
        let db = build_database(&[], &DbConfig::default()).unwrap();
        assert!(db.is_empty());
        assert_eq!(DenseObjectDB::load(&db.save()).unwrap(), db);
        assert_eq!(DenseObjectDB::load(b"NOPE\x01\x00"), Err(DbError::BadMagic));
        let mut bytes = db.save();
        bytes[4] = 7;
        assert_eq!(DenseObjectDB::load(&bytes), Err(DbError::VersionMismatch(7)));
        assert!(build_database(&[], &DbConfig { k: 0, ..DbConfig::default() }).is_err());
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let c = [12.0, 0.5, -1.0];
        let db = build_database(&[scene_of("f", vec![obj("f", 0, c, [4.0, 2.0, 1.5], 0.0, cloud(c, 5))])], &DbConfig::default()).unwrap();
        let bytes = db.save();
        assert!(matches!(DenseObjectDB::load(&bytes[..bytes.len() - 4]), Err(DbError::CorruptPayload(_))));
        assert_eq!(DenseObjectDB::load(&bytes).unwrap(), db);
    }

    #[test]
    fn scene_order_does_not_change_selection() {
        let c = [12.0, 0.5, -1.0];
        let s1 = scene_of("a", vec![obj("a", 0, c, [4.0, 2.0, 1.5], 0.0, cloud(c, 8))]);
        let s2 = scene_of("b", vec![obj("b", 0, c, [4.0, 2.0, 1.5], 0.0, cloud(c, 8))]);
        let cfg = DbConfig { k: 1, ..DbConfig::default() };
        let d1 = build_database(&[s1.clone(), s2.clone()], &cfg).unwrap();
        let d2 = build_database(&[s2, s1], &cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.entries.values().next().unwrap().provenance[0].frame_id, "a");
    }
}
