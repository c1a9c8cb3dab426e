//! Polar pasting: attach the matching dense object to every labeled object.

use crate::geometry::{self, ClassLabel, PolarIndex};
use crate::par::{self, Exec};
use crate::sampling_db::{decanonicalize, DbEntry, DenseObjectDB};
use crate::scene::{AddedPoints, ObjectPoints, Scene};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PasteError {
    #[error("database has no entries for class {0}")]
    NoDonor(ClassLabel),
}

/// Intensity given to pasted points: the mean of the raw object's points, or 0.5.
pub fn added_intensity_policy(raw: &ObjectPoints) -> f64 {
    if raw.points.is_empty() {
        return 0.5;
    }
    raw.points.iter().map(|p| p.intensity).sum::<f64>() / raw.points.len() as f64
}

/// Signed wrapped offset from `from` to `to` on a ring of `n` bins, in
/// `[-n/2, n/2]`; the half-way bin on an even ring maps to `-n/2`.
fn ring_offset(from: u32, to: u32, n: u32) -> i64 {
    let n = i64::from(n);
    let d = (i64::from(to) - i64::from(from)).rem_euclid(n);
    if 2 * d >= n {
        d - n
    } else {
        d
    }
}

/// Ordering key of a candidate bin: Chebyshev ring, then dir offset, then rot offset.
fn donor_key(query: &PolarIndex, cand: &PolarIndex, n: u32) -> (i64, i64, i64, i64, i64) {
    let dd = ring_offset(query.dir_bin, cand.dir_bin, n);
    let dr = ring_offset(query.rot_bin, cand.rot_bin, n);
    (dd.abs().max(dr.abs()), dd.abs(), dd, dr.abs(), dr)
}

/// The entry for `query`, or the nearest populated bin of the same class.
pub fn find_donor<'a>(db: &'a DenseObjectDB, query: &PolarIndex) -> Result<(&'a PolarIndex, &'a DbEntry), PasteError> {
    if let Some((k, e)) = db.entries.get_key_value(query) {
        return Ok((k, e));
    }
    let n = db.config.bins;
    db.entries
        .iter()
        .filter(|(k, _)| k.class_label == query.class_label)
        .min_by_key(|(k, _)| donor_key(query, k, n))
        .ok_or_else(|| PasteError::NoDonor(query.class_label.clone()))
}

fn paste_object(obj: &ObjectPoints, db: &DenseObjectDB) -> Result<AddedPoints, PasteError> {
    let query = match geometry::polar_index_of(&obj.bbox, db.config.bins) {
        Ok(q) => q,
        Err(_) => {
            log::warn!("object {:?} sits on the sensor origin; nothing pasted", obj.source);
            return Ok(AddedPoints::default());
        }
    };
    let (_, entry) = find_donor(db, &query)?;
    let intensity = added_intensity_policy(obj);
    let mut points = decanonicalize(&entry.object.points, &obj.bbox);
    points.iter_mut().for_each(|p| p.intensity = intensity);
    Ok(AddedPoints { points })
}

/// Returns a copy of `scene` with one added point set per object.
pub fn enhance_scene(scene: &Scene, db: &DenseObjectDB) -> Result<Scene, PasteError> {
    let added = scene.objects.iter().map(|o| paste_object(o, db)).collect::<Result<Vec<_>, _>>()?;
    Ok(Scene { added, ..scene.clone() })
}

pub fn enhance_scenes(scenes: &[Scene], db: &DenseObjectDB, exec: Exec) -> Result<Vec<Scene>, PasteError> {
    par::try_map(exec, scenes, |s| enhance_scene(s, db))
}
