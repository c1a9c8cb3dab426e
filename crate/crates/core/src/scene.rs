//! A LiDAR frame split into labeled object point sets and background.

use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, Point3};

/// Stable identity of an annotated object: frame id, then index within the frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceId {
    pub frame_id: String,
    pub object_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPoints {
    pub bbox: Box3D,
    pub points: Vec<Point3>,
    pub source: SourceId,
}

/// Synthetic points pasted onto one object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AddedPoints {
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub frame_id: String,
    pub objects: Vec<ObjectPoints>,
    /// Either empty (raw scene) or one entry per object (enhanced scene).
    pub added: Vec<AddedPoints>,
    pub background: Vec<Point3>,
}

impl Scene {
    pub fn is_enhanced(&self) -> bool {
        !self.added.is_empty()
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox.clone()).collect()
    }

    /// Raw points: object sets in order, then background.
    pub fn raw_points(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.raw_len());
        for o in &self.objects {
            out.extend_from_slice(&o.points);
        }
        out.extend_from_slice(&self.background);
        out
    }

    pub fn raw_len(&self) -> usize {
        self.objects.iter().map(|o| o.points.len()).sum::<usize>() + self.background.len()
    }

    pub fn added_len(&self) -> usize {
        self.added.iter().map(|a| a.points.len()).sum()
    }

    /// Everything the sensor branch sees: raw points followed by added points.
    pub fn all_points(&self) -> Vec<Point3> {
        let mut out = self.raw_points();
        for a in &self.added {
            out.extend_from_slice(&a.points);
        }
        out
    }

    /// Checks the `added` length invariant.
    pub fn is_consistent(&self) -> bool {
        self.added.is_empty() || self.added.len() == self.objects.len()
    }
}
