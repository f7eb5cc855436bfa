//! Voxel grids with physical geometry.
//!
//! Voxels are stored in row-major order over `dims = [d0, d1, d2]`: the last
//! axis varies fastest, so the linear index of `(i, j, k)` is
//! `(i * d1 + j) * d2 + k`. World coordinates are millimetres in RAS+
//! (the NIfTI world frame), `world = origin + direction * diag(spacing) * index`.

mod nifti;
mod orient;
pub(crate) mod resample;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti::{
    load_field, load_labels, load_scalar, load_volume, read_nifti, save_field, save_labels,
    save_mask, save_scalar, LoadedVolume, NiftiDatatype, NiftiImage,
};
pub use orient::reorient_ras;
pub use resample::{
    downsample_labels_crop, mask_downsample_crop, normalize_min_max, restore_resolution,
    sample_trilinear, CropRecord,
};

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Columns are the world directions of the three index axes.
    pub direction: Matrix3<f64>,
}

impl Geometry {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
            direction,
        };
        g.validate()?;
        Ok(g)
    }

    /// Axis-aligned RAS+ grid with the origin at zero.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Geometry {
            dims,
            spacing,
            origin: [0.0; 3],
            direction: Matrix3::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Geometry(format!("zero-sized dims {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Geometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry("non-finite origin".into()));
        }
        for a in 0..3 {
            let ca = self.direction.column(a);
            if (ca.norm() - 1.0).abs() > ORTHO_TOL {
                return Err(Error::Geometry(format!(
                    "direction column {a} is not unit length"
                )));
            }
            for b in (a + 1)..3 {
                if ca.dot(&self.direction.column(b)).abs() > ORTHO_TOL {
                    return Err(Error::Geometry(format!(
                        "direction columns {a} and {b} are not orthogonal"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    #[inline]
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// Index-to-world linear part: `direction * diag(spacing)`.
    pub fn linear(&self) -> Matrix3<f64> {
        self.direction * Matrix3::from_diagonal(&Vector3::from(self.spacing))
    }

    pub fn origin_vec(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    /// World position of a (possibly fractional) index.
    pub fn index_to_world(&self, idx: [f64; 3]) -> Vector3<f64> {
        self.origin_vec() + self.linear() * Vector3::from(idx)
    }

    pub fn voxel_center(&self, idx: usize) -> Vector3<f64> {
        let c = self.coords(idx);
        self.index_to_world([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    /// Continuous index of a world position.
    pub fn world_to_index(&self, p: &Vector3<f64>) -> [f64; 3] {
        let inv = self.inverse_linear();
        let v = inv * (p - self.origin_vec());
        [v.x, v.y, v.z]
    }

    /// Inverse of [`Geometry::linear`]; cheap because the direction is orthonormal.
    pub fn inverse_linear(&self) -> Matrix3<f64> {
        let inv_s = Vector3::new(
            1.0 / self.spacing[0],
            1.0 / self.spacing[1],
            1.0 / self.spacing[2],
        );
        Matrix3::from_diagonal(&inv_s) * self.direction.transpose()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    /// Same dims and the same voxel-to-world map within `1e-6`.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        const TOL: f64 = 1e-6;
        self.dims == other.dims
            && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() <= TOL)
            && (0..3).all(|a| (self.origin[a] - other.origin[a]).abs() <= TOL)
            && (self.direction - other.direction).abs().max() <= TOL
    }

    pub fn ensure_same_grid(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

/// A dense voxel grid of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub geometry: Geometry,
    pub data: Vec<T>,
}

pub type BinaryMask = Volume<bool>;
pub type ScalarVolume = Volume<f64>;

impl<T: Copy> Volume<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "voxel count {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        let n = geometry.len();
        Volume {
            geometry,
            data: vec![value; n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.geometry.index(i, j, k);
        self.data[idx] = value;
    }

    /// Value at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, p: [i64; 3]) -> Option<T> {
        if self.geometry.contains(p) {
            Some(self.get(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }
}

impl Volume<f64> {
    pub fn ensure_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("scalar volume contains non-finite values"))
        }
    }
}

impl Volume<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Volume {
            geometry: self.geometry.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && b)
    }

    /// `self − other`.
    pub fn difference(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        self.map(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Label value → tissue or region name. `0` is always background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema(pub BTreeMap<u16, String>);

impl LabelSchema {
    pub const FEMUR: u16 = 1;
    pub const TIBIA: u16 = 2;
    pub const FEMORAL_CARTILAGE: u16 = 3;
    pub const MEDIAL_TIBIAL_CARTILAGE: u16 = 4;
    pub const LATERAL_TIBIAL_CARTILAGE: u16 = 5;

    pub fn knee_default() -> Self {
        LabelSchema(
            [
                (Self::FEMUR, "femur"),
                (Self::TIBIA, "tibia"),
                (Self::FEMORAL_CARTILAGE, "FC"),
                (Self::MEDIAL_TIBIAL_CARTILAGE, "MTC"),
                (Self::LATERAL_TIBIAL_CARTILAGE, "LTC"),
            ]
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect(),
        )
    }

    pub fn contains(&self, label: u16) -> bool {
        label == 0 || self.0.contains_key(&label)
    }

    /// Label carrying `name`, if any.
    pub fn label_of(&self, name: &str) -> Option<u16> {
        self.0
            .iter()
            .find_map(|(&k, v)| (v.eq_ignore_ascii_case(name)).then_some(k))
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        Self::knee_default()
    }
}

/// Which knee a scan shows. In RAS+ space the medial side of a right knee
/// lies toward −x, that of a left knee toward +x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KneeSide {
    Left,
    #[default]
    Right,
}

impl KneeSide {
    /// Sign of the x axis pointing toward the medial side.
    pub fn medial_sign(self) -> f64 {
        match self {
            KneeSide::Right => -1.0,
            KneeSide::Left => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            KneeSide::Right => KneeSide::Left,
            KneeSide::Left => KneeSide::Right,
        }
    }
}

impl std::str::FromStr for KneeSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(KneeSide::Left),
            "right" | "r" => Ok(KneeSide::Right),
            _ => Err(Error::invalid(format!("unknown knee side '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub labels: Volume<u16>,
    pub schema: LabelSchema,
}

impl LabelVolume {
    pub fn new(labels: Volume<u16>, schema: LabelSchema) -> Result<Self> {
        if let Some(&bad) = labels.data.iter().find(|&&v| !schema.contains(v)) {
            return Err(Error::invalid(format!(
                "label {bad} is not in the label schema"
            )));
        }
        Ok(LabelVolume { labels, schema })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.labels.geometry
    }

    pub fn mask(&self, label: u16) -> BinaryMask {
        self.labels.map(|v| v == label)
    }

    pub fn nonzero(&self) -> BinaryMask {
        self.labels.map(|v| v != 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Geometry::axis_aligned([3, 4, 5], [1.0; 3]);
        for idx in 0..g.len() {
            let c = g.coords(idx);
            assert_eq!(g.index(c[0], c[1], c[2]), idx);
        }
        assert_eq!(g.index(0, 0, 1), 1);
        assert_eq!(g.index(0, 1, 0), 5);
    }

    #[test]
    fn non_orthogonal_direction_rejected() {
        let dir = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3], dir).is_err());
    }

    #[test]
    fn world_index_inverse() {
        let dir = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0);
        let g = Geometry::new([4, 5, 6], [0.7, 0.36, 0.36], [3.0, -2.0, 1.0], dir).unwrap();
        let w = g.index_to_world([1.5, 2.0, 3.25]);
        let back = g.world_to_index(&w);
        for (a, b) in back.iter().zip([1.5, 2.0, 3.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn label_schema_validation() {
        let g = Geometry::axis_aligned([1, 1, 2], [1.0; 3]);
        let vol = Volume::new(g.clone(), vec![0u16, 7]).unwrap();
        assert!(LabelVolume::new(vol, LabelSchema::knee_default()).is_err());
        let vol = Volume::new(g, vec![0u16, 3]).unwrap();
        let lv = LabelVolume::new(vol, LabelSchema::knee_default()).unwrap();
        assert_eq!(lv.mask(3).count(), 1);
    }
}
