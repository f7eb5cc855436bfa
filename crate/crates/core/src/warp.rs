//! Dense displacement fields: scaling-and-squaring integration of stationary
//! velocity fields, warping of volumes, and template probability maps.
//!
//! Vectors are in mm in the world (RAS) frame. Sampling outside the grid
//! clamps to the border for fields and volumes alike.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::resample::nearest_index;
use crate::volume::{
    load_field, sample_trilinear, save_field, BinaryMask, Geometry, LabelVolume, ScalarVolume, Volume,
};

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Nearest,
    Trilinear,
}

fn check_vectors(geometry: &Geometry, vectors: &[V3]) -> Result<()> {
    if vectors.len() != geometry.len() {
        return Err(Error::invalid(format!(
            "field has {} vectors for {} voxels",
            vectors.len(),
            geometry.len()
        )));
    }
    if vectors.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::invalid("field contains non-finite components"));
    }
    Ok(())
}

/// Stationary velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub geometry: Geometry,
    pub vectors: Vec<V3>,
}

/// Displacement field `u`, with the transform `x ↦ x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub geometry: Geometry,
    pub displacement: Vec<V3>,
}

impl VelocityField {
    pub fn new(geometry: Geometry, vectors: Vec<V3>) -> Result<Self> {
        check_vectors(&geometry, &vectors)?;
        Ok(VelocityField { geometry, vectors })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        VelocityField {
            geometry,
            vectors: vec![V3::zeros(); n],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (g, v) = load_field(path)?;
        Self::new(g, v.into_iter().map(V3::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_field(path, &self.geometry, &to_arrays(&self.vectors))
    }
}

fn to_arrays(v: &[V3]) -> Vec<[f64; 3]> {
    v.iter().map(|x| [x.x, x.y, x.z]).collect()
}

/// Trilinear sample of a vector grid at a continuous index, border clamped.
fn sample_vectors(g: &Geometry, data: &[V3], idx: [f64; 3]) -> V3 {
    let d = g.dims;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let x = idx[a].clamp(0.0, (d[a] - 1) as f64);
        let f = x.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(d[a] - 1);
        t[a] = x - f;
    }
    let mut acc = V3::zeros();
    for (c0, w0) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
        for (c1, w1) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            for (c2, w2) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                let w = w0 * w1 * w2;
                if w != 0.0 {
                    acc += data[g.index(c0, c1, c2)] * w;
                }
            }
        }
    }
    acc
}

impl DeformationField {
    pub fn new(geometry: Geometry, displacement: Vec<V3>) -> Result<Self> {
        check_vectors(&geometry, &displacement)?;
        Ok(DeformationField {
            geometry,
            displacement,
        })
    }

    pub fn identity(geometry: Geometry) -> Self {
        let n = geometry.len();
        DeformationField {
            geometry,
            displacement: vec![V3::zeros(); n],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (g, v) = load_field(path)?;
        Self::new(g, v.into_iter().map(V3::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_field(path, &self.geometry, &to_arrays(&self.displacement))
    }

    /// Displacement at a world position (trilinear, border clamped).
    pub fn sample(&self, p: &V3) -> V3 {
        sample_vectors(&self.geometry, &self.displacement, self.geometry.world_to_index(p))
    }

    /// Largest displacement magnitude in mm.
    pub fn max_norm(&self) -> f64 {
        self.displacement.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// The field of `self ∘ inner`: `x ↦ x + u_in(x) + u_self(x + u_in(x))`.
    pub fn compose(&self, inner: &DeformationField) -> Result<DeformationField> {
        self.geometry
            .ensure_same_grid(&inner.geometry, "composed deformation fields")?;
        let g = &self.geometry;
        let displacement = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let x = g.voxel_center(i);
                let u = inner.displacement[i];
                u + self.sample(&(x + u))
            })
            .collect();
        Ok(DeformationField {
            geometry: g.clone(),
            displacement,
        })
    }

    /// Jacobian determinant of `x ↦ x + u(x)` by central differences, per voxel.
    /// Border voxels use one-sided differences.
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        let g = &self.geometry;
        let inv = g.inverse_linear();
        (0..g.len())
            .into_par_iter()
            .map(|i| {
                let c = g.coords(i);
                // Columns: derivative of u with respect to index axis a.
                let mut du = nalgebra::Matrix3::zeros();
                for a in 0..3 {
                    let mut lo = c;
                    let mut hi = c;
                    if c[a] > 0 {
                        lo[a] -= 1;
                    }
                    if c[a] + 1 < g.dims[a] {
                        hi[a] += 1;
                    }
                    let span = (hi[a] - lo[a]) as f64;
                    if span > 0.0 {
                        let d = (self.displacement[g.index(hi[0], hi[1], hi[2])]
                            - self.displacement[g.index(lo[0], lo[1], lo[2])])
                            / span;
                        du.set_column(a, &d);
                    }
                }
                // d u / d x = (d u / d idx) (d idx / d x).
                (nalgebra::Matrix3::identity() + du * inv).determinant()
            })
            .collect()
    }
}

/// Scaling and squaring: `u₀ = v / 2^steps`, then `u ← u ∘ u` `steps` times.
pub fn integrate_svf(v: &VelocityField, steps: u32) -> Result<DeformationField> {
    if steps == 0 {
        return Err(Error::invalid("integration needs at least one squaring step"));
    }
    if steps > 30 {
        return Err(Error::invalid("more than 30 squaring steps is not meaningful"));
    }
    let scale = 0.5f64.powi(steps as i32);
    let mut u = DeformationField {
        geometry: v.geometry.clone(),
        displacement: v.vectors.iter().map(|x| x * scale).collect(),
    };
    for _ in 0..steps {
        u = u.compose(&u)?;
    }
    Ok(u)
}

pub fn negate(v: &VelocityField) -> VelocityField {
    VelocityField {
        geometry: v.geometry.clone(),
        vectors: v.vectors.iter().map(|x| -x).collect(),
    }
}

/// Volumes that can be resampled through a deformation field.
pub trait Warpable: Sized {
    fn grid(&self) -> &Geometry;
    /// Value at `output(x) = input(x + u(x))` for every voxel.
    fn warp(&self, f: &DeformationField, interp: Interpolation) -> Result<Self>;
}

/// Continuous source indices `x + u(x)` for every voxel of the field grid.
fn source_indices(f: &DeformationField) -> Vec<[f64; 3]> {
    let g = &f.geometry;
    (0..g.len())
        .into_par_iter()
        .map(|i| g.world_to_index(&(g.voxel_center(i) + f.displacement[i])))
        .collect()
}

fn warp_nearest<T: Copy + Send + Sync>(vol: &Volume<T>, f: &DeformationField) -> Result<Volume<T>> {
    vol.geometry.ensure_same_grid(&f.geometry, "volume and deformation field")?;
    let d = vol.geometry.dims;
    let data = source_indices(f)
        .into_par_iter()
        .map(|q| vol.get(nearest_index(q[0], d[0]), nearest_index(q[1], d[1]), nearest_index(q[2], d[2])))
        .collect();
    Ok(Volume {
        geometry: vol.geometry.clone(),
        data,
    })
}

impl Warpable for ScalarVolume {
    fn grid(&self) -> &Geometry {
        &self.geometry
    }

    fn warp(&self, f: &DeformationField, interp: Interpolation) -> Result<Self> {
        match interp {
            Interpolation::Nearest => warp_nearest(self, f),
            Interpolation::Trilinear => {
                self.geometry.ensure_same_grid(&f.geometry, "volume and deformation field")?;
                let data = source_indices(f)
                    .into_par_iter()
                    .map(|q| sample_trilinear(self, q))
                    .collect();
                Ok(Volume {
                    geometry: self.geometry.clone(),
                    data,
                })
            }
        }
    }
}

impl Warpable for BinaryMask {
    fn grid(&self) -> &Geometry {
        &self.geometry
    }

    fn warp(&self, f: &DeformationField, interp: Interpolation) -> Result<Self> {
        if interp != Interpolation::Nearest {
            return Err(Error::invalid("masks can only be warped with nearest-neighbour interpolation"));
        }
        warp_nearest(self, f)
    }
}

impl Warpable for LabelVolume {
    fn grid(&self) -> &Geometry {
        self.geometry()
    }

    fn warp(&self, f: &DeformationField, interp: Interpolation) -> Result<Self> {
        if interp != Interpolation::Nearest {
            return Err(Error::invalid("label volumes can only be warped with nearest-neighbour interpolation"));
        }
        Ok(LabelVolume {
            labels: warp_nearest(&self.labels, f)?,
            schema: self.schema.clone(),
        })
    }
}

pub fn apply_field<T: Warpable>(vol: &T, f: &DeformationField, interp: Interpolation) -> Result<T> {
    vol.warp(f, interp)
}

/// Voxelwise mean of binary masks.
pub fn probability_map(masks: &[BinaryMask]) -> Result<ScalarVolume> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("probability map needs at least one mask"))?;
    for m in &masks[1..] {
        first.geometry.ensure_same_grid(&m.geometry, "probability map inputs")?;
    }
    let n = masks.len() as f64;
    let data = (0..first.geometry.len())
        .map(|i| masks.iter().filter(|m| m.data[i]).count() as f64 / n)
        .collect();
    Ok(Volume {
        geometry: first.geometry.clone(),
        data,
    })
}

/// Voxels with probability ≥ `t`.
pub fn threshold_map(p: &ScalarVolume, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} is outside [0, 1]")));
    }
    Ok(p.map(|v| v >= t))
}
