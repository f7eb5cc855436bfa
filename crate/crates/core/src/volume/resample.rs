//! Low-resolution registration space: masking, downsampling, cropping and the
//! inverse label restoration.

use serde::{Deserialize, Serialize};

use super::{Geometry, LabelVolume, ScalarVolume, Volume};
use crate::error::{Error, Result};

/// Parameters needed to map a low-resolution crop back to its source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub scale: f64,
    /// Window origin in the scaled (low-resolution) grid, voxels.
    pub crop_offset: [usize; 3],
    pub crop_dims: [usize; 3],
    pub source_geometry: Geometry,
}

#[derive(Serialize, Deserialize)]
struct CropRecordJson {
    scale: f64,
    crop_offset: [usize; 3],
    crop_dims: [usize; 3],
    source_dims: [usize; 3],
}

impl CropRecord {
    pub fn scaled_dims(&self) -> [usize; 3] {
        scaled_dims(&self.source_geometry, self.scale)
    }

    /// Geometry of the cropped low-resolution window.
    pub fn window_geometry(&self) -> Geometry {
        let low = scaled_geometry(&self.source_geometry, self.scale);
        let off = self.crop_offset.map(|o| o as f64);
        let origin = low.index_to_world(off);
        Geometry {
            dims: self.crop_dims,
            spacing: low.spacing,
            origin: [origin.x, origin.y, origin.z],
            direction: low.direction,
        }
    }

    /// Continuous low-res window index of a source voxel index.
    #[inline]
    fn source_to_window(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (x[a] + 0.5) * self.scale - 0.5 - self.crop_offset[a] as f64)
    }

    /// Continuous source index sampled by a window voxel.
    #[inline]
    fn window_to_source(&self, j: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (j[a] as f64 + self.crop_offset[a] as f64 + 0.5) / self.scale - 0.5)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(CropRecordJson {
            scale: self.scale,
            crop_offset: self.crop_offset,
            crop_dims: self.crop_dims,
            source_dims: self.source_geometry.dims,
        })
        .expect("crop record serializes")
    }
}

fn scaled_dims(g: &Geometry, scale: f64) -> [usize; 3] {
    g.dims
        .map(|d| ((d as f64 * scale) + 0.5).floor().max(1.0) as usize)
}

fn scaled_geometry(g: &Geometry, scale: f64) -> Geometry {
    let shift = 0.5 / scale - 0.5;
    let origin = g.index_to_world([shift; 3]);
    Geometry {
        dims: scaled_dims(g, scale),
        spacing: g.spacing.map(|s| s / scale),
        origin: [origin.x, origin.y, origin.z],
        direction: g.direction,
    }
}

/// Trilinear sample at a continuous index; coordinates are clamped to the grid.
pub fn sample_trilinear(vol: &ScalarVolume, idx: [f64; 3]) -> f64 {
    let d = vol.geometry.dims;
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
    let mut acc = 0.0;
    for (c0, w0) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
        if w0 == 0.0 {
            continue;
        }
        for (c1, w1) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            if w1 == 0.0 {
                continue;
            }
            for (c2, w2) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                if w2 == 0.0 {
                    continue;
                }
                acc += w0 * w1 * w2 * vol.get(c0, c1, c2);
            }
        }
    }
    acc
}

pub(crate) fn nearest_index(x: f64, n: usize) -> usize {
    ((x + 0.5).floor().max(0.0) as usize).min(n - 1)
}

/// Mask the image by the nonzero segmentation, downsample by `scale` with
/// trilinear interpolation and crop a `target_dims` window centred on the
/// segmentation centroid (clamped to stay inside the scaled grid).
pub fn mask_downsample_crop(
    img: &ScalarVolume,
    seg: &LabelVolume,
    target_dims: [usize; 3],
    scale: f64,
) -> Result<(ScalarVolume, CropRecord)> {
    img.geometry
        .ensure_same_grid(seg.geometry(), "image and segmentation")?;
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!("scale must be in (0, 1], got {scale}")));
    }
    let g = &img.geometry;
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (idx, &l) in seg.labels.data.iter().enumerate() {
        if l != 0 {
            let c = g.coords(idx);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty(
            "segmentation is entirely zero; nothing to centre the crop on".into(),
        ));
    }
    let low_dims = scaled_dims(g, scale);
    if (0..3).any(|a| target_dims[a] == 0 || target_dims[a] > low_dims[a]) {
        return Err(Error::invalid(format!(
            "crop window {target_dims:?} does not fit the scaled grid {low_dims:?}"
        )));
    }
    let centroid_low = [0, 1, 2].map(|a| (sum[a] / n as f64 + 0.5) * scale - 0.5);
    let crop_offset = [0, 1, 2].map(|a| {
        let start = (centroid_low[a] - (target_dims[a] as f64 - 1.0) / 2.0 + 0.5).floor();
        start.clamp(0.0, (low_dims[a] - target_dims[a]) as f64) as usize
    });
    let rec = CropRecord {
        scale,
        crop_offset,
        crop_dims: target_dims,
        source_geometry: g.clone(),
    };

    let masked = Volume {
        geometry: g.clone(),
        data: img
            .data
            .iter()
            .zip(&seg.labels.data)
            .map(|(&v, &l)| if l != 0 { v } else { 0.0 })
            .collect(),
    };
    let wg = rec.window_geometry();
    let mut data = Vec::with_capacity(wg.len());
    for i in 0..target_dims[0] {
        for j in 0..target_dims[1] {
            for k in 0..target_dims[2] {
                data.push(sample_trilinear(&masked, rec.window_to_source([i, j, k])));
            }
        }
    }
    Ok((Volume { geometry: wg, data }, rec))
}

/// Nearest-neighbour counterpart of [`mask_downsample_crop`] for label maps.
pub fn downsample_labels_crop(seg: &LabelVolume, rec: &CropRecord) -> Result<LabelVolume> {
    seg.geometry()
        .ensure_same_grid(&rec.source_geometry, "labels and crop record")?;
    let d = rec.source_geometry.dims;
    let wg = rec.window_geometry();
    let mut data = Vec::with_capacity(wg.len());
    for i in 0..rec.crop_dims[0] {
        for j in 0..rec.crop_dims[1] {
            for k in 0..rec.crop_dims[2] {
                let s = rec.window_to_source([i, j, k]);
                data.push(seg.labels.get(
                    nearest_index(s[0], d[0]),
                    nearest_index(s[1], d[1]),
                    nearest_index(s[2], d[2]),
                ));
            }
        }
    }
    Ok(LabelVolume {
        labels: Volume { geometry: wg, data },
        schema: seg.schema.clone(),
    })
}

/// Place a low-resolution label window back into its source grid using
/// nearest-neighbour upsampling. Voxels outside the window are background.
pub fn restore_resolution(low: &LabelVolume, rec: &CropRecord) -> Result<LabelVolume> {
    if low.geometry().dims != rec.crop_dims {
        return Err(Error::GeometryMismatch(format!(
            "low-resolution dims {:?} differ from crop window {:?}",
            low.geometry().dims,
            rec.crop_dims
        )));
    }
    let g = &rec.source_geometry;
    let mut data = vec![0u16; g.len()];
    for (idx, out) in data.iter_mut().enumerate() {
        let c = g.coords(idx);
        let w = rec.source_to_window(c.map(|v| v as f64));
        let mut p = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let r = (w[a] + 0.5).floor();
            if r < 0.0 || r >= rec.crop_dims[a] as f64 {
                inside = false;
                break;
            }
            p[a] = r as usize;
        }
        if inside {
            *out = low.labels.get(p[0], p[1], p[2]);
        }
    }
    Ok(LabelVolume {
        labels: Volume {
            geometry: g.clone(),
            data,
        },
        schema: low.schema.clone(),
    })
}

/// Min-max rescale to `[0, 1]`; constant volumes map to zero.
pub fn normalize_min_max(vol: &ScalarVolume) -> ScalarVolume {
    let (lo, hi) = vol
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    vol.map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelSchema;

    fn labels(g: Geometry, data: Vec<u16>) -> LabelVolume {
        LabelVolume::new(Volume::new(g, data).unwrap(), LabelSchema::knee_default()).unwrap()
    }

    #[test]
    fn typical_scan_crop_dims() {
        let g = Geometry::axis_aligned([160, 384, 384], [0.7, 0.36, 0.36]);
        let mut seg = labels(g.clone(), vec![0; g.len()]);
        seg.labels.set(80, 190, 200, 3);
        let img = Volume::filled(g, 1.0);
        let (low, rec) = mask_downsample_crop(&img, &seg, [64, 128, 128], 0.5).unwrap();
        assert_eq!(low.dims(), [64, 128, 128]);
        assert_eq!(rec.scaled_dims(), [80, 192, 192]);
        assert_eq!(low.geometry.spacing, [1.4, 0.72, 0.72]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let g = Geometry::axis_aligned([12, 10, 8], [1.0; 3]);
        let seg = labels(g.clone(), vec![1; g.len()]);
        let img = Volume::filled(g, 3.5);
        let (low, _) = mask_downsample_crop(&img, &seg, [4, 4, 4], 0.5).unwrap();
        assert!(low.data.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn single_voxel_centres_window() {
        let g = Geometry::axis_aligned([40, 40, 40], [1.0; 3]);
        let mut seg = labels(g.clone(), vec![0; g.len()]);
        seg.labels.set(20, 9, 30, 2);
        let img = Volume::filled(g, 1.0);
        let (_, rec) = mask_downsample_crop(&img, &seg, [8, 8, 8], 0.5).unwrap();
        // Low-res centroid: (20.5*0.5-0.5, 9.5*0.5-0.5, 30.5*0.5-0.5) = (9.75, 4.25, 14.75);
        // start = round(c - 3.5) = (6, 1, 11), clamped to [0, 12].
        assert_eq!(rec.crop_offset, [6, 1, 11]);
    }

    #[test]
    fn empty_segmentation_is_an_error() {
        let g = Geometry::axis_aligned([4, 4, 4], [1.0; 3]);
        let seg = labels(g.clone(), vec![0; g.len()]);
        let img = Volume::filled(g, 1.0);
        assert!(matches!(
            mask_downsample_crop(&img, &seg, [2, 2, 2], 0.5),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn single_low_voxel_restores_to_2x2x2_block() {
        let g = Geometry::axis_aligned([16, 16, 16], [1.0; 3]);
        let mut seg = labels(g.clone(), vec![0; g.len()]);
        seg.labels.set(8, 8, 8, 1);
        let img = Volume::filled(g.clone(), 1.0);
        let (_, rec) = mask_downsample_crop(&img, &seg, [4, 4, 4], 0.5).unwrap();
        let wg = rec.window_geometry();
        let mut low = labels(wg.clone(), vec![0; wg.len()]);
        low.labels.set(1, 2, 3, 5);
        let full = restore_resolution(&low, &rec).unwrap();
        let set: Vec<[usize; 3]> = full
            .labels
            .data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 5)
            .map(|(i, _)| g.coords(i))
            .collect();
        assert_eq!(set.len(), 8);
        let o = rec.crop_offset;
        let base = [2 * (1 + o[0]), 2 * (2 + o[1]), 2 * (3 + o[2])];
        for c in set {
            for a in 0..3 {
                assert!(c[a] == base[a] || c[a] == base[a] + 1);
            }
        }
    }

    #[test]
    fn all_zero_restores_to_zero() {
        let g = Geometry::axis_aligned([10, 10, 10], [1.0; 3]);
        let rec = CropRecord {
            scale: 0.5,
            crop_offset: [0, 1, 0],
            crop_dims: [4, 4, 4],
            source_geometry: g,
        };
        let wg = rec.window_geometry();
        let low = labels(wg.clone(), vec![0; wg.len()]);
        assert!(restore_resolution(&low, &rec)
            .unwrap()
            .labels
            .data
            .iter()
            .all(|&v| v == 0));
        let bad = labels(Geometry::axis_aligned([3, 4, 4], [1.0; 3]), vec![0; 48]);
        assert!(restore_resolution(&bad, &rec).is_err());
    }

    #[test]
    fn window_geometry_matches_sampling() {
        // World position of a window voxel equals the world position of the
        // source coordinate it samples.
        let g = Geometry::axis_aligned([20, 20, 20], [0.7, 0.36, 0.5]);
        let rec = CropRecord {
            scale: 0.5,
            crop_offset: [2, 3, 1],
            crop_dims: [4, 5, 6],
            source_geometry: g.clone(),
        };
        let wg = rec.window_geometry();
        let j = [1, 2, 3];
        let w1 = wg.index_to_world(j.map(|v| v as f64));
        let w2 = g.index_to_world(rec.window_to_source(j));
        assert!((w1 - w2).norm() < 1e-12);
    }
}
