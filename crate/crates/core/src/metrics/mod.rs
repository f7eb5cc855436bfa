//! Overlap, agreement, tolerance and image-similarity measures.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, ScalarVolume};

mod report;

pub use report::{
    agreement, regional_quantify, AgreementRow, AgreementTable, PlateMeasurements, Provenance, RegionRow, RegionalReport,
    ReportOptions, ThicknessDenominator, METRIC_COLUMNS,
};

/// Dice similarity `2|a∩b| / (|a|+|b|)`; two empty masks agree perfectly.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.geometry.ensure_same_grid(&b.geometry, "DSC inputs")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Paired measurements: `ys` from the method under test, `yl` the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    ys: Vec<f64>,
    yl: Vec<f64>,
}

impl MeasurementSeries {
    pub fn new(ys: Vec<f64>, yl: Vec<f64>) -> Result<Self> {
        if ys.len() != yl.len() {
            return Err(Error::invalid("paired series differ in length"));
        }
        if ys.len() < 2 {
            return Err(Error::invalid("paired series need at least two entries"));
        }
        if ys.iter().chain(&yl).any(|v| !v.is_finite()) {
            return Err(Error::invalid("paired series contain non-finite values"));
        }
        Ok(MeasurementSeries { ys, yl })
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn yl(&self) -> &[f64] {
        &self.yl
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation with population moments.
pub fn pearson(s: &MeasurementSeries) -> Result<f64> {
    let (ms, ml) = (mean(&s.ys), mean(&s.yl));
    let n = s.len() as f64;
    let (mut cov, mut vs, mut vl) = (0.0, 0.0, 0.0);
    for (&a, &b) in s.ys.iter().zip(&s.yl) {
        cov += (a - ms) * (b - ml);
        vs += (a - ms) * (a - ms);
        vl += (b - ml) * (b - ml);
    }
    if vs == 0.0 || vl == 0.0 {
        return Err(Error::invalid("correlation is undefined for a constant series"));
    }
    let r = (cov / n) / ((vs / n).sqrt() * (vl / n).sqrt());
    Ok(r.clamp(-1.0, 1.0))
}

/// Root-mean-squared deviation `(‖ys − yl‖² / n)^½`.
pub fn rmsd(s: &MeasurementSeries) -> f64 {
    let ss: f64 = s.ys.iter().zip(&s.yl).map(|(a, b)| (a - b) * (a - b)).sum();
    (ss / s.len() as f64).sqrt()
}

/// RMSD divided by the mean of the reference series.
pub fn cv_rmsd(s: &MeasurementSeries) -> Result<f64> {
    let m = mean(&s.yl);
    if m == 0.0 {
        return Err(Error::invalid("reference series has zero mean"));
    }
    Ok(rmsd(s) / m)
}

/// Fraction of entries whose reference value lies in `[q − tol, q + tol]`.
pub fn phr(q: &[f64], g: &[f64], tol: f64) -> Result<f64> {
    if q.len() != g.len() {
        return Err(Error::invalid("measurement and ground-truth lengths differ"));
    }
    if q.is_empty() {
        return Err(Error::invalid("hit rate needs at least one entry"));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::invalid("tolerance must be nonnegative"));
    }
    let hits = q
        .iter()
        .zip(g)
        .filter(|(&qj, &gj)| qj - tol <= gj && gj <= qj + tol)
        .count();
    Ok(hits as f64 / q.len() as f64)
}

/// Manual FCL grade (0–10) to percent: grade 1 is 10 %.
pub fn grade_to_percent(grade: u8) -> Result<f64> {
    if grade > 10 {
        return Err(Error::invalid(format!("FCL grade {grade} is outside 0..=10")));
    }
    Ok(grade as f64 * 10.0)
}

/// Mean squared intensity difference.
pub fn mse_image(a: &ScalarVolume, b: &ScalarVolume) -> Result<f64> {
    a.geometry.ensure_same_grid(&b.geometry, "MSE inputs")?;
    let ss: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(ss / a.data.len() as f64)
}

/// Variance floor for local correlation.
pub const LNCC_EPS: f64 = 1e-5;

/// 3D summed-area table with a zero border: `t[(i+1, j+1, k+1)]` holds the
/// sum over the box `[0..=i] × [0..=j] × [0..=k]`.
struct Integral {
    d: [usize; 3],
    t: Vec<f64>,
}

impl Integral {
    fn new(d: [usize; 3], v: impl Fn(usize) -> f64) -> Self {
        let e = [d[0] + 1, d[1] + 1, d[2] + 1];
        let mut t = vec![0.0; e[0] * e[1] * e[2]];
        let at = |i: usize, j: usize, k: usize| (i * e[1] + j) * e[2] + k;
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    let x = v((i * d[1] + j) * d[2] + k);
                    t[at(i + 1, j + 1, k + 1)] = x + t[at(i, j + 1, k + 1)] + t[at(i + 1, j, k + 1)]
                        + t[at(i + 1, j + 1, k)]
                        - t[at(i, j, k + 1)]
                        - t[at(i, j + 1, k)]
                        - t[at(i + 1, j, k)]
                        + t[at(i, j, k)];
                }
            }
        }
        Integral { d, t }
    }

    /// Sum over the half-open box `lo..hi`.
    fn sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let e = [self.d[0] + 1, self.d[1] + 1, self.d[2] + 1];
        let at = |i: usize, j: usize, k: usize| self.t[(i * e[1] + j) * e[2] + k];
        at(hi[0], hi[1], hi[2]) - at(lo[0], hi[1], hi[2]) - at(hi[0], lo[1], hi[2]) - at(hi[0], hi[1], lo[2])
            + at(lo[0], lo[1], hi[2])
            + at(lo[0], hi[1], lo[2])
            + at(hi[0], lo[1], lo[2])
            - at(lo[0], lo[1], lo[2])
    }
}

/// Mean over voxels of the squared local normalised cross-correlation in a
/// `window³` neighbourhood (truncated at the grid border). Local variance
/// sums are floored at [`LNCC_EPS`].
pub fn lncc_image(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> Result<f64> {
    a.geometry.ensure_same_grid(&b.geometry, "LNCC inputs")?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("LNCC window {window} must be odd")));
    }
    let d = a.geometry.dims;
    // Centre the data so the moment sums do not cancel catastrophically.
    let (ma, mb) = (mean(&a.data), mean(&b.data));
    let x = |i: usize| a.data[i] - ma;
    let y = |i: usize| b.data[i] - mb;
    let sa = Integral::new(d, x);
    let sb = Integral::new(d, y);
    let saa = Integral::new(d, |i| x(i) * x(i));
    let sbb = Integral::new(d, |i| y(i) * y(i));
    let sab = Integral::new(d, |i| x(i) * y(i));
    let r = window / 2;
    let mut total = 0.0;
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                let c = [i, j, k];
                let lo = [0, 1, 2].map(|t| c[t].saturating_sub(r));
                let hi = [0, 1, 2].map(|t| (c[t] + r + 1).min(d[t]));
                let n = ((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2])) as f64;
                let (ta, tb) = (sa.sum(lo, hi), sb.sum(lo, hi));
                let cross = sab.sum(lo, hi) - ta * tb / n;
                let va = (saa.sum(lo, hi) - ta * ta / n).max(LNCC_EPS);
                let vb = (sbb.sum(lo, hi) - tb * tb / n).max(LNCC_EPS);
                total += cross * cross / (va * vb);
            }
        }
    }
    Ok(total / a.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Volume};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(a: &[f64], b: &[f64]) -> MeasurementSeries {
        MeasurementSeries::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let g = Geometry::axis_aligned([10, 10, 2], [1.0; 3]);
        let a = Volume::new(g.clone(), (0..200).map(|i| i < 100).collect()).unwrap();
        let b = Volume::new(g.clone(), (0..200).map(|i| (50..150).contains(&i)).collect()).unwrap();
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &a.map(|x| !x)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let e = a.map(|_| false);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        let other = Volume::filled(Geometry::axis_aligned([10, 10, 3], [1.0; 3]), false);
        assert!(dsc(&a, &other).is_err());
    }

    #[test]
    fn agreement_examples() {
        assert!((pearson(&series(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&series(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0])).unwrap() + 1.0).abs() < 1e-15);
        // Textbook formula: r = Σ(x−x̄)(y−ȳ) / sqrt(Σ(x−x̄)² Σ(y−ȳ)²) with x̄ = 2, ȳ = 7/3.
        let num = -(-4.0 / 3.0) + 0.0 + 1.0 * (5.0 / 3.0);
        let den = (2.0f64 * ((16.0 + 1.0 + 25.0) / 9.0)).sqrt();
        assert!((pearson(&series(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])).unwrap() - num / den).abs() < 1e-12);
        assert!(pearson(&series(&[1.0, 1.0], &[1.0, 2.0])).is_err());

        assert_eq!(rmsd(&series(&[1.0, 5.0], &[1.0, 5.0])), 0.0);
        assert!((rmsd(&series(&[3.0, 4.0], &[1.0, 2.0])) - 2.0).abs() < 1e-15);
        assert!((rmsd(&series(&[0.0, 0.0], &[3.0, 4.0])) - 3.5355339059327378).abs() < 1e-12);

        assert_eq!(cv_rmsd(&series(&[1.0, 2.0], &[1.0, 2.0])).unwrap(), 0.0);
        assert!((cv_rmsd(&series(&[10.0, 12.0], &[9.0, 11.0])).unwrap() - 0.1).abs() < 1e-15);
        assert!(cv_rmsd(&series(&[1.0, 2.0], &[-1.0, 1.0])).is_err());

        assert!(MeasurementSeries::new(vec![1.0], vec![1.0]).is_err());
        assert!(MeasurementSeries::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(MeasurementSeries::new(vec![1.0, f64::NAN], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn phr_examples() {
        assert_eq!(phr(&[1.0, 2.0], &[1.0, 2.0], 0.0).unwrap(), 1.0);
        assert_eq!(phr(&[10.0, 30.0], &[10.0, 50.0], 5.0).unwrap(), 0.5);
        // Closed interval.
        assert_eq!(phr(&[10.0], &[15.0], 5.0).unwrap(), 1.0);
        assert!(phr(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(phr(&[], &[], 1.0).is_err());
        assert_eq!(grade_to_percent(1).unwrap(), 10.0);
        assert_eq!(grade_to_percent(10).unwrap(), 100.0);
        assert!(grade_to_percent(11).is_err());
    }

    #[test]
    fn mse_examples() {
        let g = Geometry::axis_aligned([2, 3, 4], [1.0; 3]);
        let a = Volume::new(g.clone(), (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(mse_image(&a, &a).unwrap(), 0.0);
        assert!((mse_image(&a, &a.map(|v| v + 1.5)).unwrap() - 2.25).abs() < 1e-12);
    }

    #[test]
    fn lncc_properties() {
        let g = Geometry::axis_aligned([8, 9, 10], [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Volume::new(g.clone(), (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
        let self_sim = lncc_image(&a, &a, 3).unwrap();
        assert!((self_sim - 1.0).abs() < 1e-9);
        let affine = a.map(|v| 2.0 * v + 3.0);
        assert!((lncc_image(&a, &affine, 3).unwrap() - self_sim).abs() < 1e-6);
        assert!(lncc_image(&a, &a, 4).is_err());
        assert!(lncc_image(&a, &a, 0).is_err());
        for seed in 0..10 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let b = Volume::new(g.clone(), (0..g.len()).map(|_| r.random::<f64>()).collect()).unwrap();
            assert!(lncc_image(&a, &b, 3).unwrap() < 0.2);
        }
    }
}
