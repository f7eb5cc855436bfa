//! First-hit ray queries against a triangle set.
//!
//! Triangles are binned into a uniform grid that rays walk cell by cell, and
//! each candidate uses the watertight ray/triangle test of Woop, Benthin and
//! Wald, so rays through shared edges or vertices never slip between
//! neighbouring triangles. Rays lying in a triangle's plane do not hit it.

use nalgebra::Vector3;

type V3 = Vector3<f64>;

#[derive(Debug, Clone)]
pub struct TriangleGrid {
    tris: Vec<[V3; 3]>,
    lo: V3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    ids: Vec<u32>,
}

/// Distance along `dir` (unit or not) to the triangle, if hit with `t > eps`.
pub fn ray_triangle(origin: &V3, dir: &V3, tri: &[V3; 3], eps: f64) -> Option<f64> {
    let kz = dir.iamax();
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if dir[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = dir[kx] / dir[kz];
    let sy = dir[ky] / dir[kz];
    let sz = 1.0 / dir[kz];
    let a = tri[0] - origin;
    let b = tri[1] - origin;
    let c = tri[2] - origin;
    let ax = a[kx] - sx * a[kz];
    let ay = a[ky] - sy * a[kz];
    let bx = b[kx] - sx * b[kz];
    let by = b[ky] - sy * b[kz];
    let cx = c[kx] - sx * c[kz];
    let cy = c[ky] - sy * c[kz];
    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let t = (u * sz * a[kz] + v * sz * b[kz] + w * sz * c[kz]) / det;
    (t > eps).then_some(t)
}

impl TriangleGrid {
    pub fn new(tris: Vec<[V3; 3]>, cell: f64) -> Self {
        let mut lo = V3::repeat(f64::INFINITY);
        let mut hi = V3::repeat(f64::NEG_INFINITY);
        for t in &tris {
            for p in t {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
        }
        if tris.is_empty() {
            lo = V3::zeros();
            hi = V3::zeros();
        }
        let extent = hi - lo;
        let mut cell = if cell.is_finite() && cell > 0.0 { cell } else { 1.0 };
        let budget = (8 * tris.len()).max(64) as f64;
        while (0..3).map(|a| (extent[a] / cell).floor() + 1.0).product::<f64>() > budget {
            cell *= 1.5;
        }
        let dims = [0, 1, 2].map(|a| (extent[a] / cell).floor() as usize + 1);
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_range = |t: &[V3; 3]| -> ([usize; 3], [usize; 3]) {
            let mut a = [usize::MAX; 3];
            let mut b = [0; 3];
            for p in t {
                for ax in 0..3 {
                    let c = (((p[ax] - lo[ax]) / cell).floor() as usize).min(dims[ax] - 1);
                    a[ax] = a[ax].min(c);
                    b[ax] = b[ax].max(c);
                }
            }
            (a, b)
        };
        let mut pairs: Vec<(usize, u32)> = Vec::new();
        for (id, t) in tris.iter().enumerate() {
            let (a, b) = cell_range(t);
            for i in a[0]..=b[0] {
                for j in a[1]..=b[1] {
                    for k in a[2]..=b[2] {
                        pairs.push(((i * dims[1] + j) * dims[2] + k, id as u32));
                    }
                }
            }
        }
        pairs.sort_unstable();
        let mut starts = vec![0usize; n_cells + 1];
        for &(c, _) in &pairs {
            starts[c + 1] += 1;
        }
        for c in 0..n_cells {
            starts[c + 1] += starts[c];
        }
        TriangleGrid {
            tris,
            lo,
            cell,
            dims,
            starts,
            ids: pairs.into_iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Nearest hit distance in `(eps, max_t]` along the ray; `dir` must be unit length
    /// for the result to be a distance.
    pub fn first_hit(&self, origin: &V3, dir: &V3, max_t: f64, eps: f64) -> Option<f64> {
        if self.tris.is_empty() || dir.norm() == 0.0 {
            return None;
        }
        // Clip the ray against the grid box (slightly padded).
        let pad = 1e-9 * self.cell;
        let mut t0 = 0.0f64;
        let mut t1 = max_t;
        for a in 0..3 {
            let lo = self.lo[a] - pad;
            let hi = self.lo[a] + self.dims[a] as f64 * self.cell + pad;
            if dir[a] == 0.0 {
                if origin[a] < lo || origin[a] > hi {
                    return None;
                }
            } else {
                let (mut ta, mut tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 > t1 {
            return None;
        }
        let start = origin + dir * t0;
        let mut c = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            c[a] = (((start[a] - self.lo[a]) / self.cell).floor() as i64).clamp(0, self.dims[a] as i64 - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                let edge = self.lo[a] + (c[a] + 1) as f64 * self.cell;
                t_max[a] = t0 + (edge - start[a]) / dir[a];
                t_delta[a] = self.cell / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                let edge = self.lo[a] + c[a] as f64 * self.cell;
                t_max[a] = t0 + (edge - start[a]) / dir[a];
                t_delta[a] = -self.cell / dir[a];
            }
        }
        let mut best: Option<f64> = None;
        loop {
            let lin = (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize;
            for &id in &self.ids[self.starts[lin]..self.starts[lin + 1]] {
                if let Some(t) = ray_triangle(origin, dir, &self.tris[id as usize], eps) {
                    if t <= max_t && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
            }
            let exit = t_max[0].min(t_max[1]).min(t_max[2]);
            if let Some(b) = best {
                if b <= exit {
                    return Some(b);
                }
            }
            if exit > t1 {
                return best;
            }
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            c[a] += step[a];
            if c[a] < 0 || c[a] >= self.dims[a] as i64 {
                return best;
            }
            t_max[a] += t_delta[a];
        }
    }
}
