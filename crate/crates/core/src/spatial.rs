//! Uniform-grid point index for nearest-neighbour and radius queries.
//!
//! Results are exact and ties are broken by the smaller point id, so every
//! query is deterministic regardless of cell size.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: ids of cell `c` are `ids[starts[c]..starts[c + 1]]`.
    starts: Vec<usize>,
    ids: Vec<u32>,
}

impl PointIndex {
    /// Build an index; `cell` is the grid pitch in the points' units and is
    /// enlarged if the grid would be unreasonably large for the point count.
    pub fn new(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let extent = hi - lo;
        let mut cell = if cell.is_finite() && cell > 0.0 { cell } else { 1.0 };
        let budget = (8 * points.len()).max(64) as f64;
        loop {
            let cells: f64 = (0..3).map(|a| (extent[a] / cell).floor() + 1.0).product();
            if cells <= budget {
                break;
            }
            cell *= 1.5;
        }
        let dims = [0, 1, 2].map(|a| (extent[a] / cell).floor() as usize + 1);
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let cell_of: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor() as usize).min(dims[a] - 1));
                (c[0] * dims[1] + c[1]) * dims[2] + c[2]
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut ids = vec![0u32; points.len()];
        for (id, &c) in cell_of.iter().enumerate() {
            ids[fill[c]] = id as u32;
            fill[c] += 1;
        }
        PointIndex {
            points,
            origin: lo,
            cell,
            dims,
            starts: counts,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: u32) -> Vector3<f64> {
        self.points[id as usize]
    }

    fn cell_coords(&self, q: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| ((q[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn cell_ids(&self, c: [i64; 3]) -> &[u32] {
        if c.iter().zip(&self.dims).any(|(&x, &d)| x < 0 || x >= d as i64) {
            return &[];
        }
        let lin = (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize;
        &self.ids[self.starts[lin]..self.starts[lin + 1]]
    }

    /// Visit every cell at Chebyshev distance exactly `r` from `c`.
    fn for_ring(&self, c: [i64; 3], r: i64, mut f: impl FnMut(&[u32])) {
        for di in -r..=r {
            for dj in -r..=r {
                let edge = di.abs() == r || dj.abs() == r;
                if edge {
                    for dk in -r..=r {
                        f(self.cell_ids([c[0] + di, c[1] + dj, c[2] + dk]));
                    }
                } else {
                    f(self.cell_ids([c[0] + di, c[1] + dj, c[2] - r]));
                    if r > 0 {
                        f(self.cell_ids([c[0] + di, c[1] + dj, c[2] + r]));
                    }
                }
            }
        }
    }

    /// Largest ring radius that can still contain points for a query in cell `c`.
    fn max_ring(&self, c: [i64; 3]) -> i64 {
        (0..3)
            .map(|a| c[a].abs().max((self.dims[a] as i64 - 1 - c[a]).abs()))
            .max()
            .unwrap_or(0)
    }

    /// The `k` nearest points as `(id, distance)`, sorted by distance then id.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(u32, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = self.cell_coords(q);
        let max_r = self.max_ring(c);
        let mut cand: Vec<(u32, f64)> = Vec::new();
        let mut r = 0;
        loop {
            self.for_ring(c, r, |ids| {
                cand.extend(ids.iter().map(|&id| (id, (self.points[id as usize] - q).norm())));
            });
            if cand.len() >= k {
                cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                cand.truncate(k);
                // Unvisited cells are at least r * cell away.
                if cand[k - 1].1 < r as f64 * self.cell {
                    break;
                }
            }
            if r >= max_r {
                break;
            }
            r += 1;
        }
        cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        cand.truncate(k);
        cand
    }

    /// Nearest point, ties broken by smaller id.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(u32, f64)> {
        self.k_nearest(q, 1).into_iter().next()
    }

    /// All points with distance ≤ `radius`, sorted by id.
    pub fn within_radius(&self, q: &Vector3<f64>, radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        if self.points.is_empty() || radius < 0.0 {
            return out;
        }
        let lo = self.cell_coords(&(q - Vector3::repeat(radius)));
        let hi = self.cell_coords(&(q + Vector3::repeat(radius)));
        let clamp = |v: i64, a: usize| v.clamp(0, self.dims[a] as i64 - 1);
        for i in clamp(lo[0], 0)..=clamp(hi[0], 0) {
            for j in clamp(lo[1], 1)..=clamp(hi[1], 1) {
                for k in clamp(lo[2], 2)..=clamp(hi[2], 2) {
                    for &id in self.cell_ids([i, j, k]) {
                        if (self.points[id as usize] - q).norm() <= radius {
                            out.push(id);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, (p - q).norm()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.random::<f64>() * 20.0, rng.random::<f64>() * 5.0, rng.random::<f64>()))
            .collect();
        for cell in [0.3, 1.0, 7.0] {
            let idx = PointIndex::new(pts.clone(), cell);
            for _ in 0..50 {
                let q = Vector3::new(rng.random::<f64>() * 25.0 - 2.0, rng.random::<f64>() * 5.0, 0.5);
                assert_eq!(idx.k_nearest(&q, 16), brute_knn(&pts, &q, 16));
                let r = rng.random::<f64>() * 3.0;
                let mut expect: Vec<u32> = (0..pts.len() as u32)
                    .filter(|&i| (pts[i as usize] - q).norm() <= r)
                    .collect();
                expect.sort_unstable();
                assert_eq!(idx.within_radius(&q, r), expect);
            }
        }
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let pts = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let idx = PointIndex::new(pts, 0.25);
        assert_eq!(idx.nearest(&Vector3::zeros()).unwrap().0, 0);
        let ids: Vec<u32> = idx.k_nearest(&Vector3::zeros(), 3).iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn empty_and_oversized_k() {
        let idx = PointIndex::new(Vec::new(), 1.0);
        assert!(idx.nearest(&Vector3::zeros()).is_none());
        let idx = PointIndex::new(vec![Vector3::zeros(), Vector3::repeat(1.0)], 1.0);
        assert_eq!(idx.k_nearest(&Vector3::zeros(), 10).len(), 2);
    }
}
