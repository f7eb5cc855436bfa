use nalgebra::Matrix3;

use super::{Geometry, Volume};

/// For each index axis: the world axis it maps to and whether it runs backwards.
fn axis_assignment(direction: &Matrix3<f64>) -> ([usize; 3], [bool; 3]) {
    let mut world_of = [usize::MAX; 3];
    let mut taken = [false; 3];
    // Greedy on the largest absolute cosine first keeps oblique grids a permutation.
    let mut pairs: Vec<(f64, usize, usize)> = (0..3)
        .flat_map(|a| (0..3).map(move |w| (a, w)))
        .map(|(a, w)| (direction[(w, a)].abs(), a, w))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    for (_, a, w) in pairs {
        if world_of[a] == usize::MAX && !taken[w] {
            world_of[a] = w;
            taken[w] = true;
        }
    }
    let flipped = [0, 1, 2].map(|a| direction[(world_of[a], a)] < 0.0);
    (world_of, flipped)
}

/// Permute and flip voxel axes so index axes run right, anterior, superior.
///
/// The voxel-to-world map is preserved for every voxel. For axis-aligned
/// inputs the resulting direction is the identity; oblique inputs end up
/// with a positive dominant diagonal.
pub fn reorient_ras<T: Copy>(vol: &Volume<T>) -> Volume<T> {
    let g = &vol.geometry;
    let (world_of, flipped) = axis_assignment(&g.direction);
    if world_of == [0, 1, 2] && flipped == [false; 3] {
        return vol.clone();
    }

    let mut dims = [0; 3];
    let mut spacing = [0.0; 3];
    let mut direction = Matrix3::zeros();
    let mut origin = g.origin_vec();
    for a in 0..3 {
        let w = world_of[a];
        dims[w] = g.dims[a];
        spacing[w] = g.spacing[a];
        let col = g.direction.column(a).into_owned();
        if flipped[a] {
            origin += col * g.spacing[a] * (g.dims[a] as f64 - 1.0);
            direction.set_column(w, &(-col));
        } else {
            direction.set_column(w, &col);
        }
    }
    let out_geom = Geometry {
        dims,
        spacing,
        origin: [origin.x, origin.y, origin.z],
        direction,
    };

    let mut data = Vec::with_capacity(g.len());
    for p0 in 0..dims[0] {
        for p1 in 0..dims[1] {
            for p2 in 0..dims[2] {
                let p = [p0, p1, p2];
                let mut old = [0usize; 3];
                for a in 0..3 {
                    let v = p[world_of[a]];
                    old[a] = if flipped[a] { g.dims[a] - 1 - v } else { v };
                }
                data.push(vol.get(old[0], old[1], old[2]));
            }
        }
    }
    Volume {
        geometry: out_geom,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn numbered(g: Geometry) -> Volume<u32> {
        let n = g.len() as u32;
        Volume::new(g, (0..n).collect()).unwrap()
    }

    /// Every voxel value must sit at the same world position before and after.
    fn assert_world_preserved(before: &Volume<u32>, after: &Volume<u32>) {
        let mut pos_after = vec![None; before.data.len()];
        for idx in 0..after.data.len() {
            pos_after[after.data[idx] as usize] = Some(after.geometry.voxel_center(idx));
        }
        for idx in 0..before.data.len() {
            let w0 = before.geometry.voxel_center(idx);
            let w1 = pos_after[before.data[idx] as usize].unwrap();
            assert!((w0 - w1).norm() <= 1e-9, "voxel {idx}: {w0:?} vs {w1:?}");
        }
    }

    #[test]
    fn ras_is_fixed_point() {
        let v = numbered(Geometry::axis_aligned([3, 4, 5], [1.0, 2.0, 3.0]));
        assert_eq!(reorient_ras(&v), v);
    }

    #[test]
    fn lps_flips_first_two_axes() {
        let dir = Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, -1.0, 1.0));
        let g = Geometry::new([4, 5, 6], [0.7, 0.36, 0.36], [10.0, 20.0, 30.0], dir).unwrap();
        let v = numbered(g);
        let r = reorient_ras(&v);
        assert_eq!(r.geometry.direction, Matrix3::identity());
        assert_eq!(r.dims(), [4, 5, 6]);
        // Axis 0 and 1 reversed, axis 2 untouched.
        assert_eq!(r.get(0, 0, 0), v.get(3, 4, 0));
        assert_eq!(r.get(3, 4, 5), v.get(0, 0, 5));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let idx = rng.random_range(0..v.data.len());
            let w0 = v.geometry.voxel_center(idx);
            let pos = r.data.iter().position(|&x| x == v.data[idx]).unwrap();
            let w1 = r.geometry.voxel_center(pos);
            assert!((w0 - w1).norm() <= 1e-9);
        }
        assert_world_preserved(&v, &r);
    }

    #[test]
    fn sar_axis_order_is_permuted() {
        // Index axis 0 points superior, 1 anterior, 2 right.
        let dir = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let g = Geometry::new([2, 3, 4], [1.0, 2.0, 3.0], [0.0; 3], dir).unwrap();
        let v = numbered(g);
        let r = reorient_ras(&v);
        assert_eq!(r.dims(), [4, 3, 2]);
        assert_eq!(r.geometry.spacing, [3.0, 2.0, 1.0]);
        assert_eq!(r.geometry.direction, Matrix3::identity());
        assert_eq!(r.get(1, 2, 0), v.get(0, 2, 1));
        assert_world_preserved(&v, &r);
    }

    #[test]
    fn oblique_grid_keeps_positions() {
        let (s, c) = (0.6f64, 0.8f64);
        let dir = Matrix3::new(-c, 0.0, s, 0.0, -1.0, 0.0, s, 0.0, c);
        let g = Geometry::new([3, 4, 2], [1.0, 0.5, 2.0], [1.0, 2.0, 3.0], dir).unwrap();
        let v = numbered(g);
        let r = reorient_ras(&v);
        for a in 0..3 {
            assert!(r.geometry.direction[(a, a)] > 0.0);
        }
        assert_world_preserved(&v, &r);
    }
}
