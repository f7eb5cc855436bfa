use kneemorph::warp::{apply_field, integrate_svf, negate, DeformationField, Interpolation, VelocityField};
use kneemorph::{Geometry, Volume};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

type V3 = Vector3<f64>;

fn grid(n: usize) -> Geometry {
    let o = -(n as f64 - 1.0) / 2.0;
    Geometry::new([n; 3], [1.0; 3], [o; 3], Matrix3::identity()).unwrap()
}

fn expm(a: &Matrix3<f64>) -> Matrix3<f64> {
    let (mut term, mut sum) = (Matrix3::identity(), Matrix3::identity());
    for k in 1..40 {
        term = term * a / k as f64;
        sum += term;
    }
    sum
}

/// v(x) = Σ a_i sin(k_i · x + φ_i) with wavelengths around the grid size.
fn wavy(g: &Geometry, waves: &[([f64; 3], [f64; 3], f64)]) -> VelocityField {
    let n = g.dims[0] as f64;
    let vectors = (0..g.len())
        .map(|i| {
            let x = g.voxel_center(i);
            waves
                .iter()
                .map(|(k, a, ph)| {
                    let k = V3::from(*k).normalize() * (std::f64::consts::TAU / n);
                    V3::from(*a) * (k.dot(&x) + ph).sin()
                })
                .sum()
        })
        .collect();
    VelocityField::new(g.clone(), vectors).unwrap()
}

fn interior(g: &Geometry, margin: usize) -> impl Iterator<Item = usize> + '_ {
    (0..g.len()).filter(move |&i| {
        let c = g.coords(i);
        (0..3).all(|a| c[a] >= margin && c[a] + margin < g.dims[a])
    })
}

fn unit3() -> impl Strategy<Value = [f64; 3]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64].prop_filter("nonzero", |v| V3::from(*v).norm() > 0.2)
}

fn waves() -> impl Strategy<Value = Vec<([f64; 3], [f64; 3], f64)>> {
    prop::collection::vec((unit3(), [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64], 0.0..std::f64::consts::TAU), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constant_velocity_is_a_translation(c in [-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64], steps in 1u32..9) {
        let g = grid(8);
        let c = V3::from(c);
        let f = integrate_svf(&VelocityField::new(g.clone(), vec![c; g.len()]).unwrap(), steps).unwrap();
        for u in &f.displacement {
            prop_assert!((u - c).norm() <= 1e-5);
        }
    }

    #[test]
    fn linear_velocity_matches_the_matrix_exponential(m in prop::array::uniform9(-1.0..1.0f64), scale in 0.01..0.1f64) {
        let g = grid(16);
        let mut a = Matrix3::from_row_slice(&m);
        if a.norm() < 1e-6 {
            return Ok(());
        }
        a *= scale / a.norm();
        let v = VelocityField::new(g.clone(), (0..g.len()).map(|i| a * g.voxel_center(i)).collect()).unwrap();
        let f = integrate_svf(&v, 7).unwrap();
        let e = expm(&a) - Matrix3::identity();
        for i in interior(&g, 3) {
            prop_assert!((f.displacement[i] - e * g.voxel_center(i)).norm() <= 1e-3);
        }
    }

    #[test]
    fn opposite_velocities_give_inverse_maps(w in waves(), amp in 0.2..2.0f64) {
        let g = grid(24);
        let scaled: Vec<_> = w.iter().map(|(k, a, p)| (*k, a.map(|x| x * amp), *p)).collect();
        let v = wavy(&g, &scaled);
        let fwd = integrate_svf(&v, 7).unwrap();
        let inv = integrate_svf(&negate(&v), 7).unwrap();
        let id = fwd.compose(&inv).unwrap();
        for i in interior(&g, 5) {
            prop_assert!(id.displacement[i].norm() <= 0.5);
        }
        let det = fwd.jacobian_determinants();
        let inner: Vec<usize> = interior(&g, 1).collect();
        let positive = inner.iter().filter(|&&i| det[i] > 0.0).count();
        prop_assert!(positive as f64 >= 0.999 * inner.len() as f64);
    }

    #[test]
    fn composition_is_associative(a in waves(), b in waves(), c in waves()) {
        let g = grid(24);
        let f: Vec<DeformationField> = [a, b, c].iter().map(|w| integrate_svf(&wavy(&g, w), 7).unwrap()).collect();
        let left = f[0].compose(&f[1]).unwrap().compose(&f[2]).unwrap();
        let right = f[0].compose(&f[1].compose(&f[2]).unwrap()).unwrap();
        for i in interior(&g, 5) {
            prop_assert!((left.displacement[i] - right.displacement[i]).norm() <= 0.1);
        }
        let id = DeformationField::identity(g.clone());
        prop_assert_eq!(&f[0].compose(&id).unwrap().displacement, &f[0].displacement);
        prop_assert_eq!(&id.compose(&f[0]).unwrap().displacement, &f[0].displacement);
    }

    #[test]
    fn identity_warp_leaves_images_unchanged(data in prop::collection::vec(-10.0..10.0f64, 216)) {
        let g = grid(6);
        let img = Volume::new(g.clone(), data).unwrap();
        let id = DeformationField::identity(g);
        for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
            prop_assert_eq!(&apply_field(&img, &id, interp).unwrap().data, &img.data);
        }
    }
}
