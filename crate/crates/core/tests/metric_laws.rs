use kneemorph::metrics::{cv_rmsd, dsc, lncc_image, mse_image, pearson, phr, rmsd, MeasurementSeries};
use kneemorph::{BinaryMask, Geometry, Volume};
use proptest::prelude::*;

fn paired(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0..100.0f64, n),
            prop::collection::vec(-100.0..100.0f64, n),
        )
    })
}

fn masks() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    ([2usize..6, 2usize..6, 2usize..6]).prop_flat_map(|d| {
        let n = d[0] * d[1] * d[2];
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(a, b)| {
            let g = Geometry::axis_aligned(d, [1.0; 3]);
            (Volume::new(g.clone(), a).unwrap(), Volume::new(g, b).unwrap())
        })
    })
}

fn images() -> impl Strategy<Value = (Volume<f64>, Volume<f64>)> {
    ([2usize..6, 2usize..6, 2usize..6]).prop_flat_map(|d| {
        let n = d[0] * d[1] * d[2];
        (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-5.0..5.0f64, n)).prop_map(move |(a, b)| {
            let g = Geometry::axis_aligned(d, [1.0; 3]);
            (Volume::new(g.clone(), a).unwrap(), Volume::new(g, b).unwrap())
        })
    })
}

proptest! {
    #[test]
    fn pearson_is_bounded_symmetric_and_affine_invariant(
        (x, y) in paired(3..40),
        a in 0.1..10.0f64,
        b in -50.0..50.0f64,
    ) {
        let s = MeasurementSeries::new(x.clone(), y.clone()).unwrap();
        let Ok(r) = pearson(&s) else { return Ok(()); };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let swapped = pearson(&MeasurementSeries::new(y.clone(), x.clone()).unwrap()).unwrap();
        prop_assert!((r - swapped).abs() <= 1e-12);
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r2 = pearson(&MeasurementSeries::new(moved, y).unwrap()).unwrap();
        prop_assert!((r - r2).abs() <= 1e-12);
    }

    #[test]
    fn rmsd_is_a_symmetric_nonnegative_distance((x, y) in paired(2..40)) {
        let s = MeasurementSeries::new(x.clone(), y.clone()).unwrap();
        let d = rmsd(&s);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(rmsd(&MeasurementSeries::new(x.clone(), x.clone()).unwrap()), 0.0);
        prop_assert!((d - rmsd(&MeasurementSeries::new(y, x).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn cv_rmsd_scales_with_the_reference((x, y) in paired(2..40), k in 0.5..4.0f64) {
        let y: Vec<f64> = y.iter().map(|v| v.abs() + 1.0).collect();
        let s = MeasurementSeries::new(x.clone(), y.clone()).unwrap();
        let c = cv_rmsd(&s).unwrap();
        let scaled = MeasurementSeries::new(x.iter().map(|v| v * k).collect(), y.iter().map(|v| v * k).collect()).unwrap();
        prop_assert!((c - cv_rmsd(&scaled).unwrap()).abs() <= 1e-12 * c.abs().max(1.0));
    }

    #[test]
    fn phr_is_a_monotone_fraction((q, g) in paired(1..40), t1 in 0.0..100.0f64, dt in 0.0..100.0f64) {
        let lo = phr(&q, &g, t1).unwrap();
        let hi = phr(&q, &g, t1 + dt).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(lo <= hi);
        prop_assert_eq!(phr(&q, &q, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn dsc_is_symmetric_and_bounded((a, b) in masks()) {
        let d = dsc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn image_similarities_are_symmetric((a, b) in images(), w in prop::sample::select(vec![1usize, 3, 5])) {
        prop_assert!((mse_image(&a, &b).unwrap() - mse_image(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(mse_image(&a, &a).unwrap(), 0.0);
        let l = lncc_image(&a, &b, w).unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&l));
        prop_assert!((l - lncc_image(&b, &a, w).unwrap()).abs() <= 1e-9);
    }
}
