use std::sync::Arc;

use kneemorph::morphology::{boundary, inner_surface_voxels, outer_surface_voxels, Connectivity, GapFill};
use kneemorph::phantom::{generate, PhantomKind, PhantomSpec};
use kneemorph::surface::{
    mesh_from_mask, restricted_dilate, surface_close, surface_dilate, surface_erode, PatchBoundaryRestriction,
    Surface, SurfacePatch,
};
use kneemorph::{BinaryMask, Geometry, Volume};
use proptest::prelude::*;

fn block_mesh() -> Arc<Surface> {
    let g = Geometry::axis_aligned([14, 14, 6], [1.0; 3]);
    let mut m: BinaryMask = Volume::filled(g, false);
    for i in 1..13 {
        for j in 1..13 {
            for k in 1..5 {
                m.set(i, j, k, true);
            }
        }
    }
    Arc::new(mesh_from_mask(&m).unwrap())
}

fn patch(s: &Arc<Surface>, flags: &[bool]) -> SurfacePatch {
    SurfacePatch::from_flags(s, flags[..s.n_vertices()].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dilation_and_erosion_are_monotone_and_ordered(
        a in prop::collection::vec(prop::bool::weighted(0.3), 2000),
        b in prop::collection::vec(prop::bool::weighted(0.3), 2000),
        n in 0usize..4,
    ) {
        let s = block_mesh();
        let full = SurfacePatch::full(&s);
        let pa = patch(&s, &a);
        let pab = pa.union(&patch(&s, &b));
        let da = surface_dilate(&pa, &full, n);
        prop_assert!(pa.is_subset_of(&da));
        prop_assert!(da.is_subset_of(&surface_dilate(&pab, &full, n)));
        let ea = surface_erode(&pa, n);
        prop_assert!(ea.is_subset_of(&pa));
        prop_assert!(ea.is_subset_of(&surface_erode(&pab, n)));
        // Erosion undoes dilation from inside: ε(δ(P)) ⊇ P.
        prop_assert!(pa.is_subset_of(&surface_erode(&da, n)));
        let closed = surface_close(&pa, &full, n, n);
        prop_assert!(pa.is_subset_of(&closed));
        prop_assert_eq!(surface_close(&closed, &full, n, n), closed);
    }

    #[test]
    fn dilation_stays_in_its_domain(
        a in prop::collection::vec(prop::bool::weighted(0.1), 2000),
        d in prop::collection::vec(prop::bool::weighted(0.6), 2000),
        n in 1usize..5,
    ) {
        let s = block_mesh();
        let domain = patch(&s, &d);
        let seed = patch(&s, &a).intersection(&domain);
        let grown = surface_dilate(&seed, &domain, n);
        prop_assert!(grown.is_subset_of(&domain));
        let limited = restricted_dilate(&seed, &domain, &PatchBoundaryRestriction::new(SurfacePatch::empty(&s)));
        prop_assert!(grown.is_subset_of(&limited));
    }

    #[test]
    fn restricted_dilation_never_crosses_a_ring(cx in 3usize..11, cy in 3usize..11, r in 1usize..3) {
        let s = block_mesh();
        let full = SurfacePatch::full(&s);
        let top: Vec<u32> = (0..s.n_vertices() as u32).filter(|&v| s.vertices[v as usize].z == 4.5).collect();
        let inside_ids = top.iter().copied().filter(|&v| {
            let p = s.vertices[v as usize];
            (p.x - cx as f64 - 0.5).abs() <= r as f64 && (p.y - cy as f64 - 0.5).abs() <= r as f64
        });
        let inside = SurfacePatch::from_vertices(&s, inside_ids).unwrap();
        let ring = surface_dilate(&inside, &full, 1).difference(&inside);
        let seed = SurfacePatch::from_vertices(&s, [inside.members()[0]]).unwrap();
        let grown = restricted_dilate(&seed, &full, &PatchBoundaryRestriction::new(ring.clone()));
        prop_assert!(grown.intersection(&ring).is_empty());
        prop_assert!(grown.is_subset_of(&inside));
    }

    #[test]
    fn inner_and_outer_surfaces_partition_the_boundary(seed in 0u64..500, kind in 0usize..4) {
        let kinds = [PhantomKind::Slab, PhantomKind::CuboidDefect, PhantomKind::Shell, PhantomKind::TibialDisc];
        let ph = generate(&PhantomSpec::new(kinds[kind]), seed).unwrap();
        let (cart, bone) = (ph.cart(), ph.bone());
        let b = boundary(&cart, Connectivity::Face6);
        let v_in = inner_surface_voxels(&cart, &bone, Connectivity::Face6, GapFill::default()).unwrap();
        let v_out = outer_surface_voxels(&cart, &v_in, Connectivity::Face6).unwrap();
        prop_assert!(!v_in.intersects(&v_out));
        prop_assert_eq!(v_in.union(&v_out), b);
        prop_assert!(v_in.difference(&cart).is_empty_mask());
    }
}
