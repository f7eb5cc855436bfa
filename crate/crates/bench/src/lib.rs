//! Fixtures shared by the benchmarks.

use kneemorph::phantom::{generate, Phantom, PhantomKind, PhantomSpec};

/// Default phantom of `kind` with seed 0, optionally punched.
pub fn phantom(kind: PhantomKind, defect: Option<f64>) -> Phantom {
    let mut spec = PhantomSpec::new(kind);
    if let Some(f) = defect {
        spec = spec.with_defect(f);
    }
    generate(&spec, 0).expect("default phantom specs are valid")
}
