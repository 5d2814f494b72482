use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rom_core::grid::{build_grid, GridSpec, DEFORMATION_BOUND};
use rom_core::RomError;

#[test]
fn undeformed_unit_square() {
    let g = build_grid(8, 8, 1.0, 1.0, &[0.0]).unwrap();
    assert!(g.cell_areas.iter().all(|&a| a == 1.0 / 64.0));
    assert_eq!(g.total_area(), 1.0);
}

/// Stratified Monte-Carlo estimate of the mapped-domain area: one random
/// abscissa per stratum, integrating the local height.
fn monte_carlo_area(g: &GridSpec, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.lx / n as f64;
    let mut s = 0.0;
    for k in 0..n {
        let x = (k as f64 + rng.random::<f64>()) * w;
        let mut h = 1.0;
        for (m, mu) in g.deformation.iter().enumerate() {
            h += mu * ((m + 1) as f64 * std::f64::consts::PI * x / g.lx).sin().powi(2);
        }
        s += g.ly * h;
    }
    s * w
}

#[test]
fn deformed_area_matches_monte_carlo() {
    let g = build_grid(16, 16, 2.0, 1.0, &[0.3, -0.2]).unwrap();
    let mc = monte_carlo_area(&g, 1_000_000, 11);
    assert!((g.total_area() - mc).abs() / mc < 1e-4, "{} vs {}", g.total_area(), mc);
}

#[test]
fn out_of_box_and_folded_deformations_rejected() {
    assert!(matches!(
        build_grid(8, 8, 1.0, 1.0, &[DEFORMATION_BOUND + 0.01]),
        Err(RomError::DeformationOutOfRange { index: 0, .. })
    ));
    assert!(matches!(build_grid(8, 8, 1.0, 1.0, &[-0.5; 6]), Err(RomError::NonPositiveArea { .. })));
    assert!(GridSpec::new(8, 8, 1.0, 1.0, &[0.1], true).is_err());
    assert!(build_grid(8, 8, 0.0, 1.0, &[]).is_err());
}

#[test]
fn vertices_on_lid_follow_height() {
    let g = build_grid(8, 6, 1.5, 0.7, &[0.2]).unwrap();
    for i in 0..=8 {
        let (x, y) = g.vertex(i, 6);
        assert!((y - 0.7 * g.h(x)).abs() < 1e-15);
        assert_eq!(g.vertex(i, 0).1, 0.0);
    }
}

proptest! {
    #[test]
    fn areas_positive_and_sum_to_domain_area(
        mu in proptest::collection::vec(-0.5f64..0.5, 0..4),
        nx in 16usize..24,
        ny in 4usize..12,
        lx in 0.5f64..3.0,
        ly in 0.5f64..2.0,
    ) {
        match build_grid(nx, ny, lx, ly, &mu) {
            Ok(g) => {
                prop_assert!(g.cell_areas.iter().all(|&a| a > 0.0));
                // each sin^2 term averages to 1/2 over the period
                let exact = lx * ly * (1.0 + 0.5 * mu.iter().sum::<f64>());
                prop_assert!((g.total_area() - exact).abs() <= 1e-12 * exact);
            }
            Err(e) => prop_assert!(matches!(e, RomError::NonPositiveArea { .. }), "{e}"),
        }
    }
}
