use polymer_core::endpoint::{evolve_density, integer_part_law, line_evolve, LineStart};
use polymer_core::estimators::{kernel_check, Engine, SimConfig};
use polymer_core::gibbs::{conditional_cf, sample_path, BoundaryCondition, WindingLaw};
use polymer_core::noise::NoiseGrid;
use polymer_core::rng::stream_rng;
use polymer_core::scalar::log_sum_exp;
use polymer_core::stationary::{bridge_density, sample_bridge_scaled};
use polymer_core::GridSpec;
use proptest::prelude::*;

fn small(beta: f64) -> GridSpec {
    GridSpec::new(8, 100, 3, 1, beta).unwrap()
}

fn engine(beta: f64, seed: u64) -> Engine<f64> {
    Engine::new(SimConfig::new(small(beta), seed, 1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn winding_law_is_a_distribution(weights in prop::collection::vec(1e-12f64..10.0, 5), t in -10.0f64..10.0) {
        let law = WindingLaw::from_weights(&weights).unwrap();
        prop_assert!((law.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((law.cf(0.0).re - 1.0).abs() < 1e-12);
        prop_assert!(law.cf(t).norm() <= 1.0 + 1e-12);
        prop_assert!(law.mean().abs() <= 2.0);
        prop_assert!(law.variance() >= -1e-12);
    }

    #[test]
    fn noise_is_periodic_in_space(seed in 0u64..1000, step in 0usize..100, cell in -40i64..40, wraps in -3i64..3) {
        let g = NoiseGrid::<f64>::with_stream(&small(1.0), seed, 0, 1).unwrap();
        let slab = g.slab(1).unwrap();
        prop_assert_eq!(slab.tiled_value(step, cell), slab.tiled_value(step, cell + 8 * wraps));
    }

    #[test]
    fn evolved_densities_stay_normalized(seed in 0u64..1000, beta in 0.0f64..2.0, t in 1usize..4, start in 0usize..8) {
        let e = engine(beta, seed);
        let units = e.units(0, t).unwrap();
        for nu in [BoundaryCondition::Cell(start), BoundaryCondition::Lebesgue, BoundaryCondition::Origin] {
            let d = evolve_density(&units, &nu).unwrap();
            prop_assert!((d.mass() - 1.0).abs() < 1e-12);
            prop_assert!(d.inf() > 0.0);
        }
    }

    #[test]
    fn line_evolution_conserves_mass(seed in 0u64..1000, beta in 0.0f64..1.5, n in 1usize..4) {
        let kernels = engine(beta, seed).winding_kernels(0, n).unwrap();
        let d = line_evolve(&kernels, LineStart::Origin, None).unwrap();
        prop_assert!((d.total_mass() - 1.0).abs() < 1e-12);
        let law = integer_part_law(&d);
        prop_assert!((law.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(law.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn periodization_holds_for_any_seed(seed in 0u64..10_000, beta in 0.0f64..1.5) {
        // At M = 8 strong noise drives some entries below zero, where they are clamped.
        let spec = GridSpec::new(32, 100, 4, 1, beta).unwrap();
        let rows = kernel_check::<f64>(&spec, &[seed], &[beta]).unwrap();
        prop_assert!(rows[0].periodization_error < 1e-10, "{}", rows[0].periodization_error);
        prop_assert!(rows[0].min_entry > 0.0);
    }

    #[test]
    fn sampled_paths_respect_point_boundaries(seed in 0u64..1000, beta in 0.0f64..1.5, a in 0usize..8, b in 0usize..8) {
        let e = engine(beta, seed);
        let units = e.units(0, 3).unwrap();
        let mut rng = stream_rng(seed, 1);
        let p = sample_path(&units, &BoundaryCondition::Cell(b), &BoundaryCondition::Cell(a), &mut rng).unwrap();
        prop_assert_eq!(p.cells.len(), 4);
        prop_assert_eq!(p.cells[0], a);
        prop_assert_eq!(p.cells[3], b);
        prop_assert_eq!(p.offset, 0);
        prop_assert!(p.log_partition.is_finite());
        for theta in [0.5, 1.0, 2.0] {
            prop_assert!(conditional_cf(&p, &units, theta, 1..=3).unwrap().norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn origin_start_winds_back_from_last_cell(seed in 0u64..1000) {
        let e = engine(0.5, seed);
        let units = e.units(0, 2).unwrap();
        let mut rng = stream_rng(seed, 2);
        let p = sample_path(&units, &BoundaryCondition::Lebesgue, &BoundaryCondition::Origin, &mut rng).unwrap();
        prop_assert!(p.cells[0] == 0 || p.cells[0] == 7);
        prop_assert_eq!(p.offset, if p.cells[0] == 7 { -1 } else { 0 });
    }

    #[test]
    fn bridges_are_pinned_and_densities_normalized(seed in 0u64..1000, cells in 8usize..64, scale in 0.0f64..3.0) {
        let mut rng = stream_rng(seed, 3);
        let b = sample_bridge_scaled(&mut rng, cells, 1.0 / cells as f64, scale);
        prop_assert_eq!(b.values().len(), cells + 1);
        prop_assert_eq!(b.at(0), 0.0);
        prop_assert!(b.at(cells).abs() < 1e-12);
        let d = bridge_density::<f64>(&b);
        prop_assert!((d.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_agrees_with_direct_sum(xs in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - direct).abs() < 1e-12);
    }
}
