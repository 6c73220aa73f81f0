use num_complex::Complex64;
use omsim::fock::{partial_trace, read_snapshot, write_snapshot, CMatrix, DensityMatrix, FockSpace};
use omsim::observables::{covariance, occupations, wigner, GridSpec};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_state(space: &FockSpace, seed: u64) -> DensityMatrix {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = space.dim();
    let a = CMatrix::from_fn(n, n, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let m = &a * a.adjoint();
    let tr = m.trace();
    DensityMatrix::new(space, m / tr).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quadratures_respect_uncertainty(seed in any::<u64>(), c1 in 2usize..6, c2 in 2usize..6) {
        let sp = FockSpace::new(&[c1, c2]).unwrap();
        let rho = random_state(&sp, seed);
        let cov = covariance(&rho).unwrap();
        let top = rho.top_level_populations();
        for (j, c) in [c1, c2].into_iter().enumerate() {
            // X = (b + b^dag)/2, and on a truncated ladder [b, b^dag] = 1 - (c+1)|c><c|
            let bound = (1.0 - (c + 1) as f64 * top[j]).powi(2) / 16.0;
            prop_assert!(cov.mode_determinant(j) >= bound - 1e-12);
            prop_assert!(cov.uncertainty_product(j) >= bound - 1e-12);
        }
    }

    #[test]
    fn partial_trace_keeps_local_occupations(seed in any::<u64>(), c1 in 2usize..5, c2 in 2usize..5) {
        let sp = FockSpace::new(&[c1, c2]).unwrap();
        let rho = random_state(&sp, seed);
        let n = occupations(&rho);
        for mode in 0..2 {
            let reduced = partial_trace(&rho, &[mode]).unwrap();
            prop_assert!((reduced.trace().re - 1.0).abs() < 1e-12);
            prop_assert!((occupations(&reduced)[0] - n[mode]).abs() < 1e-12);
        }
    }

    #[test]
    fn wigner_marginal_is_a_density(seed in any::<u64>(), cutoff in 2usize..5) {
        let sp = FockSpace::new(&[cutoff]).unwrap();
        let w = wigner(&random_state(&sp, seed), &GridSpec::square(5.0, 81)).unwrap();
        prop_assert!((w.integral() - 1.0).abs() < 1e-3, "integral {}", w.integral());
        prop_assert!(w.marginal_x().iter().all(|&m| m > -1e-9));
    }

    #[test]
    fn snapshots_round_trip(seed in any::<u64>(), c1 in 2usize..5, c2 in 2usize..5, t in 0.0f64..1e4) {
        let sp = FockSpace::new(&[c1, c2]).unwrap();
        let rho = random_state(&sp, seed);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &rho, t, "mechanical-rotating").unwrap();
        let (header, back) = read_snapshot(&buf[..]).unwrap();
        prop_assert_eq!(header.cutoffs, vec![c1, c2]);
        prop_assert_eq!(header.time, t);
        prop_assert_eq!(back.matrix(), rho.matrix());
    }
}
