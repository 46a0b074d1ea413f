use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rzoro::linalg::{min_eigenvalue, pack_symmetric, packed_dim, unpack_symmetric};
use rzoro::tube::{propagate_ellipsoids, tube_lqr_objective, StageWeight, StageWeights};
use rzoro::*;

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> Mat {
    let m = gauss(rng, n, rank);
    &m * m.transpose()
}

struct Instance {
    sens: SensitivityBundle,
    gains: Vec<Mat>,
    w: Vec<Mat>,
    p0: Mat,
    weights: StageWeights,
}

fn instance(seed: u64, nx: usize, nu: usize, n: usize, nh: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<Mat> = (0..n).map(|_| psd(&mut rng, nx, nx)).collect();
    let stages = (0..n)
        .map(|k| StageSensitivity {
            a: gauss(&mut rng, nx, nx) * 0.7,
            b: gauss(&mut rng, nx, nu),
            gamma: Mat::identity(nx, nx),
            w_eff: w[k].clone(),
            h: Vec64::zeros(nh),
            hx: gauss(&mut rng, nh, nx),
            hu: gauss(&mut rng, nh, nu),
        })
        .collect();
    let sens = SensitivityBundle {
        stages,
        terminal_h: Vec64::zeros(nh),
        terminal_hx: gauss(&mut rng, nh, nx),
    };
    let gains = (0..n).map(|_| gauss(&mut rng, nu, nx) * 0.5).collect();
    let weights = StageWeights {
        stages: (0..n)
            .map(|_| StageWeight {
                q: psd(&mut rng, nx, nx),
                s: Mat::zeros(nu, nx),
                r: psd(&mut rng, nu, nu) + Mat::identity(nu, nu) * 0.1,
            })
            .collect(),
        terminal: psd(&mut rng, nx, nx),
    };
    Instance {
        sens,
        gains,
        w,
        p0: psd(&mut rng, nx, nx),
        weights,
    }
}

fn scaled_noise(inst: &Instance, factor: f64) -> SensitivityBundle {
    let mut sens = inst.sens.clone();
    for (st, w) in sens.stages.iter_mut().zip(&inst.w) {
        st.w_eff = w * factor;
    }
    sens
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_packing_round_trips(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = psd(&mut rng, n, n);
        let v = pack_symmetric(&p);
        prop_assert_eq!(v.len(), packed_dim(n));
        prop_assert_eq!(unpack_symmetric(&v, n), p);
    }

    #[test]
    fn tube_shapes_stay_symmetric_psd(seed in any::<u64>(), nx in 1usize..4, nu in 1usize..3, n in 1usize..6) {
        let inst = instance(seed, nx, nu, n, 2);
        let p = propagate_ellipsoids(&inst.sens, &inst.gains, &inst.p0, 0.7).unwrap();
        prop_assert_eq!(p.len(), n + 1);
        for pk in &p {
            prop_assert_eq!(pk, &pk.transpose());
            prop_assert!(min_eigenvalue(pk) >= -1e-10 * (1.0 + pk.amax()));
        }
        let b = compute_backoffs(&inst.sens, &p, &inst.gains, 1.0).unwrap();
        prop_assert!(b.iter().flat_map(|v| v.iter()).all(|x| *x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn larger_noise_gives_larger_tubes(seed in any::<u64>(), nx in 1usize..4, n in 1usize..6, extra in 0.0f64..2.0) {
        let inst = instance(seed, nx, 1, n, 2);
        let small = propagate_ellipsoids(&inst.sens, &inst.gains, &inst.p0, 1.0).unwrap();
        let big = propagate_ellipsoids(&scaled_noise(&inst, 1.0 + extra), &inst.gains, &inst.p0, 1.0).unwrap();
        for (s, b) in small.iter().zip(&big) {
            prop_assert!(min_eigenvalue(&(b - s)) >= -1e-9 * (1.0 + b.amax()));
        }
    }

    #[test]
    fn backoffs_scale_with_sigma_and_gamma(seed in any::<u64>(), nx in 1usize..4, n in 1usize..5,
                                          sigma in 0.01f64..3.0, gamma in 0.1f64..4.0) {
        let inst = instance(seed, nx, 1, n, 3);
        let p1 = propagate_ellipsoids(&inst.sens, &inst.gains, &inst.p0, 1.0).unwrap();
        let b1 = compute_backoffs(&inst.sens, &p1, &inst.gains, 1.0).unwrap();
        let ps = propagate_ellipsoids(&scaled_noise(&inst, sigma * sigma), &inst.gains, &inst.p0, sigma).unwrap();
        let bs = compute_backoffs(&inst.sens, &ps, &inst.gains, gamma).unwrap();
        for (x, y) in b1.iter().flat_map(|v| v.iter()).zip(bs.iter().flat_map(|v| v.iter())) {
            prop_assert!((y - gamma * sigma * x).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn riccati_gains_beat_perturbed_gains(seed in any::<u64>(), nx in 1usize..4, nu in 1usize..3, n in 1usize..4) {
        let inst = instance(seed, nx, nu, n, 0);
        let (k, value) = riccati_recursion(&inst.sens, &inst.weights).unwrap();
        let cost = |g: &[Mat]| {
            let p = propagate_ellipsoids(&inst.sens, g, &inst.p0, 1.0).unwrap();
            tube_lqr_objective(&p, g, &inst.weights)
        };
        let best = cost(&k);
        for v in &value.v {
            prop_assert!(min_eigenvalue(v) >= -1e-9 * (1.0 + v.amax()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..200 {
            let scale = 10f64.powf(rng.random_range(-4.0..0.5));
            let trial: Vec<Mat> = k.iter().map(|kk| kk + gauss(&mut rng, nu, nx) * scale).collect();
            prop_assert!(cost(&trial) >= best - 1e-9 * (1.0 + best.abs()));
        }
    }

    #[test]
    fn riccati_gains_ignore_the_noise(seed in any::<u64>(), nx in 1usize..4, n in 1usize..4, factor in 0.0f64..5.0) {
        let inst = instance(seed, nx, 1, n, 1);
        let (k1, _) = riccati_recursion(&inst.sens, &inst.weights).unwrap();
        let (k2, _) = riccati_recursion(&scaled_noise(&inst, factor), &inst.weights).unwrap();
        prop_assert_eq!(k1, k2);
    }
}
