use faith_core::features::{compute_features, FeatureConfig};
use faith_core::mce::{mce_threshold, Histogram};
use faith_core::segmenter::{segment, SegmentOptions, ThresholdRule};
use faith_core::solver::{
    grad_f, objective, project_polytope, soft_threshold, solve_faith, Polytope, SolverParams,
};
use faith_core::tuning::{grid_search, lambda_path, CvSettings, HyperGrid};
use faith_core::volume::{plan_slabs, Environment, Slab, Volume, VoxelSource};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn env_strategy(max: u16) -> impl Strategy<Value = (usize, Vec<u16>)> {
    prop_oneof![Just(3usize), Just(5usize)].prop_flat_map(move |k| {
        (Just(k), prop::collection::vec(0..=max, k * k * k))
    })
}

/// The 48 signed axis permutations acting on window coordinates.
fn cube_symmetries() -> Vec<([usize; 3], [bool; 3])> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in perms {
        for flips in 0..8u8 {
            out.push((p, [flips & 1 != 0, flips & 2 != 0, flips & 4 != 0]));
        }
    }
    out
}

fn transform(k: usize, values: &[u16], perm: [usize; 3], flip: [bool; 3]) -> Vec<u16> {
    let mut out = vec![0; values.len()];
    for z in 0..k {
        for y in 0..k {
            for x in 0..k {
                let src = [x, y, z];
                let mut dst = [0; 3];
                for axis in 0..3 {
                    let c = src[perm[axis]];
                    dst[axis] = if flip[axis] { k - 1 - c } else { c };
                }
                out[dst[0] + k * (dst[1] + k * dst[2])] = values[x + k * (y + k * z)];
            }
        }
    }
    out
}

fn geometric(k: usize, values: Vec<u16>, w: u32) -> Vec<f64> {
    let env = Environment::from_values(k, values, w).unwrap();
    compute_features(&env, &FeatureConfig::geometric(k).unwrap()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn features_invariant_under_cube_symmetries((k, values) in env_strategy(255)) {
        let base = geometric(k, values.clone(), 255);
        for (perm, flip) in cube_symmetries() {
            let moved = geometric(k, transform(k, &values, perm, flip), 255);
            prop_assert!(close(&base, &moved, 1e-10), "{perm:?} {flip:?}: {base:?} vs {moved:?}");
        }
    }

    #[test]
    fn features_invariant_under_intensity_shift((k, values) in env_strategy(30000), shift in 0u16..30000) {
        let base = geometric(k, values.clone(), 65535);
        let shifted = geometric(k, values.iter().map(|v| v + shift).collect(), 65535);
        prop_assert!(close(&base, &shifted, 1e-10));
    }

    #[test]
    fn shape_features_are_scale_free((k, values) in env_strategy(1000), scale in 2u16..60) {
        let base = geometric(k, values.clone(), 65535);
        let scaled = geometric(k, values.iter().map(|v| v * scale).collect(), 65535);
        prop_assert!(close(&base, &scaled, 1e-8));
    }

    #[test]
    fn mce_matches_exhaustive_scan(counts in prop::collection::vec(prop_oneof![3 => Just(0u64), 2 => 0u64..500], 256)) {
        let h = Histogram::new(0.0, 1.0, counts.clone()).unwrap();
        match mce_threshold(&h) {
            Ok(t) => prop_assert_eq!(t.bin, exhaustive_mce(&counts)),
            Err(_) => prop_assert!(counts.iter().all(|&c| c == 0)),
        }
    }

    #[test]
    fn mce_threshold_stays_within_occupied_range(values in prop::collection::vec(any::<u16>(), 1..400)) {
        let t = mce_threshold(&Histogram::exact(&values).unwrap()).unwrap();
        let lo = *values.iter().min().unwrap() as f64;
        let hi = *values.iter().max().unwrap() as f64;
        prop_assert!(t.threshold >= lo && t.threshold <= hi);
    }

    #[test]
    fn mce_shifts_with_two_level_histograms(
        a in 0u16..1000, gap in 1u16..1000, na in 1usize..200, nb in 1usize..200, shift in 0u16..30000
    ) {
        let mut values = vec![a; na];
        values.extend(std::iter::repeat_n(a + gap, nb));
        let shifted: Vec<u16> = values.iter().map(|v| v + shift).collect();
        let t0 = mce_threshold(&Histogram::exact(&values).unwrap()).unwrap().threshold;
        let t1 = mce_threshold(&Histogram::exact(&shifted).unwrap()).unwrap().threshold;
        prop_assert_eq!(t1, t0 + shift as f64);
    }

    #[test]
    fn soft_threshold_is_nonexpansive(
        x in prop::collection::vec(-100.0f64..100.0, 1..8),
        y in prop::collection::vec(-100.0f64..100.0, 1..8),
        level in 0.0f64..50.0,
    ) {
        let n = x.len().min(y.len());
        let (x, y) = (Array1::from(x[..n].to_vec()), Array1::from(y[..n].to_vec()));
        let d = &soft_threshold(x.view(), level).unwrap() - &soft_threshold(y.view(), level).unwrap();
        let e = &x - &y;
        prop_assert!(d.dot(&d).sqrt() <= e.dot(&e).sqrt() + 1e-12);
    }

    #[test]
    fn projection_is_idempotent(instance in polytope_strategy()) {
        let (poly, x) = instance;
        let once = project_polytope(x.view(), &poly, 1e-12, 100_000).unwrap();
        let twice = project_polytope(once.view(), &poly, 1e-12, 100_000).unwrap();
        let d = &once - &twice;
        prop_assert!(d.dot(&d).sqrt() <= 1e-8);
        prop_assert!(poly.contains(once.view(), 1e-10));
    }

    #[test]
    fn gradient_matches_finite_differences(instance in problem_strategy()) {
        let (f, t, _, _, lambda, mu) = instance;
        let d = f.ncols();
        let beta = Array1::from_shape_fn(d, |i| 0.3 * i as f64 - 0.5);
        let g = grad_f(beta.view(), f.view(), t.view(), lambda, mu).unwrap();
        let smooth = |b: &Array1<f64>| {
            let r = f.dot(b) - &t;
            0.5 * r.dot(&r) + 0.5 * lambda * (1.0 - mu) * b.dot(b)
        };
        for i in 0..d {
            let h = 1e-4;
            let mut up = beta.clone();
            up[i] += h;
            let mut down = beta.clone();
            down[i] -= h;
            let fd = (smooth(&up) - smooth(&down)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn solution_is_feasible_and_objective_decreases(instance in problem_strategy()) {
        let (f, t, theta_g, w, lambda, mu) = instance;
        let params = SolverParams::new(lambda, mu).unwrap().with_trace();
        let sol = solve_faith(f.view(), t.view(), theta_g, w, &params).unwrap();
        for row in f.rows() {
            let theta = theta_g + row.dot(&sol.beta);
            let tol = 1e-8 * (1.0 + w);
            prop_assert!(theta >= -tol && theta <= w + tol, "threshold {theta}");
        }
        let trace = &sol.diagnostics.objective_trace;
        prop_assert!(objective(Array1::zeros(f.ncols()).view(), f.view(), t.view(), lambda, mu) + 1e-10 >= trace[0]);
        for pair in trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-10 * (1.0 + pair[0].abs()), "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_zero(instance in problem_strategy()) {
        let (f, t, theta_g, w, _, mu) = instance;
        let params = SolverParams::new(1e9, mu).unwrap();
        let sol = solve_faith(f.view(), t.view(), theta_g, w, &params).unwrap();
        prop_assert!(sol.beta.dot(&sol.beta).sqrt() <= 1e-3);
    }

    #[test]
    fn path_extremes_order_the_l1_norm(instance in problem_strategy()) {
        let (f, t, theta_g, w, _, mu) = instance;
        let Ok(path) = lambda_path(mu, f.view(), t.view(), 16, 1e-3) else {
            return Ok(());
        };
        let l1 = |lambda: f64| {
            let params = SolverParams::new(lambda, mu).unwrap();
            let sol = solve_faith(f.view(), t.view(), theta_g, w, &params).unwrap();
            sol.beta.iter().map(|b| b.abs()).sum::<f64>()
        };
        prop_assert!(l1(path[15]) <= l1(path[0]) + 1e-9);
        prop_assert!(((path[15] - faith_core::tuning::lambda_max(f.view(), t.view(), mu).unwrap()) / path[15]).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn grid_search_is_deterministic_and_worker_independent(instance in problem_strategy()) {
        let (f, t, theta_g, w, _, _) = instance;
        prop_assume!(f.nrows() >= 3);
        let grid = HyperGrid::with_path(6, 1e-2).unwrap();
        let base = SolverParams::new(1.0, 0.5).unwrap();
        let run = |workers| {
            let settings = CvSettings { folds: Some(3), seed: 11, workers };
            grid_search(f.view(), t.view(), theta_g, w, &grid, &settings, &base)
        };
        let a = run(1);
        prop_assume!(a.is_ok());
        prop_assert_eq!(&a, &run(1));
        prop_assert_eq!(&a, &run(3));
    }

    #[test]
    fn slab_processing_matches_whole_volume(
        dims in (1usize..7, 1usize..7, 1usize..12),
        thickness in 1usize..14,
        k in prop_oneof![Just(3usize), Just(5usize)],
        seed in any::<u64>(),
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let n = dims.iter().product::<usize>();
        let values: Vec<u8> = (0..n as u64).map(|i| (i.wrapping_mul(seed | 1) >> 3) as u8).collect();
        let v = Volume::from_u8(dims, values).unwrap();
        // A windowed map: sum over the clipped k-neighbourhood in z.
        let whole = windowed_sums(&v, &v, 0..dims[2], k);
        let mut pieces = Vec::new();
        for spec in plan_slabs(dims[2], thickness, k).unwrap() {
            let slab = Slab::load(&v, spec);
            pieces.extend(windowed_sums(&v, &slab, slab.z_range(), k));
        }
        prop_assert_eq!(whole, pieces);
    }

    #[test]
    fn raising_the_global_threshold_never_adds_voxels(
        values in prop::collection::vec(any::<u8>(), 6 * 5 * 7),
        low in 0u16..255, raise in 0u16..100,
    ) {
        let v = Volume::from_u8([6, 5, 7], values).unwrap();
        let run = |theta_g: f64| {
            segment(&v, ThresholdRule::Global { theta_g, env_size: 3 }, SegmentOptions::default(), None)
                .unwrap()
                .0
        };
        let a = run(low as f64);
        let b = run((low + raise) as f64);
        prop_assert!(a.bytes().iter().zip(b.bytes()).all(|(x, y)| y <= x));
    }
}

fn windowed_sums<S: VoxelSource>(v: &Volume, src: &S, zs: std::ops::Range<usize>, k: usize) -> Vec<u64> {
    let [dx, dy, dz] = v.dims();
    let h = k / 2;
    let mut out = Vec::new();
    for z in zs {
        for y in 0..dy {
            for x in 0..dx {
                let lo = z.saturating_sub(h);
                let hi = (z + h).min(dz - 1);
                out.push((lo..=hi).map(|zz| src.value([x, y, zz]) as u64).sum());
            }
        }
    }
    out
}

/// Smallest bin minimizing the literal cross-entropy objective.
fn exhaustive_mce(counts: &[u64]) -> usize {
    let first = counts.iter().position(|&c| c > 0).unwrap();
    let last = counts.iter().rposition(|&c| c > 0).unwrap();
    let mean = |r: std::ops::Range<usize>| {
        let n: f64 = r.clone().map(|g| counts[g] as f64).sum();
        let m: f64 = r.map(|g| g as f64 * counts[g] as f64).sum();
        m / n
    };
    let mut best = (f64::INFINITY, first);
    for t in first + 1..=last {
        let (m0, m1) = (mean(0..t), mean(t..counts.len()));
        let mut d = 0.0;
        for (g, &c) in counts.iter().enumerate() {
            if c == 0 || g == 0 {
                continue;
            }
            let mu = if g < t { m0 } else { m1 };
            d += g as f64 * c as f64 * (g as f64 / mu).ln();
        }
        if d < best.0 {
            best = (d, t);
        }
    }
    best.1
}

type Problem = (Array2<f64>, Array1<f64>, f64, f64, f64, f64);

fn problem_strategy() -> impl Strategy<Value = Problem> {
    (1usize..=10, 1usize..=4, prop_oneof![Just(255.0), Just(65535.0)], any::<u64>()).prop_flat_map(
        |(m, d, w, _)| {
            (
                prop::collection::vec(0.0f64..1.0, m * d),
                prop::collection::vec(0.0f64..1.0, m),
                0.0f64..=1.0,
                -2.0f64..1.0,
                0.05f64..0.95,
            )
                .prop_map(move |(fv, tv, g, log_lambda, mu)| {
                    let theta_g = (g * w).round();
                    let f = Array2::from_shape_vec((m, d), fv).unwrap();
                    let t: Array1<f64> = tv.iter().map(|u| u * w - theta_g).collect();
                    let lambda = 10f64.powf(log_lambda) * w;
                    (f, t, theta_g, w, lambda, mu)
                })
        },
    )
}

fn polytope_strategy() -> impl Strategy<Value = (Polytope, Array1<f64>)> {
    (2usize..=4, 2usize..=8).prop_flat_map(|(d, rows)| {
        (
            prop::collection::vec(-1.0f64..1.0, rows * d),
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec(0.0f64..1.0, rows),
            prop::collection::vec(-10.0f64..10.0, d),
        )
            .prop_map(move |(cv, interior, slack, x)| {
                let c = Array2::from_shape_vec((rows, d), cv).unwrap();
                let interior = Array1::from(interior);
                let b = c.dot(&interior) + Array1::from(slack);
                (Polytope::new(c, b).unwrap(), Array1::from(x))
            })
    })
}
