use arcplan_core::sequencer::{
    bounded_travel_l1, enforce_leaf_travel, reconstruct_fluence, refine_subpixel, sequence_cp, sequence_plan, Aperture,
    AperturePlan, MlcModel, SequencerConfig,
};
use arcplan_core::FluenceStack;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROWS: usize = 10;
const WIDTH: usize = 16;
const SPACING: f64 = 5.0;

fn mm(edge: f64) -> f64 {
    (edge - WIDTH as f64 / 2.0) * SPACING
}

fn no_travel_limit() -> SequencerConfig {
    SequencerConfig { dlg: 0.0, max_travel_per_cp: 1e9, ..SequencerConfig::default() }
}

/// Random plan with integer edges and closed rows parked the way the
/// sequencer parks them, so it is a fixed point of the round trip.
fn random_integer_plan(rng: &mut ChaCha8Rng, n_cp: usize) -> AperturePlan {
    let mut apertures: Vec<Aperture> = Vec::with_capacity(n_cp);
    for cp in 0..n_cp {
        let centers: Vec<f64> = match apertures.last() {
            Some(a) => a.centers(),
            None => vec![0.0; ROWS],
        };
        let closed_cp = rng.random_bool(0.1);
        let mut left = vec![0.0; ROWS];
        let mut right = vec![0.0; ROWS];
        let mut any_open = false;
        for r in 0..ROWS {
            if !closed_cp && rng.random_bool(0.7) {
                let s = rng.random_range(0..WIDTH);
                let e = rng.random_range(s + 1..=WIDTH);
                left[r] = mm(s as f64);
                right[r] = mm(e as f64);
                any_open = true;
            } else {
                left[r] = centers[r];
                right[r] = centers[r];
            }
        }
        let mu = if any_open { rng.random_range(0.1..5.0) } else { 0.0 };
        apertures.push(Aperture { cp_index: cp, gantry_angle: 2.0 * cp as f64, mu, left, right });
    }
    AperturePlan {
        mlc: MlcModel::default(),
        dlg: 0.0,
        max_travel_per_cp: 1e9,
        width: WIDTH,
        spacing: SPACING,
        apertures,
    }
}

fn angles(plan: &AperturePlan) -> Vec<f64> {
    plan.apertures.iter().map(|a| a.gantry_angle).collect()
}

#[test]
fn integer_plans_survive_the_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..200 {
        let plan = random_integer_plan(&mut rng, 6);
        let f: FluenceStack<f64> = reconstruct_fluence(&plan).unwrap();
        let (back, report) = sequence_plan(&f, &angles(&plan), &no_travel_limit()).unwrap();
        assert_eq!(back, plan);
        assert_eq!(report.adjusted, 0);
    }
}

#[test]
fn closed_plan_reconstructs_to_zero_and_rectangle_to_two_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut plan = random_integer_plan(&mut rng, 3);
    for a in &mut plan.apertures {
        a.mu = 0.0;
    }
    let f: FluenceStack<f64> = reconstruct_fluence(&plan).unwrap();
    assert!(f.values.iter().all(|&v| v == 0.0));

    let mut rect = random_integer_plan(&mut rng, 1);
    let a = &mut rect.apertures[0];
    a.mu = 2.5;
    for r in 0..ROWS {
        a.left[r] = mm(3.0);
        a.right[r] = mm(9.0);
    }
    let f: FluenceStack<f64> = reconstruct_fluence(&rect).unwrap();
    for r in 0..ROWS {
        for c in 0..WIDTH {
            assert_eq!(f.values[r * WIDTH + c], if (3..9).contains(&c) { 2.5 } else { 0.0 });
        }
    }
}

/// Squared reconstruction error of one row for edges `l`, `r` (pixels) and
/// the given MU.
fn row_error(row: &[f64], l: f64, r: f64, mu: f64) -> f64 {
    (0..row.len())
        .map(|c| {
            let cover = (r.min((c + 1) as f64) - l.max(c as f64)).clamp(0.0, 1.0);
            (mu * cover - row[c]).powi(2)
        })
        .sum()
}

/// 0.01 px grid search for the best edge within one pixel of `start`, the
/// other edge held at `other`.
fn grid_search(row: &[f64], start: f64, other: f64, mu: f64, is_left: bool) -> f64 {
    let mut best = (f64::INFINITY, start);
    for k in -150..=150 {
        let x = start + k as f64 * 0.01;
        let err = if is_left { row_error(row, x, other, mu) } else { row_error(row, other, x, mu) };
        if err < best.0 - 1e-15 {
            best = (err, x);
        }
    }
    best.1
}

#[test]
fn example_row_matches_grid_search() {
    let row = [0.0, 0.2, 1.0, 1.0, 0.4, 0.0];
    let a = sequence_cp(&row, 6, 1.0, 0.5, None).unwrap();
    let r = refine_subpixel(&a, &row, 6, 1.0).unwrap();
    let (l, rr) = (r.left[0] + 3.0, r.right[0] + 3.0);
    assert!((l - 1.8).abs() < 1e-12 && (rr - 4.4).abs() < 1e-12);
    assert!((grid_search(&row, 2.0, 4.0, 1.0, true) - l).abs() <= 0.02);
    assert!((grid_search(&row, 4.0, 2.0, 1.0, false) - rr).abs() <= 0.02);
}

#[test]
fn subpixel_edges_match_grid_search_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..200 {
        let mu = rng.random_range(0.5..3.0);
        let mut plan = random_integer_plan(&mut rng, 1);
        let a = &mut plan.apertures[0];
        a.mu = mu;
        for r in 0..ROWS {
            let s = rng.random_range(2..WIDTH / 2 - 1) as f64 + rng.random_range(-0.45..0.45);
            let e = rng.random_range(WIDTH / 2 + 1..WIDTH - 2) as f64 + rng.random_range(-0.45..0.45);
            a.left[r] = mm(s);
            a.right[r] = mm(e);
        }
        let f: FluenceStack<f64> = reconstruct_fluence(&plan).unwrap();
        let seq = sequence_cp(f.slice(0), WIDTH, SPACING, 0.5, None).unwrap();
        let refined = refine_subpixel(&seq, f.slice(0), WIDTH, SPACING).unwrap();
        for r in 0..ROWS {
            let row = &f.slice(0)[r * WIDTH..(r + 1) * WIDTH];
            let px = |x: f64| x / SPACING + WIDTH as f64 / 2.0;
            let (l0, r0) = (px(seq.left[r]), px(seq.right[r]));
            let (l, rr) = (px(refined.left[r]), px(refined.right[r]));
            let ol = grid_search(row, l0, rr, seq.mu, true);
            let or = grid_search(row, r0, l, seq.mu, false);
            assert!((l - ol).abs() <= 0.02, "left {l} vs oracle {ol}");
            assert!((rr - or).abs() <= 0.02, "right {rr} vs oracle {or}");
        }
    }
}

/// Exact DP over integer positions: with integer data and limit, an integral
/// optimum exists.
fn dp_min_displacement(a: &[i64], t: i64) -> i64 {
    let lo = a.iter().min().unwrap() - 2 * t;
    let hi = a.iter().max().unwrap() + 2 * t;
    let n = (hi - lo + 1) as usize;
    let mut cost: Vec<i64> = (0..n).map(|k| (lo + k as i64 - a[0]).abs()).collect();
    for &ai in &a[1..] {
        let mut next = vec![i64::MAX; n];
        for k in 0..n {
            let from = k.saturating_sub(t as usize);
            let to = (k + t as usize).min(n - 1);
            let best = (from..=to).map(|j| cost[j]).min().unwrap();
            next[k] = best + (lo + k as i64 - ai).abs();
        }
        cost = next;
    }
    *cost.iter().min().unwrap()
}

#[test]
fn travel_projection_is_optimal_against_dp() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..500 {
        let a: Vec<i64> = (0..5).map(|_| rng.random_range(-40..=40)).collect();
        let t = rng.random_range(1..=12);
        let x = bounded_travel_l1(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), t as f64);
        for w in x.windows(2) {
            assert!((w[1] - w[0]).abs() <= t as f64 + 1e-9);
        }
        let cost: f64 = x.iter().zip(&a).map(|(x, &a)| (x - a as f64).abs()).sum();
        let opt = dp_min_displacement(&a, t) as f64;
        assert!((cost - opt).abs() <= 1e-9, "{a:?} t={t}: {cost} vs {opt}");
    }
}

#[test]
fn plan_travel_enforcement_is_near_the_per_leaf_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..100 {
        let plan = random_integer_plan(&mut rng, 5);
        let (out, report) = enforce_leaf_travel(&plan, 8.0).unwrap();
        assert!(out.max_travel() <= 8.0 + 1e-9);
        let mut lower_bound = 0.0;
        for r in 0..ROWS {
            for side in [0, 1] {
                let seq: Vec<i64> = plan
                    .apertures
                    .iter()
                    // parked leaves sit on half-millimetre centers
                    .map(|a| (2.0 * if side == 0 { a.left[r] } else { a.right[r] }).round() as i64)
                    .collect();
                lower_bound += 0.5 * dp_min_displacement(&seq, 16) as f64;
            }
        }
        assert!(
            report.total_displacement <= 1.05 * lower_bound + 1e-9,
            "{} vs {}",
            report.total_displacement,
            lower_bound
        );
        assert!(report.total_displacement >= lower_bound - 1e-9);
    }
}

#[test]
fn feasible_plan_is_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let plan = random_integer_plan(&mut rng, 4);
    let limit = plan.max_travel() + 1.0;
    let (out, report) = enforce_leaf_travel(&plan, limit).unwrap();
    assert_eq!(out.apertures, plan.apertures);
    assert_eq!(report.total_displacement, 0.0);
}

#[test]
fn dlg_round_trip_recovers_open_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let plan = random_integer_plan(&mut rng, 6);
    let f: FluenceStack<f64> = reconstruct_fluence(&plan).unwrap();
    let config = SequencerConfig { dlg: 2.0, max_travel_per_cp: 1e9, ..SequencerConfig::default() };
    let (widened, _) = sequence_plan(&f, &angles(&plan), &config).unwrap();
    for (a, b) in widened.apertures.iter().zip(&plan.apertures) {
        for r in 0..ROWS {
            if b.is_open(r) {
                assert!(((a.right[r] - a.left[r]) - (b.right[r] - b.left[r]) - 2.0).abs() < 1e-12);
            } else {
                assert_eq!(a.left[r], a.right[r]);
            }
        }
    }
    let back: FluenceStack<f64> = reconstruct_fluence(&widened).unwrap();
    assert_eq!(back.values, f.values);
}

#[test]
fn zero_stack_gives_closed_plan() {
    let f = FluenceStack::<f64>::zeros(4, ROWS, WIDTH, SPACING);
    let (plan, _) = sequence_plan(&f, &[0.0, 90.0, 180.0, 270.0], &SequencerConfig::default()).unwrap();
    assert_eq!(plan.total_mu(), 0.0);
    assert!(plan.apertures.iter().all(|a| (0..ROWS).all(|r| !a.is_open(r))));
}

#[test]
fn parallel_sequencing_matches_single_thread() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let mut f = FluenceStack::<f64>::zeros(40, ROWS, WIDTH, SPACING);
    f.values.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    let angles: Vec<f64> = (0..40).map(|i| 9.0 * i as f64).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sequence_plan(&f, &angles, &SequencerConfig::default()).unwrap())
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn travel_bound_and_ordering_always_hold(seed in any::<u64>(), limit in 0.5f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = random_integer_plan(&mut rng, 8);
        // jitter to non-lattice positions
        for a in &mut plan.apertures {
            for r in 0..ROWS {
                let d = rng.random_range(-3.0..3.0);
                a.left[r] += d;
                a.right[r] += d + rng.random_range(0.0..2.0);
            }
        }
        let (out, _) = enforce_leaf_travel(&plan, limit).unwrap();
        prop_assert!(out.max_travel() <= limit + 1e-9);
        for a in &out.apertures {
            for r in 0..ROWS {
                prop_assert!(a.left[r] <= a.right[r]);
            }
        }
    }

    #[test]
    fn sequenced_apertures_keep_left_of_right(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FluenceStack::<f64>::zeros(6, ROWS, WIDTH, SPACING);
        f.values.iter_mut().for_each(|v| *v = if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..2.0) });
        let (plan, _) = sequence_plan(&f, &[0.0; 6], &SequencerConfig::default()).unwrap();
        plan.validate().unwrap();
        prop_assert!(plan.max_travel() <= 8.0 + 1e-9);
    }
}
