use std::collections::BTreeMap;

use arcplan_core::objective::Objective;
use arcplan_core::optimizer::Regularizer;
use arcplan_core::phantom::{BODY, PTV, RECTUM};
use arcplan_core::{
    build_arc_geometry, ct_normalize, deliverability_reg, feedback_correct, generate_phantom, propose_initial_fluence,
    BeamModel, DoseOperator, Error, FluenceStack, GridGeometry, Mask, ObjectiveConfig, OptimizerConfig, PhantomSpec,
    StructureSet, VoxelGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THRESHOLD: f64 = 0.5;

fn reg(smooth: f64, two: f64) -> Regularizer {
    Regularizer { smoothness_weight: smooth, two_level_weight: two, threshold: THRESHOLD }
}

/// Random maps whose pixels keep clear of every kink of the regularizer, so
/// central differences see a smooth function.
fn smooth_stack(rng: &mut ChaCha8Rng) -> FluenceStack<f64> {
    let (n_cp, h, w) = (3, 6, 7);
    let mut f = FluenceStack::zeros(n_cp, h, w, 5.0);
    for cp in 0..n_cp {
        loop {
            let m: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..4.0)).collect();
            let max = m.iter().cloned().fold(0.0, f64::max);
            let cut = THRESHOLD * max;
            let open: Vec<f64> = m.iter().copied().filter(|&x| x >= cut).collect();
            let level = open.iter().sum::<f64>() / open.len() as f64;
            let clear = |x: f64, k: f64| (x - k).abs() > 1e-3;
            let ok = m.iter().all(|&x| clear(x, cut) && clear(x, level) && clear(x, level / 2.0))
                && (0..m.len())
                    .all(|k| (k % w + 1 == w || clear(m[k], m[k + 1])) && (k + w >= m.len() || clear(m[k], m[k + w])));
            if ok {
                f.slice_mut(cp).copy_from_slice(&m);
                break;
            }
        }
    }
    f
}

#[test]
fn regularizer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for r in [reg(0.3, 0.0), reg(0.0, 0.7), reg(0.2, 0.5)] {
        let f = smooth_stack(&mut rng);
        let (value, grad) = r.value_and_gradient(&f);
        assert_eq!(value, r.value(&f));
        let h = 1e-6;
        let (mut err2, mut norm2) = (0.0, 0.0);
        for k in 0..f.values.len() {
            let mut up = f.clone();
            up.values[k] += h;
            let mut down = f.clone();
            down.values[k] -= h;
            let fd = (r.value(&up) - r.value(&down)) / (2.0 * h);
            err2 += (fd - grad.values[k]).powi(2);
            norm2 += grad.values[k].powi(2);
        }
        let rel = (err2 / norm2).sqrt();
        assert!(rel <= 1e-6, "{r:?}: relative gradient error {rel:e}");
    }
}

#[test]
fn two_level_and_constant_maps_cost_nothing() {
    let mut two_level = FluenceStack::zeros(2, 5, 5, 5.0);
    for (k, v) in two_level.values.iter_mut().enumerate() {
        if k % 3 == 0 {
            *v = 2.5;
        }
    }
    let (value, grad) = reg(0.0, 1.0).value_and_gradient(&two_level);
    assert_eq!(value, 0.0);
    assert!(grad.values.iter().all(|&g| g == 0.0));

    let constant = FluenceStack::from_values(2, 5, 5, 5.0, vec![1.7; 50]).unwrap();
    let (value, grad) = reg(1.0, 0.0).value_and_gradient(&constant);
    assert_eq!(value, 0.0);
    assert!(grad.values.iter().all(|&g| g == 0.0));

    let zero = FluenceStack::<f64>::zeros(1, 4, 4, 5.0);
    assert_eq!(reg(1.0, 1.0).value(&zero), 0.0);
}

#[test]
fn deliverability_reg_uses_the_config_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let f = smooth_stack(&mut rng);
    let config = OptimizerConfig { smoothness_weight: 0.2, two_level_weight: 0.5, ..OptimizerConfig::default() };
    let (v, g) = deliverability_reg(&f, &config).unwrap();
    let (v2, g2) = reg(0.2, 0.5).value_and_gradient(&f);
    assert_eq!((v, g.values), (v2, g2.values));
    let (v0, _) = deliverability_reg(&f, &OptimizerConfig::default()).unwrap();
    assert_eq!(v0, 0.0);
}

/// 8^3 water box, one PTV voxel at the isocenter, 4 control points.
struct Toy {
    op: DoseOperator<f64>,
    structures: StructureSet,
}

fn toy() -> Toy {
    let grid = GridGeometry::centered_cube(8, 10.0).unwrap();
    let mut ptv = Mask::empty(grid);
    let centre = grid.index(4, 4, 4);
    ptv.values[centre] = true;
    let iso = grid.center_of(centre);
    let masks = BTreeMap::from([(PTV.to_string(), ptv), (BODY.to_string(), Mask::filled(grid, true))]);
    let structures = StructureSet { masks, prescription_dose: 40.0 };
    let geoms = build_arc_geometry(4, 0.0, 1000.0, 5.0, 100.0, iso).unwrap();
    let ct = ct_normalize(&VoxelGrid::filled(grid, 0.0));
    let op = DoseOperator::new(&ct, &geoms, &BeamModel::default()).unwrap();
    Toy { op, structures }
}

fn frozen(config: &ObjectiveConfig, structures: &StructureSet, baseline: &VoxelGrid<f64>) -> Objective<f64> {
    let mut obj = Objective::new(config, structures).unwrap();
    obj.freeze_references(baseline).unwrap();
    obj
}

#[test]
fn single_voxel_target_converges_to_the_prescription() {
    let t = toy();
    let proposal = propose_initial_fluence(&t.op, &t.structures, 5.0, 40.0).unwrap();
    let start = proposal.fluence.scaled(0.5);
    let obj = frozen(&ObjectiveConfig::default(), &t.structures, &t.op.forward(&start).unwrap());
    let config = OptimizerConfig { max_iters: 60, tol: 0.0, ..OptimizerConfig::default() };
    let result = feedback_correct(&t.op, &start, &obj, &config).unwrap();
    let d = result.dose.values[t.structures.ptv().unwrap().indices()[0]];
    assert!((d - 40.0).abs() <= 0.4, "PTV voxel dose {d}");
    assert!(result.objective_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn fixed_point_is_left_unchanged_after_one_iteration() {
    let t = toy();
    let proposal = propose_initial_fluence(&t.op, &t.structures, 5.0, 40.0).unwrap();
    let dose = t.op.forward(&proposal.fluence).unwrap();
    let exact = dose.values[t.structures.ptv().unwrap().indices()[0]];
    let config = ObjectiveConfig { rx_dose: Some(exact), ..ObjectiveConfig::default() };
    let obj = frozen(&config, &t.structures, &dose);
    let result = feedback_correct(&t.op, &proposal.fluence, &obj, &OptimizerConfig::default()).unwrap();
    assert_eq!(result.iterations_used, 1);
    assert_eq!(result.fluence, proposal.fluence);
    assert_eq!(result.objective_trace, vec![0.0]);
}

#[test]
fn proposal_is_conformal_and_scaled_to_the_prescription() {
    let spec = PhantomSpec { dims: [28, 28, 28], spacing: [8.0; 3], ..PhantomSpec::default() };
    let phantom = generate_phantom::<f64>(&spec).unwrap();
    let geoms = build_arc_geometry(12, 0.0, 1000.0, 5.0, 200.0, phantom.isocenter).unwrap();
    let op = DoseOperator::new(&ct_normalize(&phantom.ct), &geoms, &BeamModel::default()).unwrap();
    let rx = phantom.structures.prescription_dose;
    let p = propose_initial_fluence(&op, &phantom.structures, 5.0, rx).unwrap();
    assert!(p.blind_control_points.is_empty());
    assert!(p.fluence.values.iter().all(|&v| v == 0.0 || v == p.scale));
    let ptv = phantom.structures.ptv().unwrap();
    let dose = op.forward(&p.fluence).unwrap();
    let mean = ptv.indices().iter().map(|&i| dose.values[i]).sum::<f64>() / ptv.count() as f64;
    assert!((mean - rx).abs() <= 1e-3 * rx, "mean PTV dose {mean}");
    // wider margins open more pixels
    let wide = propose_initial_fluence(&op, &phantom.structures, 15.0, rx).unwrap();
    let open = |f: &FluenceStack<f64>| f.values.iter().filter(|&&v| v > 0.0).count();
    assert!(open(&wide.fluence) > open(&p.fluence));

    let mut empty = phantom.structures.clone();
    empty.masks.insert(PTV.to_string(), Mask::empty(ptv.geometry));
    assert!(matches!(propose_initial_fluence(&op, &empty, 5.0, rx), Err(Error::Structure(_))));
    assert!(matches!(propose_initial_fluence(&op, &phantom.structures, 5.0, 0.0), Err(Error::Argument(_))));
}

#[test]
fn descent_is_monotone_non_negative_and_respects_the_support() {
    let spec = PhantomSpec { dims: [28, 28, 28], spacing: [8.0; 3], ..PhantomSpec::default() };
    let phantom = generate_phantom::<f64>(&spec).unwrap();
    let s = &phantom.structures;
    let geoms = build_arc_geometry(12, 0.0, 1000.0, 5.0, 200.0, phantom.isocenter).unwrap();
    let ct = ct_normalize(&phantom.ct);
    let rx = s.prescription_dose;
    let full = DoseOperator::new(&ct, &geoms, &BeamModel::default()).unwrap();
    let start = propose_initial_fluence(&full, s, 5.0, rx).unwrap().fluence;
    let support: Vec<bool> =
        propose_initial_fluence(&full, s, 15.0, rx).unwrap().fluence.values.iter().map(|&v| v > 0.0).collect();
    let op = DoseOperator::with_support(&ct, &geoms, &BeamModel::default(), &support).unwrap();

    let controls =
        ObjectiveConfig { oar_controls: BTreeMap::from([(RECTUM.to_string(), 0.05)]), ..ObjectiveConfig::default() };
    let obj = frozen(&controls, s, &op.forward(&start).unwrap());
    let config = OptimizerConfig {
        max_iters: 15,
        tol: 0.0,
        smoothness_weight: 1e-3,
        two_level_weight: 1e-3,
        ..OptimizerConfig::default()
    };
    let result = feedback_correct(&op, &start, &obj, &config).unwrap();
    let trace = &result.objective_trace;
    assert_eq!(trace.len(), result.iterations_used + 1);
    assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
    assert!(trace[trace.len() - 1] < trace[0]);
    assert!(result.fluence.values.iter().all(|&v| v >= 0.0));
    assert!(result.forward_evaluations > result.iterations_used);
    for ((&a, &b), &free) in result.fluence.values.iter().zip(&start.values).zip(&support) {
        if !free {
            assert_eq!(a, b);
        }
    }
    assert_eq!(result.dose, op.forward(&result.fluence).unwrap());
}

#[test]
fn invalid_inputs_are_rejected() {
    let t = toy();
    let proposal = propose_initial_fluence(&t.op, &t.structures, 5.0, 40.0).unwrap();
    let controls =
        ObjectiveConfig { oar_controls: BTreeMap::from([(BODY.to_string(), 0.1)]), ..ObjectiveConfig::default() };
    let unfrozen = Objective::new(&controls, &t.structures).unwrap();
    let config = OptimizerConfig::default();
    assert!(matches!(feedback_correct(&t.op, &proposal.fluence, &unfrozen, &config), Err(Error::State(_))));

    let obj = frozen(&ObjectiveConfig::default(), &t.structures, &t.op.forward(&proposal.fluence).unwrap());
    let zero = t.op.zero_fluence();
    assert!(matches!(feedback_correct(&t.op, &zero, &obj, &config), Err(Error::Argument(_))));
    for bad in [
        OptimizerConfig { max_iters: 0, ..config.clone() },
        OptimizerConfig { shrink: 1.0, ..config.clone() },
        OptimizerConfig { smoothness_weight: -1.0, ..config.clone() },
        OptimizerConfig { two_level_threshold: 0.0, ..config.clone() },
    ] {
        assert!(matches!(feedback_correct(&t.op, &proposal.fluence, &obj, &bad), Err(Error::Config(_))));
    }
}
