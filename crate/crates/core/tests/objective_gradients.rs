use std::collections::BTreeMap;

use arcplan_core::objective::{
    bev_project_error, freeze_reference, oar_error, oar_objective, ptv_error, ptv_objective, total_error,
    AsymmetricQuadratic, Objective, ObjectiveConfig,
};
use arcplan_core::phantom::{BLADDER, PTV, RECTUM};
use arcplan_core::{build_arc_geometry, generate_phantom, project_stack, GridGeometry, Mask, PhantomSpec, VoxelGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PENALTY: AsymmetricQuadratic = AsymmetricQuadratic { lambda_plus: 2.0, lambda_minus: 1.0 };

fn small_phantom() -> arcplan_core::Phantom<f64> {
    let spec = PhantomSpec {
        dims: [28, 28, 28],
        spacing: [8.0; 3],
        body_semi_axes: [100.0, 80.0, 100.0],
        ..PhantomSpec::default()
    };
    generate_phantom(&spec).unwrap()
}

fn random_dose(g: GridGeometry, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> VoxelGrid<f64> {
    VoxelGrid::from_values(g, (0..g.len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn brute_ptv(dose: &VoxelGrid<f64>, mask: &Mask, rx: f64) -> f64 {
    let mut j = 0.0;
    for i in 0..dose.values.len() {
        if mask.values[i] {
            let x = dose.values[i] - rx;
            if x > 0.0 {
                j += 0.5 * 2.0 * x * x;
            } else {
                j += 0.5 * 1.0 * x * x;
            }
        }
    }
    j
}

#[test]
fn ptv_objective_matches_brute_force_sum() {
    let p = small_phantom();
    let ptv = p.structures.get(PTV).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let d = random_dose(ptv.geometry, 30.0, 50.0, &mut rng);
        let j = ptv_objective(&d, ptv, &PENALTY, 40.0).unwrap();
        let oracle = brute_ptv(&d, ptv, 40.0);
        assert!(((j - oracle) / oracle).abs() <= 1e-12);
    }
    let uniform = VoxelGrid::filled(ptv.geometry, 40.0);
    assert_eq!(ptv_objective(&uniform, ptv, &PENALTY, 40.0).unwrap(), 0.0);
    assert!(ptv_error(&uniform, ptv, &PENALTY, 40.0).unwrap().values.iter().all(|&v| v == 0.0));
}

/// Central difference of `j` at voxel `v` with step `h`.
fn central_difference(d: &VoxelGrid<f64>, v: usize, h: f64, j: impl Fn(&VoxelGrid<f64>) -> f64) -> f64 {
    let mut up = d.clone();
    up.values[v] += h;
    let mut down = d.clone();
    down.values[v] -= h;
    (j(&up) - j(&down)) / (2.0 * h)
}

#[test]
fn ptv_error_matches_finite_differences() {
    let p = small_phantom();
    let ptv = p.structures.get(PTV).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let d = random_dose(ptv.geometry, 30.0, 50.0, &mut rng);
    let e = ptv_error(&d, ptv, &PENALTY, 40.0).unwrap();
    let voxels = ptv.indices();
    let mut checked = 0;
    while checked < 20 {
        let v = voxels[rng.random_range(0..voxels.len())];
        if (d.values[v] - 40.0).abs() < 0.1 {
            continue;
        }
        let fd = central_difference(&d, v, 1e-4, |x| ptv_objective(x, ptv, &PENALTY, 40.0).unwrap());
        assert!(((fd - e.values[v]) / e.values[v]).abs() <= 1e-6, "voxel {v}: fd {fd} vs {}", e.values[v]);
        checked += 1;
    }
}

#[test]
fn oar_error_matches_finite_differences() {
    let p = small_phantom();
    let rectum = p.structures.get(RECTUM).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let baseline = random_dose(rectum.geometry, 5.0, 30.0, &mut rng);
    let reference = freeze_reference(&baseline, rectum, 0.04).unwrap();
    let d = random_dose(rectum.geometry, 5.0, 30.0, &mut rng);
    let e = oar_error(&d, rectum, Some(&reference)).unwrap();
    let voxels = rectum.indices();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 20 && attempts < 10_000 {
        attempts += 1;
        let v = voxels[rng.random_range(0..voxels.len())];
        if d.values[v] - reference.values[v] < 0.1 {
            continue;
        }
        let fd = central_difference(&d, v, 1e-4, |x| oar_objective(x, rectum, Some(&reference)).unwrap());
        assert!(((fd - e.values[v]) / e.values[v]).abs() <= 1e-6);
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn reference_freezing_examples() {
    let g = GridGeometry::centered_cube(3, 1.0).unwrap();
    let mask = Mask::filled(g, true);
    let baseline = VoxelGrid::<f64>::filled(g, 10.0);
    assert_eq!(freeze_reference(&baseline, &mask, 0.0).unwrap().values, baseline.values);
    let r = freeze_reference(&baseline, &mask, 0.02).unwrap();
    assert!(r.values.iter().all(|&v| (v - 9.8).abs() < 1e-12));
    let e = oar_error(&baseline, &mask, Some(&r)).unwrap();
    assert!(e.values.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    let j = oar_objective(&baseline, &mask, Some(&r)).unwrap();
    assert!((j - 27.0 * 0.02).abs() < 1e-12);
    assert_eq!(oar_objective(&r, &mask, Some(&r)).unwrap(), 0.0);
}

#[test]
fn objective_with_zero_controls_has_no_oar_error_at_baseline() {
    let p = small_phantom();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let baseline = random_dose(p.ct.geometry, 0.0, 45.0, &mut rng);
    let config = ObjectiveConfig {
        oar_controls: BTreeMap::from([(BLADDER.to_string(), 0.0), (RECTUM.to_string(), 0.0)]),
        ..ObjectiveConfig::default()
    };
    let mut obj = Objective::<f64>::new(&config, &p.structures).unwrap();
    assert!(obj.value(&baseline).is_err(), "references must be frozen first");
    obj.freeze_references(&baseline).unwrap();
    let (_, e) = obj.value_and_error(&baseline).unwrap();
    let ptv_only = ptv_error(&baseline, p.structures.get(PTV).unwrap(), &PENALTY, 40.0).unwrap();
    assert_eq!(e.values, ptv_only.values);
}

#[test]
fn combined_objective_is_sum_of_terms() {
    let p = small_phantom();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let baseline = random_dose(p.ct.geometry, 0.0, 45.0, &mut rng);
    let d = random_dose(p.ct.geometry, 0.0, 45.0, &mut rng);
    let config = ObjectiveConfig {
        oar_controls: BTreeMap::from([(BLADDER.to_string(), 0.02), (RECTUM.to_string(), 0.04)]),
        ..ObjectiveConfig::default()
    };
    let mut obj = Objective::<f64>::new(&config, &p.structures).unwrap();
    obj.freeze_references(&baseline).unwrap();
    let (j, e) = obj.value_and_error(&d).unwrap();

    let ptv = p.structures.get(PTV).unwrap();
    let bladder = p.structures.get(BLADDER).unwrap();
    let rectum = p.structures.get(RECTUM).unwrap();
    let rb = freeze_reference(&baseline, bladder, 0.02).unwrap();
    let rr = freeze_reference(&baseline, rectum, 0.04).unwrap();
    let j_parts = ptv_objective(&d, ptv, &PENALTY, 40.0).unwrap()
        + oar_objective(&d, bladder, Some(&rb)).unwrap()
        + oar_objective(&d, rectum, Some(&rr)).unwrap();
    assert!(((j - j_parts) / j_parts).abs() <= 1e-12);
    let e_parts = total_error(&[
        ptv_error(&d, ptv, &PENALTY, 40.0).unwrap(),
        oar_error(&d, bladder, Some(&rb)).unwrap(),
        oar_error(&d, rectum, Some(&rr)).unwrap(),
    ])
    .unwrap();
    for (a, b) in e.values.iter().zip(&e_parts.values) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    // finite differences of the combined objective, including overlaps
    let union = ptv.union(bladder).unwrap().union(rectum).unwrap();
    let voxels = union.indices();
    let mut checked = 0;
    while checked < 20 {
        let v = voxels[rng.random_range(0..voxels.len())];
        if e.values[v].abs() < 0.1 {
            continue;
        }
        let fd = central_difference(&d, v, 1e-4, |x| obj.value(x).unwrap());
        assert!(((fd - e.values[v]) / e.values[v]).abs() <= 1e-6);
        checked += 1;
    }
    // zero outside the union of masks
    for (i, &v) in e.values.iter().enumerate() {
        if !union.values[i] {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn total_error_examples() {
    let g = GridGeometry::centered_cube(3, 1.0).unwrap();
    let mut a = VoxelGrid::<f64>::zeros(g);
    let mut b = VoxelGrid::<f64>::zeros(g);
    a.values[0] = 1.5;
    b.values[4] = -2.0;
    let t = total_error(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(t.values[0], 1.5);
    assert_eq!(t.values[4], -2.0);
    assert_eq!(total_error(std::slice::from_ref(&a)).unwrap().values, a.values);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let x = random_dose(g, -1.0, 1.0, &mut rng);
    let y = random_dose(g, -1.0, 1.0, &mut rng);
    let s = total_error(&[x.clone(), y.clone()]).unwrap();
    for i in 0..g.len() {
        assert_eq!(s.values[i], x.values[i] + y.values[i]);
    }
}

#[test]
fn bev_error_projection_preserves_sign() {
    let p = small_phantom();
    let g = p.ct.geometry;
    let geoms = build_arc_geometry(4, 0.0, 1000.0, 5.0, 200.0, p.isocenter).unwrap();
    assert!(bev_project_error(&VoxelGrid::<f64>::zeros(g), &geoms).unwrap().values.iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let e = random_dose(g, -1.0, 1.0, &mut rng);
    let pos = bev_project_error(&e, &geoms).unwrap();
    let neg = bev_project_error(&e.scaled(-1.0), &geoms).unwrap();
    for (a, b) in pos.values.iter().zip(&neg.values) {
        assert_eq!(*a, -*b);
    }
    let mut delta = VoxelGrid::<f64>::zeros(g);
    delta.values[g.index(14, 14, 14)] = -3.0;
    assert_eq!(bev_project_error(&delta, &geoms).unwrap().values, project_stack(&delta, &geoms).unwrap().values);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ptv_error_sign_follows_deviation(doses in prop::collection::vec(20.0f64..60.0, 27)) {
        let g = GridGeometry::centered_cube(3, 1.0).unwrap();
        let mut mask = Mask::filled(g, true);
        mask.values[13] = false;
        let d = VoxelGrid::from_values(g, doses).unwrap();
        let e = ptv_error(&d, &mask, &PENALTY, 40.0).unwrap();
        for i in 0..27 {
            if !mask.values[i] {
                prop_assert_eq!(e.values[i], 0.0);
            } else if d.values[i] > 40.0 {
                prop_assert!(e.values[i] >= 0.0);
            } else {
                prop_assert!(e.values[i] <= 0.0);
            }
        }
    }

    #[test]
    fn oar_objective_grows_with_suppression(
        doses in prop::collection::vec(0.0f64..40.0, 27),
        base in prop::collection::vec(0.0f64..40.0, 27),
        s1 in 0.0f64..0.5,
        ds in 0.0f64..0.4,
    ) {
        let g = GridGeometry::centered_cube(3, 1.0).unwrap();
        let mask = Mask::filled(g, true);
        let d = VoxelGrid::from_values(g, doses).unwrap();
        let b = VoxelGrid::from_values(g, base).unwrap();
        let j1 = oar_objective(&d, &mask, Some(&freeze_reference(&b, &mask, s1).unwrap())).unwrap();
        let j2 = oar_objective(&d, &mask, Some(&freeze_reference(&b, &mask, s1 + ds).unwrap())).unwrap();
        prop_assert!(j2 >= j1);
    }
}
