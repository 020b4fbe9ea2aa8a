use arcplan_core::phantom::{BODY, CTV, PTV};
use arcplan_core::{augment, dilate_margin, generate_phantom, AugmentParams, GridGeometry, Mask, PhantomSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All-pairs Euclidean dilation between voxel centers.
fn brute_dilate(mask: &Mask, margin: f64) -> Mask {
    let g = mask.geometry;
    let seeds: Vec<[f64; 3]> = mask.indices().into_iter().map(|i| g.center_of(i)).collect();
    let mut out = Mask::empty(g);
    for idx in 0..g.len() {
        let c = g.center_of(idx);
        out.values[idx] = seeds.iter().any(|s| {
            let d2: f64 = (0..3).map(|a| (c[a] - s[a]).powi(2)).sum();
            d2 <= margin * margin + 1e-9
        });
    }
    out
}

#[test]
fn default_ptv_is_the_dilated_ctv() {
    let p = generate_phantom::<f64>(&PhantomSpec::default()).unwrap();
    let ctv = p.structures.get(CTV).unwrap();
    let ptv = p.structures.get(PTV).unwrap();
    let oracle = brute_dilate(ctv, 3.0);
    assert!(ctv.is_subset_of(ptv));
    assert_eq!(ptv.values, oracle.values);
    // centers are 4 mm apart, so a 3 mm margin adds nothing; 4 mm does
    let wider = brute_dilate(ctv, 4.0);
    assert!(wider.count() > ctv.count());
    assert_eq!(dilate_margin(ctv, 4.0).unwrap().values, wider.values);
    assert!(ptv.is_subset_of(p.structures.get(BODY).unwrap()));
}

#[test]
fn five_mm_dilation_matches_all_pairs() {
    let g = GridGeometry::centered_cube(32, 2.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        let mut m = Mask::empty(g);
        for _ in 0..40 {
            let idx = rng.random_range(0..g.len());
            m.values[idx] = true;
        }
        // plus a solid block so the mask has an interior
        for k in 10..16 {
            for j in 12..18 {
                for i in 5..9 {
                    m.set(i, j, k, true);
                }
            }
        }
        assert_eq!(dilate_margin(&m, 5.0).unwrap().values, brute_dilate(&m, 5.0).values);
    }
}

#[test]
fn anisotropic_dilation_matches_all_pairs() {
    let g = GridGeometry::new([20, 16, 12], [2.0, 3.0, 4.5], [-20.0, -24.0, -27.0]).unwrap();
    let mut m = Mask::empty(g);
    m.set(10, 8, 6, true);
    m.set(3, 2, 1, true);
    m.set(18, 15, 11, true);
    assert_eq!(dilate_margin(&m, 6.5).unwrap().values, brute_dilate(&m, 6.5).values);
}

fn small_body_spec() -> PhantomSpec {
    PhantomSpec { body_semi_axes: [100.0, 80.0, 100.0], ..PhantomSpec::default() }
}

#[test]
fn upscaling_grows_body_volume_by_the_cube() {
    let p = generate_phantom::<f64>(&small_body_spec()).unwrap();
    let only_scale = AugmentParams {
        scale_range: [0.2, 0.2],
        rotation_range: [0.0, 0.0],
        ptv_margin_range: [0.0, 0.0],
        rectum_margin_range: [0.0, 0.0],
        per_transform_probability: 1.0,
        rounds: 1,
    };
    let out = augment(&p.ct, &p.structures, &only_scale, 3).unwrap();
    let before = p.structures.get(BODY).unwrap().count() as f64;
    let after = out.structures.get(BODY).unwrap().count() as f64;
    let ratio = after / before;
    assert!((ratio / 1.728 - 1.0).abs() <= 0.02, "ratio {ratio}");
}

#[test]
fn ptv_margin_augmentation_is_a_euclidean_dilation() {
    let p = generate_phantom::<f64>(&PhantomSpec::default()).unwrap();
    let only_margin = AugmentParams {
        scale_range: [0.0, 0.0],
        rotation_range: [0.0, 0.0],
        ptv_margin_range: [3.0, 3.0],
        rectum_margin_range: [0.0, 0.0],
        per_transform_probability: 1.0,
        rounds: 1,
    };
    // with probability 1 every transform fires; zero-width scale and rotation
    // ranges make them identities, so only the margin matters
    let out = augment(&p.ct, &p.structures, &only_margin, 5).unwrap();
    assert_eq!(out.applied.ptv_margin, Some(3.0));
    let ptv = p.structures.get(PTV).unwrap();
    let grown = out.structures.get(PTV).unwrap();
    assert!(ptv.is_subset_of(grown));
    assert_eq!(grown.values, brute_dilate(ptv, 3.0).values);
    assert_eq!(out.ct.values, p.ct.values);
}
