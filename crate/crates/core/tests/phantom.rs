use petmr_core::phantom::*;

#[test]
fn same_index_is_bitwise_identical() {
    let spec = PhantomSpec::default();
    let a = generate_sample(&spec, 17).unwrap();
    let b = generate_sample(&spec, 17).unwrap();
    assert_eq!(a, b);
    let c = generate_sample(&spec, 18).unwrap();
    assert_ne!(a.ct.data(), c.ct.data());
}

#[test]
fn seed_changes_the_sample() {
    let spec = PhantomSpec::default();
    let other = PhantomSpec { seed: spec.seed + 1, ..spec };
    assert_ne!(
        generate_sample(&spec, 0).unwrap().mr.data(),
        generate_sample(&other, 0).unwrap().mr.data()
    );
}

#[test]
fn hundred_samples_satisfy_invariants() {
    let spec = PhantomSpec::default();
    for i in 0..100 {
        let (s, labels) = generate_labeled(&spec, i).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.id, i);
        assert!(s.brain_mask.count_set() > 500, "sample {i}");
        let mut bone = 0;
        for (k, &t) in labels.labels.iter().enumerate() {
            let ct = s.ct.data()[k] as f64;
            match t {
                Tissue::Bone => {
                    bone += 1;
                    assert!(spec.bone_hu.contains(ct), "bone HU {ct}");
                    assert_eq!(s.pet.data()[k], 0.0);
                }
                Tissue::Air | Tissue::Cavity => {
                    assert_eq!(ct, -1000.0);
                    assert_eq!(s.pet.data()[k], 0.0);
                }
                _ => assert!(s.pet.data()[k] > 0.0),
            }
        }
        assert!(bone > 100, "sample {i} has {bone} bone pixels");
    }
}

#[test]
fn lesions_and_cavities_occur() {
    let spec = PhantomSpec::default();
    let (mut lesions, mut cavities) = (0, 0);
    for i in 0..100 {
        let (_, labels) = generate_labeled(&spec, i).unwrap();
        lesions += (labels.count(Tissue::Lesion) > 0) as usize;
        cavities += (labels.count(Tissue::Cavity) > 0) as usize;
    }
    assert!((15..=45).contains(&lesions), "{lesions}");
    assert!(cavities > 30, "{cavities}");
}

/// Least-squares fit `ct ~ a * mr + b` over head pixels of many samples.
#[test]
fn mr_to_ct_is_not_affine() {
    let spec = PhantomSpec::default();
    let (mut n, mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..100 {
        let s = generate_sample(&spec, i).unwrap();
        for ((&m, &c), &h) in s.mr.data().iter().zip(s.ct.data()).zip(s.head_mask.data()) {
            if h > 0.5 {
                let (x, y) = (m as f64, c as f64);
                n += 1.0;
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
                syy += y * y;
            }
        }
    }
    let var_x = sxx / n - (sx / n).powi(2);
    let cov = sxy / n - sx / n * sy / n;
    let var_y = syy / n - (sy / n).powi(2);
    let slope = cov / var_x;
    let residual_var = var_y - slope * cov;
    let rms = residual_var.max(0.0).sqrt();
    // the affine map cannot explain most of the head's CT variance
    assert!(rms > 200.0, "residual rms {rms} HU");
    assert!(rms / var_y.sqrt() > 0.5, "relative residual {}", rms / var_y.sqrt());
}

#[test]
fn split_counts_floor_with_remainder_to_train() {
    let f = SplitFractions::default();
    assert_eq!(f.counts(10).unwrap(), SplitCounts { train: 7, val: 1, test: 2 });
    assert_eq!(f.counts(400).unwrap(), SplitCounts { train: 280, val: 40, test: 80 });
    assert_eq!(f.counts(3).unwrap(), SplitCounts { train: 3, val: 0, test: 0 });
    let [tr, va, te] = split_indices(f.counts(10).unwrap());
    assert_eq!((tr, va, te), (0..7, 7..8, 8..10));
}

#[test]
fn bad_fractions_are_rejected() {
    let f = SplitFractions { train: 0.7, val: 0.2, test: 0.2 };
    assert!(f.counts(10).is_err());
    let f = SplitFractions { train: 1.2, val: -0.2, test: 0.0 };
    assert!(f.counts(10).is_err());
}

#[test]
fn degenerate_spec_is_rejected() {
    let mut spec = PhantomSpec::default();
    spec.bone_hu = Range::new(900.0, 900.0);
    assert!(generate_sample(&spec, 0).is_err());
    let mut spec = PhantomSpec::default();
    spec.head_semi_y_mm = Range::new(80.0, 120.0);
    assert!(spec.validate().is_err());
    assert!(PhantomSpec::default().validate().is_ok());
}
