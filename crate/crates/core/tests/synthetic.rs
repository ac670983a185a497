use std::collections::HashSet;

use ringfed::synth::{build_scenario, generate_volume, mix_seed, CenterShift, TaskSpec};

#[test]
fn lesion_statistics_over_ten_thousand_volumes() {
    let spec = TaskSpec::default();
    let (mut lesions, mut small) = (0usize, 0usize);
    let n = 10_000;
    for i in 0..n {
        let v = generate_volume(&spec, &CenterShift::IDENTITY, i, mix_seed(99, i));
        lesions += v.lesions.len();
        small += v.lesions.iter().filter(|l| l.small).count();
    }
    let mean = lesions as f64 / n as f64;
    let frac = small as f64 / lesions as f64;
    assert!((mean - 2.2).abs() <= 0.05, "mean lesion count {mean}");
    assert!((frac - 0.444).abs() <= 0.02, "small fraction {frac}");
}

#[test]
fn seven_center_counts_and_disjoint_seeds() {
    let spec = TaskSpec::default();
    let sc = build_scenario(&spec, 7, 100, 67, 103, &CenterShift::evenly_spaced(7), 5).unwrap();
    assert_eq!(sc.centers.len(), 7);
    assert!(sc.centers.iter().all(|c| c.volumes.len() == 100));
    assert_eq!(sc.validation.len(), 67);
    assert_eq!(sc.test.len(), 103);
    let all: Vec<_> = sc
        .centers
        .iter()
        .flat_map(|c| c.volumes.iter())
        .chain(&sc.validation)
        .chain(&sc.test)
        .collect();
    let seeds: HashSet<u64> = all.iter().map(|v| v.seed).collect();
    let ids: HashSet<u64> = all.iter().map(|v| v.id).collect();
    assert_eq!(seeds.len(), all.len());
    assert_eq!(ids.len(), all.len());
}

#[test]
fn shifts_touch_only_the_image() {
    let spec = TaskSpec::default();
    let shift = CenterShift { intensity_gain: 1.3, intensity_bias: 0.2, noise_sigma: 0.05, contrast_gamma: 0.7 };
    let a = generate_volume(&spec, &CenterShift::IDENTITY, 1, 42);
    let b = generate_volume(&spec, &shift, 1, 42);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.lesions, b.lesions);
    assert_ne!(a.image, b.image);
}

#[test]
fn master_seed_changes_every_set() {
    let spec = TaskSpec::default();
    let shifts = CenterShift::evenly_spaced(2);
    let a = build_scenario(&spec, 2, 3, 2, 2, &shifts, 1).unwrap();
    let b = build_scenario(&spec, 2, 3, 2, 2, &shifts, 2).unwrap();
    assert_ne!(a.centers[0].volumes[0].image, b.centers[0].volumes[0].image);
    assert_ne!(a.test[0].image, b.test[0].image);
}
