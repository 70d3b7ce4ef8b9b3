use proptest::prelude::*;
use runseg::io::{load_image, load_mask};
use runseg::synth::{
    generate, make_suite, read_manifest, scale_for_seed, scene_checksum, suite_specs,
    verify_manifest, Difficulty, SceneSpec, Shape, Texture, SCALE_RANGE,
};

#[test]
fn same_spec_same_scene() {
    for spec in suite_specs(6, Difficulty::Hard, 5, 32).unwrap() {
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_unit_range());
        assert!(a.1.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn suites_cover_every_shape_and_texture() {
    let specs = suite_specs(40, Difficulty::Easy, 1, 16).unwrap();
    for s in [Shape::Ellipse, Shape::Blob, Shape::Annulus] {
        assert!(specs.iter().any(|x| x.shape == s));
    }
    for t in [Texture::Flat, Texture::ValueNoise, Texture::Stripes] {
        assert!(specs.iter().any(|x| x.texture == t));
    }
    assert!(specs.iter().all(|s| (s.delta, s.sigma) == (0.35, 0.01)));
    assert!(specs
        .iter()
        .all(|s| s.scale == scale_for_seed(s.seed)
            && (SCALE_RANGE.0..SCALE_RANGE.1).contains(&s.scale)));
    assert!(suite_specs(0, Difficulty::Easy, 1, 16).is_err());
}

#[test]
fn suite_on_disk_matches_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = make_suite(16, Difficulty::Easy, 3, 24, dir.path()).unwrap();
    let manifest = read_manifest(&path).unwrap();
    assert_eq!(manifest.entries.len(), 16);
    assert_eq!(manifest.size, 24);
    verify_manifest(&manifest).unwrap();
    for e in &manifest.entries {
        let c = load_image(dir.path().join(&e.path)).unwrap();
        let gt = load_mask(dir.path().join(e.gt_path())).unwrap();
        assert_eq!(scene_checksum(&c, &gt).unwrap(), e.checksum);
    }

    let again = tempfile::tempdir().unwrap();
    let path2 = make_suite(16, Difficulty::Easy, 3, 24, again.path()).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );

    let mut tampered = manifest.clone();
    tampered.entries[3].spec.delta = 0.2;
    assert!(matches!(
        verify_manifest(&tampered),
        Err(runseg::Error::Checksum(_))
    ));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    assert!(matches!(
        make_suite(1, Difficulty::Easy, 1, 16, file.join("sub")),
        Err(runseg::Error::Io(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ellipse_area_tracks_scale(seed in any::<u64>(), scale in 0.2f64..0.6) {
        let spec = SceneSpec {
            seed,
            size: 64,
            shape: Shape::Ellipse,
            texture: Texture::ValueNoise,
            delta: 0.2,
            sigma: 0.05,
            scale,
        };
        let (c, gt) = generate(&spec).unwrap();
        prop_assert!(c.is_unit_range());
        let frac = gt.data().iter().sum::<f64>() / gt.len() as f64;
        let target = scale * scale;
        prop_assert!((frac - target).abs() <= 0.1 * target, "area {frac} vs {target}");
    }
}
