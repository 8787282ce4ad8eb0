use super::*;

fn small_recipe() -> Recipe {
    Recipe {
        per_family: 3,
        n_points: 128,
        n_views: 4,
        ..Recipe::default_with_seed(7)
    }
}

#[test]
fn default_recipe_writes_64_clouds_and_768_views() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&Recipe::default_with_seed(1), dir.path()).unwrap();
    assert_eq!(m.shapes.len(), 64);
    assert_eq!(m.views.len(), 768);
    let count = |sub: &str, ext: &str| {
        std::fs::read_dir(dir.path().join(sub))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == ext)
            .count()
    };
    assert_eq!(count("clouds", "spcd"), 64);
    assert_eq!(count("views", "vfeat"), 768);
    assert_eq!(m.class_ids().len(), 4);
}

#[test]
fn files_load_back_to_in_memory_tuples() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = small_recipe();
    let written = gen_dataset(&recipe, dir.path()).unwrap();
    let (manifest, tuples) = generate_in_memory(&recipe).unwrap();
    assert_eq!(written, manifest);
    let read = DatasetManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read, manifest);
    let loaded = load_tuples(&read, dir.path()).unwrap();
    assert_eq!(loaded, tuples);
    for t in &loaded {
        assert_eq!(t.views.len(), recipe.n_views);
        assert!((t.cloud.max_norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn missing_view_files_are_projected() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = small_recipe();
    let m = gen_dataset(&recipe, dir.path()).unwrap();
    std::fs::remove_dir_all(dir.path().join("views")).unwrap();
    let (_, tuples) = generate_in_memory(&recipe).unwrap();
    assert_eq!(load_tuples(&m, dir.path()).unwrap(), tuples);
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let a = generate_in_memory(&small_recipe()).unwrap();
    let b = generate_in_memory(&small_recipe()).unwrap();
    assert_eq!(a.1, b.1);
    let c = generate_in_memory(&Recipe {
        seed: 8,
        ..small_recipe()
    })
    .unwrap();
    assert_ne!(a.1[0].cloud, c.1[0].cloud);
}

#[test]
fn variants_within_a_family_differ() {
    let (_, tuples) = generate_in_memory(&small_recipe()).unwrap();
    for pair in tuples.windows(2) {
        assert_ne!(pair[0].views, pair[1].views);
    }
}

#[test]
fn vfeat_round_trip_and_corruption() {
    let view = ViewFeature {
        view_index: 3,
        descriptor: vec![0.25, 0.75, 0.0, 0.0],
    };
    let bytes = encode_vfeat(&view);
    assert_eq!(bytes.len(), 12 + 16);
    assert_eq!(decode_vfeat(&bytes, 3).unwrap(), view);
    assert!(matches!(decode_vfeat(&bytes[..20], 3), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_vfeat(&bad, 3), Err(Error::Format(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(decode_vfeat(&extra, 3), Err(Error::Format(_))));
}

#[test]
fn manifest_rejects_duplicates_and_dangling_views() {
    let (m, _) = generate_in_memory(&small_recipe()).unwrap();
    let mut dup = m.clone();
    dup.shapes.push(dup.shapes[0].clone());
    assert!(matches!(
        DatasetManifest::from_jsonl(&dup.to_jsonl()),
        Err(Error::DuplicateId(_))
    ));
    let mut dangling = m.clone();
    dangling.views[0].shape_id = "nope".into();
    assert!(matches!(
        DatasetManifest::from_jsonl(&dangling.to_jsonl()),
        Err(Error::Format(_))
    ));
    assert!(matches!(DatasetManifest::from_jsonl("{\"record\":1}"), Err(Error::Format(_))));
}

#[test]
fn image_centered_split_partitions_views_per_shape() {
    let (m, _) = generate_in_memory(&Recipe::default_with_seed(2)).unwrap();
    let (train, test) = split(&m, SplitMode::ImageCentered, 0.5, 9).unwrap();
    assert_eq!(train.shapes, m.shapes);
    assert_eq!(test.shapes, m.shapes);
    assert_eq!(train.views.len(), 384);
    assert_eq!(test.views.len(), 384);
    for s in &m.shapes {
        let a: BTreeSet<_> = train.views.iter().filter(|v| v.shape_id == s.shape_id).map(|v| v.view_index).collect();
        let b: BTreeSet<_> = test.views.iter().filter(|v| v.shape_id == s.shape_id).map(|v| v.view_index).collect();
        assert_eq!(a.len(), 6);
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 12);
    }
    assert_eq!(train.split.as_ref().unwrap().side, SplitSide::Train);
    let again = split(&m, SplitMode::ImageCentered, 0.5, 9).unwrap();
    assert_eq!(again.0, train);
}

#[test]
fn shape_centered_split_is_stratified() {
    let (m, _) = generate_in_memory(&Recipe::default_with_seed(2)).unwrap();
    let (train, test) = split(&m, SplitMode::ShapeCentered, 0.75, 4).unwrap();
    assert_eq!(train.shapes.len(), 48);
    assert_eq!(test.shapes.len(), 16);
    for class in m.class_ids() {
        assert_eq!(test.shapes.iter().filter(|s| s.class_id == class).count(), 4);
    }
    assert!(test.views.iter().all(|v| !train.shapes.iter().any(|s| s.shape_id == v.shape_id)));
}

#[test]
fn degenerate_split_fractions_rejected() {
    let (m, _) = generate_in_memory(&small_recipe()).unwrap();
    assert!(matches!(split(&m, SplitMode::ImageCentered, 0.0, 1), Err(Error::Parameter(_))));
    assert!(matches!(split(&m, SplitMode::ImageCentered, 0.01, 1), Err(Error::Parameter(_))));
    assert!(matches!(split(&m, SplitMode::ShapeCentered, 1.0, 1), Err(Error::Parameter(_))));
}

#[test]
fn select_tuples_keeps_listed_views() {
    let (m, tuples) = generate_in_memory(&small_recipe()).unwrap();
    let (train, _) = split(&m, SplitMode::ImageCentered, 0.5, 3).unwrap();
    let picked = select_tuples(&tuples, &train);
    assert_eq!(picked.len(), tuples.len());
    assert_eq!(picked.iter().map(|t| t.views.len()).sum::<usize>(), train.views.len());
}
