use gvcl::data::{gen_synthetic_tasks, gen_toy_clusters, load_idx, make_split_tasks, write_idx, IdxPaths};
use gvcl::verify;

/// Ten 2×2 images; image `i` has label `i` and every pixel equal to `25·i`.
fn write_digits(dir: &std::path::Path) -> IdxPaths {
    let ys: Vec<u8> = (0..10).collect();
    let pixels: Vec<u8> = ys.iter().flat_map(|&y| [25 * y; 4]).collect();
    let paths = IdxPaths::in_dir(dir);
    write_idx(&paths.train_images, &paths.train_labels, &pixels, 2, 2, &ys).unwrap();
    write_idx(&paths.test_images, &paths.test_labels, &pixels, 2, 2, &ys).unwrap();
    paths
}

#[test]
fn idx_round_trip_scales_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_digits(dir.path());
    assert!(paths.exist());
    let d = load_idx(&paths.train_images, &paths.train_labels).unwrap();
    assert_eq!(d.len(), 10);
    assert_eq!(d.features(), 4);
    assert_eq!(d.classes(), 10);
    assert_eq!(d.inputs().at2(4, 3), 100.0 / 255.0);
    assert_eq!(d.labels()[9], 9);
}

#[test]
fn split_tasks_relabel_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_digits(dir.path()).load().unwrap();
    let doubled = train.duplicated().duplicated();
    let tasks = make_split_tasks(&doubled, &test, &[(0, 1), (8, 9)], 0.25).unwrap();
    assert_eq!(tasks.len(), 2);
    let t = &tasks.tasks()[1];
    assert_eq!(t.classes, 2);
    assert_eq!(t.train.len() + t.val.len(), 8);
    assert_eq!(t.val.len(), 2);
    assert_eq!(t.test.labels(), &[0, 1]);
    assert_eq!(t.test.inputs().at2(0, 0), 200.0 / 255.0);
    assert!(make_split_tasks(&train, &test, &[(0, 10)], 0.1).is_err());
}

#[test]
fn truncated_idx_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_digits(dir.path());
    let mut bytes = std::fs::read(&paths.train_images).unwrap();
    bytes.pop();
    std::fs::write(&paths.train_images, bytes).unwrap();
    let err = load_idx(&paths.train_images, &paths.train_labels).unwrap_err().to_string();
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
    verify::idx_rejects_inconsistent().unwrap();
}

#[test]
fn generators_are_seeded() {
    assert_eq!(gen_toy_clusters(3, 20, 0.4).unwrap(), gen_toy_clusters(3, 20, 0.4).unwrap());
    assert_ne!(gen_toy_clusters(3, 20, 0.4).unwrap(), gen_toy_clusters(4, 20, 0.4).unwrap());
    let s = gen_synthetic_tasks(1, 3, 5, 40, 10).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s.tasks()[0].train.features(), 5);
    assert_eq!(s, gen_synthetic_tasks(1, 3, 5, 40, 10).unwrap());
}
