use np_robust::data::{idx_bytes, load_idx, subset, synth_manifold, write_idx, Dataset, SynthKind};
use np_robust::tensor::{sq_dist, Tensor};

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("np-robust-data-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn blank_images_load_as_zeros() {
    let ds = Dataset::new(Tensor::zeros(&[3, 1, 4, 4]), vec![0, 1, 2], "train").unwrap();
    let (img, lab) = (tmp("zero-images.idx"), tmp("zero-labels.idx"));
    write_idx(&ds, &img, &lab).unwrap();
    let back = load_idx(&img, &lab).unwrap();
    assert!(back.images.data().iter().all(|&v| v == 0.0));
    assert_eq!(back.images.shape(), &[3, 1, 4, 4]);
}

#[test]
fn gzip_round_trip_keeps_bytes() {
    let pixels: Vec<f64> = (0..2 * 28 * 28).map(|i| f64::from((i * 37 % 256) as u8) / 255.0).collect();
    let ds = Dataset::new(Tensor::new(vec![2, 1, 28, 28], pixels).unwrap(), vec![7, 3], "test").unwrap();
    let (img, lab) = (tmp("two-images.idx.gz"), tmp("two-labels.idx.gz"));
    write_idx(&ds, &img, &lab).unwrap();
    let back = load_idx(&img, &lab).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, vec![7, 3]);
    assert_eq!(back.fingerprint(), ds.fingerprint());
    let (raw, _) = idx_bytes(&ds).unwrap();
    assert_eq!(&raw[..4], &[0, 0, 8, 3]);
}

#[test]
fn full_size_subset_is_the_whole_set() {
    let ds = synth_manifold(SynthKind::GaussianBlobs { classes: 4, dim: 3 }, 40, 0.1, 0).unwrap();
    let s = subset(&ds, ds.len(), 9).unwrap();
    assert_eq!(s.images, ds.images);
    assert_eq!(s.labels, ds.labels);
    assert_eq!(subset(&ds, 20, 3).unwrap().labels, subset(&ds, 20, 3).unwrap().labels);
}

#[test]
fn moons_are_separable_by_one_neighbor() {
    let ds = synth_manifold(SynthKind::TwoMoons, 1000, 0.05, 21).unwrap();
    // Alternate points between the reference and held-out halves.
    let (refs, held): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| i % 2 == 0);
    let flat = ds.flat();
    let hits = held
        .iter()
        .filter(|&&i| {
            let nearest = refs
                .iter()
                .min_by(|&&a, &&b| {
                    sq_dist(flat.row(i), flat.row(a)).total_cmp(&sq_dist(flat.row(i), flat.row(b)))
                })
                .unwrap();
            ds.labels[*nearest] == ds.labels[i]
        })
        .count();
    let acc = hits as f64 / held.len() as f64;
    assert!(acc >= 0.95, "1-NN accuracy {acc}");
}
