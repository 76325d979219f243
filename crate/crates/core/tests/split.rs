use std::collections::{BTreeSet, HashSet};

use capfeed::dataset::{BBox, CaptionRecord, ImageRecord, Provenance, SplitTag};
use capfeed::split::{assign_splits, kmeans, EmbeddingTable};
use image::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blobs(seed: u64, per: usize) -> (Array2<f64>, Vec<usize>) {
    // Unit-distance centers (equilateral triangle, side 1).
    let centers = [(0.0, 0.0), (1.0, 0.0), (0.5, 3f64.sqrt() / 2.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (b, &(cx, cy)) in centers.iter().enumerate() {
        for _ in 0..per {
            data.push(cx + noise.sample(&mut rng));
            data.push(cy + noise.sample(&mut rng));
            labels.push(b);
        }
    }
    (Array2::from_shape_vec((3 * per, 2), data).unwrap(), labels)
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let pairs: BTreeSet<(usize, usize)> = a.iter().copied().zip(b.iter().copied()).collect();
    let left: HashSet<usize> = pairs.iter().map(|p| p.0).collect();
    let right: HashSet<usize> = pairs.iter().map(|p| p.1).collect();
    pairs.len() == left.len() && pairs.len() == right.len()
}

#[test]
fn three_blobs_recovered_for_ten_seeds() {
    for seed in 0..10 {
        let (x, labels) = blobs(seed, 30);
        let r = kmeans(x.view(), 3, seed, 300, 1e-4).unwrap();
        assert!(same_partition(&r.assignments, &labels), "seed {seed}");
    }
}

fn brute_force_two_means(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut cost = 0.0;
        for side in [true, false] {
            let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
            let m = members.len() as f64;
            let mean: Vec<f64> = (0..x.ncols()).map(|d| members.iter().map(|&i| x[[i, d]]).sum::<f64>() / m).collect();
            cost += members
                .iter()
                .map(|&i| (0..x.ncols()).map(|d| (x[[i, d]] - mean[d]).powi(2)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(cost);
    }
    best
}

#[test]
fn small_instances_reach_brute_force_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..300 {
        let n = rng.gen_range(2..=8);
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let r = kmeans(x.view(), 2, trial, 300, 1e-4).unwrap();
        let opt = brute_force_two_means(&x);
        assert!((r.inertia - opt).abs() <= 1e-9, "trial {trial}: {} vs {opt}", r.inertia);
    }
}

fn image(id: &str) -> ImageRecord {
    ImageRecord::from_rgb(id, RgbImage::new(4, 4), Vec::<BBox>::new(), SplitTag::Train).unwrap()
}

fn concept_table() -> EmbeddingTable {
    let mut t = EmbeddingTable::new(2);
    for (w, v) in [
        ("dog", [1.0, 0.0]),
        ("puppy", [0.95, 0.05]),
        ("cat", [0.9, 0.1]),
        ("car", [0.0, 1.0]),
        ("bus", [0.05, 0.95]),
        ("truck", [0.1, 0.9]),
        ("pizza", [-1.0, -1.0]),
        ("cake", [-0.95, -1.05]),
        ("sandwich", [-1.05, -0.95]),
    ] {
        t.insert(w, v.to_vec()).unwrap();
    }
    t
}

#[test]
fn splits_partition_and_balance() {
    let words = ["dog", "puppy", "cat", "car", "bus", "truck", "pizza", "cake", "sandwich"];
    let mut images = Vec::new();
    let mut captions = Vec::new();
    for i in 0..90 {
        let id = format!("img{i}");
        images.push(image(&id));
        let w = words[i % words.len()];
        captions.push(CaptionRecord::new(format!("{id}-0"), &id, format!("a {w} in the picture"), Provenance::GroundTruth));
        captions.push(CaptionRecord::new(format!("{id}-1"), &id, format!("the {w}"), Provenance::GroundTruth));
    }
    // One image without any noun phrase.
    images.push(image("quiet"));
    captions.push(CaptionRecord::new("quiet-0", "quiet", "running quickly", Provenance::GroundTruth));

    let out = assign_splits(&images, &captions, &concept_table(), 3, 7).unwrap();
    let all: Vec<&String> = out.splits.iter().flat_map(|s| &s.image_ids).collect();
    let distinct: HashSet<&String> = all.iter().copied().collect();
    assert_eq!(all.len(), images.len());
    assert_eq!(distinct.len(), images.len());

    let sizes = out.sizes();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    for s in &sizes {
        assert!((*s as f64 - mean).abs() <= 0.2 * mean, "{sizes:?}");
    }
    // Images about the same concept land together.
    let split_of = |id: &str| out.splits.iter().position(|s| s.image_ids.iter().any(|x| x == id)).unwrap();
    assert_eq!(split_of("img0"), split_of("img1"));
    assert_ne!(split_of("img0"), split_of("img3"));
    assert_ne!(split_of("img3"), split_of("img6"));
}

#[test]
fn single_split_holds_everything() {
    let images: Vec<_> = (0..5).map(|i| image(&format!("i{i}"))).collect();
    let captions: Vec<_> = (0..5)
        .map(|i| CaptionRecord::new(format!("c{i}"), format!("i{i}"), "a dog", Provenance::GroundTruth))
        .collect();
    let out = assign_splits(&images, &captions, &concept_table(), 1, 0).unwrap();
    assert_eq!(out.splits.len(), 1);
    assert_eq!(out.splits[0].image_ids.len(), 5);
}

#[test]
fn seeded_determinism() {
    let images: Vec<_> = (0..12).map(|i| image(&format!("i{i}"))).collect();
    let words = ["dog", "car", "cake", "zebra"];
    let captions: Vec<_> = (0..12)
        .map(|i| CaptionRecord::new(format!("c{i}"), format!("i{i}"), format!("a {}", words[i % 4]), Provenance::GroundTruth))
        .collect();
    let a = assign_splits(&images, &captions, &concept_table(), 3, 11).unwrap();
    let b = assign_splits(&images, &captions, &concept_table(), 3, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.oov_phrases, vec!["zebra"]);
}
