use darwin_core::classify::{activation_map, build_classifier, evaluate_classifier, train_classifier, LabeledPatches};
use darwin_core::mask::Mask;
use darwin_core::segment::{build_segmenter, evaluate_segmentation, segment, segment_many, train_segmenter, MaskedPatches};
use darwin_nn::TrainConfig;
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 24;

struct Disk {
    image: GrayImage,
    mask: Mask,
}

/// A noisy disk of the given gray level on a flat background.
fn disk(rng: &mut ChaCha8Rng, level: f64, jitter: f64) -> Disk {
    let c = SIZE as f64 / 2.0;
    let (cx, cy) = (c + rng.random_range(-jitter..=jitter), c + rng.random_range(-jitter..=jitter));
    let r = rng.random_range(5.0..8.0);
    let inside = |x: usize, y: usize| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) < r;
    let image = GrayImage::from_fn(SIZE as u32, SIZE as u32, |x, y| {
        let base = if inside(x as usize, y as usize) { level } else { 120.0 };
        image::Luma([(base + rng.random_range(-12.0..12.0f64)).clamp(0.0, 255.0) as u8])
    });
    Disk { image, mask: Mask::from_fn(SIZE, SIZE, inside) }
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, lr: 0.01, momentum: 0.9, patience: epochs, seed }
}

/// Bright (class 0) and dark (class 1) disks, alternating.
fn bright_and_dark(n: usize, seed: u64) -> (Vec<Disk>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disks = (0..n).map(|i| disk(&mut rng, if i % 2 == 0 { 220.0 } else { 30.0 }, 3.0)).collect();
    (disks, (0..n).map(|i| i % 2).collect())
}

fn patches(d: &[Disk]) -> Vec<&GrayImage> {
    d.iter().map(|d| &d.image).collect()
}

fn masked(d: &[Disk]) -> (Vec<&GrayImage>, Vec<&Mask>) {
    (patches(d), d.iter().map(|d| &d.mask).collect())
}

#[test]
fn separable_disks_are_classified() {
    let names = vec!["bright".to_string(), "dark".to_string()];
    let (train, tl) = bright_and_dark(160, 1);
    let (val, vl) = bright_and_dark(100, 2);
    let mut model = build_classifier("two_conv", SIZE, &names, 3, "c").unwrap();
    let (t, v) = (LabeledPatches { patches: patches(&train), labels: tl }, LabeledPatches { patches: patches(&val), labels: vl });
    train_classifier(&mut model, &t, &v, &train_cfg(10, 1)).unwrap();
    let (eval, _) = evaluate_classifier(&model, &v).unwrap();
    assert!(eval.accuracy >= 0.99, "accuracy {}", eval.accuracy);

    // The last feature map lights up on the disk rather than the background.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probes: Vec<Disk> = (0..20).map(|_| disk(&mut rng, 220.0, 0.0)).collect();
    let brighter_inside = probes
        .iter()
        .filter(|d| {
            let map = activation_map(&model, &d.image).unwrap();
            let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
            for (i, v) in map.values.iter().enumerate() {
                let acc = if d.mask.get(i % SIZE, i / SIZE) { &mut inside } else { &mut outside };
                acc.0 += v;
                acc.1 += 1;
            }
            inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64
        })
        .count();
    assert!(brighter_inside >= 16, "{brighter_inside}/20 maps brighter inside the disk");
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let names = vec!["a".to_string(), "b".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (train, _) = bright_and_dark(160, 6);
    let (val, _) = bright_and_dark(400, 7);
    let tl: Vec<usize> = (0..train.len()).map(|_| rng.random_range(0..2)).collect();
    let vl: Vec<usize> = (0..val.len()).map(|_| rng.random_range(0..2)).collect();
    let mut model = build_classifier("two_conv", SIZE, &names, 3, "c").unwrap();
    let (t, v) = (LabeledPatches { patches: patches(&train), labels: tl }, LabeledPatches { patches: patches(&val), labels: vl });
    train_classifier(&mut model, &t, &v, &train_cfg(10, 1)).unwrap();
    let (eval, _) = evaluate_classifier(&model, &v).unwrap();
    assert!((eval.accuracy - 0.5).abs() <= 0.1, "accuracy {}", eval.accuracy);
}

#[test]
fn disks_are_segmented() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut make = |n: usize| -> Vec<Disk> { (0..n).map(|i| disk(&mut rng, if i % 2 == 0 { 210.0 } else { 40.0 }, 4.0)).collect() };
    let (train, val, held) = (make(120), make(40), make(10));
    let ((tp, tm), (vp, vm)) = (masked(&train), masked(&val));
    let mut model = build_segmenter("unet_small", SIZE, 2, "s").unwrap();
    train_segmenter(&mut model, &MaskedPatches { patches: tp, masks: tm }, &MaskedPatches { patches: vp.clone(), masks: vm.clone() }, &train_cfg(15, 2)).unwrap();
    let predicted = segment_many(&model, &vp).unwrap();
    let eval = evaluate_segmentation(&predicted.iter().collect::<Vec<_>>(), &vm).unwrap();
    assert!(eval.jaccard >= 0.85, "validation jaccard {}", eval.jaccard);
    for d in &held {
        let m = segment(&model, &d.image).unwrap().mask;
        let e = evaluate_segmentation(&[&m], &[&d.mask]).unwrap();
        assert!(e.jaccard >= 0.85, "held-out mask IoU {}", e.jaccard);
    }
}
