use meda_core::image_hash::{average_hash, similarity, AHash, GRID};
use proptest::prelude::*;

/// Straightforward re-derivation: block means over equal cells, compared to
/// their average. Only valid for sides divisible by 8 and tie-free images.
fn naive_hash(img: &[f64], side: usize) -> u64 {
    let cell = side / GRID;
    let mut means = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            let mut s = 0.0;
            for y in r * cell..(r + 1) * cell {
                for x in c * cell..(c + 1) * cell {
                    s += img[y * side + x];
                }
            }
            means.push(s / (cell * cell) as f64);
        }
    }
    let avg = means.iter().sum::<f64>() / 64.0;
    means
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= avg)
        .fold(0, |acc, (i, _)| acc | 1u64 << i)
}

fn image(side: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, side * side)
}

proptest! {
    #[test]
    fn matches_naive_block_means(img in image(16)) {
        let h = average_hash(&img, 16, 16, 1).unwrap();
        prop_assert_eq!(h.bits(), naive_hash(&img, 16));
    }

    #[test]
    fn invariant_under_positive_affine_intensity(img in image(16), a in 0.1..5.0f64, b in -2.0..2.0f64) {
        let scaled: Vec<f64> = img.iter().map(|v| a * v + b).collect();
        prop_assert_eq!(
            average_hash(&img, 16, 16, 1).unwrap(),
            average_hash(&scaled, 16, 16, 1).unwrap()
        );
    }

    #[test]
    fn invariant_under_integer_upscaling(img in image(8), factor in 1usize..5) {
        let side = 8 * factor;
        let big: Vec<f64> = (0..side * side)
            .map(|i| img[(i / side / factor) * 8 + (i % side) / factor])
            .collect();
        prop_assert_eq!(
            average_hash(&img, 8, 8, 1).unwrap(),
            average_hash(&big, side, side, 1).unwrap()
        );
    }

    #[test]
    fn similarity_symmetric_and_bounded(a: u64, b: u64) {
        let (ha, hb) = (AHash::from_bits(a), AHash::from_bits(b));
        let s = similarity(ha, hb);
        prop_assert_eq!(s, similarity(hb, ha));
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(similarity(ha, ha), 1.0);
    }

    #[test]
    fn channels_average_to_gray(img in image(16)) {
        let rgb: Vec<f64> = img.iter().flat_map(|&v| [v, v, v]).collect();
        prop_assert_eq!(
            average_hash(&img, 16, 16, 1).unwrap(),
            average_hash(&rgb, 16, 16, 3).unwrap()
        );
    }
}

#[test]
fn complementary_halves() {
    let side = 16;
    let left: Vec<f64> = (0..side * side).map(|i| if i % side < side / 2 { 1.0 } else { 0.0 }).collect();
    let right: Vec<f64> = left.iter().map(|v| 1.0 - v).collect();
    let (a, b) = (
        average_hash(&left, side, side, 1).unwrap(),
        average_hash(&right, side, side, 1).unwrap(),
    );
    assert_eq!(a.bits() ^ b.bits(), u64::MAX);
    assert_eq!(similarity(a, b), 0.0);
}

#[test]
fn odd_sizes_are_accepted() {
    let img = vec![0.5; 28 * 28];
    assert_eq!(average_hash(&img, 28, 28, 1).unwrap().bits(), u64::MAX);
    let small: Vec<f64> = (0..5 * 3).map(|i| i as f64).collect();
    assert!(average_hash(&small, 5, 3, 1).is_ok());
    assert!(average_hash(&small, 5, 4, 1).is_err());
}
