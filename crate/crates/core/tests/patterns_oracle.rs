use maskface::patterns::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact IoU as a reduced-free fraction (intersection, union) from
/// rasterized coordinates.
fn iou_frac(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> (u128, u128) {
    let ix = a.2.min(b.2).saturating_sub(a.0.max(b.0)) as u128;
    let iy = a.3.min(b.3).saturating_sub(a.1.max(b.1)) as u128;
    let inter = ix * iy;
    let area = |r: (usize, usize, usize, usize)| ((r.2 - r.0) * (r.3 - r.1)) as u128;
    (inter, area(a) + area(b) - inter)
}

/// Brute-force label: every anchored rectangle in the canonical order,
/// block edges from the integer rounding rule, strict `>` keeps the first.
fn oracle_label(b: (usize, usize, usize, usize), k: usize, w: usize, h: usize) -> usize {
    if b.0 == b.2 || b.1 == b.3 {
        return 0;
    }
    let edge = |i: usize, dim: usize| ((i as f64) * dim as f64 / k as f64 + 0.5).floor() as usize;
    let mut best: Option<(u128, u128)> = None;
    let mut best_idx = 0;
    let mut idx = 0;
    for m in 1..=k {
        for n in 1..=k {
            for row in 0..=k - m {
                for col in 0..=k - n {
                    idx += 1;
                    let p = (edge(col, w), edge(row, h), edge(col + n, w), edge(row + m, h));
                    let f = iou_frac(b, p);
                    let better = match best {
                        None => true,
                        Some((bi, bu)) => f.0 * bu > bi * f.1,
                    };
                    if better {
                        best = Some(f);
                        best_idx = idx;
                    }
                }
            }
        }
    }
    best_idx
}

fn random_box(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PixelBox {
    let (a, b) = (rng.random_range(0..=w), rng.random_range(0..=w));
    let (c, d) = (rng.random_range(0..=h), rng.random_range(0..=h));
    PixelBox::new(a.min(b), c.min(d), a.max(b), c.max(d))
}

#[test]
fn matcher_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for k in 3..=6 {
        for &(w, h) in &[(48, 56), (96, 112)] {
            let matcher = PatternMatcher::new(enumerate_patterns(k).unwrap(), w, h);
            let mut mismatches = 0;
            for i in 0..10_000 {
                // every fifth box snaps to block edges to provoke ties
                let b = if i % 5 == 0 {
                    let snap = |v: usize, dim: usize| (v * k / dim.max(1)) * dim / k;
                    let r = random_box(&mut rng, w, h);
                    PixelBox::new(snap(r.x0, w), snap(r.y0, h), snap(r.x1, w).max(snap(r.x0, w)), snap(r.y1, h).max(snap(r.y0, h)))
                } else {
                    random_box(&mut rng, w, h)
                };
                let want = oracle_label((b.x0, b.y0, b.x1, b.y1), k, w, h);
                if matcher.match_box(&b) != want {
                    mismatches += 1;
                }
            }
            assert_eq!(mismatches, 0, "K={k} {w}x{h}");
        }
    }
}

#[test]
fn codebook_sizes_and_size_matrix_by_enumeration() {
    for k in 1..=8 {
        let book = enumerate_patterns(k).unwrap();
        let t = k * (k + 1) / 2;
        assert_eq!(book.len(), t * t + 1);
        let sm = size_matrix(k).unwrap();
        assert_eq!(sm.total() + 1, book.len());
        for i in 1..=k {
            for j in 1..=k {
                let count = book
                    .patterns()
                    .iter()
                    .filter(|p| matches!(p, Pattern::Rect { m, n, .. } if *m == i && *n == j))
                    .count();
                assert_eq!(sm.get(i, j), count, "K={k} ({i},{j})");
            }
        }
    }
    assert_eq!(size_matrix(5).unwrap().total(), 225);
    assert!(enumerate_patterns(0).is_err());
    assert!(enumerate_patterns(17).is_err());
}

#[test]
fn iou_of_offset_blocks_by_rasterization() {
    // (0,0,2,2) vs (1,1,3,3) in block units, rasterized at 10 px per block
    let a = PixelBox::new(0, 0, 20, 20);
    let b = PixelBox::new(10, 10, 30, 30);
    let mut inter = 0;
    let mut union = 0;
    for y in 0..30 {
        for x in 0..30 {
            let ina = x < 20 && y < 20;
            let inb = (10..30).contains(&x) && (10..30).contains(&y);
            inter += (ina && inb) as usize;
            union += (ina || inb) as usize;
        }
    }
    assert!((iou(&a, &b) - inter as f64 / union as f64).abs() < 1e-15);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
}

#[test]
fn block_mask_by_rasterization() {
    let p = Pattern::Rect {
        row: 0,
        col: 0,
        m: 2,
        n: 3,
    };
    let g = pattern_to_block_mask(&p, 4);
    for r in 0..4 {
        for c in 0..4 {
            assert_eq!(g.get(r, c), r < 2 && c < 3);
        }
    }
}

fn arb_box() -> impl Strategy<Value = PixelBox> {
    (0usize..100, 0usize..100, 0usize..100, 0usize..100)
        .prop_map(|(a, b, c, d)| PixelBox::new(a.min(b), c.min(d), a.max(b), c.max(d)))
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        if a.area() > 0 {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn enumeration_is_deterministic(k in 1usize..=8) {
        prop_assert_eq!(enumerate_patterns(k).unwrap(), enumerate_patterns(k).unwrap());
    }

    #[test]
    fn block_masks_are_distinct_with_right_popcount(k in 1usize..=6) {
        let book = enumerate_patterns(k).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in book.patterns() {
            let g = pattern_to_block_mask(p, k);
            prop_assert_eq!(g.popcount(), p.area());
            prop_assert!(seen.insert((g, p.is_clean())));
        }
    }

    #[test]
    fn pattern_boxes_match_themselves(k in 1usize..=8, w in 16usize..128, h in 16usize..128) {
        let matcher = PatternMatcher::new(enumerate_patterns(k).unwrap(), w, h);
        for i in 1..matcher.codebook().len() {
            let b = matcher.pixel_box(i);
            prop_assert!(b.fits_in(w, h));
            prop_assert_eq!(matcher.match_box(&b), i);
        }
    }

    #[test]
    fn random_boxes_match_oracle(k in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matcher = PatternMatcher::new(enumerate_patterns(k).unwrap(), 48, 56);
        for _ in 0..20 {
            let b = random_box(&mut rng, 48, 56);
            prop_assert_eq!(matcher.match_box(&b), oracle_label((b.x0, b.y0, b.x1, b.y1), k, 48, 56));
        }
    }
}
