//! Proximate occlusion patterns over a `K x K` block grid.
//!
//! Adjacent blocks are assumed to share occlusion status, so an occlusion
//! is approximated by one axis-aligned rectangle of blocks. Together with
//! the clean (no occlusion) pattern this gives `(K(K+1)/2)^2 + 1` classes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_GRID: usize = 16;

/// One entry of the codebook. `m` is the height and `n` the width in
/// blocks; `row`/`col` anchor the top-left block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Pattern {
    Clean,
    Rect {
        row: usize,
        col: usize,
        m: usize,
        n: usize,
    },
}

impl Pattern {
    pub fn is_clean(&self) -> bool {
        matches!(self, Pattern::Clean)
    }

    /// Number of covered blocks.
    pub fn area(&self) -> usize {
        match *self {
            Pattern::Clean => 0,
            Pattern::Rect { m, n, .. } => m * n,
        }
    }

    pub fn fits(&self, k: usize) -> bool {
        match *self {
            Pattern::Clean => true,
            Pattern::Rect { row, col, m, n } => {
                m >= 1 && n >= 1 && row + m <= k && col + n <= k
            }
        }
    }
}

fn check_grid(k: usize) -> Result<()> {
    if (1..=MAX_GRID).contains(&k) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "grid resolution K={k} outside [1, {MAX_GRID}]"
        )))
    }
}

/// Closed-form codebook size for grid resolution `k`.
pub fn codebook_len(k: usize) -> usize {
    let t = k * (k + 1) / 2;
    t * t + 1
}

/// Ordered pattern set: index 0 is clean, rectangles follow sorted by
/// `(m, n, row, col)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCodebook {
    k: usize,
    patterns: Vec<Pattern>,
}

impl PatternCodebook {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn get(&self, index: usize) -> Option<Pattern> {
        self.patterns.get(index).copied()
    }

    /// Position of `p` in canonical order.
    pub fn index_of(&self, p: &Pattern) -> Option<usize> {
        match *p {
            Pattern::Clean => Some(0),
            Pattern::Rect { .. } if !p.fits(self.k) => None,
            Pattern::Rect { .. } => self.patterns.iter().position(|q| q == p),
        }
    }

    /// Codebook as a JSON array of `{kind,row,col,m,n}` objects.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.patterns)?)
    }
}

/// Enumerate the clean pattern followed by every anchored rectangle.
pub fn enumerate_patterns(k: usize) -> Result<PatternCodebook> {
    check_grid(k)?;
    let mut patterns = Vec::with_capacity(codebook_len(k));
    patterns.push(Pattern::Clean);
    for m in 1..=k {
        for n in 1..=k {
            for row in 0..=k - m {
                for col in 0..=k - n {
                    patterns.push(Pattern::Rect { row, col, m, n });
                }
            }
        }
    }
    debug_assert_eq!(patterns.len(), codebook_len(k));
    Ok(PatternCodebook { k, patterns })
}

/// Count of rectangle patterns per size; `get(i, j)` is 1-based in block
/// units (height `i`, width `j`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SizeMatrix {
    k: usize,
    counts: Vec<usize>,
}

impl SizeMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        assert!((1..=self.k).contains(&i) && (1..=self.k).contains(&j));
        self.counts[(i - 1) * self.k + (j - 1)]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.counts.chunks(self.k)
    }
}

impl fmt::Display for SizeMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.counts.iter().max().map_or(1, |v| v.to_string().len());
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:>width$}")).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

pub fn size_matrix(k: usize) -> Result<SizeMatrix> {
    check_grid(k)?;
    let counts = (1..=k)
        .flat_map(|i| (1..=k).map(move |j| (k - i + 1) * (k - j + 1)))
        .collect();
    Ok(SizeMatrix { k, counts })
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub const EMPTY: PixelBox = PixelBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn fits_in(&self, w_img: usize, h_img: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= w_img && self.y1 <= h_img
    }

    pub fn intersection_area(&self, other: &PixelBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    /// Corners divided by image dims, `(x0, y0, x1, y1)`.
    pub fn normalized(&self, w_img: usize, h_img: usize) -> [f64; 4] {
        let (w, h) = (w_img as f64, h_img as f64);
        [
            self.x0 as f64 / w,
            self.y0 as f64 / h,
            self.x1 as f64 / w,
            self.y1 as f64 / h,
        ]
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `round(i * dim / k)` with halves rounded up.
fn boundary(i: usize, dim: usize, k: usize) -> usize {
    (2 * i * dim + k) / (2 * k)
}

pub fn pattern_to_pixel_box(p: &Pattern, k: usize, w_img: usize, h_img: usize) -> PixelBox {
    match *p {
        Pattern::Clean => PixelBox::EMPTY,
        Pattern::Rect { row, col, m, n } => PixelBox {
            x0: boundary(col, w_img, k),
            y0: boundary(row, h_img, k),
            x1: boundary(col + n, w_img, k),
            y1: boundary(row + m, h_img, k),
        },
    }
}

/// Codebook with its pixel boxes cached for one image size.
#[derive(Clone, Debug)]
pub struct PatternMatcher {
    codebook: PatternCodebook,
    boxes: Vec<PixelBox>,
    w_img: usize,
    h_img: usize,
}

impl PatternMatcher {
    pub fn new(codebook: PatternCodebook, w_img: usize, h_img: usize) -> Self {
        let boxes = codebook
            .patterns()
            .iter()
            .map(|p| pattern_to_pixel_box(p, codebook.k(), w_img, h_img))
            .collect();
        Self {
            codebook,
            boxes,
            w_img,
            h_img,
        }
    }

    pub fn codebook(&self) -> &PatternCodebook {
        &self.codebook
    }

    pub fn pixel_box(&self, index: usize) -> PixelBox {
        self.boxes[index]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w_img, self.h_img)
    }

    /// Label of the pattern with the largest IoU; ties go to the smaller
    /// index and an empty box is clean.
    pub fn match_box(&self, b: &PixelBox) -> usize {
        if b.is_empty() {
            return 0;
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, pb) in self.boxes.iter().enumerate().skip(1) {
            let score = iou(b, pb);
            if score > best.1 {
                best = (i, score);
            }
        }
        best.0
    }
}

pub fn match_box_to_pattern(
    b: &PixelBox,
    codebook: &PatternCodebook,
    w_img: usize,
    h_img: usize,
) -> usize {
    PatternMatcher::new(codebook.clone(), w_img, h_img).match_box(b)
}

/// Binary `K x K` occupancy of a pattern.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlockGrid {
    k: usize,
    cells: Vec<bool>,
}

impl BlockGrid {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.k + col]
    }

    pub fn popcount(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

impl fmt::Display for BlockGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.cells.chunks(self.k) {
            let line: String = row.iter().map(|&c| if c { '#' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

pub fn pattern_to_block_mask(p: &Pattern, k: usize) -> BlockGrid {
    let mut cells = vec![false; k * k];
    if let Pattern::Rect { row, col, m, n } = *p {
        for r in row..row + m {
            for c in col..col + n {
                cells[r * k + c] = true;
            }
        }
    }
    BlockGrid { k, cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_sizes() {
        assert_eq!(enumerate_patterns(4).unwrap().len(), 101);
        assert_eq!(enumerate_patterns(5).unwrap().len(), 226);
        let one = enumerate_patterns(1).unwrap();
        assert_eq!(
            one.patterns(),
            &[Pattern::Clean, Pattern::Rect { row: 0, col: 0, m: 1, n: 1 }]
        );
        assert!(enumerate_patterns(0).is_err());
        assert!(enumerate_patterns(17).is_err());
    }

    #[test]
    fn canonical_order_starts_with_unit_blocks() {
        let cb = enumerate_patterns(3).unwrap();
        assert_eq!(cb.get(0), Some(Pattern::Clean));
        assert_eq!(cb.get(1), Some(Pattern::Rect { row: 0, col: 0, m: 1, n: 1 }));
        assert_eq!(cb.get(2), Some(Pattern::Rect { row: 0, col: 1, m: 1, n: 1 }));
        assert_eq!(cb.get(cb.len() - 1), Some(Pattern::Rect { row: 0, col: 0, m: 3, n: 3 }));
    }

    #[test]
    fn size_matrix_entries() {
        let sm = size_matrix(4).unwrap();
        assert_eq!(sm.get(2, 2), 9);
        assert_eq!(sm.get(4, 4), 1);
        assert_eq!(sm.get(1, 1), 16);
        assert!(size_matrix(0).is_err());
    }

    #[test]
    fn pixel_box_examples() {
        let p = Pattern::Rect { row: 1, col: 1, m: 1, n: 1 };
        assert_eq!(pattern_to_pixel_box(&p, 4, 96, 112), PixelBox::new(24, 28, 48, 56));
        let full = Pattern::Rect { row: 0, col: 0, m: 5, n: 5 };
        assert_eq!(pattern_to_pixel_box(&full, 5, 48, 56), PixelBox::new(0, 0, 48, 56));
        assert_eq!(pattern_to_pixel_box(&Pattern::Clean, 5, 48, 56), PixelBox::EMPTY);
    }

    #[test]
    fn iou_basics() {
        let a = PixelBox::new(0, 0, 2, 2);
        let b = PixelBox::new(1, 1, 3, 3);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &PixelBox::new(5, 5, 6, 6)), 0.0);
        assert_eq!(iou(&PixelBox::EMPTY, &PixelBox::EMPTY), 0.0);
    }

    #[test]
    fn matching_special_cases() {
        let cb = enumerate_patterns(4).unwrap();
        assert_eq!(match_box_to_pattern(&PixelBox::EMPTY, &cb, 96, 112), 0);
        assert_eq!(match_box_to_pattern(&PixelBox::new(10, 10, 10, 40), &cb, 96, 112), 0);
        for idx in [1, 17, 50, 100] {
            let pb = pattern_to_pixel_box(&cb.get(idx).unwrap(), 4, 96, 112);
            assert_eq!(match_box_to_pattern(&pb, &cb, 96, 112), idx);
        }
    }

    #[test]
    fn block_masks() {
        assert_eq!(pattern_to_block_mask(&Pattern::Clean, 4).popcount(), 0);
        assert_eq!(
            pattern_to_block_mask(&Pattern::Rect { row: 0, col: 0, m: 4, n: 4 }, 4).popcount(),
            16
        );
        let g = pattern_to_block_mask(&Pattern::Rect { row: 0, col: 0, m: 2, n: 3 }, 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(g.get(r, c), r < 2 && c < 3);
            }
        }
        assert_eq!(g.to_string(), "###.\n###.\n....\n....\n");
    }

    #[test]
    fn json_dump_shape() {
        let json = enumerate_patterns(1).unwrap().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v[0]["kind"], "clean");
        assert_eq!(v[1]["kind"], "rect");
        assert_eq!(v[1]["m"], 1);
    }
}
