//! Deterministic generator of (screenshot, annotation, markup) triples,
//! plus the render-back similarity score used for evaluation.

pub mod dataset;
pub mod markup;
pub mod render;

use rand::Rng;

use crate::compressor::ElementAnnotation;
use crate::encoder::PageImage;
use crate::error::{Error, Result};
use crate::rng;

pub use dataset::Dataset;
pub use markup::{parse_lenient, Cell, CellKind, MarkupProgram, Row, ROW_SPAN};
pub use render::{render, render_with_annotation, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageType {
    TextHeavy,
    LayoutRich,
    ImageHeavy,
    Complex,
}

impl PageType {
    pub fn as_str(self) -> &'static str {
        match self {
            PageType::TextHeavy => "text-heavy",
            PageType::LayoutRich => "layout-rich",
            PageType::ImageHeavy => "image-heavy",
            PageType::Complex => "complex",
        }
    }

    pub fn all() -> [PageType; 4] {
        [PageType::TextHeavy, PageType::LayoutRich, PageType::ImageHeavy, PageType::Complex]
    }

    pub fn as_u8(self) -> u8 {
        match self {
            PageType::TextHeavy => 0,
            PageType::LayoutRich => 1,
            PageType::ImageHeavy => 2,
            PageType::Complex => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => PageType::TextHeavy,
            1 => PageType::LayoutRich,
            2 => PageType::ImageHeavy,
            3 => PageType::Complex,
            _ => return Err(Error::Data(format!("invalid page type byte {v}"))),
        })
    }

    /// Tag a program by content: mostly text cells, mostly icon cells,
    /// many rows, or anything else.
    pub fn classify(program: &MarkupProgram) -> Self {
        let cells = program.cell_count();
        if cells == 0 {
            return PageType::Complex;
        }
        let count = |kind: CellKind| {
            program
                .rows
                .iter()
                .flat_map(|r| &r.cells)
                .filter(|c| c.kind == kind)
                .count()
        };
        if count(CellKind::Text) * 2 >= cells {
            PageType::TextHeavy
        } else if count(CellKind::Icon) * 2 >= cells {
            PageType::ImageHeavy
        } else if program.rows.len() >= 4 {
            PageType::LayoutRich
        } else {
            PageType::Complex
        }
    }
}

/// One generated training/eval example. The stored image is always the
/// rendering of the stored markup, and the annotation boxes are exactly the
/// rectangles the renderer painted.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: PageImage,
    pub annotation: ElementAnnotation,
    pub markup: MarkupProgram,
    pub page_type: PageType,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub height_px: usize,
    pub width_px: usize,
    /// Image dims must be divisible by this so the encoder can cut patches.
    pub patch_size: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cells: usize,
    pub max_cells: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height_px: 64,
            width_px: 64,
            patch_size: 4,
            min_rows: 1,
            max_rows: 6,
            min_cells: 1,
            max_cells: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height_px % self.patch_size != 0 || self.width_px % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.height_px, self.width_px, self.patch_size
            )));
        }
        if self.min_rows > self.max_rows || self.min_cells > self.max_cells {
            return Err(Error::Config("row/cell ranges are inverted".into()));
        }
        if self.max_cells == 0 || self.max_cells > markup::MAX_CELLS_PER_ROW {
            return Err(Error::Config(format!(
                "cells per row must be 1..={}",
                markup::MAX_CELLS_PER_ROW
            )));
        }
        // Every cell must cover at least one pixel.
        if self.width_px < ROW_SPAN as usize || (self.max_rows > 0 && self.height_px < self.max_rows)
        {
            return Err(Error::Config(format!(
                "page {}x{} would make cells smaller than 1 px",
                self.height_px, self.width_px
            )));
        }
        Ok(())
    }
}

/// Generate one sample from a seed: random layout, rendered deterministically.
pub fn gen_sample(seed: u64, cfg: &GenConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut r = rng::seeded(seed);
    let background = r.gen_range(0..markup::PALETTE_SIZE);
    let n_rows = r.gen_range(cfg.min_rows..=cfg.max_rows);
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let n_cells = r.gen_range(cfg.min_cells.max(1)..=cfg.max_cells);
        let spans = random_composition(&mut r, ROW_SPAN, n_cells);
        let cells = spans
            .into_iter()
            .map(|span| {
                let kind = CellKind::from_index(r.gen_range(0..4));
                // Keep elements visible against the page background.
                let mut color = r.gen_range(0..markup::PALETTE_SIZE);
                if color == background {
                    color = (color + 1) % markup::PALETTE_SIZE;
                }
                Cell { kind, color, span }
            })
            .collect();
        rows.push(Row { cells });
    }
    let markup = MarkupProgram { background, rows };
    markup.validate()?;
    let (image, annotation) = render_with_annotation(&markup, cfg.height_px, cfg.width_px);
    let page_type = PageType::classify(&markup);
    Ok(SyntheticSample { image, annotation, markup, page_type })
}

/// Split `total` into `parts` positive integers summing to `total`, by
/// sampling distinct cut points.
fn random_composition(r: &mut rand_chacha::ChaCha8Rng, total: u8, parts: usize) -> Vec<u8> {
    debug_assert!(parts >= 1 && parts <= total as usize);
    let mut cuts: Vec<u8> = Vec::with_capacity(parts - 1);
    while cuts.len() < parts - 1 {
        let c = r.gen_range(1..total);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        spans.push(c - prev);
        prev = c;
    }
    spans.push(total - prev);
    spans
}

/// Render-back similarity: 1 - mean absolute pixel difference. Symmetric,
/// bounded to [0, 1], and 1 exactly when the images are identical.
pub fn similarity(a: &PageImage, b: &PageImage) -> Result<f64> {
    if a.height_px != b.height_px || a.width_px != b.width_px {
        return Err(Error::Shape(format!(
            "similarity: image dims {}x{} vs {}x{}",
            a.height_px, a.width_px, b.height_px, b.width_px
        )));
    }
    let n = a.pixels.len() as f64;
    let mad: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    Ok(1.0 - mad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_triple() {
        let cfg = GenConfig::default();
        let a = gen_sample(42, &cfg).unwrap();
        let b = gen_sample(42, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_row_page_is_uniform_background() {
        let cfg = GenConfig { min_rows: 0, max_rows: 0, ..GenConfig::default() };
        let s = gen_sample(7, &cfg).unwrap();
        assert!(s.markup.rows.is_empty());
        let bg = PALETTE[s.markup.background as usize];
        for y in 0..s.image.height_px {
            for x in 0..s.image.width_px {
                assert_eq!(s.image.get(y, x), bg);
            }
        }
        assert_eq!(s.markup.linearize().len(), 3); // PAGE <color> END
    }

    #[test]
    fn render_round_trip_holds() {
        let cfg = GenConfig::default();
        for seed in 0..50 {
            let s = gen_sample(seed, &cfg).unwrap();
            let again = render(&s.markup, cfg.height_px, cfg.width_px);
            assert_eq!(s.image, again, "seed {seed}");
        }
    }

    #[test]
    fn similarity_examples() {
        let white = PageImage::filled(4, 4, [1.0; 3]);
        let black = PageImage::filled(4, 4, [0.0; 3]);
        assert_eq!(similarity(&white, &white).unwrap(), 1.0);
        assert_eq!(similarity(&white, &black).unwrap(), 0.0);

        let mut half = black.clone();
        for y in 0..2 {
            for x in 0..4 {
                half.set(y, x, [1.0; 3]);
            }
        }
        assert_eq!(similarity(&half, &black).unwrap(), 0.5);
        assert_eq!(
            similarity(&half, &black).unwrap(),
            similarity(&black, &half).unwrap()
        );
        assert!(similarity(&white, &PageImage::filled(2, 2, [1.0; 3])).is_err());
    }

    #[test]
    fn compositions_are_positive_and_sum() {
        let mut r = crate::rng::seeded(9);
        for parts in 1..=4 {
            for _ in 0..50 {
                let s = random_composition(&mut r, ROW_SPAN, parts);
                assert_eq!(s.len(), parts);
                assert!(s.iter().all(|&v| v >= 1));
                assert_eq!(s.iter().map(|&v| v as u32).sum::<u32>(), ROW_SPAN as u32);
            }
        }
    }

    #[test]
    fn page_type_rules() {
        let text_page = MarkupProgram {
            background: 0,
            rows: vec![Row {
                cells: vec![
                    Cell { kind: CellKind::Text, color: 1, span: 4 },
                    Cell { kind: CellKind::Text, color: 2, span: 4 },
                ],
            }],
        };
        assert_eq!(PageType::classify(&text_page), PageType::TextHeavy);

        let tall = MarkupProgram {
            background: 0,
            rows: (0..4)
                .map(|i| Row {
                    cells: vec![
                        Cell { kind: CellKind::Button, color: 1, span: 8 - (i % 2) },
                        Cell { kind: CellKind::Input, color: 2, span: i % 2 },
                    ]
                    .into_iter()
                    .filter(|c| c.span > 0)
                    .collect(),
                })
                .collect(),
        };
        assert_eq!(PageType::classify(&tall), PageType::LayoutRich);
    }
}
