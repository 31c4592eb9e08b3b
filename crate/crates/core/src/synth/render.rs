//! Deterministic rasterizer for markup programs. Rows split the page height
//! by floor partition; cells split the width in proportion to their spans.
//! Each cell kind paints a visually distinct motif. All painted values are
//! exactly representable in f32, so dataset files round-trip bit-for-bit.

use crate::compressor::ElementAnnotation;
use crate::encoder::PageImage;
use crate::synth::markup::{CellKind, MarkupProgram, ROW_SPAN};

/// Fixed 8-color palette (all components are multiples of 1/16).
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],          // C0 white
    [0.875, 0.25, 0.25],      // C1 red
    [0.25, 0.75, 0.375],      // C2 green
    [0.25, 0.375, 0.875],     // C3 blue
    [0.9375, 0.8125, 0.25],   // C4 yellow
    [0.625, 0.25, 0.75],      // C5 purple
    [0.9375, 0.5625, 0.1875], // C6 orange
    [0.625, 0.625, 0.625],    // C7 gray
];

const BORDER: [f64; 3] = [0.0, 0.0, 0.0];

/// Rasterize a program onto `height_px` x `width_px` pixels.
pub fn render(program: &MarkupProgram, height_px: usize, width_px: usize) -> PageImage {
    render_with_annotation(program, height_px, width_px).0
}

/// Rasterize and report the painted cell rectangles as element annotations.
pub fn render_with_annotation(
    program: &MarkupProgram,
    height_px: usize,
    width_px: usize,
) -> (PageImage, ElementAnnotation) {
    let mut img = PageImage::filled(height_px, width_px, PALETTE[program.background as usize]);
    let mut ann = ElementAnnotation::default();
    let n_rows = program.rows.len();
    for (r, row) in program.rows.iter().enumerate() {
        let y0 = r * height_px / n_rows;
        let y1 = (r + 1) * height_px / n_rows;
        let mut span_used = 0usize;
        for cell in &row.cells {
            let x0 = span_used * width_px / ROW_SPAN as usize;
            span_used += cell.span as usize;
            let x1 = span_used * width_px / ROW_SPAN as usize;
            let (rx0, ry0, rx1, ry1) = inset(x0, y0, x1, y1);
            paint_cell(&mut img, cell.kind, PALETTE[cell.color as usize], rx0, ry0, rx1, ry1);
            ann.boxes.push((rx0 as f64, ry0 as f64, rx1 as f64, ry1 as f64));
            ann.categories.push(cell.kind.category());
        }
    }
    (img, ann)
}

/// One pixel of breathing room on every side when the rect allows it.
fn inset(x0: usize, y0: usize, x1: usize, y1: usize) -> (usize, usize, usize, usize) {
    if x1 - x0 >= 3 && y1 - y0 >= 3 {
        (x0 + 1, y0 + 1, x1 - 1, y1 - 1)
    } else {
        (x0, y0, x1, y1)
    }
}

fn paint_cell(
    img: &mut PageImage,
    kind: CellKind,
    color: [f64; 3],
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) {
    let w = x1 - x0;
    let h = y1 - y0;
    match kind {
        // Horizontal stripes: every other pixel row in the cell color.
        CellKind::Text => {
            for y in y0..y1 {
                if (y - y0) % 2 == 0 {
                    for x in x0..x1 {
                        img.set(y, x, color);
                    }
                }
            }
        }
        // Solid fill with a 1-px black border when there is room.
        CellKind::Button => {
            for y in y0..y1 {
                for x in x0..x1 {
                    img.set(y, x, color);
                }
            }
            if w >= 3 && h >= 3 {
                for x in x0..x1 {
                    img.set(y0, x, BORDER);
                    img.set(y1 - 1, x, BORDER);
                }
                for y in y0..y1 {
                    img.set(y, x0, BORDER);
                    img.set(y, x1 - 1, BORDER);
                }
            }
        }
        // Centered solid square at half the short side.
        CellKind::Icon => {
            let side = (w.min(h) / 2).max(1);
            let sx = x0 + (w - side) / 2;
            let sy = y0 + (h - side) / 2;
            for y in sy..sy + side {
                for x in sx..sx + side {
                    img.set(y, x, color);
                }
            }
        }
        // Hollow 1-px outline in the cell color, interior untouched.
        CellKind::Input => {
            if w >= 2 && h >= 2 {
                for x in x0..x1 {
                    img.set(y0, x, color);
                    img.set(y1 - 1, x, color);
                }
                for y in y0..y1 {
                    img.set(y, x0, color);
                    img.set(y, x1 - 1, color);
                }
            } else {
                for y in y0..y1 {
                    for x in x0..x1 {
                        img.set(y, x, color);
                    }
                }
            }
        }
    }
}
