//! Tiny page-markup DSL and its token vocabulary.
//!
//! Grammar: `PAGE <color> (ROW (CELL <kind> <color> <span>)+)* END`, with the
//! spans of each row summing to the fixed row width of 8 columns.

use crate::compressor::ElementCategory;
use crate::error::{Error, Result};

/// Columns per row: cell spans always sum to this.
pub const ROW_SPAN: u8 = 8;
pub const PALETTE_SIZE: u8 = 8;
pub const MAX_CELLS_PER_ROW: usize = 4;

pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const PROMPT: usize = 3;
    pub const PAGE: usize = 4;
    pub const END: usize = 5;
    pub const ROW: usize = 6;
    pub const CELL: usize = 7;
    pub const KIND_BASE: usize = 8; // TEXT, BUTTON, ICON, INPUT
    pub const COLOR_BASE: usize = 12; // C0..C7
    pub const SPAN_BASE: usize = 20; // S1..S8 (span 1 => SPAN_BASE)
    pub const SIZE: usize = 28;

    pub const NAMES: [&str; SIZE] = [
        "PAD", "BOS", "EOS", "PROMPT", "PAGE", "END", "ROW", "CELL", "TEXT", "BUTTON", "ICON",
        "INPUT", "C0", "C1", "C2", "C3", "C4", "C5", "C6", "C7", "S1", "S2", "S3", "S4", "S5",
        "S6", "S7", "S8",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Text,
    Button,
    Icon,
    Input,
}

impl CellKind {
    pub fn category(self) -> ElementCategory {
        match self {
            CellKind::Text => ElementCategory::Text,
            CellKind::Button => ElementCategory::Button,
            CellKind::Icon => ElementCategory::Icon,
            CellKind::Input => ElementCategory::Input,
        }
    }

    pub fn token(self) -> usize {
        vocab::KIND_BASE
            + match self {
                CellKind::Text => 0,
                CellKind::Button => 1,
                CellKind::Icon => 2,
                CellKind::Input => 3,
            }
    }

    fn from_token(t: usize) -> Option<Self> {
        match t.checked_sub(vocab::KIND_BASE)? {
            0 => Some(CellKind::Text),
            1 => Some(CellKind::Button),
            2 => Some(CellKind::Icon),
            3 => Some(CellKind::Input),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Self {
        [CellKind::Text, CellKind::Button, CellKind::Icon, CellKind::Input][i % 4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub kind: CellKind,
    /// Palette index, 0..8.
    pub color: u8,
    /// Columns of the 8-wide row this cell covers, 1..=8.
    pub span: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Row {
    pub cells: Vec<Cell>,
}

impl Row {
    fn is_valid(&self) -> bool {
        !self.cells.is_empty()
            && self.cells.len() <= MAX_CELLS_PER_ROW
            && self.cells.iter().map(|c| c.span as u32).sum::<u32>() == ROW_SPAN as u32
            && self.cells.iter().all(|c| c.color < PALETTE_SIZE && (1..=ROW_SPAN).contains(&c.span))
    }
}

/// A complete page program: background color plus cell rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkupProgram {
    pub background: u8,
    pub rows: Vec<Row>,
}

impl Default for MarkupProgram {
    /// `PAGE C0 END`: the empty page on the default background.
    fn default() -> Self {
        MarkupProgram { background: 0, rows: Vec::new() }
    }
}

impl MarkupProgram {
    pub fn validate(&self) -> Result<()> {
        if self.background >= PALETTE_SIZE {
            return Err(Error::Data(format!("background color {} out of palette", self.background)));
        }
        if let Some(i) = self.rows.iter().position(|r| !r.is_valid()) {
            return Err(Error::Data(format!("row {i} violates the grammar")));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    /// Token-id sequence for this program.
    pub fn linearize(&self) -> Vec<usize> {
        let mut out = vec![vocab::PAGE, color_token(self.background)];
        for row in &self.rows {
            out.push(vocab::ROW);
            for cell in &row.cells {
                out.push(vocab::CELL);
                out.push(cell.kind.token());
                out.push(color_token(cell.color));
                out.push(span_token(cell.span));
            }
        }
        out.push(vocab::END);
        out
    }
}

pub fn color_token(c: u8) -> usize {
    vocab::COLOR_BASE + c as usize
}

pub fn span_token(s: u8) -> usize {
    vocab::SPAN_BASE + s as usize - 1
}

fn color_from_token(t: usize) -> Option<u8> {
    let i = t.checked_sub(vocab::COLOR_BASE)?;
    (i < PALETTE_SIZE as usize).then_some(i as u8)
}

fn span_from_token(t: usize) -> Option<u8> {
    let i = t.checked_sub(vocab::SPAN_BASE)?;
    (i < ROW_SPAN as usize).then_some(i as u8 + 1)
}

/// Longest-valid-prefix parse of an arbitrary token stream. Rows are kept
/// only when they close on a grammar boundary with a full span budget; the
/// first violation truncates the parse and clears the `valid` flag. Total:
/// garbage parses to the default empty page.
pub fn parse_lenient(tokens: &[usize]) -> (MarkupProgram, bool) {
    let mut it = tokens.iter().copied().peekable();
    if it.next() != Some(vocab::PAGE) {
        return (MarkupProgram::default(), false);
    }
    let background = match it.next().and_then(color_from_token) {
        Some(c) => c,
        None => return (MarkupProgram::default(), false),
    };
    let mut prog = MarkupProgram { background, rows: Vec::new() };
    loop {
        match it.next() {
            Some(t) if t == vocab::END => {
                // Trailing tokens after END are a violation of completeness.
                return (prog, it.peek().is_none());
            }
            Some(t) if t == vocab::ROW => {
                let mut row = Row::default();
                loop {
                    match it.peek().copied() {
                        Some(t2) if t2 == vocab::CELL => {
                            it.next();
                            let kind = it.next().and_then(CellKind::from_token);
                            let color = it.next().and_then(color_from_token);
                            let span = it.next().and_then(span_from_token);
                            match (kind, color, span) {
                                (Some(kind), Some(color), Some(span)) => {
                                    row.cells.push(Cell { kind, color, span })
                                }
                                _ => return (prog, false), // malformed cell
                            }
                            if row.cells.len() > MAX_CELLS_PER_ROW {
                                return (prog, false);
                            }
                        }
                        Some(t2) if t2 == vocab::ROW || t2 == vocab::END => break,
                        _ => return (prog, false), // unexpected token or truncated stream
                    }
                }
                if !row.is_valid() {
                    return (prog, false);
                }
                prog.rows.push(row);
            }
            _ => return (prog, false), // unexpected token or missing END
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_program() -> MarkupProgram {
        MarkupProgram {
            background: 3,
            rows: vec![
                Row {
                    cells: vec![
                        Cell { kind: CellKind::Text, color: 1, span: 5 },
                        Cell { kind: CellKind::Button, color: 2, span: 3 },
                    ],
                },
                Row { cells: vec![Cell { kind: CellKind::Icon, color: 7, span: 8 }] },
            ],
        }
    }

    #[test]
    fn parse_inverts_linearize() {
        let p = sample_program();
        let (back, valid) = parse_lenient(&p.linearize());
        assert!(valid);
        assert_eq!(back, p);
    }

    #[test]
    fn prefix_plus_garbage_truncates() {
        let p = sample_program();
        let mut toks = p.linearize();
        toks.extend([vocab::CELL, vocab::ROW, 999]);
        let (back, valid) = parse_lenient(&toks);
        assert!(!valid);
        assert_eq!(back, p);
    }

    #[test]
    fn garbage_parses_to_default_page() {
        let (p, valid) = parse_lenient(&[17, 3, 999]);
        assert!(!valid);
        assert_eq!(p, MarkupProgram::default());
        let (p, valid) = parse_lenient(&[]);
        assert!(!valid);
        assert_eq!(p, MarkupProgram::default());
    }

    #[test]
    fn bad_span_sum_drops_row() {
        // PAGE C0 ROW CELL TEXT C1 S3 END — spans sum to 3, not 8.
        let toks = vec![
            vocab::PAGE,
            color_token(0),
            vocab::ROW,
            vocab::CELL,
            CellKind::Text.token(),
            color_token(1),
            span_token(3),
            vocab::END,
        ];
        let (p, valid) = parse_lenient(&toks);
        assert!(!valid);
        assert!(p.rows.is_empty());
    }
}
