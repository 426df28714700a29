//! Boolean attention-permission matrices.
//!
//! A `MaskMatrix` says which (query row, key column) pairs attention may
//! use. The block-causal builder for interleaved sequences lives in
//! [`crate::diffusion::layout`]; this module holds the representation plus
//! the plain causal mask used by the backbone.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    permit: Vec<bool>,
}

impl MaskMatrix {
    pub fn permit_all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            permit: vec![true; rows * cols],
        }
    }

    pub fn forbid_all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            permit: vec![false; rows * cols],
        }
    }

    /// Square causal mask: row i may attend columns 0..=i.
    pub fn causal(n: usize) -> Self {
        let mut m = Self::forbid_all(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn permit(&self, i: usize, j: usize) -> bool {
        self.permit[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.permit[i * self.cols + j] = allowed;
    }

    /// Permit the full rectangle rows x cols.
    pub fn permit_block(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for i in rows {
            for j in cols.clone() {
                self.set(i, j, true);
            }
        }
    }

    pub fn row_has_permitted(&self, i: usize) -> bool {
        self.permit[i * self.cols..(i + 1) * self.cols]
            .iter()
            .any(|&p| p)
    }

    pub fn permitted_count(&self) -> usize {
        self.permit.iter().filter(|&&p| p).count()
    }

    /// Render as a P2 (plain text) portable graymap: permitted cells are 1,
    /// forbidden cells 0. Row 0 of the mask is the top image row, so the
    /// file reads the way attention matrices are usually drawn.
    pub fn to_pgm(&self) -> String {
        let mut out = String::new();
        out.push_str("P2\n");
        out.push_str(&format!("{} {}\n1\n", self.cols, self.rows));
        for i in 0..self.rows {
            let row: Vec<&str> = (0..self.cols)
                .map(|j| if self.permit(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parse the P2 form written by [`to_pgm`]. Used by golden-file tests.
    pub fn from_pgm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace());
        let bad = |what: &str| Error::Format {
            offset: 0,
            reason: format!("pgm mask: {what}"),
        };
        if tokens.next() != Some("P2") {
            return Err(bad("missing P2 magic"));
        }
        let mut next_num = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(what))
        };
        let cols = next_num("width")?;
        let rows = next_num("height")?;
        let maxval = next_num("maxval")?;
        if maxval == 0 {
            return Err(bad("zero maxval"));
        }
        let mut m = Self::forbid_all(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = next_num("pixel")?;
                m.set(i, j, v > 0);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_shape() {
        let m = MaskMatrix::causal(4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.permit(i, j), j <= i);
            }
        }
    }

    #[test]
    fn pgm_roundtrip() {
        let mut m = MaskMatrix::causal(5);
        m.set(0, 3, true);
        let text = m.to_pgm();
        let back = MaskMatrix::from_pgm(&text).unwrap();
        assert_eq!(m, back);
    }
}
