//! Plain-text value grids: one block per channel, one row per line,
//! space-separated decimals, blocks separated by a blank line.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn fmt_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Renders a rank-1, rank-2 or rank-3 tensor. Rank 1 is a single row,
/// rank 2 a single block.
pub fn to_text(t: &Tensor) -> String {
    let (c_n, h, w) = match *t.shape() {
        [w] => (1, 1, w),
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref other => {
            let w = *other.last().unwrap_or(&1);
            (1, t.numel() / w, w)
        }
    };
    let mut out = String::new();
    for c in 0..c_n {
        if c > 0 {
            out.push('\n');
        }
        for i in 0..h {
            let row = &t.data()[(c * h + i) * w..(c * h + i + 1) * w];
            let line: Vec<String> = row.iter().map(|&v| fmt_value(v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    out
}

/// Parses the text grid back into a `[C, H, W]` tensor.
pub fn from_text(text: &str) -> Result<Tensor> {
    let mut blocks: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !blocks.last().map_or(true, Vec::is_empty) {
                blocks.push(Vec::new());
            }
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad grid value '{tok}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        blocks.last_mut().expect("nonempty").push(row);
    }
    if blocks.last().map_or(false, Vec::is_empty) {
        blocks.pop();
    }
    let first = blocks
        .first()
        .ok_or_else(|| Error::Format("empty grid".into()))?;
    let (h, w) = (first.len(), first[0].len());
    let mut data = Vec::with_capacity(blocks.len() * h * w);
    for block in &blocks {
        if block.len() != h || block.iter().any(|r| r.len() != w) {
            return Err(Error::Format("ragged grid".into()));
        }
        for row in block {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![blocks.len(), h, w], data)
}

/// 8-bit ASCII grayscale (PGM `P2`) rendering of one `[H, W]` plane,
/// linearly mapped from `[lo, hi]`.
pub fn to_pgm(plane: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> String {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P2\n{w} {h}\n255\n");
    for i in 0..h {
        let row: Vec<String> = plane[i * w..(i + 1) * w]
            .iter()
            .map(|&v| ((((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_grid_round_trips(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let mut s = seed;
            let t = Tensor::from_fn(&[c, h, w], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 10f64.powi((s % 9) as i32 - 6)
            });
            let back = from_text(&to_text(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn pgm_header() {
        let p = to_pgm(&[0.0, 1.0], 1, 2, 0.0, 1.0);
        assert_eq!(p, "P2\n2 1\n255\n0 255\n");
    }
}
