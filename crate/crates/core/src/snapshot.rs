//! Plain-text field snapshots.
//!
//! ```text
//! dim cells_1 .. cells_dim origin_1 .. origin_dim extent_1 .. extent_dim
//! value_0
//! value_1
//! ...
//! ```
//!
//! Node values follow in row-major order (last axis fastest), one per line,
//! written with 17 significant digits so that a write/read cycle is exact.

use std::fmt::Write as _;
use std::io::{self, Write};

use thiserror::Error;

use crate::grid::{GridSpec, ScalarField};

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(offset: usize, msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Malformed {
        offset,
        msg: msg.into(),
    }
}

pub fn header_line(grid: &GridSpec) -> String {
    let mut s = grid.dim().to_string();
    for c in grid.cells() {
        write!(s, " {c}").unwrap();
    }
    for o in grid.origin() {
        write!(s, " {o:.16e}").unwrap();
    }
    for e in grid.extent() {
        write!(s, " {e:.16e}").unwrap();
    }
    s
}

pub fn write_snapshot<W: Write>(field: &ScalarField, mut w: W) -> io::Result<()> {
    writeln!(w, "{}", header_line(field.grid()))?;
    for v in field.values() {
        writeln!(w, "{v:.16e}")?;
    }
    Ok(())
}

pub fn to_string(field: &ScalarField) -> String {
    let mut buf = Vec::new();
    write_snapshot(field, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("snapshot is ASCII")
}

/// Whitespace-separated tokens with their byte offsets.
struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_in_line(&mut self) -> Option<(usize, &'a str)> {
        let bytes = self.text.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos] == b' ' || bytes[self.pos] == b'\t') {
            self.pos += 1;
        }
        if self.pos >= bytes.len() || bytes[self.pos] == b'\n' || bytes[self.pos] == b'\r' {
            return None;
        }
        let start = self.pos;
        while self.pos < bytes.len() && !bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some((start, &self.text[start..self.pos]))
    }

    fn end_line(&mut self) {
        let bytes = self.text.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos < bytes.len() {
            self.pos += 1;
        }
    }
}

pub fn parse_snapshot(text: &str) -> Result<ScalarField, SnapshotError> {
    let mut tok = Tokens { text, pos: 0 };
    let (off, dim_s) = tok
        .next_in_line()
        .ok_or_else(|| malformed(0, "missing header"))?;
    let dim: usize = dim_s
        .parse()
        .map_err(|_| malformed(off, format!("bad dimension `{dim_s}`")))?;
    if !(1..=3).contains(&dim) {
        return Err(malformed(off, format!("dimension {dim} not in 1..=3")));
    }
    let mut cells = Vec::with_capacity(dim);
    for _ in 0..dim {
        let (o, s) = tok
            .next_in_line()
            .ok_or_else(|| malformed(tok.pos, "header truncated (cells)"))?;
        cells.push(
            s.parse::<usize>()
                .map_err(|_| malformed(o, format!("bad cell count `{s}`")))?,
        );
    }
    let mut reals = Vec::with_capacity(2 * dim);
    for _ in 0..2 * dim {
        let (o, s) = tok
            .next_in_line()
            .ok_or_else(|| malformed(tok.pos, "header truncated (origin/extent)"))?;
        reals.push(
            s.parse::<f64>()
                .map_err(|_| malformed(o, format!("bad real `{s}`")))?,
        );
    }
    if let Some((o, s)) = tok.next_in_line() {
        return Err(malformed(o, format!("unexpected header token `{s}`")));
    }
    tok.end_line();
    let grid = GridSpec::new(&reals[..dim], &reals[dim..], &cells)
        .map_err(|e| malformed(0, format!("invalid grid: {e}")))?;
    let n = grid.node_count();
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let (o, s) = match tok.next_in_line() {
            Some(t) => t,
            None => {
                return Err(malformed(
                    tok.pos,
                    format!("expected {n} values, found {k}"),
                ))
            }
        };
        let v: f64 = s
            .parse()
            .map_err(|_| malformed(o, format!("bad value `{s}`")))?;
        if !v.is_finite() {
            return Err(malformed(o, "non-finite value"));
        }
        values.push(v);
        if let Some((o2, s2)) = tok.next_in_line() {
            return Err(malformed(o2, format!("unexpected token `{s2}`")));
        }
        tok.end_line();
    }
    let rest = &text[tok.pos..];
    if let Some(i) = rest.find(|c: char| !c.is_ascii_whitespace()) {
        return Err(malformed(tok.pos + i, "trailing data after values"));
    }
    ScalarField::from_values(&grid, values).map_err(|e| malformed(0, e.to_string()))
}

pub fn read_snapshot(path: &std::path::Path) -> Result<ScalarField, SnapshotError> {
    let text = std::fs::read_to_string(path)?;
    parse_snapshot(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_format() {
        let g = GridSpec::cube(2, -1.0, 1.0, 4).unwrap();
        let f = ScalarField::zeros(&g);
        let s = to_string(&f);
        let first = s.lines().next().unwrap();
        assert!(first.starts_with("2 4 4 "));
        assert_eq!(s.lines().count(), 1 + 25);
    }

    #[test]
    fn truncated_reports_offset() {
        let g = GridSpec::cube(1, 0.0, 1.0, 4).unwrap();
        let f = ScalarField::sample(&g, |x| x[0]).unwrap();
        let s = to_string(&f);
        let cut = &s[..s.len() - 30];
        match parse_snapshot(cut) {
            Err(SnapshotError::Malformed { offset, .. }) => assert!(offset > 0 && offset <= cut.len()),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(parse_snapshot("").is_err());
        assert!(parse_snapshot("2 4 4 0 0 1 1\n").is_err());
        assert!(parse_snapshot("x").is_err());
        let g = GridSpec::cube(1, 0.0, 1.0, 4).unwrap();
        let mut s = to_string(&ScalarField::zeros(&g));
        s.push_str("1.0\n");
        assert!(parse_snapshot(&s).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(vals in proptest::collection::vec(-1e6f64..1e6, 25)) {
            let g = GridSpec::cube(2, -0.3, 1.7, 4).unwrap();
            let f = ScalarField::from_values(&g, vals).unwrap();
            let back = parse_snapshot(&to_string(&f)).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
