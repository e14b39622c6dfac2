//! Text formats: correlation matrices and sample tables as CSV.
//!
//! Matrix CSV: first line `n`, then `n` lines of matrix rows, then one line
//! with the `n` marginals. Sample CSV: one observation per line, `0`/`1`
//! cells, optional header line.

use std::fmt::Write as _;
use std::io::Read;

use thiserror::Error;

use crate::correlation::{CorrelationError, CorrelationMatrix, SampleTable};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Invalid(#[from] CorrelationError),
}

fn parse_err(line: usize, reason: impl Into<String>) -> FormatError {
    FormatError::Parse {
        line,
        reason: reason.into(),
    }
}

fn floats(line_no: usize, line: &str, want: usize) -> Result<Vec<f64>, FormatError> {
    let vals = line
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("not a number: {:?}", t.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != want {
        return Err(parse_err(line_no, format!("expected {want} values, found {}", vals.len())));
    }
    Ok(vals)
}

/// Parses the matrix format. Blank lines are skipped; `n < 3` is accepted here
/// and rejected by the decomposition entry points.
pub fn parse_matrix_csv(text: &str) -> Result<CorrelationMatrix, FormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (no, first) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let n: usize = first
        .trim_end_matches(',')
        .trim()
        .parse()
        .map_err(|_| parse_err(no, format!("expected the variable count, found {first:?}")))?;
    let mut rho = Vec::with_capacity(n);
    for r in 0..n {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(no + r + 1, format!("missing matrix row {}", r + 1)))?;
        rho.push(floats(no, line, n)?);
    }
    let (no, line) = lines
        .next()
        .ok_or_else(|| parse_err(no + n + 1, "missing marginals line"))?;
    let p = floats(no, line, n)?;
    if let Some((no, _)) = lines.next() {
        return Err(parse_err(no, "unexpected trailing content"));
    }
    Ok(CorrelationMatrix::new(rho, p)?)
}

pub fn read_matrix_csv(mut r: impl Read) -> Result<CorrelationMatrix, FormatError> {
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|e| parse_err(0, e.to_string()))?;
    parse_matrix_csv(&text)
}

pub fn matrix_to_csv(m: &CorrelationMatrix) -> String {
    let mut out = format!("{}\n", m.n());
    let join = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    for row in m.rows() {
        let _ = writeln!(out, "{}", join(&mut row.into_iter()));
    }
    let _ = writeln!(out, "{}", join(&mut m.marginals().iter().copied()));
    out
}

/// Reads 0/1 samples. A first record containing any cell other than `0` or
/// `1` is taken as a header.
pub fn read_samples_csv(r: impl Read) -> Result<SampleTable, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cells: Option<Vec<u8>> = rec
            .iter()
            .map(|c| match c {
                "0" => Some(0),
                "1" => Some(1),
                _ => None,
            })
            .collect();
        match cells {
            Some(row) => rows.push(row),
            None if i == 0 => continue,
            None => return Err(parse_err(i + 1, "cells must be 0 or 1")),
        }
    }
    Ok(SampleTable::new(rows)?)
}

pub fn samples_to_csv(t: &SampleTable) -> String {
    let mut out = String::with_capacity(t.row_count() * t.n() * 2);
    let header: Vec<String> = (0..t.n()).map(|i| format!("x{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in t.rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push(if *v == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUARTET: &str = "4\n1,0.28,0.192,0.36\n0.28,1,0.168,0.315\n0.192,0.168,1,0.54\n0.36,0.315,0.54,1\n0.5,0.4,0.6,0.3\n";

    #[test]
    fn matrix_parses_and_reprints() {
        let m = parse_matrix_csv(QUARTET).unwrap();
        assert_eq!(m.n(), 4);
        assert_eq!(m.rho(2, 3), 0.54);
        assert_eq!(m.marginal(3), 0.3);
        assert_eq!(parse_matrix_csv(&matrix_to_csv(&m)).unwrap(), m);
    }

    #[test]
    fn matrix_errors_name_the_line() {
        let short = "3\n1,0.5,0.5\n0.5,1\n";
        match parse_matrix_csv(short) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_matrix_csv("3\n1,0.5,0.5\n0.5,1,0.5\n0.5,0.5,1\n"),
            Err(FormatError::Parse { .. })
        ));
        assert!(matches!(
            parse_matrix_csv("2\n1,0.9\n0.8,1\n0.5,0.5\n"),
            Err(FormatError::Invalid(CorrelationError::AsymmetricMatrix { .. }))
        ));
    }

    #[test]
    fn samples_with_and_without_header() {
        let a = read_samples_csv("a,b,c\n0,1,1\n1,0,1\n".as_bytes()).unwrap();
        let b = read_samples_csv("0,1,1\n1,0,1\n".as_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row_count(), 2);
        assert_eq!(read_samples_csv(samples_to_csv(&a).as_bytes()).unwrap(), a);
        assert!(read_samples_csv("0,1\n2,1\n".as_bytes()).is_err());
    }
}
