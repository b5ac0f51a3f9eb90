//! LIBSVM text format: one example per line, `label idx:val ...` with
//! 1-based, strictly increasing feature indices.

use std::io::{BufRead, Write};

use super::{CsrMatrix, LabeledDataset};
use crate::error::{Error, Result};

/// A parsed dataset plus the original label values in class-id order:
/// `label_values[class_id]` is the label as written in the file.
#[derive(Debug, Clone)]
pub struct ParsedLibsvm {
    pub dataset: LabeledDataset,
    pub label_values: Vec<f64>,
}

/// Parses LIBSVM text. Blank lines and lines starting with `#` are skipped.
/// Indices are converted to 0-based. Labels are mapped to contiguous class
/// ids in ascending numeric order of the distinct label values.
///
/// With `expected_dim` the column count is fixed and indices beyond it are
/// rejected; otherwise the column count is the highest index seen.
pub fn parse_libsvm<R: BufRead>(reader: R, expected_dim: Option<usize>) -> Result<ParsedLibsvm> {
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_dim = 0usize;

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("read failed: {e}"),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_ascii_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a first token");
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label {label_tok:?}"),
        })?;
        if !label.is_finite() {
            return Err(Error::Parse { line: line_no, msg: format!("non-finite label {label_tok:?}") });
        }

        let mut row: Vec<(usize, f64)> = Vec::new();
        let mut prev_idx: usize = 0;
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("feature {tok:?} is not idx:val"),
            })?;
            let idx: usize = idx_s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad feature index {idx_s:?}"),
            })?;
            let val: f64 = val_s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad feature value {val_s:?}"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite feature value {val_s:?}"),
                });
            }
            if idx == 0 {
                return Err(Error::Format(format!(
                    "line {line_no}: feature indices are 1-based, found 0"
                )));
            }
            if idx <= prev_idx {
                return Err(Error::Format(format!(
                    "line {line_no}: feature index {idx} after {prev_idx} (indices must be strictly increasing; duplicates are invalid)"
                )));
            }
            if let Some(dim) = expected_dim {
                if idx > dim {
                    return Err(Error::Format(format!(
                        "line {line_no}: feature index {idx} exceeds declared dimension {dim}"
                    )));
                }
            }
            prev_idx = idx;
            max_dim = max_dim.max(idx);
            row.push((idx - 1, val));
        }
        raw_labels.push(label);
        rows.push(row);
    }

    let n_cols = expected_dim.unwrap_or(max_dim);
    let n_rows = rows.len();
    let features = CsrMatrix::from_row_entries(n_rows, n_cols, rows)?;

    let mut label_values: Vec<f64> = raw_labels.clone();
    label_values.sort_by(|a, b| a.partial_cmp(b).expect("labels are finite"));
    label_values.dedup();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| {
            label_values
                .binary_search_by(|probe| probe.partial_cmp(l).expect("labels are finite"))
                .expect("label was collected")
        })
        .collect();
    let n_classes = label_values.len();
    Ok(ParsedLibsvm { dataset: LabeledDataset::new(features, labels, n_classes)?, label_values })
}

/// Writes a dataset in LIBSVM text form with 1-based indices. When
/// `label_values` is given, class ids are mapped back through it; otherwise
/// the class id itself is written.
pub fn write_libsvm<W: Write>(
    w: &mut W,
    dataset: &LabeledDataset,
    label_values: Option<&[f64]>,
) -> Result<()> {
    if let Some(lv) = label_values {
        if lv.len() != dataset.n_classes {
            return Err(Error::InvalidArg(format!(
                "{} label values for {} classes",
                lv.len(),
                dataset.n_classes
            )));
        }
    }
    let io_err = |e: std::io::Error| Error::Io { path: "<writer>".into(), source: e };
    for r in 0..dataset.n_rows() {
        match label_values {
            Some(lv) => write!(w, "{}", lv[dataset.labels[r]]).map_err(io_err)?,
            None => write!(w, "{}", dataset.labels[r]).map_err(io_err)?,
        }
        let (cols, vals) = dataset.features.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            write!(w, " {}:{}", c + 1, v).map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(s: &str, dim: Option<usize>) -> Result<ParsedLibsvm> {
        parse_libsvm(s.as_bytes(), dim)
    }

    #[test]
    fn two_line_example() {
        let p = parse_str("1 3:2.5 7:1.0\n-1 1:4.0\n", None).unwrap();
        let ds = &p.dataset;
        assert_eq!(ds.features.n_rows(), 2);
        assert_eq!(ds.features.n_cols(), 7);
        assert_eq!(ds.features.nnz(), 3);
        // -1 sorts before 1, so -1 -> class 0 and 1 -> class 1.
        assert_eq!(p.label_values, vec![-1.0, 1.0]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.features.row(0), (&[2usize, 6][..], &[2.5, 1.0][..]));
        assert_eq!(ds.features.row(1), (&[0usize][..], &[4.0][..]));
    }

    #[test]
    fn blank_and_comment_lines_are_skipped() {
        let p = parse_str("\n# header comment\n1 1:1\n\n  \n2 2:1\n", None).unwrap();
        assert_eq!(p.dataset.n_rows(), 2);
        assert_eq!(p.dataset.n_classes, 2);
    }

    #[test]
    fn label_only_rows_are_allowed() {
        let p = parse_str("3\n1 2:0.5\n", None).unwrap();
        assert_eq!(p.dataset.n_rows(), 2);
        assert_eq!(p.dataset.features.row(0).0.len(), 0);
    }

    #[test]
    fn duplicate_and_decreasing_indices_are_rejected() {
        assert!(parse_str("1 2:1 2:3\n", None).is_err());
        assert!(parse_str("1 5:1 3:1\n", None).is_err());
    }

    #[test]
    fn zero_index_is_rejected() {
        assert!(parse_str("1 0:2\n", None).is_err());
    }

    #[test]
    fn malformed_tokens_carry_line_numbers() {
        let err = parse_str("1 1:1\nx 1:1\n", None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_str("1 a:1\n", None).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(parse_str("1 3:\n", None).is_err());
        assert!(parse_str("1 3\n", None).is_err());
    }

    #[test]
    fn expected_dim_fixes_columns() {
        let p = parse_str("1 2:1\n", Some(10)).unwrap();
        assert_eq!(p.dataset.features.n_cols(), 10);
        assert!(parse_str("1 11:1\n", Some(10)).is_err());
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let input = "1 3:2.5 7:1\n-1 1:4\n1 2:0.125\n";
        let p1 = parse_str(input, None).unwrap();
        let mut text1 = Vec::new();
        write_libsvm(&mut text1, &p1.dataset, Some(&p1.label_values)).unwrap();
        let p2 = parse_libsvm(text1.as_slice(), None).unwrap();
        assert_eq!(p1.dataset, p2.dataset);
        assert_eq!(p1.label_values, p2.label_values);
        let mut text2 = Vec::new();
        write_libsvm(&mut text2, &p2.dataset, Some(&p2.label_values)).unwrap();
        assert_eq!(text1, text2);
    }

    #[test]
    fn class_ids_are_written_when_no_mapping_is_given() {
        let p = parse_str("5 1:1\n-2 2:1\n", None).unwrap();
        let mut text = Vec::new();
        write_libsvm(&mut text, &p.dataset, None).unwrap();
        assert_eq!(String::from_utf8(text).unwrap(), "1 1:1\n0 2:1\n");
    }
}
