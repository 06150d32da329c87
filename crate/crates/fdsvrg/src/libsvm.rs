//! LIBSVM text input: `label idx:val idx:val ...` with 1-based, strictly
//! ascending indices. Labels `<= 0` become `-1`, the rest `+1`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use fdsvrg_core::data::{LabeledDataset, SparseColumnMatrix};

use crate::error::Error;

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Libsvm {
        line,
        message: message.into(),
    }
}

/// Parses a whole stream. `d` forces the dimensionality; otherwise it is the
/// largest index seen.
pub fn parse_libsvm<R: BufRead>(reader: R, d: Option<usize>) -> Result<LabeledDataset, Error> {
    let mut columns: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(Error::io("<stream>"))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_ascii_whitespace();
        let label = tokens.next().expect("non-empty line has a token");
        let label: f64 = label.parse().map_err(|_| bad(lineno, format!("bad label `{label}`")))?;
        if !label.is_finite() {
            return Err(bad(lineno, "label is not finite"));
        }
        let mut column = Vec::new();
        let mut last = 0;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| bad(lineno, format!("expected index:value, got `{tok}`")))?;
            let idx: usize = idx.parse().map_err(|_| bad(lineno, format!("bad index `{idx}`")))?;
            if idx == 0 {
                return Err(bad(lineno, "indices are 1-based"));
            }
            if idx <= last {
                return Err(bad(lineno, format!("index {idx} after {last} is not ascending")));
            }
            let val: f64 = val.parse().map_err(|_| bad(lineno, format!("bad value `{val}`")))?;
            if !val.is_finite() {
                return Err(bad(lineno, format!("value at index {idx} is not finite")));
            }
            last = idx;
            column.push((idx - 1, val));
        }
        max_index = max_index.max(last);
        columns.push(column);
        labels.push(if label > 0.0 { 1.0 } else { -1.0 });
    }
    let d = match d {
        Some(d) if d < max_index => {
            return Err(Error::Config(format!(
                "dimension {d} is below the largest index {max_index}"
            )));
        }
        Some(d) => d,
        None => max_index,
    };
    let features = SparseColumnMatrix::from_columns(d, columns)?;
    Ok(LabeledDataset::new(features, labels)?)
}

pub fn read_libsvm(path: &Path, d: Option<usize>) -> Result<LabeledDataset, Error> {
    let file = File::open(path).map_err(Error::io(path))?;
    parse_libsvm(BufReader::new(file), d).map_err(|e| match e {
        Error::Io { source, .. } => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines() {
        let data = parse_libsvm("+1 3:1.5\n-1 1:2.0\n".as_bytes(), None).unwrap();
        assert_eq!((data.n(), data.d()), (2, 3));
        assert_eq!(data.labels(), &[1.0, -1.0]);
        let x: Vec<_> = data.features().column(0).iter().collect();
        assert_eq!(x, vec![(2, 1.5)]);
    }

    #[test]
    fn empty_stream() {
        let data = parse_libsvm("".as_bytes(), None).unwrap();
        assert_eq!((data.n(), data.d()), (0, 0));
    }

    #[test]
    fn zero_one_labels_are_remapped() {
        let data = parse_libsvm("0 1:1\n1 2:1\n".as_bytes(), None).unwrap();
        assert_eq!(data.labels(), &[-1.0, 1.0]);
    }

    #[test]
    fn forced_dimension() {
        let data = parse_libsvm("1 2:1\n".as_bytes(), Some(10)).unwrap();
        assert_eq!(data.d(), 10);
        assert!(parse_libsvm("1 12:1\n".as_bytes(), Some(10)).is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("1 1:1\n1 2:1 1:3\n", 2),
            ("1 1:1\n\nx 1:1\n", 3),
            ("1 0:1\n", 1),
            ("1 1:abc\n", 1),
            ("1 1\n", 1),
        ] {
            match parse_libsvm(text.as_bytes(), None) {
                Err(Error::Libsvm { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
