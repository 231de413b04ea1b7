//! Dataset files: CSV with a header row, or the `ADBL` binary latent format.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use super::{Result, ShellError};

pub const BINARY_MAGIC: &[u8; 4] = b"ADBL";
pub const BINARY_VERSION: u8 = 1;
const BINARY_HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    /// `.csv` is CSV; `.adbl` and `.bin` are binary.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(DatasetFormat::Csv),
            "adbl" | "bin" => Some(DatasetFormat::Binary),
            _ => None,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(DatasetFormat::Csv),
            "binary" | "binary-latent" | "adbl" => Ok(DatasetFormat::Binary),
            other => Err(format!("unknown dataset format '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Option<Vec<f64>>,
    pub label_column: Option<String>,
}

impl Dataset {
    pub fn unlabeled(features: Array2<f64>) -> Self {
        let columns = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Self { columns, features, labels: None, label_column: None }
    }
}

fn resolve_format(path: &Path, format: Option<DatasetFormat>) -> Result<DatasetFormat> {
    format.or_else(|| DatasetFormat::from_path(path)).ok_or_else(|| {
        ShellError::InvalidInput(format!("cannot infer the format of {}; pass it explicitly", path.display()))
    })
}

/// Reads a dataset. For CSV, `label_column` names a column to split off as
/// labels; binary files never carry labels.
pub fn load_dataset(path: &Path, format: Option<DatasetFormat>, label_column: Option<&str>) -> Result<Dataset> {
    match resolve_format(path, format)? {
        DatasetFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| ShellError::io(path, e))?;
            parse_csv(&text, label_column)
        }
        DatasetFormat::Binary => {
            if label_column.is_some() {
                return Err(ShellError::InvalidInput("binary latent files carry no label column".into()));
            }
            let bytes = fs::read(path).map_err(|e| ShellError::io(path, e))?;
            Ok(Dataset::unlabeled(decode_binary(&bytes)?))
        }
    }
}

pub fn save_dataset(path: &Path, data: &Dataset, format: Option<DatasetFormat>) -> Result<()> {
    let bytes = match resolve_format(path, format)? {
        DatasetFormat::Csv => render_csv(data).into_bytes(),
        DatasetFormat::Binary => {
            if data.labels.is_some() {
                return Err(ShellError::InvalidInput("binary latent files cannot store labels".into()));
            }
            encode_binary(&data.features)?
        }
    };
    fs::write(path, bytes).map_err(|e| ShellError::io(path, e))
}

pub fn parse_csv(text: &str, label_column: Option<&str>) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(ShellError::Parse { line: 1, message: "missing header row".into() })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let label_index =
        match label_column {
            Some(name) => Some(names.iter().position(|c| c == name).ok_or_else(|| ShellError::Parse {
                line: 1,
                message: format!("label column '{name}' not in header"),
            })?),
            None => None,
        };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (index, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(ShellError::Parse {
                line: index + 1,
                message: format!("expected {} cells, found {}", names.len(), cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| ShellError::Parse {
                line: index + 1,
                message: format!("non-numeric cell '{}' in column '{}'", cell.trim(), names[j]),
            })?;
            if !v.is_finite() {
                return Err(ShellError::Parse {
                    line: index + 1,
                    message: format!("non-finite value in column '{}'", names[j]),
                });
            }
            if Some(j) == label_index {
                labels.push(v);
            } else {
                values.push(v);
            }
        }
        rows += 1;
    }
    let columns: Vec<String> =
        names.iter().enumerate().filter(|(j, _)| Some(*j) != label_index).map(|(_, n)| n.clone()).collect();
    let features =
        Array2::from_shape_vec((rows, columns.len()), values).map_err(|e| ShellError::InvalidInput(e.to_string()))?;
    Ok(Dataset {
        columns,
        features,
        labels: label_index.map(|_| labels),
        label_column: label_index.map(|j| names[j].clone()),
    })
}

/// CSV text; `f64` display output is the shortest exact round-trip form.
pub fn render_csv(data: &Dataset) -> String {
    let mut header = data.columns.clone();
    if let Some(name) = &data.label_column {
        header.push(name.clone());
    }
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in data.features.rows().into_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = &data.labels {
            cells.push(labels[i].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn encode_binary(x: &Array2<f64>) -> Result<Vec<u8>> {
    let rows = u32::try_from(x.nrows()).map_err(|_| ShellError::InvalidInput("too many rows".into()))?;
    let cols = u32::try_from(x.ncols()).map_err(|_| ShellError::InvalidInput("too many columns".into()))?;
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 8 * x.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.push(BINARY_VERSION);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<Array2<f64>> {
    let fail = |offset: usize, message: &str| ShellError::Binary { offset, message: message.into() };
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(fail(0, "bad magic bytes"));
    }
    if bytes[4] != BINARY_VERSION {
        return Err(fail(4, &format!("unsupported version {}", bytes[4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(5), word(9));
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|b| b.checked_add(BINARY_HEADER_LEN))
        .ok_or_else(|| fail(5, "shape overflows"))?;
    if bytes.len() != expected {
        return Err(fail(bytes.len().min(expected), &format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes[BINARY_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(fail(BINARY_HEADER_LEN + 8 * k, "non-finite value"));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| ShellError::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn csv_round_trip_is_exact() {
        let data = parse_csv("a,b,y\n0.1,-2.5,3\n1e-300,0.30000000000000004,-0\n", Some("y")).unwrap();
        assert_eq!(data.columns, vec!["a", "b"]);
        assert_eq!(data.labels.as_deref(), Some(&[3.0, -0.0][..]));
        let again = parse_csv(&render_csv(&data), Some("y")).unwrap();
        assert_eq!(again, data);
        assert_eq!(again.features[[1, 1]].to_bits(), 0.30000000000000004f64.to_bits());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = parse_csv("a,b\n1,2\n3\n", None).unwrap_err();
        assert!(matches!(err, ShellError::Parse { line: 3, .. }), "{err}");
        let err = parse_csv("a,b\n1,x\n", None).unwrap_err();
        assert!(matches!(err, ShellError::Parse { line: 2, .. }));
        assert!(parse_csv("", None).is_err());
        assert!(parse_csv("a\n1\n", Some("y")).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = stream(1, &[0]);
        let x = Array2::from_shape_simple_fn((1000, 8), || rng.sample::<f64, _>(StandardNormal));
        let decoded = decode_binary(&encode_binary(&x).unwrap()).unwrap();
        assert_eq!(decoded, x);
    }

    #[test]
    fn binary_rejects_corruption() {
        let x = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_binary(&x).unwrap();
        assert!(matches!(decode_binary(&bytes[..bytes.len() - 1]), Err(ShellError::Binary { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_binary(&bytes), Err(ShellError::Binary { offset: 0, .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_vec((2, 2), vec![0.5, -1.25, 1e10, 7.0]).unwrap();
        let data = Dataset::unlabeled(x);
        for name in ["d.csv", "d.adbl"] {
            let path = dir.path().join(name);
            save_dataset(&path, &data, None).unwrap();
            assert_eq!(load_dataset(&path, None, None).unwrap(), data);
        }
        assert!(load_dataset(&dir.path().join("d.txt"), None, None).is_err());
    }
}
