use std::io::BufRead;
use std::path::Path;

use super::ModelError;

/// One block of observations: an n_k x d row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    id: usize,
    d: usize,
    values: Vec<f64>,
}

impl DataBlock {
    pub fn new(id: usize, d: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        if d == 0 || values.is_empty() || values.len() % d != 0 {
            return Err(ModelError::InvalidDimensions {
                detail: format!(
                    "block {id}: {} values cannot form rows of arity {d}",
                    values.len()
                ),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteData {
                block: id,
                row: pos / d,
            });
        }
        Ok(DataBlock { id, d, values })
    }

    pub fn from_rows(id: usize, rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(ModelError::InvalidDimensions {
                detail: format!("block {id}: rows have inconsistent arity"),
            });
        }
        let values = rows.iter().flatten().copied().collect();
        DataBlock::new(id, d, values)
    }

    /// Reads one observation per line from a CSV file: d numeric columns,
    /// '.' decimal separator, optional single header line.
    pub fn from_csv(path: &Path, id: usize) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let reader = std::io::BufReader::new(file);
        let mut values = Vec::new();
        let mut d = 0usize;
        let mut data_lines = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ModelError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(row) => {
                    if data_lines == 0 {
                        d = row.len();
                    } else if row.len() != d {
                        return Err(ModelError::CsvShape {
                            path: path.display().to_string(),
                            line: lineno + 1,
                            expected: d,
                            got: row.len(),
                        });
                    }
                    values.extend_from_slice(&row);
                    data_lines += 1;
                }
                Err(_) if data_lines == 0 && values.is_empty() => {
                    // Header line: every parse failure before any data is
                    // treated as column names.
                    continue;
                }
                Err(_) => {
                    return Err(ModelError::CsvParse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                    });
                }
            }
        }
        if data_lines == 0 {
            return Err(ModelError::InvalidDimensions {
                detail: format!("{}: no data rows", path.display()),
            });
        }
        DataBlock::new(id, d, values)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn row_len(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    /// New block holding the listed rows, in the given order.
    pub fn subset(&self, indices: &[usize], new_id: usize) -> DataBlock {
        let mut values = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        DataBlock {
            id: new_id,
            d: self.d,
            values,
        }
    }
}
