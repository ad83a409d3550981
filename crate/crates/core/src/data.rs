//! Tabular input: named numeric or categorical columns.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    /// Parsed reals together with the source text of each cell.
    Numeric { values: Vec<f64>, text: Vec<String> },
    /// Level codes into `levels`, levels in first-appearance order.
    Categorical { codes: Vec<usize>, levels: Vec<String> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric { values, .. } => values.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn categorical<S: AsRef<str>>(cells: &[S]) -> Self {
        let (codes, levels) = encode_levels(cells.iter().map(|s| s.as_ref()));
        Column::Categorical { codes, levels }
    }

    pub fn numeric(values: Vec<f64>) -> Self {
        let text = values.iter().map(|v| v.to_string()).collect();
        Column::Numeric { values, text }
    }
}

fn encode_levels<'a>(cells: impl Iterator<Item = &'a str>) -> (Vec<usize>, Vec<String>) {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut levels: Vec<String> = Vec::new();
    let codes = cells
        .map(|c| {
            *index.entry(c).or_insert_with(|| {
                levels.push(c.to_string());
                levels.len() - 1
            })
        })
        .collect();
    (codes, levels)
}

/// A grouping factor: one level code per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub codes: Vec<usize>,
    pub levels: Vec<String>,
}

impl Factor {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a column. The first column fixes the row count.
    pub fn with_column(mut self, name: &str, column: Column) -> Result<Self> {
        self.push(name, column)?;
        Ok(self)
    }

    pub fn push(&mut self, name: &str, column: Column) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Data(format!("duplicate column `{name}`")));
        }
        if !self.columns.is_empty() && column.len() != self.n_rows {
            return Err(Error::Data(format!(
                "column `{name}` has {} rows, expected {}",
                column.len(),
                self.n_rows
            )));
        }
        self.n_rows = column.len();
        self.names.push(name.to_string());
        self.columns.push(column);
        Ok(())
    }

    /// Replaces the values of an existing numeric column, e.g. a new response.
    pub fn with_numeric_replaced(&self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n_rows {
            return Err(Error::Data(format!("replacement for `{name}` has wrong length")));
        }
        let idx = self.index_of(name)?;
        let mut out = self.clone();
        out.columns[idx] = Column::numeric(values);
        Ok(out)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("no column named `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.index_of(name)?])
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric { values, .. } => Ok(values),
            Column::Categorical { .. } => Err(Error::Data(format!("column `{name}` is not numeric"))),
        }
    }

    /// Grouping factor for `name`. Categorical columns are used as is;
    /// numeric columns qualify only when every value is an integer, with
    /// levels taken from the cell text.
    pub fn factor(&self, name: &str) -> Result<Factor> {
        match self.column(name)? {
            Column::Categorical { codes, levels } => Ok(Factor { codes: codes.clone(), levels: levels.clone() }),
            Column::Numeric { values, text } => {
                if values.iter().any(|v| v.fract() != 0.0) {
                    return Err(Error::Design(format!(
                        "grouping variable `{name}` is numeric with non-integer values"
                    )));
                }
                let (codes, levels) = encode_levels(text.iter().map(String::as_str));
                Ok(Factor { codes, levels })
            }
        }
    }
}

/// Reads an RFC 4180 CSV with a header row. Columns whose every cell parses
/// as a real number are numeric; all others are categorical.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Data("empty file".into()));
    }
    for (i, h) in headers.iter().enumerate() {
        if h.is_empty() {
            return Err(Error::Data(format!("header {} is empty", i + 1)));
        }
        if headers[..i].contains(h) {
            return Err(Error::Data(format!("duplicate header `{h}`")));
        }
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        for (col, cell) in cells.iter_mut().zip(record.iter()) {
            col.push(cell.trim().to_string());
        }
    }
    if cells[0].is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let mut ds = Dataset::new();
    for (name, col) in headers.iter().zip(cells) {
        let parsed: Option<Vec<f64>> = col.iter().map(|c| parse_real(c)).collect();
        let column = match parsed {
            Some(values) => Column::Numeric { values, text: col },
            None => Column::categorical(&col),
        };
        ds.push(name, column)?;
    }
    Ok(ds)
}

fn parse_real(s: &str) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    v.is_finite().then_some(v)
}

fn csv_error(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Data(format!(
            "ragged row{}: expected {expected_len} fields, found {len}",
            pos.as_ref().map(|p| format!(" at line {}", p.line())).unwrap_or_default()
        )),
        _ => Error::Data(format!("csv: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infers_column_types() {
        let ds = read_csv("y,g,x\n1.5,a,3\n2,b,4\n-1e2,a,5\n".as_bytes()).unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.numeric("y").unwrap(), &[1.5, 2.0, -100.0]);
        let g = ds.factor("g").unwrap();
        assert_eq!(g.codes, vec![0, 1, 0]);
        assert_eq!(g.levels, vec!["a", "b"]);
        assert!(ds.numeric("g").is_err());
    }

    #[test]
    fn integer_numeric_columns_act_as_factors() {
        let ds = read_csv("g,h\n308,1.5\n309,2\n308,2\n".as_bytes()).unwrap();
        let g = ds.factor("g").unwrap();
        assert_eq!(g.levels, vec!["308", "309"]);
        assert_eq!(g.codes, vec![0, 1, 0]);
        assert!(matches!(ds.factor("h"), Err(Error::Design(_))));
    }

    #[test]
    fn rejects_malformed_input() {
        let e = read_csv("a,b\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("ragged"), "{e}");
        let e = read_csv("a,b\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("no data rows"), "{e}");
        let e = read_csv("".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
        let e = read_csv("a,a\n1,2\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
    }

    #[test]
    fn quoted_fields() {
        let ds = read_csv("s,v\n\"A:a\",1\n\"A,b\",2\n".as_bytes()).unwrap();
        assert_eq!(ds.factor("s").unwrap().levels, vec!["A:a", "A,b"]);
    }
}
