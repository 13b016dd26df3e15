//! The canonical p×N data matrix with its missing-value mask and identifiers,
//! plus delimited-text parsing of matrices and annotation tables.
//!
//! Variables live in rows and samples in columns throughout the crate.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens read as a missing cell. Serialization always writes the first one.
pub const MISSING_TOKENS: [&str; 3] = ["NA", "NaN", ""];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    #[default]
    Auto,
    Tab,
    Comma,
}

impl Delimiter {
    fn resolve(self, header: &str) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
            Delimiter::Auto => {
                if header.contains('\t') {
                    '\t'
                } else if header.contains(',') {
                    ','
                } else {
                    '\t'
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    VariablesInRows,
    SamplesInRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MatrixFormat {
    #[serde(default)]
    pub delimiter: Delimiter,
    #[serde(default)]
    pub orientation: Orientation,
}

/// A p×N matrix of measurements: `values[(j, k)]` is variable `j` in sample `k`.
///
/// Missing cells hold `NaN` in `values` and `true` in `missing`.
#[derive(Debug, Clone)]
pub struct Dataset {
    values: DMatrix<f64>,
    missing: DMatrix<bool>,
    variable_ids: Vec<String>,
    sample_ids: Vec<String>,
}

fn check_unique(ids: &[String], kind: &'static str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                kind,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(
        mut values: DMatrix<f64>,
        missing: DMatrix<bool>,
        variable_ids: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let (p, n) = values.shape();
        if p == 0 || n == 0 {
            return Err(Error::Dimension(format!(
                "dataset must have at least one variable and one sample, got {p}x{n}"
            )));
        }
        if missing.shape() != (p, n) {
            return Err(Error::Dimension(format!(
                "mask is {:?}, values are {:?}",
                missing.shape(),
                (p, n)
            )));
        }
        if variable_ids.len() != p || sample_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} variable ids and {} sample ids for a {p}x{n} matrix",
                variable_ids.len(),
                sample_ids.len()
            )));
        }
        check_unique(&variable_ids, "variable")?;
        check_unique(&sample_ids, "sample")?;
        for k in 0..n {
            for j in 0..p {
                if missing[(j, k)] {
                    values[(j, k)] = f64::NAN;
                } else if !values[(j, k)].is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "non-finite value at variable `{}`, sample `{}`",
                        variable_ids[j], sample_ids[k]
                    )));
                }
            }
        }
        Ok(Dataset {
            values,
            missing,
            variable_ids,
            sample_ids,
        })
    }

    /// A dataset without missing entries.
    pub fn complete(
        values: DMatrix<f64>,
        variable_ids: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let missing = DMatrix::from_element(values.nrows(), values.ncols(), false);
        Self::new(values, missing, variable_ids, sample_ids)
    }

    /// A complete dataset with generated identifiers `v1..vp` and `s1..sN`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let vids = (1..=values.nrows()).map(|j| format!("v{j}")).collect();
        let sids = (1..=values.ncols()).map(|k| format!("s{k}")).collect();
        Self::complete(values, vids, sids)
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn missing(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn variable_ids(&self) -> &[String] {
        &self.variable_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    /// The value matrix, failing when any entry is missing.
    pub fn complete_values(&self) -> Result<&DMatrix<f64>> {
        if self.has_missing() {
            Err(Error::MissingValues)
        } else {
            Ok(&self.values)
        }
    }

    pub fn sample_index(&self, id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == id)
    }

    pub fn variable_index(&self, id: &str) -> Option<usize> {
        self.variable_ids.iter().position(|s| s == id)
    }

    /// Replace the values of a complete dataset, keeping identifiers.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::Dimension(format!(
                "replacement is {:?}, dataset is {:?}",
                values.shape(),
                self.values.shape()
            )));
        }
        Self::complete(values, self.variable_ids.clone(), self.sample_ids.clone())
    }

    pub fn select_variables(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&j| j >= self.p()) {
            return Err(Error::Dimension(format!("variable index {bad} >= {}", self.p())));
        }
        Self::new(
            self.values.select_rows(rows),
            self.missing.select_rows(rows),
            rows.iter().map(|&j| self.variable_ids[j].clone()).collect(),
            self.sample_ids.clone(),
        )
    }

    pub fn select_samples(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&k| k >= self.n()) {
            return Err(Error::Dimension(format!("sample index {bad} >= {}", self.n())));
        }
        Self::new(
            self.values.select_columns(cols),
            self.missing.select_columns(cols),
            self.variable_ids.clone(),
            cols.iter().map(|&k| self.sample_ids[k].clone()).collect(),
        )
    }

    /// Equality of identifiers, mask, and the bit patterns of observed values.
    pub fn bitwise_eq(&self, other: &Dataset) -> bool {
        self.variable_ids == other.variable_ids
            && self.sample_ids == other.sample_ids
            && self.missing == other.missing
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.missing.iter())
                .all(|((a, b), &m)| m || a.to_bits() == b.to_bits())
    }

    /// Render as delimited text with variables in rows. Values carry 17
    /// significant digits, so parsing the output recovers every bit.
    pub fn to_delimited(&self, delimiter: char) -> String {
        let mut out = String::new();
        out.push_str("id");
        for s in &self.sample_ids {
            out.push(delimiter);
            out.push_str(s);
        }
        out.push('\n');
        for j in 0..self.p() {
            out.push_str(&self.variable_ids[j]);
            for k in 0..self.n() {
                out.push(delimiter);
                if self.missing[(j, k)] {
                    out.push_str(MISSING_TOKENS[0]);
                } else {
                    out.push_str(&format_f64(self.values[(j, k)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(text: &str, delimiter: Delimiter) -> Result<Table> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty());
    let (header_line, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        column: 1,
        message: "empty input".into(),
    })?;
    let delim = delimiter.resolve(header);
    let header: Vec<String> = header.split(delim).map(|c| c.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: header_line,
            column: 1,
            message: "header needs an identifier column and at least one data column".into(),
        });
    }
    let mut rows = Vec::new();
    for (line, l) in lines {
        let cells: Vec<String> = l.split(delim).map(|c| c.trim().to_string()).collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: cells.len().min(header.len()) + 1,
                message: format!(
                    "ragged row: {} cells, header has {}",
                    cells.len(),
                    header.len()
                ),
            });
        }
        rows.push((line, cells));
    }
    Ok(Table { header, rows })
}

/// Parse a delimited matrix. The first row holds column identifiers, the first
/// column row identifiers; with [`Orientation::SamplesInRows`] the result is
/// transposed so that variables end up in rows.
pub fn parse_matrix(text: &str, format: &MatrixFormat) -> Result<Dataset> {
    let table = read_table(text, format.delimiter)?;
    let col_ids: Vec<String> = table.header[1..].to_vec();
    let (row_kind, col_kind) = match format.orientation {
        Orientation::VariablesInRows => ("variable", "sample"),
        Orientation::SamplesInRows => ("sample", "variable"),
    };

    let mut seen = HashSet::new();
    for (c, id) in col_ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(Error::Parse {
                line: 1,
                column: c + 2,
                message: format!("duplicate {col_kind} identifier `{id}`"),
            });
        }
    }

    let nrows = table.rows.len();
    let ncols = col_ids.len();
    if nrows == 0 {
        return Err(Error::Parse {
            line: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    let mut values = DMatrix::zeros(nrows, ncols);
    let mut missing = DMatrix::from_element(nrows, ncols, false);
    let mut row_ids = Vec::with_capacity(nrows);
    let mut seen = HashSet::new();
    for (r, (line, cells)) in table.rows.iter().enumerate() {
        let id = &cells[0];
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                line: *line,
                column: 1,
                message: format!("duplicate {row_kind} identifier `{id}`"),
            });
        }
        row_ids.push(id.clone());
        for (c, cell) in cells[1..].iter().enumerate() {
            if MISSING_TOKENS.contains(&cell.as_str()) {
                missing[(r, c)] = true;
                values[(r, c)] = f64::NAN;
                continue;
            }
            match cell.parse::<f64>() {
                Ok(x) if x.is_finite() => values[(r, c)] = x,
                _ => {
                    return Err(Error::Parse {
                        line: *line,
                        column: c + 2,
                        message: format!("`{cell}` is neither a finite number nor a missing token"),
                    })
                }
            }
        }
    }

    match format.orientation {
        Orientation::VariablesInRows => Dataset::new(values, missing, row_ids, col_ids),
        Orientation::SamplesInRows => {
            Dataset::new(values.transpose(), missing.transpose(), col_ids, row_ids)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Variable,
    Sample,
}

/// Per-identifier annotations for either the variables or the samples of a dataset.
///
/// Each column of the source table becomes one named map. Values stay textual;
/// [`AnnotationTable::numeric`] reads a column as numbers when possible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTable {
    pub scope: Scope,
    pub factors: BTreeMap<String, BTreeMap<String, String>>,
    /// Column names in source order.
    pub order: Vec<String>,
}

pub fn parse_annotations(
    text: &str,
    scope: Scope,
    delimiter: Delimiter,
    dataset: &Dataset,
) -> Result<AnnotationTable> {
    let table = read_table(text, delimiter)?;
    let known: HashSet<&str> = match scope {
        Scope::Sample => dataset.sample_ids().iter().map(String::as_str).collect(),
        Scope::Variable => dataset.variable_ids().iter().map(String::as_str).collect(),
    };
    let kind = match scope {
        Scope::Sample => "sample",
        Scope::Variable => "variable",
    };
    let names: Vec<String> = table.header[1..].to_vec();
    let mut factors: BTreeMap<String, BTreeMap<String, String>> = names
        .iter()
        .map(|n| (n.clone(), BTreeMap::new()))
        .collect();
    if factors.len() != names.len() {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "duplicate annotation column name".into(),
        });
    }
    let mut seen = HashSet::new();
    for (_line, cells) in &table.rows {
        let id = &cells[0];
        if !known.contains(id.as_str()) {
            return Err(Error::UnknownId {
                kind,
                id: id.clone(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId {
                kind,
                id: id.clone(),
            });
        }
        for (name, cell) in names.iter().zip(&cells[1..]) {
            if !MISSING_TOKENS.contains(&cell.as_str()) {
                factors
                    .get_mut(name)
                    .expect("column registered")
                    .insert(id.clone(), cell.clone());
            }
        }
    }
    if let Some((name, _)) = factors.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::EmptyFactor(name.clone()));
    }
    Ok(AnnotationTable {
        scope,
        factors,
        order: names,
    })
}

impl AnnotationTable {
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn get(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.factors.get(name)
    }

    /// Numeric view of a column; `None` when any present value is not a number.
    pub fn numeric(&self, name: &str) -> Option<BTreeMap<String, f64>> {
        self.factors
            .get(name)?
            .iter()
            .map(|(id, v)| v.parse::<f64>().ok().map(|x| (id.clone(), x)))
            .collect()
    }

    /// Materialize a nominal factor over the given (current) sample ids.
    pub fn factor(&self, name: &str, ids: &[String]) -> Result<Factor> {
        let column = self
            .factors
            .get(name)
            .ok_or_else(|| Error::UnknownFactor(name.to_string()))?;
        let labels = ids
            .iter()
            .map(|id| {
                column.get(id).cloned().ok_or_else(|| {
                    Error::InvalidParameter(format!("sample `{id}` has no value for factor `{name}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Factor::from_labels(name, &labels)
    }
}

/// A nominal factor over samples: every sample belongs to exactly one level and
/// every level is non-empty. Levels keep their order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub assignment: Vec<usize>,
}

impl Factor {
    pub fn from_labels<S: AsRef<str>>(name: &str, labels: &[S]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyFactor(name.to_string()));
        }
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *index.entry(l.to_string()).or_insert_with(|| {
                    levels.push(l.to_string());
                    levels.len() - 1
                })
            })
            .collect();
        Ok(Factor {
            name: name.to_string(),
            levels,
            assignment,
        })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn level_index(&self, level: &str) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| l == level)
            .ok_or_else(|| Error::UnknownLevel {
                factor: self.name.clone(),
                level: level.to_string(),
            })
    }

    /// Sample indices belonging to a level.
    pub fn members(&self, level: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(k, &l)| (l == level).then_some(k))
            .collect()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.levels.len()];
        for &l in &self.assignment {
            sizes[l] += 1;
        }
        sizes
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    variable_ids: Vec<String>,
    sample_ids: Vec<String>,
    /// Row-major, `null` where missing.
    values: Vec<Vec<Option<f64>>>,
}

impl Serialize for Dataset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let values = (0..self.p())
            .map(|j| {
                (0..self.n())
                    .map(|k| (!self.missing[(j, k)]).then(|| self.values[(j, k)]))
                    .collect()
            })
            .collect();
        DatasetRepr {
            variable_ids: self.variable_ids.clone(),
            sample_ids: self.sample_ids.clone(),
            values,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = DatasetRepr::deserialize(d)?;
        let p = repr.values.len();
        let n = repr.sample_ids.len();
        if repr.values.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("ragged value rows"));
        }
        let values = DMatrix::from_fn(p, n, |j, k| repr.values[j][k].unwrap_or(f64::NAN));
        let missing = DMatrix::from_fn(p, n, |j, k| repr.values[j][k].is_none());
        Dataset::new(values, missing, repr.variable_ids, repr.sample_ids)
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt() -> MatrixFormat {
        MatrixFormat::default()
    }

    #[test]
    fn parses_plain_matrix() {
        let d = parse_matrix("id\ta\tb\ng1\t1\t2\ng2\t3\t4\n", &fmt()).unwrap();
        assert_eq!(d.p(), 2);
        assert_eq!(d.n(), 2);
        assert_eq!(d.values()[(1, 0)], 3.0);
        assert!(!d.has_missing());
        assert_eq!(d.sample_ids(), ["a", "b"]);
    }

    #[test]
    fn missing_token_sets_only_that_cell() {
        let d = parse_matrix("id,a,b\ng1,1,NA\ng2,3,4\n", &fmt()).unwrap();
        assert!(d.missing()[(0, 1)]);
        assert_eq!(d.missing_count(), 1);
        let d = parse_matrix("id\ta\tb\ng1\t\t2\ng2\tNaN\t4", &fmt()).unwrap();
        assert!(d.missing()[(0, 0)] && d.missing()[(1, 0)]);
        assert_eq!(d.missing_count(), 2);
    }

    #[test]
    fn duplicate_variable_is_named() {
        let err = parse_matrix("id\ta\tb\ng1\t1\t2\ng1\t3\t4\n", &fmt()).unwrap_err();
        match err {
            Error::Parse { line, column, message } => {
                assert_eq!((line, column), (3, 1));
                assert!(message.contains("`g1`"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_non_numeric_report_position() {
        let err = parse_matrix("id\ta\tb\ng1\t1\n", &fmt()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_matrix("id\ta\tb\ng1\t1\tx\n", &fmt()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 3, .. }));
        let err = parse_matrix("id\ta\tb\ng1\t1\tinf\n", &fmt()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 3, .. }));
    }

    #[test]
    fn samples_in_rows_is_transposed() {
        let f = MatrixFormat {
            delimiter: Delimiter::Comma,
            orientation: Orientation::SamplesInRows,
        };
        let d = parse_matrix("id,g1,g2,g3\ns1,1,2,3\ns2,4,5,6\n", &f).unwrap();
        assert_eq!((d.p(), d.n()), (3, 2));
        assert_eq!(d.values()[(2, 1)], 6.0);
        assert_eq!(d.variable_ids(), ["g1", "g2", "g3"]);
    }

    #[test]
    fn serialization_emits_na_and_round_trips() {
        let d = parse_matrix("id\ta\tb\ng1\t0.1\tNaN\ng2\t3\t-4e-300\n", &fmt()).unwrap();
        let text = d.to_delimited('\t');
        assert!(text.contains("\tNA\n"));
        let back = parse_matrix(&text, &fmt()).unwrap();
        assert!(d.bitwise_eq(&back));
    }

    fn smoking_dataset() -> (Dataset, String) {
        let sids: Vec<String> = (1..=75).map(|k| format!("s{k}")).collect();
        let d = Dataset::complete(DMatrix::zeros(1, 75), vec!["g".into()], sids.clone()).unwrap();
        let mut text = String::from("id\tsmoking\n");
        for (k, s) in sids.iter().enumerate() {
            let label = if k < 34 {
                "current"
            } else if k < 52 {
                "former"
            } else {
                "never"
            };
            text.push_str(&format!("{s}\t{label}\n"));
        }
        (d, text)
    }

    #[test]
    fn smoking_annotation_yields_three_levels() {
        let (d, text) = smoking_dataset();
        let ann = parse_annotations(&text, Scope::Sample, Delimiter::Auto, &d).unwrap();
        let f = ann.factor("smoking", d.sample_ids()).unwrap();
        assert_eq!(f.levels, ["current", "former", "never"]);
        assert_eq!(f.level_sizes(), [34, 18, 23]);
    }

    #[test]
    fn empty_factor_column_is_rejected() {
        let (d, _) = smoking_dataset();
        let err = parse_annotations("id\tsmoking\ns1\tNA\ns2\t\n", Scope::Sample, Delimiter::Auto, &d)
            .unwrap_err();
        assert_eq!(err, Error::EmptyFactor("smoking".into()));
    }

    #[test]
    fn unknown_sample_is_named() {
        let (d, _) = smoking_dataset();
        let err = parse_annotations("id\tsmoking\nzz\tcurrent\n", Scope::Sample, Delimiter::Auto, &d)
            .unwrap_err();
        assert_eq!(
            err,
            Error::UnknownId {
                kind: "sample",
                id: "zz".into()
            }
        );
    }

    #[test]
    fn numeric_columns_are_readable() {
        let (d, _) = smoking_dataset();
        let ann =
            parse_annotations("id\tdesc\ns1\t5\ns2\t58\n", Scope::Sample, Delimiter::Auto, &d).unwrap();
        assert_eq!(ann.numeric("desc").unwrap()["s2"], 58.0);
    }

    #[test]
    fn constructor_rejects_duplicates_and_non_finite() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::INFINITY]);
        assert!(Dataset::complete(m, vec!["a".into()], vec!["x".into(), "y".into()]).is_err());
        let m = DMatrix::zeros(1, 2);
        let err = Dataset::complete(m, vec!["a".into()], vec!["x".into(), "x".into()]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { kind: "sample", .. }));
    }

    #[test]
    fn json_round_trip_keeps_mask() {
        let d = parse_matrix("id\ta\tb\ng1\t0.1\tNA\n", &fmt()).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: Dataset = serde_json::from_str(&json).unwrap();
        assert!(d.bitwise_eq(&back));
    }
}
