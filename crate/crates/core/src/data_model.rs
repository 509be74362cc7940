//! Observations of a response on a sparse grid of (row level, column level)
//! cells, stored as two factor vectors plus the response and covariates.
//!
//! The R x C observation pattern is never materialized; every kernel in the
//! crate works by scatter/gather over the factor vectors.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name given to the automatically prepended column of ones.
pub const INTERCEPT: &str = "(Intercept)";

/// One of the two crossed factors: `A` indexes rows, `B` indexes columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

impl Factor {
    pub fn other(self) -> Factor {
        match self {
            Factor::A => Factor::B,
            Factor::B => Factor::A,
        }
    }
}

/// Original string identifiers of each level, in dense-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDictionary {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
}

/// Per-level observation counts `N_i.` and `N_.j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FactorCounts {
    pub n_row: Vec<usize>,
    pub n_col: Vec<usize>,
}

impl FactorCounts {
    pub fn get(&self, factor: Factor) -> &[usize] {
        match factor {
            Factor::A => &self.n_row,
            Factor::B => &self.n_col,
        }
    }

    pub fn sum_sq(&self, factor: Factor) -> f64 {
        self.get(factor).iter().map(|&n| (n as f64) * (n as f64)).sum()
    }
}

/// Observations grouped by the level of one factor (CSR layout).
#[derive(Debug, Clone)]
pub struct Grouping {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Grouping {
    /// Observation indices belonging to `level`.
    pub fn members(&self, level: usize) -> &[usize] {
        &self.members[self.offsets[level]..self.offsets[level + 1]]
    }

    pub fn n_levels(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct ObservationTable {
    rows: Vec<usize>,
    cols: Vec<usize>,
    y: Vec<f64>,
    x: DMatrix<f64>,
    covariate_names: Vec<String>,
    n_row_levels: usize,
    n_col_levels: usize,
    counts: FactorCounts,
    levels: Option<LevelDictionary>,
}

impl ObservationTable {
    /// Builds a table from dense level indices, validating every invariant:
    /// indices in range, no repeated cell, no empty level, `N >= 1`, `p >= 1`.
    pub fn new(
        rows: Vec<usize>,
        cols: Vec<usize>,
        y: Vec<f64>,
        x: DMatrix<f64>,
        n_row_levels: usize,
        n_col_levels: usize,
    ) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Invalid("table has no observations".into()));
        }
        if cols.len() != n || y.len() != n || x.nrows() != n {
            return Err(Error::Invalid(format!(
                "length mismatch: rows={}, cols={}, y={}, x rows={}",
                n,
                cols.len(),
                y.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Invalid("covariate matrix has no columns".into()));
        }
        let mut n_row = vec![0usize; n_row_levels];
        let mut n_col = vec![0usize; n_col_levels];
        let mut seen = HashSet::with_capacity(n);
        for (k, (&i, &j)) in rows.iter().zip(&cols).enumerate() {
            if i >= n_row_levels || j >= n_col_levels {
                return Err(Error::Invalid(format!(
                    "observation {k}: level ({i}, {j}) outside {n_row_levels} x {n_col_levels}"
                )));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Invalid(format!("duplicate cell ({i}, {j})")));
            }
            n_row[i] += 1;
            n_col[j] += 1;
        }
        if let Some(i) = n_row.iter().position(|&c| c == 0) {
            return Err(Error::Invalid(format!("row level {i} has no observations")));
        }
        if let Some(j) = n_col.iter().position(|&c| c == 0) {
            return Err(Error::Invalid(format!("column level {j} has no observations")));
        }
        let p = x.ncols();
        let covariate_names = (0..p)
            .map(|k| if k == 0 { INTERCEPT.to_string() } else { format!("x{k}") })
            .collect();
        Ok(Self {
            rows,
            cols,
            y,
            x,
            covariate_names,
            n_row_levels,
            n_col_levels,
            counts: FactorCounts { n_row, n_col },
            levels: None,
        })
    }

    /// Intercept-only table with a zero response; the shape sampled designs take.
    pub fn design_only(
        rows: Vec<usize>,
        cols: Vec<usize>,
        n_row_levels: usize,
        n_col_levels: usize,
    ) -> Result<Self> {
        let n = rows.len();
        Self::new(
            rows,
            cols,
            vec![0.0; n],
            DMatrix::from_element(n, 1, 1.0),
            n_row_levels,
            n_col_levels,
        )
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::Invalid(format!(
                "{} covariate names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn with_levels(mut self, levels: LevelDictionary) -> Result<Self> {
        if levels.rows.len() != self.n_row_levels || levels.cols.len() != self.n_col_levels {
            return Err(Error::Invalid("level dictionary does not match table".into()));
        }
        self.levels = Some(levels);
        Ok(self)
    }

    /// Same design with a new response and covariates.
    pub fn with_data(&self, y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.len() != self.n_obs() || x.nrows() != self.n_obs() || x.ncols() == 0 {
            return Err(Error::Invalid("replacement data has the wrong shape".into()));
        }
        let p = x.ncols();
        let mut out = self.clone();
        out.y = y;
        out.x = x;
        if p != self.p() {
            out.covariate_names = (0..p)
                .map(|k| if k == 0 { INTERCEPT.to_string() } else { format!("x{k}") })
                .collect();
        }
        Ok(out)
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_row_levels(&self) -> usize {
        self.n_row_levels
    }

    pub fn n_col_levels(&self) -> usize {
        self.n_col_levels
    }

    pub fn n_levels(&self, factor: Factor) -> usize {
        match factor {
            Factor::A => self.n_row_levels,
            Factor::B => self.n_col_levels,
        }
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Factor vector for `factor`: the level of every observation.
    pub fn levels_of(&self, factor: Factor) -> &[usize] {
        match factor {
            Factor::A => &self.rows,
            Factor::B => &self.cols,
        }
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn level_dictionary(&self) -> Option<&LevelDictionary> {
        self.levels.as_ref()
    }

    /// Counts cached at construction.
    pub fn factor_counts(&self) -> &FactorCounts {
        &self.counts
    }

    pub fn grouping(&self, factor: Factor) -> Grouping {
        let levels = self.levels_of(factor);
        let counts = self.counts.get(factor);
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for &c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut fill = offsets[..counts.len()].to_vec();
        let mut members = vec![0; levels.len()];
        for (k, &l) in levels.iter().enumerate() {
            members[fill[l]] = k;
            fill[l] += 1;
        }
        Grouping { offsets, members }
    }
}

/// Recounts `N_i.` and `N_.j` in one pass over the observations.
pub fn counts(table: &ObservationTable) -> FactorCounts {
    let mut n_row = vec![0usize; table.n_row_levels()];
    let mut n_col = vec![0usize; table.n_col_levels()];
    for (&i, &j) in table.rows().iter().zip(table.cols()) {
        n_row[i] += 1;
        n_col[j] += 1;
    }
    FactorCounts { n_row, n_col }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoObservationAxis {
    /// `Z Z^T`: shared columns between pairs of rows.
    RowPairs,
    /// `Z^T Z`: shared rows between pairs of columns.
    ColumnPairs,
}

/// Sparse symmetric co-observation counts. Both `(a, b)` and `(b, a)` are stored.
#[derive(Debug, Clone)]
pub struct CoObservation {
    pub axis: CoObservationAxis,
    pub dim: usize,
    entries: HashMap<(usize, usize), u64>,
}

impl CoObservation {
    pub fn get(&self, a: usize, b: usize) -> u64 {
        self.entries.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.entries.iter().map(|(&(a, b), &v)| (a, b, v))
    }

    pub fn off_diagonal_sum(&self) -> u64 {
        self.iter().filter(|(a, b, _)| a != b).map(|(_, _, v)| v).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (a, b, v) in self.iter() {
            m[(a, b)] = v as f64;
        }
        m
    }
}

/// Co-observation counts for pairs of levels along `axis`.
///
/// Cost is `O(sum_i N_i.^2)` for column pairs (and the column analogue for row
/// pairs), which is super-linear in `N` for dense rows. Intended for
/// diagnostics on moderately sized data.
pub fn co_observation(table: &ObservationTable, axis: CoObservationAxis) -> CoObservation {
    let (group_by, emit) = match axis {
        CoObservationAxis::ColumnPairs => (Factor::A, Factor::B),
        CoObservationAxis::RowPairs => (Factor::B, Factor::A),
    };
    let grouping = table.grouping(group_by);
    let emit_levels = table.levels_of(emit);
    let mut entries: HashMap<(usize, usize), u64> = HashMap::new();
    for g in 0..grouping.n_levels() {
        let members = grouping.members(g);
        for &u in members {
            for &v in members {
                *entries.entry((emit_levels[u], emit_levels[v])).or_insert(0) += 1;
            }
        }
    }
    CoObservation {
        axis,
        dim: table.n_levels(emit),
        entries,
    }
}

/// Column designations for CSV ingestion.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub row_column: String,
    pub col_column: String,
    pub response: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            row_column: "row".into(),
            col_column: "col".into(),
            response: "y".into(),
        }
    }
}

/// Reads a headed CSV. The row/column id fields are arbitrary strings mapped to
/// dense indices in order of first appearance; all remaining fields are
/// numeric covariates, and an intercept column is prepended.
pub fn ingest_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<ObservationTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let row_idx = find(&schema.row_column)?;
    let col_idx = find(&schema.col_column)?;
    let resp_idx = find(&schema.response)?;
    if row_idx == col_idx || row_idx == resp_idx || col_idx == resp_idx {
        return Err(Error::Schema("row, column and response must be distinct columns".into()));
    }
    let cov_idx: Vec<usize> = (0..headers.len())
        .filter(|k| ![row_idx, col_idx, resp_idx].contains(k))
        .collect();

    let mut row_ids: HashMap<String, usize> = HashMap::new();
    let mut col_ids: HashMap<String, usize> = HashMap::new();
    let mut dict = LevelDictionary { rows: Vec::new(), cols: Vec::new() };
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut y = Vec::new();
    let mut xvals: Vec<f64> = Vec::new();
    let mut cells = HashSet::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse = |k: usize| -> Result<f64> {
            let raw = record.get(k).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("column {:?}: {raw:?} is not a finite number", &headers[k]),
                })
        };
        let rid = record.get(row_idx).unwrap_or("").trim().to_string();
        let cid = record.get(col_idx).unwrap_or("").trim().to_string();
        let next_row = row_ids.len();
        let i = *row_ids.entry(rid.clone()).or_insert_with(|| {
            dict.rows.push(rid.clone());
            next_row
        });
        let next_col = col_ids.len();
        let j = *col_ids.entry(cid.clone()).or_insert_with(|| {
            dict.cols.push(cid.clone());
            next_col
        });
        if !cells.insert((i, j)) {
            return Err(Error::DuplicateCell { row: rid, col: cid, line });
        }
        y.push(parse(resp_idx)?);
        for &k in &cov_idx {
            xvals.push(parse(k)?);
        }
        rows.push(i);
        cols.push(j);
    }

    let n = rows.len();
    if n == 0 {
        return Err(Error::Schema("no data rows".into()));
    }
    let p = cov_idx.len() + 1;
    let x = DMatrix::from_fn(n, p, |r, c| if c == 0 { 1.0 } else { xvals[r * cov_idx.len() + c - 1] });
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(cov_idx.iter().map(|&k| headers[k].trim().to_string()));
    let (nr, nc) = (dict.rows.len(), dict.cols.len());
    ObservationTable::new(rows, cols, y, x, nr, nc)?
        .with_covariate_names(names)?
        .with_levels(dict)
}

/// Writes a table in the layout `ingest_csv` reads with the default schema.
/// Levels without a dictionary are labelled `r<i>` / `c<j>`; the intercept is
/// not written.
pub fn write_csv<W: Write>(table: &ObservationTable, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["row".to_string(), "col".to_string(), "y".to_string()];
    header.extend(table.covariate_names()[1..].iter().cloned());
    w.write_record(&header)?;
    let label_row = |i: usize| match table.level_dictionary() {
        Some(d) => d.rows[i].clone(),
        None => format!("r{i}"),
    };
    let label_col = |j: usize| match table.level_dictionary() {
        Some(d) => d.cols[j].clone(),
        None => format!("c{j}"),
    };
    let mut record = Vec::with_capacity(header.len());
    for k in 0..table.n_obs() {
        record.clear();
        record.push(label_row(table.rows()[k]));
        record.push(label_col(table.cols()[k]));
        record.push(format!("{}", table.y()[k]));
        for c in 1..table.p() {
            record.push(format!("{}", table.x()[(k, c)]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        CsvSchema {
            row_column: "user".into(),
            col_column: "item".into(),
            response: "y".into(),
        }
    }

    /// Z = [[1,1],[0,1]]
    fn staircase() -> ObservationTable {
        ObservationTable::design_only(vec![0, 0, 1], vec![0, 1, 1], 2, 2).unwrap()
    }

    #[test]
    fn single_row_csv() {
        let t = ingest_csv("user,item,y,z\nu1,itemA,4.0,0.3\n".as_bytes(), &schema()).unwrap();
        assert_eq!((t.n_obs(), t.n_row_levels(), t.n_col_levels(), t.p()), (1, 1, 1, 2));
        assert_eq!(t.x()[(0, 0)], 1.0);
        assert_eq!(t.x()[(0, 1)], 0.3);
        assert_eq!(t.covariate_names(), &[INTERCEPT.to_string(), "z".to_string()]);
    }

    const COMPLETE: &str = "user,item,y\nu1,A,1\nu1,B,2\nu2,A,3\nu2,B,4\n";

    #[test]
    fn complete_two_by_two() {
        let t = ingest_csv(COMPLETE.as_bytes(), &schema()).unwrap();
        assert_eq!((t.n_obs(), t.n_row_levels(), t.n_col_levels()), (4, 2, 2));
        let c = counts(&t);
        assert_eq!(c.n_row, vec![2, 2]);
        assert_eq!(c.n_col, vec![2, 2]);
        let d = t.level_dictionary().unwrap();
        assert_eq!(d.rows, vec!["u1", "u2"]);
        assert_eq!(d.cols, vec!["A", "B"]);
    }

    #[test]
    fn duplicate_cell_rejected() {
        let data = format!("{COMPLETE}u1,A,5\n");
        match ingest_csv(data.as_bytes(), &schema()) {
            Err(Error::DuplicateCell { row, col, line }) => {
                assert_eq!((row.as_str(), col.as_str(), line), ("u1", "A", 6));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = ingest_csv("user,thing,y\nu,a,1\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn bad_number_reports_line() {
        let err = ingest_csv("user,item,y,z\nu,a,1,2\nv,b,oops,1\n".as_bytes(), &schema()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn staircase_counts() {
        let c = counts(&staircase());
        assert_eq!(c.n_row, vec![2, 1]);
        assert_eq!(c.n_col, vec![1, 2]);
    }

    #[test]
    fn single_observation_counts() {
        let t = ObservationTable::design_only(vec![0], vec![0], 1, 1).unwrap();
        assert_eq!(counts(&t), FactorCounts { n_row: vec![1], n_col: vec![1] });
    }

    #[test]
    fn co_observation_by_enumeration() {
        let t = staircase();
        let cp = co_observation(&t, CoObservationAxis::ColumnPairs).to_dense();
        assert_eq!(cp, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]));
        let rp = co_observation(&t, CoObservationAxis::RowPairs).to_dense();
        assert_eq!(rp, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));

        let full = ObservationTable::design_only(vec![0, 0, 1, 1], vec![0, 1, 0, 1], 2, 2).unwrap();
        let cp = co_observation(&full, CoObservationAxis::ColumnPairs).to_dense();
        assert_eq!(cp, DMatrix::from_element(2, 2, 2.0));
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(ObservationTable::design_only(vec![], vec![], 0, 0).is_err());
        assert!(ObservationTable::design_only(vec![0, 0], vec![0, 0], 1, 1).is_err());
        assert!(ObservationTable::design_only(vec![0], vec![0], 2, 1).is_err());
        assert!(ObservationTable::design_only(vec![0], vec![3], 1, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = ingest_csv("user,item,y,z\nu1,A,1,0.5\nu2,A,2,-1\nu2,B,3,2.25\n".as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let back = ingest_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back.rows(), t.rows());
        assert_eq!(back.cols(), t.cols());
        assert_eq!(back.y(), t.y());
        assert_eq!(back.x(), t.x());
    }
}
