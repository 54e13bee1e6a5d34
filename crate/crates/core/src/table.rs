//! Poststratification cell tables, known margins and the loading matrix that
//! maps cell counts onto margins.
//!
//! Cells are the full cross-classification of the raking variables, ordered
//! lexicographically by level index with the last variable varying fastest.
//! Empty cells are always materialized.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A categorical raking variable with an ordered list of level labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RakingVariable {
    name: String,
    levels: Vec<String>,
}

impl RakingVariable {
    pub fn new<S: Into<String>, L: Into<String>>(
        name: S,
        levels: impl IntoIterator<Item = L>,
    ) -> Result<Self> {
        let name = name.into();
        let levels: Vec<String> = levels.into_iter().map(Into::into).collect();
        if levels.len() < 2 {
            return Err(Error::InvalidVariable {
                name,
                reason: format!("needs at least 2 levels, got {}", levels.len()),
            });
        }
        let mut seen = HashSet::new();
        for level in &levels {
            if !seen.insert(level.as_str()) {
                return Err(Error::InvalidVariable {
                    name,
                    reason: format!("duplicate level {level:?}"),
                });
            }
        }
        Ok(Self { name, levels })
    }

    /// Variable with levels labelled `1..=n`.
    pub fn numbered(name: impl Into<String>, n: usize) -> Result<Self> {
        Self::new(name, (1..=n).map(|i| i.to_string()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }
}

/// One poststratification cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub index: usize,
    pub levels: Vec<usize>,
    pub count: u64,
}

/// Full cross-tabulation of the raking variables with sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTable {
    variables: Vec<RakingVariable>,
    strides: Vec<usize>,
    counts: Vec<u64>,
    total: u64,
}

fn strides_for(variables: &[RakingVariable]) -> Vec<usize> {
    let mut strides = vec![1; variables.len()];
    for k in (0..variables.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * variables[k + 1].n_levels();
    }
    strides
}

impl CellTable {
    /// Table with the given per-cell counts (length must be `Π d_k`).
    pub fn from_counts(variables: Vec<RakingVariable>, counts: Vec<u64>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::NoVariables);
        }
        let n_cells: usize = variables.iter().map(RakingVariable::n_levels).product();
        if counts.len() != n_cells {
            return Err(Error::DimensionMismatch {
                what: "cell counts",
                expected: n_cells,
                got: counts.len(),
            });
        }
        let mut names = HashSet::new();
        for v in &variables {
            if !names.insert(v.name()) {
                return Err(Error::InvalidVariable {
                    name: v.name().to_string(),
                    reason: "duplicate variable name".into(),
                });
            }
        }
        let total = counts.iter().sum();
        let strides = strides_for(&variables);
        Ok(Self {
            variables,
            strides,
            counts,
            total,
        })
    }

    /// Table over the given variables with every cell empty.
    pub fn empty(variables: Vec<RakingVariable>) -> Result<Self> {
        let n_cells = variables.iter().map(RakingVariable::n_levels).product();
        Self::from_counts(variables, vec![0; n_cells])
    }

    /// Same cells, different counts.
    pub fn with_counts(&self, counts: Vec<u64>) -> Result<Self> {
        Self::from_counts(self.variables.clone(), counts)
    }

    pub fn variables(&self) -> &[RakingVariable] {
        &self.variables
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name() == name)
    }

    /// Number of raking variables `K`.
    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// Number of cells `J`.
    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }

    /// Total number of levels `D = Σ d_k`.
    pub fn n_levels_total(&self) -> usize {
        self.variables.iter().map(RakingVariable::n_levels).sum()
    }

    /// Sample size `n`.
    pub fn n_total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn count(&self, cell: usize) -> u64 {
        self.counts[cell]
    }

    /// Level index of variable `var` in cell `cell`.
    #[inline]
    pub fn level_of(&self, cell: usize, var: usize) -> usize {
        (cell / self.strides[var]) % self.variables[var].n_levels()
    }

    pub fn cell_levels(&self, cell: usize) -> Vec<usize> {
        (0..self.n_vars()).map(|k| self.level_of(cell, k)).collect()
    }

    pub fn cell_index(&self, levels: &[usize]) -> Result<usize> {
        if levels.len() != self.n_vars() {
            return Err(Error::DimensionMismatch {
                what: "cell levels",
                expected: self.n_vars(),
                got: levels.len(),
            });
        }
        let mut idx = 0;
        for (k, &l) in levels.iter().enumerate() {
            if l >= self.variables[k].n_levels() {
                return Err(Error::InvalidInput(format!(
                    "level index {l} out of range for {}",
                    self.variables[k].name()
                )));
            }
            idx += l * self.strides[k];
        }
        Ok(idx)
    }

    /// 0/1 indicator vector `X^(j)` of length `D`.
    pub fn indicator(&self, cell: usize) -> Vec<u8> {
        let mut x = vec![0u8; self.n_levels_total()];
        let mut offset = 0;
        for (k, v) in self.variables.iter().enumerate() {
            x[offset + self.level_of(cell, k)] = 1;
            offset += v.n_levels();
        }
        x
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.n_cells()).map(move |j| Cell {
            index: j,
            levels: self.cell_levels(j),
            count: self.counts[j],
        })
    }

    pub fn empty_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(j, _)| j)
    }

    /// Human-readable cell label such as `age=18-34,sex=F`.
    pub fn cell_label(&self, cell: usize) -> String {
        self.variables
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{}={}", v.name(), v.levels()[self.level_of(cell, k)]))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Cell index of every unit given its level labels (one label per variable, in
/// variable order).
pub fn index_units<S: AsRef<str>>(
    units: &[Vec<S>],
    variables: &[RakingVariable],
) -> Result<Vec<usize>> {
    if variables.is_empty() {
        return Err(Error::NoVariables);
    }
    let strides = strides_for(variables);
    units
        .iter()
        .enumerate()
        .map(|(row, unit)| {
            if unit.len() != variables.len() {
                return Err(Error::DimensionMismatch {
                    what: "unit record",
                    expected: variables.len(),
                    got: unit.len(),
                });
            }
            let mut idx = 0;
            for ((v, label), stride) in variables.iter().zip(unit).zip(&strides) {
                let label = label.as_ref();
                let l = v.level_index(label).ok_or_else(|| Error::UnknownLevel {
                    row,
                    variable: v.name().to_string(),
                    label: label.to_string(),
                })?;
                idx += l * stride;
            }
            Ok(idx)
        })
        .collect()
}

/// Cross-tabulates unit records into a full cell table.
pub fn build_table<S: AsRef<str>>(
    units: &[Vec<S>],
    variables: &[RakingVariable],
) -> Result<CellTable> {
    let cells = index_units(units, variables)?;
    table_from_cells(variables.to_vec(), &cells)
}

/// Builds a table by counting precomputed cell indices.
pub fn table_from_cells(variables: Vec<RakingVariable>, cells: &[usize]) -> Result<CellTable> {
    let mut table = CellTable::empty(variables)?;
    for &j in cells {
        if j >= table.counts.len() {
            return Err(Error::InvalidInput(format!("cell index {j} out of range")));
        }
        table.counts[j] += 1;
    }
    table.total = cells.len() as u64;
    Ok(table)
}

/// Known margin over one variable or a combination of variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTerm {
    /// Indices of the variables this margin cross-classifies (ascending).
    variables: Vec<usize>,
    dims: Vec<usize>,
    counts: Vec<f64>,
}

impl MarginTerm {
    pub fn variables(&self) -> &[usize] {
        &self.variables
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Position of a full level tuple within this margin.
    #[inline]
    pub fn row_of(&self, levels: &[usize]) -> usize {
        let mut idx = 0;
        for (&k, &d) in self.variables.iter().zip(&self.dims) {
            idx = idx * d + levels[k];
        }
        idx
    }

    fn row_of_cell(&self, table_strides: &[usize], all_dims: &[usize], cell: usize) -> usize {
        let mut idx = 0;
        for (&k, &d) in self.variables.iter().zip(&self.dims) {
            idx = idx * d + (cell / table_strides[k]) % all_dims[k];
        }
        idx
    }

    /// Level tuple (over this term's variables) of margin row `row`.
    pub fn levels_of_row(&self, mut row: usize) -> Vec<usize> {
        let mut levels = vec![0; self.dims.len()];
        for i in (0..self.dims.len()).rev() {
            levels[i] = row % self.dims[i];
            row /= self.dims[i];
        }
        levels
    }
}

/// The set of known margins: a list of margin terms over a fixed list of
/// variables.  The one-way case has one term per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSet {
    variables: Vec<RakingVariable>,
    terms: Vec<MarginTerm>,
    total: f64,
}

impl MarginSet {
    /// One-way margins, one vector per variable.
    pub fn one_way(variables: &[RakingVariable], margins: Vec<Vec<f64>>) -> Result<Self> {
        if margins.len() != variables.len() {
            return Err(Error::DimensionMismatch {
                what: "margin vectors",
                expected: variables.len(),
                got: margins.len(),
            });
        }
        let terms = margins
            .into_iter()
            .enumerate()
            .map(|(k, m)| (vec![k], m))
            .collect();
        Self::new(variables, terms)
    }

    /// General margins. Each term is `(variable indices, counts)` where the
    /// counts run over the lexicographic level combinations of those variables.
    pub fn new(variables: &[RakingVariable], terms: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::NoVariables);
        }
        if terms.is_empty() {
            return Err(Error::InvalidInput("no margin terms".into()));
        }
        let mut built = Vec::with_capacity(terms.len());
        for (mut vars, counts) in terms {
            if vars.is_empty() {
                return Err(Error::InvalidInput("margin term without variables".into()));
            }
            let mut sorted = vars.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != vars.len() {
                return Err(Error::InvalidInput(
                    "repeated variable in margin term".into(),
                ));
            }
            if vars != sorted {
                return Err(Error::InvalidInput(
                    "margin term variables must be listed in table order".into(),
                ));
            }
            if let Some(&bad) = vars.iter().find(|&&k| k >= variables.len()) {
                return Err(Error::InvalidInput(format!(
                    "variable index {bad} out of range"
                )));
            }
            let dims: Vec<usize> = vars.iter().map(|&k| variables[k].n_levels()).collect();
            let expected: usize = dims.iter().product();
            if counts.len() != expected {
                return Err(Error::DimensionMismatch {
                    what: "margin vector",
                    expected,
                    got: counts.len(),
                });
            }
            if let Some(bad) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "margin entries must be finite and nonnegative, got {bad}"
                )));
            }
            vars.shrink_to_fit();
            built.push(MarginTerm {
                variables: vars,
                dims,
                counts,
            });
        }
        let total = built[0].total();
        Ok(Self {
            variables: variables.to_vec(),
            terms: built,
            total,
        })
    }

    /// Margins of a known population table over the given terms.
    pub fn from_cell_counts(
        variables: &[RakingVariable],
        cell_counts: &[f64],
        terms: &[Vec<usize>],
    ) -> Result<Self> {
        let table = CellTable::empty(variables.to_vec())?;
        if cell_counts.len() != table.n_cells() {
            return Err(Error::DimensionMismatch {
                what: "cell counts",
                expected: table.n_cells(),
                got: cell_counts.len(),
            });
        }
        let mut out = Vec::with_capacity(terms.len());
        for vars in terms {
            let dims: Vec<usize> = vars.iter().map(|&k| variables[k].n_levels()).collect();
            let mut counts = vec![0.0; dims.iter().product()];
            let term = MarginTerm {
                variables: vars.clone(),
                dims,
                counts: Vec::new(),
            };
            for (j, &c) in cell_counts.iter().enumerate() {
                counts[term.row_of(&table.cell_levels(j))] += c;
            }
            out.push((vars.clone(), counts));
        }
        Self::new(variables, out)
    }

    pub fn variables(&self) -> &[RakingVariable] {
        &self.variables
    }

    pub fn terms(&self) -> &[MarginTerm] {
        &self.terms
    }

    /// Population total `N` (the total of the first margin term).
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Stacked margin vector `N_··` of length `D`.
    pub fn stacked(&self) -> Vec<f64> {
        self.terms
            .iter()
            .flat_map(|t| t.counts.iter().copied())
            .collect()
    }

    pub fn n_rows(&self) -> usize {
        self.terms.iter().map(MarginTerm::len).sum()
    }

    /// True when every term is a single variable and no variable repeats.
    pub fn is_one_way(&self) -> bool {
        let mut seen = HashSet::new();
        self.terms
            .iter()
            .all(|t| t.variables.len() == 1 && seen.insert(t.variables[0]))
    }

    /// Label for margin row `row` of term `term`, e.g. `age=18-34` or
    /// `age:pov=18-34:<50%`.
    pub fn row_label(&self, term: usize, row: usize) -> String {
        let t = &self.terms[term];
        let names: Vec<&str> = t
            .variables
            .iter()
            .map(|&k| self.variables[k].name())
            .collect();
        let levels: Vec<&str> = t
            .levels_of_row(row)
            .iter()
            .zip(&t.variables)
            .map(|(&l, &k)| self.variables[k].levels()[l].as_str())
            .collect();
        format!("{}={}", names.join(":"), levels.join(":"))
    }

    fn check_compatible(&self, table: &CellTable) -> Result<()> {
        if self.variables.as_slice() != table.variables() {
            return Err(Error::InvalidInput(
                "margin variables do not match the cell table".into(),
            ));
        }
        Ok(())
    }
}

/// Sparse `D × J` 0/1 loading matrix: column `j` has exactly one nonzero per
/// margin term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadingMatrix {
    n_rows: usize,
    n_cols: usize,
    n_terms: usize,
    /// Row indices of the nonzeros, `n_terms` per column.
    col_rows: Vec<usize>,
    term_offsets: Vec<usize>,
}

impl LoadingMatrix {
    /// Loading matrix for an arbitrary margin set.
    pub fn for_margins(table: &CellTable, margins: &MarginSet) -> Result<Self> {
        margins.check_compatible(table)?;
        Ok(Self::from_terms(table, margins.terms()))
    }

    fn from_terms(table: &CellTable, terms: &[MarginTerm]) -> Self {
        let dims: Vec<usize> = table
            .variables()
            .iter()
            .map(RakingVariable::n_levels)
            .collect();
        let strides = strides_for(table.variables());
        let mut term_offsets = Vec::with_capacity(terms.len() + 1);
        let mut offset = 0;
        for t in terms {
            term_offsets.push(offset);
            offset += t.len();
        }
        term_offsets.push(offset);
        let n_cols = table.n_cells();
        let mut col_rows = Vec::with_capacity(n_cols * terms.len());
        for j in 0..n_cols {
            for (t, term) in terms.iter().enumerate() {
                col_rows.push(term_offsets[t] + term.row_of_cell(&strides, &dims, j));
            }
        }
        Self {
            n_rows: offset,
            n_cols,
            n_terms: terms.len(),
            col_rows,
            term_offsets,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    /// Row indices with a 1 in column `cell`.
    #[inline]
    pub fn rows_of(&self, cell: usize) -> &[usize] {
        &self.col_rows[cell * self.n_terms..(cell + 1) * self.n_terms]
    }

    pub fn term_rows(&self, term: usize) -> std::ops::Range<usize> {
        self.term_offsets[term]..self.term_offsets[term + 1]
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        u8::from(self.rows_of(col).contains(&row))
    }

    /// `L v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows];
        self.apply_into(v, &mut out);
        out
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &x) in v.iter().enumerate() {
            for &r in self.rows_of(j) {
                out[r] += x;
            }
        }
    }

    /// `L' w`.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.n_rows);
        (0..self.n_cols)
            .map(|j| self.rows_of(j).iter().map(|&r| w[r]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for j in 0..self.n_cols {
            for &r in self.rows_of(j) {
                m[(r, j)] = 1.0;
            }
        }
        m
    }
}

impl fmt::Display for LoadingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.n_rows {
            let row: Vec<String> = (0..self.n_cols)
                .map(|c| self.get(r, c).to_string())
                .collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Loading matrix for the one-way margins of every variable in `table`.
pub fn build_loading(table: &CellTable) -> LoadingMatrix {
    let terms: Vec<MarginTerm> = table
        .variables()
        .iter()
        .enumerate()
        .map(|(k, v)| MarginTerm {
            variables: vec![k],
            dims: vec![v.n_levels()],
            counts: vec![0.0; v.n_levels()],
        })
        .collect();
    LoadingMatrix::from_terms(table, &terms)
}

/// Result of [`check_margin_consistency`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub total: f64,
    pub term_totals: Vec<f64>,
    /// Largest absolute disagreement between term totals, or between shared
    /// sub-margins of overlapping terms.
    pub max_deviation: f64,
    pub tolerance: f64,
    pub consistent: bool,
    pub degenerate: bool,
}

/// Checks that all margin terms agree on the population total (and, for
/// overlapping terms, on their shared sub-margins).
pub fn check_margin_consistency(margins: &MarginSet) -> MarginReport {
    let total = margins.total();
    let term_totals: Vec<f64> = margins.terms().iter().map(MarginTerm::total).collect();
    let mut max_deviation = term_totals
        .iter()
        .map(|t| (t - total).abs())
        .fold(0.0, f64::max);

    let terms = margins.terms();
    for a in 0..terms.len() {
        for b in a + 1..terms.len() {
            let shared: Vec<usize> = terms[a]
                .variables
                .iter()
                .copied()
                .filter(|k| terms[b].variables.contains(k))
                .collect();
            if shared.is_empty() {
                continue;
            }
            let ma = collapse(&terms[a], &shared);
            let mb = collapse(&terms[b], &shared);
            for (x, y) in ma.iter().zip(&mb) {
                max_deviation = max_deviation.max((x - y).abs());
            }
        }
    }

    let tolerance = 1e-8 * total;
    MarginReport {
        total,
        term_totals,
        max_deviation,
        tolerance,
        consistent: max_deviation <= tolerance,
        degenerate: total == 0.0,
    }
}

/// Sums a margin term down to a subset of its variables.
fn collapse(term: &MarginTerm, onto: &[usize]) -> Vec<f64> {
    let pos: Vec<usize> = onto
        .iter()
        .map(|k| term.variables.iter().position(|v| v == k).unwrap())
        .collect();
    let dims: Vec<usize> = pos.iter().map(|&p| term.dims[p]).collect();
    let mut out = vec![0.0; dims.iter().product()];
    for (row, &c) in term.counts.iter().enumerate() {
        let levels = term.levels_of_row(row);
        let mut idx = 0;
        for (&p, &d) in pos.iter().zip(&dims) {
            idx = idx * d + levels[p];
        }
        out[idx] += c;
    }
    out
}

/// Initial cell estimate `N̂₀`.
///
/// For margin terms over disjoint variable sets this is the product measure
/// `N · Π_t (N_t / N)`, spread evenly over variables without a margin.  For
/// overlapping terms the product form does not reproduce the margins; the
/// maximum-entropy table (IPF from a uniform start) is returned instead.
pub fn independence_init(margins: &MarginSet, table: &CellTable) -> Result<Vec<f64>> {
    margins.check_compatible(table)?;
    let total = margins.total();
    if total <= 0.0 {
        return Err(Error::ZeroTotal);
    }
    let mut covered = vec![0usize; table.n_vars()];
    for t in margins.terms() {
        for &k in &t.variables {
            covered[k] += 1;
        }
    }
    if covered.iter().any(|&c| c > 1) {
        let loading = LoadingMatrix::for_margins(table, margins)?;
        let start = vec![total / table.n_cells() as f64; table.n_cells()];
        let fit = crate::ipf::scale_to_margins(
            start,
            &loading,
            &margins.stacked(),
            &crate::ipf::IpfOptions {
                tol: 1e-12,
                max_iter: 10_000,
            },
        );
        return Ok(fit.fitted);
    }
    let uncovered: f64 = covered
        .iter()
        .zip(table.variables())
        .filter(|(&c, _)| c == 0)
        .map(|(_, v)| v.n_levels() as f64)
        .product();
    Ok((0..table.n_cells())
        .map(|j| {
            let levels = table.cell_levels(j);
            let prod: f64 = margins
                .terms()
                .iter()
                .map(|t| t.counts[t.row_of(&levels)] / total)
                .product();
            total * prod / uncovered
        })
        .collect())
}
