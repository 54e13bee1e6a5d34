//! CSV input: unit-level microdata and known margins.
//!
//! Margins files have columns `variable,level,count`. A multi-way margin
//! joins its variable names and level labels with `:`, e.g.
//! `age:pov,65+:lt50,1200`. Variables and levels are ordered by first
//! appearance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::UnitOutcomes;
use crate::table::{index_units, table_from_cells, CellTable, MarginSet, RakingVariable};

/// Column holding the outcome in a microdata file.
pub const OUTCOME_COLUMN: &str = "outcome";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn csv_error(source: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv {
        path: source.to_string(),
        source: e,
    }
}

pub fn read_margins(path: &Path) -> Result<MarginSet> {
    parse_margins(open(path)?, &path.display().to_string())
}

/// Parses a margins table; `source` names the input in error messages.
pub fn parse_margins<R: Read>(reader: R, source: &str) -> Result<MarginSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error(source))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("{source}: missing column `{name}`")))
    };
    let (cv, cl, cc) = (col("variable")?, col("level")?, col("count")?);

    let mut names: Vec<String> = Vec::new();
    let mut levels: Vec<Vec<String>> = Vec::new();
    let mut terms: Vec<(Vec<usize>, Vec<(Vec<usize>, f64)>)> = Vec::new();
    let mut term_of: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error(source))?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let vars: Vec<&str> = field(cv).split(':').collect();
        let labels: Vec<&str> = field(cl).split(':').collect();
        if vars.iter().any(|v| v.is_empty()) || vars.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{source} line {line}: variable {:?} does not match level {:?}",
                field(cv),
                field(cl)
            )));
        }
        let count: f64 = field(cc).parse().map_err(|_| {
            Error::InvalidInput(format!("{source} line {line}: bad count {:?}", field(cc)))
        })?;
        let mut tuple = Vec::with_capacity(vars.len());
        let mut var_idx = Vec::with_capacity(vars.len());
        for (v, l) in vars.iter().zip(&labels) {
            let k = match names.iter().position(|n| n == v) {
                Some(k) => k,
                None => {
                    names.push(v.to_string());
                    levels.push(Vec::new());
                    names.len() - 1
                }
            };
            let lv = match levels[k].iter().position(|x| x == l) {
                Some(lv) => lv,
                None => {
                    levels[k].push(l.to_string());
                    levels[k].len() - 1
                }
            };
            var_idx.push(k);
            tuple.push(lv);
        }
        let t = *term_of.entry(field(cv).to_string()).or_insert_with(|| {
            terms.push((var_idx.clone(), Vec::new()));
            terms.len() - 1
        });
        terms[t].1.push((tuple, count));
    }
    if terms.is_empty() {
        return Err(Error::InvalidInput(format!("{source}: no margin rows")));
    }

    let variables = names
        .iter()
        .zip(&levels)
        .map(|(n, l)| RakingVariable::new(n.clone(), l.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut built = Vec::with_capacity(terms.len());
    for (vars, rows) in terms {
        let mut order: Vec<usize> = (0..vars.len()).collect();
        order.sort_by_key(|&i| vars[i]);
        let sorted: Vec<usize> = order.iter().map(|&i| vars[i]).collect();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "{source}: repeated variable in margin term"
            )));
        }
        let dims: Vec<usize> = sorted.iter().map(|&k| levels[k].len()).collect();
        let size: usize = dims.iter().product();
        let mut counts = vec![f64::NAN; size];
        for (tuple, c) in rows {
            let row = order
                .iter()
                .zip(&dims)
                .fold(0, |acc, (&i, &d)| acc * d + tuple[i]);
            if !counts[row].is_nan() {
                return Err(Error::InvalidInput(format!(
                    "{source}: duplicate margin row {}",
                    label_of(&sorted, &dims, row, &names, &levels)
                )));
            }
            counts[row] = c;
        }
        if let Some(row) = counts.iter().position(|c| c.is_nan()) {
            return Err(Error::InvalidInput(format!(
                "{source}: missing margin row {}",
                label_of(&sorted, &dims, row, &names, &levels)
            )));
        }
        built.push((sorted, counts));
    }
    MarginSet::new(&variables, built)
}

fn label_of(
    vars: &[usize],
    dims: &[usize],
    mut row: usize,
    names: &[String],
    levels: &[Vec<String>],
) -> String {
    let mut idx = vec![0; dims.len()];
    for i in (0..dims.len()).rev() {
        idx[i] = row % dims[i];
        row /= dims[i];
    }
    let v: Vec<&str> = vars.iter().map(|&k| names[k].as_str()).collect();
    let l: Vec<&str> = vars
        .iter()
        .zip(&idx)
        .map(|(&k, &i)| levels[k][i].as_str())
        .collect();
    format!("{}={}", v.join(":"), l.join(":"))
}

/// Writes margins in the format read by [`parse_margins`].
pub fn write_margins<W: Write>(margins: &MarginSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = csv_error("margins output");
    w.write_record(["variable", "level", "count"])
        .map_err(&err)?;
    let vars = margins.variables();
    for term in margins.terms() {
        let name: Vec<&str> = term.variables().iter().map(|&k| vars[k].name()).collect();
        let name = name.join(":");
        for (row, c) in term.counts().iter().enumerate() {
            let level: Vec<&str> = term
                .variables()
                .iter()
                .zip(term.levels_of_row(row))
                .map(|(&k, l)| vars[k].levels()[l].as_str())
                .collect();
            w.write_record([name.as_str(), &level.join(":"), &c.to_string()])
                .map_err(&err)?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: "margins output".into(),
        source,
    })
}

/// Sample units cross-classified by the raking variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Microdata {
    pub table: CellTable,
    pub unit_cells: Vec<usize>,
    pub outcome: Option<Vec<f64>>,
}

impl Microdata {
    pub fn outcomes(&self) -> Option<Result<UnitOutcomes>> {
        self.outcome
            .as_ref()
            .map(|y| UnitOutcomes::new(self.unit_cells.clone(), y.clone()))
    }
}

pub fn read_microdata(path: &Path, variables: &[RakingVariable]) -> Result<Microdata> {
    parse_microdata(open(path)?, variables, &path.display().to_string())
}

/// Parses one row per unit with a column per raking variable and an optional
/// `outcome` column. Other columns are rejected.
pub fn parse_microdata<R: Read>(
    reader: R,
    variables: &[RakingVariable],
    source: &str,
) -> Result<Microdata> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error(source))?.clone();
    let mut var_cols = Vec::with_capacity(variables.len());
    for v in variables {
        let k = headers.iter().position(|h| h == v.name()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "{source}: missing column for variable `{}`",
                v.name()
            ))
        })?;
        var_cols.push(k);
    }
    let y_col = headers.iter().position(|h| h == OUTCOME_COLUMN);
    if let Some(extra) = headers
        .iter()
        .find(|h| *h != OUTCOME_COLUMN && variables.iter().all(|v| v.name() != *h))
    {
        return Err(Error::InvalidInput(format!(
            "{source}: column `{extra}` is neither a margin variable nor `{OUTCOME_COLUMN}`"
        )));
    }
    let mut units: Vec<Vec<String>> = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error(source))?;
        units.push(var_cols.iter().map(|&k| rec[k].to_string()).collect());
        if let Some(k) = y_col {
            let v: f64 = rec[k].parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "{source} line {}: bad outcome {:?}",
                    i + 2,
                    &rec[k]
                ))
            })?;
            y.push(v);
        }
    }
    let unit_cells = index_units(&units, variables).map_err(|e| match e {
        Error::UnknownLevel {
            row,
            variable,
            label,
        } => Error::InvalidInput(format!(
            "{source} line {}: {label:?} is not a level of `{variable}` in the margins",
            row + 2
        )),
        other => other,
    })?;
    let table = table_from_cells(variables.to_vec(), &unit_cells)?;
    Ok(Microdata {
        table,
        unit_cells,
        outcome: y_col.map(|_| y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MARGINS: &str = "variable,level,count\n\
        age,young,60\nage,old,40\nsex,f,55\nsex,m,45\n";

    #[test]
    fn one_way_margins_round_trip() {
        let m = parse_margins(MARGINS.as_bytes(), "m").unwrap();
        assert_eq!(m.variables().len(), 2);
        assert_eq!(m.variables()[1].levels(), ["f", "m"]);
        assert_eq!(m.stacked(), vec![60.0, 40.0, 55.0, 45.0]);
        let mut buf = Vec::new();
        write_margins(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), MARGINS);
    }

    #[test]
    fn two_way_terms_are_reordered_to_table_order() {
        let text =
            "variable,level,count\na,x,3\na,y,7\nb:a,u:x,1\nb:a,v:x,2\nb:a,u:y,3\nb:a,v:y,4\n";
        let m = parse_margins(text.as_bytes(), "m").unwrap();
        let t = &m.terms()[1];
        assert_eq!(t.variables(), [0, 1]);
        // rows (x,u) (x,v) (y,u) (y,v)
        assert_eq!(t.counts(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn incomplete_or_duplicate_rows_are_rejected() {
        let missing = "variable,level,count\na,x,3\na,y,7\na:b,x:u,1\na:b,y:v,2\nb,u,5\nb,v,5\n";
        let e = parse_margins(missing.as_bytes(), "m")
            .unwrap_err()
            .to_string();
        assert!(e.contains("missing margin row a:b=x:v"), "{e}");
        let dup = "variable,level,count\na,x,3\na,x,7\na,y,1\n";
        assert!(parse_margins(dup.as_bytes(), "m").is_err());
    }

    #[test]
    fn microdata_with_outcome() {
        let m = parse_margins(MARGINS.as_bytes(), "m").unwrap();
        let data = "sex,age,outcome\nf,young,1.5\nm,old,2\nf,young,0\n";
        let d = parse_microdata(data.as_bytes(), m.variables(), "d").unwrap();
        assert_eq!(d.table.counts(), [2, 0, 0, 1]);
        assert_eq!(d.unit_cells, [0, 3, 0]);
        assert_eq!(d.outcome.unwrap(), [1.5, 2.0, 0.0]);
    }

    #[test]
    fn microdata_errors_name_the_source() {
        let m = parse_margins(MARGINS.as_bytes(), "m").unwrap();
        let e = parse_microdata("age,sex\nmid,f\n".as_bytes(), m.variables(), "d.csv").unwrap_err();
        assert!(e.to_string().contains("d.csv line 2"), "{e}");
        let e = parse_microdata("age\nyoung\n".as_bytes(), m.variables(), "d.csv").unwrap_err();
        assert!(e.to_string().contains("`sex`"), "{e}");
    }
}
