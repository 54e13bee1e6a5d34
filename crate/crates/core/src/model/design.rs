use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::CellTable;

/// Sparse 0/1 cell-level design: an intercept, one indicator per
/// non-reference level of every variable, and optional interaction blocks
/// (every combination of non-reference levels of the listed variables).
/// The first level of each variable is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    names: Vec<String>,
    /// `(variable, level)` pairs defining each column; empty for the intercept.
    keys: Vec<Vec<(usize, usize)>>,
    offsets: Vec<usize>,
    active: Vec<usize>,
}

/// Interaction terms declared by variable name, e.g. `[["age", "pov"]]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(default)]
    pub interactions: Vec<Vec<String>>,
}

impl Design {
    pub fn main_effects(table: &CellTable) -> Self {
        Self::build(table, &[])
    }

    pub fn from_spec(table: &CellTable, spec: &DesignSpec) -> Result<Self> {
        let mut groups = Vec::with_capacity(spec.interactions.len());
        for names in &spec.interactions {
            let mut group = Vec::with_capacity(names.len());
            for name in names {
                group.push(
                    table
                        .variable_index(name)
                        .ok_or_else(|| Error::UnknownVariable(name.clone()))?,
                );
            }
            group.sort_unstable();
            group.dedup();
            if group.len() < 2 {
                return Err(Error::Config(format!(
                    "interaction {names:?} needs at least two distinct variables"
                )));
            }
            groups.push(group);
        }
        Ok(Self::build(table, &groups))
    }

    fn build(table: &CellTable, interactions: &[Vec<usize>]) -> Self {
        let vars = table.variables();
        let mut names = vec!["(Intercept)".to_string()];
        let mut keys: Vec<Vec<(usize, usize)>> = vec![vec![]];
        for (k, v) in vars.iter().enumerate() {
            for (l, label) in v.levels().iter().enumerate().skip(1) {
                names.push(format!("{}={}", v.name(), label));
                keys.push(vec![(k, l)]);
            }
        }
        for group in interactions {
            // all non-reference level combinations, lexicographic
            let dims: Vec<usize> = group.iter().map(|&k| vars[k].n_levels() - 1).collect();
            let n: usize = dims.iter().product();
            for mut idx in 0..n {
                let mut levels = vec![0; group.len()];
                for i in (0..group.len()).rev() {
                    levels[i] = idx % dims[i] + 1;
                    idx /= dims[i];
                }
                let key: Vec<(usize, usize)> =
                    group.iter().copied().zip(levels.iter().copied()).collect();
                let var_names: Vec<&str> = group.iter().map(|&k| vars[k].name()).collect();
                let labels: Vec<&str> = key
                    .iter()
                    .map(|&(k, l)| vars[k].levels()[l].as_str())
                    .collect();
                names.push(format!("{}={}", var_names.join(":"), labels.join(":")));
                keys.push(key);
            }
        }

        let mut offsets = Vec::with_capacity(table.n_cells() + 1);
        let mut active = Vec::new();
        for j in 0..table.n_cells() {
            offsets.push(active.len());
            let levels = table.cell_levels(j);
            for (c, key) in keys.iter().enumerate() {
                if key.iter().all(|&(k, l)| levels[k] == l) {
                    active.push(c);
                }
            }
        }
        offsets.push(active.len());
        Self {
            names,
            keys,
            offsets,
            active,
        }
    }

    pub fn n_coefs(&self) -> usize {
        self.names.len()
    }

    pub fn n_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Columns equal to 1 in `cell`.
    #[inline]
    pub fn active(&self, cell: usize) -> &[usize] {
        &self.active[self.offsets[cell]..self.offsets[cell + 1]]
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Column for a set of `(variable, level)` pairs; an empty set is the
    /// intercept.
    pub fn column_for(&self, key: &[(usize, usize)]) -> Option<usize> {
        let mut key = key.to_vec();
        key.sort_unstable();
        self.keys.iter().position(|k| *k == key)
    }

    /// `X coefs`.
    pub fn linear_predictor(&self, coefs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells()];
        self.linear_predictor_into(coefs, &mut out);
        out
    }

    pub fn linear_predictor_into(&self, coefs: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.active(j).iter().map(|&c| coefs[c]).sum();
        }
    }

    /// `out += X' g`.
    pub fn accumulate_transpose(&self, g: &[f64], out: &mut [f64]) {
        for (j, &gj) in g.iter().enumerate() {
            for &c in self.active(j) {
                out[c] += gj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::RakingVariable;

    #[test]
    fn main_effect_columns() {
        let t = CellTable::empty(vec![
            RakingVariable::new("a", ["x", "y", "z"]).unwrap(),
            RakingVariable::new("b", ["u", "v"]).unwrap(),
        ])
        .unwrap();
        let d = Design::main_effects(&t);
        assert_eq!(d.names(), &["(Intercept)", "a=y", "a=z", "b=v"]);
        // cell (z, v) = index 5
        assert_eq!(d.active(5), &[0, 2, 3]);
        assert_eq!(d.active(0), &[0]);
        assert_eq!(d.linear_predictor(&[1.0, 2.0, 3.0, 4.0])[5], 8.0);
    }

    #[test]
    fn interaction_columns() {
        let t = CellTable::empty(vec![
            RakingVariable::new("a", ["x", "y", "z"]).unwrap(),
            RakingVariable::new("b", ["u", "v"]).unwrap(),
        ])
        .unwrap();
        let spec = DesignSpec {
            interactions: vec![vec!["b".into(), "a".into()]],
        };
        let d = Design::from_spec(&t, &spec).unwrap();
        assert_eq!(d.n_coefs(), 6);
        assert_eq!(d.names()[4], "a:b=y:v");
        assert_eq!(d.column_for(&[(1, 1), (0, 2)]), Some(5));
        assert_eq!(d.active(5), &[0, 2, 3, 5]);
        let bad = DesignSpec {
            interactions: vec![vec!["a".into(), "q".into()]],
        };
        assert!(Design::from_spec(&t, &bad).is_err());
    }
}
