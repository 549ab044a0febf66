//! Discrete structural causal model over the graph `V -> S`, `V -> Y`, `S -> Y`.
//!
//! Every distribution is computed by enumerating the finite joint, so the
//! backdoor formula can be checked against the truncated factorization
//! without any shared code path.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteScm {
    /// `P(V)`.
    pub p_v: Vec<f64>,
    /// `P(S | V)`, indexed `[v][s]`.
    pub p_s_given_v: Vec<Vec<f64>>,
    /// `P(Y | S, V)`, indexed `[s][v][y]`.
    pub p_y_given_sv: Vec<Vec<Vec<f64>>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() {
        return Err(Error::Contract(format!("{what} is empty")));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Contract(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::Contract(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteScm {
    pub fn new(p_v: Vec<f64>, p_s_given_v: Vec<Vec<f64>>, p_y_given_sv: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let scm = DiscreteScm {
            p_v,
            p_s_given_v,
            p_y_given_sv,
        };
        scm.validate()?;
        Ok(scm)
    }

    pub fn n_v(&self) -> usize {
        self.p_v.len()
    }

    pub fn n_s(&self) -> usize {
        self.p_s_given_v.first().map_or(0, Vec::len)
    }

    pub fn n_y(&self) -> usize {
        self.p_y_given_sv.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_row(&self.p_v, "p_v")?;
        let (nv, ns, ny) = (self.n_v(), self.n_s(), self.n_y());
        if self.p_s_given_v.len() != nv {
            return Err(Error::dim("scm", "p_s_given_v rows", nv, self.p_s_given_v.len()));
        }
        for (v, row) in self.p_s_given_v.iter().enumerate() {
            if row.len() != ns {
                return Err(Error::dim("scm", format!("p_s_given_v[{v}]"), ns, row.len()));
            }
            check_row(row, &format!("p_s_given_v[{v}]"))?;
        }
        if self.p_y_given_sv.len() != ns {
            return Err(Error::dim("scm", "p_y_given_sv rows", ns, self.p_y_given_sv.len()));
        }
        for (s, table) in self.p_y_given_sv.iter().enumerate() {
            if table.len() != nv {
                return Err(Error::dim("scm", format!("p_y_given_sv[{s}]"), nv, table.len()));
            }
            for (v, row) in table.iter().enumerate() {
                if row.len() != ny {
                    return Err(Error::dim("scm", format!("p_y_given_sv[{s}][{v}]"), ny, row.len()));
                }
                check_row(row, &format!("p_y_given_sv[{s}][{v}]"))?;
            }
        }
        Ok(())
    }

    /// Full joint `P(v, s, y)`, indexed `[v][s][y]`.
    pub fn joint(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_v())
            .map(|v| {
                (0..self.n_s())
                    .map(|s| {
                        (0..self.n_y())
                            .map(|y| self.p_v[v] * self.p_s_given_v[v][s] * self.p_y_given_sv[s][v][y])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn check_s(&self, s: usize) -> Result<()> {
        if s >= self.n_s() {
            return Err(Error::Contract(format!("s = {s} outside alphabet of size {}", self.n_s())));
        }
        Ok(())
    }

    /// `P(Y | S = s)` by conditioning the joint.
    pub fn observational(&self, s: usize) -> Result<Vec<f64>> {
        self.check_s(s)?;
        let joint = self.joint();
        let mut out = vec![0.0; self.n_y()];
        for table in &joint {
            for (o, p) in out.iter_mut().zip(&table[s]) {
                *o += p;
            }
        }
        let p_s: f64 = out.iter().sum();
        if p_s <= 0.0 {
            return Err(Error::UndefinedConditional(format!("P(S = {s}) = 0")));
        }
        Ok(out.into_iter().map(|p| p / p_s).collect())
    }

    /// `P(Y | do(S = s))` from the mutilated model: the `V -> S` mechanism is
    /// replaced by a point mass at `s` and `Y` is marginalized from the new joint.
    pub fn interventional(&self, s: usize) -> Result<Vec<f64>> {
        self.check_s(s)?;
        let mut out = vec![0.0; self.n_y()];
        for v in 0..self.n_v() {
            for s2 in 0..self.n_s() {
                let forced = if s2 == s { 1.0 } else { 0.0 };
                for (y, o) in out.iter_mut().enumerate() {
                    *o += self.p_v[v] * forced * self.p_y_given_sv[s2][v][y];
                }
            }
        }
        Ok(out)
    }

    /// The adjustment formula `Σ_v P(Y | s, v) P(v)`, evaluated literally.
    pub fn backdoor_formula(&self, s: usize) -> Result<Vec<f64>> {
        self.check_s(s)?;
        let mut out = vec![0.0; self.n_y()];
        for (v, pv) in self.p_v.iter().enumerate() {
            for (o, py) in out.iter_mut().zip(&self.p_y_given_sv[s][v]) {
                *o += py * pv;
            }
        }
        Ok(out)
    }

    /// True when every row of `P(S | V)` is identical, i.e. `S ⟂ V`.
    pub fn s_independent_of_v(&self, tol: f64) -> bool {
        let first = &self.p_s_given_v[0];
        self.p_s_given_v
            .iter()
            .all(|row| row.iter().zip(first).all(|(a, b)| (a - b).abs() <= tol))
    }

    /// The bundled confounded example: `P(V) = (0.5, 0.5)`, `P(s1 | v0) = 0.9`,
    /// `P(s1 | v1) = 0.1`, `P(Y = 1 | s, v0) = 0.8`, `P(Y = 1 | s, v1) = 0.2`.
    /// For `s = 1`, observational gives 0.74 and interventional 0.5.
    pub fn confounded_example() -> Self {
        let y_given = |v: usize| if v == 0 { vec![0.2, 0.8] } else { vec![0.8, 0.2] };
        DiscreteScm {
            p_v: vec![0.5, 0.5],
            p_s_given_v: vec![vec![0.1, 0.9], vec![0.9, 0.1]],
            p_y_given_sv: (0..2).map(|_| (0..2).map(y_given).collect()).collect(),
        }
    }

    /// Random tables with alphabet sizes drawn from `1..=max_size`.
    pub fn random<R: Rng>(rng: &mut R, max_size: usize) -> Self {
        let nv = rng.gen_range(1..=max_size);
        let ns = rng.gen_range(1..=max_size);
        let ny = rng.gen_range(1..=max_size);
        DiscreteScm {
            p_v: random_simplex(rng, nv),
            p_s_given_v: (0..nv).map(|_| random_simplex(rng, ns)).collect(),
            p_y_given_sv: (0..ns).map(|_| (0..nv).map(|_| random_simplex(rng, ny)).collect()).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scm: DiscreteScm = serde_json::from_str(text)?;
        scm.validate()?;
        Ok(scm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|r| r / total).collect();
    // Fold the rounding residue into the largest entry so the row sums to 1.
    let residue = 1.0 - row.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
    row[imax] += residue;
    row
}

/// Side-by-side report of the three distributions for every `s`.
#[derive(Debug, Clone, Serialize)]
pub struct ScmReport {
    pub rows: Vec<ScmRow>,
    pub max_backdoor_gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScmRow {
    pub s: usize,
    pub observational: Option<Vec<f64>>,
    pub interventional: Vec<f64>,
    pub backdoor: Vec<f64>,
}

pub fn verify(scm: &DiscreteScm, tol: f64) -> Result<ScmReport> {
    let mut rows = Vec::new();
    let mut gap: f64 = 0.0;
    for s in 0..scm.n_s() {
        let observational = match scm.observational(s) {
            Ok(p) => Some(p),
            Err(Error::UndefinedConditional(_)) => None,
            Err(e) => return Err(e),
        };
        let interventional = scm.interventional(s)?;
        let backdoor = scm.backdoor_formula(s)?;
        for (a, b) in interventional.iter().zip(&backdoor) {
            gap = gap.max((a - b).abs());
        }
        rows.push(ScmRow {
            s,
            observational,
            interventional,
            backdoor,
        });
    }
    Ok(ScmReport {
        rows,
        max_backdoor_gap: gap,
        pass: gap <= tol,
    })
}
