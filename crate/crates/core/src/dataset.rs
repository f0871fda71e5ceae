//! Validated study data with role bindings and CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Column names bound to each role.
#[derive(Debug, Clone, Default)]
pub struct Roles {
    pub treatment: String,
    pub outcomes: Vec<String>,
    pub covariates: Vec<String>,
    pub stratum: Option<String>,
    pub weights: Option<String>,
}

/// Stratum membership relabeled to dense indices in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    /// Dense index per unit, in 0..S.
    pub index: Vec<usize>,
    /// Original label of each dense index.
    pub labels: Vec<String>,
}

impl Strata {
    /// Build from raw labels, assigning dense indices by first appearance.
    pub fn from_labels<S: AsRef<str>>(raw: &[S]) -> Self {
        let mut map: HashMap<String, usize> = HashMap::new();
        let mut labels = Vec::new();
        let index = raw
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *map.entry(l.to_string()).or_insert_with(|| {
                    labels.push(l.to_string());
                    labels.len() - 1
                })
            })
            .collect();
        Strata { index, labels }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    /// Unit counts per dense stratum.
    pub fn sizes(&self) -> Vec<usize> {
        crate::numkernel::stratum_counts(&self.index, self.count())
    }

    /// Row indices belonging to each stratum.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count()];
        for (i, &s) in self.index.iter().enumerate() {
            out[s].push(i);
        }
        out
    }
}

/// Immutable, validated columns of one study.
#[derive(Debug, Clone)]
pub struct StudyData {
    z: DVector<f64>,
    y: DMatrix<f64>,
    x: Option<DMatrix<f64>>,
    strata: Option<Strata>,
    user_weights: Option<DVector<f64>>,
    outcome_names: Vec<String>,
    covariate_names: Vec<String>,
}

impl StudyData {
    /// Validate and assemble. `x` with zero columns is stored as `None`.
    pub fn new(
        z: DVector<f64>,
        y: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
        strata: Option<Strata>,
        user_weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        let outcome_names = (1..=y.ncols()).map(|j| format!("y{j}")).collect();
        let covariate_names = (1..=x.as_ref().map_or(0, |m| m.ncols())).map(|j| format!("x{j}")).collect();
        Self::with_names(z, y, x, strata, user_weights, outcome_names, covariate_names)
    }

    /// As [`StudyData::new`] with explicit column names.
    pub fn with_names(
        z: DVector<f64>,
        y: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
        strata: Option<Strata>,
        user_weights: Option<DVector<f64>>,
        outcome_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = z.len();
        let x = x.filter(|m| m.ncols() > 0);
        let l = y.ncols();
        let k = x.as_ref().map_or(0, |m| m.ncols());
        if l == 0 {
            return Err(Error::InvalidSpec("at least one outcome is required".into()));
        }
        if outcome_names.len() != l || covariate_names.len() != k {
            return Err(Error::DimensionMismatch("column names do not match data".into()));
        }
        if y.nrows() != n
            || x.as_ref().is_some_and(|m| m.nrows() != n)
            || strata.as_ref().is_some_and(|s| s.index.len() != n)
            || user_weights.as_ref().is_some_and(|w| w.len() != n)
        {
            return Err(Error::DimensionMismatch(format!("columns must all have {n} rows")));
        }
        let needed = l + k + 2;
        if n < needed {
            return Err(Error::TooFewRows { n, needed });
        }
        for i in 0..n {
            if !z[i].is_finite() {
                return Err(Error::NonFiniteValue { row: i + 1, col: "treatment".into() });
            }
            for j in 0..l {
                if !y[(i, j)].is_finite() {
                    return Err(Error::NonFiniteValue { row: i + 1, col: outcome_names[j].clone() });
                }
            }
            if let Some(xm) = &x {
                for j in 0..k {
                    if !xm[(i, j)].is_finite() {
                        return Err(Error::NonFiniteValue { row: i + 1, col: covariate_names[j].clone() });
                    }
                }
            }
            if let Some(w) = &user_weights {
                if !w[i].is_finite() {
                    return Err(Error::NonFiniteValue { row: i + 1, col: "weights".into() });
                }
            }
        }
        if let Some(i) = z.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryTreatment(format!("value {} at row {}", z[i], i + 1)));
        }
        let treated = z.sum();
        if treated == 0.0 {
            return Err(Error::NonBinaryTreatment("no treated units".into()));
        }
        if treated == n as f64 {
            return Err(Error::NonBinaryTreatment("no control units".into()));
        }
        if let Some(w) = &user_weights {
            crate::numkernel::check_weights(w)?;
        }
        for (j, col) in y.column_iter().enumerate() {
            if col.iter().all(|&v| v == col[0]) {
                return Err(Error::ConstantOutcome(outcome_names[j].clone()));
            }
        }
        if let Some(s) = &strata {
            let mut size = vec![0usize; s.count()];
            let mut arm = vec![0usize; s.count()];
            for (i, &g) in s.index.iter().enumerate() {
                if g >= s.count() {
                    return Err(Error::DimensionMismatch("stratum index out of range".into()));
                }
                size[g] += 1;
                arm[g] += z[i] as usize;
            }
            for g in 0..s.count() {
                if size[g] < 2 || arm[g] == 0 || arm[g] == size[g] {
                    return Err(Error::DegenerateStratum(s.labels[g].clone()));
                }
            }
        }
        Ok(StudyData { z, y, x, strata, user_weights, outcome_names, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }
    pub fn l(&self) -> usize {
        self.y.ncols()
    }
    pub fn k(&self) -> usize {
        self.x.as_ref().map_or(0, |m| m.ncols())
    }
    /// Number of strata; 1 when no stratum column is bound.
    pub fn s(&self) -> usize {
        self.strata.as_ref().map_or(1, |s| s.count())
    }
    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn x(&self) -> Option<&DMatrix<f64>> {
        self.x.as_ref()
    }
    /// Covariates, or an n x 0 matrix.
    pub fn x_or_empty(&self) -> DMatrix<f64> {
        self.x.clone().unwrap_or_else(|| DMatrix::zeros(self.n(), 0))
    }
    pub fn strata(&self) -> Option<&Strata> {
        self.strata.as_ref()
    }
    /// Dense stratum index per unit; all zero when unstratified.
    pub fn stratum_index(&self) -> Vec<usize> {
        self.strata.as_ref().map_or_else(|| vec![0; self.n()], |s| s.index.clone())
    }
    pub fn user_weights(&self) -> Option<&DVector<f64>> {
        self.user_weights.as_ref()
    }
    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// New study holding the given rows (in order), keeping role bindings.
    pub fn subset(&self, rows: &[usize]) -> Result<StudyData> {
        let z = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.z[i]));
        let y = self.y.select_rows(rows);
        let x = self.x.as_ref().map(|m| m.select_rows(rows));
        let strata = self.strata.as_ref().map(|s| {
            let raw: Vec<&str> = rows.iter().map(|&i| s.labels[s.index[i]].as_str()).collect();
            Strata::from_labels(&raw)
        });
        let w = self.user_weights.as_ref().map(|w| DVector::from_iterator(rows.len(), rows.iter().map(|&i| w[i])));
        StudyData::with_names(z, y, x, strata, w, self.outcome_names.clone(), self.covariate_names.clone())
    }

    /// Same study with outcomes replaced.
    pub fn with_outcomes(&self, y: DMatrix<f64>) -> Result<StudyData> {
        let names = (1..=y.ncols()).map(|j| format!("y{j}")).collect();
        StudyData::with_names(
            self.z.clone(),
            y,
            self.x.clone(),
            self.strata.clone(),
            self.user_weights.clone(),
            names,
            self.covariate_names.clone(),
        )
    }

    /// Same study with the stratum binding dropped.
    pub fn without_strata(&self) -> Result<StudyData> {
        StudyData::with_names(
            self.z.clone(),
            self.y.clone(),
            self.x.clone(),
            None,
            self.user_weights.clone(),
            self.outcome_names.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Same study with covariates dropped.
    pub fn without_covariates(&self) -> Result<StudyData> {
        StudyData::with_names(
            self.z.clone(),
            self.y.clone(),
            None,
            self.strata.clone(),
            self.user_weights.clone(),
            self.outcome_names.clone(),
            vec![],
        )
    }

    /// Same study with user weights attached.
    pub fn with_user_weights(&self, w: DVector<f64>) -> Result<StudyData> {
        StudyData::with_names(
            self.z.clone(),
            self.y.clone(),
            self.x.clone(),
            self.strata.clone(),
            Some(w),
            self.outcome_names.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Write as CSV with columns z, outcomes, covariates, stratum, weights.
    /// Floats use the shortest round-trip representation.
    pub fn write_csv(&self, path: &Path) -> Result<Roles> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["z".to_string()];
        header.extend(self.outcome_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        if self.strata.is_some() {
            header.push("stratum".into());
        }
        if self.user_weights.is_some() {
            header.push("weights".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![fmt_f64(self.z[i])];
            rec.extend(self.y.row(i).iter().map(|&v| fmt_f64(v)));
            if let Some(x) = &self.x {
                rec.extend(x.row(i).iter().map(|&v| fmt_f64(v)));
            }
            if let Some(s) = &self.strata {
                rec.push(s.labels[s.index[i]].clone());
            }
            if let Some(wt) = &self.user_weights {
                rec.push(fmt_f64(wt[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(Roles {
            treatment: "z".into(),
            outcomes: self.outcome_names.clone(),
            covariates: self.covariate_names.clone(),
            stratum: self.strata.as_ref().map(|_| "stratum".into()),
            weights: self.user_weights.as_ref().map(|_| "weights".into()),
        })
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Read a headered CSV and bind columns by name.
pub fn load_csv(path: &Path, roles: &Roles) -> Result<StudyData> {
    if roles.outcomes.is_empty() {
        return Err(Error::InvalidSpec("at least one outcome column is required".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let zi = find(&roles.treatment)?;
    let yi: Vec<usize> = roles.outcomes.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let xi: Vec<usize> = roles.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let si = roles.stratum.as_deref().map(find).transpose()?;
    let wi = roles.weights.as_deref().map(find).transpose()?;

    let mut z = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut s = Vec::new();
    let mut w = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonFiniteValue { row, col: header[c].clone() })
        };
        z.push(num(zi)?);
        for &c in &yi {
            y.push(num(c)?);
        }
        for &c in &xi {
            x.push(num(c)?);
        }
        if let Some(c) = si {
            let v = rec.get(c).unwrap_or("");
            if v.is_empty() {
                return Err(Error::NonFiniteValue { row, col: header[c].clone() });
            }
            s.push(v.to_string());
        }
        if let Some(c) = wi {
            w.push(num(c)?);
        }
    }
    let n = z.len();
    let ym = DMatrix::from_row_slice(n, yi.len(), &y);
    let xm = (!xi.is_empty()).then(|| DMatrix::from_row_slice(n, xi.len(), &x));
    let strata = si.map(|_| Strata::from_labels(&s));
    let weights = wi.map(|_| DVector::from_vec(w));
    StudyData::with_names(
        DVector::from_vec(z),
        ym,
        xm,
        strata,
        weights,
        roles.outcomes.clone(),
        roles.covariates.clone(),
    )
}
