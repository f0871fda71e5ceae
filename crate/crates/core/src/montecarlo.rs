//! Seeded simulation studies: data-generating processes for every design,
//! a parallel replication engine and size / coverage / shape summaries.
//!
//! Replicate i draws from ChaCha20 keyed by SHA-256(seed || i), so results do
//! not depend on scheduling or worker count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{estimate, AnalysisSpec, Estimator};
use crate::covadj::RChoice;
use crate::dataset::{Strata, StudyData};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::inference::{CiMethod, CiSpec};
use crate::logistic::sigmoid;
use crate::numkernel::{solve_vec, sym_eigen};
use crate::wchi2::{ks_distance, WeightedChiSq};

/// Studies whose failed-replicate share exceeds this are marked failed.
pub const MAX_FAILURE_RATE: f64 = 0.01;
/// Minimum replications per study.
pub const MIN_REPS: usize = 100;
/// Attempts at drawing an assignment with both arms present.
const ASSIGNMENT_ATTEMPTS: usize = 1000;

pub use crate::report::SCHEMA_VERSION;

/// `r` in a spec file: a number or the string "opt".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RSpec {
    Value(f64),
    Word(String),
}

impl RSpec {
    fn choice(&self) -> Result<RChoice> {
        match self {
            RSpec::Value(v) => Ok(RChoice::Fixed(*v)),
            RSpec::Word(w) => w.parse(),
        }
    }
}

fn default_one() -> usize {
    1
}
fn default_p() -> Vec<f64> {
    vec![0.5]
}
fn default_alpha() -> f64 {
    0.05
}
fn default_ci() -> Vec<String> {
    vec!["normal".into(), "chi2".into(), "auto".into()]
}
fn default_true() -> bool {
    true
}
fn default_r() -> RSpec {
    RSpec::Value(0.0)
}
fn default_estimator() -> String {
    "standard".into()
}
fn default_weights() -> String {
    "estimate".into()
}

/// Data-generating process and study settings, read from TOML.
///
/// Y(0) = mu_s + B x + e with e ~ N(0, outcome_cov), x ~ N(0, covariate_cov),
/// Y(1) = Y(0) + tau. Treatment is Bernoulli(p) (cre), Bernoulli(p_s) within
/// strata of fixed size (sre-*), or Bernoulli(e(x)) with a logistic
/// propensity (obs); draws repeat until every arm is non-empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub design: Design,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    pub n: usize,
    pub l: usize,
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_one")]
    pub s: usize,
    /// Defaults to zero.
    #[serde(default)]
    pub tau: Option<Vec<f64>>,
    /// L x L; defaults to the identity.
    #[serde(default)]
    pub outcome_cov: Option<Vec<Vec<f64>>>,
    /// Stratum shares; default equal.
    #[serde(default)]
    pub stratum_probs: Option<Vec<f64>>,
    /// Additive stratum shifts mu_s; default 0, 1, ..., S - 1.
    #[serde(default)]
    pub stratum_effects: Option<Vec<f64>>,
    /// One probability, or one per stratum.
    #[serde(default = "default_p")]
    pub treatment_probs: Vec<f64>,
    /// Logistic propensity coefficients (intercept first); default zero.
    #[serde(default)]
    pub propensity_alpha: Option<Vec<f64>>,
    /// K x K; defaults to the identity.
    #[serde(default)]
    pub covariate_cov: Option<Vec<Vec<f64>>>,
    /// L x K prognostic loadings B; default zero.
    #[serde(default)]
    pub x_loading: Option<Vec<Vec<f64>>>,
    /// "estimate" or "user" (true propensity weights).
    #[serde(default = "default_weights")]
    pub weights: String,
    #[serde(default = "default_r")]
    pub r: RSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Interval methods whose coverage is tracked.
    #[serde(default = "default_ci")]
    pub ci: Vec<String>,
    /// Compute the Kolmogorov distance to the null law when tau = 0.
    #[serde(default = "default_true")]
    pub null_law: bool,
    #[serde(default)]
    pub seed: u64,
}

fn matrix(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidSpec(format!("{what} must be {r} x {c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Symmetric square root of a PSD matrix.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidSpec(format!("{what} is not symmetric")));
    }
    let eig = sym_eigen(m)?;
    let top = eig.lambdas.iter().copied().fold(0.0, f64::max);
    if eig.lambdas.iter().any(|&v| v < -1e-10 * top.max(1.0)) {
        return Err(Error::InvalidSpec(format!("{what} is not positive semi-definite")));
    }
    Ok(eig.reconstruct_with(|v| v.max(0.0).sqrt()))
}

/// Validated, matrix-form view of a spec.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    pub analysis: AnalysisSpec,
    pub tau: DVector<f64>,
    pub outcome_cov: DMatrix<f64>,
    outcome_root: DMatrix<f64>,
    pub covariate_cov: DMatrix<f64>,
    covariate_root: DMatrix<f64>,
    pub loading: DMatrix<f64>,
    pub stratum_sizes: Vec<usize>,
    pub stratum_effects: Vec<f64>,
    pub treatment_probs: Vec<f64>,
    pub propensity_alpha: DVector<f64>,
    pub ci_methods: Vec<CiMethod>,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        let (n, l, k, s) = (spec.n, spec.l, spec.k, spec.s);
        if l == 0 || s == 0 {
            return Err(Error::InvalidSpec("l and s must be positive".into()));
        }
        if n < l + k + 2 + 2 * s {
            return Err(Error::InvalidSpec(format!("n = {n} is too small for l = {l}, k = {k}, s = {s}")));
        }
        let stratified = matches!(spec.design, Design::SreReg | Design::SreStrat);
        if !stratified && s != 1 {
            return Err(Error::InvalidSpec(format!("design {} takes s = 1", spec.design.as_str())));
        }
        let estimator: Estimator = spec.estimator.parse()?;
        let weights: crate::obs::WeightSource = spec.weights.parse()?;
        let analysis = AnalysisSpec { design: spec.design, estimator, weights, r: spec.r.choice()? };
        analysis.validate()?;
        if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
            return Err(Error::InvalidSpec("alpha must lie in (0, 1)".into()));
        }

        let tau = match &spec.tau {
            Some(t) if t.len() == l => DVector::from_column_slice(t),
            Some(_) => return Err(Error::InvalidSpec(format!("tau must have {l} entries"))),
            None => DVector::zeros(l),
        };
        let outcome_cov = match &spec.outcome_cov {
            Some(m) => matrix(m, l, l, "outcome_cov")?,
            None => DMatrix::identity(l, l),
        };
        let covariate_cov = match &spec.covariate_cov {
            Some(m) => matrix(m, k, k, "covariate_cov")?,
            None => DMatrix::identity(k, k),
        };
        let loading = match &spec.x_loading {
            Some(m) => matrix(m, l, k, "x_loading")?,
            None => DMatrix::zeros(l, k),
        };
        let outcome_root = psd_sqrt(&outcome_cov, "outcome_cov")?;
        let covariate_root = psd_sqrt(&covariate_cov, "covariate_cov")?;

        let probs = match &spec.stratum_probs {
            Some(p) if p.len() == s => p.clone(),
            Some(_) => return Err(Error::InvalidSpec(format!("stratum_probs must have {s} entries"))),
            None => vec![1.0 / s as f64; s],
        };
        if probs.iter().any(|&p| !(p > 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec("stratum_probs must be positive and sum to 1".into()));
        }
        let mut stratum_sizes: Vec<usize> = probs.iter().map(|p| (p * n as f64).floor() as usize).collect();
        let mut left = n - stratum_sizes.iter().sum::<usize>();
        let mut j = 0;
        while left > 0 {
            stratum_sizes[j % s] += 1;
            left -= 1;
            j += 1;
        }
        if stratum_sizes.iter().any(|&m| m < 4) {
            return Err(Error::InvalidSpec("every stratum needs at least four units".into()));
        }
        let stratum_effects = match &spec.stratum_effects {
            Some(e) if e.len() == s => e.clone(),
            Some(_) => return Err(Error::InvalidSpec(format!("stratum_effects must have {s} entries"))),
            None => (0..s).map(|j| j as f64).collect(),
        };
        let treatment_probs = match spec.treatment_probs.len() {
            1 => vec![spec.treatment_probs[0]; s],
            m if m == s => spec.treatment_probs.clone(),
            _ => return Err(Error::InvalidSpec(format!("treatment_probs must have 1 or {s} entries"))),
        };
        if treatment_probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidSpec("treatment probabilities must lie in (0, 1)".into()));
        }
        let propensity_alpha = match &spec.propensity_alpha {
            Some(a) if a.len() == k + 1 => DVector::from_column_slice(a),
            Some(_) => return Err(Error::InvalidSpec(format!("propensity_alpha must have {} entries", k + 1))),
            None => DVector::zeros(k + 1),
        };
        if spec.design == Design::Obs && spec.propensity_alpha.is_none() && spec.treatment_probs != default_p() {
            return Err(Error::InvalidSpec("obs designs take propensity_alpha, not treatment_probs".into()));
        }
        let ci_methods = spec.ci.iter().map(|m| m.parse()).collect::<Result<Vec<CiMethod>>>()?;
        Ok(Dgp {
            spec,
            analysis,
            tau,
            outcome_cov,
            outcome_root,
            covariate_cov,
            covariate_root,
            loading,
            stratum_sizes,
            stratum_effects,
            treatment_probs,
            propensity_alpha,
            ci_methods,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DgpSpec = toml::from_str(text).map_err(|e| Error::InvalidSpec(format!("spec file: {e}")))?;
        Dgp::new(spec)
    }

    /// Independent generator for replicate `index`.
    pub fn rng(&self, index: u64) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        h.update(index.to_le_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha20Rng::from_seed(digest)
    }

    /// Draw replicate `index`.
    pub fn generate(&self, index: u64) -> Result<StudyData> {
        let mut rng = self.rng(index);
        let (n, l, k, s) = (self.spec.n, self.spec.l, self.spec.k, self.spec.s);
        let labels: Vec<usize> = (0..s).flat_map(|j| std::iter::repeat_n(j, self.stratum_sizes[j])).collect();
        let normal = |rng: &mut ChaCha20Rng, m: usize| -> DVector<f64> {
            DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)))
        };
        let mut x = DMatrix::zeros(n, k);
        let mut y0 = DMatrix::zeros(n, l);
        for i in 0..n {
            let xi = &self.covariate_root * normal(&mut rng, k);
            let ei = &self.outcome_root * normal(&mut rng, l);
            let yi = ei + &self.loading * &xi + DVector::from_element(l, self.stratum_effects[labels[i]]);
            x.set_row(i, &xi.transpose());
            y0.set_row(i, &yi.transpose());
        }
        let probs: Vec<f64> = if self.spec.design == Design::Obs {
            (0..n)
                .map(|i| {
                    let eta = self.propensity_alpha[0] + x.row(i).transpose().dot(&self.propensity_alpha.rows(1, k));
                    sigmoid(eta)
                })
                .collect()
        } else {
            labels.iter().map(|&j| self.treatment_probs[j]).collect()
        };
        let mut z = DVector::zeros(n);
        let mut ok = false;
        for _ in 0..ASSIGNMENT_ATTEMPTS {
            for i in 0..n {
                z[i] = if rng.random::<f64>() < probs[i] { 1.0 } else { 0.0 };
            }
            let mut treated = vec![0usize; s];
            for i in 0..n {
                treated[labels[i]] += z[i] as usize;
            }
            if (0..s).all(|j| treated[j] > 0 && treated[j] < self.stratum_sizes[j]) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::InvalidSpec("could not draw an assignment with both arms in every stratum".into()));
        }
        let mut y = y0;
        for i in 0..n {
            if z[i] == 1.0 {
                let row = y.row(i) + self.tau.transpose();
                y.set_row(i, &row);
            }
        }
        let strata = (s > 1 || matches!(self.spec.design, Design::SreReg | Design::SreStrat))
            .then(|| Strata::from_labels(&labels.iter().map(|j| format!("s{}", j + 1)).collect::<Vec<_>>()));
        let weights = (self.spec.design == Design::Obs)
            .then(|| DVector::from_iterator(n, (0..n).map(|i| z[i] / probs[i] + (1.0 - z[i]) / (1.0 - probs[i]))));
        StudyData::new(z, y, (k > 0).then_some(x), strata, weights)
    }

    fn pi(&self) -> Vec<f64> {
        self.stratum_sizes.iter().map(|&m| m as f64 / self.spec.n as f64).collect()
    }

    /// Population composite effect of the selected estimator.
    pub fn true_tau_c(&self) -> Result<Option<f64>> {
        let tau = &self.tau;
        if tau.iter().all(|&t| t == 0.0) {
            return Ok(Some(0.0));
        }
        let sig_e = &self.outcome_cov;
        let sig_0 = sig_e + &self.loading * &self.covariate_cov * self.loading.transpose();
        let tt = tau * tau.transpose();
        let quad = |scale: f64, phi: &DMatrix<f64>| -> Result<f64> { Ok(scale * tau.dot(&solve_vec(phi, tau)?)) };
        let pi = self.pi();
        let phi_z: f64 =
            (0..self.spec.s).map(|j| pi[j] * self.treatment_probs[j] * (1.0 - self.treatment_probs[j])).sum();
        let adjusted = self.analysis.estimator == Estimator::Adjusted;
        let base = if adjusted { sig_e.clone() } else { sig_0.clone() };
        match (self.spec.design, self.analysis.estimator) {
            (_, Estimator::InverseLogistic) => Ok(None),
            (Design::Cre | Design::SreReg, _) => Ok(Some(quad(phi_z, &(&base + &tt * phi_z))?)),
            (Design::SreStrat, _) => {
                let mut total = 0.0;
                for j in 0..self.spec.s {
                    let v = self.treatment_probs[j] * (1.0 - self.treatment_probs[j]);
                    total += pi[j] * quad(v, &(&sig_0 + &tt * v))?;
                }
                Ok(Some(total))
            }
            (Design::Obs, _) => Ok(Some(quad(0.5, &(&base * 2.0 + &tt * 0.5))?)),
        }
    }
}

/// What one replicate contributes to the summary.
#[derive(Debug, Clone)]
struct Record {
    tau_c: f64,
    wald_p: f64,
    variance: Option<f64>,
    gamma: Option<DMatrix<f64>>,
    covered: Vec<bool>,
    tau_c_r0: Option<f64>,
    r_opt: Option<f64>,
    mean_diff: DVector<f64>,
}

fn run_one(dgp: &Dgp, index: u64, truth: Option<f64>) -> Result<Record> {
    let data = dgp.generate(index)?;
    let est = estimate(&data, dgp.analysis)?;
    let mut covered = Vec::new();
    if let Some(t) = truth {
        if dgp.analysis.estimator != Estimator::InverseLogistic {
            for &m in &dgp.ci_methods {
                let ci = est.interval(&data, &CiSpec { method: m, alpha: dgp.spec.alpha, eta: None })?;
                covered.push(ci.lower <= t && t <= ci.upper);
            }
        }
    }
    let z = data.z();
    let n1 = z.sum();
    let mean_diff = data.y().tr_mul(z) / n1 - data.y().tr_mul(&z.map(|v| 1.0 - v)) / (data.n() as f64 - n1);
    Ok(Record {
        tau_c: est.tau_c,
        wald_p: est.wald.p_value,
        variance: est.variance,
        gamma: est.gamma,
        covered,
        tau_c_r0: est.details.get("tau_c_y").and_then(|v| v.as_f64()),
        r_opt: est.details.get("r_opt_hat").and_then(|v| v.as_f64()),
        mean_diff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rate {
    pub rate: f64,
    pub mc_se: f64,
    pub count: usize,
}

impl Rate {
    fn of(hits: usize, total: usize) -> Rate {
        let rate = if total == 0 { f64::NAN } else { hits as f64 / total as f64 };
        Rate { rate, mc_se: (rate * (1.0 - rate) / total as f64).sqrt(), count: total }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageEntry {
    pub method: String,
    #[serde(flatten)]
    pub rate: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsSummary {
    /// Kolmogorov distance of n * tau_c_hat from the reference law.
    pub statistic: f64,
    /// Spectrum of the replicate-averaged Gamma-hat.
    pub reference_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ROptSummary {
    pub mean_r_opt_hat: f64,
    pub var_tau_c_opt: f64,
    pub var_tau_c_r0: f64,
    /// Standard error of the variance difference (paired, delta method).
    pub var_diff_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub schema_version: &'static str,
    pub design: String,
    pub estimator: String,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub s: usize,
    pub seed: u64,
    pub replications: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// False when the failure rate exceeds the 1% budget.
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
    pub tau_c_true: Option<f64>,
    pub tau_c_mean: f64,
    /// n times the Monte Carlo variance of tau_c_hat.
    pub tau_c_var_scaled: f64,
    pub variance_hat_mean: Option<f64>,
    pub alpha: f64,
    /// Wald rejections at alpha.
    pub rejection: Rate,
    pub coverage: Vec<CoverageEntry>,
    pub ks: Option<KsSummary>,
    pub r_opt: Option<ROptSummary>,
    /// Replicate-averaged difference in group means per outcome.
    pub mean_group_difference: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Run `reps` replications and summarize them.
pub fn run_study(dgp: &Dgp, reps: usize) -> Result<SimSummary> {
    if reps < MIN_REPS {
        return Err(Error::InvalidSpec(format!("reps = {reps} is below the minimum of {MIN_REPS}")));
    }
    let truth = dgp.true_tau_c()?;
    let outcomes: Vec<Result<Record>> = (0..reps as u64).into_par_iter().map(|i| run_one(dgp, i, truth)).collect();
    let mut records = Vec::with_capacity(reps);
    let mut failures = 0;
    let mut first_failure = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => records.push(r),
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert_with(|| format!("replicate {i}: {e}"));
            }
        }
    }
    if records.len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "{failures} of {reps} replicates failed; first: {}",
            first_failure.unwrap_or_default()
        )));
    }
    let failure_rate = failures as f64 / reps as f64;
    let m = records.len();
    let n = dgp.spec.n as f64;
    let taus: Vec<f64> = records.iter().map(|r| r.tau_c).collect();
    let rejections = records.iter().filter(|r| r.wald_p < dgp.spec.alpha).count();
    let variance_hat_mean = records.iter().map(|r| r.variance).collect::<Option<Vec<f64>>>().map(|v| mean(&v));

    let coverage = if truth.is_some() && dgp.analysis.estimator != Estimator::InverseLogistic {
        dgp.ci_methods
            .iter()
            .enumerate()
            .map(|(j, meth)| CoverageEntry {
                method: meth.as_str().into(),
                rate: Rate::of(records.iter().filter(|r| r.covered[j]).count(), m),
            })
            .collect()
    } else {
        Vec::new()
    };

    let ks = if dgp.spec.null_law && dgp.tau.iter().all(|&t| t == 0.0) {
        match records.iter().map(|r| r.gamma.clone()).collect::<Option<Vec<_>>>() {
            Some(gs) => {
                let mut mean_g = gs[0].clone() * 0.0;
                for g in &gs {
                    mean_g += g;
                }
                mean_g /= gs.len() as f64;
                let law = WeightedChiSq::new(&sym_eigen(&mean_g)?.lambdas)?;
                let mut scaled: Vec<f64> = taus.iter().map(|t| t * n).collect();
                scaled.sort_by(f64::total_cmp);
                let statistic = ks_distance(&scaled, |t| law.cdf(t), scaled.len())?;
                Some(KsSummary { statistic, reference_lambdas: law.lambdas().to_vec() })
            }
            None => None,
        }
    } else {
        None
    };

    let r_opt = match records.iter().map(|r| r.r_opt.zip(r.tau_c_r0)).collect::<Option<Vec<_>>>() {
        Some(pairs) => {
            let r0: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let (ma, mb) = (mean(&taus), mean(&r0));
            let d: Vec<f64> = taus.iter().zip(&r0).map(|(a, b)| (a - ma).powi(2) - (b - mb).powi(2)).collect();
            Some(ROptSummary {
                mean_r_opt_hat: mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
                var_tau_c_opt: var(&taus),
                var_tau_c_r0: var(&r0),
                var_diff_mc_se: (var(&d) / m as f64).sqrt(),
            })
        }
        None => None,
    };

    let mut md = DVector::zeros(dgp.spec.l);
    for r in &records {
        md += &r.mean_diff;
    }
    md /= m as f64;

    Ok(SimSummary {
        schema_version: SCHEMA_VERSION,
        design: dgp.spec.design.as_str().into(),
        estimator: dgp.analysis.estimator.as_str().into(),
        n: dgp.spec.n,
        l: dgp.spec.l,
        k: dgp.spec.k,
        s: dgp.spec.s,
        seed: dgp.spec.seed,
        replications: reps,
        failures,
        failure_rate,
        passed: failure_rate <= MAX_FAILURE_RATE,
        first_failure,
        tau_c_true: truth,
        tau_c_mean: mean(&taus),
        tau_c_var_scaled: n * var(&taus),
        variance_hat_mean,
        alpha: dgp.spec.alpha,
        rejection: Rate::of(rejections, m),
        coverage,
        ks,
        r_opt,
        mean_group_difference: md.iter().copied().collect(),
    })
}
