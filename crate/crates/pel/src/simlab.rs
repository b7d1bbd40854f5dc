//! Monte Carlo lab: the three simulation designs, a portable seeded RNG,
//! replicate metrics, and the experiment driver that aggregates them into
//! mean (standard error) summary tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elcore::{default_theta0, support_diagnostics, PelConfig};
use crate::linalg::{cholesky, cholesky_solve, Mat};
use crate::models::{DataError, Dataset, EstimatingModel};
use crate::penalty::PenaltySpec;
use crate::scalar::Real;
use crate::tuning::{select, tune_grid, Criterion, TuningGrid};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("theta0 has length {got}, design has p = {expected}")]
    Theta0Dim { got: usize, expected: usize },
    #[error("covariance parameter {rho} is outside the valid range for dimension {dim}")]
    BadCovParam { rho: f64, dim: usize },
    #[error("covariance matrix is not positive definite")]
    CovNotPd,
    #[error("experiment needs reps >= 1")]
    NoReps,
    #[error("experiment has no methods")]
    NoMethods,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    El(#[from] crate::elcore::ElError),
    #[error(transparent)]
    Tuning(#[from] crate::tuning::TuningError),
    #[error("oracle least squares is singular in replicate {rep}")]
    OracleSingular { rep: usize },
}

/// SplitMix64 (Steele, Lea, Flood 2014): state advances by the golden-gamma
/// constant and each output is a finalized mix of the state. Chosen for its
/// tiny, exactly specified algorithm so streams are reproducible across
/// languages. Normals come from Box-Muller on this stream, with the paired
/// draw cached.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "rho")]
pub enum CovKind {
    Identity,
    /// Compound symmetry: unit diagonal, constant off-diagonal.
    Cs(f64),
    /// First-order autoregressive: `rho^|k-l|`.
    Ar1(f64),
}

pub fn covariance_matrix<F: Real>(dim: usize, kind: CovKind) -> Result<Mat<F>, SimError> {
    let mut m = Mat::identity(dim);
    match kind {
        CovKind::Identity => {}
        CovKind::Cs(rho) => {
            if dim > 1 && !(rho > -1.0 / (dim as f64 - 1.0) && rho < 1.0) {
                return Err(SimError::BadCovParam { rho, dim });
            }
            for i in 0..dim {
                for j in 0..dim {
                    if i != j {
                        *m.at_mut(i, j) = F::of(rho);
                    }
                }
            }
        }
        CovKind::Ar1(rho) => {
            if !(rho.abs() < 1.0) {
                return Err(SimError::BadCovParam { rho, dim });
            }
            for i in 0..dim {
                for j in 0..dim {
                    *m.at_mut(i, j) = F::of(rho.powi((i as i32 - j as i32).abs()));
                }
            }
        }
    }
    Ok(m)
}

/// Zero-mean Gaussian sampler with the covariance root factorized once.
#[derive(Debug, Clone)]
pub struct MvnSampler<F> {
    dim: usize,
    /// `None` for the identity covariance (components drawn directly).
    chol: Option<Mat<F>>,
}

impl<F: Real> MvnSampler<F> {
    pub fn new(dim: usize, kind: CovKind) -> Result<Self, SimError> {
        let chol = match kind {
            CovKind::Identity => None,
            _ => {
                let sigma = covariance_matrix::<F>(dim, kind)?;
                Some(cholesky(&sigma).ok_or(SimError::CovNotPd)?)
            }
        };
        Ok(MvnSampler { dim, chol })
    }

    pub fn sample_into(&self, rng: &mut SplitMix64, out: &mut [F]) {
        assert_eq!(out.len(), self.dim);
        match &self.chol {
            None => {
                for v in out.iter_mut() {
                    *v = F::of(rng.next_normal());
                }
            }
            Some(l) => {
                let z: Vec<F> = (0..self.dim).map(|_| F::of(rng.next_normal())).collect();
                for i in 0..self.dim {
                    let mut acc = F::zero();
                    for j in 0..=i {
                        acc = acc + l.at(i, j) * z[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> Vec<F> {
        let mut out = vec![F::zero(); self.dim];
        self.sample_into(rng, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// Mean of a correlated normal vector.
    MeanCs,
    /// Sparse linear regression with compound-symmetric covariates.
    LinearCs,
    /// Two-repeat longitudinal regression, AR1 covariates, compound-symmetric
    /// errors, estimated through quadratic inference functions.
    RepeatedAr1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec<F> {
    pub design: Design,
    pub n: usize,
    pub p: usize,
    pub theta0: Vec<F>,
    /// CS correlation of the covariates (MeanCs, LinearCs) or AR1 decay of
    /// the covariates (RepeatedAr1).
    pub cov_param: f64,
    /// Within-subject error correlation (RepeatedAr1 only).
    pub error_rho: f64,
    pub seed: u64,
}

impl<F: Real> DgpSpec<F> {
    /// Conventional design with the standard sparse truth pattern.
    pub fn standard(design: Design, n: usize, p: usize, seed: u64) -> Self {
        let cov_param = match design {
            Design::MeanCs => 0.9,
            Design::LinearCs | Design::RepeatedAr1 => 0.5,
        };
        DgpSpec {
            design,
            n,
            p,
            theta0: default_truth(design, p),
            cov_param,
            error_rho: 0.7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.theta0.len() != self.p {
            return Err(SimError::Theta0Dim { got: self.theta0.len(), expected: self.p });
        }
        covariance_matrix::<F>(self.p, self.cov_kind())?;
        if self.design == Design::RepeatedAr1 {
            covariance_matrix::<F>(2, CovKind::Cs(self.error_rho))?;
        }
        Ok(())
    }

    fn cov_kind(&self) -> CovKind {
        match self.design {
            Design::MeanCs | Design::LinearCs => CovKind::Cs(self.cov_param),
            Design::RepeatedAr1 => CovKind::Ar1(self.cov_param),
        }
    }

    pub fn true_support(&self) -> Vec<usize> {
        (0..self.p).filter(|&k| self.theta0[k] != F::zero()).collect()
    }

    pub fn model(&self) -> Result<EstimatingModel<F>, SimError> {
        Ok(match self.design {
            Design::MeanCs => EstimatingModel::mean(self.p)?,
            Design::LinearCs => EstimatingModel::linear_regression(self.p)?,
            Design::RepeatedAr1 => EstimatingModel::qif(self.p, F::of(self.error_rho))?,
        })
    }
}

/// The sparse truth used throughout the study: `(5, 4, 0, 0, 1, 0, ...)` for
/// the mean design and `(3, 1.5, 0, 0, 2, 0, ...)` for the regression
/// designs, truncated to length `p`.
pub fn default_truth<F: Real>(design: Design, p: usize) -> Vec<F> {
    let pattern: [f64; 5] = match design {
        Design::MeanCs => [5.0, 4.0, 0.0, 0.0, 1.0],
        Design::LinearCs | Design::RepeatedAr1 => [3.0, 1.5, 0.0, 0.0, 2.0],
    };
    (0..p).map(|k| F::of(if k < 5 { pattern[k] } else { 0.0 })).collect()
}

/// Draw one dataset in the row layout its estimating model expects.
pub fn generate<F: Real>(dgp: &DgpSpec<F>, rng: &mut SplitMix64) -> Result<Dataset<F>, SimError> {
    dgp.validate()?;
    let p = dgp.p;
    let cov = MvnSampler::new(p, dgp.cov_kind())?;
    let mut rows = Vec::with_capacity(dgp.n);
    match dgp.design {
        Design::MeanCs => {
            for _ in 0..dgp.n {
                let mut x = cov.sample(rng);
                for k in 0..p {
                    x[k] = x[k] + dgp.theta0[k];
                }
                rows.push(x);
            }
        }
        Design::LinearCs => {
            for _ in 0..dgp.n {
                let z = cov.sample(rng);
                let mut y = F::of(rng.next_normal());
                for k in 0..p {
                    y = y + z[k] * dgp.theta0[k];
                }
                let mut row = Vec::with_capacity(1 + p);
                row.push(y);
                row.extend_from_slice(&z);
                rows.push(row);
            }
        }
        Design::RepeatedAr1 => {
            let err = MvnSampler::new(2, CovKind::Cs(dgp.error_rho))?;
            let mut eps = [F::zero(); 2];
            for _ in 0..dgp.n {
                let z1 = cov.sample(rng);
                let z2 = cov.sample(rng);
                err.sample_into(rng, &mut eps);
                let mut y1 = eps[0];
                let mut y2 = eps[1];
                for k in 0..p {
                    y1 = y1 + z1[k] * dgp.theta0[k];
                    y2 = y2 + z2[k] * dgp.theta0[k];
                }
                let mut row = Vec::with_capacity(2 + 2 * p);
                row.push(y1);
                row.push(y2);
                row.extend_from_slice(&z1);
                row.extend_from_slice(&z2);
                rows.push(row);
            }
        }
    }
    Ok(Dataset::from_rows(rows)?)
}

/// Quadratic estimation loss with the design's loss matrix: identity for the
/// mean and longitudinal designs, the covariate CS covariance for the linear
/// design (whose loss weights the prediction error).
pub fn model_error<F: Real>(theta_hat: &[F], theta0: &[F], dgp: &DgpSpec<F>) -> F {
    assert_eq!(theta_hat.len(), theta0.len());
    let delta: Vec<F> = theta_hat.iter().zip(theta0).map(|(&a, &b)| a - b).collect();
    let dd: F = delta.iter().map(|&d| d * d).sum();
    match dgp.design {
        Design::MeanCs | Design::RepeatedAr1 => dd,
        Design::LinearCs => {
            // CS quadratic form: (1 - rho) d'd + rho (sum d)^2
            let rho = F::of(dgp.cov_param);
            let s: F = delta.iter().copied().sum();
            (F::one() - rho) * dd + rho * s * s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pel2Bic,
    Pel2Bicc,
    Pel2Ebic,
    PelBic,
    PelBicc,
    PelEbic,
    MleOracle,
    Lasso,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Pel2Bic => "PEL2-BIC",
            Method::Pel2Bicc => "PEL2-BICC",
            Method::Pel2Ebic => "PEL2-EBIC",
            Method::PelBic => "PEL-BIC",
            Method::PelBicc => "PEL-BICC",
            Method::PelEbic => "PEL-EBIC",
            Method::MleOracle => "MLE-Oracle",
            Method::Lasso => "LASSO",
        }
    }

    fn criterion(&self) -> Option<Criterion> {
        match self {
            Method::Pel2Bic | Method::PelBic => Some(Criterion::Bic),
            Method::Pel2Bicc | Method::PelBicc => Some(Criterion::Bicc),
            Method::Pel2Ebic | Method::PelEbic => Some(Criterion::Ebic),
            _ => None,
        }
    }

    fn is_pel2(&self) -> bool {
        matches!(self, Method::Pel2Bic | Method::Pel2Bicc | Method::Pel2Ebic)
    }

    fn is_pel(&self) -> bool {
        matches!(self, Method::PelBic | Method::PelBicc | Method::PelEbic)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateMetrics<F> {
    pub n_nonzero: usize,
    /// Correctly recovered truth components; absent for oracle rows.
    pub n_true: Option<usize>,
    pub model_error: F,
    /// Selected equations; absent where no selection happens (oracle rows).
    pub n_equations: Option<usize>,
    pub converged: bool,
    /// Whether the multiplier-support diagnostics held (PEL2 rows only).
    pub prop2_clean: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec<F> {
    pub dgp: DgpSpec<F>,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// Shared (pi, nu) grid; the per-method criterion overrides
    /// `grid.criterion`.
    pub grid: TuningGrid<F>,
    /// Penalty family templates; the grid supplies the tuning parameters.
    pub p1_family: PenaltySpec<F>,
    pub p2_family: PenaltySpec<F>,
    pub cfg: PelConfig<F>,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

fn stat(values: &[f64]) -> Stat {
    if values.is_empty() {
        return Stat { mean: f64::NAN, se: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Stat { mean, se: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Stat { mean, se: (var / n).sqrt() }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub implemented: bool,
    pub used_reps: usize,
    pub failures: usize,
    pub n_nonzero: Stat,
    pub n_true: Option<Stat>,
    pub model_error: Stat,
    pub n_equations: Option<Stat>,
    pub prop2_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryTable {
    pub reps: usize,
    pub rows: Vec<MethodSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRow<F> {
    pub rep: usize,
    pub method: Method,
    /// `None` when the replicate failed for this method.
    pub metrics: Option<ReplicateMetrics<F>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutput<F> {
    pub summary: SummaryTable,
    pub replicates: Vec<ReplicateRow<F>>,
}

fn fmt_cell(s: &Stat) -> String {
    if s.mean.is_nan() {
        "NA".to_string()
    } else {
        format!("{:.3} ({:.3})", s.mean, s.se)
    }
}

impl SummaryTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("| Method | theta_nonzeros | theta_true | ME | No. EEs | failures |\n"));
        out.push_str("|---|---|---|---|---|---|\n");
        for row in &self.rows {
            if !row.implemented {
                out.push_str(&format!(
                    "| {} | not implemented | | | | |\n",
                    row.method.label()
                ));
                continue;
            }
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                row.method.label(),
                fmt_cell(&row.n_nonzero),
                row.n_true.as_ref().map(fmt_cell).unwrap_or_else(|| "NA".into()),
                fmt_cell(&row.model_error),
                row.n_equations.as_ref().map(fmt_cell).unwrap_or_else(|| "NA".into()),
                row.failures,
            ));
        }
        out.push_str(&format!("\n{} replicates per row.\n", self.reps));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,used_reps,failures,nonzero_mean,nonzero_se,true_mean,true_se,me_mean,me_se,ee_mean,ee_se,prop2_fraction\n",
        );
        let opt = |s: &Option<Stat>, f: fn(&Stat) -> f64| {
            s.as_ref().map(|v| f(v).to_string()).unwrap_or_default()
        };
        for row in &self.rows {
            if !row.implemented {
                out.push_str(&format!("{},,,,,,,,,,,\n", row.method.label()));
                continue;
            }
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.method.label(),
                row.used_reps,
                row.failures,
                row.n_nonzero.mean,
                row.n_nonzero.se,
                opt(&row.n_true, |s| s.mean),
                opt(&row.n_true, |s| s.se),
                row.model_error.mean,
                row.model_error.se,
                opt(&row.n_equations, |s| s.mean),
                opt(&row.n_equations, |s| s.se),
                row.prop2_fraction.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

pub fn replicates_csv<F: Real>(rows: &[ReplicateRow<F>]) -> String {
    let mut out =
        String::from("rep,method,n_nonzero,n_true,model_error,n_equations,converged,prop2_clean\n");
    for r in rows {
        match &r.metrics {
            None => out.push_str(&format!("{},{},failed,,,,,\n", r.rep, r.method.label())),
            Some(m) => out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.rep,
                r.method.label(),
                m.n_nonzero,
                m.n_true.map(|v| v.to_string()).unwrap_or_default(),
                m.model_error,
                m.n_equations.map(|v| v.to_string()).unwrap_or_default(),
                m.converged,
                m.prop2_clean.map(|v| v.to_string()).unwrap_or_default(),
            )),
        }
    }
    out
}

fn oracle_fit<F: Real>(
    dgp: &DgpSpec<F>,
    data: &Dataset<F>,
    rep: usize,
) -> Result<Vec<F>, SimError> {
    let support = dgp.true_support();
    let s = support.len();
    let mut theta = vec![F::zero(); dgp.p];
    if s == 0 {
        return Ok(theta);
    }
    match dgp.design {
        Design::MeanCs => {
            let nf = F::of_usize(data.n());
            for &k in &support {
                let mut acc = F::zero();
                for i in 0..data.n() {
                    acc = acc + data.row(i)[k];
                }
                theta[k] = acc / nf;
            }
        }
        Design::LinearCs | Design::RepeatedAr1 => {
            // least squares on the true support, both repeats stacked for
            // the longitudinal design
            let mut xtx = Mat::zeros(s, s);
            let mut xty = vec![F::zero(); s];
            let push = |z: &dyn Fn(usize) -> F, y: F, xtx: &mut Mat<F>, xty: &mut [F]| {
                for a in 0..s {
                    let za = z(support[a]);
                    for b in 0..s {
                        *xtx.at_mut(a, b) = xtx.at(a, b) + za * z(support[b]);
                    }
                    xty[a] = xty[a] + za * y;
                }
            };
            for i in 0..data.n() {
                let row = data.row(i);
                match dgp.design {
                    Design::LinearCs => {
                        push(&|k| row[1 + k], row[0], &mut xtx, &mut xty);
                    }
                    Design::RepeatedAr1 => {
                        let p = dgp.p;
                        push(&|k| row[2 + k], row[0], &mut xtx, &mut xty);
                        push(&|k| row[2 + p + k], row[1], &mut xtx, &mut xty);
                    }
                    Design::MeanCs => unreachable!(),
                }
            }
            let l = cholesky(&xtx).ok_or(SimError::OracleSingular { rep })?;
            let sol = cholesky_solve(&l, &xty);
            for (a, &k) in support.iter().enumerate() {
                theta[k] = sol[a];
            }
        }
    }
    Ok(theta)
}

fn metrics_from_theta<F: Real>(
    theta_hat: &[F],
    dgp: &DgpSpec<F>,
    n_equations: Option<usize>,
    n_true: bool,
    converged: bool,
    prop2_clean: Option<bool>,
) -> ReplicateMetrics<F> {
    let nz = theta_hat.iter().filter(|&&v| v != F::zero()).count();
    let n_true = if n_true {
        Some(
            dgp.true_support()
                .iter()
                .filter(|&&k| theta_hat[k] != F::zero())
                .count(),
        )
    } else {
        None
    };
    ReplicateMetrics {
        n_nonzero: nz,
        n_true,
        model_error: model_error(theta_hat, &dgp.theta0, dgp),
        n_equations,
        converged,
        prop2_clean,
    }
}

/// Run the full Monte Carlo experiment. Replicates are independent (seeded
/// from `base_seed` and the replicate index only) and run in parallel; the
/// aggregation walks replicates in index order, so results do not depend on
/// the thread count.
pub fn run_experiment<F: Real>(spec: &ExperimentSpec<F>) -> Result<ExperimentOutput<F>, SimError> {
    if spec.reps == 0 {
        return Err(SimError::NoReps);
    }
    if spec.methods.is_empty() {
        return Err(SimError::NoMethods);
    }
    spec.dgp.validate()?;
    spec.grid.validate()?;
    let model = spec.dgp.model()?;
    let need_pel2 = spec.methods.iter().any(Method::is_pel2);
    let need_pel = spec.methods.iter().any(Method::is_pel);

    let per_rep: Result<Vec<Vec<Option<ReplicateMetrics<F>>>>, SimError> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng =
                SplitMix64::new(spec.base_seed.wrapping_add((rep as u64).wrapping_mul(GOLDEN_GAMMA)));
            let data = generate(&spec.dgp, &mut rng)?;
            let theta0 = default_theta0(&model, &data)?;
            let pel2_fits = if need_pel2 {
                Some(tune_grid(
                    &model,
                    &data,
                    &spec.grid,
                    &spec.p1_family,
                    &spec.p2_family,
                    &spec.cfg,
                    &theta0,
                )?)
            } else {
                None
            };
            let pel_fits = if need_pel {
                let mut pel_grid = spec.grid.clone();
                pel_grid.nu_values = vec![F::zero()];
                Some(tune_grid(
                    &model,
                    &data,
                    &pel_grid,
                    &spec.p1_family,
                    &spec.p2_family,
                    &spec.cfg,
                    &theta0,
                )?)
            } else {
                None
            };
            let mut out = Vec::with_capacity(spec.methods.len());
            for method in &spec.methods {
                let metrics = match method {
                    Method::Lasso => None,
                    Method::MleOracle => {
                        let theta = oracle_fit(&spec.dgp, &data, rep)?;
                        Some(metrics_from_theta(&theta, &spec.dgp, None, false, true, None))
                    }
                    _ => {
                        let fits = if method.is_pel2() {
                            pel2_fits.as_ref().unwrap()
                        } else {
                            pel_fits.as_ref().unwrap()
                        };
                        let crit = method.criterion().unwrap();
                        match select(&model, &data, fits, crit, spec.grid.ebic_gamma) {
                            Err(_) => None,
                            Ok(tuned) => {
                                let (n_eq, prop2) = if method.is_pel2() {
                                    let warnings = support_diagnostics(
                                        &model,
                                        &data,
                                        &tuned.fit,
                                        tuned.best_nu,
                                    )?;
                                    (
                                        Some(tuned.fit.lambda_support.len()),
                                        Some(warnings.is_empty()),
                                    )
                                } else {
                                    // no moment selection: every equation active
                                    (Some(model.r), None)
                                };
                                Some(metrics_from_theta(
                                    &tuned.fit.theta_hat,
                                    &spec.dgp,
                                    n_eq,
                                    true,
                                    tuned.fit.converged,
                                    prop2,
                                ))
                            }
                        }
                    }
                };
                out.push(metrics);
            }
            Ok(out)
        })
        .collect();
    let per_rep = per_rep?;

    let mut replicates = Vec::with_capacity(spec.reps * spec.methods.len());
    for (rep, row) in per_rep.iter().enumerate() {
        for (mi, metrics) in row.iter().enumerate() {
            replicates.push(ReplicateRow {
                rep,
                method: spec.methods[mi],
                metrics: metrics.clone(),
            });
        }
    }

    let mut rows = Vec::with_capacity(spec.methods.len());
    for (mi, &method) in spec.methods.iter().enumerate() {
        if method == Method::Lasso {
            rows.push(MethodSummary {
                method,
                implemented: false,
                used_reps: 0,
                failures: 0,
                n_nonzero: Stat { mean: f64::NAN, se: f64::NAN },
                n_true: None,
                model_error: Stat { mean: f64::NAN, se: f64::NAN },
                n_equations: None,
                prop2_fraction: None,
            });
            continue;
        }
        let used: Vec<&ReplicateMetrics<F>> =
            per_rep.iter().filter_map(|row| row[mi].as_ref()).collect();
        let failures = spec.reps - used.len();
        let collect = |f: &dyn Fn(&ReplicateMetrics<F>) -> f64| -> Vec<f64> {
            used.iter().map(|m| f(m)).collect()
        };
        let n_true = if used.iter().all(|m| m.n_true.is_some()) && !used.is_empty() {
            Some(stat(&collect(&|m| m.n_true.unwrap() as f64)))
        } else {
            None
        };
        let n_equations = if used.iter().all(|m| m.n_equations.is_some()) && !used.is_empty() {
            Some(stat(&collect(&|m| m.n_equations.unwrap() as f64)))
        } else {
            None
        };
        let prop2: Vec<bool> = used.iter().filter_map(|m| m.prop2_clean).collect();
        rows.push(MethodSummary {
            method,
            implemented: true,
            used_reps: used.len(),
            failures,
            n_nonzero: stat(&collect(&|m| m.n_nonzero as f64)),
            n_true,
            model_error: stat(&collect(&|m| m.model_error.as_f64())),
            n_equations,
            prop2_fraction: if prop2.is_empty() {
                None
            } else {
                Some(prop2.iter().filter(|&&b| b).count() as f64 / prop2.len() as f64)
            },
        });
    }

    Ok(ExperimentOutput { summary: SummaryTable { reps: spec.reps, rows }, replicates })
}
