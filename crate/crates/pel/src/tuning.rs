//! Tuning-parameter selection: a grid over the parameter penalty `pi` and
//! the multiplier penalty `nu`, scored by BIC-type information criteria on
//! the empirical-likelihood log-ratio.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elcore::{fit, log_star, FitResult, Mode, PelConfig};
use crate::models::{Dataset, EstimatingModel};
use crate::penalty::PenaltySpec;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error("tuning grid values must be nonnegative, finite, and sorted ascending")]
    BadGrid,
    #[error("ebic gamma must lie in [0, 1], got {0}")]
    BadGamma(f64),
    #[error(transparent)]
    El(#[from] crate::elcore::ElError),
    #[error("no usable grid cell: {0}")]
    AllCellsFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    /// BIC with the `max(1, log log p)` complexity inflation.
    Bicc,
    /// Extended BIC with mixing weight `ebic_gamma`.
    Ebic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningGrid<F> {
    /// Parameter-penalty grid, ascending.
    pub pi_values: Vec<F>,
    /// Multiplier-penalty grid, ascending.
    pub nu_values: Vec<F>,
    pub criterion: Criterion,
    pub ebic_gamma: F,
}

impl<F: Real> TuningGrid<F> {
    pub fn new(pi_values: Vec<F>, nu_values: Vec<F>, criterion: Criterion) -> Self {
        TuningGrid { pi_values, nu_values, criterion, ebic_gamma: F::of(0.5) }
    }

    /// Default grids for both penalties: `len` log-spaced points on
    /// `[0.05, 2] * sqrt(log p / n)`.
    pub fn default_for(n: usize, p: usize, len: usize, criterion: Criterion) -> Self {
        let grid = default_tau_grid(n, p, len);
        Self::new(grid.clone(), grid, criterion)
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        if self.pi_values.is_empty() || self.nu_values.is_empty() {
            return Err(TuningError::EmptyGrid);
        }
        for grid in [&self.pi_values, &self.nu_values] {
            for w in grid.windows(2) {
                if !(w[0] <= w[1]) {
                    return Err(TuningError::BadGrid);
                }
            }
            if grid.iter().any(|v| !(*v >= F::zero()) || !v.is_finite()) {
                return Err(TuningError::BadGrid);
            }
        }
        if !(self.ebic_gamma >= F::zero() && self.ebic_gamma <= F::one()) {
            return Err(TuningError::BadGamma(self.ebic_gamma.as_f64()));
        }
        Ok(())
    }
}

/// `len` log-spaced points on `[0.05, 2] * sqrt(log p / n)`, ascending.
pub fn default_tau_grid<F: Real>(n: usize, p: usize, len: usize) -> Vec<F> {
    assert!(len >= 1 && n >= 1 && p >= 2);
    let scale = ((p as f64).ln() / n as f64).sqrt();
    let (lo, hi) = (0.05f64.ln(), 2.0f64.ln());
    (0..len)
        .map(|i| {
            let frac = if len == 1 { 0.0 } else { i as f64 / (len - 1) as f64 };
            F::of(scale * (lo + frac * (hi - lo)).exp())
        })
        .collect()
}

/// One evaluated grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell<F> {
    pub pi: F,
    pub nu: F,
    pub df: usize,
    /// Twice the pseudo-log EL ratio at the fit.
    pub ell_hat: F,
    pub criterion_value: F,
    pub converged: bool,
    /// False when the cell cannot be scored: df > n, or the fit kept fewer
    /// active estimating equations than free parameters (under-identified:
    /// the selected moments cannot pin down the selected model, and
    /// downstream inference rejects such fits outright).
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TunedFit<F> {
    pub best_pi: F,
    pub best_nu: F,
    pub fit: FitResult<F>,
    pub criterion_value: F,
    pub grid_table: Vec<GridCell<F>>,
}

/// All fits over a grid, reusable for scoring under several criteria.
#[derive(Debug, Clone)]
pub struct GridFits<F> {
    /// Row-major over (pi, nu), both ascending.
    pub cells: Vec<(F, F, FitResult<F>, F)>,
}

/// `ell_hat = 2 sum_i log*(1 + lambda' g_i(theta))` at a fit.
pub fn el_logratio<F: Real>(
    model: &EstimatingModel<F>,
    data: &Dataset<F>,
    fit: &FitResult<F>,
    epsilon: F,
) -> Result<F, crate::elcore::ElError> {
    let mut g = vec![F::zero(); model.r];
    let mut sum = F::zero();
    for i in 0..data.n() {
        model.eval_g_into(data.row(i), &fit.theta_hat, &mut g)?;
        let mut t = F::one();
        for j in 0..model.r {
            t = t + fit.lambda_hat[j] * g[j];
        }
        sum = sum + log_star(t, epsilon);
    }
    Ok(F::of(2.0) * sum)
}

/// Criterion arithmetic on precomputed pieces. `None` when `df > n`.
pub fn criterion_from_parts<F: Real>(
    ell_hat: F,
    df: usize,
    n: usize,
    p: usize,
    crit: Criterion,
    ebic_gamma: F,
) -> Option<F> {
    if df > n {
        return None;
    }
    let dff = F::of_usize(df);
    let log_n = F::of_usize(n).ln();
    let log_p = F::of_usize(p).ln();
    Some(match crit {
        Criterion::Bic => ell_hat + dff * log_n,
        Criterion::Bicc => {
            let cn = log_p.ln().max(F::one());
            ell_hat + dff * cn * log_n
        }
        Criterion::Ebic => ell_hat + dff * log_n + F::of(2.0) * ebic_gamma * dff * log_p,
    })
}

/// Criterion value of a finished fit.
pub fn criterion_value<F: Real>(
    model: &EstimatingModel<F>,
    data: &Dataset<F>,
    fit: &FitResult<F>,
    cfg: &PelConfig<F>,
    crit: Criterion,
    ebic_gamma: F,
) -> Result<Option<F>, crate::elcore::ElError> {
    let ell = el_logratio(model, data, fit, cfg.epsilon)?;
    Ok(criterion_from_parts(ell, fit.theta_support.len(), data.n(), model.p, crit, ebic_gamma))
}

/// Fit every `(pi, nu)` cell, warm-starting theta along the inner `nu` loop.
pub fn tune_grid<F: Real>(
    model: &EstimatingModel<F>,
    data: &Dataset<F>,
    grid: &TuningGrid<F>,
    p1_template: &PenaltySpec<F>,
    p2_template: &PenaltySpec<F>,
    cfg: &PelConfig<F>,
    theta0: &[F],
) -> Result<GridFits<F>, TuningError> {
    grid.validate()?;
    let mut cells = Vec::with_capacity(grid.pi_values.len() * grid.nu_values.len());
    for &pi in &grid.pi_values {
        let p1 = p1_template.with_tau(pi);
        let mut warm = theta0.to_vec();
        // Walk each row from the heaviest multiplier penalty down: the
        // support settles where few equations are active, and relaxing nu
        // then admits more equations without disturbing a settled support.
        // Walking upward instead drags dense low-nu fits across the row.
        let mut row = Vec::with_capacity(grid.nu_values.len());
        for &nu in grid.nu_values.iter().rev() {
            let p2 = p2_template.with_tau(nu);
            let res = fit(model, data, &p1, &p2, cfg, &warm, Mode::Pel2)?;
            let ell = el_logratio(model, data, &res, cfg.epsilon)?;
            warm = res.theta_hat.clone();
            row.push((pi, nu, res, ell));
        }
        row.reverse();
        cells.extend(row);
    }
    Ok(GridFits { cells })
}

/// Score a fitted grid under one criterion and pick the best cell. Ties go
/// to the larger `pi`, then the larger `nu` (the sparser model).
pub fn select<F: Real>(
    model: &EstimatingModel<F>,
    data: &Dataset<F>,
    fits: &GridFits<F>,
    crit: Criterion,
    ebic_gamma: F,
) -> Result<TunedFit<F>, TuningError> {
    let n = data.n();
    let mut table = Vec::with_capacity(fits.cells.len());
    let mut best: Option<usize> = None;
    for (idx, (pi, nu, res, ell)) in fits.cells.iter().enumerate() {
        let df = res.theta_support.len();
        let value = criterion_from_parts(*ell, df, n, model.p, crit, ebic_gamma);
        let valid = value.is_some()
            && !res.lambda_support.is_empty()
            && res.lambda_support.len() >= df;
        let value = value.unwrap_or(F::infinity());
        table.push(GridCell {
            pi: *pi,
            nu: *nu,
            df,
            ell_hat: *ell,
            criterion_value: value,
            converged: res.converged,
            valid,
        });
        if !valid || !res.converged || !value.is_finite() {
            continue;
        }
        // ascending iteration plus <= makes the last tie (largest pi, nu) win
        match best {
            Some(b) if table[b].criterion_value < value => {}
            _ => best = Some(idx),
        }
    }
    let Some(b) = best else {
        let failed = table.iter().filter(|c| !c.converged).count();
        let invalid = table.iter().filter(|c| !c.valid).count();
        return Err(TuningError::AllCellsFailed(format!(
            "{} cells: {failed} non-converged, {invalid} invalid",
            table.len()
        )));
    };
    let (pi, nu, res, _) = &fits.cells[b];
    Ok(TunedFit {
        best_pi: *pi,
        best_nu: *nu,
        fit: res.clone(),
        criterion_value: table[b].criterion_value,
        grid_table: table,
    })
}

/// Grid search end to end.
pub fn tune<F: Real>(
    model: &EstimatingModel<F>,
    data: &Dataset<F>,
    grid: &TuningGrid<F>,
    p1_template: &PenaltySpec<F>,
    p2_template: &PenaltySpec<F>,
    cfg: &PelConfig<F>,
    theta0: &[F],
) -> Result<TunedFit<F>, TuningError> {
    let fits = tune_grid(model, data, grid, p1_template, p2_template, cfg, theta0)?;
    select(model, data, &fits, grid.criterion, grid.ebic_gamma)
}

/// Grid table as CSV (header included).
pub fn grid_table_csv<F: Real>(table: &[GridCell<F>]) -> String {
    let mut out = String::from("pi,nu,df,ell_hat,criterion,converged,valid\n");
    for c in table {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.pi, c.nu, c.df, c.ell_hat, c.criterion_value, c.converged, c.valid
        ));
    }
    out
}
