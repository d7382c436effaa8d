//! Benefit imputation: a least-absolute-deviations regression of reported
//! monthly benefit dollars on state-group intercepts, a post-2007 food-package
//! revision indicator, and child counts, applied to fill benefits for every
//! row (reporters and non-reporters alike).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State group of the administering agency (benefit generosity tier).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateGroup {
    Low,
    Medium,
    High,
}

impl std::fmt::Display for StateGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StateGroup::Low => "low",
            StateGroup::Medium => "medium",
            StateGroup::High => "high",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for StateGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(StateGroup::Low),
            "medium" => Ok(StateGroup::Medium),
            "high" => Ok(StateGroup::High),
            other => Err(Error::Config(format!("unknown state group `{other}`"))),
        }
    }
}

/// Regressors for one household-month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationDesign {
    pub state_group: StateGroup,
    pub post_2007: bool,
    pub kids_under_one: u32,
    pub kids_one_to_five: u32,
}

impl ImputationDesign {
    fn row(&self) -> Vec<f64> {
        let mut x = vec![0.0; COEFFICIENT_LABELS.len()];
        x[self.state_group as usize] = 1.0;
        x[3] = f64::from(self.post_2007);
        x[4] = f64::from(self.kids_under_one);
        x[5] = f64::from(self.kids_one_to_five);
        x
    }
}

pub const COEFFICIENT_LABELS: [&str; 6] =
    ["phi:low", "phi:medium", "phi:high", "post2007", "kids_u1", "kids_1to5"];

/// Response clip bounds in dollars, applied before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self { lower: 0.0, upper: 500.0 }
    }
}

impl ClipBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::Validation(format!(
                "clip lower bound {} must be below upper bound {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn clip(&self, value: f64) -> f64 {
        value.clamp(self.lower, self.upper)
    }
}

/// A fitted LAD coefficient set with the per-iteration objective trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Σ|residual| after each IRLS iteration (non-increasing).
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LadFit {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.coefficients[i])
    }

    pub fn phi(&self, group: StateGroup) -> f64 {
        self.coefficients[group as usize]
    }
}

const IRLS_EPS: f64 = 1e-6;
const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 500;

fn weighted_ls(x: &[Vec<f64>], y: &[f64], w: &[f64], labels: &[String]) -> Result<Vec<f64>> {
    let n = x.len();
    let k = x[0].len();
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(k, k);
    let mut xty = nalgebra::DVector::<f64>::zeros(k);
    for i in 0..n {
        for a in 0..k {
            xty[a] += w[i] * x[i][a] * y[i];
            for b in 0..k {
                xtx[(a, b)] += w[i] * x[i][a] * x[i][b];
            }
        }
    }
    let svd = xtx.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 || smin <= 1e-10 * smax {
        let v = svd.v_t.as_ref().expect("svd computed with v_t");
        let null_idx =
            svd.singular_values.iter().position(|&s| s <= 1e-10 * smax).unwrap_or(k - 1);
        let offenders: Vec<&str> = (0..k)
            .filter(|&j| v[(null_idx, j)].abs() > 1e-6)
            .map(|j| labels[j].as_str())
            .collect();
        return Err(Error::RankDeficient(format!("collinear columns: {}", offenders.join(", "))));
    }
    let beta = xtx.try_inverse().expect("full-rank Gram matrix inverts") * xty;
    Ok(beta.iter().copied().collect())
}

fn l1_objective(x: &[Vec<f64>], y: &[f64], beta: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let fit: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
            (yi - fit).abs()
        })
        .sum()
}

/// LAD on an explicit design matrix: minimizes Σ|y − xθ| by iteratively
/// reweighted least squares with ε-guarded weights 1/max(|r|, ε). The
/// objective trace is non-increasing; iteration stops on relative objective
/// change below tolerance.
pub fn lad_solve(x: &[Vec<f64>], y: &[f64], labels: &[String]) -> Result<LadFit> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Validation("design and response lengths differ or are empty".into()));
    }
    let k = x[0].len();
    if x.len() < k {
        return Err(Error::Validation(format!(
            "need at least {k} rows to fit {k} coefficients, got {}",
            x.len()
        )));
    }
    let mut w = vec![1.0; x.len()];
    let mut beta = weighted_ls(x, y, &w, labels)?;
    let mut objectives = vec![l1_objective(x, y, &beta)];
    let mut converged = false;
    let mut iterations = 0usize;
    for iter in 0..IRLS_MAX_ITER {
        iterations = iter + 1;
        for (wi, (xi, &yi)) in w.iter_mut().zip(x.iter().zip(y)) {
            let fit: f64 = xi.iter().zip(&beta).map(|(a, b)| a * b).sum();
            *wi = 1.0 / (yi - fit).abs().max(IRLS_EPS);
        }
        let candidate = weighted_ls(x, y, &w, labels)?;
        let objective = l1_objective(x, y, &candidate);
        let previous = *objectives.last().expect("trace is non-empty");
        if objective > previous {
            // The ε-guarded surrogate no longer descends: keep the incumbent.
            converged = true;
            break;
        }
        beta = candidate;
        objectives.push(objective);
        if (previous - objective) < IRLS_TOL * (previous.abs() + 1.0) {
            converged = true;
            break;
        }
    }
    Ok(LadFit {
        labels: labels.to_vec(),
        coefficients: beta,
        objectives,
        iterations,
        converged,
    })
}

/// Fits the benefit-imputation regression. Responses are clipped to `bounds`
/// before fitting.
pub fn lad_fit(rows: &[(ImputationDesign, f64)], bounds: ClipBounds) -> Result<LadFit> {
    bounds.validate()?;
    let x: Vec<Vec<f64>> = rows.iter().map(|(d, _)| d.row()).collect();
    let y: Vec<f64> = rows.iter().map(|(_, b)| bounds.clip(*b)).collect();
    let labels: Vec<String> = COEFFICIENT_LABELS.iter().map(|&s| s.to_string()).collect();
    lad_solve(&x, &y, &labels)
}

/// Minimum imputed benefit in dollars, so log-benefit stays defined.
pub const IMPUTATION_FLOOR: f64 = 1.0;

/// Fitted benefit for every row, floored at [`IMPUTATION_FLOOR`].
pub fn impute_benefits(designs: &[ImputationDesign], fit: &LadFit) -> Vec<f64> {
    designs
        .par_iter()
        .map(|d| {
            let value: f64 = d.row().iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
            value.max(IMPUTATION_FLOOR)
        })
        .collect()
}

/// One CSV row of the imputation interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationRow {
    pub household_id: String,
    pub period: u32,
    pub state_group: StateGroup,
    #[serde(rename = "post2007")]
    pub post_2007: u8,
    pub kids_u1: u32,
    pub kids_1to5: u32,
    /// Empty for non-reporters.
    pub benefit_observed: Option<f64>,
    /// Filled by the imputation pass.
    pub benefit_imputed: Option<f64>,
}

impl ImputationRow {
    pub fn design(&self) -> ImputationDesign {
        ImputationDesign {
            state_group: self.state_group,
            post_2007: self.post_2007 != 0,
            kids_under_one: self.kids_u1,
            kids_one_to_five: self.kids_1to5,
        }
    }
}

/// Fits on the observed subset and imputes every row in place.
pub fn impute_rows(rows: &mut [ImputationRow], bounds: ClipBounds) -> Result<LadFit> {
    let observed: Vec<(ImputationDesign, f64)> = rows
        .iter()
        .filter_map(|r| r.benefit_observed.map(|b| (r.design(), b)))
        .collect();
    if observed.is_empty() {
        return Err(Error::Validation("no rows with observed benefits to fit on".into()));
    }
    let fit = lad_fit(&observed, bounds)?;
    let designs: Vec<ImputationDesign> = rows.iter().map(ImputationRow::design).collect();
    let imputed = impute_benefits(&designs, &fit);
    for (row, value) in rows.iter_mut().zip(imputed) {
        row.benefit_imputed = Some(value);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const THETA: [f64; 6] = [90.0, 110.0, 130.0, 15.0, 40.0, 12.0];

    fn design_grid() -> Vec<ImputationDesign> {
        let mut out = Vec::new();
        for group in [StateGroup::Low, StateGroup::Medium, StateGroup::High] {
            for post in [false, true] {
                for u1 in 0..3u32 {
                    for k15 in 0..4u32 {
                        out.push(ImputationDesign {
                            state_group: group,
                            post_2007: post,
                            kids_under_one: u1,
                            kids_one_to_five: k15,
                        });
                    }
                }
            }
        }
        out
    }

    fn exact_benefit(d: &ImputationDesign) -> f64 {
        d.row().iter().zip(THETA).map(|(a, b)| a * b).sum()
    }

    fn wide_bounds() -> ClipBounds {
        ClipBounds { lower: -1e6, upper: 1e6 }
    }

    #[test]
    fn hyperplane_data_recovered_exactly() {
        let rows: Vec<(ImputationDesign, f64)> =
            design_grid().into_iter().map(|d| (d, exact_benefit(&d))).collect();
        let fit = lad_fit(&rows, wide_bounds()).unwrap();
        for (c, t) in fit.coefficients.iter().zip(THETA) {
            assert_abs_diff_eq!(c, &t, epsilon = 1e-6);
        }
        assert!(fit.objectives.last().unwrap() < &1e-6);
    }

    #[test]
    fn intercept_only_is_the_median() {
        let y = [3.0, 7.0, 8.0, 100.0, 9.0];
        let x: Vec<Vec<f64>> = y.iter().map(|_| vec![1.0]).collect();
        let fit = lad_solve(&x, &y, &["const".to_string()]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 8.0, epsilon = 1e-4);
    }

    #[test]
    fn laplace_noise_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rows = Vec::new();
        for _ in 0..40 {
            for d in design_grid() {
                // Laplace(0, b) via inverse CDF.
                let u: f64 = rng.gen_range(-0.5..0.5);
                let noise = -8.0 * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                rows.push((d, exact_benefit(&d) + noise));
            }
        }
        let fit = lad_fit(&rows, wide_bounds()).unwrap();
        // ±3 SE with SE ≈ 2b/√n per balanced cell; 1.0 is comfortably wide.
        for (c, t) in fit.coefficients.iter().zip(THETA) {
            assert_abs_diff_eq!(c, &t, epsilon = 1.0);
        }
    }

    #[test]
    fn objective_trace_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<(ImputationDesign, f64)> = design_grid()
            .into_iter()
            .map(|d| (d, exact_benefit(&d) + rng.gen_range(-30.0..30.0)))
            .collect();
        let fit = lad_fit(&rows, wide_bounds()).unwrap();
        assert!(fit.converged);
        for pair in fit.objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "objective increased: {pair:?}");
        }
    }

    #[test]
    fn response_shift_moves_only_group_intercepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<(ImputationDesign, f64)> = design_grid()
            .into_iter()
            .map(|d| (d, exact_benefit(&d) + rng.gen_range(-20.0..20.0)))
            .collect();
        let base = lad_fit(&rows, wide_bounds()).unwrap();
        let shifted: Vec<(ImputationDesign, f64)> =
            rows.iter().map(|(d, b)| (*d, b + 50.0)).collect();
        let fit = lad_fit(&shifted, wide_bounds()).unwrap();
        for group in [StateGroup::Low, StateGroup::Medium, StateGroup::High] {
            assert_abs_diff_eq!(fit.phi(group), base.phi(group) + 50.0, epsilon = 1e-3);
        }
        for label in ["post2007", "kids_u1", "kids_1to5"] {
            assert_abs_diff_eq!(
                fit.coefficient(label).unwrap(),
                base.coefficient(label).unwrap(),
                epsilon = 1e-3
            );
        }
    }

    #[test]
    fn rank_deficiency_names_columns() {
        // Everyone in the same state group: the other two intercepts are
        // all-zero columns.
        let rows: Vec<(ImputationDesign, f64)> = (0..10)
            .map(|i| {
                let d = ImputationDesign {
                    state_group: StateGroup::Low,
                    post_2007: i % 2 == 0,
                    kids_under_one: i % 3,
                    kids_one_to_five: i % 4,
                };
                (d, exact_benefit(&d))
            })
            .collect();
        match lad_fit(&rows, wide_bounds()).unwrap_err() {
            Error::RankDeficient(msg) => assert!(msg.contains("phi:")),
            other => panic!("expected rank-deficiency error, got {other}"),
        }
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let d = ImputationDesign {
            state_group: StateGroup::Low,
            post_2007: false,
            kids_under_one: 0,
            kids_one_to_five: 0,
        };
        assert!(matches!(lad_fit(&[(d, 100.0)], wide_bounds()), Err(Error::Validation(_))));
    }

    #[test]
    fn responses_are_clipped_before_fitting() {
        // One wild outlier above the cap behaves exactly like a 500 response.
        let grid = design_grid();
        let mut rows: Vec<(ImputationDesign, f64)> =
            grid.iter().map(|d| (*d, exact_benefit(d))).collect();
        rows[0].1 = 4000.0;
        let capped = {
            let mut r = rows.clone();
            r[0].1 = 500.0;
            r
        };
        let a = lad_fit(&rows, ClipBounds::default()).unwrap();
        let b = lad_fit(&capped, ClipBounds::default()).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn imputation_linearity_and_floor() {
        let rows: Vec<(ImputationDesign, f64)> =
            design_grid().into_iter().map(|d| (d, exact_benefit(&d))).collect();
        let fit = lad_fit(&rows, wide_bounds()).unwrap();
        let base = ImputationDesign {
            state_group: StateGroup::Medium,
            post_2007: false,
            kids_under_one: 1,
            kids_one_to_five: 2,
        };
        let post = ImputationDesign { post_2007: true, ..base };
        let more_kids = ImputationDesign { kids_under_one: 2, ..base };
        let out = impute_benefits(&[base, post, more_kids], &fit);
        let tau = fit.coefficient("post2007").unwrap();
        assert_abs_diff_eq!(out[1] - out[0], tau, epsilon = 1e-6);
        // γ̂ > 0 here, so more infants means a larger imputed benefit.
        assert!(fit.coefficient("kids_u1").unwrap() > 0.0);
        assert!(out[2] > out[0]);

        // A fit forced far negative still imputes at least the floor.
        let negative = LadFit {
            labels: fit.labels.clone(),
            coefficients: vec![-100.0; 6],
            objectives: vec![0.0],
            iterations: 0,
            converged: true,
        };
        let floored = impute_benefits(&[base], &negative);
        assert_abs_diff_eq!(floored[0], IMPUTATION_FLOOR, epsilon = 0.0);
    }

    #[test]
    fn impute_rows_fills_every_row() {
        let rows_src: Vec<ImputationRow> = design_grid()
            .into_iter()
            .enumerate()
            .map(|(i, d)| ImputationRow {
                household_id: format!("h{i:04}"),
                period: 1,
                state_group: d.state_group,
                post_2007: u8::from(d.post_2007),
                kids_u1: d.kids_under_one,
                kids_1to5: d.kids_one_to_five,
                benefit_observed: if i % 3 == 0 { None } else { Some(exact_benefit(&d)) },
                benefit_imputed: None,
            })
            .collect();
        let mut rows = rows_src;
        let fit = impute_rows(&mut rows, ClipBounds::default()).unwrap();
        assert!(fit.converged);
        assert!(rows.iter().all(|r| r.benefit_imputed.is_some()));
        // In-sample fitted value matches design·θ̂.
        let r = rows.iter().find(|r| r.benefit_observed.is_some()).unwrap();
        let manual: f64 =
            r.design().row().iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(r.benefit_imputed.unwrap(), manual.max(IMPUTATION_FLOOR), epsilon = 1e-12);
    }
}
