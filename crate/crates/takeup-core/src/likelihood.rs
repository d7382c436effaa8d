//! Sequence likelihoods conditional on the household random effect, their
//! Gauss–Hermite marginalization, the panel maximum-likelihood fitter, and
//! the two-step preliminary estimator.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    choice_utility, hassle_indicator, transition_prob, Covariates, CovariateSpec, HouseholdHistory,
    PanelDataset, ParameterSet,
};
use crate::optimize::{self, OptimOptions};
use crate::quadrature::QuadratureRule;
use crate::stats::{normal_cdf, normal_quantile};

/// Fitting controls for [`fit_mle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub quadrature_order: usize,
    pub max_iterations: usize,
    /// Relative log-likelihood improvement below which the fit is converged.
    pub loglik_tolerance: f64,
    /// Relative step for numerical gradients.
    pub gradient_step: f64,
    pub start: Option<ParameterSet>,
    /// Skip the standard-error pass (useful for repeated refits).
    #[serde(default)]
    pub skip_standard_errors: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            quadrature_order: 30,
            max_iterations: 300,
            loglik_tolerance: 1e-8,
            gradient_step: 1e-5,
            start: None,
            skip_standard_errors: false,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.loglik_tolerance <= 0.0 || self.gradient_step <= 0.0 {
            return Err(Error::Config("fit tolerances must be strictly positive".into()));
        }
        if self.quadrature_order < 1 {
            return Err(Error::Config("quadrature order must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of [`fit_mle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ParameterSet,
    pub loglik: f64,
    /// Aligned with [`ParameterSet::to_flat`]; NaN when the Hessian pass
    /// failed (see `warnings`).
    pub standard_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub hessian_condition: f64,
    pub warnings: Vec<String>,
}

/// Likelihood of one household's full decision sequence conditional on the
/// random effect: the product of per-period transition probabilities with
/// D₀ = 0.
pub fn conditional_sequence_likelihood(
    spec: &CovariateSpec,
    params: &ParameterSet,
    h: &HouseholdHistory,
    q: f64,
) -> Result<f64> {
    if h.observations.is_empty() {
        return Err(Error::Validation(format!("household `{}` has no observations", h.id)));
    }
    let mut product = 1.0;
    for (t, obs) in h.observations.iter().enumerate() {
        let d_prev = h.previous_decision(t);
        product *= transition_prob(
            spec,
            params,
            &obs.covariates,
            d_prev,
            obs.recert_required,
            obs.decision,
            q,
        )?;
    }
    Ok(product)
}

/// E_Q[Φ(c + σQ)] = Φ(c/√(1+σ²)) — the normal-mixture identity used to
/// validate the quadrature.
pub fn closed_form_marginal_attention(c: f64, sigma: f64) -> f64 {
    normal_cdf(c / (1.0 + sigma * sigma).sqrt())
}

/// Marginal sequence likelihood: quadrature of the conditional likelihood
/// over the standard normal random-effect distribution, accumulated in log
/// space under a max shift.
pub fn marginal_sequence_likelihood(
    spec: &CovariateSpec,
    params: &ParameterSet,
    h: &HouseholdHistory,
    rule: &QuadratureRule,
) -> Result<f64> {
    let compiled = CompiledHousehold::compile(spec, h)?;
    Ok(compiled.log_marginal(spec, params, rule)?.exp())
}

/// A household history pre-compiled for fast repeated likelihood evaluation.
///
/// Periods with identical covariates, hassle state, lagged decision, and
/// decision collapse into one tuple with a multiplicity; the per-node work is
/// then proportional to the number of distinct tuples.
#[derive(Debug, Clone)]
struct CompiledTuple {
    x_attention: Vec<f64>,
    /// Benefit and usage covariates, concatenated in spec order.
    x_choice: Vec<f64>,
    x_hassle: Vec<f64>,
    d_prev: bool,
    s: bool,
    d: bool,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct CompiledHousehold {
    id: String,
    tuples: Vec<CompiledTuple>,
}

impl CompiledHousehold {
    fn compile(spec: &CovariateSpec, h: &HouseholdHistory) -> Result<Self> {
        if h.observations.is_empty() {
            return Err(Error::Validation(format!("household `{}` has no observations", h.id)));
        }
        type Key = (Vec<u64>, Vec<u64>, Vec<u64>, bool, bool, bool);
        let mut index: HashMap<Key, usize> = HashMap::new();
        let mut tuples: Vec<CompiledTuple> = Vec::new();
        for (t, obs) in h.observations.iter().enumerate() {
            let d_prev = h.previous_decision(t);
            let s = hassle_indicator(d_prev, obs.recert_required);
            let x_attention = obs.covariates.vector(&spec.names_attention)?;
            let mut x_choice = obs.covariates.vector(&spec.names_benefit)?;
            x_choice.extend(obs.covariates.vector(&spec.names_usage)?);
            let x_hassle = obs.covariates.vector(&spec.names_hassle)?;
            let key = (
                x_attention.iter().map(|v| v.to_bits()).collect(),
                x_choice.iter().map(|v| v.to_bits()).collect(),
                x_hassle.iter().map(|v| v.to_bits()).collect(),
                d_prev,
                s,
                obs.decision,
            );
            match index.get(&key) {
                Some(&i) => tuples[i].count += 1,
                None => {
                    index.insert(key, tuples.len());
                    tuples.push(CompiledTuple {
                        x_attention,
                        x_choice,
                        x_hassle,
                        d_prev,
                        s,
                        d: obs.decision,
                        count: 1,
                    });
                }
            }
        }
        Ok(Self { id: h.id.clone(), tuples })
    }

    /// log ∫ conditional dΦ(q) via log-sum-exp over quadrature nodes.
    fn log_marginal(
        &self,
        spec: &CovariateSpec,
        params: &ParameterSet,
        rule: &QuadratureRule,
    ) -> Result<f64> {
        params.validate_against(spec)?;
        let sigma1 = params.sigma1();
        let sigma2 = params.sigma2();
        // Linear indices are node-independent; precompute once per call.
        let lin: Vec<(f64, f64)> = self
            .tuples
            .iter()
            .map(|t| {
                let a = dot(&params.gamma, &t.x_attention);
                let mut c = 0.0;
                let nb = params.beta_benefit.len();
                c += dot(&params.beta_benefit, &t.x_choice[..nb]);
                c += dot(&params.beta_usage, &t.x_choice[nb..]);
                if t.s {
                    c += dot(&params.beta_hassle, &t.x_hassle);
                }
                (a, c)
            })
            .collect();

        let mut max_term = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(rule.order());
        for (&q, &w) in rule.nodes().iter().zip(rule.weights()) {
            let mut log_cond = 0.0;
            for (tuple, &(a_lin, c_lin)) in self.tuples.iter().zip(&lin) {
                let pa = if tuple.d_prev { 1.0 } else { normal_cdf(a_lin + sigma1 * q) };
                let pc = normal_cdf(c_lin + sigma2 * q);
                let p = pa * pc;
                let factor = if tuple.d { p } else { 1.0 - p };
                log_cond += f64::from(tuple.count) * factor.ln();
            }
            let term = w.ln() + log_cond;
            if term > max_term {
                max_term = term;
            }
            terms.push(term);
        }
        if !max_term.is_finite() {
            return Err(Error::Underflow { household: self.id.clone(), value: 0.0 });
        }
        let total: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
        let log_marginal = max_term + total.ln();
        if !log_marginal.is_finite() {
            return Err(Error::Underflow { household: self.id.clone(), value: log_marginal.exp() });
        }
        Ok(log_marginal)
    }
}

/// A panel pre-compiled for the optimizer's inner loop.
#[derive(Debug, Clone)]
pub struct CompiledPanel {
    spec: CovariateSpec,
    households: Vec<CompiledHousehold>,
}

impl CompiledPanel {
    pub fn compile(data: &PanelDataset) -> Result<Self> {
        let households = data
            .households
            .iter()
            .map(|h| CompiledHousehold::compile(&data.spec, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: data.spec.clone(), households })
    }

    /// Sum of per-household log marginals. Households are evaluated in
    /// parallel but summed in panel order, so the result does not depend on
    /// the thread count.
    pub fn loglik(&self, params: &ParameterSet, rule: &QuadratureRule) -> Result<f64> {
        let per_household: Vec<f64> = self
            .households
            .par_iter()
            .map(|h| h.log_marginal(&self.spec, params, rule))
            .collect::<Result<Vec<_>>>()?;
        Ok(per_household.iter().sum())
    }
}

/// Panel log-likelihood: Σ_households log marginal sequence likelihood.
pub fn panel_loglik(params: &ParameterSet, data: &PanelDataset, rule: &QuadratureRule) -> Result<f64> {
    if data.households.is_empty() {
        return Err(Error::Validation("panel has no households".into()));
    }
    CompiledPanel::compile(data)?.loglik(params, rule)
}

fn count_transitions(data: &PanelDataset) -> (usize, usize) {
    let mut start = 0usize;
    let mut stay = 0usize;
    for h in &data.households {
        for (t, obs) in h.observations.iter().enumerate() {
            if obs.decision {
                if h.previous_decision(t) {
                    stay += 1;
                } else {
                    start += 1;
                }
            }
        }
    }
    (start, stay)
}

/// Default starting point: choice coefficients from the preliminary two-step
/// fit, attention intercept at the probit of the raw start rate, zero slopes,
/// unit random-effect scales.
fn default_start(data: &PanelDataset) -> Result<ParameterSet> {
    let prelim = fit_preliminary(data)?;
    let (mut starts, mut at_risk) = (0usize, 0usize);
    for h in &data.households {
        for (t, obs) in h.observations.iter().enumerate() {
            if !h.previous_decision(t) {
                at_risk += 1;
                if obs.decision {
                    starts += 1;
                }
            }
        }
    }
    let rate = if at_risk == 0 {
        0.5
    } else {
        (starts as f64 / at_risk as f64).clamp(1e-4, 1.0 - 1e-4)
    };
    let mut gamma = vec![0.0; data.spec.names_attention.len()];
    gamma[0] = normal_quantile(rate);
    Ok(ParameterSet {
        gamma,
        beta_benefit: prelim.beta_benefit,
        beta_hassle: prelim.beta_hassle,
        beta_usage: prelim.beta_usage,
        log_sigma1: 0.0,
        log_sigma2: 0.0,
    })
}

/// Maximum-likelihood fit by quasi-Newton ascent over (γ, β, log σ₁, log σ₂).
pub fn fit_mle(data: &PanelDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if data.households.is_empty() {
        return Err(Error::Validation("panel has no households".into()));
    }
    data.validate()?;

    let mut warnings = Vec::new();
    let (starts, stays) = count_transitions(data);
    if starts == 0 {
        warnings.push("no 0→1 transitions observed; attention stage is weakly identified".into());
    }
    if stays == 0 {
        warnings.push("no 1→1 transitions observed; choice stage is weakly identified".into());
    }

    let start = match &config.start {
        Some(p) => {
            p.validate_against(&data.spec)?;
            p.clone()
        }
        None => default_start(data)?,
    };

    let rule = QuadratureRule::gauss_hermite(config.quadrature_order)?;
    let compiled = CompiledPanel::compile(data)?;
    let objective = |flat: &[f64]| -> Result<f64> {
        let params = ParameterSet::from_flat(&data.spec, flat)?;
        compiled.loglik(&params, &rule)
    };
    let opts = OptimOptions {
        max_iterations: config.max_iterations,
        tolerance: config.loglik_tolerance,
        gradient_step: config.gradient_step,
    };
    let outcome = optimize::maximize(&objective, &start.to_flat(), &opts)?;
    if !outcome.converged {
        warnings.push(format!(
            "iteration cap {} reached before the relative tolerance {:.1e}",
            config.max_iterations, config.loglik_tolerance
        ));
    }
    let params = ParameterSet::from_flat(&data.spec, &outcome.x)?;

    let n = outcome.x.len();
    let (standard_errors, hessian_condition) = if config.skip_standard_errors {
        (vec![f64::NAN; n], f64::NAN)
    } else {
        match standard_errors_with_condition(&params, &compiled, &rule) {
            Ok(pair) => pair,
            Err(e) => {
                warnings.push(format!("standard errors unavailable: {e}"));
                (vec![f64::NAN; n], f64::NAN)
            }
        }
    };

    Ok(FitResult {
        params,
        loglik: outcome.value,
        standard_errors,
        converged: outcome.converged,
        iterations: outcome.iterations,
        hessian_condition,
        warnings,
    })
}

fn standard_errors_with_condition(
    params: &ParameterSet,
    compiled: &CompiledPanel,
    rule: &QuadratureRule,
) -> Result<(Vec<f64>, f64)> {
    let flat = params.to_flat();
    let objective =
        |x: &[f64]| -> Result<f64> { compiled.loglik(&ParameterSet::from_flat(&compiled.spec, x)?, rule) };
    let hess = optimize::numerical_hessian(&objective, &flat, 1e-3)?;
    let n = flat.len();
    // Information matrix = −Hessian of the log-likelihood.
    let info = DMatrix::from_fn(n, n, |i, j| -hess[i][j]);
    let eigen = info.clone().symmetric_eigen();
    let min_eig = eigen.eigenvalues.min();
    let max_eig = eigen.eigenvalues.max();
    if max_eig <= 0.0 || min_eig < -1e-4 * max_eig {
        // Report the offending eigenvalue of the Hessian itself.
        return Err(Error::HessianNotNegativeDefinite { eigenvalue: -min_eig });
    }
    // Exactly collinear designs leave flat likelihood directions whose
    // finite-difference curvature is sign-noise around zero. Floor those
    // eigenvalues so unidentified directions get large (honest) standard
    // errors; the indefiniteness error above is reserved for curvature that
    // is negative beyond finite-difference noise.
    let floor = 1e-7 * max_eig;
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|k| {
                    let v = eigen.eigenvectors[(i, k)];
                    v * v / eigen.eigenvalues[k].max(floor)
                })
                .sum::<f64>()
        })
        .collect();
    let ses = inv_diag.iter().map(|&v| v.sqrt()).collect();
    Ok((ses, max_eig / min_eig.max(floor)))
}

/// Standard errors at a point: square roots of the diagonal of the inverse
/// negative numerical Hessian of [`panel_loglik`].
pub fn standard_errors(
    params: &ParameterSet,
    data: &PanelDataset,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    let compiled = CompiledPanel::compile(data)?;
    Ok(standard_errors_with_condition(params, &compiled, rule)?.0)
}

/// One attention-probability cell of the preliminary estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionCell {
    pub covariates: Covariates,
    /// Empirical start frequency P̂(D=1 | d_prev=0, x).
    pub start_rate: f64,
    /// Estimated sign-up choice probability Ĥ at the cell's covariates.
    pub choice_prob: f64,
    /// start_rate / choice_prob, clipped into (0, 1].
    pub attention_prob: f64,
    pub clipped: bool,
    pub n: usize,
}

/// Output of the two-step preliminary estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreliminaryFit {
    pub beta_benefit: Vec<f64>,
    pub beta_hassle: Vec<f64>,
    pub beta_usage: Vec<f64>,
    /// Probit log-likelihood of stage 1 at its optimum.
    pub stage1_loglik: f64,
    pub attention_cells: Vec<AttentionCell>,
}

/// Two-step preliminary estimator: a probit for the choice stage on the
/// fully-attentive d_prev = 1 subsample, then cellwise attention
/// probabilities as the ratio of the empirical start rate to the estimated
/// choice probability.
pub fn fit_preliminary(data: &PanelDataset) -> Result<PreliminaryFit> {
    data.validate()?;
    let spec = &data.spec;
    // Stage 1 rows: (x_choice, x_hassle, s, d) for d_prev = 1.
    let mut stay_rows: Vec<(Vec<f64>, Vec<f64>, bool, bool)> = Vec::new();
    // Stage 2 cells keyed by the full covariate pattern of d_prev = 0 rows.
    let mut cells: HashMap<Vec<u64>, (Covariates, usize, usize)> = HashMap::new();
    for h in &data.households {
        for (t, obs) in h.observations.iter().enumerate() {
            let d_prev = h.previous_decision(t);
            if d_prev {
                let mut x_choice = obs.covariates.vector(&spec.names_benefit)?;
                x_choice.extend(obs.covariates.vector(&spec.names_usage)?);
                let x_hassle = obs.covariates.vector(&spec.names_hassle)?;
                stay_rows.push((x_choice, x_hassle, obs.recert_required, obs.decision));
            } else {
                let key: Vec<u64> = spec
                    .all_labels()
                    .iter()
                    .map(|l| obs.covariates.get(l).map(f64::to_bits))
                    .collect::<Result<_>>()?;
                let entry = cells.entry(key).or_insert_with(|| (obs.covariates.clone(), 0, 0));
                entry.1 += 1;
                if obs.decision {
                    entry.2 += 1;
                }
            }
        }
    }
    if stay_rows.is_empty() {
        return Err(Error::Degenerate(
            "no d_prev = 1 observations; the choice stage cannot be fit".into(),
        ));
    }
    if cells.is_empty() {
        return Err(Error::Degenerate(
            "no d_prev = 0 observations; attention ratios cannot be formed".into(),
        ));
    }

    let nb = spec.names_benefit.len();
    let nx = spec.names_usage.len();
    let nk = spec.names_hassle.len();
    let probit = |theta: &[f64]| -> Result<f64> {
        let (bu, bk) = theta.split_at(nb + nx);
        let mut ll = 0.0;
        for (x_choice, x_hassle, s, d) in &stay_rows {
            let mut u = dot(bu, x_choice);
            if *s {
                u += dot(bk, x_hassle);
            }
            let p = if *d { normal_cdf(u) } else { normal_cdf(-u) };
            ll += p.ln();
        }
        Ok(ll)
    };
    let start = vec![0.0; nb + nx + nk];
    let outcome = optimize::maximize(&probit, &start, &OptimOptions::default())?;
    let (bu, bk) = outcome.x.split_at(nb + nx);
    let beta_benefit = bu[..nb].to_vec();
    let beta_usage = bu[nb..].to_vec();
    let beta_hassle = bk.to_vec();

    let stage1 = ParameterSet {
        gamma: vec![0.0; spec.names_attention.len()],
        beta_benefit: beta_benefit.clone(),
        beta_hassle: beta_hassle.clone(),
        beta_usage: beta_usage.clone(),
        log_sigma1: f64::NEG_INFINITY,
        log_sigma2: f64::NEG_INFINITY,
    };
    let mut attention_cells: Vec<AttentionCell> = cells
        .into_values()
        .map(|(covariates, n, d_count)| -> Result<AttentionCell> {
            let start_rate = d_count as f64 / n as f64;
            // Sign-ups always face hassle, so the cell's choice utility is
            // evaluated at s = 1.
            let u = choice_utility(spec, &stage1, &covariates, true, 0.0)?;
            let choice_prob = normal_cdf(u);
            let raw = start_rate / choice_prob;
            let clipped = raw > 1.0;
            let attention_prob = raw.clamp(f64::MIN_POSITIVE, 1.0);
            Ok(AttentionCell { covariates, start_rate, choice_prob, attention_prob, clipped, n })
        })
        .collect::<Result<_>>()?;
    attention_cells.sort_by(|a, b| {
        let ka: Vec<_> = a.covariates.values.values().map(|v| v.to_bits()).collect();
        let kb: Vec<_> = b.covariates.values.values().map(|v| v.to_bits()).collect();
        ka.cmp(&kb)
    });

    Ok(PreliminaryFit {
        beta_benefit,
        beta_hassle,
        beta_usage,
        stage1_loglik: outcome.value,
        attention_cells,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Convenience: vector of flat-parameter names matching `standard_errors`.
pub fn coefficient_names(spec: &CovariateSpec) -> Vec<String> {
    ParameterSet::parameter_names(spec)
}

/// Helper for diagnostics: the minimum eigenvalue of the information matrix.
pub fn information_matrix(
    params: &ParameterSet,
    data: &PanelDataset,
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>> {
    let compiled = CompiledPanel::compile(data)?;
    let flat = params.to_flat();
    let objective =
        |x: &[f64]| -> Result<f64> { compiled.loglik(&ParameterSet::from_flat(&compiled.spec, x)?, rule) };
    let hess = optimize::numerical_hessian(&objective, &flat, 1e-3)?;
    let n = flat.len();
    Ok(DMatrix::from_fn(n, n, |i, j| -hess[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use approx::assert_abs_diff_eq;

    fn spec() -> CovariateSpec {
        CovariateSpec::new(
            vec!["const".into(), "log_benefit".into(), "no_infant".into(), "la".into(), "education".into()],
            vec!["const".into(), "log_benefit".into(), "no_infant".into()],
            vec!["const".into(), "la".into()],
            vec!["education".into()],
        )
        .unwrap()
    }

    fn params() -> ParameterSet {
        ParameterSet {
            gamma: vec![-2.716, 0.321, -0.732, 0.001, 0.034],
            beta_benefit: vec![1.134, 0.141, -0.381],
            beta_hassle: vec![-0.360, 0.010],
            beta_usage: vec![0.082],
            log_sigma1: 0.452,
            log_sigma2: -0.114,
        }
    }

    fn baseline_x() -> Covariates {
        Covariates::from_pairs([
            ("const", 1.0),
            ("log_benefit", 150.0f64.ln()),
            ("no_infant", 0.0),
            ("la", 15.0),
            ("education", 2.0),
        ])
    }

    fn history(decisions: &[bool], recerts: &[bool]) -> HouseholdHistory {
        let obs = decisions
            .iter()
            .zip(recerts)
            .enumerate()
            .map(|(i, (&d, &z))| Observation {
                period: i as u32 + 1,
                covariates: baseline_x(),
                recert_required: z,
                decision: d,
                youngest_age_months: None,
            })
            .collect();
        HouseholdHistory::new("h", obs).unwrap()
    }

    #[test]
    fn single_period_complement() {
        let h = history(&[false], &[false]);
        let p1 = transition_prob(&spec(), &params(), &baseline_x(), false, false, true, 0.3).unwrap();
        let lik = conditional_sequence_likelihood(&spec(), &params(), &h, 0.3).unwrap();
        assert_abs_diff_eq!(lik, 1.0 - p1, epsilon = 1e-14);
    }

    #[test]
    fn two_period_product() {
        let h = history(&[true, true], &[false, false]);
        let s = spec();
        let p = params();
        let x = baseline_x();
        let start = transition_prob(&s, &p, &x, false, false, true, -0.4).unwrap();
        let stay = transition_prob(&s, &p, &x, true, false, true, -0.4).unwrap();
        let lik = conditional_sequence_likelihood(&s, &p, &h, -0.4).unwrap();
        assert_abs_diff_eq!(lik, start * stay, epsilon = 1e-14);
    }

    #[test]
    fn coherent_shuffle_pair_has_equal_conditional_likelihood() {
        // Ring: d = (1,1,0,0), z = (0,1,0,0); reshuffle: d = (0,1,1,0),
        // z = (0,0,1,0). Same transition-factor multiset at constant x.
        let ring = history(&[true, true, false, false], &[false, true, false, false]);
        let ddot = history(&[false, true, true, false], &[false, false, true, false]);
        let s = spec();
        let p = params();
        for q in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let a = conditional_sequence_likelihood(&s, &p, &ring, q).unwrap();
            let b = conditional_sequence_likelihood(&s, &p, &ddot, q).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn marginal_equals_conditional_when_sigmas_vanish() {
        let mut p = params();
        p.log_sigma1 = f64::NEG_INFINITY;
        p.log_sigma2 = f64::NEG_INFINITY;
        let h = history(&[true, false, true], &[false, false, false]);
        let rule = QuadratureRule::gauss_hermite(7).unwrap();
        let marginal = marginal_sequence_likelihood(&spec(), &p, &h, &rule).unwrap();
        let conditional = conditional_sequence_likelihood(&spec(), &p, &h, 0.0).unwrap();
        assert_abs_diff_eq!(marginal, conditional, epsilon = 1e-13);
    }

    #[test]
    fn closed_form_attention_values() {
        assert_abs_diff_eq!(closed_form_marginal_attention(0.0, 3.7), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(closed_form_marginal_attention(1.0, 1.0), 0.76025, epsilon = 1e-5);
    }

    #[test]
    fn quadrature_matches_closed_form_attention() {
        // T=1 start with the choice stage forced open isolates the attention
        // marginal: E[Φ(c + σq)].
        let c = -1.0246;
        let sigma = 0.452f64.exp();
        let rule = QuadratureRule::gauss_hermite(30).unwrap();
        let quad = rule.integrate(|q| normal_cdf(c + sigma * q));
        assert_abs_diff_eq!(quad, closed_form_marginal_attention(c, sigma), epsilon = 1e-8);
    }

    #[test]
    fn forced_choice_symmetric_marginal() {
        let mut p = params();
        p.gamma = vec![0.0; 5];
        p.log_sigma1 = 0.0;
        // Choice certain: huge intercept, σ₂ = 0.
        p.beta_benefit = vec![50.0, 0.0, 0.0];
        p.beta_hassle = vec![0.0, 0.0];
        p.beta_usage = vec![0.0];
        p.log_sigma2 = f64::NEG_INFINITY;
        let h = history(&[true], &[false]);
        let rule = QuadratureRule::gauss_hermite(30).unwrap();
        let marginal = marginal_sequence_likelihood(&spec(), &p, &h, &rule).unwrap();
        assert_abs_diff_eq!(marginal, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn marginal_matches_dense_integration_oracle() {
        // T=1 start: ∫ Φ(c₁+σ₁q)Φ(c₂+σ₂q) dΦ(q) by fine trapezoid on [−10,10].
        let s = spec();
        let p = params();
        let x = baseline_x();
        let c1 = crate::model::attention_utility(&s, &p, &x, 0.0).unwrap();
        let c2 = choice_utility(&s, &p, &x, true, 0.0).unwrap();
        let (s1, s2) = (p.sigma1(), p.sigma2());
        let n = 200_001;
        let (lo, hi) = (-10.0, 10.0);
        let step = (hi - lo) / (n - 1) as f64;
        let mut dense = 0.0;
        for i in 0..n {
            let q = lo + i as f64 * step;
            let weight = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            dense += weight
                * normal_cdf(c1 + s1 * q)
                * normal_cdf(c2 + s2 * q)
                * crate::stats::normal_pdf(q);
        }
        dense *= step;
        let h = history(&[true], &[false]);
        let rule = QuadratureRule::gauss_hermite(30).unwrap();
        let quad = marginal_sequence_likelihood(&s, &p, &h, &rule).unwrap();
        assert_abs_diff_eq!(quad, dense, epsilon = 1e-8);
    }

    #[test]
    fn quadrature_order_convergence_on_t3_history() {
        let s = spec();
        let p = params();
        let h = history(&[true, false, true], &[false, false, false]);
        let at = |order| {
            let rule = QuadratureRule::gauss_hermite(order).unwrap();
            marginal_sequence_likelihood(&s, &p, &h, &rule).unwrap()
        };
        let (v8, v16, v32, v64) = (at(8), at(16), at(32), at(64));
        assert!((v16 - v8).abs() >= (v32 - v16).abs());
        assert!((v32 - v16).abs() >= (v64 - v32).abs() - 1e-15);
    }

    #[test]
    fn brute_force_grid_oracle_t3() {
        // Trapezoid over a 2001-point grid on [−8, 8] vs order-40 quadrature.
        let s = spec();
        let p = params();
        let h = history(&[false, true, true], &[false, false, true]);
        let n = 2001;
        let (lo, hi) = (-8.0, 8.0);
        let step = (hi - lo) / (n - 1) as f64;
        let mut grid = 0.0;
        for i in 0..n {
            let q = lo + i as f64 * step;
            let weight = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            grid += weight
                * conditional_sequence_likelihood(&s, &p, &h, q).unwrap()
                * crate::stats::normal_pdf(q);
        }
        grid *= step;
        let rule = QuadratureRule::gauss_hermite(40).unwrap();
        let quad = marginal_sequence_likelihood(&s, &p, &h, &rule).unwrap();
        assert_abs_diff_eq!(quad, grid, epsilon = 1e-6);
    }

    #[test]
    fn panel_loglik_additivity_and_permutation() {
        let s = spec();
        let p = params();
        let mut h1 = history(&[true, false], &[false, false]);
        h1.id = "h1".into();
        let mut h2 = history(&[false, true], &[false, false]);
        h2.id = "h2".into();
        let rule = QuadratureRule::gauss_hermite(15).unwrap();
        let single = PanelDataset::new(s.clone(), vec![h1.clone()]).unwrap();
        let ll1 = panel_loglik(&p, &single, &rule).unwrap();
        let m1 = marginal_sequence_likelihood(&s, &p, &h1, &rule).unwrap();
        assert_abs_diff_eq!(ll1, m1.ln(), epsilon = 1e-12);

        let mut h1b = h1.clone();
        h1b.id = "h1b".into();
        let doubled = PanelDataset::new(s.clone(), vec![h1.clone(), h1b]).unwrap();
        assert_abs_diff_eq!(panel_loglik(&p, &doubled, &rule).unwrap(), 2.0 * ll1, epsilon = 1e-10);

        let ab = PanelDataset::new(s.clone(), vec![h1.clone(), h2.clone()]).unwrap();
        let ba = PanelDataset::new(s, vec![h2, h1]).unwrap();
        assert_abs_diff_eq!(
            panel_loglik(&p, &ab, &rule).unwrap(),
            panel_loglik(&p, &ba, &rule).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn relabeling_covariates_leaves_loglik_unchanged() {
        // Reverse the attention label order together with γ.
        let s = spec();
        let p = params();
        let h = history(&[true, true, false], &[false, true, false]);
        let rule = QuadratureRule::gauss_hermite(15).unwrap();
        let base = PanelDataset::new(s.clone(), vec![h.clone()]).unwrap();
        let ll = panel_loglik(&p, &base, &rule).unwrap();

        let mut names = s.names_attention.clone();
        names.reverse();
        // Keep an intercept-first head: rotate "education" out of slot 0.
        names.swap(0, 4);
        let permuted_spec = CovariateSpec::new(
            names.clone(),
            s.names_benefit.clone(),
            s.names_hassle.clone(),
            s.names_usage.clone(),
        )
        .unwrap();
        let gamma: Vec<f64> = names
            .iter()
            .map(|l| {
                let idx = s.names_attention.iter().position(|n| n == l).unwrap();
                p.gamma[idx]
            })
            .collect();
        let permuted_params = ParameterSet { gamma, ..p.clone() };
        let permuted = PanelDataset::new(permuted_spec, vec![h]).unwrap();
        assert_abs_diff_eq!(panel_loglik(&permuted_params, &permuted, &rule).unwrap(), ll, epsilon = 1e-12);
    }

    #[test]
    fn gradient_richardson_agreement() {
        let s = spec();
        let p = params();
        let h = history(&[true, false, true, true], &[false, false, false, true]);
        let data = PanelDataset::new(s.clone(), vec![h]).unwrap();
        let rule = QuadratureRule::gauss_hermite(12).unwrap();
        let compiled = CompiledPanel::compile(&data).unwrap();
        let f = |x: &[f64]| -> Result<f64> {
            compiled.loglik(&ParameterSet::from_flat(&s, x)?, &rule)
        };
        let flat = p.to_flat();
        let coarse = optimize::numerical_gradient(&f, &flat, 1e-4).unwrap();
        let fine = optimize::numerical_gradient(&f, &flat, 1e-6).unwrap();
        for (c, f_) in coarse.iter().zip(&fine) {
            let denom = f_.abs().max(1e-8);
            assert!((c - f_).abs() / denom < 1e-4, "gradient mismatch: {c} vs {f_}");
        }
    }

    #[test]
    fn compiled_tuples_deduplicate() {
        let h = history(&[false, false, false, false], &[false; 4]);
        let compiled = CompiledHousehold::compile(&spec(), &h).unwrap();
        assert_eq!(compiled.tuples.len(), 1);
        assert_eq!(compiled.tuples[0].count, 4);
    }

    #[test]
    fn standard_errors_unit_curvature_and_scaling() {
        // Quadratic check goes through the optimizer module directly.
        let f = |x: &[f64]| -> Result<f64> {
            Ok(-0.5 * x.iter().map(|v| v * v).sum::<f64>())
        };
        let hess = optimize::numerical_hessian(&f, &[0.0, 0.0], 1e-3).unwrap();
        assert_abs_diff_eq!(-hess[0][0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(-hess[1][1], 1.0, epsilon = 1e-6);
    }
}
