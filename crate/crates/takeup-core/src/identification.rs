//! Numerical verification of the identification machinery: the factorization
//! of start probabilities into attention × choice, the CPL × semi-elasticity
//! derivative decomposition, and the constructive coefficient-ratio formulas
//! built from pivot-period derivatives and coherent-shuffle sequence pairs.
//!
//! Everything here works on model-implied probabilities evaluated by
//! reference-grade dense integration, not on finite samples: the statements
//! being checked are population identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{closed_form_marginal_attention, conditional_sequence_likelihood};
use crate::model::{
    attention_utility, choice_utility, hassle_indicator, Covariates, CovariateSpec,
    HouseholdHistory, Observation, ParameterSet,
};
use crate::stats::{normal_cdf, normal_pdf};

/// Reference integration grid: 2001 trapezoid points on [−8, 8]. The normal
/// density and all its derivatives vanish at the endpoints, so the trapezoid
/// rule is spectrally accurate here.
pub const GRID_POINTS: usize = 2001;
pub const GRID_HALF_WIDTH: f64 = 8.0;

/// ∫ f(q) φ(q) dq on the reference grid.
pub fn dense_expectation<F: FnMut(f64) -> f64>(mut f: F) -> f64 {
    let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
    let mut total = 0.0;
    for i in 0..GRID_POINTS {
        let q = -GRID_HALF_WIDTH + i as f64 * step;
        let w = if i == 0 || i == GRID_POINTS - 1 { 0.5 } else { 1.0 };
        total += w * f(q) * normal_pdf(q);
    }
    total * step
}

/// A take-up sequence with a designated pivot period and pivot covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceQuery {
    pub decisions: Vec<bool>,
    pub covariates: Vec<Covariates>,
    pub recerts: Vec<bool>,
    /// 1-based pivot period τ.
    pub pivot_period: usize,
    /// Pivot covariate label ω.
    pub pivot_label: String,
}

impl SequenceQuery {
    /// Constant-covariate convenience constructor.
    pub fn constant_x(
        decisions: Vec<bool>,
        recerts: Vec<bool>,
        x: &Covariates,
        pivot_period: usize,
        pivot_label: impl Into<String>,
    ) -> Self {
        let covariates = vec![x.clone(); decisions.len()];
        Self { decisions, covariates, recerts, pivot_period, pivot_label: pivot_label.into() }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.decisions.len();
        if t == 0 {
            return Err(Error::Validation("sequence query is empty".into()));
        }
        if self.covariates.len() != t || self.recerts.len() != t {
            return Err(Error::Validation("sequence query paths have mismatched lengths".into()));
        }
        if self.pivot_period < 1 || self.pivot_period > t {
            return Err(Error::Validation(format!(
                "pivot period {} outside 1..={t}",
                self.pivot_period
            )));
        }
        Ok(())
    }

    fn to_history(&self) -> Result<HouseholdHistory> {
        let obs = self
            .decisions
            .iter()
            .zip(&self.covariates)
            .zip(&self.recerts)
            .enumerate()
            .map(|(i, ((&d, x), &z))| Observation {
                period: i as u32 + 1,
                covariates: x.clone(),
                recert_required: z,
                decision: d,
                youngest_age_months: None,
            })
            .collect();
        HouseholdHistory::new("query", obs)
    }

    fn with_pivot_value(&self, value: f64) -> Self {
        let mut out = self.clone();
        out.covariates[self.pivot_period - 1].set(&self.pivot_label, value);
        out
    }

    fn pivot_value(&self) -> Result<f64> {
        self.covariates[self.pivot_period - 1].get(&self.pivot_label)
    }
}

/// P(D_1:T | X, Z): the random effect integrated out on the reference grid.
pub fn sequence_probability(
    spec: &CovariateSpec,
    params: &ParameterSet,
    query: &SequenceQuery,
) -> Result<f64> {
    query.validate()?;
    let h = query.to_history()?;
    // Probe once so covariate errors surface instead of being swallowed by
    // the closure below.
    conditional_sequence_likelihood(spec, params, &h, 0.0)?;
    Ok(dense_expectation(|q| {
        conditional_sequence_likelihood(spec, params, &h, q).unwrap_or(f64::NAN)
    }))
}

/// A first-order derivative of [`sequence_probability`] in the pivot
/// covariate, by Richardson-extrapolated central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    pub value: f64,
    pub step: f64,
    /// |D(h/2) − D(h)|, the recorded Richardson check.
    pub richardson_delta: f64,
}

/// ∂ P(D_1:T | ·) / ∂ x_τ^ω.
pub fn fod(spec: &CovariateSpec, params: &ParameterSet, query: &SequenceQuery) -> Result<DerivativeEstimate> {
    query.validate()?;
    let x0 = query.pivot_value()?;
    let h = 1e-4 * (1.0 + x0.abs());
    if h <= f64::MIN_POSITIVE {
        return Err(Error::Degenerate("finite-difference step underflowed".into()));
    }
    let central = |step: f64| -> Result<f64> {
        let up = sequence_probability(spec, params, &query.with_pivot_value(x0 + step))?;
        let down = sequence_probability(spec, params, &query.with_pivot_value(x0 - step))?;
        Ok((up - down) / (2.0 * step))
    };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    // Order-2 central differences: Richardson combination (4 D(h/2) − D(h))/3.
    Ok(DerivativeEstimate {
        value: (4.0 * fine - coarse) / 3.0,
        step: h,
        richardson_delta: (fine - coarse).abs(),
    })
}

/// Sum of a coefficient over every partition slot carrying the label.
fn effective_coefficient(labels: &[String], coefs: &[f64], label: &str) -> f64 {
    labels.iter().zip(coefs).filter(|(l, _)| l.as_str() == label).map(|(_, c)| c).sum()
}

/// The Lemma-3 semi-elasticity: ∂ log P(D_1:T | q) / ∂ x_τ^ω, analytic.
pub fn semi_elasticity(
    spec: &CovariateSpec,
    params: &ParameterSet,
    query: &SequenceQuery,
    q: f64,
) -> Result<f64> {
    query.validate()?;
    let tau = query.pivot_period - 1;
    let d_prev = if tau == 0 { false } else { query.decisions[tau - 1] };
    let z = query.recerts[tau];
    let s = hassle_indicator(d_prev, z);
    let x = &query.covariates[tau];
    let label = query.pivot_label.as_str();

    let gamma_eff = effective_coefficient(&spec.names_attention, &params.gamma, label);
    let mut beta_eff = effective_coefficient(&spec.names_benefit, &params.beta_benefit, label)
        + effective_coefficient(&spec.names_usage, &params.beta_usage, label);
    if s {
        beta_eff += effective_coefficient(&spec.names_hassle, &params.beta_hassle, label);
    }

    let u_c = choice_utility(spec, params, x, s, q)?;
    let pc = normal_cdf(u_c);
    let (pa, dpa) = if d_prev {
        (1.0, 0.0)
    } else {
        let u_a = attention_utility(spec, params, x, q)?;
        (normal_cdf(u_a), gamma_eff * normal_pdf(u_a))
    };
    let dp = dpa * pc + pa * beta_eff * normal_pdf(u_c);
    let p = pa * pc;
    Ok(if query.decisions[tau] { dp / p } else { -dp / (1.0 - p) })
}

/// Lemma-3 right-hand side: ∫ CPL(q) × SE(q) dΦ(q) on the reference grid.
pub fn lemma3_decomposition(
    spec: &CovariateSpec,
    params: &ParameterSet,
    query: &SequenceQuery,
) -> Result<f64> {
    query.validate()?;
    let h = query.to_history()?;
    conditional_sequence_likelihood(spec, params, &h, 0.0)?;
    semi_elasticity(spec, params, query, 0.0)?;
    Ok(dense_expectation(|q| {
        let cpl = conditional_sequence_likelihood(spec, params, &h, q).unwrap_or(f64::NAN);
        let se = semi_elasticity(spec, params, query, q).unwrap_or(f64::NAN);
        cpl * se
    }))
}

/// A family of (decision, recertification) sequences sharing a pivot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFamily {
    pub members: Vec<(Vec<bool>, Vec<bool>)>,
    /// 1-based pivot period τ with d_{τ−1} = d_τ = 1 in every member.
    pub tau: usize,
}

/// All tail completions after the pivot: d_{τ−1} = d_τ = 1, z_τ fixed, and
/// every (d, z) combination over periods τ+1..T enumerated (16 tails at
/// T = 4, τ = 2).
pub fn tail_family(t: usize, tau: usize, z_tau: bool) -> Result<SequenceFamily> {
    if tau < 2 || tau > t {
        return Err(Error::Validation(format!("pivot {tau} needs 2 ≤ τ ≤ T = {t}")));
    }
    let free = t - tau;
    let mut members = Vec::with_capacity(1usize << (2 * free));
    for mask in 0u32..(1 << (2 * free)) {
        let mut d = vec![false; t];
        let mut z = vec![false; t];
        for p in 0..tau {
            d[p] = true;
        }
        z[tau - 1] = z_tau;
        for (k, p) in (tau..t).enumerate() {
            d[p] = mask & (1 << (2 * k)) != 0;
            z[p] = mask & (1 << (2 * k + 1)) != 0;
        }
        members.push((d, z));
    }
    Ok(SequenceFamily { members, tau })
}

fn averaged_fod(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    family: &SequenceFamily,
    label: &str,
) -> Result<f64> {
    let mut total = 0.0;
    for (d, z) in &family.members {
        let query = SequenceQuery::constant_x(d.clone(), z.clone(), x, family.tau, label);
        total += fod(spec, params, &query)?.value;
    }
    Ok(total / family.members.len() as f64)
}

fn ratio_of_averaged_fods(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    family: &SequenceFamily,
    omega: &str,
    benefit_label: &str,
) -> Result<f64> {
    let num = averaged_fod(spec, params, x, family, omega)?;
    let den = averaged_fod(spec, params, x, family, benefit_label)?;
    if den.abs() < 1e-12 {
        return Err(Error::Degenerate(format!(
            "family derivative in `{benefit_label}` is numerically zero"
        )));
    }
    Ok(num / den)
}

/// Ratio estimator for benefit/usage coefficients: averaged pivot derivative
/// in ω over the same in the benefit covariate, with z_τ = 0 so the hassle
/// partition is invisible.
pub fn theorem1_ratio(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    family: &SequenceFamily,
    omega: &str,
    benefit_label: &str,
) -> Result<f64> {
    if family.members.iter().any(|(_, z)| z[family.tau - 1]) {
        return Err(Error::Validation("theorem-1 family requires z_τ = 0".into()));
    }
    ratio_of_averaged_fods(spec, params, x, family, omega, benefit_label)
}

/// Ratio estimator for hassle coefficients: identical machinery with z_τ = 1
/// so the pivot period carries the hassle term.
pub fn theorem2_ratio(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    family: &SequenceFamily,
    omega: &str,
    benefit_label: &str,
) -> Result<f64> {
    if family.members.iter().any(|(_, z)| !z[family.tau - 1]) {
        return Err(Error::Validation("theorem-2 family requires z_τ = 1".into()));
    }
    ratio_of_averaged_fods(spec, params, x, family, omega, benefit_label)
}

/// A matched pair of sequences: a stay-pivot "ring" and a start-pivot
/// reshuffle whose Q-conditional probabilities coincide (H1) and whose pivot
/// choice utilities coincide (H2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherentPair {
    pub ring: (Vec<bool>, Vec<bool>),
    pub reshuffle: (Vec<bool>, Vec<bool>),
    /// 1-based pivot period: d_prev = 1 in `ring`, d_prev = 0 in `reshuffle`.
    pub tau: usize,
}

/// The canonical four-period instance: ring d = (1,1,0,0), z = (0,1,0,0);
/// reshuffle d = (0,1,1,0), z = (0,0,1,0); τ = 2 under constant covariates.
pub fn canonical_coherent_pair() -> CoherentPair {
    CoherentPair {
        ring: (vec![true, true, false, false], vec![false, true, false, false]),
        reshuffle: (vec![false, true, true, false], vec![false, false, true, false]),
        tau: 2,
    }
}

/// Max |conditional-probability difference| between the pair over the
/// reference q-grid — the H1 check.
pub fn verify_h1(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    pair: &CoherentPair,
) -> Result<f64> {
    let ring = SequenceQuery::constant_x(pair.ring.0.clone(), pair.ring.1.clone(), x, pair.tau, "")
        .to_history()?;
    let resh =
        SequenceQuery::constant_x(pair.reshuffle.0.clone(), pair.reshuffle.1.clone(), x, pair.tau, "")
            .to_history()?;
    let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
    let mut worst: f64 = 0.0;
    for i in 0..GRID_POINTS {
        let q = -GRID_HALF_WIDTH + i as f64 * step;
        let a = conditional_sequence_likelihood(spec, params, &ring, q)?;
        let b = conditional_sequence_likelihood(spec, params, &resh, q)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Ratio estimator for attention coefficients: the start-vs-stay derivative
/// difference in ω over the same difference in the benefit covariate.
pub fn theorem3_ratio(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    pair: &CoherentPair,
    omega: &str,
    benefit_label: &str,
) -> Result<f64> {
    let h1 = verify_h1(spec, params, x, pair)?;
    if h1 > 1e-8 {
        return Err(Error::Degenerate(format!(
            "coherent pair violates H1: max conditional-probability gap {h1:e}"
        )));
    }
    let diff = |label: &str| -> Result<f64> {
        let ring =
            SequenceQuery::constant_x(pair.ring.0.clone(), pair.ring.1.clone(), x, pair.tau, label);
        let resh = SequenceQuery::constant_x(
            pair.reshuffle.0.clone(),
            pair.reshuffle.1.clone(),
            x,
            pair.tau,
            label,
        );
        Ok(fod(spec, params, &resh)?.value - fod(spec, params, &ring)?.value)
    };
    let num = diff(omega)?;
    let den = diff(benefit_label)?;
    if den.abs() < 1e-12 {
        return Err(Error::Degenerate(format!(
            "pair derivative difference in `{benefit_label}` is numerically zero"
        )));
    }
    Ok(num / den)
}

/// Max over cells of |P(start) − G(xγ)·H(u^c)| where G and H are the
/// marginal stage CDFs. Exact (≈ machine precision) when σ₁ = σ₂ = 0; the
/// gap for positive σ is the cross-stage correlation the factorization
/// ignores.
pub fn verify_lemma1(
    spec: &CovariateSpec,
    params: &ParameterSet,
    cells: &[Covariates],
) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::Validation("lemma-1 check needs at least one cell".into()));
    }
    let mut worst: f64 = 0.0;
    for x in cells {
        let c1 = attention_utility(spec, params, x, 0.0)? - 0.0;
        // A start (d_prev = 0) always carries the hassle term.
        let c2 = choice_utility(spec, params, x, true, 0.0)?;
        let (s1, s2) = (params.sigma1(), params.sigma2());
        let joint = dense_expectation(|q| normal_cdf(c1 + s1 * q) * normal_cdf(c2 + s2 * q));
        let product =
            closed_form_marginal_attention(c1, s1) * closed_form_marginal_attention(c2, s2);
        worst = worst.max((joint - product).abs());
    }
    Ok(worst)
}

/// One row of the verification report emitted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRow {
    pub theorem: String,
    pub omega: String,
    pub true_ratio: f64,
    pub estimated_ratio: f64,
    pub abs_error: f64,
}

/// Lab spec with disjoint partition-specific labels (plus the shared benefit
/// covariate) so every coefficient ratio is unambiguous.
pub fn lab_spec() -> CovariateSpec {
    CovariateSpec::new(
        vec!["const".into(), "benefit".into(), "att_x".into()],
        vec!["const".into(), "benefit".into()],
        vec!["kconst".into(), "kappa_x".into()],
        vec!["usage_x".into()],
    )
    .unwrap()
}

/// Default synthetic parameterization for the lab spec.
pub fn lab_params() -> ParameterSet {
    ParameterSet {
        gamma: vec![-0.5, 0.3, 0.4],
        beta_benefit: vec![0.2, 0.6],
        beta_hassle: vec![-0.4, 0.25],
        beta_usage: vec![0.3],
        log_sigma1: -0.223,
        log_sigma2: -0.693,
    }
}

/// Evaluation cell for the lab spec.
pub fn lab_x() -> Covariates {
    Covariates::from_pairs([
        ("const", 1.0),
        ("benefit", 0.7),
        ("att_x", 0.4),
        ("kconst", 1.0),
        ("kappa_x", 0.9),
        ("usage_x", -0.3),
    ])
}

/// Full verification report: theorem 1/2/3 ratio estimates against their
/// closed-form targets for every coefficient visible to each theorem.
pub fn verification_report(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
) -> Result<Vec<VerificationRow>> {
    let mut rows = Vec::new();
    let slope =
        |labels: &[String], coefs: &[f64], label: &str| -> Option<f64> {
            labels.iter().position(|l| l == label).map(|i| coefs[i])
        };
    let benefit_slope = slope(&spec.names_benefit, &params.beta_benefit, "benefit")
        .ok_or_else(|| Error::Validation("benefit covariate missing from choice stage".into()))?;

    let family1 = tail_family(4, 2, false)?;
    for (label, coef) in spec
        .names_benefit
        .iter()
        .zip(&params.beta_benefit)
        .chain(spec.names_usage.iter().zip(&params.beta_usage))
    {
        if label == "const" {
            continue;
        }
        let truth = coef / benefit_slope;
        let est = theorem1_ratio(spec, params, x, &family1, label, "benefit")?;
        rows.push(VerificationRow {
            theorem: "theorem1".into(),
            omega: label.clone(),
            true_ratio: truth,
            estimated_ratio: est,
            abs_error: (est - truth).abs(),
        });
    }

    let family2 = tail_family(4, 2, true)?;
    for (label, coef) in spec.names_hassle.iter().zip(&params.beta_hassle) {
        let truth = coef / benefit_slope;
        let est = theorem2_ratio(spec, params, x, &family2, label, "benefit")?;
        rows.push(VerificationRow {
            theorem: "theorem2".into(),
            omega: label.clone(),
            true_ratio: truth,
            estimated_ratio: est,
            abs_error: (est - truth).abs(),
        });
    }

    let gamma_benefit = slope(&spec.names_attention, &params.gamma, "benefit")
        .ok_or_else(|| Error::Validation("benefit covariate missing from attention stage".into()))?;
    let pair = canonical_coherent_pair();
    for (label, coef) in spec.names_attention.iter().zip(&params.gamma) {
        if label == "const" {
            continue;
        }
        let truth = coef / gamma_benefit;
        let est = theorem3_ratio(spec, params, x, &pair, label, "benefit")?;
        rows.push(VerificationRow {
            theorem: "theorem3".into(),
            omega: label.clone(),
            true_ratio: truth,
            estimated_ratio: est,
            abs_error: (est - truth).abs(),
        });
    }
    Ok(rows)
}
