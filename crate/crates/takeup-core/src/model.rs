//! Structural data model and single-period probability primitives of the
//! two-stage attention → choice take-up model.
//!
//! A household participates in period t iff it pays attention (A=1) and then
//! chooses participation (C=1): D = A·C. Last-period participants are fully
//! attentive; everyone else pays attention with probability Φ(xγ + σ₁q).
//! Conditional on attention the household enrolls with probability
//! Φ(x^υβ^υ + S·x^κβ^κ + x^χβ^χ + σ₂q), where the hassle switch S is on for
//! sign-ups and for recertification months.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_cdf;

/// Youngest-child ages (in months) that trigger recertification for an
/// enrolled household.
pub const RECERTIFICATION_AGES: [i32; 4] = [1, 13, 25, 37];

/// Ordered covariate labels for the attention stage and the three choice
/// partitions (benefit υ, hassle κ, usage χ). Partitions may overlap: the
/// same label can appear in several lists and is then multiplied by each
/// partition's own coefficient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub names_attention: Vec<String>,
    pub names_benefit: Vec<String>,
    pub names_hassle: Vec<String>,
    pub names_usage: Vec<String>,
}

impl CovariateSpec {
    pub fn new(
        names_attention: Vec<String>,
        names_benefit: Vec<String>,
        names_hassle: Vec<String>,
        names_usage: Vec<String>,
    ) -> Result<Self> {
        let spec = Self { names_attention, names_benefit, names_hassle, names_usage };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("attention", &self.names_attention),
            ("benefit", &self.names_benefit),
            ("hassle", &self.names_hassle),
        ] {
            if list.is_empty() {
                return Err(Error::Validation(format!(
                    "{name} covariate list must start with an intercept label"
                )));
            }
        }
        Ok(())
    }

    /// All distinct labels, in first-appearance order.
    pub fn all_labels(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for label in self
            .names_attention
            .iter()
            .chain(&self.names_benefit)
            .chain(&self.names_hassle)
            .chain(&self.names_usage)
        {
            if !seen.contains(&label.as_str()) {
                seen.push(label.as_str());
            }
        }
        seen
    }

    /// Intercept labels: the heads of the attention, benefit, and hassle lists.
    pub fn intercept_labels(&self) -> Vec<&str> {
        let mut labels = vec![self.names_attention[0].as_str(), self.names_benefit[0].as_str()];
        labels.push(self.names_hassle[0].as_str());
        labels.dedup();
        labels
    }
}

/// Label-addressed covariate values for one household-period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub values: BTreeMap<String, f64>,
}

impl Covariates {
    pub fn new(values: BTreeMap<String, f64>) -> Self {
        Self { values }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self { values: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }

    pub fn get(&self, label: &str) -> Result<f64> {
        self.values
            .get(label)
            .copied()
            .ok_or_else(|| Error::MissingCovariate { label: label.to_string() })
    }

    pub fn set(&mut self, label: &str, value: f64) {
        self.values.insert(label.to_string(), value);
    }

    /// Values aligned to a label list.
    pub fn vector(&self, labels: &[String]) -> Result<Vec<f64>> {
        labels.iter().map(|l| self.get(l)).collect()
    }

    /// Checks presence of every label the covariate layout demands and that intercept
    /// entries equal exactly one.
    pub fn validate_against(&self, spec: &CovariateSpec) -> Result<()> {
        for label in spec.all_labels() {
            self.get(label)?;
        }
        for label in spec.intercept_labels() {
            if self.get(label)? != 1.0 {
                return Err(Error::Validation(format!(
                    "intercept covariate `{label}` must equal 1"
                )));
            }
        }
        Ok(())
    }
}

/// One household-period: covariates, recertification flag Z, decision D,
/// and (optionally) the youngest child's age in months.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub period: u32,
    pub covariates: Covariates,
    pub recert_required: bool,
    pub decision: bool,
    pub youngest_age_months: Option<i32>,
}

/// One household's eligibility spell with the fixed initial condition D₀ = 0.
/// Periods run consecutively from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdHistory {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl HouseholdHistory {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let h = Self { id: id.into(), observations };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Validation(format!("household `{}` has no observations", self.id)));
        }
        for (idx, obs) in self.observations.iter().enumerate() {
            if obs.period != idx as u32 + 1 {
                return Err(Error::Validation(format!(
                    "household `{}`: period {} out of order (expected {})",
                    self.id,
                    obs.period,
                    idx + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Decision at period t−1, with D₀ = 0.
    pub fn previous_decision(&self, t_index: usize) -> bool {
        if t_index == 0 {
            false
        } else {
            self.observations[t_index - 1].decision
        }
    }
}

/// A covariate spec together with the households observed under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub spec: CovariateSpec,
    pub households: Vec<HouseholdHistory>,
}

impl PanelDataset {
    pub fn new(spec: CovariateSpec, households: Vec<HouseholdHistory>) -> Result<Self> {
        let panel = Self { spec, households };
        panel.validate()?;
        Ok(panel)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for h in &self.households {
            if !ids.insert(h.id.as_str()) {
                return Err(Error::Validation(format!("duplicate household id `{}`", h.id)));
            }
            h.validate()?;
            for obs in &h.observations {
                obs.covariates.validate_against(&self.spec).map_err(|e| {
                    Error::Validation(format!("household `{}` period {}: {e}", h.id, obs.period))
                })?;
            }
        }
        Ok(())
    }

    pub fn n_observations(&self) -> usize {
        self.households.iter().map(HouseholdHistory::len).sum()
    }
}

/// Structural coefficients plus random-effect scales, stored as log σ so
/// positivity is unconstrained during optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub gamma: Vec<f64>,
    pub beta_benefit: Vec<f64>,
    pub beta_hassle: Vec<f64>,
    pub beta_usage: Vec<f64>,
    pub log_sigma1: f64,
    pub log_sigma2: f64,
}

impl ParameterSet {
    /// Reference estimates for the simulator's covariate layout
    /// (attention: const, log benefit, no-infant, LA, education;
    /// benefit: const, log benefit, no-infant; hassle: const, LA;
    /// usage: education). Default truth for simulation and counterfactual runs.
    pub fn reference() -> Self {
        Self {
            gamma: vec![-2.716, 0.321, -0.732, 0.001, 0.034],
            beta_benefit: vec![1.134, 0.141, -0.381],
            beta_hassle: vec![-0.360, 0.010],
            beta_usage: vec![0.082],
            log_sigma1: 0.452,
            log_sigma2: -0.114,
        }
    }

    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn validate_against(&self, spec: &CovariateSpec) -> Result<()> {
        let checks = [
            ("gamma", self.gamma.len(), spec.names_attention.len()),
            ("beta_benefit", self.beta_benefit.len(), spec.names_benefit.len()),
            ("beta_hassle", self.beta_hassle.len(), spec.names_hassle.len()),
            ("beta_usage", self.beta_usage.len(), spec.names_usage.len()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Validation(format!(
                    "{name} has {got} coefficients but the layout lists {want} labels"
                )));
            }
        }
        Ok(())
    }

    /// Flattens to the optimizer's parameter vector:
    /// [γ, β^υ, β^κ, β^χ, log σ₁, log σ₂].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_parameters());
        flat.extend(&self.gamma);
        flat.extend(&self.beta_benefit);
        flat.extend(&self.beta_hassle);
        flat.extend(&self.beta_usage);
        flat.push(self.log_sigma1);
        flat.push(self.log_sigma2);
        flat
    }

    pub fn from_flat(spec: &CovariateSpec, flat: &[f64]) -> Result<Self> {
        let (na, nb, nk, nx) = (
            spec.names_attention.len(),
            spec.names_benefit.len(),
            spec.names_hassle.len(),
            spec.names_usage.len(),
        );
        if flat.len() != na + nb + nk + nx + 2 {
            return Err(Error::Validation(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                na + nb + nk + nx + 2
            )));
        }
        let mut it = flat.iter().copied();
        let take = |it: &mut dyn Iterator<Item = f64>, n: usize| it.take(n).collect::<Vec<_>>();
        Ok(Self {
            gamma: take(&mut it, na),
            beta_benefit: take(&mut it, nb),
            beta_hassle: take(&mut it, nk),
            beta_usage: take(&mut it, nx),
            log_sigma1: it.next().unwrap(),
            log_sigma2: it.next().unwrap(),
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.gamma.len()
            + self.beta_benefit.len()
            + self.beta_hassle.len()
            + self.beta_usage.len()
            + 2
    }

    /// Human-readable names aligned with [`ParameterSet::to_flat`].
    pub fn parameter_names(spec: &CovariateSpec) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(spec.names_attention.iter().map(|l| format!("attention:{l}")));
        names.extend(spec.names_benefit.iter().map(|l| format!("benefit:{l}")));
        names.extend(spec.names_hassle.iter().map(|l| format!("hassle:{l}")));
        names.extend(spec.names_usage.iter().map(|l| format!("usage:{l}")));
        names.push("log_sigma1".into());
        names.push("log_sigma2".into());
        names
    }
}

/// S = max{1−D_{t−1}, D_{t−1}·Z}: hassle is due for every sign-up, and for
/// participants only in recertification months.
#[inline]
pub fn hassle_indicator(d_prev: bool, z: bool) -> bool {
    !d_prev || z
}

/// Z = 1 iff the household is enrolled and its youngest child's age in months
/// is one of the recertification trigger ages.
#[inline]
pub fn recertification_flag(youngest_age_months: i32, d_prev: bool) -> bool {
    d_prev && RECERTIFICATION_AGES.contains(&youngest_age_months)
}

fn dot(labels: &[String], coefs: &[f64], x: &Covariates) -> Result<f64> {
    debug_assert_eq!(labels.len(), coefs.len());
    let mut total = 0.0;
    for (label, &coef) in labels.iter().zip(coefs) {
        total += coef * x.get(label)?;
    }
    Ok(total)
}

/// Attention-stage latent utility xγ + σ₁q.
pub fn attention_utility(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    q: f64,
) -> Result<f64> {
    params.validate_against(spec)?;
    Ok(dot(&spec.names_attention, &params.gamma, x)? + params.sigma1() * q)
}

/// Choice-stage latent utility x^υβ^υ + s·x^κβ^κ + x^χβ^χ + σ₂q.
///
/// Hassle-interaction covariates (e.g. accessibility) live inside the κ
/// partition as plain values; the multiplication by S happens here, never in
/// the data.
pub fn choice_utility(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    s: bool,
    q: f64,
) -> Result<f64> {
    params.validate_against(spec)?;
    let mut u = dot(&spec.names_benefit, &params.beta_benefit, x)?
        + dot(&spec.names_usage, &params.beta_usage, x)?
        + params.sigma2() * q;
    if s {
        u += dot(&spec.names_hassle, &params.beta_hassle, x)?;
    }
    Ok(u)
}

/// P(A=1): exactly one for last-period participants, Φ(attention utility)
/// otherwise.
pub fn attention_prob(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    d_prev: bool,
    q: f64,
) -> Result<f64> {
    if d_prev {
        // Validate even on the short-circuit path so parameter-shape errors
        // do not depend on the lagged state. (Covariate values are validated
        // when a dataset is constructed, not here: probability evaluation at
        // perturbed covariates — including intercepts — is legitimate for
        // numerical differentiation.)
        params.validate_against(spec)?;
        return Ok(1.0);
    }
    Ok(normal_cdf(attention_utility(spec, params, x, q)?))
}

/// P(C=1) = Φ(choice utility) with S derived from (d_prev, z).
pub fn choice_prob(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    d_prev: bool,
    z: bool,
    q: f64,
) -> Result<f64> {
    let s = hassle_indicator(d_prev, z);
    Ok(normal_cdf(choice_utility(spec, params, x, s, q)?))
}

/// One-period transition probability P(D_t = d_next | d_prev, x, z, q),
/// the product of attention and choice probabilities (or its complement).
pub fn transition_prob(
    spec: &CovariateSpec,
    params: &ParameterSet,
    x: &Covariates,
    d_prev: bool,
    z: bool,
    d_next: bool,
    q: f64,
) -> Result<f64> {
    let p = attention_prob(spec, params, x, d_prev, q)? * choice_prob(spec, params, x, d_prev, z, q)?;
    Ok(if d_next { p } else { 1.0 - p })
}
