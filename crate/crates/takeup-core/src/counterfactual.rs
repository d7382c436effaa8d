//! Policy interventions layered on the simulator with common random numbers:
//! each policy modifies stage probabilities period by period while replaying
//! the exact latent draws of the no-intervention run, so cross-policy
//! comparisons are paired at the household-month level.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::choice_prob;
use crate::simulator::{
    expand_population, household_stream, simulate_path, simulated_covariate_spec, PeriodState,
    SimConfig,
};
use crate::stats::normal_quantile;

/// Magnitude of the one-shot attention boost applied at period 1.
pub const ONESHOT_BOOST: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    None,
    ForceAttention,
    ForceChoice,
    AttentionBoostPostExit,
    ChoiceNudge,
    OneshotAttentionBoost,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::ForceAttention => "force_attention",
            Self::ForceChoice => "force_choice",
            Self::AttentionBoostPostExit => "attention_boost_post_exit",
            Self::ChoiceNudge => "choice_nudge",
            Self::OneshotAttentionBoost => "oneshot_attention_boost",
        };
        f.write_str(s)
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "force_attention" => Ok(Self::ForceAttention),
            "force_choice" => Ok(Self::ForceChoice),
            "attention_boost_post_exit" => Ok(Self::AttentionBoostPostExit),
            "choice_nudge" => Ok(Self::ChoiceNudge),
            "oneshot_attention_boost" => Ok(Self::OneshotAttentionBoost),
            other => Err(Error::Config(format!("unknown policy kind `{other}`"))),
        }
    }
}

/// A policy intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Additive choice-probability increment for `choice_nudge`.
    #[serde(default)]
    pub nudge_delta: f64,
    /// The nudge only reaches participants whose youngest child is at most
    /// this old.
    #[serde(default = "default_age_cap")]
    pub nudge_age_cap_months: i32,
}

fn default_age_cap() -> i32 {
    30
}

impl PolicySpec {
    pub fn none() -> Self {
        Self::new(PolicyKind::None)
    }

    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, nudge_delta: 0.0, nudge_age_cap_months: default_age_cap() }
    }

    pub fn choice_nudge(delta: f64) -> Self {
        Self { kind: PolicyKind::ChoiceNudge, nudge_delta: delta, nudge_age_cap_months: default_age_cap() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.nudge_delta) {
            return Err(Error::Config("nudge_delta must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Modified (attention, choice) probabilities for one period.
///
/// Note: [`run_counterfactual`] applies `AttentionBoostPostExit` as an overlay
/// on the baseline trajectory (the reminder buys one month, not re-enrollment),
/// so its arm here only matters for direct hook use.
pub fn apply_policy(policy: &PolicySpec, state: &PeriodState, pa: f64, pc: f64) -> (f64, f64) {
    match policy.kind {
        PolicyKind::None => (pa, pc),
        PolicyKind::ForceAttention => (1.0, pc),
        PolicyKind::ForceChoice => (pa, 1.0),
        PolicyKind::AttentionBoostPostExit => {
            if state.exited_last_period {
                (1.0, pc)
            } else {
                (pa, pc)
            }
        }
        PolicyKind::ChoiceNudge => {
            if state.d_prev && state.youngest_age_months <= policy.nudge_age_cap_months {
                (pa, (pc + policy.nudge_delta).min(1.0))
            } else {
                (pa, pc)
            }
        }
        PolicyKind::OneshotAttentionBoost => {
            if state.period == 1 {
                ((pa + ONESHOT_BOOST).min(1.0), pc)
            } else {
                (pa, pc)
            }
        }
    }
}

/// Participant-month means that reveal whom a policy reaches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetingSummary {
    pub mean_log_benefit: f64,
    /// Fraction of participant-months with an infant (age ≤ 12) present.
    pub mean_infant: f64,
    pub mean_education: f64,
    pub mean_la: f64,
    /// Mean household random effect among participant-months.
    pub mean_random_effect: f64,
    pub participant_months: usize,
}

/// Outcome of one policy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub policy: PolicySpec,
    pub takeup_rate: f64,
    pub targeting: TargetingSummary,
    pub n_households: usize,
    pub horizon_months: u32,
    /// Per-household decision paths, period-major, for paired diagnostics.
    pub decisions: Vec<Vec<bool>>,
}

struct HouseholdOutcome {
    decisions: Vec<bool>,
    // Accumulators over participant months: Σ log B, Σ infant, Σ educ, Σ la, Σ q.
    sums: [f64; 5],
    participant_months: usize,
}

fn run_household(
    config: &SimConfig,
    policy: &PolicySpec,
    ts: &crate::simulator::HouseholdTypeSpec,
    household_index: usize,
) -> Result<HouseholdOutcome> {
    let spec = simulated_covariate_spec();
    // Reproduce the household's latent draws exactly as simulate_panel does.
    let mut rng = household_stream(config.seed, household_index);
    let q = normal_quantile(unit_open(&mut rng));
    let draws: Vec<(f64, f64)> = (0..config.horizon_months)
        .map(|_| (unit_open(&mut rng), unit_open(&mut rng)))
        .collect();
    // The post-exit boost is a one-off reminder: it can flip the boosted
    // month's decision but leaves the enrollment trajectory on its baseline
    // path, so it is applied as an overlay rather than through the state hook.
    let hook_policy =
        if policy.kind == PolicyKind::AttentionBoostPostExit { PolicySpec::none() } else { policy.clone() };
    let path = simulate_path(ts, config, &spec, q, &draws, |state, pa, pc| {
        apply_policy(&hook_policy, state, pa, pc)
    })?;
    let mut decisions: Vec<bool> = path.iter().map(|(obs, _, _)| obs.decision).collect();
    if policy.kind == PolicyKind::AttentionBoostPostExit {
        let base = decisions.clone();
        for t in 2..base.len() {
            if base[t - 2] && !base[t - 1] {
                let obs = &path[t].0;
                let pc =
                    choice_prob(&spec, &config.params, &obs.covariates, false, obs.recert_required, q)?;
                // Attention is forced, so only the choice draw matters.
                decisions[t] = decisions[t] || draws[t].1 < pc;
            }
        }
    }
    let mut sums = [0.0; 5];
    let mut participant_months = 0usize;
    for (&decision, (obs, _, _)) in decisions.iter().zip(&path) {
        if decision {
            participant_months += 1;
            sums[0] += obs.covariates.get("log_benefit")?;
            sums[1] += 1.0 - obs.covariates.get("no_infant")?;
            sums[2] += obs.covariates.get("education")?;
            sums[3] += obs.covariates.get("la")?;
            sums[4] += q;
        }
    }
    Ok(HouseholdOutcome { decisions, sums, participant_months })
}

fn unit_open(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Simulates the configured population under a policy, reusing the baseline
/// latent draws (common random numbers across policies for a fixed seed).
pub fn run_counterfactual(config: &SimConfig, policy: &PolicySpec) -> Result<CounterfactualReport> {
    config.validate()?;
    policy.validate()?;
    let expanded = expand_population(&config.population);
    let outcomes: Vec<HouseholdOutcome> = expanded
        .par_iter()
        .enumerate()
        .map(|(idx, ts)| run_household(config, policy, ts, idx))
        .collect::<Result<Vec<_>>>()?;

    let total_months = expanded.len() * config.horizon_months as usize;
    let mut sums = [0.0; 5];
    let mut participant_months = 0usize;
    let mut participating = 0usize;
    let mut decisions = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        participating += o.decisions.iter().filter(|&&d| d).count();
        participant_months += o.participant_months;
        for (total, s) in sums.iter_mut().zip(o.sums) {
            *total += s;
        }
        decisions.push(o.decisions);
    }
    let denom = participant_months.max(1) as f64;
    Ok(CounterfactualReport {
        policy: policy.clone(),
        takeup_rate: participating as f64 / total_months as f64,
        targeting: TargetingSummary {
            mean_log_benefit: sums[0] / denom,
            mean_infant: sums[1] / denom,
            mean_education: sums[2] / denom,
            mean_la: sums[3] / denom,
            mean_random_effect: sums[4] / denom,
            participant_months,
        },
        n_households: expanded.len(),
        horizon_months: config.horizon_months,
        decisions,
    })
}

/// One point of the nudge-intensity response curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NudgePoint {
    pub delta: f64,
    pub takeup_rate: f64,
}

/// Result of [`nudge_equivalence_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NudgeSearch {
    /// Take-up under the target policy the nudge must match.
    pub target_takeup: f64,
    pub curve: Vec<NudgePoint>,
    /// Smallest grid δ whose take-up meets or exceeds the target; `None` when
    /// the grid is exhausted.
    pub equivalent_delta: Option<f64>,
}

/// Sweeps choice-nudge intensities under common random numbers until the
/// take-up of `target_policy` is matched.
pub fn nudge_equivalence_search(
    config: &SimConfig,
    target_policy: &PolicySpec,
    delta_grid: &[f64],
) -> Result<NudgeSearch> {
    if delta_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("delta grid must be sorted ascending".into()));
    }
    let target_takeup = run_counterfactual(config, target_policy)?.takeup_rate;
    let mut curve = Vec::with_capacity(delta_grid.len());
    let mut equivalent_delta = None;
    for &delta in delta_grid {
        let takeup = run_counterfactual(config, &PolicySpec::choice_nudge(delta))?.takeup_rate;
        curve.push(NudgePoint { delta, takeup_rate: takeup });
        if equivalent_delta.is_none() && takeup >= target_takeup {
            equivalent_delta = Some(delta);
        }
    }
    Ok(NudgeSearch { target_takeup, curve, equivalent_delta })
}

/// One row of the cross-policy targeting comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingRow {
    pub policy: String,
    pub participation: f64,
    pub targeting: TargetingSummary,
}

/// Side-by-side participant-means table across policies sharing a seed and
/// population.
pub fn targeting_summary(reports: &[CounterfactualReport]) -> Vec<TargetingRow> {
    reports
        .iter()
        .map(|r| TargetingRow {
            policy: r.policy.kind.to_string(),
            participation: r.takeup_rate,
            targeting: r.targeting,
        })
        .collect()
}
