//! Synthetic panel generation from the structural model: the 90-type
//! counterfactual population, a two-level benefit schedule keyed on infant
//! presence, and deterministic per-household random substreams that support
//! exact replay under policy interventions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    attention_prob, choice_prob, recertification_flag, Covariates, CovariateSpec,
    HouseholdHistory, Observation, PanelDataset, ParameterSet,
};
use crate::stats::normal_quantile;

/// One point of the simulated-population grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdTypeSpec {
    /// Education level ∈ {1, 2, 3}.
    pub education: u8,
    /// Local accessibility ∈ {10, 15, 20}.
    pub la: f64,
    /// Youngest child's age in months at the first simulated period.
    pub first_child_age_months: i32,
    /// A newborn arrives at month 12, resetting the youngest age to 0.
    pub newborn_at_month_12: bool,
    pub replicates: u32,
}

/// Simulation controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon_months: u32,
    pub seed: u64,
    pub params: ParameterSet,
    pub population: Vec<HouseholdTypeSpec>,
    pub benefit_with_infant: f64,
    pub benefit_without_infant: f64,
}

impl SimConfig {
    pub fn with_defaults(params: ParameterSet, seed: u64) -> Self {
        Self {
            horizon_months: 30,
            seed,
            params,
            population: build_type_grid(),
            benefit_with_infant: 150.0,
            benefit_without_infant: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_months < 1 {
            return Err(Error::Config("simulation horizon must be >= 1 month".into()));
        }
        if self.benefit_with_infant <= 0.0 || self.benefit_without_infant <= 0.0 {
            return Err(Error::Config("benefit levels must be positive".into()));
        }
        if self.population.is_empty() {
            return Err(Error::Config("simulated population is empty".into()));
        }
        Ok(())
    }
}

/// Stored latent state for one household-period: the uniform draws that
/// produced the stage outcomes, plus the outcomes themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentPeriod {
    pub u_attention: f64,
    pub u_choice: f64,
    pub attention: bool,
    pub choice: bool,
}

/// Full latent record of one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdLatents {
    pub household_id: String,
    /// Index into the expanded population, also the RNG substream id.
    pub type_index: usize,
    pub q: f64,
    pub periods: Vec<LatentPeriod>,
}

/// A simulated panel plus everything needed to replay it exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedPanel {
    pub panel: PanelDataset,
    pub latents: Vec<HouseholdLatents>,
}

/// The covariate layout every simulated panel uses.
pub fn simulated_covariate_spec() -> CovariateSpec {
    CovariateSpec::new(
        vec!["const".into(), "log_benefit".into(), "no_infant".into(), "la".into(), "education".into()],
        vec!["const".into(), "log_benefit".into(), "no_infant".into()],
        vec!["const".into(), "la".into()],
        vec!["education".into()],
    )
    .expect("static covariate spec is valid")
}

/// The 3 × 3 × 5 × 2 = 90-type grid with five replicates each.
pub fn build_type_grid() -> Vec<HouseholdTypeSpec> {
    let mut grid = Vec::with_capacity(90);
    for education in [1u8, 2, 3] {
        for la in [10.0, 15.0, 20.0] {
            for first_child_age_months in [3, 6, 9, 12, 15] {
                for newborn_at_month_12 in [false, true] {
                    grid.push(HouseholdTypeSpec {
                        education,
                        la,
                        first_child_age_months,
                        newborn_at_month_12,
                        replicates: 5,
                    });
                }
            }
        }
    }
    grid
}

/// Monthly benefit: the infant level through age 12 months, the child level
/// after.
pub fn benefit_schedule(youngest_age_months: i32, config: &SimConfig) -> f64 {
    if (0..=12).contains(&youngest_age_months) {
        config.benefit_with_infant
    } else {
        config.benefit_without_infant
    }
}

/// Youngest child's age at a 1-based simulation month. A newborn arriving at
/// month 12 resets the age (and with it the recertification clock).
pub fn youngest_age_at(ts: &HouseholdTypeSpec, month: u32) -> i32 {
    let aged = ts.first_child_age_months + month as i32 - 1;
    if ts.newborn_at_month_12 && month >= 12 {
        month as i32 - 12
    } else {
        aged
    }
}

/// Period covariates implied by the type and the benefit schedule.
pub fn covariates_at(ts: &HouseholdTypeSpec, config: &SimConfig, youngest_age_months: i32) -> Covariates {
    let benefit = benefit_schedule(youngest_age_months, config);
    Covariates::from_pairs([
        ("const", 1.0),
        ("log_benefit", benefit.ln()),
        ("no_infant", if youngest_age_months > 12 { 1.0 } else { 0.0 }),
        ("la", ts.la),
        ("education", f64::from(ts.education)),
    ])
}

/// Everything a policy hook may condition on for one period.
#[derive(Debug, Clone, Copy)]
pub struct PeriodState {
    /// 1-based simulation month.
    pub period: u32,
    pub d_prev: bool,
    /// The household participated two periods ago and not last period.
    pub exited_last_period: bool,
    pub youngest_age_months: i32,
    pub recert_required: bool,
}

/// Walks one household's path, applying `modify` to the baseline stage
/// probabilities before thresholding the stored uniforms. The identity hook
/// reproduces the unmodified model; interventions alter probabilities, never
/// draws, which is what makes paired policy comparisons common-random-number
/// exact.
pub fn simulate_path<F>(
    ts: &HouseholdTypeSpec,
    config: &SimConfig,
    spec: &CovariateSpec,
    q: f64,
    draws: &[(f64, f64)],
    mut modify: F,
) -> Result<Vec<(Observation, bool, bool)>>
where
    F: FnMut(&PeriodState, f64, f64) -> (f64, f64),
{
    let mut out = Vec::with_capacity(draws.len());
    let mut d_prev = false;
    let mut d_prev2 = false;
    for (idx, &(u_a, u_c)) in draws.iter().enumerate() {
        let period = idx as u32 + 1;
        let age = youngest_age_at(ts, period);
        let z = recertification_flag(age, d_prev);
        let x = covariates_at(ts, config, age);
        let pa = attention_prob(spec, &config.params, &x, d_prev, q)?;
        let pc = choice_prob(spec, &config.params, &x, d_prev, z, q)?;
        let state = PeriodState {
            period,
            d_prev,
            exited_last_period: d_prev2 && !d_prev,
            youngest_age_months: age,
            recert_required: z,
        };
        let (pa, pc) = modify(&state, pa, pc);
        let a = u_a < pa;
        let c = u_c < pc;
        let d = a && c;
        out.push((
            Observation {
                period,
                covariates: x,
                recert_required: z,
                decision: d,
                youngest_age_months: Some(age),
            },
            a,
            c,
        ));
        d_prev2 = d_prev;
        d_prev = d;
    }
    Ok(out)
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// The deterministic substream for one household: master seed, stream id =
/// household index.
pub fn household_stream(seed: u64, household_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(household_index as u64);
    rng
}

/// Draws one household's latents and walks its path.
pub fn simulate_household(
    ts: &HouseholdTypeSpec,
    config: &SimConfig,
    spec: &CovariateSpec,
    household_index: usize,
) -> Result<(HouseholdHistory, HouseholdLatents)> {
    let mut rng = household_stream(config.seed, household_index);
    let q = normal_quantile(unit_open(&mut rng));
    let draws: Vec<(f64, f64)> = (0..config.horizon_months)
        .map(|_| (unit_open(&mut rng), unit_open(&mut rng)))
        .collect();
    let id = format!("h{household_index:04}");
    let path = simulate_path(ts, config, spec, q, &draws, |_, pa, pc| (pa, pc))?;
    let periods = path
        .iter()
        .zip(&draws)
        .map(|((_, a, c), &(u_attention, u_choice))| LatentPeriod {
            u_attention,
            u_choice,
            attention: *a,
            choice: *c,
        })
        .collect();
    let history =
        HouseholdHistory::new(id.clone(), path.into_iter().map(|(obs, _, _)| obs).collect())?;
    let latents = HouseholdLatents { household_id: id, type_index: household_index, q, periods };
    Ok((history, latents))
}

/// Expands the population (types × replicates) in grid order.
pub fn expand_population(population: &[HouseholdTypeSpec]) -> Vec<HouseholdTypeSpec> {
    population
        .iter()
        .flat_map(|ts| std::iter::repeat(ts.clone()).take(ts.replicates as usize))
        .collect()
}

/// Simulates the whole population. Bit-for-bit reproducible for a fixed seed
/// regardless of thread count: every household owns its substream and output
/// is assembled in population order.
pub fn simulate_panel(config: &SimConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let spec = simulated_covariate_spec();
    config.params.validate_against(&spec)?;
    let expanded = expand_population(&config.population);
    let results: Vec<(HouseholdHistory, HouseholdLatents)> = expanded
        .par_iter()
        .enumerate()
        .map(|(idx, ts)| simulate_household(ts, config, &spec, idx))
        .collect::<Result<Vec<_>>>()?;
    let (households, latents): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(SimulatedPanel { panel: PanelDataset::new(spec, households)?, latents })
}

/// Fraction of household-months with D = 1.
pub fn takeup_rate(panel: &PanelDataset) -> f64 {
    let total: usize = panel.households.iter().map(HouseholdHistory::len).sum();
    let ones: usize = panel
        .households
        .iter()
        .flat_map(|h| &h.observations)
        .filter(|o| o.decision)
        .count();
    ones as f64 / total as f64
}
