//! Pilot-program evaluation statistics over a 12-site × 3-year retention
//! panel: exhaustive-permutation difference-in-differences tests, canonical
//! DiD and event-study regressions with cluster-robust errors, and the
//! Wilcoxon rank-sum test on EBT rollout timing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_cdf;

pub const YEARS: [u32; 3] = [2015, 2016, 2017];

/// One site row of the retention panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub name: String,
    pub cnm_treated: bool,
    pub abm_treated: bool,
    /// EBT rollout month, counted from January 2015 = 1.
    pub ebt_month: u32,
    /// Retention rates (percent) for 2015, 2016, 2017.
    pub retention: [f64; 3],
}

/// The site × year retention panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePanel {
    pub sites: Vec<SiteRecord>,
}

impl SitePanel {
    /// The embedded 12-site Vermont retention panel with the pilot-program
    /// treatment assignments and EBT rollout months.
    pub fn builtin() -> Self {
        let rows: [(&str, bool, bool, u32, [f64; 3]); 12] = [
            ("Rutland", false, false, 6, [69.9, 65.9, 59.2]),
            ("Springfield", true, true, 10, [66.9, 62.5, 64.7]),
            ("Bennington", false, false, 10, [74.8, 73.7, 63.3]),
            ("White River", true, false, 11, [70.8, 63.3, 66.3]),
            ("Brattleboro", true, false, 11, [72.6, 70.3, 67.6]),
            ("St. Johnsbury", false, true, 12, [79.9, 77.3, 70.0]),
            ("Newport", false, false, 13, [81.5, 73.7, 59.4]),
            ("Morrisville", false, true, 13, [83.8, 84.3, 77.9]),
            ("St. Albans", false, false, 14, [73.2, 70.4, 59.0]),
            ("Burlington", true, false, 14, [68.1, 62.6, 62.3]),
            ("Middlebury", false, true, 15, [84.0, 79.7, 72.4]),
            ("Barre", true, false, 15, [66.8, 61.4, 61.9]),
        ];
        Self {
            sites: rows
                .into_iter()
                .map(|(name, cnm_treated, abm_treated, ebt_month, retention)| SiteRecord {
                    name: name.to_string(),
                    cnm_treated,
                    abm_treated,
                    ebt_month,
                    retention,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Validation("site panel is empty".into()));
        }
        for s in &self.sites {
            for r in s.retention {
                if !(0.0..=100.0).contains(&r) {
                    return Err(Error::Validation(format!(
                        "site `{}` retention {r} outside [0, 100]",
                        s.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn cnm_assignment(&self) -> Vec<bool> {
        self.sites.iter().map(|s| s.cnm_treated).collect()
    }

    pub fn abm_assignment(&self) -> Vec<bool> {
        self.sites.iter().map(|s| s.abm_treated).collect()
    }

    pub fn ebt_months(&self) -> Vec<f64> {
        self.sites.iter().map(|s| f64::from(s.ebt_month)).collect()
    }

    fn year_index(year: u32) -> Result<usize> {
        YEARS
            .iter()
            .position(|&y| y == year)
            .ok_or_else(|| Error::Validation(format!("year {year} not in the panel")))
    }
}

/// The embedded retention fixture.
pub fn load_table5() -> SitePanel {
    SitePanel::builtin()
}

/// Mean treated (RR_post − RR_base) minus mean control (RR_post − RR_base).
pub fn did_estimand(
    panel: &SitePanel,
    assignment: &[bool],
    post_year: u32,
    base_year: u32,
) -> Result<f64> {
    panel.validate()?;
    if assignment.len() != panel.n_sites() {
        return Err(Error::Validation("assignment length does not match the panel".into()));
    }
    let post = SitePanel::year_index(post_year)?;
    let base = SitePanel::year_index(base_year)?;
    let (mut treated_sum, mut treated_n) = (0.0, 0usize);
    let (mut control_sum, mut control_n) = (0.0, 0usize);
    for (site, &t) in panel.sites.iter().zip(assignment) {
        let diff = site.retention[post] - site.retention[base];
        if t {
            treated_sum += diff;
            treated_n += 1;
        } else {
            control_sum += diff;
            control_n += 1;
        }
    }
    if treated_n == 0 || control_n == 0 {
        return Err(Error::Degenerate("assignment leaves a group empty".into()));
    }
    Ok(treated_sum / treated_n as f64 - control_sum / control_n as f64)
}

/// The pre-intervention trend contrast: DiD of (2016 − 2015).
pub fn pretrend_estimand(panel: &SitePanel, assignment: &[bool]) -> Result<f64> {
    did_estimand(panel, assignment, 2016, 2015)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// Extreme = large positive statistics.
    Greater,
    /// Extreme = large negative statistics.
    Less,
    TwoSided,
}

/// Result of an exhaustive permutation test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub actual_statistic: f64,
    /// Statistics of all C(n, k) assignments, in enumeration order.
    pub distribution: Vec<f64>,
    /// 1 = most extreme in the tested direction.
    pub rank: usize,
    pub p_value: f64,
    pub sidedness: Sidedness,
}

fn assignments(n_sites: usize, treated_count: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n_sites) {
        if mask.count_ones() as usize == treated_count {
            out.push((0..n_sites).map(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

/// Enumerates every assignment with the actual treated count and ranks the
/// actual statistic. One-sided p = rank/size; two-sided doubles the smaller
/// tail fraction (capped at 1).
pub fn permutation_test<F>(
    panel: &SitePanel,
    actual_assignment: &[bool],
    statistic: F,
    sidedness: Sidedness,
) -> Result<PermutationResult>
where
    F: Fn(&SitePanel, &[bool]) -> Result<f64> + Sync,
{
    let treated_count = actual_assignment.iter().filter(|&&t| t).count();
    if treated_count == 0 || treated_count == panel.n_sites() {
        return Err(Error::Degenerate("assignment leaves a group empty".into()));
    }
    let actual = statistic(panel, actual_assignment)?;
    let all = assignments(panel.n_sites(), treated_count);
    let distribution = all
        .iter()
        .map(|a| statistic(panel, a))
        .collect::<Result<Vec<f64>>>()?;
    let size = distribution.len();
    let ge = distribution.iter().filter(|&&s| s >= actual).count();
    let le = distribution.iter().filter(|&&s| s <= actual).count();
    let (rank, p_value) = match sidedness {
        Sidedness::Greater => (ge, ge as f64 / size as f64),
        Sidedness::Less => (le, le as f64 / size as f64),
        Sidedness::TwoSided => {
            let frac = 2.0 * (ge.min(le) as f64 / size as f64);
            (ge.min(le), frac.min(1.0))
        }
    };
    Ok(PermutationResult { actual_statistic: actual, distribution, rank, p_value, sidedness })
}

/// A least-squares fit with cluster-robust standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub cluster_se: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
}

impl RegressionResult {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.coefficients[i])
    }

    pub fn se(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.cluster_se[i])
    }
}

struct RegRow {
    cluster: usize,
    y: f64,
    x: Vec<f64>,
}

/// OLS with CR1 cluster-robust covariance:
/// V = c (X'X)⁻¹ [Σ_g X_g' u_g u_g' X_g] (X'X)⁻¹,
/// c = G/(G−1) · (N−1)/(N−K).
fn ols_cluster(rows: &[RegRow], labels: Vec<String>, n_clusters: usize) -> Result<RegressionResult> {
    let n = rows.len();
    let k = labels.len();
    let x = DMatrix::from_fn(n, k, |i, j| rows[i].x[j]);
    let y = DVector::from_fn(n, |i, _| rows[i].y);
    let xtx = x.transpose() * &x;
    let svd = xtx.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        // Name the columns spanning the null space.
        let v = svd.v_t.as_ref().expect("svd computed with v_t");
        let null_idx = svd
            .singular_values
            .iter()
            .position(|&s| s <= 1e-10 * smax)
            .unwrap_or(k - 1);
        let offenders: Vec<&str> = (0..k)
            .filter(|&j| v[(null_idx, j)].abs() > 1e-6)
            .map(|j| labels[j].as_str())
            .collect();
        return Err(Error::RankDeficient(format!(
            "collinear columns: {}",
            offenders.join(", ")
        )));
    }
    let xtx_inv = xtx.try_inverse().expect("full-rank Gram matrix inverts");
    let beta = &xtx_inv * (x.transpose() * &y);
    let resid = &y - &x * &beta;

    let mut meat = DMatrix::<f64>::zeros(k, k);
    for g in 0..n_clusters {
        let mut score = DVector::<f64>::zeros(k);
        for (i, row) in rows.iter().enumerate() {
            if row.cluster == g {
                for j in 0..k {
                    score[j] += x[(i, j)] * resid[i];
                }
            }
        }
        meat += &score * score.transpose();
    }
    let g = n_clusters as f64;
    let c = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - k as f64);
    let cov = &xtx_inv * meat * &xtx_inv * c;
    let cluster_se = (0..k).map(|j| cov[(j, j)].sqrt()).collect();
    Ok(RegressionResult {
        labels,
        coefficients: beta.iter().copied().collect(),
        cluster_se,
        n_obs: n,
        n_clusters,
    })
}

/// Builds the pooled regression design: intercept, treated-group dummy, the
/// listed year dummies, and a treated × year interaction per dummy year.
/// The canonical DiD uses a single 2017 dummy (pre years pooled into the
/// intercept); the event study uses 2015 and 2017 dummies with 2016 as the
/// omitted reference year.
fn panel_rows(
    panel: &SitePanel,
    assignment: &[bool],
    interactions: &[(u32, &str)],
) -> Result<(Vec<RegRow>, Vec<String>)> {
    panel.validate()?;
    if assignment.len() != panel.n_sites() {
        return Err(Error::Validation("assignment length does not match the panel".into()));
    }
    let n_sites = panel.n_sites();
    let mut labels: Vec<String> = vec!["const".into(), "treated".into()];
    for (year, _) in interactions {
        labels.push(format!("year:{year}"));
    }
    for (_, name) in interactions {
        labels.push((*name).to_string());
    }
    let k = labels.len();
    let base = 2 + interactions.len();
    let mut rows = Vec::with_capacity(n_sites * YEARS.len());
    for (i, site) in panel.sites.iter().enumerate() {
        for (yi, &year) in YEARS.iter().enumerate() {
            let mut x = vec![0.0; k];
            x[0] = 1.0;
            x[1] = f64::from(assignment[i]);
            for (j, (int_year, _)) in interactions.iter().enumerate() {
                if year == *int_year {
                    x[2 + j] = 1.0;
                    if assignment[i] {
                        x[base + j] = 1.0;
                    }
                }
            }
            rows.push(RegRow { cluster: i, y: site.retention[yi], x });
        }
    }
    Ok((rows, labels))
}

/// Canonical DiD: treated-group and 2017-year effects plus a
/// 1{t = 2017} × treated interaction, clustered by site. Both pre years load
/// on the intercept, so β equals the treated-vs-control contrast of 2017
/// against the pre-period mean.
pub fn twfe_did(panel: &SitePanel, assignment: &[bool]) -> Result<RegressionResult> {
    let (rows, labels) = panel_rows(panel, assignment, &[(2017, "did_2017")])?;
    ols_cluster(&rows, labels, panel.n_sites())
}

/// Event study with 2016 as the omitted reference year: separate
/// 1{t = 2015} × treated and 1{t = 2017} × treated interactions.
pub fn event_study(panel: &SitePanel, assignment: &[bool]) -> Result<RegressionResult> {
    let (rows, labels) = panel_rows(panel, assignment, &[(2015, "pre_2015"), (2017, "post_2017")])?;
    ols_cluster(&rows, labels, panel.n_sites())
}

/// Midranks for a value vector (average rank over ties).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon rank-sum outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank-sum of the first (treated) group, with midranks for ties.
    pub w: f64,
    pub p_value: f64,
    pub sidedness: Sidedness,
    /// Whether the null distribution was enumerated exactly.
    pub exact: bool,
}

/// Rank-sum test of two samples. Exact enumeration of all C(n, n₁) rank
/// assignments when n ≤ `EXACT_LIMIT`; tie-corrected normal approximation
/// with continuity correction otherwise.
pub fn wilcoxon_rank_sum(treated: &[f64], control: &[f64], sidedness: Sidedness) -> Result<WilcoxonResult> {
    const EXACT_LIMIT: usize = 20;
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Validation("both groups must be non-empty".into()));
    }
    let n1 = treated.len();
    let n = n1 + control.len();
    let combined: Vec<f64> = treated.iter().chain(control).copied().collect();
    if combined.iter().all(|&v| v == combined[0]) {
        return Err(Error::Degenerate("all values tied; rank-sum variance is zero".into()));
    }
    let ranks = midranks(&combined);
    let w: f64 = ranks[..n1].iter().sum();

    if n <= EXACT_LIMIT {
        // Exact: every subset of size n1 of the midranks is equally likely.
        let (mut ge, mut le, mut total) = (0usize, 0usize, 0usize);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let ws: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            total += 1;
            // Tolerate midrank float noise.
            if ws >= w - 1e-9 {
                ge += 1;
            }
            if ws <= w + 1e-9 {
                le += 1;
            }
        }
        let size = total as f64;
        let p_value = match sidedness {
            Sidedness::Greater => ge as f64 / size,
            Sidedness::Less => le as f64 / size,
            Sidedness::TwoSided => (2.0 * (ge.min(le) as f64) / size).min(1.0),
        };
        return Ok(WilcoxonResult { w, p_value, sidedness, exact: true });
    }

    // Normal approximation with tie-corrected variance.
    let n2 = (n - n1) as f64;
    let n1f = n1 as f64;
    let nf = n as f64;
    let mean = n1f * (nf + 1.0) / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = combined.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1f * n2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let z = |shift: f64| (w - mean + shift) / var.sqrt();
    let p_value = match sidedness {
        Sidedness::Greater => 1.0 - normal_cdf(z(-0.5)),
        Sidedness::Less => normal_cdf(z(0.5)),
        Sidedness::TwoSided => {
            let upper = 1.0 - normal_cdf(z(-0.5));
            let lower = normal_cdf(z(0.5));
            (2.0 * upper.min(lower)).min(1.0)
        }
    };
    Ok(WilcoxonResult { w, p_value, sidedness, exact: false })
}
