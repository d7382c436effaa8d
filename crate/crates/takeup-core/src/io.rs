//! Tabular and config I/O: panel and latents CSVs, the site retention panel,
//! and TOML config files. All writers emit deterministic output so identical
//! inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Covariates, CovariateSpec, HouseholdHistory, Observation, PanelDataset};
use crate::policy_eval::{SitePanel, SiteRecord, YEARS};
use crate::simulator::HouseholdLatents;

const PANEL_FIXED_COLUMNS: [&str; 5] = ["household_id", "period", "d", "z", "youngest_age_months"];

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::CsvParse { line, message: message.into() }
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, csv::Position::line)
}

fn parse_flag(field: &str, name: &str, line: u64) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_error(line, format!("column `{name}` must be 0 or 1, got `{other}`"))),
    }
}

/// Writes one row per household-period:
/// `household_id, period, d, z, youngest_age_months, <covariate columns>`.
pub fn write_panel_csv<W: Write>(writer: W, panel: &PanelDataset) -> Result<()> {
    let labels: Vec<&str> = panel.spec.all_labels();
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = PANEL_FIXED_COLUMNS.iter().copied().chain(labels.iter().copied()).collect();
    w.write_record(&header)?;
    for h in &panel.households {
        for obs in &h.observations {
            let mut record = vec![
                h.id.clone(),
                obs.period.to_string(),
                u8::from(obs.decision).to_string(),
                u8::from(obs.recert_required).to_string(),
                obs.youngest_age_months.map_or(String::new(), |a| a.to_string()),
            ];
            for &label in &labels {
                record.push(obs.covariates.get(label)?.to_string());
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the panel CSV format back. Rows for one household must be contiguous
/// and ordered by period; covariate columns must cover the covariate layout's labels.
pub fn read_panel_csv<R: Read>(reader: R, spec: &CovariateSpec) -> Result<PanelDataset> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let columns: Vec<&str> = header.iter().collect();
    for required in PANEL_FIXED_COLUMNS {
        if !columns.contains(&required) {
            return Err(parse_error(1, format!("missing required column `{required}`")));
        }
    }
    let covariate_columns: Vec<(usize, String)> = columns
        .iter()
        .enumerate()
        .skip(PANEL_FIXED_COLUMNS.len())
        .map(|(i, &c)| (i, c.to_string()))
        .collect();
    for label in spec.all_labels() {
        if !covariate_columns.iter().any(|(_, c)| c == label) {
            return Err(parse_error(1, format!("missing covariate column `{label}`")));
        }
    }

    let idx = |name: &str| columns.iter().position(|&c| c == name).expect("checked above");
    let (i_id, i_period, i_d, i_z, i_age) =
        (idx("household_id"), idx("period"), idx("d"), idx("z"), idx("youngest_age_months"));

    let mut order: Vec<String> = Vec::new();
    let mut by_household: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for record in r.records() {
        let record = record?;
        let line = record_line(&record);
        let expected = PANEL_FIXED_COLUMNS.len() + covariate_columns.len();
        if record.len() != expected {
            return Err(parse_error(
                line,
                format!("expected {expected} fields, got {}", record.len()),
            ));
        }
        let id = record[i_id].to_string();
        if id.is_empty() {
            return Err(parse_error(line, "empty household_id"));
        }
        let period: u32 = record[i_period]
            .parse()
            .map_err(|_| parse_error(line, format!("invalid period `{}`", &record[i_period])))?;
        let decision = parse_flag(&record[i_d], "d", line)?;
        let recert_required = parse_flag(&record[i_z], "z", line)?;
        let youngest_age_months = if record[i_age].is_empty() {
            None
        } else {
            Some(record[i_age].parse::<i32>().map_err(|_| {
                parse_error(line, format!("invalid youngest_age_months `{}`", &record[i_age]))
            })?)
        };
        let mut values = BTreeMap::new();
        for (col, label) in &covariate_columns {
            let value: f64 = record[*col].parse().map_err(|_| {
                parse_error(line, format!("invalid value `{}` in column `{label}`", &record[*col]))
            })?;
            values.insert(label.clone(), value);
        }
        if !by_household.contains_key(&id) {
            order.push(id.clone());
        }
        by_household.entry(id).or_default().push(Observation {
            period,
            covariates: Covariates::new(values),
            recert_required,
            decision,
            youngest_age_months,
        });
    }
    let mut households = Vec::with_capacity(order.len());
    for id in order {
        let observations = by_household.remove(&id).expect("id collected above");
        households.push(HouseholdHistory::new(id, observations)?);
    }
    PanelDataset::new(spec.clone(), households)
}

/// Writes the latent record: `household_id, period, q, a, c`.
pub fn write_latents_csv<W: Write>(writer: W, latents: &[HouseholdLatents]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["household_id", "period", "q", "a", "c"])?;
    for l in latents {
        for (idx, p) in l.periods.iter().enumerate() {
            w.write_record([
                l.household_id.clone(),
                (idx + 1).to_string(),
                l.q.to_string(),
                u8::from(p.attention).to_string(),
                u8::from(p.choice).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the long-format site panel: `site, year, retention, cnm, abm,
/// ebt_month`, one row per site-year.
pub fn write_site_panel_csv<W: Write>(writer: W, panel: &SitePanel) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site", "year", "retention", "cnm", "abm", "ebt_month"])?;
    for site in &panel.sites {
        for (yi, &year) in YEARS.iter().enumerate() {
            w.write_record([
                site.name.clone(),
                year.to_string(),
                site.retention[yi].to_string(),
                u8::from(site.cnm_treated).to_string(),
                u8::from(site.abm_treated).to_string(),
                site.ebt_month.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the long-format site panel. Each site needs one row per panel year;
/// treatment flags and rollout month must agree across a site's rows.
pub fn read_site_panel_csv<R: Read>(reader: R) -> Result<SitePanel> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let columns: Vec<&str> = header.iter().collect();
    let idx = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|&c| c == name)
            .ok_or_else(|| parse_error(1, format!("missing required column `{name}`")))
    };
    let (i_site, i_year, i_ret, i_cnm, i_abm, i_ebt) = (
        idx("site")?,
        idx("year")?,
        idx("retention")?,
        idx("cnm")?,
        idx("abm")?,
        idx("ebt_month")?,
    );
    struct Partial {
        cnm: bool,
        abm: bool,
        ebt_month: u32,
        retention: [Option<f64>; 3],
    }
    let mut order: Vec<String> = Vec::new();
    let mut sites: BTreeMap<String, Partial> = BTreeMap::new();
    for record in r.records() {
        let record = record?;
        let line = record_line(&record);
        let name = record[i_site].to_string();
        let year: u32 = record[i_year]
            .parse()
            .map_err(|_| parse_error(line, format!("invalid year `{}`", &record[i_year])))?;
        let yi = YEARS
            .iter()
            .position(|&y| y == year)
            .ok_or_else(|| parse_error(line, format!("year {year} not in the panel")))?;
        let retention: f64 = record[i_ret]
            .parse()
            .map_err(|_| parse_error(line, format!("invalid retention `{}`", &record[i_ret])))?;
        let cnm = parse_flag(&record[i_cnm], "cnm", line)?;
        let abm = parse_flag(&record[i_abm], "abm", line)?;
        let ebt_month: u32 = record[i_ebt]
            .parse()
            .map_err(|_| parse_error(line, format!("invalid ebt_month `{}`", &record[i_ebt])))?;
        if !sites.contains_key(&name) {
            order.push(name.clone());
            sites.insert(
                name.clone(),
                Partial { cnm, abm, ebt_month, retention: [None; 3] },
            );
        }
        let partial = sites.get_mut(&name).expect("inserted above");
        if partial.cnm != cnm || partial.abm != abm || partial.ebt_month != ebt_month {
            return Err(parse_error(
                line,
                format!("site `{name}` has inconsistent treatment flags or rollout month"),
            ));
        }
        if partial.retention[yi].is_some() {
            return Err(parse_error(line, format!("duplicate row for site `{name}`, year {year}")));
        }
        partial.retention[yi] = Some(retention);
    }
    let mut out = Vec::with_capacity(order.len());
    for name in order {
        let partial = sites.remove(&name).expect("collected above");
        let mut retention = [0.0; 3];
        for (yi, slot) in partial.retention.iter().enumerate() {
            retention[yi] = slot.ok_or_else(|| {
                Error::Validation(format!("site `{name}` is missing year {}", YEARS[yi]))
            })?;
        }
        out.push(SiteRecord {
            name,
            cnm_treated: partial.cnm,
            abm_treated: partial.abm,
            ebt_month: partial.ebt_month,
            retention,
        });
    }
    let panel = SitePanel { sites: out };
    panel.validate()?;
    Ok(panel)
}

/// Reads a TOML config file into any deserializable type, mapping syntax and
/// schema problems to configuration errors naming the file.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes any serializable value as pretty TOML.
pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text)?;
    Ok(())
}
