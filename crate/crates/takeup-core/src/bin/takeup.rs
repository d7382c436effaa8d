//! Command-line front end: simulation, estimation, counterfactuals,
//! probability curves, pilot-program evaluation, identification checks, and
//! benefit imputation. Every run writes a manifest so outputs can be replayed
//! byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use takeup_core::counterfactual::{
    nudge_equivalence_search, run_counterfactual, targeting_summary, PolicyKind, PolicySpec,
};
use takeup_core::identification::{
    canonical_coherent_pair, lab_params, lab_spec, lab_x, verification_report, verify_h1,
};
use takeup_core::imputation::{impute_rows, ClipBounds, ImputationRow};
use takeup_core::likelihood::{coefficient_names, fit_mle, FitConfig};
use takeup_core::model::{
    attention_prob, choice_prob, CovariateSpec, Covariates, ParameterSet,
};
use takeup_core::policy_eval::{
    event_study, permutation_test, pretrend_estimand, twfe_did, wilcoxon_rank_sum, did_estimand,
    Sidedness, SitePanel,
};
use takeup_core::simulator::{simulate_panel, simulated_covariate_spec, SimConfig};
use takeup_core::{io, Error};

#[derive(Parser)]
#[command(name = "takeup", version, about = "Two-stage attention/choice take-up model toolkit")]
struct Cli {
    /// RNG seed for subcommands that simulate.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for result files and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// TOML configuration file (schema depends on the subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on rayon worker threads (results are thread-count independent).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic household panel and write panel + latents CSVs.
    Simulate {
        /// Override the configured horizon in months.
        #[arg(long)]
        horizon: Option<u32>,
    },
    /// Fit the random-effects model to a panel CSV by maximum likelihood.
    Fit {
        /// Input panel CSV.
        #[arg(long)]
        panel: PathBuf,
        /// Covariate layout TOML; defaults to the simulator's layout.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run a policy counterfactual against the no-policy baseline.
    Counterfactual {
        /// Policy kind: none, force_attention, force_choice,
        /// attention_boost_post_exit, choice_nudge, oneshot_attention_boost.
        #[arg(long, default_value = "none")]
        policy: String,
        /// Choice-nudge intensity δ.
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Nudge age cap in months.
        #[arg(long, default_value_t = 30)]
        age_cap: i32,
        /// Also sweep choice-nudge intensities against the attention-boost
        /// take-up and write the δ-response curve.
        #[arg(long)]
        curve: bool,
        /// Largest δ on the sweep grid.
        #[arg(long, default_value_t = 0.01)]
        delta_max: f64,
        /// δ grid spacing for the sweep.
        #[arg(long, default_value_t = 0.0005)]
        delta_step: f64,
    },
    /// Tabulate attention/choice probabilities over the random effect.
    Curves {
        #[arg(long, default_value_t = -2.0)]
        qmin: f64,
        #[arg(long, default_value_t = 2.0)]
        qmax: f64,
        #[arg(long, default_value_t = 201)]
        points: usize,
        /// Previous-period enrollment state (0 or 1).
        #[arg(long, default_value_t = 0)]
        dprev: u8,
    },
    /// Pilot-program evaluation statistics on a site × year retention panel.
    PolicyEval {
        /// Use the embedded 12-site retention panel.
        #[arg(long)]
        builtin_table5: bool,
        /// Site panel CSV (site, year, retention, cnm, abm, ebt_month).
        #[arg(long, conflicts_with = "builtin_table5")]
        site_panel: Option<PathBuf>,
        /// Which test to run: cnm-did, cnm-event-study, cnm-permutation,
        /// cnm-pretrend, abm-did, abm-event-study, abm-permutation,
        /// wilcoxon, all.
        #[arg(long, default_value = "all")]
        test: String,
        /// Treatment design for wilcoxon: cnm or abm.
        #[arg(long, default_value = "cnm")]
        design: String,
    },
    /// Verify the coefficient-ratio identification formulas numerically.
    Identify {
        /// Restrict the report to one theorem (1, 2, or 3).
        #[arg(long)]
        theorem: Option<u8>,
    },
    /// LAD-impute unobserved benefit amounts in a household CSV.
    Impute {
        /// Input CSV (household_id, period, state_group, post2007, kids_u1,
        /// kids_1to5, benefit_observed, benefit_imputed).
        #[arg(long)]
        input: PathBuf,
        /// Lower clip bound on observed benefits.
        #[arg(long, default_value_t = 0.0)]
        lower: f64,
        /// Upper clip bound on observed benefits.
        #[arg(long, default_value_t = 500.0)]
        upper: f64,
    },
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    config: Option<String>,
    seed: u64,
    output_dir: String,
    version: String,
    input_digests: BTreeMap<String, String>,
}

/// Everything a subcommand needs besides its own flags.
struct Ctx {
    seed: u64,
    out: PathBuf,
    config: Option<PathBuf>,
    digests: BTreeMap<String, String>,
}

impl Ctx {
    fn digest_input(&mut self, path: &Path) -> Result<(), Error> {
        let bytes = std::fs::read(path)?;
        let hex = format!("{:x}", Sha256::digest(&bytes));
        self.digests.insert(path.display().to_string(), hex);
        Ok(())
    }

    fn read_config<T: serde::de::DeserializeOwned>(&mut self) -> Result<Option<T>, Error> {
        match self.config.clone() {
            None => Ok(None),
            Some(path) => {
                self.digest_input(&path)?;
                Ok(Some(io::read_toml(&path)?))
            }
        }
    }

    fn out_file(&self, name: &str) -> Result<BufWriter<File>, Error> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_manifest(&self, subcommand: &str) -> Result<(), Error> {
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            config: self.config.as_ref().map(|p| p.display().to_string()),
            seed: self.seed,
            output_dir: self.out.display().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            input_digests: self.digests.clone(),
        };
        io::write_toml(&self.out.join("manifest.toml"), &manifest)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        // Ignore "already initialized": tests may build the pool first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create output directory: {e}");
        return ExitCode::from(1);
    }
    let mut ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        out: cli.out,
        config: cli.config,
        digests: BTreeMap::new(),
    };
    match run(&cli.command, &mut ctx) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 = usage/input error, 2 = numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::MissingCovariate { .. }
        | Error::Config(_)
        | Error::CsvParse { .. }
        | Error::Io(_)
        | Error::Csv(_) => 1,
        Error::Underflow { .. }
        | Error::NonFiniteStart
        | Error::HessianNotNegativeDefinite { .. }
        | Error::Degenerate(_)
        | Error::RankDeficient(_) => 2,
    }
}

fn run(command: &Command, ctx: &mut Ctx) -> Result<ExitCode, Error> {
    match command {
        Command::Simulate { horizon } => cmd_simulate(ctx, *horizon),
        Command::Fit { panel, spec } => cmd_fit(ctx, panel, spec.as_deref()),
        Command::Counterfactual { policy, delta, age_cap, curve, delta_max, delta_step } => {
            cmd_counterfactual(ctx, policy, *delta, *age_cap, *curve, *delta_max, *delta_step)
        }
        Command::Curves { qmin, qmax, points, dprev } => {
            cmd_curves(ctx, *qmin, *qmax, *points, *dprev)
        }
        Command::PolicyEval { builtin_table5, site_panel, test, design } => {
            cmd_policy_eval(ctx, *builtin_table5, site_panel.as_deref(), test, design)
        }
        Command::Identify { theorem } => cmd_identify(ctx, *theorem),
        Command::Impute { input, lower, upper } => cmd_impute(ctx, input, *lower, *upper),
    }
}

fn cmd_simulate(ctx: &mut Ctx, horizon: Option<u32>) -> Result<ExitCode, Error> {
    let mut config: SimConfig = ctx
        .read_config()?
        .unwrap_or_else(|| SimConfig::with_defaults(ParameterSet::reference(), ctx.seed));
    config.seed = ctx.seed;
    if let Some(h) = horizon {
        config.horizon_months = h;
    }
    let sim = simulate_panel(&config)?;
    io::write_panel_csv(ctx.out_file("panel.csv")?, &sim.panel)?;
    io::write_latents_csv(ctx.out_file("latents.csv")?, &sim.latents)?;
    let rows: usize = sim.panel.households.iter().map(|h| h.observations.len()).sum();
    println!(
        "simulated {} households x {} months ({} rows)",
        sim.panel.households.len(),
        config.horizon_months,
        rows
    );
    ctx.write_manifest("simulate")?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit(ctx: &mut Ctx, panel_path: &Path, spec_path: Option<&Path>) -> Result<ExitCode, Error> {
    let spec: CovariateSpec = match spec_path {
        Some(p) => {
            ctx.digest_input(p)?;
            io::read_toml(p)?
        }
        None => simulated_covariate_spec(),
    };
    ctx.digest_input(panel_path)?;
    let panel = io::read_panel_csv(BufReader::new(File::open(panel_path)?), &spec)?;
    let fit_config: FitConfig = ctx.read_config()?.unwrap_or_default();
    let result = fit_mle(&panel, &fit_config)?;

    let names = coefficient_names(&spec);
    let estimates = result.params.to_flat();
    let mut table = ctx.out_file("fit_coefficients.csv")?;
    writeln!(table, "coefficient,estimate,std_error")?;
    println!("{:<24} {:>10} {:>10}", "coefficient", "estimate", "std_error");
    for ((name, est), se) in names.iter().zip(&estimates).zip(&result.standard_errors) {
        writeln!(table, "{name},{est},{se}")?;
        println!("{name:<24} {est:>10.3} {se:>10.3}");
    }
    drop(table);
    println!(
        "loglik = {:.6}, converged = {}, iterations = {}",
        result.loglik, result.converged, result.iterations
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    io::write_toml(&ctx.out.join("fit.toml"), &result)?;
    ctx.write_manifest("fit")?;
    if result.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: maximization did not converge; diagnostics written");
        Ok(ExitCode::from(2))
    }
}

fn cmd_counterfactual(
    ctx: &mut Ctx,
    policy: &str,
    delta: f64,
    age_cap: i32,
    curve: bool,
    delta_max: f64,
    delta_step: f64,
) -> Result<ExitCode, Error> {
    let mut config: SimConfig = ctx
        .read_config()?
        .unwrap_or_else(|| SimConfig::with_defaults(ParameterSet::reference(), ctx.seed));
    config.seed = ctx.seed;
    let kind: PolicyKind = policy.parse()?;
    let spec = PolicySpec { kind, nudge_delta: delta, nudge_age_cap_months: age_cap };
    spec.validate()?;

    let baseline = run_counterfactual(&config, &PolicySpec::none())?;
    let mut reports = vec![baseline];
    if kind != PolicyKind::None {
        reports.push(run_counterfactual(&config, &spec)?);
    }

    let mut takeup = ctx.out_file("takeup.csv")?;
    writeln!(takeup, "policy,takeup_rate,participant_months,n_households,horizon_months")?;
    for r in &reports {
        writeln!(
            takeup,
            "{},{},{},{},{}",
            r.policy.kind,
            r.takeup_rate,
            r.targeting.participant_months,
            r.n_households,
            r.horizon_months
        )?;
        println!("{}: take-up = {:.4}", r.policy.kind, r.takeup_rate);
    }
    drop(takeup);

    let mut targeting = ctx.out_file("targeting.csv")?;
    writeln!(
        targeting,
        "policy,participation,mean_log_benefit,mean_infant,mean_education,mean_la,mean_random_effect"
    )?;
    for row in targeting_summary(&reports) {
        writeln!(
            targeting,
            "{},{},{},{},{},{},{}",
            row.policy,
            row.participation,
            row.targeting.mean_log_benefit,
            row.targeting.mean_infant,
            row.targeting.mean_education,
            row.targeting.mean_la,
            row.targeting.mean_random_effect
        )?;
    }
    drop(targeting);

    if curve {
        let n_steps = (delta_max / delta_step).round() as usize;
        let grid: Vec<f64> = (0..=n_steps).map(|i| i as f64 * delta_step).collect();
        let target = PolicySpec::new(PolicyKind::AttentionBoostPostExit);
        let search = nudge_equivalence_search(&config, &target, &grid)?;
        let mut out = ctx.out_file("nudge_curve.csv")?;
        writeln!(out, "delta,takeup")?;
        for point in &search.curve {
            writeln!(out, "{},{}", point.delta, point.takeup_rate)?;
        }
        drop(out);
        println!("attention-boost take-up = {:.4}", search.target_takeup);
        match search.equivalent_delta {
            Some(d) => println!("equivalent nudge delta = {d}"),
            None => println!("equivalent nudge delta not reached on the grid"),
        }
    }
    ctx.write_manifest("counterfactual")?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_curves(
    ctx: &mut Ctx,
    qmin: f64,
    qmax: f64,
    points: usize,
    dprev: u8,
) -> Result<ExitCode, Error> {
    if !qmin.is_finite() || !qmax.is_finite() || qmin >= qmax {
        return Err(Error::Config("q range must be finite with qmin < qmax".into()));
    }
    if points < 2 {
        return Err(Error::Config("q grid needs at least two points".into()));
    }
    if dprev > 1 {
        return Err(Error::Config("dprev must be 0 or 1".into()));
    }
    let params: ParameterSet = ctx.read_config()?.unwrap_or_else(ParameterSet::reference);
    let spec = simulated_covariate_spec();
    // Baseline household: $150 benefit, infant present, LA 15, education 2.
    let x = Covariates::from_pairs([
        ("const", 1.0),
        ("log_benefit", 150.0f64.ln()),
        ("no_infant", 0.0),
        ("la", 15.0),
        ("education", 2.0),
    ]);
    let d_prev = dprev == 1;
    let mut out = ctx.out_file("curves.csv")?;
    writeln!(out, "q,p_attention,p_choice_nohassle,p_choice_hassle")?;
    let step = (qmax - qmin) / (points - 1) as f64;
    for i in 0..points {
        let q = qmin + i as f64 * step;
        let pa = attention_prob(&spec, &params, &x, d_prev, q)?;
        // S = 0 requires d_prev = 1 with no recertification; S = 1 otherwise.
        let pc_nohassle = choice_prob(&spec, &params, &x, true, false, q)?;
        let pc_hassle = choice_prob(&spec, &params, &x, false, false, q)?;
        writeln!(out, "{q},{pa},{pc_nohassle},{pc_hassle}")?;
    }
    drop(out);
    println!("wrote {points} rows over q in [{qmin}, {qmax}]");
    ctx.write_manifest("curves")?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_policy_eval(
    ctx: &mut Ctx,
    builtin: bool,
    site_panel: Option<&Path>,
    test: &str,
    design: &str,
) -> Result<ExitCode, Error> {
    let panel = match (builtin, site_panel) {
        (true, _) | (false, None) => SitePanel::builtin(),
        (false, Some(path)) => {
            ctx.digest_input(path)?;
            io::read_site_panel_csv(BufReader::new(File::open(path)?))?
        }
    };
    panel.validate()?;

    let assignment_for = |d: &str| -> Result<Vec<bool>, Error> {
        match d {
            "cnm" => Ok(panel.cnm_assignment()),
            "abm" => Ok(panel.abm_assignment()),
            other => Err(Error::Config(format!("unknown design `{other}`"))),
        }
    };

    let run_did = |d: &str| -> Result<(), Error> {
        let reg = twfe_did(&panel, &assignment_for(d)?)?;
        let (b, se) = (reg.coefficient("did_2017").unwrap(), reg.se("did_2017").unwrap());
        println!("{d} did: coefficient = {b:.3} (se {se:.3}), n = {}, clusters = {}", reg.n_obs, reg.n_clusters);
        Ok(())
    };
    let run_event = |d: &str| -> Result<(), Error> {
        let reg = event_study(&panel, &assignment_for(d)?)?;
        for label in ["pre_2015", "post_2017"] {
            let (b, se) = (reg.coefficient(label).unwrap(), reg.se(label).unwrap());
            println!("{d} event study {label}: coefficient = {b:.3} (se {se:.3})");
        }
        Ok(())
    };
    let run_permutation = |d: &str| -> Result<(), Error> {
        let assignment = assignment_for(d)?;
        for base_year in [2015u32, 2016] {
            let result = permutation_test(
                &panel,
                &assignment,
                |p, a| did_estimand(p, a, 2017, base_year),
                Sidedness::Greater,
            )?;
            println!(
                "{d} permutation did(2017-{base_year}): statistic = {:.3}, rank {} of {}, p = {}/{} = {:.4}",
                result.actual_statistic,
                result.rank,
                result.distribution.len(),
                result.rank,
                result.distribution.len(),
                result.p_value
            );
        }
        Ok(())
    };
    let run_pretrend = |d: &str| -> Result<(), Error> {
        let assignment = assignment_for(d)?;
        let result = permutation_test(&panel, &assignment, pretrend_estimand, Sidedness::Less)?;
        println!(
            "{d} pretrend permutation: statistic = {:.3}, p = {}/{} = {:.4}",
            result.actual_statistic,
            result.rank,
            result.distribution.len(),
            result.p_value
        );
        Ok(())
    };
    let run_wilcoxon = |d: &str| -> Result<(), Error> {
        let assignment = assignment_for(d)?;
        let months = panel.ebt_months();
        let (mut treated, mut control) = (Vec::new(), Vec::new());
        for (&m, &t) in months.iter().zip(&assignment) {
            if t {
                treated.push(m);
            } else {
                control.push(m);
            }
        }
        let result = wilcoxon_rank_sum(&treated, &control, Sidedness::TwoSided)?;
        println!(
            "{d} wilcoxon rollout months: W = {}, p = {:.4} ({})",
            result.w,
            result.p_value,
            if result.exact { "exact" } else { "normal approximation" }
        );
        Ok(())
    };

    match test {
        "cnm-did" => run_did("cnm")?,
        "abm-did" => run_did("abm")?,
        "cnm-event-study" => run_event("cnm")?,
        "abm-event-study" => run_event("abm")?,
        "cnm-permutation" => run_permutation("cnm")?,
        "abm-permutation" => run_permutation("abm")?,
        "cnm-pretrend" => run_pretrend("cnm")?,
        "abm-pretrend" => run_pretrend("abm")?,
        "wilcoxon" => run_wilcoxon(design)?,
        "all" => {
            for d in ["cnm", "abm"] {
                run_did(d)?;
                run_event(d)?;
                run_permutation(d)?;
                run_pretrend(d)?;
                run_wilcoxon(d)?;
            }
        }
        other => return Err(Error::Config(format!("unknown test `{other}`"))),
    }
    ctx.write_manifest("policy-eval")?;
    Ok(ExitCode::SUCCESS)
}

/// TOML schema for `identify`: the covariate layout, the coefficients, and the
/// evaluation cell.
#[derive(Debug, Serialize, Deserialize)]
struct IdentifyConfig {
    spec: CovariateSpec,
    params: ParameterSet,
    cell: Covariates,
}

fn cmd_identify(ctx: &mut Ctx, theorem: Option<u8>) -> Result<ExitCode, Error> {
    let config: IdentifyConfig = ctx.read_config()?.unwrap_or_else(|| IdentifyConfig {
        spec: lab_spec(),
        params: lab_params(),
        cell: lab_x(),
    });
    let filter = match theorem {
        None => None,
        Some(t @ 1..=3) => Some(format!("theorem{t}")),
        Some(t) => return Err(Error::Config(format!("unknown theorem `{t}`"))),
    };
    let rows = verification_report(&config.spec, &config.params, &config.cell)?;
    let mut out = ctx.out_file("identification.csv")?;
    writeln!(out, "theorem,omega,true_ratio,estimated_ratio,abs_error")?;
    let mut worst: f64 = 0.0;
    for row in rows.iter().filter(|r| filter.as_deref().is_none_or(|f| f == r.theorem)) {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.theorem, row.omega, row.true_ratio, row.estimated_ratio, row.abs_error
        )?;
        println!(
            "{} {}: true = {:.4}, estimated = {:.4}, |error| = {:.2e}",
            row.theorem, row.omega, row.true_ratio, row.estimated_ratio, row.abs_error
        );
        worst = worst.max(row.abs_error);
    }
    drop(out);
    let h1 = verify_h1(&config.spec, &config.params, &config.cell, &canonical_coherent_pair())?;
    println!(
        "h1 coherent-pair check: residual = {h1:.2e} ({})",
        if h1 < 1e-8 { "pass" } else { "FAIL" }
    );
    println!("worst ratio error = {worst:.2e}");
    ctx.write_manifest("identify")?;
    if h1 < 1e-8 {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_impute(ctx: &mut Ctx, input: &Path, lower: f64, upper: f64) -> Result<ExitCode, Error> {
    ctx.digest_input(input)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(input)?));
    let mut rows: Vec<ImputationRow> = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    let bounds = ClipBounds { lower, upper };
    let fit = impute_rows(&mut rows, bounds)?;
    let mut writer = csv::Writer::from_writer(ctx.out_file("imputed.csv")?);
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    for (label, value) in fit.labels.iter().zip(&fit.coefficients) {
        println!("{label:<12} {value:>10.4}");
    }
    println!(
        "imputed {} rows ({} iterations, converged = {})",
        rows.len(),
        fit.iterations,
        fit.converged
    );
    ctx.write_manifest("impute")?;
    Ok(ExitCode::SUCCESS)
}
