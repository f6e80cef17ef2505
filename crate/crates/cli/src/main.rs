//! Command-line front end.
//!
//! Exit codes: 0 when every verdict passes, 1 when a check fails, 2 for
//! usage, schema or input errors, 3 for internal errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtplab::balancing::{blocking_pairs, extra_head_demo, stable_transport, verify_balancing};
use mtplab::canon::{canonical_hash_with, CanonConfig};
use mtplab::ensemble::RootedEnsemble;
use mtplab::experiment::{parse_transports, run_experiment, ExperimentConfig};
use mtplab::ghp::{ghp_upper, scaling_cauchy_demo, GhpOptions, ScalingModel, ScalingRule};
use mtplab::models::{build_exact, ModelSpec, Rooting};
use mtplab::observable::Observable;
use mtplab::palm::{campbell_check, exchange_check, intensity, palm_ensemble_exact, palm_inversion_check, palm_mtp_check};
use mtplab::process::{palm_of_poisson_check, DecorationRecipe, Functional, NamedRecipe};
use mtplab::report::MtpReport;
use mtplab::seed::derive;
use mtplab::space::{validate, FiniteRmmSpace, MeasureRef};
use mtplab::transport::{mtp_check_exact_wrt, Builtin, TransportFunction};
use mtplab::walks::{
    ergodic_average, kernel_from_transport, reversibility_check, simulate_two_sided, simulate_walk, speed_estimate,
};
use mtplab::{Error, Result};

#[derive(Parser)]
#[command(name = "mtplab", version, about = "Mass transport, Palm calculus and related checks on finite rooted spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate or hash a space file.
    #[command(subcommand)]
    Space(SpaceCmd),
    /// Build exact ensembles.
    #[command(subcommand)]
    Ensemble(EnsembleCmd),
    /// Mass transport checks.
    #[command(subcommand)]
    Mtp(MtpCmd),
    /// Intensities, Palm laws and Palm identities.
    #[command(subcommand)]
    Palm(PalmCmd),
    /// Random walks driven by a balancing kernel.
    #[command(subcommand)]
    Walk(WalkCmd),
    /// Stable balancing transports.
    #[command(subcommand)]
    Balance(BalanceCmd),
    /// Gromov-Hausdorff-Prokhorov surrogate distance.
    #[command(subcommand)]
    Ghp(GhpCmd),
    /// Run an experiment configuration.
    Run {
        config: PathBuf,
        /// Write the JSON report here (overrides the configuration).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SpaceCmd {
    /// List invariant violations; exits 1 when there are any.
    Validate { file: PathBuf },
    /// Canonical isomorphism-class digest.
    Hash {
        file: PathBuf,
        #[arg(long, default_value_t = 12)]
        cap: usize,
        #[arg(long, default_value_t = 1e-9)]
        grid: f64,
    },
}

/// Law of the rooted space, read from a file or assembled from model flags.
#[derive(Args, Clone)]
struct LawArgs {
    /// Ensemble JSON file.
    #[arg(long, conflicts_with_all = ["spec", "model"])]
    ensemble: Option<PathBuf>,
    /// Model description JSON file.
    #[arg(long, conflicts_with = "model")]
    spec: Option<PathBuf>,
    /// Model name: cycle, path, torus_grid, star, petersen, custom_file.
    #[arg(long)]
    model: Option<String>,
    /// Size parameters, comma separated.
    #[arg(long, value_delimiter = ',')]
    size: Vec<usize>,
    /// uniform, quasi_transitive, class_uniform or fixed:<j>.
    #[arg(long, default_value = "uniform")]
    rooting: String,
    /// Decoration recipe `name=bernoulli:p`, `name=poisson:c`, `name=marks`
    /// or `name=fixed:i,j,...`; repeatable.
    #[arg(long = "recipe")]
    recipes: Vec<String>,
    /// Space file for `--model custom_file`.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EnsembleCmd {
    /// Exact (enumerated) law as JSON.
    Build {
        #[command(flatten)]
        law: LawArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MtpCmd {
    /// Exact check for each transport function.
    Check {
        #[command(flatten)]
        law: LawArgs,
        /// Transport functions; `battery` and `decorated:<name>` expand.
        #[arg(long = "transport", default_value = "battery")]
        transports: Vec<String>,
        /// Measure to integrate against.
        #[arg(long, default_value = "mu")]
        measure: String,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// CSV table `check,lhs,rhs,abs_diff,verdict`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct PalmArgs {
    #[command(flatten)]
    law: LawArgs,
    #[arg(long, default_value = "phi")]
    phi: String,
    /// Balancing kernel.
    #[arg(long, default_value = "balanced_h")]
    h: String,
}

#[derive(Subcommand)]
enum PalmCmd {
    Intensity {
        #[command(flatten)]
        palm: PalmArgs,
    },
    /// Exact Palm law as ensemble JSON.
    Construct {
        #[command(flatten)]
        palm: PalmArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    CheckCampbell {
        #[command(flatten)]
        palm: PalmArgs,
        #[arg(long = "transport", default_value = "battery")]
        transports: Vec<String>,
    },
    CheckExchange {
        #[command(flatten)]
        palm: PalmArgs,
        #[arg(long)]
        psi: String,
        #[arg(long = "transport", default_value = "battery")]
        transports: Vec<String>,
    },
    /// MTP under the Palm law with integrals against phi.
    CheckMtp {
        #[command(flatten)]
        palm: PalmArgs,
        #[arg(long = "transport", default_value = "battery")]
        transports: Vec<String>,
    },
    CheckInversion {
        #[command(flatten)]
        palm: PalmArgs,
    },
    /// Two-sided Monte-Carlo check for a Poisson process of intensity c mu.
    OfPoisson {
        #[command(flatten)]
        law: LawArgs,
        #[arg(long)]
        c: f64,
        #[arg(long, default_value = "balanced_h")]
        h: String,
        #[arg(long = "functional", default_value = "at_root:phi")]
        functionals: Vec<String>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum WalkCmd {
    /// Two-sided trajectory CSV `step,point`.
    Simulate {
        space: PathBuf,
        #[arg(long, default_value = "balanced_h")]
        h: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    CheckReversibility {
        #[command(flatten)]
        law: LawArgs,
        #[arg(long, default_value = "balanced_h")]
        h: String,
        #[arg(long = "transport", default_value = "battery")]
        transports: Vec<String>,
    },
    /// Speed `d(o, x_n) / n` over independent walks on one space.
    Speed {
        space: PathBuf,
        #[arg(long, default_value = "balanced_h")]
        h: String,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    ErgodicAverage {
        space: PathBuf,
        #[arg(long, default_value = "balanced_h")]
        h: String,
        #[arg(long, default_value = "degree")]
        functional: String,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BalanceCmd {
    /// Stable balancing density; CSV `row,col,value` with residual footer.
    Stable {
        space: PathBuf,
        #[arg(long)]
        phi: String,
        #[arg(long)]
        psi: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Marginal residuals and exhaustive blocking-pair scan.
    Verify {
        space: PathBuf,
        #[arg(long)]
        phi: String,
        #[arg(long)]
        psi: String,
    },
    ExtraHead {
        space: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value = "balanced_h")]
        h: String,
        #[arg(long = "functional", default_value = "degree")]
        functionals: Vec<String>,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum GhpCmd {
    /// Bound and witness correspondence.
    Dist {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = mtplab::ghp::DEFAULT_BUDGET)]
        budget: u64,
        #[arg(long, default_value_t = mtplab::ghp::DEFAULT_GRID)]
        grid: f64,
    },
    /// CSV `n,next,distance,exhaustive,budget_exhausted`.
    ScalingDemo {
        #[arg(long, default_value = "path")]
        model: String,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        sizes: Vec<usize>,
        #[arg(long, default_value = "linear")]
        rule: String,
        #[arg(long, default_value_t = mtplab::ghp::DEFAULT_BUDGET)]
        budget: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::InvalidParameter(_)
        | Error::UnknownModel(_)
        | Error::UnknownTransport(_)
        | Error::InvalidSpace(_)
        | Error::MissingDecoration(_)
        | Error::DecorationKind { .. } => 2,
        _ => 3,
    }
}

fn parse_recipe(s: &str) -> Result<NamedRecipe> {
    let bad = || Error::InvalidParameter(format!("cannot parse recipe {s:?}"));
    let (name, body) = s.split_once('=').ok_or_else(bad)?;
    let (kind, arg) = body.split_once(':').unwrap_or((body, ""));
    let num = || arg.parse::<f64>().map_err(|_| bad());
    let recipe = match kind {
        "bernoulli" => DecorationRecipe::Bernoulli { p: num()? },
        "poisson" => DecorationRecipe::Poisson { c: num()? },
        "marks" => DecorationRecipe::MarksUniform,
        "fixed" => DecorationRecipe::FixedSubset {
            points: arg
                .split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        },
        _ => return Err(bad()),
    };
    let r = NamedRecipe::new(name, recipe);
    r.validate()?;
    Ok(r)
}

fn parse_rooting(s: &str) -> Result<Rooting> {
    match s {
        "uniform" => Ok(Rooting::Uniform),
        "quasi_transitive" => Ok(Rooting::QuasiTransitive),
        "class_uniform" => Ok(Rooting::ClassUniform),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|j| j.parse().ok())
            .map(Rooting::Fixed)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown rooting {s:?}"))),
    }
}

impl LawArgs {
    fn spec(&self) -> Result<ModelSpec> {
        if let Some(p) = &self.spec {
            let text = std::fs::read_to_string(p)?;
            return serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()));
        }
        let model = self
            .model
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("give --ensemble, --spec or --model".into()))?;
        let mut spec = ModelSpec::new(model, &self.size).with_rooting(parse_rooting(&self.rooting)?);
        spec.file = self.file.clone();
        for r in &self.recipes {
            spec = spec.with_recipe(parse_recipe(r)?);
        }
        Ok(spec)
    }

    fn exact(&self) -> Result<RootedEnsemble> {
        match &self.ensemble {
            Some(p) => RootedEnsemble::load(p),
            None => build_exact(&self.spec()?),
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit(reports: &[MtpReport]) -> Result<u8> {
    println!("{}", serde_json::to_string_pretty(reports)?);
    Ok(if reports.iter().all(MtpReport::passed) { 0 } else { 1 })
}

fn reports_csv(reports: &[MtpReport]) -> String {
    let mut out = String::from("check,lhs,rhs,abs_diff,verdict\n");
    for r in reports {
        let verdict = if r.passed() { "pass" } else { "fail" };
        out.push_str(&format!("{},{:e},{:e},{:e},{verdict}\n", r.check, r.lhs, r.rhs, r.abs_diff));
    }
    out
}

fn observables(names: &[String]) -> Result<Vec<Observable>> {
    names.iter().map(|n| n.parse()).collect()
}

fn functionals(obs: &[Observable]) -> Vec<(String, Box<Functional<'_>>)> {
    obs.iter()
        .map(|o| (o.to_string(), Box::new(move |s: &FiniteRmmSpace| o.eval_or_nan(s)) as Box<Functional<'_>>))
        .collect()
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Space(SpaceCmd::Validate { file }) => {
            let text = std::fs::read_to_string(&file)?;
            let raw: mtplab::space::SpaceFile = serde_json::from_str(&text)?;
            let space = FiniteRmmSpace::try_from(raw)?;
            let violations = validate(&space);
            for v in &violations {
                println!("{v}");
            }
            if violations.is_empty() {
                println!("ok");
                Ok(0)
            } else {
                Ok(1)
            }
        }
        Command::Space(SpaceCmd::Hash { file, cap, grid }) => {
            let space = FiniteRmmSpace::load(&file)?;
            println!("{}", canonical_hash_with(&space, &CanonConfig { cap, grid })?);
            Ok(0)
        }
        Command::Ensemble(EnsembleCmd::Build { law, out }) => {
            let e = law.exact()?;
            write_or_print(out.as_deref(), &serde_json::to_string_pretty(&e)?)?;
            Ok(0)
        }
        Command::Mtp(MtpCmd::Check { law, transports, measure, tol, csv }) => {
            let e = law.exact()?;
            let m = MeasureRef::parse(&measure);
            let reports = parse_transports(&transports)?
                .iter()
                .map(|g| mtp_check_exact_wrt(&e, g, &m, tol))
                .collect::<Result<Vec<_>>>()?;
            if let Some(p) = csv {
                std::fs::write(p, reports_csv(&reports))?;
            }
            emit(&reports)
        }
        Command::Palm(cmd) => palm(cmd),
        Command::Walk(cmd) => walk(cmd),
        Command::Balance(cmd) => balance(cmd),
        Command::Ghp(cmd) => ghp(cmd),
        Command::Run { config, report } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if report.is_some() {
                cfg.output.report = report;
            }
            let r = run_experiment(&cfg)?;
            r.write_outputs()?;
            println!("{}", serde_json::to_string(&r.summary)?);
            Ok(r.exit_code() as u8)
        }
    }
}

fn palm(cmd: PalmCmd) -> Result<u8> {
    match cmd {
        PalmCmd::Intensity { palm } => {
            let e = palm.law.exact()?;
            let h: Builtin = palm.h.parse()?;
            println!("{}", intensity(&e, &MeasureRef::parse(&palm.phi), &h)?);
            Ok(0)
        }
        PalmCmd::Construct { palm, out } => {
            let e = palm.law.exact()?;
            let h: Builtin = palm.h.parse()?;
            let r = palm_ensemble_exact(&e, &MeasureRef::parse(&palm.phi), &h)?;
            eprintln!("intensity {}", r.intensity);
            write_or_print(out.as_deref(), &serde_json::to_string_pretty(&r.palm)?)?;
            Ok(0)
        }
        PalmCmd::CheckCampbell { palm, transports } => {
            let e = palm.law.exact()?;
            let h: Builtin = palm.h.parse()?;
            let phi = MeasureRef::parse(&palm.phi);
            emit(&parse_transports(&transports)?.iter().map(|g| campbell_check(&e, &phi, g, &h)).collect::<Result<Vec<_>>>()?)
        }
        PalmCmd::CheckExchange { palm, psi, transports } => {
            let e = palm.law.exact()?;
            let h: Builtin = palm.h.parse()?;
            let (phi, psi) = (MeasureRef::parse(&palm.phi), MeasureRef::parse(&psi));
            emit(
                &parse_transports(&transports)?
                    .iter()
                    .map(|g| exchange_check(&e, &phi, &psi, g, &h))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        PalmCmd::CheckMtp { palm, transports } => {
            let e = palm.law.exact()?;
            let h: Builtin = palm.h.parse()?;
            let phi = MeasureRef::parse(&palm.phi);
            emit(&parse_transports(&transports)?.iter().map(|g| palm_mtp_check(&e, &phi, &h, g)).collect::<Result<Vec<_>>>()?)
        }
        PalmCmd::CheckInversion { palm } => {
            let e = palm.law.exact()?;
            let h: Builtin = palm.h.parse()?;
            emit(&[palm_inversion_check(&e, &palm.phi, &h)?])
        }
        PalmCmd::OfPoisson { law, c, h, functionals: names, trials, seed } => {
            let e = law.exact()?;
            let h: Builtin = h.parse()?;
            let obs = observables(&names)?;
            let fs = functionals(&obs);
            let refs: Vec<(&str, &Functional<'_>)> = fs.iter().map(|(n, f)| (n.as_str(), f.as_ref())).collect();
            emit(&palm_of_poisson_check(&e, c, &h, &refs, trials, seed)?)
        }
    }
}

fn walk(cmd: WalkCmd) -> Result<u8> {
    match cmd {
        WalkCmd::Simulate { space, h, steps, seed, out } => {
            let s = FiniteRmmSpace::load(&space)?;
            let k = kernel_from_transport(&s, &h.parse::<Builtin>()?, None)?;
            let t = simulate_two_sided(&s, &k, steps, seed)?;
            let mut csv = String::from("step,point\n");
            for (i, x) in t.two_sided().iter().enumerate() {
                csv.push_str(&format!("{},{x}\n", i as i64 - steps as i64));
            }
            write_or_print(out.as_deref(), &csv)?;
            Ok(0)
        }
        WalkCmd::CheckReversibility { law, h, transports } => {
            let e = law.exact()?;
            let h: Builtin = h.parse()?;
            let reports = parse_transports(&transports)?
                .iter()
                .map(|g| {
                    let mut r = reversibility_check(&e, &h, |s, u, v| g.eval(s, u, v).unwrap_or(f64::NAN))?;
                    r.check = format!("reversibility[{}]", g.name());
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            emit(&reports)
        }
        WalkCmd::Speed { space, h, steps, trials, seed } => {
            let s = FiniteRmmSpace::load(&space)?;
            let k = kernel_from_transport(&s, &h.parse::<Builtin>()?, None)?;
            let traces =
                (0..trials).map(|i| simulate_walk(&s, &k, steps, derive(seed, i))).collect::<Result<Vec<_>>>()?;
            let sp = speed_estimate(&traces)?;
            println!("{}", serde_json::to_string_pretty(&sp)?);
            Ok(if sp.interval.0 <= sp.bound { 0 } else { 1 })
        }
        WalkCmd::ErgodicAverage { space, h, functional, steps, seed } => {
            let s = FiniteRmmSpace::load(&space)?;
            let k = kernel_from_transport(&s, &h.parse::<Builtin>()?, None)?;
            let f: Observable = functional.parse()?;
            let t = simulate_two_sided(&s, &k, steps, seed)?;
            let est = ergodic_average(&t, |x| f.eval_or_nan(x))?;
            println!("{}", serde_json::to_string_pretty(&est)?);
            Ok(0)
        }
    }
}

fn balance(cmd: BalanceCmd) -> Result<u8> {
    match cmd {
        BalanceCmd::Stable { space, phi, psi, out } => {
            let s = FiniteRmmSpace::load(&space)?;
            let td = stable_transport(&s, &phi, &psi)?;
            write_or_print(out.as_deref(), &td.to_csv())?;
            Ok(0)
        }
        BalanceCmd::Verify { space, phi, psi } => {
            let s = FiniteRmmSpace::load(&space)?;
            let td = stable_transport(&s, &phi, &psi)?;
            let bal = verify_balancing(&td);
            let cert = blocking_pairs(&td);
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({ "balance": bal, "stability": cert }))?
            );
            Ok(if bal.passed && cert.is_stable() { 0 } else { 1 })
        }
        BalanceCmd::ExtraHead { space, p, h, functionals: names, trials, seed } => {
            let s = FiniteRmmSpace::load(&space)?;
            let h: Builtin = h.parse()?;
            let obs = observables(&names)?;
            let fs = functionals(&obs);
            let refs: Vec<(&str, &Functional<'_>)> = fs.iter().map(|(n, f)| (n.as_str(), f.as_ref())).collect();
            let r = extra_head_demo(&s, p, &h, &refs, trials, seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(if r.passed() { 0 } else { 1 })
        }
    }
}

fn ghp(cmd: GhpCmd) -> Result<u8> {
    match cmd {
        GhpCmd::Dist { a, b, budget, grid } => {
            let (a, b) = (FiniteRmmSpace::load(&a)?, FiniteRmmSpace::load(&b)?);
            let r = ghp_upper(&a, &b, GhpOptions { budget, grid })?;
            println!("{}", r.value);
            println!("{}", serde_json::to_string(&r.correspondence.pairs)?);
            if r.budget_exhausted {
                eprintln!("warning: search budget exhausted");
            }
            Ok(0)
        }
        GhpCmd::ScalingDemo { model, sizes, rule, budget, seed } => {
            let model: ScalingModel = model.parse()?;
            let rule: ScalingRule = rule.parse()?;
            let t = scaling_cauchy_demo(model, &sizes, rule, GhpOptions { budget, ..GhpOptions::default() }, seed)?;
            print!("{}", t.to_csv());
            eprintln!("decreasing: {}", t.decreasing);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
