// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use relay_pricing::analysis::{self, EquilibriumReport, SuiteOutcome};
use relay_pricing::flow::{path_min_marginals, Optimum, Routing};
use relay_pricing::game::{construct_marginal_cost_equilibrium, construct_monopolistic_equilibrium, oligopoly_relays, PricingProfile};
use relay_pricing::io::{self, csv_row, format_sig, Instance, ProfileFile};
use relay_pricing::Network;

/// Social optimum, equilibria and price of anarchy for relay pricing games.
#[derive(Parser, Debug)]
#[command(name = "relay-pricing", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Grid steps across a flow range, overriding the scenario.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Absolute cost tolerance, overriding the scenario.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Seed for randomized suites.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Print machine-readable JSON reports.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Socially optimal routing, per-link flows, total cost and node marginals.
    Optimal { scenario: PathBuf },
    /// Construct an equilibrium, verify it and print its routing and cost.
    Equilibrium {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        scheme: Scheme,
        /// Write the constructed profile to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a pricing profile (exit 0 when it is an equilibrium, 1 otherwise).
    Verify {
        scenario: PathBuf,
        /// Profile file; defaults to the profile embedded in the scenario.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Ratio of the worst supplied equilibrium cost to the optimal cost.
    Poa {
        scenario: PathBuf,
        #[arg(long, num_args = 1..)]
        equilibria: Vec<PathBuf>,
        /// Also include the constructed equilibria (and the embedded profile, if any).
        #[arg(long)]
        constructed: bool,
    },
    /// Emit a scenario for a named example family.
    Generate {
        family: String,
        /// Comma-separated `key=value` parameters.
        #[arg(long, value_delimiter = ',')]
        params: Vec<String>,
        /// Write to this file instead of standard output.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// CSV of optimal cost, worst verified equilibrium cost and their ratio over a parameter range.
    Sweep {
        family: String,
        #[arg(long)]
        param: String,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Fixed `key=value` parameters for the other family settings.
        #[arg(long, value_delimiter = ',')]
        params: Vec<String>,
    },
    /// Randomized checks that verified equilibria of the given kinds are efficient.
    Suite {
        #[arg(long, value_enum, default_value_t = SuiteKind::All)]
        kind: SuiteKind,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Directory for counterexample dumps.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scheme {
    MarginalCost,
    Monopolistic,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum SuiteKind {
    All,
    Competitive,
    Focal,
    EverywhereCompetitive,
    MonopolisticOptimum,
}

/// Failures caused by the inputs rather than by the game.
#[derive(Debug)]
struct InputError(anyhow::Error);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InputError {}

fn input<T>(r: relay_pricing::Result<T>, what: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| InputError(anyhow::Error::new(e).context(what())).into())
}

fn main() -> ExitCode {
    quiet_broken_pipe();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// A closed stdout (e.g. piping into `head`) ends the process quietly instead of panicking.
fn quiet_broken_pipe() {
    let default = std::panic::take_hook();
    std::panic::set_hook(Box::new(move |info| {
        let msg = info
            .payload()
            .downcast_ref::<String>()
            .map(String::as_str)
            .or_else(|| info.payload().downcast_ref::<&str>().copied())
            .unwrap_or("");
        if msg.contains("Broken pipe") {
            std::process::exit(0);
        }
        default(info);
    }));
}

fn num(x: f64) -> String {
    format_sig(x, 9)
}

fn load_instance(cli: &Cli, path: &Path) -> Result<Instance> {
    let sc = input(io::load(path), || format!("loading {}", path.display()))?;
    let mut inst = input(sc.build(), || format!("building {}", path.display()))?;
    if let Some(g) = cli.grid {
        if g == 0 {
            return Err(InputError(anyhow::anyhow!("--grid must be positive")).into());
        }
        inst.settings.grid = g;
    }
    if let Some(t) = cli.tol {
        if !(t > 0.0) {
            return Err(InputError(anyhow::anyhow!("--tol must be positive")).into());
        }
        inst.settings.tol = t;
    }
    Ok(inst)
}

fn parse_params(items: &[String]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in items.iter().filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| InputError(anyhow::anyhow!("parameter `{item}` is not key=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| InputError(anyhow::anyhow!("parameter `{k}` has non-numeric value `{v}`")))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

fn routing_json(net: &Network, r: &Routing) -> Value {
    let flows: BTreeMap<String, f64> = net.edge_ids().map(|e| (net.edge_name(e), r.flow(e))).collect();
    json!(flows)
}

fn print_routing(net: &Network, r: &Routing) {
    println!("link flows:");
    for e in net.edge_ids() {
        println!("  {:<16} {}", net.edge_name(e), num(r.flow(e)));
    }
}

fn report_json(net: &Network, label: &str, rep: &EquilibriumReport) -> Value {
    json!({
        "label": label,
        "verified": rep.verified,
        "worst_violation": rep.worst_violation,
        "focal": rep.focal,
        "efficient": rep.efficient,
        "structure": rep.structure.class().to_string(),
        "total_cost": rep.total_cost,
        "optimal_cost": rep.optimal_cost,
        "poa_contribution": rep.poa_contribution,
        "deviating_relays": rep.verification.deviating_relays().iter().map(|&i| net.name(i).to_string()).collect::<Vec<_>>(),
        "routing": routing_json(net, &rep.verification.routing),
    })
}

fn print_report(net: &Network, rep: &EquilibriumReport) {
    let v = &rep.verification;
    println!("verified: {}", rep.verified);
    println!("worst violation: {}", num(rep.worst_violation));
    println!("focal: {}", rep.focal);
    println!("structure: {}", rep.structure.class());
    println!("efficient: {}", rep.efficient);
    println!("total cost: {}", num(rep.total_cost));
    println!("optimal cost: {}", num(rep.optimal_cost));
    println!("cost ratio: {}", num(rep.poa_contribution));
    for p in &v.pin_rejections {
        println!("pin override ignored at {}: {}", net.name(p.node), p.reason);
    }
    println!("relays:");
    for r in &v.relays {
        let ideal: Vec<String> =
            r.ideal_flows.iter().map(|(h, f)| format!("{}={}", net.name(*h), num(*f))).collect();
        println!(
            "  {:<8} violation {}  ideal [{}]  anticipated {}  realized {}{}",
            net.name(r.relay),
            num(r.worst_violation),
            ideal.join(", "),
            num(r.anticipated_profit),
            num(r.realized_profit),
            r.deviation.as_ref().map(|d| format!("  DEVIATES: {d}")).unwrap_or_default()
        );
    }
    print_routing(net, &v.routing);
}

fn print_profile_summary(net: &Network, p: &PricingProfile) {
    println!("prices (value at 0 .. value at end of domain):");
    for (&(i, h), beta) in &p.prices {
        println!(
            "  {} -> {:<8} {} .. {} on [0, {}]",
            net.name(h),
            net.name(i),
            num(beta.eval(0.0)),
            num(beta.eval(beta.domain_hi())),
            num(beta.domain_hi())
        );
    }
    if !p.pins.is_empty() {
        println!("pins:");
        for (&(a, b), f) in &p.pins {
            println!("  {}->{:<8} {}", net.name(a), net.name(b), num(*f));
        }
    }
}

fn optimal(cli: &Cli, path: &Path) -> Result<ExitCode> {
    let inst = load_instance(cli, path)?;
    let game = inst.game();
    let opt: Optimum = analysis::optimum(&game)?;
    let lambda = path_min_marginals(&inst.net, &opt.routing, &inst.costs)?;
    if cli.json {
        let table: BTreeMap<String, f64> = inst.net.nodes().map(|n| (inst.net.name(n).to_string(), lambda[n.0])).collect();
        let out = json!({
            "scenario": inst.name,
            "optimal_cost": opt.cost,
            "routing": routing_json(&inst.net, &opt.routing),
            "marginals": table,
            "iterations": opt.iterations,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("scenario: {}", inst.name);
        println!("optimal cost: {}", num(opt.cost));
        print_routing(&inst.net, &opt.routing);
        println!("node marginals (cheapest continuation to the destination):");
        for n in inst.net.nodes() {
            println!("  {:<8} throughput {}  marginal {}", inst.net.name(n), num(opt.routing.throughput(&inst.net, n)), num(lambda[n.0]));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn construct(inst: &Instance, scheme: Scheme) -> Result<PricingProfile> {
    let game = inst.game();
    let mut profile = match scheme {
        Scheme::MarginalCost => construct_marginal_cost_equilibrium(&game)?.0.profile,
        Scheme::Monopolistic => {
            input(oligopoly_relays(&inst.net), || "monopolistic construction needs an oligopoly".to_string())?;
            construct_monopolistic_equilibrium(&game)?.0.profile
        }
    };
    // scenario pins act as tie-break overrides
    profile.pins.extend(inst.pins.iter().map(|(&k, &v)| (k, v)));
    Ok(profile)
}

fn equilibrium(cli: &Cli, path: &Path, scheme: Scheme, out: Option<&Path>) -> Result<ExitCode> {
    let inst = load_instance(cli, path)?;
    let game = inst.game();
    let opt = analysis::optimum(&game)?;
    let profile = construct(&inst, scheme)?;
    let rep = analysis::evaluate(&game, &profile, &opt)?;
    if let Some(out) = out {
        let pf = ProfileFile::from_profile(&inst.net, &profile);
        input(io::save_profile(&pf, out), || format!("writing {}", out.display()))?;
    }
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&report_json(&inst.net, &format!("{scheme:?}"), &rep))?);
    } else {
        println!("scenario: {}", inst.name);
        print_profile_summary(&inst.net, &profile);
        print_report(&inst.net, &rep);
    }
    Ok(if rep.verified { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_profile(inst: &Instance, path: &Path) -> Result<PricingProfile> {
    let pf = input(io::load_profile(path), || format!("loading {}", path.display()))?;
    input(pf.resolve(inst), || format!("resolving {}", path.display()))
}

fn verify(cli: &Cli, path: &Path, profile: Option<&Path>) -> Result<ExitCode> {
    let inst = load_instance(cli, path)?;
    let p = match profile {
        Some(f) => load_profile(&inst, f)?,
        None => match &inst.profile {
            Some(p) => p.clone(),
            None => return Err(InputError(anyhow::anyhow!("scenario has no prices; pass --profile")).into()),
        },
    };
    let game = inst.game();
    input(p.check_complete(&inst.net), || "incomplete profile".to_string())?;
    let opt = analysis::optimum(&game)?;
    let rep = analysis::evaluate(&game, &p, &opt)?;
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&report_json(&inst.net, "profile", &rep))?);
    } else {
        print_report(&inst.net, &rep);
        let dev = rep.verification.deviating_relays();
        if !dev.is_empty() {
            let names: Vec<&str> = dev.iter().map(|&i| inst.net.name(i)).collect();
            println!("deviating relays: {}", names.join(", "));
        }
    }
    Ok(if rep.verified { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn poa(cli: &Cli, path: &Path, files: &[PathBuf], constructed: bool) -> Result<ExitCode> {
    let inst = load_instance(cli, path)?;
    let game = inst.game();
    let opt = analysis::optimum(&game)?;
    let mut reports: Vec<(String, EquilibriumReport)> = Vec::new();
    for f in files {
        let p = load_profile(&inst, f)?;
        reports.push((f.display().to_string(), analysis::evaluate(&game, &p, &opt)?));
    }
    if constructed {
        reports.extend(analysis::equilibrium_reports(&inst, &opt)?);
    }
    let unverified: Vec<&str> = reports.iter().filter(|(_, r)| !r.verified).map(|(l, _)| l.as_str()).collect();
    if !unverified.is_empty() {
        bail!("not an equilibrium: {}", unverified.join(", "));
    }
    let plain: Vec<EquilibriumReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let res = match analysis::price_of_anarchy(&plain) {
        Err(relay_pricing::Error::EmptyEquilibria) => {
            return Err(InputError(anyhow::anyhow!("no equilibria given; pass --equilibria or --constructed")).into())
        }
        other => other?,
    };
    if cli.json {
        let eqs: Vec<Value> = reports.iter().map(|(l, r)| report_json(&inst.net, l, r)).collect();
        let out = json!({ "ratio": res.ratio, "optimal_cost": res.optimal_cost, "equilibria": eqs });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("optimal cost: {}", num(res.optimal_cost));
        for (l, r) in &reports {
            println!("  {:<24} cost {}  ratio {}  {}", l, num(r.total_cost), num(r.poa_contribution), r.structure.class());
        }
        println!("price of anarchy (lower bound from these equilibria): {}", num(res.ratio));
    }
    Ok(ExitCode::SUCCESS)
}

fn generate(family: &str, params: &[String], out: Option<&Path>) -> Result<ExitCode> {
    let params = parse_params(params)?;
    let sc = input(analysis::generate_example(family, &params), || format!("generating `{family}`"))?;
    match out {
        Some(p) => io::save(&sc, p).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", sc.to_toml()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(cli: &Cli, family: &str, name: &str, from: f64, to: f64, steps: usize, params: &[String]) -> Result<ExitCode> {
    let base = parse_params(params)?;
    let values = analysis::linspace(from, to, steps);
    let rows = input(analysis::sweep(family, &base, name, &values), || format!("sweeping `{family}` over {name}"))?;
    if cli.json {
        let rows: Vec<Value> = rows
            .iter()
            .map(|r| json!({ "param": r.param, "opt_cost": r.opt_cost, "eq_cost": r.eq_cost, "poa": r.poa }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("param,opt_cost,eq_cost,poa");
        for r in rows {
            println!("{}", csv_row(&[r.param, r.opt_cost, r.eq_cost, r.poa]));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn suite(cli: &Cli, kind: SuiteKind, trials: usize, dump: Option<&Path>) -> Result<ExitCode> {
    let pick = |k: SuiteKind| kind == SuiteKind::All || kind == k;
    let mut outcomes: Vec<SuiteOutcome> = Vec::new();
    if pick(SuiteKind::Competitive) {
        outcomes.push(analysis::competitive_oligopoly_suite(cli.seed, trials));
    }
    if pick(SuiteKind::Focal) {
        outcomes.push(analysis::focal_oligopoly_suite(cli.seed, trials));
    }
    if pick(SuiteKind::EverywhereCompetitive) {
        outcomes.push(analysis::everywhere_competitive_suite(cli.seed, trials));
    }
    if pick(SuiteKind::MonopolisticOptimum) {
        outcomes.push(analysis::monopolistic_optimum_suite(cli.seed, trials));
    }
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (k, o) in outcomes.iter().enumerate() {
            for (j, c) in o.counterexamples.iter().enumerate() {
                let f = dir.join(format!("suite{k}-counterexample{j}.toml"));
                std::fs::write(&f, c).with_context(|| format!("writing {}", f.display()))?;
            }
        }
    }
    if cli.json {
        let out: Vec<Value> = outcomes
            .iter()
            .map(|o| {
                json!({
                    "name": o.name, "trials": o.trials, "verified": o.verified, "applicable": o.applicable,
                    "counterexamples": o.counterexamples.len(), "errors": o.errors,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for o in &outcomes {
            println!(
                "{} {}: {} trials, {} verified, {} applicable, {} counterexamples, {} errors",
                if o.passed() { "ok  " } else { "FAIL" },
                o.name,
                o.trials,
                o.verified,
                o.applicable,
                o.counterexamples.len(),
                o.errors.len()
            );
            for e in &o.errors {
                println!("     {e}");
            }
        }
    }
    Ok(if outcomes.iter().all(|o| o.passed()) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Optimal { scenario } => optimal(cli, scenario),
        Command::Equilibrium { scenario, scheme, out } => equilibrium(cli, scenario, *scheme, out.as_deref()),
        Command::Verify { scenario, profile } => verify(cli, scenario, profile.as_deref()),
        Command::Poa { scenario, equilibria, constructed } => poa(cli, scenario, equilibria, *constructed),
        Command::Generate { family, params, out } => generate(family, params, out.as_deref()),
        Command::Sweep { family, param, from, to, steps, params } => sweep(cli, family, param, *from, *to, *steps, params),
        Command::Suite { kind, trials, dump } => suite(cli, *kind, *trials, dump.as_deref()),
    }
}
