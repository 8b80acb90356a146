//! Efficiency classification, price of anarchy, example generators, the
//! elastic-source transform and randomized checks of the efficiency theorems.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{socially_optimal_routing, LinkCosts, Optimum, Routing, SolverOptions};
use crate::game::{
    construct_marginal_cost_equilibrium, construct_monopolistic_equilibrium, oligopoly_relays, relay_path_marginals,
    verify_equilibrium, Game, PricingProfile, Verification,
};
use crate::io::{CurveSpec, EdgeSpec, PinSpec, PriceSpec, ProfileFile, Scenario, SettingsSpec, UtilitySpec, SCHEMA};
use crate::network::{EdgeId, Network, NodeId};
use crate::MarginalFn;

/// Routing structure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Structure {
    /// A single offspring of the source carries the whole session.
    pub monopolistic: bool,
    /// At least two offsprings of the source carry flow.
    pub competitive: bool,
    /// Every node with traffic splits it over at least two offsprings, or sends some directly to the destination.
    pub everywhere_competitive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureClass {
    EverywhereCompetitive,
    Competitive,
    Monopolistic,
    Other,
}

impl Structure {
    pub fn class(&self) -> StructureClass {
        if self.everywhere_competitive {
            StructureClass::EverywhereCompetitive
        } else if self.competitive {
            StructureClass::Competitive
        } else if self.monopolistic {
            StructureClass::Monopolistic
        } else {
            StructureClass::Other
        }
    }
}

impl std::fmt::Display for StructureClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StructureClass::EverywhereCompetitive => "everywhere-competitive",
            StructureClass::Competitive => "competitive",
            StructureClass::Monopolistic => "monopolistic",
            StructureClass::Other => "other",
        };
        f.write_str(s)
    }
}

pub fn classify(net: &Network, routing: &Routing, tol: f64) -> Structure {
    let s = net.source();
    let carrying: Vec<f64> = net.out_edges(s).iter().map(|&e| routing.flow(e)).filter(|&f| f > tol).collect();
    let monopolistic = carrying.len() == 1 && (carrying[0] - routing.session_rate).abs() <= tol;
    let competitive = carrying.len() >= 2;
    let mut everywhere = true;
    for h in net.nodes() {
        if h == net.destination() || routing.throughput(net, h) <= tol {
            continue;
        }
        let direct = net.edge(h, net.destination()).map(|e| routing.flow(e) > tol).unwrap_or(false);
        let used = net.out_edges(h).iter().filter(|&&e| routing.flow(e) > tol).count();
        if !(direct || used >= 2) {
            everywhere = false;
        }
    }
    Structure { monopolistic, competitive, everywhere_competitive: everywhere }
}

/// Verdict and efficiency figures for one pricing profile.
#[derive(Clone, Debug)]
pub struct EquilibriumReport {
    pub verification: Verification,
    pub verified: bool,
    pub worst_violation: f64,
    pub focal: bool,
    /// Induced routing within `10 * tol` of the optimum on every link.
    pub efficient: bool,
    pub structure: Structure,
    pub total_cost: f64,
    pub optimal_cost: f64,
    /// `total_cost / optimal_cost`.
    pub poa_contribution: f64,
    pub max_link_deviation: f64,
}

/// Social optimum at a precision well below `tol`.
pub fn optimum(game: &Game) -> Result<Optimum> {
    let opts = SolverOptions { tol: (game.settings.tol * 1e-3).min(1e-7), ..SolverOptions::default() };
    socially_optimal_routing(game.net, game.costs, game.session_rate, opts)
}

/// Verifies `profile` and compares its induced routing with `opt`.
pub fn evaluate(game: &Game, profile: &PricingProfile, opt: &Optimum) -> Result<EquilibriumReport> {
    let v = verify_equilibrium(game, profile)?;
    let tol = game.settings.tol;
    let total = game.costs.total(&v.routing);
    let dev = v.routing.max_diff(&opt.routing);
    let structure = classify(game.net, &v.routing, tol);
    Ok(EquilibriumReport {
        verified: v.verified,
        worst_violation: v.worst_violation,
        focal: v.focal(),
        efficient: dev <= 10.0 * tol,
        structure,
        total_cost: total,
        optimal_cost: opt.cost,
        poa_contribution: if opt.cost > 0.0 { total / opt.cost } else { 1.0 },
        max_link_deviation: dev,
        verification: v,
    })
}

/// Largest equilibrium cost over the optimal cost, for the supplied equilibria.
///
/// This is a lower bound on the price of anarchy, which ranges over all
/// equilibria.
#[derive(Clone, Debug)]
pub struct PoaResult {
    pub ratio: f64,
    pub optimal_cost: f64,
    pub equilibrium_costs: Vec<f64>,
}

pub fn price_of_anarchy(reports: &[EquilibriumReport]) -> Result<PoaResult> {
    if reports.is_empty() {
        return Err(Error::EmptyEquilibria);
    }
    if let Some(k) = reports.iter().position(|r| !r.verified) {
        return Err(Error::UnverifiedEquilibrium(k));
    }
    let costs: Vec<f64> = reports.iter().map(|r| r.total_cost).collect();
    let opt = reports[0].optimal_cost;
    let worst = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PoaResult { ratio: if opt > 0.0 { worst / opt } else { 1.0 }, optimal_cost: opt, equilibrium_costs: costs })
}

/// Monopolistic-equilibrium ratio of an oligopoly against the relay-count bound.
#[derive(Clone, Debug)]
pub struct PoaBoundReport {
    pub relays: usize,
    pub concave: bool,
    pub convex: bool,
    pub verified: bool,
    pub ratio: f64,
    /// Present for concave marginals: whether the ratio stays within the relay count.
    pub within_bound: Option<bool>,
}

/// Slack used to decide concavity and convexity of sampled marginals.
pub const SHAPE_SLACK: f64 = 1e-9;

pub fn poa_bound_check(game: &Game) -> Result<PoaBoundReport> {
    let relays = oligopoly_relays(game.net)?;
    let lambdas = relay_path_marginals(game, &relays)?;
    let concave = lambdas.iter().all(|l| l.is_concave(SHAPE_SLACK));
    let convex = lambdas.iter().all(|l| l.is_convex(SHAPE_SLACK));
    let opt = optimum(game)?;
    let (c, _) = construct_monopolistic_equilibrium(game)?;
    let report = evaluate(game, &c.profile, &opt)?;
    let n = relays.len();
    let ratio = report.poa_contribution;
    Ok(PoaBoundReport {
        relays: n,
        concave,
        convex,
        verified: report.verified,
        ratio,
        within_bound: concave.then_some(ratio <= n as f64 + 1e-3),
    })
}

/// Adds the overflow link `(s, w)` with marginal `d_sw(f) = u_s(R_s - f)`.
pub fn elastic_transform(
    net: &Network,
    costs: &LinkCosts,
    utility: &MarginalFn,
    session_rate: f64,
) -> Result<(Network, LinkCosts, EdgeId)> {
    let (s, w) = (net.source(), net.destination());
    if net.edge(s, w).is_some() {
        return Err(Error::InvalidNetwork("source already links to the destination".into()));
    }
    if utility.domain_hi() < session_rate {
        return Err(Error::InvalidFunction(format!(
            "utility marginal defined up to {}, session rate is {session_rate}",
            utility.domain_hi()
        )));
    }
    let u = utility.restrict(session_rate)?;
    if u.min_value() < 0.0 {
        return Err(Error::InvalidFunction("utility marginal must be nonnegative".into()));
    }
    if !u.is_nonincreasing(1e-12) {
        return Err(Error::InvalidFunction("utility marginal must be nonincreasing".into()));
    }
    let mut pairs: Vec<(usize, usize)> = net.edges().iter().map(|&(a, b)| (a.0, b.0)).collect();
    pairs.push((s.0, w.0));
    let net2 = Network::new(net.names().to_vec(), &pairs, s.0, w.0)?;
    let mut costs2 = costs.clone();
    costs2.push(u.reflect(session_rate)?);
    let e = net2.edge(s, w).unwrap();
    Ok((net2, costs2, e))
}

/// Names of the families accepted by [`generate_example`].
pub const FAMILIES: [&str; 5] =
    ["oligopoly-linear", "duopoly-inefficient", "myopic-general", "convex-unbounded", "elastic-oligopoly"];

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn count_param(params: &BTreeMap<String, f64>, key: &str, default: usize) -> Result<usize> {
    let v = param(params, key, default as f64);
    if v.fract() != 0.0 || v < 0.0 {
        return Err(Error::InvalidParameter(format!("{key} must be a nonnegative integer, got {v}")));
    }
    Ok(v as usize)
}

fn lin(a: f64, b: f64) -> CurveSpec {
    CurveSpec::Linear { a, b, domain: None }
}

fn scenario(name: String, nodes: Vec<String>, rate: f64, edges: Vec<(String, String, CurveSpec)>) -> Scenario {
    Scenario {
        schema: SCHEMA,
        name,
        source: "s".into(),
        destination: "w".into(),
        session_rate: rate,
        nodes,
        settings: SettingsSpec::default(),
        utility: None,
        edges: edges.into_iter().map(|(from, to, cost)| EdgeSpec { from, to, cost }).collect(),
        pins: Vec::new(),
        prices: Vec::new(),
    }
}

fn oligopoly_nodes(n: usize) -> Vec<String> {
    let mut nodes = vec!["s".to_string()];
    nodes.extend((1..=n).map(|k| format!("r{k}")));
    nodes.push("w".into());
    nodes
}

/// Oligopoly whose relay `k` has path marginal `λ_k`, split evenly over its two links.
fn oligopoly_scenario(name: String, rate: f64, halves: Vec<CurveSpec>) -> Scenario {
    let n = halves.len();
    let mut edges = Vec::new();
    for (k, c) in halves.iter().enumerate() {
        edges.push(("s".to_string(), format!("r{}", k + 1), c.clone()));
    }
    for (k, c) in halves.into_iter().enumerate() {
        edges.push((format!("r{}", k + 1), "w".to_string(), c));
    }
    scenario(name, oligopoly_nodes(n), rate, edges)
}

fn check_known(params: &BTreeMap<String, f64>, allowed: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::InvalidParameter(format!("unknown parameter `{k}`; expected one of {allowed:?}")));
        }
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
    }
    Ok(v)
}

/// Emits a complete scenario for one of the named families.
pub fn generate_example(family: &str, params: &BTreeMap<String, f64>) -> Result<Scenario> {
    match family {
        "oligopoly-linear" => {
            check_known(params, &["N", "c", "R_s"])?;
            let n = count_param(params, "N", 3)?;
            let c = positive("c", param(params, "c", 1.0))?;
            let r = positive("R_s", param(params, "R_s", 1.0))?;
            if n < 2 {
                return Err(Error::InvalidParameter("N must be at least 2".into()));
            }
            Ok(oligopoly_scenario(format!("oligopoly-linear-n{n}"), r, vec![lin(0.0, c / 2.0); n]))
        }
        "duopoly-inefficient" => {
            check_known(params, &["a1", "a2", "R_s"])?;
            let a1 = positive("a1", param(params, "a1", 1.0))?;
            let a2 = positive("a2", param(params, "a2", 2.0))?;
            let r = positive("R_s", param(params, "R_s", 1.0))?;
            if a1 >= a2 {
                return Err(Error::InvalidParameter("relay 1 must be the cheaper one (a1 < a2)".into()));
            }
            let mut sc = oligopoly_scenario("duopoly-inefficient".into(), r, vec![lin(0.0, a1 / 2.0), lin(0.0, a2 / 2.0)]);
            // relay 2 mirrors its own cost; relay 1 mirrors a convex curve of the same area,
            // which stays above relay 1's cost so it wants the whole session
            let pieces = 64;
            let kappa = 1.5 * a2 / r;
            let xs: Vec<f64> = (0..=pieces).map(|k| r * k as f64 / pieces as f64).collect();
            let rho: Vec<f64> = xs.iter().map(|&x| kappa * x * x).collect();
            let area: f64 = rho.windows(2).zip(xs.windows(2)).map(|(y, x)| 0.5 * (y[0] + y[1]) * (x[1] - x[0])).sum();
            let scale = (a2 * r * r / 2.0) / area;
            let beta1: Vec<[f64; 2]> =
                xs.iter().zip(rho.iter().rev()).map(|(&x, &y)| [x, y * scale]).collect();
            sc.prices = vec![
                PriceSpec {
                    relay: "r1".into(),
                    predecessor: "s".into(),
                    marginal: CurveSpec::Points { points: beta1 },
                },
                PriceSpec {
                    relay: "r2".into(),
                    predecessor: "s".into(),
                    marginal: CurveSpec::Points { points: vec![[0.0, a2 * r], [r, 0.0]] },
                },
            ];
            sc.pins = vec![
                PinSpec { from: "s".into(), to: "r1".into(), flow: r },
                PinSpec { from: "s".into(), to: "r2".into(), flow: 0.0 },
            ];
            Ok(sc)
        }
        "myopic-general" => {
            check_known(params, &["M", "eps", "delta", "R_s"])?;
            let m = positive("M", param(params, "M", 100.0))?;
            let eps = positive("eps", param(params, "eps", 0.2))?;
            let delta = positive("delta", param(params, "delta", 1.0))?;
            let r = positive("R_s", param(params, "R_s", 1.0))?;
            let need = 10.0 * (eps * r).max(delta * r);
            if m < need {
                return Err(Error::InvalidParameter(format!(
                    "M = {m} too small; need M >= 10 * max(eps * R_s, delta * R_s) = {need}"
                )));
            }
            let won = eps / (2.0 * delta);
            if won >= r {
                return Err(Error::InvalidParameter(format!("eps / (2 delta) = {won} must be below R_s = {r}")));
            }
            let nodes: Vec<String> = ["s", "h", "g", "i", "j", "w"].iter().map(|s| s.to_string()).collect();
            let e = |a: &str, b: &str, c: CurveSpec| (a.to_string(), b.to_string(), c);
            let edges = vec![
                e("s", "h", lin(0.0, 2.0 * delta)),
                e("s", "g", lin(0.0, delta)),
                e("h", "i", lin(0.0, delta)),
                e("h", "j", lin(0.0, delta)),
                e("i", "w", lin(0.0, delta)),
                e("j", "w", lin(2.0 * m, delta)),
                e("g", "w", CurveSpec::AffineShifted { a: 2.0 * m + 2.0 * eps, b: delta, shift: 2.0 * r, domain: None }),
            ];
            let mut sc = scenario(format!("myopic-general-M{m}"), nodes, r, edges);
            let price = |relay: &str, pred: &str, v: f64| PriceSpec {
                relay: relay.into(),
                predecessor: pred.into(),
                marginal: CurveSpec::Constant { value: v, domain: None },
            };
            sc.prices = vec![
                price("h", "s", 2.0 * m + eps),
                price("g", "s", 2.0 * m + eps),
                price("i", "h", 2.0 * m),
                price("j", "h", 2.0 * m),
            ];
            let pin = |a: &str, b: &str, flow: f64| PinSpec { from: a.into(), to: b.into(), flow };
            sc.pins = vec![pin("s", "h", won), pin("s", "g", r - won), pin("h", "i", won), pin("h", "j", 0.0)];
            Ok(sc)
        }
        "convex-unbounded" => {
            check_known(params, &["N", "M", "R_s", "a"])?;
            let n = count_param(params, "N", 2)?;
            let target = positive("M", param(params, "M", 50.0))?;
            let r = positive("R_s", param(params, "R_s", 1.0))?;
            let a = positive("a", param(params, "a", 1.0))?;
            if n < 2 {
                return Err(Error::InvalidParameter("N must be at least 2".into()));
            }
            // λ(x) = a x up to the even share, then steeper by `amp`; the symmetric
            // optimum never reaches the kink while the monopolist pays for the steep part
            let share = r / n as f64;
            let d_opt = n as f64 * a * share * share / 2.0;
            let tail = r - share;
            let amp = ((1.1 * target * d_opt - a * r * r / 2.0) * 2.0 / (tail * tail)).max(a);
            let hi = 4.0 * r;
            let half = |x: f64| if x <= share { a * x / 2.0 } else { (a * share + (a + amp) * (x - share)) / 2.0 };
            let curve = CurveSpec::Points { points: vec![[0.0, 0.0], [share, half(share)], [hi, half(hi)]] };
            Ok(oligopoly_scenario(format!("convex-unbounded-n{n}-M{target}"), r, vec![curve; n]))
        }
        "elastic-oligopoly" => {
            check_known(params, &["N", "c", "R_s", "a", "b"])?;
            let n = count_param(params, "N", 2)?;
            let c = positive("c", param(params, "c", 1.0))?;
            let r = positive("R_s", param(params, "R_s", 1.0))?;
            let a = param(params, "a", 1.0);
            let b = param(params, "b", 1.0);
            if n < 2 {
                return Err(Error::InvalidParameter("N must be at least 2".into()));
            }
            if b < 0.0 || a - b * r < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "utility marginal a - b r must be nonnegative and nonincreasing on [0, R_s], got a = {a}, b = {b}"
                )));
            }
            let mut sc = oligopoly_scenario(format!("elastic-oligopoly-n{n}"), r, vec![lin(0.0, c / 2.0); n]);
            sc.utility = Some(UtilitySpec { marginal: CurveSpec::Linear { a, b: -b, domain: Some(r) } });
            Ok(sc)
        }
        other => Err(Error::InvalidParameter(format!("unknown family `{other}`; expected one of {FAMILIES:?}"))),
    }
}

/// Costs of the optimum and of the worst verified equilibrium available for a scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub param: f64,
    pub opt_cost: f64,
    pub eq_cost: f64,
    pub poa: f64,
}

/// Verified equilibria for an instance: its embedded profile, marginal cost
/// pricing, and for oligopolies the monopolistic construction.
pub fn equilibrium_reports(inst: &crate::io::Instance, opt: &Optimum) -> Result<Vec<(String, EquilibriumReport)>> {
    let game = inst.game();
    let mut out = Vec::new();
    if let Some(p) = &inst.profile {
        out.push(("embedded".to_string(), evaluate(&game, p, opt)?));
    }
    let (mc, _) = construct_marginal_cost_equilibrium(&game)?;
    out.push(("marginal-cost".to_string(), evaluate(&game, &mc.profile, opt)?));
    if oligopoly_relays(&inst.net).is_ok() {
        let (mono, _) = construct_monopolistic_equilibrium(&game)?;
        out.push(("monopolistic".to_string(), evaluate(&game, &mono.profile, opt)?));
    }
    Ok(out)
}

/// Evaluates one family over parameter values, in parallel; rows keep the input order.
pub fn sweep(family: &str, base: &BTreeMap<String, f64>, name: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    values
        .par_iter()
        .map(|&v| {
            let mut params = base.clone();
            params.insert(name.to_string(), v);
            let inst = generate_example(family, &params)?.build()?;
            let game = inst.game();
            let opt = optimum(&game)?;
            let reports = equilibrium_reports(&inst, &opt)?;
            let eq = reports
                .iter()
                .filter(|(_, r)| r.verified)
                .map(|(_, r)| r.total_cost)
                .fold(f64::NAN, f64::max);
            Ok(SweepRow { param: v, opt_cost: opt.cost, eq_cost: eq, poa: eq / opt.cost })
        })
        .collect()
}

/// `steps` evenly spaced values from `from` to `to` inclusive.
pub fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..steps).map(|k| from + (to - from) * k as f64 / (steps - 1) as f64).collect(),
    }
}

// ---------------------------------------------------------------------------
// Random instances

/// Deterministic generator for a trial.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Random strictly increasing concave curve `a x^p + b x + c` halved over two links.
pub fn random_concave_half<R: Rng>(rng: &mut R, hi: f64) -> CurveSpec {
    let a = rng.gen_range(0.2..2.0);
    let p = rng.gen_range(0.3..0.9);
    let b = rng.gen_range(0.0..1.0);
    let c = rng.gen_range(0.0..0.5);
    sampled(hi, 64, |x: f64| 0.5 * (a * x.powf(p) + b * x + c))
}

/// Random strictly increasing convex curve `a + b x + q x^2` halved over two links.
pub fn random_convex_half<R: Rng>(rng: &mut R, hi: f64) -> CurveSpec {
    let a = rng.gen_range(0.0..0.5);
    let b = rng.gen_range(0.2..2.0);
    let q = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0) };
    if q == 0.0 {
        return lin(a / 2.0, b / 2.0);
    }
    sampled(hi, 16, |x: f64| 0.5 * (a + b * x + q * x * x))
}

fn sampled(hi: f64, pieces: usize, f: impl Fn(f64) -> f64) -> CurveSpec {
    let points = (0..=pieces)
        .map(|k| {
            let x = hi * k as f64 / pieces as f64;
            [x, f(x)]
        })
        .collect();
    CurveSpec::Points { points }
}

pub fn random_concave_oligopoly<R: Rng>(rng: &mut R, max_relays: usize) -> Scenario {
    let n = rng.gen_range(2..=max_relays.max(2));
    let halves = (0..n).map(|_| random_concave_half(rng, 4.0)).collect();
    oligopoly_scenario(format!("concave-oligopoly-n{n}"), 1.0, halves)
}

pub fn random_convex_oligopoly<R: Rng>(rng: &mut R, max_relays: usize) -> Scenario {
    let n = rng.gen_range(2..=max_relays.max(2));
    let halves = (0..n).map(|_| random_convex_half(rng, 4.0)).collect();
    oligopoly_scenario(format!("convex-oligopoly-n{n}"), 1.0, halves)
}

/// Layered random network: relays in consecutive layers of two or three,
/// edges only between adjacent layers or to the destination. At most ten nodes
/// and three predecessors per node, the destination included.
pub fn random_dag<R: Rng>(rng: &mut R) -> Scenario {
    let mut layers: Vec<Vec<String>> = Vec::new();
    let mut count = 0;
    let depth = rng.gen_range(1..=3);
    for l in 0..depth {
        let size = rng.gen_range(2..=3);
        if count + size > 8 {
            break;
        }
        layers.push((0..size).map(|k| format!("n{}{}", l + 1, k + 1)).collect());
        count += size;
    }
    let mut nodes = vec!["s".to_string()];
    for l in &layers {
        nodes.extend(l.iter().cloned());
    }
    nodes.push("w".into());
    let mut pairs: Vec<(String, String)> = layers[0].iter().map(|n| ("s".to_string(), n.clone())).collect();
    let last = layers.len() - 1;
    // the last layer always feeds the destination; what is left of its three slots goes to shortcuts
    let mut shortcuts = 3 - layers[last].len();
    for l in 0..last {
        let next = &layers[l + 1];
        let mut forward: Vec<Vec<usize>> = Vec::new();
        let mut direct = vec![false; layers[l].len()];
        for d in direct.iter_mut() {
            if shortcuts > 0 && rng.gen_bool(0.3) {
                shortcuts -= 1;
                *d = true;
                if rng.gen_bool(0.5) {
                    forward.push(Vec::new());
                    continue;
                }
            }
            let k = rng.gen_range(2..=next.len());
            let mut idx: Vec<usize> = (0..next.len()).collect();
            idx.shuffle(rng);
            idx.truncate(k);
            forward.push(idx);
        }
        if forward.iter().all(|f| f.is_empty()) {
            forward[0] = (0..next.len()).collect();
        }
        // every node of the next layer needs a predecessor
        for j in 0..next.len() {
            if forward.iter().any(|f| f.contains(&j)) {
                continue;
            }
            let feeders: Vec<usize> = (0..forward.len()).filter(|&a| !forward[a].is_empty()).collect();
            let a = *feeders.choose(rng).unwrap();
            forward[a].push(j);
        }
        for (a, outs) in forward.iter_mut().enumerate() {
            outs.sort();
            for &j in outs.iter() {
                pairs.push((layers[l][a].clone(), next[j].clone()));
            }
            if direct[a] {
                pairs.push((layers[l][a].clone(), "w".into()));
            }
        }
    }
    for n in &layers[last] {
        pairs.push((n.clone(), "w".into()));
    }
    let edges = pairs
        .into_iter()
        .map(|(a, b)| {
            let cost = random_convex_half(rng, 4.0);
            (a, b, cost)
        })
        .collect();
    scenario("random-dag".into(), nodes, 1.0, edges)
}

/// Duopoly focal profile: relay 1 offers `c(t)`, relay 2 offers `c(R_s - t)`
/// for a random curve `c` through the optimal crossing whose slopes keep both
/// relays' anticipated profits single-peaked. The source's indifference is
/// resolved by pins at `split`.
pub fn focal_duopoly_profile<R: Rng>(rng: &mut R, inst: &crate::io::Instance, opt: &Optimum, split: f64) -> Result<PricingProfile> {
    let game = inst.game();
    let relays = oligopoly_relays(&inst.net)?;
    if relays.len() != 2 {
        return Err(Error::NotOligopoly("focal duopoly needs two relays".into()));
    }
    let r = inst.session_rate;
    let lambdas = relay_path_marginals(&game, &relays)?;
    let f1 = opt.routing.throughput(&inst.net, relays[0]);
    let level = lambdas[0].eval(f1).min(lambdas[1].eval(r - f1));
    let min_slope = |l: &MarginalFn| l.segments().iter().map(|s| s.slope()).fold(f64::INFINITY, f64::min);
    let lo = -min_slope(&lambdas[1]);
    let hi = min_slope(&lambdas[0]);
    let pieces = 8;
    let xs: Vec<f64> = (0..=pieces).map(|k| r * k as f64 / pieces as f64).collect();
    let slopes: Vec<f64> = (0..pieces).map(|_| lo + (hi - lo) * rng.gen_range(0.05..0.95)).collect();
    // integrate the slopes and shift so that c(f1) = level
    let mut ys = vec![0.0; pieces + 1];
    for k in 0..pieces {
        ys[k + 1] = ys[k] + slopes[k] * (xs[k + 1] - xs[k]);
    }
    let c0 = MarginalFn::from_points(&xs.iter().copied().zip(ys.iter().copied()).collect::<Vec<_>>())?;
    let off = level - c0.eval(f1);
    let c = c0.map_values(|y| y + off);
    let mut p = PricingProfile::default();
    p.set_price(relays[0], inst.net.source(), c.clone());
    p.set_price(relays[1], inst.net.source(), c.reflect(r)?);
    p.pins.insert((inst.net.source(), relays[0]), split);
    p.pins.insert((inst.net.source(), relays[1]), r - split);
    Ok(p)
}

/// Every relay offers the same constant to each predecessor; pins are random.
pub fn constant_price_profile<R: Rng>(rng: &mut R, net: &Network, level: f64, span: f64, rate: f64) -> Result<PricingProfile> {
    let mut p = PricingProfile::default();
    for i in net.relays() {
        for h in net.predecessors(i)? {
            p.set_price(i, h, MarginalFn::constant(level, span)?);
        }
    }
    let outs = net.offsprings(net.source())?;
    let mut weights: Vec<f64> = outs.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w *= rate / total;
    }
    for (k, &j) in outs.iter().enumerate() {
        p.pins.insert((net.source(), j), weights[k]);
    }
    Ok(p)
}

/// Outcome of a randomized property suite.
#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    pub name: String,
    pub trials: usize,
    /// Trials whose profile verified as an equilibrium.
    pub verified: usize,
    /// Verified trials the property applied to.
    pub applicable: usize,
    /// Offending scenarios and profiles, as TOML.
    pub counterexamples: Vec<String>,
    /// Trials that could not be evaluated (solver or construction errors).
    pub errors: Vec<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty() && self.errors.is_empty()
    }
}

enum Trial {
    Skipped,
    Checked { verified: bool, applicable: bool, counterexample: Option<String> },
}

fn dump(sc: &Scenario, inst: &crate::io::Instance, p: &PricingProfile, note: &str) -> String {
    let profile = ProfileFile::from_profile(&inst.net, p).to_toml().unwrap_or_default();
    format!("# {note}\n{}\n# profile\n{profile}", sc.to_toml().unwrap_or_default())
}

fn run_suite(name: &str, seed: u64, trials: usize, f: impl Fn(&mut ChaCha8Rng) -> Result<Trial> + Sync) -> SuiteOutcome {
    let results: Vec<Result<Trial>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            f(&mut rng)
        })
        .collect();
    let mut out = SuiteOutcome { name: name.into(), trials, ..SuiteOutcome::default() };
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(Trial::Skipped) => {}
            Ok(Trial::Checked { verified, applicable, counterexample }) => {
                out.verified += usize::from(verified);
                out.applicable += usize::from(applicable);
                if let Some(c) = counterexample {
                    out.counterexamples.push(format!("# trial {t}\n{c}"));
                }
            }
            Err(e) => out.errors.push(format!("trial {t}: {e}")),
        }
    }
    out
}

/// Verified oligopoly equilibria that are competitive must be efficient.
pub fn competitive_oligopoly_suite(seed: u64, trials: usize) -> SuiteOutcome {
    run_suite("competitive oligopoly equilibria are efficient", seed, trials, |rng| {
        let sc = random_convex_oligopoly(rng, 4);
        let inst = sc.build()?;
        let game = inst.game();
        let opt = optimum(&game)?;
        let profile = match rng.gen_range(0..4) {
            0 => construct_marginal_cost_equilibrium(&game)?.0.profile,
            1 => construct_monopolistic_equilibrium(&game)?.0.profile,
            2 if inst.net.node_count() == 4 => {
                let f1 = opt.routing.throughput(&inst.net, NodeId(1));
                let split = if rng.gen_bool(0.5) { f1 } else { off_split(rng, f1, inst.session_rate) };
                focal_duopoly_profile(rng, &inst, &opt, split)?
            }
            _ => {
                let lam = crate::flow::path_min_marginals(&inst.net, &opt.routing, &inst.costs)?;
                let level = lam[inst.net.source().0] * rng.gen_range(0.8..1.2);
                constant_price_profile(rng, &inst.net, level, 2.0 * inst.session_rate, inst.session_rate)?
            }
        };
        let rep = evaluate(&game, &profile, &opt)?;
        let applicable = rep.verified && rep.structure.competitive;
        let counterexample = (applicable && !rep.efficient).then(|| dump(&sc, &inst, &profile, "competitive but inefficient"));
        Ok(Trial::Checked { verified: rep.verified, applicable, counterexample })
    })
}

fn off_split<R: Rng>(rng: &mut R, f: f64, r: f64) -> f64 {
    // at least a twentieth of the session away from the optimal split
    loop {
        let x = rng.gen_range(0.0..=r);
        if (x - f).abs() >= 0.05 * r {
            return x;
        }
    }
}

/// Verified focal oligopoly equilibria must be efficient.
pub fn focal_oligopoly_suite(seed: u64, trials: usize) -> SuiteOutcome {
    run_suite("focal oligopoly equilibria are efficient", seed, trials, |rng| {
        let mut sc = random_convex_oligopoly(rng, 2);
        if sc.nodes.len() != 4 {
            sc = random_convex_oligopoly(rng, 2);
        }
        let inst = sc.build()?;
        let game = inst.game();
        let opt = optimum(&game)?;
        let profile = if rng.gen_bool(0.2) {
            construct_marginal_cost_equilibrium(&game)?.0.profile
        } else {
            let f1 = opt.routing.throughput(&inst.net, NodeId(1));
            let split = if rng.gen_bool(0.5) { f1 } else { off_split(rng, f1, inst.session_rate) };
            focal_duopoly_profile(rng, &inst, &opt, split)?
        };
        let rep = evaluate(&game, &profile, &opt)?;
        let applicable = rep.verified && rep.focal;
        let counterexample = (applicable && !rep.efficient).then(|| dump(&sc, &inst, &profile, "focal but inefficient"));
        Ok(Trial::Checked { verified: rep.verified, applicable, counterexample })
    })
}

/// Verified general-network equilibria that are everywhere competitive must be efficient.
pub fn everywhere_competitive_suite(seed: u64, trials: usize) -> SuiteOutcome {
    run_suite("everywhere-competitive equilibria are efficient", seed, trials, |rng| {
        let kind = rng.gen_range(0..3);
        let sc = if kind == 1 {
            let mut params = BTreeMap::new();
            params.insert("M".to_string(), rng.gen_range(10.0..200.0));
            params.insert("eps".to_string(), rng.gen_range(0.05..0.5));
            params.insert("delta".to_string(), rng.gen_range(0.5..1.0));
            generate_example("myopic-general", &params)?
        } else {
            random_dag(rng)
        };
        let inst = sc.build()?;
        let game = inst.game();
        let opt = optimum(&game)?;
        let profile = match kind {
            0 => construct_marginal_cost_equilibrium(&game)?.0.profile,
            1 => inst.profile.clone().unwrap_or_default(),
            _ => {
                // marginal cost prices with the source's split re-pinned at random
                let mut p = construct_marginal_cost_equilibrium(&game)?.0.profile;
                let outs = inst.net.offsprings(inst.net.source())?;
                let mut ws: Vec<f64> = outs.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
                let tot: f64 = ws.iter().sum();
                for w in &mut ws {
                    *w *= inst.session_rate / tot;
                }
                for (k, &j) in outs.iter().enumerate() {
                    p.pins.insert((inst.net.source(), j), ws[k]);
                }
                p
            }
        };
        let rep = evaluate(&game, &profile, &opt)?;
        let applicable = rep.verified && rep.structure.everywhere_competitive;
        let counterexample =
            (applicable && !rep.efficient).then(|| dump(&sc, &inst, &profile, "everywhere competitive but inefficient"));
        Ok(Trial::Checked { verified: rep.verified, applicable, counterexample })
    })
}

/// When the optimum of an oligopoly is monopolistic, the monopolistic
/// construction verifies and is efficient.
pub fn monopolistic_optimum_suite(seed: u64, trials: usize) -> SuiteOutcome {
    run_suite("monopolistic optimum is a monopolistic efficient equilibrium", seed, trials, |rng| {
        let n = rng.gen_range(2..=4);
        let r = 1.0;
        let a = rng.gen_range(0.2..2.0);
        let mut halves = vec![lin(0.0, a / 2.0)];
        for _ in 1..n {
            let c = a * r * rng.gen_range(1.05..3.0);
            halves.push(lin(c / 2.0, rng.gen_range(0.1..2.0) / 2.0));
        }
        halves.shuffle(rng);
        let sc = oligopoly_scenario("monopolistic-optimum".into(), r, halves);
        let inst = sc.build()?;
        let game = inst.game();
        let opt = optimum(&game)?;
        if !classify(&inst.net, &opt.routing, game.settings.tol).monopolistic {
            return Ok(Trial::Skipped);
        }
        let profile = construct_monopolistic_equilibrium(&game)?.0.profile;
        let rep = evaluate(&game, &profile, &opt)?;
        let counterexample = (!(rep.verified && rep.efficient))
            .then(|| dump(&sc, &inst, &profile, "monopolistic optimum without an efficient monopolistic equilibrium"));
        Ok(Trial::Checked { verified: rep.verified, applicable: true, counterexample })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn classify_examples() {
        let net = Network::oligopoly(3).unwrap();
        let mut r = Routing::zero(&net, 1.0);
        let set = |r: &mut Routing, j: usize, f: f64| {
            let e1 = net.edge(net.source(), NodeId(j)).unwrap();
            let e2 = net.edge(NodeId(j), net.destination()).unwrap();
            r.flows[e1.0] = f;
            r.flows[e2.0] = f;
        };
        set(&mut r, 1, 1.0);
        let s = classify(&net, &r, 1e-9);
        assert!(s.monopolistic && !s.competitive && !s.everywhere_competitive);
        for j in 1..=3 {
            set(&mut r, j, 1.0 / 3.0);
        }
        let s = classify(&net, &r, 1e-9);
        assert!(s.competitive && s.everywhere_competitive && !s.monopolistic);
    }

    #[test]
    fn generators_build() {
        for fam in FAMILIES {
            let sc = generate_example(fam, &BTreeMap::new()).unwrap();
            sc.build().unwrap_or_else(|e| panic!("{fam}: {e}"));
        }
        assert!(generate_example("nope", &BTreeMap::new()).is_err());
        assert!(generate_example("myopic-general", &params(&[("M", 1.0)])).is_err());
        assert!(generate_example("oligopoly-linear", &params(&[("N", 1.0)])).is_err());
        assert!(generate_example("oligopoly-linear", &params(&[("Q", 1.0)])).is_err());
    }

    #[test]
    fn myopic_labels() {
        let sc = generate_example("myopic-general", &params(&[("M", 100.0), ("eps", 0.2), ("delta", 1.0), ("R_s", 1.0)])).unwrap();
        let inst = sc.build().unwrap();
        let e = inst.net.edge(inst.net.id_of("g").unwrap(), inst.net.destination()).unwrap();
        let d = inst.costs.marginal(e);
        assert!((d.eval(0.0) - (200.0 + 0.4 - 2.0)).abs() < 1e-9);
        assert!((d.eval(2.0) - 200.4).abs() < 1e-9);
    }

    #[test]
    fn elastic_transform_adds_overflow() {
        let sc = generate_example("elastic-oligopoly", &BTreeMap::new()).unwrap();
        let inst = sc.build().unwrap();
        let e = inst.overflow.unwrap();
        assert_eq!(inst.net.endpoints(e), (inst.net.source(), inst.net.destination()));
        // d_sw(f) = u(R - f) = 1 - (1 - f) = f
        assert!((inst.costs.marginal(e).eval(0.25) - 0.25).abs() < 1e-12);
        let net = Network::oligopoly(2).unwrap();
        let costs = LinkCosts::new(&net, vec![MarginalFn::affine(0.0, 1.0, 4.0).unwrap(); 4]).unwrap();
        let rising = MarginalFn::affine(0.0, 1.0, 1.0).unwrap();
        assert!(elastic_transform(&net, &costs, &rising, 1.0).is_err());
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(10.0, 1000.0, 3), vec![10.0, 505.0, 1000.0]);
        assert_eq!(linspace(1.0, 2.0, 1), vec![1.0]);
    }

    #[test]
    fn random_dags_are_valid() {
        for t in 0..50 {
            let mut rng = trial_rng(7, t);
            let sc = random_dag(&mut rng);
            let inst = sc.build().unwrap_or_else(|e| panic!("trial {t}: {e}\n{}", sc.to_toml().unwrap()));
            assert!(inst.net.node_count() <= 10);
            for i in inst.net.nodes() {
                assert!(inst.net.predecessors(i).unwrap().len() <= 3);
            }
        }
    }
}
