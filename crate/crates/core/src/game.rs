//! The pricing game: local information, best responses, equilibrium
//! construction and verification.
//!
//! Prices are kept in the B-view: the function relay `i` announces to
//! predecessor `h` already includes the link cost `D_hi`, so `h` simply
//! minimizes the sum of the offers it receives. The destination does not
//! price; its offer to `h` is the bare link cost `D_hw`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{
    node_cost_fn, path_min_marginals, socially_optimal_routing, LinkCosts, NodeCostFn, Optimum, Routing,
    SolverOptions,
};
use crate::marginals::{inf_convolve, lower_convex_hull, Segment};
use crate::network::{Network, NodeId};
use crate::{Convolution, CostFn, MarginalFn, Settings};

/// Largest predecessor set handled by the box search for ideal flows.
pub const MAX_PREDECESSORS: usize = 3;

/// Everything the game is played on.
#[derive(Clone, Copy, Debug)]
pub struct Game<'a> {
    pub net: &'a Network,
    pub costs: &'a LinkCosts,
    pub session_rate: f64,
    pub settings: Settings,
}

impl<'a> Game<'a> {
    pub fn new(net: &'a Network, costs: &'a LinkCosts, session_rate: f64, settings: Settings) -> Self {
        Game { net, costs, session_rate, settings }
    }

    /// Domain given to constant and honest prices.
    pub fn price_span(&self) -> f64 {
        2.0 * self.session_rate
    }

    fn relay_name(&self, i: NodeId) -> String {
        self.net.name(i).to_string()
    }
}

/// One pricing function per (relay, predecessor), plus optional pinned flows
/// that select among allocations a node is indifferent between.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PricingProfile {
    /// `(relay, predecessor) -> β`.
    pub prices: BTreeMap<(NodeId, NodeId), MarginalFn>,
    /// `(from, to) -> flow`.
    pub pins: BTreeMap<(NodeId, NodeId), f64>,
}

impl PricingProfile {
    pub fn price(&self, relay: NodeId, predecessor: NodeId) -> Option<&MarginalFn> {
        self.prices.get(&(relay, predecessor))
    }

    pub fn set_price(&mut self, relay: NodeId, predecessor: NodeId, beta: MarginalFn) {
        self.prices.insert((relay, predecessor), beta);
    }

    /// Every relay has a price for every predecessor.
    pub fn check_complete(&self, net: &Network) -> Result<()> {
        for i in net.relays() {
            for h in net.predecessors(i)? {
                if self.price(i, h).is_none() {
                    return Err(Error::MissingPrice { relay: net.name(i).into(), predecessor: net.name(h).into() });
                }
            }
        }
        Ok(())
    }
}

/// `B_k^h`: what node `h` pays when sending flow to offspring `k`.
pub fn offer(game: &Game, profile: &PricingProfile, h: NodeId, k: NodeId) -> Result<CostFn> {
    if k == game.net.destination() {
        let e = game.net.edge(h, k).ok_or_else(|| Error::NotPredecessor {
            node: game.net.name(h).into(),
            of: game.net.name(k).into(),
        })?;
        return Ok(game.costs.cost(e).clone());
    }
    let beta = profile.price(k, h).ok_or_else(|| Error::MissingPrice {
        relay: game.net.name(k).into(),
        predecessor: game.net.name(h).into(),
    })?;
    Ok(CostFn::new(beta.clone()))
}

/// Offers received by `h`, in offspring order.
pub fn offers_at(game: &Game, profile: &PricingProfile, h: NodeId) -> Result<Vec<CostFn>> {
    game.net.offsprings(h)?.into_iter().map(|k| offer(game, profile, h, k)).collect()
}

fn capacity(offers: &[CostFn]) -> f64 {
    offers.iter().map(|o| o.domain_hi()).sum()
}

/// `D_i` over `[0, r_max]`, shortened to what the offers can carry.
pub fn node_cost(game: &Game, profile: &PricingProfile, i: NodeId, r_max: f64) -> Result<Option<NodeCostFn>> {
    let offers = offers_at(game, profile, i)?;
    let hi = r_max.min(capacity(&offers));
    if !(hi > 0.0) {
        return Ok(None);
    }
    node_cost_fn(i, &offers, hi, game.settings.grid).map(Some)
}

/// A pinned allocation that was not used.
#[derive(Clone, Debug, PartialEq)]
pub struct PinRejection {
    pub node: NodeId,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct InducedRouting {
    pub routing: Routing,
    pub pin_rejections: Vec<PinRejection>,
}

/// Routing that results when every node splits its flow at minimum cost
/// given the offers it receives, processed from the source downwards.
///
/// Pinned flows at a node are used when they sum to its throughput and cost
/// no more than the minimum plus `tol`; otherwise the node falls back to the
/// lexicographically smallest cost-minimizing split and the rejection is recorded.
pub fn induced_routing(game: &Game, profile: &PricingProfile) -> Result<InducedRouting> {
    let net = game.net;
    let mut routing = Routing::zero(net, game.session_rate);
    let mut pin_rejections = Vec::new();
    for h in net.topological_order()? {
        if h == net.destination() {
            continue;
        }
        let r = routing.throughput(net, h);
        if r <= 0.0 {
            continue;
        }
        let offers = offers_at(game, profile, h)?;
        let conv = inf_convolve(&offers, r, game.settings.step(r))?;
        let edges = net.out_edges(h);
        let pinned: Vec<Option<f64>> = edges
            .iter()
            .map(|&e| profile.pins.get(&net.endpoints(e)).copied())
            .collect();
        let mut alloc = None;
        if pinned.iter().any(|p| p.is_some()) {
            let x: Vec<f64> = pinned.iter().map(|p| p.unwrap_or(0.0)).collect();
            let sum: f64 = x.iter().sum();
            let fits = x.iter().zip(&offers).all(|(&v, o)| v >= 0.0 && v <= o.domain_hi() * (1.0 + 1e-12));
            let best = conv.integral().eval(r);
            if (sum - r).abs() > 1e-9 * (1.0 + r) {
                pin_rejections.push(PinRejection {
                    node: h,
                    reason: format!("pinned flows sum to {sum}, node forwards {r}"),
                });
            } else if !fits {
                pin_rejections.push(PinRejection { node: h, reason: "pinned flow exceeds an offer's domain".into() });
            } else {
                let cost: f64 = x.iter().zip(&offers).map(|(&v, o)| o.eval(v)).sum();
                if cost <= best + game.settings.tol {
                    let scale = r / sum;
                    alloc = Some(x.iter().map(|v| v * scale).collect::<Vec<f64>>());
                } else {
                    pin_rejections.push(PinRejection {
                        node: h,
                        reason: format!("pinned split costs {cost}, minimum is {best}"),
                    });
                }
            }
        }
        let alloc = match alloc {
            Some(a) => a,
            None => conv.allocate(r)?,
        };
        for (&e, x) in edges.iter().zip(alloc) {
            routing.flows[e.0] = x;
        }
    }
    Ok(InducedRouting { routing, pin_rejections })
}

/// `B̂_i^h`: the cheapest way for `h` to forward `rate` without using `i`.
pub fn virtual_competitor(game: &Game, profile: &PricingProfile, i: NodeId, h: NodeId, rate: f64) -> Result<Convolution> {
    let sibs = game.net.siblings(i, h)?;
    if sibs.is_empty() {
        return Err(Error::NoCompetitor { relay: game.relay_name(i), predecessor: game.relay_name(h) });
    }
    let offers = sibs
        .into_iter()
        .map(|j| offer(game, profile, h, j))
        .collect::<Result<Vec<_>>>()?;
    inf_convolve(&offers, rate, game.settings.step(rate))
}

/// One predecessor's market as seen by a relay.
#[derive(Clone, Debug)]
pub struct Market {
    pub predecessor: NodeId,
    /// `r_h`.
    pub rate: f64,
    /// `f_hi` under the routing the local view was taken from.
    pub flow: f64,
    /// `B̂_i^h`, present when `rate > 0`.
    pub competitor: Option<Convolution>,
    /// `D_hi`.
    pub link: CostFn,
}

impl Market {
    /// `t -> β̂(r_h - t)` on `[0, r_h]`.
    pub fn reflected(&self) -> Result<Option<MarginalFn>> {
        match &self.competitor {
            Some(c) => c.marginal().reflect(c.t_max()).map(Some),
            None => Ok(None),
        }
    }
}

/// `𝑳_i`: what relay `i` knows.
#[derive(Clone, Debug)]
pub struct LocalInfo {
    pub relay: NodeId,
    pub markets: Vec<Market>,
    /// `D_i` over the total rate of the relay's active markets.
    pub node_cost: Option<NodeCostFn>,
}

/// Collects relay `i`'s local information under `routing`.
pub fn local_info(game: &Game, profile: &PricingProfile, routing: &Routing, i: NodeId) -> Result<LocalInfo> {
    let net = game.net;
    let mut markets = Vec::new();
    for h in net.predecessors(i)? {
        let e = net.edge(h, i).unwrap();
        let rate = routing.throughput(net, h);
        let competitor = if rate > 0.0 { Some(virtual_competitor(game, profile, i, h, rate)?) } else { None };
        markets.push(Market { predecessor: h, rate, flow: routing.flow(e), competitor, link: game.costs.cost(e).clone() });
    }
    let total: f64 = markets.iter().filter(|m| m.rate > 0.0).map(|m| m.rate).sum();
    let node_cost = if total > 0.0 { node_cost(game, profile, i, total)? } else { None };
    Ok(LocalInfo { relay: i, markets, node_cost })
}

/// `Γ̄_i` restricted to the active markets.
struct Objective {
    /// Indices into `LocalInfo::markets`.
    active: Vec<usize>,
    /// Upper end of each box coordinate.
    caps: Vec<f64>,
    /// Marginals of `B̂(r_h) - B̂(r_h - t) - D_hi(t)`.
    parts: Vec<MarginalFn>,
    part_integrals: Vec<CostFn>,
    node: Option<CostFn>,
}

impl Objective {
    fn new(info: &LocalInfo) -> Result<Self> {
        let mut active = Vec::new();
        let mut caps = Vec::new();
        let mut parts = Vec::new();
        for (k, m) in info.markets.iter().enumerate() {
            let Some(refl) = m.reflected()? else { continue };
            let part = refl.sub(m.link.marginal())?;
            active.push(k);
            caps.push(part.domain_hi().min(m.rate));
            parts.push(part);
        }
        let part_integrals = parts.iter().cloned().map(CostFn::new).collect();
        let node = info.node_cost.as_ref().map(|n| n.cost().clone());
        Ok(Objective { active, caps, parts, part_integrals, node })
    }

    fn node_eval(&self, total: f64) -> f64 {
        match &self.node {
            Some(d) if total > d.domain_hi() * (1.0 + 1e-12) => f64::INFINITY,
            Some(d) => d.eval(total),
            None if total > 0.0 => f64::INFINITY,
            None => 0.0,
        }
    }

    fn value(&self, f: &[f64]) -> f64 {
        let gain: f64 = self.part_integrals.iter().zip(f).map(|(p, &x)| p.eval(x)).sum();
        gain - self.node_eval(f.iter().sum())
    }

    /// Exact maximizer of coordinate `k` with the others held fixed.
    fn best_coordinate(&self, f: &[f64], k: usize) -> Result<f64> {
        let others: f64 = f.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, x)| x).sum();
        let part = self.parts[k].restrict(self.caps[k].min(self.parts[k].domain_hi()))?;
        let phi = match &self.node {
            Some(d) => {
                let dm = d.marginal();
                if others >= dm.domain_hi() {
                    return Ok(0.0);
                }
                part.sub(&dm.shift(others)?)?
            }
            None => return Ok(0.0),
        };
        Ok(argmax_integral(&phi).0)
    }
}

/// Maximizer of `t -> ∫₀ᵗ φ` over the domain of `φ`, smallest on ties.
pub fn argmax_integral(phi: &MarginalFn) -> (f64, f64) {
    let integral = CostFn::new(phi.clone());
    let mut cands = phi.breakpoints();
    for s in phi.segments() {
        if s.y_lo > 0.0 && s.y_hi < 0.0 {
            cands.push(s.x_lo + s.width() * s.y_lo / (s.y_lo - s.y_hi));
        }
    }
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: (f64, f64) = (0.0, 0.0);
    for t in cands {
        let v = integral.eval(t);
        if v > best.1 + 1e-13 * (1.0 + best.1.abs()) {
            best = (t, v);
        }
    }
    best
}

/// Ideal flows, the anticipated profit at them, and the replicating response.
#[derive(Clone, Debug)]
pub struct BestResponseResult {
    /// `(predecessor, f̃_hi)`; zero for markets with no traffic.
    pub ideal_flows: Vec<(NodeId, f64)>,
    /// `Γ̄_i` at the ideal flows.
    pub anticipated_profit: f64,
    /// `(predecessor, β)`.
    pub response: Vec<(NodeId, MarginalFn)>,
}

fn grid_points(cap: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| if k == n { cap } else { cap * k as f64 / n as f64 }).collect()
}

fn better(a: (f64, &[f64]), b: (f64, &[f64])) -> bool {
    // larger value, then smaller total, then lexicographically smaller
    let tol = 1e-12 * (1.0 + a.0.abs().max(b.0.abs()));
    if a.0 > b.0 + tol {
        return true;
    }
    if a.0 < b.0 - tol {
        return false;
    }
    let (sa, sb): (f64, f64) = (a.1.iter().sum(), b.1.iter().sum());
    if sa < sb - 1e-12 {
        return true;
    }
    if sa > sb + 1e-12 {
        return false;
    }
    a.1.iter().zip(b.1).find(|(x, y)| x != y).map(|(x, y)| x < y).unwrap_or(false)
}

/// Maximizes `Γ̄_i` over the box `∏_h [0, r_h]`.
///
/// A single active market is solved exactly. With two or three, a box grid
/// search is followed by exact coordinate-wise refinement, also started
/// from `hint` when given.
pub fn ideal_flows(info: &LocalInfo, hint: Option<&[f64]>) -> Result<(Vec<(NodeId, f64)>, f64)> {
    let obj = Objective::new(info)?;
    let mut flows: Vec<(NodeId, f64)> = info.markets.iter().map(|m| (m.predecessor, 0.0)).collect();
    let dims = obj.active.len();
    if dims == 0 {
        return Ok((flows, 0.0));
    }
    if dims > MAX_PREDECESSORS {
        return Err(Error::TooManyPredecessors { relay: format!("{}", info.relay), count: dims, cap: MAX_PREDECESSORS });
    }
    let best = if dims == 1 {
        let f = [obj.best_coordinate(&[0.0], 0)?];
        (obj.value(&f), f.to_vec())
    } else {
        let n = if dims == 2 { 400 } else { 100 };
        let axes: Vec<Vec<f64>> = obj.caps.iter().map(|&c| grid_points(c, n)).collect();
        let tables: Vec<Vec<f64>> = obj
            .part_integrals
            .iter()
            .zip(&axes)
            .map(|(p, ax)| ax.iter().map(|&x| p.eval(x)).collect())
            .collect();
        let mut best = (f64::NEG_INFINITY, vec![0.0; dims]);
        let mut idx = vec![0usize; dims];
        loop {
            let f: Vec<f64> = idx.iter().zip(&axes).map(|(&k, ax)| ax[k]).collect();
            let gain: f64 = idx.iter().zip(&tables).map(|(&k, t)| t[k]).sum();
            let v = gain - obj.node_eval(f.iter().sum());
            if better((v, &f), (best.0, &best.1)) {
                best = (v, f);
            }
            let mut d = dims;
            loop {
                if d == 0 {
                    break;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] <= n {
                    break;
                }
                idx[d] = 0;
                if d == 0 {
                    d = usize::MAX;
                    break;
                }
            }
            if d == usize::MAX {
                break;
            }
        }
        let mut starts = vec![best.1.clone()];
        if let Some(h) = hint {
            let s: Vec<f64> = obj.active.iter().zip(&obj.caps).map(|(&k, &c)| h[k].clamp(0.0, c)).collect();
            starts.push(s);
        }
        for mut f in starts {
            for _ in 0..100 {
                let before = obj.value(&f);
                for k in 0..dims {
                    f[k] = obj.best_coordinate(&f, k)?;
                }
                if obj.value(&f) <= before + 1e-15 * (1.0 + before.abs()) {
                    break;
                }
            }
            let v = obj.value(&f);
            if better((v, &f), (best.0, &best.1)) {
                best = (v, f);
            }
        }
        best
    };
    for (&k, x) in obj.active.iter().zip(best.1) {
        flows[k].1 = x;
    }
    Ok((flows, best.0))
}

/// `Γ̄_i` at arbitrary flows (one per market, in predecessor order).
pub fn anticipated_profit(info: &LocalInfo, flows: &[f64]) -> Result<f64> {
    let obj = Objective::new(info)?;
    let f: Vec<f64> = obj.active.iter().zip(&obj.caps).map(|(&k, &c)| flows[k].clamp(0.0, c)).collect();
    Ok(obj.value(&f))
}

/// Honest price of relay `i` towards predecessor `h`:
/// `β(t) = d_hi(t) + d_i(t + Σ_{h'≠h} f_h'i)` on `[0, price_span]`.
pub fn honest_pricing(game: &Game, profile: &PricingProfile, routing: &Routing, i: NodeId, h: NodeId) -> Result<MarginalFn> {
    let net = game.net;
    let e = net.edge(h, i).ok_or_else(|| Error::NotPredecessor { node: net.name(h).into(), of: net.name(i).into() })?;
    let shift: f64 = net
        .in_edges(i)
        .iter()
        .filter(|&&x| x != e)
        .map(|x| routing.flow(*x))
        .sum();
    let span = game.price_span().min(game.costs.marginal(e).domain_hi());
    let d_i = node_cost(game, profile, i, span + shift)?
        .ok_or_else(|| Error::Construction(format!("relay `{}` cannot forward any flow", net.name(i))))?;
    let dm = d_i.marginal();
    if shift >= dm.domain_hi() {
        return Err(Error::Construction(format!("relay `{}` has no spare capacity", net.name(i))));
    }
    game.costs.marginal(e).restrict(span)?.add(&dm.shift(shift)?)
}

/// Best response of relay `i`: ideal flows and the replicating response
/// (reflected virtual competitor on active markets, honest pricing elsewhere).
pub fn best_response(game: &Game, profile: &PricingProfile, routing: &Routing, i: NodeId) -> Result<BestResponseResult> {
    let info = local_info(game, profile, routing, i)?;
    let hint: Vec<f64> = info.markets.iter().map(|m| m.flow).collect();
    let (ideal, value) = ideal_flows(&info, Some(&hint))?;
    let response = replicating_response(game, profile, routing, &info)?;
    Ok(BestResponseResult { ideal_flows: ideal, anticipated_profit: value, response })
}

/// The replicating response for every market of the relay in `info`.
pub fn replicating_response(
    game: &Game,
    profile: &PricingProfile,
    routing: &Routing,
    info: &LocalInfo,
) -> Result<Vec<(NodeId, MarginalFn)>> {
    info.markets
        .iter()
        .map(|m| {
            let beta = match m.reflected()? {
                Some(r) => r,
                None => honest_pricing(game, profile, routing, info.relay, m.predecessor)?,
            };
            Ok((m.predecessor, beta))
        })
        .collect()
}

/// A constructed equilibrium candidate.
#[derive(Clone, Debug)]
pub struct Constructed {
    pub profile: PricingProfile,
    /// Routing the construction intends to induce.
    pub routing: Routing,
}

/// Marginal cost pricing: every relay offers the constant `λ_h*` to each
/// predecessor `h` that carries flow at the social optimum, and prices
/// honestly towards the others. Pins reproduce the optimal split.
pub fn construct_marginal_cost_equilibrium(game: &Game) -> Result<(Constructed, Optimum)> {
    let net = game.net;
    let opts = SolverOptions { tol: (game.settings.tol * 1e-3).min(1e-7), ..SolverOptions::default() };
    let opt = socially_optimal_routing(net, game.costs, game.session_rate, opts)?;
    let lambda = path_min_marginals(net, &opt.routing, game.costs)?;
    let mut profile = PricingProfile::default();
    let span = game.price_span();
    for i in net.reverse_topological_order()? {
        if !net.is_relay(i) {
            continue;
        }
        for h in net.predecessors(i)? {
            if opt.routing.throughput(net, h) > 0.0 {
                profile.set_price(i, h, MarginalFn::constant(lambda[h.0], span)?);
            } else {
                let beta = honest_pricing(game, &profile, &opt.routing, i, h)?;
                profile.set_price(i, h, beta);
            }
        }
    }
    for h in net.nodes() {
        if h == net.destination() || opt.routing.throughput(net, h) <= 0.0 {
            continue;
        }
        for &e in net.out_edges(h) {
            profile.pins.insert(net.endpoints(e), opt.routing.flow(e));
        }
    }
    let routing = opt.routing.clone();
    Ok((Constructed { profile, routing }, opt))
}

/// Relays of a single-layer oligopoly, in offspring order of the source.
pub fn oligopoly_relays(net: &Network) -> Result<Vec<NodeId>> {
    let s = net.source();
    let w = net.destination();
    let relays = net.offsprings(s)?;
    if relays.contains(&w) {
        return Err(Error::NotOligopoly("source links directly to the destination".into()));
    }
    for &j in &relays {
        if net.predecessors(j)? != vec![s] || net.offsprings(j)? != vec![w] {
            return Err(Error::NotOligopoly(format!("relay `{}` is not a single hop", net.name(j))));
        }
    }
    if net.node_count() != relays.len() + 2 {
        return Err(Error::NotOligopoly("extra nodes beyond one relay layer".into()));
    }
    if relays.len() < 2 {
        return Err(Error::NotOligopoly(format!("needs at least two relays, found {}", relays.len())));
    }
    Ok(relays)
}

/// Path marginal `λ_j = d_sj + d_jw` of each oligopoly relay on `[0, R_s]`.
pub fn relay_path_marginals(game: &Game, relays: &[NodeId]) -> Result<Vec<MarginalFn>> {
    let net = game.net;
    let r = game.session_rate;
    relays
        .iter()
        .map(|&j| {
            let a = game.costs.marginal(net.edge(net.source(), j).unwrap()).restrict(r)?;
            let b = game.costs.marginal(net.edge(j, net.destination()).unwrap()).restrict(r)?;
            a.add(&b)
        })
        .collect()
}

/// Monopolistic oligopoly equilibrium: all relays announce one common
/// strictly decreasing price and the relay with the smallest total path
/// cost carries everything.
///
/// The reflected price `ρ` integrates to a convex minorant of
/// `min_j ∫₀ᵗ λ_j` that meets the dominant relay's total at `R_s`, so no relay
/// expects a positive profit from any share.
pub fn construct_monopolistic_equilibrium(game: &Game) -> Result<(Constructed, NodeId)> {
    let net = game.net;
    let relays = oligopoly_relays(net)?;
    let r = game.session_rate;
    if !(r > 0.0) {
        return Err(Error::InvalidParameter("session rate must be positive".into()));
    }
    let lambdas = relay_path_marginals(game, &relays)?;
    let areas: Vec<CostFn> = lambdas.iter().cloned().map(CostFn::new).collect();
    let m = (0..relays.len())
        .min_by(|&a, &b| areas[a].eval(r).partial_cmp(&areas[b].eval(r)).unwrap())
        .unwrap();
    let grid = game.settings.grid.max(16);
    let mut ts: Vec<f64> = grid_points(r, grid);
    for l in &lambdas {
        ts.extend(l.breakpoints());
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * (1.0 + r));
    let lower = |t: f64| areas.iter().map(|a| a.eval(t)).fold(f64::INFINITY, f64::min);
    let points: Vec<(f64, f64)> = ts.iter().map(|&t| (t, lower(t))).collect();
    let mut hull = lower_convex_hull(&points);
    // pin the end to the dominant relay's total so the areas match exactly
    if let Some(last) = hull.last_mut() {
        last.1 = areas[m].eval(r);
    }
    let kappa = lambdas
        .iter()
        .flat_map(|l| l.segments().iter().map(|s| s.slope().abs()))
        .fold(0.0, f64::max);
    let mean_slope = (lambdas[m].eval(r) - lambdas[m].eval(0.0)).abs() / r;
    let h = r / grid as f64;
    let eps = (1e-3 * mean_slope).max(2.0 * kappa * h / r).max(1e-9);
    let tilt = |t: f64| eps * (t - r / 2.0);
    let mut segs = Vec::with_capacity(hull.len());
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let rho0 = (b.1 - a.1) / (b.0 - a.0);
        segs.push(Segment::new(a.0, b.0, rho0 + tilt(a.0), rho0 + tilt(b.0)));
    }
    let rho = MarginalFn::new(segs)?;
    let beta = rho.reflect(r)?;
    let p = CostFn::new(rho);
    let mut check = grid_points(r, 4 * grid);
    check.extend(ts.iter().copied());
    for &t in &check {
        let gap = p.eval(t) - lower(t);
        if gap > game.settings.tol {
            return Err(Error::Construction(format!(
                "reflected price exceeds the cheapest relay cost by {gap:e} at t = {t}"
            )));
        }
    }
    let mut profile = PricingProfile::default();
    for &j in &relays {
        profile.set_price(j, net.source(), beta.clone());
    }
    let mut routing = Routing::zero(net, r);
    for (k, &j) in relays.iter().enumerate() {
        let flow = if k == m { r } else { 0.0 };
        profile.pins.insert((net.source(), j), flow);
        let e1 = net.edge(net.source(), j).unwrap();
        let e2 = net.edge(j, net.destination()).unwrap();
        routing.flows[e1.0] = flow;
        routing.flows[e2.0] = flow;
    }
    Ok((Constructed { profile, routing }, relays[m]))
}

/// Verification of one market of one relay.
#[derive(Clone, Debug)]
pub struct MarketCheck {
    pub predecessor: NodeId,
    pub rate: f64,
    pub flow: f64,
    /// Largest amount by which the competitor bound exceeds the relay's offer.
    pub lower_bound_violation: f64,
    /// Mismatch between the relay's offer and the competitor bound at the induced flow.
    pub equality_violation: f64,
    /// Deviation from honest pricing on a market without traffic.
    pub honest_violation: f64,
    /// Offer integral equals the reflected competitor up to the induced flow.
    pub replicating: bool,
}

/// Verification of one relay.
#[derive(Clone, Debug)]
pub struct RelayCheck {
    pub relay: NodeId,
    pub markets: Vec<MarketCheck>,
    pub ideal_flows: Vec<(NodeId, f64)>,
    /// `Γ̄_i` at the ideal flows.
    pub anticipated_profit: f64,
    /// `Γ̄_i` at the induced flows.
    pub induced_profit: f64,
    /// Realized profit under the induced routing.
    pub realized_profit: f64,
    pub worst_violation: f64,
    /// Human-readable description of a profitable deviation, when one was found.
    pub deviation: Option<String>,
}

impl RelayCheck {
    pub fn focal(&self) -> bool {
        self.markets.iter().all(|m| m.replicating)
    }
}

/// Outcome of [`verify_equilibrium`].
#[derive(Clone, Debug)]
pub struct Verification {
    pub verified: bool,
    pub worst_violation: f64,
    pub routing: Routing,
    pub relays: Vec<RelayCheck>,
    pub pin_rejections: Vec<PinRejection>,
}

impl Verification {
    /// Every relay plays a replicating response.
    pub fn focal(&self) -> bool {
        self.relays.iter().all(|r| r.focal())
    }

    pub fn deviating_relays(&self) -> Vec<NodeId> {
        self.relays.iter().filter(|r| r.deviation.is_some()).map(|r| r.relay).collect()
    }
}

fn check_points(rate: f64, grid: usize, fns: &[&MarginalFn]) -> Vec<f64> {
    let mut ts = grid_points(rate, grid);
    for f in fns {
        ts.extend(f.breakpoints().into_iter().filter(|&x| x <= rate));
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts
}

/// Realized profit of relay `i`: payments received minus link costs of its
/// incoming traffic minus what it pays downstream.
pub fn realized_profit(game: &Game, profile: &PricingProfile, routing: &Routing, i: NodeId) -> Result<f64> {
    let net = game.net;
    let mut profit = 0.0;
    for h in net.predecessors(i)? {
        let e = net.edge(h, i).unwrap();
        let f = routing.flow(e);
        if f <= 0.0 {
            continue;
        }
        let beta = offer(game, profile, h, i)?;
        profit += beta.eval(f) - game.costs.cost(e).eval(f);
    }
    for &e in net.out_edges(i) {
        let k = net.endpoints(e).1;
        let f = routing.flow(e);
        if f > 0.0 {
            profit -= offer(game, profile, i, k)?.eval(f);
        }
    }
    Ok(profit)
}

fn check_relay(game: &Game, profile: &PricingProfile, routing: &Routing, i: NodeId) -> Result<RelayCheck> {
    let net = game.net;
    let tol = game.settings.tol;
    let preds = net.predecessors(i)?;
    if preds.len() > MAX_PREDECESSORS {
        return Err(Error::TooManyPredecessors { relay: net.name(i).into(), count: preds.len(), cap: MAX_PREDECESSORS });
    }
    let info = local_info(game, profile, routing, i)?;
    let mut markets = Vec::with_capacity(info.markets.len());
    let mut deviation = None;
    for m in &info.markets {
        let beta = profile.price(i, m.predecessor).ok_or_else(|| Error::MissingPrice {
            relay: net.name(i).into(),
            predecessor: net.name(m.predecessor).into(),
        })?;
        let mut check = MarketCheck {
            predecessor: m.predecessor,
            rate: m.rate,
            flow: m.flow,
            lower_bound_violation: 0.0,
            equality_violation: 0.0,
            honest_violation: 0.0,
            replicating: true,
        };
        match m.reflected()? {
            Some(refl) => {
                let own = CostFn::new(beta.clone());
                let bound = CostFn::new(refl.clone());
                let hi = m.rate.min(beta.domain_hi());
                let mut worst = (0.0, 0.0);
                let mut repl = 0.0f64;
                for t in check_points(hi, game.settings.grid, &[beta, &refl]) {
                    let diff = bound.eval(t) - own.eval(t);
                    if diff > worst.0 {
                        worst = (diff, t);
                    }
                    if t <= m.flow {
                        repl = repl.max(diff.abs());
                    }
                }
                check.lower_bound_violation = worst.0;
                check.equality_violation = (own.eval(m.flow) - bound.eval(m.flow)).abs();
                check.replicating = repl <= tol;
                if worst.0 > tol && deviation.is_none() {
                    deviation = Some(format!(
                        "relay `{}` undercuts its competitors towards `{}` by {:e} at flow {}",
                        net.name(i),
                        net.name(m.predecessor),
                        worst.0,
                        worst.1
                    ));
                }
            }
            None => {
                let honest = honest_pricing(game, profile, routing, i, m.predecessor)?;
                let hi = honest.domain_hi().min(beta.domain_hi());
                let worst = check_points(hi, game.settings.grid, &[beta, &honest])
                    .into_iter()
                    .map(|t| (beta.eval(t) - honest.eval(t)).abs())
                    .fold(0.0, f64::max);
                check.honest_violation = worst;
                check.replicating = worst <= tol;
                if worst > tol && deviation.is_none() {
                    deviation = Some(format!(
                        "relay `{}` does not price honestly towards idle `{}` (off by {worst:e})",
                        net.name(i),
                        net.name(m.predecessor)
                    ));
                }
            }
        }
        markets.push(check);
    }
    let flows: Vec<f64> = info.markets.iter().map(|m| m.flow).collect();
    let (ideal, best) = ideal_flows(&info, Some(&flows))?;
    let induced = anticipated_profit(&info, &flows)?;
    let gap = best - induced;
    if gap > tol && deviation.is_none() {
        let want: Vec<String> = ideal.iter().map(|(h, x)| format!("{}:{x:.6}", net.name(*h))).collect();
        deviation = Some(format!(
            "relay `{}` gains {gap:e} by winning flows [{}] instead of the induced ones",
            net.name(i),
            want.join(", ")
        ));
    }
    let worst_violation = markets
        .iter()
        .map(|c| c.lower_bound_violation.max(c.equality_violation).max(c.honest_violation))
        .fold(gap.max(0.0), f64::max);
    let realized = realized_profit(game, profile, routing, i)?;
    Ok(RelayCheck {
        relay: i,
        markets,
        ideal_flows: ideal,
        anticipated_profit: best,
        induced_profit: induced,
        realized_profit: realized,
        worst_violation,
        deviation,
    })
}

/// Checks that every relay is playing a best response under the induced routing.
///
/// For each market with traffic: the offer stays above the reflected virtual
/// competitor on a grid plus all breakpoints, meets it at the induced flow,
/// and the induced flows maximize the anticipated profit within `tol`.
/// Markets without traffic must be priced honestly.
pub fn verify_equilibrium(game: &Game, profile: &PricingProfile) -> Result<Verification> {
    profile.check_complete(game.net)?;
    let induced = induced_routing(game, profile)?;
    let relays: Vec<NodeId> = game.net.relays().collect();
    let checks = relays
        .par_iter()
        .map(|&i| check_relay(game, profile, &induced.routing, i))
        .collect::<Result<Vec<_>>>()?;
    let worst = checks.iter().map(|c| c.worst_violation).fold(0.0, f64::max);
    Ok(Verification {
        verified: worst <= game.settings.tol,
        worst_violation: worst,
        routing: induced.routing,
        relays: checks,
        pin_rejections: induced.pin_rejections,
    })
}
