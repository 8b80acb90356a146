//! Routings, per-node cost-minimizing allocation and the socially optimal routing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::marginals::{inf_convolve, ConvolutionMethod};
use crate::network::{EdgeId, Network, NodeId};
use crate::{Convolution, CostFn, MarginalFn};

/// Link cost integrals `D_ij`, indexed by [`EdgeId`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinkCosts {
    costs: Vec<CostFn>,
}

impl LinkCosts {
    pub fn new(net: &Network, marginals: Vec<MarginalFn>) -> Result<Self> {
        if marginals.len() != net.edge_count() {
            return Err(Error::InvalidNetwork(format!(
                "{} link costs for {} edges",
                marginals.len(),
                net.edge_count()
            )));
        }
        Ok(LinkCosts { costs: marginals.into_iter().map(CostFn::new).collect() })
    }

    /// Marginals must be nonnegative and strictly increasing. A direct
    /// source-to-destination link (an overflow link) may be flat.
    pub fn validate(&self, net: &Network) -> Result<()> {
        for e in net.edge_ids() {
            let d = self.marginal(e);
            let (a, b) = net.endpoints(e);
            let overflow = a == net.source() && b == net.destination();
            if d.min_value() < 0.0 {
                return Err(Error::InvalidFunction(format!(
                    "link {} has a negative marginal cost",
                    net.edge_name(e)
                )));
            }
            let ok = if overflow { d.is_nondecreasing(1e-12) } else { d.is_strictly_increasing() };
            if !ok {
                return Err(Error::InvalidFunction(format!(
                    "link {} marginal cost must be {}increasing",
                    net.edge_name(e),
                    if overflow { "non" } else { "strictly " }
                )));
            }
        }
        Ok(())
    }

    pub fn cost(&self, e: EdgeId) -> &CostFn {
        &self.costs[e.0]
    }

    pub fn marginal(&self, e: EdgeId) -> &MarginalFn {
        self.costs[e.0].marginal()
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// Appends the cost of a newly added edge.
    pub fn push(&mut self, d: MarginalFn) {
        self.costs.push(CostFn::new(d));
    }

    /// Total network cost `Σ D_ij(f_ij)`.
    pub fn total(&self, routing: &Routing) -> f64 {
        self.costs.iter().zip(&routing.flows).map(|(c, &f)| c.eval(f)).sum()
    }
}

/// Link flow vector indexed by [`EdgeId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub flows: Vec<f64>,
    pub session_rate: f64,
}

impl Routing {
    pub fn zero(net: &Network, session_rate: f64) -> Self {
        Routing { flows: vec![0.0; net.edge_count()], session_rate }
    }

    pub fn flow(&self, e: EdgeId) -> f64 {
        self.flows[e.0]
    }

    pub fn flow_between(&self, net: &Network, a: NodeId, b: NodeId) -> f64 {
        net.edge(a, b).map(|e| self.flows[e.0]).unwrap_or(0.0)
    }

    /// `r_i`: session rate at the source, inflow elsewhere.
    pub fn throughput(&self, net: &Network, i: NodeId) -> f64 {
        if i == net.source() {
            return self.session_rate;
        }
        net.in_edges(i).iter().map(|e| self.flows[e.0]).sum()
    }

    pub fn outflow(&self, net: &Network, i: NodeId) -> f64 {
        net.out_edges(i).iter().map(|e| self.flows[e.0]).sum()
    }

    /// Nonnegativity and flow conservation within `tol`.
    pub fn check(&self, net: &Network, tol: f64) -> Result<()> {
        if let Some(e) = self.flows.iter().position(|&f| f < -tol || !f.is_finite()) {
            return Err(Error::InvalidRouting(format!(
                "flow on {} is {}",
                net.edge_name(EdgeId(e)),
                self.flows[e]
            )));
        }
        for i in net.nodes() {
            if i == net.destination() {
                continue;
            }
            let r = self.throughput(net, i);
            let out = self.outflow(net, i);
            if (r - out).abs() > tol {
                return Err(Error::InvalidRouting(format!(
                    "node `{}` receives {r} but forwards {out}",
                    net.name(i)
                )));
            }
        }
        let arrived = self.throughput(net, net.destination());
        if (arrived - self.session_rate).abs() > tol {
            return Err(Error::InvalidRouting(format!(
                "destination receives {arrived}, session rate {}",
                self.session_rate
            )));
        }
        Ok(())
    }

    /// Largest per-link difference.
    pub fn max_diff(&self, other: &Routing) -> f64 {
        self.flows.iter().zip(&other.flows).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Named flows for reports.
    pub fn named(&self, net: &Network) -> BTreeMap<String, f64> {
        net.edge_ids().map(|e| (net.edge_name(e), self.flows[e.0])).collect()
    }
}

/// `D_i` and `d_i` for one node.
#[derive(Clone, Debug)]
pub struct NodeCostFn {
    pub node: NodeId,
    pub conv: Convolution,
}

impl NodeCostFn {
    pub fn cost(&self) -> &CostFn {
        self.conv.integral()
    }

    pub fn marginal(&self) -> &MarginalFn {
        self.conv.marginal()
    }
}

/// Minimizes `Σ_k B_k(f_k)` subject to `Σ_k f_k = r`; ties go to the
/// lexicographically smallest allocation.
pub fn optimal_allocation(offers: &[CostFn], r: f64, grid: usize) -> Result<Vec<f64>> {
    if r < 0.0 {
        return Err(Error::InvalidParameter(format!("negative rate {r}")));
    }
    if r == 0.0 {
        return Ok(vec![0.0; offers.len()]);
    }
    let conv = inf_convolve(offers, r, r / grid.max(1) as f64)?;
    conv.allocate(r)
}

/// Minimum forwarding cost of node `node` as a function of its throughput, on `[0, r_max]`.
pub fn node_cost_fn(node: NodeId, offers: &[CostFn], r_max: f64, grid: usize) -> Result<NodeCostFn> {
    let conv = inf_convolve(offers, r_max, r_max / grid.max(1) as f64)?;
    Ok(NodeCostFn { node, conv })
}

/// `true` when the convolution of these offers is computed exactly.
pub fn is_exact(conv: &Convolution) -> bool {
    conv.method() != ConvolutionMethod::GridDp
}

/// `λ_i*`: minimum marginal cost of any path from `i` to the destination.
pub fn path_min_marginals(net: &Network, routing: &Routing, costs: &LinkCosts) -> Result<Vec<f64>> {
    let mut lambda = vec![f64::INFINITY; net.node_count()];
    lambda[net.destination().0] = 0.0;
    for i in net.reverse_topological_order()? {
        for &e in net.out_edges(i) {
            let j = net.endpoints(e).1;
            let v = costs.marginal(e).eval(routing.flows[e.0]) + lambda[j.0];
            if v < lambda[i.0] {
                lambda[i.0] = v;
            }
        }
    }
    Ok(lambda)
}

/// Minimum and maximum path marginal cost, the maximum taken over paths whose links all carry flow.
pub fn marginal_gap(net: &Network, routing: &Routing, costs: &LinkCosts, eps: f64) -> Result<(f64, f64)> {
    let lo = path_min_marginals(net, routing, costs)?;
    let mut hi = vec![f64::NEG_INFINITY; net.node_count()];
    hi[net.destination().0] = 0.0;
    for i in net.reverse_topological_order()? {
        for &e in net.out_edges(i) {
            if routing.flows[e.0] <= eps {
                continue;
            }
            let j = net.endpoints(e).1;
            let v = costs.marginal(e).eval(routing.flows[e.0]) + hi[j.0];
            if v > hi[i.0] {
                hi[i.0] = v;
            }
        }
    }
    Ok((lo[net.source().0], hi[net.source().0]))
}

/// Options for [`socially_optimal_routing_from`].
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Stop when the used-path marginal cost spread drops below this.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-7, max_iterations: 200_000 }
    }
}

/// Result of the social optimum solver.
#[derive(Clone, Debug)]
pub struct Optimum {
    pub routing: Routing,
    pub cost: f64,
    /// Final spread between the worst used and the best path marginal cost.
    pub gap: f64,
    pub iterations: usize,
}

fn shortest_path(net: &Network, marg: &[f64], order: &[NodeId]) -> (f64, Vec<EdgeId>) {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut next: Vec<Option<EdgeId>> = vec![None; n];
    dist[net.destination().0] = 0.0;
    for &i in order {
        for &e in net.out_edges(i) {
            let j = net.endpoints(e).1;
            let v = marg[e.0] + dist[j.0];
            if v < dist[i.0] {
                dist[i.0] = v;
                next[i.0] = Some(e);
            }
        }
    }
    let mut path = Vec::new();
    let mut at = net.source();
    while let Some(e) = next[at.0] {
        path.push(e);
        at = net.endpoints(e).1;
    }
    (dist[net.source().0], path)
}

/// Splits a routing into path flows by repeatedly peeling the bottleneck path.
fn decompose(net: &Network, routing: &Routing) -> Vec<(Vec<EdgeId>, f64)> {
    let mut rest = routing.flows.clone();
    let mut paths = Vec::new();
    let eps = 1e-15 * (1.0 + routing.session_rate);
    loop {
        let mut path = Vec::new();
        let mut at = net.source();
        let mut bottleneck = f64::INFINITY;
        while at != net.destination() {
            let best = net
                .out_edges(at)
                .iter()
                .copied()
                .max_by(|a, b| rest[a.0].partial_cmp(&rest[b.0]).unwrap());
            match best {
                Some(e) if rest[e.0] > eps => {
                    bottleneck = bottleneck.min(rest[e.0]);
                    path.push(e);
                    at = net.endpoints(e).1;
                }
                _ => break,
            }
        }
        if at != net.destination() || path.is_empty() {
            break;
        }
        for e in &path {
            rest[e.0] -= bottleneck;
        }
        paths.push((path, bottleneck));
    }
    paths
}

/// Socially optimal routing from an all-on-the-cheapest-path start.
pub fn socially_optimal_routing(net: &Network, costs: &LinkCosts, session_rate: f64, opts: SolverOptions) -> Result<Optimum> {
    socially_optimal_routing_from(net, costs, session_rate, None, opts)
}

/// Path-based conditional gradient with pairwise steps.
///
/// Each iteration finds the cheapest path at current marginal costs and the
/// most expensive path carrying flow, then shifts flow between the two with
/// an exact line search on the (monotone) directional derivative.
pub fn socially_optimal_routing_from(
    net: &Network,
    costs: &LinkCosts,
    session_rate: f64,
    start: Option<&Routing>,
    opts: SolverOptions,
) -> Result<Optimum> {
    if !(session_rate >= 0.0) {
        return Err(Error::InvalidParameter(format!("session rate {session_rate}")));
    }
    let order = net.reverse_topological_order()?;
    let mut flows = vec![0.0; net.edge_count()];
    let marg_at = |flows: &[f64]| -> Vec<f64> {
        net.edge_ids().map(|e| costs.marginal(e).eval(flows[e.0])).collect()
    };
    let mut paths: Vec<(Vec<EdgeId>, f64)> = match start {
        Some(r) => {
            r.check(net, 1e-9 * (1.0 + session_rate))?;
            decompose(net, r)
        }
        None => {
            let (_, p) = shortest_path(net, &marg_at(&flows), &order);
            if p.is_empty() {
                return Err(Error::InvalidNetwork("no path from source to destination".into()));
            }
            vec![(p, session_rate)]
        }
    };
    for (p, x) in &paths {
        for e in p {
            flows[e.0] += x;
        }
    }
    let path_cost = |p: &[EdgeId], m: &[f64]| p.iter().map(|e| m[e.0]).sum::<f64>();
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut stalled = false;
    while iterations < opts.max_iterations {
        let marg = marg_at(&flows);
        let (best_cost, best) = shortest_path(net, &marg, &order);
        let worst = paths
            .iter()
            .enumerate()
            .filter(|(_, (_, x))| *x > 0.0)
            .map(|(k, (p, _))| (k, path_cost(p, &marg)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let Some((wk, worst_cost)) = worst else { break };
        gap = worst_cost - best_cost;
        if gap < opts.tol {
            break;
        }
        iterations += 1;
        let q = paths[wk].0.clone();
        let cap = paths[wk].1;
        let plus: Vec<EdgeId> = best.iter().copied().filter(|e| !q.contains(e)).collect();
        let minus: Vec<EdgeId> = q.iter().copied().filter(|e| !best.contains(e)).collect();
        let slope = |theta: f64| {
            plus.iter().map(|e| costs.marginal(*e).eval(flows[e.0] + theta)).sum::<f64>()
                - minus.iter().map(|e| costs.marginal(*e).eval((flows[e.0] - theta).max(0.0))).sum::<f64>()
        };
        let theta = if slope(cap) <= 0.0 {
            cap
        } else {
            let (mut lo, mut hi) = (0.0, cap);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-16 * (1.0 + cap) {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        if theta <= 0.0 {
            stalled = true;
            break;
        }
        for e in &plus {
            flows[e.0] += theta;
        }
        for e in &minus {
            flows[e.0] = (flows[e.0] - theta).max(0.0);
        }
        paths[wk].1 -= theta;
        if theta >= cap {
            paths[wk].1 = 0.0;
        }
        match paths.iter().position(|(p, _)| *p == best) {
            Some(k) => paths[k].1 += theta,
            None => paths.push((best, theta)),
        }
        paths.retain(|(_, x)| *x > 0.0);
    }
    if gap >= opts.tol && !stalled {
        return Err(Error::NoConvergence { iterations, gap });
    }
    // rebuild link flows from the path flows to remove drift
    let mut clean = vec![0.0; net.edge_count()];
    for (p, x) in &paths {
        for e in p {
            clean[e.0] += x;
        }
    }
    let routing = Routing { flows: clean, session_rate };
    let cost = costs.total(&routing);
    Ok(Optimum { routing, cost, gap: gap.max(0.0), iterations })
}
