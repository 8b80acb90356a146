//! Network topology: a loop-free graph with one source and one destination.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

/// Dense node identifier, assigned in insertion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Dense edge identifier, indexes per-edge data such as link costs and flows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    names: Vec<String>,
    edges: Vec<(NodeId, NodeId)>,
    out: Vec<Vec<EdgeId>>,
    inc: Vec<Vec<EdgeId>>,
    lookup: HashMap<(NodeId, NodeId), EdgeId>,
    source: NodeId,
    destination: NodeId,
}

/// A structural assumption that a network breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Cycle,
    SourceHasPredecessors,
    DestinationHasOffsprings,
    /// Not reachable from the source, or cannot reach the destination.
    Stranded(NodeId),
    NoPath,
    /// Offspring set is neither `{w}` nor holds at least two relays.
    OffspringSet(NodeId),
    /// `other` is both a sibling and a predecessor of `node`.
    SiblingPredecessor { node: NodeId, other: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle => write!(f, "cycle"),
            Violation::SourceHasPredecessors => write!(f, "source has predecessors"),
            Violation::DestinationHasOffsprings => write!(f, "destination has offsprings"),
            Violation::Stranded(n) => write!(f, "stranded node {n}"),
            Violation::NoPath => write!(f, "no path from source to destination"),
            Violation::OffspringSet(n) => {
                write!(f, "offspring set of {n} must be {{w}} or contain at least two relays")
            }
            Violation::SiblingPredecessor { node, other } => {
                write!(f, "{other} is both a sibling and a predecessor of {node}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let msg: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        Err(Error::InvalidNetwork(msg.join("; ")))
    }
}

impl Network {
    /// Builds a network from node names and directed edges between name indices.
    pub fn new(names: Vec<String>, edges: &[(usize, usize)], source: usize, destination: usize) -> Result<Self> {
        let n = names.len();
        for &id in &[source, destination] {
            if id >= n {
                return Err(Error::UnknownNode(id));
            }
        }
        if source == destination {
            return Err(Error::InvalidNetwork("source and destination coincide".into()));
        }
        let mut seen = BTreeSet::new();
        for (k, name) in names.iter().enumerate() {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidNetwork(format!("duplicate node name `{name}` at index {k}")));
            }
        }
        let mut net = Network {
            names,
            edges: Vec::with_capacity(edges.len()),
            out: vec![Vec::new(); n],
            inc: vec![Vec::new(); n],
            lookup: HashMap::new(),
            source: NodeId(source),
            destination: NodeId(destination),
        };
        for &(a, b) in edges {
            if a >= n {
                return Err(Error::UnknownNode(a));
            }
            if b >= n {
                return Err(Error::UnknownNode(b));
            }
            if a == b {
                return Err(Error::InvalidNetwork(format!("self loop at `{}`", net.names[a])));
            }
            let key = (NodeId(a), NodeId(b));
            if net.lookup.contains_key(&key) {
                return Err(Error::InvalidNetwork(format!(
                    "duplicate edge `{}` -> `{}`",
                    net.names[a], net.names[b]
                )));
            }
            let e = EdgeId(net.edges.len());
            net.edges.push(key);
            net.out[a].push(e);
            net.inc[b].push(e);
            net.lookup.insert(key, e);
        }
        Ok(net)
    }

    /// Builds a network from named edges; node ids follow first appearance in `nodes`.
    pub fn from_names(nodes: &[&str], edges: &[(&str, &str)], source: &str, destination: &str) -> Result<Self> {
        let names: Vec<String> = nodes.iter().map(|s| s.to_string()).collect();
        let index = |s: &str| names.iter().position(|n| n == s).ok_or_else(|| Error::UnknownNodeName(s.to_string()));
        let pairs = edges
            .iter()
            .map(|&(a, b)| Ok((index(a)?, index(b)?)))
            .collect::<Result<Vec<_>>>()?;
        let (s, w) = (index(source)?, index(destination)?);
        Network::new(names, &pairs, s, w)
    }

    /// Single-layer oligopoly `s -> relay_k -> w` for `k = 1..=n`.
    pub fn oligopoly(n: usize) -> Result<Self> {
        let mut names = vec!["s".to_string()];
        names.extend((1..=n).map(|k| format!("r{k}")));
        names.push("w".into());
        let w = n + 1;
        let mut edges: Vec<(usize, usize)> = (1..=n).map(|k| (0, k)).collect();
        edges.extend((1..=n).map(|k| (k, w)));
        Network::new(names, &edges, 0, w)
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.names.len()).map(NodeId)
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn edge_ids(&self) -> impl Iterator<Item = EdgeId> {
        (0..self.edges.len()).map(EdgeId)
    }

    pub fn endpoints(&self, e: EdgeId) -> (NodeId, NodeId) {
        self.edges[e.0]
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn destination(&self) -> NodeId {
        self.destination
    }

    pub fn is_relay(&self, i: NodeId) -> bool {
        i != self.source && i != self.destination
    }

    pub fn relays(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(move |&i| self.is_relay(i))
    }

    pub fn name(&self, i: NodeId) -> &str {
        &self.names[i.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(NodeId)
            .ok_or_else(|| Error::UnknownNodeName(name.to_string()))
    }

    pub fn edge(&self, from: NodeId, to: NodeId) -> Option<EdgeId> {
        self.lookup.get(&(from, to)).copied()
    }

    pub fn edge_name(&self, e: EdgeId) -> String {
        let (a, b) = self.edges[e.0];
        format!("{}->{}", self.name(a), self.name(b))
    }

    fn check(&self, i: NodeId) -> Result<()> {
        if i.0 >= self.names.len() {
            return Err(Error::UnknownNode(i.0));
        }
        Ok(())
    }

    pub fn out_edges(&self, i: NodeId) -> &[EdgeId] {
        &self.out[i.0]
    }

    pub fn in_edges(&self, i: NodeId) -> &[EdgeId] {
        &self.inc[i.0]
    }

    /// `𝒫_i`, in edge insertion order.
    pub fn predecessors(&self, i: NodeId) -> Result<Vec<NodeId>> {
        self.check(i)?;
        Ok(self.inc[i.0].iter().map(|e| self.edges[e.0].0).collect())
    }

    /// `𝒪_i`, in edge insertion order.
    pub fn offsprings(&self, i: NodeId) -> Result<Vec<NodeId>> {
        self.check(i)?;
        Ok(self.out[i.0].iter().map(|e| self.edges[e.0].1).collect())
    }

    /// `𝒮_i^h`: the other offsprings of `h`. May contain the destination.
    pub fn siblings(&self, i: NodeId, h: NodeId) -> Result<Vec<NodeId>> {
        self.check(i)?;
        self.check(h)?;
        if self.edge(h, i).is_none() {
            return Err(Error::NotPredecessor { node: self.name(h).into(), of: self.name(i).into() });
        }
        Ok(self.offsprings(h)?.into_iter().filter(|&j| j != i).collect())
    }

    /// Every node comes after all of its offsprings; the destination is first.
    pub fn reverse_topological_order(&self) -> Result<Vec<NodeId>> {
        let n = self.names.len();
        let mut remaining: Vec<usize> = self.out.iter().map(|v| v.len()).collect();
        let mut ready: BTreeSet<(u8, usize)> = BTreeSet::new();
        let rank = |i: usize| u8::from(i != self.destination.0);
        for (i, &left) in remaining.iter().enumerate() {
            if left == 0 {
                ready.insert((rank(i), i));
            }
        }
        let mut order = Vec::with_capacity(n);
        while let Some((r, i)) = ready.iter().next().copied() {
            ready.remove(&(r, i));
            order.push(NodeId(i));
            for e in &self.inc[i] {
                let p = self.edges[e.0].0 .0;
                remaining[p] -= 1;
                if remaining[p] == 0 {
                    ready.insert((rank(p), p));
                }
            }
        }
        if order.len() < n {
            return Err(Error::Cycle);
        }
        Ok(order)
    }

    /// Every node comes before all of its offsprings.
    pub fn topological_order(&self) -> Result<Vec<NodeId>> {
        let mut order = self.reverse_topological_order()?;
        order.reverse();
        Ok(order)
    }

    fn reach(&self, start: NodeId, forward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.names.len()];
        let mut stack = vec![start];
        seen[start.0] = true;
        while let Some(i) = stack.pop() {
            let next: Vec<NodeId> = if forward {
                self.out[i.0].iter().map(|e| self.edges[e.0].1).collect()
            } else {
                self.inc[i.0].iter().map(|e| self.edges[e.0].0).collect()
            };
            for j in next {
                if !seen[j.0] {
                    seen[j.0] = true;
                    stack.push(j);
                }
            }
        }
        seen
    }

    /// Checks the structural assumptions of the game; never fails, the report carries violations.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.reverse_topological_order().is_err() {
            violations.push(Violation::Cycle);
        }
        if !self.inc[self.source.0].is_empty() {
            violations.push(Violation::SourceHasPredecessors);
        }
        if !self.out[self.destination.0].is_empty() {
            violations.push(Violation::DestinationHasOffsprings);
        }
        let fwd = self.reach(self.source, true);
        let bwd = self.reach(self.destination, false);
        if !fwd[self.destination.0] {
            violations.push(Violation::NoPath);
        }
        for i in self.nodes() {
            if !(fwd[i.0] && bwd[i.0]) {
                violations.push(Violation::Stranded(i));
            }
        }
        for i in self.nodes() {
            if i == self.destination {
                continue;
            }
            let offs = self.offsprings(i).unwrap();
            let only_w = offs.len() == 1 && offs[0] == self.destination;
            let relays = offs.iter().filter(|&&j| self.is_relay(j)).count();
            if !only_w && relays < 2 {
                violations.push(Violation::OffspringSet(i));
            }
        }
        // the destination is excluded: as a sibling of relays it legitimately
        // shares predecessors with them (overflow links)
        for i in self.relays() {
            let preds = self.predecessors(i).unwrap();
            let mut sibs = BTreeSet::new();
            for &h in &preds {
                sibs.extend(self.siblings(i, h).unwrap());
            }
            for &p in &preds {
                if sibs.contains(&p) {
                    violations.push(Violation::SiblingPredecessor { node: i, other: p });
                }
            }
        }
        ValidationReport { violations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig7() -> Network {
        Network::from_names(
            &["s", "h", "g", "i", "j", "w"],
            &[("s", "h"), ("s", "g"), ("h", "i"), ("h", "j"), ("i", "w"), ("j", "w"), ("g", "w")],
            "s",
            "w",
        )
        .unwrap()
    }

    #[test]
    fn oligopoly_passes() {
        let net = Network::oligopoly(2).unwrap();
        assert!(net.validate().passed());
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let net = Network::from_names(
            &["s", "a", "b", "w"],
            &[("s", "a"), ("s", "b"), ("a", "w"), ("b", "w"), ("w", "s")],
            "s",
            "w",
        )
        .unwrap();
        let report = net.validate();
        assert!(report.violations.contains(&Violation::Cycle));
        assert!(net.reverse_topological_order().is_err());
    }

    #[test]
    fn single_relay_offspring_set_fails() {
        let net = Network::from_names(
            &["s", "a", "b", "c", "w"],
            &[("s", "a"), ("s", "b"), ("a", "c"), ("c", "w"), ("b", "w")],
            "s",
            "w",
        )
        .unwrap();
        assert!(net.validate().violations.contains(&Violation::OffspringSet(net.id_of("a").unwrap())));
    }

    #[test]
    fn sibling_predecessor_overlap_fails() {
        // a feeds b while both are offsprings of s
        let net = Network::from_names(
            &["s", "a", "b", "c", "w"],
            &[("s", "a"), ("s", "b"), ("a", "b"), ("a", "c"), ("b", "w"), ("c", "w")],
            "s",
            "w",
        )
        .unwrap();
        let b = net.id_of("b").unwrap();
        let a = net.id_of("a").unwrap();
        assert!(net.validate().violations.contains(&Violation::SiblingPredecessor { node: b, other: a }));
    }

    #[test]
    fn stranded_node_is_reported() {
        let net = Network::from_names(
            &["s", "a", "b", "x", "w"],
            &[("s", "a"), ("s", "b"), ("a", "w"), ("b", "w"), ("x", "w")],
            "s",
            "w",
        )
        .unwrap();
        assert!(net.validate().violations.contains(&Violation::Stranded(net.id_of("x").unwrap())));
    }

    #[test]
    fn oligopoly_orders_and_siblings() {
        let net = Network::oligopoly(3).unwrap();
        let order: Vec<&str> = net.reverse_topological_order().unwrap().into_iter().map(|i| net.name(i)).collect();
        assert_eq!(order, vec!["w", "r1", "r2", "r3", "s"]);
        let r1 = net.id_of("r1").unwrap();
        let sib: Vec<&str> = net.siblings(r1, net.source()).unwrap().into_iter().map(|i| net.name(i)).collect();
        assert_eq!(sib, vec!["r2", "r3"]);
        let w = net.destination();
        assert!(net.siblings(w, r1).unwrap().is_empty());
        assert!(net.siblings(r1, r1).is_err());
        assert!(net.predecessors(NodeId(99)).is_err());
    }

    #[test]
    fn fig7_order() {
        let net = fig7();
        assert!(net.validate().passed());
        let order = net.reverse_topological_order().unwrap();
        let pos = |s: &str| order.iter().position(|&i| i == net.id_of(s).unwrap()).unwrap();
        assert_eq!(pos("w"), 0);
        assert!(pos("i") < pos("h") && pos("j") < pos("h"));
        assert!(pos("h") < pos("s") && pos("g") < pos("s"));
        for &(a, b) in net.edges() {
            assert!(order.iter().position(|&x| x == b) < order.iter().position(|&x| x == a));
        }
    }

    #[test]
    fn overflow_link_passes() {
        let net = Network::from_names(
            &["s", "a", "b", "w"],
            &[("s", "a"), ("s", "b"), ("a", "w"), ("b", "w"), ("s", "w")],
            "s",
            "w",
        )
        .unwrap();
        assert!(net.validate().passed());
    }
}
