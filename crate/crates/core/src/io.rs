//! Scenario and profile files (TOML, `schema = 1`) and CSV number formatting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::elastic_transform;
use crate::error::{Error, Result};
use crate::flow::LinkCosts;
use crate::game::PricingProfile;
use crate::marginals::Segment;
use crate::network::{EdgeId, Network, NodeId};
use crate::{MarginalFn, Settings};

pub const SCHEMA: u32 = 1;

/// Default number of segments used to sample nonlinear cost curves.
pub const DEFAULT_SEGMENTS: usize = 64;

/// Default cap on `f / c` for M/M/1 costs.
pub const DEFAULT_UTILIZATION_CAP: f64 = 0.95;

/// A marginal cost or price curve as written in a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurveSpec {
    /// `a + b f`.
    Linear {
        a: f64,
        b: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<f64>,
    },
    /// `a + b (f - shift)`.
    AffineShifted {
        a: f64,
        b: f64,
        shift: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<f64>,
    },
    /// Continuous interpolation through `[x, y]` points starting at `x = 0`.
    Points { points: Vec<[f64; 2]> },
    /// `[x_lo, x_hi, y_lo, y_hi]` pieces; jumps allowed between pieces.
    Segments { segments: Vec<[f64; 4]> },
    /// Derivative of the average occupancy `f / (c - f)`, sampled up to `utilization_cap * c`.
    Mm1 {
        capacity: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        utilization_cap: Option<f64>,
    },
    /// Derivative of the power cost `(2^(f/w) - 1) / k`, sampled.
    Exp {
        w: f64,
        k: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<f64>,
    },
    Constant {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<f64>,
    },
}

impl CurveSpec {
    /// Builds the curve; `domain` applies when the curve does not carry its own.
    pub fn build(&self, domain: f64, segments: usize) -> Result<MarginalFn> {
        let dom = |d: &Option<f64>| d.unwrap_or(domain);
        match self {
            CurveSpec::Linear { a, b, domain } => MarginalFn::affine(*a, *b, dom(domain)),
            CurveSpec::AffineShifted { a, b, shift, domain } => MarginalFn::affine(a - b * shift, *b, dom(domain)),
            CurveSpec::Points { points } => {
                let pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
                MarginalFn::from_points(&pts)
            }
            CurveSpec::Segments { segments } => {
                MarginalFn::new(segments.iter().map(|s| Segment::new(s[0], s[1], s[2], s[3])).collect())
            }
            CurveSpec::Mm1 { capacity, utilization_cap } => {
                let cap = utilization_cap.unwrap_or(DEFAULT_UTILIZATION_CAP);
                if !(*capacity > 0.0) || !(cap > 0.0 && cap < 1.0) {
                    return Err(Error::InvalidFunction(format!(
                        "mm1 needs capacity > 0 and 0 < utilization_cap < 1, got {capacity}, {cap}"
                    )));
                }
                let c = *capacity;
                MarginalFn::sample(cap * c, segments, |f| c / ((c - f) * (c - f)))
            }
            CurveSpec::Exp { w, k, domain } => {
                if !(*w > 0.0 && *k > 0.0) {
                    return Err(Error::InvalidFunction(format!("exp needs w > 0 and k > 0, got {w}, {k}")));
                }
                let (w, k) = (*w, *k);
                let ln2 = std::f64::consts::LN_2;
                MarginalFn::sample(dom(domain), segments, |f| ln2 / (w * k) * (f / w).exp2())
            }
            CurveSpec::Constant { value, domain } => MarginalFn::constant(*value, dom(domain)),
        }
    }

    /// Exact description of a piecewise-linear curve.
    pub fn from_marginal(f: &MarginalFn) -> Self {
        if f.is_continuous(0.0) {
            let points = f.breakpoints().into_iter().map(|x| [x, f.eval(x)]).collect::<Vec<_>>();
            let mut points = points;
            // the value at the right end is the left limit
            if let (Some(last), Some(s)) = (points.last_mut(), f.segments().last()) {
                last[1] = s.y_hi;
            }
            if let (Some(first), Some(s)) = (points.first_mut(), f.segments().first()) {
                first[1] = s.y_lo;
            }
            return CurveSpec::Points { points };
        }
        CurveSpec::Segments { segments: f.segments().iter().map(|s| [s.x_lo, s.x_hi, s.y_lo, s.y_hi]).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub cost: CurveSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinSpec {
    pub from: String,
    pub to: String,
    pub flow: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSpec {
    pub relay: String,
    pub predecessor: String,
    pub marginal: CurveSpec,
}

/// Elastic demand: the source's marginal utility `u_s` on `[0, R_s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    pub marginal: CurveSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Sampling resolution for nonlinear costs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
    /// Link cost domain; defaults to four times the session rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<f64>,
}

impl SettingsSpec {
    fn is_empty(&self) -> bool {
        *self == SettingsSpec::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub source: String,
    pub destination: String,
    pub session_rate: f64,
    pub nodes: Vec<String>,
    #[serde(default, skip_serializing_if = "SettingsSpec::is_empty")]
    pub settings: SettingsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilitySpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pins: Vec<PinSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prices: Vec<PriceSpec>,
}

/// A pricing profile stored on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pins: Vec<PinSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prices: Vec<PriceSpec>,
}

/// A scenario resolved into solver inputs.
#[derive(Clone, Debug)]
pub struct Instance {
    pub name: String,
    pub net: Network,
    pub costs: LinkCosts,
    pub session_rate: f64,
    pub settings: Settings,
    /// Profile embedded in the scenario, if it lists prices.
    pub profile: Option<PricingProfile>,
    /// Pins listed in the scenario, usable as tie-break overrides for constructed profiles.
    pub pins: BTreeMap<(NodeId, NodeId), f64>,
    /// The added overflow link when the scenario has an elastic source.
    pub overflow: Option<EdgeId>,
}

impl Instance {
    pub fn game(&self) -> crate::game::Game<'_> {
        crate::game::Game::new(&self.net, &self.costs, self.session_rate, self.settings)
    }
}

fn field_err(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Scenario { path: path.into(), message: message.to_string() }
}

fn check_version(schema: u32) -> Result<()> {
    if schema != SCHEMA {
        return Err(field_err("schema", format!("unsupported schema {schema}, expected {SCHEMA}")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        check_version(sc.schema)?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn settings(&self) -> Settings {
        let d = Settings::default();
        Settings { grid: self.settings.grid.unwrap_or(d.grid), tol: self.settings.tol.unwrap_or(d.tol) }
    }

    pub fn link_domain(&self) -> f64 {
        self.settings.domain.unwrap_or(4.0 * self.session_rate)
    }

    pub fn segments(&self) -> usize {
        self.settings.segments.unwrap_or(DEFAULT_SEGMENTS)
    }

    /// Resolves names, builds and validates the network and its costs.
    pub fn build(&self) -> Result<Instance> {
        check_version(self.schema)?;
        if !(self.session_rate > 0.0 && self.session_rate.is_finite()) {
            return Err(field_err("session_rate", "must be positive and finite"));
        }
        let index = |name: &str, path: String| {
            self.nodes.iter().position(|n| n == name).ok_or_else(|| field_err(path, format!("unknown node `{name}`")))
        };
        let s = index(&self.source, "source".into())?;
        let w = index(&self.destination, "destination".into())?;
        let mut pairs = Vec::with_capacity(self.edges.len());
        for (k, e) in self.edges.iter().enumerate() {
            pairs.push((index(&e.from, format!("edges[{k}].from"))?, index(&e.to, format!("edges[{k}].to"))?));
        }
        let mut net = Network::new(self.nodes.clone(), &pairs, s, w).map_err(|e| field_err("edges", e))?;
        let domain = self.link_domain();
        let segments = self.segments();
        let mut marginals = Vec::with_capacity(self.edges.len());
        for (k, e) in self.edges.iter().enumerate() {
            let path = format!("edges[{k}].cost");
            let d = e.cost.build(domain, segments).map_err(|err| field_err(&path, err))?;
            if d.min_value() < 0.0 {
                return Err(field_err(&path, format!("negative marginal cost {}", d.min_value())));
            }
            if !d.is_strictly_increasing() {
                return Err(field_err(&path, "link marginal cost must be strictly increasing"));
            }
            marginals.push(d);
        }
        let mut costs = LinkCosts::new(&net, marginals)?;
        let mut overflow = None;
        if let Some(u) = &self.utility {
            let um = u
                .marginal
                .build(self.session_rate, segments)
                .map_err(|err| field_err("utility.marginal", err))?;
            let (n2, c2, e) = elastic_transform(&net, &costs, &um, self.session_rate)
                .map_err(|err| field_err("utility.marginal", err))?;
            net = n2;
            costs = c2;
            overflow = Some(e);
        }
        net.validate().into_result().map_err(|e| field_err("edges", e))?;
        costs.validate(&net).map_err(|e| field_err("edges", e))?;
        let settings = self.settings();
        if settings.grid == 0 {
            return Err(field_err("settings.grid", "must be positive"));
        }
        if !(settings.tol > 0.0) {
            return Err(field_err("settings.tol", "must be positive"));
        }
        let span = 2.0 * self.session_rate;
        let pins = resolve_pins(&net, &self.pins, "pins")?;
        let profile = if self.prices.is_empty() {
            None
        } else {
            let mut p = resolve_prices(&net, &self.prices, span, segments, "prices")?;
            p.pins = pins.clone();
            Some(p)
        };
        Ok(Instance { name: self.name.clone(), net, costs, session_rate: self.session_rate, settings, profile, pins, overflow })
    }
}

fn resolve_pins(net: &Network, pins: &[PinSpec], prefix: &str) -> Result<BTreeMap<(NodeId, NodeId), f64>> {
    let mut out = BTreeMap::new();
    for (k, p) in pins.iter().enumerate() {
        let path = format!("{prefix}[{k}]");
        let a = net.id_of(&p.from).map_err(|e| field_err(format!("{path}.from"), e))?;
        let b = net.id_of(&p.to).map_err(|e| field_err(format!("{path}.to"), e))?;
        if net.edge(a, b).is_none() {
            return Err(field_err(path, format!("no edge `{}` -> `{}`", p.from, p.to)));
        }
        if !(p.flow >= 0.0 && p.flow.is_finite()) {
            return Err(field_err(format!("{path}.flow"), "must be nonnegative"));
        }
        out.insert((a, b), p.flow);
    }
    Ok(out)
}

fn resolve_prices(net: &Network, prices: &[PriceSpec], span: f64, segments: usize, prefix: &str) -> Result<PricingProfile> {
    let mut profile = PricingProfile::default();
    for (k, p) in prices.iter().enumerate() {
        let path = format!("{prefix}[{k}]");
        let i = net.id_of(&p.relay).map_err(|e| field_err(format!("{path}.relay"), e))?;
        let h = net.id_of(&p.predecessor).map_err(|e| field_err(format!("{path}.predecessor"), e))?;
        if net.edge(h, i).is_none() || !net.is_relay(i) {
            return Err(field_err(path, format!("`{}` is not a relay offspring of `{}`", p.relay, p.predecessor)));
        }
        let beta = p.marginal.build(span, segments).map_err(|e| field_err(format!("{path}.marginal"), e))?;
        profile.set_price(i, h, beta);
    }
    Ok(profile)
}

impl ProfileFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let pf: ProfileFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        check_version(pf.schema)?;
        Ok(pf)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Resolves the profile against an instance's network.
    pub fn resolve(&self, inst: &Instance) -> Result<PricingProfile> {
        let span = 2.0 * inst.session_rate;
        let mut p = resolve_prices(&inst.net, &self.prices, span, DEFAULT_SEGMENTS, "prices")?;
        p.pins = resolve_pins(&inst.net, &self.pins, "pins")?;
        Ok(p)
    }

    /// Exact file form of a profile.
    pub fn from_profile(net: &Network, profile: &PricingProfile) -> Self {
        let prices = profile
            .prices
            .iter()
            .map(|(&(i, h), beta)| PriceSpec {
                relay: net.name(i).into(),
                predecessor: net.name(h).into(),
                marginal: CurveSpec::from_marginal(beta),
            })
            .collect();
        let pins = profile
            .pins
            .iter()
            .map(|(&(a, b), &flow)| PinSpec { from: net.name(a).into(), to: net.name(b).into(), flow })
            .collect();
        ProfileFile { schema: SCHEMA, pins, prices }
    }
}

pub fn load(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_toml(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save(scenario: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, scenario.to_toml()?)?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<ProfileFile> {
    let text = std::fs::read_to_string(path)?;
    ProfileFile::from_toml(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_profile(profile: &ProfileFile, path: &Path) -> Result<()> {
    std::fs::write(path, profile.to_toml()?)?;
    Ok(())
}

/// Formats `x` with `digits` significant digits in the style of C's `%g`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One CSV row of numbers at nine significant digits.
pub fn csv_row(values: &[f64]) -> String {
    values.iter().map(|&v| format_sig(v, 9)).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    const DUOPOLY: &str = r#"
schema = 1
name = "duopoly"
source = "s"
destination = "w"
session_rate = 3.0
nodes = ["s", "a", "b", "w"]

[[edges]]
from = "s"
to = "a"
cost = { kind = "linear", a = 0.0, b = 0.5 }

[[edges]]
from = "s"
to = "b"
cost = { kind = "linear", a = 0.0, b = 1.0 }

[[edges]]
from = "a"
to = "w"
cost = { kind = "linear", a = 0.0, b = 0.5 }

[[edges]]
from = "b"
to = "w"
cost = { kind = "mm1", capacity = 20.0 }
"#;

    #[test]
    fn loads_and_round_trips() {
        let sc = Scenario::from_toml(DUOPOLY).unwrap();
        let inst = sc.build().unwrap();
        assert_eq!(inst.net.edge_count(), 4);
        let once = sc.to_toml().unwrap();
        let twice = Scenario::from_toml(&once).unwrap().to_toml().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn negative_marginal_names_the_field() {
        let text = DUOPOLY.replacen("a = 0.0, b = 1.0", "a = -1.0, b = 1.0", 1);
        let err = Scenario::from_toml(&text).unwrap().build().unwrap_err();
        match err {
            Error::Scenario { path, .. } => assert_eq!(path, "edges[1].cost"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let text = DUOPOLY.replacen("schema = 1", "schema = 2", 1);
        assert!(Scenario::from_toml(&text).is_err());
        assert!(Scenario::from_toml("schema = 1\nname = 3").is_err());
    }

    #[test]
    fn mm1_and_exp_are_sampled() {
        let m = CurveSpec::Mm1 { capacity: 10.0, utilization_cap: None }.build(1.0, 64).unwrap();
        assert_eq!(m.segments().len(), 64);
        assert!((m.domain_hi() - 9.5).abs() < 1e-12);
        assert!((m.eval(0.0) - 0.1).abs() < 1e-12);
        let e = CurveSpec::Exp { w: 1.0, k: 1.0, domain: Some(2.0) }.build(1.0, 64).unwrap();
        assert!((e.eval(1.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn curve_spec_of_marginal_is_exact() {
        let f = MarginalFn::new(vec![Segment::new(0.0, 1.0, 2.0, 2.0), Segment::new(1.0, 2.0, 5.0, 6.0)]).unwrap();
        assert_eq!(CurveSpec::from_marginal(&f).build(9.0, 4).unwrap(), f);
        let g = MarginalFn::from_points(&[(0.0, 1.0), (1.0, 3.0), (2.5, 3.5)]).unwrap();
        assert_eq!(CurveSpec::from_marginal(&g).build(9.0, 4).unwrap(), g);
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.0, 9), "0");
        assert_eq!(format_sig(1.0, 9), "1");
        assert_eq!(format_sig(2.5, 9), "2.5");
        assert_eq!(format_sig(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(format_sig(123456789.4, 9), "123456789");
        assert_eq!(format_sig(1234567890.0, 9), "1.23456789e+09");
        assert_eq!(format_sig(0.00001234, 9), "1.234e-05");
        assert_eq!(format_sig(-42.125, 9), "-42.125");
        assert_eq!(csv_row(&[1.0, 0.5]), "1,0.5");
    }
}
