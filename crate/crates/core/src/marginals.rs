//! Piecewise-linear, possibly discontinuous marginal functions.
//!
//! Every derivative that appears in the game (link cost marginals, announced
//! pricing marginals, virtual-competitor marginals and node forwarding-cost
//! marginals) is a [`Marginal`]. Integrals are exact: on each segment the
//! function is linear, so its integral is a trapezoid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Linear piece `[x_lo, x_hi] -> [y_lo, y_hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment<T> {
    pub x_lo: T,
    pub x_hi: T,
    pub y_lo: T,
    pub y_hi: T,
}

impl<T: Scalar> Segment<T> {
    pub fn new(x_lo: T, x_hi: T, y_lo: T, y_hi: T) -> Self {
        Segment { x_lo, x_hi, y_lo, y_hi }
    }

    pub fn width(&self) -> T {
        self.x_hi - self.x_lo
    }

    pub fn slope(&self) -> T {
        (self.y_hi - self.y_lo) / self.width()
    }

    /// Value of the linear piece at `x` (no clamping).
    pub fn at(&self, x: T) -> T {
        if x == self.x_hi {
            return self.y_hi;
        }
        self.y_lo + (self.y_hi - self.y_lo) * ((x - self.x_lo) / self.width())
    }

    pub fn area(&self) -> T {
        (self.y_lo + self.y_hi) * self.width() / T::lit(2.0)
    }

    /// Integral of the piece over `[x_lo, x]`.
    pub fn area_to(&self, x: T) -> T {
        let y = self.at(x);
        (self.y_lo + y) * (x - self.x_lo) / T::lit(2.0)
    }
}

/// Piecewise-linear function on `[0, domain_hi]`.
///
/// Segments tile the domain without gaps; jumps are allowed between
/// consecutive segments. Point evaluation returns the right limit, except at
/// `domain_hi` where only the left limit exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal<T> {
    segments: Vec<Segment<T>>,
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

impl<T: Scalar> Marginal<T> {
    pub fn new(segments: Vec<Segment<T>>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidFunction("no segments".into()));
        }
        if segments[0].x_lo != T::zero() {
            return Err(Error::InvalidFunction(format!(
                "domain must start at 0, starts at {}",
                segments[0].x_lo
            )));
        }
        for (k, s) in segments.iter().enumerate() {
            let finite = [s.x_lo, s.x_hi, s.y_lo, s.y_hi].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidFunction(format!("segment {k} is not finite")));
            }
            if !(s.x_lo < s.x_hi) {
                return Err(Error::InvalidFunction(format!(
                    "segment {k} is empty: [{}, {}]",
                    s.x_lo, s.x_hi
                )));
            }
            if k > 0 && segments[k - 1].x_hi != s.x_lo {
                return Err(Error::InvalidFunction(format!(
                    "segments {} and {k} do not tile: {} vs {}",
                    k - 1,
                    segments[k - 1].x_hi,
                    s.x_lo
                )));
            }
        }
        Ok(Marginal { segments })
    }

    /// `f(x) = c` on `[0, hi]`.
    pub fn constant(c: T, hi: T) -> Result<Self> {
        Self::new(vec![Segment::new(T::zero(), hi, c, c)])
    }

    /// `f(x) = a + b x` on `[0, hi]`.
    pub fn affine(a: T, b: T, hi: T) -> Result<Self> {
        Self::new(vec![Segment::new(T::zero(), hi, a, a + b * hi)])
    }

    /// Continuous interpolation through `(x, y)` points; the first point must be at `x = 0`.
    pub fn from_points(points: &[(T, T)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidFunction("need at least two points".into()));
        }
        let segments = points
            .windows(2)
            .map(|w| Segment::new(w[0].0, w[1].0, w[0].1, w[1].1))
            .collect();
        Self::new(segments)
    }

    /// Samples `f` at `pieces + 1` evenly spaced points of `[0, hi]`.
    pub fn sample(hi: T, pieces: usize, f: impl Fn(T) -> T) -> Result<Self> {
        if pieces == 0 || !(hi > T::zero()) {
            return Err(Error::InvalidFunction("sampling needs pieces > 0 and hi > 0".into()));
        }
        let n = T::from_usize(pieces).unwrap();
        let xs: Vec<T> = (0..=pieces)
            .map(|k| if k == pieces { hi } else { hi * T::from_usize(k).unwrap() / n })
            .collect();
        let points: Vec<(T, T)> = xs.iter().map(|&x| (x, f(x))).collect();
        Self::from_points(&points)
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub fn domain_hi(&self) -> T {
        self.segments.last().unwrap().x_hi
    }

    /// Segment boundaries, including `0` and `domain_hi`.
    pub fn breakpoints(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        out.push(T::zero());
        out.extend(self.segments.iter().map(|s| s.x_hi));
        out
    }

    fn check_domain(&self, x: T) -> Result<()> {
        if x < T::zero() || x > self.domain_hi() || x.is_nan() {
            return Err(Error::OutOfDomain { x: to_f64(x), hi: to_f64(self.domain_hi()) });
        }
        Ok(())
    }

    // first segment with x_hi > x, clamped to the last one
    fn right_index(&self, x: T) -> usize {
        let k = self.segments.partition_point(|s| s.x_hi <= x);
        k.min(self.segments.len() - 1)
    }

    // first segment with x_hi >= x
    fn left_index(&self, x: T) -> usize {
        let k = self.segments.partition_point(|s| s.x_hi < x);
        k.min(self.segments.len() - 1)
    }

    /// Value at `x`, clamped into the domain.
    pub fn eval(&self, x: T) -> T {
        let x = x.max(T::zero()).min(self.domain_hi());
        self.segments[self.right_index(x)].at(x)
    }

    /// Checked point evaluation (right limit; left limit at `domain_hi`).
    pub fn value(&self, x: T) -> Result<T> {
        self.check_domain(x)?;
        Ok(self.eval(x))
    }

    pub fn left_limit(&self, x: T) -> Result<T> {
        if !(x > T::zero()) || x > self.domain_hi() {
            return Err(Error::LimitSide { side: "left", x: to_f64(x), hi: to_f64(self.domain_hi()) });
        }
        Ok(self.segments[self.left_index(x)].at(x))
    }

    pub fn right_limit(&self, x: T) -> Result<T> {
        if x < T::zero() || !(x < self.domain_hi()) {
            return Err(Error::LimitSide { side: "right", x: to_f64(x), hi: to_f64(self.domain_hi()) });
        }
        Ok(self.segments[self.right_index(x)].at(x))
    }

    /// Exact integral over `[a, b]`.
    pub fn integrate(&self, a: T, b: T) -> Result<T> {
        self.check_domain(a)?;
        self.check_domain(b)?;
        if a > b {
            return Err(Error::InvalidFunction(format!("integration bounds reversed: {a} > {b}")));
        }
        let mut total = T::zero();
        for s in &self.segments[self.right_index(a)..] {
            if s.x_lo >= b {
                break;
            }
            let lo = s.x_lo.max(a);
            let hi = s.x_hi.min(b);
            if hi > lo {
                total = total + (s.at(lo) + s.at(hi)) * (hi - lo) / T::lit(2.0);
            }
        }
        Ok(total)
    }

    /// `g(r) = f(reach - r)` on `[0, reach]`.
    pub fn reflect(&self, reach: T) -> Result<Self> {
        if !(reach > T::zero()) || reach > self.domain_hi() {
            return Err(Error::OutOfDomain { x: to_f64(reach), hi: to_f64(self.domain_hi()) });
        }
        let base = self.restrict(reach)?;
        let segments = base
            .segments
            .iter()
            .rev()
            .map(|s| Segment::new(reach - s.x_hi, reach - s.x_lo, s.y_hi, s.y_lo))
            .collect();
        Self::new(segments)
    }

    /// Truncates the domain to `[0, hi]`.
    pub fn restrict(&self, hi: T) -> Result<Self> {
        if !(hi > T::zero()) || hi > self.domain_hi() {
            return Err(Error::OutOfDomain { x: to_f64(hi), hi: to_f64(self.domain_hi()) });
        }
        if hi == self.domain_hi() {
            return Ok(self.clone());
        }
        let mut out = Vec::new();
        for s in &self.segments {
            if s.x_lo >= hi {
                break;
            }
            if s.x_hi <= hi {
                out.push(*s);
            } else {
                out.push(Segment::new(s.x_lo, hi, s.y_lo, s.at(hi)));
            }
        }
        Self::new(out)
    }

    /// `g(t) = f(t + offset)` on `[0, domain_hi - offset]`.
    pub fn shift(&self, offset: T) -> Result<Self> {
        if offset < T::zero() || !(offset < self.domain_hi()) {
            return Err(Error::OutOfDomain { x: to_f64(offset), hi: to_f64(self.domain_hi()) });
        }
        if offset == T::zero() {
            return Ok(self.clone());
        }
        let mut out = Vec::new();
        for s in &self.segments {
            if s.x_hi <= offset {
                continue;
            }
            if s.x_lo < offset {
                out.push(Segment::new(T::zero(), s.x_hi - offset, s.at(offset), s.y_hi));
            } else {
                out.push(Segment::new(s.x_lo - offset, s.x_hi - offset, s.y_lo, s.y_hi));
            }
        }
        Self::new(out)
    }

    /// Applies `op` pointwise on the common domain of `self` and `other`.
    pub fn zip_with(&self, other: &Self, op: impl Fn(T, T) -> T) -> Result<Self> {
        let hi = self.domain_hi().min(other.domain_hi());
        let mut xs: Vec<T> = self
            .breakpoints()
            .into_iter()
            .chain(other.breakpoints())
            .filter(|&x| x <= hi)
            .collect();
        xs.push(hi);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        let mut out = Vec::with_capacity(xs.len());
        for w in xs.windows(2) {
            let (p, q) = (w[0], w[1]);
            let mid = (p + q) / T::lit(2.0);
            let sa = &self.segments[self.right_index(mid)];
            let sb = &other.segments[other.right_index(mid)];
            out.push(Segment::new(p, q, op(sa.at(p), sb.at(p)), op(sa.at(q), sb.at(q))));
        }
        Self::new(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Applies `op` to every value, keeping the segment structure.
    pub fn map_values(&self, op: impl Fn(T) -> T) -> Self {
        let segments = self
            .segments
            .iter()
            .map(|s| Segment::new(s.x_lo, s.x_hi, op(s.y_lo), op(s.y_hi)))
            .collect();
        Marginal { segments }
    }

    /// Pointwise minimum, splitting segments where the two functions cross.
    pub fn pointwise_min(&self, other: &Self) -> Result<Self> {
        let diff = self.sub(other)?;
        let mut out = Vec::new();
        for d in diff.segments() {
            let (p, q) = (d.x_lo, d.x_hi);
            let mid = (p + q) / T::lit(2.0);
            let sa = &self.segments[self.right_index(mid)];
            let sb = &other.segments[other.right_index(mid)];
            let crosses = (d.y_lo < T::zero() && d.y_hi > T::zero()) || (d.y_lo > T::zero() && d.y_hi < T::zero());
            let mut cuts = vec![p];
            if crosses {
                let c = p + (q - p) * (d.y_lo / (d.y_lo - d.y_hi));
                if c > p && c < q {
                    cuts.push(c);
                }
            }
            cuts.push(q);
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let m = (a + b) / T::lit(2.0);
                let pick = if sa.at(m) <= sb.at(m) { sa } else { sb };
                out.push(Segment::new(a, b, pick.at(a), pick.at(b)));
            }
        }
        Self::new(out)
    }

    pub fn min_value(&self) -> T {
        self.segments.iter().fold(T::infinity(), |m, s| m.min(s.y_lo).min(s.y_hi))
    }

    pub fn max_value(&self) -> T {
        self.segments.iter().fold(T::neg_infinity(), |m, s| m.max(s.y_lo).max(s.y_hi))
    }

    fn scale(&self) -> T {
        T::one() + self.min_value().abs().max(self.max_value().abs())
    }

    /// Nondecreasing within `slack`, jumps included.
    pub fn is_nondecreasing(&self, slack: T) -> bool {
        let tol = slack * self.scale();
        self.segments.iter().all(|s| s.y_hi >= s.y_lo - tol)
            && self.segments.windows(2).all(|w| w[1].y_lo >= w[0].y_hi - tol)
    }

    /// Nonincreasing within `slack`, jumps included.
    pub fn is_nonincreasing(&self, slack: T) -> bool {
        let tol = slack * self.scale();
        self.segments.iter().all(|s| s.y_hi <= s.y_lo + tol)
            && self.segments.windows(2).all(|w| w[1].y_lo <= w[0].y_hi + tol)
    }

    /// Strictly increasing: every piece has positive slope and no jump goes down.
    pub fn is_strictly_increasing(&self) -> bool {
        self.segments.iter().all(|s| s.y_hi > s.y_lo)
            && self.segments.windows(2).all(|w| w[1].y_lo >= w[0].y_hi)
    }

    pub fn is_continuous(&self, slack: T) -> bool {
        let tol = slack * self.scale();
        self.segments.windows(2).all(|w| (w[1].y_lo - w[0].y_hi).abs() <= tol)
    }

    /// Concave: continuous with nonincreasing slopes (within `slack`).
    pub fn is_concave(&self, slack: T) -> bool {
        self.is_continuous(slack)
            && self
                .segments
                .windows(2)
                .all(|w| w[1].slope() <= w[0].slope() + slack * (T::one() + w[0].slope().abs()))
    }

    /// Convex: nondecreasing slopes, and any jump goes up.
    pub fn is_convex(&self, slack: T) -> bool {
        let tol = slack * self.scale();
        self.segments.windows(2).all(|w| {
            w[1].y_lo >= w[0].y_hi - tol
                && w[1].slope() >= w[0].slope() - slack * (T::one() + w[0].slope().abs())
        })
    }
}

/// Integral `F(t) = ∫₀ᵗ f` of a marginal, with cumulative values cached at breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct CostIntegral<T> {
    base: Marginal<T>,
    cumulative: Vec<T>,
}

impl<T: Scalar> CostIntegral<T> {
    pub fn new(base: Marginal<T>) -> Self {
        let mut cumulative = Vec::with_capacity(base.segments.len() + 1);
        let mut acc = T::zero();
        cumulative.push(acc);
        for s in &base.segments {
            acc = acc + s.area();
            cumulative.push(acc);
        }
        CostIntegral { base, cumulative }
    }

    pub fn marginal(&self) -> &Marginal<T> {
        &self.base
    }

    pub fn into_marginal(self) -> Marginal<T> {
        self.base
    }

    pub fn domain_hi(&self) -> T {
        self.base.domain_hi()
    }

    /// `F(t)` with `t` clamped into the domain.
    pub fn eval(&self, t: T) -> T {
        let t = t.max(T::zero()).min(self.domain_hi());
        let k = self.base.right_index(t);
        self.cumulative[k] + self.base.segments[k].area_to(t)
    }

    pub fn value(&self, t: T) -> Result<T> {
        self.base.check_domain(t)?;
        Ok(self.eval(t))
    }

    /// `F(b) - F(a)`.
    pub fn integrate(&self, a: T, b: T) -> Result<T> {
        if a > b {
            return Err(Error::InvalidFunction(format!("integration bounds reversed: {a} > {b}")));
        }
        Ok(self.value(b)? - self.value(a)?)
    }
}

/// How an infimal convolution was evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvolutionMethod {
    Single,
    /// All marginals nondecreasing: exact merge of level sets.
    ExactMerge,
    /// All marginals nonincreasing: exact lower envelope of the integrals.
    ConcaveEnvelope,
    /// Anything else: dynamic program on a uniform grid.
    GridDp,
}

#[derive(Clone, Debug)]
struct DpTables<T> {
    xs: Vec<T>,
    // choice[k][j] = grid index given to input k when grid index j remains for inputs k..
    choice: Vec<Vec<usize>>,
}

/// `B(t) = min { Σ_k B_k(x_k) : Σ_k x_k = t, 0 ≤ x_k ≤ dom_k }` on `[0, t_max]`,
/// together with a minimizing allocation for any `t`.
#[derive(Clone, Debug)]
pub struct InfConvolution<T> {
    inputs: Vec<CostIntegral<T>>,
    method: ConvolutionMethod,
    result: CostIntegral<T>,
    dp: Option<DpTables<T>>,
    step: T,
}

/// Infimal convolution of `fs` on `[0, t_max]`.
///
/// Exact whenever every marginal is nondecreasing (convex integrals) or every
/// marginal is nonincreasing and covers `[0, t_max]`; otherwise a grid dynamic
/// program with spacing at most `step` is used. Ties in the minimizing
/// allocation go to the lexicographically smallest vector.
pub fn inf_convolve<T: Scalar>(fs: &[CostIntegral<T>], t_max: T, step: T) -> Result<InfConvolution<T>> {
    if fs.is_empty() {
        return Err(Error::NoInputs);
    }
    if !(step > T::zero()) {
        return Err(Error::InvalidStep(to_f64(step)));
    }
    if !(t_max > T::zero()) {
        return Err(Error::InvalidFunction(format!("convolution range must be positive, got {t_max}")));
    }
    let capacity = fs.iter().fold(T::zero(), |acc, f| acc + f.domain_hi());
    if capacity < t_max * (T::one() - T::rel_eps()) {
        return Err(Error::IncompatibleDomains { needed: to_f64(t_max), available: to_f64(capacity) });
    }
    let inputs = fs.to_vec();
    let slack = T::rel_eps();
    if inputs.len() == 1 {
        let f = &inputs[0];
        let hi = t_max.min(f.domain_hi());
        let result = CostIntegral::new(f.marginal().restrict(hi)?);
        return Ok(InfConvolution { inputs, method: ConvolutionMethod::Single, result, dp: None, step });
    }
    if inputs.iter().all(|f| f.marginal().is_nondecreasing(slack)) {
        let result = CostIntegral::new(merge_levels(&inputs, t_max)?);
        return Ok(InfConvolution { inputs, method: ConvolutionMethod::ExactMerge, result, dp: None, step });
    }
    if inputs.iter().all(|f| f.marginal().is_nonincreasing(slack) && f.domain_hi() >= t_max) {
        let result = CostIntegral::new(concave_envelope(&inputs, t_max)?);
        return Ok(InfConvolution { inputs, method: ConvolutionMethod::ConcaveEnvelope, result, dp: None, step });
    }
    let (result, tables) = grid_dp(&inputs, t_max, step)?;
    Ok(InfConvolution { inputs, method: ConvolutionMethod::GridDp, result, dp: Some(tables), step })
}

/// Infimal convolution forced through the grid dynamic program, whatever the
/// shape of the inputs. Values are exact minima over allocations on the grid.
pub fn inf_convolve_grid<T: Scalar>(fs: &[CostIntegral<T>], t_max: T, step: T) -> Result<InfConvolution<T>> {
    if fs.is_empty() {
        return Err(Error::NoInputs);
    }
    if !(step > T::zero()) {
        return Err(Error::InvalidStep(to_f64(step)));
    }
    if !(t_max > T::zero()) {
        return Err(Error::InvalidFunction(format!("convolution range must be positive, got {t_max}")));
    }
    let inputs = fs.to_vec();
    let (result, tables) = grid_dp(&inputs, t_max, step)?;
    Ok(InfConvolution { inputs, method: ConvolutionMethod::GridDp, result, dp: Some(tables), step })
}

impl<T: Scalar> InfConvolution<T> {
    pub fn method(&self) -> ConvolutionMethod {
        self.method
    }

    pub fn integral(&self) -> &CostIntegral<T> {
        &self.result
    }

    pub fn marginal(&self) -> &Marginal<T> {
        self.result.marginal()
    }

    pub fn inputs(&self) -> &[CostIntegral<T>] {
        &self.inputs
    }

    pub fn t_max(&self) -> T {
        self.result.domain_hi()
    }

    /// Minimizing allocation of `t` across the inputs.
    pub fn allocate(&self, t: T) -> Result<Vec<T>> {
        self.result.marginal().check_domain(t)?;
        let n = self.inputs.len();
        if t == T::zero() {
            return Ok(vec![T::zero(); n]);
        }
        match self.method {
            ConvolutionMethod::Single => Ok(vec![t]),
            ConvolutionMethod::ExactMerge => Ok(self.allocate_merge(t)),
            ConvolutionMethod::ConcaveEnvelope => {
                let mut best = 0;
                let mut best_val = T::infinity();
                for (k, f) in self.inputs.iter().enumerate() {
                    let v = f.eval(t);
                    // ties prefer the later input (lexicographically smallest vector)
                    if v < best_val || T::near(v, best_val) {
                        best = k;
                        best_val = best_val.min(v);
                    }
                }
                let mut out = vec![T::zero(); n];
                out[best] = t;
                Ok(out)
            }
            ConvolutionMethod::GridDp => {
                let tables = self.dp.as_ref().unwrap();
                let last = tables.xs.len() - 1;
                let j = tables.xs.partition_point(|&x| x < t).min(last);
                if T::near(tables.xs[j], t) {
                    Ok(walk_choices(tables, j, t))
                } else {
                    let (_, fresh) = grid_dp(&self.inputs, t, self.step)?;
                    let j = fresh.xs.len() - 1;
                    Ok(walk_choices(&fresh, j, t))
                }
            }
        }
    }

    fn allocate_merge(&self, t: T) -> Vec<T> {
        let mu = self.result.marginal().eval(t);
        let mut xs: Vec<T> = self.inputs.iter().map(|f| level_strict(f.marginal(), mu)).collect();
        let mut room: Vec<T> = self
            .inputs
            .iter()
            .zip(&xs)
            .map(|(f, &x)| level_weak(f.marginal(), mu) - x)
            .collect();
        let mut rest = t - xs.iter().fold(T::zero(), |a, &b| a + b);
        // flat pieces at level mu absorb the remainder, last input first
        for k in (0..xs.len()).rev() {
            if rest <= T::zero() {
                break;
            }
            let add = rest.min(room[k]);
            xs[k] = xs[k] + add;
            room[k] = room[k] - add;
            rest = rest - add;
        }
        rebalance(&mut xs, rest, &self.inputs);
        xs
    }
}

// absorbs rounding residue so the allocation sums to the target exactly
fn rebalance<T: Scalar>(xs: &mut [T], mut rest: T, inputs: &[CostIntegral<T>]) {
    for k in (0..xs.len()).rev() {
        if rest > T::zero() {
            let add = rest.min(inputs[k].domain_hi() - xs[k]).max(T::zero());
            xs[k] = xs[k] + add;
            rest = rest - add;
        } else if rest < T::zero() {
            let sub = (-rest).min(xs[k]);
            xs[k] = xs[k] - sub;
            rest = rest + sub;
        }
    }
}

fn walk_choices<T: Scalar>(tables: &DpTables<T>, mut j: usize, t: T) -> Vec<T> {
    let n = tables.choice.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let m = tables.choice[k][j];
        out.push(tables.xs[m]);
        j -= m;
    }
    let total = out.iter().fold(T::zero(), |a, &b| a + b);
    let rest = t - total;
    if let Some(last) = out.iter_mut().rev().find(|x| **x > T::zero()) {
        *last = *last + rest;
    }
    out
}

/// Measure of `{x : f(x) < mu}` for a nondecreasing `f`.
fn level_strict<T: Scalar>(f: &Marginal<T>, mu: T) -> T {
    for s in f.segments() {
        if s.y_lo >= mu {
            return s.x_lo;
        }
        if s.y_hi < mu {
            continue;
        }
        return s.x_lo + (mu - s.y_lo) / (s.y_hi - s.y_lo) * s.width();
    }
    f.domain_hi()
}

/// Measure of `{x : f(x) ≤ mu}` for a nondecreasing `f`.
fn level_weak<T: Scalar>(f: &Marginal<T>, mu: T) -> T {
    for s in f.segments() {
        if s.y_lo > mu {
            return s.x_lo;
        }
        if s.y_hi <= mu {
            continue;
        }
        return s.x_lo + (mu - s.y_lo) / (s.y_hi - s.y_lo) * s.width();
    }
    f.domain_hi()
}

fn merge_levels<T: Scalar>(inputs: &[CostIntegral<T>], t_max: T) -> Result<Marginal<T>> {
    let mut levels: Vec<T> = inputs
        .iter()
        .flat_map(|f| f.marginal().segments().iter().flat_map(|s| [s.y_lo, s.y_hi]))
        .collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let total = |mu: T, weak: bool| {
        inputs.iter().fold(T::zero(), |acc, f| {
            acc + if weak { level_weak(f.marginal(), mu) } else { level_strict(f.marginal(), mu) }
        })
    };
    let mut out: Vec<Segment<T>> = Vec::new();
    let mut t = T::zero();
    for (j, &mu) in levels.iter().enumerate() {
        let flat_end = total(mu, true);
        if flat_end > t {
            let hi = flat_end.min(t_max);
            out.push(Segment::new(t, hi, mu, mu));
            t = hi;
        }
        if t >= t_max {
            break;
        }
        if let Some(&next) = levels.get(j + 1) {
            let end = total(next, false);
            if end > t {
                let hi = end.min(t_max);
                let y_hi = if hi < end { mu + (next - mu) * ((hi - t) / (end - t)) } else { next };
                out.push(Segment::new(t, hi, mu, y_hi));
                t = hi;
            }
        }
        if t >= t_max {
            break;
        }
    }
    if t < t_max {
        if T::near(t, t_max) {
            if let Some(last) = out.last_mut() {
                last.x_hi = t_max;
            }
        } else {
            return Err(Error::IncompatibleDomains { needed: to_f64(t_max), available: to_f64(t) });
        }
    }
    Marginal::new(out)
}

fn concave_envelope<T: Scalar>(inputs: &[CostIntegral<T>], t_max: T) -> Result<Marginal<T>> {
    let mut xs: Vec<T> = inputs
        .iter()
        .flat_map(|f| f.marginal().breakpoints())
        .filter(|&x| x < t_max)
        .collect();
    xs.push(t_max);
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    let two = T::lit(2.0);
    let mut cuts = Vec::with_capacity(xs.len() * 2);
    for w in xs.windows(2) {
        let (p, q) = (w[0], w[1]);
        cuts.push(p);
        let mid = (p + q) / two;
        // each integral is a quadratic in (t - p) on [p, q]
        let quads: Vec<(T, T, T)> = inputs
            .iter()
            .map(|f| {
                let s = &f.marginal().segments[f.marginal().right_index(mid)];
                (f.eval(p), s.at(p), s.slope() / two)
            })
            .collect();
        let mut inner = Vec::new();
        for a in 0..quads.len() {
            for b in a + 1..quads.len() {
                let c0 = quads[a].0 - quads[b].0;
                let c1 = quads[a].1 - quads[b].1;
                let c2 = quads[a].2 - quads[b].2;
                for u in quadratic_roots(c2, c1, c0) {
                    if u > T::zero() && p + u < q {
                        inner.push(p + u);
                    }
                }
            }
        }
        inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
        inner.dedup();
        cuts.extend(inner);
    }
    cuts.push(t_max);
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !(b > a) {
            continue;
        }
        let mid = (a + b) / two;
        let best = inputs
            .iter()
            .min_by(|f, g| f.eval(mid).partial_cmp(&g.eval(mid)).unwrap())
            .unwrap();
        let s = &best.marginal().segments[best.marginal().right_index(mid)];
        out.push(Segment::new(a, b, s.at(a), s.at(b)));
    }
    Marginal::new(out)
}

/// Real roots of `a u² + b u + c`.
fn quadratic_roots<T: Scalar>(a: T, b: T, c: T) -> Vec<T> {
    let scale = T::one() + a.abs().max(b.abs()).max(c.abs());
    if a.abs() <= T::rel_eps() * scale {
        if b.abs() <= T::rel_eps() * scale {
            return vec![];
        }
        return vec![-c / b];
    }
    let disc = b * b - T::lit(4.0) * a * c;
    if disc < T::zero() {
        return vec![];
    }
    let sq = disc.sqrt();
    // numerically stable form
    let q = if b >= T::zero() { -(b + sq) / T::lit(2.0) } else { -(b - sq) / T::lit(2.0) };
    let mut roots = vec![q / a];
    if q != T::zero() {
        roots.push(c / q);
    }
    roots
}

fn grid_dp<T: Scalar>(inputs: &[CostIntegral<T>], t_max: T, step: T) -> Result<(CostIntegral<T>, DpTables<T>)> {
    let n = (t_max / step).ceil().to_usize().unwrap_or(1).max(1);
    let nt = T::from_usize(n).unwrap();
    let xs: Vec<T> = (0..=n)
        .map(|j| if j == n { t_max } else { t_max * T::from_usize(j).unwrap() / nt })
        .collect();
    let k = inputs.len();
    let inf = T::infinity();
    let sample = |f: &CostIntegral<T>| -> Vec<T> {
        xs.iter()
            .map(|&x| if x <= f.domain_hi() * (T::one() + T::rel_eps()) { f.eval(x) } else { inf })
            .collect()
    };
    // suffix value tables: value[j] = best cost of giving grid index j to inputs k..K
    let mut choice = vec![Vec::new(); k];
    let mut value = sample(&inputs[k - 1]);
    choice[k - 1] = (0..=n).collect();
    for idx in (0..k - 1).rev() {
        let own = sample(&inputs[idx]);
        let mut next = vec![inf; n + 1];
        let mut pick = vec![0usize; n + 1];
        for j in 0..=n {
            let mut best = inf;
            let mut arg = 0;
            for m in 0..=j {
                if own[m] == inf {
                    break;
                }
                let v = own[m] + value[j - m];
                // strict improvement keeps the smallest share for this input
                if v < best && !T::near(v, best) {
                    best = v;
                    arg = m;
                }
            }
            next[j] = best;
            pick[j] = arg;
        }
        value = next;
        choice[idx] = pick;
    }
    if value[n] == inf {
        return Err(Error::IncompatibleDomains { needed: to_f64(t_max), available: 0.0 });
    }
    let segments = xs
        .windows(2)
        .enumerate()
        .map(|(j, w)| {
            let slope = (value[j + 1] - value[j]) / (w[1] - w[0]);
            Segment::new(w[0], w[1], slope, slope)
        })
        .collect();
    Ok((CostIntegral::new(Marginal::new(segments)?), DpTables { xs, choice }))
}

/// Lower convex hull of points sorted by `x` (Andrew's monotone chain).
pub fn lower_convex_hull<T: Scalar>(points: &[(T, T)]) -> Vec<(T, T)> {
    let mut hull: Vec<(T, T)> = Vec::with_capacity(points.len());
    for &p in points {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= T::zero() {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(a: f64, b: f64, hi: f64) -> Marginal<f64> {
        Marginal::affine(a, b, hi).unwrap()
    }

    #[test]
    fn constant_integral_is_area() {
        let f = Marginal::<f64>::constant(2.5, 4.0).unwrap();
        assert!((f.integrate(0.0, 4.0).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn identity_integral_closed_form() {
        let f = lin(0.0, 1.0, 3.0);
        assert!((f.integrate(0.0, 3.0).unwrap() - 4.5).abs() < 1e-12);
        let c = CostIntegral::new(f);
        assert!((c.integrate(1.0, 3.0).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn jump_limits() {
        let f = Marginal::new(vec![Segment::new(0.0, 1.0, 2.0, 2.0), Segment::new(1.0, 2.0, 5.0, 5.0)]).unwrap();
        assert_eq!(f.left_limit(1.0).unwrap(), 2.0);
        assert_eq!(f.right_limit(1.0).unwrap(), 5.0);
        assert_eq!(f.eval(1.0), 5.0);
        assert_eq!(f.eval(2.0), 5.0);
        assert!(f.left_limit(0.0).is_err());
        assert!(f.right_limit(2.0).is_err());
        let g = lin(1.0, 1.0, 2.0);
        assert_eq!(g.left_limit(0.5).unwrap(), g.right_limit(0.5).unwrap());
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let f = lin(0.0, 1.0, 1.0);
        assert!(f.integrate(0.0, 1.5).is_err());
        assert!(f.value(-0.1).is_err());
        assert!(f.reflect(2.0).is_err());
    }

    #[test]
    fn bad_tiling_is_rejected() {
        let err = Marginal::new(vec![Segment::new(0.0, 1.0, 0.0, 0.0), Segment::new(1.5, 2.0, 0.0, 0.0)]);
        assert!(err.is_err());
        assert!(Marginal::new(vec![Segment::new(0.5, 1.0, 0.0, 0.0)]).is_err());
        assert!(Marginal::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn reflect_examples() {
        let c = Marginal::constant(3.0, 2.0).unwrap().reflect(2.0).unwrap();
        assert_eq!(c.eval(0.3), 3.0);
        let g = lin(0.0, 1.0, 5.0).reflect(2.0).unwrap();
        assert!((g.eval(0.5) - 1.5).abs() < 1e-12);
        assert_eq!(g.domain_hi(), 2.0);
        let f = Marginal::new(vec![Segment::new(0.0, 1.0, 2.0, 2.0), Segment::new(1.0, 3.0, 5.0, 7.0)]).unwrap();
        let back = f.reflect(3.0).unwrap().reflect(3.0).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn pointwise_min_splits_at_crossing() {
        let a = lin(0.0, 1.0, 2.0);
        let b = Marginal::constant(1.0, 2.0).unwrap();
        let m = a.pointwise_min(&b).unwrap();
        assert!((m.eval(0.5) - 0.5).abs() < 1e-12);
        assert!((m.eval(1.5) - 1.0).abs() < 1e-12);
        assert!(m.breakpoints().iter().any(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn shape_predicates() {
        let f = Marginal::from_points(&[(0.0, 0.0), (1.0, 1.0), (2.0, 1.5)]).unwrap();
        assert!(f.is_concave(1e-9));
        assert!(!f.is_convex(1e-9));
        assert!(f.is_strictly_increasing());
        let g = Marginal::from_points(&[(0.0, 0.0), (1.0, 1.0), (2.0, 3.0)]).unwrap();
        assert!(g.is_convex(1e-9));
        assert!(!g.is_concave(1e-9));
    }

    #[test]
    fn single_competitor_convolution_is_identity() {
        let f = CostIntegral::new(lin(1.0, 2.0, 3.0));
        let conv = inf_convolve(std::slice::from_ref(&f), 2.0, 1e-3).unwrap();
        assert_eq!(conv.method(), ConvolutionMethod::Single);
        assert!((conv.integral().eval(1.7) - f.eval(1.7)).abs() < 1e-12);
    }

    #[test]
    fn parallel_resistor_rule() {
        let fs = [CostIntegral::new(lin(0.0, 1.0, 3.0)), CostIntegral::new(lin(0.0, 2.0, 3.0))];
        let conv = inf_convolve(&fs, 3.0, 1e-3).unwrap();
        assert_eq!(conv.method(), ConvolutionMethod::ExactMerge);
        for &t in &[0.3, 1.0, 2.2, 3.0] {
            assert!((conv.marginal().eval(t) - 2.0 / 3.0 * t).abs() < 1e-12);
        }
        let alloc = conv.allocate(3.0).unwrap();
        assert!((alloc[0] - 2.0).abs() < 1e-12 && (alloc[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_ties_go_to_last_input() {
        let fs = [
            CostIntegral::new(Marginal::<f64>::constant(2.0, 3.0).unwrap()),
            CostIntegral::new(Marginal::constant(2.0, 3.0).unwrap()),
        ];
        let conv = inf_convolve(&fs, 3.0, 1e-3).unwrap();
        assert_eq!(conv.allocate(3.0).unwrap(), vec![0.0, 3.0]);
        assert!((conv.integral().eval(3.0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn min_of_increasing_and_constant() {
        let d = lin(0.5, 1.0, 4.0);
        let lam = Marginal::constant(2.0, 4.0).unwrap();
        let conv = inf_convolve(&[CostIntegral::new(lam.clone()), CostIntegral::new(d.clone())], 4.0, 1e-3).unwrap();
        let expect = d.pointwise_min(&lam).unwrap();
        for k in 0..=40 {
            let t = k as f64 * 0.1;
            assert!((conv.marginal().eval(t) - expect.eval(t)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn concave_envelope_takes_cheapest_single_input() {
        let a = CostIntegral::new(lin(3.0, -1.0, 2.0));
        let b = CostIntegral::new(lin(2.5, -0.2, 2.0));
        let conv = inf_convolve(&[a.clone(), b.clone()], 2.0, 1e-3).unwrap();
        assert_eq!(conv.method(), ConvolutionMethod::ConcaveEnvelope);
        for k in 0..=20 {
            let t = k as f64 * 0.1;
            let want = a.eval(t).min(b.eval(t));
            assert!((conv.integral().eval(t) - want).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn hull_drops_reflex_points() {
        let pts = [(0.0, 0.0), (1.0, 2.0), (2.0, 1.0), (3.0, 3.0)];
        let h = lower_convex_hull(&pts);
        assert_eq!(h, vec![(0.0, 0.0), (2.0, 1.0), (3.0, 3.0)]);
    }

    #[test]
    fn works_in_single_precision() {
        let f: Marginal<f32> = Marginal::affine(0.0, 1.0, 3.0).unwrap();
        assert!((f.integrate(0.0, 3.0).unwrap() - 4.5).abs() < 1e-5);
        let conv = inf_convolve(
            &[CostIntegral::new(f.clone()), CostIntegral::new(Marginal::affine(0.0, 2.0, 3.0).unwrap())],
            3.0,
            1e-2,
        )
        .unwrap();
        assert!((conv.marginal().eval(1.5) - 1.0).abs() < 1e-4);
    }
}
