use proptest::prelude::*;

use relay_pricing::marginals::{inf_convolve, inf_convolve_grid, ConvolutionMethod};
use relay_pricing::{CostFn, MarginalFn};

/// Nondecreasing continuous piecewise-linear marginal on `[0, hi]`.
fn increasing(hi: f64) -> impl Strategy<Value = MarginalFn> {
    (0.0..1.0f64, prop::collection::vec((0.05..1.0f64, 0.0..3.0f64), 1..5)).prop_map(move |(y0, parts)| {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut pts = vec![(0.0, y0)];
        let (mut x, mut y) = (0.0, y0);
        for (w, s) in parts {
            let dx = hi * w / total;
            x += dx;
            y += s * dx;
            pts.push((x, y));
        }
        pts.last_mut().unwrap().0 = hi;
        MarginalFn::from_points(&pts).unwrap()
    })
}

/// Arbitrary piecewise-linear marginal, possibly with jumps, on `[0, hi]`.
fn arbitrary(hi: f64) -> impl Strategy<Value = MarginalFn> {
    prop::collection::vec((0.05..1.0f64, -3.0..3.0f64, -3.0..3.0f64), 1..5).prop_map(move |parts| {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut segs = Vec::new();
        let mut x = 0.0;
        for (k, (w, a, b)) in parts.iter().enumerate() {
            let x_hi = if k + 1 == parts.len() { hi } else { x + hi * w / total };
            segs.push(relay_pricing::Segment::new(x, x_hi, *a, *b));
            x = x_hi;
        }
        MarginalFn::new(segs).unwrap()
    })
}

/// Midpoint-rule integral, independent of the exact segment areas.
fn riemann(f: &MarginalFn, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    (0..n).map(|k| f.eval(a + (k as f64 + 0.5) * h) * h).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integral_matches_riemann_sum(f in arbitrary(2.0), a in 0.0..2.0f64, b in 0.0..2.0f64) {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let exact = f.integrate(a, b).unwrap();
        prop_assert!((exact - riemann(&f, a, b, 20_000)).abs() < 1e-3);
    }

    #[test]
    fn reflection_is_an_involution_and_keeps_area(f in arbitrary(3.0), reach in 0.5..3.0f64) {
        let g = f.reflect(reach).unwrap();
        let back = g.reflect(reach).unwrap();
        for k in 0..=50 {
            let t = reach * k as f64 / 50.0;
            // right limits of the twice reflected function agree away from breakpoints
            if f.breakpoints().iter().all(|b| (b - t).abs() > 1e-9) {
                prop_assert!((back.eval(t) - f.eval(t)).abs() < 1e-9);
            }
        }
        let area = f.integrate(0.0, reach).unwrap();
        prop_assert!((g.integrate(0.0, reach).unwrap() - area).abs() < 1e-9);
    }

    #[test]
    fn convolution_of_convex_is_convex_and_monotone(fs in prop::collection::vec(increasing(2.0), 2..4)) {
        let costs: Vec<CostFn> = fs.into_iter().map(CostFn::new).collect();
        let conv = inf_convolve(&costs, 3.0, 1e-3).unwrap();
        prop_assert_eq!(conv.method(), ConvolutionMethod::ExactMerge);
        prop_assert!(conv.marginal().is_nondecreasing(1e-9));
        let nonneg = costs.iter().all(|c| c.marginal().min_value() >= 0.0);
        if nonneg {
            for k in 0..30 {
                let (a, b) = (3.0 * k as f64 / 30.0, 3.0 * (k + 1) as f64 / 30.0);
                prop_assert!(conv.integral().eval(b) >= conv.integral().eval(a) - 1e-12);
            }
        }
    }

    #[test]
    fn allocation_attains_the_convolution(fs in prop::collection::vec(arbitrary(1.5), 2..4), t in 0.0..1.5f64) {
        let costs: Vec<CostFn> = fs.into_iter().map(CostFn::new).collect();
        let conv = inf_convolve(&costs, 1.5, 1e-3).unwrap();
        let x = conv.allocate(t).unwrap();
        prop_assert!((x.iter().sum::<f64>() - t).abs() < 1e-9);
        // the grid program is exact on its grid; in between, values are interpolated
        let slack = if conv.method() == ConvolutionMethod::GridDp {
            let steep = costs.iter().map(|c| c.marginal().max_value().abs().max(c.marginal().min_value().abs())).fold(0.0, f64::max);
            2.0 * 1e-3 * steep * costs.len() as f64
        } else {
            1e-6
        };
        let value: f64 = costs.iter().zip(&x).map(|(c, &xi)| c.eval(xi)).sum();
        prop_assert!((value - conv.integral().eval(t)).abs() <= slack);
        // never worse than routing everything to a single input that can take it
        for c in &costs {
            if c.domain_hi() >= t {
                prop_assert!(conv.integral().eval(t) <= c.eval(t) + slack);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_merge_agrees_with_fine_grid(fs in prop::collection::vec(increasing(1.0), 2..4)) {
        let costs: Vec<CostFn> = fs.into_iter().map(CostFn::new).collect();
        let exact = inf_convolve(&costs, 1.0, 1e-3).unwrap();
        let grid = inf_convolve_grid(&costs, 1.0, 1e-4).unwrap();
        for k in 0..=200 {
            let t = k as f64 / 200.0;
            prop_assert!((exact.integral().eval(t) - grid.integral().eval(t)).abs() <= 1e-6);
        }
    }
}

#[test]
fn f32_algebra_matches_f64() {
    let f32m = relay_pricing::marginals::Marginal::<f32>::affine(1.0, 2.0, 3.0).unwrap();
    let f64m = MarginalFn::affine(1.0, 2.0, 3.0).unwrap();
    let a = f32m.integrate(0.5, 2.5).unwrap() as f64;
    let b = f64m.integrate(0.5, 2.5).unwrap();
    assert!((a - b).abs() < 1e-5);
}
