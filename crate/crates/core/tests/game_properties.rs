use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relay_pricing::analysis::{
    evaluate, focal_duopoly_profile, optimum, price_of_anarchy, random_concave_oligopoly, random_convex_oligopoly,
    random_dag,
};
use relay_pricing::flow::path_min_marginals;
use relay_pricing::game::{
    best_response, construct_marginal_cost_equilibrium, construct_monopolistic_equilibrium, induced_routing,
    local_info, node_cost, oligopoly_relays, realized_profit, relay_path_marginals, replicating_response,
    verify_equilibrium, virtual_competitor, PricingProfile,
};
use relay_pricing::io::Instance;
use relay_pricing::MarginalFn;

fn convex_oligopoly(seed: u64, max: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_convex_oligopoly(&mut rng, max).build().unwrap()
}

/// Equilibria of an oligopoly: marginal cost, monopolistic and, for duopolies, a focal one.
fn oligopoly_equilibria(inst: &Instance, seed: u64) -> Vec<PricingProfile> {
    let game = inst.game();
    let mut out = vec![
        construct_marginal_cost_equilibrium(&game).unwrap().0.profile,
        construct_monopolistic_equilibrium(&game).unwrap().0.profile,
    ];
    if inst.net.relays().count() == 2 {
        let opt = optimum(&game).unwrap();
        let f1 = opt.routing.throughput(&inst.net, inst.net.relays().next().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.push(focal_duopoly_profile(&mut rng, inst, &opt, f1).unwrap());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever relay `i` announces, its realized profit stays below the
    /// best-response value computed from its competitors' prices.
    #[test]
    fn realized_profit_never_beats_the_best_response_value(seed in any::<u64>()) {
        let inst = convex_oligopoly(seed, 3);
        let game = inst.game();
        let tol = game.settings.tol;
        let base = construct_marginal_cost_equilibrium(&game).unwrap().0.profile;
        let routing = induced_routing(&game, &base).unwrap().routing;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let s = inst.net.source();
        for i in inst.net.relays() {
            let bound = best_response(&game, &base, &routing, i).unwrap().anticipated_profit;
            for _ in 0..4 {
                let beta = base.price(i, s).unwrap();
                let level = rng.gen_range(0.5..2.0);
                let tilt = rng.gen_range(-1.0..1.0);
                let deviated = beta.map_values(|y| y * level).add(&MarginalFn::affine(0.0, tilt, beta.domain_hi()).unwrap()).unwrap();
                let mut p = base.clone();
                p.set_price(i, s, deviated);
                p.pins.clear();
                let r = induced_routing(&game, &p).unwrap().routing;
                let realized = realized_profit(&game, &p, &r, i).unwrap();
                prop_assert!(realized <= bound + tol, "relay {:?}: realized {} > bound {}", i, realized, bound);
            }
        }
    }

    /// A relay switching to its replicating response satisfies its own
    /// equality and lower-bound conditions.
    #[test]
    fn replicating_response_meets_its_conditions(seed in any::<u64>()) {
        let inst = convex_oligopoly(seed, 3);
        let game = inst.game();
        let tol = game.settings.tol;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let mut p = construct_monopolistic_equilibrium(&game).unwrap().0.profile;
        let relays: Vec<_> = inst.net.relays().collect();
        let i = relays[rng.gen_range(0..relays.len())];
        let routing = induced_routing(&game, &p).unwrap().routing;
        let info = local_info(&game, &p, &routing, i).unwrap();
        for (h, beta) in replicating_response(&game, &p, &routing, &info).unwrap() {
            p.set_price(i, h, beta);
        }
        p.pins.clear();
        let v = verify_equilibrium(&game, &p).unwrap();
        let check = v.relays.iter().find(|c| c.relay == i).unwrap();
        for m in &check.markets {
            prop_assert!(m.lower_bound_violation <= tol && m.equality_violation <= tol, "{:?}", m);
        }
    }

    /// One-sided marginal bounds at verified oligopoly equilibria.
    #[test]
    fn oligopoly_equilibria_satisfy_one_sided_bounds(seed in any::<u64>()) {
        let inst = convex_oligopoly(seed, 3);
        let game = inst.game();
        let s = inst.net.source();
        let r = inst.session_rate;
        let slack = game.settings.tol;
        for p in oligopoly_equilibria(&inst, seed) {
            let v = verify_equilibrium(&game, &p).unwrap();
            prop_assert!(v.verified);
            let flow = |j| v.routing.throughput(&inst.net, j);
            for i in inst.net.relays() {
                let fi = flow(i);
                let hat = virtual_competitor(&game, &p, i, s, r).unwrap();
                let hat = hat.marginal();
                for j in inst.net.relays().filter(|&j| j != i && flow(j) > 1e-9) {
                    let bj = p.price(j, s).unwrap().eval(flow(j));
                    if fi > 1e-9 {
                        prop_assert!(hat.right_limit(r - fi).unwrap() <= bj + slack);
                    }
                    if fi < r - 1e-9 {
                        prop_assert!(hat.left_limit(r - fi).unwrap() >= bj - slack);
                    }
                }
            }
        }
    }

    /// At a verified monopolistic oligopoly equilibrium the dominant relay has
    /// the smallest total path cost.
    #[test]
    fn monopolist_has_the_cheapest_path(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_concave_oligopoly(&mut rng, 4).build().unwrap();
        let game = inst.game();
        let (c, m) = construct_monopolistic_equilibrium(&game).unwrap();
        prop_assert!(verify_equilibrium(&game, &c.profile).unwrap().verified);
        let relays = oligopoly_relays(&inst.net).unwrap();
        let lambdas = relay_path_marginals(&game, &relays).unwrap();
        let k = relays.iter().position(|&j| j == m).unwrap();
        let own = lambdas[k].integrate(0.0, inst.session_rate).unwrap();
        for l in &lambdas {
            prop_assert!(own <= l.integrate(0.0, inst.session_rate).unwrap() + game.settings.tol);
        }
    }

    /// Under marginal cost pricing, each node's forwarding marginal at the optimum equals its path marginal.
    #[test]
    fn honest_recursion_reproduces_path_marginals(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_dag(&mut rng).build().unwrap();
        let game = inst.game();
        let tol = game.settings.tol;
        let (c, opt) = construct_marginal_cost_equilibrium(&game).unwrap();
        let lambda = path_min_marginals(&inst.net, &opt.routing, &inst.costs).unwrap();
        for i in inst.net.nodes().filter(|&n| n != inst.net.destination()) {
            let r = opt.routing.throughput(&inst.net, i);
            if r <= 1e-6 {
                continue;
            }
            let d = node_cost(&game, &c.profile, i, 2.0 * inst.session_rate).unwrap().unwrap();
            let dm = d.marginal();
            let lo = dm.left_limit(r).unwrap().min(dm.right_limit(r).unwrap());
            let hi = dm.left_limit(r).unwrap().max(dm.right_limit(r).unwrap());
            prop_assert!(lambda[i.0] >= lo - tol && lambda[i.0] <= hi + tol,
                "node {}: λ* {} outside [{}, {}]", inst.net.name(i), lambda[i.0], lo, hi);
        }
    }

    #[test]
    fn price_of_anarchy_is_at_least_one(seed in any::<u64>()) {
        let inst = convex_oligopoly(seed, 4);
        let game = inst.game();
        let opt = optimum(&game).unwrap();
        let tol = game.settings.tol;
        let mc = construct_marginal_cost_equilibrium(&game).unwrap().0.profile;
        let mono = construct_monopolistic_equilibrium(&game).unwrap().0.profile;
        let a = evaluate(&game, &mc, &opt).unwrap();
        let b = evaluate(&game, &mono, &opt).unwrap();
        let only_mc = price_of_anarchy(std::slice::from_ref(&a)).unwrap();
        prop_assert!((only_mc.ratio - 1.0).abs() <= tol);
        let both = price_of_anarchy(&[a, b]).unwrap();
        prop_assert!(both.ratio >= 1.0 - tol);
    }
}

#[test]
fn unverified_profiles_are_refused() {
    let inst = convex_oligopoly(5, 3);
    let game = inst.game();
    let opt = optimum(&game).unwrap();
    let mut p = construct_marginal_cost_equilibrium(&game).unwrap().0.profile;
    let i = inst.net.relays().next().unwrap();
    let s = inst.net.source();
    let raised = p.price(i, s).unwrap().map_values(|y| y + 0.5);
    p.set_price(i, s, raised);
    let rep = evaluate(&game, &p, &opt).unwrap();
    assert!(!rep.verified);
    assert!(matches!(
        price_of_anarchy(&[rep]),
        Err(relay_pricing::Error::UnverifiedEquilibrium(0))
    ));
    assert!(matches!(price_of_anarchy(&[]), Err(relay_pricing::Error::EmptyEquilibria)));
}
