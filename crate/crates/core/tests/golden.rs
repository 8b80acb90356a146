use std::path::PathBuf;

use relay_pricing::analysis::generate_example;
use relay_pricing::io::{self, Scenario};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn linear_oligopoly_loads_and_validates() {
    let sc = io::load(&golden("oligopoly_linear_n3.toml")).unwrap();
    let inst = sc.build().unwrap();
    assert_eq!(inst.net.relays().count(), 3);
    assert!(inst.net.validate().passed());
    // each relay path has marginal r
    for j in inst.net.relays() {
        let a = inst.net.edge(inst.net.source(), j).unwrap();
        let b = inst.net.edge(j, inst.net.destination()).unwrap();
        let lam = inst.costs.marginal(a).eval(0.7) + inst.costs.marginal(b).eval(0.7);
        assert!((lam - 0.7).abs() < 1e-12);
    }
}

#[test]
fn myopic_golden_matches_link_labels() {
    let sc = io::load(&golden("myopic_general.toml")).unwrap();
    let inst = sc.build().unwrap();
    let (m, eps, delta, r) = (100.0, 0.2, 1.0, 1.0);
    let id = |n: &str| inst.net.id_of(n).unwrap();
    let d = |a: &str, b: &str| inst.costs.marginal(inst.net.edge(id(a), id(b)).unwrap()).clone();
    for f in [0.0, 2.0 * r] {
        assert!((d("s", "h").eval(f) - 2.0 * delta * f).abs() < 1e-12);
        assert!((d("s", "g").eval(f) - delta * f).abs() < 1e-12);
        assert!((d("h", "i").eval(f) - delta * f).abs() < 1e-12);
        assert!((d("h", "j").eval(f) - delta * f).abs() < 1e-12);
        assert!((d("i", "w").eval(f) - delta * f).abs() < 1e-12);
        assert!((d("j", "w").eval(f) - (2.0 * m + delta * f)).abs() < 1e-12);
        assert!((d("g", "w").eval(f) - (2.0 * m + 2.0 * eps + delta * (f - 2.0 * r))).abs() < 1e-12);
    }
}

#[test]
fn golden_files_match_the_generators() {
    let cases = [
        ("oligopoly_linear_n3.toml", "oligopoly-linear", vec![("N", 3.0), ("c", 1.0), ("R_s", 1.0)]),
        ("oligopoly_linear_n4.toml", "oligopoly-linear", vec![("N", 4.0), ("c", 1.0), ("R_s", 1.0)]),
        ("myopic_general.toml", "myopic-general", vec![("M", 100.0), ("eps", 0.2), ("delta", 1.0), ("R_s", 1.0)]),
        ("duopoly_inefficient.toml", "duopoly-inefficient", vec![]),
        ("convex_unbounded_m50.toml", "convex-unbounded", vec![("N", 2.0), ("M", 50.0)]),
        ("elastic_oligopoly.toml", "elastic-oligopoly", vec![]),
    ];
    for (file, family, params) in cases {
        let params = params.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let generated = generate_example(family, &params).unwrap();
        let text = std::fs::read_to_string(golden(file)).unwrap();
        assert_eq!(generated.to_toml().unwrap(), text, "{file}");
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = std::env::temp_dir().join(format!("relay-pricing-golden-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for entry in std::fs::read_dir(golden("")).unwrap() {
        let path = entry.unwrap().path();
        let sc = io::load(&path).unwrap();
        let out = dir.join(path.file_name().unwrap());
        io::save(&sc, &out).unwrap();
        let first = std::fs::read_to_string(&out).unwrap();
        io::save(&io::load(&out).unwrap(), &out).unwrap();
        assert_eq!(first, std::fs::read_to_string(&out).unwrap(), "{}", path.display());
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn negative_marginal_is_rejected_with_its_field() {
    let mut sc: Scenario = io::load(&golden("oligopoly_linear_n3.toml")).unwrap();
    sc.edges[1].cost = io::CurveSpec::Linear { a: -1.0, b: 0.5, domain: None };
    let err = sc.build().unwrap_err().to_string();
    assert!(err.contains("edges[1].cost"), "{err}");
}
