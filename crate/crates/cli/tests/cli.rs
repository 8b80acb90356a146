use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relay_pricing::io::{self, CurveSpec, ProfileFile};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relay-pricing"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_then_optimal() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("olig.toml");
    let o = run(&["generate", "oligopoly-linear", "--params", "N=3,c=1,R_s=1", "-o", p(&file)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["optimal", p(&file)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    // uniform split, D* = 3 * (1/3)^2 / 2
    assert!(text.contains("optimal cost: 0.166666667"), "{text}");
    let line = text.lines().find(|l| l.trim_start().starts_with("s->r1")).unwrap();
    let flow: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((flow - 1.0 / 3.0).abs() < 1e-6, "{line}");
}

#[test]
fn poa_of_linear_oligopoly_is_the_relay_count() {
    let o = run(&["poa", p(&golden("oligopoly_linear_n4.toml")), "--constructed"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("price of anarchy")).unwrap();
    let ratio: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!((ratio - 4.0).abs() <= 1e-3, "{line}");
}

#[test]
fn poa_json_is_machine_readable() {
    let o = run(&["poa", p(&golden("oligopoly_linear_n4.toml")), "--constructed", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["ratio"].as_f64().unwrap() - 4.0).abs() <= 1e-3);
    assert_eq!(v["equilibria"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_is_increasing_and_deterministic() {
    let args = ["sweep", "myopic-general", "--param", "M", "--from", "10", "--to", "1000", "--steps", "6"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("param,opt_cost,eq_cost,poa"));
    let poa: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(poa.len(), 6);
    assert!(poa.windows(2).all(|w| w[1] > w[0]), "{text}");
}

#[test]
fn perturbed_profile_fails_verification_and_names_the_relay() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = golden("oligopoly_linear_n3.toml");
    let prof = dir.path().join("mc.toml");
    let o = run(&["equilibrium", p(&scenario), "--scheme", "marginal-cost", "--out", p(&prof)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(run(&["verify", p(&scenario), "--profile", p(&prof)]).status.code(), Some(0));

    // raise r2's price: it no longer mirrors its competitors
    let mut pf: ProfileFile = io::load_profile(&prof).unwrap();
    let entry = pf.prices.iter_mut().find(|x| x.relay == "r2").unwrap();
    let base = entry.marginal.build(2.0, 64).unwrap();
    entry.marginal = CurveSpec::from_marginal(&base.map_values(|y| y + 0.05));
    let bad = dir.path().join("bad.toml");
    io::save_profile(&pf, &bad).unwrap();
    let o = run(&["verify", p(&scenario), "--profile", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("deviating relays:") && text.contains("r2"), "{text}");
}

#[test]
fn embedded_myopic_profile_verifies() {
    let o = run(&["verify", p(&golden("myopic_general.toml")), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["verified"], true);
    assert_eq!(v["efficient"], false);
    assert!((v["total_cost"].as_f64().unwrap() - 179.39).abs() < 1e-6);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["optimal", p(&dir.path().join("missing.toml"))]).status.code(), Some(2));
    assert_eq!(run(&["generate", "no-such-family"]).status.code(), Some(2));
    assert_eq!(run(&["generate", "myopic-general", "--params", "M=1"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));

    let mut sc = io::load(&golden("oligopoly_linear_n3.toml")).unwrap();
    sc.edges[2].cost = CurveSpec::Linear { a: -0.5, b: 1.0, domain: None };
    let file = dir.path().join("neg.toml");
    io::save(&sc, &file).unwrap();
    let o = run(&["optimal", p(&file)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("edges[2].cost"));
}

#[test]
fn monopolistic_scheme_needs_an_oligopoly() {
    let o = run(&["equilibrium", p(&golden("myopic_general.toml")), "--scheme", "monopolistic"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn suite_runs_with_a_seed() {
    let o = run(&["suite", "--kind", "focal", "--trials", "20", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 counterexamples"));
}
