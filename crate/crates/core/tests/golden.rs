//! Regression against checked-in pendulum outputs. Regenerate with UPDATE_GOLDEN=1.

use lindstedt::cli::{cmd_coeffs, RunConfig};
use lindstedt::hamiltonian::Model;
use lindstedt::trees::{Forest, Status, TreeFamilyKey};
use std::path::{Path, PathBuf};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn check(name: &str, actual: &[u8]) {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from golden copy");
}

#[test]
fn pendulum_coefficient_tables() {
    let out = std::env::temp_dir().join(format!("lindstedt-golden-{}", std::process::id()));
    let cfg = RunConfig {
        model: Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("models/pendulum.toml")),
        k: Some(4),
        out: Some(out.clone()),
        ..Default::default()
    };
    let files = cmd_coeffs(&cfg).unwrap();
    assert_eq!(files.len(), 4);
    for k in 1..=4 {
        let name = format!("coeffs_k{k}.csv");
        check(&format!("pendulum_{name}"), &std::fs::read(out.join(&name)).unwrap());
    }
    let _ = std::fs::remove_dir_all(out);
}

#[test]
fn pendulum_tree_dump() {
    let m = Model::pendulum();
    let f = Forest::bare(&m, 3);
    let coeffs = f.lindstedt_coefficients(&m);
    let mut s = String::new();
    for (k, nu) in coeffs.keys() {
        for gamma in 0..m.d() {
            let key = TreeFamilyKey { k: *k, nu: *nu, gamma, status: Status::Bare };
            for t in f.enumerate(&key).unwrap() {
                s.push_str(&format!("# k={k} nu={} gamma={gamma}\n", nu[0]));
                s.push_str(&t.dump(1));
            }
        }
    }
    check("pendulum_trees_k3.txt", s.as_bytes());
}
