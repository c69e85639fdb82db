//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use lindstedt::epsdomain::{measure_constants, bare_cells, exclusion_set, frozen_cells};
use lindstedt::hamiltonian::Model;
use lindstedt::multiscale::{FreqKey, Ladder, ScaleContext, Stats};
use lindstedt::trees::Forest;
use lindstedt::verify::{certificate_suite, compare, eom_residual, log_slope, oracle_lindstedt, sum_series, Report};
use lindstedt::{Nu, C64};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

const EPS_LADDER: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

struct Outcome {
    lines: Vec<String>,
    ok: bool,
}

impl Outcome {
    fn line(&mut self, n: u32, name: &str, pass: bool, detail: String) {
        self.ok &= pass;
        self.lines.push(format!("criterion {n} {name}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
    }
}

fn oracle_dev(model: &Model, k: u32) -> f64 {
    let trees = Forest::bare(model, k).lindstedt_coefficients(model);
    let oracle = oracle_lindstedt(model, k).expect("oracle").coefficients();
    compare(&trees, &oracle, k).into_iter().map(|(_, d)| d).fold(0.0, f64::max)
}

/// α-average of f on a grid fine enough to be exact for the harmonics present.
fn f0(model: &Model, beta: &[f64]) -> f64 {
    let r = model.r();
    let n = 16usize;
    let mut acc = 0.0;
    for idx in 0..n.pow(r as u32) {
        let mut rem = idx;
        let alpha: Vec<f64> = (0..r)
            .map(|_| {
                let i = rem % n;
                rem /= n;
                2.0 * std::f64::consts::PI * i as f64 / n as f64
            })
            .collect();
        acc += model.f.eval(&alpha, beta);
    }
    acc / n.pow(r as u32) as f64
}

/// Richardson-extrapolated central-difference second derivative ∂²f₀/∂β_i∂β_j.
fn fd_hessian(model: &Model, i: usize, j: usize) -> f64 {
    let b0 = model.beta0().to_vec();
    let d2 = |h: f64| {
        let at = |si: f64, sj: f64| {
            let mut b = b0.clone();
            b[i] += si * h;
            b[j] += sj * h;
            f0(model, &b)
        };
        if i == j {
            let mut bp = b0.clone();
            bp[i] += h;
            let mut bm = b0.clone();
            bm[i] -= h;
            (f0(model, &bp) - 2.0 * f0(model, &b0) + f0(model, &bm)) / (h * h)
        } else {
            (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
        }
    };
    let levels = 5;
    let mut t: Vec<Vec<f64>> = (0..levels).map(|k| vec![d2(0.2 / 2f64.powi(k as i32))]).collect();
    for col in 1..levels {
        for row in col..levels {
            let f = 4f64.powi(col as i32);
            let v = (f * t[row][col - 1] - t[row - 1][col - 1]) / (f - 1.0);
            t[row].push(v);
        }
    }
    t[levels - 1][levels - 1]
}

struct LadderRun {
    report: Report,
    stats: Stats,
}

fn ladder_run(model: &Model, eps: f64, k: u32, k_se: u32) -> LadderRun {
    let ctx = ScaleContext::new(model, eps, None).expect("context");
    let mut ladder = Ladder::new(model, ctx.clone(), k_se, (ctx.nbar0 + 3) as u32).expect("ladder");
    ladder.advance().expect("advance");
    let nus: Vec<Nu> = ladder.renormalized_h(&Forest::renormalized(model, k)).expect("h").keys().copied().collect();
    let report = certificate_suite(&ladder, &nus).expect("certificates");
    LadderRun { report, stats: ladder.stats() }
}

fn measured(runs: &[LadderRun], name: &str, pick: fn(f64, f64) -> f64, init: f64) -> (f64, bool) {
    let mut v = init;
    let mut pass = true;
    for r in runs {
        let c = r.report.checks.iter().find(|c| c.name == name).expect(name);
        v = pick(v, c.measured);
        pass &= c.pass;
    }
    (v, pass)
}

fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_lindstedt"))
}

fn run_cli(args: &[&str], out: &Path) -> i32 {
    let _ = std::fs::remove_dir_all(out);
    Command::new(binary())
        .args(args)
        .env("LINDSTEDT_OUT", out)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .expect("spawn")
        .status
        .code()
        .unwrap_or(-1)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn main() {
    let mut out = Outcome { lines: Vec::new(), ok: true };
    let pend = Model::pendulum();
    let two = Model::two_by_two();

    // 1
    let t = Instant::now();
    let dev = oracle_dev(&pend, 4);
    let secs = t.elapsed().as_secs_f64();
    out.line(1, "pendulum oracle equivalence k<=4", dev <= 1e-10 && secs < 60.0, format!("max_rel_dev={dev:.3e} tol=1e-10 time={secs:.3}s"));

    // 2
    let dev2 = oracle_dev(&two, 3);
    let ctx = ScaleContext::new(&two, 5e-3, None).unwrap();
    let mut ladder = Ladder::new(&two, ctx.clone(), 2, (ctx.nbar0 + 1) as u32).unwrap();
    ladder.advance().unwrap();
    let r = two.r();
    let mut hdev: f64 = 0.0;
    for x in [0.0, 0.3, 0.7] {
        let m = ladder.m_upto(0, FreqKey::probe(x)).unwrap();
        for i in 0..two.s() {
            for j in 0..two.s() {
                let first_order = m[(r + i, r + j)] / C64::new(ctx.eps, 0.0);
                hdev = hdev.max((first_order - C64::new(fd_hessian(&two, i, j), 0.0)).norm());
            }
        }
    }
    out.line(
        2,
        "two_by_two oracle k<=3 and order-eps M_bb vs Hessian",
        dev2 <= 1e-10 && hdev <= 1e-10,
        format!("max_rel_dev={dev2:.3e} hessian_dev={hdev:.3e} tol=1e-10"),
    );

    // ladders shared by 3-6, 8
    let mut runs = Vec::new();
    for eps in EPS_LADDER {
        runs.push(ladder_run(&pend, eps, 4, 4));
        runs.push(ladder_run(&two, eps, 3, 4));
    }

    // 3
    let (tr, p1) = measured(&runs, "transpose_symmetry", f64::max, 0.0);
    let (he, p2) = measured(&runs, "hermiticity", f64::max, 0.0);
    out.line(3, "symmetry certificates K_SE=4", p1 && p2, format!("transpose={tr:.3e} hermiticity={he:.3e} tol=1e-12"));

    // 4
    let (aa, p1) = measured(&runs, "alpha_alpha_exponent", f64::min, f64::INFINITY);
    let (ab, p2) = measured(&runs, "alpha_beta_exponent", f64::min, f64::INFINITY);
    let (nb, p3) = measured(&runs, "null_block_self_energy", f64::max, 0.0);
    out.line(
        4,
        "cancellation exponents and null block",
        p1 && p2 && p3,
        format!("min_aa_exponent={aa:.4} (>=1.9) min_ab_exponent={ab:.4} (>=0.9) max_null={nb:.3e} (<=1e-10 eps)"),
    );

    // 5
    let (g, p) = measured(&runs, "eigenvalue_shift_gamma", f64::max, 0.0);
    out.line(5, "eigenvalue stability", p && g.is_finite(), format!("gamma={g:.6e}"));

    // 6
    let mut st = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for r in &runs {
        st.0 += r.stats.counting_checks;
        st.1 += r.stats.counting_violations;
        st.2 += r.stats.se_bound_checks;
        st.3 += r.stats.se_bound_violations;
        st.4 += r.stats.trees_processed;
        st.5 += r.stats.clusters_processed;
    }
    out.line(
        6,
        "counting bounds",
        st.1 == 0 && st.3 == 0 && st.0 > 0,
        format!("counting {}/{} violations, self-energy {}/{} violations, trees={} clusters={}", st.1, st.0, st.3, st.2, st.4, st.5),
    );

    // 7
    let mut pass7 = true;
    let mut fracs = Vec::new();
    let mut detail = String::new();
    for n0 in [4, 6, 8] {
        let ctx = ScaleContext::at_cell(&two, n0, 0).unwrap();
        let a2 = measure_constants(&two, &ctx);
        for m in (ctx.nbar0 - 1)..=(ctx.nbar0 + 2) {
            let cells = if m < ctx.nbar0 { bare_cells(&two, &ctx) } else { frozen_cells(&two, &ctx, m as u32, 2).unwrap() };
            let set = exclusion_set(&two, &ctx, m, &cells, 400, 10_000);
            let meas = set.measure + set.tail_bound;
            let bound = a2.measure_bound(&ctx, m);
            pass7 &= meas <= bound && set.below_cutoff_failures == 0;
            if m == ctx.nbar0 - 1 {
                fracs.push(1.0 - set.measure / (3.0 * ctx.eps_min));
                detail.push_str(&format!("n0={n0}: |E|={meas:.3e} bound={bound:.3e} frac={:.9}; ", fracs.last().unwrap()));
            }
        }
    }
    let mono = fracs.windows(2).all(|w| w[1] > w[0]);
    out.line(7, "exclusion measure", pass7 && mono, format!("{detail}monotone={mono}"));

    // 8
    let forest = Forest::renormalized(&pend, 4);
    let mut res = Vec::new();
    for eps in EPS_LADDER {
        let ctx = ScaleContext::new(&pend, eps, None).unwrap();
        let mut l = Ladder::new(&pend, ctx.clone(), 4, (ctx.nbar0 + 3) as u32).unwrap();
        l.advance().unwrap();
        let h = l.renormalized_h(&forest).unwrap();
        res.push(eom_residual(&pend, &h, eps, 64));
    }
    let slope = log_slope(&EPS_LADDER, &res);
    let bare = Forest::bare(&pend, 4).lindstedt_coefficients(&pend);
    let bare_res: Vec<f64> = EPS_LADDER.iter().map(|&e| eom_residual(&pend, &sum_series(&bare, e, pend.d()), e, 64)).collect();
    let (pou, ppou) = measured(&runs, "partition_of_unity_defect", f64::max, 0.0);
    out.line(
        8,
        "equations-of-motion residual",
        (slope - 5.0).abs() <= 0.3 && ppou,
        format!(
            "slope={slope:.4} (5+-0.3) residuals={:.3e},{:.3e},{:.3e} bare_slope={:.4} partition_defect={pou:e}",
            res[0],
            res[1],
            res[2],
            log_slope(&EPS_LADDER, &bare_res)
        ),
    );

    // 9
    let tmp = std::env::temp_dir().join(format!("lindstedt-acceptance-{}", std::process::id()));
    let resum = ["resum", "--model", "models/pendulum.toml", "--eps", "0.01"];
    let excl = ["exclusions", "--model", "models/two_by_two.toml", "--n0", "4"];
    let mut same = true;
    let mut codes = Vec::new();
    for (tag, args) in [("resum", &resum[..]), ("excl", &excl[..])] {
        let (a, b) = (tmp.join(format!("{tag}-a")), tmp.join(format!("{tag}-b")));
        let c = tmp.join(format!("{tag}-seq"));
        codes.push(run_cli(args, &a));
        codes.push(run_cli(args, &b));
        let mut seq: Vec<&str> = args.to_vec();
        seq.push("--sequential");
        codes.push(run_cli(&seq, &c));
        let (da, db, dc) = (dir_bytes(&a), dir_bytes(&b), dir_bytes(&c));
        same &= !da.is_empty() && da == db && da == dc;
    }
    let inj = run_cli(&["verify", "--model", "models/two_by_two.toml", "--eps", "0.005", "--k", "3", "--k-se", "2", "--inject-asymmetry", "1e-9"], &tmp.join("inj"));
    let w = (5f64.sqrt() - 1.0) / 2.0;
    let x = 3.0 - 5.0 * w;
    let resonant = format!("{:e}", x * x);
    let res_code = run_cli(&["resum", "--model", "models/two_by_two.toml", "--eps", &resonant, "--k", "3", "--k-se", "2"], &tmp.join("res"));
    let _ = std::fs::remove_dir_all(&tmp);
    out.line(
        9,
        "determinism and fault injection",
        same && codes.iter().all(|&c| c == 0) && inj == 4 && res_code == 3,
        format!("byte_identical={same} run_codes={codes:?} asymmetry_exit={inj} (4) resonant_exit={res_code} (3)"),
    );

    for l in &out.lines {
        println!("{l}");
    }
    if !out.ok {
        std::process::exit(1);
    }
}
