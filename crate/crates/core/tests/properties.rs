use lindstedt::epsdomain::{bare_cells, exclusion_set};
use lindstedt::hamiltonian::Model;
use lindstedt::multiscale::{CutoffFamily, FreqKey, Ladder, ScaleContext};
use lindstedt::trees::Forest;
use lindstedt::verify::{compare, oracle_lindstedt};
use lindstedt::{nu_from_slice, nu_neg};
use proptest::prelude::*;
use std::sync::OnceLock;

fn pendulum() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(Model::pendulum)
}

fn two() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(Model::two_by_two)
}

fn ladder() -> &'static Ladder<'static> {
    static L: OnceLock<Ladder<'static>> = OnceLock::new();
    L.get_or_init(|| {
        let m = two();
        let ctx = ScaleContext::new(m, 5e-3, None).unwrap();
        let mut l = Ladder::new(m, ctx.clone(), 3, (ctx.nbar0 + 2) as u32).unwrap();
        l.advance().unwrap();
        l
    })
}

fn max_abs(m: &nalgebra::DMatrix<lindstedt::C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutoffs_split_unity_and_are_monotone(log_d in -40.0f64..4.0, n in 0u32..12, c0 in 0.1f64..1.0) {
        let cut = CutoffFamily { c0 };
        let d = 2f64.powf(log_d);
        let p = cut.psi_n(n, d);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + cut.chi_n(n, d) - 1.0).abs() <= f64::EPSILON);
        prop_assert!(cut.psi_n(n, d * 1.01) >= p);
    }

    #[test]
    fn scale_weights_sum_to_one(a in -12i32..=12, b in -12i32..=12) {
        prop_assume!(a != 0 || b != 0);
        let l = ladder();
        let nu = nu_from_slice(&[a, b]).unwrap();
        let x = FreqKey::lattice(nu).x(l.model);
        let sum = l.partition_sum(x).unwrap();
        prop_assert_eq!(sum, 1.0);
    }

    #[test]
    fn self_energy_symmetries(x in 1e-4f64..1.5, n in 0u32..4) {
        let l = ladder();
        let n = n.min(l.advanced());
        let m = l.m_upto(n, FreqKey::probe(x)).unwrap();
        let mt = l.m_upto(n, FreqKey::probe(-x)).unwrap().transpose();
        prop_assert!(max_abs(&(&m - mt)) <= 1e-12);
        prop_assert!(max_abs(&(&m - m.adjoint())) <= 1e-12);
    }

    #[test]
    fn tree_momenta_and_degree(pick in 0usize..100_000, renorm in any::<bool>(), pend in any::<bool>()) {
        let (m, k) = if pend { (pendulum(), 4) } else { (two(), 3) };
        let f = if renorm { Forest::renormalized(m, k) } else { Forest::bare(m, k) };
        let id = (pick % f.len()) as u32;
        let t = f.expand(id);
        prop_assert_eq!(t.recomputed_momenta(), t.momentum.clone());
        prop_assert!(3 * t.order() > t.degree());
        prop_assert!(t.degree() <= t.order());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Random real perturbations of a pendulum-like model: trees match the oracle and the series is real.
    #[test]
    fn random_models_real_and_oracle_exact(
        c in 0.5f64..2.0,
        a in prop::collection::vec(-1.0f64..1.0, 2),
        b in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let mut text = String::from("r = 1\ns = 1\nomega = [1.6180339887498949]\ntau0 = 1.0\nbeta0_guess = [3.0]\n");
        let mut term = |nu: i32, mu: i32, re: f64| {
            text.push_str(&format!("[[term]]\nnu = [{nu}]\nmu = [{mu}]\nre = {re:e}\n"));
        };
        term(0, 1, c / 2.0);
        term(0, -1, c / 2.0);
        for (i, (&ai, &bi)) in a.iter().zip(&b).enumerate() {
            let n = i as i32 + 1;
            for s in [n, -n] {
                term(s, 0, ai / 2.0);
                term(s, 1, bi / 4.0);
                term(s, -1, bi / 4.0);
            }
        }
        let model = Model::from_toml_str(&text).unwrap();
        let k = 3;
        let trees = Forest::bare(&model, k).lindstedt_coefficients(&model);
        let oracle = oracle_lindstedt(&model, k).unwrap().coefficients();
        for (_, dev) in compare(&trees, &oracle, k) {
            prop_assert!(dev <= 1e-10);
        }
        for ((order, nu), v) in &trees {
            let w = trees.get(&(*order, nu_neg(nu))).expect("partner harmonic");
            for (p, q) in v.iter().zip(w) {
                prop_assert!((p - q.conj()).norm() <= 1e-12 * (1.0 + p.norm()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Raising τ₁ lowers every threshold, so the excluded set can only shrink.
    #[test]
    fn exclusions_shrink_with_tighter_thresholds(extra in 0.05f64..1.0) {
        let m = two();
        let ctx = ScaleContext::at_cell(m, 4, 0).unwrap();
        let mut tight = ctx.clone();
        tight.tau1 += extra;
        let mm = ctx.nbar0 - 1;
        let loose = exclusion_set(m, &ctx, mm, &bare_cells(m, &ctx), 200, 4000);
        let small = exclusion_set(m, &tight, mm, &bare_cells(m, &tight), 200, 4000);
        prop_assert!(small.measure <= loose.measure);
        for &(lo, hi) in &small.union {
            let mid = 0.5 * (lo + hi);
            prop_assert!(loose.contains(mid));
        }
    }
}
