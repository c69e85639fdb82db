//! Scale decomposition, self-energy matrices and the renormalized expansion.

use crate::hamiltonian::Model;
use crate::trees::{zero_momentum_propagator, DecoratedTree, Forest, Scale};
use crate::{fmt_nu, nu_add, nu_is_zero, nu_neg, nu_norm, par, Error, Nu, Result, C64, MAX_DIM};
use nalgebra::DMatrix;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

// ---------------------------------------------------------------- context

#[derive(Clone, Debug)]
pub struct ScaleContext {
    pub c0: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub eps: f64,
    pub n0: i32,
    pub nbar: i32,
    pub nbar0: i32,
    /// C = C0 2^{-n0}
    pub c: f64,
    pub a_s: f64,
    pub rho: f64,
    /// I_C = (eps_min, 4 eps_min]
    pub eps_min: f64,
    pub n_intervals: usize,
    pub interval_index: usize,
    /// the partition cell (lo, hi] containing eps
    pub interval: (f64, f64),
}

/// Largest n0 with ε a_s ≤ C0² 4^{-n0}.
pub fn n0_for(c0: f64, a_s: f64, eps: f64) -> Result<i32> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut n = ((c0 * c0 / (eps * a_s)).ln() / 4f64.ln()).floor() as i32;
    // guard the floor against rounding at the bracket edges
    while c0 * c0 * 4f64.powi(-n) < eps * a_s {
        n -= 1;
    }
    while c0 * c0 * 4f64.powi(-(n + 1)) >= eps * a_s {
        n += 1;
    }
    if n < 0 {
        return Err(Error::Config(format!("eps = {eps} too large: n0 = {n} < 0")));
    }
    Ok(n)
}

/// Number of cells in the partition of I_C, each of length ≤ ε_min ρ / 2.
pub fn partition_count(rho: f64) -> usize {
    (6.0 / rho - 1e-9).ceil().max(1.0) as usize
}

impl ScaleContext {
    pub fn new(model: &Model, eps: f64, n0: Option<i32>) -> Result<Self> {
        let a_s = model.spec.a_s();
        let c0 = model.rot.c0;
        let auto = n0_for(c0, a_s, eps)?;
        let n0 = match n0 {
            Some(n) if n != auto => {
                return Err(Error::Config(format!(
                    "n0 = {n} inconsistent with eps a_s = {:e}: bracketing requires n0 = {auto}",
                    eps * a_s
                )))
            }
            _ => auto,
        };
        Self::for_interval_of(model, n0, eps)
    }

    fn for_interval_of(model: &Model, n0: i32, eps: f64) -> Result<Self> {
        let a_s = model.spec.a_s();
        let c0 = model.rot.c0;
        let c = c0 * 2f64.powi(-n0);
        let eps_min = c * c / (4.0 * a_s);
        let rho = model.spec.rho;
        let n_int = partition_count(rho);
        let h = 3.0 * eps_min / n_int as f64;
        let idx = (((eps - eps_min) / h).ceil() as i64 - 1).clamp(0, n_int as i64 - 1) as usize;
        let lo = eps_min + idx as f64 * h;
        let hi = if idx + 1 == n_int { 4.0 * eps_min } else { eps_min + (idx + 1) as f64 * h };
        let r = model.r();
        let tau0 = model.rot.tau0;
        let nbar = model.spec.nbar;
        Ok(Self {
            c0,
            tau0,
            tau1: tau0 + r as f64 + 1.0,
            eps,
            n0,
            nbar,
            nbar0: n0 + nbar,
            c,
            a_s,
            rho,
            eps_min,
            n_intervals: n_int,
            interval_index: idx,
            interval: (lo, hi),
        })
    }

    /// Context at the midpoint of cell `index` of I_C for a given n0.
    pub fn at_cell(model: &Model, n0: i32, index: usize) -> Result<Self> {
        if n0 < 0 {
            return Err(Error::Config(format!("n0 = {n0} < 0")));
        }
        let a_s = model.spec.a_s();
        let c = model.rot.c0 * 2f64.powi(-n0);
        let eps_min = c * c / (4.0 * a_s);
        let n_int = partition_count(model.spec.rho);
        if index >= n_int {
            return Err(Error::Config(format!("interval index {index} ≥ {n_int}")));
        }
        let h = 3.0 * eps_min / n_int as f64;
        let eps = eps_min + (index as f64 + 0.5) * h;
        Self::for_interval_of(model, n0, eps)
    }

    /// Same context (n0 and partition) at another ε of the same cell.
    pub fn with_eps(&self, eps: f64) -> Self {
        let mut c = self.clone();
        c.eps = eps;
        c
    }
}

// ---------------------------------------------------------------- cutoffs

#[derive(Clone, Copy, Debug)]
pub struct CutoffFamily {
    pub c0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffKind {
    Psi,
    Chi,
}

impl CutoffFamily {
    /// Quintic smoothstep in log₂ D between C0²/4 and C0².
    pub fn psi(&self, d: f64) -> f64 {
        let hi = self.c0 * self.c0;
        let lo = hi / 4.0;
        if d >= hi {
            return 1.0;
        }
        if d <= lo {
            return 0.0;
        }
        let t = ((d.log2() - lo.log2()) / 2.0).clamp(0.0, 1.0);
        t * t * t * (t * (6.0 * t - 15.0) + 10.0)
    }

    pub fn cutoff(&self, kind: CutoffKind, n: u32, d: f64) -> f64 {
        let p = self.psi(4f64.powi(n as i32) * d);
        match kind {
            CutoffKind::Psi => p,
            CutoffKind::Chi => 1.0 - p,
        }
    }

    pub fn psi_n(&self, n: u32, d: f64) -> f64 {
        self.cutoff(CutoffKind::Psi, n, d)
    }

    pub fn chi_n(&self, n: u32, d: f64) -> f64 {
        self.cutoff(CutoffKind::Chi, n, d)
    }
}

// ---------------------------------------------------------------- frequencies

/// A frequency ω·ν + offset, keyed exactly: lattice part plus the bits of a probe offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FreqKey {
    pub nu: Nu,
    pub off: u64,
}

impl FreqKey {
    pub fn lattice(nu: Nu) -> Self {
        Self { nu, off: 0f64.to_bits() }
    }
    pub fn probe(x: f64) -> Self {
        Self::new([0; MAX_DIM], x)
    }
    pub fn new(nu: Nu, off: f64) -> Self {
        let off = if off == 0.0 { 0.0 } else { off };
        Self { nu, off: off.to_bits() }
    }
    pub fn offset(&self) -> f64 {
        f64::from_bits(self.off)
    }
    pub fn x(&self, model: &Model) -> f64 {
        model.freq(&self.nu) + self.offset()
    }
    pub fn shifted(&self, nu0: &Nu) -> Self {
        Self::new(nu_add(&self.nu, nu0), self.offset())
    }
    pub fn neg(&self) -> Self {
        Self::new(nu_neg(&self.nu), -self.offset())
    }
}

// ---------------------------------------------------------------- clusters

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub scale: u32,
    /// real nodes, sorted
    pub nodes: Vec<usize>,
    /// lines entering the cluster, named by their lower node
    pub entering: Vec<usize>,
    /// the cluster's exiting line, named by the cluster's top node
    pub exiting: usize,
    pub self_energy: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ClusterDecomposition {
    /// ordered by scale, then by smallest node
    pub clusters: Vec<Cluster>,
}

impl ClusterDecomposition {
    pub fn self_energy_clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(|c| c.self_energy)
    }
}

fn find(p: &mut [usize], mut i: usize) -> usize {
    while p[i] != i {
        p[i] = p[p[i]];
        i = p[i];
    }
    i
}

/// Clusters of a scale-labelled tree. `scales[v]` labels the line exiting v;
/// marked legs and the top line are external.
pub fn detect_clusters(tree: &DecoratedTree, scales: &[Scale]) -> ClusterDecomposition {
    let nv = tree.len();
    let mut levels: Vec<u32> = (1..nv)
        .filter(|&v| !tree.is_x[v])
        .filter_map(|v| match scales[v] {
            Scale::Finite(m) => Some(m),
            _ => None,
        })
        .collect();
    levels.sort_unstable();
    levels.dedup();
    let mut out = Vec::new();
    for &m in &levels {
        let mut p: Vec<usize> = (0..nv).collect();
        for v in 1..nv {
            if tree.is_x[v] {
                continue;
            }
            if let Scale::Finite(s) = scales[v] {
                if s <= m {
                    let (a, b) = (find(&mut p, v), find(&mut p, tree.parent[v].unwrap()));
                    p[a.max(b)] = a.min(b);
                }
            }
        }
        let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..nv {
            if !tree.is_x[v] {
                let root = find(&mut p, v);
                comps.entry(root).or_default().push(v);
            }
        }
        for nodes in comps.into_values() {
            if nodes.len() < 2 {
                continue;
            }
            let inside = |u: usize| nodes.binary_search(&u).is_ok();
            let has_m = nodes.iter().any(|&v| v != 0 && inside(tree.parent[v].unwrap_or(usize::MAX)) && scales[v] == Scale::Finite(m));
            if !has_m {
                continue;
            }
            let mut entering = Vec::new();
            let mut exiting = usize::MAX;
            let mut sum = [0; MAX_DIM];
            for &v in &nodes {
                sum = nu_add(&sum, &tree.harmonic[v]);
                for &c in &tree.children[v] {
                    if !inside(c) {
                        entering.push(c);
                    }
                }
                match tree.parent[v] {
                    Some(q) if inside(q) => {}
                    _ => exiting = v,
                }
            }
            entering.sort_unstable();
            let self_energy = entering.len() == 1 && nu_is_zero(&sum) && scales[exiting] != Scale::Infinite;
            out.push(Cluster { scale: m, nodes, entering, exiting, self_energy });
        }
    }
    ClusterDecomposition { clusters: out }
}

// ---------------------------------------------------------------- ladder

/// Tallies for the counting-bound and regime certificates.
#[derive(Clone, Debug, Default)]
pub struct Stats {
    pub counting_checks: u64,
    pub counting_violations: u64,
    pub se_bound_checks: u64,
    pub se_bound_violations: u64,
    /// lines with more than two consecutive nonzero scales
    pub multi_scale_lines: u64,
    /// lines whose scale weights beyond N_max were truncated
    pub truncated_lines: u64,
    pub max_truncated_weight: f64,
    /// min over low scales of (smallest |eigenvalue of x² - M|) / (2^{-2(n̄+2)} x²)
    pub min_regime_ratio: f64,
    pub regime_violations: u64,
    /// propagators whose smallest |eigenvalue| falls below √(a_1/a_s) Δ^[n] / 8
    pub denominator_checks: u64,
    pub denominator_violations: u64,
    /// max |χ_n - 1| found when checking the tentative χ_n = 1 used for λ̲^[n]
    pub max_tentative_chi_defect: f64,
    /// max |λ̲_j| over the null block before pinning
    pub max_null_self_energy: f64,
    pub trees_processed: u64,
    pub clusters_processed: u64,
}

impl Stats {
    fn new() -> Self {
        Self { min_regime_ratio: f64::INFINITY, ..Default::default() }
    }
    fn merge(&mut self, o: &Stats) {
        self.counting_checks += o.counting_checks;
        self.counting_violations += o.counting_violations;
        self.se_bound_checks += o.se_bound_checks;
        self.se_bound_violations += o.se_bound_violations;
        self.multi_scale_lines += o.multi_scale_lines;
        self.truncated_lines += o.truncated_lines;
        self.max_truncated_weight = self.max_truncated_weight.max(o.max_truncated_weight);
        self.min_regime_ratio = self.min_regime_ratio.min(o.min_regime_ratio);
        self.regime_violations += o.regime_violations;
        self.denominator_checks += o.denominator_checks;
        self.denominator_violations += o.denominator_violations;
        self.max_tentative_chi_defect = self.max_tentative_chi_defect.max(o.max_tentative_chi_defect);
        self.max_null_self_energy = self.max_null_self_energy.max(o.max_null_self_energy);
        self.trees_processed += o.trees_processed;
        self.clusters_processed += o.clusters_processed;
    }
}

type Mat = DMatrix<C64>;

pub struct Ladder<'m> {
    pub model: &'m Model,
    pub ctx: ScaleContext,
    pub cut: CutoffFamily,
    pub k_se: u32,
    pub n_max: u32,
    se_graphs: Vec<DecoratedTree>,
    /// λ̲^[n] for n = 0..lambda.len()
    lambda: Vec<Vec<f64>>,
    /// per-scale matrices M^[n](x), n ≥ 1
    m_memo: RwLock<HashMap<(FreqKey, u32), Arc<Mat>>>,
    prop_memo: RwLock<HashMap<(FreqKey, u32), Option<Arc<Mat>>>>,
    stats: Mutex<Stats>,
    /// asymmetric perturbation added to M^[1] (fault injection)
    pub inject_asymmetry: Option<f64>,
}

impl<'m> Ladder<'m> {
    pub fn new(model: &'m Model, ctx: ScaleContext, k_se: u32, n_max: u32) -> Result<Self> {
        if k_se < 1 || n_max < 1 {
            return Err(Error::Config("K_SE and N_max must be ≥ 1".into()));
        }
        let forest = Forest::self_energy(model, k_se);
        let se_graphs = forest.self_energy_roots().into_iter().map(|i| forest.expand(i)).collect();
        let mut l0 = vec![0.0; model.d()];
        for (j, a) in model.spec.a.iter().enumerate() {
            l0[model.r() + j] = ctx.eps * a;
        }
        Ok(Self {
            model,
            cut: CutoffFamily { c0: ctx.c0 },
            ctx,
            k_se,
            n_max,
            se_graphs,
            lambda: vec![l0],
            m_memo: RwLock::new(HashMap::new()),
            prop_memo: RwLock::new(HashMap::new()),
            stats: Mutex::new(Stats::new()),
            inject_asymmetry: None,
        })
    }

    pub fn with_injection(mut self, delta: f64) -> Self {
        self.inject_asymmetry = Some(delta);
        self
    }

    pub fn eps(&self) -> f64 {
        self.ctx.eps
    }

    pub fn self_energy_graphs(&self) -> &[DecoratedTree] {
        &self.se_graphs
    }

    pub fn stats(&self) -> Stats {
        self.stats.lock().unwrap().clone()
    }

    fn record(&self, s: &Stats) {
        self.stats.lock().unwrap().merge(s);
    }

    /// Highest scale whose self-energies λ̲ are known.
    pub fn advanced(&self) -> u32 {
        self.lambda.len() as u32 - 1
    }

    pub fn lambda_bar(&self, n: u32) -> Option<&[f64]> {
        self.lambda.get(n as usize).map(|v| v.as_slice())
    }

    /// D(x; I) and the smallest minimizing eigenvalue label (0-based).
    pub fn resonance_gap(&self, x: f64) -> (f64, usize) {
        let (lo, hi) = self.ctx.interval;
        let x2 = x * x;
        let r = self.model.r();
        let mut best = (x2.abs(), 0usize);
        for (j, a) in self.model.spec.a.iter().enumerate() {
            let (l, h) = (lo * a, hi * a);
            let d = if x2 < l {
                l - x2
            } else if x2 > h {
                x2 - h
            } else {
                0.0
            };
            if d < best.0 {
                best = (d, r + j);
            }
        }
        if r == 0 && self.model.spec.a.is_empty() {
            best.1 = 0;
        }
        best
    }

    /// Δ^[n](x): D(x) below n̄0, |x² - λ̲^[n]_{j(x)}| from n̄0 on.
    pub fn divisor(&self, n: u32, x: f64) -> Result<f64> {
        let (d, j) = self.resonance_gap(x);
        if (n as i32) < self.ctx.nbar0 {
            return Ok(d);
        }
        let lam = self
            .lambda
            .get(n as usize)
            .ok_or_else(|| Error::Numerical(format!("self-energies on scale {n} not yet computed")))?;
        Ok((x * x - lam[j]).abs())
    }

    /// ψ_n(Δ^[n]) Π_{m<n} χ_m(Δ^[m]).
    pub fn weight(&self, n: u32, x: f64) -> Result<f64> {
        let mut w = self.cut.psi_n(n, self.divisor(n, x)?);
        for m in 0..n {
            if w == 0.0 {
                break;
            }
            w *= self.cut.chi_n(m, self.divisor(m, x)?);
        }
        Ok(w)
    }

    /// Scales 0..=top with nonzero weight, and the weight left above `top`.
    fn scale_options(&self, x: f64, top: u32) -> Result<(Vec<(u32, f64)>, f64)> {
        let mut out = Vec::new();
        let mut chi_prod = 1.0;
        for n in 0..=top {
            let dn = self.divisor(n, x)?;
            let w = self.cut.psi_n(n, dn) * chi_prod;
            if w > 0.0 {
                out.push((n, w));
            }
            chi_prod *= self.cut.chi_n(n, dn);
            if chi_prod == 0.0 {
                break;
            }
        }
        Ok((out, chi_prod))
    }

    /// M^[n](x); n = 0 gives M₀. Uses a tentative χ_n = 1 when λ̲^[n] is still unknown.
    pub fn m_scale(&self, n: u32, key: FreqKey) -> Result<Arc<Mat>> {
        if n == 0 {
            return Ok(Arc::new(self.model.m0(self.eps())));
        }
        let tentative = n as i32 > self.ctx.nbar0 && n > self.advanced();
        if !tentative {
            if let Some(m) = self.m_memo.read().unwrap().get(&(key, n)) {
                return Ok(m.clone());
            }
        }
        let x = key.x(self.model);
        let mut pref = 1.0;
        if n as i32 <= self.ctx.nbar0 {
            for p in 0..n {
                pref *= self.cut.chi_n(p, self.divisor(p, x)?);
            }
        } else {
            for p in 0..=n {
                if p == n && tentative {
                    continue;
                }
                pref *= self.cut.chi_n(p, self.divisor(p, x)?);
            }
        }
        let d = self.model.d();
        let mut m = if pref == 0.0 { Mat::zeros(d, d) } else { self.self_energy_sum(n, key)? * C64::new(pref, 0.0) };
        if n == 1 {
            if let Some(delta) = self.inject_asymmetry {
                m[(0, d - 1)] += C64::new(delta, 0.0);
            }
        }
        let m = Arc::new(m);
        if !tentative {
            self.m_memo.write().unwrap().insert((key, n), m.clone());
        }
        Ok(m)
    }

    /// M^[≤n](x) = M₀ + Σ_{1≤m≤n} M^[m](x).
    pub fn m_upto(&self, n: u32, key: FreqKey) -> Result<Mat> {
        let mut acc = self.model.m0(self.eps());
        for m in 1..=n {
            acc += &*self.m_scale(m, key)?;
        }
        Ok(acc)
    }

    /// Eigenvalues (ascending) of the Hermitian part of M^[≤n](x).
    pub fn eigenvalues(&self, n: u32, key: FreqKey) -> Result<Vec<f64>> {
        let m = self.m_upto(n, key)?;
        Ok(herm_eigenvalues(&m))
    }

    /// Scale-n propagator at frequency key: cutoff weight times (x² - M^[≤n])⁻¹, or None if the weight vanishes.
    pub fn propagator(&self, n: u32, key: FreqKey) -> Result<Option<Arc<Mat>>> {
        if let Some(p) = self.prop_memo.read().unwrap().get(&(key, n)) {
            return Ok(p.clone());
        }
        let x = key.x(self.model);
        let w = self.weight(n, x)?;
        let out = if w == 0.0 {
            None
        } else {
            let d = self.model.d();
            let a = Mat::identity(d, d) * C64::new(x * x, 0.0) - self.m_upto(n, key)?;
            let ev = herm_eigenvalues(&a);
            let smallest = ev.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
            if let Some(a1) = self.model.spec.a.first() {
                let mut s = Stats::new();
                s.denominator_checks = 1;
                if smallest < (a1 / self.ctx.a_s).sqrt() / 8.0 * self.divisor(n, x)? {
                    s.denominator_violations = 1;
                }
                self.record(&s);
            }
            if n as i32 <= self.ctx.nbar0 && x != 0.0 {
                let ratio = smallest / (2f64.powi(-2 * (self.ctx.nbar + 2)) * x * x);
                let mut s = Stats::new();
                s.min_regime_ratio = ratio;
                if ratio < 1.0 {
                    s.regime_violations = 1;
                }
                self.record(&s);
            }
            let inv = a.clone().try_inverse().filter(|_| smallest > 0.0).ok_or_else(|| {
                Error::ExcludedEps(format!(
                    "singular x^2 - M at scale {n}, nu = {}, x = {x}",
                    fmt_nu(&key.nu, self.model.r())
                ))
            })?;
            Some(Arc::new(inv * C64::new(w, 0.0)))
        };
        self.prop_memo.write().unwrap().insert((key, n), out.clone());
        Ok(out)
    }

    /// Advance λ̲ through scale n_max.
    pub fn advance(&mut self) -> Result<()> {
        while self.advanced() < self.n_max {
            self.advance_one()?;
        }
        Ok(())
    }

    fn advance_one(&mut self) -> Result<()> {
        let n = self.advanced() + 1;
        let r = self.model.r();
        let prev = self.lambda.last().unwrap().clone();
        if (n as i32) < self.ctx.nbar0 {
            self.lambda.push(prev);
            return Ok(());
        }
        let eps = self.eps();
        let mut next = prev.clone();
        let mut null = Stats::new();
        for j in 0..prev.len() {
            if prev[j] < 0.0 {
                continue;
            }
            let key = FreqKey::probe(prev[j].sqrt());
            let ev = self.eigenvalues(n, key)?;
            let v = ev[j];
            if j < r {
                // pinned; the certificate judges the size
                null.max_null_self_energy = null.max_null_self_energy.max(v.abs());
                next[j] = 0.0;
            } else {
                if v < -1e-10 * eps {
                    return Err(Error::Numerical(format!("self-energy {j} negative ({v:e}) on scale {n}: eps too large")));
                }
                next[j] = v;
            }
        }
        for j in 1..next.len() {
            if next[j] < next[j - 1] - 1e-14 {
                return Err(Error::Numerical(format!("eigenvalue ordering crossed on scale {n}")));
            }
        }
        self.record(&null);
        self.lambda.push(next);
        // the tentative χ_n = 1 used above must be consistent with the new λ̲^[n]
        if n as i32 > self.ctx.nbar0 {
            let mut s = Stats::new();
            for j in 0..prev.len() {
                if prev[j] >= 0.0 {
                    let x = prev[j].sqrt();
                    let chi = self.cut.chi_n(n, self.divisor(n, x)?);
                    s.max_tentative_chi_defect = s.max_tentative_chi_defect.max((1.0 - chi).abs());
                }
            }
            self.record(&s);
        }
        Ok(())
    }

    /// Σ over self-energy graphs on scale n-1 at frequency key.
    fn self_energy_sum(&self, n: u32, key: FreqKey) -> Result<Mat> {
        let d = self.model.d();
        let parts = par::map(&self.se_graphs, |t| self.se_graph_sum(t, n, key));
        let mut acc = Mat::zeros(d, d);
        for p in parts {
            acc += p?;
        }
        Ok(acc)
    }

    /// Frequency key of each line of a self-energy graph entered at `key`.
    pub fn line_keys(&self, t: &DecoratedTree, key: FreqKey) -> Vec<FreqKey> {
        (0..t.len())
            .map(|v| if t.on_path[v] { key.shifted(&t.momentum[v]) } else { FreqKey::lattice(t.momentum[v]) })
            .collect()
    }

    /// V_T summed over inner scale labels with maximum exactly n-1 and no
    /// self-energy cluster other than T itself.
    fn se_graph_sum(&self, t: &DecoratedTree, n: u32, key: FreqKey) -> Result<Mat> {
        let d = self.model.d();
        let inner: Vec<usize> = (1..t.len()).filter(|&v| !t.is_x[v]).collect();
        let keys = self.line_keys(t, key);
        let mut options: Vec<Vec<(u32, Arc<Mat>)>> = Vec::with_capacity(inner.len());
        for &v in &inner {
            let x = keys[v].x(self.model);
            let (opts, _) = self.scale_options(x, n - 1)?;
            let mut o = Vec::new();
            for (m, _) in opts {
                if let Some(p) = self.propagator(m, keys[v])? {
                    o.push((m, p));
                }
            }
            if o.is_empty() {
                return Ok(Mat::zeros(d, d));
            }
            options.push(o);
        }
        let mut scales = vec![Scale::External; t.len()];
        let mut props = vec![Mat::zeros(d, d); t.len()];
        let mut pick = vec![0usize; inner.len()];
        let mut acc = Mat::zeros(d, d);
        let mut stats = Stats::new();
        let harmonic_sum: i64 = (0..t.len()).filter(|&v| !t.is_x[v]).map(|v| nu_norm(&t.harmonic[v])).sum();
        let pref = self.eps().powi(t.order() as i32) * t.inv_aut;
        loop {
            let top = inner.iter().enumerate().map(|(i, _)| options[i][pick[i]].0).max().unwrap_or(0);
            if top + 1 == n {
                for (i, &v) in inner.iter().enumerate() {
                    scales[v] = Scale::Finite(options[i][pick[i]].0);
                    props[v] = (*options[i][pick[i]].1).clone();
                }
                let dec = detect_clusters(t, &scales);
                let nested = dec.self_energy_clusters().any(|c| c.nodes.len() != t.order());
                if !nested {
                    for g in 0..d {
                        let mut leg = vec![C64::new(0.0, 0.0); d];
                        leg[g] = C64::new(1.0, 0.0);
                        let col = t.contract(self.model, &props, false, &leg);
                        for a in 0..d {
                            acc[(a, g)] += col[a] * pref;
                        }
                    }
                    stats.clusters_processed += 1;
                    self.count_lines(&mut stats, inner.iter().map(|&v| scales[v]), harmonic_sum);
                    if n as i32 > self.ctx.nbar0 {
                        stats.se_bound_checks += 1;
                        if (harmonic_sum as f64) <= 2f64.powf((n as f64 - 6.0) / (2.0 * self.ctx.tau1)) {
                            stats.se_bound_violations += 1;
                        }
                    }
                }
            }
            let mut i = 0;
            while i < pick.len() {
                pick[i] += 1;
                if pick[i] < options[i].len() {
                    break;
                }
                pick[i] = 0;
                i += 1;
            }
            if i == pick.len() {
                break;
            }
        }
        self.record(&stats);
        Ok(acc)
    }

    /// E_m of the counting bound on scale m.
    pub fn counting_constant(&self, m: u32) -> f64 {
        if m as i32 > self.ctx.nbar0 {
            2f64.powf((6.0 - m as f64) / (2.0 * self.ctx.tau1))
        } else {
            let e = 2.0 * 2f64.powf((self.ctx.nbar as f64 + 4.0) / self.ctx.tau0);
            e * 2f64.powf(-(m as f64) / self.ctx.tau0)
        }
    }

    fn count_lines(&self, stats: &mut Stats, scales: impl Iterator<Item = Scale>, harmonic_sum: i64) {
        let mut n_m: BTreeMap<u32, u64> = BTreeMap::new();
        for s in scales {
            if let Scale::Finite(m) = s {
                *n_m.entry(m).or_default() += 1;
            }
        }
        for (m, count) in n_m {
            stats.counting_checks += 1;
            let bound = (self.counting_constant(m) * harmonic_sum as f64 - 1.0).max(0.0);
            if count as f64 > bound {
                stats.counting_violations += 1;
            }
        }
    }

    /// Renormalized Fourier coefficients h_ν(ε) from trivial-node-free trees of
    /// degree ≤ K with every admissible scale labelling; labellings carrying a
    /// self-energy cluster are dropped.
    pub fn renormalized_h(&self, forest: &Forest) -> Result<BTreeMap<Nu, Vec<C64>>> {
        let d = self.model.d();
        let ids: Vec<u32> = (0..forest.len() as u32).filter(|&i| !forest.nodes[i as usize].has_x).collect();
        let parts = par::map(&ids, |&i| {
            let t = forest.expand(i);
            self.renormalized_tree_value(&t).map(|v| (t.momentum[0], v))
        });
        let mut out: BTreeMap<Nu, Vec<C64>> = BTreeMap::new();
        for p in parts {
            let (nu, v) = p?;
            let e = out.entry(nu).or_insert_with(|| vec![C64::new(0.0, 0.0); d]);
            for (a, z) in e.iter_mut().zip(v) {
                *a += z;
            }
        }
        Ok(out)
    }

    /// Value of one renormalized tree summed over scale labellings.
    pub fn renormalized_tree_value(&self, t: &DecoratedTree) -> Result<Vec<C64>> {
        let d = self.model.d();
        let eps = self.eps();
        let mut stats = Stats::new();
        let lines: Vec<usize> = (0..t.len()).collect();
        let mut options: Vec<Vec<(Scale, Arc<Mat>)>> = Vec::with_capacity(t.len());
        let zero_prop = Arc::new(zero_momentum_propagator(self.model, eps));
        for &v in &lines {
            if nu_is_zero(&t.momentum[v]) {
                options.push(vec![(Scale::Infinite, zero_prop.clone())]);
                continue;
            }
            let key = FreqKey::lattice(t.momentum[v]);
            let (opts, rest) = self.scale_options(key.x(self.model), self.n_max)?;
            if rest > 0.0 {
                stats.truncated_lines += 1;
                stats.max_truncated_weight = stats.max_truncated_weight.max(rest);
            }
            if opts.len() > 2 || opts.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
                stats.multi_scale_lines += 1;
            }
            let mut o = Vec::new();
            for (m, _) in opts {
                if let Some(p) = self.propagator(m, key)? {
                    o.push((Scale::Finite(m), p));
                }
            }
            if o.is_empty() {
                self.record(&stats);
                return Ok(vec![C64::new(0.0, 0.0); d]);
            }
            options.push(o);
        }
        let harmonic_sum: i64 = t.harmonic.iter().map(nu_norm).sum();
        let pref = eps.powi(t.order() as i32) * t.inv_aut;
        let mut pick = vec![0usize; lines.len()];
        let mut scales = vec![Scale::Infinite; t.len()];
        let mut props = vec![Mat::zeros(d, d); t.len()];
        let mut acc = vec![C64::new(0.0, 0.0); d];
        loop {
            for v in 0..t.len() {
                scales[v] = options[v][pick[v]].0;
                props[v] = (*options[v][pick[v]].1).clone();
            }
            let dec = detect_clusters(t, &scales);
            // dropped labellings still have to respect the harmonic bound
            for c in dec.self_energy_clusters() {
                if c.scale as i32 + 1 > self.ctx.nbar0 {
                    let inside: i64 = c.nodes.iter().map(|&v| nu_norm(&t.harmonic[v])).sum();
                    stats.se_bound_checks += 1;
                    if (inside as f64) <= 2f64.powf((c.scale as f64 - 5.0) / (2.0 * self.ctx.tau1)) {
                        stats.se_bound_violations += 1;
                    }
                }
            }
            if dec.self_energy_clusters().next().is_none() {
                let val = t.contract(self.model, &props, true, &[]);
                for (a, z) in acc.iter_mut().zip(val) {
                    *a += z * pref;
                }
                stats.trees_processed += 1;
                self.count_lines(&mut stats, scales.iter().copied(), harmonic_sum);
            }
            let mut i = 0;
            while i < pick.len() {
                pick[i] += 1;
                if pick[i] < options[i].len() {
                    break;
                }
                pick[i] = 0;
                i += 1;
            }
            if i == pick.len() {
                break;
            }
        }
        self.record(&stats);
        Ok(acc)
    }

    /// Σ_n ψ_n(Δ^[n]) Π_{m<n} χ_m(Δ^[m]) over n ≤ N_max at x.
    pub fn partition_sum(&self, x: f64) -> Result<f64> {
        let (opts, _) = self.scale_options(x, self.n_max)?;
        Ok(opts.iter().map(|(_, w)| w).sum())
    }

    /// Ladder dump rows: (n, ν, M^[≤n] entries, eigenvalues, λ̲^[n], weight).
    pub fn dump_csv(&self, nus: &[Nu]) -> Result<String> {
        let d = self.model.d();
        let r = self.model.r();
        let mut s = String::from("n,nu,row,col,re,im,eig,lambda_bar,weight\n");
        for n in 0..=self.advanced() {
            for nu in nus {
                let key = FreqKey::lattice(*nu);
                let m = self.m_upto(n, key)?;
                let ev = herm_eigenvalues(&m);
                let w = self.weight(n, key.x(self.model))?;
                for a in 0..d {
                    for b in 0..d {
                        let idx = a * d + b;
                        let eig = if b == 0 { format!("{:.17e}", ev[a]) } else { String::new() };
                        let lam = if b == 0 { format!("{:.17e}", self.lambda[n as usize][a]) } else { String::new() };
                        let wt = if idx == 0 { format!("{w:.17e}") } else { String::new() };
                        s.push_str(&format!(
                            "{n},{},{a},{b},{:.17e},{:.17e},{eig},{lam},{wt}\n",
                            fmt_nu(nu, r),
                            m[(a, b)].re,
                            m[(a, b)].im
                        ));
                    }
                }
            }
        }
        Ok(s)
    }
}

/// Ascending eigenvalues of the Hermitian part of a complex matrix.
pub fn herm_eigenvalues(m: &Mat) -> Vec<f64> {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}
