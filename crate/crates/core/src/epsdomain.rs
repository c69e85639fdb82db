//! Excluded ε-sets where the generalized Diophantine conditions fail.

use crate::hamiltonian::Model;
use crate::multiscale::{Ladder, ScaleContext};
use crate::{fmt_nu, nu_norm, par, Nu, Result, MAX_DIM};

/// Which Γ term failed: ||x| - √λ_j| or |x + s₁√λ_j + s₂√λ_i|.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Abs { j: usize },
    Combo { s1: i8, j: usize, s2: i8, i: usize },
}

impl Term {
    /// Signed quantity whose absolute value enters Γ; monotone in ε.
    pub fn signed(&self, x: f64, sqrt_lambda: &[f64]) -> f64 {
        match *self {
            Term::Abs { j } => x.abs() - sqrt_lambda[j],
            Term::Combo { s1, j, s2, i } => x + s1 as f64 * sqrt_lambda[j] + s2 as f64 * sqrt_lambda[i],
        }
    }

    pub fn describe(&self) -> (String, usize, usize) {
        match *self {
            Term::Abs { j } => ("abs".into(), j + 1, j + 1),
            Term::Combo { s1, j, s2, i } => {
                let c = |s: i8| if s > 0 { '+' } else { '-' };
                (format!("{}{}", c(s1), c(s2)), j + 1, i + 1)
            }
        }
    }
}

/// Γ terms over the distinct eigenvalue labels: one representative of the null block, then every normal label.
pub fn gamma_terms(r: usize, d: usize) -> Vec<Term> {
    let mut labels: Vec<usize> = Vec::new();
    if r > 0 {
        labels.push(0);
    }
    labels.extend(r..d);
    let mut out = Vec::new();
    for &j in &labels {
        out.push(Term::Abs { j });
    }
    for (a, &j) in labels.iter().enumerate() {
        for &i in &labels[..=a] {
            for s1 in [1i8, -1] {
                for s2 in [1i8, -1] {
                    out.push(Term::Combo { s1, j, s2, i });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Witness {
    pub m: i32,
    pub nu: Nu,
    pub term: Term,
    pub value: f64,
    pub threshold: f64,
}

impl Witness {
    pub fn describe(&self, r: usize) -> String {
        let (signs, j, i) = self.term.describe();
        format!(
            "scale {} nu = {} signs {} j = {} i = {}: |..| = {:e} < {:e}",
            self.m,
            fmt_nu(&self.nu, r),
            signs,
            j,
            i,
            self.value,
            self.threshold
        )
    }
}

#[derive(Clone, Debug)]
pub struct ExcludedInterval {
    pub lo: f64,
    pub hi: f64,
    pub nu: Nu,
    pub term: Term,
}

#[derive(Clone, Debug)]
pub struct ExclusionSet {
    pub m: i32,
    /// one entry per failing condition
    pub raw: Vec<ExcludedInterval>,
    /// disjoint sorted union
    pub union: Vec<(f64, f64)>,
    pub measure: f64,
    /// small-|ν| cutoff below which no failure can occur, and whether any failure was found below it
    pub nu_cutoff: f64,
    pub below_cutoff_failures: usize,
    /// bound on the measure excluded by |ν| > nu_max
    pub tail_bound: f64,
}

/// Equal-length cells (lo, hi] covering I_C.
pub fn partition_interval(ctx: &ScaleContext) -> Vec<(f64, f64)> {
    let n = ctx.n_intervals;
    let h = 3.0 * ctx.eps_min / n as f64;
    (0..n)
        .map(|k| {
            let lo = ctx.eps_min + k as f64 * h;
            let hi = if k + 1 == n { 4.0 * ctx.eps_min } else { ctx.eps_min + (k + 1) as f64 * h };
            (lo, hi)
        })
        .collect()
}

/// {ε ∈ (lo, hi] : |g(ε)| < δ} for g monotone on the grid cells: cells whose
/// value range meets (-δ, δ) are refined by bisection on g = ±δ.
pub fn failure_intervals(g: &dyn Fn(f64) -> f64, delta: f64, lo: f64, hi: f64, n_grid: usize) -> Vec<(f64, f64)> {
    let (g_lo, g_hi) = (g(lo), g(hi));
    if g_lo.min(g_hi) >= delta || g_lo.max(g_hi) <= -delta {
        return Vec::new();
    }
    let step = (hi - lo) / n_grid as f64;
    let pts: Vec<f64> = (0..=n_grid).map(|k| if k == n_grid { hi } else { lo + k as f64 * step }).collect();
    let vals: Vec<f64> = pts.iter().map(|&e| g(e)).collect();
    let bisect = |mut a: f64, mut b: f64, target: f64| {
        // g(a) - target and g(b) - target have opposite signs
        let fa = g(a) - target;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if (b - a) <= 1e-12 * mid.abs() {
                break;
            }
            let fm = g(mid) - target;
            if (fm > 0.0) == (fa > 0.0) {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };
    let mut out: Vec<(f64, f64)> = Vec::new();
    for k in 0..n_grid {
        let (a, b) = (pts[k], pts[k + 1]);
        let (ga, gb) = (vals[k], vals[k + 1]);
        if ga.min(gb) >= delta || ga.max(gb) <= -delta {
            continue;
        }
        // entry and exit points of the band within the cell
        let cross = |t: f64| -> Option<f64> {
            if (ga - t) * (gb - t) < 0.0 {
                Some(bisect(a, b, t))
            } else {
                None
            }
        };
        let mut s = a;
        let mut e = b;
        let inside = |v: f64| v.abs() < delta;
        if !inside(ga) {
            let t = if ga >= delta { delta } else { -delta };
            s = cross(t).unwrap_or(a);
        }
        if !inside(gb) {
            let t = if gb >= delta { delta } else { -delta };
            e = cross(t).unwrap_or(b);
        }
        if e <= s {
            continue;
        }
        match out.last_mut() {
            Some(last) if (last.1 - s).abs() <= 1e-15 * s.abs().max(1.0) || last.1 >= s => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Canonical ν (x = ω·ν > 0) with 1 ≤ |ν| ≤ nu_max and |ω·ν| ≤ x_max.
pub fn candidate_nus(omega: &[f64], nu_max: i64, x_max: f64) -> Vec<Nu> {
    let r = omega.len();
    let mut out = Vec::new();
    let mut cur = [0i32; MAX_DIM];
    fn rec(omega: &[f64], k: usize, budget: i64, partial: f64, x_max: f64, cur: &mut Nu, out: &mut Vec<Nu>) {
        let r = omega.len();
        if k + 1 == r {
            let w = omega[k];
            // |partial + w n| ≤ x_max
            let (a, b) = ((-x_max - partial) / w, (x_max - partial) / w);
            let (lo, hi) = (a.min(b).ceil() as i64, a.max(b).floor() as i64);
            for n in lo.max(-budget)..=hi.min(budget) {
                cur[k] = n as i32;
                let x = partial + w * n as f64;
                if x > 0.0 && x <= x_max {
                    out.push(*cur);
                }
            }
            cur[k] = 0;
            return;
        }
        for n in -budget..=budget {
            cur[k] = n as i32;
            rec(omega, k + 1, budget - n.abs(), partial + omega[k] * n as f64, x_max, cur, out);
        }
        cur[k] = 0;
    }
    if r > 0 {
        rec(omega, 0, nu_max, 0.0, x_max, &mut cur, &mut out);
    }
    out.sort_by_key(|n| (nu_norm(n), *n));
    out
}

/// Σ_{ν ∈ Z^r, ν ≠ 0} |ν|^{-p} with the ℓ¹ norm, plus a tail estimate.
pub fn lattice_zeta(r: usize, p: f64) -> f64 {
    let n_top = 200_000u64;
    let mut s = 0.0;
    for n in (1..=n_top).rev() {
        s += lattice_shell(r, n) / (n as f64).powf(p);
    }
    // shell(n) ~ c n^{r-1}: tail ≈ c n_top^{r-p}/(p-r)
    let c = lattice_shell(r, n_top) / (n_top as f64).powi(r as i32 - 1);
    s + c * (n_top as f64).powf(r as f64 - p) / (p - r as f64)
}

/// Constants of the measure bound.
#[derive(Clone, Debug)]
pub struct MeasureConstants {
    pub rho: f64,
    pub rho_prime: f64,
    pub k0: f64,
    pub zeta: f64,
    pub k: f64,
}

pub fn measure_constants(model: &Model, ctx: &ScaleContext) -> MeasureConstants {
    let a = &model.spec.a;
    let s = a.len();
    if s == 0 {
        return MeasureConstants { rho: 0.0, rho_prime: 1.0, k0: 0.0, zeta: 0.0, k: 0.0 };
    }
    let sq: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
    let mut m = sq[0];
    for j in 0..s {
        for i in 0..j {
            m = m.min((sq[j] - sq[i]).abs());
        }
    }
    let rho = m / (2.0 * ctx.a_s.sqrt());
    let rho_prime = 1.0;
    let k0 = s as f64 / (ctx.a_s * rho);
    let zeta = lattice_zeta(model.r(), model.r() as f64 + 1.0);
    MeasureConstants { rho, rho_prime, k0, zeta, k: 4.0 * k0 * rho_prime.sqrt() * zeta }
}

impl MeasureConstants {
    /// Measure bound 2^{-e/2} C² K (×4 when n̄0 < 3), e = n̄0-1 below n̄0, m above.
    pub fn measure_bound(&self, ctx: &ScaleContext, m: i32) -> f64 {
        let e = if m < ctx.nbar0 { ctx.nbar0 - 1 } else { m };
        let f = if ctx.nbar0 < 3 { 4.0 } else { 1.0 };
        f * 2f64.powf(-(e as f64) / 2.0) * ctx.c * ctx.c * self.k
    }
}

/// Threshold 2^{-e/2} C0 / |ν|^{τ₁}.
pub fn threshold(ctx: &ScaleContext, m: i32, nu: &Nu) -> f64 {
    let e = if m < ctx.nbar0 { ctx.nbar0 - 1 } else { m };
    2f64.powf(-(e as f64) / 2.0) * ctx.c0 / (nu_norm(nu) as f64).powf(ctx.tau1)
}

/// λ̲^[m](ε) on one cell: ε a_j plus a frozen self-energy shift.
#[derive(Clone, Debug)]
pub struct CellSpectrum {
    pub lo: f64,
    pub hi: f64,
    /// per label; zero for the null block
    pub shift: Vec<f64>,
}

impl CellSpectrum {
    pub fn sqrt_lambda(&self, model: &Model, eps: f64) -> Vec<f64> {
        let r = model.r();
        (0..model.d())
            .map(|j| if j < r { 0.0 } else { (eps * model.spec.a[j - r] + self.shift[j]).max(0.0).sqrt() })
            .collect()
    }
}

/// Cells of I_C with the bare spectrum (scales below n̄0).
pub fn bare_cells(model: &Model, ctx: &ScaleContext) -> Vec<CellSpectrum> {
    vec![CellSpectrum { lo: ctx.eps_min, hi: 4.0 * ctx.eps_min, shift: vec![0.0; model.d()] }]
}

/// Cells with λ̲^[m] frozen from a ladder at each cell midpoint.
pub fn frozen_cells(model: &Model, ctx: &ScaleContext, m: u32, k_se: u32) -> Result<Vec<CellSpectrum>> {
    let cells = partition_interval(ctx);
    let r = model.r();
    let out: Vec<Result<CellSpectrum>> = par::map_range(cells.len(), |k| {
        let (lo, hi) = cells[k];
        let mid = 0.5 * (lo + hi);
        let cctx = ScaleContext::at_cell(model, ctx.n0, k)?;
        let mut l = Ladder::new(model, cctx, k_se, m)?;
        l.advance()?;
        let lam = l.lambda_bar(m).unwrap();
        let shift = (0..model.d()).map(|j| if j < r { 0.0 } else { lam[j] - mid * model.spec.a[j - r] }).collect();
        Ok(CellSpectrum { lo, hi, shift })
    });
    out.into_iter().collect()
}

/// E^o_m over the given cells; `n_grid` is the number of grid points across all of I_C.
pub fn exclusion_set(model: &Model, ctx: &ScaleContext, m: i32, cells: &[CellSpectrum], nu_max: i64, n_grid: usize) -> ExclusionSet {
    let (r, d) = (model.r(), model.d());
    let terms = gamma_terms(r, d);
    let a2 = measure_constants(model, ctx);
    let lam_max = cells
        .iter()
        .map(|c| {
            let v = c.sqrt_lambda(model, c.hi);
            v.into_iter().fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let e = if m < ctx.nbar0 { ctx.nbar0 - 1 } else { m };
    let x_max = 2.0 * lam_max + 2f64.powf(-(e as f64) / 2.0) * ctx.c0;
    let nus = if model.s() == 0 { vec![] } else { candidate_nus(&model.rot.omega, nu_max, x_max) };
    let per_nu: Vec<Vec<ExcludedInterval>> = par::map(&nus, |nu| {
        let x = model.freq(nu);
        let delta = threshold(ctx, m, nu);
        let mut v = Vec::new();
        for t in &terms {
            for c in cells {
                let g = |eps: f64| t.signed(x, &c.sqrt_lambda(model, eps));
                let n = ((n_grid as f64) * (c.hi - c.lo) / (3.0 * ctx.eps_min)).ceil().max(1.0) as usize;
                for (lo, hi) in failure_intervals(&g, delta, c.lo, c.hi, n) {
                    v.push(ExcludedInterval { lo, hi, nu: *nu, term: *t });
                }
            }
        }
        v
    });
    let raw: Vec<ExcludedInterval> = per_nu.into_iter().flatten().collect();
    let mut spans: Vec<(f64, f64)> = raw.iter().map(|i| (i.lo, i.hi)).collect();
    spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut union: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in spans {
        match union.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => union.push((lo, hi)),
        }
    }
    let measure = union.iter().map(|(a, b)| b - a).sum();
    let nu_cutoff = if model.s() == 0 {
        0.0
    } else {
        (ctx.c0 / (4.0 * (4.0 * ctx.eps_min * ctx.a_s * a2.rho_prime).sqrt())).powf(1.0 / ctx.tau0)
    };
    let below = if ctx.nbar0 >= 3 { raw.iter().filter(|i| (nu_norm(&i.nu) as f64) < nu_cutoff).count() } else { 0 };
    // per-ν length bound 2^{-e/2} C C0 K0 |ν|^{-τ₁}, summed over |ν| > nu_max
    let tail = if model.s() == 0 {
        0.0
    } else {
        let mut s = 0.0;
        let r_ = model.r();
        for n in (nu_max + 1)..(nu_max + 200_000) {
            let cnt = lattice_shell(r_, n as u64);
            s += cnt / (n as f64).powf(ctx.tau1);
        }
        2f64.powf(-(e as f64) / 2.0) * ctx.c * ctx.c0 * a2.k0 * s
    };
    ExclusionSet { m, raw, union, measure, nu_cutoff, below_cutoff_failures: below, tail_bound: tail }
}

/// #{ν ∈ Z^r : |ν|₁ = n} = Σ_k 2^k C(r,k) C(n-1,k-1).
fn lattice_shell(r: usize, n: u64) -> f64 {
    let mut s = 0.0;
    for k in 1..=r.min(n as usize) {
        let mut c1 = 1.0;
        for t in 0..k {
            c1 = c1 * (r - t) as f64 / (t + 1) as f64;
        }
        let mut c2 = 1.0;
        for t in 0..(k - 1) {
            c2 = c2 * (n as f64 - 1.0 - t as f64) / (t + 1) as f64;
        }
        s += 2f64.powi(k as i32) * c1 * c2;
    }
    s
}

impl ExclusionSet {
    pub fn to_csv(&self, r: usize) -> String {
        let mut s = String::from("m,nu,signs,j,i,eps_lo,eps_hi,length\n");
        for iv in &self.raw {
            let (signs, j, i) = iv.term.describe();
            s.push_str(&format!(
                "{},{},{},{},{},{:.17e},{:.17e},{:.17e}\n",
                self.m,
                fmt_nu(&iv.nu, r),
                signs,
                j,
                i,
                iv.lo,
                iv.hi,
                iv.hi - iv.lo
            ));
        }
        s
    }

    pub fn contains(&self, eps: f64) -> bool {
        self.union.iter().any(|&(a, b)| a < eps && eps < b)
    }
}

/// Direct check of every Γ condition at ε, scales below n̄0 with the bare
/// spectrum and scales n̄0..=n_scales with the ladder's λ̲. First failure wins.
pub fn admissible(model: &Model, ctx: &ScaleContext, ladder: Option<&Ladder>, n_scales: u32, nu_max: i64) -> std::result::Result<(), Witness> {
    if model.s() == 0 {
        return Ok(());
    }
    let (r, d) = (model.r(), model.d());
    let terms = gamma_terms(r, d);
    let eps = ctx.eps;
    let bare: Vec<f64> = (0..d).map(|j| if j < r { 0.0 } else { (eps * model.spec.a[j - r]).sqrt() }).collect();
    let mut levels: Vec<(i32, Vec<f64>)> = vec![(ctx.nbar0 - 1, bare)];
    if let Some(l) = ladder {
        for m in ctx.nbar0.max(0)..=(n_scales as i32) {
            if let Some(lam) = l.lambda_bar(m as u32) {
                levels.push((m, lam.iter().map(|v| v.max(0.0).sqrt()).collect()));
            }
        }
    }
    for (m, sq) in levels {
        let lam_max = sq.iter().cloned().fold(0.0, f64::max);
        let e = if m < ctx.nbar0 { ctx.nbar0 - 1 } else { m };
        let x_max = 2.0 * lam_max + 2f64.powf(-(e as f64) / 2.0) * ctx.c0;
        for nu in candidate_nus(&model.rot.omega, nu_max, x_max) {
            let x = model.freq(&nu);
            let delta = threshold(ctx, m, &nu);
            for t in &terms {
                let v = t.signed(x, &sq).abs();
                if v < delta {
                    return Err(Witness { m, nu, term: *t, value: v, threshold: delta });
                }
            }
        }
    }
    Ok(())
}
