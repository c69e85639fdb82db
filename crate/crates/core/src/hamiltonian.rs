//! The model: rotation vector, trigonometric perturbation, stationary point
//! of the averaged potential and its normal spectrum.

use crate::{nu_from_slice, nu_is_zero, nu_neg, nu_norm, Error, Nu, Result, C64, MAX_DIM};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Deserialize;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct RotationVector {
    pub omega: Vec<f64>,
    pub c0: f64,
    pub tau0: f64,
}

impl RotationVector {
    pub fn new(omega: Vec<f64>, c0: f64, tau0: f64) -> Result<Self> {
        let r = omega.len();
        if r == 0 || r > MAX_DIM {
            return Err(Error::Config(format!("rotation vector dimension {r} not in 1..={MAX_DIM}")));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("non-finite rotation vector".into()));
        }
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(Error::Config(format!("C0 must be positive, got {c0}")));
        }
        if !(tau0 >= r as f64 - 1.0) {
            return Err(Error::Config(format!("tau0 = {tau0} below r - 1 = {}", r - 1)));
        }
        Ok(Self { omega, c0, tau0 })
    }

    pub fn r(&self) -> usize {
        self.omega.len()
    }

    pub fn dot(&self, nu: &Nu) -> f64 {
        self.omega.iter().zip(nu.iter()).map(|(w, &n)| w * n as f64).sum()
    }
}

/// All ν ∈ Z^r with 0 < |ν| ≤ n, ordered by norm then lexicographically.
pub fn lattice_ball(r: usize, n: i64) -> Vec<Nu> {
    let mut out = Vec::new();
    let mut cur = [0i32; MAX_DIM];
    fn rec(i: usize, r: usize, left: i64, cur: &mut Nu, out: &mut Vec<Nu>) {
        if i == r {
            if !nu_is_zero(cur) {
                out.push(*cur);
            }
            return;
        }
        for v in -left..=left {
            cur[i] = v as i32;
            rec(i + 1, r, left - v.abs(), cur, out);
        }
        cur[i] = 0;
    }
    rec(0, r, n, &mut cur, &mut out);
    out.sort_by_key(|v| (nu_norm(v), *v));
    out
}

#[derive(Clone, Debug)]
pub struct DiophantineReport {
    /// min over the ball of |ω·ν| |ν|^τ0 / C0
    pub ratio: f64,
    pub worst: Nu,
    pub n_check: i64,
}

/// min_{0<|ν|≤N} |ω·ν| |ν|^τ0, with the minimizing ν.
pub fn diophantine_constant(omega: &[f64], tau0: f64, n_check: i64) -> Result<(f64, Nu)> {
    if n_check < 1 {
        return Err(Error::Config("N_check must be >= 1".into()));
    }
    if omega.iter().any(|w| !w.is_finite()) {
        return Err(Error::Config("non-finite rotation vector".into()));
    }
    let r = omega.len();
    let mut best = (f64::INFINITY, [0; MAX_DIM]);
    for nu in lattice_ball(r, n_check) {
        let x: f64 = omega.iter().zip(nu.iter()).map(|(w, &n)| w * n as f64).sum();
        let v = x.abs() * (nu_norm(&nu) as f64).powf(tau0);
        if v < best.0 {
            best = (v, nu);
        }
    }
    Ok(best)
}

pub fn diophantine_scan(rv: &RotationVector, n_check: i64) -> Result<DiophantineReport> {
    let (m, worst) = diophantine_constant(&rv.omega, rv.tau0, n_check)?;
    Ok(DiophantineReport { ratio: m / rv.c0, worst, n_check })
}

/// |ω·ν| |ν|^τ0 / C0 at a single lattice point.
pub fn diophantine_ratio_at(rv: &RotationVector, nu: &Nu) -> Result<f64> {
    if nu_is_zero(nu) {
        return Err(Error::Config("diophantine ratio undefined at nu = 0".into()));
    }
    Ok(rv.dot(nu).abs() * (nu_norm(nu) as f64).powf(rv.tau0) / rv.c0)
}

/// f(α,β) = Σ f̂_{ν,μ} e^{i(ν·α+μ·β)}, grouped by ν.
#[derive(Clone, Debug)]
pub struct TrigPolynomial {
    r: usize,
    s: usize,
    terms: BTreeMap<Nu, Vec<(Nu, C64)>>,
}

impl TrigPolynomial {
    pub fn new(r: usize, s: usize, entries: &[(Nu, Nu, C64)]) -> Result<Self> {
        if r == 0 || r > MAX_DIM || s > MAX_DIM {
            return Err(Error::Config(format!("dimensions r={r}, s={s} out of range")));
        }
        let mut flat: BTreeMap<(Nu, Nu), C64> = BTreeMap::new();
        for (nu, mu, c) in entries {
            if nu[r..].iter().any(|&x| x != 0) || mu[s..].iter().any(|&x| x != 0) {
                return Err(Error::Config(format!("harmonic {:?}/{:?} exceeds dimensions", nu, mu)));
            }
            *flat.entry((*nu, *mu)).or_insert(C64::new(0.0, 0.0)) += c;
        }
        let scale = flat.values().map(|c| c.norm()).fold(0.0, f64::max);
        flat.retain(|_, c| c.norm() > 0.0);
        for ((nu, mu), c) in &flat {
            let partner = flat.get(&(nu_neg(nu), nu_neg(mu))).copied().unwrap_or_default();
            if (partner - c.conj()).norm() > 1e-12 * scale.max(1e-300) {
                return Err(Error::Config(format!(
                    "reality violated: coefficient at nu={:?} mu={:?} has no conjugate partner",
                    &nu[..r],
                    &mu[..s]
                )));
            }
        }
        let mut terms: BTreeMap<Nu, Vec<(Nu, C64)>> = BTreeMap::new();
        for ((nu, mu), c) in flat {
            terms.entry(nu).or_default().push((mu, c));
        }
        Ok(Self { r, s, terms })
    }

    pub fn r(&self) -> usize {
        self.r
    }
    pub fn s(&self) -> usize {
        self.s
    }

    /// α-harmonics with a nonzero f_ν.
    pub fn support(&self) -> Vec<Nu> {
        self.terms.keys().copied().collect()
    }

    pub fn coeffs(&self, nu: &Nu) -> &[(Nu, C64)] {
        self.terms.get(nu).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Nu, &Nu, &C64)> {
        self.terms.iter().flat_map(|(nu, v)| v.iter().map(move |(mu, c)| (nu, mu, c)))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.entries().map(|(_, _, c)| c.norm()).fold(0.0, f64::max)
    }

    /// Analyticity constant F₀ for the strip width κ₀: Σ |f̂| e^{κ₀(|ν|+|μ|)}.
    pub fn decay_constant(&self, kappa0: f64) -> f64 {
        self.entries()
            .map(|(nu, mu, c)| c.norm() * (kappa0 * (nu_norm(nu) + nu_norm(mu)) as f64).exp())
            .sum()
    }

    fn phase(mu: &Nu, beta: &[f64]) -> C64 {
        let a: f64 = beta.iter().zip(mu.iter()).map(|(b, &m)| b * m as f64).sum();
        C64::from_polar(1.0, a)
    }

    pub fn f_nu(&self, nu: &Nu, beta: &[f64]) -> C64 {
        self.coeffs(nu).iter().map(|(mu, c)| c * Self::phase(mu, beta)).sum()
    }

    /// Σ_μ f̂_{ν,μ} (iμ)^{⊗q} e^{iμ·β}, flattened row-major over s^q indices.
    pub fn beta_derivative_tensor(&self, nu: &Nu, q: usize, beta: &[f64]) -> Vec<C64> {
        let s = self.s;
        let len = s.pow(q as u32);
        let mut out = vec![C64::new(0.0, 0.0); len];
        for (mu, c) in self.coeffs(nu) {
            let base = c * Self::phase(mu, beta);
            for (idx, o) in out.iter_mut().enumerate() {
                let mut t = base;
                let mut rest = idx;
                for _ in 0..q {
                    let k = rest % s;
                    rest /= s;
                    t *= C64::new(0.0, mu[k] as f64);
                }
                *o += t;
            }
        }
        out
    }

    pub fn eval(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (nu, mu, c) in self.entries() {
            let a: f64 = alpha.iter().zip(nu.iter()).map(|(x, &n)| x * n as f64).sum::<f64>()
                + beta.iter().zip(mu.iter()).map(|(x, &m)| x * m as f64).sum::<f64>();
            acc += (c * C64::from_polar(1.0, a)).re;
        }
        acc
    }

    /// ∂_φ f at (α,β), φ = (α,β).
    pub fn grad_phi(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let (r, s) = (self.r, self.s);
        let mut g = vec![0.0; r + s];
        for (nu, mu, c) in self.entries() {
            let a: f64 = alpha.iter().zip(nu.iter()).map(|(x, &n)| x * n as f64).sum::<f64>()
                + beta.iter().zip(mu.iter()).map(|(x, &m)| x * m as f64).sum::<f64>();
            // ∂ e^{ia} = i k e^{ia}; real part of i c e^{ia} is -Im(c e^{ia})
            let w = -(c * C64::from_polar(1.0, a)).im;
            for i in 0..r {
                g[i] += w * nu[i] as f64;
            }
            for j in 0..s {
                g[r + j] += w * mu[j] as f64;
            }
        }
        g
    }

    pub fn f0_grad(&self, beta: &[f64]) -> DVector<f64> {
        let t = self.beta_derivative_tensor(&[0; MAX_DIM], 1, beta);
        DVector::from_iterator(self.s, t.iter().map(|c| c.re))
    }

    pub fn f0_hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let s = self.s;
        let t = self.beta_derivative_tensor(&[0; MAX_DIM], 2, beta);
        DMatrix::from_fn(s, s, |i, j| t[i + s * j].re)
    }
}

/// Newton iteration on ∂_β f₀ = 0.
pub fn find_stationary_point(f: &TrigPolynomial, guess: &[f64], tol: f64) -> Result<Vec<f64>> {
    let s = f.s();
    if guess.len() != s {
        return Err(Error::Config(format!("beta0 guess has length {}, expected {s}", guess.len())));
    }
    let mut beta = guess.to_vec();
    for _ in 0..100 {
        let g = f.f0_grad(&beta);
        if g.iter().all(|x| x.abs() <= tol) {
            return Ok(beta);
        }
        let h = f.f0_hessian(&beta);
        let step = h
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Numerical("singular Hessian during Newton iteration".into()))?;
        for i in 0..s {
            beta[i] -= step[i];
        }
    }
    Err(Error::Numerical("Newton iteration for beta0 did not converge".into()))
}

#[derive(Clone, Debug)]
pub struct NormalSpectrum {
    pub beta0: Vec<f64>,
    /// ascending eigenvalues of ∂²_β f₀(β₀)
    pub a: Vec<f64>,
    /// columns are the matching orthonormal eigenvectors
    pub eigvecs: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub rho: f64,
    /// min{a_1, a_{j+1} - a_j}
    pub gap: f64,
    pub nbar: i32,
}

impl NormalSpectrum {
    /// Largest normal eigenvalue; 1 when there is no β block.
    pub fn a_s(&self) -> f64 {
        self.a.last().copied().unwrap_or(1.0)
    }
}

pub fn nbar_from_rho(rho: f64) -> i32 {
    let v = -1.0 + 0.5 * (1.0 / rho).log2();
    let rv = v.round();
    if (v - rv).abs() < 1e-12 {
        rv as i32
    } else {
        v.ceil() as i32
    }
}

pub fn normal_spectrum(f: &TrigPolynomial, beta0: &[f64]) -> Result<NormalSpectrum> {
    let s = f.s();
    let hessian = f.f0_hessian(beta0);
    if s == 0 {
        return Ok(NormalSpectrum {
            beta0: vec![],
            a: vec![],
            eigvecs: DMatrix::zeros(0, 0),
            hessian,
            rho: 0.25,
            gap: f64::INFINITY,
            nbar: 0,
        });
    }
    let eig = SymmetricEigen::new(hessian.clone());
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let a: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigvecs = DMatrix::from_fn(s, s, |row, col| eig.eigenvectors[(row, idx[col])]);
    if a[0] <= 0.0 {
        return Err(Error::Hypothesis(format!("normal eigenvalue a_1 = {} not positive", a[0])));
    }
    let scale = a[s - 1];
    let mut gap = a[0];
    for j in 1..s {
        let g = a[j] - a[j - 1];
        if g <= 1e-12 * scale {
            return Err(Error::Hypothesis(format!(
                "normal eigenvalues a_{} = {} and a_{} = {} not distinct",
                j,
                a[j - 1],
                j + 1,
                a[j]
            )));
        }
        gap = gap.min(g);
    }
    let rho = if s == 1 { 0.25 } else { 0.25 * gap / scale };
    Ok(NormalSpectrum { beta0: beta0.to_vec(), a, eigvecs, hessian, rho, gap, nbar: nbar_from_rho(rho) })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub nu: Vec<i32>,
    pub mu: Vec<i32>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Structured-text model description.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub r: usize,
    pub s: usize,
    pub omega: Vec<f64>,
    /// Diophantine constant; taken from the lattice scan when absent.
    pub c0: Option<f64>,
    pub tau0: f64,
    #[serde(default)]
    pub beta0_guess: Vec<f64>,
    pub newton_tol: Option<f64>,
    pub n_check: Option<i64>,
    #[serde(default)]
    pub term: Vec<TermConfig>,
}

type NodeTable = Vec<([f64; 2 * MAX_DIM], C64)>;

/// Validated model with everything the expansions need precomputed.
#[derive(Clone, Debug)]
pub struct Model {
    pub f: TrigPolynomial,
    pub rot: RotationVector,
    pub spec: NormalSpectrum,
    pub diophantine: DiophantineReport,
    hess_inv: DMatrix<f64>,
    tables: BTreeMap<Nu, NodeTable>,
}

impl Model {
    pub fn new(f: TrigPolynomial, rot: RotationVector, beta0_guess: &[f64], tol: f64, n_check: i64) -> Result<Self> {
        if rot.r() != f.r() {
            return Err(Error::Config(format!("omega has {} entries but r = {}", rot.r(), f.r())));
        }
        let beta0 = find_stationary_point(&f, beta0_guess, tol)?;
        let spec = normal_spectrum(&f, &beta0)?;
        let diophantine = diophantine_scan(&rot, n_check)?;
        if diophantine.ratio < 1.0 - 1e-12 {
            return Err(Error::Hypothesis(format!(
                "Diophantine condition fails at nu = {:?}: ratio {}",
                &diophantine.worst[..rot.r()],
                diophantine.ratio
            )));
        }
        let hess_inv = spec
            .hessian
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Hypothesis("singular Hessian at beta0".into()))?;
        let (r, s) = (f.r(), f.s());
        let mut tables = BTreeMap::new();
        for nu in f.support() {
            let t: NodeTable = f
                .coeffs(&nu)
                .iter()
                .map(|(mu, c)| {
                    let mut k = [0.0; 2 * MAX_DIM];
                    for i in 0..r {
                        k[i] = nu[i] as f64;
                    }
                    for j in 0..s {
                        k[r + j] = mu[j] as f64;
                    }
                    (k, c * TrigPolynomial::phase(mu, &beta0))
                })
                .collect();
            tables.insert(nu, t);
        }
        Ok(Self { f, rot, spec, diophantine, hess_inv, tables })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        if cfg.omega.len() != cfg.r {
            return Err(Error::Config(format!("omega has {} entries but r = {}", cfg.omega.len(), cfg.r)));
        }
        let mut entries = Vec::with_capacity(cfg.term.len());
        for (i, t) in cfg.term.iter().enumerate() {
            if t.nu.len() != cfg.r || t.mu.len() != cfg.s {
                return Err(Error::Config(format!(
                    "term #{}: nu has length {}, mu has length {}; expected {} and {}",
                    i + 1,
                    t.nu.len(),
                    t.mu.len(),
                    cfg.r,
                    cfg.s
                )));
            }
            entries.push((nu_from_slice(&t.nu)?, nu_from_slice(&t.mu)?, C64::new(t.re, t.im)));
        }
        let f = TrigPolynomial::new(cfg.r, cfg.s, &entries)?;
        let n_check = cfg.n_check.unwrap_or(100);
        let c0 = match cfg.c0 {
            Some(c) => c,
            None => diophantine_constant(&cfg.omega, cfg.tau0, n_check)?.0,
        };
        let rot = RotationVector::new(cfg.omega.clone(), c0, cfg.tau0)?;
        let guess = if cfg.beta0_guess.is_empty() && cfg.s == 0 { vec![] } else { cfg.beta0_guess.clone() };
        Self::new(f, rot, &guess, cfg.newton_tol.unwrap_or(1e-12), n_check)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_config(&cfg)
    }

    /// f = cos α + cos β, ω golden, τ₀ = 1, C₀ from the scan.
    pub fn pendulum() -> Self {
        let h = C64::new(0.5, 0.0);
        let e = |a: i32, b: i32| (nu_from_slice(&[a]).unwrap(), nu_from_slice(&[b]).unwrap());
        let entries: Vec<(Nu, Nu, C64)> = [e(1, 0), e(-1, 0), e(0, 1), e(0, -1)]
            .into_iter()
            .map(|(n, m)| (n, m, h))
            .collect();
        let f = TrigPolynomial::new(1, 1, &entries).unwrap();
        let omega = vec![(1.0 + 5f64.sqrt()) / 2.0];
        let c0 = diophantine_constant(&omega, 1.0, 100).unwrap().0;
        Self::new(f, RotationVector::new(omega, c0, 1.0).unwrap(), &[3.0], 1e-12, 100).unwrap()
    }

    /// r = s = 2: f₀ = cos β₁ + 2 cos β₂ plus the α-harmonics
    /// (1 + ½cos β₂) cos α₁ and (½ + ¼cos β₁) cos α₂.
    pub fn two_by_two() -> Self {
        let mut entries = Vec::new();
        let mut add = |nu: [i32; 2], mu: [i32; 2], c: f64| {
            entries.push((nu_from_slice(&nu).unwrap(), nu_from_slice(&mu).unwrap(), C64::new(c, 0.0)));
        };
        for sg in [1, -1] {
            add([0, 0], [sg, 0], 0.5);
            add([0, 0], [0, sg], 1.0);
            add([sg, 0], [0, 0], 0.5);
            add([0, sg], [0, 0], 0.25);
            for sm in [1, -1] {
                add([sg, 0], [0, sm], 0.125);
                add([0, sg], [sm, 0], 0.0625);
            }
        }
        let f = TrigPolynomial::new(2, 2, &entries).unwrap();
        let omega = vec![1.0, (5f64.sqrt() - 1.0) / 2.0];
        let c0 = diophantine_constant(&omega, 1.0, 100).unwrap().0;
        Self::new(f, RotationVector::new(omega, c0, 1.0).unwrap(), &[3.0, 3.3], 1e-12, 100).unwrap()
    }

    pub fn r(&self) -> usize {
        self.f.r()
    }
    pub fn s(&self) -> usize {
        self.f.s()
    }
    pub fn d(&self) -> usize {
        self.f.r() + self.f.s()
    }
    pub fn beta0(&self) -> &[f64] {
        &self.spec.beta0
    }
    pub fn freq(&self, nu: &Nu) -> f64 {
        self.rot.dot(nu)
    }
    pub fn support(&self) -> Vec<Nu> {
        self.tables.keys().copied().collect()
    }
    pub fn has_harmonic(&self, nu: &Nu) -> bool {
        self.tables.contains_key(nu)
    }

    /// (∂²_β f₀(β₀))⁻¹
    pub fn hessian_inverse(&self) -> &DMatrix<f64> {
        &self.hess_inv
    }

    /// M₀ = ε diag(0, ∂²_β f₀(β₀))
    pub fn m0(&self, eps: f64) -> DMatrix<C64> {
        let (r, d) = (self.r(), self.d());
        DMatrix::from_fn(d, d, |i, j| {
            if i >= r && j >= r {
                C64::new(eps * self.spec.hessian[(i - r, j - r)], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    /// Node factor of harmonic ν contracted with the entering-line vectors:
    /// out_γ = Σ_μ f̂ e^{iμ·β₀} (ik)_γ Π_c (ik·h_c), k = (ν,μ).
    pub fn node_contract(&self, nu: &Nu, kids: &[&[C64]], out: &mut [C64]) {
        let d = self.d();
        for o in out.iter_mut() {
            *o = C64::new(0.0, 0.0);
        }
        let Some(table) = self.tables.get(nu) else { return };
        for (k, coef) in table {
            let mut p = *coef;
            for h in kids {
                let mut dot = C64::new(0.0, 0.0);
                for g in 0..d {
                    if k[g] != 0.0 {
                        dot += h[g] * k[g];
                    }
                }
                p *= C64::new(0.0, 1.0) * dot;
                if p.re == 0.0 && p.im == 0.0 {
                    break;
                }
            }
            if p.re == 0.0 && p.im == 0.0 {
                continue;
            }
            for g in 0..d {
                if k[g] != 0.0 {
                    out[g] += p * C64::new(0.0, k[g]);
                }
            }
        }
    }

    /// Full node-factor tensor of rank p+1 over {0..d}, flattened row-major
    /// (first index = exiting component). α slots give (iν)_γ, β slots the
    /// matching β-derivative of f_ν at β₀.
    pub fn node_factor(&self, nu: &Nu, p: usize) -> Vec<C64> {
        let (r, s, d) = (self.r(), self.s(), self.d());
        let rank = p + 1;
        let mut out = vec![C64::new(0.0, 0.0); d.pow(rank as u32)];
        let mut tensors: Vec<Vec<C64>> = Vec::new();
        for q in 0..=rank {
            tensors.push(self.f.beta_derivative_tensor(nu, q, self.beta0()));
        }
        for (idx, o) in out.iter_mut().enumerate() {
            let mut slots = Vec::with_capacity(rank);
            let mut rest = idx;
            for _ in 0..rank {
                slots.push(rest % d);
                rest /= d;
            }
            slots.reverse();
            let mut factor = C64::new(1.0, 0.0);
            let mut beta_idx = Vec::new();
            for &g in &slots {
                if g < r {
                    factor *= C64::new(0.0, nu[g] as f64);
                } else {
                    beta_idx.push(g - r);
                }
            }
            let q = beta_idx.len();
            let mut flat = 0;
            for (pos, &b) in beta_idx.iter().enumerate() {
                flat += b * s.pow(pos as u32);
            }
            *o = factor * tensors[q][flat];
        }
        out
    }
}
