//! Canonical enumeration of decorated trees and their values.
//!
//! Trees are stored as a hash-consed forest: a subtree is a root harmonic plus a
//! sorted multiset of child subtree ids, so every unordered tree appears once.
//! Instead of numbering lines and dividing by k!, each node carries
//! 1/Π m_i! for its groups of identical children; the product over nodes is
//! 1/|Aut|, which is what the numbered-line convention reduces to.

use crate::hamiltonian::Model;
use crate::{fmt_nu, nu_add, nu_is_zero, par, Error, Nu, Result, C64, MAX_DIM};
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    /// Θ°: trivial nodes allowed unless their entering line has zero momentum.
    Bare,
    /// Θ^R: no trivial nodes at all.
    Renormalized,
}

#[derive(Clone, Debug)]
pub struct Subtree {
    pub harmonic: Nu,
    pub children: Vec<u32>,
    /// momentum of the exiting line, not counting a marked entering leg
    pub momentum: Nu,
    /// contains the marked entering leg of a self-energy graph
    pub has_x: bool,
    pub is_x: bool,
    pub order: u32,
    /// zero-momentum lines, the exiting one included
    pub zeros: u32,
    pub degree: u32,
    pub local_sym: f64,
    pub inv_aut: f64,
}

#[derive(Clone, Debug)]
pub struct Forest {
    pub status: Status,
    pub nodes: Vec<Subtree>,
    pub max_degree: u32,
    pub max_order: u32,
    /// id of the marked leg when building self-energy graphs
    pub x_id: Option<u32>,
    /// ids of order ≤ n form the prefix nodes[..order_end[n]]
    order_end: Vec<usize>,
}

struct Gen<'a> {
    model: &'a Model,
    status: Status,
    allow_x: bool,
    max_degree: u32,
    max_order: u32,
    support: Vec<Nu>,
}

impl Forest {
    /// Bare trees with degree ≤ k_max. Zero-momentum lines are
    /// either emitted by a branching node or sit right above a non-zero line,
    /// so order ≤ 3·degree - 1 and the order cap below is exhaustive.
    pub fn bare(model: &Model, k_max: u32) -> Self {
        Self::build(model, Status::Bare, false, k_max, order_cap(k_max))
    }

    /// Trees without trivial nodes, degree ≤ k_max.
    pub fn renormalized(model: &Model, k_max: u32) -> Self {
        Self::build(model, Status::Renormalized, false, k_max, order_cap(k_max))
    }

    /// Self-energy graphs of order ≤ k_se: trivial-node free, no zero-momentum
    /// internal line, one marked entering leg.
    pub fn self_energy(model: &Model, k_se: u32) -> Self {
        Self::build(model, Status::Renormalized, true, k_se, k_se)
    }

    fn build(model: &Model, status: Status, allow_x: bool, max_degree: u32, max_order: u32) -> Self {
        let g = Gen { model, status, allow_x, max_degree, max_order, support: model.support() };
        let mut nodes: Vec<Subtree> = Vec::new();
        let mut order_end = vec![0usize];
        let mut x_id = None;
        if allow_x {
            nodes.push(Subtree {
                harmonic: [0; MAX_DIM],
                children: vec![],
                momentum: [0; MAX_DIM],
                has_x: true,
                is_x: true,
                order: 0,
                zeros: 0,
                degree: 0,
                local_sym: 1.0,
                inv_aut: 1.0,
            });
            x_id = Some(0);
            order_end[0] = 1;
        }
        for n in 1..=max_order {
            let mut fresh = Vec::new();
            for h in &g.support {
                let mut kids = Vec::new();
                g.children(&nodes, &order_end, x_id, h, n - 1, &mut kids, &mut fresh);
            }
            nodes.extend(fresh);
            order_end.push(nodes.len());
        }
        Self { status, nodes, max_degree, max_order, x_id, order_end }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids_of_order(&self, n: u32) -> std::ops::Range<usize> {
        let n = n as usize;
        if n == 0 || n >= self.order_end.len() {
            return 0..0;
        }
        self.order_end[n - 1]..self.order_end[n]
    }

    /// Complete self-energy graphs: marked leg inside, zero total harmonic, ≥ 2 nodes.
    pub fn self_energy_roots(&self) -> Vec<u32> {
        (0..self.nodes.len() as u32)
            .filter(|&i| {
                let t = &self.nodes[i as usize];
                t.has_x && !t.is_x && nu_is_zero(&t.momentum) && t.order >= 2
            })
            .collect()
    }

    /// Σ over ids of the symmetry multiplicity k!/|Aut| would be the numbered-line count.
    pub fn multiplicity(&self, id: u32) -> f64 {
        let t = &self.nodes[id as usize];
        let mut f = 1.0;
        for i in 2..=t.order {
            f *= i as f64;
        }
        f * t.inv_aut
    }

    /// Expand a subtree into an explicit node list (preorder, root first).
    pub fn expand(&self, id: u32) -> DecoratedTree {
        let mut t = DecoratedTree {
            forest_id: id,
            harmonic: vec![],
            parent: vec![],
            children: vec![],
            momentum: vec![],
            on_path: vec![],
            is_x: vec![],
            scale: vec![],
            inv_aut: self.nodes[id as usize].inv_aut,
        };
        fn rec(f: &Forest, id: u32, parent: Option<usize>, t: &mut DecoratedTree) -> usize {
            let s = &f.nodes[id as usize];
            let me = t.harmonic.len();
            t.harmonic.push(s.harmonic);
            t.parent.push(parent);
            t.children.push(vec![]);
            t.momentum.push(s.momentum);
            t.on_path.push(s.has_x);
            t.is_x.push(s.is_x);
            t.scale.push(None);
            for &c in &s.children {
                let cv = rec(f, c, Some(me), t);
                t.children[me].push(cv);
            }
            me
        }
        rec(self, id, None, &mut t);
        t
    }

    /// Stream of trees for a family key; rejects k above the forest's cap.
    pub fn enumerate(&self, key: &TreeFamilyKey) -> Result<impl Iterator<Item = DecoratedTree> + '_> {
        if key.k > self.max_degree {
            return Err(Error::Config(format!("tree order {} above K_max = {}", key.k, self.max_degree)));
        }
        if key.status != self.status {
            return Err(Error::Config("forest status does not match the requested family".into()));
        }
        let (k, nu) = (key.k, key.nu);
        Ok((0..self.nodes.len() as u32)
            .filter(move |&i| {
                let t = &self.nodes[i as usize];
                !t.has_x && t.degree == k && t.momentum == nu
            })
            .map(move |i| self.expand(i)))
    }

    /// ε-free values of every subtree with bare propagators: the value of
    /// subtree S is ε^{degree(S)} times this vector.
    pub fn bare_values(&self, model: &Model) -> Vec<Vec<C64>> {
        assert!(self.x_id.is_none(), "bare values need a forest without marked legs");
        let d = model.d();
        let r = model.r();
        let hinv = model.hessian_inverse();
        let mut vals: Vec<Vec<C64>> = vec![Vec::new(); self.nodes.len()];
        for n in 1..=self.max_order {
            let range = self.ids_of_order(n);
            let ids: Vec<usize> = range.clone().collect();
            let done = &vals;
            let level: Vec<Vec<C64>> = par::map(&ids, |&i| {
                let s = &self.nodes[i];
                let kids: Vec<&[C64]> = s.children.iter().map(|&c| done[c as usize].as_slice()).collect();
                let mut w = vec![C64::new(0.0, 0.0); d];
                model.node_contract(&s.harmonic, &kids, &mut w);
                let mut out = vec![C64::new(0.0, 0.0); d];
                if nu_is_zero(&s.momentum) {
                    for a in r..d {
                        for b in r..d {
                            out[a] -= w[b] * hinv[(a - r, b - r)];
                        }
                    }
                } else {
                    let x = model.freq(&s.momentum);
                    let g = 1.0 / (x * x);
                    for a in 0..d {
                        out[a] = w[a] * g;
                    }
                }
                for o in out.iter_mut() {
                    *o *= s.local_sym;
                }
                out
            });
            for (i, v) in range.zip(level) {
                vals[i] = v;
            }
        }
        vals
    }

    /// Coefficients h^(k)_ν of the bare series: Σ over trees of degree k.
    pub fn lindstedt_coefficients(&self, model: &Model) -> Coefficients {
        let vals = self.bare_values(model);
        let mut out: Coefficients = BTreeMap::new();
        for (i, s) in self.nodes.iter().enumerate() {
            if s.has_x {
                continue;
            }
            let e = out.entry((s.degree, s.momentum)).or_insert_with(|| vec![C64::new(0.0, 0.0); model.d()]);
            for (a, v) in e.iter_mut().zip(&vals[i]) {
                *a += v;
            }
        }
        out
    }

    /// ε-power-series values with the trivial-node resummed propagator
    /// expanded as Σ_p M₀^p x^{-2(p+1)}; entry [p] is the ε^p coefficient.
    pub fn expanded_resummed_values(&self, model: &Model) -> Vec<Vec<Vec<C64>>> {
        let d = model.d();
        let r = model.r();
        let kmax = self.max_degree as usize;
        let hinv = model.hessian_inverse();
        let h = &model.spec.hessian;
        let zero = vec![C64::new(0.0, 0.0); d];
        let mut vals: Vec<Vec<Vec<C64>>> = vec![Vec::new(); self.nodes.len()];
        for n in 1..=self.max_order {
            let range = self.ids_of_order(n);
            let ids: Vec<usize> = range.clone().collect();
            let done = &vals;
            let level: Vec<Vec<Vec<C64>>> = par::map(&ids, |&i| {
                let s = &self.nodes[i];
                // node output as a polynomial: Σ over power splits of the children
                let mut w = vec![zero.clone(); kmax + 1];
                let kids: Vec<&Vec<Vec<C64>>> = s.children.iter().map(|&c| &done[c as usize]).collect();
                let mut split = vec![0usize; kids.len()];
                loop {
                    let tot: usize = split.iter().sum();
                    let nonzero = split.iter().zip(&kids).all(|(&p, k)| k[p].iter().any(|z| z.norm() > 0.0));
                    if tot + 1 <= kmax + 1 && nonzero {
                        let args: Vec<&[C64]> = split.iter().zip(&kids).map(|(&p, k)| k[p].as_slice()).collect();
                        let mut tmp = zero.clone();
                        model.node_contract(&s.harmonic, &args, &mut tmp);
                        for (a, t) in w[tot].iter_mut().zip(&tmp) {
                            *a += t;
                        }
                    }
                    // odometer over powers
                    let mut j = 0;
                    loop {
                        if j == split.len() {
                            break;
                        }
                        split[j] += 1;
                        if split[j] <= kmax {
                            break;
                        }
                        split[j] = 0;
                        j += 1;
                    }
                    if j == split.len() {
                        break;
                    }
                }
                // node carries ε; w[p] is now the coefficient of ε^{p+1}
                let mut out = vec![zero.clone(); kmax + 1];
                if nu_is_zero(&s.momentum) {
                    // -ε⁻¹ H⁻¹: powers cancel against the node's ε
                    for p in 0..=kmax {
                        for a in r..d {
                            for b in r..d {
                                out[p][a] -= w[p][b] * hinv[(a - r, b - r)];
                            }
                        }
                    }
                } else {
                    let x2 = model.freq(&s.momentum).powi(2);
                    for p in 0..kmax {
                        // Σ_q ε^q diag(0,H)^q / x^{2(q+1)}
                        let mut cur = w[p].clone();
                        let mut scale = 1.0 / x2;
                        let mut q = 0;
                        while p + 1 + q <= kmax {
                            for a in 0..d {
                                out[p + 1 + q][a] += cur[a] * scale;
                            }
                            let mut next = zero.clone();
                            for a in r..d {
                                for b in r..d {
                                    next[a] += cur[b] * h[(a - r, b - r)];
                                }
                            }
                            cur = next;
                            scale /= x2;
                            q += 1;
                        }
                    }
                }
                for poly in out.iter_mut() {
                    for o in poly.iter_mut() {
                        *o *= s.local_sym;
                    }
                }
                out
            });
            for (i, v) in range.zip(level) {
                vals[i] = v;
            }
        }
        vals
    }

    /// ε^k coefficients assembled from trivial-node-free trees with expanded
    /// resummed propagators; equals the raw coefficients when the resummation
    /// bookkeeping is right.
    pub fn expanded_resummed_coefficients(&self, model: &Model) -> Coefficients {
        let vals = self.expanded_resummed_values(model);
        let mut out: Coefficients = BTreeMap::new();
        for (i, s) in self.nodes.iter().enumerate() {
            if s.has_x {
                continue;
            }
            for (p, v) in vals[i].iter().enumerate() {
                if p == 0 || p > self.max_degree as usize {
                    continue;
                }
                let e = out.entry((p as u32, s.momentum)).or_insert_with(|| vec![C64::new(0.0, 0.0); model.d()]);
                for (a, z) in e.iter_mut().zip(v) {
                    *a += z;
                }
            }
        }
        out
    }
}

fn order_cap(k_max: u32) -> u32 {
    (3 * k_max).saturating_sub(1).max(1)
}

impl<'a> Gen<'a> {
    #[allow(clippy::too_many_arguments)]
    fn children(
        &self,
        nodes: &[Subtree],
        order_end: &[usize],
        x_id: Option<u32>,
        h: &Nu,
        rem: u32,
        kids: &mut Vec<u32>,
        out: &mut Vec<Subtree>,
    ) {
        // the marked leg, if used, is always the first child
        let mut start_choices = vec![(false, 0usize)];
        if let Some(x) = x_id {
            start_choices.push((true, x as usize));
        }
        for (use_x, xid) in start_choices {
            kids.clear();
            if use_x {
                kids.push(xid as u32);
            }
            let first = if x_id.is_some() { 1 } else { 0 };
            self.multiset(nodes, order_end, h, rem, first, use_x, 0, kids, out);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn multiset(
        &self,
        nodes: &[Subtree],
        order_end: &[usize],
        h: &Nu,
        rem: u32,
        start: usize,
        has_x: bool,
        deg_sum: u32,
        kids: &mut Vec<u32>,
        out: &mut Vec<Subtree>,
    ) {
        if rem == 0 {
            if let Some(t) = self.finish(nodes, h, kids) {
                out.push(t);
            }
            return;
        }
        let end = order_end[rem as usize];
        for id in start..end {
            let c = &nodes[id];
            if c.order == 0 || (has_x && c.has_x) {
                continue;
            }
            if deg_sum + c.degree > self.max_degree {
                continue;
            }
            kids.push(id as u32);
            self.multiset(nodes, order_end, h, rem - c.order, id, has_x || c.has_x, deg_sum + c.degree, kids, out);
            kids.pop();
        }
    }

    fn finish(&self, nodes: &[Subtree], h: &Nu, kids: &[u32]) -> Option<Subtree> {
        let zero_h = nu_is_zero(h);
        if kids.is_empty() && zero_h {
            // leaf on the averaged potential: ∂f₀(β₀) = 0
            return None;
        }
        if zero_h && kids.len() == 1 {
            let c = &nodes[kids[0] as usize];
            let forbidden = match self.status {
                Status::Renormalized => true,
                Status::Bare => !c.has_x && nu_is_zero(&c.momentum),
            };
            if forbidden {
                return None;
            }
        }
        let mut momentum = *h;
        let mut order = 1;
        let mut zeros = 0;
        let mut has_x = false;
        let mut inv_aut = 1.0;
        for &k in kids {
            let c = &nodes[k as usize];
            momentum = nu_add(&momentum, &c.momentum);
            order += c.order;
            zeros += c.zeros;
            has_x |= c.has_x;
            inv_aut *= c.inv_aut;
        }
        if nu_is_zero(&momentum) && !has_x {
            if self.allow_x {
                // zero-momentum line inside a self-energy graph
                return None;
            }
            zeros += 1;
        }
        let degree = order - zeros;
        if degree > self.max_degree || order > self.max_order {
            return None;
        }
        let mut local_sym = 1.0;
        let mut run = 1.0;
        for w in 1..kids.len() {
            if kids[w] == kids[w - 1] {
                run += 1.0;
                local_sym /= run;
            } else {
                run = 1.0;
            }
        }
        let _ = self.model;
        Some(Subtree {
            harmonic: *h,
            children: kids.to_vec(),
            momentum,
            has_x,
            is_x: false,
            order,
            zeros,
            degree,
            local_sym,
            inv_aut: inv_aut * local_sym,
        })
    }
}

/// (k, ν) → h^(k)_ν as a d-vector.
pub type Coefficients = BTreeMap<(u32, Nu), Vec<C64>>;

#[derive(Clone, Debug)]
pub struct TreeFamilyKey {
    pub k: u32,
    pub nu: Nu,
    pub gamma: usize,
    pub status: Status,
}

/// Scale label of a line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scale {
    Finite(u32),
    /// zero momentum
    Infinite,
    /// external line of a self-energy graph: above every internal scale
    External,
}

#[derive(Clone, Debug)]
pub struct DecoratedTree {
    pub forest_id: u32,
    pub harmonic: Vec<Nu>,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// momentum of the line exiting each node (marked leg excluded)
    pub momentum: Vec<Nu>,
    /// the line lies on the path from the marked leg to the top
    pub on_path: Vec<bool>,
    pub is_x: Vec<bool>,
    pub scale: Vec<Option<Scale>>,
    pub inv_aut: f64,
}

impl DecoratedTree {
    pub fn len(&self) -> usize {
        self.harmonic.len()
    }
    pub fn is_empty(&self) -> bool {
        self.harmonic.is_empty()
    }
    /// Number of real nodes.
    pub fn order(&self) -> usize {
        self.is_x.iter().filter(|&&x| !x).count()
    }
    pub fn zero_lines(&self) -> usize {
        (0..self.len()).filter(|&v| !self.is_x[v] && !self.on_path[v] && nu_is_zero(&self.momentum[v])).count()
    }
    pub fn degree(&self) -> usize {
        self.order() - self.zero_lines()
    }

    /// Recompute line momenta from the node harmonics.
    pub fn recomputed_momenta(&self) -> Vec<Nu> {
        let mut m = vec![[0; MAX_DIM]; self.len()];
        for v in (0..self.len()).rev() {
            let mut acc = if self.is_x[v] { [0; MAX_DIM] } else { self.harmonic[v] };
            for &c in &self.children[v] {
                acc = nu_add(&acc, &m[c]);
            }
            m[v] = acc;
        }
        m
    }

    /// Indented text dump for golden files.
    pub fn dump(&self, r: usize) -> String {
        let mut s = String::new();
        fn rec(t: &DecoratedTree, v: usize, depth: usize, r: usize, s: &mut String) {
            let pad = "  ".repeat(depth);
            let scale = match t.scale[v] {
                None => "-".to_string(),
                Some(Scale::Finite(n)) => n.to_string(),
                Some(Scale::Infinite) => "inf".to_string(),
                Some(Scale::External) => "ext".to_string(),
            };
            if t.is_x[v] {
                let _ = writeln!(s, "{pad}leg");
            } else {
                let _ = writeln!(
                    s,
                    "{pad}node {} line {}{} scale {}",
                    fmt_nu(&t.harmonic[v], r),
                    fmt_nu(&t.momentum[v], r),
                    if t.on_path[v] { "+x" } else { "" },
                    scale
                );
            }
            for &c in &t.children[v] {
                rec(t, c, depth + 1, r, s);
            }
        }
        let _ = writeln!(s, "tree order={} degree={} 1/aut={}", self.order(), self.degree(), self.inv_aut);
        rec(self, 0, 1, r, &mut s);
        s
    }

    /// Contract node factors with per-line propagators. `props[v]` acts on the
    /// line exiting v; the top line is skipped when `apply_top` is false and
    /// marked legs take the value `leg`. No ε or symmetry factor applied.
    pub fn contract(&self, model: &Model, props: &[DMatrix<C64>], apply_top: bool, leg: &[C64]) -> Vec<C64> {
        let d = model.d();
        let mut vals: Vec<Vec<C64>> = vec![Vec::new(); self.len()];
        for v in (0..self.len()).rev() {
            if self.is_x[v] {
                vals[v] = leg.to_vec();
                continue;
            }
            let kids: Vec<&[C64]> = self.children[v].iter().map(|&c| vals[c].as_slice()).collect();
            let mut w = vec![C64::new(0.0, 0.0); d];
            model.node_contract(&self.harmonic[v], &kids, &mut w);
            if v == 0 && !apply_top {
                vals[v] = w;
            } else {
                let p = &props[v];
                vals[v] = (0..d).map(|a| (0..d).map(|b| p[(a, b)] * w[b]).sum()).collect();
            }
        }
        std::mem::take(&mut vals[0])
    }
}

/// Bare propagator: δ/(ω·ν)² for ν ≠ 0, -ε⁻¹(∂²f₀)⁻¹ on the β block for ν = 0.
pub fn bare_propagator(model: &Model, nu: &Nu, eps: f64) -> DMatrix<C64> {
    if nu_is_zero(nu) {
        zero_momentum_propagator(model, eps)
    } else {
        let x = model.freq(nu);
        let d = model.d();
        DMatrix::<C64>::identity(d, d) * C64::new(1.0 / (x * x), 0.0)
    }
}

pub fn zero_momentum_propagator(model: &Model, eps: f64) -> DMatrix<C64> {
    let (r, d) = (model.r(), model.d());
    let hinv = model.hessian_inverse();
    DMatrix::from_fn(d, d, |i, j| {
        if i >= r && j >= r {
            C64::new(-hinv[(i - r, j - r)] / eps, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// (x² - M₀)⁻¹ for ν ≠ 0; refuses an exactly singular denominator.
pub fn resummed_propagator(model: &Model, nu: &Nu, eps: f64) -> Result<DMatrix<C64>> {
    if nu_is_zero(nu) {
        return Ok(zero_momentum_propagator(model, eps));
    }
    let x = model.freq(nu);
    let x2 = x * x;
    for a in &model.spec.a {
        if (x2 - eps * a).abs() <= 1e-14 * x2.max(eps * a) {
            return Err(Error::ExcludedEps(format!(
                "x^2 = eps a_j at nu = {} (x = {x}, a_j = {a})",
                fmt_nu(nu, model.r())
            )));
        }
    }
    let d = model.d();
    let m = DMatrix::<C64>::identity(d, d) * C64::new(x2, 0.0) - model.m0(eps);
    m.try_inverse().ok_or_else(|| Error::ExcludedEps("singular x^2 - M0".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropagatorMode {
    Raw,
    TrivialResummed,
}

/// Val(θ) with bare or trivial-node-resummed propagators at fixed ε.
pub fn tree_value(model: &Model, tree: &DecoratedTree, eps: f64, mode: PropagatorMode) -> Result<Vec<C64>> {
    let mut props = Vec::with_capacity(tree.len());
    for v in 0..tree.len() {
        if tree.is_x[v] {
            props.push(DMatrix::zeros(model.d(), model.d()));
            continue;
        }
        let nu = &tree.momentum[v];
        props.push(match mode {
            PropagatorMode::Raw => bare_propagator(model, nu, eps),
            PropagatorMode::TrivialResummed => resummed_propagator(model, nu, eps)?,
        });
    }
    let v = tree.contract(model, &props, true, &[]);
    let f = eps.powi(tree.order() as i32) * tree.inv_aut;
    Ok(v.into_iter().map(|z| z * f).collect())
}

/// Σ_{θ ∈ Θ_{k,ν}} Val(θ). Raw mode returns the ε-free coefficient (forest
/// built once by the caller); resummed mode returns the ε-dependent sum over
/// trivial-node-free trees of degree k.
pub fn lindstedt_coefficient(
    model: &Model,
    forest: &Forest,
    k: u32,
    nu: &Nu,
    eps: f64,
    mode: PropagatorMode,
) -> Result<Vec<C64>> {
    let key = TreeFamilyKey {
        k,
        nu: *nu,
        gamma: 0,
        status: forest.status,
    };
    let mut acc = vec![C64::new(0.0, 0.0); model.d()];
    for t in forest.enumerate(&key)? {
        let v = tree_value(model, &t, if mode == PropagatorMode::Raw { 1.0 } else { eps }, mode)?;
        for (a, z) in acc.iter_mut().zip(v) {
            *a += z;
        }
    }
    Ok(acc)
}

/// Sum of all resummed-mode coefficients up to degree k_max at ε, by ν.
pub fn resummed_series(model: &Model, forest: &Forest, eps: f64) -> Result<BTreeMap<Nu, Vec<C64>>> {
    let ids: Vec<u32> = (0..forest.len() as u32).filter(|&i| !forest.nodes[i as usize].has_x).collect();
    let vals = par::map(&ids, |&i| {
        let t = forest.expand(i);
        tree_value(model, &t, eps, PropagatorMode::TrivialResummed).map(|v| (forest.nodes[i as usize].momentum, v))
    });
    let mut out: BTreeMap<Nu, Vec<C64>> = BTreeMap::new();
    for r in vals {
        let (nu, v) = r?;
        let e = out.entry(nu).or_insert_with(|| vec![C64::new(0.0, 0.0); model.d()]);
        for (a, z) in e.iter_mut().zip(v) {
            *a += z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nu_from_slice;
    use std::collections::BTreeSet;

    fn n1(a: i32) -> Nu {
        nu_from_slice(&[a]).unwrap()
    }

    #[test]
    fn first_order_single_tree() {
        let m = Model::pendulum();
        let f = Forest::bare(&m, 2);
        let key = TreeFamilyKey { k: 1, nu: n1(1), gamma: 0, status: Status::Bare };
        let trees: Vec<_> = f.enumerate(&key).unwrap().collect();
        assert_eq!(trees.len(), 1);
        let v = tree_value(&m, &trees[0], 1.0, PropagatorMode::Raw).unwrap();
        let w = m.rot.omega[0];
        assert!((v[0] - C64::new(0.0, 0.5 / (w * w))).norm() < 1e-15);
        assert!(f.enumerate(&TreeFamilyKey { k: 9, ..key }).is_err());
    }

    #[test]
    fn momentum_and_degree_invariants() {
        let m = Model::two_by_two();
        let f = Forest::bare(&m, 3);
        for i in 0..f.len() as u32 {
            let t = f.expand(i);
            assert_eq!(t.recomputed_momenta(), t.momentum);
            let k = t.order();
            let p = t.degree();
            assert!(p <= k && 3 * p > k, "degree {p} order {k}");
            assert_eq!(p as u32, f.nodes[i as usize].degree);
        }
    }

    #[test]
    fn zero_momentum_first_order_vanishes_by_stationarity() {
        let m = Model::pendulum();
        let f = Forest::bare(&m, 1);
        // single node with ν_v = 0 is pruned, so no order-1 tree with zero momentum
        assert!(f.ids_of_order(1).all(|i| !nu_is_zero(&f.nodes[i].momentum)));
    }

    #[test]
    fn resummed_mode_refuses_exact_resonance() {
        let m = Model::pendulum();
        let x = m.freq(&n1(1));
        let eps = x * x / m.spec.a[0];
        assert!(matches!(resummed_propagator(&m, &n1(1), eps), Err(Error::ExcludedEps(_))));
    }

    /// Brute force: every parent-pointer array with every harmonic assignment,
    /// deduplicated by an AHU-style canonical string.
    fn brute_force(model: &Model, k: usize, status: Status, max_degree: usize) -> BTreeSet<String> {
        let sup = model.support();
        let mut out = BTreeSet::new();
        let mut parent = vec![0usize; k];
        let mut harm = vec![0usize; k];
        fn canon(v: usize, ch: &[Vec<usize>], h: &[Nu]) -> String {
            let mut parts: Vec<String> = ch[v].iter().map(|&c| canon(c, ch, h)).collect();
            parts.sort();
            format!("{:?}[{}]", h[v], parts.join(","))
        }
        loop {
            let mut ch = vec![vec![]; k];
            for v in 1..k {
                ch[parent[v]].push(v);
            }
            loop {
                let h: Vec<Nu> = harm.iter().map(|&i| sup[i]).collect();
                let mut mom = h.clone();
                for v in (1..k).rev() {
                    mom[parent[v]] = nu_add(&mom[parent[v]], &mom[v]);
                }
                let mut ok = true;
                let mut zeros = 0;
                for v in 0..k {
                    if nu_is_zero(&mom[v]) {
                        zeros += 1;
                    }
                    let z = nu_is_zero(&h[v]);
                    if z && ch[v].is_empty() {
                        ok = false;
                    }
                    if z && ch[v].len() == 1 {
                        let c = ch[v][0];
                        if status == Status::Renormalized || nu_is_zero(&mom[c]) {
                            ok = false;
                        }
                    }
                }
                if ok && k - zeros <= max_degree {
                    out.insert(canon(0, &ch, &h));
                }
                let mut j = 0;
                while j < k {
                    harm[j] += 1;
                    if harm[j] < sup.len() {
                        break;
                    }
                    harm[j] = 0;
                    j += 1;
                }
                if j == k {
                    break;
                }
            }
            let mut j = k.saturating_sub(1);
            loop {
                if j == 0 {
                    return out;
                }
                parent[j] += 1;
                if parent[j] < j {
                    break;
                }
                parent[j] = 0;
                j -= 1;
            }
        }
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let m = Model::pendulum();
        for status in [Status::Bare, Status::Renormalized] {
            let f = if status == Status::Bare { Forest::bare(&m, 4) } else { Forest::renormalized(&m, 4) };
            for k in 1..=4u32 {
                let n = f.ids_of_order(k).count();
                let b = brute_force(&m, k as usize, status, 4).len();
                assert_eq!(n, b, "order {k} status {status:?}");
            }
            // k = 3, root momentum (1)
            let n3 = f.ids_of_order(3).filter(|&i| f.nodes[i].momentum == n1(1)).count();
            let b3 = brute_force(&m, 3, status, 4).iter().filter(|s| s.starts_with(&format!("{:?}", n1(1)))).count();
            assert!(n3 > 0 && b3 > 0);
        }
    }

    #[test]
    fn symmetry_factor_examples() {
        let m = Model::pendulum();
        let f = Forest::bare(&m, 3);
        // root harmonic 1 with two identical leaf children of harmonic 1
        let leaf = f.ids_of_order(1).find(|&i| f.nodes[i].momentum == n1(1)).unwrap() as u32;
        let t = f
            .nodes
            .iter()
            .find(|s| s.children == vec![leaf, leaf] && s.harmonic == n1(1))
            .unwrap();
        assert_eq!(t.local_sym, 0.5);
    }

    #[test]
    fn golden_dump_stable() {
        let m = Model::pendulum();
        let f = Forest::bare(&m, 2);
        let key = TreeFamilyKey { k: 2, nu: n1(0), gamma: 1, status: Status::Bare };
        let dumps: Vec<String> = f.enumerate(&key).unwrap().map(|t| t.dump(1)).collect();
        let joined = dumps.join("");
        assert!(joined.contains("node (1) line (0) scale -"));
        let again: Vec<String> = f.enumerate(&key).unwrap().map(|t| t.dump(1)).collect();
        assert_eq!(dumps, again);
    }
}
