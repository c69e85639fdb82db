//! Lindstedt series for elliptic lower-dimensional tori of
//! `H = ω·A + ½A·A + ½B·B + ε f(α,β)`: tree expansions, multiscale
//! self-energy resummation, excluded-ε bookkeeping and numerical certificates.

pub mod cli;
pub mod epsdomain;
pub mod hamiltonian;
pub mod multiscale;
pub mod par;
pub mod trees;
pub mod verify;

use num_complex::Complex64;

pub type C64 = Complex64;

/// Largest supported dimension of either angle block.
pub const MAX_DIM: usize = 4;

/// Integer lattice vector; entries past the block dimension stay zero.
pub type Nu = [i32; MAX_DIM];

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("hypothesis failure: {0}")]
    Hypothesis(String),
    #[error("excluded eps: {0}")]
    ExcludedEps(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub fn nu_add(a: &Nu, b: &Nu) -> Nu {
    let mut c = [0; MAX_DIM];
    for i in 0..MAX_DIM {
        c[i] = a[i] + b[i];
    }
    c
}

pub fn nu_neg(a: &Nu) -> Nu {
    let mut c = [0; MAX_DIM];
    for i in 0..MAX_DIM {
        c[i] = -a[i];
    }
    c
}

pub fn nu_is_zero(a: &Nu) -> bool {
    a.iter().all(|&x| x == 0)
}

/// ℓ¹ norm, the lattice norm used throughout.
pub fn nu_norm(a: &Nu) -> i64 {
    a.iter().map(|&x| (x as i64).abs()).sum()
}

pub fn nu_from_slice(v: &[i32]) -> Result<Nu> {
    if v.len() > MAX_DIM {
        return Err(Error::Config(format!(
            "lattice vector of length {} exceeds {MAX_DIM}",
            v.len()
        )));
    }
    let mut n = [0; MAX_DIM];
    n[..v.len()].copy_from_slice(v);
    Ok(n)
}

pub fn fmt_nu(nu: &Nu, r: usize) -> String {
    let parts: Vec<String> = nu[..r].iter().map(|x| x.to_string()).collect();
    format!("({})", parts.join(" "))
}
