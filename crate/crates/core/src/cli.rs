//! Command-line front end: config merging, the four pipelines, file emission.

use crate::epsdomain::{measure_constants, admissible, bare_cells, exclusion_set, frozen_cells};
use crate::hamiltonian::{Model, ModelConfig};
use crate::multiscale::{Ladder, ScaleContext};
use crate::trees::Forest;
use crate::verify::{certificate_suite, eom_residual, eval_fourier, Report};
use crate::{fmt_nu, Error, Nu, Result, C64};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EXCLUDED: i32 = 3;
pub const EXIT_CERTIFICATE: i32 = 4;

/// Env var overriding the output directory.
pub const OUT_ENV: &str = "LINDSTEDT_OUT";

#[derive(Parser, Debug)]
#[command(name = "lindstedt", about = "Lindstedt series and multiscale resummation for elliptic lower-dimensional tori")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-order Lindstedt coefficient tables.
    Coeffs(RunConfig),
    /// Resummed torus at one ε: ladder, h, torus samples, residual.
    Resum(RunConfig),
    /// Excluded ε-set on the interval I_C and its measure bound.
    Exclusions(RunConfig),
    /// Certificate report for the self-energy ladder.
    Verify(RunConfig),
}

/// Every run parameter. Flags win over the `--config` file, which wins over defaults.
#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// structured-text run config (TOML with these field names)
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// model file (TOML)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// maximal perturbation order
    #[arg(long)]
    pub k: Option<u32>,
    /// maximal order of self-energy graphs
    #[arg(long)]
    pub k_se: Option<u32>,
    /// number of ladder scales (default n̄0 + 3)
    #[arg(long)]
    pub n_max: Option<u32>,
    /// lattice cutoff for admissibility / exclusion scans
    #[arg(long)]
    pub nu_max: Option<i64>,
    /// Diophantine scan range
    #[arg(long)]
    pub n_check: Option<i64>,
    #[arg(long)]
    pub newton_tol: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub n0: Option<i32>,
    /// cell of the partition of I_C (with --n0)
    #[arg(long)]
    pub interval: Option<usize>,
    /// ψ-grid points per angle
    #[arg(long)]
    pub grid: Option<usize>,
    /// ε-grid points across I_C for the exclusion scan
    #[arg(long)]
    pub n_grid: Option<usize>,
    /// exclusion scales above n̄0 - 1
    #[arg(long)]
    pub m_extra: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// also write action tables A = ȧ - ω, B = ḃ
    #[arg(long)]
    #[serde(default)]
    pub actions: bool,
    /// add δ asymmetrically to one entry of M^[1] (fault injection)
    #[arg(long)]
    pub inject_asymmetry: Option<f64>,
    /// run on one thread
    #[arg(long)]
    #[serde(default)]
    pub sequential: bool,
}

macro_rules! or_field {
    ($a:ident, $b:ident; $($f:ident),*) => { $( if $a.$f.is_none() { $a.$f = $b.$f.clone(); } )* };
}

impl RunConfig {
    fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let text = read(&path)?;
            let file: RunConfig =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            or_field!(self, file; model, k, k_se, n_max, nu_max, n_check, newton_tol, eps, n0, interval,
                grid, n_grid, m_extra, out, inject_asymmetry);
            self.actions |= file.actions;
            self.sequential |= file.sequential;
        }
        for (name, v) in [("k", self.k), ("k_se", self.k_se), ("n_max", self.n_max), ("m_extra", self.m_extra.map(|m| m + 1))] {
            if v == Some(0) {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("nu_max", self.nu_max), ("n_check", self.n_check)] {
            if matches!(v, Some(x) if x < 1) {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("grid", self.grid), ("n_grid", self.n_grid)] {
            if v == Some(0) {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("newton_tol", self.newton_tol), ("eps", self.eps)] {
            if matches!(v, Some(x) if !(x > 0.0)) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(self)
    }

    fn load_model(&self) -> Result<Model> {
        let path = self.model.as_ref().ok_or_else(|| Error::Config("no --model given".into()))?;
        let text = read(path)?;
        let mut cfg: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if self.n_check.is_some() {
            cfg.n_check = self.n_check;
        }
        if self.newton_tol.is_some() {
            cfg.newton_tol = self.newton_tol;
        }
        Model::from_config(&cfg)
    }

    fn context(&self, model: &Model) -> Result<ScaleContext> {
        match (self.eps, self.n0) {
            (Some(eps), n0) => {
                if self.interval.is_some() {
                    return Err(Error::Config("--interval goes with --n0, not --eps".into()));
                }
                ScaleContext::new(model, eps, n0)
            }
            (None, Some(n0)) => ScaleContext::at_cell(model, n0, self.interval.unwrap_or(0)),
            (None, None) => Err(Error::Config("give --eps or --n0 [--interval]".into())),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = match std::env::var_os(OUT_ENV) {
            Some(d) => PathBuf::from(d),
            None => self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        };
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn n_max(&self, ctx: &ScaleContext) -> u32 {
        self.n_max.unwrap_or((ctx.nbar0 + 3).max(1) as u32)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn e17(x: f64) -> String {
    format!("{x:.17e}")
}

fn write(dir: &Path, name: &str, body: &[u8]) -> Result<()> {
    std::fs::write(dir.join(name), body)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv: {e}"))
}

/// Rows (label, ν, γ, Re, Im) for vector Fourier data.
fn fourier_csv(label: &str, label_value: &str, data: &BTreeMap<Nu, Vec<C64>>, r: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([label, "nu", "gamma", "re", "im"]).map_err(csv_err)?;
    for (nu, v) in data {
        for (g, z) in v.iter().enumerate() {
            w.write_record([label_value.to_string(), fmt_nu(nu, r), g.to_string(), e17(z.re), e17(z.im)])
                .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Numerical(e.to_string()))
}

pub fn cmd_coeffs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let k = cfg.k.unwrap_or(4);
    let model = cfg.load_model()?;
    let dir = cfg.out_dir()?;
    let (r, d) = (model.r(), model.d());
    let coeffs = Forest::bare(&model, k).lindstedt_coefficients(&model);
    let mut files = Vec::new();
    for order in 1..=k {
        let h: BTreeMap<Nu, Vec<C64>> =
            coeffs.iter().filter(|((o, _), _)| *o == order).map(|((_, nu), v)| (*nu, v.clone())).collect();
        let name = format!("coeffs_k{order}.csv");
        write(&dir, &name, &fourier_csv("k", &order.to_string(), &h, r)?)?;
        files.push(dir.join(name));
        if cfg.actions {
            // d/dt of the ψ-dependent part: multiply by i ω·ν
            let act: BTreeMap<Nu, Vec<C64>> = h
                .iter()
                .map(|(nu, v)| (*nu, v.iter().take(d).map(|z| z * C64::new(0.0, model.freq(nu))).collect()))
                .collect();
            let name = format!("actions_k{order}.csv");
            write(&dir, &name, &fourier_csv("k", &order.to_string(), &act, r)?)?;
            files.push(dir.join(name));
        }
    }
    Ok(files)
}

fn advanced_ladder<'m>(cfg: &RunConfig, model: &'m Model, ctx: &ScaleContext) -> Result<Ladder<'m>> {
    let mut ladder = Ladder::new(model, ctx.clone(), cfg.k_se.unwrap_or(4), cfg.n_max(ctx))?;
    if let Some(delta) = cfg.inject_asymmetry {
        ladder = ladder.with_injection(delta);
    }
    ladder.advance()?;
    Ok(ladder)
}

fn check_admissible(cfg: &RunConfig, model: &Model, ctx: &ScaleContext, ladder: &Ladder) -> Result<()> {
    admissible(model, ctx, Some(ladder), ladder.advanced(), cfg.nu_max.unwrap_or(50))
        .map_err(|w| Error::ExcludedEps(w.describe(model.r())))
}

pub fn cmd_resum(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = cfg.load_model()?;
    let ctx = cfg.context(&model)?;
    let dir = cfg.out_dir()?;
    let (r, s, d) = (model.r(), model.s(), model.d());
    let ladder = advanced_ladder(cfg, &model, &ctx)?;
    check_admissible(cfg, &model, &ctx, &ladder)?;
    let forest = Forest::renormalized(&model, cfg.k.unwrap_or(4));
    let h = ladder.renormalized_h(&forest)?;
    let nus: Vec<Nu> = h.keys().copied().collect();
    write(&dir, "ladder.csv", ladder.dump_csv(&nus)?.as_bytes())?;
    write(&dir, "h.csv", &fourier_csv("eps", &e17(ctx.eps), &h, r)?)?;

    let n = cfg.grid.unwrap_or(32);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=r).map(|i| format!("psi{i}")).collect();
    header.extend((1..=r).map(|i| format!("alpha{i}")));
    header.extend((1..=s).map(|i| format!("beta{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let beta0 = model.beta0();
    for idx in 0..n.pow(r as u32) {
        let mut rem = idx;
        let psi: Vec<f64> = (0..r)
            .map(|_| {
                let i = rem % n;
                rem /= n;
                2.0 * std::f64::consts::PI * i as f64 / n as f64
            })
            .collect();
        let hv = eval_fourier(&h, &psi, d);
        let mut row: Vec<String> = psi.iter().map(|p| e17(*p)).collect();
        row.extend((0..r).map(|i| e17(psi[i] + hv[i])));
        row.extend((0..s).map(|j| e17(beta0[j] + hv[r + j])));
        w.write_record(&row).map_err(csv_err)?;
    }
    write(&dir, "torus.csv", &w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?)?;

    let res = eom_residual(&model, &h, ctx.eps, n);
    let st = ladder.stats();
    let summary = format!(
        "eps={}\nn0={}\nnbar0={}\nn_max={}\nlambda_bar={}\nresidual={}\ntrees={}\nclusters={}\ncounting_violations={}\n",
        e17(ctx.eps),
        ctx.n0,
        ctx.nbar0,
        ladder.advanced(),
        ladder.lambda_bar(ladder.advanced()).unwrap().iter().map(|v| e17(*v)).collect::<Vec<_>>().join(" "),
        e17(res),
        st.trees_processed,
        st.clusters_processed,
        st.counting_violations
    );
    write(&dir, "residual.txt", summary.as_bytes())?;
    Ok(["ladder.csv", "h.csv", "torus.csv", "residual.txt"].iter().map(|f| dir.join(f)).collect())
}

/// Exclusion sets on scales n̄0-1 ..= n̄0+m_extra and their measured-vs-bound report.
pub fn exclusion_report(cfg: &RunConfig, model: &Model, ctx: &ScaleContext) -> Result<(String, Report)> {
    let r = model.r();
    let nu_max = cfg.nu_max.unwrap_or(400);
    let n_grid = cfg.n_grid.unwrap_or(10_000);
    let a2 = measure_constants(model, ctx);
    let mut csv = String::from("m,nu,signs,j,i,eps_lo,eps_hi,length\n");
    let mut rep = Report::default();
    let ic = 3.0 * ctx.eps_min;
    let first = ctx.nbar0 - 1;
    for m in first..=(ctx.nbar0 + cfg.m_extra.unwrap_or(2) as i32) {
        let cells = if m < ctx.nbar0 { bare_cells(model, ctx) } else { frozen_cells(model, ctx, m as u32, cfg.k_se.unwrap_or(2))? };
        let set = exclusion_set(model, ctx, m, &cells, nu_max, n_grid);
        csv.push_str(set.to_csv(r).split_once('\n').map(|(_, rows)| rows).unwrap_or(""));
        rep.at_most(format!("measure_m{m}"), set.measure + set.tail_bound, a2.measure_bound(ctx, m));
        rep.at_most(format!("below_cutoff_failures_m{m}"), set.below_cutoff_failures as f64, 0.0);
        if m == first {
            rep.at_least("admissible_fraction", 1.0 - set.measure / ic, 0.0);
        }
    }
    Ok((csv, rep))
}

pub fn cmd_exclusions(cfg: &RunConfig) -> Result<(Vec<PathBuf>, bool)> {
    let model = cfg.load_model()?;
    let ctx = cfg.context(&model)?;
    let dir = cfg.out_dir()?;
    let (csv, rep) = exclusion_report(cfg, &model, &ctx)?;
    write(&dir, "exclusions.csv", csv.as_bytes())?;
    let head = format!("n0={} nbar0={} I_C=[{},{}]\n", ctx.n0, ctx.nbar0, e17(ctx.eps_min), e17(4.0 * ctx.eps_min));
    write(&dir, "exclusions_summary.txt", (head + &rep.to_text()).as_bytes())?;
    Ok((vec![dir.join("exclusions.csv"), dir.join("exclusions_summary.txt")], rep.all_pass()))
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<(Vec<PathBuf>, bool)> {
    let model = cfg.load_model()?;
    let ctx = cfg.context(&model)?;
    let dir = cfg.out_dir()?;
    let ladder = advanced_ladder(cfg, &model, &ctx)?;
    check_admissible(cfg, &model, &ctx, &ladder)?;
    let forest = Forest::renormalized(&model, cfg.k.unwrap_or(4));
    let nus: Vec<Nu> = ladder.renormalized_h(&forest)?.keys().copied().collect();
    let rep = certificate_suite(&ladder, &nus)?;
    write(&dir, "certificates.txt", rep.to_text().as_bytes())?;
    Ok((vec![dir.join("certificates.txt")], rep.all_pass()))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Hypothesis(_) => EXIT_CONFIG,
        Error::ExcludedEps(_) => EXIT_EXCLUDED,
        Error::Numerical(_) | Error::Io(_) => EXIT_INTERNAL,
    }
}

/// Parse, run, report; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (cfg, which) = match cli.cmd {
        Command::Coeffs(c) => (c, 0),
        Command::Resum(c) => (c, 1),
        Command::Exclusions(c) => (c, 2),
        Command::Verify(c) => (c, 3),
    };
    let outcome = cfg.merged().and_then(|cfg| {
        crate::par::set_parallel(!cfg.sequential);
        match which {
            0 => cmd_coeffs(&cfg).map(|f| (f, true)),
            1 => cmd_resum(&cfg).map(|f| (f, true)),
            2 => cmd_exclusions(&cfg),
            _ => cmd_verify(&cfg),
        }
    });
    match outcome {
        Ok((files, pass)) => {
            for f in files {
                println!("{}", f.display());
            }
            if pass {
                EXIT_OK
            } else {
                eprintln!("certificate failure");
                EXIT_CERTIFICATE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
