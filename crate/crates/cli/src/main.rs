use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use twachain::harness::{self, HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "twachain", version, about = "Truncated Wigner runs of n-photon driven dissipative chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steady-state ensemble: per-site table, histograms, fits.
    Simulate(Common),
    /// Classical run of the same chain.
    Gp(Common),
    /// Grid of (L, ζ) points from the [sweep] section.
    Sweep(Common),
    /// Steady-state run followed by the OTOC of the [otoc] section.
    Otoc(Common),
    /// Steady-state run writing histograms only.
    Wigner(Common),
    /// Thermodynamic fits of histograms written by an earlier run.
    FitThermo {
        #[command(flatten)]
        common: Common,
        /// Directory holding wigner_site*.{csv,json}; defaults to the config's directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Quantum-jump reference run of a one- or two-site chain.
    Oracle(Common),
    /// TWA against the quantum-jump reference on a common time grid.
    CompareOracle(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides integration.master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Skip sweep points already complete on disk.
    #[arg(long)]
    resume: bool,
    /// Print flags raised during the run to stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Gp(c)
            | Command::Sweep(c)
            | Command::Otoc(c)
            | Command::Wigner(c)
            | Command::Oracle(c)
            | Command::CompareOracle(c) => c,
            Command::FitThermo { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Gp(_) => "gp",
            Command::Sweep(_) => "sweep",
            Command::Otoc(_) => "otoc",
            Command::Wigner(_) => "wigner",
            Command::FitThermo { .. } => "fit-thermo",
            Command::Oracle(_) => "oracle",
            Command::CompareOracle(_) => "compare-oracle",
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.integration.master_seed = seed;
    }
    cfg.resolved()
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml())?;
    Ok(())
}

fn report_flags(flags: &[String], verbose: u8) {
    if verbose > 0 {
        for f in flags {
            eprintln!("flag: {f}");
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn run(cmd: &Command) -> Result<String, HarnessError> {
    let common = cmd.common();
    let out = &common.out;
    match cmd {
        Command::Simulate(_) | Command::Wigner(_) | Command::Otoc(_) => {
            let mut cfg = load(common)?;
            if matches!(cmd, Command::Wigner(_)) {
                cfg.output.thermo = false;
            }
            if matches!(cmd, Command::Otoc(_)) && cfg.otoc.is_none() {
                return Err(HarnessError::Invalid {
                    field: "otoc",
                    reason: "config has no [otoc] section".into(),
                });
            }
            let r = harness::run_point(&cfg)?;
            r.write(out)?;
            report_flags(&r.flags, common.verbose);
            let l = cfg.chain.sites;
            let last = r.row(l - 1);
            let mut line = format!(
                "L={l} zeta={} n_L={:.4}±{:.4} dn_L={:.4}±{:.4} steady={} flags={}",
                cfg.chain.drive,
                last.n.value,
                last.n.stderr,
                last.dn.value,
                last.dn.stderr,
                fmt_opt(r.steady.steady_time),
                r.flags.len()
            );
            if let Some(c) = r.chaos() {
                line += &format!(" v_B={} lambda={}", fmt_opt(c.butterfly_velocity()), fmt_opt(c.lyapunov_rate()));
            }
            if let Some(d) = &r.late_otoc {
                line += &format!(" D_inf_L={:.4}", d[l - 1]);
            }
            Ok(line)
        }
        Command::Gp(_) => {
            let cfg = load(common)?;
            let rows = harness::run_gp(&cfg)?;
            write_config(&cfg, out)?;
            harness::write_gp_table(&rows, fs::File::create(out.join("gp.csv"))?)?;
            let max_dphi1 = rows.iter().map(|r| r.circular_variance(1)).fold(0.0, f64::max);
            Ok(format!("L={} max_dphi1={max_dphi1:.4} n_L={:.4}", rows.len(), rows.last().unwrap().intensity))
        }
        Command::Sweep(_) => {
            let cfg = load(common)?;
            write_config(&cfg, out)?;
            let o = harness::run_sweep(&cfg, out, common.resume)?;
            let count = |s: harness::PointStatus| o.manifest.points.iter().filter(|p| p.status == s).count();
            if common.verbose > 0 {
                for p in o.manifest.points.iter().filter(|p| p.error.is_some()) {
                    eprintln!("failed: L={} zeta={}: {}", p.sites, p.drive, p.error.as_deref().unwrap());
                }
            }
            Ok(format!(
                "points={} completed={} skipped={} failed={}",
                o.manifest.points.len(),
                count(harness::PointStatus::Completed),
                count(harness::PointStatus::Skipped),
                count(harness::PointStatus::Failed)
            ))
        }
        Command::FitThermo { input, .. } => {
            let cfg = load(common)?;
            let dir = input
                .clone()
                .unwrap_or_else(|| common.config.parent().map(Path::to_path_buf).unwrap_or_default());
            let sites = harness::histogram_sites(&dir);
            if sites.is_empty() {
                return Err(HarnessError::Io(format!("no wigner_site*.json in {}", dir.display())));
            }
            let t_eq = read_t_eq(&dir);
            let mut rows = Vec::new();
            for s in sites {
                let h = harness::read_histogram(&dir, s)?;
                rows.push(twachain::thermofit::fit_site(s, &h, cfg.chain.kerr, t_eq.get(s - 1).copied().flatten()));
            }
            write_config(&cfg, out)?;
            twachain::thermofit::write_thermo_profile(&rows, fs::File::create(out.join("thermo.csv"))?)?;
            let flags: Vec<String> = rows.iter().flat_map(|r| r.flags.iter().map(move |f| format!("site {}: {f}", r.site))).collect();
            report_flags(&flags, common.verbose);
            let mu: Vec<String> = rows.iter().map(|r| format!("{}:{}", r.site, fmt_opt(r.mu_over_t()))).collect();
            Ok(format!("fitted={} mu_over_T=[{}]", rows.len(), mu.join(" ")))
        }
        Command::Oracle(_) => {
            let cfg = load(common)?;
            let run = harness::run_oracle(&cfg)?;
            write_config(&cfg, out)?;
            run.result.series.write_csv(fs::File::create(out.join("oracle.csv"))?)?;
            let meta = json!({
                "cutoff": run.result.cutoff,
                "step": run.result.step,
                "max_top_population": run.result.max_top_population,
                "convergence": run.convergence,
            });
            fs::write(out.join("oracle.json"), serde_json::to_string_pretty(&meta).unwrap())?;
            let l = cfg.chain.sites;
            let s = &run.result.series;
            let last = s.times.len() - 1;
            Ok(format!(
                "cutoff={} n_L(t={})={:.4}±{:.4} converged={}",
                run.result.cutoff,
                s.times[last],
                s.n[l - 1][last],
                s.n_se[l - 1][last],
                run.convergence.as_ref().map_or("-".into(), |c| c.converged.to_string())
            ))
        }
        Command::CompareOracle(_) => {
            let cfg = load(common)?;
            let run = harness::run_oracle(&cfg)?;
            let grid = run.result.series.times.clone();
            let twa = harness::twa_time_series(&cfg, &grid)?;
            let l = cfg.chain.sites;
            let cmp = harness::compare_series(&twa, &run.result.series, l - 1, 3.0)?;
            write_config(&cfg, out)?;
            cmp.write_csv(fs::File::create(out.join("comparison.csv"))?)?;
            twa.write_csv(fs::File::create(out.join("twa.csv"))?)?;
            run.result.series.write_csv(fs::File::create(out.join("oracle.csv"))?)?;
            Ok(format!(
                "checkpoints={} n_agree={} dn_agree={} cutoff={}",
                cmp.rows.len(),
                cmp.n_agreeing(),
                cmp.dn_agreeing(),
                run.result.cutoff
            ))
        }
    }
}

/// Equipartition temperatures from a sites.csv next to the histograms.
fn read_t_eq(dir: &Path) -> Vec<Option<f64>> {
    let Ok(mut rdr) = csv::Reader::from_path(dir.join("sites.csv")) else {
        return Vec::new();
    };
    let Ok(headers) = rdr.headers().cloned() else {
        return Vec::new();
    };
    let Some(col) = headers.iter().position(|h| h.starts_with("T_eq")) else {
        return Vec::new();
    };
    rdr.records()
        .map(|r| r.ok().and_then(|r| r.get(col).and_then(|v| v.parse().ok())))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({"stage": "cli", "code": "Threads", "message": e.to_string(), "context": {}}));
            return ExitCode::from(2);
        }
    }
    match run(&cli.command) {
        Ok(line) => {
            println!("{}: {line}", cli.command.name());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err = json!({
                "stage": e.stage(),
                "code": e.code(),
                "message": e.to_string(),
                "context": {
                    "command": cli.command.name(),
                    "config": common.config.display().to_string(),
                },
            });
            eprintln!("{err}");
            ExitCode::from(1)
        }
    }
}
