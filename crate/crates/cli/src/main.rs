//! `momsel` command line: test one data set, invert a test over a grid of
//! data sets, or run the Monte Carlo experiments.
//!
//! Exit codes: 0 accept (or success), 1 reject, 2 error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use momsel::critical_values::{self, Method, Mode, RmsTables, TestConfig, TestDecision};
use momsel::mc_harness::{self, ExperimentConfig, OutputFormat, Preset};
use momsel::{FamilyKind, KappaSchedule, MomentSample, StatisticKind};

#[derive(Parser)]
#[command(name = "momsel", version, about = "Moment inequality tests with generalized and constrained moment selection")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test H0: E g(W) >= 0 on one moment matrix (CSV, rows = observations).
    Test {
        /// Moment matrix CSV.
        data: PathBuf,
        #[command(flatten)]
        flags: TestFlags,
    },
    /// Confidence set by test inversion over a grid file of `theta_id,path` rows.
    Invert {
        grid: PathBuf,
        #[command(flatten)]
        flags: TestFlags,
    },
    /// Run null rejection sweeps and size-corrected power experiments.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    Mmm,
    Aqlr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcArg {
    Gms,
    Cms,
    CmsFc,
    Rsw,
    Rms,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Asym,
    Boot,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<StatArg> for StatisticKind {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::Mmm => StatisticKind::Mmm,
            StatArg::Aqlr => StatisticKind::Aqlr,
        }
    }
}

impl From<ProcArg> for Method {
    fn from(p: ProcArg) -> Self {
        match p {
            ProcArg::Gms => Method::Gms,
            ProcArg::Cms => Method::Cms,
            ProcArg::CmsFc => Method::CmsFc,
            ProcArg::Rsw => Method::Rsw,
            ProcArg::Rms => Method::Rms,
        }
    }
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Asym => Mode::AsymptoticSim,
            ModeArg::Boot => Mode::Bootstrap,
        }
    }
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
        }
    }
}

#[derive(Args)]
struct TestFlags {
    #[arg(long, value_enum, default_value = "aqlr")]
    statistic: StatArg,
    #[arg(long, value_enum, default_value = "cms")]
    procedure: ProcArg,
    /// Selection rule 1..=5.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=5))]
    phi: u8,
    /// sqrt-log-n, sqrt-2loglogn or fixed:<value>.
    #[arg(long, default_value = "sqrt-log-n")]
    kappa: KappaSchedule,
    #[arg(long, value_enum, default_value = "boot")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Simulation or bootstrap draws.
    #[arg(long, default_value_t = critical_values::DEFAULT_BOOTSTRAP_DRAWS)]
    draws: usize,
    /// RSW first-stage level (default alpha / 10).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with delta_grid, kappa, eta1 and eta2_by_J.
    #[arg(long)]
    rms_tables: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

impl TestFlags {
    fn config(&self) -> Result<TestConfig> {
        let rms_tables = match &self.rms_tables {
            Some(p) => Some(RmsTables::from_json_path(p)?),
            None => None,
        };
        let config = TestConfig {
            statistic: self.statistic.into(),
            procedure: self.procedure.into(),
            phi: self.phi,
            kappa: self.kappa,
            mode: self.mode.into(),
            alpha: self.alpha,
            draws: self.draws,
            beta: self.beta,
            rms_tables,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config JSON; overrides below apply on top.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["table1", "table3"])]
    preset: Option<String>,
    /// 2000 replications and 1000 bootstrap draws.
    #[arg(long)]
    desk_scale: bool,
    /// Validate and echo the configuration without running it.
    #[arg(long)]
    dry_run: bool,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long)]
    family: Option<FamilyKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r_mc: Option<usize>,
    /// Bootstrap or simulation draws per replication.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<KappaSchedule>,
    #[arg(long)]
    phi: Option<u8>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated procedures.
    #[arg(long, value_enum, value_delimiter = ',')]
    procedures: Option<Vec<ProcArg>>,
    /// Comma-separated statistics.
    #[arg(long, value_enum, value_delimiter = ',')]
    statistics: Option<Vec<StatArg>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    infinity_surrogate: Option<f64>,
    #[arg(long)]
    rms_tables: Option<PathBuf>,
    /// Results file (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Also write MNRPs pivoted to n x (procedure, statistic) by J x family.
    #[arg(long)]
    pivot: Option<PathBuf>,
}

impl SimulateArgs {
    fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let seed = self.seed.unwrap_or(0);
        let mut configs = match (&self.preset, &self.config) {
            (Some(_), Some(_)) => bail!("--preset and --config are mutually exclusive"),
            (Some(p), None) => {
                let which: Preset = p.parse()?;
                mc_harness::preset(which, self.desk_scale, seed)
            }
            (None, Some(path)) => vec![ExperimentConfig::from_json_path(path)?],
            (None, None) => {
                let j = self.j.ok_or_else(|| anyhow!("--J is required without --config or --preset"))?;
                let family = self.family.ok_or_else(|| anyhow!("--family is required without --config or --preset"))?;
                let n = self.n.ok_or_else(|| anyhow!("--n is required without --config or --preset"))?;
                let mut c = ExperimentConfig::new(j, family, n);
                if !self.desk_scale {
                    c.r_mc = mc_harness::full_scale_replications(j);
                    c.b = critical_values::DEFAULT_BOOTSTRAP_DRAWS;
                }
                vec![c]
            }
        };
        let tables = match &self.rms_tables {
            Some(p) => Some(RmsTables::from_json_path(p)?),
            None => None,
        };
        for c in configs.iter_mut() {
            if self.desk_scale {
                c.r_mc = mc_harness::DESK_REPLICATIONS;
                c.b = mc_harness::DESK_BOOTSTRAP;
            }
            if self.preset.is_none() {
                if let Some(j) = self.j {
                    c.j = j;
                }
                if let Some(f) = self.family {
                    c.family = f;
                }
                if let Some(n) = self.n {
                    c.n = n;
                }
            }
            if let Some(v) = self.r_mc {
                c.r_mc = v;
            }
            if let Some(v) = self.draws {
                c.b = v;
            }
            if let Some(v) = self.alpha {
                c.alpha = v;
            }
            if let Some(v) = self.kappa {
                c.kappa = v;
            }
            if let Some(v) = self.phi {
                c.phi = v;
            }
            if let Some(v) = self.mode {
                c.mode = v.into();
            }
            if let Some(v) = &self.procedures {
                c.procedures = v.iter().map(|p| (*p).into()).collect();
            }
            if let Some(v) = &self.statistics {
                c.statistics = v.iter().map(|s| (*s).into()).collect();
            }
            if let Some(v) = self.beta {
                c.beta = Some(v);
            }
            if let Some(v) = self.seed {
                c.seed = v;
            }
            if let Some(v) = self.infinity_surrogate {
                c.infinity_surrogate = v;
            }
            if tables.is_some() {
                c.rms_tables = tables.clone();
            }
            c.validate()
                .with_context(|| format!("invalid configuration J={} {} n={}", c.j, c.family.label(), c.n))?;
        }
        Ok(configs)
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn decision_csv(rows: &[(Option<&str>, &TestDecision)]) -> String {
    let mut out = String::from("theta_id,statistic,critical_value,reject,method,draws\n");
    for (id, d) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            id.unwrap_or(""),
            d.statistic,
            d.critical_value.value,
            d.reject,
            d.critical_value.method,
            d.critical_value.draws
        ));
    }
    out
}

fn cmd_test(data: &Path, flags: &TestFlags) -> Result<bool> {
    let config = flags.config()?;
    let sample = MomentSample::from_csv_path(data)?;
    let decision = critical_values::run_test(&sample, &config, flags.seed)?;
    let text = match flags.format {
        FormatArg::Json => serde_json::to_string_pretty(&decision)? + "\n",
        FormatArg::Csv => decision_csv(&[(None, &decision)]),
    };
    print!("{text}");
    if let Some(path) = &flags.output {
        write_or_print(Some(path), &text)?;
    }
    Ok(decision.reject)
}

#[derive(Serialize)]
struct InversionPoint {
    theta_id: String,
    #[serde(flatten)]
    decision: TestDecision,
}

#[derive(Serialize)]
struct Inversion {
    accepted: Vec<String>,
    points: Vec<InversionPoint>,
}

/// Reads `theta_id,path` rows; relative paths resolve against the grid file.
fn read_grid(grid: &Path) -> Result<Vec<(String, PathBuf)>> {
    let base = grid.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let mut points = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, path) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("{}:{}: expected theta_id,path", grid.display(), k + 1))?;
        let (id, path) = (id.trim(), path.trim());
        if k == 0 && id == "theta_id" {
            continue;
        }
        let path = Path::new(path);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        points.push((id.to_string(), path));
    }
    let mut ids: Vec<&str> = points.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("duplicate theta_id {:?} in grid", w[0]);
    }
    if points.is_empty() {
        bail!("grid {} lists no points", grid.display());
    }
    Ok(points)
}

fn cmd_invert(grid: &Path, flags: &TestFlags) -> Result<()> {
    let config = flags.config()?;
    let points = read_grid(grid)?;
    let mut j = None;
    let mut out = Vec::with_capacity(points.len());
    for (id, path) in &points {
        let sample = MomentSample::from_csv_path(path).with_context(|| format!("theta_id {id}"))?;
        match j {
            None => j = Some(sample.j()),
            Some(j0) if j0 != sample.j() => {
                bail!("theta_id {id}: file has J = {} but earlier points have J = {j0}", sample.j())
            }
            _ => {}
        }
        let decision = critical_values::run_test(&sample, &config, flags.seed).with_context(|| format!("theta_id {id}"))?;
        out.push(InversionPoint {
            theta_id: id.clone(),
            decision,
        });
    }
    let inversion = Inversion {
        accepted: out.iter().filter(|p| !p.decision.reject).map(|p| p.theta_id.clone()).collect(),
        points: out,
    };
    let text = match flags.format {
        FormatArg::Json => serde_json::to_string_pretty(&inversion)? + "\n",
        FormatArg::Csv => decision_csv(
            &inversion
                .points
                .iter()
                .map(|p| (Some(p.theta_id.as_str()), &p.decision))
                .collect::<Vec<_>>(),
        ),
    };
    print!("{text}");
    if let Some(path) = &flags.output {
        write_or_print(Some(path), &text)?;
    }
    Ok(())
}

fn summary_table(results: &[mc_harness::ExperimentResult]) -> String {
    let mut s = String::new();
    for r in results {
        let c = &r.config;
        s.push_str(&format!("J={} {} n={} R={} B={}\n", c.j, c.family.label(), c.n, c.r_mc, c.b));
        for m in &r.mnrp {
            let delta = r
                .correction_of(m.procedure, m.statistic)
                .map(|d| format!("  delta={d:.4}"))
                .unwrap_or_default();
            s.push_str(&format!(
                "  {:<6} {:<4}  MNRP={:.3} (se {:.3}) at {}{delta}\n",
                m.procedure.label(),
                m.statistic.label(),
                m.mnrp,
                m.se,
                m.mu_id
            ));
        }
        for cell in r.cells.iter().filter(|c| c.mu_id.starts_with("alt:")) {
            s.push_str(&format!(
                "  {:<6} {:<4}  power={:.3} (se {:.3}) at {}\n",
                cell.procedure.label(),
                cell.statistic.label(),
                cell.rate,
                cell.se,
                cell.mu_id
            ));
        }
        for d in &r.diagnostics.rsw {
            if d.mu_id.starts_with("alt:") {
                s.push_str(&format!(
                    "  RSW {:<4} first-stage={:.3} no-omission={:.3} at {}\n",
                    d.statistic.label(),
                    d.first_stage_rate,
                    d.no_omission_rate,
                    d.mu_id
                ));
            }
        }
        if r.diagnostics.tilt_infeasible > 0 {
            s.push_str(&format!("  tilt infeasible in {} replications\n", r.diagnostics.tilt_infeasible));
        }
    }
    s
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let configs = args.configs()?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&configs)?);
        return Ok(());
    }
    let mut results = Vec::with_capacity(configs.len());
    for c in &configs {
        log::info!("running J={} {} n={}", c.j, c.family.label(), c.n);
        results.push(mc_harness::run_experiment(c)?);
    }
    let format: OutputFormat = args.format.into();
    let summary = summary_table(&results);
    match &args.output {
        Some(path) => {
            mc_harness::emit(&results, format, path)?;
            print!("{summary}");
        }
        None => {
            let stdout = std::io::stdout().lock();
            match format {
                OutputFormat::Csv => mc_harness::write_csv(&results, stdout)?,
                OutputFormat::Json => mc_harness::write_json(&results, stdout)?,
            }
            eprint!("{summary}");
        }
    }
    if let Some(path) = &args.pivot {
        let file = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        mc_harness::table1_pivot(&results, file)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Test { data, flags } => {
            let reject = cmd_test(data, flags)?;
            Ok(ExitCode::from(u8::from(reject)))
        }
        Command::Invert { grid, flags } => {
            cmd_invert(grid, flags)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => {
            cmd_simulate(args)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
