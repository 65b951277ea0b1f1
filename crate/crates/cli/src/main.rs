use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use uncap_core::calibration::{fit_calibrator_with_mode, CdfMode};
use uncap_core::engine::log::{snapshot, EpisodeLog};
use uncap_core::engine::{build_calibrator, run_episode, run_suite, Mode, SimConfig, SuiteEpisode, SuiteOptions, SuiteReport};
use uncap_core::fusion::bev::bev_svg;
use uncap_core::metrics::PenaltyTable;
use uncap_core::planning::llm::{LlmConfig, LlmPlanner};
use uncap_core::planning::mock::{MockConfig, MockPlanner};
use uncap_core::planning::Planner;
use uncap_core::scenario::{load_scenario, synthesize_labelled_set, Scenario, SensorModel, VehicleId, DEFAULT_NUM_CLASSES};

#[derive(Parser, Debug)]
#[command(name = "uncap", version, about = "Cooperative driving simulator with selective V2V messaging and uncertainty-gated planning")]
struct Cli {
    /// TOML configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one episode.
    Run(RunArgs),
    /// Run scenarios × modes × seeds and write a comparison table.
    Suite(SuiteArgs),
    /// Fit a calibrator on synthetic detections.
    Calibrate(CalibrateArgs),
    /// Rebuild the suite tables from episode logs.
    Report(ReportArgs),
    /// Draw a bird's-eye view of one CAV's fused scene.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PlannerKind {
    #[default]
    Mock,
    External,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    planner: Option<PlannerKind>,
    /// SPARE distance threshold in meters.
    #[arg(long = "spare-d")]
    spare_d: Option<f64>,
    /// Persisted calibrator to use instead of fitting one.
    #[arg(long)]
    calibrator: Option<PathBuf>,
    /// Infraction penalty coefficients (JSON).
    #[arg(long)]
    penalties: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// Scenario files or directories of `*.json` scenarios.
    #[arg(long, num_args = 1.., required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    noise_temp: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_NUM_CLASSES)]
    num_classes: usize,
    #[arg(long, value_enum, default_value_t = CdfArg::Empirical)]
    cdf: CdfArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CdfArg {
    Empirical,
    Conformal,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding `*.jsonl` episode logs (searched one level deep).
    #[arg(long)]
    logs: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    tick: u64,
    /// Viewer CAV; defaults to the scenario ego.
    #[arg(long)]
    cav: Option<u32>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PlannerSettings {
    kind: PlannerKind,
    mock: MockConfig,
    llm: LlmConfig,
}

/// File layer of the configuration. Simulation keys sit at the top level.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    sim: SimConfig,
    planner: PlannerSettings,
    penalties_file: Option<PathBuf>,
    jobs: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn apply(mut cfg: FileConfig, o: &Overrides) -> Result<FileConfig> {
    if let Some(m) = o.mode {
        cfg.sim.mode = m;
    }
    if let Some(s) = o.seed {
        cfg.sim.seed = s;
    }
    if let Some(p) = o.planner {
        cfg.planner.kind = p;
    }
    if let Some(d) = o.spare_d {
        if !(d > 0.0) {
            bail!("--spare-d must be > 0");
        }
        cfg.sim.spare.distance_threshold_m = d;
    }
    if let Some(c) = &o.calibrator {
        cfg.sim.calibration.path = Some(c.clone());
    }
    if let Some(p) = &o.penalties {
        cfg.penalties_file = Some(p.clone());
    }
    if let Some(p) = &cfg.penalties_file {
        cfg.sim.penalties = PenaltyTable::load(p).with_context(|| format!("loading penalties {}", p.display()))?;
    }
    cfg.sim.validate()?;
    Ok(cfg)
}

fn make_planner(settings: &PlannerSettings) -> Result<Box<dyn Planner>> {
    Ok(match settings.kind {
        PlannerKind::Mock => Box::new(MockPlanner::new(settings.mock)),
        PlannerKind::External => Box::new(LlmPlanner::from_env(settings.llm.clone())?),
    })
}

fn scenario_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no scenario files found");
    }
    Ok(files)
}

fn load_scenarios(inputs: &[PathBuf]) -> Result<Vec<Scenario>> {
    let scenarios: Vec<Scenario> = scenario_files(inputs)?
        .iter()
        .map(|f| load_scenario(f).with_context(|| format!("loading scenario {}", f.display())))
        .collect::<Result<_>>()?;
    let mut names = std::collections::BTreeSet::new();
    for s in &scenarios {
        if !names.insert(&s.name) {
            bail!("duplicate scenario name `{}`", s.name);
        }
    }
    Ok(scenarios)
}

/// Writes files under `dir` and records their hashes for the manifest.
struct Output {
    dir: PathBuf,
    files: BTreeMap<String, (String, u64)>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        let digest = hex::encode(Sha256::digest(contents.as_bytes()));
        self.files.insert(rel.to_string(), (digest, contents.len() as u64));
        Ok(())
    }

    fn finish(self) -> Result<PathBuf> {
        let files: Vec<serde_json::Value> = self
            .files
            .iter()
            .map(|(path, (sha, bytes))| serde_json::json!({"path": path, "sha256": sha, "bytes": bytes}))
            .collect();
        let text = serde_json::to_string_pretty(&serde_json::json!({ "files": files }))? + "\n";
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn log_name(scenario: &str, mode: Mode, seed: u64) -> String {
    format!("logs/{scenario}.{mode}.s{seed}.jsonl")
}

fn cmd_run(file: FileConfig, a: &RunArgs) -> Result<()> {
    let cfg = apply(file, &a.overrides)?;
    let scenario = load_scenario(&a.scenario).with_context(|| format!("loading scenario {}", a.scenario.display()))?;
    let planner = make_planner(&cfg.planner)?;
    let calibrator = build_calibrator(&cfg.sim, scenario.num_classes)?;
    let (log, metrics) = run_episode(&scenario, &cfg.sim, planner.as_ref(), &calibrator)?;
    let mut out = Output::create(&a.out)?;
    out.write(&log_name(&scenario.name, cfg.sim.mode, cfg.sim.seed), &log.to_jsonl())?;
    out.write("metrics.json", &metrics.to_json())?;
    out.write("metrics.csv", &metrics.to_csv())?;
    out.finish()?;
    print!("{}", metrics.to_json());
    Ok(())
}

fn cmd_suite(file: FileConfig, a: &SuiteArgs) -> Result<()> {
    let cfg = apply(file, &a.overrides)?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let modes = if a.modes.is_empty() { Mode::ALL.to_vec() } else { a.modes.clone() };
    let seeds = if a.seeds.is_empty() { vec![1, 2, 3] } else { a.seeds.clone() };
    let jobs = a.jobs.or(cfg.jobs).unwrap_or(1);
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let planner = make_planner(&cfg.planner)?;
    let report = run_suite(&scenarios, &modes, &seeds, &cfg.sim, planner.as_ref(), SuiteOptions { jobs, keep_logs: true })?;
    let mut out = Output::create(&a.out)?;
    for e in &report.episodes {
        if let Some(log) = &e.log {
            out.write(&log_name(&e.scenario, e.mode, e.seed), log)?;
        }
    }
    out.write("suite.csv", &report.to_csv())?;
    out.write("episodes.csv", &report.episodes_csv())?;
    out.finish()?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    if a.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let mut sensor = SensorModel::default();
    if let Some(t) = a.noise_temp {
        if !(t > 0.0) {
            bail!("--noise-temp must be > 0");
        }
        sensor.noise_temp = t;
    }
    let mode = match a.cdf {
        CdfArg::Empirical => CdfMode::Empirical,
        CdfArg::Conformal => CdfMode::Conformal,
    };
    let set = synthesize_labelled_set(&sensor, a.num_classes, a.samples, a.seed);
    let model = fit_calibrator_with_mode(&set, mode)?;
    let mut out = Output::create(&a.out)?;
    out.write("calibrator.json", &(model.to_json() + "\n"))?;
    out.finish()?;
    println!("fitted {} scores -> {}", model.len(), a.out.join("calibrator.json").display());
    Ok(())
}

fn find_logs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut logs = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            for inner in std::fs::read_dir(&p)? {
                let q = inner?.path();
                if q.extension().is_some_and(|x| x == "jsonl") {
                    logs.push(q);
                }
            }
        } else if p.extension().is_some_and(|x| x == "jsonl") {
            logs.push(p);
        }
    }
    logs.sort();
    if logs.is_empty() {
        bail!("no *.jsonl logs under {}", dir.display());
    }
    Ok(logs)
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let scenarios = load_scenarios(&a.scenarios)?;
    let by_name: BTreeMap<&str, &Scenario> = scenarios.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut episodes = Vec::new();
    for path in find_logs(&a.logs)? {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let log = EpisodeLog::from_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
        let scenario = by_name
            .get(log.header.scenario.as_str())
            .with_context(|| format!("{}: scenario `{}` not supplied", path.display(), log.header.scenario))?;
        let metrics = uncap_core::engine::log::metrics_from_log(&log, scenario).with_context(|| format!("replaying {}", path.display()))?;
        let mode: Mode = log.header.mode.parse().map_err(anyhow::Error::msg)?;
        episodes.push(SuiteEpisode {
            scenario: log.header.scenario.clone(),
            mode,
            seed: log.header.seed,
            metrics,
            log: None,
        });
    }
    let report = SuiteReport::aggregate(episodes);
    let mut out = Output::create(&a.out)?;
    out.write("suite.csv", &report.to_csv())?;
    out.write("episodes.csv", &report.episodes_csv())?;
    out.finish()?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario).with_context(|| format!("loading scenario {}", a.scenario.display()))?;
    let text = std::fs::read_to_string(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let log = EpisodeLog::from_jsonl(&text)?;
    let cav = a.cav.map(VehicleId).unwrap_or(scenario.ego);
    let (fused, states) = snapshot(&log, &scenario, cav, a.tick)?;
    let name = format!("bev_{}_t{}.svg", cav.0, a.tick);
    let mut out = Output::create(&a.out)?;
    out.write(&name, &bev_svg(&fused, &states))?;
    out.finish()?;
    println!("{}", a.out.join(name).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Run(a) => cmd_run(file, a),
        Command::Suite(a) => cmd_suite(file, a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Report(a) => cmd_report(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into()))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
