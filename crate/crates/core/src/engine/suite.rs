//! Batch runs over scenarios × modes × seeds.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_calibrator, run_episode, EngineError, Mode, SimConfig};
use crate::calibration::NonconformityModel;
use crate::metrics::{mean_present, EpisodeMetrics};
use crate::numfmt::g6;
use crate::planning::Planner;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEpisode {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
    /// JSONL episode log, kept when requested.
    #[serde(skip)]
    pub log: Option<String>,
}

/// Mean metrics for one (mode, scenario) cell; `scenario == "all"` pools every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub mode: Mode,
    pub scenario: String,
    pub episodes: usize,
    pub ds: f64,
    pub rc: f64,
    pub ip: f64,
    /// Absent when the mode transmits nothing.
    pub tb_kb: Option<f64>,
    pub ig_decision: Option<f64>,
    pub ig_perception: Option<f64>,
    pub min_margin_m: Option<f64>,
}

impl SuiteRow {
    pub const CSV_HEADER: &'static str = "mode,scenario,ds,rc,ip,tb_kb,ig_decision,ig_perception,min_margin_m";

    fn from_episodes(mode: Mode, scenario: &str, eps: &[&SuiteEpisode]) -> Self {
        let n = eps.len().max(1) as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| eps.iter().map(|e| f(&e.metrics)).sum::<f64>() / n;
        SuiteRow {
            mode,
            scenario: scenario.to_string(),
            episodes: eps.len(),
            ds: mean(|m| m.ds),
            rc: mean(|m| m.rc),
            ip: mean(|m| m.ip),
            tb_kb: mode.communicates().then(|| mean(|m| m.tb_kb)),
            ig_decision: mean_present(eps.iter().map(|e| e.metrics.ig_decision)),
            ig_perception: mean_present(eps.iter().map(|e| e.metrics.ig_perception)),
            min_margin_m: mean_present(eps.iter().map(|e| e.metrics.min_distance_margin_m)),
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(g6).unwrap_or_default();
        [
            self.mode.as_str().to_string(),
            self.scenario.clone(),
            g6(self.ds),
            g6(self.rc),
            g6(self.ip),
            opt(self.tb_kb),
            opt(self.ig_decision),
            opt(self.ig_perception),
            opt(self.min_margin_m),
        ]
        .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub episodes: Vec<SuiteEpisode>,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SuiteRow::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn row(&self, mode: Mode, scenario: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.mode == mode && r.scenario == scenario)
    }

    /// Sorts episodes and builds one row per (mode, scenario) plus a pooled
    /// `all` row per mode. Modes follow their declaration order and scenarios
    /// sort by name, so the table does not depend on input order.
    pub fn aggregate(mut episodes: Vec<SuiteEpisode>) -> Self {
        episodes.sort_by(|a, b| (a.mode, &a.scenario, a.seed).cmp(&(b.mode, &b.scenario, b.seed)));
        let modes: BTreeSet<Mode> = episodes.iter().map(|e| e.mode).collect();
        let names: BTreeSet<&str> = episodes.iter().map(|e| e.scenario.as_str()).collect();
        let mut rows = Vec::new();
        for &mode in &modes {
            let of_mode: Vec<&SuiteEpisode> = episodes.iter().filter(|e| e.mode == mode).collect();
            for &name in &names {
                let cell: Vec<&SuiteEpisode> = of_mode.iter().copied().filter(|e| e.scenario == name).collect();
                if !cell.is_empty() {
                    rows.push(SuiteRow::from_episodes(mode, name, &cell));
                }
            }
            rows.push(SuiteRow::from_episodes(mode, "all", &of_mode));
        }
        SuiteReport { episodes, rows }
    }

    /// One line per episode.
    pub fn episodes_csv(&self) -> String {
        let mut out = format!("mode,scenario,seed,{}\n", EpisodeMetrics::CSV_HEADER);
        for e in &self.episodes {
            out.push_str(&format!("{},{},{},{}\n", e.mode, e.scenario, e.seed, e.metrics.csv_row()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub jobs: usize,
    pub keep_logs: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { jobs: 1, keep_logs: false }
    }
}

/// Runs every combination on a pool of `jobs` threads. Results do not
/// depend on `jobs`: each episode is seeded independently and episodes are
/// sorted before aggregation.
pub fn run_suite(
    scenarios: &[Scenario],
    modes: &[Mode],
    seeds: &[u64],
    base: &SimConfig,
    planner: &dyn Planner,
    options: SuiteOptions,
) -> Result<SuiteReport, EngineError> {
    let mut calibrators: BTreeMap<usize, NonconformityModel> = BTreeMap::new();
    for s in scenarios {
        if !calibrators.contains_key(&s.num_classes) {
            calibrators.insert(s.num_classes, build_calibrator(base, s.num_classes)?);
        }
    }
    let work: Vec<(&Scenario, Mode, u64)> = scenarios
        .iter()
        .flat_map(|s| modes.iter().flat_map(move |&m| seeds.iter().map(move |&seed| (s, m, seed))))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
    let results: Result<Vec<SuiteEpisode>, EngineError> = pool.install(|| {
        work.par_iter()
            .map(|&(s, mode, seed)| {
                let config = SimConfig { mode, seed, ..base.clone() };
                let (log, metrics) = run_episode(s, &config, planner, &calibrators[&s.num_classes])?;
                Ok(SuiteEpisode {
                    scenario: s.name.clone(),
                    mode,
                    seed,
                    metrics,
                    log: options.keep_logs.then(|| log.to_jsonl()),
                })
            })
            .collect()
    });
    Ok(SuiteReport::aggregate(results?))
}
