use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use uncap_core::engine::log::{metrics_from_log, replay, EpisodeLog, LogError};
use uncap_core::engine::{build_calibrator, run_episode, run_suite, Mode, SimConfig, SuiteOptions, SuiteReport};
use uncap_core::planning::MockPlanner;
use uncap_core::protocol::Tier;
use uncap_core::scenario::{load_scenario, Scenario, VehicleId};

fn bundled() -> Vec<Scenario> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths.iter().map(|p| load_scenario(p).unwrap()).collect()
}

fn episode(s: &Scenario, mode: Mode, seed: u64) -> (EpisodeLog, uncap_core::metrics::EpisodeMetrics) {
    let config = SimConfig::default().with_mode(mode).with_seed(seed);
    let cal = build_calibrator(&config, s.num_classes).unwrap();
    run_episode(s, &config, &MockPlanner::default(), &cal).unwrap()
}

#[test]
fn bundled_scenarios_have_expected_shape() {
    let all = bundled();
    let names: Vec<&str> = all.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["intersection", "merge_highway", "near_miss", "urban_occlusion"]);
    for s in &all {
        assert!((3..=4).contains(&s.cavs.len()), "{}", s.name);
    }
    let merge = all.iter().find(|s| s.name == "merge_highway").unwrap();
    let ids: Vec<u32> = merge.cavs.iter().map(|c| c.initial.id.0).collect();
    assert_eq!(ids, [1996, 2014, 2005]);
    assert_eq!(merge.tracked_entities(), 4);
}

#[test]
fn merging_ego_talks_only_to_the_main_lane_car() {
    let merge = bundled().into_iter().find(|s| s.name == "merge_highway").unwrap();
    let (log, _) = episode(&merge, Mode::Uncap, 1);
    let chosen: BTreeSet<VehicleId> = log
        .ticks
        .iter()
        .flat_map(|t| &t.selections)
        .filter(|r| r.cav == VehicleId(1996))
        .flat_map(|r| r.selected.iter().copied())
        .collect();
    assert_eq!(chosen, BTreeSet::from([VehicleId(2014)]));
}

#[test]
fn no_comm_transmits_nothing() {
    for s in bundled() {
        let (log, m) = episode(&s, Mode::NoComm, 1);
        assert_eq!(log.footer.envelopes, 0, "{}", s.name);
        assert_eq!(log.footer.total_bytes, 0);
        assert_eq!(m.tb_kb, 0.0);
        assert!(log.ticks.iter().all(|t| t.envelopes.is_empty()));
    }
}

#[test]
fn semantic_senders_were_selected_by_their_receiver() {
    for s in bundled() {
        let (log, _) = episode(&s, Mode::Uncap, 1);
        let mut semantic = 0;
        for t in &log.ticks {
            let selected: BTreeMap<VehicleId, BTreeSet<VehicleId>> =
                t.selections.iter().map(|r| (r.cav, r.selected.iter().copied().collect())).collect();
            for e in t.envelopes.iter().filter(|e| e.tier == Tier::Semantic) {
                semantic += 1;
                assert!(
                    selected.get(&e.receiver).is_some_and(|sel| sel.contains(&e.sender)),
                    "{} tick {}: {:?} -> {:?} without selection",
                    s.name,
                    t.tick,
                    e.sender,
                    e.receiver
                );
            }
        }
        assert!(semantic > 0, "{} exchanged no semantic messages", s.name);
    }
}

#[test]
fn peer_views_are_used_only_after_delivery() {
    for s in bundled() {
        for mode in [Mode::BroadcastAll, Mode::Uncap, Mode::UncapImages] {
            let (log, _) = episode(&s, mode, 2);
            // earliest delivery tick of a semantic message per (sender, receiver)
            let mut first_delivery: BTreeMap<(VehicleId, VehicleId), u64> = BTreeMap::new();
            for t in &log.ticks {
                for e in &t.envelopes {
                    assert!(e.delivered_tick > t.tick, "delivery must lag sending");
                    if e.tier == Tier::Semantic {
                        let slot = first_delivery.entry((e.sender, e.receiver)).or_insert(u64::MAX);
                        *slot = (*slot).min(e.delivered_tick);
                    }
                }
                for f in &t.fused {
                    for o in f.objects.iter().filter(|o| o.best != f.cav) {
                        let arrived = first_delivery.get(&(o.best, f.cav)).copied().unwrap_or(u64::MAX);
                        assert!(arrived <= t.tick, "{} {mode}: tick {} uses {:?} before delivery", s.name, t.tick, o.best);
                    }
                }
            }
        }
    }
}

#[test]
fn semantic_latency_is_realistic() {
    for s in bundled() {
        let (log, _) = episode(&s, Mode::Uncap, 1);
        for e in log.ticks.iter().flat_map(|t| &t.envelopes).filter(|e| e.tier == Tier::Semantic) {
            assert!((0.01..=0.3).contains(&e.latency_s), "{} B took {} s", e.bytes, e.latency_s);
        }
    }
}

#[test]
fn episodes_are_byte_identical() {
    for s in bundled() {
        let a = episode(&s, Mode::Uncap, 3).0.to_jsonl();
        let b = episode(&s, Mode::Uncap, 3).0.to_jsonl();
        assert_eq!(a, b, "{}", s.name);
    }
}

#[test]
fn replay_reproduces_metrics_on_every_scenario() {
    for s in bundled() {
        for mode in Mode::ALL {
            let (log, metrics) = episode(&s, mode, 1);
            let text = log.to_jsonl();
            assert_eq!(replay(&text, &s).unwrap(), metrics, "{} {mode}", s.name);
            assert_eq!(metrics_from_log(&EpisodeLog::from_jsonl(&text).unwrap(), &s).unwrap(), metrics);
        }
    }
}

#[test]
fn truncated_log_is_rejected() {
    let s = &bundled()[0];
    let text = episode(s, Mode::Uncap, 1).0.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    let cut = lines[..lines.len() - 1].join("\n");
    assert!(replay(&cut, s).is_err());
    let half = &text[..text.len() / 2];
    assert!(replay(half, s).is_err());
}

#[test]
fn replay_against_wrong_scenario_fails() {
    let all = bundled();
    let text = episode(&all[0], Mode::Uncap, 1).0.to_jsonl();
    assert!(matches!(replay(&text, &all[1]), Err(LogError::ScenarioMismatch { .. })));
}

#[test]
fn suite_table_shape_and_ordering() {
    let scenarios = bundled();
    let report = run_suite(
        &scenarios,
        &Mode::ALL,
        &[1],
        &SimConfig::default(),
        &MockPlanner::default(),
        SuiteOptions { jobs: 2, keep_logs: true },
    )
    .unwrap();
    assert_eq!(report.episodes.len(), 20);
    assert_eq!(report.rows.len(), 5 * 5);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 25);
    for line in csv.lines().filter(|l| l.starts_with("no_comm,")) {
        assert_eq!(line.split(',').nth(5), Some(""), "no_comm TB must be empty: {line}");
    }
    let ds = |m| report.row(m, "all").unwrap().ds;
    assert!(ds(Mode::Uncap) >= ds(Mode::FuseNoSpare));
    assert!(ds(Mode::FuseNoSpare) >= ds(Mode::BroadcastAll));
    assert!(ds(Mode::BroadcastAll) >= ds(Mode::NoComm));

    // rebuilding the table from the logs alone gives the same bytes
    let replayed: Vec<_> = report
        .episodes
        .iter()
        .map(|e| {
            let s = scenarios.iter().find(|s| s.name == e.scenario).unwrap();
            let metrics = replay(e.log.as_deref().unwrap(), s).unwrap();
            uncap_core::engine::SuiteEpisode { metrics, log: None, ..e.clone() }
        })
        .collect();
    let again = SuiteReport::aggregate(replayed);
    assert_eq!(again.to_csv(), csv);
    assert_eq!(again.episodes_csv(), report.episodes_csv());
}

#[test]
fn suite_output_is_independent_of_job_count() {
    let scenarios = bundled();
    let run = |jobs| {
        run_suite(
            &scenarios,
            &[Mode::NoComm, Mode::Uncap],
            &[1, 2],
            &SimConfig::default(),
            &MockPlanner::default(),
            SuiteOptions { jobs, keep_logs: true },
        )
        .unwrap()
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.to_csv(), b.to_csv());
    let logs = |r: &SuiteReport| r.episodes.iter().map(|e| e.log.clone().unwrap()).collect::<Vec<_>>();
    assert_eq!(logs(&a), logs(&b));
}

#[test]
fn invalid_config_is_rejected() {
    let s = &bundled()[0];
    let mut config = SimConfig::default();
    config.requery_s = 0.0;
    let cal = build_calibrator(&SimConfig::default(), s.num_classes).unwrap();
    assert!(run_episode(s, &config, &MockPlanner::default(), &cal).is_err());
}
