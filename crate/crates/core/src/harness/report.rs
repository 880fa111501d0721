//! Report emission: per-round curves CSV, per-aggregator summary CSV, and a
//! machine-readable JSON of the same. Files are rendered in memory first so
//! an unwritable path fails before any partial write, and identical
//! summaries always produce identical bytes.

use super::suite::ExperimentSummary;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_JSON_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub curves: PathBuf,
    pub summary: PathBuf,
    pub summary_json: PathBuf,
}

#[derive(Serialize)]
struct JsonRun<'a> {
    run_id: String,
    aggregator: &'a str,
    seed: u64,
    final_metric: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct JsonStats<'a> {
    aggregator: &'a str,
    mean: f64,
    std: f64,
    n: usize,
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    runs: Vec<JsonRun<'a>>,
    summary: Vec<JsonStats<'a>>,
}

fn run_id(aggregator: &str, seed: u64) -> String {
    format!("{aggregator}-s{seed}")
}

/// Render the curves CSV: one row per (run, round). Runs without rounds are
/// omitted here but still appear in the summary.
fn render_curves(summary: &ExperimentSummary) -> String {
    let mut out = String::from("run_id,aggregator,seed,round,metric,wallclock_ms\n");
    for record in &summary.records {
        let id = run_id(&record.aggregator, record.seed);
        for round in &record.rounds {
            out.push_str(&format!(
                "{id},{agg},{seed},{round_idx},{metric:?},{ms}\n",
                agg = record.aggregator,
                seed = record.seed,
                round_idx = round.round,
                metric = round.metric,
                ms = round.wallclock_ms,
            ));
        }
    }
    out
}

fn render_summary(summary: &ExperimentSummary) -> String {
    let mut out = String::from("aggregator,mean,std,n\n");
    for s in &summary.stats {
        out.push_str(&format!(
            "{},{:?},{:?},{}\n",
            s.aggregator, s.mean, s.std, s.n
        ));
    }
    out
}

fn render_json(summary: &ExperimentSummary) -> String {
    let doc = JsonSummary {
        runs: summary
            .records
            .iter()
            .map(|r| JsonRun {
                run_id: run_id(&r.aggregator, r.seed),
                aggregator: &r.aggregator,
                seed: r.seed,
                final_metric: r.final_metric,
                error: r.error.as_deref(),
            })
            .collect(),
        summary: summary
            .stats
            .iter()
            .map(|s| JsonStats {
                aggregator: &s.aggregator,
                mean: s.mean,
                std: s.std,
                n: s.n,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    text.push('\n');
    text
}

/// Write the three report files under `out_dir`, creating it if needed.
pub fn emit_reports(
    summary: &ExperimentSummary,
    out_dir: &Path,
) -> std::io::Result<ReportPaths> {
    let paths = ReportPaths {
        curves: out_dir.join(CURVES_FILE),
        summary: out_dir.join(SUMMARY_FILE),
        summary_json: out_dir.join(SUMMARY_JSON_FILE),
    };
    // Render everything before touching the filesystem, then open all
    // targets before writing any of them.
    let curves = render_curves(summary);
    let summary_csv = render_summary(summary);
    let summary_json = render_json(summary);

    fs::create_dir_all(out_dir)?;
    let mut curves_file = fs::File::create(&paths.curves)?;
    let mut summary_file = fs::File::create(&paths.summary)?;
    let mut json_file = fs::File::create(&paths.summary_json)?;
    curves_file.write_all(curves.as_bytes())?;
    summary_file.write_all(summary_csv.as_bytes())?;
    json_file.write_all(summary_json.as_bytes())?;
    Ok(paths)
}

/// Re-summarize an existing curves CSV: the final metric of each run is the
/// metric of its last round.
pub fn resummarize_curves(text: &str) -> Result<ExperimentSummary, String> {
    use super::suite::{AggregatorStats, RunRecord};
    use std::collections::BTreeMap;

    let mut lines = text.lines();
    let header = lines.next().ok_or("empty curves file")?;
    if header != "run_id,aggregator,seed,round,metric,wallclock_ms" {
        return Err(format!("unexpected curves header: {header}"));
    }
    // (aggregator, seed) -> (max round, metric at max round), insertion order
    // preserved through a second list.
    let mut finals: BTreeMap<(String, u64), (usize, f64)> = BTreeMap::new();
    let mut order: Vec<(String, u64)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format!("line {}: expected 6 fields", lineno + 2));
        }
        let aggregator = fields[1].to_string();
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| format!("line {}: bad seed", lineno + 2))?;
        let round: usize = fields[3]
            .parse()
            .map_err(|_| format!("line {}: bad round", lineno + 2))?;
        let metric: f64 = fields[4]
            .parse()
            .map_err(|_| format!("line {}: bad metric", lineno + 2))?;
        let key = (aggregator, seed);
        match finals.get_mut(&key) {
            Some(entry) => {
                if round >= entry.0 {
                    *entry = (round, metric);
                }
            }
            None => {
                finals.insert(key.clone(), (round, metric));
                order.push(key);
            }
        }
    }

    let records: Vec<RunRecord> = order
        .iter()
        .map(|key| RunRecord {
            aggregator: key.0.clone(),
            seed: key.1,
            final_metric: Some(finals[key].1),
            rounds: Vec::new(),
            error: None,
            elapsed_ms: 0,
        })
        .collect();

    let mut aggregators: Vec<String> = Vec::new();
    for key in &order {
        if !aggregators.contains(&key.0) {
            aggregators.push(key.0.clone());
        }
    }
    let stats = aggregators
        .iter()
        .map(|a| {
            let finals: Vec<f64> = records
                .iter()
                .filter(|r| &r.aggregator == a)
                .filter_map(|r| r.final_metric)
                .collect();
            let n = finals.len();
            let mean = finals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregatorStats {
                aggregator: a.clone(),
                mean,
                std,
                n,
            }
        })
        .collect();
    Ok(ExperimentSummary { records, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::suite::{AggregatorStats, RunRecord};
    use crate::sim::RoundLog;

    fn summary_fixture() -> ExperimentSummary {
        let round = |round: usize, metric: f64| RoundLog {
            round,
            update_norms: vec![],
            weights: vec![],
            metric,
            wallclock_ms: 0,
            diverged: vec![],
        };
        ExperimentSummary {
            records: vec![
                RunRecord {
                    aggregator: "uniform_avg".into(),
                    seed: 1,
                    final_metric: Some(0.5),
                    rounds: vec![round(0, 1.0), round(1, 0.5)],
                    error: None,
                    elapsed_ms: 3,
                },
                RunRecord {
                    aggregator: "uniform_avg".into(),
                    seed: 2,
                    final_metric: Some(0.7),
                    rounds: vec![],
                    error: None,
                    elapsed_ms: 2,
                },
            ],
            stats: vec![AggregatorStats {
                aggregator: "uniform_avg".into(),
                mean: 0.6,
                std: std_of(&[0.5, 0.7]),
                n: 2,
            }],
        }
    }

    fn std_of(v: &[f64]) -> f64 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    #[test]
    fn curves_omit_empty_runs_but_summary_keeps_them() {
        let s = summary_fixture();
        let curves = render_curves(&s);
        // Header + two rounds of the first run only.
        assert_eq!(curves.lines().count(), 3);
        assert!(!curves.contains("uniform_avg-s2"));
        let summary = render_summary(&s);
        assert!(summary.contains("uniform_avg,"));
        let json = render_json(&s);
        assert!(json.contains("uniform_avg-s2"));
    }

    #[test]
    fn one_run_one_round_is_two_lines() {
        let mut s = summary_fixture();
        s.records.truncate(1);
        s.records[0].rounds.truncate(1);
        let curves = render_curves(&s);
        assert_eq!(curves.lines().count(), 2);
        assert!(curves.ends_with('\n'));
    }

    #[test]
    fn re_emission_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("fedbayes-report-{}", std::process::id()));
        let s = summary_fixture();
        let p1 = emit_reports(&s, &dir).unwrap();
        let first = fs::read(&p1.curves).unwrap();
        let first_sum = fs::read(&p1.summary).unwrap();
        let p2 = emit_reports(&s, &dir).unwrap();
        assert_eq!(first, fs::read(&p2.curves).unwrap());
        assert_eq!(first_sum, fs::read(&p2.summary).unwrap());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resummarize_round_trips() {
        let s = summary_fixture();
        let curves = render_curves(&s);
        let again = resummarize_curves(&curves).unwrap();
        // Only the run with rounds appears in the curves.
        assert_eq!(again.records.len(), 1);
        assert_eq!(again.records[0].final_metric, Some(0.5));
        assert_eq!(again.stats[0].n, 1);
    }

    #[test]
    fn floats_round_trip_full_precision() {
        let mut s = summary_fixture();
        s.records[0].rounds[1].metric = 0.1 + 0.2; // 0.30000000000000004
        let curves = render_curves(&s);
        let again = resummarize_curves(&curves).unwrap();
        assert_eq!(again.records[0].final_metric, Some(0.1 + 0.2));
    }
}
