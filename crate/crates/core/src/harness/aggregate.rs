//! Reading run CSVs back and summarizing them across seeds.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{format_return, CSV_HEADER};
use crate::agent::{EpisodeRecord, Phase};
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: [&str; 5] = ["episode", "median", "min", "max", "n_seeds"];
pub const PLOT_HEADER: [&str; 7] = [
    "label", "episode", "phase", "median", "min", "max", "n_seeds",
];

/// Per-episode statistics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub episode: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n_seeds: usize,
}

/// Summary row of one labeled method, with the phase of the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub label: String,
    pub episode: usize,
    pub phase: Phase,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n_seeds: usize,
}

fn row_error(source: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Schema {
        path: format!("{source}:{line}"),
        message: message.into(),
    }
}

/// Parses a run CSV and checks that each seed's episode indices are
/// contiguous from 0. `source` names the input in error messages.
pub fn read_records<R: Read>(input: R, source: &str) -> Result<Vec<EpisodeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(row_error(
            source,
            1,
            format!("header must be {}", CSV_HEADER.join(",")),
        ));
    }
    let mut records = Vec::new();
    let mut next_episode: BTreeMap<u64, usize> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let bad = |what: &str| {
            row_error(
                source,
                line,
                format!(
                    "invalid {what} {:?}",
                    field(CSV_HEADER.iter().position(|h| *h == what).unwrap_or(0))
                ),
            )
        };
        let seed: u64 = field(0).parse().map_err(|_| bad("seed"))?;
        let episode: usize = field(1).parse().map_err(|_| bad("episode"))?;
        let phase = match field(2) {
            "explore" => Phase::Explore,
            "exploit" => Phase::Exploit,
            _ => return Err(bad("phase")),
        };
        let ret: f64 = field(3).parse().map_err(|_| bad("return"))?;
        let wall_ms: u64 = field(4).parse().map_err(|_| bad("wall_ms"))?;
        let expected = next_episode.entry(seed).or_insert(0);
        if episode != *expected {
            return Err(row_error(
                source,
                line,
                format!("seed {seed}: episode {episode} where {expected} was expected"),
            ));
        }
        *expected += 1;
        records.push(EpisodeRecord {
            seed,
            episode,
            phase,
            ret,
            wall_ms,
        });
    }
    Ok(records)
}

pub fn read_records_file(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = std::fs::File::open(path)?;
    read_records(file, &path.display().to_string())
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One series per `(input, seed)`, each a list of `(phase, return)` by
/// episode.
type Series = Vec<(Phase, f64)>;

fn split_series(inputs: &[Vec<EpisodeRecord>]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for records in inputs {
        let mut by_seed: BTreeMap<u64, Series> = BTreeMap::new();
        let mut order = Vec::new();
        for r in records {
            let s = by_seed.entry(r.seed).or_insert_with(|| {
                order.push(r.seed);
                Vec::new()
            });
            if r.episode != s.len() {
                return Err(Error::Alignment(format!(
                    "seed {} is missing episode {}",
                    r.seed,
                    s.len()
                )));
            }
            s.push((r.phase, r.ret));
        }
        for seed in order {
            out.push(by_seed.remove(&seed).expect("seed was recorded"));
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("no episodes to aggregate".into()));
    }
    let len = out[0].len();
    if let Some(bad) = out.iter().find(|s| s.len() != len) {
        return Err(Error::Alignment(format!(
            "series of {} episodes next to one of {len}",
            bad.len()
        )));
    }
    Ok(out)
}

fn summarize(series: &[Series]) -> Vec<(Phase, SummaryRow)> {
    let len = series[0].len();
    (0..len)
        .map(|e| {
            let vals: Vec<f64> = series.iter().map(|s| s[e].1).collect();
            let row = SummaryRow {
                episode: e,
                median: median(&vals),
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                n_seeds: vals.len(),
            };
            (series[0][e].0, row)
        })
        .collect()
}

/// Per-episode median, min and max across every seed of every input.
/// Inputs must share one episode grid.
pub fn aggregate_records(inputs: &[Vec<EpisodeRecord>]) -> Result<Vec<SummaryRow>> {
    Ok(summarize(&split_series(inputs)?)
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

pub fn aggregate(paths: &[&Path]) -> Result<Vec<SummaryRow>> {
    let inputs = paths
        .iter()
        .map(|p| read_records_file(p))
        .collect::<Result<Vec<_>>>()?;
    aggregate_records(&inputs)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            format_return(r.median),
            format_return(r.min),
            format_return(r.max),
            r.n_seeds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format plotting table: one summary per labeled group of inputs.
/// Phases must agree across the seeds of a group.
pub fn plot_data(groups: &[(String, Vec<Vec<EpisodeRecord>>)]) -> Result<Vec<PlotRow>> {
    let mut out = Vec::new();
    for (label, inputs) in groups {
        let series = split_series(inputs)?;
        for (e, _) in series[0].iter().enumerate() {
            if series.iter().any(|s| s[e].0 != series[0][e].0) {
                return Err(Error::Alignment(format!(
                    "{label}: seeds disagree on the phase of episode {e}"
                )));
            }
        }
        out.extend(summarize(&series).into_iter().map(|(phase, r)| PlotRow {
            label: label.clone(),
            episode: r.episode,
            phase,
            median: r.median,
            min: r.min,
            max: r.max,
            n_seeds: r.n_seeds,
        }));
    }
    Ok(out)
}

pub fn write_plot_data<W: Write>(rows: &[PlotRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(PLOT_HEADER)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.episode.to_string(),
            r.phase.as_str().to_string(),
            format_return(r.median),
            format_return(r.min),
            format_return(r.max),
            r.n_seeds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
