//! RMSE reports, the LSTM baseline and variant-by-seed experiments.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::BasinDataset;
use crate::graph::NetworkTopology;
use crate::pipeline::{train_variant, RunError, RunSpec, Variant};
use crate::train::{ObservationMask, TrainConfig};

/// Segments with at most this many test observations are left out of the
/// per-segment rows of `report.csv`.
pub const MIN_SEGMENT_OBS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no observations in evaluation group `{0}`")]
    EmptyGroup(String),
    #[error("predictions are {got_rows}x{got_cols}, observations {rows}x{cols}")]
    Shape {
        got_rows: usize,
        got_cols: usize,
        rows: usize,
        cols: usize,
    },
}

/// A named set of segments to score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub name: String,
    pub segments: Vec<usize>,
}

impl Scope {
    pub fn all(n_segments: usize) -> Self {
        Self {
            name: "all".into(),
            segments: (0..n_segments).collect(),
        }
    }

    /// Every segment downstream of any reservoir.
    pub fn downstream(topology: &NetworkTopology) -> Self {
        Self {
            name: "downstream".into(),
            segments: topology.reservoir_downstream_union(),
        }
    }

    /// The standard scopes: all segments, plus downstream ones when the
    /// network has reservoirs.
    pub fn standard(topology: &NetworkTopology) -> Vec<Self> {
        let mut out = vec![Self::all(topology.n_segments())];
        if topology.n_reservoirs() > 0 {
            out.push(Self::downstream(topology));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRmse {
    pub segment: usize,
    pub rmse: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub scope: String,
    pub rmse: f64,
    pub n_obs: usize,
    /// Every segment of the scope with at least one observation; counts sum to `n_obs`.
    pub per_segment: Vec<SegmentRmse>,
}

impl EvalReport {
    /// Segments with more than [`MIN_SEGMENT_OBS`] observations.
    pub fn reported_segments(&self) -> impl Iterator<Item = &SegmentRmse> {
        self.per_segment.iter().filter(|s| s.n_obs > MIN_SEGMENT_OBS)
    }
}

/// Overall and per-segment RMSE of `predictions` (`N x T`) against the
/// masked observations of `segments`.
pub fn rmse(
    predictions: &[Vec<f64>],
    observations: &ObservationMask,
    segments: &[usize],
    group: &str,
) -> Result<(f64, usize, Vec<SegmentRmse>), EvalError> {
    let cols = predictions.first().map_or(0, Vec::len);
    if predictions.len() != observations.n_segments || cols != observations.n_steps {
        return Err(EvalError::Shape {
            got_rows: predictions.len(),
            got_cols: cols,
            rows: observations.n_segments,
            cols: observations.n_steps,
        });
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut per_segment = Vec::new();
    for &i in segments {
        let mut sse = 0.0;
        let mut n = 0;
        for (t, p) in predictions[i].iter().enumerate() {
            if let Some(y) = observations.get(i, t) {
                sse += (p - y) * (p - y);
                n += 1;
            }
        }
        if n > 0 {
            per_segment.push(SegmentRmse {
                segment: i,
                rmse: (sse / n as f64).sqrt(),
                n_obs: n,
            });
            total += sse;
            count += n;
        }
    }
    if count == 0 {
        return Err(EvalError::EmptyGroup(group.to_string()));
    }
    Ok(((total / count as f64).sqrt(), count, per_segment))
}

/// Scores predictions on the test observations for each scope. Scopes
/// without test observations are skipped.
pub fn evaluate(
    variant: &str,
    seed: u64,
    predictions: &[Vec<f64>],
    test_observations: &ObservationMask,
    scopes: &[Scope],
) -> Result<Vec<EvalReport>, EvalError> {
    let mut out = Vec::new();
    for scope in scopes {
        match rmse(predictions, test_observations, &scope.segments, &scope.name) {
            Ok((rmse, n_obs, per_segment)) => out.push(EvalReport {
                variant: variant.to_string(),
                seed,
                scope: scope.name.clone(),
                rmse,
                n_obs,
                per_segment,
            }),
            Err(EvalError::EmptyGroup(g)) => log::warn!("scope `{g}` has no test observations; skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Trains the LSTM baseline and scores it on the test split.
pub fn baseline_rnn(
    data: &BasinDataset,
    topology: &NetworkTopology,
    config: &TrainConfig,
    scopes: &[Scope],
) -> Result<Vec<EvalReport>, RunError> {
    let spec = RunSpec {
        variant: Variant::Rnn,
        train: config.clone(),
        ..RunSpec::default()
    };
    run_and_score(data, topology, &spec, scopes)
}

fn run_and_score(data: &BasinDataset, topology: &NetworkTopology, spec: &RunSpec, scopes: &[Scope]) -> Result<Vec<EvalReport>, RunError> {
    let run = train_variant(data, topology, spec)?;
    let test = ObservationMask::from_dataset(data).restrict_steps(run.test_days.clone());
    evaluate(spec.variant.name(), spec.train.seed, &run.predictions, &test, scopes)
        .map_err(|e| RunError::Shape(e.to_string()))
}

/// Runs `f` over `jobs` on up to `threads` worker threads and returns the
/// results in job order.
pub fn parallel_map<J, R, F>(jobs: &[J], threads: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let r = f(&jobs[j]);
                results.lock().expect("no worker panicked")[j] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains and scores every `variant x seed` combination. `base` supplies
/// everything except variant and seed.
pub fn run_experiment(
    data: &BasinDataset,
    topology: &NetworkTopology,
    variants: &[Variant],
    seeds: &[u64],
    base: &RunSpec,
    scopes: &[Scope],
    threads: usize,
) -> Result<Vec<EvalReport>, RunError> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = parallel_map(&jobs, threads, |&(variant, seed)| {
        let mut spec = base.clone();
        spec.variant = variant;
        spec.train.seed = seed;
        log::info!("training {variant} seed {seed}");
        run_and_score(data, topology, &spec, scopes)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub scope: String,
    pub mean_rmse: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_rmse: f64,
    pub n_seeds: usize,
}

/// Mean and standard deviation of the overall RMSE per variant and scope.
pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        let key = (r.variant.clone(), r.scope.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.rmse);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                variant: key.0,
                scope: key.1,
                mean_rmse: mean,
                std_rmse: std,
                n_seeds: v.len(),
            }
        })
        .collect()
}

/// Mean RMSE of `variant` in `scope`, if present.
pub fn mean_rmse(summary: &[SummaryRow], variant: &str, scope: &str) -> Option<f64> {
    summary
        .iter()
        .find(|r| r.variant == variant && r.scope == scope)
        .map(|r| r.mean_rmse)
}

/// `variant,seed,scope,segment_id,rmse,n_obs`; one `segment_id = all` row
/// per report followed by its well-observed segments.
pub fn write_report_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "seed", "scope", "segment_id", "rmse", "n_obs"])?;
    for r in reports {
        w.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.scope.clone(),
            "all".into(),
            format!("{:.6}", r.rmse),
            r.n_obs.to_string(),
        ])?;
        for s in r.reported_segments() {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                r.scope.clone(),
                s.segment.to_string(),
                format!("{:.6}", s.rmse),
                s.n_obs.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `variant,scope,mean_rmse,std_rmse`.
pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "scope", "mean_rmse", "std_rmse"])?;
    for r in summary {
        w.write_record([
            r.variant.clone(),
            r.scope.clone(),
            format!("{:.6}", r.mean_rmse),
            format!("{:.6}", r.std_rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}
