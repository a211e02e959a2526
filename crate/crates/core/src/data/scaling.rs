use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::BasinDataset;

/// Per-column mean/std statistics computed on the training period and
/// reused unchanged for the test period.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub driver_mean: Vec<f64>,
    pub driver_std: Vec<f64>,
    pub meta_mean: Vec<f64>,
    pub meta_std: Vec<f64>,
    /// Statistics of the SE input columns (flows, then flow-average temperature).
    pub se_mean: Vec<f64>,
    pub se_std: Vec<f64>,
}

/// `(x - mean) / std`, or 0 when the column has no variance.
pub fn scale(value: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (value - mean) / std
    } else {
        0.0
    }
}

/// Mean and population standard deviation of each column of `rows`.
pub fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut n = 0usize;
    let rows: Vec<&[f64]> = rows.collect();
    for r in &rows {
        for (s, v) in sum.iter_mut().zip(r.iter()) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return (vec![0.0; width], vec![0.0; width]);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    for r in &rows {
        for ((q, v), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
            *q += (v - m) * (v - m);
        }
    }
    let std = sq.iter().map(|q| (q / n as f64).sqrt()).collect();
    (mean, std)
}

/// Z-scores every driver feature with statistics from `train` days only.
/// Features with zero variance over the training period become 0.
pub fn standardize_drivers(data: &BasinDataset, train: Range<usize>) -> (BasinDataset, FeatureScaling) {
    let (n, dx) = (data.n_segments, data.n_features);
    let raw = data.drivers_raw();
    let rows = train
        .clone()
        .flat_map(|t| (0..n).map(move |i| (t * n + i) * dx))
        .map(|base| &raw[base..base + dx]);
    let (mean, std) = column_stats(rows, dx);
    for (f, s) in std.iter().enumerate() {
        if *s == 0.0 {
            log::warn!("driver feature {f} is constant over the training period; mapped to 0");
        }
    }
    let scaled: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(j, &v)| scale(v, mean[j % dx], std[j % dx]))
        .collect();
    let out = data.with_drivers(scaled).expect("same size");
    (
        out,
        FeatureScaling {
            driver_mean: mean,
            driver_std: std,
            ..FeatureScaling::default()
        },
    )
}

/// Applies stored driver statistics (e.g. from a checkpoint) to a dataset.
pub fn apply_driver_scaling(data: &BasinDataset, scaling: &FeatureScaling) -> BasinDataset {
    let dx = data.n_features;
    let scaled: Vec<f64> = data
        .drivers_raw()
        .iter()
        .enumerate()
        .map(|(j, &v)| scale(v, scaling.driver_mean[j % dx], scaling.driver_std[j % dx]))
        .collect();
    data.with_drivers(scaled).expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use chrono::NaiveDate;

    fn dataset(values: Vec<f64>, n_days: usize, n: usize, dx: usize) -> BasinDataset {
        BasinDataset::new(
            NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            n_days,
            n,
            dx,
            values,
            vec![Observation { segment: 0, day: 0, temp_c: 10.0 }],
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let d = dataset(vec![3.0; 10], 10, 1, 1);
        let (s, stats) = standardize_drivers(&d, 0..5);
        assert!(s.drivers_raw().iter().all(|&v| v == 0.0));
        assert_eq!(stats.driver_std, vec![0.0]);
    }

    #[test]
    fn train_mean_is_zero_and_test_uses_train_stats() {
        // one segment, two features, six days; train = first four days
        let raw = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0, 100.0, 0.0, 5.0, 50.0];
        let d = dataset(raw, 6, 1, 2);
        let (s, stats) = standardize_drivers(&d, 0..4);
        for f in 0..2 {
            let m: f64 = (0..4).map(|t| s.driver(t, 0)[f]).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
        // Hand: feature 0 train mean 2.5, std sqrt(1.25) = 1.118034;
        // day 4 value 100 -> (100 - 2.5) / 1.118034 = 87.2067
        assert_eq!(stats.driver_mean[0], 2.5);
        assert!((s.driver(4, 0)[0] - 87.206_651).abs() < 1e-5);
        // feature 1 day 4 value 0 -> (0 - 25) / 11.18034 = -2.236068
        assert!((s.driver(4, 0)[1] + 2.236_068).abs() < 1e-5);
    }
}
