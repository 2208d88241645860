//! Feature extraction: single reads, window statistics, distance, and
//! train-fitted standardization.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{wrap_phase, FeatureMode, FeatureVector, LabeledSample, MaterialClass, ReadWindow, TagRead};
use crate::error::{Error, Result};
use crate::ingest::{labeled_windows, ReaderLog};

/// How phase mean and variance are computed over a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseStats {
    /// Circular mean and `2·(1 − R̄)` spread; correct across the 0/2π seam.
    #[default]
    Circular,
    /// Arithmetic mean and sample variance of the raw angles.
    Naive,
}

pub fn single_point_features(read: &TagRead) -> FeatureVector {
    FeatureVector::new_unchecked(FeatureMode::SinglePoint, vec![read.rssi_dbm, read.phase_rad])
}

fn mean_and_sample_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let ss: f64 = xs.map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Circular mean in `[0, 2π)` and the variance proxy `2·(1 − R̄)`.
pub fn circular_stats(phases: &[f64]) -> (f64, f64) {
    let (s, c) = phases
        .iter()
        .fold((0.0, 0.0), |(s, c), p| (s + p.sin(), c + p.cos()));
    let r_bar = s.hypot(c) / phases.len() as f64;
    (wrap_phase(s.atan2(c)), (2.0 * (1.0 - r_bar)).max(0.0))
}

/// `[rssi_mean, rssi_var, phase_mean, phase_var]` with circular phase statistics.
pub fn window_features(w: &ReadWindow) -> Result<FeatureVector> {
    window_features_with(w, PhaseStats::Circular)
}

pub fn window_features_with(w: &ReadWindow, phase_stats: PhaseStats) -> Result<FeatureVector> {
    if w.len() < 2 {
        return Err(Error::domain(format!(
            "window features need at least 2 reads, got {}",
            w.len()
        )));
    }
    let (rssi_mean, rssi_var) = mean_and_sample_var(w.reads().iter().map(|r| r.rssi_dbm));
    let (phase_mean, phase_var) = match phase_stats {
        PhaseStats::Circular => {
            let phases: Vec<f64> = w.reads().iter().map(|r| r.phase_rad).collect();
            circular_stats(&phases)
        }
        PhaseStats::Naive => mean_and_sample_var(w.reads().iter().map(|r| r.phase_rad)),
    };
    FeatureVector::new(
        FeatureMode::WindowStats,
        vec![rssi_mean, rssi_var, phase_mean, phase_var],
    )
}

/// Appends the tag-to-reader distance to a window feature vector.
pub fn with_distance(f: &FeatureVector, d: f64) -> Result<FeatureVector> {
    if f.mode() != FeatureMode::WindowStats {
        return Err(Error::domain(format!(
            "distance can only extend window stats, not {:?}",
            f.mode()
        )));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::domain(format!("distance {d} m must be positive")));
    }
    let mut values = f.values().to_vec();
    values.push(d);
    FeatureVector::new(FeatureMode::WindowStatsDist, values)
}

/// Options for turning a labeled reader log into samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOptions {
    pub window_ms: i64,
    pub min_reads: usize,
    pub phase_stats: PhaseStats,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            window_ms: 1000,
            min_reads: 2,
            phase_stats: PhaseStats::Circular,
        }
    }
}

/// Builds labeled samples from every tag in the log.
///
/// Every contributing read must carry a label; window-dist mode also needs
/// a distance on every read.
pub fn extract_samples(log: &ReaderLog, mode: FeatureMode, opts: &ExtractOptions) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    if mode == FeatureMode::SinglePoint {
        for e in &log.entries {
            let label = e.label.ok_or_else(|| {
                Error::domain(format!("read of {} at {} ms has no label", e.read.tag_id, e.read.timestamp_ms))
            })?;
            out.push(LabeledSample::new(single_point_features(&e.read), label));
        }
        return Ok(out);
    }
    if opts.min_reads < 2 {
        return Err(Error::domain("window modes need min_reads >= 2"));
    }
    for tag in log.tag_ids() {
        for (w, label) in labeled_windows(log, tag, opts.window_ms, opts.min_reads)? {
            let label = label.ok_or_else(|| {
                Error::domain(format!("window at {} ms for tag {tag} has no label", w.start_ms()))
            })?;
            let f = window_features_with(&w, opts.phase_stats)?;
            let f = match mode {
                FeatureMode::WindowStatsDist => {
                    let d = w.mean_distance().ok_or_else(|| {
                        Error::domain(format!(
                            "window at {} ms for tag {tag} lacks distance values",
                            w.start_ms()
                        ))
                    })?;
                    with_distance(&f, d)?
                }
                _ => f,
            };
            out.push(LabeledSample::new(f, label));
        }
    }
    Ok(out)
}

/// Per-feature mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mode: FeatureMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationParams {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self> {
        let features: Vec<&FeatureVector> = features.into_iter().collect();
        if features.len() < 2 {
            return Err(Error::domain("standardization needs at least 2 samples"));
        }
        let mode = features[0].mode();
        if features.iter().any(|f| f.mode() != mode) {
            return Err(Error::domain("standardization input mixes feature modes"));
        }
        let n = features.len() as f64;
        let dim = mode.dim();
        let mut mean = vec![0.0; dim];
        for f in &features {
            for (m, v) in mean.iter_mut().zip(f.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; dim];
        for f in &features {
            for ((s, v), m) in std.iter_mut().zip(f.values()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (i, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                return Err(Error::domain(format!(
                    "feature '{}' has zero variance",
                    mode.column_names()[i]
                )));
            }
        }
        Ok(StandardizationParams { mode, mean, std })
    }

    pub fn apply(&self, f: &FeatureVector) -> Result<FeatureVector> {
        if f.mode() != self.mode {
            return Err(Error::domain(format!(
                "standardization fitted for {:?}, got {:?}",
                self.mode,
                f.mode()
            )));
        }
        Ok(FeatureVector::new_unchecked(self.mode, self.apply_values(f.values())))
    }

    pub(crate) fn apply_values(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

pub fn fit_standardization(samples: &[LabeledSample]) -> Result<StandardizationParams> {
    StandardizationParams::fit(samples.iter().map(|s| &s.features))
}

pub fn apply_standardization(params: &StandardizationParams, f: &FeatureVector) -> Result<FeatureVector> {
    params.apply(f)
}

/// Writes samples as feature CSV: the mode's columns, then an integer `label`.
pub fn write_feature_csv<W: Write>(samples: &[LabeledSample], mode: FeatureMode, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = mode.column_names().to_vec();
    header.push("label");
    w.write_record(&header)?;
    for s in samples {
        if s.features.mode() != mode {
            return Err(Error::domain("sample mode differs from file mode"));
        }
        let mut row: Vec<String> = s.features.values().iter().map(f64::to_string).collect();
        row.push(s.label.index().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature CSV; the mode is inferred from the header.
pub fn read_feature_csv<R: Read>(input: R) -> Result<(FeatureMode, Vec<LabeledSample>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mode = [
        FeatureMode::SinglePoint,
        FeatureMode::WindowStats,
        FeatureMode::WindowStatsDist,
    ]
    .into_iter()
    .find(|m| {
        let mut cols: Vec<&str> = m.column_names().to_vec();
        cols.push("label");
        cols == header
    })
    .ok_or_else(|| Error::parse(1, format!("unrecognized feature header '{}'", header.join(","))))?;

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let dim = mode.dim();
        let mut values = Vec::with_capacity(dim);
        for i in 0..dim {
            values.push(
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("bad value '{}' in {}", &rec[i], header[i])))?,
            );
        }
        let label: usize = rec[dim]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, format!("bad label '{}'", &rec[dim])))?;
        let label = MaterialClass::from_index(label).map_err(|e| Error::parse(line, e.to_string()))?;
        let f = FeatureVector::new(mode, values).map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(LabeledSample::new(f, label));
    }
    Ok((mode, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn window(rssi: &[f64], phase: &[f64]) -> ReadWindow {
        let reads = rssi
            .iter()
            .zip(phase)
            .enumerate()
            .map(|(i, (&r, &p))| TagRead::new(i as i64 * 50, "AA01", 1, r, p, Some(2.0)).unwrap())
            .collect();
        ReadWindow::new(reads, 0, 1000).unwrap()
    }

    fn circ_dist(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d)
    }

    #[test]
    fn single_point_is_identity() {
        let r = TagRead::new(0, "AA", 1, -60.0, 1.0, None).unwrap();
        assert_eq!(single_point_features(&r).values(), &[-60.0, 1.0]);
        let r = TagRead::new(0, "AA", 1, -84.0, 0.0, None).unwrap();
        let f = single_point_features(&r);
        assert_eq!(f.values(), &[-84.0, 0.0]);
        assert_eq!(f.mode(), FeatureMode::SinglePoint);
    }

    #[test]
    fn rssi_moments() {
        let w = window(&[-60.0, -61.0, -62.0, -63.0, -64.0], &[1.0; 5]);
        let f = window_features(&w).unwrap();
        assert!((f.values()[0] + 62.0).abs() < 1e-12);
        assert!((f.values()[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn circular_mean_across_seam() {
        let w = window(&[-60.0, -60.0], &[0.1, TAU - 0.1]);
        let f = window_features(&w).unwrap();
        assert!(circ_dist(f.values()[2], 0.0) < 1e-9, "{}", f.values()[2]);
        let naive = window_features_with(&w, PhaseStats::Naive).unwrap();
        assert!((naive.values()[2] - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn degenerate_window() {
        let w = window(&[-70.0; 4], &[2.0; 4]);
        let f = window_features(&w).unwrap();
        assert_eq!(f.values()[0], -70.0);
        assert_eq!(f.values()[1], 0.0);
        assert!((f.values()[2] - 2.0).abs() < 1e-12);
        assert!(f.values()[3].abs() < 1e-12);
    }

    #[test]
    fn too_few_reads() {
        let w = window(&[-70.0], &[2.0]);
        assert!(window_features(&w).is_err());
    }

    #[test]
    fn distance_append() {
        let f = FeatureVector::new(FeatureMode::WindowStats, vec![-62.0, 2.5, 1.0, 0.01]).unwrap();
        let g = with_distance(&f, 2.0).unwrap();
        assert_eq!(g.values(), &[-62.0, 2.5, 1.0, 0.01, 2.0]);
        assert_eq!(g.mode(), FeatureMode::WindowStatsDist);
        for d in [0.3, 1.0, 2.0] {
            assert_eq!(with_distance(&f, d).unwrap().values()[4], d);
        }
        assert!(with_distance(&f, 0.0).is_err());
        let sp = FeatureVector::new(FeatureMode::SinglePoint, vec![-62.0, 1.0]).unwrap();
        assert!(with_distance(&sp, 1.0).is_err());
    }

    fn sample(vals: &[f64]) -> LabeledSample {
        LabeledSample::new(
            FeatureVector::new(FeatureMode::SinglePoint, vals.to_vec()).unwrap(),
            MaterialClass::Control,
        )
    }

    #[test]
    fn standardization_zero_mean_unit_std_on_train() {
        let train: Vec<LabeledSample> = (0..50)
            .map(|i| sample(&[-60.0 - (i as f64 * 0.37).sin() * 4.0, (i as f64 * 0.11) % 6.0]))
            .collect();
        let p = fit_standardization(&train).unwrap();
        let z: Vec<FeatureVector> = train.iter().map(|s| p.apply(&s.features).unwrap()).collect();
        for j in 0..2 {
            let m = z.iter().map(|f| f.values()[j]).sum::<f64>() / 50.0;
            let v = z.iter().map(|f| (f.values()[j] - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-9);
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
        let test = sample(&[-50.0, 5.5]);
        let zt = apply_standardization(&p, &test.features).unwrap();
        assert!(zt.values()[0].abs() > 0.1);
    }

    #[test]
    fn standardization_rejects_constant_column() {
        let train = vec![sample(&[-60.0, 1.0]), sample(&[-61.0, 1.0]), sample(&[-62.0, 1.0])];
        let err = fit_standardization(&train).unwrap_err();
        assert!(err.to_string().contains("phase_mean"), "{err}");
        assert!(fit_standardization(&train[..1]).is_err());
    }

    #[test]
    fn feature_csv_round_trip() {
        let samples = vec![
            LabeledSample::new(
                FeatureVector::new(FeatureMode::WindowStatsDist, vec![-62.0, 2.5, 1.0, 0.01, 0.3]).unwrap(),
                MaterialClass::Backpack,
            ),
            LabeledSample::new(
                FeatureVector::new(FeatureMode::WindowStatsDist, vec![-61.123456789, 0.1, 6.2, 0.0, 2.0]).unwrap(),
                MaterialClass::Control,
            ),
        ];
        let mut buf = Vec::new();
        write_feature_csv(&samples, FeatureMode::WindowStatsDist, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("rssi_mean,rssi_var,phase_mean,phase_var,distance_m,label\n"));
        let (mode, back) = read_feature_csv(buf.as_slice()).unwrap();
        assert_eq!(mode, FeatureMode::WindowStatsDist);
        assert_eq!(back, samples);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn permutation_invariant(
                pts in proptest::collection::vec((-90.0f64..-40.0, 0.0f64..TAU), 2..12),
                rot in 0usize..12,
            ) {
                let rssi: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let phase: Vec<f64> = pts.iter().map(|p| p.1).collect();
                let a = window_features(&window(&rssi, &phase)).unwrap();
                let k = rot % rssi.len();
                let mut r2 = rssi.clone();
                let mut p2 = phase.clone();
                r2.rotate_left(k);
                p2.rotate_left(k);
                r2.reverse();
                p2.reverse();
                let b = window_features(&window(&r2, &p2)).unwrap();
                prop_assert!((a.values()[0] - b.values()[0]).abs() < 1e-9);
                prop_assert!((a.values()[1] - b.values()[1]).abs() < 1e-9);
                prop_assert!((a.values()[3] - b.values()[3]).abs() < 1e-9);
                // an undefined direction (R̄ ≈ 0) has no stable mean to compare
                if a.values()[3] < 1.99 {
                    prop_assert!(circ_dist(a.values()[2], b.values()[2]) < 1e-6);
                }
            }

            #[test]
            fn clustered_phase_mean_recovers_center(
                center in 0.0f64..TAU,
                offsets in proptest::collection::vec(-0.1f64..0.1, 2..10),
            ) {
                let mut offsets = offsets;
                let m = offsets.iter().sum::<f64>() / offsets.len() as f64;
                offsets.iter_mut().for_each(|o| *o -= m);
                let phase: Vec<f64> = offsets.iter().map(|o| wrap_phase(center + o)).collect();
                let f = window_features(&window(&vec![-60.0; phase.len()], &phase)).unwrap();
                prop_assert!(circ_dist(f.values()[2], center) < 0.01);
            }

            #[test]
            fn small_spread_variance_matches_linear(
                center in 0.0f64..TAU,
                offsets in proptest::collection::vec(-0.1f64..0.1, 3..10),
            ) {
                // brute force: population variance of the unwrapped offsets
                let n = offsets.len() as f64;
                let m = offsets.iter().sum::<f64>() / n;
                let lin = offsets.iter().map(|o| (o - m).powi(2)).sum::<f64>() / n;
                prop_assume!(lin > 1e-8);
                let phase: Vec<f64> = offsets.iter().map(|o| wrap_phase(center + o)).collect();
                let f = window_features(&window(&vec![-60.0; phase.len()], &phase)).unwrap();
                prop_assert!((f.values()[3] - lin).abs() <= 0.1 * lin, "{} vs {}", f.values()[3], lin);
            }

            #[test]
            fn distance_preserves_prefix(
                v in proptest::collection::vec(0.0f64..10.0, 4),
                d in 0.01f64..5.0,
            ) {
                let f = FeatureVector::new(FeatureMode::WindowStats, v.clone()).unwrap();
                let g = with_distance(&f, d).unwrap();
                prop_assert_eq!(&g.values()[..4], &v[..]);
            }
        }
    }
}
