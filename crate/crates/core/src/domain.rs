//! Shared vocabulary: container classes, tag reads, windows and feature vectors.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest RSSI a read may carry, in dBm.
pub const RSSI_MIN_DBM: f64 = -120.0;
/// Highest RSSI a read may carry, in dBm.
pub const RSSI_MAX_DBM: f64 = 0.0;

/// The container surrounding a tagged item.
///
/// The discriminant is the stable class index used by one-hot encodings,
/// label columns and confusion matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialClass {
    Control = 0,
    PlasticBox = 1,
    CardboardBox = 2,
    PlasticBag = 3,
    JacketPocket = 4,
    FabricBag = 5,
    Backpack = 6,
}

impl MaterialClass {
    pub const COUNT: usize = 7;

    pub const ALL: [MaterialClass; 7] = [
        MaterialClass::Control,
        MaterialClass::PlasticBox,
        MaterialClass::CardboardBox,
        MaterialClass::PlasticBag,
        MaterialClass::JacketPocket,
        MaterialClass::FabricBag,
        MaterialClass::Backpack,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain(format!("material class index {i} out of range 0..7")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MaterialClass::Control => "control",
            MaterialClass::PlasticBox => "plastic_box",
            MaterialClass::CardboardBox => "cardboard_box",
            MaterialClass::PlasticBag => "plastic_bag",
            MaterialClass::JacketPocket => "jacket_pocket",
            MaterialClass::FabricBag => "fabric_bag",
            MaterialClass::Backpack => "backpack",
        }
    }
}

impl fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaterialClass {
    type Err = Error;

    /// Accepts the snake_case name, the CamelCase variant name, or the index.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Self::from_index(i);
        }
        let folded: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-' && *c != ' ')
            .flat_map(char::to_lowercase)
            .collect();
        Self::ALL
            .into_iter()
            .find(|c| c.name().replace('_', "") == folded)
            .ok_or_else(|| Error::domain(format!("unknown material class '{s}'")))
    }
}

/// Maps any finite angle into `[0, 2π)`.
pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// One reader interrogation of one tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRead {
    pub timestamp_ms: i64,
    pub tag_id: String,
    pub antenna_port: u16,
    pub rssi_dbm: f64,
    pub phase_rad: f64,
    pub distance_m: Option<f64>,
}

impl TagRead {
    /// Builds a read, rejecting values outside the physical ranges.
    pub fn new(
        timestamp_ms: i64,
        tag_id: impl Into<String>,
        antenna_port: u16,
        rssi_dbm: f64,
        phase_rad: f64,
        distance_m: Option<f64>,
    ) -> Result<Self> {
        let read = TagRead {
            timestamp_ms,
            tag_id: tag_id.into(),
            antenna_port,
            rssi_dbm,
            phase_rad,
            distance_m,
        };
        read.validate()?;
        Ok(read)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tag_id.is_empty() {
            return Err(Error::domain("empty tag id"));
        }
        if !(RSSI_MIN_DBM..=RSSI_MAX_DBM).contains(&self.rssi_dbm) {
            return Err(Error::domain(format!(
                "rssi {} dBm outside [{RSSI_MIN_DBM}, {RSSI_MAX_DBM}]",
                self.rssi_dbm
            )));
        }
        if !(0.0..TAU).contains(&self.phase_rad) {
            return Err(Error::domain(format!(
                "phase {} rad outside [0, 2π)",
                self.phase_rad
            )));
        }
        if let Some(d) = self.distance_m {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::domain(format!("distance {d} m must be positive")));
            }
        }
        Ok(())
    }
}

/// A run of reads from a single tag within `[window_start_ms, window_end_ms)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadWindow {
    reads: Vec<TagRead>,
    window_start_ms: i64,
    window_end_ms: i64,
}

impl ReadWindow {
    pub fn new(reads: Vec<TagRead>, window_start_ms: i64, window_end_ms: i64) -> Result<Self> {
        if window_end_ms <= window_start_ms {
            return Err(Error::domain("window end must follow window start"));
        }
        if let Some(first) = reads.first() {
            if reads.iter().any(|r| r.tag_id != first.tag_id) {
                return Err(Error::domain("window mixes reads from different tags"));
            }
        }
        if reads
            .windows(2)
            .any(|p| p[1].timestamp_ms < p[0].timestamp_ms)
        {
            return Err(Error::domain("window reads out of timestamp order"));
        }
        if reads
            .iter()
            .any(|r| r.timestamp_ms < window_start_ms || r.timestamp_ms >= window_end_ms)
        {
            return Err(Error::domain("read timestamp outside window bounds"));
        }
        Ok(ReadWindow {
            reads,
            window_start_ms,
            window_end_ms,
        })
    }

    pub fn reads(&self) -> &[TagRead] {
        &self.reads
    }

    pub fn len(&self) -> usize {
        self.reads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty()
    }

    pub fn start_ms(&self) -> i64 {
        self.window_start_ms
    }

    pub fn end_ms(&self) -> i64 {
        self.window_end_ms
    }

    pub fn tag_id(&self) -> Option<&str> {
        self.reads.first().map(|r| r.tag_id.as_str())
    }

    /// Mean of the reads' distances, if every read carries one.
    pub fn mean_distance(&self) -> Option<f64> {
        if self.reads.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for r in &self.reads {
            sum += r.distance_m?;
        }
        Some(sum / self.reads.len() as f64)
    }
}

/// Which feature layout a vector follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `[rssi, phase]` of a single read.
    SinglePoint,
    /// `[rssi_mean, rssi_var, phase_mean, phase_var]` over a window.
    WindowStats,
    /// `WindowStats` followed by the tag-to-reader distance.
    WindowStatsDist,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::SinglePoint => 2,
            FeatureMode::WindowStats => 4,
            FeatureMode::WindowStatsDist => 5,
        }
    }

    /// Column names used by the feature CSV format.
    pub fn column_names(self) -> &'static [&'static str] {
        match self {
            FeatureMode::SinglePoint => &["rssi_mean", "phase_mean"],
            FeatureMode::WindowStats => &["rssi_mean", "rssi_var", "phase_mean", "phase_var"],
            FeatureMode::WindowStatsDist => &[
                "rssi_mean",
                "rssi_var",
                "phase_mean",
                "phase_var",
                "distance_m",
            ],
        }
    }

    /// Positions holding variances, which must be non-negative.
    fn variance_slots(self) -> &'static [usize] {
        match self {
            FeatureMode::SinglePoint => &[],
            FeatureMode::WindowStats | FeatureMode::WindowStatsDist => &[1, 3],
        }
    }

    pub fn from_dim(dim: usize) -> Result<Self> {
        match dim {
            2 => Ok(FeatureMode::SinglePoint),
            4 => Ok(FeatureMode::WindowStats),
            5 => Ok(FeatureMode::WindowStatsDist),
            _ => Err(Error::domain(format!("no feature mode has {dim} components"))),
        }
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_point" => Ok(FeatureMode::SinglePoint),
            "window" | "window_stats" => Ok(FeatureMode::WindowStats),
            "window-dist" | "window_dist" | "window_stats_dist" => {
                Ok(FeatureMode::WindowStatsDist)
            }
            other => Err(Error::domain(format!("unknown feature mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    mode: FeatureMode,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(mode: FeatureMode, values: Vec<f64>) -> Result<Self> {
        if values.len() != mode.dim() {
            return Err(Error::domain(format!(
                "{mode:?} needs {} values, got {}",
                mode.dim(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature values must be finite"));
        }
        if mode.variance_slots().iter().any(|&i| values[i] < 0.0) {
            return Err(Error::domain("variance features must be non-negative"));
        }
        Ok(FeatureVector { mode, values })
    }

    /// Skips the variance check; used for standardized vectors, whose
    /// variance slots are centered and may be negative.
    pub(crate) fn new_unchecked(mode: FeatureMode, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), mode.dim());
        FeatureVector { mode, values }
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: FeatureVector,
    pub label: MaterialClass,
}

impl LabeledSample {
    pub fn new(features: FeatureVector, label: MaterialClass) -> Self {
        LabeledSample { features, label }
    }
}

/// Checks that every sample in a dataset shares one feature mode.
pub fn uniform_mode(samples: &[LabeledSample]) -> Result<Option<FeatureMode>> {
    let Some(first) = samples.first() else {
        return Ok(None);
    };
    let mode = first.features.mode();
    if samples.iter().any(|s| s.features.mode() != mode) {
        return Err(Error::domain("dataset mixes feature modes"));
    }
    Ok(Some(mode))
}
