//! Streaming choke-point monitor.
//!
//! Reads arrive one at a time; each tag gets its own sliding window. A tag
//! raises an alert once enough consecutive windows are classified as a
//! suspicious container with high confidence, then stays quiet for the
//! cooldown period.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{FeatureMode, FeatureVector, MaterialClass, ReadWindow, TagRead};
use crate::error::{read_file, Error, Result};
use crate::features::{window_features_with, with_distance, PhaseStats};
use crate::mlp::Model;

/// Anything that can label a window feature vector.
pub trait WindowClassifier {
    fn classes(&self) -> &[MaterialClass];
    fn feature_mode(&self) -> FeatureMode;
    fn phase_stats(&self) -> PhaseStats {
        PhaseStats::Circular
    }
    /// Predicted class and its confidence in [0, 1].
    fn classify_window(&self, features: &FeatureVector) -> Result<(MaterialClass, f64)>;
}

impl WindowClassifier for Model {
    fn classes(&self) -> &[MaterialClass] {
        &self.classes
    }

    fn feature_mode(&self) -> FeatureMode {
        self.feature_mode
    }

    fn phase_stats(&self) -> PhaseStats {
        self.phase_stats
    }

    fn classify_window(&self, features: &FeatureVector) -> Result<(MaterialClass, f64)> {
        let (class, confidence, _) = self.classify(features)?;
        Ok((class, confidence))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskPolicy {
    pub suspicious: Vec<MaterialClass>,
    pub min_confidence: f64,
    /// Qualifying windows in a row needed before an alert.
    pub consecutive: usize,
    /// Quiet period per tag after an alert.
    pub cooldown_ms: i64,
}

impl Default for RiskPolicy {
    fn default() -> Self {
        RiskPolicy {
            suspicious: vec![MaterialClass::Backpack, MaterialClass::JacketPocket],
            min_confidence: 0.8,
            consecutive: 2,
            cooldown_ms: 10_000,
        }
    }
}

impl RiskPolicy {
    pub fn validate(&self, classes: &[MaterialClass]) -> Result<()> {
        if !(self.min_confidence > 0.0 && self.min_confidence <= 1.0) {
            return Err(Error::Config(format!(
                "min_confidence {} must be in (0, 1]",
                self.min_confidence
            )));
        }
        if self.consecutive == 0 {
            return Err(Error::Config("consecutive must be at least 1".into()));
        }
        if self.cooldown_ms < 0 {
            return Err(Error::Config("cooldown_ms must be non-negative".into()));
        }
        if let Some(c) = self.suspicious.iter().find(|c| !classes.contains(c)) {
            return Err(Error::Config(format!(
                "suspicious class {c} is not one the model predicts"
            )));
        }
        Ok(())
    }

    fn qualifies(&self, class: MaterialClass, confidence: f64) -> bool {
        self.suspicious.contains(&class) && confidence >= self.min_confidence
    }
}

/// Policy plus windowing settings; the `--policy` file of the monitor CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    #[serde(flatten)]
    pub policy: RiskPolicy,
    pub window_ms: i64,
    pub slide_ms: i64,
    pub min_reads: usize,
    /// Fixed reader distance at the choke point; needed by distance models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choke_point_distance_m: Option<f64>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            policy: RiskPolicy::default(),
            window_ms: 1000,
            slide_ms: 200,
            min_reads: 2,
            choke_point_distance_m: None,
        }
    }
}

impl MonitorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?)
    }

    pub fn validate(&self, classifier: &impl WindowClassifier) -> Result<()> {
        self.policy.validate(classifier.classes())?;
        if self.window_ms <= 0 || self.slide_ms <= 0 || self.slide_ms > self.window_ms {
            return Err(Error::Config(format!(
                "need 0 < slide ({}) <= window ({})",
                self.slide_ms, self.window_ms
            )));
        }
        if self.min_reads < 2 {
            return Err(Error::Config("min_reads must be at least 2".into()));
        }
        match (classifier.feature_mode(), self.choke_point_distance_m) {
            (FeatureMode::SinglePoint, _) => Err(Error::Config(
                "the monitor needs a window-feature model, not a single-point one".into(),
            )),
            (FeatureMode::WindowStatsDist, None) => Err(Error::Config(
                "a distance model needs choke_point_distance_m".into(),
            )),
            (_, Some(d)) if !(d > 0.0 && d.is_finite()) => {
                Err(Error::Config(format!("choke point distance {d} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    /// Increases by one per event across the whole monitor, starting at 1.
    pub seq: u64,
    /// End of the triggering window, i.e. when the decision became possible.
    pub timestamp_ms: i64,
    pub tag_id: String,
    pub class: MaterialClass,
    pub confidence: f64,
    pub window_start_ms: i64,
    pub window_end_ms: i64,
    /// First read of the first window in the qualifying streak.
    pub streak_first_read_ms: i64,
}

impl AlertEvent {
    pub fn latency_ms(&self) -> i64 {
        self.timestamp_ms - self.streak_first_read_ms
    }
}

pub const EVENTS_HEADER: &str = "seq,timestamp_ms,tag_id,class,confidence";

pub fn write_events_header<W: Write>(out: &mut W) -> Result<()> {
    writeln!(out, "{EVENTS_HEADER}")?;
    Ok(())
}

pub fn write_event<W: Write>(out: &mut W, e: &AlertEvent) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{},{}",
        e.seq,
        e.timestamp_ms,
        e.tag_id,
        e.class.name(),
        e.confidence
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MonitorMetrics {
    pub reads_seen: u64,
    pub windows_evaluated: u64,
    pub events_emitted: u64,
    pub reads_dropped: u64,
}

#[derive(Debug)]
struct TagState {
    buffer: VecDeque<TagRead>,
    next_start: i64,
    last_ts: i64,
    streak: usize,
    streak_first_read_ms: i64,
    quiet_until: Option<i64>,
}

pub struct Monitor<C> {
    classifier: C,
    config: MonitorConfig,
    tags: BTreeMap<String, TagState>,
    metrics: MonitorMetrics,
    next_seq: u64,
}

impl<C: WindowClassifier> Monitor<C> {
    pub fn new(classifier: C, config: MonitorConfig) -> Result<Self> {
        config.validate(&classifier)?;
        Ok(Monitor {
            classifier,
            config,
            tags: BTreeMap::new(),
            metrics: MonitorMetrics::default(),
            next_seq: 1,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    /// Feeds one read. Windows that the read closes are classified, and any
    /// alerts they trigger are returned.
    ///
    /// Invalid reads and reads older than the tag's latest read are dropped
    /// and counted rather than reported as errors.
    pub fn process_read(&mut self, read: TagRead) -> Result<Vec<AlertEvent>> {
        self.metrics.reads_seen += 1;
        if read.validate().is_err() {
            self.metrics.reads_dropped += 1;
            return Ok(Vec::new());
        }
        let t = read.timestamp_ms;
        let tag_id = read.tag_id.clone();
        let state = self.tags.entry(tag_id.clone()).or_insert_with(|| TagState {
            buffer: VecDeque::new(),
            next_start: t,
            last_ts: t,
            streak: 0,
            streak_first_read_ms: t,
            quiet_until: None,
        });
        if t < state.last_ts || t < state.next_start {
            self.metrics.reads_dropped += 1;
            return Ok(Vec::new());
        }
        let mut events = Vec::new();
        self.close_windows(&tag_id, t, &mut events)?;
        let state = self.tags.get_mut(&tag_id).expect("tag state exists");
        state.last_ts = t;
        state.buffer.push_back(read);
        Ok(events)
    }

    /// Evaluates every window still open for every tag, as if the stream
    /// had ended. Tags are visited in id order.
    pub fn flush(&mut self) -> Result<Vec<AlertEvent>> {
        let mut events = Vec::new();
        let ids: Vec<String> = self.tags.keys().cloned().collect();
        for id in ids {
            let last = self.tags[&id].last_ts;
            // Closes every window that starts at or before the last read.
            self.close_windows(&id, last + self.config.window_ms, &mut events)?;
            self.tags.remove(&id);
        }
        Ok(events)
    }

    pub fn drain_metrics(&self) -> MonitorMetrics {
        self.metrics
    }

    /// Classifies each window of `tag` that ends at or before `now`.
    fn close_windows(&mut self, tag: &str, now: i64, events: &mut Vec<AlertEvent>) -> Result<()> {
        let (window, slide) = (self.config.window_ms, self.config.slide_ms);
        loop {
            let state = self.tags.get_mut(tag).expect("tag state exists");
            let start = state.next_start;
            if start + window > now {
                return Ok(());
            }
            while state.buffer.front().is_some_and(|r| r.timestamp_ms < start) {
                state.buffer.pop_front();
            }
            if state.buffer.is_empty() {
                // Nothing buffered: every window up to `now` is empty.
                state.streak = 0;
                let steps = (now - window - start) / slide + 1;
                state.next_start = start + steps * slide;
                return Ok(());
            }
            let reads: Vec<TagRead> = state
                .buffer
                .iter()
                .take_while(|r| r.timestamp_ms < start + window)
                .cloned()
                .collect();
            state.next_start = start + slide;
            if let Some(e) = self.evaluate(tag, reads, start)? {
                events.push(e);
            }
        }
    }

    fn evaluate(&mut self, tag: &str, reads: Vec<TagRead>, start: i64) -> Result<Option<AlertEvent>> {
        let end = start + self.config.window_ms;
        let state = self.tags.get_mut(tag).expect("tag state exists");
        if reads.len() < self.config.min_reads {
            state.streak = 0;
            return Ok(None);
        }
        let first_read = reads[0].timestamp_ms;
        let w = ReadWindow::new(reads, start, end)?;
        let mut features = window_features_with(&w, self.classifier.phase_stats())?;
        if self.classifier.feature_mode() == FeatureMode::WindowStatsDist {
            let d = self.config.choke_point_distance_m.expect("validated");
            features = with_distance(&features, d)?;
        }
        let (class, confidence) = self.classifier.classify_window(&features)?;
        self.metrics.windows_evaluated += 1;
        let quiet = state.quiet_until.is_some_and(|q| end < q);
        if quiet || !self.config.policy.qualifies(class, confidence) {
            state.streak = 0;
            return Ok(None);
        }
        if state.streak == 0 {
            state.streak_first_read_ms = first_read;
        }
        state.streak += 1;
        if state.streak < self.config.policy.consecutive {
            return Ok(None);
        }
        state.streak = 0;
        state.quiet_until = Some(end + self.config.policy.cooldown_ms);
        let event = AlertEvent {
            seq: self.next_seq,
            timestamp_ms: end,
            tag_id: tag.to_string(),
            class,
            confidence,
            window_start_ms: start,
            window_end_ms: end,
            streak_first_read_ms: state.streak_first_read_ms,
        };
        self.next_seq += 1;
        self.metrics.events_emitted += 1;
        Ok(Some(event))
    }
}

/// Runs a whole read sequence through a fresh monitor, flushing at the end.
pub fn replay<C: WindowClassifier>(
    classifier: C,
    config: MonitorConfig,
    reads: impl IntoIterator<Item = TagRead>,
) -> Result<(Vec<AlertEvent>, MonitorMetrics)> {
    let mut monitor = Monitor::new(classifier, config)?;
    let mut events = Vec::new();
    for r in reads {
        events.extend(monitor.process_read(r)?);
    }
    events.extend(monitor.flush()?);
    Ok((events, monitor.drain_metrics()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Labels a window Backpack when its mean RSSI is below -60 dBm.
    struct Threshold;

    impl WindowClassifier for Threshold {
        fn classes(&self) -> &[MaterialClass] {
            &[MaterialClass::Control, MaterialClass::Backpack]
        }
        fn feature_mode(&self) -> FeatureMode {
            FeatureMode::WindowStats
        }
        fn classify_window(&self, f: &FeatureVector) -> Result<(MaterialClass, f64)> {
            if f.values()[0] < -60.0 {
                Ok((MaterialClass::Backpack, 0.95))
            } else {
                Ok((MaterialClass::Control, 0.95))
            }
        }
    }

    fn read(t: i64, rssi: f64) -> TagRead {
        TagRead::new(t, "E200AA", 1, rssi, 1.0, None).unwrap()
    }

    fn stream(ts: impl IntoIterator<Item = i64>, rssi: impl Fn(i64) -> f64) -> Vec<TagRead> {
        ts.into_iter().map(|t| read(t, rssi(t))).collect()
    }

    fn no_cooldown() -> MonitorConfig {
        MonitorConfig {
            policy: RiskPolicy {
                suspicious: vec![MaterialClass::Backpack],
                cooldown_ms: 0,
                ..RiskPolicy::default()
            },
            ..MonitorConfig::default()
        }
    }

    #[test]
    fn fresh_monitor_has_zero_metrics() {
        let m = Monitor::new(Threshold, MonitorConfig::default().with_suspicious(vec![MaterialClass::Backpack])).unwrap();
        assert_eq!(m.drain_metrics(), MonitorMetrics::default());
    }

    #[test]
    fn counts_reads_seen() {
        let reads = stream((0..37).map(|i| i * 100), |_| -50.0);
        let (_, m) = replay(Threshold, no_cooldown(), reads).unwrap();
        assert_eq!(m.reads_seen, 37);
        assert_eq!(m.reads_dropped, 0);
        assert!(m.events_emitted <= m.windows_evaluated);
    }

    #[test]
    fn suspicious_stream_alerts_after_two_windows() {
        let reads = stream((0..50).map(|i| i * 100), |_| -70.0);
        let mut m = Monitor::new(Threshold, no_cooldown()).unwrap();
        let mut events = Vec::new();
        for r in reads {
            events.extend(m.process_read(r).unwrap());
        }
        // Window [0,1000) closes at 1000, [200,1200) at 1200.
        assert_eq!(events[0].timestamp_ms, 1200);
        assert_eq!(events[0].window_start_ms, 200);
        assert_eq!(events[0].latency_ms(), 1200);
        assert!(events[0].latency_ms() <= 2 * 200 + 1000);
        assert!(events.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn alternating_windows_never_alert() {
        // Each 200 ms slot is suspicious or clean in turn; a window's mean
        // follows the slot it ends in, which alternates.
        let rssi = |t: i64| {
            let slot = (t / 200) % 2;
            if slot == 0 { -20.0 } else { -100.0 }
        };
        let reads = stream((0..300).map(|i| i * 40), rssi);
        let (events, m) = replay(Threshold, no_cooldown(), reads).unwrap();
        assert!(m.windows_evaluated > 50);
        assert!(events.is_empty(), "{events:?}");
    }

    #[test]
    fn cooldown_spaces_events() {
        let mut cfg = no_cooldown();
        cfg.policy.cooldown_ms = 3000;
        let reads = stream((0..200).map(|i| i * 100), |_| -70.0);
        let (events, _) = replay(Threshold, cfg, reads).unwrap();
        assert!(events.len() >= 3);
        for w in events.windows(2) {
            assert!(w[1].timestamp_ms - w[0].timestamp_ms >= 3000);
        }
    }

    #[test]
    fn stale_reads_are_dropped() {
        let mut m = Monitor::new(Threshold, no_cooldown()).unwrap();
        for t in [0, 100, 1500] {
            m.process_read(read(t, -50.0)).unwrap();
        }
        m.process_read(read(1400, -50.0)).unwrap();
        m.process_read(read(200, -50.0)).unwrap();
        let bad = TagRead {
            phase_rad: 9.0,
            ..read(1600, -50.0)
        };
        m.process_read(bad).unwrap();
        let metrics = m.drain_metrics();
        assert_eq!(metrics.reads_seen, 6);
        assert_eq!(metrics.reads_dropped, 3);
    }

    #[test]
    fn gaps_skip_empty_windows() {
        let reads = stream([0, 100, 200, 60_000, 60_100, 60_200], |_| -50.0);
        let (_, m) = replay(Threshold, no_cooldown(), reads).unwrap();
        // Only windows with at least two reads are classified.
        assert!(m.windows_evaluated <= 10, "{m:?}");
    }

    #[test]
    fn rejects_policy_outside_model_classes() {
        assert!(Monitor::new(Threshold, MonitorConfig::default()).is_err());
        let mut cfg = no_cooldown();
        cfg.policy.consecutive = 0;
        assert!(Monitor::new(Threshold, cfg).is_err());
        let mut cfg = no_cooldown();
        cfg.slide_ms = 2000;
        assert!(Monitor::new(Threshold, cfg).is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = MonitorConfig {
            choke_point_distance_m: Some(1.0),
            ..MonitorConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(MonitorConfig::from_toml(&text).unwrap(), cfg);
        let partial = MonitorConfig::from_toml("min_confidence = 0.9\n").unwrap();
        assert_eq!(partial.policy.min_confidence, 0.9);
        assert_eq!(partial.policy.consecutive, 2);
        assert_eq!(partial.slide_ms, 200);
    }

    #[test]
    fn events_csv_layout() {
        let e = AlertEvent {
            seq: 1,
            timestamp_ms: 1200,
            tag_id: "E200AA".into(),
            class: MaterialClass::Backpack,
            confidence: 0.5,
            window_start_ms: 200,
            window_end_ms: 1200,
            streak_first_read_ms: 0,
        };
        let mut out = Vec::new();
        write_events_header(&mut out).unwrap();
        write_event(&mut out, &e).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "seq,timestamp_ms,tag_id,class,confidence\n1,1200,E200AA,backpack,0.5\n"
        );
    }

    impl MonitorConfig {
        fn with_suspicious(mut self, s: Vec<MaterialClass>) -> Self {
            self.policy.suspicious = s;
            self
        }
    }

    proptest! {
        #[test]
        fn replay_is_deterministic_and_spaced(
            gaps in prop::collection::vec(1i64..400, 10..200),
            levels in prop::collection::vec(prop::bool::ANY, 10..200),
            cooldown in 0i64..5000,
        ) {
            let mut t = 0;
            let reads: Vec<TagRead> = gaps
                .iter()
                .zip(levels.iter().cycle())
                .map(|(g, hot)| {
                    t += g;
                    read(t, if *hot { -70.0 } else { -50.0 })
                })
                .collect();
            let mut cfg = no_cooldown();
            cfg.policy.cooldown_ms = cooldown;
            let (a, ma) = replay(Threshold, cfg.clone(), reads.clone()).unwrap();
            let (b, mb) = replay(Threshold, cfg.clone(), reads).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(ma, mb);
            prop_assert!(ma.events_emitted <= ma.windows_evaluated);
            for w in a.windows(2) {
                prop_assert!(w[0].seq < w[1].seq);
                prop_assert!(w[1].timestamp_ms - w[0].timestamp_ms >= cooldown);
            }
            for e in &a {
                prop_assert!(e.latency_ms() <= 2 * cfg.slide_ms + cfg.window_ms);
                prop_assert!(e.confidence >= cfg.policy.min_confidence);
            }
        }
    }
}
