//! Synthetic reader: log-distance path loss plus per-material attenuation,
//! scattering noise and dielectric phase shift.
//!
//! Every stochastic operation takes the random generator explicitly, so a
//! session is a pure function of its seed.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{wrap_phase, MaterialClass, TagRead, RSSI_MAX_DBM};
use crate::error::{read_file, Error, Result};

/// Channel parameters for one container class, relative to `Control`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialProfile {
    pub class: MaterialClass,
    /// Mean RSSI reduction in dB.
    pub rssi_atten_db: f64,
    /// Per-read RSSI standard deviation in dB.
    pub rssi_sigma_db: f64,
    /// Mean phase shift in radians.
    pub phase_offset_rad: f64,
    /// Per-read phase standard deviation in radians.
    pub phase_sigma_rad: f64,
}

impl MaterialProfile {
    pub fn new(
        class: MaterialClass,
        rssi_atten_db: f64,
        rssi_sigma_db: f64,
        phase_offset_rad: f64,
        phase_sigma_rad: f64,
    ) -> Result<Self> {
        let p = MaterialProfile {
            class,
            rssi_atten_db,
            rssi_sigma_db,
            phase_offset_rad,
            phase_sigma_rad,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rssi_atten_db,
            self.rssi_sigma_db,
            self.phase_offset_rad,
            self.phase_sigma_rad,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain(format!("{}: non-finite profile value", self.class)));
        }
        if self.rssi_atten_db < 0.0 {
            return Err(Error::domain(format!(
                "{}: rssi_atten_db must be >= 0",
                self.class
            )));
        }
        if self.rssi_sigma_db <= 0.0 || self.phase_sigma_rad <= 0.0 {
            return Err(Error::domain(format!(
                "{}: noise sigmas must be > 0",
                self.class
            )));
        }
        Ok(())
    }
}

/// Exactly one profile per material class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    profiles: [MaterialProfile; MaterialClass::COUNT],
}

const PROFILE_HEADER: [&str; 5] = [
    "class",
    "rssi_atten_db",
    "rssi_sigma_db",
    "phase_offset_rad",
    "phase_sigma_rad",
];

impl ProfileSet {
    pub fn from_profiles(profiles: impl IntoIterator<Item = MaterialProfile>) -> Result<Self> {
        let mut slots: [Option<MaterialProfile>; MaterialClass::COUNT] = [None; MaterialClass::COUNT];
        for p in profiles {
            p.validate()?;
            let slot = &mut slots[p.class.index()];
            if slot.is_some() {
                return Err(Error::domain(format!("duplicate profile for {}", p.class)));
            }
            *slot = Some(p);
        }
        let mut out = Vec::with_capacity(MaterialClass::COUNT);
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(p) => out.push(p),
                None => {
                    return Err(Error::domain(format!(
                        "missing profile for {}",
                        MaterialClass::ALL[i]
                    )))
                }
            }
        }
        Ok(ProfileSet {
            profiles: out.try_into().expect("seven profiles"),
        })
    }

    pub fn get(&self, class: MaterialClass) -> &MaterialProfile {
        &self.profiles[class.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &MaterialProfile> {
        self.profiles.iter()
    }

    /// Parses the profile CSV (`class,rssi_atten_db,rssi_sigma_db,phase_offset_rad,phase_sigma_rad`).
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != PROFILE_HEADER {
            return Err(Error::parse(1, format!("expected header {}", PROFILE_HEADER.join(","))));
        }
        let mut profiles = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let class: MaterialClass = rec[0].parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("bad number '{}' in {}", &rec[i], PROFILE_HEADER[i])))
            };
            let p = MaterialProfile::new(class, num(1)?, num(2)?, num(3)?, num(4)?)
                .map_err(|e| Error::parse(line, e.to_string()))?;
            profiles.push(p);
        }
        Self::from_profiles(profiles)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(read_file(path)?.as_bytes())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PROFILE_HEADER)?;
        for p in self.iter() {
            w.write_record([
                p.class.name().to_string(),
                p.rssi_atten_db.to_string(),
                p.rssi_sigma_db.to_string(),
                p.phase_offset_rad.to_string(),
                p.phase_sigma_rad.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bundled profiles.
///
/// Only the relative orderings are meaningful: thin materials attenuate
/// least, thick fabrics most, and multilayer containers (cardboard box,
/// backpack) scatter most. Fabric bag and backpack sit closest together.
pub fn default_profiles() -> ProfileSet {
    use MaterialClass::*;
    let rows = [
        (Control, 0.0, 1.0, 0.0, 0.10),
        (PlasticBox, 2.5, 1.1, 0.45, 0.12),
        (CardboardBox, 3.0, 2.6, 0.70, 0.30),
        (PlasticBag, 1.5, 1.1, 0.20, 0.11),
        (JacketPocket, 6.0, 1.6, 1.35, 0.18),
        (FabricBag, 9.0, 1.9, 1.70, 0.22),
        (Backpack, 10.0, 2.8, 1.90, 0.32),
    ];
    ProfileSet::from_profiles(rows.into_iter().map(|(c, a, rs, po, ps)| MaterialProfile {
        class: c,
        rssi_atten_db: a,
        rssi_sigma_db: rs,
        phase_offset_rad: po,
        phase_sigma_rad: ps,
    }))
    .expect("bundled profiles are valid")
}

/// Reader and propagation parameters shared by every class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// RSSI of an uncovered tag at the reference distance.
    pub rssi0_dbm: f64,
    pub d0_m: f64,
    pub path_loss_exponent: f64,
    pub read_rate_hz: f64,
    /// Receive sensitivity; weaker reads are lost.
    pub noise_floor_dbm: f64,
    pub wavelength_m: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            rssi0_dbm: -55.0,
            d0_m: 1.0,
            path_loss_exponent: 2.0,
            read_rate_hz: 5.0,
            noise_floor_dbm: -84.0,
            wavelength_m: 0.327,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.5..=4.0).contains(&self.path_loss_exponent) {
            return Err(Error::Config(format!(
                "path_loss_exponent {} outside [1.5, 4.0]",
                self.path_loss_exponent
            )));
        }
        if !(self.read_rate_hz > 0.0 && self.read_rate_hz.is_finite()) {
            return Err(Error::Config("read_rate_hz must be > 0".into()));
        }
        if !(self.d0_m > 0.0) {
            return Err(Error::Config("d0_m must be > 0".into()));
        }
        if !(self.wavelength_m > 0.0) {
            return Err(Error::Config("wavelength_m must be > 0".into()));
        }
        Ok(())
    }
}

fn check_distance(d: f64) -> Result<()> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("distance {d} m must be positive")))
    }
}

/// Log-distance path loss minus the material's attenuation.
pub fn expected_rssi(cfg: &ChannelConfig, profile: &MaterialProfile, d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(cfg.rssi0_dbm - 10.0 * cfg.path_loss_exponent * (d / cfg.d0_m).log10() - profile.rssi_atten_db)
}

/// Round-trip geometric phase plus the material's dielectric shift, in `[0, 2π)`.
pub fn expected_phase(cfg: &ChannelConfig, profile: &MaterialProfile, d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(wrap_phase(4.0 * PI * d / cfg.wavelength_m + profile.phase_offset_rad))
}

/// Outcome of one interrogation attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum ReadOutcome {
    Read(TagRead),
    /// The backscatter arrived below the receive sensitivity.
    Dropped,
}

/// Identifies the tag and timing of a simulated session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSpec {
    pub tag_id: String,
    pub antenna_port: u16,
    pub start_ms: i64,
    pub distance_m: f64,
    pub duration_s: f64,
}

/// Draws one read at distance `d` and time `t_ms`.
pub fn sample_read<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    profile: &MaterialProfile,
    d: f64,
    t_ms: i64,
    tag_id: &str,
    antenna_port: u16,
    rng: &mut R,
) -> Result<ReadOutcome> {
    let mean_rssi = expected_rssi(cfg, profile, d)?;
    let mean_phase = expected_phase(cfg, profile, d)?;
    let z_rssi: f64 = StandardNormal.sample(rng);
    let z_phase: f64 = StandardNormal.sample(rng);
    let rssi = mean_rssi + profile.rssi_sigma_db * z_rssi;
    if rssi < cfg.noise_floor_dbm {
        return Ok(ReadOutcome::Dropped);
    }
    let phase = wrap_phase(mean_phase + profile.phase_sigma_rad * z_phase);
    Ok(ReadOutcome::Read(TagRead {
        timestamp_ms: t_ms,
        tag_id: tag_id.to_string(),
        antenna_port,
        rssi_dbm: rssi.min(RSSI_MAX_DBM),
        phase_rad: phase,
        distance_m: Some(d),
    }))
}

/// Simulates a continuous interrogation session.
///
/// Inter-read gaps are exponential with mean `1 / read_rate_hz`, rounded to
/// whole milliseconds with a floor of 1 ms so timestamps strictly increase.
/// Dropped reads are omitted.
pub fn generate_session<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    profile: &MaterialProfile,
    session: &SessionSpec,
    rng: &mut R,
) -> Result<Vec<TagRead>> {
    cfg.validate()?;
    if !(session.duration_s > 0.0 && session.duration_s.is_finite()) {
        return Err(Error::domain(format!(
            "session duration {} s must be positive",
            session.duration_s
        )));
    }
    check_distance(session.distance_m)?;
    let gap = Exp::new(cfg.read_rate_hz).map_err(|e| Error::Config(e.to_string()))?;
    let end_ms = session.start_ms + (session.duration_s * 1000.0).round() as i64;
    let mut reads = Vec::with_capacity((session.duration_s * cfg.read_rate_hz * 1.2) as usize + 4);
    let mut t = session.start_ms;
    loop {
        let gap_s: f64 = gap.sample(rng);
        t += ((gap_s * 1000.0).round() as i64).max(1);
        if t >= end_ms {
            break;
        }
        if let ReadOutcome::Read(r) = sample_read(
            cfg,
            profile,
            session.distance_m,
            t,
            &session.tag_id,
            session.antenna_port,
            rng,
        )? {
            reads.push(r);
        }
    }
    Ok(reads)
}
