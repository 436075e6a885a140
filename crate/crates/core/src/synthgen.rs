//! Controllable multi-subject, multi-activity, two-modality synthetic
//! benchmark.
//!
//! Each activity class has a distinct latent waveform template (a fixed bank
//! of band-limited periodic signals). Each subject has a frozen nuisance
//! transform — per-channel gain, DC offset, channel-triplet rotation and a
//! time-speed factor — whose deviation from identity scales with
//! `subject_nuisance_strength`. A session emits one 6-channel inertial window
//! and one 9-channel secondary window mixed from the same latent trajectory,
//! so the pair forms an aligned multimodal sample.
//!
//! Session content (a small circular time shift) is keyed by (activity,
//! session index) only, so with the nuisance at zero all subjects produce
//! byte-identical windows for a given activity and session.

use crate::bytes;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Domain};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

/// All generated windows have this many time steps.
pub const T_STEPS: usize = 100;
pub const INERTIAL_CHANNELS: usize = 6;
pub const SECONDARY_CHANNELS: usize = 9;

const LATENT_CHANNELS: usize = 3;
/// Components per latent channel: the class fundamental plus its octave.
const COMPONENTS: usize = 2;
/// Class fundamentals sit on a geometric ladder, in cycles per window.
const BASE_FREQ: f64 = 4.0;
const FREQ_RATIO: f64 = 1.32;
/// Per-session time shift, in samples, uniform in ±this.
const PHASE_JITTER: f64 = 1.0;
/// Nuisance spreads at strength 1: gain in 1±spread, offset in ±spread,
/// rotation angle up to the max, speed factor in 1±spread. The speed spread
/// stays below the class frequency spacing so no subject's tempo maps one
/// activity band onto its neighbor.
const GAIN_SPREAD: f64 = 0.6;
const OFFSET_SPREAD: f64 = 1.2;
const MAX_ROTATION: f64 = PI / 2.0;
const SPEED_SPREAD: f64 = 0.15;

const MAGIC: &[u8; 4] = b"SICL";
const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Inertial,
    Secondary,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Inertial => INERTIAL_CHANNELS,
            Modality::Secondary => SECONDARY_CHANNELS,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::Inertial => 0,
            Modality::Secondary => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Inertial),
            1 => Ok(Modality::Secondary),
            _ => Err(Error::format(format!("unknown modality code {code}"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Inertial => write!(f, "inertial"),
            Modality::Secondary => write!(f, "secondary"),
        }
    }
}

/// One fixed-length multichannel time-series window with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    /// Row-major `[channels, T_STEPS]`.
    pub values: Tensor,
    pub subject_id: u16,
    pub activity_id: u16,
    pub modality: Modality,
}

/// Parameters of the synthetic world.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub num_subjects: u16,
    pub num_activities: u16,
    /// Sessions generated per (subject, activity) pair.
    pub windows_per_pair: usize,
    /// 0 = all subjects identical, 1 = strongest nuisance transforms.
    pub subject_nuisance_strength: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_subjects: 12,
            num_activities: 6,
            windows_per_pair: 10,
            subject_nuisance_strength: 0.8,
            noise_sigma: 0.1,
            rng_seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects < 2 {
            return Err(Error::contract("world: num_subjects must be >= 2"));
        }
        if self.num_activities < 2 {
            return Err(Error::contract("world: num_activities must be >= 2"));
        }
        if self.windows_per_pair == 0 {
            return Err(Error::contract("world: windows_per_pair must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.subject_nuisance_strength) {
            return Err(Error::contract(
                "world: subject_nuisance_strength must be in [0,1]",
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::contract("world: noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn sessions(&self) -> usize {
        self.num_subjects as usize * self.num_activities as usize * self.windows_per_pair
    }
}

/// Band-limited template per activity class, on a small latent basis, plus
/// the fixed per-modality mixing matrices. Class `c` concentrates its energy
/// at the fundamental `BASE_FREQ * FREQ_RATIO^c` with a weaker octave, so
/// classes carry distinct spectral signatures.
struct TemplateBank {
    /// `[activity][latent][component]` frequency (cycles per window),
    /// amplitude and phase.
    freqs: Vec<[[f64; COMPONENTS]; LATENT_CHANNELS]>,
    amps: Vec<[[f64; COMPONENTS]; LATENT_CHANNELS]>,
    phases: Vec<[[f64; COMPONENTS]; LATENT_CHANNELS]>,
    mix_inertial: Vec<[f64; LATENT_CHANNELS]>,
    mix_secondary: Vec<[f64; LATENT_CHANNELS]>,
}

impl TemplateBank {
    fn draw(spec: &WorldSpec) -> Self {
        let mut rng = rng::stream(spec.rng_seed, Domain::Templates, 0);
        let mut freqs = Vec::new();
        let mut amps = Vec::new();
        let mut phases = Vec::new();
        for activity in 0..spec.num_activities {
            let fundamental = BASE_FREQ * FREQ_RATIO.powi(activity as i32);
            let mut f = [[0.0f64; COMPONENTS]; LATENT_CHANNELS];
            let mut a = [[0.0f64; COMPONENTS]; LATENT_CHANNELS];
            let mut p = [[0.0f64; COMPONENTS]; LATENT_CHANNELS];
            for l in 0..LATENT_CHANNELS {
                f[l][0] = fundamental * rng.gen_range(0.97..=1.03);
                f[l][1] = 2.0 * fundamental * rng.gen_range(0.97..=1.03);
                a[l][0] = rng.gen_range(0.7..=1.0);
                a[l][1] = rng.gen_range(0.2..=0.5);
                p[l][0] = rng.gen_range(0.0..TAU);
                p[l][1] = rng.gen_range(0.0..TAU);
                // unit RMS per latent channel
                let rms = ((a[l][0] * a[l][0] + a[l][1] * a[l][1]) / 2.0).sqrt();
                a[l][0] /= rms;
                a[l][1] /= rms;
            }
            freqs.push(f);
            amps.push(a);
            phases.push(p);
        }
        // fixed, well-conditioned mixing: each output channel is dominated
        // by one latent channel with mild bleed from the others, so every
        // latent stays recoverable from either modality in every world
        let mix = |channels: usize| -> Vec<[f64; LATENT_CHANNELS]> {
            (0..channels)
                .map(|c| {
                    let main = c % LATENT_CHANNELS;
                    let mut row = [0.0; LATENT_CHANNELS];
                    for (l, v) in row.iter_mut().enumerate() {
                        *v = if l == main {
                            1.0
                        } else if (l + c) % 2 == 0 {
                            0.35
                        } else {
                            -0.35
                        };
                    }
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.map(|v| v / norm)
                })
                .collect()
        };
        let mix_inertial = mix(INERTIAL_CHANNELS);
        let mix_secondary = mix(SECONDARY_CHANNELS);
        TemplateBank {
            freqs,
            amps,
            phases,
            mix_inertial,
            mix_secondary,
        }
    }

    /// Latent trajectory of `activity` evaluated at warped sample times
    /// `speed * (t + shift)`, with per-session execution variation applied
    /// to each latent channel; the template is an analytic function of
    /// continuous time, so warping needs no resampling.
    fn latent(
        &self,
        activity: usize,
        speed: f64,
        shift: f64,
        execution: &ExecutionVariation,
    ) -> [[f64; T_STEPS]; LATENT_CHANNELS] {
        let mut out = [[0.0; T_STEPS]; LATENT_CHANNELS];
        for (l, lane) in out.iter_mut().enumerate() {
            for (t, v) in lane.iter_mut().enumerate() {
                let tau = speed * (t as f64 + shift);
                let mut s = 0.0;
                for c in 0..COMPONENTS {
                    s += execution.amp[l]
                        * self.amps[activity][l][c]
                        * (TAU * self.freqs[activity][l][c] * tau / T_STEPS as f64
                            + self.phases[activity][l][c]
                            + execution.phase[l])
                            .sin();
                }
                *v = s;
            }
        }
        out
    }
}

/// How one session's execution deviates from the class template: relative
/// phase and amplitude of each latent channel. Drawn from the session
/// content stream (never the subject) and scaled by the nuisance strength,
/// so with the nuisance off every execution is the pure template.
struct ExecutionVariation {
    phase: [f64; LATENT_CHANNELS],
    amp: [f64; LATENT_CHANNELS],
}

impl ExecutionVariation {
    fn draw(rng: &mut impl Rng, strength: f64) -> Self {
        let mut phase = [0.0; LATENT_CHANNELS];
        let mut amp = [1.0; LATENT_CHANNELS];
        for l in 0..LATENT_CHANNELS {
            phase[l] = strength * rng.gen_range(-PI..=PI);
            amp[l] = 1.0 + strength * rng.gen_range(-0.3..=0.3);
        }
        ExecutionVariation { phase, amp }
    }
}

/// Frozen nuisance transform of one subject.
struct SubjectNuisance {
    gains: Vec<f64>,
    offsets: Vec<f64>,
    rot_inertial: [[f64; 3]; 3],
    rot_secondary: [[f64; 3]; 3],
    speed: f64,
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

impl SubjectNuisance {
    fn draw(spec: &WorldSpec, subject: u16) -> Self {
        let mut rng = rng::stream(spec.rng_seed, Domain::Subjects, subject as u64);
        let strength = spec.subject_nuisance_strength;
        let total = INERTIAL_CHANNELS + SECONDARY_CHANNELS;
        let gains = (0..total)
            .map(|_| 1.0 + strength * rng.gen_range(-GAIN_SPREAD..=GAIN_SPREAD))
            .collect();
        let offsets = (0..total)
            .map(|_| strength * rng.gen_range(-OFFSET_SPREAD..=OFFSET_SPREAD))
            .collect();
        let mut rot = || {
            let mut axis = [0.0; 3];
            let mut sq = 0.0f64;
            for v in &mut axis {
                *v = StandardNormal.sample(&mut rng);
                sq += *v * *v;
            }
            let inv = 1.0 / sq.sqrt();
            let axis = axis.map(|v| v * inv);
            let angle = strength * rng.gen_range(0.0..=MAX_ROTATION);
            rotation_matrix(axis, angle)
        };
        let rot_inertial = rot();
        let rot_secondary = rot();
        let speed = 1.0 + strength * rng.gen_range(-SPEED_SPREAD..=SPEED_SPREAD);
        SubjectNuisance {
            gains,
            offsets,
            rot_inertial,
            rot_secondary,
            speed,
        }
    }

    /// Channel offset of a modality into the flat gain/offset tables.
    fn channel_base(modality: Modality) -> usize {
        match modality {
            Modality::Inertial => 0,
            Modality::Secondary => INERTIAL_CHANNELS,
        }
    }

    /// Applies rotation, gain and offset in place to `[channels, T]` data.
    fn apply(&self, modality: Modality, data: &mut [f64]) {
        let channels = modality.channels();
        let rot = match modality {
            Modality::Inertial => &self.rot_inertial,
            Modality::Secondary => &self.rot_secondary,
        };
        for triple in 0..channels / 3 {
            let base = triple * 3 * T_STEPS;
            for t in 0..T_STEPS {
                let v = [
                    data[base + t],
                    data[base + T_STEPS + t],
                    data[base + 2 * T_STEPS + t],
                ];
                for (r, row) in rot.iter().enumerate() {
                    data[base + r * T_STEPS + t] =
                        row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
                }
            }
        }
        let cb = Self::channel_base(modality);
        for c in 0..channels {
            let gain = self.gains[cb + c];
            let offset = self.offsets[cb + c];
            for v in &mut data[c * T_STEPS..(c + 1) * T_STEPS] {
                *v = gain * *v + offset;
            }
        }
    }
}

/// Generates the full dataset: windows appear session by session, inertial
/// window immediately followed by its paired secondary window.
pub fn generate(spec: &WorldSpec) -> Result<Vec<SensorWindow>> {
    spec.validate()?;
    let bank = TemplateBank::draw(spec);
    let subjects: Vec<SubjectNuisance> = (0..spec.num_subjects)
        .map(|u| SubjectNuisance::draw(spec, u))
        .collect();

    let mut windows = Vec::with_capacity(spec.sessions() * 2);
    for subject in 0..spec.num_subjects {
        let nuisance = &subjects[subject as usize];
        for activity in 0..spec.num_activities {
            for session in 0..spec.windows_per_pair {
                let mut content =
                    rng::stream(spec.rng_seed, Domain::Templates, session_payload(activity, session));
                let shift = content.gen_range(-PHASE_JITTER..=PHASE_JITTER);
                let execution =
                    ExecutionVariation::draw(&mut content, spec.subject_nuisance_strength);
                let latent = bank.latent(activity as usize, nuisance.speed, shift, &execution);
                for modality in [Modality::Inertial, Modality::Secondary] {
                    let mixing = match modality {
                        Modality::Inertial => &bank.mix_inertial,
                        Modality::Secondary => &bank.mix_secondary,
                    };
                    let channels = modality.channels();
                    let mut data = vec![0.0; channels * T_STEPS];
                    for (c, row) in mixing.iter().enumerate() {
                        for t in 0..T_STEPS {
                            let mut s = 0.0;
                            for (l, lane) in latent.iter().enumerate() {
                                s += row[l] * lane[t];
                            }
                            data[c * T_STEPS + t] = s;
                        }
                    }
                    nuisance.apply(modality, &mut data);
                    if spec.noise_sigma > 0.0 {
                        let mut noise = rng::stream(
                            spec.rng_seed,
                            Domain::WindowNoise,
                            rng::window_payload(subject, activity, session as u32, modality.code()),
                        );
                        for v in &mut data {
                            let n: f64 = StandardNormal.sample(&mut noise);
                            *v += spec.noise_sigma * n;
                        }
                    }
                    windows.push(SensorWindow {
                        values: Tensor::from_vec(vec![channels, T_STEPS], data)?,
                        subject_id: subject,
                        activity_id: activity,
                        modality,
                    });
                }
            }
        }
    }
    Ok(windows)
}

/// Session content is keyed by (activity, session) only — never the subject —
/// so the zero-nuisance world is identical across subjects.
fn session_payload(activity: u16, session: usize) -> u64 {
    ((activity as u64) << 32) | session as u64
}

/// Cross-subject split: no window's subject appears in both partitions.
/// Windows of subjects in neither set are dropped.
pub fn split(
    windows: &[SensorWindow],
    train_subjects: &BTreeSet<u16>,
    test_subjects: &BTreeSet<u16>,
) -> Result<(Vec<SensorWindow>, Vec<SensorWindow>)> {
    if let Some(overlap) = train_subjects.intersection(test_subjects).next() {
        return Err(Error::contract(format!(
            "split: subject {overlap} appears in both train and test sets"
        )));
    }
    let known: BTreeSet<u16> = windows.iter().map(|w| w.subject_id).collect();
    for s in train_subjects.union(test_subjects) {
        if !known.contains(s) {
            return Err(Error::contract(format!(
                "split: subject {s} not present in the dataset"
            )));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for w in windows {
        if train_subjects.contains(&w.subject_id) {
            train.push(w.clone());
        } else if test_subjects.contains(&w.subject_id) {
            test.push(w.clone());
        }
    }
    Ok((train, test))
}

/// Pairs adjacent (inertial, secondary) windows into session index pairs.
pub fn pair_sessions(windows: &[SensorWindow]) -> Result<Vec<(usize, usize)>> {
    if windows.len() % 2 != 0 {
        return Err(Error::contract(
            "pair_sessions: odd window count, expected inertial/secondary pairs",
        ));
    }
    let mut pairs = Vec::with_capacity(windows.len() / 2);
    for i in (0..windows.len()).step_by(2) {
        let (a, b) = (&windows[i], &windows[i + 1]);
        if a.modality != Modality::Inertial
            || b.modality != Modality::Secondary
            || a.subject_id != b.subject_id
            || a.activity_id != b.activity_id
        {
            return Err(Error::contract(format!(
                "pair_sessions: windows {i},{} do not form an aligned session",
                i + 1
            )));
        }
        pairs.push((i, i + 1));
    }
    Ok(pairs)
}

/// Sidecar manifest written next to the binary container.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub window_count: usize,
    pub num_subjects: u16,
    pub num_activities: u16,
    pub t_steps: usize,
    pub world: WorldSpec,
    pub train_subjects: Vec<u16>,
    pub test_subjects: Vec<u16>,
}

/// Writes the binary dataset container.
///
/// Layout: magic `SICL`, format version u16, window count u32, subject count
/// u16, activity count u16, time steps u16; then per window: modality u8,
/// subject u16, activity u16, channels u16, channels×T f64 little-endian in
/// the tensor's row-major `[channel][t]` order.
pub fn write_dataset(mut w: impl Write, windows: &[SensorWindow]) -> Result<()> {
    w.write_all(MAGIC)?;
    bytes::put_u16(&mut w, FORMAT_VERSION)?;
    bytes::put_u32(&mut w, windows.len() as u32)?;
    let num_subjects = windows.iter().map(|x| x.subject_id + 1).max().unwrap_or(0);
    let num_activities = windows.iter().map(|x| x.activity_id + 1).max().unwrap_or(0);
    bytes::put_u16(&mut w, num_subjects)?;
    bytes::put_u16(&mut w, num_activities)?;
    bytes::put_u16(&mut w, T_STEPS as u16)?;
    for win in windows {
        bytes::put_u8(&mut w, win.modality.code())?;
        bytes::put_u16(&mut w, win.subject_id)?;
        bytes::put_u16(&mut w, win.activity_id)?;
        bytes::put_u16(&mut w, win.values.shape()[0] as u16)?;
        for &v in win.values.data() {
            bytes::put_f64(&mut w, v)?;
        }
    }
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Vec<SensorWindow>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("dataset container: bad magic bytes"));
    }
    let version = bytes::get_u16(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "dataset container: unsupported version {version}"
        )));
    }
    let count = bytes::get_u32(&mut r)? as usize;
    let _num_subjects = bytes::get_u16(&mut r)?;
    let _num_activities = bytes::get_u16(&mut r)?;
    let t_steps = bytes::get_u16(&mut r)? as usize;
    if t_steps != T_STEPS {
        return Err(Error::format(format!(
            "dataset container: expected {T_STEPS} time steps, got {t_steps}"
        )));
    }
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let modality = Modality::from_code(bytes::get_u8(&mut r)?)?;
        let subject_id = bytes::get_u16(&mut r)?;
        let activity_id = bytes::get_u16(&mut r)?;
        let channels = bytes::get_u16(&mut r)? as usize;
        if channels != modality.channels() {
            return Err(Error::format(format!(
                "dataset container: {modality} window with {channels} channels"
            )));
        }
        let mut data = vec![0.0; channels * t_steps];
        for v in &mut data {
            *v = bytes::get_f64(&mut r)?;
            if !v.is_finite() {
                return Err(Error::format("dataset container: non-finite sample"));
            }
        }
        windows.push(SensorWindow {
            values: Tensor::from_vec(vec![channels, t_steps], data)?,
            subject_id,
            activity_id,
            modality,
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(strength: f64, noise: f64) -> WorldSpec {
        WorldSpec {
            num_subjects: 3,
            num_activities: 2,
            windows_per_pair: 2,
            subject_nuisance_strength: strength,
            noise_sigma: noise,
            rng_seed: 42,
        }
    }

    #[test]
    fn zero_nuisance_zero_noise_is_byte_equal_across_subjects() {
        let windows = generate(&tiny_spec(0.0, 0.0)).unwrap();
        let per_subject = windows.len() / 3;
        for u in 1..3 {
            for i in 0..per_subject {
                let a = &windows[i];
                let b = &windows[u * per_subject + i];
                assert_eq!(a.activity_id, b.activity_id);
                assert_eq!(a.modality, b.modality);
                assert_eq!(a.values, b.values, "subject {u} window {i} differs");
            }
        }
    }

    #[test]
    fn nearest_centroid_is_perfect_at_zero_nuisance() {
        let spec = WorldSpec {
            num_subjects: 4,
            num_activities: 4,
            windows_per_pair: 3,
            subject_nuisance_strength: 0.0,
            noise_sigma: 0.0,
            rng_seed: 5,
        };
        let windows = generate(&spec).unwrap();
        for modality in [Modality::Inertial, Modality::Secondary] {
            let of_modality: Vec<&SensorWindow> =
                windows.iter().filter(|w| w.modality == modality).collect();
            let dim = modality.channels() * T_STEPS;
            let mut centroids = vec![vec![0.0; dim]; 4];
            let mut counts = vec![0usize; 4];
            for w in &of_modality {
                counts[w.activity_id as usize] += 1;
                for (c, &v) in centroids[w.activity_id as usize]
                    .iter_mut()
                    .zip(w.values.data())
                {
                    *c += v;
                }
            }
            for (c, n) in centroids.iter_mut().zip(&counts) {
                for v in c.iter_mut() {
                    *v /= *n as f64;
                }
            }
            let correct = of_modality
                .iter()
                .filter(|w| {
                    let best = centroids
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| {
                            let da: f64 =
                                a.iter().zip(w.values.data()).map(|(x, y)| (x - y).powi(2)).sum();
                            let db: f64 =
                                b.iter().zip(w.values.data()).map(|(x, y)| (x - y).powi(2)).sum();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap()
                        .0;
                    best == w.activity_id as usize
                })
                .count();
            assert_eq!(correct, of_modality.len(), "{modality} not separable");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec(0.7, 0.2);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn subject_centroid_spread_grows_with_nuisance() {
        let mut spreads = Vec::new();
        for strength in [0.0, 0.4, 0.8] {
            let spec = WorldSpec {
                num_subjects: 6,
                num_activities: 3,
                windows_per_pair: 4,
                subject_nuisance_strength: strength,
                noise_sigma: 0.0,
                rng_seed: 9,
            };
            let windows = generate(&spec).unwrap();
            let dim = INERTIAL_CHANNELS * T_STEPS;
            let mut total = 0.0;
            let mut pairs = 0usize;
            for activity in 0..3u16 {
                let mut centroids = vec![vec![0.0; dim]; 6];
                let mut counts = vec![0usize; 6];
                for w in windows
                    .iter()
                    .filter(|w| w.modality == Modality::Inertial && w.activity_id == activity)
                {
                    counts[w.subject_id as usize] += 1;
                    for (c, &v) in centroids[w.subject_id as usize].iter_mut().zip(w.values.data())
                    {
                        *c += v;
                    }
                }
                for (c, n) in centroids.iter_mut().zip(&counts) {
                    for v in c.iter_mut() {
                        *v /= *n as f64;
                    }
                }
                for a in 0..6 {
                    for b in a + 1..6 {
                        total += centroids[a]
                            .iter()
                            .zip(&centroids[b])
                            .map(|(x, y)| (x - y).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        pairs += 1;
                    }
                }
            }
            spreads.push(total / pairs as f64);
        }
        assert!(spreads[0] <= spreads[1] + 1e-12, "{spreads:?}");
        assert!(spreads[1] <= spreads[2] + 1e-12, "{spreads:?}");
        assert!(spreads[0] < 1e-9, "zero strength should collapse subjects");
    }

    #[test]
    fn split_filters_by_subject() {
        let windows = generate(&tiny_spec(0.5, 0.1)).unwrap();
        let train: BTreeSet<u16> = [0, 1].into();
        let test: BTreeSet<u16> = [2].into();
        let (tr, te) = split(&windows, &train, &test).unwrap();
        assert!(tr.iter().all(|w| w.subject_id < 2));
        assert!(te.iter().all(|w| w.subject_id == 2));
        assert_eq!(tr.len() + te.len(), windows.len());
    }

    #[test]
    fn split_empty_test_set_is_empty_partition() {
        let windows = generate(&tiny_spec(0.5, 0.1)).unwrap();
        let train: BTreeSet<u16> = [0, 1, 2].into();
        let test = BTreeSet::new();
        let (_, te) = split(&windows, &train, &test).unwrap();
        assert!(te.is_empty());
    }

    #[test]
    fn split_overlap_is_contract_error() {
        let windows = generate(&tiny_spec(0.5, 0.1)).unwrap();
        let train: BTreeSet<u16> = [0, 1].into();
        let test: BTreeSet<u16> = [1, 2].into();
        assert!(matches!(
            split(&windows, &train, &test),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn session_count_arithmetic() {
        let spec = WorldSpec {
            num_subjects: 12,
            num_activities: 6,
            windows_per_pair: 10,
            subject_nuisance_strength: 0.8,
            noise_sigma: 0.1,
            rng_seed: 1,
        };
        let windows = generate(&spec).unwrap();
        let train: BTreeSet<u16> = (0..8).collect();
        let test: BTreeSet<u16> = (8..12).collect();
        let (tr, _) = split(&windows, &train, &test).unwrap();
        let sessions = pair_sessions(&tr).unwrap();
        assert_eq!(sessions.len(), 8 * 6 * 10);
    }

    #[test]
    fn container_round_trip() {
        let windows = generate(&tiny_spec(0.6, 0.05)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &windows).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(windows, back);
    }

    #[test]
    fn container_rejects_bad_magic() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &generate(&tiny_spec(0.0, 0.0)).unwrap()).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_dataset(buf.as_slice()), Err(Error::Format(_))));
    }
}
