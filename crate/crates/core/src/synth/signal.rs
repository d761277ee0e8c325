//! Parametric 12-lead ECG rendering and motif injection.
//!
//! A record is drawn from a [`Recipe`] (beat timing plus wave morphology).
//! Morphological motifs edit the recipe and add the rendered difference to
//! the signal; noise motifs add seeded waveforms directly.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ecgqa_autodiff::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attributes::{AttributeRegistry, Motif};
use crate::{Error, Result};

pub const LEAD_NAMES: [&str; 12] =
    ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];

/// Stored samples saturate here.
pub const AMPLITUDE_LIMIT: f32 = 10.0;

/// Frontal-plane angles of the limb leads, degrees.
const LIMB_ANGLES: [f64; 6] = [0.0, 60.0, 120.0, -150.0, -30.0, 90.0];
const PRECORDIAL_QRS: [f64; 6] = [-0.7, -0.45, 0.25, 0.8, 1.0, 0.85];
const PRECORDIAL_P: [f64; 6] = [0.3, 0.4, 0.45, 0.5, 0.5, 0.4];
const PRECORDIAL_T: [f64; 6] = [-0.15, 0.45, 0.7, 0.8, 0.7, 0.6];

/// Samples `[t_len, n_leads]`, row-major, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgSignal {
    t_len: usize,
    n_leads: usize,
    samples: Vec<f32>,
    lead_mask: Vec<bool>,
}

impl EcgSignal {
    pub fn new(t_len: usize, n_leads: usize, samples: Vec<f32>) -> Result<Self> {
        if samples.len() != t_len * n_leads {
            return Err(Error::Generation(format!(
                "{} samples for {t_len}x{n_leads} signal",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite() || v.abs() > AMPLITUDE_LIMIT) {
            return Err(Error::Generation(format!("sample {bad} outside the amplitude range")));
        }
        Ok(Self { t_len, n_leads, samples, lead_mask: vec![true; n_leads] })
    }

    /// Rounds to `f32` and saturates at the amplitude limit.
    pub fn from_f64(t_len: usize, n_leads: usize, samples: &[f64]) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Generation("non-finite sample".into()));
        }
        let q = samples
            .iter()
            .map(|&v| (v as f32).clamp(-AMPLITUDE_LIMIT, AMPLITUDE_LIMIT))
            .collect();
        Self::new(t_len, n_leads, q)
    }

    pub fn zeros(t_len: usize, n_leads: usize) -> Self {
        Self {
            t_len,
            n_leads,
            samples: vec![0.0; t_len * n_leads],
            lead_mask: vec![true; n_leads],
        }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n_leads(&self) -> usize {
        self.n_leads
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn at(&self, t: usize, lead: usize) -> f32 {
        self.samples[t * self.n_leads + lead]
    }

    pub fn lead_mask(&self) -> &[bool] {
        &self.lead_mask
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.t_len, self.n_leads],
            self.samples.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("length checked at construction")
    }

    /// Zeroes every lead whose `keep` flag is false.
    pub fn with_mask(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.n_leads {
            return Err(Error::Generation(format!(
                "mask of {} leads for a {}-lead signal",
                keep.len(),
                self.n_leads
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Generation("lead mask keeps no lead".into()));
        }
        let mut out = self.clone();
        for (i, v) in out.samples.iter_mut().enumerate() {
            if !keep[i % self.n_leads] {
                *v = 0.0;
            }
        }
        for (m, &k) in out.lead_mask.iter_mut().zip(keep) {
            *m = *m && k;
        }
        Ok(out)
    }

    /// Adds seeded white noise and scales amplitude; a zero shift is the identity.
    pub fn shifted(&self, noise_std: f64, amplitude_scale: f64, seed: u64) -> Result<Self> {
        if noise_std == 0.0 && amplitude_scale == 1.0 {
            return Ok(self.clone());
        }
        if !(noise_std >= 0.0) || !(amplitude_scale > 0.0) {
            return Err(Error::Generation("invalid domain shift".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("positive std");
        let data: Vec<f64> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let noise = if noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                if self.lead_mask[i % self.n_leads] {
                    f64::from(v) * amplitude_scale + noise
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = Self::from_f64(self.t_len, self.n_leads, &data)?;
        out.lead_mask = self.lead_mask.clone();
        Ok(out)
    }
}

pub fn lead_index(name: &str) -> Result<usize> {
    LEAD_NAMES
        .iter()
        .position(|l| l.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Generation(format!("unknown lead {name}")))
}

/// Keeps the named leads and zeroes the others.
pub fn apply_lead_mask<S: AsRef<str>>(x: &EcgSignal, keep: &[S]) -> Result<EcgSignal> {
    if keep.is_empty() {
        return Err(Error::Generation("empty lead subset".into()));
    }
    let mut bits = vec![false; x.n_leads()];
    for name in keep {
        let i = lead_index(name.as_ref())?;
        if i >= x.n_leads() {
            return Err(Error::Generation(format!("lead {} not recorded", name.as_ref())));
        }
        bits[i] = true;
    }
    x.with_mask(&bits)
}

/// Training-time mask: each lead dropped independently with probability
/// `p`; if every lead drops, one uniformly chosen lead is restored.
pub fn random_lead_mask(n_leads: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n_leads).map(|_| rng.random::<f64>() >= p).collect();
    if !keep.iter().any(|&k| k) {
        keep[rng.random_range(0..n_leads)] = true;
    }
    keep
}

/// Which attributes a record carries: presence attributes and the chosen
/// value of every valued attribute.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Findings {
    pub present: BTreeSet<usize>,
    pub values: BTreeMap<usize, usize>,
}

/// A motif to inject: a presence attribute or one value of a valued one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finding {
    Present(usize),
    Value(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ectopic {
    pub after_beat: usize,
    pub frac: f64,
    pub ventricular: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub t_len: usize,
    pub n_leads: usize,
    pub rr: f64,
    pub start: f64,
    pub rr_jitter: Vec<f64>,
    pub irregular: Option<Vec<f64>>,
    pub axis_deg: f64,
    pub amplitude: f64,
    pub p_amp: f64,
    pub pr: f64,
    pub qrs_amp: f64,
    pub qrs_sigma: f64,
    pub rsr: f64,
    pub qrs_scale: Vec<f64>,
    pub q_depth: Vec<f64>,
    pub st_shift: f64,
    pub t_amp: f64,
    pub t_delay: f64,
    pub t_sigma: f64,
    pub t_scale: Vec<f64>,
    pub fib_amp: f64,
    pub fib_phase: [f64; 2],
    pub ectopics: Vec<Ectopic>,
}

impl Recipe {
    /// A healthy sinus record with mild per-record variability.
    pub fn normal(t_len: usize, n_leads: usize, rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            t_len,
            n_leads,
            rr: u(79.0, 91.0),
            start: u(0.0, 1.0),
            rr_jitter: (0..24).map(|_| u(0.97, 1.03)).collect(),
            irregular: None,
            axis_deg: u(50.0, 70.0),
            amplitude: u(0.85, 1.15),
            p_amp: u(0.18, 0.22),
            pr: u(15.0, 17.0),
            qrs_amp: 1.0,
            qrs_sigma: u(1.1, 1.3),
            rsr: 0.0,
            qrs_scale: vec![1.0; n_leads],
            q_depth: vec![0.0; n_leads],
            st_shift: 0.0,
            t_amp: u(0.27, 0.33),
            t_delay: u(28.0, 32.0),
            t_sigma: u(4.5, 5.5),
            t_scale: vec![1.0; n_leads],
            fib_amp: 0.0,
            fib_phase: [0.0, 0.0],
            ectopics: Vec::new(),
        }
    }

    /// R-peak positions, starting one cycle before the record so early
    /// T waves are present.
    pub fn beats(&self) -> Vec<f64> {
        let mult = self.irregular.as_ref().unwrap_or(&self.rr_jitter);
        let mut out = Vec::new();
        let mut t = (self.start - 1.0) * self.rr;
        let mut i = 0;
        while t < self.t_len as f64 + self.rr {
            out.push(t);
            t += self.rr * mult[i % mult.len()];
            i += 1;
        }
        out
    }

    fn gains(&self, lead: usize) -> (f64, f64, f64) {
        if lead < 6 {
            let ang = LIMB_ANGLES[lead];
            let qrs = ((self.axis_deg - ang) * PI / 180.0).cos();
            let p = ((60.0 - ang) * PI / 180.0).cos();
            let t = 0.8 * ((45.0 - ang) * PI / 180.0).cos();
            (p, qrs, t)
        } else {
            let v = (lead - 6) % 6;
            (PRECORDIAL_P[v], PRECORDIAL_QRS[v], PRECORDIAL_T[v])
        }
    }

    pub fn render(&self) -> Vec<f64> {
        let (n, c) = (self.t_len, self.n_leads);
        let mut out = vec![0.0; n * c];
        let beats = self.beats();
        for lead in 0..c {
            let (gp, gq, gt) = self.gains(lead);
            let a = self.amplitude;
            let mut put = |centre: f64, sigma: f64, amp: f64| {
                add_gauss(&mut out, n, c, lead, centre, sigma, a * amp)
            };
            for &r in &beats {
                if self.p_amp != 0.0 {
                    put(r - self.pr, 2.5, self.p_amp * gp);
                }
                let q = self.qrs_amp * self.qrs_scale[lead] * gq;
                put(r, self.qrs_sigma, q);
                put(r + 2.2 * self.qrs_sigma, self.qrs_sigma, -0.3 * q);
                if self.rsr != 0.0 {
                    put(r + 3.2 * self.qrs_sigma, self.qrs_sigma, self.rsr * q);
                }
                if self.q_depth[lead] != 0.0 {
                    put(r - 2.2, 1.3, -self.q_depth[lead]);
                }
                if self.st_shift != 0.0 && gq > 0.0 {
                    put(r + 0.5 * self.t_delay, 0.22 * self.t_delay, self.st_shift * gq);
                }
                put(r + self.t_delay, self.t_sigma, self.t_amp * self.t_scale[lead] * gt);
            }
            for e in &self.ectopics {
                if e.after_beat + 1 < beats.len() {
                    let r = beats[e.after_beat] + e.frac * (beats[e.after_beat + 1] - beats[e.after_beat]);
                    if e.ventricular {
                        let polarity = if gq >= 0.0 { -1.0 } else { 1.0 };
                        put(r, 3.0, 1.3 * polarity);
                        put(r + 24.0, 6.0, -0.45 * polarity);
                    } else {
                        put(r - self.pr * 0.6, 2.5, -2.5 * self.p_amp * gp);
                        put(r, self.qrs_sigma, 1.8 * gq);
                        put(r + 2.2 * self.qrs_sigma, self.qrs_sigma, -0.54 * gq);
                        put(r + self.t_delay, self.t_sigma, self.t_amp * gt);
                    }
                }
            }
            if self.fib_amp != 0.0 {
                let w = if [1, 2, 5, 6].contains(&lead) { 1.0 } else { 0.4 };
                for t in 0..n {
                    let s = (2.0 * PI * 5.3 * t as f64 / 100.0 + self.fib_phase[0]).sin()
                        + 0.7 * (2.0 * PI * 6.9 * t as f64 / 100.0 + self.fib_phase[1]).sin();
                    out[t * c + lead] += a * self.fib_amp * w * s;
                }
            }
        }
        out
    }
}

fn add_gauss(buf: &mut [f64], n: usize, c: usize, lead: usize, centre: f64, sigma: f64, amp: f64) {
    if amp == 0.0 {
        return;
    }
    let lo = (centre - 5.0 * sigma).floor().max(0.0) as usize;
    let hi = ((centre + 5.0 * sigma).ceil().max(0.0) as usize).min(n);
    for t in lo..hi {
        let z = (t as f64 - centre) / sigma;
        buf[t * c + lead] += amp * (-0.5 * z * z).exp();
    }
}

/// A record under construction: its recipe and current samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthEcg {
    pub recipe: Recipe,
    pub samples: Vec<f64>,
}

impl SynthEcg {
    /// Renders `recipe` and adds white measurement noise.
    pub fn from_recipe(recipe: Recipe, noise_std: f64, seed: u64) -> Self {
        let mut samples = recipe.render();
        if noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, noise_std).expect("positive std");
            for v in &mut samples {
                *v += normal.sample(&mut rng);
            }
        }
        Self { recipe, samples }
    }

    pub fn to_signal(&self) -> Result<EcgSignal> {
        EcgSignal::from_f64(self.recipe.t_len, self.recipe.n_leads, &self.samples)
    }
}

/// Adds the motif of `finding` scaled by `strength`. Deterministic in `seed`.
pub fn inject_motif(
    base: &SynthEcg,
    registry: &AttributeRegistry,
    finding: Finding,
    strength: f64,
    seed: u64,
) -> Result<SynthEcg> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Generation(format!("motif strength {strength} outside (0, 1]")));
    }
    let (id, value) = match finding {
        Finding::Present(id) => (id, None),
        Finding::Value(id, v) => (id, Some(v)),
    };
    let attr = registry.get(id)?;
    match (attr.is_valued(), value) {
        (false, None) => {}
        (true, Some(v)) if v < attr.values.len() => {}
        _ => {
            return Err(Error::Generation(format!(
                "finding {finding:?} does not match attribute {}",
                attr.key
            )))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (base.recipe.t_len, base.recipe.n_leads);
    let mut out = base.clone();
    let mut add = |delta: &[f64]| {
        for (o, d) in out.samples.iter_mut().zip(delta) {
            *o += strength * d;
        }
    };
    let mut r = base.recipe.clone();
    match attr.motif {
        Motif::BaselineDrift => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
            let delta: Vec<f64> = (0..n * c)
                .map(|i| {
                    let t = (i / c) as f64 / (n.max(2) - 1) as f64;
                    sign * gains[i % c] * (2.0 * t - 1.0)
                })
                .collect();
            add(&delta);
            return Ok(out);
        }
        Motif::StaticNoise => {
            let normal = Normal::new(0.0, 0.15).expect("positive std");
            let delta: Vec<f64> = (0..n * c).map(|_| normal.sample(&mut rng)).collect();
            add(&delta);
            return Ok(out);
        }
        Motif::BurstNoise => {
            let width = (n / 5).max(1);
            let start = rng.random_range(0..=n - width);
            let normal = Normal::new(0.0, 0.6).expect("positive std");
            let mut delta = vec![0.0; n * c];
            for t in start..start + width {
                for l in 0..c {
                    delta[t * c + l] = normal.sample(&mut rng);
                }
            }
            add(&delta);
            return Ok(out);
        }
        Motif::ElectrodeArtifacts => {
            let mut delta = vec![0.0; n * c];
            for _ in 0..3 {
                let lead = rng.random_range(0..c);
                let len = rng.random_range(n / 5..=n / 3).max(1);
                let t0 = rng.random_range(0..n.saturating_sub(len).max(1));
                let level = if rng.random::<bool>() { 1.2 } else { -1.2 };
                for t in t0..(t0 + len).min(n) {
                    delta[t * c + lead] += level;
                }
                if t0 > 0 {
                    delta[t0 * c + lead] += 1.5 * level;
                }
            }
            add(&delta);
            return Ok(out);
        }
        Motif::FirstDegreeAvBlock => {
            r.pr += 30.0;
            r.p_amp *= 3.5;
        }
        Motif::AtrialFibrillation => {
            r.p_amp = 0.0;
            r.irregular = Some((0..24).map(|_| rng.random_range(0.55..1.45)).collect());
            r.fib_amp = 0.1;
            r.fib_phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        }
        Motif::BundleBranchBlock => {
            r.qrs_sigma *= 2.2;
            r.rsr = 0.6;
        }
        Motif::StElevation => r.st_shift = 0.35,
        Motif::TWaveInversion => r.t_amp = -r.t_amp,
        Motif::LowQrsVoltage => r.qrs_amp *= 0.3,
        Motif::LeftVentricularHypertrophy => {
            for lead in [0, 4, 6, 7, 10, 11] {
                if lead < c {
                    r.qrs_scale[lead] *= 2.3;
                }
            }
        }
        Motif::ProlongedQt => r.t_delay += 22.0,
        Motif::VentricularExtrasystole | Motif::SupraventricularExtrasystole => {
            let ventricular = attr.motif == Motif::VentricularExtrasystole;
            let beats = r.beats();
            let inside: Vec<usize> = (0..beats.len().saturating_sub(1))
                .filter(|&i| beats[i] > 10.0 && beats[i + 1] < n as f64 - 10.0)
                .collect();
            let frac = if ventricular { 0.55 } else { 0.4 };
            let mut picks: Vec<usize> = inside.choose_multiple(&mut rng, 2).copied().collect();
            picks.sort_unstable();
            r.ectopics.extend(picks.into_iter().map(|after_beat| Ectopic { after_beat, frac, ventricular }));
        }
        Motif::HeartAxis => {
            let centre = [60.0, -40.0, 125.0][value.unwrap_or(0)];
            r.axis_deg = centre + rng.random_range(-10.0..10.0);
        }
        Motif::HeartRate => {
            let centre = [150.0, 85.0, 45.0][value.unwrap_or(1)];
            r.rr = centre + rng.random_range(-6.0..6.0);
        }
        Motif::InfarctionStage => match value.unwrap_or(0) {
            1 => {
                for lead in 6..10.min(c) {
                    r.t_scale[lead] *= 3.0;
                }
            }
            2 => {
                for lead in [1, 2, 5, 6, 7, 8] {
                    if lead < c {
                        r.q_depth[lead] = 0.45;
                    }
                }
            }
            _ => {}
        },
    }
    let before = base.recipe.render();
    let after = r.render();
    let delta: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    add(&delta);
    out.recipe = r;
    Ok(out)
}
