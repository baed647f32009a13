//! Synthetic cohorts with a known generative risk, so training quality can
//! be scored against an oracle instead of a private dataset.
//!
//! Two signal layouts:
//!
//! * `Linear`: a per-sample latent z drives the mean of one designated
//!   signal channel through a fixed direction vector. Anything that can read
//!   a channel mean can recover z.
//! * `Interaction`: two Rademacher latents u, v ride on two different
//!   channels, and the risk is their product. Each channel mean alone is
//!   independent of the risk; only a cross-channel interaction reveals it.
//!
//! Patch amplitudes vary over the slide grid through a smooth positive
//! field, so attention heatmaps of a model that found the signal inherit
//! spatial structure.

use crate::error::{Error, Result};
use crate::fusion::EmbeddedBag;
use crate::metrics::c_index;
use crate::numerics::Tensor;
use crate::pipeline::manifest::ManifestRow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Linear,
    Interaction,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SynthKind::Linear),
            "interaction" => Ok(SynthKind::Interaction),
            other => Err(Error::config(format!(
                "unknown cohort kind {other:?}, expected linear or interaction"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_samples: usize,
    pub m: usize,
    pub d_emb: usize,
    /// Patches form a grid x grid square; K = grid^2.
    pub grid: usize,
    pub censor_rate: f64,
    /// Magnitude of the planted direction vectors.
    pub signal_scale: f64,
    /// Standard deviation of the isotropic embedding noise.
    pub noise_scale: f64,
    /// Hazard rate = base_rate * exp(hazard_beta * risk).
    pub hazard_beta: f64,
    pub base_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::Linear,
            n_samples: 200,
            m: 7,
            d_emb: 64,
            grid: 4,
            censor_rate: 0.3,
            signal_scale: 2.0,
            noise_scale: 0.5,
            hazard_beta: 1.5,
            base_rate: 1.0 / 365.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 20 {
            return Err(Error::config(format!(
                "need at least 20 samples, got {}",
                self.n_samples
            )));
        }
        if self.m == 0 || self.d_emb == 0 || self.grid == 0 {
            return Err(Error::config("m, d_emb, grid must be >= 1"));
        }
        if self.kind == SynthKind::Interaction && self.m < 2 {
            return Err(Error::config("interaction cohort needs at least 2 channels"));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::config(format!(
                "censor_rate must lie in [0, 1), got {}",
                self.censor_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub rows: Vec<ManifestRow>,
    pub bags: Vec<EmbeddedBag<f32>>,
    /// Generative risk per sample; higher means shorter expected survival.
    pub true_risks: Vec<f64>,
}

impl SynthCohort {
    /// C-index the generative risks themselves achieve against the drawn
    /// times. The model cannot beat this except by luck.
    pub fn oracle_c_index(&self) -> Result<f64> {
        let longevity: Vec<f64> = self.true_risks.iter().map(|r| -r).collect();
        let times: Vec<f64> = self.rows.iter().map(|r| r.time_days).collect();
        let cens: Vec<bool> = self.rows.iter().map(|r| r.is_censored()).collect();
        c_index(&longevity, &times, &cens)
    }

    pub fn event_count(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_censored()).count()
    }

    /// Write bags/, manifest.csv, and truth.csv under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let bag_dir = dir.join("bags");
        std::fs::create_dir_all(&bag_dir)?;
        let mut rows = self.rows.clone();
        for (row, bag) in rows.iter_mut().zip(&self.bags) {
            let path = bag_dir.join(format!("{}.bag", bag.sample_id));
            crate::pipeline::bagfile::write_bag(&path, bag)?;
            row.bag_path = PathBuf::from("bags").join(format!("{}.bag", bag.sample_id));
        }
        crate::pipeline::manifest::write_manifest(&dir.join("manifest.csv"), &rows)?;
        let mut w = csv::Writer::from_path(dir.join("truth.csv"))
            .map_err(|e| Error::format(format!("truth.csv: {e}")))?;
        w.write_record(["sample_id", "true_risk"])
            .map_err(|e| Error::format(format!("truth.csv: {e}")))?;
        for (row, risk) in self.rows.iter().zip(&self.true_risks) {
            w.write_record([row.sample_id.as_str(), &format!("{risk}")])
                .map_err(|e| Error::format(format!("truth.csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::format(format!("truth.csv: {e}")))?;
        Ok(())
    }
}

/// Marker-flavored channel names for small M, generic names beyond.
pub fn default_channel_names(m: usize) -> Vec<String> {
    const NAMES: [&str; 7] = ["dapi", "cd8", "foxp3", "pd1", "pdl1", "ck", "af"];
    (0..m)
        .map(|i| {
            if i < NAMES.len() {
                NAMES[i].to_string()
            } else {
                format!("ch{i}")
            }
        })
        .collect()
}

pub fn synth_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.grid * cfg.grid;
    let names = default_channel_names(cfg.m);
    let coords: Vec<(u32, u32)> = (0..k)
        .map(|i| ((i % cfg.grid) as u32, (i / cfg.grid) as u32))
        .collect();

    // fixed unit directions, one per planted channel
    let dir_a = unit_direction(cfg.d_emb, &mut rng);
    let dir_b = unit_direction(cfg.d_emb, &mut rng);

    let mut rows = Vec::with_capacity(cfg.n_samples);
    let mut bags = Vec::with_capacity(cfg.n_samples);
    let mut true_risks = Vec::with_capacity(cfg.n_samples);
    let mut patient = 0usize;
    for i in 0..cfg.n_samples {
        // every tenth sample shares a patient with its predecessor, so the
        // stratified splitter has real work to do
        let reuse = i % 10 == 9;
        if !reuse {
            patient += 1;
        }
        let sample_id = format!("s{i:04}");
        let patient_id = format!("pt{:04}", patient - 1);

        let (risk, latents) = match cfg.kind {
            SynthKind::Linear => {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z, (z, 0.0))
            }
            SynthKind::Interaction => {
                let u = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let v = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (u * v, (u, v))
            }
        };

        // smooth positive per-patch amplitude, normalized to mean 1 so the
        // planted channel mean over the bag stays the hidden linear readout
        let field = smooth_field(cfg.grid, &mut rng);

        let mut data = vec![0.0f32; k * cfg.m * cfg.d_emb];
        for (pi, f) in field.iter().enumerate() {
            for ci in 0..cfg.m {
                let base = (pi * cfg.m + ci) * cfg.d_emb;
                for j in 0..cfg.d_emb {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data[base + j] = (cfg.noise_scale * noise) as f32;
                }
                let planted: Option<(&[f64], f64)> = match cfg.kind {
                    SynthKind::Linear if ci == 0 => Some((&dir_a, latents.0)),
                    SynthKind::Interaction if ci == 0 => Some((&dir_a, latents.0)),
                    SynthKind::Interaction if ci == 1 => Some((&dir_b, latents.1)),
                    _ => None,
                };
                if let Some((dir, amp)) = planted {
                    for j in 0..cfg.d_emb {
                        data[base + j] += (cfg.signal_scale * amp * f * dir[j]) as f32;
                    }
                }
            }
        }

        let rate = cfg.base_rate * (cfg.hazard_beta * risk).exp();
        let event_time: f64 = Exp::new(rate)
            .map_err(|_| Error::numeric(format!("non-positive hazard rate {rate}")))?
            .sample(&mut rng);
        let censored = rng.gen_bool(cfg.censor_rate);
        let time = if censored {
            rng.gen_range(0.0..event_time.max(f64::MIN_POSITIVE))
        } else {
            event_time
        };

        rows.push(ManifestRow {
            sample_id: sample_id.clone(),
            patient_id,
            time_days: time,
            censored: u8::from(censored),
            bag_path: PathBuf::from("bags").join(format!("{sample_id}.bag")),
        });
        bags.push(EmbeddedBag::new(
            sample_id,
            names.clone(),
            coords.clone(),
            Tensor::new(vec![k, cfg.m, cfg.d_emb], data)?,
        )?);
        true_risks.push(risk);
    }

    Ok(SynthCohort { config: cfg.clone(), rows, bags, true_risks })
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Positive random field over the grid: exp of a few low-frequency cosines,
/// rescaled to mean 1.
fn smooth_field(grid: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = grid * grid;
    let mut waves = Vec::new();
    for _ in 0..3 {
        let amp: f64 = rng.gen_range(0.3..0.7);
        let fx: f64 = rng.gen_range(0.5..1.5);
        let fy: f64 = rng.gen_range(0.5..1.5);
        let phase: f64 = rng.gen_range(0.0..TAU);
        waves.push((amp, fx, fy, phase));
    }
    let mut field: Vec<f64> = (0..k)
        .map(|i| {
            let x = (i % grid) as f64 / grid as f64;
            let y = (i / grid) as f64 / grid as f64;
            let s: f64 = waves
                .iter()
                .map(|&(amp, fx, fy, phase)| amp * (TAU * (fx * x + fy * y) + phase).cos())
                .sum();
            s.exp()
        })
        .collect();
    let mean = field.iter().sum::<f64>() / k as f64;
    for f in &mut field {
        *f /= mean;
    }
    field
}
