//! Synthetic two-modality dataset with controllable noise and modality
//! disagreement.
//!
//! Every class owns one text center and one audio center. A sample's rows
//! are its class center plus Gaussian noise. A `1 − consistency` fraction of
//! each split gets one modality (picked at random) built from the center of
//! a different, randomly chosen class instead.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{
    Dataset, Manifest, ManifestHeader, Sample, SampleRecord, Split, SCHEMA_VERSION,
};
use super::tensor_file::write_tensor;
use crate::encoders::{combine_audio, AUDIO_DIM, TEXT_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCenters {
    /// `n_classes` rows of `text_dim` values.
    pub text: Vec<Vec<f32>>,
    /// `n_classes` rows of `audio_dim` values.
    pub audio: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Std of the random centers; ignored when `centers` is given.
    pub center_scale: f32,
    pub noise_std: f32,
    pub consistency: f64,
    /// 1, or 2 to emit the audio as two files that sum to the sample.
    pub audio_streams: usize,
    pub seed: u64,
    pub class_names: Option<Vec<String>>,
    pub centers: Option<SynthCenters>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            train_per_class: 125,
            test_per_class: 50,
            text_dim: TEXT_DIM,
            audio_dim: AUDIO_DIM,
            min_len: 4,
            max_len: 12,
            center_scale: 1.0,
            noise_std: 0.5,
            consistency: 1.0,
            audio_streams: 1,
            seed: 7,
            class_names: None,
            centers: None,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if self.text_dim == 0 || self.audio_dim == 0 {
            return bad("feature dims must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            ));
        }
        if !(self.center_scale.is_finite() && self.center_scale >= 0.0) {
            return bad(format!(
                "center_scale must be finite and >= 0, got {}",
                self.center_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.consistency) {
            return bad(format!(
                "consistency must lie in [0, 1], got {}",
                self.consistency
            ));
        }
        if !(1..=2).contains(&self.audio_streams) {
            return bad(format!(
                "audio_streams must be 1 or 2, got {}",
                self.audio_streams
            ));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return bad(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.n_classes
                ));
            }
        }
        if let Some(c) = &self.centers {
            let ok = |rows: &[Vec<f32>], d: usize| {
                rows.len() == self.n_classes && rows.iter().all(|r| r.len() == d)
            };
            if !ok(&c.text, self.text_dim) || !ok(&c.audio, self.audio_dim) {
                return bad("centers must be n_classes rows of text_dim / audio_dim values".into());
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.n_classes).map(|c| format!("class{c}")).collect())
    }
}

/// One generated sample before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub text: Tensor,
    /// One or two streams; their sum is the audio sequence.
    pub audio: Vec<Tensor>,
    /// `true` when one modality came from another class's center.
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub text_centers: Tensor,
    pub audio_centers: Tensor,
    pub samples: Vec<SynthSample>,
}

fn noisy_rows(center: &[f32], len: usize, std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let d = center.len();
    let mut data = Vec::with_capacity(len * d);
    for _ in 0..len {
        for &c in center {
            let z: f32 = StandardNormal.sample(rng);
            data.push(c + std * z);
        }
    }
    Tensor::new(vec![len, d], data).expect("len and d are positive")
}

fn halve(t: &Tensor) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| 0.5 * v).collect(),
    )
    .expect("same shape")
}

/// Generates every sample in memory. Centers are drawn first, then the
/// train split, then the test split.
pub fn synth_samples(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_classes;
    let (text_centers, audio_centers) = match &cfg.centers {
        Some(c) => (Tensor::from_rows(&c.text)?, Tensor::from_rows(&c.audio)?),
        None => (
            Tensor::randn(&[n, cfg.text_dim], cfg.center_scale, &mut rng),
            Tensor::randn(&[n, cfg.audio_dim], cfg.center_scale, &mut rng),
        ),
    };

    let mut samples = Vec::new();
    for (split, per_class) in [
        (Split::Train, cfg.train_per_class),
        (Split::Test, cfg.test_per_class),
    ] {
        let count = per_class * n;
        let n_off = ((1.0 - cfg.consistency) * count as f64).round() as usize;
        let mut off = vec![false; count];
        for i in index::sample(&mut rng, count, n_off.min(count)) {
            off[i] = true;
        }
        for (i, &inconsistent) in off.iter().enumerate() {
            let label = i % n;
            let (mut text_class, mut audio_class) = (label, label);
            if inconsistent {
                let other = (label + 1 + rng.random_range(0..n - 1)) % n;
                if rng.random_bool(0.5) {
                    text_class = other;
                } else {
                    audio_class = other;
                }
            }
            let text_len = rng.random_range(cfg.min_len..=cfg.max_len);
            let audio_len = rng.random_range(cfg.min_len..=cfg.max_len);
            let text = noisy_rows(
                text_centers.row(text_class),
                text_len,
                cfg.noise_std,
                &mut rng,
            );
            let audio = if cfg.audio_streams == 2 {
                let half = halve(&Tensor::row_vector(
                    audio_centers.row(audio_class).to_vec(),
                )?);
                vec![
                    noisy_rows(
                        half.data(),
                        audio_len,
                        cfg.noise_std * std::f32::consts::FRAC_1_SQRT_2,
                        &mut rng,
                    ),
                    noisy_rows(
                        half.data(),
                        audio_len,
                        cfg.noise_std * std::f32::consts::FRAC_1_SQRT_2,
                        &mut rng,
                    ),
                ]
            } else {
                vec![noisy_rows(
                    audio_centers.row(audio_class),
                    audio_len,
                    cfg.noise_std,
                    &mut rng,
                )]
            };
            samples.push(SynthSample {
                id: format!("{split}-{i:05}"),
                split,
                label,
                text,
                audio,
                inconsistent,
            });
        }
    }
    Ok(SynthData {
        text_centers,
        audio_centers,
        samples,
    })
}

/// The generated data as a loaded [`Dataset`], without touching disk.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let data = synth_samples(cfg)?;
    let mut ds = Dataset {
        classes: cfg.names(),
        text_dim: cfg.text_dim,
        audio_dim: cfg.audio_dim,
        train: Vec::new(),
        test: Vec::new(),
    };
    for s in data.samples {
        let audio = match s.audio.as_slice() {
            [a] => a.clone(),
            [a, b] => combine_audio(a, b)?,
            _ => unreachable!("one or two streams"),
        };
        let sample = Sample {
            id: s.id,
            text: s.text,
            audio,
            label: s.label,
        };
        match s.split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

/// Writes `manifest.jsonl` and `features/*.lsgt` under `out_dir` and returns
/// the manifest path.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let data = synth_samples(cfg)?;
    let features = out_dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;

    let mut records = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let text = PathBuf::from("features").join(format!("{}.text.lsgt", s.id));
        write_tensor(out_dir.join(&text), &s.text)?;
        let mut audio = Vec::new();
        for (k, a) in s.audio.iter().enumerate() {
            let p = PathBuf::from("features").join(format!("{}.audio{k}.lsgt", s.id));
            write_tensor(out_dir.join(&p), a)?;
            audio.push(p);
        }
        records.push(SampleRecord {
            id: s.id.clone(),
            split: s.split,
            label: s.label,
            text,
            audio,
        });
    }
    let manifest = Manifest {
        header: ManifestHeader {
            schema_version: SCHEMA_VERSION,
            classes: cfg.names(),
            text_dim: cfg.text_dim,
            audio_dim: cfg.audio_dim,
        },
        records,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}
