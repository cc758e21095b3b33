//! Dataset manifests.
//!
//! A manifest is a JSON-lines file. The first line is a header, every
//! following non-blank line is one sample record; paths are relative to the
//! manifest's directory.
//!
//! ```text
//! {"schema_version":1,"classes":["ang","hap","neu","sad"],"text_dim":768,"audio_dim":1024}
//! {"id":"s0","split":"train","label":2,"text":"f/s0.text.lsgt","audio":["f/s0.audio.lsgt"]}
//! {"id":"s1","split":"test","label":0,"text":"f/s1.text.lsgt","audio":["f/s1.wavlm.lsgt","f/s1.spectral.lsgt"]}
//! ```
//!
//! A record with two audio paths is summed elementwise at load time.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::read_tensor;
use crate::encoders::{combine_audio, AUDIO_DIM, TEXT_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub classes: Vec<String>,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    #[serde(default = "default_audio_dim")]
    pub audio_dim: usize,
}

fn default_text_dim() -> usize {
    TEXT_DIM
}

fn default_audio_dim() -> usize {
    AUDIO_DIM
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub text: PathBuf,
    pub audio: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, htext) = lines
            .next()
            .ok_or_else(|| err(1, "missing header line".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(htext).map_err(|e| err(hline, format!("header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(err(
                hline,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        if header.classes.len() < 2 {
            return Err(err(hline, "at least two classes are required".into()));
        }
        if header.text_dim == 0 || header.audio_dim == 0 {
            return Err(err(hline, "feature dims must be positive".into()));
        }

        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (line, l) in lines {
            let rec: SampleRecord =
                serde_json::from_str(l).map_err(|e| err(line, e.to_string()))?;
            if rec.label >= header.classes.len() {
                return Err(err(
                    line,
                    Error::ClassOutOfRange {
                        class: rec.label,
                        n_classes: header.classes.len(),
                    }
                    .to_string(),
                ));
            }
            if !(1..=2).contains(&rec.audio.len()) {
                return Err(err(
                    line,
                    format!("expected 1 or 2 audio paths, got {}", rec.audio.len()),
                ));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(err(line, format!("duplicate sample id {:?}", rec.id)));
            }
            records.push(rec);
        }
        Ok(Self {
            header,
            records,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// One labelled utterance with its feature sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[n × text_dim]`
    pub text: Tensor,
    /// `[m × audio_dim]`, already summed when two streams were given.
    pub audio: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// The split's samples, or [`Error::EmptySplit`].
    pub fn nonempty(&self, split: Split) -> Result<&[Sample]> {
        let s = self.split(split);
        if s.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(s)
    }
}

fn check_features(path: &Path, t: &Tensor, dim: usize, kind: &str) -> Result<()> {
    match t.shape() {
        [_, d] if *d == dim => Ok(()),
        s => Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{kind} features have shape {s:?}, expected [len, {dim}]"),
        }),
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    dataset_from_manifest(&manifest)
}

pub fn dataset_from_manifest(manifest: &Manifest) -> Result<Dataset> {
    let h = &manifest.header;
    let mut ds = Dataset {
        classes: h.classes.clone(),
        text_dim: h.text_dim,
        audio_dim: h.audio_dim,
        train: Vec::new(),
        test: Vec::new(),
    };
    for rec in &manifest.records {
        let tpath = manifest.resolve(&rec.text);
        let text = read_tensor(&tpath)?;
        check_features(&tpath, &text, h.text_dim, "text")?;

        let apath = manifest.resolve(&rec.audio[0]);
        let mut audio = read_tensor(&apath)?;
        check_features(&apath, &audio, h.audio_dim, "audio")?;
        if let Some(second) = rec.audio.get(1) {
            let spath = manifest.resolve(second);
            let other = read_tensor(&spath)?;
            check_features(&spath, &other, h.audio_dim, "audio")?;
            audio = combine_audio(&audio, &other)?;
        }
        let sample = Sample {
            id: rec.id.clone(),
            text,
            audio,
            label: rec.label,
        };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}
