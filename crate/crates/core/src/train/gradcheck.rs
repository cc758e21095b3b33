//! End-to-end gradient check on a toy-sized model.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, GradCheckReport};
use crate::data_io::Sample;
use crate::error::Result;
use crate::model::{Ablation, Model, ModelDims};
use crate::tensor::{ParamStore, Tensor};

pub const THRESHOLD: f64 = 1e-3;
pub const EPS: f64 = 1e-4;

pub const TOY_DIMS: ModelDims = ModelDims {
    text_dim: 6,
    audio_dim: 5,
    d_model: 8,
    n_heads: 2,
    n_classes: 3,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub report: GradCheckReport,
    pub groups: Vec<GroupResult>,
    pub elapsed: Duration,
}

impl GradCheckSummary {
    pub fn passes(&self) -> bool {
        self.report.passes(THRESHOLD)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= THRESHOLD || g.max_rel_error.is_nan())
            .map(|g| g.group.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>12}  {:<28} status",
            "group", "max rel err", "worst parameter"
        )?;
        for g in &self.groups {
            let status = if g.max_rel_error < THRESHOLD {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<16} {:>12.3e}  {:<28} {status}",
                g.group, g.max_rel_error, g.worst_param
            )?;
        }
        write!(
            f,
            "overall {:.3e} (threshold {THRESHOLD:e}) in {:.2}s",
            self.report.max_rel_error(),
            self.elapsed.as_secs_f64()
        )
    }
}

/// Two random samples of different lengths for the toy model.
pub fn toy_samples(seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..2)
        .map(|i| Sample {
            id: format!("toy{i}"),
            text: Tensor::randn(&[3 + i, TOY_DIMS.text_dim], 1.0, &mut rng),
            audio: Tensor::randn(&[4 - i, TOY_DIMS.audio_dim], 1.0, &mut rng),
            label: i,
        })
        .collect()
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Checks the full objective; `corrupt` may tamper with the analytic
/// gradient of any parameter, by name, before the comparison.
pub fn run_with(seed: u64, mut corrupt: impl FnMut(&str, &mut [f64])) -> Result<GradCheckSummary> {
    let start = Instant::now();
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, TOY_DIMS, seed, 0.99)?;
    let samples = toy_samples(seed);
    let refs: Vec<&Sample> = samples.iter().collect();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let ids = model.all_params();
    let report = grad_check_with(
        &mut store,
        &ids,
        EPS,
        |tape, store| {
            Ok(model
                .batch_loss(tape, store, &refs, Ablation::FULL, 1.0, 0.05)?
                .total)
        },
        |id, g| corrupt(&names[id.0], g),
    )?;

    let mut groups: Vec<GroupResult> = Vec::new();
    for p in &report.params {
        let g = group_of(&p.name);
        match groups.iter_mut().find(|r| r.group == g) {
            Some(r) => {
                if p.max_rel_error > r.max_rel_error {
                    r.max_rel_error = p.max_rel_error;
                    r.worst_param = p.name.clone();
                }
            }
            None => groups.push(GroupResult {
                group: g.to_string(),
                max_rel_error: p.max_rel_error,
                worst_param: p.name.clone(),
            }),
        }
    }
    Ok(GradCheckSummary {
        report,
        groups,
        elapsed: start.elapsed(),
    })
}

pub fn run(seed: u64) -> Result<GradCheckSummary> {
    run_with(seed, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_gradients_pass_every_group() {
        let s = run(0).unwrap();
        assert!(s.passes(), "{s}");
        let groups: Vec<_> = s.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(
            groups,
            [
                "text_encoder",
                "audio_proj",
                "cross_text",
                "cross_audio",
                "enhance_text",
                "enhance_audio",
                "labels",
                "gate",
                "classifier"
            ]
        );
    }

    #[test]
    fn corrupted_group_is_reported() {
        let s = run_with(0, |name, g| {
            if name == "gate.w" {
                g[3] *= 1.5;
            }
        })
        .unwrap();
        assert!(!s.passes());
        assert_eq!(s.failing_groups(), ["gate"]);
        assert!(s.to_string().contains("FAIL"));
    }

    #[test]
    fn repeated_runs_agree() {
        let a = run(4).unwrap();
        let b = run(4).unwrap();
        assert_eq!(a.report, b.report);
    }
}
