//! The full network: encoders, cross-modal attention, label enhancement,
//! gated fusion and the classifier, plus the training objective over a
//! mini-batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_modal_pair, MhaParams};
use crate::autodiff::{Tape, Var};
use crate::data_io::Sample;
use crate::encoders::{bilstm_encode, mean_pool, project_audio, BiLstmParams, ProjectionParams};
use crate::error::{Error, Result};
use crate::fusion_head::{classify, fuse, gate, ClassifierParams, GateParams};
use crate::lsma::{enhance, LabelEmbeddings};
use crate::objective::graph;
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub text_dim: usize,
    pub audio_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_classes: usize,
}

/// Which optional components take part in a forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub lsma: bool,
    pub joo: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        lsma: true,
        joo: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub text_encoder: BiLstmParams,
    pub audio_proj: ProjectionParams,
    /// Text queries over audio.
    pub cross_text: MhaParams,
    /// Audio queries over text.
    pub cross_audio: MhaParams,
    pub enhance_text: MhaParams,
    pub enhance_audio: MhaParams,
    pub labels: LabelEmbeddings,
    pub gate: GateParams,
    pub classifier: ClassifierParams,
}

/// Per-sample activations of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleForward {
    pub text_vec: Var,
    pub audio_vec: Var,
    pub g_audio: Var,
    pub g_text: Var,
    pub fused: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub samples: Vec<SampleForward>,
    /// `[M × N]`
    pub logits: Var,
    pub ce: Var,
    /// `None` when the consistency term is switched off.
    pub apc: Option<Var>,
    pub total: Var,
}

impl Model {
    /// Registers every parameter in a fixed order. The result does not
    /// depend on which ablation will be used.
    pub fn init(store: &mut ParamStore, dims: ModelDims, seed: u64, ma_alpha: f64) -> Result<Self> {
        if dims.n_classes < 2 {
            return Err(Error::invalid(
                "model",
                format!("need at least two classes, got {}", dims.n_classes),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_model;
        let text_encoder = BiLstmParams::init(store, "text_encoder", dims.text_dim, d, &mut rng)?;
        let audio_proj = ProjectionParams::init(store, "audio_proj", dims.audio_dim, d, &mut rng);
        let cross_text = MhaParams::init(store, "cross_text", d, dims.n_heads, &mut rng)?;
        let cross_audio = MhaParams::init(store, "cross_audio", d, dims.n_heads, &mut rng)?;
        let enhance_text = MhaParams::init(store, "enhance_text", d, dims.n_heads, &mut rng)?;
        let enhance_audio = MhaParams::init(store, "enhance_audio", d, dims.n_heads, &mut rng)?;
        let labels = LabelEmbeddings::init(store, dims.n_classes, d, rng.random(), ma_alpha)?;
        let gate = GateParams::init(store, "gate", d, &mut rng);
        let classifier =
            ClassifierParams::init(store, "classifier", d, d, dims.n_classes, &mut rng);
        Ok(Self {
            dims,
            text_encoder,
            audio_proj,
            cross_text,
            cross_audio,
            enhance_text,
            enhance_audio,
            labels,
            gate,
            classifier,
        })
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.params_for(Ablation::FULL)
    }

    /// Parameters that receive gradients under `ablation`.
    pub fn params_for(&self, ablation: Ablation) -> Vec<ParamId> {
        let mut ids = self.text_encoder.ids();
        ids.extend(self.audio_proj.ids());
        ids.extend(self.cross_text.ids());
        ids.extend(self.cross_audio.ids());
        if ablation.lsma {
            ids.extend(self.enhance_text.ids());
            ids.extend(self.enhance_audio.ids());
        }
        if ablation.lsma || ablation.joo {
            ids.push(self.labels.param);
        }
        ids.extend(self.gate.ids());
        ids.extend(self.classifier.ids());
        ids
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        let ok = |shape: &[usize], d: usize| matches!(shape, [n, c] if *n > 0 && *c == d);
        if !ok(s.text.shape(), self.dims.text_dim) || !ok(s.audio.shape(), self.dims.audio_dim) {
            return Err(Error::invalid(
                "model",
                format!(
                    "sample {} has text {:?} / audio {:?}, model expects {} / {} columns",
                    s.id,
                    s.text.shape(),
                    s.audio.shape(),
                    self.dims.text_dim,
                    self.dims.audio_dim
                ),
            ));
        }
        if s.label >= self.dims.n_classes {
            return Err(Error::ClassOutOfRange {
                class: s.label,
                n_classes: self.dims.n_classes,
            });
        }
        Ok(())
    }

    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        lsma: bool,
    ) -> Result<SampleForward> {
        self.check_sample(sample)?;
        let text = tape.constant(&sample.text);
        let audio = tape.constant(&sample.audio);
        let h_t0 = bilstm_encode(tape, store, text, &self.text_encoder)?;
        let h_a0 = project_audio(tape, store, audio, &self.audio_proj)?;
        let (h_t1, h_a1) =
            cross_modal_pair(tape, store, h_t0, h_a0, &self.cross_text, &self.cross_audio)?;
        let (text_vec, audio_vec) = if lsma {
            (
                enhance(tape, store, &self.labels, h_t1, h_t0, &self.enhance_text)?,
                enhance(tape, store, &self.labels, h_a1, h_a0, &self.enhance_audio)?,
            )
        } else {
            (mean_pool(tape, h_t1)?, mean_pool(tape, h_a1)?)
        };
        let (g_audio, g_text) = gate(tape, store, audio_vec, text_vec, &self.gate)?;
        let fused = fuse(tape, audio_vec, text_vec, g_audio, g_text)?;
        let (logits, _) = classify(tape, store, fused, &self.classifier)?;
        Ok(SampleForward {
            text_vec,
            audio_vec,
            g_audio,
            g_text,
            fused,
            logits,
        })
    }

    /// Batch-mean objective `ce_weight·CE + apc_weight·APC`; the consistency
    /// term is not built at all when `ablation.joo` is off.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&Sample],
        ablation: Ablation,
        ce_weight: f64,
        apc_weight: f64,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::invalid("batch_loss", "empty batch"));
        }
        let samples = batch
            .iter()
            .map(|s| self.forward_sample(tape, store, s, ablation.lsma))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.stack_rows(&samples.iter().map(|f| f.logits).collect::<Vec<_>>())?;
        let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let ce = graph::ce_loss(tape, logits, &targets)?;
        let (apc, total) = if ablation.joo {
            let fused = tape.stack_rows(&samples.iter().map(|f| f.fused).collect::<Vec<_>>())?;
            let p = tape.softmax(logits, 1)?;
            let labels = tape.param(store, self.labels.param);
            let apc = graph::apc_loss(tape, fused, labels, p)?;
            (
                Some(apc),
                graph::total_loss(tape, ce, apc, ce_weight, apc_weight)?,
            )
        } else {
            (None, tape.scale(ce, ce_weight))
        };
        Ok(BatchForward {
            samples,
            logits,
            ce,
            apc,
            total,
        })
    }

    /// Predicted class for each sample, without recording gradients.
    pub fn predict(
        &self,
        store: &ParamStore,
        samples: &[Sample],
        lsma: bool,
    ) -> Result<Vec<usize>> {
        samples
            .iter()
            .map(|s| {
                let mut tape = Tape::inference();
                let f = self.forward_sample(&mut tape, store, s, lsma)?;
                Ok(argmax(tape.value_f64(f.logits)))
            })
            .collect()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Tensor;

    pub(crate) fn toy_dims() -> ModelDims {
        ModelDims {
            text_dim: 6,
            audio_dim: 5,
            d_model: 8,
            n_heads: 2,
            n_classes: 3,
        }
    }

    fn toy_samples(seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2)
            .map(|i| Sample {
                id: format!("s{i}"),
                text: Tensor::randn(&[3 + i, 6], 1.0, &mut rng),
                audio: Tensor::randn(&[4 - i, 5], 1.0, &mut rng),
                label: i,
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_names_are_unique() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ma = Model::init(&mut a, toy_dims(), 3, 0.99).unwrap();
        let mb = Model::init(&mut b, toy_dims(), 3, 0.99).unwrap();
        assert_eq!(ma, mb);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.name, y.name);
            assert!(x.value.bit_eq(&y.value));
        }
        assert_eq!(ma.all_params().len(), a.len());
    }

    #[test]
    fn ablation_parameter_sets() {
        let mut store = ParamStore::new();
        let m = Model::init(&mut store, toy_dims(), 0, 0.99).unwrap();
        let full = m.params_for(Ablation::FULL).len();
        let no_joo = m
            .params_for(Ablation {
                lsma: true,
                joo: false,
            })
            .len();
        let bare = m.params_for(Ablation {
            lsma: false,
            joo: false,
        });
        assert_eq!(full, no_joo);
        assert_eq!(bare.len(), full - 9);
        assert!(!bare.contains(&m.labels.param));
        assert!(m
            .params_for(Ablation {
                lsma: false,
                joo: true
            })
            .contains(&m.labels.param));
    }

    #[test]
    fn shapes_and_gate_simplex() {
        let mut store = ParamStore::new();
        let m = Model::init(&mut store, toy_dims(), 1, 0.99).unwrap();
        let samples = toy_samples(4);
        let refs: Vec<_> = samples.iter().collect();
        let mut tape = Tape::new();
        let out = m
            .batch_loss(&mut tape, &store, &refs, Ablation::FULL, 1.0, 0.05)
            .unwrap();
        assert_eq!(tape.shape(out.logits), [2, 3]);
        for f in &out.samples {
            assert_eq!(tape.shape(f.fused), [1, 8]);
            let g = tape.scalar(f.g_audio) + tape.scalar(f.g_text);
            assert!((g - 1.0).abs() < 1e-12);
        }
        let expected = tape.scalar(out.ce) + 0.05 * tape.scalar(out.apc.unwrap());
        assert!((tape.scalar(out.total) - expected).abs() < 1e-12);
    }

    #[test]
    fn joo_switch_leaves_activations_alone() {
        let mut store = ParamStore::new();
        let m = Model::init(&mut store, toy_dims(), 1, 0.99).unwrap();
        let samples = toy_samples(5);
        let refs: Vec<_> = samples.iter().collect();
        let mut on = Tape::new();
        let mut off = Tape::new();
        let a = m
            .batch_loss(&mut on, &store, &refs, Ablation::FULL, 1.0, 0.05)
            .unwrap();
        let b = m
            .batch_loss(
                &mut off,
                &store,
                &refs,
                Ablation {
                    lsma: true,
                    joo: false,
                },
                1.0,
                0.0,
            )
            .unwrap();
        assert!(b.apc.is_none());
        assert_eq!(on.value_f64(a.logits), off.value_f64(b.logits));
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(on.value_f64(x.fused), off.value_f64(y.fused));
        }
        assert_eq!(off.scalar(b.total), off.scalar(b.ce));
    }

    #[test]
    fn lsma_bypass_uses_pooled_cross_features() {
        let mut store = ParamStore::new();
        let m = Model::init(&mut store, toy_dims(), 2, 0.99).unwrap();
        let s = &toy_samples(6)[0];
        let mut tape = Tape::new();
        let f = m.forward_sample(&mut tape, &store, s, false).unwrap();
        let text = tape.constant(&s.text);
        let audio = tape.constant(&s.audio);
        let h_t0 = bilstm_encode(&mut tape, &store, text, &m.text_encoder).unwrap();
        let h_a0 = project_audio(&mut tape, &store, audio, &m.audio_proj).unwrap();
        let (h_t1, _) =
            cross_modal_pair(&mut tape, &store, h_t0, h_a0, &m.cross_text, &m.cross_audio).unwrap();
        let pooled = mean_pool(&mut tape, h_t1).unwrap();
        assert_eq!(tape.value_f64(pooled), tape.value_f64(f.text_vec));
    }

    #[test]
    fn rejects_mismatched_samples() {
        let mut store = ParamStore::new();
        let m = Model::init(&mut store, toy_dims(), 0, 0.99).unwrap();
        let mut s = toy_samples(0).remove(0);
        s.label = 3;
        assert!(matches!(
            m.check_sample(&s),
            Err(Error::ClassOutOfRange { .. })
        ));
        s.label = 0;
        s.audio = Tensor::zeros(&[2, 4]);
        assert!(m.check_sample(&s).is_err());
    }

    #[test]
    fn full_objective_gradients() {
        let mut store = ParamStore::new();
        let m = Model::init(&mut store, toy_dims(), 11, 0.99).unwrap();
        let samples = toy_samples(12);
        let refs: Vec<_> = samples.iter().collect();
        let ids = m.all_params();
        let report = grad_check(&mut store, &ids, 1e-4, |tape, store| {
            Ok(m.batch_loss(tape, store, &refs, Ablation::FULL, 1.0, 0.05)?
                .total)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:#?}");
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
