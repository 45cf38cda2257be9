//! The full network (encoder, projection, prototype bank, SAE), its forward
//! pass, and the named-tensor checkpoint format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::dataset::{GestureSequence, NormStats};
use crate::detector::{PrototypeBank, ThresholdSet};
use crate::encoder::{encode, project, BlstmParams, ProjectionParams, Readout, SequenceBatch};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::sae::{sae_forward, SaeParams};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-frame feature width; taken from the dataset manifest.
    pub input_width: usize,
    pub sequence_length: usize,
    pub hidden: usize,
    pub layers: usize,
    pub readout: Readout,
    pub prototype_dim: usize,
    pub seen_classes: usize,
    pub prototypes_per_class: usize,
    pub sae_hidden: usize,
    pub attributes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_width: 36,
            sequence_length: 100,
            hidden: 64,
            layers: 3,
            readout: Readout::Final,
            prototype_dim: 20,
            seen_classes: 16,
            prototypes_per_class: 1,
            sae_hidden: 64,
            attributes: 11,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_width", self.input_width),
            ("sequence_length", self.sequence_length),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("prototype_dim", self.prototype_dim),
            ("seen_classes", self.seen_classes),
            ("prototypes_per_class", self.prototypes_per_class),
            ("sae_hidden", self.sae_hidden),
            ("attributes", self.attributes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        2 * self.hidden
    }
}

/// Graph nodes produced by one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `f(x)`, `[B × 2H]`.
    pub feature: Var,
    /// Position in prototype space, `[B × D]`.
    pub projection: Var,
    /// Predicted attributes, `[B × A]`.
    pub semantic: Var,
    /// SAE reconstruction of `feature`.
    pub reconstruction: Var,
}

/// Forward outputs materialized outside any graph, one row per sequence.
#[derive(Clone, Debug)]
pub struct Embeddings<S> {
    pub feature: Tensor<S>,
    pub projection: Tensor<S>,
    pub semantic: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub blstm: BlstmParams,
    pub projection: ProjectionParams,
    pub bank: PrototypeBank,
    pub sae: SaeParams,
    pub thresholds: Option<ThresholdSet>,
    /// Statistics the inputs were normalized with during training.
    pub normalization: Option<NormStats>,
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters; every draw comes from one ChaCha stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let blstm = BlstmParams::init(
            &mut params,
            &mut rng,
            config.input_width,
            config.hidden,
            config.layers,
            config.readout,
        );
        let projection = ProjectionParams::init(
            &mut params,
            &mut rng,
            config.feature_width(),
            config.prototype_dim,
        );
        let bank = PrototypeBank::init(
            &mut params,
            &mut rng,
            config.seen_classes,
            config.prototypes_per_class,
            config.prototype_dim,
        )?;
        let sae = SaeParams::init(
            &mut params,
            &mut rng,
            config.feature_width(),
            config.sae_hidden,
            config.attributes,
        );
        Ok(Model {
            config,
            params,
            blstm,
            projection,
            bank,
            sae,
            thresholds: None,
            normalization: None,
        })
    }

    pub fn prototypes(&self) -> &Tensor<S> {
        self.params.get(self.bank.prototypes)
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        batch: &SequenceBatch<S>,
    ) -> Result<Forward> {
        let feature = encode(g, bound, &self.blstm, batch)?;
        let projection = project(g, bound, &self.projection, feature)?;
        let (semantic, reconstruction) = sae_forward(g, bound, &self.sae, feature)?;
        Ok(Forward {
            feature,
            projection,
            semantic,
            reconstruction,
        })
    }

    /// Applies the stored normalization (if any) and stacks the sequences.
    pub fn batch_of(&self, seqs: &[&GestureSequence]) -> Result<SequenceBatch<S>> {
        let normalized: Vec<Vec<f64>>;
        let frames: Vec<&[f64]> = match &self.normalization {
            Some(stats) => {
                normalized = seqs.iter().map(|s| stats.apply(s)).collect::<Result<_>>()?;
                normalized.iter().map(Vec::as_slice).collect()
            }
            None => seqs.iter().map(|s| s.frames.as_slice()).collect(),
        };
        for s in seqs {
            if s.steps != self.config.sequence_length {
                return Err(Error::dim(
                    "sequence length",
                    &[s.steps],
                    &[self.config.sequence_length],
                ));
            }
        }
        SequenceBatch::from_sequences(
            &frames,
            self.config.sequence_length,
            self.config.input_width,
        )
    }

    /// Inference pass over `seqs` in chunks of `chunk` sequences.
    pub fn embed(&self, seqs: &[&GestureSequence], chunk: usize) -> Result<Embeddings<S>> {
        let (fw, pw, aw) = (
            self.config.feature_width(),
            self.config.prototype_dim,
            self.config.attributes,
        );
        let mut feature = Vec::with_capacity(seqs.len() * fw);
        let mut projection = Vec::with_capacity(seqs.len() * pw);
        let mut semantic = Vec::with_capacity(seqs.len() * aw);
        for part in seqs.chunks(chunk.max(1)) {
            let batch = self.batch_of(part)?;
            let mut g = Graph::new();
            let bound = self.bind(&mut g, |_| false);
            let out = self.forward(&mut g, &bound, &batch)?;
            feature.extend_from_slice(g.value(out.feature).data());
            projection.extend_from_slice(g.value(out.projection).data());
            semantic.extend_from_slice(g.value(out.semantic).data());
        }
        let n = seqs.len();
        Ok(Embeddings {
            feature: Tensor::new(vec![n, fw], feature)?,
            projection: Tensor::new(vec![n, pw], projection)?,
            semantic: Tensor::new(vec![n, aw], semantic)?,
        })
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: S::NAME.to_string(),
            model: self.config.clone(),
            train: train.cloned(),
            normalization: self.normalization.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, group, t)| NamedTensor {
                    name: name.to_string(),
                    group,
                    shape: t.shape().to_vec(),
                    values: t.to_f64_vec(),
                })
                .collect(),
            thresholds: self.thresholds.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.precision != S::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, loading as {}",
                ck.precision,
                S::NAME
            )));
        }
        let mut model = Model::<S>::new(ck.model.clone(), 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ck.tensors.len()
            )));
        }
        for named in &ck.tensors {
            let id = model
                .params
                .find(&named.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", named.name)))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != named.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    named.name,
                    named.shape,
                    slot.shape()
                )));
            }
            let t = Tensor::from_f64(&named.shape, &named.values)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", named.name)))?;
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} holds non-finite values",
                    named.name
                )));
            }
            *slot = t;
        }
        if let Some(th) = &ck.thresholds {
            th.validate()?;
            if th.classes != model.bank.classes || th.per_class != model.bank.per_class {
                return Err(Error::Checkpoint(
                    "threshold set does not match the prototype bank".into(),
                ));
            }
        }
        model.thresholds = ck.thresholds.clone();
        model.normalization = ck.normalization.clone();
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk model: named tensors with shapes, optional thresholds, and an echo
/// of the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub normalization: Option<NormStats>,
    pub tensors: Vec<NamedTensor>,
    pub thresholds: Option<ThresholdSet>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_width: 4,
            sequence_length: 5,
            hidden: 3,
            layers: 2,
            prototype_dim: 2,
            seen_classes: 3,
            sae_hidden: 4,
            attributes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f64>::new(small(), 11).unwrap();
        let b = Model::<f64>::new(small(), 11).unwrap();
        let c = Model::<f64>::new(small(), 12).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model::<f32>::new(small(), 3).unwrap();
        m.thresholds = Some(ThresholdSet::uniform(3, 1, 0.25));
        let ck = m.to_checkpoint(None);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        let m2 = Model::<f32>::from_checkpoint(&back).unwrap();
        assert_eq!(m.params, m2.params);
        assert_eq!(m2.thresholds, m.thresholds);
        assert!(Model::<f64>::from_checkpoint(&back).is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_shapes_and_versions() {
        let m = Model::<f64>::new(small(), 3).unwrap();
        let mut ck = m.to_checkpoint(None);
        ck.tensors[0].shape = vec![1];
        assert!(Model::<f64>::from_checkpoint(&ck).is_err());
        let mut ck = m.to_checkpoint(None);
        ck.version = 99;
        assert!(Model::<f64>::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn zero_config_fields_are_rejected() {
        let cfg = ModelConfig {
            hidden: 0,
            ..small()
        };
        assert!(Model::<f64>::new(cfg, 0).is_err());
    }
}
