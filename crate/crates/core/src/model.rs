//! The shared encoder plus every task's per-layer classifiers and certainty
//! estimators, all living in one [`ParamStore`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, LayerStates, Linear, PackedInput, Pass};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::task::TaskKind;
use crate::tensor::{Tape, Var};

/// How sentence pairs reach the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPacking {
    /// `[CLS] a [SEP] b [SEP]` as one token sequence.
    ConcatFirst,
    /// Each sentence embedded alone, embeddings concatenated row-wise.
    EmbedFirst,
}

impl std::str::FromStr for PairPacking {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "concat_first" => Ok(Self::ConcatFirst),
            "embed_first" => Ok(Self::EmbedFirst),
            o => Err(Error::Config(format!(
                "unknown pair packing {o:?} (expected concat_first or embed_first)"
            ))),
        }
    }
}

impl PairPacking {
    pub fn name(self) -> &'static str {
        match self {
            Self::ConcatFirst => "concat_first",
            Self::EmbedFirst => "embed_first",
        }
    }
}

/// Output head used for paraphrase detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaHead {
    /// One logit on the pair's pooled vector.
    Logit,
    /// Cosine between two weight-sharing towers' pooled vectors.
    Cosine,
}

impl std::str::FromStr for ParaHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "logit" => Ok(Self::Logit),
            "cosine" => Ok(Self::Cosine),
            o => Err(Error::Config(format!(
                "unknown paraphrase head {o:?} (expected logit or cosine)"
            ))),
        }
    }
}

impl ParaHead {
    pub fn name(self) -> &'static str {
        match self {
            Self::Logit => "logit",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pair_packing: PairPacking,
    pub para_head: ParaHead,
    pub cosine_margin: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            pair_packing: PairPacking::ConcatFirst,
            para_head: ParaHead::Logit,
            cosine_margin: 0.0,
        }
    }

    /// Whether `task` is encoded as two separate towers.
    pub fn is_siamese(&self, task: TaskKind) -> bool {
        task == TaskKind::Para && self.para_head == ParaHead::Cosine
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.cosine_margin) {
            return Err(Error::Config(format!(
                "cosine margin must lie in [0, 1), got {}",
                self.cosine_margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultitaskModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// `heads[task][i]` is the classifier attached to layer `i`; the last one
    /// is the task's final head. Cosine paraphrase has no entry.
    pub heads: BTreeMap<TaskKind, Vec<Linear>>,
    /// One certainty estimator per task, shared across layers.
    pub lte: BTreeMap<TaskKind, Linear>,
}

impl MultitaskModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let hidden = config.encoder.hidden;
        let mut heads = BTreeMap::new();
        let mut lte = BTreeMap::new();
        for task in TaskKind::ALL {
            if !config.is_siamese(task) {
                let bank = (0..config.encoder.num_layers)
                    .map(|i| {
                        Linear::new(
                            &mut store,
                            &format!("head.{task}.{i}"),
                            ParamGroup::Head { task, layer: i },
                            hidden,
                            task.head_arity(),
                            &mut rng,
                        )
                    })
                    .collect();
                heads.insert(task, bank);
            }
            let est = Linear::new(
                &mut store,
                &format!("lte.{task}"),
                ParamGroup::Lte(task),
                hidden,
                1,
                &mut rng,
            );
            lte.insert(task, est);
        }
        Ok(Self {
            config,
            store,
            encoder,
            heads,
            lte,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.encoder.num_layers()
    }

    /// Reject inputs whose packing does not suit `task` under this model's configuration.
    pub fn check_packing(&self, task: TaskKind, input: &PackedInput) -> Result<()> {
        let ok = match (task, input) {
            (TaskKind::Sst, PackedInput::Single(_)) => true,
            (TaskKind::Sst, _) => false,
            (t, PackedInput::Siamese(_)) => self.config.is_siamese(t),
            (t, PackedInput::EmbedFirst { .. }) => {
                !self.config.is_siamese(t) && self.config.pair_packing == PairPacking::EmbedFirst
            }
            (t, PackedInput::Single(_)) => {
                !self.config.is_siamese(t) && self.config.pair_packing == PairPacking::ConcatFirst
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{task} cannot consume {} input with pair packing {} and paraphrase head {}",
                match input {
                    PackedInput::Single(_) => "single-sequence",
                    PackedInput::EmbedFirst { .. } => "embed-first",
                    PackedInput::Siamese(_) => "two-tower",
                },
                self.config.pair_packing.name(),
                self.config.para_head.name()
            )))
        }
    }

    /// Encode `input` for `task`, running the first `depth` layers.
    pub fn encode(
        &self,
        tape: &mut Tape,
        task: TaskKind,
        input: &PackedInput,
        pass: &mut Pass,
        perturb: Option<Var>,
        depth: usize,
    ) -> Result<LayerStates> {
        self.check_packing(task, input)?;
        self.encoder
            .encode_to_depth(tape, &self.store, input, pass, perturb, depth)
    }

    /// Pooled vector per example at layer `i`: `[batch, H]`. For two-tower
    /// input this is the first tower's `[CLS]` row.
    pub fn pooled(&self, tape: &mut Tape, states: &LayerStates, task: TaskKind, layer: usize) -> Result<Var> {
        let cls = states.cls[layer];
        if self.config.is_siamese(task) {
            let b = states.layout.batch / 2;
            tape.gather_rows(cls, &(0..b).collect::<Vec<_>>())
        } else {
            Ok(cls)
        }
    }

    /// Raw output of `task`'s classifier at layer `i`: SST logits `[B, 5]`,
    /// paraphrase logit or cosine `[B, 1]`, STS score `[B, 1]`.
    pub fn layer_output(&self, tape: &mut Tape, states: &LayerStates, task: TaskKind, layer: usize) -> Result<Var> {
        if layer >= states.cls.len() {
            return Err(Error::Contract(format!(
                "layer {layer} was not computed ({} available)",
                states.cls.len()
            )));
        }
        let cls = states.cls[layer];
        if self.config.is_siamese(task) {
            let b = states.layout.batch / 2;
            let u = tape.gather_rows(cls, &(0..b).collect::<Vec<_>>())?;
            let v = tape.gather_rows(cls, &(b..2 * b).collect::<Vec<_>>())?;
            let cos = crate::heads::cosine_rows(tape, u, v)?;
            return tape.reshape(cos, &[b, 1]);
        }
        let bank = self
            .heads
            .get(&task)
            .ok_or_else(|| Error::Config(format!("no classifier bank for {task}")))?;
        bank[layer].forward(tape, &self.store, cls)
    }

    /// `u = σ(cᵀh + b)` per example at layer `i`, `[B, 1]`.
    pub fn certainty(&self, tape: &mut Tape, states: &LayerStates, task: TaskKind, layer: usize) -> Result<Var> {
        let pooled = self.pooled(tape, states, task, layer)?;
        let z = self.lte[&task].forward(tape, &self.store, pooled)?;
        Ok(tape.sigmoid(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pack_single, SeqBatch};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig::new(EncoderConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            ffn_width: 16,
            dropout_p: 0.0,
            vocab_size: 20,
            max_len: 16,
            layer_norm_eps: 1e-12,
        })
    }

    #[test]
    fn banks_cover_every_layer() {
        let m = MultitaskModel::new(tiny_config(), 1).unwrap();
        for t in TaskKind::ALL {
            assert_eq!(m.heads[&t].len(), 2);
            assert_eq!(m.store.get(m.heads[&t][0].weight).value().shape(), &[8, t.head_arity()]);
        }
        let mut cfg = tiny_config();
        cfg.para_head = ParaHead::Cosine;
        let m = MultitaskModel::new(cfg, 1).unwrap();
        assert!(!m.heads.contains_key(&TaskKind::Para));
        assert!(m.lte.contains_key(&TaskKind::Para));
    }

    #[test]
    fn packing_mismatch_is_a_config_error() {
        let m = MultitaskModel::new(tiny_config(), 1).unwrap();
        let s = SeqBatch::from_sequences(&[pack_single(&[5, 6], 16)]).unwrap();
        let siamese =
            PackedInput::Siamese(SeqBatch::from_sequences(&[pack_single(&[5], 16), pack_single(&[6], 16)]).unwrap());
        assert!(matches!(
            m.check_packing(TaskKind::Para, &siamese),
            Err(Error::Config(_))
        ));
        assert!(m.check_packing(TaskKind::Sst, &PackedInput::Single(s.clone())).is_ok());
        let ef = PackedInput::EmbedFirst { a: s.clone(), b: s };
        assert!(matches!(m.check_packing(TaskKind::Sts, &ef), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MultitaskModel::new(tiny_config(), 9).unwrap();
        let b = MultitaskModel::new(tiny_config(), 9).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value(), q.value());
        }
    }
}
