//! Encoder + optional adapter wired into a single classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AblationConfig, AdapterConfig, AdapterParams, AdapterTrace, SoftmaxAxis};
use crate::dataset::ScenarioNliExample;
use crate::encoder::{self, EncoderConfig, EncoderParams, InputEncoding, Vocabulary};
use crate::scenario;
use crate::error::{Error, Result};
use crate::nn::{self, Dropout};
use crate::params::{derive_seed, Bound, Grads, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Model variant: the full adapter or one named ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    WithoutIsi,
    WithoutVesr,
    WithoutSrvr,
    WithoutIsf,
    WithoutGm,
    WithoutFm,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WithoutIsi,
        Variant::WithoutVesr,
        Variant::WithoutSrvr,
        Variant::WithoutIsf,
        Variant::WithoutGm,
        Variant::WithoutFm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutIsi => "wo-isi",
            Variant::WithoutVesr => "wo-vesr",
            Variant::WithoutSrvr => "wo-srvr",
            Variant::WithoutIsf => "wo-isf",
            Variant::WithoutGm => "wo-gm",
            Variant::WithoutFm => "wo-fm",
        }
    }

    pub fn ablation(self) -> AblationConfig {
        let mut a = AblationConfig::full();
        match self {
            Variant::Full => {}
            Variant::WithoutIsi => a.disable_isi = true,
            Variant::WithoutVesr => a.disable_vesr = true,
            Variant::WithoutSrvr => a.disable_srvr = true,
            Variant::WithoutIsf => a.disable_isf = true,
            Variant::WithoutGm => a.disable_gm = true,
            Variant::WithoutFm => a.disable_fm = true,
        }
        a
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '/'], "-");
        let alias = match norm.as_str() {
            "text-only" | "text" => "wo-isi",
            "w-o-isi" => "wo-isi",
            other => other,
        };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == alias || v.name().replace("wo-", "w-o-") == alias)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub visual_dim: usize,
    pub num_blocks: usize,
    pub adapter_heads: usize,
    pub softmax_axis: SoftmaxAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            visual_dim: crate::scenario::DEFAULT_D_PRIME,
            num_blocks: crate::scenario::DEFAULT_GRID * crate::scenario::DEFAULT_GRID,
            adapter_heads: 4,
            softmax_axis: SoftmaxAxis::Feature,
        }
    }
}

impl ModelConfig {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            text_dim: self.encoder.d_model,
            visual_dim: self.visual_dim,
            width: self.encoder.d_model,
            seq_len: self.encoder.max_len,
            num_blocks: self.num_blocks,
            heads: self.adapter_heads,
            softmax_axis: self.softmax_axis,
        }
    }
}

/// One model input: the encoded pair, its visual blocks and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub encoding: InputEncoding,
    pub visual: Tensor,
    pub label: usize,
}

impl PreparedExample {
    pub fn from_example(
        ex: &ScenarioNliExample,
        vocab: &Vocabulary,
        max_len: usize,
        visual_dim: usize,
    ) -> Result<Self> {
        let encoding = encoder::encode_pair(&ex.premise, &ex.hypothesis, vocab, max_len)?;
        let visual = scenario::encode_scenario(&ex.scenario, visual_dim)?.blocks;
        Ok(PreparedExample {
            encoding,
            visual,
            label: ex.label,
        })
    }
}

/// Prepares every example with the model's sequence length and visual width.
pub fn prepare_all(
    data: &[ScenarioNliExample],
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<PreparedExample>> {
    data.iter()
        .map(|e| PreparedExample::from_example(e, vocab, config.encoder.max_len, config.visual_dim))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScenaFuseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub adapter: Option<AdapterParams>,
    pub ablation: AblationConfig,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub encoder_attention: Vec<Vec<Var>>,
    pub adapter: Option<AdapterTrace>,
}

impl ScenaFuseModel {
    /// Encoder and adapter draw from independent seed streams, so every
    /// variant sharing a seed starts from the same encoder weights.
    pub fn new(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        let ablation = variant.ablation();
        ablation.validate()?;
        let mut store = ParamStore::new();
        let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let encoder = EncoderParams::init(&mut store, &config.encoder, &mut enc_rng)?;
        let adapter = if ablation.disable_isi {
            None
        } else {
            let mut ad_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
            Some(AdapterParams::init(
                &mut store,
                &config.adapter_config(),
                &ablation,
                &mut ad_rng,
            )?)
        };
        Ok(ScenaFuseModel {
            config: config.clone(),
            store,
            encoder,
            adapter,
            ablation,
        })
    }

    /// Whether the adapter takes part in the forward pass.
    pub fn uses_adapter(&self) -> bool {
        self.adapter.is_some() && !self.ablation.disable_isi
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ex: &PreparedExample,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<ForwardOutput> {
        let mask = &ex.encoding.attention_mask;
        let emb = encoder::embed_inputs(tape, bound, &self.encoder, &ex.encoding)?;
        let trace = match (&self.adapter, self.ablation.disable_isi) {
            (Some(ap), false) => {
                let vis = tape.constant(ex.visual.clone());
                Some(adapter::adapter_forward(tape, bound, ap, emb, vis, &self.ablation, mask)?)
            }
            _ => None,
        };
        let out = encoder::encode_from_embeddings(
            tape,
            bound,
            &self.encoder,
            emb,
            mask,
            trace.as_ref().map(|t| t.r),
            dropout,
        )?;
        Ok(ForwardOutput {
            logits: out.logits,
            encoder_attention: out.attention,
            adapter: trace,
        })
    }

    /// Cross-entropy loss and gradients for one example. `dropout_seed` of
    /// `None` or zero `p` gives a deterministic, dropout-free pass.
    pub fn loss_and_grads(
        &self,
        ex: &PreparedExample,
        dropout_p: f64,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Grads, [f64; 3])> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut dropout = match (&mut rng, dropout_p > 0.0) {
            (Some(r), true) => Some(Dropout { p: dropout_p, rng: r }),
            _ => None,
        };
        let out = self.forward(&mut tape, &bound, ex, &mut dropout)?;
        let loss = tape.cross_entropy(out.logits, &[ex.label])?;
        let logits = logits3(&tape, out.logits);
        tape.backward(loss)?;
        Ok((tape.scalar(loss), self.store.collect_grads(&tape, &bound), logits))
    }

    /// Inference logits.
    pub fn logits(&self, ex: &PreparedExample) -> Result<[f64; 3]> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, ex, &mut None)?;
        Ok(logits3(&tape, out.logits))
    }

    /// Loss of one example on a tape (used by gradient checking).
    pub fn loss_on_tape(&self, tape: &mut Tape, bound: &Bound, ex: &PreparedExample) -> Result<Var> {
        let out = self.forward(tape, bound, ex, &mut None)?;
        tape.cross_entropy(out.logits, &[ex.label])
    }

    /// Per-head attention maps for one example, as plain tensors.
    pub fn attention_maps(&self, ex: &PreparedExample) -> Result<AttentionMaps> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, ex, &mut None)?;
        let encoder = out
            .encoder_attention
            .iter()
            .map(|heads| (!heads.is_empty()).then(|| nn::stack_weights(&tape, heads)))
            .collect();
        let (vesr, srvr) = match &out.adapter {
            Some(t) => (
                (!t.vesr_weights.is_empty()).then(|| nn::stack_weights(&tape, &t.vesr_weights)),
                (!t.srvr_weights.is_empty()).then(|| nn::stack_weights(&tape, &t.srvr_weights)),
            ),
            None => (None, None),
        };
        Ok(AttentionMaps {
            encoder,
            visual_over_text: vesr,
            text_over_visual: srvr,
            logits: logits3(&tape, out.logits),
        })
    }
}

pub struct AttentionMaps {
    /// Per block `heads x l x l`; `None` where the adapter replaced the attention.
    pub encoder: Vec<Option<Tensor>>,
    /// `heads x k x l`.
    pub visual_over_text: Option<Tensor>,
    /// `heads x l x k`.
    pub text_over_visual: Option<Tensor>,
    pub logits: [f64; 3],
}

fn logits3(tape: &Tape, v: Var) -> [f64; 3] {
    let l = tape.value(v);
    [l[0], l[1], l[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("text-only".parse::<Variant>().unwrap(), Variant::WithoutIsi);
        assert_eq!("w/o-GM".parse::<Variant>().unwrap(), Variant::WithoutGm);
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn text_only_variant_has_no_adapter_parameters() {
        let m = ScenaFuseModel::new(&ModelConfig::default(), Variant::WithoutIsi, 1).unwrap();
        assert!(m.adapter.is_none());
        assert!(m.store.iter().all(|(n, _)| n.starts_with("encoder/")));
        let full = ScenaFuseModel::new(&ModelConfig::default(), Variant::Full, 1).unwrap();
        assert!(full.store.iter().any(|(n, _)| n.starts_with(adapter::PREFIX)));
        // shared encoder initialization across variants
        for (name, t) in m.store.iter() {
            let id = full.store.find(name).unwrap();
            assert_eq!(full.store.get(id), t);
        }
    }
}
