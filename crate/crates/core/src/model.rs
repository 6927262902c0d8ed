//! Parameter layout and the end-to-end forward pass.

use crate::config::{ModelConfig, SearchInit};
use crate::corpus::{embed, embed_triplets, DialogSample, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::fusion::{fc_fuse, gate_fuse};
use crate::generator::{build_prefix, decode, decoder_param_shapes, mle_loss, DecoderWeights, Hypothesis};
use crate::numerics::{seeded_rng, uniform_init, Bound, ParamStore, Tape, Tensor, Var};
use crate::text_encoder::{encode_text, PathTrace, SearchMap};
use crate::visual_encoder::{attention_param_shapes, iterate_reasoning, project_video, AttentionNets, BlockWeights};
use crate::config::DecodeConfig;

/// Every parameter the configuration uses, with its shape. Components
/// removed by an ablation own no parameters.
pub fn param_shapes(cfg: &ModelConfig, vocab: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let a = &cfg.ablation;
    let mut v = vec![("embedding".to_string(), vec![vocab, d])];
    if !a.no_text_encoder {
        v.push(("text.f_t.weight".into(), vec![2 * d, d]));
        v.push(("text.f_t.bias".into(), vec![d]));
        v.push(("text.w1".into(), vec![d, d]));
    }
    v.push(("visual.proj.weight".into(), vec![cfg.raw_dim, d]));
    v.push(("visual.proj.bias".into(), vec![d]));
    v.push(("visual.norm.gamma".into(), vec![d]));
    v.push(("visual.norm.beta".into(), vec![d]));
    if !a.no_visual_encoder {
        v.extend(attention_param_shapes(d, a.single_attention));
    }
    if !a.no_text_encoder && !a.no_visual_encoder {
        if a.uses_fc_fusion() {
            v.push(("fusion.fc.weight".into(), vec![2 * d, d]));
            v.push(("fusion.fc.bias".into(), vec![d]));
        } else {
            v.push(("fusion.gate.weight".into(), vec![3 * d, d]));
        }
    }
    v.extend(decoder_param_shapes(
        d,
        cfg.ffn_dim,
        cfg.decoder_layers,
        vocab,
        cfg.max_positions,
        cfg.tie_output,
    ));
    v
}

fn initial_value(cfg: &ModelConfig, name: &str, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let d = cfg.d;
    if name.ends_with("gamma") {
        return Tensor::full(shape, 1.0);
    }
    if name.ends_with("beta") || name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        return Tensor::zeros(shape);
    }
    if name == "text.f_t.weight" && cfg.search_init == SearchInit::Averaging {
        let mut w = Tensor::zeros(shape);
        for i in 0..d {
            w.data_mut()[i * d + i] = 0.5;
            w.data_mut()[(d + i) * d + i] = 0.5;
        }
        return w;
    }
    let fan_in = match name {
        "embedding" | "decoder.pos" => d,
        _ => shape[0],
    };
    let mut t = uniform_init(rng, shape, fan_in);
    if name == "embedding" {
        t.row_mut(PAD).fill(0.0);
    }
    t
}

/// A configured model with its vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// What the encoders hand to the decoder, plus their diagnostics.
pub struct Encoded<'t> {
    pub prefix: Var<'t>,
    pub decoder: DecoderWeights<'t>,
    pub trace: Option<PathTrace>,
    pub joint_weights: Option<Tensor>,
}

impl Model {
    /// Seeded initialisation; parameters are drawn in name order.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let mut params = ParamStore::new();
        let mut shapes = param_shapes(&config, vocab.len());
        shapes.sort();
        for (name, shape) in shapes {
            let t = initial_value(&config, &name, &shape, &mut rng);
            params.insert(name, t);
        }
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params(&self) -> Result<()> {
        let expected = param_shapes(&self.config, self.vocab.len());
        if expected.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Dimension {
                        op: "parameter",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Input(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    fn windowed<'s>(&self, sample: &'s DialogSample) -> std::borrow::Cow<'s, DialogSample> {
        match self.config.turns_window {
            Some(k) => std::borrow::Cow::Owned(sample.with_turns_window(k)),
            None => std::borrow::Cow::Borrowed(sample),
        }
    }

    /// Runs both encoders and fusion and lays out the decoder prefix.
    pub fn encode<'t>(&self, bound: &Bound<'t>, sample: &DialogSample) -> Result<Encoded<'t>> {
        let cfg = &self.config;
        let a = &cfg.ablation;
        let sample = self.windowed(sample);
        let tape = bound.get("embedding").tape();
        let table = bound.get("embedding");
        if sample.video.shape() != [cfg.frames, cfg.objects, cfg.raw_dim] {
            return Err(Error::Dimension {
                op: "video features",
                lhs: vec![cfg.frames, cfg.objects, cfg.raw_dim],
                rhs: sample.video.shape().to_vec(),
            });
        }
        let question = embed(sample.question(), table)?;

        let (text_question, history, trace) = if a.no_text_encoder {
            let words: Vec<usize> = sample
                .history()
                .iter()
                .flat_map(|u| u.question.iter().chain(&u.answer).copied())
                .collect();
            let history = if words.is_empty() {
                None
            } else {
                Some(embed(&words, table)?)
            };
            (None, history, None)
        } else {
            let f_t = SearchMap {
                weight: (*bound.get("text.f_t.weight").value()).clone(),
                bias: (*bound.get("text.f_t.bias").value()).clone(),
            };
            let out = encode_text(
                embed_triplets(&sample.utterances, table)?,
                question,
                &sample.question_entity_positions(),
                cfg.threshold,
                &f_t,
                bound.get("text.w1"),
            )?;
            (Some(out.question), out.history, Some(out.trace))
        };

        let raw = tape.constant(sample.video_matrix());
        let video = project_video(
            raw,
            bound.get("visual.proj.weight"),
            bound.get("visual.proj.bias"),
            bound.get("visual.norm.gamma"),
            bound.get("visual.norm.beta"),
            cfg.layer_norm_eps,
        )?;

        let (visual_question, video, joint_weights) = if a.no_visual_encoder {
            (None, video, None)
        } else {
            let nets = AttentionNets::from_bound(bound, cfg.heads, a.single_attention);
            let q_in = match text_question {
                Some(t) if cfg.visual_uses_text_enhanced => t,
                _ => question,
            };
            let mode = if a.no_weight_matrix {
                BlockWeights::Unit
            } else if cfg.normalize_block_sums {
                BlockWeights::Mean
            } else {
                BlockWeights::Sum
            };
            let r = iterate_reasoning(q_in, video, &nets, cfg.iterations, None, mode)?;
            (Some(r.question), r.video, r.last_weights)
        };

        let fused = match (text_question, visual_question) {
            (Some(t), Some(v)) if a.uses_fc_fusion() => {
                fc_fuse(t, v, bound.get("fusion.fc.weight"), bound.get("fusion.fc.bias"))?
            }
            (Some(t), Some(v)) => gate_fuse(question, t, v, bound.get("fusion.gate.weight"))?,
            (Some(t), None) => t,
            (None, Some(v)) => v,
            (None, None) => unreachable!("ablation validation forbids removing both encoders"),
        };

        let decoder = DecoderWeights::from_bound(bound, cfg.decoder_layers, cfg.heads, cfg.layer_norm_eps);
        let caption = if sample.caption.is_empty() {
            None
        } else {
            Some(embed(&sample.caption, table)?)
        };
        let prefix = build_prefix(&decoder, video, caption, history, fused)?;
        Ok(Encoded {
            prefix,
            decoder,
            trace,
            joint_weights,
        })
    }

    /// Summed negative log-likelihood of the sample's gold answer.
    pub fn loss<'t>(&self, bound: &Bound<'t>, sample: &DialogSample) -> Result<Var<'t>> {
        let enc = self.encode(bound, sample)?;
        mle_loss(&enc.decoder, enc.prefix, &sample.gold_answer)
    }

    /// Decodes an answer for `sample`.
    pub fn generate(&self, sample: &DialogSample, cfg: &DecodeConfig) -> Result<Generation> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let enc = self.encode(&bound, sample)?;
        let hypothesis = decode(&enc.decoder, enc.prefix, cfg)?;
        Ok(Generation {
            text: self.vocab.decode(&hypothesis.tokens),
            hypothesis,
            trace: enc.trace,
            joint_weights: enc.joint_weights,
        })
    }
}

/// A decoded answer with the encoders' diagnostics.
#[derive(Debug, Clone)]
pub struct Generation {
    pub hypothesis: Hypothesis,
    pub text: String,
    pub trace: Option<PathTrace>,
    pub joint_weights: Option<Tensor>,
}
