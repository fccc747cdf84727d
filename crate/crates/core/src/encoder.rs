//! Sentence encoder: token embeddings, a position-wise tanh mixing layer,
//! entity-span pooling with a shared head, and a summary-token head.
//!
//! The output feature is `x = concat(b0, b_e1, b_e2)` of length `3·head_dim`.
//! Each token state is `tanh(W_mix·(e_t + ē) + b_mix)` where `ē` is the mean
//! embedding of the whole marked sentence, so the summary token carries
//! sentence-level context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, add, concat, concat_backward, embedding_backward, embedding_lookup, matmul,
    matmul_backward_into, span_mean, span_mean_backward, tanh, tanh_backward, DropoutMask,
    GradRecord, Span, Tensor,
};

/// Reserved id prepended to every sentence; its state feeds the summary head.
pub const SUMMARY_TOKEN: usize = 0;
/// Reserved id inserted before and after the first entity.
pub const E1_MARKER: usize = 1;
/// Reserved id inserted before and after the second entity.
pub const E2_MARKER: usize = 2;
/// Number of reserved ids; ordinary tokens start here.
pub const RESERVED_TOKENS: usize = 3;

/// One training or evaluation sentence with its entity pair and labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub tokens: Vec<usize>,
    pub e1: Span,
    pub e2: Span,
    pub noisy_label: usize,
    pub true_label: Option<usize>,
    pub bag_id: String,
}

impl LabeledInstance {
    /// Checks spans and labels against the sequence length and class count.
    /// Errors name the offending field.
    pub fn validate(&self, classes: usize) -> std::result::Result<(), (&'static str, String)> {
        let len = self.tokens.len();
        for (field, span) in [("e1", self.e1), ("e2", self.e2)] {
            if span.end < span.start || span.end >= len {
                return Err((
                    field,
                    format!(
                        "span ({}, {}) invalid for sequence of length {len}",
                        span.start, span.end
                    ),
                ));
            }
        }
        if self.noisy_label >= classes {
            return Err((
                "noisy_label",
                format!("label {} not below class count {classes}", self.noisy_label),
            ));
        }
        if let Some(t) = self.true_label {
            if t >= classes {
                return Err((
                    "true_label",
                    format!("label {t} not below class count {classes}"),
                ));
            }
        }
        Ok(())
    }
}

/// A token sequence after [`mark_entities`], with spans re-indexed into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSentence {
    pub tokens: Vec<usize>,
    pub e1: Span,
    pub e2: Span,
}

/// Prepends the summary token and wraps each entity span in its marker ids.
///
/// Markers closing a span are placed before markers opening one at the same
/// position. If the result is longer than `max_len` the tail is cut and any
/// span index past the end is clamped to the last position.
pub fn mark_entities(tokens: &[usize], e1: Span, e2: Span, max_len: usize) -> Result<MarkedSentence> {
    if max_len < 2 {
        return Err(Error::Argument(format!("max_len {max_len} leaves no room for tokens")));
    }
    e1.check(tokens.len())?;
    e2.check(tokens.len())?;
    if let Some(pos) = tokens.iter().position(|&t| t < RESERVED_TOKENS) {
        return Err(Error::Vocabulary(format!(
            "token {} at position {pos} collides with a reserved marker id",
            tokens[pos]
        )));
    }

    // (insert-before position, ordering rank, marker id); closers sort first.
    let mut inserts = [
        (e1.start, 1, E1_MARKER),
        (e1.end + 1, 0, E1_MARKER),
        (e2.start, 1, E2_MARKER),
        (e2.end + 1, 0, E2_MARKER),
    ];
    inserts.sort_by_key(|&(pos, rank, id)| (pos, rank, id));

    let mut out = Vec::with_capacity(tokens.len() + 5);
    out.push(SUMMARY_TOKEN);
    let mut new_index = vec![0usize; tokens.len()];
    let mut next = 0;
    for (p, &tok) in tokens.iter().enumerate() {
        while next < inserts.len() && inserts[next].0 == p {
            out.push(inserts[next].2);
            next += 1;
        }
        new_index[p] = out.len();
        out.push(tok);
    }
    for &(_, _, id) in &inserts[next..] {
        out.push(id);
    }

    let mut e1 = Span::new(new_index[e1.start], new_index[e1.end]);
    let mut e2 = Span::new(new_index[e2.start], new_index[e2.end]);
    if out.len() > max_len {
        out.truncate(max_len);
        let last = max_len - 1;
        for span in [&mut e1, &mut e2] {
            span.start = span.start.min(last);
            span.end = span.end.min(last);
        }
    }
    Ok(MarkedSentence { tokens: out, e1, e2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub dim: usize,
    pub head_dim: usize,
}

impl EncoderDims {
    pub fn feature_dim(&self) -> usize {
        3 * self.head_dim
    }
}

/// Encoder weights. The entity head is one parameter set applied to both
/// entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embedding: Tensor,
    pub mix_w: Tensor,
    pub mix_b: Tensor,
    pub entity_w: Tensor,
    pub entity_b: Tensor,
    pub summary_w: Tensor,
    pub summary_b: Tensor,
}

fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

impl EncoderParams {
    pub fn init<R: Rng>(dims: EncoderDims, rng: &mut R) -> Self {
        let EncoderDims { vocab, dim, head_dim } = dims;
        Self {
            embedding: Tensor::uniform(&[vocab, dim], 0.1, rng),
            mix_w: xavier(dim, dim, rng),
            mix_b: Tensor::zeros(&[dim]),
            entity_w: xavier(dim, head_dim, rng),
            entity_b: Tensor::zeros(&[head_dim]),
            summary_w: xavier(dim, head_dim, rng),
            summary_b: Tensor::zeros(&[head_dim]),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            vocab: self.embedding.rows(),
            dim: self.embedding.cols(),
            head_dim: self.entity_w.cols(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("encoder.embedding", &self.embedding),
            ("encoder.mix_w", &self.mix_w),
            ("encoder.mix_b", &self.mix_b),
            ("encoder.entity_w", &self.entity_w),
            ("encoder.entity_b", &self.entity_b),
            ("encoder.summary_w", &self.summary_w),
            ("encoder.summary_b", &self.summary_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("encoder.embedding", &mut self.embedding),
            ("encoder.mix_w", &mut self.mix_w),
            ("encoder.mix_b", &mut self.mix_b),
            ("encoder.entity_w", &mut self.entity_w),
            ("encoder.entity_b", &mut self.entity_b),
            ("encoder.summary_w", &mut self.summary_w),
            ("encoder.summary_b", &mut self.summary_b),
        ]
    }
}

/// Dropout configuration and its random stream for train-mode encoding.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut Dropout),
}

/// Forward intermediates kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pre: Tensor,
    states: Tensor,
    e1: Span,
    e2: Span,
    masks: [DropoutMask; 3],
    inputs: [Tensor; 3],
    outputs: [Tensor; 3],
    pub x: Tensor,
}

/// Encodes a marked sentence into `x = concat(b0, b_e1, b_e2)`.
pub fn encode(sentence: &MarkedSentence, params: &EncoderParams, mode: Mode<'_>) -> Result<EncoderPass> {
    let ids = &sentence.tokens;
    let embedded = embedding_lookup(&params.embedding, ids)?;
    let context = span_mean(&embedded, Span::new(0, ids.len() - 1))?;
    let pre = add(&embedded, &context)?;
    let states = tanh(&add(&matmul(&pre, &params.mix_w)?, &params.mix_b)?);

    let summary = Tensor::vector(states.row(0).to_vec());
    let pooled1 = span_mean(&states, sentence.e1)?;
    let pooled2 = span_mean(&states, sentence.e2)?;

    let dim = states.cols();
    let masks = match mode {
        Mode::Eval => [
            DropoutMask::identity(dim),
            DropoutMask::identity(dim),
            DropoutMask::identity(dim),
        ],
        Mode::Train(dropout) => [
            DropoutMask::sample(dim, dropout.rate, &mut dropout.rng),
            DropoutMask::sample(dim, dropout.rate, &mut dropout.rng),
            DropoutMask::sample(dim, dropout.rate, &mut dropout.rng),
        ],
    };
    let inputs = [
        masks[0].apply(&summary),
        masks[1].apply(&pooled1),
        masks[2].apply(&pooled2),
    ];
    let b0 = tanh(&add(&matmul(&inputs[0], &params.summary_w)?, &params.summary_b)?);
    let be1 = tanh(&add(&matmul(&inputs[1], &params.entity_w)?, &params.entity_b)?);
    let be2 = tanh(&add(&matmul(&inputs[2], &params.entity_w)?, &params.entity_b)?);
    let x = concat(&[&b0, &be1, &be2]);

    Ok(EncoderPass {
        pre,
        states,
        e1: sentence.e1,
        e2: sentence.e2,
        masks,
        inputs,
        outputs: [b0, be1, be2],
        x,
    })
}

impl EncoderPass {
    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂x`.
    pub fn backward(
        &self,
        sentence: &MarkedSentence,
        params: &EncoderParams,
        grad_x: &Tensor,
        grads: &mut GradRecord,
    ) {
        let head = self.outputs[0].len();
        let pieces = concat_backward(grad_x, &[head, head, head]);
        let (len, dim) = (self.states.rows(), self.states.cols());
        let mut grad_states = Tensor::zeros(&[len, dim]);

        for (slot, piece) in pieces.iter().enumerate() {
            let (w, b, w_name, b_name) = if slot == 0 {
                (&params.summary_w, &params.summary_b, "encoder.summary_w", "encoder.summary_b")
            } else {
                (&params.entity_w, &params.entity_b, "encoder.entity_w", "encoder.entity_b")
            };
            let grad_pre = tanh_backward(&self.outputs[slot], piece);
            let mut grad_in = Tensor::zeros(&[dim]);
            matmul_backward_into(
                &self.inputs[slot],
                w,
                &grad_pre,
                Some(&mut grad_in),
                grads.slot(w_name, w.shape()),
            );
            grads
                .slot(b_name, b.shape())
                .add_assign(&grad_pre)
                .expect("bias gradient shape");
            let grad_pooled = self.masks[slot].backward(&grad_in);
            match slot {
                0 => {
                    for (dst, g) in grad_states.row_mut(0).iter_mut().zip(grad_pooled.data()) {
                        *dst += g;
                    }
                }
                1 => span_mean_backward(&grad_pooled, self.e1, &mut grad_states),
                _ => span_mean_backward(&grad_pooled, self.e2, &mut grad_states),
            }
        }

        let grad_mix_out = tanh_backward(&self.states, &grad_states);
        let mut grad_pre = Tensor::zeros(&[len, dim]);
        matmul_backward_into(
            &self.pre,
            &params.mix_w,
            &grad_mix_out,
            Some(&mut grad_pre),
            grads.slot("encoder.mix_w", params.mix_w.shape()),
        );
        let (_, grad_mix_b) = tensor::add_backward(params.mix_b.shape(), &grad_mix_out);
        grads
            .slot("encoder.mix_b", params.mix_b.shape())
            .add_assign(&grad_mix_b)
            .expect("bias gradient shape");

        // pre_t = e_t + mean_s e_s
        let (grad_embedded, grad_context) = tensor::add_backward(&[dim], &grad_pre);
        let mut grad_embedded = grad_embedded;
        span_mean_backward(&grad_context, Span::new(0, len - 1), &mut grad_embedded);
        embedding_backward(
            &sentence.tokens,
            &grad_embedded,
            grads.slot("encoder.embedding", params.embedding.shape()),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;

    fn toks(ids: &[usize]) -> Vec<usize> {
        ids.to_vec()
    }

    #[test]
    fn marking_shifts_spans() {
        // [S] 3 $ 4 $ 5 # 6 # 7
        let m = mark_entities(&toks(&[3, 4, 5, 6, 7]), Span::new(1, 1), Span::new(3, 3), 128).unwrap();
        assert_eq!(m.tokens.len(), 10);
        assert_eq!(m.e1, Span::new(3, 3));
        assert_eq!(m.e2, Span::new(7, 7));
        assert_eq!(
            m.tokens,
            vec![SUMMARY_TOKEN, 3, E1_MARKER, 4, E1_MARKER, 5, E2_MARKER, 6, E2_MARKER, 7]
        );
    }

    #[test]
    fn marking_handles_adjacent_and_reversed_order() {
        let m = mark_entities(&toks(&[3, 4, 5]), Span::new(2, 2), Span::new(0, 1), 128).unwrap();
        assert_eq!(m.tokens, vec![0, 2, 3, 4, 2, 1, 5, 1]);
        assert_eq!(m.e2, Span::new(2, 3));
        assert_eq!(m.e1, Span::new(6, 6));
        assert_eq!(m.tokens[m.e1.start], 5);
    }

    #[test]
    fn marking_overlapping_spans() {
        let m = mark_entities(&toks(&[3, 4, 5, 6]), Span::new(0, 2), Span::new(1, 3), 128).unwrap();
        assert_eq!(m.tokens.len(), 9);
        assert_eq!(m.tokens[m.e1.start], 3);
        assert_eq!(m.tokens[m.e1.end], 5);
        assert_eq!(m.tokens[m.e2.start], 4);
        assert_eq!(m.tokens[m.e2.end], 6);
    }

    #[test]
    fn remarking_is_rejected() {
        let m = mark_entities(&toks(&[3, 4, 5, 6, 7]), Span::new(1, 1), Span::new(3, 3), 128).unwrap();
        let err = mark_entities(&m.tokens, m.e1, m.e2, 128).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }

    #[test]
    fn truncation_clamps_tail_spans() {
        let tokens: Vec<usize> = (3..13).collect();
        let m = mark_entities(&tokens, Span::new(1, 2), Span::new(8, 9), 10).unwrap();
        assert_eq!(m.tokens.len(), 10);
        assert_eq!(m.e1, Span::new(3, 4));
        assert_eq!(m.e2, Span::new(9, 9));
    }

    #[test]
    fn marking_rejects_bad_spans() {
        assert!(matches!(
            mark_entities(&toks(&[3, 4]), Span::new(1, 0), Span::new(0, 0), 16),
            Err(Error::Span(_))
        ));
        assert!(matches!(
            mark_entities(&toks(&[3, 4]), Span::new(0, 0), Span::new(0, 2), 16),
            Err(Error::Span(_))
        ));
    }

    fn sample_sentence() -> MarkedSentence {
        mark_entities(&toks(&[5, 9, 7, 11, 4, 8]), Span::new(1, 2), Span::new(4, 4), 128).unwrap()
    }

    const DIMS: EncoderDims = EncoderDims {
        vocab: 12,
        dim: 6,
        head_dim: 5,
    };

    #[test]
    fn zero_params_give_tanh_of_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EncoderParams::init(DIMS, &mut rng);
        for (_, t) in p.tensors_mut() {
            t.fill(0.0);
        }
        p.summary_b.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.0]);
        p.entity_b.data_mut().copy_from_slice(&[0.5, 0.5, -0.5, 2.0, 0.0]);
        let x = encode(&sample_sentence(), &p, Mode::Eval).unwrap().x;
        let expect: Vec<f64> = [0.1f64, -0.2, 0.3, 0.0, 1.0]
            .iter()
            .chain(&[0.5, 0.5, -0.5, 2.0, 0.0])
            .chain(&[0.5, 0.5, -0.5, 2.0, 0.0])
            .map(|v| v.tanh())
            .collect();
        assert_eq!(x.data(), expect.as_slice());
    }

    #[test]
    fn eval_mode_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::init(DIMS, &mut rng);
        let s = sample_sentence();
        let a = encode(&s, &p, Mode::Eval).unwrap().x;
        let b = encode(&s, &p, Mode::Eval).unwrap().x;
        assert_eq!(a, b);
        assert_eq!(a.len(), DIMS.feature_dim());
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn swapping_entities_swaps_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(DIMS, &mut rng);
        let s = sample_sentence();
        let swapped = MarkedSentence {
            tokens: s.tokens.clone(),
            e1: s.e2,
            e2: s.e1,
        };
        let a = encode(&s, &p, Mode::Eval).unwrap().x;
        let b = encode(&swapped, &p, Mode::Eval).unwrap().x;
        let h = DIMS.head_dim;
        assert_eq!(a.data()[..h], b.data()[..h]);
        assert_eq!(a.data()[h..2 * h], b.data()[2 * h..]);
        assert_eq!(a.data()[2 * h..], b.data()[h..2 * h]);
    }

    #[test]
    fn out_of_vocabulary_token_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(DIMS, &mut rng);
        let mut s = sample_sentence();
        s.tokens[2] = DIMS.vocab;
        assert!(matches!(encode(&s, &p, Mode::Eval), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn train_mode_dropout_reproducible_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(DIMS, &mut rng);
        let s = sample_sentence();
        let run = |seed| {
            let mut d = Dropout {
                rate: 0.5,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            encode(&s, &p, Mode::Train(&mut d)).unwrap().x
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), encode(&s, &p, Mode::Eval).unwrap().x);
    }

    /// Flattened view of the encoder parameters for finite differences.
    fn flatten(p: &EncoderParams) -> Vec<f64> {
        p.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    fn unflatten(template: &EncoderParams, flat: &[f64]) -> EncoderParams {
        let mut p = template.clone();
        let mut off = 0;
        for (_, t) in p.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        p
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut template = EncoderParams::init(DIMS, &mut rng);
            for (_, t) in template.tensors_mut() {
                *t = Tensor::uniform(t.shape(), 0.6, &mut rng);
            }
            let weights = Tensor::uniform(&[DIMS.feature_dim()], 1.0, &mut rng);
            let sentence = sample_sentence();
            let mask_seed = seed + 100;
            let err = finite_diff_check(
                |flat| {
                    let p = unflatten(&template, flat);
                    let mut d = Dropout {
                        rate: 0.2,
                        rng: ChaCha8Rng::seed_from_u64(mask_seed),
                    };
                    let pass = encode(&sentence, &p, Mode::Train(&mut d))?;
                    let value: f64 = pass.x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
                    let mut grads = GradRecord::zeros_like(p.tensors());
                    pass.backward(&sentence, &p, &weights, &mut grads);
                    let g = p
                        .tensors()
                        .iter()
                        .flat_map(|(name, _)| grads.get(name).unwrap().data().to_vec())
                        .collect();
                    Ok((value, g))
                },
                &flatten(&template),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
