//! Full parameter set and the per-instance forward/backward through encoder
//! and the two classification heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{encode, EncoderDims, EncoderParams, EncoderPass, MarkedSentence, Mode};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::noise::TransitionMatrix;
use crate::tensor::{matmul, matmul_backward_into, softmax, GradRecord, Tensor};

/// Everything the model learns. `transition` is only ever written by EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// `[3·head_dim × K]`, producing the true-label logits `h`.
    pub label_w: Tensor,
    pub label_b: Tensor,
    /// `[3·head_dim × 1]`, producing the logit of `p(z=1|x)`.
    pub z_w: Tensor,
    pub z_b: Tensor,
    pub flow: FlowParams,
    pub transition: TransitionMatrix,
}

/// Parameter groups for write checks between step types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    LabelHead,
    ZHead,
    Flow,
    Transition,
}

impl ModelParams {
    pub fn init<R: Rng>(dims: EncoderDims, classes: usize, c: f64, rng: &mut R) -> Result<Self> {
        let feat = dims.feature_dim();
        let bound = (6.0 / (feat + classes) as f64).sqrt();
        let z_bound = (6.0 / (feat + 1) as f64).sqrt();
        Ok(Self {
            encoder: EncoderParams::init(dims, rng),
            label_w: Tensor::uniform(&[feat, classes], bound, rng),
            label_b: Tensor::zeros(&[classes]),
            z_w: Tensor::uniform(&[feat, 1], z_bound, rng),
            z_b: Tensor::zeros(&[1]),
            flow: FlowParams::identity(classes, c),
            transition: TransitionMatrix::init(classes)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.label_b.len()
    }

    /// Checks that every component agrees on the class count and feature size.
    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        let feat = self.encoder.dims().feature_dim();
        let checks = [
            ("label_w", self.label_w.shape() == [feat, k]),
            ("z_w", self.z_w.shape() == [feat, 1]),
            ("z_b", self.z_b.len() == 1),
            ("flow", self.flow.classes() == k && self.flow.w.len() == k && self.flow.w_prime.len() == k),
            ("transition", self.transition.classes() == k),
            ("encoder.mix_w", self.encoder.mix_w.shape() == [self.encoder.dims().dim; 2]),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Shape(format!("{name} does not match a {k}-class model")));
            }
        }
        Ok(())
    }

    /// All gradient-trained tensors with their names (`T` excluded).
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = self.encoder.tensors().into_iter().collect();
        out.extend([
            ("head.label_w", &self.label_w),
            ("head.label_b", &self.label_b),
            ("head.z_w", &self.z_w),
            ("head.z_b", &self.z_b),
        ]);
        out.extend(self.flow.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = self.encoder.tensors_mut().into_iter().collect();
        out.extend([
            ("head.label_w", &mut self.label_w),
            ("head.label_b", &mut self.label_b),
            ("head.z_w", &mut self.z_w),
            ("head.z_b", &mut self.z_b),
        ]);
        out.extend(self.flow.tensors_mut());
        out
    }

    /// SHA-256 over the raw bits of one parameter group.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        match group {
            ParamGroup::Encoder => self.encoder.tensors().iter().for_each(|(_, t)| feed(t)),
            ParamGroup::LabelHead => {
                feed(&self.label_w);
                feed(&self.label_b);
            }
            ParamGroup::ZHead => {
                feed(&self.z_w);
                feed(&self.z_b);
            }
            ParamGroup::Flow => self.flow.tensors().iter().for_each(|(_, t)| feed(t)),
            ParamGroup::Transition => {
                for row in self.transition.rows() {
                    for v in row {
                        hasher.update(v.to_bits().to_le_bytes());
                    }
                }
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// One forward pass: encoder intermediates, true-label logits `h`, and the
/// correctness logit.
#[derive(Debug, Clone)]
pub struct Forward {
    encoded: EncoderPass,
    pub logits: Vec<f64>,
    pub z_logit: f64,
}

pub fn forward(params: &ModelParams, sentence: &MarkedSentence, mode: Mode<'_>) -> Result<Forward> {
    let encoded = encode(sentence, &params.encoder, mode)?;
    let logits: Vec<f64> = matmul(&encoded.x, &params.label_w)?
        .data()
        .iter()
        .zip(params.label_b.data())
        .map(|(a, b)| a + b)
        .collect();
    let z_logit = matmul(&encoded.x, &params.z_w)?.data()[0] + params.z_b.data()[0];
    Ok(Forward {
        encoded,
        logits,
        z_logit,
    })
}

impl Forward {
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Accumulates parameter gradients given `∂loss/∂h` and `∂loss/∂z_logit`.
    /// A zero `grad_z_logit` leaves the z head untouched.
    pub fn backward(
        &self,
        params: &ModelParams,
        sentence: &MarkedSentence,
        grad_logits: &[f64],
        grad_z_logit: f64,
        grads: &mut GradRecord,
    ) {
        let x = &self.encoded.x;
        let g_h = Tensor::vector(grad_logits.to_vec());
        let mut g_x = Tensor::zeros(x.shape());
        matmul_backward_into(
            x,
            &params.label_w,
            &g_h,
            Some(&mut g_x),
            grads.slot("head.label_w", params.label_w.shape()),
        );
        grads
            .slot("head.label_b", params.label_b.shape())
            .add_assign(&g_h)
            .expect("label bias shape");
        if grad_z_logit != 0.0 {
            let g_z = Tensor::vector(vec![grad_z_logit]);
            matmul_backward_into(
                x,
                &params.z_w,
                &g_z,
                Some(&mut g_x),
                grads.slot("head.z_w", params.z_w.shape()),
            );
            grads.slot("head.z_b", &[1]).data_mut()[0] += grad_z_logit;
        }
        self.encoded.backward(sentence, &params.encoder, &g_x, grads);
    }
}
