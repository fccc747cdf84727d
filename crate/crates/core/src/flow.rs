//! Implicit label transition: a constrained planar step followed by a
//! first-coordinate scale-and-shift, mapping true-label logits `h` to ghost
//! noisy logits `ĥ`.
//!
//! ```text
//! h' = h + u_eff · tanh(wᵀh + β)
//! ĥ  = h'[0] · w' + (h' with its first entry set to 0)
//! ```
//!
//! `w` is projected onto the sphere `‖w‖² = c` and `u` is reparameterized so
//! that `wᵀu_eff ≥ -1`, which keeps the planar step invertible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, softmax_cross_entropy, softplus, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub u: Tensor,
    pub w: Tensor,
    pub beta: Tensor,
    pub w_prime: Tensor,
    /// Target squared norm for `w`.
    pub c: f64,
}

/// Which flow parameters an optimizer step may write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenSchedule {
    pub train_u: bool,
    pub train_w: bool,
    pub train_w_prime: bool,
    pub train_beta: bool,
}

impl FrozenSchedule {
    /// Everything frozen; used with [`FlowParams::identity`].
    pub fn pretrain() -> Self {
        Self {
            train_u: false,
            train_w: false,
            train_w_prime: false,
            train_beta: false,
        }
    }

    pub fn all_trainable() -> Self {
        Self {
            train_u: true,
            train_w: true,
            train_w_prime: true,
            train_beta: true,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match name {
            "flow.u" => self.train_u,
            "flow.w" => self.train_w,
            "flow.w_prime" => self.train_w_prime,
            "flow.beta" => self.train_beta,
            _ => false,
        }
    }
}

impl FlowParams {
    /// `u = 0, w = 0, w' = e₁, β = 0`: the flow is the identity map.
    pub fn identity(classes: usize, c: f64) -> Self {
        let mut w_prime = Tensor::zeros(&[classes]);
        w_prime.data_mut()[0] = 1.0;
        Self {
            u: Tensor::zeros(&[classes]),
            w: Tensor::zeros(&[classes]),
            beta: Tensor::zeros(&[1]),
            w_prime,
            c,
        }
    }

    /// Fine-tuning start: `w' = (1-ε, ε/(1-K), …)`, `u = 0`, `β = 0`, and a
    /// random `w` on the sphere `‖w‖² = c`.
    pub fn fine_tune_init<R: Rng>(classes: usize, epsilon: f64, c: f64, rng: &mut R) -> Result<Self> {
        let mut w_prime = vec![epsilon / (1.0 - classes as f64); classes];
        w_prime[0] = 1.0 - epsilon;
        let w = loop {
            let w = Tensor::uniform(&[classes], 1.0, rng);
            if w.squared_norm() > 1e-6 {
                break w;
            }
        };
        Ok(Self {
            u: Tensor::zeros(&[classes]),
            w: project_w(&w, c)?,
            beta: Tensor::zeros(&[1]),
            w_prime: Tensor::vector(w_prime),
            c,
        })
    }

    pub fn classes(&self) -> usize {
        self.u.len()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("flow.u", &self.u),
            ("flow.w", &self.w),
            ("flow.beta", &self.beta),
            ("flow.w_prime", &self.w_prime),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("flow.u", &mut self.u),
            ("flow.w", &mut self.w),
            ("flow.beta", &mut self.beta),
            ("flow.w_prime", &mut self.w_prime),
        ]
    }

    pub fn is_identity_planar(&self) -> bool {
        self.w.data().iter().all(|&v| v == 0.0) && self.u.data().iter().all(|&v| v == 0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m(a) = -1 + log(1 + eᵃ)`; always above -1.
fn m(a: f64) -> f64 {
    -1.0 + softplus(a)
}

/// `u_eff = u + (m(wᵀu) - wᵀu)·w/‖w‖²`, so that `wᵀu_eff = m(wᵀu) ≥ -1`.
pub fn constrain_u(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    let n2 = w.squared_norm();
    if !(n2 > 0.0) {
        return Err(Error::Constraint("w is zero; the planar step is undefined".into()));
    }
    let a = dot(u.data(), w.data());
    let coef = (m(a) - a) / n2;
    let mut u_eff: Vec<f64> = u.data().iter().zip(w.data()).map(|(ui, wi)| ui + coef * wi).collect();
    // m(a) can round to exactly -1 for very negative a; push the rounded
    // product back onto the feasible side.
    let mut nudge = f64::EPSILON;
    for _ in 0..64 {
        let s = dot(&u_eff, w.data());
        if s >= -1.0 {
            break;
        }
        let step = (-1.0 - s).max(nudge) / n2;
        for (ue, wi) in u_eff.iter_mut().zip(w.data()) {
            *ue += step * wi;
        }
        nudge *= 2.0;
    }
    Ok(Tensor::vector(u_eff))
}

/// `w·sqrt(c)/‖w‖`.
pub fn project_w(w: &Tensor, c: f64) -> Result<Tensor> {
    let norm = w.squared_norm().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Projection("cannot project a zero w onto the sphere".into()));
    }
    let scale = c.sqrt() / norm;
    Ok(Tensor::vector(w.data().iter().map(|v| v * scale).collect()))
}

/// `h' = h + u_eff·tanh(wᵀh + β)`.
pub fn planar_step(h: &[f64], u_eff: &[f64], w: &[f64], beta: f64) -> Vec<f64> {
    let t = (dot(w, h) + beta).tanh();
    h.iter().zip(u_eff).map(|(hi, ui)| hi + ui * t).collect()
}

/// `ĥ[0] = h'[0]·w'[0]`, `ĥ[t] = h'[0]·w'[t] + h'[t]` for `t ≥ 1`.
pub fn scale_shift(h_prime: &[f64], w_prime: &[f64]) -> Vec<f64> {
    let lead = h_prime[0];
    let mut out: Vec<f64> = w_prime.iter().map(|wp| lead * wp).collect();
    for (o, hp) in out.iter_mut().zip(h_prime).skip(1) {
        *o += hp;
    }
    out
}

/// Recovers `h` from `h'` by solving `a + s·tanh(a + β) = wᵀh'` for
/// `a = wᵀh` with bisection, where `s = wᵀu_eff ≥ -1` makes the left side
/// monotone.
pub fn invert_planar(h_prime: &[f64], u_eff: &[f64], w: &[f64], beta: f64) -> Result<Vec<f64>> {
    let s = dot(w, u_eff);
    if s < -1.0 {
        return Err(Error::Inversion(format!(
            "wᵀu = {s} < -1: the planar step is not monotone"
        )));
    }
    let target = dot(w, h_prime);
    let f = |a: f64| a + s * (a + beta).tanh() - target;

    let mut lo = target - s.abs() - 1.0;
    let mut hi = target + s.abs() + 1.0;
    while f(lo) > 0.0 {
        lo = lo * 2.0 - 1.0;
        if lo < -1e6 {
            return Err(Error::Inversion("no lower bracket within |a| ≤ 1e6".into()));
        }
    }
    while f(hi) < 0.0 {
        hi = hi * 2.0 + 1.0;
        if hi > 1e6 {
            return Err(Error::Inversion("no upper bracket within |a| ≤ 1e6".into()));
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    let t = (a + beta).tanh();
    Ok(h_prime.iter().zip(u_eff).map(|(hp, ui)| hp - ui * t).collect())
}

/// Constrained flow parameters as actually applied in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveFlow {
    pub u_eff: Vec<f64>,
    pub w: Vec<f64>,
    pub beta: f64,
    pub w_prime: Vec<f64>,
    identity_planar: bool,
}

impl EffectiveFlow {
    pub fn new(params: &FlowParams) -> Result<Self> {
        let beta = params.beta.data()[0];
        if params.is_identity_planar() {
            return Ok(Self {
                u_eff: vec![0.0; params.classes()],
                w: vec![0.0; params.classes()],
                beta,
                w_prime: params.w_prime.data().to_vec(),
                identity_planar: true,
            });
        }
        let w = project_w(&params.w, params.c)?;
        let u_eff = constrain_u(&params.u, &w)?;
        Ok(Self {
            u_eff: u_eff.into_data(),
            w: w.into_data(),
            beta,
            w_prime: params.w_prime.data().to_vec(),
            identity_planar: false,
        })
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        scale_shift(&planar_step(h, &self.u_eff, &self.w, self.beta), &self.w_prime)
    }

    pub fn invert_planar(&self, h_prime: &[f64]) -> Result<Vec<f64>> {
        invert_planar(h_prime, &self.u_eff, &self.w, self.beta)
    }

    /// `wᵀu_eff`, which the reparameterization keeps at or above -1.
    pub fn wu(&self) -> f64 {
        dot(&self.w, &self.u_eff)
    }
}

/// Loss and gradients of the implicit loss for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    /// Gradients with respect to the stored (pre-constraint) `u`, `w`, `β`,
    /// `w'`, in that order. Zero for `u`, `w` while the planar step is the
    /// frozen identity.
    pub grad_u: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_beta: f64,
    pub grad_w_prime: Vec<f64>,
}

/// `XE(ĥ, î)` with `ĥ` the flow image of `h`, differentiated through
/// `project_w` and `constrain_u`.
pub fn implicit_loss(h: &[f64], params: &FlowParams, noisy: usize) -> Result<ImplicitLoss> {
    let k = h.len();
    if params.classes() != k {
        return Err(Error::Shape(format!(
            "{k} logits for a {}-class flow",
            params.classes()
        )));
    }
    let eff = EffectiveFlow::new(params)?;
    let t = (dot(&eff.w, h) + eff.beta).tanh();
    let h_prime: Vec<f64> = h.iter().zip(&eff.u_eff).map(|(hi, ui)| hi + ui * t).collect();
    let ghost = scale_shift(&h_prime, &eff.w_prime);
    let ce = softmax_cross_entropy(&ghost, noisy)?;
    let g_ghost = ce.grad();

    // ĥ = h'[0]·w' + h'_{·\1}
    let mut g_hp = g_ghost.clone();
    g_hp[0] = dot(&g_ghost, &eff.w_prime);
    let grad_w_prime: Vec<f64> = g_ghost.iter().map(|g| g * h_prime[0]).collect();

    // h' = h + u_eff·tanh(s), s = wᵀh + β
    let g_s = dot(&g_hp, &eff.u_eff) * (1.0 - t * t);
    let grad_logits: Vec<f64> = g_hp.iter().zip(&eff.w).map(|(g, wi)| g + g_s * wi).collect();
    let grad_beta = g_s;

    let (grad_u, grad_w) = if eff.identity_planar {
        (vec![0.0; k], vec![0.0; k])
    } else {
        let g_ueff: Vec<f64> = g_hp.iter().map(|g| g * t).collect();
        let mut g_w: Vec<f64> = h.iter().map(|hi| g_s * hi).collect();

        // u_eff = u + coef·w, coef = (m(a) - a)/n2, a = wᵀu, n2 = wᵀw
        let u = params.u.data();
        let w = &eff.w;
        let a = dot(u, w);
        let n2 = dot(w, w);
        let coef = (m(a) - a) / n2;
        let g_coef = dot(&g_ueff, w);
        let mut g_u = g_ueff.clone();
        for (gw, gu) in g_w.iter_mut().zip(&g_ueff) {
            *gw += coef * gu;
        }
        let g_a = g_coef * (sigmoid_scalar(a) - 1.0) / n2;
        let g_n2 = -g_coef * (m(a) - a) / (n2 * n2);
        for i in 0..k {
            g_u[i] += g_a * w[i];
            g_w[i] += g_a * u[i] + 2.0 * g_n2 * w[i];
        }

        // w = r·sqrt(c)/‖r‖ for the stored r
        let r = params.w.data();
        let r_norm = dot(r, r).sqrt();
        let r_hat: Vec<f64> = r.iter().map(|v| v / r_norm).collect();
        let radial = dot(&r_hat, &g_w);
        let scale = params.c.sqrt() / r_norm;
        let g_r = g_w.iter().zip(&r_hat).map(|(g, rh)| scale * (g - rh * radial)).collect();
        (g_u, g_r)
    };

    Ok(ImplicitLoss {
        loss: ce.loss,
        grad_logits,
        grad_u,
        grad_w,
        grad_beta,
        grad_w_prime,
    })
}
