//! Training schedule: frozen-flow pretraining, then alternating explicit-loss
//! steps, EM updates of the transition matrix and implicit-loss steps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{mark_entities, Dropout, EncoderDims, LabeledInstance, MarkedSentence, Mode};
use crate::error::{Error, Result};
use crate::flow::{implicit_loss, project_w, FlowParams};
use crate::model::{forward, ModelParams, ParamGroup};
use crate::noise::{e_step, explicit_loss, m_step, q_value, SufficientStats};
use crate::tensor::{sigmoid_scalar, softmax_cross_entropy, GradRecord, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dtloss-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    PlainXe,
    ExplicitOnly,
    ImplicitOnly,
    Both,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 4] = [
        BaselineMode::PlainXe,
        BaselineMode::ExplicitOnly,
        BaselineMode::ImplicitOnly,
        BaselineMode::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMode::PlainXe => "plain-xe",
            BaselineMode::ExplicitOnly => "explicit-only",
            BaselineMode::ImplicitOnly => "implicit-only",
            BaselineMode::Both => "both",
        }
    }

    fn uses_implicit(self) -> bool {
        matches!(self, BaselineMode::ImplicitOnly | BaselineMode::Both)
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub pretrain_epochs: usize,
    pub main_epochs: usize,
    /// Explicit-loss steps between EM opportunities.
    pub j_steps: usize,
    /// Implicit-loss steps after each EM opportunity.
    pub li_steps: usize,
    /// Instances that must pass through explicit-loss steps before `T` is
    /// re-estimated. 0 means one epoch.
    pub t_update_every: usize,
    /// EM iterations run on the cached window per update.
    pub em_iterations: usize,
    pub epsilon: f64,
    pub norm_target: f64,
    pub seed: u64,
    pub mode: BaselineMode,
    pub embed_dim: usize,
    pub head_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            max_len: 128,
            dropout: 0.1,
            pretrain_epochs: 2,
            main_epochs: 10,
            j_steps: 100,
            li_steps: 1,
            t_update_every: 0,
            em_iterations: 1,
            epsilon: 0.1,
            norm_target: 1.0,
            seed: 0,
            mode: BaselineMode::Both,
            embed_dim: 32,
            head_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.norm_target > 0.0 && self.norm_target.is_finite()) {
            return fail(format!("norm_target must be positive, got {}", self.norm_target));
        }
        if !self.epsilon.is_finite() {
            return fail("epsilon must be finite".into());
        }
        for (name, value, min) in [
            ("batch_size", self.batch_size, 1),
            ("j_steps", self.j_steps, 1),
            ("li_steps", self.li_steps, 1),
            ("em_iterations", self.em_iterations, 1),
            ("max_len", self.max_len, 8),
            ("embed_dim", self.embed_dim, 1),
            ("head_dim", self.head_dim, 1),
        ] {
            if value < min {
                return fail(format!("{name} must be at least {min}, got {value}"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Adam moments per named parameter. A parameter's step counter only
/// advances on steps that update it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub slots: BTreeMap<String, Moments>,
}

/// One AdamW update of every parameter for which `trainable` holds. A
/// missing gradient counts as zero. Nothing is written when any selected
/// gradient is non-finite. `T` is not among the parameters seen here.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradRecord,
    state: &mut OptimizerState,
    config: &AdamConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<()> {
    for (name, param) in params.tensors() {
        if !trainable(name) {
            continue;
        }
        if let Some(g) = grads.get(name) {
            if g.shape() != param.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
    }

    let mut flow_w_updated = false;
    for (name, param) in params.tensors_mut() {
        if !trainable(name) {
            continue;
        }
        let slot = state.slots.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            step: 0,
        });
        if slot.m.shape() != param.shape() {
            return Err(Error::Shape(format!("optimizer moments for {name} do not match")));
        }
        slot.step += 1;
        let t = slot.step as f64;
        let c1 = 1.0 - config.beta1.powf(t);
        let c2 = 1.0 - config.beta2.powf(t);
        let decay = 1.0 - config.learning_rate * config.weight_decay;
        let grad = grads.get(name).map(Tensor::data);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p = *p * decay - config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
        flow_w_updated |= name == "flow.w";
    }

    if flow_w_updated {
        params.flow.w = project_w(&params.flow.w, params.flow.c)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Data and schedule
// ---------------------------------------------------------------------------

/// A marked sentence with its annotated label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub sentence: MarkedSentence,
    pub noisy: usize,
}

pub fn prepare_items(instances: &[LabeledInstance], max_len: usize) -> Result<Vec<TrainItem>> {
    instances
        .iter()
        .map(|inst| {
            Ok(TrainItem {
                sentence: mark_entities(&inst.tokens, inst.e1, inst.e2, max_len)?,
                noisy: inst.noisy_label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Main,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossType {
    Xe,
    Explicit,
    Implicit,
    Em,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss_type: LossType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    /// Instances skipped for a degenerate posterior or transition row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<usize>,
}

impl LogRecord {
    fn step(step: usize, phase: Phase, loss_type: LossType, loss: f64, skipped: usize) -> Self {
        Self {
            step,
            phase,
            loss_type,
            loss: Some(loss),
            q_before: None,
            q_after: None,
            transition: None,
            skipped: (skipped > 0).then_some(skipped),
        }
    }
}

/// Position in the schedule. Together with the parameters and optimizer
/// moments this is enough to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    /// Steps completed within the current phase.
    pub phase_step: usize,
    pub global_step: usize,
    /// Instances seen by explicit-loss steps since the last EM update.
    pub window: Vec<u32>,
    pub em_updates: usize,
    pub skipped: usize,
}

impl Progress {
    fn start() -> Self {
        Self {
            phase: Phase::Pretrain,
            phase_step: 0,
            global_step: 0,
            window: Vec::new(),
            em_updates: 0,
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

impl TrainState {
    pub fn new(config: &TrainConfig, vocab: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        let dims = EncoderDims {
            vocab,
            dim: config.embed_dim,
            head_dim: config.head_dim,
        };
        let mut rng = stream(config.seed, Stream::Init, 0);
        Ok(Self {
            params: ModelParams::init(dims, classes, config.norm_target, &mut rng)?,
            optimizer: OptimizerState::default(),
            progress: Progress::start(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase == Phase::Done
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Init,
    Shuffle(Phase),
    Dropout(Phase),
    FlowInit,
}

/// An independent ChaCha stream for every (seed, purpose, counter).
fn stream(seed: u64, purpose: Stream, counter: u64) -> ChaCha8Rng {
    let tag: u64 = match purpose {
        Stream::Init => 1,
        Stream::Shuffle(Phase::Pretrain) => 2,
        Stream::Shuffle(_) => 3,
        Stream::Dropout(Phase::Pretrain) => 4,
        Stream::Dropout(_) => 5,
        Stream::FlowInit => 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.set_word_pos(u128::from(counter) << 20);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepKind {
    Xe,
    Explicit,
    Implicit,
}

fn is_encoder_or_label(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("head.label_")
}

impl StepKind {
    fn trainable(self, name: &str, flow_frozen: bool) -> bool {
        match self {
            StepKind::Xe => is_encoder_or_label(name),
            StepKind::Explicit => is_encoder_or_label(name) || name.starts_with("head.z_"),
            StepKind::Implicit => is_encoder_or_label(name) || (!flow_frozen && name.starts_with("flow.")),
        }
    }

    fn loss_type(self) -> LossType {
        match self {
            StepKind::Xe => LossType::Xe,
            StepKind::Explicit => LossType::Explicit,
            StepKind::Implicit => LossType::Implicit,
        }
    }
}

struct Schedule<'a> {
    config: &'a TrainConfig,
    n: usize,
    batches_per_epoch: usize,
    order_cache: Option<(Phase, usize, Vec<usize>)>,
}

impl<'a> Schedule<'a> {
    fn new(config: &'a TrainConfig, n: usize) -> Self {
        Self {
            config,
            n,
            batches_per_epoch: n.div_ceil(config.batch_size),
            order_cache: None,
        }
    }

    fn phase_steps(&self, phase: Phase) -> usize {
        let epochs = match phase {
            Phase::Pretrain => self.config.pretrain_epochs,
            Phase::Main => self.config.main_epochs,
            Phase::Done => 0,
        };
        epochs * self.batches_per_epoch
    }

    fn batch(&mut self, phase: Phase, step: usize) -> Vec<usize> {
        let epoch = step / self.batches_per_epoch;
        let pos = step % self.batches_per_epoch;
        let fresh = !matches!(&self.order_cache, Some((p, e, _)) if *p == phase && *e == epoch);
        if fresh {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut stream(self.config.seed, Stream::Shuffle(phase), epoch as u64));
            self.order_cache = Some((phase, epoch, order));
        }
        let order = &self.order_cache.as_ref().expect("cached order").2;
        let start = pos * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(self.n)].to_vec()
    }

    fn kind(&self, phase: Phase, step: usize) -> StepKind {
        let mode = self.config.mode;
        match (phase, mode) {
            (Phase::Pretrain, BaselineMode::PlainXe) | (Phase::Main, BaselineMode::PlainXe) => StepKind::Xe,
            (Phase::Pretrain, _) => StepKind::Implicit,
            (_, BaselineMode::ExplicitOnly) => StepKind::Explicit,
            (_, BaselineMode::ImplicitOnly) => StepKind::Implicit,
            _ => {
                if step % (self.config.j_steps + self.config.li_steps) < self.config.j_steps {
                    StepKind::Explicit
                } else {
                    StepKind::Implicit
                }
            }
        }
    }

    /// Whether an EM opportunity follows main-phase step `step`.
    fn em_after(&self, step: usize) -> bool {
        let j = self.config.j_steps;
        match self.config.mode {
            BaselineMode::ExplicitOnly => (step + 1) % j == 0,
            BaselineMode::Both => step % (j + self.config.li_steps) == j - 1,
            _ => false,
        }
    }

    fn cadence(&self) -> usize {
        match self.config.t_update_every {
            0 => self.n,
            c => c,
        }
    }
}

/// Averaged loss and gradients of one batch.
struct BatchResult {
    loss: f64,
    grads: GradRecord,
    skipped: usize,
}

fn batch_gradient(
    params: &ModelParams,
    items: &[TrainItem],
    batch: &[usize],
    kind: StepKind,
    dropout: &mut Dropout,
) -> Result<BatchResult> {
    let mut grads = GradRecord::new();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &idx in batch {
        let item = &items[idx];
        let fwd = forward(params, &item.sentence, Mode::Train(dropout))?;
        let (loss, grad_logits, grad_z) = match kind {
            StepKind::Xe => {
                let ce = softmax_cross_entropy(&fwd.logits, item.noisy)?;
                (ce.loss, ce.grad(), 0.0)
            }
            StepKind::Implicit => {
                let li = implicit_loss(&fwd.logits, &params.flow, item.noisy)?;
                accumulate_flow_grads(&mut grads, &params.flow, &li);
                (li.loss, li.grad_logits, 0.0)
            }
            StepKind::Explicit => match explicit_loss(&fwd.logits, fwd.z_logit, item.noisy, &params.transition) {
                Ok(le) => (le.loss, le.grad_logits, le.grad_z_logit),
                Err(Error::DegenerateRow { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        fwd.backward(params, &item.sentence, &grad_logits, grad_z, &mut grads);
        total += loss;
        used += 1;
    }
    if used > 0 {
        grads.scale(1.0 / used as f64);
        total /= used as f64;
    }
    Ok(BatchResult {
        loss: total,
        grads,
        skipped,
    })
}

fn accumulate_flow_grads(grads: &mut GradRecord, flow: &FlowParams, li: &crate::flow::ImplicitLoss) {
    let pieces: [(&str, &[f64]); 4] = [
        ("flow.u", &li.grad_u),
        ("flow.w", &li.grad_w),
        ("flow.beta", std::slice::from_ref(&li.grad_beta)),
        ("flow.w_prime", &li.grad_w_prime),
    ];
    for (name, g) in pieces {
        let shape = match name {
            "flow.u" => flow.u.shape(),
            "flow.w" => flow.w.shape(),
            "flow.beta" => flow.beta.shape(),
            _ => flow.w_prime.shape(),
        };
        let slot = grads.slot(name, shape);
        for (s, v) in slot.data_mut().iter_mut().zip(g) {
            *s += v;
        }
    }
}

/// Runs up to `max_steps` optimizer steps (all remaining when `None`) and
/// returns the log records they produced.
pub fn train(
    state: &mut TrainState,
    config: &TrainConfig,
    items: &[TrainItem],
    max_steps: Option<usize>,
) -> Result<Vec<LogRecord>> {
    run(state, config, items, max_steps, Phase::Done)
}

/// Runs the frozen-flow pretraining phase to completion.
pub fn pretrain_implicit(state: &mut TrainState, config: &TrainConfig, items: &[TrainItem]) -> Result<Vec<LogRecord>> {
    run(state, config, items, None, Phase::Main)
}

/// Runs the alternating phase to completion. Pretraining must be finished.
pub fn alternating_train(state: &mut TrainState, config: &TrainConfig, items: &[TrainItem]) -> Result<Vec<LogRecord>> {
    if state.progress.phase == Phase::Pretrain {
        return Err(Error::Argument("pretraining has not completed".into()));
    }
    run(state, config, items, None, Phase::Done)
}

fn run(
    state: &mut TrainState,
    config: &TrainConfig,
    items: &[TrainItem],
    max_steps: Option<usize>,
    stop_at: Phase,
) -> Result<Vec<LogRecord>> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Argument("no training instances".into()));
    }
    let classes = state.params.classes();
    if let Some(bad) = items.iter().find(|it| it.noisy >= classes) {
        return Err(Error::Index {
            index: bad.noisy,
            len: classes,
        });
    }
    let mut schedule = Schedule::new(config, items.len());
    let adam = config.adam();
    let mut log = Vec::new();
    let mut taken = 0usize;

    loop {
        let progress = &mut state.progress;
        if progress.phase == stop_at || progress.phase == Phase::Done {
            break;
        }
        if progress.phase_step >= schedule.phase_steps(progress.phase) {
            if progress.phase == Phase::Pretrain {
                progress.phase = Phase::Main;
                progress.phase_step = 0;
            } else {
                progress.phase = Phase::Done;
            }
            continue;
        }
        if max_steps.is_some_and(|m| taken >= m) {
            break;
        }

        let phase = progress.phase;
        let step = progress.phase_step;
        let global = progress.global_step;
        if phase == Phase::Main && step == 0 && config.mode.uses_implicit() {
            let mut rng = stream(config.seed, Stream::FlowInit, 0);
            state.params.flow = FlowParams::fine_tune_init(classes, config.epsilon, config.norm_target, &mut rng)?;
        }
        let kind = schedule.kind(phase, step);
        let batch = schedule.batch(phase, step);
        let mut dropout = Dropout {
            rate: config.dropout,
            rng: stream(config.seed, Stream::Dropout(phase), step as u64),
        };

        let guard_flow = state.params.checksum(ParamGroup::Flow);
        let guard_t = state.params.checksum(ParamGroup::Transition);

        let result = batch_gradient(&state.params, items, &batch, kind, &mut dropout)?;
        if !result.loss.is_finite() || !result.grads.is_finite() {
            return Err(Error::NonFinite {
                step: global,
                detail: format!("{:?} loss {} on batch {:?}", kind, result.loss, batch),
            });
        }
        let flow_frozen = phase == Phase::Pretrain;
        adam_step(
            &mut state.params,
            &result.grads,
            &mut state.optimizer,
            &adam,
            &|name| kind.trainable(name, flow_frozen),
        )
        .map_err(|e| match e {
            Error::Numeric(detail) => Error::NonFinite { step: global, detail },
            other => other,
        })?;

        assert_eq!(state.params.checksum(ParamGroup::Transition), guard_t, "a gradient step wrote T");
        if kind != StepKind::Implicit || flow_frozen {
            assert_eq!(state.params.checksum(ParamGroup::Flow), guard_flow, "flow written outside L_i");
        }

        let progress = &mut state.progress;
        progress.skipped += result.skipped;
        log.push(LogRecord::step(global, phase, kind.loss_type(), result.loss, result.skipped));
        if kind == StepKind::Explicit {
            progress.window.extend(batch.iter().map(|&i| i as u32));
        }
        progress.phase_step += 1;
        progress.global_step += 1;
        taken += 1;

        if phase == Phase::Main && schedule.em_after(step) && progress.window.len() >= schedule.cadence() {
            let records = em_update(state, config, items)?;
            log.extend(records);
        }
    }
    Ok(log)
}

/// Re-estimates `T` from eval-mode predictions on the window, then clears it.
fn em_update(state: &mut TrainState, config: &TrainConfig, items: &[TrainItem]) -> Result<Vec<LogRecord>> {
    let step = state.progress.global_step;
    let window = std::mem::take(&mut state.progress.window);
    let mut cached = Vec::with_capacity(window.len());
    for &idx in &window {
        let item = &items[idx as usize];
        let fwd = forward(&state.params, &item.sentence, Mode::Eval)?;
        cached.push((fwd.probs(), sigmoid_scalar(fwd.z_logit), item.noisy));
    }

    let guard_flow = state.params.checksum(ParamGroup::Flow);
    let mut log = Vec::with_capacity(config.em_iterations);
    for _ in 0..config.em_iterations {
        let t = &state.params.transition;
        let mut posteriors = Vec::with_capacity(cached.len());
        let mut skipped = 0usize;
        for (probs, p_z1, noisy) in &cached {
            match e_step(probs, *p_z1, t, *noisy) {
                Ok(p) => posteriors.push(p),
                Err(Error::DegeneratePosterior(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let mut stats = SufficientStats::new(t.classes());
        for p in &posteriors {
            stats.add(p)?;
        }
        let next = m_step(&stats, t)?;
        let q_before = q_value(&posteriors, t)?.value;
        let q_after = q_value(&posteriors, &next)?.value;
        state.params.transition = next;
        state.progress.skipped += skipped;
        state.progress.em_updates += 1;
        log.push(LogRecord {
            step,
            phase: Phase::Main,
            loss_type: LossType::Em,
            loss: None,
            q_before: Some(q_before),
            q_after: Some(q_after),
            transition: Some(state.params.transition.rows()),
            skipped: (skipped > 0).then_some(skipped),
        });
    }
    assert_eq!(state.params.checksum(ParamGroup::Flow), guard_flow, "EM wrote flow parameters");
    Ok(log)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// `softmax(h)` in eval mode. Neither the flow nor `T` is applied.
pub fn predict_instance(params: &ModelParams, sentence: &MarkedSentence) -> Result<Vec<f64>> {
    Ok(forward(params, sentence, Mode::Eval)?.probs())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Bag decision from per-instance distributions. All-NA bags score by the
/// largest NA probability. Otherwise instances predicted NA are ignored and
/// the positive class with the highest probability among the rest wins.
pub fn aggregate_bag(probs: &[Vec<f64>], na_class: usize) -> Result<(usize, f64)> {
    let k = probs
        .first()
        .ok_or_else(|| Error::Argument("empty bag".into()))?
        .len();
    if na_class >= k {
        return Err(Error::Index { index: na_class, len: k });
    }
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("bag instances disagree on class count".into()));
    }
    let positive: Vec<&Vec<f64>> = probs.iter().filter(|p| argmax(p) != na_class).collect();
    if positive.is_empty() {
        let score = probs.iter().map(|p| p[na_class]).fold(f64::NEG_INFINITY, f64::max);
        return Ok((na_class, score));
    }
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for class in (0..k).filter(|&c| c != na_class) {
        let score = positive.iter().map(|p| p[class]).fold(f64::NEG_INFINITY, f64::max);
        if score > best.1 {
            best = (class, score);
        }
    }
    Ok(best)
}

pub fn predict_bag(params: &ModelParams, sentences: &[MarkedSentence], na_class: usize) -> Result<(usize, f64)> {
    let probs = sentences
        .iter()
        .map(|s| predict_instance(params, s))
        .collect::<Result<Vec<_>>>()?;
    aggregate_bag(&probs, na_class)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub classes: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, state: &TrainState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            classes: state.params.classes(),
            params: state.params.clone(),
            optimizer: state.optimizer.clone(),
            progress: state.progress.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            params: self.params,
            optimizer: self.optimizer,
            progress: self.progress,
        }
    }
}

/// Writes through a temporary sibling and a rename so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(checkpoint).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("json.partial");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads and validates a checkpoint. With `expected_classes` set, a model
/// of any other class count is rejected.
pub fn load_checkpoint(path: &Path, expected_classes: Option<usize>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, expected_classes)
}

pub fn parse_checkpoint(text: &str, expected_classes: Option<usize>) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        other => return Err(Error::Checkpoint(format!("not a checkpoint (format {other:?})"))),
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"
            )))
        }
    }
    let ckpt: Checkpoint =
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    ckpt.params.validate()?;
    if ckpt.classes != ckpt.params.classes() {
        return Err(Error::Shape(format!(
            "checkpoint declares {} classes but holds a {}-class model",
            ckpt.classes,
            ckpt.params.classes()
        )));
    }
    if let Some(k) = expected_classes {
        if k != ckpt.classes {
            return Err(Error::Shape(format!("checkpoint has {} classes, data has {k}", ckpt.classes)));
        }
    }
    if ckpt.config_hash != ckpt.config.hash() {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    for (name, param) in ckpt.params.tensors() {
        if let Some(slot) = ckpt.optimizer.slots.get(name) {
            if slot.m.shape() != param.shape() || slot.v.shape() != param.shape() {
                return Err(Error::Shape(format!("optimizer moments for {name} do not match")));
            }
        }
    }
    Ok(ckpt)
}
