//! Desk-scale reward-driven fine-tuning.
//!
//! A linear-softmax policy generates fixed-length summaries token by token
//! over a vocabulary of entity and filler words. Each sampled summary is
//! scored with the entity hallucination index against its synthetic source,
//! rewards are standardized per batch, and the policy is updated with the
//! REINFORCE estimator and Adam.
//!
//! Token ids `0..n_entities` are entities, the rest are fillers. The feature
//! vector at step `t` is sparse and binary:
//!
//! | block            | size          | active when                          |
//! |------------------|---------------|--------------------------------------|
//! | source entities  | `n_entities`  | entity appears in the source         |
//! | emitted entities | `n_entities`  | entity already generated before `t`  |
//! | position         | `summary_len` | index `t`                            |
//! | bias             | 1             | always                               |

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entity::{extract_entities, EntitySet, Gazetteer};
use crate::error::TrainError;
use crate::metric::{compute_components, ehi_from_components, entity_f1, MetricConfig, ReferenceMode};

/// Learning rate used for LM-scale fine-tuning.
pub const LM_SCALE_LEARNING_RATE: f64 = 5e-6;

pub const DEFAULT_ENTITIES: [&str; 20] = [
    "alice", "bob", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory",
    "oracle", "microsoft", "ibm", "google", "siemens", "prague", "berlin", "paris", "tokyo",
    "olympics",
];

pub const DEFAULT_FILLERS: [&str; 30] = [
    "meeting", "agreed", "discussed", "budget", "plan", "review", "next", "week", "team",
    "update", "project", "deadline", "report", "action", "item", "shared", "slides", "asked",
    "about", "progress", "release", "schedule", "issue", "fixed", "minutes", "call", "topic",
    "proposal", "notes", "client",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    /// Normalized single-token gazetteer keys.
    pub entities: Vec<String>,
    pub fillers: Vec<String>,
    pub source_length: usize,
    pub summary_length: usize,
    pub entities_per_source: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            entities: DEFAULT_ENTITIES.iter().map(|s| s.to_string()).collect(),
            fillers: DEFAULT_FILLERS.iter().map(|s| s.to_string()).collect(),
            source_length: 20,
            summary_length: 6,
            entities_per_source: 3,
            seed: 0,
        }
    }
}

/// Most mentions a single entity gets in a generated source.
pub const MAX_SOURCE_REPEATS: usize = 3;

impl SyntheticTask {
    pub fn vocab_size(&self) -> usize {
        self.entities.len() + self.fillers.len()
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            n_entities: self.entities.len(),
            vocab_size: self.vocab_size(),
            summary_length: self.summary_length,
        }
    }

    pub fn word(&self, token: usize) -> &str {
        if token < self.entities.len() {
            &self.entities[token]
        } else {
            &self.fillers[token - self.entities.len()]
        }
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }

    /// Check the task against the gazetteer used for scoring.
    pub fn validate(&self, gazetteer: &Gazetteer) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.fillers.is_empty() {
            return bad("filler vocabulary is empty".into());
        }
        if self.entities_per_source > self.entities.len() {
            return bad("entities_per_source exceeds the entity vocabulary".into());
        }
        if self.summary_length < self.entities_per_source || self.summary_length == 0 {
            return bad("summary_length must be positive and at least entities_per_source".into());
        }
        if self.entities_per_source * MAX_SOURCE_REPEATS > self.source_length {
            return bad(format!(
                "source_length {} cannot hold {} entities repeated up to {} times",
                self.source_length, self.entities_per_source, MAX_SOURCE_REPEATS
            ));
        }
        for e in &self.entities {
            if gazetteer.get(e).is_none() || e.contains(char::is_whitespace) {
                return bad(format!("entity {e:?} is not a single-token gazetteer key"));
            }
        }
        for f in &self.fillers {
            if gazetteer.get(f).is_some() || self.entities.contains(f) {
                return bad(format!("filler {f:?} collides with an entity"));
            }
            if f.chars().next().is_none_or(|c| !c.is_lowercase()) || f.contains(char::is_whitespace) {
                return bad(format!("filler {f:?} must be one lowercase word"));
            }
        }
        Ok(())
    }
}

/// One synthetic source document.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub source_text: String,
    /// Distinct entity ids placed in the source, ascending.
    pub source_entities: Vec<usize>,
    pub reference_entities: Vec<String>,
}

pub fn generate_task_instance<R: Rng>(task: &SyntheticTask, rng: &mut R) -> TaskInstance {
    let n_e = task.entities.len();
    let mut chosen = index::sample(rng, n_e, task.entities_per_source).into_vec();
    chosen.sort_unstable();
    let mut words: Vec<usize> = Vec::with_capacity(task.source_length);
    for &e in &chosen {
        let reps = rng.random_range(1..=MAX_SOURCE_REPEATS);
        words.extend(std::iter::repeat_n(e, reps));
    }
    while words.len() < task.source_length {
        words.push(n_e + rng.random_range(0..task.fillers.len()));
    }
    // Fisher-Yates
    for i in (1..words.len()).rev() {
        let j = rng.random_range(0..=i);
        words.swap(i, j);
    }
    TaskInstance {
        source_text: task.render(&words),
        reference_entities: chosen.iter().map(|&e| task.entities[e].clone()).collect(),
        source_entities: chosen,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub n_entities: usize,
    pub vocab_size: usize,
    pub summary_length: usize,
}

impl PolicyShape {
    pub fn feature_dim(&self) -> usize {
        2 * self.n_entities + self.summary_length + 1
    }

    /// Active feature indices at `position` given the generated prefix.
    pub fn features(&self, source_entities: &[usize], prefix: &[usize], position: usize) -> Vec<usize> {
        let mut active: Vec<usize> = source_entities.to_vec();
        let mut emitted: Vec<usize> = prefix
            .iter()
            .filter(|&&t| t < self.n_entities)
            .map(|&t| self.n_entities + t)
            .collect();
        emitted.sort_unstable();
        emitted.dedup();
        active.extend(emitted);
        active.push(2 * self.n_entities + position);
        active.push(self.feature_dim() - 1);
        active
    }
}

/// Policy parameters and Adam accumulators. `theta` is row-major
/// `[feature_dim x vocab_size]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub shape: PolicyShape,
    pub theta: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Updates applied, including no-op updates.
    pub step_count: u64,
    /// Adam steps taken, used for bias correction.
    pub adam_t: u64,
}

impl PolicyState {
    pub fn zeros(shape: PolicyShape) -> Self {
        let n = shape.feature_dim() * shape.vocab_size;
        Self {
            shape,
            theta: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
            adam_t: 0,
        }
    }

    pub fn index(&self, feature: usize, token: usize) -> usize {
        feature * self.shape.vocab_size + token
    }

    pub fn logits(&self, active: &[usize]) -> Vec<f64> {
        let v = self.shape.vocab_size;
        let mut out = vec![0.0; v];
        for &f in active {
            let row = &self.theta[f * v..(f + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.adam_m).chain(&self.adam_v).all(|x| x.is_finite())
    }
}

/// Log-probabilities of a logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSummary {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

pub fn sample_summary<R: Rng>(
    policy: &PolicyState,
    source_entities: &[usize],
    rng: &mut R,
) -> SampledSummary {
    let len = policy.shape.summary_length;
    let mut tokens = Vec::with_capacity(len);
    let mut log_prob = 0.0;
    for t in 0..len {
        let active = policy.shape.features(source_entities, &tokens, t);
        let logp = log_softmax(&policy.logits(&active));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        log_prob += logp[pick];
        tokens.push(pick);
    }
    SampledSummary { tokens, log_prob }
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_summary(policy: &PolicyState, source_entities: &[usize]) -> Vec<usize> {
    let len = policy.shape.summary_length;
    let mut tokens = Vec::with_capacity(len);
    for t in 0..len {
        let logits = policy.logits(&policy.shape.features(source_entities, &tokens, t));
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        tokens.push(best);
    }
    tokens
}

pub fn log_prob(policy: &PolicyState, source_entities: &[usize], tokens: &[usize]) -> f64 {
    (0..tokens.len())
        .map(|t| {
            let active = policy.shape.features(source_entities, &tokens[..t], t);
            log_softmax(&policy.logits(&active))[tokens[t]]
        })
        .sum()
}

/// Add `scale * d log p(tokens | source) / d theta` into `grad`.
pub fn accumulate_log_prob_grad(
    policy: &PolicyState,
    source_entities: &[usize],
    tokens: &[usize],
    scale: f64,
    grad: &mut [f64],
) {
    let v = policy.shape.vocab_size;
    for t in 0..tokens.len() {
        let active = policy.shape.features(source_entities, &tokens[..t], t);
        // scale * (onehot(y_t) - softmax) is shared by every active row
        let mut delta: Vec<f64> = log_softmax(&policy.logits(&active))
            .into_iter()
            .map(|lp| -scale * lp.exp())
            .collect();
        delta[tokens[t]] += scale;
        for &f in &active {
            for (g, d) in grad[f * v..(f + 1) * v].iter_mut().zip(&delta) {
                *g += d;
            }
        }
    }
}

/// Per-batch standardization. Batches whose population standard deviation
/// is at most `eps` (including single-element batches) map to zeros.
pub fn normalize_rewards(raw: &[f64], eps: f64) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= eps {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step minimizing along `grad`.
pub fn adam_step(policy: &mut PolicyState, grad: &[f64], cfg: &AdamConfig) {
    policy.adam_t += 1;
    let t = policy.adam_t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, &g) in grad.iter().enumerate() {
        let m = cfg.beta1 * policy.adam_m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * policy.adam_v[i] + (1.0 - cfg.beta2) * g * g;
        policy.adam_m[i] = m;
        policy.adam_v[i] = v;
        policy.theta[i] -= cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
}

/// One rollout in an update batch.
#[derive(Debug, Clone)]
pub struct Rollout<'a> {
    pub source_entities: &'a [usize],
    pub tokens: &'a [usize],
    pub reward: f64,
}

/// Apply one REINFORCE update with the surrogate loss
/// `-(1/B) * sum_i reward_i * log p(y_i | x_i)`.
///
/// A batch whose rewards are all zero has an identically zero gradient and
/// leaves parameters and optimizer moments untouched; `step_count` still
/// advances.
pub fn reinforce_update(
    policy: &mut PolicyState,
    batch: &[Rollout<'_>],
    adam: &AdamConfig,
) -> Result<(), TrainError> {
    let update = policy.step_count + 1;
    if batch.iter().any(|r| !r.reward.is_finite()) {
        return Err(diverged(policy, update, "reward"));
    }
    policy.step_count = update;
    if batch.is_empty() || batch.iter().all(|r| r.reward == 0.0) {
        return Ok(());
    }
    let scale = -1.0 / batch.len() as f64;
    let mut grad = vec![0.0; policy.theta.len()];
    for r in batch {
        accumulate_log_prob_grad(policy, r.source_entities, r.tokens, scale * r.reward, &mut grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(diverged(policy, update, "gradient"));
    }
    adam_step(policy, &grad, adam);
    if !policy.is_finite() {
        return Err(diverged(policy, update, "parameters"));
    }
    Ok(())
}

fn diverged(policy: &PolicyState, update: u64, what: &str) -> TrainError {
    TrainError::NumericalDivergence {
        update,
        what: what.to_string(),
        state: Box::new(policy.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub normalize_rewards: bool,
    /// Updates between evaluation snapshots.
    pub regen_interval: u64,
    pub max_updates: u64,
    /// Held-out instances scored at every evaluation.
    pub val_size: usize,
    /// Score against the placed entities as a reference summary.
    pub use_reference_entities: bool,
    /// Reuse rollouts from a cached pool that is resampled every
    /// `regen_interval` updates instead of sampling fresh ones per update.
    pub regenerate_pool: bool,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            normalize_rewards: true,
            regen_interval: 500,
            max_updates: 5000,
            val_size: 200,
            use_reference_entities: false,
            regenerate_pool: false,
            pool_size: 1024,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.regen_interval < 1 {
            return bad("regen_interval must be at least 1");
        }
        if self.val_size < 1 {
            return bad("val_size must be at least 1");
        }
        if self.regenerate_pool && self.pool_size < 1 {
            return bad("pool_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLogEntry {
    pub update: u64,
    pub mean_val_ehi: f64,
    pub mean_val_f1: f64,
    /// Mean raw reward over the updates since the previous entry.
    pub mean_reward_raw: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PolicyState,
    pub best_update: u64,
    pub best_val_ehi: f64,
    pub final_policy: PolicyState,
    pub log: Vec<EvalLogEntry>,
}

/// Scores summaries of synthetic instances.
pub struct RewardModel<'g> {
    task: &'g SyntheticTask,
    gazetteer: &'g Gazetteer,
    metric: MetricConfig,
    use_reference: bool,
}

/// An instance with its source entity set extracted once.
#[derive(Debug, Clone)]
pub struct ScoredInstance {
    pub instance: TaskInstance,
    source_set: EntitySet,
    reference_set: EntitySet,
}

impl<'g> RewardModel<'g> {
    pub fn new(task: &'g SyntheticTask, gazetteer: &'g Gazetteer, use_reference: bool) -> Self {
        Self {
            task,
            gazetteer,
            metric: MetricConfig {
                reference_mode: if use_reference {
                    ReferenceMode::WithReference
                } else {
                    ReferenceMode::ReferenceFree
                },
                ..MetricConfig::default()
            },
            use_reference,
        }
    }

    pub fn prepare(&self, instance: TaskInstance) -> ScoredInstance {
        let source_set = extract_entities(&instance.source_text, self.gazetteer, self.metric.heuristics_enabled);
        let reference_set = EntitySet::from_keys(instance.reference_entities.iter().cloned());
        ScoredInstance {
            instance,
            source_set,
            reference_set,
        }
    }

    /// (EHI, entity F1) of a generated summary.
    pub fn score(&self, inst: &ScoredInstance, tokens: &[usize]) -> (f64, f64) {
        let text = self.task.render(tokens);
        let summary = extract_entities(&text, self.gazetteer, self.metric.heuristics_enabled);
        let reference = self.use_reference.then_some(&inst.reference_set);
        let components = compute_components(&inst.source_set, &summary, reference, &self.metric);
        let pr = entity_f1(&reference.unwrap_or(&inst.source_set).distinct, &summary.distinct);
        (ehi_from_components(&components), pr.f1)
    }
}

const VALIDATION_STREAM: u64 = 0x5E_ED0F_7E57;

/// Held-out instances for a task; depends only on the task seed.
pub fn validation_instances(task: &SyntheticTask, n: usize) -> Vec<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ VALIDATION_STREAM);
    (0..n).map(|_| generate_task_instance(task, &mut rng)).collect()
}

/// Mean greedy-decoding (EHI, F1) over prepared instances.
pub fn evaluate(policy: &PolicyState, reward: &RewardModel<'_>, instances: &[ScoredInstance]) -> (f64, f64) {
    let mut ehi = 0.0;
    let mut f1 = 0.0;
    for inst in instances {
        let tokens = greedy_summary(policy, &inst.instance.source_entities);
        let (e, f) = reward.score(inst, &tokens);
        ehi += e;
        f1 += f;
    }
    let n = instances.len().max(1) as f64;
    (ehi / n, f1 / n)
}

struct CachedRollout {
    instance: usize,
    tokens: Vec<usize>,
    reward: f64,
}

/// Run the sample, score, normalize, update loop and keep the snapshot with
/// the best validation EHI. Evaluations happen before the first update,
/// every `regen_interval` updates and after the last update.
pub fn train(task: &SyntheticTask, config: &TrainConfig, gazetteer: &Gazetteer) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    task.validate(gazetteer)?;
    let adam = config.adam();
    let reward = RewardModel::new(task, gazetteer, config.use_reference_entities);
    let val: Vec<ScoredInstance> = validation_instances(task, config.val_size)
        .into_iter()
        .map(|i| reward.prepare(i))
        .collect();

    let mut task_rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = PolicyState::zeros(task.shape());

    let mut log = Vec::new();
    let (ehi0, f10) = evaluate(&policy, &reward, &val);
    log.push(EvalLogEntry {
        update: 0,
        mean_val_ehi: ehi0,
        mean_val_f1: f10,
        mean_reward_raw: None,
    });
    let mut best = (ehi0, 0, policy.clone());

    let mut pool: Vec<ScoredInstance> = Vec::new();
    let mut cache: Vec<CachedRollout> = Vec::new();
    let mut cursor = 0;
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;

    for update in 1..=config.max_updates {
        let (instances, rollouts): (Vec<ScoredInstance>, Vec<(Vec<usize>, f64)>) = if config.regenerate_pool {
            if cache.is_empty() || (update - 1) % config.regen_interval == 0 {
                pool = (0..config.pool_size)
                    .map(|_| reward.prepare(generate_task_instance(task, &mut task_rng)))
                    .collect();
                cache = pool
                    .iter()
                    .enumerate()
                    .map(|(i, inst)| {
                        let s = sample_summary(&policy, &inst.instance.source_entities, &mut sample_rng);
                        let (r, _) = reward.score(inst, &s.tokens);
                        CachedRollout {
                            instance: i,
                            tokens: s.tokens,
                            reward: r,
                        }
                    })
                    .collect();
                cursor = 0;
            }
            (0..config.batch_size)
                .map(|_| {
                    let c = &cache[cursor % cache.len()];
                    cursor += 1;
                    (pool[c.instance].clone(), (c.tokens.clone(), c.reward))
                })
                .unzip()
        } else {
            (0..config.batch_size)
                .map(|_| {
                    let inst = reward.prepare(generate_task_instance(task, &mut task_rng));
                    let s = sample_summary(&policy, &inst.instance.source_entities, &mut sample_rng);
                    let (r, _) = reward.score(&inst, &s.tokens);
                    (inst, (s.tokens, r))
                })
                .unzip()
        };

        let raw: Vec<f64> = rollouts.iter().map(|(_, r)| *r).collect();
        reward_sum += raw.iter().sum::<f64>();
        reward_n += raw.len();
        let weights = if config.normalize_rewards {
            normalize_rewards(&raw, adam.eps)
        } else {
            raw
        };
        let batch: Vec<Rollout<'_>> = instances
            .iter()
            .zip(&rollouts)
            .zip(&weights)
            .map(|((inst, (tokens, _)), &w)| Rollout {
                source_entities: &inst.instance.source_entities,
                tokens,
                reward: w,
            })
            .collect();
        reinforce_update(&mut policy, &batch, &adam)?;

        if update % config.regen_interval == 0 || update == config.max_updates {
            let (ehi, f1) = evaluate(&policy, &reward, &val);
            log.push(EvalLogEntry {
                update,
                mean_val_ehi: ehi,
                mean_val_f1: f1,
                mean_reward_raw: Some(reward_sum / reward_n as f64),
            });
            reward_sum = 0.0;
            reward_n = 0;
            if ehi > best.0 {
                best = (ehi, update, policy.clone());
            }
        }
    }

    Ok(TrainOutcome {
        best_val_ehi: best.0,
        best_update: best.1,
        best: best.2,
        final_policy: policy,
        log,
    })
}

pub const CHECKPOINT_FORMAT: &str = "ehi-toy-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    update: u64,
    val_ehi: f64,
    policy: PolicyState,
}

/// Write a checkpoint as one JSON document with a format/version header.
pub fn write_checkpoint<W: Write>(
    policy: &PolicyState,
    update: u64,
    val_ehi: f64,
    writer: W,
) -> serde_json::Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        update,
        val_ehi,
        policy: policy.clone(),
    };
    serde_json::to_writer(writer, &ckpt)
}

pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<PolicyState, String> {
    let ckpt: Checkpoint = serde_json::from_reader(reader).map_err(|e| e.to_string())?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint {} v{}",
            ckpt.format, ckpt.version
        ));
    }
    let n = ckpt.policy.shape.feature_dim() * ckpt.policy.shape.vocab_size;
    if ckpt.policy.theta.len() != n || ckpt.policy.adam_m.len() != n || ckpt.policy.adam_v.len() != n {
        return Err("checkpoint parameter count does not match its shape".into());
    }
    Ok(ckpt.policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> PolicyShape {
        PolicyShape {
            n_entities: 3,
            vocab_size: 5,
            summary_length: 2,
        }
    }

    fn random_policy(shape: PolicyShape, seed: u64) -> PolicyState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyState::zeros(shape);
        p.theta.iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
        p
    }

    #[test]
    fn default_task_is_valid() {
        SyntheticTask::default().validate(Gazetteer::builtin()).unwrap();
        assert_eq!(SyntheticTask::default().vocab_size(), 50);
    }

    #[test]
    fn instance_has_requested_entities() {
        let task = SyntheticTask {
            entities_per_source: 2,
            ..SyntheticTask::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = generate_task_instance(&task, &mut rng);
        let set = extract_entities(&inst.source_text, Gazetteer::builtin(), true);
        assert_eq!(set.distinct.len(), 2);
        assert_eq!(inst.source_text.split(' ').count(), 20);
        let expected: Vec<_> = set.distinct.iter().cloned().collect();
        let mut refs = inst.reference_entities.clone();
        refs.sort();
        assert_eq!(refs, expected);
        for k in &set.distinct {
            assert!((1..=3).contains(&set.count(k)));
        }
    }

    #[test]
    fn instance_generation_is_deterministic() {
        let task = SyntheticTask::default();
        let a = generate_task_instance(&task, &mut ChaCha8Rng::seed_from_u64(9));
        let b = generate_task_instance(&task, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn entity_free_source_penalizes_any_entity() {
        let task = SyntheticTask {
            entities_per_source: 0,
            ..SyntheticTask::default()
        };
        task.validate(Gazetteer::builtin()).unwrap();
        let reward = RewardModel::new(&task, Gazetteer::builtin(), false);
        let inst = reward.prepare(generate_task_instance(&task, &mut ChaCha8Rng::seed_from_u64(1)));
        assert!(inst.instance.source_entities.is_empty());
        let text = task.render(&[0, 25, 26, 27, 28, 29]);
        let sum = extract_entities(&text, Gazetteer::builtin(), true);
        let rep = crate::metric::score_sets(&inst.source_set, &sum, None, &MetricConfig::default());
        assert!(rep.components.nh >= 1.0);
        assert_eq!(reward.score(&inst, &[0, 25, 26, 27, 28, 29]).0, 0.0);
    }

    #[test]
    fn task_validation_catches_collisions() {
        let g = Gazetteer::builtin();
        let mut task = SyntheticTask::default();
        task.fillers.push("alice".into());
        assert!(task.validate(g).is_err());
        let task = SyntheticTask {
            entities: vec!["nobody".into()],
            entities_per_source: 1,
            ..SyntheticTask::default()
        };
        assert!(task.validate(g).is_err());
        let task = SyntheticTask {
            summary_length: 2,
            ..SyntheticTask::default()
        };
        assert!(task.validate(g).is_err());
    }

    #[test]
    fn uniform_policy_log_prob() {
        let task = SyntheticTask::default();
        let p = PolicyState::zeros(task.shape());
        let s = sample_summary(&p, &[1, 2, 3], &mut ChaCha8Rng::seed_from_u64(0));
        let expected = 6.0 * (1.0f64 / 50.0).ln();
        assert!((s.log_prob - expected).abs() < 1e-12);
    }

    #[test]
    fn large_margin_picks_argmax() {
        let logits = [100.0, 0.0, 0.0, 0.0, 0.0];
        let lp = log_softmax(&logits);
        let rest: f64 = lp[1..].iter().map(|l| l.exp()).sum();
        assert!(rest <= 1e-40, "{rest}");
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let p = random_policy(small_shape(), 4);
        let a = sample_summary(&p, &[0, 2], &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_summary(&p, &[0, 2], &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!(a.log_prob <= 0.0);
        assert!((log_prob(&p, &[0, 2], &a.tokens) - a.log_prob).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_rewards(&[0.2, 0.4, 0.6], 1e-8);
        for (got, want) in n.iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((got - want).abs() < 1e-4, "{got}");
        }
        assert_eq!(normalize_rewards(&[0.5], 1e-8), [0.0]);
        assert_eq!(normalize_rewards(&[0.3, 0.3, 0.3], 1e-8), [0.0, 0.0, 0.0]);
        assert!(normalize_rewards(&[], 1e-8).is_empty());
    }

    #[test]
    fn zero_reward_batch_is_a_no_op() {
        let mut p = random_policy(small_shape(), 1);
        p.adam_m.iter_mut().for_each(|m| *m = 0.1);
        let before = p.clone();
        let toks = [0usize, 4];
        let batch = [Rollout {
            source_entities: &[0],
            tokens: &toks,
            reward: 0.0,
        }];
        reinforce_update(&mut p, &batch, &AdamConfig::default()).unwrap();
        assert_eq!(p.theta, before.theta);
        assert_eq!(p.adam_m, before.adam_m);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = PolicyState::zeros(small_shape());
        let grad = vec![1.0; p.theta.len()];
        adam_step(&mut p, &grad, &AdamConfig::default());
        for w in &p.theta {
            assert!((0.0099..=0.01).contains(&w.abs()), "{w}");
        }
        assert!(p.adam_v.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = small_shape();
        let p = random_policy(shape, 7);
        let src = [1usize];
        let toks = [1usize, 3];
        let mut grad = vec![0.0; p.theta.len()];
        accumulate_log_prob_grad(&p, &src, &toks, 1.0, &mut grad);
        let h = 1e-5;
        for i in 0..p.theta.len() {
            let mut plus = p.clone();
            plus.theta[i] += h;
            let mut minus = p.clone();
            minus.theta[i] -= h;
            let fd = (log_prob(&plus, &src, &toks) - log_prob(&minus, &src, &toks)) / (2.0 * h);
            let diff = (fd - grad[i]).abs();
            assert!(diff <= 1e-4 * fd.abs().max(grad[i].abs()) || diff <= 1e-9, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn positive_reward_raises_log_prob() {
        let mut p = PolicyState::zeros(small_shape());
        let toks = [2usize, 4];
        let before = log_prob(&p, &[2], &toks);
        let batch = [Rollout {
            source_entities: &[2],
            tokens: &toks,
            reward: 1.0,
        }];
        reinforce_update(&mut p, &batch, &AdamConfig::default()).unwrap();
        assert!(log_prob(&p, &[2], &toks) > before);
    }

    #[test]
    fn non_finite_reward_diverges() {
        let mut p = PolicyState::zeros(small_shape());
        let toks = [0usize, 1];
        let batch = [Rollout {
            source_entities: &[],
            tokens: &toks,
            reward: f64::NAN,
        }];
        let err = reinforce_update(&mut p, &batch, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NumericalDivergence { update: 1, .. }));
    }

    #[test]
    fn zero_updates_returns_initial_policy() {
        let task = SyntheticTask::default();
        let cfg = TrainConfig {
            max_updates: 0,
            val_size: 20,
            ..TrainConfig::default()
        };
        let out = train(&task, &cfg, Gazetteer::builtin()).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.best, PolicyState::zeros(task.shape()));
        assert_eq!(out.best_update, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let task = SyntheticTask::default();
        let cfg = TrainConfig {
            max_updates: 60,
            regen_interval: 20,
            val_size: 30,
            ..TrainConfig::default()
        };
        let a = train(&task, &cfg, Gazetteer::builtin()).unwrap();
        let b = train(&task, &cfg, Gazetteer::builtin()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_policy, b.final_policy);
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.final_policy.step_count, 60);
    }

    #[test]
    fn pool_mode_runs_and_is_deterministic() {
        let task = SyntheticTask::default();
        let cfg = TrainConfig {
            max_updates: 40,
            regen_interval: 10,
            val_size: 20,
            regenerate_pool: true,
            pool_size: 64,
            ..TrainConfig::default()
        };
        let a = train(&task, &cfg, Gazetteer::builtin()).unwrap();
        let b = train(&task, &cfg, Gazetteer::builtin()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 5);
    }

    #[test]
    fn invalid_train_config() {
        let task = SyntheticTask::default();
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { regen_interval: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(
                train(&task, &cfg, Gazetteer::builtin()),
                Err(TrainError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_policy(small_shape(), 2);
        let mut buf = Vec::new();
        write_checkpoint(&p, 500, 0.9, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"format\":\"ehi-toy-policy\",\"version\":1"));
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
        let bad = text.replace("\"version\":1", "\"version\":9");
        assert!(read_checkpoint(bad.as_bytes()).is_err());
    }
}
