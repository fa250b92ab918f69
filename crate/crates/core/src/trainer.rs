//! Training loop: seeded user batches, Adam, gradient clipping, per-epoch validation
//! with early stopping, ablation variants, and the freeze audit.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Domain, Split, SplitDataset, SplitUser};
use crate::evaluator::{evaluate, EvalConfig, EvalError, MetricReport};
use crate::model::{Backbone, CheckpointMeta, DropoutCtx, GlobalEmbedding, LocalInit, Model, ModelConfig, ModelDims, ModelError, Thread};
use crate::objectives::{contrastive_pair, total_loss, LossBreakdown, LossWeights, ObjectiveError};
use crate::profiler::UserProfileStore;
use crate::semantic::SemanticStore;
use crate::tensor::{Gradients, Graph, Mat, ParamStore, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("variant {variant} is incompatible with {reason}")]
    IncompatibleVariant { variant: Variant, reason: String },
    #[error("no profile for training user {0}")]
    MissingProfile(String),
    #[error("profile dimension {got} differs from item embedding dimension {expected}")]
    ProfileDim { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: ObjectiveError,
        /// Best checkpoint seen before divergence, if any.
        last_good: Option<Vec<u8>>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WoUnified,
    WoProfile,
    WoReg,
    WoCluster,
    WoInit,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::WoUnified, Variant::WoProfile, Variant::WoReg, Variant::WoCluster, Variant::WoInit];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoUnified => "wo_unified",
            Variant::WoProfile => "wo_profile",
            Variant::WoReg => "wo_reg",
            Variant::WoCluster => "wo_cluster",
            Variant::WoInit => "wo_init",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; expected one of full, wo_unified, wo_profile, wo_reg, wo_cluster, wo_init"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Number of semantic clusters used for profiling.
    pub k: usize,
    pub d: usize,
    pub layers: usize,
    pub l_max: usize,
    pub dropout: f64,
    pub backbone: Backbone,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.1,
            beta: 1.0,
            gamma: 1.0,
            tau: 1.0,
            k: 10,
            d: 128,
            layers: 2,
            l_max: 200,
            dropout: 0.2,
            backbone: Backbone::SelfAttention,
            patience: 10,
            max_epochs: 200,
            seed: 42,
            clip_norm: 5.0,
            alpha_grid: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            beta_grid: vec![0.1, 0.5, 1.0, 5.0, 10.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive_ints = [
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("d", self.d),
            ("layers", self.layers),
            ("l_max", self.l_max),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        let positive_floats = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive_floats {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive and finite"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !self.alpha_grid.contains(&self.alpha) {
            return bad(&format!("alpha {} is not in alpha_grid {:?}", self.alpha, self.alpha_grid));
        }
        if !self.beta_grid.contains(&self.beta) {
            return bad(&format!("beta {} is not in beta_grid {:?}", self.beta, self.beta_grid));
        }
        Ok(())
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let mut m = ModelConfig {
            d: self.d,
            layers: self.layers,
            l_max: self.l_max,
            dropout: self.dropout,
            backbone: self.backbone,
            ..Default::default()
        };
        match variant {
            Variant::WoUnified => {
                m.global_embedding = GlobalEmbedding::Scratch;
                m.local_init = LocalInit::Random;
            }
            Variant::WoInit => m.local_init = LocalInit::Random,
            _ => {}
        }
        m
    }

    pub fn weights(&self, variant: Variant) -> LossWeights {
        let mut w = LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma, tau: self.tau };
        match variant {
            Variant::WoProfile => w.beta = 0.0,
            Variant::WoReg => w.alpha = 0.0,
            _ => {}
        }
        w
    }
}

/// One user's contribution to a batch: truncated sequences, next-item pairs, the
/// co-occurrence pair, and the profile embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user_id: String,
    /// Unified item indices of the (tail-truncated) training mixed sequence.
    pub mixed: Vec<usize>,
    /// Per domain: unified item indices of the truncated local sequence.
    pub local: [Vec<usize>; 2],
    /// Per domain: next-item pairs.
    pub targets: [Vec<Target>; 2],
    /// `(A item, B item)` co-occurring in the training mixed sequence.
    pub reg_pair: Option<(usize, usize)>,
    pub profile: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    /// Row of the global-thread output: the mixed position just before the target.
    pub global_pos: usize,
    /// Row of the local-thread output: the local position just before the target.
    pub local_pos: usize,
    pub positive: usize,
    pub negative: usize,
}

fn sample_negative(rng: &mut impl Rng, dims: &ModelDims, dom: Domain, positive: usize) -> usize {
    let off = dims.offset(dom);
    let n = dims.domain_len(dom);
    if n < 2 {
        return positive;
    }
    let r = rng.random_range(0..n - 1);
    let p = positive - off;
    off + if r >= p { r + 1 } else { r }
}

/// Builds the training example for one user; negatives and the co-occurrence pair are
/// drawn from `rng`.
pub fn build_example(user: &SplitUser, dims: &ModelDims, l_max: usize, profiles: Option<&UserProfileStore>, rng: &mut impl Rng) -> Example {
    let mixed = &user.train_mixed;
    let mixed_start = mixed.len().saturating_sub(l_max);
    let mut local: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut targets: [Vec<Target>; 2] = [Vec::new(), Vec::new()];
    for dom in Domain::BOTH {
        let positions: Vec<usize> = (0..mixed.len()).filter(|&m| mixed[m].domain == dom).collect();
        let n = positions.len();
        let local_start = n.saturating_sub(l_max);
        local[dom.index()] = positions[local_start..].iter().map(|&m| mixed[m].item).collect();
        for j in local_start..n.saturating_sub(1) {
            let m = positions[j + 1];
            let g = m - 1;
            if g < mixed_start {
                continue;
            }
            let positive = mixed[m].item;
            targets[dom.index()].push(Target {
                global_pos: g - mixed_start,
                local_pos: j - local_start,
                positive,
                negative: sample_negative(rng, dims, dom, positive),
            });
        }
    }
    let a: Vec<usize> = mixed.iter().filter(|r| r.domain == Domain::A).map(|r| r.item).collect();
    let b: Vec<usize> = mixed.iter().filter(|r| r.domain == Domain::B).map(|r| r.item).collect();
    let reg_pair = (!a.is_empty() && !b.is_empty()).then(|| (a[rng.random_range(0..a.len())], b[rng.random_range(0..b.len())]));
    let profile = profiles.and_then(|p| p.get(&user.user_id)).map(|p| p.embedding.iter().map(|&x| f64::from(x)).collect());
    Example {
        user_id: user.user_id.clone(),
        mixed: mixed[mixed_start..].iter().map(|r| r.item).collect(),
        local,
        targets,
        reg_pair,
        profile,
    }
}

impl Example {
    pub fn is_empty(&self) -> bool {
        self.targets.iter().all(Vec::is_empty) && self.reg_pair.is_none() && (self.profile.is_none() || self.mixed.is_empty())
    }
}

/// Loss nodes for one batch, plus their values.
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds every loss term of one batch in `g`.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[Example],
    w: &LossWeights,
    dropout: &mut DropoutCtx,
) -> Result<BatchLoss, ObjectiveError> {
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    let mut note = |i: usize| {
        let n = index.len();
        index.entry(i).or_insert(n);
    };
    for ex in batch {
        ex.mixed.iter().for_each(|&i| note(i));
        for t in ex.targets.iter().flatten() {
            note(t.positive);
            note(t.negative);
        }
        if let Some((a, b)) = ex.reg_pair {
            note(a);
            note(b);
        }
    }
    let mut uniq = vec![0; index.len()];
    for (&item, &row) in &index {
        uniq[row] = item;
    }
    let rows = |items: &mut dyn Iterator<Item = usize>| -> Vec<usize> { items.map(|i| index[&i]).collect() };
    let table = (!uniq.is_empty()).then(|| model.global_item_embeddings(g, &uniq));

    let mut srs: [Option<Var>; 2] = [None, None];
    let mut srs_users = [0usize; 2];
    let mut finals = Vec::new();
    let mut profile_rows = Vec::new();
    for ex in batch {
        let Some(table) = table else { break };
        let hg = (!ex.mixed.is_empty()).then(|| {
            let x = g.select_rows(table, &rows(&mut ex.mixed.iter().copied()));
            model.encode_rows(g, Thread::Global, x, dropout)
        });
        for dom in Domain::BOTH {
            let ts = &ex.targets[dom.index()];
            let Some(hg) = hg.filter(|_| !ts.is_empty()) else { continue };
            let hl = model.encode_local(g, dom, &ex.local[dom.index()], dropout);
            let ug = g.select_rows(hg, &ts.iter().map(|t| t.global_pos).collect::<Vec<_>>());
            let ul = g.select_rows(hl, &ts.iter().map(|t| t.local_pos).collect::<Vec<_>>());
            let mut side = |items: Vec<usize>| {
                let eg = g.select_rows(table, &rows(&mut items.iter().copied()));
                let el = model.local_item_embeddings(g, dom, &items);
                let sg = g.row_dot(ug, eg);
                let sl = g.row_dot(ul, el);
                g.add(sg, sl)
            };
            let pos = side(ts.iter().map(|t| t.positive).collect());
            let neg = side(ts.iter().map(|t| t.negative).collect());
            let diff = g.sub(neg, pos);
            let sp = g.softplus(diff);
            let l = g.sum(sp);
            srs[dom.index()] = Some(match srs[dom.index()] {
                Some(acc) => g.add(acc, l),
                None => l,
            });
            srs_users[dom.index()] += 1;
        }
        if let (Some(hg), Some(p)) = (hg, &ex.profile) {
            let last = g.value(hg).rows - 1;
            finals.push(g.select_rows(hg, &[last]));
            profile_rows.push(p.clone());
        }
    }
    let zero = g.constant(Mat::scalar(0.0));
    let mut srs_vars = [zero, zero];
    for dom in Domain::BOTH {
        if let Some(s) = srs[dom.index()] {
            srs_vars[dom.index()] = g.scale(s, 1.0 / srs_users[dom.index()] as f64);
        }
    }

    let pairs: Vec<(usize, usize)> = batch.iter().filter_map(|e| e.reg_pair).collect();
    let reg = match table {
        Some(table) if pairs.len() >= 2 => {
            let a = g.select_rows(table, &rows(&mut pairs.iter().map(|p| p.0)));
            let b = g.select_rows(table, &rows(&mut pairs.iter().map(|p| p.1)));
            let (f, s) = contrastive_pair(g, a, b, w.gamma);
            g.add(f, s)
        }
        _ => zero,
    };
    let profile = if finals.len() >= 2 {
        let u = g.stack_rows(&finals);
        let p = model.project_profiles(g, &Mat::from_rows(&profile_rows));
        let (f, s) = contrastive_pair(g, u, p, w.tau);
        g.add(f, s)
    } else {
        zero
    };

    let srs_sum = g.add(srs_vars[0], srs_vars[1]);
    let reg_w = g.scale(reg, w.alpha);
    let prof_w = g.scale(profile, w.beta);
    let t = g.add(srs_sum, reg_w);
    let total = g.add(t, prof_w);
    let breakdown = total_loss(g.scalar(srs_vars[0]), g.scalar(srs_vars[1]), g.scalar(reg), g.scalar(profile), w)?;
    Ok(BatchLoss { total, breakdown })
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Mat::zeros(p.rows, p.cols)).collect();
        Self { lr: cfg.learning_rate, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, t: 0, m: zeros(), v: zeros() }
    }

    /// Parameters absent from `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in 0..params.len() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] -= self.lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-step breakdowns.
    pub loss: LossBreakdown,
    pub steps: usize,
    pub valid: MetricReport,
    /// Mean validation H@10 over both domains.
    pub criterion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub item_embeddings_before: String,
    pub item_embeddings_after: String,
    pub profiles_before: String,
    pub profiles_after: String,
}

impl FreezeAudit {
    pub fn holds(&self) -> bool {
        self.item_embeddings_before == self.item_embeddings_after && self.profiles_before == self.profiles_after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_criterion: f64,
    pub stopped_early: bool,
    pub freeze: FreezeAudit,
}

pub struct TrainOutcome {
    /// The best-epoch model, decoded from `checkpoint`.
    pub model: Model,
    pub checkpoint: Vec<u8>,
    pub report: TrainReport,
}

pub struct TrainInputs<'a> {
    pub dataset: &'a SplitDataset,
    pub semantic: &'a SemanticStore,
    /// Profiles built from the clustered partition.
    pub profiles: &'a UserProfileStore,
    /// Profiles built without partitioning, needed by `wo_cluster` only.
    pub single_cluster_profiles: Option<&'a UserProfileStore>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    epoch: usize,
    step: usize,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
    grad_norm: f64,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    criterion: f64,
    valid: &'a MetricReport,
}

fn mean_breakdown(items: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        srs_a: s(|b| b.srs_a),
        srs_b: s(|b| b.srs_b),
        reg: s(|b| b.reg),
        profile: s(|b| b.profile),
        total: s(|b| b.total),
        alpha: w.alpha,
        beta: w.beta,
        gamma: w.gamma,
        tau: w.tau,
    }
}

/// Trains one variant end to end. Every step and epoch is appended to `log` as a JSON line.
pub fn train(
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    variant: Variant,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let profiles = match variant {
        Variant::WoCluster => {
            if cfg.k == 1 {
                return Err(TrainError::IncompatibleVariant { variant, reason: "k = 1 (profiling is already unpartitioned)".into() });
            }
            inputs
                .single_cluster_profiles
                .ok_or_else(|| TrainError::IncompatibleVariant { variant, reason: "missing unpartitioned profiles".into() })?
        }
        _ => inputs.profiles,
    };
    if let Some(u) = inputs.dataset.users.iter().find(|u| !u.train_mixed.is_empty() && !profiles.contains(&u.user_id)) {
        return Err(TrainError::MissingProfile(u.user_id.clone()));
    }
    let d_llm = inputs.semantic.global.dim();
    if let Some(got) = profiles.dim().filter(|&p| p != d_llm) {
        return Err(TrainError::ProfileDim { expected: d_llm, got });
    }

    let weights = cfg.weights(variant);
    let mut model = Model::new(cfg.model_config(variant), inputs.semantic, cfg.seed)?;
    log::info!("training {variant}: {model}");
    let items_before = inputs.semantic.global.checksum();
    let frozen_before = model.frozen_items_checksum();
    let profiles_before = profiles.checksum();

    let mut adam = Adam::new(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let eval_cfg = EvalConfig { k_list: vec![10], mask_history: false };
    let meta = |epoch: usize| CheckpointMeta {
        config: serde_json::json!({ "train": cfg, "variant": variant }),
        id_map_checksum: inputs.dataset.id_map.checksum(),
        frozen_items_checksum: frozen_before.clone(),
        seeds: vec![cfg.seed],
        epoch,
    };

    let trainable: Vec<&SplitUser> = inputs.dataset.users.iter().filter(|u| !u.train_mixed.is_empty()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut order = trainable.clone();
        order.shuffle(&mut rng);
        let mut step_losses = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|u| build_example(u, &model.dims, cfg.l_max, Some(profiles), &mut rng)).collect();
            if batch.iter().all(Example::is_empty) {
                log::warn!("epoch {epoch} step {step}: empty batch skipped");
                continue;
            }
            let mut dropout = DropoutCtx::training(cfg.dropout, rng.next_u64());
            let (breakdown, mut grads) = {
                let mut g = Graph::new(&model.params);
                let out = batch_loss(&mut g, &model, &batch, &weights, &mut dropout).map_err(|source| TrainError::Diverged {
                    epoch,
                    source,
                    last_good: best.as_ref().map(|b| b.2.clone()),
                })?;
                (out.breakdown, g.backward(out.total))
            };
            let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads);
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &StepLine { epoch, step, loss: &breakdown, grad_norm }).map_err(std::io::Error::from)?;
                writeln!(w)?;
            }
            step_losses.push(breakdown);
        }
        let valid = evaluate(&model, inputs.dataset, Split::Valid, &eval_cfg)?;
        let criterion = valid.mean_hit(10);
        log::info!("epoch {epoch}: loss {:.4} valid H@10 {criterion:.4}", mean_breakdown(&step_losses, &weights).total);
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &EpochLine { epoch, criterion, valid: &valid }).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        epochs.push(EpochRecord { epoch, loss: mean_breakdown(&step_losses, &weights), steps: step_losses.len(), valid, criterion });
        if best.as_ref().is_none_or(|b| criterion > b.1) {
            best = Some((epoch, criterion, model.to_checkpoint(&meta(epoch))));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (best_epoch, best_criterion, checkpoint) = best.expect("max_epochs >= 1");
    let (model, _) = Model::from_checkpoint(&checkpoint, inputs.semantic)?;
    let freeze = FreezeAudit {
        item_embeddings_before: format!("{items_before}:{frozen_before}"),
        item_embeddings_after: format!("{}:{}", inputs.semantic.global.checksum(), model.frozen_items_checksum()),
        profiles_before,
        profiles_after: profiles.checksum(),
    };
    Ok(TrainOutcome { model, checkpoint, report: TrainReport { variant, epochs, best_epoch, best_criterion, stopped_early, freeze } })
}

/// Trains `variant` and reports its test metrics alongside the training report.
pub fn run_ablation(
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    variant: Variant,
    eval: &EvalConfig,
) -> Result<(TrainReport, MetricReport), TrainError> {
    let out = train(inputs, cfg, variant, None)?;
    let test = evaluate(&out.model, inputs.dataset, Split::Test, eval)?;
    Ok((out.report, test))
}
