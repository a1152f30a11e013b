//! Training pipeline: full-precision baseline, mixed-precision search,
//! retraining at the sampled widths and the ablation variants.

pub mod adam;
pub mod metrics;
pub mod model;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{group_by_frequency, Dataset, FeatureCatalog, GroupAssignment, Samples, Split};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::search::{sample_precision, CandidateSet, GroupPrecisionState, SampledPrecision};

use self::adam::AdamState;
pub use self::model::{
    forward_backward, gather_inputs, predict, EmbeddingMode, EmbeddingSource, Gradients, Mlp, ModelState, ModelView,
    StepOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Search,
    Retrain,
    RetrainLth,
    NoRetrainEval,
    /// Fixed-width quantization-aware training from scratch.
    Qat,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Search => "search",
            Phase::Retrain => "retrain",
            Phase::RetrainLth => "retrain_lth",
            Phase::NoRetrainEval => "no_retrain_eval",
            Phase::Qat => "qat",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Phase::Baseline => 0,
            Phase::Search => 1,
            Phase::Retrain => 2,
            Phase::RetrainLth => 3,
            Phase::NoRetrainEval => 4,
            Phase::Qat => 5,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Phase::Baseline,
            1 => Phase::Search,
            2 => Phase::Retrain,
            3 => Phase::RetrainLth,
            4 => Phase::NoRetrainEval,
            5 => Phase::Qat,
            t => return Err(Error::Format(format!("unknown phase tag {t}"))),
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Phase::Baseline,
            "search" => Phase::Search,
            "retrain" => Phase::Retrain,
            "retrain_lth" => Phase::RetrainLth,
            "no_retrain_eval" => Phase::NoRetrainEval,
            "qat" => Phase::Qat,
            other => return Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
        })
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    /// Learning rate for the group logits; defaults to `learning_rate`.
    pub gamma_learning_rate: Option<f64>,
    /// Learning rate for step sizes and offsets; defaults to `learning_rate`.
    pub quant_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub tau: f64,
    pub group_size: usize,
    pub candidate_bits: Vec<u32>,
    pub hidden_sizes: Vec<usize>,
    /// Width used by the `qat` phase.
    pub qat_bits: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Baseline,
            learning_rate: 1e-3,
            gamma_learning_rate: None,
            quant_learning_rate: None,
            weight_decay: 0.0,
            batch_size: 256,
            epochs: 4,
            lambda: 1e-5,
            tau: 3e-3,
            group_size: 128,
            candidate_bits: (0..=6).collect(),
            hidden_sizes: vec![64, 32],
            qat_bits: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn candidates(&self) -> Result<CandidateSet> {
        CandidateSet::from_bits(&self.candidate_bits)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        for (name, lr) in [
            ("gamma_learning_rate", self.gamma_learning_rate),
            ("quant_learning_rate", self.quant_learning_rate),
        ] {
            if let Some(lr) = lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::InvalidArgument(format!("{name} must be positive")));
                }
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.group_size == 0 {
            return bad("group_size must be positive");
        }
        self.candidates()?;
        BitWidth::new(self.qat_bits)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: f64,
    pub logloss: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub valid_logloss: f64,
    pub avg_expected_bits: f64,
    pub best_valid_auc: f64,
}

/// AUC and logloss of any embedding source feeding `mlp`.
pub fn evaluate_source<S: EmbeddingSource + ?Sized>(source: &S, mlp: &Mlp, data: &Samples) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let logits = predict(source, mlp, data);
    let probs: Vec<f64> = logits.iter().map(|&z| metrics::sigmoid(z)).collect();
    Ok(EvalMetrics {
        auc: metrics::auc(&logits, &data.labels)?,
        logloss: metrics::logloss(&probs, &data.labels),
    })
}

pub fn evaluate(model: &ModelState, data: &Samples, mode: &EmbeddingMode) -> Result<EvalMetrics> {
    let view = ModelView::new(model, mode)?;
    evaluate_source(&view, &model.mlp, data)
}

/// Adam buffers for every parameter tensor of a model.
pub struct Optimizer {
    embeddings: AdamState,
    mlp: Vec<(AdamState, AdamState)>,
    alpha: AdamState,
    beta: AdamState,
    gamma: AdamState,
    t: u64,
    lr: f64,
    quant_lr: f64,
    gamma_lr: f64,
    weight_decay: f64,
}

impl Optimizer {
    pub fn new(model: &ModelState, cfg: &TrainConfig) -> Self {
        Self {
            embeddings: AdamState::new(model.embeddings.len()),
            mlp: model
                .mlp
                .layers
                .iter()
                .map(|l| (AdamState::new(l.weight.len()), AdamState::new(l.bias.len())))
                .collect(),
            alpha: AdamState::new(model.quant.step_sizes().len()),
            beta: AdamState::new(model.dim),
            gamma: AdamState::new(model.precision.as_ref().map_or(0, |s| s.gamma().len())),
            t: 0,
            lr: cfg.learning_rate,
            quant_lr: cfg.quant_learning_rate.unwrap_or(cfg.learning_rate),
            gamma_lr: cfg.gamma_learning_rate.unwrap_or(cfg.learning_rate),
            weight_decay: cfg.weight_decay,
        }
    }

    /// Decoupled weight decay touches `E` and `W` only; step sizes are
    /// floored after the update.
    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients) {
        self.t += 1;
        let (lr, wd, t) = (self.lr, self.weight_decay, self.t);
        self.embeddings.step(&mut model.embeddings, &grads.embeddings, lr, wd, t);
        for ((layer, g), (mw, mb)) in model.mlp.layers.iter_mut().zip(&grads.mlp).zip(&mut self.mlp) {
            mw.step(&mut layer.weight, &g.weight, lr, wd, t);
            mb.step(&mut layer.bias, &g.bias, lr, wd, t);
        }

        let bits: Vec<BitWidth> = model.quant.step_sizes().keys().copied().collect();
        let mut alphas: Vec<f64> = model.quant.step_sizes().values().copied().collect();
        let alpha_grads: Vec<f64> = bits.iter().map(|b| grads.alpha[b.get() as usize]).collect();
        self.alpha.step(&mut alphas, &alpha_grads, self.quant_lr, 0.0, t);
        for (b, a) in bits.iter().zip(alphas) {
            *model.quant.step_size_mut(*b).unwrap() = a;
        }
        model.quant.clamp_step_sizes();
        self.beta.step(model.quant.offsets_mut(), &grads.beta, self.quant_lr, 0.0, t);

        if let Some(state) = model.precision.as_mut() {
            self.gamma.step(state.gamma_mut(), &grads.gamma, self.gamma_lr, 0.0, t);
        }
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best validation AUC.
    pub best: ModelState,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Objective value of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

fn avg_expected_bits(model: &ModelState, mode: &EmbeddingMode) -> f64 {
    match *mode {
        EmbeddingMode::FullPrecision => 32.0,
        EmbeddingMode::Quantized { sampled, .. } => sampled.avg_bits,
        EmbeddingMode::Mixture { groups, cands, .. } => {
            let state = model.precision.as_ref().unwrap();
            let per_group = state.expected_bits(cands);
            let total: f64 = per_group
                .iter()
                .enumerate()
                .map(|(k, e)| e * groups.group_len(k) as f64)
                .sum();
            total / groups.num_features() as f64
        }
    }
}

/// Mini-batch Adam over `train`, validating after every epoch and keeping
/// the best-validation parameters.
pub fn train(
    mut model: ModelState,
    mode: &EmbeddingMode,
    cfg: &TrainConfig,
    phase: Phase,
    train: &Samples,
    valid: &Samples,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut opt = Optimizer::new(&model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_losses = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelState, usize, f64)> = None;
    let mut batch_index = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let out = forward_backward(&model, train, rows, mode).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    batch: batch_index,
                    detail: format!("{detail} (epoch {epoch}, rows {:?}..)", &rows[..rows.len().min(8)]),
                },
                other => other,
            })?;
            opt.step(&mut model, &out.grads);
            step_losses.push(out.loss);
            epoch_loss += out.loss;
            epoch_batches += 1;
            batch_index += 1;
        }
        let val = evaluate(&model, valid, mode)?;
        let improved = best.as_ref().is_none_or(|(_, _, auc)| val.auc > *auc);
        if improved {
            best = Some((model.clone(), epoch, val.auc));
        }
        metrics.push(EpochMetrics {
            phase,
            epoch,
            train_loss: epoch_loss / epoch_batches as f64,
            valid_auc: val.auc,
            valid_logloss: val.logloss,
            avg_expected_bits: avg_expected_bits(&model, mode),
            best_valid_auc: best.as_ref().unwrap().2,
        });
    }
    let (best, best_epoch, _) = match best {
        Some(b) => b,
        None => (model, 0, f64::NAN),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        metrics,
        step_losses,
    })
}

/// Everything a phase produces.
#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub valid: EvalMetrics,
    pub test: EvalMetrics,
    /// Sampled widths used by quantized phases.
    pub sampled: Option<SampledPrecision>,
}

/// Runs one pipeline phase.
///
/// `retrain`, `retrain_lth` and `no_retrain_eval` need the search checkpoint
/// as `prior`; their widths come from `sampled` when given, else from the
/// prior's logits.
pub fn run_phase(
    cfg: &TrainConfig,
    data: &Dataset,
    catalog: &FeatureCatalog,
    prior: Option<&Checkpoint>,
    sampled: Option<SampledPrecision>,
) -> Result<PhaseResult> {
    cfg.validate()?;
    let hash = catalog.hash();
    if data.num_fields() != catalog.num_fields() {
        return Err(Error::DimensionMismatch {
            expected: catalog.num_fields(),
            actual: data.num_fields(),
        });
    }
    let train_split = data.split(Split::Train);
    let valid_split = data.split(Split::Valid);
    let test_split = data.split(Split::Test);
    let phase = cfg.phase;

    let needs_prior = matches!(phase, Phase::Retrain | Phase::RetrainLth | Phase::NoRetrainEval);
    let prior = match (needs_prior, prior) {
        (true, None) => {
            return Err(Error::MissingPrerequisite(format!("{phase} needs a search checkpoint")));
        }
        (true, Some(p)) => {
            p.catalog_hash.ensure_eq(&hash)?;
            if p.phase != Phase::Search {
                return Err(Error::MissingPrerequisite(format!(
                    "{phase} needs a search checkpoint, got {}",
                    p.phase
                )));
            }
            Some(p)
        }
        (false, p) => {
            if let Some(p) = p {
                p.catalog_hash.ensure_eq(&hash)?;
            }
            None
        }
    };

    let (cands, group_size) = match prior {
        Some(p) => (p.candidates.clone(), p.group_size),
        None => (cfg.candidates()?, cfg.group_size),
    };
    let groups = group_by_frequency(catalog, group_size)?;
    let fresh = |cands: &CandidateSet| {
        ModelState::init(
            catalog.len(),
            catalog.dim(),
            catalog.num_fields(),
            &cfg.hidden_sizes,
            cands,
            cfg.seed,
        )
    };

    let resolve_sampled = |p: &Checkpoint| -> Result<SampledPrecision> {
        match &sampled {
            Some(s) => {
                if s.bit_of_group.len() != groups.num_groups() {
                    return Err(Error::DimensionMismatch {
                        expected: groups.num_groups(),
                        actual: s.bit_of_group.len(),
                    });
                }
                if let Some(b) = s.bit_of_group.iter().find(|b| !p.candidates.contains(**b)) {
                    return Err(Error::InvalidArgument(format!("sampled width {b} is not a candidate")));
                }
                Ok(s.clone())
            }
            None => {
                let state = p
                    .model
                    .precision
                    .as_ref()
                    .ok_or_else(|| Error::MissingPrerequisite("search checkpoint has no logits".into()))?;
                sample_precision(state, &p.candidates, &groups)
            }
        }
    };

    let result = match phase {
        Phase::Baseline => {
            let mode = EmbeddingMode::FullPrecision;
            let out = train(fresh(&cands), &mode, cfg, phase, &train_split, &valid_split)?;
            finish(phase, out, &mode, &hash, &groups, &cands, None, None, &valid_split, &test_split)?
        }
        Phase::Qat => {
            let bits = BitWidth::new(cfg.qat_bits)?;
            let mut qat_bits: Vec<u32> = cands.bits().iter().map(|b| b.get()).collect();
            if !qat_bits.contains(&bits.get()) {
                qat_bits.push(bits.get());
                qat_bits.sort_unstable();
            }
            let qat_cands = CandidateSet::from_bits(&qat_bits)?;
            let uniform = SampledPrecision::uniform(&groups, bits);
            let mode = EmbeddingMode::Quantized {
                groups: &groups,
                sampled: &uniform,
            };
            let out = train(fresh(&qat_cands), &mode, cfg, phase, &train_split, &valid_split)?;
            finish(
                phase,
                out,
                &mode,
                &hash,
                &groups,
                &qat_cands,
                None,
                Some(uniform.clone()),
                &valid_split,
                &test_split,
            )?
        }
        Phase::Search => {
            let mut model = fresh(&cands);
            model.precision = Some(GroupPrecisionState::new(groups.num_groups(), cands.len(), cfg.tau)?);
            let initial = model.clone();
            let mode = EmbeddingMode::Mixture {
                groups: &groups,
                cands: &cands,
                lambda: cfg.lambda,
            };
            let out = train(model, &mode, cfg, phase, &train_split, &valid_split)?;
            let state = out.best.precision.as_ref().unwrap();
            let picked = sample_precision(state, &cands, &groups)?;
            let mut res = finish(
                phase,
                out,
                &mode,
                &hash,
                &groups,
                &cands,
                Some(initial),
                None,
                &valid_split,
                &test_split,
            )?;
            res.sampled = Some(picked);
            res
        }
        Phase::Retrain | Phase::RetrainLth => {
            let p = prior.unwrap();
            let initial = p
                .initial
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("search checkpoint has no initial snapshot".into()))?;
            let picked = resolve_sampled(p)?;
            let mut model = if phase == Phase::Retrain {
                let mut m = p.model.clone();
                m.embeddings = initial.embeddings.clone();
                m
            } else {
                initial.clone()
            };
            model.precision = None;
            let mode = EmbeddingMode::Quantized {
                groups: &groups,
                sampled: &picked,
            };
            let out = train(model, &mode, cfg, phase, &train_split, &valid_split)?;
            finish(
                phase,
                out,
                &mode,
                &hash,
                &groups,
                &cands,
                None,
                Some(picked.clone()),
                &valid_split,
                &test_split,
            )?
        }
        Phase::NoRetrainEval => {
            let p = prior.unwrap();
            let picked = resolve_sampled(p)?;
            let mut model = p.model.clone();
            model.precision = None;
            let mode = EmbeddingMode::Quantized {
                groups: &groups,
                sampled: &picked,
            };
            let valid = evaluate(&model, &valid_split, &mode)?;
            let test = evaluate(&model, &test_split, &mode)?;
            let metrics = vec![EpochMetrics {
                phase,
                epoch: 0,
                train_loss: f64::NAN,
                valid_auc: valid.auc,
                valid_logloss: valid.logloss,
                avg_expected_bits: picked.avg_bits,
                best_valid_auc: valid.auc,
            }];
            PhaseResult {
                checkpoint: Checkpoint {
                    phase,
                    catalog_hash: hash,
                    group_size: groups.group_size(),
                    candidates: cands.clone(),
                    model,
                    initial: None,
                    sampled: Some(picked.bit_of_group.clone()),
                },
                metrics,
                step_losses: Vec::new(),
                valid,
                test,
                sampled: Some(picked),
            }
        }
    };
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    phase: Phase,
    out: TrainOutcome,
    mode: &EmbeddingMode,
    hash: &crate::catalog::CatalogHash,
    groups: &GroupAssignment,
    cands: &CandidateSet,
    initial: Option<ModelState>,
    sampled: Option<SampledPrecision>,
    valid_split: &Samples,
    test_split: &Samples,
) -> Result<PhaseResult> {
    let valid = evaluate(&out.best, valid_split, mode)?;
    let test = evaluate(&out.best, test_split, mode)?;
    Ok(PhaseResult {
        checkpoint: Checkpoint {
            phase,
            catalog_hash: *hash,
            group_size: groups.group_size(),
            candidates: cands.clone(),
            model: out.best,
            initial,
            sampled: sampled.as_ref().map(|s| s.bit_of_group.clone()),
        },
        metrics: out.metrics,
        step_losses: out.step_losses,
        valid,
        test,
        sampled,
    })
}
