//! Loss, AdamW, learning-rate schedule and the staged training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layout::{apply_token_dropout, LayoutConfig, MAX_TOKEN_DROPOUT};
use crate::model::{Model, Objective, Parameters};
use crate::pathways::{prepare_sample, Pathway};
use crate::rng::{stream_rng, RngState, StreamRng};
use crate::sample::{ModalityRegistry, MultimodalSample, Split};
use crate::scheduler::{enforce_length_policy, padding_waste, plan_epoch, sample_encoder_length, validate_stages, Stage};
use crate::tensor::Mat;

/// Mean token cross-entropy over non-pad targets (`None`), uniform across
/// modalities.
pub fn reconstruction_loss(logits: &[Mat], targets: &[Vec<Option<u32>>]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::Shape("one target list per logit block".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (l, ts) in logits.iter().zip(targets) {
        if l.rows != ts.len() {
            return Err(Error::Shape("targets do not match logit rows".into()));
        }
        for (r, t) in ts.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = l.row(r);
            if t as usize >= row.len() {
                return Err(Error::TokenOutOfRange { id: t, size: row.len() });
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| libm::exp(x - mx)).sum();
            total += mx + libm::log(z) - row[t as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Skip("all targets are padding".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Mat> = params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    pub fn matches(&self, params: &Parameters) -> bool {
        self.m.len() == params.tensors.len()
            && self.v.len() == params.tensors.len()
            && self
                .m
                .iter()
                .zip(&self.v)
                .zip(&params.tensors)
                .all(|((m, v), p)| m.same_shape(p) && v.same_shape(p))
    }
}

/// Bias-corrected Adam update with decoupled weight decay
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn optimizer_step(params: &mut Parameters, grads: &[Mat], state: &mut OptimState, lr: f64) -> Result<()> {
    if !state.matches(params) || grads.len() != params.tensors.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (g, name) in grads.iter().zip(&params.names) {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                where_: format!("gradient of {name}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(state.beta1, t as f64);
    let c2 = 1.0 - libm::pow(state.beta2, t as f64);
    let decay = 1.0 - lr * state.weight_decay;
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = state.beta1 * m.data[k] + (1.0 - state.beta1) * gk;
            v.data[k] = state.beta2 * v.data[k] + (1.0 - state.beta2) * gk * gk;
            let mhat = m.data[k] / c1;
            let vhat = v.data[k] / c2;
            p.data[k] = p.data[k] * decay - lr * mhat / (libm::sqrt(vhat) + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub cooldown_epochs: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    /// Schedule with `min_lr = max_lr / 100`.
    pub fn new(max_lr: f64, warmup_epochs: f64, cooldown_epochs: f64, total_epochs: f64) -> Result<Self> {
        let s = Self {
            max_lr,
            min_lr: max_lr / 100.0,
            warmup_epochs,
            cooldown_epochs,
            total_epochs,
        };
        if !(max_lr.is_finite() && max_lr > 0.0) {
            return Err(invalid("max_lr must be positive"));
        }
        if warmup_epochs < 0.0 || cooldown_epochs < 0.0 || warmup_epochs + cooldown_epochs > total_epochs {
            return Err(invalid("warmup and cooldown must fit inside the total epochs"));
        }
        Ok(s)
    }

    /// Paper defaults: 8 warmup and 10 cooldown epochs.
    pub fn paper(max_lr: f64, total_epochs: f64) -> Result<Self> {
        Self::new(max_lr, 8.0, 10.0, total_epochs)
    }
}

/// Linear warmup to `max_lr`, cosine decay to `min_lr`, then a cooldown
/// held at `min_lr`.
pub fn lr_at(step: u64, epoch_length: u64, s: &LrSchedule) -> f64 {
    let e = step as f64 / epoch_length.max(1) as f64;
    let main_end = s.total_epochs - s.cooldown_epochs;
    if e < s.warmup_epochs {
        return s.max_lr * e / s.warmup_epochs;
    }
    if e < main_end {
        let span = main_end - s.warmup_epochs;
        let x = (e - s.warmup_epochs) / span;
        return s.min_lr + (s.max_lr - s.min_lr) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * x));
    }
    // the cosine already ends at the floor, so the cooldown holds it
    s.min_lr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub warmup_epochs: f64,
    pub cooldown_epochs: f64,
    pub n_buckets: usize,
    /// Per-step dropout rate is drawn uniformly from `[0, dropout_max]`
    /// unless `fixed_dropout` is set.
    pub dropout_max: f64,
    pub fixed_dropout: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: crate::scheduler::paper_stages(),
            warmup_epochs: 8.0,
            cooldown_epochs: 10.0,
            n_buckets: 8,
            dropout_max: MAX_TOKEN_DROPOUT,
            fixed_dropout: None,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub padding_waste: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub target_tokens: usize,
    pub skipped: usize,
    pub pathways: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimState,
    pub step: u64,
    pub rng: RngState,
    pub records: Vec<MetricsRecord>,
    pub skipped_samples: usize,
}

/// Prepared inputs for one sample: flattened encoder, decoder segments and
/// the pathway that produced them.
fn prepare_step_sample(
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    pathways: &[Pathway],
    model: &Model,
    dropout: f64,
    rng: &mut StreamRng,
) -> Result<(crate::layout::FlatLayout, crate::model::DecoderInput, String)> {
    let layout_cfg = LayoutConfig {
        encoder_budget: model.config.encoder_budget,
        register_count: model.config.register_count,
    };
    let prep = prepare_sample(sample, registry, pathways, &layout_cfg, model.config.decoder_budget, rng)?;
    let layout = apply_token_dropout(&prep.layout, dropout, rng)?;
    Ok((layout.flatten(), prep.decoder, prep.pathway))
}

/// Trains `model` on the train split through every configured stage.
/// `on_record` sees each metrics record as it is produced.
pub fn train(
    mut model: Model,
    corpus: &[MultimodalSample],
    registry: &ModalityRegistry,
    pathways: &[Pathway],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    validate_stages(&cfg.stages)?;
    crate::pathways::validate_pathways(pathways, registry)?;
    if !(0.0..=1.0).contains(&cfg.dropout_max) {
        return Err(invalid("dropout_max outside [0, 1]"));
    }
    let train: Vec<&MultimodalSample> = corpus.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let mut rng = stream_rng(cfg.seed, 0x7EA1);
    let mut opt = OptimState::new(&model.params);
    opt.weight_decay = cfg.weight_decay;
    let mut records = Vec::new();
    let mut step = 0u64;
    let mut skipped_samples = 0;

    for (si, stage) in cfg.stages.iter().enumerate() {
        let budget = stage.context_budget.min(model.config.encoder_budget.saturating_sub(model.config.register_count));
        let schedule = LrSchedule::new(stage.max_lr, cfg.warmup_epochs, cfg.cooldown_epochs, stage.epochs as f64)?;
        let mut stage_step = 0u64;
        for epoch in 0..stage.epochs {
            let survivors: Vec<MultimodalSample> = train
                .iter()
                .filter_map(|s| enforce_length_policy(s, registry, budget, &mut rng))
                .collect();
            if survivors.is_empty() {
                return Err(Error::Empty("samples surviving the length policy"));
            }
            let lengths: Vec<usize> = survivors.iter().map(|s| sample_encoder_length(s, registry)).collect();
            let plan = plan_epoch(&lengths, budget, cfg.n_buckets, stage.batch_target, &mut rng)?;
            let epoch_length = plan.len() as u64;
            for batch in plan {
                let dropout = match cfg.fixed_dropout {
                    Some(d) => d,
                    None => rng.random::<f64>() * cfg.dropout_max,
                };
                let lr = lr_at(stage_step, epoch_length, &schedule);
                let mut grads: Option<Vec<Mat>> = None;
                let mut loss_sum = 0.0;
                let mut count = 0usize;
                let mut skipped = 0;
                let mut used = BTreeMap::new();
                for &i in &batch {
                    let (enc, dec, pathway) = match prepare_step_sample(&survivors[i], registry, pathways, &model, dropout, &mut rng) {
                        Ok(x) => x,
                        Err(Error::Skip(_)) | Err(Error::OverBudget { .. }) => {
                            skipped += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let (out, g) = model.loss_and_grads(&enc, &dec, Objective::CrossEntropy)?;
                    if out.target_count == 0 {
                        skipped += 1;
                        continue;
                    }
                    *used.entry(pathway).or_insert(0) += 1;
                    loss_sum += out.loss_sum;
                    count += out.target_count;
                    match &mut grads {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                        None => grads = Some(g),
                    }
                }
                skipped_samples += skipped;
                let waste = padding_waste(&batch.iter().map(|&i| lengths[i]).collect::<Vec<_>>())?;
                if let Some(mut g) = grads.filter(|_| count > 0) {
                    let inv = 1.0 / count as f64;
                    g.iter_mut().for_each(|m| m.data.iter_mut().for_each(|x| *x *= inv));
                    optimizer_step(&mut model.params, &g, &mut opt, lr)?;
                    let rec = MetricsRecord {
                        step,
                        stage: si,
                        epoch,
                        loss: loss_sum * inv,
                        lr,
                        padding_waste: waste,
                        dropout,
                        batch_size: batch.len(),
                        target_tokens: count,
                        skipped,
                        pathways: used,
                    };
                    on_record(&rec);
                    records.push(rec);
                    step += 1;
                }
                stage_step += 1;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        step,
        rng: RngState::capture(&rng),
        records,
        skipped_samples,
    })
}
