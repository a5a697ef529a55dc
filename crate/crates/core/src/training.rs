//! Joint training: token-level generation loss on the positive target,
//! per-sentence bag-of-words loss on the latent plans, and the coherence
//! hinge against the four constructed negatives, mixed as
//! `total = l_gen + alpha * l_bow + beta * l_cl`.
//!
//! One example occupies one graph: the source is encoded once and the
//! encoder states are reused by the positive and all negative decodes.
//! Generation and bag-of-words losses are computed on the positive only.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ProcessedRecord;
use crate::error::{Error, Result};
use crate::model::{Mode, Planet};
use crate::negatives::{make_negative_set, NegativePools, NegativeSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{GradStore, Graph, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::NodeId;
use crate::vocab::{Vocabulary, PAD};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Bag-of-words loss weight.
    pub alpha: f64,
    /// Contrastive loss weight.
    pub beta: f64,
    /// Contrastive margin.
    pub phi: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Validate every this many epochs.
    pub validate_every: usize,
    /// Fraction of total steps spent in linear LR warmup.
    pub warmup_frac: f64,
    /// Bypass the content-selection layer (ablation).
    pub disable_selection: bool,
    /// Worker threads for example-level parallelism inside a batch.
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.25,
            beta: 0.2,
            phi: 0.5,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 8,
            max_epochs: 5,
            seed: 0,
            grad_clip_norm: 1.0,
            validate_every: 1,
            warmup_frac: 0.05,
            disable_selection: false,
            threads: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::Config(format!("phi {} not in (0,1)", self.phi)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, validate_every must be >= 1".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gen: f64,
    pub l_bow: f64,
    pub l_cl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// |total - (l_gen + alpha*l_bow + beta*l_cl)|, which must stay <= 1e-10.
    pub fn mixing_residual(&self, alpha: f64, beta: f64) -> f64 {
        (self.total - (self.l_gen + alpha * self.l_bow + beta * self.l_cl)).abs()
    }
}

/// Teacher-forced token loss: logits at position t predict target position
/// t+1; mean over non-PAD positions (SN and EOS included).
pub fn lm_loss(g: &mut Graph, lm_logits: NodeId, target_ids: &[usize]) -> Result<NodeId> {
    if target_ids.len() < 2 {
        return Err(Error::EmptyLoss);
    }
    let rows: Vec<usize> = (0..target_ids.len() - 1).collect();
    let shifted = g.tape.gather_rows(lm_logits, &rows)?;
    g.tape.cross_entropy(shifted, &target_ids[1..], Some(PAD))
}

/// Eq-style bag-of-words loss: -(1/J) sum_j sum_l log p(z_jl | SN_j).
pub fn bow_loss(
    g: &mut Graph,
    bow_logits: NodeId,
    labels: &[std::collections::BTreeSet<usize>],
) -> Result<NodeId> {
    let label_lists: Vec<Vec<usize>> = labels.iter().map(|s| s.iter().copied().collect()).collect();
    g.tape.bow_nll(bow_logits, &label_lists)
}

/// sum_k max(0, phi + r_neg_k - r_pos) over scalar coherence scores.
pub fn contrastive_loss(
    g: &mut Graph,
    r_pos: NodeId,
    r_negs: &[NodeId],
    phi: f64,
) -> Result<NodeId> {
    g.tape.hinge_sum(r_pos, r_negs, phi)
}

/// Loss nodes of one example's forward pass.
pub struct ExampleLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// (mean token loss) * token count, for corpus perplexity aggregation.
    pub lm_token_count: usize,
}

/// Build the complete loss graph for one example. Negatives are decoded
/// against the already-encoded source, and only feed the coherence hinge.
pub fn example_loss<'p>(
    model: &'p Planet,
    record: &ProcessedRecord,
    negatives: Option<&NegativeSet>,
    tc: &TrainingConfig,
    mode: &mut Mode,
) -> Result<(Graph<'p>, ExampleLoss)> {
    let ex = &record.processed;
    let mut g = Graph::new(&model.params);
    let enc = model.encode(&mut g, &ex.source_ids, &ex.segment_positions, mode)?;
    let h = model.decode_teacher_forced(&mut g, enc.states, &ex.target_ids, mode)?;
    let (h_d, _) = if tc.disable_selection {
        (h, true)
    } else {
        model.content_selection(&mut g, h, enc.bank)?
    };

    let logits = model.lm_logits(&mut g, h_d)?;
    let l_gen = lm_loss(&mut g, logits, &ex.target_ids)?;
    let mut total = l_gen;

    let mut l_bow_val = 0.0;
    if tc.alpha > 0.0 {
        let sn_positions = ex.sn_positions();
        let sn_states = g.tape.gather_rows(h, &sn_positions)?;
        let bow_logits = model.bow_logits(&mut g, sn_states)?;
        let l_bow = bow_loss(&mut g, bow_logits, &ex.bow_labels)?;
        l_bow_val = g.tape.value(l_bow).data[0];
        let scaled = g.tape.scale(l_bow, tc.alpha);
        total = g.tape.add(total, scaled)?;
    }

    let mut l_cl_val = 0.0;
    if tc.beta > 0.0 {
        let negs = negatives.ok_or_else(|| {
            Error::Config("contrastive loss enabled but no negatives supplied".into())
        })?;
        let r_pos = model.coherence_score(&mut g, h_d)?;
        let mut r_negs = Vec::with_capacity(4);
        for variant in negs.variants() {
            let hn =
                model.decode_teacher_forced(&mut g, enc.states, &variant.processed.target_ids, mode)?;
            let (hn_d, _) = if tc.disable_selection {
                (hn, true)
            } else {
                model.content_selection(&mut g, hn, enc.bank)?
            };
            r_negs.push(model.coherence_score(&mut g, hn_d)?);
        }
        let l_cl = contrastive_loss(&mut g, r_pos, &r_negs, tc.phi)?;
        l_cl_val = g.tape.value(l_cl).data[0];
        let scaled = g.tape.scale(l_cl, tc.beta);
        total = g.tape.add(total, scaled)?;
    }

    let breakdown = LossBreakdown {
        l_gen: g.tape.value(l_gen).data[0],
        l_bow: l_bow_val,
        l_cl: l_cl_val,
        total: g.tape.value(total).data[0],
    };
    let loss = ExampleLoss {
        total,
        breakdown,
        lm_token_count: ex.target_ids.len() - 1,
    };
    Ok((g, loss))
}

/// One optimizer step on a single example (the batched loop shares the same
/// internals). Returns the loss breakdown for the step.
pub fn train_step(
    model: &mut Planet,
    record: &ProcessedRecord,
    negatives: Option<&NegativeSet>,
    opt: &mut AdamW,
    tc: &TrainingConfig,
    dropout_rng: &mut SeedRng,
    lr_scale: f64,
) -> Result<LossBreakdown> {
    let mut mode = Mode::train(model.config.dropout, dropout_rng);
    let (mut g, loss) = example_loss(model, record, negatives, tc, &mut mode)?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss(loss.breakdown.total));
    }
    g.backward(loss.total)?;
    let mut grads = GradStore::zeros_like(&model.params);
    g.accumulate_grads(&mut grads);
    drop(g);
    grads.clip_global_norm(tc.grad_clip_norm);
    opt.step(&mut model.params, &grads, lr_scale)?;
    Ok(loss.breakdown)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_gen: f64,
    pub l_bow: f64,
    pub l_cl: f64,
    pub val_loss: f64,
    pub seconds: f64,
    pub val_l_gen: f64,
    pub val_ppl: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,l_gen,l_bow,l_cl,val_loss,seconds,val_l_gen,val_ppl";

impl EpochRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3},{:.6},{:.6}",
            self.epoch,
            self.l_gen,
            self.l_bow,
            self.l_cl,
            self.val_loss,
            self.seconds,
            self.val_l_gen,
            self.val_ppl
        )
    }
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    EpochDone(&'a EpochRow),
    StepSkipped { epoch: usize, step: usize, reason: String },
}

pub struct TrainResult {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters at the best validation loss.
    pub best_params: ParamSet,
    pub best_optimizer: AdamW,
    pub skipped_steps: usize,
}

/// Per-example gradient work item output.
struct ExampleGrads {
    grads: GradStore,
    breakdown: LossBreakdown,
}

fn compute_example(
    model: &Planet,
    record: &ProcessedRecord,
    negatives: Option<&NegativeSet>,
    tc: &TrainingConfig,
    mut dropout_rng: SeedRng,
) -> Result<ExampleGrads> {
    let mut mode = Mode::train(model.config.dropout, &mut dropout_rng);
    let (mut g, loss) = example_loss(model, record, negatives, tc, &mut mode)?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss(loss.breakdown.total));
    }
    g.backward(loss.total)?;
    let mut grads = GradStore::zeros_like(&model.params);
    g.accumulate_grads(&mut grads);
    Ok(ExampleGrads {
        grads,
        breakdown: loss.breakdown,
    })
}

/// Gradient of the batch mean loss plus the mean per-example breakdowns.
/// Examples may be evaluated on worker threads; accumulation happens in
/// example order, so results do not depend on the thread count.
fn batch_grads(
    model: &Planet,
    records: &[ProcessedRecord],
    batch: &[usize],
    negs: &[Option<NegativeSet>],
    tc: &TrainingConfig,
    rngs: Vec<SeedRng>,
) -> Result<(GradStore, LossBreakdown)> {
    let workers = tc.threads.max(1).min(batch.len());
    let mut results: Vec<Option<Result<ExampleGrads>>> = Vec::new();
    results.resize_with(batch.len(), || None);

    if workers <= 1 {
        for (k, &idx) in batch.iter().enumerate() {
            results[k] = Some(compute_example(
                model,
                &records[idx],
                negs[k].as_ref(),
                tc,
                rngs[k].clone(),
            ));
        }
    } else {
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (w..batch.len()).step_by(workers).collect())
            .collect();
        let slots: Vec<std::sync::Mutex<Option<Result<ExampleGrads>>>> =
            (0..batch.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for chunk in &chunks {
                let slots = &slots;
                let rngs = &rngs;
                let negs = &negs;
                scope.spawn(move || {
                    for &k in chunk {
                        let out = compute_example(
                            model,
                            &records[batch[k]],
                            negs[k].as_ref(),
                            tc,
                            rngs[k].clone(),
                        );
                        *slots[k].lock().unwrap() = Some(out);
                    }
                });
            }
        });
        for (k, slot) in slots.into_iter().enumerate() {
            results[k] = slot.into_inner().unwrap();
        }
    }

    let mut grads = GradStore::zeros_like(&model.params);
    let mut sum = LossBreakdown::default();
    for r in results.into_iter() {
        let r = r.expect("slot filled")?;
        for (dst, src) in grads.iter_mut_vecs().zip(r.grads.iter()) {
            for (x, y) in dst.iter_mut().zip(src) {
                *x += y;
            }
        }
        sum.l_gen += r.breakdown.l_gen;
        sum.l_bow += r.breakdown.l_bow;
        sum.l_cl += r.breakdown.l_cl;
        sum.total += r.breakdown.total;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((
        grads,
        LossBreakdown {
            l_gen: sum.l_gen / n,
            l_bow: sum.l_bow / n,
            l_cl: sum.l_cl / n,
            total: sum.total / n,
        },
    ))
}

/// Mean validation losses (eval mode, deterministic negatives independent of
/// the epoch) plus corpus perplexity over target tokens.
pub fn validate(
    model: &Planet,
    records: &[ProcessedRecord],
    pools: &NegativePools,
    vocab: &Vocabulary,
    tc: &TrainingConfig,
) -> Result<(LossBreakdown, f64)> {
    if records.is_empty() {
        return Err(Error::Data("validation corpus is empty".into()));
    }
    let val_seed = SeedRng::new(tc.seed).derive("val-negatives", 0).seed();
    let mut sum = LossBreakdown::default();
    let mut nll_sum = 0.0;
    let mut token_sum = 0usize;
    for (idx, record) in records.iter().enumerate() {
        let negs = if tc.beta > 0.0 {
            Some(make_negative_set(records, pools, idx, vocab, val_seed)?)
        } else {
            None
        };
        let (_, loss) = example_loss(model, record, negs.as_ref(), tc, &mut Mode::eval())?;
        sum.l_gen += loss.breakdown.l_gen;
        sum.l_bow += loss.breakdown.l_bow;
        sum.l_cl += loss.breakdown.l_cl;
        sum.total += loss.breakdown.total;
        nll_sum += loss.breakdown.l_gen * loss.lm_token_count as f64;
        token_sum += loss.lm_token_count;
    }
    let n = records.len() as f64;
    let breakdown = LossBreakdown {
        l_gen: sum.l_gen / n,
        l_bow: sum.l_bow / n,
        l_cl: sum.l_cl / n,
        total: sum.total / n,
    };
    let ppl = (nll_sum / token_sum as f64).exp();
    Ok((breakdown, ppl))
}

/// Full training loop: shuffled batches, linear warmup, per-epoch validation,
/// best-checkpoint retention by validation total loss.
pub fn train(
    model: &mut Planet,
    train_records: &[ProcessedRecord],
    val_records: &[ProcessedRecord],
    vocab: &Vocabulary,
    tc: &TrainingConfig,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainResult> {
    tc.validate()?;
    if train_records.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let pools = NegativePools::build(train_records, vocab);
    let val_pools = NegativePools::build(val_records, vocab);
    let mut opt = AdamW::new(&model.params, tc.adamw());
    let root = SeedRng::new(tc.seed);

    let n = train_records.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.max_epochs;
    let warmup_steps = ((tc.warmup_frac * total_steps as f64).round() as usize).max(1);

    let mut rows = Vec::new();
    let mut best_epoch = 0;
    let mut best_val_loss = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut best_optimizer = opt.clone();
    let mut skipped_steps = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..tc.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        root.derive("order", epoch as u64).shuffle(&mut order);
        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_batches = 0usize;

        for (step, batch) in order.chunks(tc.batch_size).enumerate() {
            global_step += 1;
            let lr_scale = if global_step < warmup_steps {
                global_step as f64 / warmup_steps as f64
            } else {
                1.0
            };
            // negatives and dropout streams keyed by (seed, epoch, example)
            let mut negs = Vec::with_capacity(batch.len());
            let mut rngs = Vec::with_capacity(batch.len());
            for &idx in batch {
                let neg_seed = root
                    .derive("negatives", (epoch * n + idx) as u64)
                    .seed();
                negs.push(if tc.beta > 0.0 {
                    Some(make_negative_set(train_records, &pools, idx, vocab, neg_seed)?)
                } else {
                    None
                });
                rngs.push(root.derive("dropout", (epoch * n + idx) as u64));
            }
            match batch_grads(model, train_records, batch, &negs, tc, rngs) {
                Ok((mut grads, breakdown)) => {
                    grads.clip_global_norm(tc.grad_clip_norm);
                    match opt.step(&mut model.params, &grads, lr_scale) {
                        Ok(()) => {
                            epoch_sum.l_gen += breakdown.l_gen;
                            epoch_sum.l_bow += breakdown.l_bow;
                            epoch_sum.l_cl += breakdown.l_cl;
                            epoch_sum.total += breakdown.total;
                            epoch_batches += 1;
                        }
                        Err(Error::NonFiniteGrad(name)) => {
                            skipped_steps += 1;
                            on_event(&TrainEvent::StepSkipped {
                                epoch,
                                step,
                                reason: format!("non-finite gradient in `{}`", name),
                            });
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::NonFiniteLoss(v)) => {
                    skipped_steps += 1;
                    on_event(&TrainEvent::StepSkipped {
                        epoch,
                        step,
                        reason: format!("non-finite loss {}", v),
                    });
                }
                Err(e) => return Err(e),
            }
        }

        let denom = epoch_batches.max(1) as f64;
        let mut row = EpochRow {
            epoch,
            l_gen: epoch_sum.l_gen / denom,
            l_bow: epoch_sum.l_bow / denom,
            l_cl: epoch_sum.l_cl / denom,
            val_loss: f64::NAN,
            seconds: 0.0,
            val_l_gen: f64::NAN,
            val_ppl: f64::NAN,
        };
        if (epoch + 1) % tc.validate_every == 0 || epoch + 1 == tc.max_epochs {
            let (val, ppl) = validate(model, val_records, &val_pools, vocab, tc)?;
            row.val_loss = val.total;
            row.val_l_gen = val.l_gen;
            row.val_ppl = ppl;
            if val.total < best_val_loss {
                best_val_loss = val.total;
                best_epoch = epoch;
                best_params = model.params.clone();
                best_optimizer = opt.clone();
            }
        }
        row.seconds = started.elapsed().as_secs_f64();
        on_event(&TrainEvent::EpochDone(&row));
        rows.push(row);
    }

    Ok(TrainResult {
        rows,
        best_epoch,
        best_val_loss,
        best_params,
        best_optimizer,
        skipped_steps,
    })
}
