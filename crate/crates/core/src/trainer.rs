//! Two-phase alternating training and the ablation runners.
//!
//! Phase 1 updates the encoders, the concatenation heads and the decoder with
//! `C_S` and `C_V` frozen. Phase 2 recomputes the factors with the encoders
//! frozen and updates `C_S` and `C_V` only. Both phases see the same batch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{BatchNormMode, Reduction, Tape, Var};
use crate::backdoor::{adjusted_logits, batch_recipes, Strategy};
use crate::config::{TrainConfig, Variant};
use crate::data::{epoch_batches, Batch, MultiDomainDataset};
use crate::error::{Error, Result};
pub use crate::eval::classification_accuracy;
use crate::losses::{self, LossName, LossReport};
use crate::model::ModelBundle;
use crate::optim::{lr_schedule, OptimizerState};

/// One weighted term of a phase objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Term {
    pub name: LossName,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub terms: Vec<Term>,
    /// `Σ weight · value`, the minimized objective.
    pub total: f64,
    pub batch_size: usize,
    /// Correct `argmax C_S(s)` predictions in the batch.
    pub id_correct: usize,
    /// Mean per-sample entropy of `C_V` on `s`.
    pub entropy_d_given_s: f64,
}

impl PhaseReport {
    pub fn reports(&self) -> Vec<LossReport> {
        self.terms
            .iter()
            .map(|t| LossReport {
                name: t.name,
                value: t.value,
                batch_size: self.batch_size,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub phase1: PhaseReport,
    pub phase2: PhaseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub steps: usize,
    /// Per-term means over the epoch's steps.
    pub losses: BTreeMap<String, f64>,
    pub phase1_total: f64,
    pub phase2_total: f64,
    pub train_accuracy: f64,
    pub entropy_d_given_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

pub struct TrainState {
    pub bundle: ModelBundle,
    /// Encoder-side partition: `θ_S, θ_V, φ_C^S, φ_C^V` and the decoder.
    pub opt_enc: OptimizerState,
    /// Classifier-side partition: `φ_S, φ_V`.
    pub opt_cls: OptimizerState,
    pub epoch: u32,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub log: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bundle = ModelBundle::new(config.bundle_spec(), &mut rng)?;
        Ok(Self::from_bundle(config, bundle, rng))
    }

    pub fn from_bundle(config: &TrainConfig, bundle: ModelBundle, rng: ChaCha8Rng) -> Self {
        let opt_enc = OptimizerState::new(config.optimizer, &bundle.store, bundle.encoder_side_params());
        let opt_cls = OptimizerState::new(config.optimizer, &bundle.store, bundle.classifier_side_params());
        TrainState {
            bundle,
            opt_enc,
            opt_cls,
            epoch: 0,
            step: 0,
            rng,
            log: Vec::new(),
        }
    }
}

fn finite(name: LossName, tape: &Tape, v: Var) -> Result<f64> {
    let x = tape.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::PoisonedState {
            term: name.as_str().to_string(),
        })
    }
}

fn posterior_stats(tape: &mut Tape, id_logits: Var, ids: &[usize], dom_logits: Var) -> Result<(usize, f64)> {
    let pred = tape.value(id_logits).argmax_rows();
    let correct = pred.iter().zip(ids).filter(|(p, y)| p == y).count();
    let p = tape.softmax(dom_logits)?;
    let h = losses::conditional_entropy(tape.value(p))?;
    Ok((correct, h.mean))
}

/// Builds the terms, then minimizes their weighted sum.
fn finish(tape: &Tape, terms: Vec<(LossName, f64, Var)>) -> Result<(Vec<Term>, Vec<(f64, Var)>)> {
    let mut out = Vec::with_capacity(terms.len());
    let mut weighted = Vec::with_capacity(terms.len());
    for (name, weight, v) in terms {
        let value = finite(name, tape, v)?;
        out.push(Term { name, weight, value });
        weighted.push((weight, v));
    }
    Ok((out, weighted))
}

fn total_of(terms: &[Term]) -> f64 {
    terms.iter().filter(|t| t.weight != 0.0).map(|t| t.weight * t.value).sum()
}

/// Phase 1: encoders, concatenation heads and decoder; `C_S`, `C_V` frozen.
pub fn phase1_step(state: &mut TrainState, config: &TrainConfig, batch: &Batch, lr: f64) -> Result<PhaseReport> {
    let bundle = &state.bundle;
    let mut tape = Tape::with_trainable(bundle.encoder_side_params());
    let x = tape.input(batch.pixels.clone());
    let s = bundle.encode(&mut tape, &bundle.f_s, x, BatchNormMode::Train)?;
    let id_logits = bundle.classify(&mut tape, &bundle.c_s, s)?;
    let id_s = losses::ce_label_smoothing(&mut tape, id_logits, &batch.ids, config.label_smoothing)?;
    let mut terms = vec![(LossName::IdS, 1.0, id_s)];
    let dom_on_s = bundle.classify(&mut tape, &bundle.c_v, s)?;

    if config.variant != Variant::Baseline {
        let v = bundle.encode(&mut tape, &bundle.f_v, x, BatchNormMode::Train)?;
        let dom_logits = bundle.classify(&mut tape, &bundle.c_v, v)?;
        let dom_v = tape.cross_entropy(dom_logits, &batch.domains, 0.0, Reduction::Mean)?;
        match config.variant {
            Variant::DualDann => {
                let sr = tape.grad_reverse(s, config.grl_lambda)?;
                let l = bundle.classify(&mut tape, &bundle.c_v, sr)?;
                let mis_dom = tape.cross_entropy(l, &batch.domains, 0.0, Reduction::Mean)?;
                let vr = tape.grad_reverse(v, config.grl_lambda)?;
                let l = bundle.classify(&mut tape, &bundle.c_s, vr)?;
                let mis_id = tape.cross_entropy(l, &batch.ids, 0.0, Reduction::Mean)?;
                terms.push((LossName::IndisDom, config.lambda1, mis_dom));
                terms.push((LossName::DomV, 1.0, dom_v));
                terms.push((LossName::IndisId, config.lambda2, mis_id));
            }
            _ => {
                let indis_dom = losses::indistinguishability(&mut tape, dom_on_s)?;
                let id_on_v = bundle.classify(&mut tape, &bundle.c_s, v)?;
                let indis_id = losses::indistinguishability(&mut tape, id_on_v)?;
                terms.push((LossName::IndisDom, config.lambda1, indis_dom));
                terms.push((LossName::DomV, 1.0, dom_v));
                terms.push((LossName::IndisId, config.lambda2, indis_id));
            }
        }
        if config.variant == Variant::Dir {
            let pool = tape.value(v).clone();
            let recipes = batch_recipes(&config.ba, &pool, &mut state.rng)?;
            let v_const = tape.detach(v);
            let s_const = tape.detach(s);
            let l3 = adjusted_logits(&mut tape, bundle, &bundle.cc_s, s, v_const, &config.ba, &recipes)?;
            let invar = losses::invar_loss(&mut tape, l3, &batch.ids, config.invar_smoothing, Reduction::Mean)?;
            let l4 = adjusted_logits(&mut tape, bundle, &bundle.cc_v, s_const, v, &config.ba, &recipes)?;
            let invar_v = losses::invar_loss(&mut tape, l4, &batch.ids, config.invar_smoothing, Reduction::Mean)?;
            terms.push((LossName::Invar, config.lambda3, invar));
            terms.push((LossName::InvarV, config.lambda4, invar_v));
        }
        if config.recon_weight > 0.0 {
            let recon = bundle.decode(&mut tape, s, v)?;
            let r = losses::recon_loss(&mut tape, recon, x)?;
            terms.push((LossName::Recon, config.recon_weight, r));
        }
    }

    let (terms, weighted) = finish(&tape, terms)?;
    let (id_correct, entropy) = posterior_stats(&mut tape, id_logits, &batch.ids, dom_on_s)?;
    let objective = tape.weighted_sum(&weighted)?;
    let grads = tape.backward(objective)?;
    let stats = tape.take_stat_updates();
    state.opt_enc.step(&mut state.bundle.store, &grads, lr)?;
    state.bundle.store.apply_stat_updates(stats);
    Ok(PhaseReport {
        total: total_of(&terms),
        terms,
        batch_size: batch.ids.len(),
        id_correct,
        entropy_d_given_s: entropy,
    })
}

/// Phase 2: `C_S` and `C_V` on recomputed, frozen factors.
pub fn phase2_step(state: &mut TrainState, config: &TrainConfig, batch: &Batch, lr: f64) -> Result<PhaseReport> {
    let bundle = &state.bundle;
    let mut tape = Tape::with_trainable(bundle.classifier_side_params());
    let x = tape.input(batch.pixels.clone());
    let s = bundle.encode(&mut tape, &bundle.f_s, x, BatchNormMode::TrainFrozenStats)?;
    let id_logits = bundle.classify(&mut tape, &bundle.c_s, s)?;
    let id_s = losses::ce_label_smoothing(&mut tape, id_logits, &batch.ids, config.label_smoothing)?;
    let dom_on_s = bundle.classify(&mut tape, &bundle.c_v, s)?;
    let mut terms = vec![(LossName::IdS, 1.0, id_s)];
    if config.variant != Variant::Baseline {
        let v = bundle.encode(&mut tape, &bundle.f_v, x, BatchNormMode::TrainFrozenStats)?;
        let dom_s = tape.cross_entropy(dom_on_s, &batch.domains, 0.0, Reduction::Mean)?;
        let l = bundle.classify(&mut tape, &bundle.c_v, v)?;
        let dom_v = tape.cross_entropy(l, &batch.domains, 0.0, Reduction::Mean)?;
        let l = bundle.classify(&mut tape, &bundle.c_s, v)?;
        let id_v = tape.cross_entropy(l, &batch.ids, 0.0, Reduction::Mean)?;
        terms.push((LossName::DomS, 1.0, dom_s));
        terms.push((LossName::DomV, 1.0, dom_v));
        terms.push((LossName::IdV, 1.0, id_v));
    }
    let (terms, weighted) = finish(&tape, terms)?;
    let (id_correct, entropy) = posterior_stats(&mut tape, id_logits, &batch.ids, dom_on_s)?;
    let objective = tape.weighted_sum(&weighted)?;
    let grads = tape.backward(objective)?;
    state.opt_cls.step(&mut state.bundle.store, &grads, lr)?;
    Ok(PhaseReport {
        total: total_of(&terms),
        terms,
        batch_size: batch.ids.len(),
        id_correct,
        entropy_d_given_s: entropy,
    })
}

/// One epoch over `data`: shuffled batches, each through phase 1 then phase 2.
pub fn run_epoch(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &MultiDomainDataset,
    test: Option<&MultiDomainDataset>,
) -> Result<(EpochMetrics, Vec<StepReport>)> {
    let lr = lr_schedule(state.epoch, config.optimizer.lr, &config.schedule);
    let plan = epoch_batches(data.len(), config.batch_size, &mut state.rng)?;
    let mut steps = Vec::with_capacity(plan.len());
    for idx in &plan {
        let batch = data.batch(idx)?;
        let phase1 = phase1_step(state, config, &batch, lr)?;
        let phase2 = phase2_step(state, config, &batch, lr)?;
        state.step += 1;
        steps.push(StepReport {
            step: state.step,
            phase1,
            phase2,
        });
    }
    let n = steps.len() as f64;
    let mut losses: BTreeMap<String, f64> = BTreeMap::new();
    for st in &steps {
        for (phase, rep) in [("p1", &st.phase1), ("p2", &st.phase2)] {
            for t in &rep.terms {
                *losses.entry(format!("{phase}.{}", t.name)).or_default() += t.value / n;
            }
        }
    }
    let seen: usize = steps.iter().map(|s| s.phase1.batch_size).sum();
    let correct: usize = steps.iter().map(|s| s.phase1.id_correct).sum();
    let metrics = EpochMetrics {
        epoch: state.epoch,
        lr,
        steps: steps.len(),
        losses,
        phase1_total: steps.iter().map(|s| s.phase1.total).sum::<f64>() / n,
        phase2_total: steps.iter().map(|s| s.phase2.total).sum::<f64>() / n,
        train_accuracy: correct as f64 / seen as f64,
        entropy_d_given_s: steps.iter().map(|s| s.phase1.entropy_d_given_s).sum::<f64>() / n,
        test_accuracy: test.map(|t| classification_accuracy(&state.bundle, t)).transpose()?,
    };
    state.epoch += 1;
    state.log.push(metrics.clone());
    Ok((metrics, steps))
}

/// Full training run.
pub fn train(config: &TrainConfig, data: &MultiDomainDataset, test: Option<&MultiDomainDataset>) -> Result<TrainState> {
    train_with(config, data, test, |_, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with<F>(config: &TrainConfig, data: &MultiDomainDataset, test: Option<&MultiDomainDataset>, mut on_epoch: F) -> Result<TrainState>
where
    F: FnMut(&EpochMetrics, &[StepReport]) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::DegenerateBatch { op: "train", count: 0 });
    }
    let mut state = TrainState::new(config)?;
    for _ in 0..config.epochs {
        let (m, steps) = run_epoch(&mut state, config, data, test)?;
        on_epoch(&m, &steps)?;
    }
    Ok(state)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `mean - baseline mean`.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_accuracies(seeds: Vec<u64>, per_variant: Vec<(Variant, Vec<f64>)>) -> Self {
        let base = per_variant
            .iter()
            .find(|(v, _)| *v == Variant::Baseline)
            .map(|(_, a)| mean_std(a).0)
            .unwrap_or(0.0);
        let rows = per_variant
            .into_iter()
            .map(|(variant, accuracies)| {
                let (mean, std) = mean_std(&accuracies);
                AblationRow {
                    variant,
                    accuracies,
                    mean,
                    std,
                    improvement: mean - base,
                }
            })
            .collect();
        AblationTable { seeds, rows }
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Aligned text table, accuracies in percent.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10} {:>9} {:>7} {:>12}\n", "variant", "accuracy", "std", "improvement");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>9.2} {:>7.2} {:>+12.2}\n",
                r.variant.as_str(),
                100.0 * r.mean,
                100.0 * r.std,
                100.0 * r.improvement
            ));
        }
        out
    }
}

/// Trains every variant for every seed and reports test accuracy.
pub fn run_ablation(
    base: &TrainConfig,
    data: &MultiDomainDataset,
    test: &MultiDomainDataset,
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let mut per_variant = Vec::new();
    for v in Variant::ALL {
        let mut accs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                variant: v,
                seed,
                ..base.clone()
            };
            let state = train(&cfg, data, None)?;
            let acc = classification_accuracy(&state.bundle, test)?;
            progress(v, seed, acc);
            accs.push(acc);
        }
        per_variant.push((v, accs));
    }
    Ok(AblationTable::from_accuracies(seeds.to_vec(), per_variant))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub k: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, strategy: Strategy, k: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.k == k)
    }

    /// Strategies at `k`, best mean first; ties keep declaration order.
    pub fn ranking(&self, k: usize) -> Vec<Strategy> {
        let mut at: Vec<&SweepCell> = self.cells.iter().filter(|c| c.k == k).collect();
        at.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        at.into_iter().map(|c| c.strategy).collect()
    }

    /// Strategies as rows, K as columns, mean accuracy in percent.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10}", "strategy");
        for k in &self.ks {
            out.push_str(&format!(" {:>8}", format!("K={k}")));
        }
        out.push('\n');
        for s in Strategy::ALL {
            out.push_str(&format!("{:<10}", s.as_str()));
            for &k in &self.ks {
                match self.cell(s, k) {
                    Some(c) => out.push_str(&format!(" {:>8.2}", 100.0 * c.mean)),
                    None => out.push_str(&format!(" {:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The `dir` variant under every strategy and K.
pub fn run_strategy_sweep(
    base: &TrainConfig,
    data: &MultiDomainDataset,
    test: &MultiDomainDataset,
    ks: &[usize],
    seeds: &[u64],
    mut progress: impl FnMut(Strategy, usize, u64, f64),
) -> Result<SweepTable> {
    let mut cells = Vec::new();
    for s in Strategy::ALL {
        for &k in ks {
            let mut accs = Vec::new();
            for &seed in seeds {
                let mut cfg = TrainConfig {
                    variant: Variant::Dir,
                    seed,
                    ..base.clone()
                };
                cfg.ba.strategy = s;
                cfg.ba.k = k;
                let state = train(&cfg, data, None)?;
                let acc = classification_accuracy(&state.bundle, test)?;
                progress(s, k, seed, acc);
                accs.push(acc);
            }
            let mean = mean_std(&accs).0;
            cells.push(SweepCell {
                strategy: s,
                k,
                accuracies: accs,
                mean,
            });
        }
    }
    Ok(SweepTable {
        seeds: seeds.to_vec(),
        ks: ks.to_vec(),
        cells,
    })
}
