//! Phase-sequential training. Each phase sees one modality; from the second
//! phase on, the end-of-phase copy of the previous model acts as the frozen
//! historical branch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{hybrid_align_var, AlignWeights};
use crate::baselines::{ewc_gradients, ewc_penalty, fullr_gradients, fullr_penalty, FisherDiagonal};
use crate::bridging::{cross_attention_var, merge_adapter_with};
use crate::config::ModelConfig;
use crate::data::{PairedTestSet, PhaseDataset, Split};
use crate::error::{MilError, Result};
use crate::evaluation::{
    eval_accuracy, late_fusion_accuracy, per_class_accuracy, predict, split_logits, Classifier, EvalReport, SMatrix,
};
use crate::model::{init_model, names, ModelState};
use crate::modulation::{draw_noise, gather_prototypes, modulate_var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{derive_rng, Binder, ParamGrads, Parameters};
use crate::tape::{softmax_rows, Tape, Var};

/// Tolerance of the end-of-phase merge check.
pub const MERGE_TOLERANCE: f64 = 1e-5;
/// Samples used by the merge check.
const MERGE_CHECK_SAMPLES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Seqf,
    Frozen,
    Fullr,
    Ewc,
    Lwf,
    Harmony,
    Jointt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Seqf,
        Method::Frozen,
        Method::Fullr,
        Method::Ewc,
        Method::Lwf,
        Method::Harmony,
        Method::Jointt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Seqf => "seqf",
            Method::Frozen => "frozen",
            Method::Fullr => "fullr",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
            Method::Harmony => "harmony",
            Method::Jointt => "jointt",
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MilError::config("method", format!("unknown method {s:?}; valid methods: {}", Self::valid_ids())))
    }
}

/// Frozen end-of-phase copy of a model.
#[derive(Debug, Clone)]
pub struct PhaseSnapshot {
    model: ModelState,
    phase: usize,
    checksum: String,
}

impl PhaseSnapshot {
    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    /// Checksum recorded at creation.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// `true` while the parameters still hash to the recorded checksum.
    pub fn is_intact(&self) -> bool {
        self.model.checksum() == self.checksum
    }
}

pub fn snapshot_model(model: &ModelState, phase: usize) -> PhaseSnapshot {
    PhaseSnapshot {
        model: model.clone(),
        phase,
        checksum: model.checksum(),
    }
}

/// Mean cross-entropy plus `λ ·` alignment loss.
pub fn total_loss(logits: &Array2<f64>, labels: &[usize], align_loss: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(MilError::config("lambda_align", "must be non-negative"));
    }
    if logits.nrows() != labels.len() {
        return Err(MilError::shape("total_loss labels", logits.nrows(), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(MilError::Index {
            context: "total_loss label".into(),
            index: y,
            len: logits.ncols(),
        });
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, labels);
    Ok(tape.scalar(ce) + lambda * align_loss)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    /// Unweighted hybrid alignment loss and its parts.
    pub align: f64,
    pub direct: f64,
    pub contrastive: f64,
    pub distribution: f64,
    /// Baseline regulariser (FullR, EwC or LwF term), already weighted.
    pub penalty: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub phase: usize,
    pub modality: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub checksum: String,
    /// Largest relative change of current-branch outputs across the merge.
    pub merge_rel_diff: Option<f64>,
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainReport {
    /// Wall-clock time is excluded.
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.phase == other.phase
            && self.modality == other.modality
            && self.epochs == other.epochs
            && self.steps == other.steps
            && self.checksum == other.checksum
            && self.merge_rel_diff == other.merge_rel_diff
    }
}

/// Passed to the step observer after every optimizer step.
pub struct StepEvent<'a> {
    pub phase: usize,
    pub epoch: usize,
    pub step: u64,
    pub model: &'a ModelState,
    pub loss: f64,
    /// Mixture weights recomputed with the updated parameters.
    pub alpha: Option<Array2<f64>>,
    /// Proxy weights recomputed with the updated scorer.
    pub beta: Option<Array2<f64>>,
}

/// Passed to the phase-end hook once the phase is finalised.
pub struct PhaseEnd<'a> {
    pub phase: usize,
    pub modality: &'a str,
    pub model: &'a ModelState,
    pub report: &'a TrainReport,
}

#[derive(Default)]
pub struct RunHooks<'a> {
    pub on_step: Option<&'a mut dyn FnMut(&StepEvent)>,
    pub on_phase_end: Option<&'a mut dyn FnMut(&PhaseEnd) -> Result<()>>,
}

/// Cross-phase state of the regularisation baselines.
#[derive(Debug, Clone, Default)]
pub struct Regularizers {
    /// One Fisher estimate and anchor per completed phase.
    pub ewc_terms: Vec<(FisherDiagonal, PhaseSnapshot)>,
}

/// Everything one call of [`train_phase_with`] needs besides the model.
pub struct PhaseSetup<'a> {
    pub method: Method,
    pub phase: usize,
    pub snapshot: Option<&'a PhaseSnapshot>,
    /// Training sources. One for every method except joint training, which
    /// sees every phase so far.
    pub sources: Vec<&'a PhaseDataset>,
    pub regularizers: &'a Regularizers,
}

struct Group<'a> {
    modality: &'a str,
    split: &'a Split,
    indices: Vec<usize>,
}

#[derive(Default, Clone, Copy)]
struct StepParts {
    cls: f64,
    align: f64,
    direct: f64,
    contrastive: f64,
    distribution: f64,
    penalty: f64,
    total: f64,
}

struct StepResult {
    grads: ParamGrads,
    parts: StepParts,
    pooled_input: Option<Array2<f64>>,
    current_features: Option<Array2<f64>>,
}

/// Uses the residual adapter path, which is what the merged model computes.
struct AdapterPath<'a>(&'a ModelState);

impl Classifier for AdapterPath<'_> {
    fn num_classes(&self) -> usize {
        self.0.config.num_classes
    }

    fn logits(&self, modality: &str, x: &Array2<f64>, len: usize) -> Result<Array2<f64>> {
        Ok(self.0.forward_batch(Some(modality), x, len, true)?.logits)
    }
}

fn uses_bridge(method: Method, phase: usize) -> bool {
    method == Method::Harmony && phase >= 2
}

fn trainable_filter(method: Method, phase: usize, modality: &str) -> Binder {
    if method == Method::Frozen && phase >= 2 {
        let proj = format!("{}.{modality}.", names::INPUT_PROJ);
        Binder::with_filter(move |n| names::is_classifier(n) || n.starts_with(&proj))
    } else {
        Binder::trainable()
    }
}

fn check_finite(tape: &Tape, roles: &[(&'static str, Var)], phase: usize, epoch: usize) -> Result<()> {
    for (role, v) in roles {
        if !tape.value(*v).iter().all(|x| x.is_finite()) {
            return Err(MilError::NonFinite {
                role: role.to_string(),
                phase,
                epoch,
            });
        }
    }
    Ok(())
}

fn add_grads(into: &mut ParamGrads, extra: ParamGrads) {
    for (name, g) in extra {
        match into.get_mut(&name) {
            Some(slot) => slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                into.insert(name, g);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn harmony_step(
    model: &ModelState,
    snapshot: &PhaseSnapshot,
    group: &Group,
    config: &ModelConfig,
    noise_rng: &mut rand_chacha::ChaCha8Rng,
    phase: usize,
    epoch: usize,
) -> Result<StepResult> {
    let hist = snapshot.model();
    let n = group.indices.len();
    let len = group.split.seq_len;
    let labels = group.split.gather_labels(&group.indices);
    let mut tape = Tape::new();
    let mut binder = Binder::trainable();
    let mut frozen = Binder::frozen();

    let x = tape.constant(group.split.gather(&group.indices));
    let cur = model.project_input(&mut tape, &mut binder, Some(group.modality), x)?;
    let pooled = tape.mean_pool(cur, len);
    let bank = &model.modulation;
    let alpha = bank.mixture_var(&mut tape, &mut binder, names::MODULATION, pooled);
    let protos = tape.constant(gather_prototypes(hist.classifier.weight.view(), &labels)?);
    let noise = draw_noise(bank.components(), n, bank.width(), noise_rng);
    let perturbed = bank.perturb_var(&mut tape, &mut binder, names::MODULATION, protos, alpha, &noise, config.lambda_g);
    let modulated = modulate_var(&mut tape, perturbed, cur, len);

    // residual path, i.e. exactly what the merged module will compute
    let cur_agg = model.front(&mut tape, &mut binder, cur, true);
    let hist_agg = hist.aggregation.forward(&mut tape, &mut frozen, names::AGGREGATION, modulated);
    let filtered = model.adapter.forward(&mut tape, &mut binder, names::ADAPTER, hist_agg);
    let fused = cross_attention_var(&mut tape, filtered, cur_agg, n, len, len);

    let cur_out = model.encode(&mut tape, &mut binder, fused, n, len)?;
    let logits = model.classify(&mut tape, &mut binder, cur_out);
    let hist_out = hist.encode(&mut tape, &mut frozen, hist_agg, n, len)?;

    let weights = AlignWeights {
        lambda_con: config.lambda_con,
        lambda_dis: config.lambda_dis,
        margin: config.margin,
        form: config.contrastive_form,
    };
    let align = hybrid_align_var(&mut tape, &mut binder, &model.scorer, names::SCORER, cur_out, hist_out, weights);
    let ce = tape.cross_entropy(logits, &labels);
    let weighted = tape.scale(align.total, config.lambda_align);
    let loss = tape.add(ce, weighted);

    let roles = [
        ("current input", cur),
        ("mixture coefficients", alpha),
        ("perturbed prototype", perturbed),
        ("modulated feature", modulated),
        ("current aggregated feature", cur_agg),
        ("historical aggregated feature", hist_agg),
        ("filtered historical feature", filtered),
        ("fused feature", fused),
        ("current classification feature", cur_out),
        ("historical classification feature", hist_out),
        ("logits", logits),
        ("classification loss", ce),
        ("alignment loss", align.total),
        ("total loss", loss),
    ];
    check_finite(&tape, &roles, phase, epoch)?;

    let alpha_v = tape.value(alpha);
    if alpha_v.rows().into_iter().any(|r| (r.sum() - 1.0).abs() > 1e-6 || r.iter().any(|&a| a < 0.0)) {
        return Err(MilError::Invariant("mixture coefficients left the simplex".into()));
    }

    let grads = tape.backward(loss);
    Ok(StepResult {
        grads: binder.gradients(&tape, &grads),
        parts: StepParts {
            cls: tape.scalar(ce),
            align: tape.scalar(align.total),
            direct: tape.scalar(align.direct),
            contrastive: tape.scalar(align.contrastive),
            distribution: tape.scalar(align.distribution),
            penalty: 0.0,
            total: tape.scalar(loss),
        },
        pooled_input: Some(tape.value(pooled).clone()),
        current_features: Some(tape.value(cur_out).clone()),
    })
}

#[allow(clippy::too_many_arguments)]
fn plain_step(
    model: &ModelState,
    setup: &PhaseSetup,
    groups: &[Group],
    config: &ModelConfig,
    epoch: usize,
) -> Result<StepResult> {
    let total_n: usize = groups.iter().map(|g| g.indices.len()).sum();
    let mut tape = Tape::new();
    let mut binder = trainable_filter(setup.method, setup.phase, groups[0].modality);
    let mut loss: Option<Var> = None;
    let mut roles = Vec::new();
    let mut cls = 0.0;
    let mut lwf = 0.0;
    for g in groups {
        let len = g.split.seq_len;
        let labels = g.split.gather_labels(&g.indices);
        let x_raw = g.split.gather(&g.indices);
        let x = tape.constant(x_raw.clone());
        let x = model.project_input(&mut tape, &mut binder, Some(g.modality), x)?;
        let (_, logits) = model.forward_var(&mut tape, &mut binder, x, g.indices.len(), len, false)?;
        let ce = tape.cross_entropy(logits, &labels);
        roles.push(("logits", logits));
        roles.push(("classification loss", ce));
        let share = g.indices.len() as f64 / total_n as f64;
        cls += share * tape.scalar(ce);
        let mut term = tape.scale(ce, share);
        if setup.method == Method::Lwf {
            if let Some(snap) = setup.snapshot {
                let old = snap.model().forward_batch(Some(g.modality), &x_raw, len, false)?.logits;
                let t = config.lwf_temperature;
                let target = softmax_rows((&old / t).view());
                let kl = tape.soft_target_kl(logits, target, t);
                roles.push(("distillation loss", kl));
                lwf += share * config.lwf_weight * tape.scalar(kl);
                let kl = tape.scale(kl, share * config.lwf_weight);
                term = tape.add(term, kl);
            }
        }
        loss = Some(match loss {
            Some(l) => tape.add(l, term),
            None => term,
        });
    }
    let loss = loss.expect("at least one group");
    roles.push(("total loss", loss));
    check_finite(&tape, &roles, setup.phase, epoch)?;
    let grads = tape.backward(loss);
    let mut grads = binder.gradients(&tape, &grads);
    let mut penalty = lwf;
    if let Some(snap) = setup.snapshot {
        match setup.method {
            Method::Fullr => {
                penalty += config.fullr_weight * fullr_penalty(model, snap)?;
                add_grads(&mut grads, fullr_gradients(model, snap, config.fullr_weight)?);
            }
            Method::Ewc => {
                if setup.regularizers.ewc_terms.is_empty() {
                    return Err(MilError::config("fisher", "EwC phase without an importance estimate"));
                }
                for (fisher, anchor) in &setup.regularizers.ewc_terms {
                    penalty += ewc_penalty(model, anchor, fisher, config.ewc_weight)?;
                    add_grads(&mut grads, ewc_gradients(model, anchor, fisher, config.ewc_weight)?);
                }
            }
            _ => {}
        }
    }
    if !penalty.is_finite() {
        return Err(MilError::NonFinite {
            role: "regularisation penalty".into(),
            phase: setup.phase,
            epoch,
        });
    }
    let total = tape.scalar(loss) + (penalty - lwf);
    Ok(StepResult {
        grads,
        parts: StepParts {
            cls,
            penalty,
            total,
            ..StepParts::default()
        },
        pooled_input: None,
        current_features: None,
    })
}

/// Train one phase with the Harmony objective.
pub fn train_phase(
    model: ModelState,
    snapshot: Option<&PhaseSnapshot>,
    data: &PhaseDataset,
    config: &ModelConfig,
) -> Result<(ModelState, TrainReport)> {
    let phase = snapshot.map_or(1, |s| s.phase() + 1);
    let regs = Regularizers::default();
    let setup = PhaseSetup {
        method: Method::Harmony,
        phase,
        snapshot,
        sources: vec![data],
        regularizers: &regs,
    };
    train_phase_with(model, &setup, config, None)
}

/// Train one phase under `setup.method`. The model's phase modules are
/// re-created at the start; for Harmony from the second phase on, the
/// adapter is merged into the aggregation module at the end.
pub fn train_phase_with(
    mut model: ModelState,
    setup: &PhaseSetup,
    config: &ModelConfig,
    mut on_step: Option<&mut dyn FnMut(&StepEvent)>,
) -> Result<(ModelState, TrainReport)> {
    let started = Instant::now();
    let phase = setup.phase;
    if (phase == 1) != setup.snapshot.is_none() {
        return Err(MilError::config("snapshot", "a snapshot is required exactly from the second phase on"));
    }
    if setup.sources.is_empty() {
        return Err(MilError::config("sources", "no training data"));
    }
    if setup.method == Method::Jointt && phase == 1 && setup.sources.len() != 1 {
        return Err(MilError::config("sources", "first phase trains on one modality"));
    }
    if setup.method != Method::Jointt && setup.sources.len() != 1 {
        return Err(MilError::config("sources", "only joint training accepts several modalities"));
    }
    config.validate()?;
    if model.width() != config.width || model.num_classes() != config.num_classes {
        return Err(MilError::config("width", "model and configuration disagree on width or classes"));
    }
    for src in &setup.sources {
        if src.num_classes != config.num_classes {
            return Err(MilError::config(
                "num_classes",
                format!("dataset has {} classes, model {}", src.num_classes, config.num_classes),
            ));
        }
        if src.seq_len() > config.max_len && config.positional_encoding {
            return Err(MilError::config("max_len", format!("sequences of length {} exceed max_len", src.seq_len())));
        }
        model.ensure_input_projection(&src.modality, src.raw_dim());
        if src.train.is_empty() {
            return Err(MilError::Data(format!("modality {}: empty train split", src.modality)));
        }
    }
    model.reset_phase_modules(phase);
    let current = *setup.sources.last().expect("non-empty");
    let bridge = uses_bridge(setup.method, phase);

    // global index over (source, sample)
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (s, src) in setup.sources.iter().enumerate() {
        index.extend((0..src.train.len()).map(|i| (s, i)));
    }

    let mut opt = AdamW::new(AdamWConfig::new(config.learning_rate, config.weight_decay));
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order = index.clone();
        order.shuffle(&mut derive_rng(config.seed, &format!("shuffle.phase{phase}"), epoch as u64));
        let mut noise_rng = derive_rng(config.seed, &format!("noise.phase{phase}"), epoch as u64);
        let mut sums = StepParts::default();
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let groups: Vec<Group> = setup
                .sources
                .iter()
                .enumerate()
                .filter_map(|(s, src)| {
                    let indices: Vec<usize> = batch.iter().filter(|(b, _)| *b == s).map(|(_, i)| *i).collect();
                    (!indices.is_empty()).then_some(Group {
                        modality: &src.modality,
                        split: &src.train,
                        indices,
                    })
                })
                .collect();
            let result = if bridge {
                let snap = setup.snapshot.expect("checked above");
                harmony_step(&model, snap, &groups[0], config, &mut noise_rng, phase, epoch)?
            } else {
                plain_step(&model, setup, &groups, config, epoch)?
            };
            opt.step(&mut model, &result.grads);
            let mut bad = None;
            model.visit_params(&mut |name, _, v| {
                if bad.is_none() && !v.iter().all(|x| x.is_finite()) {
                    bad = Some(name.to_string());
                }
            });
            if let Some(name) = bad {
                return Err(MilError::NonFinite {
                    role: format!("parameter {name}"),
                    phase,
                    epoch,
                });
            }
            let w = batch.len() as f64;
            let p = result.parts;
            sums.cls += w * p.cls;
            sums.align += w * p.align;
            sums.direct += w * p.direct;
            sums.contrastive += w * p.contrastive;
            sums.distribution += w * p.distribution;
            sums.penalty += w * p.penalty;
            sums.total += w * p.total;
            seen += batch.len();

            if let Some(obs) = on_step.as_deref_mut() {
                let (alpha, beta) = if bridge {
                    let pooled = result.pooled_input.as_ref().expect("bridge step");
                    let feats = result.current_features.as_ref().expect("bridge step");
                    let mut tape = Tape::new();
                    let mut b = Binder::frozen();
                    let pv = tape.constant(pooled.clone());
                    let a = model.modulation.mixture_var(&mut tape, &mut b, names::MODULATION, pv);
                    let fv = tape.constant(feats.clone());
                    let be = model.scorer.weights_var(&mut tape, &mut b, names::SCORER, fv);
                    (Some(tape.value(a).clone()), Some(tape.value(be).clone()))
                } else {
                    (None, None)
                };
                obs(&StepEvent {
                    phase,
                    epoch,
                    step: opt.steps(),
                    model: &model,
                    loss: p.total,
                    alpha,
                    beta,
                });
            }
        }
        let n = seen as f64;
        let val_accuracy = if bridge {
            eval_accuracy(&AdapterPath(&model), &current.modality, &current.val)?
        } else {
            eval_accuracy(&model, &current.modality, &current.val)?
        };
        epochs.push(EpochRecord {
            epoch,
            cls: sums.cls / n,
            align: sums.align / n,
            direct: sums.direct / n,
            contrastive: sums.contrastive / n,
            distribution: sums.distribution / n,
            penalty: sums.penalty / n,
            total: sums.total / n,
            val_accuracy,
        });
    }

    let merge_rel_diff = if bridge { Some(merge_phase_adapter(&mut model, current)?) } else { None };
    model.reset_phase_modules(phase + 1);
    let report = TrainReport {
        method: setup.method,
        phase,
        modality: current.modality.clone(),
        epochs,
        steps: opt.steps(),
        checksum: model.checksum(),
        merge_rel_diff,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Fold the adapter into the aggregation module and verify that the
/// current-branch outputs on held-out samples are unchanged.
fn merge_phase_adapter(model: &mut ModelState, data: &PhaseDataset) -> Result<f64> {
    let split = if data.val.is_empty() { &data.train } else { &data.val };
    let idx: Vec<usize> = (0..split.len().min(MERGE_CHECK_SAMPLES)).collect();
    let x = split.gather(&idx);
    let before = model.forward_batch(Some(&data.modality), &x, split.seq_len, true)?.logits;
    model.aggregation = merge_adapter_with(&model.aggregation, &model.adapter, model.config.merge_mode);
    let after = model.forward_batch(Some(&data.modality), &x, split.seq_len, false)?.logits;
    let scale = before.iter().fold(0f64, |m, v| m.max(v.abs())).max(1.0);
    let diff = (&after - &before).iter().fold(0f64, |m, v| m.max(v.abs())) / scale;
    if model.config.merge_mode == crate::config::MergeMode::Residual && diff > MERGE_TOLERANCE {
        return Err(MilError::Invariant(format!("adapter merge changed outputs by {diff:.3e} (relative)")));
    }
    Ok(diff)
}

/// Result of a full phase sequence.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ModelState,
    pub reports: Vec<TrainReport>,
    pub eval: EvalReport,
}

/// Train `method` over `phases` in order, evaluating after every phase on
/// the test splits of all modalities seen so far.
pub fn run_sequence(
    method: Method,
    phases: &[PhaseDataset],
    config: &ModelConfig,
    paired: Option<&PairedTestSet>,
    mut hooks: RunHooks,
) -> Result<RunOutcome> {
    if phases.is_empty() {
        return Err(MilError::config("phase_order", "no phases to train"));
    }
    let mut model = init_model(config)?;
    let order: Vec<String> = phases.iter().map(|p| p.modality.clone()).collect();
    let mut s = SMatrix::new(order.clone());
    let mut snapshot: Option<PhaseSnapshot> = None;
    let mut regs = Regularizers::default();
    let mut reports = Vec::new();
    for (t, data) in phases.iter().enumerate() {
        let phase = t + 1;
        let sources: Vec<&PhaseDataset> = if method == Method::Jointt {
            phases[..=t].iter().collect()
        } else {
            vec![data]
        };
        let setup = PhaseSetup {
            method,
            phase,
            snapshot: snapshot.as_ref(),
            sources,
            regularizers: &regs,
        };
        let (next, report) = train_phase_with(model, &setup, config, hooks.on_step.as_mut().map(|f| &mut **f as &mut dyn FnMut(&StepEvent)))?;
        model = next;
        if let Some(snap) = &snapshot {
            if !snap.is_intact() {
                return Err(MilError::Invariant(format!("snapshot of phase {} was modified", snap.phase())));
            }
        }
        let row = phases[..=t]
            .iter()
            .map(|p| eval_accuracy(&model, &p.modality, &p.test))
            .collect::<Result<Vec<_>>>()?;
        s.push_row(row)?;
        if let Some(cb) = hooks.on_phase_end.as_deref_mut() {
            cb(&PhaseEnd {
                phase,
                modality: &data.modality,
                model: &model,
                report: &report,
            })?;
        }
        reports.push(report);
        if method == Method::Ewc {
            let fisher = FisherDiagonal::estimate(&model, data)?;
            fisher.validate()?;
            regs.ewc_terms.push((fisher, snapshot_model(&model, phase)));
        }
        snapshot = Some(snapshot_model(&model, phase));
    }
    let mut eval = EvalReport::new(method.as_str(), config, s)?;
    if let Some(p) = paired {
        eval.a_multi = Some(late_fusion_accuracy(&model, p, config.fusion)?);
    }
    for p in phases {
        let logits = split_logits(&model, &p.modality, &p.test)?;
        eval.per_class
            .insert(p.modality.clone(), per_class_accuracy(&predict(&logits), &p.test.labels, config.num_classes));
    }
    eval.check_consistency(1e-9)?;
    Ok(RunOutcome { model, reports, eval })
}
