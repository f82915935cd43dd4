//! The unified classifier shared by every phase: optional per-modality input
//! projection, aggregation module, pre-norm transformer encoder with mean
//! pooling, and a linear classifier head.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::alignment::ProxyScorer;
use crate::bridging::{AggregationModule, GatedAdapter};
use crate::config::ModelConfig;
use crate::error::{MilError, Result};
use crate::modulation::PerturbationBank;
use crate::params::{as_slice_mut2, derive_rng, gaussian, visit_matrix, Binder, LayerNormParams, Linear, Parameters};
use crate::tape::{AttentionShape, Tape, Var};

/// An `[L, d]` token matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    tokens: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(MilError::shape("feature sequence", "L >= 1 and d >= 1", format!("{:?}", tokens.dim())));
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(MilError::Data("feature sequence contains non-finite values".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    pub fn into_tokens(self) -> Array2<f64> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    fn new(cfg: &ModelConfig, layer: usize) -> Self {
        let d = cfg.width;
        let h = d * cfg.mlp_ratio;
        let mut rng = derive_rng(cfg.seed, "init.layer", layer as u64);
        Self {
            norm1: LayerNormParams::new(d),
            query: Linear::new(d, d, &mut rng),
            key: Linear::new(d, d, &mut rng),
            value: Linear::new(d, d, &mut rng),
            output: Linear::new(d, d, &mut rng),
            norm2: LayerNormParams::new(d),
            fc1: Linear::new(d, h, &mut rng),
            fc2: Linear::new(h, d, &mut rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, name: &str, x: Var, batch: usize, len: usize, heads: usize) -> Var {
        let d = tape.value(x).ncols();
        let h = self.norm1.forward(tape, binder, &format!("{name}.norm1"), x);
        let q = self.query.forward(tape, binder, &format!("{name}.query"), h);
        let k = self.key.forward(tape, binder, &format!("{name}.key"), h);
        let v = self.value.forward(tape, binder, &format!("{name}.value"), h);
        let shape = AttentionShape {
            batch,
            query_len: len,
            key_len: len,
            heads,
            scale: 1.0 / ((d / heads) as f64).sqrt(),
        };
        let attn = tape.attention(q, k, v, shape);
        let attn = self.output.forward(tape, binder, &format!("{name}.output"), attn);
        let x = tape.add(x, attn);
        let h = self.norm2.forward(tape, binder, &format!("{name}.norm2"), x);
        let h = self.fc1.forward(tape, binder, &format!("{name}.fc1"), h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, binder, &format!("{name}.fc2"), h);
        tape.add(x, h)
    }

    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.norm1.visit(&format!("{name}.norm1"), f);
        self.query.visit(&format!("{name}.query"), f);
        self.key.visit(&format!("{name}.key"), f);
        self.value.visit(&format!("{name}.value"), f);
        self.output.visit(&format!("{name}.output"), f);
        self.norm2.visit(&format!("{name}.norm2"), f);
        self.fc1.visit(&format!("{name}.fc1"), f);
        self.fc2.visit(&format!("{name}.fc2"), f);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.norm1.visit_mut(&format!("{name}.norm1"), f);
        self.query.visit_mut(&format!("{name}.query"), f);
        self.key.visit_mut(&format!("{name}.key"), f);
        self.value.visit_mut(&format!("{name}.value"), f);
        self.output.visit_mut(&format!("{name}.output"), f);
        self.norm2.visit_mut(&format!("{name}.norm2"), f);
        self.fc1.visit_mut(&format!("{name}.fc1"), f);
        self.fc2.visit_mut(&format!("{name}.fc2"), f);
    }
}

/// All parameters of the model. Inference only touches the input
/// projections, aggregation module, positional table, encoder and
/// classifier; the adapter, perturbation bank and scorer are training-time
/// modules that are re-created at the start of every phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub input_projections: BTreeMap<String, Linear>,
    pub aggregation: AggregationModule,
    pub positional: Option<Array2<f64>>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNormParams,
    pub classifier: Linear,
    pub adapter: GatedAdapter,
    pub modulation: PerturbationBank,
    pub scorer: ProxyScorer,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Mean-pooled classification features `[N, d]`.
    pub pooled: Array2<f64>,
    pub logits: Array2<f64>,
}

pub mod names {
    pub const INPUT_PROJ: &str = "input_proj";
    pub const AGGREGATION: &str = "aggregation";
    pub const POSITIONAL: &str = "positional";
    pub const LAYERS: &str = "layers";
    pub const FINAL_NORM: &str = "final_norm";
    pub const CLASSIFIER: &str = "classifier";
    pub const ADAPTER: &str = "adapter";
    pub const MODULATION: &str = "modulation";
    pub const SCORER: &str = "scorer";

    pub fn is_backbone(name: &str) -> bool {
        name.starts_with(LAYERS) || name.starts_with(FINAL_NORM) || name.starts_with(POSITIONAL)
    }

    pub fn is_aggregation(name: &str) -> bool {
        name.starts_with(AGGREGATION)
    }

    pub fn is_classifier(name: &str) -> bool {
        name.starts_with(CLASSIFIER)
    }

    pub fn is_input_projection(name: &str) -> bool {
        name.starts_with(INPUT_PROJ)
    }

    /// Training-time modules that never participate in inference.
    pub fn is_phase_module(name: &str) -> bool {
        name.starts_with(ADAPTER) || name.starts_with(MODULATION) || name.starts_with(SCORER)
    }

    /// Parameters carried from one phase to the next and shared by every
    /// modality: aggregation, backbone and classifier.
    pub fn is_shared(name: &str) -> bool {
        is_aggregation(name) || is_backbone(name) || is_classifier(name)
    }
}

/// Deterministically initialise a model from `config`.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let d = config.width;
    let mut rng = derive_rng(config.seed, "init.front", 0);
    let agg = Linear::new(d, d, &mut rng);
    let positional = config
        .positional_encoding
        .then(|| gaussian(config.max_len, d, 0.02, &mut rng));
    let layers = (0..config.depth).map(|i| EncoderLayer::new(config, i)).collect();
    let mut head_rng = derive_rng(config.seed, "init.classifier", 0);
    let classifier = Linear::new(d, config.num_classes, &mut head_rng);
    let model = ModelState {
        config: config.clone(),
        input_projections: BTreeMap::new(),
        aggregation: AggregationModule {
            weight: agg.weight,
            bias: agg.bias,
        },
        positional,
        layers,
        final_norm: LayerNormParams::new(d),
        classifier,
        adapter: GatedAdapter::init(d, config.adapter_rank, &mut derive_rng(config.seed, "phase.adapter", 1)),
        modulation: PerturbationBank::init(config, &mut derive_rng(config.seed, "phase.modulation", 1)),
        scorer: ProxyScorer::zeros(d),
    };
    Ok(model)
}

impl ModelState {
    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Re-create the adapter, perturbation bank and scorer for `phase`.
    pub fn reset_phase_modules(&mut self, phase: usize) {
        let cfg = &self.config;
        self.adapter = GatedAdapter::init(cfg.width, cfg.adapter_rank, &mut derive_rng(cfg.seed, "phase.adapter", phase as u64));
        self.modulation = PerturbationBank::init(cfg, &mut derive_rng(cfg.seed, "phase.modulation", phase as u64));
        self.scorer = ProxyScorer::zeros(cfg.width);
    }

    /// Register a projection `raw_dim -> width` for `modality`, unless
    /// `raw_dim` already equals the model width or one exists.
    pub fn ensure_input_projection(&mut self, modality: &str, raw_dim: usize) {
        if raw_dim == self.width() || self.input_projections.contains_key(modality) {
            return;
        }
        let mut rng = derive_rng(self.config.seed, &format!("init.input_proj.{modality}"), raw_dim as u64);
        self.input_projections
            .insert(modality.to_string(), Linear::new(raw_dim, self.width(), &mut rng));
    }

    /// Raw features of `modality` to model width. Identity when the
    /// modality has no registered projection.
    pub fn project_input(&self, tape: &mut Tape, binder: &mut Binder, modality: Option<&str>, x: Var) -> Result<Var> {
        let raw = tape.value(x).ncols();
        match modality.and_then(|m| self.input_projections.get(m).map(|p| (m, p))) {
            Some((m, proj)) => {
                if proj.in_dim() != raw {
                    return Err(MilError::shape(format!("input projection {m}"), proj.in_dim(), raw));
                }
                Ok(proj.forward(tape, binder, &format!("{}.{m}", names::INPUT_PROJ), x))
            }
            None if raw == self.width() => Ok(x),
            None => Err(MilError::shape("model input", format!("width {}", self.width()), format!("width {raw}"))),
        }
    }

    /// Aggregation front-end, optionally with the residual adapter branch
    /// `E(f) + adapter(E(f))`.
    pub fn front(&self, tape: &mut Tape, binder: &mut Binder, x: Var, use_adapter_branch: bool) -> Var {
        let h = self.aggregation.forward(tape, binder, names::AGGREGATION, x);
        if use_adapter_branch {
            let a = self.adapter.forward(tape, binder, names::ADAPTER, h);
            tape.add(h, a)
        } else {
            h
        }
    }

    /// Transformer encoder followed by mean pooling: `[n * len, d] -> [n, d]`.
    pub fn encode(&self, tape: &mut Tape, binder: &mut Binder, x: Var, batch: usize, len: usize) -> Result<Var> {
        let mut h = x;
        if let Some(pos) = &self.positional {
            if len > pos.nrows() {
                return Err(MilError::shape("positional table", format!("L <= {}", pos.nrows()), len));
            }
            let p = binder.bind(tape, names::POSITIONAL, pos.view());
            h = tape.add_positional(h, p, len);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, binder, &format!("{}.{i}", names::LAYERS), h, batch, len, self.config.heads);
        }
        let h = self.final_norm.forward(tape, binder, names::FINAL_NORM, h);
        Ok(tape.mean_pool(h, len))
    }

    pub fn classify(&self, tape: &mut Tape, binder: &mut Binder, pooled: Var) -> Var {
        self.classifier.forward(tape, binder, names::CLASSIFIER, pooled)
    }

    /// Full inference path on a width-`d` batch; returns `(pooled, logits)`.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        batch: usize,
        len: usize,
        use_adapter_branch: bool,
    ) -> Result<(Var, Var)> {
        let h = self.front(tape, binder, x, use_adapter_branch);
        let pooled = self.encode(tape, binder, h, batch, len)?;
        let logits = self.classify(tape, binder, pooled);
        Ok((pooled, logits))
    }

    /// Batched inference over `[n * len, raw]` features of `modality`.
    pub fn forward_batch(&self, modality: Option<&str>, x: &Array2<f64>, len: usize, use_adapter_branch: bool) -> Result<ForwardOutput> {
        if len == 0 || x.nrows() % len != 0 {
            return Err(MilError::shape("batch", format!("rows divisible by L={len}"), x.nrows()));
        }
        let batch = x.nrows() / len;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let xv = tape.constant(x.clone());
        let xv = self.project_input(&mut tape, &mut binder, modality, xv)?;
        let (pooled, logits) = self.forward_var(&mut tape, &mut binder, xv, batch, len, use_adapter_branch)?;
        Ok(ForwardOutput {
            pooled: tape.value(pooled).clone(),
            logits: tape.value(logits).clone(),
        })
    }
}

/// Single-sequence forward: pooled classification feature and logits.
pub fn forward(model: &ModelState, f: &FeatureSequence, use_adapter_branch: bool) -> Result<(Array1<f64>, Array1<f64>)> {
    if f.width() != model.width() {
        return Err(MilError::shape("forward", format!("width {}", model.width()), format!("width {}", f.width())));
    }
    let out = model.forward_batch(None, &f.tokens().to_owned(), f.len(), use_adapter_branch)?;
    Ok((out.pooled.index_axis_move(Axis(0), 0), out.logits.index_axis_move(Axis(0), 0)))
}

impl Parameters for ModelState {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (m, proj) in &self.input_projections {
            proj.visit(&format!("{}.{m}", names::INPUT_PROJ), f);
        }
        self.aggregation.visit(names::AGGREGATION, f);
        if let Some(pos) = &self.positional {
            visit_matrix(names::POSITIONAL, pos, f);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{}.{i}", names::LAYERS), f);
        }
        self.final_norm.visit(names::FINAL_NORM, f);
        self.classifier.visit(names::CLASSIFIER, f);
        self.adapter.visit(names::ADAPTER, f);
        self.modulation.visit(names::MODULATION, f);
        self.scorer.visit(names::SCORER, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (m, proj) in self.input_projections.iter_mut() {
            proj.visit_mut(&format!("{}.{m}", names::INPUT_PROJ), f);
        }
        self.aggregation.visit_mut(names::AGGREGATION, f);
        if let Some(pos) = &mut self.positional {
            f(names::POSITIONAL, as_slice_mut2(pos));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{}.{i}", names::LAYERS), f);
        }
        self.final_norm.visit_mut(names::FINAL_NORM, f);
        self.classifier.visit_mut(names::CLASSIFIER, f);
        self.adapter.visit_mut(names::ADAPTER, f);
        self.modulation.visit_mut(names::MODULATION, f);
        self.scorer.visit_mut(names::SCORER, f);
    }
}
