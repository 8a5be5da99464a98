//! The full tagger: token features → input projection → dilated gated conv
//! stack → per-position classifier head.
//!
//! Two task modes share the architecture. Trigger tagging classifies every
//! position into event types (+None) from its hidden vector alone; argument
//! tagging classifies positions into roles (+None) from a fixed-width
//! classifier input built from the trigger-span hidden vectors plus the
//! local context window.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::embed::{Embedded, EmbeddingProvider};
use crate::corpus::{Sentence, Span, NONE_LABEL};
use crate::features::{plan_tokens, token_dim, EventTypeEncoding, TokenPlan, Vocabulary};
use crate::nn::{
    read_params, write_params, Dense, Embedding, GateCombine, GatedConvBlock, ParamBinding,
    ParamStore,
};
use crate::tensor::{Matrix, Tape, TensorId, WindowSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Trigger,
    Argument,
}

/// How role labels map onto classes. `Raw` labels each position with the
/// role directly and merges adjacent equal labels at decode time; `Bio`
/// distinguishes span starts so adjacent same-role arguments stay separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    #[default]
    Raw,
    Bio,
}

/// Receptive field of a same-padding conv stack.
pub fn receptive_field(window: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| (window - 1) * d).sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Contextual-embedding width the provider must match.
    pub ctx_dim: usize,
    /// When set, the model owns a hash-bucket contextual table of this many
    /// rows and the provider supplies bucket ids.
    pub ctx_buckets: Option<usize>,
    /// POS-embedding width; 0 disables the POS feature.
    pub pos_dim: usize,
    pub event_encoding: EventTypeEncoding,
    /// Whether the 0/1 segment scalar is appended to token features.
    pub use_segment: bool,
    pub hidden_dim: usize,
    pub conv_window: usize,
    /// Per-layer dilations; the schedule is data, not code.
    pub dilations: Vec<usize>,
    /// Candidate context-window width (odd).
    pub context_window: usize,
    /// Fixed trigger-embedding slots; longer triggers keep their first
    /// tokens, shorter ones are zero-padded.
    pub trigger_slots: usize,
    pub dropout: f64,
    pub gate_combine: GateCombine,
    pub residual: bool,
    /// Sentence-pair input (trigger prefix + separator); argument task only.
    pub pair_mode: bool,
    pub label_scheme: LabelScheme,
    /// Average the loss over labeled positions instead of summing.
    pub mean_loss: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Argument,
            ctx_dim: 64,
            ctx_buckets: Some(crate::corpus::embed::DEFAULT_HASH_BUCKETS),
            pos_dim: 50,
            event_encoding: EventTypeEncoding::Learnable { dim: 400 },
            use_segment: true,
            hidden_dim: 256,
            conv_window: 3,
            dilations: vec![1, 2, 4, 1, 2, 4, 1],
            context_window: 3,
            trigger_slots: 3,
            dropout: 0.2,
            gate_combine: GateCombine::Multiply,
            residual: false,
            pair_mode: true,
            label_scheme: LabelScheme::Raw,
            mean_loss: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ctx_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("ctx_dim and hidden_dim must be positive".into()));
        }
        if self.conv_window % 2 == 0 || self.context_window % 2 == 0 {
            return Err(Error::Config("conv_window and context_window must be odd".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("dilation schedule must be non-empty and positive".into()));
        }
        if self.trigger_slots == 0 {
            return Err(Error::Config("trigger_slots must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if let Some(b) = self.ctx_buckets {
            if b < 2 {
                return Err(Error::Config("ctx_buckets must be at least 2".into()));
            }
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.conv_window, &self.dilations)
    }
}

/// One argument-classification query: the trigger being asked about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTrigger {
    pub span: Span,
    pub event_type: String,
}

struct Architecture {
    ctx_table: Option<Embedding>,
    pos_table: Option<Embedding>,
    evt_table: Option<Embedding>,
    proj: Dense,
    blocks: Vec<GatedConvBlock>,
    head: Dense,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    store: ParamStore,
    arch: Architecture,
}

/// Result of one emitted-sequence forward pass: logits cover every emitted
/// row; the plan says which rows belong to the sentence.
pub struct EmittedForward {
    pub logits: TensorId,
    pub plan: TokenPlan,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.task == Task::Argument && vocab.roles.is_empty() {
            return Err(Error::Config("argument model needs a role inventory".into()));
        }
        if vocab.event_types.is_empty() {
            return Err(Error::Config("vocabulary has no event types".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.init_seed, 1));

        let ctx_table = config
            .ctx_buckets
            .map(|buckets| Embedding::new(&mut store, &mut rng, "ctx_table", buckets, config.ctx_dim));
        let pos_table = (config.pos_dim > 0).then(|| {
            Embedding::new(
                &mut store,
                &mut rng,
                "pos_table",
                vocab.pos_tags.len(),
                config.pos_dim,
            )
        });
        let evt_dim = if config.task == Task::Argument {
            config.event_encoding.dim(vocab.event_types.len())
        } else {
            0
        };
        let evt_table = if config.task == Task::Argument {
            match config.event_encoding {
                EventTypeEncoding::None => None,
                EventTypeEncoding::OneHot => Some(Embedding::one_hot(
                    &mut store,
                    "evt_table",
                    vocab.event_types.len(),
                )),
                EventTypeEncoding::Learnable { dim } => Some(Embedding::new(
                    &mut store,
                    &mut rng,
                    "evt_table",
                    vocab.event_types.len(),
                    dim,
                )),
            }
        } else {
            None
        };

        let d_token = token_dim(config.ctx_dim, config.pos_dim, evt_dim, config.use_segment);
        let proj = Dense::new(&mut store, &mut rng, "proj", d_token, config.hidden_dim);

        let mut blocks = Vec::with_capacity(config.dilations.len());
        for (i, &d) in config.dilations.iter().enumerate() {
            blocks.push(GatedConvBlock::new(
                &mut store,
                &mut rng,
                &format!("block{i}"),
                config.conv_window,
                d,
                config.hidden_dim,
                config.gate_combine,
                config.residual,
            )?);
        }

        let (head_in, classes) = match config.task {
            Task::Trigger => (config.hidden_dim, vocab.event_types.len() + 1),
            Task::Argument => (
                (config.trigger_slots + config.context_window) * config.hidden_dim,
                match config.label_scheme {
                    LabelScheme::Raw => vocab.roles.len() + 1,
                    LabelScheme::Bio => 2 * vocab.roles.len() + 1,
                },
            ),
        };
        let head = Dense::new(&mut store, &mut rng, "head", head_in, classes);

        Ok(Model {
            config,
            vocab,
            store,
            arch: Architecture {
                ctx_table,
                pos_table,
                evt_table,
                proj,
                blocks,
                head,
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.head.out_dim
    }

    pub fn param_store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn register_params(&self, tape: &mut Tape) -> Result<ParamBinding> {
        self.store.register_all(tape)
    }

    fn check_provider(&self, provider: &EmbeddingProvider) -> Result<()> {
        if provider.dim() != self.config.ctx_dim {
            return Err(Error::Config(format!(
                "provider width {} does not match model ctx_dim {}",
                provider.dim(),
                self.config.ctx_dim
            )));
        }
        match (provider.bucket_count(), self.config.ctx_buckets) {
            (Some(b), Some(cb)) if b != cb => Err(Error::Config(format!(
                "provider has {b} buckets but the model table has {cb}"
            ))),
            (Some(_), None) => Err(Error::Config(
                "hash provider needs a model with ctx_buckets set".into(),
            )),
            (None, Some(_)) => Err(Error::Config(
                "model owns a contextual table but the provider sends fixed vectors".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Forward over the full emitted sequence (prefix rows included in pair
    /// mode). Dropout fires only on training tapes.
    pub fn forward_emitted(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        sentence: &Sentence,
        query: Option<&QueryTrigger>,
        provider: &EmbeddingProvider,
    ) -> Result<EmittedForward> {
        match (self.config.task, query) {
            (Task::Argument, None) => {
                return Err(Error::Contract(
                    "argument model requires a query trigger".into(),
                ))
            }
            (Task::Trigger, Some(_)) => {
                return Err(Error::Contract(
                    "trigger model takes no query trigger".into(),
                ))
            }
            _ => {}
        }
        self.check_provider(provider)?;

        let pair = self.config.task == Task::Argument && self.config.pair_mode;
        let trigger_span = query.map(|q| q.span);
        let plan = plan_tokens(sentence, trigger_span, pair, &self.vocab, true)?;
        let emitted_len = plan.emitted_len();

        let embedded = provider.embed(sentence, if pair { trigger_span } else { None })?;
        if embedded.emitted_len() != emitted_len {
            return Err(Error::Contract(format!(
                "provider emitted {} rows but the plan has {emitted_len}",
                embedded.emitted_len()
            )));
        }
        let ctx = match embedded {
            Embedded::Fixed(m) => tape.constant(m.data, vec![m.rows, m.cols])?,
            Embedded::BucketIds(ids) => {
                let table = self.arch.ctx_table.as_ref().expect("checked in check_provider");
                table.forward(tape, bind, &ids)?
            }
        };

        let mut parts = vec![ctx];
        if let Some(pos_table) = &self.arch.pos_table {
            parts.push(pos_table.forward(tape, bind, &plan.pos_ids)?);
        }
        if let Some(evt_table) = &self.arch.evt_table {
            let q = query.expect("argument task checked above");
            let type_id = self.vocab.event_type_id(&q.event_type)?;
            parts.push(evt_table.forward(tape, bind, &vec![type_id; emitted_len])?);
        }
        if self.config.use_segment {
            parts.push(tape.constant(plan.segment.clone(), vec![emitted_len, 1])?);
        }
        let tokens = tape.concat_cols(&parts)?;
        let tokens = tape.dropout(tokens, self.config.dropout)?;

        let projected = self.arch.proj.forward(tape, bind, tokens)?;
        let mut hidden = tape.relu(projected)?;
        let last = self.arch.blocks.len().saturating_sub(1);
        for (i, block) in self.arch.blocks.iter().enumerate() {
            hidden = block.forward(tape, bind, hidden)?;
            if i < last {
                hidden = tape.dropout(hidden, self.config.dropout)?;
            }
        }

        let logits = match self.config.task {
            Task::Trigger => self.arch.head.forward(tape, bind, hidden)?,
            Task::Argument => {
                let trigger_rows = plan.trigger_rows.expect("argument plan has a trigger");
                let assembled = tape.gather_windows(
                    hidden,
                    WindowSpec {
                        trigger: trigger_rows,
                        trigger_slots: self.config.trigger_slots,
                        window: self.config.context_window,
                        region: plan.sentence_rows,
                    },
                )?;
                self.arch.head.forward(tape, bind, assembled)?
            }
        };
        Ok(EmittedForward { logits, plan })
    }

    /// Per-position training targets over the emitted sequence; rows
    /// outside the sentence are excluded (`None`).
    pub fn training_targets(
        &self,
        plan: &TokenPlan,
        sentence: &Sentence,
        query: Option<&QueryTrigger>,
    ) -> Result<Vec<Option<usize>>> {
        let (start, end) = plan.sentence_rows;
        let mut targets = vec![None; plan.emitted_len()];
        for slot in targets[start..end].iter_mut() {
            *slot = Some(0);
        }
        match self.config.task {
            Task::Trigger => {
                for ev in &sentence.events {
                    let class = self.vocab.event_type_id(&ev.event_type)? + 1;
                    for p in ev.trigger.positions() {
                        targets[start + p] = Some(class);
                    }
                }
            }
            Task::Argument => {
                let q = query.ok_or_else(|| {
                    Error::Contract("argument targets need a query trigger".into())
                })?;
                let event = sentence
                    .events
                    .iter()
                    .find(|e| e.trigger == q.span && e.event_type == q.event_type)
                    .ok_or_else(|| {
                        Error::Contract(format!(
                            "no gold event ({}, {:?}) in sentence {:?}",
                            q.span, q.event_type, sentence.id
                        ))
                    })?;
                for arg in &event.args {
                    let role = self.vocab.role_id(&arg.role)?;
                    for (i, p) in arg.span.positions().enumerate() {
                        let class = match self.config.label_scheme {
                            LabelScheme::Raw => role + 1,
                            LabelScheme::Bio => {
                                if i == 0 {
                                    1 + 2 * role
                                } else {
                                    2 + 2 * role
                                }
                            }
                        };
                        targets[start + p] = Some(class);
                    }
                }
            }
        }
        Ok(targets)
    }

    /// Inference logits for the original sentence positions, `[T, C]`.
    pub fn logits(
        &self,
        sentence: &Sentence,
        query: Option<&QueryTrigger>,
        provider: &EmbeddingProvider,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bind = self.register_params(&mut tape)?;
        let fwd = self.forward_emitted(&mut tape, &bind, sentence, query, provider)?;
        let classes = self.num_classes();
        let (start, end) = fwd.plan.sentence_rows;
        let all = tape.values(fwd.logits);
        Ok(Matrix::new(
            end - start,
            classes,
            all[start * classes..end * classes].to_vec(),
        ))
    }

    fn argmax_labels(logits: &Matrix) -> Vec<usize> {
        (0..logits.rows)
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Argument-role prediction for one query; positions labeled None emit
    /// nothing.
    pub fn predict_roles(
        &self,
        sentence: &Sentence,
        query: &QueryTrigger,
        provider: &EmbeddingProvider,
    ) -> Result<Vec<(Span, String)>> {
        if self.config.task != Task::Argument {
            return Err(Error::Contract("predict_roles needs an argument model".into()));
        }
        let logits = self.logits(sentence, Some(query), provider)?;
        let labels = Self::argmax_labels(&logits);
        Ok(self.decode_role_labels(&labels))
    }

    /// Trigger tagging for one sentence.
    pub fn tag_triggers(
        &self,
        sentence: &Sentence,
        provider: &EmbeddingProvider,
    ) -> Result<Vec<(Span, String)>> {
        if self.config.task != Task::Trigger {
            return Err(Error::Contract("tag_triggers needs a trigger model".into()));
        }
        let logits = self.logits(sentence, None, provider)?;
        let labels = Self::argmax_labels(&logits);
        let mut out = Vec::new();
        let mut run_start = 0usize;
        for t in 0..=labels.len() {
            if t == labels.len() || (t > 0 && labels[t] != labels[t - 1]) {
                if t > 0 && labels[run_start] != 0 {
                    out.push((
                        Span::new(run_start, t - 1),
                        self.vocab.event_types[labels[run_start] - 1].clone(),
                    ));
                }
                run_start = t;
            }
        }
        Ok(out)
    }

    /// Turn per-position classes into (span, role) pairs under the
    /// configured label scheme.
    pub fn decode_role_labels(&self, labels: &[usize]) -> Vec<(Span, String)> {
        let mut out = Vec::new();
        match self.config.label_scheme {
            LabelScheme::Raw => {
                let mut run_start = 0usize;
                for t in 0..=labels.len() {
                    if t == labels.len() || (t > 0 && labels[t] != labels[t - 1]) {
                        if t > 0 && labels[run_start] != 0 {
                            out.push((
                                Span::new(run_start, t - 1),
                                self.vocab.roles[labels[run_start] - 1].clone(),
                            ));
                        }
                        run_start = t;
                    }
                }
            }
            LabelScheme::Bio => {
                let mut open: Option<(usize, usize)> = None; // (start, role)
                for (t, &label) in labels.iter().enumerate() {
                    // (begins, role); a bare I- of a different role opens fresh
                    let decoded = match label {
                        0 => None,
                        l if l % 2 == 1 => Some((true, (l - 1) / 2)),
                        l => Some((false, (l - 2) / 2)),
                    };
                    let extends = matches!(
                        (&open, &decoded),
                        (Some((_, r)), Some((false, cur))) if cur == r
                    );
                    if extends {
                        continue;
                    }
                    if let Some((s, r)) = open.take() {
                        out.push((Span::new(s, t - 1), self.vocab.roles[r].clone()));
                    }
                    open = decoded.map(|(_, role)| (t, role));
                }
                if let Some((s, r)) = open {
                    out.push((Span::new(s, labels.len() - 1), self.vocab.roles[r].clone()));
                }
            }
        }
        out
    }

    // ── persistence ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "model": {
                "config": self.config,
                "vocab": self.vocab,
            }
        });
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        write_params(&mut w, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let (meta, loaded) = read_params(&mut r)?;
        let config: ModelConfig = serde_json::from_value(meta["model"]["config"].clone())
            .map_err(|e| Error::data(format!("model config in {}: {e}", path.display())))?;
        let vocab: Vocabulary = serde_json::from_value(meta["model"]["vocab"].clone())
            .map_err(|e| Error::data(format!("model vocab in {}: {e}", path.display())))?;
        let mut model = Model::new(config, vocab)?;
        if loaded.len() != model.store.len() {
            return Err(Error::data(format!(
                "model file has {} parameters, architecture wants {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for (i, entry) in loaded.entries().iter().enumerate() {
            let expect = &model.store.entries()[i];
            if entry.name != expect.name || entry.shape != expect.shape {
                return Err(Error::data(format!(
                    "parameter {} mismatch: file has {:?}{:?}, architecture wants {:?}{:?}",
                    i, entry.name, entry.shape, expect.name, expect.shape
                )));
            }
        }
        for i in 0..model.store.len() {
            let values = loaded.entries()[i].values.clone();
            let id = model.store.id_at(i);
            *model.store.values_mut(id) = values;
        }
        Ok(model)
    }
}
