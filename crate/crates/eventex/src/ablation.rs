//! Ablation harness: run the trainer over a grid of feature variants and
//! seeds, on shared corpus splits, and summarize per-cell scores.
//!
//! Cells cover the three studied axes: token features (full vs contextual
//! only), input form (single sentence vs sentence pair), and event-type
//! encoding (none / one-hot / learnable at several widths). Cells run in a
//! worker pool; each job owns its model, tape, and RNG streams, and cells
//! with the same seed start from identical initial parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::embed::EmbeddingProvider;
use crate::corpus::{select_split, Sentence, SplitPart};
use crate::derive_seed;
use crate::eval::{evaluate, TriggerSource};
use crate::features::{EventTypeEncoding, Vocabulary};
use crate::model::{Model, ModelConfig};
use crate::train::{train, TrainConfig};
use crate::{Error, Result};

/// One variant under study, expressed as overrides on the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    /// Contextual embedding only: drops POS, event-type, and segment.
    pub simple_features: bool,
    pub pair_mode: bool,
    pub event_encoding: EventTypeEncoding,
}

impl AblationCell {
    /// Full feature set under the base configuration.
    pub fn full(base: &ModelConfig) -> Self {
        AblationCell {
            name: "full".into(),
            simple_features: false,
            pair_mode: base.pair_mode,
            event_encoding: base.event_encoding,
        }
    }

    /// Contextual-embedding-only token features.
    pub fn simple(base: &ModelConfig) -> Self {
        AblationCell {
            name: "simplef".into(),
            simple_features: true,
            pair_mode: base.pair_mode,
            event_encoding: EventTypeEncoding::None,
        }
    }

    /// Full features with a specific event-type encoding.
    pub fn encoding(name: impl Into<String>, base: &ModelConfig, enc: EventTypeEncoding) -> Self {
        AblationCell {
            name: name.into(),
            simple_features: false,
            pair_mode: base.pair_mode,
            event_encoding: enc,
        }
    }

    /// Full features with the input form pinned.
    pub fn input_form(name: impl Into<String>, base: &ModelConfig, pair_mode: bool) -> Self {
        AblationCell {
            name: name.into(),
            simple_features: false,
            pair_mode,
            event_encoding: base.event_encoding,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut config = base.clone();
        config.pair_mode = self.pair_mode;
        if self.simple_features {
            config.pos_dim = 0;
            config.use_segment = false;
            config.event_encoding = EventTypeEncoding::None;
        } else {
            config.event_encoding = self.event_encoding;
        }
        config
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
    pub base_model: ModelConfig,
    pub train: TrainConfig,
}

impl AblationMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("ablation matrix has no cells".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation matrix has no seeds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RunScores {
    pub identification_f1: f64,
    pub classification_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Scores, or the failure message; one bad cell never stops the harness.
    pub outcome: std::result::Result<RunScores, String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AxisSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

fn summarize(values: &[f64]) -> AxisSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    AxisSummary {
        mean,
        std: var.sqrt(),
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub runs: Vec<SeedRun>,
    pub identification: Option<AxisSummary>,
    pub classification: Option<AxisSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub cells: Vec<CellResult>,
    pub train_sentences: usize,
    pub eval_sentences: usize,
}

impl AblationOutcome {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.name == name)
    }

    /// Text table mirroring the usual two-column F1 layout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>26} {:>26}\n",
            "cell", "identification F1", "classification F1"
        ));
        for c in &self.cells {
            let fmt = |s: &Option<AxisSummary>| match s {
                Some(s) => format!(
                    "{:.4}±{:.4} [{:.4},{:.4}]",
                    s.mean, s.std, s.min, s.max
                ),
                None => "failed".to_string(),
            };
            out.push_str(&format!(
                "{:<14} {:>26} {:>26}\n",
                c.cell.name,
                fmt(&c.identification),
                fmt(&c.classification)
            ));
        }
        out
    }
}

/// Provider factory per worker: providers may hold connections, so each job
/// builds its own from the same spec.
pub trait ProviderFactory: Sync {
    fn make(&self) -> Result<EmbeddingProvider>;
}

/// Hash-bucket providers are cheap and stateless.
pub struct HashProviderFactory {
    pub buckets: usize,
    pub dim: usize,
}

impl ProviderFactory for HashProviderFactory {
    fn make(&self) -> Result<EmbeddingProvider> {
        Ok(EmbeddingProvider::trainable_hash(self.buckets, self.dim))
    }
}

/// Run every (cell, seed) job on the shared splits of `corpus` and collect
/// per-cell summaries. Training uses the train split; scores come from the
/// test split with gold triggers.
pub fn run_ablation(
    matrix: &AblationMatrix,
    corpus: &[Sentence],
    providers: &dyn ProviderFactory,
) -> Result<AblationOutcome> {
    matrix.validate()?;
    let train_split = select_split(corpus, SplitPart::Train);
    let test_split = select_split(corpus, SplitPart::Test);
    if train_split.is_empty() || test_split.is_empty() {
        return Err(Error::Contract(
            "corpus too small to populate train and test splits".into(),
        ));
    }
    // Vocabulary comes from the training split; unseen eval POS tags map to
    // the reserved id.
    let vocab = Vocabulary::build(&train_split);

    let jobs: Vec<(usize, u64)> = matrix
        .cells
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| matrix.seeds.iter().map(move |&s| (ci, s)))
        .collect();

    let results: Vec<(usize, SeedRun)> = jobs
        .par_iter()
        .map(|&(ci, seed)| {
            let outcome = run_one(
                &matrix.cells[ci],
                seed,
                matrix,
                &train_split,
                &test_split,
                &vocab,
                providers,
            )
            .map_err(|e| e.to_string());
            (ci, SeedRun { seed, outcome })
        })
        .collect();

    let mut cells: Vec<CellResult> = matrix
        .cells
        .iter()
        .map(|c| CellResult {
            cell: c.clone(),
            runs: Vec::new(),
            identification: None,
            classification: None,
        })
        .collect();
    for (ci, run) in results {
        cells[ci].runs.push(run);
    }
    for c in &mut cells {
        c.runs.sort_by_key(|r| r.seed);
        let ok: Vec<&RunScores> = c.runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        if !ok.is_empty() {
            c.identification = Some(summarize(
                &ok.iter().map(|s| s.identification_f1).collect::<Vec<_>>(),
            ));
            c.classification = Some(summarize(
                &ok.iter().map(|s| s.classification_f1).collect::<Vec<_>>(),
            ));
        }
    }
    Ok(AblationOutcome {
        cells,
        train_sentences: train_split.len(),
        eval_sentences: test_split.len(),
    })
}

fn run_one(
    cell: &AblationCell,
    seed: u64,
    matrix: &AblationMatrix,
    train_split: &[Sentence],
    test_split: &[Sentence],
    vocab: &Vocabulary,
    providers: &dyn ProviderFactory,
) -> Result<RunScores> {
    let provider = providers.make()?;
    let mut config = cell.apply(&matrix.base_model);
    // Same seed ⇒ same initial parameters, whatever the cell.
    config.init_seed = derive_seed(seed, 11);
    let mut model = Model::new(config, vocab.clone())?;
    let train_config = TrainConfig {
        seed: derive_seed(seed, 12),
        ..matrix.train.clone()
    };
    train(&mut model, &provider, train_split, None, &train_config)?;
    let report = evaluate(
        &model,
        &provider,
        test_split,
        TriggerSource::Gold,
        serde_json::json!({"cell": cell.name, "seed": seed}),
    )?;
    Ok(RunScores {
        identification_f1: report.identification.f1(),
        classification_f1: report.classification.f1(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate, SyntheticSpec};
    use crate::train::OptimizerKind;

    fn tiny_base() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            ctx_dim: 10,
            ctx_buckets: Some(211),
            pos_dim: 4,
            event_encoding: EventTypeEncoding::Learnable { dim: 8 },
            hidden_dim: 10,
            dilations: vec![1, 2],
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            batch_size: 8,
            learning_rate: 2e-3,
            epochs: 2,
            dropout: 0.0,
            optimizer: OptimizerKind::default(),
            ..TrainConfig::default()
        };
        (model, train)
    }

    #[test]
    fn single_cell_matrix_equals_a_direct_run() {
        let corpus = generate(&SyntheticSpec::preset(21, 120, 3, 6)).unwrap();
        let (base_model, train_cfg) = tiny_base();
        let matrix = AblationMatrix {
            cells: vec![AblationCell::full(&base_model)],
            seeds: vec![3],
            base_model: base_model.clone(),
            train: train_cfg.clone(),
        };
        let factory = HashProviderFactory {
            buckets: 211,
            dim: 10,
        };
        let outcome = run_ablation(&matrix, &corpus, &factory).unwrap();
        assert_eq!(outcome.cells.len(), 1);
        let harness_score = outcome.cells[0].runs[0].outcome.as_ref().unwrap().classification_f1;

        // direct run with the same derived seeds
        let train_split = select_split(&corpus, SplitPart::Train);
        let test_split = select_split(&corpus, SplitPart::Test);
        let vocab = Vocabulary::build(&train_split);
        let mut config = AblationCell::full(&base_model).apply(&base_model);
        config.init_seed = derive_seed(3, 11);
        let mut model = Model::new(config, vocab).unwrap();
        let provider = factory.make().unwrap();
        let tc = TrainConfig {
            seed: derive_seed(3, 12),
            ..train_cfg
        };
        train(&mut model, &provider, &train_split, None, &tc).unwrap();
        let direct = evaluate(
            &model,
            &provider,
            &test_split,
            TriggerSource::Gold,
            serde_json::Value::Null,
        )
        .unwrap()
        .classification
        .f1();
        assert_eq!(harness_score.to_bits(), direct.to_bits());
    }

    #[test]
    fn same_seed_cells_share_initial_parameters() {
        let corpus = generate(&SyntheticSpec::preset(22, 60, 3, 6)).unwrap();
        let (base_model, _) = tiny_base();
        let train_split = select_split(&corpus, SplitPart::Train);
        let vocab = Vocabulary::build(&train_split);
        // two cells identical except gate combination: same shapes, so the
        // same seed must give bitwise-identical initial parameters
        let mut cfg_a = AblationCell::full(&base_model).apply(&base_model);
        cfg_a.init_seed = derive_seed(9, 11);
        let mut cfg_b = cfg_a.clone();
        cfg_b.gate_combine = crate::nn::GateCombine::Add;
        let a = Model::new(cfg_a, vocab.clone()).unwrap();
        let b = Model::new(cfg_b, vocab).unwrap();
        for (ea, eb) in a
            .param_store()
            .entries()
            .iter()
            .zip(b.param_store().entries())
        {
            assert_eq!(ea.name, eb.name);
            for (x, y) in ea.values.iter().zip(&eb.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn failed_cells_are_recorded_and_the_harness_continues() {
        let corpus = generate(&SyntheticSpec::preset(23, 100, 3, 6)).unwrap();
        let (base_model, train_cfg) = tiny_base();
        let mut bad = AblationCell::full(&base_model);
        bad.name = "bad".into();
        // width-4 one-hot cannot happen: force an unknown event encoding
        // failure via a provider mismatch instead
        let matrix = AblationMatrix {
            cells: vec![bad, AblationCell::simple(&base_model)],
            seeds: vec![1],
            base_model,
            train: train_cfg,
        };
        struct Mismatched;
        impl ProviderFactory for Mismatched {
            fn make(&self) -> Result<EmbeddingProvider> {
                // wrong width → the full cell fails in forward; simple cell
                // fails too, but both failures must be *recorded*
                Ok(EmbeddingProvider::trainable_hash(211, 9))
            }
        }
        let outcome = run_ablation(&matrix, &corpus, &Mismatched).unwrap();
        for cell in &outcome.cells {
            assert_eq!(cell.runs.len(), 1);
            assert!(cell.runs[0].outcome.is_err());
            assert!(cell.classification.is_none());
        }
        let table = outcome.render_table();
        assert!(table.contains("failed"), "{table}");
    }
}
