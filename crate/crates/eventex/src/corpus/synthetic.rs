//! Deterministic synthetic event-corpus generator.
//!
//! Sentences are built from event clusters: a trigger token followed by one
//! slot-marker token plus entity span per argument slot. Slot markers are
//! shared across event types, so the role of an argument is a function of
//! (slot, event type); entity words are drawn from one shared vocabulary and
//! carry no role information on their own. Two template knobs shape the
//! difficulty:
//!
//! * `multi_event_rate` adds a second cluster with a different event type,
//!   so models must associate arguments with the right trigger.
//! * `dual_type_rate` makes one trigger span host two events of different
//!   types over the same argument spans with different roles — such queries
//!   are unresolvable for a model that cannot see the queried event type.
//!
//! The same spec always yields a byte-identical corpus.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Argument, EventAnnotation, Sentence, Span};
use crate::{Error, Result};

fn default_max_len() -> usize {
    40
}

fn default_max_arg_tokens() -> usize {
    2
}

/// One event type: its trigger-word family and the role filled by each
/// argument slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventTemplate {
    pub event_type: String,
    pub triggers: Vec<String>,
    pub slots: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub sentences: usize,
    pub filler_vocab: usize,
    pub entity_vocab: usize,
    pub event_types: Vec<EventTemplate>,
    /// Chance of one marker-less entity token (labeled None) per sentence.
    #[serde(default)]
    pub distractor_rate: f64,
    /// Chance of a second, distinct-span event cluster.
    #[serde(default)]
    pub multi_event_rate: f64,
    /// Chance that the first trigger span hosts two events of different
    /// types with shared argument spans.
    #[serde(default)]
    pub dual_type_rate: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_max_arg_tokens")]
    pub max_arg_tokens: usize,
}

impl SyntheticSpec {
    /// Small preset: `n_types` event types with two disjoint role slots
    /// each, three trigger words per type, one shared entity vocabulary.
    pub fn preset(seed: u64, sentences: usize, n_types: usize, n_roles: usize) -> Self {
        assert!(
            n_roles >= 2 * n_types,
            "preset wants two distinct roles per type"
        );
        let event_types = (0..n_types)
            .map(|t| EventTemplate {
                event_type: format!("etype{t}"),
                triggers: (0..3).map(|i| format!("trg{t}x{i}")).collect(),
                slots: vec![format!("role{}", 2 * t), format!("role{}", 2 * t + 1)],
            })
            .collect();
        SyntheticSpec {
            seed,
            sentences,
            filler_vocab: 40,
            entity_vocab: 30,
            event_types,
            distractor_rate: 0.5,
            multi_event_rate: 0.25,
            dual_type_rate: 0.0,
            max_len: default_max_len(),
            max_arg_tokens: default_max_arg_tokens(),
        }
    }

    /// Role inventory in first-appearance order over the templates.
    pub fn roles(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.event_types {
            for r in &t.slots {
                if !out.contains(r) {
                    out.push(r.clone());
                }
            }
        }
        out
    }

    pub fn event_type_names(&self) -> Vec<String> {
        self.event_types.iter().map(|t| t.event_type.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.event_types.is_empty() {
            return Err(Error::Config("synthetic spec has no event types".into()));
        }
        if self.entity_vocab == 0 || self.filler_vocab == 0 {
            return Err(Error::Config("synthetic vocab sizes must be positive".into()));
        }
        if self.max_arg_tokens == 0 {
            return Err(Error::Config("max_arg_tokens must be positive".into()));
        }
        for t in &self.event_types {
            if t.triggers.is_empty() {
                return Err(Error::Config(format!(
                    "event type {:?} has no trigger words",
                    t.event_type
                )));
            }
            if t.slots.is_empty() {
                return Err(Error::Config(format!(
                    "event type {:?} has no argument slots",
                    t.event_type
                )));
            }
        }
        for rate in [self.distractor_rate, self.multi_event_rate, self.dual_type_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("rate {rate} not in [0,1]")));
            }
        }
        if self.dual_type_rate > 0.0 && self.event_types.len() < 2 {
            return Err(Error::Config(
                "dual_type_rate needs at least two event types".into(),
            ));
        }
        // Worst-case sentence: two largest clusters, a distractor, and the
        // filler padding. More slots than the length budget is impossible.
        let cluster = |t: &EventTemplate| 1 + t.slots.len() * (1 + self.max_arg_tokens);
        let mut sizes: Vec<usize> = self.event_types.iter().map(cluster).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let worst = 2 + sizes[0] + if self.event_types.len() > 1 { 2 + sizes[1] } else { 0 } + 2 + 1 + 2;
        if worst > self.max_len {
            return Err(Error::Config(format!(
                "impossible template: worst-case sentence needs {worst} tokens \
                 but max_len is {} (too many argument slots)",
                self.max_len
            )));
        }
        Ok(())
    }
}

const FILLER_POS: [&str; 4] = ["DT", "JJ", "IN", "RB"];

struct Builder {
    tokens: Vec<String>,
    pos: Vec<String>,
}

impl Builder {
    fn push(&mut self, token: String, pos: &str) -> usize {
        self.tokens.push(token);
        self.pos.push(pos.to_string());
        self.tokens.len() - 1
    }

    fn fillers(&mut self, rng: &mut ChaCha8Rng, vocab: usize, count: usize) {
        for _ in 0..count {
            let w = rng.random_range(0..vocab);
            let pos = FILLER_POS[rng.random_range(0..FILLER_POS.len())];
            self.push(format!("fil{w:03}"), pos);
        }
    }
}

/// Materialize one cluster: trigger token, then marker + entity span per
/// slot. Returns the trigger span and the argument spans in slot order.
fn emit_cluster(
    b: &mut Builder,
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    template: &EventTemplate,
    n_slots: usize,
) -> (Span, Vec<Span>) {
    let trigger_word = template.triggers.choose(rng).unwrap().clone();
    let t = b.push(trigger_word, "VB");
    let trigger = Span::single(t);
    let mut args = Vec::with_capacity(n_slots);
    for slot in 0..n_slots {
        b.push(format!("mk{slot}"), "RP");
        let arg_len = rng.random_range(1..=spec.max_arg_tokens);
        let start = b.tokens.len();
        for i in 0..arg_len {
            let e = rng.random_range(0..spec.entity_vocab);
            b.push(format!("ent{e:03}"), if i == 0 { "NN" } else { "NNS" });
        }
        args.push(Span::new(start, start + arg_len - 1));
    }
    (trigger, args)
}

/// Generate the corpus described by `spec`. Deterministic: the same spec
/// yields byte-identical output.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Sentence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(spec.sentences);
    for idx in 0..spec.sentences {
        let mut b = Builder {
            tokens: Vec::new(),
            pos: Vec::new(),
        };
        let mut events: Vec<EventAnnotation> = Vec::new();

        let lead = rng.random_range(0..=2);
        b.fillers(&mut rng, spec.filler_vocab, lead);

        // First cluster, possibly hosting two events on one trigger span.
        let first_idx = rng.random_range(0..spec.event_types.len());
        let dual = spec.event_types.len() >= 2 && rng.random_bool(spec.dual_type_rate);
        let mut used_types = vec![first_idx];
        if dual {
            let mut second = rng.random_range(0..spec.event_types.len() - 1);
            if second >= first_idx {
                second += 1;
            }
            used_types.push(second);
            let t1 = &spec.event_types[first_idx];
            let t2 = &spec.event_types[second];
            let shared = t1.slots.len().min(t2.slots.len());
            let (trigger, arg_spans) = emit_cluster(&mut b, &mut rng, spec, t1, shared);
            for template in [t1, t2] {
                events.push(EventAnnotation {
                    trigger,
                    event_type: template.event_type.clone(),
                    args: arg_spans
                        .iter()
                        .zip(&template.slots)
                        .map(|(span, role)| Argument {
                            span: *span,
                            role: role.clone(),
                        })
                        .collect(),
                });
            }
        } else {
            let template = &spec.event_types[first_idx];
            let (trigger, arg_spans) =
                emit_cluster(&mut b, &mut rng, spec, template, template.slots.len());
            events.push(EventAnnotation {
                trigger,
                event_type: template.event_type.clone(),
                args: arg_spans
                    .iter()
                    .zip(&template.slots)
                    .map(|(span, role)| Argument {
                        span: *span,
                        role: role.clone(),
                    })
                    .collect(),
            });
        }

        // Optional second cluster of an unused type.
        if spec.event_types.len() > used_types.len() && rng.random_bool(spec.multi_event_rate) {
            let remaining: Vec<usize> = (0..spec.event_types.len())
                .filter(|i| !used_types.contains(i))
                .collect();
            let pick = *remaining.choose(&mut rng).unwrap();
            let template = &spec.event_types[pick];
            let gap = rng.random_range(1..=2);
            b.fillers(&mut rng, spec.filler_vocab, gap);
            let (trigger, arg_spans) =
                emit_cluster(&mut b, &mut rng, spec, template, template.slots.len());
            events.push(EventAnnotation {
                trigger,
                event_type: template.event_type.clone(),
                args: arg_spans
                    .iter()
                    .zip(&template.slots)
                    .map(|(span, role)| Argument {
                        span: *span,
                        role: role.clone(),
                    })
                    .collect(),
            });
        }

        // Distractor: an entity word with no marker, gold-labeled None.
        if rng.random_bool(spec.distractor_rate) {
            b.fillers(&mut rng, spec.filler_vocab, 1);
            let e = rng.random_range(0..spec.entity_vocab);
            b.push(format!("ent{e:03}"), "NN");
        }

        let trail = rng.random_range(0..=2);
        b.fillers(&mut rng, spec.filler_vocab, trail);

        let sentence = Sentence {
            id: format!("syn{}-{idx:05}", spec.seed),
            tokens: b.tokens,
            pos: b.pos,
            events,
        };
        debug_assert!(sentence.validate("synthetic").is_ok());
        corpus.push(sentence);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;
    use std::collections::BTreeMap;

    #[test]
    fn zero_sentences_is_an_empty_corpus() {
        let mut spec = SyntheticSpec::preset(1, 0, 3, 6);
        spec.sentences = 0;
        assert!(generate(&spec).unwrap().is_empty());
    }

    #[test]
    fn same_seed_yields_identical_bytes() {
        let spec = SyntheticSpec::preset(7, 40, 3, 6);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_corpus(&mut a, &generate(&spec).unwrap()).unwrap();
        write_corpus(&mut b, &generate(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 8, ..spec };
        let mut c = Vec::new();
        write_corpus(&mut c, &generate(&other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_sentence_has_an_event_and_valid_spans() {
        let mut spec = SyntheticSpec::preset(11, 200, 3, 6);
        spec.multi_event_rate = 0.4;
        spec.dual_type_rate = 0.3;
        let corpus = generate(&spec).unwrap();
        assert_eq!(corpus.len(), 200);
        for s in &corpus {
            assert!(!s.events.is_empty());
            s.validate("test").unwrap();
            assert!(s.len() <= spec.max_len, "sentence length {}", s.len());
        }
        // dual sentences share the trigger span across two events
        let dual_count = corpus
            .iter()
            .filter(|s| {
                s.events.len() >= 2 && s.events[0].trigger == s.events[1].trigger
            })
            .count();
        assert!(dual_count > 30, "only {dual_count} dual sentences");
    }

    #[test]
    fn role_histogram_tracks_template_proportions() {
        let spec = SyntheticSpec::preset(5, 500, 3, 6);
        let corpus = generate(&spec).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        for s in &corpus {
            for ev in &s.events {
                for arg in &ev.args {
                    *counts.entry(arg.role.clone()).or_default() += 1;
                    total += 1;
                }
            }
        }
        // Types are drawn uniformly and every type contributes one argument
        // per role slot, so each of the 6 roles should get ~1/6 of the mass.
        let expected = total as f64 / 6.0;
        for role in spec.roles() {
            let got = *counts.get(&role).unwrap_or(&0) as f64;
            assert!(
                (got - expected).abs() / expected < 0.2,
                "role {role}: {got} vs expected {expected}"
            );
        }
    }

    #[test]
    fn impossible_template_is_rejected() {
        let mut spec = SyntheticSpec::preset(1, 10, 3, 6);
        spec.event_types[0].slots = (0..20).map(|i| format!("role{i}")).collect();
        let err = generate(&spec).unwrap_err();
        assert!(err.to_string().contains("impossible template"), "{err}");
    }

    #[test]
    fn marker_precedes_every_argument_span() {
        let spec = SyntheticSpec::preset(13, 80, 3, 6);
        for s in generate(&spec).unwrap() {
            for ev in &s.events {
                for (slot, arg) in ev.args.iter().enumerate() {
                    let marker = &s.tokens[arg.span.start - 1];
                    assert_eq!(marker, &format!("mk{slot}"));
                }
            }
        }
    }
}
