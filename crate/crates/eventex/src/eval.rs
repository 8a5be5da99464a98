//! Span-level argument evaluation.
//!
//! A predicted argument is *identified* when its (event type, span) pair
//! matches a gold argument of an event of that type in the same sentence;
//! it is *classified* when the role matches as well. Scores are
//! micro-averaged over all events. Each prediction is counted once against
//! at most one gold item (greedy matching, implemented as a multiset
//! intersection, so the result is order-independent).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::embed::EmbeddingProvider;
use crate::corpus::{Sentence, Span, NONE_LABEL};
use crate::model::{Model, QueryTrigger, Task};
use crate::{Error, Result};

/// Micro-averaged counts with the derived P/R/F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.tp as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.tp as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RoleBreakdown {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

/// Identification and classification P/R/F1 plus per-role counts and a
/// gold-role → predicted-role confusion table ("None" marks misses and
/// spurious predictions).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub identification: Prf,
    pub classification: Prf,
    pub per_role: BTreeMap<String, RoleBreakdown>,
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub meta: serde_json::Value,
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>8}\n",
            "metric", "P", "R", "F1"
        ));
        for (name, prf) in [
            ("identification", &self.identification),
            ("classification", &self.classification),
        ] {
            out.push_str(&format!(
                "{:<18} {:>8.4} {:>8.4} {:>8.4}\n",
                name,
                prf.precision(),
                prf.recall(),
                prf.f1()
            ));
        }
        if !self.per_role.is_empty() {
            out.push_str(&format!(
                "\n{:<18} {:>8} {:>8} {:>8}\n",
                "role", "gold", "pred", "correct"
            ));
            for (role, b) in &self.per_role {
                out.push_str(&format!(
                    "{:<18} {:>8} {:>8} {:>8}\n",
                    role, b.gold, b.predicted, b.correct
                ));
            }
        }
        out
    }
}

/// One predicted argument, tagged with the event type of its query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedArg {
    pub sentence_id: String,
    pub event_type: String,
    pub span: Span,
    pub role: String,
}

/// Score a prediction set against the gold annotations of a corpus.
pub fn score(predictions: &[PredictedArg], corpus: &[Sentence]) -> EvalReport {
    type IdentKey = (String, String, Span);

    let mut gold_ident: BTreeMap<IdentKey, Vec<String>> = BTreeMap::new();
    let mut gold_total = 0usize;
    let mut per_role: BTreeMap<String, RoleBreakdown> = BTreeMap::new();
    for s in corpus {
        for ev in &s.events {
            for arg in &ev.args {
                gold_ident
                    .entry((s.id.clone(), ev.event_type.clone(), arg.span))
                    .or_default()
                    .push(arg.role.clone());
                per_role.entry(arg.role.clone()).or_default().gold += 1;
                gold_total += 1;
            }
        }
    }

    let mut pred_ident: BTreeMap<IdentKey, Vec<String>> = BTreeMap::new();
    for p in predictions {
        pred_ident
            .entry((p.sentence_id.clone(), p.event_type.clone(), p.span))
            .or_default()
            .push(p.role.clone());
        per_role.entry(p.role.clone()).or_default().predicted += 1;
    }

    let mut ident_tp = 0usize;
    let mut class_tp = 0usize;
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let bump = |gold: &str, pred: &str, confusion: &mut BTreeMap<String, BTreeMap<String, usize>>| {
        *confusion
            .entry(gold.to_string())
            .or_default()
            .entry(pred.to_string())
            .or_default() += 1;
    };

    for (key, gold_roles) in &gold_ident {
        let empty = Vec::new();
        let pred_roles = pred_ident.get(key).unwrap_or(&empty);
        let matched = gold_roles.len().min(pred_roles.len());
        ident_tp += matched;

        // classification: multiset intersection of roles under this key
        let mut gold_counts: BTreeMap<&String, usize> = BTreeMap::new();
        for r in gold_roles {
            *gold_counts.entry(r).or_default() += 1;
        }
        let mut pred_counts: BTreeMap<&String, usize> = BTreeMap::new();
        for r in pred_roles {
            *pred_counts.entry(r).or_default() += 1;
        }
        for (role, &g) in &gold_counts {
            let p = *pred_counts.get(role).unwrap_or(&0);
            let correct = g.min(p);
            class_tp += correct;
            per_role.entry((*role).clone()).or_default().correct += correct;
            for _ in 0..correct {
                bump(role, role, &mut confusion);
            }
        }
        // confusion for the identified-but-misclassified and the unmatched
        let mut gold_left: Vec<&String> = Vec::new();
        for (role, &g) in &gold_counts {
            let used = (*pred_counts.get(role).unwrap_or(&0)).min(g);
            for _ in used..g {
                gold_left.push(role);
            }
        }
        let mut pred_left: Vec<&String> = Vec::new();
        for (role, &p) in &pred_counts {
            let used = (*gold_counts.get(role).unwrap_or(&0)).min(p);
            for _ in used..p {
                pred_left.push(role);
            }
        }
        let pair_up = gold_left.len().min(pred_left.len());
        for i in 0..pair_up {
            bump(gold_left[i], pred_left[i], &mut confusion);
        }
        for role in gold_left.iter().skip(pair_up) {
            bump(role, NONE_LABEL, &mut confusion);
        }
        for role in pred_left.iter().skip(pair_up) {
            bump(NONE_LABEL, role, &mut confusion);
        }
    }
    // spurious predictions whose (type, span) never occurs in gold
    for (key, pred_roles) in &pred_ident {
        if !gold_ident.contains_key(key) {
            for role in pred_roles {
                bump(NONE_LABEL, role, &mut confusion);
            }
        }
    }

    EvalReport {
        identification: Prf {
            tp: ident_tp,
            predicted: predictions.len(),
            gold: gold_total,
        },
        classification: Prf {
            tp: class_tp,
            predicted: predictions.len(),
            gold: gold_total,
        },
        per_role,
        confusion,
        meta: serde_json::Value::Null,
    }
}

/// Where argument queries come from during evaluation.
pub enum TriggerSource<'a> {
    /// Query every gold event (isolates the argument stage).
    Gold,
    /// Query the spans tagged by a trigger model (full pipeline).
    Predicted(&'a Model),
}

/// Run the argument model over a corpus and score it.
pub fn evaluate(
    model: &Model,
    provider: &EmbeddingProvider,
    corpus: &[Sentence],
    source: TriggerSource,
    meta: serde_json::Value,
) -> Result<EvalReport> {
    if model.config.task != Task::Argument {
        return Err(Error::Contract("evaluate needs an argument model".into()));
    }
    let mut predictions = Vec::new();
    for s in corpus {
        let queries: Vec<QueryTrigger> = match &source {
            TriggerSource::Gold => s
                .events
                .iter()
                .map(|e| QueryTrigger {
                    span: e.trigger,
                    event_type: e.event_type.clone(),
                })
                .collect(),
            TriggerSource::Predicted(trigger_model) => trigger_model
                .tag_triggers(s, provider)?
                .into_iter()
                .map(|(span, event_type)| QueryTrigger { span, event_type })
                .collect(),
        };
        for q in queries {
            for (span, role) in model.predict_roles(s, &q, provider)? {
                predictions.push(PredictedArg {
                    sentence_id: s.id.clone(),
                    event_type: q.event_type.clone(),
                    span,
                    role,
                });
            }
        }
    }
    let mut report = score(&predictions, corpus);
    report.meta = meta;
    Ok(report)
}

/// Micro P/R/F1 of trigger tagging itself (exact span + type).
pub fn trigger_prf(
    model: &Model,
    provider: &EmbeddingProvider,
    corpus: &[Sentence],
) -> Result<Prf> {
    if model.config.task != Task::Trigger {
        return Err(Error::Contract("trigger_prf needs a trigger model".into()));
    }
    let mut counts = Prf::default();
    for s in corpus {
        let predicted = model.tag_triggers(s, provider)?;
        let mut gold: Vec<(Span, &str)> = s
            .events
            .iter()
            .map(|e| (e.trigger, e.event_type.as_str()))
            .collect();
        counts.predicted += predicted.len();
        counts.gold += gold.len();
        for (span, ty) in &predicted {
            if let Some(i) = gold
                .iter()
                .position(|(gs, gt)| gs == span && *gt == ty.as_str())
            {
                gold.swap_remove(i);
                counts.tp += 1;
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Argument, EventAnnotation};

    fn sentence_with(id: &str, events: Vec<EventAnnotation>) -> Sentence {
        let len = 12;
        Sentence {
            id: id.into(),
            tokens: (0..len).map(|i| format!("w{i}")).collect(),
            pos: (0..len).map(|_| "NN".to_string()).collect(),
            events,
        }
    }

    fn arg(span: (usize, usize), role: &str) -> Argument {
        Argument {
            span: Span::new(span.0, span.1),
            role: role.into(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let corpus = vec![sentence_with(
            "a",
            vec![EventAnnotation {
                trigger: Span::single(1),
                event_type: "T".into(),
                args: vec![arg((3, 3), "r1"), arg((5, 6), "r2")],
            }],
        )];
        let preds = vec![
            PredictedArg {
                sentence_id: "a".into(),
                event_type: "T".into(),
                span: Span::single(3),
                role: "r1".into(),
            },
            PredictedArg {
                sentence_id: "a".into(),
                event_type: "T".into(),
                span: Span::new(5, 6),
                role: "r2".into(),
            },
        ];
        let report = score(&preds, &corpus);
        assert_eq!(report.identification.f1(), 1.0);
        assert_eq!(report.classification.f1(), 1.0);
        assert_eq!(report.per_role["r1"].correct, 1);
    }

    #[test]
    fn worked_example_matches_hand_computation() {
        // 3 gold args; 2 predictions; exactly one matches span+type but has
        // the wrong role → identification P=1/2, R=1/3, F1=0.4 and
        // classification all zeros.
        let corpus = vec![sentence_with(
            "a",
            vec![EventAnnotation {
                trigger: Span::single(0),
                event_type: "T".into(),
                args: vec![arg((2, 2), "r1"), arg((4, 4), "r2"), arg((6, 7), "r3")],
            }],
        )];
        let preds = vec![
            PredictedArg {
                sentence_id: "a".into(),
                event_type: "T".into(),
                span: Span::single(2),
                role: "r2".into(), // wrong role, right span+type
            },
            PredictedArg {
                sentence_id: "a".into(),
                event_type: "T".into(),
                span: Span::single(9), // no gold arg here
                role: "r1".into(),
            },
        ];
        let report = score(&preds, &corpus);
        assert_eq!(report.identification.precision(), 0.5);
        assert!((report.identification.recall() - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.identification.f1() - 0.4).abs() < 1e-12);
        assert_eq!(report.classification.tp, 0);
        assert_eq!(report.classification.precision(), 0.0);
        assert_eq!(report.classification.recall(), 0.0);
        assert_eq!(report.classification.f1(), 0.0);
        assert_eq!(report.confusion["r1"][NONE_LABEL], 1);
    }

    #[test]
    fn no_predictions_give_zero_by_convention() {
        let corpus = vec![sentence_with(
            "a",
            vec![EventAnnotation {
                trigger: Span::single(0),
                event_type: "T".into(),
                args: vec![arg((2, 2), "r1")],
            }],
        )];
        let report = score(&[], &corpus);
        assert_eq!(report.identification.precision(), 0.0);
        assert_eq!(report.identification.recall(), 0.0);
        assert_eq!(report.identification.f1(), 0.0);
        // empty corpus → zeros as well
        let empty = score(&[], &[]);
        assert_eq!(empty.classification.f1(), 0.0);
    }

    #[test]
    fn duplicate_predictions_count_once_per_gold_item() {
        let corpus = vec![sentence_with(
            "a",
            vec![EventAnnotation {
                trigger: Span::single(0),
                event_type: "T".into(),
                args: vec![arg((2, 2), "r1")],
            }],
        )];
        let dup = PredictedArg {
            sentence_id: "a".into(),
            event_type: "T".into(),
            span: Span::single(2),
            role: "r1".into(),
        };
        let report = score(&[dup.clone(), dup], &corpus);
        assert_eq!(report.identification.tp, 1);
        assert_eq!(report.identification.predicted, 2);
        assert_eq!(report.classification.tp, 1);
    }

    #[test]
    fn event_type_must_match_for_identification() {
        let corpus = vec![sentence_with(
            "a",
            vec![
                EventAnnotation {
                    trigger: Span::single(0),
                    event_type: "T1".into(),
                    args: vec![arg((2, 2), "r1")],
                },
                EventAnnotation {
                    trigger: Span::single(5),
                    event_type: "T2".into(),
                    args: vec![arg((7, 7), "r2")],
                },
            ],
        )];
        // right span, wrong event type
        let preds = vec![PredictedArg {
            sentence_id: "a".into(),
            event_type: "T2".into(),
            span: Span::single(2),
            role: "r1".into(),
        }];
        let report = score(&preds, &corpus);
        assert_eq!(report.identification.tp, 0);
    }
}
