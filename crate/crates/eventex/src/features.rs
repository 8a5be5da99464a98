//! Per-token input composition.
//!
//! A token representation is the concatenation of the contextual embedding,
//! a POS embedding, an event-type embedding (argument task only), and a 0/1
//! segment feature, giving `D_token = D_ctx + D_pos + D_evt + 1`.
//!
//! In sentence-pair mode the emitted sequence is the trigger tokens, a
//! reserved separator, then the sentence tokens; segment is 0 over the
//! prefix block and 1 over the sentence. In single-sentence mode the
//! emitted sequence is the sentence alone and every segment value is 0.

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Span};
use crate::{Error, Result};

/// Reserved POS id 0 for tags unseen at vocabulary-build time.
pub const UNK_POS: &str = "<unk-pos>";

/// How the queried event type enters the token features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EventTypeEncoding {
    /// No event-type feature: queries on the same span are
    /// indistinguishable regardless of asserted type.
    None,
    /// Fixed one-hot rows, one per event type.
    OneHot,
    /// Learnable vectors of the given width.
    Learnable { dim: usize },
}

impl EventTypeEncoding {
    pub fn dim(&self, n_event_types: usize) -> usize {
        match self {
            EventTypeEncoding::None => 0,
            EventTypeEncoding::OneHot => n_event_types,
            EventTypeEncoding::Learnable { dim } => *dim,
        }
    }
}

/// Closed label/tag inventories the model was built against. Serialized
/// into the model file so a reloaded model reproduces predictions exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// POS tags; index 0 is always [`UNK_POS`].
    pub pos_tags: Vec<String>,
    pub event_types: Vec<String>,
    pub roles: Vec<String>,
}

impl Vocabulary {
    /// Collect sorted POS/event-type/role inventories from a corpus.
    pub fn build(corpus: &[Sentence]) -> Self {
        let mut pos: Vec<String> = corpus
            .iter()
            .flat_map(|s| s.pos.iter().cloned())
            .collect();
        pos.sort_unstable();
        pos.dedup();
        let mut pos_tags = vec![UNK_POS.to_string()];
        pos_tags.extend(pos);

        let mut event_types: Vec<String> = corpus
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.event_type.clone()))
            .collect();
        event_types.sort_unstable();
        event_types.dedup();

        let mut roles: Vec<String> = corpus
            .iter()
            .flat_map(|s| {
                s.events
                    .iter()
                    .flat_map(|e| e.args.iter().map(|a| a.role.clone()))
            })
            .collect();
        roles.sort_unstable();
        roles.dedup();

        Vocabulary {
            pos_tags,
            event_types,
            roles,
        }
    }

    /// Same, but with a fixed role inventory (e.g. the standard 35 roles).
    pub fn build_with_roles(corpus: &[Sentence], roles: Vec<String>) -> Self {
        let mut v = Self::build(corpus);
        v.roles = roles;
        v
    }

    pub fn pos_id(&self, tag: &str, map_unknown: bool) -> Result<usize> {
        match self.pos_tags.iter().position(|t| t == tag) {
            Some(i) => Ok(i),
            None if map_unknown => Ok(0),
            None => Err(Error::data(format!("unknown POS tag {tag:?}"))),
        }
    }

    pub fn event_type_id(&self, name: &str) -> Result<usize> {
        self.event_types
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::data(format!("unknown event type {name:?}")))
    }

    pub fn role_id(&self, name: &str) -> Result<usize> {
        self.roles
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::data(format!("unknown role {name:?}")))
    }
}

/// Concatenated token-feature width.
pub fn token_dim(ctx_dim: usize, pos_dim: usize, evt_dim: usize, segment: bool) -> usize {
    ctx_dim + pos_dim + evt_dim + usize::from(segment)
}

/// The emitted token layout for one query: which rows exist, which belong
/// to the original sentence, where the trigger sits, and the per-row POS
/// ids and segment values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPlan {
    pub emitted_tokens: Vec<String>,
    pub pos_ids: Vec<usize>,
    pub segment: Vec<f64>,
    /// Half-open row range of the original sentence tokens.
    pub sentence_rows: (usize, usize),
    /// Trigger span in emitted coordinates, inclusive.
    pub trigger_rows: Option<(usize, usize)>,
}

impl TokenPlan {
    pub fn emitted_len(&self) -> usize {
        self.emitted_tokens.len()
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_rows.1 - self.sentence_rows.0
    }
}

/// Lay out the emitted sequence for one query.
///
/// `trigger` is required for argument queries and forbidden for trigger
/// tagging; `pair_mode` only applies to argument queries.
pub fn plan_tokens(
    sentence: &Sentence,
    trigger: Option<Span>,
    pair_mode: bool,
    vocab: &Vocabulary,
    map_unknown_pos: bool,
) -> Result<TokenPlan> {
    if sentence.is_empty() {
        return Err(Error::Contract(format!(
            "sentence {:?} has no tokens",
            sentence.id
        )));
    }
    if let Some(span) = trigger {
        if span.start > span.end || span.end >= sentence.len() {
            return Err(Error::Contract(format!(
                "trigger span {span} out of range for sentence {:?} of length {}",
                sentence.id,
                sentence.len()
            )));
        }
    }

    let t = sentence.len();
    let base_pos: Vec<usize> = sentence
        .pos
        .iter()
        .map(|tag| vocab.pos_id(tag, map_unknown_pos))
        .collect::<Result<_>>()?;

    match trigger {
        Some(span) if pair_mode => {
            let prefix_len = span.len();
            let total = prefix_len + 1 + t;
            let mut emitted = Vec::with_capacity(total);
            let mut pos_ids = Vec::with_capacity(total);
            for p in span.positions() {
                emitted.push(sentence.tokens[p].clone());
                pos_ids.push(base_pos[p]);
            }
            emitted.push(crate::corpus::embed::SEPARATOR_TOKEN.to_string());
            pos_ids.push(0);
            emitted.extend(sentence.tokens.iter().cloned());
            pos_ids.extend(base_pos.iter().copied());

            let mut segment = vec![0.0; prefix_len + 1];
            segment.extend(std::iter::repeat(1.0).take(t));

            let offset = prefix_len + 1;
            Ok(TokenPlan {
                emitted_tokens: emitted,
                pos_ids,
                segment,
                sentence_rows: (offset, offset + t),
                trigger_rows: Some((offset + span.start, offset + span.end)),
            })
        }
        Some(span) => Ok(TokenPlan {
            emitted_tokens: sentence.tokens.clone(),
            pos_ids: base_pos,
            segment: vec![0.0; t],
            sentence_rows: (0, t),
            trigger_rows: Some((span.start, span.end)),
        }),
        None => Ok(TokenPlan {
            emitted_tokens: sentence.tokens.clone(),
            pos_ids: base_pos,
            segment: vec![0.0; t],
            sentence_rows: (0, t),
            trigger_rows: None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventAnnotation;

    fn sample() -> Sentence {
        Sentence {
            id: "s".into(),
            tokens: ["a", "storm", "hit", "the", "coast"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            pos: ["DT", "NN", "VBD", "DT", "NN"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            events: vec![EventAnnotation {
                trigger: Span::single(2),
                event_type: "impact".into(),
                args: vec![],
            }],
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&[sample()])
    }

    #[test]
    fn dim_arithmetic_matches_contract() {
        // trigger task: no event-type slice
        assert_eq!(token_dim(8, 4, 0, true), 13);
        // argument task with 400-wide learnable event types
        let enc = EventTypeEncoding::Learnable { dim: 400 };
        assert_eq!(token_dim(768, 50, enc.dim(33), true), 1219);
        // one-hot width follows the inventory
        assert_eq!(EventTypeEncoding::OneHot.dim(33), 33);
        assert_eq!(EventTypeEncoding::None.dim(33), 0);
    }

    #[test]
    fn single_mode_has_all_zero_segments() {
        let plan = plan_tokens(&sample(), Some(Span::single(2)), false, &vocab(), true).unwrap();
        assert_eq!(plan.emitted_len(), 5);
        assert_eq!(plan.segment.iter().sum::<f64>(), 0.0);
        assert_eq!(plan.sentence_rows, (0, 5));
        assert_eq!(plan.trigger_rows, Some((2, 2)));
    }

    #[test]
    fn pair_mode_prepends_trigger_and_separator() {
        let plan = plan_tokens(&sample(), Some(Span::single(2)), true, &vocab(), true).unwrap();
        assert_eq!(plan.emitted_len(), 7);
        assert_eq!(plan.emitted_tokens[0], "hit");
        assert_eq!(plan.emitted_tokens[1], crate::corpus::embed::SEPARATOR_TOKEN);
        assert_eq!(plan.segment, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(plan.sentence_rows, (2, 7));
        assert_eq!(plan.trigger_rows, Some((4, 4)));
        // prefix copies the trigger's POS id
        assert_eq!(plan.pos_ids[0], plan.pos_ids[4]);
        // separator uses the reserved unknown id
        assert_eq!(plan.pos_ids[1], 0);
    }

    #[test]
    fn unknown_pos_maps_to_reserved_id_or_errors() {
        let mut s = sample();
        s.pos[1] = "XYZ".into();
        let v = vocab();
        let plan = plan_tokens(&s, None, false, &v, true).unwrap();
        assert_eq!(plan.pos_ids[1], 0);
        let err = plan_tokens(&s, None, false, &v, false).unwrap_err();
        assert!(err.to_string().contains("XYZ"), "{err}");
    }

    #[test]
    fn out_of_range_trigger_is_rejected() {
        let err = plan_tokens(&sample(), Some(Span::new(3, 9)), true, &vocab(), true).unwrap_err();
        assert!(err.to_string().contains("trigger span"), "{err}");
    }

    #[test]
    fn vocabulary_is_sorted_and_reserves_unk() {
        let v = vocab();
        assert_eq!(v.pos_tags[0], UNK_POS);
        let mut sorted = v.pos_tags[1..].to_vec();
        sorted.sort_unstable();
        assert_eq!(&v.pos_tags[1..], sorted.as_slice());
        assert_eq!(v.event_types, vec!["impact".to_string()]);
    }
}
