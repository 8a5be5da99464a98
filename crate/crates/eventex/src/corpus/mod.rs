//! Corpus model and the JSON-lines interchange format.
//!
//! One sentence per line, UTF-8, canonical field order
//! `id / tokens / pos / events`; `parse ∘ serialize` is byte-identical on
//! the canonical form.

pub mod embed;
pub mod synthetic;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Inclusive token-index span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn single(pos: usize) -> Self {
        Span {
            start: pos,
            end: pos,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive spans always cover at least one token
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(2))?;
        seq.serialize_element(&self.start)?;
        seq.serialize_element(&self.end)?;
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct SpanVisitor;
        impl<'de> Visitor<'de> for SpanVisitor {
            type Value = Span;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [start, end] pair")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Span, A::Error> {
                let start = seq
                    .next_element()?
                    .ok_or_else(|| serde::de::Error::invalid_length(0, &self))?;
                let end = seq
                    .next_element()?
                    .ok_or_else(|| serde::de::Error::invalid_length(1, &self))?;
                if seq.next_element::<usize>()?.is_some() {
                    return Err(serde::de::Error::invalid_length(3, &self));
                }
                Ok(Span { start, end })
            }
        }
        d.deserialize_seq(SpanVisitor)
    }
}

/// One argument of an event: a token span and the role it plays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argument {
    pub span: Span,
    pub role: String,
}

/// An event anchored at a trigger span, carrying its type and arguments.
/// The "None" role is never stored; absence of an argument is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub trigger: Span,
    #[serde(rename = "type")]
    pub event_type: String,
    pub args: Vec<Argument>,
}

/// A tokenized, POS-tagged sentence with its event annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub events: Vec<EventAnnotation>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Structural validation; `location` seeds the error message.
    pub fn validate(&self, location: &str) -> Result<()> {
        let here = |detail: String| Error::data_at(location.to_string(), detail);
        if self.tokens.is_empty() {
            return Err(here(format!("sentence {:?} has no tokens", self.id)));
        }
        if self.pos.len() != self.tokens.len() {
            return Err(here(format!(
                "sentence {:?}: {} POS tags for {} tokens",
                self.id,
                self.pos.len(),
                self.tokens.len()
            )));
        }
        let check_span = |span: &Span, what: &str| -> Result<()> {
            if span.start > span.end {
                return Err(here(format!(
                    "sentence {:?}: {what} span {span} is inverted",
                    self.id
                )));
            }
            if span.end >= self.tokens.len() {
                return Err(here(format!(
                    "sentence {:?}: {what} span {span} exceeds {} tokens",
                    self.id,
                    self.tokens.len()
                )));
            }
            Ok(())
        };
        for ev in &self.events {
            check_span(&ev.trigger, "trigger")?;
            if ev.event_type.is_empty() {
                return Err(here(format!("sentence {:?}: empty event type", self.id)));
            }
            for arg in &ev.args {
                check_span(&arg.span, "argument")?;
                if arg.role.is_empty() || arg.role == NONE_LABEL {
                    return Err(here(format!(
                        "sentence {:?}: argument role {:?} is reserved",
                        self.id, arg.role
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reserved label for "no role / no trigger"; never stored in a corpus.
pub const NONE_LABEL: &str = "None";

/// Parse a JSON-lines corpus file with per-line diagnostics.
pub fn parse_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_reader(BufReader::new(file), &path.display().to_string())
}

pub fn parse_corpus_reader(reader: impl BufRead, source: &str) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::data_at(format!("{source}:{}", lineno + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", lineno + 1);
        let sentence: Sentence = serde_json::from_str(&line)
            .map_err(|e| Error::data_at(location.clone(), format!("malformed line: {e}")))?;
        sentence.validate(&location)?;
        out.push(sentence);
    }
    Ok(out)
}

/// Canonical one-line serialization of a sentence.
pub fn sentence_to_line(s: &Sentence) -> String {
    serde_json::to_string(s).expect("sentence serialization cannot fail")
}

pub fn write_corpus(w: &mut impl Write, corpus: &[Sentence]) -> Result<()> {
    for s in corpus {
        writeln!(w, "{}", sentence_to_line(s)).map_err(|e| Error::data(e.to_string()))?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, corpus: &[Sentence]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(&mut f, corpus)
}

/// Deterministic 80/10/10 partition by sentence-id hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

impl SplitPart {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            "all" => Ok(SplitPart::All),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected train|val|test|all"
            ))),
        }
    }
}

/// Stable FNV-1a over bytes; used for splits and hash-bucket embeddings so
/// results do not depend on the standard library's hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn split_of(id: &str) -> SplitPart {
    match fnv1a(id.as_bytes()) % 10 {
        0..=7 => SplitPart::Train,
        8 => SplitPart::Val,
        _ => SplitPart::Test,
    }
}

/// Select one split (or everything) from a corpus.
pub fn select_split(corpus: &[Sentence], part: SplitPart) -> Vec<Sentence> {
    corpus
        .iter()
        .filter(|s| part == SplitPart::All || split_of(&s.id) == part)
        .cloned()
        .collect()
}

/// The standard 35-role inventory (36 classes with the implicit "None").
pub fn default_role_inventory() -> Vec<String> {
    [
        "Person",
        "Place",
        "Buyer",
        "Seller",
        "Beneficiary",
        "Price",
        "Artifact",
        "Origin",
        "Destination",
        "Giver",
        "Recipient",
        "Money",
        "Org",
        "Agent",
        "Victim",
        "Instrument",
        "Entity",
        "Attacker",
        "Target",
        "Defendant",
        "Adjudicator",
        "Plaintiff",
        "Prosecutor",
        "Crime",
        "Position",
        "Sentence",
        "Vehicle",
        "Time-Within",
        "Time-Starting",
        "Time-Ending",
        "Time-Before",
        "Time-After",
        "Time-Holds",
        "Time-At-Beginning",
        "Time-At-End",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The running two-event example: an attack at a hotel in which a
    /// cameraman died, encoded by hand.
    pub(crate) fn two_event_fixture() -> Sentence {
        let tokens: Vec<String> = "In Baghdad a cameraman died when an American tank fired on the Palestine Hotel"
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        let pos: Vec<String> = "IN NNP DT NN VBD WRB DT JJ NN VBD IN DT NNP NNP"
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        Sentence {
            id: "demo-0001".into(),
            tokens,
            pos,
            events: vec![
                EventAnnotation {
                    trigger: Span::single(4),
                    event_type: "Die".into(),
                    args: vec![
                        Argument {
                            span: Span::single(3),
                            role: "Victim".into(),
                        },
                        Argument {
                            span: Span::new(12, 13),
                            role: "Place".into(),
                        },
                    ],
                },
                EventAnnotation {
                    trigger: Span::single(9),
                    event_type: "Attack".into(),
                    args: vec![
                        Argument {
                            span: Span::single(1),
                            role: "Place".into(),
                        },
                        Argument {
                            span: Span::single(3),
                            role: "Target".into(),
                        },
                        Argument {
                            span: Span::new(7, 8),
                            role: "Attacker".into(),
                        },
                        Argument {
                            span: Span::new(12, 13),
                            role: "Place".into(),
                        },
                    ],
                },
            ],
        }
    }

    #[test]
    fn empty_input_gives_empty_corpus() {
        let corpus = parse_corpus_reader("".as_bytes(), "mem").unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn hand_encoded_two_event_sentence_roundtrips_bytewise() {
        let sentence = two_event_fixture();
        let line = sentence_to_line(&sentence);
        let parsed = parse_corpus_reader(line.as_bytes(), "mem").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0], sentence);
        assert_eq!(sentence_to_line(&parsed[0]), line);
    }

    #[test]
    fn span_overflow_names_the_sentence() {
        let mut s = two_event_fixture();
        s.events[0].trigger = Span::new(4, 99);
        let line = sentence_to_line(&s);
        let err = parse_corpus_reader(line.as_bytes(), "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("demo-0001"), "{msg}");
        assert!(msg.contains("mem:1"), "{msg}");
    }

    #[test]
    fn pos_length_mismatch_is_rejected() {
        let mut s = two_event_fixture();
        s.pos.pop();
        let err = parse_corpus_reader(sentence_to_line(&s).as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("POS"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let input = format!("{}\nnot json\n", sentence_to_line(&two_event_fixture()));
        let err = parse_corpus_reader(input.as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("mem:2"), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_roughly_80_10_10() {
        let ids: Vec<String> = (0..5000).map(|i| format!("sent-{i:05}")).collect();
        let mut counts = [0usize; 3];
        for id in &ids {
            match split_of(id) {
                SplitPart::Train => counts[0] += 1,
                SplitPart::Val => counts[1] += 1,
                SplitPart::Test => counts[2] += 1,
                SplitPart::All => unreachable!(),
            }
            assert_eq!(split_of(id), split_of(id));
        }
        let total = ids.len() as f64;
        assert!((counts[0] as f64 / total - 0.8).abs() < 0.03);
        assert!((counts[1] as f64 / total - 0.1).abs() < 0.02);
        assert!((counts[2] as f64 / total - 0.1).abs() < 0.02);
    }

    #[test]
    fn default_role_inventory_has_35_roles() {
        let roles = default_role_inventory();
        assert_eq!(roles.len(), 35);
        assert!(!roles.contains(&NONE_LABEL.to_string()));
    }
}
