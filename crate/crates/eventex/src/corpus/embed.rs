//! Contextual-embedding providers.
//!
//! The engine treats the contextual encoder as pluggable:
//!
//! * `file_backed` — precomputed vectors keyed by sentence id, stored as a
//!   text index plus one binary little-endian f64 matrix per sentence.
//! * `trainable_hash` — token string → hash bucket → learnable row in the
//!   model's contextual table; the provider only produces bucket ids.
//! * `http_service` — a blocking client for an external encoder:
//!   `POST /embed` with `{id, tokens[], pair_prefix[]?}`, JSON response
//!   `{vectors: [[f64]]}`, bounded retries with exponential backoff.
//!
//! In sentence-pair mode the emitted token sequence is
//! `prefix ++ separator ++ tokens`; all providers cover the full emitted
//! length.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{fnv1a, Sentence, Span};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Reserved separator token between the trigger prefix and the sentence.
pub const SEPARATOR_TOKEN: &str = "<sep>";

/// Default bucket count for the hash provider; prime so collisions stay
/// rare at toy vocabulary sizes.
pub const DEFAULT_HASH_BUCKETS: usize = 50_021;

/// What a provider hands the model for one (sentence, prefix) query.
#[derive(Debug, Clone)]
pub enum Embedded {
    /// One fixed row per emitted token; enters the tape as a constant.
    Fixed(Matrix),
    /// One bucket id per emitted token into the model's contextual table.
    BucketIds(Vec<usize>),
}

impl Embedded {
    pub fn emitted_len(&self) -> usize {
        match self {
            Embedded::Fixed(m) => m.rows,
            Embedded::BucketIds(ids) => ids.len(),
        }
    }
}

#[derive(Debug)]
pub enum EmbeddingProvider {
    FileBacked(FileEmbeddings),
    TrainableHash { buckets: usize, dim: usize },
    Http(HttpEmbeddingClient),
}

impl EmbeddingProvider {
    pub fn trainable_hash(buckets: usize, dim: usize) -> Self {
        EmbeddingProvider::TrainableHash { buckets, dim }
    }

    /// Width of the contextual vectors this provider produces.
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::FileBacked(f) => f.dim,
            EmbeddingProvider::TrainableHash { dim, .. } => *dim,
            EmbeddingProvider::Http(c) => c.dim,
        }
    }

    /// Bucket count when the contextual table is model-owned.
    pub fn bucket_count(&self) -> Option<usize> {
        match self {
            EmbeddingProvider::TrainableHash { buckets, .. } => Some(*buckets),
            _ => None,
        }
    }

    /// Embed one sentence; `pair_prefix` is the in-sentence trigger span to
    /// prepend in sentence-pair mode.
    pub fn embed(&self, sentence: &Sentence, pair_prefix: Option<Span>) -> Result<Embedded> {
        if let Some(span) = pair_prefix {
            if span.end >= sentence.len() {
                return Err(Error::Contract(format!(
                    "pair prefix span {span} out of range for sentence {:?}",
                    sentence.id
                )));
            }
        }
        match self {
            EmbeddingProvider::TrainableHash { buckets, .. } => {
                let mut ids = Vec::with_capacity(sentence.len() + 4);
                if let Some(span) = pair_prefix {
                    for p in span.positions() {
                        ids.push(hash_bucket(&sentence.tokens[p], *buckets));
                    }
                    ids.push(SEPARATOR_BUCKET);
                }
                for t in &sentence.tokens {
                    ids.push(hash_bucket(t, *buckets));
                }
                Ok(Embedded::BucketIds(ids))
            }
            EmbeddingProvider::FileBacked(store) => {
                let base = store.lookup(&sentence.id)?;
                if base.rows != sentence.len() {
                    return Err(Error::data(format!(
                        "fixture for {:?} has {} rows but the sentence has {} tokens",
                        sentence.id,
                        base.rows,
                        sentence.len()
                    )));
                }
                Ok(Embedded::Fixed(assemble_pair(&base, pair_prefix)))
            }
            EmbeddingProvider::Http(client) => {
                let prefix_tokens: Option<Vec<String>> = pair_prefix.map(|span| {
                    span.positions()
                        .map(|p| sentence.tokens[p].clone())
                        .collect()
                });
                let m = client.fetch(&sentence.id, &sentence.tokens, prefix_tokens.as_deref())?;
                let expected =
                    sentence.len() + pair_prefix.map(|s| s.len() + 1).unwrap_or(0);
                if m.rows != expected {
                    return Err(Error::data(format!(
                        "service returned {} vectors, expected {expected}",
                        m.rows
                    )));
                }
                Ok(Embedded::Fixed(m))
            }
        }
    }
}

/// Bucket 0 is reserved for the separator.
const SEPARATOR_BUCKET: usize = 0;

pub fn hash_bucket(token: &str, buckets: usize) -> usize {
    assert!(buckets >= 2, "need at least two buckets");
    if token == SEPARATOR_TOKEN {
        return SEPARATOR_BUCKET;
    }
    1 + (fnv1a(token.as_bytes()) % (buckets as u64 - 1)) as usize
}

/// Prefix rows are copies of the trigger-position rows; the separator row
/// is zero.
fn assemble_pair(base: &Matrix, pair_prefix: Option<Span>) -> Matrix {
    let Some(span) = pair_prefix else {
        return base.clone();
    };
    let rows = base.rows + span.len() + 1;
    let mut data = Vec::with_capacity(rows * base.cols);
    for p in span.positions() {
        data.extend_from_slice(base.row(p));
    }
    data.extend(std::iter::repeat(0.0).take(base.cols));
    data.extend_from_slice(&base.data);
    Matrix::new(rows, base.cols, data)
}

// ── file-backed fixtures ─────────────────────────────────────────────

/// Precomputed embedding store: `<base>.idx` text lines
/// `id <TAB> offset <TAB> rows <TAB> cols` (offset counted in f64 values),
/// plus `<base>.bin` holding the concatenated little-endian matrices.
#[derive(Debug)]
pub struct FileEmbeddings {
    pub dim: usize,
    index: BTreeMap<String, (usize, usize)>, // id -> (offset, rows)
    data: Vec<f64>,
    source: PathBuf,
}

impl FileEmbeddings {
    pub fn write(base: &Path, entries: &[(String, Matrix)]) -> Result<()> {
        let idx_path = base.with_extension("idx");
        let bin_path = base.with_extension("bin");
        let mut idx = File::create(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
        let mut bin = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut offset = 0usize;
        for (id, m) in entries {
            writeln!(idx, "{id}\t{offset}\t{}\t{}", m.rows, m.cols)
                .map_err(|e| Error::io(&idx_path, e))?;
            for v in &m.data {
                bin.write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(&bin_path, e))?;
            }
            offset += m.data.len();
        }
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let idx_path = base.with_extension("idx");
        let bin_path = base.with_extension("bin");
        let idx = File::open(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
        let mut bytes = Vec::new();
        File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::data(format!(
                "{} is not a whole number of f64 values",
                bin_path.display()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut index = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in BufReader::new(idx).lines().enumerate() {
            let location = format!("{}:{}", idx_path.display(), lineno + 1);
            let line = line.map_err(|e| Error::data_at(location.clone(), e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::data_at(location, "expected id\\toffset\\trows\\tcols"));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::data_at(location.clone(), format!("bad number {s:?}: {e}")))
            };
            let (offset, rows, cols) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
            match dim {
                None => dim = Some(cols),
                Some(d) if d != cols => {
                    return Err(Error::data_at(
                        location,
                        format!("vector width {cols} conflicts with earlier width {d}"),
                    ))
                }
                _ => {}
            }
            if offset + rows * cols > data.len() {
                return Err(Error::data_at(location, "entry overruns the binary file"));
            }
            index.insert(fields[0].to_string(), (offset, rows));
        }
        let dim = dim.ok_or_else(|| {
            Error::data(format!("{} contains no entries", idx_path.display()))
        })?;
        Ok(FileEmbeddings {
            dim,
            index,
            data,
            source: base.to_path_buf(),
        })
    }

    fn lookup(&self, id: &str) -> Result<Matrix> {
        let (offset, rows) = self.index.get(id).ok_or_else(|| {
            Error::data(format!(
                "no embedding for sentence id {:?} in {}",
                id,
                self.source.display()
            ))
        })?;
        let n = rows * self.dim;
        Ok(Matrix::new(
            *rows,
            self.dim,
            self.data[*offset..*offset + n].to_vec(),
        ))
    }
}

// ── HTTP service client ──────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    id: &'a str,
    tokens: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    pair_prefix: Option<&'a [String]>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Minimal blocking HTTP/1.1 client for the embedding service. Plain HTTP
/// only; retries transport failures and 5xx responses with exponential
/// backoff. Safe to call from multiple threads.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingClient {
    /// Host:port of the service; the request path is always `/embed`.
    pub authority: String,
    pub dim: usize,
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff_base: Duration,
}

impl HttpEmbeddingClient {
    pub fn new(authority: impl Into<String>, dim: usize) -> Self {
        HttpEmbeddingClient {
            authority: authority.into(),
            dim,
            timeout: Duration::from_secs(10),
            max_retries: 3,
            backoff_base: Duration::from_millis(50),
        }
    }

    fn fetch(&self, id: &str, tokens: &[String], prefix: Option<&[String]>) -> Result<Matrix> {
        let body = serde_json::to_string(&EmbedRequest {
            id,
            tokens,
            pair_prefix: prefix,
        })
        .map_err(|e| Error::data(format!("request serialization: {e}")))?;

        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * (1 << (attempt - 1).min(10)) as u32);
            }
            match self.post_once(&body) {
                Ok(text) => return self.parse_response(&text, tokens.len(), prefix),
                Err(detail) => last = detail,
            }
        }
        Err(Error::Service {
            url: format!("http://{}/embed", self.authority),
            attempts: self.max_retries + 1,
            detail: last,
        })
    }

    fn post_once(&self, body: &str) -> std::result::Result<String, String> {
        let stream = TcpStream::connect(&self.authority).map_err(|e| format!("connect: {e}"))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
            .map_err(|e| format!("timeout setup: {e}"))?;
        let mut stream = stream;
        let request = format!(
            "POST /embed HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.authority,
            body.len(),
            body
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| format!("send: {e}"))?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| format!("receive: {e}"))?;
        let text = String::from_utf8_lossy(&raw);
        let Some((head, rest)) = text.split_once("\r\n\r\n") else {
            return Err("malformed response: no header terminator".into());
        };
        let status_line = head.lines().next().unwrap_or("");
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("malformed status line {status_line:?}"))?;
        if status != 200 {
            return Err(format!("status {status}"));
        }
        Ok(rest.to_string())
    }

    fn parse_response(
        &self,
        text: &str,
        n_tokens: usize,
        prefix: Option<&[String]>,
    ) -> Result<Matrix> {
        let resp: EmbedResponse = serde_json::from_str(text)
            .map_err(|e| Error::data(format!("service response: {e}")))?;
        let expected = n_tokens + prefix.map(|p| p.len() + 1).unwrap_or(0);
        if resp.vectors.len() != expected {
            return Err(Error::data(format!(
                "service returned {} vectors, expected {expected}",
                resp.vectors.len()
            )));
        }
        let mut data = Vec::with_capacity(expected * self.dim);
        for (i, v) in resp.vectors.iter().enumerate() {
            if v.len() != self.dim {
                return Err(Error::data(format!(
                    "service vector {i} has width {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            data.extend_from_slice(v);
        }
        Ok(Matrix::new(expected, self.dim, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventAnnotation;
    use std::io::BufRead;
    use std::net::TcpListener;

    fn sentence(id: &str, words: &[&str]) -> Sentence {
        Sentence {
            id: id.into(),
            tokens: words.iter().map(|w| w.to_string()).collect(),
            pos: words.iter().map(|_| "NN".to_string()).collect(),
            events: Vec::new(),
        }
    }

    #[test]
    fn hash_provider_repeats_vectors_for_repeated_tokens() {
        let p = EmbeddingProvider::trainable_hash(DEFAULT_HASH_BUCKETS, 8);
        let s = sentence("a", &["cat", "saw", "cat"]);
        let Embedded::BucketIds(ids) = p.embed(&s, None).unwrap() else {
            panic!("hash provider must give bucket ids");
        };
        assert_eq!(ids[0], ids[2]);
        assert_ne!(ids[0], ids[1]);
        assert!(ids.iter().all(|&i| i > 0));
    }

    #[test]
    fn hash_provider_pair_mode_prepends_prefix_and_separator() {
        let p = EmbeddingProvider::trainable_hash(101, 4);
        let s = sentence("a", &["the", "alarm", "fired", "now"]);
        let Embedded::BucketIds(ids) = p.embed(&s, Some(Span::single(2))).unwrap() else {
            panic!();
        };
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[0], hash_bucket("fired", 101));
        assert_eq!(ids[1], 0); // separator bucket
        assert_eq!(ids[2], hash_bucket("the", 101));
    }

    #[test]
    fn file_backed_roundtrip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("fixture");
        let entries: Vec<(String, Matrix)> = (0..3)
            .map(|i| {
                let rows = 2 + i;
                let data: Vec<f64> = (0..rows * 4).map(|j| (i * 100 + j) as f64 * 0.5).collect();
                (format!("s{i}"), Matrix::new(rows, 4, data))
            })
            .collect();
        FileEmbeddings::write(&base, &entries).unwrap();
        let store = FileEmbeddings::load(&base).unwrap();
        assert_eq!(store.dim, 4);
        let provider = EmbeddingProvider::FileBacked(store);

        let s = sentence("s1", &["a", "b", "c"]);
        let Embedded::Fixed(m) = provider.embed(&s, None).unwrap() else {
            panic!();
        };
        assert_eq!(m, entries[1].1);

        let missing = sentence("nope", &["a"]);
        let err = provider.embed(&missing, None).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn file_backed_pair_mode_copies_trigger_rows() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("fx");
        let m = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        FileEmbeddings::write(&base, &[("x".to_string(), m)]).unwrap();
        let provider = EmbeddingProvider::FileBacked(FileEmbeddings::load(&base).unwrap());
        let s = sentence("x", &["a", "b", "c"]);
        let Embedded::Fixed(out) = provider.embed(&s, Some(Span::new(1, 2))).unwrap() else {
            panic!();
        };
        assert_eq!(out.rows, 6);
        assert_eq!(out.row(0), &[3.0, 4.0]); // copy of token 1
        assert_eq!(out.row(1), &[5.0, 6.0]); // copy of token 2
        assert_eq!(out.row(2), &[0.0, 0.0]); // separator
        assert_eq!(out.row(3), &[1.0, 2.0]);
    }

    /// One-shot stub server; panics in the serving thread surface as
    /// connection errors in the client.
    fn spawn_stub(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let authority = listener.local_addr().unwrap().to_string();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for response in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = std::io::BufReader::new(stream);
                let mut content_len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_len = rest.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; content_len];
                reader.read_exact(&mut body).unwrap();
                bodies.push(String::from_utf8(body).unwrap());
                let mut stream = reader.into_inner();
                stream.write_all(response.as_bytes()).unwrap();
            }
            bodies
        });
        (authority, handle)
    }

    fn http_ok(json: &str) -> String {
        format!(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            json.len(),
            json
        )
    }

    #[test]
    fn http_provider_passes_fixed_vectors_through() {
        let json = r#"{"vectors":[[1.0,2.0],[3.0,4.0],[5.0,6.0]]}"#;
        let (authority, handle) = spawn_stub(vec![http_ok(json)]);
        let provider = EmbeddingProvider::Http(HttpEmbeddingClient::new(authority, 2));
        let s = sentence("h1", &["x", "y", "z"]);
        let Embedded::Fixed(m) = provider.embed(&s, None).unwrap() else {
            panic!();
        };
        assert_eq!(m.rows, 3);
        assert_eq!(m.row(2), &[5.0, 6.0]);
        let bodies = handle.join().unwrap();
        assert!(bodies[0].contains("\"id\":\"h1\""), "{}", bodies[0]);
        assert!(bodies[0].contains("\"tokens\":[\"x\",\"y\",\"z\"]"));
    }

    #[test]
    fn http_provider_retries_5xx_then_succeeds() {
        let fail = "HTTP/1.1 500 Internal Server Error\r\nContent-Length: 0\r\nConnection: close\r\n\r\n".to_string();
        let json = r#"{"vectors":[[9.0]]}"#;
        let (authority, handle) = spawn_stub(vec![fail, http_ok(json)]);
        let mut client = HttpEmbeddingClient::new(authority, 1);
        client.backoff_base = Duration::from_millis(1);
        let provider = EmbeddingProvider::Http(client);
        let s = sentence("h2", &["only"]);
        let Embedded::Fixed(m) = provider.embed(&s, None).unwrap() else {
            panic!();
        };
        assert_eq!(m.data, vec![9.0]);
        handle.join().unwrap();
    }

    #[test]
    fn http_provider_reports_exhausted_retries() {
        // nothing listening on this port
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let authority = listener.local_addr().unwrap().to_string();
        drop(listener);
        let mut client = HttpEmbeddingClient::new(authority, 1);
        client.max_retries = 2;
        client.backoff_base = Duration::from_millis(1);
        let provider = EmbeddingProvider::Http(client);
        let s = sentence("h3", &["w"]);
        let err = provider.embed(&s, None).unwrap_err();
        match err {
            Error::Service { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn validation_catches_events_in_embedding_fixture_sentences() {
        // embed() only needs tokens; events are untouched
        let mut s = sentence("a", &["one", "two"]);
        s.events.push(EventAnnotation {
            trigger: Span::single(0),
            event_type: "t".into(),
            args: vec![],
        });
        let p = EmbeddingProvider::trainable_hash(17, 2);
        assert!(p.embed(&s, None).is_ok());
    }
}
