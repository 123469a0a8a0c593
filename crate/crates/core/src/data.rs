//! Corpus, query, triplet and qrels files.
//!
//! Corpora and query sets are JSONL (`{"id": .., "text": ..}`) or TSV
//! (`id \t text`). Precomputed token vectors for the projection backbone
//! travel separately as an embedding dump keyed by the same ids.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{ingest_embeddings, EncoderInput, HashTokenizer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
}

/// Ordered id/text records with dense ordinals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    records: Vec<Record>,
    ordinals: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_records(records: Vec<Record>) -> Result<Corpus> {
        let mut c = Corpus::default();
        for (i, r) in records.into_iter().enumerate() {
            c.push(r).map_err(|reason| Error::Parse {
                path: PathBuf::from("<memory>"),
                line: i + 1,
                reason,
            })?;
        }
        Ok(c)
    }

    fn push(&mut self, r: Record) -> std::result::Result<(), String> {
        if r.id.is_empty() {
            return Err("empty id".into());
        }
        if self.ordinals.contains_key(&r.id) {
            return Err(format!("duplicate id {:?}", r.id));
        }
        self.ordinals.insert(r.id.clone(), self.records.len());
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, i: usize) -> &Record {
        &self.records[i]
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.ordinals.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

fn parse_record(line: &str) -> std::result::Result<Record, String> {
    if line.trim_start().starts_with('{') {
        serde_json::from_str(line).map_err(|e| format!("bad JSON record: {e}"))
    } else {
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| "expected `id<TAB>text` or a JSON object".to_string())?;
        Ok(Record {
            id: id.trim().to_string(),
            text: text.to_string(),
        })
    }
}

/// Streams a JSONL or TSV id/text file.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut c = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let r = parse_record(&line).map_err(fail)?;
        c.push(r).map_err(fail)?;
    }
    Ok(c)
}

pub fn write_corpus(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Id-based training triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query_id: String,
    pub pos_id: String,
    pub neg_id: String,
}

/// `qid \t pos_id \t neg_id` per line.
pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [q, p, n] = parts[..] else {
            return Err(fail(format!(
                "expected 3 tab-separated fields, got {}",
                parts.len()
            )));
        };
        if p == n {
            return Err(fail("positive and negative are the same document".into()));
        }
        out.push(Triplet {
            query_id: q.into(),
            pos_id: p.into(),
            neg_id: n.into(),
        });
    }
    Ok(out)
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triplets {
        writeln!(w, "{}\t{}\t{}", t.query_id, t.pos_id, t.neg_id)?;
    }
    w.flush()?;
    Ok(())
}

/// query id → (doc id → grade).
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// TREC qrels: `qid 0 docid grade`.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let reader = BufReader::new(File::open(path)?);
    let mut q = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [qid, _, doc, grade] = parts[..] else {
            return Err(fail(format!("expected 4 fields, got {}", parts.len())));
        };
        let grade: i64 = grade
            .parse()
            .map_err(|e| fail(format!("bad grade {grade:?}: {e}")))?;
        if grade < 0 {
            return Err(fail(format!("negative grade {grade}")));
        }
        q.entry(qid.to_string())
            .or_default()
            .insert(doc.to_string(), grade as u32);
    }
    Ok(q)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (q, docs) in qrels {
        for (d, g) in docs {
            writeln!(w, "{q} 0 {d} {g}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Encoder input owned alongside its id.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Tokens(Vec<u32>),
    Vectors(Tensor),
}

impl Input {
    pub fn as_encoder_input(&self) -> EncoderInput<'_> {
        match self {
            Input::Tokens(t) => EncoderInput::Tokens(t),
            Input::Vectors(v) => EncoderInput::Vectors(v),
        }
    }
}

/// Default location of the token-vector dump that accompanies `path`:
/// `corpus.jsonl` → `corpus.vectors/`.
pub fn vectors_dir_for(path: &Path) -> PathBuf {
    path.with_extension("vectors")
}

/// Loads token vectors keyed by owner id.
pub fn load_input_vectors(dir: &Path) -> Result<HashMap<String, Tensor>> {
    Ok(ingest_embeddings(dir)?
        .into_iter()
        .map(|m| {
            let id = m.owner_id.clone();
            (id, m.rows().clone())
        })
        .collect())
}

/// Encoder inputs for every record, tokenized or looked up in `vectors`.
pub fn inputs_for(
    records: &[Record],
    tokenizer: Option<&HashTokenizer>,
    vectors: Option<&HashMap<String, Tensor>>,
) -> Result<Vec<Input>> {
    records
        .iter()
        .map(|r| match (vectors, tokenizer) {
            (Some(v), _) => v
                .get(&r.id)
                .cloned()
                .map(Input::Vectors)
                .ok_or_else(|| Error::Contract(format!("no token vectors for {:?}", r.id))),
            (None, Some(t)) => Ok(Input::Tokens(t.tokenize(&r.text))),
            (None, None) => Err(Error::Contract("no tokenizer or token vectors".into())),
        })
        .collect()
}
