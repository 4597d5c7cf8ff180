//! Automatic response metrics: perplexity, BLEU-1, ROUGE-L, embedding
//! Average/Extrema/Greedy and Distinct-n.
//!
//! Texts are split on whitespace. BLEU-1 is corpus-level; ROUGE-L and the
//! embedding metrics are per-sample means. Embedding cosines are reported as
//! `(1 + cos) / 2` so that every metric except perplexity lies in `[0, 1]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vkd_tensor::{no_grad, Tensor, TensorError};

use crate::config::ModelConfig;
use crate::data::DialogueSample;
use crate::error::{Result, VkdError};
use crate::integration::Decode;
use crate::model::Model;
use crate::tokenizer::{self, VOCAB_SIZE};

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

fn check_corpora(cands: &[String], refs: &[String]) -> Result<()> {
    if cands.is_empty() {
        return Err(VkdError::input("empty candidate corpus"));
    }
    if cands.len() != refs.len() {
        return Err(VkdError::input(format!("{} candidates but {} references", cands.len(), refs.len())));
    }
    Ok(())
}

fn counts<'a>(words: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for w in words {
        *m.entry(*w).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU with unigrams only: clipped matches over candidate length,
/// times the brevity penalty `exp(1 - r/c)` when `c < r`.
pub fn bleu1(cands: &[String], refs: &[String]) -> Result<f64> {
    check_corpora(cands, refs)?;
    let (mut matched, mut c_len, mut r_len) = (0usize, 0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let cw = tokenizer::words(c);
        let rw = counts(&tokenizer::words(r));
        for (w, n) in counts(&cw) {
            matched += n.min(rw.get(w).copied().unwrap_or(0));
        }
        c_len += cw.len();
        r_len += rw.values().sum::<usize>();
    }
    if c_len == 0 || matched == 0 {
        return Ok(0.0);
    }
    let precision = matched as f64 / c_len as f64;
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    Ok(bp * precision)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair: `(1 + β²) P R / (R + β² P)`.
pub fn rouge_l_pair(cand: &str, reference: &str) -> f64 {
    let (c, r) = (tokenizer::words(cand), tokenizer::words(reference));
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rc = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

pub fn rouge_l(cands: &[String], refs: &[String]) -> Result<f64> {
    check_corpora(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| rouge_l_pair(c, r)).sum::<f64>() / cands.len() as f64)
}

/// Distinct n-grams over all n-grams in the corpus.
pub fn distinct_n(texts: &[String], n: usize) -> Result<f64> {
    if texts.is_empty() || n == 0 {
        return Err(VkdError::input("distinct-n needs a non-empty corpus and n >= 1"));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let w = tokenizer::words(t);
        for g in w.windows(n) {
            seen.insert(g.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Err(TensorError::DegenerateMask {
            op: "distinct_n",
            detail: format!("no text has {} words", n),
        }
        .into());
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Word vectors used by the embedding metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingTable {
    /// One row per byte-level token id; a word's vector is the mean of its
    /// byte rows.
    Tokens(Vec<Vec<f64>>),
    /// Explicit word vectors.
    Words(HashMap<String, Vec<f64>>),
}

impl EmbeddingTable {
    /// Uses a `[V, d]` token embedding matrix.
    pub fn from_token_embeddings(table: &Tensor) -> Result<Self> {
        if table.rank() != 2 || table.dim(0) != VOCAB_SIZE {
            return Err(VkdError::input(format!("token table {:?} needs {} rows", table.shape(), VOCAB_SIZE)));
        }
        let rows: Vec<Vec<f64>> = table.data().chunks(table.dim(1)).map(<[f64]>::to_vec).collect();
        if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(VkdError::Numeric("token table has non-finite entries".into()));
        }
        Ok(EmbeddingTable::Tokens(rows))
    }

    /// The frozen text encoder's token embeddings.
    pub fn from_model(model: &Model) -> Result<Self> {
        EmbeddingTable::from_token_embeddings(model.params.get(model.text_encoder.token_embedding))
    }

    /// Reads `word v1 v2 ...` lines.
    pub fn load_words(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VkdError::io(format!("reading {}", path.display()), e))?;
        let mut map = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let parse_err = |detail: String| VkdError::Parse { path: path.to_path_buf(), line: i + 1, detail };
            let v: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("{}: {}", p, e))))
                .collect::<Result<_>>()?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(parse_err("empty or non-finite vector".into()));
            }
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(parse_err(format!("expected {} values", dim.unwrap_or(0))));
            }
            map.insert(word.to_string(), v);
        }
        if map.is_empty() {
            return Err(VkdError::EmptyCorpus(path.to_path_buf()));
        }
        Ok(EmbeddingTable::Words(map))
    }

    pub fn vector(&self, word: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingTable::Words(m) => {
                m.get(word).cloned().ok_or_else(|| VkdError::input(format!("no embedding for token `{}`", word)))
            }
            EmbeddingTable::Tokens(rows) => {
                let ids = tokenizer::encode(word);
                let d = rows.first().map_or(0, Vec::len);
                let mut v = vec![0.0; d];
                for &id in &ids {
                    let row = rows.get(id).ok_or_else(|| VkdError::input(format!("no embedding for token `{}`", word)))?;
                    v.iter_mut().zip(row).for_each(|(a, b)| *a += b / ids.len() as f64);
                }
                Ok(v)
            }
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn to_unit(cos: f64) -> f64 {
    (1.0 + cos) / 2.0
}

fn mean_vector(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        m.iter_mut().zip(v).for_each(|(a, b)| *a += b / vs.len() as f64);
    }
    m
}

/// Per dimension, the value of largest magnitude (first one on ties).
fn extrema_vector(vs: &[Vec<f64>]) -> Vec<f64> {
    (0..vs[0].len())
        .map(|j| vs.iter().map(|v| v[j]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best }))
        .collect()
}

fn greedy_direction(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// Scores of one pair; a pair with an empty side scores 0 on every metric.
pub fn embedding_pair(cand: &str, reference: &str, table: &EmbeddingTable) -> Result<EmbeddingScores> {
    let lookup = |t: &str| tokenizer::words(t).into_iter().map(|w| table.vector(w)).collect::<Result<Vec<_>>>();
    let (c, r) = (lookup(cand)?, lookup(reference)?);
    if c.is_empty() || r.is_empty() {
        return Ok(EmbeddingScores { average: 0.0, extrema: 0.0, greedy: 0.0 });
    }
    Ok(EmbeddingScores {
        average: to_unit(cosine(&mean_vector(&c), &mean_vector(&r))),
        extrema: to_unit(cosine(&extrema_vector(&c), &extrema_vector(&r))),
        greedy: to_unit((greedy_direction(&c, &r) + greedy_direction(&r, &c)) / 2.0),
    })
}

pub fn embedding_metrics(cands: &[String], refs: &[String], table: &EmbeddingTable) -> Result<EmbeddingScores> {
    check_corpora(cands, refs)?;
    let mut sum = EmbeddingScores { average: 0.0, extrema: 0.0, greedy: 0.0 };
    for (c, r) in cands.iter().zip(refs) {
        let s = embedding_pair(c, r, table)?;
        sum.average += s.average;
        sum.extrema += s.extrema;
        sum.greedy += s.greedy;
    }
    let n = cands.len() as f64;
    Ok(EmbeddingScores { average: sum.average / n, extrema: sum.extrema / n, greedy: sum.greedy / n })
}

/// Per-token NLL totals of the responses, conditioned as in fine-tuning.
pub fn response_nll(model: &Model, corpus: &[DialogueSample], chunk: usize) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(VkdError::input("empty evaluation corpus"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for part in corpus.chunks(chunk.max(1)) {
        let out = no_grad(|| model.dialogue_nll(part))?;
        sum += out.sample_sums.iter().sum::<f64>();
        count += out.sample_counts.iter().sum::<usize>();
    }
    Ok((sum, count))
}

/// `exp` of the token-weighted mean response NLL.
pub fn perplexity(model: &Model, corpus: &[DialogueSample]) -> Result<f64> {
    let (sum, count) = response_nll(model, corpus, 16)?;
    Ok((sum / count as f64).exp())
}

/// Hex SHA-256 of the canonical config text.
pub fn config_digest(cfg: &ModelConfig) -> String {
    Sha256::digest(cfg.to_toml().as_bytes()).iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub context: String,
    pub reference: String,
    pub candidate: String,
    pub rouge_l: f64,
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    pub config_digest: String,
    pub metadata: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    /// One JSON object per metric.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.metrics {
            let rec = serde_json::json!({
                "metric": name,
                "value": value,
                "samples": self.samples,
                "config_digest": self.config_digest,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn per_sample_csv(&self) -> String {
        let q = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        let mut out = String::from("context,reference,candidate,rouge_l,average,extrema,greedy\n");
        for s in &self.per_sample {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                q(&s.context),
                q(&s.reference),
                q(&s.candidate),
                s.rouge_l,
                s.average,
                s.extrema,
                s.greedy
            ));
        }
        out
    }
}

/// Generates a response for every context and scores the corpus.
pub fn evaluate(
    model: &Model,
    corpus: &[DialogueSample],
    table: &EmbeddingTable,
    max_new: usize,
    decode: Decode,
    seed: u64,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(VkdError::input("empty evaluation corpus"));
    }
    let mut cands = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.iter().enumerate() {
        let out = model.infer_response(&s.context_ids(), max_new, decode, seed.wrapping_add(i as u64))?;
        cands.push(tokenizer::decode(&out));
    }
    let refs: Vec<String> = corpus.iter().map(|s| s.response.clone()).collect();
    let emb = embedding_metrics(&cands, &refs, table)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("ppl".to_string(), perplexity(model, corpus)?);
    metrics.insert("bleu1".to_string(), bleu1(&cands, &refs)?);
    metrics.insert("rouge_l".to_string(), rouge_l(&cands, &refs)?);
    metrics.insert("average".to_string(), emb.average);
    metrics.insert("extrema".to_string(), emb.extrema);
    metrics.insert("greedy".to_string(), emb.greedy);
    // too-short generations make distinct-n undefined; report 0 then
    metrics.insert("dis1".to_string(), distinct_n(&cands, 1).unwrap_or(0.0));
    metrics.insert("dis2".to_string(), distinct_n(&cands, 2).unwrap_or(0.0));
    let mut metadata = BTreeMap::new();
    metadata.insert("tokenization".into(), "whitespace".into());
    metadata.insert("rouge_l_beta".into(), ROUGE_BETA.to_string());
    metadata.insert("embedding_mapping".into(), "(1+cos)/2".into());
    metadata.insert("extrema_rule".into(), "max-magnitude per dimension".into());
    metadata.insert("bleu1".into(), "corpus-level, clipped, brevity penalty".into());
    let per_sample = corpus
        .iter()
        .zip(&cands)
        .map(|(s, c)| {
            let e = embedding_pair(c, &s.response, table)?;
            Ok(SampleScore {
                context: s.context.clone(),
                reference: s.response.clone(),
                candidate: c.clone(),
                rouge_l: rouge_l_pair(c, &s.response),
                average: e.average,
                extrema: e.extrema,
                greedy: e.greedy,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { metrics, samples: corpus.len(), config_digest: config_digest(&model.cfg), metadata, per_sample })
}
