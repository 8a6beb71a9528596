//! Corpus quality metrics for synthetic notes: Self-BLEU (diversity),
//! perplexity under an additive-k n-gram model (fluency), unigram entropy
//! (lexical richness) and ontology-based medical plausibility.

use std::collections::HashMap;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};

/// Floor used for zero n-gram matches in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const DEFAULT_MAX_N: usize = 4;
pub const DEFAULT_LM_ORDER: usize = 2;
pub const DEFAULT_SMOOTHING_K: f64 = 0.1;
pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QualityError {
    #[error("Self-BLEU needs at least 2 notes, got {0}")]
    TooFewNotes(usize),
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("ontology contains no terms")]
    EmptyOntology,
    #[error("invalid language model parameters: {0}")]
    InvalidModel(String),
}

/// Lowercase, split on whitespace, and emit every punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word).to_lowercase());
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word.to_lowercase());
        }
    }
    tokens
}

/// Token-id view of a corpus; ids are assigned in first-seen order.
struct Interned {
    notes: Vec<Vec<u32>>,
}

fn intern<S: AsRef<str>>(corpus: &[S]) -> Interned {
    let mut ids: HashMap<String, u32> = HashMap::new();
    let notes = corpus
        .iter()
        .map(|t| {
            tokenize(t.as_ref())
                .into_iter()
                .map(|tok| {
                    let next = ids.len() as u32;
                    *ids.entry(tok).or_insert(next)
                })
                .collect()
        })
        .collect();
    Interned { notes }
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], u32> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Largest and second-largest per-note count of one n-gram.
#[derive(Clone, Copy, Default)]
struct TopTwo {
    best: u32,
    best_note: usize,
    second: u32,
}

impl TopTwo {
    fn offer(&mut self, count: u32, note: usize) {
        if count > self.best {
            self.second = self.best;
            self.best = count;
            self.best_note = note;
        } else if count > self.second {
            self.second = count;
        }
    }

    /// Max count over every note except `note`.
    fn excluding(&self, note: usize) -> u32 {
        if self.best_note == note {
            self.second
        } else {
            self.best
        }
    }
}

/// BLEU from clipped counts, hypothesis length and closest reference length.
fn bleu_from_parts(clipped: &[(u32, u32)], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || clipped.is_empty() {
        return 0.0;
    }
    let log_sum: f64 = clipped
        .iter()
        .map(|&(matched, total)| {
            let p = if matched > 0 {
                matched as f64 / total as f64
            } else {
                BLEU_EPSILON / total as f64
            };
            p.ln()
        })
        .sum();
    let geo = (log_sum / clipped.len() as f64).exp();
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * geo
}

/// Reference length closest to `hyp_len`, preferring the shorter on ties.
fn closest_length(hyp_len: usize, lengths: impl Iterator<Item = usize>) -> usize {
    lengths.min_by_key(|&r| (r.abs_diff(hyp_len), r)).unwrap_or(0)
}

/// Mean BLEU of each note against all other notes as references.
pub fn self_bleu<S: AsRef<str> + Sync>(corpus: &[S], max_n: usize, exec: Execution) -> Result<f64, QualityError> {
    if corpus.len() < 2 {
        return Err(QualityError::TooFewNotes(corpus.len()));
    }
    let interned = intern(corpus);
    let notes = &interned.notes;
    let counts: Vec<Vec<HashMap<&[u32], u32>>> = notes
        .iter()
        .map(|t| (1..=max_n).map(|n| ngram_counts(t, n)).collect())
        .collect();

    // Per order: n-gram -> top two per-note counts, so "max over the other
    // notes" is O(1).
    let mut tops: Vec<HashMap<&[u32], TopTwo>> = vec![HashMap::new(); max_n];
    for (note, per_order) in counts.iter().enumerate() {
        for (o, grams) in per_order.iter().enumerate() {
            for (g, &c) in grams {
                tops[o].entry(*g).or_default().offer(c, note);
            }
        }
    }

    let scores = exec::map_range(exec, notes.len(), |i| {
        let hyp_len = notes[i].len();
        let orders = max_n.min(hyp_len);
        let clipped: Vec<(u32, u32)> = (0..orders)
            .map(|o| {
                let matched = counts[i][o].iter().map(|(g, &c)| c.min(tops[o][g].excluding(i))).sum();
                (matched, (hyp_len - o) as u32)
            })
            .collect();
        let ref_len = closest_length(
            hyp_len,
            notes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t.len()),
        );
        bleu_from_parts(&clipped, hyp_len, ref_len)
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Shannon entropy in bits of the pooled unigram distribution.
pub fn corpus_entropy<S: AsRef<str>>(corpus: &[S]) -> Result<f64, QualityError> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for note in corpus {
        for tok in tokenize(note.as_ref()) {
            *counts.entry(tok).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(QualityError::EmptyCorpus);
    }
    let total = total as f64;
    let h = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

const BOS: u32 = u32::MAX;

/// Additive-k smoothed n-gram language model over [`tokenize`] tokens.
///
/// Contexts are padded with a start symbol; unseen tokens map to
/// [`UNKNOWN_TOKEN`], which is part of the vocabulary with zero count.
#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    smoothing_k: f64,
    vocab: HashMap<String, u32>,
    ngram_counts: HashMap<Vec<u32>, u64>,
    context_counts: HashMap<Vec<u32>, u64>,
}

impl NGramLm {
    fn empty(order: usize, smoothing_k: f64) -> Result<Self, QualityError> {
        if order == 0 {
            return Err(QualityError::InvalidModel("order must be at least 1".into()));
        }
        if !(smoothing_k > 0.0 && smoothing_k.is_finite()) {
            return Err(QualityError::InvalidModel(format!(
                "smoothing k must be positive, got {smoothing_k}"
            )));
        }
        let mut vocab = HashMap::new();
        vocab.insert(UNKNOWN_TOKEN.to_string(), 0);
        Ok(Self {
            order,
            smoothing_k,
            vocab,
            ngram_counts: HashMap::new(),
            context_counts: HashMap::new(),
        })
    }

    /// A model with a vocabulary but no counts: every token has probability
    /// `1 / vocab_size`.
    pub fn uniform<S: AsRef<str>>(order: usize, words: &[S], smoothing_k: f64) -> Result<Self, QualityError> {
        let mut lm = Self::empty(order, smoothing_k)?;
        for w in words {
            lm.intern(w.as_ref());
        }
        Ok(lm)
    }

    fn intern(&mut self, tok: &str) -> u32 {
        let next = self.vocab.len() as u32;
        *self.vocab.entry(tok.to_string()).or_insert(next)
    }

    fn lookup(&self, tok: &str) -> u32 {
        self.vocab.get(tok).copied().unwrap_or(0)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Distinct training tokens plus the unknown symbol.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn padded(&self, ids: &[u32]) -> Vec<u32> {
        let mut v = vec![BOS; self.order - 1];
        v.extend_from_slice(ids);
        v
    }

    /// `P(token | context)` where `context` holds the preceding ids
    /// (start-padded, length `order - 1`).
    fn prob_ids(&self, context: &[u32], token: u32) -> f64 {
        let mut key = context.to_vec();
        let ctx = self.context_counts.get(&key).copied().unwrap_or(0) as f64;
        key.push(token);
        let joint = self.ngram_counts.get(&key).copied().unwrap_or(0) as f64;
        (joint + self.smoothing_k) / (ctx + self.smoothing_k * self.vocab.len() as f64)
    }

    /// Probability of `token` after the given preceding tokens (most recent
    /// last); missing history is start padding.
    pub fn prob(&self, history: &[&str], token: &str) -> f64 {
        let ids: Vec<u32> = history.iter().map(|t| self.lookup(t)).collect();
        let padded = self.padded(&ids);
        let ctx = &padded[padded.len() - (self.order - 1)..];
        self.prob_ids(ctx, self.lookup(token))
    }
}

/// Anything that can assign a total natural-log probability to a token
/// sequence; [`perplexity`] is defined over this.
pub trait TokenScorer {
    fn log_prob_sum(&self, tokens: &[String]) -> f64;
}

impl TokenScorer for NGramLm {
    fn log_prob_sum(&self, tokens: &[String]) -> f64 {
        let ids: Vec<u32> = tokens.iter().map(|t| self.lookup(t)).collect();
        let padded = self.padded(&ids);
        padded
            .windows(self.order)
            .map(|w| self.prob_ids(&w[..self.order - 1], w[self.order - 1]).ln())
            .sum()
    }
}

pub fn train_ngram_lm<S: AsRef<str>>(reference: &[S], order: usize, smoothing_k: f64) -> Result<NGramLm, QualityError> {
    let mut lm = NGramLm::empty(order, smoothing_k)?;
    let mut seen_any = false;
    for note in reference {
        let tokens = tokenize(note.as_ref());
        seen_any |= !tokens.is_empty();
        let ids: Vec<u32> = tokens.iter().map(|t| lm.intern(t)).collect();
        let padded = lm.padded(&ids);
        for w in padded.windows(order) {
            *lm.ngram_counts.entry(w.to_vec()).or_insert(0) += 1;
            *lm.context_counts.entry(w[..order - 1].to_vec()).or_insert(0) += 1;
        }
    }
    if !seen_any {
        return Err(QualityError::EmptyCorpus);
    }
    Ok(lm)
}

/// `exp(-(1/N) * sum ln p(token | context))` over every token in the corpus.
pub fn perplexity<S: AsRef<str> + Sync, M: TokenScorer + Sync>(
    corpus: &[S],
    lm: &M,
    exec: Execution,
) -> Result<f64, QualityError> {
    let parts = exec::map_slice(exec, corpus, |note| {
        let tokens = tokenize(note.as_ref());
        (lm.log_prob_sum(&tokens), tokens.len())
    });
    let n: usize = parts.iter().map(|p| p.1).sum();
    if n == 0 {
        return Err(QualityError::EmptyCorpus);
    }
    let log_sum: f64 = parts.iter().map(|p| p.0).sum();
    Ok((-log_sum / n as f64).exp())
}

/// Flat medical term list matched case-insensitively at word boundaries,
/// longest term first.
#[derive(Clone, Debug)]
pub struct Ontology {
    terms: Vec<String>,
    regex: Regex,
}

impl Ontology {
    pub fn new<S: AsRef<str>>(terms: &[S]) -> Result<Self, QualityError> {
        let mut terms: Vec<String> = terms
            .iter()
            .map(|t| t.as_ref().trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        if terms.is_empty() {
            return Err(QualityError::EmptyOntology);
        }
        terms.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        terms.dedup();
        let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
        let alternatives: Vec<String> = terms
            .iter()
            .map(|t| {
                let (l, r) = (word(t.chars().next()), word(t.chars().last()));
                format!(
                    "{}{}{}",
                    if l { r"\b" } else { "" },
                    regex::escape(t),
                    if r { r"\b" } else { "" }
                )
            })
            .collect();
        let regex = RegexBuilder::new(&format!("(?:{})", alternatives.join("|")))
            .case_insensitive(true)
            .size_limit(1 << 28)
            .build()
            .map_err(|e| QualityError::InvalidModel(e.to_string()))?;
        Ok(Self { terms, regex })
    }

    /// One term per line; `#` starts a comment line.
    pub fn from_lines(text: &str) -> Result<Self, QualityError> {
        let terms: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self::new(&terms)
    }

    pub fn bundled() -> Self {
        Self::from_lines(include_str!("../assets/ontology.txt")).expect("bundled ontology is non-empty")
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Matched surface strings in text order.
    pub fn extract_terms<'t>(&self, text: &'t str) -> Vec<&'t str> {
        self.regex.find_iter(text).map(|m| m.as_str()).collect()
    }

    pub fn matches(&self, text: &str) -> bool {
        self.regex.is_match(text)
    }
}

/// Fraction of notes containing at least one ontology term.
pub fn medical_plausibility<S: AsRef<str> + Sync>(
    corpus: &[S],
    ontology: &Ontology,
    exec: Execution,
) -> Result<f64, QualityError> {
    if corpus.is_empty() {
        return Err(QualityError::EmptyCorpus);
    }
    let hits = exec::map_slice(exec, corpus, |n| ontology.matches(n.as_ref()));
    Ok(hits.iter().filter(|h| **h).count() as f64 / corpus.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    #[serde(rename = "bleu")]
    pub self_bleu: f64,
    pub perplexity: f64,
    #[serde(rename = "entropy")]
    pub entropy_bits: f64,
    pub plausibility: f64,
    pub n_notes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct QualityConfig {
    pub max_n: usize,
    pub lm_order: usize,
    pub smoothing_k: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            max_n: DEFAULT_MAX_N,
            lm_order: DEFAULT_LM_ORDER,
            smoothing_k: DEFAULT_SMOOTHING_K,
        }
    }
}

/// All four metrics for `corpus`, with perplexity under an LM trained on
/// `reference`.
pub fn quality_report<S: AsRef<str> + Sync, R: AsRef<str>>(
    corpus: &[S],
    reference: &[R],
    ontology: &Ontology,
    config: QualityConfig,
    exec: Execution,
) -> Result<QualityReport, QualityError> {
    let lm = train_ngram_lm(reference, config.lm_order, config.smoothing_k)?;
    Ok(QualityReport {
        self_bleu: self_bleu(corpus, config.max_n, exec)?,
        perplexity: perplexity(corpus, &lm, exec)?,
        entropy_bits: corpus_entropy(corpus)?,
        plausibility: medical_plausibility(corpus, ontology, exec)?,
        n_notes: corpus.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Cardiac Arrest."), ["cardiac", "arrest", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("BP 120/80, HR:72"),
            ["bp", "120", "/", "80", ",", "hr", ":", "72"]
        );
        let t = tokenize("Dr. O'Neil's 958-780-1849!");
        assert_eq!(tokenize(&t.join(" ")), t);
    }

    #[test]
    fn self_bleu_identical_and_disjoint() {
        let same = [
            "the patient is stable today",
            "the patient is stable today",
            "the patient is stable today",
        ];
        assert_eq!(self_bleu(&same, 4, Execution::Sequential).unwrap(), 1.0);
        let disjoint = ["alpha beta gamma delta", "one two three four"];
        assert!(self_bleu(&disjoint, 4, Execution::Sequential).unwrap() < 0.01);
        assert_eq!(
            self_bleu(&["x"], 4, Execution::Sequential),
            Err(QualityError::TooFewNotes(1))
        );
    }

    #[test]
    fn short_notes_use_available_orders() {
        let same = ["ok", "ok"];
        assert_eq!(self_bleu(&same, 4, Execution::Sequential).unwrap(), 1.0);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(corpus_entropy(&["a a a", "a"]).unwrap(), 0.0);
        let h = corpus_entropy(&["a b c d", "e f g h"]).unwrap();
        assert!((h - 3.0).abs() < 1e-12);
        // a:2 b:1 c:1 -> 1.5 bits
        assert!((corpus_entropy(&["a b a c"]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(corpus_entropy(&["", " "]), Err(QualityError::EmptyCorpus));
    }

    #[test]
    fn uniform_unigram_perplexity_is_vocab_size() {
        let words = ["a", "b", "c", "d"];
        let lm = NGramLm::uniform(1, &words, 0.1).unwrap();
        assert_eq!(lm.vocab_size(), 5);
        let ppl = perplexity(&["a b c d a"], &lm, Execution::Sequential).unwrap();
        assert!((ppl - 5.0).abs() < 1e-9);
    }

    #[test]
    fn bigram_chain_rule_by_hand() {
        // Training "a b a", k = 1, V = {<unk>, a, b} = 3.
        // Bigrams: (<s>,a) (a,b) (b,a); contexts <s>:1 a:1 b:1.
        // "a b": P(a|<s>) = (1+1)/(1+3) = 1/2; P(b|a) = (1+1)/(1+3) = 1/2.
        // ppl = exp(-(ln .5 + ln .5)/2) = 2.
        let lm = train_ngram_lm(&["a b a"], 2, 1.0).unwrap();
        assert!((lm.prob(&[], "a") - 0.5).abs() < 1e-12);
        assert!((lm.prob(&["a"], "b") - 0.5).abs() < 1e-12);
        // Unseen context falls back to uniform 1/3.
        assert!((lm.prob(&["zzz"], "a") - 1.0 / 3.0).abs() < 1e-12);
        let ppl = perplexity(&["a b"], &lm, Execution::Sequential).unwrap();
        assert!((ppl - 2.0).abs() < 1e-12);
    }

    #[test]
    fn self_trained_model_is_no_more_perplexed() {
        let text = ["the patient was admitted with chest pain and shortness of breath"];
        let other = ["quarterly revenue increased while operating margins declined sharply"];
        let own = train_ngram_lm(&text, 2, 0.1).unwrap();
        let foreign = train_ngram_lm(&other, 2, 0.1).unwrap();
        let p_own = perplexity(&text, &own, Execution::Sequential).unwrap();
        let p_foreign = perplexity(&text, &foreign, Execution::Sequential).unwrap();
        assert!(p_own <= p_foreign);
        assert!(p_own >= 1.0);
    }

    #[test]
    fn lm_rejects_bad_parameters() {
        assert!(matches!(
            train_ngram_lm(&["a"], 0, 0.1),
            Err(QualityError::InvalidModel(_))
        ));
        assert!(matches!(
            train_ngram_lm(&["a"], 2, 0.0),
            Err(QualityError::InvalidModel(_))
        ));
        assert_eq!(train_ngram_lm(&[""], 2, 0.1).unwrap_err(), QualityError::EmptyCorpus);
    }

    #[test]
    fn plausibility_cases() {
        let onto = Ontology::new(&["hypertension", "heart failure"]).unwrap();
        let notes = ["History of hypertension.", "HYPERTENSION noted"];
        assert_eq!(medical_plausibility(&notes, &onto, Execution::Sequential).unwrap(), 1.0);
        let none = Ontology::new(&["sepsis"]).unwrap();
        assert_eq!(medical_plausibility(&notes, &none, Execution::Sequential).unwrap(), 0.0);
        assert_eq!(Ontology::new::<&str>(&[]).unwrap_err(), QualityError::EmptyOntology);
        assert_eq!(onto.extract_terms("acute heart failure, heart"), ["heart failure"]);
        // word boundaries
        assert!(!Ontology::new(&["ache"]).unwrap().matches("headache"));
    }
}
