use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Sparse vector as `(term id, weight)` pairs sorted by term id.
pub type SparseVec = Vec<(usize, f64)>;

/// Lowercases, folds to ASCII, splits on non-alphanumerics and drops
/// tokens shorter than two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    deunicode::deunicode(text)
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| t.len() >= 2)
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfIndex {
    /// Sorted vocabulary.
    pub vocab: Vec<String>,
    pub df: Vec<usize>,
    pub idf: Vec<f64>,
    pub n_docs: usize,
    /// L2-normalized document vectors (empty for documents without tokens).
    pub vectors: Vec<SparseVec>,
}

fn term_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    tf
}

fn normalize(mut v: SparseVec) -> SparseVec {
    let n = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|(_, w)| *w /= n);
    }
    v
}

impl TfidfIndex {
    /// Raw term counts weighted by `ln((1 + N) / (1 + df)) + 1`.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
        let vocab: Vec<String> = docs
            .iter()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if vocab.is_empty() {
            return Err(Error::Empty("tokens in the utterance texts"));
        }
        let mut df = vec![0; vocab.len()];
        for doc in &docs {
            for t in doc.iter().collect::<BTreeSet<_>>() {
                df[vocab.binary_search(t).expect("term in vocabulary")] += 1;
            }
        }
        let n_docs = docs.len();
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1 + n_docs) as f64 / (1 + d) as f64).ln() + 1.0)
            .collect();
        let mut index = Self {
            vocab,
            df,
            idf,
            n_docs,
            vectors: Vec::new(),
        };
        index.vectors = docs.iter().map(|d| index.weigh(d)).collect();
        Ok(index)
    }

    fn weigh(&self, tokens: &[String]) -> SparseVec {
        let v = term_counts(tokens)
            .into_iter()
            .filter_map(|(t, c)| {
                self.vocab
                    .binary_search_by(|x| x.as_str().cmp(t))
                    .ok()
                    .map(|id| (id, c as f64 * self.idf[id]))
            })
            .collect();
        normalize(v)
    }

    /// Vector of an arbitrary text; unseen terms are ignored.
    pub fn vectorize(&self, text: &str) -> SparseVec {
        self.weigh(&tokenize(text))
    }
}

/// Dot product of two sorted sparse vectors (cosine for normalized input).
pub fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Save the Children, a-OK? Café 42!"), ["save", "the", "children", "ok", "cafe", "42"]);
        assert!(tokenize("a b c").is_empty());
    }

    #[test]
    fn single_document() {
        let idx = TfidfIndex::build(&["apple apple pear"]).unwrap();
        assert!(idx.idf.iter().all(|&v| v == idx.idf[0]));
        let v = &idx.vectors[0];
        let n = 5f64.sqrt();
        assert!((v[0].1 - 2.0 / n).abs() < 1e-12 && (v[1].1 - 1.0 / n).abs() < 1e-12);
    }

    #[test]
    fn disjoint_documents_are_orthogonal() {
        let idx = TfidfIndex::build(&["red green", "blue yellow"]).unwrap();
        assert_eq!(sparse_dot(&idx.vectors[0], &idx.vectors[1]), 0.0);
    }

    #[test]
    fn hand_computed_weights() {
        let idx = TfidfIndex::build(&["cat dog", "cat cat fish", "bird"]).unwrap();
        assert_eq!(idx.vocab, ["bird", "cat", "dog", "fish"]);
        assert_eq!(idx.df, [1, 2, 1, 1]);
        let rare = (4.0f64 / 2.0).ln() + 1.0;
        let common = (4.0f64 / 3.0).ln() + 1.0;
        // doc 1: cat x2, fish x1
        let (wc, wf) = (2.0 * common, rare);
        let n = (wc * wc + wf * wf).sqrt();
        assert_eq!(idx.vectors[1].len(), 2);
        assert!((idx.vectors[1][0].1 - wc / n).abs() < 1e-12);
        assert!((idx.vectors[1][1].1 - wf / n).abs() < 1e-12);
    }

    #[test]
    fn empty_texts_are_rejected() {
        assert!(TfidfIndex::build(&["", "!"]).is_err());
    }
}
