use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::FeatureError;

/// Sparse term-weight vector. Entries are sorted by term, strictly positive
/// and finite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(String, f64)>,
}

impl SparseVector {
    /// Drops zero weights. Rejects negative or non-finite weights.
    pub fn new(weights: impl IntoIterator<Item = (String, f64)>) -> Result<Self, FeatureError> {
        let mut map = BTreeMap::new();
        for (term, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(FeatureError::InvalidWeight { term, weight: w });
            }
            if w > 0.0 {
                *map.entry(term).or_insert(0.0) += w;
            }
        }
        Ok(SparseVector {
            entries: map.into_iter().collect(),
        })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn get(&self, term: &str) -> f64 {
        self.entries
            .binary_search_by(|(t, _)| t.as_str().cmp(term))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    /// Merge-join dot product over the sorted supports.
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut sum = 0.0;
        while i < self.entries.len() && j < other.entries.len() {
            let (ta, wa) = &self.entries[i];
            let (tb, wb) = &other.entries[j];
            match ta.cmp(tb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    sum += wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        sum
    }
}

/// Document frequencies frozen from a fitting corpus.
///
/// `weight(term, doc) = tf(term, doc) * ln(1 + N / df(term))` with raw counts;
/// a term never seen while fitting is weighted as if `df = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfIndex {
    n_docs: usize,
    df: HashMap<String, usize>,
}

impl TfIdfIndex {
    pub fn fit<D, T>(docs: impl IntoIterator<Item = D>) -> Result<Self, FeatureError>
    where
        D: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut n_docs = 0usize;
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            n_docs += 1;
            let mut terms: Vec<String> = doc.into_iter().map(|t| t.as_ref().to_string()).collect();
            terms.sort_unstable();
            terms.dedup();
            for term in terms {
                *df.entry(term).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(FeatureError::EmptyCorpus);
        }
        Ok(TfIdfIndex { n_docs, df })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df(term).max(1) as f64;
        (1.0 + self.n_docs as f64 / df).ln()
    }

    pub fn weight(&self, term: &str, doc: &[String]) -> f64 {
        let tf = doc.iter().filter(|t| t.as_str() == term).count();
        tf as f64 * self.idf(term)
    }

    pub fn vectorize<T: AsRef<str>>(&self, doc: &[T]) -> SparseVector {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in doc {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
        let entries = counts
            .into_iter()
            .map(|(term, tf)| (term.to_string(), tf as f64 * self.idf(term)))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        SparseVector { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_doc_idf_is_ln2() {
        let idx = TfIdfIndex::fit([doc(&["a", "b"])]).unwrap();
        assert!((idx.idf("a") - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn absent_term_has_zero_weight_in_doc() {
        let idx = TfIdfIndex::fit([doc(&["a"])]).unwrap();
        assert_eq!(idx.weight("z", &doc(&["a"])), 0.0);
        // unseen terms: idf = ln(1 + N)
        assert!((idx.idf("z") - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn three_doc_hand_table() {
        // d1 = a a b, d2 = b c, d3 = c c c d ; N = 3
        // df: a=1 b=2 c=2 d=1
        // idf: a = ln 4, b = ln 2.5, c = ln 2.5, d = ln 4
        let d1 = doc(&["a", "a", "b"]);
        let d2 = doc(&["b", "c"]);
        let d3 = doc(&["c", "c", "c", "d"]);
        let idx = TfIdfIndex::fit([d1.clone(), d2.clone(), d3.clone()]).unwrap();
        let ln4 = 4f64.ln();
        let ln25 = 2.5f64.ln();
        let table = [
            (&d1, "a", 2.0 * ln4),
            (&d1, "b", ln25),
            (&d1, "c", 0.0),
            (&d2, "b", ln25),
            (&d2, "c", ln25),
            (&d3, "c", 3.0 * ln25),
            (&d3, "d", ln4),
        ];
        for (d, term, expected) in table {
            assert!((idx.weight(term, d) - expected).abs() < 1e-12, "{term}");
            assert!(
                (idx.vectorize(d).get(term) - expected).abs() < 1e-12,
                "{term}"
            );
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            TfIdfIndex::fit(Vec::<Vec<String>>::new()),
            Err(FeatureError::EmptyCorpus)
        ));
    }

    #[test]
    fn sparse_vector_invariants() {
        let v = SparseVector::new([("b".into(), 0.0), ("a".into(), 2.0)]).unwrap();
        assert_eq!(v.len(), 1);
        assert!(SparseVector::new([("a".into(), f64::NAN)]).is_err());
        assert!(SparseVector::new([("a".into(), -1.0)]).is_err());
    }
}
