//! Top-k ranking of candidate masters by duplicate probability.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PostId, QuestionPair};
use crate::par::ExecPolicy;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query {0} has no candidates to rank")]
    EmptyPool(PostId),
    #[error("candidate pool lacks the master of queries {0:?}")]
    MissingMasters(Vec<PostId>),
    #[error("cannot score ({query_id}, {candidate_id}): {message}")]
    Score {
        query_id: PostId,
        candidate_id: PostId,
        message: String,
    },
    #[error("rankings line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub candidate_id: PostId,
    pub p: f64,
}

/// Probabilities are non-increasing, ties are in ascending candidate id and
/// `entries.len() <= k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: PostId,
    pub entries: Vec<RankEntry>,
    pub k: usize,
}

impl RankedList {
    /// 1-based rank of `candidate`, if it made the cut.
    pub fn position(&self, candidate: PostId) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.candidate_id == candidate)
            .map(|i| i + 1)
    }

    pub fn candidate_ids(&self) -> impl Iterator<Item = PostId> + '_ {
        self.entries.iter().map(|e| e.candidate_id)
    }
}

/// Scores one (query, candidate) pair with a duplicate probability.
pub trait PairScorer: Sync {
    fn score(&self, query: PostId, candidate: PostId) -> Result<f64, RankError>;
}

impl<F> PairScorer for F
where
    F: Fn(PostId, PostId) -> Result<f64, RankError> + Sync,
{
    fn score(&self, query: PostId, candidate: PostId) -> Result<f64, RankError> {
        self(query, candidate)
    }
}

/// Sort scored candidates into a top-k list.
pub fn top_k(
    query_id: PostId,
    mut scored: Vec<RankEntry>,
    k: usize,
) -> Result<RankedList, RankError> {
    if k == 0 {
        return Err(RankError::InvalidK);
    }
    if let Some(bad) = scored.iter().find(|e| !e.p.is_finite()) {
        return Err(RankError::Score {
            query_id,
            candidate_id: bad.candidate_id,
            message: format!("non-finite probability {}", bad.p),
        });
    }
    scored.sort_by(|a, b| {
        b.p.total_cmp(&a.p)
            .then(a.candidate_id.cmp(&b.candidate_id))
    });
    scored.truncate(k);
    Ok(RankedList {
        query_id,
        entries: scored,
        k,
    })
}

/// Score every distinct candidate other than the query and keep the top k.
pub fn rank<S: PairScorer + ?Sized>(
    query_id: PostId,
    candidates: &[PostId],
    scorer: &S,
    k: usize,
) -> Result<RankedList, RankError> {
    if k == 0 {
        return Err(RankError::InvalidK);
    }
    let pool: BTreeSet<PostId> = candidates
        .iter()
        .copied()
        .filter(|&c| c != query_id)
        .collect();
    if pool.is_empty() {
        return Err(RankError::EmptyPool(query_id));
    }
    let scored = pool
        .into_iter()
        .map(|c| {
            scorer
                .score(query_id, c)
                .map(|p| RankEntry { candidate_id: c, p })
        })
        .collect::<Result<Vec<_>, _>>()?;
    top_k(query_id, scored, k)
}

/// Rank each duplicate pair's query against `pool`, in parallel over queries.
pub fn batch_rank<S: PairScorer + ?Sized>(
    queries: &[QuestionPair],
    pool: &[PostId],
    scorer: &S,
    k: usize,
    exec: &ExecPolicy,
) -> Result<BTreeMap<PostId, RankedList>, RankError> {
    if k == 0 {
        return Err(RankError::InvalidK);
    }
    let members: BTreeSet<PostId> = pool.iter().copied().collect();
    let missing: Vec<PostId> = queries
        .iter()
        .filter(|p| !members.contains(&p.candidate_id))
        .map(|p| p.query_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(RankError::MissingMasters(missing));
    }
    let query_ids: Vec<PostId> = queries
        .iter()
        .map(|p| p.query_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pool: Vec<PostId> = members.into_iter().collect();
    let lists = exec.map(&query_ids, |&q| rank(q, &pool, scorer, k));
    lists
        .into_iter()
        .map(|r| r.map(|l| (l.query_id, l)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RankingLine {
    query_id: PostId,
    top: Vec<RankEntry>,
}

/// One JSON object per query, in ascending query id.
pub fn write_rankings_jsonl<W: Write>(
    rankings: &BTreeMap<PostId, RankedList>,
    mut out: W,
) -> Result<(), RankError> {
    for list in rankings.values() {
        let line = RankingLine {
            query_id: list.query_id,
            top: list.entries.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read rankings written by [`write_rankings_jsonl`]; `k` is the cut-off they
/// were produced with.
pub fn read_rankings_jsonl<R: BufRead>(
    input: R,
    k: usize,
) -> Result<BTreeMap<PostId, RankedList>, RankError> {
    let mut out = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RankingLine = serde_json::from_str(&line).map_err(|e| RankError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if parsed.top.len() > k {
            return Err(RankError::Parse {
                line: i + 1,
                message: format!("{} entries exceed k = {k}", parsed.top.len()),
            });
        }
        out.insert(
            parsed.query_id,
            RankedList {
                query_id: parsed.query_id,
                entries: parsed.top,
                k,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PairLabel;
    use proptest::prelude::*;

    fn table(
        scores: &[(PostId, f64)],
    ) -> impl Fn(PostId, PostId) -> Result<f64, RankError> + Sync + '_ {
        move |_q, c| {
            Ok(scores
                .iter()
                .find(|(id, _)| *id == c)
                .map(|(_, p)| *p)
                .unwrap_or(0.0))
        }
    }

    fn dup(q: PostId, m: PostId) -> QuestionPair {
        QuestionPair {
            query_id: q,
            candidate_id: m,
            label: PairLabel::Duplicate,
        }
    }

    #[test]
    fn single_candidate_is_first() {
        let list = rank(1, &[7], &table(&[]), 5).unwrap();
        assert_eq!(
            list.entries,
            vec![RankEntry {
                candidate_id: 7,
                p: 0.0
            }]
        );
    }

    #[test]
    fn query_is_excluded_and_empty_pool_errors() {
        let list = rank(1, &[1, 2], &table(&[(1, 0.9), (2, 0.1)]), 5).unwrap();
        assert_eq!(list.candidate_ids().collect::<Vec<_>>(), vec![2]);
        assert!(matches!(
            rank(1, &[1], &table(&[]), 5),
            Err(RankError::EmptyPool(1))
        ));
        assert!(matches!(
            rank(1, &[2], &table(&[]), 0),
            Err(RankError::InvalidK)
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let scores = [(5, 0.5), (3, 0.5), (9, 0.7), (1, 0.2)];
        let list = rank(100, &[5, 3, 9, 1], &table(&scores), 3).unwrap();
        assert_eq!(list.candidate_ids().collect::<Vec<_>>(), vec![9, 3, 5]);
        assert_eq!(list.position(5), Some(3));
        assert_eq!(list.position(1), None);
    }

    #[test]
    fn batch_requires_masters() {
        let pairs = [dup(1, 10), dup(2, 20), dup(3, 30)];
        match batch_rank(&pairs, &[10, 40], &table(&[]), 5, &ExecPolicy::Sequential) {
            Err(RankError::MissingMasters(q)) => assert_eq!(q, vec![2, 3]),
            other => panic!("unexpected {other:?}"),
        }
        let out = batch_rank(
            &[dup(1, 10)],
            &[10],
            &table(&[]),
            5,
            &ExecPolicy::Sequential,
        )
        .unwrap();
        assert_eq!(out[&1].position(10), Some(1));
    }

    #[test]
    fn batch_equals_independent_ranks() {
        let scorer = |q: PostId, c: PostId| Ok(((q * 31 + c * 17) % 11) as f64 / 11.0);
        let pairs: Vec<_> = (1..=5).map(|q| dup(q, 100 + q)).collect();
        let pool: Vec<PostId> = (101..=110).collect();
        let batch = batch_rank(&pairs, &pool, &scorer, 4, &ExecPolicy::parallel()).unwrap();
        assert_eq!(
            batch,
            batch_rank(&pairs, &pool, &scorer, 4, &ExecPolicy::Sequential).unwrap()
        );
        for p in &pairs {
            assert_eq!(
                batch[&p.query_id],
                rank(p.query_id, &pool, &scorer, 4).unwrap()
            );
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let scorer = |q: PostId, c: PostId| Ok(((q + c) % 7) as f64 / 7.0);
        let pairs: Vec<_> = (1..=3).map(|q| dup(q, 10 + q)).collect();
        let pool: Vec<PostId> = (11..=16).collect();
        let r = batch_rank(&pairs, &pool, &scorer, 3, &ExecPolicy::Sequential).unwrap();
        let mut buf = Vec::new();
        write_rankings_jsonl(&r, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.starts_with(r#"{"query_id":1,"top":[{"candidate_id":"#));
        assert_eq!(read_rankings_jsonl(buf.as_slice(), 3).unwrap(), r);
        assert!(read_rankings_jsonl(buf.as_slice(), 2).is_err());
    }

    fn pool_scores() -> impl Strategy<Value = Vec<(PostId, f64)>> {
        prop::collection::btree_map(
            1u64..500,
            prop::sample::select(vec![0.1, 0.25, 0.5, 0.75, 0.9]),
            1..60,
        )
        .prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn permutation_invariant(scores in pool_scores(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut ids: Vec<PostId> = scores.iter().map(|s| s.0).collect();
            let a = rank(0, &ids, &table(&scores), 10).unwrap();
            ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, rank(0, &ids, &table(&scores), 10).unwrap());
        }

        #[test]
        fn top_k_is_prefix(scores in pool_scores(), k in 1usize..30) {
            let ids: Vec<PostId> = scores.iter().map(|s| s.0).collect();
            let small = rank(0, &ids, &table(&scores), k).unwrap();
            let big = rank(0, &ids, &table(&scores), k + 1).unwrap();
            prop_assert!(small.entries.len() <= k);
            prop_assert_eq!(&big.entries[..small.entries.len()], &small.entries[..]);
            for w in small.entries.windows(2) {
                prop_assert!(w[0].p > w[1].p || (w[0].p == w[1].p && w[0].candidate_id < w[1].candidate_id));
            }
        }
    }
}
