use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ImageSims;
use crate::corpus::{PairLabel, PostId, QuestionPair};

/// Pairs whose image-text and image-caption similarities differ by more than
/// this are listed for manual review.
pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditInput {
    pub pair: QuestionPair,
    pub sims: ImageSims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub query_id: PostId,
    pub candidate_id: PostId,
    pub image_text: f64,
    pub image_caption: f64,
    pub delta: f64,
    pub label: PairLabel,
}

/// Pairs with `delta > threshold`, largest delta first; ties ordered by
/// query id then candidate id.
pub fn delta_audit(inputs: &[AuditInput], threshold: f64) -> Vec<DeltaEntry> {
    let mut out: Vec<DeltaEntry> = inputs
        .iter()
        .filter_map(|input| {
            let delta = input.sims.delta();
            (delta > threshold).then_some(DeltaEntry {
                query_id: input.pair.query_id,
                candidate_id: input.pair.candidate_id,
                image_text: input.sims.image_text,
                image_caption: input.sims.image_caption,
                delta,
                label: input.pair.label,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then(a.query_id.cmp(&b.query_id))
            .then(a.candidate_id.cmp(&b.candidate_id))
    });
    out
}

pub fn write_delta_audit_csv<W: Write>(entries: &[DeltaEntry], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "query_id",
        "candidate_id",
        "image_text",
        "image_caption",
        "delta",
        "label",
    ])?;
    for e in entries {
        let label = match e.label {
            PairLabel::Duplicate => "duplicate",
            PairLabel::NonDuplicate => "non_duplicate",
        };
        w.write_record([
            e.query_id.to_string(),
            e.candidate_id.to_string(),
            format!("{:.6}", e.image_text),
            format!("{:.6}", e.image_caption),
            format!("{:.6}", e.delta),
            label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(q: PostId, it: f64, ic: f64) -> AuditInput {
        AuditInput {
            pair: QuestionPair {
                query_id: q,
                candidate_id: q + 100,
                label: PairLabel::Duplicate,
            },
            sims: ImageSims {
                image_text: it,
                image_caption: ic,
            },
        }
    }

    #[test]
    fn threshold_one_is_empty() {
        let inputs = [input(1, 1.0, 0.0), input(2, 0.0, 1.0)];
        assert!(delta_audit(&inputs, 1.0).is_empty());
    }

    #[test]
    fn strict_threshold() {
        let inputs = [input(1, 0.9, 0.2), input(2, 0.5, 0.5), input(3, 0.75, 0.25)];
        let listing = delta_audit(&inputs, 0.5);
        assert_eq!(listing.len(), 1);
        assert_eq!(listing[0].query_id, 1);
    }
}
