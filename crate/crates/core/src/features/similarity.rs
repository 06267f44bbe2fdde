use std::collections::BTreeSet;

use super::SparseVector;

/// Cosine of the angle between two non-negative vectors; 0 when either is
/// the zero vector.
pub fn cosine(u: &SparseVector, v: &SparseVector) -> f64 {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (u.dot(v) / (nu * nv)).clamp(0.0, 1.0)
}

/// Shared terms over the size of the smaller set.
pub fn term_overlap<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let smaller = a.len().min(b.len());
    if smaller == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / smaller as f64
}

/// Jaccard coefficient; 0 when both sets are empty.
pub fn entity_overlap<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Fusion of image-text and image-caption similarity: the larger of the two.
pub fn combined_image_similarity(image_text: f64, image_caption: f64) -> f64 {
    image_text.max(image_caption)
}

/// Disagreement between the two image similarities.
pub fn similarity_delta(image_text: f64, image_caption: f64) -> f64 {
    (image_text - image_caption).abs()
}
