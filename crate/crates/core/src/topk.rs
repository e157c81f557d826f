//! Deterministic top-k selection.
//!
//! Candidates are ordered by key descending, then by index ascending, so
//! ties always resolve toward the lower coordinate.

use std::cmp::Ordering;

#[inline]
fn rank(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Indices of the `k` largest keys among `candidates`, returned in
/// ascending index order. Returns everything when `k >= len`.
pub fn top_k(mut candidates: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    if k == 0 {
        return Vec::new();
    }
    // -0.0 and 0.0 must tie
    for c in candidates.iter_mut() {
        c.0 += 0.0;
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, rank);
        candidates.truncate(k);
    }
    let mut out: Vec<u32> = candidates.into_iter().map(|(_, i)| i).collect();
    out.sort_unstable();
    out
}

/// `top_k` over a dense key slice, indices being positions in the slice.
pub fn top_k_dense(keys: &[f64], k: usize) -> Vec<u32> {
    top_k(
        keys.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect(),
        k,
    )
}

/// Indices of the `k` smallest keys, ties toward the lower index.
pub fn bottom_k(candidates: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    top_k(candidates.into_iter().map(|(s, i)| (-s, i)).collect(), k)
}
