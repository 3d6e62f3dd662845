//! Deterministic farthest-point sampling over cell means.

use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::Vec3;

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point ordering of all points, seeded at index 0 (the
/// lexicographically smallest cell in canonical order). Ties resolve to the
/// lowest index, so the ordering is unique.
pub fn farthest_point_order(points: &[Vec3]) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len();
    let mut order = Vec::with_capacity(n);
    let mut selected = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];

    let mut current = 0usize;
    order.push(current);
    selected[current] = true;

    for _ in 1..n {
        let last = points[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(points[i], last);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        current = best;
        order.push(current);
        selected[current] = true;
    }
    order
}

/// First `m` indices of the farthest-point ordering; when m exceeds the point
/// count the ordering repeats cyclically.
pub fn select_indices(points: &[Vec3], m: usize) -> Vec<usize> {
    let order = farthest_point_order(points);
    if order.is_empty() {
        return Vec::new();
    }
    (0..m).map(|i| order[i % order.len()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_three_points_m2() {
        // Seeded at x = 0; farthest remaining is x = 2.
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(select_indices(&pts, 2), vec![0, 2]);
    }

    #[test]
    fn exhaustive_selection_is_a_permutation() {
        let pts: Vec<[f64; 3]> = (0..7).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
        let mut sel = select_indices(&pts, 7);
        sel.sort_unstable();
        assert_eq!(sel, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn oversampling_cycles_deterministically() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(select_indices(&pts, 5), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn single_point_selection() {
        assert_eq!(select_indices(&[[1.0, 2.0, 3.0]], 1), vec![0]);
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        // After 0 and the first copy of (1,0,0), the remaining duplicate has
        // distance 0; it is still selected (lowest index among remaining).
        assert_eq!(farthest_point_order(&pts), vec![0, 1, 2]);
    }
}
