//! Minimum-cost assignment between `K` outputs and `K` targets.

use ndarray::Array2;

/// Largest `K` solved by enumerating all `K!` permutations.
pub const EXHAUSTIVE_MAX: usize = 4;

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        // next lexicographic permutation
        let Some(i) = (1..k).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..k).rev().find(|&j| current[j] > current[i - 1]).expect("pivot exists");
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

/// Sum of `cost[i, perm[i]]` in row order.
pub fn permutation_cost(cost: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

/// `perm[i]` is the column assigned to row `i`; minimizes the summed cost.
///
/// Exhaustive search for `K ≤ 4` (first permutation in lexicographic order
/// wins ties), Hungarian algorithm above that.
pub fn best_permutation(cost: &Array2<f64>) -> Vec<usize> {
    let k = cost.nrows();
    assert_eq!(k, cost.ncols(), "assignment cost must be square");
    if k <= EXHAUSTIVE_MAX {
        let mut best = (f64::INFINITY, Vec::new());
        for p in permutations(k) {
            let c = permutation_cost(cost, &p);
            if c < best.0 || best.1.is_empty() {
                best = (c, p);
            }
        }
        best.1
    } else {
        hungarian(cost)
    }
}

/// O(K³) Hungarian algorithm (shortest augmenting paths with potentials).
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(
            permutations(3),
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(permutations(5).len(), 120);
    }

    #[test]
    fn swapped_diagonal() {
        let cost = Array2::from_shape_vec((2, 2), vec![5.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(best_permutation(&cost), vec![1, 0]);
        assert_eq!(hungarian(&cost), vec![1, 0]);
    }

    proptest! {
        #[test]
        fn hungarian_matches_enumeration(k in 1usize..7, seed in proptest::collection::vec(0.0f64..10.0, 36)) {
            let cost = Array2::from_shape_fn((k, k), |(i, j)| seed[i * 6 + j]);
            let brute = permutations(k)
                .into_iter()
                .map(|p| permutation_cost(&cost, &p))
                .fold(f64::INFINITY, f64::min);
            let h = hungarian(&cost);
            prop_assert!((permutation_cost(&cost, &h) - brute).abs() < 1e-9);
            let mut seen = h.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
        }
    }
}
