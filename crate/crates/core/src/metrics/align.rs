//! Minimum-edit alignment of truth and prediction sequences.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AlignOp {
    /// Positions in the truth and prediction sequences.
    Match(usize, usize),
    Substitute(usize, usize),
    /// Position in the prediction.
    Insert(usize),
    /// Position in the truth.
    Delete(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AlignmentResult {
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
    pub ops: Vec<AlignOp>,
    pub matches: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl AlignmentResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost edit alignment. On equal-cost tracebacks the preference is
/// match, then substitution, then deletion, then insertion.
pub fn align(truth: &[usize], pred: &[usize]) -> AlignmentResult {
    let (n, m) = (truth.len(), pred.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(truth[i - 1] != pred[j - 1]);
            let up = cost[(i - 1) * w + j] + 1;
            let left = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(up).min(left);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = truth[i - 1] == pred[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same { AlignOp::Match(i - 1, j - 1) } else { AlignOp::Substitute(i - 1, j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            ops.push(AlignOp::Delete(i - 1));
            i -= 1;
        } else {
            ops.push(AlignOp::Insert(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    let mut r = AlignmentResult {
        truth: truth.to_vec(),
        pred: pred.to_vec(),
        ..Default::default()
    };
    for op in &ops {
        match op {
            AlignOp::Match(..) => r.matches += 1,
            AlignOp::Substitute(..) => r.substitutions += 1,
            AlignOp::Insert(_) => r.insertions += 1,
            AlignOp::Delete(_) => r.deletions += 1,
        }
    }
    r.ops = ops;
    r
}

/// `(S + I + D) / max(|truth|, 1)`.
pub fn per(ar: &AlignmentResult) -> f64 {
    ar.errors() as f64 / ar.truth.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-row Levenshtein distance.
    fn edit_distance(a: &[usize], b: &[usize]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn worked_examples() {
        let r = align(&[0, 1, 2], &[0, 1, 2]);
        assert_eq!((r.matches, r.substitutions, r.insertions, r.deletions), (3, 0, 0, 0));
        assert_eq!(per(&r), 0.0);
        let r = align(&[0, 1, 2], &[0, 1, 3]);
        assert_eq!((r.matches, r.substitutions), (2, 1));
        assert!((per(&r) - 1.0 / 3.0).abs() < 1e-15);
        let r = align(&[0, 1, 2], &[]);
        assert_eq!(r.deletions, 3);
        let r = align(&[], &[4, 5]);
        assert_eq!(per(&r), 2.0);
    }

    #[test]
    fn ties_prefer_substitution_over_gaps() {
        let r = align(&[0], &[1]);
        assert_eq!(r.ops, vec![AlignOp::Substitute(0, 0)]);
        let r = align(&[0, 1], &[1]);
        assert_eq!(r.ops, vec![AlignOp::Delete(0), AlignOp::Match(1, 0)]);
    }

    proptest! {
        #[test]
        fn cost_matches_edit_distance(
            a in proptest::collection::vec(0usize..10, 0..=12),
            b in proptest::collection::vec(0usize..10, 0..=12),
        ) {
            let r = align(&a, &b);
            prop_assert_eq!(r.errors(), edit_distance(&a, &b));
            prop_assert_eq!(r.matches + r.substitutions + r.deletions, a.len());
            prop_assert_eq!(r.matches + r.substitutions + r.insertions, b.len());
            prop_assert_eq!(per(&align(&a, &a)), 0.0);
        }
    }
}
