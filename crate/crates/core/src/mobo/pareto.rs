//! Pareto dominance under maximization.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// `a` dominates `b`: at least as good everywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Weak dominance: at least as good everywhere.
pub fn weakly_dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub points: Vec<Vec<f64>>,
    /// Position of each point in the archive it was filtered from.
    pub indices: Vec<usize>,
}

impl ParetoFront {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_objectives(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }
}

fn lexicographic_desc(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.partial_cmp(x).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Maximal non-dominated subset of `ys`, ordered by the first objective
/// descending (ties by the next). Duplicates keep the lowest index.
pub fn pareto_filter(ys: &[Vec<f64>]) -> ParetoFront {
    let mut order: Vec<usize> = (0..ys.len()).collect();
    order.sort_by(|&i, &j| lexicographic_desc(&ys[i], &ys[j]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        // anything that could dominate or duplicate `i` sorts before it
        if kept.iter().any(|&k| weakly_dominates(&ys[k], &ys[i])) {
            continue;
        }
        kept.push(i);
    }
    ParetoFront {
        points: kept.iter().map(|&i| ys[i].clone()).collect(),
        indices: kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spec_examples() {
        let ys = vec![
            vec![1.0, 2.0],
            vec![2.0, 1.0],
            vec![1.5, 1.5],
            vec![0.5, 0.5],
        ];
        let f = pareto_filter(&ys);
        assert_eq!(
            f.points,
            vec![vec![2.0, 1.0], vec![1.5, 1.5], vec![1.0, 2.0]]
        );
        assert_eq!(f.indices, vec![1, 2, 0]);

        let single = pareto_filter(&[vec![0.3, 0.1]]);
        assert_eq!(single.indices, vec![0]);

        let dup = pareto_filter(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(dup.indices, vec![1]);
        assert!(pareto_filter(&[]).is_empty());
    }

    fn vecs(k: usize) -> impl proptest::strategy::Strategy<Value = Vec<Vec<f64>>> {
        // coarse grid values make ties and duplicates common
        prop::collection::vec(
            prop::collection::vec((0i32..5).prop_map(|v| v as f64), k),
            1..25,
        )
    }

    proptest! {
        #[test]
        fn dominance_is_a_strict_partial_order(ys in vecs(3)) {
            for a in &ys {
                prop_assert!(!dominates(a, a));
                for b in &ys {
                    if dominates(a, b) { prop_assert!(!dominates(b, a)); }
                    for c in &ys {
                        if dominates(a, b) && dominates(b, c) { prop_assert!(dominates(a, c)); }
                    }
                }
            }
        }

        #[test]
        fn front_matches_pairwise_definition(ys in vecs(2)) {
            let f = pareto_filter(&ys);
            for (i, y) in ys.iter().enumerate() {
                let dominated = ys.iter().any(|o| dominates(o, y));
                let first_copy = ys.iter().position(|o| o == y) == Some(i);
                prop_assert_eq!(f.indices.contains(&i), !dominated && first_copy);
                prop_assert!(f.points.iter().any(|p| weakly_dominates(p, y)));
            }
            for a in &f.points {
                for b in &f.points {
                    prop_assert!(!dominates(a, b));
                }
            }
            for w in f.points.windows(2) {
                prop_assert!(lexicographic_desc(&w[0], &w[1]) != Ordering::Greater);
            }
        }
    }
}
