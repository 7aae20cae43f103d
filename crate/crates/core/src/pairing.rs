//! Ranking candidates by fused score and building preference pairs.

use serde::{Deserialize, Serialize};

use crate::datamodel::float17;
use crate::error::{Error, Result};

/// An ordered (winner, loser) pair of candidate indices within one pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner_idx: usize,
    pub loser_idx: usize,
    /// `fused[winner] - fused[loser]`, never negative.
    #[serde(with = "float17")]
    pub fused_gap: f64,
    /// Pair weight inside the DM-DPO sum. Uniform until the loss assigns it.
    #[serde(with = "float17")]
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    /// Head-to-tail: rank i against rank K-1-i.
    #[default]
    ManyVsMany,
    /// Each of the top K/2 against the single worst.
    ManyVsOne,
    /// The single best against each of the bottom K/2.
    OneVsMany,
}

/// Indices sorted best to worst by fused score; ties go to the lower index.
pub fn rank_candidates(fused: &[f64]) -> Result<Vec<usize>> {
    if fused.len() < 2 {
        return Err(Error::contract(format!("ranking needs K >= 2, got {}", fused.len())));
    }
    if fused.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("ranking input contains NaN"));
    }
    let mut order: Vec<usize> = (0..fused.len()).collect();
    // stable sort: equal scores keep ascending index order
    order.sort_by(|&a, &b| fused[b].total_cmp(&fused[a]));
    Ok(order)
}

fn check_ranking(ranking: &[usize], fused: &[f64]) -> Result<()> {
    let k = ranking.len();
    if k < 2 {
        return Err(Error::contract(format!("pairing needs K >= 2, got {k}")));
    }
    if fused.len() != k {
        return Err(Error::contract(format!(
            "ranking has {k} entries but {} fused scores were given",
            fused.len()
        )));
    }
    let mut seen = vec![false; k];
    for &i in ranking {
        if i >= k || std::mem::replace(&mut seen[i], true) {
            return Err(Error::contract("ranking is not a permutation of 0..K"));
        }
    }
    Ok(())
}

fn make_pair(winner: usize, loser: usize, fused: &[f64], m: usize) -> PreferencePair {
    PreferencePair {
        winner_idx: winner,
        loser_idx: loser,
        fused_gap: (fused[winner] - fused[loser]).max(0.0),
        weight: 1.0 / m as f64,
    }
}

/// Build `floor(K/2)` pairs from a best-to-worst ranking.
pub fn build_pairs(ranking: &[usize], strategy: PairingStrategy, fused: &[f64]) -> Result<Vec<PreferencePair>> {
    check_ranking(ranking, fused)?;
    let k = ranking.len();
    let m = k / 2;
    let best = ranking[0];
    let worst = ranking[k - 1];
    let pairs = (0..m)
        .map(|i| match strategy {
            PairingStrategy::ManyVsMany => make_pair(ranking[i], ranking[k - 1 - i], fused, m),
            PairingStrategy::ManyVsOne => make_pair(ranking[i], worst, fused, m),
            PairingStrategy::OneVsMany => make_pair(best, ranking[k - 1 - i], fused, m),
        })
        .collect();
    Ok(pairs)
}

/// The single best-vs-worst pair used by the single-pair baseline.
pub fn extreme_pair(ranking: &[usize], fused: &[f64]) -> Result<PreferencePair> {
    check_ranking(ranking, fused)?;
    Ok(make_pair(ranking[0], ranking[ranking.len() - 1], fused, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn as_idx(p: &[PreferencePair]) -> Vec<(usize, usize)> {
        p.iter().map(|p| (p.winner_idx, p.loser_idx)).collect()
    }

    #[test]
    fn direct_sort() {
        assert_eq!(rank_candidates(&[0.5, 2.0, -1.0]).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank_candidates(&[0.0; 6]).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(rank_candidates(&[1.0, 2.0, 1.0, 2.0]).unwrap(), vec![1, 3, 0, 2]);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(rank_candidates(&[1.0]).is_err());
        assert!(rank_candidates(&[1.0, f64::NAN]).is_err());
        assert!(build_pairs(&[0, 0], PairingStrategy::ManyVsMany, &[1.0, 1.0]).is_err());
        assert!(build_pairs(&[0, 1], PairingStrategy::ManyVsMany, &[1.0]).is_err());
    }

    #[test]
    fn k16_head_to_tail() {
        let fused: Vec<f64> = (0..16).map(|i| -(i as f64)).collect();
        let ranking = rank_candidates(&fused).unwrap();
        let pairs = build_pairs(&ranking, PairingStrategy::ManyVsMany, &fused).unwrap();
        let expect: Vec<(usize, usize)> = (0..8).map(|i| (i, 15 - i)).collect();
        assert_eq!(as_idx(&pairs), expect);
        assert!(pairs.iter().all(|p| p.weight == 0.125));
    }

    #[test]
    fn k4_strategies() {
        // ranked [c1, c2, c3, c4] = indices [2, 0, 3, 1]
        let fused = [3.0, 1.0, 4.0, 2.0];
        let r = rank_candidates(&fused).unwrap();
        assert_eq!(r, vec![2, 0, 3, 1]);
        let mm = build_pairs(&r, PairingStrategy::ManyVsMany, &fused).unwrap();
        assert_eq!(as_idx(&mm), vec![(2, 1), (0, 3)]);
        let om = build_pairs(&r, PairingStrategy::OneVsMany, &fused).unwrap();
        assert_eq!(as_idx(&om), vec![(2, 1), (2, 3)]);
        let mo = build_pairs(&r, PairingStrategy::ManyVsOne, &fused).unwrap();
        assert_eq!(as_idx(&mo), vec![(2, 1), (0, 1)]);
        assert_eq!(mm[0].fused_gap, 3.0);
    }

    #[test]
    fn odd_k_leaves_middle_out() {
        let fused = [5.0, 4.0, 3.0, 2.0, 1.0];
        let r = rank_candidates(&fused).unwrap();
        let pairs = build_pairs(&r, PairingStrategy::ManyVsMany, &fused).unwrap();
        assert_eq!(as_idx(&pairs), vec![(0, 4), (1, 3)]);
    }

    #[test]
    fn extreme_pair_is_best_vs_worst() {
        let fused = [0.1, 0.9, -0.3, 0.2];
        let r = rank_candidates(&fused).unwrap();
        let p = extreme_pair(&r, &fused).unwrap();
        assert_eq!((p.winner_idx, p.loser_idx, p.weight), (1, 2, 1.0));
    }

    proptest! {
        #[test]
        fn ranking_matches_reference_sort(v in proptest::collection::vec(-5i32..5, 2..30)) {
            // coarse integer scores force plenty of ties
            let fused: Vec<f64> = v.iter().map(|&x| x as f64 * 0.5).collect();
            let mut oracle: Vec<(i64, usize)> = v.iter().enumerate().map(|(i, &x)| (-(x as i64), i)).collect();
            oracle.sort();
            let expect: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
            prop_assert_eq!(rank_candidates(&fused).unwrap(), expect);
        }

        #[test]
        fn pair_counts_gaps_and_cover(v in proptest::collection::vec(-10f64..10.0, 2..33)) {
            let r = rank_candidates(&v).unwrap();
            for s in [PairingStrategy::ManyVsMany, PairingStrategy::ManyVsOne, PairingStrategy::OneVsMany] {
                let pairs = build_pairs(&r, s, &v).unwrap();
                prop_assert_eq!(pairs.len(), v.len() / 2);
                for p in &pairs {
                    prop_assert!(p.winner_idx != p.loser_idx);
                    prop_assert!(p.fused_gap >= 0.0);
                    prop_assert_eq!(p.fused_gap, v[p.winner_idx] - v[p.loser_idx]);
                }
            }
            if v.len() % 2 == 0 {
                let pairs = build_pairs(&r, PairingStrategy::ManyVsMany, &v).unwrap();
                let mut count = vec![0usize; v.len()];
                for p in &pairs {
                    count[p.winner_idx] += 1;
                    count[p.loser_idx] += 1;
                }
                prop_assert!(count.iter().all(|&c| c == 1));
            }
        }
    }
}
