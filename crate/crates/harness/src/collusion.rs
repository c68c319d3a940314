//! Monte Carlo estimate of the chance that all three guards of one honest
//! node are adversarial.

use std::collections::{BTreeMap, BTreeSet};

use guard_core::crypto::{CryptoError, PermutationKey};
use guard_core::ids::{IdError, NameId, NumericalId};
use guard_core::skipgraph::{JoinError, NeighborEntry, Overlay, TableError};
use guard_core::ttp::{compute_guard_name_ids, resolve_name};
use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

/// Name-id width used when `n` is not a power of two.
pub const SPARSE_WIDTH: usize = 32;

#[derive(Debug, Error)]
pub enum CollusionError {
    #[error("need 0 <= f < n with n >= 4 (n = {n}, f = {f})")]
    Size { n: usize, f: usize },
    #[error("trials must be positive")]
    NoTrials,
    #[error(transparent)]
    Overlay(#[from] JoinError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Id(#[from] IdError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollusionReport {
    pub n: usize,
    pub f: usize,
    pub trials: u64,
    pub hits: u64,
    pub estimate: f64,
    /// f(f-1)(f-2) / (n(n-1)(n-2)): three distinct guards drawn uniformly.
    pub exact: f64,
    /// (f/n)^3, the with-replacement bound.
    pub bound: f64,
    /// Standard error of the estimate at `exact`.
    pub sigma: f64,
    /// Every name id of width m owned by exactly one node.
    pub full_overlay: bool,
    /// Number of distinct guard nodes per trial.
    pub distinct_guards: BTreeMap<usize, u64>,
}

pub fn exact_probability(n: usize, f: usize) -> f64 {
    if f < 3 {
        return 0.0;
    }
    let (n, f) = (n as f64, f as f64);
    f * (f - 1.0) * (f - 2.0) / (n * (n - 1.0) * (n - 2.0))
}

fn overlay_for(n: usize, rng: &mut impl Rng) -> Result<(Overlay, usize, bool), CollusionError> {
    let mut ids = BTreeSet::new();
    while ids.len() < n {
        ids.insert(rng.next_u64() >> 1);
    }
    if n.is_power_of_two() {
        let m = n.trailing_zeros() as usize;
        let members: Vec<(u64, NameId)> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Ok((id, NameId::from_u64(i as u64, m)?)))
            .collect::<Result<_, CollusionError>>()?;
        Ok((Overlay::with_names(&members)?, m, true))
    } else {
        let ids: Vec<u64> = ids.into_iter().collect();
        Ok((Overlay::from_ids(&ids, SPARSE_WIDTH)?, SPARSE_WIDTH, false))
    }
}

/// Draws a fresh permutation key per trial, resolves the guards of a fixed
/// node and marks `f` of the other `n - 1` nodes adversarial uniformly.
pub fn collusion_mc(n: usize, f: usize, trials: u64, rng: &mut impl Rng) -> Result<CollusionReport, CollusionError> {
    if n < 4 || f >= n {
        return Err(CollusionError::Size { n, f });
    }
    if trials == 0 {
        return Err(CollusionError::NoTrials);
    }
    let (overlay, m, full) = overlay_for(n, rng)?;
    let entries: Vec<NeighborEntry> = overlay.entries().cloned().collect();
    let by_name: BTreeMap<u64, usize> =
        entries.iter().enumerate().filter_map(|(i, e)| Some((e.name_id.to_u64()?, i))).collect();
    let subject = 0usize;
    let table = overlay.table(entries[subject].numerical_id).expect("member");
    let (left, right) = (table.left0()?.name_id, table.right0()?.name_id);
    let index_of: BTreeMap<NumericalId, usize> =
        entries.iter().enumerate().map(|(i, e)| (e.numerical_id, i)).collect();

    let mut hits = 0u64;
    let mut distinct_guards = BTreeMap::new();
    let mut adversarial = vec![false; n];
    for _ in 0..trials {
        let key = PermutationKey::random(rng, m)?;
        let names = compute_guard_name_ids(&entries[subject].name_id, &left, &right, &key)?;
        let guards: Vec<usize> = [names.main, names.side_left, names.side_right]
            .iter()
            .map(|name| match name.to_u64().and_then(|v| by_name.get(&v)).filter(|_| full) {
                Some(&i) => i,
                None => index_of[&resolve_name(&entries, name).expect("non-empty").numerical_id],
            })
            .collect();
        let distinct: BTreeSet<usize> = guards.iter().copied().collect();
        *distinct_guards.entry(distinct.len()).or_insert(0) += 1;

        adversarial.iter_mut().for_each(|a| *a = false);
        for i in sample(rng, n - 1, f) {
            adversarial[i + 1] = true;
        }
        if guards.iter().all(|&g| adversarial[g]) {
            hits += 1;
        }
    }
    let exact = exact_probability(n, f);
    Ok(CollusionReport {
        n,
        f,
        trials,
        hits,
        estimate: hits as f64 / trials as f64,
        exact,
        bound: (f as f64 / n as f64).powi(3),
        sigma: (exact * (1.0 - exact) / trials as f64).sqrt(),
        full_overlay: full,
        distinct_guards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn exact_values() {
        assert!((exact_probability(16, 4) - 24.0 / 3360.0).abs() < 1e-15);
        assert_eq!(exact_probability(16, 2), 0.0);
        assert!((exact_probability(16, 15) - 13.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn full_overlay_guards_are_distinct() {
        let r = collusion_mc(16, 4, 2000, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert!(r.full_overlay);
        assert_eq!(r.distinct_guards.get(&3), Some(&2000));
    }

    #[test]
    fn two_adversaries_never_cover_three_guards() {
        let r = collusion_mc(16, 2, 3000, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r.hits, 0);
    }

    #[test]
    fn sparse_overlay_runs() {
        let r = collusion_mc(12, 6, 2000, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert!(!r.full_overlay);
        assert_eq!(r.distinct_guards.values().sum::<u64>(), 2000);
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        assert!(collusion_mc(16, 16, 10, &mut rng).is_err());
        assert!(collusion_mc(16, 3, 0, &mut rng).is_err());
    }
}
