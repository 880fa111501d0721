//! Assignment of shared-pool examples to parties with controlled pairwise
//! overlap.

use super::SimError;
use crate::harness::config::OverlapDesign;
#[cfg(test)]
use crate::harness::config::OverlapGroup;
use crate::icov::OverlapSpec;
use crate::seedmix;
use crate::update::PartyId;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Assign `sizes[j]` pool indices to each party so that realized pairwise
/// overlaps match the design exactly.
///
/// `SharedBlock` gives every party one common block; `Pairwise` realizes an
/// arbitrary symmetric count matrix through dedicated per-pair blocks, so
/// requested counts are met exactly (triple overlaps are zero by
/// construction). The pool order is shuffled from the seed before blocks
/// are carved out.
pub fn generate_overlapping_data(
    pool_size: usize,
    sizes: &[(PartyId, usize)],
    design: &OverlapDesign,
    seed: u64,
) -> Result<BTreeMap<PartyId, Vec<usize>>, SimError> {
    let n = sizes.len();
    if n == 0 {
        return Err(SimError::InvalidSpec("no genuine parties".into()));
    }
    // Shared budget per party, before private remainders.
    let mut shared_per_party: Vec<usize> = vec![0; n];
    match design {
        OverlapDesign::Disjoint => {}
        OverlapDesign::SharedBlock { shared } => {
            for (j, &(id, size)) in sizes.iter().enumerate() {
                if *shared > size {
                    let other = sizes[(j + 1) % n].0;
                    return Err(SimError::InfeasibleDesign { a: id, b: other });
                }
                shared_per_party[j] = *shared;
            }
        }
        OverlapDesign::Pairwise { counts } => {
            if counts.len() != n || counts.iter().any(|r| r.len() != n) {
                return Err(SimError::InvalidSpec(
                    "pairwise overlap matrix shape must be J x J over genuine parties".into(),
                ));
            }
            for a in 0..n {
                for b in 0..n {
                    if counts[a][b] != counts[b][a] {
                        return Err(SimError::InvalidSpec(
                            "pairwise overlap matrix must be symmetric".into(),
                        ));
                    }
                }
            }
            for (a, &(id_a, size_a)) in sizes.iter().enumerate() {
                let mut total = 0usize;
                for (b, &(id_b, _)) in sizes.iter().enumerate() {
                    if a == b {
                        continue;
                    }
                    total += counts[a][b];
                    if total > size_a {
                        return Err(SimError::InfeasibleDesign { a: id_a, b: id_b });
                    }
                }
                shared_per_party[a] = total;
            }
        }
        OverlapDesign::Groups { groups } => {
            for group in groups {
                if group.parties.len() < 2 {
                    return Err(SimError::InvalidSpec(
                        "an overlap group needs at least two parties".into(),
                    ));
                }
                for (gi, id) in group.parties.iter().enumerate() {
                    if group.parties[..gi].contains(id) {
                        return Err(SimError::InvalidSpec(format!(
                            "party {id} listed twice in an overlap group"
                        )));
                    }
                    let Some(j) = sizes.iter().position(|&(p, _)| p == *id) else {
                        return Err(SimError::InvalidSpec(format!(
                            "overlap group names non-genuine party {id}"
                        )));
                    };
                    shared_per_party[j] += group.shared;
                    if shared_per_party[j] > sizes[j].1 {
                        let other = *group.parties.iter().find(|&&q| q != *id).unwrap();
                        return Err(SimError::InfeasibleDesign { a: *id, b: other });
                    }
                }
            }
        }
    }

    // Total distinct examples needed.
    let distinct: usize = match design {
        OverlapDesign::Disjoint => sizes.iter().map(|&(_, s)| s).sum(),
        OverlapDesign::SharedBlock { shared } => {
            sizes.iter().map(|&(_, s)| s - shared).sum::<usize>() + shared
        }
        OverlapDesign::Pairwise { counts } => {
            let pair_total: usize = (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .map(|(a, b)| counts[a][b])
                .sum();
            let private: usize = sizes
                .iter()
                .enumerate()
                .map(|(j, &(_, s))| s - shared_per_party[j])
                .sum();
            pair_total + private
        }
        OverlapDesign::Groups { groups } => {
            let block_total: usize = groups.iter().map(|g| g.shared).sum();
            let private: usize = sizes
                .iter()
                .enumerate()
                .map(|(j, &(_, s))| s - shared_per_party[j])
                .sum();
            block_total + private
        }
    };
    if distinct > pool_size {
        return Err(SimError::PoolTooSmall {
            needed: distinct,
            pool: pool_size,
        });
    }

    let mut order: Vec<usize> = (0..pool_size).collect();
    let mut rng = seedmix::stream(seed, "pool-shuffle", 0, 0);
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut take = |count: usize| -> Vec<usize> {
        let slice = order[cursor..cursor + count].to_vec();
        cursor += count;
        slice
    };

    let mut assignment: BTreeMap<PartyId, Vec<usize>> =
        sizes.iter().map(|&(id, _)| (id, Vec::new())).collect();
    match design {
        OverlapDesign::Disjoint => {}
        OverlapDesign::SharedBlock { shared } => {
            let block = take(*shared);
            for &(id, _) in sizes {
                assignment.get_mut(&id).unwrap().extend_from_slice(&block);
            }
        }
        OverlapDesign::Pairwise { counts } => {
            for a in 0..n {
                for b in (a + 1)..n {
                    let block = take(counts[a][b]);
                    assignment
                        .get_mut(&sizes[a].0)
                        .unwrap()
                        .extend_from_slice(&block);
                    assignment
                        .get_mut(&sizes[b].0)
                        .unwrap()
                        .extend_from_slice(&block);
                }
            }
        }
        OverlapDesign::Groups { groups } => {
            for group in groups {
                let block = take(group.shared);
                for id in &group.parties {
                    assignment.get_mut(id).unwrap().extend_from_slice(&block);
                }
            }
        }
    }
    for (j, &(id, size)) in sizes.iter().enumerate() {
        let private = take(size - shared_per_party[j]);
        assignment.get_mut(&id).unwrap().extend(private);
    }
    Ok(assignment)
}

/// Overlap spec realized by an assignment, ready for the overlap-covariance
/// closed form.
pub fn realized_overlap_spec(
    assignment: &BTreeMap<PartyId, Vec<usize>>,
    sigma_sq: f64,
) -> crate::error::Result<OverlapSpec> {
    let ids: Vec<PartyId> = assignment.keys().copied().collect();
    let sets: Vec<std::collections::BTreeSet<usize>> = ids
        .iter()
        .map(|id| assignment[id].iter().copied().collect())
        .collect();
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let n = ids.len();
    let mut overlaps = vec![vec![0usize; n]; n];
    for a in 0..n {
        overlaps[a][a] = sizes[a];
        for b in (a + 1)..n {
            let count = sets[a].intersection(&sets[b]).count();
            overlaps[a][b] = count;
            overlaps[b][a] = count;
        }
    }
    OverlapSpec::new(ids, sizes, overlaps, sigma_sq)
}
