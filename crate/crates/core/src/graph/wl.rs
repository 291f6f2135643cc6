use sha2::{Digest, Sha256};
use std::fmt;

use super::LabeledGraph;

/// 256-bit Weisfeiler-Lehman graph digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WlHash(pub [u8; 32]);

impl fmt::Debug for WlHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WlHash({self})")
    }
}

impl fmt::Display for WlHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn combine(seed: u64, value: u64) -> u64 {
    mix(seed ^ value.wrapping_add(0x517c_c1b7_2722_0a95).rotate_left(17))
}

/// Final per-node colors after `rounds` refinement rounds.
pub(crate) fn refine_colors(graph: &LabeledGraph, rounds: usize) -> Vec<Vec<u64>> {
    let adj = graph.adjacency();
    let mut colors: Vec<u64> = graph
        .labels()
        .iter()
        .map(|&l| mix(l as u64 + 1))
        .collect();
    let mut history = vec![colors.clone()];
    let mut scratch = Vec::new();
    for _ in 0..rounds {
        let next: Vec<u64> = (0..graph.len())
            .map(|i| {
                scratch.clear();
                scratch.extend(
                    adj[i]
                        .iter()
                        .map(|&(j, order)| combine(order as u64, colors[j])),
                );
                scratch.sort_unstable();
                scratch
                    .iter()
                    .fold(combine(0xc0105, colors[i]), |h, &c| combine(h, c))
            })
            .collect();
        colors = next;
        history.push(colors.clone());
    }
    history
}

/// Permutation-invariant digest of labels, bond orders and connectivity.
///
/// Runs `max(M, 1)` refinement rounds and hashes the sorted color multiset of
/// every round. Coordinates are ignored.
pub fn wl_hash(graph: &LabeledGraph) -> WlHash {
    let history = refine_colors(graph, graph.len().max(1));
    let mut hasher = Sha256::new();
    hasher.update((graph.len() as u64).to_le_bytes());
    hasher.update((graph.edges().len() as u64).to_le_bytes());
    for round in history {
        let mut sorted = round;
        sorted.sort_unstable();
        for c in sorted {
            hasher.update(c.to_le_bytes());
        }
    }
    WlHash(hasher.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(rng: &mut ChaCha8Rng) -> LabeledGraph {
        let m = rng.gen_range(1..12);
        let labels = (0..m).map(|_| rng.gen_range(0..4)).collect();
        let mut edges = Vec::new();
        for b in 1..m {
            edges.push((rng.gen_range(0..b), b, rng.gen_range(1..=3)));
        }
        for _ in 0..rng.gen_range(0..3) {
            let a = rng.gen_range(0..m);
            let b = rng.gen_range(0..m);
            if a != b && !edges.iter().any(|&(x, y, _)| (x, y) == (a.min(b), a.max(b))) {
                edges.push((a.min(b), a.max(b), 1));
            }
        }
        LabeledGraph::new(labels, edges, None).unwrap()
    }

    #[test]
    fn invariant_under_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mismatches = 0;
        for _ in 0..1000 {
            let g = random_graph(&mut rng);
            let mut perm: Vec<usize> = (0..g.len()).collect();
            perm.shuffle(&mut rng);
            if wl_hash(&g) != wl_hash(&g.permuted(&perm)) {
                mismatches += 1;
            }
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn bond_order_changes_digest() {
        let a = LabeledGraph::new(vec![0, 0, 1], [(0, 1, 1), (1, 2, 1)], None).unwrap();
        let b = LabeledGraph::new(vec![0, 0, 1], [(0, 1, 1), (1, 2, 2)], None).unwrap();
        assert_ne!(wl_hash(&a), wl_hash(&b));
    }

    #[test]
    fn single_node_labels_differ() {
        let c = LabeledGraph::new(vec![0], [], None).unwrap();
        let n = LabeledGraph::new(vec![2], [], None).unwrap();
        assert_ne!(wl_hash(&c), wl_hash(&n));
    }
}
