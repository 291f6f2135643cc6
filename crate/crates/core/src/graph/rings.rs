//! Ring perception, ring-cluster vocabularies and tree decomposition.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AtomAlphabet, Coords, GraphError, LabelMode, LabeledGraph};

/// Smallest set of smallest rings, each as an ordered cycle of node indices.
///
/// Candidates are Horton cycles (shortest path from a root to both ends of an
/// edge); they are taken shortest first and kept when independent over GF(2)
/// until the cyclomatic number is reached.
pub fn ring_basis(graph: &LabeledGraph) -> Vec<Vec<usize>> {
    let m = graph.len();
    let edges = graph.edges();
    if edges.is_empty() {
        return Vec::new();
    }
    let adj = graph.adjacency();
    let components = count_components(&adj);
    let needed = edges.len() + components - m;
    if needed == 0 {
        return Vec::new();
    }
    let edge_index: HashMap<(usize, usize), usize> = edges
        .iter()
        .enumerate()
        .map(|(k, e)| ((e.a, e.b), k))
        .collect();

    let mut candidates: Vec<Vec<usize>> = Vec::new();
    for root in 0..m {
        let parent = bfs_parents(&adj, root);
        for e in edges {
            let (Some(pa), Some(pb)) = (path_to_root(&parent, e.a), path_to_root(&parent, e.b))
            else {
                continue;
            };
            // paths run node -> root; they may only meet at the root
            if pa.iter().filter(|n| pb.contains(n)).count() != 1 {
                continue;
            }
            if pa.len() >= 2 && pa[1] == e.b || pb.len() >= 2 && pb[1] == e.a {
                continue;
            }
            let mut cycle: Vec<usize> = pa.iter().rev().copied().collect();
            cycle.extend(pb[..pb.len() - 1].iter().copied());
            if cycle.len() >= 3 {
                candidates.push(cycle);
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.len().cmp(&b.len()).then_with(|| {
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_unstable();
            sb.sort_unstable();
            sa.cmp(&sb)
        })
    });

    let words = edges.len().div_ceil(64);
    let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut rings = Vec::new();
    for cycle in candidates {
        let mut bits = vec![0u64; words];
        for k in 0..cycle.len() {
            let (u, v) = (cycle[k], cycle[(k + 1) % cycle.len()]);
            let idx = edge_index[&(u.min(v), u.max(v))];
            bits[idx / 64] ^= 1 << (idx % 64);
        }
        let original = bits.clone();
        for (pivot, row) in &basis {
            if bits[pivot / 64] >> (pivot % 64) & 1 == 1 {
                bits.iter_mut().zip(row).for_each(|(a, b)| *a ^= b);
            }
        }
        if let Some(pivot) = first_bit(&bits) {
            for (_, row) in basis.iter_mut() {
                if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                    row.iter_mut().zip(&bits).for_each(|(a, b)| *a ^= b);
                }
            }
            basis.push((pivot, bits));
            drop(original);
            rings.push(cycle);
            if rings.len() == needed {
                break;
            }
        }
    }
    rings
}

fn first_bit(bits: &[u64]) -> Option<usize> {
    bits.iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

fn count_components(adj: &[Vec<(usize, u8)>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

fn bfs_parents(adj: &[Vec<(usize, u8)>], root: usize) -> Vec<Option<usize>> {
    let mut parent = vec![None; adj.len()];
    parent[root] = Some(root);
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &adj[u] {
            if parent[v].is_none() {
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    parent
}

fn path_to_root(parent: &[Option<usize>], mut node: usize) -> Option<Vec<usize>> {
    let mut path = vec![node];
    loop {
        let p = parent[node]?;
        if p == node {
            return Some(path);
        }
        path.push(p);
        node = p;
    }
}

/// Canonical ring descriptor: cyclic sequence of `(label, bond to next)`,
/// minimal over all rotations and reflections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingPattern {
    pub labels: Vec<usize>,
    pub orders: Vec<u8>,
    pub frequency: usize,
    pub hash: u64,
}

impl RingPattern {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    fn key(&self) -> Vec<(usize, u8)> {
        self.labels.iter().copied().zip(self.orders.iter().copied()).collect()
    }

    pub fn describe(&self, alphabet: &AtomAlphabet) -> String {
        let mut s = String::new();
        for (l, o) in self.labels.iter().zip(&self.orders) {
            s.push_str(alphabet.label(*l));
            s.push(match o {
                2 => '=',
                3 => '#',
                _ => '-',
            });
        }
        s
    }
}

/// Rotation/reflection of `ring` that gives the canonical key, returned as the
/// reordered node cycle together with the key.
fn canonical_ring(graph: &LabeledGraph, ring: &[usize]) -> (Vec<usize>, Vec<(usize, u8)>) {
    let n = ring.len();
    let order_of = |u: usize, v: usize| -> u8 {
        graph
            .edges()
            .iter()
            .find(|e| e.a == u.min(v) && e.b == u.max(v))
            .map_or(1, |e| e.order)
    };
    let mut best: Option<(Vec<(usize, u8)>, Vec<usize>)> = None;
    for reflect in [false, true] {
        for start in 0..n {
            let nodes: Vec<usize> = (0..n)
                .map(|k| {
                    if reflect {
                        ring[(start + n - k) % n]
                    } else {
                        ring[(start + k) % n]
                    }
                })
                .collect();
            let key: Vec<(usize, u8)> = (0..n)
                .map(|k| (graph.labels()[nodes[k]], order_of(nodes[k], nodes[(k + 1) % n])))
                .collect();
            if best.as_ref().is_none_or(|(bk, _)| key < *bk) {
                best = Some((key, nodes));
            }
        }
    }
    let (key, nodes) = best.expect("ring has at least three atoms");
    (nodes, key)
}

fn key_hash(key: &[(usize, u8)]) -> u64 {
    let mut h = Sha256::new();
    for (l, o) in key {
        h.update((*l as u64).to_le_bytes());
        h.update([*o]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Up to `cap` ring patterns ordered by descending corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterVocabulary {
    patterns: Vec<RingPattern>,
}

impl ClusterVocabulary {
    pub fn patterns(&self) -> &[RingPattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    fn lookup(&self, key: &[(usize, u8)]) -> Option<usize> {
        let h = key_hash(key);
        self.patterns
            .iter()
            .position(|p| p.hash == h && p.key() == key)
    }
}

/// Counts every SSSR ring of the corpus by canonical pattern and keeps the
/// `cap` most frequent (ties broken by pattern order).
pub fn extract_ring_vocabulary(corpus: &[LabeledGraph], cap: usize) -> ClusterVocabulary {
    let mut counts: HashMap<Vec<(usize, u8)>, usize> = HashMap::new();
    for g in corpus {
        for ring in ring_basis(g) {
            let (_, key) = canonical_ring(g, &ring);
            *counts.entry(key).or_default() += 1;
        }
    }
    let mut entries: Vec<(Vec<(usize, u8)>, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(cap.max(1));
    ClusterVocabulary {
        patterns: entries
            .into_iter()
            .map(|(key, frequency)| RingPattern {
                hash: key_hash(&key),
                labels: key.iter().map(|k| k.0).collect(),
                orders: key.iter().map(|k| k.1).collect(),
                frequency,
            })
            .collect(),
    }
}

/// Atom-level connection between two tree nodes. Positions index into the
/// member list of each tree node (canonical ring order for clusters).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLink {
    pub a: usize,
    pub b: usize,
    /// atoms shared by two fused clusters, as `(pos in a, pos in b)`
    pub shared: Vec<(usize, usize)>,
    /// bonds `(pos in a, pos in b, order)`
    pub bonds: Vec<(usize, usize, u8)>,
}

/// Tree-mode graph plus the attachment record needed to expand it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDecomposition {
    pub tree: LabeledGraph,
    /// original atom indices behind each tree node
    pub members: Vec<Vec<usize>>,
    pub links: Vec<TreeLink>,
}

/// Contracts every SSSR ring into one cluster node labeled
/// `atom_count + vocabulary index`. Non-ring atoms keep their labels; edges
/// touching a cluster get bond order 1 and cluster coordinates are member
/// centroids.
pub fn tree_decompose(
    graph: &LabeledGraph,
    alphabet: &AtomAlphabet,
    vocab: &ClusterVocabulary,
) -> Result<TreeDecomposition, GraphError> {
    if alphabet.mode() != LabelMode::Atom {
        return Err(GraphError::NotAtomMode);
    }
    let atom_count = alphabet.len();
    graph.check_labels(atom_count)?;
    let rings = ring_basis(graph);
    let mut in_ring = vec![false; graph.len()];
    let mut clusters = Vec::with_capacity(rings.len());
    for ring in &rings {
        let (nodes, key) = canonical_ring(graph, ring);
        let idx = vocab.lookup(&key).ok_or_else(|| {
            let p = RingPattern {
                labels: key.iter().map(|k| k.0).collect(),
                orders: key.iter().map(|k| k.1).collect(),
                frequency: 0,
                hash: 0,
            };
            GraphError::RingNotInVocabulary(p.describe(alphabet))
        })?;
        nodes.iter().for_each(|&n| in_ring[n] = true);
        clusters.push((nodes, idx));
    }

    let mut labels = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    // (tree node, position) of each original atom, first owner wins
    let mut owner: Vec<Option<(usize, usize)>> = vec![None; graph.len()];
    for (atom, &l) in graph.labels().iter().enumerate() {
        if !in_ring[atom] {
            owner[atom] = Some((labels.len(), 0));
            labels.push(l);
            members.push(vec![atom]);
        }
    }
    let first_cluster = labels.len();
    for (nodes, idx) in &clusters {
        let t = labels.len();
        for (p, &n) in nodes.iter().enumerate() {
            owner[n].get_or_insert((t, p));
        }
        labels.push(atom_count + idx);
        members.push(nodes.clone());
    }

    let mut links: Vec<TreeLink> = Vec::new();
    let mut link_of = HashMap::new();
    let mut link = |a: usize, b: usize, links: &mut Vec<TreeLink>| -> (usize, bool) {
        let (lo, hi) = (a.min(b), a.max(b));
        let k = *link_of.entry((lo, hi)).or_insert_with(|| {
            links.push(TreeLink {
                a: lo,
                b: hi,
                shared: Vec::new(),
                bonds: Vec::new(),
            });
            links.len() - 1
        });
        (k, a != lo)
    };

    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            let (ti, tj) = (first_cluster + i, first_cluster + j);
            for (pi, n) in clusters[i].0.iter().enumerate() {
                if let Some(pj) = clusters[j].0.iter().position(|x| x == n) {
                    let (k, _) = link(ti, tj, &mut links);
                    links[k].shared.push((pi, pj));
                }
            }
        }
    }

    let ring_bond = |u: usize, v: usize| {
        clusters.iter().any(|(nodes, _)| {
            let n = nodes.len();
            (0..n).any(|k| {
                let (x, y) = (nodes[k], nodes[(k + 1) % n]);
                (x, y) == (u, v) || (y, x) == (u, v)
            })
        })
    };
    for e in graph.edges() {
        if ring_bond(e.a, e.b) {
            continue;
        }
        let (ta, pa) = owner[e.a].expect("every atom has an owner");
        let (tb, pb) = owner[e.b].expect("every atom has an owner");
        if ta == tb {
            continue;
        }
        let (k, swapped) = link(ta, tb, &mut links);
        if swapped {
            links[k].bonds.push((pb, pa, e.order));
        } else {
            links[k].bonds.push((pa, pb, e.order));
        }
    }

    let tree_edges: Vec<(usize, usize, u8)> = links
        .iter()
        .map(|l| {
            let atomic = l.a < first_cluster && l.b < first_cluster;
            let order = if atomic { l.bonds[0].2 } else { 1 };
            (l.a, l.b, order)
        })
        .collect();
    let coords = match graph.coords() {
        Some(c) => {
            let data = members.iter().flat_map(|m| c.centroid(m)).collect();
            Some(Coords::new(c.dim(), data)?)
        }
        None => None,
    };
    Ok(TreeDecomposition {
        tree: LabeledGraph::new(labels, tree_edges, coords)?,
        members,
        links,
    })
}

/// Expands a tree-mode labeling back to atoms using the stored vocabulary
/// substructures and the attachment record of `skeleton`.
///
/// Attachment positions are taken modulo the size of the substituted
/// substructure, so a labeling that differs from the skeleton's still yields a
/// graph. Merged atoms keep the label of the lowest-indexed copy.
pub fn expand_tree(
    labels: &[usize],
    skeleton: &TreeDecomposition,
    atom_count: usize,
    vocab: &ClusterVocabulary,
) -> Result<LabeledGraph, GraphError> {
    if labels.len() != skeleton.members.len() {
        return Err(GraphError::ShapeMismatch(format!(
            "{} labels for {} tree nodes",
            labels.len(),
            skeleton.members.len()
        )));
    }
    let mut atom_labels = Vec::new();
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut bonds: Vec<(usize, usize, u8)> = Vec::new();
    for &l in labels {
        let start = atom_labels.len();
        if l < atom_count {
            atom_labels.push(l);
        } else {
            let p = vocab
                .patterns()
                .get(l - atom_count)
                .ok_or(GraphError::LabelOutOfRange {
                    index: l,
                    size: atom_count + vocab.len(),
                })?;
            let n = p.size();
            atom_labels.extend(&p.labels);
            for k in 0..n {
                bonds.push((start + k, start + (k + 1) % n, p.orders[k]));
            }
        }
        blocks.push((start, atom_labels.len() - start));
    }
    let at = |node: usize, pos: usize| blocks[node].0 + pos % blocks[node].1;

    let mut parent: Vec<usize> = (0..atom_labels.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for link in &skeleton.links {
        for &(pa, pb) in &link.shared {
            let (x, y) = (find(&mut parent, at(link.a, pa)), find(&mut parent, at(link.b, pb)));
            if x != y {
                parent[x.max(y)] = x.min(y);
            }
        }
        for &(pa, pb, order) in &link.bonds {
            bonds.push((at(link.a, pa), at(link.b, pb), order));
        }
    }

    let mut index = vec![usize::MAX; atom_labels.len()];
    let mut final_labels = Vec::new();
    for a in 0..atom_labels.len() {
        let r = find(&mut parent, a);
        if index[r] == usize::MAX {
            index[r] = final_labels.len();
            final_labels.push(atom_labels[r]);
        }
    }
    let mut seen = HashMap::new();
    for (u, v, order) in bonds {
        let (x, y) = (
            index[find(&mut parent, u)],
            index[find(&mut parent, v)],
        );
        if x != y {
            seen.entry((x.min(y), x.max(y))).or_insert(order);
        }
    }
    let mut edges: Vec<(usize, usize, u8)> = seen.into_iter().map(|((a, b), o)| (a, b, o)).collect();
    edges.sort_unstable();
    LabeledGraph::new(final_labels, edges, None)
}
