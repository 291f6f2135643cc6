use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Coords, LabeledGraph};

const LAYOUT_SEED: u64 = 0x5eed_1a70;
const SWEEPS: usize = 400;

/// Deterministic 2D layout by stress majorization on shortest-path
/// distances (ideal bond length 1.0), centered at the origin.
///
/// Starts from a fixed-seed random placement and runs a fixed number of
/// Gauss-Seidel sweeps with weights `d^-2`. Nodes in different components
/// are kept one unit further apart than the largest finite distance.
pub fn layout_2d(graph: &LabeledGraph) -> Coords {
    let m = graph.len();
    let dist = all_pairs_hops(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(LAYOUT_SEED);
    let mut pos: Vec<[f64; 2]> = (0..m)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    for _ in 0..SWEEPS {
        for i in 0..m {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for j in 0..m {
                if i == j {
                    continue;
                }
                let d = dist[i][j];
                let w = 1.0 / (d * d);
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let r = (dx * dx + dy * dy).sqrt();
                let (ux, uy) = if r > 1e-12 { (dx / r, dy / r) } else { (1.0, 0.0) };
                sx += w * (pos[j][0] + d * ux);
                sy += w * (pos[j][1] + d * uy);
                sw += w;
            }
            if sw > 0.0 {
                pos[i] = [sx / sw, sy / sw];
            }
        }
    }
    let n = m.max(1) as f64;
    let cx = pos.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pos.iter().map(|p| p[1]).sum::<f64>() / n;
    let data = pos.iter().flat_map(|p| [p[0] - cx, p[1] - cy]).collect();
    Coords::new(2, data).expect("two columns per node")
}

fn all_pairs_hops(graph: &LabeledGraph) -> Vec<Vec<f64>> {
    let m = graph.len();
    let adj = graph.adjacency();
    let mut dist = vec![vec![f64::INFINITY; m]; m];
    for s in 0..m {
        dist[s][s] = 0.0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if dist[s][v].is_infinite() {
                    dist[s][v] = dist[s][u] + 1.0;
                    queue.push_back(v);
                }
            }
        }
    }
    let far = dist
        .iter()
        .flatten()
        .filter(|d| d.is_finite())
        .fold(0.0f64, |a, &b| a.max(b))
        + 1.0;
    for row in &mut dist {
        for d in row.iter_mut().filter(|d| d.is_infinite()) {
            *d = far;
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(c: &Coords) -> Vec<f64> {
        c.centroid(&(0..c.len()).collect::<Vec<_>>())
    }

    #[test]
    fn single_node_sits_at_origin() {
        let g = LabeledGraph::new(vec![0], [], None).unwrap();
        assert_eq!(layout_2d(&g).point(0), &[0.0, 0.0]);
    }

    #[test]
    fn bonded_pair_is_unit_distance() {
        let g = LabeledGraph::new(vec![0, 1], [(0, 1, 1)], None).unwrap();
        let c = layout_2d(&g);
        assert!((c.squared_distance(0, 1).sqrt() - 1.0).abs() < 1e-6);
        assert!(centroid(&c).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn path_is_centered_and_deterministic() {
        let g = LabeledGraph::new(vec![0; 3], [(0, 1, 1), (1, 2, 1)], None).unwrap();
        let c = layout_2d(&g);
        assert!(centroid(&c).iter().all(|v| v.abs() < 1e-9));
        assert_eq!(c, layout_2d(&g));
        assert!((c.squared_distance(0, 2).sqrt() - 2.0).abs() < 1e-2);
    }

    #[test]
    fn ring_bonds_are_near_unit_length() {
        let g = LabeledGraph::new(vec![0; 6], (0..6).map(|i| (i, (i + 1) % 6, 1)), None).unwrap();
        let c = layout_2d(&g);
        for e in g.edges() {
            let d = c.squared_distance(e.a, e.b).sqrt();
            assert!((0.6..1.4).contains(&d), "bond length {d}");
        }
    }
}
