use super::keypoints::Keypoint;

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }

    /// Groups of indices, each sorted, ordered by smallest member.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let r = self.find(i);
            by_root[r].push(i);
        }
        let mut g: Vec<Vec<usize>> = by_root.into_iter().filter(|g| !g.is_empty()).collect();
        g.sort_by_key(|g| g[0]);
        g
    }
}

/// Spatial distance in network pixels plus `embed_weight` times the embedding
/// distance when both points carry one.
pub fn point_distance(a: &Keypoint, b: &Keypoint, embed_weight: f64) -> f64 {
    let spatial = ((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt();
    let embed = match (&a.embedding, &b.embedding) {
        (Some(ea), Some(eb)) => ea
            .iter()
            .zip(eb)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt(),
        _ => 0.0,
    };
    spatial + embed_weight * embed
}

/// Single-linkage groups (as index lists) of points within `threshold`;
/// groups smaller than `min_size` are dropped.
pub fn cluster_indices(points: &[Keypoint], threshold: f64, embed_weight: f64, min_size: usize) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(points.len());
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if point_distance(&points[i], &points[j], embed_weight) <= threshold {
                uf.union(i, j);
            }
        }
    }
    uf.groups().into_iter().filter(|g| g.len() >= min_size).collect()
}
