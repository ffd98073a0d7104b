//! Layered-graph smoothing: pick one candidate per row minimizing path length
//! plus a direction-change penalty.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Candidate `(x, y)` points per layer, layers ordered by increasing y.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingGraph {
    pub layers: Vec<Vec<(f64, f64)>>,
    pub lambda: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Direction of the edge `a → b` measured from the +y axis.
fn heading(a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.0 - a.0).atan2(b.1 - a.1)
}

impl SmoothingGraph {
    pub fn new(layers: Vec<Vec<(f64, f64)>>, lambda: f64) -> Self {
        Self { layers, lambda }
    }

    pub fn is_connected(&self) -> bool {
        !self.layers.is_empty() && self.layers.iter().all(|l| !l.is_empty())
    }

    fn node(&self, layer: usize, i: usize) -> (f64, f64) {
        self.layers[layer][i]
    }

    /// Weight of edge `(layer, a) → (layer+1, b)` given the previous node, if any.
    pub fn edge_weight(&self, prev: Option<(f64, f64)>, a: (f64, f64), b: (f64, f64)) -> f64 {
        let turn = prev.map_or(0.0, |p| (heading(a, b) - heading(p, a)).abs());
        dist(a, b) + self.lambda * turn
    }

    /// Total weight of a path given as one candidate index per layer.
    pub fn path_cost(&self, choice: &[usize]) -> f64 {
        let pts: Vec<(f64, f64)> = choice.iter().enumerate().map(|(l, &i)| self.node(l, i)).collect();
        let mut total = 0.0;
        for i in 0..pts.len().saturating_sub(1) {
            let prev = i.checked_sub(1).map(|p| pts[p]);
            total += self.edge_weight(prev, pts[i], pts[i + 1]);
        }
        total
    }
}

#[derive(Clone, Copy, PartialEq)]
struct State {
    cost: f64,
    /// Edge `(layer, a) → (layer+1, b)`.
    layer: usize,
    a: usize,
    b: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| (other.layer, other.a, other.b).cmp(&(self.layer, self.a, self.b)))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-weight source-to-sink path by Dijkstra over edge states, so the
/// turn penalty is a function of the state pair. Returns one index per layer.
pub fn shortest_path(g: &SmoothingGraph) -> Option<(Vec<usize>, f64)> {
    if !g.is_connected() {
        return None;
    }
    let n = g.layers.len();
    if n == 1 {
        return Some((vec![0], 0.0));
    }
    // state id for the edge leaving layer l
    let offsets: Vec<usize> = (0..n - 1)
        .scan(0, |acc, l| {
            let o = *acc;
            *acc += g.layers[l].len() * g.layers[l + 1].len();
            Some(o)
        })
        .collect();
    let id = |l: usize, a: usize, b: usize| offsets[l] + a * g.layers[l + 1].len() + b;
    let total = offsets[n - 2] + g.layers[n - 2].len() * g.layers[n - 1].len();
    let mut best = vec![f64::INFINITY; total];
    let mut from: Vec<Option<usize>> = vec![None; total];
    let mut heap = BinaryHeap::new();
    for a in 0..g.layers[0].len() {
        for b in 0..g.layers[1].len() {
            let c = g.edge_weight(None, g.node(0, a), g.node(1, b));
            best[id(0, a, b)] = c;
            heap.push(State { cost: c, layer: 0, a, b });
        }
    }
    let mut end = None;
    while let Some(s) = heap.pop() {
        let sid = id(s.layer, s.a, s.b);
        if s.cost > best[sid] {
            continue;
        }
        if s.layer == n - 2 {
            end = Some(s);
            break;
        }
        let (p, a) = (g.node(s.layer, s.a), g.node(s.layer + 1, s.b));
        for c in 0..g.layers[s.layer + 2].len() {
            let cost = s.cost + g.edge_weight(Some(p), a, g.node(s.layer + 2, c));
            let nid = id(s.layer + 1, s.b, c);
            if cost < best[nid] {
                best[nid] = cost;
                from[nid] = Some(sid);
                heap.push(State {
                    cost,
                    layer: s.layer + 1,
                    a: s.b,
                    b: c,
                });
            }
        }
    }
    let end = end?;
    let mut choice = vec![0; n];
    let (mut l, mut a, mut b) = (end.layer, end.a, end.b);
    loop {
        choice[l] = a;
        choice[l + 1] = b;
        let Some(prev) = from[id(l, a, b)] else { break };
        l -= 1;
        let rem = prev - offsets[l];
        let width = g.layers[l + 1].len();
        a = rem / width;
        b = rem % width;
    }
    Some((choice, end.cost))
}

/// Exhaustive minimum over every path.
pub fn brute_force_path(g: &SmoothingGraph) -> Option<(Vec<usize>, f64)> {
    if !g.is_connected() {
        return None;
    }
    let n = g.layers.len();
    let mut choice = vec![0; n];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let c = g.path_cost(&choice);
        if best.as_ref().is_none_or(|b| c < b.1) {
            best = Some((choice.clone(), c));
        }
        let mut l = n;
        loop {
            if l == 0 {
                return best;
            }
            l -= 1;
            choice[l] += 1;
            if choice[l] < g.layers[l].len() {
                break;
            }
            choice[l] = 0;
        }
    }
}

/// Largest `|x_{i+1} − 2x_i + x_{i−1}|` along a chain.
pub fn max_second_difference(xs: &[f64]) -> f64 {
    xs.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).fold(0.0, f64::max)
}
