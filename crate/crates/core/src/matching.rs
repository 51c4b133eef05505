//! Request/offer compatibility graphs and maximum bipartite matching.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest `p + q` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 16;

const FREE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub cpu: u32,
    pub mem: u32,
}

impl ResourceSpec {
    pub fn new(cpu: u32, mem: u32) -> Self {
        Self { cpu, mem }
    }

    /// Component-wise `>=`.
    pub fn covers(&self, request: &ResourceSpec) -> bool {
        self.cpu >= request.cpu && self.mem >= request.mem
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchingError {
    #[error("graph too large for exhaustive search: {0} vertices")]
    TooLarge(usize),
}

/// Bipartite graph in compressed adjacency form. Neighbour lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatibilityGraph {
    requests: usize,
    offers: usize,
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl CompatibilityGraph {
    pub fn from_edges(requests: usize, offers: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut lists = vec![Vec::new(); requests];
        for (i, j) in edges {
            assert!(i < requests && j < offers, "edge ({i}, {j}) out of range");
            lists[i].push(j as u32);
        }
        let mut offsets = Vec::with_capacity(requests + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            targets.extend(l);
            offsets.push(targets.len());
        }
        Self { requests, offers, offsets, targets }
    }

    pub fn requests(&self) -> usize {
        self.requests
    }

    pub fn offers(&self) -> usize {
        self.offers
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn neighbours(&self, request: usize) -> &[u32] {
        &self.targets[self.offsets[request]..self.offsets[request + 1]]
    }

    pub fn has_edge(&self, request: usize, offer: usize) -> bool {
        self.neighbours(request).binary_search(&(offer as u32)).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.requests).flat_map(move |i| self.neighbours(i).iter().map(move |&j| (i, j as usize)))
    }
}

pub fn build_graph(requests: &[ResourceSpec], offers: &[ResourceSpec]) -> CompatibilityGraph {
    let edges = requests
        .iter()
        .enumerate()
        .flat_map(|(i, r)| offers.iter().enumerate().filter(move |(_, o)| o.covers(r)).map(move |(j, _)| (i, j)));
    CompatibilityGraph::from_edges(requests.len(), offers.len(), edges)
}

/// Matched `(request, offer)` pairs, sorted by request index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every pair is an edge and no endpoint repeats.
    pub fn is_valid_for(&self, graph: &CompatibilityGraph) -> bool {
        let mut left = vec![false; graph.requests()];
        let mut right = vec![false; graph.offers()];
        self.pairs.iter().all(|&(i, j)| {
            let ok = i < left.len() && j < right.len() && !left[i] && !right[j] && graph.has_edge(i, j);
            if ok {
                left[i] = true;
                right[j] = true;
            }
            ok
        })
    }

    fn from_mates(mate: &[u32]) -> Self {
        let pairs = mate.iter().enumerate().filter(|(_, &j)| j != FREE).map(|(i, &j)| (i, j as usize)).collect();
        Self { pairs }
    }
}

/// Hopcroft-Karp. Free requests and neighbours are visited in ascending
/// index order, so the result is a function of the graph alone.
pub fn max_matching(graph: &CompatibilityGraph) -> Assignment {
    let p = graph.requests();
    let q = graph.offers();
    let mut mate_l = vec![FREE; p];
    let mut mate_r = vec![FREE; q];

    // Greedy start.
    for (u, m) in mate_l.iter_mut().enumerate() {
        if let Some(&v) = graph.neighbours(u).iter().find(|&&v| mate_r[v as usize] == FREE) {
            *m = v;
            mate_r[v as usize] = u as u32;
        }
    }

    let mut dist = vec![u32::MAX; p];
    let mut queue = VecDeque::with_capacity(p);
    let mut cursor = vec![0usize; p];
    let mut stack: Vec<u32> = Vec::new();

    loop {
        // Layer the graph from all free requests.
        queue.clear();
        for u in 0..p {
            if mate_l[u] == FREE {
                dist[u] = 0;
                queue.push_back(u as u32);
            } else {
                dist[u] = u32::MAX;
            }
        }
        let mut limit = u32::MAX;
        while let Some(u) = queue.pop_front() {
            let du = dist[u as usize];
            if du >= limit {
                continue;
            }
            for &v in graph.neighbours(u as usize) {
                let w = mate_r[v as usize];
                if w == FREE {
                    limit = limit.min(du + 1);
                } else if dist[w as usize] == u32::MAX {
                    dist[w as usize] = du + 1;
                    queue.push_back(w);
                }
            }
        }
        if limit == u32::MAX {
            break;
        }

        // Vertex-disjoint shortest augmenting paths, iterative DFS.
        cursor.iter_mut().for_each(|c| *c = 0);
        let mut augmented = false;
        for root in 0..p {
            if mate_l[root] != FREE {
                continue;
            }
            stack.clear();
            stack.push(root as u32);
            while let Some(&u) = stack.last() {
                let u = u as usize;
                let nbrs = graph.neighbours(u);
                let mut advanced = false;
                while cursor[u] < nbrs.len() {
                    let v = nbrs[cursor[u]];
                    let w = mate_r[v as usize];
                    if w == FREE {
                        if dist[u] + 1 == limit {
                            // Flip the path held on the stack.
                            let mut right = v;
                            for &x in stack.iter().rev() {
                                let prev = mate_l[x as usize];
                                mate_l[x as usize] = right;
                                mate_r[right as usize] = x;
                                right = prev;
                            }
                            stack.clear();
                            augmented = true;
                            advanced = true;
                            break;
                        }
                    } else if dist[w as usize] == dist[u] + 1 {
                        cursor[u] += 1;
                        stack.push(w);
                        advanced = true;
                        break;
                    }
                    cursor[u] += 1;
                }
                if !advanced {
                    dist[u] = u32::MAX;
                    stack.pop();
                }
            }
        }
        if !augmented {
            break;
        }
    }
    Assignment::from_mates(&mate_l)
}

/// Exhaustive maximum matching by dynamic programming over subsets of
/// offers. Only for small graphs.
pub fn brute_force_matching(graph: &CompatibilityGraph) -> Result<Assignment, MatchingError> {
    let (p, q) = (graph.requests(), graph.offers());
    if p + q > BRUTE_FORCE_LIMIT {
        return Err(MatchingError::TooLarge(p + q));
    }
    let masks = 1usize << q;
    // best[i][mask]: largest matching of requests i.. using offers outside mask.
    let mut best = vec![0u8; (p + 1) * masks];
    for i in (0..p).rev() {
        for mask in 0..masks {
            let mut b = best[(i + 1) * masks + mask];
            for &j in graph.neighbours(i) {
                let bit = 1 << j;
                if mask & bit == 0 {
                    b = b.max(1 + best[(i + 1) * masks + (mask | bit)]);
                }
            }
            best[i * masks + mask] = b;
        }
    }
    let mut pairs = Vec::new();
    let mut mask = 0usize;
    for i in 0..p {
        let here = best[i * masks + mask];
        if here == best[(i + 1) * masks + mask] {
            continue;
        }
        let j = graph
            .neighbours(i)
            .iter()
            .map(|&j| j as usize)
            .find(|&j| mask & (1 << j) == 0 && here == 1 + best[(i + 1) * masks + (mask | 1 << j)])
            .expect("table is consistent");
        pairs.push((i, j));
        mask |= 1 << j;
    }
    Ok(Assignment { pairs })
}

/// Outcome of one matching epoch over generic pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochResult<R, O> {
    pub pairs: Vec<(R, O)>,
    pub pending: Vec<(R, ResourceSpec)>,
    pub available: Vec<(O, ResourceSpec)>,
}

/// Match the current pools; leftovers are returned for the next epoch in
/// their original order.
pub fn epoch_assign<R, O>(pending: Vec<(R, ResourceSpec)>, available: Vec<(O, ResourceSpec)>) -> EpochResult<R, O> {
    let reqs: Vec<_> = pending.iter().map(|(_, s)| *s).collect();
    let offs: Vec<_> = available.iter().map(|(_, s)| *s).collect();
    let assignment = max_matching(&build_graph(&reqs, &offs));

    let mut req_slot: Vec<Option<usize>> = vec![None; reqs.len()];
    for &(i, j) in &assignment.pairs {
        req_slot[i] = Some(j);
    }
    let mut offer_taken = vec![false; offs.len()];
    for &(_, j) in &assignment.pairs {
        offer_taken[j] = true;
    }

    let mut offers: Vec<Option<(O, ResourceSpec)>> = available.into_iter().map(Some).collect();
    let mut pairs = Vec::new();
    let mut rest_pending = Vec::new();
    for (i, item) in pending.into_iter().enumerate() {
        match req_slot[i] {
            Some(j) => pairs.push((item.0, offers[j].take().expect("offer matched once").0)),
            None => rest_pending.push(item),
        }
    }
    let rest_available = offers.into_iter().flatten().collect();
    EpochResult { pairs, pending: rest_pending, available: rest_available }
}

/// Each possible edge present independently with probability `density`.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, requests: usize, offers: usize, density: f64) -> CompatibilityGraph {
    let density = density.clamp(0.0, 1.0);
    let mut offsets = Vec::with_capacity(requests + 1);
    let mut targets = Vec::with_capacity((requests as f64 * offers as f64 * density) as usize + 16);
    offsets.push(0);
    for _ in 0..requests {
        for j in 0..offers {
            if rng.gen_bool(density) {
                targets.push(j as u32);
            }
        }
        offsets.push(targets.len());
    }
    CompatibilityGraph { requests, offers, offsets, targets }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub vertices: usize,
    pub density: f64,
    pub edges: usize,
    /// Graph construction plus matching, as a broker pays per epoch.
    pub seconds: f64,
    pub build_seconds: f64,
    pub match_seconds: f64,
    pub matched: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<usize>,
}

/// Random graph with `|V|/2` vertices per side, built and matched under the
/// clock. `oracle` also runs the exhaustive search where the size allows.
pub fn bench_matching(sizes: &[usize], density: f64, seed: u64, oracle: bool) -> Vec<BenchRow> {
    sizes
        .iter()
        .map(|&vertices| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ vertices as u64);
            let p = vertices / 2;
            let start = Instant::now();
            let graph = random_graph(&mut rng, p, vertices - p, density);
            let built = Instant::now();
            let matched = max_matching(&graph).len();
            let done = Instant::now();
            let oracle = if oracle { brute_force_matching(&graph).ok().map(|a| a.len()) } else { None };
            BenchRow {
                vertices,
                density,
                edges: graph.edge_count(),
                seconds: (done - start).as_secs_f64(),
                build_seconds: (built - start).as_secs_f64(),
                match_seconds: (done - built).as_secs_f64(),
                matched,
                oracle,
            }
        })
        .collect()
}
