//! Synthetic navigation graphs, instructions, the shortest-path expert and
//! evaluation metrics.
//!
//! Token ids `0..landmark_vocab` are landmarks; the following
//! `distractor_vocab` ids are distractors that never name a node.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdbError};
use crate::flat_config;
use crate::tensor::Mat;

const TIE_TOL: f64 = 1e-9;

flat_config! {
    /// Generation parameters for the synthetic navigation task.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WorldConfig {
        /// smallest graph size
        num_nodes_min: usize = 6; "nodes",
        /// largest graph size
        num_nodes_max: usize = 10; "nodes",
        /// minimum hop distance between start and goal
        min_hops: usize = 2; "hops",
        /// connection radius of the random geometric graph in the unit square
        connect_radius: f64 = 0.5; "unit-square lengths",
        /// draw edge lengths from (0.5, 1.5] instead of using unit lengths
        random_edge_lengths: bool = false; "flag",
        /// probability of inserting a distractor token before each landmark token
        distractor_rate: f64 = 0.2; "probability",
        /// number of landmark tokens
        landmark_vocab: usize = 64; "tokens",
        /// number of distractor tokens
        distractor_vocab: usize = 16; "tokens",
        /// standard deviation of per-node noise added to landmark features
        feature_noise: f64 = 0.2; "feature units",
        /// number of training graphs
        train_graphs: usize = 40; "graphs",
        /// number of held-out graphs
        eval_graphs: usize = 10; "graphs",
        /// start/goal pairs evaluated on each held-out graph
        eval_episodes_per_graph: usize = 5; "episodes",
        /// seed for the landmark feature table and all graphs
        world_seed: u64 = 7; "seed",
        /// attempts at placing start and goal before giving up
        endpoint_attempts: usize = 200; "attempts",
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SdbError::Config(m.to_owned()));
        if self.num_nodes_min < 3 || self.num_nodes_max < self.num_nodes_min {
            return bad("need 3 <= num_nodes_min <= num_nodes_max");
        }
        if self.num_nodes_max > self.landmark_vocab {
            return bad("every node needs a distinct landmark: num_nodes_max <= landmark_vocab");
        }
        if self.min_hops == 0 {
            return bad("min_hops must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn token_vocab(&self) -> usize {
        self.landmark_vocab + self.distractor_vocab
    }
}

/// One action from a candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Move(usize),
    Stop,
}

/// Neighbors in ascending id order followed by STOP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    actions: Vec<Action>,
}

impl CandidateSet {
    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn neighbors(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions.iter().filter_map(|a| match a {
            Action::Move(n) => Some(*n),
            Action::Stop => None,
        })
    }

    pub fn index_of(&self, a: Action) -> Option<usize> {
        self.actions.iter().position(|&x| x == a)
    }
}

/// Fixed random feature vector per landmark token, shared across graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTable {
    features: Mat,
}

impl LandmarkTable {
    pub fn new(landmarks: usize, env_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6e64_6d61_726b);
        let data = (0..landmarks * env_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { features: Mat::from_vec(landmarks, env_dim, data) }
    }

    pub fn feature(&self, landmark: usize) -> &[f64] {
        self.features.row(landmark)
    }

    pub fn env_dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavGraph {
    /// node features `[num_nodes × env_dim]`
    pub features: Mat,
    pub landmarks: Vec<usize>,
    /// sorted by neighbor id
    adjacency: Vec<Vec<(usize, f64)>>,
    pub start: usize,
    pub goal: usize,
    pub seed: u64,
}

#[derive(Debug, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NavGraph {
    /// Build from an undirected edge list. Start and goal default to 0 and the last node.
    pub fn from_edges(features: Mat, landmarks: Vec<usize>, edges: &[(usize, usize, f64)]) -> Self {
        let n = features.rows();
        assert_eq!(landmarks.len(), n);
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b, len) in edges {
            assert!(a != b && a < n && b < n && len > 0.0, "invalid edge ({a}, {b}, {len})");
            if adjacency[a].iter().any(|&(x, _)| x == b) {
                continue;
            }
            adjacency[a].push((b, len));
            adjacency[b].push((a, len));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(x, _)| x);
        }
        Self { features, landmarks, adjacency, start: 0, goal: n - 1, seed: 0 }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn feature(&self, node: usize) -> &[f64] {
        self.features.row(node)
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[node].iter().map(|&(x, _)| x)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency[a].iter().find(|&&(x, _)| x == b).map(|&(_, l)| l)
    }

    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (a, adj) in self.adjacency.iter().enumerate() {
            for &(b, l) in adj {
                if a < b {
                    out.push((a, b, l));
                }
            }
        }
        out
    }

    /// Dijkstra distances from `source`; unreachable nodes are `f64::INFINITY`.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.num_nodes()];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem(0.0, source));
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, l) in &self.adjacency[u] {
                let nd = d + l;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
        dist
    }

    /// Breadth-first hop counts from `source`.
    pub fn hops_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut hops = vec![None; self.num_nodes()];
        hops[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let h = hops[u].expect("queued nodes have hop counts");
            for v in self.neighbors(u) {
                if hops[v].is_none() {
                    hops[v] = Some(h + 1);
                    queue.push_back(v);
                }
            }
        }
        hops
    }

    pub fn is_connected(&self) -> bool {
        self.hops_from(0).iter().all(Option::is_some)
    }

    pub fn candidate_actions(&self, node: usize) -> CandidateSet {
        let mut actions: Vec<Action> = self.neighbors(node).map(Action::Move).collect();
        actions.push(Action::Stop);
        CandidateSet { actions }
    }

    /// Next expert action given distances to the goal (see [`expert_action`]).
    pub fn expert_action_with(&self, current: usize, goal: usize, dist_to_goal: &[f64]) -> Result<Action> {
        if current == goal {
            return Ok(Action::Stop);
        }
        if !dist_to_goal[current].is_finite() {
            return Err(SdbError::Unreachable { from: current, to: goal });
        }
        let mut best: Option<(f64, usize)> = None;
        for &(v, l) in &self.adjacency[current] {
            let cost = l + dist_to_goal[v];
            // neighbors are visited in ascending id order, so strict improvement keeps the lowest id
            if best.is_none_or(|(c, _)| cost < c - TIE_TOL) {
                best = Some((cost, v));
            }
        }
        best.map(|(_, v)| Action::Move(v)).ok_or(SdbError::Unreachable { from: current, to: goal })
    }

    /// Node sequence obtained by following the expert from `from` to `to`.
    pub fn expert_path(&self, from: usize, to: usize) -> Result<Vec<usize>> {
        let dist = self.distances_from(to);
        let mut path = vec![from];
        let mut cur = from;
        while let Action::Move(next) = self.expert_action_with(cur, to, &dist)? {
            path.push(next);
            cur = next;
            if path.len() > self.num_nodes() {
                return Err(SdbError::Unreachable { from, to });
            }
        }
        Ok(path)
    }

    pub fn path_length(&self, path: &[usize]) -> f64 {
        path.windows(2)
            .map(|w| self.edge_length(w[0], w[1]).expect("path follows graph edges"))
            .sum()
    }

    /// Pick start/goal at least `min_hops` apart.
    pub fn place_endpoints(&mut self, min_hops: usize, attempts: usize, rng: &mut impl Rng) -> Result<()> {
        let n = self.num_nodes();
        for _ in 0..attempts {
            let s = rng.random_range(0..n);
            let g = rng.random_range(0..n);
            if s == g {
                continue;
            }
            if self.hops_from(s)[g].is_some_and(|h| h >= min_hops) {
                self.start = s;
                self.goal = g;
                return Ok(());
            }
        }
        Err(SdbError::Unsatisfiable { min_hops, attempts })
    }
}

/// Next expert action: STOP at the goal, otherwise the neighbor minimising the remaining
/// shortest-path distance, lowest id on ties.
pub fn expert_action(graph: &NavGraph, current: usize, goal: usize) -> Result<Action> {
    graph.expert_action_with(current, goal, &graph.distances_from(goal))
}

/// Connected random geometric graph with landmark features and start/goal placed.
pub fn sample_graph(cfg: &WorldConfig, table: &LandmarkTable, seed: u64) -> Result<NavGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.num_nodes_min..=cfg.num_nodes_max);
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let d = |a: usize, b: usize| ((pos[a].0 - pos[b].0).powi(2) + (pos[a].1 - pos[b].1).powi(2)).sqrt();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if d(a, b) < cfg.connect_radius {
                pairs.push((a, b));
            }
        }
    }
    // join components through their closest node pair until connected
    let mut comp: Vec<usize> = (0..n).collect();
    let find = |comp: &mut Vec<usize>, mut x: usize| {
        while comp[x] != x {
            comp[x] = comp[comp[x]];
            x = comp[x];
        }
        x
    };
    for &(a, b) in &pairs {
        let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
        comp[ra] = rb;
    }
    loop {
        let root0 = find(&mut comp, 0);
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if find(&mut comp, a) != root0 {
                continue;
            }
            for b in 0..n {
                if find(&mut comp, b) == root0 {
                    continue;
                }
                if best.is_none_or(|(bd, _, _)| d(a, b) < bd) {
                    best = Some((d(a, b), a, b));
                }
            }
        }
        match best {
            Some((_, a, b)) => {
                pairs.push((a.min(b), a.max(b)));
                let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
                comp[ra] = rb;
            }
            None => break,
        }
    }
    let edges: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|(a, b)| {
            let len = if cfg.random_edge_lengths { 1.5 - rng.random::<f64>() } else { 1.0 };
            (a, b, len)
        })
        .collect();

    let mut landmark_ids: Vec<usize> = (0..cfg.landmark_vocab).collect();
    landmark_ids.shuffle(&mut rng);
    landmark_ids.truncate(n);
    let env_dim = table.env_dim();
    let mut features = Mat::zeros(n, env_dim);
    for (node, &lm) in landmark_ids.iter().enumerate() {
        for (j, f) in features.row_mut(node).iter_mut().enumerate() {
            *f = table.feature(lm)[j] + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut graph = NavGraph::from_edges(features, landmark_ids, &edges);
    graph.seed = seed;
    graph.place_endpoints(cfg.min_hops, cfg.endpoint_attempts, &mut rng)?;
    Ok(graph)
}

/// Landmark tokens along `path`, each optionally preceded by a distractor, capped at `max_len`.
pub fn synthesize_instruction(
    graph: &NavGraph,
    path: &[usize],
    cfg: &WorldConfig,
    max_len: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(2 * path.len());
    let mut is_distractor = Vec::with_capacity(2 * path.len());
    for &node in path {
        if cfg.distractor_vocab > 0 && rng.random::<f64>() < cfg.distractor_rate {
            tokens.push(cfg.landmark_vocab + rng.random_range(0..cfg.distractor_vocab));
            is_distractor.push(true);
        }
        tokens.push(graph.landmarks[node]);
        is_distractor.push(false);
    }
    // drop distractors from the end first, then interior landmarks, always keeping the goal
    while tokens.len() > max_len {
        let victim = is_distractor
            .iter()
            .rposition(|&d| d)
            .unwrap_or_else(|| tokens.len().saturating_sub(2));
        tokens.remove(victim);
        is_distractor.remove(victim);
    }
    tokens
}

/// One navigation episode: task definition plus the executed trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub graph: NavGraph,
    pub instruction: Vec<usize>,
    pub expert_path: Vec<usize>,
    pub trajectory: Vec<usize>,
    pub actions: Vec<Action>,
    pub stopped: bool,
}

impl Episode {
    pub fn new(graph: NavGraph, cfg: &WorldConfig, max_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let expert_path = graph.expert_path(graph.start, graph.goal)?;
        let instruction = synthesize_instruction(&graph, &expert_path, cfg, max_len, rng);
        let start = graph.start;
        Ok(Self { graph, instruction, expert_path, trajectory: vec![start], actions: Vec::new(), stopped: false })
    }

    pub fn current(&self) -> usize {
        *self.trajectory.last().expect("trajectory starts at the start node")
    }

    pub fn apply(&mut self, action: Action) {
        self.actions.push(action);
        match action {
            Action::Stop => self.stopped = true,
            Action::Move(n) => {
                debug_assert!(self.graph.edge_length(self.current(), n).is_some());
                self.trajectory.push(n);
            }
        }
    }

    /// Running mean of visited node features (current node included).
    pub fn history_summary(&self) -> Vec<f64> {
        let dim = self.graph.features.cols();
        let mut acc = vec![0.0; dim];
        for &n in &self.trajectory {
            for (a, f) in acc.iter_mut().zip(self.graph.feature(n)) {
                *a += f;
            }
        }
        let k = self.trajectory.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    pub fn reset(&mut self) {
        self.trajectory = vec![self.graph.start];
        self.actions.clear();
        self.stopped = false;
    }
}

/// Held-out or training episodes generated from the world seed.
#[derive(Debug, Clone)]
pub struct EpisodeSet {
    pub graphs: Vec<NavGraph>,
    pub episodes: Vec<Episode>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = a.wrapping_add(b.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream derived from a seed and a tuple of indices.
pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let s = tags.iter().fold(mix(seed, 0x5db), |acc, &t| mix(acc, t));
    ChaCha8Rng::seed_from_u64(s)
}

/// The training and held-out graph sets of the toy task.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub cfg: WorldConfig,
    pub table: LandmarkTable,
    pub train_graphs: Vec<NavGraph>,
    pub eval: Vec<Episode>,
    pub max_instruction_len: usize,
}

impl ToyWorld {
    pub fn new(cfg: &WorldConfig, env_dim: usize, max_instruction_len: usize) -> Result<Self> {
        cfg.validate()?;
        let table = LandmarkTable::new(cfg.landmark_vocab, env_dim, cfg.world_seed);
        let graph_seed = |split: u64, i: usize| mix(mix(cfg.world_seed, split), i as u64);
        let train_graphs = (0..cfg.train_graphs)
            .map(|i| sample_graph(cfg, &table, graph_seed(1, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut eval = Vec::new();
        for i in 0..cfg.eval_graphs {
            let base = sample_graph(cfg, &table, graph_seed(2, i))?;
            let mut rng = derived_rng(cfg.world_seed, &[3, i as u64]);
            for j in 0..cfg.eval_episodes_per_graph.max(1) {
                let mut g = base.clone();
                if j > 0 {
                    g.place_endpoints(cfg.min_hops, cfg.endpoint_attempts, &mut rng)?;
                }
                eval.push(Episode::new(g, cfg, max_instruction_len, &mut rng)?);
            }
        }
        Ok(Self { cfg: cfg.clone(), table, train_graphs, eval, max_instruction_len })
    }

    /// A fresh training episode on a uniformly chosen training graph.
    pub fn sample_train_episode(&self, rng: &mut impl Rng) -> Result<Episode> {
        let mut g = self.train_graphs[rng.random_range(0..self.train_graphs.len())].clone();
        g.place_endpoints(self.cfg.min_hops, self.cfg.endpoint_attempts, rng)?;
        Episode::new(g, &self.cfg, self.max_instruction_len, rng)
    }

    /// Training graphs with their sampled endpoints, as episodes.
    pub fn train_episodes(&self) -> Result<Vec<Episode>> {
        let mut rng = derived_rng(self.cfg.world_seed, &[4]);
        self.train_graphs.iter().map(|g| Episode::new(g.clone(), &self.cfg, self.max_instruction_len, &mut rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub trajectory_length: f64,
    pub navigation_error: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    pub shortest_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub episodes: usize,
}

pub fn episode_metrics(ep: &Episode, threshold: f64) -> EpisodeMetrics {
    let g = &ep.graph;
    let to_goal = g.distances_from(g.goal);
    let p = g.path_length(&ep.trajectory);
    let l = to_goal[g.start];
    let ne = to_goal[ep.current()];
    let success = ne <= threshold;
    let oracle_success = ep.trajectory.iter().any(|&n| to_goal[n] <= threshold);
    let spl = if success { l / p.max(l) } else { 0.0 };
    EpisodeMetrics { trajectory_length: p, navigation_error: ne, success, oracle_success, spl, shortest_length: l }
}

/// TL, NE, SR, OSR and SPL averaged over episodes.
pub fn compute_metrics(episodes: &[Episode], threshold: f64) -> Result<MetricsTable> {
    if episodes.is_empty() {
        return Err(SdbError::EmptySet);
    }
    if !(threshold >= 0.0) {
        return Err(SdbError::Config("success threshold must be non-negative".into()));
    }
    let n = episodes.len() as f64;
    let mut t = MetricsTable { tl: 0.0, ne: 0.0, sr: 0.0, osr: 0.0, spl: 0.0, episodes: episodes.len() };
    for ep in episodes {
        let m = episode_metrics(ep, threshold);
        t.tl += m.trajectory_length;
        t.ne += m.navigation_error;
        t.sr += f64::from(u8::from(m.success));
        t.osr += f64::from(u8::from(m.oracle_success));
        t.spl += m.spl;
    }
    t.tl /= n;
    t.ne /= n;
    t.sr /= n;
    t.osr /= n;
    t.spl /= n;
    Ok(t)
}
