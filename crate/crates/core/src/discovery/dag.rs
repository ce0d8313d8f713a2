use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed acyclic graph stored as sorted parent lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<String>,
    parents: Vec<Vec<usize>>,
}

impl Dag {
    pub fn empty(nodes: Vec<String>) -> Self {
        let p = nodes.len();
        Self {
            nodes,
            parents: vec![Vec::new(); p],
        }
    }

    pub fn from_parents(nodes: Vec<String>, mut parents: Vec<Vec<usize>>) -> Result<Self> {
        if parents.len() != nodes.len() {
            return Err(Error::dim("dag parent lists", nodes.len(), parents.len()));
        }
        for (v, ps) in parents.iter_mut().enumerate() {
            ps.sort_unstable();
            ps.dedup();
            if ps.iter().any(|&q| q >= nodes.len() || q == v) {
                return Err(Error::Contract(format!("invalid parent index for node {v}")));
            }
        }
        let dag = Self { nodes, parents };
        if !dag.is_acyclic() {
            return Err(Error::Contract("graph contains a directed cycle".into()));
        }
        Ok(dag)
    }

    pub fn from_edges(nodes: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut parents = vec![Vec::new(); nodes.len()];
        for &(a, b) in edges {
            if b >= nodes.len() {
                return Err(Error::Contract(format!("edge head {b} out of range")));
            }
            parents[b].push(a);
        }
        Self::from_parents(nodes, parents)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].binary_search(&from).is_ok()
    }

    /// Edges `(cause, effect)` sorted by effect then cause.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .parents
            .iter()
            .enumerate()
            .flat_map(|(v, ps)| ps.iter().map(move |&q| (q, v)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    /// Kahn's algorithm; `None` when a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let p = self.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut children = vec![Vec::new(); p];
        for (v, ps) in self.parents.iter().enumerate() {
            for &q in ps {
                children[q].push(v);
            }
        }
        let mut ready: BTreeSet<usize> = (0..p).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(p);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &c in &children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == p).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.has_edge(a, b) || self.has_edge(b, a)
    }

    /// Markov equivalence class as a partially directed graph: compelled
    /// v-structures closed under Meek rules 1 to 3.
    pub fn cpdag(&self) -> Pattern {
        let p = self.len();
        let mut pat = Pattern {
            n: p,
            directed: BTreeSet::new(),
            undirected: BTreeSet::new(),
        };
        for (a, b) in self.edges() {
            pat.undirected.insert((a.min(b), a.max(b)));
        }
        for c in 0..p {
            let ps = &self.parents[c];
            for (i, &a) in ps.iter().enumerate() {
                for &b in &ps[i + 1..] {
                    if !self.adjacent(a, b) {
                        pat.orient(a, c);
                        pat.orient(b, c);
                    }
                }
            }
        }
        pat.close_meek();
        pat
    }
}

/// Partially directed graph over `n` nodes. Undirected edges are stored
/// as `(min, max)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub n: usize,
    pub directed: BTreeSet<(usize, usize)>,
    pub undirected: BTreeSet<(usize, usize)>,
}

/// Relation of an unordered pair `(a, b)` with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairState {
    None,
    Forward,
    Backward,
    Undirected,
}

impl Pattern {
    fn orient(&mut self, a: usize, b: usize) {
        self.undirected.remove(&(a.min(b), a.max(b)));
        self.directed.insert((a, b));
    }

    fn is_undirected(&self, a: usize, b: usize) -> bool {
        self.undirected.contains(&(a.min(b), a.max(b)))
    }

    fn adjacent(&self, a: usize, b: usize) -> bool {
        self.is_undirected(a, b) || self.directed.contains(&(a, b)) || self.directed.contains(&(b, a))
    }

    fn pair(&self, a: usize, b: usize) -> PairState {
        if self.directed.contains(&(a, b)) {
            PairState::Forward
        } else if self.directed.contains(&(b, a)) {
            PairState::Backward
        } else if self.is_undirected(a, b) {
            PairState::Undirected
        } else {
            PairState::None
        }
    }

    fn close_meek(&mut self) {
        loop {
            let mut changed = false;
            let und: Vec<(usize, usize)> = self.undirected.iter().copied().collect();
            for (x, y) in und {
                for (a, b) in [(x, y), (y, x)] {
                    if self.is_undirected(a, b) && self.meek_orients(a, b) {
                        self.orient(a, b);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }

    /// Whether one of Meek's rules 1-3 forces `a - b` into `a -> b`.
    fn meek_orients(&self, a: usize, b: usize) -> bool {
        let n = self.n;
        // R1: c -> a - b, c and b nonadjacent.
        if (0..n).any(|c| self.directed.contains(&(c, a)) && c != b && !self.adjacent(c, b)) {
            return true;
        }
        // R2: a -> c -> b.
        if (0..n).any(|c| self.directed.contains(&(a, c)) && self.directed.contains(&(c, b))) {
            return true;
        }
        // R3: a - c -> b, a - d -> b, c and d nonadjacent.
        let mids: Vec<usize> = (0..n)
            .filter(|&c| self.is_undirected(a, c) && self.directed.contains(&(c, b)))
            .collect();
        for (i, &c) in mids.iter().enumerate() {
            for &d in &mids[i + 1..] {
                if !self.adjacent(c, d) {
                    return true;
                }
            }
        }
        false
    }

    /// Number of node pairs whose relation differs between the two patterns.
    pub fn shd(&self, other: &Pattern) -> Result<usize> {
        if self.n != other.n {
            return Err(Error::dim("pattern nodes", self.n, other.n));
        }
        let mut d = 0;
        for a in 0..self.n {
            for b in a + 1..self.n {
                if self.pair(a, b) != other.pair(a, b) {
                    d += 1;
                }
            }
        }
        Ok(d)
    }
}

/// Structural Hamming distance between two DAGs: missing, extra and
/// reversed edges each count once.
pub fn shd(a: &Dag, b: &Dag) -> Result<usize> {
    if a.nodes != b.nodes {
        return Err(Error::Contract("shd needs graphs over the same nodes".into()));
    }
    let mut d = 0;
    for x in 0..a.len() {
        for y in x + 1..a.len() {
            let sa = (a.has_edge(x, y), a.has_edge(y, x));
            let sb = (b.has_edge(x, y), b.has_edge(y, x));
            if sa != sb {
                d += 1;
            }
        }
    }
    Ok(d)
}

/// Structural Hamming distance between the equivalence classes of two DAGs.
pub fn cpdag_shd(a: &Dag, b: &Dag) -> Result<usize> {
    if a.nodes != b.nodes {
        return Err(Error::Contract("shd needs graphs over the same nodes".into()));
    }
    a.cpdag().shd(&b.cpdag())
}

impl Dag {

    /// Writes the `cause,effect` edge list and a JSON sidecar carrying the
    /// node names and `score`.
    pub fn write_edge_list(&self, csv_path: &Path, json_path: &Path, score: f64) -> Result<()> {
        let mut csv = String::from("cause,effect\n");
        for (a, b) in self.edges() {
            writeln!(csv, "{},{}", self.nodes[a], self.nodes[b]).unwrap();
        }
        fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
        let sidecar = serde_json::json!({ "nodes": self.nodes, "score": score });
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
    }

    pub fn read_edge_list(csv_path: &Path, json_path: &Path) -> Result<(Self, f64)> {
        let sidecar: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let nodes: Vec<String> =
            serde_json::from_value(sidecar["nodes"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let score = sidecar["score"].as_f64().unwrap_or(f64::NAN);
        let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let index = |name: &str, line: usize| {
            nodes.iter().position(|n| n == name).ok_or_else(|| Error::Parse {
                path: csv_path.to_path_buf(),
                line,
                message: format!("unknown node {name:?}"),
            })
        };
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| Error::Parse {
                path: csv_path.to_path_buf(),
                line: i + 1,
                message: "expected cause,effect".into(),
            })?;
            edges.push((index(a, i + 1)?, index(b, i + 1)?));
        }
        Ok((Self::from_edges(nodes, &edges)?, score))
    }
}
