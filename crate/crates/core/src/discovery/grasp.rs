//! Permutation search with tuck moves (greedy relaxation of the sparsest
//! permutation).
//!
//! Every permutation induces a DAG: each variable takes as parents the
//! subset of its predecessors picked by greedy forward-add / backward-delete
//! on the local BIC. The search climbs over permutations by tucking a
//! variable (together with its ancestors that sit between the two
//! positions) in front of one of its parents. Tucks that leave the score
//! unchanged are explored recursively up to `depth` levels, restricted to
//! covered edges below the top level.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BicScore, CachedScore, CausalDataset, Dag};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed, Rng};

const SCORE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub depth: usize,
    pub restarts: usize,
    pub penalty: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            restarts: 5,
            penalty: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraspResult {
    pub dag: Dag,
    pub order: Vec<usize>,
    pub score: f64,
    /// Score of the starting permutation's DAG (of the winning restart).
    pub start_score: f64,
    pub restart: usize,
}

/// Greedy grow-shrink parent selection among `candidates`; ties keep the
/// earliest candidate.
fn grow_shrink(score: &mut CachedScore<'_>, node: usize, candidates: &[usize]) -> (Vec<usize>, f64) {
    let mut parents: Vec<usize> = Vec::new();
    let mut current = score.local(node, &parents);
    loop {
        let mut best: Option<(usize, f64)> = None;
        for &c in candidates {
            if parents.contains(&c) {
                continue;
            }
            parents.push(c);
            let s = score.local(node, &parents);
            parents.pop();
            if s > current && best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        match best {
            Some((c, s)) => {
                parents.push(c);
                current = s;
            }
            None => break,
        }
    }
    loop {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..parents.len() {
            let mut reduced = parents.clone();
            reduced.remove(k);
            let s = score.local(node, &reduced);
            if s > current && best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, s)) => {
                parents.remove(k);
                current = s;
            }
            None => break,
        }
    }
    parents.sort_unstable();
    (parents, current)
}

fn check_permutation(order: &[usize], p: usize) -> Result<()> {
    let mut seen = vec![false; p];
    if order.len() != p {
        return Err(Error::dim("permutation length", p, order.len()));
    }
    for &v in order {
        if v >= p || seen[v] {
            return Err(Error::Contract(format!("{order:?} is not a permutation of 0..{p}")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// DAG induced by `order` under the given score.
pub fn dag_from_order(bic: &BicScore, names: &[String], order: &[usize]) -> Result<Dag> {
    check_permutation(order, bic.n_vars())?;
    let mut cached = CachedScore::new(bic);
    let mut parents = vec![Vec::new(); order.len()];
    for k in 0..order.len() {
        parents[order[k]] = grow_shrink(&mut cached, order[k], &order[..k]).0;
    }
    Dag::from_parents(names.to_vec(), parents)
}

pub fn dag_from_permutation(dataset: &CausalDataset, order: &[usize], penalty: f64) -> Result<Dag> {
    dag_from_order(&BicScore::new(dataset, penalty), &dataset.columns, order)
}

fn ancestors_of(v: usize, parents: &[Vec<usize>]) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([v]);
    let mut stack = vec![v];
    while let Some(u) = stack.pop() {
        for &q in &parents[u] {
            if seen.insert(q) {
                stack.push(q);
            }
        }
    }
    seen
}

/// Tucks the element at position `j` in front of the element at position
/// `i < j`. The element at `j` moves together with those of its ancestors
/// (under `parents`) that sit strictly between the two positions; the moved
/// block and the remainder each keep their relative order. `i == j` is the
/// identity.
pub fn tuck(order: &[usize], parents: &[Vec<usize>], i: usize, j: usize) -> Result<Vec<usize>> {
    if i == j {
        return Ok(order.to_vec());
    }
    if i > j || j >= order.len() {
        return Err(Error::Contract(format!("tuck needs i < j < {} (got {i}, {j})", order.len())));
    }
    let anc = ancestors_of(order[j], parents);
    let mut out = order[..i].to_vec();
    let (moved, stay): (Vec<usize>, Vec<usize>) = order[i + 1..=j].iter().partition(|v| anc.contains(v));
    out.extend(moved);
    out.push(order[i]);
    out.extend(stay);
    out.extend_from_slice(&order[j + 1..]);
    Ok(out)
}

struct Search<'a> {
    score: CachedScore<'a>,
    order: Vec<usize>,
    pos: Vec<usize>,
    parents: Vec<Vec<usize>>,
    local: Vec<f64>,
    rng: Rng,
}

impl<'a> Search<'a> {
    fn new(bic: &'a BicScore, order: Vec<usize>, rng: Rng) -> Self {
        let p = order.len();
        let mut s = Self {
            score: CachedScore::new(bic),
            order,
            pos: vec![0; p],
            parents: vec![Vec::new(); p],
            local: vec![0.0; p],
            rng,
        };
        s.refresh(0, p.saturating_sub(1));
        s
    }

    fn total(&self) -> f64 {
        self.local.iter().sum()
    }

    /// Recomputes parents for positions `lo..=hi`.
    fn refresh(&mut self, lo: usize, hi: usize) {
        for k in 0..self.order.len() {
            self.pos[self.order[k]] = k;
        }
        for k in lo..=hi.min(self.order.len().saturating_sub(1)) {
            let v = self.order[k];
            let (ps, s) = grow_shrink(&mut self.score, v, &self.order[..k]);
            self.parents[v] = ps;
            self.local[v] = s;
        }
    }

    fn dfs(&mut self, depth: usize, flipped: &BTreeSet<(usize, usize)>, history: &mut Vec<BTreeSet<(usize, usize)>>) -> bool {
        let mut ys: Vec<usize> = self.order.clone();
        ys.shuffle(&mut self.rng);
        for y in ys {
            let mut y_parents = self.parents[y].clone();
            y_parents.shuffle(&mut self.rng);
            for x in y_parents {
                // The parent set may have changed after an unsuccessful
                // probe was undone; skip stale pairs.
                if !self.parents[y].contains(&x) {
                    continue;
                }
                let mut x_family: Vec<usize> = self.parents[x].clone();
                x_family.push(x);
                x_family.sort_unstable();
                let covered = x_family == self.parents[y];
                if !history.is_empty() && !covered {
                    continue;
                }
                let (i, j) = (self.pos[x], self.pos[y]);
                let saved_order = self.order.clone();
                let saved_parents: Vec<(usize, Vec<usize>, f64)> = self.order[i..=j]
                    .iter()
                    .map(|&v| (v, self.parents[v].clone(), self.local[v]))
                    .collect();
                let old = self.total();
                self.order = tuck(&self.order, &self.parents, i, j).expect("i < j by construction");
                self.refresh(i, j);
                let new = self.total();
                if new > old + SCORE_TOL {
                    return true;
                }
                if depth > 0 && (new - old).abs() <= SCORE_TOL {
                    let mut next = flipped.clone();
                    let key = (x.min(y), x.max(y));
                    if !next.remove(&key) {
                        next.insert(key);
                    }
                    if !history.contains(&next) {
                        history.push(next.clone());
                        let improved = self.dfs(depth - 1, &next, history);
                        history.pop();
                        if improved {
                            return true;
                        }
                    }
                }
                self.order = saved_order;
                for (v, ps, s) in saved_parents {
                    self.parents[v] = ps;
                    self.local[v] = s;
                }
                for k in i..=j {
                    self.pos[self.order[k]] = k;
                }
            }
        }
        false
    }

    fn run(&mut self, depth: usize) {
        let mut history = Vec::new();
        while self.dfs(depth - 1, &BTreeSet::new(), &mut history) {}
    }
}

/// Runs the tuck search from a given starting permutation.
pub fn grasp_from_order(bic: &BicScore, names: &[String], order: Vec<usize>, depth: usize, seed: u64) -> Result<GraspResult> {
    if depth == 0 {
        return Err(Error::Contract("grasp depth must be at least 1".into()));
    }
    check_permutation(&order, bic.n_vars())?;
    let mut search = Search::new(bic, order, rng_from_seed(seed));
    let start_score = search.total();
    search.run(depth);
    let dag = Dag::from_parents(names.to_vec(), search.parents.clone())?;
    Ok(GraspResult {
        score: bic.score(&dag),
        dag,
        order: search.order,
        start_score,
        restart: 0,
    })
}

/// Seeded random restarts of the tuck search (run in parallel, reduced in
/// restart order); the best-scoring DAG wins, ties going to the earlier
/// restart.
pub fn grasp_search(dataset: &CausalDataset, config: &GraspConfig, seed: u64) -> Result<GraspResult> {
    let p = dataset.n_cols();
    let bic = BicScore::new(dataset, config.penalty);
    let restarts = config.restarts.max(1);
    let results: Vec<Result<GraspResult>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let mut rng = rng_from_seed(s);
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng);
            let mut res = grasp_from_order(&bic, &dataset.columns, order, config.depth, derive_seed(s, 1))?;
            res.restart = r;
            Ok(res)
        })
        .collect();
    let mut best: Option<GraspResult> = None;
    for r in results {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.score > b.score) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}
