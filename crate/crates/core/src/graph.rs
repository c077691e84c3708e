//! Undirected co-occurrence item graph and its top-r neighbor sampling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::SessionCorpus;
use crate::error::{Error, Result};

/// Symmetric weighted adjacency. Each node's list is sorted by neighbor index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemGraph {
    adjacency: Vec<Vec<(usize, u64)>>,
}

impl ItemGraph {
    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, u64)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<u64> {
        let list = self.adjacency.get(a)?;
        list.binary_search_by_key(&b, |&(j, _)| j)
            .ok()
            .map(|pos| list[pos].1)
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sum of weights over undirected edges.
    pub fn total_weight(&self) -> u64 {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().filter(move |&&(j, _)| i < j))
            .map(|&(_, w)| w)
            .sum()
    }

    /// `(i, j, w)` for every undirected edge with `i < j`, in index order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(i, l)| {
            l.iter()
                .filter(move |&&(j, _)| i < j)
                .map(move |&(j, w)| (i, j, w))
        })
    }

    fn from_pairs(n_nodes: usize, pairs: HashMap<(usize, usize), u64>) -> Self {
        let mut adjacency = vec![Vec::new(); n_nodes];
        for ((a, b), w) in pairs {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in adjacency.iter_mut() {
            list.sort_unstable();
        }
        ItemGraph { adjacency }
    }
}

/// Counts every pair of positions at distance `1..=k` inside a session whose
/// items differ. `k` is a radius: the window reaches `k` positions each side.
pub fn build_graph(corpus: &SessionCorpus, k: usize) -> Result<ItemGraph> {
    if k == 0 {
        return Err(Error::invalid("window radius k must be at least 1"));
    }
    if corpus.sessions.is_empty() {
        return Err(Error::Empty("cannot build a graph from an empty corpus".into()));
    }
    let n = corpus.n_items();
    let mut pairs: HashMap<(usize, usize), u64> = HashMap::new();
    for s in &corpus.sessions {
        let items = &s.items;
        for p in 0..items.len() {
            for q in (p + 1)..items.len().min(p + k + 1) {
                let (a, b) = (items[p], items[q]);
                if a == b {
                    continue;
                }
                if a.max(b) >= n {
                    return Err(Error::invalid(format!(
                        "item index {} outside vocabulary of {n}",
                        a.max(b)
                    )));
                }
                *pairs.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
    }
    Ok(ItemGraph::from_pairs(n, pairs))
}

/// Per-node neighbor lists used by propagation: at most `r` entries each,
/// highest weight first, ties by ascending neighbor index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledAdjacency {
    lists: Vec<Vec<usize>>,
}

impl SampledAdjacency {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        for (i, l) in lists.iter().enumerate() {
            if let Some(&bad) = l.iter().find(|&&j| j >= n || j == i) {
                return Err(Error::invalid(format!(
                    "neighbor {bad} of node {i} is invalid for {n} nodes"
                )));
            }
        }
        Ok(Self { lists })
    }

    /// Adjacency with no edges.
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            lists: vec![Vec::new(); n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.lists[node]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }
}

pub fn sample_neighbors(graph: &ItemGraph, r: usize) -> Result<SampledAdjacency> {
    if r == 0 {
        return Err(Error::invalid("neighbor sample size r must be at least 1"));
    }
    let lists = graph
        .adjacency
        .iter()
        .map(|list| {
            let mut sorted = list.clone();
            sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            sorted.into_iter().take(r).map(|(j, _)| j).collect()
        })
        .collect();
    Ok(SampledAdjacency { lists })
}

pub fn format_graph(graph: &ItemGraph) -> String {
    let mut out = String::new();
    for (i, j, w) in graph.edges() {
        let _ = writeln!(out, "{i}\t{j}\t{w}");
    }
    out
}

pub fn save_graph(graph: &ItemGraph, path: &Path) -> Result<()> {
    std::fs::write(path, format_graph(graph)).map_err(|e| Error::io(path, e))
}

/// Parses `i<TAB>j<TAB>w` lines. Without `n_nodes` the node count is one
/// past the largest index seen.
pub fn parse_graph(text: &str, n_nodes: Option<usize>) -> Result<ItemGraph> {
    let mut pairs = HashMap::new();
    let mut max_index = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: n + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, got {line:?}")));
        }
        let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(format!("bad number {s:?}")));
        let (i, j, w) = (parse(fields[0])? as usize, parse(fields[1])? as usize, parse(fields[2])?);
        if i >= j {
            return Err(bad(format!("expected i < j, got {i} >= {j}")));
        }
        if w == 0 {
            return Err(bad("edge weight must be positive".into()));
        }
        if pairs.insert((i, j), w).is_some() {
            return Err(bad(format!("duplicate edge ({i}, {j})")));
        }
        max_index = Some(max_index.map_or(j, |m: usize| m.max(j)));
    }
    let inferred = max_index.map_or(0, |m| m + 1);
    let n = match n_nodes {
        Some(n) if n < inferred => {
            return Err(Error::invalid(format!(
                "graph references node {} but only {n} nodes declared",
                inferred - 1
            )))
        }
        Some(n) => n,
        None => inferred,
    };
    Ok(ItemGraph::from_pairs(n, pairs))
}

pub fn load_graph(path: &Path, n_nodes: Option<usize>) -> Result<ItemGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text, n_nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Session, Vocab};

    fn corpus(sessions: &[&[usize]], n: usize) -> SessionCorpus {
        SessionCorpus {
            sessions: sessions
                .iter()
                .enumerate()
                .map(|(i, s)| Session {
                    id: i.to_string(),
                    items: s.to_vec(),
                })
                .collect(),
            vocab: Vocab::from_labels((0..n).map(|i| format!("v{i}"))).unwrap(),
        }
    }

    #[test]
    fn radius_one_links_adjacent_items() {
        let g = build_graph(&corpus(&[&[0, 1, 2]], 3), 1).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1, 1), (1, 2, 1)]);
    }

    #[test]
    fn radius_two_and_repeated_session() {
        let g = build_graph(&corpus(&[&[0, 1, 2]], 3), 2).unwrap();
        assert_eq!(
            g.edges().collect::<Vec<_>>(),
            vec![(0, 1, 1), (0, 2, 1), (1, 2, 1)]
        );
        let g2 = build_graph(&corpus(&[&[0, 1, 2], &[0, 1, 2]], 3), 2).unwrap();
        assert_eq!(
            g2.edges().collect::<Vec<_>>(),
            vec![(0, 1, 2), (0, 2, 2), (1, 2, 2)]
        );
    }

    #[test]
    fn worked_example_neighbors_of_v3() {
        // v1..v6 as indices 1..6. v3 reaches two positions each side.
        let c = corpus(&[&[1, 2, 3, 4], &[3, 5], &[6, 7, 3], &[7, 0]], 8);
        let g = build_graph(&c, 2).unwrap();
        let n3: Vec<usize> = g.neighbors(3).iter().map(|&(j, _)| j).collect();
        assert_eq!(n3, vec![1, 2, 4, 5, 6, 7]);
        // drop v7 from the third session to match {v1,v2,v4,v5,v6}
        let c = corpus(&[&[1, 2, 3, 4], &[3, 5], &[6, 3]], 7);
        let g = build_graph(&c, 2).unwrap();
        let n3: Vec<usize> = g.neighbors(3).iter().map(|&(j, _)| j).collect();
        assert_eq!(n3, vec![1, 2, 4, 5, 6]);
    }

    #[test]
    fn self_pairs_skipped() {
        let g = build_graph(&corpus(&[&[0, 0, 1]], 2), 2).unwrap();
        assert_eq!(g.weight(0, 0), None);
        assert_eq!(g.weight(0, 1), Some(2));
    }

    #[test]
    fn empty_corpus_or_zero_radius() {
        assert!(build_graph(&corpus(&[], 2), 2).is_err());
        assert!(build_graph(&corpus(&[&[0, 1]], 2), 0).is_err());
    }

    #[test]
    fn sampling_tie_break_and_small_degree() {
        // node 0 has neighbors 1:5, 2:5, 3:1
        let c = corpus(
            &[
                &[0, 1], &[0, 1], &[0, 1], &[0, 1], &[0, 1],
                &[2, 0], &[2, 0], &[2, 0], &[2, 0], &[2, 0],
                &[0, 3],
            ],
            4,
        );
        let g = build_graph(&c, 1).unwrap();
        let s = sample_neighbors(&g, 2).unwrap();
        assert_eq!(s.neighbors(0), &[1, 2]);
        let s12 = sample_neighbors(&g, 12).unwrap();
        assert_eq!(s12.neighbors(0), &[1, 2, 3]);
        assert_eq!(s12.neighbors(3), &[0]);
    }

    #[test]
    fn sampling_r1_on_toy_graph() {
        let g = build_graph(&corpus(&[&[0, 1, 2]], 3), 2).unwrap();
        let s = sample_neighbors(&g, 1).unwrap();
        assert_eq!(s.neighbors(1), &[0]);
    }

    #[test]
    fn isolated_nodes_get_empty_lists() {
        let g = build_graph(&corpus(&[&[0, 1]], 3), 1).unwrap();
        let s = sample_neighbors(&g, 12).unwrap();
        assert!(s.neighbors(2).is_empty());
    }

    #[test]
    fn graph_file_round_trip() {
        let c = corpus(&[&[0, 1, 2, 0, 3], &[3, 2]], 5);
        let g = build_graph(&c, 2).unwrap();
        let text = format_graph(&g);
        assert_eq!(parse_graph(&text, Some(5)).unwrap(), g);
        assert!(parse_graph("1\t0\t1\n", None).is_err());
        assert!(parse_graph("0\t1\tx\n", None).is_err());
    }
}
