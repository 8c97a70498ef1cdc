//! Causal diagrams: paths, colliders, d-separation and backdoor blocking.
//!
//! Nodes are case-sensitive strings. A [`CausalDag`] is immutable once built;
//! internally nodes are indexed in sorted-name order so every query is
//! deterministic.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of paths [`CausalDag::enumerate_paths`] will produce.
pub const PATH_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("self-edge on node `{0}`")]
    SelfEdge(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("graph contains a directed cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("more than {0} paths between the query nodes")]
    TooManyPaths(usize),
    #[error("`{0}` is not an interior node of the path")]
    NotInterior(String),
    #[error("node `{0}` appears in more than one query set")]
    OverlappingSets(String),
    #[error("query endpoints must be distinct (got `{0}` twice)")]
    SameEndpoints(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Direction of the edge traversed by a [`Step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Orientation {
    /// The edge points along the walk: `from -> to`.
    Forward,
    /// The edge points against the walk: `from <- to`.
    Backward,
}

impl Orientation {
    fn flip(self) -> Self {
        match self {
            Orientation::Forward => Orientation::Backward,
            Orientation::Backward => Orientation::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Step {
    pub from: String,
    pub to: String,
    pub orientation: Orientation,
}

/// A simple path through the skeleton of a graph, keeping each edge's direction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path {
    steps: Vec<Step>,
}

impl Path {
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Node sequence from start to end.
    pub fn nodes(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        if let Some(first) = self.steps.first() {
            out.push(first.from.as_str());
        }
        out.extend(self.steps.iter().map(|s| s.to.as_str()));
        out
    }

    pub fn start(&self) -> Option<&str> {
        self.steps.first().map(|s| s.from.as_str())
    }

    pub fn end(&self) -> Option<&str> {
        self.steps.last().map(|s| s.to.as_str())
    }

    /// The same path walked from the other end.
    pub fn reversed(&self) -> Path {
        let steps = self
            .steps
            .iter()
            .rev()
            .map(|s| Step {
                from: s.to.clone(),
                to: s.from.clone(),
                orientation: s.orientation.flip(),
            })
            .collect();
        Path { steps }
    }

    /// True iff both edges adjacent to interior node `node` point into it.
    pub fn is_collider(&self, node: &str) -> Result<bool, GraphError> {
        let pos = self
            .steps
            .iter()
            .position(|s| s.to == node)
            .filter(|&i| i + 1 < self.steps.len())
            .ok_or_else(|| GraphError::NotInterior(node.to_string()))?;
        Ok(self.steps[pos].orientation == Orientation::Forward
            && self.steps[pos + 1].orientation == Orientation::Backward)
    }

    /// Interior nodes that are colliders on this path.
    pub fn colliders(&self) -> Vec<&str> {
        self.steps
            .windows(2)
            .filter(|w| {
                w[0].orientation == Orientation::Forward
                    && w[1].orientation == Orientation::Backward
            })
            .map(|w| w[0].to.as_str())
            .collect()
    }

    /// Interior nodes that are not colliders.
    pub fn non_colliders(&self) -> Vec<&str> {
        self.steps
            .windows(2)
            .filter(|w| {
                !(w[0].orientation == Orientation::Forward
                    && w[1].orientation == Orientation::Backward)
            })
            .map(|w| w[0].to.as_str())
            .collect()
    }

    /// A backdoor path starts with an arrow pointing into its first node.
    pub fn starts_with_incoming(&self) -> bool {
        self.steps
            .first()
            .is_some_and(|s| s.orientation == Orientation::Backward)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(first) = self.steps.first() {
            write!(f, "{}", first.from)?;
        }
        for s in &self.steps {
            let arrow = match s.orientation {
                Orientation::Forward => "->",
                Orientation::Backward => "<-",
            };
            write!(f, " {} {}", arrow, s.to)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DagRepr {
    #[serde(default)]
    nodes: Vec<String>,
    edges: Vec<(String, String)>,
}

/// Directed acyclic graph over named nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagRepr", into = "DagRepr")]
pub struct CausalDag {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl TryFrom<DagRepr> for CausalDag {
    type Error = GraphError;
    fn try_from(r: DagRepr) -> Result<Self, GraphError> {
        CausalDag::new(r.nodes, r.edges)
    }
}

impl From<CausalDag> for DagRepr {
    fn from(g: CausalDag) -> Self {
        DagRepr {
            nodes: g.names.clone(),
            edges: g
                .edges()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }
}

impl CausalDag {
    /// Builds a graph from explicit nodes plus edges; nodes mentioned only in
    /// edges are added implicitly.
    pub fn new<N, S, E, A, B>(nodes: N, edges: E) -> Result<Self, GraphError>
    where
        N: IntoIterator<Item = S>,
        S: Into<String>,
        E: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let edges: Vec<(String, String)> = edges
            .into_iter()
            .map(|(a, b)| (a.into(), b.into()))
            .collect();
        let mut set: BTreeSet<String> = nodes.into_iter().map(Into::into).collect();
        for (a, b) in &edges {
            set.insert(a.clone());
            set.insert(b.clone());
        }
        let names: Vec<String> = set.into_iter().collect();
        let index: BTreeMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let n = names.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for (a, b) in &edges {
            if a == b {
                return Err(GraphError::SelfEdge(a.clone()));
            }
            let (ia, ib) = (index[a], index[b]);
            if !seen.insert((ia, ib)) {
                return Err(GraphError::DuplicateEdge(a.clone(), b.clone()));
            }
            parents[ib].push(ia);
            children[ia].push(ib);
        }
        for v in parents.iter_mut().chain(children.iter_mut()) {
            v.sort_unstable();
        }
        let g = CausalDag {
            names,
            index,
            parents,
            children,
        };
        g.check_acyclic()?;
        Ok(g)
    }

    pub fn from_edges(edges: &[(&str, &str)]) -> Result<Self, GraphError> {
        Self::new(std::iter::empty::<String>(), edges.iter().copied())
    }

    /// Parses the line-oriented text format: `A -> B` per edge, `node C` for
    /// isolated nodes, `#` comments, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("node ") {
                let name = rest.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(GraphError::Parse {
                        line: line_no,
                        message: format!("bad node declaration `{line}`"),
                    });
                }
                nodes.push(name.to_string());
                continue;
            }
            let mut parts = line.split("->");
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(GraphError::Parse {
                    line: line_no,
                    message: format!("expected `A -> B`, got `{line}`"),
                });
            };
            let (a, b) = (a.trim(), b.trim());
            let valid = |s: &str| !s.is_empty() && !s.contains(char::is_whitespace);
            if !valid(a) || !valid(b) {
                return Err(GraphError::Parse {
                    line: line_no,
                    message: format!("expected `A -> B`, got `{line}`"),
                });
            }
            edges.push((a.to_string(), b.to_string()));
        }
        Self::new(nodes, edges)
    }

    /// Renders the graph in the text format accepted by [`CausalDag::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.names.iter().enumerate() {
            if self.parents[i].is_empty() && self.children[i].is_empty() {
                out.push_str(&format!("node {name}\n"));
            }
        }
        for (a, b) in self.edges() {
            out.push_str(&format!("{a} -> {b}\n"));
        }
        out
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        if self.topological_order().len() == self.names.len() {
            return Ok(());
        }
        let order: BTreeSet<usize> = self.topological_order().into_iter().collect();
        let stuck = (0..self.names.len())
            .filter(|i| !order.contains(i))
            .map(|i| self.names[i].clone())
            .collect();
        Err(GraphError::Cycle(stuck))
    }

    /// Kahn's algorithm, smallest ready index first.
    fn topological_order(&self) -> Vec<usize> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
        let mut out = Vec::with_capacity(indeg.len());
        while let Some(v) = ready.pop_first() {
            out.push(v);
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        out
    }

    /// Node names in a deterministic topological order.
    pub fn topological_names(&self) -> Vec<&str> {
        self.topological_order()
            .into_iter()
            .map(|i| self.names[i].as_str())
            .collect()
    }

    /// Node names, sorted.
    pub fn nodes(&self) -> &[String] {
        &self.names
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.index.contains_key(node)
    }

    pub fn index_of(&self, node: &str) -> Result<usize, GraphError> {
        self.index
            .get(node)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(node.to_string()))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.children.iter().enumerate().flat_map(move |(a, cs)| {
            cs.iter()
                .map(move |&b| (self.names[a].as_str(), self.names[b].as_str()))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&a), Some(&b)) => self.children[a].binary_search(&b).is_ok(),
            _ => false,
        }
    }

    pub fn parents_of(&self, node: &str) -> Result<Vec<&str>, GraphError> {
        let i = self.index_of(node)?;
        Ok(self.parents[i].iter().map(|&p| self.name(p)).collect())
    }

    pub fn parent_indices(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn child_indices(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    /// Descendants of `idx`, including `idx` itself.
    pub fn descendants(&self, idx: usize) -> Vec<bool> {
        let mut seen = vec![false; self.names.len()];
        let mut stack = vec![idx];
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.children[v].iter().copied());
        }
        seen
    }

    /// Ancestors of any node in `set`, including the set itself.
    pub fn ancestors_of_set(&self, set: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.names.len()];
        let mut stack: Vec<usize> = set.to_vec();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.parents[v].iter().copied());
        }
        seen
    }

    /// Copy of the graph with every edge into `node` removed.
    pub fn without_incoming(&self, node: &str) -> Result<CausalDag, GraphError> {
        let target = self.index_of(node)?;
        let mut g = self.clone();
        for &p in &self.parents[target] {
            g.children[p].retain(|&c| c != target);
        }
        g.parents[target].clear();
        Ok(g)
    }

    /// Every simple path between `a` and `b` in the skeleton, ordered
    /// lexicographically by node sequence.
    pub fn enumerate_paths(&self, a: &str, b: &str) -> Result<Vec<Path>, GraphError> {
        let ia = self.index_of(a)?;
        let ib = self.index_of(b)?;
        if ia == ib {
            return Err(GraphError::SameEndpoints(a.to_string()));
        }
        let mut raw: Vec<Vec<(usize, Orientation)>> = Vec::new();
        let mut on_path = vec![false; self.names.len()];
        let mut current = Vec::new();
        on_path[ia] = true;
        self.dfs_paths(ia, ib, &mut on_path, &mut current, &mut raw)?;
        let mut paths: Vec<Path> = raw
            .into_iter()
            .map(|steps| {
                let mut from = ia;
                let steps = steps
                    .into_iter()
                    .map(|(to, orientation)| {
                        let s = Step {
                            from: self.names[from].clone(),
                            to: self.names[to].clone(),
                            orientation,
                        };
                        from = to;
                        s
                    })
                    .collect();
                Path { steps }
            })
            .collect();
        paths.sort_by_cached_key(|p| p.nodes().into_iter().map(String::from).collect::<Vec<_>>());
        Ok(paths)
    }

    fn dfs_paths(
        &self,
        v: usize,
        target: usize,
        on_path: &mut [bool],
        current: &mut Vec<(usize, Orientation)>,
        out: &mut Vec<Vec<(usize, Orientation)>>,
    ) -> Result<(), GraphError> {
        let neighbours = self.children[v]
            .iter()
            .map(|&c| (c, Orientation::Forward))
            .chain(self.parents[v].iter().map(|&p| (p, Orientation::Backward)));
        for (w, o) in neighbours {
            if on_path[w] {
                continue;
            }
            current.push((w, o));
            if w == target {
                if out.len() >= PATH_LIMIT {
                    return Err(GraphError::TooManyPaths(PATH_LIMIT));
                }
                out.push(current.clone());
            } else {
                on_path[w] = true;
                self.dfs_paths(w, target, on_path, current, out)?;
                on_path[w] = false;
            }
            current.pop();
        }
        Ok(())
    }

    /// Collider-free paths from `x` to `y` whose first edge points into `x`.
    pub fn backdoor_paths(&self, x: &str, y: &str) -> Result<Vec<Path>, GraphError> {
        Ok(self
            .enumerate_paths(x, y)?
            .into_iter()
            .filter(|p| p.starts_with_incoming() && p.colliders().is_empty())
            .collect())
    }

    /// Whether `path` is blocked by `cond`: some non-collider lies in `cond`,
    /// or some collider has no descendant in `cond`.
    pub fn path_blocked(&self, path: &Path, cond: &[&str]) -> Result<bool, GraphError> {
        let cond_idx = self.indices(cond)?;
        let in_cond = |n: &str| cond.contains(&n);
        if path.non_colliders().into_iter().any(in_cond) {
            return Ok(true);
        }
        for c in path.colliders() {
            let desc = self.descendants(self.index_of(c)?);
            if !cond_idx.iter().any(|&z| desc[z]) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn indices(&self, names: &[&str]) -> Result<Vec<usize>, GraphError> {
        names.iter().map(|n| self.index_of(n)).collect()
    }

    /// Nodes reachable from `sources` along paths left active by `cond`
    /// (Bayes-ball). Sources themselves are not marked.
    pub fn reachable(&self, sources: &[usize], cond: &[usize]) -> Vec<bool> {
        let n = self.names.len();
        let mut observed = vec![false; n];
        for &c in cond {
            observed[c] = true;
        }
        let anc = self.ancestors_of_set(cond);
        // visited[v][0]: arrived from a child (moving up); [1]: from a parent.
        let mut visited = vec![[false; 2]; n];
        let mut reach = vec![false; n];
        let mut queue: VecDeque<(usize, usize)> = sources.iter().map(|&s| (s, 0)).collect();
        while let Some((v, dir)) = queue.pop_front() {
            if std::mem::replace(&mut visited[v][dir], true) {
                continue;
            }
            if !observed[v] {
                reach[v] = true;
            }
            if dir == 0 {
                if !observed[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
            } else {
                if !observed[v] {
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
                if anc[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                }
            }
        }
        for &s in sources {
            reach[s] = false;
        }
        reach
    }

    /// True iff every path between a node of `a` and a node of `b` is blocked
    /// by `cond`.
    pub fn d_separated(&self, a: &[&str], b: &[&str], cond: &[&str]) -> Result<bool, GraphError> {
        let (ia, ib, ic) = (self.indices(a)?, self.indices(b)?, self.indices(cond)?);
        let mut owner = BTreeMap::new();
        for (name, &i) in a
            .iter()
            .zip(&ia)
            .chain(b.iter().zip(&ib))
            .chain(cond.iter().zip(&ic))
        {
            if owner.insert(i, ()).is_some() {
                return Err(GraphError::OverlappingSets(name.to_string()));
            }
        }
        let reach = self.reachable(&ia, &ic);
        Ok(!ib.iter().any(|&j| reach[j]))
    }

    /// True iff every collider-free path from `x` to `y` that begins with an
    /// arrow into `x` passes through a member of `cond`.
    ///
    /// Paths carrying a collider are not considered, even if conditioning on
    /// a descendant of that collider would open them; use [`d_separated`] on
    /// [`CausalDag::without_outgoing`] for that stricter test.
    ///
    /// [`d_separated`]: CausalDag::d_separated
    pub fn backdoor_blocked(&self, x: &str, y: &str, cond: &[&str]) -> Result<bool, GraphError> {
        for n in [x, y] {
            if cond.contains(&n) {
                return Err(GraphError::OverlappingSets(n.to_string()));
            }
        }
        self.indices(cond)?;
        for p in self.backdoor_paths(x, y)? {
            if !self.path_blocked(&p, cond)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Copy of the graph with every edge out of `node` removed.
    pub fn without_outgoing(&self, node: &str) -> Result<CausalDag, GraphError> {
        let source = self.index_of(node)?;
        let mut g = self.clone();
        for &c in &self.children[source] {
            g.parents[c].retain(|&p| p != source);
        }
        g.children[source].clear();
        Ok(g)
    }
}
