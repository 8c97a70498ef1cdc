use std::collections::BTreeSet;

use effcov::graph::{CausalDag, GraphError, Orientation};
use proptest::prelude::*;

fn name(i: usize) -> String {
    format!("v{i}")
}

/// Random DAG on `n` nodes: edges only go from lower to higher index.
fn dag_strategy(max_nodes: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..=max_nodes).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        let k = pairs.len();
        (Just(n), proptest::collection::vec(any::<bool>(), k)).prop_map(move |(n, keep)| {
            let edges = pairs
                .iter()
                .zip(keep)
                .filter(|(_, k)| *k)
                .map(|(p, _)| *p)
                .collect();
            (n, edges)
        })
    })
}

fn build(n: usize, edges: &[(usize, usize)]) -> CausalDag {
    let names: Vec<String> = (0..n).map(name).collect();
    let edges: Vec<(String, String)> = edges.iter().map(|&(a, b)| (name(a), name(b))).collect();
    CausalDag::new(names, edges).unwrap()
}

/// d-separation via the moral graph of the ancestral set: separated iff no
/// undirected path avoids `cond`.
fn moral_oracle(
    n: usize,
    edges: &[(usize, usize)],
    a: &[usize],
    b: &[usize],
    cond: &[usize],
) -> bool {
    let mut keep = vec![false; n];
    let mut stack: Vec<usize> = a.iter().chain(b).chain(cond).copied().collect();
    while let Some(v) = stack.pop() {
        if !std::mem::replace(&mut keep[v], true) {
            stack.extend(edges.iter().filter(|e| e.1 == v).map(|e| e.0));
        }
    }
    let mut adj = vec![BTreeSet::new(); n];
    for &(p, c) in edges {
        if keep[p] && keep[c] {
            adj[p].insert(c);
            adj[c].insert(p);
        }
    }
    for c in 0..n {
        if !keep[c] {
            continue;
        }
        let ps: Vec<usize> = edges.iter().filter(|e| e.1 == c).map(|e| e.0).collect();
        for &p in &ps {
            for &q in &ps {
                if p != q {
                    adj[p].insert(q);
                }
            }
        }
    }
    let mut seen = vec![false; n];
    let mut stack: Vec<usize> = a.to_vec();
    while let Some(v) = stack.pop() {
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        if b.contains(&v) {
            return false;
        }
        stack.extend(adj[v].iter().copied().filter(|w| !cond.contains(w)));
    }
    true
}

fn names(idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| name(i)).collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

proptest! {
    #[test]
    fn dsep_matches_moralisation((n, edges) in dag_strategy(8), roles in proptest::collection::vec(0u8..4, 8)) {
        let g = build(n, &edges);
        let pick = |r: u8| (0..n).filter(|&i| roles[i] == r).collect::<Vec<_>>();
        let (a, b, c) = (pick(1), pick(2), pick(3));
        prop_assume!(!a.is_empty() && !b.is_empty());
        let (na, nb, nc) = (names(&a), names(&b), names(&c));
        let got = g.d_separated(&strs(&na), &strs(&nb), &strs(&nc)).unwrap();
        prop_assert_eq!(got, moral_oracle(n, &edges, &a, &b, &c));
    }

    #[test]
    fn dsep_is_symmetric((n, edges) in dag_strategy(7), roles in proptest::collection::vec(0u8..4, 7)) {
        let g = build(n, &edges);
        let pick = |r: u8| names(&(0..n).filter(|&i| roles[i] == r).collect::<Vec<_>>());
        let (a, b, c) = (pick(1), pick(2), pick(3));
        prop_assume!(!a.is_empty() && !b.is_empty());
        prop_assert_eq!(
            g.d_separated(&strs(&a), &strs(&b), &strs(&c)).unwrap(),
            g.d_separated(&strs(&b), &strs(&a), &strs(&c)).unwrap()
        );
    }

    #[test]
    fn paths_are_simple_and_follow_edges((n, edges) in dag_strategy(7)) {
        let g = build(n, &edges);
        let (a, b) = (name(0), name(n - 1));
        let paths = g.enumerate_paths(&a, &b).unwrap();
        let mut seen = BTreeSet::new();
        for p in &paths {
            let nodes = p.nodes();
            prop_assert_eq!(nodes.first().copied(), Some(a.as_str()));
            prop_assert_eq!(nodes.last().copied(), Some(b.as_str()));
            let uniq: BTreeSet<&str> = nodes.iter().copied().collect();
            prop_assert_eq!(uniq.len(), nodes.len());
            for s in p.steps() {
                let ok = match s.orientation {
                    Orientation::Forward => g.has_edge(&s.from, &s.to),
                    Orientation::Backward => g.has_edge(&s.to, &s.from),
                };
                prop_assert!(ok);
            }
            prop_assert!(seen.insert(p.to_string()));
        }
        let keys: Vec<Vec<&str>> = paths.iter().map(|p| p.nodes()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
    }

    #[test]
    fn no_backdoor_paths_means_blocked((n, edges) in dag_strategy(7), roles in proptest::collection::vec(0u8..2, 7)) {
        let g = build(n, &edges);
        let (x, y) = (name(0), name(n - 1));
        let cond: Vec<String> = (1..n - 1).filter(|&i| roles[i] == 1).map(name).collect();
        let blocked = g.backdoor_blocked(&x, &y, &strs(&cond)).unwrap();
        if g.backdoor_paths(&x, &y).unwrap().is_empty() {
            prop_assert!(blocked);
        }
        // every backdoor path is collider-free and enters x
        for p in g.backdoor_paths(&x, &y).unwrap() {
            prop_assert!(p.starts_with_incoming());
            prop_assert!(p.colliders().is_empty());
        }
    }

    #[test]
    fn text_round_trip((n, edges) in dag_strategy(7)) {
        let g = build(n, &edges);
        prop_assert_eq!(CausalDag::parse(&g.to_text()).unwrap(), g);
    }
}

#[test]
fn u_separates_modulators() {
    let g = CausalDag::from_edges(&[
        ("U", "U_X"),
        ("U", "U_Y"),
        ("U_X", "X"),
        ("U_Y", "Y"),
        ("Z", "X"),
        ("Z", "Y"),
        ("X", "Y"),
    ])
    .unwrap();
    assert!(g.d_separated(&["U_X"], &["U_Y"], &["U"]).unwrap());
    assert!(!g.d_separated(&["U_X"], &["U_Y"], &[]).unwrap());
    // Y is a collider on every remaining path
    assert!(g.d_separated(&["U_X"], &["U_Y"], &["U", "X"]).unwrap());
    assert!(!g.d_separated(&["U_X"], &["U_Y"], &["U", "Y"]).unwrap());
    assert!(g.backdoor_blocked("X", "Y", &["Z", "U"]).unwrap());
    assert!(g.backdoor_blocked("X", "Y", &["Z", "U_X"]).unwrap());
    assert!(!g.backdoor_blocked("X", "Y", &["Z"]).unwrap());
}

#[test]
fn set_errors() {
    let g = CausalDag::from_edges(&[("X", "Y")]).unwrap();
    assert!(matches!(
        g.d_separated(&["X"], &["X"], &[]),
        Err(GraphError::OverlappingSets(_))
    ));
    assert!(matches!(
        g.backdoor_blocked("X", "Y", &["Y"]),
        Err(GraphError::OverlappingSets(_))
    ));
    assert_eq!(
        g.d_separated(&["X"], &["Q"], &[]),
        Err(GraphError::UnknownNode("Q".into()))
    );
}
