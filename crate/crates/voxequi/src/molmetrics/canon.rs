//! Canonical graph labeling for uniqueness counting.
//!
//! Colors seed from (element, valency), refine by Weisfeiler-Lehman
//! neighborhood hashing, and remaining ties are broken by
//! individualization-refinement: each tied vertex in the first non-singleton
//! cell is individualized in turn and the lexicographically minimal
//! certificate wins. Certificates are full canonical forms, so collisions
//! between non-isomorphic graphs are detectable by direct comparison.

use super::MolGraph;
use std::collections::HashMap;

/// Canonical certificate: equal strings iff the canonicalizer considers the
/// graphs isomorphic (verified against brute force on small graphs).
pub fn canonical_form(g: &MolGraph) -> String {
    let n = g.n_atoms();
    if n == 0 {
        return String::from("empty");
    }
    let adj = g.adjacency();
    let valencies = g.valencies();
    let initial: Vec<u64> = g
        .elements
        .iter()
        .zip(&valencies)
        .map(|(e, v)| (e.channel() as u64) << 32 | *v as u64)
        .collect();
    let colors = refine(&initial, &adj);
    search(g, &adj, &colors)
}

/// Uniqueness = distinct canonical forms / total.
pub fn uniqueness_fraction(graphs: &[MolGraph]) -> f64 {
    if graphs.is_empty() {
        return 0.0;
    }
    let forms: std::collections::HashSet<String> =
        graphs.iter().map(canonical_form).collect();
    forms.len() as f64 / graphs.len() as f64
}

/// WL refinement to a stable coloring; colors are dense ranks that are
/// deterministic across vertex orderings.
fn refine(colors: &[u64], adj: &[Vec<(usize, u8)>]) -> Vec<u64> {
    let n = colors.len();
    let mut colors = colors.to_vec();
    loop {
        // signature: (own color, sorted multiset of (edge order, neighbor color))
        let mut sigs: Vec<(u64, Vec<(u8, u64)>)> = Vec::with_capacity(n);
        for i in 0..n {
            let mut nb: Vec<(u8, u64)> = adj[i].iter().map(|&(j, o)| (o, colors[j])).collect();
            nb.sort_unstable();
            sigs.push((colors[i], nb));
        }
        let mut uniq: Vec<&(u64, Vec<(u8, u64)>)> = sigs.iter().collect();
        uniq.sort_unstable();
        uniq.dedup();
        let rank: HashMap<&(u64, Vec<(u8, u64)>), u64> =
            uniq.iter().enumerate().map(|(r, s)| (*s, r as u64)).collect();
        let next: Vec<u64> = sigs.iter().map(|s| rank[s]).collect();
        let stable_classes = {
            let before: std::collections::HashSet<u64> = colors.iter().copied().collect();
            let after: std::collections::HashSet<u64> = next.iter().copied().collect();
            before.len() == after.len()
        };
        let unchanged_partition = partition_eq(&colors, &next);
        colors = next;
        if stable_classes && unchanged_partition {
            break;
        }
    }
    colors
}

fn partition_eq(a: &[u64], b: &[u64]) -> bool {
    // same partition iff the a-color <-> b-color correspondence is bijective
    let mut fwd: HashMap<u64, u64> = HashMap::new();
    let mut bwd: HashMap<u64, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

fn search(g: &MolGraph, adj: &[Vec<(usize, u8)>], colors: &[u64]) -> String {

    let mut classes: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, &c) in colors.iter().enumerate() {
        classes.entry(c).or_default().push(i);
    }
    let mut target: Option<(u64, &Vec<usize>)> = None;
    let mut keys: Vec<u64> = classes.keys().copied().collect();
    keys.sort_unstable();
    for k in keys {
        if classes[&k].len() > 1 {
            target = Some((k, &classes[&k]));
            break;
        }
    }
    match target {
        None => certificate(g, colors),
        Some((_, cell)) => {
            let mut best: Option<String> = None;
            for &v in cell {
                let mut branched = colors.to_vec();
                // individualize v below every existing color, then re-rank
                branched[v] = u64::MAX;
                let rebased = rerank(&branched);
                let refined = refine(&rebased, adj);
                let cert = search(g, adj, &refined);
                if best.as_ref().map_or(true, |b| cert < *b) {
                    best = Some(cert);
                }
            }
            best.unwrap()
        }
    }
}

fn rerank(colors: &[u64]) -> Vec<u64> {
    let mut uniq: Vec<u64> = colors.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let rank: HashMap<u64, u64> = uniq.iter().enumerate().map(|(r, c)| (*c, r as u64)).collect();
    colors.iter().map(|c| rank[c]).collect()
}

/// Serialize the graph under the discrete coloring: node elements in color
/// order plus the sorted relabeled edge list.
fn certificate(g: &MolGraph, colors: &[u64]) -> String {
    let n = colors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| colors[i]);
    let mut pos = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        pos[i] = rank;
    }
    let mut out = String::new();
    for &i in &order {
        out.push_str(g.elements[i].symbol());
        out.push(',');
    }
    out.push('|');
    let mut edges: Vec<(usize, usize, u8)> = g
        .bonds
        .iter()
        .map(|&(i, j, o)| {
            let (a, b) = (pos[i].min(pos[j]), pos[i].max(pos[j]));
            (a, b, o)
        })
        .collect();
    edges.sort_unstable();
    for (a, b, o) in edges {
        out.push_str(&format!("{a}-{b}:{o};"));
    }
    out
}
