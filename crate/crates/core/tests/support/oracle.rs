//! Brute-force graph oracles built on a transitive-closure matrix. They share
//! no code with the library's traversal routines.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// `reach[i][j]`: a path of length zero or more leads from i to j.
pub fn closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
    }
    for k in 0..n {
        let via = reach[k].clone();
        for row in reach.iter_mut() {
            if row[k] {
                for (cell, &r) in row.iter_mut().zip(&via) {
                    *cell |= r;
                }
            }
        }
    }
    reach
}

pub fn orphans(n: usize, edges: &[(usize, usize)], entry: usize) -> BTreeSet<usize> {
    let reach = closure(n, edges);
    (0..n).filter(|&j| !reach[entry][j]).collect()
}

/// Mutual reachability classes, sorted.
pub fn sccs(n: usize, edges: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let reach = closure(n, edges);
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let class: BTreeSet<usize> = (0..n).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &class {
            seen[j] = true;
        }
        out.push(class);
    }
    out.sort();
    out
}

/// Cyclic classes from which nothing outside the class is reachable.
pub fn traps(n: usize, edges: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let reach = closure(n, edges);
    sccs(n, edges)
        .into_iter()
        .filter(|class| {
            let first = *class.iter().next().unwrap();
            let cyclic = class.len() > 1 || edges.contains(&(first, first));
            let closed = (0..n).all(|j| !reach[first][j] || class.contains(&j));
            cyclic && closed
        })
        .collect()
}

/// Breadth-first reachability from `entry` over adjacency lists.
pub fn bfs_orphans(n: usize, edges: &[(usize, usize)], entry: usize) -> BTreeSet<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([entry]);
    seen[entry] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}
