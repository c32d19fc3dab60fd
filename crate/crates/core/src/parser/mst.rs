//! Maximum spanning arborescence decoding (Chu-Liu/Edmonds) with a
//! single-root constraint.

use super::ScoreMatrix;

/// Best single-root dependency tree for `scores`.
///
/// Each root candidate `k` is tried in turn with every other arc leaving the
/// root disabled; the candidate with the highest tree score wins (lowest `k`
/// on ties). Returns `heads[i]` for tokens `1..=n` (0 = root).
pub fn decode_mst(scores: &ScoreMatrix) -> Vec<usize> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let base = scores.to_nested();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in 1..=n {
        let mut s = base.clone();
        for (v, score) in s[0].iter_mut().enumerate() {
            if v != k {
                *score = f64::NEG_INFINITY;
            }
        }
        let parents = chu_liu_edmonds(&s);
        let total = tree_score(&base, &parents);
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, parents));
        }
    }
    let (_, parents) = best.expect("n >= 1");
    parents[1..].to_vec()
}

/// Sum of arc scores of a parent array (index 0 is ignored).
pub fn tree_score(scores: &[Vec<f64>], parents: &[usize]) -> f64 {
    parents
        .iter()
        .enumerate()
        .skip(1)
        .map(|(v, &u)| scores[u][v])
        .sum()
}

/// Maximum spanning arborescence rooted at node 0 of a dense graph where
/// `scores[u][v]` is the weight of the arc `u → v`. Returns the parent of
/// every node; `parents[0]` is 0.
pub fn chu_liu_edmonds(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    let mut parents = vec![0; n];
    if n <= 1 {
        return parents;
    }

    // Highest scoring incoming arc per node; ties go to the lowest index.
    for (v, parent) in parents.iter_mut().enumerate().skip(1) {
        let mut best = usize::MAX;
        for u in (0..n).filter(|&u| u != v) {
            if best == usize::MAX || scores[u][v] > scores[best][v] {
                best = u;
            }
        }
        *parent = best;
    }

    let Some(cycle) = find_cycle(&parents) else {
        return parents;
    };
    let in_cycle: Vec<bool> = (0..n).map(|v| cycle.contains(&v)).collect();

    // Contracted graph: the cycle becomes the last node.
    let outside: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    let m = outside.len() + 1;
    let c = m - 1;
    let mut sub = vec![vec![f64::NEG_INFINITY; m]; m];
    // For arcs entering the cycle: which cycle node they enter.
    let mut enters = vec![usize::MAX; m];
    // For arcs leaving the cycle: which cycle node they leave from.
    let mut leaves = vec![usize::MAX; m];

    for (a, &u) in outside.iter().enumerate() {
        for (b, &v) in outside.iter().enumerate() {
            if a != b {
                sub[a][b] = scores[u][v];
            }
        }
        for &v in &cycle {
            let gain = scores[u][v] - scores[parents[v]][v];
            if enters[a] == usize::MAX || gain > sub[a][c] {
                sub[a][c] = gain;
                enters[a] = v;
            }
        }
        for &w in &cycle {
            if leaves[a] == usize::MAX || scores[w][u] > sub[c][a] {
                sub[c][a] = scores[w][u];
                leaves[a] = w;
            }
        }
    }

    let contracted = chu_liu_edmonds(&sub);

    let mut result = parents.clone();
    for (b, &v) in outside.iter().enumerate().skip(1) {
        let p = contracted[b];
        result[v] = if p == c { leaves[b] } else { outside[p] };
    }
    // Break the cycle where the chosen entering arc lands.
    let entering_from = contracted[c];
    let entry = enters[entering_from];
    result[entry] = outside[entering_from];
    result[0] = 0;
    result
}

fn find_cycle(parents: &[usize]) -> Option<Vec<usize>> {
    let n = parents.len();
    // 0 = unseen, 1 = on current walk, 2 = finished.
    let mut state = vec![0u8; n];
    state[0] = 2;
    for start in 1..n {
        let mut walk = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            walk.push(v);
            v = parents[v];
        }
        if state[v] == 1 {
            let pos = walk.iter().position(|&w| w == v).expect("on walk");
            return Some(walk[pos..].to_vec());
        }
        for w in walk {
            state[w] = 2;
        }
    }
    None
}
