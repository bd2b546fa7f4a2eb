use super::SparseSym;

/// Minimum-degree fill-reducing ordering.
///
/// Eliminates on an explicit elimination graph stored as bit rows, always
/// taking the live vertex of smallest current degree (ties to the lowest
/// index, so the result is deterministic). Returns `perm` with
/// `perm[k]` = original index eliminated at step `k`.
pub fn minimum_degree(q: &SparseSym) -> Vec<usize> {
    let n = q.dim();
    if n == 0 {
        return Vec::new();
    }
    let words = n.div_ceil(64);
    let mut adj = vec![0u64; n * words];
    let set = |adj: &mut [u64], i: usize, j: usize| adj[i * words + j / 64] |= 1u64 << (j % 64);
    for (r, c, _) in q.iter() {
        if r != c {
            set(&mut adj, r, c);
            set(&mut adj, c, r);
        }
    }

    let mut alive = vec![u64::MAX; words];
    if n % 64 != 0 {
        alive[words - 1] = (1u64 << (n % 64)) - 1;
    }
    let degree_of = |adj: &[u64], i: usize| -> u32 {
        adj[i * words..(i + 1) * words].iter().map(|w| w.count_ones()).sum()
    };
    let mut degree: Vec<u32> = (0..n).map(|i| degree_of(&adj, i)).collect();
    let mut eliminated = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    let mut nbrs = Vec::with_capacity(n);
    let mut row = vec![0u64; words];

    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = u32::MAX;
        for i in 0..n {
            if !eliminated[i] && degree[i] < best_deg {
                best_deg = degree[i];
                best = i;
            }
        }
        let v = best;
        eliminated[v] = true;
        alive[v / 64] &= !(1u64 << (v % 64));
        perm.push(v);

        row.copy_from_slice(&adj[v * words..(v + 1) * words]);
        nbrs.clear();
        for (w, &bits) in row.iter().enumerate() {
            let mut b = bits;
            while b != 0 {
                let t = b.trailing_zeros() as usize;
                nbrs.push(w * 64 + t);
                b &= b - 1;
            }
        }
        // neighbours of v become a clique; v leaves the graph
        for &u in &nbrs {
            let base = u * words;
            for w in 0..words {
                adj[base + w] = (adj[base + w] | row[w]) & alive[w];
            }
            adj[base + u / 64] &= !(1u64 << (u % 64));
            degree[u] = degree_of(&adj, u);
        }
    }
    perm
}
