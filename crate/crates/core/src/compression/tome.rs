use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Bipartite soft-matching token merging on raw token vectors.
///
/// Each round splits the current tokens into A (even positions) and B (odd
/// positions), matches every A token to its most cosine-similar B token and
/// merges the `min(|A|, remaining)` best-scoring matches into their B
/// partners by arithmetic mean. Rounds repeat until `target` tokens remain.
/// Survivors keep their relative order.
pub fn tome_merge<E: Element>(tokens: &Tensor<E>, target: usize) -> Result<Tensor<E>> {
    let s = tokens.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("token merging needs N×C, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if target < 1 || target > n {
        return Err(Error::Contract(format!(
            "target count {target} outside 1..={n}"
        )));
    }
    let mut toks: Vec<Vec<f64>> = tokens
        .data()
        .chunks(c)
        .map(|row| row.iter().map(|v| v.as_f64()).collect())
        .collect();

    while toks.len() > target {
        let remove = toks.len() - target;
        let a_idx: Vec<usize> = (0..toks.len()).step_by(2).collect();
        let b_idx: Vec<usize> = (1..toks.len()).step_by(2).collect();
        let norms: Vec<f64> = toks
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        // (score, a position, chosen b position)
        let mut matches: Vec<(f64, usize, usize)> = a_idx
            .iter()
            .map(|&a| {
                let mut best = (f64::NEG_INFINITY, b_idx[0]);
                for &b in &b_idx {
                    let sim = cosine(&toks[a], &toks[b], norms[a], norms[b]);
                    if sim > best.0 {
                        best = (sim, b);
                    }
                }
                (best.0, a, best.1)
            })
            .collect();
        matches.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let r = remove.min(a_idx.len());

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); toks.len()];
        let mut merged_away = vec![false; toks.len()];
        for &(_, a, b) in &matches[..r] {
            groups[b].push(a);
            merged_away[a] = true;
        }
        let mut next = Vec::with_capacity(toks.len() - r);
        for (i, tok) in toks.iter().enumerate() {
            if merged_away[i] {
                continue;
            }
            if groups[i].is_empty() {
                next.push(tok.clone());
            } else {
                let k = (groups[i].len() + 1) as f64;
                let mean = (0..c)
                    .map(|ch| (tok[ch] + groups[i].iter().map(|&a| toks[a][ch]).sum::<f64>()) / k)
                    .collect();
                next.push(mean);
            }
        }
        toks = next;
    }
    let data = toks.into_iter().flatten().map(E::of).collect();
    Tensor::new(&[target, c], data)
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}
