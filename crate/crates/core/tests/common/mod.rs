//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the library code it checks.

#![allow(dead_code)]

pub mod toy;

/// `M[i][j] = [l_i = l_j] / #{k : l_k = l_i}`, element by element.
pub fn agreement(labels: &[usize]) -> Vec<Vec<f64>> {
    let n = labels.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        let same = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        for j in 0..n {
            if labels[i] == labels[j] {
                m[i][j] = 1.0 / same;
            }
        }
    }
    m
}

/// Mixed and smoothed targets for one batch.
pub fn smoothed_targets(emotion: &[usize], prompt: &[usize], alpha_e: f64, alpha: f64) -> Vec<Vec<f64>> {
    let my = agreement(emotion);
    let mp = agreement(prompt);
    let n = emotion.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let ms = alpha_e * my[i][j] + (1.0 - alpha_e) * mp[i][j];
            out[i][j] = (1.0 - alpha) * ms + alpha / n as f64;
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (&a, &b) in pr.iter().zip(qr) {
            if a > 0.0 {
                total += a * (a / b).ln();
            }
        }
    }
    total
}

/// The four-term objective for logits `sa`, `sp` against smoothed targets.
pub fn symkl(sa: &[Vec<f64>], sp: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let pa: Vec<Vec<f64>> = sa.iter().map(|r| softmax(r)).collect();
    let pp: Vec<Vec<f64>> = sp.iter().map(|r| softmax(r)).collect();
    0.25 * (kl(&pa, target) + kl(target, &pa) + kl(&pp, target) + kl(target, &pp))
}

pub fn row_sums(m: &[f64], cols: usize) -> Vec<f64> {
    m.chunks(cols).map(|r| r.iter().sum()).collect()
}

/// Top-`k` by scanning every entry: cosine to the query, ties by id.
pub fn exhaustive_top_k(query: &[f64], entries: &[(usize, Vec<f64>)], k: usize) -> Vec<(usize, f64)> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(usize, f64)> = entries
        .iter()
        .map(|(id, e)| (*id, query.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / qn))
        .collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let swap = all[j].1 > all[i].1 || (all[j].1 == all[i].1 && all[j].0 < all[i].0);
            if swap {
                all.swap(i, j);
            }
        }
    }
    all.truncate(k);
    all
}
