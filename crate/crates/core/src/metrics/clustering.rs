use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetricsReport {
    #[serde(rename = "NMI")]
    pub nmi: f64,
    #[serde(rename = "AMI")]
    pub ami: f64,
}

/// Contingency counts with rows = distinct predicted labels, columns =
/// distinct true labels (both in sorted label order).
fn contingency<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Vec<Vec<usize>> {
    let ia: BTreeMap<A, usize> = dense(a);
    let ib: BTreeMap<B, usize> = dense(b);
    let mut table = vec![vec![0usize; ib.len()]; ia.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x]][ib[y]] += 1;
    }
    table
}

fn dense<T: Ord + Copy>(v: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in v {
        m.entry(*x).or_insert(0);
    }
    for (i, val) in m.values_mut().enumerate() {
        *val = i;
    }
    m
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

/// Expected mutual information under the hypergeometric permutation model.
fn expected_mutual_info(rows: &[usize], cols: &[usize], n: usize) -> f64 {
    let lf = ln_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in rows {
        for &b in cols {
            let lo = 1.max((a + b).saturating_sub(n));
            let hi = a.min(b);
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (a as f64 * b as f64)).ln();
                let log_p = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n] - lf[nij] - lf[a - nij] - lf[b - nij] - lf[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// NMI (arithmetic-mean normalization) and AMI between two labelings.
pub fn clustering_agreement<A: Ord + Copy, B: Ord + Copy>(pred: &[A], truth: &[B]) -> Result<ClusterMetricsReport> {
    if pred.len() != truth.len() {
        return Err(GowebError::DimMismatch { expected: truth.len(), got: pred.len() });
    }
    if pred.len() < 2 {
        return Err(GowebError::Empty("clustering agreement needs at least two items"));
    }
    let n = pred.len();
    let nf = n as f64;
    let table = contingency(pred, truth);
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    if (rows.len() == 1 && cols.len() == 1) || (rows.len() == n && cols.len() == n) {
        // identical trivial partitions
        return Ok(ClusterMetricsReport { nmi: 1.0, ami: 1.0 });
    }
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (nf * c / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let mi = mi.max(0.0);
    let h_pred = entropy(&rows, nf);
    let h_true = entropy(&cols, nf);
    let mean_h = 0.5 * (h_pred + h_true);
    let nmi = if mean_h <= 0.0 { 1.0 } else { (mi / mean_h).clamp(0.0, 1.0) };
    let emi = expected_mutual_info(&rows, &cols, n);
    let mut denom = mean_h - emi;
    if denom.abs() < f64::EPSILON {
        denom = if denom < 0.0 { -f64::EPSILON } else { f64::EPSILON };
    }
    Ok(ClusterMetricsReport { nmi, ami: (mi - emi) / denom })
}
