//! Token-level analyses: when does the head beat the base model, and how
//! diverse are a type's bigram contexts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{extended, write_text, EvalReport};
use crate::error::{Error, Result};
use crate::kernels::entropy;
use crate::store::Vocabulary;

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman inputs", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::param("spearman needs at least two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Per-type forward and backward bigram entropies (nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramEntropy {
    /// Entropy of the successor distribution; 0 for types never followed.
    pub h_fwd: Vec<f64>,
    /// Entropy of the predecessor distribution; 0 for types never preceded.
    pub h_bwd: Vec<f64>,
    pub n_successors: Vec<u64>,
    pub n_predecessors: Vec<u64>,
}

impl BigramEntropy {
    /// How document boundaries are treated, for report metadata.
    pub const BOUNDARY_RULE: &'static str = "within-document bigrams only; boundaries contribute no pairs";
}

fn conditional_entropy(pairs: &BTreeMap<(u32, u32), u64>, vocab_size: usize) -> (Vec<f64>, Vec<u64>) {
    let mut dists: Vec<Vec<f64>> = vec![Vec::new(); vocab_size];
    let mut totals = vec![0u64; vocab_size];
    for (&(w, _), &c) in pairs {
        dists[w as usize].push(c as f64);
        totals[w as usize] += c;
    }
    let h = dists
        .iter()
        .zip(&totals)
        .map(|(counts, &t)| {
            if t == 0 {
                return 0.0;
            }
            let p: Vec<f64> = counts.iter().map(|c| c / t as f64).collect();
            entropy(&p).max(0.0)
        })
        .collect();
    (h, totals)
}

/// Bigram entropies over a stream split into documents.
pub fn bigram_entropy(documents: &[Vec<u32>], vocab_size: usize) -> Result<BigramEntropy> {
    if documents.iter().all(Vec::is_empty) {
        return Err(Error::param("bigram entropy needs a non-empty stream"));
    }
    let mut fwd = BTreeMap::new();
    let mut bwd = BTreeMap::new();
    for doc in documents {
        if let Some(&t) = doc.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::input(format!("token {t} outside vocabulary of size {vocab_size}")));
        }
        for pair in doc.windows(2) {
            *fwd.entry((pair[0], pair[1])).or_insert(0u64) += 1;
            *bwd.entry((pair[1], pair[0])).or_insert(0u64) += 1;
        }
    }
    let (h_fwd, n_successors) = conditional_entropy(&fwd, vocab_size);
    let (h_bwd, n_predecessors) = conditional_entropy(&bwd, vocab_size);
    Ok(BigramEntropy {
        h_fwd,
        h_bwd,
        n_successors,
        n_predecessors,
    })
}

/// How often the head beats the base model on one token type, under two
/// configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpRate {
    pub id: u32,
    pub count: usize,
    pub helped_a: usize,
    pub helped_b: usize,
    pub rate_a: f64,
    pub rate_b: f64,
    /// `rate_b - rate_a`.
    pub delta: f64,
}

fn helped(report: &EvalReport, i: usize) -> bool {
    report.log_head[i] > report.log_lm[i]
}

/// Help rates (strict `p_head > p_lm`) per target type for two aligned
/// reports; types with fewer than `min_occ` occurrences are dropped.
pub fn knn_help_rate(a: &EvalReport, b: &EvalReport, vocab_size: usize, min_occ: usize) -> Result<Vec<HelpRate>> {
    if a.targets != b.targets {
        return Err(Error::input("help-rate reports are not aligned on the same targets"));
    }
    for r in [a, b] {
        if r.log_lm.len() != r.len() || r.log_head.len() != r.len() {
            return Err(Error::input("report arrays differ in length"));
        }
    }
    let mut counts = vec![(0usize, 0usize, 0usize); vocab_size];
    for (i, &t) in a.targets.iter().enumerate() {
        let c = counts
            .get_mut(t as usize)
            .ok_or_else(|| Error::input(format!("target {t} outside vocabulary of size {vocab_size}")))?;
        c.0 += 1;
        c.1 += helped(a, i) as usize;
        c.2 += helped(b, i) as usize;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.0 > 0 && c.0 >= min_occ)
        .map(|(id, (count, ha, hb))| {
            let rate_a = ha as f64 / count as f64;
            let rate_b = hb as f64 / count as f64;
            HelpRate {
                id: id as u32,
                count,
                helped_a: ha,
                helped_b: hb,
                rate_a,
                rate_b,
                delta: rate_b - rate_a,
            }
        })
        .collect())
}

/// One row of the token analysis table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub id: u32,
    pub token: String,
    pub count: usize,
    pub help_rate_a: f64,
    pub help_rate_b: f64,
    pub delta: f64,
    /// Characters in the token string.
    pub length: usize,
    pub h_fwd: f64,
    pub h_bwd: f64,
}

/// Joins help rates with token strings and bigram entropies. Without a
/// vocabulary the token column is the decimal id.
pub fn token_stats(rates: &[HelpRate], vocab: Option<&Vocabulary>, entropy: &BigramEntropy) -> Result<Vec<TokenStats>> {
    rates
        .iter()
        .map(|r| {
            let id = r.id as usize;
            let token = match vocab {
                Some(v) => v
                    .token(id)
                    .ok_or_else(|| Error::input(format!("id {id} missing from vocabulary")))?
                    .to_string(),
                None => id.to_string(),
            };
            let (h_fwd, h_bwd) = match (entropy.h_fwd.get(id), entropy.h_bwd.get(id)) {
                (Some(f), Some(b)) => (*f, *b),
                _ => return Err(Error::input(format!("id {id} missing from entropy table"))),
            };
            Ok(TokenStats {
                id: r.id,
                length: token.chars().count(),
                token,
                count: r.count,
                help_rate_a: r.rate_a,
                help_rate_b: r.rate_b,
                delta: r.delta,
                h_fwd,
                h_bwd,
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with columns `id,token,count,help_rate_a,help_rate_b,delta,length,h_fwd,h_bwd`.
pub fn write_token_stats_csv(rows: &[TokenStats], path: &Path) -> Result<()> {
    let mut out = String::from("id,token,count,help_rate_a,help_rate_b,delta,length,h_fwd,h_bwd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id,
            csv_field(&r.token),
            r.count,
            extended::cell(r.help_rate_a),
            extended::cell(r.help_rate_b),
            extended::cell(r.delta),
            r.length,
            extended::cell(r.h_fwd),
            extended::cell(r.h_bwd)
        ));
    }
    write_text(path, &out)
}
