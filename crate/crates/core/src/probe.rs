// SPDX-License-Identifier: MIT OR Apache-2.0

//! Amplification probing: decode with one neuron's activation scaled and
//! count which tokens it pushes the model to emit.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::WeightMap;
use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::model::{greedy_decode, Intervention, TokenId, SEP};
use crate::neuron::NeuronId;

/// The problem part of a context: everything up to and including the first
/// SEP token, or the whole context if it has none.
pub fn probe_prompt(context: &[TokenId]) -> &[TokenId] {
    match context.iter().position(|&t| t == SEP) {
        Some(i) => &context[..=i],
        None => context,
    }
}

fn generate(
    w: &WeightMap,
    prompts: &[Vec<TokenId>],
    max_new: usize,
    interventions: &[Intervention],
) -> Result<Vec<Vec<TokenId>>> {
    prompts.par_iter().map(|p| greedy_decode(w, p, max_new, interventions).map(|seq| seq[p.len()..].to_vec())).collect()
}

/// Unamplified continuations (generated tokens only).
pub fn baseline_generate(w: &WeightMap, prompts: &[Vec<TokenId>], max_new: usize) -> Result<Vec<Vec<TokenId>>> {
    generate(w, prompts, max_new, &[])
}

/// Continuations with `neuron`'s activation scaled by `lambda`.
pub fn amplified_generate(
    w: &WeightMap,
    prompts: &[Vec<TokenId>],
    neuron: NeuronId,
    lambda: f64,
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>> {
    neuron.validate(w.config())?;
    let iv = Intervention::amplify(neuron, lambda)?;
    generate(w, prompts, max_new, &[iv])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyRow {
    pub token_id: TokenId,
    pub token: Option<String>,
    /// Occurrences under amplification.
    pub count: u64,
    /// Occurrences in the unamplified run.
    pub baseline: u64,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyReport {
    pub neuron: NeuronId,
    pub lambda: f64,
    /// Sorted by `count` descending, then token id ascending.
    pub rows: Vec<FrequencyRow>,
}

fn counts(gens: &[Vec<TokenId>]) -> BTreeMap<TokenId, u64> {
    let mut out = BTreeMap::new();
    for t in gens.iter().flatten() {
        *out.entry(*t).or_insert(0) += 1;
    }
    out
}

/// Token counts over generated tokens, with baseline counts and deltas for
/// every token that appears in either run.
pub fn token_frequency(
    generations: &[Vec<TokenId>],
    baseline: &[Vec<TokenId>],
    vocab_names: Option<&BTreeMap<TokenId, String>>,
    neuron: NeuronId,
    lambda: f64,
) -> FrequencyReport {
    let amp = counts(generations);
    let base = counts(baseline);
    let mut tokens: Vec<TokenId> = amp.keys().chain(base.keys()).copied().collect();
    tokens.sort_unstable();
    tokens.dedup();
    let mut rows: Vec<FrequencyRow> = tokens
        .into_iter()
        .map(|t| {
            let count = amp.get(&t).copied().unwrap_or(0);
            let baseline = base.get(&t).copied().unwrap_or(0);
            FrequencyRow {
                token_id: t,
                token: vocab_names.and_then(|v| v.get(&t).cloned()),
                count,
                baseline,
                delta: count as i64 - baseline as i64,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.token_id.cmp(&b.token_id)));
    FrequencyReport { neuron, lambda, rows }
}

pub const FREQUENCY_CSV_HEADER: [&str; 5] = ["token_id", "token", "count", "baseline", "delta"];

impl FrequencyReport {
    pub fn total_generated(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// First `k` rows (the "top-k amplified tokens" view).
    pub fn top(&self, k: usize) -> FrequencyReport {
        FrequencyReport { neuron: self.neuron, lambda: self.lambda, rows: self.rows.iter().take(k).cloned().collect() }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(FREQUENCY_CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.token_id.to_string(),
                r.token.clone().unwrap_or_default(),
                r.count.to_string(),
                r.baseline.to_string(),
                r.delta.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Parses rows back from the CSV form. An empty `token` field reads as
    /// no display string.
    pub fn parse_rows(text: &str, source: &str) -> Result<Vec<FrequencyRow>> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::format(source, 1, e.to_string()))?.clone();
        if header.iter().ne(FREQUENCY_CSV_HEADER) {
            return Err(Error::format(source, 1, "unexpected header"));
        }
        rdr.records()
            .enumerate()
            .map(|(i, rec)| {
                let line = i + 2;
                let rec = rec.map_err(|e| Error::format(source, line, e.to_string()))?;
                let bad = |what: &str| Error::format(source, line, format!("bad {what}"));
                let token = rec.get(1).unwrap_or("");
                Ok(FrequencyRow {
                    token_id: rec.get(0).unwrap_or("").parse().map_err(|_| bad("token_id"))?,
                    token: (!token.is_empty()).then(|| token.to_string()),
                    count: rec.get(2).unwrap_or("").parse().map_err(|_| bad("count"))?,
                    baseline: rec.get(3).unwrap_or("").parse().map_err(|_| bad("baseline"))?,
                    delta: rec.get(4).unwrap_or("").parse().map_err(|_| bad("delta"))?,
                })
            })
            .collect()
    }
}

pub fn export_report(r: &FrequencyReport, path: &Path) -> Result<()> {
    write_atomic(path, r.to_csv().as_bytes())
}
