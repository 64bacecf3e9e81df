// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic token datasets.
//!
//! Every sequence starts with [`BEGIN`]. Labels are next tokens; the last
//! label is the metadata token `B` when present and `BEGIN` otherwise.
//!
//! File format, one example per line: space-separated token ids, a tab,
//! then space-separated `key=value` integer metadata, e.g.
//! `0 17 21 3 5 17\ti=5 j=2 A=17 B=21`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::intervene::Example;
use crate::models::{sequence_binding, InputMode, TransformerConfig, WeightBundle, BEGIN};
use crate::paths::PositionVars;

/// Default number of most frequent tokens excluded by the repeats filter.
pub const DEFAULT_TOP_K: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    pub meta: PositionVars,
}

impl Sequence {
    /// Next-token labels; the final one comes from metadata `B`.
    pub fn labels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.ids[1..].to_vec();
        out.push(self.meta.get("B").map(|&b| b as usize).unwrap_or(BEGIN));
        out
    }

    /// Tokens followed by the final label: the stream whose position
    /// `len` is the token being predicted at the last position.
    pub fn target_stream(&self) -> Vec<usize> {
        let mut s = self.ids.clone();
        s.push(*self.labels().last().expect("nonempty"));
        s
    }

    pub fn to_example(&self, cfg: &TransformerConfig, w: &WeightBundle, mode: InputMode) -> Result<Example> {
        Ok(Example {
            binding: sequence_binding(cfg, w, mode, &self.ids, &self.labels())?,
            vars: self.meta.clone(),
        })
    }

    fn to_line(&self) -> String {
        let ids: Vec<String> = self.ids.iter().map(|t| t.to_string()).collect();
        let meta: Vec<String> = self.meta_in_order().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}\t{}", ids.join(" "), meta.join(" "))
    }

    /// Metadata with `i, j, A, B` first, then the rest alphabetically.
    fn meta_in_order(&self) -> impl Iterator<Item = (&String, &i64)> {
        const FIRST: [&str; 4] = ["i", "j", "A", "B"];
        let known = FIRST.into_iter().filter_map(|k| self.meta.get_key_value(k));
        let rest = self.meta.iter().filter(|(k, _)| !FIRST.contains(&k.as_str()));
        known.chain(rest)
    }
}

/// Parameters of the induction generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InductionSpec {
    pub count: usize,
    pub length: usize,
    pub vocab: usize,
    /// Filler tokens are drawn from ids `1..=common`; markers and `B` from
    /// the remaining, rarer ids.
    pub common: usize,
    /// Length of the repeated marker: 1 gives `[A][B]…[A]`, 2 gives
    /// `[A1][A2][B]…[A1][A2]`.
    pub ngram: usize,
    pub seed: u64,
}

impl Default for InductionSpec {
    fn default() -> Self {
        InductionSpec {
            count: 1000,
            length: 16,
            vocab: 32,
            common: 10,
            ngram: 1,
            seed: 0,
        }
    }
}

/// Induction prompts ending at the second occurrence of the marker.
///
/// Metadata: `i` is the last position, `j` the position of `B`, `A` the
/// (last) marker token and `B` the token following its first occurrence;
/// with `ngram = 2`, `A1` is the first marker token.
pub fn gen_induction_sequences(spec: &InductionSpec) -> Result<Vec<Sequence>> {
    let InductionSpec {
        count,
        length,
        vocab,
        common,
        ngram,
        seed,
    } = *spec;
    if !(1..=2).contains(&ngram) {
        return Err(Error::Argument(format!("marker length must be 1 or 2, got {ngram}")));
    }
    if length < 2 * ngram + 2 {
        return Err(Error::Argument(format!(
            "length {length} is too short for a marker of length {ngram}"
        )));
    }
    let rare: Vec<usize> = (common + 1..vocab).collect();
    if common == 0 || rare.len() < ngram + 1 {
        return Err(Error::Argument(format!(
            "vocabulary of {vocab} with {common} common tokens leaves {} rare tokens; need {}",
            rare.len(),
            ngram + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let markers: Vec<usize> = rare.choose_multiple(&mut rng, ngram + 1).copied().collect();
        let (a, b) = (&markers[..ngram], markers[ngram]);
        // First occurrence starts at `s`, leaving room for B and the final marker.
        let last_start = length - ngram;
        let s = rng.random_range(1..=last_start - ngram - 1);
        let mut ids: Vec<usize> = (0..length).map(|_| rng.random_range(1..=common)).collect();
        ids[0] = BEGIN;
        ids[s..s + ngram].copy_from_slice(a);
        ids[s + ngram] = b;
        ids[last_start..].copy_from_slice(a);
        let mut meta = PositionVars::new();
        meta.insert("i".into(), (length - 1) as i64);
        meta.insert("j".into(), (s + ngram) as i64);
        meta.insert("A".into(), a[ngram - 1] as i64);
        meta.insert("B".into(), b as i64);
        if ngram == 2 {
            meta.insert("A1".into(), a[0] as i64);
        }
        out.push(Sequence { ids, meta });
    }
    Ok(out)
}

/// Sequences of distinct tokens, so nothing repeats.
pub fn gen_distinct_sequences(count: usize, length: usize, vocab: usize, seed: u64) -> Result<Vec<Sequence>> {
    if vocab < length {
        return Err(Error::Argument(format!(
            "{length} distinct tokens need a vocabulary larger than {vocab}"
        )));
    }
    let pool: Vec<usize> = (1..vocab).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut ids = vec![BEGIN];
            ids.extend(pool.choose_multiple(&mut rng, length - 1).copied());
            Sequence {
                ids,
                meta: PositionVars::new(),
            }
        })
        .collect())
}

/// Token counts over a set of token streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn from_streams<'a>(vocab: usize, streams: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut counts = vec![0u64; vocab];
        for s in streams {
            for &t in s {
                *counts
                    .get_mut(t)
                    .ok_or_else(|| Error::Argument(format!("token {t} outside vocabulary of {vocab}")))? += 1;
            }
        }
        Ok(FrequencyTable { counts })
    }

    /// The `k` most frequent tokens; ties go to the smaller id.
    pub fn top_k(&self, k: usize) -> HashSet<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order.into_iter().take(k).collect()
    }

    /// Sidecar text: one `id<TAB>count` line per token.
    pub fn to_text(&self) -> String {
        self.counts
            .iter()
            .enumerate()
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::Format(format!("frequency table line {}: `{line}`", n + 1));
            let (id, count) = line.split_once('\t').ok_or_else(bad)?;
            if id.parse::<usize>().map_err(|_| bad())? != n {
                return Err(bad());
            }
            counts.push(count.parse().map_err(|_| bad())?);
        }
        Ok(FrequencyTable { counts })
    }
}

/// `mask[t]` holds when `stream[t]` is outside the `top_k` most frequent
/// tokens and already occurred at an earlier position.
pub fn filter_repeats_subset(stream: &[usize], table: &FrequencyTable, top_k: usize) -> Vec<bool> {
    let common = table.top_k(top_k);
    let mut seen = HashSet::new();
    stream
        .iter()
        .map(|&t| {
            let repeat = !seen.insert(t);
            repeat && !common.contains(&t)
        })
        .collect()
}

/// Vocabulary of the number prompts: `BEGIN`, the five words of the
/// template, then `N` as token `NUMBER_BASE + N`.
pub const NUMBER_WORDS: [&str; 5] = ["The", "organization", "estimates", "that", "-"];
pub const NUMBER_BASE: usize = 1 + NUMBER_WORDS.len();

pub fn number_vocab(range_end: usize) -> usize {
    NUMBER_BASE + range_end + 1
}

/// `The organization estimates that [N] -` for `N` in `0..=range_end`.
/// Metadata `N`; the final label is `BEGIN`, a placeholder.
pub fn gen_number_prompts(range_end: usize) -> Vec<Sequence> {
    (0..=range_end)
        .map(|n| {
            let ids = vec![BEGIN, 1, 2, 3, 4, NUMBER_BASE + n, 5];
            let mut meta = PositionVars::new();
            meta.insert("N".into(), n as i64);
            Sequence { ids, meta }
        })
        .collect()
}

/// Render a number prompt back to text.
pub fn decode_number_prompt(ids: &[usize]) -> Option<String> {
    let words: Option<Vec<String>> = ids
        .iter()
        .skip(1)
        .map(|&t| match t {
            1..=5 => Some(NUMBER_WORDS[t - 1].to_owned()),
            t if t >= NUMBER_BASE => Some((t - NUMBER_BASE).to_string()),
            _ => None,
        })
        .collect();
    (ids.first() == Some(&BEGIN)).then_some(())?;
    Some(words?.join(" "))
}

/// Shuffle `seqs` with a seed-derived permutation.
pub fn shuffled(mut seqs: Vec<Sequence>, seed: u64) -> Vec<Sequence> {
    seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    seqs
}

pub fn to_text(seqs: &[Sequence]) -> String {
    seqs.iter().map(|s| s.to_line() + "\n").collect()
}

pub fn from_text(text: &str) -> Result<Vec<Sequence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Format(format!("dataset line {}: {what}", n + 1));
            let (ids, meta) = line.split_once('\t').unwrap_or((line, ""));
            let ids = ids
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| bad(&format!("bad token `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(bad("no tokens"));
            }
            let mut vars = BTreeMap::new();
            for field in meta.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(|| bad(&format!("bad field `{field}`")))?;
                let v = v.parse::<i64>().map_err(|_| bad(&format!("bad value in `{field}`")))?;
                if vars.insert(k.to_owned(), v).is_some() {
                    return Err(bad(&format!("duplicate field `{k}`")));
                }
            }
            Ok(Sequence { ids, meta: vars })
        })
        .collect()
}

pub fn save(path: &Path, seqs: &[Sequence]) -> Result<()> {
    std::fs::write(path, to_text(seqs)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Sequence>> {
    from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Path of the frequency sidecar of a dataset file.
pub fn sidecar_path(dataset: &Path) -> std::path::PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".freq");
    s.into()
}

/// Load the cached frequency table of `dataset`, computing and caching it
/// from the dataset's target streams when absent.
pub fn frequency_table_cached(dataset: &Path, seqs: &[Sequence], vocab: usize) -> Result<FrequencyTable> {
    let side = sidecar_path(dataset);
    match std::fs::read_to_string(&side) {
        Ok(text) => {
            let table = FrequencyTable::from_text(&text)?;
            if table.counts.len() != vocab {
                return Err(Error::Format(format!(
                    "{} covers {} tokens, expected {vocab}",
                    side.display(),
                    table.counts.len()
                )));
            }
            Ok(table)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let streams: Vec<Vec<usize>> = seqs.iter().map(Sequence::target_stream).collect();
            let table = FrequencyTable::from_streams(vocab, streams.iter().map(Vec::as_slice))?;
            std::fs::write(&side, table.to_text()).map_err(|e| Error::io(&side, e))?;
            Ok(table)
        }
        Err(e) => Err(Error::io(&side, e)),
    }
}

/// Draw `count` random token streams, for filter tests.
pub fn random_stream(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}
