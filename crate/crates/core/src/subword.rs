//! Byte-pair encoding: learning merges, segmenting words, and restoring
//! words (with subword spans) after translation.
//!
//! Internally every word ends with an end-of-word suffix on its last symbol so
//! merges can tell word-final character pairs apart. On output the suffix is
//! dropped and every non-final subword carries the continuation marker
//! (`@@` by default).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::Mutex;

use crate::error::{Error, Result};

pub const DEFAULT_MARKER: &str = "@@";
pub const END_OF_WORD: &str = "</w>";
/// Subword units used for the full-size joint vocabularies.
pub const DEFAULT_NUM_MERGES: usize = 32_000;
pub const TOY_NUM_MERGES: usize = 500;
const MERGE_FILE_VERSION: &str = "#version: 0.2";

#[derive(Debug)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    marker: String,
    ranks: HashMap<(String, String), usize>,
    cache: Mutex<HashMap<String, Vec<String>>>,
}

impl Clone for BpeModel {
    fn clone(&self) -> Self {
        Self::from_merges(self.merges.clone(), &self.marker).expect("merges already validated")
    }
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.marker == other.marker
    }
}

/// Splits a word into its initial symbols: characters, the last one suffixed.
fn initial_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>, marker: &str) -> Result<Self> {
        if marker.is_empty() {
            return Err(Error::Config("continuation marker must be non-empty".into()));
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate merge {} {}", pair.0, pair.1)));
            }
        }
        Ok(Self {
            merges,
            marker: marker.to_string(),
            ranks,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Segments one word into internal symbols (last symbol keeps the
    /// end-of-word suffix).
    fn segment_word(&self, word: &str) -> Vec<String> {
        if let Some(hit) = self.cache.lock().unwrap().get(word) {
            return hit.clone();
        }
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == left && &syms[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = merged;
        }
        self.cache
            .lock()
            .unwrap()
            .insert(word.to_string(), syms.clone());
        syms
    }

    /// Segments a whitespace-tokenized sentence into marked subwords.
    pub fn apply(&self, sentence: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in sentence.split_whitespace() {
            let syms = self.segment_word(word);
            let n = syms.len();
            for (i, mut s) in syms.into_iter().enumerate() {
                if i + 1 == n {
                    s.truncate(s.len() - END_OF_WORD.len());
                } else {
                    s.push_str(&self.marker);
                }
                out.push(s);
            }
        }
        out
    }

    /// Merge file: a version comment, then one space-separated pair per line.
    pub fn to_merge_file(&self) -> String {
        let mut s = String::from(MERGE_FILE_VERSION);
        s.push('\n');
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_merge_file(text: &str, marker: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.starts_with("#version") => {}
            other => {
                return Err(Error::Data(format!(
                    "merge file must start with a version comment, found {other:?}"
                )))
            }
        }
        let merges = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                        Ok((a.to_string(), b.to_string()))
                    }
                    _ => Err(Error::Data(format!("merge file line {}: {l:?}", i + 2))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_merges(merges, marker)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_merge_file()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, marker: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_merge_file(&text, marker)
    }
}

/// Learns up to `num_merges` merges from whitespace-separated words. Each
/// round merges the most frequent adjacent pair; equal counts go to the
/// lexicographically smallest pair. Learning stops early if no pair remains.
pub fn learn_bpe<'a, I>(words: I, num_merges: usize, marker: &str) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for w in words {
        *freq.entry(w).or_default() += 1;
    }
    if freq.is_empty() {
        return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
    }

    // symbol interning keeps pair keys cheap
    let mut table: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, table: &mut Vec<String>| -> u32 {
        *lookup.entry(s.clone()).or_insert_with(|| {
            table.push(s);
            (table.len() - 1) as u32
        })
    };

    let mut entries: Vec<(&str, u64)> = freq.into_iter().collect();
    entries.sort_unstable();
    let mut words: Vec<(Vec<u32>, u64)> = entries
        .into_iter()
        .map(|(w, c)| {
            let syms = initial_symbols(w)
                .into_iter()
                .map(|s| intern(s, &mut table))
                .collect();
            (syms, c)
        })
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += *c as i64;
            occurs.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&table[pa.0 as usize], &table[pa.1 as usize]);
                    let kb = (&table[pb.0 as usize], &table[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };
        let joined = format!("{}{}", table[pair.0 as usize], table[pair.1 as usize]);
        let new_sym = intern(joined, &mut table);
        merges.push((table[pair.0 as usize].clone(), table[pair.1 as usize].clone()));

        let mut affected: Vec<usize> = occurs.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c as i64;
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *counts.get_mut(&key).unwrap() -= c;
                if key != pair {
                    if let Some(set) = occurs.get_mut(&key) {
                        set.remove(&wi);
                    }
                }
            }
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    merged.push(new_sym);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            *syms = merged;
            for p in syms.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += c;
                occurs.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        counts.remove(&pair);
    }
    BpeModel::from_merges(merges, marker)
}

/// Words rebuilt from marked subwords, with the inclusive subword index span
/// of each word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoredWords {
    pub words: Vec<String>,
    pub spans: Vec<RangeInclusive<usize>>,
}

/// Joins marked subwords back into words. A marker on the very last subword
/// is tolerated: the word is closed at the end of the sequence.
pub fn restore_words<S: AsRef<str>>(subwords: &[S], marker: &str) -> RestoredWords {
    let mut words = Vec::new();
    let mut spans = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, s) in subwords.iter().enumerate() {
        let s = s.as_ref();
        match s.strip_suffix(marker) {
            Some(stem) => current.push_str(stem),
            None => {
                current.push_str(s);
                words.push(std::mem::take(&mut current));
                spans.push(start..=i);
                start = i + 1;
            }
        }
    }
    if start < subwords.len() {
        words.push(current);
        spans.push(start..=subwords.len() - 1);
    }
    RestoredWords { words, spans }
}
