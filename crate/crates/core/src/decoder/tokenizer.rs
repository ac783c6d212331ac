//! Subword tokenizer with fixed special, digit and prompt-marker ids.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SIGN_HERE: usize = 3;
/// Ids `DIGIT_BASE..DIGIT_BASE + 10` are the digits 0-9.
pub const DIGIT_BASE: usize = 4;
pub const SEP: usize = 14;
pub const TASK_TRANSLATE: usize = 15;
pub const TASK_ALIGN: usize = 16;
pub const LANG: usize = 17;
pub const SPAN: usize = 18;
pub const SENTENCE: usize = 19;
pub const PRIOR: usize = 20;
pub const SIGNS: usize = 21;

const FIXED: [&str; 22] = [
    "<pad>", "</s>", "<unk>", "<SignHere>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "-",
    "task=translate", "task=align", "lang=", "span=", "sentence=", "prior=", "signs=",
];

pub const WORD_MARK: char = '\u{2581}';
pub const DEFAULT_VOCAB_SIZE: usize = 512;
pub const DEFAULT_LANGS: [&str; 4] = ["bfi", "bsl", "ase", "en"];

pub fn digit_id(d: usize) -> usize {
    DIGIT_BASE + d
}

pub fn id_digit(id: usize) -> Option<usize> {
    (DIGIT_BASE..DIGIT_BASE + 10).contains(&id).then(|| id - DIGIT_BASE)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Tokenizer {
    pub version: u32,
    vocab: Vec<String>,
    langs: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

fn lang_token(code: &str) -> String {
    format!("<{code}>")
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(WORD_MARK)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

impl Tokenizer {
    /// Learn merges over whitespace-separated words until the vocabulary
    /// reaches `vocab_size` or no pair occurs twice.
    pub fn train<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        vocab_size: usize,
        langs: &[&str],
    ) -> Result<Self> {
        let mut vocab: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
        for l in langs {
            let t = lang_token(l);
            if vocab.contains(&t) {
                return Err(Error::config(format!("duplicate language code {l}")));
            }
            vocab.push(t);
        }
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *words.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut alphabet: Vec<String> = words
            .keys()
            .flat_map(|w| split_word(w))
            .chain(std::iter::once(WORD_MARK.to_string()))
            .collect();
        alphabet.sort();
        alphabet.dedup();
        for a in alphabet {
            if !vocab.contains(&a) {
                vocab.push(a);
            }
        }
        if vocab.len() > vocab_size {
            return Err(Error::config(format!(
                "vocabulary size {vocab_size} below the {} base symbols",
                vocab.len()
            )));
        }

        let mut seqs: Vec<(Vec<String>, usize)> =
            words.iter().map(|(w, &c)| (split_word(w), c)).collect();
        let mut merges = Vec::new();
        while vocab.len() < vocab_size {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (s, c) in &seqs {
                for p in s.windows(2) {
                    *counts.entry((&p[0], &p[1])).or_default() += c;
                }
            }
            // highest count wins; ties go to the lexicographically first pair
            let best = counts
                .iter()
                .fold(None::<((&str, &str), usize)>, |acc, (&p, &c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                });
            let Some(((a, b), c)) = best else { break };
            if c < 2 {
                break;
            }
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (s, _) in &mut seqs {
                *s = apply_merge(s, &a, &b, &merged);
            }
            if !vocab.contains(&merged) {
                vocab.push(merged);
            }
            merges.push((a, b));
        }
        let mut tok = Tokenizer {
            version: 1,
            vocab,
            langs: langs.iter().map(|s| s.to_string()).collect(),
            merges,
            index: HashMap::new(),
            ranks: HashMap::new(),
        };
        tok.rebuild();
        Ok(tok)
    }

    fn rebuild(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn langs(&self) -> &[String] {
        &self.langs
    }

    pub fn lang_id(&self, code: &str) -> Result<usize> {
        self.id(&lang_token(code))
            .ok_or_else(|| Error::contract(format!("unknown language code {code:?}")))
    }

    pub fn digit_ids(&self) -> std::ops::Range<usize> {
        DIGIT_BASE..DIGIT_BASE + 10
    }

    fn encode_word(&self, word: &str) -> Vec<usize> {
        let mut syms = split_word(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms.splice(i..i + 2, [merged]);
        }
        syms.iter()
            .map(|s| self.id(s).unwrap_or(UNK))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Text for subword ids; stops at `</s>` and skips other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let special = id < FIXED.len() + self.langs.len();
            if special && id_digit(id).is_none() && id != SEP {
                continue;
            }
            if let Some(t) = self.token(id) {
                out.push_str(t);
            }
        }
        out.replace(WORD_MARK, " ").trim_start().to_string()
    }

    /// Human-readable prompt dump: markers spaced, subwords joined.
    pub fn render(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id).unwrap_or("<?>");
            if (TASK_TRANSLATE..=SIGNS).contains(&id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(t);
            } else if (FIXED.len()..FIXED.len() + self.langs.len()).contains(&id) {
                out.push_str(&self.langs[id - FIXED.len()]);
            } else {
                out.push_str(&t.replace(WORD_MARK, " "));
            }
        }
        out.replace("= ", "=")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let mut t: Tokenizer = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if t.vocab.len() < FIXED.len() || t.vocab[..FIXED.len()].iter().zip(FIXED).any(|(a, b)| a != b) {
            return Err(Error::config("tokenizer file has a foreign special-token layout"));
        }
        t.rebuild();
        Ok(t)
    }
}

fn apply_merge(s: &[String], a: &str, b: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if i + 1 < s.len() && s[i] == a && s[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(s[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CORPUS: [&str; 4] = [
        "the weather is cold today",
        "the train leaves at 30 past",
        "we went to the market in the morning",
        "cold weather and warm tea",
    ];

    fn tok() -> Tokenizer {
        Tokenizer::train(CORPUS, DEFAULT_VOCAB_SIZE, &DEFAULT_LANGS).unwrap()
    }

    #[test]
    fn fixed_ids() {
        let t = tok();
        assert_eq!(t.id("<SignHere>"), Some(SIGN_HERE));
        for d in 0..10 {
            assert_eq!(t.id(&d.to_string()), Some(digit_id(d)));
            assert_eq!(id_digit(digit_id(d)), Some(d));
        }
        assert_eq!(t.id("-"), Some(SEP));
        assert_eq!(t.digit_ids(), 4..14);
        assert!(t.lang_id("bfi").is_ok());
        assert!(t.lang_id("xx").is_err());
    }

    #[test]
    fn corpus_round_trips_and_merges_shorten() {
        let t = tok();
        for s in CORPUS {
            let ids = t.encode(s);
            assert_eq!(t.decode(&ids), s);
            assert!(ids.len() < s.chars().count());
        }
        assert!(t.vocab_size() <= DEFAULT_VOCAB_SIZE);
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let t = tok();
        assert!(t.encode("zebra").contains(&UNK));
    }

    #[test]
    fn save_load_identity() {
        let t = tok();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.json");
        t.save(&p).unwrap();
        let back = Tokenizer::load(&p).unwrap();
        assert_eq!(back.encode(CORPUS[1]), t.encode(CORPUS[1]));
        assert_eq!(back.vocab_size(), t.vocab_size());
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(tok().merges, tok().merges);
    }

    proptest! {
        #[test]
        fn round_trip_on_in_vocabulary_text(words in proptest::collection::vec(0usize..20, 1..8)) {
            let t = tok();
            let pool: Vec<&str> = CORPUS.iter().flat_map(|s| s.split(' ')).collect();
            let s = words.iter().map(|&i| pool[i % pool.len()]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
