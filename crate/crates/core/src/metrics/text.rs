//! Reference-based translation metrics over whitespace tokens.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Stand-in precision for an n-gram order with no matches.
pub const BLEU_EPSILON: f64 = 0.1;
pub const ROUGE_BETA: f64 = 1.2;

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngrams<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    Ok(())
}

/// Corpus BLEU-4 in [0, 100] with brevity penalty.
pub fn bleu4(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let ht = tokens(h);
        let rt = tokens(rf);
        c += ht.len();
        r += rt.len();
        for n in 1..=4 {
            let hg = ngrams(&ht, n);
            let rg = ngrams(&rt, n);
            total[n - 1] += hg.values().sum::<usize>();
            matched[n - 1] += hg
                .iter()
                .map(|(g, &k)| k.min(*rg.get(g).unwrap_or(&0)))
                .sum::<usize>();
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            if total[i] == 0 {
                BLEU_EPSILON.ln()
            } else if matched[i] == 0 {
                (BLEU_EPSILON / total[i] as f64).ln()
            } else {
                (matched[i] as f64 / total[i] as f64).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p.exp())
}

pub fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Mean sentence-level LCS F-measure (β = 1.2), in [0, 100].
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (ht, rt) = (tokens(h), tokens(r));
            let l = lcs(&ht, &rt) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / ht.len() as f64;
            let rc = l / rt.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .sum();
    Ok(100.0 * total / hyps.len() as f64)
}

/// CIDEr with one reference per hypothesis: mean over n = 1..4 of the tf-idf
/// cosine, idf from reference document frequencies, times 10.
pub fn cider(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let n_docs = refs.len() as f64;
    let mut score = 0.0;
    for n in 1..=4 {
        let ref_grams: Vec<_> = refs.iter().map(|r| ngrams(&tokens(r), n)).collect();
        let mut df: HashMap<Vec<&str>, usize> = HashMap::new();
        for g in &ref_grams {
            for k in g.keys() {
                *df.entry(k.clone()).or_insert(0) += 1;
            }
        }
        fn tfidf<'a>(
            g: &HashMap<Vec<&'a str>, usize>,
            df: &HashMap<Vec<&'a str>, usize>,
            n_docs: f64,
        ) -> HashMap<Vec<&'a str>, f64> {
            let len: usize = g.values().sum();
            g.iter()
                .map(|(k, &c)| {
                    let idf = (n_docs / (*df.get(k).unwrap_or(&0)).max(1) as f64).ln();
                    (k.clone(), c as f64 / len as f64 * idf)
                })
                .collect()
        }
        for (h, rg) in hyps.iter().zip(&ref_grams) {
            let hv = tfidf(&ngrams(&tokens(h), n), &df, n_docs);
            let rv = tfidf(rg, &df, n_docs);
            let dot: f64 = hv.iter().map(|(k, v)| v * rv.get(k).unwrap_or(&0.0)).sum();
            let nh = hv.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = rv.values().map(|v| v * v).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                score += dot / (nh * nr);
            }
        }
    }
    Ok(10.0 * score / (4.0 * hyps.len() as f64))
}

const CONTRACTIONS: &[(&str, &[&str])] = &[
    ("won't", &["will", "not"]),
    ("can't", &["can", "not"]),
    ("n't", &["not"]),
    ("'re", &["are"]),
    ("'ve", &["have"]),
    ("'ll", &["will"]),
    ("'m", &["am"]),
    ("'d", &["would"]),
    ("'s", &[]),
];

/// Suffix rewrites tried in order; the result must keep at least 3 characters.
const SUFFIXES: &[(&str, &str)] = &[
    ("sses", "ss"),
    ("ches", "ch"),
    ("shes", "sh"),
    ("xes", "x"),
    ("ies", "y"),
    ("ing", ""),
    ("ed", ""),
    ("s", ""),
];

fn strip_suffix(w: &str) -> String {
    for (suf, rep) in SUFFIXES {
        if let Some(stem) = w.strip_suffix(suf) {
            if stem.chars().count() + rep.chars().count() < 3 {
                continue;
            }
            if *suf == "s" && (stem.ends_with('s') || stem.ends_with('u') || stem.ends_with('i')) {
                continue;
            }
            return format!("{stem}{rep}");
        }
    }
    w.to_string()
}

/// Lowercase, expand contractions, drop non-alphanumerics, strip suffixes.
pub fn lemmatize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.to_lowercase().replace('’', "'").split_whitespace() {
        let mut word = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_string();
        let mut extra: Vec<&str> = Vec::new();
        for (suf, exp) in CONTRACTIONS {
            if let Some(stem) = word.strip_suffix(suf) {
                if suf.starts_with('w') || suf.starts_with('c') {
                    if stem.is_empty() {
                        word = String::new();
                        extra = exp.to_vec();
                        break;
                    }
                    continue;
                }
                word = stem.to_string();
                extra = exp.to_vec();
                break;
            }
        }
        let clean: String = word.chars().filter(|c| c.is_alphanumeric()).collect();
        if !clean.is_empty() {
            out.push(strip_suffix(&clean));
        }
        out.extend(extra.iter().map(|s| s.to_string()));
    }
    out
}

/// Mean over pairs of `|A ∩ B| / |A ∪ B|` on lemma sets, in [0, 100].
pub fn word_iou(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let a: HashSet<String> = lemmatize(h).into_iter().collect();
            let b: HashSet<String> = lemmatize(r).into_iter().collect();
            let union = a.union(&b).count();
            if union == 0 {
                1.0
            } else {
                a.intersection(&b).count() as f64 / union as f64
            }
        })
        .sum();
    Ok(100.0 * total / hyps.len() as f64)
}
