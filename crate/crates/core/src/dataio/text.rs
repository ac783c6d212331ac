//! Subtitle text cleaning.

use std::sync::OnceLock;

use regex::Regex;

struct Patterns {
    tags: Regex,
    annotations: Regex,
    leading_symbols: Regex,
    speaker: Regex,
    space_before_punct: Regex,
    spaces: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        tags: Regex::new(r"<[^<>]*>").unwrap(),
        annotations: Regex::new(r"\([^()]*\)|\[[^\[\]]*\]|\*[^*]*\*").unwrap(),
        leading_symbols: Regex::new(r"(?m)^[ \t]*[♪♫•·\-–—]+[ \t]*").unwrap(),
        speaker: Regex::new(r"(?m)^[ \t]*\p{Alphabetic}+:[ \t]*").unwrap(),
        space_before_punct: Regex::new(r"\s+([.,!?;:])").unwrap(),
        spaces: Regex::new(r"\s+").unwrap(),
    })
}

const QUOTES: &[char] = &['"', '\'', '“', '”', '‘', '’', '«', '»'];

fn clean_once(raw: &str) -> String {
    let p = patterns();
    let s = html_escape::decode_html_entities(raw);
    let s = p.tags.replace_all(&s, "");
    let s = p.annotations.replace_all(&s, "");
    let s = p.leading_symbols.replace_all(&s, "");
    let s = p.speaker.replace_all(&s, "");
    let s = p.space_before_punct.replace_all(&s, "$1");
    let s = p.spaces.replace_all(&s, " ");
    s.trim().trim_matches(QUOTES).trim().to_string()
}

/// Entity decoding, tag and annotation removal, leading-symbol and speaker
/// stripping, punctuation spacing, space collapsing and quote trimming.
///
/// The stages are repeated until the string stops changing, so the result
/// is a fixed point (`clean_text(clean_text(s)) == clean_text(s)`).
/// Every stage only shortens the string, which bounds the iteration.
pub fn clean_text(raw: &str) -> String {
    let mut cur = clean_once(raw);
    loop {
        let next = clean_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}
