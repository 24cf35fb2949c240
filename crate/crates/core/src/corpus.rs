//! Comment ingestion, sentence segmentation and first-person filtering.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub target_id: String,
    pub comment_id: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subreddit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<i64>,
}

impl Comment {
    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| Error::InvalidComment {
            target_id: self.target_id.clone(),
            comment_id: self.comment_id.clone(),
            message: message.into(),
        };
        if self.target_id.is_empty() {
            return Err(invalid("empty target_id"));
        }
        if self.comment_id.is_empty() {
            return Err(invalid("empty comment_id"));
        }
        if self.body.trim().is_empty() {
            return Err(invalid("empty body"));
        }
        Ok(())
    }
}

pub fn parse_comment_line(line: &str) -> Result<Comment, serde_json::Error> {
    serde_json::from_str(line)
}

/// Parses a line-delimited comment file, validating each record. Comment ids
/// must be unique across the file because sentence ids derive from them.
pub fn parse_comments(text: &str, source: &str) -> Result<Vec<Comment>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let comment = parse_comment_line(line).map_err(|e| err(e.to_string()))?;
        comment.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert(comment.comment_id.clone()) {
            return Err(err(format!(
                "duplicate comment {}/{}",
                comment.target_id, comment.comment_id
            )));
        }
        out.push(comment);
    }
    Ok(out)
}

pub fn load_comments(path: &Path) -> Result<Vec<Comment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_comments(&text, &path.display().to_string())
}

const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "vs.", "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "u.s.",
    "u.k.", "a.m.", "p.m.", "no.", "approx.", "fig.", "cf.",
];
const MAX_QUOTE_SPAN: usize = 60;

/// Splits a comment body into sentences.
///
/// Boundaries are runs of `.`, `!` or `?` followed by whitespace or the end of
/// the text, and newlines. A period ending a known abbreviation does not end a
/// sentence, and nothing inside a quoted span shorter than 60 characters is
/// split.
pub fn segment(body: &str) -> Vec<String> {
    let chars: Vec<char> = body.chars().collect();
    let protected = quoted_spans(&chars);
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            push_sentence(&mut sentences, &chars[start..i]);
            start = i + 1;
            i += 1;
            continue;
        }
        if matches!(c, '.' | '!' | '?') && !protected[i] {
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '.' | '!' | '?') {
                end += 1;
            }
            // closing quotes or brackets stay with the sentence they close
            while end < chars.len() && matches!(chars[end], '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                end += 1;
            }
            let at_boundary = end == chars.len() || chars[end].is_whitespace();
            if at_boundary && !(c == '.' && end == i + 1 && ends_with_abbreviation(&chars[start..end])) {
                push_sentence(&mut sentences, &chars[start..end]);
                start = end;
            }
            i = end;
            continue;
        }
        i += 1;
    }
    push_sentence(&mut sentences, &chars[start..]);
    sentences
}

fn push_sentence(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

fn ends_with_abbreviation(chars: &[char]) -> bool {
    let s: String = chars.iter().collect();
    let last = s.split_whitespace().last().unwrap_or("");
    let last = last.trim_start_matches(|c: char| matches!(c, '(' | '"' | '\'' | '['));
    let lower = last.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Marks characters strictly inside short quoted spans.
fn quoted_spans(chars: &[char]) -> Vec<bool> {
    let mut protected = vec![false; chars.len()];
    let mut i = 0;
    while i < chars.len() {
        let close = match chars[i] {
            '"' => '"',
            '\u{201c}' => '\u{201d}',
            _ => {
                i += 1;
                continue;
            }
        };
        let limit = (i + 1 + MAX_QUOTE_SPAN).min(chars.len());
        match (i + 1..limit).find(|&j| chars[j] == close || chars[j] == '\n') {
            Some(j) if chars[j] == close => {
                protected[i + 1..j].iter_mut().for_each(|p| *p = true);
                i = j + 1;
            }
            _ => i += 1,
        }
    }
    protected
}

/// Which tokens count as the first-person pronoun.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounMatcher {
    /// Accept lowercase `i` and its contractions.
    #[serde(default)]
    pub case_insensitive: bool,
    /// Accept `I'm`, `I've`, `I'd` and `I'll`.
    #[serde(default = "yes")]
    pub contractions: bool,
}

fn yes() -> bool {
    true
}

impl Default for PronounMatcher {
    fn default() -> Self {
        PronounMatcher {
            case_insensitive: false,
            contractions: true,
        }
    }
}

impl PronounMatcher {
    pub fn is_pronoun(&self, word: &str) -> bool {
        let word = word.replace('\u{2019}', "'");
        let word = if self.case_insensitive {
            word.to_lowercase()
        } else {
            word
        };
        let (base, rest) = match word.split_once('\'') {
            Some((b, r)) => (b, Some(r)),
            None => (word.as_str(), None),
        };
        let base_ok = base == "I" || (self.case_insensitive && base == "i");
        match rest {
            None => base_ok,
            Some(suffix) => {
                let suffix = suffix.to_lowercase();
                base_ok && self.contractions && matches!(suffix.as_str(), "m" | "ve" | "d" | "ll")
            }
        }
    }

    pub fn matches(&self, sentence: &str) -> bool {
        words(sentence).any(|w| self.is_pronoun(w))
    }
}

/// Word tokens: maximal runs of letters, digits and apostrophes.
fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}'))
        .map(|w| w.trim_matches(|c| c == '\'' || c == '\u{2019}'))
        .filter(|w| !w.is_empty())
}

pub fn token_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceCandidate {
    pub target_id: String,
    /// `<comment_id>:<sentence index>`
    pub sentence_id: String,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_tokens: usize,
    pub matcher: PronounMatcher,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_tokens: 3,
            matcher: PronounMatcher::default(),
        }
    }
}

/// Keeps first-person sentences with at least `min_tokens` tokens. The input
/// is `(sentence_id, text)` pairs for one target.
pub fn filter_candidates(
    target_id: &str,
    sentences: &[(String, String)],
    config: &FilterConfig,
) -> Result<Vec<SentenceCandidate>> {
    if config.min_tokens == 0 {
        return Err(Error::InvalidArgument("min_tokens must be >= 1".into()));
    }
    Ok(sentences
        .iter()
        .filter_map(|(id, text)| {
            let n = token_count(text);
            (n >= config.min_tokens && config.matcher.matches(text)).then(|| SentenceCandidate {
                target_id: target_id.to_string(),
                sentence_id: id.clone(),
                text: text.clone(),
                token_count: n,
            })
        })
        .collect())
}

/// Segments one comment and assigns sentence ids.
pub fn comment_sentences(comment: &Comment) -> Vec<(String, String)> {
    segment(&comment.body)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("{}:{}", comment.comment_id, i), s))
        .collect()
}

/// Candidates for a whole corpus in input order.
pub fn extract_candidates(comments: &[Comment], config: &FilterConfig) -> Result<Vec<SentenceCandidate>> {
    use rayon::prelude::*;
    if config.min_tokens == 0 {
        return Err(Error::InvalidArgument("min_tokens must be >= 1".into()));
    }
    let per_comment: Vec<Vec<SentenceCandidate>> = comments
        .par_iter()
        .map(|c| filter_candidates(&c.target_id, &comment_sentences(c), config))
        .collect::<Result<_>>()?;
    Ok(per_comment.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetAvailability {
    pub sentences: usize,
    pub pronoun_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityStats {
    pub sentences: usize,
    pub pronoun_sentences: usize,
    /// `None` when the corpus has no sentences.
    pub proportion: Option<f64>,
    pub per_target: BTreeMap<String, TargetAvailability>,
}

impl AvailabilityStats {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target_id", "sentences", "pronoun_sentences"])?;
        for (t, a) in &self.per_target {
            w.write_record([t.as_str(), &a.sentences.to_string(), &a.pronoun_sentences.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Counts sentences and first-person sentences per target.
pub fn availability_report(comments: &[Comment], matcher: &PronounMatcher) -> AvailabilityStats {
    let mut per_target: BTreeMap<String, TargetAvailability> = BTreeMap::new();
    for comment in comments {
        let entry = per_target.entry(comment.target_id.clone()).or_default();
        for sentence in segment(&comment.body) {
            entry.sentences += 1;
            if matcher.matches(&sentence) {
                entry.pronoun_sentences += 1;
            }
        }
    }
    let sentences = per_target.values().map(|a| a.sentences).sum();
    let pronoun_sentences = per_target.values().map(|a| a.pronoun_sentences).sum();
    AvailabilityStats {
        sentences,
        pronoun_sentences,
        proportion: (sentences > 0).then(|| pronoun_sentences as f64 / sentences as f64),
        per_target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(target: &str, id: &str, body: &str) -> Comment {
        Comment {
            target_id: target.into(),
            comment_id: id.into(),
            body: body.into(),
            subreddit: None,
            created_at: None,
        }
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment("I like it. Do you?"), ["I like it.", "Do you?"]);
        assert_eq!(segment("I met Dr. Smith today!"), ["I met Dr. Smith today!"]);
        assert!(segment("   ").is_empty());
        assert_eq!(segment("no terminal at all"), ["no terminal at all"]);
    }

    #[test]
    fn segment_guards() {
        assert_eq!(segment("I moved to the U.S. last year."), ["I moved to the U.S. last year."]);
        assert_eq!(segment("Pi is 3.14 exactly. Yes"), ["Pi is 3.14 exactly.", "Yes"]);
        assert_eq!(
            segment("He said \"stop. now!\" and left. Fine"),
            ["He said \"stop. now!\" and left.", "Fine"]
        );
        assert_eq!(segment("What?! Really..."), ["What?!", "Really..."]);
        assert_eq!(segment("line one\nline two"), ["line one", "line two"]);
        assert_eq!(segment("(I agree.) Next"), ["(I agree.)", "Next"]);
    }

    #[test]
    fn long_quotes_are_split() {
        let long = format!("\"{}. {}\" end", "a".repeat(40), "b".repeat(40));
        assert_eq!(segment(&long).len(), 2);
    }

    #[test]
    fn pronoun_matching() {
        let m = PronounMatcher::default();
        assert!(m.matches("I avoid crowds"));
        assert!(m.matches("I'm always prepared"));
        assert!(m.matches("well, I've been there"));
        assert!(m.matches("yes I\u{2019}ll do it"));
        assert!(!m.matches("i avoid crowds"));
        assert!(!m.matches("Nice weather"));
        assert!(!m.matches("It's Iceland"));
        assert!(!m.matches("I's"));
        let relaxed = PronounMatcher {
            case_insensitive: true,
            contractions: true,
        };
        assert!(relaxed.matches("i avoid crowds"));
        let strict = PronounMatcher {
            case_insensitive: false,
            contractions: false,
        };
        assert!(!strict.matches("I'm here now"));
    }

    #[test]
    fn filter_examples() {
        let s = vec![
            ("c:0".to_string(), "I avoid crowds".to_string()),
            ("c:1".to_string(), "Nice weather".to_string()),
            ("c:2".to_string(), "i avoid crowds".to_string()),
            ("c:3".to_string(), "I'm always prepared".to_string()),
            ("c:4".to_string(), "I agree".to_string()),
        ];
        let out = filter_candidates("t", &s, &FilterConfig::default()).unwrap();
        let ids: Vec<_> = out.iter().map(|c| c.sentence_id.as_str()).collect();
        assert_eq!(ids, ["c:0", "c:3"]);
        assert_eq!(out[0].token_count, 3);
        let zero = FilterConfig {
            min_tokens: 0,
            ..Default::default()
        };
        assert!(filter_candidates("t", &s, &zero).is_err());
    }

    #[test]
    fn availability_counts() {
        let corpus = vec![
            c("a", "1", "I like dogs. Cats are fine. I'm tired."),
            c("a", "2", "Nothing here. Really nothing."),
            c("b", "3", "I agree with you. The end. Sure. I guess so. Okay."),
        ];
        let r = availability_report(&corpus, &PronounMatcher::default());
        assert_eq!(r.sentences, 10);
        assert_eq!(r.pronoun_sentences, 4);
        assert_eq!(r.proportion, Some(0.4));
        assert_eq!(r.per_target["a"].sentences, 5);
        let empty = availability_report(&[], &PronounMatcher::default());
        assert_eq!(empty.proportion, None);
    }

    #[test]
    fn comment_validation() {
        let text = "{\"target_id\":\"a\",\"comment_id\":\"1\",\"body\":\"hi\"}\n{\"target_id\":\"a\",\"comment_id\":\"1\",\"body\":\"again\"}\n";
        assert!(parse_comments(text, "x").is_err());
        assert!(parse_comments("{\"target_id\":\"a\",\"comment_id\":\"1\",\"body\":\"  \"}", "x").is_err());
        let ok = parse_comments("{\"target_id\":\"a\",\"comment_id\":\"1\",\"body\":\"hi\",\"created_at\":5}\n\n", "x").unwrap();
        assert_eq!(ok[0].created_at, Some(5));
    }

    fn strip_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn segmentation_covers_input(body in "[a-zA-Z .!?\"\n]{0,200}") {
            let parts = segment(&body);
            prop_assert_eq!(strip_ws(&parts.concat()), strip_ws(&body));
            prop_assert_eq!(segment(&body), parts);
        }

        #[test]
        fn filtered_candidates_contain_pronoun(
            words in proptest::collection::vec("(I|i|I'm|you|we|the|cat|I've|Iris|dog)", 0..8),
            min_tokens in 1usize..5,
        ) {
            let sentence = words.join(" ");
            let config = FilterConfig { min_tokens, matcher: PronounMatcher::default() };
            let out = filter_candidates("t", &[("c:0".into(), sentence.clone())], &config).unwrap();
            let expected = words.len() >= min_tokens
                && words.iter().any(|w| matches!(w.as_str(), "I" | "I'm" | "I've"));
            prop_assert_eq!(out.len() == 1, expected);
        }
    }
}
