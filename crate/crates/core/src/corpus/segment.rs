use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use super::{unit_id, CorpusUnit, Document, Granularity};

/// Guard list shipped with the crate; see `data/abbreviations.txt`.
pub const DEFAULT_ABBREVIATIONS: &str = include_str!("../../data/abbreviations.txt");

const TERMINALS: &[char] = &['.', '!', '?', '…'];
const CLOSERS: &[char] = &['"', '\'', ')', ']', '’', '”', '»'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '‘', '“', '«'];

/// Rule-based sentence splitter.
///
/// A boundary is placed after a run of terminal punctuation (plus any closing
/// quotes or brackets) when it is followed by whitespace and the next visible
/// character is not lowercase. A single period directly after a word on the
/// abbreviation list never ends a sentence.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashSet<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::from_list(DEFAULT_ABBREVIATIONS)
    }
}

impl SentenceSplitter {
    /// Parse a guard list: one entry per line, `#` starts a comment.
    pub fn from_list(list: &str) -> Self {
        let abbreviations = list
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| l.trim_end_matches('.').to_lowercase())
            .collect();
        Self { abbreviations }
    }

    /// Byte spans `(start, end)` of the trimmed, non-empty sentences of `text`.
    pub fn spans(&self, text: &str) -> Vec<(usize, usize)> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut spans = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            let (_, c) = chars[i];
            if !TERMINALS.contains(&c) {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < chars.len() && TERMINALS.contains(&chars[i].1) {
                i += 1;
            }
            let run_len = i - run_start;
            while i < chars.len() && CLOSERS.contains(&chars[i].1) {
                i += 1;
            }
            let end = chars.get(i).map_or(text.len(), |&(b, _)| b);
            // Must be followed by whitespace or end of text.
            if i < chars.len() && !chars[i].1.is_whitespace() {
                continue;
            }
            let next_visible = chars[i..].iter().find(|(_, ch)| !ch.is_whitespace()).map(|&(_, ch)| ch);
            if next_visible.is_some_and(char::is_lowercase) {
                continue;
            }
            if run_len == 1 && chars[run_start].1 == '.' && self.is_abbreviation(text, chars[run_start].0) {
                continue;
            }
            push_trimmed(&mut spans, text, start, end);
            start = end;
        }
        push_trimmed(&mut spans, text, start, text.len());
        spans
    }

    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.spans(text).into_iter().map(|(s, e)| &text[s..e]).collect()
    }

    fn is_abbreviation(&self, text: &str, period_at: usize) -> bool {
        let before = &text[..period_at];
        let word_start = before
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_whitespace())
            .map_or(0, |(b, c)| b + c.len_utf8());
        let word = before[word_start..].trim_start_matches(OPENERS);
        !word.is_empty() && self.abbreviations.contains(&word.to_lowercase())
    }
}

fn push_trimmed(spans: &mut Vec<(usize, usize)>, text: &str, start: usize, end: usize) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if !trimmed.is_empty() {
        spans.push((start + lead, start + lead + trimmed.len()));
    }
}

fn paragraph_break() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\r?\n[ \t\r]*\n").expect("static regex"))
}

/// Split a document into units. Ordinals are dense from 0 and empty segments
/// are dropped.
pub fn segment(doc: &Document, granularity: Granularity, splitter: &SentenceSplitter) -> Vec<CorpusUnit> {
    let pieces: Vec<&str> = match granularity {
        Granularity::FullText => vec![doc.body.trim()],
        Granularity::Paragraph => paragraph_break().split(&doc.body).map(str::trim).collect(),
        Granularity::Sentence => splitter.split(&doc.body),
    };
    pieces
        .into_iter()
        .filter(|p| !p.is_empty())
        .enumerate()
        .map(|(ordinal, text)| CorpusUnit {
            unit_id: unit_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            granularity,
            text: text.to_string(),
            title: doc.title.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(body: &str) -> Document {
        Document {
            doc_id: "d1".into(),
            title: "Debate".into(),
            body: body.into(),
            metadata: Default::default(),
        }
    }

    fn texts(units: &[CorpusUnit]) -> Vec<&str> {
        units.iter().map(|u| u.text.as_str()).collect()
    }

    #[test]
    fn three_short_sentences() {
        let units = segment(&doc("A. B. C."), Granularity::Sentence, &SentenceSplitter::default());
        assert_eq!(texts(&units), ["A.", "B.", "C."]);
        assert_eq!(units.iter().map(|u| u.ordinal).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(units[2].unit_id, "d1#2");
    }

    #[test]
    fn abbreviations_and_decimals_do_not_split() {
        let s = SentenceSplitter::default();
        let got = s.split("Mr. Smith paid 3.5 euros, e.g. for tea. Dr. Jones agreed! Did the U.S. object? No.");
        assert_eq!(
            got,
            [
                "Mr. Smith paid 3.5 euros, e.g. for tea.",
                "Dr. Jones agreed!",
                "Did the U.S. object?",
                "No."
            ]
        );
    }

    #[test]
    fn closing_quotes_stay_with_their_sentence() {
        let s = SentenceSplitter::default();
        assert_eq!(
            s.split("He said \"stop.\" Then left."),
            ["He said \"stop.\"", "Then left."]
        );
        assert_eq!(s.split("Wait... what? yes"), ["Wait... what? yes"]);
    }

    #[test]
    fn paragraphs_split_on_blank_lines() {
        let body = "First para line one.\nline two.\n\n  \nSecond para.\r\n\r\n";
        let units = segment(&doc(body), Granularity::Paragraph, &SentenceSplitter::default());
        assert_eq!(texts(&units), ["First para line one.\nline two.", "Second para."]);
    }

    #[test]
    fn full_text_is_one_unit() {
        let units = segment(
            &doc("  One. Two.\n\nThree.  "),
            Granularity::FullText,
            &SentenceSplitter::default(),
        );
        assert_eq!(texts(&units), ["One. Two.\n\nThree."]);
    }

    #[test]
    fn custom_guard_list() {
        let s = SentenceSplitter::from_list("# comment\nfig.\n");
        assert_eq!(s.split("See Fig. 2 here. Done."), ["See Fig. 2 here.", "Done."]);
        assert_eq!(s.split("Ask Dr. Who."), ["Ask Dr.", "Who."]);
    }

    fn squash(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn units_reconstruct_body(body in "[A-Za-z .!?\n\"]{0,200}", g in 0usize..3) {
            let granularity = [Granularity::Sentence, Granularity::Paragraph, Granularity::FullText][g];
            let splitter = SentenceSplitter::default();
            let d = doc(&body);
            let units = segment(&d, granularity, &splitter);
            let joined: String = units.iter().map(|u| u.text.as_str()).collect();
            prop_assert_eq!(squash(&joined), squash(&body));
            for (i, u) in units.iter().enumerate() {
                prop_assert_eq!(u.ordinal, i);
                prop_assert!(!u.text.trim().is_empty());
            }
            prop_assert_eq!(units, segment(&d, granularity, &splitter));
        }
    }
}
