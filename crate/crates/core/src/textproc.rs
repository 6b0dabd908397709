//! WordPiece tokenization and scene-graph node alignment.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::{split_words, NodeRef, ParserLexicon, SceneGraph};
use crate::util;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const CLS_ID: u32 = 2;
    pub const SEP_ID: u32 = 3;
    pub const MASK_ID: u32 = 4;
    /// First id that is not a special token.
    pub const FIRST_PLAIN_ID: u32 = 5;

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::VocabParse {
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::VocabParse {
                    line: i + 1,
                    message: "empty token".into(),
                });
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::VocabParse {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from corpus text and the lexicon: special tokens,
    /// the full ASCII alphanumeric/punctuation alphabet with continuation
    /// pieces, then whole words by descending frequency up to `max_size`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        lexicon: &ParserLexicon,
        max_size: usize,
    ) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let alnum: Vec<char> = ('a'..='z').chain('0'..='9').collect();
        tokens.extend(alnum.iter().map(|c| c.to_string()));
        tokens.extend((0x21u8..0x7f).map(char::from).filter(char::is_ascii_punctuation).map(|c| c.to_string()));
        tokens.extend(alnum.iter().map(|c| format!("{CONTINUATION}{c}")));

        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w.text).or_default() += 1;
            }
        }
        for w in lexicon.surface_words() {
            *counts.entry(w).or_default() += 1;
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| w.chars().count() > 1)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for (w, _) in words {
            if tokens.len() >= max_size {
                break;
            }
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("constructed vocab is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id < Self::FIRST_PLAIN_ID
    }

    /// Greedy longest-match-first segmentation of one lowercased word.
    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(Self::UNK_ID);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(Self::UNK_ID);
                    return;
                }
            }
        }
    }

    pub fn wordpiece(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in split_words(text) {
            self.word_pieces(&w.text, &mut out);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() && !Self::is_special(id) => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }
}

/// Lowercases, splits punctuation and collapses whitespace.
pub fn normalize(text: &str) -> String {
    split_words(text)
        .into_iter()
        .map(|w| w.text)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token positions `[start, end)` of one scene-graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpan {
    pub node: NodeRef,
    pub start: usize,
    pub end: usize,
}

impl NodeSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// `[CLS] w1 .. wT [SEP]` with node-to-token-span alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedCaption {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    /// Sorted by node.
    pub node_spans: Vec<NodeSpan>,
}

impl AlignedCaption {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn span_of(&self, node: NodeRef) -> Option<NodeSpan> {
        self.node_spans
            .binary_search_by(|s| s.node.cmp(&node))
            .ok()
            .map(|i| self.node_spans[i])
    }
}

pub fn encode(caption: &str, graph: &SceneGraph, vocab: &Vocab) -> Result<AlignedCaption> {
    if graph.source != caption {
        return Err(Error::Validation(
            "scene graph was parsed from a different caption".into(),
        ));
    }
    let words = split_words(caption);
    let mut ids = vec![Vocab::CLS_ID];
    // token range per word
    let mut word_tokens = Vec::with_capacity(words.len());
    for w in &words {
        let start = ids.len();
        vocab.word_pieces(&w.text, &mut ids);
        word_tokens.push(start..ids.len());
    }
    ids.push(Vocab::SEP_ID);

    let mut node_spans = Vec::with_capacity(graph.node_count());
    for node in graph.nodes() {
        let span = graph.span(node);
        let fail = || Error::Alignment {
            category: node.category.as_str(),
            index: node.index,
            surface: graph.surface(node),
        };
        let mut first = None;
        let mut last = None;
        for (wi, w) in words.iter().enumerate() {
            if w.span.overlaps(&span) {
                if w.span.start < span.start || w.span.end > span.end {
                    return Err(fail());
                }
                first.get_or_insert(wi);
                last = Some(wi);
            }
        }
        let (Some(first), Some(last)) = (first, last) else {
            return Err(fail());
        };
        let start = word_tokens[first].start;
        let end = word_tokens[last].end;
        if start >= end {
            return Err(fail());
        }
        node_spans.push(NodeSpan { node, start, end });
    }
    node_spans.sort_by(|a, b| a.node.cmp(&b.node));

    let tokens = ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK).to_string())
        .collect();
    Ok(AlignedCaption {
        ids,
        tokens,
        node_spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::{parse, NodeCategory};
    use proptest::prelude::*;

    fn small_vocab(words: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.to_string()));
        Vocab::from_tokens(tokens).unwrap()
    }

    fn pieces(v: &Vocab, text: &str) -> Vec<String> {
        v.wordpiece(text)
            .into_iter()
            .map(|id| v.token(id).unwrap().to_string())
            .collect()
    }

    fn bundled_vocab() -> Vocab {
        Vocab::build(std::iter::empty(), &ParserLexicon::bundled(), 4000)
    }

    #[test]
    fn whole_word_hit() {
        let v = small_vocab(&["cat", "c", "a", "t"]);
        assert_eq!(pieces(&v, "cat"), ["cat"]);
    }

    #[test]
    fn greedy_longest_match() {
        let v = small_vocab(&["cat", "##s", "c", "a", "t", "s", "##a", "##t"]);
        assert_eq!(pieces(&v, "cats"), ["cat", "##s"]);
        // no "##c" piece: the whole word degrades to [UNK]
        assert_eq!(pieces(&v, "tacts"), ["[UNK]"]);
        assert!(v.wordpiece("").is_empty());
    }

    #[test]
    fn special_token_order_enforced() {
        let err = Vocab::from_tokens(vec!["[UNK]".into(), "[PAD]".into()]).unwrap_err();
        assert!(matches!(err, Error::VocabParse { line: 1, .. }));
    }

    #[test]
    fn decode_cases() {
        let v = bundled_vocab();
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&v.wordpiece("a black dog")).unwrap(), "a black dog");
        assert_eq!(v.decode(&[Vocab::MASK_ID]).unwrap(), "[MASK]");
        assert!(matches!(v.decode(&[9_999_999]), Err(Error::UnknownTokenId(9_999_999))));
    }

    #[test]
    fn character_fallback() {
        let v = bundled_vocab();
        let ids = v.wordpiece("zyxwq");
        assert!(ids.len() > 1);
        assert_eq!(v.decode(&ids).unwrap(), "zyxwq");
    }

    #[test]
    fn table_one_alignment() {
        let lex = ParserLexicon::bundled();
        let v = bundled_vocab();
        let caption = crate::scenegraph::tests_support::TABLE1;
        let g = parse(caption, &lex);
        let ac = encode(caption, &g, &v).unwrap();
        assert_eq!(ac.ids[0], Vocab::CLS_ID);
        assert_eq!(*ac.ids.last().unwrap(), Vocab::SEP_ID);
        let cat = g.objects.iter().position(|o| o.lemma == "cat").unwrap();
        let s = ac
            .span_of(NodeRef { category: NodeCategory::Object, index: cat })
            .unwrap();
        assert_eq!(&ac.tokens[s.positions()], ["cat"]);
        // "A woman in blue dress is putting her little white cat"
        assert_eq!(s.start, 11);
        let on_top = g.relations.iter().position(|r| r.lemma == "on-top-of").unwrap();
        let s = ac
            .span_of(NodeRef { category: NodeCategory::Relationship, index: on_top })
            .unwrap();
        assert_eq!(&ac.tokens[s.positions()], ["on", "top", "of"]);
        for ns in &ac.node_spans {
            assert!(ns.start >= 1 && ns.end <= ac.len() - 1);
            let text = v.decode(&ac.ids[ns.positions()]).unwrap();
            assert_eq!(text, normalize(&g.surface(ns.node)));
        }
    }

    #[test]
    fn no_nodes_no_spans() {
        let lex = ParserLexicon::bundled();
        let v = bundled_vocab();
        let g = parse("the and of", &lex);
        let ac = encode("the and of", &g, &v).unwrap();
        assert!(ac.node_spans.is_empty());
        assert_eq!(ac.len(), 5);
    }

    #[test]
    fn mismatched_source_rejected() {
        let lex = ParserLexicon::bundled();
        let v = bundled_vocab();
        let g = parse("a dog", &lex);
        assert!(encode("a cat", &g, &v).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_normalizes(words in proptest::collection::vec("[a-zA-Z0-9]{1,12}|[,.!?]", 0..12)) {
            let v = bundled_vocab();
            let text = words.join("  ");
            let ids = v.wordpiece(&text);
            prop_assert!(ids.iter().all(|&id| !Vocab::is_special(id)));
            prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&text));
        }
    }
}
