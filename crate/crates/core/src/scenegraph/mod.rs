//! Caption to scene-graph parsing.
//!
//! A deterministic rule grammar over lexicon word classes:
//!
//! 1. every noun is an object;
//! 2. the maximal run of adjectives immediately before a noun attaches to it;
//! 3. between two consecutive nouns separated by at most
//!    [`RELATION_WINDOW`] content words, the first verb or preposition (or a
//!    verb directly followed by a preposition) forms a relation whose subject
//!    is the left noun;
//! 4. multiword lexicon entries are matched longest-first before single words.
//!
//! Stopwords, determiners and out-of-lexicon words are dropped before rules
//! 2 and 3 apply, so they neither create nodes nor count toward the window.

mod lexicon;

use serde::{Deserialize, Serialize};

pub use lexicon::{LexEntry, ParserLexicon, Resolved, WordClass};

/// Maximum number of content words between two nouns linked by a relation.
pub const RELATION_WINDOW: usize = 4;

/// Half-open range of character (not byte) offsets into the caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn slice(&self, text: &str) -> String {
        text.chars().skip(self.start).take(self.end - self.start).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub lemma: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePair {
    pub lemma: String,
    pub span: Span,
    pub owner: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject: usize,
    pub lemma: String,
    pub span: Span,
    pub object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeCategory {
    Object,
    Attribute,
    Relationship,
}

impl NodeCategory {
    pub const ALL: [NodeCategory; 3] = [
        NodeCategory::Object,
        NodeCategory::Attribute,
        NodeCategory::Relationship,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeCategory::Object => "object",
            NodeCategory::Attribute => "attribute",
            NodeCategory::Relationship => "relationship",
        }
    }
}

/// A node addressed by category and index into the matching list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub category: NodeCategory,
    pub index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<ObjectNode>,
    pub attributes: Vec<AttributePair>,
    pub relations: Vec<RelationTriplet>,
    pub source: String,
}

impl SceneGraph {
    pub fn node_count(&self) -> usize {
        self.objects.len() + self.attributes.len() + self.relations.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeRef> + '_ {
        let objs = (0..self.objects.len()).map(|index| NodeRef {
            category: NodeCategory::Object,
            index,
        });
        let attrs = (0..self.attributes.len()).map(|index| NodeRef {
            category: NodeCategory::Attribute,
            index,
        });
        let rels = (0..self.relations.len()).map(|index| NodeRef {
            category: NodeCategory::Relationship,
            index,
        });
        objs.chain(attrs).chain(rels)
    }

    pub fn span(&self, node: NodeRef) -> Span {
        match node.category {
            NodeCategory::Object => self.objects[node.index].span,
            NodeCategory::Attribute => self.attributes[node.index].span,
            NodeCategory::Relationship => self.relations[node.index].span,
        }
    }

    pub fn lemma(&self, node: NodeRef) -> &str {
        match node.category {
            NodeCategory::Object => &self.objects[node.index].lemma,
            NodeCategory::Attribute => &self.attributes[node.index].lemma,
            NodeCategory::Relationship => &self.relations[node.index].lemma,
        }
    }

    pub fn surface(&self, node: NodeRef) -> String {
        self.span(node).slice(&self.source)
    }

    /// Checks every structural invariant; used by tests and after deserialization.
    pub fn validate(&self) -> crate::Result<()> {
        let fail = |m: String| Err(crate::Error::Validation(m));
        let n_chars = self.source.chars().count();
        let n_obj = self.objects.len();
        for a in &self.attributes {
            if a.owner >= n_obj {
                return fail(format!("attribute {:?} owner {} out of range", a.lemma, a.owner));
            }
        }
        for r in &self.relations {
            if r.subject >= n_obj || r.object >= n_obj {
                return fail(format!("relation {:?} endpoint out of range", r.lemma));
            }
            if r.subject == r.object {
                return fail(format!("relation {:?} links an object to itself", r.lemma));
            }
        }
        for cat in NodeCategory::ALL {
            let spans: Vec<Span> = self
                .nodes()
                .filter(|n| n.category == cat)
                .map(|n| self.span(n))
                .collect();
            for (i, s) in spans.iter().enumerate() {
                if s.start >= s.end || s.end > n_chars {
                    return fail(format!("{} span {s:?} outside source", cat.as_str()));
                }
                if spans[..i].iter().any(|p| p.overlaps(s)) {
                    return fail(format!("{} spans overlap at {s:?}", cat.as_str()));
                }
            }
        }
        Ok(())
    }
}

/// A whitespace/punctuation-delimited word with character offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub span: Span,
}

/// Splits on whitespace and emits each ASCII punctuation character as its
/// own word. Text is lowercased.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    let flush = |cur: &mut String, start: usize, end: usize, out: &mut Vec<Word>| {
        if !cur.is_empty() {
            out.push(Word {
                text: std::mem::take(cur),
                span: Span::new(start, end),
            });
        }
    };
    let mut idx = 0;
    for (i, ch) in text.chars().enumerate() {
        idx = i + 1;
        if ch.is_whitespace() {
            flush(&mut cur, start, i, &mut out);
        } else if ch.is_ascii_punctuation() {
            flush(&mut cur, start, i, &mut out);
            out.push(Word {
                text: ch.to_string(),
                span: Span::new(i, i + 1),
            });
        } else {
            if cur.is_empty() {
                start = i;
            }
            cur.extend(ch.to_lowercase());
        }
    }
    flush(&mut cur, start, idx, &mut out);
    out
}

#[derive(Debug, Clone)]
struct Unit {
    class: WordClass,
    lemma: String,
    span: Span,
}

/// Resolves words into lexicon units, multiword entries first. Unknown
/// words are dropped.
fn resolve_units(words: &[Word], lexicon: &ParserLexicon) -> Vec<Unit> {
    let texts: Vec<&str> = words.iter().map(|w| w.text.as_str()).collect();
    let mut units = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if let Some((n, r)) = lexicon.match_multiword(&texts[i..]) {
            units.push(Unit {
                class: r.class,
                lemma: r.lemma.clone(),
                span: Span::new(words[i].span.start, words[i + n - 1].span.end),
            });
            i += n;
            continue;
        }
        if let Some(r) = lexicon.lookup(texts[i]) {
            units.push(Unit {
                class: r.class,
                lemma: r.lemma.clone(),
                span: words[i].span,
            });
        }
        i += 1;
    }
    units
}

fn hyphenate(lemma: &str) -> String {
    lemma.replace(' ', "-")
}

/// Lemmatizes a phrase the way node lemmas are formed: each lexicon unit
/// is reduced to its lemma and units are joined with hyphens. Unknown
/// words pass through unchanged.
pub fn lemmatize(text: &str, lexicon: &ParserLexicon) -> String {
    let words = split_words(text);
    let texts: Vec<&str> = words.iter().map(|w| w.text.as_str()).collect();
    let mut parts = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if let Some((n, r)) = lexicon.match_multiword(&texts[i..]) {
            parts.push(hyphenate(&r.lemma));
            i += n;
        } else {
            parts.push(
                lexicon
                    .lookup(texts[i])
                    .map(|r| r.lemma.clone())
                    .unwrap_or_else(|| texts[i].to_string()),
            );
            i += 1;
        }
    }
    parts.join("-")
}

/// Parses a caption into a scene graph. Never fails; words outside the
/// lexicon simply produce fewer nodes.
pub fn parse(caption: &str, lexicon: &ParserLexicon) -> SceneGraph {
    let words = split_words(caption);
    let units: Vec<Unit> = resolve_units(&words, lexicon)
        .into_iter()
        .filter(|u| !matches!(u.class, WordClass::Stopword | WordClass::Determiner))
        .collect();

    let mut graph = SceneGraph {
        source: caption.to_string(),
        ..Default::default()
    };
    // unit index -> object index
    let mut noun_units = Vec::new();
    for (ui, u) in units.iter().enumerate() {
        if u.class == WordClass::Noun {
            noun_units.push(ui);
            graph.objects.push(ObjectNode {
                lemma: u.lemma.clone(),
                span: u.span,
            });
        }
    }

    for (obj, &ui) in noun_units.iter().enumerate() {
        let mut k = ui;
        let mut run = Vec::new();
        while k > 0 && units[k - 1].class == WordClass::Adjective {
            k -= 1;
            run.push(k);
        }
        for &ai in run.iter().rev() {
            graph.attributes.push(AttributePair {
                lemma: units[ai].lemma.clone(),
                span: units[ai].span,
                owner: obj,
            });
        }
    }

    for (left, pair) in noun_units.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        if b - a - 1 > RELATION_WINDOW {
            continue;
        }
        let between = a + 1..b;
        let Some(p) = between
            .clone()
            .find(|&k| matches!(units[k].class, WordClass::Verb | WordClass::Preposition))
        else {
            continue;
        };
        let head = &units[p];
        let (lemma, span) = if head.class == WordClass::Verb
            && p + 1 < b
            && units[p + 1].class == WordClass::Preposition
        {
            let prep = &units[p + 1];
            (
                format!("{}-{}", hyphenate(&head.lemma), hyphenate(&prep.lemma)),
                Span::new(head.span.start, prep.span.end),
            )
        } else {
            (hyphenate(&head.lemma), head.span)
        };
        graph.relations.push(RelationTriplet {
            subject: left,
            lemma,
            span,
            object: left + 1,
        });
    }
    graph
}

/// Node totals across a set of graphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeCountSummary {
    pub graphs: usize,
    pub objects: usize,
    pub attributes: usize,
    pub relations: usize,
    pub total: usize,
    pub object_ratio: f64,
    pub attribute_ratio: f64,
    pub relation_ratio: f64,
}

pub fn graph_stats<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> NodeCountSummary {
    let mut s = NodeCountSummary::default();
    for g in graphs {
        s.graphs += 1;
        s.objects += g.objects.len();
        s.attributes += g.attributes.len();
        s.relations += g.relations.len();
    }
    s.total = s.objects + s.attributes + s.relations;
    if s.total > 0 {
        let t = s.total as f64;
        s.object_ratio = s.objects as f64 / t;
        s.attribute_ratio = s.attributes as f64 / t;
        s.relation_ratio = s.relations as f64 / t;
    }
    s
}
