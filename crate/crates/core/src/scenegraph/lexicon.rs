use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util;

const DEFAULT_LEXICON: &str = include_str!("../../data/default_lexicon.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordClass {
    Noun,
    Adjective,
    Verb,
    Preposition,
    Stopword,
    Determiner,
}

impl WordClass {
    pub const ALL: [WordClass; 6] = [
        WordClass::Noun,
        WordClass::Adjective,
        WordClass::Verb,
        WordClass::Preposition,
        WordClass::Stopword,
        WordClass::Determiner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WordClass::Noun => "noun",
            WordClass::Adjective => "adj",
            WordClass::Verb => "verb",
            WordClass::Preposition => "prep",
            WordClass::Stopword => "stop",
            WordClass::Determiner => "det",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        WordClass::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for WordClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexEntry {
    pub lemma: String,
    pub inflections: Vec<String>,
}

/// What a surface form resolves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub class: WordClass,
    pub lemma: String,
}

/// Word-class lists with inflection maps. Read-only after construction.
#[derive(Debug, Clone)]
pub struct ParserLexicon {
    classes: [Vec<LexEntry>; 6],
    single: HashMap<String, Resolved>,
    // (words, resolution), longest first
    multiword: Vec<(Vec<String>, Resolved)>,
}

impl ParserLexicon {
    /// The lexicon bundled with the crate; covers the synthetic corpus ontology.
    pub fn bundled() -> Self {
        Self::parse_str(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&util::read_to_string(path)?)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut classes: [Vec<LexEntry>; 6] = Default::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::LexiconParse {
                    line: line_no,
                    message: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
                });
            }
            let class = WordClass::parse(fields[0].trim()).ok_or_else(|| Error::LexiconParse {
                line: line_no,
                message: format!("unknown class {:?}", fields[0]),
            })?;
            let lemma = normalize_phrase(fields[1]);
            if lemma.is_empty() {
                return Err(Error::LexiconParse {
                    line: line_no,
                    message: "empty lemma".into(),
                });
            }
            let mut inflections = Vec::new();
            if let Some(list) = fields.get(2) {
                for inf in list.split(',') {
                    let inf = normalize_phrase(inf);
                    if inf.is_empty() {
                        return Err(Error::LexiconParse {
                            line: line_no,
                            message: "empty inflection".into(),
                        });
                    }
                    if inf != lemma && !inflections.contains(&inf) {
                        inflections.push(inf);
                    }
                }
            }
            let bucket = &mut classes[class.index()];
            match bucket.iter_mut().find(|e| e.lemma == lemma) {
                Some(existing) => {
                    for inf in inflections {
                        if !existing.inflections.contains(&inf) {
                            existing.inflections.push(inf);
                        }
                    }
                }
                None => bucket.push(LexEntry { lemma, inflections }),
            }
        }
        Self::from_classes(classes)
    }

    fn from_classes(classes: [Vec<LexEntry>; 6]) -> Result<Self> {
        let mut single: HashMap<String, Resolved> = HashMap::new();
        let mut multi: HashMap<Vec<String>, Resolved> = HashMap::new();
        for class in WordClass::ALL {
            for entry in &classes[class.index()] {
                let forms = std::iter::once(&entry.lemma).chain(entry.inflections.iter());
                for form in forms {
                    let resolved = Resolved {
                        class,
                        lemma: entry.lemma.clone(),
                    };
                    let words: Vec<String> = form.split(' ').map(str::to_string).collect();
                    let previous = if words.len() == 1 {
                        single.get(form).cloned()
                    } else {
                        multi.get(&words).cloned()
                    };
                    if let Some(prev) = previous {
                        if prev.class != class {
                            return Err(Error::LexiconOverlap {
                                word: form.clone(),
                                first: prev.class.as_str(),
                                second: class.as_str(),
                            });
                        }
                        if prev.lemma != entry.lemma {
                            return Err(Error::Validation(format!(
                                "inflection {form:?} maps to both {:?} and {:?}",
                                prev.lemma, entry.lemma
                            )));
                        }
                        continue;
                    }
                    if words.len() == 1 {
                        single.insert(form.clone(), resolved);
                    } else {
                        multi.insert(words, resolved);
                    }
                }
            }
        }
        let mut multiword: Vec<(Vec<String>, Resolved)> = multi.into_iter().collect();
        multiword.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            classes,
            single,
            multiword,
        })
    }

    pub fn entries(&self, class: WordClass) -> &[LexEntry] {
        &self.classes[class.index()]
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, word: &str) -> Option<&Resolved> {
        self.single.get(word)
    }

    /// Longest multiword entry starting at `words[0]`, returning its word count.
    pub fn match_multiword<S: AsRef<str>>(&self, words: &[S]) -> Option<(usize, &Resolved)> {
        self.multiword.iter().find_map(|(phrase, resolved)| {
            let n = phrase.len();
            (words.len() >= n && phrase.iter().zip(words).all(|(p, w)| p == w.as_ref()))
                .then_some((n, resolved))
        })
    }

    /// Every surface form (lemmas, inflections, multiword pieces) as single words.
    pub fn surface_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for class in WordClass::ALL {
            for e in self.entries(class) {
                for form in std::iter::once(&e.lemma).chain(&e.inflections) {
                    out.extend(form.split(' ').map(str::to_string));
                }
            }
        }
        out
    }

    /// Serializes back to the line format; `parse_str(to_tsv())` yields an equal lexicon.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for class in WordClass::ALL {
            for e in self.entries(class) {
                out.push_str(class.as_str());
                out.push('\t');
                out.push_str(&e.lemma);
                if !e.inflections.is_empty() {
                    out.push('\t');
                    out.push_str(&e.inflections.join(","));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
