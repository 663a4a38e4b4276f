//! Whitespace word tokenizer with a serialised token table.
//!
//! File layout: a header line `bos=<id> eos=<id> unk=<id>`, then one
//! `token<TAB>id` pair per line. Ids must be dense.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub bos: usize,
    pub eos: usize,
    pub unk: usize,
}

impl Tokenizer {
    /// Special tokens first, then words in first-occurrence order.
    pub fn from_sentences<I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut t = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            bos: 0,
            eos: 1,
            unk: 2,
        };
        for s in [BOS, EOS, UNK] {
            t.push(s);
        }
        for s in sentences {
            for w in s.as_ref().split_whitespace() {
                if !t.index.contains_key(w) {
                    t.push(w);
                }
            }
        }
        t
    }

    fn push(&mut self, tok: &str) {
        self.index.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Appends unseen tokens; any token already present is a vocabulary error
    /// and nothing is added.
    pub fn add_tokens<S: AsRef<str>>(&mut self, new: &[S]) -> Result<usize> {
        let mut seen = std::collections::HashSet::new();
        for t in new {
            let t = t.as_ref();
            if self.index.contains_key(t) || !seen.insert(t) {
                return Err(Error::Vocabulary(format!("token '{t}' already in the vocabulary")));
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("token {t:?} is empty or contains whitespace")));
            }
        }
        for t in new {
            self.push(t.as_ref());
        }
        Ok(new.len())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(self.unk)).collect()
    }

    /// `BOS` + tokens + `EOS`.
    pub fn encode_sentence(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![self.bos];
        ids.extend(self.encode(text));
        ids.push(self.eos);
        ids
    }

    /// Joins tokens with spaces, dropping BOS/EOS; unknown ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.bos && i != self.eos)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("bos={} eos={} unk={}\n", self.bos, self.eos, self.unk);
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty tokenizer file".into()))?;
        let mut specials: HashMap<&str, usize> = HashMap::new();
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad tokenizer header field '{field}'")))?;
            if !matches!(k, "bos" | "eos" | "unk") {
                return Err(Error::Format(format!("unknown tokenizer header key '{k}'")));
            }
            let id = v.parse().map_err(|_| Error::Format(format!("bad id in header field '{field}'")))?;
            if specials.insert(k, id).is_some() {
                return Err(Error::Format(format!("repeated tokenizer header key '{k}'")));
            }
        }
        let get = |k: &str| specials.get(k).copied().ok_or_else(|| Error::Format(format!("tokenizer header lacks '{k}'")));
        let (bos, eos, unk) = (get("bos")?, get("eos")?, get("unk")?);

        let mut slots: Vec<Option<String>> = Vec::new();
        let mut index = HashMap::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("tokenizer line {}: expected token<TAB>id", n + 2)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("tokenizer line {}: bad id '{id}'", n + 2)))?;
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("tokenizer line {}: invalid token {tok:?}", n + 2)));
            }
            if id > 1 << 24 {
                return Err(Error::Format(format!("tokenizer line {}: id {id} too large", n + 2)));
            }
            if slots.len() <= id {
                slots.resize(id + 1, None);
            }
            if slots[id].is_some() || index.insert(tok.to_string(), id).is_some() {
                return Err(Error::Format(format!("tokenizer line {}: duplicate token or id", n + 2)));
            }
            slots[id] = Some(tok.to_string());
        }
        let tokens = slots
            .into_iter()
            .collect::<Option<Vec<String>>>()
            .ok_or_else(|| Error::Format("tokenizer ids are not dense".into()))?;
        if [bos, eos, unk].iter().any(|&i| i >= tokens.len()) || bos == eos {
            return Err(Error::Format("special token ids out of range".into()));
        }
        Ok(Self { tokens, index, bos, eos, unk })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
