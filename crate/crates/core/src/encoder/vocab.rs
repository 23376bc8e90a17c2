use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Whitespace-token vocabulary with the four reserved ids first.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order, skipping duplicates.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().copied() {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        let mut v = Vocabulary::from_words(std::iter::empty::<&str>());
        for (i, l) in lines.iter().enumerate().skip(RESERVED.len()) {
            if l.is_empty() || v.index.contains_key(*l) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("empty or duplicate token {l:?}"),
                });
            }
            v.push(l);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Token, segment, position ids and padding mask for one premise/hypothesis pair,
/// laid out as `[CLS] P [SEP] H [SEP] [PAD]...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputEncoding {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl InputEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes a pair padded to `max_len`. Overlong pairs lose hypothesis tail
/// tokens first, then premise tail tokens; each side keeps at least one token.
pub fn encode_pair<S: AsRef<str>>(
    premise: &[S],
    hypothesis: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<InputEncoding> {
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(Error::Value("premise and hypothesis must be non-empty".into()));
    }
    if max_len < 5 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold a pair")));
    }
    let (mut m, mut n) = (premise.len(), hypothesis.len());
    while m + n + 3 > max_len {
        if n > 1 {
            n -= 1;
        } else {
            m -= 1;
        }
    }
    let mut token_ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    token_ids.extend(premise[..m].iter().map(|w| vocab.id(w.as_ref())));
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 0);
    token_ids.extend(hypothesis[..n].iter().map(|w| vocab.id(w.as_ref())));
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 1);
    let real = token_ids.len();
    token_ids.resize(max_len, PAD);
    segment_ids.resize(max_len, 0);
    let attention_mask = (0..max_len).map(|i| i < real).collect();
    Ok(InputEncoding {
        token_ids,
        segment_ids,
        position_ids: (0..max_len).collect(),
        attention_mask,
    })
}
