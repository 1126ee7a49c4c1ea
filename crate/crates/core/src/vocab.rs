//! Token vocabulary with reserved ids and whitespace tokenization.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::data::RawPair;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token/id map. Ids `0..4` are reserved for PAD/BOS/EOS/UNK and
/// never assigned to corpus tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Keep the most frequent corpus tokens, ties broken lexicographically.
    pub fn build<'a>(pairs: impl IntoIterator<Item = &'a RawPair>, max_size: usize) -> Result<Vocab> {
        if max_size <= RESERVED.len() {
            return Err(Error::VocabTooSmall { reserved: RESERVED.len(), got: max_size });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for pair in pairs {
            any = true;
            for tok in pair.post.split_whitespace().chain(pair.response.split_whitespace()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then(ta.cmp(tb)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = ranked.into_iter().map(|(t, _)| t.to_string());
        Ok(Self::from_tokens(tokens))
    }

    /// Assemble from an ordered list of non-reserved tokens.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocab {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { token_to_id, id_to_token }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Full token list including the reserved prefix.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Rebuild text, skipping PAD/BOS/EOS (unknowns print as `<unk>`).
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect();
        toks.join(" ")
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// One token per line; 1-based line `L` holds the token with id `L - 1`,
    /// so the first four lines are the reserved tokens.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Vocab> {
        let mut lines = Vec::new();
        for line in r.lines() {
            lines.push(line?);
        }
        while lines.last().is_some_and(String::is_empty) {
            lines.pop();
        }
        if lines.len() < RESERVED.len() {
            return Err(Error::BadVocabFile(format!(
                "expected at least {} lines, found {}",
                RESERVED.len(),
                lines.len()
            )));
        }
        for (i, expect) in RESERVED.iter().enumerate() {
            if lines[i] != *expect {
                return Err(Error::BadVocabFile(format!(
                    "line {} must be the reserved token `{}`, found `{}`",
                    i + 1,
                    expect,
                    lines[i]
                )));
            }
        }
        Ok(Self::from_tokens(lines.into_iter().skip(RESERVED.len())))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Vocab> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
