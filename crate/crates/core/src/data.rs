//! Character-level corpora: vocabulary, splits, batching and the
//! synthetic second domain.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"APN1";

/// Default held-out fraction.
pub const VAL_FRACTION: f64 = 0.1;

/// Sorted character inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<char>,
}

impl CharVocab {
    /// Distinct characters of `text`, ordered by code point.
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        CharVocab {
            symbols: set.into_iter().collect(),
        }
    }

    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("vocabulary symbols must be strictly increasing".into()));
        }
        if symbols.len() > u16::MAX as usize + 1 {
            return Err(Error::Data(format!("vocabulary of {} symbols does not fit u16 tokens", symbols.len())));
        }
        Ok(CharVocab { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.binary_search(&c).ok()
    }

    /// Characters of `text` outside the vocabulary, deduplicated and sorted.
    pub fn missing(&self, text: &str) -> Vec<char> {
        let set: BTreeSet<char> = text.chars().filter(|&c| self.index_of(c).is_none()).collect();
        set.into_iter().collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u16>> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .map(|i| i as u16)
                    .ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u16]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.symbols
                    .get(t as usize)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("token {t} out of range for vocabulary of {}", self.len())))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub domain: Domain,
    pub train: Vec<u16>,
    pub val: Vec<u16>,
    pub source: String,
}

impl DomainSplit {
    /// Splits `tokens` into a leading training part and a trailing
    /// validation part of `val_fraction` (rounded).
    pub fn from_tokens(domain: Domain, tokens: Vec<u16>, val_fraction: f64, source: String) -> Result<Self> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
        }
        let n_val = (tokens.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val >= tokens.len() {
            return Err(Error::Data(format!(
                "{} tokens are too few for a {val_fraction} validation split",
                tokens.len()
            )));
        }
        let mut train = tokens;
        let val = train.split_off(train.len() - n_val);
        Ok(DomainSplit {
            domain,
            train,
            val,
            source,
        })
    }

    pub fn part(&self, which: Part) -> &[u16] {
        match which {
            Part::Train => &self.train,
            Part::Val => &self.val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
}

/// Builds the vocabulary from `text` and splits it.
pub fn ingest(text: &str, val_fraction: f64) -> Result<(CharVocab, DomainSplit)> {
    if text.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let vocab = CharVocab::from_text(text);
    let tokens = vocab.encode(text)?;
    let split = DomainSplit::from_tokens(Domain::A, tokens, val_fraction, format!("{} characters", text.chars().count()))?;
    Ok((vocab, split))
}

/// Reads a UTF-8 corpus file and ingests it.
pub fn ingest_file(path: &Path, val_fraction: f64) -> Result<(CharVocab, DomainSplit)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    let (vocab, mut split) = ingest(&text, val_fraction)?;
    split.source = path.display().to_string();
    Ok((vocab, split))
}

/// Speaker roster of the synthetic domain.
pub const ROSTER: [&str; 12] = [
    "Aldric", "Bertram", "Celestine", "Dunstan", "Elowen", "Fenwick", "Griselda", "Hartley", "Isolde", "Jessamy",
    "Kestrel", "Marisol",
];

/// Speech fragments; `{}` is replaced by a roster name.
const PHRASES: [&str; 20] = [
    "Good morrow, {}; what news from the northern road?",
    "I pray thee, speak no more of it.",
    "The lanterns burn low, and still the tide comes in.",
    "Hark, {}, the bells of the harbour ring for thee.",
    "What say you to the bargain struck at dawn?",
    "My lord, the ships are rigged and ready to sail.",
    "Fie upon thy doubt! I kept my word and more.",
    "Then let us go, ere the watchmen come again.",
    "Is it true that {} hath left the hall tonight?",
    "By my troth, I never saw so strange a sky.",
    "Come, sit by me, and tell me of thy travels.",
    "The silver mill stands idle since the flood.",
    "Ask {}; the answer lies with the keeper of keys.",
    "Peace, good friend; we shall mend it by the morrow.",
    "I swear by yonder tower, I shall not yield.",
    "Where is the letter that the rider brought?",
    "O, {}, thou art welcome as the spring!",
    "Bring wine and bread, and bid the players in.",
    "The market town is loud with talk of war.",
    "Farewell, and keep thy counsel close.",
];

/// Seeded Shakespeare-style dialogue: speaker lines in capitals followed by
/// one to three speech lines indented two spaces. Speakers cycle through a
/// freshly shuffled roster, so every name appears once per twelve speeches.
pub fn domain_b_text(seed: u64, target_chars: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_chars + 256);
    let mut order: Vec<usize> = (0..ROSTER.len()).collect();
    let mut pos = order.len();
    while out.chars().count() < target_chars {
        if pos == order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let speaker = order[pos];
        pos += 1;
        out.push_str(&ROSTER[speaker].to_uppercase());
        out.push_str(":\n");
        for _ in 0..rng.random_range(1..=3) {
            let phrase = PHRASES[rng.random_range(0..PHRASES.len())];
            let mut other = rng.random_range(0..ROSTER.len() - 1);
            if other >= speaker {
                other += 1;
            }
            out.push_str("  ");
            out.push_str(&phrase.replace("{}", ROSTER[other]));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Encodes [`domain_b_text`] with `vocab` and splits it 90/10.
pub fn synthesize_domain_b(vocab: &CharVocab, seed: u64, target_tokens: usize) -> Result<DomainSplit> {
    let text = domain_b_text(seed, target_tokens);
    let missing = vocab.missing(&text);
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "domain B templates use characters outside the vocabulary: {missing:?}"
        )));
    }
    let tokens = vocab.encode(&text)?;
    DomainSplit::from_tokens(
        Domain::B,
        tokens,
        VAL_FRACTION,
        format!("synthetic dialogue, seed {seed}, {target_tokens} tokens"),
    )
}

/// Next-token training batch, row-major `[batch, context]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub context: usize,
    pub offsets: Vec<usize>,
}

pub fn sample_batch<R: Rng + ?Sized>(tokens: &[u16], batch: usize, context: usize, rng: &mut R) -> Result<Batch> {
    if context == 0 || batch == 0 {
        return Err(Error::Config("batch and context must be >= 1".into()));
    }
    if tokens.len() <= context {
        return Err(Error::Data(format!(
            "split of {} tokens is too short for context {context}",
            tokens.len()
        )));
    }
    let offsets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..tokens.len() - context)).collect();
    Ok(batch_at(tokens, &offsets, context))
}

pub fn batch_at(tokens: &[u16], offsets: &[usize], context: usize) -> Batch {
    let mut inputs = Vec::with_capacity(offsets.len() * context);
    let mut targets = Vec::with_capacity(offsets.len() * context);
    for &o in offsets {
        inputs.extend(tokens[o..o + context].iter().map(|&t| t as usize));
        targets.extend(tokens[o + 1..o + context + 1].iter().map(|&t| t as usize));
    }
    Batch {
        inputs,
        targets,
        batch: offsets.len(),
        context,
        offsets: offsets.to_vec(),
    }
}

/// Writes vocabulary and split in the `APN1` binary layout.
pub fn write_split<W: Write>(w: &mut W, vocab: &CharVocab, split: &DomainSplit) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
    for &c in vocab.symbols() {
        let mut tmp = [0u8; 4];
        buf.extend_from_slice(c.encode_utf8(&mut tmp).as_bytes());
    }
    buf.extend_from_slice(&(split.train.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(split.val.len() as u64).to_le_bytes());
    for &t in split.train.iter().chain(&split.val) {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_split<R: Read>(r: &mut R, domain: Domain) -> Result<(CharVocab, DomainSplit)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = crate::checkpoint::Cursor::new(&bytes);
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("not an APN1 token file".into()));
    }
    let n = cur.u32()? as usize;
    let mut symbols = Vec::with_capacity(n);
    for _ in 0..n {
        symbols.push(cur.utf8_char()?);
    }
    let vocab = CharVocab::from_symbols(symbols)?;
    let n_train = cur.u64()? as usize;
    let n_val = cur.u64()? as usize;
    let mut read = |len: usize| -> Result<Vec<u16>> {
        let raw = cur.take(len.checked_mul(2).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        let toks: Vec<u16> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(bad) = toks.iter().find(|&&t| t as usize >= n) {
            return Err(Error::Format(format!("token {bad} out of range for vocabulary of {n}")));
        }
        Ok(toks)
    };
    let train = read(n_train)?;
    let val = read(n_val)?;
    cur.finish()?;
    Ok((
        vocab,
        DomainSplit {
            domain,
            train,
            val,
            source: "token file".into(),
        },
    ))
}
