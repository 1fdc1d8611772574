//! Fixed-size ordinally-forgetting encodings of token histories, plus the
//! vocabulary and word-level tokenizer.
//!
//! The encoding follows the recursion `z_t = α·z_{t-1} + e_{w_t}` from the
//! zero vector, so a variable-length history maps to a fixed-size vector and,
//! for suitable forgetting factors, distinct histories map to distinct
//! vectors. The explicit vocabulary-sized form exists for oracles and tests;
//! the production path works in embedding space via coefficient bags, which
//! is equivalent by linearity of the recursion.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Reserved id for out-of-vocabulary words.
pub const UNKNOWN_ID: usize = 0;
/// Reserved id for the sentence boundary marker.
pub const BOUNDARY_ID: usize = 1;
/// Reserved words, in id order.
pub const RESERVED_WORDS: [&str; 2] = ["<unk>", "<s>"];

/// Immutable word ↔ dense-id bijection with reserved ids up front.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from content words; reserved tokens are prepended.
    pub fn from_content_words<I>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
    {
        let mut words: Vec<String> = RESERVED_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(content);
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("word {:?} contains whitespace", w)));
            }
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate word {:?}", w)));
            }
        }
        Ok(Vocabulary { words, ids })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    /// Id of a word, falling back to the unknown id.
    pub fn id_of(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// Words excluding the reserved entries.
    pub fn content_words(&self) -> &[String] {
        &self.words[RESERVED_WORDS.len()..]
    }

    /// Lowercase whitespace tokenization; unknown words map to [`UNKNOWN_ID`].
    pub fn tokenize(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|w| self.id_of(&w.to_lowercase()))
            .collect()
    }

    /// One word per line, line number = id, reserved tokens first.
    pub fn file_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.file_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Data(format!(
                "cannot read vocabulary {}: {e}",
                path.as_ref().display()
            ))
        })?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, reserved) in RESERVED_WORDS.iter().enumerate() {
            if lines.get(i) != Some(reserved) {
                return Err(Error::Format(format!(
                    "vocabulary line {} must be the reserved token {}",
                    i, reserved
                )));
            }
        }
        Vocabulary::from_content_words(
            lines[RESERVED_WORDS.len()..]
                .iter()
                .map(|s| s.to_string()),
        )
    }

    /// Hash of the serialized vocabulary, used as a checkpoint fingerprint.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.file_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Wrap content token ids with boundary markers: `[<s>, w1..wn, <s>]`.
///
/// An empty sentence frames to the boundary markers alone.
pub fn frame(tokens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(BOUNDARY_ID);
    out.extend_from_slice(tokens);
    out.push(BOUNDARY_ID);
    out
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "forgetting factor alpha must lie strictly inside (0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Running explicit-mode encoding state: a vocabulary-sized vector updated by
/// the recursion, reset to zero at sentence boundaries.
#[derive(Debug, Clone)]
pub struct FofeState {
    alpha: f64,
    code: Vec<f64>,
    length: usize,
}

impl FofeState {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(FofeState {
            alpha,
            code: vec![0.0; dim],
            length: 0,
        })
    }

    pub fn push(&mut self, token: usize) -> Result<()> {
        if token >= self.code.len() {
            return Err(Error::Index(format!(
                "token id {} >= dimension {}",
                token,
                self.code.len()
            )));
        }
        for v in &mut self.code {
            *v *= self.alpha;
        }
        self.code[token] += 1.0;
        self.length += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.code.iter_mut().for_each(|v| *v = 0.0);
        self.length = 0;
    }

    pub fn code(&self) -> &[f64] {
        &self.code
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Explicit vocabulary-sized encoding of a token history.
pub fn fofe_encode(tokens: &[usize], alpha: f64, vocab_size: usize) -> Result<Vec<f64>> {
    let mut state = FofeState::new(alpha, vocab_size)?;
    for &t in tokens {
        state.push(t)?;
    }
    Ok(state.code)
}

/// Sparse per-token coefficients of a history, sorted by token id.
///
/// The coefficients are exactly the nonzero components the explicit recursion
/// would produce (same arithmetic, element for element).
pub fn fofe_bag(tokens: &[usize], alpha: f64) -> Vec<(usize, f64)> {
    let mut bag: Vec<(usize, f64)> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        for (_, c) in bag.iter_mut() {
            *c *= alpha;
        }
        match bag.iter_mut().find(|(tok, _)| *tok == t) {
            Some((_, c)) => *c += 1.0,
            None => bag.push((t, 1.0)),
        }
    }
    bag.sort_by_key(|&(tok, _)| tok);
    bag
}

/// Embedding-space encoding: equals `embeddingᵀ · fofe_encode(tokens)` by
/// linearity of the recursion. Returns a `d`-dimensional vector.
pub fn fofe_encode_embedded(tokens: &[usize], alpha: f64, embedding: &Tensor) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let (v, d) = embedding.shape();
    let mut out = vec![0.0; d];
    for (tok, coeff) in fofe_bag(tokens, alpha) {
        if tok >= v {
            return Err(Error::Index(format!(
                "token id {} >= vocabulary size {}",
                tok, v
            )));
        }
        for (o, &e) in out.iter_mut().zip(embedding.row(tok)) {
            *o += coeff * e;
        }
    }
    Ok(out)
}

/// Exhaustively search for the unique token sequence (length ≤ `max_len`)
/// whose encoding matches `code` within 1e-9 per component. Intended for
/// desk-scale uniqueness checks only.
pub fn fofe_decode_bruteforce(
    code: &[f64],
    alpha: f64,
    vocab_size: usize,
    max_len: usize,
) -> Option<Vec<usize>> {
    const TOL: f64 = 1e-9;
    if check_alpha(alpha).is_err() || code.len() != vocab_size {
        return None;
    }
    // The recursion only ever produces non-negative components.
    if code.iter().any(|&v| v < -TOL) {
        return None;
    }
    let mut seq = vec![0usize; 0];
    loop {
        let candidate = fofe_encode(&seq, alpha, vocab_size).expect("ids in range");
        if candidate
            .iter()
            .zip(code)
            .all(|(a, b)| (a - b).abs() <= TOL)
        {
            return Some(seq);
        }
        // Advance to the next sequence in length-then-lexicographic order.
        let mut pos = seq.len();
        loop {
            if pos == 0 {
                if seq.len() == max_len {
                    return None;
                }
                seq = vec![0; seq.len() + 1];
                break;
            }
            pos -= 1;
            if seq[pos] + 1 < vocab_size {
                seq[pos] += 1;
                for v in &mut seq[pos + 1..] {
                    *v = 0;
                }
                break;
            }
        }
    }
}

/// Per-position (history bag, next-token target) pairs for a framed sentence.
///
/// Position `i` encodes `framed[..=i]` and predicts `framed[i+1]`, so a
/// sentence of `n` content words yields `n + 1` prediction points, ending
/// with the closing boundary.
pub fn context_bags(framed: &[usize], alpha: f64) -> Vec<(Vec<(usize, f64)>, usize)> {
    if framed.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(framed.len() - 1);
    let mut bag: Vec<(usize, f64)> = Vec::new();
    for i in 0..framed.len() - 1 {
        for (_, c) in bag.iter_mut() {
            *c *= alpha;
        }
        let t = framed[i];
        match bag.iter_mut().find(|(tok, _)| *tok == t) {
            Some((_, c)) => *c += 1.0,
            None => bag.push((t, 1.0)),
        }
        let mut snapshot = bag.clone();
        snapshot.sort_by_key(|&(tok, _)| tok);
        out.push((snapshot, framed[i + 1]));
    }
    out
}
