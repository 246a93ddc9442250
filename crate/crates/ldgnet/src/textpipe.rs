//! Lower-cased byte-level BPE tokenizer plus class prompt assembly.
//!
//! The vocabulary is trained on the prompt corpus itself rather than
//! shipping a pretrained merge table; its size is a knob. Sequences are
//! wrapped in START/END and capped at [`MAX_SEQ_LEN`] tokens.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on token-sequence length, START and END included.
pub const MAX_SEQ_LEN: usize = 76;

/// Default number of merges when training on the prompt corpus.
pub const DEFAULT_MERGES: usize = 512;

pub const DEFAULT_COARSE_TEMPLATE: &str = "A hyperspectral image of {class}";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata is not valid JSON: {0}")]
    BadJson(#[from] serde_json::Error),
    #[error("token id {0} outside vocabulary of {1}")]
    BadTokenId(u32, u32),
    #[error("template must contain exactly one {{class}} placeholder, found {0}")]
    BadTemplate(usize),
    #[error("class metadata invalid: {0}")]
    BadMeta(String),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Byte-level vocabulary: 256 byte tokens, the learned merges, and the
/// three specials START, END, PAD.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    /// Merge rules in priority order; earlier merges apply first.
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// Token bytes for merged ids (id = 256 + index).
    merged_tokens: Vec<Vec<u8>>,
    rank: HashMap<(Vec<u8>, Vec<u8>), usize>,
}

impl BpeVocab {
    /// Total vocabulary size: 256 bytes + merges + 3 specials.
    pub fn size(&self) -> u32 {
        256 + self.merges.len() as u32 + 3
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn start_id(&self) -> u32 {
        self.size() - 3
    }

    pub fn end_id(&self) -> u32 {
        self.size() - 2
    }

    pub fn pad_id(&self) -> u32 {
        self.size() - 1
    }

    fn token_id(&self, bytes: &[u8]) -> u32 {
        if bytes.len() == 1 {
            bytes[0] as u32
        } else {
            let idx = self
                .merged_tokens
                .iter()
                .position(|t| t == bytes)
                .expect("merged token registered during training");
            256 + idx as u32
        }
    }

    fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if id < 256 {
            None // single bytes handled by the caller
        } else {
            self.merged_tokens.get(id as usize - 256).map(|v| v.as_slice())
        }
    }
}

/// A START-delimited, END-terminated id sequence of length <= 76.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Greedy most-frequent-pair training over the lower-cased corpus bytes.
/// Frequency ties break toward the lexicographically smaller pair. Stops
/// early if the corpus runs out of repeated pairs.
pub fn train_bpe(corpus: &[String], merge_count: usize) -> BpeVocab {
    let mut texts: Vec<Vec<Vec<u8>>> = corpus
        .iter()
        .map(|t| t.to_lowercase().bytes().map(|b| vec![b]).collect())
        .collect();

    let mut vocab = BpeVocab { merges: Vec::new(), merged_tokens: Vec::new(), rank: HashMap::new() };
    for _ in 0..merge_count {
        let mut counts: HashMap<(&[u8], &[u8]), usize> = HashMap::new();
        for text in &texts {
            for pair in text.windows(2) {
                *counts.entry((pair[0].as_slice(), pair[1].as_slice())).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else { break };
        let left = left.to_vec();
        let right = right.to_vec();
        let mut merged = left.clone();
        merged.extend_from_slice(&right);
        for text in &mut texts {
            merge_in_place(text, &left, &right, &merged);
        }
        vocab.rank.insert((left.clone(), right.clone()), vocab.merges.len());
        vocab.merges.push((left, right));
        vocab.merged_tokens.push(merged);
    }
    vocab
}

/// Replace non-overlapping (left, right) occurrences left-to-right.
fn merge_in_place(tokens: &mut Vec<Vec<u8>>, left: &[u8], right: &[u8], merged: &[u8]) {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i + 1 < tokens.len() && tokens[i] == left && tokens[i + 1] == right {
            out.push(merged.to_vec());
            i += 2;
        } else {
            out.push(std::mem::take(&mut tokens[i]));
            i += 1;
        }
    }
    *tokens = out;
}

/// Lower-case, merge by rule priority, wrap in START/END, cap at
/// [`MAX_SEQ_LEN`] keeping the prefix (END stays last).
pub fn encode(vocab: &BpeVocab, text: &str) -> TokenSeq {
    let mut tokens: Vec<Vec<u8>> = text.to_lowercase().bytes().map(|b| vec![b]).collect();
    loop {
        let mut best: Option<(usize, usize)> = None; // (rank, position)
        for (i, pair) in tokens.windows(2).enumerate() {
            if let Some(&r) = vocab.rank.get(&(pair[0].clone(), pair[1].clone())) {
                if best.is_none_or(|(br, _)| r < br) {
                    best = Some((r, i));
                }
            }
        }
        let Some((rank, _)) = best else { break };
        let (left, right) = vocab.merges[rank].clone();
        let mut merged = left.clone();
        merged.extend_from_slice(&right);
        merge_in_place(&mut tokens, &left, &right, &merged);
    }
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(vocab.start_id());
    for t in &tokens {
        ids.push(vocab.token_id(t));
    }
    if ids.len() + 1 > MAX_SEQ_LEN {
        ids.truncate(MAX_SEQ_LEN - 1);
    }
    ids.push(vocab.end_id());
    TokenSeq { ids }
}

/// Inverse of [`encode`] up to lower-casing; specials are dropped.
pub fn decode(vocab: &BpeVocab, seq: &TokenSeq) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in &seq.ids {
        if id >= vocab.size() {
            return Err(TextError::BadTokenId(id, vocab.size()));
        }
        if id >= vocab.start_id() {
            continue; // START/END/PAD carry no text
        }
        if id < 256 {
            bytes.push(id as u8);
        } else {
            bytes.extend_from_slice(vocab.token_bytes(id).expect("id < size checked"));
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// One land-cover class: its name and exactly two fine-grained texts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMeta {
    pub id: u16,
    pub name: String,
    pub fine: Vec<String>,
}

/// The class list plus the coarse prompt template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub coarse_template: String,
    pub classes: Vec<ClassMeta>,
}

impl ClassCatalog {
    pub fn class_count(&self) -> u16 {
        self.classes.len() as u16
    }

    /// Classes are stored sorted by id after validation, so `id` indexes
    /// directly.
    pub fn class(&self, id: u16) -> &ClassMeta {
        &self.classes[id as usize - 1]
    }

    pub fn validate(&mut self) -> Result<()> {
        let bad = |msg: String| Err(TextError::BadMeta(msg));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        self.classes.sort_by_key(|c| c.id);
        for (i, class) in self.classes.iter().enumerate() {
            if class.id as usize != i + 1 {
                return bad(format!("ids must be dense 1..{}, found {}", self.classes.len(), class.id));
            }
            if class.name.trim().is_empty() {
                return bad(format!("class {} has an empty name", class.id));
            }
            if class.fine.len() != 2 {
                return bad(format!("class {} must carry exactly two fine texts, found {}", class.id, class.fine.len()));
            }
            if class.fine.iter().any(|t| t.trim().is_empty()) {
                return bad(format!("class {} has an empty fine text", class.id));
            }
        }
        verify_template(&self.coarse_template)?;
        Ok(())
    }

    /// Every prompt this catalog can produce; the tokenizer trains on it.
    pub fn prompt_corpus(&self) -> Vec<String> {
        let mut out = Vec::new();
        for class in &self.classes {
            out.push(build_coarse_prompt(class, &self.coarse_template).expect("validated template"));
            out.extend(class.fine.iter().cloned());
        }
        out
    }
}

fn verify_template(template: &str) -> Result<()> {
    let n = template.matches("{class}").count();
    if n != 1 {
        return Err(TextError::BadTemplate(n));
    }
    Ok(())
}

/// Substitute the class name into the coarse template.
pub fn build_coarse_prompt(meta: &ClassMeta, template: &str) -> Result<String> {
    verify_template(template)?;
    Ok(template.replace("{class}", &meta.name))
}

/// Parse and validate the class metadata JSON file.
pub fn load_class_meta(path: &Path) -> Result<ClassCatalog> {
    let text = std::fs::read_to_string(path)?;
    parse_class_meta(&text)
}

/// Built-in land-cover vocabulary for synthetic scenes: a name plus two
/// fine-grained descriptions per class.
const SYNTH_CLASSES: [(&str, &str, &str); 8] = [
    (
        "healthy grass",
        "the healthy grass forms wide even lawns",
        "the healthy grass is a deep saturated green",
    ),
    (
        "stressed grass",
        "the stressed grass grows in dry uneven patches",
        "the stressed grass fades toward pale yellow green",
    ),
    (
        "trees",
        "the trees cluster in small rounded crowns",
        "the trees cast speckled shadows between buildings",
    ),
    (
        "water",
        "the water lies flat with a smooth dark surface",
        "the water absorbs most light across the bands",
    ),
    (
        "residential buildings",
        "the residential buildings pack into tight small blocks",
        "the residential buildings line narrow streets",
    ),
    (
        "commercial buildings",
        "the commercial buildings spread as large flat roofs",
        "the commercial buildings vary widely in shape",
    ),
    (
        "roads",
        "the roads stretch as long narrow gray strips",
        "the roads connect the building blocks in a grid",
    ),
    (
        "bare soil",
        "the bare soil shows no vegetation cover",
        "the bare soil appears in dull brown patches",
    ),
];

/// Class metadata for a synthetic scene with `classes` classes, drawn
/// from the built-in vocabulary (suffixed when it wraps around).
pub fn synthetic_catalog(classes: u16) -> ClassCatalog {
    let mut list = Vec::with_capacity(classes as usize);
    for id in 1..=classes {
        let base = SYNTH_CLASSES[(id as usize - 1) % SYNTH_CLASSES.len()];
        let round = (id as usize - 1) / SYNTH_CLASSES.len();
        let suffix = if round == 0 { String::new() } else { format!(" zone {}", round + 1) };
        list.push(ClassMeta {
            id,
            name: format!("{}{}", base.0, suffix),
            fine: vec![format!("{}{}", base.1, suffix), format!("{}{}", base.2, suffix)],
        });
    }
    let mut catalog = ClassCatalog { coarse_template: DEFAULT_COARSE_TEMPLATE.into(), classes: list };
    catalog.validate().expect("built-in catalog is valid");
    catalog
}

pub fn parse_class_meta(text: &str) -> Result<ClassCatalog> {
    let mut catalog: ClassCatalog = serde_json::from_str(text)?;
    catalog.validate()?;
    Ok(catalog)
}
