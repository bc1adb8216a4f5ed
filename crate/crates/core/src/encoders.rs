//! Toy image backbone, toy text encoder and the negative-phrase memory bank.

use std::collections::{HashMap, HashSet, VecDeque};

use conceptdet_tensor::{Scalar, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Fill, Init, LayerNorm, Linear};

pub const STRIDES: [usize; 4] = [8, 16, 32, 64];

/// Four maps `[D, H/s, W/s]` for s in 8, 16, 32, 64.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleFeatures {
    pub maps: [Var; 4],
    pub shapes: [(usize, usize); 4],
}

impl MultiScaleFeatures {
    pub fn token_count(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    /// Flatten every map to `[H*W, D]` tokens and stack them in scale order.
    pub fn flatten<T: Scalar>(&self, s: &mut Session<T>) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for &m in &self.maps {
            parts.push(map_to_tokens(s, m)?);
        }
        Ok(s.concat(&parts, 0)?)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten<T: Scalar>(s: &mut Session<T>, tokens: Var, shapes: [(usize, usize); 4]) -> Result<Self> {
        let mut start = 0;
        let mut maps = [tokens; 4];
        for (j, &(h, w)) in shapes.iter().enumerate() {
            let t = s.narrow(tokens, 0, start, h * w)?;
            maps[j] = tokens_to_map(s, t, h, w)?;
            start += h * w;
        }
        Ok(Self { maps, shapes })
    }
}

/// `[D, H, W] -> [H*W, D]`
pub fn map_to_tokens<T: Scalar>(s: &mut Session<T>, m: Var) -> Result<Var> {
    let sh = s.shape(m).to_vec();
    let flat = s.reshape(m, &[sh[0], sh[1] * sh[2]])?;
    Ok(s.transpose(flat)?)
}

/// `[H*W, D] -> [D, H, W]`
pub fn tokens_to_map<T: Scalar>(s: &mut Session<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let d = s.shape(t)[1];
    let m = s.transpose(t)?;
    Ok(s.reshape(m, &[d, h, w])?)
}

/// Strided conv stack producing C3..C5, per-scale 1x1 channel mapping, and
/// C6 by a stride-2 conv on the mapped C5.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv,
    pub stages: Vec<(Conv, Option<Conv>)>,
    pub mapping: Vec<Conv>,
    pub down6: Conv,
}

impl Backbone {
    pub fn new(init: &mut Init, d: usize) -> Result<Self> {
        let mut p = init.sub("backbone");
        let c0 = (d / 2).max(4);
        let stem = Conv::new(&mut p, "stem", 3, c0, 3, 2)?;
        let mut stages = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { c0 } else { d };
            let down = Conv::new(&mut p, &format!("stage{i}.down"), cin, d, 3, 2)?;
            let refine = if i > 0 { Some(Conv::new(&mut p, &format!("stage{i}.refine"), d, d, 3, 1)?) } else { None };
            stages.push((down, refine));
        }
        let mapping = (3..6).map(|j| Conv::new(&mut p, &format!("map{j}"), d, d, 1, 1)).collect::<Result<_>>()?;
        let down6 = Conv::new(&mut p, "map6", d, d, 3, 2)?;
        Ok(Self { stem, stages, mapping, down6 })
    }

    /// `image: [3, H, W]` with H and W divisible by 64.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, image: Var) -> Result<MultiScaleFeatures> {
        let sh = s.shape(image).to_vec();
        if sh.len() != 3 || sh[0] != 3 || !sh[1].is_multiple_of(64) || !sh[2].is_multiple_of(64) || sh[1] == 0 || sh[2] == 0 {
            return Err(Error::Tensor(conceptdet_tensor::TensorError::Shape(format!("image must be [3, H, W] with H, W divisible by 64, got {sh:?}"))));
        }
        let x = self.stem.forward(s, image)?;
        let mut x = s.relu(x)?;
        let mut raw = Vec::new();
        for (down, refine) in &self.stages {
            let y = down.forward(s, x)?;
            x = s.relu(y)?;
            if let Some(r) = refine {
                let y = r.forward(s, x)?;
                x = s.relu(y)?;
                raw.push(x);
            }
        }
        let mut maps = Vec::with_capacity(4);
        for (m, &r) in self.mapping.iter().zip(&raw) {
            maps.push(m.forward(s, r)?);
        }
        maps.push(self.down6.forward(s, maps[2])?);
        let (h, w) = (sh[1], sh[2]);
        let shapes = STRIDES.map(|st| (h / st, w / st));
        Ok(MultiScaleFeatures { maps: [maps[0], maps[1], maps[2], maps[3]], shapes })
    }
}

pub const UNK: &str = "<unk>";

/// Lowercase, trim and collapse whitespace.
pub fn normalize_phrase(phrase: &str) -> String {
    phrase.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Dense token ids; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds from tokens in order of first appearance across `phrases`.
    pub fn from_phrases<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![UNK.to_string()];
        for p in phrases {
            for t in normalize_phrase(p).split(' ').filter(|t| !t.is_empty()) {
                if !tokens.iter().any(|x| x == t) {
                    tokens.push(t.to_string());
                }
            }
        }
        Self::from_tokens(tokens).expect("unk is first")
    }

    /// Line number = id; the first line must be the unknown token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::input(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) || index.insert(t.clone(), i).is_some() {
                return Err(Error::input(format!("bad or duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokenize(&self, phrase: &str) -> Result<Vec<usize>> {
        let norm = normalize_phrase(phrase);
        if norm.is_empty() {
            return Err(Error::input("empty phrase"));
        }
        Ok(norm.split(' ').map(|t| self.id(t)).collect())
    }
}

/// Embedding, mean over tokens, linear projection, layer norm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: conceptdet_tensor::ParamId,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init, vocab_size: usize, d: usize) -> Result<Self> {
        let mut p = init.sub("text");
        Ok(Self { embed: p.normal("embed", &[vocab_size, d], 1.0)?, proj: Linear::new(&mut p, "proj", d, d, Fill::Xavier)?, norm: LayerNorm::new(&mut p, "norm", d)?, vocab_size })
    }

    /// One concept vector per phrase, `[K, D]`.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, vocab: &Vocabulary, phrases: &[String]) -> Result<Var> {
        if phrases.is_empty() {
            return Err(Error::input("no phrases to encode"));
        }
        if vocab.len() != self.vocab_size {
            return Err(Error::contract(format!("vocabulary has {} tokens, embedding {}", vocab.len(), self.vocab_size)));
        }
        let table = s.param(self.embed);
        let d = s.shape(table)[1];
        let mut rows = Vec::with_capacity(phrases.len());
        for p in phrases {
            let ids = vocab.tokenize(p)?;
            let e = s.index_select(table, 0, &ids)?;
            let m = s.mean_axis(e, 0)?;
            rows.push(s.reshape(m, &[1, d])?);
        }
        let pooled = s.concat(&rows, 0)?;
        let y = self.proj.forward(s, pooled)?;
        self.norm.forward(s, y)
    }
}

/// Bounded FIFO of distinct normalized phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    items: VecDeque<String>,
}

impl MemoryBank {
    pub const DEFAULT_CAPACITY: usize = 1000;

    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        let p = normalize_phrase(phrase);
        self.items.iter().any(|x| *x == p)
    }

    /// Returns false when the phrase was empty or already present.
    pub fn insert(&mut self, phrase: &str) -> bool {
        let p = normalize_phrase(phrase);
        if p.is_empty() || self.capacity == 0 || self.items.contains(&p) {
            return false;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(p);
        true
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

/// Up to `n` phrases from the bank and the static dictionary, none of them
/// positive, drawn without replacement.
pub fn sample_negatives<R: Rng>(bank: &MemoryBank, dictionary: &[String], positives: &[String], n: usize, rng: &mut R) -> Vec<String> {
    let pos: HashSet<String> = positives.iter().map(|p| normalize_phrase(p)).collect();
    let mut seen = HashSet::new();
    let pool: Vec<String> = bank.iter().map(str::to_string).chain(dictionary.iter().map(|d| normalize_phrase(d))).filter(|p| !p.is_empty() && !pos.contains(p) && seen.insert(p.clone())).collect();
    let k = n.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect()
}

/// Constant image tensor from `[3, H, W]` data.
pub fn image_var<T: Scalar>(s: &mut Session<T>, image: &Tensor<f32>) -> Var {
    s.constant(image.cast())
}
