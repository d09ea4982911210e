//! Synthetic Markov-chain corpora and BERT-style masking.
//!
//! Token ids 0–3 are reserved for `[PAD]`, `[MASK]`, `[CLS]`, `[SEP]`; the
//! chain emits the remaining `vocab_size − 4` ids.

use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;
use crate::kernels::softmax_in_place;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const N_SPECIAL: usize = 4;

pub fn is_special(id: usize) -> bool {
    id < N_SPECIAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub markov_order: usize,
    pub transition_temperature: f64,
    pub seed: u64,
}

/// Sequences in the toy corpus: 4096 for training plus 128 held out.
pub const TOY_CORPUS_SEQUENCES: usize = 4224;

impl CorpusSpec {
    /// First-order chain over 60 symbols, `L = 32`, sharp transitions.
    pub fn toy(seed: u64) -> Self {
        Self {
            vocab_size: 64,
            seq_len: 32,
            markov_order: 1,
            transition_temperature: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size must be at least 8, got {}", self.vocab_size)));
        }
        if !(1..=2).contains(&self.markov_order) {
            return Err(Error::Config(format!("markov_order must be 1 or 2, got {}", self.markov_order)));
        }
        if self.seq_len < 2 + self.markov_order {
            return Err(Error::Config(format!(
                "seq_len {} leaves no room for [CLS], [SEP] and an order-{} context",
                self.seq_len, self.markov_order
            )));
        }
        if !(self.transition_temperature > 0.0) || !self.transition_temperature.is_finite() {
            return Err(Error::Config(format!(
                "transition_temperature must be positive and finite, got {}",
                self.transition_temperature
            )));
        }
        Ok(())
    }

    pub fn n_symbols(&self) -> usize {
        self.vocab_size - N_SPECIAL
    }
}

/// Fixed random transition table over non-special symbols. For order 2 the
/// state is the pair `(x_{t−2}, x_{t−1})`, indexed `x_{t−2}·n + x_{t−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    order: usize,
    n_symbols: usize,
    /// `[n_states × n_symbols]`, rows sum to 1.
    transitions: Vec<f64>,
}

impl MarkovChain {
    /// Rows are `softmax(z / temperature)` with `z ~ N(0, 1)`.
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_symbols();
        let n_states = n.pow(spec.markov_order as u32);
        let mut rng = stream(spec.seed, 100);
        let mut transitions = Vec::with_capacity(n_states * n);
        for _ in 0..n_states {
            let mut row: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z / spec.transition_temperature
                })
                .collect();
            softmax_in_place(&mut row);
            transitions.extend(row);
        }
        Ok(Self {
            order: spec.markov_order,
            n_symbols: n,
            transitions,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len() / self.n_symbols
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.transitions[state * self.n_symbols..(state + 1) * self.n_symbols]
    }

    fn next_state(&self, state: usize, symbol: usize) -> usize {
        match self.order {
            1 => symbol,
            _ => (state % self.n_symbols) * self.n_symbols + symbol,
        }
    }

    /// Stationary distribution over states, by lazy power iteration
    /// (`π ← ½(π + πP)`, which also converges for periodic chains).
    pub fn stationary_states(&self) -> Vec<f64> {
        let n_states = self.n_states();
        let mut pi = vec![1.0 / n_states as f64; n_states];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n_states];
            for (s, &mass) in pi.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for (sym, &p) in self.row(s).iter().enumerate() {
                    next[self.next_state(s, sym)] += mass * p;
                }
            }
            let mut delta = 0.0;
            for (p, q) in pi.iter_mut().zip(&next) {
                let lazy = 0.5 * (*p + q);
                delta += (lazy - *p).abs();
                *p = lazy;
            }
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Stationary distribution over emitted symbols.
    pub fn stationary_symbols(&self) -> Vec<f64> {
        let pi = self.stationary_states();
        let mut out = vec![0.0; self.n_symbols];
        for (s, mass) in pi.iter().enumerate() {
            out[s % self.n_symbols] += mass;
        }
        out
    }

    /// `Σ_s π(s)·H(P(·|s))` in nats.
    pub fn conditional_entropy(&self) -> f64 {
        self.stationary_states()
            .iter()
            .enumerate()
            .map(|(s, &mass)| {
                let h: f64 = self.row(s).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                mass * h
            })
            .sum()
    }
}

/// Per-purpose RNG stream derived from a single seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub chain: MarkovChain,
    pub sequences: Vec<Vec<usize>>,
}

/// Samples `n_sequences` sequences `[CLS] x₁ … x_{L−2} [SEP]`, each starting
/// from the chain's stationary distribution.
pub fn generate_corpus(spec: &CorpusSpec, n_sequences: usize) -> Result<Corpus> {
    if n_sequences == 0 {
        return Err(Error::Config("n_sequences must be at least 1".into()));
    }
    let chain = MarkovChain::from_spec(spec)?;
    let start = WeightedIndex::new(chain.stationary_states())
        .map_err(|e| Error::Config(format!("degenerate stationary distribution: {e}")))?;
    let rows = (0..chain.n_states())
        .map(|s| WeightedIndex::new(chain.row(s)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("degenerate transition row: {e}")))?;
    let n = chain.n_symbols();
    let body = spec.seq_len - 2;
    let mut rng = stream(spec.seed, 101);
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut seq = Vec::with_capacity(spec.seq_len);
            seq.push(CLS);
            let mut state = start.sample(&mut rng);
            if chain.order == 2 {
                seq.push(state / n + N_SPECIAL);
            }
            seq.push(state % n + N_SPECIAL);
            while seq.len() < body + 1 {
                let sym = rows[state].sample(&mut rng);
                seq.push(sym + N_SPECIAL);
                state = chain.next_state(state, sym);
            }
            seq.push(SEP);
            seq
        })
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        chain,
        sequences,
    })
}

/// Conditional entropy of the chain given its full context, in nats. This is
/// the per-token entropy of the generating process and serves as a reference
/// floor for the eval loss.
pub fn theoretical_floor(spec: &CorpusSpec) -> Result<f64> {
    Ok(MarkovChain::from_spec(spec)?.conditional_entropy())
}

const CORPUS_MAGIC: &[u8; 8] = b"SACORPUS";

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u32,
    spec: CorpusSpec,
    n_sequences: usize,
    special_tokens: [(String, usize); 4],
}

impl Corpus {
    /// `(train, eval)`: the last `n_eval` sequences are held out.
    pub fn split(&self, n_eval: usize) -> Result<(&[Vec<usize>], &[Vec<usize>])> {
        if n_eval >= self.sequences.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_eval} of {} sequences",
                self.sequences.len()
            )));
        }
        Ok(self.sequences.split_at(self.sequences.len() - n_eval))
    }

    /// Layout: `SACORPUS`, u64 LE header length, JSON header, then
    /// `n_sequences × seq_len` u32 LE token ids.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CorpusHeader {
            format_version: 1,
            spec: self.spec.clone(),
            n_sequences: self.sequences.len(),
            special_tokens: [
                ("[PAD]".into(), PAD),
                ("[MASK]".into(), MASK),
                ("[CLS]".into(), CLS),
                ("[SEP]".into(), SEP),
            ],
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CORPUS_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for seq in &self.sequences {
            for &id in seq {
                w.write_all(&(id as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("not a corpus file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CorpusHeader = serde_json::from_slice(&json)?;
        if header.format_version != 1 {
            return Err(Error::Format(format!("unsupported corpus version {}", header.format_version)));
        }
        let chain = MarkovChain::from_spec(&header.spec)?;
        let seq_len = header.spec.seq_len;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != header.n_sequences * seq_len * 4 {
            return Err(Error::Format(format!(
                "expected {} token bytes, found {}",
                header.n_sequences * seq_len * 4,
                bytes.len()
            )));
        }
        let ids: Vec<usize> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if let Some(&id) = ids.iter().find(|&&id| id >= header.spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                limit: header.spec.vocab_size,
            });
        }
        Ok(Self {
            sequences: ids.chunks(seq_len).map(<[usize]>::to_vec).collect(),
            spec: header.spec,
            chain,
        })
    }
}

/// How selected positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    #[default]
    Bert,
    /// Every selected position becomes `[MASK]`.
    AllMask,
}

/// One MLM batch, row-major `[batch_size × seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<usize>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<i64>,
    pub attention_mask: Vec<u8>,
}

impl MaskedBatch {
    pub fn n_selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// SHA-256 over ids, labels and mask.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.feed(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn feed(&self, h: &mut Sha256) {
        h.update((self.batch_size as u64).to_le_bytes());
        h.update((self.seq_len as u64).to_le_bytes());
        for &id in &self.input_ids {
            h.update((id as u32).to_le_bytes());
        }
        for &l in &self.labels {
            h.update(l.to_le_bytes());
        }
        h.update(&self.attention_mask);
    }
}

/// Selects each non-special token with probability `mask_prob` and corrupts
/// it according to `mode`. Sequences shorter than the longest are
/// right-padded with `[PAD]` and masked out of attention.
pub fn mask_batch(
    sequences: &[Vec<usize>],
    vocab_size: usize,
    mask_prob: f64,
    mode: MaskMode,
    seed: u64,
) -> Result<MaskedBatch> {
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(Error::Config(format!("mask_prob must lie in [0, 1), got {mask_prob}")));
    }
    if sequences.is_empty() {
        return Err(Error::Config("cannot mask an empty batch".into()));
    }
    if vocab_size <= N_SPECIAL {
        return Err(Error::Config(format!("vocab_size {vocab_size} has no ordinary tokens")));
    }
    let seq_len = sequences.iter().map(Vec::len).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sequences.len() * seq_len;
    let mut input_ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut attention_mask = Vec::with_capacity(n);
    for seq in sequences {
        for pos in 0..seq_len {
            let Some(&id) = seq.get(pos) else {
                input_ids.push(PAD);
                labels.push(IGNORE_INDEX);
                attention_mask.push(0);
                continue;
            };
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, limit: vocab_size });
            }
            attention_mask.push(1);
            if is_special(id) || rng.gen::<f64>() >= mask_prob {
                input_ids.push(id);
                labels.push(IGNORE_INDEX);
                continue;
            }
            labels.push(id as i64);
            let replaced = match mode {
                MaskMode::AllMask => MASK,
                MaskMode::Bert => {
                    let r: f64 = rng.gen();
                    if r < 0.8 {
                        MASK
                    } else if r < 0.9 {
                        rng.gen_range(N_SPECIAL..vocab_size)
                    } else {
                        id
                    }
                }
            };
            input_ids.push(replaced);
        }
    }
    Ok(MaskedBatch {
        batch_size: sequences.len(),
        seq_len,
        input_ids,
        labels,
        attention_mask,
    })
}
