//! Synthetic corpora with exact-match oracles.
//!
//! Every sequence is built from four disjoint token classes: structural
//! delimiters, keys, values and filler. A *binding* is a key followed by
//! `value_len` value tokens. A *query* is `QRY key`, and the expected
//! answer is the bound values followed by `EOS`.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Example, Token};
use crate::seed::item_seed;
use crate::{Error, Result};

pub const BOS: Token = 0;
pub const QRY: Token = 1;
pub const EOS: Token = 2;
const N_STRUCTURAL: usize = 3;

/// Partition of the model vocabulary into token classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskVocab {
    pub n_keys: usize,
    pub n_values: usize,
    pub n_filler: usize,
}

impl TaskVocab {
    /// Splits `vocab_size` into keys, values and whatever remains as filler.
    pub fn for_model(vocab_size: usize, n_keys: usize, n_values: usize) -> Result<Self> {
        let used = N_STRUCTURAL + n_keys + n_values;
        if used >= vocab_size {
            return Err(Error::Geometry(format!(
                "vocab of {vocab_size} leaves no room for filler after {n_keys} keys and {n_values} values"
            )));
        }
        let v = Self {
            n_keys,
            n_values,
            n_filler: vocab_size - used,
        };
        v.validate(vocab_size)?;
        Ok(v)
    }

    pub fn size(&self) -> usize {
        N_STRUCTURAL + self.n_keys + self.n_values + self.n_filler
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.n_keys == 0 || self.n_values == 0 || self.n_filler == 0 {
            return Err(Error::Geometry(
                "every token class needs at least one token".into(),
            ));
        }
        if self.size() != vocab_size {
            return Err(Error::Geometry(format!(
                "task vocab has {} tokens but the model has {vocab_size}",
                self.size()
            )));
        }
        Ok(())
    }

    pub fn keys(&self) -> Range<Token> {
        let s = N_STRUCTURAL as Token;
        s..s + self.n_keys as Token
    }

    pub fn values(&self) -> Range<Token> {
        let s = self.keys().end;
        s..s + self.n_values as Token
    }

    pub fn filler(&self) -> Range<Token> {
        let s = self.values().end;
        s..s + self.n_filler as Token
    }

    pub fn is_key(&self, t: Token) -> bool {
        self.keys().contains(&t)
    }

    pub fn is_value(&self, t: Token) -> bool {
        self.values().contains(&t)
    }

    pub fn is_filler(&self, t: Token) -> bool {
        self.filler().contains(&t)
    }
}

/// Shape of the key-value recall corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub value_len: usize,
    pub min_bindings: usize,
    pub max_bindings: usize,
    pub n_queries: usize,
    /// Draw the amount of filler uniformly instead of always filling the
    /// sequence to its full length.
    #[serde(default)]
    pub variable_length: bool,
    /// Fraction of sequences that are a random span followed by an exact
    /// repeat of it, with no bindings or queries.
    #[serde(default)]
    pub copy_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            value_len: 3,
            min_bindings: 1,
            max_bindings: 4,
            n_queries: 4,
            variable_length: true,
            copy_fraction: 0.25,
        }
    }
}

/// Length of `QRY key v.. EOS`.
pub fn query_segment_len(value_len: usize) -> usize {
    value_len + 3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub key: Token,
    pub values: Vec<Token>,
    /// Position of the key token in the sequence.
    pub position: usize,
}

impl Binding {
    /// `key v_1 .. v_n`.
    pub fn tokens(&self) -> Vec<Token> {
        std::iter::once(self.key)
            .chain(self.values.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    /// Position of the queried key; the answer starts right after it.
    pub cue_position: usize,
    /// Expected answer without the trailing `EOS`.
    pub answer: Vec<Token>,
}

/// One pretraining sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvSequence {
    pub tokens: Vec<Token>,
    pub bindings: Vec<Binding>,
    pub queries: Vec<Query>,
    /// Start of the repeated half of a copy sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_start: Option<usize>,
}

impl KvSequence {
    /// Training example whose targets are the answer segments, or every
    /// predictable token of the repeated half.
    pub fn example(&self) -> Example {
        let mut target_mask = vec![false; self.tokens.len()];
        if let Some(start) = self.repeat_start {
            for m in &mut target_mask[start + 1..] {
                *m = true;
            }
        }
        for q in &self.queries {
            for m in &mut target_mask[q.cue_position + 1..=q.cue_position + q.answer.len() + 1] {
                *m = true;
            }
        }
        Example {
            tokens: self.tokens.clone(),
            target_mask,
        }
    }

    /// Prompt ending at the first query's key, and its expected answer.
    pub fn first_query_prompt(&self) -> Option<(&[Token], &[Token])> {
        let q = self.queries.first()?;
        Some((&self.tokens[..=q.cue_position], &q.answer))
    }
}

/// Splits `total` filler tokens into `parts` chunks, uniformly over
/// compositions.
fn random_composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    if parts == 1 {
        return vec![total];
    }
    // stars and bars: choose parts-1 bar positions among total+parts-1 slots
    let slots = total + parts - 1;
    let mut bars = rand::seq::index::sample(rng, slots, parts - 1).into_vec();
    bars.sort_unstable();
    let mut sizes = Vec::with_capacity(parts);
    let mut prev = 0;
    for (i, &b) in bars.iter().enumerate() {
        sizes.push(b - prev - if i == 0 { 0 } else { 1 });
        prev = b;
    }
    sizes.push(slots - prev - if bars.is_empty() { 0 } else { 1 });
    sizes
}

fn filler_run(rng: &mut ChaCha8Rng, vocab: &TaskVocab, len: usize) -> Vec<Token> {
    let f = vocab.filler();
    (0..len).map(|_| rng.gen_range(f.clone())).collect()
}

/// Key-value recall corpus of fixed-length sequences.
pub fn gen_pretrain_corpus(
    vocab: &TaskVocab,
    spec: &CorpusSpec,
    n_sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<KvSequence>> {
    if spec.min_bindings == 0
        || spec.min_bindings > spec.max_bindings
        || spec.n_queries == 0
        || spec.value_len == 0
        || !(0.0..=1.0).contains(&spec.copy_fraction)
    {
        return Err(Error::Geometry(format!("invalid corpus spec {spec:?}")));
    }
    if vocab.n_keys < spec.max_bindings {
        return Err(Error::Geometry(format!(
            "{} keys cannot give {} distinct bindings",
            vocab.n_keys, spec.max_bindings
        )));
    }
    if vocab.n_values < spec.max_bindings * spec.value_len {
        return Err(Error::Geometry(format!(
            "{} values cannot fill {} bindings of {} distinct values",
            vocab.n_values, spec.max_bindings, spec.value_len
        )));
    }
    let bind_len = spec.value_len + 1;
    let fixed = 1 + spec.n_queries * query_segment_len(spec.value_len);
    if fixed + spec.max_bindings * bind_len > seq_len {
        return Err(Error::Geometry(format!(
            "sequence length {seq_len} cannot hold {} bindings and {} queries",
            spec.max_bindings, spec.n_queries
        )));
    }
    (0..n_sequences)
        .map(|i| {
            let s = item_seed(seed, i as u64);
            let copy = spec.copy_fraction > 0.0
                && ChaCha8Rng::seed_from_u64(!s).gen_bool(spec.copy_fraction);
            Ok(if copy {
                copy_sequence(vocab, seq_len, s)
            } else {
                kv_sequence(vocab, spec, seq_len, s)
            })
        })
        .collect()
}

/// `BOS s s` for a random span `s` of non-structural tokens.
fn copy_sequence(vocab: &TaskVocab, seq_len: usize, seed: u64) -> KvSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = rng.gen_range(2..=(seq_len - 1) / 2);
    let pool = vocab.keys().start..vocab.filler().end;
    let s: Vec<Token> = (0..span).map(|_| rng.gen_range(pool.clone())).collect();
    let mut tokens = Vec::with_capacity(1 + 2 * span);
    tokens.push(BOS);
    tokens.extend_from_slice(&s);
    tokens.extend_from_slice(&s);
    KvSequence {
        tokens,
        bindings: Vec::new(),
        queries: Vec::new(),
        repeat_start: Some(1 + span),
    }
}

fn kv_sequence(vocab: &TaskVocab, spec: &CorpusSpec, seq_len: usize, seed: u64) -> KvSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bind_len = spec.value_len + 1;
    let n_bind = rng.gen_range(spec.min_bindings..=spec.max_bindings);
    let keys: Vec<Token> = rand::seq::index::sample(&mut rng, vocab.n_keys, n_bind)
        .into_iter()
        .map(|i| vocab.keys().start + i as Token)
        .collect();
    let vals: Vec<Token> =
        rand::seq::index::sample(&mut rng, vocab.n_values, n_bind * spec.value_len)
            .into_iter()
            .map(|i| vocab.values().start + i as Token)
            .collect();
    let ctx_len = seq_len - 1 - spec.n_queries * query_segment_len(spec.value_len);
    let room = ctx_len - n_bind * bind_len;
    let n_filler = if spec.variable_length {
        rng.gen_range(0..=room)
    } else {
        room
    };
    let chunks = random_composition(&mut rng, n_filler, n_bind + 1);

    let mut tokens = Vec::with_capacity(seq_len);
    tokens.push(BOS);
    let mut bindings = Vec::with_capacity(n_bind);
    for b in 0..n_bind {
        tokens.extend(filler_run(&mut rng, vocab, chunks[b]));
        let binding = Binding {
            key: keys[b],
            values: vals[b * spec.value_len..(b + 1) * spec.value_len].to_vec(),
            position: tokens.len(),
        };
        tokens.extend(binding.tokens());
        bindings.push(binding);
    }
    tokens.extend(filler_run(&mut rng, vocab, chunks[n_bind]));

    let mut queries = Vec::with_capacity(spec.n_queries);
    for _ in 0..spec.n_queries {
        let b = bindings.choose(&mut rng).expect("at least one binding");
        tokens.extend([QRY, b.key]);
        let answer = b.values.clone();
        queries.push(Query {
            cue_position: tokens.len() - 1,
            answer: answer.clone(),
        });
        tokens.extend(answer);
        tokens.push(EOS);
    }
    debug_assert!(tokens.len() == seq_len || spec.variable_length);
    KvSequence {
        tokens,
        bindings,
        queries,
        repeat_start: None,
    }
}

/// Geometry of needle-in-a-haystack instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiahSpec {
    pub n_passages: usize,
    pub passage_len: usize,
    pub value_len: usize,
}

impl NiahSpec {
    pub fn needle_len(&self) -> usize {
        self.value_len
    }

    /// Prompt length: `BOS`, haystack with the keyed needle, `QRY key`.
    pub fn prompt_len(&self) -> usize {
        1 + self.n_passages * self.passage_len + 1 + self.needle_len() + 2
    }

    /// Decode budget that fits the answer and its stop token.
    pub fn answer_budget(&self) -> usize {
        self.needle_len() + 1
    }

    pub fn check_fits(&self, max_seq_len: usize) -> Result<()> {
        let need = self.prompt_len() + self.answer_budget();
        if need > max_seq_len {
            return Err(Error::Geometry(format!(
                "needle instance needs {need} positions, context window is {max_seq_len}"
            )));
        }
        Ok(())
    }
}

/// A needle hidden between irrelevant passages, right after its key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleInstance {
    pub id: usize,
    /// `QRY key`.
    pub question: Vec<Token>,
    /// `v_1 .. v_n`; also the expected answer.
    pub needle: Vec<Token>,
    pub haystack: Vec<Token>,
    /// Positions of the needle inside `haystack`, sorted.
    pub needle_indices: Vec<usize>,
    /// Passage boundary the needle was inserted at, `0..=n_passages`.
    pub slot: usize,
}

impl NeedleInstance {
    /// Offset of the haystack inside [`Self::prompt`].
    pub const HAYSTACK_OFFSET: usize = 1;

    pub fn prompt(&self) -> Vec<Token> {
        let mut p = Vec::with_capacity(self.haystack.len() + self.question.len() + 1);
        p.push(BOS);
        p.extend_from_slice(&self.haystack);
        p.extend_from_slice(&self.question);
        p
    }

    /// Needle positions in prompt coordinates.
    pub fn prompt_needle_positions(&self) -> Vec<usize> {
        self.needle_indices
            .iter()
            .map(|&i| i + Self::HAYSTACK_OFFSET)
            .collect()
    }
}

pub fn gen_niah_set(
    vocab: &TaskVocab,
    spec: &NiahSpec,
    n_instances: usize,
    max_seq_len: usize,
    seed: u64,
) -> Result<Vec<NeedleInstance>> {
    spec.check_fits(max_seq_len)?;
    if spec.value_len == 0 || spec.value_len > vocab.n_values {
        return Err(Error::Geometry(format!(
            "value_len {} not drawable",
            spec.value_len
        )));
    }
    Ok((0..n_instances)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, id as u64));
            let key = rng.gen_range(vocab.keys());
            let values: Vec<Token> =
                rand::seq::index::sample(&mut rng, vocab.n_values, spec.value_len)
                    .into_iter()
                    .map(|i| vocab.values().start + i as Token)
                    .collect();
            let slot = rng.gen_range(0..=spec.n_passages);
            let mut haystack =
                Vec::with_capacity(spec.n_passages * spec.passage_len + values.len() + 1);
            let mut needle_indices = Vec::new();
            for p in 0..=spec.n_passages {
                if p == slot {
                    haystack.push(key);
                    needle_indices.extend(haystack.len()..haystack.len() + values.len());
                    haystack.extend_from_slice(&values);
                }
                if p < spec.n_passages {
                    haystack.extend(filler_run(&mut rng, vocab, spec.passage_len));
                }
            }
            NeedleInstance {
                id,
                question: vec![QRY, key],
                needle: values,
                haystack,
                needle_indices,
                slot,
            }
        })
        .collect())
}

/// Shape of instruction prompts used for preference synthesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSpec {
    pub value_len: usize,
    pub min_facts: usize,
    pub max_facts: usize,
    /// Upper bound on filler tokens spread between the facts.
    pub max_filler: usize,
}

impl Default for InstructionSpec {
    fn default() -> Self {
        Self {
            value_len: 3,
            min_facts: 2,
            max_facts: 8,
            max_filler: 16,
        }
    }
}

impl InstructionSpec {
    pub fn max_prompt_len(&self) -> usize {
        1 + self.max_facts * (self.value_len + 1) + self.max_filler + 2
    }
}

/// A prompt with facts and one query; the reference answer is used only by
/// the oracle judge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionInstance {
    pub id: usize,
    pub instruction: Vec<Token>,
    pub reference: Vec<Token>,
    pub n_facts: usize,
    /// Range of `instruction` holding facts and filler.
    pub fact_span: Range<usize>,
}

pub fn gen_instruction_set(
    vocab: &TaskVocab,
    spec: &InstructionSpec,
    n: usize,
    max_seq_len: usize,
    seed: u64,
) -> Result<Vec<InstructionInstance>> {
    if spec.min_facts == 0 || spec.min_facts > spec.max_facts || spec.value_len == 0 {
        return Err(Error::Geometry(format!(
            "invalid instruction spec {spec:?}"
        )));
    }
    if vocab.n_keys < spec.max_facts || vocab.n_values < spec.max_facts * spec.value_len {
        return Err(Error::Geometry(
            "vocabulary too small for the fact count".into(),
        ));
    }
    if spec.max_prompt_len() + spec.value_len + 1 > max_seq_len {
        return Err(Error::Geometry(format!(
            "instructions need {} positions, context window is {max_seq_len}",
            spec.max_prompt_len() + spec.value_len + 1
        )));
    }
    Ok((0..n)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, id as u64));
            let n_facts = rng.gen_range(spec.min_facts..=spec.max_facts);
            let keys: Vec<Token> = rand::seq::index::sample(&mut rng, vocab.n_keys, n_facts)
                .into_iter()
                .map(|i| vocab.keys().start + i as Token)
                .collect();
            let vals: Vec<Token> =
                rand::seq::index::sample(&mut rng, vocab.n_values, n_facts * spec.value_len)
                    .into_iter()
                    .map(|i| vocab.values().start + i as Token)
                    .collect();
            let n_filler = rng.gen_range(0..=spec.max_filler);
            let chunks = random_composition(&mut rng, n_filler, n_facts + 1);
            let mut instruction = vec![BOS];
            let mut facts = Vec::with_capacity(n_facts);
            for f in 0..n_facts {
                instruction.extend(filler_run(&mut rng, vocab, chunks[f]));
                let fact: Vec<Token> = std::iter::once(keys[f])
                    .chain(
                        vals[f * spec.value_len..(f + 1) * spec.value_len]
                            .iter()
                            .copied(),
                    )
                    .collect();
                instruction.extend_from_slice(&fact);
                facts.push(fact);
            }
            instruction.extend(filler_run(&mut rng, vocab, chunks[n_facts]));
            let fact_span = 1..instruction.len();
            let target = rng.gen_range(0..n_facts);
            instruction.extend([QRY, keys[target]]);
            InstructionInstance {
                id,
                instruction,
                reference: facts[target][1..].to_vec(),
                n_facts,
                fact_span,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

impl Verdict {
    pub fn is_correct(self) -> bool {
        self == Verdict::Correct
    }
}

/// Correct iff `expected` occurs contiguously in `output` before the first
/// stop token.
pub fn score_answer(expected: &[Token], output: &[Token], stop: Option<Token>) -> Verdict {
    let end = stop
        .and_then(|s| output.iter().position(|&t| t == s))
        .unwrap_or(output.len());
    let out = &output[..end];
    if !expected.is_empty() && out.windows(expected.len()).any(|w| w == expected) {
        Verdict::Correct
    } else {
        Verdict::Incorrect
    }
}
