//! Retrieval scores from copy-paste events in greedy decode traces.
//!
//! At decode step `t` a head copy-pastes position `j` when `j` is the argmax
//! of its attention and the emitted token equals the token at `j`. A head's
//! score on one instance is the fraction of distinct needle positions it
//! copy-pastes; its retrieval score is the mean over the test set.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{
    decode, AttentionTrace, DecodeConfig, DecodeMode, HeadId, HeadMask, ModelConfig, ModelParams,
    Token,
};
use crate::seed::sha256_hex;
use crate::tasks::NeedleInstance;
use crate::{jsonl, Error, Result};

/// Paper-scale threshold presets.
pub const TAU_PRESETS: [f64; 2] = [0.1, 0.05];

/// Copy-paste positions per head, indexed by `layer * n_heads + head`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyPasteLog {
    pub n_layers: usize,
    pub n_heads: usize,
    /// `g_h`: every position the head copy-pasted.
    pub copied: Vec<BTreeSet<usize>>,
    /// `g_h ∩ I_k`.
    pub needle_hits: Vec<BTreeSet<usize>>,
}

impl CopyPasteLog {
    pub fn head(&self, head: HeadId) -> (&BTreeSet<usize>, &BTreeSet<usize>) {
        let i = head.flat(self.n_heads);
        (&self.copied[i], &self.needle_hits[i])
    }
}

/// Extracts copy-paste events from a trace.
///
/// `prompt` is the decoded prompt, `generated` the emitted tokens and
/// `needle_positions` the needle's positions in prompt coordinates.
pub fn copy_paste_events(
    trace: &AttentionTrace,
    generated: &[Token],
    prompt: &[Token],
    needle_positions: &[usize],
) -> Result<CopyPasteLog> {
    if trace.steps.len() != generated.len()
        || trace
            .steps
            .iter()
            .zip(generated)
            .any(|(s, &y)| s.token != y)
    {
        return Err(Error::TraceMismatch {
            trace: trace.steps.len(),
            tokens: generated.len(),
        });
    }
    let n = trace.n_layers * trace.n_heads;
    let needle: BTreeSet<usize> = needle_positions.iter().copied().collect();
    let mut copied = vec![BTreeSet::new(); n];
    let mut needle_hits = vec![BTreeSet::new(); n];
    let token_at = |j: usize| {
        if j < prompt.len() {
            prompt[j]
        } else {
            generated[j - prompt.len()]
        }
    };
    for (t, step) in trace.steps.iter().enumerate() {
        let y = generated[t];
        for (h, att) in step.heads.iter().enumerate() {
            let j = att.argmax;
            if j > step.query_position || j >= prompt.len() + t {
                return Err(Error::InvalidArgument(format!(
                    "step {t} head {h}: argmax {j} is not attendable"
                )));
            }
            if token_at(j) == y {
                copied[h].insert(j);
                if needle.contains(&j) {
                    needle_hits[h].insert(j);
                }
            }
        }
    }
    Ok(CopyPasteLog {
        n_layers: trace.n_layers,
        n_heads: trace.n_heads,
        copied,
        needle_hits,
    })
}

/// Greedy decode settings that fit a needle answer and its stop token.
pub fn detection_decode(instance: &NeedleInstance) -> DecodeConfig {
    DecodeConfig::greedy(instance.needle.len() + 1, Some(crate::tasks::EOS))
}

/// SHA-256 over the JSONL serialisation of a test set.
pub fn test_set_hash(tests: &[NeedleInstance]) -> String {
    sha256_hex(&jsonl::to_jsonl(tests).expect("instances serialize"))
}

/// Per-head retrieval scores over a test set, plus an optional selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScoreTable {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Indexed by `layer * n_heads + head`.
    pub scores: Vec<f64>,
    pub test_size: usize,
    pub test_set_hash: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub tau: Option<f64>,
    pub selected: HeadMask,
}

/// JSON companion of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    n_layers: usize,
    n_heads: usize,
    test_size: usize,
    test_set_hash: String,
    checkpoint_hash: String,
    seed: u64,
    tau: Option<f64>,
    selected: HeadMask,
}

impl RetrievalScoreTable {
    pub fn score(&self, head: HeadId) -> f64 {
        self.scores[head.flat(self.n_heads)]
    }

    pub fn heads(&self) -> impl Iterator<Item = (HeadId, f64)> + '_ {
        (0..self.n_layers)
            .flat_map(move |l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
            .map(move |id| (id, self.score(id)))
    }

    pub fn total_heads(&self) -> usize {
        self.scores.len()
    }

    /// Checks that the table matches a model's head layout.
    pub fn check_topology(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers || self.n_heads != config.n_heads {
            return Err(Error::TopologyMismatch(format!(
                "table has {}x{} heads, model has {}x{}",
                self.n_layers, self.n_heads, config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }

    /// Records `tau` and the heads it selects.
    pub fn with_selection(mut self, tau: f64) -> Result<Self> {
        self.selected = select_heads(&self, tau)?;
        self.tau = Some(tau);
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,score\n");
        for (id, s) in self.heads() {
            let _ = writeln!(out, "{},{},{}", id.layer, id.head, s);
        }
        out
    }

    /// Writes `scores.csv` and `scores.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("scores.csv"), self.to_csv())?;
        let side = Sidecar {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            test_size: self.test_size,
            test_set_hash: self.test_set_hash.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            seed: self.seed,
            tau: self.tau,
            selected: self.selected.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&side)?;
        json.push(b'\n');
        fs::write(dir.join("scores.json"), json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let csv_path = dir.join("scores.csv");
        let json_path = dir.join("scores.json");
        for p in [&csv_path, &json_path] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let side: Sidecar = serde_json::from_slice(&fs::read(&json_path)?)?;
        let text = fs::read_to_string(&csv_path)?;
        let mut scores = vec![f64::NAN; side.n_layers * side.n_heads];
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |m: &str| Error::MalformedLine {
                path: csv_path.clone(),
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad("expected layer,head,score"));
            }
            let layer: usize = f[0].parse().map_err(|_| bad("bad layer"))?;
            let head: usize = f[1].parse().map_err(|_| bad("bad head"))?;
            let score: f64 = f[2].parse().map_err(|_| bad("bad score"))?;
            if layer >= side.n_layers || head >= side.n_heads {
                return Err(bad("head outside the recorded topology"));
            }
            scores[layer * side.n_heads + head] = score;
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::MalformedLine {
                path: csv_path,
                line: 0,
                message: "missing heads".into(),
            });
        }
        Ok(Self {
            n_layers: side.n_layers,
            n_heads: side.n_heads,
            scores,
            test_size: side.test_size,
            test_set_hash: side.test_set_hash,
            checkpoint_hash: side.checkpoint_hash,
            seed: side.seed,
            tau: side.tau,
            selected: side.selected,
        })
    }
}

/// Mean per-instance needle fraction for every head, from greedy decodes
/// of the unmasked model.
pub fn retrieval_scores(
    params: &ModelParams<f32>,
    tests: &[NeedleInstance],
    seed: u64,
) -> Result<RetrievalScoreTable> {
    if tests.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mc = params.config();
    let mut sums = vec![0.0; mc.total_heads()];
    for inst in tests {
        let fractions = instance_fractions(params, inst).map_err(|e| Error::InstanceFailed {
            instance: inst.id,
            source: Box::new(e),
        })?;
        for (s, f) in sums.iter_mut().zip(fractions) {
            *s += f;
        }
    }
    let n = tests.len() as f64;
    Ok(RetrievalScoreTable {
        n_layers: mc.n_layers,
        n_heads: mc.n_heads,
        scores: sums.into_iter().map(|s| s / n).collect(),
        test_size: tests.len(),
        test_set_hash: test_set_hash(tests),
        checkpoint_hash: params.content_hash(),
        seed,
        tau: None,
        selected: HeadMask::empty(),
    })
}

/// `|g_h ∩ I_k| / |I_k|` for every head on one instance.
pub fn instance_fractions(params: &ModelParams<f32>, inst: &NeedleInstance) -> Result<Vec<f64>> {
    let cfg = detection_decode(inst);
    debug_assert_eq!(cfg.mode, DecodeMode::Greedy);
    let prompt = inst.prompt();
    let gen = decode(params, &prompt, &cfg, &HeadMask::empty())?;
    let needle = inst.prompt_needle_positions();
    let log = copy_paste_events(&gen.trace, &gen.tokens, &prompt, &needle)?;
    Ok(log
        .needle_hits
        .iter()
        .map(|hits| hits.len() as f64 / needle.len() as f64)
        .collect())
}

/// Heads whose score is at least `tau`.
pub fn select_heads(table: &RetrievalScoreTable, tau: f64) -> Result<HeadMask> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::ThresholdOutOfRange(tau));
    }
    Ok(table
        .heads()
        .filter(|&(_, s)| s >= tau)
        .map(|(id, _)| id)
        .collect())
}

/// Largest threshold that selects at least `round(fraction * n)` heads
/// (at least one). Ties at the cut can select more.
pub fn tau_for_fraction(table: &RetrievalScoreTable, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "head fraction {fraction} outside (0, 1]"
        )));
    }
    let mut sorted = table.scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * sorted.len() as f64).round() as usize).clamp(1, sorted.len());
    let tau = sorted[k - 1];
    if tau > 0.0 {
        return Ok(tau);
    }
    sorted
        .iter()
        .rev()
        .copied()
        .find(|&s| s > 0.0)
        .ok_or_else(|| Error::InvalidArgument("no head has a positive retrieval score".into()))
}
