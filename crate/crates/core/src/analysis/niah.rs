use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detect::{detection_decode, test_set_hash};
use crate::model::{decode, HeadMask, ModelParams, Token};
use crate::tasks::{score_answer, NeedleInstance, Verdict, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceVerdict {
    pub id: usize,
    pub verdict: Verdict,
    pub output: Vec<Token>,
    /// Set when the instance could not be decoded.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahEval {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub test_set_hash: String,
    pub verdicts: Vec<InstanceVerdict>,
}

/// Greedy needle retrieval accuracy with the given heads deactivated.
pub fn eval_niah(
    params: &ModelParams<f32>,
    mask: &HeadMask,
    tests: &[NeedleInstance],
) -> Result<NiahEval> {
    if tests.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    mask.validate(params.config())?;
    let mut verdicts = Vec::with_capacity(tests.len());
    for inst in tests {
        let v = match decode(params, &inst.prompt(), &detection_decode(inst), mask) {
            Ok(gen) => InstanceVerdict {
                id: inst.id,
                verdict: score_answer(&inst.needle, &gen.tokens, Some(EOS)),
                output: gen.tokens,
                failure: None,
            },
            Err(e) => InstanceVerdict {
                id: inst.id,
                verdict: Verdict::Incorrect,
                output: Vec::new(),
                failure: Some(e.to_string()),
            },
        };
        verdicts.push(v);
    }
    let correct = verdicts.iter().filter(|v| v.verdict.is_correct()).count();
    Ok(NiahEval {
        accuracy: correct as f64 / tests.len() as f64,
        correct,
        total: tests.len(),
        test_set_hash: test_set_hash(tests),
        verdicts,
    })
}

impl NiahEval {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,correct,output,failure\n");
        for v in &self.verdicts {
            let toks: Vec<String> = v.output.iter().map(Token::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                v.id,
                v.verdict.is_correct(),
                toks.join(" "),
                v.failure.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        out
    }
}
