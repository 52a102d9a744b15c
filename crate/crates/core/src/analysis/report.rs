use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablate::MaskRecord;
use crate::detect::RetrievalScoreTable;
use crate::model::HeadMask;
use crate::{Error, Result};

use super::concentration::{concentration, TauCount, TopKMass};
use super::delta::{delta_report, HeadDelta};

/// Where each stage leaves the artifacts the report reads.
pub mod layout {
    pub const DETECT: &str = "detect";
    pub const MASK: &str = "ablate/mask.json";
    pub const EVAL_SUMMARY: &str = "eval/summary.json";
    pub const EVAL_AFTER: &str = "eval/after";
    pub const REPORTS: &str = "reports";
}

pub const TOP_K: [usize; 3] = [1, 2, 4];
pub const Y_TICKS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahResult {
    /// "base", "ablated" or "trained".
    pub label: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// What the evaluation stage records for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub strategy: String,
    pub objective: String,
    pub detect_set_hash: String,
    pub eval_set_hash: String,
    pub niah: Vec<NiahResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationNumbers {
    pub gini: f64,
    pub top_k: Vec<TopKMass>,
    pub above_tau: Vec<TauCount>,
}

/// Every number the report shows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub strategy: String,
    pub objective: String,
    pub detect_set_hash: String,
    pub eval_set_hash: String,
    pub head_count: usize,
    pub mask: HeadMask,
    /// Scores before training, sorted descending.
    pub distribution: Vec<f64>,
    pub heads: Vec<HeadDelta>,
    pub masked_mean_delta: Option<f64>,
    pub complement_mean_delta: Option<f64>,
    pub mean_before: f64,
    pub mean_after: f64,
    pub niah: Vec<NiahResult>,
    pub concentration: ConcentrationNumbers,
    pub y_ticks: Vec<f64>,
}

impl Manifest {
    pub fn niah_accuracy(&self, label: &str) -> Option<f64> {
        self.niah
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.accuracy)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

pub fn build_manifest(
    before: &RetrievalScoreTable,
    after: &RetrievalScoreTable,
    mask: &HeadMask,
    summary: &EvalSummary,
    taus: &[f64],
) -> Result<Manifest> {
    let deltas = delta_report(before, after, mask)?;
    let conc = concentration(before, &TOP_K, taus)?;
    Ok(Manifest {
        strategy: summary.strategy.clone(),
        objective: summary.objective.clone(),
        detect_set_hash: summary.detect_set_hash.clone(),
        eval_set_hash: summary.eval_set_hash.clone(),
        head_count: before.total_heads(),
        mask: mask.clone(),
        distribution: conc.sorted.iter().map(|&(_, s)| s).collect(),
        heads: deltas.heads,
        masked_mean_delta: deltas.masked_mean_delta,
        complement_mean_delta: deltas.complement_mean_delta,
        mean_before: deltas.mean_before,
        mean_after: deltas.mean_after,
        niah: summary.niah.clone(),
        concentration: ConcentrationNumbers {
            gini: conc.gini,
            top_k: conc.top_k,
            above_tau: conc.above_tau,
        },
        y_ticks: Y_TICKS.to_vec(),
    })
}

/// Reads a finished run and writes `reports/` with CSV tables, SVG plots
/// and the manifest they are rendered from.
pub fn render_report(run_dir: &Path, taus: &[f64]) -> Result<Manifest> {
    let detect = run_dir.join(layout::DETECT);
    require(detect.join("scores.csv"))?;
    let after_dir = run_dir.join(layout::EVAL_AFTER);
    require(after_dir.join("scores.csv"))?;
    let mask = MaskRecord::read(&require(run_dir.join(layout::MASK))?)?;
    let summary_path = require(run_dir.join(layout::EVAL_SUMMARY))?;
    let summary: EvalSummary = serde_json::from_slice(&fs::read(summary_path)?)?;
    let before = RetrievalScoreTable::read(&detect)?;
    let after = RetrievalScoreTable::read(&after_dir)?;
    let manifest = build_manifest(&before, &after, &mask.heads, &summary, taus)?;
    write_bundle(&run_dir.join(layout::REPORTS), &manifest)?;
    Ok(manifest)
}

pub fn write_bundle(dir: &Path, m: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut scores = String::from("layer,head,before,after\n");
    let mut deltas = String::from("layer,head,before,after,delta,masked\n");
    for h in &m.heads {
        let _ = writeln!(
            scores,
            "{},{},{},{}",
            h.head.layer, h.head.head, h.before, h.after
        );
        let _ = writeln!(
            deltas,
            "{},{},{},{},{},{}",
            h.head.layer, h.head.head, h.before, h.after, h.delta, h.masked
        );
    }
    let mut niah = String::from("label,accuracy,correct,total\n");
    for r in &m.niah {
        let _ = writeln!(niah, "{},{},{},{}", r.label, r.accuracy, r.correct, r.total);
    }
    fs::write(dir.join("scores.csv"), scores)?;
    fs::write(dir.join("deltas.csv"), deltas)?;
    fs::write(dir.join("niah.csv"), niah)?;
    let mut json = serde_json::to_vec_pretty(m)?;
    json.push(b'\n');
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("distribution.svg"), distribution_svg(m))?;
    fs::write(dir.join("deltas.svg"), scatter_svg(m))?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    )
}

fn y_axis(out: &mut String, ticks: &[f64], to_y: impl Fn(f64) -> f64) {
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{:.2}\" stroke=\"black\"/>",
        H - PAD
    );
    for &t in ticks {
        let y = to_y(t);
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{t}</text>",
            PAD - 6.0,
            y + 3.0
        );
    }
}

/// Scores sorted descending, one point per head.
pub fn distribution_svg(m: &Manifest) -> String {
    let n = m.distribution.len().max(1);
    let to_x = |i: usize| PAD + (W - 2.0 * PAD) * (i as f64 + 0.5) / n as f64;
    let to_y = |s: f64| H - PAD - (H - 2.0 * PAD) * s;
    let mut out = svg_open("Retrieval score by head rank");
    y_axis(&mut out, &m.y_ticks, to_y);
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">head rank (of {})</text>",
        W / 2.0,
        H - 12.0,
        m.head_count
    );
    let points: Vec<String> = m
        .distribution
        .iter()
        .enumerate()
        .map(|(i, &s)| format!("{:.2},{:.2}", to_x(i), to_y(s)))
        .collect();
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\"/>",
        points.join(" ")
    );
    for (i, &s) in m.distribution.iter().enumerate() {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"><title>{s}</title></circle>",
            to_x(i),
            to_y(s)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Score before against score after, masked heads highlighted.
pub fn scatter_svg(m: &Manifest) -> String {
    let to_x = |s: f64| PAD + (W - 2.0 * PAD) * s;
    let to_y = |s: f64| H - PAD - (H - 2.0 * PAD) * s;
    let mut out = svg_open("Retrieval score before and after training");
    y_axis(&mut out, &m.y_ticks, to_y);
    let _ = writeln!(
        out,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>",
        to_x(0.0),
        to_y(0.0),
        to_x(1.0),
        to_y(1.0)
    );
    for &t in &m.y_ticks {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{t}</text>",
            to_x(t),
            H - PAD + 14.0
        );
    }
    for h in &m.heads {
        let colour = if h.masked { "crimson" } else { "gray" };
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{colour}\"><title>{}: {} to {}</title></circle>",
            to_x(h.before),
            to_y(h.after),
            h.head,
            h.before,
            h.after
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One CSV row per run. All runs must share detection and evaluation sets.
pub fn compare_manifests(runs: &[(String, Manifest)]) -> Result<String> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(
            "compare needs at least two runs".into(),
        ));
    }
    let (first_name, first) = &runs[0];
    for (name, m) in &runs[1..] {
        if m.detect_set_hash != first.detect_set_hash || m.eval_set_hash != first.eval_set_hash {
            return Err(Error::InvalidArgument(format!(
                "runs `{first_name}` and `{name}` were evaluated on different test sets"
            )));
        }
    }
    let ks: Vec<usize> = first.concentration.top_k.iter().map(|t| t.k).collect();
    let mut out = String::from("run,strategy,objective,niah_accuracy,base_accuracy,masked_mean_delta,complement_mean_delta,gini");
    for k in &ks {
        let _ = write!(out, ",top{k}_mass");
    }
    out.push('\n');
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (name, m) in runs {
        let _ = write!(
            out,
            "{name},{},{},{},{},{},{},{}",
            m.strategy,
            m.objective,
            opt(m.niah_accuracy("trained")),
            opt(m.niah_accuracy("base")),
            opt(m.masked_mean_delta),
            opt(m.complement_mean_delta),
            m.concentration.gini
        );
        for k in &ks {
            let mass = m
                .concentration
                .top_k
                .iter()
                .find(|t| t.k == *k)
                .map(|t| t.mass);
            let _ = write!(out, ",{}", opt(mass));
        }
        out.push('\n');
    }
    Ok(out)
}
