//! One function per pipeline stage, each reading upstream artifacts from
//! the run directory and writing only its own subdirectory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rethead_core::ablate::{ablated_model, build_mask, MaskRecord, MaskStrategy};
use rethead_core::analysis::{
    compare_manifests, eval_niah, layout, render_report, EvalSummary, Manifest, NiahEval,
    NiahResult,
};
use rethead_core::detect::{
    retrieval_scores, tau_for_fraction, test_set_hash, RetrievalScoreTable,
};
use rethead_core::jsonl::{read_jsonl, write_jsonl};
use rethead_core::model::{
    load_checkpoint, save_checkpoint, DecodeConfig, DecodeMode, HeadMask, ModelParams,
};
use rethead_core::synth::{export_pairs, import_pairs, synthesize_pairs, RejectedSampler};
use rethead_core::tasks::{
    gen_instruction_set, gen_niah_set, gen_pretrain_corpus, CorpusSpec, NeedleInstance, EOS,
};
use rethead_core::train::{dpo_train, pretrain, sft_train, TrainReport};
use rethead_core::Error as CoreError;
use serde_json::json;

use crate::config::{ModelSection, Objective, RunConfig, Sampler};
use crate::error::{CliError, CliResult};
use crate::manifest::{file_hash, hash_tree, RunManifest};

pub const OUTPUT_ROOT_ENV: &str = "RETHEAD_OUTPUT_ROOT";

/// `--out` wins, then the config's `output_dir` under the output root.
pub fn resolve_run_dir(out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    if let Some(o) = out {
        return o;
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    match &cfg.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => root.join(d),
        None => root.join(format!("seed-{}", cfg.seed)),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    /// Overwrite stage directories whose inputs changed.
    pub force: bool,
    /// Record wall-clock time in run manifests and training logs.
    pub record_timing: bool,
    pub quiet: bool,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub opts: Options,
}

struct Started {
    stage: &'static str,
    dir: PathBuf,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    clock: Instant,
}

fn section_hash(section: &serde_json::Value) -> String {
    rethead_core::seed::sha256_hex(&serde_json::to_vec(section).expect("json value serializes"))
}

/// Saves the parameters from before a diverged update next to the stage
/// outputs.
fn keep_last_good(dir: &Path, e: CoreError) -> CliError {
    if let CoreError::Diverged { last_good, .. } = &e {
        if let Err(save) = save_checkpoint(&last_good.0, dir.join("last_good.ckpt")) {
            return CliError::Core(save);
        }
    }
    CliError::Core(e)
}

impl Pipeline {
    pub fn new(cfg: RunConfig, root: PathBuf, opts: Options) -> Self {
        Self { cfg, root, opts }
    }

    fn note(&self, msg: &str) {
        if !self.opts.quiet {
            eprintln!("{msg}");
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(
        &self,
        stage: &'static str,
        need: &'static str,
        rels: &[&str],
    ) -> CliResult<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for rel in rels {
            let p = self.path(rel);
            if !p.is_file() {
                return Err(CliError::MissingPrereq { stage, need });
            }
            inputs.insert(rel.to_string(), file_hash(&p)?);
        }
        Ok(inputs)
    }

    /// `None` when the stage already ran with the same inputs.
    fn begin(
        &self,
        stage: &'static str,
        dir_name: &str,
        section: serde_json::Value,
        inputs: BTreeMap<String, String>,
    ) -> CliResult<Option<Started>> {
        let dir = self.path(dir_name);
        let config_hash = section_hash(&section);
        if dir.exists() {
            let current = RunManifest::read(&dir).is_some_and(|m| m.matches(&config_hash, &inputs));
            if current && !self.opts.force {
                self.note(&format!("{stage}: up to date"));
                return Ok(None);
            }
            let empty = fs::read_dir(&dir)?.next().is_none();
            if !empty && !self.opts.force {
                return Err(CliError::Dirty(dir));
            }
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        self.note(&format!("{stage}: running"));
        Ok(Some(Started {
            stage,
            dir,
            config_hash,
            inputs,
            clock: Instant::now(),
        }))
    }

    fn finish(&self, s: Started) -> CliResult<()> {
        let manifest = RunManifest {
            stage: s.stage.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: s.config_hash,
            inputs: s.inputs,
            outputs: hash_tree(&s.dir)?,
            wall_clock_ms: self
                .opts
                .record_timing
                .then(|| s.clock.elapsed().as_millis() as u64),
        };
        manifest.write(&s.dir)?;
        self.note(&format!("{}: done", s.stage));
        Ok(())
    }

    fn load(&self, rel: &str) -> CliResult<ModelParams<f32>> {
        Ok(load_checkpoint(self.path(rel))?)
    }

    /// Pretrains a model of the given shape on the configured corpus.
    fn train_base(
        &self,
        shape: &ModelSection,
        name: &str,
        dir: &Path,
    ) -> CliResult<(ModelParams<f32>, TrainReport)> {
        let cfg = &self.cfg;
        let vocab = cfg.vocab()?;
        let init = ModelParams::<f32>::init(shape.build(cfg.stage_seed(&format!("{name}.init"))))?;
        let corpus = gen_pretrain_corpus(
            &vocab,
            &cfg.tasks.corpus,
            cfg.tasks.n_train,
            shape.max_seq_len,
            cfg.stage_seed("corpus"),
        )?;
        let queried = CorpusSpec {
            copy_fraction: 0.0,
            ..cfg.tasks.corpus.clone()
        };
        let heldout = gen_pretrain_corpus(
            &vocab,
            &queried,
            cfg.tasks.n_heldout,
            shape.max_seq_len,
            cfg.stage_seed("heldout"),
        )?;
        let mut pc = cfg.pretrain.clone();
        pc.optim.seed = cfg.stage_seed(name);
        let (params, mut report) =
            pretrain(&init, &corpus, &heldout, &pc).map_err(|e| keep_last_good(dir, e))?;
        report.tag = Some(name.to_string());
        save_checkpoint(&params, dir.join("model.ckpt"))?;
        report.write(dir, self.opts.record_timing)?;
        Ok((params, report))
    }

    fn pretrain_section(&self) -> serde_json::Value {
        let c = &self.cfg;
        json!({
            "seed": c.seed,
            "model": c.model,
            "tasks": [c.tasks.n_keys, c.tasks.n_values, c.tasks.n_train, c.tasks.n_heldout],
            "corpus": c.tasks.corpus,
            "pretrain": c.pretrain,
        })
    }

    pub fn pretrain(&self) -> CliResult<()> {
        let Some(s) = self.begin(
            "pretrain",
            "pretrain",
            self.pretrain_section(),
            BTreeMap::new(),
        )?
        else {
            return Ok(());
        };
        let (_, report) = self.train_base(&self.cfg.model, "pretrain", &s.dir)?;
        if let Some(best) = report.evals.iter().map(|e| e.accuracy).reduce(f64::max) {
            self.note(&format!("pretrain: best held-out recall {best:.3}"));
        }
        self.finish(s)
    }

    fn detect_set(&self) -> CliResult<Vec<NeedleInstance>> {
        let c = &self.cfg;
        Ok(gen_niah_set(
            &c.vocab()?,
            &c.tasks.niah,
            c.tasks.n_detect,
            c.model.max_seq_len,
            c.stage_seed("detect-set"),
        )?)
    }

    /// Threshold for the configured head fraction, or the fixed value.
    pub fn choose_tau(&self, table: &RetrievalScoreTable) -> CliResult<f64> {
        match self.cfg.detect.tau {
            Some(t) => Ok(t),
            None => Ok(tau_for_fraction(table, self.cfg.detect.head_fraction)?),
        }
    }

    pub fn detect(&self) -> CliResult<()> {
        let inputs = self.require("detect", "pretrain", &["pretrain/model.ckpt"])?;
        let c = &self.cfg;
        let section = json!({
            "seed": c.seed,
            "vocab": [c.tasks.n_keys, c.tasks.n_values],
            "niah": c.tasks.niah,
            "n_detect": c.tasks.n_detect,
            "detect": c.detect,
        });
        let Some(s) = self.begin("detect", layout::DETECT, section, inputs)? else {
            return Ok(());
        };
        let params = self.load("pretrain/model.ckpt")?;
        let set = self.detect_set()?;
        let table = retrieval_scores(&params, &set, c.stage_seed("detect"))?;
        let tau = self.choose_tau(&table)?;
        let table = table.with_selection(tau)?;
        self.note(&format!(
            "detect: tau {tau}, {} of {} heads selected",
            table.selected.len(),
            table.total_heads()
        ));
        write_jsonl(s.dir.join("detect_set.jsonl"), &set)?;
        table.write(&s.dir)?;
        self.finish(s)
    }

    pub fn ablate(&self) -> CliResult<()> {
        let inputs = self.require(
            "ablate",
            "detect",
            &[
                "pretrain/model.ckpt",
                "detect/scores.csv",
                "detect/scores.json",
            ],
        )?;
        let c = &self.cfg;
        let kind = c.synth.rejected_sampler.mask_kind();
        let section = json!({ "seed": c.seed, "ablate": c.ablate, "kind": kind });
        let Some(s) = self.begin("ablate", "ablate", section, inputs)? else {
            return Ok(());
        };
        let params = self.load("pretrain/model.ckpt")?;
        let table = RetrievalScoreTable::read(&self.path(layout::DETECT))?;
        let strategy = MaskStrategy {
            kind,
            size: c.ablate.size,
            seed: c.stage_seed("mask"),
        };
        let mask = build_mask(&table, &strategy)?;
        let (ablated, record) = ablated_model(&params, &mask, kind, strategy.seed)?;
        record.write(&s.dir.join("mask.json"))?;
        save_checkpoint(&ablated, s.dir.join("ablated.ckpt"))?;
        self.finish(s)
    }

    pub fn synth(&self) -> CliResult<()> {
        let inputs = self.require(
            "synth",
            "ablate",
            &["pretrain/model.ckpt", "ablate/mask.json"],
        )?;
        let c = &self.cfg;
        let sampler = c.synth.rejected_sampler;
        let mut section = json!({
            "seed": c.seed,
            "vocab": [c.tasks.n_keys, c.tasks.n_values],
            "instructions": c.tasks.instructions,
            "n_instructions": c.tasks.n_instructions,
            "synth": c.synth,
        });
        if sampler == Sampler::SmallerModel {
            section["smaller"] = self.pretrain_section();
        }
        let Some(s) = self.begin("synth", "synth", section, inputs)? else {
            return Ok(());
        };
        let target = self.load("pretrain/model.ckpt")?;
        let record = MaskRecord::read(&self.path(layout::MASK))?;
        let instructions = gen_instruction_set(
            &c.vocab()?,
            &c.tasks.instructions,
            c.tasks.n_instructions,
            c.model.max_seq_len,
            c.stage_seed("instructions"),
        )?;
        let decode = DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: c.synth.temperature,
            max_new_tokens: c.tasks.instructions.value_len + 1,
            stop_token: Some(EOS),
            seed: 0,
        };
        let smaller;
        let rejected = match sampler {
            Sampler::SmallerModel => {
                let dir = s.dir.join("smaller");
                fs::create_dir_all(&dir)?;
                smaller = self.train_base(&c.synth.smaller_model, "smaller", &dir)?.0;
                RejectedSampler::SmallerModel { params: &smaller }
            }
            Sampler::JudgedPair => RejectedSampler::JudgedPair,
            masked => RejectedSampler::Masked {
                tag: masked.as_str(),
                mask: &record.heads,
            },
        };
        let out = synthesize_pairs(
            &target,
            rejected,
            &instructions,
            &decode,
            c.stage_seed("synth"),
        )?;
        self.note(&format!(
            "synth: kept {} of {}, chosen accuracy {:.3}, rejected accuracy {:.3}",
            out.stats.kept,
            out.stats.requested,
            out.stats.chosen_accuracy,
            out.stats.rejected_accuracy
        ));
        write_jsonl(s.dir.join("instructions.jsonl"), &instructions)?;
        export_pairs(&out.tuples, &s.dir.join("pairs.jsonl"))?;
        write_jsonl(s.dir.join("dropped.jsonl"), &out.dropped)?;
        let mut stats = serde_json::to_vec_pretty(&out.stats)?;
        stats.push(b'\n');
        fs::write(s.dir.join("stats.json"), stats)?;
        self.finish(s)
    }

    pub fn dpo(&self) -> CliResult<()> {
        let c = &self.cfg;
        if let Some(r) = &c.dpo.reference {
            if !r.is_file() {
                return Err(CliError::Core(CoreError::MissingArtifact(r.clone())));
            }
        }
        let mut inputs = self.require(
            "dpo",
            "synth",
            &["pretrain/model.ckpt", "synth/pairs.jsonl"],
        )?;
        if let Some(r) = &c.dpo.reference {
            inputs.insert(r.display().to_string(), file_hash(r)?);
        }
        let section = json!({ "seed": c.seed, "dpo": c.dpo });
        let Some(s) = self.begin("dpo", "dpo", section, inputs)? else {
            return Ok(());
        };
        let target = self.load("pretrain/model.ckpt")?;
        let reference = match &c.dpo.reference {
            Some(r) => load_checkpoint(r)?,
            None => target.clone(),
        };
        let tuples = import_pairs(&self.path("synth/pairs.jsonl"))?;
        let mut cfg = c.dpo.clone();
        cfg.optim.seed = c.stage_seed("dpo");
        let (params, mut report) =
            dpo_train(&target, &reference, &tuples, &cfg).map_err(|e| keep_last_good(&s.dir, e))?;
        report.tag = tuples.first().map(|t| t.rejected_meta.strategy.clone());
        self.note(&format!(
            "dpo: margin {:.4} -> {:.4}",
            report.initial_margin.unwrap_or(f64::NAN),
            report.final_margin.unwrap_or(f64::NAN)
        ));
        save_checkpoint(&params, s.dir.join("model.ckpt"))?;
        report.write(&s.dir, self.opts.record_timing)?;
        self.finish(s)
    }

    pub fn sft(&self) -> CliResult<()> {
        let inputs = self.require(
            "sft",
            "synth",
            &["pretrain/model.ckpt", "synth/pairs.jsonl"],
        )?;
        let c = &self.cfg;
        let section = json!({ "seed": c.seed, "sft": c.sft });
        let Some(s) = self.begin("sft", "sft", section, inputs)? else {
            return Ok(());
        };
        let target = self.load("pretrain/model.ckpt")?;
        let tuples = import_pairs(&self.path("synth/pairs.jsonl"))?;
        let mut cfg = c.sft.clone();
        cfg.seed = c.stage_seed("sft");
        let (params, mut report) =
            sft_train(&target, &tuples, &cfg).map_err(|e| keep_last_good(&s.dir, e))?;
        report.tag = tuples.first().map(|t| t.rejected_meta.strategy.clone());
        save_checkpoint(&params, s.dir.join("model.ckpt"))?;
        report.write(&s.dir, self.opts.record_timing)?;
        self.finish(s)
    }

    pub fn eval(&self) -> CliResult<()> {
        let c = &self.cfg;
        let obj = c.objective.stage();
        let trained_rel = format!("{obj}/model.ckpt");
        let report_rel = format!("{obj}/train.json");
        let need = match c.objective {
            Objective::Dpo => "dpo",
            Objective::Sft => "sft",
        };
        let inputs = self.require(
            "eval",
            need,
            &[
                "pretrain/model.ckpt",
                "detect/detect_set.jsonl",
                "detect/scores.json",
                "ablate/mask.json",
                &trained_rel,
                &report_rel,
            ],
        )?;
        let section = json!({
            "seed": c.seed,
            "vocab": [c.tasks.n_keys, c.tasks.n_values],
            "niah": c.tasks.niah,
            "n_eval": c.tasks.n_eval,
            "objective": c.objective,
        });
        let Some(s) = self.begin("eval", "eval", section, inputs)? else {
            return Ok(());
        };
        let base = self.load("pretrain/model.ckpt")?;
        let trained = self.load(&trained_rel)?;
        let record = MaskRecord::read(&self.path(layout::MASK))?;
        let trained_report: TrainReport =
            serde_json::from_slice(&fs::read(self.path(&report_rel))?)?;
        let detect_set: Vec<NeedleInstance> = read_jsonl(self.path("detect/detect_set.jsonl"))?;
        let before = RetrievalScoreTable::read(&self.path(layout::DETECT))?;
        let eval_set = gen_niah_set(
            &c.vocab()?,
            &c.tasks.niah,
            c.tasks.n_eval,
            c.model.max_seq_len,
            c.stage_seed("eval-set"),
        )?;
        let runs: [(&str, &ModelParams<f32>, &HeadMask); 3] = [
            ("base", &base, &HeadMask::empty()),
            ("ablated", &base, &record.heads),
            ("trained", &trained, &HeadMask::empty()),
        ];
        let mut niah = Vec::new();
        for (label, params, mask) in runs {
            let e: NiahEval = eval_niah(params, mask, &eval_set)?;
            fs::write(s.dir.join(format!("niah_{label}.csv")), e.to_csv())?;
            self.note(&format!("eval: {label} accuracy {:.3}", e.accuracy));
            niah.push(NiahResult {
                label: label.into(),
                accuracy: e.accuracy,
                correct: e.correct,
                total: e.total,
            });
        }
        let mut after = retrieval_scores(&trained, &detect_set, before.seed)?;
        if let Some(tau) = before.tau {
            after = after.with_selection(tau)?;
        }
        after.write(&self.path(layout::EVAL_AFTER))?;
        write_jsonl(s.dir.join("eval_set.jsonl"), &eval_set)?;
        let summary = EvalSummary {
            strategy: trained_report
                .tag
                .unwrap_or_else(|| c.synth.rejected_sampler.as_str().into()),
            objective: obj.into(),
            detect_set_hash: before.test_set_hash.clone(),
            eval_set_hash: test_set_hash(&eval_set),
            niah,
        };
        let mut json = serde_json::to_vec_pretty(&summary)?;
        json.push(b'\n');
        fs::write(self.path(layout::EVAL_SUMMARY), json)?;
        self.finish(s)
    }

    pub fn report(&self) -> CliResult<()> {
        let inputs = self.require(
            "report",
            "eval",
            &[
                "detect/scores.csv",
                "detect/scores.json",
                "ablate/mask.json",
                "eval/summary.json",
                "eval/after/scores.csv",
                "eval/after/scores.json",
            ],
        )?;
        let section = json!({ "analysis": self.cfg.analysis });
        let Some(s) = self.begin("report", layout::REPORTS, section, inputs)? else {
            return Ok(());
        };
        render_report(&self.root, &self.cfg.analysis.taus)?;
        self.finish(s)
    }

    /// Every stage in order, training with the configured objective.
    pub fn run_all(&self) -> CliResult<()> {
        self.pretrain()?;
        self.detect()?;
        self.ablate()?;
        self.synth()?;
        match self.cfg.objective {
            Objective::Dpo => self.dpo()?,
            Objective::Sft => self.sft()?,
        }
        self.eval()?;
        self.report()
    }
}

/// CSV comparing finished runs; each needs `reports/manifest.json`.
pub fn compare(dirs: &[PathBuf]) -> CliResult<String> {
    let mut runs = Vec::with_capacity(dirs.len());
    for d in dirs {
        let path = d.join(layout::REPORTS).join("manifest.json");
        if !path.is_file() {
            return Err(CliError::MissingPrereq {
                stage: "compare",
                need: "report",
            });
        }
        let name = d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        runs.push((name, Manifest::read(&path)?));
    }
    Ok(compare_manifests(&runs)?)
}
