//! Staged end-to-end runs: checkpoint (or imported activation dump) in,
//! fits, patches, head roles, neuron models, and figures out.
//!
//! A run directory is self-describing. `config.json` echoes the plan,
//! `stages/<name>/` holds each stage's CSV artifacts plus a `stage.json`
//! receipt, `figures/` holds the SVGs, and `manifest.json` ties them
//! together. Stage receipts carry a key derived from the plan fingerprint,
//! the source container hash, and the upstream stage chain; rerunning with
//! nothing changed reuses every stage whose receipt and files still match.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::causal::{
    activation_patch, activation_patch_many, attribution_patch, categorize_heads,
    collect_pair_vectors, compare_fit_patches, correct_prompts, direct_effect_many,
    make_prompt_pairs, patch_sweep, patch_with_joint_fit, path_patch_direct,
    restoration_ceiling, sample_correct_prompts, shuffle_value_labels, Component, CorruptMode,
    EffectRow, HeadCategorization, HeadLabel, PromptPair, TokenRole, METRIC_ID,
};
use crate::error::{Error, Result};
use crate::manifold::{
    fit_joint, fit_manifold, BasisSpec, JointPart, DEFAULT_PCA_DIM, DEFAULT_PERIODS, JOINT_ALL,
};
use crate::model::{load_checkpoint, TaskSpec, ToyTransformer, EQ_POS};
use crate::neurons::{
    capture_neuron_grids, fit_preact_many, patch_fitted_neurons, preact_fourier,
    top_grid_periods, FittedPatchCurve, GridAxis, NeuronFit, PreactParams, PERIOD_TOL,
};
use crate::report::{render_plot, PlotData, PlotKind};
use crate::trace::{import_dump, Site, SiteKey, Trace};

/// Prompt pairs per corruption direction unless the plan overrides it.
pub const DEFAULT_PAIR_COUNT: usize = 100;

/// Where the activations come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "path", rename_all = "snake_case")]
pub enum ModelSource {
    /// A trained model container; every stage is available.
    Checkpoint(PathBuf),
    /// An imported trace container; fit stages run on the stored
    /// activations, causal stages are skipped.
    Dump(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Capture,
    OperandFits,
    LastTokenFits,
    PatchSweep,
    Heads,
    MlpStaging,
    Neurons,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::Capture,
        StageKind::OperandFits,
        StageKind::LastTokenFits,
        StageKind::PatchSweep,
        StageKind::Heads,
        StageKind::MlpStaging,
        StageKind::Neurons,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Capture => "capture",
            StageKind::OperandFits => "operand_fits",
            StageKind::LastTokenFits => "last_token_fits",
            StageKind::PatchSweep => "patch_sweep",
            StageKind::Heads => "heads",
            StageKind::MlpStaging => "mlp_staging",
            StageKind::Neurons => "neurons",
        }
    }

    fn order(self) -> usize {
        StageKind::ALL.iter().position(|&s| s == self).unwrap()
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// One full run: which stages to execute, on what source, with what knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub source: ModelSource,
    /// Task name; optional when the checkpoint or dump already names one.
    pub task: Option<String>,
    /// Must be a prefix-closed selection in canonical order, starting with
    /// capture.
    pub stages: Vec<StageKind>,
    pub seed: u64,
    /// Clean/corrupted pairs per corruption direction.
    pub n_pairs: usize,
    /// Fourier features per basis.
    pub k: usize,
    /// PCA dimension for basis regressions.
    pub pca_dim: usize,
    /// Neuron budget for the preactivation stage.
    pub max_neurons: usize,
    /// Low-confidence heads forced to the mixed category.
    pub mixed_heads: usize,
    /// Prompt budget for neuron patch curves.
    pub eval_prompts: usize,
    /// Tasks below this full-grid accuracy are excluded from task tables.
    pub accuracy_threshold: f64,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn new(source: ModelSource, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentPlan {
            source,
            task: None,
            stages: StageKind::ALL.to_vec(),
            seed: 0,
            n_pairs: DEFAULT_PAIR_COUNT,
            k: DEFAULT_PERIODS.len(),
            pca_dim: DEFAULT_PCA_DIM,
            max_neurons: 64,
            mixed_heads: 1,
            eval_prompts: 400,
            accuracy_threshold: 0.9,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("plan lists no stages".into()));
        }
        if self.stages[0] != StageKind::Capture {
            return Err(Error::InvalidConfig("plans start with the capture stage".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].order() <= w[0].order() {
                return Err(Error::InvalidConfig(format!(
                    "stage {} cannot follow {}; stages run in canonical order",
                    w[1], w[0]
                )));
            }
        }
        if self.k == 0 || self.k > DEFAULT_PERIODS.len() {
            return Err(Error::InvalidConfig(format!(
                "k must be in 1..={}, got {}",
                DEFAULT_PERIODS.len(),
                self.k
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::InvalidConfig("n_pairs must be positive".into()));
        }
        if self.pca_dim == 0 {
            return Err(Error::InvalidConfig("pca_dim must be positive".into()));
        }
        if self.max_neurons == 0 {
            return Err(Error::InvalidConfig("max_neurons must be positive".into()));
        }
        if self.eval_prompts == 0 {
            return Err(Error::InvalidConfig("eval_prompts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return Err(Error::InvalidConfig("accuracy_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn periods(&self) -> Vec<f64> {
        DEFAULT_PERIODS.iter().copied().take(self.k).collect()
    }

    /// Everything that changes stage outputs except the source itself.
    fn fingerprint(&self) -> String {
        serde_json::json!({
            "task": self.task,
            "seed": self.seed,
            "n_pairs": self.n_pairs,
            "k": self.k,
            "pca_dim": self.pca_dim,
            "max_neurons": self.max_neurons,
            "mixed_heads": self.mixed_heads,
            "eval_prompts": self.eval_prompts,
            "accuracy_threshold": self.accuracy_threshold,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FigureEntry {
    /// SVG path relative to the run directory.
    pub file: String,
    /// Exact data frame behind the figure, relative to the run directory.
    pub data: String,
    pub kind: String,
    pub title: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub status: String,
    pub flags: Vec<String>,
    pub files: Vec<FileRecord>,
    pub figures: Vec<FigureEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub metric: String,
    pub task: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub figures: Vec<FigureEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub accuracy: Option<f64>,
    pub n_correct: Option<usize>,
    pub n_pairs_a: Option<usize>,
    pub n_pairs_b: Option<usize>,
    /// Mean clean-vs-corrupted answer logit gap, the LD ceiling.
    pub restoration_ceiling: Option<f64>,
    pub n_traces: Option<usize>,
    pub n_sites: Option<usize>,
}

/// One basis fit at one site: regression quality plus, when a model is
/// available, the logit difference restored by patching the reconstruction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitLdRow {
    pub role: String,
    pub layer: usize,
    pub basis: String,
    pub r2: f64,
    pub ld: Option<f64>,
    /// Full-layer activation patch at the same site, for scale.
    pub layer_ld: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StagingRow {
    pub layer: usize,
    pub te: f64,
    pub de: f64,
    pub fit_r2: f64,
    /// LD from patching the a+b reconstruction of the MLP output.
    pub fit_ld: f64,
    pub de_over_te: f64,
    pub fit_over_te: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeuronTrendRow {
    pub index: usize,
    pub attribution: f64,
    pub te: f64,
    pub de: f64,
    pub nrmse: Option<f64>,
    pub answer_fraction: f64,
    pub dominant_period: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeuronStageSummary {
    pub layer: usize,
    /// Periods used by every neuron's preactivation model.
    pub periods: Vec<f64>,
    pub rows: Vec<NeuronTrendRow>,
    /// Pearson r between |TE| and fit NRMSE.
    pub te_nrmse_correlation: Option<f64>,
    pub mean_answer_fraction: f64,
    pub curve: FittedPatchCurve,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageStatusRow {
    pub name: String,
    pub status: String,
    pub flags: Vec<String>,
}

/// Everything a run produced, in one serializable bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClockReport {
    pub task: String,
    pub seed: u64,
    pub n_pairs: usize,
    pub metric: String,
    pub stages: Vec<StageStatusRow>,
    pub capture: Option<CaptureSummary>,
    pub operand_fits: Vec<FitLdRow>,
    pub last_token_fits: Vec<FitLdRow>,
    pub patch_rows: Vec<EffectRow>,
    pub heads: Option<HeadCategorization>,
    pub staging: Vec<StagingRow>,
    pub neurons: Option<NeuronStageSummary>,
    pub figures: Vec<FigureEntry>,
}

/// Stage payloads as stored in `rows.json`, one per completed stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "stage", content = "data", rename_all = "snake_case")]
enum StageFragment {
    Capture(CaptureSummary),
    OperandFits(Vec<FitLdRow>),
    LastTokenFits(Vec<FitLdRow>),
    PatchSweep(Vec<EffectRow>),
    Heads(HeadCategorization),
    MlpStaging(Vec<StagingRow>),
    Neurons(Box<NeuronStageSummary>),
    Skipped,
}

struct ModelCtx {
    model: ToyTransformer,
    task: TaskSpec,
    /// Every prompt the model answers correctly, in grid order.
    fit_prompts: Vec<(i64, i64)>,
    accuracy: f64,
    pairs_a: Vec<PromptPair>,
    pairs_b: Vec<PromptPair>,
}

struct DumpCtx {
    traces: Vec<Trace>,
}

enum SourceCtx {
    Model(Box<ModelCtx>),
    Dump(DumpCtx),
}

struct SourceHandle {
    hash: String,
    task_name: String,
    ctx: SourceCtx,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn container_hash(dir: &Path, producer: &str) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["manifest.json", "data.bin"] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|_| Error::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.to_string(),
        })?;
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn stage_key(fingerprint: &str, upstream: &str, stage: StageKind) -> String {
    let mut h = Sha256::new();
    h.update(fingerprint.as_bytes());
    h.update(b"|");
    h.update(upstream.as_bytes());
    h.update(b"|");
    h.update(stage.name().as_bytes());
    format!("{:x}", h.finalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_source(plan: &ExperimentPlan) -> Result<SourceHandle> {
    match &plan.source {
        ModelSource::Checkpoint(dir) => {
            let hash = container_hash(dir, "helixlab train")?;
            let (model, meta) = load_checkpoint(dir)?;
            let task_name = match (&plan.task, &meta.task) {
                (Some(p), Some(m)) if p != m => {
                    return Err(Error::InvalidConfig(format!(
                        "plan names task {p} but the checkpoint was trained on {m}"
                    )))
                }
                (Some(p), _) => p.clone(),
                (None, Some(m)) => m.clone(),
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "neither the plan nor the checkpoint names a task".into(),
                    ))
                }
            };
            let task = TaskSpec::by_name(&task_name)?;
            if task.vocab_size() != model.config.vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "task {task_name} needs vocab {}, checkpoint has {}",
                    task.vocab_size(),
                    model.config.vocab_size
                )));
            }
            let fit_prompts = correct_prompts(&model, &task)?;
            let n_valid = task.valid_pairs().len();
            let accuracy = fit_prompts.len() as f64 / n_valid.max(1) as f64;
            let pairs_a =
                make_prompt_pairs(&model, &task, plan.n_pairs, CorruptMode::CorruptA, plan.seed)?;
            let pairs_b = make_prompt_pairs(
                &model,
                &task,
                plan.n_pairs,
                CorruptMode::CorruptB,
                plan.seed + 1,
            )?;
            Ok(SourceHandle {
                hash,
                task_name,
                ctx: SourceCtx::Model(Box::new(ModelCtx {
                    model,
                    task,
                    fit_prompts,
                    accuracy,
                    pairs_a,
                    pairs_b,
                })),
            })
        }
        ModelSource::Dump(dir) => {
            let hash = container_hash(dir, "helixlab capture")?;
            let (_desc, traces) = import_dump(dir)?;
            if traces.is_empty() {
                return Err(Error::invalid("dump contains no traces"));
            }
            let task_name =
                plan.task.clone().unwrap_or_else(|| traces[0].info.task.clone());
            Ok(SourceHandle { hash, task_name, ctx: SourceCtx::Dump(DumpCtx { traces }) })
        }
    }
}

/// Run every planned stage, reusing cached results where receipts match.
/// On stage failure the manifest still records the completed prefix.
pub fn run_clock_pipeline(plan: &ExperimentPlan) -> Result<ClockReport> {
    plan.validate()?;
    let source = load_source(plan)?;
    std::fs::create_dir_all(plan.out_dir.join("stages"))?;
    std::fs::create_dir_all(plan.out_dir.join("figures"))?;
    write_json(&plan.out_dir.join("config.json"), plan)?;

    let fingerprint = plan.fingerprint();
    let mut chain = source.hash.clone();
    let mut records: Vec<StageRecord> = Vec::new();
    let mut fragments: BTreeMap<StageKind, StageFragment> = BTreeMap::new();

    for &stage in &plan.stages {
        let key = stage_key(&fingerprint, &chain, stage);
        chain = key.clone();
        if let Some((record, fragment)) = load_cached(plan, stage, &key)? {
            fragments.insert(stage, fragment);
            records.push(record);
            continue;
        }
        match run_stage(plan, &source, stage, &key) {
            Ok((record, fragment)) => {
                fragments.insert(stage, fragment);
                records.push(record);
            }
            Err(e) => {
                records.push(StageRecord {
                    name: stage.name().into(),
                    key,
                    status: "failed".into(),
                    flags: vec![format!("error: {e}")],
                    files: Vec::new(),
                    figures: Vec::new(),
                });
                write_json(
                    &plan.out_dir.join("manifest.json"),
                    &build_manifest(plan, &source, &records),
                )?;
                return Err(e);
            }
        }
    }

    let report = build_report(plan, &source, &records, fragments);
    write_json(&plan.out_dir.join("report.json"), &report)?;
    write_json(&plan.out_dir.join("manifest.json"), &build_manifest(plan, &source, &records))?;
    Ok(report)
}

fn build_manifest(
    plan: &ExperimentPlan,
    source: &SourceHandle,
    records: &[StageRecord],
) -> RunManifest {
    RunManifest {
        kind: "clock_run".into(),
        metric: METRIC_ID.into(),
        task: source.task_name.clone(),
        seed: plan.seed,
        stages: records.to_vec(),
        figures: records.iter().flat_map(|r| r.figures.iter().cloned()).collect(),
    }
}

fn build_report(
    plan: &ExperimentPlan,
    source: &SourceHandle,
    records: &[StageRecord],
    fragments: BTreeMap<StageKind, StageFragment>,
) -> ClockReport {
    let mut report = ClockReport {
        task: source.task_name.clone(),
        seed: plan.seed,
        n_pairs: plan.n_pairs,
        metric: METRIC_ID.into(),
        stages: records
            .iter()
            .map(|r| StageStatusRow {
                name: r.name.clone(),
                status: r.status.clone(),
                flags: r.flags.clone(),
            })
            .collect(),
        capture: None,
        operand_fits: Vec::new(),
        last_token_fits: Vec::new(),
        patch_rows: Vec::new(),
        heads: None,
        staging: Vec::new(),
        neurons: None,
        figures: records.iter().flat_map(|r| r.figures.iter().cloned()).collect(),
    };
    for (_, fragment) in fragments {
        match fragment {
            StageFragment::Capture(s) => report.capture = Some(s),
            StageFragment::OperandFits(rows) => report.operand_fits = rows,
            StageFragment::LastTokenFits(rows) => report.last_token_fits = rows,
            StageFragment::PatchSweep(rows) => report.patch_rows = rows,
            StageFragment::Heads(cat) => report.heads = Some(cat),
            StageFragment::MlpStaging(rows) => report.staging = rows,
            StageFragment::Neurons(s) => report.neurons = Some(*s),
            StageFragment::Skipped => {}
        }
    }
    report
}

fn load_cached(
    plan: &ExperimentPlan,
    stage: StageKind,
    key: &str,
) -> Result<Option<(StageRecord, StageFragment)>> {
    let dir = plan.out_dir.join("stages").join(stage.name());
    let Ok(bytes) = std::fs::read(dir.join("stage.json")) else { return Ok(None) };
    let Ok(mut record) = serde_json::from_slice::<StageRecord>(&bytes) else { return Ok(None) };
    if record.key != key || record.status == "failed" {
        return Ok(None);
    }
    for file in &record.files {
        match std::fs::read(plan.out_dir.join(&file.path)) {
            Ok(content) if sha256_hex(&content) == file.sha256 => {}
            _ => return Ok(None),
        }
    }
    let Ok(rows) = std::fs::read(dir.join("rows.json")) else { return Ok(None) };
    let Ok(fragment) = serde_json::from_slice::<StageFragment>(&rows) else { return Ok(None) };
    if record.status == "completed" {
        record.status = "cached".into();
    }
    Ok(Some((record, fragment)))
}

/// Accumulates a stage's files, figures, and flags, then writes its receipt.
struct StageCtx<'a> {
    plan: &'a ExperimentPlan,
    stage: StageKind,
    key: String,
    flags: Vec<String>,
    files: Vec<FileRecord>,
    figures: Vec<FigureEntry>,
}

impl<'a> StageCtx<'a> {
    fn new(plan: &'a ExperimentPlan, stage: StageKind, key: &str) -> Self {
        StageCtx {
            plan,
            stage,
            key: key.to_string(),
            flags: Vec::new(),
            files: Vec::new(),
            figures: Vec::new(),
        }
    }

    fn rel_dir(&self) -> String {
        format!("stages/{}", self.stage.name())
    }

    fn write_rel(&mut self, rel: &str, text: &str) -> Result<()> {
        std::fs::write(self.plan.out_dir.join(rel), text)?;
        self.files.push(FileRecord { path: rel.to_string(), sha256: sha256_hex(text.as_bytes()) });
        Ok(())
    }

    fn write_data(&mut self, name: &str, text: &str) -> Result<()> {
        let rel = format!("{}/{name}", self.rel_dir());
        self.write_rel(&rel, text)
    }

    fn figure(&mut self, name: &str, data: &PlotData, kind: PlotKind, title: &str) -> Result<()> {
        let csv_rel = format!("{}/fig_{name}.csv", self.rel_dir());
        self.write_rel(&csv_rel.clone(), &data.to_csv())?;
        let svg_rel = format!("figures/{name}.svg");
        let svg = render_plot(data, kind, title)?;
        self.write_rel(&svg_rel.clone(), &svg)?;
        self.figures.push(FigureEntry {
            file: svg_rel,
            data: csv_rel,
            kind: kind.as_str().to_string(),
            title: title.to_string(),
        });
        Ok(())
    }

    fn finish(
        mut self,
        status: &'static str,
        fragment: StageFragment,
    ) -> Result<(StageRecord, StageFragment)> {
        let mut rows = serde_json::to_string_pretty(&fragment)?;
        rows.push('\n');
        self.write_data("rows.json", &rows)?;
        let record = StageRecord {
            name: self.stage.name().into(),
            key: self.key,
            status: status.into(),
            flags: self.flags,
            files: self.files,
            figures: self.figures,
        };
        let mut receipt = serde_json::to_string_pretty(&record)?;
        receipt.push('\n');
        std::fs::write(
            self.plan.out_dir.join(format!("stages/{}/stage.json", record.name)),
            receipt,
        )?;
        Ok((record, fragment))
    }
}

fn run_stage(
    plan: &ExperimentPlan,
    source: &SourceHandle,
    stage: StageKind,
    key: &str,
) -> Result<(StageRecord, StageFragment)> {
    std::fs::create_dir_all(plan.out_dir.join("stages").join(stage.name()))?;
    let mut ctx = StageCtx::new(plan, stage, key);
    let mut body = || -> Result<(&'static str, StageFragment)> {
        match (&source.ctx, stage) {
            (_, StageKind::Capture) => stage_capture(source, &mut ctx),
            (SourceCtx::Model(m), StageKind::OperandFits) => stage_operand_fits(plan, m, &mut ctx),
            (SourceCtx::Model(m), StageKind::LastTokenFits) => {
                stage_last_token_fits(plan, m, &mut ctx)
            }
            (SourceCtx::Model(m), StageKind::PatchSweep) => stage_patch_sweep(m, &mut ctx),
            (SourceCtx::Model(m), StageKind::Heads) => stage_heads(plan, m, &mut ctx),
            (SourceCtx::Model(m), StageKind::MlpStaging) => stage_mlp_staging(plan, m, &mut ctx),
            (SourceCtx::Model(m), StageKind::Neurons) => stage_neurons(plan, m, &mut ctx),
            (SourceCtx::Dump(d), StageKind::OperandFits) => {
                stage_operand_fits_dump(plan, d, &mut ctx)
            }
            (SourceCtx::Dump(d), StageKind::LastTokenFits) => {
                stage_last_token_fits_dump(plan, d, &mut ctx)
            }
            (SourceCtx::Dump(_), StageKind::PatchSweep | StageKind::Heads | StageKind::MlpStaging) => {
                ctx.flags.push("dump source carries no model to patch".into());
                Ok(("skipped", StageFragment::Skipped))
            }
            (SourceCtx::Dump(_), StageKind::Neurons) => {
                ctx.flags
                    .push("dump source carries no gradients; attribution and patching need a checkpoint".into());
                Ok(("skipped", StageFragment::Skipped))
            }
        }
    };
    match body() {
        Ok((status, fragment)) => ctx.finish(status, fragment),
        Err(e) => Err(Error::StageFailed { stage: stage.name().into(), source: Box::new(e) }),
    }
}

fn pairs_csv(pairs: &[PromptPair]) -> String {
    let mut out = String::from("clean_a,clean_b,corr_a,corr_b,answer_token\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.clean.0, p.clean.1, p.corrupted.0, p.corrupted.1, p.answer_token
        ));
    }
    out
}

fn stage_capture(
    source: &SourceHandle,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let summary = match &source.ctx {
        SourceCtx::Model(m) => {
            let ceiling = restoration_ceiling(&m.model, &m.task, &m.pairs_a)?;
            let mut csv = String::from("stat,value\n");
            csv.push_str(&format!("accuracy,{}\n", m.accuracy));
            csv.push_str(&format!("n_correct,{}\n", m.fit_prompts.len()));
            csv.push_str(&format!("n_pairs_a,{}\n", m.pairs_a.len()));
            csv.push_str(&format!("n_pairs_b,{}\n", m.pairs_b.len()));
            csv.push_str(&format!("restoration_ceiling,{ceiling}\n"));
            ctx.write_data("data.csv", &csv)?;
            ctx.write_data("pairs_a.csv", &pairs_csv(&m.pairs_a))?;
            ctx.write_data("pairs_b.csv", &pairs_csv(&m.pairs_b))?;
            CaptureSummary {
                accuracy: Some(m.accuracy),
                n_correct: Some(m.fit_prompts.len()),
                n_pairs_a: Some(m.pairs_a.len()),
                n_pairs_b: Some(m.pairs_b.len()),
                restoration_ceiling: Some(ceiling),
                n_traces: None,
                n_sites: None,
            }
        }
        SourceCtx::Dump(d) => {
            let sites: BTreeSet<SiteKey> =
                d.traces.iter().flat_map(|t| t.keys().cloned()).collect();
            ctx.flags.push("dump source: summarizing imported traces".into());
            let mut csv = String::from("stat,value\n");
            csv.push_str(&format!("n_traces,{}\n", d.traces.len()));
            csv.push_str(&format!("n_sites,{}\n", sites.len()));
            ctx.write_data("data.csv", &csv)?;
            CaptureSummary {
                accuracy: None,
                n_correct: None,
                n_pairs_a: None,
                n_pairs_b: None,
                restoration_ceiling: None,
                n_traces: Some(d.traces.len()),
                n_sites: Some(sites.len()),
            }
        }
    };
    Ok(("completed", StageFragment::Capture(summary)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fit_rows_csv(rows: &[FitLdRow]) -> String {
    let mut out = String::from("role,layer,basis,r2,ld,layer_ld\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.role,
            r.layer,
            r.basis,
            r.r2,
            fmt_opt(r.ld),
            fmt_opt(r.layer_ld)
        ));
    }
    out
}

/// Layer-indexed series per basis; LD when every row has one, else r2.
fn fit_rows_figure(rows: &[FitLdRow], role: &str) -> Result<Option<(PlotData, &'static str)>> {
    let rows: Vec<&FitLdRow> = rows.iter().filter(|r| r.role == role).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let layers: Vec<usize> = {
        let set: BTreeSet<usize> = rows.iter().map(|r| r.layer).collect();
        set.into_iter().collect()
    };
    let mut bases: Vec<String> = Vec::new();
    for r in &rows {
        if !bases.contains(&r.basis) {
            bases.push(r.basis.clone());
        }
    }
    let use_ld = rows.iter().all(|r| r.ld.is_some());
    let mut columns: Vec<(String, Vec<f64>)> =
        vec![("layer".into(), layers.iter().map(|&l| l as f64).collect())];
    for basis in &bases {
        let mut col = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let row = rows
                .iter()
                .find(|r| r.layer == layer && &r.basis == basis)
                .ok_or_else(|| Error::invalid("incomplete fit grid"))?;
            col.push(if use_ld { row.ld.unwrap_or(row.r2) } else { row.r2 });
        }
        columns.push((basis.clone(), col));
    }
    if use_ld && rows.iter().all(|r| r.layer_ld.is_some()) {
        let mut col = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let row = rows.iter().find(|r| r.layer == layer).unwrap();
            col.push(row.layer_ld.unwrap());
        }
        columns.push(("full_layer".into(), col));
    }
    Ok(Some((PlotData::new(columns)?, if use_ld { "patch ld" } else { "r2" })))
}

/// The basis families every fit comparison reports, in a fixed order.
fn basis_specs(k: usize) -> Vec<(String, BasisSpec, bool)> {
    let periods: Vec<f64> = DEFAULT_PERIODS.iter().copied().take(k).collect();
    vec![
        ("helix".into(), BasisSpec::helix(&periods), false),
        ("circle".into(), BasisSpec::circle(&periods), false),
        ("polynomial".into(), BasisSpec::polynomial(k), false),
        ("pca".into(), BasisSpec::pca_baseline(k), false),
        ("helix_shuffled".into(), BasisSpec::helix(&periods), true),
    ]
}

fn stage_operand_fits(
    plan: &ExperimentPlan,
    m: &ModelCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let mut rows = Vec::new();
    for layer in 0..m.model.config.n_layers {
        for (role, pairs) in [(TokenRole::A, &m.pairs_a), (TokenRole::B, &m.pairs_b)] {
            let key = SiteKey::new(layer, Site::ResidPre, role.position());
            let bundle = compare_fit_patches(
                &m.model,
                &m.task,
                key,
                role,
                &m.fit_prompts,
                pairs,
                plan.k,
                plan.pca_dim,
                plan.seed + 7,
            )?;
            for e in &bundle.entries {
                rows.push(FitLdRow {
                    role: role.as_str().into(),
                    layer,
                    basis: e.basis.clone(),
                    r2: e.r2,
                    ld: Some(e.ld),
                    layer_ld: Some(bundle.layer_ld),
                });
            }
        }
    }
    ctx.write_data("data.csv", &fit_rows_csv(&rows))?;
    for role in ["a", "b"] {
        if let Some((data, measure)) = fit_rows_figure(&rows, role)? {
            ctx.figure(
                &format!("operand_fit_{role}"),
                &data,
                PlotKind::Line,
                &format!("operand {role}: {measure} by basis"),
            )?;
        }
    }
    Ok(("completed", StageFragment::OperandFits(rows)))
}

const JOINT_SETS: [(&str, &[JointPart]); 5] = [
    ("helix(a)", &[JointPart::A]),
    ("helix(b)", &[JointPart::B]),
    ("helix(a+b)", &[JointPart::Sum]),
    ("helix(a|b)", &[JointPart::A, JointPart::B]),
    ("helix(a|b|a+b)", &JOINT_ALL),
];

fn stage_last_token_fits(
    plan: &ExperimentPlan,
    m: &ModelCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let spec = BasisSpec::helix(&plan.periods());
    let mut rows = Vec::new();
    // The last-token stream before layer 0 is the same vector for every
    // prompt, so fits start at the residual after the first layer; layer
    // n_layers addresses the final pre-unembed stream.
    for layer in 1..=m.model.config.n_layers {
        let key = SiteKey::new(layer, Site::ResidPre, EQ_POS);
        let vectors = collect_pair_vectors(&m.model, &m.task, key, &m.fit_prompts)?;
        let layer_ld = activation_patch(&m.model, &m.task, &Component::site(key), &m.pairs_a)?;
        for (label, parts) in JOINT_SETS {
            let fit = fit_joint(&vectors, &spec, plan.pca_dim, parts)?;
            let ld = patch_with_joint_fit(&m.model, &m.task, key, &fit, &m.pairs_a)?;
            rows.push(FitLdRow {
                role: "last".into(),
                layer,
                basis: label.into(),
                r2: fit.r2,
                ld: Some(ld),
                layer_ld: Some(layer_ld),
            });
        }
    }
    ctx.write_data("data.csv", &fit_rows_csv(&rows))?;
    if let Some((data, measure)) = fit_rows_figure(&rows, "last")? {
        ctx.figure(
            "last_token_fit",
            &data,
            PlotKind::Line,
            &format!("last token: {measure} by fitted parts"),
        )?;
    }
    Ok(("completed", StageFragment::LastTokenFits(rows)))
}

fn dump_layers(traces: &[Trace], site: Site, position: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = traces
        .iter()
        .flat_map(|t| t.keys())
        .filter(|k| k.site == site && k.position == position)
        .map(|k| k.layer)
        .collect();
    set.into_iter().collect()
}

fn dump_role_vectors(
    traces: &[Trace],
    key: &SiteKey,
    role: TokenRole,
) -> Result<BTreeMap<i64, crate::numerics::Tensor>> {
    let mut acc: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    for t in traces {
        let Some(v) = t.get(key) else { continue };
        let data = v.data();
        let value = role.value(t.info.a, t.info.b);
        let entry = acc.entry(value).or_insert_with(|| (vec![0.0; data.len()], 0));
        if entry.0.len() != data.len() {
            return Err(Error::invalid("inconsistent activation widths in dump"));
        }
        for (s, &x) in entry.0.iter_mut().zip(data) {
            *s += x as f64;
        }
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(value, (sum, n))| {
            let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
            (value, crate::numerics::Tensor::vector(mean))
        })
        .collect())
}

fn dump_pair_vectors(
    traces: &[Trace],
    key: &SiteKey,
) -> BTreeMap<(i64, i64), crate::numerics::Tensor> {
    let mut out = BTreeMap::new();
    for t in traces {
        if let Some(v) = t.get(key) {
            out.insert((t.info.a, t.info.b), v.clone());
        }
    }
    out
}

fn stage_operand_fits_dump(
    plan: &ExperimentPlan,
    d: &DumpCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let specs = basis_specs(plan.k);
    let mut rows = Vec::new();
    for role in [TokenRole::A, TokenRole::B] {
        for layer in dump_layers(&d.traces, Site::ResidPre, role.position()) {
            let key = SiteKey::new(layer, Site::ResidPre, role.position());
            let vectors = dump_role_vectors(&d.traces, &key, role)?;
            if vectors.len() < 2 {
                continue;
            }
            for (name, spec, shuffled) in &specs {
                let source = if *shuffled {
                    shuffle_value_labels(&vectors, plan.seed + 7)
                } else {
                    vectors.clone()
                };
                let fit = match fit_manifold(&source, spec, plan.pca_dim) {
                    Ok(fit) => fit,
                    Err(Error::RankDeficient { .. }) => {
                        ctx.flags
                            .push(format!("layer {layer} has constant activations; skipped"));
                        break;
                    }
                    Err(e) => return Err(e),
                };
                rows.push(FitLdRow {
                    role: role.as_str().into(),
                    layer,
                    basis: name.clone(),
                    r2: fit.r2,
                    ld: None,
                    layer_ld: None,
                });
            }
        }
    }
    ctx.flags.push("dump source: regression quality only, no causal patching".into());
    if rows.is_empty() {
        ctx.flags.push("dump holds no resid_pre activations at operand positions".into());
    }
    ctx.write_data("data.csv", &fit_rows_csv(&rows))?;
    for role in ["a", "b"] {
        if let Some((data, measure)) = fit_rows_figure(&rows, role)? {
            ctx.figure(
                &format!("operand_fit_{role}"),
                &data,
                PlotKind::Line,
                &format!("operand {role}: {measure} by basis"),
            )?;
        }
    }
    Ok(("completed", StageFragment::OperandFits(rows)))
}

fn stage_last_token_fits_dump(
    plan: &ExperimentPlan,
    d: &DumpCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let spec = BasisSpec::helix(&plan.periods());
    let mut rows = Vec::new();
    for layer in dump_layers(&d.traces, Site::ResidPre, EQ_POS) {
        let key = SiteKey::new(layer, Site::ResidPre, EQ_POS);
        let vectors = dump_pair_vectors(&d.traces, &key);
        if vectors.is_empty() {
            continue;
        }
        for (label, parts) in JOINT_SETS {
            let fit = match fit_joint(&vectors, &spec, plan.pca_dim, parts) {
                Ok(fit) => fit,
                Err(Error::RankDeficient { .. }) => {
                    ctx.flags.push(format!("layer {layer} has constant activations; skipped"));
                    break;
                }
                Err(e) => return Err(e),
            };
            rows.push(FitLdRow {
                role: "last".into(),
                layer,
                basis: label.into(),
                r2: fit.r2,
                ld: None,
                layer_ld: None,
            });
        }
    }
    ctx.flags.push("dump source: regression quality only, no causal patching".into());
    if rows.is_empty() {
        ctx.flags.push("dump holds no resid_pre activations at the last token".into());
    }
    ctx.write_data("data.csv", &fit_rows_csv(&rows))?;
    if let Some((data, measure)) = fit_rows_figure(&rows, "last")? {
        ctx.figure(
            "last_token_fit",
            &data,
            PlotKind::Line,
            &format!("last token: {measure} by fitted parts"),
        )?;
    }
    Ok(("completed", StageFragment::LastTokenFits(rows)))
}

fn stage_patch_sweep(m: &ModelCtx, ctx: &mut StageCtx) -> Result<(&'static str, StageFragment)> {
    let n_layers = m.model.config.n_layers;
    let mut comps = Vec::with_capacity(2 * n_layers);
    for layer in 0..n_layers {
        comps.push(Component::site(SiteKey::new(layer, Site::AttnOut, EQ_POS)));
        comps.push(Component::mlp(layer, EQ_POS));
    }
    let report = patch_sweep(&m.model, &m.task, &comps, &m.pairs_a, true)?;
    ctx.write_data("data.csv", &report.to_csv())?;

    let mut layer_col = Vec::with_capacity(n_layers);
    let mut attn_te = Vec::with_capacity(n_layers);
    let mut attn_de = Vec::with_capacity(n_layers);
    let mut mlp_te = Vec::with_capacity(n_layers);
    let mut mlp_de = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let attn = &report.rows[2 * layer];
        let mlp = &report.rows[2 * layer + 1];
        layer_col.push(layer as f64);
        attn_te.push(attn.te);
        attn_de.push(attn.de.unwrap_or(0.0));
        mlp_te.push(mlp.te);
        mlp_de.push(mlp.de.unwrap_or(0.0));
    }
    let data = PlotData::new(vec![
        ("layer".into(), layer_col),
        ("attn_te".into(), attn_te),
        ("attn_de".into(), attn_de),
        ("mlp_te".into(), mlp_te),
        ("mlp_de".into(), mlp_de),
    ])?;
    ctx.figure("patch_sweep", &data, PlotKind::Line, "attention and mlp effects at the last token")?;
    Ok(("completed", StageFragment::PatchSweep(report.rows)))
}

fn head_label_str(label: HeadLabel) -> &'static str {
    match label {
        HeadLabel::Operand => "operand",
        HeadLabel::Answer => "answer",
        HeadLabel::Mixed => "mixed",
    }
}

fn stage_heads(
    plan: &ExperimentPlan,
    m: &ModelCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let heads: Vec<(usize, usize)> = (0..m.model.config.n_layers)
        .flat_map(|l| (0..m.model.config.n_heads).map(move |h| (l, h)))
        .collect();
    let spec = BasisSpec::helix(&plan.periods());
    let cat = categorize_heads(
        &m.model,
        &m.task,
        &heads,
        &m.pairs_a,
        &m.fit_prompts,
        &spec,
        plan.pca_dim,
        plan.mixed_heads.min(heads.len()),
    )?;
    let mut csv =
        String::from("layer,head,te,de,r_operand,r_answer,c_operand,c_answer,label,excluded\n");
    for h in &cat.heads {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            h.layer,
            h.head,
            h.te,
            h.de,
            h.r_operand,
            h.r_answer,
            h.c_operand,
            h.c_answer,
            head_label_str(h.label),
            h.excluded
        ));
    }
    ctx.write_data("data.csv", &csv)?;
    ctx.flags.push(format!("categorized patch recovers {:.4} of true", cat.recovered_fraction()));
    let data = PlotData::new(vec![
        ("c_operand".into(), cat.heads.iter().map(|h| h.c_operand).collect()),
        ("c_answer".into(), cat.heads.iter().map(|h| h.c_answer).collect()),
    ])?;
    ctx.figure("head_confidence", &data, PlotKind::Scatter, "head role confidences")?;
    Ok(("completed", StageFragment::Heads(cat)))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn stage_mlp_staging(
    plan: &ExperimentPlan,
    m: &ModelCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let spec = BasisSpec::helix(&plan.periods());
    let mut rows = Vec::new();
    for layer in 0..m.model.config.n_layers {
        let comp = Component::mlp(layer, EQ_POS);
        let te = activation_patch(&m.model, &m.task, &comp, &m.pairs_a)?;
        let de = path_patch_direct(&m.model, &m.task, &comp, &m.pairs_a)?;
        let key = SiteKey::new(layer, Site::MlpOut, EQ_POS);
        let vectors = collect_pair_vectors(&m.model, &m.task, key, &m.fit_prompts)?;
        let fit = fit_joint(&vectors, &spec, plan.pca_dim, &[JointPart::Sum])?;
        let fit_ld = patch_with_joint_fit(&m.model, &m.task, key, &fit, &m.pairs_a)?;
        rows.push(StagingRow {
            layer,
            te,
            de,
            fit_r2: fit.r2,
            fit_ld,
            de_over_te: ratio(de, te),
            fit_over_te: ratio(fit_ld, te),
        });
    }
    let mut csv = String::from("layer,te,de,fit_r2,fit_ld,de_over_te,fit_over_te\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer, r.te, r.de, r.fit_r2, r.fit_ld, r.de_over_te, r.fit_over_te
        ));
    }
    ctx.write_data("data.csv", &csv)?;
    let data = PlotData::new(vec![
        ("layer".into(), rows.iter().map(|r| r.layer as f64).collect()),
        ("te".into(), rows.iter().map(|r| r.te).collect()),
        ("de".into(), rows.iter().map(|r| r.de).collect()),
        ("fit_ld".into(), rows.iter().map(|r| r.fit_ld).collect()),
    ])?;
    ctx.figure("mlp_staging", &data, PlotKind::Line, "mlp effects and a+b reconstruction")?;
    Ok(("completed", StageFragment::MlpStaging(rows)))
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn curve_ks(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> =
        [1, 2, 4, 8, 16, 32, 64, 128, 256, 512].iter().copied().filter(|&k| k < n).collect();
    if n > 0 {
        ks.push(n);
    }
    ks
}

fn stage_neurons(
    plan: &ExperimentPlan,
    m: &ModelCtx,
    ctx: &mut StageCtx,
) -> Result<(&'static str, StageFragment)> {
    let n_layers = m.model.config.n_layers;
    let d_mlp = m.model.config.d_mlp;
    let mut comps = Vec::with_capacity(n_layers * d_mlp);
    for layer in 0..n_layers {
        for j in 0..d_mlp {
            comps.push(Component::neuron(layer, j, EQ_POS));
        }
    }
    let attr = attribution_patch(&m.model, &m.task, &comps, &m.pairs_a)?;

    let layer = (0..n_layers)
        .max_by(|&x, &y| {
            let sx: f64 = attr[x * d_mlp..(x + 1) * d_mlp].iter().map(|a| a.abs()).sum();
            let sy: f64 = attr[y * d_mlp..(y + 1) * d_mlp].iter().map(|a| a.abs()).sum();
            sx.total_cmp(&sy)
        })
        .unwrap_or(0);
    ctx.flags.push(format!("layer {layer} selected by attribution mass"));

    let mut indices: Vec<usize> = (0..d_mlp).collect();
    indices.sort_by(|&x, &y| {
        attr[layer * d_mlp + y]
            .abs()
            .total_cmp(&attr[layer * d_mlp + x].abs())
            .then(x.cmp(&y))
    });
    indices.truncate(plan.max_neurons.min(d_mlp));

    let sel: Vec<Component> =
        indices.iter().map(|&j| Component::neuron(layer, j, EQ_POS)).collect();
    let tes = activation_patch_many(&m.model, &m.task, &sel, &m.pairs_a)?;
    let des = direct_effect_many(&m.model, &m.task, &sel, &m.pairs_a)?;

    let grids = capture_neuron_grids(&m.model, &m.task, layer, &indices)?;
    let top = top_grid_periods(&grids, 4)?;
    if top.len() < 4 {
        return Err(Error::Insufficient { what: "grid periods", need: 4, have: top.len() });
    }
    let periods = [top[0], top[1], top[2], top[3]];
    let fits = fit_preact_many(&grids, periods, plan.seed)?;

    let mut table = Vec::with_capacity(indices.len());
    let mut fits_map: BTreeMap<usize, PreactParams> = BTreeMap::new();
    let mut dominant = Vec::with_capacity(indices.len());
    for (i, &j) in indices.iter().enumerate() {
        let mut nf = NeuronFit::new(layer, j, fits[i].clone());
        nf.te = Some(tes[i]);
        nf.de = Some(des[i]);
        fits_map.insert(j, fits[i].params.clone());
        table.push(nf);
        dominant.push(preact_fourier(&grids[i])?.dominant(GridAxis::Sum).map(|b| b.period));
    }
    let mut csv = NeuronFit::csv_header();
    csv.push('\n');
    for nf in &table {
        csv.push_str(&nf.csv_row());
        csv.push('\n');
    }
    ctx.write_data("data.csv", &csv)?;

    let rows: Vec<NeuronTrendRow> = indices
        .iter()
        .enumerate()
        .map(|(i, &j)| NeuronTrendRow {
            index: j,
            attribution: attr[layer * d_mlp + j],
            te: tes[i],
            de: des[i],
            nrmse: fits[i].nrmse,
            answer_fraction: fits[i].params.answer_fraction(),
            dominant_period: dominant[i],
        })
        .collect();
    let xs: Vec<f64> = rows.iter().filter(|r| r.nrmse.is_some()).map(|r| r.te.abs()).collect();
    let ys: Vec<f64> = rows.iter().filter_map(|r| r.nrmse).collect();
    let te_nrmse_correlation = pearson(&xs, &ys);
    let mean_answer_fraction =
        rows.iter().map(|r| r.answer_fraction).sum::<f64>() / rows.len().max(1) as f64;

    let mut order = indices.clone();
    order.sort_by(|&x, &y| {
        let tx = tes[indices.iter().position(|&j| j == x).unwrap()].abs();
        let ty = tes[indices.iter().position(|&j| j == y).unwrap()].abs();
        ty.total_cmp(&tx).then(x.cmp(&y))
    });
    let n_eval = plan.eval_prompts.min(m.fit_prompts.len());
    let eval = sample_correct_prompts(&m.model, &m.task, n_eval, plan.seed + 3)?;
    let ks = curve_ks(order.len());
    let curve = patch_fitted_neurons(&m.model, &m.task, layer, &order, &fits_map, &eval, &ks)?;

    let n_ks = curve.ks.len();
    let data = PlotData::new(vec![
        ("k".into(), curve.ks.iter().map(|&k| k as f64).collect()),
        ("true_preact".into(), curve.true_accuracy.clone()),
        ("fitted_preact".into(), curve.fitted_accuracy.clone()),
        ("all_mean".into(), vec![curve.all_mean_accuracy; n_ks]),
        ("model".into(), vec![curve.model_accuracy; n_ks]),
    ])?;
    ctx.figure("neuron_patch_curve", &data, PlotKind::Line, "top-k neuron patching accuracy")?;

    if !xs.is_empty() {
        let data = PlotData::new(vec![("abs_te".into(), xs), ("nrmse".into(), ys)])?;
        ctx.figure("neuron_fit_vs_te", &data, PlotKind::Scatter, "fit error vs total effect")?;
    }

    let mut counts = vec![0usize; periods.len() + 1];
    for p in dominant.iter().flatten() {
        let mut best: Option<usize> = None;
        for (j, r) in periods.iter().enumerate() {
            let rel = (p - r).abs() / r;
            if rel <= PERIOD_TOL && best.map_or(true, |b| rel < (p - periods[b]).abs() / periods[b])
            {
                best = Some(j);
            }
        }
        match best {
            Some(j) => counts[j] += 1,
            None => *counts.last_mut().unwrap() += 1,
        }
    }
    let mut period_col: Vec<f64> = periods.to_vec();
    period_col.push(0.0);
    let data = PlotData::new(vec![
        ("period".into(), period_col),
        ("count".into(), counts.iter().map(|&c| c as f64).collect()),
    ])?;
    ctx.figure("neuron_periods", &data, PlotKind::Histogram, "dominant a+b periods (0 = other)")?;

    let summary = NeuronStageSummary {
        layer,
        periods: periods.to_vec(),
        rows,
        te_nrmse_correlation,
        mean_answer_fraction,
        curve,
    };
    Ok(("completed", StageFragment::Neurons(Box::new(summary))))
}

/// Reload a run's manifest.
pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|_| Error::MissingArtifact {
        path: path.display().to_string(),
        producer: "helixlab clock".into(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Re-render every figure in a run directory from its stored data frame.
/// Output is byte-identical to the original render.
pub fn render_figures(dir: &Path) -> Result<Vec<String>> {
    let manifest = load_manifest(dir)?;
    let mut written = Vec::with_capacity(manifest.figures.len());
    for fig in &manifest.figures {
        let data = PlotData::read_csv(&dir.join(&fig.data))?;
        let kind: PlotKind = fig.kind.parse()?;
        let svg = render_plot(&data, kind, &fig.title)?;
        let out = dir.join(&fig.file);
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&out, &svg)?;
        written.push(fig.file.clone());
    }
    Ok(written)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskTableRow {
    pub task: String,
    pub included: bool,
    pub note: String,
    pub accuracy: f64,
    /// Best full-layer patch LD across layers.
    pub full: Option<f64>,
    pub pca: Option<f64>,
    pub helix: Option<f64>,
    pub circle: Option<f64>,
    pub polynomial: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskTable {
    pub metric: String,
    pub n_pairs: usize,
    pub seed: u64,
    pub rows: Vec<TaskTableRow>,
}

impl TaskTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,included,note,accuracy,full,pca,helix,circle,polynomial\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.task,
                r.included,
                r.note,
                r.accuracy,
                fmt_opt(r.full),
                fmt_opt(r.pca),
                fmt_opt(r.helix),
                fmt_opt(r.circle),
                fmt_opt(r.polynomial)
            ));
        }
        out
    }
}

/// Fit/patch comparison of one checkpoint across several candidate tasks.
/// Tasks the model cannot express (vocab mismatch) or cannot perform
/// (accuracy below the plan threshold) are excluded with a note; for the
/// rest the best-across-layers LD per basis is reported at the first
/// operand's position.
pub fn run_task_table(plan: &ExperimentPlan, tasks: &[TaskSpec]) -> Result<TaskTable> {
    let ModelSource::Checkpoint(dir) = &plan.source else {
        return Err(Error::invalid("task tables need a checkpoint source"));
    };
    plan.validate()?;
    let (model, _meta) = load_checkpoint(dir)?;
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let name = task.name().to_string();
        let excluded = |note: String, accuracy: f64| TaskTableRow {
            task: name.clone(),
            included: false,
            note,
            accuracy,
            full: None,
            pca: None,
            helix: None,
            circle: None,
            polynomial: None,
        };
        if task.vocab_size() != model.config.vocab_size {
            rows.push(excluded(
                format!(
                    "vocab mismatch: task needs {} and model has {}",
                    task.vocab_size(),
                    model.config.vocab_size
                ),
                0.0,
            ));
            continue;
        }
        let correct = correct_prompts(&model, task)?;
        let accuracy = correct.len() as f64 / task.valid_pairs().len().max(1) as f64;
        if accuracy < plan.accuracy_threshold {
            rows.push(excluded(
                format!("accuracy {accuracy:.3} below threshold {}", plan.accuracy_threshold),
                accuracy,
            ));
            continue;
        }
        let pairs = make_prompt_pairs(&model, task, plan.n_pairs, CorruptMode::CorruptA, plan.seed)?;
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        let mut full = f64::NEG_INFINITY;
        for layer in 0..model.config.n_layers {
            let key = SiteKey::new(layer, Site::ResidPre, TokenRole::A.position());
            let bundle = compare_fit_patches(
                &model,
                task,
                key,
                TokenRole::A,
                &correct,
                &pairs,
                plan.k,
                plan.pca_dim,
                plan.seed + 7,
            )?;
            full = full.max(bundle.layer_ld);
            for e in &bundle.entries {
                for basis in ["helix", "circle", "polynomial", "pca"] {
                    if e.basis == basis {
                        let v = best.entry(basis).or_insert(f64::NEG_INFINITY);
                        *v = v.max(e.ld);
                    }
                }
            }
        }
        rows.push(TaskTableRow {
            task: name,
            included: true,
            note: String::new(),
            accuracy,
            full: Some(full),
            pca: best.get("pca").copied(),
            helix: best.get("helix").copied(),
            circle: best.get("circle").copied(),
            polynomial: best.get("polynomial").copied(),
        });
    }
    Ok(TaskTable { metric: METRIC_ID.into(), n_pairs: plan.n_pairs, seed: plan.seed, rows })
}
