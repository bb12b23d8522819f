//! File-to-file stages and the whole-pipeline runner used by the binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::core_knowledge::{self, extract_core_knowledge, mean_gradient, KMode, PcaOptions};
use crate::error::{Error, Result};
use crate::feature_store::{
    write_atomic, DegeneratePolicy, FeatureKind, FeatureSet, GradientFeatureMatrix, SampleId,
};
use crate::projection::{ProjectionSketch, DEFAULT_D_OUT};
use crate::toy::{self, AdamState, CorpusSpec, EvalResult, Sample, SyntheticCorpus, ToyModel, TrainConfig};
use crate::walk::{audit_constraints, run_selection, select_by_similarity, SelectedSample, Selection, SimilarityTarget, WalkConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub seed: u64,
    pub d_out: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            seed: 0,
            d_out: DEFAULT_D_OUT,
        }
    }
}

/// Synthetic-corpus source for `run`, replacing `train`/`validation` paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n: usize,
    pub tasks: usize,
    pub seed: u64,
    pub target_task: usize,
    pub validation_n: usize,
    pub eval_n: usize,
    pub warmup_n: usize,
    pub warmup: TrainConfig,
    pub finetune: TrainConfig,
    pub corpus: CorpusSpec,
    /// Fine-tune on the selection (and a same-size random subset) and report target loss.
    pub evaluate: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n: 4000,
            tasks: 4,
            seed: 0,
            target_task: 0,
            validation_n: 100,
            eval_n: 1000,
            warmup_n: 500,
            warmup: TrainConfig::default(),
            // Short and gentle: long fine-tuning on any 200 samples drifts
            // away from what the selection was scored against.
            finetune: TrainConfig {
                epochs: 2,
                lr: 0.005,
                ..TrainConfig::default()
            },
            corpus: CorpusSpec::default(),
            evaluate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub walk: WalkConfig,
    pub train: Option<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub toy: Option<ToyConfig>,
    pub projection: Option<ProjectionConfig>,
    pub k_mode: KMode,
    pub centered: bool,
    pub no_graph: bool,
    pub drop_degenerate: bool,
    pub out_dir: PathBuf,
    pub log_level: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            walk: WalkConfig::default(),
            train: None,
            validation: Vec::new(),
            toy: None,
            projection: None,
            k_mode: KMode::CumulativeVariance,
            centered: true,
            no_graph: false,
            drop_degenerate: false,
            out_dir: PathBuf::from("g2is-out"),
            log_level: None,
        }
    }
}

impl RunConfig {
    /// Parses JSON or TOML by file extension (TOML unless `.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn pca_options(&self) -> PcaOptions {
        PcaOptions {
            k_ratio: self.walk.k_ratio,
            k_mode: self.k_mode,
            centered: self.centered,
        }
    }

    pub fn policy(&self) -> DegeneratePolicy {
        if self.drop_degenerate {
            DegeneratePolicy::Drop
        } else {
            DegeneratePolicy::Reject
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.walk.validate()?;
        match (&self.toy, &self.train) {
            (Some(_), Some(_)) => return Err(Error::Config("set either `toy` or `train`, not both".into())),
            (None, None) => return Err(Error::Config("no input: set `train` + `validation` or `toy`".into())),
            (None, Some(train)) => {
                if self.validation.is_empty() && !self.no_graph {
                    return Err(Error::Config("`validation` is required".into()));
                }
                for p in std::iter::once(train).chain(&self.validation) {
                    require_exists(p)?;
                }
            }
            (Some(t), None) => {
                if t.target_task >= t.tasks {
                    return Err(Error::Config(format!("target_task {} >= tasks {}", t.target_task, t.tasks)));
                }
                if t.warmup_n > t.n {
                    return Err(Error::Config("warmup_n exceeds corpus size".into()));
                }
            }
        }
        if self.no_graph && self.validation.is_empty() && self.toy.is_none() {
            return Err(Error::Config("`no_graph` needs validation features for the mean gradient".into()));
        }
        Ok(())
    }
}

pub fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("input path does not exist: {}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256,
    })
}

/// Config echo plus content hashes of everything a command read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn write_run_manifest(
    path: &Path,
    command: &str,
    config: &impl Serialize,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = RunManifest {
        tool: "g2is".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: serde_json::to_value(config).map_err(|e| Error::json(path, e))?,
        inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
    };
    write_json(path, &manifest)
}

/// `<output>.run.json`, the manifest location for single-stage commands.
pub fn run_manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    output.with_file_name(name)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn project_file(
    input: &Path,
    output: &Path,
    sketch: &ProjectionSketch,
    policy: DegeneratePolicy,
) -> Result<()> {
    let set = FeatureSet::load(input, policy)?;
    let projected = sketch.project(&set.matrix)?;
    FeatureSet::new(projected, set.manifest)?.save(output)
}

/// Loads validation files and stacks them in argument order.
pub fn load_validation(paths: &[PathBuf], policy: DegeneratePolicy) -> Result<GradientFeatureMatrix> {
    if paths.is_empty() {
        return Err(Error::Config("no validation features given".into()));
    }
    let parts = paths
        .iter()
        .map(|p| FeatureSet::load(p, policy).map(|s| s.matrix))
        .collect::<Result<Vec<_>>>()?;
    GradientFeatureMatrix::concat(&parts)
}

pub fn pca_files(
    inputs: &[PathBuf],
    opts: &PcaOptions,
    output: &Path,
    policy: DegeneratePolicy,
) -> Result<core_knowledge::CoreKnowledge> {
    let validation = load_validation(inputs, policy)?;
    let ck = extract_core_knowledge(&validation, opts)?;
    core_knowledge::save_core(&ck, output)?;
    log::info!(
        "kept {} of rank {} components ({:.3} of variance)",
        ck.len(),
        ck.rank,
        ck.explained_ratio()
    );
    Ok(ck)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelectionLine<'a> {
    external_id: &'a str,
    index: usize,
    component: usize,
    step: usize,
    fallback: bool,
}

pub fn write_selection(path: &Path, selected: &[SelectedSample], manifest: &[SampleId]) -> Result<()> {
    let mut out = String::new();
    for s in selected {
        let line = SelectionLine {
            external_id: &manifest[s.index].external_id,
            index: s.index,
            component: s.component,
            step: s.step,
            fallback: s.fallback,
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::json(path, e))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, Deserialize)]
struct SelectionLineOwned {
    index: usize,
}

pub fn read_selection_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<SelectionLineOwned>(l)
                .map(|s| s.index)
                .map_err(|e| Error::json(path, e))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub mode: String,
    pub n_train: usize,
    pub ratio: f64,
    pub total_selected: usize,
}

/// Similarity-only selection (`--no-graph`) against the mean validation gradient.
pub fn similarity_selection(
    train: &GradientFeatureMatrix,
    validation: &GradientFeatureMatrix,
    ratio: f64,
) -> Result<(Vec<SelectedSample>, SimilarityReport)> {
    let mean = mean_gradient(validation)?;
    let picked = select_by_similarity(train, &SimilarityTarget::Direction(mean), ratio)?;
    let selected: Vec<SelectedSample> = picked
        .iter()
        .enumerate()
        .map(|(rank, &index)| SelectedSample {
            index,
            component: 0,
            step: rank,
            fallback: false,
        })
        .collect();
    let report = SimilarityReport {
        mode: "no_graph".into(),
        n_train: train.n(),
        ratio,
        total_selected: selected.len(),
    };
    Ok((selected, report))
}

pub struct SelectPaths<'p> {
    pub train: &'p Path,
    pub core: Option<&'p Path>,
    pub validation: &'p [PathBuf],
    pub out: &'p Path,
    pub report: &'p Path,
}

/// Runs selection from files. With `no_graph`, `core` is ignored and the
/// validation files supply the mean gradient.
pub fn select_files(paths: &SelectPaths<'_>, cfg: &WalkConfig, no_graph: bool, policy: DegeneratePolicy) -> Result<usize> {
    cfg.validate()?;
    let train = FeatureSet::load(paths.train, policy)?;
    if no_graph {
        let validation = load_validation(paths.validation, policy)?;
        let (selected, report) = similarity_selection(&train.matrix, &validation, cfg.ratio)?;
        write_selection(paths.out, &selected, &train.manifest)?;
        write_json(paths.report, &report)?;
        return Ok(selected.len());
    }
    let core_path = paths
        .core
        .ok_or_else(|| Error::Config("select needs --core (or --no-graph)".into()))?;
    let ck = core_knowledge::load_core(core_path)?;
    let Selection { selected, report } = run_selection(&train.matrix, &ck, cfg)?;
    if report.shortfall > 0 {
        log::warn!(
            "selected {} of {} requested ({} duplicates merged across components)",
            report.total_selected,
            report.target_total,
            report.duplicates_merged
        );
    }
    write_selection(paths.out, &selected, &train.manifest)?;
    write_json(paths.report, &report)?;
    Ok(selected.len())
}

/// Warmed model plus its frozen optimizer state, as stored by `toy warmup`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmModel {
    pub model: ToyModel,
    pub adam: AdamState,
    pub warmup_indices: Vec<usize>,
}

pub fn toy_warmup(corpus: &SyntheticCorpus, n: usize, cfg: &TrainConfig, seed: u64) -> Result<WarmModel> {
    if n == 0 || n > corpus.samples.len() {
        return Err(Error::Config(format!(
            "warmup size {n} must be in 1..={}",
            corpus.samples.len()
        )));
    }
    let warmup_indices = toy::random_subset(corpus.samples.len(), n, seed);
    let subset: Vec<Sample> = warmup_indices.iter().map(|&i| corpus.samples[i].clone()).collect();
    let (model, adam) = toy::warmup(&ToyModel::for_corpus(corpus), &subset, cfg)?;
    Ok(WarmModel {
        model,
        adam,
        warmup_indices,
    })
}

/// Stream ids for the target task's held-out draws.
pub const VALIDATION_STREAM: u64 = 0;
pub const EVAL_STREAM: u64 = 1;

pub fn toy_manifest(prefix: &str, n: usize) -> Vec<SampleId> {
    (0..n)
        .map(|i| SampleId {
            index: i,
            external_id: format!("{prefix}-{i}"),
        })
        .collect()
}

/// Train (momentum) and validation (SGD) features for a warmed toy model.
pub fn toy_extract(
    corpus: &SyntheticCorpus,
    warm: &WarmModel,
    target_task: usize,
    validation_n: usize,
) -> Result<(FeatureSet, FeatureSet)> {
    let train = toy::extract_features(&warm.model, &warm.adam, &corpus.samples, FeatureKind::TrainMomentum)?;
    let val_samples = corpus.sample_task(target_task, validation_n, VALIDATION_STREAM)?;
    let validation = toy::extract_features(&warm.model, &warm.adam, &val_samples, FeatureKind::ValidationSgd)?;
    let n = train.n();
    let v = validation.n();
    Ok((
        FeatureSet::new(train, toy_manifest("train", n))?,
        FeatureSet::new(validation, toy_manifest("val", v))?,
    ))
}

pub fn toy_eval(
    corpus: &SyntheticCorpus,
    warm: &WarmModel,
    selected: &[usize],
    target_task: usize,
    eval_n: usize,
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    let subset = selected
        .iter()
        .map(|&i| {
            corpus
                .samples
                .get(i)
                .cloned()
                .ok_or(Error::Index { index: i, len: corpus.samples.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = corpus.sample_task(target_task, eval_n, EVAL_STREAM)?;
    toy::finetune_and_eval(&warm.model, &warm.adam, &subset, &eval, cfg)
}

/// Target-task results of fine-tuning on each selection arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub seed: u64,
    pub selected: usize,
    pub g2is: EvalResult,
    pub random: EvalResult,
    pub no_graph: EvalResult,
    /// Similarity-only variant that keeps the per-component quotas.
    pub no_graph_components: EvalResult,
    pub full: Option<EvalResult>,
    /// Fraction of the G2IS selection drawn from the target task.
    pub g2is_target_share: f64,
    /// Constraint violations found by re-auditing the walk at 1e-9.
    pub violations: usize,
}

/// One seeded end-to-end experiment: corpus, warmup, extraction, PCA,
/// selection, and fine-tuning on G2IS, random, and similarity-only subsets.
pub fn toy_compare(cfg: &ToyConfig, walk: &WalkConfig, pca: &PcaOptions, with_full: bool) -> Result<ArmComparison> {
    let corpus = toy::generate_corpus_with(&cfg.corpus, cfg.n, cfg.tasks, cfg.seed)?;
    let warm = toy_warmup(&corpus, cfg.warmup_n, &cfg.warmup, cfg.seed ^ 0x5741_524d)?;
    let (train, validation) = toy_extract(&corpus, &warm, cfg.target_task, cfg.validation_n)?;
    let ck = extract_core_knowledge(&validation.matrix, pca)?;
    let selection = run_selection(&train.matrix, &ck, walk)?;
    let violations = audit_constraints(&train.matrix, &ck, &selection.report, 1e-9).len();
    let g2is_idx = selection.indices();
    let (sim, _) = similarity_selection(&train.matrix, &validation.matrix, walk.ratio)?;
    let sim_idx: Vec<usize> = sim.iter().map(|s| s.index).collect();
    let simc_idx = select_by_similarity(&train.matrix, &SimilarityTarget::Components(&ck), walk.ratio)?;
    let random_idx = toy::random_subset(corpus.samples.len(), g2is_idx.len(), cfg.seed ^ 0x5241_4e44);
    let mut ft = cfg.finetune.clone();
    ft.seed = cfg.seed;
    let eval = |idx: &[usize]| toy_eval(&corpus, &warm, idx, cfg.target_task, cfg.eval_n, &ft);
    let share = g2is_idx.iter().filter(|&&i| corpus.samples[i].task == cfg.target_task).count() as f64
        / g2is_idx.len().max(1) as f64;
    let all: Vec<usize> = (0..corpus.samples.len()).collect();
    Ok(ArmComparison {
        seed: cfg.seed,
        selected: g2is_idx.len(),
        g2is: eval(&g2is_idx)?,
        random: eval(&random_idx)?,
        no_graph: eval(&sim_idx)?,
        no_graph_components: eval(&simc_idx)?,
        full: if with_full { Some(eval(&all)?) } else { None },
        g2is_target_share: share,
        violations,
    })
}

/// Runs every configured stage into `cfg.out_dir` and writes
/// `run_manifest.json` there. Returns the number of selected samples.
pub fn run_pipeline(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let policy = cfg.policy();
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut outputs: Vec<PathBuf> = Vec::new();

    let mut toy_state = None;
    let (mut train_path, mut val_paths) = match &cfg.toy {
        Some(t) => {
            let corpus = toy::generate_corpus_with(&t.corpus, t.n, t.tasks, t.seed)?;
            let warm = toy_warmup(&corpus, t.warmup_n, &t.warmup, t.seed ^ 0x5741_524d)?;
            let (train, validation) = toy_extract(&corpus, &warm, t.target_task, t.validation_n)?;
            let tp = out.join("train.gf1");
            let vp = out.join("validation.gf1");
            train.save(&tp)?;
            validation.save(&vp)?;
            outputs.extend([tp.clone(), vp.clone()]);
            toy_state = Some((corpus, warm));
            (tp, vec![vp])
        }
        None => {
            let tp = cfg.train.clone().expect("validated");
            inputs.push(tp.clone());
            inputs.extend(cfg.validation.iter().cloned());
            (tp, cfg.validation.clone())
        }
    };

    if let Some(p) = &cfg.projection {
        let d_in = FeatureSet::load(&train_path, policy)?.matrix.d();
        let sketch = ProjectionSketch::new(p.seed, d_in, p.d_out)?;
        let tp = out.join("train.proj.gf1");
        project_file(&train_path, &tp, &sketch, policy)?;
        let mut vps = Vec::new();
        for (i, v) in val_paths.iter().enumerate() {
            let vp = out.join(format!("validation{i}.proj.gf1"));
            project_file(v, &vp, &sketch, policy)?;
            vps.push(vp);
        }
        outputs.push(tp.clone());
        outputs.extend(vps.iter().cloned());
        train_path = tp;
        val_paths = vps;
    }

    let selection_path = out.join("selection.jsonl");
    let report_path = out.join("report.json");
    let core_path = out.join("core.json");
    if !cfg.no_graph {
        pca_files(&val_paths, &cfg.pca_options(), &core_path, policy)?;
        outputs.push(core_path.clone());
    }
    let paths = SelectPaths {
        train: &train_path,
        core: Some(&core_path),
        validation: &val_paths,
        out: &selection_path,
        report: &report_path,
    };
    let count = select_files(&paths, &cfg.walk, cfg.no_graph, policy)?;
    outputs.extend([selection_path.clone(), report_path]);

    if let (Some(t), Some((corpus, warm))) = (&cfg.toy, &toy_state) {
        if t.evaluate {
            let selected = read_selection_indices(&selection_path)?;
            let mut ft = t.finetune.clone();
            ft.seed = t.seed;
            let chosen = toy_eval(corpus, warm, &selected, t.target_task, t.eval_n, &ft)?;
            let random_idx = toy::random_subset(corpus.samples.len(), selected.len(), t.seed ^ 0x5241_4e44);
            let random = toy_eval(corpus, warm, &random_idx, t.target_task, t.eval_n, &ft)?;
            let eval_path = out.join("eval.json");
            write_json(
                &eval_path,
                &serde_json::json!({ "selected": chosen, "random": random, "subset_size": selected.len() }),
            )?;
            outputs.push(eval_path);
        }
    }

    write_run_manifest(&out.join("run_manifest.json"), "run", cfg, &inputs, &outputs)?;
    Ok(count)
}
