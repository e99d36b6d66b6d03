//! End-to-end training: alternating environment identification and mask
//! fitting, final training on invariant features, checkpointing, and resume.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    load_model, save_model, train, AdamConfig, Degrees, ItemGraph, LossWeights, ModelDims,
    ModelParams, RawContent, TrainConfig, TrainOutcome,
};
use crate::config::ConfigFile;
use crate::dataset::{load_features, load_split, FeatureTable, InteractionSet, SplitSpec};
use crate::envid::{adjusted_rand_index, identify, EnvPartition, IdentifyOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, model_scorer, summary_rows, write_metrics, MetricRow};
use crate::maskgen::{
    fit_mask, invariant_table, variant_table, write_mask, FitMaskOptions, MaskContext,
    MaskIterLog, MaskState, ParetoMode,
};
use crate::numgrad;

/// Derives the RNG for one named stage of one iteration from the root seed.
///
/// The stage name is hashed (FNV-1a) into its own seed word, so streams for
/// different stages, iterations, or roots are independent: resuming a run
/// re-derives exactly the streams the skipped stages never touched.
pub fn stage_rng(root_seed: u64, stage: &str, iteration: usize) -> ChaCha8Rng {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in stage.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let iter = iteration as u64;
    let mix = root_seed ^ hash.rotate_left(32) ^ iter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&root_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&hash.to_le_bytes());
    seed[16..24].copy_from_slice(&iter.to_le_bytes());
    seed[24..32].copy_from_slice(&mix.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Everything a training run needs, resolved to concrete values.
///
/// Build one with [`RunConfig::from_config`]; the originating resolved
/// config rides along so the run directory can echo it verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub embedding_dim: usize,
    pub weights: LossWeights,
    pub neighbor_k: usize,
    pub attn_softmax: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub adam: AdamConfig,
    /// Outer alternations `T`.
    pub outer_iters: usize,
    /// Stop the outer loop early when the mask moves less than this.
    pub outer_tol: f64,
    pub num_envs: usize,
    pub epochs_him: usize,
    pub identify_rounds: usize,
    pub iters_mask: usize,
    pub epochs_final: usize,
    pub mask_sigma: f64,
    pub mask_lambda: f64,
    pub mask_step: f64,
    pub pareto_mode: ParetoMode,
    pub eval_k: usize,
    pub split_ratio: f64,
    /// The complete resolved key-value config this run was built from.
    pub resolved: ConfigFile,
}

impl RunConfig {
    /// Reads every field out of a resolved config (see [`crate::config::resolve`]).
    pub fn from_config(resolved: &ConfigFile) -> Result<Self> {
        let config = RunConfig {
            data_dir: PathBuf::from(resolved.get_string("data_dir")?),
            run_dir: PathBuf::from(resolved.get_string("run_dir")?),
            seed: resolved.get_u64("seed")?,
            embedding_dim: resolved.get_usize("embedding_dim")?,
            weights: LossWeights {
                eta: resolved.get_f64("eta")?,
                kappa: resolved.get_f64("kappa")?,
            },
            neighbor_k: resolved.get_usize("neighbor_k")?,
            attn_softmax: resolved.get_bool("attn_softmax")?,
            learning_rate: resolved.get_f64("learning_rate")?,
            batch_size: resolved.get_usize("batch_size")?,
            neg_ratio: resolved.get_usize("neg_ratio")?,
            adam: AdamConfig {
                beta1: resolved.get_f64("adam_beta1")?,
                beta2: resolved.get_f64("adam_beta2")?,
                eps: resolved.get_f64("adam_eps")?,
            },
            outer_iters: resolved.get_usize("outer_iters")?,
            outer_tol: resolved.get_f64("outer_tol")?,
            num_envs: resolved.get_usize("num_envs")?,
            epochs_him: resolved.get_usize("epochs_him")?,
            identify_rounds: resolved.get_usize("identify_rounds")?,
            iters_mask: resolved.get_usize("iters_mask")?,
            epochs_final: resolved.get_usize("epochs_final")?,
            mask_sigma: resolved.get_f64("mask_sigma")?,
            mask_lambda: resolved.get_f64("mask_lambda")?,
            mask_step: resolved.get_f64("mask_step")?,
            pareto_mode: resolved.get_string("pareto_mode")?.parse()?,
            eval_k: resolved.get_usize("eval_k")?,
            split_ratio: resolved.get_f64("split_ratio")?,
            resolved: resolved.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::Config("outer_iters must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if self.num_envs == 0 {
            return Err(Error::Config("num_envs must be at least 1".into()));
        }
        if self.identify_rounds == 0 {
            return Err(Error::Config("identify_rounds must be at least 1".into()));
        }
        if self.eval_k == 0 {
            return Err(Error::Config("eval_k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.neg_ratio == 0 {
            return Err(Error::Config("neg_ratio must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.outer_tol.is_finite() && self.outer_tol >= 0.0) {
            return Err(Error::Config("outer_tol must be non-negative".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            neg_ratio: self.neg_ratio,
            weights: self.weights,
            adam: self.adam,
        }
    }
}

/// In-memory inputs of a run: the train/test split, the item features, and
/// (when available) the generator's environment labels for diagnostics.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub split: SplitSpec,
    pub features: FeatureTable,
    pub true_envs: Option<EnvPartition>,
}

impl RunInputs {
    /// Loads `split.manifest`, `features.tsv`, and (if present)
    /// `environments.tsv` from a data directory.
    pub fn load(data_dir: &Path) -> Result<Self> {
        let (split, ids) = load_split(&data_dir.join("split.manifest"))?;
        let features = load_features(&data_dir.join("features.tsv"), &ids)?;
        let env_path = data_dir.join("environments.tsv");
        let true_envs = if env_path.exists() {
            Some(load_true_envs(
                &env_path,
                split.train.num_users(),
                split.train.num_items(),
            )?)
        } else {
            None
        };
        let inputs = RunInputs {
            split,
            features,
            true_envs,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        let train = &self.split.train;
        if self.features.num_items() != train.num_items() {
            return Err(Error::invalid(format!(
                "feature table covers {} items but the split has {}",
                self.features.num_items(),
                train.num_items()
            )));
        }
        if self.features.dim() == 0 {
            return Err(Error::invalid("features must have at least one dimension"));
        }
        if let Some(envs) = &self.true_envs {
            if envs.num_users() != train.num_users() || envs.num_items() != train.num_items() {
                return Err(Error::invalid(
                    "environment labels use a different id space than the split",
                ));
            }
        }
        Ok(())
    }
}

/// Reads a partition dump whose environment count is not known up front by
/// scanning for the largest label first.
fn load_true_envs(path: &Path, num_users: usize, num_items: usize) -> Result<EnvPartition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut max_env = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let env: usize = line
            .rsplit('\t')
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "bad environment label"))?;
        max_env = max_env.max(env);
    }
    EnvPartition::load(path, max_env + 1, num_users, num_items)
}

/// Diagnostics of one outer alternation.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterIterLog {
    pub iteration: usize,
    /// Mask entering the iteration (0.5 everywhere on the first).
    pub m_start: Vec<f64>,
    /// Mask after the iteration's fitting stage.
    pub m_end: Vec<f64>,
    /// Pairs moved per identification round.
    pub reassignments: Vec<usize>,
    pub identify_converged: bool,
    /// Adjusted Rand index against generator labels, when those are known.
    pub ari_true: Option<f64>,
    pub mask_logs: Vec<MaskIterLog>,
    pub mask_stopped_early: bool,
    /// `max_k |m_end_k - m_start_k|`; drives the outer early stop.
    pub delta_inf: f64,
}

/// Everything a finished run produces in memory. The same information is
/// persisted under the run directory as `partition.tsv`, `mask.tsv`,
/// `metrics.tsv`, `log.txt`, and `checkpoints/`.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// The final model, trained on invariant content only.
    pub params: ModelParams,
    pub mask: MaskState,
    /// The last identified partition.
    pub partition: EnvPartition,
    pub outer: Vec<OuterIterLog>,
    pub final_losses: Vec<f64>,
    /// `test_iid` and `test_ood` rows at `eval_k`.
    pub metrics: Vec<MetricRow>,
    /// True when the outer loop stopped before `outer_iters` alternations.
    pub stopped_early: bool,
}

// ---------------------------------------------------------------------------
// Locking and atomic files
// ---------------------------------------------------------------------------

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn acquire_lock(run_dir: &Path) -> Result<LockGuard> {
    let path = run_dir.join("LOCK");
    match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(_) => Ok(LockGuard { path }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            Err(Error::Locked { path })
        }
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// Writes through a sibling temp file and renames, so a crash never leaves a
/// half-written file at `path`.
fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, content).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Stage checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct IdentifyStage {
    partition: EnvPartition,
    reassignments: Vec<usize>,
    converged: bool,
    ari: Option<f64>,
}

fn identify_meta_path(ck_dir: &Path, t: usize) -> PathBuf {
    ck_dir.join(format!("identify_{t}.meta"))
}

fn identify_partition_path(ck_dir: &Path, t: usize) -> PathBuf {
    ck_dir.join(format!("identify_{t}.partition.tsv"))
}

fn save_identify_stage(ck_dir: &Path, t: usize, stage: &IdentifyStage) -> Result<()> {
    stage.partition.write(&identify_partition_path(ck_dir, t))?;
    let mut meta = String::from("identify v1\n");
    writeln!(meta, "converged {}", stage.converged).expect("string write");
    match stage.ari {
        Some(v) => writeln!(meta, "ari {v}").expect("string write"),
        None => meta.push_str("ari -\n"),
    }
    meta.push_str("reassign");
    for r in &stage.reassignments {
        write!(meta, " {r}").expect("string write");
    }
    meta.push('\n');
    write_atomic(&identify_meta_path(ck_dir, t), &meta)
}

fn load_identify_stage(
    ck_dir: &Path,
    t: usize,
    num_envs: usize,
    num_users: usize,
    num_items: usize,
) -> Result<Option<IdentifyStage>> {
    let meta_path = identify_meta_path(ck_dir, t);
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("identify v1") {
        return Err(Error::Checkpoint(format!(
            "{}: unknown header",
            meta_path.display()
        )));
    }
    let mut converged = None;
    let mut ari = None;
    let mut reassignments = None;
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "converged" => {
                converged = Some(rest == "true");
            }
            "ari" => {
                ari = if rest == "-" {
                    Some(None)
                } else {
                    let v: f64 = rest.parse().map_err(|_| {
                        Error::Checkpoint(format!("{}: bad ari value", meta_path.display()))
                    })?;
                    Some(Some(v))
                };
            }
            "reassign" => {
                let counts: std::result::Result<Vec<usize>, _> = rest
                    .split_whitespace()
                    .map(str::parse)
                    .collect();
                reassignments = Some(counts.map_err(|_| {
                    Error::Checkpoint(format!(
                        "{}: bad reassignment counts",
                        meta_path.display()
                    ))
                })?);
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unknown field {other:?}",
                    meta_path.display()
                )));
            }
        }
    }
    let partition =
        EnvPartition::load(&identify_partition_path(ck_dir, t), num_envs, num_users, num_items)?;
    match (converged, ari, reassignments) {
        (Some(converged), Some(ari), Some(reassignments)) => Ok(Some(IdentifyStage {
            partition,
            reassignments,
            converged,
            ari,
        })),
        _ => Err(Error::Checkpoint(format!(
            "{}: missing fields",
            meta_path.display()
        ))),
    }
}

#[derive(Debug, Clone)]
struct MaskStage {
    state: MaskState,
    params: ModelParams,
    logs: Vec<MaskIterLog>,
    stopped_early: bool,
}

fn mask_meta_path(ck_dir: &Path, t: usize) -> PathBuf {
    ck_dir.join(format!("mask_{t}.meta"))
}

fn mask_model_path(ck_dir: &Path, t: usize) -> PathBuf {
    ck_dir.join(format!("mask_{t}.model"))
}

fn floats_line(values: &[f64]) -> String {
    let mut out = String::new();
    for (idx, v) in values.iter().enumerate() {
        if idx > 0 {
            out.push(' ');
        }
        write!(out, "{v}").expect("string write");
    }
    out
}

fn parse_floats(line: &str, what: &str, path: &Path) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| {
                Error::Checkpoint(format!("{}: bad {what} value {tok:?}", path.display()))
            })
        })
        .collect()
}

fn save_mask_stage(ck_dir: &Path, t: usize, stage: &MaskStage) -> Result<()> {
    save_model(&mask_model_path(ck_dir, t), &stage.params)?;
    let mut meta = String::from("mask v1\n");
    writeln!(meta, "sigma {}", stage.state.sigma).expect("string write");
    writeln!(meta, "lambda {}", stage.state.lambda).expect("string write");
    writeln!(meta, "step {}", stage.state.step).expect("string write");
    writeln!(meta, "m {}", floats_line(&stage.state.m)).expect("string write");
    writeln!(meta, "stopped_early {}", stage.stopped_early).expect("string write");
    writeln!(meta, "logs {}", stage.logs.len()).expect("string write");
    for log in &stage.logs {
        writeln!(
            meta,
            "{} {} {} {} {} {} {} {}",
            log.iter,
            log.erm,
            log.irm,
            log.objective,
            log.w_erm,
            log.raw_w_erm,
            log.delta_inf,
            log.sigma
        )
        .expect("string write");
    }
    write_atomic(&mask_meta_path(ck_dir, t), &meta)
}

fn load_mask_stage(ck_dir: &Path, t: usize) -> Result<Option<MaskStage>> {
    let meta_path = mask_meta_path(ck_dir, t);
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("mask v1") {
        return Err(Error::Checkpoint(format!(
            "{}: unknown header",
            meta_path.display()
        )));
    }
    let bad = |what: &str| Error::Checkpoint(format!("{}: bad {what}", meta_path.display()));
    let mut field = |name: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(name))?;
        line.strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(name))
    };
    let sigma: f64 = field("sigma")?.parse().map_err(|_| bad("sigma"))?;
    let lambda: f64 = field("lambda")?.parse().map_err(|_| bad("lambda"))?;
    let step: f64 = field("step")?.parse().map_err(|_| bad("step"))?;
    let m = parse_floats(&field("m")?, "mask", &meta_path)?;
    let stopped_early = field("stopped_early")? == "true";
    let log_count: usize = field("logs")?.parse().map_err(|_| bad("log count"))?;
    let mut logs = Vec::with_capacity(log_count);
    for _ in 0..log_count {
        let line = lines.next().ok_or_else(|| bad("log line"))?;
        let vals = parse_floats(line, "log", &meta_path)?;
        if vals.len() != 8 {
            return Err(bad("log line"));
        }
        logs.push(MaskIterLog {
            iter: vals[0] as usize,
            erm: vals[1],
            irm: vals[2],
            objective: vals[3],
            w_erm: vals[4],
            raw_w_erm: vals[5],
            delta_inf: vals[6],
            sigma: vals[7],
        });
    }
    let state = MaskState::new(m, sigma, lambda, step)?;
    let params = load_model(&mask_model_path(ck_dir, t))?;
    Ok(Some(MaskStage {
        state,
        params,
        logs,
        stopped_early,
    }))
}

fn final_meta_path(ck_dir: &Path) -> PathBuf {
    ck_dir.join("final.meta")
}

fn final_model_path(ck_dir: &Path) -> PathBuf {
    ck_dir.join("final.model")
}

fn save_final_stage(ck_dir: &Path, params: &ModelParams, losses: &[f64]) -> Result<()> {
    save_model(&final_model_path(ck_dir), params)?;
    let mut meta = String::from("final v1\n");
    writeln!(meta, "losses {}", floats_line(losses)).expect("string write");
    write_atomic(&final_meta_path(ck_dir), &meta)
}

fn load_final_stage(ck_dir: &Path) -> Result<Option<(ModelParams, Vec<f64>)>> {
    let meta_path = final_meta_path(ck_dir);
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("final v1") {
        return Err(Error::Checkpoint(format!(
            "{}: unknown header",
            meta_path.display()
        )));
    }
    let losses_line = lines
        .next()
        .and_then(|l| l.strip_prefix("losses"))
        .ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing losses", meta_path.display()))
        })?;
    let losses = parse_floats(losses_line, "loss", &meta_path)?;
    let params = load_model(&final_model_path(ck_dir))?;
    Ok(Some((params, losses)))
}

// ---------------------------------------------------------------------------
// The run itself
// ---------------------------------------------------------------------------

/// Adjusted Rand index between the generator's labels and an identified
/// partition, over the pairs both cover.
fn ari_against(true_envs: &EnvPartition, found: &EnvPartition) -> Result<f64> {
    let lookup: BTreeMap<(u32, u32), usize> = true_envs
        .pairs()
        .iter()
        .copied()
        .zip(true_envs.assignment().iter().copied())
        .collect();
    let mut truth = Vec::new();
    let mut ours = Vec::new();
    for (pair, &env) in found.pairs().iter().zip(found.assignment()) {
        if let Some(&te) = lookup.get(pair) {
            truth.push(te);
            ours.push(env);
        }
    }
    if truth.is_empty() {
        return Err(Error::invalid(
            "no overlap between generator labels and the identified partition",
        ));
    }
    adjusted_rand_index(&truth, &ours)
}

/// Trains a fresh model on the invariant share `m ⊙ f` of the features.
pub fn train_final(
    m: &[f64],
    data: &InteractionSet,
    features: &FeatureTable,
    graph: &ItemGraph,
    dims: ModelDims,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    let phi = invariant_table(m, features)?;
    let content = RawContent(&phi);
    let init = ModelParams::init(dims, rng);
    train(
        init,
        data,
        graph,
        Degrees::of(data),
        &content,
        config,
        rng,
    )
}

/// Loads the data named by `config.data_dir` and calls [`run_with`].
pub fn run(config: &RunConfig, resume: bool) -> Result<RunArtifacts> {
    let inputs = RunInputs::load(&config.data_dir).map_err(|e| e.in_stage("load"))?;
    run_with(&inputs, config, resume)
}

/// Executes the full pipeline into `config.run_dir`.
///
/// Stage order: for each outer iteration `t`, environment identification on
/// the variant features `(1-m) ⊙ f`, then mask fitting; afterwards one final
/// training pass on the invariant features. Every stage completion is
/// checkpointed under `checkpoints/`; with `resume` set, completed stages
/// are reloaded instead of re-run, and because each stage draws from its own
/// seed-derived stream, a resumed run finishes with byte-identical
/// artifacts. A fresh run refuses a directory that already has checkpoints
/// unless `resume` is set.
pub fn run_with(inputs: &RunInputs, config: &RunConfig, resume: bool) -> Result<RunArtifacts> {
    config.validate()?;
    inputs.validate()?;
    let run_dir = &config.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let _lock = acquire_lock(run_dir)?;
    let ck_dir = run_dir.join("checkpoints");
    if !resume
        && ck_dir.exists()
        && fs::read_dir(&ck_dir)
            .map_err(|e| Error::io(&ck_dir, e))?
            .next()
            .is_some()
    {
        return Err(Error::invalid(format!(
            "{} already holds checkpoints; pass resume to continue that run",
            run_dir.display()
        )));
    }
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    write_atomic(&run_dir.join("config"), &config.resolved.to_text())?;

    let train_set = &inputs.split.train;
    let num_users = train_set.num_users();
    let num_items = train_set.num_items();
    let d = inputs.features.dim();
    let dims = ModelDims::new(num_users, num_items, config.embedding_dim, d);
    let graph = ItemGraph::build(train_set, config.neighbor_k);
    let degrees = Degrees::of(train_set);

    let mut state = MaskState::new(
        vec![0.5; d],
        config.mask_sigma,
        config.mask_lambda,
        config.mask_step,
    )?;
    let mut theta_mask: Option<ModelParams> = None;
    let mut last_partition: Option<EnvPartition> = None;
    let mut outer = Vec::new();
    let mut stopped_early = false;

    for t in 0..config.outer_iters {
        let m_start = state.m.clone();

        let ident = match load_identify_stage(&ck_dir, t, config.num_envs, num_users, num_items)?
        {
            Some(stage) => stage,
            None => {
                let psi = variant_table(&state.m, &inputs.features)
                    .map_err(|e| e.in_stage(&format!("identify_{t}")))?;
                let content = RawContent(&psi);
                let opts = IdentifyOptions {
                    num_envs: config.num_envs,
                    max_rounds: config.identify_rounds,
                    embed_dim: config.embedding_dim,
                    train: config.train_config(config.epochs_him),
                };
                let mut rng = stage_rng(config.seed, "identify", t);
                let outcome = identify(train_set, &content, &graph, &opts, &mut rng)
                    .map_err(|e| e.in_stage(&format!("identify_{t}")))?;
                let ari = match &inputs.true_envs {
                    Some(te) => Some(ari_against(te, &outcome.partition)?),
                    None => None,
                };
                let stage = IdentifyStage {
                    partition: outcome.partition,
                    reassignments: outcome.reassignments,
                    converged: outcome.converged,
                    ari,
                };
                save_identify_stage(&ck_dir, t, &stage)?;
                stage
            }
        };

        let mask_stage = match load_mask_stage(&ck_dir, t)? {
            Some(stage) => stage,
            None => {
                let params = match theta_mask.take() {
                    Some(p) => p,
                    None => ModelParams::init(dims, &mut stage_rng(config.seed, "mask_init", 0)),
                };
                let ctx = MaskContext {
                    features: &inputs.features,
                    graph: &graph,
                    degrees,
                    weights: config.weights,
                    softmax_attention: config.attn_softmax,
                };
                let opts = FitMaskOptions {
                    iters: config.iters_mask,
                    mode: config.pareto_mode,
                    theta_lr: config.learning_rate,
                    adam: config.adam,
                    neg_ratio: config.neg_ratio,
                    stop_tol: crate::maskgen::DEFAULT_STOP_TOL,
                    fd_step: numgrad::DEFAULT_H,
                };
                let mut rng = stage_rng(config.seed, "mask", t);
                let out = fit_mask(&ctx, &ident.partition, params, state.clone(), &opts, &mut rng)
                    .map_err(|e| e.in_stage(&format!("mask_{t}")))?;
                let stage = MaskStage {
                    state: out.state,
                    params: out.params,
                    logs: out.logs,
                    stopped_early: out.stopped_early,
                };
                save_mask_stage(&ck_dir, t, &stage)?;
                stage
            }
        };

        let delta_inf = mask_stage
            .state
            .m
            .iter()
            .zip(m_start.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        outer.push(OuterIterLog {
            iteration: t,
            m_start,
            m_end: mask_stage.state.m.clone(),
            reassignments: ident.reassignments.clone(),
            identify_converged: ident.converged,
            ari_true: ident.ari,
            mask_logs: mask_stage.logs.clone(),
            mask_stopped_early: mask_stage.stopped_early,
            delta_inf,
        });
        state = mask_stage.state;
        theta_mask = Some(mask_stage.params);
        last_partition = Some(ident.partition);
        if delta_inf < config.outer_tol && t + 1 < config.outer_iters {
            stopped_early = true;
            break;
        }
    }

    let (final_params, final_losses) = match load_final_stage(&ck_dir)? {
        Some(loaded) => loaded,
        None => {
            let mut rng = stage_rng(config.seed, "final", 0);
            let out = train_final(
                &state.m,
                train_set,
                &inputs.features,
                &graph,
                dims,
                &config.train_config(config.epochs_final),
                &mut rng,
            )
            .map_err(|e| e.in_stage("final"))?;
            save_final_stage(&ck_dir, &out.params, &out.epoch_losses)?;
            (out.params, out.epoch_losses)
        }
    };

    let phi = invariant_table(&state.m, &inputs.features)?;
    let content = RawContent(&phi);
    let iid = evaluate(
        train_set,
        &inputs.split.test_iid,
        config.eval_k,
        model_scorer(&final_params, &content),
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let ood = evaluate(
        train_set,
        &inputs.split.test_ood,
        config.eval_k,
        model_scorer(&final_params, &content),
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let mut metrics = summary_rows("test_iid", config.eval_k, &iid);
    metrics.extend(summary_rows("test_ood", config.eval_k, &ood));

    let partition = last_partition.expect("outer loop ran at least once");
    partition.write(&run_dir.join("partition.tsv"))?;
    write_mask(&run_dir.join("mask.tsv"), &state.m, &inputs.features)?;
    write_metrics(&run_dir.join("metrics.tsv"), &metrics)?;
    write_atomic(&run_dir.join("log.txt"), &compose_log(&outer, &final_losses))?;

    Ok(RunArtifacts {
        params: final_params,
        mask: state,
        partition,
        outer,
        final_losses,
        metrics,
        stopped_early,
    })
}

/// Renders `epoch<TAB>stage<TAB>loss<TAB>w_erm` lines for every training
/// stage: identification rounds log their reassignment counts, mask
/// iterations their weighted objective and solved weight, final epochs
/// their training loss.
fn compose_log(outer: &[OuterIterLog], final_losses: &[f64]) -> String {
    let mut out = String::new();
    for log in outer {
        let t = log.iteration;
        for (round, moved) in log.reassignments.iter().enumerate() {
            writeln!(out, "{round}\tidentify_{t}\t{moved}\t-").expect("string write");
        }
        for m in &log.mask_logs {
            writeln!(out, "{}\tmask_{t}\t{}\t{}", m.iter, m.objective, m.w_erm)
                .expect("string write");
        }
    }
    for (epoch, loss) in final_losses.iter().enumerate() {
        writeln!(out, "{epoch}\tfinal\t{loss}\t-").expect("string write");
    }
    out
}
