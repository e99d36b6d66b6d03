//! Command-line driver: dataset synthesis, training runs, evaluation, the
//! two-objective weight solver, and gradient checking.

use std::io::Read as _;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;

use invrec::backbone::{
    grad_total_loss, load_model, total_loss, Batch, Degrees, ItemGraph, LossWeights, ModelDims,
    ModelParams, RawContent,
};
use invrec::config::{resolve, synthetic_spec, ConfigFile};
use invrec::dataset::{
    make_synthetic, split_iid_ood, write_features, write_interactions, write_split, IdMap,
    SyntheticSpec,
};
use invrec::eval::{evaluate, model_scorer, summary_rows, write_metrics, MetricRow};
use invrec::maskgen::{
    build_env_batches, erm_loss, grad_mask_erm, invariant_table, load_mask, sample_mu,
    MaskContext, MaskSample, MaskState,
};
use invrec::numgrad::{check_gradient, finite_diff_grad, GradReport, DEFAULT_H};
use invrec::pareto::{check_descent, combined_direction, solve_weights_full};
use invrec::pipeline::{run, stage_rng, RunConfig, RunInputs};

#[derive(Parser)]
#[command(name = "invrec", version, about = "Invariant-mask recommender toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction dataset with ground-truth environments.
    Synth(SynthArgs),
    /// Run the alternating identify-and-mask pipeline into a run directory.
    Train(TrainArgs),
    /// Rank the catalogue with a trained model and rewrite its metrics table.
    Evaluate(EvaluateArgs),
    /// Solve the two-gradient weighting and print the descent diagnostics.
    ParetoDemo(ParetoDemoArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Path to a `key = value` config file; omitted keys take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn user_config(&self) -> Result<ConfigFile> {
        let mut user = match &self.config {
            Some(path) => ConfigFile::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ConfigFile::default(),
        };
        apply_sets(&mut user, &self.set)?;
        Ok(user)
    }

    fn resolved(&self) -> Result<ConfigFile> {
        Ok(resolve(&self.user_config()?)?)
    }
}

fn apply_sets(user: &mut ConfigFile, sets: &[String]) -> Result<()> {
    for pair in sets {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set {pair:?} is not of the form key=value"))?;
        user.set(key.trim(), value.trim());
    }
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue a checkpointed run directory instead of starting fresh.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["config", "set"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory holding the trained model (defaults to the config's
    /// run_dir; its echoed config is used when --config is omitted).
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Ranking cutoff; overrides the config's eval_k.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct ParetoDemoArgs {
    /// First gradient, whitespace-separated (read from stdin when omitted).
    #[arg(value_name = "G_ERM")]
    g_erm: Option<String>,
    /// Second gradient, whitespace-separated.
    #[arg(value_name = "G_IRM")]
    g_irm: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed of the generated check instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error per gradient.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Corrupt one analytic entry to exercise the failure report.
    #[arg(long, hide = true)]
    inject_bug: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::ParetoDemo(args) => cmd_pareto_demo(args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let resolved = args.config.resolved()?;
    let spec = synthetic_spec(&resolved)?;
    let data_dir = PathBuf::from(resolved.get_string("data_dir")?);
    let ratio = resolved.get_f64("split_ratio")?;
    std::fs::create_dir_all(&data_dir)
        .with_context(|| format!("creating {}", data_dir.display()))?;

    let (set, features, envs) = make_synthetic(&spec)?;
    let ids = IdMap::identity(set.num_users(), set.num_items());
    write_interactions(&data_dir.join("interactions.tsv"), &set, &ids)?;
    write_features(&data_dir.join("features.tsv"), &features, &ids)?;
    envs.write(&data_dir.join("environments.tsv"))?;
    let mut rng = stage_rng(spec.seed, "split", 0);
    let split = split_iid_ood(&envs, ratio, &mut rng)?;
    write_split(&data_dir, &split, &ids)?;
    resolved.write(&data_dir.join("config"))?;

    println!(
        "wrote {} interactions ({} users, {} items, {} environments) to {}",
        set.num_positives(),
        set.num_users(),
        set.num_items(),
        envs.num_envs(),
        data_dir.display()
    );
    println!(
        "split: {} train / {} test_iid / {} test_ood",
        split.train.num_positives(),
        split.test_iid.num_positives(),
        split.test_ood.num_positives()
    );
    Ok(())
}

fn print_metrics(rows: &[MetricRow]) {
    for row in rows {
        println!("{}\t{}@{}\t{:.6}", row.split, row.metric, row.k, row.value);
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (resolved, resume) = match &args.resume {
        Some(dir) => {
            let mut echoed = ConfigFile::load(&dir.join("config")).with_context(|| {
                format!("{} has no config echo to resume from", dir.display())
            })?;
            echoed.set("run_dir", &dir.display().to_string());
            (resolve(&echoed)?, true)
        }
        None => (args.config.resolved()?, false),
    };
    let config = RunConfig::from_config(&resolved)?;
    let artifacts = run(&config, resume)?;

    println!("run directory: {}", config.run_dir.display());
    if artifacts.stopped_early {
        println!(
            "outer loop settled after {} of {} iterations",
            artifacts.outer.len(),
            config.outer_iters
        );
    }
    print_metrics(&artifacts.metrics);
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut user = match (&args.config.config, &args.run_dir) {
        (Some(path), _) => ConfigFile::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        (None, Some(dir)) => ConfigFile::load(&dir.join("config")).with_context(|| {
            format!("{} has no config echo; pass --config", dir.display())
        })?,
        (None, None) => ConfigFile::default(),
    };
    apply_sets(&mut user, &args.config.set)?;
    let resolved = resolve(&user)?;

    let run_dir = match &args.run_dir {
        Some(dir) => dir.clone(),
        None => PathBuf::from(resolved.get_string("run_dir")?),
    };
    let k = match args.k {
        Some(k) => k,
        None => resolved.get_usize("eval_k")?,
    };
    ensure!(k >= 1, "the ranking cutoff must be at least 1");

    let inputs = RunInputs::load(&PathBuf::from(resolved.get_string("data_dir")?))?;
    let model_path = run_dir.join("checkpoints").join("final.model");
    if !model_path.exists() {
        bail!(
            "no trained model at {}; run `invrec train` first",
            model_path.display()
        );
    }
    let params = load_model(&model_path)?;
    let m = load_mask(&run_dir.join("mask.tsv"))
        .with_context(|| format!("reading the mask from {}", run_dir.display()))?;

    let phi = invariant_table(&m, &inputs.features)?;
    let content = RawContent(&phi);
    let iid = evaluate(
        &inputs.split.train,
        &inputs.split.test_iid,
        k,
        model_scorer(&params, &content),
    )?;
    let ood = evaluate(
        &inputs.split.train,
        &inputs.split.test_ood,
        k,
        model_scorer(&params, &content),
    )?;
    let mut rows = summary_rows("test_iid", k, &iid);
    rows.extend(summary_rows("test_ood", k, &ood));
    write_metrics(&run_dir.join("metrics.tsv"), &rows)?;
    print_metrics(&rows);
    Ok(())
}

fn parse_vector(text: &str, name: &str) -> Result<Vec<f64>> {
    let values: Result<Vec<f64>> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse()
                .with_context(|| format!("{name}: {tok:?} is not a number"))
        })
        .collect();
    let values = values?;
    ensure!(!values.is_empty(), "{name} must hold at least one entry");
    Ok(values)
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_pareto_demo(args: ParetoDemoArgs) -> Result<()> {
    let (erm_text, irm_text) = match (args.g_erm, args.g_irm) {
        (Some(a), Some(b)) => (a, b),
        (None, None) => {
            let mut text = String::new();
            std::io::stdin()
                .read_to_string(&mut text)
                .context("reading gradients from stdin")?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let a = lines
                .next()
                .context("expected two whitespace-separated gradient lines on stdin")?;
            let b = lines
                .next()
                .context("expected a second gradient line on stdin")?;
            (a.to_string(), b.to_string())
        }
        _ => bail!("pass both gradients as arguments, or neither and use stdin"),
    };
    let g_erm = parse_vector(&erm_text, "first gradient")?;
    let g_irm = parse_vector(&irm_text, "second gradient")?;
    ensure!(
        g_erm.len() == g_irm.len(),
        "gradients differ in length ({} vs {})",
        g_erm.len(),
        g_irm.len()
    );

    let solution = solve_weights_full(&g_erm, &g_irm)?;
    // The demo reports the actual descent step, i.e. the negated gradient
    // combination the dot products below are taken against.
    let direction: Vec<f64> = combined_direction(&g_erm, &g_irm, &solution.weights)
        .into_iter()
        .map(|v| -v)
        .collect();
    let check = check_descent(&g_erm, &g_irm, &solution.weights);
    println!("w_erm = {}", solution.weights.w_erm);
    println!("w_irm = {}", solution.weights.w_irm);
    println!("raw_w_erm = {}", solution.raw_w_erm);
    println!("direction = {}", join_floats(&direction));
    println!("dot_erm = {}", check.dot_erm);
    println!("dot_irm = {}", check.dot_irm);
    println!("sq_norm = {}", check.sq_norm);
    println!("kkt_stationary = {}", check.kkt_stationary);
    Ok(())
}

fn print_report(name: &str, report: &GradReport, tolerance: f64) {
    println!(
        "{name}: max relative error {:.3e} at index {} (tolerance {:.1e}) {}",
        report.max_rel_diff,
        report.worst_index,
        tolerance,
        if report.pass { "ok" } else { "FAIL" }
    );
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    ensure!(
        args.tolerance.is_finite() && args.tolerance > 0.0,
        "tolerance must be positive"
    );
    let spec = SyntheticSpec {
        num_users: 8,
        num_items: 10,
        d_inv: 2,
        d_spu: 2,
        num_envs_true: 2,
        flip_strength: 1.0,
        density: 0.15,
        seed: args.seed,
    };
    let (set, features, envs) = make_synthetic(&spec)?;
    let graph = ItemGraph::build(&set, 3);
    let weights = LossWeights {
        eta: 0.3,
        kappa: 0.2,
    };
    let degrees = Degrees::of(&set);
    let ctx = MaskContext {
        features: &features,
        graph: &graph,
        degrees,
        weights,
        softmax_attention: false,
    };
    let dims = ModelDims::new(set.num_users(), set.num_items(), 4, features.dim());
    let mut rng = stage_rng(args.seed, "gradcheck", 0);
    let params = ModelParams::init(dims, &mut rng);
    // Keep the mask away from 0 and 1 so difference probes stay in range.
    let m: Vec<f64> = (0..features.dim()).map(|_| rng.gen_range(0.3..0.7)).collect();
    let state = MaskState::new(m, 0.05, 0.0, 0.1)?;
    let sample = sample_mu(&state, &mut rng);
    let batches = build_env_batches(&envs, 1, &mut rng)?;
    let mut batch = Batch::default();
    for b in &batches {
        batch.positives.extend_from_slice(&b.positives);
        batch.negatives.extend_from_slice(&b.negatives);
    }

    let corrupt = |mut grad: Vec<f64>| {
        if args.inject_bug {
            grad[0] += 0.05;
        }
        grad
    };

    let content = RawContent(&features);
    let analytic_loss = corrupt(
        grad_total_loss(&batch, &graph, degrees, &content, &params, &weights)?
            .values()
            .to_vec(),
    );
    let numeric_loss = finite_diff_grad(
        |probe| {
            let probe_params = ModelParams::from_flat(dims, probe.to_vec())
                .expect("probe has the model's own length");
            total_loss(&batch, &graph, degrees, &content, &probe_params, &weights)
                .expect("loss is defined wherever the analytic gradient is")
        },
        params.values(),
        DEFAULT_H,
    )?;
    let loss_report = check_gradient(&analytic_loss, &numeric_loss, args.tolerance)?;
    print_report("loss-gradient", &loss_report, args.tolerance);

    let analytic_mask = corrupt(grad_mask_erm(&ctx, &batches, &params, &state, &sample)?);
    let epsilon = sample.epsilon.clone();
    let numeric_mask = finite_diff_grad(
        |probe| {
            let probe_state =
                MaskState::new(probe.to_vec(), state.sigma, state.lambda, state.step)
                    .expect("probed mask stays within [0, 1]");
            let probe_sample = MaskSample::from_noise(probe, epsilon.clone());
            erm_loss(&ctx, &batches, &params, &probe_state, &probe_sample)
                .expect("loss is defined wherever the analytic gradient is")
        },
        &state.m,
        DEFAULT_H,
    )?;
    let mask_report = check_gradient(&analytic_mask, &numeric_mask, args.tolerance)?;
    print_report("mask-gradient", &mask_report, args.tolerance);

    for (name, report) in [("loss", loss_report), ("mask", mask_report)] {
        if !report.pass {
            bail!(
                "{name} gradient check failed: worst index {} (relative error {:.3e} > tolerance {:.1e})",
                report.worst_index,
                report.max_rel_diff,
                args.tolerance
            );
        }
    }
    println!("all gradient checks passed");
    Ok(())
}
