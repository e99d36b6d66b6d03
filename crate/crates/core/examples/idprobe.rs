//! Scratch probe: planted-fixture behavior per pareto mode plus env recovery.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use invrec::backbone::{ItemGraph, RawContent, TrainConfig};
use invrec::config::{resolve, ConfigFile};
use invrec::dataset::{make_synthetic, split_iid_ood, SyntheticSpec};
use invrec::envid::{adjusted_rand_index, identify, EnvPartition, IdentifyOptions};
use invrec::maskgen::ParetoMode;
use invrec::pipeline::{run_with, stage_rng, RunArtifacts, RunConfig, RunInputs};

const PLANTED_SEED: u64 = 7;
const PLANTED_RUN_SEED: u64 = 101;

fn planted_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_users: 200,
        num_items: 300,
        d_inv: 4,
        d_spu: 4,
        num_envs_true: 2,
        flip_strength: 1.0,
        density: 0.05,
        seed: PLANTED_SEED,
    }
}

fn planted_inputs() -> RunInputs {
    let (_, features, envs) = make_synthetic(&planted_spec()).unwrap();
    let mut r = stage_rng(PLANTED_SEED, "split", 0);
    let split = split_iid_ood(&envs, 0.1, &mut r).unwrap();
    RunInputs {
        split,
        features,
        true_envs: Some(envs),
    }
}

fn planted_config(run_dir: &Path, mode: ParetoMode) -> RunConfig {
    let mut user = ConfigFile::from_pairs([
        ("embedding_dim", "16"),
        ("num_envs", "2"),
        ("epochs_him", "3"),
        ("identify_rounds", "4"),
        ("iters_mask", "60"),
        ("epochs_final", "40"),
        ("outer_iters", "1"),
        ("outer_tol", "0"),
        ("eval_k", "10"),
        ("neighbor_k", "10"),
        ("batch_size", "512"),
        ("mask_lambda", "0"),
    ]);
    user.set("seed", &PLANTED_RUN_SEED.to_string());
    user.set("pareto_mode", mode.as_str());
    user.set("run_dir", &run_dir.display().to_string());
    RunConfig::from_config(&resolve(&user).unwrap()).unwrap()
}

fn recall_of(artifacts: &RunArtifacts, split: &str) -> f64 {
    artifacts
        .metrics
        .iter()
        .find(|row| row.split == split && row.metric == "recall")
        .expect("recall row present")
        .value
}

fn ari_between(truth: &EnvPartition, found: &EnvPartition) -> f64 {
    let lookup: BTreeMap<(u32, u32), usize> = truth
        .pairs()
        .iter()
        .copied()
        .zip(truth.assignment().iter().copied())
        .collect();
    let mut t = Vec::new();
    let mut o = Vec::new();
    for (pair, &env) in found.pairs().iter().zip(found.assignment()) {
        if let Some(&te) = lookup.get(pair) {
            t.push(te);
            o.push(env);
        }
    }
    adjusted_rand_index(&t, &o).unwrap()
}

fn main() {
    let inputs = planted_inputs();
    println!(
        "train {} pos, iid {} pos, ood {} pos",
        inputs.split.train.num_positives(),
        inputs.split.test_iid.num_positives(),
        inputs.split.test_ood.num_positives()
    );

    let mut table = Vec::new();
    for mode in [ParetoMode::ErmOnly, ParetoMode::IrmOnly, ParetoMode::Adaptive] {
        let dir = tempfile::tempdir().unwrap();
        let config = planted_config(&dir.path().join("run"), mode);
        let started = Instant::now();
        let artifacts = run_with(&inputs, &config, false).unwrap();
        let took = started.elapsed();
        let m = &artifacts.mask.m;
        let inv = m[..4].iter().sum::<f64>() / 4.0;
        let spu = m[4..].iter().sum::<f64>() / 4.0;
        let iid = recall_of(&artifacts, "test_iid");
        let ood = recall_of(&artifacts, "test_ood");
        let last = artifacts.outer[0].mask_logs.last().unwrap();
        println!(
            "{:<9} {:>5.1?}  mask [{}]  inv {:.3} spu {:.3} sep {:+.3}  R@10 iid {:.4} ood {:.4}  w_erm(last) {:.3} erm {:.4} irm {:.3e}",
            mode.as_str(),
            took,
            m.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "),
            inv,
            spu,
            inv - spu,
            iid,
            ood,
            last.w_erm,
            last.erm,
            last.irm,
        );
        table.push((mode, iid, ood));
    }

    let e = table.iter().find(|t| t.0 == ParetoMode::ErmOnly).unwrap();
    let i = table.iter().find(|t| t.0 == ParetoMode::IrmOnly).unwrap();
    let a = table.iter().find(|t| t.0 == ParetoMode::Adaptive).unwrap();
    let best_iid = e.1.max(i.1).max(a.1);
    let best_ood = e.2.max(i.2).max(a.2);
    let within = |v: f64, b: f64| v >= 0.9 * b;
    println!(
        "c7: erm_wins_iid {}  irm_wins_ood {}  ada_within_both {}  erm_not_both {}  irm_not_both {}",
        e.1 == best_iid,
        i.2 == best_ood,
        within(a.1, best_iid) && within(a.2, best_ood),
        !(within(e.1, best_iid) && within(e.2, best_ood)),
        !(within(i.1, best_iid) && within(i.2, best_ood)),
    );

    let (set, features, envs) = make_synthetic(&planted_spec()).unwrap();
    let graph = ItemGraph::build(&set, 10);
    let opts = IdentifyOptions {
        num_envs: 2,
        max_rounds: 6,
        embed_dim: 16,
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
    };
    let mut r = stage_rng(PLANTED_RUN_SEED, "acceptance-identify", 0);
    let started = Instant::now();
    let outcome = identify(&set, &RawContent(&features), &graph, &opts, &mut r).unwrap();
    println!(
        "c8: ARI {:+.4} (conv {}, {:.1?})",
        ari_between(&envs, &outcome.partition),
        outcome.converged,
        started.elapsed()
    );
}
