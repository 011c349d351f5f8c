//! Release gates. Each test prints one `criterion N (...): PASS` line so a
//! full run with `--nocapture` reads as a checklist. Criteria 5 and 6 share
//! one cached experiment: six model flavors trained over five seeds on a
//! skewed five-scenario dataset (the 100k/30k/2k/2k/3k shape at one fifth
//! scale, so the whole suite stays inside a desk-scale time budget).

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::OnceLock;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use m2m::config::{LossConfig, ModelConfig, TrainConfig, Variant};
use m2m::datagen::{self, split::SplitSpec, GenConfig};
use m2m::features::{Batch, Featurizer};
use m2m::meta::{M2MModel, MetaTower};
use m2m::model::{build_model, rebuild_model};
use m2m::tensor::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor};
use m2m::train::{evaluate, nmae, poisson_loss, predict, smape, train};

// ---------------------------------------------------------------------------
// Shared experiment for the directional criteria.

const GEN_SEED: u64 = 9;
const TRAIN_SEEDS: [u64; 5] = [101, 102, 103, 104, 105];
const EPOCHS: usize = 4;

/// One fifth of the reference 100k/30k/2k/2k/3k advertiser skew; the ratios
/// are what the directional claims depend on, not the absolute counts.
const SCENARIO_COUNTS: [usize; 5] = [20_000, 6_000, 400, 400, 600];
const MINOR_SCENARIOS: [u32; 2] = [2, 3];
const DOMINANT_SCENARIO: u32 = 0;

fn experiment_gen_config() -> GenConfig {
    let mut g = GenConfig::default();
    g.scenario_counts = SCENARIO_COUNTS.to_vec();
    g.seq_len = 24;
    g.n_days = 120;
    g.corr_probes = 2_000;
    g.seed = GEN_SEED;
    g
}

fn compact_model_config() -> ModelConfig {
    ModelConfig {
        d_input: 4,
        d_pos: 4,
        heads: 2,
        d_view: 16,
        n_experts: 4,
        d_scenario: 8,
        scenario_depth: 1,
        d_meta: 8,
        meta_depth: 2,
        tower_layers: 1,
        window: 16,
        ..ModelConfig::default()
    }
}

fn experiment_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        batch_size: 256,
        seed,
        ..TrainConfig::default()
    }
}

struct Flavor {
    name: &'static str,
    variant: Variant,
    tweak: fn(&mut ModelConfig),
}

fn no_tweak(_: &mut ModelConfig) {}

const FLAVORS: [Flavor; 6] = [
    Flavor { name: "full", variant: Variant::M2m, tweak: no_tweak },
    Flavor { name: "shared_bottom", variant: Variant::SharedBottom, tweak: no_tweak },
    Flavor { name: "mmoe", variant: Variant::Mmoe, tweak: no_tweak },
    Flavor { name: "wo_mt", variant: Variant::M2m, tweak: |c| c.disable_meta_tower = true },
    Flavor { name: "wo_ma", variant: Variant::M2m, tweak: |c| c.disable_meta_attention = true },
    Flavor { name: "wo_tl", variant: Variant::M2m, tweak: |c| c.disable_transformer = true },
];

#[derive(Debug, Clone, Copy)]
struct FlavorScores {
    overall_nmae: f64,
    minor_nmae: f64,
    dominant_nmae: f64,
}

struct Experiment {
    /// (train seed, flavor name) -> test-split scores.
    scores: BTreeMap<(u64, &'static str), FlavorScores>,
}

static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();

/// NMAE pooled over every task for the samples in the given scenarios.
fn scenario_nmae(pred: &Tensor, batch: &Batch, scenarios: &[u32]) -> f64 {
    let m = pred.shape()[1];
    let mut p = Vec::new();
    let mut y = Vec::new();
    for i in 0..batch.n {
        if scenarios.contains(&batch.scenario_of[i]) {
            for t in 0..m {
                p.push(pred.data()[i * m + t]);
                y.push(batch.labels.data()[i * m + t]);
            }
        }
    }
    nmae(&p, &y).expect("scenario present with nonzero labels")
}

fn experiment() -> &'static Experiment {
    EXPERIMENT.get_or_init(|| {
        let data = datagen::generate(&experiment_gen_config()).expect("generate");
        let (tr, va, te) =
            datagen::split::split(data.samples, &SplitSpec::default()).expect("split");
        println!(
            "experiment: split sizes train={} valid={} test={}",
            tr.len(),
            va.len(),
            te.len()
        );

        let mut mc = compact_model_config();
        let f = Featurizer::fit(&tr, &data.meta, mc.window).expect("fit");
        mc.shape = f.shape().clone();
        mc.validate().expect("valid model config");
        let train_b = f.transform(&tr).expect("train batch");
        let valid_b = f.transform(&va).expect("valid batch");
        let test_b = f.transform(&te).expect("test batch");

        let mut scores = BTreeMap::new();
        for &seed in &TRAIN_SEEDS {
            for fl in &FLAVORS {
                let mut cfg = mc.clone();
                (fl.tweak)(&mut cfg);
                let mut store = ParamStore::new();
                let mut model =
                    build_model(&mut store, &cfg, fl.variant, seed).expect("build");
                train(
                    model.as_mut(),
                    &mut store,
                    &train_b,
                    &valid_b,
                    &experiment_train_config(seed),
                )
                .expect("train");
                let pred = predict(model.as_ref(), &store, &test_b, 512).expect("predict");
                let all: Vec<u32> = (0..5).collect();
                let s = FlavorScores {
                    overall_nmae: scenario_nmae(&pred, &test_b, &all),
                    minor_nmae: scenario_nmae(&pred, &test_b, &MINOR_SCENARIOS),
                    dominant_nmae: scenario_nmae(&pred, &test_b, &[DOMINANT_SCENARIO]),
                };
                println!(
                    "experiment: seed {seed} {:>14}  overall {:.4}  minor {:.4}  dominant {:.4}",
                    fl.name, s.overall_nmae, s.minor_nmae, s.dominant_nmae
                );
                scores.insert((seed, fl.name), s);
            }
        }
        Experiment { scores }
    })
}

fn score(ex: &Experiment, seed: u64, flavor: &'static str) -> FlavorScores {
    ex.scores[&(seed, flavor)]
}

// ---------------------------------------------------------------------------
// Criterion 1: tape gradients match central finite differences end to end.

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let mut gen = GenConfig::default();
    gen.scenario_counts = vec![6, 6];
    gen.tasks.truncate(2);
    for t in &mut gen.tasks {
        for row in &mut t.rho {
            row.truncate(2);
        }
        t.rho.truncate(2);
        t.mean_scale.truncate(2);
    }
    gen.obs_scale.truncate(2);
    gen.seq_len = 10;
    gen.n_days = 30;
    gen.corr_probes = 10;
    gen.seed = 41;
    let data = datagen::generate(&gen).expect("generate");

    let cfg = ModelConfig {
        d_input: 4,
        d_pos: 4,
        heads: 2,
        d_view: 4,
        n_experts: 2,
        d_scenario: 4,
        scenario_depth: 1,
        d_meta: 4,
        meta_depth: 2,
        tower_layers: 1,
        window: 3,
        ..ModelConfig::default()
    };
    let f = Featurizer::fit(&data.samples, &data.meta, cfg.window).expect("fit");
    let mut cfg = cfg;
    cfg.shape = f.shape().clone();
    cfg.validate().expect("valid");
    let batch = f.transform(&data.samples[..4]).expect("batch");
    let loss_cfg = LossConfig::default();

    // A small step keeps the kink guard from rejecting most inits: with
    // thousands of pre-activations in the graph, some sits near zero far
    // more often than any single one does.
    let fd = GradCheckConfig { h: 1e-5, ..GradCheckConfig::default() };
    for seed in 0..10u64 {
        // Finite differences lie within ~h of a LeakyReLU kink; that is a
        // property of the probe, not the tape, so such an init is re-rolled.
        let mut checked = false;
        for attempt in 0..10u64 {
            let mut store = ParamStore::new();
            let model = build_model(&mut store, &cfg, Variant::M2m, 1_000 * seed + attempt)
                .expect("build");
            let report = grad_check(
                &mut store,
                |g, s| {
                    let rates = model.forward_rates(g, s, &batch)?;
                    m2m::train::joint_loss(g, s, &rates, &batch.labels, &loss_cfg)
                        .map_err(|e| match e {
                            m2m::train::TrainError::Tensor(t) => t,
                            other => panic!("unexpected loss error: {other}"),
                        })
                },
                &fd,
            )
            .expect("grad check");
            if report.near_kink(fd.h) {
                continue;
            }
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
            println!(
                "criterion 1: seed {seed} max rel err {:.3e} over {} coordinates",
                report.max_rel_err, report.coords_checked
            );
            checked = true;
            break;
        }
        assert!(checked, "seed {seed}: every init landed near a kink");
    }
    println!("criterion 1 (end-to-end gradient check): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 2: metric oracles and randomized properties.

#[test]
fn criterion_2_metric_oracles_and_properties() {
    // Fixture vectors and their hand-computed values.
    assert!((nmae(&[2.0, 3.0], &[1.0, 3.0]).unwrap() - 0.25).abs() < 1e-12);
    assert!((smape(&[2.0, 3.0], &[1.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(nmae(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
    assert_eq!(smape(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
    // A (0, 0) pair contributes a zero term by convention.
    assert_eq!(smape(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let mut y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        // Some exact zeros, but never an all-zero label vector.
        for v in y.iter_mut() {
            if rng.gen_bool(0.1) {
                *v = 0.0;
            }
        }
        y[0] = y[0].max(0.5);

        let s = smape(&p, &y).unwrap();
        assert!((0.0..=2.0).contains(&s), "smape {s} out of [0,2]");

        let c = rng.gen_range(0.1..10.0);
        let pc: Vec<f64> = p.iter().map(|v| v * c).collect();
        let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
        let a = nmae(&p, &y).unwrap();
        let b = nmae(&pc, &yc).unwrap();
        assert!((a - b).abs() < 1e-12, "nmae not scale invariant: {a} vs {b}");
    }
    println!("criterion 2 (metric oracles and properties): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3: the Poisson loss is minimized at the label.

#[test]
fn criterion_3_poisson_loss_is_minimized_at_the_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1_000 {
        let y = rng.gen_range(0..=50) as f64;
        let lo = (y - 2.0).max(0.01);
        let steps = ((y + 2.0 - lo) / 0.01).round() as usize;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=steps {
            let rate = lo + 0.01 * i as f64;
            let l = poisson_loss(&[rate], &[y]).unwrap();
            if l < best.0 {
                best = (l, rate);
            }
        }
        assert!(
            (best.1 - y.max(0.01)).abs() <= 0.01 + 1e-9,
            "y={y}: argmin at {}",
            best.1
        );
    }
    println!("criterion 3 (Poisson argmin at the label): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4: generator calibration against the published targets.

#[test]
fn criterion_4_generator_hits_correlation_targets() {
    // Three scenarios, expenditure-style task, pairwise targets.
    let targets = [(0usize, 1usize, 0.67), (0, 2, 0.57), (1, 2, 0.70)];
    let mut sums = [0.0f64; 3];
    let seeds = 10u64;
    for seed in 0..seeds {
        let mut g = GenConfig::default();
        g.scenario_counts = vec![2, 2, 2];
        g.tasks.truncate(3);
        g.tasks.swap(0, 2); // expenditure first; its rho carries the targets
        g.tasks.truncate(1);
        let t = &mut g.tasks[0];
        assert_eq!(t.name, "expenditure");
        t.rho = vec![
            vec![1.0, 0.67, 0.57],
            vec![0.67, 1.0, 0.70],
            vec![0.57, 0.70, 1.0],
        ];
        t.mean_scale.truncate(3);
        g.obs_scale.truncate(3);
        g.corr_probes = 50_000;
        g.seed = 1_000 + seed;
        let data = datagen::generate(&g).expect("generate");
        let rho = &data.meta.empirical_rho[0];
        assert_eq!(rho.task, "expenditure");
        assert_eq!(rho.probes, 50_000);
        for (k, &(i, j, _)) in targets.iter().enumerate() {
            sums[k] += rho.rho[i][j];
        }
    }
    for (k, &(i, j, want)) in targets.iter().enumerate() {
        let mean = sums[k] / seeds as f64;
        println!(
            "criterion 4: scenarios {i}-{j} mean empirical {mean:+.4} target {want:+.2}"
        );
        assert!(
            (mean - want).abs() <= 0.05,
            "pair {i}-{j}: mean {mean:.4} vs target {want}"
        );
    }
    println!("criterion 4 (generator correlation calibration): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: gains concentrate where data is scarce.

#[test]
fn criterion_5_transfer_wins_in_minor_scenarios() {
    let ex = experiment();
    let mut wins = 0;
    for &seed in &TRAIN_SEEDS {
        let full = score(ex, seed, "full");
        let sb = score(ex, seed, "shared_bottom");
        let mmoe = score(ex, seed, "mmoe");
        let minor_ok = full.minor_nmae <= 0.95 * sb.minor_nmae;
        let dominant_ok = full.dominant_nmae <= 1.02 * mmoe.dominant_nmae;
        println!(
            "criterion 5: seed {seed} minor {:.4} vs SB {:.4} ({}) dominant {:.4} vs MMoE {:.4} ({})",
            full.minor_nmae,
            sb.minor_nmae,
            if minor_ok { "ok" } else { "MISS" },
            full.dominant_nmae,
            mmoe.dominant_nmae,
            if dominant_ok { "ok" } else { "MISS" },
        );
        if minor_ok && dominant_ok {
            wins += 1;
        }
    }
    assert!(wins >= 4, "directional claim held in only {wins}/5 seeds");
    println!("criterion 5 (minor-scenario transfer): PASS ({wins}/5 seeds)");
}

// ---------------------------------------------------------------------------
// Criterion 6: removing any meta stage costs accuracy.

#[test]
fn criterion_6_every_ablation_costs_accuracy() {
    let ex = experiment();
    for ablation in ["wo_mt", "wo_ma", "wo_tl"] {
        let mut wins = 0;
        for &seed in &TRAIN_SEEDS {
            let full = score(ex, seed, "full").overall_nmae;
            let cut = score(ex, seed, ablation).overall_nmae;
            println!(
                "criterion 6: seed {seed} full {full:.4} vs {ablation} {cut:.4} ({})",
                if full <= cut { "ok" } else { "MISS" }
            );
            if full <= cut {
                wins += 1;
            }
        }
        assert!(
            wins >= 4,
            "full beat {ablation} in only {wins}/5 seeds"
        );
        println!("criterion 6: full ≤ {ablation} in {wins}/5 seeds");
    }
    println!("criterion 6 (ablation ordering): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 7: structural invariants.

/// A small featurized batch plus a model config fitted to its shape.
fn tiny_fixture() -> (ModelConfig, Featurizer, Batch) {
    let mut gen = GenConfig::default();
    gen.scenario_counts = vec![8, 8, 8];
    gen.tasks.truncate(3);
    for t in &mut gen.tasks {
        for row in &mut t.rho {
            row.truncate(3);
        }
        t.rho.truncate(3);
        t.mean_scale.truncate(3);
    }
    gen.obs_scale.truncate(3);
    gen.seq_len = 12;
    gen.n_days = 40;
    gen.corr_probes = 10;
    gen.seed = 77;
    let data = datagen::generate(&gen).expect("generate");
    let mut cfg = ModelConfig {
        d_input: 4,
        d_pos: 4,
        heads: 2,
        d_view: 8,
        n_experts: 3,
        d_scenario: 6,
        scenario_depth: 1,
        d_meta: 6,
        meta_depth: 2,
        tower_layers: 1,
        window: 6,
        ..ModelConfig::default()
    };
    let f = Featurizer::fit(&data.samples, &data.meta, cfg.window).expect("fit");
    cfg.shape = f.shape().clone();
    cfg.validate().expect("valid");
    let batch = f.transform(&data.samples[..12]).expect("batch");
    (cfg, f, batch)
}

#[test]
fn criterion_7_structural_invariants() {
    let (cfg, featurizer, batch) = tiny_fixture();

    // Attention weights over experts are a distribution per sample.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = M2MModel::init(&mut store, &cfg, &mut rng).expect("init");
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &batch).expect("forward");
        for &a in &out.alphas {
            let t = g.value(a);
            let k = t.shape()[1];
            for row in 0..t.shape()[0] {
                let s: f64 = t.data()[row * k..(row + 1) * k].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "alpha row sums to {s}");
            }
        }
    }

    // A zeroed hypernetwork makes every meta tower the identity on
    // nonnegative inputs: generated weights vanish, the residual passes
    // through, and LeakyReLU is exact there.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tower = MetaTower::init(&mut store, "t", &cfg, &mut rng).expect("tower");
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(
            Tensor::from_vec(&[2, cfg.d_meta], (0..2 * cfg.d_meta).map(|i| i as f64 * 0.3).collect())
                .unwrap(),
        );
        let s = g.input(Tensor::from_vec(&[2, cfg.d_scenario], vec![0.7; 2 * cfg.d_scenario]).unwrap());
        let out = tower.forward(&mut g, &store, x, s).expect("tower forward");
        let got = g.value(out).data();
        let want: Vec<f64> = (0..2 * cfg.d_meta).map(|i| i as f64 * 0.3).collect();
        for (a, b) in got.iter().zip(&want) {
            assert_eq!(a, b, "zero-hypernetwork tower moved its input");
        }
    }

    // Self-attention without positional signal commutes with any
    // permutation of the timesteps.
    {
        use m2m::backbone::Trunk;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trunk = Trunk::init(&mut store, "bb", &cfg, &mut rng).expect("trunk");
        let dm = cfg.d_model_behavior();
        let w = 4;
        let data: Vec<f64> = (0..w * dm).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&p| data[p * dm..(p + 1) * dm].to_vec())
            .collect();

        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[w, dm], data).unwrap());
        let base = trunk.mha_behavior.forward(&mut g, &store, x, 1, w).expect("mha").out;
        let base = g.value(base).data().to_vec();

        let mut g = Graph::new();
        let xp = g.input(Tensor::from_vec(&[w, dm], permuted).unwrap());
        let outp = trunk.mha_behavior.forward(&mut g, &store, xp, 1, w).expect("mha").out;
        let shuffled = g.value(outp).data();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..dm {
                assert!(
                    (shuffled[i * dm + c] - base[p * dm + c]).abs() < 1e-12,
                    "row {i} col {c} not a permutation of the unpermuted output"
                );
            }
        }
    }

    // Checkpoint round trip changes nothing an evaluation can see.
    {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        let model = build_model(&mut store, &cfg, Variant::M2m, 12).expect("build");
        let before = evaluate(model.as_ref(), &store, &batch, 64).expect("eval");
        m2m::checkpoint::save(
            &path,
            &m2m::checkpoint::Checkpoint {
                variant: Variant::M2m,
                config: cfg.clone(),
                baseline: None,
                scales: model.output_scales(),
                config_hash: String::new(),
                epochs_done: 0,
                featurizer: featurizer.clone(),
                store,
                adam: None,
            },
        )
        .expect("save");
        let back = m2m::checkpoint::load(&path).expect("load");
        let mut model2 =
            rebuild_model(&back.store, &back.config, back.variant, None).expect("rebuild");
        model2.set_output_scales(&back.scales);
        let after = evaluate(model2.as_ref(), &back.store, &batch, 64).expect("eval");
        assert_eq!(before, after, "evaluation changed across a checkpoint round trip");
    }

    println!("criterion 7 (structural invariants): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 8: identical (config, seed) gives an identical history file.

#[test]
fn criterion_8_training_history_is_deterministic() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        format!(
            r#"
data_dir = "{data}"

[model]
variant = "m2m"
window = 8
d_input = 4
d_pos = 4
heads = 2
d_view = 8
n_experts = 3
d_scenario = 6
scenario_depth = 1
d_meta = 6
meta_depth = 2
tower_layers = 1

[train]
epochs = 2
batch_size = 64
seed = 21

[gen]
scenario_counts = [150, 90, 60, 50, 70]
seq_len = 12
n_days = 60
corr_probes = 50
seed = 13
"#,
            data = root.join("data").display()
        ),
    )
    .expect("write config");

    let bin = env!("CARGO_BIN_EXE_m2m");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("spawn");
        assert!(
            out.status.success(),
            "m2m {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let cfg_arg = config.to_str().unwrap();
    run(&["--config", cfg_arg, "gen-data"]);
    let out_a = root.join("a");
    let out_b = root.join("b");
    run(&["--config", cfg_arg, "--out", out_a.to_str().unwrap(), "train"]);
    run(&["--config", cfg_arg, "--out", out_b.to_str().unwrap(), "train"]);

    let a = std::fs::read(out_a.join("history.csv")).expect("history a");
    let b = std::fs::read(out_b.join("history.csv")).expect("history b");
    assert!(!a.is_empty());
    assert_eq!(a, b, "same config and seed produced different histories");
    println!("criterion 8 (deterministic training history): PASS");
}
