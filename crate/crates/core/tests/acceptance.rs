//! Acceptance suite. Runs every criterion in sequence, prints one
//! `PASS`/`FAIL` line per criterion, and exits nonzero if a gating
//! criterion fails.

use milsi::bagging::{
    compose_bag, compute_patch_label, mil_distribute, split_into_patches, Bag, BagSoftLabel, LabeledImage,
};
use milsi::cli::{self, comparison_text, CompareRow, ExperimentSpec, RunReport};
use milsi::image::{Image, Mask};
use milsi::model::{attention_rollout, Model, ModelConfig};
use milsi::rng::rng_from_seed;
use milsi::synthdata::{augment, generate_dataset, AugConfig, Confound, Dataset, GenConfig, SplitSizes};
use milsi::tensor::{finite_difference_check, Graph, Tensor};
use milsi::trainer::{
    batch_gradients, batch_loss_graph, evaluate, LossWeights, LrSchedule, MetricsReport, ScheduleKind, TrainConfig,
    Variant,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

type Check = (bool, String);

fn images_of(split: &[milsi::synthdata::Sample]) -> Vec<LabeledImage> {
    split.iter().map(|s| s.image.clone()).collect()
}

fn random_labeled(rng: &mut impl Rng, id: u64, side: usize, density: f64) -> LabeledImage {
    let px = Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.random::<u8>() as f32 / 255.0).collect())
        .unwrap();
    let mask = Mask::new(
        side,
        side,
        (0..side * side)
            .map(|_| if rng.random_bool(density) { rng.random_range(1..=2u8) } else { 0 })
            .collect(),
    )
    .unwrap();
    LabeledImage::new(id, px, mask).unwrap()
}

type PatchKey = (Vec<u32>, u64, Vec<u64>);

fn patch_keys(bags: &[Bag]) -> Vec<PatchKey> {
    let mut keys: Vec<PatchKey> = bags
        .iter()
        .flat_map(|b| {
            b.patches.iter().zip(&b.labels).map(|(p, l)| {
                (
                    p.iter().map(|v| v.to_bits()).collect(),
                    l.mr.to_bits(),
                    l.per_category.iter().map(|v| v.to_bits()).collect(),
                )
            })
        })
        .collect();
    keys.sort();
    keys
}

fn c1_shuffle_conservation() -> Check {
    let start = Instant::now();
    let mut rng = rng_from_seed(101);
    let mut failures = 0;
    for trial in 0..1000u64 {
        let b = *[1usize, 2, 8].choose(&mut rng).unwrap();
        let n = *[4usize, 36, 144].choose(&mut rng).unwrap();
        let p = 2;
        let side = p * (n as f64).sqrt() as usize;
        let batch: Vec<Bag> = (0..b)
            .map(|i| split_into_patches(&random_labeled(&mut rng, trial * 8 + i as u64, side, 0.4), p, 2).unwrap())
            .collect();
        let seed: u64 = rng.random();
        let d = mil_distribute(&batch, seed).unwrap();

        let mut src_seen = vec![false; b * n];
        let mut dst_seen = vec![false; b * n];
        let mut ok = d.plan.is_bijection() && d.plan.mapping.len() == b * n;
        for &[db, ds, sb, ss] in &d.plan.mapping {
            if db >= b || sb >= b || ds >= n || ss >= n {
                ok = false;
                break;
            }
            ok &= !std::mem::replace(&mut dst_seen[db * n + ds], true);
            ok &= !std::mem::replace(&mut src_seen[sb * n + ss], true);
            ok &= d.bags[db].patches[ds] == batch[sb].patches[ss] && d.bags[db].labels[ds] == batch[sb].labels[ss];
        }
        ok &= src_seen.iter().all(|&s| s) && dst_seen.iter().all(|&s| s);
        ok &= patch_keys(&batch) == patch_keys(&d.bags);
        if !ok {
            failures += 1;
        }
    }
    let t = start.elapsed();
    (
        failures == 0 && t < Duration::from_secs(30),
        format!("{failures}/1000 trials violated conservation or bijection; {:.2}s (limit 30s)", t.as_secs_f64()),
    )
}

/// Independent patch labelling: count pixels per category.
fn oracle_patch(mask: &Mask, gy: usize, gx: usize, p: usize, k: usize) -> (f64, Vec<f64>) {
    let mut counts = vec![0usize; k + 1];
    for y in gy * p..(gy + 1) * p {
        for x in gx * p..(gx + 1) * p {
            counts[mask.get(y, x) as usize] += 1;
        }
    }
    let masked: usize = counts[1..].iter().sum();
    let mr = masked as f64 / (p * p) as f64;
    let mut per = vec![0.0; k];
    if masked > 0 {
        let mut best = 1;
        for c in 2..=k {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        per[best - 1] = mr;
    }
    (mr, per)
}

fn c2_soft_label_algebra() -> Check {
    let mut rng = rng_from_seed(202);
    let k = 2;
    let (mut structure_bad, mut bag_err, mut shuffle_err) = (0usize, 0.0f64, 0.0f64);
    for trial in 0..250u64 {
        let p = *[2usize, 4, 8, 16].choose(&mut rng).unwrap();
        let grid = rng.random_range(1..=4usize);
        let side = p * grid;
        let density = rng.random_range(0.0..1.0);
        let imgs: Vec<LabeledImage> = (0..4).map(|i| random_labeled(&mut rng, trial * 4 + i, side, density)).collect();
        let bags: Vec<Bag> = imgs.iter().map(|im| split_into_patches(im, p, k).unwrap()).collect();
        for (im, bag) in imgs.iter().zip(&bags) {
            let (mut tot, mut per_sum) = (0.0f64, vec![0.0f64; k]);
            for (slot, label) in bag.labels.iter().enumerate() {
                let (mr, per) = oracle_patch(&im.mask, slot / grid, slot % grid, p, k);
                let nonzero: Vec<f64> = label.per_category.iter().copied().filter(|v| *v != 0.0).collect();
                let one_nonzero = if mr > 0.0 { nonzero == vec![mr] } else { nonzero.is_empty() };
                if label.mr != mr || label.per_category != per || !one_nonzero {
                    structure_bad += 1;
                }
                let mut mp = Vec::with_capacity(p * p);
                for y in (slot / grid) * p..(slot / grid + 1) * p {
                    for x in (slot % grid) * p..(slot % grid + 1) * p {
                        mp.push(im.mask.get(y, x));
                    }
                }
                if compute_patch_label(&mp, k).unwrap() != *label {
                    structure_bad += 1;
                }
                tot += mr;
                for (a, v) in per_sum.iter_mut().zip(&per) {
                    *a += v;
                }
            }
            let s = bag.soft_label();
            bag_err = bag_err.max((s.total - tot).abs());
            for (a, b) in s.per_category.iter().zip(&per_sum) {
                bag_err = bag_err.max((a - b).abs());
            }
        }
        let before: f64 = bags.iter().map(|b| b.soft_label().total).sum();
        let d = mil_distribute(&bags, rng.random()).unwrap();
        let after: f64 = d.soft_labels.iter().map(|l: &BagSoftLabel| l.total).sum();
        shuffle_err = shuffle_err.max((before - after).abs());
    }
    (
        structure_bad == 0 && bag_err <= 1e-5 && shuffle_err <= 1e-5,
        format!(
            "1000 masks: {structure_bad} patch-label mismatches; max bag error {bag_err:.2e}; max shuffle total drift {shuffle_err:.2e} (tol 1e-5)"
        ),
    )
}

fn c3_round_trip() -> Check {
    let mut rng = rng_from_seed(303);
    let mut bad = 0;
    for (p, max_grid) in [(16usize, 6usize), (32, 4), (64, 4), (128, 2)] {
        for i in 0..100u64 {
            let side = p * rng.random_range(1..=max_grid);
            let img = random_labeled(&mut rng, i, side, 0.3);
            let back = compose_bag(&split_into_patches(&img, p, 2).unwrap(), side).unwrap();
            let exact = back.height == side
                && back.width == side
                && back.data.iter().zip(&img.pixels.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if !exact {
                bad += 1;
            }
        }
    }
    (bad == 0, format!("{bad}/400 images not bit-exact at p in {{16,32,64,128}}"))
}

fn c4_gradient_check() -> Check {
    let start = Instant::now();
    let mc = ModelConfig {
        image_side: 32,
        patch_side: 8,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mil_hidden: 16,
        ..ModelConfig::default()
    };
    let gc = GenConfig {
        image_side: 32,
        normal_cells: (2, 3),
        cancer_cells: (1, 1),
        normal_radius: (3.0, 4.0),
        cancer_radius: (5.0, 6.0),
        ..GenConfig::default()
    };
    let batch: Vec<LabeledImage> =
        (0..2).map(|i| milsi::synthdata::generate_sample(&gc, 40 + i, i as u8).unwrap()).collect();
    let model: Model<f64> = Model::new(mc, 11).unwrap().cast();
    let objectives = [
        ("l_MIL", LossWeights { mil: 1.0, mil_cls: 0.0, cls: 0.0 }),
        ("l_MIL_CLS", LossWeights { mil: 0.0, mil_cls: 1.0, cls: 0.0 }),
        ("l_CLS", LossWeights { mil: 0.0, mil_cls: 0.0, cls: 1.0 }),
        ("sum", LossWeights::default()),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, w) in objectives {
        let cfg = TrainConfig { loss_weights: w, ..TrainConfig::default() };
        let (_, grads) = batch_gradients(&model, &batch, Variant::MilSi, 7, &cfg).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let params = model.flat_params();
        let mut probe = model.clone();
        let r = finite_difference_check(
            |p| {
                probe.set_flat_params(p).unwrap();
                let mut g = Graph::new();
                let bound = probe.bind(&mut g, false);
                let l = batch_loss_graph(&probe, &mut g, &bound, &batch, Variant::MilSi, 7, &cfg).unwrap();
                g.scalar(l.total)
            },
            &params,
            &analytic,
            1e-4,
        )
        .unwrap();
        ok &= r.max_rel_error < 1e-2 && r.median_rel_error < 1e-3;
        parts.push(format!("{name} max {:.1e} median {:.1e}", r.max_rel_error, r.median_rel_error));
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(300);
    (
        ok,
        format!(
            "{} params, h=1e-4: {}; {:.1}s (limits: max<1e-2, median<1e-3, 300s)",
            model.num_params(),
            parts.join("; "),
            t.as_secs_f64()
        ),
    )
}

fn c5_permutation_invariance() -> Check {
    let mut rng = rng_from_seed(505);
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 5).unwrap();
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let tokens: Vec<f32> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let head = |rows: &[f32]| -> Vec<f32> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![n, d], rows.to_vec()).unwrap());
        let y = model.mil_head(&mut g, &bound, x, n).unwrap();
        g.value(y).data().to_vec()
    };
    let base = head(&tokens);
    let img = random_labeled(&mut rng, 0, cfg.image_side, 0.3);
    let bag = split_into_patches(&img, cfg.patch_side, cfg.categories).unwrap();
    let base_tokens = model.tokens(&img.pixels).unwrap().patch_tokens;

    let (mut head_dev, mut min_backbone_dist) = (0.0f32, f64::INFINITY);
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..n).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.shuffle(&mut rng);
        }
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| tokens[i * d..(i + 1) * d].to_vec()).collect();
        for (a, b) in head(&permuted).iter().zip(&base) {
            head_dev = head_dev.max((a - b).abs());
        }
        let mut shuffled = bag.clone();
        shuffled.patches = perm.iter().map(|&i| bag.patches[i].clone()).collect();
        let composed = compose_bag(&shuffled, cfg.image_side).unwrap();
        let toks = model.tokens(&composed).unwrap().patch_tokens;
        // Slot j of the permuted image holds original patch perm[j].
        let dist: f64 = (0..n)
            .map(|j| {
                toks[j]
                    .iter()
                    .zip(&base_tokens[perm[j]])
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        min_backbone_dist = min_backbone_dist.min(dist);
    }
    (
        head_dev as f64 <= 1e-5 && min_backbone_dist > 1e-6,
        format!(
            "100 permutations: MIL head max deviation {head_dev:.2e} (tol 1e-5); backbone token min distance {min_backbone_dist:.3e} (must exceed 1e-6)"
        ),
    )
}

/// Brute-force confusion counting and metric formulas.
fn oracle_metrics(pred: &[usize], actual: &[usize]) -> [f64; 5] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        if pred[i] == 1 && actual[i] == 1 {
            tp += 1;
        } else if pred[i] == 1 {
            fp += 1;
        } else if actual[i] == 1 {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let accuracy = div(tp + tn, tp + fp + fn_ + tn);
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let specificity = div(tn, tn + fp);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    [accuracy, precision, recall, specificity, f1]
}

fn c6_metrics_oracle() -> Check {
    let mut rng = rng_from_seed(606);
    let mut bad = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=200usize);
        let bias = rng.random_range(0.0..1.0);
        let actual: Vec<usize> = (0..len).map(|_| rng.random_bool(bias) as usize).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_bool(bias) as usize).collect();
        let m = MetricsReport::from_predictions(&pred, &actual);
        let got = [m.accuracy, m.precision, m.recall, m.specificity, m.f1];
        if got.iter().zip(oracle_metrics(&pred, &actual)).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    (bad == 0, format!("{bad}/1000 random vectors differ from the brute-force oracle (exact)"))
}

fn c7_schedule() -> Check {
    let mut ok = true;
    let mut worst = 0.0f64;
    for lr0 in [TrainConfig::full().lr0, TrainConfig::desk().lr0] {
        for epochs in [2usize, 10, 50, 51, 100] {
            for kind in [ScheduleKind::Cosine, ScheduleKind::Staircase { steps: 20 }] {
                let s = LrSchedule::new(lr0, 1.0 / 20.0, epochs, kind);
                let first = (s.lr(0) - lr0).abs() / lr0;
                let last = (s.lr(epochs - 1) - lr0 / 20.0).abs() / (lr0 / 20.0);
                worst = worst.max(first).max(last);
                ok &= first <= 1e-12 && last <= 1e-12;
                ok &= (1..epochs).all(|e| s.lr(e) <= s.lr(e - 1));
            }
        }
    }
    (
        ok,
        format!("lr0 in {{1e-5, 3e-4}}, 2..100 epochs, cosine and staircase: worst endpoint rel error {worst:.1e} (tol 1e-12), non-increasing"),
    )
}

struct DeskRun {
    dataset: Dataset,
    model: Model<f32>,
    test_accuracy: f64,
    elapsed: Duration,
}

fn desk_gen(seed: u64, confound: Confound) -> GenConfig {
    GenConfig {
        seed,
        confound,
        split_sizes: Some(SplitSizes { train: 100, val: 15, test: 30 }),
        ..GenConfig::default()
    }
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let dataset = generate_dataset(&desk_gen(1, Confound::None)).unwrap();
        let aug = AugConfig::desk(96);
        let out = milsi::trainer::train(
            &images_of(&dataset.train),
            &images_of(&dataset.val),
            &ModelConfig::default(),
            &TrainConfig::desk(),
            &aug,
            Variant::MilSi,
        )
        .unwrap();
        let test = evaluate(&out.best, &images_of(&dataset.test), &aug, 16).unwrap();
        DeskRun { dataset, model: out.best, test_accuracy: test.accuracy, elapsed: start.elapsed() }
    })
}

fn c8_desk_learning() -> Check {
    let r = desk_run();
    (
        r.test_accuracy >= 0.95 && r.elapsed < Duration::from_secs(15 * 60),
        format!(
            "mil_si, 200/30/60 images of 96px, p=16, depth 2, D=64, 50 epochs: test accuracy {:.4} (>= 0.95); {:.0}s (limit 900s)",
            r.test_accuracy,
            r.elapsed.as_secs_f64()
        ),
    )
}

/// Settings for the confound comparison, shared by all three variants.
fn confound_setup() -> (GenConfig, TrainConfig) {
    (desk_gen(2, Confound::AntiCorrelated), TrainConfig { epochs: 30, ..TrainConfig::desk() })
}

fn c9_confound_ordering() -> Check {
    let start = Instant::now();
    let (gen, base) = confound_setup();
    let ds = generate_dataset(&gen).unwrap();
    let (train, val, test) = (images_of(&ds.train), images_of(&ds.val), images_of(&ds.test));
    let aug = AugConfig::desk(96);
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for variant in Variant::ALL {
        let mut accs = Vec::new();
        for seed in 0..5u64 {
            let cfg = TrainConfig { seed, ..base.clone() };
            let out = milsi::trainer::train(&train, &val, &ModelConfig::default(), &cfg, &aug, variant).unwrap();
            let report = evaluate(&out.best, &test, &aug, 16).unwrap();
            accs.push(report.accuracy);
            rows.push(CompareRow {
                run: format!("{}-s{seed}", variant.name()),
                report: Some(RunReport {
                    variant,
                    config_hash: String::new(),
                    seed,
                    best_epoch: out.best_epoch,
                    best_val_accuracy: out.best_val_accuracy,
                    test: report,
                }),
            });
        }
        means.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    println!("confound comparison (anti-correlated photometric offsets, 5 seeds per variant):");
    print!("{}", comparison_text(&rows));
    let [bb, mc, si] = [means[0], means[1], means[2]];
    (
        si >= mc && mc >= bb && si - bb >= 0.05,
        format!(
            "mean test accuracy backbone_only {bb:.4}, mil_cls {mc:.4}, mil_si {si:.4}; need mil_si >= mil_cls >= backbone_only and mil_si - backbone_only >= 0.05; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c10_attention_localisation() -> Check {
    let r = desk_run();
    let eval = AugConfig::desk(96).eval();
    let mut ratios = Vec::new();
    for s in r.dataset.test.iter().take(20) {
        let img = augment(&s.image, &eval, 0).unwrap();
        let heat = attention_rollout(&r.model, &img.pixels).unwrap();
        let (on, off) = cli::heat_on_off(&heat, &img);
        ratios.push(on / off);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let untrained = Model::new(ModelConfig::default(), 99).unwrap();
    let img = augment(&r.dataset.test[0].image, &eval, 0).unwrap();
    let (on, off) = cli::heat_on_off(&attention_rollout(&untrained, &img.pixels).unwrap(), &img);
    (
        mean > 1.2,
        format!(
            "trained mil_si rollout on/off-mask heat ratio {mean:.3} over {} test images (> 1.2); untrained model {:.3}",
            ratios.len(),
            on / off
        ),
    )
}

fn c11_determinism() -> Check {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let gen = GenConfig { counts_per_class: 10, seed: 4, ..GenConfig::default() };
    cli::cmd_generate(&gen, &data).unwrap();
    let spec = ExperimentSpec {
        data_dir: data,
        train: TrainConfig { epochs: 3, seed: 8, ..TrainConfig::desk() },
        ..ExperimentSpec::default()
    };
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    cli::cmd_train(&spec, &a).unwrap();
    cli::cmd_train(&spec, &b).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let files = ["epochs.csv", "best.ckpt", "metrics.json", "manifest.json"];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    (
        differing.is_empty(),
        format!("two identical cmd_train runs; differing artifacts: {differing:?} (checked {files:?})"),
    )
}

fn main() {
    let criteria: [(u32, &str, bool, fn() -> Check); 11] = [
        (1, "shuffle conservation", true, c1_shuffle_conservation),
        (2, "soft-label algebra", true, c2_soft_label_algebra),
        (3, "split/compose round trip", true, c3_round_trip),
        (4, "gradient correctness", true, c4_gradient_check),
        (5, "permutation invariance", true, c5_permutation_invariance),
        (6, "metrics oracle", true, c6_metrics_oracle),
        (7, "schedule endpoints", true, c7_schedule),
        (8, "desk-scale learning", true, c8_desk_learning),
        (9, "confound ordering", false, c9_confound_ordering),
        (10, "attention localisation", true, c10_attention_localisation),
        (11, "determinism", true, c11_determinism),
    ];
    let mut gate_failures = 0;
    for (id, name, gating, check) in criteria {
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let status = if pass { "PASS" } else { "FAIL" };
        let note = if gating || pass { "" } else { " (reported, non-gating)" };
        println!("{status} criterion {id:>2} {name}: {detail}{note}");
        if gating && !pass {
            gate_failures += 1;
        }
    }
    if gate_failures > 0 {
        println!("{gate_failures} gating criteria failed");
        std::process::exit(1);
    }
}
