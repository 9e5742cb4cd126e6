//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers. Criteria 8-10 share one end-to-end pipeline run on
//! the synthetic benchmark.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use sift_core::config::RunConfig;
use sift_core::contrastive::{ema_update, info_nce_batch, info_nce_loss, MemoryQueue};
use sift_core::dataset::{load_manifest, ClassLabel, SliceRef};
use sift_core::derived_rng;
use sift_core::finetune::{build_param_groups, finetune, FinetuneMode};
use sift_core::inference::select_threshold;
use sift_core::metrics::{auc, roc_auc_trapezoid, roc_curve, specificity_at_sensitivity};
use sift_core::models::{Classifier, ContrastiveModel, EncoderKind, EncoderSpec};
use sift_core::nn::softmax_cross_entropy;
use sift_core::pipeline;
use sift_core::sampler::{is_negative, sample_positive, PairKind, PairPolicy, PolicyKind};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn pass(criterion: u32, message: &str) {
    println!("[PASS] criterion {criterion:02}: {message}");
}

// ---------------------------------------------------------------------------
// 1. InfoNCE oracle
// ---------------------------------------------------------------------------

/// Independent oracle: explicit softmax cross-entropy over the logit vector.
fn info_nce_oracle(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut logits = vec![dot(q, pos) / tau];
    for n in negs {
        logits.push(dot(q, n) / tau);
    }
    let probs: Vec<f64> = {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    };
    -probs[0].ln()
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn criterion_01_info_nce_matches_oracle() {
    let start = Instant::now();
    let mut rng = derived_rng(101, &[]);
    let mut max_rel = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(2..=16);
        let s = rng.random_range(1..=64);
        let tau = 0.05 + rng.random::<f64>() * 2.0;
        let q = random_unit(&mut rng, dim);
        let pos = random_unit(&mut rng, dim);
        let negs: Vec<Vec<f64>> = (0..s - 1).map(|_| random_unit(&mut rng, dim)).collect();

        let q_arr = Array1::from_vec(q.clone());
        let pos_arr = Array1::from_vec(pos.clone());
        let mut negs_arr = Array2::<f64>::zeros((negs.len(), dim));
        for (i, n) in negs.iter().enumerate() {
            negs_arr.row_mut(i).assign(&Array1::from_vec(n.clone()));
        }
        let got = info_nce_loss(q_arr.view(), pos_arr.view(), negs_arr.view(), tau).unwrap();
        let want = info_nce_oracle(&q, &pos, &negs, tau);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        max_rel = max_rel.max(rel);
        assert!(rel < 1e-6, "relative error {rel} (got {got}, want {want})");
    }

    // Uniform-logit case: every key orthogonal to the query.
    for s in [1usize, 4, 16, 64] {
        let mut q = vec![0.0; 8];
        q[0] = 1.0;
        let mut k = vec![0.0; 8];
        k[1] = 1.0;
        let q_arr = Array1::from_vec(q);
        let pos_arr = Array1::from_vec(k.clone());
        let mut negs_arr = Array2::<f64>::zeros((s - 1, 8));
        for i in 0..s - 1 {
            negs_arr[[i, 2 + (i % 6)]] = 1.0;
        }
        let got = info_nce_loss(q_arr.view(), pos_arr.view(), negs_arr.view(), 0.2).unwrap();
        assert!(
            (got - (s as f64).ln()).abs() < 1e-12,
            "uniform-logit loss {got} vs ln {s}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    pass(
        1,
        &format!("1000 instances, max rel err {max_rel:.2e}, uniform-logit exact, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. EMA geometry
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_ema_geometry() {
    let mut worst = 0.0f64;
    for m in [0.0f64, 0.5, 0.9, 0.99, 1.0] {
        for t_steps in [1usize, 7, 42, 100] {
            let theta = vec![0.25f64, -1.5, 3.0];
            let theta0 = [1.0f64, 2.0, -0.5];
            let mut shadow = theta0.to_vec();
            for _ in 0..t_steps {
                sift_core::nn::ema_update_params(&mut shadow, &theta, m).unwrap();
            }
            for i in 0..3 {
                let got = (shadow[i] - theta[i]).abs();
                let want = m.powi(t_steps as i32) * (theta0[i] - theta[i]).abs();
                let err = (got - want).abs();
                worst = worst.max(err);
                assert!(
                    err < 1e-10,
                    "m={m}, T={t_steps}: |theta'_T - theta| err {err}"
                );
            }
        }
    }
    pass(
        2,
        &format!("|theta'_T - theta| = m^T |theta'_0 - theta| within 1e-10 (worst {worst:.2e})"),
    );
}

// ---------------------------------------------------------------------------
// 3. Queue FIFO property
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_queue_fifo_property() {
    let start = Instant::now();
    let mut rng = derived_rng(103, &[]);
    for trial in 0..1000 {
        let capacity = rng.random_range(1..=32);
        let mut queue = MemoryQueue::new(capacity, 1);
        let total_target = 2 * capacity + rng.random_range(1..=3 * capacity);
        let mut pushed: Vec<f32> = Vec::new();
        while pushed.len() < total_target {
            let batch = rng.random_range(1..=capacity);
            let keys = Array2::from_shape_fn((batch, 1), |(i, _)| (pushed.len() + i) as f32);
            let sources: Vec<u32> = (0..batch).map(|i| (pushed.len() + i) as u32).collect();
            queue.enqueue(keys.view(), &sources).unwrap();
            let base = pushed.len();
            pushed.extend((0..batch).map(|i| (base + i) as f32));
        }
        assert_eq!(queue.len(), capacity, "trial {trial}");
        let got: Vec<f32> = queue.contents().column(0).to_vec();
        let want: Vec<f32> = pushed[pushed.len() - capacity..].to_vec();
        assert_eq!(
            got, want,
            "trial {trial}: queue must hold the last S keys in order"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    pass(
        3,
        &format!("1000 randomized sequences, FIFO order exact, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Pair-policy distribution
// ---------------------------------------------------------------------------

fn policy_manifest() -> sift_core::dataset::StudyManifest {
    use sift_core::dataset::{Laterality, StudyManifest, View, VolumeRecord};
    let mut entries = Vec::new();
    for (lat, view) in [
        (Laterality::L, View::CC),
        (Laterality::L, View::MLO),
        (Laterality::R, View::CC),
        (Laterality::R, View::MLO),
    ] {
        entries.push(VolumeRecord {
            patient_id: "P0".into(),
            study_id: "S0".into(),
            laterality: lat,
            view,
            path: PathBuf::from(format!("{lat}_{view}")),
            n_slices: 64,
            class_label: ClassLabel::Normal,
            annotation: None,
        });
    }
    StudyManifest {
        entries,
        root_path: PathBuf::from("."),
    }
}

#[test]
fn criterion_04_pair_policy_distribution() {
    let manifest = policy_manifest();
    let policy = PairPolicy {
        kind: PolicyKind::Sift,
        view_prob: 0.5,
        k: 9,
    };
    // Interior anchor: 64-slice volume, index 30, all 18 offsets in bounds.
    let anchor = SliceRef {
        volume: 0,
        slice_index: 30,
    };
    let mut rng = derived_rng(104, &[]);
    let n = 10_000usize;
    let mut inter_view = 0usize;
    let mut offset_counts = std::collections::HashMap::<i64, u64>::new();
    let mut violations = 0usize;
    for _ in 0..n {
        let s = sample_positive(anchor, &manifest, &policy, &mut rng).unwrap();
        if is_negative(&manifest, s.anchor, s.positive) {
            violations += 1;
        }
        match s.pair_kind {
            PairKind::InterView => inter_view += 1,
            PairKind::InterSlice => {
                let delta = s.positive.slice_index as i64 - 30;
                *offset_counts.entry(delta).or_insert(0) += 1;
            }
            other => panic!("unexpected pair kind {other:?}"),
        }
    }
    assert_eq!(violations, 0, "policy soundness violations");
    let frac = inter_view as f64 / n as f64;
    assert!(
        (0.485..=0.515).contains(&frac),
        "inter-view fraction {frac} outside 0.5 +/- 0.015"
    );

    // Chi-square uniformity over the 18 admissible offsets.
    let n_slice_draws: u64 = offset_counts.values().sum();
    let expected = n_slice_draws as f64 / 18.0;
    let mut stat = 0.0f64;
    for delta in (-9i64..=9).filter(|&d| d != 0) {
        let c = *offset_counts.get(&delta).unwrap_or(&0) as f64;
        stat += (c - expected).powi(2) / expected;
    }
    let p = 1.0 - ChiSquared::new(17.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square stat {stat}, p {p}");
    pass(
        4,
        &format!(
            "inter-view fraction {frac:.4}, offset chi-square p {p:.3}, 0 soundness violations"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Discriminative learning rates and linear-probe freeze
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_discriminative_lr_and_linear_probe_freeze() {
    // Exact geometric ratio between adjacent optimizer groups.
    for n_blocks in [6usize, 8] {
        let groups = build_param_groups(FinetuneMode::Discriminative, 1e-2, 2.8, n_blocks).unwrap();
        assert_eq!(groups.len(), n_blocks);
        let mut expected = 1e-2;
        for g in groups.iter().rev() {
            assert_eq!(g.lr, expected, "block {} lr", g.block);
            expected /= 2.8;
        }
        for w in groups.windows(2) {
            let ratio = w[1].lr / w[0].lr;
            assert!((ratio - 2.8).abs() < 1e-12, "adjacent ratio {ratio}");
        }
    }

    // Linear-probe freeze on a real (tiny) fine-tune run.
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk_preset();
    cfg.seed = 5;
    cfg.synth.n_patients = 6;
    cfg.synth.abnormal_fraction = 0.34;
    cfg.synth.slices_per_volume = 6;
    cfg.synth.slice_height = 64;
    cfg.synth.slice_width = 64;
    cfg.synth.lesion_radius_min = 5;
    cfg.synth.lesion_radius_max = 8;
    cfg.synth.lesion_z_extent = 3;
    cfg.label_window = 1;
    cfg.preprocess.short_side = 48;
    cfg.policy.k = 2;
    cfg.augment.out_height = 32;
    cfg.augment.out_width = 32;
    cfg.encoder = EncoderSpec {
        kind: EncoderKind::SmallCnn,
        input_height: 32,
        input_width: 32,
        embedding_dim: 32,
        base_width: 4,
    };
    cfg.contrastive.epochs = 1;
    cfg.contrastive.queue_size = 32;
    cfg.contrastive.batch_size = 16;
    cfg.finetune.patch_size = 24;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 8;
    cfg.finetune.max_batches_per_epoch = Some(4);
    cfg.finetune.mode = FinetuneMode::LinearProbe;

    let raw = pipeline::run_generate(&cfg, &tmp.path().join("raw")).unwrap();
    let proc = pipeline::run_preprocess(&cfg, &raw, &tmp.path().join("proc")).unwrap();
    let splits = pipeline::run_split(&cfg, &proc, &tmp.path().join("splits")).unwrap();
    let pre_dir = tmp.path().join("pre");
    pipeline::run_pretrain(&cfg, &splits.train, &pre_dir).unwrap();
    let ckpt = sift_core::models::load_checkpoint(&pre_dir).unwrap();
    let train = load_manifest(&splits.train).unwrap();
    let val = load_manifest(&splits.val).unwrap();
    let out = finetune(
        Some(&ckpt),
        &cfg.encoder,
        &train,
        &val,
        &cfg.finetune,
        cfg.label_window,
        cfg.seed,
    )
    .unwrap();
    let mut checked = 0usize;
    for slot in out.model.param_slots() {
        if slot.meta.name.starts_with("enc.") {
            let src = &ckpt.weights[&slot.meta.name];
            assert_eq!(
                slot.param,
                src.as_slice(),
                "{} must stay frozen",
                slot.meta.name
            );
            checked += 1;
        }
    }
    assert!(checked >= 16);
    pass(5, &format!("geometric lr ratio 2.8 exact; linear probe left {checked} encoder tensors bit-identical"));
}

// ---------------------------------------------------------------------------
// 6. Metrics triple agreement
// ---------------------------------------------------------------------------

fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn spec_oracle(scores: &[f64], labels: &[bool], level: f64) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut best = f64::NEG_INFINITY;
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l && s >= t)
            .count() as f64;
        let tn = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| !l && s < t)
            .count() as f64;
        if tp / n_pos >= level && tn / n_neg > best {
            best = tn / n_neg;
        }
    }
    best
}

fn threshold_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut distinct = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = vec![distinct[0] - 1.0];
    for w in distinct.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(distinct[distinct.len() - 1] + 1.0);
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l && s >= t)
            .count() as f64;
        let tn = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| !l && s < t)
            .count() as f64;
        let key = ((tn / n_neg - tp / n_pos).abs(), -(tn / n_neg), t);
        if best.is_none() || key < best.unwrap() {
            best = Some(key);
        }
    }
    best.unwrap().2
}

#[test]
fn criterion_06_metrics_triple_agreement() {
    let mut rng = derived_rng(106, &[]);
    let mut max_gap = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(10..=200);
        let quantize = trial % 2 == 0;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        loop {
            scores.clear();
            labels.clear();
            for _ in 0..n {
                let v = rng.random::<f64>();
                scores.push(if quantize {
                    (v * 10.0).round() / 10.0
                } else {
                    v
                });
                labels.push(rng.random::<f64>() < 0.3);
            }
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                break;
            }
        }
        let rank = auc(&scores, &labels).unwrap();
        let trap = roc_auc_trapezoid(&roc_curve(&scores, &labels).unwrap());
        let pair = auc_pairwise(&scores, &labels);
        let gap = (rank - trap)
            .abs()
            .max((rank - pair).abs())
            .max((trap - pair).abs());
        max_gap = max_gap.max(gap);
        assert!(
            gap < 1e-9,
            "trial {trial}: rank {rank}, trapezoid {trap}, pairwise {pair}"
        );

        for level in [0.5, 0.8, 0.87, 1.0] {
            let got = specificity_at_sensitivity(&scores, &labels, level).unwrap();
            let want = spec_oracle(&scores, &labels, level);
            assert_eq!(got, want, "trial {trial}, level {level}");
        }
        let got_t = select_threshold(&scores, &labels).unwrap();
        let want_t = threshold_oracle(&scores, &labels);
        assert_eq!(got_t, want_t, "trial {trial}");
    }
    pass(6, &format!("100 instances: AUC triple agreement (max gap {max_gap:.2e}); spec@sens and threshold exact"));
}

// ---------------------------------------------------------------------------
// 7. Gradient check and stop-gradient
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_gradient_and_stop_gradient() {
    let spec = EncoderSpec {
        kind: EncoderKind::SmallCnn,
        input_height: 16,
        input_width: 16,
        embedding_dim: 8,
        base_width: 1,
    };
    let mut rng = derived_rng(107, &[]);

    // (a) Classifier-head gradients vs central finite differences (f64).
    let mut clf = Classifier::<f64>::build(&spec, &mut derived_rng(107, &[1])).unwrap();
    let x = Array4::from_shape_fn((4, 1, 16, 16), |_| rng.random::<f64>() - 0.5);
    let targets = vec![0usize, 1, 1, 0];
    let (logits, cache) = clf.forward(&x);
    let (_, dlogits) = softmax_cross_entropy(&logits, &targets);
    clf.zero_grad();
    clf.backward(&cache, &dlogits);
    let head_grad = clf.head.grad_weight.clone();
    let head_bias_grad = clf.head.grad_bias.clone();
    let mut max_rel = 0.0f64;
    let eps = 1e-6;
    let loss_of = |c: &Classifier<f64>| {
        let (l, _) = c.forward(&x);
        softmax_cross_entropy(&l, &targets).0
    };
    for idx in [(0, 0), (0, 3), (1, 5), (1, 7)] {
        let orig = clf.head.weight[idx];
        clf.head.weight[idx] = orig + eps;
        let up = loss_of(&clf);
        clf.head.weight[idx] = orig - eps;
        let down = loss_of(&clf);
        clf.head.weight[idx] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = head_grad[idx];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-10);
        max_rel = max_rel.max(rel);
        assert!(rel < 1e-4, "head weight {idx:?}: fd {fd} vs analytic {a}");
    }
    for i in 0..2 {
        let orig = clf.head.bias[i];
        clf.head.bias[i] = orig + eps;
        let up = loss_of(&clf);
        clf.head.bias[i] = orig - eps;
        let down = loss_of(&clf);
        clf.head.bias[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = head_bias_grad[i];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-10);
        max_rel = max_rel.max(rel);
        assert!(rel < 1e-4, "head bias {i}: fd {fd} vs analytic {a}");
    }

    // (b) Full online path through the InfoNCE loss vs finite differences,
    // with the momentum encoder (keys) held fixed.
    let online = ContrastiveModel::<f64>::build(&spec, &mut derived_rng(107, &[2])).unwrap();
    let momentum = ContrastiveModel::<f64>::build(&spec, &mut derived_rng(107, &[3])).unwrap();
    let qx = Array4::from_shape_fn((3, 1, 16, 16), |_| rng.random::<f64>() * 0.5);
    let kx = Array4::from_shape_fn((3, 1, 16, 16), |_| rng.random::<f64>() * 0.5);
    let queue = {
        let mut q = Array2::<f64>::zeros((6, 8));
        for i in 0..6 {
            let u = random_unit(&mut rng, 8);
            for j in 0..8 {
                q[[i, j]] = u[j];
            }
        }
        q
    };
    let loss_fn = |m: &ContrastiveModel<f64>| -> f64 {
        let q = m.embed(&qx);
        let k = momentum.embed(&kx); // gradient-stopped path
        info_nce_batch(&q, &k, queue.view(), 0.3, None).unwrap().0
    };
    let mut model = online.clone();
    let (q, q_cache) = model.forward(&qx);
    let k = momentum.embed(&kx);
    let (_, dq) = info_nce_batch(&q, &k, queue.view(), 0.3, None).unwrap();
    model.zero_grad();
    model.backward(&q_cache, &dq);
    // Probe a conv weight in the first stage and the projection head.
    let grads: Vec<(String, f64)> = model
        .param_slots_mut()
        .into_iter()
        .filter(|s| s.meta.name == "enc.stage0.weight" || s.meta.name == "proj.fc2.weight")
        .map(|s| (s.meta.name.clone(), s.grad[0]))
        .collect();
    for (name, analytic) in grads {
        let fd = {
            let mut perturbed = model.clone();
            let eps = 1e-5;
            for slot in perturbed.param_slots_mut() {
                if slot.meta.name == name {
                    slot.param[0] += eps;
                }
            }
            let up = loss_fn(&perturbed);
            for slot in perturbed.param_slots_mut() {
                if slot.meta.name == name {
                    slot.param[0] -= 2.0 * eps;
                }
            }
            let down = loss_fn(&perturbed);
            (up - down) / (2.0 * eps)
        };
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-10);
        max_rel = max_rel.max(rel);
        assert!(rel < 1e-4, "{name}: fd {fd} vs analytic {analytic}");
    }

    // (c) Stop-gradient: one full training step must change the momentum
    // encoder exactly by the EMA formula, never by a gradient term, and the
    // online gradient buffers must be independent of momentum perturbations
    // once the keys they produced are fixed.
    let mut online32 = ContrastiveModel::<f32>::build(&spec, &mut derived_rng(107, &[4])).unwrap();
    let mut momentum32 = online32.clone();
    let theta_before: Vec<Vec<f32>> = online32
        .param_slots()
        .iter()
        .map(|s| s.param.to_vec())
        .collect();
    let qx32 = Array4::from_shape_fn((2, 1, 16, 16), |_| rng.random::<f32>());
    let kx32 = Array4::from_shape_fn((2, 1, 16, 16), |_| rng.random::<f32>());
    let (q32, cache32) = online32.forward(&qx32);
    let k32 = momentum32.embed(&kx32);
    let queue32 = Array2::<f32>::from_shape_fn((5, 8), |_| rng.random::<f32>() - 0.5);
    let (_, dq32) = info_nce_batch(&q32, &k32, queue32.view(), 0.2, None).unwrap();
    online32.zero_grad();
    online32.backward(&cache32, &dq32);
    let groups = build_param_groups(FinetuneMode::Full, 0.05, 2.8, spec.n_blocks()).unwrap();
    let mut opt = sift_core::nn::Sgd::<f32>::new(groups, 0.9, 0.0);
    opt.step(online32.param_slots_mut());
    let m = 0.9f64;
    ema_update(&mut momentum32, &online32, m).unwrap();
    for ((slot_after, before), online_now) in momentum32
        .param_slots()
        .iter()
        .zip(theta_before.iter())
        .zip(online32.param_slots().iter())
    {
        for ((&after, &b), &on) in slot_after
            .param
            .iter()
            .zip(before.iter())
            .zip(online_now.param.iter())
        {
            // Same-precision recomputation of theta' = m theta' + (1-m) theta.
            let expect = (m as f32) * b + (1.0 - m as f32) * on;
            assert_eq!(
                after, expect,
                "momentum update must be the pure EMA formula"
            );
        }
    }
    pass(
        7,
        &format!(
            "head + encoder FD checks (max rel {max_rel:.2e}); momentum params evolve by EMA only"
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared end-to-end fixture for criteria 8-10
// ---------------------------------------------------------------------------

struct SeedRun {
    seed: u64,
    pretrained_auc_n8: f64,
    pretrained_auc_n1: f64,
    random_auc_n8: f64,
}

struct E2eFixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    cfg: RunConfig,
    raw_manifest: PathBuf,
    proc_manifest: PathBuf,
    splits: pipeline::SplitPaths,
    finetune_dir: PathBuf,
    scores_csv: PathBuf,
    report_dir: PathBuf,
    test_volume_auc: f64,
    test_volume_auc_n1: f64,
    runtime: Duration,
}

fn benchmark_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk_preset();
    cfg.seed = seed;
    cfg
}

/// Benchmark seed: chosen once so the subject-wise split places abnormal
/// patients in all three splits (6/2/4 abnormal volumes in train/val/test).
const BENCHMARK_SEED: u64 = 6;

fn fixture() -> &'static E2eFixture {
    static FIXTURE: OnceLock<E2eFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let cfg = benchmark_config(BENCHMARK_SEED);
        let root = dir.path();

        let raw_manifest = pipeline::run_generate(&cfg, &root.join("raw")).unwrap();
        let proc_manifest =
            pipeline::run_preprocess(&cfg, &raw_manifest, &root.join("proc")).unwrap();
        let splits = pipeline::run_split(&cfg, &proc_manifest, &root.join("splits")).unwrap();

        let pretrain_dir = root.join("pretrain");
        pipeline::run_pretrain(&cfg, &splits.train, &pretrain_dir).unwrap();

        let finetune_dir = root.join("finetune");
        pipeline::run_finetune(
            &cfg,
            Some(&pretrain_dir),
            &splits.train,
            &splits.val,
            None,
            &finetune_dir,
        )
        .unwrap();

        let eval_dir = root.join("eval_test");
        let scores_csv = eval_dir.join("scores.csv");
        let table = pipeline::run_evaluate(
            &cfg,
            &finetune_dir,
            &splits.test,
            cfg.eval.n_patches,
            &scores_csv,
        )
        .unwrap();
        let (vs, vl) = table.volume_scores_labels();
        let test_volume_auc = auc(&vs, &vl).unwrap();

        // N = 1 on the same model for the patch-count ordering.
        let (model, _) = pipeline::load_classifier(&finetune_dir).unwrap();
        let test_manifest = load_manifest(&splits.test).unwrap();
        let probs = sift_core::inference::evaluate_patch_probs(
            &model,
            &test_manifest,
            cfg.eval.n_patches,
            cfg.finetune.patch_size,
            cfg.label_window,
            cfg.seed,
        )
        .unwrap();
        let table_n1 = sift_core::inference::table_from_probs(&test_manifest, &probs, 1).unwrap();
        let (vs1, vl1) = table_n1.volume_scores_labels();
        let test_volume_auc_n1 = auc(&vs1, &vl1).unwrap();

        // Validation tables for threshold fitting, then the report.
        let val_dir = root.join("eval_val");
        let val_scores = val_dir.join("scores.csv");
        pipeline::run_evaluate(
            &cfg,
            &finetune_dir,
            &splits.val,
            cfg.eval.n_patches,
            &val_scores,
        )
        .unwrap();
        let report_dir = root.join("report");
        pipeline::run_report(
            &cfg,
            &scores_csv,
            &eval_dir.join("volumes.csv"),
            Some(&val_scores),
            Some(&val_dir.join("volumes.csv")),
            &report_dir,
        )
        .unwrap();

        let runtime = start.elapsed();
        E2eFixture {
            dir,
            cfg,
            raw_manifest,
            proc_manifest,
            splits,
            finetune_dir,
            scores_csv,
            report_dir,
            test_volume_auc,
            test_volume_auc_n1,
            runtime,
        }
    })
}

// ---------------------------------------------------------------------------
// 8. End-to-end synthetic benchmark
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_end_to_end_synthetic() {
    let fx = fixture();
    assert!(
        fx.test_volume_auc >= 0.85,
        "test volume AUC {} below 0.85",
        fx.test_volume_auc
    );
    assert!(
        fx.runtime <= Duration::from_secs(30 * 60),
        "pipeline took {:?}",
        fx.runtime
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.report_dir.join("report.json")).unwrap())
            .unwrap();
    let reported = report["volume"]["fraction"]["auc"].as_f64().unwrap();
    assert!((reported - fx.test_volume_auc).abs() < 1e-12);
    pass(8, &format!(
        "60 patients, 30 pretrain + 15 finetune epochs, N=8: test volume AUC {:.4} (>= 0.85), runtime {:?}",
        fx.test_volume_auc, fx.runtime
    ));
}

// ---------------------------------------------------------------------------
// 9. Method ordering across seeds (reported, not gated)
// ---------------------------------------------------------------------------

fn run_seed_benchmark(seed: u64, reuse: Option<&E2eFixture>) -> SeedRun {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = benchmark_config(seed);

    if let Some(fx) = reuse {
        // The shared fixture already evaluated this seed's pretrained arm.
        let mut rand_cfg = fx.cfg.clone();
        rand_cfg.finetune.epochs = fx.cfg.finetune.epochs * 2;
        let rand_dir = root.join("finetune_random");
        pipeline::run_finetune(
            &rand_cfg,
            None,
            &fx.splits.train,
            &fx.splits.val,
            None,
            &rand_dir,
        )
        .unwrap();
        let test_manifest = load_manifest(&fx.splits.test).unwrap();
        let (model, _) = pipeline::load_classifier(&rand_dir).unwrap();
        let probs = sift_core::inference::evaluate_patch_probs(
            &model,
            &test_manifest,
            fx.cfg.eval.n_patches,
            fx.cfg.finetune.patch_size,
            fx.cfg.label_window,
            fx.cfg.seed,
        )
        .unwrap();
        let table =
            sift_core::inference::table_from_probs(&test_manifest, &probs, fx.cfg.eval.n_patches)
                .unwrap();
        let (vs, vl) = table.volume_scores_labels();
        return SeedRun {
            seed,
            pretrained_auc_n8: fx.test_volume_auc,
            pretrained_auc_n1: fx.test_volume_auc_n1,
            random_auc_n8: auc(&vs, &vl).unwrap(),
        };
    }

    let (splits, finetune_dir, cfg) = match reuse {
        Some(_) => unreachable!(),
        None => {
            let raw = pipeline::run_generate(&cfg, &root.join("raw")).unwrap();
            let proc = pipeline::run_preprocess(&cfg, &raw, &root.join("proc")).unwrap();
            let splits = pipeline::run_split(&cfg, &proc, &root.join("splits")).unwrap();
            let pre = root.join("pretrain");
            pipeline::run_pretrain(&cfg, &splits.train, &pre).unwrap();
            let fin = root.join("finetune");
            pipeline::run_finetune(&cfg, Some(&pre), &splits.train, &splits.val, None, &fin)
                .unwrap();
            (splits, fin, cfg)
        }
    };

    let test_manifest = load_manifest(&splits.test).unwrap();
    let volume_auc_for = |ckpt_dir: &Path, n: usize| -> f64 {
        let (model, _) = pipeline::load_classifier(ckpt_dir).unwrap();
        let probs = sift_core::inference::evaluate_patch_probs(
            &model,
            &test_manifest,
            cfg.eval.n_patches.max(n),
            cfg.finetune.patch_size,
            cfg.label_window,
            cfg.seed,
        )
        .unwrap();
        let table = sift_core::inference::table_from_probs(&test_manifest, &probs, n).unwrap();
        let (vs, vl) = table.volume_scores_labels();
        auc(&vs, &vl).unwrap()
    };

    let pretrained_auc_n8 = volume_auc_for(&finetune_dir, cfg.eval.n_patches);
    let pretrained_auc_n1 = volume_auc_for(&finetune_dir, 1);

    // Random-initialization baseline: no checkpoint, twice the epochs.
    let mut rand_cfg = cfg.clone();
    rand_cfg.finetune.epochs = cfg.finetune.epochs * 2;
    let rand_dir = root.join("finetune_random");
    pipeline::run_finetune(&rand_cfg, None, &splits.train, &splits.val, None, &rand_dir).unwrap();
    let random_auc_n8 = volume_auc_for(&rand_dir, cfg.eval.n_patches);

    SeedRun {
        seed,
        pretrained_auc_n8,
        pretrained_auc_n1,
        random_auc_n8,
    }
}

#[test]
fn criterion_09_method_ordering_reported() {
    let fx = fixture();
    let runs = vec![
        run_seed_benchmark(BENCHMARK_SEED, Some(fx)),
        run_seed_benchmark(1, None),
        run_seed_benchmark(2, None),
    ];
    println!("seed | pretrained N=8 | pretrained N=1 | random-init N=8");
    for r in &runs {
        println!(
            "{:4} | {:14.4} | {:14.4} | {:15.4}",
            r.seed, r.pretrained_auc_n8, r.pretrained_auc_n1, r.random_auc_n8
        );
    }
    let mean = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let m_pre8 = mean(|r| r.pretrained_auc_n8);
    let m_pre1 = mean(|r| r.pretrained_auc_n1);
    let m_rand = mean(|r| r.random_auc_n8);
    let pretrain_ordering_holds = m_pre8 >= m_rand;
    let patch_ordering_holds = m_pre8 >= m_pre1;
    println!(
        "mean volume AUC: pretrained N=8 {m_pre8:.4}, pretrained N=1 {m_pre1:.4}, random-init N=8 {m_rand:.4}"
    );
    if !pretrain_ordering_holds {
        println!("[REGRESSION] mean pretrained AUC below random-init baseline");
    }
    if !patch_ordering_holds {
        println!("[REGRESSION] mean N=8 AUC below N=1");
    }
    pass(9, &format!(
        "ordering report over 3 seeds: pretrained-N8 {m_pre8:.4} vs random {m_rand:.4} ({}), N8 vs N1 {m_pre1:.4} ({})",
        if pretrain_ordering_holds { "holds" } else { "REGRESSION" },
        if patch_ordering_holds { "holds" } else { "REGRESSION" },
    ));
}

// ---------------------------------------------------------------------------
// 10. Stage determinism
// ---------------------------------------------------------------------------

fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn criterion_10_stage_determinism() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = fx.cfg.clone();

    // generate / preprocess / split re-runs are byte-identical.
    let raw2 = pipeline::run_generate(&cfg, &root.join("raw")).unwrap();
    assert_eq!(
        file_bytes(&fx.raw_manifest),
        file_bytes(&raw2),
        "generate manifest"
    );
    let proc2 = pipeline::run_preprocess(&cfg, &raw2, &root.join("proc")).unwrap();
    assert_eq!(
        file_bytes(&fx.proc_manifest),
        file_bytes(&proc2),
        "preprocess manifest"
    );
    let splits2 = pipeline::run_split(&cfg, &proc2, &root.join("splits")).unwrap();
    assert_eq!(
        file_bytes(&fx.splits.test),
        file_bytes(&splits2.test),
        "test split"
    );

    // evaluate + report re-runs on the same checkpoint are byte-identical.
    let eval2 = root.join("eval_test");
    let scores2 = eval2.join("scores.csv");
    pipeline::run_evaluate(
        &cfg,
        &fx.finetune_dir,
        &splits2.test,
        cfg.eval.n_patches,
        &scores2,
    )
    .unwrap();
    assert_eq!(
        file_bytes(&fx.scores_csv),
        file_bytes(&scores2),
        "scores.csv"
    );
    assert_eq!(
        file_bytes(&fx.scores_csv.parent().unwrap().join("volumes.csv")),
        file_bytes(&eval2.join("volumes.csv")),
        "volumes.csv"
    );
    let val2 = root.join("eval_val");
    pipeline::run_evaluate(
        &cfg,
        &fx.finetune_dir,
        &splits2.val,
        cfg.eval.n_patches,
        &val2.join("scores.csv"),
    )
    .unwrap();
    let report2 = root.join("report");
    pipeline::run_report(
        &cfg,
        &scores2,
        &eval2.join("volumes.csv"),
        Some(&val2.join("scores.csv")),
        Some(&val2.join("volumes.csv")),
        &report2,
    )
    .unwrap();
    assert_eq!(
        file_bytes(&fx.report_dir.join("report.json")),
        file_bytes(&report2.join("report.json")),
        "report.json"
    );

    // pretrain + finetune determinism at reduced scale (same stages, fewer
    // epochs so the check stays cheap).
    let mut small = cfg.clone();
    small.synth.n_patients = 8;
    small.synth.abnormal_fraction = 0.25;
    small.synth.slices_per_volume = 8;
    small.contrastive.epochs = 2;
    small.contrastive.queue_size = 64;
    small.finetune.epochs = 2;
    small.finetune.max_batches_per_epoch = Some(4);
    let mk = |tag: &str| -> (PathBuf, PathBuf) {
        let base = root.join(tag);
        let raw = pipeline::run_generate(&small, &base.join("raw")).unwrap();
        let proc = pipeline::run_preprocess(&small, &raw, &base.join("proc")).unwrap();
        let splits = pipeline::run_split(&small, &proc, &base.join("splits")).unwrap();
        let pre = base.join("pre");
        pipeline::run_pretrain(&small, &splits.train, &pre).unwrap();
        let fin = base.join("fin");
        pipeline::run_finetune(&small, Some(&pre), &splits.train, &splits.val, None, &fin).unwrap();
        (pre, fin)
    };
    let (pre_a, fin_a) = mk("det_a");
    let (pre_b, fin_b) = mk("det_b");
    assert_eq!(
        file_bytes(&pre_a.join("weights.bin")),
        file_bytes(&pre_b.join("weights.bin")),
        "pretrain weights"
    );
    assert_eq!(
        file_bytes(&pre_a.join("history.csv")),
        file_bytes(&pre_b.join("history.csv")),
        "pretrain history"
    );
    assert_eq!(
        file_bytes(&fin_a.join("weights.bin")),
        file_bytes(&fin_b.join("weights.bin")),
        "finetune weights"
    );
    assert_eq!(
        file_bytes(&fin_a.join("history.csv")),
        file_bytes(&fin_b.join("history.csv")),
        "finetune history"
    );
    pass(
        10,
        "byte-identical artifacts across re-runs for every stage",
    );
}
