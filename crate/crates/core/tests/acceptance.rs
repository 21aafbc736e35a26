//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Tolerances are pinned in the assertions.
//!
//! The desk-scale training criterion is the long pole (several minutes of
//! single-threaded CPU work); everything else finishes in seconds.

use monounet_core::autodiff::Graph;
use monounet_core::clinstats::{self, special, OutcomePair};
use monounet_core::metrics::{self, BinaryMask};
use monounet_core::monogenic::{local_phase, register_mono, FrequencyGrid, MonoBlockState};
use monounet_core::network::{self, ModelSpec, Variant};
use monounet_core::phantom::{self, PhantomConfig, ShiftRanges};
use monounet_core::rng::{ChaCha12Rng, SeedableRng};
use monounet_core::tensor::Tensor;
use monounet_core::training::{self, bce_dice_loss, poly_lr, Sample, TrainConfig};
use std::time::Instant;

fn pass(criterion: u32, detail: &str) {
    println!("[PASS] criterion {criterion}: {detail}");
}

/// Deterministic uniform in [-1, 1].
fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    monounet_core::autodiff::gradcheck::test_tensor(shape, seed)
}

// ── 1. gradient correctness on the reduced-spec model ───────────────

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let spec = ModelSpec::new(Variant::E123V2Gated, 32, 2).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_param = String::new();

    for seed in 0..5u64 {
        let mut state = network::build::<f64>(&spec, seed);
        let image = lcg_tensor(&[1, 1, 32, 32], 1000 + seed);
        let target = {
            let t = lcg_tensor(&[1, 1, 32, 32], 2000 + seed);
            Tensor::new(
                &[1, 1, 32, 32],
                t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap()
        };

        let loss_of = |state: &network::ModelState<f64>| -> f64 {
            let mut g = Graph::new();
            let model = network::forward(&mut g, state, image.clone()).unwrap();
            let loss = bce_dice_loss(&mut g, model.output, &target).unwrap();
            g.value(loss)[0]
        };

        // analytic gradients
        let mut g = Graph::new();
        let model = network::forward(&mut g, &state, image.clone()).unwrap();
        let loss = bce_dice_loss(&mut g, model.output, &target).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = model
            .leaves
            .iter()
            .zip(state.params())
            .map(|(&leaf, p)| {
                g.grad(leaf)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();

        let n_params = state.params().len();
        for pi in 0..n_params {
            let name = state.params()[pi].name.clone();
            for ei in 0..analytic[pi].len() {
                let orig = state.params()[pi].tensor.data()[ei];
                state.params_mut()[pi].tensor.data_mut()[ei] = orig + h;
                let up = loss_of(&state);
                state.params_mut()[pi].tensor.data_mut()[ei] = orig - h;
                let down = loss_of(&state);
                state.params_mut()[pi].tensor.data_mut()[ei] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi][ei];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    worst_param = format!("{name}[{ei}] (seed {seed})");
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(
        worst < 1e-4,
        "finite-difference mismatch {worst} at {worst_param}"
    );
    assert!(
        elapsed.as_secs() < 120,
        "gradient check took {elapsed:?}, budget is 2 minutes"
    );
    pass(
        1,
        &format!(
            "all parameter classes match finite differences, max rel err {worst:.2e} over 5 seeds in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ── 2. parameter accounting ─────────────────────────────────────────

#[test]
fn criterion_02_parameter_accounting() {
    let base_spec = ModelSpec::standard(Variant::Base);
    let full_spec = ModelSpec::standard(Variant::E123V2Gated);
    let base = network::build::<f32>(&base_spec, 0).param_count();
    let full = network::build::<f32>(&full_spec, 0).param_count();
    assert!(
        (1100..=1180).contains(&base),
        "base parameter count {base} outside [1100, 1180]"
    );
    assert!(full <= 1500, "full parameter count {full} > 1500");
    assert_eq!(
        full,
        base + network::mono_gate_param_formula(&full_spec),
        "full-minus-base must equal the closed-form mono+gate formula"
    );
    let c4 = network::build::<f32>(&ModelSpec::new(Variant::Base, 256, 4).unwrap(), 0).param_count();
    assert!(
        (c4 as f64 - 4300.0).abs() / 4300.0 <= 0.10,
        "C=4 count {c4} not within 10% of 4300"
    );
    pass(
        2,
        &format!("base {base}, full {full} (= base + {}), C=4 {c4}", full - base),
    );
}

// ── 3. FLOP counter ─────────────────────────────────────────────────

#[test]
fn criterion_03_flop_counter() {
    let spec = ModelSpec::standard(Variant::E123V2Gated);
    let a = network::count_flops(&spec);
    let b = network::count_flops(&spec);
    assert_eq!(a, b, "FLOP count must be deterministic");
    let g = a.total() as f64 / 1e9;
    assert!(
        (0.04..=0.20).contains(&g),
        "full-model count {g} GFLOPs outside [0.04, 0.20]"
    );
    pass(
        3,
        &format!(
            "full model {:.4} GFLOPs (conv {:.4} G, fft {:.4} G)",
            g,
            a.conv as f64 / 1e9,
            a.fft as f64 / 1e9
        ),
    );
}

// ── 4. phase gain/offset invariance ─────────────────────────────────

#[test]
fn criterion_04_phase_invariance() {
    let size = 256;
    let grid = FrequencyGrid::<f64>::new(size, size);
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let state = MonoBlockState::<f64>::init(3, 3, &mut rng);

    let phase_of = |img: &Tensor<f64>| -> Vec<f64> {
        let mut g = Graph::new();
        let image = g.constant(img.clone());
        let refs = register_mono(&mut g, &state).unwrap();
        let ph = local_phase(&mut g, &grid, image, &refs.filters, 3).unwrap();
        g.value(ph).to_vec()
    };

    let mut worst = 0.0f64;
    for img_seed in 0..20u64 {
        let img = lcg_tensor(&[1, 1, size, size], 4000 + img_seed);
        let reference = phase_of(&img);
        for a in [0.1, 1.0, 10.0] {
            for b in [-20.0, 0.0, 50.0] {
                if a == 1.0 && b == 0.0 {
                    continue;
                }
                let mut t = img.clone();
                for v in t.data_mut() {
                    *v = a * *v + b;
                }
                let transformed = phase_of(&t);
                let max = reference
                    .iter()
                    .zip(&transformed)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                worst = worst.max(max);
            }
        }
    }
    assert!(
        worst < 1e-5,
        "phase maps moved by {worst} under gain/offset transforms"
    );
    pass(
        4,
        &format!("pre-combiner phase invariant to a*I+b, max abs diff {worst:.2e} on 20 images"),
    );
}

// ── 5. metric oracles ───────────────────────────────────────────────

fn random_mask(h: usize, w: usize, fill: f64, seed: u64, spacing: f64) -> BinaryMask {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(7);
    let data = (0..h * w)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 40) as f64 / (1u64 << 24) as f64) < fill
        })
        .collect();
    BinaryMask::new(h, w, data, spacing).unwrap()
}

fn dice_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut tp = 0u64;
    let mut total_a = 0u64;
    let mut total_b = 0u64;
    for r in 0..a.h() {
        for c in 0..a.w() {
            if a.get(r, c) {
                total_a += 1;
            }
            if b.get(r, c) {
                total_b += 1;
            }
            if a.get(r, c) && b.get(r, c) {
                tp += 1;
            }
        }
    }
    if total_a + total_b == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (total_a + total_b) as f64
}

fn masd_oracle(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ba = a.boundary();
    let bb = b.boundary();
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        from.iter()
            .map(|&(r1, c1)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dr = r1 as f64 - r2 as f64;
                        let dc = c1 as f64 - c2 as f64;
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (directed(&ba, &bb) + directed(&bb, &ba)) * a.spacing())
}

#[test]
fn criterion_05_metric_oracles() {
    let mut masd_checked = 0usize;
    for pair in 0..50u64 {
        let h = 4 + (pair as usize * 7) % 13; // up to 16
        let w = 4 + (pair as usize * 5) % 13;
        let spacing = 0.25 + (pair as f64 % 7.0) * 0.25;
        let a = random_mask(h, w, 0.35, 900 + pair, spacing);
        let b = random_mask(h, w, 0.35, 5000 + pair, spacing);

        let d = metrics::dice(&a, &b).unwrap();
        assert_eq!(d, dice_oracle(&a, &b), "dice mismatch on pair {pair}");

        let m = metrics::masd(&a, &b).unwrap();
        match (m, masd_oracle(&a, &b)) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                assert!((x - y).abs() < 1e-9, "masd {x} vs oracle {y} on pair {pair}");
                masd_checked += 1;
            }
            other => panic!("masd exclusion mismatch {other:?}"),
        }
        // symmetry
        assert_eq!(metrics::masd(&a, &b).unwrap(), metrics::masd(&b, &a).unwrap());
        assert_eq!(
            metrics::dice(&a, &b).unwrap(),
            metrics::dice(&b, &a).unwrap()
        );
        // LCC idempotence
        let lcc = metrics::largest_component(&a);
        assert_eq!(lcc, metrics::largest_component(&lcc));
    }
    assert!(masd_checked >= 40, "too few nonempty masd pairs: {masd_checked}");
    pass(
        5,
        &format!("dice exact and masd within 1e-9 of brute force on 50 pairs ({masd_checked} masd-comparable)"),
    );
}

// ── 6. statistics oracles ───────────────────────────────────────────

#[test]
fn criterion_06_statistics_oracles() {
    let mut state = 987654321u64;
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) * 4.0
    };
    for case in 0..20 {
        // icc2k against an independently-computed ANOVA decomposition
        let table: Vec<Vec<f64>> = (0..10).map(|_| vec![next(), next()]).collect();
        let icc = clinstats::icc2k(&table).unwrap();
        let (n, k) = (10.0f64, 2.0f64);
        let grand: f64 = table.iter().flatten().sum::<f64>() / (n * k);
        let rm: Vec<f64> = table.iter().map(|r| (r[0] + r[1]) / k).collect();
        let cm: Vec<f64> = (0..2)
            .map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let msr = k * rm.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n - 1.0);
        let msc = n * cm.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0);
        let mut sse = 0.0;
        for (i, row) in table.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                sse += (x - rm[i] - cm[j] + grand).powi(2);
            }
        }
        let mse = sse / ((n - 1.0) * (k - 1.0));
        let oracle = (msr - mse) / (msr + (msc - mse) / n);
        assert!(
            (icc.value - oracle).abs() < 1e-9,
            "case {case}: icc {} vs oracle {oracle}",
            icc.value
        );

        // bland-altman regression against explicit normal equations
        let pairs: Vec<OutcomePair> = (0..10)
            .map(|i| {
                let manual = 5.0 + i as f64 * 0.7 + 0.3 * next();
                let auto = manual * (1.0 + 0.02 * i as f64) + 0.1 * next();
                OutcomePair { manual, auto }
            })
            .collect();
        let ba = clinstats::bland_altman(&pairs).unwrap();
        let pts: Vec<(f64, f64)> = pairs
            .iter()
            .map(|p| {
                let m = 0.5 * (p.manual + p.auto);
                (m, 100.0 * (p.auto - p.manual) / m)
            })
            .collect();
        let nn = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
        let intercept = (sy - slope * sx) / nn;
        let ym = sy / nn;
        let ss_res: f64 = pts
            .iter()
            .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
            .sum();
        let ss_tot: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
        let r2 = 1.0 - ss_res / ss_tot;
        let se =
            (ss_res / (nn - 2.0) / pts.iter().map(|p| (p.0 - sx / nn).powi(2)).sum::<f64>()).sqrt();
        let t = slope / se;
        let p = special::student_t_two_sided_p(t, nn - 2.0);
        assert!((ba.prop_slope - slope).abs() < 1e-9, "case {case}: slope");
        assert!((ba.prop_r2 - r2).abs() < 1e-9, "case {case}: r2");
        assert!((ba.prop_p - p).abs() < 1e-9, "case {case}: p");
    }
    // identical raters
    let table: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, i as f64]).collect();
    assert_eq!(clinstats::icc2k(&table).unwrap().value, 1.0);
    pass(6, "icc2k and Bland-Altman match independent oracles within 1e-9 on 20 tables");
}

// ── 7. desk-scale training with domain shift ────────────────────────

pub fn phantom_shift_ranges() -> ShiftRanges {
    ShiftRanges {
        gain_db: (-8.0, 8.0),
        contrast_gamma: (0.6, 1.6),
        blur_sigma: (0.2, 0.8),
        speckle_scale: (0.1, 0.3),
        tilt_degrees: (-5.0, 5.0),
    }
}

fn to_samples(ph: &[phantom::Phantom]) -> Vec<Sample> {
    ph.iter()
        .map(|p| {
            Sample::from_raw(&p.image.pixels, p.mask.clone(), p.image.h, p.pixel_spacing).unwrap()
        })
        .collect()
}

fn predict_masks(state: &network::ModelState<f32>, samples: &[Sample]) -> Vec<BinaryMask> {
    let mut out = Vec::new();
    let s = samples[0].size;
    for chunk in samples.chunks(8) {
        let mut data = Vec::with_capacity(chunk.len() * s * s);
        for smp in chunk {
            data.extend_from_slice(&smp.image);
        }
        let img = Tensor::new(&[chunk.len(), 1, s, s], data).unwrap();
        let probs = network::predict(state, img).unwrap();
        for (i, smp) in chunk.iter().enumerate() {
            let plane = &probs.data()[i * s * s..][..s * s];
            out.push(
                BinaryMask::new(
                    s,
                    s,
                    plane.iter().map(|&p| p >= 0.5).collect(),
                    smp.pixel_spacing,
                )
                .unwrap(),
            );
        }
    }
    out
}

#[test]
fn criterion_07_desk_scale_training() {
    let start = Instant::now();
    let clean_cfg = PhantomConfig {
        seed: 11,
        count: 200,
        ..PhantomConfig::default()
    };
    let eval_seed = 77;
    let shifted_cfg = PhantomConfig {
        seed: eval_seed,
        count: 50,
        shift: phantom_shift_ranges(),
        ..PhantomConfig::default()
    };
    let clean_eval_cfg = PhantomConfig {
        seed: eval_seed,
        count: 50,
        ..PhantomConfig::default()
    };

    let train_samples = to_samples(&phantom::generate(&clean_cfg).unwrap());
    let shifted = phantom::generate_shifted(&shifted_cfg).unwrap();
    let shifted_samples = to_samples(&shifted);
    let shifted_gt: Vec<BinaryMask> = shifted.iter().map(|p| p.gt_mask()).collect();
    let clean_eval = phantom::generate(&clean_eval_cfg).unwrap();
    let clean_samples = to_samples(&clean_eval);
    let clean_gt: Vec<BinaryMask> = clean_eval.iter().map(|p| p.gt_mask()).collect();

    let cfg = TrainConfig {
        epochs: 40,
        seed: 3,
        ..TrainConfig::default()
    };

    let mut results = Vec::new();
    for variant in [Variant::E123V2Gated, Variant::Base] {
        let spec = ModelSpec::standard(variant);
        let (state, log) = training::train(&train_samples, &cfg, &spec).unwrap();
        let clean_mean = metrics::evaluate_dataset(&predict_masks(&state, &clean_samples), &clean_gt)
            .unwrap()
            .dice_mean;
        let shifted_mean =
            metrics::evaluate_dataset(&predict_masks(&state, &shifted_samples), &shifted_gt)
                .unwrap()
                .dice_mean;
        results.push((variant, log.best_val_dice, log.epochs.len(), clean_mean, shifted_mean));
    }
    let (_, full_val, full_epochs, full_clean, full_shifted) = results[0];
    let (_, _, _, _, base_shifted) = results[1];

    assert!(
        full_val >= 0.85,
        "full model validation Dice {full_val} below 0.85"
    );
    assert!(full_epochs <= 200, "training used {full_epochs} epochs");
    assert!(
        full_shifted >= base_shifted,
        "full model ({full_shifted:.4}) must not trail the plain backbone ({base_shifted:.4}) on the shifted domain"
    );
    let drop = 100.0 * (full_clean - full_shifted);
    assert!(
        drop <= 10.0,
        "in-domain -> shifted Dice drop {drop:.1} points exceeds 10"
    );
    let mins = start.elapsed().as_secs_f64() / 60.0;
    assert!(mins < 30.0, "criterion took {mins:.1} minutes, budget 30");
    pass(
        7,
        &format!(
            "val {full_val:.3} in {full_epochs} epochs; shifted full {full_shifted:.3} >= base {base_shifted:.3}; drop {drop:.1} pts; {mins:.1} min"
        ),
    );
}

// ── 8. LR schedule closed forms ─────────────────────────────────────

#[test]
fn criterion_08_lr_schedule() {
    let cfg = TrainConfig {
        epochs: 1000,
        lr0: 0.01,
        poly_power: 0.9,
        ..TrainConfig::default()
    };
    let checks = [
        (0usize, 0.01),
        (500, 0.01 * 0.5f64.powf(0.9)),
        (999, 0.01 * 0.001f64.powf(0.9)),
    ];
    for (epoch, expected) in checks {
        let got = poly_lr(epoch, &cfg);
        assert!(
            (got - expected).abs() < 1e-9,
            "lr({epoch}) = {got}, expected {expected}"
        );
    }
    // cross-check the printed constants
    assert!((poly_lr(500, &cfg) - 5.359e-3).abs() < 1e-6);
    assert!((poly_lr(999, &cfg) - 1.995e-5).abs() < 1e-8);
    pass(8, "poly schedule matches closed form at epochs 0/500/999 within 1e-9");
}

// ── 9. single-image forward latency ─────────────────────────────────

#[test]
fn criterion_09_forward_latency() {
    let spec = ModelSpec::standard(Variant::E123V2Gated);
    let state = network::build::<f32>(&spec, 1);
    let img = lcg_tensor(&[1, 1, 256, 256], 90).cast::<f32>();
    // warm up allocator and FFT plans
    let _ = network::predict(&state, img.clone()).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..8 {
        let t0 = Instant::now();
        let _ = network::predict(&state, img.clone()).unwrap();
        best = best.min(t0.elapsed().as_secs_f64());
    }
    let ms = best * 1e3;
    assert!(ms < 50.0, "forward pass took {ms:.1} ms, budget 50");
    pass(9, &format!("256x256 forward in {ms:.1} ms single-threaded"));
}

// ── 10. end-to-end determinism ──────────────────────────────────────

#[test]
fn criterion_10_pipeline_determinism() {
    let run_pipeline = || -> String {
        let cfg = PhantomConfig {
            seed: 5,
            count: 24,
            image_size: 64,
            ..PhantomConfig::default()
        };
        let phantoms = phantom::generate(&cfg).unwrap();
        let samples = to_samples(&phantoms);
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 4,
            seed: 6,
            ..TrainConfig::default()
        };
        let spec = ModelSpec::new(Variant::E123V2Gated, 64, 2).unwrap();
        let (state, log) = training::train(&samples, &tc, &spec).unwrap();

        let test_cfg = PhantomConfig {
            seed: 15,
            count: 10,
            image_size: 64,
            ..PhantomConfig::default()
        };
        let test = phantom::generate(&test_cfg).unwrap();
        let test_samples = to_samples(&test);
        let gt: Vec<BinaryMask> = test.iter().map(|p| p.gt_mask()).collect();
        let preds = predict_masks(&state, &test_samples);
        let summary = metrics::evaluate_dataset(&preds, &gt).unwrap();

        let mut csv = String::from("image_id,dice,masd_mm,excluded\n");
        for rec in &summary.records {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                rec.index,
                rec.dice,
                rec.masd_mm.map_or(String::new(), |v| v.to_string()),
                rec.excluded as u8
            ));
        }
        csv.push_str(&log.to_csv());
        csv
    };
    let first = run_pipeline();
    let second = run_pipeline();
    assert_eq!(first, second, "pipeline outputs differ between runs");
    pass(
        10,
        "phantom -> train(5 epochs) -> eval produced byte-identical CSVs twice",
    );
}
