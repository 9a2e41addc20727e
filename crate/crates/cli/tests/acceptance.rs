//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them live). Criteria pin
//! their tolerances here; nothing is calibrated at runtime.
//!
//! The heavier criteria shell out to the `ulprint` binary; tests share a
//! mutex so wall-clock measurements are not distorted by each other.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulprint_core::augment::{augment_pair, replay_mask, rng_for_index, AugmentConfig};
use ulprint_core::gabor::{
    make_groundtruth, orientation_field, ridge_frequency, GroundtruthConfig,
};
use ulprint_core::guided::{guided_filter, GuidedFilterParams};
use ulprint_core::imagecore::{save_gray, BinaryMask, GrayImage};
use ulprint_core::segnet::{
    closs, closs_grad, conv2d_dilated, dice_loss, focal_loss, predict_with_fallback, ConvSpec,
    LossParams, MaskPredictor, Tensor4,
};
use ulprint_core::synth;

static GATE: Mutex<()> = Mutex::new(());

fn locked() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|p| p.into_inner())
}

fn pass(criterion: &str) {
    println!("PASS {criterion}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ulprint"))
}

// ---------------------------------------------------------------------------
// 1. Guided-filter oracle equivalence.
// ---------------------------------------------------------------------------

fn box_mean_naive(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut sum = 0.0;
            for dy in -(r as i64)..=r as i64 {
                for dx in -(r as i64)..=r as i64 {
                    let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    sum += data[sy * w + sx];
                }
            }
            out[(y * w as i64 + x) as usize] = sum / ((2 * r + 1) * (2 * r + 1)) as f64;
        }
    }
    out
}

fn guided_naive(i: &[f64], p: &[f64], w: usize, h: usize, r: usize, eps: f64) -> Vec<f64> {
    let mean_i = box_mean_naive(i, w, h, r);
    let mean_p = box_mean_naive(p, w, h, r);
    let ip: Vec<f64> = i.iter().zip(p).map(|(a, b)| a * b).collect();
    let ii: Vec<f64> = i.iter().map(|a| a * a).collect();
    let mean_ip = box_mean_naive(&ip, w, h, r);
    let mean_ii = box_mean_naive(&ii, w, h, r);
    let mut a = vec![0.0; w * h];
    let mut b = vec![0.0; w * h];
    for k in 0..w * h {
        let cov = mean_ip[k] - mean_i[k] * mean_p[k];
        let var = (mean_ii[k] - mean_i[k] * mean_i[k]).max(0.0);
        a[k] = cov / (var + eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mean_a = box_mean_naive(&a, w, h, r);
    let mean_b = box_mean_naive(&b, w, h, r);
    (0..w * h)
        .map(|k| (mean_a[k] * i[k] + mean_b[k]).clamp(0.0, 1.0))
        .collect()
}

#[test]
fn criterion_01_guided_filter_matches_naive_oracle() {
    let _g = locked();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params = GuidedFilterParams {
        r: 2,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i_plane: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let p_plane: Vec<f64> = (0..256).map(|_| (rng.random::<f64>() > 0.5) as u8 as f64).collect();
        let latent = GrayImage::new(16, 16, i_plane.clone()).unwrap();
        let mask = BinaryMask::new(16, 16, p_plane.iter().map(|&v| v as u8).collect()).unwrap();
        let (q, _) = guided_filter(&latent, &mask, &params).unwrap();
        let oracle = guided_naive(&i_plane, &p_plane, 16, 16, params.r, params.eps);
        for (a, b) in q.data().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = started.elapsed();
    assert!(worst <= 1e-9, "max abs diff {worst}");
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(&format!(
        "criterion 1: guided filter vs naive oracle, 50 pairs, max diff {worst:.2e} <= 1e-9 in {elapsed:?}"
    ));
}

// ---------------------------------------------------------------------------
// 2. Guided-filter degenerate cases.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_guided_filter_degenerate_cases() {
    let _g = locked();
    let params = GuidedFilterParams::default();
    assert_eq!(params.eps, 1e-6);

    let latent = GrayImage::constant(24, 24, 0.5).unwrap();
    let ones = BinaryMask::new(24, 24, vec![1; 576]).unwrap();
    let (q, _) = guided_filter(&latent, &ones, &params).unwrap();
    assert!(q.data().iter().all(|&v| v == 1.0), "constant/all-ones != 1.0");

    // Self-guidance on a high-variance binary grating.
    let side = 48;
    let grating = GrayImage::from_fn(side, side, |x, _| if (x / 4) % 2 == 0 { 0.0 } else { 1.0 });
    let gmask = BinaryMask::new(
        side,
        side,
        grating.data().iter().map(|&v| v as u8).collect(),
    )
    .unwrap();
    let (q, _) = guided_filter(&grating, &gmask, &params).unwrap();
    let max_diff = q
        .data()
        .iter()
        .zip(grating.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-3, "self-guidance drift {max_diff}");
    pass(&format!(
        "criterion 2: degenerate guided filter exact ones; self-guidance drift {max_diff:.2e} < 1e-3"
    ));
}

// ---------------------------------------------------------------------------
// 3. Loss correctness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_loss_values_and_gradient() {
    let _g = locked();
    // Dice fixture: |A| = |B| = 4, overlap 2.
    let truth = BinaryMask::new(3, 3, vec![1, 1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
    let pred = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    let d = dice_loss(&pred, &truth, 0.0).unwrap();
    assert!((d - 0.5).abs() <= 1e-9, "dice {d}");

    let single = BinaryMask::new(1, 1, vec![1]).unwrap();
    let f = focal_loss(&[0.5], &single, 0.25, 2.0).unwrap();
    let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
    assert!((f - expect).abs() <= 1e-9, "focal {f} vs {expect}");

    // Gradient vs central differences on 100 random 8x8 planes.
    let params = LossParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut max_rel: f64 = 0.0;
    for _ in 0..100 {
        let pred: Vec<f64> = (0..64).map(|_| 0.02 + 0.96 * rng.random::<f64>()).collect();
        let bits: Vec<u8> = (0..64).map(|_| (rng.random::<f64>() > 0.5) as u8).collect();
        let truth = BinaryMask::new(8, 8, bits).unwrap();
        let grad = closs_grad(&pred, &truth, &params).unwrap();
        let h = 1e-4;
        for k in 0..64 {
            let mut up = pred.clone();
            up[k] += h;
            let mut dn = pred.clone();
            dn[k] -= h;
            let fd = (closs(&up, &truth, &params).unwrap() - closs(&dn, &truth, &params).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grad[k].abs()).max(1e-8);
            max_rel = max_rel.max((grad[k] - fd).abs() / denom);
        }
    }
    assert!(max_rel < 1e-4, "gradient max relative error {max_rel}");
    pass(&format!(
        "criterion 3: dice 0.5 exact, focal point value exact, grad vs FD rel err {max_rel:.2e} < 1e-4"
    ));
}

// ---------------------------------------------------------------------------
// 4. Dilated convolution.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_dilated_convolution() {
    let _g = locked();
    // Impulse response footprint at dilation (2,2).
    let mut x = Tensor4::zeros(1, 1, 9, 9);
    x.plane_mut(0, 0)[4 * 9 + 4] = 1.0;
    let spec = ConvSpec::new(1, 1, (3, 3), (2, 2)).unwrap();
    let y = conv2d_dilated(&x, &[1.0; 9], &[0.0], &spec).unwrap();
    for i in 0..9i64 {
        for j in 0..9i64 {
            let hit = [-2i64, 0, 2].contains(&(i - 4)) && [-2i64, 0, 2].contains(&(j - 4));
            let v = y.plane(0, 0)[(i * 9 + j) as usize];
            assert_eq!(v, if hit { 1.0 } else { 0.0 }, "at ({i},{j})");
        }
    }

    // Dilation (1,1) is bit-equal to a plain convolution oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let xr = Tensor4::new(
        1,
        1,
        8,
        8,
        (0..64).map(|_| rng.random::<f32>() - 0.5).collect(),
    )
    .unwrap();
    let w: Vec<f32> = (0..9).map(|_| rng.random::<f32>() - 0.5).collect();
    let spec1 = ConvSpec::new(1, 1, (3, 3), (1, 1)).unwrap();
    let fast = conv2d_dilated(&xr, &w, &[0.125], &spec1).unwrap();
    // Plain 3x3 "same" zero-padded cross-correlation, same accumulation order.
    for i in 0..8i64 {
        for j in 0..8i64 {
            let mut acc = 0.125f32;
            for u in 0..3i64 {
                for v in 0..3i64 {
                    let (xi, xj) = (i + u - 1, j + v - 1);
                    if (0..8).contains(&xi) && (0..8).contains(&xj) {
                        acc += xr.plane(0, 0)[(xi * 8 + xj) as usize]
                            * w[(u * 3 + v) as usize];
                    }
                }
            }
            let got = fast.plane(0, 0)[(i * 8 + j) as usize];
            assert_eq!(got.to_bits(), acc.to_bits(), "bit mismatch at ({i},{j})");
        }
    }
    pass("criterion 4: dilation (2,2) footprint exact; dilation (1,1) bit-equal to plain conv");
}

// ---------------------------------------------------------------------------
// 5. Toy end-to-end training.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_toy_training_reaches_iou() {
    let _g = locked();
    let tmp = tempfile::tempdir().unwrap();
    let dataset_dir = tmp.path().join("dataset");
    let pairs = synth::grating_dataset(200, 256, 7777);
    synth::write_dataset(&dataset_dir, &pairs).unwrap();

    let train = |out: &Path| -> (f64, std::time::Duration, String) {
        let started = Instant::now();
        let output = bin()
            .args([
                "train-toy",
                "--dataset",
                dataset_dir.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--epochs",
                "4",
                "--lr",
                "0.002",
                "--seed",
                "42",
            ])
            .output()
            .unwrap();
        let elapsed = started.elapsed();
        assert!(
            output.status.success(),
            "train-toy failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        let log_path = PathBuf::from(format!("{}.log.tsv", out.display()));
        let log = std::fs::read_to_string(&log_path).unwrap();
        let best = log
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(2).unwrap().parse::<f64>().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        (best, elapsed, log)
    };

    let ckpt_a = tmp.path().join("a.ulpt");
    let (best_a, time_a, log_a) = train(&ckpt_a);
    assert!(best_a >= 0.80, "validation IoU {best_a} < 0.80");
    assert!(
        time_a.as_secs_f64() < 300.0,
        "training took {time_a:?} (budget 5 minutes)"
    );

    let (_, _, log_b) = train(&tmp.path().join("b.ulpt"));
    assert_eq!(log_a, log_b, "loss logs differ between identical seeded runs");

    // The saved checkpoint drives the model predictor on held-out fixtures.
    let net = ulprint_core::segnet::load_checkpoint(&ckpt_a).unwrap();
    let model = ulprint_core::segnet::ModelMaskSource(net);
    let val_dir = tmp.path().join("val");
    let truth_dir = tmp.path().join("val_truth");
    std::fs::create_dir_all(&val_dir).unwrap();
    std::fs::create_dir_all(&truth_dir).unwrap();
    let mut direct_sum = 0.0;
    let mut direct_n = 0usize;
    for (i, (img, truth)) in pairs.iter().enumerate().filter(|(i, _)| i % 5 == 4) {
        let pred = ulprint_core::segnet::predict_mask(img, &model).unwrap();
        direct_sum += ulprint_core::segnet::iou(&pred, truth).unwrap();
        direct_n += 1;
        if direct_n <= 10 {
            save_gray(img, val_dir.join(format!("v{i:03}.png"))).unwrap();
            ulprint_core::imagecore::save_mask(truth, truth_dir.join(format!("v{i:03}.mask.png")))
                .unwrap();
        }
    }
    let direct = direct_sum / direct_n as f64;
    assert!(direct >= 0.8, "model predictor IoU {direct} on its own fixtures");

    // And the same through segment + eval on disk.
    let seg_dir = tmp.path().join("segmented");
    let out = bin()
        .args([
            "segment",
            "--input",
            val_dir.to_str().unwrap(),
            "--out-dir",
            seg_dir.to_str().unwrap(),
            "--mask-source",
            "model",
            "--checkpoint",
            ckpt_a.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin()
        .args([
            "eval",
            "--pred",
            seg_dir.to_str().unwrap(),
            "--truth",
            truth_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let mean: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mean_iou="))
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(mean >= 0.8, "segment+eval mean IoU {mean}");

    pass(&format!(
        "criterion 5: 200-image training hit val IoU {best_a:.3} >= 0.80 in {time_a:?} (4 epochs); \
         seeded log byte-identical; checkpoint predictor IoU {direct:.3}, segment+eval {mean:.3}"
    ));
}

// ---------------------------------------------------------------------------
// 6. Fallback controller.
// ---------------------------------------------------------------------------

struct Scripted {
    masks: Mutex<Vec<BinaryMask>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl Scripted {
    fn new(ratios: &[f64]) -> Self {
        let masks = ratios
            .iter()
            .map(|&r| {
                let total = 64 * 64;
                let ones = (r * total as f64).round() as usize;
                let mut data = vec![0u8; total];
                for v in data.iter_mut().take(ones) {
                    *v = 1;
                }
                BinaryMask::new(64, 64, data).unwrap()
            })
            .collect();
        Self {
            masks: Mutex::new(masks),
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }
}

impl MaskPredictor for Scripted {
    fn predict(&self, _latent: &GrayImage) -> ulprint_core::Result<BinaryMask> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(self.masks.lock().unwrap().remove(0))
    }
}

#[test]
fn criterion_06_fallback_controller() {
    let _g = locked();
    let latent = GrayImage::constant(64, 64, 0.5).unwrap();

    let grow = Scripted::new(&[0.03, 0.07]);
    let out = predict_with_fallback(&latent, &grow).unwrap();
    assert_eq!(grow.calls.load(std::sync::atomic::Ordering::SeqCst), 2);
    assert!(out.fallback_used, "larger retry mask must be kept");
    assert!((out.white_ratio - 0.07).abs() < 1e-3);

    let shrink = Scripted::new(&[0.03, 0.02]);
    let out = predict_with_fallback(&latent, &shrink).unwrap();
    assert_eq!(shrink.calls.load(std::sync::atomic::Ordering::SeqCst), 2);
    assert!(!out.fallback_used, "smaller retry mask must be discarded");
    assert!((out.white_ratio - 0.03).abs() < 1e-3);

    let fine = Scripted::new(&[0.10]);
    let out = predict_with_fallback(&latent, &fine).unwrap();
    assert_eq!(fine.calls.load(std::sync::atomic::Ordering::SeqCst), 1);
    assert!(!out.fallback_attempted);
    pass("criterion 6: fallback calls predictor exactly twice below 5% and keeps the larger mask only");
}

// ---------------------------------------------------------------------------
// 7. Ground-truth pipeline.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_groundtruth_quality() {
    let _g = locked();
    let (latent, truth) = synth::contaminated_grating(192, 192, 42);
    let mask = make_groundtruth(&latent, &GroundtruthConfig::default()).unwrap();
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in mask.data().iter().zip(truth.data()) {
        inter += (*a == 1 && *b == 1) as usize;
        union += (*a == 1 || *b == 1) as usize;
    }
    let iou = inter as f64 / union.max(1) as f64;
    assert!(iou >= 0.7, "ground-truth IoU {iou} < 0.7");

    let flat = GrayImage::constant(96, 96, 0.5).unwrap();
    let empty = make_groundtruth(&flat, &GroundtruthConfig::default()).unwrap();
    assert_eq!(empty.count_ones(), 0, "constant image must give the empty mask");
    pass(&format!(
        "criterion 7: ground-truth IoU {iou:.3} >= 0.7 on the contaminated fixture; constant -> empty"
    ));
}

// ---------------------------------------------------------------------------
// 8. Gabor stack accuracy.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_orientation_and_frequency_accuracy() {
    let _g = locked();
    let pi = std::f64::consts::PI;
    let mut worst_angle: f64 = 0.0;
    let mut worst_freq: f64 = 0.0;
    for period in [8.0, 12.0] {
        for rot in [0.0, pi / 4.0, pi / 2.0] {
            // Oscillation along `rot`; ridges run along rot + pi/2.
            let img = synth::grating(160, 160, period, rot, 1.0);
            let of = orientation_field(&img, 16).unwrap();
            let ff = ridge_frequency(&img, &of).unwrap();
            let expect_angle = (rot + pi / 2.0).rem_euclid(pi);
            for by in 2..of.grid_h - 2 {
                for bx in 2..of.grid_w - 2 {
                    let diff = {
                        let d = (of.angle_at(bx, by) - expect_angle).rem_euclid(pi);
                        d.min(pi - d)
                    };
                    worst_angle = worst_angle.max(diff);
                    let f = ff
                        .freq_at(bx, by)
                        .unwrap_or_else(|| panic!("invalid block ({bx},{by})"));
                    worst_freq = worst_freq.max((f - 1.0 / period).abs());
                }
            }
        }
    }
    assert!(worst_angle < 0.05, "orientation error {worst_angle}");
    assert!(worst_freq < 0.01, "frequency error {worst_freq}");
    pass(&format!(
        "criterion 8: orientation err {worst_angle:.4} rad < 0.05, frequency err {worst_freq:.4} < 0.01"
    ));
}

// ---------------------------------------------------------------------------
// 9. Augmentation contract.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_augmentation_rates_and_alignment() {
    let _g = locked();
    let (img, mask) = synth::contaminated_grating(40, 40, 606);
    let cfg = AugmentConfig {
        crop: 32,
        ..Default::default()
    };
    let n = 10_000u64;
    let mut counts = [0usize; 5];
    for idx in 0..n {
        let mut rng = rng_for_index(cfg.seed, idx);
        let (_, amask, trace) = augment_pair(&img, &mask, &cfg, &mut rng).unwrap();
        counts[0] += trace.geom.is_some() as usize;
        counts[1] += trace.rrc.is_some() as usize;
        counts[2] += !trace.cutout.is_empty() as usize;
        counts[3] += trace.lines as usize;
        counts[4] += trace.letters as usize;
        assert!(amask.data().iter().all(|&v| v <= 1), "mask left binary set");
        if idx % 97 == 0 {
            assert_eq!(
                replay_mask(&mask, &trace, cfg.crop),
                amask,
                "geometric replay mismatch at draw {idx}"
            );
        }
    }
    let expect = [cfg.p_geom, cfg.p_rrc, cfg.p_cutout, cfg.p_lines, cfg.p_letters];
    let mut summary = String::new();
    for (name, (&c, &p)) in ["geom", "rrc", "cutout", "lines", "letters"]
        .iter()
        .zip(counts.iter().zip(&expect))
    {
        let rate = c as f64 / n as f64;
        assert!(
            (rate - p).abs() <= 0.02,
            "{name}: empirical {rate} vs configured {p}"
        );
        summary.push_str(&format!("{name} {rate:.3}/{p} "));
    }
    pass(&format!(
        "criterion 9: 10k-draw rates within 2pp ({summaryP}); masks binary; replay exact",
        summaryP = summary.trim_end()
    ));
}

// ---------------------------------------------------------------------------
// 10. Determinism and parallel safety.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_parallel_determinism() {
    let _g = locked();
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for i in 0..50u64 {
        let (img, _) = synth::contaminated_grating(96, 96, 9000 + i);
        save_gray(&img, corpus.join(format!("lat{i:02}.png"))).unwrap();
    }

    let run_with = |workers: &str, sub: &str| -> PathBuf {
        let out_dir = tmp.path().join(sub);
        let output = bin()
            .args([
                "--workers",
                workers,
                "enhance",
                "--input",
                corpus.to_str().unwrap(),
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "enhance failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        out_dir
    };

    let serial = run_with("1", "serial");
    let parallel = run_with("8", "parallel");

    let mut names: Vec<String> = std::fs::read_dir(&serial)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 100, "50 enhanced + 50 masks");
    for name in &names {
        let a = std::fs::read(serial.join(name)).unwrap();
        let b = std::fs::read(parallel.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between 1 and 8 workers");
    }
    pass("criterion 10: 50-file corpus byte-identical between 1 and 8 workers");
}
