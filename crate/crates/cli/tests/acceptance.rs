//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Tolerances are pinned in the assertions.
//!
//! The desk-scale classifier comparisons (criteria 6 and 7) train six
//! networks and dominate the runtime; they share one cached set of runs.
//! Set `KFLOWS_MNIST_DIR` to point criteria 5-7 at real IDX files instead of
//! the synthetic glyph set.

use kflows::autodiff::{Tape, Tensor};
use kflows::data::{load_idx, write_idx, DataError};
use kflows::kernels::{rbf_cross, rbf_gram, KernelSpec, Reduce};
use kflows::kf::{
    combined_loss, dataset_features, e2_loss, kernel_flow_fit, rho_loss, FitConfig, KFLossConfig,
    KernelTerm, KfLossKind, SamplingPolicy,
};
use kflows::linalg::{cholesky, solve, Matrix, NuggetPolicy};
use kflows::nn;
use kflows::rng::{Rng, Stream};
use kflows_cli::config::{ExperimentConfig, Kind};
use kflows_cli::run;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("kflows_acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared oracles
// ---------------------------------------------------------------------------

fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a.get(r, col).abs() > a.get(piv, col).abs() {
                piv = r;
            }
        }
        for c in 0..n {
            let t = a.get(col, c);
            a.set(col, c, a.get(piv, c));
            a.set(piv, c, t);
            let t = inv.get(col, c);
            inv.set(col, c, inv.get(piv, c));
            inv.set(piv, c, t);
        }
        let p = a.get(col, col);
        for c in 0..n {
            a.set(col, c, a.get(col, c) / p);
            inv.set(col, c, inv.get(col, c) / p);
        }
        for r in 0..n {
            if r != col {
                let f = a.get(r, col);
                for c in 0..n {
                    a.set(r, c, a.get(r, c) - f * a.get(col, c));
                    inv.set(r, c, inv.get(r, c) - f * inv.get(col, c));
                }
            }
        }
    }
    inv
}

fn pick_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..m.cols() {
            out.set(r, c, m.get(i, c));
        }
    }
    out
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, scale * rng.next_normal());
        }
    }
    m
}

/// Random point sets with a minimum pairwise separation.
///
/// The identities under test hold for any positive-definite Gram matrix in
/// exact arithmetic; at f64 their residual scales with the Gram condition
/// number, so near-duplicate rows (which make kappa unbounded) are excluded
/// from the draw. Separation 1.0 with gamma in [0.3, 1.0] keeps
/// neighbor correlations below exp(-0.3) and the 16-point Gram numerically
/// comfortable.
fn separated_points(n: usize, d: usize, rng: &mut Rng) -> Matrix {
    let min_dist = 1.0;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut scale = 2.0;
    let mut attempts = 0;
    while rows.len() < n {
        let candidate: Vec<f64> = (0..d).map(|_| scale * rng.next_normal()).collect();
        let ok = rows.iter().all(|r| {
            let d2: f64 = r
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2 >= min_dist * min_dist
        });
        if ok {
            rows.push(candidate);
        }
        attempts += 1;
        if attempts > 200 * n {
            scale *= 1.5;
            attempts = 0;
        }
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Matrix::from_vec(n, d, data).expect("finite draws")
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if values.len() % 2 == 1 {
        values[values.len() / 2]
    } else {
        0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2])
    }
}

// ---------------------------------------------------------------------------
// 1. rho identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_rho_identity() {
    let started = Instant::now();
    let mut rng = Rng::seeded(101, Stream::Data);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    while checked < 200 {
        let n = 4 + rng.below(13); // N_b <= 16
        let d = 2 + rng.below(2);
        let m = 1 + rng.below(3);
        let f = separated_points(n, d, &mut rng);
        let y = random_matrix(n, m, 1.0, &mut rng);
        let gamma = rng.range(0.3, 1.0);
        let half: Vec<usize> = (0..n / 2).collect();

        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::from_matrix(&f));
        let lg = tape.constant(Tensor::scalar(gamma.ln()));
        let pair = kflows::kernels::gram(&mut tape, fv, lg, &half).unwrap();
        let rho = match rho_loss(
            &mut tape,
            &pair,
            &y,
            &pick_rows(&y, &half),
            &NuggetPolicy::exact(),
        ) {
            Ok(v) => tape.value(v).item(),
            // ill-conditioned draw: the exact factorization refused it
            Err(_) => continue,
        };

        // Representer-form oracle: ||u_b - u_c||^2_K / ||u_b||^2_K from
        // interpolation weights computed with a dense inverse.
        let k = rbf_gram(&f, gamma);
        let kcc = pick_rows(&pick_cols(&k, &half), &half);
        let alpha_b = gauss_jordan_inverse(&k).matmul(&y);
        let alpha_c_small = gauss_jordan_inverse(&kcc).matmul(&pick_rows(&y, &half));
        let mut alpha_c = Matrix::zeros(n, m);
        for (ii, &i) in half.iter().enumerate() {
            for c in 0..m {
                alpha_c.set(i, c, alpha_c_small.get(ii, c));
            }
        }
        let diff = alpha_b.sub(&alpha_c);
        let num = frob_inner(&diff, &k.matmul(&diff));
        let den = frob_inner(&alpha_b, &k.matmul(&alpha_b));
        let oracle = num / den;

        let rel = (rho - oracle).abs() / oracle.abs().max(1.0);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-8,
            "instance {checked}: rho {rho} vs representer {oracle}"
        );
        assert!(
            (-1e-8..=1.0 + 1e-8).contains(&rho),
            "instance {checked}: rho {rho} out of bounds"
        );
        checked += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "1 rho-identity",
        checked == 200 && elapsed < 10.0,
        &format!("{checked} instances, worst rel err {worst:.2e}, {elapsed:.2}s"),
    );
}

fn pick_cols(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), idx.len());
    for r in 0..m.rows() {
        for (c, &j) in idx.iter().enumerate() {
            out.set(r, c, m.get(r, j));
        }
    }
    out
}

fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// 2. interpolation exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_interpolation_exactness() {
    let started = Instant::now();
    let mut rng = Rng::seeded(202, Stream::Data);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let n = 4 + rng.below(13);
        let d = 2 + rng.below(2);
        let m = 1 + rng.below(3);
        let f = separated_points(n, d, &mut rng);
        let y = random_matrix(n, m, 1.0, &mut rng);
        let gamma = rng.range(0.3, 1.0);
        let full: Vec<usize> = (0..n).collect();

        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::from_matrix(&f));
        let lg = tape.constant(Tensor::scalar(gamma.ln()));
        let pair = kflows::kernels::gram(&mut tape, fv, lg, &full).unwrap();
        let e2 = e2_loss(&mut tape, &pair, &y, &y, &NuggetPolicy::default()).unwrap();
        let e2_value = tape.value(e2).item();
        let bound = 1e-8 * y.frob_norm().powi(2);
        worst = worst.max(e2_value / bound.max(1e-300));
        assert!(
            e2_value <= bound,
            "instance {instance}: e2 {e2_value} above {bound}"
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "2 interpolation-exactness",
        elapsed < 5.0,
        &format!("100 instances, worst e2/bound {worst:.2e}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 3. gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradient_suite() {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.kind = Kind::GradCheck;
    cfg.seed = 33;
    cfg.out = out_dir("criterion3");
    let record = run(&cfg).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "3 gradient-suite",
        record.grad_check_passed == Some(true) && elapsed < 120.0,
        &format!("combined-loss gradcheck at tol 1e-4, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 4. swissroll kernel learning
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_swissroll_direction() {
    let started = Instant::now();
    let mut ratios = Vec::new();
    let mut accuracies = Vec::new();
    for seed in 1..=5u64 {
        let ds = kflows::data::swissroll(128, 1.5, 0.1, &mut Rng::seeded(seed, Stream::Data));
        let spec = KernelSpec::deformation(nn::mlp(2, &[32, 32], 2), 0.0).with_median_init();
        let cfg = FitConfig {
            steps: 2000,
            batch_size: 128,
            lr_start: 0.1,
            lr_end: 0.01,
            loss: KfLossKind::E2,
            checkpoint_interval: 0,
            nugget: NuggetPolicy::training(),
        };

        // Initial features under the same init the fit will draw.
        let mut init_state = nn::build(
            match &spec.feature {
                kflows::kernels::FeatureSource::Deformation(s) => s,
                _ => unreachable!(),
            },
            &mut Rng::seeded(seed, Stream::Init),
        )
        .unwrap();
        let f0 = dataset_features(&ds, &spec, Some(&mut init_state)).unwrap();
        let g0 = kflows::kernels::median_heuristic_log_gamma(&f0).exp();
        let (e0, _) = holdout_e2_and_accuracy(&f0, &ds.y, g0, 999);

        let mut fit = kernel_flow_fit(&ds, &spec, &cfg, seed).unwrap();
        let f1 = dataset_features(&ds, &fit.kernel, fit.deform.as_mut()).unwrap();
        let g1 = fit.kernel.gamma().unwrap();
        let (e1, acc) = holdout_e2_and_accuracy(&f1, &ds.y, g1, 999);
        ratios.push(e1 / e0);
        accuracies.push(acc);
        println!("  seed {seed}: held-out e2 {e0:.4} -> {e1:.4}, interpolant accuracy {acc:.3}");
    }
    let med_ratio = median(&mut ratios);
    let med_acc = median(&mut accuracies);
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "4 swissroll-direction",
        med_ratio < 0.5 && med_acc >= 0.90 && elapsed < 300.0,
        &format!("median e2 ratio {med_ratio:.3} (< 0.5), median accuracy {med_acc:.3} (>= 0.90), {elapsed:.1}s"),
    );
}

/// Mean per-sample e2 and held-out sign accuracy over 20 fresh splits.
fn holdout_e2_and_accuracy(features: &Matrix, y: &Matrix, gamma: f64, seed: u64) -> (f64, f64) {
    let mut rng = Rng::seeded(seed, Stream::Eval);
    let n = features.rows();
    let batch = 128.min(n);
    let (mut e2_total, mut correct, mut counted) = (0.0, 0usize, 0usize);
    for _ in 0..20 {
        let batch_idx = rng.sample_without_replacement(n, batch);
        let half_pos = rng.sample_without_replacement(batch, batch / 2);
        let half_glob: Vec<usize> = half_pos.iter().map(|&p| batch_idx[p]).collect();
        let fb = pick_rows(features, &batch_idx);
        let yb = pick_rows(y, &batch_idx);
        let fc = pick_rows(features, &half_glob);
        let yc = pick_rows(y, &half_glob);
        let k_cc = rbf_cross(&fc, &fc, gamma);
        let k_bc = rbf_cross(&fb, &fc, gamma);
        let factor = cholesky(&k_cc, &NuggetPolicy::training()).unwrap();
        let pred = k_bc.matmul(&solve(&factor, &yc).unwrap());
        e2_total += yb.sub(&pred).frob_norm().powi(2) / batch as f64;
        let mut in_half = vec![false; batch];
        for &p in &half_pos {
            in_half[p] = true;
        }
        for r in 0..batch {
            if !in_half[r] {
                let sign = if pred.get(r, 0) >= 0.0 { 1.0 } else { -1.0 };
                if sign == yb.get(r, 0) {
                    correct += 1;
                }
                counted += 1;
            }
        }
    }
    (e2_total / 20.0, correct as f64 / counted as f64)
}

// ---------------------------------------------------------------------------
// 5. reduction equivalence (lambda = 0 vs plain cross-entropy)
// ---------------------------------------------------------------------------

fn reduction_config(name: &str, with_zero_weight_tap: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.kind = Kind::TrainCnn;
    cfg.seed = 55;
    cfg.out = out_dir(name);
    cfg.width_factor = 0.05;
    cfg.synthetic_train = 1000;
    cfg.synthetic_test = 300;
    cfg.epochs = 2;
    cfg.batch_size = 50;
    cfg.train_subsample = 300;
    if with_zero_weight_tap {
        cfg.taps = vec!["conv6".to_string()];
        cfg.weights = vec![0.0];
    }
    if let Some(dir) = mnist_dir() {
        apply_mnist(&mut cfg, &dir, 1000, 300);
    }
    cfg
}

#[test]
fn criterion_5_reduction_equivalence() {
    let started = Instant::now();
    let zero = reduction_config("criterion5_zero_weight", true);
    let plain = reduction_config("criterion5_plain_ce", false);
    run(&zero).unwrap();
    run(&plain).unwrap();
    let a = std::fs::read(zero.out.join("metrics.csv")).unwrap();
    let b = std::fs::read(plain.out.join("metrics.csv")).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "5 reduction-equivalence",
        a == b && elapsed < 120.0,
        &format!(
            "metrics.csv bitwise {} over {} bytes, {elapsed:.1}s",
            if a == b { "identical" } else { "DIFFERENT" },
            a.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6 and 7: desk-scale comparison (shared runs)
// ---------------------------------------------------------------------------

struct ArmResult {
    train_error: f64,
    test_error: f64,
    ratio_conv6: f64,
}

struct DeskScale {
    bn: Vec<ArmResult>,
    kf: Vec<ArmResult>,
    wall_seconds: f64,
}

static DESK_SCALE: OnceLock<DeskScale> = OnceLock::new();

fn mnist_dir() -> Option<PathBuf> {
    std::env::var_os("KFLOWS_MNIST_DIR").map(PathBuf::from)
}

fn apply_mnist(cfg: &mut ExperimentConfig, dir: &std::path::Path, train: usize, test: usize) {
    cfg.data_source = kflows_cli::config::DataSource::Idx;
    cfg.train_images = dir.join("train-images-idx3-ubyte").display().to_string();
    cfg.train_labels = dir.join("train-labels-idx1-ubyte").display().to_string();
    cfg.test_images = dir.join("t10k-images-idx3-ubyte").display().to_string();
    cfg.test_labels = dir.join("t10k-labels-idx1-ubyte").display().to_string();
    cfg.train_limit = train;
    cfg.test_limit = test;
}

fn desk_scale_config(name: &str, seed: u64, kf_tap: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.kind = Kind::TrainCnn;
    cfg.seed = seed;
    cfg.out = out_dir(name);
    cfg.width_factor = 0.1;
    cfg.synthetic_train = 5000;
    cfg.synthetic_test = 1000;
    cfg.epochs = 5;
    cfg.batch_size = 25;
    cfg.lr_start = 2e-2;
    cfg.lr_end = 2e-4;
    cfg.train_subsample = 1000;
    cfg.diagnostics = vec!["conv6".to_string()];
    if kf_tap {
        cfg.taps = vec!["conv6".to_string()];
    }
    if let Some(dir) = mnist_dir() {
        apply_mnist(&mut cfg, &dir, 5000, 1000);
    }
    cfg
}

fn desk_scale() -> &'static DeskScale {
    DESK_SCALE.get_or_init(|| {
        let started = Instant::now();
        let mut result = DeskScale {
            bn: Vec::new(),
            kf: Vec::new(),
            wall_seconds: 0.0,
        };
        for seed in [1u64, 2, 3] {
            for kf_tap in [false, true] {
                let name = format!(
                    "desk_{}_seed{seed}",
                    if kf_tap { "kf" } else { "bn" }
                );
                let cfg = desk_scale_config(&name, seed, kf_tap);
                let record = run(&cfg).unwrap();
                let last = record.metrics.last().expect("five epochs").clone();
                let ratio = last
                    .ratios
                    .iter()
                    .find(|(t, _)| t == "conv6")
                    .map(|(_, v)| *v)
                    .expect("conv6 diagnostics enabled");
                let arm = ArmResult {
                    train_error: last.train_error,
                    test_error: last.test_error,
                    ratio_conv6: ratio,
                };
                println!(
                    "  desk-scale {} seed {seed}: train {:.4} test {:.4} ratio {:.3} ({:.0}s)",
                    if kf_tap { "BN+KF" } else { "BN   " },
                    arm.train_error,
                    arm.test_error,
                    arm.ratio_conv6,
                    record.wall_time.as_secs_f64(),
                );
                if kf_tap {
                    result.kf.push(arm);
                } else {
                    result.bn.push(arm);
                }
            }
        }
        result.wall_seconds = started.elapsed().as_secs_f64();
        result
    })
}

#[test]
fn criterion_6_desk_scale_error_direction() {
    let runs = desk_scale();
    let mut bn_tests: Vec<f64> = runs.bn.iter().map(|a| a.test_error).collect();
    let mut kf_tests: Vec<f64> = runs.kf.iter().map(|a| a.test_error).collect();
    let bn_median = median(&mut bn_tests);
    let kf_median = median(&mut kf_tests);
    let gap_wins = runs
        .bn
        .iter()
        .zip(&runs.kf)
        .filter(|(bn, kf)| {
            (kf.test_error - kf.train_error) < (bn.test_error - bn.train_error)
        })
        .count();
    let pass = kf_median <= bn_median && gap_wins >= 2 && runs.wall_seconds < 1800.0;
    report(
        "6 desk-scale-error-direction",
        pass,
        &format!(
            "median test error KF {kf_median:.4} <= BN {bn_median:.4}; gap smaller in {gap_wins}/3 seeds; {:.0}s total",
            runs.wall_seconds
        ),
    );
}

#[test]
fn criterion_7_distance_ratio_direction() {
    let runs = desk_scale();
    let ratio_wins = runs
        .bn
        .iter()
        .zip(&runs.kf)
        .filter(|(bn, kf)| kf.ratio_conv6 > bn.ratio_conv6)
        .count();
    report(
        "7 distance-ratio-direction",
        ratio_wins >= 2,
        &format!("KF ratio above BN in {ratio_wins}/3 seeds"),
    );
}

// ---------------------------------------------------------------------------
// 8. multi-tap additivity
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_multi_tap_additivity() {
    let started = Instant::now();
    let spec = nn::digit_cnn(0.05, true);
    let template = nn::build(&spec, &mut Rng::seeded(88, Stream::Init)).unwrap();
    let ds = kflows::data::synthetic_digits(16, &mut Rng::seeded(88, Stream::Data));
    let idx: Vec<usize> = (0..16).collect();
    let x = ds.gather_x(&idx);
    let y = ds.gather_y(&idx);
    let half: Vec<usize> = (0..8).collect();

    let tap3 = KernelSpec::tap("conv3", Reduce::AvgPoolToChannel, -0.5);
    let tap6 = KernelSpec::tap("conv6", Reduce::None, -0.2);
    let eval = |terms: Vec<KernelTerm>, ce: f64| -> f64 {
        let mut net = template.clone();
        let mut config = KFLossConfig {
            terms,
            ce_weight: ce,
            sampling: SamplingPolicy::Uniform,
            batch_size: 16,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = combined_loss(
            &mut tape,
            &mut net,
            xv,
            &y,
            &half,
            &mut config,
            &NuggetPolicy::training(),
            &mut Rng::new(0),
            None,
        )
        .unwrap();
        tape.value(out.total).item()
    };

    let both = eval(
        vec![
            KernelTerm::new("conv3", tap3.clone(), 0.7),
            KernelTerm::new("conv6", tap6.clone(), 1.3),
        ],
        1.0,
    );
    let only3 = eval(vec![KernelTerm::new("conv3", tap3, 0.7)], 0.0);
    let only6 = eval(vec![KernelTerm::new("conv6", tap6, 1.3)], 0.0);
    let only_ce = eval(Vec::new(), 1.0);
    let sum = only3 + only6 + only_ce;
    let rel = (both - sum).abs() / both.abs().max(1.0);
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "8 multi-tap-additivity",
        rel <= 1e-12 && elapsed < 1.0,
        &format!("combined {both:.15e} vs parts {sum:.15e}, rel {rel:.2e}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 9. IDX round trip and rejection
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_idx_loader() {
    let started = Instant::now();
    let dir = out_dir("criterion9");

    // Round trip.
    let mut images = Tensor::zeros(&[3, 28, 28, 1]);
    let mut rng = Rng::seeded(99, Stream::Data);
    for v in images.data_mut() {
        *v = (rng.next_f64() * 255.0).round() / 255.0;
    }
    let labels = [4u8, 0, 9];
    let ip = dir.join("images-idx3-ubyte");
    let lp = dir.join("labels-idx1-ubyte");
    write_idx(&images, &labels, &ip, &lp).unwrap();
    let ds = load_idx(&ip, &lp).unwrap();
    let round_trip = ds.x.data() == images.data()
        && ds.y.get(0, 4) == 1.0
        && ds.y.get(1, 0) == 1.0
        && ds.y.get(2, 9) == 1.0;

    // Bad magic.
    let bad = dir.join("bad-magic");
    std::fs::write(&bad, 0xdeadbeefu32.to_be_bytes()).unwrap();
    let bad_magic = matches!(load_idx(&bad, &lp), Err(DataError::BadMagic { .. }));

    // Truncation.
    let full = std::fs::read(&ip).unwrap();
    let cut = dir.join("truncated-idx3-ubyte");
    std::fs::write(&cut, &full[..full.len() / 2]).unwrap();
    let truncated = matches!(load_idx(&cut, &lp), Err(DataError::TruncatedFile { .. }));

    let elapsed = started.elapsed().as_secs_f64();
    report(
        "9 idx-loader",
        round_trip && bad_magic && truncated && elapsed < 1.0,
        &format!(
            "round-trip {round_trip}, bad-magic rejected {bad_magic}, truncation rejected {truncated}, {elapsed:.2}s"
        ),
    );
}
