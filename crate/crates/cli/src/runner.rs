//! Seeded experiment execution and CSV/checkpoint emission.

use crate::config::{DataSource, ExperimentConfig, GammaInit, Kind, LossKind, Sampling};
use crate::CliError;
use kflows::autodiff::{grad_check, AutodiffError, Tape, Tensor, Var};
use kflows::data::{augment, load_idx, swissroll, synthetic_digits, AugmentPolicy, Dataset};
use kflows::kernels::{KernelSpec, Reduce};
use kflows::kf::{
    combined_loss, kernel_flow_fit, lr_at, sample_split, FitConfig, KFLossConfig, KernelTerm,
    KfLossKind, SamplingPolicy,
};
use kflows::linalg::NuggetPolicy;
use kflows::metrics::{classification_error, distance_ratio, kf_probe, tap_features};
use kflows::nn::{self, sgd_step, Mode, NetworkState, TapeParams};
use kflows::rng::{Rng, Stream};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// One per-epoch metrics row of a classifier run.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_error: f64,
    pub test_error: f64,
    pub test_error_alt: Option<f64>,
    /// (tap, mean per-sample e2), aligned with the diagnostics list.
    pub probes: Vec<(String, f64)>,
    /// (tap, mean inter/in-class ratio), aligned with the diagnostics list.
    pub ratios: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct RunRecord {
    pub config_snapshot: String,
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub final_test_error: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub grad_check_passed: Option<bool>,
    /// Held-out per-sample e2 of a swissroll run, (initial, final).
    pub held_out_e2: Option<(f64, f64)>,
    pub wall_time: Duration,
}

/// Executes one experiment: validates, snapshots the resolved config, runs
/// the configured family, and writes CSV/checkpoint outputs under
/// `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord, CliError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out)?;
    let snapshot = config.snapshot();
    std::fs::write(config.out.join("config.resolved"), &snapshot)?;
    let started = Instant::now();
    let mut record = match config.kind {
        Kind::TrainCnn => run_train_cnn(config)?,
        Kind::Swissroll => run_swissroll(config)?,
        Kind::GradCheck => run_grad_check(config)?,
    };
    record.config_snapshot = snapshot;
    record.out_dir = config.out.clone();
    record.wall_time = started.elapsed();
    Ok(record)
}

fn empty_record() -> RunRecord {
    RunRecord {
        config_snapshot: String::new(),
        out_dir: PathBuf::new(),
        metrics: Vec::new(),
        final_test_error: None,
        checkpoint_path: None,
        grad_check_passed: None,
        held_out_e2: None,
        wall_time: Duration::ZERO,
    }
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

struct LoadedData {
    train: Dataset,
    test: Dataset,
    alt_test: Option<Dataset>,
}

fn load_data(config: &ExperimentConfig) -> Result<LoadedData, CliError> {
    let mut loaded = match config.data_source {
        DataSource::Synthetic => {
            let total = config.synthetic_train + config.synthetic_test;
            let mut rng = Rng::seeded(config.synthetic_seed, Stream::Data);
            let all = synthetic_digits(total, &mut rng);
            let (train, test) = all.split_at(config.synthetic_train);
            LoadedData {
                train,
                test,
                alt_test: None,
            }
        }
        DataSource::Idx => {
            let train = load_idx(
                Path::new(&config.train_images),
                Path::new(&config.train_labels),
            )?;
            let test = load_idx(
                Path::new(&config.test_images),
                Path::new(&config.test_labels),
            )?;
            let alt_test = if !config.alt_test_images.is_empty() {
                Some(load_idx(
                    Path::new(&config.alt_test_images),
                    Path::new(&config.alt_test_labels),
                )?)
            } else {
                None
            };
            LoadedData {
                train,
                test,
                alt_test,
            }
        }
    };
    if config.train_limit > 0 {
        loaded.train = loaded.train.take(config.train_limit);
    }
    if config.test_limit > 0 {
        loaded.test = loaded.test.take(config.test_limit);
        loaded.alt_test = loaded.alt_test.map(|d| d.take(config.test_limit));
    }
    Ok(loaded)
}

// ---------------------------------------------------------------------------
// train-cnn
// ---------------------------------------------------------------------------

/// Reduce rule for a tapped layer: spatial taps are channel-averaged,
/// already-flat taps are used as-is.
fn reduce_for_tap(spec: &nn::NetworkSpec, tap: &str) -> Result<Reduce, CliError> {
    let shapes = spec.infer_shapes().map_err(CliError::Network)?;
    let Some(&idx) = spec.taps.get(tap) else {
        return Err(CliError::Config(format!(
            "tap '{tap}' does not exist in the network (available: {})",
            spec.taps.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    };
    Ok(if shapes[idx].len() == 3 {
        Reduce::AvgPoolToChannel
    } else {
        Reduce::None
    })
}

fn kernel_for_tap(
    config: &ExperimentConfig,
    spec: &nn::NetworkSpec,
    tap: &str,
) -> Result<KernelSpec, CliError> {
    let reduce = reduce_for_tap(spec, tap)?;
    Ok(match config.log_gamma {
        GammaInit::Median => KernelSpec::tap(tap, reduce, 0.0).with_median_init(),
        GammaInit::Fixed(lg) => KernelSpec::tap(tap, reduce, lg),
    })
}

fn sampling_policy(config: &ExperimentConfig) -> SamplingPolicy {
    match config.sampling {
        Sampling::Uniform => SamplingPolicy::Uniform,
        Sampling::ClassBalanced => SamplingPolicy::ClassBalanced {
            per_class: config.per_class,
        },
        Sampling::ClassCovering => SamplingPolicy::ClassCovering,
    }
}

fn run_train_cnn(config: &ExperimentConfig) -> Result<RunRecord, CliError> {
    let data = load_data(config)?;
    let mut spec = nn::digit_cnn(config.width_factor, config.batchnorm);
    if config.dropout_conv > 0.0 || config.dropout_dense > 0.0 {
        spec = nn::dropout_baseline(&spec, config.dropout_conv, config.dropout_dense)?;
    }
    let mut net = nn::build(&spec, &mut Rng::seeded(config.seed, Stream::Init))?;

    let mut kf_config = KFLossConfig {
        terms: config
            .taps
            .iter()
            .enumerate()
            .map(|(i, tap)| {
                Ok(KernelTerm::new(
                    tap,
                    kernel_for_tap(config, &spec, tap)?,
                    config.weight_of(i),
                ))
            })
            .collect::<Result<Vec<_>, CliError>>()?,
        ce_weight: config.ce_weight,
        sampling: sampling_policy(config),
        batch_size: config.batch_size,
    };
    for tap in &config.diagnostics {
        // Fail fast on diagnostics typos too.
        reduce_for_tap(&spec, tap)?;
    }

    let nugget = NuggetPolicy::training();
    let steps_per_epoch = (data.train.len() / config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;
    let mut sample_rng = Rng::seeded(config.seed, Stream::Sampling);
    let mut mask_rng = Rng::seeded(config.seed, Stream::Dropout);
    let mut augment_rng = Rng::seeded(config.seed, Stream::Augment);
    let mut eval_rng = Rng::seeded(config.seed, Stream::Eval);
    let augment_policy = AugmentPolicy::new(
        0.5,
        0.5,
        config.augment_translate,
        config.augment_rotate_deg,
        config.augment_shear,
    )?;

    // Fixed training subsample for the per-epoch train error.
    let train_eval = if config.train_subsample > 0 && config.train_subsample < data.train.len() {
        let idx = eval_rng.sample_without_replacement(data.train.len(), config.train_subsample);
        data.train.select(&idx)
    } else {
        data.train.select(&(0..data.train.len()).collect::<Vec<_>>())
    };

    let mut trajectory = TrajectoryWriter::create(
        &config.out.join("trajectory.csv"),
        kf_config.terms.iter().map(|t| t.label.clone()).collect(),
    )?;
    let mut metrics_rows = Vec::with_capacity(config.epochs);

    // Opt-in momentum buffers (plain SGD when momentum = 0).
    let mut velocity: Vec<Tensor> = net
        .named_params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut gamma_velocity = vec![0.0f64; kf_config.terms.len()];

    let mut global_step = 0usize;
    for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let lr = lr_at(global_step, total_steps, config.lr_start, config.lr_end);
            let step_result = (|| -> Result<(), CliError> {
                let split = sample_split(&data.train, &kf_config, &mut sample_rng)?;
                let mut xb = data.train.gather_x(&split.batch);
                if config.augment {
                    xb = augment(&xb, &augment_policy, &mut augment_rng);
                }
                let yb = data.train.gather_y(&split.batch);
                let mut tape = Tape::new();
                let xv = tape.constant(xb);
                let out = combined_loss(
                    &mut tape,
                    &mut net,
                    xv,
                    &yb,
                    &split.half,
                    &mut kf_config,
                    &nugget,
                    &mut mask_rng,
                    None,
                )?;
                let total_value = tape.value(out.total).item();
                if !total_value.is_finite() {
                    return Err(CliError::Training {
                        step: global_step,
                        source: format!("non-finite loss {total_value}"),
                    });
                }
                let grads = tape
                    .backward(out.total)
                    .map_err(|e| CliError::Training {
                        step: global_step,
                        source: e.to_string(),
                    })?;
                if config.momentum > 0.0 {
                    let flat_vars = out.leased.flat();
                    let mut tensors: Vec<Tensor> =
                        net.named_params().into_iter().map(|(_, t)| t).collect();
                    for ((t, var), v) in
                        tensors.iter_mut().zip(&flat_vars).zip(velocity.iter_mut())
                    {
                        if let Some(g) = grads.get(*var) {
                            for ((tv, gv), vv) in
                                t.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                            {
                                *vv = config.momentum * *vv + gv;
                                *tv -= lr * *vv;
                            }
                        }
                    }
                    net.set_params_from_flat(&tensors);
                } else {
                    sgd_step(&mut net, &out.leased, &grads, lr);
                }
                for ((term, gvar), gv) in kf_config
                    .terms
                    .iter_mut()
                    .zip(&out.gamma_vars)
                    .zip(gamma_velocity.iter_mut())
                {
                    if let (Some(lg), Some(g)) = (term.kernel.log_gamma, grads.get(*gvar)) {
                        *gv = config.momentum * *gv + g.item();
                        term.kernel.log_gamma = Some(lg - lr * *gv);
                    }
                }
                trajectory.row(
                    global_step,
                    total_value,
                    out.ce_per_sample,
                    &out.term_e2_per_sample,
                    &kf_config,
                )?;
                Ok(())
            })();
            step_result.map_err(|e| match e {
                CliError::Training { .. } => e,
                other => CliError::Training {
                    step: global_step,
                    source: other.to_string(),
                },
            })?;
            global_step += 1;
        }

        net.set_mode(Mode::Eval);
        let train_error = classification_error(&mut net, &train_eval, config.eval_batch)?;
        let test_error = classification_error(&mut net, &data.test, config.eval_batch)?;
        let test_error_alt = match &data.alt_test {
            Some(alt) => Some(classification_error(&mut net, alt, config.eval_batch)?),
            None => None,
        };
        let (probes, ratios) =
            diagnostics(config, &spec, &mut net, &kf_config, &data.test, &mut eval_rng)?;
        net.set_mode(Mode::Train);
        metrics_rows.push(MetricsRow {
            epoch,
            train_error,
            test_error,
            test_error_alt,
            probes,
            ratios,
        });
    }

    write_metrics_csv(&config.out.join("metrics.csv"), &metrics_rows, config)?;
    let ckpt_path = config.out.join("net.ckpt");
    nn::save_checkpoint(&net, &ckpt_path)?;

    let mut record = empty_record();
    record.final_test_error = metrics_rows.last().map(|r| r.test_error);
    record.metrics = metrics_rows;
    record.checkpoint_path = Some(ckpt_path);
    Ok(record)
}

/// Per-epoch probe and distance-ratio diagnostics over the evaluation set.
fn diagnostics(
    config: &ExperimentConfig,
    spec: &nn::NetworkSpec,
    net: &mut NetworkState,
    kf_config: &KFLossConfig,
    eval_set: &Dataset,
    eval_rng: &mut Rng,
) -> Result<(Vec<(String, f64)>, Vec<(String, f64)>), CliError> {
    if config.diagnostics.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    // Probe config: reuse trained kernels where the tap is also a loss term,
    // median-heuristic bandwidths otherwise.
    let probe_config = KFLossConfig {
        terms: config
            .diagnostics
            .iter()
            .map(|tap| {
                let kernel = kf_config
                    .terms
                    .iter()
                    .find(|t| &t.label == tap)
                    .map(|t| t.kernel.clone());
                Ok(match kernel {
                    Some(k) => KernelTerm::new(tap, k, 1.0),
                    None => KernelTerm::new(
                        tap,
                        kernel_for_tap(config, spec, tap)?.with_median_init(),
                        1.0,
                    ),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?,
        ce_weight: 0.0,
        sampling: kf_config.sampling.clone(),
        batch_size: kf_config.batch_size.min(eval_set.len()),
    };
    let probes = kf_probe(
        Some(net),
        eval_set,
        &probe_config,
        config.probe_splits,
        &NuggetPolicy::training(),
        eval_rng,
    )?;

    let mut ratios = Vec::with_capacity(config.diagnostics.len());
    for tap in &config.diagnostics {
        let reduce = reduce_for_tap(spec, tap)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..config.ratio_batches.max(1) {
            let batch =
                eval_rng.sample_without_replacement(eval_set.len(), probe_config.batch_size);
            let x = eval_set.gather_x(&batch);
            let labels: Vec<usize> = batch.iter().map(|&i| eval_set.class_of(i)).collect();
            let features = tap_features(net, &x, tap, reduce)?;
            if let Ok(report) = distance_ratio(&features, &labels, tap) {
                if let Some(r) = report.ratio {
                    sum += r;
                    count += 1;
                }
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        ratios.push((tap.clone(), mean));
    }
    Ok((probes, ratios))
}

// ---------------------------------------------------------------------------
// swissroll
// ---------------------------------------------------------------------------

fn run_swissroll(config: &ExperimentConfig) -> Result<RunRecord, CliError> {
    let mut data_rng = Rng::seeded(config.seed, Stream::Data);
    let dataset = swissroll(
        config.sw_n_per_class,
        config.sw_turns,
        config.sw_noise_std,
        &mut data_rng,
    );
    let deform_spec = nn::mlp(2, &config.sw_hidden, 2);
    let kernel = match config.log_gamma {
        GammaInit::Median => KernelSpec::deformation(deform_spec, 0.0).with_median_init(),
        GammaInit::Fixed(lg) => KernelSpec::deformation(deform_spec, lg),
    };
    let fit_config = FitConfig {
        steps: config.sw_steps,
        batch_size: config.sw_batch_size,
        lr_start: config.sw_lr_start,
        lr_end: config.sw_lr_end,
        loss: match config.sw_loss {
            LossKind::E2 => KfLossKind::E2,
            LossKind::Rho => KfLossKind::Rho,
        },
        checkpoint_interval: config.sw_checkpoint_interval,
        nugget: NuggetPolicy::training(),
    };

    // Initial held-out loss from the same deformation init the fit will use.
    let mut initial_state = nn::build(
        match &kernel.feature {
            kflows::kernels::FeatureSource::Deformation(spec) => spec,
            _ => unreachable!("swissroll kernels are deformations"),
        },
        &mut Rng::seeded(config.seed, Stream::Init),
    )?;
    let initial_e2 = held_out_e2(&dataset, &kernel, Some(&mut initial_state), config, 20, 1_000_003)?;
    let mut fit = kernel_flow_fit(&dataset, &kernel, &fit_config, config.seed)?;

    // Trajectory CSV (the cross-entropy column is zero for pure KF runs).
    let mut w = TrajectoryWriter::create_labels(
        &config.out.join("trajectory.csv"),
        vec!["deform".to_string()],
    )?;
    for p in &fit.trajectory {
        w.raw_row(p.step, p.loss, 0.0, &[p.loss], &[p.log_gamma])?;
    }

    // Checkpoint point clouds: x, y, label, step.
    for (step, points) in &fit.checkpoints {
        let path = config.out.join(format!("points_{step:06}.csv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x,y,label,step")?;
        for i in 0..points.rows() {
            writeln!(
                f,
                "{:?},{:?},{:?},{step}",
                points.get(i, 0),
                points.get(i, 1),
                dataset.y.get(i, 0)
            )?;
        }
    }

    let final_e2 = held_out_e2(
        &dataset,
        &fit.kernel,
        fit.deform.as_mut(),
        config,
        20,
        1_000_003,
    )?;
    let ckpt_path = match &fit.deform {
        Some(state) => {
            let p = config.out.join("deform.ckpt");
            nn::save_checkpoint(state, &p)?;
            Some(p)
        }
        None => None,
    };

    let mut summary = String::new();
    let _ = writeln!(summary, "held_out_e2_initial = {initial_e2:?}");
    let _ = writeln!(summary, "held_out_e2_final = {final_e2:?}");
    let _ = writeln!(
        summary,
        "log_gamma_final = {:?}",
        fit.kernel.log_gamma.unwrap_or(f64::NAN)
    );
    std::fs::write(config.out.join("summary.txt"), summary)?;

    let mut record = empty_record();
    record.held_out_e2 = Some((initial_e2, final_e2));
    record.checkpoint_path = ckpt_path;
    Ok(record)
}

/// Mean per-sample e2 over fresh uniform splits, with the deformation (if
/// any) frozen in eval mode.
pub fn held_out_e2(
    dataset: &Dataset,
    kernel: &KernelSpec,
    deform: Option<&mut NetworkState>,
    config: &ExperimentConfig,
    n_splits: usize,
    eval_seed: u64,
) -> Result<f64, CliError> {
    let features = match deform {
        Some(state) => {
            let prev = state.mode;
            state.set_mode(Mode::Eval);
            let f = kflows::kf::dataset_features(dataset, kernel, Some(state))?;
            state.set_mode(prev);
            f
        }
        None => kflows::kf::dataset_features(dataset, kernel, None)?,
    };
    let gamma = match kernel.gamma() {
        Some(g) => g,
        None => kflows::kernels::median_heuristic_log_gamma(&features).exp(),
    };
    let mut rng = Rng::seeded(eval_seed, Stream::Eval);
    let nb = config.sw_batch_size.min(dataset.len());
    let mut total = 0.0;
    for _ in 0..n_splits {
        let batch = rng.sample_without_replacement(dataset.len(), nb);
        let half = rng.sample_without_replacement(nb, nb / 2);
        let mut fb = kflows::linalg::Matrix::zeros(nb, features.cols());
        for (r, &i) in batch.iter().enumerate() {
            for c in 0..features.cols() {
                fb.set(r, c, features.get(i, c));
            }
        }
        let yb = dataset.gather_y(&batch);
        let e2 = kflows::kf::eval_e2(&fb, &yb, &half, gamma, &NuggetPolicy::training())?;
        total += e2 / nb as f64;
    }
    Ok(total / n_splits as f64)
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

fn run_grad_check(config: &ExperimentConfig) -> Result<RunRecord, CliError> {
    let tol = 1e-4;
    let mut all_pass = true;
    let mut log = String::new();

    let check = |name: &str,
                     report: kflows::autodiff::GradCheckReport,
                     log: &mut String|
     -> bool {
        let pass = report.pass();
        let _ = writeln!(log, "== {name} ==\n{report}");
        println!("== {name} ==\n{report}");
        pass
    };

    // 1. Dense classifier, cross-entropy only.
    {
        let spec = nn::mlp(4, &[6], 3);
        let template = nn::build(&spec, &mut Rng::seeded(config.seed, Stream::Init))?;
        let (x, y) = small_batch(8, 4, 3, config.seed);
        let named = template.named_params();
        let n_params = named.len();
        let build = move |tape: &mut Tape, vars: &[Var]| -> Result<Var, AutodiffError> {
            let mut net = template.clone();
            let leased = TapeParams::from_flat(&net, &vars[..n_params]);
            let xv = tape.constant(x.clone());
            let fw = nn::forward_with_taps(&mut net, tape, &leased, xv, &mut Rng::new(0))
                .map_err(to_ad_err)?;
            let ce = tape.softmax_cross_entropy(fw.output, &y)?;
            Ok(tape.scale(ce, 1.0 / 8.0))
        };
        let report = grad_check(&build, &named, tol).map_err(|e| CliError::Io(e.to_string()))?;
        all_pass &= check("dense classifier / cross-entropy", report, &mut log);
    }

    // 2. Convolutional classifier with batch norm and a tapped KF term on a
    //    16-point batch, theta and log gamma jointly.
    {
        let spec = nn::NetworkSpec::new(&[6, 6, 1])
            .conv(2, 3, kflows::autodiff::Padding::Valid)
            .batchnorm()
            .relu()
            .maxpool()
            .global_avgpool()
            .tap("feat")
            .dense(4)
            .relu()
            .dense(3);
        let template = nn::build(&spec, &mut Rng::seeded(config.seed + 1, Stream::Init))?;
        let (x, y) = small_image_batch(16, 6, 3, config.seed + 1);
        let yb = tensor_to_matrix(&y);
        let half: Vec<usize> = (0..8).collect();
        let named = template.named_params();
        let n_params = named.len();
        let build = move |tape: &mut Tape, vars: &[Var]| -> Result<Var, AutodiffError> {
            let mut net = template.clone();
            let leased = TapeParams::from_flat(&net, &vars[..n_params]);
            let mut kf_config = KFLossConfig {
                terms: vec![KernelTerm::new(
                    "feat",
                    KernelSpec::tap("feat", Reduce::None, -0.3),
                    1.0,
                )],
                ce_weight: 1.0,
                sampling: SamplingPolicy::Uniform,
                batch_size: 16,
            };
            let xv = tape.constant(x.clone());
            let out = combined_loss(
                tape,
                &mut net,
                xv,
                &yb,
                &half,
                &mut kf_config,
                &NuggetPolicy::training(),
                &mut Rng::new(0),
                Some((&leased, &vars[n_params..])),
            )
            .map_err(|e| AutodiffError::ShapeMismatch {
                op: "combined_loss",
                detail: e.to_string(),
            })?;
            Ok(out.total)
        };
        let mut params = named;
        params.push(("log_gamma".to_string(), Tensor::scalar(-0.3)));
        let report = grad_check(&build, &params, tol).map_err(|e| CliError::Io(e.to_string()))?;
        all_pass &= check("conv classifier + KF term (16-point batch)", report, &mut log);
    }

    // 3. Dropout network with a frozen mask stream.
    {
        let spec = nn::NetworkSpec::new(&[5])
            .dense(6)
            .relu()
            .dropout(0.4)
            .dense(2);
        let template = nn::build(&spec, &mut Rng::seeded(config.seed + 2, Stream::Init))?;
        let (x, y) = small_batch(6, 5, 2, config.seed + 2);
        let named = template.named_params();
        let n_params = named.len();
        let frozen = Rng::seeded(config.seed + 2, Stream::Dropout);
        let build = move |tape: &mut Tape, vars: &[Var]| -> Result<Var, AutodiffError> {
            let mut net = template.clone();
            let leased = TapeParams::from_flat(&net, &vars[..n_params]);
            let xv = tape.constant(x.clone());
            // Clone of the frozen stream: identical masks on every rebuild.
            let mut mask_rng = frozen.clone();
            let fw = nn::forward_with_taps(&mut net, tape, &leased, xv, &mut mask_rng)
                .map_err(to_ad_err)?;
            let ce = tape.softmax_cross_entropy(fw.output, &y)?;
            Ok(tape.scale(ce, 1.0 / 6.0))
        };
        let report = grad_check(&build, &named, tol).map_err(|e| CliError::Io(e.to_string()))?;
        all_pass &= check("dropout with frozen masks", report, &mut log);
    }

    std::fs::write(config.out.join("grad_check.txt"), log)?;
    let mut record = empty_record();
    record.grad_check_passed = Some(all_pass);
    Ok(record)
}

fn to_ad_err(e: nn::NnError) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: "forward",
        detail: e.to_string(),
    }
}

fn small_batch(n: usize, d: usize, classes: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::seeded(seed, Stream::Data);
    let mut x = Tensor::zeros(&[n, d]);
    for v in x.data_mut() {
        *v = rng.next_normal();
    }
    let mut y = Tensor::zeros(&[n, classes]);
    for i in 0..n {
        let c = rng.below(classes);
        y.data_mut()[i * classes + c] = 1.0;
    }
    (x, y)
}

fn small_image_batch(n: usize, hw: usize, classes: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::seeded(seed, Stream::Data);
    let mut x = Tensor::zeros(&[n, hw, hw, 1]);
    for v in x.data_mut() {
        *v = rng.next_f64();
    }
    let mut y = Tensor::zeros(&[n, classes]);
    for i in 0..n {
        let c = rng.below(classes);
        y.data_mut()[i * classes + c] = 1.0;
    }
    (x, y)
}

fn tensor_to_matrix(t: &Tensor) -> kflows::linalg::Matrix {
    t.to_matrix().expect("rank-2 labels")
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub name: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_test_error: f64,
    pub std_test_error: f64,
    pub median_test_error: f64,
}

/// Runs every (config, seed) pair, preserving partial results on per-run
/// failures, and writes a summary CSV of final test errors.
pub fn compare(
    configs: &[(String, ExperimentConfig)],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<CompareRow>, CliError> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(CliError::Config(
            "compare needs at least one config and one seed".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (name, base) in configs {
        let mut errors = Vec::with_capacity(seeds.len());
        let mut failures = 0usize;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.out = out.join(format!("{name}_seed{seed}"));
            match run(&cfg) {
                Ok(record) => match record.final_test_error {
                    Some(e) => errors.push(e),
                    None => failures += 1,
                },
                Err(e) => {
                    eprintln!("run {name} seed {seed} failed: {e}");
                    failures += 1;
                }
            }
        }
        let (mean, std, median) = summarize(&errors);
        rows.push(CompareRow {
            name: name.clone(),
            runs: errors.len(),
            failures,
            mean_test_error: mean,
            std_test_error: std,
            median_test_error: median,
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("summary.csv"))?);
    writeln!(
        f,
        "config,runs,failures,mean_test_error,std_test_error,median_test_error"
    )?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{:?},{:?},{:?}",
            r.name, r.runs, r.failures, r.mean_test_error, r.std_test_error, r.median_test_error
        )?;
    }
    Ok(rows)
}

fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    (mean, var.sqrt(), median)
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

struct TrajectoryWriter {
    file: std::io::BufWriter<std::fs::File>,
    labels: Vec<String>,
}

impl TrajectoryWriter {
    fn create(path: &Path, labels: Vec<String>) -> Result<TrajectoryWriter, CliError> {
        Self::create_labels(path, labels)
    }

    fn create_labels(path: &Path, labels: Vec<String>) -> Result<TrajectoryWriter, CliError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = String::from("step,loss_total,loss_ce");
        for l in &labels {
            let _ = write!(header, ",loss_kf_{l}");
        }
        for l in &labels {
            let _ = write!(header, ",gamma_{l}");
        }
        writeln!(file, "{header}")?;
        Ok(TrajectoryWriter { file, labels })
    }

    fn row(
        &mut self,
        step: usize,
        total: f64,
        ce: f64,
        term_e2: &[f64],
        kf_config: &KFLossConfig,
    ) -> Result<(), CliError> {
        let gammas: Vec<f64> = kf_config
            .terms
            .iter()
            .map(|t| t.kernel.gamma().unwrap_or(f64::NAN))
            .collect();
        self.raw_row(step, total, ce, term_e2, &gammas)
    }

    fn raw_row(
        &mut self,
        step: usize,
        total: f64,
        ce: f64,
        term_e2: &[f64],
        gammas: &[f64],
    ) -> Result<(), CliError> {
        debug_assert_eq!(term_e2.len(), self.labels.len());
        let mut line = format!("{step},{total:?},{ce:?}");
        for v in term_e2 {
            let _ = write!(line, ",{v:?}");
        }
        for v in gammas {
            let _ = write!(line, ",{v:?}");
        }
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

fn write_metrics_csv(
    path: &Path,
    rows: &[MetricsRow],
    config: &ExperimentConfig,
) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("epoch,train_error,test_error");
    let has_alt = rows.iter().any(|r| r.test_error_alt.is_some());
    if has_alt {
        header.push_str(",test_error_shifted");
    }
    for tap in &config.diagnostics {
        let _ = write!(header, ",kf_probe_{tap}");
    }
    for tap in &config.diagnostics {
        let _ = write!(header, ",ratio_{tap}");
    }
    writeln!(f, "{header}")?;
    for r in rows {
        let mut line = format!("{},{:?},{:?}", r.epoch, r.train_error, r.test_error);
        if has_alt {
            let _ = write!(line, ",{:?}", r.test_error_alt.unwrap_or(f64::NAN));
        }
        for (_, v) in &r.probes {
            let _ = write!(line, ",{v:?}");
        }
        for (_, v) in &r.ratios {
            let _ = write!(line, ",{v:?}");
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}
