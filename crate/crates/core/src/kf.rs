//! Kernel Flows: batch/half-batch sampling, the rho and e2 kernel-selection
//! losses, the combined classifier + kernel objective, and the standalone
//! kernel learning loop.
//!
//! The guiding quantity is the accuracy lost when a random half of a batch
//! must predict the rest through the kernel interpolant. rho measures it as
//! a squared relative RKHS-norm error; e2 (the variant the training loops
//! default to) as the squared Euclidean prediction error on the batch
//! labels.

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::kernels::{
    self, feature_map, gram, median_heuristic_log_gamma, DeformRef, FeatureCtx, FeatureSource,
    GramPair, KernelError, KernelSpec,
};
use crate::linalg::{LinalgError, Matrix, NuggetPolicy};
use crate::nn::{self, NetworkState, NnError, TapeParams};
use crate::rng::{Rng, Stream};
use std::fmt;

#[derive(Debug, Clone)]
pub enum KfError {
    InsufficientData { needed: usize, available: usize },
    CoverageUnsatisfiable { attempts: usize },
    DegenerateDenominator { value: f64 },
    InvalidConfig(String),
    Kernel(KernelError),
    Network(NnError),
    Autodiff(AutodiffError),
    Linalg(LinalgError),
}

impl fmt::Display for KfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KfError::InsufficientData { needed, available } => {
                write!(f, "need {needed} samples, have {available}")
            }
            KfError::CoverageUnsatisfiable { attempts } => {
                write!(f, "class coverage unsatisfied after {attempts} resamples")
            }
            KfError::DegenerateDenominator { value } => {
                write!(f, "rho denominator {value:e} below 1e-12")
            }
            KfError::InvalidConfig(s) => write!(f, "invalid config: {s}"),
            KfError::Kernel(e) => write!(f, "{e}"),
            KfError::Network(e) => write!(f, "{e}"),
            KfError::Autodiff(e) => write!(f, "{e}"),
            KfError::Linalg(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for KfError {}

impl From<KernelError> for KfError {
    fn from(e: KernelError) -> Self {
        KfError::Kernel(e)
    }
}

impl From<NnError> for KfError {
    fn from(e: NnError) -> Self {
        KfError::Network(e)
    }
}

impl From<AutodiffError> for KfError {
    fn from(e: AutodiffError) -> Self {
        KfError::Autodiff(e)
    }
}

impl From<LinalgError> for KfError {
    fn from(e: LinalgError) -> Self {
        KfError::Linalg(e)
    }
}

/// A mini-batch (dataset indices) and its nested half (positions within the
/// batch, size floor(N_b / 2) except under explicit per-class quotas).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSplit {
    pub batch: Vec<usize>,
    pub half: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SamplingPolicy {
    /// Batch and half both uniform without replacement.
    Uniform,
    /// Equal per-class batch quotas; the half takes `per_class` from each.
    ClassBalanced { per_class: usize },
    /// Uniform, but the half is resampled until every class present in
    /// batch-minus-half also appears in the half.
    ClassCovering,
}

const COVERING_ATTEMPTS: usize = 1000;

/// One weighted kernel term of the combined objective.
#[derive(Debug, Clone)]
pub struct KernelTerm {
    /// Column label in logs (e.g. the tap name).
    pub label: String,
    pub kernel: KernelSpec,
    pub weight: f64,
}

impl KernelTerm {
    pub fn new(label: &str, kernel: KernelSpec, weight: f64) -> KernelTerm {
        KernelTerm {
            label: label.to_string(),
            kernel,
            weight,
        }
    }
}

/// Configuration of the combined loss: kernel terms, cross-entropy weight,
/// and the batch sampling policy.
#[derive(Debug, Clone)]
pub struct KFLossConfig {
    pub terms: Vec<KernelTerm>,
    pub ce_weight: f64,
    pub sampling: SamplingPolicy,
    pub batch_size: usize,
}

impl KFLossConfig {
    pub fn validate(&self) -> Result<(), KfError> {
        if self.terms.is_empty() && self.ce_weight <= 0.0 {
            return Err(KfError::InvalidConfig(
                "need at least one kernel term or a positive ce_weight".into(),
            ));
        }
        for t in &self.terms {
            if !t.weight.is_finite() || t.weight < 0.0 {
                return Err(KfError::InvalidConfig(format!(
                    "weight {} for term '{}' must be finite and nonnegative",
                    t.weight, t.label
                )));
            }
        }
        if !self.ce_weight.is_finite() || self.ce_weight < 0.0 {
            return Err(KfError::InvalidConfig(format!(
                "ce_weight {} must be finite and nonnegative",
                self.ce_weight
            )));
        }
        if self.batch_size < 2 {
            return Err(KfError::InvalidConfig(format!(
                "batch_size {} must be at least 2",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Draws a batch and its nested half according to the sampling policy.
pub fn sample_split(
    dataset: &Dataset,
    config: &KFLossConfig,
    rng: &mut Rng,
) -> Result<BatchSplit, KfError> {
    let n = dataset.len();
    let nb = config.batch_size;
    if n < nb {
        return Err(KfError::InsufficientData {
            needed: nb,
            available: n,
        });
    }
    match &config.sampling {
        SamplingPolicy::Uniform => {
            let batch = rng.sample_without_replacement(n, nb);
            let half = rng.sample_without_replacement(nb, nb / 2);
            Ok(BatchSplit { batch, half })
        }
        SamplingPolicy::ClassBalanced { per_class } => {
            let Some(class_index) = &dataset.class_index else {
                return Err(KfError::InvalidConfig(
                    "class-balanced sampling needs a class index".into(),
                ));
            };
            let classes = class_index.len();
            if nb % classes != 0 {
                return Err(KfError::InvalidConfig(format!(
                    "batch_size {nb} is not a multiple of {classes} classes"
                )));
            }
            let quota = nb / classes;
            if *per_class > quota {
                return Err(KfError::InvalidConfig(format!(
                    "per_class {per_class} exceeds per-class batch quota {quota}"
                )));
            }
            if per_class * classes != nb / 2 {
                return Err(KfError::InvalidConfig(format!(
                    "per_class {per_class} x {classes} classes must fill half of {nb}"
                )));
            }
            let mut batch = Vec::with_capacity(nb);
            let mut half = Vec::with_capacity(nb / 2);
            for (c, members) in class_index.iter().enumerate() {
                if members.len() < quota {
                    return Err(KfError::InsufficientData {
                        needed: quota,
                        available: members.len(),
                    });
                }
                let offset = c * quota;
                let picks = rng.sample_without_replacement(members.len(), quota);
                for p in picks {
                    batch.push(members[p]);
                }
                for pos in rng.sample_without_replacement(quota, *per_class) {
                    half.push(offset + pos);
                }
            }
            Ok(BatchSplit { batch, half })
        }
        SamplingPolicy::ClassCovering => {
            let batch = rng.sample_without_replacement(n, nb);
            for attempt in 0..COVERING_ATTEMPTS {
                let half = rng.sample_without_replacement(nb, nb / 2);
                if covers(dataset, &batch, &half) {
                    let _ = attempt;
                    return Ok(BatchSplit { batch, half });
                }
            }
            Err(KfError::CoverageUnsatisfiable {
                attempts: COVERING_ATTEMPTS,
            })
        }
    }
}

/// Every class appearing in batch-minus-half must appear in the half.
fn covers(dataset: &Dataset, batch: &[usize], half: &[usize]) -> bool {
    let mut in_half = [false; 64];
    let mut is_half_pos = vec![false; batch.len()];
    for &pos in half {
        is_half_pos[pos] = true;
        let c = dataset.class_of(batch[pos]);
        if c < 64 {
            in_half[c] = true;
        }
    }
    for (pos, &sample) in batch.iter().enumerate() {
        if !is_half_pos[pos] {
            let c = dataset.class_of(sample);
            if c < 64 && !in_half[c] {
                return false;
            }
        }
    }
    true
}

const RHO_DENOM_FLOOR: f64 = 1e-12;

/// rho = 1 - (Yc^T Kcc^{-1} Yc) / (Yb^T Kbb^{-1} Yb), traces summed over
/// label columns. Lies in [0, 1] up to roundoff; differentiable through the
/// solve adjoints.
pub fn rho_loss(
    tape: &mut Tape,
    gram: &GramPair,
    yb: &Matrix,
    yc: &Matrix,
    policy: &NuggetPolicy,
) -> Result<Var, KfError> {
    let yb_var = tape.constant(Tensor::from_matrix(yb));
    let yc_var = tape.constant(Tensor::from_matrix(yc));
    let vc = tape.solve_spd(gram.k_cc, yc_var, policy)?;
    let num_prod = tape.mul_elem(yc_var, vc)?;
    let num = tape.sum(num_prod);
    let vb = tape.solve_spd(gram.k_bb, yb_var, policy)?;
    let den_prod = tape.mul_elem(yb_var, vb)?;
    let den = tape.sum(den_prod);
    let den_value = tape.value(den).item();
    if den_value.abs() < RHO_DENOM_FLOOR {
        return Err(KfError::DegenerateDenominator { value: den_value });
    }
    let ratio = tape.div_scalar(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// e2 = ||Yb - Kbc Kcc^{-1} Yc||^2 (Frobenius over label columns), the
/// l2-norm variant of the KF loss. Raw sum over the batch; callers decide
/// any per-sample normalization.
pub fn e2_loss(
    tape: &mut Tape,
    gram: &GramPair,
    yb: &Matrix,
    yc: &Matrix,
    policy: &NuggetPolicy,
) -> Result<Var, KfError> {
    let yb_var = tape.constant(Tensor::from_matrix(yb));
    let yc_var = tape.constant(Tensor::from_matrix(yc));
    let weights = tape.solve_spd(gram.k_cc, yc_var, policy)?;
    let pred = tape.matmul(gram.k_bc, weights)?;
    let resid = tape.sub(yb_var, pred)?;
    let sq = tape.square(resid);
    Ok(tape.sum(sq))
}

/// Eager e2 of one split from precomputed features (raw sum over the batch).
pub fn eval_e2(
    features: &Matrix,
    y: &Matrix,
    half: &[usize],
    gamma: f64,
    policy: &NuggetPolicy,
) -> Result<f64, KfError> {
    let n = features.rows();
    let k = kernels::rbf_gram(features, gamma);
    let mut k_bc = Matrix::zeros(n, half.len());
    let mut k_cc = Matrix::zeros(half.len(), half.len());
    for r in 0..n {
        for (jj, &j) in half.iter().enumerate() {
            k_bc.set(r, jj, k.get(r, j));
        }
    }
    for (ii, &i) in half.iter().enumerate() {
        for (jj, &j) in half.iter().enumerate() {
            k_cc.set(ii, jj, k.get(i, j));
        }
    }
    let mut yc = Matrix::zeros(half.len(), y.cols());
    for (ii, &i) in half.iter().enumerate() {
        for c in 0..y.cols() {
            yc.set(ii, c, y.get(i, c));
        }
    }
    let pred = kernels::interpolate(&k_bc, &k_cc, &yc, policy)?;
    let resid = y.sub(&pred);
    Ok(resid.frob_norm().powi(2))
}

/// Everything a training step needs from one combined-loss build.
#[derive(Debug)]
pub struct CombinedLoss {
    /// Per-sample total: (sum_l weight_l * e2_l + ce_weight * CE) / N_b.
    pub total: Var,
    pub leased: TapeParams,
    /// log-gamma leaves, aligned with `config.terms`.
    pub gamma_vars: Vec<Var>,
    /// Cross-entropy per sample (unweighted).
    pub ce_per_sample: f64,
    /// Raw per-sample e2 per term (unweighted), aligned with `config.terms`.
    pub term_e2_per_sample: Vec<f64>,
}

/// Builds the combined objective on one tape: KF terms on tapped features
/// plus the cross-entropy head, sharing a single forward pass so one
/// backward yields both network and bandwidth gradients.
///
/// Median-heuristic bandwidths (`log_gamma = None`) are resolved here from
/// the first batch seen and written back into `config`. `external` supplies
/// pre-leased parameter/bandwidth vars (used by gradient checks); normally
/// parameters are leased from `net` and bandwidths from `config`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    net: &mut NetworkState,
    x_batch: Var,
    yb: &Matrix,
    half: &[usize],
    config: &mut KFLossConfig,
    policy: &NuggetPolicy,
    mask_rng: &mut Rng,
    external: Option<(&TapeParams, &[Var])>,
) -> Result<CombinedLoss, KfError> {
    config.validate()?;
    let nb = tape.shape(x_batch)[0];
    if yb.rows() != nb {
        return Err(KfError::InvalidConfig(format!(
            "batch of {nb} inputs with {} label rows",
            yb.rows()
        )));
    }
    let leased = match external {
        Some((p, _)) => (*p).clone(),
        None => TapeParams::lease(net, tape),
    };
    let fw = nn::forward_with_taps(net, tape, &leased, x_batch, mask_rng)?;

    let yc = pick_rows(yb, half);
    let trainable = net.mode == nn::Mode::Train;
    let mut gamma_vars = Vec::with_capacity(config.terms.len());
    let mut term_e2 = Vec::with_capacity(config.terms.len());
    let mut acc: Option<Var> = None;
    for (t, term) in config.terms.iter_mut().enumerate() {
        let features = feature_map(
            &term.kernel,
            tape,
            FeatureCtx::with_taps(x_batch, &fw.taps),
        )?;
        let log_gamma = match term.kernel.log_gamma {
            Some(lg) => lg,
            None => {
                let f = tape.value(features).to_matrix()?;
                let lg = median_heuristic_log_gamma(&f);
                term.kernel.log_gamma = Some(lg);
                lg
            }
        };
        let lg_var = match external {
            Some((_, gammas)) => gammas[t],
            None => {
                let t = Tensor::scalar(log_gamma);
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            }
        };
        gamma_vars.push(lg_var);
        let pair = gram(tape, features, lg_var, half)?;
        let e2 = e2_loss(tape, &pair, yb, &yc, policy)?;
        term_e2.push(tape.value(e2).item() / nb as f64);
        let weighted = tape.scale(e2, term.weight);
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }

    let mut ce_per_sample = 0.0;
    if config.ce_weight > 0.0 || config.terms.is_empty() {
        let targets = Tensor::from_matrix(yb);
        let ce = tape.softmax_cross_entropy(fw.output, &targets)?;
        ce_per_sample = tape.value(ce).item() / nb as f64;
        let ce_weighted = tape.scale(ce, config.ce_weight);
        acc = Some(match acc {
            Some(a) => tape.add(a, ce_weighted)?,
            None => ce_weighted,
        });
    }

    let total = tape.scale(acc.expect("validated: at least one component"), 1.0 / nb as f64);
    Ok(CombinedLoss {
        total,
        leased,
        gamma_vars,
        ce_per_sample,
        term_e2_per_sample: term_e2,
    })
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

/// Geometric learning-rate interpolation; both endpoints are returned
/// exactly.
pub fn lr_at(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    debug_assert!(total_steps >= 1);
    if step == 0 {
        lr_start
    } else if step >= total_steps {
        lr_end
    } else {
        lr_start * (lr_end / lr_start).powf(step as f64 / total_steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KfLossKind {
    Rho,
    E2,
}

/// Standalone kernel learning configuration (no classifier head).
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub loss: KfLossKind,
    /// Record the deformed dataset every this many steps (0 = never).
    pub checkpoint_interval: usize,
    pub nugget: NuggetPolicy,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 2000,
            batch_size: 128,
            lr_start: 0.1,
            lr_end: 0.01,
            loss: KfLossKind::E2,
            checkpoint_interval: 400,
            nugget: NuggetPolicy::training(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Per-sample e2, or rho itself.
    pub loss: f64,
    pub log_gamma: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub kernel: KernelSpec,
    pub deform: Option<NetworkState>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// (step, F(X) over the whole dataset), per checkpoint interval.
    pub checkpoints: Vec<(usize, Matrix)>,
}

/// The standalone KF loop: sample a batch and half, measure the chosen loss,
/// step (theta, log gamma) down its gradient, repeat.
pub fn kernel_flow_fit(
    dataset: &Dataset,
    spec: &KernelSpec,
    cfg: &FitConfig,
    seed: u64,
) -> Result<FitResult, KfError> {
    if dataset.y.cols() != 1 && matches!(spec.feature, FeatureSource::Deformation(_)) {
        // Vector labels are fine in principle; the standalone loop is used
        // with real-valued regression labels.
    }
    let mut kernel = spec.clone();
    let mut deform = match &kernel.feature {
        FeatureSource::Deformation(net_spec) => {
            let mut init_rng = Rng::seeded(seed, Stream::Init);
            Some(nn::build(net_spec, &mut init_rng)?)
        }
        FeatureSource::Raw => None,
        FeatureSource::Tap { name, .. } => {
            return Err(KfError::Kernel(KernelError::UnknownTap {
                name: name.clone(),
            }))
        }
    };
    let mut result = FitResult {
        kernel: kernel.clone(),
        deform: deform.clone(),
        trajectory: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok(result);
    }

    let mut sample_rng = Rng::seeded(seed, Stream::Sampling);
    let mut mask_rng = Rng::seeded(seed, Stream::Dropout);
    let sampling_config = KFLossConfig {
        terms: Vec::new(),
        ce_weight: 1.0,
        sampling: SamplingPolicy::Uniform,
        batch_size: cfg.batch_size.min(dataset.len()),
    };

    for step in 0..cfg.steps {
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            result
                .checkpoints
                .push((step, dataset_features(dataset, &kernel, deform.as_mut())?));
        }
        let split = sample_split(dataset, &sampling_config, &mut sample_rng)?;
        let xb = dataset.gather_x(&split.batch);
        let yb = dataset.gather_y(&split.batch);
        let yc = pick_rows(&yb, &split.half);
        let nb = split.batch.len();

        let mut tape = Tape::new();
        let xv = tape.constant(xb);
        let (features, leased) = match deform.as_mut() {
            Some(state) => {
                let leased = TapeParams::lease(state, &mut tape);
                let f = feature_map(
                    &kernel,
                    &mut tape,
                    FeatureCtx {
                        x: xv,
                        taps: None,
                        deform: Some(DeformRef {
                            state,
                            params: &leased,
                            rng: &mut mask_rng,
                        }),
                    },
                )?;
                (f, Some(leased))
            }
            None => (
                feature_map(&kernel, &mut tape, FeatureCtx::raw(xv))?,
                None,
            ),
        };
        let log_gamma = match kernel.log_gamma {
            Some(lg) => lg,
            None => {
                let f = tape.value(features).to_matrix()?;
                let lg = median_heuristic_log_gamma(&f);
                kernel.log_gamma = Some(lg);
                lg
            }
        };
        let lg_var = tape.param(Tensor::scalar(log_gamma));
        let pair = gram(&mut tape, features, lg_var, &split.half)?;
        let loss = match cfg.loss {
            KfLossKind::E2 => {
                let raw = e2_loss(&mut tape, &pair, &yb, &yc, &cfg.nugget)?;
                tape.scale(raw, 1.0 / nb as f64)
            }
            KfLossKind::Rho => rho_loss(&mut tape, &pair, &yb, &yc, &cfg.nugget)?,
        };
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let lr = lr_at(step, cfg.steps, cfg.lr_start, cfg.lr_end);
        if let (Some(state), Some(leased)) = (deform.as_mut(), leased.as_ref()) {
            nn::sgd_step(state, leased, &grads, lr);
        }
        if let Some(g) = grads.get(lg_var) {
            kernel.log_gamma = Some(log_gamma - lr * g.item());
        }
        result.trajectory.push(TrajectoryPoint {
            step,
            loss: loss_value,
            log_gamma: kernel.log_gamma.unwrap_or(log_gamma),
        });
    }
    if cfg.checkpoint_interval > 0 {
        result
            .checkpoints
            .push((cfg.steps, dataset_features(dataset, &kernel, deform.as_mut())?));
    }
    result.kernel = kernel;
    result.deform = deform;
    Ok(result)
}

/// F(X) over the whole dataset under the current deformation (or raw X).
pub fn dataset_features(
    dataset: &Dataset,
    kernel: &KernelSpec,
    deform: Option<&mut NetworkState>,
) -> Result<Matrix, KfError> {
    match (&kernel.feature, deform) {
        (FeatureSource::Deformation(_), Some(state)) => {
            let prev = state.mode;
            state.set_mode(nn::Mode::Eval);
            let mut rng = Rng::new(0);
            let (out, _) = nn::forward_values(state, &dataset.x, &mut rng)?;
            state.set_mode(prev);
            Ok(out.to_matrix()?)
        }
        (FeatureSource::Raw, _) => {
            let n = dataset.len();
            let d = dataset.sample_len();
            Ok(Matrix::from_vec(n, d, dataset.x.data().to_vec())?)
        }
        _ => Err(KfError::InvalidConfig(
            "dataset_features needs a raw or deformation kernel".into(),
        )),
    }
}
