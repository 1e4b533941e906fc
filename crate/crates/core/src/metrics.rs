//! Evaluation and diagnostics: test error, inter/in-class distance ratios on
//! tapped features, and gradient-free KF-loss probes.

use crate::data::Dataset;
use crate::kernels::{median_heuristic_log_gamma, FeatureSource, Reduce};
use crate::kf::{eval_e2, sample_split, KFLossConfig, KfError};
use crate::linalg::{Matrix, NuggetPolicy};
use crate::nn::{forward_values, Mode, NetworkState, NnError};
use crate::rng::Rng;
use std::fmt;

#[derive(Debug, Clone)]
pub enum MetricsError {
    /// A required pair set (in-class or inter-class) is empty.
    DegenerateBatch { detail: String },
    /// The network must be in eval mode for deterministic measurements.
    NotEvalMode,
    UnknownTap { name: String },
    Kf(KfError),
    Network(NnError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::DegenerateBatch { detail } => write!(f, "degenerate batch: {detail}"),
            MetricsError::NotEvalMode => write!(f, "network must be in eval mode"),
            MetricsError::UnknownTap { name } => write!(f, "unknown tap '{name}'"),
            MetricsError::Kf(e) => write!(f, "{e}"),
            MetricsError::Network(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<KfError> for MetricsError {
    fn from(e: KfError) -> Self {
        MetricsError::Kf(e)
    }
}

impl From<NnError> for MetricsError {
    fn from(e: NnError) -> Self {
        MetricsError::Network(e)
    }
}

/// Fraction of samples whose argmax logit disagrees with the argmax label.
///
/// Evaluation is batched for memory; per-sample results are independent of
/// batch boundaries and sample order in eval mode.
pub fn classification_error(
    net: &mut NetworkState,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64, MetricsError> {
    if net.mode != Mode::Eval {
        return Err(MetricsError::NotEvalMode);
    }
    let n = dataset.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = Rng::new(0); // eval mode draws nothing
    let mut wrong = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = dataset.gather_x(&idx);
        let (logits, _) = forward_values(net, &x, &mut rng)?;
        let classes = logits.shape()[1];
        for (row, &i) in idx.iter().enumerate() {
            let pred = argmax(&logits.data()[row * classes..(row + 1) * classes]);
            if pred != dataset.class_of(i) {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(wrong as f64 / n as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean pairwise distances within and across classes, by exact enumeration.
#[derive(Debug, Clone)]
pub struct DistanceRatioReport {
    pub tap: String,
    pub mean_interclass: f64,
    pub mean_inclass: f64,
    /// None when the in-class mean is zero (ratio undefined).
    pub ratio: Option<f64>,
}

/// Enumerates all unordered pairs of feature rows; same-class pairs feed the
/// in-class mean, different-class pairs the inter-class mean.
pub fn distance_ratio(
    features: &Matrix,
    labels: &[usize],
    tap: &str,
) -> Result<DistanceRatioReport, MetricsError> {
    let n = features.rows();
    assert_eq!(labels.len(), n, "one label per feature row");
    let mut sum_in = 0.0;
    let mut count_in = 0usize;
    let mut sum_inter = 0.0;
    let mut count_inter = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = 0.0;
            for (a, b) in features.row(i).iter().zip(features.row(j)) {
                let t = a - b;
                d += t * t;
            }
            let d = d.sqrt();
            if labels[i] == labels[j] {
                sum_in += d;
                count_in += 1;
            } else {
                sum_inter += d;
                count_inter += 1;
            }
        }
    }
    if count_in == 0 || count_inter == 0 {
        return Err(MetricsError::DegenerateBatch {
            detail: format!("{count_in} in-class and {count_inter} inter-class pairs"),
        });
    }
    let mean_inclass = sum_in / count_in as f64;
    let mean_interclass = sum_inter / count_inter as f64;
    let ratio = if mean_inclass > 0.0 {
        Some(mean_interclass / mean_inclass)
    } else {
        None
    };
    Ok(DistanceRatioReport {
        tap: tap.to_string(),
        mean_interclass,
        mean_inclass,
        ratio,
    })
}

/// Eval-mode tap features of a sample batch, reduced per the kernel spec.
pub fn tap_features(
    net: &mut NetworkState,
    x: &crate::autodiff::Tensor,
    tap: &str,
    reduce: Reduce,
) -> Result<Matrix, MetricsError> {
    let mut rng = Rng::new(0);
    let (_, taps) = forward_values(net, x, &mut rng)?;
    let Some(t) = taps.get(tap) else {
        return Err(MetricsError::UnknownTap {
            name: tap.to_string(),
        });
    };
    Ok(reduce_tensor(t, reduce))
}

fn reduce_tensor(t: &crate::autodiff::Tensor, reduce: Reduce) -> Matrix {
    let s = t.shape();
    let n = s[0];
    match reduce {
        Reduce::AvgPoolToChannel if s.len() == 4 => {
            let (h, w, c) = (s[1], s[2], s[3]);
            let mut out = Matrix::zeros(n, c);
            let inv = 1.0 / (h * w) as f64;
            for img in 0..n {
                for (pos, &v) in t.data()[img * h * w * c..(img + 1) * h * w * c]
                    .iter()
                    .enumerate()
                {
                    let ch = pos % c;
                    out.set(img, ch, out.get(img, ch) + v * inv);
                }
            }
            out
        }
        _ => {
            let d: usize = s[1..].iter().product();
            Matrix::from_vec(n, d, t.data().to_vec()).expect("finite activations")
        }
    }
}

/// Mean per-sample e2 of each configured kernel term over `n_splits` fresh
/// batch splits, gradient-free on a frozen network.
///
/// Terms use their trained bandwidth when set; diagnostic-only terms without
/// one fall back to the median heuristic per split.
pub fn kf_probe(
    net: Option<&mut NetworkState>,
    dataset: &Dataset,
    config: &KFLossConfig,
    n_splits: usize,
    policy: &NuggetPolicy,
    rng: &mut Rng,
) -> Result<Vec<(String, f64)>, MetricsError> {
    let mut net = net;
    if let Some(state) = net.as_deref_mut() {
        if state.mode != Mode::Eval {
            return Err(MetricsError::NotEvalMode);
        }
    }
    let mut sums = vec![0.0f64; config.terms.len()];
    for _ in 0..n_splits {
        let split = sample_split(dataset, config, rng)?;
        let xb = dataset.gather_x(&split.batch);
        let yb = dataset.gather_y(&split.batch);
        let nb = split.batch.len();
        // One forward per split serves all tap terms.
        let taps = match net.as_deref_mut() {
            Some(state) => {
                let mut mask_rng = Rng::new(0);
                let (_, taps) = forward_values(state, &xb, &mut mask_rng)?;
                Some(taps)
            }
            None => None,
        };
        for (t, term) in config.terms.iter().enumerate() {
            let features = match &term.kernel.feature {
                FeatureSource::Raw => {
                    let d: usize = xb.shape()[1..].iter().product();
                    Matrix::from_vec(nb, d, xb.data().to_vec()).expect("finite inputs")
                }
                FeatureSource::Tap { name, reduce } => {
                    let Some(taps) = &taps else {
                        return Err(MetricsError::UnknownTap { name: name.clone() });
                    };
                    let Some(tensor) = taps.get(name) else {
                        return Err(MetricsError::UnknownTap { name: name.clone() });
                    };
                    reduce_tensor(tensor, *reduce)
                }
                FeatureSource::Deformation(_) => {
                    return Err(MetricsError::Kf(KfError::InvalidConfig(
                        "kf_probe handles raw and tap kernels".into(),
                    )))
                }
            };
            let gamma = term
                .kernel
                .gamma()
                .unwrap_or_else(|| median_heuristic_log_gamma(&features).exp());
            let e2 = eval_e2(&features, &yb, &split.half, gamma, policy)?;
            sums[t] += e2 / nb as f64;
        }
    }
    Ok(config
        .terms
        .iter()
        .zip(sums)
        .map(|(term, s)| (term.label.clone(), s / n_splits.max(1) as f64))
        .collect())
}
