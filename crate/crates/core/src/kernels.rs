//! Differentiable RBF kernels and Gram assembly.
//!
//! A kernel is k(x, x') = exp(-gamma ||F(x) - F(x')||^2) where F is the
//! identity, a learned deformation network, or an inner-layer tap of a
//! classifier (optionally channel-averaged). The bandwidth is stored as
//! log(gamma), so gamma stays positive under unconstrained gradient steps.

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::linalg::{self, LinalgError, Matrix, NuggetPolicy};
use crate::nn::{forward_with_taps, NetworkSpec, NetworkState, NnError, TapeParams};
use crate::rng::Rng;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone)]
pub enum KernelError {
    UnknownTap { name: String },
    IndexOutOfRange { index: usize, len: usize },
    DuplicateIndex { index: usize },
    ShapeMismatch { detail: String },
    Autodiff(AutodiffError),
    Linalg(LinalgError),
    Network(String),
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelError::UnknownTap { name } => write!(f, "unknown tap '{name}'"),
            KernelError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for batch of {len}")
            }
            KernelError::DuplicateIndex { index } => write!(f, "duplicate index {index}"),
            KernelError::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
            KernelError::Autodiff(e) => write!(f, "{e}"),
            KernelError::Linalg(e) => write!(f, "{e}"),
            KernelError::Network(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for KernelError {}

impl From<AutodiffError> for KernelError {
    fn from(e: AutodiffError) -> Self {
        KernelError::Autodiff(e)
    }
}

impl From<LinalgError> for KernelError {
    fn from(e: LinalgError) -> Self {
        KernelError::Linalg(e)
    }
}

impl From<NnError> for KernelError {
    fn from(e: NnError) -> Self {
        KernelError::Network(e.to_string())
    }
}

/// How a tapped activation is reduced to a feature vector per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Flatten whatever the tap produces.
    None,
    /// Average each channel over its spatial extent (one value per channel).
    AvgPoolToChannel,
}

#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Kernel on the raw inputs.
    Raw,
    /// Kernel on F(x) for a learned deformation network.
    Deformation(NetworkSpec),
    /// Kernel on an inner-layer output of the classifier.
    Tap { name: String, reduce: Reduce },
}

/// A differentiable kernel definition: feature source plus trainable
/// log-bandwidth. `log_gamma = None` means "initialize by the median
/// heuristic on the first mini-batch".
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub feature: FeatureSource,
    pub log_gamma: Option<f64>,
}

impl KernelSpec {
    pub fn raw(log_gamma: f64) -> KernelSpec {
        KernelSpec {
            feature: FeatureSource::Raw,
            log_gamma: Some(log_gamma),
        }
    }

    pub fn deformation(net: NetworkSpec, log_gamma: f64) -> KernelSpec {
        KernelSpec {
            feature: FeatureSource::Deformation(net),
            log_gamma: Some(log_gamma),
        }
    }

    pub fn tap(name: &str, reduce: Reduce, log_gamma: f64) -> KernelSpec {
        KernelSpec {
            feature: FeatureSource::Tap {
                name: name.to_string(),
                reduce,
            },
            log_gamma: Some(log_gamma),
        }
    }

    /// Defers bandwidth choice to the median heuristic at first use.
    pub fn with_median_init(mut self) -> KernelSpec {
        self.log_gamma = None;
        self
    }

    pub fn gamma(&self) -> Option<f64> {
        self.log_gamma.map(f64::exp)
    }
}

/// Tape context a feature map may draw on: the raw batch, tap handles from a
/// forward pass that already ran, and/or a deformation network to apply.
pub struct FeatureCtx<'a> {
    pub x: Var,
    pub taps: Option<&'a BTreeMap<String, Var>>,
    pub deform: Option<DeformRef<'a>>,
}

pub struct DeformRef<'a> {
    pub state: &'a mut NetworkState,
    pub params: &'a TapeParams,
    pub rng: &'a mut Rng,
}

impl<'a> FeatureCtx<'a> {
    pub fn raw(x: Var) -> FeatureCtx<'a> {
        FeatureCtx {
            x,
            taps: None,
            deform: None,
        }
    }

    pub fn with_taps(x: Var, taps: &'a BTreeMap<String, Var>) -> FeatureCtx<'a> {
        FeatureCtx {
            x,
            taps: Some(taps),
            deform: None,
        }
    }
}

/// Produces the [N, d] feature matrix for a kernel, on the live tape so
/// gradients flow back to network parameters.
///
/// Tap sources read the handles recorded by the classifier's forward pass
/// (the network is never re-run); deformation sources run the deformation
/// network on the raw batch.
pub fn feature_map(
    spec: &KernelSpec,
    tape: &mut Tape,
    ctx: FeatureCtx,
) -> Result<Var, KernelError> {
    match &spec.feature {
        FeatureSource::Raw => flatten_to_rows(tape, ctx.x),
        FeatureSource::Deformation(_) => {
            let Some(deform) = ctx.deform else {
                return Err(KernelError::ShapeMismatch {
                    detail: "deformation kernel needs a deformation network context".into(),
                });
            };
            let fw = forward_with_taps(deform.state, tape, deform.params, ctx.x, deform.rng)?;
            flatten_to_rows(tape, fw.output)
        }
        FeatureSource::Tap { name, reduce } => {
            let Some(taps) = ctx.taps else {
                return Err(KernelError::UnknownTap { name: name.clone() });
            };
            let Some(&tap) = taps.get(name) else {
                return Err(KernelError::UnknownTap { name: name.clone() });
            };
            match reduce {
                Reduce::AvgPoolToChannel => {
                    if tape.shape(tap).len() != 4 {
                        return Err(KernelError::ShapeMismatch {
                            detail: format!(
                                "avgpool reduce needs a [n, h, w, c] tap, got {:?}",
                                tape.shape(tap)
                            ),
                        });
                    }
                    Ok(tape.global_avgpool(tap)?)
                }
                Reduce::None => flatten_to_rows(tape, tap),
            }
        }
    }
}

fn flatten_to_rows(tape: &mut Tape, v: Var) -> Result<Var, KernelError> {
    let s = tape.shape(v).to_vec();
    if s.len() < 2 {
        return Err(KernelError::ShapeMismatch {
            detail: format!("features need a batch dimension, got {s:?}"),
        });
    }
    if s.len() == 2 {
        return Ok(v);
    }
    let d: usize = s[1..].iter().product();
    Ok(tape.reshape(v, &[s[0], d])?)
}

/// The three Gram blocks of a batch and its nested half.
///
/// `k_bc` and `k_cc` are sliced out of `k_bb` (never recomputed), so the
/// sub-block identity holds bitwise.
#[derive(Debug, Clone)]
pub struct GramPair {
    pub k_bb: Var,
    pub k_bc: Var,
    pub k_cc: Var,
    pub half: Vec<usize>,
}

/// Assembles K_bb[i][j] = exp(-gamma ||F_i - F_j||^2) on the tape, plus the
/// half-batch slices.
pub fn gram(
    tape: &mut Tape,
    features: Var,
    log_gamma: Var,
    half_indices: &[usize],
) -> Result<GramPair, KernelError> {
    let n = tape.shape(features)[0];
    let mut seen = vec![false; n];
    for &i in half_indices {
        if i >= n {
            return Err(KernelError::IndexOutOfRange { index: i, len: n });
        }
        if seen[i] {
            return Err(KernelError::DuplicateIndex { index: i });
        }
        seen[i] = true;
    }
    let gamma = tape.exp(log_gamma);
    let d = tape.pairwise_sqdist(features)?;
    let scaled = tape.scale_var(d, gamma)?;
    let neg = tape.neg(scaled);
    let k_bb = tape.exp(neg);
    let k_bc = tape.gather_cols(k_bb, half_indices)?;
    let k_cc = tape.gather_rows(k_bc, half_indices)?;
    Ok(GramPair {
        k_bb,
        k_bc,
        k_cc,
        half: half_indices.to_vec(),
    })
}

/// Kriging prediction K_bc (K_cc + eps I)^{-1} Y_c on plain matrices.
///
/// The differentiable analogue lives on the tape (`solve_spd` + `matmul`),
/// whose reverse rule is the solve adjoint; this eager form backs probes,
/// evaluation, and oracles.
pub fn interpolate(
    k_bc: &Matrix,
    k_cc: &Matrix,
    yc: &Matrix,
    policy: &NuggetPolicy,
) -> Result<Matrix, KernelError> {
    if k_bc.cols() != k_cc.rows() || k_cc.cols() != yc.rows() {
        return Err(KernelError::ShapeMismatch {
            detail: format!(
                "k_bc {}x{}, k_cc {}x{}, yc {}x{}",
                k_bc.rows(),
                k_bc.cols(),
                k_cc.rows(),
                k_cc.cols(),
                yc.rows(),
                yc.cols()
            ),
        });
    }
    let factor = linalg::cholesky(k_cc, policy)?;
    let weights = linalg::solve(&factor, yc)?;
    Ok(k_bc.matmul(&weights))
}

/// Eager RBF Gram matrix over rows of `features`.
pub fn rbf_gram(features: &Matrix, gamma: f64) -> Matrix {
    rbf_cross(features, features, gamma)
}

/// Eager cross-kernel matrix k(a_i, b_j).
pub fn rbf_cross(a: &Matrix, b: &Matrix, gamma: f64) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "feature dims differ");
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let rb = b.row(j);
            let mut d = 0.0;
            for (x, y) in ra.iter().zip(rb) {
                let t = x - y;
                d += t * t;
            }
            out.set(i, j, (-gamma * d).exp());
        }
    }
    out
}

/// Median-heuristic bandwidth: gamma = 1 / median(offdiag pairwise ||.||^2).
///
/// Keeps initial Gram entries well scaled inside (0, 1); recomputed per run
/// on the first mini-batch. Falls back to gamma = 1 for degenerate batches.
pub fn median_heuristic_log_gamma(features: &Matrix) -> f64 {
    let n = features.rows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let (ra, rb) = (features.row(i), features.row(j));
            let mut d = 0.0;
            for (x, y) in ra.iter().zip(rb) {
                let t = x - y;
                d += t * t;
            }
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if median > 0.0 {
        (1.0 / median).ln()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use crate::nn::{self, Mode};
    use crate::rng::{Rng, Stream};

    fn tensor2(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(&[rows, cols]);
        for v in t.data_mut() {
            *v = rng.next_normal();
        }
        t
    }

    #[test]
    fn raw_feature_map_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let spec = KernelSpec::raw(0.0);
        let f = feature_map(&spec, &mut tape, FeatureCtx::raw(x)).unwrap();
        assert_eq!(tape.value(f).data(), tape.value(x).data());
    }

    #[test]
    fn avgpool_reduce_takes_channel_means() {
        let mut tape = Tape::new();
        // one sample, 2x2 spatial, 2 channels
        let x = tape.constant(
            Tensor::new(&[1, 2, 2, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap(),
        );
        let mut taps = BTreeMap::new();
        taps.insert("t".to_string(), x);
        let spec = KernelSpec::tap("t", Reduce::AvgPoolToChannel, 0.0);
        let dummy = tape.constant(Tensor::zeros(&[1, 1]));
        let f = feature_map(&spec, &mut tape, FeatureCtx::with_taps(dummy, &taps)).unwrap();
        assert_eq!(tape.value(f).data(), &[2.5, 25.0]);
    }

    #[test]
    fn identity_deformation_returns_input() {
        let spec_net = nn::mlp(2, &[], 2);
        let mut rng = Rng::seeded(0, Stream::Init);
        let mut state = nn::build(&spec_net, &mut rng).unwrap();
        if let nn::LayerParams::Dense { w, .. } = &mut state.params[0] {
            for i in 0..2 {
                for j in 0..2 {
                    w.data_mut()[i * 2 + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        state.set_mode(Mode::Eval);
        let mut tape = Tape::new();
        let params = TapeParams::lease(&state, &mut tape);
        let x = tape.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let kspec = KernelSpec::deformation(spec_net, 0.0);
        let mut mask_rng = Rng::seeded(1, Stream::Dropout);
        let f = feature_map(
            &kspec,
            &mut tape,
            FeatureCtx {
                x,
                taps: None,
                deform: Some(DeformRef {
                    state: &mut state,
                    params: &params,
                    rng: &mut mask_rng,
                }),
            },
        )
        .unwrap();
        assert_eq!(tape.value(f).data(), tape.value(x).data());
    }

    #[test]
    fn gram_diagonal_is_exactly_one() {
        let mut rng = Rng::seeded(2, Stream::Data);
        let mut tape = Tape::new();
        let f = tape.constant(tensor2(5, 3, &mut rng));
        let lg = tape.constant(Tensor::scalar(0.7));
        let pair = gram(&mut tape, f, lg, &[0, 2]).unwrap();
        let k = tape.value(pair.k_bb);
        for i in 0..5 {
            assert_eq!(k.data()[i * 5 + i], 1.0);
        }
    }

    #[test]
    fn gram_matches_hand_computation() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let lg = tape.constant(Tensor::scalar(0.01f64.ln()));
        let pair = gram(&mut tape, f, lg, &[0]).unwrap();
        let k = tape.value(pair.k_bb);
        let expected = (-0.25f64).exp(); // 0.01 * 25
        assert!((k.data()[1] - expected).abs() < 1e-15);
        assert!((expected - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn huge_gamma_gives_identity_gram() {
        let mut rng = Rng::seeded(3, Stream::Data);
        let mut tape = Tape::new();
        let f = tape.constant(tensor2(4, 2, &mut rng));
        let lg = tape.constant(Tensor::scalar(1e8f64.ln()));
        let pair = gram(&mut tape, f, lg, &[0, 1]).unwrap();
        let k = tape.value(pair.k_bb);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(k.data()[i * 4 + j] < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gram_rejects_bad_half_indices() {
        let mut rng = Rng::seeded(4, Stream::Data);
        let mut tape = Tape::new();
        let f = tape.constant(tensor2(3, 2, &mut rng));
        let lg = tape.constant(Tensor::scalar(0.0));
        match gram(&mut tape, f, lg, &[0, 3]) {
            Err(KernelError::IndexOutOfRange { index: 3, len: 3 }) => {}
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
        match gram(&mut tape, f, lg, &[1, 1]) {
            Err(KernelError::DuplicateIndex { index: 1 }) => {}
            other => panic!("expected DuplicateIndex, got {other:?}"),
        }
    }

    #[test]
    fn sub_blocks_are_bitwise_slices() {
        let mut rng = Rng::seeded(5, Stream::Data);
        let mut tape = Tape::new();
        let f = tape.constant(tensor2(6, 3, &mut rng));
        let lg = tape.constant(Tensor::scalar(-0.3));
        let half = vec![4, 1, 3];
        let pair = gram(&mut tape, f, lg, &half).unwrap();
        let kbb = tape.value(pair.k_bb).data().to_vec();
        let kbc = tape.value(pair.k_bc).data().to_vec();
        let kcc = tape.value(pair.k_cc).data().to_vec();
        for r in 0..6 {
            for (jj, &j) in half.iter().enumerate() {
                assert_eq!(kbc[r * 3 + jj].to_bits(), kbb[r * 6 + j].to_bits());
            }
        }
        for (ii, &i) in half.iter().enumerate() {
            for (jj, &j) in half.iter().enumerate() {
                assert_eq!(kcc[ii * 3 + jj].to_bits(), kbb[i * 6 + j].to_bits());
            }
        }
    }

    #[test]
    fn assembled_gram_factors_within_ladder() {
        let mut rng = Rng::seeded(6, Stream::Data);
        for trial in 0..20 {
            let n = 3 + (trial % 10);
            let mut tape = Tape::new();
            let f = tape.constant(tensor2(n, 2, &mut rng));
            let lg = tape.constant(Tensor::scalar(rng.range(-3.0, 3.0)));
            let pair = gram(&mut tape, f, lg, &[0]).unwrap();
            let k = tape.value(pair.k_bb).to_matrix().unwrap();
            linalg::cholesky(&k, &NuggetPolicy::default())
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        }
    }

    #[test]
    fn gram_is_permutation_equivariant() {
        let mut rng = Rng::seeded(7, Stream::Data);
        let base = tensor2(5, 3, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(&[5, 3]);
        for (new_i, &old_i) in perm.iter().enumerate() {
            permuted.data_mut()[new_i * 3..(new_i + 1) * 3]
                .copy_from_slice(&base.data()[old_i * 3..(old_i + 1) * 3]);
        }
        let gram_of = |t: &Tensor| {
            let mut tape = Tape::new();
            let f = tape.constant(t.clone());
            let lg = tape.constant(Tensor::scalar(-0.5));
            let pair = gram(&mut tape, f, lg, &[0]).unwrap();
            tape.value(pair.k_bb).data().to_vec()
        };
        let k = gram_of(&base);
        let kp = gram_of(&permuted);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(kp[i * 5 + j], k[perm[i] * 5 + perm[j]]);
            }
        }
    }

    #[test]
    fn interpolation_is_exact_at_the_nodes() {
        let mut rng = Rng::seeded(8, Stream::Data);
        let f = {
            let t = tensor2(6, 2, &mut rng);
            t.to_matrix().unwrap()
        };
        let gamma = 0.8;
        let k = rbf_gram(&f, gamma);
        let mut y = Matrix::zeros(6, 2);
        for i in 0..6 {
            for j in 0..2 {
                y.set(i, j, rng.next_normal());
            }
        }
        // X_c = X_b: the full Gram is both k_bc and k_cc.
        let pred = interpolate(&k, &k, &y, &NuggetPolicy::default()).unwrap();
        let err = pred.sub(&y).max_abs();
        assert!(err <= 1e-6, "node error {err}");
    }

    #[test]
    fn far_apart_centers_predict_zero() {
        // K_cc = identity (infinitely separated), K_bc = 0 away from nodes.
        let k_cc = Matrix::identity(3);
        let k_bc = Matrix::zeros(2, 3);
        let y = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        let pred = interpolate(&k_bc, &k_cc, &y, &NuggetPolicy::default()).unwrap();
        assert_eq!(pred.max_abs(), 0.0);
    }

    #[test]
    fn interpolation_matches_dense_inverse_oracle() {
        // 4 points on a line with y = x, 2-point half.
        let f = Matrix::from_rows(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let y = Matrix::from_rows(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let gamma = 0.5;
        let k = rbf_gram(&f, gamma);
        let half = [1usize, 2];
        let k_bc = pick_cols(&k, &half);
        let k_cc = pick_rows(&pick_cols(&k, &half), &half);
        let yc = pick_rows(&y, &half);
        let pred = interpolate(&k_bc, &k_cc, &yc, &NuggetPolicy::exact()).unwrap();
        let inv = gauss_jordan_inverse(&k_cc);
        let oracle = k_bc.matmul(&inv).matmul(&yc);
        let rel = pred.sub(&oracle).max_abs() / oracle.max_abs();
        assert!(rel <= 1e-10, "rel {rel}");
    }

    #[test]
    fn gram_gradients_pass_finite_differences() {
        let mut rng = Rng::seeded(9, Stream::Data);
        let feats = tensor2(6, 2, &mut rng);
        let weights = tensor2(6, 6, &mut rng);
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let pair = gram(tape, vars[0], vars[1], &[0, 2, 4]).map_err(|e| match e {
                KernelError::Autodiff(a) => a,
                other => AutodiffError::ShapeMismatch {
                    op: "gram",
                    detail: other.to_string(),
                },
            })?;
            let w = tape.constant(weights.clone());
            let weighted = tape.mul_elem(pair.k_bb, w)?;
            tape.sum(weighted);
            // include the sliced blocks so their gather gradients are checked
            let s1 = tape.sum(weighted);
            let wc = tape.constant(Tensor::new(&[3, 3], vec![0.3; 9]).unwrap());
            let weighted_cc = tape.mul_elem(pair.k_cc, wc)?;
            let s2 = tape.sum(weighted_cc);
            tape.add(s1, s2)
        };
        let params = vec![
            ("features".to_string(), feats),
            ("log_gamma".to_string(), Tensor::scalar(-0.4)),
        ];
        let report = grad_check(&build, &params, 1e-4).unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn median_heuristic_scales_gram_sensibly() {
        let mut rng = Rng::seeded(10, Stream::Data);
        let f = tensor2(20, 3, &mut rng).to_matrix().unwrap();
        let lg = median_heuristic_log_gamma(&f);
        let k = rbf_gram(&f, lg.exp());
        // Median off-diagonal entry should be exp(-1).
        let mut offdiag: Vec<f64> = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                if i != j {
                    offdiag.push(k.get(i, j));
                }
            }
        }
        offdiag.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = offdiag[offdiag.len() / 2];
        assert!((med - (-1.0f64).exp()).abs() < 0.05, "median {med}");
    }

    // test helpers

    fn pick_rows(m: &Matrix, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), m.cols());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..m.cols() {
                out.set(r, c, m.get(i, c));
            }
        }
        out
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

    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let mut pivot = col;
            for r in (col + 1)..n {
                if a.get(r, col).abs() > a.get(pivot, col).abs() {
                    pivot = r;
                }
            }
            for c in 0..n {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot, c));
                a.set(pivot, c, tmp);
                let tmp = inv.get(col, c);
                inv.set(col, c, inv.get(pivot, c));
                inv.set(pivot, c, tmp);
            }
            let p = a.get(col, col);
            for c in 0..n {
                a.set(col, c, a.get(col, c) / p);
                inv.set(col, c, inv.get(col, c) / p);
            }
            for r in 0..n {
                if r != col {
                    let factor = a.get(r, col);
                    for c in 0..n {
                        a.set(r, c, a.get(r, c) - factor * a.get(col, c));
                        inv.set(r, c, inv.get(r, c) - factor * inv.get(col, c));
                    }
                }
            }
        }
        inv
    }
}
