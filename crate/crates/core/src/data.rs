//! Datasets: the swissroll two-spiral set, IDX image files, synthetic glyph
//! images, and affine augmentation.

use crate::autodiff::Tensor;
use crate::linalg::Matrix;
use crate::rng::Rng;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub enum DataError {
    BadMagic { path: String, got: u32, expected: u32 },
    CountMismatch { images: usize, labels: usize },
    TruncatedFile { path: String },
    BadLabel { value: u8 },
    InvalidPolicy(String),
    Io(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadMagic {
                path,
                got,
                expected,
            } => write!(f, "{path}: magic {got:#010x}, expected {expected:#010x}"),
            DataError::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            DataError::TruncatedFile { path } => write!(f, "{path}: truncated"),
            DataError::BadLabel { value } => write!(f, "label byte {value} exceeds 9"),
            DataError::InvalidPolicy(s) => write!(f, "invalid augment policy: {s}"),
            DataError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Paired inputs and labels. `y` is one-hot per row for classification or a
/// single real column for regression; `class_index` (classification only)
/// maps each class to its sample indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Matrix,
    pub class_index: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample flattened input length.
    pub fn sample_len(&self) -> usize {
        self.x.shape()[1..].iter().product()
    }

    pub fn gather_x(&self, idx: &[usize]) -> Tensor {
        let d = self.sample_len();
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        let mut out = Tensor::zeros(&shape);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        out
    }

    pub fn gather_y(&self, idx: &[usize]) -> Matrix {
        let m = self.y.cols();
        let mut out = Matrix::zeros(idx.len(), m);
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..m {
                out.set(r, c, self.y.get(i, c));
            }
        }
        out
    }

    /// Class id of sample `i` (argmax for one-hot rows, sign for +-1 labels).
    pub fn class_of(&self, i: usize) -> usize {
        if self.y.cols() == 1 {
            usize::from(self.y.get(i, 0) > 0.0)
        } else {
            let row = self.y.row(i);
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite labels"))
                .map(|(j, _)| j)
                .unwrap_or(0)
        }
    }

    /// Restricts to the first `n` samples (rebuilding the class index).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Splits into (first `n`, rest).
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// New dataset from the given sample indices (class index rebuilt when
    /// present).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let x = self.gather_x(idx);
        let y = self.gather_y(idx);
        let class_index = self.class_index.as_ref().map(|ci| {
            let mut rebuilt = vec![Vec::new(); ci.len()];
            for (new_i, &old_i) in idx.iter().enumerate() {
                rebuilt[self.class_of(old_i)].push(new_i);
            }
            rebuilt
        });
        Dataset { x, y, class_index }
    }
}

fn one_hot_labels(labels: &[u8]) -> Result<(Matrix, Vec<Vec<usize>>), DataError> {
    let n = labels.len();
    let mut y = Matrix::zeros(n, 10);
    let mut class_index = vec![Vec::new(); 10];
    for (i, &l) in labels.iter().enumerate() {
        if l > 9 {
            return Err(DataError::BadLabel { value: l });
        }
        y.set(i, l as usize, 1.0);
        class_index[l as usize].push(i);
    }
    Ok((y, class_index))
}

// --------------------------------------------------------------------------
// Swissroll cheesecake: two interleaved planar spirals with labels +-1.
// --------------------------------------------------------------------------

/// Class +1 points lie on (t cos t, t sin t), class -1 on the pi-rotation,
/// t uniform over [pi/2, turns * 2 pi], plus isotropic Gaussian noise.
pub fn swissroll(n_per_class: usize, turns: f64, noise_std: f64, rng: &mut Rng) -> Dataset {
    assert!(n_per_class >= 1);
    let n = 2 * n_per_class;
    let mut x = Tensor::zeros(&[n, 2]);
    let mut y = Matrix::zeros(n, 1);
    let t_lo = std::f64::consts::FRAC_PI_2;
    let t_hi = turns * 2.0 * std::f64::consts::PI;
    for i in 0..n {
        let positive = i < n_per_class;
        let t = rng.range(t_lo, t_hi);
        let (mut px, mut py) = (t * t.cos(), t * t.sin());
        if !positive {
            px = -px;
            py = -py;
        }
        px += noise_std * rng.next_normal();
        py += noise_std * rng.next_normal();
        x.data_mut()[2 * i] = px;
        x.data_mut()[2 * i + 1] = py;
        y.set(i, 0, if positive { 1.0 } else { -1.0 });
    }
    let class_index = vec![
        (n_per_class..n).collect(), // class 0: label -1
        (0..n_per_class).collect(), // class 1: label +1
    ];
    Dataset {
        x,
        y,
        class_index: Some(class_index),
    }
}

// --------------------------------------------------------------------------
// IDX image files (big-endian, magic 0x803 for images / 0x801 for labels).
// --------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DataError::TruncatedFile {
        path: path.display().to_string(),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label pair: pixels scaled to [0, 1], labels one-hot
/// over 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut img = std::io::BufReader::new(
        std::fs::File::open(images_path).map_err(|e| DataError::Io(e.to_string()))?,
    );
    let magic = read_u32_be(&mut img, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&mut img, images_path)? as usize;
    let rows = read_u32_be(&mut img, images_path)? as usize;
    let cols = read_u32_be(&mut img, images_path)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|_| DataError::TruncatedFile {
            path: images_path.display().to_string(),
        })?;

    let mut lab = std::io::BufReader::new(
        std::fs::File::open(labels_path).map_err(|e| DataError::Io(e.to_string()))?,
    );
    let magic = read_u32_be(&mut lab, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n_labels = read_u32_be(&mut lab, labels_path)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let mut labels = vec![0u8; n_labels];
    lab.read_exact(&mut labels)
        .map_err(|_| DataError::TruncatedFile {
            path: labels_path.display().to_string(),
        })?;

    let mut x = Tensor::zeros(&[n, rows, cols, 1]);
    for (o, &p) in x.data_mut().iter_mut().zip(&pixels) {
        *o = p as f64 / 255.0;
    }
    let (y, class_index) = one_hot_labels(&labels)?;
    Ok(Dataset {
        x,
        y,
        class_index: Some(class_index),
    })
}

/// Writes an image/label pair in IDX format (inverse of [`load_idx`]).
/// Pixel values are clamped to [0, 1] and quantized to bytes.
pub fn write_idx(
    images: &Tensor,
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let s = images.shape();
    assert_eq!(s.len(), 4, "images must be [n, h, w, 1]");
    assert_eq!(s[3], 1, "single-channel images only");
    let (n, rows, cols) = (s[0], s[1], s[2]);
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let mut img = std::io::BufWriter::new(
        std::fs::File::create(images_path).map_err(|e| DataError::Io(e.to_string()))?,
    );
    let write = |w: &mut dyn Write, bytes: &[u8]| -> Result<(), DataError> {
        w.write_all(bytes).map_err(|e| DataError::Io(e.to_string()))
    };
    write(&mut img, &IMAGES_MAGIC.to_be_bytes())?;
    write(&mut img, &(n as u32).to_be_bytes())?;
    write(&mut img, &(rows as u32).to_be_bytes())?;
    write(&mut img, &(cols as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write(&mut img, &bytes)?;
    drop(img);

    let mut lab = std::io::BufWriter::new(
        std::fs::File::create(labels_path).map_err(|e| DataError::Io(e.to_string()))?,
    );
    write(&mut lab, &LABELS_MAGIC.to_be_bytes())?;
    write(&mut lab, &(n as u32).to_be_bytes())?;
    write(&mut lab, labels)?;
    Ok(())
}

// --------------------------------------------------------------------------
// Affine augmentation.
// --------------------------------------------------------------------------

/// Per-image branch probabilities and affine jitter ranges.
#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub p_identity: f64,
    pub p_affine: f64,
    /// Max translation in pixels (each axis, uniform).
    pub max_translate: f64,
    /// Max rotation in degrees (uniform).
    pub max_rotate_deg: f64,
    /// Max shear coefficient (uniform).
    pub max_shear: f64,
}

impl AugmentPolicy {
    pub fn new(
        p_identity: f64,
        p_affine: f64,
        max_translate: f64,
        max_rotate_deg: f64,
        max_shear: f64,
    ) -> Result<AugmentPolicy, DataError> {
        if p_identity < 0.0 || p_affine < 0.0 || (p_identity + p_affine - 1.0).abs() > 1e-12 {
            return Err(DataError::InvalidPolicy(format!(
                "probabilities {p_identity} + {p_affine} must be nonnegative and sum to 1"
            )));
        }
        Ok(AugmentPolicy {
            p_identity,
            p_affine,
            max_translate,
            max_rotate_deg,
            max_shear,
        })
    }

    /// Half identity, half small affine; conventional digit-image ranges.
    pub fn default_affine() -> AugmentPolicy {
        AugmentPolicy::new(0.5, 0.5, 2.0, 10.0, 0.1).expect("valid constants")
    }
}

/// Per image: identity with `p_identity`, otherwise a random
/// translation+rotation+shear with bilinear resampling and zero fill.
pub fn augment(x: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "augment expects [n, h, w, 1] images");
    assert_eq!(s[3], 1, "single-channel images only");
    let (n, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    for img in 0..n {
        let src = &x.data()[img * h * w..(img + 1) * h * w];
        let dst = &mut out.data_mut()[img * h * w..(img + 1) * h * w];
        if rng.next_f64() < policy.p_identity {
            dst.copy_from_slice(src);
            continue;
        }
        let tx = rng.range(-policy.max_translate, policy.max_translate);
        let ty = rng.range(-policy.max_translate, policy.max_translate);
        let theta = rng.range(-policy.max_rotate_deg, policy.max_rotate_deg).to_radians();
        let shear = rng.range(-policy.max_shear, policy.max_shear);
        warp_affine(src, dst, h, w, theta, shear, tx, ty, 1.0);
    }
    out
}

/// Samples `dst` from `src` under the inverse of: rotate by theta and shear
/// about the center, scale, then translate by (tx, ty). Zero outside.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_affine(
    src: &[f64],
    dst: &mut [f64],
    h: usize,
    w: usize,
    theta: f64,
    shear: f64,
    tx: f64,
    ty: f64,
    scale: f64,
) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    // Forward map: p' = S R Sh (p - c) + c + t. Inverse applied per output
    // pixel: p = Sh^{-1} R^{-1} S^{-1} (p' - c - t) + c.
    let inv_scale = 1.0 / scale;
    for oy in 0..h {
        for ox in 0..w {
            let dx = (ox as f64 - cx - tx) * inv_scale;
            let dy = (oy as f64 - cy - ty) * inv_scale;
            // R^{-1}
            let rx = cos * dx + sin * dy;
            let ry = -sin * dx + cos * dy;
            // Sh^{-1} with Sh = [[1, s], [0, 1]] acting on (x, y)
            let sx = rx - shear * ry;
            let sy = ry;
            let ix = sx + cx;
            let iy = sy + cy;
            dst[oy * w + ox] = bilinear(src, h, w, iy, ix);
        }
    }
}

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                acc += wy * wx * src[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

// --------------------------------------------------------------------------
// Synthetic glyph images: a deterministic 10-class stand-in for handwritten
// digits, built from seven-segment strokes with affine jitter, clutter, and
// pixel noise. Useful for demos and desk-scale experiments when no IDX
// files are at hand.
// --------------------------------------------------------------------------

const GLYPH_SIZE: usize = 28;

// Seven-segment endpoints in canvas coordinates (x, y).
const SEG_ENDPOINTS: [((f64, f64), (f64, f64)); 7] = [
    ((9.0, 6.0), (19.0, 6.0)),   // A: top
    ((19.0, 6.0), (19.0, 14.0)), // B: top right
    ((19.0, 14.0), (19.0, 22.0)),// C: bottom right
    ((9.0, 22.0), (19.0, 22.0)), // D: bottom
    ((9.0, 14.0), (9.0, 22.0)),  // E: bottom left
    ((9.0, 6.0), (9.0, 14.0)),   // F: top left
    ((9.0, 14.0), (19.0, 14.0)), // G: middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn distance_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (vx, vy) = (bx - ax, by - ay);
    let (wx, wy) = (px - ax, py - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - (ax + t * vx), py - (ay + t * vy));
    (dx * dx + dy * dy).sqrt()
}

fn render_segments(canvas: &mut [f64], segments: &[((f64, f64), (f64, f64))], thickness: f64) {
    let aa = 0.9;
    for oy in 0..GLYPH_SIZE {
        for ox in 0..GLYPH_SIZE {
            let mut best = canvas[oy * GLYPH_SIZE + ox];
            for (a, b) in segments {
                let d = distance_to_segment(ox as f64, oy as f64, *a, *b);
                let v = ((thickness + aa - d) / aa).clamp(0.0, 1.0);
                if v > best {
                    best = v;
                }
            }
            canvas[oy * GLYPH_SIZE + ox] = best;
        }
    }
}

/// Deterministic 28x28 ten-class glyph images. Classes are balanced
/// (`class = i mod 10`).
///
/// Each sample renders its class's stroke set with independently jittered
/// endpoints, occasionally mutated by one segment, plus optional clutter
/// strokes, a random affine map, and pixel noise. The result is learnable
/// well below chance error yet carries irreducible ambiguity and enough
/// shape variability that desk-scale training sets leave a measurable
/// generalization gap.
pub fn synthetic_digits(n: usize, rng: &mut Rng) -> Dataset {
    let hw = GLYPH_SIZE * GLYPH_SIZE;
    let mut x = Tensor::zeros(&[n, GLYPH_SIZE, GLYPH_SIZE, 1]);
    let mut labels = Vec::with_capacity(n);
    let mut base = vec![0.0; hw];
    let mut warped = vec![0.0; hw];
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        base.iter_mut().for_each(|v| *v = 0.0);
        // Segment mutations blur class boundaries: a dropped or added stroke
        // can turn a glyph into a near-neighbor class while keeping the
        // original label, so some test samples are irreducibly ambiguous.
        let mut active: Vec<usize> = DIGIT_SEGMENTS[class].to_vec();
        let mutation = rng.next_f64();
        if mutation < 0.10 && active.len() > 2 {
            let drop = rng.below(active.len());
            active.remove(drop);
        } else if mutation < 0.15 {
            let missing: Vec<usize> = (0..7).filter(|s| !active.contains(s)).collect();
            if !missing.is_empty() {
                active.push(missing[rng.below(missing.len())]);
            }
        }
        // Independent per-endpoint jitter keeps the glyph recognizable while
        // making the shape manifold high-dimensional, so a few thousand
        // samples undersample it and memorized detail does not transfer.
        let segs: Vec<((f64, f64), (f64, f64))> = active
            .iter()
            .map(|&s| {
                let ((ax, ay), (bx, by)) = SEG_ENDPOINTS[s];
                (
                    (ax + 1.5 * rng.next_normal(), ay + 1.5 * rng.next_normal()),
                    (bx + 1.5 * rng.next_normal(), by + 1.5 * rng.next_normal()),
                )
            })
            .collect();
        render_segments(&mut base, &segs, rng.range(1.0, 1.2));
        // Clutter: a faint random stroke on half the samples.
        if rng.next_f64() < 0.5 {
            let ax = rng.range(3.0, 25.0);
            let ay = rng.range(3.0, 25.0);
            let bx = (ax + rng.range(-6.0, 6.0)).clamp(1.0, 26.0);
            let by = (ay + rng.range(-6.0, 6.0)).clamp(1.0, 26.0);
            let level = rng.range(0.25, 0.55);
            let mut clutter = vec![0.0; hw];
            render_segments(&mut clutter, &[((ax, ay), (bx, by))], 0.8);
            for (b, c) in base.iter_mut().zip(&clutter) {
                *b = (*b + level * c).min(1.0);
            }
        }
        let theta = rng.range(-12.0, 12.0).to_radians();
        let shear = rng.range(-0.12, 0.12);
        let tx = rng.range(-2.5, 2.5);
        let ty = rng.range(-2.5, 2.5);
        let scale = rng.range(0.85, 1.15);
        warp_affine(
            &base,
            &mut warped,
            GLYPH_SIZE,
            GLYPH_SIZE,
            theta,
            shear,
            tx,
            ty,
            scale,
        );
        let gain = rng.range(0.7, 1.0);
        let dst = &mut x.data_mut()[i * hw..(i + 1) * hw];
        for (o, &v) in dst.iter_mut().zip(warped.iter()) {
            let noisy = gain * v + 0.08 * rng.next_normal();
            *o = noisy.clamp(0.0, 1.0);
        }
    }
    let (y, class_index) = one_hot_labels(&labels).expect("labels are 0..=9");
    Dataset {
        x,
        y,
        class_index: Some(class_index),
    }
}
