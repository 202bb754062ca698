//! Desk-scale sample quality metrics: a Fréchet distance over features of a
//! fixed random extractor, the Inception-Score formula over an attribute
//! oracle's posteriors, and an attribute-match alignment score.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{parse_caption, render_scene, SceneSpec, SIZE_RADII};
use crate::tensor::{ImageShape, ImageTensor, Matrix};

/// Eigenvalues below `-PSD_TOL` reject a covariance as not positive semidefinite.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub extractor_seed: u64,
    pub feature_dim: usize,
    /// Number of generated samples per evaluation.
    pub n_gen: usize,
    /// Evaluate the moving-average parameters instead of the raw iterate.
    pub use_ema: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            extractor_seed: 7,
            feature_dim: 16,
            n_gen: 256,
            use_ema: true,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("metrics.feature_dim must be at least 1".into()));
        }
        if self.n_gen < 2 {
            return Err(Error::Config("metrics.n_gen must be at least 2".into()));
        }
        Ok(())
    }
}

/// `tanh(Wᵀx)` with `W` drawn once from `N(0, 1/len)` under a fixed seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub shape: ImageShape,
    projection: Matrix,
}

impl FeatureExtractor {
    pub fn new(seed: u64, shape: ImageShape, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / libm::sqrt(shape.len() as f64);
        Self {
            seed,
            shape,
            projection: Matrix::randn(shape.len(), dim, std, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.cols
    }

    pub fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.shape != self.shape {
            return Err(Error::Shape(format!(
                "extractor expects {:?}, got {:?}",
                self.shape, img.shape
            )));
        }
        let mut out = vec![0.0; self.dim()];
        for (i, &x) in img.data.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.projection.row(i)) {
                *o += x * w;
            }
        }
        out.iter_mut().for_each(|v| *v = libm::tanh(*v));
        Ok(out)
    }
}

/// Gaussian fit of a feature cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Unbiased covariance, exactly symmetric.
    pub cov: Matrix,
    pub n: usize,
}

/// Mean and unbiased covariance of feature rows, two-pass.
pub fn stats_from_features(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("feature statistics need at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature rows of unequal length".into()));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov.data[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] / (n - 1) as f64;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    Ok(FeatureStats { mean, cov, n })
}

pub fn feature_stats(images: &[ImageTensor], extractor: &FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let features = images
        .iter()
        .map(|img| extractor.features(img))
        .collect::<Result<Vec<_>>>()?;
    stats_from_features(&features)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and a matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!("eigen-decomposition of a {}x{} matrix", a.rows, a.cols)));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("matrix to decompose".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.data[i * n + i] = 1.0;
    }
    let scale = libm::sqrt(m.frobenius_sq());
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.data[p * n + q] * m.data[p * n + q];
            }
        }
        if libm::sqrt(off) <= 1e-17 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.data[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.data[q * n + q] - m.data[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let s = if theta >= 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + libm::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (m.data[k * n + p], m.data[k * n + q]);
                    m.data[k * n + p] = c * kp - s * kq;
                    m.data[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m.data[p * n + k], m.data[q * n + k]);
                    m.data[p * n + k] = c * pk - s * qk;
                    m.data[q * n + k] = s * pk + c * qk;
                }
                for k in 0..n {
                    let (kp, kq) = (v.data[k * n + p], v.data[k * n + q]);
                    v.data[k * n + p] = c * kp - s * kq;
                    v.data[k * n + q] = s * kp + c * kq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m.data[i * n + i]).collect();
    Ok((values, v))
}

fn check_psd(values: &[f64], what: &str) -> Result<()> {
    match values.iter().find(|&&l| l < -PSD_TOL) {
        Some(l) => Err(Error::InvalidInput(format!("{what} is not positive semidefinite (eigenvalue {l})"))),
        None => Ok(()),
    }
}

/// Principal square root of a PSD matrix; tiny negative eigenvalues are clipped.
pub fn sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let (values, vecs) = symmetric_eigen(a)?;
    check_psd(&values, "matrix")?;
    let n = a.rows;
    let roots: Vec<f64> = values.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] = (0..n)
                .map(|k| vecs.data[i * n + k] * roots[k] * vecs.data[j * n + k])
                .sum();
        }
    }
    Ok(out)
}

fn trace(m: &Matrix) -> f64 {
    (0..m.rows).map(|i| m.data[i * m.cols + i]).sum()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, where the trace of the
/// cross term is taken through the symmetric `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::Shape("feature statistics of different dimension".into()));
    }
    let (vb, _) = symmetric_eigen(&b.cov)?;
    check_psd(&vb, "second covariance")?;
    let root_a = sqrt_psd(&a.cov)?;
    let inner = crate::tensor::matmul(&crate::tensor::matmul(&root_a, &b.cov), &root_a);
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym.data[i * d + j] = 0.5 * (inner.data[i * d + j] + inner.data[j * d + i]);
        }
    }
    let (vals, _) = symmetric_eigen(&sym)?;
    check_psd(&vals, "covariance product")?;
    let cross: f64 = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}

/// `exp(mean_i KL(p(y|x_i) ‖ p̄(y)))` over rows of class probabilities.
pub fn inception_score(probs: &Matrix) -> Result<f64> {
    let (n, c) = probs.shape();
    if n == 0 || c == 0 {
        return Err(Error::InvalidInput("empty probability matrix".into()));
    }
    for i in 0..n {
        let row = probs.row(i);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(format!("row {i} has a negative or non-finite probability")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("row {i} sums to {s}")));
        }
    }
    let mut col_sums = vec![0.0; c];
    for i in 0..n {
        for (m, p) in col_sums.iter_mut().zip(probs.row(i)) {
            *m += p;
        }
    }
    // exp(KL_i) = Π_y (p/p̄)^p, formed without a log so that rows sharing the
    // same ratio (one-hot rows over a uniform marginal) give it exactly
    let ratios: Vec<f64> = (0..n)
        .map(|i| {
            probs
                .row(i)
                .iter()
                .zip(&col_sums)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &s)| libm::pow(p * n as f64 / s, p))
                .product()
        })
        .collect();
    let anchor = ratios[0];
    let spread: f64 = ratios.iter().map(|r| libm::log(r / anchor)).sum::<f64>() / n as f64;
    Ok(anchor * libm::exp(spread))
}

/// Nearest-prototype classifier over every rendered scene at every size.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeOracle {
    prototypes: Vec<(SceneSpec, ImageTensor)>,
    classes: Vec<SceneSpec>,
}

impl AttributeOracle {
    pub fn new(height: usize, width: usize) -> Self {
        let classes = SceneSpec::all_combinations();
        let mut prototypes = Vec::with_capacity(classes.len() * SIZE_RADII.len());
        for spec in &classes {
            for size in 0..SIZE_RADII.len() {
                let s = SceneSpec { size, ..*spec };
                prototypes.push((s, render_scene(&s, height, width)));
            }
        }
        Self { prototypes, classes }
    }

    /// Attribute classes, size ignored, in [`SceneSpec::all_combinations`] order.
    pub fn classes(&self) -> &[SceneSpec] {
        &self.classes
    }

    fn distances(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let shape = self.prototypes[0].1.shape;
        if img.shape != shape {
            return Err(Error::Shape(format!("oracle expects {:?}, got {:?}", shape, img.shape)));
        }
        Ok(self
            .prototypes
            .iter()
            .map(|(_, p)| libm::sqrt(p.sq_dist(img)))
            .collect())
    }

    /// Spec of the nearest prototype; ties go to the earlier prototype.
    pub fn classify(&self, img: &ImageTensor) -> Result<SceneSpec> {
        let d = self.distances(img)?;
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = i;
            }
        }
        Ok(self.prototypes[best].0)
    }

    /// Softmax over negative prototype distances, summed over sizes into
    /// one probability per attribute class.
    pub fn posterior(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let d = self.distances(img)?;
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|&v| libm::exp(lo - v)).collect();
        let z: f64 = w.iter().sum();
        let per = SIZE_RADII.len();
        Ok(w.chunks(per).map(|c| c.iter().sum::<f64>() / z).collect())
    }

    /// Fraction of the caption's three attributes matched by the classification.
    pub fn match_rate(&self, img: &ImageTensor, caption: &str) -> Result<f64> {
        let want = parse_caption(caption)?;
        let got = self.classify(img)?;
        let hits = [
            got.shape == want.shape,
            got.color == want.color,
            got.position == want.position,
        ]
        .iter()
        .filter(|&&h| h)
        .count();
        Ok(hits as f64 / 3.0)
    }
}

/// Mean attribute-match rate of images against their captions.
pub fn alignment_score<S: AsRef<str>>(images: &[ImageTensor], captions: &[S], oracle: &AttributeOracle) -> Result<f64> {
    if images.len() != captions.len() {
        return Err(Error::Shape(format!(
            "{} images for {} captions",
            images.len(),
            captions.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::InvalidInput("alignment of an empty set".into()));
    }
    let mut total = 0.0;
    for (img, cap) in images.iter().zip(captions) {
        total += oracle.match_rate(img, cap.as_ref())?;
    }
    Ok(total / images.len() as f64)
}

pub fn oracle_probabilities(images: &[ImageTensor], oracle: &AttributeOracle) -> Result<Matrix> {
    let c = oracle.classes().len();
    let mut out = Matrix::zeros(images.len(), c);
    for (i, img) in images.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&oracle.posterior(img)?);
    }
    Ok(out)
}

/// The three metrics of one generated set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub fid: f64,
    pub is: f64,
    pub alignment: f64,
}

pub fn score_samples<S: AsRef<str>>(
    generated: &[ImageTensor],
    captions: &[S],
    real: &FeatureStats,
    extractor: &FeatureExtractor,
    oracle: &AttributeOracle,
) -> Result<Scores> {
    let gen_stats = feature_stats(generated, extractor)?;
    Ok(Scores {
        fid: frechet_distance(real, &gen_stats)?,
        is: inception_score(&oracle_probabilities(generated, oracle)?)?,
        alignment: alignment_score(generated, captions, oracle)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub mode: String,
    pub fid: f64,
    pub is: f64,
    pub alignment: f64,
    pub n_samples: usize,
    pub extractor_seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "run_id,mode,fid,is,alignment,n_samples,extractor_seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id, self.mode, self.fid, self.is, self.alignment, self.n_samples, self.extractor_seed
        )
    }
}
