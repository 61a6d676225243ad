//! Evaluation metrics: prompt/frame alignment score, temporal consistency,
//! Fréchet distance between clip-embedding Gaussians, and the
//! causal-editing affordance ratio (share of checks where the detected
//! entity overlaps the gazed region).

use ndarray::{ArrayD, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::scenario::{BoundingBox, EntityClass};

/// Frozen embedder shared between conditioning and metrics.
pub trait Embedder {
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn embed_frame(&self, frame: ArrayView3<f64>) -> Vec<f64>;
}

impl Embedder for crate::encoder::ToyEncoder {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        crate::encoder::ToyEncoder::embed_text(self, text)
    }
    fn embed_frame(&self, frame: ArrayView3<f64>) -> Vec<f64> {
        crate::encoder::ToyEncoder::embed_frame(self, frame)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("zero-norm embedding in cosine".into()));
    }
    Ok(num / (na * nb))
}

fn frame_view(clip: &ArrayD<f64>, i: usize) -> ArrayView3<'_, f64> {
    clip.index_axis(ndarray::Axis(0), i)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("clip frames are [F, C, H, W]")
}

/// 100 x cosine between each frame's embedding and the prompt embedding,
/// averaged over frames.
pub fn clip_score(clip: &ArrayD<f64>, prompt: &str, emb: &dyn Embedder) -> Result<f64> {
    let f = clip.shape()[0];
    let text = emb.embed_text(prompt);
    let mut acc = 0.0;
    for i in 0..f {
        let fe = emb.embed_frame(frame_view(clip, i));
        acc += cosine(&fe, &text)?;
    }
    Ok(100.0 * acc / f as f64)
}

/// Mean cosine similarity between consecutive frame embeddings.
pub fn temp_c(clip: &ArrayD<f64>, emb: &dyn Embedder) -> Result<f64> {
    let f = clip.shape()[0];
    if f < 2 {
        return Err(Error::contract("temporal consistency needs at least 2 frames"));
    }
    let embs: Vec<Vec<f64>> = (0..f).map(|i| emb.embed_frame(frame_view(clip, i))).collect();
    let mut acc = 0.0;
    for w in embs.windows(2) {
        acc += cosine(&w[0], &w[1])?;
    }
    Ok(acc / (f - 1) as f64)
}

/// Mean clip embedding: frame embeddings averaged over the clip.
pub fn clip_embedding(clip: &ArrayD<f64>, emb: &dyn Embedder) -> Vec<f64> {
    let f = clip.shape()[0];
    let mut acc: Vec<f64> = emb.embed_frame(frame_view(clip, 0));
    for i in 1..f {
        for (a, v) in acc.iter_mut().zip(emb.embed_frame(frame_view(clip, i))) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= f as f64;
    }
    acc
}

/// Gaussian moments of a set of embedding vectors: mean and (unbiased)
/// covariance with a small diagonal regularizer.
pub fn gaussian_moments(
    vectors: &[Vec<f64>],
    regularizer: f64,
) -> Result<(nalgebra::DVector<f64>, nalgebra::DMatrix<f64>)> {
    if vectors.len() < 2 {
        return Err(Error::contract("moment estimation needs at least 2 samples"));
    }
    let n = vectors.len();
    let d = vectors[0].len();
    let mut mean = nalgebra::DVector::<f64>::zeros(d);
    for v in vectors {
        for i in 0..d {
            mean[i] += v[i];
        }
    }
    mean /= n as f64;
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for v in vectors {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += regularizer;
    }
    Ok((mean, cov))
}

/// Principal square root of a symmetric PSD matrix; eigenvalues below
/// `-tol` are a numeric error, small negatives clamp to zero.
fn sqrtm_psd(m: &nalgebra::DMatrix<f64>, what: &str) -> Result<nalgebra::DMatrix<f64>> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let tol = 1e-9 * (1.0 + sym.eigenvalues.amax());
    let mut vals = sym.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::Numeric(format!(
                "{what}: eigenvalue {v} below zero (min {:.3e}, max {:.3e})",
                sym.eigenvalues.min(),
                sym.eigenvalues.max()
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = nalgebra::DMatrix::from_diagonal(&vals);
    Ok(&sym.eigenvectors * d * sym.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, computed through
/// the symmetric product `sqrt(S_a) S_b sqrt(S_a)`.
pub fn frechet_from_moments(
    mu_a: &nalgebra::DVector<f64>,
    cov_a: &nalgebra::DMatrix<f64>,
    mu_b: &nalgebra::DVector<f64>,
    cov_b: &nalgebra::DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::contract("moment dimensions disagree"));
    }
    let diff = mu_a - mu_b;
    let d2 = diff.dot(&diff);
    let root_a = sqrtm_psd(cov_a, "first covariance")?;
    let inner = &root_a * cov_b * &root_a;
    // symmetrize against round-off before the second root
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner, "cross covariance")?;
    let fd = d2 + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

/// Fréchet distance between the clip-embedding Gaussians of two sets.
pub fn frechet_distance(
    set_a: &[ArrayD<f64>],
    set_b: &[ArrayD<f64>],
    emb: &dyn Embedder,
    regularizer: f64,
) -> Result<f64> {
    let ea: Vec<Vec<f64>> = set_a.iter().map(|c| clip_embedding(c, emb)).collect();
    let eb: Vec<Vec<f64>> = set_b.iter().map(|c| clip_embedding(c, emb)).collect();
    let (mu_a, cov_a) = gaussian_moments(&ea, regularizer)?;
    let (mu_b, cov_b) = gaussian_moments(&eb, regularizer)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ---- gazed regions and affordance ------------------------------------------------

/// Tight bounding box of pixels at or above `threshold_frac` of the map's
/// maximum. `None` marks an empty region (scores IOU = 0 in checks).
pub fn gazed_region(map: ArrayView2<f64>, threshold_frac: f64) -> Option<BoundingBox> {
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return None;
    }
    let thr = threshold_frac * max;
    let (h, w) = map.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if map[[y, x]] >= thr {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        return None;
    }
    Some(BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

/// Gazed region pooled over a clip: region of the max-over-frames map.
pub fn pooled_gazed_region(maps: &ndarray::Array3<f64>, threshold_frac: f64) -> Option<BoundingBox> {
    let (f, h, w) = maps.dim();
    let mut pooled = ndarray::Array2::<f64>::zeros((h, w));
    for i in 0..f {
        ndarray::Zip::from(&mut pooled)
            .and(&maps.index_axis(ndarray::Axis(0), i))
            .for_each(|p, &v| *p = p.max(v));
    }
    gazed_region(pooled.view(), threshold_frac)
}

/// Affordance: percentage of checks whose detected box overlaps the gazed
/// region (IOU > 0). Absent boxes on either side score zero overlap.
pub fn afd(
    detections: &[Option<BoundingBox>],
    gaze_regions: &[Option<BoundingBox>],
) -> Result<f64> {
    if detections.is_empty() {
        return Err(Error::contract("affordance needs at least one check"));
    }
    if detections.len() != gaze_regions.len() {
        return Err(Error::contract("affordance check lists must pair up"));
    }
    let hits = detections
        .iter()
        .zip(gaze_regions)
        .filter(|(d, g)| match (d, g) {
            (Some(d), Some(g)) => d.iou(g) > 0.0,
            _ => false,
        })
        .count();
    Ok(100.0 * hits as f64 / detections.len() as f64)
}

// ---- detection oracle --------------------------------------------------------------

/// Pluggable text-conditioned detector: per-frame boxes for the entity named
/// by `entity_word`, absent when the entity is not visible.
pub trait Detector {
    fn detect(&self, frames: &ArrayD<f64>, entity_word: &str) -> Vec<Option<BoundingBox>>;
}

/// Desk-scale detector: class-template color matching. A frame detects the
/// class when enough pixels fall within the color tolerance; the box is the
/// tight hull of matching pixels.
pub struct ColorTemplateDetector {
    /// Euclidean RGB distance bound in [-1, 1] space.
    pub tolerance: f64,
    pub min_pixels: usize,
}

impl Default for ColorTemplateDetector {
    fn default() -> Self {
        ColorTemplateDetector { tolerance: 0.35, min_pixels: 3 }
    }
}

impl Detector for ColorTemplateDetector {
    fn detect(&self, frames: &ArrayD<f64>, entity_word: &str) -> Vec<Option<BoundingBox>> {
        let Some(class) = EntityClass::from_word(entity_word) else {
            return vec![None; frames.shape()[0]];
        };
        let col = class.color();
        let target = [
            col[0] as f64 / 255.0 * 2.0 - 1.0,
            col[1] as f64 / 255.0 * 2.0 - 1.0,
            col[2] as f64 / 255.0 * 2.0 - 1.0,
        ];
        let (f, _, h, w) = (
            frames.shape()[0],
            frames.shape()[1],
            frames.shape()[2],
            frames.shape()[3],
        );
        (0..f)
            .map(|i| {
                let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
                let mut count = 0usize;
                for y in 0..h {
                    for x in 0..w {
                        let d2: f64 = (0..3)
                            .map(|c| {
                                let d = frames[[i, c, y, x]] - target[c];
                                d * d
                            })
                            .sum();
                        if d2.sqrt() <= self.tolerance {
                            count += 1;
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                if count >= self.min_pixels {
                    Some(BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Union hull over per-frame detections (pooled per clip).
pub fn pooled_detection(per_frame: &[Option<BoundingBox>]) -> Option<BoundingBox> {
    let mut acc: Option<BoundingBox> = None;
    for b in per_frame.iter().flatten() {
        acc = Some(match acc {
            Some(a) => a.union_hull(b),
            None => *b,
        });
    }
    acc
}

// ---- report ---------------------------------------------------------------------------

/// Ordered key/value report; serialization is byte-stable for a given
/// content.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, String)>,
}

impl MetricReport {
    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_metric(&mut self, key: &str, value: f64) {
        self.entries.push((key.to_string(), format!("{value:.6}")));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# gazediff metric report\n");
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
