//! Fixation-log ingestion and gaze-map production.
//!
//! Raw eye-tracker samples (250 Hz) are bucketed onto video frames (30 fps),
//! pooled across subjects, rendered into per-frame heatmaps by placing a
//! truncated Gaussian window at every fixation, and tokenized for the causal
//! selection blocks by a frozen patch convolution (a position-embedding-only
//! encoder, which avoids dead activations on sparse maps).

use std::io::BufRead;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::rng::{randn, rng_from};

#[derive(Clone, Debug, PartialEq)]
pub struct FixationRecord {
    pub timestamp_ms: u64,
    pub x: u32,
    pub y: u32,
    pub subject_id: String,
}

/// Raw fixation samples plus the source video resolution.
#[derive(Clone, Debug)]
pub struct FixationLog {
    pub records: Vec<FixationRecord>,
    pub width: u32,
    pub height: u32,
}

impl FixationLog {
    pub fn new(records: Vec<FixationRecord>, width: u32, height: u32) -> Result<Self> {
        let log = FixationLog { records, width, height };
        log.validate()?;
        Ok(log)
    }

    fn validate(&self) -> Result<()> {
        let mut last_ts: std::collections::BTreeMap<&str, u64> = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            if r.x >= self.width || r.y >= self.height {
                return Err(Error::contract(format!(
                    "fixation {i}: point ({}, {}) outside {}x{}",
                    r.x, r.y, self.width, self.height
                )));
            }
            if let Some(&prev) = last_ts.get(r.subject_id.as_str()) {
                if r.timestamp_ms < prev {
                    return Err(Error::contract(format!(
                        "fixation {i}: timestamps for subject {} not nondecreasing",
                        r.subject_id
                    )));
                }
            }
            last_ts.insert(r.subject_id.as_str(), r.timestamp_ms);
        }
        Ok(())
    }

    /// Parse the `timestamp_ms,x,y,subject_id` CSV format.
    pub fn load(path: &Path, width: u32, height: u32) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::contract("empty fixation log"))??;
        if header.trim() != "timestamp_ms,x,y,subject_id" {
            return Err(Error::contract(format!("unexpected fixation header: {header}")));
        }
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::contract(format!("fixation line {}: expected 4 fields", ln + 2)));
            }
            let parse = |s: &str, what: &str| {
                s.trim().parse::<u64>().map_err(|_| {
                    Error::contract(format!("fixation line {}: bad {what} '{s}'", ln + 2))
                })
            };
            records.push(FixationRecord {
                timestamp_ms: parse(parts[0], "timestamp")?,
                x: parse(parts[1], "x")? as u32,
                y: parse(parts[2], "y")? as u32,
                subject_id: parts[3].trim().to_string(),
            });
        }
        FixationLog::new(records, width, height)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("timestamp_ms,x,y,subject_id\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.timestamp_ms, r.x, r.y, r.subject_id));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Per-frame pooled fixation points plus the count of samples falling past
/// the clip duration.
#[derive(Clone, Debug)]
pub struct FrameFixations {
    pub frames: Vec<Vec<(u32, u32)>>,
    pub dropped: usize,
}

impl FrameFixations {
    pub fn total_assigned(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }
}

/// Bucket samples onto frames: sample at t lands on `floor(t * fps / 1000)`,
/// pooled over all subjects. Samples past the last frame are dropped and
/// counted rather than erroring.
pub fn accumulate_fixations(log: &FixationLog, fps: u32, frame_count: usize) -> Result<FrameFixations> {
    if fps == 0 {
        return Err(Error::contract("fps must be positive"));
    }
    let mut frames = vec![Vec::new(); frame_count];
    let mut dropped = 0usize;
    for r in &log.records {
        let f = (r.timestamp_ms * fps as u64 / 1000) as usize;
        if f < frame_count {
            frames[f].push((r.x, r.y));
        } else {
            dropped += 1;
        }
    }
    Ok(FrameFixations { frames, dropped })
}

/// Truncated Gaussian window used to splat fixation points.
///
/// An even requested size is widened by one so the window has a center
/// pixel; sigma defaults to size/6 so +-3 sigma spans the window.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
    pub weights: Array2<f64>,
}

impl GaussianKernel {
    pub fn new(requested_size: usize) -> Self {
        let size = if requested_size % 2 == 0 { requested_size + 1 } else { requested_size };
        let sigma = requested_size as f64 / 6.0;
        Self::with_sigma(size, sigma)
    }

    pub fn with_sigma(size: usize, sigma: f64) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        let half = (size / 2) as isize;
        let mut weights = Array2::zeros((size, size));
        for dy in -half..=half {
            for dx in -half..=half {
                let r2 = (dy * dy + dx * dx) as f64;
                weights[[(dy + half) as usize, (dx + half) as usize]] =
                    (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
        GaussianKernel { size, sigma, weights }
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.weights.sum()
    }
}

/// Splat every fixation's Gaussian window into an accumulation image.
/// Linear in the point set: `render(A ∪ B) == render(A) + render(B)`.
pub fn render_gaze_accumulation(
    points: &[(u32, u32)],
    height: usize,
    width: usize,
    kernel: &GaussianKernel,
) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((height, width));
    let half = (kernel.size / 2) as isize;
    for &(px, py) in points {
        let (px, py) = (px as isize, py as isize);
        for dy in -half..=half {
            let y = py + dy;
            if y < 0 || y >= height as isize {
                continue;
            }
            for dx in -half..=half {
                let x = px + dx;
                if x < 0 || x >= width as isize {
                    continue;
                }
                acc[[y as usize, x as usize]] +=
                    kernel.weights[[(dy + half) as usize, (dx + half) as usize]];
            }
        }
    }
    acc
}

/// One frame's gaze map: Gaussian splat, max-normalized to [0, 1].
/// No fixations yield an all-zero map.
pub fn render_gaze_map(
    points: &[(u32, u32)],
    height: usize,
    width: usize,
    kernel: &GaussianKernel,
) -> Array2<f64> {
    let mut acc = render_gaze_accumulation(points, height, width, kernel);
    let max = acc.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        acc.mapv_inplace(|v| v / max);
    }
    acc
}

/// Per-frame gaze maps at video rate, entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GazeMapSequence {
    pub maps: Array3<f64>, // [F, H, W]
}

impl GazeMapSequence {
    pub fn from_frames(frames: &FrameFixations, height: usize, width: usize, kernel: &GaussianKernel) -> Self {
        let f = frames.frames.len();
        let mut maps = Array3::zeros((f, height, width));
        for (i, pts) in frames.frames.iter().enumerate() {
            maps.index_axis_mut(ndarray::Axis(0), i)
                .assign(&render_gaze_map(pts, height, width, kernel));
        }
        GazeMapSequence { maps }
    }

    pub fn frame_count(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn reversed(&self) -> Self {
        let f = self.frame_count();
        let mut maps = self.maps.clone();
        for i in 0..f {
            maps.index_axis_mut(ndarray::Axis(0), i)
                .assign(&self.maps.index_axis(ndarray::Axis(0), f - 1 - i));
        }
        GazeMapSequence { maps }
    }

    /// Write one 8-bit single-channel image per frame: `gaze_{frame:05}.png`,
    /// linear value mapping.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (f, h, w) = self.maps.dim();
        for i in 0..f {
            let frame = self.maps.index_axis(ndarray::Axis(0), i);
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([(frame[[y, x]] * 255.0).round() as u8]));
                }
            }
            img.save(dir.join(format!("gaze_{i:05}.png")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, frame_count: usize) -> Result<Self> {
        let mut maps: Option<Array3<f64>> = None;
        for i in 0..frame_count {
            let path = dir.join(format!("gaze_{i:05}.png"));
            let img = image::open(&path)
                .map_err(|e| Error::Manifest(format!("gaze frame {}: {e}", path.display())))?
                .into_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let maps = maps.get_or_insert_with(|| Array3::zeros((frame_count, h, w)));
            for y in 0..h {
                for x in 0..w {
                    maps[[i, y, x]] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
                }
            }
        }
        Ok(GazeMapSequence {
            maps: maps.ok_or_else(|| Error::Manifest("gaze directory holds no frames".into()))?,
        })
    }
}

/// Frozen patch tokenizer: one non-overlapping convolution (stride == kernel
/// == patch size) with seeded weights — the position-embedding layer of the
/// frozen encoder, with no deeper layers applied.
#[derive(Clone, Debug)]
pub struct GazeTokenizer {
    pub patch: usize,
    pub channels: usize,
    weights: ArrayD<f64>, // [C_G, patch*patch]
    bias: ArrayD<f64>,    // [C_G]
}

impl GazeTokenizer {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x6a5e]);
        let weights = randn(&mut rng, &[channels, patch * patch])
            .mapv(|v| v / (patch as f64));
        let bias = randn(&mut rng, &[channels]).mapv(|v| 0.1 * v);
        GazeTokenizer { patch, channels, weights, bias }
    }

    pub fn token_count(&self, height: usize, width: usize) -> Result<usize> {
        if height % self.patch != 0 || width % self.patch != 0 {
            return Err(Error::config(format!(
                "gaze map {height}x{width} not divisible by patch {}",
                self.patch
            )));
        }
        Ok((height / self.patch) * (width / self.patch))
    }

    pub fn bias_token(&self) -> Vec<f64> {
        self.bias.iter().cloned().collect()
    }

    /// `maps: [F, H, W] -> tokens [n_G, F, C_G]` (batch folding handled by the caller).
    pub fn tokenize(&self, maps: &Array3<f64>) -> Result<ArrayD<f64>> {
        let (f, h, w) = maps.dim();
        let n_tokens = self.token_count(h, w)?;
        let (gh, gw) = (h / self.patch, w / self.patch);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n_tokens, f, self.channels]));
        for fi in 0..f {
            for ty in 0..gh {
                for tx in 0..gw {
                    let t = ty * gw + tx;
                    for c in 0..self.channels {
                        let mut acc = self.bias[[c]];
                        for py in 0..self.patch {
                            for px in 0..self.patch {
                                acc += self.weights[[c, py * self.patch + px]]
                                    * maps[[fi, ty * self.patch + py, tx * self.patch + px]];
                            }
                        }
                        out[[t, fi, c]] = acc;
                    }
                }
            }
        }
        Ok(out)
    }
}
