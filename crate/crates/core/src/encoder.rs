//! Frozen deterministic embedders standing in for the pretrained contrastive
//! encoder: hash-bucketed word embeddings with positional encoding on the
//! text side, a seeded patch projection on the vision side, and a metric
//! embedding that maps rendered entity evidence onto the same word-vector
//! space so prompt/frame cosine reflects entity presence.
//!
//! Nothing here is trainable; the conditioning contract is that these
//! weights never move between stages.

use ndarray::{Array1, Array2, ArrayD, ArrayView3, IxDyn};

use crate::rng::{randn, rng_from};
use crate::scenario::EntityClass;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Width of text token embeddings (also the metric embedding width).
    pub text_dim: usize,
    /// Prompts are padded / truncated to this many tokens for conditioning.
    pub max_text_len: usize,
    /// Hash bucket count for word vectors.
    pub buckets: u64,
    /// Vision token channels C_V (the causal blocks require C_V == text_dim).
    pub vision_dim: usize,
    /// Vision token count n_V per frame; must be a perfect square.
    pub vision_tokens: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            text_dim: 16,
            max_text_len: 16,
            buckets: 4096,
            vision_dim: 16,
            vision_tokens: 64,
            seed: 0x7f3a_1c59,
        }
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub cfg: EncoderConfig,
}

impl ToyEncoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        assert!(
            (cfg.vision_tokens as f64).sqrt().fract() == 0.0,
            "vision_tokens must be a perfect square"
        );
        ToyEncoder { cfg }
    }

    pub fn grid_side(&self) -> usize {
        (self.cfg.vision_tokens as f64).sqrt() as usize
    }

    /// Deterministic unit-scale vector for a word, via its hash bucket.
    pub fn word_vec(&self, word: &str) -> Array1<f64> {
        let bucket = fnv1a64(&word.to_lowercase()) % self.cfg.buckets;
        let mut rng = rng_from(self.cfg.seed, &[0x77, bucket]);
        let v = randn(&mut rng, &[self.cfg.text_dim]);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        Array1::from_iter(v.iter().map(|x| x / norm))
    }

    /// Token sequence for conditioning: word vectors plus sinusoidal
    /// positions, padded with zero rows to `len`.
    pub fn encode_text_with_len(&self, text: &str, len: usize) -> Array2<f64> {
        let words = tokenize_words(text);
        let d = self.cfg.text_dim;
        let mut out = Array2::<f64>::zeros((len, d));
        for (i, w) in words.iter().take(len).enumerate() {
            let wv = self.word_vec(w);
            for j in 0..d {
                let pos = if j % 2 == 0 {
                    (i as f64 / (10000f64).powf(j as f64 / d as f64)).sin()
                } else {
                    (i as f64 / (10000f64).powf((j - 1) as f64 / d as f64)).cos()
                };
                out[[i, j]] = wv[j] + 0.1 * pos;
            }
        }
        out
    }

    pub fn encode_text(&self, text: &str) -> Array2<f64> {
        self.encode_text_with_len(text, self.cfg.max_text_len)
    }

    /// Pooled prompt embedding for metrics: plain mean of word vectors (no
    /// positional term, so word order does not perturb alignment scores).
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let words = tokenize_words(text);
        let mut acc = vec![0.0f64; self.cfg.text_dim];
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            let wv = self.word_vec(w);
            for (a, b) in acc.iter_mut().zip(wv.iter()) {
                *a += b;
            }
        }
        for a in acc.iter_mut() {
            *a /= words.len() as f64;
        }
        acc
    }

    /// Frozen vision tokens for the gated fusion path:
    /// `frames [F, C, H, W] -> z_v [n_V, F, C_V]` (patch projection + learned-free
    /// position embedding).
    pub fn encode_frames(&self, frames: &ArrayD<f64>) -> ArrayD<f64> {
        let (f, c, h, w) = (
            frames.shape()[0],
            frames.shape()[1],
            frames.shape()[2],
            frames.shape()[3],
        );
        let side = self.grid_side();
        assert!(
            h % side == 0 && w % side == 0,
            "frame {h}x{w} not divisible by token grid {side}"
        );
        let (ph, pw) = (h / side, w / side);
        let fan_in = c * ph * pw;
        let mut rng = rng_from(self.cfg.seed, &[0x55]);
        let proj = randn(&mut rng, &[self.cfg.vision_dim, fan_in]).mapv(|v| v / (fan_in as f64).sqrt());
        let pos = randn(&mut rng, &[self.cfg.vision_tokens, self.cfg.vision_dim]).mapv(|v| 0.2 * v);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[self.cfg.vision_tokens, f, self.cfg.vision_dim]));
        for fi in 0..f {
            for ty in 0..side {
                for tx in 0..side {
                    let t = ty * side + tx;
                    for cv in 0..self.cfg.vision_dim {
                        let mut acc = pos[[t, cv]];
                        let mut idx = 0usize;
                        for ch in 0..c {
                            for py in 0..ph {
                                for px in 0..pw {
                                    acc += proj[[cv, idx]]
                                        * frames[[fi, ch, ty * ph + py, tx * pw + px]];
                                    idx += 1;
                                }
                            }
                        }
                        out[[t, fi, cv]] = acc;
                    }
                }
            }
        }
        out
    }

    /// Metric embedding of one frame `[C, H, W]` (values in [-1, 1]).
    ///
    /// Entity-class color evidence lands on the class word's vector; a
    /// coarse luminance grid adds scene structure on auxiliary basis vectors.
    pub fn embed_frame(&self, frame: ArrayView3<f64>) -> Vec<f64> {
        let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
        assert_eq!(c, 3, "metric embedder expects RGB frames");
        let mut acc = Array1::<f64>::zeros(self.cfg.text_dim);

        for class in EntityClass::ALL {
            let col = class.color();
            let target = [
                col[0] as f64 / 255.0 * 2.0 - 1.0,
                col[1] as f64 / 255.0 * 2.0 - 1.0,
                col[2] as f64 / 255.0 * 2.0 - 1.0,
            ];
            let mut score = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (0..3)
                        .map(|ch| {
                            let d = frame[[ch, y, x]] - target[ch];
                            d * d
                        })
                        .sum::<f64>();
                    score += (-d2 / (2.0 * 0.25 * 0.25)).exp();
                }
            }
            score /= (h * w) as f64;
            let wv = self.word_vec(class.word());
            acc.scaled_add(8.0 * score, &wv);
        }

        // 2x2 mean-luminance grid on fixed auxiliary directions
        for gy in 0..2 {
            for gx in 0..2 {
                let (y0, y1) = (gy * h / 2, (gy + 1) * h / 2);
                let (x0, x1) = (gx * w / 2, (gx + 1) * w / 2);
                let mut lum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        lum += (frame[[0, y, x]] + frame[[1, y, x]] + frame[[2, y, x]]) / 3.0;
                    }
                }
                lum /= ((y1 - y0) * (x1 - x0)) as f64;
                let wv = self.word_vec(&format!("lum{gy}{gx}"));
                acc.scaled_add(0.3 * (lum + 1.0) / 2.0, &wv);
            }
        }
        acc.to_vec()
    }
}
