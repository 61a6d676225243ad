//! Inference: text-to-video from pure noise and video-to-video editing via
//! partial noising, both along the deterministic (or eta-noised) reverse
//! chain. Training-only blocks are never attached here; a run needs no gaze
//! maps and no answer items.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::backbone::{Backbone, ConditioningBundle};
use crate::config::RunConfig;
use crate::diffusion::{forward_noise, reverse_step_to, spaced_timesteps, NoiseSchedule};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::{randn, rng_from};
use crate::tape::Tape;

const STREAM_INIT_NOISE: u64 = 0x1f01;
const STREAM_ETA: u64 = 0x1f02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    T2v,
    V2v,
}

pub struct InferenceRequest {
    pub mode: InferMode,
    pub prompt: String,
    /// Source frames `[F, C, H, W]`; required for V2V, forbidden for T2V.
    pub source: Option<ArrayD<f64>>,
    pub ddim_steps: usize,
    pub eta: f64,
    /// Edit strength in (0, 1]; the source is noised to `round(s * K)`.
    pub strength: f64,
    pub seed: u64,
}

impl InferenceRequest {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.source.is_some()) {
            (InferMode::V2v, false) => {
                return Err(Error::contract("v2v requires a source clip"))
            }
            (InferMode::T2v, true) => {
                return Err(Error::contract("t2v does not take a source clip"))
            }
            _ => {}
        }
        if self.ddim_steps == 0 {
            return Err(Error::contract("sampling needs at least one step"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::contract("eta outside [0, 1]"));
        }
        if self.mode == InferMode::V2v && !(0.0 < self.strength && self.strength <= 1.0) {
            return Err(Error::contract("edit strength outside (0, 1]"));
        }
        Ok(())
    }
}

/// Inference engine over a trained parameter store (backbone weights only).
pub struct Sampler {
    pub backbone: Backbone,
    pub sched: NoiseSchedule,
    pub encoder: ToyEncoder,
    pub store: ParamStore,
}

impl Sampler {
    pub fn new(cfg: &RunConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.model.clone())?;
        crate::checkpoint::validate_shapes(&store, &backbone.init_params(0))?;
        Ok(Sampler {
            backbone,
            sched: cfg.schedule.build()?,
            encoder: ToyEncoder::new(cfg.encoder.clone()),
            store,
        })
    }

    fn predict(&self, z: &ArrayD<f64>, k: usize, prompt: &str) -> Result<ArrayD<f64>> {
        let mut tape = Tape::new();
        let nodes = self.store.constant_all(&mut tape);
        let text = vec![self.encoder.encode_text(prompt)];
        let cond = ConditioningBundle::new(&text, vec![k])?;
        let zi = tape.constant(z.clone());
        let out = self.backbone.predict_noise(&mut tape, &nodes, zi, &cond, None)?;
        Ok(tape.value(out).clone())
    }

    fn chain(
        &self,
        mut z: ArrayD<f64>,
        timesteps: &[usize],
        prompt: &str,
        eta: f64,
        seed: u64,
    ) -> Result<ArrayD<f64>> {
        let mut eta_rng = rng_from(seed, &[STREAM_ETA]);
        for (i, &k) in timesteps.iter().enumerate() {
            let e_hat = self.predict(&z, k, prompt)?;
            let k_prev = timesteps.get(i + 1).copied().unwrap_or(0);
            z = reverse_step_to(&z, k, k_prev, &e_hat, &self.sched, eta, &mut eta_rng)?;
        }
        Ok(z)
    }

    fn batched(&self, frames: &ArrayD<f64>) -> ArrayD<f64> {
        let s = frames.shape();
        frames
            .clone()
            .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2], s[3]]))
            .unwrap()
    }

    fn unbatched(&self, z: ArrayD<f64>) -> ArrayD<f64> {
        let s = z.shape().to_vec();
        z.into_shape_with_order(IxDyn(&[s[1], s[2], s[3], s[4]])).unwrap()
    }

    /// Generate a clip from pure noise conditioned on the prompt.
    pub fn t2v_generate(&self, req: &InferenceRequest) -> Result<ArrayD<f64>> {
        req.validate()?;
        let cfg = &self.backbone.cfg;
        let mut rng = rng_from(req.seed, &[STREAM_INIT_NOISE]);
        let z = randn(&mut rng, &[1, cfg.frames, cfg.data_channels, cfg.height, cfg.width]);
        let ts = spaced_timesteps(self.sched.k_steps, req.ddim_steps);
        let out = self.chain(z, &ts, &req.prompt, req.eta, req.seed)?;
        Ok(self.unbatched(out))
    }

    /// Edit a source clip: noise it to `round(s * K)`, then denoise under
    /// the new prompt. Strength 1 degenerates to T2V with the seed's noise;
    /// strength -> 0 returns the source unchanged.
    pub fn v2v_edit(&self, req: &InferenceRequest) -> Result<ArrayD<f64>> {
        req.validate()?;
        let source = req.source.as_ref().expect("validated");
        let k_edit = (req.strength * self.sched.k_steps as f64).round() as usize;
        if k_edit == 0 {
            return Ok(source.clone());
        }
        let src = self.batched(source);
        let mut rng = rng_from(req.seed, &[STREAM_INIT_NOISE]);
        let e = randn(&mut rng, src.shape());
        let z = if k_edit >= self.sched.k_steps {
            e
        } else {
            forward_noise(&src, &e, k_edit, &self.sched)?
        };
        let n_steps = ((req.ddim_steps as f64 * k_edit as f64 / self.sched.k_steps as f64).round()
            as usize)
            .max(1);
        let ts = spaced_timesteps(k_edit, n_steps);
        let out = self.chain(z, &ts, &req.prompt, req.eta, req.seed)?;
        Ok(self.unbatched(out))
    }
}

/// Write frames as `{i:05}.png` under `dir/frames` plus a single tiled grid
/// image for qualitative inspection.
pub fn save_clip_outputs(dir: &Path, frames: &ArrayD<f64>) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let u8_frames = crate::scenario::tensor_to_u8_frames(frames);
    let (c, h, w) = u8_frames[0].dim();
    assert_eq!(c, 3);
    for (i, fr) in u8_frames.iter().enumerate() {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Rgb([fr[[0, y, x]], fr[[1, y, x]], fr[[2, y, x]]]));
            }
        }
        img.save(frames_dir.join(format!("{i:05}.png")))?;
    }

    let cols = (u8_frames.len() as f64).sqrt().ceil() as usize;
    let rows = u8_frames.len().div_ceil(cols);
    let mut grid = image::RgbImage::new((cols * (w + 1)) as u32, (rows * (h + 1)) as u32);
    for (i, fr) in u8_frames.iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                grid.put_pixel(
                    (gx * (w + 1) + x) as u32,
                    (gy * (h + 1) + y) as u32,
                    image::Rgb([fr[[0, y, x]], fr[[1, y, x]], fr[[2, y, x]]]),
                );
            }
        }
    }
    grid.save(dir.join("grid.png"))?;
    Ok(())
}

/// Load frames previously written by [`save_clip_outputs`].
pub fn load_clip_frames(dir: &Path, frame_count: usize) -> Result<ArrayD<f64>> {
    let mut out: Option<ArrayD<f64>> = None;
    for i in 0..frame_count {
        let p = dir.join("frames").join(format!("{i:05}.png"));
        let img = image::open(&p)
            .map_err(|e| Error::Manifest(format!("{}: {e}", p.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let arr = out.get_or_insert_with(|| ArrayD::zeros(IxDyn(&[frame_count, 3, h, w])));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    arr[[i, c, y, x]] = px[c] as f64 / 255.0 * 2.0 - 1.0;
                }
            }
        }
    }
    out.ok_or_else(|| Error::Manifest("no frames found".into()))
}
