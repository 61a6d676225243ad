//! The three-stage progressive training recipe.
//!
//! Stage 0 trains forward-order denoising only. Stage 1 re-loads the stage-0
//! parameters and adds the reciprocal pathway: the same weights denoise the
//! reversed clip under the prevention prompt, with a negative-similarity
//! term contrasting the two predicted noises. Stage 2 attaches the causal
//! blocks and adds the answer-grounding loss on the end layer's token split.
//!
//! Every random draw derives from (seed, stage, step), so resuming from a
//! mid-stage checkpoint replays the remaining steps bitwise.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::backbone::{Backbone, ConditioningBundle};
use crate::causal::{
    loss_ara_node, preset_layout, token_intervention_node, answer_logits, CausalHooks, HookLayout,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, validate_shapes, Checkpoint};
use crate::config::RunConfig;
use crate::diffusion::{forward_noise, mse_node, ns_node, NoiseSchedule};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::gaze::GazeTokenizer;
use crate::nn::{Adam, ParamStore};
use crate::rng::{randn, rng_from};
use crate::scenario::{load_manifest, clip_path, load_clip, reverse_clip, ClipRecord};
use crate::tape::Tape;

const STREAM_NOISE: u64 = 0x6e01;
const STREAM_STEPK: u64 = 0x6e02;
const STREAM_GUMBEL: u64 = 0x6e03;
const STREAM_INTERVENE: u64 = 0x6e04;
const STREAM_DATA: u64 = 0x6e05;

fn trainable_name(stage: u8, train_all: bool, name: &str) -> bool {
    match stage {
        0 | 1 => name.starts_with("bb."),
        _ if train_all => true,
        _ => {
            name.starts_with("cts.")
                || name.starts_with("ctg.")
                || (name.starts_with("bb.") && name.contains(".ta."))
        }
    }
}

fn trainable_filter(stage: u8, train_all: bool) -> impl Fn(&str) -> bool {
    move |name| trainable_name(stage, train_all, name)
}

/// One optimizer step's loss breakdown.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

/// In-memory dataset with cached frozen-encoder tokens.
pub struct Dataset {
    pub clips: Vec<ClipRecord>,
    token_cache: HashMap<usize, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Dataset {
    pub fn new(clips: Vec<ClipRecord>) -> Self {
        Dataset { clips, token_cache: HashMap::new() }
    }

    /// Load every clip referenced by a manifest (split filter optional).
    pub fn from_manifest(path: &Path, split: Option<&str>) -> Result<Self> {
        let records = load_manifest(path)?;
        let mut clips = Vec::new();
        for rec in &records {
            if let Some(s) = split {
                if rec.split != s {
                    continue;
                }
            }
            clips.push(load_clip(&clip_path(path, rec))?);
        }
        if clips.is_empty() {
            return Err(Error::Manifest("manifest selects no clips".into()));
        }
        Ok(Dataset::new(clips))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Deterministic shuffled batch for a global step: the item sequence is
    /// the concatenation of per-epoch permutations derived from the seed.
    pub fn batch_indices(&self, seed: u64, batch: usize, step: u64) -> Vec<usize> {
        let n = self.clips.len();
        let start = step as usize * batch;
        (0..batch)
            .map(|i| {
                let g = start + i;
                let epoch = (g / n) as u64;
                let pos = g % n;
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = rng_from(seed, &[STREAM_DATA, epoch]);
                for i in (1..n).rev() {
                    let j = (rng.random::<f64>() * (i + 1) as f64) as usize;
                    order.swap(i, j.min(i));
                }
                order[pos]
            })
            .collect()
    }

    fn tokens_for(
        &mut self,
        idx: usize,
        encoder: &ToyEncoder,
        gaze_tok: &GazeTokenizer,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        if let Some(hit) = self.token_cache.get(&idx) {
            return Ok(hit.clone());
        }
        let clip = &self.clips[idx];
        let z_v = encoder.encode_frames(&clip.frames);
        let z_g = gaze_tok.tokenize(&clip.gaze.maps)?;
        self.token_cache.insert(idx, (z_v.clone(), z_g.clone()));
        Ok((z_v, z_g))
    }
}

/// Stage trainer owning parameters, optimizer state and the step counter.
pub struct Trainer {
    pub cfg: RunConfig,
    pub stage: u8,
    pub step: u64,
    pub store: ParamStore,
    pub opt: Adam,
    pub backbone: Backbone,
    pub sched: NoiseSchedule,
    pub encoder: ToyEncoder,
    pub gaze_tok: GazeTokenizer,
    pub layout: HookLayout,
}

impl Trainer {
    /// Build a trainer for `stage`, enforcing the checkpoint chain:
    /// stage n > 0 requires a stage n-1 checkpoint (or a mid-stage
    /// checkpoint of the same stage to resume), and the model hash of the
    /// incoming checkpoint must match the current config.
    pub fn new(cfg: &RunConfig, stage: u8, checkpoint_in: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.model.clone())?;
        let sched = cfg.schedule.build()?;
        let encoder = ToyEncoder::new(cfg.encoder.clone());
        let gaze_tok = GazeTokenizer::new(
            cfg.gaze_patch(),
            cfg.causal.token_dim,
            crate::rng::derive_seed(cfg.encoder.seed, &[0x9a2e]),
        );
        let layout = if stage == 2 {
            preset_layout(&cfg.train.hooks, cfg.model.layers)?
        } else {
            HookLayout { attachments: vec![], gaze_enabled: false }
        };

        let expected_bb = backbone.init_params(cfg.seed);
        let mut opt = Adam::new(cfg.train.lr, cfg.train.adam_beta1, cfg.train.adam_beta2);
        let (store, step) = match (stage, checkpoint_in) {
            (0, None) => (expected_bb, 0),
            (s, None) => {
                return Err(Error::Chain(format!(
                    "stage {s} requires a stage {} checkpoint",
                    s - 1
                )));
            }
            (s, Some(path)) => {
                let ckpt = load_checkpoint(path)?;
                if ckpt.model_hash != cfg.model_hash() {
                    return Err(Error::Chain(format!(
                        "checkpoint {} was trained under a different model config (hash {} vs {})",
                        path.display(),
                        ckpt.model_hash,
                        cfg.model_hash()
                    )));
                }
                let resume = ckpt.stage == s;
                if !resume && ckpt.stage + 1 != s {
                    return Err(Error::Chain(format!(
                        "stage {s} cannot chain from a stage {} checkpoint",
                        ckpt.stage
                    )));
                }
                let mut params = ckpt.model_params();
                validate_shapes(&params, &expected_bb)?;
                if s == 2 {
                    let causal_expected = crate::causal::init_causal_params(
                        &layout,
                        &backbone.cfg.plan(),
                        &cfg.causal,
                        cfg.seed,
                    );
                    if resume {
                        validate_shapes(&params, &causal_expected)?;
                    } else {
                        params.merge(causal_expected);
                    }
                }
                if resume {
                    opt.import_state(
                        ckpt.opt_t,
                        ckpt.params
                            .iter()
                            .filter(|(k, _)| k.starts_with("opt."))
                            .map(|(k, v)| (k.clone(), v.clone())),
                    );
                    (params, ckpt.step)
                } else {
                    (params, 0)
                }
            }
        };

        Ok(Trainer {
            cfg: cfg.clone(),
            stage,
            step,
            store,
            opt,
            backbone,
            sched,
            encoder,
            gaze_tok,
            layout,
        })
    }

    /// Stage-2 default freezes everything but temporal attention and the
    /// attached blocks; `train_all` lifts that.
    pub fn trainable(&self, name: &str) -> bool {
        trainable_name(self.stage, self.cfg.train.train_all, name)
    }

    fn frames_batch(clips: &[&ClipRecord]) -> ArrayD<f64> {
        let f = clips[0].frames.shape().to_vec();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[clips.len(), f[0], f[1], f[2], f[3]]));
        for (i, c) in clips.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(&c.frames);
        }
        out
    }

    fn draw_steps(&self, rng: &mut impl Rng, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| 1 + (rng.random::<f64>() * self.sched.k_steps as f64) as usize)
            .map(|k| k.min(self.sched.k_steps))
            .collect()
    }

    fn noised_batch(
        &self,
        z0: &ArrayD<f64>,
        e: &ArrayD<f64>,
        ks: &[usize],
    ) -> Result<ArrayD<f64>> {
        let mut z = ArrayD::<f64>::zeros(z0.raw_dim());
        for (i, &k) in ks.iter().enumerate() {
            let zi = z0.index_axis(ndarray::Axis(0), i).to_owned();
            let ei = e.index_axis(ndarray::Axis(0), i).to_owned();
            let noised = forward_noise(&zi, &ei, k, &self.sched)?;
            z.index_axis_mut(ndarray::Axis(0), i).assign(&noised);
        }
        Ok(z)
    }

    fn conditioning(&self, prompts: &[&str], ks: &[usize]) -> Result<ConditioningBundle> {
        let texts: Vec<_> = prompts.iter().map(|p| self.encoder.encode_text(p)).collect();
        ConditioningBundle::new(&texts, ks.to_vec())
    }

    fn check_finite(&self, loss: f64, ks: &[usize]) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at stage {} step {}: k draws {:?}",
                self.stage, self.step, ks
            )));
        }
        Ok(())
    }

    /// One forward-order denoising step (stage 0 objective).
    pub fn stage0_step(&mut self, batch: &[&ClipRecord]) -> Result<StepLoss> {
        let seed = self.cfg.seed;
        let b = batch.len();
        let mut krng = rng_from(seed, &[STREAM_STEPK, self.stage as u64, self.step]);
        let ks = self.draw_steps(&mut krng, b);
        let mut nrng = rng_from(seed, &[STREAM_NOISE, self.stage as u64, self.step]);
        let z0 = Self::frames_batch(batch);
        let e = randn(&mut nrng, z0.shape());
        let z_k = self.noised_batch(&z0, &e, &ks)?;
        let prompts: Vec<&str> = batch.iter().map(|c| c.prompt_f.as_str()).collect();
        let cond = self.conditioning(&prompts, &ks)?;

        let mut tape = Tape::new();
        let nodes = self.store.leaf_all(&mut tape);
        let zi = tape.constant(z_k);
        let out = self.backbone.predict_noise(&mut tape, &nodes, zi, &cond, None)?;
        let ei = tape.constant(e);
        let loss = mse_node(&mut tape, ei, out);
        let total = tape.scalar_value(loss);
        self.check_finite(total, &ks)?;

        let mut grads = tape.backward(loss);
        let named = self.store.collect_grads(&nodes, &mut grads);
        let filter = trainable_filter(self.stage, self.cfg.train.train_all);
        self.opt.step(&mut self.store, &named, &filter);
        self.step += 1;
        Ok(StepLoss { total, components: vec![("mse".into(), total)] })
    }

    /// Reciprocal prompted step (stage 1 objective): forward and reversed
    /// pathways share every parameter by construction (one node map).
    pub fn stage1_step(&mut self, batch: &[&ClipRecord]) -> Result<StepLoss> {
        let seed = self.cfg.seed;
        let b = batch.len();
        let stage = self.stage as u64;
        let mut krng = rng_from(seed, &[STREAM_STEPK, stage, self.step]);
        let ks_f = self.draw_steps(&mut krng, b);
        let ks_r = self.draw_steps(&mut krng, b);
        let mut nrng = rng_from(seed, &[STREAM_NOISE, stage, self.step]);

        let reversed: Vec<ClipRecord> = batch.iter().map(|c| reverse_clip(c)).collect();
        let z0_f = Self::frames_batch(batch);
        let rev_refs: Vec<&ClipRecord> = reversed.iter().collect();
        let z0_r = Self::frames_batch(&rev_refs);
        let e_f = randn(&mut nrng, z0_f.shape());
        let e_r = randn(&mut nrng, z0_r.shape());
        let zk_f = self.noised_batch(&z0_f, &e_f, &ks_f)?;
        let zk_r = self.noised_batch(&z0_r, &e_r, &ks_r)?;
        let prompts_f: Vec<&str> = batch.iter().map(|c| c.prompt_f.as_str()).collect();
        let prompts_r: Vec<&str> = reversed.iter().map(|c| c.prompt_f.as_str()).collect();
        let cond_f = self.conditioning(&prompts_f, &ks_f)?;
        let cond_r = self.conditioning(&prompts_r, &ks_r)?;

        let mut tape = Tape::new();
        let nodes = self.store.leaf_all(&mut tape);
        let zfi = tape.constant(zk_f);
        let zri = tape.constant(zk_r);
        let out_f = self.backbone.predict_noise(&mut tape, &nodes, zfi, &cond_f, None)?;
        let out_r = self.backbone.predict_noise(&mut tape, &nodes, zri, &cond_r, None)?;
        let efi = tape.constant(e_f);
        let eri = tape.constant(e_r);
        let mse_f = mse_node(&mut tape, efi, out_f);
        let mse_r = mse_node(&mut tape, eri, out_r);
        let sum = tape.add(mse_f, mse_r);
        // lambda = 0 decouples into two reconstruction terms; the contrast
        // term refuses zero-norm predictions rather than smoothing them
        let (loss, ns_val) = if self.cfg.train.lambda == 0.0 {
            (sum, 0.0)
        } else {
            for (what, node) in [("forward", out_f), ("reverse", out_r)] {
                for item in tape.value(node).axis_iter(ndarray::Axis(0)) {
                    if item.iter().all(|&v| v == 0.0) {
                        return Err(Error::DegenerateInput(format!(
                            "{what} pathway predicted an all-zero noise at step {}",
                            self.step
                        )));
                    }
                }
            }
            let ns = ns_node(&mut tape, out_f, out_r);
            let ns_w = tape.scale(ns, self.cfg.train.lambda);
            (tape.add(sum, ns_w), tape.scalar_value(ns))
        };

        let total = tape.scalar_value(loss);
        self.check_finite(total, &ks_f)?;
        let comps = vec![
            ("mse_f".into(), tape.scalar_value(mse_f)),
            ("mse_r".into(), tape.scalar_value(mse_r)),
            ("ns".into(), ns_val),
        ];

        let mut grads = tape.backward(loss);
        let named = self.store.collect_grads(&nodes, &mut grads);
        let filter = trainable_filter(self.stage, self.cfg.train.train_all);
        self.opt.step(&mut self.store, &named, &filter);
        self.step += 1;
        Ok(StepLoss { total, components: comps })
    }

    /// Causal-grounded step (stage 2 objective): hooks attached per the
    /// layout, reconstruction plus the weighted grounding loss from the end
    /// layer's token split.
    pub fn stage2_step(&mut self, ds: &mut Dataset, indices: &[usize]) -> Result<StepLoss> {
        let seed = self.cfg.seed;
        let stage = self.stage as u64;
        let b = indices.len();
        // frozen tokens first: the sole mutable dataset borrow
        let frozen_tokens = if self.layout.is_empty() {
            None
        } else {
            let n_tok = self.cfg.causal.n_tokens;
            let c_tok = self.cfg.causal.token_dim;
            let frames = self.cfg.model.frames;
            let mut z_v = ArrayD::<f64>::zeros(IxDyn(&[b * n_tok, frames, c_tok]));
            let mut z_g = ArrayD::<f64>::zeros(IxDyn(&[b * n_tok, frames, c_tok]));
            for (i, &idx) in indices.iter().enumerate() {
                let (v, g) = ds.tokens_for(idx, &self.encoder, &self.gaze_tok)?;
                z_v.slice_axis_mut(
                    ndarray::Axis(0),
                    ndarray::Slice::from(i * n_tok..(i + 1) * n_tok),
                )
                .assign(&v);
                if self.layout.gaze_enabled {
                    z_g.slice_axis_mut(
                        ndarray::Axis(0),
                        ndarray::Slice::from(i * n_tok..(i + 1) * n_tok),
                    )
                    .assign(&g);
                }
            }
            Some((z_v, z_g))
        };
        let batch: Vec<&ClipRecord> = indices.iter().map(|&i| &ds.clips[i]).collect();
        let mut krng = rng_from(seed, &[STREAM_STEPK, stage, self.step]);
        let ks = self.draw_steps(&mut krng, b);
        // the forward noise is freshly re-initialized every step
        let mut nrng = rng_from(seed, &[STREAM_NOISE, stage, self.step]);
        let z0 = Self::frames_batch(&batch);
        let e = randn(&mut nrng, z0.shape());
        let z_k = self.noised_batch(&z0, &e, &ks)?;
        let prompts: Vec<&str> = batch.iter().map(|c| c.prompt_f.as_str()).collect();
        let cond = self.conditioning(&prompts, &ks)?;

        if self.layout.is_empty() {
            // ablation without blocks: plain reconstruction under the
            // stage-2 trainable set
            let mut tape = Tape::new();
            let nodes = self.store.leaf_all(&mut tape);
            let zi = tape.constant(z_k);
            let out = self.backbone.predict_noise(&mut tape, &nodes, zi, &cond, None)?;
            let ei = tape.constant(e);
            let loss = mse_node(&mut tape, ei, out);
            let total = tape.scalar_value(loss);
            self.check_finite(total, &ks)?;
            let mut grads = tape.backward(loss);
            let named = self.store.collect_grads(&nodes, &mut grads);
            let filter = trainable_filter(self.stage, self.cfg.train.train_all);
            self.opt.step(&mut self.store, &named, &filter);
            self.step += 1;
            return Ok(StepLoss { total, components: vec![("mse".into(), total)] });
        }

        // vision tokens from clean frames, gaze through the
        // position-embedding tokenizer (zeroed under the no_gaze preset)
        let n_tok = self.cfg.causal.n_tokens;
        let c_tok = self.cfg.causal.token_dim;
        let frames = self.cfg.model.frames;
        let (z_v, z_g) = frozen_tokens.expect("tokens computed for non-empty layout");

        // question and answer encodings (shared frozen encoder)
        let mut zq = ArrayD::<f64>::zeros(IxDyn(&[b, 10, c_tok]));
        let mut za = ArrayD::<f64>::zeros(IxDyn(&[b, 5, 32, c_tok]));
        for (i, clip) in batch.iter().enumerate() {
            let q = self.encoder.encode_text_with_len(&clip.ara.question, 10);
            for l in 0..10 {
                for c in 0..c_tok {
                    zq[[i, l, c]] = q[[l, c]];
                }
            }
            for (x, ans) in clip.ara.answers.iter().enumerate() {
                let a = self.encoder.encode_text_with_len(ans, 32);
                for l in 0..32 {
                    for c in 0..c_tok {
                        za[[i, x, l, c]] = a[[l, c]];
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let nodes = self.store.leaf_all(&mut tape);
        let zi = tape.constant(z_k);
        let mut gumbel_rng = rng_from(seed, &[STREAM_GUMBEL, stage, self.step]);
        let (out, bundle) = {
            let mut hooks = CausalHooks::new(
                self.layout.clone(),
                self.cfg.causal.clone(),
                nodes.clone(),
                z_v,
                z_g,
                b,
                &mut gumbel_rng,
            )?;
            let out =
                self.backbone
                    .predict_noise(&mut tape, &nodes, zi, &cond, Some(&mut hooks))?;
            (out, hooks.end_bundle.take())
        };
        let ei = tape.constant(e);
        let mse = mse_node(&mut tape, ei, out);

        let bundle = bundle.ok_or_else(|| {
            Error::Contract("stage-2 layout has a grounding layer but produced no bundle".into())
        })?;
        let d = bundle.d;
        let m = n_tok - d;
        let causal_flat = tape.reshape(bundle.causal_node, &[b, frames * d, c_tok]);
        let mut ivrng = rng_from(seed, &[STREAM_INTERVENE, stage, self.step]);
        let bg_do = token_intervention_node(
            &mut tape,
            bundle.background_node,
            self.cfg.causal.intervention_fraction,
            &mut ivrng,
        )?;
        let bg_flat = tape.reshape(bundle.background_node, &[b, frames * m, c_tok]);
        let bg_do_flat = tape.reshape(bg_do, &[b, frames * m, c_tok]);

        let zqi = tape.constant(zq);
        let zai = tape.constant(za);
        let cl = answer_logits(&mut tape, &nodes, causal_flat, zqi, zai)?;
        let bl = answer_logits(&mut tape, &nodes, bg_flat, zqi, zai)?;
        let dl = answer_logits(&mut tape, &nodes, bg_do_flat, zqi, zai)?;
        let (ara, xe_c, xe_b, kld) = loss_ara_node(&mut tape, cl, bl, dl, 0);
        let ara_w = tape.scale(ara, self.cfg.train.gamma);
        let loss = tape.add(mse, ara_w);

        let total = tape.scalar_value(loss);
        self.check_finite(total, &ks)?;
        let comps = vec![
            ("mse".into(), tape.scalar_value(mse)),
            ("ara".into(), tape.scalar_value(ara)),
            ("xe_c".into(), tape.scalar_value(xe_c)),
            ("xe_b".into(), tape.scalar_value(xe_b)),
            ("kld".into(), tape.scalar_value(kld)),
        ];

        let mut grads = tape.backward(loss);
        let named = self.store.collect_grads(&nodes, &mut grads);
        let filter = trainable_filter(self.stage, self.cfg.train.train_all);
        self.opt.step(&mut self.store, &named, &filter);
        self.step += 1;
        Ok(StepLoss { total, components: comps })
    }

    /// Dispatch one step for the trainer's stage.
    pub fn train_step(&mut self, ds: &mut Dataset, indices: &[usize]) -> Result<StepLoss> {
        match self.stage {
            0 => {
                let batch: Vec<&ClipRecord> = indices.iter().map(|&i| &ds.clips[i]).collect();
                self.stage0_step(&batch)
            }
            1 => {
                let batch: Vec<&ClipRecord> = indices.iter().map(|&i| &ds.clips[i]).collect();
                self.stage1_step(&batch)
            }
            2 => self.stage2_step(ds, indices),
            s => Err(Error::config(format!("unknown stage {s}"))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.store.clone();
        for (k, v) in self.opt.export_state() {
            params.insert(k, v);
        }
        Checkpoint {
            stage: self.stage,
            step: self.step,
            opt_t: self.opt.t,
            model_hash: self.cfg.model_hash(),
            config_toml: self.cfg.to_toml(),
            params,
        }
    }
}

pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: Option<f64>,
}

/// Execute a stage's step budget: deterministic batches, per-step loss log,
/// periodic checkpoints, final checkpoint.
pub fn run_stage(
    cfg: &RunConfig,
    dataset: &mut Dataset,
    out_dir: &Path,
) -> Result<RunOutput> {
    let stage = cfg.train.stage;
    let ckpt_in = cfg.train.checkpoint_in.as_ref().map(PathBuf::from);
    let mut trainer = Trainer::new(cfg, stage, ckpt_in.as_deref())?;

    if stage == 2 {
        // grounding inputs must exist before training starts
        for (i, clip) in dataset.clips.iter().enumerate() {
            let g = clip.gaze.maps.dim();
            if g != (cfg.model.frames, cfg.model.height, cfg.model.width) {
                return Err(Error::Config(format!(
                    "clip {i}: gaze maps {g:?} do not match the model resolution"
                )));
            }
            clip.ara.validate()?;
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let ckpt_out = cfg
        .train
        .checkpoint_out
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join(format!("stage{stage}.ckpt")));
    let log_path = out_dir.join(format!("loss_stage{stage}.log"));

    let resuming = trainer.step > 0;
    let mut log = if resuming {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "# step\tloss\tcomponents")?;
        f
    };

    let budget = cfg.train.steps;
    let mut final_loss = None;
    while trainer.step < budget {
        let step = trainer.step;
        let indices = dataset.batch_indices(cfg.seed, cfg.train.batch, step);
        let loss = trainer.train_step(dataset, &indices)?;
        let comps: Vec<String> = loss
            .components
            .iter()
            .map(|(k, v)| format!("{k}={v:.12e}"))
            .collect();
        writeln!(log, "{step}\t{:.12e}\t{}", loss.total, comps.join("\t"))?;
        final_loss = Some(loss.total);
        if cfg.train.checkpoint_every > 0
            && trainer.step % cfg.train.checkpoint_every == 0
            && trainer.step < budget
        {
            save_checkpoint(&ckpt_out, &trainer.to_checkpoint())?;
        }
    }
    log.flush()?;
    save_checkpoint(&ckpt_out, &trainer.to_checkpoint())?;
    Ok(RunOutput { checkpoint: ckpt_out, log: log_path, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    /// Small but complete config used across training tests.
    pub(crate) fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.schedule.steps = 50;
        cfg.model.layers = 2;
        cfg.model.frames = 4;
        cfg.model.height = 8;
        cfg.model.width = 8;
        cfg.model.widths = vec![8];
        cfg.model.text_dim = 8;
        cfg.model.time_dim = 8;
        cfg.model.groups = 2;
        cfg.encoder.text_dim = 8;
        cfg.encoder.vision_dim = 8;
        cfg.encoder.vision_tokens = 16;
        cfg.causal.n_tokens = 16;
        cfg.causal.token_dim = 8;
        cfg.causal.fuse_hidden = 8;
        cfg.causal.score_hidden = 4;
        cfg.scenario = ScenarioConfig::default().with_frames(4).with_resolution(8);
        cfg.scenario.gaze_kernel = 3;
        cfg.train.batch = 2;
        cfg.train.steps = 4;
        cfg.validate().unwrap();
        cfg
    }

    pub(crate) fn tiny_dataset(cfg: &RunConfig, n: usize) -> Dataset {
        let clips = (0..n as u64)
            .map(|s| generate_scenario(s, &cfg.scenario).unwrap())
            .collect();
        Dataset::new(clips)
    }

    #[test]
    fn stage0_loss_finite_and_positive() {
        let cfg = tiny_run_config();
        let mut ds = tiny_dataset(&cfg, 2);
        let mut tr = Trainer::new(&cfg, 0, None).unwrap();
        let loss = tr.train_step(&mut ds, &[0, 1]).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0);
    }

    #[test]
    fn stage_chain_guard() {
        let cfg = tiny_run_config();
        assert!(matches!(Trainer::new(&cfg, 1, None), Err(Error::Chain(_))));
        assert!(matches!(Trainer::new(&cfg, 2, None), Err(Error::Chain(_))));

        // a stage-0 checkpoint cannot feed stage 2 directly
        let dir = tempfile::tempdir().unwrap();
        let tr = Trainer::new(&cfg, 0, None).unwrap();
        let p = dir.path().join("s0.ckpt");
        save_checkpoint(&p, &tr.to_checkpoint()).unwrap();
        assert!(matches!(Trainer::new(&cfg, 2, Some(&p)), Err(Error::Chain(_))));
        assert!(Trainer::new(&cfg, 1, Some(&p)).is_ok());

        // hash mismatch refuses to start
        let mut other = cfg.clone();
        other.schedule.steps = 99;
        assert!(matches!(Trainer::new(&other, 1, Some(&p)), Err(Error::Chain(_))));
    }

    #[test]
    fn stage1_with_zero_lambda_decouples() {
        let mut cfg = tiny_run_config();
        cfg.train.lambda = 0.0;
        let mut ds = tiny_dataset(&cfg, 2);
        let dir = tempfile::tempdir().unwrap();
        let tr0 = Trainer::new(&cfg, 0, None).unwrap();
        let p = dir.path().join("s0.ckpt");
        save_checkpoint(&p, &tr0.to_checkpoint()).unwrap();
        let mut tr = Trainer::new(&cfg, 1, Some(&p)).unwrap();
        let loss = tr.train_step(&mut ds, &[0, 1]).unwrap();
        let mse_f = loss.components.iter().find(|(k, _)| k == "mse_f").unwrap().1;
        let mse_r = loss.components.iter().find(|(k, _)| k == "mse_r").unwrap().1;
        assert!((loss.total - (mse_f + mse_r)).abs() < 1e-12);
    }

    #[test]
    fn stage2_loss_composition_and_ablation() {
        let cfg = tiny_run_config();
        let dir = tempfile::tempdir().unwrap();
        let tr0 = Trainer::new(&cfg, 0, None).unwrap();
        let p0 = dir.path().join("s0.ckpt");
        save_checkpoint(&p0, &tr0.to_checkpoint()).unwrap();
        let tr1 = Trainer::new(&cfg, 1, Some(&p0)).unwrap();
        let p1 = dir.path().join("s1.ckpt");
        save_checkpoint(&p1, &tr1.to_checkpoint()).unwrap();

        let mut ds = tiny_dataset(&cfg, 2);
        let mut tr2 = Trainer::new(&cfg, 2, Some(&p1)).unwrap();
        let loss = tr2.train_step(&mut ds, &[0, 1]).unwrap();
        let mse = loss.components.iter().find(|(k, _)| k == "mse").unwrap().1;
        let ara = loss.components.iter().find(|(k, _)| k == "ara").unwrap().1;
        let xe_c = loss.components.iter().find(|(k, _)| k == "xe_c").unwrap().1;
        let xe_b = loss.components.iter().find(|(k, _)| k == "xe_b").unwrap().1;
        let kld = loss.components.iter().find(|(k, _)| k == "kld").unwrap().1;
        assert!((loss.total - (mse + cfg.train.gamma * ara)).abs() < 1e-8);
        assert!((ara - (xe_c + xe_b + kld)).abs() < 1e-8);

        // gamma = 0 reduces to reconstruction only
        let mut g0 = cfg.clone();
        g0.train.gamma = 0.0;
        let mut tr2b = Trainer::new(&g0, 2, Some(&p1)).unwrap();
        let mut ds2 = tiny_dataset(&g0, 2);
        let loss2 = tr2b.train_step(&mut ds2, &[0, 1]).unwrap();
        let mse2 = loss2.components.iter().find(|(k, _)| k == "mse").unwrap().1;
        assert!((loss2.total - mse2).abs() < 1e-12);

        // no_gaze preset runs and stays finite
        let mut ng = cfg.clone();
        ng.train.hooks = "no_gaze".into();
        let mut tr2c = Trainer::new(&ng, 2, Some(&p1)).unwrap();
        let mut ds3 = tiny_dataset(&ng, 2);
        let loss3 = tr2c.train_step(&mut ds3, &[0, 1]).unwrap();
        assert!(loss3.total.is_finite());
    }

    #[test]
    fn stage2_frozen_set_discipline() {
        let cfg = tiny_run_config();
        let dir = tempfile::tempdir().unwrap();
        let tr0 = Trainer::new(&cfg, 0, None).unwrap();
        let p0 = dir.path().join("s0.ckpt");
        save_checkpoint(&p0, &tr0.to_checkpoint()).unwrap();
        let tr1 = Trainer::new(&cfg, 1, Some(&p0)).unwrap();
        let p1 = dir.path().join("s1.ckpt");
        save_checkpoint(&p1, &tr1.to_checkpoint()).unwrap();

        let mut ds = tiny_dataset(&cfg, 2);
        let mut tr2 = Trainer::new(&cfg, 2, Some(&p1)).unwrap();
        let before = tr2.store.clone();
        for step in 0..10u64 {
            let idx = ds.batch_indices(cfg.seed, cfg.train.batch, step);
            tr2.train_step(&mut ds, &idx).unwrap();
        }
        let mut moved_trainable = 0usize;
        for (name, arr) in before.iter() {
            let now = tr2.store.get(name).unwrap();
            let changed = arr != now;
            if tr2.trainable(name) {
                if changed {
                    moved_trainable += 1;
                }
            } else {
                assert!(!changed, "frozen parameter {name} moved");
            }
        }
        assert!(moved_trainable > 0, "no trainable parameter moved in 10 steps");
    }

    #[test]
    fn resume_replays_identical_losses() {
        let cfg = tiny_run_config();
        let mut ds = tiny_dataset(&cfg, 3);

        let mut full = Trainer::new(&cfg, 0, None).unwrap();
        let mut losses_full = Vec::new();
        for step in 0..6u64 {
            let idx = ds.batch_indices(cfg.seed, cfg.train.batch, step);
            losses_full.push(full.train_step(&mut ds, &idx).unwrap().total);
        }

        let mut head = Trainer::new(&cfg, 0, None).unwrap();
        for step in 0..3u64 {
            let idx = ds.batch_indices(cfg.seed, cfg.train.batch, step);
            head.train_step(&mut ds, &idx).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        save_checkpoint(&p, &head.to_checkpoint()).unwrap();

        let mut resumed = Trainer::new(&cfg, 0, Some(&p)).unwrap();
        assert_eq!(resumed.step, 3);
        for step in 3..6u64 {
            let idx = ds.batch_indices(cfg.seed, cfg.train.batch, step);
            let l = resumed.train_step(&mut ds, &idx).unwrap().total;
            assert_eq!(l, losses_full[step as usize], "step {step}");
        }
    }

    #[test]
    fn run_stage_writes_log_and_checkpoint() {
        let cfg = tiny_run_config();
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset(&cfg, 2);
        let out = run_stage(&cfg, &mut ds, dir.path()).unwrap();
        assert!(out.checkpoint.exists());
        let log = std::fs::read_to_string(&out.log).unwrap();
        let lines: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines.len() as u64, cfg.train.steps);
        let ckpt = load_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(ckpt.stage, 0);
        assert_eq!(ckpt.step, cfg.train.steps);
    }
}
