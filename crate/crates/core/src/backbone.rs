//! Miniature 3D-UNet noise predictor.
//!
//! Each layer runs residual conv -> spatial attention -> cross-modal
//! attention over text tokens -> temporal attention, and exposes exactly one
//! post-TA injection point where training-time blocks may transform the
//! token representation. Downscale and upscale halves mirror each other;
//! skip connections bridge matching scales.
//!
//! With no hook attached a layer's post-TA representation passes through
//! unchanged, so inference never depends on the training-only blocks.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{self, ParamNodes, ParamStore};
use crate::rng::rng_from;
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Total layer count L; layer i and layer L+1-i sit at the same scale.
    pub layers: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data_channels: usize,
    /// Channel width per scale, outermost first; (L+1)/2 entries.
    pub widths: Vec<usize>,
    pub text_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub heads: usize,
    /// Text conditioning toggle; with the zero-initialized CA output
    /// projection a fresh model produces identical outputs either way.
    pub ca_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            frames: 16,
            height: 32,
            width: 32,
            data_channels: 3,
            widths: vec![16, 32],
            text_dim: 16,
            time_dim: 32,
            groups: 4,
            heads: 1,
            ca_enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub layer: usize, // 1-based
    pub scale: usize, // 0 = full resolution
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub is_down: bool,
}

impl BackboneConfig {
    pub fn n_scales(&self) -> usize {
        self.layers.div_ceil(2)
    }

    fn scale_of(&self, layer: usize) -> usize {
        (layer - 1).min(self.layers - layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("backbone needs at least one layer"));
        }
        if self.widths.len() != self.n_scales() {
            return Err(Error::config(format!(
                "widths needs one entry per scale: expected {}, got {}",
                self.n_scales(),
                self.widths.len()
            )));
        }
        let deepest = self.n_scales() - 1;
        if self.height % (1 << deepest) != 0 || self.width % (1 << deepest) != 0 {
            return Err(Error::config(format!(
                "resolution {}x{} not divisible by 2^{deepest}",
                self.height, self.width
            )));
        }
        for &w in &self.widths {
            if w % self.groups != 0 {
                return Err(Error::config(format!("width {w} not divisible by groups {}", self.groups)));
            }
            if w % self.heads != 0 {
                return Err(Error::config(format!("width {w} not divisible by heads {}", self.heads)));
            }
        }
        Ok(())
    }

    /// Per-layer scale plan; the scale list reads the same forwards and
    /// backwards (mirror structure).
    pub fn plan(&self) -> Vec<LayerPlan> {
        (1..=self.layers)
            .map(|layer| {
                let scale = self.scale_of(layer);
                LayerPlan {
                    layer,
                    scale,
                    channels: self.widths[scale],
                    height: self.height >> scale,
                    width: self.width >> scale,
                    is_down: layer <= self.layers / 2,
                }
            })
            .collect()
    }

    fn time_hidden(&self) -> usize {
        2 * self.time_dim
    }
}

/// Shape information handed to layer hooks alongside the token node.
#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Training-time block attached at a layer's post-TA injection point.
/// Receives tokens `[B*h*w, F, C_l]` and must return the same shape.
pub trait LayerHook {
    fn apply(&mut self, tape: &mut Tape, layer: usize, tokens: NodeId, dims: &LayerDims)
        -> Result<NodeId>;
}

/// Pass-through hook; attaching it must not change any output bit.
pub struct IdentityHook;

impl LayerHook for IdentityHook {
    fn apply(&mut self, _tape: &mut Tape, _layer: usize, tokens: NodeId, _dims: &LayerDims)
        -> Result<NodeId> {
        Ok(tokens)
    }
}

/// Prompt conditioning for one forward pass.
pub struct ConditioningBundle {
    /// `[B, L_P, text_dim]`
    pub text_tokens: ArrayD<f64>,
    /// Per-item diffusion step indices, length B.
    pub steps: Vec<usize>,
}

impl ConditioningBundle {
    pub fn new(text_per_item: &[Array2<f64>], steps: Vec<usize>) -> Result<Self> {
        if text_per_item.len() != steps.len() {
            return Err(Error::contract("conditioning batch sizes disagree"));
        }
        let (l, d) = (text_per_item[0].nrows(), text_per_item[0].ncols());
        let mut text = ArrayD::<f64>::zeros(IxDyn(&[steps.len(), l, d]));
        for (i, t) in text_per_item.iter().enumerate() {
            if t.nrows() != l || t.ncols() != d {
                return Err(Error::contract("text token shapes disagree across batch"));
            }
            for a in 0..l {
                for b in 0..d {
                    text[[i, a, b]] = t[[a, b]];
                }
            }
        }
        Ok(ConditioningBundle { text_tokens: text, steps })
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    /// Initialize all parameters under the `bb.` namespace.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.cfg;
        let mut store = ParamStore::new();
        let rng = &mut rng_from(seed, &[0xbb]);

        nn::init_conv2d(&mut store, "bb.conv_in", cfg.data_channels, cfg.widths[0], 3, rng, false);
        nn::init_linear(&mut store, "bb.time.fc1", cfg.time_dim, cfg.time_hidden(), rng, false);
        nn::init_linear(&mut store, "bb.time.fc2", cfg.time_hidden(), cfg.time_hidden(), rng, false);

        for plan in self.cfg.plan() {
            let p = format!("bb.l{}", plan.layer);
            let c = plan.channels;
            nn::init_group_norm(&mut store, &format!("{p}.res.gn1"), c);
            nn::init_conv2d(&mut store, &format!("{p}.res.conv1"), c, c, 3, rng, false);
            nn::init_linear(&mut store, &format!("{p}.res.time"), cfg.time_hidden(), c, rng, false);
            nn::init_group_norm(&mut store, &format!("{p}.res.gn2"), c);
            nn::init_conv2d(&mut store, &format!("{p}.res.conv2"), c, c, 3, rng, false);
            for block in ["sa", "ca", "ta"] {
                nn::init_group_norm(&mut store, &format!("{p}.{block}.gn"), c);
                let kv_in = if block == "ca" { cfg.text_dim } else { c };
                nn::init_linear(&mut store, &format!("{p}.{block}.wq"), c, c, rng, false);
                nn::init_linear(&mut store, &format!("{p}.{block}.wk"), kv_in, c, rng, false);
                nn::init_linear(&mut store, &format!("{p}.{block}.wv"), kv_in, c, rng, false);
                // zero-initialized output projections keep fresh attention
                // blocks neutral
                nn::init_linear(&mut store, &format!("{p}.{block}.wo"), c, c, rng, true);
            }
        }

        for s in 1..cfg.n_scales() {
            nn::init_conv2d(&mut store, &format!("bb.down{s}"), cfg.widths[s - 1], cfg.widths[s], 3, rng, false);
            nn::init_conv2d(&mut store, &format!("bb.up{s}"), cfg.widths[s], cfg.widths[s - 1], 3, rng, false);
        }

        nn::init_group_norm(&mut store, "bb.out.gn", cfg.widths[0]);
        nn::init_conv2d(&mut store, "bb.out.conv", cfg.widths[0], cfg.data_channels, 3, rng, true);
        store
    }

    /// Predict the noise content of `z` (`[B, F, C, H, W]`).
    pub fn predict_noise(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        z: NodeId,
        cond: &ConditioningBundle,
        hooks: Option<&mut dyn LayerHook>,
    ) -> Result<NodeId> {
        Ok(self.forward_capture(tape, nodes, z, cond, hooks, None)?.0)
    }

    /// Post-TA activation of layer `l` in token layout `[B*h_l*w_l, F, C_l]`.
    pub fn layer_representation(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        z: NodeId,
        cond: &ConditioningBundle,
        l: usize,
    ) -> Result<NodeId> {
        if l == 0 || l > self.cfg.layers {
            return Err(Error::range(format!("layer {l} outside 1..={}", self.cfg.layers)));
        }
        let (_, captured) = self.forward_capture(tape, nodes, z, cond, None, Some(l))?;
        Ok(captured.expect("capture layer within range"))
    }

    pub fn forward_capture(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        z: NodeId,
        cond: &ConditioningBundle,
        mut hooks: Option<&mut dyn LayerHook>,
        capture: Option<usize>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let cfg = &self.cfg;
        let zshape = tape.value(z).shape().to_vec();
        if zshape.len() != 5
            || zshape[1] != cfg.frames
            || zshape[2] != cfg.data_channels
            || zshape[3] != cfg.height
            || zshape[4] != cfg.width
        {
            return Err(Error::Contract(format!(
                "input shape {zshape:?} does not match config [B, {}, {}, {}, {}]",
                cfg.frames, cfg.data_channels, cfg.height, cfg.width
            )));
        }
        let batch = zshape[0];
        if cond.steps.len() != batch || cond.text_tokens.shape()[0] != batch {
            return Err(Error::contract("conditioning batch size mismatch"));
        }
        if cond.text_tokens.shape()[2] != cfg.text_dim {
            return Err(Error::contract("text embedding width mismatch"));
        }

        // timestep embedding -> shared MLP
        let mut tsin = ArrayD::<f64>::zeros(IxDyn(&[batch, cfg.time_dim]));
        for (i, &k) in cond.steps.iter().enumerate() {
            let row = nn::sinusoidal_embedding(k, cfg.time_dim);
            for j in 0..cfg.time_dim {
                tsin[[i, j]] = row[[j]];
            }
        }
        let tsin = tape.constant(tsin);
        let t1 = nn::linear(tape, nodes, "bb.time.fc1", tsin);
        let t1 = tape.silu(t1);
        let temb = nn::linear(tape, nodes, "bb.time.fc2", t1);

        let text = tape.constant(cond.text_tokens.clone());

        let plans = cfg.plan();
        let mut x = tape.reshape(z, &[batch * cfg.frames, cfg.data_channels, cfg.height, cfg.width]);
        x = nn::conv2d(tape, nodes, "bb.conv_in", x, 1, 1);

        let mut skips: Vec<NodeId> = Vec::new();
        let mut captured = None;
        for (idx, plan) in plans.iter().enumerate() {
            if idx > 0 {
                let prev = &plans[idx - 1];
                if plan.scale > prev.scale {
                    skips.push(x);
                    x = nn::conv2d(tape, nodes, &format!("bb.down{}", plan.scale), x, 2, 1);
                } else if plan.scale < prev.scale {
                    let up = tape.upsample_nearest2x(x);
                    x = nn::conv2d(tape, nodes, &format!("bb.up{}", prev.scale), up, 1, 1);
                    let skip = skips.pop().expect("skip stack underflow");
                    x = tape.add(x, skip);
                }
            }
            let dims = LayerDims {
                batch,
                frames: cfg.frames,
                channels: plan.channels,
                height: plan.height,
                width: plan.width,
            };
            x = self.res_block(tape, nodes, plan.layer, x, temb, &dims);
            x = self.spatial_attention(tape, nodes, plan.layer, x, &dims);
            if cfg.ca_enabled {
                x = self.cross_attention(tape, nodes, plan.layer, x, text, &dims);
            }
            let mut tokens = self.temporal_attention(tape, nodes, plan.layer, x, &dims);
            if let Some(h) = hooks.as_deref_mut() {
                let replaced = h.apply(tape, plan.layer, tokens, &dims)?;
                if tape.value(replaced).shape() != tape.value(tokens).shape() {
                    return Err(Error::Contract(format!(
                        "hook at layer {} returned shape {:?}, expected {:?}",
                        plan.layer,
                        tape.value(replaced).shape(),
                        tape.value(tokens).shape()
                    )));
                }
                tokens = replaced;
            }
            if capture == Some(plan.layer) {
                captured = Some(tokens);
            }
            x = tokens_to_grid(tape, tokens, &dims);
        }

        let gn = nn::group_norm(tape, nodes, "bb.out.gn", x, cfg.groups);
        let act = tape.silu(gn);
        let out = nn::conv2d(tape, nodes, "bb.out.conv", act, 1, 1);
        let out5 = tape.reshape(out, &zshape);
        Ok((out5, captured))
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        layer: usize,
        x: NodeId,
        temb: NodeId,
        dims: &LayerDims,
    ) -> NodeId {
        let p = format!("bb.l{layer}.res");
        let h = nn::group_norm(tape, nodes, &format!("{p}.gn1"), x, self.cfg.groups);
        let h = tape.silu(h);
        let h = nn::conv2d(tape, nodes, &format!("{p}.conv1"), h, 1, 1);
        // add step conditioning per channel, broadcast over frames and space
        let t = nn::linear(tape, nodes, &format!("{p}.time"), temb); // [B, C]
        let t5 = tape.reshape(t, &[dims.batch, 1, dims.channels, 1, 1]);
        let h5 = tape.reshape(
            h,
            &[dims.batch, dims.frames, dims.channels, dims.height, dims.width],
        );
        let h5 = tape.add(h5, t5);
        let h = tape.reshape(
            h5,
            &[dims.batch * dims.frames, dims.channels, dims.height, dims.width],
        );
        let h = nn::group_norm(tape, nodes, &format!("{p}.gn2"), h, self.cfg.groups);
        let h = tape.silu(h);
        let h = nn::conv2d(tape, nodes, &format!("{p}.conv2"), h, 1, 1);
        tape.add(h, x)
    }

    fn attn_tokens(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        prefix: &str,
        q_tokens: NodeId,
        kv_tokens: NodeId,
    ) -> NodeId {
        let q = nn::linear(tape, nodes, &format!("{prefix}.wq"), q_tokens);
        let k = nn::linear(tape, nodes, &format!("{prefix}.wk"), kv_tokens);
        let v = nn::linear(tape, nodes, &format!("{prefix}.wv"), kv_tokens);
        let heads = self.cfg.heads;
        let out = if heads == 1 {
            nn::attention(tape, q, k, v)
        } else {
            let split = |tape: &mut Tape, t: NodeId| {
                let s = tape.value(t).shape().to_vec();
                let (n, l, c) = (s[0], s[1], s[2]);
                let r = tape.reshape(t, &[n, l, heads, c / heads]);
                let p = tape.permute(r, &[0, 2, 1, 3]);
                tape.reshape(p, &[n * heads, l, c / heads])
            };
            let (qs, ks, vs) = (split(tape, q), split(tape, k), split(tape, v));
            let o = nn::attention(tape, qs, ks, vs);
            let s = tape.value(q).shape().to_vec();
            let (n, l, c) = (s[0], s[1], s[2]);
            let r = tape.reshape(o, &[n, heads, l, c / heads]);
            let p = tape.permute(r, &[0, 2, 1, 3]);
            tape.reshape(p, &[n, l, c])
        };
        nn::linear(tape, nodes, &format!("{prefix}.wo"), out)
    }

    fn spatial_attention(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        layer: usize,
        x: NodeId,
        dims: &LayerDims,
    ) -> NodeId {
        let p = format!("bb.l{layer}.sa");
        let h = nn::group_norm(tape, nodes, &format!("{p}.gn"), x, self.cfg.groups);
        let flat = tape.reshape(h, &[dims.batch * dims.frames, dims.channels, dims.height * dims.width]);
        let tokens = tape.permute(flat, &[0, 2, 1]); // [BF, HW, C]
        let attn = self.attn_tokens(tape, nodes, &p, tokens, tokens);
        let back = tape.permute(attn, &[0, 2, 1]);
        let grid = tape.reshape(back, &[dims.batch * dims.frames, dims.channels, dims.height, dims.width]);
        tape.add(grid, x)
    }

    fn cross_attention(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        layer: usize,
        x: NodeId,
        text: NodeId,
        dims: &LayerDims,
    ) -> NodeId {
        let p = format!("bb.l{layer}.ca");
        let h = nn::group_norm(tape, nodes, &format!("{p}.gn"), x, self.cfg.groups);
        let flat = tape.reshape(h, &[dims.batch * dims.frames, dims.channels, dims.height * dims.width]);
        let tokens = tape.permute(flat, &[0, 2, 1]);
        // repeat each item's text rows across its frames
        let idx: Vec<usize> = (0..dims.batch)
            .flat_map(|b| std::iter::repeat_n(b, dims.frames))
            .collect();
        let text_rep = tape.index_select(text, 0, idx);
        let attn = self.attn_tokens(tape, nodes, &p, tokens, text_rep);
        let back = tape.permute(attn, &[0, 2, 1]);
        let grid = tape.reshape(back, &[dims.batch * dims.frames, dims.channels, dims.height, dims.width]);
        tape.add(grid, x)
    }

    /// Temporal attention: mixes only along the frame axis. Returns the
    /// post-TA representation in token layout `[B*h*w, F, C]`.
    fn temporal_attention(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        layer: usize,
        x: NodeId,
        dims: &LayerDims,
    ) -> NodeId {
        let p = format!("bb.l{layer}.ta");
        let h = nn::group_norm(tape, nodes, &format!("{p}.gn"), x, self.cfg.groups);
        let tokens_in = grid_to_tokens(tape, x, dims);
        let normed = grid_to_tokens(tape, h, dims);
        let attn = self.attn_tokens(tape, nodes, &p, normed, normed);
        tape.add(attn, tokens_in)
    }
}

/// `[B*F, C, h, w] -> [B*h*w, F, C]`.
pub fn grid_to_tokens(tape: &mut Tape, x: NodeId, dims: &LayerDims) -> NodeId {
    let r = tape.reshape(
        x,
        &[dims.batch, dims.frames, dims.channels, dims.height, dims.width],
    );
    let p = tape.permute(r, &[0, 3, 4, 1, 2]); // [B, h, w, F, C]
    tape.reshape(p, &[dims.batch * dims.height * dims.width, dims.frames, dims.channels])
}

/// Inverse of `grid_to_tokens`.
pub fn tokens_to_grid(tape: &mut Tape, tokens: NodeId, dims: &LayerDims) -> NodeId {
    let r = tape.reshape(
        tokens,
        &[dims.batch, dims.height, dims.width, dims.frames, dims.channels],
    );
    let p = tape.permute(r, &[0, 3, 4, 1, 2]); // [B, F, C, h, w]
    tape.reshape(p, &[dims.batch * dims.frames, dims.channels, dims.height, dims.width])
}
