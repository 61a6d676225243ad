//! Training-only causal token blocks.
//!
//! CTS (causal-prone token selection) adapts a layer's noisy tokens onto the
//! frozen-encoder token grid, fuses tokenized driver gaze through a
//! Gumbel-softmax gate, scores tokens with a small MLP head, and keeps the
//! top quarter per frame as causal candidates. CTG (causal token grounding)
//! runs at the end layer: it intervenes on background tokens by masking a
//! quarter of them to noise and classifies causal vs background token sets
//! against the accident-reason answer candidates with cross-modal attention.
//!
//! Both blocks hang off backbone injection points during stage-2 training
//! and are absent at inference; their re-entry projection is
//! zero-initialized so attaching them does not move the model.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{grid_to_tokens, tokens_to_grid, LayerDims, LayerHook};
use crate::error::{Error, Result};
use crate::nn::{self, ParamNodes, ParamStore};
use crate::rng::{rand_uniform, randn, rng_from};
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CausalConfig {
    /// Token count per frame on the common grid (n_V == n_G, perfect square).
    pub n_tokens: usize,
    /// Channel width of the common token space (C_V == C_G == C_Q == C_A).
    pub token_dim: usize,
    /// Hidden width of the two-layer channel-reduction in the gated fusion.
    pub fuse_hidden: usize,
    /// Hidden width of the two-layer token scoring head.
    pub score_hidden: usize,
    pub temperature: f64,
    /// Gumbel noise on the gate; off reduces to a plain softmax.
    pub gumbel_noise: bool,
    pub intervention_fraction: f64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            n_tokens: 64,
            token_dim: 16,
            fuse_hidden: 16,
            score_hidden: 8,
            temperature: 1.0,
            gumbel_noise: true,
            intervention_fraction: 0.25,
        }
    }
}

impl CausalConfig {
    pub fn grid_side(&self) -> Result<usize> {
        let side = (self.n_tokens as f64).sqrt() as usize;
        if side * side != self.n_tokens {
            return Err(Error::config(format!("n_tokens {} is not a perfect square", self.n_tokens)));
        }
        Ok(side)
    }

    pub fn selected_per_frame(&self) -> usize {
        self.n_tokens / 4
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_side()?;
        if self.n_tokens < 4 {
            return Err(Error::config("n_tokens must be at least 4"));
        }
        if !(0.0 < self.intervention_fraction && self.intervention_fraction < 1.0) {
            return Err(Error::config(format!(
                "intervention fraction {} outside (0, 1)",
                self.intervention_fraction
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("gate temperature must be positive"));
        }
        Ok(())
    }
}

// ---- attachment layout -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Cts,
    Ctg,
}

/// Which layers carry which blocks, plus the gaze toggle. The end layer's
/// grounding block always includes the gate-conditioned selection stage that
/// feeds it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookLayout {
    pub attachments: Vec<(usize, BlockKind)>,
    pub gaze_enabled: bool,
}

impl HookLayout {
    pub fn cts_layers(&self) -> Vec<usize> {
        self.attachments
            .iter()
            .filter(|(_, k)| *k == BlockKind::Cts)
            .map(|(l, _)| *l)
            .collect()
    }

    pub fn ctg_layer(&self) -> Option<usize> {
        self.attachments
            .iter()
            .find(|(_, k)| *k == BlockKind::Ctg)
            .map(|(l, _)| *l)
    }

    /// Layers whose selection stage runs (all CTS layers plus the CTG layer).
    pub fn selection_layers(&self) -> Vec<usize> {
        let mut ls = self.cts_layers();
        if let Some(l) = self.ctg_layer() {
            if !ls.contains(&l) {
                ls.push(l);
            }
        }
        ls.sort_unstable();
        ls
    }

    pub fn is_empty(&self) -> bool {
        self.attachments.is_empty()
    }
}

pub const HOOK_PRESETS: [&str; 6] =
    ["full", "no_gaze", "no_cts_ctg", "downscale_off", "upscale_off", "ctg_only"];

/// Named ablation presets over a backbone with `layers` total layers.
pub fn preset_layout(name: &str, layers: usize) -> Result<HookLayout> {
    if layers < 1 {
        return Err(Error::config("backbone needs layers to attach blocks"));
    }
    let end = layers;
    let inner: Vec<usize> = (1..end).collect();
    let down: Vec<usize> = (1..=layers / 2).collect();
    let up_inner: Vec<usize> = (layers / 2 + 1..end).collect();
    let make = |cts: Vec<usize>, gaze: bool| {
        let mut attachments: Vec<(usize, BlockKind)> =
            cts.into_iter().map(|l| (l, BlockKind::Cts)).collect();
        attachments.push((end, BlockKind::Ctg));
        HookLayout { attachments, gaze_enabled: gaze }
    };
    match name {
        "full" => Ok(make(inner, true)),
        "no_gaze" => Ok(make(inner, false)),
        "no_cts_ctg" => Ok(HookLayout { attachments: vec![], gaze_enabled: false }),
        "downscale_off" => Ok(make(up_inner, true)),
        "upscale_off" => Ok(make(down, true)),
        "ctg_only" => Ok(make(vec![], true)),
        other => Err(Error::config(format!(
            "unknown hooks preset '{other}' (expected one of {HOOK_PRESETS:?})"
        ))),
    }
}

// ---- parameters ---------------------------------------------------------------------

/// Register one selection block's parameters for a layer with `channels`.
pub fn init_cts_params(
    store: &mut ParamStore,
    layer: usize,
    channels: usize,
    cfg: &CausalConfig,
    rng: &mut impl Rng,
) {
    let p = format!("cts.l{layer}");
    nn::init_conv2d(store, &format!("{p}.adapt"), channels, cfg.token_dim, 1, rng, false);
    nn::init_linear(store, &format!("{p}.fuse.c1"), 2 * cfg.token_dim, cfg.fuse_hidden, rng, false);
    nn::init_linear(store, &format!("{p}.fuse.c2"), cfg.fuse_hidden, cfg.token_dim, rng, false);
    nn::init_linear(store, &format!("{p}.score.fc1"), cfg.token_dim, cfg.score_hidden, rng, false);
    nn::init_linear(store, &format!("{p}.score.fc2"), cfg.score_hidden, 1, rng, false);
    // zero-initialized re-entry keeps attachment neutral at step zero
    nn::init_conv2d(store, &format!("{p}.inv"), cfg.token_dim, channels, 1, rng, true);
}

pub fn init_ctg_params(store: &mut ParamStore, cfg: &CausalConfig, rng: &mut impl Rng) {
    let c = cfg.token_dim;
    nn::init_linear(store, "ctg.ca.wq", c, c, rng, false);
    nn::init_linear(store, "ctg.ca.wk", c, c, rng, false);
    nn::init_linear(store, "ctg.ca.wv", c, c, rng, false);
    nn::init_linear(store, "ctg.ca.wo", c, c, rng, false);
}

/// Parameters for every attached block given the backbone's layer plan.
pub fn init_causal_params(
    layout: &HookLayout,
    plans: &[crate::backbone::LayerPlan],
    cfg: &CausalConfig,
    seed: u64,
) -> ParamStore {
    let mut store = ParamStore::new();
    let rng = &mut rng_from(seed, &[0xc7_5]);
    for layer in layout.selection_layers() {
        let channels = plans[layer - 1].channels;
        init_cts_params(&mut store, layer, channels, cfg, rng);
    }
    if layout.ctg_layer().is_some() {
        init_ctg_params(&mut store, cfg, rng);
    }
    store
}

// ---- operations -----------------------------------------------------------------------

/// Resize a layer's post-TA tokens onto the common token grid and project
/// channels: bilinear interpolation then a 1x1 convolution.
/// `tokens: [B*h*w, F, C_l] -> [B*n_V, F, C_V]`.
pub fn sampling_adaptor(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    tokens: NodeId,
    dims: &LayerDims,
    cfg: &CausalConfig,
) -> Result<NodeId> {
    let side = cfg.grid_side()?;
    let grid = tokens_to_grid(tape, tokens, dims); // [B*F, C_l, h, w]
    let resized = tape.bilinear2d(grid, side, side);
    let projected = nn::conv2d(tape, nodes, &format!("{prefix}.adapt"), resized, 1, 0);
    let adapted_dims = LayerDims {
        batch: dims.batch,
        frames: dims.frames,
        channels: cfg.token_dim,
        height: side,
        width: side,
    };
    Ok(grid_to_tokens(tape, projected, &adapted_dims)) // [B*n_V, F, C_V]
}

/// Gumbel-softmax over `axis`. With noise disabled this is a plain softmax
/// of `logits / temperature`; an infinite temperature yields the uniform
/// distribution along the axis.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: NodeId,
    axis: usize,
    temperature: f64,
    noise: Option<&ArrayD<f64>>,
) -> NodeId {
    let x = match noise {
        Some(g) => {
            let gn = tape.constant(g.clone());
            tape.add(logits, gn)
        }
        None => logits,
    };
    let scaled = if temperature.is_finite() {
        tape.scale(x, 1.0 / temperature)
    } else {
        tape.scale(x, 0.0)
    };
    tape.softmax(scaled, axis)
}

/// Draw standard Gumbel noise for a gate of the given shape.
pub fn gumbel_noise(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    rand_uniform(rng, shape).mapv(|u| -(-(u.max(1e-12)).ln()).ln())
}

/// Gate vision tokens by gaze: concatenate along channels, reduce through
/// two pointwise layers with a rectifier, normalize over the token axis with
/// a Gumbel-softmax, and scale the vision tokens elementwise.
///
/// `z_v, z_g: [B*n, F, C]`. Returns `(gated [B*n, F, C], gate [B, n, F, C])`.
pub fn gated_fusion(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    z_v: NodeId,
    z_g: NodeId,
    batch: usize,
    cfg: &CausalConfig,
    noise: Option<&ArrayD<f64>>,
) -> Result<(NodeId, NodeId)> {
    let (sv, sg) = (tape.value(z_v).shape().to_vec(), tape.value(z_g).shape().to_vec());
    if sv != sg {
        return Err(Error::Contract(format!(
            "gated_fusion: vision tokens {sv:?} vs gaze tokens {sg:?}"
        )));
    }
    if sv[0] != batch * cfg.n_tokens || sv[2] != cfg.token_dim {
        return Err(Error::Contract(format!(
            "gated_fusion: tokens {sv:?} do not match n_tokens {} / dim {}",
            cfg.n_tokens, cfg.token_dim
        )));
    }
    let frames = sv[1];
    let cat = tape.concat(&[z_v, z_g], 2);
    let h = nn::linear(tape, nodes, &format!("{prefix}.fuse.c1"), cat);
    let h = tape.relu(h);
    let logits = nn::linear(tape, nodes, &format!("{prefix}.fuse.c2"), h);
    let logits4 = tape.reshape(logits, &[batch, cfg.n_tokens, frames, cfg.token_dim]);
    let gate = gumbel_softmax(tape, logits4, 1, cfg.temperature, noise);
    let zv4 = tape.reshape(z_v, &[batch, cfg.n_tokens, frames, cfg.token_dim]);
    let gated4 = tape.mul(zv4, gate);
    let gated = tape.reshape(gated4, &[batch * cfg.n_tokens, frames, cfg.token_dim]);
    Ok((gated, gate))
}

/// Per-(item, frame) split of token indices into causal (top-d score) and
/// background sets, ties broken toward the lower index. Index lists are kept
/// ascending so recombination restores the original order exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    pub d: usize,
    pub n_tokens: usize,
    /// `[batch][frame] -> ascending token indices`
    pub causal: Vec<Vec<Vec<usize>>>,
    pub background: Vec<Vec<Vec<usize>>>,
}

/// Build the split from a score tensor `[B, n, F]`.
pub fn selection_plan_from_scores(scores: &ArrayD<f64>, d: usize) -> SelectionPlan {
    let (b, n, f) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let mut causal = vec![vec![Vec::new(); f]; b];
    let mut background = vec![vec![Vec::new(); f]; b];
    for bi in 0..b {
        for fi in 0..f {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| {
                scores[[bi, j, fi]]
                    .total_cmp(&scores[[bi, i, fi]])
                    .then(i.cmp(&j))
            });
            let mut sel: Vec<usize> = order[..d].to_vec();
            let mut rest: Vec<usize> = order[d..].to_vec();
            sel.sort_unstable();
            rest.sort_unstable();
            causal[bi][fi] = sel;
            background[bi][fi] = rest;
        }
    }
    SelectionPlan { d, n_tokens: n, causal, background }
}

/// Score fused tokens with the two-layer MLP head, softmax over the token
/// axis per frame, and select the top quarter per frame.
///
/// The head reads a detached view of the tokens: its parameters learn
/// through the straight-through coupling and the grounding path, while the
/// gradients of everything upstream stay exact (finite-difference-true).
///
/// `fused: [B, n, F, C]`. Returns the score node `[B, n, F]` and the plan.
pub fn select_causal_tokens(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    fused: NodeId,
    cfg: &CausalConfig,
) -> Result<(NodeId, SelectionPlan)> {
    let s = tape.value(fused).shape().to_vec();
    if s.len() != 4 || s[1] != cfg.n_tokens || s[3] != cfg.token_dim {
        return Err(Error::Contract(format!("select_causal_tokens: bad shape {s:?}")));
    }
    let detached = {
        let v = tape.value(fused).clone();
        tape.constant(v)
    };
    let h = nn::linear(tape, nodes, &format!("{prefix}.score.fc1"), detached);
    let h = tape.silu(h);
    let raw = nn::linear(tape, nodes, &format!("{prefix}.score.fc2"), h); // [B, n, F, 1]
    let raw3 = tape.reshape(raw, &[s[0], s[1], s[2]]);
    let scores = tape.softmax(raw3, 1);
    let plan = selection_plan_from_scores(tape.value(scores), cfg.selected_per_frame());
    Ok((scores, plan))
}

/// Straight-through coupling of token values to their selection scores:
/// the multiplier is exactly 1 (so values and the recombination identity are
/// bitwise unchanged) while gradients flow into the score head.
pub fn score_straight_through(tape: &mut Tape, tokens: NodeId, scores: NodeId) -> NodeId {
    let sv = tape.value(scores).clone();
    let shape = sv.shape().to_vec();
    let denom = tape.constant(sv);
    let ratio = tape.div(scores, denom);
    let r4 = tape.reshape(ratio, &[shape[0], shape[1], shape[2], 1]);
    tape.mul(tokens, r4)
}

fn flat_indices(plan_part: &[Vec<Vec<usize>>], n: usize, frames: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (b, per_frame) in plan_part.iter().enumerate() {
        for (f, idxs) in per_frame.iter().enumerate().take(frames) {
            for &t in idxs {
                out.push((b * frames + f) * n + t);
            }
        }
    }
    out
}

/// Gather the causal and background token subsets.
/// `tokens: [B, n, F, C] -> ([B, F, d, C], [B, F, n-d, C])`.
pub fn gather_split(
    tape: &mut Tape,
    tokens: NodeId,
    plan: &SelectionPlan,
) -> (NodeId, NodeId) {
    let s = tape.value(tokens).shape().to_vec();
    let (b, n, f, c) = (s[0], s[1], s[2], s[3]);
    let bf = tape.permute(tokens, &[0, 2, 1, 3]); // [B, F, n, C]
    let flat = tape.reshape(bf, &[b * f * n, c]);
    let ci = flat_indices(&plan.causal, n, f);
    let bi = flat_indices(&plan.background, n, f);
    let causal = tape.index_select(flat, 0, ci);
    let background = tape.index_select(flat, 0, bi);
    let causal = tape.reshape(causal, &[b, f, plan.d, c]);
    let background = tape.reshape(background, &[b, f, n - plan.d, c]);
    (causal, background)
}

/// Scatter the two subsets back into original token order (bitwise inverse
/// of `gather_split`). Returns `[B, n, F, C]`.
pub fn recombine(
    tape: &mut Tape,
    causal: NodeId,
    background: NodeId,
    plan: &SelectionPlan,
) -> NodeId {
    let cs = tape.value(causal).shape().to_vec();
    let (b, f, d, c) = (cs[0], cs[1], cs[2], cs[3]);
    let n = plan.n_tokens;
    let m = n - d;
    let cflat = tape.reshape(causal, &[b * f * d, c]);
    let bflat = tape.reshape(background, &[b * f * m, c]);
    let cat = tape.concat(&[cflat, bflat], 0);
    // inverse permutation: original flat position -> row in [causal; background]
    let mut inverse = vec![0usize; b * f * n];
    for bi in 0..b {
        for fi in 0..f {
            for (rank, &t) in plan.causal[bi][fi].iter().enumerate() {
                inverse[(bi * f + fi) * n + t] = (bi * f + fi) * d + rank;
            }
            for (rank, &t) in plan.background[bi][fi].iter().enumerate() {
                inverse[(bi * f + fi) * n + t] = b * f * d + (bi * f + fi) * m + rank;
            }
        }
    }
    let restored = tape.index_select(cat, 0, inverse);
    let bfnc = tape.reshape(restored, &[b, f, n, c]);
    tape.permute(bfnc, &[0, 2, 1, 3])
}

/// Mask positions per (item, frame) for the background-token intervention:
/// exactly `floor(fraction * m)` positions are zeroed in the mask.
pub fn intervention_mask(
    rng: &mut impl Rng,
    b: usize,
    f: usize,
    m: usize,
    fraction: f64,
) -> Result<ArrayD<f64>> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::config(format!("intervention fraction {fraction} outside (0, 1)")));
    }
    let k = (fraction * m as f64).floor() as usize;
    let mut mask = ArrayD::<f64>::ones(IxDyn(&[b, f, m, 1]));
    for bi in 0..b {
        for fi in 0..f {
            // partial Fisher-Yates: first k entries are a uniform subset
            let mut idx: Vec<usize> = (0..m).collect();
            for i in 0..k {
                let j = i + (rng.random::<f64>() * (m - i) as f64) as usize;
                idx.swap(i, j.min(m - 1));
            }
            for &t in &idx[..k] {
                mask[[bi, fi, t, 0]] = 0.0;
            }
        }
    }
    Ok(mask)
}

/// Replace a random quarter (by default) of background token positions per
/// frame with fresh standard-normal draws; all other tokens pass through
/// bitwise. `bg: [B, F, m, C]`.
pub fn token_intervention(
    bg: &ArrayD<f64>,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<ArrayD<f64>> {
    let s = bg.shape().to_vec();
    if s.len() != 4 || s[2] == 0 {
        return Err(Error::contract("token_intervention expects nonempty [B, F, m, C] tokens"));
    }
    let mask = intervention_mask(rng, s[0], s[1], s[2], fraction)?;
    let noise = randn(rng, &s);
    let mut out = bg.clone();
    for bi in 0..s[0] {
        for fi in 0..s[1] {
            for t in 0..s[2] {
                if mask[[bi, fi, t, 0]] == 0.0 {
                    for c in 0..s[3] {
                        out[[bi, fi, t, c]] = noise[[bi, fi, t, c]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable intervention: kept positions carry gradient, replaced
/// positions are constants.
pub fn token_intervention_node(
    tape: &mut Tape,
    bg: NodeId,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let s = tape.value(bg).shape().to_vec();
    if s.len() != 4 || s[2] == 0 {
        return Err(Error::contract("token_intervention expects nonempty [B, F, m, C] tokens"));
    }
    let mask = intervention_mask(rng, s[0], s[1], s[2], fraction)?;
    let noise = randn(rng, &s);
    let inv_mask = mask.mapv(|v| 1.0 - v);
    let mask_n = tape.constant(mask);
    let inv_n = tape.constant(inv_mask);
    let noise_n = tape.constant(noise);
    let kept = tape.mul(bg, mask_n);
    let injected = tape.mul(noise_n, inv_n);
    Ok(tape.add(kept, injected))
}

/// Cross-modal answer scoring: question tokens attend over the token set,
/// the attended output is mean-pooled and dotted (scaled) with each
/// mean-pooled answer embedding.
///
/// `tokens: [B, S, C]`, `z_q: [B, L_Q, C]`, `answers: [B, 5, L_A, C]`.
/// Returns logits `[B, 5]`.
pub fn answer_logits(
    tape: &mut Tape,
    nodes: &ParamNodes,
    tokens: NodeId,
    z_q: NodeId,
    answers: NodeId,
) -> Result<NodeId> {
    let ts = tape.value(tokens).shape().to_vec();
    if ts.len() != 3 || ts[1] == 0 {
        return Err(Error::contract("answer_logits: empty token set"));
    }
    let c = ts[2];
    let q = nn::linear(tape, nodes, "ctg.ca.wq", z_q);
    let k = nn::linear(tape, nodes, "ctg.ca.wk", tokens);
    let v = nn::linear(tape, nodes, "ctg.ca.wv", tokens);
    let attended = nn::attention(tape, q, k, v);
    let o = nn::linear(tape, nodes, "ctg.ca.wo", attended); // [B, L_Q, C]
    let pooled = tape.mean_axis(o, 1); // [B, 1, C]
    let ashape = tape.value(answers).shape().to_vec();
    let (b, na) = (ashape[0], ashape[1]);
    let a_pool = tape.mean_axis(answers, 2); // [B, 5, 1, C]
    let a_pool = tape.reshape(a_pool, &[b, na, c]);
    let u = tape.reshape(pooled, &[b, c, 1]);
    let logits = tape.bmm(a_pool, u); // [B, 5, 1]
    let logits = tape.reshape(logits, &[b, na]);
    Ok(tape.scale(logits, 1.0 / (c as f64).sqrt()))
}

// ---- grounding losses ---------------------------------------------------------------

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Grounding loss over one item's answer logits:
/// cross-entropy of the causal logits against the correct answer, cross-
/// entropy of the background logits against the uniform distribution over
/// the four irrelevant answers, plus KL(clean background || intervened).
pub fn loss_ara(
    causal_logits: &[f64],
    bg_logits: &[f64],
    bg_do_logits: &[f64],
    correct_index: usize,
) -> Result<f64> {
    if causal_logits.len() != 5 || bg_logits.len() != 5 || bg_do_logits.len() != 5 {
        return Err(Error::contract("answer logits must have length 5"));
    }
    if correct_index >= 5 {
        return Err(Error::contract("correct answer index outside 0..5"));
    }
    let pc = softmax_vec(causal_logits);
    let pb = softmax_vec(bg_logits);
    let pdo = softmax_vec(bg_do_logits);
    let xe_c = -pc[correct_index].ln();
    let xe_b: f64 = (0..5)
        .filter(|&x| x != correct_index)
        .map(|x| -0.25 * pb[x].ln())
        .sum();
    // 0 * ln(0 / q) contributes nothing
    let kld: f64 = (0..5)
        .filter(|&x| pb[x] > 0.0)
        .map(|x| pb[x] * (pb[x].ln() - pdo[x].ln()))
        .sum();
    Ok(xe_c + xe_b + kld)
}

/// Batched tape version of [`loss_ara`]; logits nodes are `[B, 5]`,
/// averaged over the batch. Returns `(total, xe_c, xe_b, kld)`.
pub fn loss_ara_node(
    tape: &mut Tape,
    causal_logits: NodeId,
    bg_logits: NodeId,
    bg_do_logits: NodeId,
    correct_index: usize,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let lc = tape.log_softmax(causal_logits, 1);
    let correct = tape.slice_axis(lc, 1, correct_index, 1);
    let m = tape.mean_all(correct);
    let xe_c = tape.scale(m, -1.0);

    let lb = tape.log_softmax(bg_logits, 1);
    let mut wrong_parts = Vec::new();
    for x in 0..5 {
        if x != correct_index {
            wrong_parts.push(tape.slice_axis(lb, 1, x, 1));
        }
    }
    let wrong = tape.concat(&wrong_parts, 1); // [B, 4]
    let wrong_sum = tape.sum_axis(wrong, 1);
    let wm = tape.mean_all(wrong_sum);
    let xe_b = tape.scale(wm, -0.25);

    let ldo = tape.log_softmax(bg_do_logits, 1);
    let pb = tape.exp(lb);
    let diff = tape.sub(lb, ldo);
    let terms = tape.mul(pb, diff);
    let row = tape.sum_axis(terms, 1);
    let kld = tape.mean_all(row);

    let a = tape.add(xe_c, xe_b);
    let total = tape.add(a, kld);
    (total, xe_c, xe_b, kld)
}

/// Stage-2 total: reconstruction plus weighted grounding.
pub fn loss_st2(e: &ArrayD<f64>, e_hat: &ArrayD<f64>, ara_loss: f64, gamma: f64) -> Result<f64> {
    Ok(crate::diffusion::loss_mse(e, e_hat)? + gamma * ara_loss)
}

// ---- the hook -----------------------------------------------------------------------

/// Everything the end-layer grounding stage produced for one forward pass.
pub struct TokenBundle {
    pub d: usize,
    /// Adapted tokens (values) `[B, n, F, C]`.
    pub adapted: ArrayD<f64>,
    /// Gate-fused tokens (values) `[B, n, F, C]`.
    pub fused: ArrayD<f64>,
    /// Gate weights (values) `[B, n, F, C]`; sums to 1 over the token axis.
    pub gate: ArrayD<f64>,
    pub scores: ArrayD<f64>,
    pub plan: SelectionPlan,
    pub causal_node: NodeId,
    pub background_node: NodeId,
}

/// Stage-2 hook carrying CTS blocks on configured layers and the CTG
/// grounding stage at the end layer. Holds the per-step parameter node map
/// so it can wire its own blocks on the caller's tape.
pub struct CausalHooks<'r> {
    pub layout: HookLayout,
    pub cfg: CausalConfig,
    nodes: ParamNodes,
    /// Frozen vision tokens `[B*n, F, C]`.
    pub z_v: ArrayD<f64>,
    /// Gaze tokens `[B*n, F, C]`; replaced by zeros when gaze is disabled.
    pub z_g: ArrayD<f64>,
    pub batch: usize,
    pub rng: &'r mut ChaCha8Rng,
    /// Filled when the end layer runs; consumed by the grounding loss.
    pub end_bundle: Option<TokenBundle>,
}

impl<'r> CausalHooks<'r> {
    pub fn new(
        layout: HookLayout,
        cfg: CausalConfig,
        nodes: ParamNodes,
        z_v: ArrayD<f64>,
        z_g: ArrayD<f64>,
        batch: usize,
        rng: &'r mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let expect = [batch * cfg.n_tokens, z_v.shape()[1], cfg.token_dim];
        if z_v.shape() != expect || z_g.shape() != expect {
            return Err(Error::Contract(format!(
                "causal hooks: token shapes {:?}/{:?} do not match {:?}",
                z_v.shape(),
                z_g.shape(),
                expect
            )));
        }
        Ok(CausalHooks { layout, cfg, nodes, z_v, z_g, batch, rng, end_bundle: None })
    }
}

impl LayerHook for CausalHooks<'_> {
    fn apply(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        tokens: NodeId,
        dims: &LayerDims,
    ) -> Result<NodeId> {
        let runs_selection = self.layout.selection_layers().contains(&layer);
        if !runs_selection {
            return Ok(tokens);
        }
        let prefix = format!("cts.l{layer}");
        let nodes = self.nodes.clone();
        let adapted = sampling_adaptor(tape, &nodes, &prefix, tokens, dims, &self.cfg)?;

        let zv = tape.constant(self.z_v.clone());
        let zg = tape.constant(self.z_g.clone());
        let frames = dims.frames;
        let noise = if self.cfg.gumbel_noise {
            Some(gumbel_noise(
                self.rng,
                &[self.batch, self.cfg.n_tokens, frames, self.cfg.token_dim],
            ))
        } else {
            None
        };
        let (gated, gate) =
            gated_fusion(tape, &nodes, &prefix, zv, zg, self.batch, &self.cfg, noise.as_ref())?;

        let shape4 = [self.batch, self.cfg.n_tokens, frames, self.cfg.token_dim];
        let adapted4 = tape.reshape(adapted, &shape4);
        let gated4 = tape.reshape(gated, &shape4);
        let fused4 = tape.add(adapted4, gated4);

        let (scores, plan) = select_causal_tokens(tape, &nodes, &prefix, fused4, &self.cfg)?;
        let coupled = score_straight_through(tape, fused4, scores);
        let (causal, background) = gather_split(tape, coupled, &plan);
        let combined = recombine(tape, causal, background, &plan);

        if self.layout.ctg_layer() == Some(layer) {
            self.end_bundle = Some(TokenBundle {
                d: plan.d,
                adapted: tape.value(adapted4).clone(),
                fused: tape.value(fused4).clone(),
                gate: tape.value(gate).clone(),
                scores: tape.value(scores).clone(),
                plan: plan.clone(),
                causal_node: causal,
                background_node: background,
            });
        }

        // re-enter the backbone at the layer's own shape
        let side = self.cfg.grid_side()?;
        let comb_tokens = tape.permute(combined, &[0, 2, 1, 3]); // [B, F, n, C]
        let comb_flat = tape.reshape(
            comb_tokens,
            &[self.batch * frames, side, side, self.cfg.token_dim],
        );
        let comb_grid = tape.permute(comb_flat, &[0, 3, 1, 2]); // [B*F, C, side, side]
        let back = tape.bilinear2d(comb_grid, dims.height, dims.width);
        let delta = nn::conv2d(tape, &nodes, &format!("{prefix}.inv"), back, 1, 0);
        let delta_tokens = grid_to_tokens(tape, delta, dims);
        Ok(tape.add(tokens, delta_tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use indexmap::IndexMap;

    fn small_cfg() -> CausalConfig {
        CausalConfig {
            n_tokens: 16,
            token_dim: 6,
            fuse_hidden: 8,
            score_hidden: 4,
            temperature: 1.0,
            gumbel_noise: false,
            intervention_fraction: 0.25,
        }
    }

    fn cts_store(layer: usize, channels: usize, cfg: &CausalConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_cts_params(&mut store, layer, channels, cfg, &mut rng_from(seed, &[1]));
        store
    }

    #[test]
    fn presets_cover_expected_layers() {
        let full = preset_layout("full", 4).unwrap();
        assert_eq!(full.cts_layers(), vec![1, 2, 3]);
        assert_eq!(full.ctg_layer(), Some(4));
        assert!(full.gaze_enabled);
        assert_eq!(full.selection_layers(), vec![1, 2, 3, 4]);

        let ng = preset_layout("no_gaze", 4).unwrap();
        assert!(!ng.gaze_enabled);
        assert_eq!(ng.attachments, full.attachments);

        assert!(preset_layout("no_cts_ctg", 4).unwrap().is_empty());
        assert_eq!(preset_layout("downscale_off", 4).unwrap().cts_layers(), vec![3]);
        assert_eq!(preset_layout("upscale_off", 4).unwrap().cts_layers(), vec![1, 2]);
        assert_eq!(preset_layout("ctg_only", 4).unwrap().cts_layers(), Vec::<usize>::new());
        assert_eq!(preset_layout("ctg_only", 4).unwrap().selection_layers(), vec![4]);
        assert!(preset_layout("bogus", 4).is_err());
    }

    #[test]
    fn adaptor_identity_when_grid_and_channels_match() {
        let cfg = small_cfg(); // grid side 4
        let mut store = cts_store(1, 6, &cfg, 3);
        // identity 1x1 conv on shared channels
        let w = store.get_mut("cts.l1.adapt.w").unwrap();
        *w = ArrayD::zeros(IxDyn(&[6, 6, 1, 1]));
        for c in 0..6 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let dims = LayerDims { batch: 2, frames: 3, channels: 6, height: 4, width: 4 };
        let x = crate::rng::randn(&mut rng_from(3, &[2]), &[2 * 16, 3, 6]);
        let xi = tape.constant(x.clone());
        let out = sampling_adaptor(&mut tape, &nodes, "cts.l1", xi, &dims, &cfg).unwrap();
        let diff = (tape.value(out) - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn bilinear_upsample_matches_hand_table() {
        // 2x2 -> 4x4 with half-pixel centers, clamped edges; the expected
        // table is computed here by an independent direct loop.
        let corner = [[1.0, 0.0], [0.0, 0.0]];
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 2, 2]));
        for (i, row) in corner.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                x[[0, 0, i, j]] = v;
            }
        }
        let mut expected = [[0.0f64; 4]; 4];
        let coord = |o: usize| (((o as f64 + 0.5) * 0.5) - 0.5).clamp(0.0, 1.0);
        for (oy, row) in expected.iter_mut().enumerate() {
            for (ox, cell) in row.iter_mut().enumerate() {
                let (sy, sx) = (coord(oy), coord(ox));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
                *cell = (1.0 - wy) * (1.0 - wx) * corner[y0][x0]
                    + (1.0 - wy) * wx * corner[y0][x1]
                    + wy * (1.0 - wx) * corner[y1][x0]
                    + wy * wx * corner[y1][x1];
            }
        }
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let out = tape.bilinear2d(xi, 4, 4);
        for oy in 0..4 {
            for ox in 0..4 {
                let got = tape.value(out)[[0, 0, oy, ox]];
                assert!(
                    (got - expected[oy][ox]).abs() < 1e-12,
                    "({oy}, {ox}): {got} vs {}",
                    expected[oy][ox]
                );
            }
        }
    }

    #[test]
    fn gated_fusion_contracts() {
        let cfg = small_cfg();
        let store = cts_store(1, 6, &cfg, 5);
        let mut rng = rng_from(5, &[7]);
        let zv = crate::rng::randn(&mut rng, &[2 * 16, 3, 6]);
        let zg = crate::rng::randn(&mut rng, &[2 * 16, 3, 6]);

        // uniform gate in the infinite-temperature limit: gate = 1/n
        let mut cfg_inf = cfg.clone();
        cfg_inf.temperature = f64::INFINITY;
        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let zvi = tape.constant(zv.clone());
        let zgi = tape.constant(zg.clone());
        let (gated, gate) =
            gated_fusion(&mut tape, &nodes, "cts.l1", zvi, zgi, 2, &cfg_inf, None).unwrap();
        let n = cfg.n_tokens as f64;
        let gv = tape.value(gated);
        for (g, v) in gv.iter().zip(zv.iter()) {
            assert!((g - v / n).abs() < 1e-12);
        }
        // gate entries in [0,1], sums to 1 over the token axis
        let gt = tape.value(gate);
        assert!(gt.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for b in 0..2 {
            for f in 0..3 {
                for c in 0..6 {
                    let sum: f64 = (0..16).map(|t| gt[[b, t, f, c]]).sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }

        // finite temperature, no noise: matches direct softmax oracle and contracts tokens
        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let zvi = tape.constant(zv.clone());
        let zgi = tape.constant(zg.clone());
        let (gated, gate) =
            gated_fusion(&mut tape, &nodes, "cts.l1", zvi, zgi, 2, &cfg, None).unwrap();
        let gv = tape.value(gated).clone();
        for (g, v) in gv.iter().zip(zv.iter()) {
            assert!(g.abs() <= v.abs() + 1e-15, "no contraction: |{g}| > |{v}|");
        }
        // oracle: softmax over tokens of the conv stack output, computed directly
        let w1 = store.get("cts.l1.fuse.c1.w").unwrap();
        let b1 = store.get("cts.l1.fuse.c1.b").unwrap();
        let w2 = store.get("cts.l1.fuse.c2.w").unwrap();
        let b2 = store.get("cts.l1.fuse.c2.b").unwrap();
        let gate_v = tape.value(gate);
        for b in 0..2usize {
            for f in 0..3usize {
                for c in 0..6usize {
                    // compute logits for all tokens at (b, f, c)
                    let mut logits = Vec::new();
                    for t in 0..16usize {
                        let row = b * 16 + t;
                        let mut hidden = vec![0.0f64; 8];
                        for (j, h) in hidden.iter_mut().enumerate() {
                            let mut acc = b1[[j]];
                            for i in 0..6 {
                                acc += zv[[row, f, i]] * w1[[i, j]];
                                acc += zg[[row, f, i]] * w1[[6 + i, j]];
                            }
                            *h = acc.max(0.0);
                        }
                        let mut out = b2[[c]];
                        for (j, h) in hidden.iter().enumerate() {
                            out += h * w2[[j, c]];
                        }
                        logits.push(out);
                    }
                    let probs = softmax_vec(&logits);
                    for (t, p) in probs.iter().enumerate() {
                        assert!(
                            (gate_v[[b, t, f, c]] - p).abs() < 1e-6,
                            "gate mismatch at b{b} t{t} f{f} c{c}"
                        );
                    }
                }
            }
        }

        // token-count mismatch is a contract violation
        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let zvi = tape.constant(zv.clone());
        let bad = tape.constant(crate::rng::randn(&mut rng, &[2 * 16, 3, 5]));
        assert!(matches!(
            gated_fusion(&mut tape, &nodes, "cts.l1", zvi, bad, 2, &cfg, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn selection_quarter_and_sort_oracle() {
        assert_eq!(
            CausalConfig { n_tokens: 256, ..small_cfg() }.selected_per_frame(),
            64
        );
        // strictly increasing scores select the top quarter of indices
        let mut scores = ArrayD::<f64>::zeros(IxDyn(&[1, 16, 2]));
        for t in 0..16 {
            for f in 0..2 {
                scores[[0, t, f]] = t as f64;
            }
        }
        let plan = selection_plan_from_scores(&scores, 4);
        assert_eq!(plan.causal[0][0], vec![12, 13, 14, 15]);
        assert_eq!(plan.background[0][0].len(), 12);

        // ties break toward the lower index
        let mut tied = ArrayD::<f64>::zeros(IxDyn(&[1, 8, 1]));
        for t in 0..8 {
            tied[[0, t, 0]] = 1.0;
        }
        let plan = selection_plan_from_scores(&tied, 2);
        assert_eq!(plan.causal[0][0], vec![0, 1]);

        // random scores match a full-sort oracle
        let mut rng = rng_from(11, &[0]);
        let scores = crate::rng::randn(&mut rng, &[3, 16, 4]);
        let plan = selection_plan_from_scores(&scores, 4);
        for b in 0..3 {
            for f in 0..4 {
                let mut all: Vec<(f64, usize)> =
                    (0..16).map(|t| (scores[[b, t, f]], t)).collect();
                all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut expect: Vec<usize> = all[..4].iter().map(|&(_, t)| t).collect();
                expect.sort_unstable();
                assert_eq!(plan.causal[b][f], expect);
                // min selected score >= max unselected score
                let min_sel = plan.causal[b][f]
                    .iter()
                    .map(|&t| scores[[b, t, f]])
                    .fold(f64::INFINITY, f64::min);
                let max_un = plan.background[b][f]
                    .iter()
                    .map(|&t| scores[[b, t, f]])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(min_sel >= max_un);
            }
        }
    }

    #[test]
    fn split_recombine_is_bitwise_identity() {
        let mut rng = rng_from(13, &[0]);
        let tokens = crate::rng::randn(&mut rng, &[2, 16, 3, 6]);
        let scores = crate::rng::randn(&mut rng, &[2, 16, 3]);
        let plan = selection_plan_from_scores(&scores, 4);
        let mut tape = Tape::new();
        let ti = tape.constant(tokens.clone());
        let (c, b) = gather_split(&mut tape, ti, &plan);
        assert_eq!(tape.value(c).shape(), &[2, 3, 4, 6]);
        assert_eq!(tape.value(b).shape(), &[2, 3, 12, 6]);
        let back = recombine(&mut tape, c, b, &plan);
        assert_eq!(tape.value(back), &tokens);
    }

    #[test]
    fn intervention_cardinality_and_moments() {
        let mut rng = rng_from(17, &[0]);
        let bg = crate::rng::randn(&mut rng, &[2, 3, 12, 4]);
        let out = token_intervention(&bg, 0.25, &mut rng).unwrap();
        for b in 0..2 {
            for f in 0..3 {
                let changed = (0..12)
                    .filter(|&t| (0..4).any(|c| out[[b, f, t, c]] != bg[[b, f, t, c]]))
                    .count();
                assert_eq!(changed, 3); // floor(0.25 * 12)
            }
        }
        // tiny set: floor(0.25 * 3) = 0 -> identical output
        let tiny = crate::rng::randn(&mut rng, &[1, 2, 3, 4]);
        let out = token_intervention(&tiny, 0.25, &mut rng).unwrap();
        assert_eq!(out, tiny);
        // fraction outside (0,1) is a config error
        assert!(matches!(token_intervention(&bg, 1.5, &mut rng), Err(Error::Config(_))));

        // replaced values are standard normal: moments over many trials
        let zeros = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 8, 2]));
        let mut acc = Vec::new();
        for _ in 0..10_000 / 4 {
            let out = token_intervention(&zeros, 0.25, &mut rng).unwrap();
            for v in out.iter().filter(|v| **v != 0.0) {
                acc.push(*v);
            }
        }
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    fn ctg_store(cfg: &CausalConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_ctg_params(&mut store, cfg, &mut rng_from(seed, &[2]));
        store
    }

    #[test]
    fn answer_logits_symmetry_and_alignment() {
        let cfg = small_cfg();
        let store = ctg_store(&cfg, 7);
        let mut rng = rng_from(7, &[3]);
        let tokens = crate::rng::randn(&mut rng, &[1, 5, 6]);
        let zq = crate::rng::randn(&mut rng, &[1, 3, 6]);

        // all five answers identical -> equal logits -> uniform softmax
        let one = crate::rng::randn(&mut rng, &[1, 1, 4, 6]);
        let mut answers = ArrayD::<f64>::zeros(IxDyn(&[1, 5, 4, 6]));
        for x in 0..5 {
            for l in 0..4 {
                for c in 0..6 {
                    answers[[0, x, l, c]] = one[[0, 0, l, c]];
                }
            }
        }
        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let ti = tape.constant(tokens.clone());
        let qi = tape.constant(zq.clone());
        let ai = tape.constant(answers);
        let logits = answer_logits(&mut tape, &nodes, ti, qi, ai).unwrap();
        let v = tape.value(logits);
        for x in 1..5 {
            assert!((v[[0, x]] - v[[0, 0]]).abs() < 1e-12);
        }

        // empty token set is a contract violation
        let mut tape2 = Tape::new();
        let nodes2 = store.leaf_all(&mut tape2);
        let empty = tape2.constant(ArrayD::zeros(IxDyn(&[1, 0, 6])));
        let qi2 = tape2.constant(zq.clone());
        let ai2 = tape2.constant(ArrayD::zeros(IxDyn(&[1, 5, 4, 6])));
        assert!(matches!(
            answer_logits(&mut tape2, &nodes2, empty, qi2, ai2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn answer_logits_aligned_answer_wins() {
        // with identity CA params, the pooled output is the mean token; an
        // answer equal to it beats orthogonal answers
        let cfg = CausalConfig { token_dim: 4, ..small_cfg() };
        let mut store = ParamStore::new();
        init_ctg_params(&mut store, &cfg, &mut rng_from(8, &[2]));
        for name in ["ctg.ca.wq.w", "ctg.ca.wk.w", "ctg.ca.wv.w", "ctg.ca.wo.w"] {
            let w = store.get_mut(name).unwrap();
            *w = ArrayD::zeros(IxDyn(&[4, 4]));
            for i in 0..4 {
                w[[i, i]] = 1.0;
            }
        }
        // single token: attention output equals that token exactly
        let token = [1.0, 0.0, 0.0, 0.0];
        let mut tokens = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 4]));
        for (c, &t) in token.iter().enumerate() {
            tokens[[0, 0, c]] = t;
        }
        let zq = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 4]));
        let mut answers = ArrayD::<f64>::zeros(IxDyn(&[1, 5, 1, 4]));
        answers[[0, 2, 0, 0]] = 1.0; // answer 2 aligned with the pooled output
        answers[[0, 0, 0, 1]] = 1.0; // others orthogonal
        answers[[0, 1, 0, 2]] = 1.0;
        answers[[0, 3, 0, 3]] = 1.0;
        answers[[0, 4, 0, 1]] = -1.0;
        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let ti = tape.constant(tokens);
        let qi = tape.constant(zq);
        let ai = tape.constant(answers);
        let logits = answer_logits(&mut tape, &nodes, ti, qi, ai).unwrap();
        let v = tape.value(logits);
        for x in [0usize, 1, 3, 4] {
            assert!(v[[0, 2]] > v[[0, x]], "aligned answer not maximal");
        }
    }

    #[test]
    fn answer_logits_match_loop_reference_on_three_tokens() {
        let cfg = small_cfg();
        let store = ctg_store(&cfg, 9);
        let mut rng = rng_from(9, &[4]);
        let tokens = crate::rng::randn(&mut rng, &[1, 3, 6]);
        let zq = crate::rng::randn(&mut rng, &[1, 2, 6]);
        let answers = crate::rng::randn(&mut rng, &[1, 5, 4, 6]);

        let mut tape = Tape::new();
        let nodes = store.leaf_all(&mut tape);
        let ti = tape.constant(tokens.clone());
        let qi = tape.constant(zq.clone());
        let ai = tape.constant(answers.clone());
        let logits = answer_logits(&mut tape, &nodes, ti, qi, ai).unwrap();

        // independent loop-based attention reference
        let getw = |n: &str| store.get(n).unwrap().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let getb = |n: &str| store.get(n).unwrap().clone();
        let (wq, bq) = (getw("ctg.ca.wq.w"), getb("ctg.ca.wq.b"));
        let (wk, bk) = (getw("ctg.ca.wk.w"), getb("ctg.ca.wk.b"));
        let (wv, bv) = (getw("ctg.ca.wv.w"), getb("ctg.ca.wv.b"));
        let (wo, bo) = (getw("ctg.ca.wo.w"), getb("ctg.ca.wo.b"));
        let proj = |x: &[f64], w: &ndarray::Array2<f64>, b: &ArrayD<f64>| {
            let mut out = vec![0.0f64; 6];
            for (j, o) in out.iter_mut().enumerate() {
                *o = b[[j]] + (0..6).map(|i| x[i] * w[[i, j]]).sum::<f64>();
            }
            out
        };
        let mut pooled = vec![0.0f64; 6];
        for qrow in 0..2 {
            let qx: Vec<f64> = (0..6).map(|c| zq[[0, qrow, c]]).collect();
            let q = proj(&qx, &wq, &bq);
            let mut weights = Vec::new();
            for trow in 0..3 {
                let tx: Vec<f64> = (0..6).map(|c| tokens[[0, trow, c]]).collect();
                let k = proj(&tx, &wk, &bk);
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                weights.push(dot / 6.0f64.sqrt());
            }
            let probs = softmax_vec(&weights);
            let mut attended = vec![0.0f64; 6];
            for (trow, p) in probs.iter().enumerate() {
                let tx: Vec<f64> = (0..6).map(|c| tokens[[0, trow, c]]).collect();
                let v = proj(&tx, &wv, &bv);
                for (a, vv) in attended.iter_mut().zip(&v) {
                    *a += p * vv;
                }
            }
            let o = proj(&attended, &wo, &bo);
            for (p, ov) in pooled.iter_mut().zip(&o) {
                *p += ov / 2.0;
            }
        }
        for x in 0..5 {
            let mut apool = vec![0.0f64; 6];
            for l in 0..4 {
                for c in 0..6 {
                    apool[c] += answers[[0, x, l, c]] / 4.0;
                }
            }
            let expect: f64 =
                pooled.iter().zip(&apool).map(|(a, b)| a * b).sum::<f64>() / 6.0f64.sqrt();
            let got = tape.value(logits)[[0, x]];
            assert!((got - expect).abs() < 1e-6, "answer {x}: {got} vs {expect}");
        }
    }

    #[test]
    fn ara_loss_floor_and_identities() {
        // causal one-hot, background uniform over wrong answers, no shift:
        // loss = 0 + ln 4 + 0
        let big = 1e6;
        let causal = [big, 0.0, 0.0, 0.0, 0.0];
        let bg = [-big, 0.0, 0.0, 0.0, 0.0];
        let v = loss_ara(&causal, &bg, &bg, 0).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-6, "{v} vs ln4");

        // KLD term is zero when intervened logits equal clean logits
        let mut rng = rng_from(21, &[0]);
        let l: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let l2: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let same = loss_ara(&l2, &l, &l, 0).unwrap();
        let pc = softmax_vec(&l2);
        let pb = softmax_vec(&l);
        let by_hand: f64 =
            -pc[0].ln() + (1..5).map(|x| -0.25 * pb[x].ln()).sum::<f64>();
        assert!((same - by_hand).abs() < 1e-12);

        // compositional: equals hand-built sum of three scalar references
        let a: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 3.0).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 3.0).collect();
        let c: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 3.0).collect();
        let total = loss_ara(&a, &b, &c, 0).unwrap();
        let pa = softmax_vec(&a);
        let pb = softmax_vec(&b);
        let pcdo = softmax_vec(&c);
        let xe_c = -pa[0].ln();
        let xe_b: f64 = (1..5).map(|x| -0.25 * pb[x].ln()).sum();
        let kld: f64 = (0..5).map(|x| pb[x] * (pb[x].ln() - pcdo[x].ln())).sum();
        assert!((total - (xe_c + xe_b + kld)).abs() < 1e-8);

        // node version agrees with the scalar version
        let mut tape = Tape::new();
        let an = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), a.clone()).unwrap());
        let bn = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), b.clone()).unwrap());
        let cn = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), c.clone()).unwrap());
        let (tn, _, _, _) = loss_ara_node(&mut tape, an, bn, cn, 0);
        assert!((tape.scalar_value(tn) - total).abs() < 1e-12);
    }

    #[test]
    fn kld_nonnegative_on_random_simplex_draws() {
        let mut rng = rng_from(23, &[0]);
        for _ in 0..200 {
            let a: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let p = softmax_vec(&a);
            let q = softmax_vec(&b);
            let kld: f64 = (0..5).map(|x| p[x] * (p[x].ln() - q[x].ln())).sum();
            assert!(kld >= -1e-12, "kld {kld}");
        }
    }

    #[test]
    fn loss_st2_composition() {
        let mut rng = rng_from(29, &[0]);
        let e = crate::rng::randn(&mut rng, &[2, 4]);
        let eh = crate::rng::randn(&mut rng, &[2, 4]);
        let ara = 1.7;
        let v = loss_st2(&e, &eh, ara, 0.3).unwrap();
        let by_hand = crate::diffusion::loss_mse(&e, &eh).unwrap() + 0.3 * ara;
        assert!((v - by_hand).abs() < 1e-15);
        assert_eq!(loss_st2(&e, &eh, 0.0, 0.3).unwrap(), crate::diffusion::loss_mse(&e, &eh).unwrap());
        assert_eq!(loss_st2(&e, &eh, ara, 0.0).unwrap(), crate::diffusion::loss_mse(&e, &eh).unwrap());
    }

    #[test]
    fn causal_params_cover_layout() {
        let cfg = small_cfg();
        let layout = preset_layout("full", 4).unwrap();
        let bb_cfg = crate::backbone::BackboneConfig {
            layers: 4,
            frames: 3,
            height: 8,
            width: 8,
            data_channels: 3,
            widths: vec![4, 8],
            text_dim: 6,
            time_dim: 8,
            groups: 2,
            heads: 1,
            ca_enabled: true,
        };
        let store = init_causal_params(&layout, &bb_cfg.plan(), &cfg, 3);
        let names: Vec<&String> = store.names().collect();
        for l in 1..=4 {
            assert!(names.iter().any(|n| n.starts_with(&format!("cts.l{l}."))));
        }
        assert!(names.iter().any(|n| n.starts_with("ctg.ca.")));
        let _unused: IndexMap<String, usize> = IndexMap::new();
    }
}
