//! Efficient temporal transformer.
//!
//! Each frame of a clip is embedded to a 1-D token, three independent
//! learnable positional encodings produce query-, key- and value-like token
//! sets, and a single attention step (no feed-forward sublayer, no decoder)
//! mixes information across frames:
//!
//! ```text
//! t̂ᵢ   = h(xᵢ)
//! Tʲ   = T̂ + PEʲ                  j ∈ {α, β, γ}
//! Z    = λ · Tᵅ (Tᵝ)ᵀ
//! A*   = h⁻¹( softmax_rows(Z) · Tᵞ )
//! ```
//!
//! The attention map `A*` has the shape of the input feature map and is added
//! to it residually.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_normal, normal_tensor, Bindings, ParamStore};
use crate::tensor::Tensor;

pub const EMBED_CONV_W: &str = "ett.embed.conv.weight";
pub const EMBED_CONV_B: &str = "ett.embed.conv.bias";
pub const EMBED_PROJ_W: &str = "ett.embed.proj.weight";
pub const EMBED_PROJ_B: &str = "ett.embed.proj.bias";
pub const PE_ALPHA: &str = "ett.pe.alpha";
pub const PE_BETA: &str = "ett.pe.beta";
pub const PE_GAMMA: &str = "ett.pe.gamma";
pub const LAMBDA: &str = "ett.lambda";
pub const INV_PROJ_W: &str = "ett.inverse.proj.weight";
pub const INV_PROJ_B: &str = "ett.inverse.proj.bias";
pub const INV_CONV_W: &str = "ett.inverse.conv.weight";
pub const INV_CONV_B: &str = "ett.inverse.conv.bias";

pub const PE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EttConfig {
    /// Token length `l`.
    pub hidden: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Intermediate channel count of the frame embedding and its inverse.
    pub embed_channels: usize,
}

impl EttConfig {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden,
            self.channels,
            self.height,
            self.width,
            self.frames,
            self.embed_channels,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("ETT dimensions must be positive: {self:?}")));
        }
        if self.hidden * 4 > self.frame_len() {
            return Err(Error::Config(format!(
                "hidden dimension {} exceeds C·H·W/4 = {}",
                self.hidden,
                self.frame_len() / 4
            )));
        }
        if self.hidden < self.frames {
            return Err(Error::Config(format!(
                "hidden dimension {} is smaller than the frame count {}",
                self.hidden, self.frames
            )));
        }
        Ok(())
    }

    fn embed_len(&self) -> usize {
        self.embed_channels * self.height * self.width
    }
}

/// Registers the ETT parameters in `store` with their initial values.
///
/// Convolution and projection weights are He-normal with zero biases, the
/// positional encodings are N(0, 0.02²) and λ starts at 1/√l.
pub fn init_params(cfg: &EttConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (c, ce, l, n) = (cfg.channels, cfg.embed_channels, cfg.hidden, cfg.frames);
    let el = cfg.embed_len();
    store.insert(EMBED_CONV_W, he_normal(&[ce, c, 1, 1], c, rng))?;
    store.insert(EMBED_CONV_B, Tensor::zeros(&[ce]))?;
    store.insert(EMBED_PROJ_W, normal_tensor(&[el, l], (1.0 / el as f64).sqrt(), rng))?;
    store.insert(EMBED_PROJ_B, Tensor::zeros(&[l]))?;
    store.insert(PE_ALPHA, normal_tensor(&[n, l], PE_INIT_STD, rng))?;
    store.insert(PE_BETA, normal_tensor(&[n, l], PE_INIT_STD, rng))?;
    store.insert(PE_GAMMA, normal_tensor(&[n, l], PE_INIT_STD, rng))?;
    store.insert(LAMBDA, Tensor::scalar(1.0 / (l as f64).sqrt()))?;
    store.insert(INV_PROJ_W, normal_tensor(&[l, el], (1.0 / l as f64).sqrt(), rng))?;
    store.insert(INV_PROJ_B, Tensor::zeros(&[el]))?;
    store.insert(INV_CONV_W, he_normal(&[c, ce, 1, 1], ce, rng))?;
    store.insert(INV_CONV_B, Tensor::zeros(&[c]))?;
    Ok(())
}

/// ETT parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct EttVars {
    pub cfg: EttConfig,
    pub embed_conv_w: Var,
    pub embed_conv_b: Var,
    pub embed_proj_w: Var,
    pub embed_proj_b: Var,
    pub pe_alpha: Var,
    pub pe_beta: Var,
    pub pe_gamma: Var,
    pub lambda: Var,
    pub inv_proj_w: Var,
    pub inv_proj_b: Var,
    pub inv_conv_w: Var,
    pub inv_conv_b: Var,
}

impl EttVars {
    pub fn from_bindings(cfg: EttConfig, b: &Bindings) -> Result<Self> {
        Ok(EttVars {
            cfg,
            embed_conv_w: b.var(EMBED_CONV_W)?,
            embed_conv_b: b.var(EMBED_CONV_B)?,
            embed_proj_w: b.var(EMBED_PROJ_W)?,
            embed_proj_b: b.var(EMBED_PROJ_B)?,
            pe_alpha: b.var(PE_ALPHA)?,
            pe_beta: b.var(PE_BETA)?,
            pe_gamma: b.var(PE_GAMMA)?,
            lambda: b.var(LAMBDA)?,
            inv_proj_w: b.var(INV_PROJ_W)?,
            inv_proj_b: b.var(INV_PROJ_B)?,
            inv_conv_w: b.var(INV_CONV_W)?,
            inv_conv_b: b.var(INV_CONV_B)?,
        })
    }
}

/// Frame embedding `h`: [M,C,H,W] → [M,l], one token per frame with shared weights.
pub fn embed_frames(g: &mut Graph, frames: Var, v: &EttVars) -> Result<Var> {
    let cfg = &v.cfg;
    let s = g.shape(frames).to_vec();
    if s.len() != 4 || s[1..] != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::dim(
            "embed_frames",
            &s,
            &[cfg.channels, cfg.height, cfg.width],
        ));
    }
    let m = s[0];
    let y = g.conv2d(frames, v.embed_conv_w, 1, 0)?;
    let y = g.bias_add(y, v.embed_conv_b)?;
    let y = g.reshape(y, &[m, cfg.embed_len()])?;
    let t = g.matmul(y, v.embed_proj_w)?;
    g.bias_add(t, v.embed_proj_b)
}

/// `Tʲ = T̂ + PEʲ`.
pub fn add_positional(g: &mut Graph, tokens: Var, pe: Var) -> Result<Var> {
    g.add(tokens, pe)
}

/// `Z = λ · Tᵅ (Tᵝ)ᵀ`, an N×N matrix.
pub fn relation_matrix(g: &mut Graph, t_alpha: Var, t_beta: Var, lambda: Var) -> Result<Var> {
    if g.shape(t_alpha) != g.shape(t_beta) {
        return Err(Error::dim("relation_matrix", g.shape(t_alpha), g.shape(t_beta)));
    }
    let kt = g.transpose(t_beta)?;
    let z = g.matmul(t_alpha, kt)?;
    g.scale(z, lambda)
}

/// Row-normalised attention weights `s(Z)` and the mixed tokens `s(Z)·Tᵞ`.
///
/// Row `i` of `s(Z)` is the distribution of output frame `i` over source frames.
pub fn attend(g: &mut Graph, z: Var, t_gamma: Var) -> Result<(Var, Var)> {
    let weights = g.softmax_rows(z)?;
    let mixed = g.matmul(weights, t_gamma)?;
    Ok((weights, mixed))
}

/// Inverse transform `h⁻¹`: [M,l] → [M,C,H,W].
pub fn inverse_transform(g: &mut Graph, tokens: Var, v: &EttVars) -> Result<Var> {
    let cfg = &v.cfg;
    let s = g.shape(tokens).to_vec();
    if s.len() != 2 || s[1] != cfg.hidden {
        return Err(Error::dim("inverse_transform", &s, &[cfg.hidden]));
    }
    let y = g.matmul(tokens, v.inv_proj_w)?;
    let y = g.bias_add(y, v.inv_proj_b)?;
    let y = g.reshape(y, &[s[0], cfg.embed_channels, cfg.height, cfg.width])?;
    let y = g.conv2d(y, v.inv_conv_w, 1, 0)?;
    g.bias_add(y, v.inv_conv_b)
}

/// `A* = h⁻¹(s(Z)·Tᵞ)` for one clip: [N,C,H,W].
pub fn attention_map(g: &mut Graph, z: Var, t_gamma: Var, v: &EttVars) -> Result<Var> {
    let (_, mixed) = attend(g, z, t_gamma)?;
    inverse_transform(g, mixed, v)
}

#[derive(Clone, Debug)]
pub struct EttOutput {
    /// `A* + X`, shaped like the input.
    pub augmented: Var,
    /// `A*`, shaped like the input.
    pub attention: Var,
    /// Per-clip `s(Z)` matrices, each N×N.
    pub weights: Vec<Var>,
    /// Per-clip relation matrices `Z`.
    pub relations: Vec<Var>,
}

/// Runs the single encoder layer over a [B,N,C,H,W] feature map.
///
/// Clips are independent; frames of all clips share the embedding and the
/// inverse transform.
pub fn ett_forward(g: &mut Graph, x: Var, v: &EttVars) -> Result<EttOutput> {
    let cfg = &v.cfg;
    let s = g.shape(x).to_vec();
    let expected = [cfg.frames, cfg.channels, cfg.height, cfg.width];
    if s.len() != 5 || s[1..] != expected {
        return Err(Error::dim("ett_forward", &s, &expected));
    }
    let (batch, n) = (s[0], cfg.frames);
    let frames = g.reshape(x, &[batch * n, cfg.channels, cfg.height, cfg.width])?;
    let tokens = embed_frames(g, frames, v)?;

    let mut mixed_all = Vec::with_capacity(batch);
    let mut weights = Vec::with_capacity(batch);
    let mut relations = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows: Vec<usize> = (b * n..(b + 1) * n).collect();
        let t_hat = g.index_select(tokens, 0, &rows)?;
        let t_alpha = add_positional(g, t_hat, v.pe_alpha)?;
        let t_beta = add_positional(g, t_hat, v.pe_beta)?;
        let t_gamma = add_positional(g, t_hat, v.pe_gamma)?;
        let z = relation_matrix(g, t_alpha, t_beta, v.lambda)?;
        let (w, mixed) = attend(g, z, t_gamma)?;
        relations.push(z);
        weights.push(w);
        mixed_all.push(mixed);
    }
    let mixed = g.concat(&mixed_all, 0)?;
    let a_star = inverse_transform(g, mixed, v)?;
    let attention = g.reshape(a_star, &s)?;
    let augmented = g.add(attention, x)?;
    Ok(EttOutput {
        augmented,
        attention,
        weights,
        relations,
    })
}
