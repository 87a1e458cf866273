//! Temporal-sequence self-supervision.
//!
//! Builds a binary pretext task from a feature map `X ∈ R^{B×N×C×H×W}`:
//! some clips have their frame axis reversed (label `Rev`), the rest keep
//! their order (label `Nor`), and a small classifier learns to tell them
//! apart. Three primitives compose into the four variants:
//!
//! | variant | composition | ρ | η |
//! |---------|-------------|---|---|
//! | AA      | G           | 1 | 1 |
//! | RA      | G∘K         | 1 | 0 |
//! | AR      | G∘H         | 0 | 1 |
//! | RR      | G∘H∘K       | 0 | 0 |
//!
//! where G reverses the frame axis, H keeps one random channel per clip and
//! K randomly selects which clips are reversed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_normal, normal_tensor, Bindings, ParamStore};
use crate::tensor::Tensor;

pub const HEAD_CONV_W: &str = "tss.head.conv.weight";
pub const HEAD_CONV_B: &str = "tss.head.conv.bias";
pub const HEAD_FC_W: &str = "tss.head.fc.weight";
pub const HEAD_FC_B: &str = "tss.head.fc.bias";

/// Feature channels of the self-supervision head's difference convolution.
pub const HEAD_CHANNELS: usize = 8;

const FRAME_AXIS: usize = 1;
const CHANNEL_AXIS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TssAlgorithm {
    /// All clips reversed, all channels.
    AA,
    /// One random clip reversed, all channels.
    RA,
    /// All clips reversed, one random channel each.
    AR,
    /// Each clip reversed with probability ½, one random channel each.
    RR,
}

impl TssAlgorithm {
    pub const ALL: [TssAlgorithm; 4] = [Self::AA, Self::RA, Self::AR, Self::RR];

    /// Maps the (ρ, η) switches to a variant. A switch at 0 keeps the
    /// corresponding random primitive (H for ρ, K for η) in the composition.
    pub fn dispatch(rho: u8, eta: u8) -> Result<Self> {
        match (rho, eta) {
            (1, 1) => Ok(Self::AA),
            (1, 0) => Ok(Self::RA),
            (0, 1) => Ok(Self::AR),
            (0, 0) => Ok(Self::RR),
            _ => Err(Error::Config(format!("rho and eta must be 0 or 1, got ({rho}, {eta})"))),
        }
    }

    pub fn rho(self) -> u8 {
        u8::from(!self.random_channel())
    }

    pub fn eta(self) -> u8 {
        u8::from(!self.random_batch())
    }

    /// Whether K (random clip selection) participates.
    pub fn random_batch(self) -> bool {
        matches!(self, Self::RA | Self::RR)
    }

    /// Whether H (random channel selection) participates.
    pub fn random_channel(self) -> bool {
        matches!(self, Self::AR | Self::RR)
    }

    pub fn composition(self) -> &'static str {
        match self {
            Self::AA => "G",
            Self::RA => "G∘K",
            Self::AR => "G∘H",
            Self::RR => "G∘H∘K",
        }
    }

    /// Channel count of the pseudo-labelled output for `channels` input channels.
    pub fn output_channels(self, channels: usize) -> usize {
        if self.random_channel() {
            1
        } else {
            channels
        }
    }
}

impl fmt::Display for TssAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::AA => "aa",
            Self::RA => "ra",
            Self::AR => "ar",
            Self::RR => "rr",
        };
        f.write_str(s)
    }
}

impl FromStr for TssAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aa" => Ok(Self::AA),
            "ra" => Ok(Self::RA),
            "ar" => Ok(Self::AR),
            "rr" => Ok(Self::RR),
            other => Err(Error::Config(format!("unknown TSS algorithm {other:?}"))),
        }
    }
}

/// Sequence-level pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeqLabel {
    Nor,
    Rev,
}

impl SeqLabel {
    pub fn class_index(self) -> usize {
        match self {
            SeqLabel::Nor => 0,
            SeqLabel::Rev => 1,
        }
    }
}

/// Seeded randomness for clip selection (K) and channel selection (H).
///
/// The two draw from separate ChaCha streams of the same seed, so the
/// sequence of one never depends on how much the other has consumed.
#[derive(Clone, Debug)]
pub struct TssRng {
    seed: u64,
    batch_rng: ChaCha8Rng,
    channel_rng: ChaCha8Rng,
    batch_draws: u64,
    channel_draws: u64,
}

impl TssRng {
    const BATCH_STREAM: u64 = 1;
    const CHANNEL_STREAM: u64 = 2;

    pub fn new(seed: u64) -> Self {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
        batch_rng.set_stream(Self::BATCH_STREAM);
        let mut channel_rng = ChaCha8Rng::seed_from_u64(seed);
        channel_rng.set_stream(Self::CHANNEL_STREAM);
        TssRng {
            seed,
            batch_rng,
            channel_rng,
            batch_draws: 0,
            channel_draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn batch_draws(&self) -> u64 {
        self.batch_draws
    }

    pub fn channel_draws(&self) -> u64 {
        self.channel_draws
    }

    fn coin(&mut self) -> bool {
        self.batch_draws += 1;
        self.batch_rng.gen_bool(0.5)
    }

    fn pick_batch(&mut self, batch: usize) -> usize {
        self.batch_draws += 1;
        self.batch_rng.gen_range(0..batch)
    }

    fn pick_channel(&mut self, channels: usize) -> usize {
        self.channel_draws += 1;
        self.channel_rng.gen_range(0..channels)
    }
}

/// What was done to one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSelection {
    /// `true` for S (reversed), `false` for NS.
    pub selected: bool,
    /// Kept channel, or `None` when every channel is kept.
    pub channel: Option<usize>,
}

impl BatchSelection {
    pub fn label(&self) -> SeqLabel {
        if self.selected {
            SeqLabel::Rev
        } else {
            SeqLabel::Nor
        }
    }
}

/// Draws the per-clip selections for one application of `alg`.
///
/// Draws are made in clip order so a given seed always yields the same plan.
pub fn plan(alg: TssAlgorithm, batch: usize, channels: usize, rng: &mut TssRng) -> Vec<BatchSelection> {
    let chosen = match alg {
        TssAlgorithm::RA => Some(rng.pick_batch(batch)),
        _ => None,
    };
    (0..batch)
        .map(|b| {
            let selected = match alg {
                TssAlgorithm::AA | TssAlgorithm::AR => true,
                TssAlgorithm::RA => chosen == Some(b),
                TssAlgorithm::RR => rng.coin(),
            };
            let channel = alg.random_channel().then(|| rng.pick_channel(channels));
            BatchSelection { selected, channel }
        })
        .collect()
}

/// Pseudo-labelled feature maps `Y` with their labels `G`.
#[derive(Clone, Debug)]
pub struct PseudoLabelBatch {
    /// [B, N, C', H, W]; clip `i` comes from input clip `order[i]`.
    pub y: Var,
    pub labels: Vec<SeqLabel>,
    pub order: Vec<usize>,
    pub selections: Vec<BatchSelection>,
}

impl PseudoLabelBatch {
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.class_index()).collect()
    }

    /// Positions of the NS clips followed by the S clips, i.e. the `[Y^NS, Y^S]` grouping.
    pub fn grouped(&self) -> Vec<usize> {
        let (mut ns, s): (Vec<usize>, Vec<usize>) =
            (0..self.labels.len()).partition(|&i| self.labels[i] == SeqLabel::Nor);
        ns.extend(s);
        ns
    }
}

fn check_input(g: &Graph, x: Var) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 5 {
        return Err(Error::dim("tss", s, &[0, 0, 0, 0, 0]));
    }
    if s[FRAME_AXIS] < 2 {
        return Err(Error::DegenerateInput(format!(
            "temporal reversal needs at least 2 frames, got {}",
            s[FRAME_AXIS]
        )));
    }
    Ok((s[0], s[CHANNEL_AXIS]))
}

/// Applies an explicit selection plan to `x` without consuming randomness.
pub fn apply_plan(g: &mut Graph, x: Var, selections: &[BatchSelection]) -> Result<PseudoLabelBatch> {
    let (batch, channels) = check_input(g, x)?;
    if selections.len() != batch {
        return Err(Error::dim("apply_plan", g.shape(x), &[selections.len()]));
    }
    let mut parts = Vec::with_capacity(batch);
    for (b, sel) in selections.iter().enumerate() {
        let mut clip = g.index_select(x, 0, &[b])?;
        if let Some(d) = sel.channel {
            if d >= channels {
                return Err(Error::Index {
                    op: "tss channel",
                    index: d,
                    bound: channels,
                });
            }
            clip = g.index_select(clip, CHANNEL_AXIS, &[d])?;
        }
        if sel.selected {
            clip = g.reverse_axis(clip, FRAME_AXIS)?;
        }
        parts.push(clip);
    }
    if let Some(w) = parts.windows(2).find(|w| g.shape(w[0]) != g.shape(w[1])) {
        return Err(Error::dim("apply_plan", g.shape(w[0]), g.shape(w[1])));
    }
    let y = g.concat(&parts, 0)?;
    Ok(PseudoLabelBatch {
        y,
        labels: selections.iter().map(BatchSelection::label).collect(),
        order: (0..batch).collect(),
        selections: selections.to_vec(),
    })
}

/// Random-batch random-channel reversal.
pub fn apply_rr(g: &mut Graph, x: Var, rng: &mut TssRng) -> Result<PseudoLabelBatch> {
    apply_variant(g, x, TssAlgorithm::RR, rng)
}

pub fn apply_variant(g: &mut Graph, x: Var, alg: TssAlgorithm, rng: &mut TssRng) -> Result<PseudoLabelBatch> {
    let (batch, channels) = check_input(g, x)?;
    let selections = plan(alg, batch, channels, rng);
    apply_plan(g, x, &selections)
}

// ── Self-supervision classifier ──────────────────────────────────────

/// Registers the NOR/REV classifier for inputs with `channels` channels and `frames` frames.
pub fn init_head_params(channels: usize, frames: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    if frames < 2 {
        return Err(Error::DegenerateInput("self-supervision head needs at least 2 frames".into()));
    }
    store.insert(HEAD_CONV_W, he_normal(&[HEAD_CHANNELS, channels, 3, 3], channels * 9, rng))?;
    store.insert(HEAD_CONV_B, Tensor::zeros(&[HEAD_CHANNELS]))?;
    store.insert(HEAD_FC_W, normal_tensor(&[HEAD_CHANNELS * (frames - 1), 2], 0.01, rng))?;
    store.insert(HEAD_FC_B, Tensor::zeros(&[2]))?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl HeadVars {
    pub fn from_bindings(b: &Bindings) -> Result<Self> {
        Ok(HeadVars {
            conv_w: b.var(HEAD_CONV_W)?,
            conv_b: b.var(HEAD_CONV_B)?,
            fc_w: b.var(HEAD_FC_W)?,
            fc_b: b.var(HEAD_FC_B)?,
        })
    }
}

/// NOR/REV logits [B,2] from [B,N,C',H,W].
///
/// Adjacent-frame differences → 3×3 conv → relu → global average pool, then
/// one dense layer over the concatenated per-difference features.
pub fn self_classifier_forward(g: &mut Graph, y: Var, head: &HeadVars) -> Result<Var> {
    let s = g.shape(y).to_vec();
    if s.len() != 5 {
        return Err(Error::dim("self_classifier", &s, &[0, 0, 0, 0, 0]));
    }
    let (batch, n, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if n < 2 {
        return Err(Error::DegenerateInput("self-supervision head needs at least 2 frames".into()));
    }
    let later: Vec<usize> = (1..n).collect();
    let earlier: Vec<usize> = (0..n - 1).collect();
    let next = g.index_select(y, FRAME_AXIS, &later)?;
    let prev = g.index_select(y, FRAME_AXIS, &earlier)?;
    let diff = g.sub(next, prev)?;
    let diff = g.reshape(diff, &[batch * (n - 1), c, h, w])?;
    let f = g.conv2d(diff, head.conv_w, 1, 1)?;
    let f = g.bias_add(f, head.conv_b)?;
    let f = g.relu(f)?;
    let f = g.global_avg_pool(f)?;
    let f = g.reshape(f, &[batch, (n - 1) * HEAD_CHANNELS])?;
    let logits = g.matmul(f, head.fc_w)?;
    g.bias_add(logits, head.fc_b)
}
