//! Backbone, action classifier and the two training losses.
//!
//! Data flow for a clip batch `[B,N,3,H,W]`:
//!
//! ```text
//! backbone ─► X ─┬─► ETT ─► A* + X ─► mean over N ─► GAP ─► dense ─► action logits
//!                └─► TSS ─► Y, G ─► self-supervision head ─► NOR/REV logits   (training only)
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ett::{self, EttConfig, EttOutput, EttVars};
use crate::graph::{Graph, Var};
use crate::params::{he_normal, normal_tensor, Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::tss::{self, HeadVars, PseudoLabelBatch, TssAlgorithm, TssRng};

pub const CONV1_W: &str = "backbone.conv1.weight";
pub const CONV1_B: &str = "backbone.conv1.bias";
pub const CONV2_W: &str = "backbone.conv2.weight";
pub const CONV2_B: &str = "backbone.conv2.bias";
pub const ACTION_W: &str = "action.fc.weight";
pub const ACTION_B: &str = "action.fc.bias";

/// Backbone convolutions: 4×4 kernels, stride 2, padding 1 (halves H and W).
pub const BACKBONE_KERNEL: usize = 4;
pub const BACKBONE_STRIDE: usize = 2;
pub const BACKBONE_PADDING: usize = 1;

const HEAD_INIT_STD: f64 = 1.0;

// Independent ChaCha streams per parameter group, so enabling or disabling
// one component never changes another component's initial weights.
const STREAM_BACKBONE: u64 = 10;
const STREAM_ETT: u64 = 11;
const STREAM_ACTION: u64 = 12;
const STREAM_TSS_HEAD: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Backbone output channels `C_f`.
    pub backbone_channels: usize,
    /// ETT token length `l`.
    pub hidden: usize,
    /// ETT embedding channels `C_e`.
    pub embed_channels: usize,
    /// Without ETT the action head sees the temporal mean of the raw features.
    pub use_ett: bool,
    /// Self-supervision variant; `None` disables the pretext task entirely.
    pub tss: Option<TssAlgorithm>,
}

impl ModelConfig {
    pub fn feature_shape(&self) -> [usize; 3] {
        [self.backbone_channels, self.height / 4, self.width / 4]
    }

    pub fn ett_config(&self) -> EttConfig {
        let [c, h, w] = self.feature_shape();
        EttConfig {
            hidden: self.hidden,
            channels: c,
            height: h,
            width: w,
            frames: self.frames,
            embed_channels: self.embed_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.frames, self.in_channels, self.classes, self.backbone_channels]
            .contains(&0)
        {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 action classes".into()));
        }
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.use_ett {
            self.ett_config().validate()?;
        }
        if self.tss.is_some() && self.frames < 2 {
            return Err(Error::DegenerateInput("temporal reversal needs at least 2 frames".into()));
        }
        Ok(())
    }
}

/// Trainable model plus an instrumentation counter of self-supervision calls.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    tss_invocations: AtomicU64,
}

fn group_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (cin, cf) = (config.in_channels, config.backbone_channels);
        let k = BACKBONE_KERNEL;

        let mut rng = group_rng(seed, STREAM_BACKBONE);
        params.insert(CONV1_W, he_normal(&[cf, cin, k, k], cin * k * k, &mut rng))?;
        params.insert(CONV1_B, Tensor::zeros(&[cf]))?;
        params.insert(CONV2_W, he_normal(&[cf, cf, k, k], cf * k * k, &mut rng))?;
        params.insert(CONV2_B, Tensor::zeros(&[cf]))?;

        if config.use_ett {
            ett::init_params(&config.ett_config(), &mut params, &mut group_rng(seed, STREAM_ETT))?;
        }

        let mut rng = group_rng(seed, STREAM_ACTION);
        params.insert(ACTION_W, normal_tensor(&[cf, config.classes], HEAD_INIT_STD, &mut rng))?;
        params.insert(ACTION_B, Tensor::zeros(&[config.classes]))?;

        if let Some(alg) = config.tss {
            tss::init_head_params(
                alg.output_channels(cf),
                config.frames,
                &mut params,
                &mut group_rng(seed, STREAM_TSS_HEAD),
            )?;
        }
        Ok(Model {
            config,
            params,
            tss_invocations: AtomicU64::new(0),
        })
    }

    /// Number of times the self-supervision transform has run on this model.
    pub fn tss_invocations(&self) -> u64 {
        self.tss_invocations.load(Ordering::Relaxed)
    }

    pub fn lambda(&self) -> Option<f64> {
        self.params.value(ett::LAMBDA).ok().map(Tensor::item)
    }

    pub fn bind(&self, g: &mut Graph) -> Result<(Bindings, ModelVars)> {
        let b = self.params.bind(g);
        let vars = ModelVars {
            backbone: BackboneVars {
                conv1_w: b.var(CONV1_W)?,
                conv1_b: b.var(CONV1_B)?,
                conv2_w: b.var(CONV2_W)?,
                conv2_b: b.var(CONV2_B)?,
            },
            ett: if self.config.use_ett {
                Some(EttVars::from_bindings(self.config.ett_config(), &b)?)
            } else {
                None
            },
            action_w: b.var(ACTION_W)?,
            action_b: b.var(ACTION_B)?,
            tss_head: if self.config.tss.is_some() {
                Some(HeadVars::from_bindings(&b)?)
            } else {
                None
            },
        };
        Ok((b, vars))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub ett: Option<EttVars>,
    pub action_w: Var,
    pub action_b: Var,
    pub tss_head: Option<HeadVars>,
}

/// Per-frame two-stage CNN: [B,N,C_in,H,W] → [B,N,C_f,H/4,W/4].
pub fn backbone_forward(g: &mut Graph, clips: Var, v: &BackboneVars) -> Result<Var> {
    let s = g.shape(clips).to_vec();
    if s.len() != 5 {
        return Err(Error::dim("backbone_forward", &s, &[0, 0, 0, 0, 0]));
    }
    let (b, n) = (s[0], s[1]);
    let frames = g.reshape(clips, &[b * n, s[2], s[3], s[4]])?;
    let mut y = frames;
    for (w, bias) in [(v.conv1_w, v.conv1_b), (v.conv2_w, v.conv2_b)] {
        y = g.conv2d(y, w, BACKBONE_STRIDE, BACKBONE_PADDING)?;
        y = g.bias_add(y, bias)?;
        y = g.relu(y)?;
    }
    let out = g.shape(y).to_vec();
    g.reshape(y, &[b, n, out[1], out[2], out[3]])
}

#[derive(Clone, Debug)]
pub struct ActionOutput {
    pub logits: Var,
    pub ett: Option<EttOutput>,
}

/// Action logits [B,classes]: optional ETT residual, temporal mean, global pool, dense.
pub fn action_logits(g: &mut Graph, features: Var, vars: &ModelVars) -> Result<ActionOutput> {
    let (mixed, ett_out) = match &vars.ett {
        Some(ev) => {
            let out = ett::ett_forward(g, features, ev)?;
            (out.augmented, Some(out))
        }
        None => (features, None),
    };
    let pooled = g.mean_axis(mixed, 1)?;
    let pooled = g.global_avg_pool(pooled)?;
    let s = g.shape(pooled).to_vec();
    let flat = g.reshape(pooled, &[s[0], s[1]])?;
    let logits = g.matmul(flat, vars.action_w)?;
    let logits = g.bias_add(logits, vars.action_b)?;
    Ok(ActionOutput {
        logits,
        ett: ett_out,
    })
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ActionLoss {
    pub loss: Var,
    pub correct: usize,
    pub output: ActionOutput,
}

/// Cross-entropy of the action head against `labels`, plus the top-1 hit count.
pub fn action_loss(g: &mut Graph, features: Var, vars: &ModelVars, labels: &[usize]) -> Result<ActionLoss> {
    let output = action_logits(g, features, vars)?;
    let predictions = argmax_rows(g.value(output.logits));
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let loss = g.cross_entropy(output.logits, labels)?;
    Ok(ActionLoss {
        loss,
        correct,
        output,
    })
}

#[derive(Clone, Debug)]
pub struct SelfLoss {
    pub loss: Var,
    pub pseudo: PseudoLabelBatch,
    pub logits: Var,
}

/// Self-supervised NOR/REV loss on the backbone features. Action labels are not used.
pub fn self_loss(
    g: &mut Graph,
    model: &Model,
    features: Var,
    vars: &ModelVars,
    rng: &mut TssRng,
) -> Result<SelfLoss> {
    let (Some(alg), Some(head)) = (model.config.tss, vars.tss_head.as_ref()) else {
        return Err(Error::Config("self-supervision is disabled for this model".into()));
    };
    model.tss_invocations.fetch_add(1, Ordering::Relaxed);
    let pseudo = tss::apply_variant(g, features, alg, rng)?;
    let logits = tss::self_classifier_forward(g, pseudo.y, head)?;
    let loss = g.cross_entropy(logits, &pseudo.class_indices())?;
    Ok(SelfLoss {
        loss,
        pseudo,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            frames: 4,
            in_channels: 3,
            height: 16,
            width: 16,
            classes: 4,
            backbone_channels: 4,
            hidden: 8,
            embed_channels: 2,
            use_ett: true,
            tss: Some(TssAlgorithm::RR),
        }
    }

    #[test]
    fn backbone_shapes() {
        let cfg = ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            backbone_channels: 8,
            hidden: 64,
            embed_channels: 4,
            ..toy_config()
        };
        let model = Model::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g).unwrap();
        let x = g.constant(random_tensor(&[2, 8, 3, 32, 32], 1));
        let f = backbone_forward(&mut g, x, &vars.backbone).unwrap();
        assert_eq!(g.shape(f), &[2, 8, 8, 8, 8]);
    }

    #[test]
    fn backbone_shares_weights_across_frames() {
        let model = Model::new(toy_config(), 0).unwrap();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g).unwrap();
        let frame = g.constant(random_tensor(&[1, 1, 3, 16, 16], 2));
        let clip = g.index_select(frame, 1, &[0, 0, 0, 0]).unwrap();
        let f = backbone_forward(&mut g, clip, &vars.backbone).unwrap();
        let t = g.value(f);
        let len = t.numel() / 4;
        for k in 1..4 {
            assert_eq!(&t.data()[k * len..(k + 1) * len], &t.data()[..len]);
        }
    }

    #[test]
    fn init_streams_are_isolated() {
        let a = Model::new(toy_config(), 5).unwrap();
        let b = Model::new(
            ModelConfig {
                tss: None,
                ..toy_config()
            },
            5,
        )
        .unwrap();
        for p in b.params.iter() {
            assert_eq!(&p.value, a.params.value(&p.name).unwrap(), "{}", p.name);
        }
        assert!(a.params.contains(tss::HEAD_FC_W));
        assert!(!b.params.contains(tss::HEAD_FC_W));
    }

    #[test]
    fn untrained_losses_are_near_chance() {
        let model = Model::new(toy_config(), 3).unwrap();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g).unwrap();
        let x = g.constant(random_tensor(&[8, 4, 3, 16, 16], 4).map_unit());
        let f = backbone_forward(&mut g, x, &vars.backbone).unwrap();
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let action = action_loss(&mut g, f, &vars, &labels).unwrap();
        assert!((g.value(action.loss).item() - 4f64.ln()).abs() < 0.15);

        let mut rng = TssRng::new(0);
        let s = self_loss(&mut g, &model, f, &vars, &mut rng).unwrap();
        assert!((g.value(s.loss).item() - 2f64.ln()).abs() < 0.2);
        assert_eq!(model.tss_invocations(), 1);
    }

    #[test]
    fn zero_attention_path_still_differentiable() {
        let mut model = Model::new(toy_config(), 3).unwrap();
        model.params.set(ett::LAMBDA, Tensor::scalar(0.0)).unwrap();
        let inv = model.params.value(ett::INV_PROJ_W).unwrap().shape().to_vec();
        model.params.set(ett::INV_PROJ_W, Tensor::zeros(&inv)).unwrap();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g).unwrap();
        let x = g.constant(random_tensor(&[2, 4, 3, 16, 16], 4).map_unit());
        let f = backbone_forward(&mut g, x, &vars.backbone).unwrap();
        let out = action_loss(&mut g, f, &vars, &[0, 2]).unwrap();
        let a_star = out.output.ett.as_ref().unwrap().attention;
        assert!(g.value(a_star).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.loss).item().is_finite());
        g.backward(out.loss).unwrap();
        assert!(g.grad(vars.backbone.conv1_w).unwrap().l2_norm() > 0.0);
    }

    #[test]
    fn self_loss_reaches_backbone() {
        let model = Model::new(toy_config(), 3).unwrap();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g).unwrap();
        let x = g.constant(random_tensor(&[4, 4, 3, 16, 16], 4).map_unit());
        let f = backbone_forward(&mut g, x, &vars.backbone).unwrap();
        let s = self_loss(&mut g, &model, f, &vars, &mut TssRng::new(1)).unwrap();
        g.backward(s.loss).unwrap();
        assert!(g.grad(vars.backbone.conv1_w).unwrap().l2_norm() > 0.0);
        assert!(g.grad(vars.action_w).is_none());
    }

    #[test]
    fn self_loss_requires_tss() {
        let model = Model::new(
            ModelConfig {
                tss: None,
                ..toy_config()
            },
            0,
        )
        .unwrap();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 4, 4]));
        assert!(self_loss(&mut g, &model, x, &vars, &mut TssRng::new(0)).is_err());
        assert_eq!(model.tss_invocations(), 0);
    }

    trait MapUnit {
        fn map_unit(self) -> Tensor;
    }

    impl MapUnit for Tensor {
        /// Maps [-1,1) test noise into the [0,1) pixel range.
        fn map_unit(mut self) -> Tensor {
            self.data_mut().iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
            self
        }
    }
}
