//! ViT and agent CNN construction and forward passes.
//!
//! Images enter as `[batch, channels, height, width]`. Internally maps are
//! channels-last and token sequences are `[batch, tokens, width]`.

use std::sync::Arc;

use bootvit_tensor::{Graph, IndexMap, Scalar, Tensor, Var};

use crate::error::{config, Result};
use crate::inductive_bias::head_biases;
use crate::params::{Binder, Group, Init, ParamStore};
use crate::rng::SeedTree;

pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
/// Width of the first stem convolution of the res-like agent.
pub const RES_STEM_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentVariant {
    Base,
    ResLike,
}

impl AgentVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentVariant::Base => "base",
            AgentVariant::ResLike => "res-like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(AgentVariant::Base),
            "res-like" | "res" => Some(AgentVariant::ResLike),
            _ => None,
        }
    }
}

/// Down-sampling between res-like stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// 2x2 average pooling, stride 2.
    AvgPool,
    /// 3x3 convolution, stride 2, padding 1, width preserved.
    StridedConv,
}

impl Downsample {
    pub fn as_str(self) -> &'static str {
        match self {
            Downsample::AvgPool => "avg-pool",
            Downsample::StridedConv => "strided-conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "avg-pool" => Some(Downsample::AvgPool),
            "strided-conv" => Some(Downsample::StridedConv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub agent_variant: AgentVariant,
    pub downsample: Downsample,
}

impl ArchConfig {
    pub fn vit_s() -> Self {
        Self {
            layers: 6,
            hidden: 288,
            heads: 9,
            patch: 16,
            image_size: 224,
            channels: 3,
            classes: 10,
            mlp_ratio: 4,
            agent_variant: AgentVariant::ResLike,
            downsample: Downsample::AvgPool,
        }
    }

    pub fn vit_b() -> Self {
        Self {
            layers: 12,
            hidden: 384,
            heads: 6,
            ..Self::vit_s()
        }
    }

    /// Small configuration for 32x32 inputs.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            hidden: 72,
            heads: 9,
            patch: 4,
            image_size: 32,
            agent_variant: AgentVariant::Base,
            ..Self::vit_s()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-s" => Some(Self::vit_s()),
            "vit-b" => Some(Self::vit_b()),
            "desk" | "vit-tiny-desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("patch", self.patch),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("classes", self.classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config(format!("{name} must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return config(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.agent_variant == AgentVariant::ResLike {
            let maps = self.agent_maps()?;
            if self.downsample == Downsample::AvgPool {
                for w in maps.windows(2) {
                    if w[0].0 % 2 != 0 || w[0].1 % 2 != 0 {
                        return config(format!("{}x{} map cannot be average-pooled by 2", w[0].0, w[0].1));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// ViT patch-token count, without the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Blocks per agent stage.
    pub fn stages(&self) -> Vec<usize> {
        match self.agent_variant {
            AgentVariant::Base => vec![self.layers],
            AgentVariant::ResLike if self.layers < 3 => vec![self.layers],
            AgentVariant::ResLike => {
                let a = (self.layers / 6).max(1);
                vec![a, a, self.layers - 2 * a]
            }
        }
    }

    /// Spatial size of the agent's map in each stage.
    pub fn agent_maps(&self) -> Result<Vec<(usize, usize)>> {
        match self.agent_variant {
            AgentVariant::Base => Ok(vec![(self.grid(), self.grid())]),
            AgentVariant::ResLike => {
                let conv = |s: usize, k: usize, st: usize, p: usize| {
                    if s + 2 * p < k {
                        None
                    } else {
                        Some((s + 2 * p - k) / st + 1)
                    }
                };
                let s = conv(self.image_size, 7, 2, 3)
                    .and_then(|s| conv(s, 2, 2, 0))
                    .and_then(|s| conv(s, 3, 2, 1))
                    .filter(|&s| s > 0);
                let Some(mut s) = s else {
                    return config(format!("image size {} too small for the res-like stem", self.image_size));
                };
                let mut maps = vec![(s, s)];
                for _ in 1..self.stages().len() {
                    s = match self.downsample {
                        Downsample::AvgPool => s / 2,
                        Downsample::StridedConv => (s + 2 - 3) / 2 + 1,
                    };
                    if s == 0 {
                        return config("agent map vanishes before the last stage");
                    }
                    maps.push((s, s));
                }
                Ok(maps)
            }
        }
    }
}

/// Per-layer features and final logits of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `[batch, tokens, hidden]` output of each encoder block in depth
    /// order. ViT entries exclude the class token.
    pub features: Vec<Var>,
    pub logits: Var,
    /// `[batch * heads, tokens, tokens]` attention per block, when
    /// requested from the ViT.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct NormNames {
    g: String,
    b: String,
}

#[derive(Clone, Debug)]
struct FfnNames {
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

#[derive(Clone, Debug)]
struct AttnNames {
    q_w: String,
    q_b: String,
    k_w: String,
    k_b: String,
    v_w: String,
    v_b: String,
    o_w: String,
    o_b: String,
}

#[derive(Clone, Debug)]
struct VitBlock {
    norm1: NormNames,
    attn: AttnNames,
    norm2: NormNames,
    ffn: FfnNames,
}

fn norm<T: Scalar, R: rand::Rng>(init: &mut Init<'_, T, R>, prefix: &str, group: Group, d: usize) -> Result<NormNames> {
    Ok(NormNames {
        g: init.ones(&format!("{prefix}.g"), group, &[d])?,
        b: init.zeros(&format!("{prefix}.b"), group, &[d])?,
    })
}

fn ffn<T: Scalar, R: rand::Rng>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    group: Group,
    d: usize,
    hidden: usize,
) -> Result<FfnNames> {
    Ok(FfnNames {
        w1: init.normal(&format!("{prefix}.fc1.w"), group, &[d, hidden])?,
        b1: init.zeros(&format!("{prefix}.fc1.b"), group, &[hidden])?,
        w2: init.normal(&format!("{prefix}.fc2.w"), group, &[hidden, d])?,
        b2: init.zeros(&format!("{prefix}.fc2.b"), group, &[d])?,
    })
}

fn apply_norm<T: Scalar>(g: &mut Graph<T>, p: &mut Binder<'_, T>, n: &NormNames, x: Var) -> Result<Var> {
    let gain = p.var(g, &n.g)?;
    let bias = p.var(g, &n.b)?;
    Ok(g.layer_norm(x, gain, bias, T::from_f64_lossy(NORM_EPS))?)
}

fn apply_ffn<T: Scalar>(g: &mut Graph<T>, p: &mut Binder<'_, T>, f: &FfnNames, x: Var) -> Result<Var> {
    let (w1, b1) = (p.var(g, &f.w1)?, p.var(g, &f.b1)?);
    let (w2, b2) = (p.var(g, &f.w2)?, p.var(g, &f.b2)?);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    Ok(g.linear(h, w2, Some(b2))?)
}

/// `[batch, channels, h, w]` to channels-last, checking the geometry.
fn to_channels_last<T: Scalar>(g: &mut Graph<T>, cfg: &ArchConfig, images: Var) -> Result<Var> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return config(format!(
            "images of shape {s:?} do not match [batch, {}, {}, {}]",
            cfg.channels, cfg.image_size, cfg.image_size
        ));
    }
    Ok(g.permute(images, &[0, 2, 3, 1])?)
}

/// Parameter name prefix of the slots the ViT may share with its agent.
fn sharable_prefix(sharing: bool) -> (&'static str, Group) {
    if sharing {
        ("shared", Group::Shared)
    } else {
        ("vit", Group::Vit)
    }
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: ArchConfig,
    patch_w: String,
    patch_b: String,
    cls: String,
    pos: String,
    blocks: Vec<VitBlock>,
    norm: NormNames,
    head_w: String,
    head_b: String,
}

/// Registers a ViT in `store`. With `sharing`, the value/output
/// projections and feed-forward weights go into the shared group under a
/// `shared.` prefix so an agent can bind them.
pub fn build_vit<T: Scalar>(cfg: &ArchConfig, store: &mut ParamStore<T>, seeds: &SeedTree, sharing: bool) -> Result<Vit> {
    cfg.validate()?;
    let mut rng = seeds.rng("init.vit");
    let mut init = Init {
        store,
        rng: &mut rng,
        std: INIT_STD,
    };
    let (d, v) = (cfg.hidden, Group::Vit);
    let (sp, sg) = sharable_prefix(sharing);
    let patch_w = init.normal("vit.patch.w", v, &[cfg.patch, cfg.patch, cfg.channels, d])?;
    let patch_b = init.zeros("vit.patch.b", v, &[d])?;
    let cls = init.normal("vit.cls", v, &[1, d])?;
    let pos = init.normal("vit.pos", v, &[cfg.tokens() + 1, d])?;
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pre = format!("vit.blocks.{l}");
        let spre = format!("{sp}.blocks.{l}");
        let norm1 = norm(&mut init, &format!("{pre}.norm1"), v, d)?;
        let attn = AttnNames {
            q_w: init.normal(&format!("{pre}.attn.q.w"), v, &[d, d])?,
            q_b: init.zeros(&format!("{pre}.attn.q.b"), v, &[d])?,
            k_w: init.normal(&format!("{pre}.attn.k.w"), v, &[d, d])?,
            k_b: init.zeros(&format!("{pre}.attn.k.b"), v, &[d])?,
            v_w: init.normal(&format!("{spre}.attn.v.w"), sg, &[d, d])?,
            v_b: init.zeros(&format!("{spre}.attn.v.b"), sg, &[d])?,
            o_w: init.normal(&format!("{spre}.attn.o.w"), sg, &[d, d])?,
            o_b: init.zeros(&format!("{spre}.attn.o.b"), sg, &[d])?,
        };
        let norm2 = norm(&mut init, &format!("{pre}.norm2"), v, d)?;
        let ffn = ffn(&mut init, &format!("{spre}.ffn"), sg, d, cfg.mlp_hidden())?;
        blocks.push(VitBlock { norm1, attn, norm2, ffn });
    }
    let norm = norm(&mut init, "vit.norm", v, d)?;
    let head_w = init.normal("vit.head.w", v, &[d, cfg.classes])?;
    let head_b = init.zeros("vit.head.b", v, &[cfg.classes])?;
    Ok(Vit {
        cfg: cfg.clone(),
        patch_w,
        patch_b,
        cls,
        pos,
        blocks,
        norm,
        head_w,
        head_b,
    })
}

impl Vit {
    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<'_, T>,
        a: &AttnNames,
        x: Var,
    ) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let (h, dk) = (self.cfg.heads, self.cfg.head_dim());
        let mut split = |g: &mut Graph<T>, w: &str, bias: &str| -> Result<Var> {
            let (w, bias) = (p.var(g, w)?, p.var(g, bias)?);
            let y = g.linear(x, w, Some(bias))?;
            let y = g.reshape(y, &[b, n, h, dk])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[b * h, n, dk])?)
        };
        let q = split(g, &a.q_w, &a.q_b)?;
        let k = split(g, &a.k_w, &a.k_b)?;
        let v = split(g, &a.v_w, &a.v_b)?;
        let logits = g.bmm(q, k, false, true)?;
        let logits = g.scale(logits, T::one() / T::from_usize(dk).expect("dk").sqrt());
        let attn = g.softmax(logits)?;
        let o = g.bmm(attn, v, false, false)?;
        let o = g.reshape(o, &[b, h, n, dk])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, d])?;
        let (ow, ob) = (p.var(g, &a.o_w)?, p.var(g, &a.o_b)?);
        Ok((g.linear(o, ow, Some(ob))?, attn))
    }

    /// Forward pass returning per-block patch-token features and logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<'_, T>, images: Var, keep_attention: bool) -> Result<LayerTrace> {
        let cfg = &self.cfg;
        let x = to_channels_last(g, cfg, images)?;
        let b = g.shape(x)[0];
        let (n, d) = (cfg.tokens(), cfg.hidden);
        let (pw, pb) = (p.var(g, &self.patch_w)?, p.var(g, &self.patch_b)?);
        let x = g.conv2d(x, pw, Some(pb), cfg.patch, 0)?;
        let x = g.reshape(x, &[b, n, d])?;
        let cls = p.var(g, &self.cls)?;
        let cls = g.repeat_leading(cls, b);
        let x = g.concat(&[cls, x], 1)?;
        let pos = p.var(g, &self.pos)?;
        let mut x = g.add_broadcast(x, pos)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::new();
        for blk in &self.blocks {
            let h = apply_norm(g, p, &blk.norm1, x)?;
            let (a, attn) = self.attention(g, p, &blk.attn, h)?;
            if keep_attention {
                attention.push(attn);
            }
            x = g.add(x, a)?;
            let h = apply_norm(g, p, &blk.norm2, x)?;
            let f = apply_ffn(g, p, &blk.ffn, h)?;
            x = g.add(x, f)?;
            features.push(g.slice(x, 1, 1, n)?);
        }
        let x = apply_norm(g, p, &self.norm, x)?;
        let cls = g.slice(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        let (hw, hb) = (p.var(g, &self.head_w)?, p.var(g, &self.head_b)?);
        let logits = g.linear(cls, hw, Some(hb))?;
        Ok(LayerTrace {
            features,
            logits,
            attention,
        })
    }
}

#[derive(Clone, Debug)]
enum ConvNames {
    /// Uses the ViT's value and output projections.
    Shared { v_w: String, v_b: String, o_w: String, o_b: String },
    /// Private `[d, heads * d]` head weights and one bias.
    Private { w: String, b: String },
}

#[derive(Clone, Debug)]
struct AgentBlock {
    norm1: NormNames,
    conv: ConvNames,
    norm2: NormNames,
    ffn: FfnNames,
}

#[derive(Clone, Debug)]
enum Stem {
    Patch { w: String, b: String },
    Res { w1: String, b1: String, w2: String, b2: String },
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: ArchConfig,
    pub shared: bool,
    stem: Stem,
    /// Blocks grouped by stage.
    stages: Vec<Vec<AgentBlock>>,
    maps: Vec<(usize, usize)>,
    gathers: Vec<Arc<Vec<IndexMap>>>,
    down: Vec<Option<(String, String)>>,
    norm: NormNames,
    head_w: String,
    head_b: String,
}

/// Registers an agent CNN. With `shared`, the head convolutions and
/// feed-forward layers bind the ViT's shared tensors, which must already
/// be in `store` with matching shapes.
pub fn build_agent<T: Scalar>(cfg: &ArchConfig, store: &mut ParamStore<T>, seeds: &SeedTree, shared: bool) -> Result<Agent> {
    cfg.validate()?;
    let (d, a) = (cfg.hidden, Group::Agent);
    let maps = cfg.agent_maps()?;
    let stage_sizes = cfg.stages();
    if shared {
        for l in 0..cfg.layers {
            let pre = format!("shared.blocks.{l}");
            for (slot, shape) in [
                ("attn.v.w", vec![d, d]),
                ("attn.v.b", vec![d]),
                ("attn.o.w", vec![d, d]),
                ("attn.o.b", vec![d]),
                ("ffn.fc1.w", vec![d, cfg.mlp_hidden()]),
                ("ffn.fc1.b", vec![cfg.mlp_hidden()]),
                ("ffn.fc2.w", vec![cfg.mlp_hidden(), d]),
                ("ffn.fc2.b", vec![d]),
            ] {
                store.expect_shape(&format!("{pre}.{slot}"), &shape)?;
            }
        }
    }
    let mut rng = seeds.rng("init.agent");
    let mut init = Init {
        store,
        rng: &mut rng,
        std: INIT_STD,
    };
    let stem = match cfg.agent_variant {
        AgentVariant::Base => Stem::Patch {
            w: init.normal("agent.stem.w", a, &[cfg.patch, cfg.patch, cfg.channels, d])?,
            b: init.zeros("agent.stem.b", a, &[d])?,
        },
        AgentVariant::ResLike => Stem::Res {
            w1: init.normal("agent.stem.conv1.w", a, &[7, 7, cfg.channels, RES_STEM_WIDTH])?,
            b1: init.zeros("agent.stem.conv1.b", a, &[RES_STEM_WIDTH])?,
            w2: init.normal("agent.stem.conv2.w", a, &[3, 3, RES_STEM_WIDTH, d])?,
            b2: init.zeros("agent.stem.conv2.b", a, &[d])?,
        },
    };
    let mut stages = Vec::with_capacity(stage_sizes.len());
    let mut gathers = Vec::with_capacity(stage_sizes.len());
    let mut down = Vec::with_capacity(stage_sizes.len());
    let mut l = 0;
    for (si, &count) in stage_sizes.iter().enumerate() {
        gathers.push(head_biases(cfg.heads, maps[si])?.index_maps());
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let pre = format!("agent.blocks.{l}");
            let norm1 = norm(&mut init, &format!("{pre}.norm1"), a, d)?;
            let conv = if shared {
                let s = format!("shared.blocks.{l}.attn");
                ConvNames::Shared {
                    v_w: format!("{s}.v.w"),
                    v_b: format!("{s}.v.b"),
                    o_w: format!("{s}.o.w"),
                    o_b: format!("{s}.o.b"),
                }
            } else {
                ConvNames::Private {
                    w: init.normal(&format!("{pre}.conv.w"), a, &[d, cfg.heads * d])?,
                    b: init.zeros(&format!("{pre}.conv.b"), a, &[d])?,
                }
            };
            let norm2 = norm(&mut init, &format!("{pre}.norm2"), a, d)?;
            let ffn = if shared {
                let s = format!("shared.blocks.{l}.ffn");
                FfnNames {
                    w1: format!("{s}.fc1.w"),
                    b1: format!("{s}.fc1.b"),
                    w2: format!("{s}.fc2.w"),
                    b2: format!("{s}.fc2.b"),
                }
            } else {
                ffn(&mut init, &format!("{pre}.ffn"), a, d, cfg.mlp_hidden())?
            };
            blocks.push(AgentBlock { norm1, conv, norm2, ffn });
            l += 1;
        }
        stages.push(blocks);
        let is_last = si + 1 == stage_sizes.len();
        down.push(if !is_last && cfg.downsample == Downsample::StridedConv {
            Some((
                init.normal(&format!("agent.down.{si}.w"), a, &[3, 3, d, d])?,
                init.zeros(&format!("agent.down.{si}.b"), a, &[d])?,
            ))
        } else {
            None
        });
    }
    let norm = norm(&mut init, "agent.norm", a, d)?;
    let head_w = init.normal("agent.head.w", a, &[d, cfg.classes])?;
    let head_b = init.zeros("agent.head.b", a, &[cfg.classes])?;
    Ok(Agent {
        cfg: cfg.clone(),
        shared,
        stem,
        stages,
        maps,
        gathers,
        down,
        norm,
        head_w,
        head_b,
    })
}

impl Agent {
    /// Spatial map size per stage.
    pub fn maps(&self) -> &[(usize, usize)] {
        &self.maps
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<'_, T>, c: &ConvNames, stage: usize, x: Var) -> Result<Var> {
        let gather = self.gathers[stage].clone();
        match c {
            ConvNames::Shared { v_w, v_b, o_w, o_b } => {
                let (vw, vb) = (p.var(g, v_w)?, p.var(g, v_b)?);
                let v = g.linear(x, vw, Some(vb))?;
                let v = g.head_gather(v, gather)?;
                let (ow, ob) = (p.var(g, o_w)?, p.var(g, o_b)?);
                Ok(g.linear(v, ow, Some(ob))?)
            }
            ConvNames::Private { w, b } => {
                let s = g.shape(x).to_vec();
                let (w, b) = (p.var(g, w)?, p.var(g, b)?);
                let z = g.linear(x, w, None)?;
                let z = g.head_gather(z, gather)?;
                let z = g.reshape(z, &[s[0], s[1], self.cfg.heads, s[2]])?;
                let z = g.sum_axis(z, 2)?;
                Ok(g.add_broadcast(z, b)?)
            }
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<'_, T>, images: Var) -> Result<LayerTrace> {
        let cfg = &self.cfg;
        let d = cfg.hidden;
        let x = to_channels_last(g, cfg, images)?;
        let b = g.shape(x)[0];
        let mut x = match &self.stem {
            Stem::Patch { w, b: bias } => {
                let (w, bias) = (p.var(g, w)?, p.var(g, bias)?);
                g.conv2d(x, w, Some(bias), cfg.patch, 0)?
            }
            Stem::Res { w1, b1, w2, b2 } => {
                let (w1, b1) = (p.var(g, w1)?, p.var(g, b1)?);
                let y = g.conv2d(x, w1, Some(b1), 2, 3)?;
                let y = g.relu(y);
                let y = g.max_pool2d(y, 2, 2)?;
                let (w2, b2) = (p.var(g, w2)?, p.var(g, b2)?);
                g.conv2d(y, w2, Some(b2), 2, 1)?
            }
        };
        let mut features = Vec::with_capacity(cfg.layers);
        for (si, blocks) in self.stages.iter().enumerate() {
            let (h, w) = self.maps[si];
            x = g.reshape(x, &[b, h * w, d])?;
            for blk in blocks {
                let y = apply_norm(g, p, &blk.norm1, x)?;
                let y = self.conv(g, p, &blk.conv, si, y)?;
                x = g.add(x, y)?;
                let y = apply_norm(g, p, &blk.norm2, x)?;
                let y = apply_ffn(g, p, &blk.ffn, y)?;
                x = g.add(x, y)?;
                features.push(x);
            }
            if si + 1 < self.stages.len() {
                let map = g.reshape(x, &[b, h, w, d])?;
                x = match &self.down[si] {
                    Some((wn, bn)) => {
                        let (wv, bv) = (p.var(g, wn)?, p.var(g, bn)?);
                        g.conv2d(map, wv, Some(bv), 2, 1)?
                    }
                    None => g.avg_pool2d(map, 2)?,
                };
            }
        }
        let x = apply_norm(g, p, &self.norm, x)?;
        let pooled = g.mean_axis(x, 1)?;
        let (hw, hb) = (p.var(g, &self.head_w)?, p.var(g, &self.head_b)?);
        let logits = g.linear(pooled, hw, Some(hb))?;
        Ok(LayerTrace {
            features,
            logits,
            attention: Vec::new(),
        })
    }
}

/// Applies `w_fc`, `b_fc` as a fully connected layer on the flattened
/// tokens of `x` (`[h, w, d_in]`) and `w_conv`, `b_conv` as a 1x1
/// convolution on the map, and returns the largest absolute difference.
pub fn fc_conv_gap(w_fc: &Tensor<f64>, b_fc: &Tensor<f64>, w_conv: &Tensor<f64>, b_conv: &Tensor<f64>, x: &Tensor<f64>) -> Result<f64> {
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return config(format!("map must be [h, w, d], got {s:?}"));
    }
    let d_out = w_fc.shape()[1];
    let mut g = Graph::new();
    let tokens = g.constant(x.clone().reshape(&[s[0] * s[1], s[2]])?);
    let wf = g.constant(w_fc.clone());
    let bf = g.constant(b_fc.clone());
    let fc = g.linear(tokens, wf, Some(bf))?;
    let map = g.constant(x.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let wc = g.constant(w_conv.clone().reshape(&[1, 1, s[2], d_out])?);
    let bc = g.constant(b_conv.clone());
    let conv = g.conv2d(map, wc, Some(bc), 1, 0)?;
    let conv = g.reshape(conv, &[s[0] * s[1], d_out])?;
    Ok(g.value(fc).max_abs_diff(g.value(conv)))
}

pub fn fc_equals_1x1_conv(w: &Tensor<f64>, b: &Tensor<f64>, x: &Tensor<f64>) -> Result<bool> {
    Ok(fc_conv_gap(w, b, w, b, x)? <= 1e-10)
}
