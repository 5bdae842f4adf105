//! Hybrid encoder: patch embedding, a stack of hybrid layers, the two-branch
//! classification head and the weighted BCE training loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpm::{cpm_block, deinterleave_var, interleave_var};
use crate::error::{Error, Result};
use crate::mamba::{bidirectional, MambaBlock, MambaConfig};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, Var};
use crate::transformer::{AttentionRecord, MultiHeadAttention, TransformerBlock};

/// Placement of the cross-plane block relative to the in-plane block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesign {
    /// Both blocks read the layer input; outputs are summed.
    Parallel,
    /// In-plane block first, cross-plane block on its output.
    InCross,
    /// Cross-plane block first, in-plane block on its output.
    CrossIn,
}

/// Which blocks a hybrid layer contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Transformer only.
    V1,
    /// Transformer plus an in-plane forward-scan Mamba over patch tokens.
    V2,
    /// Transformer plus cross-plane Mamba.
    V3,
    /// Cross-plane Mamba plus an in-plane bidirectional SSM; no attention.
    V4,
    /// Transformer plus cross-plane self-attention over interleaved patches.
    V5,
}

impl Variant {
    pub fn has_attention(self) -> bool {
        self != Variant::V4
    }
}

impl FromStr for LayerDesign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "parallel" => Ok(LayerDesign::Parallel),
            "incross" => Ok(LayerDesign::InCross),
            "crossin" => Ok(LayerDesign::CrossIn),
            _ => Err(Error::Config(format!("unknown layer design {:?}", s))),
        }
    }
}

impl fmt::Display for LayerDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerDesign::Parallel => "parallel",
            LayerDesign::InCross => "in_cross",
            LayerDesign::CrossIn => "cross_in",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            "v5" => Ok(Variant::V5),
            _ => Err(Error::Config(format!("unknown variant {:?}", s))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Planes per volume.
    pub planes: usize,
    pub design: LayerDesign,
    pub variant: Variant,
    pub gwrp_decay: f64,
    pub pos_weight_min: f64,
    pub pos_weight_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            patch: 8,
            height: 32,
            width: 32,
            planes: 16,
            design: LayerDesign::CrossIn,
            variant: Variant::V3,
            gwrp_decay: 0.99,
            pos_weight_min: 0.1,
            pos_weight_max: 10.0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {:?} for {}", value, key)))
}

impl ModelConfig {
    /// Patch tokens per plane.
    pub fn patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    /// Applies one `key=value` setting. Returns `false` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "planes" => self.planes = parse(key, value)?,
            "design" => self.design = value.trim().parse()?,
            "variant" => self.variant = value.trim().parse()?,
            "gwrp_decay" => self.gwrp_decay = parse(key, value)?,
            "pos_weight_min" => self.pos_weight_min = parse(key, value)?,
            "pos_weight_max" => self.pos_weight_max = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("patch", self.patch.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("planes", self.planes.to_string()),
            ("design", self.design.to_string()),
            ("variant", self.variant.to_string()),
            ("gwrp_decay", self.gwrp_decay.to_string()),
            ("pos_weight_min", self.pos_weight_min.to_string()),
            ("pos_weight_max", self.pos_weight_max.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.dim == 0 || self.planes == 0 || self.patch == 0 {
            return bad("layers, dim, planes and patch must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "image {}x{} not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            ));
        }
        if self.grid_h() != self.grid_w() {
            return bad(format!(
                "patch grid {}x{} is not square",
                self.grid_h(),
                self.grid_w()
            ));
        }
        if !(self.gwrp_decay > 0.0 && self.gwrp_decay <= 1.0) {
            return bad(format!("gwrp_decay {} outside (0, 1]", self.gwrp_decay));
        }
        if !(self.pos_weight_min > 0.0 && self.pos_weight_min <= self.pos_weight_max) {
            return bad("need 0 < pos_weight_min <= pos_weight_max".into());
        }
        Ok(())
    }
}

/// Cuts `[B, H, W]` planes into `[B, M, P·P]` non-overlapping patches,
/// patch grid row-major, pixels row-major within each patch.
pub fn extract_patches<T: Float>(planes: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = planes.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape(
            "extract_patches",
            format!("{:?} not divisible into {}-pixel patches", s, patch),
        ));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    planes
        .reshape(&[b, gh, patch, gw, patch])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape(&[b, gh * gw, patch * patch])
}

/// Cross-plane (or, for V2, per-plane) branch. Its output is a contribution
/// with zero class rows; the layer adds the residual.
#[derive(Debug, Clone)]
pub enum CrossBranch {
    /// Mamba over patch tokens scanned with `planes` interleaved. V2 uses a
    /// one-plane scan, i.e. each plane on its own.
    Mamba {
        norm: LayerNorm,
        mamba: MambaBlock,
        cross_plane: bool,
    },
    /// Self-attention over the interleaved patch tokens of a volume.
    Attention {
        norm: LayerNorm,
        attn: MultiHeadAttention,
    },
}

impl CrossBranch {
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>, planes: usize) -> Result<Var<'t, T>> {
        match self {
            CrossBranch::Mamba {
                norm,
                mamba,
                cross_plane,
            } => cpm_block(p, norm, mamba, tokens, if *cross_plane { planes } else { 1 }),
            CrossBranch::Attention { norm, attn } => {
                let s = tokens.shape();
                let (rows, m, d) = (s[0], s[1] - 1, s[2]);
                let seq = interleave_var(tokens.narrow(1, 1, m)?, planes)?;
                let (mixed, _) = attn.forward(p, norm.forward(p, seq)?)?;
                let back = deinterleave_var(mixed, planes)?;
                let zeros = tokens.tape().constant(Tensor::zeros(&[rows, 1, d]));
                Var::concat(&[zeros, back], 1)
            }
        }
    }
}

/// Per-plane block over all `1+M` tokens, residuals included.
#[derive(Debug, Clone)]
pub enum InPlane {
    Transformer(TransformerBlock),
    BiSsm {
        norm: LayerNorm,
        fwd: MambaBlock,
        bwd: MambaBlock,
    },
}

impl InPlane {
    pub fn forward<'t, T: Float>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        tokens: usize,
    ) -> Result<(Var<'t, T>, Option<Tensor<T>>)> {
        match self {
            InPlane::Transformer(block) => {
                let (y, a) = block.forward(p, x, Some(tokens))?;
                Ok((y, Some(a)))
            }
            InPlane::BiSsm { norm, fwd, bwd } => {
                let y = bidirectional(fwd, bwd, p, norm.forward(p, x)?)?;
                Ok((x.add(y)?, None))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HybridLayer {
    pub index: usize,
    pub cross: Option<CrossBranch>,
    pub in_plane: InPlane,
}

impl HybridLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        index: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, l) = (config.dim, index);
        let mamba_branch = |store: &mut ParamStore<T>, prefix: String, cross_plane: bool, rng: &mut R| CrossBranch::Mamba {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), d),
            mamba: MambaBlock::new(store, &format!("{prefix}.mixer"), MambaConfig::new(d), rng),
            cross_plane,
        };
        let cross = match config.variant {
            Variant::V1 => None,
            Variant::V2 => Some(mamba_branch(store, format!("mamba.{l}"), false, rng)),
            Variant::V3 | Variant::V4 => Some(mamba_branch(store, format!("cpm.{l}"), true, rng)),
            Variant::V5 => Some(CrossBranch::Attention {
                norm: LayerNorm::new(store, &format!("xattn.{l}.norm"), d),
                attn: MultiHeadAttention::new(store, &format!("xattn.{l}.attn"), d, config.heads, rng)?,
            }),
        };
        let in_plane = if config.variant == Variant::V4 {
            InPlane::BiSsm {
                norm: LayerNorm::new(store, &format!("bissm.{l}.norm"), d),
                fwd: MambaBlock::new(store, &format!("bissm.{l}.fwd"), MambaConfig::new(d), rng),
                bwd: MambaBlock::new(store, &format!("bissm.{l}.bwd"), MambaConfig::new(d), rng),
            }
        } else {
            InPlane::Transformer(TransformerBlock::new(store, &format!("xformer.{l}"), d, config.heads, rng)?)
        };
        Ok(HybridLayer { index, cross, in_plane })
    }

    /// One layer on a token stack `[V·N, 1+M, D]`.
    pub fn forward<'t, T: Float>(
        &self,
        p: &Bound<'t, T>,
        v: Var<'t, T>,
        planes: usize,
        design: LayerDesign,
    ) -> Result<(Var<'t, T>, Option<Tensor<T>>)> {
        let tokens = v.shape()[1];
        let Some(cross) = &self.cross else {
            return self.in_plane.forward(p, v, tokens);
        };
        match design {
            LayerDesign::CrossIn => {
                let u = v.add(cross.forward(p, v, planes)?)?;
                self.in_plane.forward(p, u, tokens)
            }
            LayerDesign::InCross => {
                let (t, a) = self.in_plane.forward(p, v, tokens)?;
                Ok((t.add(cross.forward(p, t, planes)?)?, a))
            }
            LayerDesign::Parallel => {
                let (t, a) = self.in_plane.forward(p, v, tokens)?;
                Ok((t.add(cross.forward(p, v, planes)?)?, a))
            }
        }
    }
}

/// Everything a forward pass produces.
pub struct ForwardOutput<'t, T: Float> {
    /// Class-token branch logit per plane, `[B]`.
    pub y_class: Var<'t, T>,
    /// Patch branch logit per plane, `[B]`.
    pub y_patch: Var<'t, T>,
    /// Conv outputs before pooling, `[B, M]`, detached.
    pub patch_logits: Tensor<T>,
    /// One record per layer; empty for attention-free variants.
    pub attention: Vec<AttentionRecord<T>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_proj: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<HybridLayer>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl Model {
    /// Builds the model and its freshly initialised parameters.
    pub fn new<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let patch_proj = Linear::new(
            &mut store,
            "embed.patch",
            config.patch * config.patch,
            d,
            true,
            0.02,
            &mut rng,
        );
        let cls_token = store.add("embed.cls", Tensor::randn(&[1, d], 0.02, &mut rng));
        let pos_embed = store.add("embed.pos", Tensor::randn(&[config.tokens(), d], 0.02, &mut rng));
        let layers = (0..config.layers)
            .map(|l| HybridLayer::new(&mut store, l, config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_weight = store.add("head.conv.weight", Tensor::randn(&[1, 3, 3, d], 0.02, &mut rng));
        let head_bias = store.add("head.conv.bias", Tensor::zeros(&[1]));
        let model = Model {
            config: config.clone(),
            patch_proj,
            cls_token,
            pos_embed,
            layers,
            head_weight,
            head_bias,
        };
        Ok((model, store))
    }

    /// `[B, H, W]` → token stack `[B, 1+M, D]`.
    pub fn patch_embed<'t, T: Float>(&self, p: &Bound<'t, T>, planes: &Tensor<T>) -> Result<Var<'t, T>> {
        let c = &self.config;
        let s = planes.shape();
        if s.len() != 3 || s[1] != c.height || s[2] != c.width {
            return Err(Error::shape(
                "patch_embed",
                format!("expected [B, {}, {}], got {:?}", c.height, c.width, s),
            ));
        }
        let tape = p.var(self.cls_token).tape();
        let patches = tape.constant(extract_patches(planes, c.patch)?);
        let tokens = self.patch_proj.forward(p, patches)?;
        let cls = p.var(self.cls_token).expand_leading(s[0]);
        Var::concat(&[cls, tokens], 1)?.add(p.var(self.pos_embed))
    }

    /// Runs the encoder and heads on `[V·N, H, W]`, `N = config.planes`.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, planes: &Tensor<T>) -> Result<ForwardOutput<'t, T>> {
        let c = &self.config;
        let b = planes.shape().first().copied().unwrap_or(0);
        if b == 0 || b % c.planes != 0 {
            return Err(Error::shape(
                "encoder",
                format!("{} planes is not a whole number of {}-plane volumes", b, c.planes),
            ));
        }
        let mut v = self.patch_embed(p, planes)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, a) = layer.forward(p, v, c.planes, c.design)?;
            if let Some(maps) = a {
                attention.push(AttentionRecord {
                    layer: layer.index,
                    maps,
                });
            }
            v = out;
        }
        let (y_class, y_patch, patch_logits) = self.head(p, v)?;
        Ok(ForwardOutput {
            y_class,
            y_patch,
            patch_logits,
            attention,
        })
    }

    /// Two-branch head on the final token stack `[B, 1+M, D]`.
    pub fn head<'t, T: Float>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>, Tensor<T>)> {
        let c = &self.config;
        let s = v.shape();
        let (b, m, d) = (s[0], s[1] - 1, s[2]);
        let g = c.grid_h();
        let y_class = v.narrow(1, 0, 1)?.reshape(&[b, d])?.mean_axis(1)?;
        let maps = v
            .narrow(1, 1, m)?
            .reshape(&[b, g, g, d])?
            .conv2d_same(p.var(self.head_weight), p.var(self.head_bias))?
            .reshape(&[b, m])?;
        let y_patch = maps.gwrp(c.gwrp_decay)?;
        Ok((y_class, y_patch, maps.to_tensor()))
    }
}

/// `#neg / #pos`, clipped to `[lo, hi]`. All-negative labels give `hi`.
pub fn pos_weight(labels: &[u8], lo: f64, hi: f64) -> f64 {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return hi;
    }
    (neg as f64 / pos as f64).clamp(lo, hi)
}

/// `wBCE(y_class) + wBCE(y_patch)`, each averaged over planes.
pub fn training_loss<'t, T: Float>(
    y_class: Var<'t, T>,
    y_patch: Var<'t, T>,
    labels: &[u8],
    pos_weight: f64,
) -> Result<Var<'t, T>> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidArgument(format!("label {} outside {{0, 1}}", bad)));
    }
    if !(pos_weight > 0.0) {
        return Err(Error::InvalidArgument(format!("pos_weight {} must be positive", pos_weight)));
    }
    let targets = Tensor::new(&[labels.len()], labels.iter().map(|&y| T::of(y as f64)).collect())?;
    let w = T::of(pos_weight);
    y_class
        .bce_with_logits(&targets, w)?
        .add(y_patch.bce_with_logits(&targets, w)?)
}
