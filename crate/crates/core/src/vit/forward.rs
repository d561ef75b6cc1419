//! Forward pass of a subnetwork of the universal model.
//!
//! Every parameter is bound to the tape as the prefix block its [`Slicing`]
//! rule selects for the view, so activations have width `k · head_dim`
//! (`(M / H) · k` inside the MLP) throughout. A standalone model extracted at
//! `k` runs this same code at full width and sees identical operands.
//!
//! [`Slicing`]: crate::vit::Slicing

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::vit::config::{ModelConfig, SubnetworkView};
use crate::vit::params::{Block, Classifier, Linear, Params, UniversalWeights};

/// Tape handles of the parameter blocks a view uses; `None` for slots the
/// view does not touch (other subnetworks' classifiers).
pub type BoundParams = Params<Option<Var>>;

pub struct ForwardOutput {
    /// `[batch, num_classes]`.
    pub logits: Var,
    pub bound: BoundParams,
}

/// Cuts `[B, C, S, S]` images into `[B, P, C · p · p]` patch vectors. Patches
/// are ordered row-major over the grid; each vector is ordered (channel, row, column).
pub fn patchify<T: Float>(images: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let (c, size, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != size || s[3] != size {
        return Err(Error::Tensor(crate::TensorError::Shape {
            op: "patchify",
            msg: format!("images {s:?} do not match [batch, {c}, {size}, {size}]"),
        }));
    }
    let b = s[0];
    let side = size / p;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ch) * size + py * p + dy) * size + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, side * side, cfg.patch_dim()], out)?)
}

fn check_view(cfg: &ModelConfig, view: &SubnetworkView) -> Result<()> {
    let expected = SubnetworkView::new(cfg, view.k)?;
    if expected != *view {
        return Err(Error::Range(format!("view {view:?} is inconsistent with the configuration")));
    }
    Ok(())
}

/// Places the blocks used by `view` on the tape as trainable leaves.
pub fn bind_params<T: Float>(
    tape: &mut Tape<T>,
    weights: &UniversalWeights<T>,
    view: &SubnetworkView,
) -> Result<BoundParams> {
    weights.try_map(|info, t| match info.active_spec(t.shape(), view) {
        Some(spec) => Ok(Some(tape.param(t.prefix_block(&spec.view, &spec.block, &spec.out)?))),
        None => Ok(None),
    })
}

fn bound(v: &Option<Var>) -> Var {
    v.expect("parameter slot used by this view was not bound")
}

fn linear<T: Float>(tape: &mut Tape<T>, x: Var, l: &Linear<Option<Var>>) -> Result<Var> {
    let y = tape.matmul(x, bound(&l.weight))?;
    Ok(tape.add(y, bound(&l.bias))?)
}

/// Multi-head self-attention over the first `heads` heads of width `head_dim`,
/// followed by the output projection. `x` is `[B, N, heads · head_dim]`.
pub fn self_attention<T: Float>(
    tape: &mut Tape<T>,
    qkv: &Linear<Option<Var>>,
    proj: &Linear<Option<Var>>,
    heads: usize,
    head_dim: usize,
    x: Var,
) -> Result<Var> {
    let fused = linear(tape, x, qkv)?;
    let q = tape.split_heads(fused, 0, 3, heads, head_dim)?;
    let q = tape.scale(q, T::lit(1.0 / (head_dim as f64).sqrt()))?;
    let k = tape.split_heads(fused, 1, 3, heads, head_dim)?;
    let v = tape.split_heads(fused, 2, 3, heads, head_dim)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let attn = tape.softmax(scores, 2)?;
    let mixed = tape.matmul(attn, v)?;
    let merged = tape.merge_heads(mixed, heads)?;
    linear(tape, merged, proj)
}

/// Pre-norm attention sub-block: `tokens + proj(MHA(norm1(tokens)))`.
pub fn attention_forward<T: Float>(
    tape: &mut Tape<T>,
    block: &Block<Option<Var>>,
    cfg: &ModelConfig,
    view: &SubnetworkView,
    tokens: Var,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let width = *tape.shape(tokens).last().unwrap();
    if width != view.embed_width {
        return Err(Error::Tensor(crate::TensorError::Shape {
            op: "attention_forward",
            msg: format!("token width {width} != view width {}", view.embed_width),
        }));
    }
    let eps = T::lit(cfg.norm_eps);
    let normed = tape.layer_norm(tokens, bound(&block.norm1.gamma), bound(&block.norm1.beta), eps)?;
    let mut out = self_attention(tape, &block.qkv, &block.proj, view.k, cfg.head_dim, normed)?;
    if let Some(rng) = dropout {
        out = tape.dropout(out, cfg.dropout, rng)?;
    }
    Ok(tape.add(tokens, out)?)
}

fn block_forward<T: Float>(
    tape: &mut Tape<T>,
    block: &Block<Option<Var>>,
    cfg: &ModelConfig,
    view: &SubnetworkView,
    tokens: Var,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let h = attention_forward(tape, block, cfg, view, tokens, dropout.as_deref_mut())?;
    let eps = T::lit(cfg.norm_eps);
    let y = tape.layer_norm(h, bound(&block.norm2.gamma), bound(&block.norm2.beta), eps)?;
    let y = linear(tape, y, &block.fc1)?;
    let y = tape.gelu(y)?;
    let mut y = linear(tape, y, &block.fc2)?;
    if let Some(rng) = dropout {
        y = tape.dropout(y, cfg.dropout, rng)?;
    }
    Ok(tape.add(h, y)?)
}

/// Records the forward pass of subnetwork `view` on `tape`. Dropout is applied
/// only when `dropout` supplies a generator and `cfg.dropout > 0`.
pub fn forward_on_tape<T: Float>(
    tape: &mut Tape<T>,
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    view: &SubnetworkView,
    images: &Tensor<T>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    check_view(cfg, view)?;
    let patches = patchify(images, cfg)?;
    let params = bind_params(tape, weights, view)?;
    let x = tape.constant(patches);
    let mut h = linear(tape, x, &params.patch_embed)?;
    h = tape.prepend_token(h, bound(&params.cls_token))?;
    h = tape.add(h, bound(&params.pos_embed))?;
    for block in &params.blocks {
        h = block_forward(tape, block, cfg, view, h, dropout.as_deref_mut())?;
    }
    // The final norm acts per token, so only the class token is normalized.
    let cls = tape.select_token(h, 0)?;
    let cls = tape.layer_norm(cls, bound(&params.norm.gamma), bound(&params.norm.beta), T::lit(cfg.norm_eps))?;
    let head = match &params.head {
        Classifier::Shared(l) => l,
        Classifier::Separate(heads) => {
            heads.get(&view.k).ok_or_else(|| Error::Range(format!("no classifier for k = {}", view.k)))?
        }
    };
    let logits = linear(tape, cls, head)?;
    Ok(ForwardOutput { logits, bound: params })
}

/// Logits of subnetwork `view` for a batch of images, without gradient tracking.
pub fn forward<T: Float>(
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    view: &SubnetworkView,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let out = forward_on_tape(&mut tape, weights, cfg, view, images, None)?;
    Ok(tape.value(out.logits).clone())
}

/// Collects the gradient blocks of bound parameters after `backward`.
pub fn take_grads<T: Float>(
    grads: &mut crate::autodiff::Gradients<T>,
    bound: &BoundParams,
) -> Params<Option<Tensor<T>>> {
    bound.map(|_, v| v.and_then(|v| grads.take(v)))
}
