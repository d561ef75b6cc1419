//! Parameter layout of the universal model and the prefix rule for each tensor.
//!
//! [`Params`] is generic over what sits at each parameter slot: weight
//! tensors, tape handles, optimizer moments, shapes. All instances share one
//! canonical slot order (the order of [`Params::entries`]).

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{Float, Tensor};
use crate::vit::config::{ModelConfig, SubnetworkView};

/// How a parameter tensor is cut down to a subnetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slicing {
    /// `[E]` to `[w]`.
    Embed,
    /// `[r, E]` to `[r, w]`: patch projection, class token, positional table.
    EmbedCols,
    /// `[E, c]` to `[w, c]`: shared classifier.
    EmbedRows,
    /// `[E, E]` to `[w, w]`.
    EmbedSquare,
    /// `[E, 3E]` viewed as `[E, 3, E]` to `[w, 3, w]`: each of Q, K, V keeps
    /// its first `k` heads.
    Qkv,
    /// `[3E]` viewed as `[3, E]` to `[3, w]`.
    QkvBias,
    /// `[E, M]` to `[w, m]`.
    EmbedToHidden,
    /// `[M]` to `[m]`.
    Hidden,
    /// `[M, E]` to `[m, w]`.
    HiddenToEmbed,
    /// Used whole.
    Whole,
}

/// Storage view, block and result shape of one sliced tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSpec {
    pub view: Vec<usize>,
    pub block: Vec<usize>,
    pub out: Vec<usize>,
}

impl Slicing {
    pub fn spec(self, shape: &[usize], view: &SubnetworkView) -> SliceSpec {
        let (w, m) = (view.embed_width, view.mlp_width);
        let plain = |block: Vec<usize>| SliceSpec { view: shape.to_vec(), out: block.clone(), block };
        match self {
            Slicing::Embed => plain(vec![w]),
            Slicing::EmbedCols => plain(vec![shape[0], w]),
            Slicing::EmbedRows => plain(vec![w, shape[1]]),
            Slicing::EmbedSquare => plain(vec![w, w]),
            Slicing::Qkv => {
                let e = shape[0];
                SliceSpec { view: vec![e, 3, e], block: vec![w, 3, w], out: vec![w, 3 * w] }
            }
            Slicing::QkvBias => {
                let e = shape[0] / 3;
                SliceSpec { view: vec![3, e], block: vec![3, w], out: vec![3 * w] }
            }
            Slicing::EmbedToHidden => plain(vec![w, m]),
            Slicing::Hidden => plain(vec![m]),
            Slicing::HiddenToEmbed => plain(vec![m, w]),
            Slicing::Whole => plain(shape.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Token,
}

/// Static description of one parameter slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub slicing: Slicing,
    /// For per-subnetwork classifiers: the only `k` that uses this slot.
    pub only_for: Option<usize>,
}

impl ParamInfo {
    fn new(name: String, kind: ParamKind, slicing: Slicing) -> Self {
        Self { name, kind, slicing, only_for: None }
    }

    /// Whether weight decay applies.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    /// The block of this slot used by `view`, or `None` if the view does not
    /// touch it at all.
    pub fn active_spec(&self, shape: &[usize], view: &SubnetworkView) -> Option<SliceSpec> {
        match self.only_for {
            Some(k) if k != view.k => None,
            _ => Some(self.slicing.spec(shape, view)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<P> {
    pub norm1: Norm<P>,
    pub qkv: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier<P> {
    /// One `E × C` head, input-sliced to the first `w` rows per subnetwork.
    Shared(Linear<P>),
    /// One `(k · head_dim) × C` head per supported `k`.
    Separate(BTreeMap<usize, Linear<P>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<P> {
    pub patch_embed: Linear<P>,
    pub cls_token: P,
    pub pos_embed: P,
    pub blocks: Vec<Block<P>>,
    pub norm: Norm<P>,
    pub head: Classifier<P>,
}

/// The single weight set every subnetwork is a prefix slice of.
pub type UniversalWeights<T> = Params<Tensor<T>>;

type MapFn<'f, P, Q, E> = dyn FnMut(&ParamInfo, &P) -> std::result::Result<Q, E> + 'f;

impl<P> Linear<P> {
    fn try_map<Q, E>(
        &self,
        name: &str,
        ws: Slicing,
        bs: Slicing,
        f: &mut MapFn<'_, P, Q, E>,
    ) -> std::result::Result<Linear<Q>, E> {
        Ok(Linear {
            weight: f(&ParamInfo::new(format!("{name}.weight"), ParamKind::Weight, ws), &self.weight)?,
            bias: f(&ParamInfo::new(format!("{name}.bias"), ParamKind::Bias, bs), &self.bias)?,
        })
    }

    fn visit_mut(&mut self, name: &str, ws: Slicing, bs: Slicing, f: &mut dyn FnMut(&ParamInfo, &mut P)) {
        f(&ParamInfo::new(format!("{name}.weight"), ParamKind::Weight, ws), &mut self.weight);
        f(&ParamInfo::new(format!("{name}.bias"), ParamKind::Bias, bs), &mut self.bias);
    }
}

impl<P> Norm<P> {
    fn try_map<Q, E>(&self, name: &str, f: &mut MapFn<'_, P, Q, E>) -> std::result::Result<Norm<Q>, E> {
        Ok(Norm {
            gamma: f(&ParamInfo::new(format!("{name}.gamma"), ParamKind::Gamma, Slicing::Embed), &self.gamma)?,
            beta: f(&ParamInfo::new(format!("{name}.beta"), ParamKind::Beta, Slicing::Embed), &self.beta)?,
        })
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&ParamInfo, &mut P)) {
        f(&ParamInfo::new(format!("{name}.gamma"), ParamKind::Gamma, Slicing::Embed), &mut self.gamma);
        f(&ParamInfo::new(format!("{name}.beta"), ParamKind::Beta, Slicing::Embed), &mut self.beta);
    }
}

impl<P> Block<P> {
    fn try_map<Q, E>(&self, name: &str, f: &mut MapFn<'_, P, Q, E>) -> std::result::Result<Block<Q>, E> {
        Ok(Block {
            norm1: self.norm1.try_map(&format!("{name}.norm1"), f)?,
            qkv: self.qkv.try_map(&format!("{name}.attn.qkv"), Slicing::Qkv, Slicing::QkvBias, f)?,
            proj: self.proj.try_map(&format!("{name}.attn.proj"), Slicing::EmbedSquare, Slicing::Embed, f)?,
            norm2: self.norm2.try_map(&format!("{name}.norm2"), f)?,
            fc1: self.fc1.try_map(&format!("{name}.mlp.fc1"), Slicing::EmbedToHidden, Slicing::Hidden, f)?,
            fc2: self.fc2.try_map(&format!("{name}.mlp.fc2"), Slicing::HiddenToEmbed, Slicing::Embed, f)?,
        })
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&ParamInfo, &mut P)) {
        self.norm1.visit_mut(&format!("{name}.norm1"), f);
        self.qkv.visit_mut(&format!("{name}.attn.qkv"), Slicing::Qkv, Slicing::QkvBias, f);
        self.proj.visit_mut(&format!("{name}.attn.proj"), Slicing::EmbedSquare, Slicing::Embed, f);
        self.norm2.visit_mut(&format!("{name}.norm2"), f);
        self.fc1.visit_mut(&format!("{name}.mlp.fc1"), Slicing::EmbedToHidden, Slicing::Hidden, f);
        self.fc2.visit_mut(&format!("{name}.mlp.fc2"), Slicing::HiddenToEmbed, Slicing::Embed, f);
    }
}

fn separate_info(k: usize, part: &str, kind: ParamKind) -> ParamInfo {
    ParamInfo { name: format!("heads.{k}.{part}"), kind, slicing: Slicing::Whole, only_for: Some(k) }
}

impl<P> Params<P> {
    /// Structure-preserving map over every slot, in canonical order.
    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&ParamInfo, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<Params<Q>, E> {
        let f: &mut MapFn<'_, P, Q, E> = &mut f;
        let patch_embed = self.patch_embed.try_map("patch_embed", Slicing::EmbedCols, Slicing::Embed, f)?;
        let cls_token = f(&ParamInfo::new("cls_token".into(), ParamKind::Token, Slicing::EmbedCols), &self.cls_token)?;
        let pos_embed = f(&ParamInfo::new("pos_embed".into(), ParamKind::Token, Slicing::EmbedCols), &self.pos_embed)?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("blocks.{i}"), f))
            .collect::<std::result::Result<Vec<_>, E>>()?;
        let norm = self.norm.try_map("norm", f)?;
        let head = match &self.head {
            Classifier::Shared(l) => Classifier::Shared(l.try_map("head", Slicing::EmbedRows, Slicing::Whole, f)?),
            Classifier::Separate(heads) => {
                let mut out = BTreeMap::new();
                for (&k, l) in heads {
                    let weight = f(&separate_info(k, "weight", ParamKind::Weight), &l.weight)?;
                    let bias = f(&separate_info(k, "bias", ParamKind::Bias), &l.bias)?;
                    out.insert(k, Linear { weight, bias });
                }
                Classifier::Separate(out)
            }
        };
        Ok(Params { patch_embed, cls_token, pos_embed, blocks, norm, head })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&ParamInfo, &P) -> Q) -> Params<Q> {
        self.try_map(|i, p| Ok::<Q, std::convert::Infallible>(f(i, p))).unwrap_or_else(|e| match e {})
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&ParamInfo, &mut P)) {
        let f: &mut dyn FnMut(&ParamInfo, &mut P) = &mut f;
        self.patch_embed.visit_mut("patch_embed", Slicing::EmbedCols, Slicing::Embed, f);
        f(&ParamInfo::new("cls_token".into(), ParamKind::Token, Slicing::EmbedCols), &mut self.cls_token);
        f(&ParamInfo::new("pos_embed".into(), ParamKind::Token, Slicing::EmbedCols), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.norm.visit_mut("norm", f);
        match &mut self.head {
            Classifier::Shared(l) => l.visit_mut("head", Slicing::EmbedRows, Slicing::Whole, f),
            Classifier::Separate(heads) => {
                for (&k, l) in heads.iter_mut() {
                    f(&separate_info(k, "weight", ParamKind::Weight), &mut l.weight);
                    f(&separate_info(k, "bias", ParamKind::Bias), &mut l.bias);
                }
            }
        }
    }

    /// Every slot with its description, in canonical order.
    pub fn entries(&self) -> Vec<(ParamInfo, &P)> {
        let mut out = Vec::new();
        // `map` visits in canonical order; collect references alongside.
        let infos = self.map(|info, _| info.clone());
        infos.collect_into(self, &mut out);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(ParamInfo, &mut P)> {
        let mut infos = Vec::new();
        self.visit_mut(|info, _| infos.push(info.clone()));
        let mut refs = Vec::with_capacity(infos.len());
        self.refs_mut(&mut refs);
        infos.into_iter().zip(refs).collect()
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        fn lin<'a, P>(l: &'a mut Linear<P>, out: &mut Vec<&'a mut P>) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        fn norm<'a, P>(n: &'a mut Norm<P>, out: &mut Vec<&'a mut P>) {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        lin(&mut self.patch_embed, out);
        out.push(&mut self.cls_token);
        out.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            norm(&mut b.norm1, out);
            lin(&mut b.qkv, out);
            lin(&mut b.proj, out);
            norm(&mut b.norm2, out);
            lin(&mut b.fc1, out);
            lin(&mut b.fc2, out);
        }
        norm(&mut self.norm, out);
        match &mut self.head {
            Classifier::Shared(l) => lin(l, out),
            Classifier::Separate(heads) => heads.values_mut().for_each(|l| lin(l, out)),
        }
    }

    fn refs<'a>(&'a self, out: &mut Vec<&'a P>) {
        let lin = |l: &'a Linear<P>, out: &mut Vec<&'a P>| {
            out.push(&l.weight);
            out.push(&l.bias);
        };
        let norm = |n: &'a Norm<P>, out: &mut Vec<&'a P>| {
            out.push(&n.gamma);
            out.push(&n.beta);
        };
        lin(&self.patch_embed, out);
        out.push(&self.cls_token);
        out.push(&self.pos_embed);
        for b in &self.blocks {
            norm(&b.norm1, out);
            lin(&b.qkv, out);
            lin(&b.proj, out);
            norm(&b.norm2, out);
            lin(&b.fc1, out);
            lin(&b.fc2, out);
        }
        norm(&self.norm, out);
        match &self.head {
            Classifier::Shared(l) => lin(l, out),
            Classifier::Separate(heads) => heads.values().for_each(|l| lin(l, out)),
        }
    }
}

impl Params<ParamInfo> {
    fn collect_into<'a, P>(&self, values: &'a Params<P>, out: &mut Vec<(ParamInfo, &'a P)>) {
        let mut infos = Vec::new();
        self.refs(&mut infos);
        let mut refs = Vec::new();
        values.refs(&mut refs);
        out.extend(infos.into_iter().cloned().zip(refs));
    }
}

impl Params<Vec<usize>> {
    /// Shapes of every universal parameter for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let e = cfg.embed_dim;
        let m = cfg.mlp_hidden;
        let c = cfg.num_classes;
        let lin = |i: usize, o: usize| Linear { weight: vec![i, o], bias: vec![o] };
        let norm = || Norm { gamma: vec![e], beta: vec![e] };
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                norm1: norm(),
                qkv: lin(e, 3 * e),
                proj: lin(e, e),
                norm2: norm(),
                fc1: lin(e, m),
                fc2: lin(m, e),
            })
            .collect();
        let head = if cfg.separate_classifiers {
            Classifier::Separate(cfg.supported_heads().map(|k| (k, lin(k * cfg.head_dim, c))).collect())
        } else {
            Classifier::Shared(lin(e, c))
        };
        Params {
            patch_embed: lin(cfg.patch_dim(), e),
            cls_token: vec![1, e],
            pos_embed: vec![cfg.tokens(), e],
            blocks,
            norm: norm(),
            head,
        }
    }
}

impl<T: Float> UniversalWeights<T> {
    /// Total number of stored values.
    pub fn numel(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Params::shapes(cfg);
        let have = self.entries();
        let want = expected.entries();
        if have.len() != want.len() {
            return Err(crate::Error::config(format!("{} tensors, layout expects {}", have.len(), want.len())));
        }
        for ((info, t), (winfo, shape)) in have.iter().zip(&want) {
            if info.name != winfo.name || t.shape() != shape.as_slice() {
                return Err(crate::Error::config(format!(
                    "{} has shape {:?}, layout expects {} {:?}",
                    info.name,
                    t.shape(),
                    winfo.name,
                    shape
                )));
            }
        }
        Ok(())
    }
}
