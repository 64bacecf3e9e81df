// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-only transformers as computation graphs.
//!
//! Node naming (layer `L`, head `H`):
//!
//! | node | value |
//! |------|-------|
//! | `tok`, `labels` | token ids and next-token labels |
//! | `embed` | token embeddings (the residual stream before layer 0) |
//! | `pos` | positional table; reaches queries and keys only |
//! | `lnL` | layer norm (or identity) of the residual stream |
//! | `aL.qk_in` | `lnL + pos`, the query and key source |
//! | `aL.hH.{q,k,v,attn,z,o}` | per-head intermediates |
//! | `aL` | sum of head outputs |
//! | `residL` | residual stream after layer `L - 1` |
//! | `lnf`, `unembed`, `loss` | final norm, logits, per-token loss |
//!
//! Value inputs read `lnL` directly, so positional information never
//! enters the residual stream.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fixtures::random_tensor;
use crate::graph::{Binding, Evaluator, Graph, GraphBuilder, NodeId, NodeKind, REFERENCE};
use crate::rewrites::split_attention_heads;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Token id prepended to every sequence.
pub const BEGIN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    /// Positions are added to query and key inputs only.
    Shortformer,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormMode {
    On,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unembedding {
    Separate,
    /// Logits use the transposed embedding table.
    Tied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub vocab: usize,
    /// Sequence length of the built graph.
    pub context: usize,
    pub positional: PositionalScheme,
    pub layer_norm: LayerNormMode,
    pub unembedding: Unembedding,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            heads: 8,
            d_model: 64,
            head_dim: 8,
            vocab: 64,
            context: 16,
            positional: PositionalScheme::Shortformer,
            layer_norm: LayerNormMode::On,
            unembedding: Unembedding::Separate,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context < 2 {
            return Err(Error::Config(format!("context must be at least 2, got {}", self.context)));
        }
        if self.vocab < 2 || self.d_model == 0 || self.head_dim == 0 || (self.layers > 0 && self.heads == 0) {
            return Err(Error::Config(format!("degenerate transformer dimensions: {self:?}")));
        }
        Ok(())
    }

    /// Head labels `"L.H"` in (layer, head) order.
    pub fn head_labels(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| format!("{l}.{h}")))
            .collect()
    }
}

/// Graph node holding head `label` (`"L.H"`)'s output.
pub fn head_output_node(label: &str) -> Result<String> {
    let (l, h) = label
        .split_once('.')
        .ok_or_else(|| Error::Argument(format!("head label `{label}` is not of the form L.H")))?;
    Ok(format!("a{l}.h{h}.o"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// `[d_model, head_dim]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[head_dim, d_model]`
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    /// `[vocab, d_model]`
    pub embed: Tensor,
    /// `[context, d_model]`; ignored without shortformer positions.
    pub pos: Tensor,
    /// `[d_model, vocab]`; absent when tied.
    pub unembed: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
}

impl WeightBundle {
    /// Gaussian weights, with layer-norm gains near 1.
    pub fn random(cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, hd) = (cfg.d_model, cfg.head_dim);
        let s = 1.0 / (d as f64).sqrt();
        let gain = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let noise = random_tensor(rng, &[d], 0.1)?;
            noise.add(&Tensor::filled(&[d], 1.0)?)
        };
        let mut layers = Vec::new();
        for _ in 0..cfg.layers {
            let heads = (0..cfg.heads)
                .map(|_| {
                    Ok(HeadWeights {
                        wq: random_tensor(&mut rng, &[d, hd], s)?,
                        wk: random_tensor(&mut rng, &[d, hd], s)?,
                        wv: random_tensor(&mut rng, &[d, hd], s)?,
                        wo: random_tensor(&mut rng, &[hd, d], 1.0 / (hd as f64).sqrt())?,
                    })
                })
                .collect::<Result<_>>()?;
            layers.push(LayerWeights {
                heads,
                ln_gain: gain(&mut rng)?,
                ln_bias: random_tensor(&mut rng, &[d], 0.1)?,
            });
        }
        Ok(WeightBundle {
            embed: random_tensor(&mut rng, &[cfg.vocab, d], 1.0)?,
            pos: random_tensor(&mut rng, &[cfg.context, d], 1.0)?,
            unembed: match cfg.unembedding {
                Unembedding::Separate => Some(random_tensor(&mut rng, &[d, cfg.vocab], s)?),
                Unembedding::Tied => None,
            },
            layers,
            lnf_gain: gain(&mut rng)?,
            lnf_bias: random_tensor(&mut rng, &[d], 0.1)?,
        })
    }

    /// Parameters in a fixed order with their canonical names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_owned(), &self.embed), ("pos".to_owned(), &self.pos)];
        if let Some(u) = &self.unembed {
            out.push(("unembed".to_owned(), u));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("a{l}.h{h}.wq"), &head.wq));
                out.push((format!("a{l}.h{h}.wk"), &head.wk));
                out.push((format!("a{l}.h{h}.wv"), &head.wv));
                out.push((format!("a{l}.h{h}.wo"), &head.wo));
            }
            out.push((format!("ln{l}.gain"), &layer.ln_gain));
            out.push((format!("ln{l}.bias"), &layer.ln_bias));
        }
        out.push(("lnf.gain".to_owned(), &self.lnf_gain));
        out.push(("lnf.bias".to_owned(), &self.lnf_bias));
        out
    }

    fn from_named(cfg: &TransformerConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str| {
            named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("weights lack tensor `{name}`")))
        };
        let embed = take("embed")?;
        let pos = take("pos")?;
        let unembed = match cfg.unembedding {
            Unembedding::Separate => Some(take("unembed")?),
            Unembedding::Tied => None,
        };
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let mut heads = Vec::new();
            for h in 0..cfg.heads {
                heads.push(HeadWeights {
                    wq: take(&format!("a{l}.h{h}.wq"))?,
                    wk: take(&format!("a{l}.h{h}.wk"))?,
                    wv: take(&format!("a{l}.h{h}.wv"))?,
                    wo: take(&format!("a{l}.h{h}.wo"))?,
                });
            }
            layers.push(LayerWeights {
                heads,
                ln_gain: take(&format!("ln{l}.gain"))?,
                ln_bias: take(&format!("ln{l}.bias"))?,
            });
        }
        let bundle = WeightBundle {
            embed,
            pos,
            unembed,
            layers,
            lnf_gain: take("lnf.gain")?,
            lnf_bias: take("lnf.bias")?,
        };
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in weights")));
        }
        Ok(bundle)
    }

    /// Check every shape against `cfg`; errors name the offending tensor.
    pub fn validate(&self, cfg: &TransformerConfig) -> Result<()> {
        cfg.validate()?;
        let (d, hd, v) = (cfg.d_model, cfg.head_dim, cfg.vocab);
        let mut expect: Vec<(String, Vec<usize>)> = vec![
            ("embed".into(), vec![v, d]),
            ("pos".into(), vec![cfg.context, d]),
        ];
        if cfg.unembedding == Unembedding::Separate {
            expect.push(("unembed".into(), vec![d, v]));
        }
        if self.layers.len() != cfg.layers {
            return Err(Error::shape(
                "layers",
                format!("expected {} layers, got {}", cfg.layers, self.layers.len()),
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != cfg.heads {
                return Err(Error::shape(
                    format!("a{l}"),
                    format!("expected {} heads, got {}", cfg.heads, layer.heads.len()),
                ));
            }
            for h in 0..cfg.heads {
                for w in ["wq", "wk", "wv"] {
                    expect.push((format!("a{l}.h{h}.{w}"), vec![d, hd]));
                }
                expect.push((format!("a{l}.h{h}.wo"), vec![hd, d]));
            }
            expect.push((format!("ln{l}.gain"), vec![d]));
            expect.push((format!("ln{l}.bias"), vec![d]));
        }
        expect.push(("lnf.gain".into(), vec![d]));
        expect.push(("lnf.bias".into(), vec![d]));
        let named: BTreeMap<String, &Tensor> = self.named_tensors().into_iter().collect();
        for (name, shape) in expect {
            let t = named
                .get(&name)
                .ok_or_else(|| Error::shape(name.clone(), "missing"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    name,
                    format!("expected shape {shape:?}, got {:?}", t.shape()),
                ));
            }
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("weight `{name}`")));
            }
        }
        if self.unembed.is_some() && cfg.unembedding == Unembedding::Tied {
            return Err(Error::shape("unembed", "tied unembedding must not carry its own matrix"));
        }
        Ok(())
    }

    /// `W_U`, resolving tied unembeddings.
    pub fn unembedding(&self) -> Result<Tensor> {
        match &self.unembed {
            Some(u) => Ok(u.clone()),
            None => self.embed.transpose(),
        }
    }

    /// Token embeddings of `ids`, for graphs fed embeddings directly.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let ids = Tensor::vector(ids.iter().map(|&i| i as f64).collect())?;
        self.embed.embed_lookup(&ids)
    }
}

/// How token information enters the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Leaf `tok` holds ids; `embed` looks them up.
    #[default]
    Tokens,
    /// Leaf `embed` holds embeddings, so real-valued noise can be added.
    Embeddings,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Per-token cross-entropy against `labels`.
    #[default]
    Loss,
    /// Logits `[positions, vocab]`.
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphOptions {
    pub input: InputMode,
    pub output: OutputMode,
    /// Replace each fused attention node by per-head nodes.
    pub split_heads: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            input: InputMode::Tokens,
            output: OutputMode::Loss,
            split_heads: true,
        }
    }
}

fn fuse_columns(parts: &[&Tensor]) -> Result<Tensor> {
    Tensor::concat(parts, 1)
}

/// Build the transformer graph.
pub fn build_transformer_graph(cfg: &TransformerConfig, w: &WeightBundle, opts: GraphOptions) -> Result<Graph> {
    w.validate(cfg)?;
    let (n, d) = (cfg.context, cfg.d_model);
    let mut b = GraphBuilder::new();
    let embed = match opts.input {
        InputMode::Tokens => {
            let tok = b.tokens("tok", n, cfg.vocab)?;
            let table = b.constant("embed.table", w.embed.clone())?;
            b.add("embed", NodeKind::EmbedLookup, &[table, tok])?
        }
        InputMode::Embeddings => b.input("embed", &[n, d])?,
    };
    let pos = match cfg.positional {
        PositionalScheme::Shortformer => Some(b.constant("pos", w.pos.clone())?),
        PositionalScheme::None => None,
    };
    let norm = |b: &mut GraphBuilder, name: &str, x: NodeId, gain: &Tensor, bias: &Tensor| -> Result<NodeId> {
        match cfg.layer_norm {
            LayerNormMode::On => {
                let g = b.constant(&format!("{name}.gain"), gain.clone())?;
                let bb = b.constant(&format!("{name}.bias"), bias.clone())?;
                b.add(name, NodeKind::LayerNorm { eps: LAYER_NORM_EPS }, &[x, g, bb])
            }
            LayerNormMode::Identity => b.add(name, NodeKind::Alias, &[x]),
        }
    };
    let mut resid = embed;
    for (l, layer) in w.layers.iter().enumerate() {
        let ln = norm(&mut b, &format!("ln{l}"), resid, &layer.ln_gain, &layer.ln_bias)?;
        let qk_in = match pos {
            Some(p) => b.add(format!("a{l}.qk_in"), NodeKind::Add, &[ln, p])?,
            None => b.add(format!("a{l}.qk_in"), NodeKind::Alias, &[ln])?,
        };
        let fused = |pick: fn(&HeadWeights) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = layer.heads.iter().map(pick).collect();
            fuse_columns(&parts)
        };
        let wq = b.constant(&format!("a{l}.wq"), fused(|h| &h.wq)?)?;
        let wk = b.constant(&format!("a{l}.wk"), fused(|h| &h.wk)?)?;
        let wv = b.constant(&format!("a{l}.wv"), fused(|h| &h.wv)?)?;
        let wo_parts: Vec<&Tensor> = layer.heads.iter().map(|h| &h.wo).collect();
        let wo = b.constant(&format!("a{l}.wo"), Tensor::concat(&wo_parts, 0)?)?;
        let attn = b.add(
            format!("a{l}"),
            NodeKind::Attention {
                heads: cfg.heads,
                head_dim: cfg.head_dim,
                scale: 1.0 / (cfg.head_dim as f64).sqrt(),
            },
            &[qk_in, qk_in, ln, wq, wk, wv, wo],
        )?;
        resid = b.add(format!("resid{}", l + 1), NodeKind::Add, &[resid, attn])?;
    }
    let lnf = norm(&mut b, "lnf", resid, &w.lnf_gain, &w.lnf_bias)?;
    let wu = b.constant("unembed.w", w.unembedding()?)?;
    let logits = b.add("unembed", NodeKind::MatMul, &[lnf, wu])?;
    let out = match opts.output {
        OutputMode::Logits => logits,
        OutputMode::Loss => {
            let labels = b.labels("labels", n, cfg.vocab)?;
            b.add("loss", NodeKind::CrossEntropy, &[logits, labels])?
        }
    };
    let mut g = b.finish(out)?;
    if opts.split_heads {
        for l in 0..cfg.layers {
            g = split_attention_heads(&g, &format!("a{l}"))?;
        }
    }
    Ok(g)
}

/// Binding for one token sequence: `tok` (or `embed`) and `labels`.
pub fn sequence_binding(
    cfg: &TransformerConfig,
    w: &WeightBundle,
    mode: InputMode,
    ids: &[usize],
    labels: &[usize],
) -> Result<Binding> {
    if ids.len() != cfg.context || labels.len() != cfg.context {
        return Err(Error::shape(
            "tok",
            format!(
                "sequence of length {} with {} labels for context {}",
                ids.len(),
                labels.len(),
                cfg.context
            ),
        ));
    }
    if let Some(&bad) = ids.iter().chain(labels).find(|&&t| t >= cfg.vocab) {
        return Err(Error::Argument(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let as_tensor = |v: &[usize]| Tensor::vector(v.iter().map(|&i| i as f64).collect());
    let b = Binding::new().with("labels", as_tensor(labels)?);
    Ok(match mode {
        InputMode::Tokens => b.with("tok", as_tensor(ids)?),
        InputMode::Embeddings => b.with("embed", w.embed_ids(ids)?),
    })
}

/// Every head's attention pattern, keyed by `"L.H"`.
pub fn attention_patterns(graph: &Graph, binding: &Binding) -> Result<Vec<(String, Tensor)>> {
    let mut ev = Evaluator::new(graph, &[binding]);
    let mut out = Vec::new();
    for id in graph.ids() {
        let name = graph.name(id);
        let Some(rest) = name.strip_prefix('a') else { continue };
        let Some(head) = rest.strip_suffix(".attn") else { continue };
        let Some((l, h)) = head.split_once(".h") else { continue };
        if l.parse::<usize>().is_err() || h.parse::<usize>().is_err() {
            continue;
        }
        out.push((format!("{l}.{h}"), ev.eval_plain(id, REFERENCE)?.as_ref().clone()));
    }
    out.sort_by_key(|(label, _)| {
        let (l, h) = label.split_once('.').expect("formatted above");
        (l.parse::<usize>().unwrap_or(0), h.parse::<usize>().unwrap_or(0))
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// The analytic induction model

/// Output scale of the constructed induction head.
pub const INDUCTION_OUTPUT_SCALE: f64 = 20.0;
/// Largest vocabulary or context the construction supports.
pub const INDUCTION_MAX_DIM: usize = 128;
/// The constructed previous-token head and induction head, as `"L.H"`.
pub const PREVIOUS_TOKEN_HEAD: &str = "0.0";
pub const INDUCTION_HEAD: &str = "1.5";

/// Residual layout of the analytic model: `[token | previous token |
/// output | position]`, with `vocab`, `vocab`, `vocab` and `context`
/// dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InductionLayout {
    pub vocab: usize,
    pub context: usize,
}

impl InductionLayout {
    pub fn token(&self, t: usize) -> usize {
        t
    }
    pub fn previous(&self, t: usize) -> usize {
        self.vocab + t
    }
    pub fn output(&self, t: usize) -> usize {
        2 * self.vocab + t
    }
    pub fn position(&self, p: usize) -> usize {
        3 * self.vocab + p
    }
    pub fn d_model(&self) -> usize {
        3 * self.vocab + self.context
    }
}

/// Dense row-major matrix under construction.
#[derive(Clone)]
struct Buf {
    cols: usize,
    data: Vec<f64>,
}

impl Buf {
    fn zeros(rows: usize, cols: usize) -> Self {
        Buf {
            cols,
            data: vec![0.0; rows * cols],
        }
    }
    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
    fn done(self) -> Tensor {
        let rows = self.data.len() / self.cols;
        Tensor::new(vec![rows, self.cols], self.data).expect("consistent by construction")
    }
}

/// Two-layer, eight-head model with layer norm off whose head 0.0 attends
/// to the previous position and writes that token into the previous-token
/// subspace, and whose head 1.5 attends from a token to the position after
/// its earlier occurrence and writes the token found there to the output
/// subspace. Without an earlier occurrence head 1.5 attends to the BEGIN
/// position, whose value is zero, so logits are uniform. All other heads
/// are zero.
///
/// `beta` sets attention sharpness: head 0.0 scores its target at `beta`
/// and head 1.5 scores a match at `beta` and BEGIN at `beta / 2`.
pub fn construct_induction_model(vocab: usize, context: usize, beta: f64) -> Result<(TransformerConfig, WeightBundle)> {
    if vocab > INDUCTION_MAX_DIM || context > INDUCTION_MAX_DIM {
        return Err(Error::Capacity {
            count: vocab.max(context) as u128,
            cap: INDUCTION_MAX_DIM,
        });
    }
    if vocab < 4 || context < 2 {
        return Err(Error::Argument(format!(
            "induction model needs vocab >= 4 and context >= 2, got {vocab} and {context}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!("beta must be positive, got {beta}")));
    }
    let lay = InductionLayout { vocab, context };
    let d = lay.d_model();
    let hd = (vocab + 1).max(context);
    let cfg = TransformerConfig {
        layers: 2,
        heads: 8,
        d_model: d,
        head_dim: hd,
        vocab,
        context,
        positional: PositionalScheme::Shortformer,
        layer_norm: LayerNormMode::Identity,
        unembedding: Unembedding::Separate,
    };
    // Scores are scaled by 1/sqrt(head_dim) inside attention; undo that.
    let s = (hd as f64).sqrt();
    let mut embed = Buf::zeros(vocab, d);
    for t in 0..vocab {
        embed.set(t, lay.token(t), 1.0);
    }
    let mut pos = Buf::zeros(context, d);
    for p in 0..context {
        pos.set(p, lay.position(p), 1.0);
    }
    let mut unembed = Buf::zeros(d, vocab);
    for t in 0..vocab {
        unembed.set(lay.output(t), t, 1.0);
    }
    let blank = [Buf::zeros(d, hd), Buf::zeros(d, hd), Buf::zeros(d, hd), Buf::zeros(hd, d)];

    // Previous-token head: query at p meets key at p - 1 in column p.
    let [mut q, mut k, mut v, mut o] = blank.clone();
    for p in 0..context {
        q.set(lay.position(p), p, beta * s);
        if p + 1 < context {
            k.set(lay.position(p), p + 1, 1.0);
        }
    }
    for t in 0..vocab {
        v.set(lay.token(t), t, 1.0);
        o.set(t, lay.previous(t), 1.0);
    }
    let pth = HeadWeights {
        wq: q.done(),
        wk: k.done(),
        wv: v.done(),
        wo: o.done(),
    };

    // Induction head: column t matches "current token t" against "previous
    // token t"; column `vocab` is the BEGIN sink.
    let [mut q, mut k, mut v, mut o] = blank.clone();
    for t in 1..vocab {
        q.set(lay.token(t), t, beta * s);
        k.set(lay.previous(t), t, 1.0);
        v.set(lay.token(t), t, 1.0);
        o.set(t, lay.output(t), INDUCTION_OUTPUT_SCALE);
    }
    for t in 0..vocab {
        q.set(lay.token(t), vocab, beta / 2.0 * s);
    }
    k.set(lay.token(BEGIN), vocab, 1.0);
    let ih = HeadWeights {
        wq: q.done(),
        wk: k.done(),
        wv: v.done(),
        wo: o.done(),
    };

    let zero_head = || HeadWeights {
        wq: Tensor::zeros(&[d, hd]),
        wk: Tensor::zeros(&[d, hd]),
        wv: Tensor::zeros(&[d, hd]),
        wo: Tensor::zeros(&[hd, d]),
    };
    let mut layers = Vec::new();
    for l in 0..2 {
        let mut heads: Vec<HeadWeights> = (0..8).map(|_| zero_head()).collect();
        if l == 0 {
            heads[0] = pth.clone();
        } else {
            heads[5] = ih.clone();
        }
        layers.push(LayerWeights {
            heads,
            ln_gain: Tensor::filled(&[d], 1.0)?,
            ln_bias: Tensor::zeros(&[d]),
        });
    }
    let bundle = WeightBundle {
        embed: embed.done(),
        pos: pos.done(),
        unembed: Some(unembed.done()),
        layers,
        lnf_gain: Tensor::filled(&[d], 1.0)?,
        lnf_bias: Tensor::zeros(&[d]),
    };
    bundle.validate(&cfg)?;
    Ok((cfg, bundle))
}

// ---------------------------------------------------------------------------
// Weight files

/// Leading bytes of a weight file.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"PPWB";
pub const WEIGHTS_VERSION: u32 = 1;

/// Serialize `cfg` and `w`.
///
/// Layout, all integers little-endian:
/// magic `PPWB`; `u32` version; `u32` length and UTF-8 JSON of the
/// config; `u32` tensor count; per tensor a `u32` name length, the name,
/// a `u32` rank and `rank` `u64` dimensions; then every tensor's values as
/// `f64`, in table order.
pub fn encode_weights(cfg: &TransformerConfig, w: &WeightBundle) -> Result<Vec<u8>> {
    w.validate(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let named = w.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("weight file truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<(TransformerConfig, WeightBundle)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let len = c.u32()? as usize;
    let cfg: TransformerConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::Format(format!("weight header: {e}")))?;
    let count = c.u32()? as usize;
    let mut table = Vec::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| Ok(c.u64()? as usize))
            .collect::<Result<Vec<usize>>>()?;
        table.push((name, shape));
    }
    let mut named = BTreeMap::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if named.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if c.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in weight file", bytes.len() - c.at)));
    }
    let w = WeightBundle::from_named(&cfg, named)?;
    w.validate(&cfg).map_err(|e| Error::Format(format!("weights do not match their header: {e}")))?;
    Ok((cfg, w))
}

/// SHA-256 of the encoded weights, as lowercase hex.
pub fn weights_hash(cfg: &TransformerConfig, w: &WeightBundle) -> Result<String> {
    Ok(hex(&Sha256::digest(encode_weights(cfg, w)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_weights(path: &Path, cfg: &TransformerConfig, w: &WeightBundle) -> Result<()> {
    let bytes = encode_weights(cfg, w)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(TransformerConfig, WeightBundle)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
