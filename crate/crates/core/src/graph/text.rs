// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-oriented text serialization of graphs.
//!
//! ```text
//! pathpatch-graph 1
//! # comments and blank lines are ignored
//! node x input shape=2 domain=real
//! node W0 const shape=2,2 data=0.5,0,0,0.5
//! node f0 matmul x W0
//! node A add f0 x
//! output A
//! ```
//!
//! Each `node` line is `node <name> <kind> [key=value ...] [input ...]`:
//! tokens containing `=` are parameters, the rest are input names in port
//! order. Nodes may appear in any order. Floats are written in Rust's
//! shortest round-trip form, so `to_text` followed by `from_text` is exact.
//!
//! | kind            | parameters                                 | inputs |
//! |-----------------|--------------------------------------------|--------|
//! | `input`         | `shape=d0,d1,..` `domain=real\|tokens:V`   | 0      |
//! | `labels`        | `len=N` `vocab=V`                          | 0      |
//! | `const`         | `shape=..` `data=v0,v1,..`                 | 0      |
//! | `param`         | `key=NAME` (looked up in a weight bundle)  | 0      |
//! | `add`           |                                            | 2      |
//! | `sum`           |                                            | >= 1   |
//! | `scale`         | `factor=F`                                 | 1      |
//! | `matmul`        |                                            | 2      |
//! | `transpose`     |                                            | 1      |
//! | `softmax`       | `axis=A`                                   | 1      |
//! | `layernorm`     | `eps=E`                                    | 3      |
//! | `embed`         |                                            | 2      |
//! | `slice`         | `axis=A` `start=S` `stop=T`                | 1      |
//! | `concat`        | `axis=A`                                   | >= 1   |
//! | `causal-mask`   |                                            | 1      |
//! | `cross-entropy` |                                            | 2      |
//! | `alias`         |                                            | 1      |
//! | `attention`     | `heads=H` `head_dim=D` `scale=F`           | 7      |

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use super::{Graph, InputDomain, NodeKind, NodeSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRAPH_FORMAT_HEADER: &str = "pathpatch-graph";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Graph {
    /// Serialize with every constant written inline.
    pub fn to_text(&self) -> String {
        let mut out = format!("{GRAPH_FORMAT_HEADER} {GRAPH_FORMAT_VERSION}\n");
        for node in self.nodes() {
            let mut line = format!("node {} {}", node.name, node.kind.keyword());
            let params = match &node.kind {
                NodeKind::Input { shape, domain } => {
                    let d = match domain {
                        InputDomain::Real => "real".to_owned(),
                        InputDomain::Tokens { vocab } => format!("tokens:{vocab}"),
                    };
                    format!(" shape={} domain={d}", join(shape))
                }
                NodeKind::Labels { len, vocab } => format!(" len={len} vocab={vocab}"),
                NodeKind::Constant(t) => {
                    let data: Vec<String> = t.data().iter().map(|&v| fmt_f64(v)).collect();
                    format!(" shape={} data={}", join(t.shape()), data.join(","))
                }
                NodeKind::ScalarMul(f) => format!(" factor={}", fmt_f64(*f)),
                NodeKind::Softmax { axis } | NodeKind::Concat { axis } => format!(" axis={axis}"),
                NodeKind::LayerNorm { eps } => format!(" eps={}", fmt_f64(*eps)),
                NodeKind::Slice { axis, start, stop } => {
                    format!(" axis={axis} start={start} stop={stop}")
                }
                NodeKind::Attention {
                    heads,
                    head_dim,
                    scale,
                } => format!(" heads={heads} head_dim={head_dim} scale={}", fmt_f64(*scale)),
                _ => String::new(),
            };
            line.push_str(&params);
            for &inp in &node.inputs {
                let _ = write!(line, " {}", self.name(inp));
            }
            out.push_str(&line);
            out.push('\n');
        }
        let _ = writeln!(out, "output {}", self.name(self.output()));
        out
    }

    /// Parse the text format. `params` resolves `param key=...` nodes.
    pub fn from_text(text: &str, params: Option<&BTreeMap<String, Tensor>>) -> Result<Graph> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty graph file".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(GRAPH_FORMAT_HEADER) {
            return Err(Error::Format(format!(
                "line 1: expected `{GRAPH_FORMAT_HEADER} <version>` header"
            )));
        }
        match head.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(GRAPH_FORMAT_VERSION) => {}
            other => {
                return Err(Error::Format(format!(
                    "unsupported graph format version {other:?}"
                )))
            }
        }
        let mut specs = Vec::new();
        let mut output = None;
        for (lineno, line) in lines {
            let err = |msg: String| Error::Format(format!("line {lineno}: {msg}"));
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("output") => {
                    output = Some(
                        tokens
                            .next()
                            .ok_or_else(|| err("`output` needs a name".into()))?
                            .to_owned(),
                    );
                }
                Some("node") => {
                    let name = tokens.next().ok_or_else(|| err("missing node name".into()))?;
                    let keyword = tokens.next().ok_or_else(|| err("missing node kind".into()))?;
                    let mut kv = HashMap::new();
                    let mut inputs = Vec::new();
                    for t in tokens {
                        match t.split_once('=') {
                            Some((k, v)) => {
                                kv.insert(k, v);
                            }
                            None => inputs.push(t.to_owned()),
                        }
                    }
                    let kind = parse_kind(keyword, &kv, params).map_err(|e| match e {
                        Error::Format(m) => err(m),
                        other => other,
                    })?;
                    specs.push(NodeSpec {
                        name: name.to_owned(),
                        kind,
                        inputs,
                    });
                }
                Some(other) => return Err(err(format!("unknown directive `{other}`"))),
                None => unreachable!("blank lines filtered"),
            }
        }
        let output = output.ok_or_else(|| Error::Format("missing `output` line".into()))?;
        Graph::build(specs, &output)
    }
}

fn parse_kind(
    keyword: &str,
    kv: &HashMap<&str, &str>,
    params: Option<&BTreeMap<String, Tensor>>,
) -> Result<NodeKind> {
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("`{keyword}` needs `{k}=`")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("`{k}` must be a non-negative integer")))
    };
    let f64_of = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("`{k}` must be a number")))
    };
    let shape_of = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split(',')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Format(format!("bad dimension `{d}`")))
            })
            .collect()
    };
    Ok(match keyword {
        "input" => {
            let domain = match kv.get("domain").copied().unwrap_or("real") {
                "real" => InputDomain::Real,
                d => match d.strip_prefix("tokens:").and_then(|v| v.parse().ok()) {
                    Some(vocab) => InputDomain::Tokens { vocab },
                    None => return Err(Error::Format(format!("bad domain `{d}`"))),
                },
            };
            NodeKind::Input {
                shape: shape_of("shape")?,
                domain,
            }
        }
        "labels" => NodeKind::Labels {
            len: usize_of("len")?,
            vocab: usize_of("vocab")?,
        },
        "const" => {
            let data: Vec<f64> = get("data")?
                .split(',')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Format(format!("bad constant value `{v}`")))
                })
                .collect::<Result<_>>()?;
            NodeKind::Constant(Arc::new(Tensor::new(shape_of("shape")?, data)?))
        }
        "param" => {
            let key = get("key")?;
            let value = params
                .and_then(|p| p.get(key))
                .ok_or_else(|| Error::Format(format!("parameter `{key}` not provided")))?;
            NodeKind::Constant(Arc::new(value.clone()))
        }
        "add" => NodeKind::Add,
        "sum" => NodeKind::Sum,
        "scale" => NodeKind::ScalarMul(f64_of("factor")?),
        "matmul" => NodeKind::MatMul,
        "transpose" => NodeKind::Transpose,
        "softmax" => NodeKind::Softmax {
            axis: usize_of("axis")?,
        },
        "layernorm" => NodeKind::LayerNorm { eps: f64_of("eps")? },
        "embed" => NodeKind::EmbedLookup,
        "slice" => NodeKind::Slice {
            axis: usize_of("axis")?,
            start: usize_of("start")?,
            stop: usize_of("stop")?,
        },
        "concat" => NodeKind::Concat {
            axis: usize_of("axis")?,
        },
        "causal-mask" => NodeKind::CausalMask,
        "cross-entropy" => NodeKind::CrossEntropy,
        "alias" => NodeKind::Alias,
        "attention" => NodeKind::Attention {
            heads: usize_of("heads")?,
            head_dim: usize_of("head_dim")?,
            scale: f64_of("scale")?,
        },
        other => return Err(Error::Format(format!("unknown node kind `{other}`"))),
    })
}
