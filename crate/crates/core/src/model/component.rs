use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dot-separated parameter path such as `layer.3.attn.query.weight`.
///
/// Ordering is lexicographic on the path string.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(String);

/// Which part of the network a component belongs to. Layers are 1-based,
/// 1 being the bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Embed,
    Layer(usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Bias,
    Gain,
    Table,
}

impl ComponentId {
    pub fn new(path: impl Into<String>) -> Self {
        ComponentId(path.into())
    }

    pub fn layer(index: usize, rest: &str) -> Self {
        ComponentId(format!("layer.{index}.{rest}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn scope(&self) -> Option<Scope> {
        let mut parts = self.0.split('.');
        match parts.next()? {
            "embed" => Some(Scope::Embed),
            "head" => Some(Scope::Head),
            "layer" => {
                let i: usize = parts.next()?.parse().ok()?;
                (i >= 1).then_some(Scope::Layer(i))
            }
            _ => None,
        }
    }

    pub fn layer_index(&self) -> Option<usize> {
        match self.scope()? {
            Scope::Layer(i) => Some(i),
            _ => None,
        }
    }

    /// Functional role, e.g. `attn.query` or `ffn.w1`.
    pub fn role(&self) -> &str {
        let body = match self.scope() {
            Some(Scope::Layer(_)) => self.0.splitn(3, '.').nth(2).unwrap_or(""),
            Some(_) => self.0.split_once('.').map_or("", |(_, r)| r),
            None => &self.0,
        };
        body.rsplit_once('.').map_or(body, |(r, _)| r)
    }

    pub fn kind(&self) -> Kind {
        match self.0.rsplit('.').next().unwrap_or("") {
            "bias" => Kind::Bias,
            "gain" => Kind::Gain,
            "token" | "position" => Kind::Table,
            _ => Kind::Weight,
        }
    }

    /// Decoupled weight decay skips biases and layer-norm gains.
    pub fn takes_weight_decay(&self) -> bool {
        matches!(self.kind(), Kind::Weight | Kind::Table)
    }

    pub fn parse(path: &str) -> Result<Self> {
        let id = ComponentId::new(path);
        if id.scope().is_none() {
            return Err(Error::MissingComponent(path.to_string()));
        }
        Ok(id)
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for ComponentId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ComponentId {
    fn from(s: &str) -> Self {
        ComponentId::new(s)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Embed => f.write_str("embed"),
            Scope::Layer(i) => write!(f, "{i}"),
            Scope::Head => f.write_str("head"),
        }
    }
}

impl Scope {
    pub fn parse(s: &str) -> Option<Scope> {
        match s {
            "embed" => Some(Scope::Embed),
            "head" => Some(Scope::Head),
            other => other.parse().ok().filter(|&i| i >= 1).map(Scope::Layer),
        }
    }
}

/// The 16 per-layer parameter roles, relative to `layer.<i>.`.
pub const LAYER_COMPONENTS: [&str; 16] = [
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.output.weight",
    "attn.output.bias",
    "ffn.w1.weight",
    "ffn.w1.bias",
    "ffn.w2.weight",
    "ffn.w2.bias",
    "ln1.gain",
    "ln1.bias",
    "ln2.gain",
    "ln2.bias",
];

pub const EMBED_TOKEN: &str = "embed.token";
pub const EMBED_POSITION: &str = "embed.position";
pub const HEAD_WEIGHT: &str = "head.out.weight";
pub const HEAD_BIAS: &str = "head.out.bias";
