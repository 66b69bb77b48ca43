use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Which tap point a hook site refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Residual stream after an encoder block's last residual addition.
    EncoderBlockOut,
    /// Residual stream after a decoder block's last residual addition.
    DecoderBlockOut,
    /// Cross-attention sublayer output, before it joins the residual stream.
    CrossAttentionOut,
}

impl SiteKind {
    pub fn code(self) -> u8 {
        match self {
            SiteKind::EncoderBlockOut => 0,
            SiteKind::DecoderBlockOut => 1,
            SiteKind::CrossAttentionOut => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SiteKind::EncoderBlockOut),
            1 => Some(SiteKind::DecoderBlockOut),
            2 => Some(SiteKind::CrossAttentionOut),
            _ => None,
        }
    }

    /// True when rows at this site correspond to context positions.
    pub fn is_encoder(self) -> bool {
        self == SiteKind::EncoderBlockOut
    }
}

/// A named location in the forward pass where activations can be read or
/// replaced. Text form: `enc.<i>`, `dec.<i>`, `xattn.<i>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookSite {
    pub kind: SiteKind,
    pub block_index: usize,
}

impl HookSite {
    pub fn encoder(block_index: usize) -> Self {
        Self {
            kind: SiteKind::EncoderBlockOut,
            block_index,
        }
    }

    pub fn decoder(block_index: usize) -> Self {
        Self {
            kind: SiteKind::DecoderBlockOut,
            block_index,
        }
    }

    pub fn cross_attention(block_index: usize) -> Self {
        Self {
            kind: SiteKind::CrossAttentionOut,
            block_index,
        }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.kind {
            SiteKind::EncoderBlockOut => "enc",
            SiteKind::DecoderBlockOut => "dec",
            SiteKind::CrossAttentionOut => "xattn",
        };
        write!(f, "{p}.{}", self.block_index)
    }
}

impl FromStr for HookSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (p, i) = s
            .split_once('.')
            .ok_or_else(|| Error::InvalidSite(s.to_string()))?;
        let block_index: usize = i.parse().map_err(|_| Error::InvalidSite(s.to_string()))?;
        let kind = match p {
            "enc" => SiteKind::EncoderBlockOut,
            "dec" => SiteKind::DecoderBlockOut,
            "xattn" => SiteKind::CrossAttentionOut,
            _ => return Err(Error::InvalidSite(s.to_string())),
        };
        Ok(Self { kind, block_index })
    }
}

impl Serialize for HookSite {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookSite {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Observer/editor invoked at every hook site during a forward pass.
///
/// Encoder sites are visited once per forward pass with the full
/// (context x d_model) matrix. During sampling, decoder and cross-attention
/// sites are visited once per decoded position with one row per sample.
pub trait ActivationHook {
    fn wants(&self, site: HookSite) -> bool;
    fn visit(&mut self, site: HookSite, acts: &mut Matrix) -> Result<()>;
}

/// Hook that does nothing.
pub struct NoHook;

impl ActivationHook for NoHook {
    fn wants(&self, _: HookSite) -> bool {
        false
    }

    fn visit(&mut self, _: HookSite, _: &mut Matrix) -> Result<()> {
        Ok(())
    }
}

/// Records copies of the activations at the requested sites.
#[derive(Debug, Default)]
pub struct CaptureHook {
    sites: Vec<HookSite>,
    pub captured: BTreeMap<HookSite, Matrix>,
}

impl CaptureHook {
    pub fn new(sites: &[HookSite]) -> Self {
        Self {
            sites: sites.to_vec(),
            captured: BTreeMap::new(),
        }
    }
}

impl ActivationHook for CaptureHook {
    fn wants(&self, site: HookSite) -> bool {
        self.sites.contains(&site)
    }

    fn visit(&mut self, site: HookSite, acts: &mut Matrix) -> Result<()> {
        match self.captured.get_mut(&site) {
            Some(m) => m.push_rows(acts),
            None => {
                self.captured.insert(site, acts.clone());
                Ok(())
            }
        }
    }
}

/// Replaces activations at one site with `edit(activations)`.
pub struct PatchHook<F> {
    site: HookSite,
    edit: F,
    /// Number of times the edit ran.
    pub calls: usize,
}

impl<F: FnMut(&Matrix) -> Matrix> PatchHook<F> {
    pub fn new(site: HookSite, edit: F) -> Self {
        Self {
            site,
            edit,
            calls: 0,
        }
    }
}

impl<F: FnMut(&Matrix) -> Matrix> ActivationHook for PatchHook<F> {
    fn wants(&self, site: HookSite) -> bool {
        site == self.site
    }

    fn visit(&mut self, _: HookSite, acts: &mut Matrix) -> Result<()> {
        let edited = (self.edit)(acts);
        self.calls += 1;
        if edited.shape() != acts.shape() {
            return Err(Error::Patch {
                before: acts.shape(),
                after: edited.shape(),
            });
        }
        *acts = edited;
        Ok(())
    }
}
