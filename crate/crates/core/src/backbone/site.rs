use std::fmt;

use serde::{Deserialize, Serialize};

use super::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    SelfAttn,
    CrossAttn,
    Ffn,
    Ln,
}

/// Which linear map or normalization inside a sublayer.
///
/// Layer-norm sites name the sublayer they close (`AttnLn` follows the
/// self-attention residual, and so on); `FinalLn` is the stack's closing norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    W1,
    W2,
    AttnLn,
    CrossLn,
    FfnLn,
    FinalLn,
}

/// Address of a hookable point in the backbone.
///
/// * linear projection: `kind` in {SelfAttn, CrossAttn, Ffn}, `projection` a
///   weight matrix (Q/K/V/O or W1/W2);
/// * module output: same kinds, `projection = None`;
/// * layer norm: `kind = Ln`, `projection` one of the `*Ln` variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SublayerId {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SublayerKind,
    pub projection: Option<Projection>,
}

/// Shape class of a site, which decides which PET kinds may attach.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteClass {
    Linear { d_in: usize, d_out: usize },
    ModuleOutput { d: usize },
    Norm { d: usize },
}

impl SublayerId {
    pub fn linear(stack: Stack, layer: usize, kind: SublayerKind, projection: Projection) -> Self {
        SublayerId {
            stack,
            layer,
            kind,
            projection: Some(projection),
        }
    }

    pub fn module_output(stack: Stack, layer: usize, kind: SublayerKind) -> Self {
        SublayerId {
            stack,
            layer,
            kind,
            projection: None,
        }
    }

    pub fn norm(stack: Stack, layer: usize, which: Projection) -> Self {
        SublayerId {
            stack,
            layer,
            kind: SublayerKind::Ln,
            projection: Some(which),
        }
    }

    /// Checks the site exists in a backbone with this configuration.
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        use Projection::*;
        use SublayerKind::*;
        let layers = match self.stack {
            Stack::Encoder => cfg.num_encoder_layers,
            Stack::Decoder => cfg.num_decoder_layers,
        };
        if self.layer >= layers {
            return Err(Error::Mismatch(format!(
                "layer {} out of range: {:?} has {layers} layers",
                self.layer, self.stack
            )));
        }
        if (self.kind == CrossAttn || self.projection == Some(CrossLn)) && self.stack != Stack::Decoder {
            return Err(Error::Mismatch(format!(
                "{self}: cross-attention exists only in the decoder"
            )));
        }
        let ok = match (self.kind, self.projection) {
            (SelfAttn | CrossAttn, None | Some(Q | K | V | O)) => true,
            (Ffn, None | Some(W1 | W2)) => true,
            (Ln, Some(AttnLn | CrossLn | FfnLn)) => true,
            (Ln, Some(FinalLn)) => self.layer + 1 == layers,
            _ => false,
        };
        if !ok {
            return Err(Error::Mismatch(format!(
                "{self}: kind {:?} does not admit projection {:?}",
                self.kind, self.projection
            )));
        }
        Ok(())
    }

    pub fn class(&self, cfg: &BackboneConfig) -> SiteClass {
        let (d, dm) = (cfg.hidden_dim, cfg.ffn_dim);
        match (self.kind, self.projection) {
            (SublayerKind::Ln, _) => SiteClass::Norm { d },
            (_, None) => SiteClass::ModuleOutput { d },
            (_, Some(Projection::W1)) => SiteClass::Linear { d_in: d, d_out: dm },
            (_, Some(Projection::W2)) => SiteClass::Linear { d_in: dm, d_out: d },
            (_, Some(_)) => SiteClass::Linear { d_in: d, d_out: d },
        }
    }

    /// Position label without the layer, e.g. `self_attn.q` or `ln.final_ln`.
    pub fn position(&self) -> String {
        let kind = match self.kind {
            SublayerKind::SelfAttn => "self_attn",
            SublayerKind::CrossAttn => "cross_attn",
            SublayerKind::Ffn => "ffn",
            SublayerKind::Ln => "ln",
        };
        match self.projection {
            Some(p) => format!("{kind}.{}", projection_name(p)),
            None => format!("{kind}.out"),
        }
    }

    /// Short stack/layer label, e.g. `E0` or `D1`.
    pub fn layer_label(&self) -> String {
        let s = match self.stack {
            Stack::Encoder => 'E',
            Stack::Decoder => 'D',
        };
        format!("{s}{}", self.layer)
    }
}

pub(crate) fn projection_name(p: Projection) -> &'static str {
    match p {
        Projection::Q => "q",
        Projection::K => "k",
        Projection::V => "v",
        Projection::O => "o",
        Projection::W1 => "w1",
        Projection::W2 => "w2",
        Projection::AttnLn => "attn_ln",
        Projection::CrossLn => "cross_ln",
        Projection::FfnLn => "ffn_ln",
        Projection::FinalLn => "final_ln",
    }
}

impl fmt::Display for SublayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer_label(), self.position())
    }
}

/// Every hookable site of a backbone, in canonical forward order.
pub fn enumerate_sites(cfg: &BackboneConfig) -> Vec<SublayerId> {
    use Projection::*;
    use SublayerKind::*;
    let mut out = Vec::new();
    for (stack, layers) in [
        (Stack::Encoder, cfg.num_encoder_layers),
        (Stack::Decoder, cfg.num_decoder_layers),
    ] {
        for layer in 0..layers {
            let mut attn = |kind: SublayerKind, ln: Projection| {
                for p in [Q, K, V, O] {
                    out.push(SublayerId::linear(stack, layer, kind, p));
                }
                out.push(SublayerId::module_output(stack, layer, kind));
                out.push(SublayerId::norm(stack, layer, ln));
            };
            attn(SelfAttn, AttnLn);
            if stack == Stack::Decoder {
                attn(CrossAttn, CrossLn);
            }
            out.push(SublayerId::linear(stack, layer, Ffn, W1));
            out.push(SublayerId::linear(stack, layer, Ffn, W2));
            out.push(SublayerId::module_output(stack, layer, Ffn));
            out.push(SublayerId::norm(stack, layer, FfnLn));
        }
        out.push(SublayerId::norm(stack, layers - 1, FinalLn));
    }
    out
}
