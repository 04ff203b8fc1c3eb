use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BackboneConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights {
    pub s: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights {
    pub self_attn: AttnWeights,
    pub attn_ln: NormWeights,
    pub ffn: FfnWeights,
    pub ffn_ln: NormWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerWeights {
    pub self_attn: AttnWeights,
    pub attn_ln: NormWeights,
    pub cross_attn: AttnWeights,
    pub cross_ln: NormWeights,
    pub ffn: FfnWeights,
    pub ffn_ln: NormWeights,
}

/// All backbone parameters. None of them ever requires grad.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    pub embedding: Tensor,
    pub positions: Tensor,
    pub encoder: Vec<EncoderLayerWeights>,
    pub encoder_final_ln: NormWeights,
    pub decoder: Vec<DecoderLayerWeights>,
    pub decoder_final_ln: NormWeights,
    pub head: Tensor,
}

fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl AttnWeights {
    fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttnWeights {
            wq: gaussian(rng, vec![d, d], std),
            wk: gaussian(rng, vec![d, d], std),
            wv: gaussian(rng, vec![d, d], std),
            wo: gaussian(rng, vec![d, d], std),
        }
    }
}

impl FfnWeights {
    fn init<R: Rng>(rng: &mut R, d: usize, dm: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        FfnWeights {
            w1: gaussian(rng, vec![d, dm], std),
            b1: gaussian(rng, vec![dm], std),
            w2: gaussian(rng, vec![dm, d], 1.0 / (dm as f64).sqrt()),
            b2: gaussian(rng, vec![d], std),
        }
    }
}

impl NormWeights {
    fn init(d: usize) -> Self {
        NormWeights {
            s: Tensor::full(vec![d], 1.0),
            b: Tensor::zeros(vec![d]),
        }
    }
}

impl FrozenWeights {
    pub fn init<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let (d, dm, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
        let embedding = gaussian(rng, vec![v, d], 1.0);
        let positions = gaussian(rng, vec![cfg.max_seq_len, d], 1.0);
        let encoder = (0..cfg.num_encoder_layers)
            .map(|_| EncoderLayerWeights {
                self_attn: AttnWeights::init(rng, d),
                attn_ln: NormWeights::init(d),
                ffn: FfnWeights::init(rng, d, dm),
                ffn_ln: NormWeights::init(d),
            })
            .collect();
        let decoder = (0..cfg.num_decoder_layers)
            .map(|_| DecoderLayerWeights {
                self_attn: AttnWeights::init(rng, d),
                attn_ln: NormWeights::init(d),
                cross_attn: AttnWeights::init(rng, d),
                cross_ln: NormWeights::init(d),
                ffn: FfnWeights::init(rng, d, dm),
                ffn_ln: NormWeights::init(d),
            })
            .collect();
        let head = gaussian(rng, vec![d, v], 1.0 / (d as f64).sqrt());
        FrozenWeights {
            embedding,
            positions,
            encoder,
            encoder_final_ln: NormWeights::init(d),
            decoder,
            decoder_final_ln: NormWeights::init(d),
            head,
        }
    }

    /// Every tensor with a stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        out.push(("positions".into(), &self.positions));
        for (l, layer) in self.encoder.iter().enumerate() {
            push_attn(&mut out, &format!("encoder.{l}.self_attn"), &layer.self_attn);
            push_norm(&mut out, &format!("encoder.{l}.attn_ln"), &layer.attn_ln);
            push_ffn(&mut out, &format!("encoder.{l}.ffn"), &layer.ffn);
            push_norm(&mut out, &format!("encoder.{l}.ffn_ln"), &layer.ffn_ln);
        }
        push_norm(&mut out, "encoder.final_ln", &self.encoder_final_ln);
        for (l, layer) in self.decoder.iter().enumerate() {
            push_attn(&mut out, &format!("decoder.{l}.self_attn"), &layer.self_attn);
            push_norm(&mut out, &format!("decoder.{l}.attn_ln"), &layer.attn_ln);
            push_attn(&mut out, &format!("decoder.{l}.cross_attn"), &layer.cross_attn);
            push_norm(&mut out, &format!("decoder.{l}.cross_ln"), &layer.cross_ln);
            push_ffn(&mut out, &format!("decoder.{l}.ffn"), &layer.ffn);
            push_norm(&mut out, &format!("decoder.{l}.ffn_ln"), &layer.ffn_ln);
        }
        push_norm(&mut out, "decoder.final_ln", &self.decoder_final_ln);
        out.push(("head".into(), &self.head));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding, &mut self.positions];
        for layer in &mut self.encoder {
            let a = &mut layer.self_attn;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            out.extend([&mut layer.attn_ln.s, &mut layer.attn_ln.b]);
            let f = &mut layer.ffn;
            out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
            out.extend([&mut layer.ffn_ln.s, &mut layer.ffn_ln.b]);
        }
        out.extend([&mut self.encoder_final_ln.s, &mut self.encoder_final_ln.b]);
        for layer in &mut self.decoder {
            let a = &mut layer.self_attn;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            out.extend([&mut layer.attn_ln.s, &mut layer.attn_ln.b]);
            let c = &mut layer.cross_attn;
            out.extend([&mut c.wq, &mut c.wk, &mut c.wv, &mut c.wo]);
            out.extend([&mut layer.cross_ln.s, &mut layer.cross_ln.b]);
            let f = &mut layer.ffn;
            out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
            out.extend([&mut layer.ffn_ln.s, &mut layer.ffn_ln.b]);
        }
        out.extend([&mut self.decoder_final_ln.s, &mut self.decoder_final_ln.b]);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, a: &'a AttnWeights) {
    out.push((format!("{prefix}.wq"), &a.wq));
    out.push((format!("{prefix}.wk"), &a.wk));
    out.push((format!("{prefix}.wv"), &a.wv));
    out.push((format!("{prefix}.wo"), &a.wo));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, f: &'a FfnWeights) {
    out.push((format!("{prefix}.w1"), &f.w1));
    out.push((format!("{prefix}.b1"), &f.b1));
    out.push((format!("{prefix}.w2"), &f.w2));
    out.push((format!("{prefix}.b2"), &f.b2));
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, n: &'a NormWeights) {
    out.push((format!("{prefix}.s"), &n.s));
    out.push((format!("{prefix}.b"), &n.b));
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    format: String,
    version: u32,
    config: BackboneConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

const FORMAT: &str = "s3pet-backbone";
const VERSION: u32 = 1;

/// Serialized form: one line of JSON header, `\n`, then every tensor's data as
/// little-endian `f64` in header order.
pub(crate) fn encode(cfg: &BackboneConfig, w: &FrozenWeights) -> Vec<u8> {
    let named = w.named_tensors();
    let header = FileHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    for (_, t) in named {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(BackboneConfig, FrozenWeights)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("backbone file: missing header line".into()))?;
    let header: FileHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Parse(format!("backbone header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Parse(format!(
            "backbone header: unsupported format {} v{}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let mut w = FrozenWeights::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
    let expected: Vec<(String, Vec<usize>)> = w
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Parse(format!(
            "backbone header lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Parse(format!(
                "backbone header: expected tensor {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
    }
    let mut data = &bytes[nl + 1..];
    for t in w.tensors_mut() {
        let need = t.numel() * 8;
        if data.len() < need {
            return Err(Error::Parse("backbone file: truncated tensor data".into()));
        }
        for (dst, chunk) in t.data_mut().iter_mut().zip(data[..need].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        data = &data[need..];
    }
    if !data.is_empty() {
        return Err(Error::Parse(format!(
            "backbone file: {} trailing bytes",
            data.len()
        )));
    }
    Ok((header.config, w))
}
