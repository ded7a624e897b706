//! Frozen encoder outputs, their on-disk store, compression adapters and a
//! small trainable encoder over rendered glyph patches.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::init::normal_tensor;
use crate::params::{ByteReader, ParamId, ParamStore};
use crate::synth::{render, GlyphImageSpec, PATCH_FEATURES};
use crate::tensor::{kernels, AttentionSpec, GradTape, Scalar, Tensor, Var};

pub const STORE_MAGIC: &[u8; 4] = b"LITE";
pub const STORE_VERSION: u32 = 1;
/// Bytes before the first image record: magic, version and image count.
pub const STORE_HEADER_BYTES: usize = 16;

/// Grid of `N` encoder tokens of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage<T: Scalar = f32> {
    tokens: Tensor<T>,
}

impl<T: Scalar> EncodedImage<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::shape(
                "encoded_image",
                format!("tokens must be N x D, got {:?}", tokens.shape()),
            ));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite {
                op: "encoded_image",
            });
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> EncodedImage<U> {
        EncodedImage {
            tokens: self.tokens.cast(),
        }
    }
}

/// How encoder tokens are summarized before the decoder sees them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompressionSpec {
    #[default]
    None,
    /// All tokens pooled into one by attention with a single learned query.
    MapPool,
    /// Linear down-projection by `factor` for storage, up-projection on read.
    Bottleneck { factor: usize },
}

impl CompressionSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let CompressionSpec::Bottleneck { factor } = *self {
            if factor == 0 || dim % factor != 0 {
                return Err(Error::config(format!(
                    "bottleneck factor {factor} does not divide encoder width {dim}"
                )));
            }
        }
        Ok(())
    }

    pub fn uses_map_pool(&self) -> bool {
        matches!(self, CompressionSpec::MapPool)
    }

    /// Stored floats per image for `n` tokens of width `dim`.
    pub fn stored_floats(&self, n: usize, dim: usize) -> usize {
        match *self {
            CompressionSpec::None => n * dim,
            CompressionSpec::MapPool => dim,
            CompressionSpec::Bottleneck { factor } => n * dim / factor,
        }
    }
}

impl fmt::Display for CompressionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionSpec::None => write!(f, "none"),
            CompressionSpec::MapPool => write!(f, "map_pool"),
            CompressionSpec::Bottleneck { factor } => write!(f, "bottleneck:{factor}"),
        }
    }
}

impl FromStr for CompressionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CompressionSpec::None),
            "map_pool" | "map" => Ok(CompressionSpec::MapPool),
            _ => {
                let factor = s
                    .strip_prefix("bottleneck:")
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| Error::config(format!("unknown compression {s:?}")))?;
                Ok(CompressionSpec::Bottleneck { factor })
            }
        }
    }
}

/// Mapping from image id to encoder output, persisted in the `LITE` format:
///
/// ```text
/// "LITE" | version: u32 | count: u64
/// count x ( id_len: u16 | id: utf-8 | N: u32 | D: u32 | payload: f32 x N*D )
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    images: BTreeMap<String, EncodedImage<f32>>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: EncodedImage<f32>) -> Result<()> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(Error::config(format!(
                "image id of {} bytes is too long",
                id.len()
            )));
        }
        self.images.insert(id, image);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EncodedImage<f32>> {
        self.images.get(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EncodedImage<f32>)> {
        self.images.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Size of the serialized store in bytes.
    pub fn byte_len(&self) -> usize {
        STORE_HEADER_BYTES
            + self
                .images
                .iter()
                .map(|(id, img)| 2 + id.len() + 8 + 4 * img.tokens.numel())
                .sum::<usize>()
    }

    pub fn payload_bytes(&self) -> usize {
        self.images.values().map(|img| 4 * img.tokens.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.images.len() as u64).to_le_bytes());
        for (id, img) in &self.images {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(img.num_tokens() as u32).to_le_bytes());
            out.extend_from_slice(&(img.dim() as u32).to_le_bytes());
            for v in img.tokens.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != STORE_MAGIC {
            return Err(r.error(0, "bad embedding store magic"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(r.error(4, format!("unsupported store version {version}")));
        }
        let count = r.u64()?;
        let mut store = EmbeddingStore::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at + 2, "image id is not UTF-8"))?
                .to_owned();
            let n = r.u32()? as usize;
            let d = r.u32()? as usize;
            let numel = n
                .checked_mul(d)
                .filter(|&m| m.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error(r.pos, format!("truncated payload for image {id:?}")))?;
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tokens = Tensor::new(vec![n, d], data).map_err(|e| r.error(at, e.to_string()))?;
            let image = EncodedImage::new(tokens).map_err(|e| r.error(at, e.to_string()))?;
            if store.images.insert(id.clone(), image).is_some() {
                return Err(r.error(at, format!("duplicate image id {id:?}")));
            }
        }
        if r.remaining() != 0 {
            return Err(r.error(r.pos, "trailing bytes after last image"));
        }
        Ok(store)
    }
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    EmbeddingStore::from_bytes(&fs::read(path)?)
}

/// Weights of a multi-head attention pooling head with one learned query.
#[derive(Clone, Debug)]
pub struct MapHead<'a, T: Scalar> {
    pub query: &'a [T],
    pub wk: &'a [T],
    pub bk: &'a [T],
    pub wv: &'a [T],
    pub bv: &'a [T],
    pub wo: &'a [T],
    pub bo: &'a [T],
    pub heads: usize,
}

/// Pools `N x D` tokens into a single `1 x D` token.
pub fn map_pool<T: Scalar>(tokens: &Tensor<T>, head: &MapHead<'_, T>) -> Result<Tensor<T>> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if head.query.len() != d
        || head.wk.len() != d * d
        || head.wv.len() != d * d
        || head.wo.len() != d * d
    {
        return Err(Error::shape(
            "map_pool",
            format!("pooling head is not dimensioned for width {d}"),
        ));
    }
    if head.heads == 0 || d % head.heads != 0 {
        return Err(Error::shape(
            "map_pool",
            format!("{d} features over {} heads", head.heads),
        ));
    }
    let mut k = kernels::matmul(tokens.data(), head.wk, n, d, d);
    kernels::add_bias_in_place(&mut k, head.bk);
    let mut v = kernels::matmul(tokens.data(), head.wv, n, d, d);
    kernels::add_bias_in_place(&mut v, head.bv);
    let (att, _) = kernels::attention(head.query, &k, &v, 1, n, d, head.heads, false);
    let mut out = kernels::matmul(&att, head.wo, 1, d, d);
    kernels::add_bias_in_place(&mut out, head.bo);
    Ok(Tensor::from_parts(vec![1, d], out))
}

/// Projects tokens down for storage and back up for reading.
pub fn bottleneck_pair<T: Scalar>(
    tokens: &Tensor<T>,
    down: &Tensor<T>,
    up: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = tokens.cols();
    if down.rank() != 2 || up.rank() != 2 || down.shape()[0] != d || up.shape()[1] != d {
        return Err(Error::shape(
            "bottleneck_pair",
            format!(
                "down {:?} / up {:?} for width {d}",
                down.shape(),
                up.shape()
            ),
        ));
    }
    let w = down.shape()[1];
    if up.shape()[0] != w || d % w != 0 {
        return Err(Error::config(format!(
            "bottleneck width {w} does not divide {d}"
        )));
    }
    let stored = tokens.matmul(down)?;
    let restored = stored.matmul(up)?;
    Ok((stored, restored))
}

/// Per-patch linear projection followed by one residual self-attention layer.
#[derive(Clone, Debug)]
pub struct ToyEncoder<T: Scalar = f32> {
    params: ParamStore<T>,
    ids: ToyEncoderIds,
    heads: usize,
    dim: usize,
}

#[derive(Clone, Copy, Debug)]
struct ToyEncoderIds {
    proj: ParamId,
    proj_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

/// Tape handles for the toy encoder parameters.
#[derive(Clone, Debug)]
pub struct ToyEncoderVars {
    pub vars: Vec<Var>,
}

impl ToyEncoder<f32> {
    pub fn new(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "toy encoder width {dim} over {heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4c0);
        let f = PATCH_FEATURES;
        let mut params = ParamStore::new();
        let proj = params.push(
            "toy_encoder.proj",
            normal_tensor(&mut rng, &[f, dim], 1.0 / (f as f64).sqrt()),
        );
        let proj_b = params.push("toy_encoder.proj_b", Tensor::zeros(&[dim]));
        let s = 1.0 / (dim as f64).sqrt();
        let wq = params.push("toy_encoder.wq", normal_tensor(&mut rng, &[dim, dim], s));
        let wk = params.push("toy_encoder.wk", normal_tensor(&mut rng, &[dim, dim], s));
        let wv = params.push("toy_encoder.wv", normal_tensor(&mut rng, &[dim, dim], s));
        let wo = params.push(
            "toy_encoder.wo",
            normal_tensor(&mut rng, &[dim, dim], 0.25 * s),
        );
        Ok(Self {
            params,
            ids: ToyEncoderIds {
                proj,
                proj_b,
                wq,
                wk,
                wv,
                wo,
            },
            heads,
            dim,
        })
    }
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cast<U: Scalar>(&self) -> ToyEncoder<U> {
        ToyEncoder {
            params: self.params.cast(),
            ids: self.ids,
            heads: self.heads,
            dim: self.dim,
        }
    }

    /// Encodes without recording anything; the result is deterministic.
    pub fn encode(&self, spec: &GlyphImageSpec) -> Result<EncodedImage<T>> {
        let patches: Tensor<T> = render(spec).cast();
        self.encode_patches(&patches)
    }

    pub fn encode_patches(&self, patches: &Tensor<T>) -> Result<EncodedImage<T>> {
        let (n, f, d) = (patches.rows(), patches.cols(), self.dim);
        let p = |id: ParamId| self.params.get(id).data();
        let mut h = kernels::matmul(patches.data(), p(self.ids.proj), n, f, d);
        kernels::add_bias_in_place(&mut h, p(self.ids.proj_b));
        let q = kernels::matmul(&h, p(self.ids.wq), n, d, d);
        let k = kernels::matmul(&h, p(self.ids.wk), n, d, d);
        let v = kernels::matmul(&h, p(self.ids.wv), n, d, d);
        let (att, _) = kernels::attention(&q, &k, &v, n, n, d, self.heads, false);
        let o = kernels::matmul(&att, p(self.ids.wo), n, d, d);
        let out: Vec<T> = h.iter().zip(&o).map(|(&a, &b)| a + b).collect();
        EncodedImage::new(Tensor::from_parts(vec![n, d], out))
    }

    /// Registers the encoder's parameters as tape leaves. Frozen encoders get
    /// leaves without gradients, so nothing flows back into them.
    pub fn register(&self, tape: &mut GradTape<T>, trainable: bool) -> ToyEncoderVars {
        ToyEncoderVars {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut GradTape<T>,
        vars: &ToyEncoderVars,
        patches: &Tensor<T>,
    ) -> Result<Var> {
        let v = |id: ParamId| vars.vars[id.0];
        let x = tape.constant(patches.clone());
        let h = tape.linear(x, v(self.ids.proj), Some(v(self.ids.proj_b)))?;
        let q = tape.matmul(h, v(self.ids.wq))?;
        let k = tape.matmul(h, v(self.ids.wk))?;
        let vv = tape.matmul(h, v(self.ids.wv))?;
        let att = tape.attention(
            q,
            k,
            vv,
            AttentionSpec {
                heads: self.heads,
                causal: false,
            },
        )?;
        let o = tape.matmul(att, v(self.ids.wo))?;
        tape.add(h, o)
    }
}

/// Encodes `spec`; with `trainable` the computation is recorded on `tape` so
/// the encoder receives gradients, otherwise the tokens enter as a constant.
pub fn toy_encode<T: Scalar>(
    tape: &mut GradTape<T>,
    encoder: &ToyEncoder<T>,
    vars: &ToyEncoderVars,
    spec: &GlyphImageSpec,
    trainable: bool,
) -> Result<Var> {
    if trainable {
        let patches: Tensor<T> = render(spec).cast();
        encoder.encode_on_tape(tape, vars, &patches)
    } else {
        let encoded = encoder.encode(spec)?;
        Ok(tape.constant(encoded.tokens().clone()))
    }
}
