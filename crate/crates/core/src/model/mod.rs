//! Pre-LN Transformer decoder with causal self-attention and cross-attention
//! into encoder tokens.

pub mod config;
pub mod init;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DecoderConfig, BOS, EOS, NUM_RESERVED, PAD, SEP, UNK};

use crate::encoder::{map_pool, CompressionSpec, EncodedImage, MapHead};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, AttentionSpec, GradTape, Scalar, Tensor, Var};
use init::normal_tensor;

pub const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    attn: AttnIds,
    ln2: (ParamId, ParamId),
    cross: AttnIds,
    ln3: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum AdapterIds {
    None,
    Map {
        query: ParamId,
        wk: ParamId,
        bk: ParamId,
        wv: ParamId,
        bv: ParamId,
        wo: ParamId,
        bo: ParamId,
    },
    Bottleneck {
        down: ParamId,
        up: ParamId,
    },
}

/// Parameter ids resolved by name.
#[derive(Clone, Debug)]
struct Layout {
    tok: ParamId,
    pos: Vec<ParamId>,
    layers: Vec<LayerIds>,
    ln_f: (ParamId, ParamId),
    head_w: Option<ParamId>,
    head_b: ParamId,
    adapter: AdapterIds,
}

/// `(name, shape, init)` for every parameter the configuration implies.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    /// Copy of the first positional table.
    SharedPos,
    /// Transpose of the preceding parameter.
    TransposePrev,
}

fn param_specs(c: &DecoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, e, v, l, m) = (
        c.model_dim,
        c.encoder_dim,
        c.vocab_size,
        c.max_len,
        c.mlp_dim,
    );
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut s: Vec<(String, Vec<usize>, Init)> =
        vec![("tok_embed".into(), vec![v, d], Init::Normal(EMBED_STD))];
    for t in 0..c.position_tables {
        let init = if t == 0 {
            Init::Normal(EMBED_STD)
        } else {
            Init::SharedPos
        };
        s.push((format!("pos_embed.{t}"), vec![l, d], init));
    }
    let attn = |s: &mut Vec<(String, Vec<usize>, Init)>, p: &str, kv_in: usize| {
        for (n, rows) in [("wq", d), ("wk", kv_in), ("wv", kv_in), ("wo", d)] {
            s.push((format!("{p}.{n}"), vec![rows, d], fan(rows)));
            s.push((format!("{p}.b{}", &n[1..]), vec![d], Init::Zeros));
        }
    };
    for i in 0..c.depth {
        let p = format!("layer{i}");
        for (ln, after) in [("ln1", "self"), ("ln2", "cross"), ("ln3", "mlp")] {
            s.push((format!("{p}.{ln}.gain"), vec![d], Init::Ones));
            s.push((format!("{p}.{ln}.bias"), vec![d], Init::Zeros));
            match after {
                "self" => attn(&mut s, &format!("{p}.self"), d),
                "cross" => attn(&mut s, &format!("{p}.cross"), e),
                _ => {
                    s.push((format!("{p}.mlp.w1"), vec![d, m], fan(d)));
                    s.push((format!("{p}.mlp.b1"), vec![m], Init::Zeros));
                    s.push((format!("{p}.mlp.w2"), vec![m, d], fan(m)));
                    s.push((format!("{p}.mlp.b2"), vec![d], Init::Zeros));
                }
            }
        }
    }
    s.push(("ln_f.gain".into(), vec![d], Init::Ones));
    s.push(("ln_f.bias".into(), vec![d], Init::Zeros));
    if !c.tie_embeddings {
        s.push(("head.w".into(), vec![d, v], fan(d)));
    }
    s.push(("head.b".into(), vec![v], Init::Zeros));
    match c.compression {
        CompressionSpec::None => {}
        CompressionSpec::MapPool => {
            s.push(("map.query".into(), vec![1, e], Init::Normal(1.0)));
            for n in ["k", "v", "o"] {
                s.push((format!("map.w{n}"), vec![e, e], fan(e)));
                s.push((format!("map.b{n}"), vec![e], Init::Zeros));
            }
        }
        CompressionSpec::Bottleneck { factor } => {
            let w = e / factor;
            s.push(("bottleneck.down".into(), vec![e, w], fan(e)));
            s.push(("bottleneck.up".into(), vec![w, e], Init::TransposePrev));
        }
    }
    s
}

impl Layout {
    fn resolve<T: Scalar>(c: &DecoderConfig, store: &ParamStore<T>) -> Result<Self> {
        for (name, shape, _) in param_specs(c) {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "decoder_params",
                    format!("{name} is {:?}, expected {shape:?}", store.get(id).shape()),
                ));
            }
        }
        let id = |n: &str| store.id(n).unwrap();
        let attn = |p: &str| AttnIds {
            wq: id(&format!("{p}.wq")),
            bq: id(&format!("{p}.bq")),
            wk: id(&format!("{p}.wk")),
            bk: id(&format!("{p}.bk")),
            wv: id(&format!("{p}.wv")),
            bv: id(&format!("{p}.bv")),
            wo: id(&format!("{p}.wo")),
            bo: id(&format!("{p}.bo")),
        };
        let ln = |p: &str| (id(&format!("{p}.gain")), id(&format!("{p}.bias")));
        let layers = (0..c.depth)
            .map(|i| {
                let p = format!("layer{i}");
                LayerIds {
                    ln1: ln(&format!("{p}.ln1")),
                    attn: attn(&format!("{p}.self")),
                    ln2: ln(&format!("{p}.ln2")),
                    cross: attn(&format!("{p}.cross")),
                    ln3: ln(&format!("{p}.ln3")),
                    w1: id(&format!("{p}.mlp.w1")),
                    b1: id(&format!("{p}.mlp.b1")),
                    w2: id(&format!("{p}.mlp.w2")),
                    b2: id(&format!("{p}.mlp.b2")),
                }
            })
            .collect();
        let adapter = match c.compression {
            CompressionSpec::None => AdapterIds::None,
            CompressionSpec::MapPool => AdapterIds::Map {
                query: id("map.query"),
                wk: id("map.wk"),
                bk: id("map.bk"),
                wv: id("map.wv"),
                bv: id("map.bv"),
                wo: id("map.wo"),
                bo: id("map.bo"),
            },
            CompressionSpec::Bottleneck { .. } => AdapterIds::Bottleneck {
                down: id("bottleneck.down"),
                up: id("bottleneck.up"),
            },
        };
        Ok(Layout {
            tok: id("tok_embed"),
            pos: (0..c.position_tables)
                .map(|t| id(&format!("pos_embed.{t}")))
                .collect(),
            layers,
            ln_f: ln("ln_f"),
            head_w: (!c.tie_embeddings).then(|| id("head.w")),
            head_b: id("head.b"),
            adapter,
        })
    }
}

/// Decoder weights plus their configuration.
#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar = f32> {
    config: DecoderConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Tape handles for every decoder parameter, indexed like the store.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub vars: Vec<Var>,
}

impl DecoderVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Cached keys and values of the tokens consumed so far.
#[derive(Clone, Debug)]
pub struct DecodeState<T: Scalar = f32> {
    table: usize,
    len: usize,
    dim: usize,
    mem_len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn table(&self) -> usize {
        self.table
    }

    /// Number of cached self-attention positions in every layer.
    pub fn cache_len(&self) -> usize {
        self.self_k.first().map_or(0, |k| k.len() / self.dim)
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

impl Decoder<f32> {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut first_pos: Option<Tensor<f32>> = None;
        let mut prev: Option<Tensor<f32>> = None;
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Normal(std) => normal_tensor(&mut rng, &shape, std),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
                Init::SharedPos => first_pos.clone().expect("first table precedes copies"),
                Init::TransposePrev => {
                    let p = prev
                        .as_ref()
                        .expect("transposed parameter has a predecessor");
                    let (r, c) = (p.rows(), p.cols());
                    let data = (0..c * r).map(|i| p.data()[(i % r) * c + i / r]).collect();
                    Tensor::new(shape.clone(), data)?
                }
            };
            prev = Some(t.clone());
            if name == "pos_embed.0" {
                first_pos = Some(t.clone());
            }
            params.push(name, t);
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Writes the parameters to `path` and the configuration to `path.manifest`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        std::fs::write(manifest_path(path), self.config.to_manifest())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config = DecoderConfig::from_manifest(&std::fs::read_to_string(manifest_path(path))?)?;
        let params = ParamStore::load(path)?;
        Self::from_params(config, params)
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn from_params(config: DecoderConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.config.dropout = rate;
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Ids of the compression adapter's parameters (empty without compression).
    pub fn adapter_params(&self) -> Vec<ParamId> {
        match self.layout.adapter {
            AdapterIds::None => vec![],
            AdapterIds::Map {
                query,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            } => vec![query, wk, bk, wv, bv, wo, bo],
            AdapterIds::Bottleneck { down, up } => vec![down, up],
        }
    }

    fn p(&self, id: ParamId) -> &[T] {
        self.params.get(id).data()
    }

    fn check_table(&self, table: usize) -> Result<()> {
        if table >= self.config.position_tables {
            return Err(Error::config(format!(
                "positional table {table} requested, decoder has {}",
                self.config.position_tables
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut GradTape<T>, trainable: bool) -> DecoderVars {
        DecoderVars {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Compression adapter on the tape: encoder tokens to cross-attention memory.
    pub fn memory_on_tape(
        &self,
        tape: &mut GradTape<T>,
        vars: &DecoderVars,
        encoded: Var,
    ) -> Result<Var> {
        match self.layout.adapter {
            AdapterIds::None => Ok(encoded),
            AdapterIds::Bottleneck { down, up } => {
                let stored = tape.matmul(encoded, vars.get(down))?;
                tape.matmul(stored, vars.get(up))
            }
            AdapterIds::Map {
                query,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            } => {
                let k = tape.linear(encoded, vars.get(wk), Some(vars.get(bk)))?;
                let v = tape.linear(encoded, vars.get(wv), Some(vars.get(bv)))?;
                let spec = AttentionSpec {
                    heads: self.config.heads,
                    causal: false,
                };
                let pooled = tape.attention(vars.get(query), k, v, spec)?;
                tape.linear(pooled, vars.get(wo), Some(vars.get(bo)))
            }
        }
    }

    /// Teacher-forced logits `[len x V]` for `ids`; `dropout_seed` enables dropout.
    pub fn logits_on_tape(
        &self,
        tape: &mut GradTape<T>,
        vars: &DecoderVars,
        memory: Var,
        ids: &[u32],
        table: usize,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let c = &self.config;
        if ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if ids.len() > c.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: c.max_len,
            });
        }
        self.check_tokens(ids)?;
        self.check_table(table)?;
        let rate = if dropout_seed.is_some() {
            c.dropout
        } else {
            0.0
        };
        let mut seed = dropout_seed.unwrap_or(0);
        let mut drop = |tape: &mut GradTape<T>, x: Var| -> Result<Var> {
            seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
            tape.dropout(x, rate, seed)
        };
        let eps = T::from_f64(LN_EPS);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather(vars.get(self.layout.tok), &idx)?;
        let pos = tape.gather(vars.get(self.layout.pos[table]), &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = drop(tape, x)?;
        let v = |id| vars.get(id);
        for layer in &self.layout.layers {
            let h = tape.layer_norm(x, v(layer.ln1.0), v(layer.ln1.1), eps)?;
            let a = &layer.attn;
            let q = tape.linear(h, v(a.wq), Some(v(a.bq)))?;
            let k = tape.linear(h, v(a.wk), Some(v(a.bk)))?;
            let vv = tape.linear(h, v(a.wv), Some(v(a.bv)))?;
            let att = tape.attention(
                q,
                k,
                vv,
                AttentionSpec {
                    heads: c.heads,
                    causal: true,
                },
            )?;
            let o = tape.linear(att, v(a.wo), Some(v(a.bo)))?;
            let o = drop(tape, o)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, v(layer.ln2.0), v(layer.ln2.1), eps)?;
            let a = &layer.cross;
            let q = tape.linear(h, v(a.wq), Some(v(a.bq)))?;
            let k = tape.linear(memory, v(a.wk), Some(v(a.bk)))?;
            let vv = tape.linear(memory, v(a.wv), Some(v(a.bv)))?;
            let att = tape.attention(
                q,
                k,
                vv,
                AttentionSpec {
                    heads: c.heads,
                    causal: false,
                },
            )?;
            let o = tape.linear(att, v(a.wo), Some(v(a.bo)))?;
            let o = drop(tape, o)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, v(layer.ln3.0), v(layer.ln3.1), eps)?;
            let m = tape.linear(h, v(layer.w1), Some(v(layer.b1)))?;
            let m = tape.gelu(m)?;
            let m = tape.linear(m, v(layer.w2), Some(v(layer.b2)))?;
            let m = drop(tape, m)?;
            x = tape.add(x, m)?;
        }
        let h = tape.layer_norm(x, v(self.layout.ln_f.0), v(self.layout.ln_f.1), eps)?;
        match self.layout.head_w {
            Some(w) => tape.linear(h, v(w), Some(v(self.layout.head_b))),
            None => {
                let logits = tape.matmul_nt(h, v(self.layout.tok))?;
                tape.add_bias(logits, v(self.layout.head_b))
            }
        }
    }

    /// What the store keeps per image: raw tokens, the bottleneck projection, or
    /// the single pooled token.
    pub fn stored_form(&self, encoded: &EncodedImage<T>) -> Result<EncodedImage<T>> {
        self.check_encoded(encoded)?;
        match self.layout.adapter {
            AdapterIds::None => Ok(encoded.clone()),
            AdapterIds::Bottleneck { down, .. } => {
                EncodedImage::new(encoded.tokens().matmul(self.params.get(down))?)
            }
            AdapterIds::Map {
                query,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            } => {
                let head = MapHead {
                    query: self.p(query),
                    wk: self.p(wk),
                    bk: self.p(bk),
                    wv: self.p(wv),
                    bv: self.p(bv),
                    wo: self.p(wo),
                    bo: self.p(bo),
                    heads: self.config.heads,
                };
                EncodedImage::new(map_pool(encoded.tokens(), &head)?)
            }
        }
    }

    /// Cross-attention memory from a stored image.
    pub fn memory_from_stored(&self, stored: &EncodedImage<T>) -> Result<Tensor<T>> {
        match self.layout.adapter {
            AdapterIds::Bottleneck { up, .. } => stored.tokens().matmul(self.params.get(up)),
            _ => Ok(stored.tokens().clone()),
        }
    }

    fn check_encoded(&self, encoded: &EncodedImage<T>) -> Result<()> {
        if encoded.dim() != self.config.encoder_dim {
            return Err(Error::shape(
                "decoder",
                format!(
                    "encoder width {} but decoder expects {}",
                    encoded.dim(),
                    self.config.encoder_dim
                ),
            ));
        }
        Ok(())
    }

    /// Starts incremental decoding against `encoded`.
    pub fn begin(&self, encoded: &EncodedImage<T>, table: usize) -> Result<DecodeState<T>> {
        let memory = self.memory_from_stored(&self.stored_form(encoded)?)?;
        self.begin_with_memory(&memory, table)
    }

    pub fn begin_with_memory(&self, memory: &Tensor<T>, table: usize) -> Result<DecodeState<T>> {
        self.check_table(table)?;
        let (m, e, d) = (memory.rows(), memory.cols(), self.config.model_dim);
        if e != self.config.encoder_dim {
            return Err(Error::shape(
                "decoder",
                format!("memory width {e}, expected {}", self.config.encoder_dim),
            ));
        }
        let mut cross_k = Vec::with_capacity(self.config.depth);
        let mut cross_v = Vec::with_capacity(self.config.depth);
        for layer in &self.layout.layers {
            let mut k = kernels::matmul(memory.data(), self.p(layer.cross.wk), m, e, d);
            kernels::add_bias_in_place(&mut k, self.p(layer.cross.bk));
            let mut v = kernels::matmul(memory.data(), self.p(layer.cross.wv), m, e, d);
            kernels::add_bias_in_place(&mut v, self.p(layer.cross.bv));
            cross_k.push(k);
            cross_v.push(v);
        }
        Ok(DecodeState {
            table,
            len: 0,
            dim: d,
            mem_len: m,
            cross_k,
            cross_v,
            self_k: vec![Vec::new(); self.config.depth],
            self_v: vec![Vec::new(); self.config.depth],
        })
    }

    fn linear(&self, x: &[T], rows: usize, w: ParamId, b: ParamId) -> Vec<T> {
        let shape = self.params.get(w).shape();
        let mut y = kernels::matmul(x, self.p(w), rows, shape[0], shape[1]);
        kernels::add_bias_in_place(&mut y, self.p(b));
        y
    }

    fn norm(&self, x: &[T], ln: (ParamId, ParamId)) -> Vec<T> {
        kernels::layer_norm(
            x,
            self.config.model_dim,
            self.p(ln.0),
            self.p(ln.1),
            T::from_f64(LN_EPS),
        )
        .0
    }

    /// Consumes `tokens`, returning their next-token logits `[tokens.len() x V]`.
    pub fn extend(&self, state: &mut DecodeState<T>, tokens: &[u32]) -> Result<Vec<T>> {
        let c = &self.config;
        let (n, d) = (tokens.len(), c.model_dim);
        if state.len + n > c.max_len {
            return Err(Error::Length {
                len: state.len + n,
                max: c.max_len,
            });
        }
        self.check_tokens(tokens)?;
        let tok = self.p(self.layout.tok);
        let pos = self.p(self.layout.pos[state.table]);
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            let (t, p) = (t as usize, state.len + i);
            x.extend(
                tok[t * d..(t + 1) * d]
                    .iter()
                    .zip(&pos[p * d..(p + 1) * d])
                    .map(|(&a, &b)| a + b),
            );
        }
        let total = state.len + n;
        for (li, layer) in self.layout.layers.iter().enumerate() {
            let h = self.norm(&x, layer.ln1);
            let a = &layer.attn;
            let q = self.linear(&h, n, a.wq, a.bq);
            state.self_k[li].extend(self.linear(&h, n, a.wk, a.bk));
            state.self_v[li].extend(self.linear(&h, n, a.wv, a.bv));
            let (att, _) = kernels::attention(
                &q,
                &state.self_k[li],
                &state.self_v[li],
                n,
                total,
                d,
                c.heads,
                true,
            );
            let o = self.linear(&att, n, a.wo, a.bo);
            x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);

            let h = self.norm(&x, layer.ln2);
            let a = &layer.cross;
            let q = self.linear(&h, n, a.wq, a.bq);
            let (att, _) = kernels::attention(
                &q,
                &state.cross_k[li],
                &state.cross_v[li],
                n,
                state.mem_len,
                d,
                c.heads,
                false,
            );
            let o = self.linear(&att, n, a.wo, a.bo);
            x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);

            let h = self.norm(&x, layer.ln3);
            let mut m = self.linear(&h, n, layer.w1, layer.b1);
            m.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let m = self.linear(&m, n, layer.w2, layer.b2);
            x.iter_mut().zip(&m).for_each(|(x, &m)| *x += m);
        }
        state.len = total;
        let h = self.norm(&x, self.layout.ln_f);
        Ok(match self.layout.head_w {
            Some(w) => self.linear(&h, n, w, self.layout.head_b),
            None => {
                let mut y = kernels::matmul_nt(&h, tok, n, d, c.vocab_size);
                kernels::add_bias_in_place(&mut y, self.p(self.layout.head_b));
                y
            }
        })
    }

    /// Logits for one more token.
    pub fn next_token_logits(&self, state: &mut DecodeState<T>, token: u32) -> Result<Vec<T>> {
        self.extend(state, &[token])
    }

    /// One parallel pass over `ids`. Row `t` predicts `ids[t + 1]`; the mask
    /// marks rows whose prediction is part of the target (`t + 1 >= prefix_len`).
    pub fn forward_teacher_forced(
        &self,
        encoded: &EncodedImage<T>,
        ids: &[u32],
        prefix_len: usize,
        table: usize,
    ) -> Result<(Tensor<T>, Vec<bool>)> {
        if ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if prefix_len > ids.len() {
            return Err(Error::contract(format!(
                "prefix length {prefix_len} exceeds {}",
                ids.len()
            )));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let mut state = self.begin(encoded, table)?;
        let logits = self.extend(&mut state, ids)?;
        let mask = (0..ids.len()).map(|t| t + 1 >= prefix_len).collect();
        Ok((
            Tensor::from_parts(vec![ids.len(), self.config.vocab_size], logits),
            mask,
        ))
    }

    /// Teacher-forced logits for equal-length sequences, `[B x len x V]`.
    pub fn forward_batch(
        &self,
        encoded: &[EncodedImage<T>],
        ids: &[Vec<u32>],
        table: usize,
    ) -> Result<Tensor<T>> {
        if encoded.len() != ids.len() || ids.is_empty() {
            return Err(Error::contract(format!(
                "{} images for {} sequences",
                encoded.len(),
                ids.len()
            )));
        }
        let len = ids[0].len();
        if ids.iter().any(|s| s.len() != len) {
            return Err(Error::contract("batched sequences must share one length"));
        }
        let rows = crate::par::try_map(
            crate::par::Exec::default(),
            encoded.iter().zip(ids).collect(),
            |(e, s)| self.forward_teacher_forced(e, s, 0, table).map(|r| r.0),
        )?;
        let data = rows.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Tensor::from_parts(
            vec![ids.len(), len, self.config.vocab_size],
            data,
        ))
    }

    /// `sum_t log p(target_t | prefix, target_<t, image)`.
    pub fn sequence_log_prob(
        &self,
        encoded: &EncodedImage<T>,
        prefix: &[u32],
        target: &[u32],
        table: usize,
    ) -> Result<f64> {
        let state = self.begin(encoded, table)?;
        self.sequence_log_prob_from(&state, prefix, target)
    }

    /// As [`Self::sequence_log_prob`] starting from an already prepared state.
    pub fn sequence_log_prob_from(
        &self,
        state: &DecodeState<T>,
        prefix: &[u32],
        target: &[u32],
    ) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::contract("empty target sequence"));
        }
        if prefix.is_empty() {
            return Err(Error::contract("prefix must contain at least BOS"));
        }
        let total = state.len + prefix.len() + target.len() - 1;
        if total > self.config.max_len {
            return Err(Error::Length {
                len: total + 1,
                max: self.config.max_len,
            });
        }
        let mut ids = prefix.to_vec();
        ids.extend_from_slice(&target[..target.len() - 1]);
        let mut state = state.clone();
        let logits = self.extend(&mut state, &ids)?;
        let v = self.config.vocab_size;
        let start = prefix.len() - 1;
        Ok(target
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &logits[(start + i) * v..(start + i + 1) * v];
                kernels::log_softmax(row)[t as usize].to_f64()
            })
            .sum())
    }
}
