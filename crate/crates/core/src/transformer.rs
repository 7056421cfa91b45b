//! Encoder-decoder attention network with a linear regression head.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParameterStore, Tensor, Var};

/// Fill value for masked attention scores; the softmax turns it into an exact zero.
const MASKED_SCORE: f64 = -1e9;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub source_dim: usize,
    pub target_dim: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 128,
            n_e: 2,
            n_d: 2,
            source_dim: 1,
            target_dim: 1,
            seed: 0,
            positional_encoding: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(Error::config(format!("transformer.{path}"), msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads", "d_model must be a positive multiple of the head count");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder_layers", "encoder and decoder need at least one layer each");
        }
        if self.n_e == 0 || self.n_d == 0 {
            return bad("n_e", "sequence lengths must be at least 1");
        }
        if self.d_ff == 0 || self.source_dim == 0 || self.target_dim == 0 {
            return bad("d_ff", "feature widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ff1: Dense,
    ff2: Dense,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ff1: Dense,
    ff2: Dense,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    source_in: Dense,
    target_in: Dense,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: Dense,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Walks the parameter layout in a fixed order, creating or looking up each entry.
struct Builder<'a> {
    store: &'a mut ParameterStore,
    rng: Option<ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => {
                let t = match init {
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
                    }
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::filled(shape, 1.0),
                };
                self.store.add(name, t)
            }
            None => {
                let id = self
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
                if self.store.value(id).shape() != shape {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        self.store.value(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.tensor(format!("{name}.weight"), &[out, inp], Init::Xavier)?,
            b: self.tensor(format!("{name}.bias"), &[out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.tensor(format!("{name}.gain"), &[d], Init::Ones)?,
            bias: self.tensor(format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.dense(&format!("{name}.query"), d, d)?,
            k: self.dense(&format!("{name}.key"), d, d)?,
            v: self.dense(&format!("{name}.value"), d, d)?,
            o: self.dense(&format!("{name}.out"), d, d)?,
        })
    }

    fn layout(&mut self, cfg: &TransformerConfig) -> Result<Layout> {
        let d = cfg.d_model;
        let source_in = self.dense("source_in", d, cfg.source_dim)?;
        let target_in = self.dense("target_in", d, cfg.target_dim)?;
        let mut encoder = Vec::new();
        for l in 0..cfg.encoder_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                attn: self.attention(&format!("{p}.self_attn"), d)?,
                norm1: self.norm(&format!("{p}.norm1"), d)?,
                ff1: self.dense(&format!("{p}.ff1"), cfg.d_ff, d)?,
                ff2: self.dense(&format!("{p}.ff2"), d, cfg.d_ff)?,
                norm2: self.norm(&format!("{p}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..cfg.decoder_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attn: self.attention(&format!("{p}.self_attn"), d)?,
                norm1: self.norm(&format!("{p}.norm1"), d)?,
                cross_attn: self.attention(&format!("{p}.cross_attn"), d)?,
                norm2: self.norm(&format!("{p}.norm2"), d)?,
                ff1: self.dense(&format!("{p}.ff1"), cfg.d_ff, d)?,
                ff2: self.dense(&format!("{p}.ff2"), d, cfg.d_ff)?,
                norm3: self.norm(&format!("{p}.norm3"), d)?,
            });
        }
        let head = self.dense("head", cfg.target_dim, d)?;
        Ok(Layout {
            source_in,
            target_in,
            encoder,
            decoder,
            head,
        })
    }
}

/// Sinusoidal table: `sin(pos / 10000^(2i/d))` on even columns, `cos` on odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |idx| {
        let (pos, col) = (idx / d, idx % d);
        let even = col - col % 2;
        let angle = pos as f64 / 10000f64.powf(even as f64 / d as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub store: ParameterStore,
    layout: Layout,
}

/// Attention probabilities recorded during a forward pass, one entry per head and block.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    pub maps: Vec<Var>,
}

impl TransformerModel {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let layout = Builder {
            store: &mut store,
            rng: Some(ChaCha8Rng::seed_from_u64(config.seed)),
        }
        .layout(&config)?;
        Ok(Self { config, store, layout })
    }

    /// Rebind a loaded parameter store, checking names and shapes.
    pub fn from_store(config: TransformerConfig, mut store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let layout = Builder {
            store: &mut store,
            rng: None,
        }
        .layout(&config)?;
        Ok(Self { config, store, layout })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Record the forward pass for `src` (batch × n_e × source_dim) and `tgt`
    /// (batch × n_d × target_dim); returns batch × n_d × target_dim.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, src: Var, tgt: Var) -> Result<Var> {
        self.forward_traced(g, store, src, tgt, &mut AttentionTrace::default())
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        src: Var,
        tgt: Var,
        trace: &mut AttentionTrace,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (ss, ts) = (g.value(src).shape().to_vec(), g.value(tgt).shape().to_vec());
        if ss.len() != 3 || ts.len() != 3 || ss[0] != ts[0] || ss[1] != cfg.n_e || ts[1] != cfg.n_d
            || ss[2] != cfg.source_dim || ts[2] != cfg.target_dim
        {
            return Err(Error::Shape {
                op: "transformer forward",
                left: ss,
                right: ts,
            });
        }
        let params: Vec<Var> = store.ids().map(|id| g.param(store, id)).collect();
        let p = |id: ParamId| params[id.index()];
        let lay = &self.layout;
        let d = cfg.d_model;

        let embed = |g: &mut Graph, x: Var, dense: Dense, len: usize| -> Result<Var> {
            let h = g.linear(x, p(dense.w), p(dense.b))?;
            if cfg.positional_encoding {
                let pe = g.input(positional_encoding(len, d));
                g.add_broadcast(h, pe)
            } else {
                Ok(h)
            }
        };
        let dense = |g: &mut Graph, x: Var, l: Dense| g.linear(x, p(l.w), p(l.b));
        let add_norm = |g: &mut Graph, x: Var, y: Var, n: Norm| -> Result<Var> {
            let s = g.add(x, y)?;
            g.layer_norm(s, p(n.gain), p(n.bias))
        };
        let feed_forward = |g: &mut Graph, x: Var, f1: Dense, f2: Dense| -> Result<Var> {
            let h = dense(g, x, f1)?;
            let h = g.relu(h);
            dense(g, h, f2)
        };
        let dh = d / cfg.heads;
        let causal = Rc::new(
            (0..cfg.n_d * cfg.n_d)
                .map(|i| i % cfg.n_d > i / cfg.n_d)
                .collect::<Vec<bool>>(),
        );
        let mut attention = |g: &mut Graph, x: Var, mem: Var, a: Attention, masked: bool| -> Result<Var> {
            let q = dense(g, x, a.q)?;
            let k = dense(g, mem, a.k)?;
            let v = dense(g, mem, a.v)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = g.slice_last(q, h * dh, dh)?;
                let kh = g.slice_last(k, h * dh, dh)?;
                let vh = g.slice_last(v, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
                if masked {
                    scores = g.masked_fill(scores, causal.clone(), MASKED_SCORE)?;
                }
                let weights = g.softmax(scores);
                trace.maps.push(weights);
                heads.push(g.matmul(weights, vh)?);
            }
            let cat = g.concat_last(&heads)?;
            dense(g, cat, a.o)
        };

        let mut mem = embed(g, src, lay.source_in, cfg.n_e)?;
        for layer in &lay.encoder {
            let a = attention(g, mem, mem, layer.attn, false)?;
            mem = add_norm(g, mem, a, layer.norm1)?;
            let f = feed_forward(g, mem, layer.ff1, layer.ff2)?;
            mem = add_norm(g, mem, f, layer.norm2)?;
        }
        let mut x = embed(g, tgt, lay.target_in, cfg.n_d)?;
        for layer in &lay.decoder {
            let a = attention(g, x, x, layer.self_attn, true)?;
            x = add_norm(g, x, a, layer.norm1)?;
            let c = attention(g, x, mem, layer.cross_attn, false)?;
            x = add_norm(g, x, c, layer.norm2)?;
            let f = feed_forward(g, x, layer.ff1, layer.ff2)?;
            x = add_norm(g, x, f, layer.norm3)?;
        }
        dense(g, x, lay.head)
    }

    /// Forward without recording gradients, on the model's own parameters.
    pub fn predict(&self, src: &Tensor, tgt: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let s = g.input(src.clone());
        let t = g.input(tgt.clone());
        let out = self.forward(&mut g, &self.store, s, t)?;
        Ok(g.value(out).clone())
    }
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}
