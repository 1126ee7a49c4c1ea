//! The named parameter bank: embeddings, both bidirectional encoders, the
//! K mapping modules, the response projection, and the attention decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::rng;
use crate::scalar::Scalar;

/// All layer sizes, derived from a train config plus the built vocabulary.
///
/// `hidden` is the per-direction encoder width and the decoder width, so
/// encoder summaries are `2 * hidden` wide and every mapping module is a
/// `hidden x 2*hidden` affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub mappings: usize,
}

impl ModelDims {
    pub fn summary_width(&self) -> usize {
        2 * self.hidden
    }

    /// Decoder GRU consumes `[e(y_prev); c_t]`.
    pub fn decoder_input_width(&self) -> usize {
        self.embed + self.summary_width()
    }

    pub fn attention_width(&self) -> usize {
        self.hidden
    }
}

/// One named parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Vec<S>,
    pub grad_set: bool,
}

impl<S: Scalar> Parameter<S> {
    fn new(name: String, shape: Vec<usize>, values: Vec<S>) -> Self {
        let n = values.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Parameter { name, shape, values, grad: vec![S::zero(); n], grad_set: false }
    }
}

/// Indices of the nine GRU gate parameters inside the bank.
#[derive(Debug, Clone, Copy)]
pub struct GruSlot {
    pub wz: usize,
    pub uz: usize,
    pub bz: usize,
    pub wr: usize,
    pub ur: usize,
    pub br: usize,
    pub wh: usize,
    pub uh: usize,
    pub bh: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AffineSlot {
    pub w: usize,
    pub b: usize,
}

/// Complete model parameter bank, iterable by name for the optimizer,
/// gradient checker, and checkpointing.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub dims: ModelDims,
    params: Vec<Parameter<S>>,
    pub embedding: usize,
    pub post_fwd: GruSlot,
    pub post_bwd: GruSlot,
    pub resp_fwd: GruSlot,
    pub resp_bwd: GruSlot,
    pub mappings: Vec<AffineSlot>,
    pub resp_proj: usize,
    pub dec_gru: GruSlot,
    pub attn_v: usize,
    pub attn_wh: usize,
    pub attn_ws: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Graph-side handles for one forward pass.
#[derive(Debug, Clone)]
pub struct GraphRefs {
    pub embedding: TensorId,
    pub post_fwd: GruRefs,
    pub post_bwd: GruRefs,
    pub resp_fwd: GruRefs,
    pub resp_bwd: GruRefs,
    pub mappings: Vec<AffineRefs>,
    pub resp_proj: TensorId,
    pub dec_gru: GruRefs,
    pub attn_v: TensorId,
    pub attn_wh: TensorId,
    pub attn_ws: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruRefs {
    pub wz: TensorId,
    pub uz: TensorId,
    pub bz: TensorId,
    pub wr: TensorId,
    pub ur: TensorId,
    pub br: TensorId,
    pub wh: TensorId,
    pub uh: TensorId,
    pub bh: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct AffineRefs {
    pub w: TensorId,
    pub b: TensorId,
}

struct Builder<S: Scalar> {
    params: Vec<Parameter<S>>,
    master_seed: u64,
    bound: f64,
}

impl<S: Scalar> Builder<S> {
    /// Uniform(-bound, bound) weights; each parameter draws from its own
    /// stream keyed by name, so module initializations are independent and
    /// symmetry between mapping modules is broken by construction.
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let mut r = rng::stream(self.master_seed, name);
        let values = (0..rows * cols)
            .map(|_| S::from_f64(r.gen_range(-self.bound..self.bound)))
            .collect();
        self.params.push(Parameter::new(name.to_string(), vec![rows, cols], values));
        self.params.len() - 1
    }

    fn bias(&mut self, name: &str, len: usize) -> usize {
        self.params
            .push(Parameter::new(name.to_string(), vec![len], vec![S::zero(); len]));
        self.params.len() - 1
    }

    fn vector(&mut self, name: &str, len: usize) -> usize {
        let mut r = rng::stream(self.master_seed, name);
        let values = (0..len)
            .map(|_| S::from_f64(r.gen_range(-self.bound..self.bound)))
            .collect();
        self.params.push(Parameter::new(name.to_string(), vec![len], values));
        self.params.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruSlot {
        GruSlot {
            wz: self.weight(&format!("{prefix}.w_z"), hidden, input),
            uz: self.weight(&format!("{prefix}.u_z"), hidden, hidden),
            bz: self.bias(&format!("{prefix}.b_z"), hidden),
            wr: self.weight(&format!("{prefix}.w_r"), hidden, input),
            ur: self.weight(&format!("{prefix}.u_r"), hidden, hidden),
            br: self.bias(&format!("{prefix}.b_r"), hidden),
            wh: self.weight(&format!("{prefix}.w_h"), hidden, input),
            uh: self.weight(&format!("{prefix}.u_h"), hidden, hidden),
            bh: self.bias(&format!("{prefix}.b_h"), hidden),
        }
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(dims: ModelDims, master_seed: u64) -> Self {
        let hidden = dims.hidden;
        let mut b = Builder::<S> {
            params: Vec::new(),
            master_seed,
            bound: 1.0 / (hidden as f64).sqrt(),
        };

        // embeddings use the conventional wider range
        let embedding = {
            let mut r = rng::stream(master_seed, "embedding");
            let values = (0..dims.vocab * dims.embed)
                .map(|_| S::from_f64(r.gen_range(-0.1..0.1)))
                .collect();
            b.params.push(Parameter::new(
                "embedding".to_string(),
                vec![dims.vocab, dims.embed],
                values,
            ));
            b.params.len() - 1
        };

        let post_fwd = b.gru("post_encoder.fwd", dims.embed, hidden);
        let post_bwd = b.gru("post_encoder.bwd", dims.embed, hidden);
        let resp_fwd = b.gru("response_encoder.fwd", dims.embed, hidden);
        let resp_bwd = b.gru("response_encoder.bwd", dims.embed, hidden);

        let mappings = (0..dims.mappings)
            .map(|k| AffineSlot {
                w: b.weight(&format!("mapping.{k}.w"), hidden, dims.summary_width()),
                b: b.bias(&format!("mapping.{k}.b"), hidden),
            })
            .collect();

        let resp_proj = b.weight("response_proj.w", hidden, dims.summary_width());

        let dec_gru = b.gru("decoder.gru", dims.decoder_input_width(), hidden);
        let attn_v = b.vector("attention.v", dims.attention_width());
        let attn_wh = b.weight("attention.w_h", dims.attention_width(), dims.summary_width());
        let attn_ws = b.weight("attention.w_s", dims.attention_width(), hidden);
        let out_w = b.weight("output.w", dims.vocab, hidden + dims.summary_width());
        let out_b = b.bias("output.b", dims.vocab);

        ModelParams {
            dims,
            params: b.params,
            embedding,
            post_fwd,
            post_bwd,
            resp_fwd,
            resp_bwd,
            mappings,
            resp_proj,
            dec_gru,
            attn_v,
            attn_wh,
            attn_ws,
            out_w,
            out_b,
        }
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    pub fn param(&self, index: usize) -> &Parameter<S> {
        &self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
            p.grad_set = false;
        }
    }

    /// Copy gradients out of a graph whose parameter leaves were created by
    /// [`ModelParams::leaf_into`]. Adds onto whatever is already accumulated.
    pub fn accumulate_grads(&mut self, graph: &Graph<S>) {
        for &(id, index) in graph.param_leaves() {
            if let Some(g) = graph.grad(id) {
                let p = &mut self.params[index];
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst = *dst + src;
                }
                p.grad_set = true;
            }
        }
    }

    /// Global gradient norm across every parameter.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.to_f64() * g.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale gradients so the global norm is at most `max_norm`.
    pub fn clip_grads(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = S::from_f64(max_norm / norm);
            for p in self.params.iter_mut() {
                for g in p.grad.iter_mut() {
                    *g = *g * factor;
                }
            }
        }
    }

    /// Mirror every parameter into a fresh graph as leaves.
    pub fn leaf_into(&self, g: &mut Graph<S>, trainable: bool) -> Result<GraphRefs> {
        let leaf = |g: &mut Graph<S>, idx: usize| -> Result<TensorId> {
            let p = &self.params[idx];
            g.leaf_param(idx, p.shape.clone(), p.values.clone(), trainable)
        };
        let gru = |g: &mut Graph<S>, s: &GruSlot| -> Result<GruRefs> {
            Ok(GruRefs {
                wz: leaf(g, s.wz)?,
                uz: leaf(g, s.uz)?,
                bz: leaf(g, s.bz)?,
                wr: leaf(g, s.wr)?,
                ur: leaf(g, s.ur)?,
                br: leaf(g, s.br)?,
                wh: leaf(g, s.wh)?,
                uh: leaf(g, s.uh)?,
                bh: leaf(g, s.bh)?,
            })
        };
        Ok(GraphRefs {
            embedding: leaf(g, self.embedding)?,
            post_fwd: gru(g, &self.post_fwd)?,
            post_bwd: gru(g, &self.post_bwd)?,
            resp_fwd: gru(g, &self.resp_fwd)?,
            resp_bwd: gru(g, &self.resp_bwd)?,
            mappings: self
                .mappings
                .iter()
                .map(|m| {
                    Ok(AffineRefs { w: leaf(g, m.w)?, b: leaf(g, m.b)? })
                })
                .collect::<Result<Vec<_>>>()?,
            resp_proj: leaf(g, self.resp_proj)?,
            dec_gru: gru(g, &self.dec_gru)?,
            attn_v: leaf(g, self.attn_v)?,
            attn_wh: leaf(g, self.attn_wh)?,
            attn_ws: leaf(g, self.attn_ws)?,
            out_w: leaf(g, self.out_w)?,
            out_b: leaf(g, self.out_b)?,
        })
    }

    /// Replace the values of the named parameter, validating its shape.
    pub fn load_values(&mut self, name: &str, shape: &[usize], values: Vec<S>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown parameter `{name}`")))?;
        if p.shape != shape {
            return Err(Error::CheckpointDimensionMismatch {
                name: name.to_string(),
                expected: p.shape.clone(),
                found: shape.to_vec(),
            });
        }
        p.values = values;
        Ok(())
    }
}

/// Load pre-trained embeddings (`token v1 v2 ... vE` per line) into the
/// embedding rows of in-vocab tokens. Unknown tokens are ignored.
pub fn load_embedding_file<S: Scalar>(
    r: impl std::io::BufRead,
    vocab: &crate::vocab::Vocab,
    params: &mut ModelParams<S>,
) -> Result<usize> {
    let embed = params.dims.embed;
    let mut loaded = 0usize;
    let mut rows: Vec<(usize, Vec<S>)> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().ok_or(Error::BadEmbeddingLine {
            line: idx + 1,
            details: "missing token".into(),
        })?;
        let values: Vec<S> = fields
            .map(|f| {
                f.parse::<f64>().map(S::from_f64).map_err(|_| Error::BadEmbeddingLine {
                    line: idx + 1,
                    details: format!("bad float `{f}`"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != embed {
            return Err(Error::BadEmbeddingLine {
                line: idx + 1,
                details: format!("expected {embed} values, found {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id >= 4 || vocab.token(id) == token {
            rows.push((id, values));
            loaded += 1;
        }
    }
    let table = &mut params.params[params.embedding];
    for (id, values) in rows {
        table.values[id * embed..(id + 1) * embed].copy_from_slice(&values);
    }
    Ok(loaded)
}
