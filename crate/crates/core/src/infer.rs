//! Fast incremental decoding with a key/value cache.
//!
//! The tape-based forward pass in [`crate::model`] recomputes the whole
//! prefix for every new token, which is what training needs but far too
//! slow for sampling. This module holds the same weights in a flat,
//! read-only form and advances one position at a time, caching each
//! layer's keys and values.
//!
//! The arithmetic matches the training forward exactly up to summation
//! order (same layer-norm epsilon, same GELU, same tied unembedding), and
//! is itself fully deterministic: one thread, fixed loops, no
//! order-dependent reductions.

use crate::autodiff::gelu_fwd;
use crate::error::{Error, Result};
use crate::model::{merge_adapter, LoraAdapter, Params, TransformerConfig};
use crate::scalar::{s, Scalar};

const LN_EPS: f64 = 1e-5;

struct LayerWeights<S> {
    ln1_g: Vec<S>,
    ln1_b: Vec<S>,
    wq: Vec<S>,
    wk: Vec<S>,
    wv: Vec<S>,
    wo: Vec<S>,
    ln2_g: Vec<S>,
    ln2_b: Vec<S>,
    w1: Vec<S>,
    w2: Vec<S>,
}

/// Read-only weights arranged for single-position decoding.
pub struct InferModel<S> {
    pub config: TransformerConfig,
    tok_emb: Vec<S>,
    pos_emb: Vec<S>,
    layers: Vec<LayerWeights<S>>,
    ln_f_g: Vec<S>,
    ln_f_b: Vec<S>,
}

impl<S: Scalar> InferModel<S> {
    pub fn new(params: &Params<S>) -> InferModel<S> {
        let cfg = params.config;
        let grab = |name: &str| params.get(name).data.clone();
        let layers = (0..cfg.layers)
            .map(|l| LayerWeights {
                ln1_g: grab(&format!("layer{l}.ln1.g")),
                ln1_b: grab(&format!("layer{l}.ln1.b")),
                wq: grab(&format!("layer{l}.attn.wq")),
                wk: grab(&format!("layer{l}.attn.wk")),
                wv: grab(&format!("layer{l}.attn.wv")),
                wo: grab(&format!("layer{l}.attn.wo")),
                ln2_g: grab(&format!("layer{l}.ln2.g")),
                ln2_b: grab(&format!("layer{l}.ln2.b")),
                w1: grab(&format!("layer{l}.mlp.w1")),
                w2: grab(&format!("layer{l}.mlp.w2")),
            })
            .collect();
        InferModel {
            config: cfg,
            tok_emb: grab("tok_emb"),
            pos_emb: grab("pos_emb"),
            layers,
            ln_f_g: grab("ln_f.g"),
            ln_f_b: grab("ln_f.b"),
        }
    }

    /// Base weights with a low-rank adapter folded in.
    pub fn merged(base: &Params<S>, adapter: &LoraAdapter<S>) -> InferModel<S> {
        InferModel::new(&merge_adapter(base, adapter))
    }
}

/// Per-layer cached keys and values for one sequence being decoded.
pub struct KvCache<S> {
    /// `[layer][pos * d_model ..]`, filled up to `len` positions.
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    len: usize,
    context: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(model: &InferModel<S>) -> KvCache<S> {
        let cfg = &model.config;
        KvCache {
            k: (0..cfg.layers).map(|_| vec![S::ZERO; cfg.context * cfg.d_model]).collect(),
            v: (0..cfg.layers).map(|_| vec![S::ZERO; cfg.context * cfg.d_model]).collect(),
            len: 0,
            context: cfg.context,
        }
    }

    /// Number of positions already decoded.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forget everything and start a new sequence.
    pub fn reset(&mut self) {
        self.len = 0;
    }
}

/// `out[j] = Σ_i x[i] · w[i,j]` for row-major `w: [d_in, d_out]`.
fn matvec<S: Scalar>(x: &[S], w: &[S], d_in: usize, d_out: usize, out: &mut [S]) {
    out[..d_out].fill(S::ZERO);
    for i in 0..d_in {
        let xi = x[i];
        let row = &w[i * d_out..(i + 1) * d_out];
        for j in 0..d_out {
            out[j] = out[j] + xi * row[j];
        }
    }
}

fn layer_norm_vec<S: Scalar>(x: &[S], g: &[S], b: &[S], out: &mut [S]) {
    let d = x.len();
    let inv_d = S::ONE / s::<S>(d as f64);
    let mean = x.iter().copied().sum::<S>() * inv_d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
    let rstd = S::ONE / (var + s::<S>(LN_EPS)).sqrt();
    for j in 0..d {
        out[j] = (x[j] - mean) * rstd * g[j] + b[j];
    }
}

/// Feed one token at the next position; returns the full logits row.
pub fn step<S: Scalar>(model: &InferModel<S>, cache: &mut KvCache<S>, token: u16) -> Result<Vec<S>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let pos = cache.len;
    if pos >= cache.context {
        return Err(Error::ContextOverflow { len: pos + 1, max: cache.context });
    }
    if (token as usize) >= cfg.vocab {
        return Err(Error::UnknownSymbol { byte: token as u8 });
    }

    let mut x = vec![S::ZERO; d];
    for j in 0..d {
        x[j] = model.tok_emb[token as usize * d + j] + model.pos_emb[pos * d + j];
    }

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = S::ONE / s::<S>((dh as f64).sqrt());
    let mut h = vec![S::ZERO; d];
    let mut q = vec![S::ZERO; d];
    let mut attn = vec![S::ZERO; d];
    let mut proj = vec![S::ZERO; d];
    let mut ff = vec![S::ZERO; cfg.d_ff];
    let mut scores = vec![S::ZERO; pos + 1];

    for (l, lw) in model.layers.iter().enumerate() {
        layer_norm_vec(&x, &lw.ln1_g, &lw.ln1_b, &mut h);
        matvec(&h, &lw.wq, d, d, &mut q);
        let (kc, vc) = (&mut cache.k[l], &mut cache.v[l]);
        {
            let krow = &mut kc[pos * d..(pos + 1) * d];
            matvec(&h, &lw.wk, d, d, krow);
        }
        {
            let vrow = &mut vc[pos * d..(pos + 1) * d];
            matvec(&h, &lw.wv, d, d, vrow);
        }

        for hd in 0..heads {
            let off = hd * dh;
            let qh = &q[off..off + dh];
            // Scores against every cached key, softmax with max-shift.
            for j in 0..=pos {
                let kj = &kc[j * d + off..j * d + off + dh];
                let mut dot = S::ZERO;
                for e in 0..dh {
                    dot = dot + qh[e] * kj[e];
                }
                scores[j] = dot * scale;
            }
            let mut max = scores[0];
            for j in 1..=pos {
                max = max.max(scores[j]);
            }
            let mut total = S::ZERO;
            for j in 0..=pos {
                scores[j] = (scores[j] - max).exp();
                total = total + scores[j];
            }
            let inv = S::ONE / total;
            let out = &mut attn[off..off + dh];
            out.fill(S::ZERO);
            for j in 0..=pos {
                let p = scores[j] * inv;
                let vj = &vc[j * d + off..j * d + off + dh];
                for e in 0..dh {
                    out[e] = out[e] + p * vj[e];
                }
            }
        }

        matvec(&attn, &lw.wo, d, d, &mut proj);
        for j in 0..d {
            x[j] = x[j] + proj[j];
        }

        layer_norm_vec(&x, &lw.ln2_g, &lw.ln2_b, &mut h);
        matvec(&h, &lw.w1, d, cfg.d_ff, &mut ff);
        for f in ff.iter_mut() {
            *f = gelu_fwd(*f);
        }
        matvec(&ff, &lw.w2, cfg.d_ff, d, &mut proj);
        for j in 0..d {
            x[j] = x[j] + proj[j];
        }
    }

    layer_norm_vec(&x, &model.ln_f_g, &model.ln_f_b, &mut h);
    // Tied unembedding: logits[t] = h · tok_emb[t].
    let mut logits = vec![S::ZERO; cfg.vocab];
    for t in 0..cfg.vocab {
        let row = &model.tok_emb[t * d..(t + 1) * d];
        let mut dot = S::ZERO;
        for j in 0..d {
            dot = dot + h[j] * row[j];
        }
        logits[t] = dot;
    }

    cache.len += 1;
    Ok(logits)
}

/// Feed a whole prefix, returning the logits after its last token.
pub fn prefill<S: Scalar>(model: &InferModel<S>, cache: &mut KvCache<S>, tokens: &[u16]) -> Result<Vec<S>> {
    if tokens.is_empty() {
        return Err(Error::shape("prefill", "empty prefix"));
    }
    let mut logits = Vec::new();
    for &t in tokens {
        logits = step(model, cache, t)?;
    }
    Ok(logits)
}

/// Teacher-forced pass over a full sequence: logits row for every position.
/// Row `i` is the distribution over token `i + 1`.
pub fn forced_logits<S: Scalar>(model: &InferModel<S>, tokens: &[u16]) -> Result<Vec<Vec<S>>> {
    let mut cache = KvCache::new(model);
    tokens.iter().map(|&t| step(model, &mut cache, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{forward, load_model, LoraConfig, LoraTarget};
    use rand::Rng;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig { layers: 2, heads: 2, d_model: 16, d_ff: 32, vocab: 64, context: 32 }
    }

    #[test]
    fn cache_decoding_matches_tape_forward() {
        let cfg = tiny_config();
        let params: Params<f64> = Params::init(&cfg, 21).unwrap();
        let tokens: Vec<u16> = vec![0, 7, 12, 3, 15, 9, 4, 16, 2];

        let mut tape = Tape::new();
        let model = load_model(&mut tape, &params, None, false, false);
        let logits_id = forward(&mut tape, &model, &tokens, None).unwrap();
        let taped = tape.values(logits_id).to_vec();

        let im = InferModel::new(&params);
        let rows = forced_logits(&im, &tokens).unwrap();
        assert_eq!(rows.len(), tokens.len());
        let mut worst = 0.0f64;
        for (i, row) in rows.iter().enumerate() {
            for (t, &x) in row.iter().enumerate() {
                worst = worst.max((x - taped[i * cfg.vocab + t]).abs());
            }
        }
        assert!(worst < 1e-9, "cache decode diverges from training forward by {worst}");
    }

    #[test]
    fn merged_adapter_cache_matches_taped_adapter() {
        let cfg = tiny_config();
        let params: Params<f64> = Params::init(&cfg, 22).unwrap();
        let lc = LoraConfig { rank: 4, alpha: 8.0, targets: LoraTarget::ALL.to_vec(), dropout: 0.0 };
        let mut adapter: LoraAdapter<f64> = LoraAdapter::init(&cfg, &lc, 23).unwrap();
        let mut r = crate::rng::stream(24, "test-b", &[]);
        for nt in &mut adapter.tensors {
            if nt.name.ends_with("lora_b") {
                for x in &mut nt.tensor.data {
                    *x = r.gen_range(-0.05..0.05);
                }
            }
        }
        let tokens: Vec<u16> = vec![0, 5, 13, 8, 2];

        let mut tape = Tape::new();
        let model = load_model(&mut tape, &params, Some(&adapter), false, false);
        let logits_id = forward(&mut tape, &model, &tokens, None).unwrap();
        let taped = tape.values(logits_id).to_vec();

        let im = InferModel::merged(&params, &adapter);
        let rows = forced_logits(&im, &tokens).unwrap();
        let mut worst = 0.0f64;
        for (i, row) in rows.iter().enumerate() {
            for (t, &x) in row.iter().enumerate() {
                worst = worst.max((x - taped[i * cfg.vocab + t]).abs());
            }
        }
        assert!(worst < 1e-9, "merged cache decode diverges by {worst}");
    }

    #[test]
    fn decoding_is_bit_deterministic() {
        let cfg = tiny_config();
        let params: Params<f32> = Params::init(&cfg, 25).unwrap();
        let im = InferModel::new(&params);
        let tokens: Vec<u16> = vec![0, 3, 9, 14, 6];
        let a = forced_logits(&im, &tokens).unwrap();
        let b = forced_logits(&im, &tokens).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn overflowing_the_context_errors() {
        let cfg = TransformerConfig { context: 4, ..tiny_config() };
        let params: Params<f32> = Params::init(&cfg, 26).unwrap();
        let im = InferModel::new(&params);
        let mut cache = KvCache::new(&im);
        for t in 0..4u16 {
            step(&im, &mut cache, t).unwrap();
        }
        assert!(matches!(
            step(&im, &mut cache, 0),
            Err(Error::ContextOverflow { len: 5, max: 4 })
        ));
    }
}
