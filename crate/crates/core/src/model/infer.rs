//! Inference-only incremental decoding with per-layer key/value caches.
//!
//! Causal attention means a position's hidden state never changes once
//! computed, so generation appends one token at a time instead of re-running
//! the full teacher-forced stack. The arithmetic mirrors the tape path
//! exactly (verified by a parity test against `decode_teacher_forced`).

use crate::error::{Error, Result};
use crate::model::{AttnParams, LnParams, Mode, Planet, LAYER_NORM_EPS};
use crate::params::{Graph, ParamId};
use crate::tensor::{kernels, Tensor};

/// Encoder outputs as plain values (no tape attached).
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub states: Tensor,
    pub bank: Tensor,
}

/// Run the encoder in eval mode and extract the states and keyphrase bank.
pub fn encode_source(
    model: &Planet,
    source_ids: &[usize],
    segment_positions: &[usize],
) -> Result<EncodedSource> {
    let mut g = Graph::new(&model.params);
    let enc = model.encode(&mut g, source_ids, segment_positions, &mut Mode::eval())?;
    Ok(EncodedSource {
        states: g.tape.value(enc.states).clone(),
        bank: g.tape.value(enc.bank).clone(),
    })
}

fn pval(model: &Planet, id: ParamId) -> &Tensor {
    &model.params.get(id).value
}

fn row_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = b.data.clone();
    // out += x * w, same kernel the tape uses with m = 1
    let mut acc = vec![0.0; w.cols];
    kernels::matmul(x, &w.data, &mut acc, 1, w.rows, w.cols);
    for (o, a) in out.iter_mut().zip(&acc) {
        *o += a;
    }
    out
}

fn mat_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, w.cols);
    kernels::matmul(&x.data, &w.data, &mut out.data, x.rows, w.rows, w.cols);
    for row in out.data.chunks_mut(w.cols) {
        for (o, a) in row.iter_mut().zip(&b.data) {
            *o += a;
        }
    }
    out
}

fn ln_row(x: &[f64], ln: &LnParams, model: &Planet) -> Vec<f64> {
    let g = &pval(model, ln.gain).data;
    let b = &pval(model, ln.bias).data;
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
        .collect()
}

fn softmax_inplace(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Attention of a single query row against cached keys/values [t x d],
/// including the output projection.
fn attend_row(
    model: &Planet,
    q_row: &[f64],
    keys: &Tensor,
    values: &Tensor,
    p: &AttnParams,
) -> Vec<f64> {
    let d = model.config.hidden;
    let heads = model.config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = keys.rows;
    let mut merged = vec![0.0; d];
    for h in 0..heads {
        let off = h * dh;
        let qh = &q_row[off..off + dh];
        let mut scores = vec![0.0; t];
        for (j, s) in scores.iter_mut().enumerate() {
            let krow = &keys.row_slice(j)[off..off + dh];
            let mut dot = 0.0;
            for (a, b) in qh.iter().zip(krow) {
                dot += a * b;
            }
            *s = dot * scale;
        }
        softmax_inplace(&mut scores);
        let ctx = &mut merged[off..off + dh];
        for (j, &a) in scores.iter().enumerate() {
            let vrow = &values.row_slice(j)[off..off + dh];
            for (c, v) in ctx.iter_mut().zip(vrow) {
                *c += a * v;
            }
        }
    }
    row_linear(&merged, pval(model, p.wo), pval(model, p.bo))
}

struct LayerCache {
    self_k: Tensor,
    self_v: Tensor,
    cross_k: Tensor,
    cross_v: Tensor,
}

/// Streaming decoder: feed tokens one at a time, get next-token logits back.
pub struct IncrementalDecoder<'m> {
    model: &'m Planet,
    layers: Vec<LayerCache>,
    sel_bank_k: Tensor,
    sel_bank_v: Tensor,
    bank_rows: usize,
    pos: usize,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Planet, enc: &EncodedSource) -> IncrementalDecoder<'m> {
        let layers = model
            .handles
            .dec_layers
            .iter()
            .map(|l| LayerCache {
                self_k: Tensor::zeros(0, model.config.hidden),
                self_v: Tensor::zeros(0, model.config.hidden),
                cross_k: mat_linear(
                    &enc.states,
                    pval(model, l.cross_attn.wk),
                    pval(model, l.cross_attn.bk),
                ),
                cross_v: mat_linear(
                    &enc.states,
                    pval(model, l.cross_attn.wv),
                    pval(model, l.cross_attn.bv),
                ),
            })
            .collect();
        let sel = &model.handles.sel_attn;
        IncrementalDecoder {
            model,
            layers,
            sel_bank_k: mat_linear(&enc.bank, pval(model, sel.wk), pval(model, sel.bk)),
            sel_bank_v: mat_linear(&enc.bank, pval(model, sel.wv), pval(model, sel.bv)),
            bank_rows: enc.bank.rows,
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consume `token` at the current position and return the LM logits for
    /// the next position.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let m = self.model;
        let d = m.config.hidden;
        if self.pos >= m.config.max_positions {
            return Err(Error::Data(format!(
                "decode position {} exceeds max_positions {}",
                self.pos, m.config.max_positions
            )));
        }
        if token >= m.config.vocab_size {
            return Err(Error::Index(format!(
                "token {} vs vocab {}",
                token, m.config.vocab_size
            )));
        }
        let tok = pval(m, m.handles.tok_emb).row_slice(token);
        let posv = pval(m, m.handles.pos_emb).row_slice(self.pos);
        let mut x: Vec<f64> = tok.iter().zip(posv).map(|(a, b)| a + b).collect();

        for (l, cache) in m.handles.dec_layers.iter().zip(self.layers.iter_mut()) {
            // causal self-attention over the cache plus this position
            let h = ln_row(&x, &l.ln1, m);
            let q = row_linear(&h, pval(m, l.self_attn.wq), pval(m, l.self_attn.bq));
            let k = row_linear(&h, pval(m, l.self_attn.wk), pval(m, l.self_attn.bk));
            let v = row_linear(&h, pval(m, l.self_attn.wv), pval(m, l.self_attn.bv));
            cache.self_k.data.extend_from_slice(&k);
            cache.self_k.rows += 1;
            cache.self_v.data.extend_from_slice(&v);
            cache.self_v.rows += 1;
            let attn = attend_row(m, &q, &cache.self_k, &cache.self_v, &l.self_attn);
            for (xx, a) in x.iter_mut().zip(&attn) {
                *xx += a;
            }

            // cross attention into the precomputed encoder projections
            let h = ln_row(&x, &l.ln2, m);
            let q = row_linear(&h, pval(m, l.cross_attn.wq), pval(m, l.cross_attn.bq));
            let cross = attend_row(m, &q, &cache.cross_k, &cache.cross_v, &l.cross_attn);
            for (xx, a) in x.iter_mut().zip(&cross) {
                *xx += a;
            }

            // position-wise feed-forward
            let h = ln_row(&x, &l.ln3, m);
            let mut hidden = row_linear(&h, pval(m, l.ffn.w1), pval(m, l.ffn.b1));
            for v in hidden.iter_mut() {
                *v = v.max(0.0);
            }
            let ff = row_linear(&hidden, pval(m, l.ffn.w2), pval(m, l.ffn.b2));
            for (xx, a) in x.iter_mut().zip(&ff) {
                *xx += a;
            }
        }
        let top = ln_row(&x, &m.handles.dec_final_ln, m);

        // content selection on the single row (bypass on empty bank)
        let h_d = if self.bank_rows > 0 {
            let sel = &m.handles.sel_attn;
            let q = row_linear(&top, pval(m, sel.wq), pval(m, sel.bq));
            let c = attend_row(m, &q, &self.sel_bank_k, &self.sel_bank_v, sel);
            let mut pre = row_linear(&top, pval(m, m.handles.sel_wh), pval(m, m.handles.sel_bs));
            let cw = {
                let w = pval(m, m.handles.sel_wc);
                let mut acc = vec![0.0; w.cols];
                kernels::matmul(&c, &w.data, &mut acc, 1, w.rows, w.cols);
                acc
            };
            for (p, a) in pre.iter_mut().zip(&cw) {
                *p += a;
            }
            for p in pre.iter_mut() {
                *p = p.tanh();
            }
            let proj = {
                let w = pval(m, m.handles.sel_ws);
                let mut acc = vec![0.0; w.cols];
                kernels::matmul(&pre, &w.data, &mut acc, 1, w.rows, w.cols);
                acc
            };
            let mut out = top.clone();
            for (o, p) in out.iter_mut().zip(&proj) {
                *o += p;
            }
            out
        } else {
            top
        };
        let _ = d;
        self.pos += 1;
        Ok(row_linear(
            &h_d,
            pval(m, m.handles.lm_w),
            pval(m, m.handles.lm_b),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{BOS, SEG, SN};

    fn tiny() -> Planet {
        Planet::new(
            ModelConfig {
                vocab_size: 30,
                hidden: 16,
                heads: 2,
                enc_layers: 1,
                dec_layers: 2,
                ffn_mult: 2,
                max_positions: 32,
                dropout: 0.0,
                bow_mlp_hidden: 8,
                coherence_proj_dim: 16,
            },
            77,
        )
        .unwrap()
    }

    /// Randomize sel.ws so the selection path is active during the parity check.
    fn activate_selection(m: &mut Planet) {
        let ws = m.handles.sel_ws;
        let mut rng = crate::rng::SeedRng::new(5);
        m.params.get_mut(ws).value = Tensor::uniform(16, 16, -0.3, 0.3, &mut rng);
    }

    #[test]
    fn incremental_matches_teacher_forced() {
        let mut m = tiny();
        activate_selection(&mut m);
        let source = vec![9, 10, SEG, 11, 12, SEG, 13];
        let segs = vec![2, 5];
        let prefix = vec![BOS, SN, 14, 15, 16, SN, 17, 18];

        let enc = encode_source(&m, &source, &segs).unwrap();
        let mut inc = IncrementalDecoder::new(&m, &enc);

        for steps in 1..=prefix.len() {
            let logits_inc = inc.step(prefix[steps - 1]).unwrap();
            // reference: full teacher-forced pass over the same prefix
            let mut g = Graph::new(&m.params);
            let enc_t = m.encode(&mut g, &source, &segs, &mut Mode::eval()).unwrap();
            let h = m
                .decode_teacher_forced(&mut g, enc_t.states, &prefix[..steps], &mut Mode::eval())
                .unwrap();
            let (h_d, _) = m.content_selection(&mut g, h, enc_t.bank).unwrap();
            let lm = m.lm_logits(&mut g, h_d).unwrap();
            let reference = g.tape.value(lm).row_slice(steps - 1);
            for (a, b) in logits_inc.iter().zip(reference) {
                assert!(
                    (a - b).abs() <= 1e-9,
                    "prefix {} mismatch: {} vs {}",
                    steps,
                    a,
                    b
                );
            }
        }
    }

    #[test]
    fn incremental_matches_without_bank() {
        let m = tiny();
        let source = vec![9, 10, 11];
        let enc = encode_source(&m, &source, &[]).unwrap();
        assert_eq!(enc.bank.rows, 0);
        let mut inc = IncrementalDecoder::new(&m, &enc);
        let logits = inc.step(BOS).unwrap();

        let mut g = Graph::new(&m.params);
        let enc_t = m.encode(&mut g, &source, &[], &mut Mode::eval()).unwrap();
        let h = m
            .decode_teacher_forced(&mut g, enc_t.states, &[BOS], &mut Mode::eval())
            .unwrap();
        let (h_d, bypassed) = m.content_selection(&mut g, h, enc_t.bank).unwrap();
        assert!(bypassed);
        let lm = m.lm_logits(&mut g, h_d).unwrap();
        for (a, b) in logits.iter().zip(g.tape.value(lm).row_slice(0)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn position_overflow_errors() {
        let m = tiny();
        let enc = encode_source(&m, &[9], &[]).unwrap();
        let mut inc = IncrementalDecoder::new(&m, &enc);
        for _ in 0..32 {
            inc.step(9).unwrap();
        }
        assert!(inc.step(9).is_err());
    }
}
