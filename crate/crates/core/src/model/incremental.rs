//! Token-at-a-time decoding with cached self-attention keys and values.
//!
//! Computes the same function as the packed forward pass, one decoder
//! position per call, for any number of hypotheses sharing one source.

use ndarray::{s, Array1, Array2};

use super::params::{Attention, Parameters};
use super::transformer::{
    add_positional, encode_packed, ffn, layer_norm, linear, log_softmax_in_place, segments,
    softmax_in_place,
};
use super::{check_ids, check_len};
use crate::error::{Error, Result};
use crate::TokenId;

/// Encoder output for one source, with each decoder layer's cross-attention
/// keys and values already projected.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub memory: Array2<f64>,
    cross: Vec<(Array2<f64>, Array2<f64>)>,
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
}

impl DecoderState {
    /// Number of decoder inputs consumed so far.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Parameters {
    pub fn encode(&self, source: &[TokenId]) -> Result<EncodedSource> {
        if source.is_empty() {
            return Err(Error::InvalidArgument("source must be non-empty".into()));
        }
        check_len(self, source.len())?;
        check_ids(self, source)?;
        let memory = encode_packed(self, source, &segments([source.len()]));
        let cross = self
            .decoder
            .iter()
            .map(|layer| {
                (
                    linear(&layer.cross_attn.key, &memory),
                    linear(&layer.cross_attn.value, &memory),
                )
            })
            .collect();
        Ok(EncodedSource { memory, cross })
    }

    pub fn start_state(&self) -> DecoderState {
        let d = self.arch.d_model;
        DecoderState {
            keys: vec![Array2::zeros((0, d)); self.decoder.len()],
            values: vec![Array2::zeros((0, d)); self.decoder.len()],
        }
    }

    /// Feeds `tokens[i]` to `states[i]` and returns one row of next-token
    /// log-probabilities per state.
    pub fn step(
        &self,
        enc: &EncodedSource,
        states: &mut [DecoderState],
        tokens: &[TokenId],
    ) -> Result<Array2<f64>> {
        if states.len() != tokens.len() {
            return Err(Error::InvalidArgument(
                "one token per decoder state is required".into(),
            ));
        }
        check_ids(self, tokens)?;
        for st in states.iter() {
            check_len(self, st.len() + 1)?;
        }
        let d = self.arch.d_model;
        let n_heads = self.arch.n_heads;
        let scale = (d as f64).sqrt();

        let mut x = Array2::zeros((tokens.len(), d));
        for (i, (&tok, st)) in tokens.iter().zip(states.iter()).enumerate() {
            let mut row = x.row_mut(i);
            row.scaled_add(scale, &self.tgt_embed.row(tok as usize));
            add_positional(st.len(), row.as_slice_mut().expect("contiguous"));
        }

        for (li, layer) in self.decoder.iter().enumerate() {
            let a = layer_norm(&layer.self_norm, &x);
            let q = linear(&layer.self_attn.query, &a);
            let k = linear(&layer.self_attn.key, &a);
            let v = linear(&layer.self_attn.value, &a);
            let mut ctx = Array2::zeros((tokens.len(), d));
            for (i, st) in states.iter_mut().enumerate() {
                st.keys[li].push_row(k.row(i)).expect("row width matches");
                st.values[li].push_row(v.row(i)).expect("row width matches");
                attend(&q, i, &st.keys[li], &st.values[li], n_heads, &mut ctx);
            }
            x += &linear(&layer.self_attn.output, &ctx);

            let b = layer_norm(&layer.cross_norm, &x);
            x += &cross_attend(&layer.cross_attn, &b, &enc.cross[li], n_heads);

            let c = layer_norm(&layer.ffn_norm, &x);
            x += &ffn(&layer.ffn, &c);
        }

        let hidden = layer_norm(&self.dec_norm, &x);
        let mut logits = hidden.dot(&self.tgt_embed.t());
        for mut row in logits.rows_mut() {
            log_softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        Ok(logits)
    }
}

fn cross_attend(
    attn: &Attention,
    input: &Array2<f64>,
    kv: &(Array2<f64>, Array2<f64>),
    n_heads: usize,
) -> Array2<f64> {
    let q = linear(&attn.query, input);
    let mut ctx = Array2::zeros(q.raw_dim());
    for i in 0..q.nrows() {
        attend(&q, i, &kv.0, &kv.1, n_heads, &mut ctx);
    }
    linear(&attn.output, &ctx)
}

/// Attention of query row `i` over all rows of `keys`, written into `ctx`.
fn attend(
    q: &Array2<f64>,
    i: usize,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    n_heads: usize,
    ctx: &mut Array2<f64>,
) {
    let dh = q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![i, cols.clone()]);
        let kh = keys.slice(s![.., cols.clone()]);
        let mut scores: Array1<f64> = kh.dot(&qh);
        scores *= scale;
        softmax_in_place(scores.as_slice_mut().expect("contiguous"));
        let vh = values.slice(s![.., cols.clone()]);
        ctx.slice_mut(s![i, cols]).assign(&vh.t().dot(&scores));
    }
}

#[cfg(test)]
mod tests {
    use crate::encoding::{EosMode, Vocab, BOS};
    use crate::model::{forward, ModelConfig, Parameters};

    #[test]
    fn incremental_matches_full_forward() {
        let vocab = Vocab::new(9, EosMode::Single);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 12,
            ..ModelConfig::default()
        };
        let params = Parameters::init(config.architecture(vocab.size()), 11).unwrap();
        let source = [2, 5, 7, 3];
        let prefix = [4, 4, 9, 2];
        let full = forward(&params, &source, &prefix).unwrap();

        let enc = params.encode(&source).unwrap();
        let mut states = vec![params.start_state()];
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&prefix);
        for (t, &tok) in inputs.iter().enumerate() {
            let lp = params.step(&enc, &mut states, &[tok]).unwrap();
            for (a, b) in lp.row(0).iter().zip(&full[t].log_probs) {
                assert!((a - b).abs() < 1e-12, "position {t}");
            }
        }
        assert_eq!(states[0].len(), 5);
    }
}
