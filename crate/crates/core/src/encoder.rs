//! Pre-norm transformer encoder used for both the sentence and the entity side.
//!
//! Sequences are packed row-wise so a single set of matrix products serves a
//! whole batch; attention is restricted to each sequence's own rows and never
//! attends to padding keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::vocab::{CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Longest sequence including the prepended CLS position.
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 4 {
            problems.push("vocab_size must cover the reserved tokens".to_string());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            problems.push(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.layers == 0 {
            problems.push("layers must be positive".to_string());
        }
        if self.ffn_dim == 0 {
            problems.push("ffn_dim must be positive".to_string());
        }
        if self.max_len < 2 {
            problems.push("max_len must be at least 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    query: ParamId,
    query_bias: ParamId,
    key: ParamId,
    key_bias: ParamId,
    value: ParamId,
    value_bias: ParamId,
    out: ParamId,
    out_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn_in: ParamId,
    ffn_in_bias: ParamId,
    ffn_out: ParamId,
    ffn_out_bias: ParamId,
}

/// Handles to one encoder's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    prefix: String,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<BlockParams>,
    final_gain: ParamId,
    final_bias: ParamId,
}

/// Output of one forward pass: the CLS vector and one row per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub cls_vec: Vec<T>,
    pub token_vecs: Matrix<T>,
}

/// Joint passage ⊕ entity encoding. Sentence token `i` is row `i` of `token_vecs`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput<T> {
    pub output: EncoderOutput<T>,
    pub sentence_mask: Vec<bool>,
}

/// Hidden states of a packed batch; sequence `i` occupies rows
/// `offsets[i]..offsets[i] + lens[i]`, its CLS at `offsets[i]`.
#[derive(Debug, Clone)]
pub struct PackedHidden {
    pub hidden: Var,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl PackedHidden {
    pub fn cls_row(&self, seq: usize) -> usize {
        self.offsets[seq]
    }

    /// Row of input token `i` (0-based, after CLS) of sequence `seq`.
    pub fn token_row(&self, seq: usize, i: usize) -> usize {
        self.offsets[seq] + 1 + i
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        self.offsets.clone()
    }
}

impl EncoderParams {
    /// Registers a freshly initialised encoder under `prefix`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: ParamGroup,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let f = config.ffn_dim;
        let name = |s: &str| format!("{prefix}.{s}");
        let emb_scale = 0.5;
        let token_embedding =
            store.add_uniform(name("token_embedding"), group, config.vocab_size, d, emb_scale, rng);
        let position_embedding =
            store.add_uniform(name("position_embedding"), group, config.max_len, d, emb_scale, rng);
        let wd = 1.0 / (d as f64).sqrt();
        let wf = 1.0 / (f as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| name(&format!("block{l}.{s}"));
            blocks.push(BlockParams {
                ln1_gain: store.add_const(n("ln1.gain"), group, 1, d, 1.0),
                ln1_bias: store.add_const(n("ln1.bias"), group, 1, d, 0.0),
                query: store.add_uniform(n("attn.query"), group, d, d, wd, rng),
                query_bias: store.add_const(n("attn.query_bias"), group, 1, d, 0.0),
                key: store.add_uniform(n("attn.key"), group, d, d, wd, rng),
                key_bias: store.add_const(n("attn.key_bias"), group, 1, d, 0.0),
                value: store.add_uniform(n("attn.value"), group, d, d, wd, rng),
                value_bias: store.add_const(n("attn.value_bias"), group, 1, d, 0.0),
                out: store.add_uniform(n("attn.out"), group, d, d, wd, rng),
                out_bias: store.add_const(n("attn.out_bias"), group, 1, d, 0.0),
                ln2_gain: store.add_const(n("ln2.gain"), group, 1, d, 1.0),
                ln2_bias: store.add_const(n("ln2.bias"), group, 1, d, 0.0),
                ffn_in: store.add_uniform(n("ffn.in"), group, d, f, wd, rng),
                ffn_in_bias: store.add_const(n("ffn.in_bias"), group, 1, f, 0.0),
                ffn_out: store.add_uniform(n("ffn.out"), group, f, d, wf, rng),
                ffn_out_bias: store.add_const(n("ffn.out_bias"), group, 1, d, 0.0),
            });
        }
        let final_gain = store.add_const(name("final_ln.gain"), group, 1, d, 1.0);
        let final_bias = store.add_const(name("final_ln.bias"), group, 1, d, 0.0);
        Ok(EncoderParams {
            config,
            prefix: prefix.to_string(),
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    /// Every parameter owned by this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            ids.extend([
                b.ln1_gain,
                b.ln1_bias,
                b.query,
                b.query_bias,
                b.key,
                b.key_bias,
                b.value,
                b.value_bias,
                b.out,
                b.out_bias,
                b.ln2_gain,
                b.ln2_bias,
                b.ffn_in,
                b.ffn_in_bias,
                b.ffn_out,
                b.ffn_out_bias,
            ]);
        }
        ids.extend([self.final_gain, self.final_bias]);
        ids
    }

    fn check(&self, seq: &[u32], extra: usize) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if seq.len() + extra > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens (+{extra} reserved) exceeds max length {}",
                seq.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch; CLS is prepended to every sequence.
    pub fn forward<T: Scalar, S: AsRef<[u32]>>(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[S],
    ) -> Result<PackedHidden> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut key_mask = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let seq = seq.as_ref();
            self.check(seq, 1)?;
            let start = ids.len();
            offsets.push(start);
            ids.push(CLS_ID as usize);
            positions.push(0);
            key_mask.push(true);
            for (i, &t) in seq.iter().enumerate() {
                ids.push(t as usize);
                positions.push(i + 1);
                key_mask.push(t != PAD_ID);
            }
            segments.push((start, ids.len()));
            lens.push(seq.len() + 1);
        }

        let heads = self.config.heads;
        let tok = g.param(self.token_embedding);
        let pos = g.param(self.position_embedding);
        let tok = g.gather(tok, ids);
        let pos = g.gather(pos, positions);
        let mut x = g.add(tok, pos);
        for b in &self.blocks {
            let (gain, bias) = (g.param(b.ln1_gain), g.param(b.ln1_bias));
            let h = g.layer_norm(x, gain, bias);
            let q = linear(g, h, b.query, b.query_bias);
            let k = linear(g, h, b.key, b.key_bias);
            let v = linear(g, h, b.value, b.value_bias);
            let a = g.attention(q, k, v, heads, segments.clone(), key_mask.clone());
            let a = linear(g, a, b.out, b.out_bias);
            x = g.add(x, a);
            let (gain, bias) = (g.param(b.ln2_gain), g.param(b.ln2_bias));
            let h = g.layer_norm(x, gain, bias);
            let f = linear(g, h, b.ffn_in, b.ffn_in_bias);
            let f = g.gelu(f);
            let f = linear(g, f, b.ffn_out, b.ffn_out_bias);
            x = g.add(x, f);
        }
        let (gain, bias) = (g.param(self.final_gain), g.param(self.final_bias));
        let hidden = g.layer_norm(x, gain, bias);
        Ok(PackedHidden {
            hidden,
            offsets,
            lens,
        })
    }

    /// Joint sequence `sentence ⊕ [SEP] ⊕ description` as fed to the reader.
    pub fn joint_tokens(&self, sentence: &[u32], description: &[u32]) -> Result<Vec<u32>> {
        if sentence.is_empty() {
            return Err(Error::Input("cannot encode an empty sentence".into()));
        }
        let mut seq = Vec::with_capacity(sentence.len() + 1 + description.len());
        seq.extend_from_slice(sentence);
        seq.push(SEP_ID);
        seq.extend_from_slice(description);
        self.check(&seq, 1)?;
        Ok(seq)
    }
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn split_output<T: Scalar>(g: &Graph<'_, T>, packed: &PackedHidden, seq: usize) -> EncoderOutput<T> {
    let h = g.value(packed.hidden);
    let start = packed.offsets[seq];
    let len = packed.lens[seq];
    let cls_vec = h.row(start).to_vec();
    let rows: Vec<&[T]> = (start + 1..start + len).map(|r| h.row(r)).collect();
    EncoderOutput {
        cls_vec,
        token_vecs: Matrix::from_rows(&rows),
    }
}

/// Encodes one token sequence without recording gradients.
pub fn encode<T: Scalar>(
    store: &ParamStore<T>,
    params: &EncoderParams,
    tokens: &[u32],
) -> Result<EncoderOutput<T>> {
    let mut g = Graph::new(store);
    let packed = params.forward(&mut g, &[tokens])?;
    let out = split_output(&g, &packed, 0);
    finite(out)
}

/// Encodes many sequences in one packed pass. Results match [`encode`] per sequence.
pub fn encode_batch<T: Scalar, S: AsRef<[u32]>>(
    store: &ParamStore<T>,
    params: &EncoderParams,
    seqs: &[S],
) -> Result<Vec<EncoderOutput<T>>> {
    let mut g = Graph::new(store);
    let packed = params.forward(&mut g, seqs)?;
    (0..seqs.len())
        .map(|i| finite(split_output(&g, &packed, i)))
        .collect()
}

/// Encodes `sentence ⊕ [SEP] ⊕ description` and marks the sentence rows.
pub fn encode_joint<T: Scalar>(
    store: &ParamStore<T>,
    params: &EncoderParams,
    sentence: &[u32],
    description: &[u32],
) -> Result<JointOutput<T>> {
    let seq = params.joint_tokens(sentence, description)?;
    let output = encode(store, params, &seq)?;
    let sentence_mask = (0..seq.len()).map(|i| i < sentence.len()).collect();
    Ok(JointOutput {
        output,
        sentence_mask,
    })
}

fn finite<T: Scalar>(out: EncoderOutput<T>) -> Result<EncoderOutput<T>> {
    if out.cls_vec.iter().all(|x| x.is_finite()) && out.token_vecs.is_finite() {
        Ok(out)
    } else {
        Err(Error::Numeric("encoder produced non-finite activations".into()))
    }
}

/// Drops trailing padding; encodings of the remaining rows are unchanged.
pub fn trim_padding(tokens: &[u32]) -> &[u32] {
    let end = tokens
        .iter()
        .rposition(|&t| t != PAD_ID)
        .map_or(0, |i| i + 1);
    &tokens[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradientTape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(dim: usize, layers: usize) -> (ParamStore<f64>, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            vocab_size: 20,
            dim,
            layers,
            heads: 2,
            ffn_dim: 2 * dim,
            max_len: 16,
        };
        let enc = EncoderParams::new(&mut store, "enc", ParamGroup::Reader, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shape_and_determinism() {
        let (store, enc) = tiny(8, 1);
        let a = encode(&store, &enc, &[5, 6, 7, 8, 9]).unwrap();
        let b = encode(&store, &enc, &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(a.token_vecs.shape(), (5, 8));
        assert_eq!(a.cls_vec.len(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_changes_output() {
        let (store, enc) = tiny(8, 1);
        let a = encode(&store, &enc, &[5, 6, 7]).unwrap();
        let b = encode(&store, &enc, &[6, 5, 7]).unwrap();
        assert_ne!(a.cls_vec, b.cls_vec);
    }

    #[test]
    fn trailing_padding_is_invisible() {
        let (store, enc) = tiny(8, 2);
        let a = encode(&store, &enc, &[5, 6, 7]).unwrap();
        let b = encode(&store, &enc, &[5, 6, 7, PAD_ID, PAD_ID]).unwrap();
        assert_eq!(a.cls_vec, b.cls_vec);
        for r in 0..3 {
            assert_eq!(a.token_vecs.row(r), b.token_vecs.row(r));
        }
        assert_eq!(trim_padding(&[5, 6, PAD_ID, PAD_ID]), &[5, 6]);
        assert_eq!(trim_padding(&[PAD_ID]), &[] as &[u32]);
    }

    #[test]
    fn packed_batch_matches_single() {
        let (store, enc) = tiny(8, 2);
        let seqs = vec![vec![5u32, 6, 7], vec![9, 10], vec![11, 12, 13, 14, PAD_ID]];
        let batch = encode_batch(&store, &enc, &seqs).unwrap();
        for (s, out) in seqs.iter().zip(&batch) {
            let single = encode(&store, &enc, s).unwrap();
            for (x, y) in single.cls_vec.iter().zip(&out.cls_vec) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_errors() {
        let (store, enc) = tiny(8, 1);
        assert!(matches!(encode(&store, &enc, &[]), Err(Error::Input(_))));
        assert!(matches!(encode(&store, &enc, &[25]), Err(Error::Input(_))));
        let long = vec![5u32; 16];
        assert!(matches!(encode(&store, &enc, &long), Err(Error::Input(_))));
        assert!(encode(&store, &enc, &long[..15]).is_ok());
    }

    #[test]
    fn joint_layout_and_mask() {
        let (store, enc) = tiny(8, 1);
        let j = encode_joint(&store, &enc, &[5, 6, 7], &[8, 9, PAD_ID]).unwrap();
        assert_eq!(j.output.token_vecs.rows(), 3 + 1 + 3);
        assert_eq!(j.sentence_mask.iter().filter(|&&m| m).count(), 3);
        assert!(j.sentence_mask[..3].iter().all(|&m| m));
        let again = encode_joint(&store, &enc, &[5, 6, 7], &[8, 9, PAD_ID]).unwrap();
        assert_eq!(j, again);
    }

    #[test]
    fn embedding_gradient_touches_only_input_rows() {
        let (store, enc) = tiny(4, 1);
        let mut tape = GradientTape::new(&store);
        let mut g = Graph::new(&store);
        let packed = enc.forward(&mut g, &[[5u32, 9]]).unwrap();
        let cls = g.row(packed.hidden, packed.cls_row(0));
        // A plain sum is annihilated by the final layer norm (unit gain), so weight it.
        let w = g.constant(Matrix::row_vector(vec![1.0, -2.0, 0.5, 3.0]));
        let weighted = g.matmul_nt(cls, w);
        let loss = g.sum(weighted);
        g.backward(loss, &mut tape).unwrap();
        let grad = tape.get(enc.token_embedding()).unwrap();
        for r in 0..grad.rows() {
            let nonzero = grad.row(r).iter().any(|&v| v != 0.0);
            let expected = r == CLS_ID as usize || r == 5 || r == 9;
            assert_eq!(nonzero, expected, "row {r}");
        }
    }
}
