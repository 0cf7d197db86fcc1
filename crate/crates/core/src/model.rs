//! The full encoder-decoder: parameters, forward passes, and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{encode, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::layers::{AttnBias, Dropout, FeedForward, LayerNorm, MultiHeadAttention, INIT_SCALE};
use crate::pipeline::{prepare_graph, PreparedGraph};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"MGSACKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Shared by both encoder streams, the decoder input, and the output
    /// projection.
    pub tok_emb: ParamId,
    pub out_bias: ParamId,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.encoder.d_model;
        let tok_emb = store.add_uniform("tok_emb", vocab.len(), d, INIT_SCALE, &mut rng);
        let out_bias = store.add("out_bias", Tensor::zeros(1, vocab.len()));
        let encoder = EncoderParams::new(&mut store, &config.encoder, &mut rng);
        let dc = &config.decoder;
        let pos = store.add_uniform("dec.pos", dc.max_gen_len, d, INIT_SCALE, &mut rng);
        let layers = (0..dc.n_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, dc.n_heads, &mut rng),
                    norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(&mut store, &format!("{p}.cross_attn"), d, dc.n_heads, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
                    ff: FeedForward::new(&mut store, &format!("{p}.ff"), d, &mut rng),
                    norm3: LayerNorm::new(&mut store, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        Ok(Model {
            config,
            vocab,
            store,
            params: ModelParams {
                tok_emb,
                out_bias,
                encoder,
                decoder: DecoderParams { pos, layers },
            },
        })
    }

    pub fn prepare(&self, g: &KnowledgeGraph) -> Result<PreparedGraph> {
        prepare_graph(g, &self.vocab, &self.config)
    }

    pub fn encode(&self, t: &mut Tape, prep: &PreparedGraph, drop: &mut Dropout) -> Result<EncoderOutput> {
        encode(t, &self.params.encoder, self.params.tok_emb, prep, &self.config.encoder, drop)
    }

    /// Teacher-forced decoder pass: `k × |V|` logits for the `k` input ids.
    pub fn decode_logits(&self, t: &mut Tape, memory: Var, input: &[u32], drop: &mut Dropout) -> Result<Var> {
        let k = input.len();
        let max = self.config.decoder.max_gen_len;
        if k == 0 || k > max {
            return Err(Error::Config(format!("decoder input length {k} outside 1..={max}")));
        }
        let p = &self.params;
        let table = t.param(p.tok_emb);
        let e = t.embedding(table, input)?;
        let pos_table = t.param(p.decoder.pos);
        let positions: Vec<u32> = (0..k as u32).collect();
        let pe = t.embedding(pos_table, &positions)?;
        let x = t.add(e, pe)?;
        let mut x = drop.apply(t, x)?;
        let causal = t.constant(causal_mask(k));
        let self_bias = AttnBias {
            shared: Some(causal),
            per_head: Vec::new(),
        };
        for layer in &p.decoder.layers {
            let (s, _) = layer.self_attn.forward(t, x, x, &self_bias)?;
            let s = drop.apply(t, s)?;
            let h = t.add(x, s)?;
            let h = layer.norm1.forward(t, h)?;
            let (c, _) = layer.cross_attn.forward(t, h, memory, &AttnBias::default())?;
            let c = drop.apply(t, c)?;
            let h2 = t.add(h, c)?;
            let h2 = layer.norm2.forward(t, h2)?;
            let f = layer.ff.forward(t, h2)?;
            let f = drop.apply(t, f)?;
            let h3 = t.add(h2, f)?;
            x = layer.norm3.forward(t, h3)?;
        }
        let logits = t.matmul_t(x, table)?;
        let bias = t.param(p.out_bias);
        t.add_row(logits, bias)
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            format: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self
                .store
                .ids()
                .map(|id| {
                    let v = self.store.value(id);
                    ParamEntry {
                        name: self.store.name(id).to_string(),
                        rows: v.rows(),
                        cols: v.cols(),
                    }
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.store.num_scalars());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.store.values() {
            for x in v.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let body = buf.get(16..).ok_or_else(|| bad("truncated header"))?;
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {}", header.format)));
        }
        // rebuild the layout from the config, then overwrite every value
        let mut model = Model::new(header.config, header.vocab, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        if ids.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                ids.len(),
                header.params.len()
            )));
        }
        let mut payload = &body[hlen..];
        for (id, entry) in ids.into_iter().zip(&header.params) {
            let name = model.store.name(id).to_string();
            let v = model.store.value_mut(id);
            if entry.name != name || (entry.rows, entry.cols) != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} ({}×{}) does not match layout {name} {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    v.shape()
                )));
            }
            let n = v.len() * 8;
            if payload.len() < n {
                return Err(bad("truncated payload"));
            }
            for (x, b) in v.data_mut().iter_mut().zip(payload[..n].chunks_exact(8)) {
                *x = f64::from_le_bytes(b.try_into().unwrap());
            }
            payload = &payload[n..];
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// `0` on and below the diagonal, `-inf` above.
pub fn causal_mask(k: usize) -> Tensor {
    let mut m = Tensor::zeros(k, k);
    for i in 0..k {
        for j in i + 1..k {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::kg::Triple;

    fn tiny() -> Model {
        Model::new(Profile::Desk.model(), Vocab::from_words(["a", "b", "r"]), 3).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, b) = (tiny(), tiny());
        assert_eq!(a.store.values(), b.store.values());
        let c = Model::new(Profile::Desk.model(), Vocab::from_words(["a", "b", "r"]), 4).unwrap();
        assert_ne!(a.store.values(), c.store.values());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab, m.vocab);
        for (x, y) in back.store.values().iter().zip(m.store.values()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Model::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
    }

    #[test]
    fn logits_at_i_ignore_later_inputs() {
        let m = tiny();
        let g = KnowledgeGraph::new(vec![Triple::new("a", "r", "b")]).unwrap();
        let prep = m.prepare(&g).unwrap();
        let run = |input: &[u32]| {
            let mut t = Tape::new(&m.store);
            let enc = m.encode(&mut t, &prep, &mut Dropout::disabled()).unwrap();
            let l = m.decode_logits(&mut t, enc.output, input, &mut Dropout::disabled()).unwrap();
            t.value(l).clone()
        };
        let a = run(&[4, 8, 9, 10]);
        let b = run(&[4, 8, 10, 8]);
        assert_eq!(a.shape(), (4, m.vocab.len()));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn decoder_input_longer_than_positions_is_an_error() {
        let m = tiny();
        let mut t = Tape::new(&m.store);
        let mem = t.constant(Tensor::zeros(3, 32));
        let long = vec![4u32; 129];
        assert!(m.decode_logits(&mut t, mem, &long, &mut Dropout::disabled()).is_err());
    }
}
