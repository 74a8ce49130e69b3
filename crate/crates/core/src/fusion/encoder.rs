//! Pre-layernorm transformer encoder over batches of token grids.

use rand_chacha::ChaCha8Rng;

use super::{FusionError, Result};
use crate::layers::{Binder, LayerNorm, Linear, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Encoder dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    shape: EncoderShape,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: EncoderShape) -> Result<Self> {
        let EncoderShape { d_model: d, heads, layers, ffn } = shape;
        if heads == 0 || d % heads != 0 {
            return Err(FusionError::Config(format!("{heads} heads do not divide width {d}")));
        }
        let blocks = (0..layers)
            .map(|l| {
                let n = format!("{name}.l{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    wq: Linear::new(store, rng, &format!("{n}.attn.q"), d, d),
                    wk: Linear::without_bias(store, rng, &format!("{n}.attn.k"), d, d),
                    wv: Linear::new(store, rng, &format!("{n}.attn.v"), d, d),
                    wo: Linear::new(store, rng, &format!("{n}.attn.o"), d, d),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    ff1: Linear::new(store, rng, &format!("{n}.ffn.1"), d, ffn),
                    ff2: Linear::new(store, rng, &format!("{n}.ffn.2"), ffn, d),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.ln_out"), d);
        Ok(Self { shape, blocks, final_ln })
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    /// Encodes `[batch * grid^2, d]` tokens. The positional encoding is added
    /// once before the first block. Returns the output and, per block, the
    /// self-attention node (for inspecting its weights).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        tokens: Var,
        batch: usize,
        grid: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.shape.d_model;
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != d || s[0] != batch * grid * grid {
            return Err(FusionError::Shape(format!(
                "encoder expects [{} x {d}] tokens, got {s:?}",
                batch * grid * grid
            )));
        }
        let pe = positional_encoding(grid, d);
        let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::new(vec![batch * grid * grid, d], tiled)?);
        let mut x = g.add(tokens, pe)?;
        let scale = 1.0 / ((d / self.shape.heads) as f64).sqrt();
        let mut attn_nodes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let q = b.wq.forward(g, p, h)?;
            let k = b.wk.forward(g, p, h)?;
            let v = b.wv.forward(g, p, h)?;
            let a = g.attention(q, k, v, batch, self.shape.heads, scale)?;
            attn_nodes.push(a);
            let o = b.wo.forward(g, p, a)?;
            x = g.add(x, o)?;
            let h = b.ln2.forward(g, p, x)?;
            let f = b.ff1.forward(g, p, h)?;
            let f = g.gelu(f);
            let f = b.ff2.forward(g, p, f)?;
            x = g.add(x, f)?;
        }
        Ok((self.final_ln.forward(g, p, x)?, attn_nodes))
    }
}

/// Fixed 2-D sinusoidal encoding `[grid^2, d]`: the first half of the
/// channels encodes the row, the second half the column, each as
/// interleaved `sin, cos` pairs over geometric frequencies.
pub fn positional_encoding(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; grid * grid * d];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut data[(r * grid + c) * d..(r * grid + c + 1) * d];
            for (offset, pos) in [(0, r), (half, c)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[offset + 2 * i] = (pos as f64 * freq).sin();
                    row[offset + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, d], data).expect("non-empty")
}
