//! Vision-transformer codec: patch embedding + learned positional embedding,
//! 4 pre-norm transformer encoder layers, and a per-token linear head on the
//! encoder side; a per-token linear embed, 2 transformer layers, and a linear
//! projection to patch pixels with a sigmoid on the decoder side.

use super::{op_power_normalize, Codec, ModelConfig};
use tapegrad::nn::{LayerNorm, Linear, ParamVars, Params, PosEmbedding, TransformerBlock};
use tapegrad::{Graph, Scalar, Var};

pub struct Vitsc {
    config: ModelConfig,
    patch_embed: Linear,
    pos: PosEmbedding,
    enc_blocks: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    enc_head: Linear,
    dec_embed: Linear,
    dec_blocks: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    dec_head: Linear,
}

impl Vitsc {
    pub fn new(config: ModelConfig) -> Self {
        let tokens = config.tokens();
        let patch_dim = config.channels * config.patch_size * config.patch_size;
        let dim = config.embed_dim;
        let per_token = 2 * config.symbols() / tokens;

        let enc_blocks = (0..config.enc_layers)
            .map(|i| TransformerBlock::new(&format!("enc.blk{i}"), dim, config.num_heads, config.mlp_ratio))
            .collect();
        let dec_blocks = (0..config.dec_layers)
            .map(|i| TransformerBlock::new(&format!("dec.blk{i}"), dim, config.num_heads, config.mlp_ratio))
            .collect();

        Vitsc {
            patch_embed: Linear::new("enc.patch", patch_dim, dim),
            pos: PosEmbedding::new("enc.pos", tokens, dim),
            enc_blocks,
            enc_norm: LayerNorm::new("enc.norm", dim),
            enc_head: Linear::new("enc.head", dim, per_token),
            dec_embed: Linear::new("dec.embed", per_token, dim),
            dec_blocks,
            dec_norm: LayerNorm::new("dec.norm", dim),
            dec_head: Linear::new("dec.head", dim, patch_dim),
            config,
        }
    }
}

impl Codec for Vitsc {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn init_params<F: Scalar>(&self, seed: u64) -> Params<F> {
        let mut rng = super::init_rng(seed, super::Arch::Vitsc);
        let mut params = Params::new();
        self.patch_embed.init(&mut params, &mut rng);
        self.pos.init(&mut params, &mut rng);
        for blk in &self.enc_blocks {
            blk.init(&mut params, &mut rng);
        }
        self.enc_norm.init(&mut params, &mut rng);
        self.enc_head.init(&mut params, &mut rng);
        self.dec_embed.init(&mut params, &mut rng);
        for blk in &self.dec_blocks {
            blk.init(&mut params, &mut rng);
        }
        self.dec_norm.init(&mut params, &mut rng);
        self.dec_head.init(&mut params, &mut rng);
        params
    }

    fn encode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, images: Var) -> Var {
        let batch = g.shape(images)[0];
        let tokens = g.patchify(images, self.config.patch_size);
        let mut x = self.patch_embed.forward(g, pv, tokens);
        x = self.pos.forward(g, pv, x);
        for blk in &self.enc_blocks {
            x = blk.forward(g, pv, x);
        }
        x = self.enc_norm.forward(g, pv, x);
        let head = self.enc_head.forward(g, pv, x);
        let flat = g.reshape(head, &[batch, 2 * self.config.symbols()]);
        op_power_normalize(g, flat)
    }

    fn decode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, symbols: Var) -> Var {
        let batch = g.shape(symbols)[0];
        let tokens = self.config.tokens();
        let per_token = 2 * self.config.symbols() / tokens;
        let x = g.reshape(symbols, &[batch, tokens, per_token]);
        let mut x = self.dec_embed.forward(g, pv, x);
        for blk in &self.dec_blocks {
            x = blk.forward(g, pv, x);
        }
        x = self.dec_norm.forward(g, pv, x);
        let pixels = self.dec_head.forward(g, pv, x);
        let bounded = g.sigmoid(pixels);
        g.unpatchify(
            bounded,
            self.config.patch_size,
            self.config.channels,
            self.config.image_size,
            self.config.image_size,
        )
    }
}
