//! Convolutional baseline codec: a five-layer strided conv encoder and the
//! mirrored transposed-conv decoder, PReLU activations, same power
//! normalization and interfaces as the ViT codec.

use super::{op_power_normalize, Codec, ModelConfig};
use tapegrad::conv::ConvSpec;
use tapegrad::nn::{Conv2d, ConvTranspose2d, PRelu, ParamVars, Params};
use tapegrad::{Graph, Scalar, Var};

const KERNEL: usize = 5;
const PAD: usize = 2;

pub struct DeepJscc {
    config: ModelConfig,
    enc_convs: Vec<Conv2d>,
    enc_acts: Vec<PRelu>,
    dec_convs: Vec<ConvTranspose2d>,
    dec_acts: Vec<PRelu>,
    feature_side: usize,
    feature_channels: usize,
}

impl DeepJscc {
    pub fn new(config: ModelConfig) -> Self {
        let feature_side = config.image_size / 4;
        let feature_channels = 2 * config.symbols() / (feature_side * feature_side);
        let s1 = ConvSpec { kernel: KERNEL, stride: 1, pad: PAD };
        let s2 = ConvSpec { kernel: KERNEL, stride: 2, pad: PAD };

        let enc_channels = [config.channels, 16, 32, 32, 32, feature_channels];
        let enc_strides = [s2, s2, s1, s1, s1];
        let enc_convs: Vec<Conv2d> = (0..5)
            .map(|i| Conv2d::new(format!("enc.conv{i}"), enc_channels[i], enc_channels[i + 1], enc_strides[i]))
            .collect();
        let enc_acts: Vec<PRelu> =
            (0..4).map(|i| PRelu::new(format!("enc.act{i}"), enc_channels[i + 1])).collect();

        let dec_channels = [feature_channels, 32, 32, 32, 16, config.channels];
        let dec_strides = [s1, s1, s1, s2, s2];
        let dec_outpads = [0, 0, 0, 1, 1];
        let dec_convs: Vec<ConvTranspose2d> = (0..5)
            .map(|i| {
                ConvTranspose2d::new(
                    format!("dec.deconv{i}"),
                    dec_channels[i],
                    dec_channels[i + 1],
                    dec_strides[i],
                    dec_outpads[i],
                )
            })
            .collect();
        let dec_acts: Vec<PRelu> =
            (0..4).map(|i| PRelu::new(format!("dec.act{i}"), dec_channels[i + 1])).collect();

        DeepJscc { config, enc_convs, enc_acts, dec_convs, dec_acts, feature_side, feature_channels }
    }
}

impl Codec for DeepJscc {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn init_params<F: Scalar>(&self, seed: u64) -> Params<F> {
        let mut rng = super::init_rng(seed, super::Arch::Deepjscc);
        let mut params = Params::new();
        for (i, conv) in self.enc_convs.iter().enumerate() {
            conv.init(&mut params, &mut rng);
            if i < 4 {
                self.enc_acts[i].init(&mut params, &mut rng);
            }
        }
        for (i, deconv) in self.dec_convs.iter().enumerate() {
            deconv.init(&mut params, &mut rng);
            if i < 4 {
                self.dec_acts[i].init(&mut params, &mut rng);
            }
        }
        params
    }

    fn encode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, images: Var) -> Var {
        let batch = g.shape(images)[0];
        let mut x = images;
        for (i, conv) in self.enc_convs.iter().enumerate() {
            x = conv.forward(g, pv, x);
            if i < 4 {
                x = self.enc_acts[i].forward(g, pv, x);
            }
        }
        let flat = g.reshape(x, &[batch, 2 * self.config.symbols()]);
        op_power_normalize(g, flat)
    }

    fn decode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, symbols: Var) -> Var {
        let batch = g.shape(symbols)[0];
        let mut x = g.reshape(symbols, &[batch, self.feature_channels, self.feature_side, self.feature_side]);
        for (i, deconv) in self.dec_convs.iter().enumerate() {
            x = deconv.forward(g, pv, x);
            if i < 4 {
                x = self.dec_acts[i].forward(g, pv, x);
            }
        }
        g.sigmoid(x)
    }
}
