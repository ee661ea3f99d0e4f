//! Conditional denoiser: a small three-level convolutional encoder-decoder
//! over `[H, W, 3]` images with the prompt embedding and a sinusoidal
//! timestep embedding injected as per-channel biases at every level.
//! The network predicts the clean image (x0-parameterization).

use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::conditioning::{encode_on_tape, EmbeddingTable, Prompt, Vocabulary};
use crate::config::Config;
use crate::diffusion::DiffusionSchedule;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiserLayout {
    enc0a: Conv,
    enc0b: Conv,
    down1: Conv,
    enc1b: Conv,
    down2: Conv,
    enc2b: Conv,
    up1a: Conv,
    up1b: Conv,
    up0a: Conv,
    up0b: Conv,
    out: Conv,
    /// Conditioning injections, one per level block.
    inj: [usize; 5],
    pub table: usize,
}

/// Denoiser parameters plus the vocabulary/embedding wiring.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub params: ParamSet,
    pub vocab: Vocabulary,
    layout: DenoiserLayout,
    pub resolution: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
}

fn conv_param<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
    rng: &mut R,
) -> Conv {
    let fan_in = 9 * cin;
    let std = (2.0 / fan_in as f32).sqrt();
    let w = params.add(format!("{name}.w"), Tensor::randn(&[fan_in, cout], std, rng));
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    Conv { w, b, stride }
}

impl DenoiserModel {
    pub fn init<R: Rng>(config: &Config, rng: &mut R) -> Self {
        let d = &config.diffusion;
        let vocab = Vocabulary::new(&config.world.classes, &config.world.colors, &config.world.contexts);
        let table = EmbeddingTable::init(vocab.clone(), d.embed_dim, rng);
        let b = d.base_channels;
        let z = d.embed_dim + d.time_dim;
        let mut params = ParamSet::new();

        let enc0a = conv_param(&mut params, "enc0a", 3, b, 1, rng);
        let enc0b = conv_param(&mut params, "enc0b", b, b, 1, rng);
        let down1 = conv_param(&mut params, "down1", b, 2 * b, 2, rng);
        let enc1b = conv_param(&mut params, "enc1b", 2 * b, 2 * b, 1, rng);
        let down2 = conv_param(&mut params, "down2", 2 * b, 3 * b, 2, rng);
        let enc2b = conv_param(&mut params, "enc2b", 3 * b, 3 * b, 1, rng);
        let up1a = conv_param(&mut params, "up1a", 3 * b, 2 * b, 1, rng);
        let up1b = conv_param(&mut params, "up1b", 4 * b, 2 * b, 1, rng);
        let up0a = conv_param(&mut params, "up0a", 2 * b, b, 1, rng);
        let up0b = conv_param(&mut params, "up0b", 2 * b, b, 1, rng);
        let out = conv_param(&mut params, "out", b, 3, 1, rng);

        let inj_dims = [b, 2 * b, 3 * b, 2 * b, b];
        let inj = std::array::from_fn(|i| {
            let std = 1.0 / (z as f32).sqrt();
            params.add(format!("inj{i}.w"), Tensor::randn(&[z, inj_dims[i]], std, rng))
        });
        let table_idx = params.add("embed.table", table.vectors);

        DenoiserModel {
            params,
            vocab,
            layout: DenoiserLayout {
                enc0a,
                enc0b,
                down1,
                enc1b,
                down2,
                enc2b,
                up1a,
                up1b,
                up0a,
                up0b,
                out,
                inj,
                table: table_idx,
            },
            resolution: d.resolution,
            embed_dim: d.embed_dim,
            time_dim: d.time_dim,
        }
    }

    pub fn table_index(&self) -> usize {
        self.layout.table
    }

    /// Embedding table snapshot wrapped with the vocabulary.
    pub fn embedding(&self) -> EmbeddingTable {
        EmbeddingTable {
            vocab: self.vocab.clone(),
            vectors: self.params.value(self.layout.table).clone(),
        }
    }

    pub fn encode_prompt(&self, prompt: &Prompt) -> Result<Tensor> {
        self.embedding().encode(prompt)
    }

    /// Sinusoidal embedding of a schedule index.
    pub fn time_embedding(&self, t: usize, schedule: &DiffusionSchedule) -> Tensor {
        let frac = t as f32 / (schedule.t_steps - 1) as f32;
        let half = self.time_dim / 2;
        let mut data = Vec::with_capacity(self.time_dim);
        for k in 0..half {
            let freq = (2.0f32).powi(k as i32) * std::f32::consts::PI;
            data.push((freq * frac).sin());
            data.push((freq * frac).cos());
        }
        Tensor::from_vec(&[self.time_dim], data)
    }

    fn conv(&self, x: &Var, tape: &Tape, conv: &Conv, pad: usize) -> Var {
        let shape = x.shape();
        let (h, w) = (shape[0], shape[1]);
        let cols = x.im2col(3, conv.stride, pad);
        let wv = tape.param(&self.params, conv.w);
        let bv = tape.param(&self.params, conv.b);
        let cout = wv.shape()[1];
        let y = cols.matmul(&wv).add(&bv);
        let (oh, ow) = ((h + 2 * pad - 3) / conv.stride + 1, (w + 2 * pad - 3) / conv.stride + 1);
        y.reshape(&[oh, ow, cout])
    }

    fn inject(&self, x: &Var, tape: &Tape, z: &Var, inj: usize) -> Var {
        let wv = tape.param(&self.params, inj);
        let bias = z.matmul(&wv); // [1, C]
        let c = bias.shape()[1];
        let shape = x.shape();
        let flat = x.reshape(&[shape[0] * shape[1], shape[2]]);
        flat.add(&bias.reshape(&[c])).reshape(&shape)
    }

    /// Full forward pass on a tape. `x_t` is `[H, W, 3]`, `c` a `[1, d]`
    /// conditioning var, `t_emb` the timestep embedding. Hidden activations
    /// are squareplus: smooth everywhere, so parameter gradients stay
    /// finite-difference-checkable through the full depth.
    pub fn forward(&self, tape: &Tape, x_t: &Var, c: &Var, t_emb: &Var) -> Var {
        const B: f32 = 1.0;
        let act = |v: Var| v.squareplus(B);
        let l = &self.layout;
        let z = c.concat(t_emb, 1); // [1, embed+time]

        let e0 = self.conv(x_t, tape, &l.enc0a, 1);
        let e0 = act(self.inject(&e0, tape, &z, l.inj[0]));
        let e0 = act(self.conv(&e0, tape, &l.enc0b, 1));

        let e1 = self.conv(&e0, tape, &l.down1, 1);
        let e1 = act(self.inject(&e1, tape, &z, l.inj[1]));
        let e1 = act(self.conv(&e1, tape, &l.enc1b, 1));

        let e2 = self.conv(&e1, tape, &l.down2, 1);
        let e2 = act(self.inject(&e2, tape, &z, l.inj[2]));
        let e2 = act(self.conv(&e2, tape, &l.enc2b, 1));

        let d1 = act(self.conv(&e2.upsample_nearest(2), tape, &l.up1a, 1));
        let d1 = d1.concat(&e1, 2);
        let d1 = self.conv(&d1, tape, &l.up1b, 1);
        let d1 = act(self.inject(&d1, tape, &z, l.inj[3]));

        let d0 = act(self.conv(&d1.upsample_nearest(2), tape, &l.up0a, 1));
        let d0 = d0.concat(&e0, 2);
        let d0 = self.conv(&d0, tape, &l.up0b, 1);
        let d0 = act(self.inject(&d0, tape, &z, l.inj[4]));

        self.conv(&d0, tape, &l.out, 1)
    }

    /// Conditioning var for a prompt, with gradients flowing into the
    /// touched embedding rows.
    pub fn prompt_var(&self, tape: &Tape, prompt: &Prompt) -> Result<Var> {
        let table = tape.param(&self.params, self.layout.table);
        encode_on_tape(tape, &table, &self.vocab, prompt)
    }

    /// Inference-only x0 prediction from raw conditioning values.
    pub fn denoise(&self, x_t: &Tensor, t: usize, c: &Tensor, schedule: &DiffusionSchedule) -> Tensor {
        let tape = Tape::new();
        let x = tape.constant(x_t);
        let cv = tape.constant_from(&[1, c.numel()], c.data().to_vec());
        let te = self.time_embedding(t, schedule);
        let tv = tape.constant_from(&[1, te.numel()], te.into_data());
        self.forward(&tape, &x, &cv, &tv).value()
    }
}

/// x0-predicting denoiser interface; lets tests inject analytic oracles in
/// place of the trained network.
pub trait Denoise {
    fn resolution(&self) -> usize;
    /// Predicts the clean image from `x_t` at schedule index `t` under
    /// conditioning `c`.
    fn denoise(&self, x_t: &Tensor, t: usize, c: &Tensor, schedule: &DiffusionSchedule) -> Tensor;
}

impl Denoise for DenoiserModel {
    fn resolution(&self) -> usize {
        self.resolution
    }
    fn denoise(&self, x_t: &Tensor, t: usize, c: &Tensor, schedule: &DiffusionSchedule) -> Tensor {
        DenoiserModel::denoise(self, x_t, t, c, schedule)
    }
}
