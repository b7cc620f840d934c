use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DaclError, Result};
use crate::tensor::{Grid, Tape, Tensor, Var};

use super::TrainConfig;

/// Layer widths of a [`SegModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub c1: usize,
    pub c2: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            in_channels: 1,
            c1: cfg.enc_channels1,
            c2: cfg.enc_channels2,
            proj_hidden: cfg.proj_hidden,
            proj_dim: cfg.proj_dim,
            num_classes: cfg.num_classes,
        }
    }

    /// `(name, shape, fan_in)` of every parameter in declaration order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (ci, c1, c2, h, d, n) =
            (self.in_channels, self.c1, self.c2, self.proj_hidden, self.proj_dim, self.num_classes);
        vec![
            ("enc1.w", vec![9 * ci, c1], 9 * ci),
            ("enc1.b", vec![c1], 0),
            ("enc2.w", vec![9 * c1, c2], 9 * c1),
            ("enc2.b", vec![c2], 0),
            ("dec.w", vec![c2, n], c2 + c1),
            ("dec.skip", vec![c1, n], c2 + c1),
            ("dec.b", vec![n], 0),
            ("proj1.w", vec![c2, h], c2),
            ("proj1.b", vec![h], 0),
            ("proj2.w", vec![h, d], h),
            ("proj2.b", vec![d], 0),
        ]
    }
}

/// Two-layer convolutional encoder, a 1x1 decoder with a full-resolution
/// skip path, and a two-layer projection head.
///
/// The encoder runs a 3x3 convolution at full resolution, 2x2 average
/// pooling, and a second 3x3 convolution. The decoder upsamples the
/// low-resolution class scores and adds a 1x1 projection of the first-layer
/// features. The projection head runs at low resolution.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub spec: ModelSpec,
    pub init_seed: u64,
    pub params: Vec<Tensor>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[batch*h*w, num_classes]`.
    pub logits: Var,
    /// `[batch*(h/2)*(w/2), proj_dim]`, not normalized; each row covers a
    /// 2x2 block of input pixels. `None` unless requested.
    pub projection: Option<Var>,
    pub params: Vec<Var>,
}

impl SegModel {
    /// He-normal weights and zero biases drawn from `init_seed`.
    pub fn new(spec: ModelSpec, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let params = spec
            .layout()
            .into_iter()
            .map(|(_, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).expect("layout shape").with_requires_grad(true)
            })
            .collect();
        Self { spec, init_seed, params }
    }

    /// Replaces the parameters, checking every shape against the layout.
    pub fn load_params(&mut self, buffers: Vec<Vec<f64>>) -> Result<()> {
        let layout = self.spec.layout();
        if buffers.len() != layout.len() {
            return Err(DaclError::Format(format!("{} parameter buffers, expected {}", buffers.len(), layout.len())));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape, _), data) in layout.into_iter().zip(buffers) {
            let n: usize = shape.iter().product();
            if data.len() != n {
                return Err(DaclError::Format(format!("{name}: {} values, expected {n}", data.len())));
            }
            params.push(Tensor::new(shape, data)?.with_requires_grad(true));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records a forward pass of `images` (`[batch*h*w, 1]`).
    ///
    /// With `trainable` false the parameters enter as constants. The
    /// projection head only runs when `project` is set. A `dropout` of
    /// `(rate, rng)` zeroes decoder inputs at random.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        images: Var,
        batch: usize,
        height: usize,
        width: usize,
        trainable: bool,
        project: bool,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<ModelOutput> {
        let s = self.spec;
        if height % 2 != 0 || width % 2 != 0 {
            return Err(DaclError::shape("SegModel::forward", format!("{height}x{width} is not even")));
        }
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| if trainable { tape.leaf(t) } else { tape.constant(t.clone()) })
            .collect();
        let full = |channels| Grid { batch, height, width, channels };
        let half = |channels| Grid { batch, height: height / 2, width: width / 2, channels };

        let cols = tape.im2col3x3(images, full(s.in_channels))?;
        let h1 = tape.matmul(cols, p[0])?;
        let h1 = tape.add_bias(h1, p[1])?;
        let h1 = tape.relu(h1);

        let pooled = tape.avg_pool2(h1, full(s.c1))?;
        let cols = tape.im2col3x3(pooled, half(s.c1))?;
        let f = tape.matmul(cols, p[2])?;
        let f = tape.add_bias(f, p[3])?;
        let f = tape.relu(f);

        let dec_in = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let n = tape.value(f).len();
                let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
                let m = tape.constant(Tensor::new(tape.value(f).shape().to_vec(), mask)?);
                tape.mul(f, m)?
            }
            _ => f,
        };
        let low = tape.matmul(dec_in, p[4])?;
        let up = tape.upsample2(low, half(s.num_classes))?;
        let skip = tape.matmul(h1, p[5])?;
        let logits = tape.add(up, skip)?;
        let logits = tape.add_bias(logits, p[6])?;

        let projection = if project {
            let z = tape.matmul(f, p[7])?;
            let z = tape.add_bias(z, p[8])?;
            let z = tape.relu(z);
            let z = tape.matmul(z, p[9])?;
            Some(tape.add_bias(z, p[10])?)
        } else {
            None
        };

        Ok(ModelOutput { logits, projection, params: p })
    }
}
