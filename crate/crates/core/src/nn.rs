//! The SNR classifier and its hand-derived gradients.
//!
//! Fixed graph: conv(1→32, 3×3, valid) → ReLU → flatten → linear(21632→128)
//! → ReLU → linear(128→5) → softmax, all in f64. The two linear layers run on
//! [`tensor::gemm`]; the convolution is written out directly and checked
//! against a naive quadruple-loop reference in tests. Adam is the standard
//! bias-corrected recurrence.
//!
//! Parallel sections only ever write disjoint output slices, so training is
//! bit-reproducible for a fixed seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const MAP_SIZE: usize = crate::dataset::MAP_SIZE; // 28
pub const CONV_CHANNELS: usize = 32;
pub const KERNEL: usize = 3;
pub const CONV_DIM: usize = MAP_SIZE - KERNEL + 1; // 26, valid convolution
pub const FC1_IN: usize = CONV_CHANNELS * CONV_DIM * CONV_DIM; // 21632
pub const FC1_OUT: usize = 128;
pub const NUM_CLASSES: usize = crate::dataset::CLASS_COUNT; // 5

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-sample probability floor inside the cross-entropy log.
pub const LOG_CLAMP: f64 = 1e-12;

const CHECKPOINT_MAGIC: [u8; 4] = *b"MULC";
const CHECKPOINT_VERSION: u16 = 1;

/// All trainable weights of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub conv_w: Tensor, // [32, 1, 3, 3]
    pub conv_b: Tensor, // [32]
    pub fc1_w: Tensor,  // [128, 21632]
    pub fc1_b: Tensor,  // [128]
    pub fc2_w: Tensor,  // [5, 128]
    pub fc2_b: Tensor,  // [5]
}

/// Gradients share the parameter layout.
pub type Gradients = CnnParams;

impl CnnParams {
    pub fn zeros() -> Self {
        Self {
            conv_w: Tensor::zeros(&[CONV_CHANNELS, 1, KERNEL, KERNEL]),
            conv_b: Tensor::zeros(&[CONV_CHANNELS]),
            fc1_w: Tensor::zeros(&[FC1_OUT, FC1_IN]),
            fc1_b: Tensor::zeros(&[FC1_OUT]),
            fc2_w: Tensor::zeros(&[NUM_CLASSES, FC1_OUT]),
            fc2_b: Tensor::zeros(&[NUM_CLASSES]),
        }
    }

    /// Seeded uniform init in ±1/√fan_in per layer, weights and biases alike.
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros();
        let fan_conv = (KERNEL * KERNEL) as f64;
        let fan_fc1 = FC1_IN as f64;
        let fan_fc2 = FC1_OUT as f64;
        for (t, fan) in [
            (&mut p.conv_w, fan_conv),
            (&mut p.conv_b, fan_conv),
            (&mut p.fc1_w, fan_fc1),
            (&mut p.fc1_b, fan_fc1),
            (&mut p.fc2_w, fan_fc2),
            (&mut p.fc2_b, fan_fc2),
        ] {
            let bound = 1.0 / fan.sqrt();
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn blocks(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("conv_w", &mut self.conv_w),
            ("conv_b", &mut self.conv_b),
            ("fc1_w", &mut self.fc1_w),
            ("fc1_b", &mut self.fc1_b),
            ("fc2_w", &mut self.fc2_w),
            ("fc2_b", &mut self.fc2_b),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, t)| t.all_finite())
    }
}

/// Adam moment estimates, mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: CnnParams,
    pub v: CnnParams,
    pub step_count: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            m: CnnParams::zeros(),
            v: CnnParams::zeros(),
            step_count: 0,
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    pub input: Tensor,    // [B, 784]
    pub conv_pre: Tensor, // [B, 21632], pre-ReLU conv output in flattened layout
    pub flat: Tensor,     // [B, 21632], ReLU(conv_pre)
    pub fc1_pre: Tensor,  // [B, 128]
    pub hidden: Tensor,   // [B, 128], ReLU(fc1_pre)
    pub logits: Tensor,   // [B, 5]
    pub probs: Tensor,    // [B, 5]
}

/// Valid 3×3 convolution, 1 input channel → 32 output channels.
///
/// `out[b,o,i,j] = conv_b[o] + Σ_{u,v} conv_w[o,0,u,v] · input[b,0,i+u,j+v]`
pub fn conv2d_forward(input: &Tensor, conv_w: &Tensor, conv_b: &Tensor) -> Result<Tensor> {
    let batch = check_batch_input(input)?;
    if conv_w.shape != [CONV_CHANNELS, 1, KERNEL, KERNEL] || conv_b.shape != [CONV_CHANNELS] {
        return Err(Error::ShapeMismatch {
            context: "conv2d_forward",
            expected: "conv_w [32,1,3,3], conv_b [32]".into(),
            found: format!("{:?}, {:?}", conv_w.shape, conv_b.shape),
        });
    }
    let mut out = Tensor::zeros(&[batch, CONV_CHANNELS, CONV_DIM, CONV_DIM]);
    out.data
        .par_chunks_mut(CONV_CHANNELS * CONV_DIM * CONV_DIM)
        .zip(input.data.par_chunks(MAP_SIZE * MAP_SIZE))
        .for_each(|(out_sample, in_sample)| {
            conv_single(in_sample, &conv_w.data, &conv_b.data, out_sample);
        });
    Ok(out)
}

fn conv_single(input: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    for o in 0..CONV_CHANNELS {
        let plane = &mut out[o * CONV_DIM * CONV_DIM..(o + 1) * CONV_DIM * CONV_DIM];
        plane.fill(b[o]);
        for u in 0..KERNEL {
            for v in 0..KERNEL {
                let wv = w[o * KERNEL * KERNEL + u * KERNEL + v];
                for i in 0..CONV_DIM {
                    let src = &input[(i + u) * MAP_SIZE + v..(i + u) * MAP_SIZE + v + CONV_DIM];
                    let dst = &mut plane[i * CONV_DIM..(i + 1) * CONV_DIM];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

fn check_batch_input(input: &Tensor) -> Result<usize> {
    let ok = match input.shape.as_slice() {
        [b, 1, h, w] if *h == MAP_SIZE && *w == MAP_SIZE => Some(*b),
        [b, n] if *n == MAP_SIZE * MAP_SIZE => Some(*b),
        _ => None,
    };
    ok.ok_or_else(|| Error::ShapeMismatch {
        context: "forward input",
        expected: format!("[B,1,{MAP_SIZE},{MAP_SIZE}]"),
        found: format!("{:?}", input.shape),
    })
}

fn relu_into(src: &[f64], dst: &mut [f64]) {
    dst.par_chunks_mut(1 << 14)
        .zip(src.par_chunks(1 << 14))
        .for_each(|(d, s)| {
            for (x, y) in d.iter_mut().zip(s.iter()) {
                *x = y.max(0.0);
            }
        });
}

fn add_bias_rows(data: &mut [f64], bias: &[f64]) {
    for row in data.chunks_mut(bias.len()) {
        for (x, b) in row.iter_mut().zip(bias.iter()) {
            *x += b;
        }
    }
}

fn ensure_finite(name: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault { layer: name })
    }
}

/// Full forward pass; softmax uses max-subtraction so probabilities are
/// well-defined for any finite logits.
pub fn forward(params: &CnnParams, batch: &Tensor) -> Result<ForwardPass> {
    let b = check_batch_input(batch)?;
    let conv_out = conv2d_forward(batch, &params.conv_w, &params.conv_b)?;
    ensure_finite("conv", &conv_out.data)?;
    let conv_pre = Tensor::from_vec(&[b, FC1_IN], conv_out.data);

    let mut flat = Tensor::zeros(&[b, FC1_IN]);
    relu_into(&conv_pre.data, &mut flat.data);

    let mut fc1_pre = Tensor::zeros(&[b, FC1_OUT]);
    gemm(
        b,
        FC1_IN,
        FC1_OUT,
        1.0,
        &flat.data,
        false,
        &params.fc1_w.data,
        true,
        0.0,
        &mut fc1_pre.data,
    );
    add_bias_rows(&mut fc1_pre.data, &params.fc1_b.data);
    ensure_finite("fc1", &fc1_pre.data)?;

    let mut hidden = Tensor::zeros(&[b, FC1_OUT]);
    relu_into(&fc1_pre.data, &mut hidden.data);

    let mut logits = Tensor::zeros(&[b, NUM_CLASSES]);
    gemm(
        b,
        FC1_OUT,
        NUM_CLASSES,
        1.0,
        &hidden.data,
        false,
        &params.fc2_w.data,
        true,
        0.0,
        &mut logits.data,
    );
    add_bias_rows(&mut logits.data, &params.fc2_b.data);
    ensure_finite("fc2", &logits.data)?;

    let mut probs = Tensor::zeros(&[b, NUM_CLASSES]);
    for (p_row, l_row) in probs
        .data
        .chunks_mut(NUM_CLASSES)
        .zip(logits.data.chunks(NUM_CLASSES))
    {
        let max = l_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &l) in p_row.iter_mut().zip(l_row.iter()) {
            *p = (l - max).exp();
            sum += *p;
        }
        for p in p_row.iter_mut() {
            *p /= sum;
        }
    }

    Ok(ForwardPass {
        batch: b,
        input: Tensor::from_vec(&[b, MAP_SIZE * MAP_SIZE], batch.data.clone()),
        conv_pre,
        flat,
        fc1_pre,
        hidden,
        logits,
        probs,
    })
}

/// Mean and per-sample cross-entropy of softmax probabilities against labels.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let b = probs.shape[0];
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            expected: format!("{b} labels"),
            found: format!("{}", labels.len()),
        });
    }
    let mut per_sample = Vec::with_capacity(b);
    for (row, &label) in probs.data.chunks(NUM_CLASSES).zip(labels.iter()) {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: NUM_CLASSES,
            });
        }
        per_sample.push(-(row[label].max(LOG_CLAMP)).ln());
    }
    let mean = per_sample.iter().sum::<f64>() / b as f64;
    Ok((mean, per_sample))
}

/// Analytic gradients of the mean cross-entropy w.r.t. every parameter.
pub fn backward(params: &CnnParams, cache: &ForwardPass, labels: &[usize]) -> Result<Gradients> {
    let b = cache.batch;
    if labels.len() != b
        || cache.probs.shape != [b, NUM_CLASSES]
        || cache.flat.shape != [b, FC1_IN]
        || cache.input.shape != [b, MAP_SIZE * MAP_SIZE]
    {
        return Err(Error::ShapeMismatch {
            context: "backward cache",
            expected: format!("cache for batch of {}", labels.len()),
            found: format!("batch {b}"),
        });
    }
    let mut grads = Gradients::zeros();

    // d(mean CE)/d(logits) = (probs - onehot) / B
    let mut dlogits = cache.probs.data.clone();
    for (row, &label) in dlogits.chunks_mut(NUM_CLASSES).zip(labels.iter()) {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: NUM_CLASSES,
            });
        }
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= b as f64;
        }
    }

    gemm(
        NUM_CLASSES,
        b,
        FC1_OUT,
        1.0,
        &dlogits,
        true,
        &cache.hidden.data,
        false,
        0.0,
        &mut grads.fc2_w.data,
    );
    for row in dlogits.chunks(NUM_CLASSES) {
        for (g, &d) in grads.fc2_b.data.iter_mut().zip(row.iter()) {
            *g += d;
        }
    }

    let mut dhidden = vec![0.0; b * FC1_OUT];
    gemm(
        b,
        NUM_CLASSES,
        FC1_OUT,
        1.0,
        &dlogits,
        false,
        &params.fc2_w.data,
        false,
        0.0,
        &mut dhidden,
    );
    for (d, &pre) in dhidden.iter_mut().zip(cache.fc1_pre.data.iter()) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }

    gemm(
        FC1_OUT,
        b,
        FC1_IN,
        1.0,
        &dhidden,
        true,
        &cache.flat.data,
        false,
        0.0,
        &mut grads.fc1_w.data,
    );
    for row in dhidden.chunks(FC1_OUT) {
        for (g, &d) in grads.fc1_b.data.iter_mut().zip(row.iter()) {
            *g += d;
        }
    }

    let mut dflat = vec![0.0; b * FC1_IN];
    gemm(
        b,
        FC1_OUT,
        FC1_IN,
        1.0,
        &dhidden,
        false,
        &params.fc1_w.data,
        false,
        0.0,
        &mut dflat,
    );
    dflat
        .par_chunks_mut(1 << 14)
        .zip(cache.conv_pre.data.par_chunks(1 << 14))
        .for_each(|(d_chunk, pre_chunk)| {
            for (d, &pre) in d_chunk.iter_mut().zip(pre_chunk.iter()) {
                if pre <= 0.0 {
                    *d = 0.0;
                }
            }
        });

    // Convolution gradients, parallel over output channels (disjoint writes).
    let plane = CONV_DIM * CONV_DIM;
    let conv_w_grads: Vec<Vec<f64>> = (0..CONV_CHANNELS)
        .into_par_iter()
        .map(|o| {
            let mut g = vec![0.0; KERNEL * KERNEL + 1]; // 9 weights + bias
            for s in 0..b {
                let d_plane = &dflat[s * FC1_IN + o * plane..s * FC1_IN + (o + 1) * plane];
                let input = &cache.input.data[s * MAP_SIZE * MAP_SIZE..(s + 1) * MAP_SIZE * MAP_SIZE];
                for u in 0..KERNEL {
                    for v in 0..KERNEL {
                        let mut acc = 0.0;
                        for i in 0..CONV_DIM {
                            let src = &input[(i + u) * MAP_SIZE + v..(i + u) * MAP_SIZE + v + CONV_DIM];
                            let d_row = &d_plane[i * CONV_DIM..(i + 1) * CONV_DIM];
                            for (x, y) in src.iter().zip(d_row.iter()) {
                                acc += x * y;
                            }
                        }
                        g[u * KERNEL + v] += acc;
                    }
                }
                g[KERNEL * KERNEL] += d_plane.iter().sum::<f64>();
            }
            g
        })
        .collect();
    for (o, g) in conv_w_grads.iter().enumerate() {
        grads.conv_w.data[o * KERNEL * KERNEL..(o + 1) * KERNEL * KERNEL]
            .copy_from_slice(&g[..KERNEL * KERNEL]);
        grads.conv_b.data[o] = g[KERNEL * KERNEL];
    }

    Ok(grads)
}

/// One bias-corrected Adam update; increments the step counter.
pub fn adam_step(params: &mut CnnParams, grads: &Gradients, state: &mut AdamState, lr: f64) {
    assert!(lr > 0.0, "learning rate must be positive");
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    let p_blocks = params.blocks_mut();
    let g_blocks = grads.blocks();
    let m_blocks = state.m.blocks_mut();
    let v_blocks = state.v.blocks_mut();
    for (((p, g), m), v) in p_blocks
        .into_iter()
        .zip(g_blocks)
        .zip(m_blocks)
        .zip(v_blocks)
    {
        let (p, g, m, v) = (p.1, g.1, m.1, v.1);
        p.data
            .par_chunks_mut(1 << 14)
            .zip(g.data.par_chunks(1 << 14))
            .zip(m.data.par_chunks_mut(1 << 14))
            .zip(v.data.par_chunks_mut(1 << 14))
            .for_each(|(((pc, gc), mc), vc)| {
                for i in 0..pc.len() {
                    let grad = gc[i];
                    mc[i] = ADAM_BETA1 * mc[i] + (1.0 - ADAM_BETA1) * grad;
                    vc[i] = ADAM_BETA2 * vc[i] + (1.0 - ADAM_BETA2) * grad * grad;
                    let m_hat = mc[i] / bc1;
                    let v_hat = vc[i] / bc2;
                    pc[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            });
    }
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_u8(t.shape.len() as u8)?;
    for &d in &t.shape {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in &t.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = r.read_u8().map_err(|_| Error::Truncated("tensor rank"))?;
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated("tensor shape"))? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    for v in data.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated("tensor payload"))?;
    }
    Ok(Tensor { shape, data })
}

fn write_params(w: &mut impl Write, p: &CnnParams) -> Result<()> {
    for (_, t) in p.blocks() {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_params(r: &mut impl Read) -> Result<CnnParams> {
    let expect = CnnParams::zeros();
    let mut out = CnnParams::zeros();
    for ((name, want), (_, slot)) in expect.blocks().iter().zip(out.blocks_mut()) {
        let t = read_tensor(r)?;
        if t.shape != want.shape {
            return Err(Error::ShapeMismatch {
                context: "checkpoint tensor",
                expected: format!("{name} {:?}", want.shape),
                found: format!("{:?}", t.shape),
            });
        }
        *slot = t;
    }
    Ok(out)
}

/// Write a checkpoint: parameters plus, optionally, the Adam state.
pub fn save_checkpoint(path: &Path, params: &CnnParams, adam: Option<&AdamState>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u8(u8::from(adam.is_some()))?;
    write_params(&mut w, params)?;
    if let Some(state) = adam {
        w.write_u64::<LittleEndian>(state.step_count)?;
        write_params(&mut w, &state.m)?;
        write_params(&mut w, &state.v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`]; bit-exact round trip.
pub fn load_checkpoint(path: &Path) -> Result<(CnnParams, Option<AdamState>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated("magic"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| Error::Truncated("version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let has_adam = r.read_u8().map_err(|_| Error::Truncated("adam flag"))?;
    let params = read_params(&mut r)?;
    let adam = if has_adam != 0 {
        let step_count = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated("step count"))?;
        let m = read_params(&mut r)?;
        let v = read_params(&mut r)?;
        Some(AdamState { m, v, step_count })
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CountMismatch {
            what: "trailing bytes in checkpoint".into(),
            expected: 0,
            found: 1,
        });
    }
    Ok((params, adam))
}
