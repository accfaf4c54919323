//! The feature-extraction network: three residual convolutional blocks that
//! map a `(channels, time, 128)` feature segment to a fixed-length embedding.
//!
//! Block layout: `[conv3x3 -> batch norm -> leaky ReLU] x3` with a 1x1
//! convolution shortcut from the block input added to the post-activation
//! output, then 2x2 max pooling. Adaptive average pooling at the end fixes
//! the output grid so the embedding length is independent of the input
//! duration.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Adam, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, HasParams, LeakyRelu, MaxPool2x2, ParamView,
    Scalar,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub block_channels: [usize; 3],
    pub convs_per_block: usize,
    pub adaptive_t: usize,
    /// Frequency size of the adaptive pool output; 8 gives the 2048-dim
    /// embedding, {1,2,4} give {256,512,1024} for the dimension ablation.
    pub adaptive_f: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 2,
            block_channels: [64, 128, 64],
            convs_per_block: 3,
            adaptive_t: 4,
            adaptive_f: 8,
            leaky_slope: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn embedding_dim(&self) -> usize {
        self.block_channels[2] * self.adaptive_t * self.adaptive_f
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs_per_block < 1
            || self.block_channels.iter().any(|&c| c == 0)
            || self.in_channels == 0
            || self.adaptive_t == 0
            || self.adaptive_f == 0
            || !(0.0..1.0).contains(&self.leaky_slope)
        {
            return Err(Error::Config(format!("invalid encoder config: {self:?}")));
        }
        Ok(())
    }
}

struct ConvBlock<T: Scalar> {
    convs: Vec<Conv2d<T>>,
    bns: Vec<BatchNorm2d<T>>,
    acts: Vec<LeakyRelu<T>>,
    shortcut: Conv2d<T>,
    pool: MaxPool2x2<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(name: &str, in_c: usize, out_c: usize, convs_per_block: usize, slope: T) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut acts = Vec::new();
        for i in 0..convs_per_block {
            let cin = if i == 0 { in_c } else { out_c };
            convs.push(Conv2d::new(&format!("{name}.conv{}", i + 1), cin, out_c, 3, 1, 1));
            bns.push(BatchNorm2d::new(&format!("{name}.bn{}", i + 1), out_c));
            acts.push(LeakyRelu::new(slope));
        }
        ConvBlock {
            convs,
            bns,
            acts,
            shortcut: Conv2d::new(&format!("{name}.shortcut"), in_c, out_c, 1, 1, 0),
            pool: MaxPool2x2::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let mut y = x.clone();
        for i in 0..self.convs.len() {
            y = self.convs[i].forward(&y, train);
            y = self.bns[i].forward(&y, train);
            y = self.acts[i].forward(&y, train);
        }
        let residual = self.shortcut.forward(x, train);
        y += &residual;
        self.pool.forward(&y, train)
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut y = x.clone();
        for i in 0..self.convs.len() {
            y = self.convs[i].forward_eval(&y);
            y = self.bns[i].forward_eval(&y);
            y = self.acts[i].forward_eval(&y);
        }
        y += &self.shortcut.forward_eval(x);
        self.pool.forward_eval(&y)
    }

    fn backward(&mut self, grad_out: &Array4<T>) -> Array4<T> {
        let g_sum = self.pool.backward(grad_out);
        let mut g = g_sum.clone();
        for i in (0..self.convs.len()).rev() {
            g = self.acts[i].backward(&g);
            g = self.bns[i].backward(&g);
            g = self.convs[i].backward(&g);
        }
        let g_short = self.shortcut.backward(&g_sum);
        g + g_short
    }
}

pub struct Encoder<T: Scalar> {
    pub config: EncoderConfig,
    blocks: Vec<ConvBlock<T>>,
    adaptive: AdaptiveAvgPool2d<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Builds an encoder with zero-initialized convolutions; call
    /// [`Encoder::init_parameters`] (or [`Encoder::new_seeded`]) before use.
    pub fn new(config: EncoderConfig) -> Self {
        let slope = T::from_f64(config.leaky_slope);
        let mut blocks = Vec::new();
        let mut in_c = config.in_channels;
        for (b, &out_c) in config.block_channels.iter().enumerate() {
            blocks.push(ConvBlock::new(
                &format!("block{}", b + 1),
                in_c,
                out_c,
                config.convs_per_block,
                slope,
            ));
            in_c = out_c;
        }
        let adaptive = AdaptiveAvgPool2d::new(config.adaptive_t, config.adaptive_f);
        Encoder {
            config,
            blocks,
            adaptive,
        }
    }

    pub fn new_seeded(config: EncoderConfig, seed: u64) -> Self {
        let mut enc = Encoder::new(config);
        enc.init_parameters(seed);
        enc
    }

    /// Kaiming-uniform init for conv weights (fan-in, leaky-ReLU gain),
    /// zero biases, batch-norm gamma 1 / beta 0. Deterministic per seed.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + self.config.leaky_slope * self.config.leaky_slope)).sqrt();
        for block in &mut self.blocks {
            for conv in block.convs.iter_mut().chain(std::iter::once(&mut block.shortcut)) {
                let shape = conv.weight.value.shape().to_vec();
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = gain * (3.0 / fan_in).sqrt();
                for w in conv.weight.value.iter_mut() {
                    *w = T::from_f64(rng.gen_range(-bound..bound));
                }
                conv.bias.value.fill(T::zero());
            }
            for bn in &mut block.bns {
                bn.gamma.value.fill(T::one());
                bn.beta.value.fill(T::zero());
                bn.running_mean.fill(T::zero());
                bn.running_var.fill(T::one());
            }
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    fn check_input(&self, x: &Array4<T>) {
        let (_, c, h, w) = x.dim();
        assert_eq!(
            c, self.config.in_channels,
            "encoder expects {} input channels, got {c}",
            self.config.in_channels
        );
        assert!(
            h >= 8 && w >= 8,
            "encoder needs at least 8x8 input after padding, got {h}x{w}"
        );
    }

    /// Train-mode forward over a batch: `(n, c, t, f)` -> `(n, dim)`.
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array2<T> {
        if !train {
            return self.forward_eval(x);
        }
        self.check_input(x);
        let mut y = x.clone();
        for block in &mut self.blocks {
            y = block.forward(&y, true);
        }
        let pooled = self.adaptive.forward(&y, true);
        flatten(&pooled)
    }

    /// Eval-mode forward; `&self` so a trained encoder can be shared across
    /// worker threads.
    pub fn forward_eval(&self, x: &Array4<T>) -> Array2<T> {
        self.check_input(x);
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward_eval(&y);
        }
        let pooled = self.adaptive.forward_eval(&y);
        flatten(&pooled)
    }

    /// Backward from embedding gradients to input gradients, accumulating
    /// parameter gradients along the way.
    pub fn backward(&mut self, grad_embedding: &Array2<T>) -> Array4<T> {
        let (n, dim) = grad_embedding.dim();
        assert_eq!(dim, self.embedding_dim());
        let c = self.config.block_channels[2];
        let shape = (n, c, self.config.adaptive_t, self.config.adaptive_f);
        let grad = Array4::from_shape_vec(shape, grad_embedding.iter().cloned().collect())
            .expect("embedding gradient reshape");
        let mut g = self.adaptive.backward(&grad);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        g
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| {
            for g in p.grad.iter_mut() {
                *g = T::zero();
            }
        });
    }

    /// Visits batch-norm running statistics (buffers saved in checkpoints
    /// but not touched by the optimizer).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Array1<T>)) {
        for block in &mut self.blocks {
            for bn in &mut block.bns {
                let name = bn.name().to_string();
                f(&format!("{name}.running_mean"), &mut bn.running_mean);
                f(&format!("{name}.running_var"), &mut bn.running_var);
            }
        }
    }
}

impl<T: Scalar> HasParams<T> for Encoder<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        for block in &mut self.blocks {
            for conv in &mut block.convs {
                conv.visit_params(f);
            }
            for bn in &mut block.bns {
                bn.visit_params(f);
            }
            block.shortcut.visit_params(f);
        }
    }
}

fn flatten<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    Array2::from_shape_vec((n, c * h * w), x.iter().cloned().collect())
        .expect("flatten is contiguous")
}

/// Convenience bundle: encoder plus its optimizer.
pub struct Model<T: Scalar> {
    pub encoder: Encoder<T>,
    pub optimizer: Adam<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        Model {
            encoder: Encoder::new_seeded(config, seed),
            optimizer: Adam::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"FSEDCKP1";

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn collect_entries<T: Scalar>(encoder: &mut Encoder<T>) -> Vec<Entry> {
    let mut entries = Vec::new();
    encoder.visit_params(&mut |p| {
        entries.push(Entry {
            name: p.name.to_string(),
            shape: p.shape.clone(),
            data: p.value.iter().map(|v| v.as_f64() as f32).collect(),
        });
    });
    encoder.visit_buffers(&mut |name, buf| {
        entries.push(Entry {
            name: name.to_string(),
            shape: vec![buf.len()],
            data: buf.iter().map(|v| v.as_f64() as f32).collect(),
        });
    });
    entries
}

/// Writes a versioned checkpoint: parameter and running-stat tensors as
/// 32-bit floats plus the encoder config, in a self-describing container.
pub fn save_checkpoint<T: Scalar>(path: &Path, encoder: &mut Encoder<T>) -> Result<()> {
    let config_json = serde_json::to_vec(&encoder.config)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let entries = collect_entries(encoder);

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(config_json.len() as u32).to_le_bytes())?;
    file.write_all(&config_json)?;
    file.write_all(&(entries.len() as u32).to_le_bytes())?;
    for entry in &entries {
        let name = entry.name.as_bytes();
        file.write_all(&(name.len() as u32).to_le_bytes())?;
        file.write_all(name)?;
        file.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
        for &d in &entry.shape {
            file.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &entry.data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(path: &Path, file: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    file.read_exact(buf)
        .map_err(|_| Error::Format(format!("{}: truncated checkpoint", path.display())))
}

fn read_u32(path: &Path, file: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(path, file, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_checkpoint(path: &Path) -> Result<(EncoderConfig, Vec<Entry>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or(path, &mut file, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let config_len = read_u32(path, &mut file)? as usize;
    let mut config_buf = vec![0u8; config_len];
    read_exact_or(path, &mut file, &mut config_buf)?;
    let config: EncoderConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| Error::Format(format!("{}: checkpoint config: {e}", path.display())))?;

    let n_entries = read_u32(path, &mut file)? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = read_u32(path, &mut file)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(path, &mut file, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format(format!("{}: bad parameter name", path.display())))?;
        let ndim = read_u32(path, &mut file)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(path, &mut file)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut payload = vec![0u8; count * 4];
        read_exact_or(path, &mut file, &mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    Ok((config, entries))
}

/// Loads a checkpoint into a fresh encoder built from the embedded config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Encoder<T>> {
    let (config, entries) = parse_checkpoint(path)?;
    config.validate()?;
    let mut encoder = Encoder::new(config);
    apply_entries(path, &mut encoder, &entries)?;
    Ok(encoder)
}

/// Loads a checkpoint into an existing encoder; every stored tensor must
/// match the encoder's parameter set by name and shape.
pub fn load_checkpoint_into<T: Scalar>(path: &Path, encoder: &mut Encoder<T>) -> Result<()> {
    let (_, entries) = parse_checkpoint(path)?;
    apply_entries(path, encoder, &entries)
}

fn apply_entries<T: Scalar>(path: &Path, encoder: &mut Encoder<T>, entries: &[Entry]) -> Result<()> {
    use std::collections::HashMap;
    let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();

    // Validate the full parameter set before mutating anything.
    let mut problem: Option<String> = None;
    let mut expected = 0usize;
    encoder.visit_params(&mut |p| {
        expected += 1;
        if problem.is_some() {
            return;
        }
        match by_name.get(p.name) {
            None => problem = Some(format!("missing parameter {}", p.name)),
            Some(e) if e.shape != p.shape => {
                problem = Some(format!(
                    "shape mismatch for {}: checkpoint {:?} vs model {:?}",
                    p.name, e.shape, p.shape
                ))
            }
            _ => {}
        }
    });
    encoder.visit_buffers(&mut |name, buf| {
        expected += 1;
        if problem.is_some() {
            return;
        }
        match by_name.get(name) {
            None => problem = Some(format!("missing buffer {name}")),
            Some(e) if e.shape != vec![buf.len()] => {
                problem = Some(format!(
                    "shape mismatch for {name}: checkpoint {:?} vs model [{}]",
                    e.shape,
                    buf.len()
                ))
            }
            _ => {}
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Format(format!("{}: {msg}", path.display())));
    }
    if expected != entries.len() {
        return Err(Error::Format(format!(
            "{}: checkpoint has {} tensors but model expects {expected}",
            path.display(),
            entries.len()
        )));
    }

    encoder.visit_params(&mut |p| {
        let e = by_name[p.name];
        for (dst, &src) in p.value.iter_mut().zip(e.data.iter()) {
            *dst = T::from_f64(src as f64);
        }
    });
    encoder.visit_buffers(&mut |name, buf| {
        let e = by_name[name];
        for (dst, &src) in buf.iter_mut().zip(e.data.iter()) {
            *dst = T::from_f64(src as f64);
        }
    });
    Ok(())
}
