//! CDFormer and its ablation variants.
//!
//! Full stack: conv block → residual shrinkage blocks → 1×1 projection to
//! `d_model` → sinusoidal positional encoding → post-norm transformer encoder
//! layers → last time step → two-layer regression head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NormalizationState;
use crate::error::{Error, Result};
use crate::nn::{
    multi_head_attention, soft_threshold, AttentionHeadSet, BatchNorm1d, Conv1d, Dense, FeedForward, Forward,
    LayerNorm, Mode, ParamStore, TensorRecord, ThresholdGenerator,
};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineFc,
    CnnFc,
    CnnTransformer,
    Cdformer,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::BaselineFc, Variant::CnnFc, Variant::CnnTransformer, Variant::Cdformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BaselineFc => "baseline_fc",
            Variant::CnnFc => "cnn_fc",
            Variant::CnnTransformer => "cnn_transformer",
            Variant::Cdformer => "cdformer",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub window_len: usize,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
    pub drsn_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub reg_hidden: usize,
    pub variant: Variant,
    pub output_relu: bool,
    pub positional_encoding: bool,
    pub threshold_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            window_len: 16,
            cnn_channels: 32,
            cnn_kernel: 3,
            drsn_blocks: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            encoder_layers: 2,
            reg_hidden: 32,
            variant: Variant::Cdformer,
            output_relu: false,
            positional_encoding: true,
            threshold_reduction: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("input_channels", self.input_channels),
            ("window_len", self.window_len),
            ("cnn_channels", self.cnn_channels),
            ("cnn_kernel", self.cnn_kernel),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("reg_hidden", self.reg_hidden),
            ("threshold_reduction", self.threshold_reduction),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be ≥ 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.window_len < self.cnn_kernel {
            return Err(Error::Config(format!(
                "window_len ({}) must be ≥ cnn_kernel ({})",
                self.window_len, self.cnn_kernel
            )));
        }
        if self.cnn_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cnn_kernel ({}) must be odd so convolutions preserve the window length",
                self.cnn_kernel
            )));
        }
        match self.variant {
            Variant::Cdformer if self.drsn_blocks == 0 => {
                return Err(Error::Config("cdformer needs drsn_blocks ≥ 1".into()));
            }
            Variant::Cdformer | Variant::CnnTransformer if self.encoder_layers == 0 => {
                return Err(Error::Config(format!("{} needs encoder_layers ≥ 1", self.variant.as_str())));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Conv → batch norm → ReLU.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
}

impl ConvBlock {
    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        let h = self.bn.forward(f, h)?;
        f.tape.relu(h)
    }
}

/// Residual shrinkage block: two conv+BN stages, channel-wise soft
/// thresholding of the second stage, and a shortcut that is the identity when
/// channel counts agree and a 1×1 conv + BN otherwise.
#[derive(Clone, Debug)]
pub struct DrsnBlock {
    pub conv1: Conv1d,
    pub bn1: BatchNorm1d,
    pub conv2: Conv1d,
    pub bn2: BatchNorm1d,
    pub thresholds: ThresholdGenerator,
    pub shortcut: Option<(Conv1d, BatchNorm1d)>,
    pub c_in: usize,
    pub c_out: usize,
}

impl DrsnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pad = kernel / 2;
        let shortcut = (c_in != c_out).then(|| {
            (
                Conv1d::new(store, &format!("{name}.shortcut_conv"), c_in, c_out, 1, 0, rng),
                BatchNorm1d::new(store, &format!("{name}.shortcut_bn"), c_out),
            )
        });
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c_in, c_out, kernel, pad, rng),
            bn1: BatchNorm1d::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c_out, c_out, kernel, pad, rng),
            bn2: BatchNorm1d::new(store, &format!("{name}.bn2"), c_out),
            thresholds: ThresholdGenerator::new(store, &format!("{name}.threshold"), c_out, reduction, rng)?,
            shortcut,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.c_in {
            return Err(Error::dim("drsn_forward", &shape, &[self.c_in]));
        }
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        let f2 = self.bn2.forward(f, h)?;
        let lambda = self.thresholds.forward(f, f2)?;
        let denoised = soft_threshold(&mut f.tape, f2, lambda)?;
        let skip = match &self.shortcut {
            None => x,
            Some((conv, bn)) => {
                let s = conv.forward(f, x)?;
                bn.forward(f, s)?
            }
        };
        let sum = f.tape.add(denoised, skip)?;
        f.tape.relu(sum)
    }
}

/// Post-norm encoder layer: attention → add → LN → FFN → add → LN.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionHeadSet,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            attn: AttentionHeadSet::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model),
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let a = multi_head_attention(f, x, &self.attn)?;
        let h = f.tape.add(x, a)?;
        let h = self.ln1.forward(f, h)?;
        let g = self.ffn.forward(f, h)?;
        let h2 = f.tape.add(h, g)?;
        self.ln2.forward(f, h2)
    }
}

/// `ĉ = W2·relu(W1·z + b1) + b2`.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl RegressionHead {
    fn forward(&self, f: &mut Forward, z: Var) -> Result<Var> {
        let h = self.fc1.forward(f, z)?;
        let h = f.tape.relu(h)?;
        self.fc2.forward(f, h)
    }
}

/// Parameter counts split by layer family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub conv: usize,
    pub attention: usize,
    pub other: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct CdformerModel {
    config: ModelConfig,
    store: ParamStore,
    input_block: Option<ConvBlock>,
    drsn: Vec<DrsnBlock>,
    projection: Option<Conv1d>,
    encoder: Vec<EncoderLayer>,
    flat_mlp: Option<(Dense, Dense)>,
    head: RegressionHead,
    positional: Option<Tensor>,
}

/// Fixed sinusoidal encoding `[L×d]`: `sin(p/10000^(2i/d))` on even columns, `cos` on odd.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d as f64);
            data[p * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

impl CdformerModel {
    /// Builds the variant selected by `config`, initializing weights from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let pad = c.cnn_kernel / 2;

        let uses_conv = c.variant != Variant::BaselineFc;
        let uses_encoder = matches!(c.variant, Variant::CnnTransformer | Variant::Cdformer);

        let input_block = uses_conv.then(|| ConvBlock {
            conv: Conv1d::new(&mut store, "input_conv", c.input_channels, c.cnn_channels, c.cnn_kernel, pad, &mut rng),
            bn: BatchNorm1d::new(&mut store, "input_bn", c.cnn_channels),
        });
        let mut drsn = Vec::new();
        if c.variant == Variant::Cdformer {
            for i in 0..c.drsn_blocks {
                drsn.push(DrsnBlock::new(
                    &mut store,
                    &format!("drsn{i}"),
                    c.cnn_channels,
                    c.cnn_channels,
                    c.cnn_kernel,
                    c.threshold_reduction,
                    &mut rng,
                )?);
            }
        }
        let projection = uses_encoder
            .then(|| Conv1d::new(&mut store, "projection_conv", c.cnn_channels, c.d_model, 1, 0, &mut rng));
        let mut encoder = Vec::new();
        if uses_encoder {
            for i in 0..c.encoder_layers {
                encoder.push(EncoderLayer::new(&mut store, &format!("encoder{i}"), c, &mut rng)?);
            }
        }
        let flat_mlp = (c.variant == Variant::BaselineFc).then(|| {
            (
                Dense::new(&mut store, "flat_fc1", c.input_channels * c.window_len, c.d_model, &mut rng),
                Dense::new(&mut store, "flat_fc2", c.d_model, c.d_model, &mut rng),
            )
        });
        let head_in = match c.variant {
            Variant::BaselineFc | Variant::CnnTransformer | Variant::Cdformer => c.d_model,
            Variant::CnnFc => c.cnn_channels * c.window_len,
        };
        let head = RegressionHead {
            fc1: Dense::new(&mut store, "head_fc1", head_in, c.reg_hidden, &mut rng),
            fc2: Dense::new(&mut store, "head_fc2", c.reg_hidden, 1, &mut rng),
        };
        let positional = (uses_encoder && c.positional_encoding).then(|| sinusoidal_encoding(c.window_len, c.d_model));
        Ok(Self {
            config,
            store,
            input_block,
            drsn,
            projection,
            encoder,
            flat_mlp,
            head,
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn drsn_blocks(&self) -> &[DrsnBlock] {
        &self.drsn
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown::default();
        for (_, e) in self.store.iter().filter(|(_, e)| e.trainable) {
            let n = e.value.len();
            if e.name.contains("conv") {
                b.conv += n;
            } else if e.name.contains(".attn.") {
                b.attention += n;
            } else {
                b.other += n;
            }
            b.total += n;
        }
        b
    }

    /// `x[B×C_in×L] → ĉ[B]` in normalized capacity units.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != c.input_channels || shape[2] != c.window_len {
            return Err(Error::dim("model_forward", &shape, &[c.input_channels, c.window_len]));
        }
        let batch = shape[0];
        let z = match c.variant {
            Variant::BaselineFc => {
                let (fc1, fc2) = self.flat_mlp.as_ref().expect("baseline has flat mlp");
                let flat = f.tape.reshape(x, &[batch, c.input_channels * c.window_len])?;
                let h = fc1.forward(f, flat)?;
                let h = f.tape.relu(h)?;
                fc2.forward(f, h)?
            }
            Variant::CnnFc => {
                let h = self.input_block.as_ref().expect("conv block").forward(f, x)?;
                f.tape.reshape(h, &[batch, c.cnn_channels * c.window_len])?
            }
            Variant::CnnTransformer | Variant::Cdformer => {
                let mut h = self.input_block.as_ref().expect("conv block").forward(f, x)?;
                for block in &self.drsn {
                    h = block.forward(f, h)?;
                }
                let h = self.projection.as_ref().expect("projection").forward(f, h)?;
                let h = f.tape.swap_last2(h)?;
                let h = self.encode(f, h)?;
                f.tape.select_step(h, c.window_len - 1)?
            }
        };
        let y = self.head.forward(f, z)?;
        let y = f.tape.reshape(y, &[batch])?;
        if c.output_relu {
            f.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Positional encoding (when enabled) followed by the encoder layers, on `[B×L×d_model]`.
    pub fn encode(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let mut h = h;
        if let Some(pe) = &self.positional {
            let batch = f.tape.shape(h)[0];
            let mut tiled = Vec::with_capacity(batch * pe.len());
            for _ in 0..batch {
                tiled.extend_from_slice(pe.data());
            }
            let pe = f.input(Tensor::new(f.tape.shape(h).to_vec(), tiled)?);
            h = f.tape.add(h, pe)?;
        }
        self.encoder_stack(f, h)
    }

    /// Encoder layers only, without positional encoding.
    pub fn encoder_stack(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let mut h = h;
        for layer in &self.encoder {
            h = layer.forward(f, h)?;
        }
        Ok(h)
    }

    /// Evaluation-mode prediction for a batch `[B×C_in×L]`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut f = Forward::new(&self.store, Mode::Eval, false);
        let xv = f.input(x.clone());
        let y = self.forward(&mut f, xv)?;
        Ok(f.tape.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self, normalizer: Option<NormalizationState>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            normalizer,
            tensors: self.store.to_records(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ckpt.format)));
        }
        let mut model = Self::build(ckpt.config.clone(), 0)?;
        model.store.load_records(&ckpt.tensors)?;
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cdformer-checkpoint/1";

/// Model configuration, optional fitted normalizer, and every named tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub normalizer: Option<NormalizationState>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
