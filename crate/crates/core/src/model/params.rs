use ndarray::Array1;

use super::layers::{truncated_normal, Block, LayerNorm, Linear};
use super::real::Real;
use super::ModelConfig;
use crate::rng::Stream;

/// Role of a learnable tensor; decides weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormShift,
    MaskToken,
}

impl ParamKind {
    /// Decoupled weight decay skips biases (norm shifts included) and the
    /// mask token.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::NormGain)
    }
}

/// Every learnable tensor of the model. The same structure holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Scalar value → U.
    pub enc_value: Linear<T>,
    /// Raw context → C, absent without context.
    pub enc_context: Option<Linear<T>>,
    /// Latent/mask slot (E) → U.
    pub dec_value: Linear<T>,
    pub dec_context: Option<Linear<T>>,
    pub mask_token: Array1<T>,
    pub encoder: Vec<Block<T>>,
    pub decoder: Vec<Block<T>>,
    pub head_hidden: Linear<T>,
    pub head_out: Linear<T>,
}

/// Read-only view of one tensor.
pub struct ParamView<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [T],
}

fn push_linear<'a, T>(out: &mut Vec<ParamView<'a, T>>, prefix: &str, l: &'a Linear<T>) {
    out.push(ParamView {
        name: format!("{prefix}.weight"),
        kind: ParamKind::Weight,
        shape: l.weight.shape().to_vec(),
        data: l.weight.as_slice().expect("standard layout"),
    });
    out.push(ParamView {
        name: format!("{prefix}.bias"),
        kind: ParamKind::Bias,
        shape: l.bias.shape().to_vec(),
        data: l.bias.as_slice().expect("standard layout"),
    });
}

fn push_linear_mut<'a, T>(out: &mut Vec<ParamViewMut<'a, T>>, prefix: &str, l: &'a mut Linear<T>) {
    out.push(ParamViewMut {
        name: format!("{prefix}.weight"),
        kind: ParamKind::Weight,
        data: l.weight.as_slice_mut().expect("standard layout"),
    });
    out.push(ParamViewMut {
        name: format!("{prefix}.bias"),
        kind: ParamKind::Bias,
        data: l.bias.as_slice_mut().expect("standard layout"),
    });
}

fn push_norm<'a, T>(out: &mut Vec<ParamView<'a, T>>, prefix: &str, n: &'a LayerNorm<T>) {
    out.push(ParamView {
        name: format!("{prefix}.gain"),
        kind: ParamKind::NormGain,
        shape: n.gain.shape().to_vec(),
        data: n.gain.as_slice().expect("standard layout"),
    });
    out.push(ParamView {
        name: format!("{prefix}.shift"),
        kind: ParamKind::NormShift,
        shape: n.shift.shape().to_vec(),
        data: n.shift.as_slice().expect("standard layout"),
    });
}

fn push_norm_mut<'a, T>(out: &mut Vec<ParamViewMut<'a, T>>, prefix: &str, n: &'a mut LayerNorm<T>) {
    out.push(ParamViewMut {
        name: format!("{prefix}.gain"),
        kind: ParamKind::NormGain,
        data: n.gain.as_slice_mut().expect("standard layout"),
    });
    out.push(ParamViewMut {
        name: format!("{prefix}.shift"),
        kind: ParamKind::NormShift,
        data: n.shift.as_slice_mut().expect("standard layout"),
    });
}

fn push_block<'a, T>(out: &mut Vec<ParamView<'a, T>>, prefix: &str, b: &'a Block<T>) {
    push_norm(out, &format!("{prefix}.norm_attn"), &b.norm_attn);
    push_linear(out, &format!("{prefix}.qkv"), &b.qkv);
    push_linear(out, &format!("{prefix}.proj"), &b.proj);
    push_norm(out, &format!("{prefix}.norm_ff"), &b.norm_ff);
    push_linear(out, &format!("{prefix}.fc1"), &b.fc1);
    push_linear(out, &format!("{prefix}.fc2"), &b.fc2);
}

fn push_block_mut<'a, T>(out: &mut Vec<ParamViewMut<'a, T>>, prefix: &str, b: &'a mut Block<T>) {
    push_norm_mut(out, &format!("{prefix}.norm_attn"), &mut b.norm_attn);
    push_linear_mut(out, &format!("{prefix}.qkv"), &mut b.qkv);
    push_linear_mut(out, &format!("{prefix}.proj"), &mut b.proj);
    push_norm_mut(out, &format!("{prefix}.norm_ff"), &mut b.norm_ff);
    push_linear_mut(out, &format!("{prefix}.fc1"), &mut b.fc1);
    push_linear_mut(out, &format!("{prefix}.fc2"), &mut b.fc2);
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters: truncated-normal weights (σ = 0.02), zero biases,
    /// unit norm gains.
    pub fn init(config: &ModelConfig, stream: &mut Stream) -> Self {
        let e = config.hyper.embed_dim;
        let u = config.value_width();
        let c = config.context_width();
        let hidden = config.hidden_width();
        ModelParams {
            enc_value: Linear::init(1, u, stream),
            enc_context: (c > 0).then(|| Linear::init(config.ctx_raw_dim, c, stream)),
            dec_value: Linear::init(e, u, stream),
            dec_context: (c > 0).then(|| Linear::init(config.ctx_raw_dim, c, stream)),
            mask_token: (0..e).map(|_| truncated_normal(stream, 0.02)).collect(),
            encoder: (0..config.hyper.enc_depth)
                .map(|_| Block::init(e, hidden, stream))
                .collect(),
            decoder: (0..config.hyper.dec_depth)
                .map(|_| Block::init(e, hidden, stream))
                .collect(),
            head_hidden: Linear::init(e, hidden, stream),
            head_out: Linear::init(hidden, 1, stream),
        }
    }

    /// All-zero tensors with the shapes of `config`, used for gradients.
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.hyper.embed_dim;
        let u = config.value_width();
        let c = config.context_width();
        let hidden = config.hidden_width();
        ModelParams {
            enc_value: Linear::zeros(1, u),
            enc_context: (c > 0).then(|| Linear::zeros(config.ctx_raw_dim, c)),
            dec_value: Linear::zeros(e, u),
            dec_context: (c > 0).then(|| Linear::zeros(config.ctx_raw_dim, c)),
            mask_token: Array1::zeros(e),
            encoder: (0..config.hyper.enc_depth).map(|_| Block::zeros(e, hidden)).collect(),
            decoder: (0..config.hyper.dec_depth).map(|_| Block::zeros(e, hidden)).collect(),
            head_hidden: Linear::zeros(e, hidden),
            head_out: Linear::zeros(hidden, 1),
        }
    }

    /// Tensors in the fixed serialisation order.
    pub fn tensors(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        push_linear(&mut out, "enc_value", &self.enc_value);
        if let Some(l) = &self.enc_context {
            push_linear(&mut out, "enc_context", l);
        }
        push_linear(&mut out, "dec_value", &self.dec_value);
        if let Some(l) = &self.dec_context {
            push_linear(&mut out, "dec_context", l);
        }
        out.push(ParamView {
            name: "mask_token".into(),
            kind: ParamKind::MaskToken,
            shape: vec![self.mask_token.len()],
            data: self.mask_token.as_slice().expect("standard layout"),
        });
        for (i, b) in self.encoder.iter().enumerate() {
            push_block(&mut out, &format!("encoder.{i}"), b);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            push_block(&mut out, &format!("decoder.{i}"), b);
        }
        push_linear(&mut out, "head_hidden", &self.head_hidden);
        push_linear(&mut out, "head_out", &self.head_out);
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ParamViewMut<'_, T>> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "enc_value", &mut self.enc_value);
        if let Some(l) = &mut self.enc_context {
            push_linear_mut(&mut out, "enc_context", l);
        }
        push_linear_mut(&mut out, "dec_value", &mut self.dec_value);
        if let Some(l) = &mut self.dec_context {
            push_linear_mut(&mut out, "dec_context", l);
        }
        out.push(ParamViewMut {
            name: "mask_token".into(),
            kind: ParamKind::MaskToken,
            data: self.mask_token.as_slice_mut().expect("standard layout"),
        });
        for (i, b) in self.encoder.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("encoder.{i}"), b);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("decoder.{i}"), b);
        }
        push_linear_mut(&mut out, "head_hidden", &mut self.head_hidden);
        push_linear_mut(&mut out, "head_out", &mut self.head_out);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Euclidean norm over every tensor, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.mapv(|v| U::lit(v.as_f64())),
            bias: l.bias.mapv(|v| U::lit(v.as_f64())),
        };
        let norm = |n: &LayerNorm<T>| LayerNorm {
            gain: n.gain.mapv(|v| U::lit(v.as_f64())),
            shift: n.shift.mapv(|v| U::lit(v.as_f64())),
        };
        let block = |b: &Block<T>| Block {
            norm_attn: norm(&b.norm_attn),
            qkv: lin(&b.qkv),
            proj: lin(&b.proj),
            norm_ff: norm(&b.norm_ff),
            fc1: lin(&b.fc1),
            fc2: lin(&b.fc2),
        };
        ModelParams {
            enc_value: lin(&self.enc_value),
            enc_context: self.enc_context.as_ref().map(lin),
            dec_value: lin(&self.dec_value),
            dec_context: self.dec_context.as_ref().map(lin),
            mask_token: self.mask_token.mapv(|v| U::lit(v.as_f64())),
            encoder: self.encoder.iter().map(block).collect(),
            decoder: self.decoder.iter().map(block).collect(),
            head_hidden: lin(&self.head_hidden),
            head_out: lin(&self.head_out),
        }
    }
}
