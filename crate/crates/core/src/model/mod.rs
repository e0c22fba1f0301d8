//! The masked autoencoder backbone.
//!
//! Each cell `k` of a sample becomes a token `[value_proj(x_k) ‖ ctx_proj(c_k)] + P[k]`.
//! The encoder sees only the selected tokens (padded with zero vectors to a
//! common length). The decoder puts every latent back at its column slot,
//! fills the remaining slots with a learned mask token, re-projects,
//! appends decoder context, adds the positional table and runs its own
//! blocks. A two-layer head maps each slot to a scalar in scaled units.
//!
//! Without context (`ctx_raw_dim == 0`) the context half disappears and the
//! value projection spans the full embedding width.

mod layers;
mod loss;
mod params;
mod real;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use layers::{gelu, gelu_grad, Block, LayerNorm, Linear, SeqShape, LAYER_NORM_EPS};
pub use loss::{reconstruction_loss, LossMode};
pub use params::{ModelParams, ParamKind, ParamView, ParamViewMut};
pub use real::Real;

use crate::error::{Error, Result};
use crate::rng;

/// Architecture hyperparameters independent of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub embed_dim: usize,
    /// Share of the embedding width given to context.
    pub ctx_fraction: f64,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            embed_dim: 64,
            ctx_fraction: 0.25,
            enc_depth: 10,
            dec_depth: 4,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    /// Length of the raw context vectors; 0 runs without context.
    pub ctx_raw_dim: usize,
    #[serde(flatten)]
    pub hyper: ModelHyper,
}

impl ModelConfig {
    /// Builds and validates a config. A context fraction that rounds to zero
    /// width disables context.
    pub fn new(n_features: usize, ctx_raw_dim: usize, hyper: ModelHyper) -> Result<Self> {
        let mut cfg = ModelConfig {
            n_features,
            ctx_raw_dim,
            hyper,
        };
        if !(0.0..1.0).contains(&hyper.ctx_fraction) {
            return Err(Error::Config(format!("ctx_fraction {} outside [0, 1)", hyper.ctx_fraction)));
        }
        if cfg.context_width_for(ctx_raw_dim) == 0 {
            cfg.ctx_raw_dim = 0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn context_width_for(&self, raw: usize) -> usize {
        if raw == 0 {
            0
        } else {
            (self.hyper.ctx_fraction * self.hyper.embed_dim as f64).round() as usize
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if self.n_features == 0 {
            return Err(Error::Config("no features".into()));
        }
        if h.embed_dim == 0 || h.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embedding width {} must be even and positive", h.embed_dim)));
        }
        if h.heads == 0 || h.embed_dim % h.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} not divisible by {} heads",
                h.embed_dim, h.heads
            )));
        }
        if h.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        let c = self.context_width();
        if (c == 0) != (self.ctx_raw_dim == 0) {
            return Err(Error::Config("context width and raw context dim disagree".into()));
        }
        if c >= h.embed_dim {
            return Err(Error::Config("context leaves no room for values".into()));
        }
        Ok(())
    }

    /// C, the context part of each token.
    pub fn context_width(&self) -> usize {
        self.context_width_for(self.ctx_raw_dim)
    }

    /// U, the value part of each token.
    pub fn value_width(&self) -> usize {
        self.hyper.embed_dim - self.context_width()
    }

    pub fn hidden_width(&self) -> usize {
        self.hyper.embed_dim * self.hyper.mlp_ratio
    }

    pub fn uses_context(&self) -> bool {
        self.ctx_raw_dim > 0
    }
}

/// Fixed sin-cos table: `P[k, 2i] = sin(k / 10000^(2i/E))`,
/// `P[k, 2i+1] = cos(k / 10000^(2i/E))`.
pub fn positional_table(k: usize, e: usize) -> Result<Array2<f64>> {
    if e == 0 || e % 2 != 0 {
        return Err(Error::Config(format!("positional width {e} must be even and positive")));
    }
    Ok(Array2::from_shape_fn((k, e), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / e as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Encoder token selection for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput<T> {
    /// B×K scaled values with unobserved cells set to 0.
    pub values: Array2<T>,
    /// Columns fed to the encoder per sample, in token order.
    pub tokens: Vec<Vec<usize>>,
    /// Common sequence length; shorter samples are padded with null tokens.
    pub seq_len: usize,
}

impl<T: Real> EncoderInput<T> {
    /// NaN cells are replaced by the protected value 0.
    pub fn new(values: ArrayView2<'_, f64>, tokens: Vec<Vec<usize>>, seq_len: usize) -> Result<Self> {
        if tokens.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} token lists for {} rows",
                tokens.len(),
                values.nrows()
            )));
        }
        for (n, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.len() > seq_len {
                return Err(Error::InvalidInput(format!(
                    "sample {n} has {} tokens for sequence length {seq_len}",
                    t.len()
                )));
            }
            if let Some(&k) = t.iter().find(|&&k| k >= values.ncols()) {
                return Err(Error::InvalidInput(format!("sample {n} references column {k}")));
            }
        }
        Ok(EncoderInput {
            values: values.mapv(|v| if v.is_finite() { T::lit(v) } else { T::zero() }),
            tokens,
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<T> {
    enc: Vec<layers::BlockCache<T>>,
    slots: Array2<T>,
    dec: Vec<layers::BlockCache<T>>,
    head_in: Array2<T>,
    head_pre: Array2<T>,
    head_act: Array2<T>,
}

/// Parameters plus the fixed tables they operate with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pos_table: Array2<T>,
    /// K×ctx_raw_dim raw context, present iff the config uses context.
    context: Option<Array2<T>>,
}

impl<T: Real> Model<T> {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, context: Option<&Array2<f64>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &mut rng::stream(seed));
        Self::from_parts(config, params, context)
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>, context: Option<&Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let context = match (config.uses_context(), context) {
            (true, Some(c)) => {
                if c.dim() != (config.n_features, config.ctx_raw_dim) {
                    return Err(Error::Config(format!(
                        "context matrix {:?}, expected {:?}",
                        c.dim(),
                        (config.n_features, config.ctx_raw_dim)
                    )));
                }
                Some(c.mapv(T::lit))
            }
            (true, None) => return Err(Error::Config("model expects context but none was given".into())),
            (false, _) => None,
        };
        let expected = ModelParams::<T>::zeros(&config);
        let shapes = |p: &ModelParams<T>| p.tensors().into_iter().map(|t| (t.name, t.shape)).collect::<Vec<_>>();
        if shapes(&params) != shapes(&expected) {
            return Err(Error::Config("parameter shapes do not match the config".into()));
        }
        let pos_table = positional_table(config.n_features, config.hyper.embed_dim)?.mapv(T::lit);
        Ok(Model {
            config,
            params,
            pos_table,
            context,
        })
    }

    pub fn pos_table(&self) -> &Array2<T> {
        &self.pos_table
    }

    pub fn context(&self) -> Option<&Array2<T>> {
        self.context.as_ref()
    }

    fn shape(&self, batch: usize, seq: usize) -> SeqShape {
        SeqShape {
            batch,
            seq,
            heads: self.config.hyper.heads,
        }
    }

    fn project_context(&self, proj: Option<&Linear<T>>) -> Option<Array2<T>> {
        match (proj, &self.context) {
            (Some(p), Some(c)) => Some(p.forward(c)),
            _ => None,
        }
    }

    /// Embeds every cell of one sample: a K×E matrix. Non-finite inputs are
    /// treated as 0.
    pub fn embed_sample(&self, x: &[f64]) -> Result<Array2<T>> {
        let k = self.config.n_features;
        if x.len() != k {
            return Err(Error::Shape(format!("sample of {} values for {k} features", x.len())));
        }
        let values = Array2::from_shape_vec((1, k), x.to_vec()).expect("shape checked");
        let input = EncoderInput::<T>::new(values.view(), vec![(0..k).collect()], k)?;
        Ok(self.encoder_tokens(&input))
    }

    fn encoder_tokens(&self, input: &EncoderInput<T>) -> Array2<T> {
        let e = self.config.hyper.embed_dim;
        let u = self.config.value_width();
        let seq = input.seq_len;
        let ctx = self.project_context(self.params.enc_context.as_ref());
        let w = self.params.enc_value.weight.row(0);
        let bias = &self.params.enc_value.bias;
        let mut tokens = Array2::zeros((input.batch_size() * seq, e));
        for (b, cols) in input.tokens.iter().enumerate() {
            for (j, &k) in cols.iter().enumerate() {
                let x = input.values[[b, k]];
                let mut row = tokens.row_mut(b * seq + j);
                let pos = self.pos_table.row(k);
                for c in 0..u {
                    row[c] = x * w[c] + bias[c] + pos[c];
                }
                if let Some(ctx) = &ctx {
                    for c in u..e {
                        row[c] = ctx[[k, c - u]] + pos[c];
                    }
                }
            }
        }
        tokens
    }

    fn run_blocks(
        blocks: &[Block<T>],
        mut x: Array2<T>,
        shape: SeqShape,
        stage: &str,
        mut caches: Option<&mut Vec<layers::BlockCache<T>>>,
    ) -> Result<Array2<T>> {
        for (i, block) in blocks.iter().enumerate() {
            let (y, cache) = block.forward(&x, shape);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in {stage} block {i}")));
            }
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            x = y;
        }
        Ok(x)
    }

    /// Runs the encoder on `batch` sequences of `seq` tokens each.
    pub fn encode(&self, tokens: Array2<T>, batch: usize, seq: usize) -> Result<Array2<T>> {
        Self::run_blocks(&self.params.encoder, tokens, self.shape(batch, seq), "encoder", None)
    }

    /// Decoder input slots: latent rows at encoder columns, mask token elsewhere.
    fn decoder_slots(&self, latents: &Array2<T>, input: &EncoderInput<T>) -> Array2<T> {
        let k = self.config.n_features;
        let b = input.batch_size();
        let mut slots = Array2::zeros((b * k, self.config.hyper.embed_dim));
        for n in 0..b {
            for col in 0..k {
                slots.row_mut(n * k + col).assign(&self.params.mask_token);
            }
            for (j, &col) in input.tokens[n].iter().enumerate() {
                slots.row_mut(n * k + col).assign(&latents.row(n * input.seq_len + j));
            }
        }
        slots
    }

    fn decoder_tokens(&self, slots: &Array2<T>, batch: usize) -> Array2<T> {
        let k = self.config.n_features;
        let u = self.config.value_width();
        let e = self.config.hyper.embed_dim;
        let values = self.params.dec_value.forward(slots);
        let ctx = self.project_context(self.params.dec_context.as_ref());
        let mut z = Array2::zeros((batch * k, e));
        z.slice_mut(s![.., ..u]).assign(&values);
        for n in 0..batch {
            for col in 0..k {
                let mut row = z.row_mut(n * k + col);
                if let Some(ctx) = &ctx {
                    row.slice_mut(s![u..]).assign(&ctx.row(col));
                }
                row += &self.pos_table.row(col);
            }
        }
        z
    }

    fn head(&self, d: &Array2<T>) -> (Array2<T>, Array2<T>, Array2<T>) {
        let pre = self.params.head_hidden.forward(d);
        let act = pre.mapv(gelu);
        let out = self.params.head_out.forward(&act);
        (pre, act, out)
    }

    /// Decodes encoder latents into a B×K prediction in scaled units.
    pub fn decode(&self, latents: &Array2<T>, input: &EncoderInput<T>) -> Result<Array2<T>> {
        let b = input.batch_size();
        let k = self.config.n_features;
        let slots = self.decoder_slots(latents, input);
        let z = self.decoder_tokens(&slots, b);
        let d = Self::run_blocks(&self.params.decoder, z, self.shape(b, k), "decoder", None)?;
        let (_, _, out) = self.head(&d);
        Ok(out.into_shape_with_order((b, k)).expect("one output per slot"))
    }

    /// Full forward pass without caches.
    pub fn predict(&self, input: &EncoderInput<T>) -> Result<Array2<T>> {
        let tokens = self.encoder_tokens(input);
        let latents = self.encode(tokens, input.batch_size(), input.seq_len)?;
        self.decode(&latents, input)
    }

    pub fn forward(&self, input: &EncoderInput<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        let b = input.batch_size();
        let k = self.config.n_features;
        let tokens = self.encoder_tokens(input);
        let mut enc = Vec::with_capacity(self.params.encoder.len());
        let latents = Self::run_blocks(
            &self.params.encoder,
            tokens,
            self.shape(b, input.seq_len),
            "encoder",
            Some(&mut enc),
        )?;
        let slots = self.decoder_slots(&latents, input);
        let z = self.decoder_tokens(&slots, b);
        let mut dec = Vec::with_capacity(self.params.decoder.len());
        let head_in = Self::run_blocks(&self.params.decoder, z, self.shape(b, k), "decoder", Some(&mut dec))?;
        let (head_pre, head_act, out) = self.head(&head_in);
        let out = out.into_shape_with_order((b, k)).expect("one output per slot");
        Ok((
            out,
            ForwardCache {
                enc,
                slots,
                dec,
                head_in,
                head_pre,
                head_act,
            },
        ))
    }

    /// Gradients of a scalar loss given `d_out = ∂loss/∂prediction`.
    pub fn backward(&self, input: &EncoderInput<T>, cache: &ForwardCache<T>, d_out: &Array2<T>) -> ModelParams<T> {
        let p = &self.params;
        let b = input.batch_size();
        let k = self.config.n_features;
        let u = self.config.value_width();
        let seq = input.seq_len;
        let mut grad = ModelParams::zeros(&self.config);

        let dy = d_out.to_owned().into_shape_with_order((b * k, 1)).expect("B×K output");
        let mut d_act = p.head_out.backward(&cache.head_act, &dy, &mut grad.head_out);
        ndarray::Zip::from(&mut d_act)
            .and(&cache.head_pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        let mut dz = p.head_hidden.backward(&cache.head_in, &d_act, &mut grad.head_hidden);

        let dec_shape = self.shape(b, k);
        for (i, block) in p.decoder.iter().enumerate().rev() {
            dz = block.backward(&cache.dec[i], &dz, &mut grad.decoder[i], dec_shape);
        }

        let dv = dz.slice(s![.., ..u]).to_owned();
        let d_slots = p.dec_value.backward(&cache.slots, &dv, &mut grad.dec_value);
        if let (Some(proj), Some(g), Some(ctx)) = (&p.dec_context, &mut grad.dec_context, &self.context) {
            let d_ctx = dz
                .slice(s![.., u..])
                .to_owned()
                .into_shape_with_order((b, k, self.config.context_width()))
                .expect("slot layout")
                .sum_axis(Axis(0));
            proj.accumulate(ctx, &d_ctx, g);
        }

        let mut d_lat = Array2::zeros((b * seq, self.config.hyper.embed_dim));
        let mut is_token = vec![false; k];
        for n in 0..b {
            is_token.iter_mut().for_each(|t| *t = false);
            for (j, &col) in input.tokens[n].iter().enumerate() {
                is_token[col] = true;
                d_lat.row_mut(n * seq + j).assign(&d_slots.row(n * k + col));
            }
            for col in (0..k).filter(|&c| !is_token[c]) {
                grad.mask_token += &d_slots.row(n * k + col);
            }
        }

        let enc_shape = self.shape(b, seq);
        for (i, block) in p.encoder.iter().enumerate().rev() {
            d_lat = block.backward(&cache.enc[i], &d_lat, &mut grad.encoder[i], enc_shape);
        }

        let mut d_ctx = self
            .context
            .as_ref()
            .map(|_| Array2::<T>::zeros((k, self.config.context_width())));
        for (n, cols) in input.tokens.iter().enumerate() {
            for (j, &col) in cols.iter().enumerate() {
                let row = d_lat.row(n * seq + j);
                let x = input.values[[n, col]];
                for c in 0..u {
                    grad.enc_value.weight[[0, c]] += x * row[c];
                    grad.enc_value.bias[c] += row[c];
                }
                if let Some(d) = &mut d_ctx {
                    d.row_mut(col).zip_mut_with(&row.slice(s![u..]), |a, &g| *a += g);
                }
            }
        }
        if let (Some(proj), Some(g), Some(ctx), Some(d)) = (&p.enc_context, &mut grad.enc_context, &self.context, &d_ctx)
        {
            proj.accumulate(ctx, d, g);
        }
        grad
    }

    /// Batch loss and exact gradients for every learnable tensor.
    pub fn loss_and_gradients(
        &self,
        input: &EncoderInput<T>,
        target: &Array2<T>,
        masked_sets: &[Vec<usize>],
        mode: LossMode,
    ) -> Result<(f64, ModelParams<T>)> {
        let (pred, cache) = self.forward(input)?;
        let (loss, d_out) = reconstruction_loss(&pred, target, &input.tokens, masked_sets, mode)?;
        let grad = self.backward(input, &cache, &d_out);
        if !grad.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok((loss, grad))
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            pos_table: self.pos_table.mapv(|v| U::lit(v.as_f64())),
            context: self.context.as_ref().map(|c| c.mapv(|v| U::lit(v.as_f64()))),
        }
    }
}
