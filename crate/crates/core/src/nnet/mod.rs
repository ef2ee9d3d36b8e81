//! Patch-transformer segmentation network with a hand-written reverse pass.
//!
//! `f = D o E`: the encoder embeds `P x P` patches, adds position embeddings
//! and runs pre-norm transformer blocks followed by a final layer norm; the
//! decoder is one linear map from each token to the `P x P x K` logits of its
//! patch.

mod layers;
mod params;

use rand::Rng as _;

pub use self::params::{BlockParams, ModelConfig, ModelParams, Tensor, INIT_STD};

use crate::datagen::Image;
use crate::error::{Error, Result};
use crate::linalg::{accumulate_column_sums, add_row_bias, gemm};
use crate::masking::PatchMask;
use crate::seed;
use layers::{AttnTrace, LnTrace};

/// Row-major `grid_height x grid_width x dim` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid_height: usize,
    pub grid_width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn token(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.grid_width + c) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    /// Feed-forward units dropped i.i.d. with inverse-scale compensation,
    /// driven by the given seed.
    On { seed: u64 },
}

/// Per-pixel segmentation output, class-major (`K x H x W`) for the
/// logits and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub pred: Vec<u8>,
    pub conf: Vec<f64>,
}

impl SegOutput {
    pub fn from_logits(num_classes: usize, height: usize, width: usize, logits: Vec<f64>) -> Self {
        let hw = height * width;
        assert_eq!(logits.len(), num_classes * hw, "logit buffer shape");
        let mut probs = vec![0.0; logits.len()];
        let mut pred = vec![0u8; hw];
        let mut conf = vec![0.0; hw];
        for i in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for k in 0..num_classes {
                m = m.max(logits[k * hw + i]);
            }
            let mut s = 0.0;
            for k in 0..num_classes {
                let e = (logits[k * hw + i] - m).exp();
                probs[k * hw + i] = e;
                s += e;
            }
            let mut best = 0;
            for k in 0..num_classes {
                probs[k * hw + i] /= s;
                if probs[k * hw + i] > probs[best * hw + i] {
                    best = k;
                }
            }
            pred[i] = best as u8;
            conf[i] = probs[best * hw + i];
        }
        SegOutput {
            num_classes,
            height,
            width,
            logits,
            probs,
            pred,
            conf,
        }
    }

    /// Builds an output straight from per-pixel probabilities (averaged
    /// ensembles); logits are set to `ln p`.
    pub fn from_probs(num_classes: usize, height: usize, width: usize, probs: Vec<f64>) -> Self {
        let hw = height * width;
        assert_eq!(probs.len(), num_classes * hw, "probability buffer shape");
        let mut pred = vec![0u8; hw];
        let mut conf = vec![0.0; hw];
        for i in 0..hw {
            let mut best = 0;
            for k in 1..num_classes {
                if probs[k * hw + i] > probs[best * hw + i] {
                    best = k;
                }
            }
            pred[i] = best as u8;
            conf[i] = probs[best * hw + i];
        }
        let logits = probs.iter().map(|p| p.ln()).collect();
        SegOutput {
            num_classes,
            height,
            width,
            logits,
            probs,
            pred,
            conf,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f64 {
        self.probs[class * self.pixels() + pixel]
    }

    /// Class distribution at one pixel.
    pub fn distribution(&self, pixel: usize) -> Vec<f64> {
        (0..self.num_classes).map(|k| self.prob(k, pixel)).collect()
    }
}

struct EmbedTrace {
    patches: Vec<f64>,
    keep: Option<Vec<bool>>,
}

struct BlockTrace {
    ln1: LnTrace,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    attn: AttnTrace,
    attn_out: Vec<f64>,
    ln2: LnTrace,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    drop_scale: Option<Vec<f64>>,
}

struct Trace {
    embed: Option<EmbedTrace>,
    blocks: Vec<BlockTrace>,
    norm: LnTrace,
    features: Vec<f64>,
}

/// Result of a forward computation; carries the recorded intermediates when
/// the pass was run with recording enabled.
pub struct ForwardPass {
    pub output: SegOutput,
    /// Final encoder tokens (`num_tokens x dim`), the input of the decoder.
    pub features: Vec<f64>,
    trace: Option<Trace>,
}

impl ForwardPass {
    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }
}

fn check_finite(values: &[f64], stage: &str, block: Option<usize>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            stage: stage.to_string(),
            block,
        })
    }
}

impl ModelParams {
    fn gather_patches(&self, image: &Image) -> Result<Vec<f64>> {
        let c = &self.config;
        if !image.height.is_multiple_of(c.patch_size) || !image.width.is_multiple_of(c.patch_size) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {}-pixel patches",
                image.height, image.width, c.patch_size
            )));
        }
        if image.height != c.image_height || image.width != c.image_width {
            return Err(Error::Shape(format!(
                "model expects {}x{} images, got {}x{}",
                c.image_height, c.image_width, image.height, image.width
            )));
        }
        let p = c.patch_size;
        let (gh, gw) = (c.grid_height(), c.grid_width());
        let pd = c.patch_dim();
        let mut out = vec![0.0; gh * gw * pd];
        for r in 0..gh {
            for col in 0..gw {
                let t = r * gw + col;
                for py in 0..p {
                    let src = ((r * p + py) * image.width + col * p) * 3;
                    let dst = t * pd + py * p * 3;
                    out[dst..dst + p * 3].copy_from_slice(&image.data[src..src + p * 3]);
                }
            }
        }
        Ok(out)
    }

    fn empty_grid(&self) -> TokenGrid {
        TokenGrid {
            grid_height: self.config.grid_height(),
            grid_width: self.config.grid_width(),
            dim: self.config.dim,
            data: Vec::new(),
        }
    }

    fn content_from_patches(&self, patches: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let n = c.num_tokens();
        let mut x = vec![0.0; n * c.dim];
        gemm(n, c.patch_dim(), c.dim, patches, false, &self.patch_w.data, false, 0.0, &mut x);
        add_row_bias(&mut x, &self.patch_b.data);
        x
    }

    /// Linear patch embedding without position embeddings.
    pub fn embed_content(&self, image: &Image) -> Result<TokenGrid> {
        let patches = self.gather_patches(image)?;
        Ok(TokenGrid {
            data: self.content_from_patches(&patches),
            ..self.empty_grid()
        })
    }

    pub fn add_position(&self, tokens: &mut TokenGrid) -> Result<()> {
        if tokens.data.len() != self.pos.data.len() {
            return Err(Error::Shape(format!(
                "token grid has {} values, position table {}",
                tokens.data.len(),
                self.pos.data.len()
            )));
        }
        for (t, p) in tokens.data.iter_mut().zip(&self.pos.data) {
            *t += p;
        }
        Ok(())
    }

    /// Patch embedding `[E]_{0:1}`: per-patch linear map plus position embedding.
    pub fn patch_embed(&self, image: &Image) -> Result<TokenGrid> {
        let mut tokens = self.embed_content(image)?;
        self.add_position(&mut tokens)?;
        Ok(tokens)
    }

    /// Runs encoder blocks and decoder on an already-embedded token grid.
    pub fn forward(&self, tokens: &TokenGrid, dropout: Dropout) -> Result<SegOutput> {
        Ok(self.forward_tokens(tokens, dropout, false)?.output)
    }

    pub fn forward_tokens(&self, tokens: &TokenGrid, dropout: Dropout, record: bool) -> Result<ForwardPass> {
        let c = &self.config;
        if tokens.grid_height != c.grid_height() || tokens.grid_width != c.grid_width() || tokens.dim != c.dim {
            return Err(Error::Shape(format!(
                "token grid {}x{}x{} does not match model {}x{}x{}",
                tokens.grid_height,
                tokens.grid_width,
                tokens.dim,
                c.grid_height(),
                c.grid_width(),
                c.dim
            )));
        }
        check_finite(&tokens.data, "input tokens", None)?;
        self.run(tokens.data.clone(), None, dropout, record)
    }

    /// Full forward from pixels, optionally masking content tokens before the
    /// position embedding is added.
    pub fn forward_image(
        &self,
        image: &Image,
        mask: Option<&PatchMask>,
        dropout: Dropout,
        record: bool,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let patches = self.gather_patches(image)?;
        let mut x = self.content_from_patches(&patches);
        if let Some(m) = mask {
            if m.grid_height != c.grid_height() || m.grid_width != c.grid_width() {
                return Err(Error::Shape(format!(
                    "mask grid {}x{} does not match model grid {}x{}",
                    m.grid_height,
                    m.grid_width,
                    c.grid_height(),
                    c.grid_width()
                )));
            }
            for (row, &keep) in x.chunks_exact_mut(c.dim).zip(&m.keep) {
                if !keep {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        for (t, p) in x.iter_mut().zip(&self.pos.data) {
            *t += p;
        }
        check_finite(&x, "patch embedding", None)?;
        let embed = record.then(|| EmbedTrace {
            patches,
            keep: mask.map(|m| m.keep.clone()),
        });
        self.run(x, embed, dropout, record)
    }

    fn run(&self, mut x: Vec<f64>, embed: Option<EmbedTrace>, dropout: Dropout, record: bool) -> Result<ForwardPass> {
        let c = &self.config;
        let (n, d, f) = (c.num_tokens(), c.dim, c.ffn_hidden);
        let mut block_traces = Vec::with_capacity(if record { c.blocks } else { 0 });
        for (bi, b) in self.blocks.iter().enumerate() {
            let (h1, ln1) = layers::layer_norm(&x, d, &b.ln1_g.data, &b.ln1_b.data);
            let mut qkv = vec![0.0; n * 3 * d];
            gemm(n, d, 3 * d, &h1, false, &b.qkv_w.data, false, 0.0, &mut qkv);
            add_row_bias(&mut qkv, &b.qkv_b.data);
            let (attn_out, attn) = layers::attention(&qkv, n, d, c.heads);
            let mut proj = vec![0.0; n * d];
            gemm(n, d, d, &attn_out, false, &b.proj_w.data, false, 0.0, &mut proj);
            add_row_bias(&mut proj, &b.proj_b.data);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }

            let (h2, ln2) = layers::layer_norm(&x, d, &b.ln2_g.data, &b.ln2_b.data);
            let mut pre_act = vec![0.0; n * f];
            gemm(n, d, f, &h2, false, &b.ff1_w.data, false, 0.0, &mut pre_act);
            add_row_bias(&mut pre_act, &b.ff1_b.data);
            let mut act: Vec<f64> = pre_act.iter().map(|&u| layers::gelu(u)).collect();
            let drop_scale = match dropout {
                Dropout::On { seed } if c.dropout_rate > 0.0 => {
                    let mut rng = seed::rng(seed::derive_indexed(seed, "ffn", &[bi as u64]));
                    let keep_scale = 1.0 / (1.0 - c.dropout_rate);
                    let s: Vec<f64> = (0..act.len())
                        .map(|_| if rng.random_bool(c.dropout_rate) { 0.0 } else { keep_scale })
                        .collect();
                    for (a, m) in act.iter_mut().zip(&s) {
                        *a *= m;
                    }
                    Some(s)
                }
                _ => None,
            };
            let mut ff = vec![0.0; n * d];
            gemm(n, f, d, &act, false, &b.ff2_w.data, false, 0.0, &mut ff);
            add_row_bias(&mut ff, &b.ff2_b.data);
            for (xv, fv) in x.iter_mut().zip(&ff) {
                *xv += fv;
            }
            check_finite(&x, "encoder block", Some(bi))?;
            if record {
                block_traces.push(BlockTrace {
                    ln1,
                    h1,
                    qkv,
                    attn,
                    attn_out,
                    ln2,
                    h2,
                    pre_act,
                    act,
                    drop_scale,
                });
            }
        }
        let (features, norm) = layers::layer_norm(&x, d, &self.norm_g.data, &self.norm_b.data);
        let out_cols = c.patch_size * c.patch_size * c.num_classes;
        let mut head = vec![0.0; n * out_cols];
        gemm(n, d, out_cols, &features, false, &self.head_w.data, false, 0.0, &mut head);
        add_row_bias(&mut head, &self.head_b.data);
        check_finite(&head, "decoder", None)?;
        let logits = self.scatter_logits(&head);
        let output = SegOutput::from_logits(c.num_classes, c.image_height, c.image_width, logits);
        let trace = record.then(|| Trace {
            embed,
            blocks: block_traces,
            norm,
            features: features.clone(),
        });
        Ok(ForwardPass {
            output,
            features,
            trace,
        })
    }

    /// Token-major decoder output -> class-major pixel logits.
    fn scatter_logits(&self, head: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let (p, k, w) = (c.patch_size, c.num_classes, c.image_width);
        let hw = c.pixels();
        let cols = p * p * k;
        let mut logits = vec![0.0; k * hw];
        for (t, row) in head.chunks_exact(cols).enumerate() {
            let (r, col) = (t / c.grid_width(), t % c.grid_width());
            for py in 0..p {
                for px in 0..p {
                    let pix = (r * p + py) * w + col * p + px;
                    let base = (py * p + px) * k;
                    for kk in 0..k {
                        logits[kk * hw + pix] = row[base + kk];
                    }
                }
            }
        }
        logits
    }

    fn gather_logit_grads(&self, dlogits: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let (p, k, w) = (c.patch_size, c.num_classes, c.image_width);
        let hw = c.pixels();
        let cols = p * p * k;
        let mut dhead = vec![0.0; c.num_tokens() * cols];
        for (t, row) in dhead.chunks_exact_mut(cols).enumerate() {
            let (r, col) = (t / c.grid_width(), t % c.grid_width());
            for py in 0..p {
                for px in 0..p {
                    let pix = (r * p + py) * w + col * p + px;
                    let base = (py * p + px) * k;
                    for kk in 0..k {
                        row[base + kk] = dlogits[kk * hw + pix];
                    }
                }
            }
        }
        dhead
    }

    /// Reverse-mode pass: given `dL/dlogits` (class-major, like
    /// [`SegOutput::logits`]) accumulates `dL/dparam` into `grads`.
    ///
    /// Position and patch-embedding gradients are only produced for passes
    /// started from pixels via [`Self::forward_image`].
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64], grads: &mut ModelParams) -> Result<()> {
        let trace = pass
            .trace
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called on a forward pass that was not recorded".into()))?;
        let c = &self.config;
        if grads.config != *c {
            return Err(Error::Usage("gradient buffer belongs to a different architecture".into()));
        }
        if dlogits.len() != c.num_classes * c.pixels() {
            return Err(Error::Shape(format!(
                "logit gradient has {} values, expected {}",
                dlogits.len(),
                c.num_classes * c.pixels()
            )));
        }
        let (n, d, f) = (c.num_tokens(), c.dim, c.ffn_hidden);
        let out_cols = c.patch_size * c.patch_size * c.num_classes;

        let dhead = self.gather_logit_grads(dlogits);
        gemm(d, n, out_cols, &trace.features, true, &dhead, false, 1.0, &mut grads.head_w.data);
        accumulate_column_sums(&dhead, &mut grads.head_b.data);
        let mut dz = vec![0.0; n * d];
        gemm(n, out_cols, d, &dhead, false, &self.head_w.data, true, 0.0, &mut dz);
        let mut dx = layers::layer_norm_backward(
            &dz,
            d,
            &trace.norm,
            &self.norm_g.data,
            &mut grads.norm_g.data,
            &mut grads.norm_b.data,
        );

        for (bi, (b, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[bi];
            // feed-forward residual branch
            gemm(f, n, d, &bt.act, true, &dx, false, 1.0, &mut gb.ff2_w.data);
            accumulate_column_sums(&dx, &mut gb.ff2_b.data);
            let mut dact = vec![0.0; n * f];
            gemm(n, d, f, &dx, false, &b.ff2_w.data, true, 0.0, &mut dact);
            if let Some(s) = &bt.drop_scale {
                for (g, m) in dact.iter_mut().zip(s) {
                    *g *= m;
                }
            }
            for (g, &u) in dact.iter_mut().zip(&bt.pre_act) {
                *g *= layers::gelu_grad(u);
            }
            gemm(d, n, f, &bt.h2, true, &dact, false, 1.0, &mut gb.ff1_w.data);
            accumulate_column_sums(&dact, &mut gb.ff1_b.data);
            let mut dh2 = vec![0.0; n * d];
            gemm(n, f, d, &dact, false, &b.ff1_w.data, true, 0.0, &mut dh2);
            let dmid = layers::layer_norm_backward(&dh2, d, &bt.ln2, &b.ln2_g.data, &mut gb.ln2_g.data, &mut gb.ln2_b.data);
            for (x, m) in dx.iter_mut().zip(&dmid) {
                *x += m;
            }

            // attention residual branch
            gemm(d, n, d, &bt.attn_out, true, &dx, false, 1.0, &mut gb.proj_w.data);
            accumulate_column_sums(&dx, &mut gb.proj_b.data);
            let mut dattn = vec![0.0; n * d];
            gemm(n, d, d, &dx, false, &b.proj_w.data, true, 0.0, &mut dattn);
            let dqkv = layers::attention_backward(&dattn, &bt.qkv, &bt.attn, n, d, c.heads);
            gemm(d, n, 3 * d, &bt.h1, true, &dqkv, false, 1.0, &mut gb.qkv_w.data);
            accumulate_column_sums(&dqkv, &mut gb.qkv_b.data);
            let mut dh1 = vec![0.0; n * d];
            gemm(n, 3 * d, d, &dqkv, false, &b.qkv_w.data, true, 0.0, &mut dh1);
            let din = layers::layer_norm_backward(&dh1, d, &bt.ln1, &b.ln1_g.data, &mut gb.ln1_g.data, &mut gb.ln1_b.data);
            for (x, m) in dx.iter_mut().zip(&din) {
                *x += m;
            }
        }

        if let Some(embed) = &trace.embed {
            for (g, v) in grads.pos.data.iter_mut().zip(&dx) {
                *g += v;
            }
            if let Some(keep) = &embed.keep {
                for (row, &k) in dx.chunks_exact_mut(d).zip(keep) {
                    if !k {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            gemm(c.patch_dim(), n, d, &embed.patches, true, &dx, false, 1.0, &mut grads.patch_w.data);
            accumulate_column_sums(&dx, &mut grads.patch_b.data);
        }
        Ok(())
    }
}
