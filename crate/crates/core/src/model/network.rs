//! The early-fusion verifier: stacked X-ray/DRR channels → convolutional
//! backbone → channel split → bidirectional cross-attention → mean fusion →
//! dropout → fully connected logit.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionCache, CrossAttention};
use super::config::ModelConfig;
use super::layers::{
    gelu_backward, gelu_forward, maxpool_backward, maxpool_forward, BatchNorm2d, BatchNormCache,
    Conv2d, Linear, Params,
};
use crate::error::{invalid, Error, Result};
use crate::phantom::ImagePair;
use crate::pose::RegistrationLabel;

/// conv3x3 → GELU → conv3x3 → GELU → maxpool 2×2/2 → batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Array4<f64>,
    pre1: Array4<f64>,
    act1: Array4<f64>,
    pre2: Array4<f64>,
    pool_arg: Array4<u8>,
    bn: BatchNormCache,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(in_ch, out_ch, rng),
            conv2: Conv2d::new(out_ch, out_ch, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    /// Output before batchnorm, exposed for tests.
    pub fn forward_pre_norm(&self, x: &Array4<f64>) -> Array4<f64> {
        let a1 = gelu_forward(&self.conv1.forward(x));
        let a2 = gelu_forward(&self.conv2.forward(&a1));
        maxpool_forward(&a2).0
    }

    pub fn forward(&self, x: &Array4<f64>, training: bool) -> (Array4<f64>, BlockCache) {
        let pre1 = self.conv1.forward(x);
        let act1 = gelu_forward(&pre1);
        let pre2 = self.conv2.forward(&act1);
        let act2 = gelu_forward(&pre2);
        let (pooled, pool_arg) = maxpool_forward(&act2);
        drop(act2);
        let (y, bn) = self.bn.forward(&pooled, training);
        (
            y,
            BlockCache {
                input: x.clone(),
                pre1,
                act1,
                pre2,
                pool_arg,
                bn,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: &Array4<f64>,
        grad: &mut ConvBlock,
    ) -> Array4<f64> {
        let d_pooled = self.bn.backward(&cache.bn, dy, &mut grad.bn);
        let d_act2 = maxpool_backward(&d_pooled, &cache.pool_arg, cache.pre2.dim());
        let d_pre2 = gelu_backward(&cache.pre2, &d_act2);
        let d_act1 = self.conv2.backward(&cache.act1, &d_pre2, &mut grad.conv2);
        let d_pre1 = gelu_backward(&cache.pre1, &d_act1);
        self.conv1.backward(&cache.input, &d_pre1, &mut grad.conv1)
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.visit(prefix, f);
        f(
            &format!("{prefix}.bn.running_mean"),
            self.bn.running_mean.as_slice().unwrap(),
        );
        f(
            &format!("{prefix}.bn.running_var"),
            self.bn.running_var.as_slice().unwrap(),
        );
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_mut(prefix, f);
        f(
            &format!("{prefix}.bn.running_mean"),
            self.bn.running_mean.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.bn.running_var"),
            self.bn.running_var.as_slice_mut().unwrap(),
        );
    }
}

impl Params for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// Optional hidden layer followed by the single-logit output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Option<Linear>,
    pub out: Linear,
}

impl Params for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(h) = &self.hidden {
            h.visit(&format!("{prefix}.hidden"), f);
        }
        self.out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(h) = &mut self.hidden {
            h.visit_mut(&format!("{prefix}.hidden"), f);
        }
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// First half of the channels and second half.
pub fn split_channels(features: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
    let c = features.dim().1;
    if !c.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "cannot split {c} channels into halves"
        )));
    }
    Ok((
        features.slice(s![.., ..c / 2, .., ..]).to_owned(),
        features.slice(s![.., c / 2.., .., ..]).to_owned(),
    ))
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("branch shapes agree")
}

/// Elementwise mean of the two attended maps.
pub fn fuse(a: &Array4<f64>, b: &Array4<f64>) -> Result<Array4<f64>> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "cannot fuse maps of shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok((a + b) * 0.5)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits and its gradient per logit.
pub fn bce_with_logits(logits: &Array1<f64>, targets: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&z, &y)) in logits.iter().zip(targets.iter()).enumerate() {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - y) / n;
    }
    (loss / n, grad)
}

/// Whether the pass runs in training mode (batch statistics, dropout).
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    fn training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    /// Backbone output: the last convolutional block's feature map.
    pub features: Array4<f64>,
    pub attention: AttentionCache,
    pub flat_dropped: Array2<f64>,
    pub dropout_mask: Option<Array2<f64>>,
    pub hidden_pre: Option<Array2<f64>>,
    pub head_input: Array2<f64>,
}

/// Single-sample inference result.
#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub logit: f64,
    pub probability_accept: f64,
    pub predicted_label: RegistrationLabel,
    /// Last convolutional feature map `(channels, h, w)`.
    pub feature_map: Array3<f64>,
}

impl PredictionOutput {
    pub fn from_logit(logit: f64, feature_map: Array3<f64>) -> Self {
        let p = sigmoid(logit);
        Self {
            logit,
            probability_accept: p,
            predicted_label: RegistrationLabel::from_accept(p >= 0.5),
            feature_map,
        }
    }

    /// `(p_accept, p_reject)`.
    pub fn probabilities(&self) -> [f64; 2] {
        [self.probability_accept, 1.0 - self.probability_accept]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierModel {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    pub attention: CrossAttention,
    pub head: Head,
}

impl VerifierModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = config
            .block_channels()
            .into_iter()
            .map(|(i, o)| ConvBlock::new(i, o, &mut rng))
            .collect();
        let attention =
            CrossAttention::new(config.branch_channels(), config.attention_heads, &mut rng);
        let flat = config.flat_features();
        let head = match config.fc_hidden {
            Some(h) => Head {
                hidden: Some(Linear::new(flat, h, &mut rng)),
                out: Linear::new(h, 1, &mut rng),
            },
            None => Head {
                hidden: None,
                out: Linear::new(flat, 1, &mut rng),
            },
        };
        Ok(Self {
            config,
            blocks,
            attention,
            head,
        })
    }

    /// Same structure with every value zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_state_mut(&mut |_, v| v.fill(0.0));
        z
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_state(&block_name(i), f);
        }
        self.attention.visit("attention", f);
        self.head.visit("head", f);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_state_mut(&block_name(i), f);
        }
        self.attention.visit_mut("attention", f);
        self.head.visit_mut("head", f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_state(&mut |_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Stacks pairs into a `(n, 2, H, W)` batch after checking dimensions.
    pub fn batch_input(&self, pairs: &[&ImagePair]) -> Result<Array4<f64>> {
        let s = self.config.input_size;
        let mut x = Array4::<f64>::zeros((pairs.len(), 2, s, s));
        for (i, p) in pairs.iter().enumerate() {
            if p.dims() != (s, s) || p.drr.dim() != (s, s) {
                return Err(invalid(format!(
                    "image pair is {:?}, model expects {s}x{s}",
                    p.dims()
                )));
            }
            x.slice_mut(s![i, 0, .., ..])
                .assign(&p.xray.mapv(f64::from));
            x.slice_mut(s![i, 1, .., ..]).assign(&p.drr.mapv(f64::from));
        }
        Ok(x)
    }

    /// Backbone only: returns the last convolutional map.
    pub fn backbone(&self, x: &Array4<f64>, training: bool) -> (Array4<f64>, Vec<BlockCache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, training);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    /// Everything after the backbone, returning logits.
    pub fn head_forward(
        &self,
        features: &Array4<f64>,
        mode: &mut Mode<'_>,
    ) -> Result<(Array1<f64>, HeadCache)> {
        let (fa, fb) = split_channels(features)?;
        let (aa, ab, attention) = self.attention.forward(&fa, &fb);
        let fused = fuse(&aa, &ab)?;
        let n = fused.dim().0;
        let flat = fused
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.config.flat_features()))
            .map_err(|e| invalid(e.to_string()))?;
        let p = self.config.dropout_rate;
        let dropout_mask = match mode {
            Mode::Train { rng } if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(Array2::from_shape_fn(flat.raw_dim(), |_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        };
        let dropped = match &dropout_mask {
            Some(m) => &flat * m,
            None => flat.clone(),
        };
        let (hidden_pre, head_input) = match &self.head.hidden {
            Some(hl) => {
                let pre = hl.forward(&dropped);
                let act = gelu_forward(&pre);
                (Some(pre), act)
            }
            None => (None, dropped.clone()),
        };
        let logits = self.head.out.forward(&head_input).column(0).to_owned();
        Ok((
            logits,
            HeadCache {
                attention,
                flat_dropped: dropped,
                dropout_mask,
                hidden_pre,
                head_input,
            },
        ))
    }

    /// Full forward pass on a batch.
    pub fn forward_batch(
        &self,
        x: &Array4<f64>,
        mut mode: Mode<'_>,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        let s = self.config.input_size;
        if x.dim().1 != 2 || x.dim().2 != s || x.dim().3 != s {
            return Err(invalid(format!(
                "input batch {:?} does not match {s}x{s}x2",
                x.dim()
            )));
        }
        let (features, blocks) = self.backbone(x, mode.training());
        let (logits, hc) = self.head_forward(&features, &mut mode)?;
        Ok((
            logits,
            ForwardCache {
                blocks,
                features,
                attention: hc.attention,
                flat_dropped: hc.flat_dropped,
                dropout_mask: hc.dropout_mask,
                hidden_pre: hc.hidden_pre,
                head_input: hc.head_input,
            },
        ))
    }

    /// Backpropagates `d_logits` through the head, returning the gradient
    /// with respect to the backbone output.
    pub fn head_backward(
        &self,
        cache: &HeadCacheRef<'_>,
        d_logits: &Array1<f64>,
        grad: &mut VerifierModel,
    ) -> Array4<f64> {
        let dy = d_logits.clone().insert_axis(Axis(1));
        let d_head_in = self
            .head
            .out
            .backward(cache.head_input, &dy, &mut grad.head.out);
        let d_dropped = match (&self.head.hidden, cache.hidden_pre) {
            (Some(hl), Some(pre)) => {
                let d_pre = gelu_backward(pre, &d_head_in);
                hl.backward(
                    cache.flat_dropped,
                    &d_pre,
                    grad.head.hidden.as_mut().expect("same structure"),
                )
            }
            _ => d_head_in,
        };
        let d_flat = match cache.dropout_mask {
            Some(m) => d_dropped * m,
            None => d_dropped,
        };
        let (n, d, h, w) = cache.attention.dims;
        let d_fused = d_flat
            .into_shape_with_order((n, d, h, w))
            .expect("flat layout");
        let half = &d_fused * 0.5;
        let (dfa, dfb) =
            self.attention
                .backward(cache.attention, &half, &half, &mut grad.attention);
        concat_channels(&dfa, &dfb)
    }

    /// Accumulates all parameter gradients for `d_logits` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array1<f64>, grad: &mut VerifierModel) {
        let mut d = self.head_backward(&cache.head_ref(), d_logits, grad);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            d = b.backward(&cache.blocks[i], &d, &mut grad.blocks[i]);
        }
    }

    /// Folds batch statistics from a training pass into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            let (n, _, h, w) = c.bn.x_hat.dim();
            b.bn.update_running(&c.bn, n * h * w);
        }
    }

    /// Inference on one pair.
    pub fn forward(&self, pair: &ImagePair) -> Result<PredictionOutput> {
        pair.validate()?;
        let x = self.batch_input(&[pair])?;
        let (logits, cache) = self.forward_batch(&x, Mode::Eval)?;
        Ok(PredictionOutput::from_logit(
            logits[0],
            cache.features.index_axis(Axis(0), 0).to_owned(),
        ))
    }

    /// Inference logits for many pairs, `chunk` at a time.
    pub fn predict_logits(&self, pairs: &[&ImagePair], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for part in pairs.chunks(chunk.max(1)) {
            let x = self.batch_input(part)?;
            let (logits, _) = self.forward_batch(&x, Mode::Eval)?;
            out.extend(logits.iter());
        }
        Ok(out)
    }
}

fn block_name(i: usize) -> String {
    if i == 0 {
        "stem".into()
    } else {
        format!("block{i}")
    }
}

impl Params for VerifierModel {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&block_name(i), f);
        }
        self.attention.visit("attention", f);
        self.head.visit("head", f);
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&block_name(i), f);
        }
        self.attention.visit_mut("attention", f);
        self.head.visit_mut("head", f);
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub attention: AttentionCache,
    pub flat_dropped: Array2<f64>,
    pub dropout_mask: Option<Array2<f64>>,
    pub hidden_pre: Option<Array2<f64>>,
    pub head_input: Array2<f64>,
}

/// Borrowed view over the head part of a forward cache.
pub struct HeadCacheRef<'a> {
    pub attention: &'a AttentionCache,
    pub flat_dropped: &'a Array2<f64>,
    pub dropout_mask: Option<&'a Array2<f64>>,
    pub hidden_pre: Option<&'a Array2<f64>>,
    pub head_input: &'a Array2<f64>,
}

impl HeadCache {
    pub fn as_ref(&self) -> HeadCacheRef<'_> {
        HeadCacheRef {
            attention: &self.attention,
            flat_dropped: &self.flat_dropped,
            dropout_mask: self.dropout_mask.as_ref(),
            hidden_pre: self.hidden_pre.as_ref(),
            head_input: &self.head_input,
        }
    }
}

impl ForwardCache {
    pub fn head_ref(&self) -> HeadCacheRef<'_> {
        HeadCacheRef {
            attention: &self.attention,
            flat_dropped: &self.flat_dropped,
            dropout_mask: self.dropout_mask.as_ref(),
            hidden_pre: self.hidden_pre.as_ref(),
            head_input: &self.head_input,
        }
    }
}
