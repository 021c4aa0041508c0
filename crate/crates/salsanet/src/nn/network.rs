//! The SalsaNet encoder-decoder segmentation network.
//!
//! Encoder: five ResNet blocks at 32, 64, 128, 256 and 256 channels; each
//! block except the last is followed by dropout and 2x2 max pooling, for a
//! total downsampling factor of 16. Decoder: four stages of 2x upsampling
//! via transposed convolution, element-wise addition of the matching
//! encoder block output (taken before dropout), and two conv3x3 +
//! batch-norm + leaky-ReLU layers. Head: a 1x1 convolution to the class
//! logits at full input resolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{
    self, BatchNormParams, BnCache, DropoutMask, Mode, PoolCache, LEAKY_SLOPE,
};
use super::tensor::Tensor;
use super::NnError;

/// Encoder ResNet block output channels, stage by stage.
pub const ENCODER_CHANNELS: [usize; 5] = [32, 64, 128, 256, 256];
/// Decoder deconvolution output channels, stage by stage.
pub const DECODER_CHANNELS: [usize; 4] = [256, 128, 64, 32];
/// Spatial downsampling factor between input and bottleneck.
pub const DOWNSAMPLE_FACTOR: usize = 16;

/// Hyperparameters fixed at network construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Input channels: 4 for BEV grids, 6 for SFV grids.
    pub in_channels: usize,
    /// Output classes (3: background, road, vehicle).
    pub num_classes: usize,
    /// Dropout probability applied after encoder blocks 1-4 in training.
    pub dropout_p: f32,
}

impl NetworkConfig {
    /// Configuration for 4-channel bird-eye-view input.
    pub fn bev() -> NetworkConfig {
        NetworkConfig {
            in_channels: 4,
            num_classes: 3,
            dropout_p: 0.5,
        }
    }

    /// Configuration for 6-channel spherical-front-view input.
    pub fn sfv() -> NetworkConfig {
        NetworkConfig {
            in_channels: 6,
            num_classes: 3,
            dropout_p: 0.5,
        }
    }
}

/// A convolution's learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnParams {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

/// One residual block: two 3x3 conv+bn stages and a shortcut that is the
/// identity when channel counts match, else a 1x1 conv+bn projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub main1: ConvBnParams,
    pub main2: ConvBnParams,
    pub shortcut: Option<ConvBnParams>,
}

impl BlockParams {
    /// Builds one residual block with fan-in-scaled Gaussian weights.
    /// A 1x1 conv + batch-norm shortcut is added only when the channel
    /// count changes; otherwise the shortcut is the identity.
    pub fn init<R: Rng>(c_out: usize, c_in: usize, rng: &mut R) -> BlockParams {
        BlockParams {
            main1: conv_bn(c_out, c_in, 3, 3, rng),
            main2: conv_bn(c_out, c_out, 3, 3, rng),
            shortcut: if c_in == c_out {
                None
            } else {
                Some(conv_bn(c_out, c_in, 1, 1, rng))
            },
        }
    }

    /// Training-mode forward pass; updates batch-norm running stats and
    /// returns the activations plus the state `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BlockCache), NnError> {
        block_forward_train(self, x)
    }

    /// Inference-mode forward pass using batch-norm running statistics.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        block_forward_infer(self, x)
    }

    /// Backpropagates through the block, returning the input gradient
    /// and the parameter gradients.
    pub fn backward(
        &self,
        cache: &BlockCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, BlockGrads), NnError> {
        block_backward(self, cache, grad_out)
    }
}

/// One decoder stage: transposed conv (kernel 2, stride 2, no bias), skip
/// addition, then two conv+bn+leaky-ReLU layers.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// Deconvolution weight, laid out [in_channels, out_channels, 2, 2].
    pub deconv: Tensor,
    pub conv1: ConvBnParams,
    pub conv2: ConvBnParams,
}

/// All parameters and running statistics of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub encoder: Vec<BlockParams>,
    pub decoder: Vec<StageParams>,
    pub head: ConvParams,
}

/// Gradients of a convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of a conv+bn stage (running statistics have no gradient).
#[derive(Clone, Debug)]
pub struct ConvBnGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Gradients of a residual block.
#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub main1: ConvBnGrads,
    pub main2: ConvBnGrads,
    pub shortcut: Option<ConvBnGrads>,
}

/// Gradients of a decoder stage.
#[derive(Clone, Debug)]
pub struct StageGrads {
    pub deconv: Tensor,
    pub conv1: ConvBnGrads,
    pub conv2: ConvBnGrads,
}

/// Gradients for every trainable tensor, mirroring [`Network`].
#[derive(Clone, Debug)]
pub struct NetworkGrads {
    pub encoder: Vec<BlockGrads>,
    pub decoder: Vec<StageGrads>,
    pub head: ConvGrads,
}

// ---------------------------------------------------------------------------
// Forward/backward caches

struct CbaCache {
    x: Tensor,
    conv_out: Tensor,
    bn_out: Tensor,
    bn: BnCache,
}

struct CbCache {
    x: Tensor,
    conv_out: Tensor,
    bn: BnCache,
}

/// Opaque forward-pass state of one residual block, consumed by
/// [`BlockParams::backward`].
pub struct BlockCache {
    cba1: CbaCache,
    cb2: CbCache,
    shortcut: Option<CbCache>,
    sum: Tensor,
}

struct EncPostCache {
    dropout: Option<DropoutMask>,
    pool: PoolCache,
}

struct EncCache {
    block: BlockCache,
    post: Option<EncPostCache>,
}

struct DecCache {
    x: Tensor,
    up_dims: Vec<usize>,
    skip_dims: Vec<usize>,
    cba1: CbaCache,
    cba2: CbaCache,
}

/// Everything a training-mode forward pass saves for the backward pass.
pub struct TrainCache {
    enc: Vec<EncCache>,
    dec: Vec<DecCache>,
    head_in: Tensor,
}

impl TrainCache {
    /// Dims of the bottleneck activation (last encoder block output).
    pub fn bottleneck_dims(&self) -> &[usize] {
        self.enc[4].block.sum.dims()
    }

    /// Per decoder stage, the (upsampled, skip) tensor dims that were
    /// added element-wise.
    pub fn skip_addition_dims(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.dec
            .iter()
            .map(|d| (d.up_dims.clone(), d.skip_dims.clone()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Construction

fn he_weight<R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let sigma = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, sigma).expect("sigma > 0");
    let data = (0..dims.iter().product::<usize>())
        .map(|_| dist.sample(rng) as f32)
        .collect();
    Tensor::from_vec(dims, data).expect("sized to dims")
}

fn conv_params<R: Rng>(k: usize, c: usize, kh: usize, kw: usize, rng: &mut R) -> ConvParams {
    ConvParams {
        weight: he_weight(&[k, c, kh, kw], c * kh * kw, rng),
        bias: Tensor::zeros(&[k]),
    }
}

fn conv_bn<R: Rng>(k: usize, c: usize, kh: usize, kw: usize, rng: &mut R) -> ConvBnParams {
    ConvBnParams {
        conv: conv_params(k, c, kh, kw, rng),
        bn: BatchNormParams::new(k),
    }
}

impl Network {
    /// Builds the network with fan-in-scaled Gaussian weights, zero biases
    /// and fresh batch-norm parameters. The same seed yields bit-identical
    /// parameters.
    pub fn build(config: NetworkConfig, seed: u64) -> Network {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(5);
        let mut c_in = config.in_channels;
        for &c_out in &ENCODER_CHANNELS {
            encoder.push(BlockParams::init(c_out, c_in, &mut rng));
            c_in = c_out;
        }
        let mut decoder = Vec::with_capacity(4);
        for (i, &c_out) in DECODER_CHANNELS.iter().enumerate() {
            let c_dec_in = if i == 0 {
                ENCODER_CHANNELS[4]
            } else {
                DECODER_CHANNELS[i - 1]
            };
            // True fan-in of a kernel-2 stride-2 deconv: each output
            // element receives one contribution per input channel.
            let deconv = he_weight(&[c_dec_in, c_out, 2, 2], c_dec_in, &mut rng);
            let conv1 = conv_bn(c_out, c_out, 3, 3, &mut rng);
            let conv2 = conv_bn(c_out, c_out, 3, 3, &mut rng);
            decoder.push(StageParams {
                deconv,
                conv1,
                conv2,
            });
        }
        let head = conv_params(config.num_classes, DECODER_CHANNELS[3], 1, 1, &mut rng);
        Network {
            config,
            encoder,
            decoder,
            head,
        }
    }

    /// Total number of trainable parameter values.
    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Per decoder stage, (deconv output channels, encoder skip channels).
    pub fn skip_channel_pairs(&self) -> Vec<(usize, usize)> {
        DECODER_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, ENCODER_CHANNELS[3 - i]))
            .collect()
    }

    fn check_input(&self, batch: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
        let (n, c, h, w) = batch.dims4()?;
        if c != self.config.in_channels {
            return Err(NnError::Shape(format!(
                "batch has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 || h == 0 || w == 0 {
            return Err(NnError::Shape(format!(
                "spatial dims {h}x{w} must be positive multiples of {DOWNSAMPLE_FACTOR}"
            )));
        }
        Ok((n, c, h, w))
    }

    /// Training-mode forward pass: returns the logits and the cache the
    /// backward pass consumes. Updates batch-norm running statistics and
    /// draws dropout masks from `rng`.
    pub fn forward_train<R: Rng>(
        &mut self,
        batch: &Tensor,
        rng: &mut R,
    ) -> Result<(Tensor, TrainCache), NnError> {
        self.check_input(batch)?;
        let p = self.config.dropout_p;
        let mut enc_caches = Vec::with_capacity(5);
        let mut skips: Vec<Tensor> = Vec::with_capacity(4);
        let mut x = batch.clone();
        for i in 0..5 {
            let (out, cache) = block_forward_train(&mut self.encoder[i], &x)?;
            if i < 4 {
                skips.push(out.clone());
                let (dropped, mask) = ops::dropout(&out, p, rng, Mode::Train)?;
                let (pooled, pool) = ops::max_pool2(&dropped)?;
                enc_caches.push(EncCache {
                    block: cache,
                    post: Some(EncPostCache {
                        dropout: mask,
                        pool,
                    }),
                });
                x = pooled;
            } else {
                enc_caches.push(EncCache {
                    block: cache,
                    post: None,
                });
                x = out;
            }
        }
        let mut dec_caches = Vec::with_capacity(4);
        for i in 0..4 {
            let stage = &mut self.decoder[i];
            let up = ops::transposed_conv2d(&x, &stage.deconv)?;
            let skip = &skips[3 - i];
            if up.dims() != skip.dims() {
                return Err(NnError::Shape(format!(
                    "skip addition: {:?} vs {:?}",
                    up.dims(),
                    skip.dims()
                )));
            }
            let mut sum = up.clone();
            sum.add_assign(skip)?;
            let (a1, cba1) = cba_forward_train(&mut stage.conv1, &sum, 1, 1)?;
            let (a2, cba2) = cba_forward_train(&mut stage.conv2, &a1, 1, 1)?;
            dec_caches.push(DecCache {
                x,
                up_dims: up.dims().to_vec(),
                skip_dims: skip.dims().to_vec(),
                cba1,
                cba2,
            });
            x = a2;
        }
        let logits = ops::conv2d(&x, &self.head.weight, &self.head.bias, 1, 0)?;
        Ok((
            logits,
            TrainCache {
                enc: enc_caches,
                dec: dec_caches,
                head_in: x,
            },
        ))
    }

    /// Inference-mode forward pass: pure function of (self, batch) — no
    /// dropout, batch norm uses running statistics, nothing is mutated.
    pub fn forward_infer(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut skips: Vec<Tensor> = Vec::with_capacity(4);
        for i in 0..5 {
            let out = block_forward_infer(&self.encoder[i], &x)?;
            if i < 4 {
                skips.push(out.clone());
                let (pooled, _) = ops::max_pool2(&out)?;
                x = pooled;
            } else {
                x = out;
            }
        }
        for i in 0..4 {
            let stage = &self.decoder[i];
            let up = ops::transposed_conv2d(&x, &stage.deconv)?;
            let skip = &skips[3 - i];
            if up.dims() != skip.dims() {
                return Err(NnError::Shape(format!(
                    "skip addition: {:?} vs {:?}",
                    up.dims(),
                    skip.dims()
                )));
            }
            let mut sum = up;
            sum.add_assign(skip)?;
            let a1 = cba_forward_infer(&stage.conv1, &sum, 1, 1)?;
            let a2 = cba_forward_infer(&stage.conv2, &a1, 1, 1)?;
            x = a2;
        }
        ops::conv2d(&x, &self.head.weight, &self.head.bias, 1, 0)
    }

    /// Backward pass through the whole network. `grad_logits` is the loss
    /// gradient at the logits of the matching [`forward_train`] call.
    pub fn backward(
        &self,
        cache: &TrainCache,
        grad_logits: &Tensor,
    ) -> Result<NetworkGrads, NnError> {
        // Head.
        let (mut g, head_w, head_b) =
            ops::conv2d_backward(grad_logits, &cache.head_in, &self.head.weight, 1, 0)?;
        let head = ConvGrads {
            weight: head_w,
            bias: head_b,
        };
        // Decoder, last stage first. Skip gradients are stashed for the
        // encoder unwind.
        let mut dec_grads: Vec<StageGrads> = Vec::with_capacity(4);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None, None, None, None];
        for i in (0..4).rev() {
            let stage = &self.decoder[i];
            let dc = &cache.dec[i];
            let (g_a1, conv2) = cba_backward(&stage.conv2, &dc.cba2, &g, 1, 1)?;
            let (g_sum, conv1) = cba_backward(&stage.conv1, &dc.cba1, &g_a1, 1, 1)?;
            // sum = up + skip: the gradient flows unchanged into both.
            skip_grads[3 - i] = Some(g_sum.clone());
            let (g_x, deconv) = ops::transposed_conv2d_backward(&g_sum, &dc.x, &stage.deconv)?;
            dec_grads.push(StageGrads {
                deconv,
                conv1,
                conv2,
            });
            g = g_x;
        }
        dec_grads.reverse();
        // Encoder, last block first.
        let mut enc_grads: Vec<BlockGrads> = Vec::with_capacity(5);
        for i in (0..5).rev() {
            let ec = &cache.enc[i];
            if let Some(post) = &ec.post {
                let g_dropped = ops::max_pool2_backward(&g, &post.pool)?;
                let mut g_out = match &post.dropout {
                    Some(mask) => ops::dropout_backward(&g_dropped, mask)?,
                    None => g_dropped,
                };
                let g_skip = skip_grads[i].take().expect("skip gradient saved");
                g_out.add_assign(&g_skip)?;
                let (g_x, bg) = block_backward(&self.encoder[i], &ec.block, &g_out)?;
                enc_grads.push(bg);
                g = g_x;
            } else {
                let (g_x, bg) = block_backward(&self.encoder[i], &ec.block, &g)?;
                enc_grads.push(bg);
                g = g_x;
            }
        }
        enc_grads.reverse();
        Ok(NetworkGrads {
            encoder: enc_grads,
            decoder: dec_grads,
            head,
        })
    }

    /// Trainable tensors in canonical order, paired with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            let p = format!("enc{}", i + 1);
            push_conv_bn(&mut out, &format!("{p}.main1"), &b.main1);
            push_conv_bn(&mut out, &format!("{p}.main2"), &b.main2);
            if let Some(s) = &b.shortcut {
                push_conv_bn(&mut out, &format!("{p}.shortcut"), s);
            }
        }
        for (i, s) in self.decoder.iter().enumerate() {
            let p = format!("dec{}", i + 1);
            out.push((format!("{p}.deconv.weight"), &s.deconv));
            push_conv_bn(&mut out, &format!("{p}.conv1"), &s.conv1);
            push_conv_bn(&mut out, &format!("{p}.conv2"), &s.conv2);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable view of the trainable tensors, same order and names as
    /// [`trainable`](Self::trainable).
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = format!("enc{}", i + 1);
            push_conv_bn_mut(&mut out, &format!("{p}.main1"), &mut b.main1);
            push_conv_bn_mut(&mut out, &format!("{p}.main2"), &mut b.main2);
            if let Some(s) = &mut b.shortcut {
                push_conv_bn_mut(&mut out, &format!("{p}.shortcut"), s);
            }
        }
        for (i, s) in self.decoder.iter_mut().enumerate() {
            let p = format!("dec{}", i + 1);
            out.push((format!("{p}.deconv.weight"), &mut s.deconv));
            push_conv_bn_mut(&mut out, &format!("{p}.conv1"), &mut s.conv1);
            push_conv_bn_mut(&mut out, &format!("{p}.conv2"), &mut s.conv2);
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Batch-norm running statistics (checkpointed but not trained),
    /// canonical order.
    pub fn running_stats(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            let p = format!("enc{}", i + 1);
            push_running(&mut out, &format!("{p}.main1"), &b.main1.bn);
            push_running(&mut out, &format!("{p}.main2"), &b.main2.bn);
            if let Some(s) = &b.shortcut {
                push_running(&mut out, &format!("{p}.shortcut"), &s.bn);
            }
        }
        for (i, s) in self.decoder.iter().enumerate() {
            let p = format!("dec{}", i + 1);
            push_running(&mut out, &format!("{p}.conv1"), &s.conv1.bn);
            push_running(&mut out, &format!("{p}.conv2"), &s.conv2.bn);
        }
        out
    }

    /// Mutable view of the running statistics, same order as
    /// [`running_stats`](Self::running_stats).
    pub fn running_stats_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = format!("enc{}", i + 1);
            push_running_mut(&mut out, &format!("{p}.main1"), &mut b.main1.bn);
            push_running_mut(&mut out, &format!("{p}.main2"), &mut b.main2.bn);
            if let Some(s) = &mut b.shortcut {
                push_running_mut(&mut out, &format!("{p}.shortcut"), &mut s.bn);
            }
        }
        for (i, s) in self.decoder.iter_mut().enumerate() {
            let p = format!("dec{}", i + 1);
            push_running_mut(&mut out, &format!("{p}.conv1"), &mut s.conv1.bn);
            push_running_mut(&mut out, &format!("{p}.conv2"), &mut s.conv2.bn);
        }
        out
    }
}

impl NetworkGrads {
    /// Gradient tensors in the same order and under the same names as
    /// [`Network::trainable`].
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            let p = format!("enc{}", i + 1);
            push_conv_bn_grads(&mut out, &format!("{p}.main1"), &b.main1);
            push_conv_bn_grads(&mut out, &format!("{p}.main2"), &b.main2);
            if let Some(s) = &b.shortcut {
                push_conv_bn_grads(&mut out, &format!("{p}.shortcut"), s);
            }
        }
        for (i, s) in self.decoder.iter().enumerate() {
            let p = format!("dec{}", i + 1);
            out.push((format!("{p}.deconv.weight"), &s.deconv));
            push_conv_bn_grads(&mut out, &format!("{p}.conv1"), &s.conv1);
            push_conv_bn_grads(&mut out, &format!("{p}.conv2"), &s.conv2);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }
}

fn push_conv_bn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a ConvBnParams) {
    out.push((format!("{prefix}.weight"), &p.conv.weight));
    out.push((format!("{prefix}.bias"), &p.conv.bias));
    out.push((format!("{prefix}.gamma"), &p.bn.gamma));
    out.push((format!("{prefix}.beta"), &p.bn.beta));
}

fn push_conv_bn_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    p: &'a mut ConvBnParams,
) {
    out.push((format!("{prefix}.weight"), &mut p.conv.weight));
    out.push((format!("{prefix}.bias"), &mut p.conv.bias));
    out.push((format!("{prefix}.gamma"), &mut p.bn.gamma));
    out.push((format!("{prefix}.beta"), &mut p.bn.beta));
}

fn push_conv_bn_grads<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, g: &'a ConvBnGrads) {
    out.push((format!("{prefix}.weight"), &g.weight));
    out.push((format!("{prefix}.bias"), &g.bias));
    out.push((format!("{prefix}.gamma"), &g.gamma));
    out.push((format!("{prefix}.beta"), &g.beta));
}

fn push_running<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, bn: &'a BatchNormParams) {
    out.push((format!("{prefix}.running_mean"), &bn.running_mean));
    out.push((format!("{prefix}.running_var"), &bn.running_var));
}

fn push_running_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    bn: &'a mut BatchNormParams,
) {
    out.push((format!("{prefix}.running_mean"), &mut bn.running_mean));
    out.push((format!("{prefix}.running_var"), &mut bn.running_var));
}

// ---------------------------------------------------------------------------
// Layer-stack helpers

fn cba_forward_train(
    p: &mut ConvBnParams,
    x: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, CbaCache), NnError> {
    let conv_out = ops::conv2d(x, &p.conv.weight, &p.conv.bias, stride, pad)?;
    let (bn_out, bn) = ops::batch_norm(&conv_out, &mut p.bn, Mode::Train, ops::BN_MOMENTUM)?;
    let act = ops::leaky_relu(&bn_out, LEAKY_SLOPE);
    Ok((
        act,
        CbaCache {
            x: x.clone(),
            conv_out,
            bn_out,
            bn: bn.expect("train mode caches"),
        },
    ))
}

fn cba_forward_infer(
    p: &ConvBnParams,
    x: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NnError> {
    let conv_out = ops::conv2d(x, &p.conv.weight, &p.conv.bias, stride, pad)?;
    let bn_out = ops::batch_norm_infer(&conv_out, &p.bn)?;
    Ok(ops::leaky_relu(&bn_out, LEAKY_SLOPE))
}

fn cba_backward(
    p: &ConvBnParams,
    cache: &CbaCache,
    grad_act: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvBnGrads), NnError> {
    let g_bn_out = ops::leaky_relu_backward(grad_act, &cache.bn_out, LEAKY_SLOPE)?;
    let (g_conv_out, gamma, beta) =
        ops::batch_norm_backward(&g_bn_out, &cache.conv_out, &p.bn.gamma, &cache.bn)?;
    let (g_x, weight, bias) =
        ops::conv2d_backward(&g_conv_out, &cache.x, &p.conv.weight, stride, pad)?;
    Ok((
        g_x,
        ConvBnGrads {
            weight,
            bias,
            gamma,
            beta,
        },
    ))
}

fn cb_forward_train(
    p: &mut ConvBnParams,
    x: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, CbCache), NnError> {
    let conv_out = ops::conv2d(x, &p.conv.weight, &p.conv.bias, stride, pad)?;
    let (bn_out, bn) = ops::batch_norm(&conv_out, &mut p.bn, Mode::Train, ops::BN_MOMENTUM)?;
    Ok((
        bn_out,
        CbCache {
            x: x.clone(),
            conv_out,
            bn: bn.expect("train mode caches"),
        },
    ))
}

fn cb_forward_infer(
    p: &ConvBnParams,
    x: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NnError> {
    let conv_out = ops::conv2d(x, &p.conv.weight, &p.conv.bias, stride, pad)?;
    ops::batch_norm_infer(&conv_out, &p.bn)
}

fn cb_backward(
    p: &ConvBnParams,
    cache: &CbCache,
    grad_bn_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvBnGrads), NnError> {
    let (g_conv_out, gamma, beta) =
        ops::batch_norm_backward(grad_bn_out, &cache.conv_out, &p.bn.gamma, &cache.bn)?;
    let (g_x, weight, bias) =
        ops::conv2d_backward(&g_conv_out, &cache.x, &p.conv.weight, stride, pad)?;
    Ok((
        g_x,
        ConvBnGrads {
            weight,
            bias,
            gamma,
            beta,
        },
    ))
}

/// conv-bn-lrelu, conv-bn, plus shortcut; addition before the final
/// activation.
fn block_forward_train(
    p: &mut BlockParams,
    x: &Tensor,
) -> Result<(Tensor, BlockCache), NnError> {
    let (a1, cba1) = cba_forward_train(&mut p.main1, x, 1, 1)?;
    let (bn2_out, cb2) = cb_forward_train(&mut p.main2, &a1, 1, 1)?;
    let (sc_out, sc_cache) = match &mut p.shortcut {
        None => (x.clone(), None),
        Some(s) => {
            let (o, c) = cb_forward_train(s, x, 1, 0)?;
            (o, Some(c))
        }
    };
    let mut sum = bn2_out;
    sum.add_assign(&sc_out)?;
    let out = ops::leaky_relu(&sum, LEAKY_SLOPE);
    Ok((
        out,
        BlockCache {
            cba1,
            cb2,
            shortcut: sc_cache,
            sum,
        },
    ))
}

fn block_forward_infer(p: &BlockParams, x: &Tensor) -> Result<Tensor, NnError> {
    let a1 = cba_forward_infer(&p.main1, x, 1, 1)?;
    let bn2_out = cb_forward_infer(&p.main2, &a1, 1, 1)?;
    let sc_out = match &p.shortcut {
        None => x.clone(),
        Some(s) => cb_forward_infer(s, x, 1, 0)?,
    };
    let mut sum = bn2_out;
    sum.add_assign(&sc_out)?;
    Ok(ops::leaky_relu(&sum, LEAKY_SLOPE))
}

fn block_backward(
    p: &BlockParams,
    cache: &BlockCache,
    grad_out: &Tensor,
) -> Result<(Tensor, BlockGrads), NnError> {
    let g_sum = ops::leaky_relu_backward(grad_out, &cache.sum, LEAKY_SLOPE)?;
    // Main path.
    let (g_a1, main2) = cb_backward(&p.main2, &cache.cb2, &g_sum, 1, 1)?;
    let (mut g_x, main1) = cba_backward(&p.main1, &cache.cba1, &g_a1, 1, 1)?;
    // Shortcut path.
    let shortcut = match (&p.shortcut, &cache.shortcut) {
        (Some(s), Some(sc)) => {
            let (g_sc, grads) = cb_backward(s, sc, &g_sum, 1, 0)?;
            g_x.add_assign(&g_sc)?;
            Some(grads)
        }
        (None, None) => {
            g_x.add_assign(&g_sum)?;
            None
        }
        _ => {
            return Err(NnError::Shape(
                "block cache does not match parameters".into(),
            ))
        }
    };
    Ok((
        g_x,
        BlockGrads {
            main1,
            main2,
            shortcut,
        },
    ))
}
