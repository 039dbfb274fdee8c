//! Network construction and forward passes on the tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::hollow::{hollow_sigma, init_hollow_kernel, HollowMask};
use crate::optim::{Binding, ParamId, ParamSet};
use crate::tensor::{BatchNormState, ConvGeom, Element, Tape, Tensor, Var};

use super::{KernelKind, LayerSpec, NetworkConfig};

#[derive(Clone)]
enum WeightRef {
    Param(ParamId),
    /// Kernels arrive per image from the generator network.
    Generated,
}

#[derive(Clone)]
struct BnRef {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Clone)]
struct ConvUnit {
    w: WeightRef,
    bias: ParamId,
    geom: ConvGeom,
    bn: Option<BnRef>,
    prelu: Option<ParamId>,
}

#[derive(Clone)]
struct DecoderLevel {
    up_conv: ConvUnit,
    post1: ConvUnit,
    post2: ConvUnit,
}

#[derive(Clone)]
struct TinyNet {
    input_size: usize,
    enc1: ConvUnit,
    enc2: ConvUnit,
    up: ConvUnit,
    fuse: ConvUnit,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone)]
struct TemporalUnit {
    weights: Vec<(ParamId, ParamId)>,
    mid_bn: Option<BnRef>,
    mid_prelu: Option<ParamId>,
    pad: (usize, usize, usize),
}

#[derive(Clone)]
struct LstmDirection {
    gates_w: ParamId,
    gates_b: ParamId,
    proj_w: ParamId,
}

#[derive(Clone)]
struct BiLstmLayer {
    fwd: LstmDirection,
    bwd: LstmDirection,
    hidden: usize,
}

/// A built network: parameters plus the recipe to run them on a tape.
#[derive(Clone)]
pub struct Network<E: Element> {
    pub config: NetworkConfig,
    pub params: ParamSet<E>,
    pub masks: Vec<(String, Arc<HollowMask>)>,
    encoder: Vec<ConvUnit>,
    bottleneck: (ConvUnit, ConvUnit),
    decoder: Vec<DecoderLevel>,
    head_w: ParamId,
    head_b: ParamId,
    tiny: Option<TinyNet>,
    /// Learnable per-kernel mixing logits for the L3 composite loss.
    pub a1_logits: Option<ParamId>,
    temporal: Option<TemporalUnit>,
    bilstm: Vec<BiLstmLayer>,
    bn_states: Vec<BatchNormState<E>>,
}

/// Result of a forward pass.
pub struct ForwardOut {
    /// Per-class sigmoid probabilities.
    pub pred: Var,
    /// Features entering the final 1x1 convolution.
    pub features: Var,
    /// Raw kernels emitted by the generator network, when present.
    pub tiny_kernels: Option<Var>,
    pub binding: Binding,
}

/// Hollow layers of a configuration and their (scaled) kernel sizes, for
/// mask preparation.
pub fn hollow_layers(config: &NetworkConfig) -> Vec<(&'static str, usize)> {
    config
        .scaled_blocks()
        .iter()
        .filter(|s| s.kind == KernelKind::Hollow)
        .map(|s| (s.name, s.kernel))
        .collect()
}

struct Builder<'a, E: Element> {
    params: ParamSet<E>,
    bn_states: Vec<BatchNormState<E>>,
    rng: ChaCha8Rng,
    masks: &'a HashMap<String, Arc<HollowMask>>,
    used_masks: Vec<(String, Arc<HollowMask>)>,
}

impl<'a, E: Element> Builder<'a, E> {
    fn dense_weight(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) -> ParamId {
        let fan_in = cin * kh * kw;
        let seed = self.rng.gen::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::kaiming_uniform(vec![cout, cin, kh, kw], fan_in, 0.25, &mut rng);
        self.params.add(name, w)
    }

    fn conv_unit(&mut self, name: &str, spec: &LayerSpec, cin: usize, cout: usize) -> Result<ConvUnit> {
        let k = spec.kernel;
        let geom = ConvGeom::same((k, k), (spec.stride, spec.stride), (spec.dilation, spec.dilation));
        let w = match spec.kind {
            KernelKind::Dense => WeightRef::Param(self.dense_weight(&format!("{}/w", name), cout, cin, k, k)),
            KernelKind::Hollow => {
                let mask = self
                    .masks
                    .get(spec.name)
                    .ok_or_else(|| {
                        Error::invalid("build_network", format!("missing hollow mask for {}", spec.name))
                    })?
                    .clone();
                if mask.size() != k {
                    return Err(Error::shape(
                        "build_network",
                        format!("mask for {} is {}x{}, layer wants {}", spec.name, mask.size(), mask.size(), k),
                    ));
                }
                let sigma = hollow_sigma(&mask, cin);
                let seed = self.rng.gen::<u64>();
                let w = init_hollow_kernel::<E>(&mask, (cout, cin), seed, 0.0, sigma)?;
                self.used_masks.push((spec.name.to_string(), mask.clone()));
                WeightRef::Param(self.params.add_hollow(format!("{}/w", name), w, mask))
            }
            KernelKind::Generated => WeightRef::Generated,
        };
        let bias = self.params.add(format!("{}/b", name), Tensor::zeros(vec![cout]));
        let bn = if spec.normalize {
            let gamma = self.params.add(format!("{}/bn.g", name), Tensor::full(vec![cout], E::ONE));
            let beta = self.params.add(format!("{}/bn.b", name), Tensor::zeros(vec![cout]));
            self.bn_states.push(BatchNormState::new(cout));
            Some(BnRef { gamma, beta, state: self.bn_states.len() - 1 })
        } else {
            None
        };
        let prelu = if spec.activation {
            Some(self.params.add(format!("{}/prelu", name), Tensor::full(vec![cout], E::from_f64(0.25))))
        } else {
            None
        };
        Ok(ConvUnit { w, bias, geom, bn, prelu })
    }

    fn plain_spec(name: &'static str, cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerSpec {
        LayerSpec {
            name,
            channels_in: cin,
            channels_out: cout,
            kernel,
            dilation: 1,
            stride,
            kind: KernelKind::Dense,
            activation: true,
            normalize: true,
        }
    }
}

/// Build every parameter of a configuration. Hollow layers take their masks
/// from `masks`, keyed by layer name (`conv1.1`, `conv2.1`, `conv3.1`).
pub fn build_network<E: Element>(
    config: &NetworkConfig,
    masks: &HashMap<String, Arc<HollowMask>>,
    seed: u64,
) -> Result<Network<E>> {
    config.validate()?;
    let specs = config.scaled_blocks();
    let mut b = Builder {
        params: ParamSet::new(),
        bn_states: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        masks,
        used_masks: Vec::new(),
    };

    let mut encoder = Vec::with_capacity(6);
    for spec in &specs {
        encoder.push(b.conv_unit(spec.name, spec, spec.channels_in, spec.channels_out)?);
    }

    let c1 = specs[1].channels_out;
    let c2 = specs[3].channels_out;
    let c3 = specs[5].channels_out;
    let c4 = config.scale_channels(512);
    let pool = config.name.uses_maxpool();
    let entry_stride = if pool { 1 } else { 2 };
    let bott_a = b.conv_unit(
        "bott.1",
        &Builder::<E>::plain_spec("bott.1", c3, c4, 3, entry_stride),
        c3,
        c4,
    )?;
    let bott_b = b.conv_unit("bott.2", &Builder::<E>::plain_spec("bott.2", c4, c4, 3, 1), c4, c4)?;

    let mut decoder = Vec::with_capacity(3);
    for (i, (c_up, c_skip)) in [(c4, c3), (c3, c2), (c2, c1)].into_iter().enumerate() {
        let names: [&'static str; 3] = match i {
            0 => ["dec3.up", "dec3.1", "dec3.2"],
            1 => ["dec2.up", "dec2.1", "dec2.2"],
            _ => ["dec1.up", "dec1.1", "dec1.2"],
        };
        let up_conv = b.conv_unit(names[0], &Builder::<E>::plain_spec(names[0], c_up, c_skip, 3, 1), c_up, c_skip)?;
        let post1 = b.conv_unit(
            names[1],
            &Builder::<E>::plain_spec(names[1], 2 * c_skip, c_skip, 3, 1),
            2 * c_skip,
            c_skip,
        )?;
        let post2 = b.conv_unit(names[2], &Builder::<E>::plain_spec(names[2], c_skip, c_skip, 3, 1), c_skip, c_skip)?;
        decoder.push(DecoderLevel { up_conv, post1, post2 });
    }

    let head_w = b.dense_weight("head/w", config.classes, c1, 1, 1);
    let head_b = b.params.add("head/b", Tensor::zeros(vec![config.classes]));

    let tiny = if config.name.is_generated() {
        let k = specs[0].kernel;
        if k % 2 != 0 {
            return Err(Error::invalid(
                "build_network",
                format!("generated kernel size {} must be even for the 2-level generator", k),
            ));
        }
        let maps = specs[0].channels_out;
        let enc1 = b.conv_unit("tiny.enc1", &Builder::<E>::plain_spec("tiny.enc1", 1, 16, 3, 1), 1, 16)?;
        let enc2 = b.conv_unit("tiny.enc2", &Builder::<E>::plain_spec("tiny.enc2", 16, 32, 3, 1), 16, 32)?;
        let up = b.conv_unit("tiny.up", &Builder::<E>::plain_spec("tiny.up", 32, 16, 3, 1), 32, 16)?;
        let fuse = b.conv_unit("tiny.fuse", &Builder::<E>::plain_spec("tiny.fuse", 32, 16, 3, 1), 32, 16)?;
        let head_w = b.dense_weight("tiny.head/w", maps, 16, 1, 1);
        let head_b = b.params.add("tiny.head/b", Tensor::zeros(vec![maps]));
        Some(TinyNet { input_size: k, enc1, enc2, up, fuse, head_w, head_b })
    } else {
        None
    };
    let a1_logits = if tiny.is_some() {
        Some(b.params.add("a1.channel_logits", Tensor::zeros(vec![specs[0].channels_out])))
    } else {
        None
    };

    let temporal = match &config.temporal {
        Some(spec) => {
            let (k1, k2, k3) = spec.kernel;
            let mut weights = Vec::new();
            for i in 0..spec.layers {
                let shape = if spec.per_channel {
                    vec![c1, c1, k1, k2, k3]
                } else {
                    vec![c1, k1, k2, k3]
                };
                let fan_in = if spec.per_channel { c1 * k1 * k2 * k3 } else { k1 * k2 * k3 };
                let seed = b.rng.gen::<u64>();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = b
                    .params
                    .add(format!("temporal.{}/w", i), Tensor::kaiming_uniform(shape, fan_in, 0.25, &mut rng));
                let bias = b.params.add(format!("temporal.{}/b", i), Tensor::zeros(vec![c1]));
                weights.push((w, bias));
            }
            let (mid_bn, mid_prelu) = if spec.layers == 2 {
                let gamma = b.params.add("temporal.bn.g", Tensor::full(vec![c1], E::ONE));
                let beta = b.params.add("temporal.bn.b", Tensor::zeros(vec![c1]));
                b.bn_states.push(BatchNormState::new(c1));
                let slope = b.params.add("temporal.prelu", Tensor::full(vec![c1], E::from_f64(0.25)));
                (Some(BnRef { gamma, beta, state: b.bn_states.len() - 1 }), Some(slope))
            } else {
                (None, None)
            };
            Some(TemporalUnit { weights, mid_bn, mid_prelu, pad: spec.padding() })
        }
        None => None,
    };

    let mut bilstm = Vec::new();
    if let Some(spec) = &config.bilstm {
        let hidden = spec.hidden.unwrap_or(c1);
        for i in 0..spec.layers {
            let direction = |tag: &str, b: &mut Builder<E>| -> LstmDirection {
                let fan_in = (c1 + hidden) * spec.kernel * spec.kernel;
                let seed = b.rng.gen::<u64>();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gates_w = b.params.add(
                    format!("bilstm.{}.{}/gates.w", i, tag),
                    Tensor::kaiming_uniform(
                        vec![4 * hidden, c1 + hidden, spec.kernel, spec.kernel],
                        fan_in,
                        0.25,
                        &mut rng,
                    ),
                );
                // forget-gate bias starts at 1 so early steps remember
                let mut bias = vec![E::ZERO; 4 * hidden];
                for v in bias.iter_mut().take(2 * hidden).skip(hidden) {
                    *v = E::ONE;
                }
                let gates_b = b
                    .params
                    .add(format!("bilstm.{}.{}/gates.b", i, tag), Tensor::from_vec(vec![4 * hidden], bias).unwrap());
                let seed2 = b.rng.gen::<u64>();
                let mut rng2 = ChaCha8Rng::seed_from_u64(seed2);
                let proj_w = b.params.add(
                    format!("bilstm.{}.{}/proj.w", i, tag),
                    Tensor::kaiming_uniform(vec![c1, hidden, 1, 1], hidden, 0.25, &mut rng2),
                );
                LstmDirection { gates_w, gates_b, proj_w }
            };
            let fwd = direction("fwd", &mut b);
            let bwd = direction("bwd", &mut b);
            bilstm.push(BiLstmLayer { fwd, bwd, hidden });
        }
    }

    Ok(Network {
        config: config.clone(),
        params: b.params,
        masks: b.used_masks,
        encoder,
        bottleneck: (bott_a, bott_b),
        decoder,
        head_w,
        head_b,
        tiny,
        a1_logits,
        temporal,
        bilstm,
        bn_states: b.bn_states,
    })
}

/// One ConvLSTM step: gates from a convolution over [x; h], then the
/// standard cell update. Spatial extents are preserved.
pub fn conv_lstm_cell<E: Element>(
    tape: &Tape<E>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    gates_w: Var,
    gates_b: Var,
) -> Result<(Var, Var)> {
    let xs = tape.shape(x);
    let hs = tape.shape(h_prev);
    if xs.len() != 4 || hs.len() != 4 || xs[2..] != hs[2..] || xs[0] != hs[0] {
        return Err(Error::shape(
            "conv_lstm_cell",
            format!("x {:?} vs h {:?}", xs, hs),
        ));
    }
    let hidden = hs[1];
    let ws = tape.shape(gates_w);
    if ws[0] != 4 * hidden {
        return Err(Error::shape(
            "conv_lstm_cell",
            format!("gate kernel {:?} vs hidden {}", ws, hidden),
        ));
    }
    let k = ws[2];
    let cat = tape.concat(x, h_prev, 1)?;
    let geom = ConvGeom::same((k, k), (1, 1), (1, 1));
    let gates = tape.conv2d_geom(cat, gates_w, Some(gates_b), &geom)?;
    let part = |at: usize| tape.narrow(gates, 1, at * hidden, hidden);
    let i = tape.sigmoid(part(0)?);
    let f = tape.sigmoid(part(1)?);
    let o = tape.sigmoid(part(2)?);
    let g = tape.tanh(part(3)?);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

struct Ctx<'a, E: Element> {
    tape: &'a Tape<E>,
    binding: &'a Binding,
    training: bool,
}

impl<E: Element> Network<E> {
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn apply_unit(&self, ctx: &Ctx<E>, unit: &ConvUnit, x: Var, generated: Option<Var>) -> Result<Var> {
        let bias = ctx.binding.var(unit.bias);
        let mut y = match &unit.w {
            WeightRef::Param(id) => {
                ctx.tape.conv2d_geom(x, ctx.binding.var(*id), Some(bias), &unit.geom)?
            }
            WeightRef::Generated => {
                let kernels = generated.ok_or_else(|| {
                    Error::invalid("forward", "generated layer called without kernels")
                })?;
                let n = ctx.tape.shape(x)[0];
                let ks = ctx.tape.shape(kernels);
                if ks[0] != n {
                    return Err(Error::shape(
                        "generated_kernel_conv",
                        format!("{} kernel sets for batch {}", ks[0], n),
                    ));
                }
                let mut parts: Option<Var> = None;
                for i in 0..n {
                    let xi = ctx.tape.narrow(x, 0, i, 1)?;
                    let wi = ctx.tape.narrow(kernels, 0, i, 1)?;
                    let wi = ctx.tape.reshape(wi, vec![ks[1], 1, ks[2], ks[3]])?;
                    let yi = ctx.tape.conv2d_geom(xi, wi, Some(bias), &unit.geom)?;
                    parts = Some(match parts {
                        Some(acc) => ctx.tape.concat(acc, yi, 0)?,
                        None => yi,
                    });
                }
                parts.expect("batch is non-empty")
            }
        };
        if let Some(bn) = &unit.bn {
            y = ctx.tape.batchnorm2d(
                y,
                ctx.binding.var(bn.gamma),
                ctx.binding.var(bn.beta),
                &self.bn_states[bn.state],
                ctx.training,
            )?;
        }
        if let Some(slope) = unit.prelu {
            y = ctx.tape.prelu(y, ctx.binding.var(slope))?;
        }
        Ok(y)
    }

    fn tiny_forward(&self, ctx: &Ctx<E>, images: &Tensor<E>) -> Result<Var> {
        let tiny = self.tiny.as_ref().expect("generated config has a tiny net");
        let k = tiny.input_size;
        let small = resize_bilinear(images, k, k)?;
        let x = ctx.tape.constant(small);
        self.tiny_forward_from(ctx, x)
    }

    /// Generator forward on an already-resized [N, 1, K, K] input; emits raw
    /// kernel maps [N, maps, K, K].
    fn tiny_forward_from(&self, ctx: &Ctx<E>, x: Var) -> Result<Var> {
        let tiny = self.tiny.as_ref().expect("generated config has a tiny net");
        let k = tiny.input_size;
        let xs = ctx.tape.shape(x);
        if xs[2] != k || xs[3] != k {
            return Err(Error::shape(
                "tiny_unet_forward",
                format!("input {:?}, expected {k}x{k}; caller resizes", xs),
            ));
        }
        let e1 = self.apply_unit(ctx, &tiny.enc1, x, None)?;
        let p = ctx.tape.maxpool2d(e1)?;
        let e2 = self.apply_unit(ctx, &tiny.enc2, p, None)?;
        let u = ctx.tape.upsample_nearest(e2, 2)?;
        let u = self.apply_unit(ctx, &tiny.up, u, None)?;
        let cat = ctx.tape.concat(u, e1, 1)?;
        let f = self.apply_unit(ctx, &tiny.fuse, cat, None)?;
        let geom = ConvGeom::same((1, 1), (1, 1), (1, 1));
        ctx.tape
            .conv2d_geom(f, ctx.binding.var(tiny.head_w), Some(ctx.binding.var(tiny.head_b)), &geom)
    }

    /// Encoder + decoder on a batch of slices; returns pre-head features.
    fn backbone(&self, ctx: &Ctx<E>, x0: Var, tiny_kernels: Option<Var>) -> Result<Var> {
        let pool = self.config.name.uses_maxpool();
        let mut x = self.apply_unit(ctx, &self.encoder[0], x0, tiny_kernels)?;
        x = self.apply_unit(ctx, &self.encoder[1], x, None)?;
        let s1 = x;
        if pool {
            x = ctx.tape.maxpool2d(s1)?;
        }
        x = self.apply_unit(ctx, &self.encoder[2], x, None)?;
        x = self.apply_unit(ctx, &self.encoder[3], x, None)?;
        let s2 = x;
        if pool {
            x = ctx.tape.maxpool2d(s2)?;
        }
        x = self.apply_unit(ctx, &self.encoder[4], x, None)?;
        x = self.apply_unit(ctx, &self.encoder[5], x, None)?;
        let s3 = x;
        if pool {
            x = ctx.tape.maxpool2d(s3)?;
        }
        x = self.apply_unit(ctx, &self.bottleneck.0, x, None)?;
        x = self.apply_unit(ctx, &self.bottleneck.1, x, None)?;

        for (level, skip) in self.decoder.iter().zip([s3, s2, s1]) {
            x = ctx.tape.upsample_nearest(x, 2)?;
            x = self.apply_unit(ctx, &level.up_conv, x, None)?;
            x = ctx.tape.concat(x, skip, 1)?;
            x = self.apply_unit(ctx, &level.post1, x, None)?;
            x = self.apply_unit(ctx, &level.post2, x, None)?;
        }
        Ok(x)
    }

    fn head(&self, ctx: &Ctx<E>, features: Var) -> Result<Var> {
        let geom = ConvGeom::same((1, 1), (1, 1), (1, 1));
        let logits = ctx.tape.conv2d_geom(
            features,
            ctx.binding.var(self.head_w),
            Some(ctx.binding.var(self.head_b)),
            &geom,
        )?;
        Ok(ctx.tape.sigmoid(logits))
    }

    /// Per-slice forward: [N, 1, H, W] -> probabilities [N, classes, H, W].
    pub fn forward_spatial(&self, tape: &Tape<E>, images: &Tensor<E>, training: bool) -> Result<ForwardOut> {
        let binding = self.params.bind(tape);
        let ctx = Ctx { tape, binding: &binding, training };
        let tiny_kernels = if self.tiny.is_some() {
            Some(self.tiny_forward(&ctx, images)?)
        } else {
            None
        };
        let x0 = tape.constant(images.clone());
        let features = self.backbone(&ctx, x0, tiny_kernels)?;
        let pred = self.head(&ctx, features)?;
        Ok(ForwardOut { pred, features, tiny_kernels, binding })
    }

    /// Stack forward: [T, 1, H, W] -> [T, classes, H, W], with the temporal
    /// or Bi-LSTM block (when configured) refining the per-slice features
    /// before the final layer.
    pub fn forward_stack(&self, tape: &Tape<E>, stack: &Tensor<E>, training: bool) -> Result<ForwardOut> {
        let binding = self.params.bind(tape);
        let ctx = Ctx { tape, binding: &binding, training };
        let tiny_kernels = if self.tiny.is_some() {
            Some(self.tiny_forward(&ctx, stack)?)
        } else {
            None
        };
        let x0 = tape.constant(stack.clone());
        let mut features = self.backbone(&ctx, x0, tiny_kernels)?;

        if let Some(unit) = &self.temporal {
            features = self.temporal_block(&ctx, unit, features)?;
        }
        if !self.bilstm.is_empty() {
            features = self.bilstm_block_inner(&ctx, features)?;
        }
        let pred = self.head(&ctx, features)?;
        Ok(ForwardOut { pred, features, tiny_kernels, binding })
    }

    fn temporal_block(&self, ctx: &Ctx<E>, unit: &TemporalUnit, features: Var) -> Result<Var> {
        let fs = ctx.tape.shape(features); // [T, C, H, W]
        let as5 = |v| ctx.tape.reshape(v, vec![1, fs[0], fs[1], fs[2], fs[3]]);
        let as4 = |v| ctx.tape.reshape(v, fs.clone());
        let mut x = as5(features)?;
        for (i, (w, bias)) in unit.weights.iter().enumerate() {
            x = ctx.tape.temporal_conv(x, ctx.binding.var(*w), ctx.binding.var(*bias), unit.pad)?;
            if i + 1 < unit.weights.len() {
                let mut y = as4(x)?;
                if let Some(bn) = &unit.mid_bn {
                    y = ctx.tape.batchnorm2d(
                        y,
                        ctx.binding.var(bn.gamma),
                        ctx.binding.var(bn.beta),
                        &self.bn_states[bn.state],
                        ctx.training,
                    )?;
                }
                if let Some(slope) = unit.mid_prelu {
                    y = ctx.tape.prelu(y, ctx.binding.var(slope))?;
                }
                x = as5(y)?;
            }
        }
        as4(x)
    }

    fn bilstm_block_inner(&self, ctx: &Ctx<E>, mut features: Var) -> Result<Var> {
        for layer in &self.bilstm {
            features = self.bilstm_layer(ctx, layer, features)?;
        }
        Ok(features)
    }

    fn bilstm_layer(&self, ctx: &Ctx<E>, layer: &BiLstmLayer, features: Var) -> Result<Var> {
        let fs = ctx.tape.shape(features); // [T, C, H, W]
        let t_len = fs[0];
        let run = |dir: &LstmDirection, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
            let mut h = ctx.tape.constant(Tensor::zeros(vec![1, layer.hidden, fs[2], fs[3]]));
            let mut c = h;
            let mut out = vec![h; t_len];
            for t in order {
                let x_t = ctx.tape.narrow(features, 0, t, 1)?;
                let (nh, nc) = conv_lstm_cell(
                    ctx.tape,
                    x_t,
                    h,
                    c,
                    ctx.binding.var(dir.gates_w),
                    ctx.binding.var(dir.gates_b),
                )?;
                h = nh;
                c = nc;
                out[t] = h;
            }
            Ok(out)
        };
        let hs_f = run(&layer.fwd, &mut (0..t_len))?;
        let hs_b = run(&layer.bwd, &mut (0..t_len).rev())?;

        let geom = ConvGeom::same((1, 1), (1, 1), (1, 1));
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let pf = ctx.tape.conv2d_geom(hs_f[t], ctx.binding.var(layer.fwd.proj_w), None, &geom)?;
            let pb = ctx.tape.conv2d_geom(hs_b[t], ctx.binding.var(layer.bwd.proj_w), None, &geom)?;
            steps.push(ctx.tape.add(pf, pb)?);
        }
        let mut acc = steps[0];
        for &s in &steps[1..] {
            acc = ctx.tape.concat(acc, s, 0)?;
        }
        Ok(acc)
    }

    /// Swap the forward and backward parameter sets of every Bi-LSTM layer
    /// (used by the time-reversal symmetry check).
    pub fn swap_bilstm_directions(&mut self) {
        for layer in &mut self.bilstm {
            std::mem::swap(&mut layer.fwd, &mut layer.bwd);
        }
    }

    /// Persist parameters, masks and normalization statistics.
    pub fn save_state(&self, archive: &mut crate::io::Archive) {
        for (i, p) in self.params.iter().enumerate() {
            archive.put_tensor(format!("param/{}", i), &p.value);
        }
        for (name, mask) in &self.masks {
            archive.put_u8(format!("mask/{}", name), &[mask.size(), mask.size()], mask.grid());
        }
        for (i, state) in self.bn_states.iter().enumerate() {
            let mean = state.running_mean.borrow().clone();
            let var = state.running_var.borrow().clone();
            let c = mean.len();
            archive.put_tensor(format!("bn/{}/mean", i), &Tensor::from_vec(vec![c], mean).unwrap());
            archive.put_tensor(format!("bn/{}/var", i), &Tensor::from_vec(vec![c], var).unwrap());
        }
        archive.put_scalar("param_count", self.params.len() as f64);
    }

    pub fn load_state(&mut self, archive: &crate::io::Archive) -> Result<()> {
        let count = archive.scalar("param_count")? as usize;
        if count != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, network has {}",
                count,
                self.params.len()
            )));
        }
        for i in 0..count {
            let t = archive.tensor::<E>(&format!("param/{}", i))?;
            let entry = &mut self.params.entries_mut()[i];
            if t.shape() != entry.value.shape() {
                return Err(Error::Format(format!("checkpoint shape mismatch at {}", entry.name)));
            }
            entry.value = t;
        }
        for (i, state) in self.bn_states.iter().enumerate() {
            let mean = archive.tensor::<E>(&format!("bn/{}/mean", i))?;
            let var = archive.tensor::<E>(&format!("bn/{}/var", i))?;
            *state.running_mean.borrow_mut() = mean.data().to_vec();
            *state.running_var.borrow_mut() = var.data().to_vec();
        }
        Ok(())
    }

    /// Check the shape-preservation invariant on every hollow parameter.
    pub fn hollow_weights_respect_masks(&self) -> bool {
        self.params.iter().all(|p| match &p.mask {
            Some(mask) => crate::hollow::weights_respect_mask(&p.value, mask),
            None => true,
        })
    }

    /// Hollow kernel banks for export.
    pub fn kernel_banks(&self) -> Vec<crate::hollow::HollowKernelBank<E>> {
        self.params
            .iter()
            .filter_map(|p| {
                p.mask.as_ref().map(|mask| crate::hollow::HollowKernelBank {
                    layer: p.name.clone(),
                    weights: p.value.clone(),
                    mask: mask.clone(),
                })
            })
            .collect()
    }
}

/// Masks for every hollow layer of a config, generated analytically
/// (annulus with 0.45K semi-axes and K/5 wall).
pub fn default_annulus_masks(config: &NetworkConfig) -> Result<HashMap<String, Arc<HollowMask>>> {
    let mut masks = HashMap::new();
    for (name, k) in hollow_layers(config) {
        let a = 0.45 * k as f64;
        let w = (k as f64 / 5.0).max(1.0);
        let mask = crate::hollow::make_annulus_mask(k, (a, a), w)?;
        masks.insert(name.to_string(), Arc::new(mask));
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ConfigName;

    fn desk(name: ConfigName) -> NetworkConfig {
        let mut cfg = NetworkConfig::named(name);
        cfg.width = 0.125;
        cfg.kernel_scale = 0.5;
        cfg
    }

    #[test]
    fn spatial_forward_shapes() {
        for name in [ConfigName::UNet, ConfigName::UNetDilated, ConfigName::A2_2_1] {
            let cfg = desk(name);
            let masks = default_annulus_masks(&cfg).unwrap();
            let net = build_network::<f32>(&cfg, &masks, 7).unwrap();
            let tape = Tape::new();
            let x = Tensor::zeros(vec![2, 1, 32, 32]);
            let out = net.forward_spatial(&tape, &x, true).unwrap();
            assert_eq!(tape.shape(out.pred), vec![2, 3, 32, 32], "{:?}", name);
            let p = tape.value(out.pred);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0), "sigmoid range");
        }
    }

    #[test]
    fn missing_mask_rejected() {
        let cfg = desk(ConfigName::A2_1_1);
        match build_network::<f32>(&cfg, &HashMap::new(), 7) {
            Err(e) => assert!(e.to_string().contains("missing hollow mask")),
            Ok(_) => panic!("hollow config without masks must be rejected"),
        }
    }

    #[test]
    fn tiny_unet_output_shape_is_pinned() {
        // full-scale generated config: 32 kernel maps of 20 x 20
        let cfg = NetworkConfig::named(ConfigName::A1_1_1);
        let net = build_network::<f32>(&cfg, &HashMap::new(), 3).unwrap();
        let tape = Tape::new();
        let x = Tensor::zeros(vec![2, 1, 64, 64]);
        let out = net.forward_spatial(&tape, &x, true).unwrap();
        let tk = out.tiny_kernels.unwrap();
        assert_eq!(tape.shape(tk), vec![2, 32, 20, 20]);
        assert_eq!(tape.shape(out.pred), vec![2, 3, 64, 64]);
    }

    #[test]
    fn conv_lstm_cell_zero_fixed_point() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let h = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let c = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![12, 5, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![12]));
        let (h1, c1) = conv_lstm_cell(&tape, x, h, c, w, b).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_lstm_gate_saturation_keeps_cell() {
        // large forget bias and very negative input bias: c stays ~c_prev
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let h = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let c = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.7));
        let w = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let mut bias = vec![0.0; 4];
        bias[0] = -40.0; // input gate shut
        bias[1] = 40.0; // forget gate open
        let b = tape.constant(Tensor::from_vec(vec![4], bias).unwrap());
        let (_h1, c1) = conv_lstm_cell(&tape, x, h, c, w, b).unwrap();
        for &v in tape.value(c1).data() {
            assert!((v - 0.7).abs() < 1e-12, "c_t = {}", v);
        }
    }

    #[test]
    fn parameter_counts_are_stable() {
        // golden values recorded at first build (width 0.25, kernel 0.5)
        let cases = [
            (ConfigName::UNet, 526_211usize),
            (ConfigName::UNetDilated, 526_211),
            (ConfigName::A1_1_1, 540_571),
            (ConfigName::A2_1_1, 526_787),
            (ConfigName::A2_2_1, 538_051),
            (ConfigName::A2_3_1, 570_819),
        ];
        for (name, want) in cases {
            let mut cfg = NetworkConfig::named(name);
            cfg.width = 0.25;
            cfg.kernel_scale = 0.5;
            let masks = default_annulus_masks(&cfg).unwrap();
            let net = build_network::<f32>(&cfg, &masks, 0).unwrap();
            assert_eq!(net.num_parameters(), want, "{:?}", name);
        }
    }
}
