//! The encoder-decoder segmentation network.
//!
//! Stage `i` of the encoder works at `base_channels * 2^i` channels; the
//! bottleneck doubles once more. Each decoder stage upsamples with a 2x2
//! transposed convolution, concatenates the matching encoder output
//! (skip first, then upsampled features) and runs a double convolution block.
//! A 1x1 convolution produces one logit per class.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool2, maxpool2_backward, Act, Conv2d, Feature, GroupNorm, GroupNormTrace, ParamLayout,
    UpConv2x2,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Mish,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mish" => Some(Activation::Mish),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    fn kernel(self) -> Act {
        match self {
            Activation::Mish => Act::Mish,
            Activation::Relu => Act::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of encoder stages (each followed by a 2x2 pooling).
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub activation: Activation,
    /// Upper bound on groups per normalisation layer; the actual count is
    /// the largest divisor of the layer width not exceeding it.
    pub norm_groups: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            depth: 4,
            base_channels: 64,
            in_channels: 1,
            out_classes: 2,
            activation: Activation::Mish,
            norm_groups: 8,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("model.depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_classes < 2 {
            return Err(Error::Config(
                "model widths must be >= 1 and out_classes >= 2".into(),
            ));
        }
        if self.norm_groups < 1 {
            return Err(Error::Config("model.norm_groups must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial dims must survive `depth` halvings exactly.
    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input spatial dims {h}x{w} must be divisible by 2^depth = {div} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

#[derive(Debug)]
struct BlockTrace {
    input: Feature,
    norm1: GroupNormTrace,
    pre1: Feature,
    mid: Feature,
    norm2: GroupNormTrace,
    pre2: Feature,
}

impl ConvBlock {
    fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, groups: usize) -> Self {
        ConvBlock {
            conv1: Conv2d::new(layout, &format!("{name}.conv1"), in_c, out_c, 3),
            norm1: GroupNorm::new(layout, &format!("{name}.norm1"), out_c, groups),
            conv2: Conv2d::new(layout, &format!("{name}.conv2"), out_c, out_c, 3),
            norm2: GroupNorm::new(layout, &format!("{name}.norm2"), out_c, groups),
        }
    }

    fn infer(&self, p: &[f32], act: Act, x: &Feature) -> Feature {
        let (n1, _) = self.norm1.forward(p, &self.conv1.forward(p, x));
        let mid = act.apply(&n1);
        let (n2, _) = self.norm2.forward(p, &self.conv2.forward(p, &mid));
        act.apply(&n2)
    }

    fn forward(&self, p: &[f32], act: Act, x: Feature) -> (Feature, BlockTrace) {
        let (pre1, norm1) = self.norm1.forward(p, &self.conv1.forward(p, &x));
        let mid = act.apply(&pre1);
        let (pre2, norm2) = self.norm2.forward(p, &self.conv2.forward(p, &mid));
        let out = act.apply(&pre2);
        (
            out,
            BlockTrace {
                input: x,
                norm1,
                pre1,
                mid,
                norm2,
                pre2,
            },
        )
    }

    fn backward(
        &self,
        p: &[f32],
        act: Act,
        t: &BlockTrace,
        dy: &Feature,
        g: &mut [f32],
        need_dx: bool,
    ) -> Option<Feature> {
        let d = act.backward(&t.pre2, dy);
        let d = self.norm2.backward(p, &t.norm2, &d, g);
        let d = self.conv2.backward(p, &t.mid, &d, g, true).expect("dx requested");
        let d = act.backward(&t.pre1, &d);
        let d = self.norm1.backward(p, &t.norm1, &d, g);
        self.conv1.backward(p, &t.input, &d, g, need_dx)
    }

    fn init(&self, params: &mut [f32], rng: &mut ChaCha8Rng) {
        for conv in [&self.conv1, &self.conv2] {
            he_init(params, conv, rng);
        }
        for norm in [&self.norm1, &self.norm2] {
            params[norm.gamma.clone()].fill(1.0);
            params[norm.beta.clone()].fill(0.0);
        }
    }
}

fn he_init(params: &mut [f32], conv: &Conv2d, rng: &mut ChaCha8Rng) {
    let std = (2.0 / conv.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in &mut params[conv.weight.clone()] {
        *v = normal.sample(rng) as f32;
    }
    params[conv.bias.clone()].fill(0.0);
}

/// Per-sample activations retained for the backward pass.
#[derive(Debug)]
pub struct SampleTrace {
    enc: Vec<BlockTrace>,
    pool_args: Vec<Vec<u8>>,
    bottleneck: BlockTrace,
    up_inputs: Vec<Feature>,
    dec: Vec<BlockTrace>,
    head_input: Feature,
}

#[derive(Debug, Clone)]
pub struct UNet {
    spec: ModelSpec,
    layout: ParamLayout,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    ups: Vec<UpConv2x2>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    params: Vec<f32>,
}

impl UNet {
    /// Builds the architecture with zeroed parameters.
    fn skeleton(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = ParamLayout::default();
        let g = spec.norm_groups;
        let mut enc = Vec::with_capacity(spec.depth);
        let mut in_c = spec.in_channels;
        for i in 0..spec.depth {
            let c = spec.stage_channels(i);
            enc.push(ConvBlock::new(&mut layout, &format!("enc{i}"), in_c, c, g));
            in_c = c;
        }
        let bottom = spec.stage_channels(spec.depth);
        let bottleneck = ConvBlock::new(&mut layout, "bottleneck", in_c, bottom, g);
        let mut ups = Vec::with_capacity(spec.depth);
        let mut dec = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let c = spec.stage_channels(i);
            ups.push(UpConv2x2::new(&mut layout, &format!("up{i}"), 2 * c, c));
            dec.push(ConvBlock::new(&mut layout, &format!("dec{i}"), 2 * c, c, g));
        }
        let head = Conv2d::new(
            &mut layout,
            "head",
            spec.stage_channels(0),
            spec.out_classes,
            1,
        );
        let params = vec![0.0; layout.len()];
        Ok(UNet {
            spec: spec.clone(),
            layout,
            enc,
            bottleneck,
            ups,
            dec,
            head,
            params,
        })
    }

    /// He-initialised model; identical seeds give identical weights.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut net = Self::skeleton(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = std::mem::take(&mut net.params);
        for block in net.enc.iter().chain([&net.bottleneck]).chain(net.dec.iter()) {
            block.init(&mut params, &mut rng);
        }
        for up in &net.ups {
            let std = (1.0 / up.in_c as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut params[up.weight.clone()] {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        he_init(&mut params, &net.head, &mut rng);
        net.params = params;
        Ok(net)
    }

    pub fn from_params(spec: &ModelSpec, params: Vec<f32>) -> Result<Self> {
        let mut net = Self::skeleton(spec)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "parameter blob has {} values, model spec needs {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Named parameter tensors as ranges into [`UNet::params`].
    pub fn param_groups(&self) -> &[(String, std::ops::Range<usize>)] {
        &self.layout.groups
    }

    fn check_batch(&self, batch: &Array4<f32>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = batch.dim();
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "batch has {c} channels, model expects {}",
                self.spec.in_channels
            )));
        }
        self.spec.check_input_dims(h, w)?;
        Ok((b, h, w))
    }

    fn sample(batch: &Array4<f32>, i: usize) -> Feature {
        let (_, c, h, w) = batch.dim();
        let data = batch.slice(ndarray::s![i, .., .., ..]).iter().copied().collect();
        Feature::from_vec(c, h, w, data)
    }

    fn infer_one(&self, x: Feature) -> Feature {
        let p = &self.params;
        let act = self.spec.activation.kernel();
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut x = x;
        for block in &self.enc {
            let e = block.infer(p, act, &x);
            x = maxpool2(&e).0;
            skips.push(e);
        }
        x = self.bottleneck.infer(p, act, &x);
        for i in (0..self.spec.depth).rev() {
            let u = self.ups[i].forward(p, &x);
            x = self.dec[i].infer(p, act, &skips[i].concat(&u));
        }
        self.head.forward(p, &x)
    }

    fn forward_one(&self, x: Feature) -> (Feature, SampleTrace) {
        let p = &self.params;
        let act = self.spec.activation.kernel();
        let depth = self.spec.depth;
        let mut enc = Vec::with_capacity(depth);
        let mut pool_args = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut x = x;
        for block in &self.enc {
            let (e, t) = block.forward(p, act, x);
            let (pooled, arg) = maxpool2(&e);
            enc.push(t);
            pool_args.push(arg);
            skips.push(e);
            x = pooled;
        }
        let (mut x, bottleneck) = self.bottleneck.forward(p, act, x);
        let mut up_inputs = vec![Feature::zeros(0, 0, 0); depth];
        let mut dec: Vec<Option<BlockTrace>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let u = self.ups[i].forward(p, &x);
            up_inputs[i] = x;
            let cat = skips[i].concat(&u);
            let (y, t) = self.dec[i].forward(p, act, cat);
            dec[i] = Some(t);
            x = y;
        }
        let logits = self.head.forward(p, &x);
        let trace = SampleTrace {
            enc,
            pool_args,
            bottleneck,
            up_inputs,
            dec: dec.into_iter().map(|t| t.expect("every stage ran")).collect(),
            head_input: x,
        };
        (logits, trace)
    }

    fn backward_one(&self, trace: &SampleTrace, dlogits: &Feature, grads: &mut [f32]) {
        let p = &self.params;
        let act = self.spec.activation.kernel();
        let depth = self.spec.depth;
        let mut d = self
            .head
            .backward(p, &trace.head_input, dlogits, grads, true)
            .expect("dx requested");
        let mut dskips = Vec::with_capacity(depth);
        for i in 0..depth {
            let dcat = self.dec[i]
                .backward(p, act, &trace.dec[i], &d, grads, true)
                .expect("dx requested");
            let (dskip, du) = dcat.split_channels(self.spec.stage_channels(i));
            dskips.push(dskip);
            d = self.ups[i].backward(p, &trace.up_inputs[i], &du, grads);
        }
        d = self
            .bottleneck
            .backward(p, act, &trace.bottleneck, &d, grads, true)
            .expect("dx requested");
        for i in (0..depth).rev() {
            let mut de = maxpool2_backward(&trace.pool_args[i], &d);
            for (a, b) in de.data.iter_mut().zip(&dskips[i].data) {
                *a += *b;
            }
            let need_dx = i > 0;
            if let Some(dx) = self.enc[i].backward(p, act, &trace.enc[i], &de, grads, need_dx) {
                d = dx;
            }
        }
    }

    /// Inference: `B x Cin x H x W` to `B x classes x H x W` logits.
    pub fn forward(&self, batch: &Array4<f32>) -> Result<Array4<f32>> {
        let (b, h, w) = self.check_batch(batch)?;
        let classes = self.spec.out_classes;
        let mut out = Array4::<f32>::zeros((b, classes, h, w));
        for i in 0..b {
            let logits = self.infer_one(Self::sample(batch, i));
            out.slice_mut(ndarray::s![i, .., .., ..])
                .iter_mut()
                .zip(logits.data)
                .for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }

    /// Forward pass, loss evaluation on the full batch of logits, then
    /// backward pass. `loss` returns the scalar loss and its gradient with
    /// respect to the logits. Gradients are summed over the batch in sample
    /// order.
    pub fn forward_backward<F>(&self, batch: &Array4<f32>, loss: F) -> Result<(f64, Vec<f32>)>
    where
        F: FnOnce(&Array4<f32>) -> Result<(f64, Array4<f32>)>,
    {
        let (b, h, w) = self.check_batch(batch)?;
        let classes = self.spec.out_classes;
        let mut logits = Array4::<f32>::zeros((b, classes, h, w));
        let mut traces = Vec::with_capacity(b);
        for i in 0..b {
            let (l, t) = self.forward_one(Self::sample(batch, i));
            logits
                .slice_mut(ndarray::s![i, .., .., ..])
                .iter_mut()
                .zip(l.data)
                .for_each(|(o, v)| *o = v);
            traces.push(t);
        }
        let (value, dlogits) = loss(&logits)?;
        if dlogits.dim() != logits.dim() {
            return Err(Error::Shape("loss gradient shape differs from logits".into()));
        }
        let mut grads = vec![0.0f32; self.params.len()];
        for (i, trace) in traces.iter().enumerate() {
            let d = Self::sample(&dlogits, i);
            self.backward_one(trace, &d, &mut grads);
        }
        Ok((value, grads))
    }

    /// Spatial dims of the encoder outputs, shallowest first, and of the
    /// decoder outputs in the order they are produced (deepest first).
    pub fn stage_dims(&self, h: usize, w: usize) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
        self.spec.check_input_dims(h, w)?;
        let enc: Vec<_> = (0..self.spec.depth).map(|i| (h >> i, w >> i)).collect();
        // Each decoder stage doubles the resolution it receives.
        let mut dec = Vec::with_capacity(self.spec.depth);
        let (mut dh, mut dw) = (h >> self.spec.depth, w >> self.spec.depth);
        for _ in 0..self.spec.depth {
            dh *= 2;
            dw *= 2;
            dec.push((dh, dw));
        }
        Ok((enc, dec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            depth: 2,
            base_channels: 4,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn default_spec_has_classic_unet_size() {
        let net = UNet::skeleton(&ModelSpec::default()).unwrap();
        // 4-stage, base-64 U-Net: about 31 million parameters.
        assert!((30_000_000..33_000_000).contains(&net.param_count()), "{}", net.param_count());
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = UNet::new(&tiny_spec(), 1).unwrap();
        let b = UNet::new(&tiny_spec(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params(), b.params());
        assert_eq!(UNet::new(&tiny_spec(), 1).unwrap().params(), a.params());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = UNet::new(&tiny_spec(), 0).unwrap();
        let err = net.forward(&Array4::zeros((1, 1, 10, 8))).unwrap_err();
        assert!(err.to_string().contains("divisible by 2^depth = 4"), "{err}");
    }

    #[test]
    fn decoder_dims_mirror_encoder() {
        let net = UNet::new(&ModelSpec::default(), 0).unwrap();
        let (enc, dec) = net.stage_dims(64, 32).unwrap();
        let depth = net.spec().depth;
        for k in 0..depth {
            assert_eq!(dec[k], enc[depth - 1 - k]);
        }
    }

    #[test]
    fn forward_backward_gradient_matches_finite_difference() {
        use rand::Rng;
        let spec = ModelSpec {
            depth: 1,
            base_channels: 2,
            norm_groups: 2,
            ..ModelSpec::default()
        };
        let mut net = UNet::new(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Array4::from_shape_fn((2, 1, 4, 4), |_| rng.random_range(-1.0f32..1.0));
        let probe = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(-1.0f32..1.0));
        let loss = |l: &Array4<f32>| -> Result<(f64, Array4<f32>)> {
            let v = l.iter().zip(probe.iter()).map(|(a, b)| (a * b) as f64).sum();
            Ok((v, probe.clone()))
        };
        let (_, grads) = net.forward_backward(&batch, loss).unwrap();
        let value = |net: &UNet| -> f64 {
            let l = net.forward(&batch).unwrap();
            l.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        let mut checked = 0;
        for i in (0..net.param_count()).step_by(3) {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = value(&net);
            net.params_mut()[i] = orig - h;
            let dn = value(&net);
            net.params_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h as f64);
            let g = grads[i] as f64;
            assert!(
                (fd - g).abs() <= 2e-2 * (1.0 + g.abs()),
                "param {i}: fd {fd} vs analytic {g}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }
}
