//! The desk-scale segmentation network: a strided-conv encoder feeding five
//! upsampling decoder blocks (four with parallel dilated branches at rates
//! (1,1)/(2,2)/(4,4), one plain) and a 1x1 conv + softmax head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{
    concat_channels, conv_backward_input, conv_backward_params, conv_forward, relu, relu_backward,
    softmax2, split_channels_grad, upsample_nearest2, upsample_nearest2_backward, ConvSpec,
    Tensor4,
};
use crate::{Error, Result};

/// Dilation schedule of the dilated decoder blocks.
pub const DILATIONS: [(usize, usize); 3] = [(1, 1), (2, 2), (4, 4)];

/// Spatial granularity the encoder imposes: five 2x reductions.
pub const DOWNSAMPLE_FACTOR: usize = 32;

/// How a dilated block combines its three convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockComposition {
    /// Three parallel branches summed (default).
    Parallel,
    /// Chained at increasing dilation.
    Sequential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyNetConfig {
    /// Output widths of the stem plus five strided encoder stages.
    pub encoder_widths: Vec<usize>,
    /// Output widths of the four dilated blocks and the final plain block.
    pub decoder_widths: Vec<usize>,
    pub composition: BlockComposition,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![4, 8, 12, 16, 16, 16],
            decoder_widths: vec![16, 12, 8, 6, 4],
            composition: BlockComposition::Parallel,
            seed: 42,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() != 6 {
            return Err(Error::InvalidParam(
                "encoder_widths must list the stem plus five stages".into(),
            ));
        }
        if self.decoder_widths.len() != 5 {
            return Err(Error::InvalidParam(
                "decoder_widths must list four dilated blocks plus the plain block".into(),
            ));
        }
        if self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .any(|&w| w == 0)
        {
            return Err(Error::InvalidParam("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Input channel count of decoder block `k` (upsampled path + skip).
    fn decoder_in(&self, k: usize) -> usize {
        let up = if k == 0 {
            self.encoder_widths[5]
        } else {
            self.decoder_widths[k - 1]
        };
        up + self.encoder_widths[4 - k]
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct ToyNet {
    pub cfg: ToyNetConfig,
    pub params: Vec<Param>,
}

/// Expected parameter list (names and shapes) for a configuration.
fn param_layout(cfg: &ToyNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    for i in 0..6 {
        let in_ch = if i == 0 { 1 } else { cfg.encoder_widths[i - 1] };
        layout.push((format!("enc{i}.weight"), vec![cfg.encoder_widths[i], in_ch, 3, 3]));
        layout.push((format!("enc{i}.bias"), vec![cfg.encoder_widths[i]]));
    }
    for k in 0..5 {
        let in_ch = cfg.decoder_in(k);
        let out = cfg.decoder_widths[k];
        if k < 4 {
            match cfg.composition {
                BlockComposition::Parallel => {
                    for (j, _) in DILATIONS.iter().enumerate() {
                        layout.push((format!("dec{k}.b{j}.weight"), vec![out, in_ch, 3, 3]));
                    }
                }
                BlockComposition::Sequential => {
                    layout.push((format!("dec{k}.c0.weight"), vec![out, in_ch, 3, 3]));
                    layout.push((format!("dec{k}.c1.weight"), vec![out, out, 3, 3]));
                    layout.push((format!("dec{k}.c2.weight"), vec![out, out, 3, 3]));
                }
            }
        } else {
            layout.push((format!("dec{k}.conv.weight"), vec![out, in_ch, 3, 3]));
        }
        layout.push((format!("dec{k}.bias"), vec![out]));
    }
    layout.push(("head.weight".into(), vec![2, cfg.decoder_widths[4], 1, 1]));
    layout.push(("head.bias".into(), vec![2]));
    layout
}

impl ToyNet {
    /// Kaiming-uniform initialization from the config seed; biases start at
    /// zero. Parameter draw order is fixed, so a seed pins every weight.
    pub fn init(cfg: &ToyNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = param_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Rebuilds a net from loaded parameters, validating names and shapes.
    pub fn from_params(cfg: ToyNetConfig, params: Vec<Param>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {} {:?}",
                    p.name, p.shape
                )));
            }
            if p.data.len() != p.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} holds {} values for shape {shape:?}",
                    p.data.len()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

/// Weights and geometry for one standalone decoder block application.
pub struct DecoderBlockParams<'a> {
    pub weights: Vec<&'a [f32]>,
    pub bias: &'a [f32],
    pub in_ch: usize,
    pub out_ch: usize,
    pub composition: BlockComposition,
    /// False for the final plain block (single dilation-1 conv).
    pub dilated: bool,
}

/// The convolution stage of a dilated block: three 3x3 convolutions at the
/// schedule's rates, combined per the composition, without bias.
pub fn dilated_conv_stage(
    x: &Tensor4,
    weights: &[&[f32]],
    in_ch: usize,
    out_ch: usize,
    composition: BlockComposition,
) -> Result<Tensor4> {
    if weights.len() != 3 {
        return Err(Error::InvalidParam("a dilated stage takes 3 weight sets".into()));
    }
    let zeros_out = vec![0.0f32; out_ch];
    match composition {
        BlockComposition::Parallel => {
            let mut sum: Option<Tensor4> = None;
            for (j, &(dh, dw)) in DILATIONS.iter().enumerate() {
                let spec = ConvSpec::new(in_ch, out_ch, (3, 3), (dh, dw))?;
                let y = conv_forward(x, weights[j], &zeros_out, &spec, 1);
                sum = Some(match sum {
                    None => y,
                    Some(mut acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&y.data) {
                            *a += b;
                        }
                        acc
                    }
                });
            }
            Ok(sum.expect("three branches"))
        }
        BlockComposition::Sequential => {
            let mut cur = x.clone();
            for (j, &(dh, dw)) in DILATIONS.iter().enumerate() {
                let ic = if j == 0 { in_ch } else { out_ch };
                let spec = ConvSpec::new(ic, out_ch, (3, 3), (dh, dw))?;
                cur = conv_forward(&cur, weights[j], &zeros_out, &spec, 1);
            }
            Ok(cur)
        }
    }
}

/// One decoder block: 2x nearest upsample, optional skip concatenation,
/// dilated (or plain) convolution stage, bias, ReLU.
pub fn dilated_decoder_block(
    x: &Tensor4,
    skip: Option<&Tensor4>,
    p: &DecoderBlockParams<'_>,
) -> Result<Tensor4> {
    let up = upsample_nearest2(x);
    let xin = match skip {
        Some(s) => concat_channels(&up, s)?,
        None => up,
    };
    if xin.c != p.in_ch {
        return Err(Error::InvalidParam(format!(
            "decoder block input has {} channels, expected {}",
            xin.c, p.in_ch
        )));
    }
    let mut s = if p.dilated {
        let w: Vec<&[f32]> = p.weights.to_vec();
        dilated_conv_stage(&xin, &w, p.in_ch, p.out_ch, p.composition)?
    } else {
        let spec = ConvSpec::new(p.in_ch, p.out_ch, (3, 3), (1, 1))?;
        conv_forward(&xin, p.weights[0], &vec![0.0; p.out_ch], &spec, 1)
    };
    for b in 0..s.n {
        for c in 0..s.c {
            let bias = p.bias[c];
            for v in s.plane_mut(b, c) {
                *v += bias;
            }
        }
    }
    Ok(relu(&s))
}

/// Every intermediate needed by the backward pass.
pub struct ForwardCache {
    pub input: Tensor4,
    /// Post-ReLU encoder activations (stem + 5 stages).
    pub enc_out: Vec<Tensor4>,
    /// Post-concat decoder inputs.
    pub dec_in: Vec<Tensor4>,
    /// Sequential-mode chain intermediates (c0 and c1 outputs).
    pub dec_mid: Vec<Vec<Tensor4>>,
    /// Post-ReLU decoder outputs.
    pub dec_out: Vec<Tensor4>,
    pub logits: Tensor4,
    pub probs: Tensor4,
}

/// Forward pass over a batch; spatial dims must be divisible by 32.
pub fn forward(net: &ToyNet, x: &Tensor4) -> Result<ForwardCache> {
    if x.c != 1 {
        return Err(Error::InvalidParam("network input must be single-channel".into()));
    }
    if !x.h.is_multiple_of(DOWNSAMPLE_FACTOR) || !x.w.is_multiple_of(DOWNSAMPLE_FACTOR) {
        return Err(Error::InvalidParam(format!(
            "input dims {}x{} not divisible by {DOWNSAMPLE_FACTOR}",
            x.w, x.h
        )));
    }
    let cfg = &net.cfg;
    let mut enc_out = Vec::with_capacity(6);
    let mut cur = x.clone();
    for i in 0..6 {
        let in_ch = if i == 0 { 1 } else { cfg.encoder_widths[i - 1] };
        let spec = ConvSpec::new(in_ch, cfg.encoder_widths[i], (3, 3), (1, 1))?;
        let stride = if i == 0 { 1 } else { 2 };
        let z = conv_forward(
            &cur,
            &net.param(&format!("enc{i}.weight")).data,
            &net.param(&format!("enc{i}.bias")).data,
            &spec,
            stride,
        );
        let a = relu(&z);
        enc_out.push(a.clone());
        cur = a;
    }

    let mut dec_in = Vec::with_capacity(5);
    let mut dec_mid = Vec::with_capacity(5);
    let mut dec_out: Vec<Tensor4> = Vec::with_capacity(5);
    for k in 0..5 {
        let prev = if k == 0 { &enc_out[5] } else { &dec_out[k - 1] };
        let up = upsample_nearest2(prev);
        let xin = concat_channels(&up, &enc_out[4 - k])?;
        let in_ch = cfg.decoder_in(k);
        let out_ch = cfg.decoder_widths[k];
        let zeros_out = vec![0.0f32; out_ch];

        let (mut s, mids) = if k < 4 {
            match cfg.composition {
                BlockComposition::Parallel => {
                    let mut sum: Option<Tensor4> = None;
                    for (j, &(dh, dw)) in DILATIONS.iter().enumerate() {
                        let spec = ConvSpec::new(in_ch, out_ch, (3, 3), (dh, dw))?;
                        let y = conv_forward(
                            &xin,
                            &net.param(&format!("dec{k}.b{j}.weight")).data,
                            &zeros_out,
                            &spec,
                            1,
                        );
                        sum = Some(match sum {
                            None => y,
                            Some(mut acc) => {
                                for (a, b) in acc.data.iter_mut().zip(&y.data) {
                                    *a += b;
                                }
                                acc
                            }
                        });
                    }
                    (sum.expect("three branches"), Vec::new())
                }
                BlockComposition::Sequential => {
                    let mut mids = Vec::new();
                    let mut cur = xin.clone();
                    for (j, &(dh, dw)) in DILATIONS.iter().enumerate() {
                        let ic = if j == 0 { in_ch } else { out_ch };
                        let spec = ConvSpec::new(ic, out_ch, (3, 3), (dh, dw))?;
                        cur = conv_forward(
                            &cur,
                            &net.param(&format!("dec{k}.c{j}.weight")).data,
                            &zeros_out,
                            &spec,
                            1,
                        );
                        if j < 2 {
                            mids.push(cur.clone());
                        }
                    }
                    (cur, mids)
                }
            }
        } else {
            let spec = ConvSpec::new(in_ch, out_ch, (3, 3), (1, 1))?;
            (
                conv_forward(
                    &xin,
                    &net.param(&format!("dec{k}.conv.weight")).data,
                    &zeros_out,
                    &spec,
                    1,
                ),
                Vec::new(),
            )
        };

        let bias = &net.param(&format!("dec{k}.bias")).data;
        for b in 0..s.n {
            for (c, &bv) in bias.iter().enumerate() {
                for v in s.plane_mut(b, c) {
                    *v += bv;
                }
            }
        }
        let a = relu(&s);
        dec_in.push(xin);
        dec_mid.push(mids);
        dec_out.push(a);
    }

    let head_spec = ConvSpec::new(cfg.decoder_widths[4], 2, (1, 1), (1, 1))?;
    let logits = conv_forward(
        &dec_out[4],
        &net.param("head.weight").data,
        &net.param("head.bias").data,
        &head_spec,
        1,
    );
    let probs = softmax2(&logits)?;
    Ok(ForwardCache {
        input: x.clone(),
        enc_out,
        dec_in,
        dec_mid,
        dec_out,
        logits,
        probs,
    })
}

/// Backward pass from the gradient of the loss with respect to the ridge
/// probability plane (channel 1 of the softmax). Returns gradients aligned
/// with `net.params`.
pub fn backward(net: &ToyNet, cache: &ForwardCache, dprob1: &Tensor4) -> Result<Vec<Vec<f32>>> {
    let cfg = &net.cfg;
    let mut grads: Vec<Vec<f32>> = net.params.iter().map(|p| vec![0.0; p.data.len()]).collect();

    // Softmax jacobian: dz1 = dp1 * p1 * (1 - p1), dz0 = -dz1.
    let mut dlogits = Tensor4::zeros(cache.logits.n, 2, cache.logits.h, cache.logits.w);
    for b in 0..cache.logits.n {
        let p1 = cache.probs.plane(b, 1).to_vec();
        let dsrc = dprob1.plane(b, 0);
        for k in 0..p1.len() {
            let dz1 = dsrc[k] * p1[k] * (1.0 - p1[k]);
            dlogits.plane_mut(b, 1)[k] = dz1;
            dlogits.plane_mut(b, 0)[k] = -dz1;
        }
    }

    // Head.
    let head_spec = ConvSpec::new(cfg.decoder_widths[4], 2, (1, 1), (1, 1))?;
    let (dw, db) = conv_backward_params(&cache.dec_out[4], &dlogits, &head_spec, 1);
    grads[net.index_of("head.weight")] = dw;
    grads[net.index_of("head.bias")] = db;
    let mut d_dec = conv_backward_input(
        &dlogits,
        &net.param("head.weight").data,
        &head_spec,
        1,
        cache.dec_out[4].h,
        cache.dec_out[4].w,
    );

    // Skip gradients accumulate per encoder stage.
    let mut d_enc: Vec<Option<Tensor4>> = vec![None; 6];

    for k in (0..5usize).rev() {
        let in_ch = cfg.decoder_in(k);
        let out_ch = cfg.decoder_widths[k];
        let xin = &cache.dec_in[k];
        let ds = relu_backward(&d_dec, &cache.dec_out[k]);

        // Block bias.
        let bias_grad = &mut grads[net.index_of(&format!("dec{k}.bias"))];
        for b in 0..ds.n {
            for (c, slot) in bias_grad.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for v in ds.plane(b, c) {
                    acc += v;
                }
                *slot += acc;
            }
        }

        let dxin = if k < 4 {
            match cfg.composition {
                BlockComposition::Parallel => {
                    let mut dxin: Option<Tensor4> = None;
                    for (j, &(dh, dw_d)) in DILATIONS.iter().enumerate() {
                        let spec = ConvSpec::new(in_ch, out_ch, (3, 3), (dh, dw_d))?;
                        let (dw, _) = conv_backward_params(xin, &ds, &spec, 1);
                        grads[net.index_of(&format!("dec{k}.b{j}.weight"))] = dw;
                        let dxi = conv_backward_input(
                            &ds,
                            &net.param(&format!("dec{k}.b{j}.weight")).data,
                            &spec,
                            1,
                            xin.h,
                            xin.w,
                        );
                        dxin = Some(match dxin {
                            None => dxi,
                            Some(mut acc) => {
                                for (a, b) in acc.data.iter_mut().zip(&dxi.data) {
                                    *a += b;
                                }
                                acc
                            }
                        });
                    }
                    dxin.expect("three branches")
                }
                BlockComposition::Sequential => {
                    let mut dcur = ds;
                    for j in (0..3usize).rev() {
                        let ic = if j == 0 { in_ch } else { out_ch };
                        let (dh, dw_d) = DILATIONS[j];
                        let spec = ConvSpec::new(ic, out_ch, (3, 3), (dh, dw_d))?;
                        let src = if j == 0 {
                            xin
                        } else {
                            &cache.dec_mid[k][j - 1]
                        };
                        let (dw, _) = conv_backward_params(src, &dcur, &spec, 1);
                        grads[net.index_of(&format!("dec{k}.c{j}.weight"))] = dw;
                        dcur = conv_backward_input(
                            &dcur,
                            &net.param(&format!("dec{k}.c{j}.weight")).data,
                            &spec,
                            1,
                            src.h,
                            src.w,
                        );
                    }
                    dcur
                }
            }
        } else {
            let spec = ConvSpec::new(in_ch, out_ch, (3, 3), (1, 1))?;
            let (dw, _) = conv_backward_params(xin, &ds, &spec, 1);
            grads[net.index_of(&format!("dec{k}.conv.weight"))] = dw;
            conv_backward_input(
                &ds,
                &net.param(&format!("dec{k}.conv.weight")).data,
                &spec,
                1,
                xin.h,
                xin.w,
            )
        };

        // Split into upsampled path and skip path.
        let up_ch = if k == 0 {
            cfg.encoder_widths[5]
        } else {
            cfg.decoder_widths[k - 1]
        };
        let (d_up, d_skip) = split_channels_grad(&dxin, up_ch);
        match &mut d_enc[4 - k] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&d_skip.data) {
                    *a += b;
                }
            }
            None => d_enc[4 - k] = Some(d_skip),
        }
        let d_prev = upsample_nearest2_backward(&d_up);
        if k == 0 {
            match &mut d_enc[5] {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&d_prev.data) {
                        *a += b;
                    }
                }
                None => d_enc[5] = Some(d_prev),
            }
        } else {
            d_dec = d_prev;
        }
    }

    // Encoder, deepest first.
    let mut d_next: Option<Tensor4> = None;
    for i in (0..6usize).rev() {
        let mut d_out = d_enc[i].take().unwrap_or_else(|| {
            let t = &cache.enc_out[i];
            Tensor4::zeros(t.n, t.c, t.h, t.w)
        });
        if let Some(extra) = d_next.take() {
            for (a, b) in d_out.data.iter_mut().zip(&extra.data) {
                *a += b;
            }
        }
        let dz = relu_backward(&d_out, &cache.enc_out[i]);
        let in_ch = if i == 0 { 1 } else { cfg.encoder_widths[i - 1] };
        let spec = ConvSpec::new(in_ch, cfg.encoder_widths[i], (3, 3), (1, 1))?;
        let stride = if i == 0 { 1 } else { 2 };
        let src = if i == 0 {
            &cache.input
        } else {
            &cache.enc_out[i - 1]
        };
        let (dw, db) = conv_backward_params(src, &dz, &spec, stride);
        grads[net.index_of(&format!("enc{i}.weight"))] = dw;
        grads[net.index_of(&format!("enc{i}.bias"))] = db;
        if i > 0 {
            d_next = Some(conv_backward_input(&dz, &net.param(&format!("enc{i}.weight")).data, &spec, stride, src.h, src.w));
        }
    }

    Ok(grads)
}
