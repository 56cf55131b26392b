//! Minimal CNN engine: enough layers to train the locked classifiers on one
//! CPU core, nothing more.
//!
//! Convolutions lower to im2col plus a single matrix product per batch.
//! Everything is f32 with f64 accumulators where statistics are computed,
//! and every iteration order is fixed, so a seeded run reproduces weights
//! bit for bit.

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Activations flowing through the network: image-shaped until global
/// pooling, then flat.
#[derive(Debug, Clone)]
pub enum Tensor {
    I4(Array4<f32>),
    I2(Array2<f32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_c, in_c * kh * kw)
    pub w: Array2<f32>,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl Conv2d {
    fn new(in_c: usize, out_c: usize, k: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w = Array2::from_shape_fn((out_c, in_c * k * k), |_| dist.sample(rng) as f32);
        Conv2d { w, in_c, out_c, kh: k, kw: k, pad }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Linear {
    /// Zero-initialized: an untrained head emits all-zero logits, so argmax
    /// falls back to class 0 by the first-maximum tie-break.
    fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear { w: Array2::zeros((out_dim, in_dim)), b: Array1::zeros(out_dim) }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Bn(BatchNorm),
    Relu,
    Pool2,
    Gap,
    Lin(Linear),
}

/// What backward needs from each layer's forward pass.
pub enum LayerCache {
    Conv { cols: Array2<f32>, in_hw: (usize, usize), out_hw: (usize, usize) },
    BnTrain { xhat: Array4<f32>, invstd: Array1<f32> },
    BnEval { scale: Array1<f32> },
    Relu4 { out: Array4<f32> },
    Relu2 { out: Array2<f32> },
    Pool { argmax: Vec<u8>, in_dim: (usize, usize, usize, usize) },
    Gap { in_hw: (usize, usize) },
    Lin { input: Array2<f32> },
}

pub enum LayerGrads {
    Conv { dw: Array2<f32> },
    Bn { dgamma: Array1<f32>, dbeta: Array1<f32> },
    Lin { dw: Array2<f32>, db: Array1<f32> },
    None,
}

pub struct Grads(pub Vec<LayerGrads>);

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

/// Lowers (N,C,H,W) to a (C*kh*kw, N*Ho*Wo) matrix of receptive fields.
fn im2col(
    x: &Array4<f32>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> (Array2<f32>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (ho, wo) = (hp - kh + 1, wp - kw + 1);
    let p = ho * wo;

    let mut xpad = Array4::<f32>::zeros((n, c, hp, wp));
    xpad.slice_mut(s![.., .., pad..pad + h, pad..pad + w]).assign(x);
    let xp = xpad.as_slice().expect("padded input is contiguous");

    let mut cols = Array2::<f32>::zeros((c * kh * kw, n * p));
    let cf = cols.as_slice_mut().expect("cols matrix is contiguous");
    for r in 0..c * kh * kw {
        let ci = r / (kh * kw);
        let ki = (r % (kh * kw)) / kw;
        let kj = r % kw;
        for ni in 0..n {
            let src_base = ((ni * c + ci) * hp + ki) * wp + kj;
            let dst_base = r * (n * p) + ni * p;
            for i in 0..ho {
                let src = src_base + i * wp;
                let dst = dst_base + i * wo;
                cf[dst..dst + wo].copy_from_slice(&xp[src..src + wo]);
            }
        }
    }
    (cols, ho, wo)
}

/// Scatters column gradients back to image layout (transpose of im2col).
fn col2im(
    dcols: &Array2<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<f32> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (ho, wo) = (hp - kh + 1, wp - kw + 1);
    let p = ho * wo;
    let df = dcols.as_slice().expect("dcols contiguous");

    let mut dxpad = vec![0.0f32; n * c * hp * wp];
    for r in 0..c * kh * kw {
        let ci = r / (kh * kw);
        let ki = (r % (kh * kw)) / kw;
        let kj = r % kw;
        for ni in 0..n {
            let dst_base = ((ni * c + ci) * hp + ki) * wp + kj;
            let src_base = r * (n * p) + ni * p;
            for i in 0..ho {
                let dst = dst_base + i * wp;
                let src = src_base + i * wo;
                for j in 0..wo {
                    dxpad[dst + j] += df[src + j];
                }
            }
        }
    }

    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    {
        let dxf = dx.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    let src = ((ni * c + ci) * hp + (i + pad)) * wp + pad;
                    let dst = ((ni * c + ci) * h + i) * w;
                    dxf[dst..dst + w].copy_from_slice(&dxpad[src..src + w]);
                }
            }
        }
    }
    dx
}

/// First index of the row maximum; ties go to the lowest class.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Network {
    /// `smallcnn`: five 3x3 conv blocks with batch norm, three 2x2 pools,
    /// global average pooling, linear head. `tinycnn`: a two-block version
    /// for fast tests. Both accept any input size divisible by their pool
    /// count.
    pub fn build(
        arch_id: &str,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Network> {
        if num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        let (c, h, w) = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("input shape must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let conv_block = |layers: &mut Vec<Layer>, ic: usize, oc: usize, rng: &mut ChaCha8Rng| {
            layers.push(Layer::Conv(Conv2d::new(ic, oc, 3, 1, rng)));
            layers.push(Layer::Bn(BatchNorm::new(oc)));
            layers.push(Layer::Relu);
        };
        let (pools, feat) = match arch_id {
            "smallcnn" => {
                conv_block(&mut layers, c, 32, &mut rng);
                layers.push(Layer::Pool2);
                conv_block(&mut layers, 32, 64, &mut rng);
                conv_block(&mut layers, 64, 64, &mut rng);
                layers.push(Layer::Pool2);
                conv_block(&mut layers, 64, 128, &mut rng);
                conv_block(&mut layers, 128, 128, &mut rng);
                layers.push(Layer::Pool2);
                (3, 128)
            }
            "tinycnn" => {
                conv_block(&mut layers, c, 16, &mut rng);
                layers.push(Layer::Pool2);
                conv_block(&mut layers, 16, 32, &mut rng);
                layers.push(Layer::Pool2);
                (2, 32)
            }
            other => {
                return Err(Error::invalid(format!("unknown architecture {other:?}")));
            }
        };
        let div = 1usize << pools;
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "{arch_id} needs input sides divisible by {div}, got {h}x{w}"
            )));
        }
        layers.push(Layer::Gap);
        layers.push(Layer::Lin(Linear::new_zeroed(feat, num_classes)));
        Ok(Network { layers, input_shape, num_classes })
    }

    /// Width of the vector feeding the final linear layer.
    pub fn feature_dim(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Lin(lin)) => lin.w.dim().1,
            _ => 0,
        }
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.input_shape {
            return Err(Error::invalid(format!(
                "input shape ({c},{h},{w}) does not match network input {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    fn forward_layer(
        layer: &mut Layer,
        input: Tensor,
        mode: Mode,
        caches: Option<&mut Vec<LayerCache>>,
    ) -> Tensor {
        match layer {
            Layer::Conv(conv) => {
                let Tensor::I4(x) = input else { panic!("conv expects image input") };
                let (n, _, _, _) = x.dim();
                let (cols, ho, wo) = im2col(&x, conv.kh, conv.kw, conv.pad);
                let y = conv.w.dot(&cols);
                let p = ho * wo;
                let mut out = Array4::<f32>::zeros((n, conv.out_c, ho, wo));
                {
                    let yf = y.as_slice().unwrap();
                    let of = out.as_slice_mut().unwrap();
                    for oc in 0..conv.out_c {
                        for ni in 0..n {
                            let src = oc * n * p + ni * p;
                            let dst = (ni * conv.out_c + oc) * p;
                            of[dst..dst + p].copy_from_slice(&yf[src..src + p]);
                        }
                    }
                }
                if let Some(caches) = caches {
                    let (_, _, h, w) = x.dim();
                    caches.push(LayerCache::Conv { cols, in_hw: (h, w), out_hw: (ho, wo) });
                }
                Tensor::I4(out)
            }
            Layer::Bn(bn) => {
                let Tensor::I4(x) = input else { panic!("batch norm expects image input") };
                let (n, c, h, w) = x.dim();
                let m = (n * h * w) as f64;
                let mut out = Array4::<f32>::zeros((n, c, h, w));
                match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0f64; c];
                        let mut var = vec![0.0f64; c];
                        let xf = x.as_slice().unwrap();
                        let hw = h * w;
                        for ci in 0..c {
                            let mut s = 0.0f64;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for &v in &xf[base..base + hw] {
                                    s += v as f64;
                                }
                            }
                            mean[ci] = s / m;
                            let mut sq = 0.0f64;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for &v in &xf[base..base + hw] {
                                    let d = v as f64 - mean[ci];
                                    sq += d * d;
                                }
                            }
                            var[ci] = sq / m;
                        }
                        let invstd: Array1<f32> = (0..c)
                            .map(|ci| (1.0 / (var[ci] + bn.eps).sqrt()) as f32)
                            .collect();
                        let mut xhat = Array4::<f32>::zeros((n, c, h, w));
                        {
                            let xhf = xhat.as_slice_mut().unwrap();
                            let of = out.as_slice_mut().unwrap();
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * hw;
                                    let mu = mean[ci] as f32;
                                    let is = invstd[ci];
                                    let g = bn.gamma[ci];
                                    let b = bn.beta[ci];
                                    for k in base..base + hw {
                                        let xh = (xf[k] - mu) * is;
                                        xhf[k] = xh;
                                        of[k] = g * xh + b;
                                    }
                                }
                            }
                        }
                        for ci in 0..c {
                            let mom = bn.momentum;
                            bn.running_mean[ci] =
                                ((1.0 - mom) * bn.running_mean[ci] as f64 + mom * mean[ci]) as f32;
                            bn.running_var[ci] =
                                ((1.0 - mom) * bn.running_var[ci] as f64 + mom * var[ci]) as f32;
                        }
                        if let Some(caches) = caches {
                            caches.push(LayerCache::BnTrain { xhat, invstd });
                        }
                    }
                    Mode::Eval => {
                        let xf = x.as_slice().unwrap();
                        let of = out.as_slice_mut().unwrap();
                        let hw = h * w;
                        let mut scale = Array1::<f32>::zeros(c);
                        for ci in 0..c {
                            let is = 1.0 / ((bn.running_var[ci] as f64 + bn.eps).sqrt() as f32);
                            scale[ci] = bn.gamma[ci] * is;
                            let shift = bn.beta[ci] - bn.running_mean[ci] * scale[ci];
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for k in base..base + hw {
                                    of[k] = scale[ci] * xf[k] + shift;
                                }
                            }
                        }
                        if let Some(caches) = caches {
                            caches.push(LayerCache::BnEval { scale });
                        }
                    }
                }
                Tensor::I4(out)
            }
            Layer::Relu => match input {
                Tensor::I4(mut x) => {
                    x.mapv_inplace(|v| v.max(0.0));
                    if let Some(caches) = caches {
                        caches.push(LayerCache::Relu4 { out: x.clone() });
                    }
                    Tensor::I4(x)
                }
                Tensor::I2(mut x) => {
                    x.mapv_inplace(|v| v.max(0.0));
                    if let Some(caches) = caches {
                        caches.push(LayerCache::Relu2 { out: x.clone() });
                    }
                    Tensor::I2(x)
                }
            },
            Layer::Pool2 => {
                let Tensor::I4(x) = input else { panic!("pool expects image input") };
                let (n, c, h, w) = x.dim();
                assert!(h % 2 == 0 && w % 2 == 0, "pool needs even spatial dims");
                let (ho, wo) = (h / 2, w / 2);
                let mut out = Array4::<f32>::zeros((n, c, ho, wo));
                let mut argmax = vec![0u8; n * c * ho * wo];
                let xf = x.as_slice().unwrap();
                let of = out.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let ibase = (ni * c + ci) * h * w;
                        let obase = (ni * c + ci) * ho * wo;
                        for i in 0..ho {
                            for j in 0..wo {
                                let i0 = ibase + (2 * i) * w + 2 * j;
                                let i1 = ibase + (2 * i + 1) * w + 2 * j;
                                let cand = [xf[i0], xf[i0 + 1], xf[i1], xf[i1 + 1]];
                                let mut best = 0usize;
                                for k in 1..4 {
                                    if cand[k] > cand[best] {
                                        best = k;
                                    }
                                }
                                of[obase + i * wo + j] = cand[best];
                                argmax[obase + i * wo + j] = best as u8;
                            }
                        }
                    }
                }
                if let Some(caches) = caches {
                    caches.push(LayerCache::Pool { argmax, in_dim: (n, c, h, w) });
                }
                Tensor::I4(out)
            }
            Layer::Gap => {
                let Tensor::I4(x) = input else { panic!("global pool expects image input") };
                let (n, c, h, w) = x.dim();
                let mut out = Array2::<f32>::zeros((n, c));
                let xf = x.as_slice().unwrap();
                let inv = 1.0f64 / (h * w) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let mut s = 0.0f64;
                        for &v in &xf[base..base + h * w] {
                            s += v as f64;
                        }
                        out[[ni, ci]] = (s * inv) as f32;
                    }
                }
                if let Some(caches) = caches {
                    caches.push(LayerCache::Gap { in_hw: (h, w) });
                }
                Tensor::I2(out)
            }
            Layer::Lin(lin) => {
                let Tensor::I2(x) = input else { panic!("linear expects flat input") };
                let mut out = x.dot(&lin.w.t());
                for mut row in out.rows_mut() {
                    row += &lin.b;
                }
                if let Some(caches) = caches {
                    caches.push(LayerCache::Lin { input: x });
                }
                Tensor::I2(out)
            }
        }
    }

    fn run(
        &mut self,
        x: &Array4<f32>,
        mode: Mode,
        mut caches: Option<&mut Vec<LayerCache>>,
    ) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let mut t = Tensor::I4(x.clone());
        for layer in &mut self.layers {
            t = Self::forward_layer(layer, t, mode, caches.as_deref_mut());
        }
        match t {
            Tensor::I2(logits) => Ok(logits),
            Tensor::I4(_) => Err(Error::invalid("network does not end in a flat layer")),
        }
    }

    /// Inference forward pass (running batch-norm statistics, no caches).
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.forward_eval_impl(x, None)
    }

    fn forward_eval_impl(
        &self,
        x: &Array4<f32>,
        mut caches: Option<&mut Vec<LayerCache>>,
    ) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let mut t = Tensor::I4(x.clone());
        // Eval mode does not write to any layer, so iterate immutably and
        // clone nothing but activations.
        for layer in &self.layers {
            t = Self::forward_layer_eval(layer, t, caches.as_deref_mut());
        }
        match t {
            Tensor::I2(logits) => Ok(logits),
            Tensor::I4(_) => Err(Error::invalid("network does not end in a flat layer")),
        }
    }

    fn forward_layer_eval(
        layer: &Layer,
        input: Tensor,
        caches: Option<&mut Vec<LayerCache>>,
    ) -> Tensor {
        // Eval mode never writes to a layer; a clone satisfies the shared
        // forward-pass signature and costs little next to the activations.
        let mut own = layer.clone();
        Self::forward_layer(&mut own, input, Mode::Eval, caches)
    }

    /// Training forward pass: batch statistics, running stats updated,
    /// caches returned for backward.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<(Array2<f32>, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let logits = self.run(x, Mode::Train, Some(&mut caches))?;
        Ok((logits, caches))
    }

    /// Eval-mode forward that keeps caches, for gradients with respect to
    /// the input of a frozen model (trigger recovery).
    pub fn forward_eval_cached(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let logits = self.forward_eval_impl(x, Some(&mut caches))?;
        Ok((logits, caches))
    }

    /// Features at the global-pool output, the vector the final linear layer
    /// consumes.
    pub fn penultimate_features(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let mut t = Tensor::I4(x.clone());
        for layer in &self.layers {
            if matches!(layer, Layer::Lin(_)) {
                break;
            }
            t = Self::forward_layer_eval(layer, t, None);
        }
        match t {
            Tensor::I2(f) => Ok(f),
            Tensor::I4(_) => Err(Error::invalid("no flat feature tap before the head")),
        }
    }

    /// Backpropagates `dlogits`. Parameter gradients land in `grads` when
    /// given; the input gradient is returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        caches: &[LayerCache],
        dlogits: Array2<f32>,
        mut grads: Option<&mut Grads>,
        want_input_grad: bool,
    ) -> Option<Array4<f32>> {
        assert_eq!(caches.len(), self.layers.len(), "cache/layer mismatch");
        let mut dt = Tensor::I2(dlogits);
        for (li, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_dx = li > 0 || want_input_grad;
            dt = match (layer, cache) {
                (Layer::Lin(lin), LayerCache::Lin { input }) => {
                    let Tensor::I2(dy) = dt else { panic!("linear expects flat gradient") };
                    if let Some(g) = grads.as_deref_mut() {
                        if let LayerGrads::Lin { dw, db } = &mut g.0[li] {
                            *dw += &dy.t().dot(input);
                            *db += &dy.sum_axis(Axis(0));
                        }
                    }
                    if need_dx {
                        Tensor::I2(dy.dot(&lin.w))
                    } else {
                        return None;
                    }
                }
                (Layer::Gap, LayerCache::Gap { in_hw }) => {
                    let Tensor::I2(dy) = dt else { panic!("pool expects flat gradient") };
                    let (n, c) = dy.dim();
                    let (h, w) = *in_hw;
                    let inv = 1.0 / (h * w) as f32;
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    {
                        let dxf = dx.as_slice_mut().unwrap();
                        for ni in 0..n {
                            for ci in 0..c {
                                let v = dy[[ni, ci]] * inv;
                                let base = (ni * c + ci) * h * w;
                                for k in base..base + h * w {
                                    dxf[k] = v;
                                }
                            }
                        }
                    }
                    Tensor::I4(dx)
                }
                (Layer::Pool2, LayerCache::Pool { argmax, in_dim }) => {
                    let Tensor::I4(dy) = dt else { panic!("pool expects image gradient") };
                    let (n, c, h, w) = *in_dim;
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    let dyf = dy.as_slice().unwrap();
                    let dxf = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let obase = (ni * c + ci) * ho * wo;
                            let ibase = (ni * c + ci) * h * w;
                            for i in 0..ho {
                                for j in 0..wo {
                                    let k = argmax[obase + i * wo + j] as usize;
                                    let (di, dj) = (k / 2, k % 2);
                                    dxf[ibase + (2 * i + di) * w + 2 * j + dj] +=
                                        dyf[obase + i * wo + j];
                                }
                            }
                        }
                    }
                    Tensor::I4(dx)
                }
                (Layer::Relu, LayerCache::Relu4 { out }) => {
                    let Tensor::I4(mut dy) = dt else { panic!("relu expects image gradient") };
                    ndarray::Zip::from(&mut dy).and(out).for_each(|d, &o| {
                        if o <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    Tensor::I4(dy)
                }
                (Layer::Relu, LayerCache::Relu2 { out }) => {
                    let Tensor::I2(mut dy) = dt else { panic!("relu expects flat gradient") };
                    ndarray::Zip::from(&mut dy).and(out).for_each(|d, &o| {
                        if o <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    Tensor::I2(dy)
                }
                (Layer::Bn(bn), LayerCache::BnTrain { xhat, invstd }) => {
                    let Tensor::I4(dy) = dt else { panic!("bn expects image gradient") };
                    let (n, c, h, w) = dy.dim();
                    let m = (n * h * w) as f64;
                    let hw = h * w;
                    let dyf = dy.as_slice().unwrap();
                    let xhf = xhat.as_slice().unwrap();
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in base..base + hw {
                                dgamma[ci] += (dyf[k] * xhf[k]) as f64;
                                dbeta[ci] += dyf[k] as f64;
                            }
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        if let LayerGrads::Bn { dgamma: dg, dbeta: db } = &mut g.0[li] {
                            for ci in 0..c {
                                dg[ci] += dgamma[ci] as f32;
                                db[ci] += dbeta[ci] as f32;
                            }
                        }
                    }
                    if !need_dx {
                        return None;
                    }
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    {
                        let dxf = dx.as_slice_mut().unwrap();
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                let g = bn.gamma[ci] as f64;
                                let is = invstd[ci] as f64;
                                let sum_dy = dbeta[ci];
                                let sum_dyxh = dgamma[ci];
                                for k in base..base + hw {
                                    let t = m * dyf[k] as f64
                                        - sum_dy
                                        - xhf[k] as f64 * sum_dyxh;
                                    dxf[k] = (g * is / m * t) as f32;
                                }
                            }
                        }
                    }
                    Tensor::I4(dx)
                }
                (Layer::Bn(_), LayerCache::BnEval { scale }) => {
                    let Tensor::I4(mut dy) = dt else { panic!("bn expects image gradient") };
                    let (n, c, h, w) = dy.dim();
                    let hw = h * w;
                    let dyf = dy.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let s = scale[ci];
                            for k in base..base + hw {
                                dyf[k] *= s;
                            }
                        }
                    }
                    Tensor::I4(dy)
                }
                (Layer::Conv(conv), LayerCache::Conv { cols, in_hw, out_hw }) => {
                    let Tensor::I4(dy) = dt else { panic!("conv expects image gradient") };
                    let (n, oc, _, _) = dy.dim();
                    let p = out_hw.0 * out_hw.1;
                    let mut dy_mat = Array2::<f32>::zeros((oc, n * p));
                    {
                        let src = dy.as_slice().unwrap();
                        let dst = dy_mat.as_slice_mut().unwrap();
                        for oi in 0..oc {
                            for ni in 0..n {
                                let s = (ni * oc + oi) * p;
                                let d = oi * n * p + ni * p;
                                dst[d..d + p].copy_from_slice(&src[s..s + p]);
                            }
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        if let LayerGrads::Conv { dw } = &mut g.0[li] {
                            *dw += &dy_mat.dot(&cols.t());
                        }
                    }
                    if !need_dx {
                        return None;
                    }
                    let dcols = conv.w.t().dot(&dy_mat);
                    let (h, w) = *in_hw;
                    Tensor::I4(col2im(&dcols, n, conv.in_c, h, w, conv.kh, conv.kw, conv.pad))
                }
                _ => panic!("cache does not match layer"),
            };
        }
        match dt {
            Tensor::I4(dx) => Some(dx),
            Tensor::I2(_) => None,
        }
    }

    /// All parameters (including batch-norm running statistics) in one flat
    /// vector, fixed order.
    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend(c.w.iter()),
                Layer::Bn(b) => {
                    out.extend(b.gamma.iter());
                    out.extend(b.beta.iter());
                    out.extend(b.running_mean.iter());
                    out.extend(b.running_var.iter());
                }
                Layer::Lin(l) => {
                    out.extend(l.w.iter());
                    out.extend(l.b.iter());
                }
                _ => {}
            }
        }
        out
    }

    pub fn load_flat(&mut self, params: &[f32]) -> Result<()> {
        let expected = self.params_flat().len();
        if params.len() != expected {
            return Err(Error::DataFormat(format!(
                "parameter blob has {} values, network needs {expected}",
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        let fill1 = |a: &mut Array1<f32>, it: &mut dyn Iterator<Item = f32>| {
            for v in a.iter_mut() {
                *v = it.next().unwrap();
            }
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    for v in c.w.iter_mut() {
                        *v = it.next().unwrap();
                    }
                }
                Layer::Bn(b) => {
                    fill1(&mut b.gamma, &mut it);
                    fill1(&mut b.beta, &mut it);
                    fill1(&mut b.running_mean, &mut it);
                    fill1(&mut b.running_var, &mut it);
                }
                Layer::Lin(l) => {
                    for v in l.w.iter_mut() {
                        *v = it.next().unwrap();
                    }
                    fill1(&mut l.b, &mut it);
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.layers
                .iter()
                .map(|layer| match layer {
                    Layer::Conv(c) => LayerGrads::Conv { dw: Array2::zeros(c.w.dim()) },
                    Layer::Bn(b) => LayerGrads::Bn {
                        dgamma: Array1::zeros(b.gamma.len()),
                        dbeta: Array1::zeros(b.beta.len()),
                    },
                    Layer::Lin(l) => LayerGrads::Lin {
                        dw: Array2::zeros(l.w.dim()),
                        db: Array1::zeros(l.b.len()),
                    },
                    _ => LayerGrads::None,
                })
                .collect(),
        )
    }
}

/// Softmax cross-entropy over a batch of logits. `weights` scales each
/// sample's contribution; the loss is the weighted sum divided by batch
/// size, matching a mean loss when all weights are one.
pub fn softmax_xent(
    logits: &Array2<f32>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> (f64, Array2<f32>) {
    let (loss, dlogits, _) = softmax_xent_per_sample(logits, labels, weights);
    (loss, dlogits)
}

/// As [`softmax_xent`], also returning each sample's unweighted
/// cross-entropy.
pub fn softmax_xent_per_sample(
    logits: &Array2<f32>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> (f64, Array2<f32>, Vec<f64>) {
    let (n, k) = logits.dim();
    assert_eq!(labels.len(), n, "label count mismatch");
    if let Some(w) = weights {
        assert_eq!(w.len(), n, "weight count mismatch");
    }
    let mut dlogits = Array2::<f32>::zeros((n, k));
    let mut per_sample = Vec::with_capacity(n);
    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = logits.row(i);
        let y = labels[i];
        assert!(y < k, "label {y} out of range");
        let wi = weights.map_or(1.0, |w| w[i]);
        let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &z in row.iter() {
            denom += ((z as f64) - maxv).exp();
        }
        let lse = maxv + denom.ln();
        let ce = lse - logits[[i, y]] as f64;
        per_sample.push(ce);
        loss += wi * ce * inv_n;
        for j in 0..k {
            let p = ((logits[[i, j]] as f64) - lse).exp();
            let grad = wi * inv_n * (p - if j == y { 1.0 } else { 0.0 });
            dlogits[[i, j]] = grad as f32;
        }
    }
    (loss, dlogits, per_sample)
}

/// Cosine-decayed learning rate over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD with decoupled-from-norm weight decay on conv and linear
/// weights only.
pub struct SgdMomentum {
    velocity: Grads,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { velocity: net.zero_grads(), momentum, weight_decay }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads, lr: f64) {
        let mu = self.momentum as f32;
        let wd = self.weight_decay as f32;
        let lr = lr as f32;
        for ((layer, grad), vel) in net
            .layers
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.velocity.0)
        {
            match (layer, grad, vel) {
                (
                    Layer::Conv(c),
                    LayerGrads::Conv { dw },
                    LayerGrads::Conv { dw: vw },
                ) => {
                    ndarray::Zip::from(&mut c.w).and(dw).and(vw).for_each(|w, &g, v| {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    });
                }
                (
                    Layer::Bn(b),
                    LayerGrads::Bn { dgamma, dbeta },
                    LayerGrads::Bn { dgamma: vg, dbeta: vb },
                ) => {
                    ndarray::Zip::from(&mut b.gamma).and(dgamma).and(vg).for_each(
                        |w, &g, v| {
                            *v = mu * *v + g;
                            *w -= lr * *v;
                        },
                    );
                    ndarray::Zip::from(&mut b.beta).and(dbeta).and(vb).for_each(|w, &g, v| {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    });
                }
                (
                    Layer::Lin(l),
                    LayerGrads::Lin { dw, db },
                    LayerGrads::Lin { dw: vw, db: vb },
                ) => {
                    ndarray::Zip::from(&mut l.w).and(dw).and(vw).for_each(|w, &g, v| {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    });
                    ndarray::Zip::from(&mut l.b).and(db).and(vb).for_each(|w, &g, v| {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    });
                }
                _ => {}
            }
        }
    }
}

/// Adam over a flat parameter vector; used by the trigger-recovery
/// optimizers, whose parameter count is tiny.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Array4<f32> {
        Array4::from_shape_fn((n, c, h, w), |_| rng.gen::<f32>())
    }

    /// Direct 6-loop convolution in f64, the independent oracle for the
    /// im2col path.
    fn conv_reference(x: &Array4<f32>, conv: &Conv2d) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let pad = conv.pad as isize;
        let (ho, wo) = (h, w);
        let mut out = Array4::<f32>::zeros((n, conv.out_c, ho, wo));
        for ni in 0..n {
            for oc in 0..conv.out_c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ki in 0..conv.kh {
                                for kj in 0..conv.kw {
                                    let ii = i as isize + ki as isize - pad;
                                    let jj = j as isize + kj as isize - pad;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w
                                    {
                                        let wv = conv.w[[oc, ci * conv.kh * conv.kw + ki * conv.kw + kj]];
                                        acc += (wv as f64)
                                            * (x[[ni, ci, ii as usize, jj as usize]] as f64);
                                    }
                                }
                            }
                        }
                        out[[ni, oc, i, j]] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(3, 5, 3, 1, &mut rng);
        let x = random_input(&mut rng, 2, 3, 6, 6);
        let mut layer = Layer::Conv(conv.clone());
        let Tensor::I4(got) = Network::forward_layer(&mut layer, Tensor::I4(x.clone()), Mode::Eval, None)
        else {
            panic!()
        };
        let want = conv_reference(&x, &conv);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4, "conv mismatch {a} vs {b}");
        }
    }

    #[test]
    fn pool_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 2, 3, 4, 4);
        let mut layer = Layer::Pool2;
        let Tensor::I4(got) = Network::forward_layer(&mut layer, Tensor::I4(x.clone()), Mode::Eval, None)
        else {
            panic!()
        };
        for ni in 0..2 {
            for ci in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let m = x[[ni, ci, 2 * i, 2 * j]]
                            .max(x[[ni, ci, 2 * i, 2 * j + 1]])
                            .max(x[[ni, ci, 2 * i + 1, 2 * j]])
                            .max(x[[ni, ci, 2 * i + 1, 2 * j + 1]]);
                        assert_eq!(got[[ni, ci, i, j]], m);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let net = Network::build("tinycnn", (3, 8, 8), 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 5, 3, 8, 8);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.dim(), (5, 4));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_head_ties_break_to_class_zero() {
        let net = Network::build("tinycnn", (3, 8, 8), 4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input(&mut rng, 3, 3, 8, 8);
        let logits = net.forward(&x).unwrap();
        for row in logits.rows() {
            assert!(row.iter().all(|&v| v == 0.0));
            assert_eq!(argmax(row.as_slice().unwrap()), 0);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let net = Network::build("tinycnn", (3, 8, 8), 4, 9).unwrap();
        let x = Array4::<f32>::zeros((2, 3, 6, 6));
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!(Network::build("meganet", (3, 32, 32), 10, 0).is_err());
        assert!(Network::build("tinycnn", (3, 10, 10), 4, 0).is_err());
    }

    #[test]
    fn params_roundtrip_bit_exact() {
        let mut net = Network::build("tinycnn", (3, 8, 8), 4, 10).unwrap();
        let flat = net.params_flat();
        let mut other = Network::build("tinycnn", (3, 8, 8), 4, 11).unwrap();
        assert_ne!(other.params_flat(), flat);
        other.load_flat(&flat).unwrap();
        assert_eq!(other.params_flat(), flat);
        assert!(net.load_flat(&flat[..flat.len() - 1]).is_err());
    }

    #[test]
    fn softmax_xent_matches_hand_computation() {
        let logits = ndarray::arr2(&[[1.0f32, 2.0, 0.5], [0.0, 0.0, 0.0]]);
        let (loss, dlogits) = softmax_xent(&logits, &[1, 2], None);
        // Row 0: lse = ln(e^1 + e^2 + e^0.5), ce = lse - 2.
        let lse0 = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        let ce0 = lse0 - 2.0;
        let ce1 = (3.0f64).ln();
        assert!((loss - (ce0 + ce1) / 2.0).abs() < 1e-9);
        // Gradient rows sum to zero.
        for row in dlogits.rows() {
            let s: f32 = row.sum();
            assert!(s.abs() < 1e-6);
        }
        // Uniform row: p = 1/3 each, so d = (1/3 - onehot)/2.
        assert!((dlogits[[1, 2]] - ((1.0 / 3.0 - 1.0) / 2.0) as f32).abs() < 1e-6);
    }

    #[test]
    fn weighted_xent_scales_gradient() {
        let logits = ndarray::arr2(&[[0.3f32, -0.2], [0.1, 0.4]]);
        let (l1, d1) = softmax_xent(&logits, &[0, 1], None);
        let (l2, d2) = softmax_xent(&logits, &[0, 1], Some(&[2.0, 2.0]));
        assert!((l2 - 2.0 * l1).abs() < 1e-9);
        for (a, b) in d2.iter().zip(d1.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
    }

    /// Central finite differences over a sample of parameters from every
    /// layer kind, against the analytic backward pass.
    #[test]
    fn gradients_match_finite_differences() {
        let mut net = Network::build("tinycnn", (3, 8, 8), 3, 12).unwrap();
        // Give the zero head a nonzero state so gradients flow everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut flat = net.params_flat();
        let head_len = 32 * 3 + 3;
        let n_params = flat.len();
        for v in flat[n_params - head_len..].iter_mut() {
            *v = rng.gen::<f32>() * 0.2 - 0.1;
        }
        net.load_flat(&flat).unwrap();

        let x = random_input(&mut rng, 4, 3, 8, 8);
        let labels = vec![0usize, 1, 2, 1];

        // Analytic gradients in eval mode (fixed statistics make the loss a
        // clean function of the parameters; train-mode BN couples samples and
        // its running-stat update is not part of the differentiated graph).
        let (logits, caches) = net.forward_eval_cached(&x).unwrap();
        let (_, dlogits) = softmax_xent(&logits, &labels, None);
        let mut grads = net.zero_grads();
        net.backward(&caches, dlogits, Some(&mut grads), false);

        // Flatten analytic grads in params_flat order, with zeros for
        // running statistics, which the loss does treat as constants.
        let mut analytic: Vec<f32> = Vec::new();
        for (layer, g) in net.layers.iter().zip(&grads.0) {
            match (layer, g) {
                (Layer::Conv(_), LayerGrads::Conv { dw }) => analytic.extend(dw.iter()),
                (Layer::Bn(b), LayerGrads::Bn { dgamma, dbeta }) => {
                    analytic.extend(dgamma.iter());
                    analytic.extend(dbeta.iter());
                    analytic.extend(std::iter::repeat(f32::NAN).take(2 * b.gamma.len()));
                }
                (Layer::Lin(_), LayerGrads::Lin { dw, db }) => {
                    analytic.extend(dw.iter());
                    analytic.extend(db.iter());
                }
                _ => {}
            }
        }
        assert_eq!(analytic.len(), n_params);

        let loss_at = |params: &[f32], net: &mut Network| -> f64 {
            net.load_flat(params).unwrap();
            let logits = net.forward(&x).unwrap();
            softmax_xent(&logits, &labels, None).0
        };

        let base = net.params_flat();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(14);
        let mut checked = 0;
        while checked < 25 {
            let idx = probe_rng.gen_range(0..n_params);
            if analytic[idx].is_nan() {
                continue; // running statistic, not a differentiated parameter
            }
            let h = 2e-2f32;
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let numeric = (loss_at(&plus, &mut net) - loss_at(&minus, &mut net)) / (2.0 * h as f64);
            let a = analytic[idx] as f64;
            let tol = 2e-2 * numeric.abs().max(0.05);
            assert!(
                (a - numeric).abs() < tol,
                "param {idx}: analytic {a} vs numeric {numeric}"
            );
            checked += 1;
        }
        net.load_flat(&base).unwrap();
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut net = Network::build("tinycnn", (3, 8, 8), 3, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut flat = net.params_flat();
        let n_params = flat.len();
        for v in flat[n_params - (32 * 3 + 3)..].iter_mut() {
            *v = rng.gen::<f32>() * 0.2 - 0.1;
        }
        net.load_flat(&flat).unwrap();

        let x = random_input(&mut rng, 2, 3, 8, 8);
        let labels = vec![1usize, 2];
        let (logits, caches) = net.forward_eval_cached(&x).unwrap();
        let (_, dlogits) = softmax_xent(&logits, &labels, None);
        let dx = net.backward(&caches, dlogits, None, true).unwrap();

        let loss_of = |x: &Array4<f32>| -> f64 {
            let logits = net.forward(x).unwrap();
            softmax_xent(&logits, &labels, None).0
        };
        let mut probe_rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let idx = (
                probe_rng.gen_range(0..2),
                probe_rng.gen_range(0..3),
                probe_rng.gen_range(0..8),
                probe_rng.gen_range(0..8),
            );
            let h = 2e-2f32;
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
            let a = dx[idx] as f64;
            let tol = 2e-2 * numeric.abs().max(0.05);
            assert!(
                (a - numeric).abs() < tol,
                "input {idx:?}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_blobs() {
        let mut net = Network::build("tinycnn", (1, 8, 8), 2, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Two blobs: class 0 bright top-left, class 1 bright bottom-right.
        let mut xs = Array4::<f32>::zeros((32, 1, 8, 8));
        let mut labels = Vec::new();
        for i in 0..32 {
            let label = i % 2;
            for a in 0..4 {
                for b in 0..4 {
                    let (r, c) = if label == 0 { (a, b) } else { (a + 4, b + 4) };
                    xs[[i, 0, r, c]] = 0.8 + 0.2 * rng.gen::<f32>();
                }
            }
            labels.push(label);
        }
        let mut opt = SgdMomentum::new(&net, 0.9, 0.0);
        let mut first_loss = None;
        let mut last_loss = 0.0;
        for _ in 0..30 {
            let (logits, caches) = net.forward_train(&xs).unwrap();
            let (loss, dlogits) = softmax_xent(&logits, &labels, None);
            let mut grads = net.zero_grads();
            net.backward(&caches, dlogits, Some(&mut grads), false);
            opt.step(&mut net, &grads, 0.05);
            first_loss.get_or_insert(loss);
            last_loss = loss;
        }
        assert!(
            last_loss < first_loss.unwrap() * 0.5,
            "loss did not halve: {first_loss:?} -> {last_loss}"
        );
        let logits = net.forward(&xs).unwrap();
        let correct = logits
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(row, &y)| argmax(row.as_slice().unwrap()) == y)
            .count();
        assert!(correct >= 28, "only {correct}/32 correct after training");
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let run = || {
            let mut net = Network::build("tinycnn", (1, 8, 8), 2, 30).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let xs = Array4::from_shape_fn((16, 1, 8, 8), |_| rng.gen::<f32>());
            let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
            let mut opt = SgdMomentum::new(&net, 0.9, 5e-4);
            for _ in 0..5 {
                let (logits, caches) = net.forward_train(&xs).unwrap();
                let (_, dlogits) = softmax_xent(&logits, &labels, None);
                let mut grads = net.zero_grads();
                net.backward(&caches, dlogits, Some(&mut grads), false);
                opt.step(&mut net, &grads, 0.05);
            }
            net.params_flat()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.1, 0, 30) - 0.1).abs() < 1e-12);
        let mid = cosine_lr(0.1, 15, 30);
        assert!((mid - 0.05).abs() < 1e-12);
        let last = cosine_lr(0.1, 29, 30);
        assert!(last > 0.0 && last < 0.001);
    }

    #[test]
    fn penultimate_features_have_declared_width() {
        let net = Network::build("tinycnn", (3, 8, 8), 4, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_input(&mut rng, 6, 3, 8, 8);
        let f = net.penultimate_features(&x).unwrap();
        assert_eq!(f.dim(), (6, net.feature_dim()));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = vec![3.0f32, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..500 {
            let grads: Vec<f32> = params.iter().map(|&p| 2.0 * (p - 1.0)).collect();
            opt.step(&mut params, &grads);
        }
        assert!((params[0] - 1.0).abs() < 1e-2);
        assert!((params[1] - 1.0).abs() < 1e-2);
    }
}
