//! Small convolutional classifier with hand-written reverse mode.
//!
//! Activations are batched `[B, C, H, W]` (image) or `[B, D]` (flat).
//! Convolutions are 3x3, stride 1, zero padding 1; pooling is 2x2 max with
//! stride 2 (odd trailing rows/columns are dropped).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { cin: usize, cout: usize },
    Relu,
    MaxPool2,
    Flatten,
    Linear { din: usize, dout: usize },
}

/// Shape of one sample's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Image { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Act {
    fn len(self) -> usize {
        match self {
            Act::Image { c, h, w } => c * h * w,
            Act::Flat { d } => d,
        }
    }

    fn batched(self, b: usize) -> Vec<usize> {
        match self {
            Act::Image { c, h, w } => vec![b, c, h, w],
            Act::Flat { d } => vec![b, d],
        }
    }
}

/// A named parameter and its gradient buffer (same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    batch: usize,
    /// Input of every layer, in layer order.
    inputs: Vec<Vec<T>>,
    /// Argmax positions for each pooling layer (indexed by layer).
    pool_argmax: Vec<Vec<usize>>,
}

/// Feed-forward classifier `p(y|x)`: layers produce logits, softmax is
/// applied by the loss functions.
#[derive(Debug, Clone)]
pub struct Classifier<T = f64> {
    input: [usize; 3],
    specs: Vec<LayerSpec>,
    /// Activation shape entering each layer, plus the output shape last.
    acts: Vec<Act>,
    /// Index into `params` of each layer's weight (bias follows it).
    param_slot: Vec<Option<usize>>,
    params: Vec<Param<T>>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Classifier<T> {
    /// Builds a zero-initialised network and checks that the layer list is
    /// consistent with the `[channels, height, width]` input.
    pub fn new(input: [usize; 3], specs: Vec<LayerSpec>) -> Result<Self> {
        let [c, h, w] = input;
        if c == 0 || h == 0 || w == 0 {
            bail!(Dimension, "empty input shape {:?}", input);
        }
        let mut act = Act::Image { c, h, w };
        let mut acts = vec![act];
        let mut params = Vec::new();
        let mut param_slot = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let (next, slot) = match (*spec, act) {
                (LayerSpec::Conv3x3 { cin, cout }, Act::Image { c, h, w }) if cin == c && cout > 0 => {
                    let slot = params.len();
                    push_param(&mut params, format!("conv{i}.weight"), &[cout, cin, 3, 3]);
                    push_param(&mut params, format!("conv{i}.bias"), &[cout]);
                    (Act::Image { c: cout, h, w }, Some(slot))
                }
                (LayerSpec::Relu, a) => (a, None),
                (LayerSpec::MaxPool2, Act::Image { c, h, w }) if h >= 2 && w >= 2 => {
                    (Act::Image { c, h: h / 2, w: w / 2 }, None)
                }
                (LayerSpec::Flatten, a) => (Act::Flat { d: a.len() }, None),
                (LayerSpec::Linear { din, dout }, Act::Flat { d }) if din == d && dout > 0 => {
                    let slot = params.len();
                    push_param(&mut params, format!("linear{i}.weight"), &[dout, din]);
                    push_param(&mut params, format!("linear{i}.bias"), &[dout]);
                    (Act::Flat { d: dout }, Some(slot))
                }
                (spec, a) => bail!(Dimension, "layer {} ({:?}) cannot take input {:?}", i, spec, a),
            };
            act = next;
            acts.push(act);
            param_slot.push(slot);
        }
        if !matches!(act, Act::Flat { .. }) {
            bail!(Dimension, "network must end in a flat (logit) layer, got {:?}", act);
        }
        Ok(Self { input, specs, acts, param_slot, params, cache: None })
    }

    /// conv(32)-relu-pool-conv(64)-relu-pool-flatten-linear(128)-relu-linear(N)
    pub fn standard(input: [usize; 3], num_classes: usize) -> Result<Self> {
        Self::new(input, standard_specs(input, num_classes, [32, 64, 128])?)
    }

    /// Same topology with custom widths (conv1, conv2, hidden).
    pub fn standard_with_widths(
        input: [usize; 3],
        num_classes: usize,
        widths: [usize; 3],
    ) -> Result<Self> {
        Self::new(input, standard_specs(input, num_classes, widths)?)
    }

    /// He fan-in normal initialisation of weights; biases are zeroed.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = rng::keyed(seed, &[rng::stream::INIT]);
        for (li, slot) in self.param_slot.iter().enumerate() {
            let Some(slot) = *slot else { continue };
            let fan_in = match self.specs[li] {
                LayerSpec::Conv3x3 { cin, .. } => cin * 9,
                LayerSpec::Linear { din, .. } => din,
                _ => unreachable!(),
            };
            let std = libm::sqrt(2.0 / fan_in as f64);
            for v in self.params[slot].value.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::cast(z * std);
            }
            self.params[slot + 1].value.data_mut().fill(T::zero());
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn num_classes(&self) -> usize {
        self.acts.last().map(|a| a.len()).unwrap_or(0)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites a parameter by name; the shape must already match.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let Some(p) = self.params.iter_mut().find(|p| p.name == name) else {
            bail!(Data, "unknown parameter {name}");
        };
        if p.value.shape() != value.shape() {
            bail!(Dimension, "parameter {} has shape {:?}, got {:?}", name, p.value.shape(), value.shape());
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same network in another precision. The forward cache is dropped.
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            input: self.input,
            specs: self.specs.clone(),
            acts: self.acts.clone(),
            param_slot: self.param_slot.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
            cache: None,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let [c, h, w] = self.input;
        match batch.shape() {
            [b, bc, bh, bw] if *bc == c && *bh == h && *bw == w && *b > 0 => Ok(*b),
            s => bail!(Dimension, "expected batch [B, {}, {}, {}], got {:?}", c, h, w, s),
        }
    }

    /// Training forward pass: returns logits `[B, N]` and caches what
    /// [`Classifier::backward`] needs.
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        let mut cache = ForwardCache { batch: b, inputs: Vec::new(), pool_argmax: Vec::new() };
        let out = self.run(batch.data().to_vec(), b, Some(&mut cache))?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Inference forward pass; leaves any cached training pass untouched.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        self.run(batch.data().to_vec(), b, None)
    }

    fn run(&self, mut x: Vec<T>, b: usize, mut cache: Option<&mut ForwardCache<T>>) -> Result<Tensor<T>> {
        for (li, spec) in self.specs.iter().enumerate() {
            let act = self.acts[li];
            let next = match (*spec, act) {
                (LayerSpec::Conv3x3 { cin, cout }, Act::Image { h, w, .. }) => {
                    let slot = self.param_slot[li].unwrap();
                    conv_forward(
                        &x,
                        self.params[slot].value.data(),
                        self.params[slot + 1].value.data(),
                        b,
                        cin,
                        cout,
                        h,
                        w,
                    )
                }
                (LayerSpec::Relu, _) => x.iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect(),
                (LayerSpec::MaxPool2, Act::Image { c, h, w }) => {
                    let (out, arg) = pool_forward(&x, b * c, h, w);
                    if let Some(cache) = cache.as_deref_mut() {
                        cache.pool_argmax.push(arg);
                    }
                    out
                }
                (LayerSpec::Flatten, _) => x.clone(),
                (LayerSpec::Linear { din, dout }, _) => {
                    let slot = self.param_slot[li].unwrap();
                    linear_forward(
                        &x,
                        self.params[slot].value.data(),
                        self.params[slot + 1].value.data(),
                        b,
                        din,
                        dout,
                    )
                }
                _ => unreachable!("validated at construction"),
            };
            if let Some(cache) = cache.as_deref_mut() {
                cache.inputs.push(x);
            }
            x = next;
        }
        let out = Tensor::new(self.acts.last().unwrap().batched(b), x)?;
        if !out.is_finite() {
            return Err(Error::NumericDivergence("non-finite logits".into()));
        }
        Ok(out)
    }

    /// Back-propagates `grad_logits` (dL/dlogits, `[B, N]`) through the cached
    /// forward pass and overwrites every parameter gradient. The cache is
    /// consumed.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let Some(cache) = self.cache.take() else {
            return Err(Error::Usage("backward called without a cached forward pass"));
        };
        let b = cache.batch;
        let expected = self.acts.last().unwrap().batched(b);
        if grad_logits.shape() != expected.as_slice() {
            bail!(Dimension, "logit gradient {:?} does not match {:?}", grad_logits.shape(), expected);
        }
        let mut g = grad_logits.data().to_vec();
        let mut pool_idx = cache.pool_argmax.len();
        for li in (0..self.specs.len()).rev() {
            let x = &cache.inputs[li];
            let act = self.acts[li];
            g = match (self.specs[li], act) {
                (LayerSpec::Conv3x3 { cin, cout }, Act::Image { h, w, .. }) => {
                    let slot = self.param_slot[li].unwrap();
                    let (gw, gb) = (&mut Vec::new(), &mut Vec::new());
                    let gx = conv_backward(x, self.params[slot].value.data(), &g, b, cin, cout, h, w, gw, gb);
                    self.params[slot].grad.data_mut().copy_from_slice(gw);
                    self.params[slot + 1].grad.data_mut().copy_from_slice(gb);
                    gx
                }
                (LayerSpec::Relu, _) => {
                    x.iter().zip(&g).map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() }).collect()
                }
                (LayerSpec::MaxPool2, Act::Image { .. }) => {
                    pool_idx -= 1;
                    let mut gx = vec![T::zero(); x.len()];
                    for (&src, &gv) in cache.pool_argmax[pool_idx].iter().zip(&g) {
                        gx[src] = gx[src] + gv;
                    }
                    gx
                }
                (LayerSpec::Flatten, _) => g,
                (LayerSpec::Linear { din, dout }, _) => {
                    let slot = self.param_slot[li].unwrap();
                    let (gw, gb) = (&mut Vec::new(), &mut Vec::new());
                    let gx = linear_backward(x, self.params[slot].value.data(), &g, b, din, dout, gw, gb);
                    self.params[slot].grad.data_mut().copy_from_slice(gw);
                    self.params[slot + 1].grad.data_mut().copy_from_slice(gb);
                    gx
                }
                _ => unreachable!(),
            };
        }
        Ok(())
    }
}

fn push_param<T: Scalar>(params: &mut Vec<Param<T>>, name: String, shape: &[usize]) {
    params.push(Param { name, value: Tensor::zeros(shape), grad: Tensor::zeros(shape) });
}

fn standard_specs(input: [usize; 3], n: usize, widths: [usize; 3]) -> Result<Vec<LayerSpec>> {
    let [c, h, w] = input;
    if n < 2 {
        bail!(Config, "need at least two classes, got {n}");
    }
    if h < 4 || w < 4 {
        bail!(Dimension, "standard classifier needs at least 4x4 inputs, got {h}x{w}");
    }
    let [c1, c2, hidden] = widths;
    let flat = c2 * (h / 2 / 2) * (w / 2 / 2);
    Ok(vec![
        LayerSpec::Conv3x3 { cin: c, cout: c1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv3x3 { cin: c1, cout: c2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Flatten,
        LayerSpec::Linear { din: flat, dout: hidden },
        LayerSpec::Relu,
        LayerSpec::Linear { din: hidden, dout: n },
    ])
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); b * cout * plane];
    for bi in 0..b {
        for oc in 0..cout {
            let o = &mut out[(bi * cout + oc) * plane..][..plane];
            o.fill(bias[oc]);
            for ic in 0..cin {
                let xin = &x[(bi * cin + ic) * plane..][..plane];
                let k = &weight[(oc * cin + ic) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wv = k[ky * 3 + kx];
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let orow = &mut o[oy * w + x0..oy * w + x1];
                            let irow = &xin[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov = *ov + wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    g: &[T],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    gw: &mut Vec<T>,
    gb: &mut Vec<T>,
) -> Vec<T> {
    let plane = h * w;
    let mut gx = vec![T::zero(); b * cin * plane];
    gw.clear();
    gw.resize(cout * cin * 9, T::zero());
    gb.clear();
    gb.resize(cout, T::zero());
    for bi in 0..b {
        for oc in 0..cout {
            let go = &g[(bi * cout + oc) * plane..][..plane];
            gb[oc] = gb[oc] + go.iter().fold(T::zero(), |a, &v| a + v);
            for ic in 0..cin {
                let xin = &x[(bi * cin + ic) * plane..][..plane];
                let gxin = &mut gx[(bi * cin + ic) * plane..][..plane];
                let kbase = (oc * cin + ic) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wv = weight[kbase + ky * 3 + kx];
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let grow = &go[oy * w + x0..oy * w + x1];
                            let ioff = iy * w + (x0 as isize + dx) as usize;
                            let irow = &xin[ioff..][..x1 - x0];
                            for (&gv, &iv) in grow.iter().zip(irow) {
                                acc = acc + gv * iv;
                            }
                            let girow = &mut gxin[ioff..][..x1 - x0];
                            for (gi, &gv) in girow.iter_mut().zip(grow) {
                                *gi = *gi + wv * gv;
                            }
                        }
                        gw[kbase + ky * 3 + kx] = gw[kbase + ky * 3 + kx] + acc;
                    }
                }
            }
        }
    }
    gx
}

fn pool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // first maximum wins on ties
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], b: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(b * dout);
    for bi in 0..b {
        let xr = &x[bi * din..][..din];
        for o in 0..dout {
            let wr = &weight[o * din..][..din];
            let dot = wr.iter().zip(xr).fold(T::zero(), |a, (&wv, &xv)| a + wv * xv);
            out.push(bias[o] + dot);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    g: &[T],
    b: usize,
    din: usize,
    dout: usize,
    gw: &mut Vec<T>,
    gb: &mut Vec<T>,
) -> Vec<T> {
    gw.clear();
    gw.resize(dout * din, T::zero());
    gb.clear();
    gb.resize(dout, T::zero());
    let mut gx = vec![T::zero(); b * din];
    for bi in 0..b {
        let xr = &x[bi * din..][..din];
        let gxr = &mut gx[bi * din..][..din];
        for o in 0..dout {
            let gv = g[bi * dout + o];
            gb[o] = gb[o] + gv;
            let wr = &weight[o * din..][..din];
            let gwr = &mut gw[o * din..][..din];
            for i in 0..din {
                gwr[i] = gwr[i] + gv * xr[i];
                gxr[i] = gxr[i] + gv * wr[i];
            }
        }
    }
    gx
}
