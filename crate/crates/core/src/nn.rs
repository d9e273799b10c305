//! Small differentiable building blocks on top of `candle_core`.
//!
//! Everything here works on channel-last frames `(N, H, W, C)` and keeps all
//! learnable tensors in a [`ParamStore`] so they can be addressed by name for
//! checkpointing, optimisation and gradient checks.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Lower bound added to every softplus-parameterised standard deviation.
pub const MIN_STD: f64 = 1e-4;

/// Named learnable tensors.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Registers a tensor initialised uniformly in `[-bound, bound]`.
    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat f64 copy of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Overwrites one parameter in place from flat values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if values.len() != var.elem_count() {
            return Err(Error::Config(format!(
                "parameter {name}: expected {} values, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Sets a single coordinate; used by finite-difference probes.
    pub fn set_coord(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let mut values = self.values(name)?;
        values[index] = value;
        self.set_values(name, &values)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `log(1 + exp(x))`, computed without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

pub fn scalar_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `f` to a tensor of rank >= 2 by folding all leading dimensions.
fn over_rows(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    if dims.len() == 2 {
        return f(x);
    }
    let last = *dims.last().expect("rank >= 1");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = f(&x.reshape((rows, last))?)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(y.dim(1)?);
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.uniform(&format!("{name}.w"), &[input, output], bound, rng)?;
        let bias = store.zeros(&format!("{name}.b"), &[output])?;
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.dims1().unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        over_rows(x, |x| Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?))
    }
}

/// Linear layers with ELU between them; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.elu(1.0)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    w_input: Tensor,
    w_hidden: Tensor,
    b_input: Tensor,
    b_hidden: Tensor,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_input: store.uniform(&format!("{name}.wx"), &[input, 3 * hidden], bound, rng)?,
            w_hidden: store.uniform(&format!("{name}.wh"), &[hidden, 3 * hidden], bound, rng)?,
            b_input: store.uniform(&format!("{name}.bx"), &[3 * hidden], bound, rng)?,
            b_hidden: store.uniform(&format!("{name}.bh"), &[3 * hidden], bound, rng)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step: `x` is `(B, input)`, `h` is `(B, hidden)`.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.hidden;
        let gx = x.matmul(&self.w_input)?.broadcast_add(&self.b_input)?;
        let gh = h.matmul(&self.w_hidden)?.broadcast_add(&self.b_hidden)?;
        let reset = sigmoid(&(gx.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let update = sigmoid(&(gx.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gx.narrow(1, 2 * n, n)? + (reset * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        let keep = (update.ones_like()? - &update)?;
        Ok(((keep * cand)? + (update * h)?)?)
    }
}

/// `(N, H, W, C)` -> `(N, H/2, W/2, 4C)` as `(N * H/2 * W/2, 4C)` rows.
fn space_to_depth(x: &Tensor) -> Result<(Tensor, usize)> {
    let (n, h, w, c) = x.dims4()?;
    let rows = x
        .reshape((n, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n * (h / 2) * (w / 2), 4 * c))?;
    Ok((rows, h / 2))
}

/// Inverse of [`space_to_depth`]: `(N * h * w, 4C)` rows -> `(N, 2h, 2w, C)`.
fn depth_to_space(rows: &Tensor, n: usize, side: usize) -> Result<Tensor> {
    let c = rows.dim(1)? / 4;
    Ok(rows
        .reshape((n, side, side, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n, 2 * side, 2 * side, c))?)
}

fn halvings(side: usize) -> Result<usize> {
    if side < 4 || !side.is_power_of_two() {
        return Err(Error::Config(format!("frame side {side} must be a power of two >= 4")));
    }
    Ok(side.trailing_zeros() as usize - 2)
}

/// Frame encoder: stride-2 convolutions with 2x2 kernels down to a 4x4 map,
/// then a full-extent convolution to a feature vector. ELU throughout.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    convs: Vec<Linear>,
    head: Linear,
}

impl ConvEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        side: usize,
        channels: usize,
        conv_channels: &[usize],
        feature: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let depth = halvings(side)?;
        if conv_channels.len() < depth {
            return Err(Error::Config(format!("need {depth} conv channel widths, got {}", conv_channels.len())));
        }
        let mut convs = Vec::with_capacity(depth);
        let mut c = channels;
        for (i, &out) in conv_channels.iter().take(depth).enumerate() {
            convs.push(Linear::new(store, &format!("{name}.conv{i}"), 4 * c, out, rng)?);
            c = out;
        }
        let head = Linear::new(store, &format!("{name}.head"), 16 * c, feature, rng)?;
        Ok(Self { convs, head })
    }

    /// `(N, H, W, C)` -> `(N, feature)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let mut h = x.clone();
        for conv in &self.convs {
            let (rows, side) = space_to_depth(&h)?;
            let y = conv.forward(&rows)?.elu(1.0)?;
            let c = y.dim(1)?;
            h = y.reshape((n, side, side, c))?;
        }
        let flat = h.flatten_from(1)?;
        Ok(self.head.forward(&flat)?.elu(1.0)?)
    }
}

/// Mirror of [`ConvEncoder`]; outputs raw per-pixel distribution parameters.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    stem: Mlp,
    deconvs: Vec<Linear>,
    base_channels: usize,
    out_shape: (usize, usize, usize),
}

impl ConvDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        side: usize,
        channels: usize,
        conv_channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let depth = halvings(side)?;
        let widths: Vec<usize> = conv_channels.iter().take(depth).rev().copied().collect();
        let base_channels = if depth == 0 { channels } else { widths[0] };
        let stem = Mlp::new(store, &format!("{name}.stem"), &[input, hidden, 16 * base_channels], rng)?;
        let mut deconvs = Vec::with_capacity(depth);
        for i in 0..depth {
            let out = if i + 1 < depth { widths[i + 1] } else { channels };
            deconvs.push(Linear::new(store, &format!("{name}.deconv{i}"), widths[i], 4 * out, rng)?);
        }
        Ok(Self { stem, deconvs, base_channels, out_shape: (side, side, channels) })
    }

    /// `(N, input)` -> `(N, H, W, C)`.
    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        let n = s.dim(0)?;
        let mut h = self.stem.forward(s)?;
        if self.deconvs.is_empty() {
            let (hh, ww, cc) = self.out_shape;
            return Ok(h.reshape((n, hh, ww, cc))?);
        }
        h = h.elu(1.0)?.reshape((n * 16, self.base_channels))?;
        let mut side = 4;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let y = deconv.forward(&h)?;
            let img = depth_to_space(&y, n, side)?;
            side *= 2;
            if i + 1 == self.deconvs.len() {
                return Ok(img);
            }
            let c = img.dim(3)?;
            h = img.elu(1.0)?.reshape((n * side * side, c))?;
        }
        unreachable!("loop returns on the last layer")
    }
}

/// 1-D convolution stack over time with kernel width 3 and centred zero
/// padding; input and output are `(B, T, C)`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    layers: Vec<Linear>,
}

impl TemporalConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), 3 * w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn neighbours(x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let zeros = Tensor::zeros((b, 1, c), x.dtype(), x.device())?;
        let (prev, next) = if t == 1 {
            (zeros.clone(), zeros)
        } else {
            (
                Tensor::cat(&[&zeros, &x.narrow(1, 0, t - 1)?], 1)?,
                Tensor::cat(&[&x.narrow(1, 1, t - 1)?, &zeros], 1)?,
            )
        };
        Ok(Tensor::cat(&[&prev, x, &next], 2)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&Self::neighbours(&h)?)?;
            if i + 1 < self.layers.len() {
                h = h.elu(1.0)?;
            }
        }
        Ok(h)
    }
}

/// Diagonal Gaussian with parameters over the last dimension.
#[derive(Debug, Clone)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

impl DiagGaussian {
    /// Splits `(.., 2d)` raw network output into mean and softplus std.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let d = raw.dim(D::Minus1)? / 2;
        let mean = raw.narrow(D::Minus1, 0, d)?;
        let std = (softplus(&raw.narrow(D::Minus1, d, d)?)? + MIN_STD)?;
        Ok(Self { mean, std })
    }

    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (&self.std * eps)?)?)
    }

    /// `KL(self || other)`, summed over the last dimension.
    pub fn kl(&self, other: &Self) -> Result<Tensor> {
        let var_ratio = (&self.std / &other.std)?.sqr()?;
        let mean_term = ((&self.mean - &other.mean)? / &other.std)?.sqr()?;
        let per_dim = ((((var_ratio.clone() + mean_term)? - 1.0)? - var_ratio.log()?)? * 0.5)?;
        Ok(per_dim.sum(D::Minus1)?)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let z = ((x - &self.mean)? / &self.std)?;
        let per_dim = (((z.sqr()? * -0.5)? - self.std.log()?)? - 0.5 * (2.0 * std::f64::consts::PI).ln())?;
        Ok(per_dim.sum(D::Minus1)?)
    }
}

/// Elementwise `KL(Bern(sigmoid(q)) || Bern(sigmoid(p)))` from logits.
pub fn bernoulli_kl_logits(q_logit: &Tensor, p_logit: &Tensor) -> Result<Tensor> {
    let q = sigmoid(q_logit)?;
    let one_minus_q = (q.ones_like()? - &q)?;
    let pos = (log_sigmoid(q_logit)? - log_sigmoid(p_logit)?)?;
    let neg = (log_sigmoid(&q_logit.neg()?)? - log_sigmoid(&p_logit.neg()?)?)?;
    Ok(((q * pos)? + (one_minus_q * neg)?)?)
}

/// `KL(Bern(q) || Bern(p))` for probabilities, with `0 log 0 = 0`.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Standard logistic draws: the difference of two Gumbel(0, 1) variables.
pub fn logistic_values<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

/// Rejects tensors that contain NaN or infinity.
pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    #[test]
    fn softplus_matches_scalar_formula() {
        let x = t(&[-40.0, -2.0, 0.0, 3.0, 50.0]);
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xi, yi) in [-40.0f64, -2.0, 0.0, 3.0, 50.0].iter().zip(y) {
            let expect = if *xi > 30.0 { *xi } else { xi.exp().ln_1p() };
            assert!((yi - expect).abs() < 1e-12, "{xi}: {yi} vs {expect}");
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = sigmoid(&t(&[0.0])).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.5);
        assert_eq!(scalar_sigmoid(0.0), 0.5);
    }

    #[test]
    fn bernoulli_kl_closed_forms() {
        assert_eq!(bernoulli_kl(0.5, 0.5), 0.0);
        assert!((bernoulli_kl(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        let q = t(&[0.3, -1.2]);
        let p = t(&[-0.7, 2.0]);
        let k = bernoulli_kl_logits(&q, &p).unwrap().to_vec1::<f64>().unwrap();
        for (i, (a, b)) in [(0.3, -0.7), (-1.2, 2.0)].iter().enumerate() {
            let expect = bernoulli_kl(scalar_sigmoid(*a), scalar_sigmoid(*b));
            assert!((k[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_kl_of_identical_pair_is_zero() {
        let g = DiagGaussian { mean: t(&[0.3, -1.0]), std: t(&[0.5, 2.0]) };
        let k = g.kl(&g).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn space_depth_round_trip() {
        let x = Tensor::arange(0f64, 2.0 * 8.0 * 8.0 * 3.0, &Device::Cpu).unwrap().reshape((2, 8, 8, 3)).unwrap();
        let (rows, side) = space_to_depth(&x).unwrap();
        assert_eq!(rows.dims(), &[2 * 16, 12]);
        let back = depth_to_space(&rows, 2, side).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn encoder_decoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        let enc = ConvEncoder::new(&mut store, "enc", 32, 3, &[8, 16, 16], 24, &mut rng).unwrap();
        let dec = ConvDecoder::new(&mut store, "dec", 5, 16, 32, 3, &[8, 16, 16], &mut rng).unwrap();
        let x = Tensor::zeros((3, 32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x).unwrap().dims(), &[3, 24]);
        let s = Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(dec.forward(&s).unwrap().dims(), &[3, 32, 32, 3]);

        let mut store = ParamStore::new(DType::F64);
        let dec = ConvDecoder::new(&mut store, "dec", 2, 4, 4, 3, &[], &mut rng).unwrap();
        let s = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(dec.forward(&s).unwrap().dims(), &[2, 4, 4, 3]);
    }

    #[test]
    fn temporal_conv_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        let conv = TemporalConv::new(&mut store, "tc", &[2, 4, 1], &mut rng).unwrap();
        let x = normal_tensor(&mut rng, &[1, 8, 2], DType::F64).unwrap();
        let y0 = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // two layers of width-3 kernels see at most 2 steps either side
        let mut v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        v[0] += 1.0;
        let x2 = Tensor::from_vec(v, (1, 8, 2), &Device::Cpu).unwrap();
        let y1 = conv.forward(&x2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for t in 3..8 {
            assert_eq!(y0[t], y1[t]);
        }
        assert_ne!(y0[0], y1[0]);
    }
}
