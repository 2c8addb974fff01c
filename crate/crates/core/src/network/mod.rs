//! Network models: pooled expansive convolutional networks, classical
//! contracting ones, and the fully connected ReLU networks the compiler
//! consumes.

pub mod format;

pub use format::{deserialize, load_model, save_model, serialize};

use crate::conv::{conv_classic, conv_padded_into, max_pool, Filter, PoolParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// One convolutional layer: `v -> w * v + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    filter: Filter<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(filter: Filter<T>, bias: Vec<T>) -> Result<Self> {
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("bias entries must be finite"));
        }
        Ok(Self { filter, bias })
    }

    pub fn filter(&self) -> &Filter<T> {
        &self.filter
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }
}

/// Widths `(before pooling, after pooling)` of each layer of a padded network
/// with input dimension `d`, filter length `s` and the given pooling sizes.
pub fn layer_widths(d: usize, s: usize, pool_sizes: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut width = d;
    pool_sizes
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let pre = width + s;
            if u == 0 || u > pre {
                return Err(Error::Structural(format!(
                    "layer {}: pooling size {u} invalid for width {pre}",
                    i + 1
                )));
            }
            width = pre / u;
            Ok((pre, width))
        })
        .collect()
}

/// Pooling sizes selected by the length-triggered schedule for `depth` layers.
pub fn scheduled_pool_sizes(d: usize, s: usize, depth: usize) -> Result<Vec<usize>> {
    let p = PoolParams::new(d, s)?;
    let mut width = d;
    Ok((1..=depth)
        .map(|layer| {
            let pre = width + s;
            let u = p.pool_size(pre, layer);
            width = pre / u;
            u
        })
        .collect())
}

/// Expansive convolutional network with per-layer max-pooling:
/// `x -> a . P(σ(C_L(... P(σ(C_1 x)) ...)))`.
///
/// A pooling size of 1 means the layer is not pooled. Widths are checked at
/// construction, so evaluation never meets a shape mismatch.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEdcnn<T> {
    s: usize,
    d: usize,
    layers: Vec<ConvLayer<T>>,
    pool_sizes: Vec<usize>,
    output: Vec<T>,
}

impl<T: Scalar> PooledEdcnn<T> {
    pub fn new(
        s: usize,
        d: usize,
        layers: Vec<ConvLayer<T>>,
        pool_sizes: Vec<usize>,
        output: Vec<T>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Structural("input dimension must be positive".into()));
        }
        if layers.len() != pool_sizes.len() {
            return Err(Error::Structural(format!(
                "{} layers but {} pooling sizes",
                layers.len(),
                pool_sizes.len()
            )));
        }
        let widths = layer_widths(d, s, &pool_sizes)?;
        for (i, (layer, &(pre, _))) in layers.iter().zip(&widths).enumerate() {
            if layer.filter.bound() != s {
                return Err(Error::Structural(format!(
                    "layer {}: filter declared on {{0..{}}}, network uses s = {s}",
                    i + 1,
                    layer.filter.bound()
                )));
            }
            if layer.bias.len() != pre {
                return Err(Error::Structural(format!(
                    "layer {}: bias has {} entries, layer width is {pre}",
                    i + 1,
                    layer.bias.len()
                )));
            }
        }
        let final_width = widths.last().map_or(d, |w| w.1);
        if output.len() != final_width {
            return Err(Error::Structural(format!(
                "output weights have {} entries, final width is {final_width}",
                output.len()
            )));
        }
        if output.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("output weights must be finite"));
        }
        Ok(Self {
            s,
            d,
            layers,
            pool_sizes,
            output,
        })
    }

    /// A network whose pooling sizes follow the length-triggered schedule.
    pub fn scheduled(s: usize, d: usize, layers: Vec<ConvLayer<T>>, output: Vec<T>) -> Result<Self> {
        let pool_sizes = scheduled_pool_sizes(d, s, layers.len())?;
        Self::new(s, d, layers, pool_sizes, output)
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn pool_sizes(&self) -> &[usize] {
        &self.pool_sizes
    }

    pub fn output_weights(&self) -> &[T] {
        &self.output
    }

    pub fn widths(&self) -> Vec<(usize, usize)> {
        layer_widths(self.d, self.s, &self.pool_sizes).expect("validated at construction")
    }

    /// Largest width reached anywhere in the network, input included.
    pub fn max_width(&self) -> usize {
        self.widths().iter().map(|w| w.0).fold(self.d, usize::max)
    }

    /// Whether every pooling size matches the length-triggered schedule.
    pub fn follows_schedule(&self) -> bool {
        scheduled_pool_sizes(self.d, self.s, self.depth()).is_ok_and(|p| p == self.pool_sizes)
    }

    /// Number of stored reals: filters, biases and output weights.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.filter.coeffs().len() + l.bias.len())
            .sum::<usize>()
            + self.output.len()
    }

    /// Output of the last layer after pooling, before the output weights.
    pub fn features(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d {
            return Err(Error::Structural(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.d
            )));
        }
        let mut cur = x.to_vec();
        let mut buf = Vec::new();
        for (layer, &u) in self.layers.iter().zip(&self.pool_sizes) {
            buf.resize(cur.len() + self.s, T::zero());
            conv_padded_into(layer.filter.coeffs(), &cur, &mut buf);
            for (z, &b) in buf.iter_mut().zip(&layer.bias) {
                *z = (*z + b).max(T::zero());
            }
            if u == 1 {
                std::mem::swap(&mut cur, &mut buf);
            } else {
                cur = max_pool(&buf, u)?;
            }
        }
        Ok(cur)
    }

    pub fn eval(&self, x: &[T]) -> Result<T> {
        let features = self.features(x)?;
        Ok(features.iter().zip(&self.output).map(|(&v, &a)| v * a).sum())
    }

    /// [`eval`](Self::eval) plus whether `x` lies outside the unit cube.
    pub fn eval_flagged(&self, x: &[T]) -> Result<(T, bool)> {
        let outside = x.iter().any(|&t| !(t >= T::zero() && t <= T::one()));
        Ok((self.eval(x)?, outside))
    }

    /// All parameters in layer order: filter, bias, then output weights.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.filter.coeffs());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.output);
        out
    }

    /// Same architecture with parameters read from `params` in the order of
    /// [`params`](Self::params).
    pub fn with_params(&self, params: &[T]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let filter = Filter::new(take(l.filter.coeffs().len()))?;
                ConvLayer::new(filter, take(l.bias.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let output = take(self.output.len());
        Self::new(self.s, self.d, layers, self.pool_sizes.clone(), output)
    }
}

/// Classical network built from contracting convolutions; width shrinks by
/// `s` per layer and must stay positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicDcnn<T> {
    s: usize,
    d: usize,
    layers: Vec<ConvLayer<T>>,
    output: Vec<T>,
}

impl<T: Scalar> ClassicDcnn<T> {
    pub fn new(s: usize, d: usize, layers: Vec<ConvLayer<T>>, output: Vec<T>) -> Result<Self> {
        let mut width = d;
        for (i, layer) in layers.iter().enumerate() {
            if layer.filter.bound() != s {
                return Err(Error::Structural(format!(
                    "layer {}: filter bound {} differs from s = {s}",
                    i + 1,
                    layer.filter.bound()
                )));
            }
            if width <= s {
                return Err(Error::Structural(format!(
                    "layer {}: width {width} exhausted by contracting filter of length {s}",
                    i + 1
                )));
            }
            width -= s;
            if layer.bias.len() != width {
                return Err(Error::Structural(format!(
                    "layer {}: bias has {} entries, layer width is {width}",
                    i + 1,
                    layer.bias.len()
                )));
            }
        }
        if output.len() != width {
            return Err(Error::Structural(format!(
                "output weights have {} entries, final width is {width}",
                output.len()
            )));
        }
        Ok(Self { s, d, layers, output })
    }

    pub fn eval(&self, x: &[T]) -> Result<T> {
        if x.len() != self.d {
            return Err(Error::Structural(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.d
            )));
        }
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = conv_classic(&layer.filter, &cur)?
                .into_iter()
                .zip(&layer.bias)
                .map(|(z, &b)| (z + b).max(T::zero()))
                .collect();
        }
        Ok(cur.iter().zip(&self.output).map(|(&v, &a)| v * a).sum())
    }
}

/// Affine map followed by ReLU: `x -> σ(W x + θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer<T> {
    weights: Matrix<T>,
    bias: Vec<T>,
}

impl<T: Scalar> AffineLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Structural(format!(
                "bias has {} entries, weight matrix has {} rows",
                bias.len(),
                weights.rows()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("bias entries must be finite"));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self
            .weights
            .matvec(x)?
            .into_iter()
            .zip(&self.bias)
            .map(|(z, &b)| (z + b).max(T::zero()))
            .collect())
    }
}

/// Fully connected ReLU network `x -> a . σ(W_K(... σ(W_1 x + θ_1) ...) + θ_K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfcn<T> {
    layers: Vec<AffineLayer<T>>,
    output: Vec<T>,
}

impl<T: Scalar> Dfcn<T> {
    pub fn new(layers: Vec<AffineLayer<T>>, output: Vec<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Structural("a fully connected network needs a layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Structural(format!(
                    "layer {} outputs {} values, layer {} expects {}",
                    i + 1,
                    pair[0].output_dim(),
                    i + 2,
                    pair[1].input_dim()
                )));
            }
        }
        let last = layers.last().expect("nonempty").output_dim();
        if output.len() != last {
            return Err(Error::Structural(format!(
                "output weights have {} entries, last layer has width {last}",
                output.len()
            )));
        }
        Ok(Self { layers, output })
    }

    pub fn layers(&self) -> &[AffineLayer<T>] {
        &self.layers
    }

    pub fn output_weights(&self) -> &[T] {
        &self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden(&self, x: &[T]) -> Result<Vec<T>> {
        self.layers.iter().try_fold(x.to_vec(), |h, l| l.apply(&h))
    }

    pub fn eval(&self, x: &[T]) -> Result<T> {
        Ok(self.hidden(x)?.iter().zip(&self.output).map(|(&h, &a)| h * a).sum())
    }
}

/// Clamp to `[-m, m]`, i.e. `sign(y) min(|y|, m)`. `m` must be positive.
#[inline]
pub fn truncate<T: Scalar>(y: T, m: T) -> T {
    debug_assert!(m > T::zero());
    y.max(-m).min(m)
}

/// Smoothness class parameters: order `r`, Hölder constant `c0`, sup bound `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessSpec<T> {
    pub r: T,
    pub c0: T,
    pub m: T,
}

impl<T: Scalar> SmoothnessSpec<T> {
    pub fn new(r: T, c0: T, m: T) -> Result<Self> {
        for (name, v) in [("r", r), ("c0", c0), ("M", m)] {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        Ok(Self { r, c0, m })
    }

    /// `r = k + μ` with integer `k >= 0` and `0 < μ <= 1`.
    pub fn decomposition(&self) -> (usize, T) {
        let k = self.r.ceil() - T::one();
        let k_int = k.to_usize().expect("r is finite and positive");
        (k_int, self.r - k)
    }
}
