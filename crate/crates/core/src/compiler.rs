//! Compiles fully connected ReLU networks into pooled expansive convolutional
//! networks computing the same function on the unit cube.
//!
//! A block `x -> σ(Wx + θ)` with `W` of size `d̃ × d'` becomes a chain of
//! `L = ceil(d' d̃ / (s-1))` convolutional layers whose filters multiply to the
//! row-stacked `W`, followed by max-pooling of size `d'`. Inner biases keep
//! every pre-activation nonnegative on the input box, so the ReLUs act as the
//! identity until the last layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_padded, max_pool, toeplitz_matrix, Filter};
use crate::error::{Error, Result};
use crate::factor::{factorize_filter, pad_with_deltas, relative_max_error};
use crate::matrix::Matrix;
use crate::network::{layer_widths, scheduled_pool_sizes, AffineLayer, ConvLayer, Dfcn, PooledEdcnn};
use crate::scalar::Scalar;

/// One fully connected layer `x -> σ(Wx + θ)` to be compiled.
pub type AffineBlock<T> = AffineLayer<T>;

/// How inner-layer biases are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasRule {
    /// Scalar bias `2^(ℓ-1) B^ℓ` per layer with `B^ℓ = ‖w^ℓ‖₁ B^(ℓ-1)`.
    Restricted,
    /// Per-entry bias making the smallest pre-activation over the input box
    /// equal to a fixed margin.
    #[default]
    Tight,
}

/// Inner-layer biases of a convolution chain together with the bookkeeping
/// needed to check them.
///
/// `offsets[ℓ]` is the accumulated bias image: the output of layer `ℓ` equals
/// `p_ℓ * x + offsets[ℓ]` where `p_ℓ` is the product of the first `ℓ` filters.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSchedule<T> {
    rule: BiasRule,
    s: usize,
    bounds: Vec<T>,
    biases: Vec<Vec<T>>,
    offsets: Vec<Vec<T>>,
}

impl<T: Scalar> BiasSchedule<T> {
    pub fn rule(&self) -> BiasRule {
        self.rule
    }

    /// Number of layers covered.
    pub fn depth(&self) -> usize {
        self.biases.len()
    }

    pub fn input_width(&self) -> usize {
        self.offsets[0].len()
    }

    /// `B^0, ..., B^L`.
    pub fn bounds(&self) -> &[T] {
        &self.bounds
    }

    /// Bias vectors of layers `1..=L`.
    pub fn biases(&self) -> &[Vec<T>] {
        &self.biases
    }

    /// Scalar biases `b^ℓ`, when every bias vector is constant.
    pub fn scalar_biases(&self) -> Option<Vec<T>> {
        self.biases
            .iter()
            .map(|b| {
                let first = b[0];
                b.iter().all(|&x| x == first).then_some(first)
            })
            .collect()
    }

    /// Accumulated bias images `c_0 = 0, ..., c_L`.
    pub fn offsets(&self) -> &[Vec<T>] {
        &self.offsets
    }
}

fn check_factors<T: Scalar>(factors: &[Filter<T>]) -> Result<usize> {
    let s = factors.first().map_or(0, |f| f.bound());
    for (i, f) in factors.iter().enumerate() {
        if f.is_zero() {
            return Err(Error::invalid(format!("factor {} is the zero filter", i + 1)));
        }
        if f.bound() != s {
            return Err(Error::invalid(format!(
                "factor {} has bound {}, expected {s}",
                i + 1,
                f.bound()
            )));
        }
    }
    Ok(s)
}

fn add_into<T: Scalar>(a: &mut [T], b: &[T]) {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
}

/// Restricted schedule for inputs in `[0,1]^{d'}`: `B^0 = 1`,
/// `B^ℓ = ‖w^ℓ‖₁ B^(ℓ-1)` and `b^ℓ = 2^(ℓ-1) B^ℓ`.
pub fn bias_bounds<T: Scalar>(factors: &[Filter<T>], d_in: usize) -> Result<BiasSchedule<T>> {
    if factors.is_empty() {
        return Err(Error::invalid("bias schedule needs at least one factor"));
    }
    if d_in == 0 {
        return Err(Error::invalid("input width must be positive"));
    }
    restricted_schedule(factors, &vec![T::one(); d_in])
}

/// Restricted schedule for inputs in the box `[0, hi]`.
pub fn restricted_schedule<T: Scalar>(factors: &[Filter<T>], hi: &[T]) -> Result<BiasSchedule<T>> {
    let s = check_factors(factors)?;
    let b0 = hi.iter().fold(T::zero(), |m, &h| m.max(h));
    let mut bounds = vec![b0];
    let mut biases = Vec::with_capacity(factors.len());
    let mut offsets = vec![vec![T::zero(); hi.len()]];
    let mut scale = T::one();
    for w in factors {
        let bound = w.l1_norm() * *bounds.last().expect("nonempty");
        let b = scale * bound;
        scale *= T::lit(2.0);
        let mut c = conv_padded(w, offsets.last().expect("nonempty"))?;
        let bias = vec![b; c.len()];
        add_into(&mut c, &bias);
        bounds.push(bound);
        biases.push(bias);
        offsets.push(c);
    }
    Ok(BiasSchedule {
        rule: BiasRule::Restricted,
        s,
        bounds,
        biases,
        offsets,
    })
}

/// `max_{x ∈ [0,hi]} (p * x)_j` for every output position `j`, or the
/// negated minimum when `negative` is set.
fn box_extreme<T: Scalar>(p: &Filter<T>, hi: &[T], negative: bool) -> Vec<T> {
    let pc = p.coeffs();
    let mut out = vec![T::zero(); hi.len() + p.bound()];
    for (k, &h) in hi.iter().enumerate() {
        if h == T::zero() {
            continue;
        }
        for (t, &c) in pc.iter().enumerate() {
            let c = if negative { -c } else { c };
            if c > T::zero() {
                out[k + t] += c * h;
            }
        }
    }
    out
}

/// Tight schedule for inputs in the box `[0, hi]`: the offset at every entry
/// is the smallest value keeping the pre-activation at least `margin`.
pub fn tight_schedule<T: Scalar>(factors: &[Filter<T>], hi: &[T], margin: T) -> Result<BiasSchedule<T>> {
    let s = check_factors(factors)?;
    if !(margin > T::zero()) {
        return Err(Error::invalid("margin must be positive"));
    }
    let mut bounds = vec![hi.iter().fold(T::zero(), |m, &h| m.max(h))];
    let mut biases = Vec::with_capacity(factors.len());
    let mut offsets = vec![vec![T::zero(); hi.len()]];
    let mut product = Filter::delta(0);
    for w in factors {
        product = w.convolve(&product);
        let neg = box_extreme(&product, hi, true);
        let pos = box_extreme(&product, hi, false);
        bounds.push(neg.iter().zip(&pos).fold(T::zero(), |m, (&a, &b)| m.max(a).max(b)));
        let c: Vec<T> = neg.into_iter().map(|v| v + margin).collect();
        let carried = conv_padded(w, offsets.last().expect("nonempty"))?;
        biases.push(c.iter().zip(&carried).map(|(&a, &b)| a - b).collect());
        offsets.push(c);
    }
    Ok(BiasSchedule {
        rule: BiasRule::Tight,
        s,
        bounds,
        biases,
        offsets,
    })
}

fn identity_tolerance<T: Scalar>() -> T {
    T::lit(1e-8).max(T::epsilon() * T::lit(1e3))
}

/// Runs the ReLU chain `σ(w^ℓ * ... σ(w^1 * x + b^1) ... + b^ℓ)` and checks it
/// at every layer against the affine form `T^{w^ℓ}...T^{w^1} x + Σ_k
/// T^{w^ℓ}...T^{w^{k+1}} b^k` built from explicit Toeplitz matrices.
///
/// Fails with [`Error::Invariant`] if a pre-activation is negative or the two
/// sides differ by more than `1e-8` relative to the size of the affine value.
pub fn chain_affine_identity<T: Scalar>(
    factors: &[Filter<T>],
    schedule: &BiasSchedule<T>,
    x: &[T],
) -> Result<Vec<T>> {
    if factors.len() != schedule.depth() {
        return Err(Error::dim(format!(
            "{} factors but the schedule covers {} layers",
            factors.len(),
            schedule.depth()
        )));
    }
    if x.len() != schedule.input_width() {
        return Err(Error::dim(format!(
            "input has {} entries, schedule expects {}",
            x.len(),
            schedule.input_width()
        )));
    }
    let mut h = x.to_vec();
    let mut m = Matrix::identity(x.len());
    let mut g = vec![T::zero(); x.len()];
    for (i, (w, b)) in factors.iter().zip(&schedule.biases).enumerate() {
        let layer = i + 1;
        let mut z = conv_padded(w, &h)?;
        add_into(&mut z, b);
        let lowest = z.iter().fold(T::infinity(), |a, &v| a.min(v));
        if lowest < T::zero() {
            return Err(Error::Invariant {
                layer,
                what: "negative pre-activation".into(),
                discrepancy: -lowest.to_f64_lossy(),
            });
        }
        h = z.into_iter().map(|v| v.max(T::zero())).collect();

        let t = toeplitz_matrix(w, m.rows())?;
        m = t.matmul(&m)?;
        g = t.matvec(&g)?;
        add_into(&mut g, b);
        let mut affine = m.matvec(x)?;
        add_into(&mut affine, &g);
        let scale = affine.iter().fold(T::one(), |a, &v| a.max(v.abs()));
        let gap = h.iter().zip(&affine).fold(T::zero(), |a, (&p, &q)| a.max((p - q).abs()));
        if !(gap <= identity_tolerance::<T>() * scale) {
            return Err(Error::Invariant {
                layer,
                what: "ReLU chain departs from its affine form".into(),
                discrepancy: gap.to_f64_lossy(),
            });
        }
    }
    Ok(h)
}

/// Row-stacks `W` (`d̃ × d'`) into a filter `u` of bound `d' d̃ - 1` such
/// that row `(j+1) d'` of `T^u` (1-based) is row `j+1` of `W`.
pub fn stack_rows<T: Scalar>(w: &Matrix<T>) -> Result<Filter<T>> {
    if w.is_zero() {
        return Err(Error::invalid("cannot stack a zero matrix"));
    }
    Filter::new(stack_coeffs(w))
}

fn stack_coeffs<T: Scalar>(w: &Matrix<T>) -> Vec<T> {
    let d_in = w.cols();
    let mut u = vec![T::zero(); d_in * w.rows()];
    for j in 0..w.rows() {
        for (k, &v) in w.row(j).iter().enumerate() {
            u[j * d_in + (d_in - 1 - k)] = v;
        }
    }
    u
}

/// Whether the compiled network passed its probe check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompileStatus {
    Ok,
    Failed,
}

/// Outcome of a compilation and its probe-based certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileReport {
    pub depth: usize,
    pub block_depths: Vec<usize>,
    /// Width of every layer before pooling.
    pub widths: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub probe_count: usize,
    pub max_abs_error: f64,
    /// Probe error of each block on its own input box.
    pub block_errors: Vec<f64>,
    pub tolerance: f64,
    pub follows_schedule: bool,
    pub status: CompileStatus,
}

/// Compilation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileOptions {
    pub s: usize,
    pub rule: BiasRule,
    /// Uniform probes per check; cube vertices are added when `d' <= 10`.
    pub probes: usize,
    /// Probes on which every intermediate layer is also checked.
    pub identity_probes: usize,
    pub seed: u64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            s: 2,
            rule: BiasRule::Tight,
            probes: 1000,
            identity_probes: 20,
            seed: 0,
        }
    }
}

impl CompileOptions {
    pub fn new(s: usize) -> Self {
        Self {
            s,
            ..Self::default()
        }
    }
}

/// Layers of one compiled block; the last layer pools by `pool`.
#[derive(Debug, Clone)]
pub struct CompiledBlock<T> {
    pub layers: Vec<ConvLayer<T>>,
    pub pool: usize,
    /// Width after pooling.
    pub out_width: usize,
    pub report: CompileReport,
}

/// Number of layers used for a `d̃ × d'` block.
pub fn block_depth(d_in: usize, d_out: usize, s: usize) -> usize {
    (d_in * d_out).div_ceil(s - 1)
}

/// Rescales factors so every proper partial product has unit max-norm while
/// the full product is unchanged.
fn normalize_chain<T: Scalar>(factors: Vec<Filter<T>>) -> Vec<Filter<T>> {
    let n = factors.len();
    let mut product = Filter::delta(0);
    let mut total = T::one();
    factors
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            if i + 1 == n {
                return f.scaled(total);
            }
            let next = f.convolve(&product);
            let norm = next.max_norm();
            product = next.scaled(T::one() / norm);
            total *= norm;
            f.scaled(T::one() / norm)
        })
        .collect()
}

fn margin_for<T: Scalar>(hi: &[T]) -> T {
    T::lit(1e-3) * (T::one() + hi.iter().fold(T::zero(), |m, &h| m.max(h)))
}

struct BlockPlan<T> {
    factors: Vec<Filter<T>>,
    schedule: BiasSchedule<T>,
    final_bias: Vec<T>,
}

fn plan_block<T: Scalar>(block: &AffineBlock<T>, hi: &[T], s: usize, rule: BiasRule) -> Result<BlockPlan<T>> {
    let (d_in, d_out) = (block.input_dim(), block.output_dim());
    let depth = block_depth(d_in, d_out, s);
    let coeffs = stack_coeffs(block.weights());
    let factors = if coeffs.iter().all(|c| c.is_zero()) {
        let mut f = vec![Filter::delta(s); depth];
        f[depth - 1] = Filter::new(vec![T::zero(); s + 1])?;
        f
    } else {
        let fr = factorize_filter(&Filter::new(coeffs)?, s)?;
        let padded = pad_with_deltas(fr, depth)?;
        let bounded = padded
            .into_factors()
            .into_iter()
            .map(|f| f.with_bound(s))
            .collect::<Result<Vec<_>>>()?;
        normalize_chain(bounded)
    };

    let (inner, last) = factors.split_at(depth - 1);
    let last = &last[0];
    let margin = margin_for(hi);
    let schedule = if inner.is_empty() {
        BiasSchedule {
            rule,
            s,
            bounds: vec![hi.iter().fold(T::zero(), |m, &h| m.max(h))],
            biases: vec![],
            offsets: vec![vec![T::zero(); hi.len()]],
        }
    } else {
        match rule {
            BiasRule::Tight => tight_schedule(inner, hi, margin)?,
            BiasRule::Restricted => restricted_schedule(inner, hi)?,
        }
    };

    let inner_product = inner.iter().fold(Filter::delta(0), |p, w| w.convolve(&p));
    let product = last.convolve(&inner_product);
    let upper = box_extreme(&product, hi, false);
    let carried = conv_padded(last, schedule.offsets.last().expect("nonempty"))?;
    let final_bias = carried
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if k % d_in == d_in - 1 && k / d_in < d_out {
                block.bias()[k / d_in] - c
            } else {
                -c - upper[k] - margin
            }
        })
        .collect();
    Ok(BlockPlan {
        factors,
        schedule,
        final_bias,
    })
}

fn probe_points<T: Scalar>(hi: &[T], d_in: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut points: Vec<Vec<T>> = (0..count)
        .map(|_| {
            hi.iter()
                .map(|&h| if h > T::zero() { h * T::lit(rng.gen::<f64>()) } else { T::zero() })
                .collect()
        })
        .collect();
    if d_in <= 10 {
        for mask in 0..1usize << d_in {
            points.push(
                hi.iter()
                    .enumerate()
                    .map(|(k, &h)| if k < d_in && mask >> k & 1 == 1 { h } else { T::zero() })
                    .collect(),
            );
        }
    }
    points
}

/// Runs a block on `x` (its full input width) and returns the pooled output.
/// With `check`, every intermediate layer is compared with its affine form.
fn run_block<T: Scalar>(plan: &BlockPlan<T>, d_in: usize, x: &[T], check: bool) -> Result<Vec<T>> {
    let mut h = x.to_vec();
    let mut product = Filter::delta(0);
    let n = plan.factors.len();
    for (i, w) in plan.factors.iter().enumerate() {
        let mut z = conv_padded(w, &h)?;
        if i + 1 == n {
            add_into(&mut z, &plan.final_bias);
            h = z.into_iter().map(|v| v.max(T::zero())).collect();
            break;
        }
        add_into(&mut z, &plan.schedule.biases[i]);
        if check {
            product = w.convolve(&product);
            let mut affine = conv_padded(&product, x)?;
            add_into(&mut affine, &plan.schedule.offsets[i + 1]);
            let scale = affine.iter().fold(T::one(), |a, &v| a.max(v.abs()));
            let gap = z.iter().zip(&affine).fold(T::zero(), |a, (&p, &q)| a.max((p - q).abs()));
            let lowest = z.iter().fold(T::infinity(), |a, &v| a.min(v));
            if lowest < T::zero() {
                return Err(Error::Invariant {
                    layer: i + 1,
                    what: "negative pre-activation inside compiled block".into(),
                    discrepancy: -lowest.to_f64_lossy(),
                });
            }
            if !(gap <= identity_tolerance::<T>() * scale) {
                return Err(Error::Invariant {
                    layer: i + 1,
                    what: "compiled layer departs from its affine form".into(),
                    discrepancy: gap.to_f64_lossy(),
                });
            }
        }
        h = z.into_iter().map(|v| v.max(T::zero())).collect();
    }
    max_pool(&h, d_in)
}

fn report_for(
    s: usize,
    d: usize,
    block_depths: Vec<usize>,
    pool_sizes: Vec<usize>,
    probe_count: usize,
    max_abs_error: f64,
    block_errors: Vec<f64>,
    tolerance: f64,
) -> CompileReport {
    let widths = layer_widths(d, s, &pool_sizes)
        .map(|w| w.into_iter().map(|p| p.0).collect())
        .unwrap_or_default();
    let follows_schedule =
        scheduled_pool_sizes(d, s, pool_sizes.len()).is_ok_and(|p| p == pool_sizes);
    let ok = max_abs_error <= tolerance;
    CompileReport {
        depth: pool_sizes.len(),
        block_depths,
        widths,
        pool_sizes,
        probe_count,
        max_abs_error,
        block_errors,
        tolerance,
        follows_schedule,
        status: if ok { CompileStatus::Ok } else { CompileStatus::Failed },
    }
}

/// Compiles one block for inputs in the box `[0, hi]`. `hi` may be longer than
/// the block's input dimension; the extra coordinates must have `hi = 0`.
pub fn compile_block_on_box<T: Scalar>(
    block: &AffineBlock<T>,
    hi: &[T],
    opts: &CompileOptions,
) -> Result<CompiledBlock<T>> {
    let s = opts.s;
    if s < 2 {
        return Err(Error::invalid(format!("filter length s must be >= 2, got {s}")));
    }
    let d_in = block.input_dim();
    if hi.len() < d_in || hi[d_in..].iter().any(|h| !h.is_zero()) {
        return Err(Error::dim(format!(
            "input box of width {} does not fit a block with {d_in} inputs",
            hi.len()
        )));
    }
    let plan = plan_block(block, hi, s, opts.rule)?;
    let depth = plan.factors.len();
    let out_width = (hi.len() + depth * s) / d_in;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let points = probe_points(hi, d_in, opts.probes, &mut rng);
    let d_out = block.output_dim();
    let tail_tol = T::lit(1e-10);
    let mut err = T::zero();
    for (i, x) in points.iter().enumerate() {
        let pooled = run_block(&plan, d_in, x, i < opts.identity_probes)?;
        let expected = block.apply(&x[..d_in])?;
        for (a, b) in pooled.iter().zip(&expected) {
            err = err.max((*a - *b).abs());
        }
        let tail = pooled[d_out..].iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if tail > tail_tol {
            err = err.max(tail);
        }
    }

    let mut pools = vec![1; depth];
    pools[depth - 1] = d_in;
    let layers = plan
        .factors
        .into_iter()
        .zip(plan.schedule.biases.into_iter().chain(std::iter::once(plan.final_bias)))
        .map(|(f, b)| ConvLayer::new(f, b))
        .collect::<Result<Vec<_>>>()?;
    let err = err.to_f64_lossy();
    let report = report_for(
        s,
        hi.len(),
        vec![depth],
        pools,
        points.len(),
        err,
        vec![err],
        T::probe_tolerance().to_f64_lossy(),
    );
    if report.status == CompileStatus::Failed {
        return Err(Error::Compile(Box::new(report)));
    }
    Ok(CompiledBlock {
        layers,
        pool: d_in,
        out_width,
        report,
    })
}

/// Compiles one block for inputs in `[0,1]^{d'}`.
pub fn compile_block<T: Scalar>(block: &AffineBlock<T>, opts: &CompileOptions) -> Result<CompiledBlock<T>> {
    compile_block_on_box(block, &vec![T::one(); block.input_dim()], opts)
}

/// Upper end of the box containing `σ(Wx + θ)` for `x ∈ [0, hi]`.
fn image_box<T: Scalar>(block: &AffineBlock<T>, hi: &[T]) -> Vec<T> {
    let w = block.weights();
    (0..w.rows())
        .map(|j| {
            let reach = w.row(j).iter().zip(hi).fold(T::zero(), |a, (&c, &h)| a + c.max(T::zero()) * h);
            (block.bias()[j] + reach).max(T::zero())
        })
        .collect()
}

/// Compiles a whole network block by block and certifies the composite on
/// uniform probes of `[0,1]^d` (plus the cube vertices when `d <= 10`).
pub fn compile_dfcn<T: Scalar>(net: &Dfcn<T>, opts: &CompileOptions) -> Result<(PooledEdcnn<T>, CompileReport)> {
    let d = net.input_dim();
    let mut hi = vec![T::one(); d];
    let mut layers = Vec::new();
    let mut pools = Vec::new();
    let mut block_depths = Vec::new();
    let mut block_errors = Vec::new();
    for (b, block) in net.layers().iter().enumerate() {
        let block_opts = CompileOptions {
            seed: opts.seed.wrapping_add(b as u64),
            ..opts.clone()
        };
        let compiled = compile_block_on_box(block, &hi, &block_opts)?;
        let mut next = image_box(block, &hi[..block.input_dim()]);
        next.resize(compiled.out_width, T::zero());
        hi = next;
        block_depths.push(compiled.layers.len());
        block_errors.push(compiled.report.max_abs_error);
        pools.extend_from_slice(&compiled.report.pool_sizes);
        layers.extend(compiled.layers);
    }
    let mut output = net.output_weights().to_vec();
    output.resize(hi.len(), T::zero());
    let compiled = PooledEdcnn::new(opts.s, d, layers, pools.clone(), output)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let points = probe_points(&vec![T::one(); d], d, opts.probes, &mut rng);
    let mut err = T::zero();
    for x in &points {
        err = err.max((compiled.eval(x)? - net.eval(x)?).abs());
    }
    let report = report_for(
        opts.s,
        d,
        block_depths,
        pools,
        points.len(),
        err.to_f64_lossy(),
        block_errors,
        T::probe_tolerance().to_f64_lossy(),
    );
    if report.status == CompileStatus::Failed {
        return Err(Error::Compile(Box::new(report)));
    }
    Ok((compiled, report))
}

/// Relative error between a compiled chain's filter product and `u`.
pub fn chain_reconstruction_error<T: Scalar>(layers: &[ConvLayer<T>], u: &Filter<T>) -> T {
    let product = layers
        .iter()
        .fold(Filter::delta(0), |p, l| l.filter().convolve(&p));
    relative_max_error(&product, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_filter(rng: &mut ChaCha8Rng, s: usize) -> Filter<f64> {
        Filter::new((0..=s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_block(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize, theta: f64) -> AffineBlock<f64> {
        let rows: Vec<Vec<f64>> = (0..d_out)
            .map(|_| (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let bias = (0..d_out).map(|_| rng.gen_range(-theta..theta)).collect();
        AffineLayer::new(Matrix::from_rows(&rows).unwrap(), bias).unwrap()
    }

    #[test]
    fn stack_rows_places_rows_on_selected_toeplitz_rows() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let u = stack_rows(&w).unwrap();
        assert_eq!(u.coeffs(), &[2.0, 1.0, 4.0, 3.0]);
        let t = toeplitz_matrix(&u, 2).unwrap();
        assert_eq!(t.row(1), &[1.0, 2.0]);
        assert_eq!(t.row(3), &[3.0, 4.0]);

        let id = stack_rows(&Matrix::<f64>::identity(2)).unwrap();
        let t = toeplitz_matrix(&id, 2).unwrap();
        assert_eq!(t.row(1), &[1.0, 0.0]);
        assert_eq!(t.row(3), &[0.0, 1.0]);

        let c = stack_rows(&Matrix::new(1, 1, vec![2.5]).unwrap()).unwrap();
        assert_eq!(c.coeffs(), &[2.5]);
        assert!(stack_rows(&Matrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn stack_rows_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let rows: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let w = Matrix::from_rows(&rows).unwrap();
            let u = stack_rows(&w).unwrap();
            assert_eq!(u.bound(), r * c - 1);
            let t = toeplitz_matrix(&u, c).unwrap();
            for (j, row) in rows.iter().enumerate() {
                assert_eq!(t.row((j + 1) * c - 1), row.as_slice());
            }
        }
    }

    #[test]
    fn restricted_schedule_examples() {
        let unit = vec![Filter::new(vec![0.5, 0.0, -0.5]).unwrap(); 4];
        let sched = bias_bounds(&unit, 3).unwrap();
        assert_eq!(sched.bounds(), &[1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(sched.scalar_biases().unwrap(), vec![1.0, 2.0, 4.0, 8.0]);

        let one = vec![Filter::new(vec![1.0, 1.0]).unwrap()];
        let sched = bias_bounds(&one, 2).unwrap();
        assert_eq!(sched.bounds()[1], 2.0);
        assert_eq!(sched.scalar_biases().unwrap(), vec![2.0]);

        assert!(bias_bounds::<f64>(&[], 2).is_err());
        let zero = vec![Filter::new(vec![0.0, 0.0]).unwrap()];
        assert!(bias_bounds(&zero, 2).is_err());
    }

    #[test]
    fn restricted_bound_holds_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let factors: Vec<_> = (0..5).map(|_| random_filter(&mut rng, 2)).collect();
        let sched = bias_bounds(&factors, 4).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
            let mut v = x.clone();
            for (l, w) in factors.iter().enumerate() {
                v = conv_padded(w, &v).unwrap();
                let peak = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
                assert!(peak <= sched.bounds()[l + 1] + 1e-12);
            }
        }
    }

    #[test]
    fn chain_identity_examples() {
        let w = vec![Filter::new(vec![1.0, -2.0, 0.5]).unwrap()];
        let sched = bias_bounds(&w, 2).unwrap();
        let b = sched.scalar_biases().unwrap()[0];
        let x = [0.3, 0.8];
        let h = chain_affine_identity(&w, &sched, &x).unwrap();
        let direct: Vec<f64> = conv_padded(&w[0], &x).unwrap().iter().map(|v| v + b).collect();
        assert_eq!(h, direct);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let factors: Vec<_> = (0..4).map(|_| random_filter(&mut rng, 3)).collect();
        for sched in [bias_bounds(&factors, 3).unwrap(), tight_schedule(&factors, &[1.0; 3], 1e-3).unwrap()] {
            let zero = chain_affine_identity(&factors, &sched, &[0.0; 3]).unwrap();
            assert_eq!(zero.len(), 3 + 4 * 3);
            for (a, b) in zero.iter().zip(sched.offsets().last().unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
                chain_affine_identity(&factors, &sched, &x).unwrap();
            }
        }
    }

    #[test]
    fn chain_identity_detects_small_biases() {
        let w = vec![Filter::new(vec![-1.0, 1.0]).unwrap(); 2];
        let mut sched = bias_bounds(&w, 2).unwrap();
        sched.biases[1].iter_mut().for_each(|b| *b = 0.0);
        let err = chain_affine_identity(&w, &sched, &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Invariant { layer: 2, .. }));
    }

    #[test]
    fn tight_schedule_keeps_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let factors: Vec<_> = (0..6).map(|_| random_filter(&mut rng, 2)).collect();
        let hi = [1.0, 0.5, 2.0, 0.0];
        let sched = tight_schedule(&factors, &hi, 0.01).unwrap();
        for _ in 0..500 {
            let x: Vec<f64> = hi.iter().map(|h| h * rng.gen::<f64>()).collect();
            let mut v = x;
            for (w, b) in factors.iter().zip(sched.biases()) {
                v = conv_padded(w, &v).unwrap();
                add_into(&mut v, b);
                assert!(v.iter().all(|&z| z >= 0.01 - 1e-12));
            }
        }
    }

    #[test]
    fn normalized_chain_keeps_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let factors: Vec<_> = (0..8).map(|_| random_filter(&mut rng, 2).scaled(10.0)).collect();
        let before = factors.iter().fold(Filter::delta(0), |p, w| w.convolve(&p));
        let normalized = normalize_chain(factors);
        let mut p = Filter::delta(0);
        for w in &normalized[..7] {
            p = w.convolve(&p);
            assert!((p.max_norm() - 1.0).abs() < 1e-12);
        }
        p = normalized[7].convolve(&p);
        assert!(relative_max_error(&p, &before) < 1e-12);
    }

    #[test]
    fn identity_block_reproduces_relu() {
        let block = AffineLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let c = compile_block(&block, &CompileOptions::new(2)).unwrap();
        assert_eq!(c.layers.len(), 4);
        assert_eq!(c.pool, 2);
        assert!(c.report.max_abs_error <= 1e-8);
    }

    #[test]
    fn random_wide_block_compiles_with_formula_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let block = random_block(&mut rng, 14, 2, 1.0);
        let c = compile_block(&block, &CompileOptions::new(2)).unwrap();
        assert_eq!(c.layers.len(), 28);
        assert!(c.report.max_abs_error <= 1e-6, "{}", c.report.max_abs_error);
        let net = PooledEdcnn::new(2, 2, c.layers.clone(), c.report.pool_sizes.clone(), {
            let mut a = vec![0.0; c.out_width];
            a[3] = 1.0;
            a
        })
        .unwrap();
        assert!(net.follows_schedule());
        for _ in 0..200 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>()];
            let expected = block.apply(&x).unwrap()[3];
            assert!((net.eval(&x).unwrap() - expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn clipped_outputs_are_matched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut block = random_block(&mut rng, 6, 3, 0.5);
        block = AffineLayer::new(block.weights().clone(), vec![-10.0, 0.2, -50.0, 0.0, -3.0, 1.0]).unwrap();
        let c = compile_block(&block, &CompileOptions::new(3)).unwrap();
        assert_eq!(c.layers.len(), 9);
        assert!(c.report.max_abs_error <= 1e-8);
    }

    #[test]
    fn restricted_rule_compiles_short_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let block = random_block(&mut rng, 3, 2, 1.0);
        let opts = CompileOptions {
            rule: BiasRule::Restricted,
            ..CompileOptions::new(3)
        };
        let c = compile_block(&block, &opts).unwrap();
        assert_eq!(c.layers.len(), 3);
        assert!(c.report.max_abs_error <= 1e-6);
    }

    fn random_dfcn(rng: &mut ChaCha8Rng, d: usize, width: usize, depth: usize) -> Dfcn<f64> {
        let mut layers = vec![random_block(rng, width, d, 1.0)];
        for _ in 1..depth {
            layers.push(random_block(rng, width, width, 1.0));
        }
        let out = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Dfcn::new(layers, out).unwrap()
    }

    #[test]
    fn depth_three_network_compiles_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let net = random_dfcn(&mut rng, 2, 14, 3);
        let (compiled, report) = compile_dfcn(&net, &CompileOptions::new(2)).unwrap();
        assert_eq!(report.block_depths, vec![28, 196, 196]);
        assert_eq!(compiled.depth(), 28 + 196 + 196);
        assert!(report.max_abs_error <= 1e-6, "{}", report.max_abs_error);
        assert_eq!(report.status, CompileStatus::Ok);
    }

    #[test]
    fn zero_weight_network_is_constant() {
        let layers = vec![
            AffineLayer::new(Matrix::zeros(3, 2), vec![0.5, -1.0, 2.0]).unwrap(),
            AffineLayer::new(Matrix::zeros(2, 3), vec![1.5, 0.25]).unwrap(),
        ];
        let net = Dfcn::new(layers, vec![2.0, -4.0]).unwrap();
        let (compiled, report) = compile_dfcn(&net, &CompileOptions::new(2)).unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert_eq!(compiled.eval(&[0.3, 0.9]).unwrap(), 2.0 * 1.5 - 4.0 * 0.25);
    }

    #[test]
    fn end_to_end_error_is_bounded_by_propagated_block_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let net = random_dfcn(&mut rng, 2, 4, 3);
            let (_, report) = compile_dfcn(&net, &CompileOptions::new(2)).unwrap();
            // error entering block b is amplified by ‖W‖_∞ of every later block and by ‖a‖₁
            let a1: f64 = net.output_weights().iter().map(|a| a.abs()).sum();
            let mut bound = 0.0;
            for (b, e) in report.block_errors.iter().enumerate() {
                let amp: f64 = net.layers()[b + 1..]
                    .iter()
                    .map(|l| (0..l.output_dim()).map(|j| l.weights().row(j).iter().map(|w| w.abs()).sum::<f64>()).fold(0.0, f64::max))
                    .product();
                bound += e * amp * a1;
            }
            assert!(report.max_abs_error <= bound + 1e-15);
        }
    }

    #[test]
    fn single_precision_block() {
        let block = AffineLayer::new(
            Matrix::<f32>::from_rows(&[vec![0.5, -1.0], vec![1.0, 0.25]]).unwrap(),
            vec![0.1, -0.2],
        )
        .unwrap();
        let c = compile_block(&block, &CompileOptions::new(2)).unwrap();
        assert!(c.report.max_abs_error <= 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn compiled_blocks_match_source(seed in 0u64..10_000, d_in in 1usize..4, d_out in 1usize..6, s in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let block = random_block(&mut rng, d_out, d_in, 1.0);
            let opts = CompileOptions { probes: 200, ..CompileOptions::new(s) };
            let c = compile_block(&block, &opts).unwrap();
            prop_assert_eq!(c.layers.len(), block_depth(d_in, d_out, s));
            prop_assert!(c.report.max_abs_error <= 1e-8);
        }
    }
}

