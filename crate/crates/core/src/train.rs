//! Least-squares training of pooled expansive networks by full-batch
//! gradient descent with a backtracking line search.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_padded, max_pool_argmax, Filter};
use crate::error::{Error, Result};
use crate::network::{layer_widths, scheduled_pool_sizes, truncate, ConvLayer, PooledEdcnn};
use crate::scalar::Scalar;

/// Sample `(x_i, y_i)` with `x_i ∈ [0,1]^d` and `|y_i| <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Vec<Vec<T>>,
    targets: Vec<T>,
    bound: T,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Vec<Vec<T>>, targets: Vec<T>, bound: T) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("dataset must be nonempty"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let d = inputs[0].len();
        if d == 0 || inputs.iter().any(|x| x.len() != d) {
            return Err(Error::dim("inputs must share a positive dimension"));
        }
        if inputs.iter().flatten().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("inputs must lie in the unit cube"));
        }
        if !(bound > T::zero()) || targets.iter().any(|y| !(y.abs() <= bound)) {
            return Err(Error::invalid("targets must be finite and bounded by a positive M"));
        }
        Ok(Self {
            inputs,
            targets,
            bound,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn inputs(&self) -> &[Vec<T>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn bound(&self) -> T {
        self.bound
    }
}

/// Starting point for each restart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Filters and biases uniform in `±1/sqrt(s+1)`, output weights uniform in
    /// `±1/sqrt(width)`. First-layer biases instead put every ReLU hyperplane
    /// through one random point of the unit cube.
    Uniform,
    /// First layer and output as in `Uniform`; later layers get delta filters
    /// plus uniform noise of the given size and zero biases, so deep chains
    /// start close to a shallow network instead of a vanishing one.
    NearIdentity { noise: f64 },
}

/// Descent method used by every restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Steepest descent with an Armijo line search.
    #[default]
    GradientDescent,
    /// Gauss-Newton steps on the residuals with Marquardt damping; the
    /// damping halves after an accepted step and doubles after a rejected one.
    LevenbergMarquardt,
}

/// Training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Maximum number of accepted steps per restart.
    pub epochs: usize,
    pub restarts: usize,
    pub seed: u64,
    /// First trial step; doubled after every accepted step, halved on rejection.
    pub initial_step: f64,
    /// A restart stops once the trial step falls below this.
    pub min_step: f64,
    /// Clamp bound used when reporting risks; training itself is unclamped.
    pub clamp: Option<f64>,
    pub init: InitScheme,
    /// Worker threads for restarts; 0 uses the global pool.
    pub jobs: usize,
    /// Re-solve the output weights by least squares every this many accepted
    /// steps, and once before the first; 0 disables.
    pub output_refit: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            restarts: 4,
            seed: 0,
            initial_step: 0.1,
            min_step: 1e-12,
            clamp: None,
            init: InitScheme::Uniform,
            jobs: 0,
            output_refit: 50,
            optimizer: Optimizer::GradientDescent,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.restarts == 0 {
            return Err(Error::invalid("epochs and restarts must be at least 1"));
        }
        if !(self.initial_step > 0.0 && self.min_step > 0.0) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if let Some(m) = self.clamp {
            if !(m > 0.0) {
                return Err(Error::invalid("clamp bound must be positive"));
            }
        }
        Ok(())
    }
}

/// Result of [`erm_train`].
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub network: PooledEdcnn<T>,
    /// Unclamped empirical risk of `network`.
    pub risk: T,
    pub restart: usize,
    /// Final risk of each restart; `None` for restarts that diverged.
    pub restart_risks: Vec<Option<f64>>,
    pub epochs_run: Vec<usize>,
    pub diagnostics: Vec<String>,
}

/// Network of the given depth with the length-triggered pooling schedule and
/// parameters drawn according to `init`.
pub fn init_network<T: Scalar>(
    d: usize,
    s: usize,
    depth: usize,
    init: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<PooledEdcnn<T>> {
    let pools = scheduled_pool_sizes(d, s, depth)?;
    let widths = layer_widths(d, s, &pools)?;
    let bound = 1.0 / ((s + 1) as f64).sqrt();
    let mut layers = Vec::with_capacity(depth);
    for (l, &(pre, _)) in widths.iter().enumerate() {
        let (filter, bias) = if l == 0 {
            let w: Vec<f64> = (0..=s).map(|_| rng.gen_range(-bound..=bound)).collect();
            let anchor: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let bias = conv_padded(&Filter::new(w.clone())?, &anchor)?.into_iter().map(|v| T::lit(-v)).collect();
            (w, bias)
        } else {
            match init {
                InitScheme::Uniform => (
                    (0..=s).map(|_| rng.gen_range(-bound..=bound)).collect(),
                    (0..pre).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect(),
                ),
                InitScheme::NearIdentity { noise } => (
                    (0..=s)
                        .map(|t| if t == 0 { 1.0 } else { 0.0 } + noise * rng.gen_range(-1.0..=1.0))
                        .collect(),
                    vec![T::zero(); pre],
                ),
            }
        };
        layers.push(ConvLayer::new(Filter::new(filter.into_iter().map(T::lit).collect())?, bias)?);
    }
    let width = widths.last().map_or(d, |w| w.1);
    let out_bound = 1.0 / (width as f64).sqrt();
    let output = (0..width)
        .map(|_| T::lit(rng.gen_range(-out_bound..=out_bound)))
        .collect();
    PooledEdcnn::new(s, d, layers, pools, output)
}

/// Appends delta layers with zero bias, which leaves the function unchanged
/// because the last hidden layer is already nonnegative. Fails if the pooling
/// schedule would pool inside the appended layers.
pub fn deepen_identity<T: Scalar>(net: &PooledEdcnn<T>, depth: usize) -> Result<PooledEdcnn<T>> {
    if depth == net.depth() {
        return Ok(net.clone());
    }
    if depth < net.depth() {
        return Err(Error::invalid(format!(
            "cannot deepen a depth-{} network to {depth}",
            net.depth()
        )));
    }
    let (s, d) = (net.s(), net.input_dim());
    let pools = if net.follows_schedule() {
        scheduled_pool_sizes(d, s, depth)?
    } else {
        let mut p = net.pool_sizes().to_vec();
        p.resize(depth, 1);
        p
    };
    if pools[net.depth()..].iter().any(|&u| u != 1) {
        return Err(Error::Structural(
            "the pooling schedule pools inside the appended layers".into(),
        ));
    }
    if net.depth() == 0 {
        return Err(Error::Structural(
            "a network without hidden layers can be negative, appending ReLU layers would change it".into(),
        ));
    }
    let widths = layer_widths(d, s, &pools)?;
    let mut layers = net.layers().to_vec();
    for &(pre, _) in &widths[net.depth()..] {
        layers.push(ConvLayer::new(Filter::delta(s), vec![T::zero(); pre])?);
    }
    let mut output = net.output_weights().to_vec();
    output.resize(widths.last().map_or(d, |w| w.1), T::zero());
    PooledEdcnn::new(s, d, layers, pools, output)
}

/// `(1/m) Σ (f(x_i) - y_i)²`.
pub fn empirical_risk<T: Scalar>(net: &PooledEdcnn<T>, data: &Dataset<T>) -> Result<T> {
    let mut total = T::zero();
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let r = net.eval(x)? - y;
        total += r * r;
    }
    Ok(total / T::from_usize(data.len()).expect("dataset size fits the scalar type"))
}

/// Empirical risk of the clamped predictor `π_M f`.
pub fn empirical_risk_clamped<T: Scalar>(net: &PooledEdcnn<T>, data: &Dataset<T>, m: T) -> Result<T> {
    let mut total = T::zero();
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let r = truncate(net.eval(x)?, m) - y;
        total += r * r;
    }
    Ok(total / T::from_usize(data.len()).expect("dataset size fits the scalar type"))
}

/// Forward pass of one sample, keeping what the backward pass needs.
struct Tape<T> {
    /// Input of each layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<T>>,
    /// Argmax positions of each pooled layer.
    args: Vec<Option<Vec<usize>>>,
    features: Vec<T>,
    output: T,
}

fn forward<T: Scalar>(net: &PooledEdcnn<T>, x: &[T]) -> Result<Tape<T>> {
    let depth = net.depth();
    let mut tape = Tape {
        inputs: Vec::with_capacity(depth),
        pre: Vec::with_capacity(depth),
        args: Vec::with_capacity(depth),
        features: Vec::new(),
        output: T::zero(),
    };
    let mut cur = x.to_vec();
    for (layer, &u) in net.layers().iter().zip(net.pool_sizes()) {
        let mut z = conv_padded(layer.filter(), &cur)?;
        z.iter_mut().zip(layer.bias()).for_each(|(v, &b)| *v += b);
        let act: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();
        tape.inputs.push(std::mem::take(&mut cur));
        tape.pre.push(z);
        if u == 1 {
            cur = act;
            tape.args.push(None);
        } else {
            let (pooled, arg) = max_pool_argmax(&act, u)?;
            cur = pooled;
            tape.args.push(Some(arg));
        }
    }
    tape.output = cur.iter().zip(net.output_weights()).map(|(&h, &a)| h * a).sum();
    tape.features = cur;
    Ok(tape)
}

/// Adds `g · ∂f(x)/∂θ` to `grad`, in the parameter order of
/// [`PooledEdcnn::params`].
fn backward<T: Scalar>(net: &PooledEdcnn<T>, tape: &Tape<T>, g: T, grad: &mut [T]) {
    let mut offsets = Vec::with_capacity(net.depth());
    let mut off = 0;
    for l in net.layers() {
        offsets.push(off);
        off += l.filter().coeffs().len() + l.bias().len();
    }
    for (i, &h) in tape.features.iter().enumerate() {
        grad[off + i] += g * h;
    }
    let mut g_next: Vec<T> = net.output_weights().iter().map(|&a| g * a).collect();
    for l in (0..net.depth()).rev() {
        let layer = &net.layers()[l];
        let z = &tape.pre[l];
        let mut g_z = match &tape.args[l] {
            None => g_next,
            Some(arg) => {
                let mut full = vec![T::zero(); z.len()];
                for (&k, &gv) in arg.iter().zip(&g_next) {
                    full[k] += gv;
                }
                full
            }
        };
        for (gz, &zv) in g_z.iter_mut().zip(z) {
            if !(zv > T::zero()) {
                *gz = T::zero();
            }
        }
        let w = layer.filter().coeffs();
        let v = &tape.inputs[l];
        let base = offsets[l];
        for (t, _) in w.iter().enumerate() {
            let mut acc = T::zero();
            for (i, &vi) in v.iter().enumerate() {
                acc += g_z[i + t] * vi;
            }
            grad[base + t] += acc;
        }
        for (j, &gz) in g_z.iter().enumerate() {
            grad[base + w.len() + j] += gz;
        }
        g_next = (0..v.len())
            .map(|i| w.iter().enumerate().map(|(t, &wt)| wt * g_z[i + t]).sum())
            .collect();
    }
}

/// Empirical risk and its gradient with respect to every filter coefficient,
/// bias entry and output weight, in the order of [`PooledEdcnn::params`].
///
/// Max-pooling routes the gradient to the lowest-index maximiser and the
/// ReLU derivative at 0 is taken to be 0.
pub fn grad_empirical_risk<T: Scalar>(net: &PooledEdcnn<T>, data: &Dataset<T>) -> Result<(T, Vec<T>)> {
    let m = T::from_usize(data.len()).expect("dataset size fits the scalar type");
    let mut grad = vec![T::zero(); net.param_count()];
    let mut risk = T::zero();
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let tape = forward(net, x)?;
        let r = tape.output - y;
        risk += r * r;
        backward(net, &tape, T::lit(2.0) * r / m, &mut grad);
    }
    Ok((risk / m, grad))
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Parameters compared.
    pub checked: usize,
    /// Samples dropped because a perturbation moved them across a kink.
    pub excluded_samples: usize,
    pub max_rel_error: f64,
}

/// Compares [`grad_empirical_risk`] with central differences of step `h`.
/// Samples whose ReLU signs or pooling argmaxes change under any `±h`
/// perturbation are excluded first; the relative error of each coordinate is
/// `|fd - g| / max(|fd|, |g|, 1e-6)`.
pub fn gradient_check(net: &PooledEdcnn<f64>, data: &Dataset<f64>, h: f64) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let per_sample = |n: &PooledEdcnn<f64>| -> Result<Vec<Vec<usize>>> {
        data.inputs
            .iter()
            .map(|x| {
                let one = Dataset {
                    inputs: vec![x.clone()],
                    targets: vec![0.0],
                    bound: data.bound,
                };
                activation_signature(n, &one)
            })
            .collect()
    };
    let p = net.params();
    let base = per_sample(net)?;
    let mut keep = vec![true; data.len()];
    let shifted = |i: usize, delta: f64| -> Result<PooledEdcnn<f64>> {
        let mut q = p.clone();
        q[i] += delta;
        net.with_params(&q)
    };
    for i in 0..p.len() {
        for delta in [h, -h] {
            for (k, sig) in per_sample(&shifted(i, delta)?)?.iter().enumerate() {
                if *sig != base[k] {
                    keep[k] = false;
                }
            }
        }
    }
    let excluded_samples = keep.iter().filter(|&&k| !k).count();
    let (inputs, targets): (Vec<Vec<f64>>, Vec<f64>) = data
        .inputs
        .iter()
        .zip(&data.targets)
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|((x, &y), _)| (x.clone(), y))
        .unzip();
    if inputs.is_empty() {
        return Ok(GradCheck {
            checked: 0,
            excluded_samples,
            max_rel_error: 0.0,
        });
    }
    let kept = Dataset {
        inputs,
        targets,
        bound: data.bound,
    };
    let (_, grad) = grad_empirical_risk(net, &kept)?;
    let mut max_rel_error = 0.0f64;
    for (i, &g) in grad.iter().enumerate() {
        let fd = (empirical_risk(&shifted(i, h)?, &kept)? - empirical_risk(&shifted(i, -h)?, &kept)?) / (2.0 * h);
        max_rel_error = max_rel_error.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
    }
    Ok(GradCheck {
        checked: p.len(),
        excluded_samples,
        max_rel_error,
    })
}

/// Sign pattern of every pre-activation plus every pooling argmax over the
/// dataset. Two parameter vectors with the same signature lie in the same
/// smooth piece of the risk.
pub fn activation_signature<T: Scalar>(net: &PooledEdcnn<T>, data: &Dataset<T>) -> Result<Vec<usize>> {
    let mut sig = Vec::new();
    for x in &data.inputs {
        let tape = forward(net, x)?;
        for (z, arg) in tape.pre.iter().zip(&tape.args) {
            sig.extend(z.iter().map(|&v| usize::from(v > T::zero())));
            if let Some(arg) = arg {
                sig.extend_from_slice(arg);
            }
        }
    }
    Ok(sig)
}

/// Outcome of a single descent run.
#[derive(Debug, Clone)]
pub struct DescentRun<T> {
    pub network: PooledEdcnn<T>,
    pub risk: T,
    pub epochs: usize,
    pub diagnostics: Vec<String>,
}

/// Gradient descent from `start` with an Armijo backtracking line search.
/// Every accepted step strictly lowers the empirical risk.
pub fn descend<T: Scalar>(start: &PooledEdcnn<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<DescentRun<T>> {
    cfg.validate()?;
    if cfg.optimizer == Optimizer::LevenbergMarquardt {
        return descend_lm(start, data, cfg);
    }
    let mut net = start.clone();
    if cfg.output_refit > 0 {
        net = refit_output(&net, data)?;
    }
    let mut params = net.params();
    let (mut risk, mut grad) = grad_empirical_risk(&net, data)?;
    if !risk.is_finite() {
        return Err(Error::Training("initial risk is not finite".into()));
    }
    let mut step = T::lit(cfg.initial_step);
    let min_step = T::lit(cfg.min_step);
    let armijo = T::lit(1e-4);
    let mut diagnostics = Vec::new();
    let mut epochs = 0;
    'outer: while epochs < cfg.epochs {
        let g2: T = grad.iter().map(|&g| g * g).sum();
        if g2 == T::zero() {
            break;
        }
        loop {
            let cand: Vec<T> = params.iter().zip(&grad).map(|(&p, &g)| p - step * g).collect();
            let trial = net.with_params(&cand).ok();
            let trial_risk = match &trial {
                Some(t) => empirical_risk(t, data)?,
                None => T::nan(),
            };
            if trial_risk.is_finite() && trial_risk <= risk - armijo * step * g2 {
                net = trial.expect("finite risk implies a valid network");
                params = cand;
                let (r, g) = grad_empirical_risk(&net, data)?;
                if r > risk {
                    diagnostics.push(format!("epoch {epochs}: risk rose from {risk} to {r}"));
                }
                risk = r;
                grad = g;
                step = step * T::lit(2.0);
                epochs += 1;
                if cfg.output_refit > 0 && epochs % cfg.output_refit == 0 {
                    let refit = refit_output(&net, data)?;
                    let (r, g) = grad_empirical_risk(&refit, data)?;
                    if r < risk {
                        net = refit;
                        params = net.params();
                        risk = r;
                        grad = g;
                    }
                }
                break;
            }
            step = step * T::lit(0.5);
            if step < min_step {
                break 'outer;
            }
        }
    }
    Ok(DescentRun {
        network: net,
        risk,
        epochs,
        diagnostics,
    })
}

/// Same hidden layers, output weights minimizing the empirical risk (with a
/// tiny ridge term for rank-deficient features). Returns `net` unchanged when
/// the solve fails or does not help.
pub fn refit_output<T: Scalar>(net: &PooledEdcnn<T>, data: &Dataset<T>) -> Result<PooledEdcnn<T>> {
    let w = net.output_weights().len();
    let mut gram = DMatrix::<f64>::zeros(w, w);
    let mut rhs = DVector::<f64>::zeros(w);
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let h = DVector::from_iterator(w, net.features(x)?.iter().map(|v| v.to_f64_lossy()));
        gram.ger(1.0, &h, &h, 1.0);
        rhs.axpy(y.to_f64_lossy(), &h, 1.0);
    }
    let ridge = 1e-12 * (gram.trace() / w as f64).max(1e-300);
    for i in 0..w {
        gram[(i, i)] += ridge;
    }
    let Some(chol) = gram.cholesky() else {
        return Ok(net.clone());
    };
    let a = chol.solve(&rhs);
    if a.iter().any(|v| !v.is_finite()) {
        return Ok(net.clone());
    }
    let mut params = net.params();
    let n = params.len();
    for (p, &v) in params[n - w..].iter_mut().zip(a.iter()) {
        *p = T::lit(v);
    }
    let refit = net.with_params(&params)?;
    if empirical_risk(&refit, data)? <= empirical_risk(net, data)? {
        Ok(refit)
    } else {
        Ok(net.clone())
    }
}

/// Residuals `f(x_i) - y_i` and their Jacobian, one row per sample, computed
/// in `f64`.
fn residual_jacobian<T: Scalar>(net: &PooledEdcnn<T>, data: &Dataset<T>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = net.param_count();
    let mut r = DVector::zeros(data.len());
    let mut jac = DMatrix::zeros(data.len(), p);
    let mut row = vec![T::zero(); p];
    for (i, (x, &y)) in data.inputs.iter().zip(&data.targets).enumerate() {
        let tape = forward(net, x)?;
        r[i] = (tape.output - y).to_f64_lossy();
        row.iter_mut().for_each(|v| *v = T::zero());
        backward(net, &tape, T::one(), &mut row);
        for (j, v) in row.iter().enumerate() {
            jac[(i, j)] = v.to_f64_lossy();
        }
    }
    Ok((r, jac))
}

/// Levenberg-Marquardt on the sum of squared residuals. Each accepted step
/// strictly lowers the empirical risk; `min_step` bounds the reciprocal of
/// the damping factor.
fn descend_lm<T: Scalar>(start: &PooledEdcnn<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<DescentRun<T>> {
    let mut net = start.clone();
    if cfg.output_refit > 0 {
        net = refit_output(&net, data)?;
    }
    let mut risk = empirical_risk(&net, data)?;
    if !risk.is_finite() {
        return Err(Error::Training("initial risk is not finite".into()));
    }
    let mut lambda = 1e-3;
    let max_lambda = 1.0 / cfg.min_step;
    let mut epochs = 0;
    let diagnostics = Vec::new();
    'outer: while epochs < cfg.epochs {
        let (r, jac) = residual_jacobian(&net, data)?;
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&r);
        if jtr.amax() == 0.0 {
            break;
        }
        let floor = 1e-12 * jtj.diagonal().amax().max(1e-300);
        let params: Vec<f64> = net.params().iter().map(|v| v.to_f64_lossy()).collect();
        loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * (jtj[(i, i)] + floor);
            }
            let step = a.cholesky().map(|c| c.solve(&jtr));
            if let Some(step) = step.filter(|st| st.iter().all(|v| v.is_finite())) {
                let cand: Vec<T> = params.iter().zip(step.iter()).map(|(&p, &d)| T::lit(p - d)).collect();
                if let Ok(trial) = net.with_params(&cand) {
                    let trial_risk = empirical_risk(&trial, data)?;
                    if trial_risk.is_finite() && trial_risk < risk {
                        let gain = (risk - trial_risk).to_f64_lossy() / risk.to_f64_lossy().max(1e-300);
                        net = trial;
                        risk = trial_risk;
                        lambda = (lambda * 0.5).max(1e-12);
                        epochs += 1;
                        if gain < 1e-12 {
                            break 'outer;
                        }
                        break;
                    }
                }
            }
            lambda *= 2.0;
            if lambda > max_lambda {
                break 'outer;
            }
        }
    }
    Ok(DescentRun {
        network: net,
        risk,
        epochs,
        diagnostics,
    })
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(restart as u64)
}

/// Best of `cfg.restarts` descent runs, each from its own deterministic
/// initialisation. Ties go to the lowest restart index.
pub fn erm_train<T: Scalar>(data: &Dataset<T>, depth: usize, s: usize, cfg: &TrainConfig) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    let d = data.dim();
    let run = |r: usize| -> Result<DescentRun<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, r));
        let start = init_network(d, s, depth, cfg.init, &mut rng)?;
        descend(&start, data, cfg)
    };
    let runs: Vec<Result<DescentRun<T>>> = if cfg.jobs == 0 {
        (0..cfg.restarts).into_par_iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| (0..cfg.restarts).into_par_iter().map(run).collect())
    };
    select_best(runs)
}

/// Descent from a given network, treated as a single restart.
pub fn refine<T: Scalar>(start: &PooledEdcnn<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainedModel<T>> {
    select_best(vec![descend(start, data, cfg)])
}

fn select_best<T: Scalar>(runs: Vec<Result<DescentRun<T>>>) -> Result<TrainedModel<T>> {
    let mut diagnostics = Vec::new();
    let mut restart_risks = Vec::with_capacity(runs.len());
    let mut epochs_run = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, DescentRun<T>)> = None;
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) if run.risk.is_finite() => {
                restart_risks.push(Some(run.risk.to_f64_lossy()));
                epochs_run.push(run.epochs);
                diagnostics.extend(run.diagnostics.iter().map(|m| format!("restart {r}: {m}")));
                if best.as_ref().is_none_or(|(_, b)| run.risk < b.risk) {
                    best = Some((r, run));
                }
            }
            Ok(_) => {
                restart_risks.push(None);
                epochs_run.push(0);
                diagnostics.push(format!("restart {r}: diverged"));
                log::warn!("restart {r} diverged");
            }
            Err(e) => {
                restart_risks.push(None);
                epochs_run.push(0);
                diagnostics.push(format!("restart {r}: {e}"));
                log::warn!("restart {r} discarded: {e}");
            }
        }
    }
    let (restart, run) = best.ok_or_else(|| Error::Training("every restart diverged".into()))?;
    Ok(TrainedModel {
        network: run.network,
        risk: run.risk,
        restart,
        restart_risks,
        epochs_run,
        diagnostics,
    })
}

/// Monte-Carlo estimate of `‖π_M f - f_ρ‖²` under the uniform distribution on
/// `[0,1]^d`, with its standard error. Without a clamp bound the raw network
/// output is used.
pub fn excess_risk<T: Scalar>(
    net: &PooledEdcnn<T>,
    target: impl Fn(&[T]) -> T,
    clamp: Option<T>,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(T, T)> {
    if n_mc < 2 {
        return Err(Error::invalid("Monte-Carlo estimate needs at least two samples"));
    }
    let d = net.input_dim();
    let mut x = vec![T::zero(); d];
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for _ in 0..n_mc {
        x.iter_mut().for_each(|v| *v = T::lit(rng.gen::<f64>()));
        let y = net.eval(&x)?;
        let y = clamp.map_or(y, |m| truncate(y, m));
        let e = (y - target(&x)).to_f64_lossy();
        let e2 = e * e;
        sum += e2;
        sum_sq += e2 * e2;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((T::lit(mean), T::lit((var / n).sqrt())))
}
