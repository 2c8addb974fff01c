//! Rate experiments: target functions, learning and approximation curves,
//! CSV rate tables and log-log slope fits.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compiler::{compile_dfcn, CompileOptions, CompileReport};
use crate::conv::Filter;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{layer_widths, AffineLayer, ConvLayer, Dfcn, PooledEdcnn, SmoothnessSpec};
use crate::train::{deepen_identity, erm_train, excess_risk, gradient_check, refine, Dataset, InitScheme, Optimizer, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Regression function with known smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `|x_1 - 1/2|`
    AbsKink,
    /// `Π_k sin(π x_k)`
    SineProduct,
    /// `max(0, x_1 - 1/2)^{3/2}`
    PowerKink,
}

impl TargetKind {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            TargetKind::AbsKink => (x[0] - 0.5).abs(),
            TargetKind::SineProduct => x.iter().map(|&t| (std::f64::consts::PI * t).sin()).product(),
            TargetKind::PowerKink => (x[0] - 0.5).max(0.0).powf(1.5),
        }
    }

    /// `(r, c0, M)`. For the sine product `r = 1` and `c0 = π` bounds the
    /// Euclidean gradient norm `π (Σ_k cos²(πx_k) Π_{j≠k} sin²(πx_j))^{1/2}`;
    /// for the power kink `r = 3/2` with `c0 = 3/2` bounding the 1/2-Hölder
    /// constant of its derivative `(3/2) max(0, t)^{1/2}`.
    pub fn smoothness(self) -> SmoothnessSpec<f64> {
        let (r, c0, m) = match self {
            TargetKind::AbsKink => (1.0, 1.0, 0.5),
            TargetKind::SineProduct => (1.0, std::f64::consts::PI, 1.0),
            TargetKind::PowerKink => (1.5, 1.5, 0.5f64.powf(1.5)),
        };
        SmoothnessSpec::new(r, c0, m).expect("builtin constants are positive")
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::AbsKink => "abs_kink",
            TargetKind::SineProduct => "sine_product",
            TargetKind::PowerKink => "power_kink",
        }
    }
}

/// Targets available in dimension `d`; all three are defined for every `d >= 1`.
pub fn builtin_targets(d: usize) -> Result<Vec<TargetKind>> {
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    Ok(vec![TargetKind::AbsKink, TargetKind::SineProduct, TargetKind::PowerKink])
}

/// One measurement: a metric at a given scale (sample size or depth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub scale: f64,
    pub metric: f64,
    pub seed: u64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

impl RateTable {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<RateRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        self.write_csv(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::read_csv(file)
    }

    /// Distinct scales in increasing order.
    pub fn scales(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.rows.iter().map(|r| r.scale).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }

    /// Finite metrics recorded at `scale`; failed cells carry NaN.
    fn metrics_at(&self, scale: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.scale == scale && r.metric.is_finite())
            .map(|r| r.metric)
            .collect()
    }

    /// Median metric per scale, skipping scales without a finite value.
    pub fn medians(&self) -> Vec<(f64, f64)> {
        self.scales()
            .into_iter()
            .filter_map(|s| {
                let v = self.metrics_at(s);
                (!v.is_empty()).then(|| (s, median(v)))
            })
            .collect()
    }

    /// Smallest metric per scale.
    pub fn minima(&self) -> Vec<(f64, f64)> {
        self.scales()
            .into_iter()
            .filter_map(|s| {
                let v = self.metrics_at(s);
                (!v.is_empty()).then(|| (s, v.into_iter().fold(f64::INFINITY, f64::min)))
            })
            .collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares line through `(ln scale, ln median)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: Vec<(f64, f64)>,
}

/// Rows with a nonpositive or non-finite metric or scale are dropped with a
/// warning before taking medians.
pub fn slope_fit(table: &RateTable) -> Result<SlopeFit> {
    let (kept, dropped): (Vec<RateRow>, Vec<RateRow>) = table
        .rows
        .iter()
        .partition(|r| r.scale > 0.0 && r.metric > 0.0 && r.scale.is_finite() && r.metric.is_finite());
    for r in &dropped {
        log::warn!("slope fit skips row scale={} seed={} metric={}", r.scale, r.seed, r.metric);
    }
    if kept.len() < 3 {
        return Err(Error::Numerical(format!("slope fit needs 3 usable rows, found {}", kept.len())));
    }
    let points = RateTable { rows: kept }.medians();
    if points.len() < 2 {
        return Err(Error::Numerical("slope fit needs at least two distinct scales".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        points,
    })
}

/// Record of one trained model in a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scale: f64,
    pub seed: u64,
    pub depth: usize,
    pub restart_risks: Vec<Option<f64>>,
    pub selected_restart: usize,
    pub metric: f64,
    pub stderr: f64,
    /// Set when training failed; the metric is then NaN.
    pub error: Option<String>,
}

impl RunRecord {
    fn failed(scale: f64, seed: u64, depth: usize, err: &Error) -> Self {
        log::warn!("scale={scale} seed={seed}: {err}");
        Self {
            scale,
            seed,
            depth,
            restart_risks: Vec::new(),
            selected_restart: 0,
            metric: f64::NAN,
            stderr: f64::NAN,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(&path, e))
    }
}

/// Learning-curve experiment: excess risk against sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnRateConfig {
    pub target: TargetKind,
    pub d: usize,
    pub s: usize,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Half-width of the uniform label noise.
    pub noise: f64,
    /// Depth `ceil(m^e)`; defaults to `d / (4r + 2d)`.
    pub depth_exponent: Option<f64>,
    pub mc_samples: usize,
    pub train: TrainConfig,
}

impl Default for LearnRateConfig {
    fn default() -> Self {
        Self {
            target: TargetKind::AbsKink,
            d: 1,
            s: 2,
            sizes: vec![64, 128, 256, 512, 1024, 2048, 4096],
            seeds: vec![0, 1, 2, 3, 4],
            noise: 0.25,
            depth_exponent: None,
            mc_samples: 100_000,
            train: TrainConfig {
                epochs: 300,
                restarts: 4,
                init: InitScheme::Uniform,
                optimizer: Optimizer::LevenbergMarquardt,
                ..TrainConfig::default()
            },
        }
    }
}

impl LearnRateConfig {
    pub fn depth_for(&self, m: usize) -> usize {
        let r = self.target.smoothness().r;
        let d = self.d as f64;
        let e = self.depth_exponent.unwrap_or(d / (4.0 * r + 2.0 * d));
        ((m as f64).powf(e).ceil() as usize).max(1)
    }

    /// Bound on the labels, also used as the clamp level.
    pub fn label_bound(&self) -> f64 {
        self.target.smoothness().m + self.noise
    }

    fn validate(&self) -> Result<()> {
        check_common(self.d, self.s, &self.seeds)?;
        check_grid("sizes", &self.sizes)?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and nonnegative"));
        }
        if self.mc_samples < 2 {
            return Err(Error::invalid("mc_samples must be at least 2"));
        }
        Ok(())
    }
}

fn check_common(d: usize, s: usize, seeds: &[u64]) -> Result<()> {
    if d == 0 {
        return Err(Error::invalid("d must be at least 1"));
    }
    if s < 2 {
        return Err(Error::invalid("s must be at least 2"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seed list is empty"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("seeds must be distinct"));
    }
    Ok(())
}

fn check_grid(name: &str, grid: &[usize]) -> Result<()> {
    if grid.is_empty() || grid[0] == 0 {
        return Err(Error::invalid(format!("{name} must be nonempty and positive")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

fn cell_seed(seed: u64, scale: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (scale as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn uniform_sample(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect()
}

fn run_cells<R: Send>(jobs: usize, cells: Vec<(usize, u64)>, f: impl Fn(usize, u64) -> R + Sync) -> Result<Vec<R>> {
    let work = || cells.par_iter().map(|&(scale, seed)| f(scale, seed)).collect::<Vec<R>>();
    if jobs == 0 {
        Ok(work())
    } else {
        Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work))
    }
}

/// Trains one model per (size, seed) and measures `‖π_M f - f_ρ‖²` by Monte
/// Carlo on fresh uniform inputs. Cells that fail to train are kept as rows
/// with a NaN metric.
pub fn learn_rate_run(cfg: &LearnRateConfig, jobs: usize) -> Result<(RateTable, RunManifest)> {
    cfg.validate()?;
    let bound = cfg.label_bound();
    let cells: Vec<(usize, u64)> = cfg
        .sizes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let records = run_cells(jobs, cells, |m, seed| {
        let depth = cfg.depth_for(m);
        learn_cell(cfg, bound, m, seed, depth).unwrap_or_else(|e| RunRecord::failed(m as f64, seed, depth, &e))
    })?;
    Ok(finish("learn_rate", cfg, records))
}

fn learn_cell(cfg: &LearnRateConfig, bound: f64, m: usize, seed: u64, depth: usize) -> Result<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, m));
    let xs = uniform_sample(&mut rng, m, cfg.d);
    let ys = xs
        .iter()
        .map(|x| cfg.target.eval(x) + cfg.noise * rng.gen_range(-1.0..=1.0))
        .collect();
    let data = Dataset::new(xs, ys, bound)?;
    let train = TrainConfig {
        seed: cell_seed(seed, m),
        jobs: 1,
        ..cfg.train.clone()
    };
    let model = erm_train(&data, depth, cfg.s, &train)?;
    let target = cfg.target;
    let (mean, se) = excess_risk(&model.network, |x: &[f64]| target.eval(x), Some(bound), cfg.mc_samples, &mut rng)?;
    log::info!("m={m} seed={seed} depth={depth} train risk={:.3e} excess={mean:.3e}", model.risk);
    Ok(RunRecord {
        scale: m as f64,
        seed,
        depth,
        restart_risks: model.restart_risks,
        selected_restart: model.restart,
        metric: mean,
        stderr: se,
        error: None,
    })
}

fn finish<C: Serialize>(kind: &str, cfg: &C, runs: Vec<RunRecord>) -> (RateTable, RunManifest) {
    let table = RateTable {
        rows: runs
            .iter()
            .map(|r| RateRow {
                scale: r.scale,
                metric: r.metric,
                seed: r.seed,
                stderr: r.stderr,
            })
            .collect(),
    };
    let manifest = RunManifest {
        version: VERSION.to_string(),
        kind: kind.to_string(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        runs,
    };
    (table, manifest)
}

/// Approximation experiment: sup-norm error against depth for networks
/// trained on a dense noise-free sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApproxRateConfig {
    pub target: TargetKind,
    pub d: usize,
    pub s: usize,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Training grid points per axis.
    pub grid: usize,
    /// Evaluation points: a regular grid when `d = 1`, uniform Monte-Carlo
    /// points otherwise. Defaults to 10^4 and 10^5 respectively.
    pub eval_points: Option<usize>,
    /// Start each depth from the previous depth's network extended by
    /// identity layers, when the pooling schedule allows it.
    pub continuation: bool,
    pub train: TrainConfig,
}

impl Default for ApproxRateConfig {
    fn default() -> Self {
        Self {
            target: TargetKind::AbsKink,
            d: 1,
            s: 2,
            depths: vec![4, 8, 16, 32],
            seeds: vec![0, 1, 2],
            grid: 257,
            eval_points: None,
            continuation: true,
            train: TrainConfig {
                epochs: 300,
                restarts: 2,
                optimizer: Optimizer::LevenbergMarquardt,
                ..TrainConfig::default()
            },
        }
    }
}

impl ApproxRateConfig {
    fn validate(&self) -> Result<()> {
        check_common(self.d, self.s, &self.seeds)?;
        check_grid("depths", &self.depths)?;
        if self.grid < 2 {
            return Err(Error::invalid("grid needs at least 2 points per axis"));
        }
        if self.eval_points == Some(0) {
            return Err(Error::invalid("eval_points must be positive"));
        }
        Ok(())
    }

    /// Points on which the sup-norm error is measured.
    pub fn evaluation_points(&self) -> Vec<Vec<f64>> {
        if self.d == 1 {
            grid_points(1, self.eval_points.unwrap_or(10_000))
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            uniform_sample(&mut rng, self.eval_points.unwrap_or(100_000), self.d)
        }
    }
}

/// Regular grid of `n` points per axis in `[0,1]^d`.
pub fn grid_points(d: usize, n: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..n).map(|i| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 }).collect();
    let mut points = vec![Vec::new()];
    for _ in 0..d {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    points
}

/// `max_i |g(x_i) - f(x_i)|`.
pub fn sup_error(g: impl Fn(&[f64]) -> Result<f64>, f: impl Fn(&[f64]) -> f64, points: &[Vec<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in points {
        worst = worst.max((g(x)? - f(x)).abs());
    }
    Ok(worst)
}

/// Trains each depth in turn for every seed. Failed cells are kept as rows
/// with a NaN metric.
pub fn approx_rate_run(cfg: &ApproxRateConfig, jobs: usize) -> Result<(RateTable, RunManifest)> {
    cfg.validate()?;
    let xs = grid_points(cfg.d, cfg.grid);
    let ys: Vec<f64> = xs.iter().map(|x| cfg.target.eval(x)).collect();
    let bound = ys.iter().fold(cfg.target.smoothness().m, |m, y| m.max(y.abs()));
    let data = Dataset::new(xs, ys, bound)?;
    let eval = cfg.evaluation_points();
    let target = cfg.target;
    let cells: Vec<(usize, u64)> = cfg.seeds.iter().map(|&s| (0, s)).collect();
    let per_seed = run_cells(jobs, cells, |_, seed| {
        let mut records = Vec::with_capacity(cfg.depths.len());
        let mut previous: Option<PooledEdcnn<f64>> = None;
        for &depth in &cfg.depths {
            let train = TrainConfig {
                seed: cell_seed(seed, depth),
                jobs: 1,
                ..cfg.train.clone()
            };
            let warm = previous
                .as_ref()
                .filter(|_| cfg.continuation)
                .and_then(|p| deepen_identity(p, depth).ok());
            let fitted = match &warm {
                Some(start) => refine(start, &data, &train),
                None => erm_train(&data, depth, cfg.s, &train),
            }
            .and_then(|model| {
                let err = sup_error(|x| model.network.eval(x), |x| target.eval(x), &eval)?;
                Ok((model, err))
            });
            match fitted {
                Ok((model, err)) => {
                    log::info!("depth={depth} seed={seed} risk={:.3e} sup={err:.3e}", model.risk);
                    records.push(RunRecord {
                        scale: depth as f64,
                        seed,
                        depth,
                        restart_risks: model.restart_risks,
                        selected_restart: model.restart,
                        metric: err,
                        stderr: 0.0,
                        error: None,
                    });
                    previous = Some(model.network);
                }
                Err(e) => {
                    records.push(RunRecord::failed(depth as f64, seed, depth, &e));
                    previous = None;
                }
            }
        }
        records
    })?;
    let mut runs: Vec<RunRecord> = per_seed.into_iter().flatten().collect();
    runs.sort_by(|a, b| a.scale.total_cmp(&b.scale).then(a.seed.cmp(&b.seed)));
    Ok(finish("approx_rate", cfg, runs))
}

/// Depth-one fully connected network of width `knots + 1` interpolating a
/// one-dimensional `f` linearly at `knots` equally spaced points of `[0,1]`:
/// `f(0) σ(1) + Σ_k c_k σ(x - t_k)`.
pub fn interpolant_dfcn(f: impl Fn(f64) -> f64, knots: usize) -> Result<Dfcn<f64>> {
    if knots < 2 {
        return Err(Error::invalid("interpolation needs at least two knots"));
    }
    let t: Vec<f64> = (0..knots).map(|k| k as f64 / (knots - 1) as f64).collect();
    let v: Vec<f64> = t.iter().map(|&x| f(x)).collect();
    let slopes: Vec<f64> = (0..knots - 1).map(|k| (v[k + 1] - v[k]) / (t[k + 1] - t[k])).collect();
    let mut rows = vec![vec![0.0]];
    let mut bias = vec![1.0];
    let mut output = vec![v[0]];
    for k in 0..knots - 1 {
        rows.push(vec![1.0]);
        bias.push(-t[k]);
        output.push(if k == 0 { slopes[0] } else { slopes[k] - slopes[k - 1] });
    }
    let layer = AffineLayer::new(Matrix::from_rows(&rows)?, bias)?;
    Dfcn::new(vec![layer], output)
}

/// Random pooled network for gradient checks: pool sizes in `{1, 2}`,
/// filters and output weights uniform in `[-1, 1]`, biases in `[-0.3, 0.5]`.
pub fn random_pooled_network(rng: &mut ChaCha8Rng, d: usize, s: usize, depth: usize) -> Result<PooledEdcnn<f64>> {
    let pools: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=2)).collect();
    let widths = layer_widths(d, s, &pools)?;
    let mut layers = Vec::with_capacity(depth);
    for &(pre, _) in &widths {
        let filter = Filter::new((0..=s).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
        layers.push(ConvLayer::new(filter, (0..pre).map(|_| rng.gen_range(-0.3..=0.5)).collect())?);
    }
    let width = widths.last().map_or(d, |w| w.1);
    let output = (0..width).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    PooledEdcnn::new(s, d, layers, pools, output)
}

/// Batch of finite-difference gradient checks on random networks and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub networks: usize,
    pub max_depth: usize,
    pub max_samples: usize,
    pub max_d: usize,
    pub max_s: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            networks: 50,
            max_depth: 6,
            max_samples: 32,
            max_d: 3,
            max_s: 4,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub networks: usize,
    pub parameters_checked: usize,
    pub excluded_samples: usize,
    pub total_samples: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn gradcheck_run(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    if cfg.networks == 0 || cfg.max_depth == 0 || cfg.max_samples == 0 || cfg.max_d == 0 || cfg.max_s < 2 {
        return Err(Error::invalid("gradcheck needs positive sizes and max_s >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = GradcheckSummary {
        networks: cfg.networks,
        parameters_checked: 0,
        excluded_samples: 0,
        total_samples: 0,
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for _ in 0..cfg.networks {
        let d = rng.gen_range(1..=cfg.max_d);
        let s = rng.gen_range(2..=cfg.max_s);
        let depth = rng.gen_range(1..=cfg.max_depth);
        let net = random_pooled_network(&mut rng, d, s, depth)?;
        let m = rng.gen_range(1..=cfg.max_samples);
        let xs = uniform_sample(&mut rng, m, d);
        let ys = (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let data = Dataset::new(xs, ys, 1.0)?;
        let report = gradient_check(&net, &data, cfg.step)?;
        summary.parameters_checked += report.checked;
        summary.excluded_samples += report.excluded_samples;
        summary.total_samples += m;
        summary.max_rel_error = summary.max_rel_error.max(report.max_rel_error);
    }
    summary.passed = summary.max_rel_error <= cfg.tolerance;
    Ok(summary)
}

/// Sup-norm errors against `f` of a DFCN and of its compiled network on the
/// same points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    pub dfcn_error: f64,
    pub compiled_error: f64,
    pub report: CompileReport,
}

pub fn transfer_check(
    net: &Dfcn<f64>,
    f: impl Fn(&[f64]) -> f64,
    points: &[Vec<f64>],
    opts: &CompileOptions,
) -> Result<TransferCheck> {
    let (compiled, report) = compile_dfcn(net, opts)?;
    Ok(TransferCheck {
        dfcn_error: sup_error(|x| net.eval(x), &f, points)?,
        compiled_error: sup_error(|x| compiled.eval(x), &f, points)?,
        report,
    })
}
