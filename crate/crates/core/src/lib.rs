//! Expansive deep convolutional networks with max-pooling: convolution
//! primitives, filter factorization, a compiler from fully connected ReLU
//! networks, gradient-descent training and rate experiments.

pub mod cli;
pub mod compiler;
pub mod conv;
pub mod error;
pub mod factor;
pub mod harness;
pub mod matrix;
pub mod network;
pub mod scalar;
pub mod train;

pub use compiler::{compile_block, compile_dfcn, AffineBlock, BiasRule, CompileOptions, CompileReport};
pub use conv::{conv_classic, conv_padded, max_pool, pmax, relu, toeplitz_matrix, Filter, PoolParams};
pub use error::{Error, Result};
pub use factor::{factorize_filter, reconstruct, FactorizationResult};
pub use matrix::Matrix;
pub use network::{truncate, AffineLayer, ClassicDcnn, ConvLayer, Dfcn, PooledEdcnn, SmoothnessSpec};
pub use scalar::Scalar;
pub use train::{empirical_risk, erm_train, excess_risk, grad_empirical_risk, Dataset, InitScheme, Optimizer, TrainConfig, TrainedModel};

pub type Filter64 = Filter<f64>;
pub type Filter32 = Filter<f32>;
pub type Matrix64 = Matrix<f64>;
pub type PooledEdcnn64 = PooledEdcnn<f64>;
pub type PooledEdcnn32 = PooledEdcnn<f32>;
pub type Dfcn64 = Dfcn<f64>;
