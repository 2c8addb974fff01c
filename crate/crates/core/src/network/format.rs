//! `.edcnn.json` model files.
//!
//! ```json
//! {"s": 2, "d": 1, "layers": [{"filter": ["1", "0", "0"], "bias": ["0", "0", "0"], "pool": 1}],
//!  "output": ["1", "0", "0"]}
//! ```
//!
//! Reals are written as decimal strings using the shortest representation
//! that parses back to the same bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvLayer, PooledEdcnn};
use crate::conv::Filter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    s: usize,
    d: usize,
    layers: Vec<LayerFile>,
    output: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    filter: Vec<String>,
    bias: Vec<String>,
    pool: usize,
}

fn encode<T: Scalar>(xs: &[T]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

fn decode<T: Scalar>(xs: &[String], at: &str) -> Result<Vec<T>> {
    xs.iter()
        .enumerate()
        .map(|(i, s)| {
            let v: T = s.parse().map_err(|e| Error::Parse {
                position: format!("{at}[{i}]"),
                message: format!("{s:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    position: format!("{at}[{i}]"),
                    message: format!("{s:?} is not finite"),
                });
            }
            Ok(v)
        })
        .collect()
}

pub fn serialize<T: Scalar>(net: &PooledEdcnn<T>) -> String {
    let file = ModelFile {
        s: net.s,
        d: net.d,
        layers: net
            .layers
            .iter()
            .zip(&net.pool_sizes)
            .map(|(l, &pool)| LayerFile {
                filter: encode(l.filter.coeffs()),
                bias: encode(&l.bias),
                pool,
            })
            .collect(),
        output: encode(&net.output),
    };
    serde_json::to_string(&file).expect("model file serialization is infallible")
}

pub fn deserialize<T: Scalar>(text: &str) -> Result<PooledEdcnn<T>> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        position: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut layers = Vec::with_capacity(file.layers.len());
    let mut pools = Vec::with_capacity(file.layers.len());
    for (i, l) in file.layers.iter().enumerate() {
        let filter = Filter::new(decode(&l.filter, &format!("layers[{i}].filter"))?)?;
        layers.push(ConvLayer::new(filter, decode(&l.bias, &format!("layers[{i}].bias"))?)?);
        pools.push(l.pool);
    }
    let output = decode(&file.output, "output")?;
    PooledEdcnn::new(file.s, file.d, layers, pools, output)
}

pub fn save_model<T: Scalar>(net: &PooledEdcnn<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), serialize(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<PooledEdcnn<T>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    deserialize(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layer_widths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> PooledEdcnn<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, s) = (rng.gen_range(1..4), rng.gen_range(2..4));
        let pools: Vec<usize> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(1..3)).collect();
        let widths = layer_widths(d, s, &pools).unwrap();
        let layers = widths
            .iter()
            .map(|&(pre, _)| {
                let f = Filter::new((0..=s).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap();
                ConvLayer::new(f, (0..pre).map(|_| rng.gen::<f64>() * 1e-7).collect()).unwrap()
            })
            .collect();
        let out = (0..widths.last().map_or(d, |w| w.1)).map(|_| rng.gen()).collect();
        PooledEdcnn::new(s, d, layers, pools, out).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..100 {
            let net = random_net(seed);
            let back: PooledEdcnn<f64> = deserialize(&serialize(&net)).unwrap();
            let (a, b) = (net.params(), back.params());
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(back.pool_sizes(), net.pool_sizes());
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let net = PooledEdcnn::<f32>::new(
            2,
            1,
            vec![ConvLayer::new(Filter::new(vec![0.1, 1e-30, -3.3]).unwrap(), vec![0.7; 3]).unwrap()],
            vec![1],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let back: PooledEdcnn<f32> = deserialize(&serialize(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn empty_layer_list_is_valid() {
        let net = PooledEdcnn::<f64>::new(2, 2, vec![], vec![], vec![1.0, -1.0]).unwrap();
        let text = serialize(&net);
        assert_eq!(text, r#"{"s":2,"d":2,"layers":[],"output":["1","-1"]}"#);
        assert_eq!(deserialize::<f64>(&text).unwrap(), net);
    }

    #[test]
    fn truncated_payload_fails_closed() {
        let text = serialize(&random_net(5));
        for cut in [1, text.len() / 2, text.len() - 1] {
            match deserialize::<f64>(&text[..cut]) {
                Err(Error::Parse { position, .. }) => assert!(position.starts_with("line")),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_number_reports_its_path() {
        let text = r#"{"s":2,"d":1,"layers":[{"filter":["1","x","0"],"bias":["0","0","0"],"pool":1}],"output":["1","0","0"]}"#;
        match deserialize::<f64>(text) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, "layers[0].filter[1]"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = r#"{"s":2,"d":1,"layers":[],"output":["inf"]}"#;
        assert!(matches!(deserialize::<f64>(text), Err(Error::Parse { .. })));
        let text = r#"{"s":2,"d":1,"layers":[],"output":["1","2"]}"#;
        assert!(matches!(deserialize::<f64>(text), Err(Error::Structural(_))));
    }
}
