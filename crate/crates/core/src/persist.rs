//! Binary model checkpoints.
//!
//! Layout: the 5 magic bytes `SNET1`, a little-endian `u32` header length, a
//! UTF-8 JSON header describing the model and its arrays, then every array as
//! little-endian `f64` values in header order. Weights are stored row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{Branch, InitMode, SuperNetModel};
use crate::error::{Error, Result};
use crate::network::{DenseParams, ModelParams, NetworkSpec};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 5] = b"SNET1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl ArrayEntry {
    fn new(name: String, shape: Vec<usize>) -> Self {
        ArrayEntry { name, shape, dtype: "f64le".into() }
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Network { spec: NetworkSpec },
    Supernet { branches: Vec<NetworkSpec>, init_mode: InitMode, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelDescriptor,
    pub arrays: Vec<ArrayEntry>,
}

/// Anything a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network { spec: NetworkSpec, params: ModelParams },
    SuperNet(SuperNetModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Network { .. } => "network",
            Model::SuperNet(_) => "supernet",
        }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Model::Network { spec, params } => crate::network::predict_proba(params, spec, x),
            Model::SuperNet(m) => m.predict_proba(x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Network { spec, .. } => spec.input_dim,
            Model::SuperNet(m) => m.input_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Network { spec, .. } => spec.num_classes(),
            Model::SuperNet(m) => m.num_classes(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Model::Network { spec, .. } => spec.param_count(),
            Model::SuperNet(m) => m.param_count(),
        }
    }
}

fn push_dense(prefix: &str, p: &DenseParams, arrays: &mut Vec<ArrayEntry>, data: &mut Vec<f64>) {
    arrays.push(ArrayEntry::new(format!("{prefix}.weight"), vec![p.weight.rows(), p.weight.cols()]));
    data.extend_from_slice(p.weight.as_slice());
    arrays.push(ArrayEntry::new(format!("{prefix}.bias"), vec![p.bias.len()]));
    data.extend_from_slice(&p.bias);
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut data = Vec::new();
    let descriptor = match model {
        Model::Network { spec, params } => {
            params.check(spec)?;
            for (i, p) in params.layers.iter().enumerate() {
                push_dense(&format!("layer{i}"), p, &mut arrays, &mut data);
            }
            ModelDescriptor::Network { spec: spec.clone() }
        }
        Model::SuperNet(m) => {
            m.check()?;
            for (b, branch) in m.branches.iter().enumerate() {
                for (i, p) in branch.body.iter().enumerate() {
                    push_dense(&format!("branch{b}.layer{i}"), p, &mut arrays, &mut data);
                }
            }
            push_dense("head", &m.head, &mut arrays, &mut data);
            ModelDescriptor::Supernet {
                branches: m.branches.iter().map(|b| b.spec.clone()).collect(),
                init_mode: m.init_mode,
                num_classes: m.num_classes(),
            }
        }
    };
    let header = Header { version: FORMAT_VERSION, model: descriptor, arrays };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("cannot encode checkpoint header: {e}")))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Data("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Payload<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
    arrays: std::slice::Iter<'a, ArrayEntry>,
}

impl Payload<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let offset = (self.base + self.pos) as u64;
        let Some(entry) = self.arrays.next() else {
            return Err(Error::format(offset, format!("manifest is missing array {name}")));
        };
        if entry.name != name || entry.shape != shape || entry.dtype != "f64le" {
            return Err(Error::format(
                offset,
                format!("expected array {name} {shape:?} f64le, manifest has {} {:?} {}", entry.name, entry.shape, entry.dtype),
            ));
        }
        let n = entry.len();
        let chunk = &self.bytes[self.pos..self.pos + 8 * n];
        self.pos += 8 * n;
        Ok(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, width: usize) -> Result<DenseParams> {
        let w = self.take(&format!("{prefix}.weight"), &[fan_in, width])?;
        let bias = self.take(&format!("{prefix}.bias"), &[width])?;
        Ok(DenseParams { weight: Matrix::from_vec(fan_in, width, w)?, bias })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "not an SNET1 checkpoint (bad magic)"));
    }
    let Some(len_bytes) = bytes.get(5..9) else {
        return Err(Error::format(5, "file ends inside the header length"));
    };
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let Some(json) = bytes.get(9..9 + header_len) else {
        return Err(Error::format(9, format!("header of {header_len} bytes runs past the end of the file")));
    };
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(9, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(9, format!("unsupported checkpoint version {}", header.version)));
    }
    let base = 9 + header_len;
    let payload = &bytes[base..];
    let want: usize = header.arrays.iter().map(ArrayEntry::len).sum::<usize>() * 8;
    if payload.len() != want {
        return Err(Error::format(
            base as u64,
            format!("payload has {} bytes but the manifest describes {want}", payload.len()),
        ));
    }
    let mut reader = Payload { bytes: payload, base, pos: 0, arrays: header.arrays.iter() };
    let model = match header.model {
        ModelDescriptor::Network { spec } => {
            spec.validate()?;
            let layers = (0..spec.layers.len())
                .map(|i| reader.dense(&format!("layer{i}"), spec.fan_in(i), spec.layers[i].width))
                .collect::<Result<_>>()?;
            Model::Network { params: ModelParams { layers }, spec }
        }
        ModelDescriptor::Supernet { branches, init_mode, num_classes } => {
            let mut bodies = Vec::with_capacity(branches.len());
            for (b, spec) in branches.into_iter().enumerate() {
                spec.validate()?;
                let body = (0..spec.layers.len() - 1)
                    .map(|i| reader.dense(&format!("branch{b}.layer{i}"), spec.fan_in(i), spec.layers[i].width))
                    .collect::<Result<_>>()?;
                bodies.push(Branch { spec, body });
            }
            let rows = bodies.iter().map(|b| b.spec.penultimate_width()).sum();
            let head = reader.dense("head", rows, num_classes)?;
            let m = SuperNetModel { branches: bodies, head, init_mode };
            m.check()?;
            Model::SuperNet(m)
        }
    };
    if reader.arrays.next().is_some() {
        return Err(Error::format(base as u64, "manifest lists arrays the model does not use"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_model(params: &ModelParams, spec: &NetworkSpec, path: &Path) -> Result<()> {
    save(&Model::Network { spec: spec.clone(), params: params.clone() }, path)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, NetworkSpec)> {
    match load(path)? {
        Model::Network { spec, params } => Ok((params, spec)),
        Model::SuperNet(_) => Err(Error::format(0, format!("{} holds a SuperNet, not a single network", path.display()))),
    }
}

pub fn save_supernet(model: &SuperNetModel, path: &Path) -> Result<()> {
    save(&Model::SuperNet(model.clone()), path)
}

pub fn load_supernet(path: &Path) -> Result<SuperNetModel> {
    match load(path)? {
        Model::SuperNet(m) => Ok(m),
        Model::Network { .. } => Err(Error::format(0, format!("{} holds a single network, not a SuperNet", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::build_supernet;
    use crate::network::LayerSpec;
    use crate::rng::Rng;

    fn tiny() -> Model {
        let spec = NetworkSpec { input_dim: 2, layers: vec![LayerSpec::softmax(3)] };
        let params = ModelParams::init(&spec, &mut Rng::new(4)).unwrap();
        Model::Network { spec, params }
    }

    #[test]
    fn file_size_matches_layout() {
        let bytes = encode(&tiny()).unwrap();
        assert_eq!(&bytes[..5], b"SNET1");
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 5 + 4 + header_len + 8 * (6 + 3));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let spec = NetworkSpec::mlp(5, &[4, 3], 2, 0.25, 1e-3);
        let mut params = ModelParams::init(&spec, &mut Rng::new(8)).unwrap();
        params.layers[1].bias[0] = -0.0;
        params.layers[2].bias[1] = f64::MIN_POSITIVE / 3.0;
        let m = Model::Network { spec, params };
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        let Model::Network { params: p2, .. } = &back else { panic!() };
        assert!(p2.layers[1].bias[0].is_sign_negative());
        assert_eq!(back, m);
    }

    #[test]
    fn supernet_round_trip() {
        let a = NetworkSpec::mlp(4, &[3], 2, 0.0, 0.0);
        let b = NetworkSpec::mlp(4, &[5, 2], 2, 0.0, 0.0);
        let br = [(a.clone(), ModelParams::init(&a, &mut Rng::new(1)).unwrap()), (b.clone(), ModelParams::init(&b, &mut Rng::new(2)).unwrap())];
        let sn = build_supernet(&br, InitMode::scaled(2.0), &mut Rng::new(0)).unwrap();
        let back = decode(&encode(&Model::SuperNet(sn.clone())).unwrap()).unwrap();
        assert_eq!(back, Model::SuperNet(sn));
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let bytes = encode(&tiny()).unwrap();
        for cut in [0, 3, 7, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snet");
        save(&tiny(), &path).unwrap();
        assert!(load_model(&path).is_ok());
        assert!(matches!(load_supernet(&path), Err(Error::Format { .. })));
        assert!(matches!(load(&dir.path().join("missing.snet")), Err(Error::Io { .. })));
    }
}
