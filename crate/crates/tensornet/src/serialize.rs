//! Self-describing JSON model container. Weights are stored as base64 of
//! little-endian f64 bytes so save -> load round trips are bit exact.

use crate::graph::Node;
use crate::{Layer, NetModel, Result, Tensor, TensorNetError};
use base64::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: Vec<usize>,
    data: String,
}

impl TensorFile {
    fn pack(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorFile {
            shape: t.shape().to_vec(),
            data: BASE64_STANDARD.encode(bytes),
        }
    }

    fn unpack(&self) -> Result<Tensor> {
        let bytes = BASE64_STANDARD
            .decode(&self.data)
            .map_err(|e| TensorNetError::Format(format!("bad weight encoding: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(TensorNetError::Format("weight byte length not a multiple of 8".into()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerFile {
    Input { shape: Vec<usize> },
    Dense { w: TensorFile, b: TensorFile },
    Conv3 { w: TensorFile, b: TensorFile, stride: usize },
    Convt3 { w: TensorFile, b: TensorFile, stride: usize },
    Elu,
    Relu,
    Sigmoid,
    BatchNorm {
        gamma: TensorFile,
        beta: TensorFile,
        running_mean: TensorFile,
        running_var: TensorFile,
        momentum: f64,
        eps: f64,
    },
    Flatten,
    Concat,
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    name: String,
    layer: LayerFile,
    inputs: Vec<usize>,
    frozen: bool,
    out_shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    nodes: Vec<NodeFile>,
    inputs: BTreeMap<String, usize>,
    output: usize,
}

fn layer_to_file(layer: &Layer) -> LayerFile {
    match layer {
        Layer::Input { shape } => LayerFile::Input { shape: shape.clone() },
        Layer::Dense { w, b } => LayerFile::Dense {
            w: TensorFile::pack(w),
            b: TensorFile::pack(b),
        },
        Layer::Conv3 { w, b, stride } => LayerFile::Conv3 {
            w: TensorFile::pack(w),
            b: TensorFile::pack(b),
            stride: *stride,
        },
        Layer::ConvT3 { w, b, stride } => LayerFile::Convt3 {
            w: TensorFile::pack(w),
            b: TensorFile::pack(b),
            stride: *stride,
        },
        Layer::Elu => LayerFile::Elu,
        Layer::Relu => LayerFile::Relu,
        Layer::Sigmoid => LayerFile::Sigmoid,
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum,
            eps,
        } => LayerFile::BatchNorm {
            gamma: TensorFile::pack(gamma),
            beta: TensorFile::pack(beta),
            running_mean: TensorFile::pack(running_mean),
            running_var: TensorFile::pack(running_var),
            momentum: *momentum,
            eps: *eps,
        },
        Layer::Flatten => LayerFile::Flatten,
        Layer::Concat => LayerFile::Concat,
    }
}

fn layer_from_file(file: LayerFile) -> Result<Layer> {
    Ok(match file {
        LayerFile::Input { shape } => Layer::Input { shape },
        LayerFile::Dense { w, b } => Layer::Dense {
            w: w.unpack()?,
            b: b.unpack()?,
        },
        LayerFile::Conv3 { w, b, stride } => Layer::Conv3 {
            w: w.unpack()?,
            b: b.unpack()?,
            stride,
        },
        LayerFile::Convt3 { w, b, stride } => Layer::ConvT3 {
            w: w.unpack()?,
            b: b.unpack()?,
            stride,
        },
        LayerFile::Elu => Layer::Elu,
        LayerFile::Relu => Layer::Relu,
        LayerFile::Sigmoid => Layer::Sigmoid,
        LayerFile::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum,
            eps,
        } => Layer::BatchNorm {
            gamma: gamma.unpack()?,
            beta: beta.unpack()?,
            running_mean: running_mean.unpack()?,
            running_var: running_var.unpack()?,
            momentum,
            eps,
        },
        LayerFile::Flatten => Layer::Flatten,
        LayerFile::Concat => Layer::Concat,
    })
}

pub fn save_model_to_string(model: &NetModel) -> Result<String> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        nodes: model
            .nodes
            .iter()
            .map(|n| NodeFile {
                name: n.name.clone(),
                layer: layer_to_file(&n.layer),
                inputs: n.inputs.clone(),
                frozen: n.frozen,
                out_shape: n.out_shape.clone(),
            })
            .collect(),
        inputs: model.inputs.clone(),
        output: model.output,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn load_model_from_str(s: &str) -> Result<NetModel> {
    let file: ModelFile = serde_json::from_str(s)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(TensorNetError::Format(format!(
            "unsupported model format version {}",
            file.format_version
        )));
    }
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for (id, nf) in file.nodes.into_iter().enumerate() {
        for &src in &nf.inputs {
            if src >= id {
                return Err(TensorNetError::Format(format!(
                    "node {id} references later node {src}"
                )));
            }
        }
        nodes.push(Node {
            name: nf.name,
            layer: layer_from_file(nf.layer)?,
            inputs: nf.inputs,
            frozen: nf.frozen,
            out_shape: nf.out_shape,
        });
    }
    if file.output >= nodes.len() {
        return Err(TensorNetError::Format("output node out of range".into()));
    }
    Ok(NetModel {
        nodes,
        inputs: file.inputs,
        output: file.output,
        version: 0,
    })
}

pub fn save_model(model: &NetModel, path: &Path) -> Result<()> {
    std::fs::write(path, save_model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetModel> {
    let s = std::fs::read_to_string(path)?;
    load_model_from_str(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::GraphBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::BTreeMap;

    #[test]
    fn round_trip_forward_is_bit_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, 4, 4, 4]).unwrap();
        let c = b.conv3("c1", x, 3, 2, &mut rng).unwrap();
        let c = b.batch_norm("bn1", c).unwrap();
        let c = b.elu("a1", c).unwrap();
        let f = b.flatten("flat", c).unwrap();
        let y = b.dense("fc", f, 2, &mut rng).unwrap();
        let model = b.finish(y).unwrap();

        let mut inputs = BTreeMap::new();
        let data: Vec<f64> = (0..64).map(|i| (i as f64) * 0.01 - 0.3).collect();
        inputs.insert("x".into(), Tensor::from_vec(&[1, 1, 4, 4, 4], data).unwrap());
        let (before, _) = model.forward(&inputs).unwrap();

        let text = save_model_to_string(&model).unwrap();
        let loaded = load_model_from_str(&text).unwrap();
        let (after, _) = loaded.forward(&inputs).unwrap();
        assert_eq!(before, after);
    }
}
