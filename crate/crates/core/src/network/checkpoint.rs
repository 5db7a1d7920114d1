//! Model checkpoints and the encoder weight-import hook.
//!
//! A checkpoint is one file: a JSON header line (magic, network config and
//! the ordered parameter table) followed by every parameter as raw
//! little-endian `f32`, in table order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::Scalar;

const MAGIC: &str = "AGRCKPT";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    dtype: String,
    config: NetworkConfig,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    let mut payload = Vec::new();
    model.visit("", &mut |name, p| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
        });
        for v in &p.value {
            payload.extend_from_slice(&(v.to_f64().unwrap_or(f64::NAN) as f32).to_le_bytes());
        }
    });
    let header = Header {
        magic: MAGIC.into(),
        version: 1,
        dtype: "f32le".into(),
        config: model.config().clone(),
        params,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    crate::io::write_atomic(path, &bytes)
}

fn read_checkpoint(path: &Path) -> Result<(Header, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&line).map_err(|e| Error::Schema {
        path: path.into(),
        message: format!("checkpoint header: {e}"),
    })?;
    if header.magic != MAGIC || header.version != 1 || header.dtype != "f32le" {
        return Err(Error::Schema {
            path: path.into(),
            message: "not a version-1 f32le checkpoint".into(),
        });
    }
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if raw.len() != expected * 4 {
        return Err(Error::Schema {
            path: path.into(),
            message: format!("payload holds {} bytes, table needs {}", raw.len(), expected * 4),
        });
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, values))
}

/// Build a model from a checkpoint's stored config and weights.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (header, _) = read_checkpoint(path)?;
    let mut model = Model::new(&header.config, 0)?;
    model.load_weights(path)?;
    Ok(model)
}

/// Outcome of importing encoder weights from a foreign layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EncoderLoadReport {
    /// (source name, destination name)
    pub loaded: Vec<(String, String)>,
    /// (source name, reason)
    pub skipped: Vec<(String, String)>,
}

/// Map a reference ConvNeXt state-dict name onto this model's stages 1-4.
fn map_encoder_name(name: &str) -> Option<String> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["stages", s, b, layer, kind] => {
            let s: usize = s.parse().ok()?;
            (s < 4 && ["dwconv", "norm", "pwconv1", "pwconv2"].contains(layer)).then(|| {
                format!("encoder.stage{}.blocks.{b}.{layer}.{kind}", s + 1)
            })
        }
        ["downsample_layers", s, idx, kind] => {
            let s: usize = s.parse().ok()?;
            if s >= 4 {
                return None;
            }
            // The reference stem is conv then LN; later transitions are LN then conv.
            let layer = match (s, *idx) {
                (0, "0") | (1.., "1") => "conv",
                (0, "1") | (1.., "0") => "norm",
                _ => return None,
            };
            Some(format!("encoder.stage{}.transition.{layer}.{kind}", s + 1))
        }
        _ => None,
    }
}

/// Shapes match when equal after dropping trailing unit dimensions
/// (linear layers vs 1x1 convolutions).
fn shapes_compatible(a: &[usize], b: &[usize]) -> bool {
    let trim = |s: &[usize]| {
        let mut v = s.to_vec();
        while v.len() > 1 && v.last() == Some(&1) {
            v.pop();
        }
        v
    };
    trim(a) == trim(b)
}

impl<T: Scalar> Model<T> {
    /// Assign weights from a checkpoint written by [`save_checkpoint`]. The
    /// stored network config must equal this model's.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let (header, values) = read_checkpoint(path)?;
        if &header.config != self.config() {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different network config",
                path.display()
            )));
        }
        let mut table: HashMap<&str, (&[usize], usize)> = HashMap::new();
        let mut offset = 0;
        for p in &header.params {
            let len = p.shape.iter().product::<usize>();
            table.insert(&p.name, (&p.shape, offset));
            offset += len;
        }
        let mut problem = None;
        self.visit_mut("", &mut |name, p| match table.get(name) {
            Some((shape, off)) if *shape == p.shape.as_slice() => {
                let n = p.len();
                for (dst, &v) in p.value.iter_mut().zip(&values[*off..*off + n]) {
                    *dst = T::from_f64(v as f64);
                }
            }
            Some(_) => {
                problem.get_or_insert(format!("shape mismatch for {name}"));
            }
            None => {
                problem.get_or_insert(format!("missing parameter {name}"));
            }
        });
        match problem {
            Some(msg) => Err(Error::Schema {
                path: path.into(),
                message: msg,
            }),
            None => Ok(()),
        }
    }

    /// Import encoder weights from a safetensors file that uses the reference
    /// ConvNeXt naming (`stages.{i}.{j}.dwconv.weight`,
    /// `downsample_layers.{i}.{k}.weight`, ...). Tensors land on stages 1-4
    /// where shapes match; everything else is reported as skipped.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<EncoderLoadReport> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Schema {
            path: path.into(),
            message: format!("safetensors: {e}"),
        })?;
        let mut incoming: HashMap<String, (String, Vec<usize>, Vec<f64>)> = HashMap::new();
        let mut report = EncoderLoadReport::default();
        let mut names: Vec<String> = st.names().into_iter().cloned().collect();
        names.sort();
        for name in names {
            let view = st.tensor(&name).map_err(|e| Error::Schema {
                path: path.into(),
                message: format!("{name}: {e}"),
            })?;
            let Some(dest) = map_encoder_name(&name) else {
                report.skipped.push((name, "no counterpart in stages 1-4".into()));
                continue;
            };
            let data: Vec<f64> = match view.dtype() {
                safetensors::Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                safetensors::Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                other => {
                    report.skipped.push((name, format!("unsupported dtype {other:?}")));
                    continue;
                }
            };
            incoming.insert(dest, (name, view.shape().to_vec(), data));
        }
        self.visit_mut("", &mut |dest, p| {
            if let Some((src, shape, data)) = incoming.remove(dest) {
                if shapes_compatible(&shape, &p.shape) {
                    for (d, &v) in p.value.iter_mut().zip(&data) {
                        *d = T::from_f64(v);
                    }
                    report.loaded.push((src, dest.to_string()));
                } else {
                    report
                        .skipped
                        .push((src, format!("shape {:?} does not match {:?}", shape, p.shape)));
                }
            }
        });
        for (_, (src, _, _)) in incoming {
            report.skipped.push((src, "destination layer absent in this config".into()));
        }
        report.skipped.sort();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_model;
    use crate::tensor::Tensor;

    #[test]
    fn name_mapping() {
        assert_eq!(
            map_encoder_name("stages.2.1.pwconv1.weight").as_deref(),
            Some("encoder.stage3.blocks.1.pwconv1.weight")
        );
        assert_eq!(
            map_encoder_name("downsample_layers.0.0.weight").as_deref(),
            Some("encoder.stage1.transition.conv.weight")
        );
        assert_eq!(
            map_encoder_name("downsample_layers.2.0.bias").as_deref(),
            Some("encoder.stage3.transition.norm.bias")
        );
        assert_eq!(map_encoder_name("stages.0.0.gamma"), None);
        assert_eq!(map_encoder_name("head.weight"), None);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetworkConfig::toy();
        let mut a = Model::<f32>::new(&cfg, 11).unwrap();
        save_checkpoint(&a, &path).unwrap();
        let mut b: Model<f32> = load_checkpoint(&path).unwrap();
        let x = Tensor::full([1, 3, 16, 16], 0.3f32);
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());

        let mut other = build_model::<f32>(&cfg.clone().with_ablation(false, true)).unwrap();
        assert!(matches!(other.load_weights(&path), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_import_reports_matches_and_mismatches() {
        let cfg = NetworkConfig::toy();
        let mut model = build_model::<f32>(&cfg).unwrap();
        let dw: Vec<u8> = (0..8 * 49).flat_map(|i| (i as f32 * 0.01).to_le_bytes()).collect();
        let pw: Vec<u8> = (0..32 * 8).flat_map(|_| 0.5f32.to_le_bytes()).collect();
        let stem: Vec<u8> = (0..96 * 3 * 16).flat_map(|_| 1.0f32.to_le_bytes()).collect();
        let gamma: Vec<u8> = (0..8).flat_map(|_| 1.0f32.to_le_bytes()).collect();
        let views = vec![
            ("stages.0.0.dwconv.weight", safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![8, 1, 7, 7], &dw).unwrap()),
            ("stages.0.0.pwconv1.weight", safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![32, 8], &pw).unwrap()),
            ("downsample_layers.0.0.weight", safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![96, 3, 4, 4], &stem).unwrap()),
            ("stages.0.0.gamma", safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![8], &gamma).unwrap()),
        ];
        let bytes = safetensors::serialize(views, &None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("convnext.safetensors");
        fs::write(&path, bytes).unwrap();

        let report = model.load_encoder_weights(&path).unwrap();
        let loaded: Vec<&str> = report.loaded.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.contains(&"stages.0.0.dwconv.weight"));
        assert!(loaded.contains(&"stages.0.0.pwconv1.weight"));
        assert_eq!(report.skipped.len(), 2);
        let mut found = None;
        model.visit("", &mut |n, p| {
            if n == "encoder.stage1.blocks.0.pwconv1.weight" {
                found = Some(p.value.clone());
            }
        });
        assert!(found.unwrap().iter().all(|&v| v == 0.5));
    }
}
