//! `FPLM` model checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{NnError, Result};
use crate::model::{LayerSpec, NetworkModel};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"FPLM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    /// Decimal text: TOML integers are signed 64-bit.
    seed: String,
    input_shape: Vec<usize>,
    param_shapes: Vec<Vec<usize>>,
    config: String,
    layers: Vec<LayerSpec>,
}

pub fn write_model(w: &mut impl Write, model: &NetworkModel) -> Result<()> {
    let manifest = ModelManifest {
        format_version: MODEL_VERSION,
        seed: model.seed.to_string(),
        input_shape: model.input_shape.clone(),
        param_shapes: model.params.iter().map(|p| p.shape().to_vec()).collect(),
        config: model.config.clone(),
        layers: model.layers.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| NnError::Format(e.to_string()))?;
    container::write_header(w, MODEL_MAGIC, MODEL_VERSION, &text)?;
    for p in &model.params {
        container::write_block(w, p.data())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl std::io::Read) -> Result<NetworkModel> {
    let text = container::read_header(r, MODEL_MAGIC, MODEL_VERSION)?;
    let m: ModelManifest = toml::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
    let mut params = Vec::with_capacity(m.param_shapes.len());
    for shape in &m.param_shapes {
        let data = container::read_block(r, shape.iter().product())?;
        params.push(Tensor::from_vec(shape, data)?);
    }
    container::expect_eof(r)?;
    let model = NetworkModel {
        layers: m.layers,
        input_shape: m.input_shape,
        params,
        seed: m.seed.parse().map_err(|_| NnError::Format(format!("bad seed {:?}", m.seed)))?,
        config: m.config,
    };
    let expected: Vec<Vec<usize>> = model
        .layers
        .iter()
        .filter_map(LayerSpec::param_shapes)
        .flat_map(|(w, b)| [w, b])
        .collect();
    if expected != m.param_shapes {
        return Err(NnError::Format("parameter shapes disagree with the layer list".into()));
    }
    model.output_shape()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &NetworkModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::model::init_network;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = init_network(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::act(Activation::Tanh),
                LayerSpec::Reshape { shape: vec![32] },
                LayerSpec::dense(32, 1),
            ],
            &[1, 8, 8],
            42,
        )
        .unwrap();
        m.config = "note = \"x\"".into();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(&mut &buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(read_model(&mut &buf[..buf.len() - 1]).is_err());
    }
}
