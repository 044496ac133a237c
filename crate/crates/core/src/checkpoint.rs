//! Model weights in safetensors files with a small JSON-valued header.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use menisc_autograd::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn new(kind: &str, config: serde_json::Value, seed: u64) -> Self {
        Self { format_version: FORMAT_VERSION, kind: kind.to_string(), config, seed }
    }

    fn to_map(&self) -> Result<HashMap<String, String>> {
        Ok(HashMap::from([
            ("format_version".to_string(), self.format_version.to_string()),
            ("kind".to_string(), self.kind.clone()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("seed".to_string(), self.seed.to_string()),
        ]))
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")));
        let format_version = get("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad format_version".into()))?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {format_version}")));
        }
        Ok(Self {
            format_version,
            kind: get("kind")?.clone(),
            config: serde_json::from_str(get("config")?)?,
            seed: get("seed")?.parse().map_err(|_| Error::Checkpoint("bad seed".into()))?,
        })
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp).at(tmp)?;
        f.write_all(bytes).at(tmp)?;
        f.sync_all().at(tmp)?;
    }
    fs::rename(tmp, path).at(path)
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Saves every parameter and buffer of `store`.
pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), le_bytes(&p.value)))
        .collect();
    owned.extend(store.buffers().map(|(n, t)| (n.to_string(), t.shape().to_vec(), le_bytes(t))));
    let views = owned
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, &Some(meta.to_map()?)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path.as_ref(), &bytes)
}

/// Reads only the header metadata.
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let bytes = fs::read(path.as_ref()).at(path.as_ref())?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let map = header.metadata().clone().ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    CheckpointMeta::from_map(&map)
}

/// Assigns every tensor of the file to the same-named parameter or buffer
/// of `store`, which must cover exactly the same names and shapes.
pub fn load_checkpoint(path: impl AsRef<Path>, store: &mut ParamStore<f32>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    let meta = read_checkpoint_meta(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected = store.len() + store.buffers().count();
    if st.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds {} tensors, the model has {expected}",
            path.display(),
            st.len()
        )));
    }
    for (name, view) in st.tensors() {
        store.assign(&name, tensor_from_view(&name, &view)?)?;
    }
    Ok(meta)
}

pub(crate) fn tensor_from_view(name: &str, view: &TensorView<'_>) -> Result<Tensor<f32>> {
    let data: Vec<f32> = match view.dtype() {
        Dtype::F32 => view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => view
            .data()
            .chunks_exact(2)
            .map(|c| half_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        other => return Err(Error::Checkpoint(format!("`{name}` has unsupported dtype {other:?}"))),
    };
    Ok(Tensor::new(view.shape(), data)?)
}

fn half_to_f32(h: u16) -> f32 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let frac = (h & 0x3ff) as f32;
    match exp {
        0 => sign * frac * 2f32.powi(-24),
        31 if frac == 0.0 => sign * f32::INFINITY,
        31 => f32::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f32.powi(e - 15),
    }
}
