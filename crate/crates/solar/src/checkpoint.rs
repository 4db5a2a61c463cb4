//! Model checkpoints: a single-file container of named f32 tensors with a
//! textual header carrying the backbone description.
//!
//! ```text
//! magic   4 bytes  "SOLC"
//! version u32      1
//! header_len u32, header (JSON: backbone spec + string metadata)
//! tensor_count u32
//! then per tensor:
//!   name_len u16, name, rank u8, rank x u32 dims, f32 values
//! ```
//!
//! Model parameters are stored at f32 precision; training quantizes its
//! state through the same rounding at every epoch boundary, which makes
//! save/load an exact identity on checkpointed state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, DescriptorModel, SOA_REDUCTION};
use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::pooling::{GemParam, WhiteningLayer};
use crate::soa::SoaParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SOLC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Textual checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: BackboneSpec,
    /// free-form metadata (epoch counters, config echoes)
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// A named tensor: dimensions plus row-major f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor {
            dims: vec![a.dim().0, a.dim().1],
            values: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Tensor { dims: vec![a.len()], values: a.iter().map(|&v| v as f32).collect() }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![1], values: vec![v as f32] }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::validation(format!("expected rank-2 tensor, got {:?}", self.dims)));
        }
        Array2::from_shape_vec(
            (self.dims[0], self.dims[1]),
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| Error::validation(e.to_string()))
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::validation(format!("expected rank-1 tensor, got {:?}", self.dims)));
        }
        Ok(Array1::from_iter(self.values.iter().map(|&v| v as f64)))
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::validation("expected a single-element tensor"));
        }
        Ok(self.values[0] as f64)
    }
}

/// A parsed checkpoint: header plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint lacks tensor {name:?}")))
    }
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header =
        serde_json::to_vec(&ckpt.header).map_err(|e| Error::validation(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        if name.len() > u16::MAX as usize {
            return Err(Error::validation(format!("tensor name too long: {name}")));
        }
        let expected: usize = tensor.dims.iter().product();
        if expected != tensor.values.len() {
            return Err(Error::validation(format!(
                "tensor {name}: dims {:?} disagree with {} values",
                tensor.dims,
                tensor.values.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dims.len() as u8);
        for &d in &tensor.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse checkpoint bytes, reporting the failing byte offset.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(format!("truncated while reading {what}"), *pos as u64));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            format!("bad magic {magic:02x?}, expected {:02x?}", CHECKPOINT_MAGIC),
            0,
        ));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported version {version}"), 4));
    }
    let header_len = u32::from_le_bytes(take(&mut pos, 4, "header length")?.try_into().unwrap());
    let header_at = pos as u64;
    let header_bytes = take(&mut pos, header_len as usize, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(format!("header: {e}"), header_at))?;
    let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap());

    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let at = pos as u64;
        let name_len =
            u16::from_le_bytes(take(&mut pos, 2, "tensor name length")?.try_into().unwrap());
        let name = String::from_utf8(take(&mut pos, name_len as usize, "tensor name")?.to_vec())
            .map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8"), at))?;
        let rank = take(&mut pos, 1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(
                u32::from_le_bytes(take(&mut pos, 4, "tensor dims")?.try_into().unwrap()) as usize,
            );
        }
        let len: usize = dims.iter().product();
        let raw = take(&mut pos, len * 4, "tensor values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor { dims, values });
    }
    if pos != bytes.len() {
        return Err(Error::format(
            format!("{} trailing bytes", bytes.len() - pos),
            pos as u64,
        ));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Convert a model into checkpoint tensors (no optimizer state).
pub fn model_to_checkpoint(model: &DescriptorModel) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for (i, conv) in model.convs.iter().enumerate() {
        tensors.insert(format!("conv{}.weight", i + 1), Tensor::from_array2(&conv.weight));
        tensors.insert(format!("conv{}.bias", i + 1), Tensor::from_array1(&conv.bias));
    }
    for (&ins, soa) in &model.soa {
        tensors.insert(format!("soa{ins}.wq"), Tensor::from_array2(&soa.wq));
        tensors.insert(format!("soa{ins}.wk"), Tensor::from_array2(&soa.wk));
        tensors.insert(format!("soa{ins}.wv"), Tensor::from_array2(&soa.wv));
        tensors.insert(format!("soa{ins}.w_out"), Tensor::from_array2(&soa.w_out));
    }
    tensors.insert("gem.p".to_string(), Tensor::scalar(model.gem.value()));
    tensors.insert("whiten.weight".to_string(), Tensor::from_array2(&model.whitening.weight));
    tensors.insert("whiten.bias".to_string(), Tensor::from_array1(&model.whitening.bias));
    Checkpoint {
        header: CheckpointHeader { spec: model.spec.clone(), meta: BTreeMap::new() },
        tensors,
    }
}

/// Rebuild a model from a checkpoint, verifying every shape against the
/// spec in the header. Extra tensors (optimizer state) are ignored.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<DescriptorModel> {
    let spec = ckpt.header.spec.clone();
    let mut template = DescriptorModel::init(spec.clone(), 0)?;
    for (i, conv) in template.convs.iter_mut().enumerate() {
        let w = ckpt.tensor(&format!("conv{}.weight", i + 1))?.to_array2()?;
        let b = ckpt.tensor(&format!("conv{}.bias", i + 1))?.to_array1()?;
        if w.dim() != conv.weight.dim() || b.len() != conv.bias.len() {
            return Err(Error::validation(format!(
                "conv{} shape mismatch against backbone spec",
                i + 1
            )));
        }
        conv.weight = w;
        conv.bias = b;
    }
    template.soa.clear();
    for &ins in &spec.soa_insertions {
        let d = spec.channels_at_insertion(ins)?;
        let wq = ckpt.tensor(&format!("soa{ins}.wq"))?.to_array2()?;
        let wk = ckpt.tensor(&format!("soa{ins}.wk"))?.to_array2()?;
        let wv = ckpt.tensor(&format!("soa{ins}.wv"))?.to_array2()?;
        let w_out = ckpt.tensor(&format!("soa{ins}.w_out"))?.to_array2()?;
        let d_qk = d / SOA_REDUCTION;
        if wq.dim() != (d_qk, d) || wk.dim() != (d_qk, d) || wv.dim() != (d, d)
            || w_out.dim() != (d, d)
        {
            return Err(Error::validation(format!("soa{ins} shape mismatch")));
        }
        template.soa.insert(
            ins,
            SoaParams { wq, wk, wv, w_out, alpha: 1.0 / (d_qk as f64).sqrt() },
        );
    }
    template.gem = GemParam::new(ckpt.tensor("gem.p")?.to_scalar()?)?;
    let w = ckpt.tensor("whiten.weight")?.to_array2()?;
    let b = ckpt.tensor("whiten.bias")?.to_array1()?;
    template.whitening = WhiteningLayer::new(w, b)?;
    Ok(template)
}

/// Save a bare model (no optimizer state).
pub fn save_model(path: &Path, model: &DescriptorModel) -> Result<()> {
    write_checkpoint(path, &model_to_checkpoint(model))
}

/// Load a bare model.
pub fn load_model(path: &Path) -> Result<DescriptorModel> {
    model_from_checkpoint(&read_checkpoint(path)?)
}

/// Round a value through f32, the precision used on disk.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;

    fn sample_model() -> DescriptorModel {
        let spec = BackboneSpec::toy_fcn(1, &[4, 5]).unwrap();
        DescriptorModel::init(spec, 7).unwrap()
    }

    #[test]
    fn fresh_model_roundtrips_exactly() {
        // init rounds every draw to f32, so save/load is the identity
        let model = sample_model();
        let ckpt = model_to_checkpoint(&model);
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = model_from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn byte_roundtrip_is_stable() {
        let model = sample_model();
        let ckpt = model_to_checkpoint(&model);
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let re = encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, re);
    }

    #[test]
    fn l2net_model_roundtrips() {
        let spec = BackboneSpec::l2net(&[3, 5]).unwrap();
        let model = DescriptorModel::init(spec, 11).unwrap();
        let ckpt = model_to_checkpoint(&model);
        let back =
            model_from_checkpoint(&decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap())
                .unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn bad_magic_and_truncation_name_offsets() {
        let model = sample_model();
        let mut bytes = encode_checkpoint(&model_to_checkpoint(&model)).unwrap();
        bytes[0] = b'Z';
        match decode_checkpoint(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let good = encode_checkpoint(&model_to_checkpoint(&model)).unwrap();
        match decode_checkpoint(&good[..good.len() - 5]) {
            Err(Error::Format { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_a_clear_error() {
        let model = sample_model();
        let mut ckpt = model_to_checkpoint(&model);
        ckpt.tensors.remove("gem.p");
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let err = model_from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap_err();
        assert!(err.to_string().contains("gem.p"));
    }

    #[test]
    fn extra_tensors_are_tolerated() {
        let model = sample_model();
        let mut ckpt = model_to_checkpoint(&model);
        ckpt.tensors
            .insert("adam.m.gem.p".to_string(), Tensor::scalar(0.5));
        let back =
            model_from_checkpoint(&decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap())
                .unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.solc");
        let model = sample_model();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
    }
}
