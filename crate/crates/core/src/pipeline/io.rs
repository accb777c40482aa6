//! Flat binary weight container.
//!
//! ```text
//! magic "MMQW" | version u32 | entry count u32
//! per entry: name length u16 | utf-8 name | dtype u8 (0 = f32) | rank u8
//!            | dims u32 × rank | payload f32 × Π dims
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use super::{build_model, BlockNorms, FixedTensors, LayerNorm, ModelWeights, PipelineSpec};
use crate::error::{Error, Result};
use crate::Matrix;

pub const MAGIC: &[u8; 4] = b"MMQW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows() as u32, m.cols() as u32], data: m.data().to_vec() }
    }

    fn vector(v: &[f32]) -> Self {
        Self { dims: vec![v.len() as u32], data: v.to_vec() }
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::WeightFormat(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[DTYPE_F32, t.dims.len() as u8])?;
        for d in &t.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::WeightFormat("name is not utf-8".into()))?;
        let [dtype, rank] = read_array::<2, _>(&mut r)?;
        if dtype != DTYPE_F32 {
            return Err(Error::WeightFormat(format!("{name}: unsupported dtype {dtype}")));
        }
        let dims: Vec<u32> =
            (0..rank).map(|_| read_array(&mut r).map(u32::from_le_bytes)).collect::<Result<_>>()?;
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(read_array(&mut r)?));
        }
        if out.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(Error::WeightFormat(format!("duplicate entry {name}")));
        }
    }
    Ok(out)
}

fn norm_entries(out: &mut BTreeMap<String, Tensor>, prefix: &str, ln: &LayerNorm) {
    out.insert(format!("{prefix}.gain"), Tensor::vector(&ln.gain));
    out.insert(format!("{prefix}.bias"), Tensor::vector(&ln.bias));
}

fn block_norm_entries(out: &mut BTreeMap<String, Tensor>, component: &str, norms: &[BlockNorms]) {
    for (b, n) in norms.iter().enumerate() {
        norm_entries(out, &format!("{component}.{b}.ln_attn"), &n.attn);
        norm_entries(out, &format!("{component}.{b}.ln_ff"), &n.ff);
    }
}

/// Every tensor of the model under its canonical name.
pub fn named_tensors(weights: &ModelWeights) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (addr, m) in weights.layers() {
        out.insert(addr.name(), Tensor::matrix(m));
    }
    let f = weights.fixed();
    out.insert("vision.patch_embed".into(), Tensor::matrix(&f.patch_embed));
    out.insert("vision.pos".into(), Tensor::matrix(&f.vision_pos));
    block_norm_entries(&mut out, "vision", &f.vision_norms);
    norm_entries(&mut out, "vision.final_norm", &f.vision_final);
    if let Some(q) = &f.queries {
        out.insert("connector.queries".into(), Tensor::matrix(q));
    }
    block_norm_entries(&mut out, "connector", &f.connector_norms);
    if let Some(ln) = &f.connector_final {
        norm_entries(&mut out, "connector.final_norm", ln);
    }
    if let Some(p) = &f.projector {
        out.insert("connector.projector".into(), Tensor::matrix(p));
    }
    out.insert("language.token_embed".into(), Tensor::matrix(&f.token_embed));
    out.insert("language.pos".into(), Tensor::matrix(&f.language_pos));
    block_norm_entries(&mut out, "language", &f.language_norms);
    norm_entries(&mut out, "language.final_norm", &f.language_final);
    out.insert("language.head".into(), Tensor::matrix(&f.head));
    out
}

pub fn export_weights<W: Write>(weights: &ModelWeights, out: W) -> Result<()> {
    write_tensors(out, &named_tensors(weights))
}

/// Reads weights for `spec`; every tensor of the spec must be present with
/// matching dimensions and finite values, and no extra entries are allowed.
pub fn import_weights<R: Read>(spec: &PipelineSpec, r: R) -> Result<ModelWeights> {
    let mut file = read_tensors(r)?;
    let template = build_model(spec)?;
    let expected = named_tensors(&template);
    let mut take = |name: &str| -> Result<Tensor> {
        let want = &expected[name];
        let got = file.remove(name).ok_or_else(|| Error::WeightFormat(format!("missing entry {name}")))?;
        if got.dims != want.dims {
            return Err(Error::WeightFormat(format!("{name}: dims {:?}, expected {:?}", got.dims, want.dims)));
        }
        if got.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::WeightFormat(format!("{name}: non-finite value")));
        }
        Ok(got)
    };
    let matrix = |t: Tensor| Matrix::from_parts(t.dims[0] as usize, t.dims[1] as usize, t.data);

    let mut layers = BTreeMap::new();
    for addr in template.layers().keys() {
        layers.insert(*addr, Arc::new(matrix(take(&addr.name())?)));
    }
    let f = template.fixed();
    let mut norm = |prefix: &str| -> Result<LayerNorm> {
        Ok(LayerNorm { gain: take(&format!("{prefix}.gain"))?.data, bias: take(&format!("{prefix}.bias"))?.data })
    };
    let mut block_norms = |component: &str, n: usize| -> Result<Vec<BlockNorms>> {
        (0..n)
            .map(|b| {
                Ok(BlockNorms {
                    attn: norm(&format!("{component}.{b}.ln_attn"))?,
                    ff: norm(&format!("{component}.{b}.ln_ff"))?,
                })
            })
            .collect()
    };
    let vision_norms = block_norms("vision", f.vision_norms.len())?;
    let connector_norms = block_norms("connector", f.connector_norms.len())?;
    let language_norms = block_norms("language", f.language_norms.len())?;
    let mut norm = |prefix: &str| -> Result<LayerNorm> {
        Ok(LayerNorm { gain: take(&format!("{prefix}.gain"))?.data, bias: take(&format!("{prefix}.bias"))?.data })
    };
    let vision_final = norm("vision.final_norm")?;
    let connector_final = if f.connector_final.is_some() { Some(norm("connector.final_norm")?) } else { None };
    let language_final = norm("language.final_norm")?;
    let fixed = FixedTensors {
        patch_embed: matrix(take("vision.patch_embed")?),
        vision_pos: matrix(take("vision.pos")?),
        vision_norms,
        vision_final,
        queries: if f.queries.is_some() { Some(matrix(take("connector.queries")?)) } else { None },
        connector_norms,
        connector_final,
        projector: if f.projector.is_some() { Some(matrix(take("connector.projector")?)) } else { None },
        token_embed: matrix(take("language.token_embed")?),
        language_pos: matrix(take("language.pos")?),
        language_norms,
        language_final,
        head: matrix(take("language.head")?),
    };
    if let Some(extra) = file.keys().next() {
        return Err(Error::WeightFormat(format!("unexpected entry {extra}")));
    }
    Ok(ModelWeights::from_parts(spec.clone(), layers, fixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{apply_quantization, QuantConfig, QuantMethod, Selector};

    #[test]
    fn bit_exact_round_trip() {
        for spec in [PipelineSpec::default(), PipelineSpec::projector()] {
            let w = build_model(&spec).unwrap();
            let (q, _) = apply_quantization(&w, &Selector::all(), &QuantConfig::new(QuantMethod::Uniform, 3), None).unwrap();
            let mut buf = Vec::new();
            export_weights(&q, &mut buf).unwrap();
            let back = import_weights(&spec, buf.as_slice()).unwrap();
            assert_eq!(back, q);
            let mut again = Vec::new();
            export_weights(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn header_layout() {
        let mut t = BTreeMap::new();
        t.insert("ab".to_string(), Tensor { dims: vec![2], data: vec![1.0, -2.0] });
        let mut buf = Vec::new();
        write_tensors(&mut buf, &t).unwrap();
        let mut expected = b"MMQW".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.extend([0u8, 1u8]);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tensors(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_tensors(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let spec = PipelineSpec::default();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &BTreeMap::new()).unwrap();
        assert!(import_weights(&spec, buf.as_slice()).is_err());
        let mut truncated = Vec::new();
        export_weights(&build_model(&spec).unwrap(), &mut truncated).unwrap();
        truncated.truncate(truncated.len() - 3);
        assert!(import_weights(&spec, truncated.as_slice()).is_err());
    }
}
