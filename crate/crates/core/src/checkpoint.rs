//! Trained model snapshots and their binary file format.
//!
//! Layout: magic `RQCK`, `u16` version, then tensor records
//! `{u16 name length, name, u8 dtype (0 = f32), u8 rank, u32 dims…, f32 payload}`, a record
//! with an empty name closing the list, and finally UTF-8 `key=value` metadata lines up to
//! end of file. Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quantizer::{QuantParams, QuantScheme};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RQCK";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Learned quantizer state of one layer after QAT.
#[derive(Debug, Clone, PartialEq)]
pub struct QatLayer {
    pub weight: (QuantScheme, QuantParams),
    pub act: Option<(QuantScheme, QuantParams)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Latent weights and biases in layer order, all exactly representable as f32.
    pub tensors: Vec<(String, Tensor)>,
    pub qat: Option<Vec<QatLayer>>,
    /// Training metadata such as seed, config hash and epoch.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Rounds every tensor (and QAT step) to f32.
    pub fn new(spec: ModelSpec, tensors: Vec<(String, Tensor)>, meta: BTreeMap<String, String>) -> Result<Self> {
        for layer in spec.layers() {
            for (name, shape) in [
                (layer.weight_name(), layer.weight_shape()),
                (layer.bias_name(), vec![layer.out_channels()]),
            ] {
                match tensors.iter().find(|(n, _)| *n == name) {
                    Some((_, t)) if t.shape() == shape.as_slice() => {}
                    Some((_, t)) => {
                        return Err(Error::ShapeMismatch {
                            op: "checkpoint",
                            lhs: shape,
                            rhs: t.shape().to_vec(),
                        });
                    }
                    None => return Err(Error::invalid(format!("checkpoint lacks tensor {name}"))),
                }
            }
        }
        let tensors = tensors.into_iter().map(|(n, t)| (n, t.round_to_f32())).collect();
        Ok(Self {
            spec,
            tensors,
            qat: None,
            meta,
        })
    }

    pub fn with_qat(mut self, qat: Vec<QatLayer>) -> Result<Self> {
        if qat.len() != self.spec.layers().len() {
            return Err(Error::invalid("one QAT entry per layer required"));
        }
        let round = |(s, p): (QuantScheme, QuantParams)| -> Result<(QuantScheme, QuantParams)> {
            let steps = p.step.iter().map(|&v| v as f32 as f64).collect();
            Ok((s, QuantParams::from_steps(steps, p.zero_point, &s)?))
        };
        let mut out = Vec::with_capacity(qat.len());
        for l in qat {
            out.push(QatLayer {
                weight: round(l.weight)?,
                act: l.act.map(round).transpose()?,
            });
        }
        self.qat = Some(out);
        Ok(self)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Effective (post-SatNL) weights in layer order.
    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.spec
            .layers()
            .iter()
            .map(|l| {
                let latent = self.tensor(&l.weight_name()).expect("validated in new");
                self.spec.effective_weight(&l.name, latent)
            })
            .collect()
    }

    pub fn biases(&self) -> Vec<Tensor> {
        self.spec
            .layers()
            .iter()
            .map(|l| self.tensor(&l.bias_name()).expect("validated in new").clone())
            .collect()
    }

    fn all_records(&self) -> Vec<(String, Tensor)> {
        let mut recs = self.tensors.clone();
        if let Some(qat) = &self.qat {
            for (layer, q) in self.spec.layers().iter().zip(qat) {
                recs.push((
                    format!("qat.{}.weight_step", layer.name),
                    Tensor::from_vec(q.weight.1.step.clone()),
                ));
                if let Some((_, p)) = &q.act {
                    recs.push((format!("qat.{}.act_step", layer.name), Tensor::from_vec(p.step.clone())));
                }
            }
        }
        recs
    }

    fn all_meta(&self) -> BTreeMap<String, String> {
        let mut m = self.meta.clone();
        m.extend(self.spec.to_meta());
        if let Some(qat) = &self.qat {
            for (layer, q) in self.spec.layers().iter().zip(qat) {
                m.insert(format!("qat.{}.bits_w", layer.name), q.weight.0.bits.to_string());
                if let Some((s, p)) = &q.act {
                    m.insert(format!("qat.{}.bits_a", layer.name), s.bits.to_string());
                    m.insert(format!("qat.{}.act_zero_point", layer.name), p.zero_point[0].to_string());
                }
            }
        }
        m
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in self.all_records() {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            if len == 0 {
                return Err(Error::Format("tensor names must be nonempty".into()));
            }
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank above 255".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension above u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
        for (k, v) in self.all_meta() {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata entry {k} cannot be encoded")));
            }
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing RQCK magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut records = Vec::new();
        loop {
            let len = r.u16()? as usize;
            if len == 0 {
                break;
            }
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("unknown dtype tag {dtype} for {name}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        let text = std::str::from_utf8(&bytes[r.pos..]).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line without '=': {line}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let spec = ModelSpec::from_meta(&meta)?;
        let (qat_records, tensors): (Vec<_>, Vec<_>) = records.into_iter().partition(|(n, _)| n.starts_with("qat."));
        let qat_meta: BTreeMap<String, String> = meta
            .iter()
            .filter(|(k, _)| k.starts_with("qat."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        meta.retain(|k, _| !(k.starts_with("qat.") || k.starts_with("model.") || k.starts_with("satnl.")));
        let mut ckpt = Checkpoint::new(spec, tensors, meta)?;
        if !qat_records.is_empty() {
            ckpt.qat = Some(parse_qat(&ckpt.spec, &qat_records, &qat_meta)?);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_qat(spec: &ModelSpec, records: &[(String, Tensor)], meta: &BTreeMap<String, String>) -> Result<Vec<QatLayer>> {
    let find = |name: String| records.iter().find(|(n, _)| *n == name).map(|(_, t)| t);
    let num = |key: String| -> Result<Option<i64>> {
        meta.get(&key)
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad value for {key}"))))
            .transpose()
    };
    let mut out = Vec::new();
    for layer in spec.layers() {
        let step = find(format!("qat.{}.weight_step", layer.name))
            .ok_or_else(|| Error::Format(format!("missing weight step for {}", layer.name)))?;
        let bits = num(format!("qat.{}.bits_w", layer.name))?
            .ok_or_else(|| Error::Format(format!("missing bits_w for {}", layer.name)))?;
        let ws = QuantScheme::weight(bits as u32, 0, crate::quantizer::FitMethod::MinMax)?;
        let wp = QuantParams::from_steps(step.data().to_vec(), vec![0; step.len()], &ws)?;
        let act = match find(format!("qat.{}.act_step", layer.name)) {
            Some(s) => {
                let bits = num(format!("qat.{}.bits_a", layer.name))?
                    .ok_or_else(|| Error::Format(format!("missing bits_a for {}", layer.name)))?;
                let z = num(format!("qat.{}.act_zero_point", layer.name))?.unwrap_or(0);
                let scheme = QuantScheme::activation(bits as u32)?;
                Some((scheme, QuantParams::from_steps(s.data().to_vec(), vec![z], &scheme)?))
            }
            None => None,
        };
        out.push(QatLayer { weight: (ws, wp), act });
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::mlp(vec![3, 2]).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), "7".into());
        Checkpoint::new(spec.clone(), spec.init_params(7), meta).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"RQCK");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]) as usize, "fc1.weight".len());
        assert_eq!(&b[8..18], b"fc1.weight");
        assert_eq!((b[18], b[19]), (0, 2));
        assert_eq!(u32::from_le_bytes([b[20], b[21], b[22], b[23]]), 2);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn qat_state_round_trips() {
        let c = sample();
        let ws = QuantScheme::weight(4, 0, crate::quantizer::FitMethod::MinMax).unwrap();
        let wp = QuantParams::from_steps(vec![0.1, 0.3], vec![0, 0], &ws).unwrap();
        let as_ = QuantScheme::activation(8).unwrap();
        let ap = QuantParams::from_steps(vec![0.02], vec![12], &as_).unwrap();
        let c = c
            .with_qat(vec![QatLayer {
                weight: (ws, wp),
                act: Some((as_, ap)),
            }])
            .unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
