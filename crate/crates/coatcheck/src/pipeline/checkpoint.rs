//! Self-describing binary checkpoint container: named f32 tensors
//! (little-endian) plus a string metadata map. Round-trips byte-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hypersphere::HypersphereState;
use crate::nn::NetParams;

pub const MAGIC: &[u8; 8] = b"COATCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContainer {
    pub format_version: u32,
    /// free-form tags: config JSON, seeds, kind
    pub metadata: BTreeMap<String, String>,
    /// (name, shape, row-major data), sorted by name on write
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl CheckpointContainer {
    pub fn new(kind: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("kind".to_string(), kind.to_string());
        CheckpointContainer { format_version: FORMAT_VERSION, metadata, tensors: Vec::new() }
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(|s| s.as_str())
    }

    pub fn insert_tensor(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.to_string(), shape, data));
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Store a network's parameters under a name prefix.
    pub fn put_net(&mut self, prefix: &str, net: &impl NetParams) {
        for (name, p) in net.named_params() {
            let shape = p.value.shape().to_vec();
            let data: Vec<f32> = p.value.iter().copied().collect();
            self.insert_tensor(&format!("{prefix}.{name}"), shape, data);
        }
    }

    /// Load parameters stored by `put_net` back into a compatible network.
    pub fn load_net(&self, prefix: &str, net: &mut impl NetParams) -> Result<()> {
        for (name, p) in net.named_params_mut() {
            let full = format!("{prefix}.{name}");
            let (shape, data) = self
                .tensor(&full)
                .ok_or_else(|| Error::Format(format!("missing tensor {full}")))?;
            if shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {full}: shape {:?} != expected {:?}",
                    shape,
                    p.value.shape()
                )));
            }
            for (dst, &src) in p.value.iter_mut().zip(data) {
                *dst = src;
            }
        }
        Ok(())
    }

    /// Store a hypersphere state (center tensor + exact scalar bits).
    pub fn put_sphere(&mut self, prefix: &str, sphere: &HypersphereState) {
        let center: Vec<f32> = sphere.center.iter().map(|&v| v as f32).collect();
        self.insert_tensor(&format!("{prefix}.center"), vec![center.len()], center);
        self.metadata
            .insert(format!("{prefix}.radius_bits"), sphere.radius.to_bits().to_string());
        self.metadata.insert(format!("{prefix}.nu_bits"), sphere.nu.to_bits().to_string());
    }

    pub fn load_sphere(&self, prefix: &str) -> Result<HypersphereState> {
        let (_, center) = self
            .tensor(&format!("{prefix}.center"))
            .ok_or_else(|| Error::Format(format!("missing tensor {prefix}.center")))?;
        let radius = self.scalar_bits(&format!("{prefix}.radius_bits"))?;
        let nu = self.scalar_bits(&format!("{prefix}.nu_bits"))?;
        HypersphereState::new(
            ndarray::Array1::from_iter(center.iter().map(|&v| f64::from(v))),
            radius,
            nu,
        )
    }

    fn scalar_bits(&self, key: &str) -> Result<f64> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata {key}")))?;
        let bits: u64 =
            raw.parse().map_err(|_| Error::Format(format!("bad bits in {key}: {raw}")))?;
        Ok(f64::from_bits(bits))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let meta_json = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        let mut tensors = self.tensors.clone();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, shape, data) in &tensors {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".to_string()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".to_string()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(take(&mut pos, meta_len)?)?;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name not UTF-8".to_string()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(&mut pos, len * 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, shape, data));
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".to_string()));
        }
        Ok(CheckpointContainer { format_version: version, metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coating::{ExtConfig, ExtractorState, GenConfig, GeneratorState};
    use ndarray::Array1;

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut c = CheckpointContainer::new("test");
        c.metadata.insert("seed".into(), "42".into());
        c.insert_tensor("b", vec![2, 2], vec![1.0, 2.0, 3.5, -0.25]);
        c.insert_tensor("a", vec![3], vec![0.1, 0.2, 0.3]);
        let bytes1 = c.to_bytes().unwrap();
        let back = CheckpointContainer::from_bytes(&bytes1).unwrap();
        let bytes2 = back.to_bytes().unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(back.tensor("a").unwrap().1, &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn nets_roundtrip_bitwise() {
        let gen = GeneratorState::new(
            7,
            GenConfig { image_channels: 3, channels: 4, blocks: 3, delta_scale: 0.05 },
        );
        let ext = ExtractorState::new(
            8,
            ExtConfig { image_channels: 3, channels: 4, embedding_dim: 6 },
        );
        let mut c = CheckpointContainer::new("coating");
        c.put_net("gen", &gen);
        c.put_net("ext", &ext);
        let sphere = HypersphereState::new(Array1::from_vec(vec![0.25, -1.5]), 1.75, 0.5).unwrap();
        c.put_sphere("sphere", &sphere);
        let bytes = c.to_bytes().unwrap();
        let back = CheckpointContainer::from_bytes(&bytes).unwrap();
        let mut gen2 = GeneratorState::new(
            99,
            GenConfig { image_channels: 3, channels: 4, blocks: 3, delta_scale: 0.05 },
        );
        back.load_net("gen", &mut gen2).unwrap();
        assert!(gen.params_equal(&gen2));
        let s2 = back.load_sphere("sphere").unwrap();
        assert_eq!(s2.radius, 1.75);
        assert_eq!(s2.nu, 0.5);
        // wrong prefix fails loudly
        assert!(back.load_net("nope", &mut gen2).is_err());
    }

    #[test]
    fn bad_bytes_are_rejected() {
        assert!(CheckpointContainer::from_bytes(b"not a checkpoint").is_err());
        let c = CheckpointContainer::new("x");
        let mut bytes = c.to_bytes().unwrap();
        bytes.push(0);
        assert!(CheckpointContainer::from_bytes(&bytes).is_err());
    }
}
