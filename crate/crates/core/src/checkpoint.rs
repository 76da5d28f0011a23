//! Binary checkpoints: the magic `SANLAB01`, then per named tensor a
//! little-endian `u32` name length, the name bytes, a `u32` rank, `rank`
//! `u32` dims and the `f32` payload. Pooling mode and partition scheme are
//! stored as extra `meta.*` / `san.scheme.*` tensors, so a file fully
//! describes the detector it came from.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::detector::{Detector, InitMode};
use crate::error::{Error, Result};
use crate::kernels::PoolMode;
use crate::san::ScalePartitionScheme;
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: &[u8; 8] = b"SANLAB01";

fn meta_tensors(model: &Detector) -> Vec<(String, Tensor<f32>)> {
    let mut out = vec![(
        "meta.pool_mode".to_string(),
        Tensor::scalar(match model.pool_mode {
            PoolMode::Avg => 0.0,
            PoolMode::Max => 1.0,
        }),
    )];
    if let Some(san) = &model.san {
        out.push(("san.scheme.ref_scale".into(), Tensor::scalar(san.scheme.ref_scale as f32)));
        let b: Vec<f32> = san.scheme.boundaries.iter().map(|&v| v as f32).collect();
        out.push(("san.scheme.boundaries".into(), Tensor::new(vec![b.len()], b).unwrap()));
    }
    out
}

pub fn to_bytes(model: &Detector) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let mut put = |name: &str, t: &Tensor<f32>| {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    };
    for (name, t) in meta_tensors(model) {
        put(&name, &t);
    }
    for (name, p) in model.params() {
        put(&name, &p.tensor);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic or version (expected {})",
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut out = BTreeMap::new();
    while r.pos < bytes.len() {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Detector> {
    let mut tensors = read_tensors(bytes)?;
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    };
    let pool_mode = match take("meta.pool_mode")?.item() {
        v if v == 0.0 => PoolMode::Avg,
        v if v == 1.0 => PoolMode::Max,
        v => return Err(Error::Checkpoint(format!("unknown pooling mode code {v}"))),
    };
    let san = match take("san.scheme.ref_scale") {
        Ok(r) => {
            let bounds = take("san.scheme.boundaries")?.data().iter().map(|&v| v as f64).collect();
            let init = if tensors.contains_key("fusion.alpha") {
                InitMode::IdentityZeroFusion
            } else {
                InitMode::Identity
            };
            Some((ScalePartitionScheme::new(r.item() as usize, bounds)?, init))
        }
        Err(_) => None,
    };
    let num_classes = tensors
        .get("head.cls.b")
        .map(|t| t.len().saturating_sub(1))
        .ok_or_else(|| Error::Checkpoint("missing entry `head.cls.b`".into()))?;
    let mut model = Detector::new(num_classes, san, pool_mode, 0)?;
    for (name, p) in model.params_mut() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != p.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = Parameter::new(t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected entry `{extra}`")));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Detector) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Detector> {
    from_bytes(&fs::read(path)?)
}
