//! Tensor engine, point-convolution backbones, prototype layer, losses and SGD.

pub mod backbone;
pub mod gradcheck;
pub mod kernel;
pub mod optim;
pub mod tape;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backbone::{
    accumulate_grads, bind_params, difference_match, evaluate, forward, init_params, input_matrix, point_conv,
    set_prototypes, BackboneConfig, ForwardOut,
    PairGeometry, ParamVars, Variant,
};
pub use kernel::KernelDisposition;
pub use optim::{lr_at, Sgd};
pub use tape::{Gradients, Influence, Real, Tape, Var};

use crate::binio;
use crate::error::{Error, Result};

const DCNP_MAGIC: &[u8; 4] = b"DCNP";
const DCNP_VERSION: u32 = 1;

/// Name of the prototype matrix inside [`NetParams`].
pub const PROTOTYPES: &str = "proto";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Tensor(format!("shape {shape:?} given {} values", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` with vectors read as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named tensors of a backbone. Frozen names are never updated by an optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub frozen: BTreeSet<String>,
}

impl NetParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Tensor(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Tensor(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Hash of the exact bit pattern of one tensor.
    pub fn checksum(&self, name: &str) -> Result<u64> {
        let t = self.get(name)?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        t.shape.hash(&mut h);
        for v in &t.data {
            v.to_bits().hash(&mut h);
        }
        Ok(h.finish())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DCNP_MAGIC)?;
        binio::write_u32(&mut w, DCNP_VERSION)?;
        binio::write_u32(&mut w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            binio::write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            binio::write_u32(&mut w, t.shape.len() as u32)?;
            for d in &t.shape {
                binio::write_u64(&mut w, *d as u64)?;
            }
            binio::write_f32s(&mut w, &t.data)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads tensors; the frozen set is restored from the manifest, not this file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, DCNP_MAGIC)?;
        let version = binio::read_u32(&mut r)?;
        if version != DCNP_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = binio::read_u32(&mut r)?;
        let mut params = NetParams::default();
        for _ in 0..count {
            let len = binio::read_u32(&mut r)? as usize;
            if len > 4096 {
                return Err(Error::Format(format!("tensor name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|_| Error::Format("truncated file".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = binio::read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(binio::read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let data = binio::read_f32s(&mut r, n)?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(params)
    }
}

/// JSON manifest stored next to `params.dcnp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BackboneConfig,
    pub frozen: Vec<String>,
}

pub const PARAMS_FILE: &str = "params.dcnp";
pub const MANIFEST_FILE: &str = "backbone.json";

/// Writes `params.dcnp` and `backbone.json` into `dir`, creating it.
pub fn save_checkpoint(dir: &Path, config: &BackboneConfig, params: &NetParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    params.save(&dir.join(PARAMS_FILE))?;
    let manifest = Manifest {
        config: config.clone(),
        frozen: params.frozen.iter().cloned().collect(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(BackboneConfig, NetParams)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    manifest.config.validate()?;
    let mut params = NetParams::load(&dir.join(PARAMS_FILE))?;
    params.frozen = manifest.frozen.into_iter().collect();
    Ok((manifest.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(vec![4, 2, 3]).dims2(), (4, 6));
        assert_eq!(Tensor::zeros(vec![5]).dims2(), (1, 5));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackboneConfig::default();
        let params = init_params(&cfg, 3).unwrap();
        save_checkpoint(dir.path(), &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dcnp");
        std::fs::write(&p, b"DCNPxx").unwrap();
        assert!(matches!(NetParams::load(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(NetParams::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut p = NetParams::default();
        p.insert("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = p.checksum("a").unwrap();
        p.get_mut("a").unwrap().data[1] = 2.0000002;
        assert_ne!(c, p.checksum("a").unwrap());
    }
}
