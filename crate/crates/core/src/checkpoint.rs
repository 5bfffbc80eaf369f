//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "HYPADA1\0"
//! u32     format version
//! u32     header length, then that many bytes of JSON (configs, labels)
//! u32     tensor count
//! per tensor: u32 name length, name, u32 rank, u32 dims..., f64 values
//! u8      1 if prototypes follow, else 0
//! if 1:   u32 C, u32 dim, C*dim f64 prototypes, C f64 prior, C u64 counts
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ball::BallConfig;
use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::net::ablation::AblationConfig;
use crate::net::{Model, ModelConfig, ModelParams};
use crate::proto::PrototypeSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPADA1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    ball: BallConfig,
    ablation: AblationConfig,
    model: ModelConfig,
    labels: LabelSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub labels: LabelSpace,
    pub prototypes: Option<PrototypeSet>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidInput(format!("{v} does not fit the container")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            ball: self.model.ball,
            ablation: self.model.ablation,
            model: self.model.config,
            labels: self.labels.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let named = self.model.params.named();
        put_u32(&mut out, named.len())?;
        for (name, t) in named {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.prototypes {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                put_u32(&mut out, p.num_classes())?;
                put_u32(&mut out, p.dim())?;
                for v in p.prototypes.iter().flatten().chain(&p.class_prior) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for n in &p.class_counts {
                    out.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.fail_at(0, "bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail_at(8, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| r.fail_at(at, format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        if count > 64 {
            return Err(r.fail(format!("implausible tensor count {count}")));
        }
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.fail_at(at, "tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.fail(format!("implausible rank {rank} for `{name}`")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product::<usize>();
            let data = r.f64s(len)?;
            let at = r.pos;
            named.push((
                name,
                Tensor::new(shape, data).map_err(|e| r.fail_at(at, e.to_string()))?,
            ));
        }
        let at = r.pos;
        let params = ModelParams::from_named(named).map_err(|e| r.fail_at(at, e.to_string()))?;
        let prototypes = match r.take(1)?[0] {
            0 => None,
            1 => {
                let c = r.u32()? as usize;
                let d = r.u32()? as usize;
                let flat = r.f64s(c * d)?;
                let class_prior = r.f64s(c)?;
                let class_counts = (0..c)
                    .map(|_| {
                        r.take(8)
                            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(PrototypeSet {
                    prototypes: flat.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
                    class_prior,
                    class_counts,
                })
            }
            flag => return Err(r.fail_at(r.pos - 1, format!("bad prototype flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model {
            config: header.model,
            ablation: header.ablation,
            ball: header.ball,
            params,
        };
        check_shapes(&model).map_err(|msg| r.fail_at(at, msg))?;
        Ok(Self {
            model,
            labels: header.labels,
            prototypes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Parameter shapes must agree with the model configuration.
fn check_shapes(model: &Model) -> std::result::Result<(), String> {
    let cfg = &model.config;
    let (d_in, d, db, k, c) = (
        cfg.input_dim,
        cfg.latent_dim,
        cfg.bottleneck_dim,
        cfg.codebook_size,
        cfg.num_classes,
    );
    let p = &model.params;
    let expected: [(&str, &Tensor, Vec<usize>); 9] = [
        ("proj_w", &p.proj_w, vec![d, d_in]),
        ("proj_b", &p.proj_b, vec![d]),
        ("codebook", &p.codebook, vec![k, d]),
        ("bottleneck_w", &p.bottleneck_w, vec![db, d]),
        ("bottleneck_b", &p.bottleneck_b, vec![db]),
        ("log_alpha", &p.log_alpha, vec![1]),
        ("pool_w", &p.pool_w, vec![db]),
        ("cls_w", &p.cls_w, vec![c, db]),
        ("cls_b", &p.cls_b, vec![c]),
    ];
    for (name, t, shape) in expected {
        if t.shape != shape {
            return Err(format!(
                "`{name}` has shape {:?}, configuration implies {shape:?}",
                t.shape
            ));
        }
    }
    if (model.ablation.fusion == crate::net::ablation::Fusion::ConcatMlp) != p.fusion_mlp.is_some()
    {
        return Err("fusion MLP tensors do not match the ablation".into());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg,
        }
    }

    fn fail(&self, msg: String) -> Error {
        self.fail_at(self.pos, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.fail("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ablation::AblationPreset;

    fn model(preset: AblationPreset) -> Model {
        let cfg = ModelConfig {
            input_dim: 5,
            latent_dim: 4,
            bottleneck_dim: 3,
            codebook_size: 6,
            num_classes: 5,
            beta: 0.25,
        };
        Model::new(cfg, preset.config(), BallConfig::default(), 4).unwrap()
    }

    #[test]
    fn roundtrip_with_and_without_prototypes() {
        for preset in [AblationPreset::Full, AblationPreset::ConcatMlp] {
            let mut ck = Checkpoint {
                model: model(preset),
                labels: LabelSpace::default(),
                prototypes: None,
            };
            let bytes = ck.encode().unwrap();
            let back = Checkpoint::decode(&bytes, Path::new("m")).unwrap();
            assert_eq!(back, ck);
            ck.prototypes = Some(PrototypeSet {
                prototypes: vec![vec![0.1, 0.2, 0.0]; 5],
                class_prior: vec![0.2; 5],
                class_counts: vec![3; 5],
            });
            let bytes = ck.encode().unwrap();
            let back = Checkpoint::decode(&bytes, Path::new("m")).unwrap();
            assert_eq!(back.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let ck = Checkpoint {
            model: model(AblationPreset::Full),
            labels: LabelSpace::default(),
            prototypes: None,
        };
        let bytes = ck.encode().unwrap();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3], Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(
            Checkpoint::decode(&bad, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
