//! Binary checkpoint: `TEDK`, u32 version, a tensor table of little-endian
//! f32 data and a string metadata table. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mixer::{FusionLocation, MixerConfig, MixerKind, MixerModel};
use crate::params::ParameterSet;
use crate::predictor::{BasePredictorModel, PredictorArch};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TEDK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParameterSet<f32>,
    pub metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not utf-8")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in self.tensors.iter() {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.metadata.len())?;
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a TEDK checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.tensors.insert(name, Tensor::new(shape, data)?)?;
        }
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            if ck.metadata.insert(k.clone(), v).is_some() {
                return Err(Error::Checkpoint(format!("duplicate metadata key {k}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata {key} = {v:?}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.meta("kind")? {
            k if k == kind => Ok(()),
            k => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {k}"))),
        }
    }
}

/// Copies checkpoint tensors into freshly built parameters, requiring the
/// same names and shapes.
fn restore<T: Real>(target: &mut ParameterSet<T>, ck: &Checkpoint) -> Result<()> {
    if target.len() != ck.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            target.len(),
            ck.tensors.len()
        )));
    }
    for (name, t) in target.iter_mut() {
        let src = ck
            .tensors
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} vs expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.cast();
    }
    Ok(())
}

impl<T: Real> BasePredictorModel<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let metadata = BTreeMap::from([
            ("kind".to_string(), "predictor".to_string()),
            ("arch".to_string(), self.arch.to_string()),
            ("feature_channels".to_string(), self.feature_channels.to_string()),
            ("kappa".to_string(), self.kappa.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ]);
        Checkpoint {
            tensors: self.params.cast(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("predictor")?;
        let arch: PredictorArch = ck
            .meta("arch")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("arch: {e}")))?;
        let mut model = Self::build(
            arch,
            ck.meta_parse("feature_channels")?,
            ck.meta_parse("kappa")?,
            ck.meta_parse("seed")?,
        )?;
        restore(&mut model.params, ck)?;
        Ok(model)
    }
}

impl<T: Real> MixerModel<T> {
    pub fn config(&self) -> MixerConfig {
        MixerConfig {
            kind: self.kind,
            location: self.location,
            kappa: self.kappa,
            average_uniform: self.average_uniform,
            order: self.order.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let order = match &self.order {
            Some(o) => o.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            None => String::new(),
        };
        let metadata = BTreeMap::from([
            ("kind".to_string(), "mixer".to_string()),
            ("mixer".to_string(), self.kind.code().to_string()),
            ("location".to_string(), self.location.code().to_string()),
            ("kappa".to_string(), self.kappa.to_string()),
            ("average_uniform".to_string(), self.average_uniform.to_string()),
            ("order".to_string(), order),
            ("predictors".to_string(), self.predictors.to_string()),
            ("feature_channels".to_string(), self.feature_channels.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ]);
        Checkpoint {
            tensors: self.params.cast(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("mixer")?;
        let kind: MixerKind = ck
            .meta("mixer")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("mixer: {e}")))?;
        let location: FusionLocation = ck
            .meta("location")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("location: {e}")))?;
        let order = match ck.meta("order")? {
            "" => None,
            s => Some(
                s.split(',')
                    .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad order {s:?}"))))
                    .collect::<Result<Vec<usize>>>()?,
            ),
        };
        let cfg = MixerConfig {
            kind,
            location,
            kappa: ck.meta_parse("kappa")?,
            average_uniform: ck.meta_parse("average_uniform")?,
            order,
        };
        let mut model = Self::build(
            &cfg,
            ck.meta_parse("predictors")?,
            ck.meta_parse("feature_channels")?,
            ck.meta_parse("seed")?,
        )?;
        restore(&mut model.params, ck)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn predictor() -> BasePredictorModel<f32> {
        BasePredictorModel::build(PredictorArch::preset("local").unwrap(), 4, 10.0, 7).unwrap()
    }

    #[test]
    fn predictor_roundtrip_is_byte_stable() {
        let m = predictor();
        let bytes = m.to_checkpoint().encode().unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.meta("kappa").unwrap(), "10");
        let back = BasePredictorModel::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint().encode().unwrap(), bytes);
    }

    #[test]
    fn mixer_roundtrip() {
        let mut cfg = MixerConfig::new(MixerKind::Ranked, FusionLocation::Penultimate, 80.0);
        cfg.order = Some(vec![2, 0, 1]);
        let m = MixerModel::<f32>::build(&cfg, 3, 4, 1).unwrap();
        let back = MixerModel::<f32>::from_checkpoint(
            &Checkpoint::decode(&m.to_checkpoint().encode().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
        assert_eq!(back.kappa, 80.0);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = predictor().to_checkpoint().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("version"));
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn wrong_kind_rejected() {
        let ck = predictor().to_checkpoint();
        assert!(MixerModel::<f32>::from_checkpoint(&ck).is_err());
    }
}
