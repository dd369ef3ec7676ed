//! Versioned binary checkpoint container. Layout (all integers little
//! endian):
//!
//! ```text
//! magic "CPLABCKP" | version u32 | stage u8 | dtype u8 | trainable bitmask u8
//! | beta count u32 | betas (f64 each)
//! | config json: len u64 + utf-8 bytes
//! | param count u64
//! | per param: name len u32 + bytes, ndim u32, dims (u64 each),
//!   element count u64, raw scalars
//! ```
//!
//! Betas are stored as f64 so a checkpoint re-saved at the same precision
//! round-trips byte-exactly and the schedule survives precision changes.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NoiseSchedule, ParamSet, StageCheckpoint, StageTag, ALL_GROUPS};
use crate::num::Scalar;

const MAGIC: &[u8; 8] = b"CPLABCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint<F: Scalar>(ckpt: &StageCheckpoint<F>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(ckpt.stage_tag.code());
    buf.push(F::DTYPE as u8);
    let mut mask = 0u8;
    for (i, g) in ALL_GROUPS.iter().enumerate() {
        if ckpt.trainable.get(g).copied().unwrap_or(false) {
            mask |= 1 << i;
        }
    }
    buf.push(mask);
    let betas = ckpt.schedule.betas();
    buf.extend_from_slice(&(betas.len() as u32).to_le_bytes());
    for b in betas {
        buf.extend_from_slice(&b.to_f64_s().to_le_bytes());
    }
    let cfg = serde_json::to_vec(&ckpt.config)?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(ckpt.params.entries.len() as u64).to_le_bytes());
    for (name, value) in &ckpt.params.entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(value.len() as u64).to_le_bytes());
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::Path(path.to_path_buf(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::Path(path.to_path_buf(), e))?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<StageCheckpoint<F>> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::Path(path.to_path_buf(), e))?;
    let mut c = Cursor {
        data: &data,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let stage_tag = StageTag::from_code(c.u8()?)
        .ok_or_else(|| Error::Checkpoint("unknown stage tag".into()))?;
    let dtype = c.u8()?;
    if dtype != F::DTYPE as u8 {
        return Err(Error::Checkpoint(format!(
            "dtype code {dtype} does not match requested precision"
        )));
    }
    let mask = c.u8()?;
    let trainable = ALL_GROUPS
        .iter()
        .enumerate()
        .map(|(i, g)| (*g, mask & (1 << i) != 0))
        .collect();
    let t_count = c.u32()? as usize;
    let mut betas = Vec::with_capacity(t_count);
    for _ in 0..t_count {
        let raw = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
        betas.push(crate::num::s::<F>(raw));
    }
    let schedule = NoiseSchedule::from_betas(betas)?;
    let cfg_len = c.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(cfg_len)?)?;
    let n_params = c.u64()? as usize;
    let mut params = ParamSet::new();
    let elem = std::mem::size_of::<F>();
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let count = c.u64()? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "element count mismatch for '{name}'"
            )));
        }
        let raw = c.take(count * elem)?;
        let values: Vec<F> = raw.chunks_exact(elem).map(F::from_le_slice).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::Checkpoint(format!("bad shape for '{name}': {e}")))?;
        params.entries.insert(name, arr);
    }
    if c.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(StageCheckpoint {
        params,
        stage_tag,
        trainable,
        schedule,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_checkpoint, ModelConfig};
    use crate::Canvas;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            canvas: Canvas::new(16, 16),
            widths: vec![4, 8],
            temb_dim: 8,
            token_dim: 16,
            encoder_input: 16,
            encoder_widths: vec![4, 8],
            norm_groups: 2,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_checkpoint::<f32>(&tiny_config(), 11).unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_checkpoint::<f32>(&tiny_config(), 11).unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut bad = good.clone();
        bad[8] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn rejects_precision_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_checkpoint::<f32>(&tiny_config(), 11).unwrap();
        let path = dir.path().join("d.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
