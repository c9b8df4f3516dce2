//! Binary checkpoint files: "FAAE" magic, format version, the canonical
//! config text, every network's parameters and batchnorm running statistics,
//! the three Adam states, the run stream state, and a trailing CRC-32.
//!
//! Tensors are stored as a 32-bit dimension count, the dimensions, then raw
//! 32-bit floats, all little-endian row-major. The layout is byte-stable:
//! save -> load -> save reproduces the file exactly.

use crate::config::{config_to_text, parse_config};
use crate::error::{Error, Result};
use crate::layers::RunningStats;
use crate::models::Network;
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::trainer::{build_networks, TrainConfig, Trainer};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FAAE";
pub const FORMAT_VERSION: u16 = 1;

/// CRC-32 (reflected polynomial 0xEDB88320, i.e. 0x04C11DB7 bit-reversed).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u16,
    pub cfg: TrainConfig,
    pub g: Network<f32>,
    pub e: Network<f32>,
    pub d: Network<f32>,
    pub st_g: AdamState<f32>,
    pub st_e: AdamState<f32>,
    pub st_d: AdamState<f32>,
    pub rng: Rng,
    pub step: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn floats(&mut self, data: &[f32]) {
        self.u32(data.len() as u32);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn network(&mut self, net: &Network<f32>) {
        self.bytes(net.name.as_bytes());
        let mut param_count = 0u32;
        for l in &net.layers {
            param_count += l.params.len() as u32;
        }
        self.u32(param_count);
        for l in &net.layers {
            for (name, t) in &l.params {
                self.bytes(name.as_bytes());
                self.u32(t.shape.len() as u32);
                for &d in &t.shape {
                    self.u32(d as u32);
                }
                self.floats(&t.data);
            }
        }
        let stat_layers: Vec<(usize, &RunningStats<f32>)> = net
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.stats.as_ref().map(|s| (i, s)))
            .collect();
        self.u32(stat_layers.len() as u32);
        for (i, s) in stat_layers {
            self.u32(i as u32);
            self.floats(&s.mean);
            self.floats(&s.var);
        }
    }
    fn adam(&mut self, st: &AdamState<f32>) {
        self.u64(st.t);
        self.u32(st.m.len() as u32);
        for m in &st.m {
            self.floats(m);
        }
        for v in &st.v {
            self.floats(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in string field".into()))
    }
    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    /// Overwrites a freshly built network's parameters and stats in place,
    /// checking names and shapes against the file.
    fn network_into(&mut self, net: &mut Network<f32>) -> Result<()> {
        let name = self.string()?;
        if name != net.name {
            return Err(Error::Checkpoint(format!(
                "network name: file has `{name}`, build expects `{}`",
                net.name
            )));
        }
        let param_count = self.u32()? as usize;
        let mut seen = 0usize;
        for l in net.layers.iter_mut() {
            for (pname, t) in l.params.iter_mut() {
                if seen == param_count {
                    return Err(Error::Checkpoint(format!(
                        "network {name}: file has {param_count} parameters, build expects more"
                    )));
                }
                let fname = self.string()?;
                if &fname != pname {
                    return Err(Error::Checkpoint(format!(
                        "parameter name: file has `{fname}`, build expects `{pname}`"
                    )));
                }
                let ndims = self.u32()? as usize;
                let mut shape = Vec::with_capacity(ndims);
                for _ in 0..ndims {
                    shape.push(self.u32()? as usize);
                }
                if shape != t.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {fname}: file shape {shape:?}, build expects {:?}",
                        t.shape
                    )));
                }
                let data = self.floats()?;
                if data.len() != t.data.len() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {fname}: element count mismatch"
                    )));
                }
                t.data = data;
                seen += 1;
            }
        }
        if seen != param_count {
            return Err(Error::Checkpoint(format!(
                "network {name}: file has {param_count} parameters, build expects {seen}"
            )));
        }
        let stat_count = self.u32()? as usize;
        for _ in 0..stat_count {
            let li = self.u32()? as usize;
            let mean = self.floats()?;
            let var = self.floats()?;
            let stats = net
                .layers
                .get_mut(li)
                .and_then(|l| l.stats.as_mut())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("network {name}: layer {li} has no running stats"))
                })?;
            if mean.len() != stats.mean.len() || var.len() != stats.var.len() {
                return Err(Error::Checkpoint(format!(
                    "network {name}: running stats length mismatch at layer {li}"
                )));
            }
            stats.mean = mean;
            stats.var = var;
        }
        Ok(())
    }
    fn adam_into(&mut self, st: &mut AdamState<f32>) -> Result<()> {
        st.t = self.u64()?;
        let count = self.u32()? as usize;
        if count != st.m.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state: file has {count} accumulators, build expects {}",
                st.m.len()
            )));
        }
        for m in st.m.iter_mut() {
            let data = self.floats()?;
            if data.len() != m.len() {
                return Err(Error::Checkpoint("optimizer accumulator length mismatch".into()));
            }
            *m = data;
        }
        for v in st.v.iter_mut() {
            let data = self.floats()?;
            if data.len() != v.len() {
                return Err(Error::Checkpoint("optimizer accumulator length mismatch".into()));
            }
            *v = data;
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            cfg: t.cfg.clone(),
            g: t.g.clone(),
            e: t.e.clone(),
            d: t.d.clone(),
            st_g: t.st_g.clone(),
            st_e: t.st_e.clone(),
            st_d: t.st_d.clone(),
            rng: t.rng.clone(),
            step: t.step,
        }
    }

    /// Rebuilds a live trainer (including its dataset) from this checkpoint.
    pub fn resume(self) -> Result<Trainer> {
        let dataset = self.cfg.build_dataset()?;
        let alpha = self.cfg.alpha_at(0);
        Ok(Trainer {
            cfg: self.cfg,
            dataset,
            g: self.g,
            e: self.e,
            d: self.d,
            st_g: self.st_g,
            st_e: self.st_e,
            st_d: self.st_d,
            rng: self.rng,
            step: self.step,
            alpha,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u16(self.version);
        w.bytes(config_to_text(&self.cfg).as_bytes());
        w.u64(self.step);
        for s in self.rng.state() {
            w.u64(s);
        }
        w.u32(self.g.output_shape.len() as u32);
        for &d in &self.g.output_shape {
            w.u32(d as u32);
        }
        for net in [&self.g, &self.e, &self.d] {
            w.network(net);
        }
        for st in [&self.st_g, &self.st_e, &self.st_d] {
            w.adam(st);
        }
        let crc = crc32(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 10 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.u16()?;
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is newer than supported {FORMAT_VERSION}"
            )));
        }
        let cfg_text = r.string()?;
        let cfg = parse_config(&cfg_text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let step = r.u64()?;
        let mut state = [0u64; 4];
        for s in state.iter_mut() {
            *s = r.u64()?;
        }
        let rng = Rng::from_state(state);
        // the architecture is rebuilt from the config plus the stored data
        // shape; the file then only has to carry parameter values
        let ndims = r.u32()? as usize;
        let mut data_shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            data_shape.push(r.u32()? as usize);
        }
        let (mut g, mut e, mut d) = build_networks(&cfg, &data_shape)?;
        r.network_into(&mut g)?;
        r.network_into(&mut e)?;
        r.network_into(&mut d)?;
        let mut st_g = AdamState::for_params(&g.param_tensors());
        let mut st_e = AdamState::for_params(&e.param_tensors());
        let mut st_d = AdamState::for_params(&d.param_tensors());
        r.adam_into(&mut st_g)?;
        r.adam_into(&mut st_e)?;
        r.adam_into(&mut st_d)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer states".into()));
        }
        Ok(Checkpoint { version, cfg, g, e, d, st_g, st_e, st_d, rng, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::DatasetSpec;

    fn small_trainer() -> Trainer {
        let cfg = TrainConfig {
            epochs: 1,
            dataset: DatasetSpec { count: 64, ..DatasetSpec::default() },
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg).unwrap();
        t.run().unwrap();
        t
    }

    #[test]
    fn crc_reference_values() {
        // standard check value for this polynomial
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let t = small_trainer();
        let ck = Checkpoint::from_trainer(&t);
        let bytes = ck.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.step, t.step);
        assert_eq!(loaded.rng.state(), t.rng.state());
        assert_eq!(loaded.g.param_snapshot(), t.g.param_snapshot());
        assert_eq!(loaded.st_g.t, t.st_g.t);
        assert_eq!(loaded.st_g.m, t.st_g.m);
    }

    #[test]
    fn corruption_is_detected() {
        let t = small_trainer();
        let mut bytes = Checkpoint::from_trainer(&t).to_bytes();
        // flip one payload byte
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        // truncation
        let t2 = Checkpoint::from_trainer(&t).to_bytes();
        assert!(Checkpoint::from_bytes(&t2[..t2.len() - 5]).is_err());
    }

    #[test]
    fn bad_magic_and_future_version_rejected() {
        let t = small_trainer();
        let mut bytes = Checkpoint::from_trainer(&t).to_bytes();
        bytes[0] = b'X';
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bytes = Checkpoint::from_trainer(&t).to_bytes();
        bytes[4..6].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn resume_continues_deterministically() {
        // run 2 epochs straight vs 1 epoch, checkpoint, resume 1 epoch
        let cfg = TrainConfig {
            epochs: 2,
            dataset: DatasetSpec { count: 64, ..DatasetSpec::default() },
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        straight.run().unwrap();

        let mut first = Trainer::new(TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        first.run().unwrap();
        let bytes = Checkpoint::from_trainer(&first).to_bytes();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().resume().unwrap();
        resumed.cfg.epochs = 1;
        resumed.run().unwrap();
        assert_eq!(resumed.g.param_snapshot(), straight.g.param_snapshot());
        assert_eq!(resumed.d.param_snapshot(), straight.d.param_snapshot());
    }
}
