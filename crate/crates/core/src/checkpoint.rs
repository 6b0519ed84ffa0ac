//! Binary model checkpoints.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic       8 bytes  "SFIQACKP"
//! version     u32      1
//! arch        u32 in_channels, u32 n_blocks, n_blocks x u32, u32 hidden, u32 levels
//! scale       f64 lower, f64 upper           (level count = levels)
//! shared      per conv/linear layer in order: weight then bias, each u64 len + len x f32
//! branches    u32 count, then per branch:
//!               u32 name_len, name (UTF-8), f32 epsilon, f32 ema_alpha,
//!               per norm layer: u8 initialized, gamma, beta, running_mean, running_var
//!               (each channels x f32)
//! optimizer   u8 present; if 1:
//!               f64 lr, f64 beta1, f64 beta2, f64 epsilon, u64 step, u32 entries,
//!               per entry: param id, u64 len, len x f64 m, len x f64 v
//!             param id = u8 kind (0 weight, 1 bias, 2 gamma, 3 beta), u32 index,
//!               and for gamma/beta u32 name_len + name
//! checksum    u64      FNV-1a over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::distmath::RatingScale;
use crate::error::{Error, Result};
use crate::nn::{Architecture, BnState, DomainBranch, DomainId, Network, ParamId};
use crate::optim::{AdamConfig, AdamState, Moments};

const MAGIC: &[u8; 8] = b"SFIQACKP";
const VERSION: u32 = 1;

/// A trained network with its rating scale and, optionally, optimiser state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub scale: RatingScale,
    pub optimizer: Option<AdamState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, xs: &[f32]) {
        for x in xs {
            self.f32(*x);
        }
    }
    fn param_id(&mut self, id: &ParamId) {
        match id {
            ParamId::Weight(i) => {
                self.u8(0);
                self.u32(*i);
            }
            ParamId::Bias(i) => {
                self.u8(1);
                self.u32(*i);
            }
            ParamId::Gamma(d, s) => {
                self.u8(2);
                self.u32(*s);
                self.name(d.as_str());
            }
            ParamId::Beta(d, s) => {
                self.u8(3);
                self.u32(*s);
                self.name(d.as_str());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("domain name is not UTF-8".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn param_id(&mut self) -> Result<ParamId> {
        let kind = self.u8()?;
        let idx = self.u32()?;
        Ok(match kind {
            0 => ParamId::Weight(idx),
            1 => ParamId::Bias(idx),
            2 => ParamId::Gamma(DomainId::new(self.name()?), idx),
            3 => ParamId::Beta(DomainId::new(self.name()?), idx),
            k => return Err(Error::Checkpoint(format!("unknown parameter kind {k}"))),
        })
    }
}

impl Checkpoint {
    pub fn new(network: Network<f32>, scale: RatingScale) -> Result<Self> {
        if scale.count() != network.architecture().levels {
            return Err(Error::Checkpoint(format!(
                "scale has {} levels, network {}",
                scale.count(),
                network.architecture().levels
            )));
        }
        Ok(Self {
            network,
            scale,
            optimizer: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        let arch = self.network.architecture();
        w.u32(arch.in_channels);
        w.u32(arch.blocks.len());
        for b in &arch.blocks {
            w.u32(*b);
        }
        w.u32(arch.hidden);
        w.u32(arch.levels);
        w.f64(self.scale.lower());
        w.f64(self.scale.upper());
        for id in self
            .network
            .param_ids()
            .iter()
            .filter(|id| id.domain().is_none())
        {
            let p = self.network.param(id).expect("listed id resolves");
            w.u64(p.len() as u64);
            w.f32s(p);
        }
        let domains: Vec<&DomainId> = self.network.domains().collect();
        w.u32(domains.len());
        for d in domains {
            let br = self.network.branch(d).expect("listed domain");
            w.name(d.as_str());
            w.f32(br.epsilon);
            w.f32(br.ema_alpha);
            for l in &br.layers {
                w.u8(l.initialized as u8);
                w.f32s(&l.gamma);
                w.f32s(&l.beta);
                w.f32s(&l.running_mean);
                w.f32s(&l.running_var);
            }
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(st) => {
                w.u8(1);
                w.f64(st.config.lr);
                w.f64(st.config.beta1);
                w.f64(st.config.beta2);
                w.f64(st.config.epsilon);
                w.u64(st.step);
                w.u32(st.moments.len());
                for (id, m) in &st.moments {
                    w.param_id(id);
                    w.u64(m.m.len() as u64);
                    for v in m.m.iter().chain(&m.v) {
                        w.f64(*v);
                    }
                }
            }
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let in_channels = r.u32()?;
        let nb = r.u32()?;
        if nb > 64 {
            return Err(Error::Checkpoint(format!("implausible block count {nb}")));
        }
        let blocks = (0..nb).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            in_channels,
            blocks,
            hidden: r.u32()?,
            levels: r.u32()?,
        };
        arch.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let scale = RatingScale::new(r.f64()?, r.f64()?, arch.levels)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let placeholder = DomainId::new("");
        let mut net = Network::<f32>::new(arch.clone(), placeholder.clone(), 0)?;
        for id in net
            .param_ids()
            .into_iter()
            .filter(|id| id.domain().is_none())
        {
            let n = r.len()?;
            let values = r.f32s(n)?;
            let slot = net.param_mut(&id).expect("listed id resolves");
            if slot.len() != n {
                return Err(Error::Checkpoint(format!(
                    "{id:?} has {n} values, expected {}",
                    slot.len()
                )));
            }
            slot.copy_from_slice(&values);
        }
        let nbranches = r.u32()?;
        if nbranches == 0 {
            return Err(Error::Checkpoint("checkpoint has no domain branch".into()));
        }
        let mut branches = BTreeMap::new();
        for _ in 0..nbranches {
            let name = DomainId::new(r.name()?);
            let epsilon = r.f32()?;
            let ema_alpha = r.f32()?;
            let mut layers = Vec::with_capacity(arch.blocks.len());
            for &c in &arch.blocks {
                let initialized = r.u8()? != 0;
                layers.push(BnState {
                    gamma: r.f32s(c)?,
                    beta: r.f32s(c)?,
                    running_mean: r.f32s(c)?,
                    running_var: r.f32s(c)?,
                    initialized,
                });
            }
            if branches
                .insert(
                    name.clone(),
                    DomainBranch {
                        epsilon,
                        ema_alpha,
                        layers,
                    },
                )
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate branch `{name}`")));
            }
        }
        let first = branches.keys().next().expect("non-empty").clone();
        let mut network = Network::from_parts(
            arch,
            net.layers().to_vec(),
            BTreeMap::from([(first.clone(), branches[&first].clone())]),
        )?;
        for (d, br) in branches {
            if d != first {
                network.add_domain_branch(d.clone(), &first)?;
                network.set_branch(&d, br)?;
            }
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let step = r.u64()?;
                let n = r.u32()?;
                let mut moments = BTreeMap::new();
                for _ in 0..n {
                    let id = r.param_id()?;
                    let len = r.len()?;
                    if network.param(&id).map(<[f32]>::len) != Some(len) {
                        return Err(Error::Checkpoint(format!(
                            "optimizer entry {id:?} does not match the network"
                        )));
                    }
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    moments.insert(id, Moments { m, v });
                }
                Some(AdamState {
                    config,
                    step,
                    moments,
                })
            }
            k => return Err(Error::Checkpoint(format!("bad optimizer flag {k}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            network,
            scale,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mask, Phase};

    fn sample() -> Checkpoint {
        let src = DomainId::new("source");
        let mut net = Network::<f32>::new(Architecture::default(), src.clone(), 5).unwrap();
        net.add_domain_branch("tgt".into(), &src).unwrap();
        net.branch_mut(&"tgt".into()).unwrap().layers[1].gamma[3] = 0.25;
        net.reset_branch_statistics(&src).unwrap();
        let mask: Mask = net.freeze_mask(Phase::Adapt, &"tgt".into()).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(5e-5), &mask, &net).unwrap();
        st.step = 17;
        st.moments.values_mut().next().unwrap().m[0] = 0.125;
        let mut ck = Checkpoint::new(net, RatingScale::default()).unwrap();
        ck.optimizer = Some(st);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.network.fingerprint(&[]), ck.network.fingerprint(&[]));
        assert_eq!(back.network.layers(), ck.network.layers());
        for d in ck.network.domains() {
            assert_eq!(back.network.branch(d), ck.network.branch(d));
        }
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.scale, ck.scale);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..40]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"not a checkpoint at all"),
            Err(Error::Checkpoint(_))
        ));
    }
}
