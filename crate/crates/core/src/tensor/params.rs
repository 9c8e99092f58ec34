use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Snapshot file format version.
pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GTPS";

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// All trainable weights, addressed by dotted path (`node_lstm.w_ih`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

/// Parameters bound as leaves on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::State(format!("missing parameter {path}")))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.insert(path.into(), Param { value, grad });
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Parameters in path order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
                .collect(),
        }
    }

    /// Adds the gradients the tape holds for `bound` onto the stored gradients.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bound<'_>) {
        for (path, var) in &bound.vars {
            if let (Some(g), Some(p)) = (tape.grad(*var), self.params.get_mut(path)) {
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// L2 norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.params.values().map(|p| p.grad.l2_norm_sq()).sum::<f64>().sqrt()
    }

    /// Writes the flat binary snapshot: magic, version, count, then per tensor
    /// the path, the shape and the raw little-endian float64 data.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (path, p) in &self.params {
            let bytes = path.as_bytes();
            out.write_all(&(bytes.len() as u32).to_le_bytes())?;
            out.write_all(bytes)?;
            let shape = p.value.shape();
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec");
        buf
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        let bad = |m: &str| Error::Data(format!("snapshot: {m}"));
        if &take::<4>(&mut input)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut input)?);
        if version != SNAPSHOT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(take(&mut input)?);
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut input)?) as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let path = String::from_utf8(name).map_err(|_| bad("path is not utf-8"))?;
            let rank = u32::from_le_bytes(take(&mut input)?) as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(take(&mut input)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| Ok(f64::from_le_bytes(take(&mut input)?)))
                .collect::<Result<Vec<_>>>()?;
            store.insert(path, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}
