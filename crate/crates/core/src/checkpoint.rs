//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"MVD1"
//! u32 array count
//! per array: u32 name length, name (UTF-8), u32 ndim, u64 dims..., f64 values...
//! ```

use std::path::Path;

use crate::engine::{ServerState, VdState};
use crate::error::{Error, Result};
use crate::hypernet::HypernetState;
use crate::kernel::{Activation, DenseLayer, MlpSpec, ModelParams, Tensor};
use crate::metavd::DropoutVector;

pub const MAGIC: &[u8; 4] = b"MVD1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    fn scalar(name: &str, v: f64) -> Self {
        Self::new(name, vec![1], vec![v])
    }

    fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::new(name, t.shape().to_vec(), t.data().to_vec())
    }
}

pub fn encode(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail("dimension overflows usize"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.fail(format!("unknown magic {magic:?}, expected \"MVD1\"")));
    }
    let count = r.u32()?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("array name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| r.fail(format!("array {name} is larger than the file")))?;
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(arrays)
}

fn params_arrays(prefix: &str, p: &ModelParams, out: &mut Vec<NamedArray>) {
    for (i, l) in p.layers.iter().enumerate() {
        out.push(NamedArray::tensor(format!("{prefix}/{i}/weight"), &l.weight));
        out.push(NamedArray::tensor(format!("{prefix}/{i}/bias"), &l.bias));
    }
}

fn activation_code(a: Activation) -> [f64; 2] {
    match a {
        Activation::LeakyRelu { slope } => [0.0, slope],
        Activation::Relu => [1.0, 0.0],
        Activation::Identity => [2.0, 0.0],
    }
}

fn vd_code(vd: &VdState) -> f64 {
    match vd {
        VdState::Off => 0.0,
        VdState::MetaVd(_) => 1.0,
        VdState::Global(_) => 2.0,
        VdState::Ensemble(_) => 3.0,
    }
}

pub fn state_to_arrays(state: &ServerState) -> Vec<NamedArray> {
    let spec = &state.spec;
    let mut out = vec![
        NamedArray::scalar("meta/round", state.round as f64),
        // Split so that both halves are exact in an f64.
        NamedArray::new(
            "meta/seed",
            vec![2],
            vec![(state.rng_seed >> 32) as f64, (state.rng_seed & 0xffff_ffff) as f64],
        ),
        NamedArray::new(
            "meta/layer_sizes",
            vec![spec.layer_sizes.len()],
            spec.layer_sizes.iter().map(|&s| s as f64).collect(),
        ),
        NamedArray::new("meta/activation", vec![2], activation_code(spec.activation).to_vec()),
        NamedArray::scalar("meta/metavd_layer", spec.metavd_layer.map_or(-1.0, |l| l as f64)),
        NamedArray::scalar("meta/vd_mode", vd_code(&state.vd)),
    ];
    params_arrays("theta", &state.theta, &mut out);
    match &state.vd {
        VdState::Off => {}
        VdState::MetaVd(h) => {
            params_arrays("hyper", &h.psi, &mut out);
            out.push(NamedArray::tensor("hyper/embeddings", &h.embeddings));
            let ts = h.target_shape();
            out.push(NamedArray::new(
                "hyper/target_shape",
                vec![ts.len()],
                ts.iter().map(|&d| d as f64).collect(),
            ));
        }
        VdState::Global(dv) => out.push(NamedArray::tensor("vd/global", dv.log_alpha())),
        VdState::Ensemble(table) => {
            let k = table.first().map_or(0, DropoutVector::len);
            let mut shape = vec![table.len()];
            shape.extend(table.first().map_or(&[][..], |d| d.log_alpha().shape()));
            let data: Vec<f64> = table.iter().flat_map(|d| d.log_alpha().data().to_vec()).collect();
            debug_assert_eq!(data.len(), table.len() * k);
            out.push(NamedArray::new("vd/ensemble", shape, data));
        }
    }
    out
}

struct Lookup<'a> {
    arrays: &'a [NamedArray],
    path: &'a Path,
}

impl<'a> Lookup<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn get(&self, name: &str) -> Result<&'a NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| self.fail(format!("missing array {name}")))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let a = self.get(name)?;
        Tensor::new(a.shape.clone(), a.data.clone()).map_err(|e| self.fail(format!("{name}: {e}")))
    }

    fn integers(&self, name: &str) -> Result<Vec<usize>> {
        self.get(name)?
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                    Ok(v as usize)
                } else {
                    Err(self.fail(format!("{name} holds a non-integer {v}")))
                }
            })
            .collect()
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let a = self.get(name)?;
        match a.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(self.fail(format!("{name} should hold one value"))),
        }
    }

    fn params(&self, prefix: &str, layers: usize) -> Result<ModelParams> {
        (0..layers)
            .map(|i| {
                Ok(DenseLayer {
                    weight: self.tensor(&format!("{prefix}/{i}/weight"))?,
                    bias: self.tensor(&format!("{prefix}/{i}/bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(|layers| ModelParams { layers })
    }
}

pub fn state_from_arrays(arrays: &[NamedArray], path: &Path) -> Result<ServerState> {
    let l = Lookup { arrays, path };
    let round = l.integers("meta/round")?[0] as u64;
    let seed = match l.integers("meta/seed")?.as_slice() {
        [hi, lo] if *hi <= u32::MAX as usize && *lo <= u32::MAX as usize => ((*hi as u64) << 32) | *lo as u64,
        _ => return Err(l.fail("meta/seed should hold two 32-bit halves")),
    };
    let act = l.get("meta/activation")?;
    let activation = match act.data.as_slice() {
        [k, slope] if *k == 0.0 => Activation::LeakyRelu { slope: *slope },
        [k, _] if *k == 1.0 => Activation::Relu,
        [k, _] if *k == 2.0 => Activation::Identity,
        _ => return Err(l.fail("unknown activation code")),
    };
    let vd_layer = l.scalar("meta/metavd_layer")?;
    let vd_layer = if vd_layer < 0.0 { None } else { Some(vd_layer as usize) };
    let spec = MlpSpec::new(l.integers("meta/layer_sizes")?, activation, vd_layer)
        .map_err(|e| l.fail(e.to_string()))?;
    let theta = l.params("theta", spec.num_layers())?;
    theta.check_spec(&spec).map_err(|e| l.fail(e.to_string()))?;
    let vd = match l.scalar("meta/vd_mode")? {
        m if m == 0.0 => VdState::Off,
        m if m == 1.0 => VdState::MetaVd(
            HypernetState::from_parts(
                l.params("hyper", 3)?,
                l.tensor("hyper/embeddings")?,
                l.integers("hyper/target_shape")?,
            )
            .map_err(|e| l.fail(e.to_string()))?,
        ),
        m if m == 2.0 => VdState::Global(DropoutVector::new(l.tensor("vd/global")?)?),
        m if m == 3.0 => {
            let t = l.tensor("vd/ensemble")?;
            let inner = t.shape()[1..].to_vec();
            if inner.is_empty() {
                return Err(l.fail("vd/ensemble needs a client axis and a weight shape"));
            }
            let k: usize = inner.iter().product();
            VdState::Ensemble(
                t.data()
                    .chunks(k)
                    .map(|c| DropoutVector::new(Tensor::new(inner.clone(), c.to_vec())?))
                    .collect::<Result<_>>()?,
            )
        }
        m => return Err(l.fail(format!("unknown dropout mode code {m}"))),
    };
    Ok(ServerState {
        spec,
        theta,
        vd,
        round,
        rng_seed: seed,
    })
}

pub fn save(path: &Path, state: &ServerState) -> Result<()> {
    std::fs::write(path, encode(&state_to_arrays(state))).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ServerState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_arrays(&decode(&bytes, path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::VdMode;

    fn state(mode: VdMode) -> ServerState {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::default(), Some(0)).unwrap();
        let mut s = ServerState::init(spec, mode, 5, u64::MAX - 12345).unwrap();
        s.round = 17;
        s
    }

    #[test]
    fn roundtrip_every_mode() {
        for mode in [VdMode::Off, VdMode::MetaVd, VdMode::GlobalVd, VdMode::EnsembleVd] {
            let mut s = state(mode);
            if mode == VdMode::Off {
                s.spec.metavd_layer = None;
            }
            let bytes = encode(&state_to_arrays(&s));
            let back = state_from_arrays(&decode(&bytes, Path::new("x")).unwrap(), Path::new("x")).unwrap();
            assert_eq!(back, s);
            assert_eq!(encode(&state_to_arrays(&back)), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[NamedArray::new("ab", vec![2], vec![1.0, -0.5])]);
        let mut want = b"MVD1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1u32.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_files() {
        let p = Path::new("x");
        let good = encode(&state_to_arrays(&state(VdMode::MetaVd)));
        let mut bad_magic = good.clone();
        bad_magic[3] = b'2';
        let err = decode(&bad_magic, p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        assert!(decode(&good[..good.len() - 3], p).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing, p).is_err());
        assert!(decode(b"", p).is_err());
        let missing = encode(&[NamedArray::scalar("meta/round", 1.0)]);
        assert!(state_from_arrays(&decode(&missing, p).unwrap(), p).is_err());
    }
}
