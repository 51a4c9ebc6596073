//! Named parameter tensors, initialization and the binary checkpoint.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Matrix, Scalar};
use super::NetConfig;
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOFO";
pub const CHECKPOINT_VERSION: u32 = 1;

const POS_STD: f64 = 0.02;

/// All learnable tensors of the network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyNetParams<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for TinyNetParams<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> TinyNetParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> TinyNetParams<U> {
        TinyNetParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor with the same-named one from `other`; both
    /// sets must hold the same names and shapes.
    pub fn assign_from(&mut self, other: &Self) -> Result<()> {
        if other.len() != self.len() {
            return Err(invalid(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other.get(name).ok_or_else(|| invalid(format!("missing tensor {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            self.tensors[i] = other.get(name).cloned().expect("checked");
        }
        Ok(())
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind<'a>(&'a self, tape: &Tape<T>) -> Bound<'a, T> {
        let vars = self.tensors.iter().map(|m| tape.leaf(m.clone())).collect();
        Bound { params: self, vars }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'a, T> {
    params: &'a TinyNetParams<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Var {
        let i = self.params.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.position(name).is_some()
    }

    /// Gradient of every parameter, zeros where the output does not depend
    /// on it.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Matrix<T>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    }
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a) as f32).collect();
    Matrix::from_vec(fan_in, fan_out, data)
}

fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng) as f32).collect())
}

fn push_linear(p: &mut TinyNetParams<f32>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), xavier(rng, fan_in, fan_out)).expect("unique");
    p.insert(format!("{name}.b"), Matrix::zeros(1, fan_out)).expect("unique");
}

fn push_norm(p: &mut TinyNetParams<f32>, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Matrix::filled(1, d, 1.0)).expect("unique");
    p.insert(format!("{name}.b"), Matrix::zeros(1, d)).expect("unique");
}

fn push_block(p: &mut TinyNetParams<f32>, rng: &mut Rng, prefix: &str, d: usize, hidden: usize) {
    push_norm(p, &format!("{prefix}.ln1"), d);
    for m in ["q", "k", "v", "o"] {
        push_linear(p, rng, &format!("{prefix}.attn.{m}"), d, d);
    }
    push_norm(p, &format!("{prefix}.ln2"), d);
    push_linear(p, rng, &format!("{prefix}.mlp.fc1"), d, hidden);
    push_linear(p, rng, &format!("{prefix}.mlp.fc2"), hidden, d);
}

/// Freshly initialized parameters: Xavier-uniform weights, zero biases,
/// unit norm gains and small Gaussian positional and mask embeddings.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<TinyNetParams<f32>> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let n = cfg.tokens()?;
    let pd = cfg.patch_dim();
    let mut p = TinyNetParams::new();
    push_linear(&mut p, &mut rng, "patch", pd, d);
    p.insert("pos", normal(&mut rng, n, d, POS_STD))?;
    for l in 0..cfg.depth_enc {
        push_block(&mut p, &mut rng, &format!("enc.{l}"), d, hidden);
    }
    push_norm(&mut p, "enc.norm", d);
    push_linear(&mut p, &mut rng, "dec.proj", d, d);
    p.insert("mask_token", normal(&mut rng, 1, d, POS_STD))?;
    p.insert("dec.pos", normal(&mut rng, n, d, POS_STD))?;
    for l in 0..cfg.depth_dec {
        push_block(&mut p, &mut rng, &format!("dec.{l}"), d, hidden);
    }
    push_norm(&mut p, "dec.norm", d);
    push_linear(&mut p, &mut rng, "head", d, pd);
    for l in 0..cfg.mca_depth {
        for i in 0..cfg.mca_heads {
            for m in ["wq", "wk", "wv"] {
                p.insert(format!("mca.{l}.{m}.{i}"), xavier(&mut rng, d, d))?;
            }
        }
        p.insert(format!("mca.{l}.wo"), xavier(&mut rng, cfg.mca_heads * d, d))?;
    }
    push_linear(&mut p, &mut rng, "fc", d, cfg.classes);
    Ok(p)
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(params: &TinyNetParams<f32>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION)?;
    put_u32(&mut w, params.len() as u32)?;
    for (name, m) in params.iter() {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, 2)?;
        put_u32(&mut w, m.rows() as u32)?;
        put_u32(&mut w, m.cols() as u32)?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n.min(1 << 20));
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(Error::Format { offset: self.offset + got as u64, message: format!("truncated {what}") });
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn fail(&self, at: u64, message: impl Into<String>) -> Error {
        Error::Format { offset: at, message: message.into() }
    }
}

/// Parses a checkpoint. Only rank-1 and rank-2 tensors are accepted;
/// rank-1 tensors load as a single row.
pub fn read_checkpoint<R: Read>(r: R) -> Result<TinyNetParams<f32>> {
    let mut rd = Reader { inner: r, offset: 0 };
    let magic = rd.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(rd.fail(0, "bad magic"));
    }
    let at = rd.offset;
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(rd.fail(at, format!("unsupported version {version}")));
    }
    let count = rd.u32("tensor count")?;
    let mut params = TinyNetParams::new();
    for _ in 0..count {
        let at = rd.offset;
        let len = rd.u32("name length")? as usize;
        if len > 4096 {
            return Err(rd.fail(at, format!("name length {len} too large")));
        }
        let at = rd.offset;
        let name = String::from_utf8(rd.bytes(len, "name")?).map_err(|_| rd.fail(at, "name is not UTF-8"))?;
        let at = rd.offset;
        let rank = rd.u32("rank")?;
        let (rows, cols) = match rank {
            1 => (1, rd.u32("dims")? as usize),
            2 => (rd.u32("dims")? as usize, rd.u32("dims")? as usize),
            _ => return Err(rd.fail(at, format!("unsupported rank {rank} for {name}"))),
        };
        let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 28).ok_or_else(|| rd.fail(at, "tensor too large"))?;
        let raw = rd.bytes(n * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(name, Matrix::from_vec(rows, cols, data)).map_err(|e| rd.fail(at, e.to_string()))?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = NetConfig::micro(2);
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        let c = init_params(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert_eq!(a.get("patch.w").unwrap().shape(), (256, 32));
        assert_eq!(a.get("mca.0.wo").unwrap().shape(), (96, 32));
        assert_eq!(a.get("fc.w").unwrap().shape(), (32, 2));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = init_params(&NetConfig::micro(3), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MOFO");
        let q = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let p = init_params(&NetConfig::micro(2), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format { offset: 0, .. })));
        bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format { offset: 4, .. })));
        match read_checkpoint(&buf[..100]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn assign_checks_shapes() {
        let mut a = init_params(&NetConfig::micro(2), 1).unwrap();
        let b = init_params(&NetConfig::micro(2), 2).unwrap();
        a.assign_from(&b).unwrap();
        assert_eq!(a, b);
        let c = init_params(&NetConfig::micro(3), 2).unwrap();
        assert!(a.assign_from(&c).is_err());
    }
}
