//! Named parameter storage, basic layers, Adam, and checkpoint files.

use crate::error::{Error, Result};
use crate::tape::{AttentionMask, AttentionShape, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Places every parameter on the tape. With `track` the parameters are
    /// differentiable leaves, otherwise constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if track {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive digest of names, shapes and values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of one [`ParamStore`] placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform initialization in ±`bound`.
pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in ±1/√in, scaled by `gain`; biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(rng, in_dim, out_dim, bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x, 1e-5);
        let s = tape.mul_row(n, p.var(self.gamma));
        tape.add_row(s, p.var(self.beta))
    }
}

/// Linear layers separated by SiLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the widths from input to output; the last layer uses
    /// `final_gain`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        final_gain: f64,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { final_gain } else { 1.0 };
                Linear::new(store, rng, &format!("{name}.{i}"), dims[i], dims[i + 1], true, gain)
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.silu(x);
            }
            x = layer.forward(tape, p, x);
        }
        x
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `inner` is the total query/key/value width across heads.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
    ) -> Self {
        assert!(inner.is_multiple_of(heads), "attention width must split across heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), query_dim, inner, false, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), key_dim, inner, false, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), key_dim, inner, false, 1.0),
            o: Linear::new(store, rng, &format!("{name}.o"), inner, out_dim, true, 1.0),
            heads,
        }
    }

    /// Attends `queries` (blocks·lq rows) over `keys` (blocks·lk rows).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        keys: Var,
        blocks: usize,
        query_len: usize,
        key_len: usize,
        mask: &AttentionMask,
    ) -> Var {
        let q = self.q.forward(tape, p, queries);
        let k = self.k.forward(tape, p, keys);
        let v = self.v.forward(tape, p, keys);
        let head_dim = self.q.out_dim / self.heads;
        let shape = AttentionShape {
            blocks,
            query_len,
            key_len,
            heads: self.heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
        };
        let a = tape.attention(q, k, v, None, shape, mask);
        self.o.forward(tape, p, a)
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th stored tensor;
    /// `None` counts as a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient count");
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_ref().map(Tensor::data);
            for (k, w) in tensor.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EZFLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, config hash, seed, then
/// `(name, rows, cols, values)` entries, all little-endian.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: &str, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_str(&mut buf, config_hash);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io_util::write_atomic(path, &buf)
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<(String, Tensor)>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, 0, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(path, 0, format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.string()?;
    let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, 0, "trailing bytes after checkpoint entries"));
    }
    Ok(Checkpoint {
        config_hash,
        seed,
        entries,
    })
}

impl Checkpoint {
    /// Copies entries into `store`, requiring identical names and shapes.
    pub fn load_into(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Config(format!(
                "{}: checkpoint has {} tensors, configuration expects {}",
                path.display(),
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            let id = store.id(name).ok_or_else(|| {
                Error::Config(format!("{}: unexpected tensor {name}", path.display()))
            })?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "{}: tensor {name} has shape {:?}, configuration expects {:?}",
                    path.display(),
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, 0, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::parse(self.path, 0, "non-UTF-8 name in checkpoint"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-12);
        adam.update(&mut store, &[Some(Tensor::from_vec(1, 2, vec![3.0, -0.5]))]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, &mut rng, "a", 3, 2, true, 1.0);
        LayerNorm::new(&mut store, "ln", 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &store, "abc", 7).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.config_hash, "abc");
        assert_eq!(ck.seed, 7);
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ck.load_into(&mut other, &path).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, &mut rng, "a", 3, 2, false, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &store, "h", 0).unwrap();
        let mut wrong = ParamStore::new();
        Linear::new(&mut wrong, &mut rng, "a", 4, 2, false, 1.0);
        assert!(read_checkpoint(&path).unwrap().load_into(&mut wrong, &path).is_err());
    }
}
