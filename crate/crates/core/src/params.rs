//! Named parameter storage and the per-forward-pass context that binds
//! parameters to tape variables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; saved with the model, never differentiated.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by the optimizer and by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        self.entries.push(Entry { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_param",
                format!("`{}` has shape {:?}, got {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Sets every trainable tensor whose name contains `pattern` to zero.
    pub fn zero_matching(&mut self, pattern: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable && e.name.contains(pattern) {
                e.value.fill(0.0);
                n += 1;
            }
        }
        n
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform Glorot initialisation on `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..=a)).collect();
        let t = Tensor::matrix(rows, cols, data)?;
        self.store.add(self.full_name(name), t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add(self.full_name(name), Tensor::full(shape, value), ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.store.add(self.full_name(name), value, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// New running statistics computed by a train-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub new_mean: Vec<f64>,
    pub new_var: Vec<f64>,
}

/// One forward pass: the tape, the parameters it reads and the train/eval
/// mode. Parameters become tape leaves on first use.
pub struct Ctx<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    mode: Mode,
    vars: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            vars: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Uses an existing tape variable for `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.tape.value(var).shape() != self.store.get(id).shape() {
            return Err(Error::dim(
                "bind",
                format!("`{}` bound to a tensor of shape {:?}", self.store.name(id), self.tape.value(var).shape()),
            ));
        }
        self.vars[id.0] = Some(var);
        Ok(())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let trainable = self.store.kind(id) == ParamKind::Trainable;
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn finish(self) -> Bindings {
        Bindings {
            vars: self.vars,
            bn_updates: self.bn_updates,
        }
    }
}

/// What a finished [`Ctx`] leaves behind.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradient per parameter; zero for parameters the loss did not reach.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    pub fn apply_bn_updates(&self, store: &mut ParamStore) {
        for u in &self.bn_updates {
            store.get_mut(u.mean).data_mut().copy_from_slice(&u.new_mean);
            store.get_mut(u.var).data_mut().copy_from_slice(&u.new_var);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scoped_names_and_glorot_bounds() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let w = b.scope("layer0").scope("ffn").glorot("w1", 4, 8).unwrap();
        b.buffer("stats", Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(store.name(w), "layer0.ffn.w1");
        let a = (6.0f64 / 12.0).sqrt();
        assert!(store.get(w).data().iter().all(|v| v.abs() <= a));
        assert_eq!(store.num_trainable(), 32);
        assert_eq!(store.trainable_ids(), vec![w]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0), ParamKind::Trainable).unwrap();
        assert!(store.add("a", Tensor::scalar(2.0), ParamKind::Buffer).is_err());
    }

    #[test]
    fn params_bind_once_per_pass() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0), ParamKind::Trainable).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
        let a = cx.param(id);
        let b = cx.param(id);
        assert_eq!(a, b);
        let sq = cx.tape.mul(a, b).unwrap();
        let bind = cx.finish();
        tape.backward(sq).unwrap();
        assert_eq!(bind.grads(&tape, &store)[0].data(), &[6.0]);
    }
}
