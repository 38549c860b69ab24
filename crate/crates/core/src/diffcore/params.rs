//! Named parameter storage, the Adam optimizer, and directory checkpoints.

use crate::dmt4::{Dmt4, Payload};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Gradient clipping threshold (global L2 norm over all trainable entries).
pub const GRAD_CLIP_NORM: f64 = 1.0;

struct Entry<S> {
    value: Tensor<S>,
    grad: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
    trainable: bool,
}

/// Parameters keyed by name. A `BTreeMap` keeps iteration (and therefore
/// optimizer-update order) sorted by name, which the determinism contract
/// relies on.
pub struct ParamStore<S> {
    entries: BTreeMap<String, Entry<S>>,
    step: u64,
    grads_ready: bool,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            step: 0,
            grads_ready: false,
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
        {
            return Err(Error::Config(format!(
                "parameter name {:?} must be nonempty [A-Za-z0-9._]",
                name
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::State(format!(
                "parameter {:?} registered twice",
                name
            )));
        }
        let dims = value.dims().to_vec();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: Tensor::zeros(&dims),
                m: Tensor::zeros(&dims),
                v: Tensor::zeros(&dims),
                trainable: true,
            },
        );
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter {:?}", name)))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter {:?}", name)))?;
        if entry.value.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {:?} has dims {:?}, new value has {:?}",
                name,
                entry.value.dims(),
                value.dims()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.entry(name)?.grad)
    }

    pub fn add_grad(&mut self, name: &str, g: &Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter {:?}", name)))?;
        if entry.value.dims() != g.dims() {
            return Err(Error::Shape(format!(
                "gradient dims {:?} do not match parameter {:?} dims {:?}",
                g.dims(),
                name,
                entry.value.dims()
            )));
        }
        for (a, b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            for g in entry.grad.data_mut() {
                *g = S::zero();
            }
        }
        self.grads_ready = false;
    }

    /// Mark every parameter whose name starts with `prefix` non-trainable.
    /// Returns how many entries were frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                entry.trainable = false;
                n += 1;
            }
        }
        n
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.entry(name)?.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all parameters.
    pub fn n_values(&self) -> u64 {
        self.entries.values().map(|e| e.value.len() as u64).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over all trainable entries in sorted
    /// name order, with global-norm gradient clipping. Consumes the
    /// accumulated gradients.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be nonnegative and finite, got {}",
                lr
            )));
        }
        if !self.grads_ready {
            return Err(Error::State(
                "adam_step without accumulated gradients; run backward first".into(),
            ));
        }
        let mut sq_norm = 0.0f64;
        for entry in self.entries.values().filter(|e| e.trainable) {
            for &g in entry.grad.data() {
                let g = g.as_f64();
                sq_norm += g * g;
            }
        }
        let norm = sq_norm.sqrt();
        let clip = if norm > GRAD_CLIP_NORM {
            GRAD_CLIP_NORM / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for entry in self.entries.values_mut() {
            if !entry.trainable {
                continue;
            }
            let n = entry.value.len();
            for i in 0..n {
                let g = entry.grad.data()[i].as_f64() * clip;
                let m = ADAM_BETA1 * entry.m.data()[i].as_f64() + (1.0 - ADAM_BETA1) * g;
                let v = ADAM_BETA2 * entry.v.data()[i].as_f64() + (1.0 - ADAM_BETA2) * g * g;
                entry.m.data_mut()[i] = S::from_f64(m);
                entry.v.data_mut()[i] = S::from_f64(v);
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                let w = entry.value.data()[i].as_f64() - update;
                entry.value.data_mut()[i] = S::from_f64(w);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Convert every tensor to another scalar type (used to run the same
    /// parameters in double precision for verification).
    pub fn convert<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            out.entries.insert(
                name.clone(),
                Entry {
                    value: entry.value.convert(),
                    grad: entry.grad.convert(),
                    m: entry.m.convert(),
                    v: entry.v.convert(),
                    trainable: entry.trainable,
                },
            );
        }
        out.step = self.step;
        out.grads_ready = self.grads_ready;
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    step: u64,
    adam_state: bool,
    params: Vec<ManifestEntry>,
}

fn tensor_to_dmt4<S: Scalar>(t: &Tensor<S>) -> Dmt4 {
    let vals: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
    Dmt4::new(t.dims().to_vec(), Payload::F32(vals)).expect("tensor dims are consistent")
}

fn dmt4_to_tensor<S: Scalar>(d: &Dmt4, what: &str) -> Result<Tensor<S>> {
    match &d.payload {
        Payload::F32(vals) => {
            let data = vals.iter().map(|&v| S::from_f64(v as f64)).collect();
            Tensor::from_vec(&d.dims, data)
        }
        _ => Err(Error::Dmt4(format!(
            "{} must have dtype f32, found {:?}",
            what,
            d.payload.dtype()
        ))),
    }
}

impl<S: Scalar> ParamStore<S> {
    /// Write a checkpoint directory: `manifest.json`, one tensor file per
    /// parameter under `params/`, and Adam moments under `adam/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("params"))?;
        std::fs::create_dir_all(dir.join("adam"))?;
        let manifest = Manifest {
            dtype: if std::mem::size_of::<S>() == 4 { "f32" } else { "f64" }.into(),
            step: self.step,
            adam_state: true,
            params: self
                .entries
                .iter()
                .map(|(name, e)| ManifestEntry {
                    name: name.clone(),
                    dims: e.value.dims().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        for (name, entry) in &self.entries {
            tensor_to_dmt4(&entry.value).write(dir.join("params").join(format!("{}.dmt4", name)))?;
            tensor_to_dmt4(&entry.m).write(dir.join("adam").join(format!("{}.m.dmt4", name)))?;
            tensor_to_dmt4(&entry.v).write(dir.join("adam").join(format!("{}.v.dmt4", name)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut store = ParamStore::new();
        for pm in &manifest.params {
            let d = Dmt4::read(dir.join("params").join(format!("{}.dmt4", pm.name)))?;
            if d.dims != pm.dims {
                return Err(Error::Dmt4(format!(
                    "parameter {:?}: manifest dims {:?} but tensor dims {:?}",
                    pm.name, pm.dims, d.dims
                )));
            }
            let value = dmt4_to_tensor(&d, &format!("parameter {:?}", pm.name))?;
            store.register(&pm.name, value)?;
            if !pm.trainable {
                store.entries.get_mut(&pm.name).unwrap().trainable = false;
            }
            if manifest.adam_state {
                let m = Dmt4::read(dir.join("adam").join(format!("{}.m.dmt4", pm.name)))?;
                let v = Dmt4::read(dir.join("adam").join(format!("{}.v.dmt4", pm.name)))?;
                let e = store.entries.get_mut(&pm.name).unwrap();
                e.m = dmt4_to_tensor(&m, "adam m")?;
                e.v = dmt4_to_tensor(&v, "adam v")?;
            }
        }
        store.step = manifest.step;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_vec(&[1], vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.37);
        s.mark_grads_ready();
        s.adam_step(0.001).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0].to_bits(), 0.37f64.to_bits());
    }

    #[test]
    fn first_step_matches_hand_evaluated_update() {
        // w = 0, g = 1, lr = 0.001: bias correction cancels the moment decay
        // exactly at t = 1, so w' = -lr / (1 + eps_adam)
        let mut s = scalar_store(0.0);
        s.add_grad("w", &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        s.mark_grads_ready();
        s.adam_step(0.001).unwrap();
        let w = s.value("w").unwrap().data()[0];
        assert!((w - (-0.000999999990)).abs() < 1e-12, "w' = {}", w);
    }

    #[test]
    fn constant_positive_gradient_is_monotone() {
        let mut s = scalar_store(0.0);
        let mut prev = 0.0;
        for _ in 0..2 {
            s.add_grad("w", &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
            s.mark_grads_ready();
            s.adam_step(0.001).unwrap();
            let w = s.value("w").unwrap().data()[0];
            assert!(w < prev, "{} not < {}", w, prev);
            prev = w;
        }
    }

    #[test]
    fn step_without_gradients_is_a_state_error() {
        let mut s = scalar_store(0.0);
        assert!(matches!(s.adam_step(0.001), Err(Error::State(_))));
    }

    #[test]
    fn oversized_gradients_are_clipped_to_unit_norm() {
        // any gradient with norm >= 1 produces the same first step
        let run = |g: f64| {
            let mut s = scalar_store(0.0);
            s.add_grad("w", &Tensor::from_vec(&[1], vec![g]).unwrap()).unwrap();
            s.mark_grads_ready();
            s.adam_step(0.001).unwrap();
            s.value("w").unwrap().data()[0]
        };
        assert_eq!(run(1.0).to_bits(), run(1e6).to_bits());
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut s = ParamStore::<f64>::new();
        s.register("net.a", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        s.register("net.b", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(s.freeze_prefix("net.a"), 1);
        s.add_grad("net.a", &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        s.add_grad("net.b", &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        s.mark_grads_ready();
        s.adam_step(0.001).unwrap();
        assert_eq!(s.value("net.a").unwrap().data()[0], 1.0);
        assert!(s.value("net.b").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn gradient_dims_must_match() {
        let mut s = scalar_store(0.0);
        let bad = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(s.add_grad("w", &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_and_invalid_names_rejected() {
        let mut s = scalar_store(0.0);
        assert!(matches!(
            s.register("w", Tensor::zeros(&[1])),
            Err(Error::State(_))
        ));
        assert!(matches!(
            s.register("bad/name", Tensor::zeros(&[1])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn iteration_order_is_sorted() {
        let mut s = ParamStore::<f32>::new();
        for name in ["z.w", "a.w", "m.w"] {
            s.register(name, Tensor::zeros(&[1])).unwrap();
        }
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a.w", "m.w", "z.w"]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_for_f32() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.register("layer.w", Tensor::from_vec(&[2, 2], vec![0.1, -0.2, 0.3, std::f32::consts::PI]).unwrap())
            .unwrap();
        s.register("layer.b", Tensor::from_vec(&[2], vec![1e-7, 3.5]).unwrap()).unwrap();
        s.freeze_prefix("layer.b");
        s.add_grad("layer.w", &Tensor::full(&[2, 2], 0.5)).unwrap();
        s.mark_grads_ready();
        s.adam_step(0.01).unwrap();
        s.save(tmp.path()).unwrap();

        let back = ParamStore::<f32>::load(tmp.path()).unwrap();
        assert_eq!(back.step(), 1);
        assert!(!back.is_trainable("layer.b").unwrap());
        for name in ["layer.w", "layer.b"] {
            let a = s.value(name).unwrap().data();
            let b = back.value(name).unwrap().data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            let m0 = s.entries[name].m.data();
            let m1 = back.entries[name].m.data();
            assert!(m0.iter().zip(m1).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
