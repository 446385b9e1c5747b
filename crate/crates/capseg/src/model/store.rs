//! Flat parameter storage.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>`, registered by
//! name at construction time. Layers hold [`ParamId`]s and view their slice
//! on demand. Keeping parameters flat makes the optimizer, checkpointing and
//! finite-difference perturbation trivial: they all walk one buffer, and a
//! gradient is just a second buffer with the same layout.

use ndarray::{ArrayView1, ArrayView2};

/// Handle to one named parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and fills it by repeatedly calling `init`.
    /// Registration order is the storage order, so deterministic
    /// construction gives deterministic initialization.
    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name:?}"
        );
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.extend(std::iter::repeat_with(&mut init).take(len));
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), offset, len });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    /// 2D view of a parameter registered with a rank-2 shape.
    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        assert_eq!(e.shape.len(), 2, "parameter {} is not rank 2", e.name);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(id))
            .expect("entry length always matches its shape")
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        let e = &self.entries[id.0];
        assert_eq!(e.shape.len(), 1, "parameter {} is not rank 1", e.name);
        ArrayView1::from_shape(e.shape[0], self.slice(id))
            .expect("entry length always matches its shape")
    }

    pub fn total_len(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Gradient buffer with the same flat layout as its parameter store.
#[derive(Debug, Clone)]
pub struct GradStore {
    data: Vec<f64>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore { data: vec![0.0; store.total_len()] }
    }

    pub fn slice_mut(&mut self, store: &ParamStore, id: ParamId) -> &mut [f64] {
        let e = store.entry(id);
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn slice(&self, store: &ParamStore, id: ParamId) -> &[f64] {
        let e = store.entry(id);
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
