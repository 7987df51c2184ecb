//! Encoder plus growing per-task linear heads.
//!
//! The encoder is a multilayer perceptron with rectifiers on the hidden
//! layers and a linear embedding layer. Each task owns a head mapping the
//! embedding to its classes; logits over all seen classes are the heads'
//! outputs concatenated in task order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{to_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{affine, Gradients, Matrix, NodeId, Tape};
use crate::TaskId;

pub(crate) const CONTAINER_MAGIC: [u8; 4] = *b"DGCL";
pub(crate) const CONTAINER_VERSION: u32 = 1;
pub(crate) const KIND_MODEL: u32 = 1;

/// Weight and bias of one fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Self { weight: Matrix::from_vec_unchecked(fan_in, fan_out, data), bias: Matrix::zeros(1, fan_out) }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        affine(x, &self.weight, &self.bias)
    }
}

/// Shared feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
}

impl Encoder {
    /// `sizes` runs from the input width to the embedding width.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad encoder sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes.windows(2).map(|w| Dense::init(w[0], w[1], &mut rng)).collect();
        Ok(Self { sizes: sizes.to_vec(), layers })
    }

    /// Builds an encoder from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        };
        let mut sizes = vec![first.weight.rows()];
        for layer in &layers {
            let last = *sizes.last().expect("non-empty");
            if layer.weight.rows() != last || layer.bias.shape() != (1, layer.weight.cols()) {
                return Err(Error::shape("encoder", (last, 0), layer.weight.shape()));
            }
            sizes.push(layer.weight.cols());
        }
        Ok(Self { sizes, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.data().len()).sum()
    }

    /// Untraced forward pass.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("embed", x.shape(), (x.rows(), self.input_dim())));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub task: TaskId,
    pub offset: usize,
    pub layer: Dense,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.layer.weight.cols()
    }
}

/// Per-task heads with their global class offsets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadSet {
    heads: Vec<Head>,
}

impl HeadSet {
    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(Head::classes).sum()
    }

    pub fn head(&self, task: TaskId) -> Option<&Head> {
        self.heads.iter().find(|h| h.task == task)
    }

    pub fn offset(&self, task: TaskId) -> Option<usize> {
        self.head(task).map(|h| h.offset)
    }

    /// Global class range `[offset, offset + classes)` of a task.
    pub fn class_range(&self, task: TaskId) -> Option<std::ops::Range<usize>> {
        self.head(task).map(|h| h.offset..h.offset + h.classes())
    }

    fn push(&mut self, task: TaskId, layer: Dense) -> Result<()> {
        if self.head(task).is_some() {
            return Err(Error::DuplicateTask(task));
        }
        let offset = self.total_classes();
        self.heads.push(Head { task, offset, layer });
        Ok(())
    }
}

/// Trainable network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    encoder: Encoder,
    heads: HeadSet,
    seed: u64,
}

/// Frozen copy of an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    encoder: Encoder,
}

impl ModelSnapshot {
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.embed(x)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }
}

/// Tape nodes for every parameter of a model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(NodeId, NodeId)>,
    heads: Vec<(NodeId, NodeId)>,
}

impl Model {
    /// Fresh encoder with no heads.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        Ok(Self { encoder: Encoder::new(sizes, seed)?, heads: HeadSet::default(), seed })
    }

    pub fn from_parts(encoder: Encoder, heads: HeadSet) -> Self {
        Self { encoder, heads, seed: 0 }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &HeadSet {
        &self.heads
    }

    /// Appends a randomly initialized head for `task`.
    pub fn add_head(&mut self, task: TaskId, classes: usize) -> Result<&HeadSet> {
        if classes == 0 {
            return Err(Error::InvalidArgument("a head needs at least one class".into()));
        }
        if self.heads.head(task).is_some() {
            return Err(Error::DuplicateTask(task));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (u64::from(task) << 32 | 0x9e37));
        let layer = Dense::init(self.encoder.embedding_dim(), classes, &mut rng);
        self.heads.push(task, layer)?;
        Ok(&self.heads)
    }

    /// Inserts a head with explicit parameters.
    pub fn add_head_with(&mut self, task: TaskId, layer: Dense) -> Result<&HeadSet> {
        if layer.weight.rows() != self.encoder.embedding_dim() || layer.bias.shape() != (1, layer.weight.cols()) {
            return Err(Error::shape(
                "add_head",
                (self.encoder.embedding_dim(), layer.weight.cols()),
                layer.weight.shape(),
            ));
        }
        self.heads.push(task, layer)?;
        Ok(&self.heads)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { encoder: self.encoder.clone() }
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.embed(x)
    }

    /// Concatenated logits of every head.
    pub fn logits_all_heads(&self, f: &Matrix) -> Result<Matrix> {
        if self.heads.is_empty() {
            return Err(Error::NoHeads);
        }
        let parts = self.heads.heads.iter().map(|h| h.layer.forward(f)).collect::<Result<Vec<_>>>()?;
        Matrix::hstack(&parts.iter().collect::<Vec<_>>())
    }

    /// Argmax over all seen classes; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits_all_heads(&self.embed(x)?)?;
        Ok(argmax_rows(&logits))
    }

    /// Argmax restricted to one task's classes, returned as global indices.
    pub fn predict_within(&self, x: &Matrix, task: TaskId) -> Result<Vec<usize>> {
        let head = self.heads.head(task).ok_or(Error::UnknownTask(task))?;
        let logits = head.layer.forward(&self.embed(x)?)?;
        Ok(argmax_rows(&logits).into_iter().map(|c| c + head.offset).collect())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.heads.heads.iter().map(|h| h.layer.weight.data().len() + h.layer.bias.data().len()).sum::<usize>()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers =
            self.encoder.layers.iter().map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))).collect();
        let heads = self
            .heads
            .heads
            .iter()
            .map(|h| (tape.leaf(h.layer.weight.clone()), tape.leaf(h.layer.bias.clone())))
            .collect();
        BoundModel { layers, heads }
    }

    /// Traced forward pass through the encoder.
    pub fn embed_on(&self, tape: &mut Tape, bound: &BoundModel, x: NodeId) -> Result<NodeId> {
        let cols = tape.value(x).cols();
        if cols != self.encoder.input_dim() {
            return Err(Error::shape("embed", tape.value(x).shape(), (0, self.encoder.input_dim())));
        }
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Traced logits of every head, concatenated.
    pub fn logits_on(&self, tape: &mut Tape, bound: &BoundModel, f: NodeId) -> Result<NodeId> {
        if bound.heads.is_empty() {
            return Err(Error::NoHeads);
        }
        let parts = bound.heads.iter().map(|&(w, b)| tape.affine(f, w, b)).collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat_cols(parts)
    }

    /// Plain gradient descent step on every parameter.
    pub fn sgd_step(&mut self, bound: &BoundModel, grads: &mut Gradients, lr: f64) -> Result<()> {
        let pairs = self
            .encoder
            .layers
            .iter_mut()
            .zip(&bound.layers)
            .chain(self.heads.heads.iter_mut().map(|h| &mut h.layer).zip(&bound.heads));
        for (layer, &(w, b)) in pairs {
            for (param, id) in [(&mut layer.weight, w), (&mut layer.bias, b)] {
                let g =
                    grads.take(id).ok_or_else(|| Error::InvalidArgument("gradient missing for parameter".into()))?;
                for (p, d) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        }
        Ok(())
    }

    /// Serializes to the versioned checkpoint container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(&CONTAINER_MAGIC).u32(CONTAINER_VERSION).u32(KIND_MODEL);
        w.u32(to_u32(self.encoder.sizes.len(), "layer count")?);
        for &s in &self.encoder.sizes {
            w.u32(to_u32(s, "layer size")?);
        }
        for layer in &self.encoder.layers {
            w.f64s(layer.weight.data()).f64s(layer.bias.data());
        }
        w.u32(to_u32(self.heads.heads.len(), "head count")?);
        for head in &self.heads.heads {
            w.u32(head.task).u32(to_u32(head.classes(), "class count")?);
            w.f64s(head.layer.weight.data()).f64s(head.layer.bias.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CONTAINER_MAGIC)?;
        r.version(CONTAINER_VERSION)?;
        let kind = r.u32()?;
        if kind != KIND_MODEL {
            return Err(Error::Malformed(format!("container kind {kind} is not a model")));
        }
        let n_sizes = r.u32()? as usize;
        let sizes = (0..n_sizes).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 {
            return Err(Error::Malformed("fewer than two layer sizes".into()));
        }
        let mut layers = Vec::new();
        for pair in sizes.windows(2) {
            let weight = Matrix::new(pair[0], pair[1], r.f64s(pair[0] * pair[1])?)?;
            let bias = Matrix::new(1, pair[1], r.f64s(pair[1])?)?;
            layers.push(Dense { weight, bias });
        }
        let encoder = Encoder::from_layers(layers)?;
        let d_emb = encoder.embedding_dim();
        let mut model = Model::from_parts(encoder, HeadSet::default());
        let n_heads = r.u32()?;
        for _ in 0..n_heads {
            let task = r.u32()?;
            let classes = r.u32()? as usize;
            let weight = Matrix::new(d_emb, classes, r.f64s(d_emb * classes)?)?;
            let bias = Matrix::new(1, classes, r.f64s(classes)?)?;
            model.add_head_with(task, Dense { weight, bias })?;
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Index of each row's maximum, first index on ties.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(d: usize) -> Model {
        let encoder =
            Encoder::from_layers(vec![Dense { weight: Matrix::identity(d), bias: Matrix::zeros(1, d) }]).unwrap();
        Model::from_parts(encoder, HeadSet::default())
    }

    #[test]
    fn identity_network_embeds_unchanged() {
        let m = identity_model(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.5], [0.0, 0.25, -1.0]]).unwrap();
        assert_eq!(m.embed(&x).unwrap(), x);
    }

    #[test]
    fn embed_shape_and_mismatch() {
        let m = Model::new(&[5, 7, 3], 1).unwrap();
        for n in [1, 4, 9] {
            assert_eq!(m.embed(&Matrix::zeros(n, 5)).unwrap().shape(), (n, 3));
        }
        assert!(matches!(m.embed(&Matrix::zeros(2, 4)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let e = Encoder::new(&[16, 64, 32], 7).unwrap();
        let limit = (6.0f64 / 80.0).sqrt();
        assert!(e.layers()[0].weight.data().iter().all(|v| v.abs() < limit));
        assert_eq!(e.param_count(), 16 * 64 + 64 + 64 * 32 + 32);
    }

    #[test]
    fn head_offsets_accumulate() {
        let mut m = Model::new(&[4, 3], 0).unwrap();
        m.add_head(1, 5).unwrap();
        assert_eq!(m.heads().total_classes(), 5);
        assert_eq!(m.heads().offset(1), Some(0));
        m.add_head(2, 5).unwrap();
        assert_eq!(m.heads().total_classes(), 10);
        assert_eq!(m.heads().offset(2), Some(5));
        assert!(matches!(m.add_head(1, 2), Err(Error::DuplicateTask(1))));
    }

    #[test]
    fn logits_need_a_head() {
        let m = Model::new(&[4, 3], 0).unwrap();
        assert!(matches!(m.logits_all_heads(&Matrix::zeros(1, 3)), Err(Error::NoHeads)));
    }

    #[test]
    fn single_head_logits_equal_affine() {
        let mut m = Model::new(&[4, 3], 0).unwrap();
        m.add_head(1, 2).unwrap();
        let f = Matrix::from_rows(&[[0.3, -0.2, 1.0]]).unwrap();
        let h = &m.heads().heads()[0].layer;
        assert_eq!(m.logits_all_heads(&f).unwrap(), affine(&f, &h.weight, &h.bias).unwrap());
    }

    #[test]
    fn argmax_tie_rule() {
        let m = Matrix::from_rows(&[[0.1, 0.9, 0.3], [0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }

    #[test]
    fn task_restricted_prediction_uses_global_indices() {
        let mut m = identity_model(2);
        m.add_head_with(1, Dense { weight: Matrix::identity(2), bias: Matrix::zeros(1, 2) }).unwrap();
        m.add_head_with(2, Dense { weight: Matrix::identity(2), bias: Matrix::from_rows(&[[0.0, 9.0]]).unwrap() })
            .unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), vec![3]);
        assert_eq!(m.predict_within(&x, 1).unwrap(), vec![0]);
        assert!(matches!(m.predict_within(&x, 3), Err(Error::UnknownTask(3))));
    }

    #[test]
    fn snapshot_is_isolated_from_training() {
        let mut m = Model::new(&[3, 4, 2], 5).unwrap();
        m.add_head(1, 2).unwrap();
        let snap = m.snapshot();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]]).unwrap();
        let recorded = snap.embed(&x).unwrap();
        assert_eq!(recorded, m.embed(&x).unwrap());

        for _ in 0..100 {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let xi = tape.constant(x.clone());
            let f = m.embed_on(&mut tape, &bound, xi).unwrap();
            let z = m.logits_on(&mut tape, &bound, f).unwrap();
            let ls = tape.log_softmax(z).unwrap();
            let loss = tape.nll_mean(ls, vec![0, 1]).unwrap();
            let mut g = tape.backward(loss).unwrap();
            m.sgd_step(&bound, &mut g, 0.1).unwrap();
        }
        assert_ne!(m.embed(&x).unwrap(), recorded);
        assert_eq!(snap.embed(&x).unwrap(), recorded);
        assert_eq!(snap.snapshot(), snap);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model::new(&[3, 4, 2], 5).unwrap();
        m.add_head(1, 2).unwrap();
        m.add_head(4, 3).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DGCL");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.encoder(), m.encoder());
        assert_eq!(back.heads(), m.heads());
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }
}
