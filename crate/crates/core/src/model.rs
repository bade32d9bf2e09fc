//! MLP classifiers, local-to-global class remapping and the checkpoint file
//! format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Fully connected rectifier network with an optional trailing "reject"
/// output used by the SFX training variant.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    dims: Vec<usize>,
    /// Per layer, weights of shape [fan_in × fan_out].
    weights: Vec<Tensor>,
    /// Per layer, biases of shape [fan_out].
    biases: Vec<Tensor>,
    local_map: Vec<usize>,
    part_index: usize,
}

/// Tape handles for a model's parameters, in `weights[0], biases[0], …` order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

fn check_head(d_out: usize, local_map: &[usize]) -> Result<()> {
    if d_out != local_map.len() && d_out != local_map.len() + 1 {
        return Err(Error::Domain(format!(
            "output width {d_out} does not fit a local map of {} classes",
            local_map.len()
        )));
    }
    Ok(())
}

impl MlpClassifier {
    /// He-style initialization: weights `N(0, 2/fan_in)`, zero biases.
    pub fn init(dims: &[usize], local_map: Vec<usize>, part_index: usize, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!("invalid layer dims {dims:?}")));
        }
        check_head(dims[dims.len() - 1], &local_map)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            local_map,
            part_index,
        })
    }

    /// Builds a model from explicit parameters.
    pub fn from_parts(
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        local_map: Vec<usize>,
        part_index: usize,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Domain("need one bias per weight matrix".into()));
        }
        let mut dims = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            if !w.is_matrix() || w.rows() != dims[dims.len() - 1] || b.len() != w.cols() {
                return Err(Error::dim("from_parts", w.shape(), b.shape()));
            }
            dims.push(w.cols());
        }
        check_head(dims[dims.len() - 1], &local_map)?;
        Ok(Self {
            dims,
            weights,
            biases,
            local_map,
            part_index,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn local_map(&self) -> &[usize] {
        &self.local_map
    }

    pub fn part_index(&self) -> usize {
        self.part_index
    }

    /// Whether the head carries an extra reject output after the retained classes.
    pub fn has_reject_output(&self) -> bool {
        self.output_dim() == self.local_map.len() + 1
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in `weights[0], biases[0], weights[1], …` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Parameters rounded to `f32`, the precision checkpoints store.
    pub fn quantized(&self) -> Self {
        let round = |t: &Tensor| t.map(|v| v as f32 as f64);
        Self {
            dims: self.dims.clone(),
            weights: self.weights.iter().map(round).collect(),
            biases: self.biases.iter().map(round).collect(),
            local_map: self.local_map.clone(),
            part_index: self.part_index,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::dim("forward", x.shape(), &[x.rows(), self.input_dim()]));
        }
        Ok(())
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = tensor::add_row_bias(&tensor::matmul(&h, w)?, b)?;
            if i < last {
                h = tensor::relu(&h);
            }
        }
        Ok(h)
    }

    /// Registers the parameters as gradient-collecting leaves.
    pub fn register_params(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params().into_iter().map(|p| tape.variable(p.clone())).collect())
    }

    /// Registers the parameters as constants, for input gradients only.
    pub fn register_constants(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params().into_iter().map(|p| tape.constant(p.clone())).collect())
    }

    /// Forward pass recorded on `tape` with previously registered parameters.
    pub fn forward_tape(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let layers = self.weights.len();
        let mut h = x;
        for i in 0..layers {
            let z = tape.matmul(h, params.0[2 * i])?;
            h = tape.add_row_bias(z, params.0[2 * i + 1])?;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Softmax of `logits / temperature` over the full head.
    pub fn predict_probs(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        tensor::softmax_temp(&self.forward_logits(x)?, temperature)
    }

    /// Probabilities of the retained classes only (drops a reject output).
    pub fn class_probs(&self, probs: &Tensor) -> Tensor {
        if !self.has_reject_output() {
            return probs.clone();
        }
        let c = self.local_map.len();
        let mut data = Vec::with_capacity(probs.rows() * c);
        for r in 0..probs.rows() {
            data.extend_from_slice(&probs.row(r)[..c]);
        }
        Tensor::matrix(probs.rows(), c, data).expect("shape matches buffer")
    }

    /// Local class predictions at temperature one.
    pub fn predict_local(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.class_probs(&self.predict_probs(x, 1.0)?);
        Ok((0..probs.rows()).map(|r| tensor::argmax(probs.row(r))).collect())
    }
}

/// Places local probabilities at their global class indices; left-out
/// classes receive exactly zero.
pub fn expand_to_global(local: &Tensor, local_map: &[usize], class_count: usize) -> Result<Tensor> {
    if !local.is_matrix() || local.cols() != local_map.len() {
        return Err(Error::dim("expand_to_global", local.shape(), &[local_map.len()]));
    }
    let mut seen = vec![false; class_count];
    for &g in local_map {
        if g >= class_count {
            return Err(Error::Validation(format!(
                "local map entry {g} out of range for {class_count} classes"
            )));
        }
        if std::mem::replace(&mut seen[g], true) {
            return Err(Error::Validation(format!("duplicate local map entry {g}")));
        }
    }
    let mut out = Tensor::zeros(&[local.rows(), class_count]);
    for r in 0..local.rows() {
        let dst = out.row_mut(r);
        for (&p, &g) in local.row(r).iter().zip(local_map) {
            dst[g] = p;
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"LOOC";
const FORMAT_VERSION: u16 = 1;

/// A selected model plus the context needed to use it in an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpClassifier,
    pub class_count: usize,
    pub k: usize,
    /// `key=value` metadata (epoch, accuracy, ood_error, seed, …).
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Wraps a model; parameters are rounded to the stored precision.
    pub fn new(model: &MlpClassifier, class_count: usize, k: usize) -> Self {
        Self {
            model: model.quantized(),
            class_count,
            k,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    /// Binary layout, all integers little-endian:
    ///
    /// ```text
    /// "LOOC" | version u16 | N u32 | K u32 | part_index u32
    /// | dim count u16 | dims u32 × count
    /// | local map length u32 | local map u32 × length
    /// | per layer: weights f32 row-major [fan_in × fan_out], bias f32 × fan_out
    /// | metadata: UTF-8 `key=value` lines to end of file
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.class_count, self.k, m.part_index] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(m.dims.len() as u16).to_le_bytes());
        for &d in &m.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(m.local_map.len() as u32).to_le_bytes());
        for &g in &m.local_map {
            out.extend_from_slice(&(g as u32).to_le_bytes());
        }
        for p in m.params() {
            for &v in p.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for (k, v) in &self.metadata {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = reader.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let class_count = reader.u32()? as usize;
        let k = reader.u32()? as usize;
        let part_index = reader.u32()? as usize;
        let dim_count = reader.u16()? as usize;
        let dims = (0..dim_count)
            .map(|_| reader.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let map_len = reader.u32()? as usize;
        let local_map = (0..map_len)
            .map(|_| reader.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Checkpoint(format!("invalid dims {dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            weights.push(Tensor::matrix(fan_in, fan_out, reader.f32s(fan_in * fan_out)?)?);
            biases.push(Tensor::new(vec![fan_out], reader.f32s(fan_out)?)?);
        }
        let text = std::str::from_utf8(&bytes[reader.pos..])
            .map_err(|e| Error::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
        let mut metadata = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let model = MlpClassifier::from_parts(weights, biases, local_map, part_index)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            model,
            class_count,
            k,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }
}
