//! Single-scale grid detectors in two capacity presets, plus the one-layer
//! adaptation block used to align student feature channels to the teacher's
//! during distillation. The adaptation block is never part of the validation
//! path.

use crate::error::{Error, Result};
use crate::numcore::{kernels, Tape, Tensor, Var};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const IMAGE_SIZE: usize = 64;
pub const GRID: usize = 8;
pub const SLOTS: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    Teacher,
    Student,
}

impl ArchPreset {
    /// Backbone channel plan; `true` marks a 2x max-pool after the block.
    fn plan(self) -> Vec<(usize, bool)> {
        match self {
            // Three pools bring 64px input to the 8x8 grid.
            ArchPreset::Teacher => vec![(16, true), (32, true), (64, true), (64, false)],
            ArchPreset::Student => vec![(8, true), (16, true), (16, true)],
        }
    }
}

impl std::fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchPreset::Teacher => write!(f, "teacher"),
            ArchPreset::Student => write!(f, "student"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor, // [out, in, k, k]
    pub bias: Tensor,   // [out]
    pub stride: usize,
    pub pad: usize,
    /// 2x max-pool after activation when true.
    pub pool: bool,
}

impl ConvLayer {
    fn he_init(out_ch: usize, in_ch: usize, ksize: usize, pool: bool, rng: &mut rng::Rng64) -> Self {
        let fan_in = (in_ch * ksize * ksize) as f64;
        ConvLayer {
            weight: Tensor::randn(&[out_ch, in_ch, ksize, ksize], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[out_ch]),
            stride: 1,
            pad: ksize / 2,
            pool,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Backbone + 1x1 head producing `[K, K, B, 5+Nc]` logits per image.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub arch: ArchPreset,
    pub k: usize,
    pub b: usize,
    pub nc: usize,
    pub image_size: usize,
    pub seed: u64,
    pub backbone: Vec<ConvLayer>,
    pub head: ConvLayer,
}

/// Build a detector preset with He-style initialization from `seed`.
pub fn build_model(arch: ArchPreset, nc: usize, seed: u64) -> Result<DetectorModel> {
    if nc == 0 {
        return Err(Error::invalid("build_model", "Nc must be >= 1"));
    }
    let mut r = rng::stream(seed, "init", arch as u64);
    let mut backbone = Vec::new();
    let mut in_ch = 3;
    for (out_ch, pool) in arch.plan() {
        backbone.push(ConvLayer::he_init(out_ch, in_ch, 3, pool, &mut r));
        in_ch = out_ch;
    }
    let head_out = SLOTS * (5 + nc);
    let head = ConvLayer::he_init(head_out, in_ch, 1, false, &mut r);
    Ok(DetectorModel {
        arch,
        k: GRID,
        b: SLOTS,
        nc,
        image_size: IMAGE_SIZE,
        seed,
        backbone,
        head,
    })
}

impl DetectorModel {
    pub fn feature_channels(&self) -> usize {
        self.backbone.last().unwrap().out_channels()
    }

    /// Parameters in registry order (backbone then head, weight then bias).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.backbone {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.backbone {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Replace all parameters from a registry-order snapshot.
    pub fn load_params(&mut self, snapshot: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != snapshot.len() {
            return Err(Error::invalid(
                "load_params",
                format!("{} tensors, expected {}", snapshot.len(), params.len()),
            ));
        }
        for (p, s) in params.iter_mut().zip(snapshot) {
            if p.shape() != s.shape() {
                return Err(Error::shape("load_params", "parameter shape changed"));
            }
            **p = s.clone();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    fn check_batch(&self, batch_shape: &[usize]) -> Result<()> {
        match batch_shape {
            &[_, 3, h, w] if h == self.image_size && w == self.image_size => Ok(()),
            other => Err(Error::shape(
                "forward",
                format!(
                    "expected [N, 3, {}, {}], got {:?}",
                    self.image_size, self.image_size, other
                ),
            )),
        }
    }

    /// Register parameters on a tape for one forward/backward episode.
    pub fn bind(&self, tape: &mut Tape) -> BoundDetector {
        let layers = self
            .backbone
            .iter()
            .map(|l| BoundConv::bind(l, tape))
            .collect();
        BoundDetector {
            layers,
            head: BoundConv::bind(&self.head, tape),
            k: self.k,
            b: self.b,
            nc: self.nc,
            image_size: self.image_size,
        }
    }

    /// No-grad forward pass: (features [N, Cf, K, K], raw [N, K, K, B, 5+Nc]).
    pub fn infer(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_batch(batch.shape())?;
        let mut x = batch.clone();
        for layer in &self.backbone {
            x = kernels::conv2d_fwd(&x, &layer.weight, &layer.bias, layer.stride, layer.pad)?;
            x = kernels::leaky_relu_fwd(&x, LEAKY_SLOPE)?;
            if layer.pool {
                x = kernels::max_pool2d_fwd(&x, 2)?.0;
            }
        }
        let features = x;
        let head = kernels::conv2d_fwd(
            &features,
            &self.head.weight,
            &self.head.bias,
            self.head.stride,
            self.head.pad,
        )?;
        let n = head.shape()[0];
        let raw = kernels::permute_fwd(&head, &[0, 2, 3, 1])?
            .reshape(&[n, self.k, self.k, self.b, 5 + self.nc])?;
        Ok((features, raw))
    }
}

struct BoundConv {
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
    pool: bool,
}

impl BoundConv {
    fn bind(layer: &ConvLayer, tape: &mut Tape) -> Self {
        BoundConv {
            weight: tape.leaf(layer.weight.clone()),
            bias: tape.leaf(layer.bias.clone()),
            stride: layer.stride,
            pad: layer.pad,
            pool: layer.pool,
        }
    }
}

/// A detector's parameters registered on a tape.
pub struct BoundDetector {
    layers: Vec<BoundConv>,
    head: BoundConv,
    k: usize,
    b: usize,
    nc: usize,
    image_size: usize,
}

impl BoundDetector {
    /// Tracked forward pass mirroring [`DetectorModel::infer`].
    pub fn forward(&self, tape: &mut Tape, batch: Var) -> Result<(Var, Var)> {
        let shape = tape.value(batch).shape();
        match shape {
            &[_, 3, h, w] if h == self.image_size && w == self.image_size => {}
            other => {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "expected [N, 3, {}, {}], got {:?}",
                        self.image_size, self.image_size, other
                    ),
                ))
            }
        }
        let n = shape[0];
        let mut x = batch;
        for layer in &self.layers {
            x = tape.conv2d(x, layer.weight, layer.bias, layer.stride, layer.pad)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
            if layer.pool {
                x = tape.max_pool2d(x, 2)?;
            }
        }
        let features = x;
        let head = tape.conv2d(
            features,
            self.head.weight,
            self.head.bias,
            self.head.stride,
            self.head.pad,
        )?;
        let perm = tape.permute(head, &[0, 2, 3, 1])?;
        let raw = tape.reshape(perm, &[n, self.k, self.k, self.b, 5 + self.nc])?;
        Ok((features, raw))
    }

    /// Gradients in registry order, None where backward never reached.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(tape.grad_opt(layer.weight));
            out.push(tape.grad_opt(layer.bias));
        }
        out.push(tape.grad_opt(self.head.weight));
        out.push(tape.grad_opt(self.head.bias));
        out
    }
}

/// One 1x1 convolution mapping student feature channels to teacher feature
/// channels. Used only while distilling.
#[derive(Clone, Debug)]
pub struct AdaptationLayer {
    pub conv: ConvLayer,
}

impl AdaptationLayer {
    pub fn new(in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "adapt", 0);
        AdaptationLayer {
            conv: ConvLayer::he_init(out_ch, in_ch, 1, false, &mut r),
        }
    }

    /// Square identity mapping, for tests.
    pub fn identity(ch: usize) -> Self {
        let mut weight = Tensor::zeros(&[ch, ch, 1, 1]);
        for c in 0..ch {
            weight.data_mut()[c * ch + c] = 1.0;
        }
        AdaptationLayer {
            conv: ConvLayer {
                weight,
                bias: Tensor::zeros(&[ch]),
                stride: 1,
                pad: 0,
                pool: false,
            },
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.conv.weight, &self.conv.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.conv.weight, &mut self.conv.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdaptation {
        BoundAdaptation {
            weight: tape.leaf(self.conv.weight.clone()),
            bias: tape.leaf(self.conv.bias.clone()),
        }
    }

    /// No-grad adaptation of [N, Cs, K, K] features.
    pub fn infer(&self, features: &Tensor) -> Result<Tensor> {
        kernels::conv2d_fwd(features, &self.conv.weight, &self.conv.bias, 1, 0)
    }
}

pub struct BoundAdaptation {
    weight: Var,
    bias: Var,
}

impl BoundAdaptation {
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        tape.conv2d(features, self.weight, self.bias, 1, 0)
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        vec![tape.grad_opt(self.weight), tape.grad_opt(self.bias)]
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    arch: ArchPreset,
    k: usize,
    b: usize,
    nc: usize,
    image_size: usize,
    seed: u64,
    param_count: usize,
}

/// Write a checkpoint: one JSON manifest line followed by the parameters as
/// a flat little-endian f64 blob in registry order.
pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        format: 1,
        arch: model.arch,
        k: model.k,
        b: model.b,
        nc: model.nc,
        image_size: model.image_size,
        seed: model.seed,
        param_count: model.param_count(),
    };
    let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    for p in model.params() {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorModel> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        offset: "manifest".into(),
        detail: "missing manifest line".into(),
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: "manifest".into(),
            detail: e.to_string(),
        })?;
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.param_count * 8 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: format!("byte {}", nl + 1),
            detail: format!(
                "blob holds {} bytes, manifest promises {}",
                blob.len(),
                manifest.param_count * 8
            ),
        });
    }
    let mut model = build_model(manifest.arch, manifest.nc, manifest.seed)?;
    let mut cursor = 0usize;
    for p in model.params_mut() {
        for v in p.data_mut() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&blob[cursor..cursor + 8]);
            *v = f64::from_le_bytes(buf);
            cursor += 8;
        }
    }
    Ok(model)
}

/// Convenience used by tests and the CLI to keep checkpoint writes atomic.
pub fn save_checkpoint_atomic(model: &DetectorModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(model, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    // Flush directory metadata on a best-effort basis.
    if let Some(dir) = path.parent() {
        if let Ok(d) = std::fs::File::open(dir) {
            let _ = d.sync_all();
        }
    }
    let _ = std::io::stdout().flush();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn student_is_much_smaller_than_teacher() {
        let teacher = build_model(ArchPreset::Teacher, 2, 1).unwrap();
        let student = build_model(ArchPreset::Student, 2, 1).unwrap();
        assert!(
            student.param_count() < teacher.param_count() / 5,
            "student {} vs teacher {}",
            student.param_count(),
            teacher.param_count()
        );
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_model(ArchPreset::Student, 2, 9).unwrap();
        let b = build_model(ArchPreset::Student, 2, 9).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = build_model(ArchPreset::Student, 2, 10).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn forward_shapes_and_finite_logits() {
        for arch in [ArchPreset::Teacher, ArchPreset::Student] {
            let m = build_model(arch, 2, 3).unwrap();
            let batch = Tensor::zeros(&[2, 3, IMAGE_SIZE, IMAGE_SIZE]);
            let (features, raw) = m.infer(&batch).unwrap();
            assert_eq!(
                features.shape(),
                &[2, m.feature_channels(), GRID, GRID],
                "{arch}"
            );
            assert_eq!(raw.shape(), &[2, GRID, GRID, SLOTS, 7]);
            assert!(raw.all_finite());
        }
    }

    #[test]
    fn tape_forward_matches_infer() {
        let m = build_model(ArchPreset::Student, 2, 5).unwrap();
        let mut rng = crate::rng::stream(5, "fwd", 0);
        let batch = Tensor::rand_uniform(&[1, 3, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0, &mut rng);
        let (f1, r1) = m.infer(&batch).unwrap();
        let mut tape = Tape::new();
        let bv = tape.constant(batch);
        let bound = m.bind(&mut tape);
        let (f2, r2) = bound.forward(&mut tape, bv).unwrap();
        assert_eq!(f1.data(), tape.value(f2).data());
        assert_eq!(r1.data(), tape.value(r2).data());
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let m = build_model(ArchPreset::Student, 2, 5).unwrap();
        assert!(m.infer(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
        assert!(m.infer(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
    }

    #[test]
    fn adaptation_identity_and_zero() {
        let mut rng = crate::rng::stream(5, "adapt-test", 0);
        let f = Tensor::rand_uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let id = AdaptationLayer::identity(4);
        assert_eq!(id.infer(&f).unwrap().data(), f.data());

        let mut zero = AdaptationLayer::new(4, 6, 0);
        zero.conv.weight = Tensor::zeros(&[6, 4, 1, 1]);
        zero.conv.bias = Tensor::zeros(&[6]);
        assert!(zero.infer(&f).unwrap().data().iter().all(|&v| v == 0.0));

        // Channel mismatch is rejected.
        let a = AdaptationLayer::new(8, 6, 0);
        assert!(a.infer(&f).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = build_model(ArchPreset::Teacher, 3, 17).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, m.arch);
        assert_eq!(loaded.nc, m.nc);
        for (a, b) in m.params().iter().zip(loaded.params()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }
}
