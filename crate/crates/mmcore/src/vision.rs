//! Frozen vision encoder stub and grid-pooled distillation targets.
//!
//! The stub is patchify + a fixed seeded random projection + tanh. It is
//! never trained: its weights live outside every parameter set, so no
//! gradient can reach them, and the same seed always rebuilds the same
//! weights. Average pooling onto a KxK grid yields the target features the
//! query tokens are distilled toward.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

const STUB_SALT: u64 = 0x7669_7374; // "vist"

/// Frozen patch encoder.
#[derive(Debug, Clone)]
pub struct VisionStub {
    patch: usize,
    dim: usize,
    /// [patch*patch x dim] fixed projection.
    weights: Tensor,
    /// [1 x dim] fixed bias. Nonzero by default so empty background patches
    /// still carry a direction (distillation targets need positive norms).
    bias: Tensor,
}

impl VisionStub {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = DetRng::derive(seed, STUB_SALT);
        let n_in = patch * patch;
        let weights = Tensor::randn(vec![n_in, dim], 1.0 / (n_in as f64).sqrt(), &mut rng);
        let bias = Tensor::randn(vec![1, dim], 0.3, &mut rng);
        Self {
            patch,
            dim,
            weights,
            bias,
        }
    }

    /// Stub with the bias zeroed out. Background patches then project to
    /// exactly zero rows, which some tests rely on.
    pub fn new_zero_bias(patch: usize, dim: usize, seed: u64) -> Self {
        let mut stub = Self::new(patch, dim, seed);
        stub.bias = Tensor::zeros(vec![1, dim]);
        stub
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn embed_dim(&self) -> usize {
        self.dim
    }

    /// Bit-exact fingerprint of the stub weights; frozenness checks compare
    /// it across training runs.
    pub fn weight_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &v in self.weights.data().iter().chain(self.bias.data()) {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    /// Encode an image into per-patch features: tanh(patch_pixels . W + b),
    /// one row per patch in row-major patch-grid order.
    pub fn encode_patches(&self, image: &Tensor) -> Result<Tensor> {
        let patches = patchify(image, self.patch)?;
        let mut feats = patches.matmul(&self.weights)?;
        let d = self.dim;
        for (i, v) in feats.data_mut().iter_mut().enumerate() {
            *v = (*v + self.bias.data()[i % d]).tanh();
        }
        Ok(feats)
    }
}

/// Split a [1 x S x S] (or [S x S]) image into flattened patches:
/// [(S/p)^2 x p*p], patches in row-major grid order, pixels row-major
/// within each patch.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [hh, ww] => (*hh, *ww),
        [1, hh, ww] => (*hh, *ww),
        other => {
            return Err(Error::Config(format!(
                "expected a grayscale image, got shape {other:?}"
            )))
        }
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * patch * patch);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let row = py * patch + dy;
                let start = row * w + px * patch;
                out.extend_from_slice(&src[start..start + patch]);
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, patch * patch], out)
}

/// Reassemble a patchified matrix back into a [1 x S x S] image.
pub fn unpatchify(patches: &Tensor, patch: usize, size: usize) -> Result<Tensor> {
    let grid = size / patch;
    if patches.rows() != grid * grid || patches.cols() != patch * patch {
        return Err(Error::Config(format!(
            "patch matrix {:?} does not reassemble into {size}x{size}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; size * size];
    let src = patches.data();
    let pcols = patch * patch;
    for py in 0..grid {
        for px in 0..grid {
            let prow = (py * grid + px) * pcols;
            for dy in 0..patch {
                for dx in 0..patch {
                    out[(py * patch + dy) * size + px * patch + dx] =
                        src[prow + dy * patch + dx];
                }
            }
        }
    }
    Tensor::from_vec(vec![1, size, size], out)
}

/// KxK grid of pooled target features.
#[derive(Debug, Clone)]
pub struct TargetGrid {
    /// [K*K x dim] pooled rows in row-major cell order.
    pub features: Tensor,
    pub k: usize,
}

impl TargetGrid {
    pub fn n(&self) -> usize {
        self.k * self.k
    }

    /// Verify every row carries a direction (positive L2 norm).
    pub fn validate(&self) -> Result<()> {
        let (r, c) = (self.features.rows(), self.features.cols());
        for i in 0..r {
            let norm: f64 = self.features.data()[i * c..(i + 1) * c]
                .iter()
                .map(|v| v * v)
                .sum();
            if norm == 0.0 {
                return Err(Error::DegenerateInput { what: "target grid", row: i });
            }
        }
        Ok(())
    }
}

/// Average-pool [P x dim] patch features onto a KxK grid. P must be a
/// perfect square whose side is divisible by K. Pooling is linear, so grid
/// targets inherit any linear structure of the features.
pub fn pool_grid(features: &Tensor, k: usize) -> Result<TargetGrid> {
    let p = features.rows();
    let dim = features.cols();
    let side = (p as f64).sqrt().round() as usize;
    if side * side != p {
        return Err(Error::Config(format!("{p} patches is not a square grid")));
    }
    if k == 0 || side % k != 0 {
        return Err(Error::Config(format!(
            "grid side {side} not divisible by K={k}"
        )));
    }
    let cell = side / k;
    let norm = 1.0 / (cell * cell) as f64;
    let src = features.data();
    let mut out = vec![0.0; k * k * dim];
    for cy in 0..k {
        for cx in 0..k {
            let dst = (cy * k + cx) * dim;
            for dy in 0..cell {
                for dx in 0..cell {
                    let patch_row = (cy * cell + dy) * side + cx * cell + dx;
                    for d in 0..dim {
                        out[dst + d] += src[patch_row * dim + d];
                    }
                }
            }
            for d in 0..dim {
                out[dst + d] *= norm;
            }
        }
    }
    Ok(TargetGrid {
        features: Tensor::from_vec(vec![k * k, dim], out)?,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_pattern;
    use crate::rng::DetRng;

    #[test]
    fn patch_count_arithmetic() {
        let stub = VisionStub::new(4, 32, 0);
        let img = render_pattern(2, 16);
        let feats = stub.encode_patches(&img).unwrap();
        assert_eq!(feats.shape(), &[16, 32]);
    }

    #[test]
    fn zero_image_zero_bias_gives_bias_rows() {
        let stub = VisionStub::new_zero_bias(4, 8, 3);
        let img = Tensor::zeros(vec![1, 16, 16]);
        let feats = stub.encode_patches(&img).unwrap();
        assert!(feats.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_bias_keeps_background_rows_nonzero() {
        let stub = VisionStub::new(4, 8, 3);
        let img = Tensor::zeros(vec![1, 16, 16]);
        let feats = stub.encode_patches(&img).unwrap();
        let grid = pool_grid(&feats, 2).unwrap();
        grid.validate().unwrap();
    }

    #[test]
    fn single_patch_difference_is_local() {
        let stub = VisionStub::new(4, 16, 7);
        let a = render_pattern(6, 16);
        let mut b = a.clone();
        // Perturb one pixel inside patch (1, 2) of the 4x4 patch grid.
        let (py, px) = (1usize, 2usize);
        let pixel = (py * 4 + 1) * 16 + px * 4 + 2;
        b.data_mut()[pixel] = 1.0 - b.data()[pixel];
        let fa = stub.encode_patches(&a).unwrap();
        let fb = stub.encode_patches(&b).unwrap();
        let changed_patch = py * 4 + px;
        for row in 0..16 {
            let ra = &fa.data()[row * 16..(row + 1) * 16];
            let rb = &fb.data()[row * 16..(row + 1) * 16];
            if row == changed_patch {
                assert!(ra != rb, "perturbed patch row should differ");
            } else {
                assert_eq!(ra, rb, "row {row} should be untouched");
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let stub = VisionStub::new(5, 8, 0);
        let img = Tensor::zeros(vec![1, 16, 16]);
        assert!(stub.encode_patches(&img).is_err());
    }

    #[test]
    fn pool_identity_when_k_equals_side() {
        let mut rng = DetRng::new(4);
        let feats = Tensor::randn(vec![16, 8], 1.0, &mut rng);
        let grid = pool_grid(&feats, 4).unwrap();
        assert_eq!(grid.features.data(), feats.data());
    }

    #[test]
    fn pool_k1_is_columnwise_mean() {
        let mut rng = DetRng::new(5);
        let feats = Tensor::randn(vec![16, 6], 1.0, &mut rng);
        let grid = pool_grid(&feats, 1).unwrap();
        for d in 0..6 {
            let mean: f64 =
                (0..16).map(|r| feats.data()[r * 6 + d]).sum::<f64>() / 16.0;
            assert!((grid.features.data()[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_k8_gives_n64() {
        // Patch size 2 on a 16x16 image gives an 8x8 patch grid.
        let stub = VisionStub::new(2, 16, 1);
        let feats = stub.encode_patches(&render_pattern(3, 16)).unwrap();
        assert_eq!(feats.rows(), 64);
        let grid = pool_grid(&feats, 8).unwrap();
        assert_eq!(grid.n(), 64);
        grid.validate().unwrap();
    }

    #[test]
    fn pooling_is_linear() {
        let mut rng = DetRng::new(6);
        let a = Tensor::randn(vec![16, 5], 1.0, &mut rng);
        let b = Tensor::randn(vec![16, 5], 1.0, &mut rng);
        let sum = a.add(&b).unwrap();
        let pa = pool_grid(&a, 2).unwrap();
        let pb = pool_grid(&b, 2).unwrap();
        let psum = pool_grid(&sum, 2).unwrap();
        for ((x, y), z) in pa
            .features
            .data()
            .iter()
            .zip(pb.features.data())
            .zip(psum.features.data())
        {
            assert!((x + y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let img = render_pattern(7, 16);
        let p = patchify(&img, 4).unwrap();
        let back = unpatchify(&p, 4, 16).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = VisionStub::new(4, 32, 11);
        let b = VisionStub::new(4, 32, 11);
        assert_eq!(a.weight_hash(), b.weight_hash());
        let c = VisionStub::new(4, 32, 12);
        assert_ne!(a.weight_hash(), c.weight_hash());
    }
}
