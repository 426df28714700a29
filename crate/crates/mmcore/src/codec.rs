//! Pixel-latent autoencoder stub and the conditioning connector.
//!
//! The codec is a deterministic per-patch linear autoencoder standing in
//! for a pretrained VAE: with the orthonormal init the decoder is the
//! encoder transpose and reconstruction is exact. It supplies the dense
//! image-latent tokens that serve as history context and diffusion targets.
//!
//! The connector projects visual latent embeddings into the diffusion
//! conditioning space. Its depth and width are the knobs of the capacity
//! ablation; hidden layers are residual so deeper stacks strictly contain
//! shallower ones.

use crate::error::{Error, Result};
use crate::params::{ParamSet, SharedTensor};
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::{patchify, unpatchify};

const SALT_CODEC: u64 = 0x636f_6463; // "codc"
const SALT_CONN: u64 = 0x636f_6e6e; // "conn"

/// Deterministic patch autoencoder.
pub struct LatentCodec {
    patch: usize,
    latent_dim: usize,
    enc: SharedTensor,
    dec: SharedTensor,
    set: ParamSet,
}

impl LatentCodec {
    /// Orthogonal encoder with transposed decoder: decode(encode(x)) == x
    /// up to floating-point roundoff. Requires latent_dim == patch^2.
    pub fn new_orthonormal(patch: usize, seed: u64) -> Self {
        let n = patch * patch;
        let mut rng = DetRng::derive(seed, SALT_CODEC);
        let q = random_orthogonal(n, &mut rng);
        let mut set = ParamSet::new();
        let enc = set.register("codec.enc", q.clone());
        let dec = set.register("codec.dec", q.transpose());
        // The pipeline treats the codec as a fixed stub.
        set.set_requires_grad(false);
        Self {
            patch,
            latent_dim: n,
            enc,
            dec,
            set,
        }
    }

    /// Random init for the trained-reconstruction path.
    pub fn new_random(patch: usize, latent_dim: usize, seed: u64) -> Self {
        let n = patch * patch;
        let mut rng = DetRng::derive(seed, SALT_CODEC);
        let mut set = ParamSet::new();
        let enc = set.register(
            "codec.enc",
            Tensor::randn(vec![n, latent_dim], 1.0 / (n as f64).sqrt(), &mut rng),
        );
        let dec = set.register(
            "codec.dec",
            Tensor::randn(vec![latent_dim, n], 1.0 / (latent_dim as f64).sqrt(), &mut rng),
        );
        Self {
            patch,
            latent_dim,
            enc,
            dec,
            set,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Latent tokens per image of the given side length.
    pub fn tokens_per_image(&self, image_size: usize) -> usize {
        (image_size / self.patch) * (image_size / self.patch)
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    /// [Z x latent_dim] latents; pure function of the image.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let patches = patchify(image, self.patch)?;
        patches.matmul(&self.enc.borrow())
    }

    /// Invert [Z x latent_dim] latents back to a [1 x S x S] image.
    pub fn decode(&self, latents: &Tensor, image_size: usize) -> Result<Tensor> {
        let grid = image_size / self.patch;
        if latents.rows() != grid * grid || latents.cols() != self.latent_dim {
            return Err(Error::Config(format!(
                "latents {:?} do not decode into {image_size}x{image_size} with patch {}",
                latents.shape(),
                self.patch
            )));
        }
        let patches = latents.matmul(&self.dec.borrow())?;
        unpatchify(&patches, self.patch, image_size)
    }

    /// Fit encoder and decoder on reconstruction MSE. Returns the final
    /// epoch's mean squared error.
    pub fn train_reconstruction(
        &self,
        images: &[Tensor],
        steps: usize,
        lr: f64,
    ) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Contract("no training images".into()));
        }
        self.set.set_requires_grad(true);
        let mut opt = crate::trainer::Adam::new(
            crate::trainer::AdamConfig { lr, ..Default::default() },
            &self.set.trainable(),
        );
        // Full batch: the whole corpus patchified into one matrix.
        let mut rows = Vec::new();
        let mut n_rows = 0;
        for image in images {
            let p = patchify(image, self.patch)?;
            n_rows += p.rows();
            rows.extend_from_slice(p.data());
        }
        let patches = Tensor::from_vec(vec![n_rows, self.patch * self.patch], rows)?;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let x = tape.constant(&patches);
            let e = tape.leaf(&self.enc);
            let d = tape.leaf(&self.dec);
            let z = tape.matmul(x, e)?;
            let recon = tape.matmul(z, d)?;
            let loss = tape.mse_against(recon, &patches)?;
            tape.backward(loss)?;
            opt.step(&self.set.trainable())?;
        }
        self.set.set_requires_grad(false);
        // Mean over the corpus with the final weights.
        let mut total = 0.0;
        for image in images {
            let recon = self.decode(&self.encode(image)?, image.shape()[1])?;
            total += recon.mse(image)?;
        }
        Ok(total / images.len() as f64)
    }
}

/// Ordered Gram-Schmidt on a seeded Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut DetRng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = vec![0.0; n];
        rng.fill_normal(&mut v, 1.0);
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially impossible, redraw
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        rows.push(v);
    }
    Tensor::from_vec(vec![n, n], rows.concat()).expect("orthogonal basis is finite")
}

/// How connector weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectorInit {
    Seeded,
    /// Identity weights; only valid for depth 1 with equal dims.
    Identity,
}

/// Projection from visual-latent space into the diffusion conditioning
/// space. `depth` counts linear layers: depth 0 is a pass-through (the
/// connector-free configuration, dims must match), depth 1 a single linear
/// map, and depth >= 2 inserts residual tanh blocks at `width` channels.
pub struct Connector {
    in_dim: usize,
    out_dim: usize,
    width: usize,
    depth: usize,
    layers: Vec<SharedTensor>,
    set: ParamSet,
}

impl Connector {
    pub fn new(
        in_dim: usize,
        width: usize,
        out_dim: usize,
        depth: usize,
        seed: u64,
        init: ConnectorInit,
    ) -> Result<Self> {
        if depth == 0 && in_dim != out_dim {
            return Err(Error::Config(format!(
                "pass-through connector needs equal dims, got {in_dim} vs {out_dim}"
            )));
        }
        if init == ConnectorInit::Identity && !(depth == 1 && in_dim == out_dim) {
            return Err(Error::Config(
                "identity init requires depth 1 with equal dims".into(),
            ));
        }
        let mut rng = DetRng::derive(seed, SALT_CONN);
        let mut set = ParamSet::new();
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let (r, c) = match (l, depth) {
                (_, 1) => (in_dim, out_dim),
                (0, _) => (in_dim, width),
                (l, d) if l == d - 1 => (width, out_dim),
                _ => (width, width),
            };
            let t = if init == ConnectorInit::Identity {
                let mut id = Tensor::zeros(vec![r, c]);
                for i in 0..r.min(c) {
                    id.data_mut()[i * c + i] = 1.0;
                }
                id
            } else {
                Tensor::randn(vec![r, c], 1.0 / (r as f64).sqrt(), &mut rng)
            };
            layers.push(set.register(&format!("conn.l{l}.w"), t));
        }
        Ok(Self {
            in_dim,
            out_dim,
            width,
            depth,
            layers,
            set,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    /// Project [N x in_dim] rows to [N x out_dim]. Hidden width-to-width
    /// layers are residual: h + tanh(h W).
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.cols(x) != self.in_dim {
            return Err(Error::Dimension {
                op: "connector",
                left: vec![tape.cols(x)],
                right: vec![self.in_dim],
            });
        }
        if self.depth == 0 {
            return Ok(x);
        }
        let mut h = x;
        for (l, w) in self.layers.iter().enumerate() {
            let wv = tape.leaf(w);
            let last = l == self.depth - 1;
            let square_hidden = l > 0 && !last;
            if square_hidden {
                let pre = tape.matmul(h, wv)?;
                let act = tape.tanh(pre)?;
                h = tape.add(h, act)?;
            } else {
                h = tape.matmul(h, wv)?;
                if !last {
                    h = tape.tanh(h)?;
                }
            }
        }
        Ok(h)
    }

    /// Eager version for eval paths.
    pub fn apply_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = tape.constant(x);
        let out = self.apply(&mut tape, v)?;
        Ok(tape.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_pattern;
    use crate::rng::DetRng;

    #[test]
    fn orthonormal_roundtrip_is_exact() {
        let codec = LatentCodec::new_orthonormal(4, 0);
        for class in 0..8 {
            let img = render_pattern(class, 16);
            let back = codec.decode(&codec.encode(&img).unwrap(), 16).unwrap();
            let max_err = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-10, "class {class}: {max_err}");
        }
    }

    #[test]
    fn zero_image_zero_latents() {
        let codec = LatentCodec::new_orthonormal(4, 1);
        let z = codec.encode(&Tensor::zeros(vec![1, 16, 16])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let codec = LatentCodec::new_orthonormal(5, 0);
        assert!(codec.encode(&Tensor::zeros(vec![1, 16, 16])).is_err());
    }

    #[test]
    fn trained_codec_reconstructs() {
        let codec = LatentCodec::new_random(4, 16, 3);
        let images: Vec<Tensor> = (0..8).map(|c| render_pattern(c, 16)).collect();
        let mse = codec.train_reconstruction(&images, 1200, 1e-2).unwrap();
        assert!(mse < 1e-3, "reconstruction mse {mse}");
    }

    #[test]
    fn connector_depths_share_output_shape() {
        let mut rng = DetRng::new(2);
        let x = Tensor::randn(vec![4, 32], 1.0, &mut rng);
        for depth in [2usize, 3, 6] {
            let conn = Connector::new(32, 64, 48, depth, 0, ConnectorInit::Seeded).unwrap();
            let y = conn.apply_plain(&x).unwrap();
            assert_eq!(y.shape(), &[4, 48], "depth {depth}");
        }
    }

    #[test]
    fn identity_single_layer_passes_through() {
        let mut rng = DetRng::new(3);
        let x = Tensor::randn(vec![3, 16], 1.0, &mut rng);
        let conn = Connector::new(16, 16, 16, 1, 0, ConnectorInit::Identity).unwrap();
        let y = conn.apply_plain(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depth_zero_requires_equal_dims() {
        assert!(Connector::new(32, 64, 48, 0, 0, ConnectorInit::Seeded).is_err());
        let conn = Connector::new(32, 64, 32, 0, 0, ConnectorInit::Seeded).unwrap();
        let mut rng = DetRng::new(4);
        let x = Tensor::randn(vec![2, 32], 1.0, &mut rng);
        assert_eq!(conn.apply_plain(&x).unwrap().data(), x.data());
    }

    #[test]
    fn connector_is_pure() {
        let conn = Connector::new(8, 16, 8, 3, 7, ConnectorInit::Seeded).unwrap();
        let mut rng = DetRng::new(5);
        let x = Tensor::randn(vec![2, 8], 1.0, &mut rng);
        let a = conn.apply_plain(&x).unwrap();
        let b = conn.apply_plain(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
