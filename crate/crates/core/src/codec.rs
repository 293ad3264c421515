//! Deterministic, exactly invertible toy video codec.
//!
//! Frames are grouped four at a time along the temporal axis (the first frame is
//! replicated into its own group), then each group is folded space-to-depth by a
//! factor of eight. A `T x 3 x H x W` video becomes a
//! `(T/4 + 1) x 768 x H/8 x W/8` latent, the same geometry as a causal video VAE
//! with 4x temporal and 8x spatial compression.
//!
//! Also hosts the reference-aware joint latent and the spatial patch
//! rearrangement used to turn latents into transformer tokens.

use mive_autograd::Matrix;
use ndarray::{s, Array4, Axis};

use crate::error::{MiveError, Result};
use crate::tensor::{Latent, Video};

pub const TEMPORAL_GROUP: usize = 4;
pub const SPATIAL_FACTOR: usize = 8;
pub const LATENT_CHANNELS: usize = 3 * SPATIAL_FACTOR * SPATIAL_FACTOR * TEMPORAL_GROUP;

/// `T' = floor(T/4) + 1`.
pub fn latent_frames(frames: usize) -> usize {
    frames / TEMPORAL_GROUP + 1
}

/// Frame count recovered by [`decode`]: `1 + 4 (T' - 1)`.
pub fn decoded_frames(latent_frames: usize) -> usize {
    1 + TEMPORAL_GROUP * (latent_frames - 1)
}

pub fn check_video_dims(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames % TEMPORAL_GROUP != 1 {
        return Err(MiveError::shape(format!(
            "frame count {frames} must be 1 mod {TEMPORAL_GROUP}"
        )));
    }
    if height == 0 || width == 0 || height % SPATIAL_FACTOR != 0 || width % SPATIAL_FACTOR != 0 {
        return Err(MiveError::shape(format!(
            "spatial size {height}x{width} must be a positive multiple of {SPATIAL_FACTOR}"
        )));
    }
    Ok(())
}

#[inline]
fn channel_index(frame_in_group: usize, colour: usize, dy: usize, dx: usize) -> usize {
    ((frame_in_group * 3 + colour) * SPATIAL_FACTOR + dy) * SPATIAL_FACTOR + dx
}

/// Encodes a video with `T = 1 (mod 4)` and spatial dims divisible by 8.
pub fn encode(video: &Video) -> Result<Latent> {
    let (t, h, w) = video.dims();
    check_video_dims(t, h, w)?;
    let (lt, lh, lw) = (latent_frames(t), h / SPATIAL_FACTOR, w / SPATIAL_FACTOR);
    let src = video.data();
    let mut out = Array4::<f64>::zeros((lt, LATENT_CHANNELS, lh, lw));
    for g in 0..lt {
        for f in 0..TEMPORAL_GROUP {
            let frame = if g == 0 { 0 } else { 1 + (g - 1) * TEMPORAL_GROUP + f };
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let ch = channel_index(f, c, y % SPATIAL_FACTOR, x % SPATIAL_FACTOR);
                        out[[g, ch, y / SPATIAL_FACTOR, x / SPATIAL_FACTOR]] = src[[frame, c, y, x]];
                    }
                }
            }
        }
    }
    Ok(Latent::new(out))
}

/// Exact inverse of [`encode`]. Frame 0 is read from the first replica of group 0.
pub fn decode(z: &Latent) -> Result<Video> {
    if z.has_ref_prefix {
        return Err(MiveError::shape(
            "cannot decode a latent that still carries a reference prefix",
        ));
    }
    if z.channels() != LATENT_CHANNELS {
        return Err(MiveError::shape(format!(
            "expected {LATENT_CHANNELS} latent channels, got {}",
            z.channels()
        )));
    }
    let (lt, lh, lw) = (z.frames(), z.height(), z.width());
    if lt == 0 {
        return Err(MiveError::shape("latent has no frames"));
    }
    let (t, h, w) = (decoded_frames(lt), lh * SPATIAL_FACTOR, lw * SPATIAL_FACTOR);
    let mut out = Array4::<f64>::zeros((t, 3, h, w));
    for frame in 0..t {
        let (g, f) = if frame == 0 {
            (0, 0)
        } else {
            (1 + (frame - 1) / TEMPORAL_GROUP, (frame - 1) % TEMPORAL_GROUP)
        };
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let ch = channel_index(f, c, y % SPATIAL_FACTOR, x % SPATIAL_FACTOR);
                    out[[frame, c, y, x]] = z.data[[g, ch, y / SPATIAL_FACTOR, x / SPATIAL_FACTOR]];
                }
            }
        }
    }
    Video::new(out)
}

/// Linear flow interpolation `(1 - t) z + t eps`; `t = 0` is clean data.
pub fn noise_latent(z: &Latent, t: f64, eps: &Latent) -> Result<Latent> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MiveError::invalid(format!("timestep {t} outside [0, 1]")));
    }
    if z.shape() != eps.shape() {
        return Err(MiveError::shape(format!(
            "noise shape {:?} does not match latent {:?}",
            eps.shape(),
            z.shape()
        )));
    }
    // Endpoints return their argument bit-exactly.
    let data = if t == 0.0 {
        z.data.clone()
    } else if t == 1.0 {
        eps.data.clone()
    } else {
        ndarray::Zip::from(&z.data)
            .and(&eps.data)
            .map_collect(|&a, &e| (1.0 - t) * a + t * e)
    };
    Ok(Latent {
        data,
        has_ref_prefix: z.has_ref_prefix,
    })
}

/// Reference-aware joint latent, `(T'+1) x 2C x H' x W'`.
///
/// Channels `[0, C)` hold the noisy-target branch `[z_ref; z_t]`, channels
/// `[C, 2C)` the control branch `[z_ref; z_src]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLatent {
    pub data: Array4<f64>,
    pub branch_channels: usize,
}

impl JointLatent {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// The noisy-target branch including its reference prefix.
    pub fn noisy_branch(&self) -> Latent {
        Latent {
            data: self
                .data
                .slice(s![.., ..self.branch_channels, .., ..])
                .to_owned(),
            has_ref_prefix: true,
        }
    }

    /// The control branch including its reference prefix.
    pub fn control_branch(&self) -> Latent {
        Latent {
            data: self
                .data
                .slice(s![.., self.branch_channels.., .., ..])
                .to_owned(),
            has_ref_prefix: true,
        }
    }
}

/// Builds the joint latent from a single-frame reference latent, the current
/// noisy target (or pure noise at inference) and the source latent.
pub fn build_joint(z_ref: &Latent, noisy: &Latent, z_src: &Latent) -> Result<JointLatent> {
    if z_ref.frames() != 1 {
        return Err(MiveError::shape(format!(
            "reference latent must have one frame, got {}",
            z_ref.frames()
        )));
    }
    let [_, c, h, w] = z_ref.shape();
    for (name, z) in [("noisy", noisy), ("source", z_src)] {
        if z.channels() != c || z.height() != h || z.width() != w {
            return Err(MiveError::shape(format!(
                "{name} latent {:?} incompatible with reference {:?}",
                z.shape(),
                z_ref.shape()
            )));
        }
    }
    if noisy.frames() != z_src.frames() {
        return Err(MiveError::shape(format!(
            "noisy ({}) and source ({}) latents differ in length",
            noisy.frames(),
            z_src.frames()
        )));
    }
    let frames = noisy.frames() + 1;
    let mut data = Array4::<f64>::zeros((frames, 2 * c, h, w));
    data.slice_mut(s![0..1, ..c, .., ..]).assign(&z_ref.data);
    data.slice_mut(s![1.., ..c, .., ..]).assign(&noisy.data);
    data.slice_mut(s![0..1, c.., .., ..]).assign(&z_ref.data);
    data.slice_mut(s![1.., c.., .., ..]).assign(&z_src.data);
    Ok(JointLatent {
        data,
        branch_channels: c,
    })
}

/// Spatio-temporal token grid of a patched latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn for_latent(frames: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(MiveError::shape(format!(
                "latent {height}x{width} not divisible by patch size {patch}"
            )));
        }
        Ok(Self {
            frames,
            rows: height / patch,
            cols: width / patch,
            patch,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    /// `N_v = frames * (H'/p) * (W'/p)`.
    pub fn num_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    /// `(frame, row, col)` of token `i` (temporal-major, then row-major).
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        let per = self.tokens_per_frame();
        (i / per, (i % per) / self.cols, i % self.cols)
    }
}

/// Rearranges `F x C x H' x W'` into `N_v x (C p^2)` tokens, each holding one
/// non-overlapping `p x p` patch ordered `(channel, dy, dx)`.
pub fn patch_split(data: &Array4<f64>, patch: usize) -> Result<(Matrix, PatchGrid)> {
    let sh = data.shape();
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let grid = PatchGrid::for_latent(f, h, w, patch)?;
    let width = c * patch * patch;
    let mut out = Matrix::zeros(grid.num_tokens(), width);
    for tok in 0..grid.num_tokens() {
        let (t, r, q) = grid.position(tok);
        let row = out.row_mut(tok);
        for ch in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    row[(ch * patch + dy) * patch + dx] =
                        data[[t, ch, r * patch + dy, q * patch + dx]];
                }
            }
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patch_split`]: `N_v x (C p^2)` tokens back to `F x C x H' x W'`.
pub fn unpatchify(tokens: &Matrix, grid: PatchGrid) -> Result<Array4<f64>> {
    let p = grid.patch;
    if tokens.rows() != grid.num_tokens() || tokens.cols() % (p * p) != 0 {
        return Err(MiveError::shape(format!(
            "token matrix {:?} does not fit grid {grid:?}",
            tokens.shape()
        )));
    }
    let c = tokens.cols() / (p * p);
    let mut out = Array4::<f64>::zeros((grid.frames, c, grid.rows * p, grid.cols * p));
    for tok in 0..grid.num_tokens() {
        let (t, r, q) = grid.position(tok);
        let row = tokens.row(tok);
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    out[[t, ch, r * p + dy, q * p + dx]] = row[(ch * p + dy) * p + dx];
                }
            }
        }
    }
    Ok(out)
}

/// Drops temporal index 0 (the reference prefix).
pub fn strip_reference(z: &Latent) -> Result<Latent> {
    if !z.has_ref_prefix || z.frames() < 2 {
        return Err(MiveError::shape("latent carries no reference prefix"));
    }
    Ok(Latent::new(z.data.slice(s![1.., .., .., ..]).to_owned()))
}

/// Standard-normal noise shaped like `like`.
pub fn sample_noise<R: rand::Rng + ?Sized>(like: &Latent, rng: &mut R) -> Latent {
    use rand_distr::{Distribution, StandardNormal};
    let data = Array4::from_shape_simple_fn(like.data.raw_dim(), || StandardNormal.sample(rng));
    Latent {
        data,
        has_ref_prefix: like.has_ref_prefix,
    }
}

/// Concatenates latents along time; used to prepend a reference frame.
pub fn prepend_reference(z_ref: &Latent, z: &Latent) -> Result<Latent> {
    let data = ndarray::concatenate(Axis(0), &[z_ref.data.view(), z.data.view()])
        .map_err(|e| MiveError::shape(e.to_string()))?;
    Ok(Latent {
        data,
        has_ref_prefix: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(t: usize, h: usize, w: usize, seed: u64) -> Video {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Video::new(Array4::from_shape_simple_fn((t, 3, h, w), || rng.random::<f64>())).unwrap()
    }

    #[test]
    fn latent_geometry_examples() {
        assert_eq!(latent_frames(81), 21);
        let z = encode(&random_video(9, 32, 32, 0)).unwrap();
        assert_eq!(z.shape(), [3, 768, 4, 4]);
        let single = encode(&random_video(1, 16, 24, 1)).unwrap();
        assert_eq!(single.shape(), [1, 768, 2, 3]);
        assert_eq!(decode(&single).unwrap().frames(), 1);
    }

    #[test]
    fn roundtrip_is_exact() {
        let v = random_video(9, 32, 32, 7);
        let back = decode(&encode(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        assert!(encode(&random_video(8, 32, 32, 0)).is_err());
        assert!(encode(&random_video(5, 30, 32, 0)).is_err());
        let bad = Latent::new(Array4::zeros((2, 10, 2, 2)));
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn noising_endpoints_and_midpoint() {
        let z = Latent::new(Array4::from_shape_vec((1, 2, 1, 1), vec![0.2, -1.0]).unwrap());
        let e = Latent::new(Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 3.0]).unwrap());
        assert_eq!(noise_latent(&z, 0.0, &e).unwrap(), z);
        assert_eq!(noise_latent(&z, 1.0, &e).unwrap(), e);
        let mid = noise_latent(&z, 0.5, &e).unwrap();
        assert_eq!(mid.data.iter().copied().collect::<Vec<_>>(), vec![0.6, 1.0]);
        assert!(noise_latent(&z, 1.5, &e).is_err());
    }

    #[test]
    fn joint_latent_layout() {
        let src = encode(&random_video(9, 32, 32, 2)).unwrap();
        let noisy = encode(&random_video(9, 32, 32, 3)).unwrap();
        let z_ref = encode(&random_video(1, 32, 32, 4)).unwrap();
        let joint = build_joint(&z_ref, &noisy, &src).unwrap();
        assert_eq!(joint.shape(), [4, 1536, 4, 4]);
        let c = LATENT_CHANNELS;
        assert_eq!(joint.data.slice(s![0..1, ..c, .., ..]), z_ref.data);
        assert_eq!(joint.data.slice(s![0..1, c.., .., ..]), z_ref.data);
        assert_eq!(joint.data.slice(s![1.., c.., .., ..]), src.data);
        assert_eq!(joint.data.slice(s![1.., ..c, .., ..]), noisy.data);
        assert!(build_joint(&src, &noisy, &src).is_err());
    }

    #[test]
    fn patch_tokens_and_inverse() {
        let z = encode(&random_video(9, 32, 32, 5)).unwrap();
        let z_ref = encode(&random_video(1, 32, 32, 6)).unwrap();
        let joint = build_joint(&z_ref, &z, &z).unwrap();
        let (tokens, grid) = patch_split(&joint.data, 2).unwrap();
        assert_eq!(grid.num_tokens(), 16);
        assert_eq!(tokens.shape(), (16, 1536 * 4));
        // token 0 is the top-left 2x2 patch of the reference frame
        for ch in [0, 17, 1535] {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                assert_eq!(tokens.get(0, (ch * 2 + dy) * 2 + dx), joint.data[[0, ch, dy, dx]]);
            }
        }
        assert_eq!(unpatchify(&tokens, grid).unwrap(), joint.data);
        assert!(patch_split(&Array4::zeros((1, 1, 3, 4)), 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shape_laws(groups in 0usize..5, hb in 1usize..5, wb in 1usize..5, seed in any::<u64>()) {
            let (t, h, w) = (1 + 4 * groups, 8 * hb, 8 * wb);
            let v = random_video(t, h, w, seed);
            let z = encode(&v).unwrap();
            prop_assert_eq!(z.shape(), [t / 4 + 1, LATENT_CHANNELS, h / 8, w / 8]);
            prop_assert_eq!(decode(&z).unwrap(), v);
        }
    }
}
