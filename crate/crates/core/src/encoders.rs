//! Deterministic stub encoders standing in for the pretrained image, face,
//! and text encoders, plus the identity-fusion block and the
//! motion-intensity embedding MLP.
//!
//! The stubs are seeded random projections: they keep the conditioning data
//! flow of the full system (and make identity similarity measurable) without
//! any pretrained weights. Every encoder is a pure function of
//! (input, seed) — repeated calls are bitwise identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention, matmul, mlp_forward, Activation, MlpParams, Tensor};
use crate::seeded::{derive_seed, rng_for, seeded_matrix};

pub const MAX_INTENSITY: f64 = 20.0;

/// Face bounding box in pixel coordinates: x/y is the top-left corner,
/// w/h the extent. Serialized as a `[x, y, w, h]` array in manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for FaceBox {
    fn from(v: [usize; 4]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<FaceBox> for [usize; 4] {
    fn from(b: FaceBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Reference image plus every identity embedding derived from it.
#[derive(Debug, Clone)]
pub struct IdentityBundle {
    pub ref_image: Tensor,
    pub face_crop: Tensor,
    /// Contextual token embeddings, k x d.
    pub e_clip: Tensor,
    /// Fine-grained identity embedding, 1 x d, unit L2 norm.
    pub e_arc: Tensor,
    /// Fused identity tokens, 1 x d_txt.
    pub c_id: Tensor,
}

impl IdentityBundle {
    pub fn new(
        ref_image: Tensor,
        face_crop: Tensor,
        e_clip: Tensor,
        e_arc: Tensor,
        c_id: Tensor,
        text_dim: usize,
    ) -> Result<Self> {
        let norm = e_arc.norm_l2();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange {
                what: "e_arc L2 norm",
                value: norm,
                lo: 1.0 - 1e-9,
                hi: 1.0 + 1e-9,
            });
        }
        let (_, cols) = c_id.dims2();
        if cols != text_dim {
            return Err(Error::ShapeMismatch {
                op: "IdentityBundle::new",
                detail: format!("c_id width {cols} != text dim {text_dim}"),
            });
        }
        Ok(Self {
            ref_image,
            face_crop,
            e_clip,
            e_arc,
            c_id,
        })
    }
}

/// Learnable maps of the identity-fusion block (kept at their seeded
/// initialization in the toy trainer).
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Linear map from the fused width to the text-embedding width.
    pub proj: Tensor,
}

/// Token embeddings of an action phrase, t x d_txt with t >= 1.
#[derive(Debug, Clone)]
pub struct ActionEmbedding {
    pub tokens: Tensor,
}

/// Motion-intensity embedding, 1 x d_txt, produced only from intensities
/// in [0, 20].
#[derive(Debug, Clone)]
pub struct MotionEmbedding {
    pub embedding: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub seed: u64,
    /// Number of contextual tokens k (must be a perfect square).
    pub context_tokens: usize,
    /// Width d of the contextual and identity embeddings.
    pub embed_dim: usize,
    /// Width d_txt of text/action/motion/fused embeddings.
    pub text_dim: usize,
    /// Square face-crop side the stub encoders consume.
    pub face_size: usize,
    pub face_channels: usize,
    /// Hidden width of the motion-intensity MLP.
    pub motion_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            context_tokens: 4,
            embed_dim: 64,
            text_dim: 64,
            face_size: 32,
            face_channels: 1,
            motion_hidden: 32,
        }
    }
}

/// All stub encoders behind one seeded table set. Stateless after
/// construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct StubEncoders {
    cfg: EncoderConfig,
    grid: usize,
    patch_len: usize,
    ctx_proj: Tensor,
    id_proj: Tensor,
    fusion: FusionParams,
    motion_mlp: MlpParams,
    null_identity: Tensor,
}

impl StubEncoders {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        let grid = (cfg.context_tokens as f64).sqrt().round() as usize;
        if grid * grid != cfg.context_tokens || grid == 0 {
            return Err(Error::Config(format!(
                "context_tokens must be a positive perfect square, got {}",
                cfg.context_tokens
            )));
        }
        if cfg.face_size % grid != 0 {
            return Err(Error::Config(format!(
                "face_size {} not divisible by patch grid {grid}",
                cfg.face_size
            )));
        }
        let patch = cfg.face_size / grid;
        let patch_len = patch * patch * cfg.face_channels;
        let d = cfg.embed_dim;
        let scale = 1.0 / (patch_len as f64).sqrt();
        let ctx_proj = seeded_matrix(cfg.seed, "ctx-projection", patch_len, d, scale);
        let id_proj = seeded_matrix(cfg.seed, "id-projection", patch_len, d, scale);
        let dscale = 1.0 / (d as f64).sqrt();
        let fusion = FusionParams {
            w_q: seeded_matrix(cfg.seed, "fusion-q", d, d, dscale),
            w_k: seeded_matrix(cfg.seed, "fusion-k", d, d, dscale),
            w_v: seeded_matrix(cfg.seed, "fusion-v", d, d, dscale),
            proj: seeded_matrix(cfg.seed, "fusion-proj", d, cfg.text_dim, dscale),
        };
        let h = cfg.motion_hidden;
        let motion_mlp = MlpParams::new(
            seeded_matrix(cfg.seed, "motion-w1", 1, h, 1.0),
            seeded_matrix(cfg.seed, "motion-b1", 1, h, 0.1),
            seeded_matrix(cfg.seed, "motion-w2", h, cfg.text_dim, 1.0 / (h as f64).sqrt()),
            seeded_matrix(cfg.seed, "motion-b2", 1, cfg.text_dim, 0.1),
            Activation::SigmoidGelu,
        )?;
        let tscale = 1.0 / (cfg.text_dim as f64).sqrt();
        let null_identity = seeded_matrix(cfg.seed, "null-identity", 1, cfg.text_dim, tscale);
        Ok(Self {
            cfg,
            grid,
            patch_len,
            ctx_proj,
            id_proj,
            fusion,
            motion_mlp,
            null_identity,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn fusion_params(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn motion_mlp(&self) -> &MlpParams {
        &self.motion_mlp
    }

    /// Isolate the face region and resize it to the encoder input size.
    /// Without a box, a central square covering 60% of the short side stands
    /// in for a detector.
    pub fn crop_face_region(&self, image: &Tensor, bbox: Option<FaceBox>) -> Result<Tensor> {
        crop_face_region(image, bbox, self.cfg.face_size, self.cfg.face_size)
    }

    /// Contextual identity embedding: k patch tokens through a seeded linear
    /// projection (no bias, so an all-zero image embeds to zero).
    pub fn encode_context(&self, face: &Tensor) -> Result<Tensor> {
        let patches = self.extract_patches(face)?;
        matmul(&patches, &self.ctx_proj)
    }

    /// Fine-grained identity embedding: patch tokens pooled to one row and
    /// L2-normalized. Doubles as the loss-side face embedding.
    pub fn encode_identity(&self, face: &Tensor) -> Result<Tensor> {
        let (emb, _) = self.encode_identity_cached(face)?;
        Ok(emb)
    }

    pub(crate) fn encode_identity_cached(&self, face: &Tensor) -> Result<(Tensor, IdentityEmbedCache)> {
        let patches = self.extract_patches(face)?;
        let rows = matmul(&patches, &self.id_proj)?;
        let (k, d) = rows.dims2();
        let mut pooled = vec![0.0; d];
        for p in 0..k {
            for j in 0..d {
                pooled[j] += rows.get2(p, j);
            }
        }
        for v in pooled.iter_mut() {
            *v /= k as f64;
        }
        let pre_norm = Tensor::matrix(1, d, pooled)?;
        let norm = pre_norm.norm_l2();
        if norm == 0.0 {
            log::warn!("identity embedding degenerated to the zero vector; returning canonical basis vector");
            let mut basis = vec![0.0; d];
            basis[0] = 1.0;
            let emb = Tensor::matrix(1, d, basis)?;
            return Ok((
                emb,
                IdentityEmbedCache {
                    patches,
                    pre_norm,
                    norm,
                    degenerate: true,
                },
            ));
        }
        let emb = pre_norm.scale(1.0 / norm)?;
        Ok((
            emb,
            IdentityEmbedCache {
                patches,
                pre_norm,
                norm,
                degenerate: false,
            },
        ))
    }

    /// Backward of `encode_identity` with respect to the face pixels, given
    /// the gradient at the normalized embedding.
    pub(crate) fn encode_identity_backward(
        &self,
        cache: &IdentityEmbedCache,
        d_emb: &Tensor,
    ) -> Result<Tensor> {
        let k = cache.patches.dims2().0;
        let d = self.cfg.embed_dim;
        if cache.degenerate {
            // Normalization is undefined at zero; the canonical vector is
            // constant there, so no gradient flows.
            return Ok(Tensor::zeros(vec![k, self.patch_len]));
        }
        // e = v / |v|  =>  de/dv = (I - e e^T) / |v|
        let norm = cache.norm;
        let e = cache.pre_norm.scale(1.0 / norm)?;
        let inner = e.dot(d_emb)?;
        let dv = d_emb.sub(&e.scale(inner)?)?.scale(1.0 / norm)?;
        // v = mean of projected rows
        let drows = Tensor::from_fn(vec![k, d], |i| dv.data()[i % d] / k as f64)?;
        // rows = patches . P  =>  dpatches = drows . P^T
        matmul(&drows, &self.id_proj.transpose())
    }

    /// Fuse fine-grained and contextual identity embeddings into identity
    /// tokens aligned with the text-embedding width.
    pub fn fuse_identity(&self, e_arc: &Tensor, e_clip: &Tensor) -> Result<Tensor> {
        fuse_identity(e_arc, e_clip, &self.fusion)
    }

    /// Whitespace-tokenized, hash-embedded text. The empty phrase maps to a
    /// dedicated null token, which is also what condition dropout and the
    /// unconditional guidance branch substitute.
    pub fn encode_text(&self, phrase: &str) -> Tensor {
        let d = self.cfg.text_dim;
        let tokens: Vec<&str> = phrase.split_whitespace().collect();
        if tokens.is_empty() {
            return self.null_text();
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for token in &tokens {
            data.extend_from_slice(self.token_row(token).data());
        }
        Tensor::matrix(tokens.len(), d, data).expect("token rows are finite")
    }

    pub fn encode_action(&self, phrase: &str) -> ActionEmbedding {
        ActionEmbedding {
            tokens: self.encode_text(phrase),
        }
    }

    fn token_row(&self, token: &str) -> Tensor {
        let tag = crate::seeded::fnv1a64(token.as_bytes());
        let seed = derive_seed(self.cfg.seed ^ tag, "text-token");
        seeded_matrix(seed, "token-row", 1, self.cfg.text_dim, 1.0 / (self.cfg.text_dim as f64).sqrt())
    }

    /// The null token shared by empty phrases, text dropout, and the
    /// unconditional guidance branch.
    pub fn null_text(&self) -> Tensor {
        let seed = derive_seed(self.cfg.seed, "null-text");
        seeded_matrix(seed, "token-row", 1, self.cfg.text_dim, 1.0 / (self.cfg.text_dim as f64).sqrt())
    }

    /// Null identity tokens substituted when the identity image is dropped.
    pub fn null_identity(&self) -> Tensor {
        self.null_identity.clone()
    }

    /// Project a motion intensity in [0, 20] through the MLP into a motion
    /// embedding. The input is normalized to [0, 1] to keep the MLP
    /// well-scaled.
    pub fn embed_motion_intensity(&self, m: f64) -> Result<MotionEmbedding> {
        embed_motion_intensity(m, &self.motion_mlp)
    }

    /// Build the full identity bundle for a reference image.
    pub fn identity_bundle(&self, ref_image: &Tensor, bbox: Option<FaceBox>) -> Result<IdentityBundle> {
        let face_crop = self.crop_face_region(ref_image, bbox)?;
        let e_clip = self.encode_context(&face_crop)?;
        let e_arc = self.encode_identity(&face_crop)?;
        let c_id = self.fuse_identity(&e_arc, &e_clip)?;
        IdentityBundle::new(
            ref_image.clone(),
            face_crop,
            e_clip,
            e_arc,
            c_id,
            self.cfg.text_dim,
        )
    }

    /// Face embedding of an arbitrary frame: detector-stub crop, then the
    /// identity encoder. This is the phi used by the ID loss and the
    /// evaluation metrics.
    pub fn frame_identity_embedding(&self, frame: &Tensor) -> Result<Tensor> {
        let (emb, _) = self.frame_identity_embedding_cached(frame)?;
        Ok(emb)
    }

    pub(crate) fn frame_identity_embedding_cached(
        &self,
        frame: &Tensor,
    ) -> Result<(Tensor, FrameEmbedCache)> {
        let (crop, taps) = crop_face_region_cached(frame, None, self.cfg.face_size, self.cfg.face_size)?;
        let (emb, id_cache) = self.encode_identity_cached(&crop)?;
        Ok((
            emb,
            FrameEmbedCache {
                taps,
                id_cache,
                frame_shape: frame.shape().to_vec(),
            },
        ))
    }

    /// Backward of `frame_identity_embedding` to the frame pixels.
    pub(crate) fn frame_identity_backward(
        &self,
        cache: &FrameEmbedCache,
        d_emb: &Tensor,
    ) -> Result<Tensor> {
        let d_patches = self.encode_identity_backward(&cache.id_cache, d_emb)?;
        // Undo patch extraction: scatter patch rows back into the crop grid.
        let fs = self.cfg.face_size;
        let c = self.cfg.face_channels;
        let patch = fs / self.grid;
        let mut d_crop = vec![0.0; fs * fs * c];
        for gi in 0..self.grid {
            for gj in 0..self.grid {
                let p = gi * self.grid + gj;
                let row = d_patches.row(p);
                let mut idx = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            let y = gi * patch + py;
                            let x = gj * patch + px;
                            d_crop[(y * fs + x) * c + ch] += row[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
        // Undo the bilinear sample through the recorded taps.
        let mut d_frame = vec![0.0; cache.frame_shape.iter().product()];
        let w = cache.taps.src_w;
        for (out_idx, tap) in cache.taps.taps.iter().enumerate() {
            for ch in 0..c {
                let g = d_crop[out_idx * c + ch];
                if g == 0.0 {
                    continue;
                }
                for &(sy, sx, weight) in tap {
                    d_frame[((sy * w) + sx) * c + ch] += g * weight;
                }
            }
        }
        Tensor::new(cache.frame_shape.clone(), d_frame)
    }

    fn extract_patches(&self, face: &Tensor) -> Result<Tensor> {
        let (fh, fw, c) = face_dims(face)?;
        if fh != self.cfg.face_size || fw != self.cfg.face_size || c != self.cfg.face_channels {
            return Err(Error::ShapeMismatch {
                op: "extract_patches",
                detail: format!(
                    "face {fh}x{fw}x{c}, encoder expects {0}x{0}x{1}",
                    self.cfg.face_size, self.cfg.face_channels
                ),
            });
        }
        let patch = fh / self.grid;
        let data = face.data();
        let mut out = Vec::with_capacity(self.cfg.context_tokens * self.patch_len);
        for gi in 0..self.grid {
            for gj in 0..self.grid {
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            let y = gi * patch + py;
                            let x = gj * patch + px;
                            out.push(data[(y * fw + x) * c + ch]);
                        }
                    }
                }
            }
        }
        Tensor::matrix(self.cfg.context_tokens, self.patch_len, out)
    }
}

pub(crate) struct IdentityEmbedCache {
    patches: Tensor,
    pre_norm: Tensor,
    norm: f64,
    degenerate: bool,
}

pub(crate) struct FrameEmbedCache {
    taps: ResampleTaps,
    id_cache: IdentityEmbedCache,
    frame_shape: Vec<usize>,
}

/// Bilinear taps recorded during crop+resize so the operation can be
/// transposed exactly during backprop.
pub(crate) struct ResampleTaps {
    src_w: usize,
    /// Per output pixel (row-major): up to four (src_y, src_x, weight) taps.
    taps: Vec<Vec<(usize, usize, f64)>>,
}

fn face_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.rank() {
        3 => Ok(t.dims3()),
        4 => {
            let (n, h, w, c) = t.dims4();
            if n != 1 {
                return Err(Error::ShapeMismatch {
                    op: "face_dims",
                    detail: format!("expected a single frame, got {n}"),
                });
            }
            Ok((h, w, c))
        }
        _ => Err(Error::ShapeMismatch {
            op: "face_dims",
            detail: format!("expected rank 3 or 4, got {:?}", t.shape()),
        }),
    }
}

/// Crop a face region (or the central 60%-of-short-side square when no box
/// is given) and bilinearly resample it to `out_h` x `out_w`.
pub fn crop_face_region(
    image: &Tensor,
    bbox: Option<FaceBox>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (t, _) = crop_face_region_cached(image, bbox, out_h, out_w)?;
    Ok(t)
}

pub(crate) fn crop_face_region_cached(
    image: &Tensor,
    bbox: Option<FaceBox>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, ResampleTaps)> {
    let (h, w, c) = face_dims(image)?;
    let bbox = match bbox {
        Some(b) => {
            if b.w == 0 || b.h == 0 {
                return Err(Error::DegenerateBox(format!("{b:?}")));
            }
            if b.x + b.w > w || b.y + b.h > h {
                return Err(Error::BoxOutOfBounds {
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    img_h: h,
                    img_w: w,
                });
            }
            b
        }
        None => {
            let side = ((0.6 * h.min(w) as f64).round() as usize).max(1);
            FaceBox {
                x: (w - side) / 2,
                y: (h - side) / 2,
                w: side,
                h: side,
            }
        }
    };

    let data = image.data();
    let mut out = vec![0.0; out_h * out_w * c];
    let mut taps = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            // Center-aligned source coordinates within the crop window.
            let sy = bbox.y as f64 + ((oy as f64 + 0.5) * bbox.h as f64 / out_h as f64 - 0.5)
                .clamp(0.0, (bbox.h - 1) as f64);
            let sx = bbox.x as f64 + ((ox as f64 + 0.5) * bbox.w as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (bbox.w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(bbox.y + bbox.h - 1);
            let x1 = (x0 + 1).min(bbox.x + bbox.w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let tap = vec![
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for ch in 0..c {
                let mut acc = 0.0;
                for &(ty, tx, weight) in &tap {
                    acc += data[(ty * w + tx) * c + ch] * weight;
                }
                out[(oy * out_w + ox) * c + ch] = acc;
            }
            taps.push(tap);
        }
    }
    let tensor = Tensor::new(vec![1, out_h, out_w, c], out)?;
    Ok((tensor, ResampleTaps { src_w: w, taps }))
}

/// Identity fusion: cross-attend the fine-grained embedding over the
/// combined contextual+identity embedding, then project to the text width.
pub fn fuse_identity(e_arc: &Tensor, e_clip: &Tensor, p: &FusionParams) -> Result<Tensor> {
    let combined = e_clip.add_row_broadcast(e_arc)?;
    let q = matmul(e_arc, &p.w_q)?;
    let k = matmul(&combined, &p.w_k)?;
    let v = matmul(&combined, &p.w_v)?;
    let fused = attention(&q, &k, &v)?;
    matmul(&fused, &p.proj)
}

/// Motion embedding from an intensity scalar in [0, 20].
pub fn embed_motion_intensity(m: f64, p: &MlpParams) -> Result<MotionEmbedding> {
    if !(0.0..=MAX_INTENSITY).contains(&m) {
        return Err(Error::OutOfRange {
            what: "motion intensity",
            value: m,
            lo: 0.0,
            hi: MAX_INTENSITY,
        });
    }
    let x = Tensor::matrix(1, 1, vec![m / MAX_INTENSITY])?;
    let embedding = mlp_forward(p, &x)?;
    Ok(MotionEmbedding { embedding })
}
