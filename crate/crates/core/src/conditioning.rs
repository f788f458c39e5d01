//! The two conditioning blocks: decoupled identity-preserving cross-attention
//! and the dual motion-control cross-attention, as parameterized,
//! differentiable building blocks.
//!
//! Both blocks share one structure: queries from the latent tokens, a primary
//! attention branch over one embedding, plus a scalar-weighted secondary
//! branch over the other. Backward passes are hand-derived and checked
//! against central finite differences in the test suite.

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, softmax_rows_backward, Tensor};

/// Parameters of the identity-preserving decoupled cross-attention.
/// `lambda` balances text guidance against identity preservation.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub w_q: Tensor,
    pub w_k_text: Tensor,
    pub w_v_text: Tensor,
    pub w_k_id: Tensor,
    pub w_v_id: Tensor,
    pub lambda: f64,
}

/// Parameters of the motion-control dual cross-attention.
/// `alpha` balances the motion-intensity branch against the action branch.
#[derive(Debug, Clone)]
pub struct MotionBlockParams {
    pub w_q: Tensor,
    pub w_k_action: Tensor,
    pub w_v_action: Tensor,
    pub w_k_motion: Tensor,
    pub w_v_motion: Tensor,
    pub alpha: f64,
}

fn check_block_dims(
    op: &'static str,
    w_q: &Tensor,
    w_k_a: &Tensor,
    w_v_a: &Tensor,
    w_k_b: &Tensor,
    w_v_b: &Tensor,
    scalar: f64,
) -> Result<()> {
    if scalar < 0.0 {
        return Err(Error::OutOfRange {
            what: "branch scalar",
            value: scalar,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let dk = w_q.dims2().1;
    if w_k_a.dims2().1 != dk || w_k_b.dims2().1 != dk {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!(
                "key widths {}/{} must match query width {dk}",
                w_k_a.dims2().1,
                w_k_b.dims2().1
            ),
        });
    }
    if w_v_a.dims2().1 != w_v_b.dims2().1 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!(
                "value widths differ: {} vs {}",
                w_v_a.dims2().1,
                w_v_b.dims2().1
            ),
        });
    }
    Ok(())
}

impl AdapterParams {
    pub fn new(
        w_q: Tensor,
        w_k_text: Tensor,
        w_v_text: Tensor,
        w_k_id: Tensor,
        w_v_id: Tensor,
        lambda: f64,
    ) -> Result<Self> {
        check_block_dims("AdapterParams::new", &w_q, &w_k_text, &w_v_text, &w_k_id, &w_v_id, lambda)?;
        Ok(Self {
            w_q,
            w_k_text,
            w_v_text,
            w_k_id,
            w_v_id,
            lambda,
        })
    }
}

impl MotionBlockParams {
    pub fn new(
        w_q: Tensor,
        w_k_action: Tensor,
        w_v_action: Tensor,
        w_k_motion: Tensor,
        w_v_motion: Tensor,
        alpha: f64,
    ) -> Result<Self> {
        check_block_dims(
            "MotionBlockParams::new",
            &w_q,
            &w_k_action,
            &w_v_action,
            &w_k_motion,
            &w_v_motion,
            alpha,
        )?;
        Ok(Self {
            w_q,
            w_k_action,
            w_v_action,
            w_k_motion,
            w_v_motion,
            alpha,
        })
    }
}

/// Gradients of `AdapterParams`, same layout.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub w_q: Tensor,
    pub w_k_text: Tensor,
    pub w_v_text: Tensor,
    pub w_k_id: Tensor,
    pub w_v_id: Tensor,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct MotionGrads {
    pub w_q: Tensor,
    pub w_k_action: Tensor,
    pub w_v_action: Tensor,
    pub w_k_motion: Tensor,
    pub w_v_motion: Tensor,
    pub alpha: f64,
}

/// One attention branch with everything the backward pass needs.
struct BranchCache {
    k: Tensor,
    v: Tensor,
    /// Softmax attention weights, queries x keys.
    weights: Tensor,
    out: Tensor,
}

fn branch_forward(q: &Tensor, emb: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<BranchCache> {
    let k = matmul(emb, w_k)?;
    let v = matmul(emb, w_v)?;
    let dk = q.dims2().1;
    let scale = 1.0 / (dk as f64).sqrt();
    let logits = matmul(q, &k.transpose())?.scale(scale)?;
    let weights = softmax_rows(&logits);
    let out = matmul(&weights, &v)?;
    Ok(BranchCache { k, v, weights, out })
}

/// Backward through one branch. Returns (d_q, d_w_k, d_w_v); the embedding
/// is treated as a constant input (the toy trainer does not train encoders).
fn branch_backward(
    cache: &BranchCache,
    q: &Tensor,
    emb: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d_v = matmul(&cache.weights.transpose(), d_out)?;
    let d_weights = matmul(d_out, &cache.v.transpose())?;
    let d_logits = softmax_rows_backward(&cache.weights, &d_weights)?;
    let dk = q.dims2().1;
    let scale = 1.0 / (dk as f64).sqrt();
    let d_q = matmul(&d_logits, &cache.k)?.scale(scale)?;
    let d_k = matmul(&d_logits.transpose(), q)?.scale(scale)?;
    let d_w_k = matmul(&emb.transpose(), &d_k)?;
    let d_w_v = matmul(&emb.transpose(), &d_v)?;
    Ok((d_q, d_w_k, d_w_v))
}

pub(crate) struct TwoBranchCache {
    input: Tensor,
    emb_primary: Tensor,
    emb_secondary: Tensor,
    q: Tensor,
    primary: BranchCache,
    /// Absent when the scalar is exactly zero (the branch is skipped so the
    /// output is bitwise independent of the secondary embedding).
    secondary: Option<BranchCache>,
    scalar: f64,
}

fn two_branch_forward(
    input: &Tensor,
    emb_primary: &Tensor,
    emb_secondary: &Tensor,
    w_q: &Tensor,
    w_k_p: &Tensor,
    w_v_p: &Tensor,
    w_k_s: &Tensor,
    w_v_s: &Tensor,
    scalar: f64,
) -> Result<(Tensor, TwoBranchCache)> {
    let q = matmul(input, w_q)?;
    let primary = branch_forward(&q, emb_primary, w_k_p, w_v_p)?;
    let (out, secondary) = if scalar == 0.0 {
        (primary.out.clone(), None)
    } else {
        let secondary = branch_forward(&q, emb_secondary, w_k_s, w_v_s)?;
        let out = primary.out.add(&secondary.out.scale(scalar)?)?;
        (out, Some(secondary))
    };
    Ok((
        out,
        TwoBranchCache {
            input: input.clone(),
            emb_primary: emb_primary.clone(),
            emb_secondary: emb_secondary.clone(),
            q,
            primary,
            secondary,
            scalar,
        },
    ))
}

struct TwoBranchGrads {
    d_input: Tensor,
    d_w_q: Tensor,
    d_w_k_p: Tensor,
    d_w_v_p: Tensor,
    /// None when the secondary branch was skipped (scalar exactly zero):
    /// no gradient flows there and the scalar stays pinned.
    secondary: Option<(Tensor, Tensor, f64)>,
}

fn two_branch_backward(cache: &TwoBranchCache, w_q: &Tensor, d_out: &Tensor) -> Result<TwoBranchGrads> {
    let (mut d_q, d_w_k_p, d_w_v_p) =
        branch_backward(&cache.primary, &cache.q, &cache.emb_primary, d_out)?;
    let secondary = match &cache.secondary {
        Some(sec) => {
            let d_sec_out = d_out.scale(cache.scalar)?;
            let (d_q_s, d_w_k_s, d_w_v_s) =
                branch_backward(sec, &cache.q, &cache.emb_secondary, &d_sec_out)?;
            d_q = d_q.add(&d_q_s)?;
            let d_scalar = d_out.hadamard(&sec.out)?.sum();
            Some((d_w_k_s, d_w_v_s, d_scalar))
        }
        None => None,
    };
    let d_w_q = matmul(&cache.input.transpose(), &d_q)?;
    let d_input = matmul(&d_q, &w_q.transpose())?;
    Ok(TwoBranchGrads {
        d_input,
        d_w_q,
        d_w_k_p,
        d_w_v_p,
        secondary,
    })
}

/// Identity-preserving decoupled cross-attention:
/// `Attn(Q, K_text, V_text) + lambda * Attn(Q, K_id, V_id)` with shared
/// queries `Q = z W_q`. With `lambda == 0` the identity branch is skipped
/// entirely, so the result is bitwise independent of `c_id`.
pub fn id_adapter_attention(
    z: &Tensor,
    text_emb: &Tensor,
    c_id: &Tensor,
    p: &AdapterParams,
) -> Result<Tensor> {
    let (out, _) = id_adapter_attention_cached(z, text_emb, c_id, p)?;
    Ok(out)
}

pub(crate) fn id_adapter_attention_cached(
    z: &Tensor,
    text_emb: &Tensor,
    c_id: &Tensor,
    p: &AdapterParams,
) -> Result<(Tensor, TwoBranchCache)> {
    two_branch_forward(
        z,
        text_emb,
        c_id,
        &p.w_q,
        &p.w_k_text,
        &p.w_v_text,
        &p.w_k_id,
        &p.w_v_id,
        p.lambda,
    )
}

pub(crate) fn id_adapter_backward(
    cache: &TwoBranchCache,
    p: &AdapterParams,
    d_out: &Tensor,
) -> Result<(Tensor, AdapterGrads)> {
    let g = two_branch_backward(cache, &p.w_q, d_out)?;
    let (w_k_id, w_v_id, lambda) = g.secondary.unwrap_or((
        Tensor::zeros(p.w_k_id.shape().to_vec()),
        Tensor::zeros(p.w_v_id.shape().to_vec()),
        0.0,
    ));
    Ok((
        g.d_input,
        AdapterGrads {
            w_q: g.d_w_q,
            w_k_text: g.d_w_k_p,
            w_v_text: g.d_w_v_p,
            w_k_id,
            w_v_id,
            lambda,
        },
    ))
}

/// Motion-control dual cross-attention:
/// `Attn(Q', K_action, V_action) + alpha * Attn(Q', K_motion, V_motion)`
/// with `Q' = z' W_q`. With `alpha == 0` the motion branch is skipped.
pub fn motion_control_attention(
    z_prime: &Tensor,
    e_a: &Tensor,
    e_m: &Tensor,
    p: &MotionBlockParams,
) -> Result<Tensor> {
    let (out, _) = motion_control_attention_cached(z_prime, e_a, e_m, p)?;
    Ok(out)
}

pub(crate) fn motion_control_attention_cached(
    z_prime: &Tensor,
    e_a: &Tensor,
    e_m: &Tensor,
    p: &MotionBlockParams,
) -> Result<(Tensor, TwoBranchCache)> {
    two_branch_forward(
        z_prime,
        e_a,
        e_m,
        &p.w_q,
        &p.w_k_action,
        &p.w_v_action,
        &p.w_k_motion,
        &p.w_v_motion,
        p.alpha,
    )
}

pub(crate) fn motion_control_backward(
    cache: &TwoBranchCache,
    p: &MotionBlockParams,
    d_out: &Tensor,
) -> Result<(Tensor, MotionGrads)> {
    let g = two_branch_backward(cache, &p.w_q, d_out)?;
    let (w_k_motion, w_v_motion, alpha) = g.secondary.unwrap_or((
        Tensor::zeros(p.w_k_motion.shape().to_vec()),
        Tensor::zeros(p.w_v_motion.shape().to_vec()),
        0.0,
    ));
    Ok((
        g.d_input,
        MotionGrads {
            w_q: g.d_w_q,
            w_k_action: g.d_w_k_p,
            w_v_action: g.d_w_v_p,
            w_k_motion,
            w_v_motion,
            alpha,
        },
    ))
}
