//! Attention-based Token Alignment.
//!
//! Stage 1 projects each layer's tokens to a common dimension, runs the two
//! images' coarse tokens through a pairwise attention block (concatenated,
//! no positional encodings), then lets each half query its own image's fine
//! tokens through a second cross-attention block. The result is one set of
//! attended tokens per image, re-normalized to unit rows.
//!
//! Stage 2 computes the token-level similarity: a cosine matrix between the
//! attended token sets, softmax attention weights at temperature τ, attended
//! vectors, and per-token relevances `r_i = R(t_i^v, a_i^e) + R(t_i^e, a_i^v)`.
//! The reduction over tokens is `max` (best-aligned token decides) or
//! `mean`; the result is halved so it lies in [−1, 1] and fuses with the
//! global cosine on a common scale.
//!
//! Both blocks are single-head, pre-LN, FFN expansion 4. The absence of
//! positional encodings is what makes the whole pair score symmetric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MgaError, Result};
use crate::fga::TokenSet;
use crate::numerics::matrix::{Matrix, Real};

/// FFN hidden width as a multiple of the token dimension.
pub const FFN_EXPANSION: usize = 4;

/// Init sigma for attention and FFN maps; small enough that a fresh block
/// stays close to its residual identity.
pub const BLOCK_INIT_SIGMA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Max,
    Mean,
}

/// One pre-LN transformer block: single-head attention plus FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    /// D × 4D.
    pub w1: Matrix<T>,
    /// 4D × D.
    pub w2: Matrix<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

impl<T: Real> AttentionBlockParams<T> {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let ones = Matrix::from_vec(1, dim, vec![T::one(); dim]);
        Self {
            wq: Matrix::gaussian(dim, dim, BLOCK_INIT_SIGMA, rng),
            wk: Matrix::gaussian(dim, dim, BLOCK_INIT_SIGMA, rng),
            wv: Matrix::gaussian(dim, dim, BLOCK_INIT_SIGMA, rng),
            wo: Matrix::gaussian(dim, dim, BLOCK_INIT_SIGMA, rng),
            w1: Matrix::gaussian(dim, dim * FFN_EXPANSION, BLOCK_INIT_SIGMA, rng),
            w2: Matrix::gaussian(dim * FFN_EXPANSION, dim, BLOCK_INIT_SIGMA, rng),
            ln1_gain: ones.clone(),
            ln1_bias: Matrix::zeros(1, dim),
            ln2_gain: ones,
            ln2_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        let ones = Matrix::from_vec(1, dim, vec![T::one(); dim]);
        Self {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
            w1: Matrix::zeros(dim, dim * FFN_EXPANSION),
            w2: Matrix::zeros(dim * FFN_EXPANSION, dim),
            ln1_gain: ones.clone(),
            ln1_bias: Matrix::zeros(1, dim),
            ln2_gain: ones,
            ln2_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn groups(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        vec![
            (format!("{}.wq", prefix), &self.wq),
            (format!("{}.wk", prefix), &self.wk),
            (format!("{}.wv", prefix), &self.wv),
            (format!("{}.wo", prefix), &self.wo),
            (format!("{}.w1", prefix), &self.w1),
            (format!("{}.w2", prefix), &self.w2),
            (format!("{}.ln1_gain", prefix), &self.ln1_gain),
            (format!("{}.ln1_bias", prefix), &self.ln1_bias),
            (format!("{}.ln2_gain", prefix), &self.ln2_gain),
            (format!("{}.ln2_bias", prefix), &self.ln2_bias),
        ]
    }
}

/// All alignment parameters: the two blocks, the per-layer input
/// projections onto the common token dimension, and the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct AtaParams<T> {
    pub block_pair: AttentionBlockParams<T>,
    pub block_c2f: AttentionBlockParams<T>,
    /// D_coarse × D.
    pub proj_coarse: Matrix<T>,
    /// D_fine × D.
    pub proj_fine: Matrix<T>,
    pub temperature: T,
}

impl<T: Real> AtaParams<T> {
    pub fn init<R: Rng>(
        coarse_dim: usize,
        fine_dim: usize,
        token_dim: usize,
        temperature: T,
        rng: &mut R,
    ) -> Result<Self> {
        if temperature.as_f64() <= 0.0 {
            return Err(MgaError::NonPositiveTemperature(temperature.as_f64()));
        }
        // Identity projections when the dims already agree keeps the early
        // signal path transparent; otherwise a scaled Gaussian map.
        let proj = |layer_dim: usize, rng: &mut R| {
            if layer_dim == token_dim {
                Matrix::identity(token_dim)
            } else {
                Matrix::gaussian(layer_dim, token_dim, 1.0 / (layer_dim as f64).sqrt(), rng)
            }
        };
        Ok(Self {
            block_pair: AttentionBlockParams::init(token_dim, rng),
            block_c2f: AttentionBlockParams::init(token_dim, rng),
            proj_coarse: proj(coarse_dim, rng),
            proj_fine: proj(fine_dim, rng),
            temperature,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.block_pair.dim()
    }
}

/// Stage-1 output: attended tokens for both images, unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendedPair<T> {
    pub tokens_v: Matrix<T>,
    pub tokens_e: Matrix<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionBlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AtaVars {
    pub block_pair: AttentionBlockVars,
    pub block_c2f: AttentionBlockVars,
    pub proj_coarse: Var,
    pub proj_fine: Var,
}

pub fn bind_block_params<T: Real>(
    tape: &mut Tape<T>,
    params: &AttentionBlockParams<T>,
) -> AttentionBlockVars {
    AttentionBlockVars {
        wq: tape.input(params.wq.clone()),
        wk: tape.input(params.wk.clone()),
        wv: tape.input(params.wv.clone()),
        wo: tape.input(params.wo.clone()),
        w1: tape.input(params.w1.clone()),
        w2: tape.input(params.w2.clone()),
        ln1_gain: tape.input(params.ln1_gain.clone()),
        ln1_bias: tape.input(params.ln1_bias.clone()),
        ln2_gain: tape.input(params.ln2_gain.clone()),
        ln2_bias: tape.input(params.ln2_bias.clone()),
    }
}

pub fn bind_ata_params<T: Real>(tape: &mut Tape<T>, params: &AtaParams<T>) -> AtaVars {
    AtaVars {
        block_pair: bind_block_params(tape, &params.block_pair),
        block_c2f: bind_block_params(tape, &params.block_c2f),
        proj_coarse: tape.input(params.proj_coarse.clone()),
        proj_fine: tape.input(params.proj_fine.clone()),
    }
}

/// Pre-LN residual attention block on the tape:
/// `h = x + Attn(LN1(x), LN1(kv), LN1(kv))`, `out = h + FFN(LN2(h))`,
/// single-head scaled dot-product with scale 1/√D.
pub fn attention_block_tape<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    keys_values: Var,
    block: &AttentionBlockVars,
) -> Var {
    let dim = tape.value(queries).cols();
    let qn = tape.layer_norm_rows(queries, block.ln1_gain, block.ln1_bias);
    let kn = tape.layer_norm_rows(keys_values, block.ln1_gain, block.ln1_bias);
    let q = tape.matmul(qn, block.wq);
    let k = tape.matmul(kn, block.wk);
    let v = tape.matmul(kn, block.wv);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scale = T::one() / T::from_f64((dim as f64).sqrt());
    let weights = tape.row_softmax(scores, scale);
    let ctx = tape.matmul(weights, v);
    let attn_out = tape.matmul(ctx, block.wo);
    let h = tape.add(queries, attn_out);
    let hn = tape.layer_norm_rows(h, block.ln2_gain, block.ln2_bias);
    let pre = tape.matmul(hn, block.w1);
    let act = tape.relu(pre);
    let ffn = tape.matmul(act, block.w2);
    tape.add(h, ffn)
}

/// One attention-block evaluation outside any training context.
pub fn attention_block<T: Real>(
    queries: &Matrix<T>,
    keys_values: &Matrix<T>,
    params: &AttentionBlockParams<T>,
) -> Result<Matrix<T>> {
    if queries.cols() != params.dim() || keys_values.cols() != params.dim() {
        return Err(MgaError::DimMismatch {
            context: "attention_block".into(),
            expected: format!("token dim {}", params.dim()),
            got: format!("{} / {}", queries.cols(), keys_values.cols()),
        });
    }
    let mut tape = Tape::new();
    let q = tape.input(queries.clone());
    let kv = tape.input(keys_values.clone());
    let block = bind_block_params(&mut tape, params);
    let out = attention_block_tape(&mut tape, q, kv, &block);
    Ok(tape.value(out).clone())
}

/// Token-set tape handles for one image (coarse and fine layer tokens).
#[derive(Clone, Copy, Debug)]
pub struct ImageTokenVars {
    pub coarse: Var,
    pub fine: Var,
}

/// Stage 1 on the tape. Returns the attended token matrices (unit rows)
/// for both images.
pub fn stage1_attend_tape<T: Real>(
    tape: &mut Tape<T>,
    image_v: ImageTokenVars,
    image_e: ImageTokenVars,
    vars: &AtaVars,
) -> Result<(Var, Var)> {
    let pc_v = tape.matmul(image_v.coarse, vars.proj_coarse);
    let pc_e = tape.matmul(image_e.coarse, vars.proj_coarse);
    let pf_v = tape.matmul(image_v.fine, vars.proj_fine);
    let pf_e = tape.matmul(image_e.fine, vars.proj_fine);

    let m = tape.value(pc_v).rows();
    let pair = tape.concat_rows(pc_v, pc_e);
    let pair_out = attention_block_tape(tape, pair, pair, &vars.block_pair);
    let half_v = tape.slice_rows(pair_out, 0, m);
    let half_e = tape.slice_rows(pair_out, m, m);

    let att_v = attention_block_tape(tape, half_v, pf_v, &vars.block_c2f);
    let att_e = attention_block_tape(tape, half_e, pf_e, &vars.block_c2f);

    let tv = tape.l2_norm_rows(att_v, "ata.stage1")?;
    let te = tape.l2_norm_rows(att_e, "ata.stage1")?;
    Ok((tv, te))
}

fn check_token_dims<T: Real>(params: &AtaParams<T>, coarse: &TokenSet<T>, fine: &TokenSet<T>) -> Result<()> {
    if coarse.dim() != params.proj_coarse.rows() || fine.dim() != params.proj_fine.rows() {
        return Err(MgaError::DimMismatch {
            context: "ata.stage1".into(),
            expected: format!(
                "coarse dim {}, fine dim {}",
                params.proj_coarse.rows(),
                params.proj_fine.rows()
            ),
            got: format!("{} / {}", coarse.dim(), fine.dim()),
        });
    }
    Ok(())
}

/// Stage 1 outside any training context.
pub fn stage1_attend<T: Real>(
    coarse_v: &TokenSet<T>,
    fine_v: &TokenSet<T>,
    coarse_e: &TokenSet<T>,
    fine_e: &TokenSet<T>,
    params: &AtaParams<T>,
) -> Result<AttendedPair<T>> {
    check_token_dims(params, coarse_v, fine_v)?;
    check_token_dims(params, coarse_e, fine_e)?;
    let mut tape = Tape::new();
    let image_v = ImageTokenVars {
        coarse: tape.input(coarse_v.tokens.clone()),
        fine: tape.input(fine_v.tokens.clone()),
    };
    let image_e = ImageTokenVars {
        coarse: tape.input(coarse_e.tokens.clone()),
        fine: tape.input(fine_e.tokens.clone()),
    };
    let vars = bind_ata_params(&mut tape, params);
    let (tv, te) = stage1_attend_tape(&mut tape, image_v, image_e, &vars)?;
    Ok(AttendedPair {
        tokens_v: tape.value(tv).clone(),
        tokens_e: tape.value(te).clone(),
    })
}

/// Stage-2 tape nodes: the cosine matrix, both attention-weight matrices,
/// the per-token relevances, and the reduced similarity.
#[derive(Clone, Copy, Debug)]
pub struct TokenSimilarityNodes {
    pub cosine: Var,
    pub weights_ve: Var,
    pub weights_ev: Var,
    pub relevance: Var,
    pub similarity: Var,
    /// Token index the max reduction routed through, if `Reduction::Max`.
    pub argmax: Option<usize>,
}

/// Stage 2 on the tape: attended vectors, relevances, and the halved
/// reduction. Ties in the max reduction go to the lowest index.
pub fn token_similarity_tape<T: Real>(
    tape: &mut Tape<T>,
    tokens_v: Var,
    tokens_e: Var,
    temperature: T,
    reduction: Reduction,
) -> Result<TokenSimilarityNodes> {
    if temperature.as_f64() <= 0.0 {
        return Err(MgaError::NonPositiveTemperature(temperature.as_f64()));
    }
    let tv = tape.l2_norm_rows(tokens_v, "ata.stage2")?;
    let te = tape.l2_norm_rows(tokens_e, "ata.stage2")?;
    let tet = tape.transpose(te);
    let cosine = tape.matmul(tv, tet);
    let weights_ve = tape.row_softmax(cosine, temperature);
    let cosine_t = tape.transpose(cosine);
    let weights_ev = tape.row_softmax(cosine_t, temperature);

    let attended_e = tape.matmul(weights_ve, te);
    let attended_v = tape.matmul(weights_ev, tv);

    let ae_n = tape.l2_norm_rows(attended_e, "ata.attended")?;
    let av_n = tape.l2_norm_rows(attended_v, "ata.attended")?;
    let prod_v = tape.mul_elem(tv, ae_n);
    let r_v = tape.row_sum(prod_v);
    let prod_e = tape.mul_elem(te, av_n);
    let r_e = tape.row_sum(prod_e);
    let relevance = tape.add(r_v, r_e);

    let half = T::from_f64(0.5);
    let (similarity, argmax) = match reduction {
        Reduction::Mean => {
            let mean = tape.mean_all(relevance);
            (tape.scale(mean, half), None)
        }
        Reduction::Max => {
            let r = tape.value(relevance);
            let mut best = 0;
            for i in 1..r.rows() {
                if r[(i, 0)] > r[(best, 0)] {
                    best = i;
                }
            }
            let picked = tape.pick(relevance, best, 0);
            (tape.scale(picked, half), Some(best))
        }
    };
    Ok(TokenSimilarityNodes {
        cosine,
        weights_ve,
        weights_ev,
        relevance,
        similarity,
        argmax,
    })
}

/// Attended vectors for two unit-row token sets: returns
/// `(a_e, a_v, cosine matrix, weights)` where `weights` row-softmaxes
/// `τ · cosine`.
pub fn attended_vectors<T: Real>(
    tokens_v: &Matrix<T>,
    tokens_e: &Matrix<T>,
    temperature: T,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>)> {
    let mut tape = Tape::new();
    let tv = tape.input(tokens_v.clone());
    let te = tape.input(tokens_e.clone());
    let nodes = token_similarity_tape(&mut tape, tv, te, temperature, Reduction::Mean)?;
    // attended vectors are the matmul parents of the normalized nodes;
    // recompute them here from the recorded weight matrices
    let w_ve = tape.value(nodes.weights_ve).clone();
    let w_ev = tape.value(nodes.weights_ev).clone();
    let te_n = tokens_e.clone();
    let tv_n = tokens_v.clone();
    let a_e = w_ve.matmul(&te_n);
    let a_v = w_ev.matmul(&tv_n);
    Ok((a_e, a_v, tape.value(nodes.cosine).clone(), w_ve))
}

/// Token-level similarity of two attended token sets.
pub fn token_similarity<T: Real>(
    tokens_v: &Matrix<T>,
    tokens_e: &Matrix<T>,
    temperature: T,
    reduction: Reduction,
) -> Result<T> {
    let mut tape = Tape::new();
    let tv = tape.input(tokens_v.clone());
    let te = tape.input(tokens_e.clone());
    let nodes = token_similarity_tape(&mut tape, tv, te, temperature, reduction)?;
    Ok(tape.scalar(nodes.similarity))
}

/// Gradients of the token similarity with respect to the alignment
/// parameters and the four input token sets.
#[derive(Clone, Debug)]
pub struct AtaGrads<T> {
    pub params: Vec<(String, Matrix<T>)>,
    pub coarse_v: Matrix<T>,
    pub fine_v: Matrix<T>,
    pub coarse_e: Matrix<T>,
    pub fine_e: Matrix<T>,
}

/// Full forward (stage 1 + stage 2) and backward for one pair, seeded with
/// an upstream scalar gradient.
pub fn ata_backward<T: Real>(
    coarse_v: &TokenSet<T>,
    fine_v: &TokenSet<T>,
    coarse_e: &TokenSet<T>,
    fine_e: &TokenSet<T>,
    params: &AtaParams<T>,
    reduction: Reduction,
    upstream: T,
) -> Result<AtaGrads<T>> {
    let mut tape = Tape::new();
    let image_v = ImageTokenVars {
        coarse: tape.input(coarse_v.tokens.clone()),
        fine: tape.input(fine_v.tokens.clone()),
    };
    let image_e = ImageTokenVars {
        coarse: tape.input(coarse_e.tokens.clone()),
        fine: tape.input(fine_e.tokens.clone()),
    };
    let vars = bind_ata_params(&mut tape, params);
    let (tv, te) = stage1_attend_tape(&mut tape, image_v, image_e, &vars)?;
    let nodes = token_similarity_tape(&mut tape, tv, te, params.temperature, reduction)?;
    let grads = tape.backward(nodes.similarity, upstream);

    let block_entries = |tape: &Tape<T>, prefix: &str, b: &AttentionBlockVars| {
        vec![
            (format!("{}.wq", prefix), grads.get_or_zeros(tape, b.wq)),
            (format!("{}.wk", prefix), grads.get_or_zeros(tape, b.wk)),
            (format!("{}.wv", prefix), grads.get_or_zeros(tape, b.wv)),
            (format!("{}.wo", prefix), grads.get_or_zeros(tape, b.wo)),
            (format!("{}.w1", prefix), grads.get_or_zeros(tape, b.w1)),
            (format!("{}.w2", prefix), grads.get_or_zeros(tape, b.w2)),
            (
                format!("{}.ln1_gain", prefix),
                grads.get_or_zeros(tape, b.ln1_gain),
            ),
            (
                format!("{}.ln1_bias", prefix),
                grads.get_or_zeros(tape, b.ln1_bias),
            ),
            (
                format!("{}.ln2_gain", prefix),
                grads.get_or_zeros(tape, b.ln2_gain),
            ),
            (
                format!("{}.ln2_bias", prefix),
                grads.get_or_zeros(tape, b.ln2_bias),
            ),
        ]
    };
    let mut param_grads = block_entries(&tape, "block_pair", &vars.block_pair);
    param_grads.extend(block_entries(&tape, "block_c2f", &vars.block_c2f));
    param_grads.push((
        "proj_coarse".to_string(),
        grads.get_or_zeros(&tape, vars.proj_coarse),
    ));
    param_grads.push((
        "proj_fine".to_string(),
        grads.get_or_zeros(&tape, vars.proj_fine),
    ));

    Ok(AtaGrads {
        params: param_grads,
        coarse_v: grads.get_or_zeros(&tape, image_v.coarse),
        fine_v: grads.get_or_zeros(&tape, image_v.fine),
        coarse_e: grads.get_or_zeros(&tape, image_e.coarse),
        fine_e: grads.get_or_zeros(&tape, image_e.fine),
    })
}
