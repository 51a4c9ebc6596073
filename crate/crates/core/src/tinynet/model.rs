//! Forward passes of the encoder, decoder and cross-attention head.
//!
//! The `*_graph` functions record onto a caller-supplied tape and are what
//! training differentiates; the public functions wrap them for one-off
//! evaluation on plain matrices.

use super::params::{Bound, TinyNetParams};
use super::tape::{Tape, Var};
use super::tensor::{Matrix, Scalar};
use super::{EmbeddingSet, NetConfig, Partition, Prediction};
use crate::clip::ClipTensor;
use crate::error::{invalid, Result};
use crate::masker::{apply_mask, MaskPlan, TubeGrid};

/// Standardization epsilon of reconstruction targets.
pub const TARGET_EPS: f64 = 1e-6;
/// Probability floor of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;

fn check_clip(clip: &ClipTensor, cfg: &NetConfig) -> Result<()> {
    if clip.dims() != cfg.clip_dims || clip.channels() != cfg.channels {
        return Err(invalid(format!(
            "clip {:?}x{} does not match network input {:?}x{}",
            clip.dims(),
            clip.channels(),
            cfg.clip_dims,
            cfg.channels
        )));
    }
    Ok(())
}

fn tube_matrix<T: Scalar>(tubes: &[Vec<f32>], dim: usize) -> Matrix<T> {
    let mut data = Vec::with_capacity(tubes.len() * dim);
    for t in tubes {
        data.extend(t.iter().map(|&v| T::from_f32(v).expect("finite")));
    }
    Matrix::from_vec(tubes.len(), dim, data)
}

/// Zero-mean, unit-variance copy of a tube (population variance).
pub fn normalize_tube(values: &[f32]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let s = (var + TARGET_EPS).sqrt();
    values.iter().map(|&v| (v as f64 - mean) / s).collect()
}

/// Mean over tokens of the per-pixel squared error; every row is one token.
pub fn reconstruction_loss<T: Scalar>(reconstruction: &Matrix<T>, target: &Matrix<T>) -> Result<f64> {
    if reconstruction.shape() != target.shape() || reconstruction.is_empty() {
        return Err(invalid("reconstruction and target shapes differ"));
    }
    let n = reconstruction.len() as f64;
    Ok(reconstruction.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / n)
}

pub(crate) fn embed_graph<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, tubes: Matrix<T>, positions: &[usize]) -> Var {
    let x = tape.leaf(tubes);
    let e = tape.linear(x, b.var("patch.w"), b.var("patch.b"));
    let pos = tape.gather_rows(b.var("pos"), positions);
    tape.add(e, pos)
}

/// Scaled dot-product attention of `q` over the rows of `k`/`v`.
pub(crate) fn attention_graph<T: Scalar>(tape: &Tape<T>, q: Var, k: Var, v: Var) -> Var {
    let dk = tape.shape(q).1;
    let scores = tape.scale(tape.matmul_t(q, k), T::from_f64_lossy(1.0 / (dk as f64).sqrt()));
    let w = tape.softmax_rows(scores);
    tape.matmul(w, v)
}

fn block_graph<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, prefix: &str, x: Var, heads: usize) -> Var {
    let p = |s: &str| b.var(&format!("{prefix}.{s}"));
    let h = tape.layer_norm(x, p("ln1.g"), p("ln1.b"));
    let q = tape.linear(h, p("attn.q.w"), p("attn.q.b"));
    let k = tape.linear(h, p("attn.k.w"), p("attn.k.b"));
    let v = tape.linear(h, p("attn.v.w"), p("attn.v.b"));
    let d = tape.shape(x).1;
    let dh = d / heads;
    let outs: Vec<Var> = (0..heads)
        .map(|i| {
            let s = |m| tape.slice_cols(m, i * dh, dh);
            attention_graph(tape, s(q), s(k), s(v))
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let x = tape.add(x, tape.linear(cat, p("attn.o.w"), p("attn.o.b")));
    let h = tape.layer_norm(x, p("ln2.g"), p("ln2.b"));
    let f = tape.gelu(tape.linear(h, p("mlp.fc1.w"), p("mlp.fc1.b")));
    tape.add(x, tape.linear(f, p("mlp.fc2.w"), p("mlp.fc2.b")))
}

pub(crate) fn encoder_graph<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, cfg: &NetConfig, mut x: Var) -> Var {
    for l in 0..cfg.depth_enc {
        x = block_graph(tape, b, &format!("enc.{l}"), x, cfg.heads);
    }
    tape.layer_norm(x, b.var("enc.norm.g"), b.var("enc.norm.b"))
}

/// Records the MAE pass; returns the reconstructions of the masked tokens,
/// their normalized targets and the loss node.
pub(crate) fn mae_graph<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound<'_, T>,
    cfg: &NetConfig,
    clip: &ClipTensor,
    plan: &MaskPlan,
) -> Result<(Var, Matrix<T>, Vec<usize>, Var)> {
    check_clip(clip, cfg)?;
    let part = apply_mask(clip, cfg.tube_dims, plan)?;
    let n = plan.tokens();
    if part.masked.is_empty() || part.visible.is_empty() {
        return Err(invalid("plan must leave at least one visible and one masked token"));
    }
    let pd = cfg.patch_dim();
    let x = embed_graph(tape, b, tube_matrix(&part.visible_tokens, pd), &part.visible);
    let latent = encoder_graph(tape, b, cfg, x);
    let proj = tape.linear(latent, b.var("dec.proj.w"), b.var("dec.proj.b"));
    let masks = tape.gather_rows(b.var("mask_token"), &vec![0; part.masked.len()]);
    let stacked = tape.concat_rows(&[proj, masks]);
    // canonical slot i reads row order[i] of [visible; masked]
    let mut order = vec![0; n];
    for (r, &i) in part.visible.iter().chain(&part.masked).enumerate() {
        order[i] = r;
    }
    let seq = tape.gather_rows(stacked, &order);
    let all: Vec<usize> = (0..n).collect();
    let mut y = tape.add(seq, tape.gather_rows(b.var("dec.pos"), &all));
    for l in 0..cfg.depth_dec {
        y = block_graph(tape, b, &format!("dec.{l}"), y, cfg.heads);
    }
    let y = tape.layer_norm(y, b.var("dec.norm.g"), b.var("dec.norm.b"));
    let ym = tape.gather_rows(y, &part.masked);
    let recon = tape.linear(ym, b.var("head.w"), b.var("head.b"));
    let tubes = clip.tubes(cfg.tube_dims)?;
    let mut target = Matrix::zeros(part.masked.len(), pd);
    for (r, &i) in part.masked.iter().enumerate() {
        for (o, v) in target.row_mut(r).iter_mut().zip(normalize_tube(&tubes[i])) {
            *o = T::from_f64_lossy(v);
        }
    }
    let loss = tape.mse(recon, target.clone());
    Ok((recon, target, part.masked, loss))
}

pub(crate) fn mca_graph<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, cfg: &NetConfig, inner: Var, outer: Var) -> Var {
    let mut fused = inner;
    for l in 0..cfg.mca_depth {
        let heads: Vec<Var> = (0..cfg.mca_heads)
            .map(|i| {
                let w = |m: &str| b.var(&format!("mca.{l}.{m}.{i}"));
                let q = tape.matmul(fused, w("wq"));
                let k = tape.matmul(outer, w("wk"));
                let v = tape.matmul(outer, w("wv"));
                attention_graph(tape, q, k, v)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        fused = tape.matmul(cat, b.var(&format!("mca.{l}.wo")));
    }
    fused
}

/// Logits and probabilities of the mean-pooled tokens.
pub(crate) fn classify_graph<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, fused: Var) -> (Var, Var) {
    let pooled = tape.mean_rows(fused);
    let logits = tape.linear(pooled, b.var("fc.w"), b.var("fc.b"));
    (logits, tape.softmax_rows(logits))
}

/// Records the classification pass over all tokens of `clip`; returns the
/// probability row and the loss node.
pub(crate) fn finetune_graph<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound<'_, T>,
    cfg: &NetConfig,
    clip: &ClipTensor,
    grid: &TubeGrid,
    label: usize,
) -> Result<(Var, Var)> {
    check_clip(clip, cfg)?;
    if label >= cfg.classes {
        return Err(invalid(format!("label {label} out of range for {} classes", cfg.classes)));
    }
    if grid.clip_dims != cfg.clip_dims || grid.tube_dims != cfg.tube_dims {
        return Err(invalid("tube grid does not match the network input"));
    }
    let n = grid.tokens();
    let all: Vec<usize> = (0..n).collect();
    let x = embed_graph(tape, b, tube_matrix(&clip.tubes(cfg.tube_dims)?, cfg.patch_dim()), &all);
    let z = encoder_graph(tape, b, cfg, x);
    let (inner, outer): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| grid.token_inside(i));
    // with one side empty the other side is the whole token set
    let fused = if inner.is_empty() || outer.is_empty() {
        z
    } else {
        let zi = tape.gather_rows(z, &inner);
        let zo = tape.gather_rows(z, &outer);
        mca_graph(tape, b, cfg, zi, zo)
    };
    let (_, probs) = classify_graph(tape, b, fused);
    let loss = tape.neg_log_at(probs, label, T::from_f64_lossy(CE_EPS));
    Ok((probs, loss))
}

/// One embedding per tube, in canonical order, with positions added.
pub fn patch_embed<T: Scalar>(clip: &ClipTensor, cfg: &NetConfig, params: &TinyNetParams<T>) -> Result<Matrix<T>> {
    check_clip(clip, cfg)?;
    let tape = Tape::new();
    let b = params.bind(&tape);
    let n = cfg.tokens()?;
    let all: Vec<usize> = (0..n).collect();
    let e = embed_graph(&tape, &b, tube_matrix(&clip.tubes(cfg.tube_dims)?, cfg.patch_dim()), &all);
    let out = tape.value(e).clone();
    Ok(out)
}

/// Encoder blocks and final norm over already-embedded tokens.
pub fn encoder_forward<T: Scalar>(tokens: &Matrix<T>, cfg: &NetConfig, params: &TinyNetParams<T>) -> Result<Matrix<T>> {
    if tokens.rows() == 0 {
        return Err(invalid("encoder needs at least one token"));
    }
    if tokens.cols() != cfg.d_model {
        return Err(invalid(format!("tokens have width {}, expected {}", tokens.cols(), cfg.d_model)));
    }
    let tape = Tape::new();
    let b = params.bind(&tape);
    let x = tape.leaf(tokens.clone());
    let z = encoder_graph(&tape, &b, cfg, x);
    let out = tape.value(z).clone();
    Ok(out)
}

/// Encodes only the tubes `plan` leaves visible.
pub fn encode_visible<T: Scalar>(
    clip: &ClipTensor,
    plan: &MaskPlan,
    cfg: &NetConfig,
    params: &TinyNetParams<T>,
) -> Result<Matrix<T>> {
    check_clip(clip, cfg)?;
    let part = apply_mask(clip, cfg.tube_dims, plan)?;
    if part.visible.is_empty() {
        return Err(invalid("encoder needs at least one visible token"));
    }
    let tape = Tape::new();
    let b = params.bind(&tape);
    let x = embed_graph(&tape, &b, tube_matrix(&part.visible_tokens, cfg.patch_dim()), &part.visible);
    let z = encoder_graph(&tape, &b, cfg, x);
    let out = tape.value(z).clone();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeOutput<T> {
    /// One row per masked token, in increasing token order.
    pub reconstruction: Matrix<T>,
    pub target: Matrix<T>,
    pub masked: Vec<usize>,
    pub loss: f64,
}

pub fn mae_forward<T: Scalar>(
    clip: &ClipTensor,
    plan: &MaskPlan,
    cfg: &NetConfig,
    params: &TinyNetParams<T>,
) -> Result<MaeOutput<T>> {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let (recon, target, masked, loss) = mae_graph(&tape, &b, cfg, clip, plan)?;
    let reconstruction = tape.value(recon).clone();
    let loss = tape.scalar(loss).as_f64();
    Ok(MaeOutput { reconstruction, target, masked, loss })
}

/// Loss and per-tensor gradients of the reconstruction objective.
pub fn pretrain_gradients<T: Scalar>(
    clip: &ClipTensor,
    plan: &MaskPlan,
    cfg: &NetConfig,
    params: &TinyNetParams<T>,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let (_, _, _, loss) = mae_graph(&tape, &b, cfg, clip, plan)?;
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss).as_f64(), b.gradients(&grads)))
}

/// Loss, probabilities and per-tensor gradients of the classification
/// objective.
pub fn finetune_gradients<T: Scalar>(
    clip: &ClipTensor,
    grid: &TubeGrid,
    label: usize,
    cfg: &NetConfig,
    params: &TinyNetParams<T>,
) -> Result<(f64, Vec<f64>, Vec<Matrix<T>>)> {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let (probs, loss) = finetune_graph(&tape, &b, cfg, clip, grid, label)?;
    let grads = tape.backward(loss);
    let p = tape.value(probs).data().iter().map(|v| v.as_f64()).collect();
    Ok((tape.scalar(loss).as_f64(), p, b.gradients(&grads)))
}

pub fn cross_attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    if k.rows() == 0 || k.rows() != v.rows() {
        return Err(invalid("keys and values must be non-empty and equally many"));
    }
    if q.cols() != k.cols() {
        return Err(invalid("queries and keys differ in width"));
    }
    let tape = Tape::new();
    let out = attention_graph(&tape, tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let out = tape.value(out).clone();
    Ok(out)
}

/// Splits encoder tokens into the in-box and out-of-box sets.
pub fn split_embeddings<T: Scalar>(tokens: &Matrix<T>, grid: &TubeGrid) -> Result<(EmbeddingSet<T>, EmbeddingSet<T>)> {
    if tokens.rows() != grid.tokens() {
        return Err(invalid(format!("{} tokens for a grid of {}", tokens.rows(), grid.tokens())));
    }
    let pick = |inside: bool| {
        let rows: Vec<Vec<T>> =
            (0..tokens.rows()).filter(|&i| grid.token_inside(i) == inside).map(|i| tokens.row(i).to_vec()).collect();
        if rows.is_empty() {
            Matrix::zeros(0, tokens.cols())
        } else {
            Matrix::from_rows(&rows)
        }
    };
    Ok((EmbeddingSet::new(pick(true), Partition::Inner), EmbeddingSet::new(pick(false), Partition::Outer)))
}

/// Fuses inner tokens with outer context. An empty side falls back to the
/// other set unchanged.
pub fn mca_forward<T: Scalar>(
    inner: &EmbeddingSet<T>,
    outer: &EmbeddingSet<T>,
    cfg: &NetConfig,
    params: &TinyNetParams<T>,
) -> Result<EmbeddingSet<T>> {
    if inner.is_empty() && outer.is_empty() {
        return Err(invalid("both embedding sets are empty"));
    }
    if outer.is_empty() {
        return Ok(EmbeddingSet::new(inner.tokens.clone(), Partition::Fused));
    }
    if inner.is_empty() {
        return Ok(EmbeddingSet::new(outer.tokens.clone(), Partition::Fused));
    }
    let tape = Tape::new();
    let b = params.bind(&tape);
    let f = mca_graph(&tape, &b, cfg, tape.leaf(inner.tokens.clone()), tape.leaf(outer.tokens.clone()));
    let out = tape.value(f).clone();
    Ok(EmbeddingSet::new(out, Partition::Fused))
}

pub fn classify<T: Scalar>(fused: &EmbeddingSet<T>, params: &TinyNetParams<T>) -> Result<Prediction> {
    if fused.is_empty() {
        return Err(invalid("classification needs at least one token"));
    }
    let w = params.get("fc.w").ok_or_else(|| invalid("missing classifier"))?;
    if w.rows() != fused.tokens.cols() {
        return Err(invalid("token width does not match the classifier"));
    }
    let tape = Tape::new();
    let b = params.bind(&tape);
    let (logits, probs) = classify_graph(&tape, &b, tape.leaf(fused.tokens.clone()));
    let conv = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect();
    Ok(Prediction { logits: conv(logits), probs: conv(probs) })
}

pub fn cross_entropy(pred: &Prediction, label: usize) -> Result<f64> {
    let p = *pred
        .probs
        .get(label)
        .ok_or_else(|| invalid(format!("label {label} out of range for {} classes", pred.probs.len())))?;
    Ok(-p.max(CE_EPS).ln())
}
