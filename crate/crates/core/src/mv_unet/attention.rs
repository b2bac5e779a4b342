use ndarray::{s, Array2, Array4, Array5, ArrayView2, ArrayView4};

use crate::controllers::StackedFrames;
use crate::error::{Error, Result};
use crate::nn::Attention;

/// `(frames, c, h, w)` → `(frames·h·w, c)`, frame-major then row-major.
pub fn frames_to_tokens(frames: ArrayView4<'_, f64>) -> Array2<f64> {
    let (f, c, h, w) = frames.dim();
    frames
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((f * h * w, c))
        .expect("contiguous")
}

/// Inverse of [`frames_to_tokens`].
pub fn tokens_to_frames(tokens: Array2<f64>, frames: usize, h: usize, w: usize) -> Result<Array4<f64>> {
    let c = tokens.ncols();
    let t = tokens
        .into_shape_with_order((frames, h, w, c))
        .map_err(|e| Error::dim(e.to_string()))?;
    Ok(t.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned())
}

/// Self-attention over every token of every frame of one batch item.
pub fn dense_attention_frames(attn: &Attention, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    let (f, _, h, w) = x.dim();
    let tokens = frames_to_tokens(x);
    let out = attn.forward(tokens.view(), tokens.view())?;
    tokens_to_frames(out, f, h, w)
}

pub fn cross_attention_frames(attn: &Attention, x: ArrayView4<'_, f64>, context: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
    let (f, _, h, w) = x.dim();
    let tokens = frames_to_tokens(x);
    let out = attn.forward(tokens.view(), context)?;
    tokens_to_frames(out, f, h, w)
}

fn map_batch(stacked: &StackedFrames, d_out: usize, mut op: impl FnMut(ArrayView4<'_, f64>) -> Result<Array4<f64>>) -> Result<StackedFrames> {
    if stacked.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite values in stacked frames"));
    }
    let (b, f, c, h, w) = stacked.dim();
    if d_out != c {
        return Err(Error::dim(format!("attention maps {c} channels to {d_out}; shape must be preserved")));
    }
    let mut out = Array5::zeros((b, f, c, h, w));
    for bi in 0..b {
        let y = op(stacked.data.slice(s![bi, .., .., .., ..]))?;
        out.slice_mut(s![bi, .., .., .., ..]).assign(&y);
    }
    stacked.with_data(out)
}

/// Dense 3D self-attention: each batch item's `frames × h × w` tokens attend
/// to one another through shared projections. No positional encoding is
/// applied along any axis.
pub fn dense_3d_attention(attn: &Attention, stacked: &StackedFrames) -> Result<StackedFrames> {
    map_batch(stacked, attn.d_out(), |x| dense_attention_frames(attn, x))
}

/// Cross-attention from every frame token to the context tokens.
pub fn cross_attention(attn: &Attention, stacked: &StackedFrames, context: ArrayView2<'_, f64>) -> Result<StackedFrames> {
    if context.ncols() != attn.d_kv() {
        return Err(Error::dim(format!(
            "context tokens have dim {}, cross-attention expects {}",
            context.ncols(),
            attn.d_kv()
        )));
    }
    map_batch(stacked, attn.d_out(), |x| cross_attention_frames(attn, x, context))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::FrameRole;
    use crate::nn::ParamInit;
    use crate::prompting::{ViewLabel, RIG_ORDER};
    use ndarray::{array, Array1, Axis};

    fn stack(b: usize, prompts: usize, c: usize, h: usize, w: usize) -> StackedFrames {
        let data = Array5::from_shape_fn((b, 4 + prompts, c, h, w), |(bi, f, ci, y, x)| {
            (((bi * 31 + f * 7 + ci * 3 + y * 5 + x * 11) % 13) as f64 - 6.0) * 0.15
        });
        let roles = RIG_ORDER
            .iter()
            .map(|l| FrameRole::View(*l))
            .chain((0..prompts).map(|i| FrameRole::Prompt(ViewLabel::ALL[i])))
            .collect();
        StackedFrames::new(data, roles).unwrap()
    }

    #[test]
    fn token_layout_round_trips() {
        let s = stack(1, 2, 3, 2, 2);
        let x = s.data.slice(s![0, .., .., .., ..]);
        let t = frames_to_tokens(x);
        assert_eq!(t.dim(), (6 * 4, 3));
        // token (frame 5, y 1, x 0) sits at row 5*4 + 2
        assert_eq!(t.row(22), x.slice(s![5, .., 1, 0]));
        assert_eq!(tokens_to_frames(t, 6, 2, 2).unwrap(), x);
    }

    #[test]
    fn zero_query_projection_gives_mean_of_values() {
        let mut init = ParamInit::new(3);
        let mut attn = Attention::init(&mut init, 4, 4, 4, 4, 1);
        attn.wq.fill(0.0);
        attn.wo = Array2::eye(4);
        let s = stack(1, 1, 4, 2, 2);
        let out = dense_3d_attention(&attn, &s).unwrap();
        let tokens = frames_to_tokens(s.data.slice(s![0, .., .., .., ..]));
        let mean: Array1<f64> = tokens.dot(&attn.wv).mean_axis(Axis(0)).unwrap();
        let out_tokens = frames_to_tokens(out.data.slice(s![0, .., .., .., ..]));
        for row in out_tokens.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let data = Array5::from_shape_vec((1, 1, 2, 1, 1), vec![0.3, -0.8]).unwrap();
        let attn = Attention::identity(2);
        let out = dense_attention_frames(&attn, data.slice(s![0, .., .., .., ..])).unwrap();
        assert_eq!(out.into_raw_vec_and_offset().0, vec![0.3, -0.8]);
    }

    #[test]
    fn cross_attention_is_invariant_to_context_order() {
        let mut init = ParamInit::new(9);
        let attn = Attention::init(&mut init, 3, 5, 4, 3, 2);
        let s = stack(2, 2, 3, 2, 2);
        let ctx = init.matrix(7, 5, 1.0);
        let reversed = ctx.slice(s![..;-1, ..]).to_owned();
        let a = cross_attention(&attn, &s, ctx.view()).unwrap();
        let b = cross_attention(&attn, &s, reversed.view()).unwrap();
        let diff = (&a.data - &b.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn cross_attention_sees_local_tokens() {
        let mut init = ParamInit::new(10);
        let attn = Attention::init(&mut init, 3, 4, 4, 3, 1);
        let s = stack(1, 1, 3, 2, 2);
        let text = init.matrix(2, 4, 1.0);
        let local = init.matrix(3, 4, 1.0);
        let both = ndarray::concatenate(Axis(0), &[text.view(), local.view()]).unwrap();
        let a = cross_attention(&attn, &s, text.view()).unwrap();
        let b = cross_attention(&attn, &s, both.view()).unwrap();
        assert!((&a.data - &b.data).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn cross_attention_rejects_wrong_context_dim() {
        let attn = Attention::identity(3);
        let s = stack(1, 1, 3, 1, 1);
        let ctx = array![[1.0, 2.0]];
        assert!(matches!(cross_attention(&attn, &s, ctx.view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_rows_of_dense_attention_sum_to_one() {
        let mut init = ParamInit::new(11);
        let attn = Attention::init(&mut init, 4, 4, 4, 4, 2);
        let s = stack(1, 3, 4, 2, 2);
        let tokens = frames_to_tokens(s.data.slice(s![0, .., .., .., ..]));
        for head in 0..2 {
            let p = attn.probabilities(tokens.view(), tokens.view(), head).unwrap();
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
