//! Text side of the model: a closed-vocabulary tokenizer, the learnable
//! token-embedding lookup, timestep modulation of the text features and
//! the gated cross-attention operator through which they reach the image.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{attention_forward, AttentionCache};
use crate::scene::{Color, Position, Shape};
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const NULL: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<null>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `words`, placing the reserved tokens first.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|w| w.to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its full token list (reserved tokens included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::InvalidInput(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut lookup = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("invalid token {t:?}")));
            }
            if i >= RESERVED.len() && *t != t.to_lowercase() {
                return Err(Error::InvalidInput(format!("token {t:?} is not lowercase")));
            }
            if lookup.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    /// Every word the scene caption grammar can produce.
    pub fn scene_grammar() -> Self {
        let mut words = vec!["a", "in", "the"];
        words.extend(Shape::ALL.iter().map(|s| s.word()));
        words.extend(Color::ALL.iter().map(|c| c.word()));
        words.extend(Position::ALL.iter().map(|p| p.word()));
        Self::new(words).expect("scene grammar words are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    /// Index of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK)
    }
}

/// Lowercases and replaces every character that is not alphanumeric or an
/// inner hyphen with a space.
pub fn normalize_caption(caption: &str) -> String {
    let mut out = String::with_capacity(caption.len());
    for ch in caption.chars() {
        if ch.is_alphanumeric() || ch == '-' {
            out.extend(ch.to_lowercase());
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace()
        .map(|w| w.trim_matches('-'))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps a caption to exactly `len` token ids, truncating or padding with [`PAD`].
pub fn tokenize(caption: &str, vocab: &Vocabulary, len: usize) -> Vec<usize> {
    assert!(len >= 1, "token length must be positive");
    let mut ids: Vec<usize> = normalize_caption(caption)
        .split_whitespace()
        .map(|w| vocab.id(w))
        .take(len)
        .collect();
    ids.resize(len, PAD);
    ids
}

/// Conditioning input for one image.
///
/// The token features themselves are derived from the model's embedding
/// table at evaluation time (see [`embed_text`] and [`time_modulate`]), so
/// a context stays valid across parameter updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    pub token_ids: Vec<usize>,
    /// Multiplier on the cross-attention residual, in `[0, 1]`.
    pub gate: f64,
    /// Caption dropped: the cross-attention branch contributes nothing.
    pub null_context: bool,
}

impl TextContext {
    /// An all-PAD id vector is treated as a dropped caption.
    pub fn new(token_ids: Vec<usize>, gate: f64) -> Self {
        let null_context = token_ids.iter().all(|&id| id == PAD);
        Self {
            token_ids,
            gate: gate.clamp(0.0, 1.0),
            null_context,
        }
    }

    pub fn from_caption(caption: &str, vocab: &Vocabulary, len: usize, gate: f64) -> Self {
        Self::new(tokenize(caption, vocab, len), gate)
    }

    pub fn null(len: usize) -> Self {
        Self {
            token_ids: vec![PAD; len],
            gate: 0.0,
            null_context: true,
        }
    }

    /// Same tokens with the caption dropped.
    pub fn dropped(&self) -> Self {
        Self {
            token_ids: self.token_ids.clone(),
            gate: self.gate,
            null_context: true,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Whether the cross-attention branch can contribute anything.
    pub fn is_active(&self) -> bool {
        !self.null_context && self.gate != 0.0 && self.token_ids.iter().any(|&id| id != PAD)
    }

    /// `true` for every non-PAD position.
    pub fn mask(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&id| id != PAD).collect()
    }
}

/// Row lookup into `table`; PAD positions give zero rows.
pub fn embed_text(token_ids: &[usize], table: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(token_ids.len(), table.cols);
    for (l, &id) in token_ids.iter().enumerate() {
        if id >= table.rows {
            return Err(Error::InvalidInput(format!(
                "token id {id} outside embedding table of {} rows",
                table.rows
            )));
        }
        if id != PAD {
            out.row_mut(l).copy_from_slice(table.row(id));
        }
    }
    Ok(out)
}

/// Sinusoidal encoding of `t`: entry `2i` is `sin(t·ω_i)`, entry `2i+1` is
/// `cos(t·ω_i)`, with `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal_encoding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = libm::pow(10_000.0, -2.0 * i / dim as f64);
            let arg = t as f64 * freq;
            if j % 2 == 0 {
                libm::sin(arg)
            } else {
                libm::cos(arg)
            }
        })
        .collect()
}

/// Adds the timestep encoding to every non-PAD row; PAD rows stay zero.
pub fn time_modulate(embed: &Matrix, token_ids: &[usize], t: usize, steps: usize) -> Matrix {
    assert!(t >= 1 && t <= steps, "timestep {t} outside 1..={steps}");
    debug_assert_eq!(embed.rows, token_ids.len());
    let enc = sinusoidal_encoding(t, embed.cols);
    let mut out = embed.clone();
    for (l, &id) in token_ids.iter().enumerate() {
        if id != PAD {
            for (v, e) in out.row_mut(l).iter_mut().zip(&enc) {
                *v += e;
            }
        }
    }
    out
}

/// Projections of one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `d_img × d_k`
    pub w_q: Matrix,
    /// `d_txt × d_k`
    pub w_k: Matrix,
    /// `d_txt × d_img`
    pub w_v: Matrix,
}

impl AttentionParams {
    pub fn zeros(d_img: usize, d_txt: usize, d_k: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_img, d_k),
            w_k: Matrix::zeros(d_txt, d_k),
            w_v: Matrix::zeros(d_txt, d_img),
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.w_q.cols as f64)
    }

    fn check(&self, img_feats: &Matrix, text_feats: &Matrix) -> Result<()> {
        let ok = img_feats.cols == self.w_q.rows
            && text_feats.cols == self.w_k.rows
            && text_feats.cols == self.w_v.rows
            && self.w_v.cols == img_feats.cols
            && self.w_q.cols == self.w_k.cols;
        if !ok {
            return Err(Error::Shape(format!(
                "cross-attention: image {:?}, text {:?}, w_q {:?}, w_k {:?}, w_v {:?}",
                img_feats.shape(),
                text_feats.shape(),
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape()
            )));
        }
        Ok(())
    }
}

/// Ungated cross-attention with PAD positions masked out of the softmax.
/// `None` when the context has no usable tokens.
pub fn cross_attention_raw(
    img_feats: &Matrix,
    ctx: &TextContext,
    text_feats: &Matrix,
    params: &AttentionParams,
) -> Result<Option<(Matrix, AttentionCache)>> {
    params.check(img_feats, text_feats)?;
    if text_feats.rows != ctx.len() {
        return Err(Error::Shape(format!(
            "text features have {} rows for {} tokens",
            text_feats.rows,
            ctx.len()
        )));
    }
    if ctx.null_context || !ctx.token_ids.iter().any(|&id| id != PAD) {
        return Ok(None);
    }
    let mask = ctx.mask();
    Ok(Some(attention_forward(
        img_feats,
        text_feats,
        Some(&mask),
        &params.w_q,
        &params.w_k,
        &params.w_v,
    )))
}

/// `gate · softmax(mask(Q Kᵀ · scale)) · V`; exactly zero for a null context
/// or a zero gate.
pub fn cross_attention(
    img_feats: &Matrix,
    ctx: &TextContext,
    text_feats: &Matrix,
    params: &AttentionParams,
) -> Result<Matrix> {
    let zero = Matrix::zeros(img_feats.rows, img_feats.cols);
    if !ctx.is_active() {
        params.check(img_feats, text_feats)?;
        return Ok(zero);
    }
    match cross_attention_raw(img_feats, ctx, text_feats, params)? {
        Some((mut out, _)) => {
            out.scale(ctx.gate);
            Ok(out)
        }
        None => Ok(zero),
    }
}

/// Attention weights (`N × L`) of the cross-attention, or `None` for a null context.
pub fn cross_attention_weights(
    img_feats: &Matrix,
    ctx: &TextContext,
    text_feats: &Matrix,
    params: &AttentionParams,
) -> Result<Option<Matrix>> {
    Ok(cross_attention_raw(img_feats, ctx, text_feats, params)?.map(|(_, c)| c.probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::scene_grammar()
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocab();
        assert_eq!(v.len(), 20);
        assert_eq!(v.get("<pad>"), Some(PAD));
        assert_eq!(v.id("purple"), UNK);
        assert!(Vocabulary::new(["a", "a"]).is_err());
        let rebuilt = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(rebuilt, v);
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let ids = tokenize("a red circle", &v, 8);
        assert_eq!(
            ids,
            vec![v.id("a"), v.id("red"), v.id("circle"), PAD, PAD, PAD, PAD, PAD]
        );
        let empty = TextContext::from_caption("", &v, 8, 1.0);
        assert!(empty.token_ids.iter().all(|&i| i == PAD));
        assert!(empty.null_context);
        assert_eq!(tokenize("a RED Circle!!", &v, 8), ids);
        assert_eq!(tokenize("a red circle in the top-left", &v, 3).len(), 3);
    }

    /// Reference normalizer: character classes spelled out explicitly.
    fn reference_words(caption: &str) -> Vec<String> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for ch in caption.chars() {
            let lower = ch.to_ascii_lowercase();
            if lower.is_ascii_lowercase() || lower.is_ascii_digit() || lower == '-' {
                cur.push(lower);
            } else if !cur.is_empty() {
                words.push(core::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
            .into_iter()
            .map(|w| w.trim_matches('-').to_string())
            .filter(|w| !w.is_empty())
            .collect()
    }

    #[test]
    fn normalization_matches_reference_over_grammar() {
        let v = vocab();
        let decorations = ["", "!!", ".", ",", "?"];
        for spec in crate::scene::SceneSpec::all_combinations() {
            let base = spec.caption();
            for (k, deco) in decorations.iter().enumerate() {
                let noisy: String = base
                    .split(' ')
                    .enumerate()
                    .map(|(i, w)| {
                        let w = if (i + k) % 2 == 0 { w.to_uppercase() } else { w.to_string() };
                        format!("{w}{deco}")
                    })
                    .collect::<Vec<_>>()
                    .join("  ");
                let expected: Vec<usize> = reference_words(&noisy).iter().map(|w| v.id(w)).collect();
                let mut expected8 = expected.clone();
                expected8.resize(8, PAD);
                assert_eq!(tokenize(&noisy, &v, 8), expected8, "{noisy}");
                assert_eq!(tokenize(&noisy, &v, 8), tokenize(&base, &v, 8));
            }
        }
    }

    #[test]
    fn embedding_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = Matrix::randn(20, 4, 1.0, &mut rng);
        let e = embed_text(&[PAD, PAD], &table).unwrap();
        assert!(e.data.iter().all(|&v| v == 0.0));
        let e = embed_text(&[7, PAD], &table).unwrap();
        assert_eq!(e.row(0), table.row(7));
        assert!(embed_text(&[20], &table).is_err());
    }

    #[test]
    fn sinusoid_direct_evaluation() {
        let enc = sinusoidal_encoding(1, 4);
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in enc.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // frozen: sin(1), cos(1), sin(0.01), cos(0.01)
        assert!((enc[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((enc[2] - 0.009_999_833_334_166_665).abs() < 1e-15);
    }

    #[test]
    fn modulation_keeps_pad_rows_and_depends_on_t() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = Matrix::randn(v.len(), 6, 1.0, &mut rng);
        let ids = tokenize("a red circle", &v, 5);
        let e = embed_text(&ids, &table).unwrap();
        let z3 = time_modulate(&e, &ids, 3, 10);
        let z7 = time_modulate(&e, &ids, 7, 10);
        assert_ne!(z3, z7);
        for l in 3..5 {
            assert!(z3.row(l).iter().all(|&x| x == 0.0));
        }
    }

    fn random_setup(seed: u64, ids: Vec<usize>, gate: f64) -> (Matrix, TextContext, Matrix, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = TextContext::new(ids, gate);
        let img = Matrix::randn(5, 6, 1.0, &mut rng);
        let mut text = Matrix::randn(ctx.len(), 4, 1.0, &mut rng);
        for (l, &id) in ctx.token_ids.iter().enumerate() {
            if id == PAD {
                text.row_mut(l).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let params = AttentionParams {
            w_q: Matrix::randn(6, 3, 1.0, &mut rng),
            w_k: Matrix::randn(4, 3, 1.0, &mut rng),
            w_v: Matrix::randn(4, 6, 1.0, &mut rng),
        };
        (img, ctx, text, params)
    }

    #[test]
    fn zero_gate_and_null_give_zero() {
        let (img, ctx, text, params) = random_setup(4, vec![3, 5, 0], 0.0);
        let out = cross_attention(&img, &ctx, &text, &params).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        let (img, ctx, text, params) = random_setup(4, vec![3, 5, 0], 1.0);
        let out = cross_attention(&img, &ctx.dropped(), &text, &params).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        let (img, ctx, text, params) = random_setup(4, vec![0, 0, 0], 1.0);
        assert!(ctx.null_context);
        let out = cross_attention(&img, &ctx, &text, &params).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_broadcasts_value() {
        let (img, ctx, text, params) = random_setup(5, vec![7], 0.5);
        let out = cross_attention(&img, &ctx, &text, &params).unwrap();
        let value = crate::tensor::matmul(&text, &params.w_v);
        for r in 0..img.rows {
            for c in 0..img.cols {
                assert!((out.get(r, c) - 0.5 * value.get(0, c)).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..1000, pads in proptest::collection::vec(any::<bool>(), 4)) {
            let mut ids: Vec<usize> = pads.iter().enumerate().map(|(i, &p)| if p { PAD } else { 3 + i }).collect();
            ids[0] = 3;
            let (img, ctx, text, params) = random_setup(seed, ids, 1.0);
            let w = cross_attention_weights(&img, &ctx, &text, &params).unwrap().unwrap();
            for r in 0..w.rows {
                let mut sum = 0.0;
                for (l, &id) in ctx.token_ids.iter().enumerate() {
                    let p = w.get(r, l);
                    prop_assert!(p >= 0.0);
                    if id == PAD {
                        prop_assert_eq!(p, 0.0);
                    } else {
                        sum += p;
                    }
                }
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn gate_is_exactly_linear(seed in 0u64..1000, gate in 0.0f64..1.0) {
            let (img, ctx, text, params) = random_setup(seed, vec![4, 9, 0, 11], gate);
            let full = cross_attention(&img, &TextContext { gate: 1.0, ..ctx.clone() }, &text, &params).unwrap();
            let gated = cross_attention(&img, &ctx, &text, &params).unwrap();
            for (a, b) in gated.data.iter().zip(&full.data) {
                prop_assert_eq!(*a, gate * b);
            }
        }

        #[test]
        fn pad_placement_does_not_matter(seed in 0u64..1000) {
            let (img, ctx, text, params) = random_setup(seed, vec![4, 0, 9, 0], 1.0);
            // move the PAD rows to the end, keeping token order
            let perm = [0usize, 2, 1, 3];
            let ids2: Vec<usize> = perm.iter().map(|&i| ctx.token_ids[i]).collect();
            let mut text2 = Matrix::zeros(text.rows, text.cols);
            for (dst, &src) in perm.iter().enumerate() {
                text2.row_mut(dst).copy_from_slice(text.row(src));
            }
            let ctx2 = TextContext::new(ids2, 1.0);
            let a = cross_attention(&img, &ctx, &text, &params).unwrap();
            let b = cross_attention(&img, &ctx2, &text2, &params).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
