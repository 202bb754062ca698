//! Uniform access to the flat arrays of a parameter container, in a fixed
//! order. Optimizers, moving averages and serialization all walk this view.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::DenoiserParams;
use crate::tensor::Matrix;

pub trait ParamSet {
    /// Array names, in the same order as [`ParamSet::slices`].
    fn names(&self) -> Vec<String>;
    /// `(rows, cols)` of each array.
    fn dims(&self) -> Vec<(usize, usize)>;
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

impl ParamSet for Vec<f64> {
    fn names(&self) -> Vec<String> {
        vec![String::from("values")]
    }
    fn dims(&self) -> Vec<(usize, usize)> {
        vec![(1, self.len())]
    }
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl ParamSet for Matrix {
    fn names(&self) -> Vec<String> {
        vec![String::from("matrix")]
    }
    fn dims(&self) -> Vec<(usize, usize)> {
        vec![self.shape()]
    }
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.data.as_slice()]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.data.as_mut_slice()]
    }
}

const BLOCK_ARRAYS: [&str; 16] = [
    "norm1_gain",
    "norm1_bias",
    "self_attn.w_q",
    "self_attn.w_k",
    "self_attn.w_v",
    "norm2_gain",
    "norm2_bias",
    "cross_attn.w_q",
    "cross_attn.w_k",
    "cross_attn.w_v",
    "norm3_gain",
    "norm3_bias",
    "ff_w1",
    "ff_b1",
    "ff_w2",
    "ff_b2",
];

impl DenoiserParams {
    /// Arrays with their names, in [`ParamSet`] order.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("patch_bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let arrays = [
                &b.norm1_gain,
                &b.norm1_bias,
                &b.self_attn.w_q,
                &b.self_attn.w_k,
                &b.self_attn.w_v,
                &b.norm2_gain,
                &b.norm2_bias,
                &b.cross_attn.w_q,
                &b.cross_attn.w_k,
                &b.cross_attn.w_v,
                &b.norm3_gain,
                &b.norm3_bias,
                &b.ff_w1,
                &b.ff_b1,
                &b.ff_w2,
                &b.ff_b2,
            ];
            for (name, m) in BLOCK_ARRAYS.iter().zip(arrays) {
                out.push((format!("blocks.{i}.{name}"), m));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("out_proj".into(), &self.out_proj));
        out.push(("out_bias".into(), &self.out_bias));
        out.push(("skip_proj".into(), &self.skip_proj));
        out.push(("skip_time".into(), &self.skip_time));
        out.push(("embed_table".into(), &self.embed_table));
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.patch_embed, &mut self.patch_bias, &mut self.pos_embed];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.norm1_gain);
            out.push(&mut b.norm1_bias);
            out.push(&mut b.self_attn.w_q);
            out.push(&mut b.self_attn.w_k);
            out.push(&mut b.self_attn.w_v);
            out.push(&mut b.norm2_gain);
            out.push(&mut b.norm2_bias);
            out.push(&mut b.cross_attn.w_q);
            out.push(&mut b.cross_attn.w_k);
            out.push(&mut b.cross_attn.w_v);
            out.push(&mut b.norm3_gain);
            out.push(&mut b.norm3_bias);
            out.push(&mut b.ff_w1);
            out.push(&mut b.ff_b1);
            out.push(&mut b.ff_w2);
            out.push(&mut b.ff_b2);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.out_proj);
        out.push(&mut self.out_bias);
        out.push(&mut self.skip_proj);
        out.push(&mut self.skip_time);
        out.push(&mut self.embed_table);
        out
    }
}

impl ParamSet for DenoiserParams {
    fn names(&self) -> Vec<String> {
        self.named_matrices().into_iter().map(|(n, _)| n).collect()
    }
    fn dims(&self) -> Vec<(usize, usize)> {
        self.named_matrices().iter().map(|(_, m)| m.shape()).collect()
    }
    fn slices(&self) -> Vec<&[f64]> {
        self.named_matrices()
            .into_iter()
            .map(|(_, m)| m.data.as_slice())
            .collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.matrices_mut()
            .into_iter()
            .map(|m| m.data.as_mut_slice())
            .collect()
    }
}
