use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub w_qkv: Array2<T>,
    pub b_qkv: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w_ff1: Array2<T>,
    pub b_ff1: Array1<T>,
    pub w_ff2: Array2<T>,
    pub b_ff2: Array1<T>,
}

/// Every tensor of the model. Also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
}

pub(crate) fn is_trainable(name: &str, frozen_prefix: usize) -> bool {
    if frozen_prefix == 0 {
        return true;
    }
    if let Some(rest) = name.strip_prefix("blocks.") {
        let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        return idx >= frozen_prefix;
    }
    !matches!(name, "tok_emb" | "pos_emb" | "patch_w" | "patch_b")
}

macro_rules! block_fields {
    ($m:ident, $b:expr, $i:expr, $out:ident) => {
        $out.push((format!("blocks.{}.ln1.g", $i), $b.ln1_g.$m().into_dyn()));
        $out.push((format!("blocks.{}.ln1.b", $i), $b.ln1_b.$m().into_dyn()));
        $out.push((format!("blocks.{}.attn.w_qkv", $i), $b.w_qkv.$m().into_dyn()));
        $out.push((format!("blocks.{}.attn.b_qkv", $i), $b.b_qkv.$m().into_dyn()));
        $out.push((format!("blocks.{}.attn.w_o", $i), $b.w_o.$m().into_dyn()));
        $out.push((format!("blocks.{}.attn.b_o", $i), $b.b_o.$m().into_dyn()));
        $out.push((format!("blocks.{}.ln2.g", $i), $b.ln2_g.$m().into_dyn()));
        $out.push((format!("blocks.{}.ln2.b", $i), $b.ln2_b.$m().into_dyn()));
        $out.push((format!("blocks.{}.ff.w1", $i), $b.w_ff1.$m().into_dyn()));
        $out.push((format!("blocks.{}.ff.b1", $i), $b.b_ff1.$m().into_dyn()));
        $out.push((format!("blocks.{}.ff.w2", $i), $b.w_ff2.$m().into_dyn()));
        $out.push((format!("blocks.{}.ff.b2", $i), $b.b_ff2.$m().into_dyn()));
    };
}

macro_rules! all_fields {
    ($self:ident, $m:ident, $it:ident, $out:ident) => {
        $out.push(("tok_emb".to_string(), $self.tok_emb.$m().into_dyn()));
        $out.push(("pos_emb".to_string(), $self.pos_emb.$m().into_dyn()));
        $out.push(("patch_w".to_string(), $self.patch_w.$m().into_dyn()));
        $out.push(("patch_b".to_string(), $self.patch_b.$m().into_dyn()));
        for (i, b) in $self.blocks.$it().enumerate() {
            block_fields!($m, b, i, $out);
        }
        $out.push(("ln_f.g".to_string(), $self.lnf_g.$m().into_dyn()));
        $out.push(("ln_f.b".to_string(), $self.lnf_b.$m().into_dyn()));
        $out.push(("head.w".to_string(), $self.head_w.$m().into_dyn()));
        $out.push(("head.b".to_string(), $self.head_b.$m().into_dyn()));
    };
}

impl<T: Scalar> Params<T> {
    /// Named views in a fixed order (embeddings, blocks, final norm, head).
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::with_capacity(8 + 12 * self.blocks.len());
        all_fields!(self, view, iter, out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::with_capacity(8 + 12 * self.blocks.len());
        all_fields!(self, view_mut, iter_mut, out);
        out
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> Params<U> {
        let m1 = |a: &Array1<T>| a.mapv(f);
        let m2 = |a: &Array2<T>| a.mapv(f);
        Params {
            tok_emb: m2(&self.tok_emb),
            pos_emb: m2(&self.pos_emb),
            patch_w: m2(&self.patch_w),
            patch_b: m1(&self.patch_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: m1(&b.ln1_g),
                    ln1_b: m1(&b.ln1_b),
                    w_qkv: m2(&b.w_qkv),
                    b_qkv: m1(&b.b_qkv),
                    w_o: m2(&b.w_o),
                    b_o: m1(&b.b_o),
                    ln2_g: m1(&b.ln2_g),
                    ln2_b: m1(&b.ln2_b),
                    w_ff1: m2(&b.w_ff1),
                    b_ff1: m1(&b.b_ff1),
                    w_ff2: m2(&b.w_ff2),
                    b_ff2: m1(&b.b_ff2),
                })
                .collect(),
            lnf_g: m1(&self.lnf_g),
            lnf_b: m1(&self.lnf_b),
            head_w: m2(&self.head_w),
            head_b: m1(&self.head_b),
        }
    }

    pub fn zeros_like(&self) -> Params<T> {
        self.map(|_| T::zero())
    }

    /// Sets every element to zero, keeping allocations.
    pub fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_names() {
        assert!(is_trainable("tok_emb", 0));
        assert!(!is_trainable("tok_emb", 1));
        assert!(!is_trainable("blocks.0.ff.w1", 1));
        assert!(is_trainable("blocks.1.ff.w1", 1));
        assert!(!is_trainable("blocks.11.ff.w1", 12));
        assert!(is_trainable("blocks.11.ff.w1", 2));
        assert!(is_trainable("head.w", 4));
        assert!(is_trainable("ln_f.g", 4));
    }
}
