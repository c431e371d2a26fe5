use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::Serialize;

use crate::tokenizer::{Segment, TokenizedSample, IMG_ID};
use crate::Scalar;

use super::params::{Block, Params};
use super::{Model, ModelError};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Attention weights of one sequence for every layer and head.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord<T> {
    /// `maps[layer][head]` is `len x len`, row = query, column = key.
    #[serde(skip)]
    pub maps: Vec<Vec<Array2<T>>>,
    pub input_ids: Vec<u32>,
    pub segments: Vec<Segment>,
    pub grid_size: usize,
    pub views: usize,
}


type RunOutput<T> = (Array2<T>, Option<ForwardCache<T>>, Option<AttentionRecord<T>>);
impl<T: Scalar> AttentionRecord<T> {
    pub fn n_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn n_heads(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Attention of query `q` over all keys at (layer, head).
    pub fn row(&self, layer: usize, head: usize, q: usize) -> ArrayView1<'_, T> {
        self.maps[layer][head].row(q)
    }

    pub fn image_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.segments[p] == Segment::Image).collect()
    }

    /// Largest deviation of any row sum from one, and whether any weight
    /// sits above the diagonal.
    pub fn check_stochastic_causal(&self) -> (f64, bool) {
        let mut worst: f64 = 0.0;
        let mut leak = false;
        for layer in &self.maps {
            for a in layer {
                for (q, row) in a.rows().into_iter().enumerate() {
                    let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
                    worst = worst.max((sum - 1.0).abs());
                    leak |= row.iter().skip(q + 1).any(|v| *v != T::zero());
                }
            }
        }
        (worst, leak)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    attn: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LnCache<T>,
    h2: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

/// Activations kept for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    ids: Vec<u32>,
    patch_rows: Vec<Option<[usize; 3]>>,
    first_block: usize,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    hf: Array2<T>,
    rows: Vec<usize>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::from_usize_lossy(x.ncols());
    let eps = T::from_f64_lossy(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    c: &LnCache<T>,
    g: &Array1<T>,
    dg: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dg += &(dy * &c.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = T::from_usize_lossy(dy.ncols());
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(c.rstd.iter()) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        row.zip_mut_with(&xh, |v, &x| *v = r * (*v - m1 - x * m2));
    }
    dx
}

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * a * u * u)
}

/// Row-wise causal softmax of `scores`, in place.
pub(crate) fn causal_softmax<T: Scalar>(scores: &mut Array2<T>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = T::neg_infinity();
        for j in 0..=i {
            max = max.max(row[j]);
        }
        let mut sum = T::zero();
        for j in 0..=i {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        }
        for j in 0..=i {
            row[j] = row[j] / sum;
        }
        for j in i + 1..row.len() {
            row[j] = T::zero();
        }
    }
}

impl<T: Scalar> Model<T> {
    fn check_sample(&self, sample: &TokenizedSample) -> Result<Vec<Option<[usize; 3]>>, ModelError> {
        let cfg = &self.cfg;
        if sample.len() > cfg.max_seq_len {
            return Err(ModelError::TooLong {
                len: sample.len(),
                max: cfg.max_seq_len,
            });
        }
        let n_img = sample.input_ids.iter().filter(|&&i| i == IMG_ID).count();
        if n_img != cfg.patch_count() || sample.images.len() != cfg.views {
            return Err(ModelError::ImageCount {
                expected: cfg.patch_count(),
                got: n_img,
            });
        }
        if let Some(bad) = sample.images.iter().find(|g| g.size() != cfg.grid_size) {
            return Err(ModelError::ImageSize {
                expected: cfg.grid_size,
                got: bad.size(),
            });
        }
        let p = cfg.grid_size;
        let mut k = 0;
        sample
            .input_ids
            .iter()
            .map(|&id| {
                if id as usize >= cfg.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab: cfg.vocab_size,
                    });
                }
                if id != IMG_ID {
                    return Ok(None);
                }
                let (view, cell) = (k / (p * p), k % (p * p));
                k += 1;
                let (row, col) = (cell / p, cell % p);
                let color = sample.images[view].get(row, col) as usize;
                Ok(Some(self.patch_feature_rows(color, row, col)))
            })
            .collect()
    }

    pub(crate) fn patch_feature_rows(&self, color: usize, row: usize, col: usize) -> [usize; 3] {
        let c = self.cfg.num_colors;
        [color.min(c - 1), c + row, c + self.cfg.grid_size + col]
    }

    /// Input vector for one position: token or patch embedding plus position.
    pub(crate) fn embed_one(&self, id: u32, patch: Option<[usize; 3]>, pos: usize) -> Array1<T> {
        let p = &self.params;
        let mut e = match patch {
            Some(rows) => {
                let mut e = p.patch_b.clone();
                for r in rows {
                    e += &p.patch_w.row(r);
                }
                e
            }
            None => p.tok_emb.row(id as usize).to_owned(),
        };
        e += &p.pos_emb.row(pos);
        e
    }

    fn block_forward(
        &self,
        b: &Block<T>,
        x: Array2<T>,
        keep: bool,
        record: Option<&mut Vec<Vec<Array2<T>>>>,
    ) -> (Array2<T>, Option<BlockCache<T>>) {
        let d = self.cfg.d_model;
        let dh = self.cfg.d_head();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (h1, ln1) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
        let qkv = h1.dot(&b.w_qkv) + &b.b_qkv;
        let mut o = Array2::zeros((x.nrows(), d));
        let mut attn = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t()) * scale;
            causal_softmax(&mut a);
            o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            attn.push(a);
        }
        let x_mid = x + &(o.dot(&b.w_o) + &b.b_o);
        let (h2, ln2) = layer_norm(&x_mid, &b.ln2_g, &b.ln2_b);
        let u = h2.dot(&b.w_ff1) + &b.b_ff1;
        let g = u.mapv(gelu);
        let out = &x_mid + &(g.dot(&b.w_ff2) + &b.b_ff2);
        if let Some(rec) = record {
            rec.push(attn.clone());
        }
        let cache = keep.then(|| BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            o,
            ln2,
            h2,
            u,
            g,
        });
        (out, cache)
    }

    fn run(
        &self,
        sample: &TokenizedSample,
        rows: &[usize],
        keep_from: Option<usize>,
        record: bool,
    ) -> Result<RunOutput<T>, ModelError> {
        let patch_rows = self.check_sample(sample)?;
        let n = sample.len();
        let mut x = Array2::zeros((n, self.cfg.d_model));
        for (pos, (&id, patch)) in sample.input_ids.iter().zip(&patch_rows).enumerate() {
            x.row_mut(pos).assign(&self.embed_one(id, *patch, pos));
        }
        let mut maps = record.then(Vec::new);
        let mut caches = Vec::new();
        for (i, b) in self.params.blocks.iter().enumerate() {
            let keep = keep_from.is_some_and(|k| i >= k);
            let (next, cache) = self.block_forward(b, x, keep, maps.as_mut());
            x = next;
            caches.extend(cache);
        }
        let (hf, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        let sel = hf.select(Axis(0), rows);
        let logits = sel.dot(&self.params.head_w) + &self.params.head_b;
        let cache = keep_from.map(|k| ForwardCache {
            ids: sample.input_ids.clone(),
            patch_rows,
            first_block: k,
            blocks: caches,
            lnf,
            hf,
            rows: rows.to_vec(),
        });
        let rec = maps.map(|maps| AttentionRecord {
            maps,
            input_ids: sample.input_ids.clone(),
            segments: sample.segments.clone(),
            grid_size: self.cfg.grid_size,
            views: self.cfg.views,
        });
        Ok((logits, cache, rec))
    }

    /// Logits at every position, `len x vocab_size`.
    pub fn forward(
        &self,
        sample: &TokenizedSample,
        record_attention: bool,
    ) -> Result<(Array2<T>, Option<AttentionRecord<T>>), ModelError> {
        let rows: Vec<usize> = (0..sample.len()).collect();
        let (logits, _, rec) = self.run(sample, &rows, None, record_attention)?;
        Ok((logits, rec))
    }

    /// Logits at the given positions only.
    pub fn forward_rows(&self, sample: &TokenizedSample, rows: &[usize]) -> Result<Array2<T>, ModelError> {
        Ok(self.run(sample, rows, None, false)?.0)
    }

    /// Like [`Model::forward_rows`], keeping what [`Model::backward`] needs
    /// for the trainable blocks.
    pub fn forward_train(
        &self,
        sample: &TokenizedSample,
        rows: &[usize],
    ) -> Result<(Array2<T>, ForwardCache<T>), ModelError> {
        let (logits, cache, _) = self.run(sample, rows, Some(self.frozen_prefix()), false)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the cached logits rows is `dlogits`. Frozen tensors are not
    /// touched.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Array2<T>, grads: &mut Params<T>) {
        let p = &self.params;
        let sel = cache.hf.select(Axis(0), &cache.rows);
        grads.head_w += &sel.t().dot(dlogits);
        grads.head_b += &dlogits.sum_axis(Axis(0));
        let dsel = dlogits.dot(&p.head_w.t());
        let mut dhf = Array2::zeros(cache.hf.raw_dim());
        for (i, &r) in cache.rows.iter().enumerate() {
            let mut row = dhf.row_mut(r);
            row += &dsel.row(i);
        }
        let mut dx = layer_norm_backward(&dhf, &cache.lnf, &p.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

        for (ci, bi) in (cache.first_block..self.cfg.n_layers).enumerate().rev() {
            dx = self.block_backward(&p.blocks[bi], &cache.blocks[ci], dx, &mut grads.blocks[bi]);
        }
        if cache.first_block > 0 {
            return;
        }
        for (pos, (&id, patch)) in cache.ids.iter().zip(&cache.patch_rows).enumerate() {
            let g = dx.row(pos);
            let mut pe = grads.pos_emb.row_mut(pos);
            pe += &g;
            match patch {
                Some(rows) => {
                    grads.patch_b += &g;
                    for &r in rows {
                        let mut w = grads.patch_w.row_mut(r);
                        w += &g;
                    }
                }
                None => {
                    let mut t = grads.tok_emb.row_mut(id as usize);
                    t += &g;
                }
            }
        }
    }

    fn block_backward(&self, b: &Block<T>, c: &BlockCache<T>, dout: Array2<T>, gb: &mut Block<T>) -> Array2<T> {
        let d = self.cfg.d_model;
        let dh = self.cfg.d_head();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();

        gb.w_ff2 += &c.g.t().dot(&dout);
        gb.b_ff2 += &dout.sum_axis(Axis(0));
        let mut du = dout.dot(&b.w_ff2.t());
        du.zip_mut_with(&c.u, |g, &u| *g *= gelu_grad(u));
        gb.w_ff1 += &c.h2.t().dot(&du);
        gb.b_ff1 += &du.sum_axis(Axis(0));
        let dh2 = du.dot(&b.w_ff1.t());
        let dx_mid = dout + &layer_norm_backward(&dh2, &c.ln2, &b.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);

        gb.w_o += &c.o.t().dot(&dx_mid);
        gb.b_o += &dx_mid.sum_axis(Axis(0));
        let d_o = dx_mid.dot(&b.w_o.t());
        let mut dqkv = Array2::zeros(c.qkv.raw_dim());
        for h in 0..self.cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let q = c.qkv.slice(s![.., cols.clone()]);
            let k = c.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = c.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let a = &c.attn[h];
            let doh = d_o.slice(s![.., cols.clone()]);
            let da = doh.dot(&v.t());
            let dv = a.t().dot(&doh);
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&arow, |x, &p| *x -= p * dot);
            }
            ds *= scale;
            dqkv.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        gb.w_qkv += &c.h1.t().dot(&dqkv);
        gb.b_qkv += &dqkv.sum_axis(Axis(0));
        let dh1 = dqkv.dot(&b.w_qkv.t());
        dx_mid + &layer_norm_backward(&dh1, &c.ln1, &b.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_are_causal_distributions() {
        let mut a = Array2::from_shape_fn((5, 5), |(i, j)| (i * 7 + j * 3) as f64 * 0.1);
        causal_softmax(&mut a);
        for (i, row) in a.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
