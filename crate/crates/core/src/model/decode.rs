use ndarray::{s, Array1, Array2};

use crate::data::ImageGrid;
use crate::tokenizer::{Segment, TokenizedSample, EOS_ID, IMG_ID};
use crate::Scalar;

use super::forward::{gelu, layer_norm, AttentionRecord};
use super::{Model, ModelError};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Incremental decoder with a key/value cache. Feeding a sample in any
/// split of pushes gives the same logits as [`Model::forward`] up to rounding.
pub struct Decoder<'m, T: Scalar> {
    model: &'m Model<T>,
    images: Vec<ImageGrid>,
    img_seen: usize,
    /// Per layer, `max_seq_len x d_model`; rows `0..len` are filled.
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    /// `[layer][head][query]`, each row covering keys `0..=query`.
    rows: Option<Vec<Vec<Vec<Vec<T>>>>>,
    ids: Vec<u32>,
}

impl<'m, T: Scalar> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>, images: &[ImageGrid], record: bool) -> Result<Self, ModelError> {
        let cfg = &model.cfg;
        if images.len() != cfg.views {
            return Err(ModelError::ImageCount {
                expected: cfg.patch_count(),
                got: images.iter().map(|g| g.size() * g.size()).sum(),
            });
        }
        if let Some(bad) = images.iter().find(|g| g.size() != cfg.grid_size) {
            return Err(ModelError::ImageSize {
                expected: cfg.grid_size,
                got: bad.size(),
            });
        }
        let l = cfg.n_layers;
        let cache = || vec![Array2::zeros((cfg.max_seq_len, cfg.d_model)); l];
        Ok(Decoder {
            model,
            images: images.to_vec(),
            img_seen: 0,
            keys: cache(),
            values: cache(),
            rows: record.then(|| vec![vec![Vec::new(); cfg.n_heads]; l]),
            ids: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Appends one token and returns the next-token logits.
    pub fn push(&mut self, id: u32) -> Result<Array1<T>, ModelError> {
        self.push_many(&[id])
    }

    /// Appends several tokens in one pass and returns the logits after the last.
    pub fn push_many(&mut self, new_ids: &[u32]) -> Result<Array1<T>, ModelError> {
        let m = self.model;
        let cfg = &m.cfg;
        let start = self.ids.len();
        let end = start + new_ids.len();
        if new_ids.is_empty() {
            return Err(ModelError::TooLong { len: 0, max: cfg.max_seq_len });
        }
        if end > cfg.max_seq_len {
            return Err(ModelError::TooLong {
                len: end,
                max: cfg.max_seq_len,
            });
        }
        let p = cfg.grid_size;
        let mut x = Array2::zeros((new_ids.len(), cfg.d_model));
        for (i, &id) in new_ids.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            let patch = if id == IMG_ID {
                if self.img_seen >= cfg.patch_count() {
                    return Err(ModelError::ImageCount {
                        expected: cfg.patch_count(),
                        got: self.img_seen + 1,
                    });
                }
                let (view, cell) = (self.img_seen / (p * p), self.img_seen % (p * p));
                self.img_seen += 1;
                let color = self.images[view].get(cell / p, cell % p) as usize;
                Some(m.patch_feature_rows(color, cell / p, cell % p))
            } else {
                None
            };
            x.row_mut(i).assign(&m.embed_one(id, patch, start + i));
        }

        let d = cfg.d_model;
        let dh = cfg.d_head();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        for (li, b) in m.params.blocks.iter().enumerate() {
            let (h1, _) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
            let qkv = h1.dot(&b.w_qkv) + &b.b_qkv;
            self.keys[li].slice_mut(s![start..end, ..]).assign(&qkv.slice(s![.., d..2 * d]));
            self.values[li].slice_mut(s![start..end, ..]).assign(&qkv.slice(s![.., 2 * d..]));
            let mut o = Array2::zeros((new_ids.len(), d));
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![.., cols.clone()]);
                let k = self.keys[li].slice(s![..end, cols.clone()]);
                let v = self.values[li].slice(s![..end, cols.clone()]);
                let mut scores = q.dot(&k.t()) * scale;
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let visible = start + i + 1;
                    let max = row.iter().take(visible).copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if j < visible {
                            *s = (*s - max).exp();
                            sum += *s;
                        } else {
                            *s = T::zero();
                        }
                    }
                    row.mapv_inplace(|s| s / sum);
                    if let Some(rows) = self.rows.as_mut() {
                        rows[li][h].push(row.iter().take(visible).copied().collect());
                    }
                }
                o.slice_mut(s![.., cols]).assign(&scores.dot(&v));
            }
            x = x + o.dot(&b.w_o) + &b.b_o;
            let (h2, _) = layer_norm(&x, &b.ln2_g, &b.ln2_b);
            let g = (h2.dot(&b.w_ff1) + &b.b_ff1).mapv(gelu);
            x = x + g.dot(&b.w_ff2) + &b.b_ff2;
        }
        self.ids.extend_from_slice(new_ids);
        let last = x.slice(s![new_ids.len() - 1.., ..]).to_owned();
        let (hf, _) = layer_norm(&last, &m.params.lnf_g, &m.params.lnf_b);
        Ok(hf.row(0).dot(&m.params.head_w) + &m.params.head_b)
    }

    /// Square attention record over every pushed position.
    pub fn record(&self, segments: &[Segment]) -> Option<AttentionRecord<T>> {
        let rows = self.rows.as_ref()?;
        let n = self.ids.len();
        let maps = rows
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|qs| {
                        let mut a = Array2::zeros((n, n));
                        for (q, r) in qs.iter().enumerate() {
                            for (k, &v) in r.iter().enumerate() {
                                a[[q, k]] = v;
                            }
                        }
                        a
                    })
                    .collect()
            })
            .collect();
        Some(AttentionRecord {
            maps,
            input_ids: self.ids.clone(),
            segments: segments.to_vec(),
            grid_size: self.model.cfg.grid_size,
            views: self.model.cfg.views,
        })
    }
}

/// Greedy decoding after `prompt`, stopping at EOS or `max_new` tokens. With
/// `record_attention`, the record covers the prompt and every generated token;
/// generated positions are tagged `Reasoning` (EOS as `Special`).
pub fn generate<T: Scalar>(
    model: &Model<T>,
    prompt: &TokenizedSample,
    max_new: usize,
    record_attention: bool,
) -> Result<(Vec<u32>, Option<AttentionRecord<T>>), ModelError> {
    if prompt.len() + max_new > model.cfg.max_seq_len {
        return Err(ModelError::TooLong {
            len: prompt.len() + max_new,
            max: model.cfg.max_seq_len,
        });
    }
    if max_new == 0 {
        return Ok((Vec::new(), None));
    }
    let mut dec = Decoder::new(model, &prompt.images, record_attention)?;
    let mut logits = dec.push_many(&prompt.input_ids)?;
    let mut out = Vec::new();
    loop {
        let next = argmax(logits.iter().copied()) as u32;
        out.push(next);
        if next == EOS_ID || out.len() == max_new {
            if record_attention {
                dec.push(next)?;
            }
            break;
        }
        logits = dec.push(next)?;
    }
    let record = if record_attention {
        let mut segs = prompt.segments.clone();
        segs.extend(out.iter().map(|&id| if id == EOS_ID { Segment::Special } else { Segment::Reasoning }));
        dec.record(&segs)
    } else {
        None
    };
    Ok((out, record))
}
