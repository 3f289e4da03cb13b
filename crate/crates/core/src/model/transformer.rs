use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    add_bias, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, log_softmax, matmul, softmax, sum_rows_into,
    Scalar, View,
};
use super::{CausalLm, LmSession, ModelConfig, ModelError};
use crate::tokenizer::TokenId;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Matrices get weight decay, vectors (gains and biases) do not.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Named tensors packed into one flat buffer. Each gain is immediately
/// followed by its bias.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<ParamInfo>,
    init_std: Vec<Option<f64>>,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut init_std = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, std: Option<f64>| {
            let info = ParamInfo { name, shape, offset: total };
            total += info.len();
            tensors.push(info);
            init_std.push(std);
            tensors.len() - 1
        };
        let (d, ff, v) = (c.d_model, c.d_ff, c.vocab_size);
        let resid_std = INIT_STD / (2.0 * c.n_layers as f64).sqrt();
        let tok_emb = add("tok_emb".into(), vec![v, d], Some(INIT_STD));
        let pos_emb = add("pos_emb".into(), vec![c.max_seq_len, d], Some(INIT_STD));
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            blocks.push(Block {
                ln1_g: add(p("ln1.g"), vec![d], None),
                ln1_b: add(p("ln1.b"), vec![d], None),
                qkv_w: add(p("attn.qkv.w"), vec![d, 3 * d], Some(INIT_STD)),
                qkv_b: add(p("attn.qkv.b"), vec![3 * d], None),
                proj_w: add(p("attn.proj.w"), vec![d, d], Some(resid_std)),
                proj_b: add(p("attn.proj.b"), vec![d], None),
                ln2_g: add(p("ln2.g"), vec![d], None),
                ln2_b: add(p("ln2.b"), vec![d], None),
                fc_w: add(p("mlp.fc.w"), vec![d, ff], Some(INIT_STD)),
                fc_b: add(p("mlp.fc.b"), vec![ff], None),
                out_w: add(p("mlp.out.w"), vec![ff, d], Some(resid_std)),
                out_b: add(p("mlp.out.b"), vec![d], None),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![d], None);
        let lnf_b = add("lnf.b".into(), vec![d], None);
        let head_w = add("head.w".into(), vec![d, v], Some(INIT_STD));
        Self { tensors, init_std, tok_emb, pos_emb, blocks, lnf_g, lnf_b, head_w, total }
    }

    pub fn tensors(&self) -> &[ParamInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn r(&self, idx: usize) -> Range<usize> {
        self.tensors[idx].range()
    }

    /// Range spanning a gain and the bias right after it.
    fn pair(&self, g: usize, b: usize) -> Range<usize> {
        debug_assert_eq!(b, g + 1);
        self.tensors[g].offset..self.tensors[b].range().end
    }

    pub fn head_range(&self) -> Range<usize> {
        self.r(self.head_w)
    }
}

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<F>,
}

struct BlockCache<F> {
    ln1_xhat: Vec<F>,
    ln1_rstd: Vec<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    att: Vec<F>,
    y: Vec<F>,
    attn_drop: Option<Vec<F>>,
    ln2_xhat: Vec<F>,
    ln2_rstd: Vec<F>,
    h2: Vec<F>,
    f: Vec<F>,
    g: Vec<F>,
    mlp_drop: Option<Vec<F>>,
}

/// Activations kept from a forward pass for the backward pass.
pub(crate) struct Cache<F> {
    ids: Vec<TokenId>,
    /// Lengths of the packed sequences, in order.
    lens: Vec<usize>,
    emb_drop: Option<Vec<F>>,
    blocks: Vec<BlockCache<F>>,
    lnf_xhat: Vec<F>,
    lnf_rstd: Vec<F>,
    hf: Vec<F>,
    /// `[T × V]` log-probabilities.
    pub logp: Vec<F>,
}

/// Start offset of each packed sequence.
fn offsets(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .scan(0, |acc, &l| {
            let start = *acc;
            *acc += l;
            Some(start)
        })
        .collect()
}

fn dropout_mask<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<F> {
    let keep = F::lit(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect()
}

fn mul_assign<F: Scalar>(x: &mut [F], m: &[F]) {
    x.iter_mut().zip(m).for_each(|(a, &b)| *a = *a * b);
}

fn add_assign<F: Scalar>(x: &mut [F], y: &[F]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a += b);
}

impl<F: Scalar> Transformer<F> {
    /// Fresh model with weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Vec::with_capacity(layout.total);
        for (info, std) in layout.tensors.iter().zip(&layout.init_std) {
            match std {
                Some(s) => {
                    let normal = Normal::new(0.0, *s).expect("positive std");
                    params.extend((0..info.len()).map(|_| F::lit(normal.sample(&mut rng))));
                }
                None if info.name.ends_with(".g") => params.extend((0..info.len()).map(|_| F::one())),
                None => params.extend((0..info.len()).map(|_| F::zero())),
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        let params = self.params.iter().map(|v| G::lit(v.to_f64().unwrap_or(f64::NAN))).collect();
        Transformer { config: self.config.clone(), layout: self.layout.clone(), params }
    }

    fn p(&self, idx: usize) -> &[F] {
        &self.params[self.layout.r(idx)]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: ids.len(), limit: self.config.max_seq_len });
        }
        self.check_range(ids)
    }

    fn check_range(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Input sequence for predicting every token of `tokens`: the start token
    /// followed by all but the last token.
    pub fn shifted_input(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut input = Vec::with_capacity(tokens.len());
        if !tokens.is_empty() {
            input.push(self.config.bos_token);
            input.extend_from_slice(&tokens[..tokens.len() - 1]);
        }
        input
    }

    /// `[T × V]` next-token log-probabilities for every input position.
    pub fn log_probs(&self, ids: &[TokenId]) -> Result<Vec<F>, ModelError> {
        Ok(self.forward(ids, &[ids.len()], None)?.logp)
    }

    /// Forward pass over independent sequences packed back to back. `lens`
    /// gives their lengths; positions restart and attention stays inside
    /// each sequence.
    pub(crate) fn forward(&self, ids: &[TokenId], lens: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<Cache<F>, ModelError> {
        self.check_range(ids)?;
        if lens.iter().sum::<usize>() != ids.len() {
            return Err(ModelError::ShapeMismatch("sequence lengths do not cover the packed ids".into()));
        }
        if let Some(&len) = lens.iter().find(|&&l| l > self.config.max_seq_len) {
            return Err(ModelError::SequenceTooLong { len, limit: self.config.max_seq_len });
        }
        let c = &self.config;
        let (t, d, ff, v, nh, hd) = (ids.len(), c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim());
        let starts = offsets(lens);
        let p_drop = if rng.is_some() { c.dropout } else { 0.0 };
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let mut drop = |n: usize| match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Some(dropout_mask::<F>(r, n, p_drop)),
            _ => None,
        };

        let (tok, pos) = (self.p(self.layout.tok_emb), self.p(self.layout.pos_emb));
        let mut x = vec![F::zero(); t * d];
        for (&start, &len) in starts.iter().zip(lens) {
            for i in 0..len {
                let row = &mut x[(start + i) * d..(start + i + 1) * d];
                let id = ids[start + i] as usize;
                for j in 0..d {
                    row[j] = tok[id * d + j] + pos[i * d + j];
                }
            }
        }
        let emb_drop = drop(t * d);
        if let Some(m) = &emb_drop {
            mul_assign(&mut x, m);
        }

        let mut blocks = Vec::with_capacity(c.n_layers);
        for b in &self.layout.blocks {
            let mut h1 = vec![F::zero(); t * d];
            let (ln1_xhat, ln1_rstd) = layer_norm(&x, self.p(b.ln1_g), self.p(b.ln1_b), &mut h1);
            let mut qkv = vec![F::zero(); t * 3 * d];
            matmul(&h1, self.p(b.qkv_w), &mut qkv, t, d, 3 * d, false);
            add_bias(&mut qkv, self.p(b.qkv_b));

            let mut att = vec![F::zero(); nh * lens.iter().map(|l| l * l).sum::<usize>()];
            let mut y = vec![F::zero(); t * d];
            let mut att_off = 0;
            for (&start, &n) in starts.iter().zip(lens) {
                let qkv_s = &qkv[start * 3 * d..];
                for h in 0..nh {
                    let a = &mut att[att_off..att_off + n * n];
                    att_off += n * n;
                    let q = View::cols_of(qkv_s, n, 3 * d, h * hd, hd);
                    let k = View::cols_of(qkv_s, n, 3 * d, d + h * hd, hd);
                    let vv = View::cols_of(qkv_s, n, 3 * d, 2 * d + h * hd, hd);
                    gemm(q, k.t(), a, n, scale, F::zero());
                    for i in 0..n {
                        let row = &mut a[i * n..(i + 1) * n];
                        softmax(&mut row[..=i]);
                        row[i + 1..].fill(F::zero());
                    }
                    gemm(View::new(a, n, n), vv, &mut y[start * d + h * hd..], d, F::one(), F::zero());
                }
            }
            let mut ao = vec![F::zero(); t * d];
            matmul(&y, self.p(b.proj_w), &mut ao, t, d, d, false);
            add_bias(&mut ao, self.p(b.proj_b));
            let attn_drop = drop(t * d);
            if let Some(m) = &attn_drop {
                mul_assign(&mut ao, m);
            }
            add_assign(&mut x, &ao);

            let mut h2 = vec![F::zero(); t * d];
            let (ln2_xhat, ln2_rstd) = layer_norm(&x, self.p(b.ln2_g), self.p(b.ln2_b), &mut h2);
            let mut f = vec![F::zero(); t * ff];
            matmul(&h2, self.p(b.fc_w), &mut f, t, d, ff, false);
            add_bias(&mut f, self.p(b.fc_b));
            let g: Vec<F> = f.iter().map(|&z| gelu(z)).collect();
            let mut mo = vec![F::zero(); t * d];
            matmul(&g, self.p(b.out_w), &mut mo, t, ff, d, false);
            add_bias(&mut mo, self.p(b.out_b));
            let mlp_drop = drop(t * d);
            if let Some(m) = &mlp_drop {
                mul_assign(&mut mo, m);
            }
            add_assign(&mut x, &mo);

            blocks.push(BlockCache {
                ln1_xhat,
                ln1_rstd,
                h1,
                qkv,
                att,
                y,
                attn_drop,
                ln2_xhat,
                ln2_rstd,
                h2,
                f,
                g,
                mlp_drop,
            });
        }

        let mut hf = vec![F::zero(); t * d];
        let (lnf_xhat, lnf_rstd) = layer_norm(&x, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b), &mut hf);
        let mut logp = vec![F::zero(); t * v];
        matmul(&hf, self.p(self.layout.head_w), &mut logp, t, d, v, false);
        logp.chunks_exact_mut(v).for_each(log_softmax);

        Ok(Cache { ids: ids.to_vec(), lens: lens.to_vec(), emb_drop, blocks, lnf_xhat, lnf_rstd, hf, logp })
    }

    /// Adds the gradient of `Σ_t weights[t] · -log p(targets[t])` into `grads`.
    pub(crate) fn backward(&self, cache: &Cache<F>, targets: &[TokenId], weights: &[F], grads: &mut [F]) {
        let c = &self.config;
        let (t, d, ff, v, nh, hd) = (cache.ids.len(), c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim());
        assert_eq!(targets.len(), t);
        assert_eq!(weights.len(), t);
        assert_eq!(grads.len(), self.layout.total);
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let lay = &self.layout;

        let mut dlogits = vec![F::zero(); t * v];
        for i in 0..t {
            let w = weights[i];
            if w == F::zero() {
                continue;
            }
            let row = &mut dlogits[i * v..(i + 1) * v];
            for (o, &lp) in row.iter_mut().zip(&cache.logp[i * v..(i + 1) * v]) {
                *o = w * lp.exp();
            }
            row[targets[i] as usize] = row[targets[i] as usize] - w;
        }

        let mut dhf = vec![F::zero(); t * d];
        gemm(View::new(&dlogits, t, v), View::new(self.p(lay.head_w), d, v).t(), &mut dhf, d, F::one(), F::zero());
        gemm(View::new(&cache.hf, t, d).t(), View::new(&dlogits, t, v), &mut grads[lay.r(lay.head_w)], v, F::one(), F::one());

        let mut dx = vec![F::zero(); t * d];
        {
            let (dg, db) = grads[lay.pair(lay.lnf_g, lay.lnf_b)].split_at_mut(d);
            layer_norm_backward(&dhf, &cache.lnf_xhat, &cache.lnf_rstd, self.p(lay.lnf_g), dg, db, &mut dx);
        }

        let starts = offsets(&cache.lens);
        let longest = cache.lens.iter().copied().max().unwrap_or(0);
        let mut datt = vec![F::zero(); longest * longest];
        let mut ds = vec![F::zero(); longest * longest];
        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch
            let mut dm = dx.clone();
            if let Some(m) = &bc.mlp_drop {
                mul_assign(&mut dm, m);
            }
            sum_rows_into(&dm, &mut grads[lay.r(b.out_b)]);
            gemm(View::new(&bc.g, t, ff).t(), View::new(&dm, t, d), &mut grads[lay.r(b.out_w)], d, F::one(), F::one());
            let mut dg = vec![F::zero(); t * ff];
            gemm(View::new(&dm, t, d), View::new(self.p(b.out_w), ff, d).t(), &mut dg, ff, F::one(), F::zero());
            dg.iter_mut().zip(&bc.f).for_each(|(g, &z)| *g = *g * gelu_grad(z));
            sum_rows_into(&dg, &mut grads[lay.r(b.fc_b)]);
            gemm(View::new(&bc.h2, t, d).t(), View::new(&dg, t, ff), &mut grads[lay.r(b.fc_w)], ff, F::one(), F::one());
            let mut dh2 = vec![F::zero(); t * d];
            gemm(View::new(&dg, t, ff), View::new(self.p(b.fc_w), d, ff).t(), &mut dh2, d, F::one(), F::zero());
            {
                let (dgain, dbias) = grads[lay.pair(b.ln2_g, b.ln2_b)].split_at_mut(d);
                layer_norm_backward(&dh2, &bc.ln2_xhat, &bc.ln2_rstd, self.p(b.ln2_g), dgain, dbias, &mut dx);
            }

            // attention branch
            let mut da = dx.clone();
            if let Some(m) = &bc.attn_drop {
                mul_assign(&mut da, m);
            }
            sum_rows_into(&da, &mut grads[lay.r(b.proj_b)]);
            gemm(View::new(&bc.y, t, d).t(), View::new(&da, t, d), &mut grads[lay.r(b.proj_w)], d, F::one(), F::one());
            let mut dy = vec![F::zero(); t * d];
            gemm(View::new(&da, t, d), View::new(self.p(b.proj_w), d, d).t(), &mut dy, d, F::one(), F::zero());

            let mut dqkv = vec![F::zero(); t * 3 * d];
            let mut att_off = 0;
            for (&start, &n) in starts.iter().zip(&cache.lens) {
                let qkv_s = &bc.qkv[start * 3 * d..];
                let dqkv_s = &mut dqkv[start * 3 * d..];
                let (datt, ds) = (&mut datt[..n * n], &mut ds[..n * n]);
                for h in 0..nh {
                    let a = &bc.att[att_off..att_off + n * n];
                    att_off += n * n;
                    let q = View::cols_of(qkv_s, n, 3 * d, h * hd, hd);
                    let k = View::cols_of(qkv_s, n, 3 * d, d + h * hd, hd);
                    let vv = View::cols_of(qkv_s, n, 3 * d, 2 * d + h * hd, hd);
                    let dyh = View::cols_of(&dy[start * d..], n, d, h * hd, hd);
                    gemm(dyh, vv.t(), datt, n, F::one(), F::zero());
                    gemm(View::new(a, n, n).t(), dyh, &mut dqkv_s[2 * d + h * hd..], 3 * d, F::one(), F::zero());
                    for i in 0..n {
                        let (ar, dr, sr) = (&a[i * n..(i + 1) * n], &datt[i * n..(i + 1) * n], &mut ds[i * n..(i + 1) * n]);
                        let dot: F = (0..=i).map(|j| ar[j] * dr[j]).sum();
                        for j in 0..=i {
                            sr[j] = ar[j] * (dr[j] - dot);
                        }
                        sr[i + 1..].fill(F::zero());
                    }
                    gemm(View::new(ds, n, n), k, &mut dqkv_s[h * hd..], 3 * d, scale, F::zero());
                    gemm(View::new(ds, n, n).t(), q, &mut dqkv_s[d + h * hd..], 3 * d, scale, F::zero());
                }
            }
            sum_rows_into(&dqkv, &mut grads[lay.r(b.qkv_b)]);
            gemm(View::new(&bc.h1, t, d).t(), View::new(&dqkv, t, 3 * d), &mut grads[lay.r(b.qkv_w)], 3 * d, F::one(), F::one());
            let mut dh1 = vec![F::zero(); t * d];
            gemm(View::new(&dqkv, t, 3 * d), View::new(self.p(b.qkv_w), d, 3 * d).t(), &mut dh1, d, F::one(), F::zero());
            {
                let (dgain, dbias) = grads[lay.pair(b.ln1_g, b.ln1_b)].split_at_mut(d);
                layer_norm_backward(&dh1, &bc.ln1_xhat, &bc.ln1_rstd, self.p(b.ln1_g), dgain, dbias, &mut dx);
            }
        }

        if let Some(m) = &cache.emb_drop {
            mul_assign(&mut dx, m);
        }
        let tok = lay.r(lay.tok_emb).start;
        let pos = lay.r(lay.pos_emb).start;
        for (&start, &len) in starts.iter().zip(&cache.lens) {
            for i in 0..len {
                let row = &dx[(start + i) * d..(start + i + 1) * d];
                let id = cache.ids[start + i] as usize;
                add_assign(&mut grads[tok + id * d..tok + (id + 1) * d], row);
                add_assign(&mut grads[pos + i * d..pos + (i + 1) * d], row);
            }
        }
    }

    /// Weighted negative log-likelihood of `targets` given `input`, adding its
    /// gradient into `grads`.
    pub fn loss_and_grad(
        &self,
        input: &[TokenId],
        targets: &[TokenId],
        weights: &[F],
        grads: &mut [F],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<F, ModelError> {
        if targets.len() != input.len() || weights.len() != input.len() {
            return Err(ModelError::ShapeMismatch("input, targets, and weights differ in length".into()));
        }
        self.packed_loss_and_grad(input, targets, weights, &[input.len()], grads, dropout_rng)
    }

    /// [`Transformer::loss_and_grad`] over independent sequences packed back
    /// to back, with `lens` giving their lengths. Equals the sum over the
    /// sequences taken one at a time, but runs the dense layers in one pass.
    pub fn packed_loss_and_grad(
        &self,
        input: &[TokenId],
        targets: &[TokenId],
        weights: &[F],
        lens: &[usize],
        grads: &mut [F],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<F, ModelError> {
        if targets.len() != input.len() || weights.len() != input.len() {
            return Err(ModelError::ShapeMismatch("input, targets, and weights differ in length".into()));
        }
        self.check_range(targets)?;
        let cache = self.forward(input, lens, dropout_rng)?;
        let v = self.config.vocab_size;
        let loss = targets
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|(_, (_, &w))| w != F::zero())
            .map(|(i, (&tg, &w))| -w * cache.logp[i * v + tg as usize])
            .sum();
        self.backward(&cache, targets, weights, grads);
        Ok(loss)
    }

    /// Weighted loss without gradients.
    pub fn loss(&self, input: &[TokenId], targets: &[TokenId], weights: &[F]) -> Result<F, ModelError> {
        let logp = self.log_probs(input)?;
        let v = self.config.vocab_size;
        Ok(targets.iter().zip(weights).enumerate().map(|(i, (&tg, &w))| -w * logp[i * v + tg as usize]).sum())
    }

    pub fn start_session(&self) -> Session<'_, F> {
        Session::new(self)
    }
}

impl<F: Scalar> CausalLm for Transformer<F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn score(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_ids(tokens)?;
        let logp = self.log_probs(&self.shifted_input(tokens))?;
        let v = self.config.vocab_size;
        Ok(tokens.iter().enumerate().map(|(i, &tg)| logp[i * v + tg as usize].to_f64().unwrap_or(f64::NAN)).collect())
    }

    fn session(&self) -> Box<dyn LmSession + '_> {
        Box::new(Session::new(self))
    }
}

/// Incremental decoding with cached keys and values.
pub struct Session<'m, F> {
    model: &'m Transformer<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    pos: usize,
    logp: Vec<f32>,
}

impl<'m, F: Scalar> Session<'m, F> {
    fn new(model: &'m Transformer<F>) -> Self {
        let c = &model.config;
        let cap = c.max_seq_len * c.d_model;
        let mut s = Self {
            model,
            keys: vec![vec![F::zero(); cap]; c.n_layers],
            values: vec![vec![F::zero(); cap]; c.n_layers],
            pos: 0,
            logp: vec![0.0; c.vocab_size],
        };
        s.step(c.bos_token);
        s
    }

    fn step(&mut self, token: TokenId) {
        let m = self.model;
        let c = &m.config;
        let lay = &m.layout;
        let (d, ff, v, nh, hd, pos) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim(), self.pos);
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let (tok, pe) = (m.p(lay.tok_emb), m.p(lay.pos_emb));
        let id = token as usize;
        let mut x: Vec<F> = (0..d).map(|j| tok[id * d + j] + pe[pos * d + j]).collect();
        let mut h = vec![F::zero(); d];
        let mut scores = vec![F::zero(); pos + 1];
        for (l, b) in lay.blocks.iter().enumerate() {
            layer_norm(&x, m.p(b.ln1_g), m.p(b.ln1_b), &mut h);
            let mut qkv = m.p(b.qkv_b).to_vec();
            matmul(&h, m.p(b.qkv_w), &mut qkv, 1, d, 3 * d, true);
            self.keys[l][pos * d..(pos + 1) * d].copy_from_slice(&qkv[d..2 * d]);
            self.values[l][pos * d..(pos + 1) * d].copy_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut y = vec![F::zero(); d];
            for hh in 0..nh {
                let q = &qkv[hh * hd..(hh + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + hh * hd..j * d + (hh + 1) * hd];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<F>() * scale;
                }
                softmax(&mut scores);
                let yh = &mut y[hh * hd..(hh + 1) * hd];
                for (j, &s) in scores.iter().enumerate() {
                    let vv = &values[j * d + hh * hd..j * d + (hh + 1) * hd];
                    yh.iter_mut().zip(vv).for_each(|(o, &val)| *o += s * val);
                }
            }
            let mut ao = m.p(b.proj_b).to_vec();
            matmul(&y, m.p(b.proj_w), &mut ao, 1, d, d, true);
            add_assign(&mut x, &ao);

            layer_norm(&x, m.p(b.ln2_g), m.p(b.ln2_b), &mut h);
            let mut f = m.p(b.fc_b).to_vec();
            matmul(&h, m.p(b.fc_w), &mut f, 1, d, ff, true);
            f.iter_mut().for_each(|z| *z = gelu(*z));
            let mut mo = m.p(b.out_b).to_vec();
            matmul(&f, m.p(b.out_w), &mut mo, 1, ff, d, true);
            add_assign(&mut x, &mo);
        }
        layer_norm(&x, m.p(lay.lnf_g), m.p(lay.lnf_b), &mut h);
        let mut logits = vec![F::zero(); v];
        matmul(&h, m.p(lay.head_w), &mut logits, 1, d, v, false);
        log_softmax(&mut logits);
        self.logp = logits.iter().map(|z| z.to_f32().unwrap_or(f32::NAN)).collect();
        self.pos += 1;
    }
}

impl<F: Scalar> LmSession for Session<'_, F> {
    fn next_log_probs(&self) -> &[f32] {
        &self.logp
    }

    fn push(&mut self, token: TokenId) -> Result<(), ModelError> {
        let c = &self.model.config;
        if token as usize >= c.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: c.vocab_size });
        }
        if self.pos >= c.max_seq_len {
            return Err(ModelError::ContextOverflow { len: self.len() + 1, limit: c.max_seq_len });
        }
        self.step(token);
        Ok(())
    }

    fn len(&self) -> usize {
        self.pos - 1
    }
}
