use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{add_assign, add_matmul_at_b, matmul, matmul_a_bt, Tensor};
use crate::corpus::SectionKind;
use crate::scalar::{sigmoid, softmax, Scalar};

pub const N_SECTIONS: usize = SectionKind::ALL.len();

const TOK: usize = 0;
const POS: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const W1: usize = 6;
const B1: usize = 7;
const W2: usize = 8;
const B2: usize = 9;
const GEN_W: usize = 10;
const GEN_B: usize = 11;
const DISC_W: usize = 12;
const DISC_B: usize = 13;
const SEC_W: usize = 14;
const SEC_B: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            d_ff: 64,
            max_len: 128,
        }
    }
}

/// Token + position embeddings, one single-head self-attention block and a
/// tanh feed-forward block (both residual), with generator, discriminator and
/// section heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder<T> {
    pub cfg: EncoderConfig,
    pub params: Vec<Tensor<T>>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    ids: Vec<u32>,
    x0: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    ctx: Vec<T>,
    h1: Vec<T>,
    g: Vec<T>,
    /// Final token encodings, `n x d`.
    pub h: Vec<T>,
}

impl<T> Cache<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub type Grads<T> = Vec<Vec<T>>;

impl<T: Scalar> TinyEncoder<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Self {
        let (v, d, f, l) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |name: &str, shape: &[usize], std: f64| {
            let mut t = Tensor::zeros(name, shape);
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                for x in &mut t.data {
                    *x = T::c(normal.sample(&mut rng));
                }
            }
            t
        };
        let proj = 1.0 / (d as f64).sqrt();
        let params = vec![
            init("tok_emb", &[v, d], 0.1),
            init("pos_emb", &[l, d], 0.1),
            init("attn.wq", &[d, d], proj),
            init("attn.wk", &[d, d], proj),
            init("attn.wv", &[d, d], proj),
            init("attn.wo", &[d, d], proj * 0.5),
            init("ffn.w1", &[d, f], proj),
            init("ffn.b1", &[f], 0.0),
            init("ffn.w2", &[f, d], 0.5 / (f as f64).sqrt()),
            init("ffn.b2", &[d], 0.0),
            init("gen.w", &[d, v], 0.02),
            init("gen.b", &[v], 0.0),
            init("disc.w", &[d], 0.02),
            init("disc.b", &[1], 0.0),
            init("sec.w", &[d, N_SECTIONS], 0.02),
            init("sec.b", &[N_SECTIONS], 0.0),
        ];
        Self { cfg, params }
    }

    pub fn from_params(cfg: EncoderConfig, params: Vec<Tensor<T>>) -> Self {
        Self { cfg, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> TinyEncoder<U> {
        TinyEncoder {
            cfg: self.cfg,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn p(&self, i: usize) -> &[T] {
        &self.params[i].data
    }

    /// Token encodings for `ids` (length at most `max_len`).
    pub fn encode(&self, ids: &[u32]) -> Cache<T> {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        let n = ids.len();
        assert!(
            n <= self.cfg.max_len,
            "sequence of {n} exceeds context {}",
            self.cfg.max_len
        );
        let mut x0 = vec![T::zero(); n * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = (id as usize).min(self.cfg.vocab_size - 1);
            let e = &self.p(TOK)[id * d..(id + 1) * d];
            let pe = &self.p(POS)[t * d..(t + 1) * d];
            for j in 0..d {
                x0[t * d + j] = e[j] + pe[j];
            }
        }
        let q = matmul(&x0, n, d, self.p(WQ), d);
        let k = matmul(&x0, n, d, self.p(WK), d);
        let v = matmul(&x0, n, d, self.p(WV), d);
        let scale = T::one() / T::c(d as f64).sqrt();
        let scores = matmul_a_bt(&q, n, d, &k, n);
        let mut attn = Vec::with_capacity(n * n);
        for i in 0..n {
            let row: Vec<T> = scores[i * n..(i + 1) * n].iter().map(|&s| s * scale).collect();
            attn.extend(softmax(&row));
        }
        let ctx = matmul(&attn, n, n, &v, d);
        let mut h1 = matmul(&ctx, n, d, self.p(WO), d);
        add_assign(&mut h1, &x0);
        let mut u = matmul(&h1, n, d, self.p(W1), f);
        for i in 0..n {
            add_assign(&mut u[i * f..(i + 1) * f], self.p(B1));
        }
        let g: Vec<T> = u.iter().map(|x| x.tanh()).collect();
        let mut h = matmul(&g, n, f, self.p(W2), d);
        for i in 0..n {
            add_assign(&mut h[i * d..(i + 1) * d], self.p(B2));
        }
        add_assign(&mut h, &h1);
        Cache {
            ids: ids.to_vec(),
            x0,
            q,
            k,
            v,
            attn,
            ctx,
            h1,
            g,
            h,
        }
    }

    /// Accumulates parameter gradients given `dL/dh` (`n x d`).
    pub fn backward(&self, c: &Cache<T>, dh: &[T], grads: &mut Grads<T>) {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        let n = c.ids.len();
        // feed-forward block
        add_matmul_at_b(&mut grads[W2], &c.g, n, f, dh, d);
        for i in 0..n {
            add_assign(&mut grads[B2], &dh[i * d..(i + 1) * d]);
        }
        let dg = matmul_a_bt(dh, n, d, self.p(W2), f);
        let du: Vec<T> = dg.iter().zip(&c.g).map(|(&a, &g)| a * (T::one() - g * g)).collect();
        add_matmul_at_b(&mut grads[W1], &c.h1, n, d, &du, f);
        for i in 0..n {
            add_assign(&mut grads[B1], &du[i * f..(i + 1) * f]);
        }
        let mut dh1 = matmul_a_bt(&du, n, f, self.p(W1), d);
        add_assign(&mut dh1, dh);
        // attention block
        add_matmul_at_b(&mut grads[WO], &c.ctx, n, d, &dh1, d);
        let dctx = matmul_a_bt(&dh1, n, d, self.p(WO), d);
        let da = matmul_a_bt(&dctx, n, d, &c.v, n);
        let mut dv = vec![T::zero(); n * d];
        add_matmul_at_b(&mut dv, &c.attn, n, n, &dctx, d);
        let scale = T::one() / T::c(d as f64).sqrt();
        let mut ds = vec![T::zero(); n * n];
        for i in 0..n {
            let a = &c.attn[i * n..(i + 1) * n];
            let g = &da[i * n..(i + 1) * n];
            let dot: T = a.iter().zip(g).map(|(&x, &y)| x * y).sum();
            for j in 0..n {
                ds[i * n + j] = a[j] * (g[j] - dot) * scale;
            }
        }
        let dq = matmul(&ds, n, n, &c.k, d);
        let mut dk = vec![T::zero(); n * d];
        add_matmul_at_b(&mut dk, &ds, n, n, &c.q, d);
        add_matmul_at_b(&mut grads[WQ], &c.x0, n, d, &dq, d);
        add_matmul_at_b(&mut grads[WK], &c.x0, n, d, &dk, d);
        add_matmul_at_b(&mut grads[WV], &c.x0, n, d, &dv, d);
        let mut dx0 = dh1;
        add_assign(&mut dx0, &matmul_a_bt(&dq, n, d, self.p(WQ), d));
        add_assign(&mut dx0, &matmul_a_bt(&dk, n, d, self.p(WK), d));
        add_assign(&mut dx0, &matmul_a_bt(&dv, n, d, self.p(WV), d));
        for (t, &id) in c.ids.iter().enumerate() {
            let id = (id as usize).min(self.cfg.vocab_size - 1);
            let row = &dx0[t * d..(t + 1) * d];
            add_assign(&mut grads[TOK][id * d..(id + 1) * d], row);
            add_assign(&mut grads[POS][t * d..(t + 1) * d], row);
        }
    }

    /// Vocabulary logits at `positions`.
    pub fn gen_logits(&self, h: &[T], positions: &[usize]) -> Vec<Vec<T>> {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        positions
            .iter()
            .map(|&p| {
                let mut row = matmul(&h[p * d..(p + 1) * d], 1, d, self.p(GEN_W), v);
                add_assign(&mut row, self.p(GEN_B));
                row
            })
            .collect()
    }

    /// Generator distributions at the masked positions of `x_masked`.
    pub fn forward_generator(&self, x_masked: &[u32], positions: &[usize]) -> Vec<Vec<T>> {
        let c = self.encode(x_masked);
        self.gen_logits(&c.h, positions).iter().map(|r| softmax(r)).collect()
    }

    pub fn gen_backward(&self, h: &[T], positions: &[usize], dlogits: &[Vec<T>], dh: &mut [T], grads: &mut Grads<T>) {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        for (&p, dl) in positions.iter().zip(dlogits) {
            let hp = &h[p * d..(p + 1) * d];
            add_matmul_at_b(&mut grads[GEN_W], hp, 1, d, dl, v);
            add_assign(&mut grads[GEN_B], dl);
            add_assign(&mut dh[p * d..(p + 1) * d], &matmul_a_bt(dl, 1, v, self.p(GEN_W), d));
        }
    }

    /// One logit per position; `sigmoid` gives the probability the token is original.
    pub fn disc_logits(&self, h: &[T]) -> Vec<T> {
        let d = self.cfg.d_model;
        let w = self.p(DISC_W);
        let b = self.p(DISC_B)[0];
        h.chunks(d)
            .map(|row| row.iter().zip(w).map(|(&x, &y)| x * y).sum::<T>() + b)
            .collect()
    }

    pub fn disc_probs(&self, ids: &[u32]) -> Vec<T> {
        let c = self.encode(ids);
        self.disc_logits(&c.h).into_iter().map(sigmoid).collect()
    }

    pub fn disc_backward(&self, h: &[T], dlogits: &[T], dh: &mut [T], grads: &mut Grads<T>) {
        let d = self.cfg.d_model;
        let w = self.p(DISC_W).to_vec();
        for (t, &dy) in dlogits.iter().enumerate() {
            let row = &h[t * d..(t + 1) * d];
            for j in 0..d {
                grads[DISC_W][j] += dy * row[j];
                dh[t * d + j] += dy * w[j];
            }
            grads[DISC_B][0] += dy;
        }
    }

    /// Mean of the token encodings over `[start, end)`.
    pub fn pool(&self, h: &[T], start: usize, end: usize) -> Vec<T> {
        let d = self.cfg.d_model;
        let inv = T::one() / T::c((end - start) as f64);
        let mut out = vec![T::zero(); d];
        for t in start..end {
            add_assign(&mut out, &h[t * d..(t + 1) * d]);
        }
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }

    /// Spreads a pooled-encoding gradient back over `[start, end)`.
    pub fn pool_backward(&self, dpooled: &[T], start: usize, end: usize, dh: &mut [T]) {
        let d = self.cfg.d_model;
        let inv = T::one() / T::c((end - start) as f64);
        for t in start..end {
            for j in 0..d {
                dh[t * d + j] += dpooled[j] * inv;
            }
        }
    }

    pub fn section_logits(&self, pooled: &[T]) -> Vec<T> {
        let d = self.cfg.d_model;
        let mut z = matmul(pooled, 1, d, self.p(SEC_W), N_SECTIONS);
        add_assign(&mut z, self.p(SEC_B));
        z
    }

    /// Returns `dL/dpooled`.
    pub fn section_backward(&self, pooled: &[T], dz: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let d = self.cfg.d_model;
        add_matmul_at_b(&mut grads[SEC_W], pooled, 1, d, dz, N_SECTIONS);
        add_assign(&mut grads[SEC_B], dz);
        matmul_a_bt(dz, 1, N_SECTIONS, self.p(SEC_W), d)
    }

    pub fn predict_section(&self, ids: &[u32]) -> SectionKind {
        let c = self.encode(ids);
        let z = self.section_logits(&self.pool(&c.h, 0, ids.len()));
        let best = (0..N_SECTIONS)
            .max_by(|&a, &b| {
                z[a].partial_cmp(&z[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .expect("five sections");
        SectionKind::from_index(best).expect("index in range")
    }
}

/// Separate generator and discriminator encoders of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectraPair<T> {
    pub generator: TinyEncoder<T>,
    pub discriminator: TinyEncoder<T>,
}

impl<T: Scalar> ElectraPair<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Self {
        Self {
            generator: TinyEncoder::new(cfg, seed),
            discriminator: TinyEncoder::new(cfg, seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        }
    }
}

/// Replaces each position in `masked` by a draw from the matching row of `p_g`.
pub fn sample_corrupt<T: Scalar>(p_g: &[Vec<T>], x: &[u32], masked: &[usize], seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.to_vec();
    for (row, &pos) in p_g.iter().zip(masked) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (i, p) in row.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                pick = i;
                break;
            }
        }
        out[pos] = pick as u32;
    }
    out
}
