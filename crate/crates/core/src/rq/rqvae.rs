//! Residual-quantized autoencoder over precomputed item embeddings.
//!
//! Encoder and decoder are two-layer ReLU perceptrons trained with Adam on
//! reconstruction MSE plus a commitment term; the gradient passes straight
//! through the quantizer. Codewords are not trained by gradient: they are
//! seeded by level-wise k-means and then tracked with an exponential moving
//! average of their assigned residuals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quantize::{kmeans, quantize, CodebookStack, Quantized};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{Linear, Mlp};
use crate::optim::{AdamW, Gradients};
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeConfig {
    pub depth: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Commitment weight.
    pub beta: f64,
    pub ema_decay: f64,
    pub kmeans_iters: usize,
    /// Rows used for k-means seeding.
    pub warmup_rows: usize,
    /// Start encoder and decoder as exact identities (requires
    /// `latent_dim == embedding dim` and `hidden_dim == 2 * latent_dim`).
    pub identity_init: bool,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            depth: 3,
            codebook_size: 256,
            latent_dim: 32,
            hidden_dim: 64,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            beta: 0.25,
            ema_decay: 0.99,
            kmeans_iters: 10,
            warmup_rows: 1024,
            identity_init: false,
            seed: 0,
        }
    }
}

impl RqVaeConfig {
    pub const KEYS: [&'static str; 13] = [
        "rq_depth",
        "rq_codebook_size",
        "rq_latent_dim",
        "rq_hidden_dim",
        "rq_epochs",
        "rq_batch_size",
        "rq_lr",
        "rq_beta",
        "rq_ema_decay",
        "rq_kmeans_iters",
        "rq_warmup_rows",
        "rq_identity_init",
        "seed",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.fill("rq_depth", &mut self.depth)?;
        kv.fill("rq_codebook_size", &mut self.codebook_size)?;
        kv.fill("rq_latent_dim", &mut self.latent_dim)?;
        kv.fill("rq_hidden_dim", &mut self.hidden_dim)?;
        kv.fill("rq_epochs", &mut self.epochs)?;
        kv.fill("rq_batch_size", &mut self.batch_size)?;
        kv.fill("rq_lr", &mut self.lr)?;
        kv.fill("rq_beta", &mut self.beta)?;
        kv.fill("rq_ema_decay", &mut self.ema_decay)?;
        kv.fill("rq_kmeans_iters", &mut self.kmeans_iters)?;
        kv.fill("rq_warmup_rows", &mut self.warmup_rows)?;
        kv.fill("rq_identity_init", &mut self.identity_init)?;
        kv.fill("seed", &mut self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct RqVaeModel {
    pub modality: Modality,
    pub config: RqVaeConfig,
    pub emb_dim: usize,
    params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    pub codebooks: CodebookStack,
    trained: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RqTrainReport {
    /// Mean squared reconstruction error over all training rows; entry 0 is
    /// measured right after initialization, then one entry per epoch.
    pub recon_per_epoch: Vec<f64>,
    /// Final-epoch assignment counts, `usage[level][code]`.
    pub usage: Vec<Vec<usize>>,
    pub reseeded: usize,
}

fn identity_pair(dim: usize) -> (Tensor, Tensor) {
    let mut w1 = vec![0.0; dim * 2 * dim];
    let mut w2 = vec![0.0; 2 * dim * dim];
    for i in 0..dim {
        w1[i * 2 * dim + i] = 1.0;
        w1[i * 2 * dim + dim + i] = -1.0;
        w2[i * dim + i] = 1.0;
        w2[(dim + i) * dim + i] = -1.0;
    }
    (
        Tensor::new(vec![dim, 2 * dim], w1).unwrap(),
        Tensor::new(vec![2 * dim, dim], w2).unwrap(),
    )
}

impl RqVaeModel {
    /// A fresh, untrained model.
    pub fn new<R: Rng>(modality: Modality, emb_dim: usize, config: RqVaeConfig, rng: &mut R) -> Result<Self> {
        if config.depth == 0 || config.codebook_size == 0 || config.latent_dim == 0 || emb_dim == 0 {
            return Err(Error::Config("RQ-VAE dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        let (encoder, decoder) = if config.identity_init {
            if config.latent_dim != emb_dim || config.hidden_dim != 2 * emb_dim {
                return Err(Error::Config(format!(
                    "identity init needs latent_dim == emb_dim ({emb_dim}) and hidden_dim == {}",
                    2 * emb_dim
                )));
            }
            let zeros = |n| Some(Tensor::zeros(vec![n]));
            let (a, b) = identity_pair(emb_dim);
            let enc = Mlp {
                first: Linear::from_tensors(&mut params, "enc.0", a.clone(), zeros(2 * emb_dim)),
                second: Linear::from_tensors(&mut params, "enc.1", b.clone(), zeros(emb_dim)),
            };
            let dec = Mlp {
                first: Linear::from_tensors(&mut params, "dec.0", a, zeros(2 * emb_dim)),
                second: Linear::from_tensors(&mut params, "dec.1", b, zeros(emb_dim)),
            };
            (enc, dec)
        } else {
            let (h, d) = (config.hidden_dim, config.latent_dim);
            let enc = Mlp {
                first: Linear::new(&mut params, "enc.0", emb_dim, h, true, rng),
                second: Linear::new(&mut params, "enc.1", h, d, true, rng),
            };
            let dec = Mlp {
                first: Linear::new(&mut params, "dec.0", d, h, true, rng),
                second: Linear::new(&mut params, "dec.1", h, emb_dim, true, rng),
            };
            (enc, dec)
        };
        let codebooks = CodebookStack::zeros(modality, config.depth, config.codebook_size, config.latent_dim);
        Ok(RqVaeModel {
            modality,
            emb_dim,
            params,
            encoder,
            decoder,
            codebooks,
            trained: false,
            config,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Rebuild a trained model from stored weights and codebooks.
    pub fn from_parts(
        modality: Modality,
        emb_dim: usize,
        config: RqVaeConfig,
        weights: &[(String, Tensor)],
        codebooks: CodebookStack,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = RqVaeModel::new(modality, emb_dim, config, &mut rng)?;
        m.params.load_named(weights)?;
        if codebooks.depth() != m.config.depth
            || codebooks.size() != m.config.codebook_size
            || codebooks.dim() != m.config.latent_dim
        {
            return Err(Error::shape(
                "codebooks",
                &[m.config.depth, m.config.codebook_size, m.config.latent_dim],
                &[codebooks.depth(), codebooks.size(), codebooks.dim()],
            ));
        }
        m.codebooks = codebooks;
        m.trained = true;
        Ok(m)
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.emb_dim {
            return Err(Error::shape("rq-vae input", &[self.emb_dim], &[x.len()]));
        }
        Ok(())
    }

    pub fn encode_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        for r in rows {
            self.check_row(r)?;
        }
        let mut g = Graph::inference();
        let x = g.constant(vec![rows.len(), self.emb_dim], rows.concat())?;
        let z = self.encoder.forward(&mut g, &self.params, x)?;
        let d = self.config.latent_dim;
        Ok(g.data(z).chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(&x.to_vec()))?.remove(0))
    }

    pub fn decode_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let zv = g.constant(vec![1, z.len()], z.to_vec())?;
        let y = self.decoder.forward(&mut g, &self.params, zv)?;
        Ok(g.data(y).to_vec())
    }

    pub fn quantize(&self, x: &[f64]) -> Result<Quantized> {
        let z = self.encode(x)?;
        quantize(&z, &self.codebooks)
    }

    /// Decode from the sum of the first `levels` selected codewords.
    pub fn reconstruct(&self, x: &[f64], levels: usize) -> Result<Vec<f64>> {
        let q = self.quantize(x)?;
        let levels = levels.min(self.codebooks.depth());
        let mut zq = vec![0.0; self.config.latent_dim];
        for (l, &c) in q.codes.iter().enumerate().take(levels) {
            for (a, b) in zq.iter_mut().zip(self.codebooks.codeword(l, c)) {
                *a += b;
            }
        }
        self.decode_latent(&zq)
    }

    /// Mean squared reconstruction error over `rows` using all levels.
    pub fn reconstruction_error(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let zs = self.encode_batch(rows)?;
        let mut zq_rows = Vec::with_capacity(rows.len() * self.config.latent_dim);
        for z in &zs {
            zq_rows.extend(quantize(z, &self.codebooks)?.reconstruction());
        }
        let mut g = Graph::inference();
        let zq = g.constant(vec![rows.len(), self.config.latent_dim], zq_rows)?;
        let y = self.decoder.forward(&mut g, &self.params, zq)?;
        let total: f64 = g
            .data(y)
            .iter()
            .zip(rows.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(total / (rows.len() * self.emb_dim) as f64)
    }
}

struct EmaState {
    sizes: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
}

/// Train one modality's quantizer.
pub fn train_rqvae(
    embeddings: &[Vec<f64>],
    modality: Modality,
    config: &RqVaeConfig,
) -> Result<(RqVaeModel, RqTrainReport)> {
    let n = embeddings.len();
    let k = config.codebook_size;
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} embeddings for a codebook of size {k}"
        )));
    }
    let emb_dim = embeddings[0].len();
    if emb_dim == 0 {
        return Err(Error::InsufficientData("embedding dimension is zero".into()));
    }
    if embeddings.iter().any(|r| r.len() != emb_dim) {
        return Err(Error::Contract("embedding rows have different lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RqVaeModel::new(modality, emb_dim, config.clone(), &mut rng)?;
    let d = config.latent_dim;
    let depth = config.depth;

    // k-means seeding on level-wise residuals of a warm-up batch.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let warm: Vec<Vec<f64>> = order[..config.warmup_rows.clamp(k, n)]
        .iter()
        .map(|&i| embeddings[i].clone())
        .collect();
    let mut residuals = model.encode_batch(&warm)?;
    let mut ema = EmaState {
        sizes: Vec::with_capacity(depth),
        sums: Vec::with_capacity(depth),
    };
    for level in 0..depth {
        let (centroids, counts) = kmeans(&residuals, k, config.kmeans_iters, &mut rng);
        model.codebooks.set_level(level, centroids.clone());
        let sizes: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
        let mut sums = vec![0.0; k * d];
        for c in 0..k {
            for j in 0..d {
                sums[c * d + j] = centroids[c * d + j] * sizes[c];
            }
        }
        ema.sizes.push(sizes);
        ema.sums.push(sums);
        for r in residuals.iter_mut() {
            let c = model.codebooks.nearest(level, r);
            for (a, b) in r.iter_mut().zip(model.codebooks.codeword(level, c)) {
                *a -= b;
            }
        }
    }

    let mut report = RqTrainReport {
        recon_per_epoch: vec![model.reconstruction_error(embeddings)?],
        ..Default::default()
    };
    let mut opt = AdamW::new(&model.params, config.lr, 0.0);
    let batch = config.batch_size.max(1);

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![vec![0usize; k]; depth];
        for chunk in order.chunks(batch) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| embeddings[i].clone()).collect();
            let b = rows.len();
            let mut g = Graph::new();
            let x = g.constant(vec![b, emb_dim], rows.concat())?;
            let z = model.encoder.forward(&mut g, &model.params, x)?;
            let zvals: Vec<Vec<f64>> = g.data(z).chunks(d).map(<[f64]>::to_vec).collect();

            // Assignments and level inputs with the current codebooks.
            let quant: Vec<Quantized> = zvals
                .iter()
                .map(|zr| quantize(zr, &model.codebooks))
                .collect::<Result<_>>()?;

            let mut st_shift = Vec::with_capacity(b * d);
            for q in &quant {
                let zq = q.reconstruction();
                st_shift.extend(zq.iter().zip(&q.residuals[0]).map(|(a, zz)| a - zz));
            }
            let shift = g.constant(vec![b, d], st_shift)?;
            let z_st = g.add(z, shift)?;
            let recon = model.decoder.forward(&mut g, &model.params, z_st)?;
            let err = g.sub(recon, x)?;
            let sq = g.mul(err, err)?;
            let mut loss = g.mean(sq);

            for level in 0..depth {
                // r_{l-1} - sg(e_c) = z - sg(sum of codewords up to and including l)
                let mut target = Vec::with_capacity(b * d);
                for q in &quant {
                    let inp = &q.residuals[level];
                    let cw = model.codebooks.codeword(level, q.codes[level]);
                    target.extend(q.residuals[0].iter().zip(inp).zip(cw).map(|((zz, r), e)| zz - r + e));
                }
                let t = g.constant(vec![b, d], target)?;
                let diff = g.sub(z, t)?;
                let dsq = g.mul(diff, diff)?;
                let s = g.sum(dsq);
                let term = g.scale(s, config.beta / b as f64);
                loss = g.add(loss, term)?;
            }
            g.backward(loss)?;
            let mut grads = Gradients::zeros(&model.params);
            for (id, gr) in g.param_grads() {
                grads.accumulate(id, gr);
            }
            opt.step(&mut model.params, &grads);

            // EMA codeword updates.
            for level in 0..depth {
                let mut counts = vec![0.0; k];
                let mut sums = vec![0.0; k * d];
                for q in &quant {
                    let c = q.codes[level];
                    counts[c] += 1.0;
                    usage[level][c] += 1;
                    for (s, r) in sums[c * d..(c + 1) * d].iter_mut().zip(&q.residuals[level]) {
                        *s += r;
                    }
                }
                let gamma = config.ema_decay;
                let sizes = &mut ema.sizes[level];
                let esums = &mut ema.sums[level];
                for c in 0..k {
                    sizes[c] = gamma * sizes[c] + (1.0 - gamma) * counts[c];
                }
                for (e, s) in esums.iter_mut().zip(&sums) {
                    *e = gamma * *e + (1.0 - gamma) * s;
                }
                let total: f64 = sizes.iter().sum();
                const EPS: f64 = 1e-5;
                for c in 0..k {
                    let smoothed = (sizes[c] + EPS) / (total + k as f64 * EPS) * total;
                    let cw = model.codebooks.codeword_mut(level, c);
                    for j in 0..d {
                        cw[j] = esums[c * d + j] / smoothed;
                    }
                }
            }
        }

        // Reseed codes that went unused for the whole epoch.
        let dead: Vec<(usize, usize)> = (0..depth)
            .flat_map(|l| (0..k).map(move |c| (l, c)))
            .filter(|&(l, c)| usage[l][c] == 0)
            .collect();
        if !dead.is_empty() {
            let picks: Vec<usize> = dead.iter().map(|_| rng.random_range(0..n)).collect();
            let rows: Vec<Vec<f64>> = picks.iter().map(|&i| embeddings[i].clone()).collect();
            let zs = model.encode_batch(&rows)?;
            for (&(level, c), z) in dead.iter().zip(&zs) {
                let q = quantize(z, &model.codebooks)?;
                let r = q.residuals[level].clone();
                model.codebooks.codeword_mut(level, c).copy_from_slice(&r);
                ema.sizes[level][c] = 1.0;
                ema.sums[level][c * d..(c + 1) * d].copy_from_slice(&r);
            }
            report.reseeded += dead.len();
        }
        report.usage = usage;
        report.recon_per_epoch.push(model.reconstruction_error(embeddings)?);
    }
    if !model.codebooks.is_finite() {
        return Err(Error::NonFinite {
            step: config.epochs,
            detail: "codebook diverged".into(),
        });
    }
    model.trained = true;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_rows() {
        let rows = vec![vec![0.0; 4]; 3];
        let cfg = RqVaeConfig {
            codebook_size: 4,
            ..Default::default()
        };
        assert!(matches!(
            train_rqvae(&rows, Modality::Text, &cfg),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn identity_init_is_exact() {
        let cfg = RqVaeConfig {
            latent_dim: 3,
            hidden_dim: 6,
            identity_init: true,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RqVaeModel::new(Modality::Text, 3, cfg, &mut rng).unwrap();
        let x = [0.5, -2.0, 3.0];
        assert_eq!(m.encode(&x).unwrap(), x.to_vec());
        assert_eq!(m.decode_latent(&x).unwrap(), x.to_vec());
        assert!(!m.is_trained());
    }
}
